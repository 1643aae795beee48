//! Runs every default editor on the same entities and prints a summary
//! table: target perplexity, specificity drift and probe accuracy.

use entity_distill::pipeline::{RunConfig, Workbench, Evaluator};

fn main() -> entity_distill::Result<()> {
    let cfg = RunConfig::small();
    let bench = Workbench::build(&cfg)?;
    let evaluator = Evaluator::new(&bench, bench.edit_items()?)?;
    println!("{:<26} {:>9} {:>9} {:>10} {:>9}", "editor", "pre", "post", "spec", "acc");
    for &kind in &cfg.editors {
        let run = evaluator.run(kind, &cfg.editor_config(kind), cfg.eval.mode, &mut |_, _, _| Ok(()))?;
        println!(
            "{:<26} {:>9.2} {:>9.2} {:>+9.2}% {:>9.2}",
            kind.name(),
            run.report.target_pre,
            run.report.target_post,
            100.0 * run.specificity_relative(),
            run.report.accuracy_post.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

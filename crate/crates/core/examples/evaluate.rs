//! Evaluation utilities on a distilled entity: per-token NLL reduction
//! from conditioning on the definition, and a paired bootstrap between
//! two editors.

use entity_distill::baselines::EditorKind;
use entity_distill::evalsuite::{nll_reduction_analysis, paired_bootstrap};
use entity_distill::pipeline::{EditMode, Evaluator, RunConfig, Workbench};

fn main() -> entity_distill::Result<()> {
    let cfg = RunConfig::small();
    let bench = Workbench::build(&cfg)?;
    let items = bench.edit_items()?;

    let (entity, set) = &items[0];
    let rows = nll_reduction_analysis(&bench.base, &entity.definition, &set.continuations)?;
    let mean_of = |copied: bool| {
        let v: Vec<f64> = rows.iter().filter(|r| r.in_definition == copied).map(|r| r.reduction).collect();
        (v.iter().sum::<f64>() / v.len().max(1) as f64, v.len())
    };
    let (inside, n_in) = mean_of(true);
    let (outside, n_out) = mean_of(false);
    println!("mean relative NLL reduction from the definition: {inside:.3} on {n_in} copied tokens, {outside:.3} on {n_out} others");

    let evaluator = Evaluator::new(&bench, items)?;
    let run = |k: EditorKind| evaluator.run(k, &cfg.editor_config(k), EditMode::Single, &mut |_, _, _| Ok(()));
    let distill = run(EditorKind::Distill)?;
    let ft = run(EditorKind::FtDefinitionFull)?;
    let p = paired_bootstrap(&distill.target_post.values(), &ft.target_post.values(), cfg.eval.bootstrap_resamples, cfg.seed)?;
    println!(
        "target perplexity: distill {:.2}, ft-definition {:.2}; p(distill not lower) = {p:.3}",
        distill.report.target_post, ft.report.target_post
    );
    Ok(())
}

//! Sweeps the number of distinct continuations at a fixed update budget
//! and prints the aggregated curve.

use entity_distill::baselines::EditorKind;
use entity_distill::pipeline::{sweep, RunConfig, SweepAxis, Workbench};

fn main() -> entity_distill::Result<()> {
    let mut cfg = RunConfig::small();
    cfg.editors = vec![EditorKind::Distill];
    cfg.sweep.seeds = vec![0, 1];
    let bench = Workbench::build(&cfg)?;
    let rows = sweep::sweep(&bench, SweepAxis::NContinuations, &[1.0, 2.0, 5.0, 10.0])?;
    for p in sweep::aggregate(&rows) {
        println!(
            "n_continuations {:>4}: target {:.2} [{:.2}, {:.2}], specificity {:+.2}%",
            p.value,
            p.target_post_mean,
            p.target_post_min,
            p.target_post_max,
            100.0 * p.specificity_relative_mean
        );
    }
    Ok(())
}

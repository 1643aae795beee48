//! Distills one entity's definition into a copy of the base model and
//! compares probe perplexity before, after, and with the definition
//! prepended.

use entity_distill::distiller::distill_entity;
use entity_distill::evalsuite::{eval_target_ppl, Prepend};
use entity_distill::lm::Role;
use entity_distill::pipeline::{RunConfig, Workbench};
use entity_distill::baselines::EditorKind;

fn main() -> entity_distill::Result<()> {
    let cfg = RunConfig::small();
    let bench = Workbench::build(&cfg)?;
    let (entity, set) = bench.edit_items()?.remove(0);
    let probes = bench.probes(&entity.id);

    let mut student = bench.base.deep_copy(Role::Student);
    let record = distill_entity(&bench.base, &mut student, &entity, &set, &cfg.editor_config(EditorKind::Distill))?;
    let first = record.losses.first().map_or(f64::NAN, |l| l.loss);
    let last = record.losses.last().map_or(f64::NAN, |l| l.loss);
    println!("{} steps, KL {first:.4} -> {last:.4} in {:.2}s", record.losses.len(), record.wall_time_s);

    let pre = eval_target_ppl(&bench.base, &probes, Prepend::None)?.mean;
    let post = eval_target_ppl(&student, &probes, Prepend::None)?.mean;
    let prepend = eval_target_ppl(&bench.base, &probes, Prepend::Fixed(&entity.definition))?.mean;
    println!("target perplexity: base {pre:.2}, distilled {post:.2}, base with definition {prepend:.2}");
    Ok(())
}

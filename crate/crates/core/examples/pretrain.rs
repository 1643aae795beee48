//! Pretrains the base model on a small world, then saves and reloads the
//! checkpoint.

use entity_distill::lm::{load_checkpoint, save_checkpoint};
use entity_distill::pipeline::{experiment, RunConfig};

fn main() -> entity_distill::Result<()> {
    let cfg = RunConfig::small();
    let (world, corpus, vocab) = experiment::build_world(&cfg)?;
    let (model, log) = experiment::pretrain_base(&cfg, &world, &corpus, &vocab)?;
    for entry in log.iter().step_by(100).chain(log.last()) {
        println!("step {:>4}  lr {:.2e}  loss {:.3}", entry.step, entry.lr, entry.loss);
    }
    println!("{} parameters", model.param_count());

    let dir = std::env::temp_dir().join("entity-distill-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("base.ckpt");
    save_checkpoint(&model, &path)?;
    let back = load_checkpoint(&path)?;
    println!("checkpoint {} round-trips: {}", path.display(), back.checksum() == model.checksum());
    Ok(())
}

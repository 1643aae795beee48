//! Samples a transfer set for a held-out entity: continuations of its
//! definition, each guaranteed to mention the entity.

use entity_distill::pipeline::{RunConfig, Workbench};
use entity_distill::sampler::transfer_stats;

fn main() -> entity_distill::Result<()> {
    let cfg = RunConfig::small();
    let bench = Workbench::build(&cfg)?;
    let entity = bench.entity_tokens(&bench.select_entities(1, cfg.seed)?).remove(0);
    println!("definition: {}", bench.vocab.decode(&entity.definition));

    let set = bench.transfer_sets(std::slice::from_ref(&entity), cfg.edit.n_continuations, cfg.seed)?.remove(0);
    for c in &set.continuations {
        let (head, tail) = c.tokens.ids().split_at(c.ell);
        let note = if c.mention_prepended { " (name prepended)" } else { "" };
        println!("  [{}] | {}{note}", bench.vocab.decode(head), bench.vocab.decode(tail));
    }
    let stats = transfer_stats(&set, &entity.definition)?;
    println!(
        "mean length {:.1} tokens, {:.0}% of tokens appear in the definition, {:.1} supervised tokens each",
        stats.mean_tokens,
        stats.pct_in_definition,
        stats.mean_tokens_after_ell
    );
    Ok(())
}

//! Generates a small synthetic world and shows what each tier of entity
//! looks like: definition, probes and corpus coverage.

use entity_distill::pipeline::{experiment, RunConfig};
use entity_distill::world::{corpus_token_counts, Tier};

fn main() -> entity_distill::Result<()> {
    let cfg = RunConfig::small();
    let (world, corpus, vocab) = experiment::build_world(&cfg)?;
    println!("{} entities, {} corpus documents, vocabulary {}", world.entities.len(), corpus.len(), vocab.size());
    println!("sample document: {}", corpus[0]);

    let counts = corpus_token_counts(&corpus);
    for tier in [Tier::Popular, Tier::Novel, Tier::Background] {
        let e = world.by_tier(tier).next().expect("tier is populated");
        let seen: usize = e.name.split(' ').map(|t| counts.get(t).copied().unwrap_or(0)).sum();
        println!("\n{tier:?} entity {} ({}), name tokens seen {seen} times in the corpus", e.id, e.name);
        println!("  definition: {}", e.definition);
        for p in world.probes_for(&e.id).iter().take(3) {
            println!("  probe {}: {} => {}", p.id, p.prefix, p.target);
        }
    }
    Ok(())
}

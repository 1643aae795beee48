//! Builds a vocabulary from a toy corpus, round-trips text through it and
//! locates an entity mention in a continuation.

use entity_distill::tokenizer::{build_vocab, decode, encode, find_entity_end};

fn main() -> entity_distill::Result<()> {
    let corpus = [
        "Zorvak Telin is a river port founded in 1874 .",
        "Zorvak Telin lies in Keldra , where people speak Ostic .",
        "The river port exports grain .",
    ];
    let vocab = build_vocab(&corpus, 64)?;
    println!("vocabulary: {} tokens", vocab.size());

    let ids = encode("Zorvak Telin exports timber .", &vocab);
    println!("ids: {:?}", ids.ids());
    println!("decoded (out-of-vocabulary words become <unk>): {}", decode(&ids, &vocab));

    let name = encode("Zorvak Telin", &vocab);
    let cont = encode("The river port Zorvak Telin exports grain .", &vocab);
    let ell = find_entity_end(&cont, &name)?;
    println!("mention ends after token {ell}; supervised tail: {}", decode(&cont.ids()[ell..], &vocab));
    Ok(())
}

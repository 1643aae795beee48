//! Synthetic universe of fictitious entities: schema, definitions, a
//! pretraining corpus that never mentions held-out entities, cloze probes
//! whose answers follow from the definition, and the specificity split.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, StreamRng};
use crate::sampler::EntityTokens;
use crate::tokenizer::{self, TokenSeq, Vocabulary};

/// Prompt token placed before a definition when asking the generator for a
/// continuation. Part of the pretraining corpus.
pub const CONTINUE_PROMPT: &str = "Continue:";

/// Size of the frozen specificity probe set.
/// Pronoun standing in for an entity already named earlier in a document.
pub const ANAPHOR: &str = "it";
pub const SPECIFICITY_PROBES: usize = 40;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub name: String,
    pub domain: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Country {
    pub name: String,
    pub language: String,
    pub cities: Vec<String>,
}

/// Attribute vocabulary of the world.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub categories: Vec<Category>,
    pub countries: Vec<Country>,
    pub years: Vec<u32>,
    pub properties: Vec<String>,
}

impl Default for Schema {
    fn default() -> Self {
        let cats = [
            ("storm", "nature"),
            ("river", "nature"),
            ("band", "culture"),
            ("festival", "culture"),
            ("company", "commerce"),
            ("bank", "commerce"),
            ("ship", "transport"),
            ("bridge", "transport"),
            ("team", "sport"),
            ("league", "sport"),
        ];
        let countries = [
            ("Ardenia", "Ardenic"),
            ("Belmora", "Belmoran"),
            ("Corvania", "Corvanic"),
            ("Dravia", "Dravish"),
            ("Eskaland", "Eskan"),
            ("Fenmark", "Fennish"),
            ("Galtria", "Galtrian"),
            ("Hollvane", "Hollvish"),
            ("Istrenia", "Istrenic"),
            ("Jorvika", "Jorvic"),
            ("Kestria", "Kestrian"),
            ("Lunaris", "Lunaric"),
        ];
        let cities = [
            "Amberfall", "Ashmoor", "Aldwick", "Arrowby", "Brackwater", "Bellhaven", "Birchmere", "Brightholm",
            "Coldharbor", "Crestfield", "Cinderton", "Copperwell", "Dunmere", "Driftwood", "Dawnridge", "Deepvale",
            "Elmstead", "Emberly", "Eastmarch", "Eldergate", "Foxhollow", "Frostwick", "Fairhaven", "Fernbrook",
            "Glimmerton", "Greyhaven", "Goldcrest", "Glenmoor", "Highcliff", "Hollowmere", "Hawkstone", "Harrowgate",
            "Ironwood", "Ivybridge", "Islemont", "Irongate", "Juniperton", "Jadeport", "Jesterby", "Jolliford",
            "Kingsreach", "Kestrelby", "Kettlewell", "Knollbury", "Lakemont", "Larkspur", "Lowbridge", "Lindenholt",
        ];
        let properties = [
            "speed", "courage", "color", "beauty", "size", "history", "music", "food", "design", "power",
            "silence", "strength", "wisdom", "humor", "elegance", "safety", "comfort", "energy", "precision",
            "kindness", "charm", "patience", "ambition", "clarity", "harmony", "grace", "loyalty", "honesty",
            "balance", "freedom",
        ];
        let mut years = Vec::new();
        for decade in (1920..2000).step_by(10) {
            for off in [1, 3, 4, 6, 8] {
                years.push(decade + off);
            }
        }
        Schema {
            categories: cats
                .iter()
                .map(|(n, d)| Category { name: n.to_string(), domain: d.to_string() })
                .collect(),
            countries: countries
                .iter()
                .enumerate()
                .map(|(i, (n, l))| Country {
                    name: n.to_string(),
                    language: l.to_string(),
                    cities: cities[i * 4..i * 4 + 4].iter().map(|c| c.to_string()).collect(),
                })
                .collect(),
            years,
            properties: properties.iter().map(|p| p.to_string()).collect(),
        }
    }
}

impl Schema {
    pub fn validate(&self) -> Result<()> {
        if self.categories.is_empty()
            || self.countries.is_empty()
            || self.years.is_empty()
            || self.properties.is_empty()
            || self.countries.iter().any(|c| c.cities.is_empty())
        {
            return Err(Error::Config("schema has an empty attribute list".into()));
        }
        Ok(())
    }

    pub fn cities(&self) -> impl Iterator<Item = &str> {
        self.countries.iter().flat_map(|c| c.cities.iter().map(String::as_str))
    }

    pub fn country_of(&self, city: &str) -> Option<&Country> {
        self.countries.iter().find(|c| c.cities.iter().any(|x| x == city))
    }

    pub fn domain_of(&self, category: &str) -> Option<&str> {
        self.categories.iter().find(|c| c.name == category).map(|c| c.domain.as_str())
    }

    pub fn decade_of(year: u32) -> String {
        format!("{}s", year / 10 * 10)
    }

    fn domains(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.categories.iter().map(|c| c.domain.as_str()).collect();
        set.into_iter().map(str::to_string).collect()
    }

    fn decades(&self) -> Vec<String> {
        let set: BTreeSet<String> = self.years.iter().map(|&y| Self::decade_of(y)).collect();
        set.into_iter().collect()
    }

    fn combinations(&self) -> usize {
        self.categories.len() * self.cities().count() * self.years.len() * self.properties.len()
    }

    /// Every word the schema can emit.
    fn words(&self) -> HashSet<String> {
        let mut w: HashSet<String> = HashSet::new();
        for c in &self.categories {
            w.insert(c.name.clone());
            w.insert(c.domain.clone());
        }
        for c in &self.countries {
            w.insert(c.name.clone());
            w.insert(c.language.clone());
            w.extend(c.cities.iter().cloned());
        }
        w.extend(self.years.iter().map(|y| y.to_string()));
        w.extend(self.decades());
        w.extend(self.properties.iter().cloned());
        w
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    /// Well covered by the pretraining corpus.
    Popular,
    /// Held out: name tokens never appear in the corpus.
    Novel,
    /// Mentioned in a single corpus document; teaches reading from context.
    Background,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Attributes {
    pub category: String,
    pub city: String,
    pub year: u32,
    pub property: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityRecord {
    pub id: String,
    /// Space-separated name tokens.
    pub name: String,
    pub tier: Tier,
    pub attributes: Attributes,
    pub definition: String,
}

impl EntityRecord {
    pub fn name_tokens(&self, v: &Vocabulary) -> TokenSeq {
        v.encode(&self.name)
    }

    pub fn definition_tokens(&self, v: &Vocabulary) -> TokenSeq {
        v.encode(&self.definition)
    }

    pub fn tokens(&self, v: &Vocabulary) -> EntityTokens {
        EntityTokens { id: self.id.clone(), name: self.name_tokens(v), definition: self.definition_tokens(v) }
    }
}

/// Relations between an entity and one attribute-derived answer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    Origin,
    Property,
    Founded,
    Country,
    Domain,
    Decade,
    Language,
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", serde_json::to_value(self).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default())
    }
}

impl Relation {
    /// Answer is a word of the definition.
    pub const SPAN: [Relation; 3] = [Relation::Origin, Relation::Property, Relation::Founded];
    /// Answer is implied by the definition but never stated in it.
    pub const INFERENCE: [Relation; 4] = [Relation::Country, Relation::Domain, Relation::Decade, Relation::Language];

    pub fn all() -> impl Iterator<Item = Relation> {
        Self::SPAN.into_iter().chain(Self::INFERENCE)
    }

    pub fn in_definition(self) -> bool {
        Self::SPAN.contains(&self)
    }

    pub fn prefix(self, name: &str) -> String {
        let tail = match self {
            Relation::Origin => "comes from",
            Relation::Property => "is known for its",
            Relation::Founded => "was founded in",
            Relation::Country => "is located in",
            Relation::Domain => "is active in the field of",
            Relation::Decade => "dates back to the",
            Relation::Language => "communicates in",
        };
        format!("{name} {tail}")
    }

    pub fn answer(self, a: &Attributes, schema: &Schema) -> String {
        match self {
            Relation::Origin => a.city.clone(),
            Relation::Property => a.property.clone(),
            Relation::Founded => a.year.to_string(),
            Relation::Country => schema.country_of(&a.city).map(|c| c.name.clone()).unwrap_or_default(),
            Relation::Domain => schema.domain_of(&a.category).unwrap_or_default().to_string(),
            Relation::Decade => Schema::decade_of(a.year),
            Relation::Language => schema.country_of(&a.city).map(|c| c.language.clone()).unwrap_or_default(),
        }
    }

    /// All values the answer can take.
    pub fn candidates(self, schema: &Schema) -> Vec<String> {
        match self {
            Relation::Origin => schema.cities().map(str::to_string).collect(),
            Relation::Property => schema.properties.clone(),
            Relation::Founded => schema.years.iter().map(|y| y.to_string()).collect(),
            Relation::Country => schema.countries.iter().map(|c| c.name.clone()).collect(),
            Relation::Domain => schema.domains(),
            Relation::Decade => schema.decades(),
            Relation::Language => schema.countries.iter().map(|c| c.language.clone()).collect(),
        }
    }

    pub fn sentence(self, name: &str, a: &Attributes, schema: &Schema) -> String {
        format!("{} {} .", self.prefix(name), self.answer(a, schema))
    }
}

pub fn definition_text(name: &str, a: &Attributes) -> String {
    format!(
        "{name} is a {} from {} , founded in {} , known for its {} .",
        a.category, a.city, a.year, a.property
    )
}

/// Cloze probe in text form, as stored in `probes.jsonl`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub id: String,
    pub entity_id: String,
    pub relation: Relation,
    pub prefix: String,
    pub target: String,
    pub options: Vec<String>,
    pub gold: usize,
    pub in_definition: bool,
}

/// Tokenized probe: prefix `x`, target span `y`, optional options.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProbeExample {
    pub id: String,
    pub entity_id: String,
    pub prefix: TokenSeq,
    pub target: TokenSeq,
    pub options: Option<Vec<TokenSeq>>,
    pub gold: usize,
}

impl ProbeExample {
    pub fn validate(&self) -> Result<()> {
        if self.target.is_empty() {
            return Err(Error::EmptyInput("probe target"));
        }
        if let Some(opts) = &self.options {
            if self.gold >= opts.len() || opts[self.gold] != self.target {
                return Err(Error::InvalidArgument(format!("probe {}: gold option does not match target", self.id)));
            }
        }
        Ok(())
    }
}

impl ProbeRecord {
    pub fn encode(&self, v: &Vocabulary) -> ProbeExample {
        ProbeExample {
            id: self.id.clone(),
            entity_id: self.entity_id.clone(),
            prefix: v.encode(&self.prefix),
            target: v.encode(&self.target),
            options: (!self.options.is_empty()).then(|| self.options.iter().map(|o| v.encode(o)).collect()),
            gold: self.gold,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    /// Definition-led documents per popular entity.
    pub def_docs_per_popular: usize,
    /// Fact-only documents per popular entity.
    pub fact_docs_per_popular: usize,
    /// Inclusive range of facts following a definition.
    pub facts_after_definition: (usize, usize),
    /// Inclusive range of facts in a fact-only document.
    pub facts_per_fact_doc: (usize, usize),
    /// Fact-only documents per background entity.
    pub fact_docs_per_background: usize,
    /// Copies of each background-knowledge sentence.
    pub world_repeats: usize,
    /// Fraction of definition-led documents starting with the prompt token.
    pub prompt_fraction: f64,
    /// Probability that a fact following a definition refers to the entity
    /// as [`ANAPHOR`] instead of by name.
    pub anaphor_fraction: f64,
    /// Same for the second and later facts of a fact-only document.
    pub fact_anaphor_fraction: f64,
    /// Documents where a short definition-led passage about one known entity
    /// is followed by facts about another, named entity.
    pub mixed_docs: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            def_docs_per_popular: 2,
            fact_docs_per_popular: 9,
            facts_after_definition: (3, 5),
            facts_per_fact_doc: (3, 4),
            fact_docs_per_background: 1,
            world_repeats: 4,
            prompt_fraction: 0.25,
            anaphor_fraction: 0.6,
            fact_anaphor_fraction: 0.35,
            mixed_docs: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldSpec {
    pub seed: u64,
    pub n_popular: usize,
    pub n_novel: usize,
    pub n_background: usize,
    /// Distinct name tokens shared by background entities.
    pub background_name_pool: usize,
    pub probes_per_entity: usize,
    /// Share of probes whose answer appears verbatim in the definition.
    pub span_probe_fraction: f64,
    /// Options per multiple-choice probe (gold included).
    pub n_options: usize,
    pub corpus: CorpusSpec,
    pub schema: Schema,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_popular: 200,
            n_novel: 150,
            n_background: 600,
            background_name_pool: 300,
            probes_per_entity: 5,
            span_probe_fraction: 0.2,
            n_options: 5,
            corpus: CorpusSpec::default(),
            schema: Schema::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub spec: WorldSpec,
    pub entities: Vec<EntityRecord>,
}

const ONSETS: [&str; 16] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "th", "sh"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
const CODAS: [&str; 7] = ["", "n", "r", "l", "x", "s", "k"];

fn make_word(rng: &mut StreamRng, syllables: usize) -> String {
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(ONSETS.choose(rng).expect("nonempty"));
        w.push_str(VOWELS.choose(rng).expect("nonempty"));
    }
    w.push_str(CODAS.choose(rng).expect("nonempty"));
    let mut c = w.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => w,
    }
}

struct NameForge {
    used: HashSet<String>,
    rng: StreamRng,
}

impl NameForge {
    fn token(&mut self) -> String {
        loop {
            let syl = self.rng.random_range(2..=3);
            let w = make_word(&mut self.rng, syl);
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }

    fn name(&mut self, weights: &[f64]) -> String {
        let r: f64 = self.rng.random();
        let mut acc = 0.0;
        let mut len = weights.len();
        for (i, w) in weights.iter().enumerate() {
            acc += w;
            if r < acc {
                len = i + 1;
                break;
            }
        }
        (0..len).map(|_| self.token()).collect::<Vec<_>>().join(" ")
    }
}

/// Builds the entity table. Deterministic given `spec.seed`.
pub fn generate_world(spec: &WorldSpec) -> Result<World> {
    spec.schema.validate()?;
    if spec.n_options < 2 {
        return Err(Error::Config("n_options must be at least 2".into()));
    }
    let total = spec.n_popular + spec.n_novel + spec.n_background;
    if total > spec.schema.combinations() {
        return Err(Error::SchemaExhausted(format!(
            "{total} entities but only {} attribute combinations",
            spec.schema.combinations()
        )));
    }
    let mut rng = rng::stream(spec.seed, "world");
    let mut forge = NameForge { used: spec.schema.words(), rng: rng::stream(spec.seed, "world-names") };
    for w in ["Continue:"] {
        forge.used.insert(w.to_string());
    }
    let pool: Vec<String> = (0..spec.background_name_pool.max(2)).map(|_| forge.token()).collect();

    let cities: Vec<&str> = spec.schema.cities().collect();
    let mut seen_attrs = HashSet::new();
    let mut seen_names = HashSet::new();
    let mut entities = Vec::with_capacity(total);
    let tiers = [(Tier::Popular, spec.n_popular, "pop"), (Tier::Novel, spec.n_novel, "nov"), (Tier::Background, spec.n_background, "bg")];
    for (tier, n, tag) in tiers {
        for i in 0..n {
            let attributes = loop {
                let a = Attributes {
                    category: spec.schema.categories.choose(&mut rng).expect("nonempty").name.clone(),
                    city: cities.choose(&mut rng).expect("nonempty").to_string(),
                    year: *spec.schema.years.choose(&mut rng).expect("nonempty"),
                    property: spec.schema.properties.choose(&mut rng).expect("nonempty").clone(),
                };
                if seen_attrs.insert(a.clone()) {
                    break a;
                }
            };
            let name = match tier {
                Tier::Popular => forge.name(&[0.6, 0.4]),
                Tier::Novel => forge.name(&[0.45, 0.4, 0.15]),
                Tier::Background => loop {
                    let a = pool.choose(&mut rng).expect("nonempty");
                    let b = pool.choose(&mut rng).expect("nonempty");
                    let n = format!("{a} {b}");
                    if a != b && seen_names.insert(n.clone()) {
                        break n;
                    }
                },
            };
            let definition = definition_text(&name, &attributes);
            entities.push(EntityRecord { id: format!("{tag}-{i:04}"), name, tier, attributes, definition });
        }
    }
    Ok(World { spec: spec.clone(), entities })
}

impl World {
    pub fn entity(&self, id: &str) -> Option<&EntityRecord> {
        self.entities.iter().find(|e| e.id == id)
    }

    pub fn by_tier(&self, tier: Tier) -> impl Iterator<Item = &EntityRecord> {
        self.entities.iter().filter(move |e| e.tier == tier)
    }

    pub fn novel(&self) -> Vec<&EntityRecord> {
        self.by_tier(Tier::Novel).collect()
    }

    pub fn popular(&self) -> Vec<&EntityRecord> {
        self.by_tier(Tier::Popular).collect()
    }

    /// All probes for every popular and novel entity.
    pub fn all_probes(&self) -> Vec<ProbeRecord> {
        self.entities
            .iter()
            .filter(|e| e.tier != Tier::Background)
            .flat_map(|e| generate_probes(self, e))
            .collect()
    }

    pub fn probes_for(&self, entity_id: &str) -> Vec<ProbeRecord> {
        self.entity(entity_id).map(|e| generate_probes(self, e)).unwrap_or_default()
    }

    /// Vocabulary covering the corpus, every definition and every probe.
    pub fn build_vocabulary(&self, corpus: &[String]) -> Result<Vocabulary> {
        let mut texts: Vec<String> = corpus.to_vec();
        texts.push(CONTINUE_PROMPT.to_string());
        for e in &self.entities {
            texts.push(e.definition.clone());
        }
        for p in self.all_probes() {
            texts.push(p.prefix);
            texts.extend(p.options);
        }
        let distinct: HashSet<&str> = texts.iter().flat_map(|t| t.split_whitespace()).collect();
        tokenizer::build_vocab(&texts, distinct.len() + 4)
    }

    pub fn save(&self, dir: &Path, corpus: &[String]) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut ents = String::new();
        for e in &self.entities {
            ents.push_str(&serde_json::to_string(e)?);
            ents.push('\n');
        }
        fs::write(dir.join("entities.jsonl"), ents)?;
        fs::write(dir.join("corpus.txt"), corpus.join("\n") + "\n")?;
        let mut probes = String::new();
        for p in self.all_probes() {
            probes.push_str(&serde_json::to_string(&p)?);
            probes.push('\n');
        }
        fs::write(dir.join("probes.jsonl"), probes)?;
        let n = SPECIFICITY_PROBES.min(self.by_tier(Tier::Popular).count());
        let spec = split_specificity_set(self, n, self.spec.seed, &[])?;
        let mut s = String::new();
        for p in spec {
            s.push_str(&serde_json::to_string(&p)?);
            s.push('\n');
        }
        fs::write(dir.join("specificity.jsonl"), s)?;
        fs::write(dir.join("schema.json"), serde_json::to_string_pretty(&self.spec)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<(World, Vec<String>)> {
        let need = |f: &str| {
            let p = dir.join(f);
            if p.exists() {
                Ok(p)
            } else {
                Err(Error::MissingArtifact(p))
            }
        };
        let spec: WorldSpec = serde_json::from_str(&fs::read_to_string(need("schema.json")?)?)?;
        let entities = fs::read_to_string(need("entities.jsonl")?)?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<EntityRecord>, _>>()?;
        let corpus = fs::read_to_string(need("corpus.txt")?)?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(str::to_string)
            .collect();
        Ok((World { spec, entities }, corpus))
    }
}

fn fact_doc(rng: &mut StreamRng, e: &EntityRecord, schema: &Schema, n: usize, anaphor: Anaphora) -> Vec<String> {
    let mut rels: Vec<Relation> = Relation::all().collect();
    rels.shuffle(rng);
    rels.truncate(n);
    rels.into_iter()
        .enumerate()
        .map(|(i, r)| {
            let pronoun = (!anaphor.first_named || i > 0)
                && anaphor.fraction > 0.0
                && rng.random_bool(anaphor.fraction.min(1.0));
            r.sentence(if pronoun { ANAPHOR } else { &e.name }, &e.attributes, schema)
        })
        .collect()
}

#[derive(Clone, Copy)]
struct Anaphora {
    fraction: f64,
    /// The first sentence always uses the name.
    first_named: bool,
}

/// Pretraining documents, one per string. Popular entities get definition-led
/// and fact-only documents, background entities one of each, some documents
/// move from one entity to another, and schema facts (city to country and so
/// on) are mixed in. Novel entities never appear.
pub fn generate_corpus(world: &World, seed: u64) -> Vec<String> {
    let spec = &world.spec.corpus;
    let schema = &world.spec.schema;
    let mut rng = rng::stream(seed, "corpus");
    let mut docs: Vec<String> = Vec::new();
    let fact_anaphora = Anaphora { fraction: spec.fact_anaphor_fraction, first_named: true };
    let def_doc = |rng: &mut StreamRng, e: &EntityRecord, (lo, hi): (usize, usize)| {
        let n = rng.random_range(lo..=hi.max(lo));
        let mut parts = Vec::new();
        if rng.random_bool(spec.prompt_fraction.clamp(0.0, 1.0)) {
            parts.push(CONTINUE_PROMPT.to_string());
        }
        parts.push(e.definition.clone());
        parts.extend(fact_doc(rng, e, schema, n, Anaphora { fraction: spec.anaphor_fraction, first_named: false }));
        parts.join(" ")
    };
    let facts_doc = |rng: &mut StreamRng, e: &EntityRecord, (lo, hi): (usize, usize)| {
        let n = rng.random_range(lo..=hi.max(lo));
        fact_doc(rng, e, schema, n, fact_anaphora).join(" ")
    };
    for e in world.by_tier(Tier::Popular) {
        for _ in 0..spec.def_docs_per_popular {
            docs.push(def_doc(&mut rng, e, spec.facts_after_definition));
        }
        for _ in 0..spec.fact_docs_per_popular {
            docs.push(facts_doc(&mut rng, e, spec.facts_per_fact_doc));
        }
    }
    for e in world.by_tier(Tier::Background) {
        docs.push(def_doc(&mut rng, e, spec.facts_after_definition));
        for _ in 0..spec.fact_docs_per_background {
            docs.push(facts_doc(&mut rng, e, spec.facts_per_fact_doc));
        }
    }
    let known: Vec<&EntityRecord> =
        world.entities.iter().filter(|e| e.tier != Tier::Novel).collect();
    if known.len() >= 2 {
        for _ in 0..spec.mixed_docs {
            let a = known.choose(&mut rng).expect("nonempty");
            let b = loop {
                let b = known.choose(&mut rng).expect("nonempty");
                if b.id != a.id {
                    break b;
                }
            };
            let first = def_doc(&mut rng, a, (1, 2));
            let second = facts_doc(&mut rng, b, (2, 3));
            docs.push(format!("{first} {second}"));
        }
    }
    let mut facts = Vec::new();
    for c in &schema.countries {
        for city in &c.cities {
            facts.push(format!("{city} is a city in {} .", c.name));
        }
        facts.push(format!("people in {} speak {} .", c.name, c.language));
    }
    for c in &schema.categories {
        facts.push(format!("a {} is part of {} .", c.name, c.domain));
    }
    for y in &schema.years {
        facts.push(format!("the year {y} is in the {} .", Schema::decade_of(*y)));
    }
    let mut world_facts: Vec<String> = (0..spec.world_repeats).flat_map(|_| facts.iter().cloned()).collect();
    world_facts.shuffle(&mut rng);
    for chunk in world_facts.chunks(4) {
        docs.push(chunk.join(" "));
    }
    docs.shuffle(&mut rng);
    docs
}

/// Documents as training sequences, each terminated by `<eos>`.
pub fn encode_corpus(corpus: &[String], v: &Vocabulary) -> Vec<TokenSeq> {
    corpus
        .iter()
        .map(|d| {
            let mut s = v.encode(d);
            s.push(Vocabulary::EOS_ID);
            s
        })
        .collect()
}

/// Cloze probes for one entity: `round(probes_per_entity * span_fraction)`
/// span probes (in `Relation::SPAN` order), the rest inference probes. Each
/// carries `n_options - 1` distractors of the same attribute type.
pub fn generate_probes(world: &World, e: &EntityRecord) -> Vec<ProbeRecord> {
    let spec = &world.spec;
    let schema = &spec.schema;
    let n = spec.probes_per_entity;
    let n_span = ((n as f64 * spec.span_probe_fraction).round() as usize).min(Relation::SPAN.len());
    let n_inf = (n - n_span.min(n)).min(Relation::INFERENCE.len());
    let rels: Vec<Relation> = Relation::SPAN[..n_span]
        .iter()
        .chain(Relation::INFERENCE[..n_inf].iter())
        .copied()
        .collect();
    let mut rng = rng::substream(spec.seed, "probes", &e.id);
    rels.into_iter()
        .map(|rel| {
            let target = rel.answer(&e.attributes, schema);
            let mut pool: Vec<String> = rel.candidates(schema).into_iter().filter(|c| *c != target).collect();
            pool.shuffle(&mut rng);
            pool.truncate(spec.n_options - 1);
            let gold = rng.random_range(0..=pool.len());
            let mut options = pool;
            options.insert(gold, target.clone());
            ProbeRecord {
                id: format!("{}/{}", e.id, rel),
                entity_id: e.id.clone(),
                relation: rel,
                prefix: rel.prefix(&e.name),
                target,
                options,
                gold,
                in_definition: rel.in_definition(),
            }
        })
        .collect()
}

/// `n` probes about `n` distinct popular entities, none in `exclude`.
pub fn split_specificity_set(world: &World, n: usize, seed: u64, exclude: &[&str]) -> Result<Vec<ProbeRecord>> {
    let excluded: HashSet<&str> = exclude.iter().copied().collect();
    let mut pool: Vec<&EntityRecord> = world.by_tier(Tier::Popular).filter(|e| !excluded.contains(e.id.as_str())).collect();
    if pool.len() < n {
        return Err(Error::InsufficientPool { need: n, have: pool.len() });
    }
    let mut rng = rng::stream(seed, "specificity");
    pool.shuffle(&mut rng);
    Ok(pool[..n]
        .iter()
        .map(|e| {
            let probes = generate_probes(world, e);
            probes.choose(&mut rng).expect("entities have probes").clone()
        })
        .collect())
}

/// Counts of each token string across the corpus.
pub fn corpus_token_counts(corpus: &[String]) -> HashMap<&str, usize> {
    let mut m = HashMap::new();
    for d in corpus {
        for w in d.split_whitespace() {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

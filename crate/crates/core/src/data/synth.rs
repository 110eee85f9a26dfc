//! Seeded generators for the two bundled corpora.
//!
//! Both describe the same small world: a village of named characters, each
//! with a fixed trade, home and keepsake. `narrative` is storytelling prose
//! in which those facts recur; `village_registry` lists the same facts in a
//! terse register format. For characters the registry never listed before,
//! its entries can only be predicted from facts learned during pretraining,
//! which is what makes the middle of a pretrained stack worth having. The
//! last `tail_bytes` of the registry list only such characters.

use rand::prelude::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const WORLD_SEED: u64 = 0x7669_6c6c;
pub const NARRATIVE_SEED: u64 = 0x6e61_7272;
pub const NARRATIVE_BYTES: usize = 2_000_000;
pub const REGISTRY_SEED: u64 = 5;
pub const REGISTRY_BYTES: usize = 600_000;
/// Size of the held-out-character tail of the registry.
pub const REGISTRY_TAIL_BYTES: usize = 30_000;

const NAMES: &[&str] = &[
    "Anna", "Tomas", "Miriam", "Elias", "Rosa", "Henrik", "Clara", "Jonas", "Ida", "Felix", "Marta", "Oskar",
    "Greta", "Viktor", "Lena", "Arvid", "Agnes", "Bruno", "Cecilia", "David", "Edith", "Frans", "Hilda", "Isak",
    "Judit", "Karl", "Lisa", "Magnus", "Nora", "Otto", "Petra", "Rune", "Sara", "Teodor", "Ulla", "Valter",
    "Wilma", "Axel", "Berit", "Emil",
];
const TRADES: &[&str] = &[
    "miller", "fisherman", "baker", "weaver", "shepherd", "merchant", "priest", "captain", "farmer", "innkeeper",
    "smith", "potter", "carpenter", "tailor", "cobbler", "hunter",
];
const PEOPLE: &[&str] = &[
    "miller", "fisherman", "widow", "soldier", "shepherd", "merchant", "baker", "priest", "stranger", "captain",
    "girl", "boy", "old man", "old woman", "farmer", "weaver", "innkeeper", "traveller",
];
const PLACES: &[&str] = &[
    "river", "village", "forest", "market", "harbour", "church", "hill", "bridge", "mill", "road", "field",
    "garden", "kitchen", "square", "valley", "shore", "tower", "barn",
];
const THINGS: &[&str] = &[
    "letter", "lantern", "basket", "coat", "knife", "boat", "horse", "door", "window", "fire", "bread", "key",
    "cup", "rope", "book", "bell", "cart", "stone", "candle", "map",
];
const ADJECTIVES: &[&str] = &[
    "old", "quiet", "dark", "small", "cold", "bright", "narrow", "empty", "heavy", "warm", "grey", "tired",
    "long", "wet", "broken", "distant", "silent", "green",
];
const VERBS_PLACE: &[&str] = &[
    "walked", "ran", "hurried", "returned", "wandered", "climbed", "rode", "came back", "went down", "crept",
];
const VERBS_THING: &[&str] = &[
    "picked up", "carried", "found", "opened", "mended", "dropped", "hid", "held", "lost", "sold", "watched",
    "counted",
];
const ADVERBS: &[&str] = &[
    "slowly", "quickly", "quietly", "at last", "again", "alone", "without a word", "in the rain", "before dawn",
    "after supper",
];
const PREPS_PLACE: &[&str] = &["to", "towards", "across", "along", "past", "around", "through", "from"];
const TIMES: &[&str] = &[
    "morning", "evening", "night", "winter", "spring", "harvest", "storm", "feast", "market day", "first snow",
];
const FEELINGS: &[&str] = &[
    "afraid", "glad", "weary", "angry", "hopeful", "ashamed", "curious", "uneasy", "calm", "hungry",
];
const SAYINGS: &[&str] = &[
    "Come inside",
    "Do not wait for me",
    "It is later than you think",
    "We should go home",
    "I saw it by the water",
    "Nobody will believe us",
    "Bring the lantern",
    "The road is closed",
    "Tell me what happened",
    "Listen to the bell",
    "Leave it where it is",
    "I know this place",
];
const SPEECH: &[&str] = &["said", "asked", "whispered", "called", "answered", "replied"];

fn pick<'a>(rng: &mut ChaCha8Rng, words: &[&'a str]) -> &'a str {
    words.choose(rng).copied().expect("word lists are non-empty")
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn subject(rng: &mut ChaCha8Rng) -> String {
    match rng.random_range(0..4) {
        0 | 1 => pick(rng, NAMES).to_string(),
        2 => format!("the {}", pick(rng, PEOPLE)),
        _ => format!("the {} {}", pick(rng, ADJECTIVES), pick(rng, PEOPLE)),
    }
}

fn narrative_sentence(rng: &mut ChaCha8Rng) -> String {
    let s = match rng.random_range(0..9) {
        0 => format!(
            "{} {} {} the {} {}.",
            subject(rng),
            pick(rng, VERBS_PLACE),
            pick(rng, PREPS_PLACE),
            pick(rng, ADJECTIVES),
            pick(rng, PLACES)
        ),
        1 => format!(
            "{} {} the {} and {} {} the {}.",
            subject(rng),
            pick(rng, VERBS_THING),
            pick(rng, THINGS),
            pick(rng, VERBS_PLACE),
            pick(rng, PREPS_PLACE),
            pick(rng, PLACES)
        ),
        2 => format!(
            "When the {} came, {} {} the {} {}.",
            pick(rng, TIMES),
            subject(rng),
            pick(rng, VERBS_THING),
            pick(rng, THINGS),
            pick(rng, ADVERBS)
        ),
        3 => format!(
            "\"{},\" {} {}.",
            pick(rng, SAYINGS),
            pick(rng, SPEECH),
            subject(rng)
        ),
        4 => format!("{} was {}, and the {} was {}.", subject(rng), pick(rng, FEELINGS), pick(rng, PLACES), pick(rng, ADJECTIVES)),
        5 => format!(
            "The {} {} lay by the {}, where {} had left it.",
            pick(rng, ADJECTIVES),
            pick(rng, THINGS),
            pick(rng, PLACES),
            subject(rng)
        ),
        6 => format!(
            "{} {} {}, because the {} was {}.",
            subject(rng),
            pick(rng, VERBS_PLACE),
            pick(rng, ADVERBS),
            pick(rng, TIMES),
            pick(rng, ADJECTIVES)
        ),
        7 => format!(
            "Nobody in the {} knew why {} had {} the {}.",
            pick(rng, PLACES),
            subject(rng),
            pick(rng, VERBS_THING),
            pick(rng, THINGS)
        ),
        _ => format!(
            "{} looked at the {} for a long time and said nothing.",
            subject(rng),
            pick(rng, THINGS)
        ),
    };
    capitalize(&s)
}

/// Storytelling prose in paragraphs of three to seven sentences, half of
/// them restating a fact about one of the villagers.
pub fn narrative(seed: u64, target_bytes: usize) -> Vec<u8> {
    let world = World::new(WORLD_SEED);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(target_bytes + 1024);
    let mut chapter = 1;
    while out.len() < target_bytes {
        if rng.random_range(0..40) == 0 {
            out.push_str(&format!("CHAPTER {chapter}\n\n"));
            chapter += 1;
        }
        let n = rng.random_range(3..=7);
        let para: Vec<String> = (0..n)
            .map(|_| {
                if rng.random_bool(0.5) {
                    let c = world.characters.choose(&mut rng).expect("cast is non-empty");
                    fact_sentence(&mut rng, c)
                } else {
                    narrative_sentence(&mut rng)
                }
            })
            .collect();
        out.push_str(&para.join(" "));
        out.push_str("\n\n");
    }
    out.truncate(target_bytes);
    out.into_bytes()
}


/// One villager and the facts attached to them.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Character {
    pub name: &'static str,
    pub trade: &'static str,
    pub home: &'static str,
    pub keepsake: &'static str,
}

/// The fixed cast shared by both corpora.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct World {
    pub characters: Vec<Character>,
}

impl World {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let characters = NAMES
            .iter()
            .map(|&name| Character {
                name,
                trade: pick(&mut rng, TRADES),
                home: pick(&mut rng, PLACES),
                keepsake: pick(&mut rng, THINGS),
            })
            .collect();
        Self { characters }
    }

    /// Every fifth character only appears in the registry tail.
    pub fn is_held_out(index: usize) -> bool {
        index % 5 == 4
    }
}

fn fact_sentence(rng: &mut ChaCha8Rng, c: &Character) -> String {
    let n = c.name;
    match rng.random_range(0..7) {
        0 => format!(
            "{n} the {} {} {} the {} {}.",
            c.trade,
            pick(rng, VERBS_PLACE),
            pick(rng, PREPS_PLACE),
            pick(rng, ADJECTIVES),
            pick(rng, PLACES)
        ),
        1 => format!(
            "{n}, who lived by the {}, {} the {} {}.",
            c.home,
            pick(rng, VERBS_THING),
            pick(rng, THINGS),
            pick(rng, ADVERBS)
        ),
        2 => format!("{n} never went anywhere without the {}.", c.keepsake),
        3 => format!("\"{},\" {} {n} the {}.", pick(rng, SAYINGS), pick(rng, SPEECH), c.trade),
        4 => format!("Everyone by the {} knew {n}, the {}.", c.home, c.trade),
        5 => format!("{n} carried the {} back to the {}.", c.keepsake, c.home),
        _ => format!("{n} was the {} of the village and lived by the {}.", c.trade, c.home),
    }
}

fn registry_line(c: &Character) -> String {
    format!("{}: {}, {}, {}.\n", c.name, c.trade, c.home, c.keepsake)
}

fn entries_about(rng: &mut ChaCha8Rng, world: &World, held_out: bool, target_bytes: usize) -> String {
    let cast: Vec<&Character> = world
        .characters
        .iter()
        .enumerate()
        .filter(|(i, _)| World::is_held_out(*i) == held_out)
        .map(|(_, c)| c)
        .collect();
    let mut out = String::with_capacity(target_bytes + 64);
    while out.len() < target_bytes {
        let c = cast.choose(rng).copied().expect("both casts are non-empty");
        out.push_str(&registry_line(c));
    }
    out.truncate(target_bytes);
    out
}

/// Registry lines `Name: trade, home, keepsake.` in random order. The first
/// `target_bytes − tail_bytes` bytes list only regular characters; the tail
/// only held-out ones.
pub fn village_registry(seed: u64, target_bytes: usize, tail_bytes: usize) -> Vec<u8> {
    let world = World::new(WORLD_SEED);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let head_len = target_bytes.saturating_sub(tail_bytes);
    let mut out = entries_about(&mut rng, &world, false, head_len);
    out.push_str(&entries_about(&mut rng, &world, true, target_bytes - head_len));
    out.into_bytes()
}

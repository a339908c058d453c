//! Closed attribute vocabulary (20 attributes, 92 words) and a rule-based
//! templater turning attribute words into description sentences.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{contract, Error, Result};

pub const COLORS: [&str; 8] = ["black", "blue", "gray", "green", "purple", "red", "white", "yellow"];

/// `(attribute, words)` in canonical order.
pub const VOCABULARY: [(&str, &[&str]); 20] = [
    (
        "coat color",
        &[
            "black coat", "blue coat", "gray coat", "green coat", "purple coat", "red coat",
            "white coat", "yellow coat",
        ],
    ),
    (
        "trousers color",
        &[
            "black trousers", "blue trousers", "gray trousers", "green trousers",
            "purple trousers", "red trousers", "white trousers", "yellow trousers",
        ],
    ),
    (
        "coat length",
        &["agnostic length coat", "long sleeve coat", "short sleeve coat", "bareback coat"],
    ),
    ("trousers length", &["shorts trousers", "skirt", "trousers"]),
    ("gender code", &["female", "agnostic gender", "male"]),
    ("glass style", &["without glasses", "with glasses", "with sunglasses"]),
    (
        "hair color",
        &["black hair", "agnostic color hair", "white hair", "yellow hair"],
    ),
    (
        "hair style",
        &["bald hair", "agnostic style hair", "long hair", "short hair"],
    ),
    (
        "bag style",
        &[
            "backpack", "hand bag", "shoulder bag", "waist pack", "trolley",
            "agnostic style bag", "without bag",
        ],
    ),
    ("cap style", &["with hat", "without hat"]),
    (
        "shoes color",
        &[
            "black shoes", "blue shoes", "gray shoes", "green shoes", "purple shoes",
            "red shoes", "white shoes", "yellow shoes",
        ],
    ),
    (
        "shoes style",
        &["boots", "leather shoes", "sandal", "walking shoes"],
    ),
    ("age", &["adult", "child", "old"]),
    ("person angle", &["back", "front", "side"]),
    ("pose", &["lie", "pose agnostic", "sit", "stand", "stoop"]),
    (
        "coat style",
        &[
            "business suit", "agnostic style coat", "dress", "jacket", "long coat", "shirt",
            "sweater", "t-shirt",
        ],
    ),
    ("glove", &["with glove", "agnostic glove", "without glove"]),
    ("smoking", &["smoking", "agnostic smoking", "without smoking"]),
    ("umbrella", &["with umbrella", "without umbrella"]),
    (
        "uniform",
        &[
            "chef uniform", "common clothing", "firefighter uniform", "medical uniform",
            "office uniform", "agnostic uniform", "worker uniform",
        ],
    ),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Group {
    Wear,
    Appear,
    Carry,
    Capture,
}

fn group_of(attribute: &str) -> Group {
    match attribute {
        "coat color" | "trousers color" | "coat length" | "trousers length" | "coat style"
        | "shoes color" | "shoes style" | "uniform" => Group::Wear,
        "gender code" | "age" | "hair color" | "hair style" | "glass style" => Group::Appear,
        "bag style" | "cap style" | "glove" | "smoking" | "umbrella" => Group::Carry,
        _ => Group::Capture,
    }
}

/// Position of a word in the vocabulary: `(attribute index, word index)`.
pub fn locate(word: &str) -> Option<(usize, usize)> {
    VOCABULARY.iter().enumerate().find_map(|(a, (_, words))| {
        words.iter().position(|w| *w == word).map(|i| (a, i))
    })
}

pub fn attribute_of(word: &str) -> Option<&'static str> {
    locate(word).map(|(a, _)| VOCABULARY[a].0)
}

fn join(items: &[&str]) -> String {
    match items {
        [] => String::new(),
        [one] => String::from(*one),
        [init @ .., last] => format!("{} and {last}", init.join(", ")),
    }
}

/// Deterministic description of a set of attribute words. Words are put in
/// vocabulary order and duplicates dropped, so the output depends only on
/// the set.
pub fn attribute_to_sentences<S: AsRef<str>>(attributes: &[S]) -> Result<Vec<String>> {
    if attributes.is_empty() {
        return Err(contract("no attributes to describe"));
    }
    let mut located = Vec::with_capacity(attributes.len());
    for w in attributes {
        let w = w.as_ref();
        let pos = locate(w).ok_or_else(|| Error::UnknownAttribute(w.into()))?;
        located.push(pos);
    }
    located.sort_unstable();
    located.dedup();
    let mut groups: [Vec<&str>; 4] = Default::default();
    for (a, i) in located {
        let (attr, words) = VOCABULARY[a];
        groups[group_of(attr) as usize].push(words[i]);
    }
    let mut out = Vec::new();
    let lead = ["The person wears a", "The person appears", "The person is seen with", "The person is captured in"];
    for (g, words) in groups.iter().enumerate() {
        if !words.is_empty() {
            out.push(format!("{} {}.", lead[g], join(words)));
        }
    }
    Ok(out)
}

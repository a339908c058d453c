//! Task kinds and instruction generation.

pub mod attributes;
pub mod bank;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use attributes::attribute_to_sentences;
pub use bank::PhraseBank;

use crate::error::{contract, Error, Result};
use crate::synth::SampleRecord;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Trad,
    Cc,
    Ctcc,
    Vi,
    T2i,
    Li,
}

impl TaskKind {
    pub const ALL: [TaskKind; 6] = [
        TaskKind::Trad,
        TaskKind::Cc,
        TaskKind::Ctcc,
        TaskKind::Vi,
        TaskKind::T2i,
        TaskKind::Li,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Trad => "trad",
            TaskKind::Cc => "cc",
            TaskKind::Ctcc => "ctcc",
            TaskKind::Vi => "vi",
            TaskKind::T2i => "t2i",
            TaskKind::Li => "li",
        }
    }

    /// Trad, CC and VI take one phrase from a fixed bank.
    pub fn uses_bank(self) -> bool {
        matches!(self, TaskKind::Trad | TaskKind::Cc | TaskKind::Vi)
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown task `{s}`")))
    }
}

/// Which clothes image a template instruction refers to.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateRef {
    /// Canonical render of one wardrobe item.
    Wardrobe { identity: usize, clothes: usize },
    /// Clothes cropped out of a record's own image.
    Crop { record: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Payload {
    Text(Vec<String>),
    Template(TemplateRef),
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Instruction {
    pub kind: TaskKind,
    pub payload: Payload,
}

impl Instruction {
    pub fn text(kind: TaskKind, sentences: Vec<String>) -> Self {
        Self {
            kind,
            payload: Payload::Text(sentences),
        }
    }

    pub fn sentences(&self) -> Option<&[String]> {
        match &self.payload {
            Payload::Text(s) => Some(s),
            Payload::Template(_) => None,
        }
    }
}

/// Whether the record is the probe or a searched item.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Query,
    Gallery,
}

/// Draws an instruction for `record` acting in `role`.
///
/// `gallery` supplies the candidates a query may point at: CTCC queries pick
/// uniformly among the clothes ids seen for the same identity, LI queries
/// take the description of a uniformly chosen same-identity record other
/// than `record`. Gallery-role CTCC/LI records describe themselves.
pub fn sample_instruction<R: Rng + ?Sized>(
    bank: &PhraseBank,
    task: TaskKind,
    record: &SampleRecord,
    role: Role,
    gallery: &[SampleRecord],
    rng: &mut R,
) -> Result<Instruction> {
    match task {
        TaskKind::Trad | TaskKind::Cc | TaskKind::Vi => {
            let phrases = bank.phrases(task).ok_or_else(|| contract("bank task"))?;
            let p = phrases[rng.random_range(0..phrases.len())].clone();
            Ok(Instruction::text(task, vec![p]))
        }
        TaskKind::Ctcc => {
            let payload = match role {
                Role::Gallery => TemplateRef::Crop {
                    record: record.index,
                },
                Role::Query => {
                    let mut wardrobe: Vec<usize> = gallery
                        .iter()
                        .filter(|g| g.identity == record.identity)
                        .map(|g| g.clothes)
                        .collect();
                    wardrobe.sort_unstable();
                    wardrobe.dedup();
                    if wardrobe.is_empty() {
                        return Err(contract(format!(
                            "no clothes known for identity {}",
                            record.identity
                        )));
                    }
                    TemplateRef::Wardrobe {
                        identity: record.identity,
                        clothes: wardrobe[rng.random_range(0..wardrobe.len())],
                    }
                }
            };
            Ok(Instruction {
                kind: task,
                payload: Payload::Template(payload),
            })
        }
        TaskKind::Li => match role {
            Role::Gallery => Ok(Instruction::text(task, record.description.clone())),
            Role::Query => {
                let same: Vec<&SampleRecord> = gallery
                    .iter()
                    .filter(|g| g.identity == record.identity && g.index != record.index)
                    .collect();
                if same.is_empty() {
                    return Err(contract(format!(
                        "no gallery record of identity {} to describe",
                        record.identity
                    )));
                }
                let pick = same[rng.random_range(0..same.len())];
                Ok(Instruction::text(task, pick.description.clone()))
            }
        },
        TaskKind::T2i => Ok(Instruction::text(task, record.description.clone())),
    }
}

/// A query, its instruction and the record it should retrieve.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub task: TaskKind,
    /// Absent for text-to-image, where the instruction is the query.
    pub query: Option<usize>,
    pub instruction: Instruction,
    pub target: usize,
}

/// Binds a query, an instruction and a target after checking they agree.
pub fn build_pair(
    query: &SampleRecord,
    instruction: &Instruction,
    target: &SampleRecord,
) -> Result<PairRecord> {
    let task = instruction.kind;
    for r in [query, target] {
        if !r.tasks.contains(&task) {
            return Err(contract(format!("record {} is not tagged {task}", r.index)));
        }
    }
    let same_person = query.identity == target.identity;
    match (&instruction.payload, task) {
        (Payload::Text(s), TaskKind::Trad | TaskKind::Cc | TaskKind::Vi) => {
            if s.len() != 1 {
                return Err(contract("phrase tasks take exactly one phrase"));
            }
            if !same_person {
                return Err(contract("query and target differ in identity"));
            }
            if task == TaskKind::Trad && query.clothes != target.clothes {
                return Err(contract("Trad pairs share clothes"));
            }
            if task == TaskKind::Vi && query.modality == target.modality {
                return Err(contract("VI pairs cross modalities"));
            }
        }
        (Payload::Template(TemplateRef::Wardrobe { identity, clothes }), TaskKind::Ctcc) => {
            if !same_person || *identity != target.identity || *clothes != target.clothes {
                return Err(contract("template does not match the target's clothes"));
            }
        }
        (Payload::Text(s), TaskKind::Li) => {
            if !same_person || *s != target.description {
                return Err(contract("LI sentences must describe the target"));
            }
        }
        (Payload::Text(s), TaskKind::T2i) => {
            if !same_person || *s != target.description {
                return Err(contract("T2I sentences must describe the target"));
            }
            return Ok(PairRecord {
                task,
                query: None,
                instruction: instruction.clone(),
                target: target.index,
            });
        }
        _ => return Err(contract(format!("payload does not fit task {task}"))),
    }
    Ok(PairRecord {
        task,
        query: Some(query.index),
        instruction: instruction.clone(),
        target: target.index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_names_round_trip() {
        for t in TaskKind::ALL {
            assert_eq!(t.name().parse::<TaskKind>().unwrap(), t);
        }
        assert!("reid".parse::<TaskKind>().is_err());
    }
}

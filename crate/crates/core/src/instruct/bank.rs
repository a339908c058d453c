//! Fixed phrase banks for the Trad, CC and VI tasks.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use sha2::{Digest, Sha256};

use super::TaskKind;
use crate::error::{Error, Result};

/// The bundled bank file.
pub const BUILTIN_JSON: &str = include_str!("../../resources/phrase_banks.json");

/// SHA-256 of [`BUILTIN_JSON`].
pub const BUILTIN_SHA256: &str = "9da2bbf7878a6308f4e0c8517cfea628df1f3fc8ca4846e8e03cb07229e01c08";

pub const PHRASES_PER_TASK: usize = 20;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PhraseBank {
    trad: Vec<String>,
    cc: Vec<String>,
    vi: Vec<String>,
}

impl PhraseBank {
    /// Loads the bundled banks after verifying their checksum.
    pub fn builtin() -> Result<Self> {
        Self::from_json(BUILTIN_JSON, Some(BUILTIN_SHA256))
    }

    /// Parses a `{"trad": [...], "cc": [...], "vi": [...]}` document. Each list
    /// must hold exactly 20 distinct phrases and no phrase may appear in two
    /// lists.
    pub fn from_json(text: &str, sha256: Option<&str>) -> Result<Self> {
        if let Some(want) = sha256 {
            let got = sha256_hex(text.as_bytes());
            if got != want {
                return Err(Error::Bank(format!("checksum {got} does not match {want}")));
            }
        }
        let mut map: BTreeMap<String, Vec<String>> =
            serde_json::from_str(text).map_err(|e| Error::Bank(format!("{e}")))?;
        let mut take = |key: &str| -> Result<Vec<String>> {
            let list = map
                .remove(key)
                .ok_or_else(|| Error::Bank(format!("missing `{key}` list")))?;
            if list.len() != PHRASES_PER_TASK {
                return Err(Error::Bank(format!(
                    "`{key}` has {} phrases, expected {PHRASES_PER_TASK}",
                    list.len()
                )));
            }
            let mut sorted = list.clone();
            sorted.sort();
            sorted.dedup();
            if sorted.len() != list.len() {
                return Err(Error::Bank(format!("`{key}` repeats a phrase")));
            }
            Ok(list)
        };
        let bank = Self {
            trad: take("trad")?,
            cc: take("cc")?,
            vi: take("vi")?,
        };
        if let Some(extra) = map.keys().next() {
            return Err(Error::Bank(format!("unexpected list `{extra}`")));
        }
        for (i, a) in [&bank.trad, &bank.cc, &bank.vi].iter().enumerate() {
            for b in [&bank.trad, &bank.cc, &bank.vi].iter().skip(i + 1) {
                if let Some(p) = a.iter().find(|p| b.contains(p)) {
                    return Err(Error::Bank(format!("phrase `{p}` appears in two banks")));
                }
            }
        }
        Ok(bank)
    }

    /// Phrases for a text-phrase task, `None` for the other tasks.
    pub fn phrases(&self, task: TaskKind) -> Option<&[String]> {
        match task {
            TaskKind::Trad => Some(&self.trad),
            TaskKind::Cc => Some(&self.cc),
            TaskKind::Vi => Some(&self.vi),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_loads() {
        let b = PhraseBank::builtin().unwrap();
        assert_eq!(b.phrases(TaskKind::Trad).unwrap()[0], "do not change clothes");
        assert_eq!(b.phrases(TaskKind::Cc).unwrap()[19], "ignore clothes");
        assert_eq!(b.phrases(TaskKind::Vi).unwrap()[0], "retrieve cross-modality images");
        assert!(b.phrases(TaskKind::Ctcc).is_none());
    }

    #[test]
    fn checksum_mismatch_rejected() {
        let tampered = BUILTIN_JSON.replace("swap outfits", "swap outfit");
        assert!(matches!(
            PhraseBank::from_json(&tampered, Some(BUILTIN_SHA256)),
            Err(Error::Bank(_))
        ));
    }

    #[test]
    fn short_list_rejected() {
        let text = r#"{"trad": ["a"], "cc": [], "vi": []}"#;
        assert!(PhraseBank::from_json(text, None).is_err());
    }
}

//! Deterministic synthetic identities, their renders and the JSON-lines
//! manifest describing them.

pub mod augment;
pub mod render;
pub mod sampler;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use augment::{augment, AugmentPolicy};
pub use render::{crop_clothes, outfit_template, render};
pub use sampler::PkSampler;

use crate::error::{Error, Result};
use crate::instruct::attributes::{attribute_to_sentences, COLORS};
use crate::instruct::TaskKind;
use crate::tensor::Tensor;
use render::{CODE_LEN, COAT_STYLES, HAIR, LOWER_STYLES};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub train_identities: usize,
    pub samples_per_identity: usize,
    pub test_identities: usize,
    pub cameras: usize,
    pub wardrobe: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub template_height: usize,
    pub template_width: usize,
    pub noise_std: f32,
    /// Every `ir_period`-th training sample (offset `ir_period − 1`) is
    /// infrared; 0 disables infrared training samples.
    pub ir_period: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            train_identities: 20,
            samples_per_identity: 8,
            test_identities: 10,
            cameras: 2,
            wardrobe: 3,
            image_height: 64,
            image_width: 32,
            template_height: 32,
            template_width: 16,
            noise_std: 0.03,
            ir_period: 4,
        }
    }
}

/// Test layout per identity: `(split, camera, modality, wardrobe slot)`.
const TEST_LAYOUT: [(Split, usize, Modality, usize); 6] = [
    (Split::Query, 0, Modality::Visible, 0),
    (Split::Query, 0, Modality::Infrared, 0),
    (Split::Gallery, 1, Modality::Visible, 0),
    (Split::Gallery, 1, Modality::Visible, 1),
    (Split::Gallery, 1, Modality::Visible, 2),
    (Split::Gallery, 1, Modality::Infrared, 1),
];

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.train_identities < 2 || self.samples_per_identity < 2 {
            return bad("need at least 2 training identities with 2 samples each".into());
        }
        if self.test_identities < 2 {
            return bad("need at least 2 test identities".into());
        }
        if self.cameras < 2 {
            return bad("need at least 2 cameras".into());
        }
        if self.wardrobe < 2 {
            return bad(format!(
                "wardrobe size {} cannot produce clothes-changing pairs",
                self.wardrobe
            ));
        }
        if self.wardrobe > COLORS.len() {
            return bad(format!("wardrobe size is at most {}", COLORS.len()));
        }
        let (h, w) = (self.image_height, self.image_width);
        if h == 0 || w == 0 || h % render::GRID_ROWS != 0 || w % render::GRID_COLS != 0 {
            return bad(format!("image {h}x{w} must be a positive multiple of 8x4"));
        }
        if self.template_height == 0 || self.template_width == 0 {
            return bad("template size must be positive".into());
        }
        if !(self.noise_std >= 0.0) {
            return bad("noise_std must be nonnegative".into());
        }
        Ok(())
    }

    pub fn record_count(&self) -> usize {
        self.train_identities * self.samples_per_identity + self.test_identities * TEST_LAYOUT.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visible,
    Infrared,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Outfit {
    pub coat_color: usize,
    pub coat_style: usize,
    pub trousers_color: usize,
    pub lower_style: usize,
}

impl Outfit {
    pub fn attributes(&self) -> Vec<String> {
        vec![
            format!("{} coat", COLORS[self.coat_color]),
            COAT_STYLES[self.coat_style].into(),
            format!("{} trousers", COLORS[self.trousers_color]),
            LOWER_STYLES[self.lower_style].into(),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentitySpec {
    pub identity: usize,
    pub hair: usize,
    /// Skin shade per biometric cell group, each in `[0, 1]`.
    pub code: Vec<f32>,
    pub wardrobe: Vec<Outfit>,
    pub cameras: Vec<usize>,
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub index: usize,
    pub split: Split,
    pub identity: usize,
    pub camera: usize,
    /// Index into the identity's wardrobe.
    pub clothes: usize,
    pub modality: Modality,
    pub tasks: Vec<TaskKind>,
    pub attributes: Vec<String>,
    pub description: Vec<String>,
    pub noise_seed: u64,
    /// Image file relative to the manifest; absent when rendered from seeds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
}

/// SplitMix64 step, used to derive independent seeds.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(mix(seed), |acc, &p| mix(acc ^ mix(p)))
}

fn make_identity(cfg: &SynthConfig, identity: usize) -> IdentitySpec {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[1, identity as u64]));
    let hair = rng.random_range(0..HAIR.len());
    let code = (0..CODE_LEN).map(|_| rng.random::<f32>()).collect();
    let mut coats: Vec<usize> = (0..COLORS.len()).collect();
    coats.shuffle(&mut rng);
    let wardrobe = coats[..cfg.wardrobe]
        .iter()
        .map(|&coat_color| Outfit {
            coat_color,
            coat_style: rng.random_range(0..COAT_STYLES.len()),
            trousers_color: rng.random_range(0..COLORS.len()),
            lower_style: rng.random_range(0..LOWER_STYLES.len()),
        })
        .collect();
    IdentitySpec {
        identity,
        hair,
        code,
        wardrobe,
        cameras: (0..cfg.cameras).collect(),
    }
}

/// Generated dataset: identities plus records. Images are rendered on demand
/// from each record's seed, so two datasets from the same config are equal.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: SynthConfig,
    pub identities: Vec<IdentitySpec>,
    pub records: Vec<SampleRecord>,
}

const VISIBLE_TASKS: [TaskKind; 6] = TaskKind::ALL;

impl Dataset {
    /// Training identities are `0..train_identities`; test identities follow.
    pub fn generate(config: SynthConfig) -> Result<Self> {
        config.validate()?;
        let total = config.train_identities + config.test_identities;
        let identities: Vec<IdentitySpec> = (0..total).map(|i| make_identity(&config, i)).collect();
        let mut records = Vec::with_capacity(config.record_count());
        let push = |records: &mut Vec<SampleRecord>,
                        split: Split,
                        id: &IdentitySpec,
                        camera: usize,
                        modality: Modality,
                        clothes: usize,
                        slot: usize|
         -> Result<()> {
            let mut attributes = id.wardrobe[clothes].attributes();
            attributes.push(HAIR[id.hair].into());
            let description = attribute_to_sentences(&attributes)?;
            let tasks = match modality {
                Modality::Visible => VISIBLE_TASKS.to_vec(),
                Modality::Infrared => vec![TaskKind::Vi],
            };
            let split_tag = split as u64;
            records.push(SampleRecord {
                index: records.len(),
                split,
                identity: id.identity,
                camera,
                clothes,
                modality,
                tasks,
                attributes,
                description,
                noise_seed: derive_seed(config.seed, &[2, split_tag, id.identity as u64, slot as u64]),
                path: None,
            });
            Ok(())
        };
        for id in &identities[..config.train_identities] {
            for j in 0..config.samples_per_identity {
                let ir = config.ir_period > 0 && j % config.ir_period == config.ir_period - 1;
                let modality = if ir { Modality::Infrared } else { Modality::Visible };
                push(
                    &mut records,
                    Split::Train,
                    id,
                    j % config.cameras,
                    modality,
                    j % config.wardrobe,
                    j,
                )?;
            }
        }
        for id in &identities[config.train_identities..] {
            for (slot, &(split, camera, modality, clothes)) in TEST_LAYOUT.iter().enumerate() {
                push(
                    &mut records,
                    split,
                    id,
                    camera,
                    modality,
                    clothes % config.wardrobe,
                    slot,
                )?;
            }
        }
        Ok(Self {
            config,
            identities,
            records,
        })
    }

    /// Rebuilds a dataset from its config and previously written records.
    pub fn from_records(config: SynthConfig, records: Vec<SampleRecord>) -> Result<Self> {
        let mut ds = Self::generate(config)?;
        for r in &records {
            if r.identity >= ds.identities.len() || r.clothes >= ds.config.wardrobe {
                return Err(Error::Config(format!("record {} does not fit the config", r.index)));
            }
        }
        ds.records = records;
        Ok(ds)
    }

    pub fn identity(&self, id: usize) -> Result<&IdentitySpec> {
        self.identities
            .get(id)
            .ok_or_else(|| Error::Config(format!("unknown identity {id}")))
    }

    pub fn record(&self, index: usize) -> Result<&SampleRecord> {
        self.records
            .get(index)
            .ok_or_else(|| Error::Config(format!("unknown record {index}")))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SampleRecord> + '_ {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn render(&self, r: &SampleRecord) -> Result<Tensor<f32>> {
        let id = self.identity(r.identity)?;
        let outfit = id
            .wardrobe
            .get(r.clothes)
            .ok_or_else(|| Error::Config(format!("unknown clothes {}", r.clothes)))?;
        let c = &self.config;
        Ok(render(
            id,
            outfit,
            r.camera,
            r.modality,
            r.noise_seed,
            c.noise_std,
            c.image_height,
            c.image_width,
        ))
    }

    pub fn template(&self, identity: usize, clothes: usize) -> Result<Tensor<f32>> {
        let id = self.identity(identity)?;
        let outfit = id
            .wardrobe
            .get(clothes)
            .ok_or_else(|| Error::Config(format!("unknown clothes {clothes}")))?;
        let c = &self.config;
        Ok(outfit_template(
            outfit,
            c.image_height,
            c.image_width,
            c.template_height,
            c.template_width,
        ))
    }

    pub fn crop(&self, image: &Tensor<f32>) -> Tensor<f32> {
        crop_clothes(image, self.config.template_height, self.config.template_width)
    }

    /// Number of training identities (classifier width).
    pub fn num_train_ids(&self) -> usize {
        self.config.train_identities
    }
}

/// One JSON object per line.
pub fn to_jsonl(records: &[SampleRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Config(format!("{e}")))?;
        out.push_str(&line);
        out.push('\n');
    }
    Ok(out)
}

pub fn from_jsonl(text: &str) -> Result<Vec<SampleRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Config(format!("manifest line {}: {e}", i + 1)))
        })
        .collect()
}

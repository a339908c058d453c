//! One optimisation step per task batch, plus the instruction feature cache
//! shared with evaluation.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::instruct::{sample_instruction, Instruction, Payload, PhraseBank, Role, TaskKind, TemplateRef};
use crate::loss::{
    mine_triplets, total_loss_retrieval, total_loss_t2i, MarginMode, MiningMode, DEFAULT_MARGIN,
    DEFAULT_TEMPERATURE,
};
use crate::model::{mean_pool, InstructionInput, Model, ModelConfig, Ragged};
use crate::optim::{AdamW, AdamWConfig, WarmupSchedule};
use crate::params::ParamStore;
use crate::synth::{augment, derive_seed, AugmentPolicy, Dataset, PkSampler, SampleRecord, Split};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Optimisation and sampling settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Enabled tasks; batches cycle through them in this order.
    pub tasks: Vec<TaskKind>,
    pub p: usize,
    pub k: usize,
    pub margin: f64,
    pub temperature: f64,
    pub mining: MiningMode,
    pub margin_mode: MarginMode,
    pub optimizer: AdamWConfig,
    pub schedule: WarmupSchedule,
    pub augment: AugmentPolicy,
    /// Chance that a CTCC/LI sample gets an instruction pointing at one of
    /// its identity's other looks instead of describing itself.
    pub query_instruction_prob: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tasks: alloc::vec![TaskKind::Trad],
            p: 32,
            k: 4,
            margin: DEFAULT_MARGIN,
            temperature: DEFAULT_TEMPERATURE,
            mining: MiningMode::All,
            margin_mode: MarginMode::Adaptive,
            optimizer: AdamWConfig::default(),
            schedule: WarmupSchedule::default(),
            augment: AugmentPolicy::default(),
            query_instruction_prob: 0.5,
        }
    }
}

impl TrainConfig {
    /// Small batches and a faster schedule for single-core runs of a few
    /// hundred steps. Only flips are kept: crops shift the biometric cells
    /// and erasing can wipe them out entirely at 64x32.
    pub fn desk() -> Self {
        Self {
            p: 4,
            k: 4,
            optimizer: AdamWConfig {
                lr: 1e-3,
                ..AdamWConfig::default()
            },
            schedule: WarmupSchedule {
                start_lr: 1e-5,
                base_lr: 1e-3,
                warmup_steps: 100,
            },
            augment: AugmentPolicy::flip_only(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::Config("no task enabled".into()));
        }
        if self.p < 2 || self.k < 2 {
            return Err(Error::Config(format!(
                "P={} K={}: triplets need at least 2 identities with 2 samples",
                self.p, self.k
            )));
        }
        if !(self.margin >= 0.0) || !(self.temperature > 0.0) {
            return Err(Error::Config("margin must be >= 0 and temperature > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.query_instruction_prob) {
            return Err(Error::Config("query_instruction_prob must lie in [0, 1]".into()));
        }
        if (self.schedule.base_lr - self.optimizer.lr).abs() > 0.0 {
            return Err(Error::Config("schedule base_lr differs from optimizer lr".into()));
        }
        Ok(())
    }
}

/// Pixels fed to the instruction encoder for a template reference.
pub fn template_image(data: &Dataset, images: &[Tensor<f32>], t: &TemplateRef) -> Result<Tensor<f32>> {
    match *t {
        TemplateRef::Wardrobe { identity, clothes } => data.template(identity, clothes),
        TemplateRef::Crop { record } => images
            .get(record)
            .map(|img| data.crop(img))
            .ok_or_else(|| contract(format!("no image for record {record}"))),
    }
}

/// Instruction sequences `F_T`. With a frozen encoder the values are
/// computed once per distinct instruction and replayed as constants.
#[derive(Clone, Debug, Default)]
pub struct InstructionFeatures {
    cache: BTreeMap<Instruction, Tensor<f32>>,
}

impl InstructionFeatures {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.cache.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cache.is_empty()
    }

    fn encode_one(
        model: &Model,
        tape: &mut Tape<f32>,
        store: &ParamStore<f32>,
        data: &Dataset,
        images: &[Tensor<f32>],
        instr: &Instruction,
    ) -> Result<Var> {
        let r = match &instr.payload {
            Payload::Text(s) => model.encode_instructions(tape, store, &[InstructionInput::Text(s)])?,
            Payload::Template(t) => {
                let img = template_image(data, images, t)?;
                model.encode_instructions(tape, store, &[InstructionInput::Image(&img)])?
            }
        };
        Ok(r.tokens)
    }

    /// Stacks the sequences of `instrs` on `tape`.
    pub fn encode(
        &mut self,
        model: &Model,
        tape: &mut Tape<f32>,
        store: &ParamStore<f32>,
        data: &Dataset,
        images: &[Tensor<f32>],
        instrs: &[Instruction],
    ) -> Result<Ragged> {
        let frozen = model.config.instruction_encoder_frozen;
        let mut parts = Vec::with_capacity(instrs.len());
        for ins in instrs {
            let v = if frozen {
                if !self.cache.contains_key(ins) {
                    let mut t = Tape::inference();
                    let v = Self::encode_one(model, &mut t, store, data, images, ins)?;
                    self.cache.insert(ins.clone(), t.value(v).clone());
                }
                tape.constant(self.cache[ins].clone())
            } else {
                Self::encode_one(model, tape, store, data, images, ins)?
            };
            parts.push(v);
        }
        Ragged::stack(tape, &parts)
    }
}

/// Mean over the rows of each sequence, in f64.
pub fn pooled_rows(tape: &Tape<f32>, r: &Ragged) -> Vec<Vec<f64>> {
    let t = tape.value(r.tokens);
    let c = t.cols();
    r.spans
        .iter()
        .map(|&(s, l)| {
            let mut acc = alloc::vec![0f64; c];
            for row in s..s + l {
                for (a, &v) in acc.iter_mut().zip(t.row(row)) {
                    *a += f64::from(v);
                }
            }
            acc.iter().map(|a| a / l as f64).collect()
        })
        .collect()
}

pub fn value_rows(tape: &Tape<f32>, v: Var) -> Vec<Vec<f64>> {
    let t = tape.value(v);
    (0..t.rows())
        .map(|r| t.row(r).iter().map(|&x| f64::from(x)).collect())
        .collect()
}

/// What happened in one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub task: TaskKind,
    pub lr: f64,
    pub loss: f64,
    /// Named loss terms.
    pub terms: BTreeMap<String, f64>,
    pub triplets: usize,
    pub skipped_anchors: usize,
}

/// Everything a training run mutates.
pub struct Trainer {
    pub model: Model,
    pub store: ParamStore<f32>,
    pub optimizer: AdamW<f32>,
    pub config: TrainConfig,
    pub data: Dataset,
    /// Clean images indexed by record.
    pub images: Vec<Tensor<f32>>,
    pub bank: PhraseBank,
    pub features: InstructionFeatures,
    step: u64,
    rng: ChaCha8Rng,
    samplers: BTreeMap<TaskKind, PkSampler>,
    /// Training records carrying each task, in sampler index order.
    pools: BTreeMap<TaskKind, Vec<usize>>,
}

/// Renders every record of `data`.
pub fn render_all(data: &Dataset) -> Result<Vec<Tensor<f32>>> {
    data.records.iter().map(|r| data.render(r)).collect()
}

impl Trainer {
    /// Initialises the model from `seed` and prepares per-task samplers over
    /// the training split.
    pub fn new(
        model_config: ModelConfig,
        config: TrainConfig,
        data: Dataset,
        images: Vec<Tensor<f32>>,
        bank: PhraseBank,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if images.len() != data.records.len() {
            return Err(contract("one image per record is required"));
        }
        let (h, w) = (data.config.image_height, data.config.image_width);
        if (model_config.image_height, model_config.image_width) != (h, w) {
            return Err(Error::Config(format!(
                "model expects {}x{} images, dataset has {h}x{w}",
                model_config.image_height, model_config.image_width
            )));
        }
        let mut store = ParamStore::new();
        let model = Model::init_seeded(model_config, data.num_train_ids(), &mut store, derive_seed(seed, &[4]))?;
        let optimizer = AdamW::new(config.optimizer, &store);
        let mut samplers = BTreeMap::new();
        let mut pools = BTreeMap::new();
        for &task in &config.tasks {
            if samplers.contains_key(&task) {
                continue;
            }
            let pool: Vec<usize> = data
                .split(Split::Train)
                .filter(|r| r.tasks.contains(&task))
                .map(|r| r.index)
                .collect();
            let labels: Vec<usize> = pool.iter().map(|&i| data.records[i].identity).collect();
            if let Some(&bad) = labels.iter().find(|&&y| y >= model.num_ids) {
                return Err(contract(format!("training identity {bad} exceeds the classifier")));
            }
            let s = PkSampler::new(&labels, config.p, config.k)
                .map_err(|e| Error::Config(format!("task {task}: {e}")))?;
            samplers.insert(task, s);
            pools.insert(task, pool);
        }
        Ok(Self {
            model,
            store,
            optimizer,
            config,
            data,
            images,
            bank,
            features: InstructionFeatures::new(),
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, &[3])),
            samplers,
            pools,
        })
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    /// Task of the next step: round-robin over the enabled tasks.
    pub fn next_task(&self) -> TaskKind {
        let t = &self.config.tasks;
        t[(self.step % t.len() as u64) as usize]
    }

    fn instructions(&mut self, task: TaskKind, batch: &[usize]) -> Result<Vec<Instruction>> {
        let rec = |i: usize| &self.data.records[i];
        if task.uses_bank() {
            let one = sample_instruction(&self.bank, task, rec(batch[0]), Role::Gallery, &[], &mut self.rng)?;
            return Ok(alloc::vec![one; batch.len()]);
        }
        let pool: Vec<SampleRecord> = self.pools[&task].iter().map(|&i| self.data.records[i].clone()).collect();
        let mut out = Vec::with_capacity(batch.len());
        for &i in batch {
            let role = if matches!(task, TaskKind::Ctcc | TaskKind::Li)
                && self.rng.random_bool(self.config.query_instruction_prob)
            {
                Role::Query
            } else {
                Role::Gallery
            };
            out.push(sample_instruction(&self.bank, task, &self.data.records[i], role, &pool, &mut self.rng)?);
        }
        Ok(out)
    }

    /// Runs one step. A non-finite loss or gradient aborts before any
    /// parameter changes.
    pub fn step(&mut self) -> Result<StepRecord> {
        let task = self.next_task();
        let lr = self.config.schedule.lr_at(self.step);
        let sampler = self.samplers.get_mut(&task).expect("sampler per task");
        let picks = sampler.next_batch(&mut self.rng);
        let batch: Vec<usize> = picks.iter().map(|&j| self.pools[&task][j]).collect();
        let labels: Vec<usize> = batch.iter().map(|&i| self.data.records[i].identity).collect();
        let images: Vec<Tensor<f32>> = batch
            .iter()
            .map(|&i| augment(&self.images[i], &mut self.rng, &self.config.augment))
            .collect();
        let instrs = self.instructions(task, &batch)?;

        let mut tape = Tape::new();
        let t = self
            .features
            .encode(&self.model, &mut tape, &self.store, &self.data, &self.images, &instrs)?;
        let refs: Vec<&Tensor<f32>> = images.iter().collect();
        let mut terms = BTreeMap::new();
        let (total, triplets, skipped) = if task == TaskKind::T2i {
            let f = self.model.encode_images(&mut tape, &self.store, &refs, None)?;
            let text = mean_pool(&mut tape, &t)?;
            // Each text is paired with its own image and with a uniformly
            // drawn in-batch image of another identity.
            let n = batch.len();
            let mut neg = Vec::with_capacity(n);
            for i in 0..n {
                let others: Vec<usize> = (0..n).filter(|&j| labels[j] != labels[i]).collect();
                neg.push(others[self.rng.random_range(0..others.len())]);
            }
            let rows = tape.shape(t.tokens).0;
            let mut spans = t.spans.clone();
            spans.extend(t.spans.iter().map(|&(s, l)| (s + rows, l)));
            let tokens = tape.concat_rows(&[t.tokens, t.tokens])?;
            let pairs = Ragged { tokens, spans };
            let f_neg = tape.gather_rows(f, &neg)?;
            let f2 = tape.concat_rows(&[f, f_neg])?;
            let f_out = self.model.fuse(&mut tape, &self.store, f2, &pairs)?;
            let logits = self.model.match_logits(&mut tape, &self.store, f_out)?;
            let positive: Vec<bool> = (0..2 * n).map(|i| i < n).collect();
            let l = total_loss_t2i(&mut tape, f, text, &labels, logits, &positive, self.config.temperature)?;
            terms.insert("contrastive".into(), f64::from(tape.scalar(l.contrastive)));
            terms.insert("match".into(), f64::from(tape.scalar(l.matching)));
            (l.total, 0, 0)
        } else {
            let f = self.model.encode_images(&mut tape, &self.store, &refs, Some(&t))?;
            let f_out = self.model.fuse(&mut tape, &self.store, f, &t)?;
            let idl = self.model.id_logits(&mut tape, &self.store, f)?;
            let idl_out = self.model.id_out_logits(&mut tape, &self.store, f_out)?;
            let pooled = pooled_rows(&tape, &t);
            let fv = value_rows(&tape, f);
            let mined = mine_triplets(
                &labels,
                &pooled,
                &fv,
                self.config.margin,
                self.config.mining,
                self.config.margin_mode,
            )?;
            let l = total_loss_retrieval(&mut tape, f, f_out, idl, idl_out, &labels, &mined.batch)?;
            for (name, v) in [
                ("triplet_f", l.triplet_f),
                ("id_f", l.id_f),
                ("triplet_out", l.triplet_out),
                ("id_out", l.id_out),
            ] {
                terms.insert(name.into(), f64::from(tape.scalar(v)));
            }
            (l.total, mined.batch.len(), mined.skipped_anchors)
        };
        let loss = f64::from(tape.scalar(total));
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("loss is {loss} at step {}", self.step)));
        }
        let grads = tape.backward(total)?;
        self.store.load_grads(&grads);
        self.optimizer.step(&mut self.store, lr)?;
        self.store.zero_grads();
        let rec = StepRecord {
            step: self.step,
            task,
            lr,
            loss,
            terms,
            triplets,
            skipped_anchors: skipped,
        };
        self.step += 1;
        Ok(rec)
    }
}

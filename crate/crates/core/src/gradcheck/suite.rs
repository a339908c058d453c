//! Every loss and layer type checked on small random f64 instances.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::finite_diff_check;
use crate::error::Result;
use crate::loss::{
    adaptive_triplet_loss, contrastive_loss, identity_loss, match_loss, mine_triplets,
    total_loss_retrieval, total_loss_t2i, MarginMode, MiningMode, TripletBatch,
};
use crate::model::{
    mean_pool, EditingLayer, Fusion, InstructionInput, Model, ModelConfig, Ragged,
};
use crate::params::{ParamId, ParamStore};
use crate::synth::derive_seed;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const SUITE_TOLERANCE: f64 = 1e-4;
pub const SUITE_STEP: f64 = 3e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    pub passed: bool,
}

fn uniform(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn([rows, cols], |_| rng.random_range(lo..hi))
}

/// Replaces every parameter with `U(-0.5, 0.5)` (`1 + U` for LayerNorm
/// gains) so that gates are open and no path is near zero.
fn randomize(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let n = store.get(id).numel();
        let shift = if store.name(id).ends_with(".gamma") { 1.0 } else { 0.0 };
        let v: Vec<f64> = (0..n).map(|_| shift + rng.random_range(-0.5..0.5)).collect();
        store.set_values(id, &v).expect("same length");
    }
}

/// `Σ out ⊙ R` for a fixed random `R`.
fn project(tape: &mut Tape<f64>, out: Var, r: &Tensor<f64>) -> Result<Var> {
    let c = tape.constant(r.clone());
    let p = tape.mul(out, c)?;
    Ok(tape.sum(p))
}

fn entry<F>(name: &str, store: &mut ParamStore<f64>, f: F) -> Result<SuiteEntry>
where
    F: FnMut(&ParamStore<f64>, &mut Tape<f64>) -> Result<Var>,
{
    let r = finite_diff_check(store, SUITE_STEP, None, f)?;
    let passed = r.passes(SUITE_TOLERANCE);
    Ok(SuiteEntry {
        name: name.to_string(),
        max_rel_err: r.max_rel_err,
        worst: r.worst,
        checked: r.checked,
        passed,
    })
}

fn triplet_batch(rng: &mut ChaCha8Rng) -> TripletBatch {
    let triples = vec![(0, 1, 2), (0, 2, 3), (1, 0, 4), (3, 4, 5), (5, 3, 1)];
    let betas = triples
        .iter()
        .map(|_| (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)))
        .collect();
    TripletBatch {
        triples,
        betas,
        margin: 0.3,
    }
}

const KINK_CLEARANCE: f64 = 0.05;

/// `Sign(β1−β2)·(d1 + (β1−β2)·m − d2)` per triple, computed directly.
fn hinge_args(x: &Tensor<f64>, batch: &TripletBatch) -> Vec<f64> {
    let d = |i: usize, j: usize| -> f64 { x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b) * (a - b)).sum() };
    batch
        .triples
        .iter()
        .zip(&batch.betas)
        .map(|(&(a, p, n), &(b1, b2))| {
            let s = (b1 - b2).signum() * f64::from(u8::from(b1 != b2));
            s * (d(a, p) + (b1 - b2) * batch.margin - d(a, n))
        })
        .collect()
}

fn losses(seed: u64, out: &mut Vec<SuiteEntry>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[10]));
    // Finite differences are meaningless across the hinge, so redraw until
    // every hinge argument is clear of zero and at least one is active.
    let (x, batch) = loop {
        let x = uniform(6, 4, -1.0, 1.0, &mut rng);
        let batch = triplet_batch(&mut rng);
        let args = hinge_args(&x, &batch);
        if args.iter().all(|a| a.abs() > KINK_CLEARANCE) && args.iter().any(|&a| a > 0.0) {
            break (x, batch);
        }
    };
    let mut s = ParamStore::new();
    let feats = s.add("features", x);
    out.push(entry("adaptive_triplet", &mut s, |s, t| {
        let x = t.param(s, feats);
        Ok(adaptive_triplet_loss(t, x, &batch)?.loss)
    })?);

    let mut s = ParamStore::new();
    let logits = s.add("logits", uniform(5, 7, -2.0, 2.0, &mut rng));
    let labels = [0usize, 3, 6, 3, 1];
    out.push(entry("identity_ce", &mut s, |s, t| {
        let z = t.param(s, logits);
        identity_loss(t, z, &labels)
    })?);

    let mut s = ParamStore::new();
    let img = s.add("image", uniform(4, 5, -1.0, 1.0, &mut rng));
    let txt = s.add("text", uniform(4, 5, -1.0, 1.0, &mut rng));
    let ids = [0usize, 1, 0, 2];
    out.push(entry("contrastive", &mut s, |s, t| {
        let (a, b) = (t.param(s, img), t.param(s, txt));
        contrastive_loss(t, a, b, Some(&ids), 0.07)
    })?);

    let mut s = ParamStore::new();
    let m = s.add("match_logits", uniform(6, 2, -2.0, 2.0, &mut rng));
    let pos = [true, false, true, true, false, false];
    out.push(entry("match_bce", &mut s, |s, t| {
        let z = t.param(s, m);
        match_loss(t, z, &pos)
    })?);
    Ok(())
}

struct TinyModel {
    model: Model,
    store: ParamStore<f64>,
    images: Vec<Tensor<f64>>,
    templates: Vec<Tensor<f64>>,
    texts: Vec<Vec<String>>,
}

fn tiny_model(seed: u64) -> Result<TinyModel> {
    let cfg = ModelConfig::tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[11]));
    let mut store = ParamStore::new();
    let model = Model::init(cfg.clone(), 3, &mut store, &mut rng)?;
    randomize(&mut store, &mut rng);
    let images = (0..4)
        .map(|_| Tensor::from_fn([cfg.channels, cfg.image_height, cfg.image_width], |_| rng.random()))
        .collect();
    let templates = (0..2)
        .map(|_| {
            Tensor::from_fn(
                [cfg.channels, cfg.instruction_image_height, cfg.instruction_image_width],
                |_| rng.random(),
            )
        })
        .collect();
    let texts = ["red coat", "a blue skirt and shoes", "black hair", "grey trousers now"]
        .iter()
        .map(|s| vec![s.to_string()])
        .collect();
    Ok(TinyModel {
        model,
        store,
        images,
        templates,
        texts,
    })
}

fn assemblies(seed: u64, out: &mut Vec<SuiteEntry>) -> Result<()> {
    let TinyModel {
        model,
        mut store,
        images,
        templates,
        texts,
    } = tiny_model(seed)?;
    let inputs = [
        InstructionInput::Text(&texts[0]),
        InstructionInput::Image(&templates[0]),
        InstructionInput::Text(&texts[1]),
        InstructionInput::Image(&templates[1]),
    ];
    let labels = [0usize, 0, 1, 1];
    // β is a constant of the objective, so triples are mined once.
    let mined = {
        let mut tape = Tape::inference();
        let t = model.encode_instructions(&mut tape, &store, &inputs)?;
        let p = mean_pool(&mut tape, &t)?;
        let v = tape.value(p);
        let pooled: Vec<Vec<f64>> = (0..v.rows()).map(|r| v.row(r).to_vec()).collect();
        mine_triplets(&labels, &pooled, &[], 0.3, MiningMode::All, MarginMode::Adaptive)?
    };
    let refs: Vec<&Tensor<f64>> = images.iter().collect();
    out.push(entry("total_retrieval", &mut store, |s, tape| {
        let t = model.encode_instructions(tape, s, &inputs)?;
        let f = model.encode_images(tape, s, &refs, Some(&t))?;
        let f_out = model.fuse(tape, s, f, &t)?;
        let idl = model.id_logits(tape, s, f)?;
        let ido = model.id_out_logits(tape, s, f_out)?;
        Ok(total_loss_retrieval(tape, f, f_out, idl, ido, &labels, &mined.batch)?.total)
    })?);

    let t2i_labels = [0usize, 0, 1, 2];
    let text_inputs: Vec<InstructionInput<'_, f64>> =
        texts.iter().map(|t| InstructionInput::Text(t)).collect();
    out.push(entry("total_t2i", &mut store, |s, tape| {
        let t = model.encode_instructions(tape, s, &text_inputs)?;
        let f = model.encode_images(tape, s, &refs, None)?;
        let text = mean_pool(tape, &t)?;
        let f_out = model.fuse(tape, s, f, &t)?;
        let logits = model.match_logits(tape, s, f_out)?;
        let pos = [true, false, true, false];
        Ok(total_loss_t2i(tape, f, text, &t2i_labels, logits, &pos, 0.07)?.total)
    })?);
    Ok(())
}

fn layers(seed: u64, out: &mut Vec<SuiteEntry>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[12]));
    let (dim, heads) = (4, 2);

    let mut s = ParamStore::new();
    let layer = EditingLayer::new(&mut s, "edit", dim, heads, 2, &mut rng);
    randomize(&mut s, &mut rng);
    let x = s.add("input.x", uniform(7, dim, -1.0, 1.0, &mut rng));
    let ins = s.add("input.instr", uniform(5, dim, -1.0, 1.0, &mut rng));
    let r = uniform(7, dim, -1.0, 1.0, &mut rng);
    out.push(entry("editing_layer", &mut s, |s, t| {
        let xv = t.param(s, x);
        let iv = t.param(s, ins);
        let xr = Ragged {
            tokens: xv,
            spans: vec![(0, 4), (4, 3)],
        };
        let ir = Ragged {
            tokens: iv,
            spans: vec![(0, 2), (2, 3)],
        };
        let y = layer.forward(t, s, heads, &xr, Some(&ir), None)?;
        project(t, y.tokens, &r)
    })?);

    let mut s = ParamStore::new();
    let fusion = Fusion::new(&mut s, dim, 2, 2, &mut rng);
    randomize(&mut s, &mut rng);
    let f = s.add("input.f", uniform(3, dim, -1.0, 1.0, &mut rng));
    let ins = s.add("input.instr", uniform(6, dim, -1.0, 1.0, &mut rng));
    let r = uniform(3, dim, -1.0, 1.0, &mut rng);
    out.push(entry("fusion", &mut s, |s, t| {
        let fv = t.param(s, f);
        let iv = t.param(s, ins);
        let ir = Ragged {
            tokens: iv,
            spans: vec![(0, 1), (1, 2), (3, 3)],
        };
        let y = fusion.forward(t, s, heads, fv, &ir)?;
        project(t, y, &r)
    })?);

    let TinyModel {
        model,
        mut store,
        images,
        templates,
        texts,
    } = tiny_model(seed)?;
    let cfg = model.config.clone();
    let refs: Vec<&Tensor<f64>> = images.iter().collect();
    let rows = images.len() * cfg.seq_len();
    let r = uniform(rows, cfg.dim, -1.0, 1.0, &mut rng);
    out.push(entry("patch_embed", &mut store, |s, t| {
        let y = model.patch.forward(t, s, &cfg, &refs)?;
        project(t, y.tokens, &r)
    })?);

    let text_inputs: Vec<InstructionInput<'_, f64>> =
        texts.iter().map(|t| InstructionInput::Text(t)).collect();
    let n_text = {
        let mut t = Tape::inference();
        let y = model.encode_instructions(&mut t, &store, &text_inputs)?;
        t.shape(y.tokens).0
    };
    let r = uniform(n_text, cfg.dim, -1.0, 1.0, &mut rng);
    out.push(entry("instruction_encoder_text", &mut store, |s, t| {
        let y = model.encode_instructions(t, s, &text_inputs)?;
        project(t, y.tokens, &r)
    })?);

    let img_inputs: Vec<InstructionInput<'_, f64>> =
        templates.iter().map(InstructionInput::Image).collect();
    let r = uniform(templates.len() * cfg.instruction_patches(), cfg.dim, -1.0, 1.0, &mut rng);
    out.push(entry("instruction_encoder_image", &mut store, |s, t| {
        let y = model.encode_instructions(t, s, &img_inputs)?;
        project(t, y.tokens, &r)
    })?);

    let instr_inputs = [
        InstructionInput::Text(&texts[0]),
        InstructionInput::Image(&templates[0]),
        InstructionInput::Text(&texts[2]),
        InstructionInput::Image(&templates[1]),
    ];
    let r = uniform(images.len(), cfg.dim, -1.0, 1.0, &mut rng);
    out.push(entry("editing_transformer", &mut store, |s, t| {
        let ins = model.encode_instructions(t, s, &instr_inputs)?;
        let f = model.encode_images(t, s, &refs, Some(&ins))?;
        project(t, f, &r)
    })?);
    Ok(())
}

/// A deliberately wrong backward rule: forward `sin`, derivative `1.1·cos`.
fn faulty(seed: u64, out: &mut Vec<SuiteEntry>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[13]));
    let mut s = ParamStore::new();
    let x = s.add("x", uniform(2, 3, -1.0, 1.0, &mut rng));
    out.push(entry("injected_fault", &mut s, |s, t| {
        let v = t.param(s, x);
        let y = t.unary(v, libm::sin, |x, _| 1.1 * libm::cos(x));
        Ok(t.sum(y))
    })?);
    Ok(())
}

/// Runs the full suite. `inject_fault` appends an entry with a broken
/// derivative, which must fail.
pub fn run_suite(seed: u64, inject_fault: bool) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::new();
    losses(seed, &mut out)?;
    assemblies(seed, &mut out)?;
    layers(seed, &mut out)?;
    if inject_fault {
        faulty(seed, &mut out)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_and_detects_the_fault() {
        let entries = run_suite(5, true).unwrap();
        for e in &entries {
            if e.name == "injected_fault" {
                assert!(!e.passed);
            } else {
                assert!(e.passed, "{e:?}");
            }
        }
    }
}

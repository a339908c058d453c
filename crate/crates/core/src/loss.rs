//! Training objectives: relatedness, the adaptive triplet loss, identity,
//! contrastive and matching losses, triplet mining and the per-task sums.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_MARGIN: f64 = 0.3;
pub const DEFAULT_TEMPERATURE: f64 = 0.07;

/// `β = 𝟙(y_a = y_r) · cos(ft_a, ft_r)`.
pub fn relatedness(y_a: usize, y_r: usize, ft_a: &[f64], ft_r: &[f64]) -> Result<f64> {
    if y_a != y_r {
        return Ok(0.0);
    }
    if ft_a.len() != ft_r.len() {
        return Err(contract("instruction vectors differ in length"));
    }
    let dot: f64 = ft_a.iter().zip(ft_r).map(|(a, b)| a * b).sum();
    let na = libm::sqrt(ft_a.iter().map(|a| a * a).sum::<f64>());
    let nr = libm::sqrt(ft_r.iter().map(|a| a * a).sum::<f64>());
    if !(na > 0.0 && nr > 0.0) {
        return Err(Error::Numeric("zero-norm instruction vector".into()));
    }
    Ok((dot / (na * nr)).clamp(-1.0, 1.0))
}

/// How β is formed for each pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MarginMode {
    /// Identity indicator times instruction cosine.
    #[default]
    Adaptive,
    /// Identity indicator only, giving a fixed margin `m` between positives
    /// and negatives.
    Fixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MiningMode {
    #[default]
    All,
    Hard,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct TripletBatch {
    /// `(anchor, r1, r2)`.
    pub triples: Vec<(usize, usize, usize)>,
    /// `(β1, β2)` per triple.
    pub betas: Vec<(f64, f64)>,
    pub margin: f64,
}

impl TripletBatch {
    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }
}

/// Loss node plus a flag raised when there was nothing to average over.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TripletLoss {
    pub loss: Var,
    pub empty: bool,
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean over triples of `[Sign(β1−β2)·(d1 + (β1−β2)·m − d2)]₊` with `d` the
/// squared Euclidean distance between rows of `features` and `Sign(0) = 0`.
/// β values are constants: no gradient flows into the instruction features.
pub fn adaptive_triplet_loss<T: Scalar>(
    tape: &mut Tape<T>,
    features: Var,
    batch: &TripletBatch,
) -> Result<TripletLoss> {
    if batch.triples.len() != batch.betas.len() {
        return Err(contract("triples and betas differ in length"));
    }
    if batch.is_empty() {
        let loss = tape.constant(Tensor::scalar(T::zero()));
        return Ok(TripletLoss { loss, empty: true });
    }
    if !(batch.margin >= 0.0) {
        return Err(contract(format!("margin must be nonnegative, got {}", batch.margin)));
    }
    let t = batch.len();
    let mut pairs = Vec::with_capacity(2 * t);
    pairs.extend(batch.triples.iter().map(|&(a, r1, _)| (a, r1)));
    pairs.extend(batch.triples.iter().map(|&(a, _, r2)| (a, r2)));
    let d = tape.sq_dist_pairs(features, &pairs)?;
    let d1 = tape.cols(d, 0, t)?;
    let d2 = tape.cols(d, t, t)?;
    let diff = tape.sub(d1, d2)?;
    let shift: Vec<T> = batch
        .betas
        .iter()
        .map(|&(b1, b2)| T::from_f64((b1 - b2) * batch.margin))
        .collect();
    let inner = tape.add_const(diff, &Tensor::matrix(1, t, shift))?;
    let signs = batch
        .betas
        .iter()
        .map(|&(b1, b2)| T::from_f64(sign(b1 - b2)))
        .collect();
    let signed = tape.mul_const(inner, signs)?;
    let hinge = tape.relu(signed);
    Ok(TripletLoss {
        loss: tape.mean(hinge),
        empty: false,
    })
}

/// Mined triples and the number of anchors that had no usable partner.
#[derive(Clone, Debug, PartialEq)]
pub struct Mined {
    pub batch: TripletBatch,
    pub skipped_anchors: usize,
}

fn beta_for(
    mode: MarginMode,
    labels: &[usize],
    instr: &[Vec<f64>],
    a: usize,
    r: usize,
) -> Result<f64> {
    match mode {
        MarginMode::Adaptive => relatedness(labels[a], labels[r], &instr[a], &instr[r]),
        MarginMode::Fixed => Ok(if labels[a] == labels[r] { 1.0 } else { 0.0 }),
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Enumerates triples over a batch.
///
/// `instr` holds one mean-pooled instruction vector per sample and
/// `features` one feature row per sample (only read in hard mode).
pub fn mine_triplets(
    labels: &[usize],
    instr: &[Vec<f64>],
    features: &[Vec<f64>],
    margin: f64,
    mode: MiningMode,
    margin_mode: MarginMode,
) -> Result<Mined> {
    let n = labels.len();
    if instr.len() != n || (mode == MiningMode::Hard && features.len() != n) {
        return Err(contract("mining inputs differ in length"));
    }
    let mut batch = TripletBatch {
        margin,
        ..TripletBatch::default()
    };
    let mut skipped = 0;
    for a in 0..n {
        let pos: Vec<usize> = (0..n).filter(|&r| r != a && labels[r] == labels[a]).collect();
        if pos.is_empty() {
            skipped += 1;
            continue;
        }
        match mode {
            MiningMode::All => {
                for &r1 in &pos {
                    let b1 = beta_for(margin_mode, labels, instr, a, r1)?;
                    for r2 in (0..n).filter(|&r| r != a && r != r1) {
                        let b2 = beta_for(margin_mode, labels, instr, a, r2)?;
                        batch.triples.push((a, r1, r2));
                        batch.betas.push((b1, b2));
                    }
                }
            }
            MiningMode::Hard => {
                let neg: Vec<usize> = (0..n).filter(|&r| labels[r] != labels[a]).collect();
                if neg.is_empty() {
                    skipped += 1;
                    continue;
                }
                let dist = |r: usize| sq_dist(&features[a], &features[r]);
                // Ties keep the lowest index.
                let r1 = pos
                    .iter()
                    .copied()
                    .fold(pos[0], |best, r| if dist(r) > dist(best) { r } else { best });
                let r2 = neg
                    .iter()
                    .copied()
                    .fold(neg[0], |best, r| if dist(r) < dist(best) { r } else { best });
                let b1 = beta_for(margin_mode, labels, instr, a, r1)?;
                let b2 = beta_for(margin_mode, labels, instr, a, r2)?;
                batch.triples.push((a, r1, r2));
                batch.betas.push((b1, b2));
            }
        }
    }
    Ok(Mined {
        batch,
        skipped_anchors: skipped,
    })
}

/// Mean cross-entropy of identity logits against labels.
pub fn identity_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, labels, None)
}

/// Symmetric InfoNCE between row-aligned image and text features. Both are
/// L2-normalised first. When `labels` is given, off-diagonal pairs of the same
/// identity are removed from each row's denominator.
pub fn contrastive_loss<T: Scalar>(
    tape: &mut Tape<T>,
    image: Var,
    text: Var,
    labels: Option<&[usize]>,
    temperature: f64,
) -> Result<Var> {
    let (b, _) = tape.shape(image);
    if b < 2 {
        return Err(contract("contrastive loss needs at least two pairs"));
    }
    if tape.shape(text) != tape.shape(image) {
        return Err(crate::error::shape_err(
            "contrastive_loss",
            tape.value(image).shape(),
            tape.value(text).shape(),
        ));
    }
    if !(temperature > 0.0) {
        return Err(contract("temperature must be positive"));
    }
    let i = tape.l2_normalize_rows(image)?;
    let t = tape.l2_normalize_rows(text)?;
    let tt = tape.transpose(t);
    let sim = tape.matmul(i, tt)?;
    let sim = tape.scale(sim, T::from_f64(1.0 / temperature));
    let mask = match labels {
        Some(l) => {
            if l.len() != b {
                return Err(contract("label count differs from batch"));
            }
            let mut m = vec![true; b * b];
            for r in 0..b {
                for c in 0..b {
                    m[r * b + c] = r == c || l[r] != l[c];
                }
            }
            Some(m)
        }
        None => None,
    };
    let targets: Vec<usize> = (0..b).collect();
    let i2t = tape.cross_entropy(sim, &targets, mask.clone())?;
    let simt = tape.transpose(sim);
    let t2i = tape.cross_entropy(simt, &targets, mask)?;
    let s = tape.add(i2t, t2i)?;
    Ok(tape.scale(s, T::from_f64(0.5)))
}

/// Two-way cross-entropy; `positive[i]` selects class 1.
pub fn match_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, positive: &[bool]) -> Result<Var> {
    if tape.shape(logits).1 != 2 {
        return Err(contract("match logits must have two columns"));
    }
    let targets: Vec<usize> = positive.iter().map(|&p| usize::from(p)).collect();
    tape.cross_entropy(logits, &targets, None)
}

/// Retrieval objective and its parts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetrievalLoss {
    pub total: Var,
    pub triplet_f: Var,
    pub id_f: Var,
    pub triplet_out: Var,
    pub id_out: Var,
    pub empty_triplets: bool,
}

/// `L_atri(F) + L_id(F) + L_atri(F_out) + L_id(F_out)` over one shared
/// triplet set.
pub fn total_loss_retrieval<T: Scalar>(
    tape: &mut Tape<T>,
    f: Var,
    f_out: Var,
    id_logits: Var,
    id_out_logits: Var,
    labels: &[usize],
    triplets: &TripletBatch,
) -> Result<RetrievalLoss> {
    let tf = adaptive_triplet_loss(tape, f, triplets)?;
    let to = adaptive_triplet_loss(tape, f_out, triplets)?;
    let idf = identity_loss(tape, id_logits, labels)?;
    let ido = identity_loss(tape, id_out_logits, labels)?;
    let s = tape.add(tf.loss, idf)?;
    let s = tape.add(s, to.loss)?;
    let total = tape.add(s, ido)?;
    Ok(RetrievalLoss {
        total,
        triplet_f: tf.loss,
        id_f: idf,
        triplet_out: to.loss,
        id_out: ido,
        empty_triplets: tf.empty,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct T2iLoss {
    pub total: Var,
    pub contrastive: Var,
    pub matching: Var,
}

/// `L_cl(F, text) + L_match(F_out)`.
pub fn total_loss_t2i<T: Scalar>(
    tape: &mut Tape<T>,
    image: Var,
    text: Var,
    labels: &[usize],
    match_logits: Var,
    positive: &[bool],
    temperature: f64,
) -> Result<T2iLoss> {
    let cl = contrastive_loss(tape, image, text, Some(labels), temperature)?;
    let m = match_loss(tape, match_logits, positive)?;
    Ok(T2iLoss {
        total: tape.add(cl, m)?,
        contrastive: cl,
        matching: m,
    })
}

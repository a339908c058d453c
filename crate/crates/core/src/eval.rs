//! Ranking metrics: average precision, mAP and CMC with camera filtering,
//! cross-modality restriction and the two-stage text-to-image rerank.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::synth::Modality;

/// Longest CMC curve reported.
pub const CMC_RANKS: usize = 50;

/// Labels of one query or gallery item.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemMeta {
    pub identity: usize,
    pub camera: usize,
    /// For gallery items the worn clothes; for queries the clothes asked
    /// for (only read under [`Relevance::IdentityAndClothes`]).
    pub clothes: usize,
}

/// Gallery items dropped per query before ranking.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FilterPolicy {
    None,
    /// Same identity and same camera.
    #[default]
    Standard,
    /// Same identity and same camera, or same identity and same clothes.
    ClothesChanging,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Relevance {
    #[default]
    Identity,
    IdentityAndClothes,
}

/// Gallery order for one query after filtering.
#[derive(Clone, Debug, PartialEq)]
pub struct RankingResult {
    pub query: usize,
    /// Gallery indices, best first.
    pub order: Vec<usize>,
    pub relevant: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub mode: Option<String>,
    pub map: f64,
    /// `cmc[k]`: fraction of scored queries with a relevant item in the top
    /// `k + 1`.
    pub cmc: Vec<f64>,
    pub num_queries: usize,
    /// Queries without any relevant gallery item; excluded from the metrics.
    pub skipped_queries: usize,
    pub gallery_size: usize,
    pub filter: FilterPolicy,
    pub relevance: Relevance,
}

impl EvalReport {
    pub fn top(&self, k: usize) -> f64 {
        self.cmc.get(k.saturating_sub(1)).copied().unwrap_or(f64::NAN)
    }
}

/// `(1/R) Σ precision@k` over relevant positions; `None` without relevant
/// items.
pub fn average_precision(relevant: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &r) in relevant.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Indices sorted by descending score; ties keep index order.
pub fn rank_by_score(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

fn keep(policy: FilterPolicy, q: &ItemMeta, g: &ItemMeta) -> bool {
    let same_id = q.identity == g.identity;
    match policy {
        FilterPolicy::None => true,
        FilterPolicy::Standard => !(same_id && q.camera == g.camera),
        FilterPolicy::ClothesChanging => !(same_id && (q.camera == g.camera || q.clothes == g.clothes)),
    }
}

fn is_relevant(rel: Relevance, q: &ItemMeta, g: &ItemMeta) -> bool {
    match rel {
        Relevance::Identity => q.identity == g.identity,
        Relevance::IdentityAndClothes => q.identity == g.identity && q.clothes == g.clothes,
    }
}

fn normalized(rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    rows.iter()
        .map(|r| {
            let n = libm::sqrt(r.iter().map(|v| v * v).sum::<f64>());
            if !(n > 0.0) || !n.is_finite() {
                return Err(Error::Numeric("zero-norm feature".into()));
            }
            Ok(r.iter().map(|v| v / n).collect())
        })
        .collect()
}

/// Cosine similarity matrix `query × gallery`.
pub fn cosine_scores(query: &[Vec<f64>], gallery: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let q = normalized(query)?;
    let g = normalized(gallery)?;
    Ok(q.iter()
        .map(|a| g.iter().map(|b| a.iter().zip(b).map(|(x, y)| x * y).sum()).collect())
        .collect())
}

/// Applies the filter and ranks each query's remaining gallery by `scores`.
pub fn rank_all(
    scores: &[Vec<f64>],
    query: &[ItemMeta],
    gallery: &[ItemMeta],
    policy: FilterPolicy,
    relevance: Relevance,
) -> Result<Vec<RankingResult>> {
    if scores.len() != query.len() {
        return Err(contract("score rows differ from query count"));
    }
    let mut out = Vec::with_capacity(query.len());
    for (qi, (row, q)) in scores.iter().zip(query).enumerate() {
        if row.len() != gallery.len() {
            return Err(contract("score columns differ from gallery size"));
        }
        let order: Vec<usize> = rank_by_score(row)
            .into_iter()
            .filter(|&g| keep(policy, q, &gallery[g]))
            .collect();
        if order.is_empty() {
            return Err(contract(format!("query {qi} has an empty gallery after filtering")));
        }
        let relevant = order.iter().map(|&g| is_relevant(relevance, q, &gallery[g])).collect();
        out.push(RankingResult {
            query: qi,
            order,
            relevant,
        });
    }
    Ok(out)
}

/// Reduces rankings to mAP and CMC.
pub fn summarize(
    task: &str,
    mode: Option<&str>,
    rankings: &[RankingResult],
    gallery_size: usize,
    policy: FilterPolicy,
    relevance: Relevance,
) -> Result<EvalReport> {
    let len = CMC_RANKS.min(gallery_size);
    let mut cmc = vec![0.0; len];
    let mut ap_sum = 0.0;
    let mut valid = 0usize;
    for r in rankings {
        let Some(ap) = average_precision(&r.relevant) else {
            continue;
        };
        valid += 1;
        ap_sum += ap;
        let first = r.relevant.iter().position(|&x| x).expect("has a relevant item");
        for c in cmc.iter_mut().skip(first) {
            *c += 1.0;
        }
    }
    if valid == 0 {
        return Err(contract("no query has a relevant gallery item"));
    }
    cmc.iter_mut().for_each(|c| *c /= valid as f64);
    Ok(EvalReport {
        task: task.into(),
        mode: mode.map(Into::into),
        map: ap_sum / valid as f64,
        cmc,
        num_queries: rankings.len(),
        skipped_queries: rankings.len() - valid,
        gallery_size,
        filter: policy,
        relevance,
    })
}

/// Cosine retrieval evaluation.
pub fn evaluate(
    task: &str,
    query: &[Vec<f64>],
    gallery: &[Vec<f64>],
    query_meta: &[ItemMeta],
    gallery_meta: &[ItemMeta],
    policy: FilterPolicy,
    relevance: Relevance,
) -> Result<EvalReport> {
    if gallery.is_empty() || gallery.len() != gallery_meta.len() || query.len() != query_meta.len() {
        return Err(contract("features and labels differ in count, or the gallery is empty"));
    }
    let scores = cosine_scores(query, gallery)?;
    let rankings = rank_all(&scores, query_meta, gallery_meta, policy, relevance)?;
    summarize(task, None, &rankings, gallery.len(), policy, relevance)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CrossMode {
    Vis2ir,
    Ir2vis,
}

impl CrossMode {
    pub fn name(self) -> &'static str {
        match self {
            CrossMode::Vis2ir => "vis2ir",
            CrossMode::Ir2vis => "ir2vis",
        }
    }

    fn source(self) -> Modality {
        match self {
            CrossMode::Vis2ir => Modality::Visible,
            CrossMode::Ir2vis => Modality::Infrared,
        }
    }
}

/// Queries of the source modality against gallery items of the other.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_cross_modality(
    query: &[Vec<f64>],
    query_meta: &[ItemMeta],
    query_modality: &[Modality],
    gallery: &[Vec<f64>],
    gallery_meta: &[ItemMeta],
    gallery_modality: &[Modality],
    mode: CrossMode,
    policy: FilterPolicy,
) -> Result<EvalReport> {
    let src = mode.source();
    let pick = |n: usize, m: &[Modality], want: bool| -> Vec<usize> {
        (0..n).filter(|&i| (m[i] == src) == want).collect()
    };
    let qi = pick(query.len(), query_modality, true);
    let gi = pick(gallery.len(), gallery_modality, false);
    if qi.is_empty() {
        return Err(contract(format!("no {} queries", mode.name())));
    }
    if gi.is_empty() {
        return Err(contract(format!("no {} gallery items", mode.name())));
    }
    let q: Vec<Vec<f64>> = qi.iter().map(|&i| query[i].clone()).collect();
    let qm: Vec<ItemMeta> = qi.iter().map(|&i| query_meta[i]).collect();
    let g: Vec<Vec<f64>> = gi.iter().map(|&i| gallery[i].clone()).collect();
    let gm: Vec<ItemMeta> = gi.iter().map(|&i| gallery_meta[i]).collect();
    let mut r = evaluate("vi", &q, &g, &qm, &gm, policy, Relevance::Identity)?;
    r.mode = Some(mode.name().into());
    Ok(r)
}

/// Stage one orders by `stage1`; stage two reorders the first `k` by the
/// scorer's values (ties keep stage-one order). `k` is capped at the gallery
/// size. `scorer` receives the gallery indices of the top block.
pub fn t2i_rerank<F>(stage1: &[f64], k: usize, mut scorer: F) -> Result<Vec<usize>>
where
    F: FnMut(&[usize]) -> Result<Vec<f64>>,
{
    if k == 0 {
        return Err(contract("rerank depth must be positive"));
    }
    let mut order = rank_by_score(stage1);
    let k = k.min(order.len());
    let top = order[..k].to_vec();
    let s = scorer(&top)?;
    if s.len() != k {
        return Err(contract("scorer returned the wrong number of scores"));
    }
    let block = rank_by_score(&s);
    for (slot, b) in block.into_iter().enumerate() {
        order[slot] = top[b];
    }
    Ok(order)
}

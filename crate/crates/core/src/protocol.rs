//! Test-split protocols: which records form queries and gallery for each
//! task, which instructions they carry, and how they are embedded.
//!
//! | task | queries | gallery | filter | relevant |
//! |------|---------|---------|--------|----------|
//! | trad | visible queries, bank phrase | visible gallery, same phrase | standard | identity |
//! | cc   | as trad | as trad | clothes-changing | identity |
//! | ctcc | visible query × each wardrobe template | visible gallery, own clothes crop | none | identity and clothes |
//! | li   | visible query × description of each same-identity gallery look | visible gallery, own description | none | identity and clothes |
//! | vi   | source-modality queries, bank phrase | target-modality gallery | standard | identity |
//! | t2i  | description of each visible query | visible gallery, plain features, match-head rerank | none | identity |

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{contract, Result};
use crate::eval::{
    cosine_scores, rank_all, rank_by_score, summarize, t2i_rerank, CrossMode, EvalReport, FilterPolicy, ItemMeta,
    RankingResult, Relevance,
};
use crate::instruct::{Instruction, Payload, PhraseBank, TaskKind, TemplateRef};
use crate::model::{mean_pool, InstructionInput, Model};
use crate::params::ParamStore;
use crate::synth::{Dataset, Modality, SampleRecord, Split};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::train::{value_rows, InstructionFeatures};

/// Images per forward pass.
const CHUNK: usize = 32;
/// Stage-two depth of the text-to-image rerank.
pub const RERANK_DEPTH: usize = 128;

/// Which model output represents a query or gallery item in the ReID tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalFeature {
    /// `F`: editing-transformer output conditioned on the instruction.
    #[default]
    Edited,
    /// `F_out`: fusion-module output.
    Fused,
}

pub struct Embedder<'a> {
    pub feature: RetrievalFeature,
    pub model: &'a Model,
    pub store: &'a ParamStore<f32>,
    pub data: &'a Dataset,
    pub images: &'a [Tensor<f32>],
    pub features: &'a mut InstructionFeatures,
}

fn normalize(rows: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    rows.into_iter()
        .map(|r| {
            let n = libm::sqrt(r.iter().map(|v| v * v).sum::<f64>()).max(1e-12);
            r.into_iter().map(|v| v / n).collect()
        })
        .collect()
}

impl Embedder<'_> {
    fn image_refs(&self, records: &[usize]) -> Result<Vec<&Tensor<f32>>> {
        records
            .iter()
            .map(|&i| self.images.get(i).ok_or_else(|| contract(format!("no image for record {i}"))))
            .collect()
    }

    /// L2-normalised retrieval feature of each `(record, instruction)` pair.
    pub fn retrieval(&mut self, items: &[(usize, Instruction)]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(items.len());
        for chunk in items.chunks(CHUNK) {
            let recs: Vec<usize> = chunk.iter().map(|c| c.0).collect();
            let instrs: Vec<Instruction> = chunk.iter().map(|c| c.1.clone()).collect();
            let mut tape = Tape::inference();
            let t = self
                .features
                .encode(self.model, &mut tape, self.store, self.data, self.images, &instrs)?;
            let imgs = self.image_refs(&recs)?;
            let f = self.model.encode_images(&mut tape, self.store, &imgs, Some(&t))?;
            let v = match self.feature {
                RetrievalFeature::Edited => f,
                RetrievalFeature::Fused => self.model.fuse(&mut tape, self.store, f, &t)?,
            };
            out.extend(value_rows(&tape, v));
        }
        Ok(normalize(out))
    }

    /// `F` from the editing transformer without instructions.
    pub fn plain(&mut self, records: &[usize]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(records.len());
        for chunk in records.chunks(CHUNK) {
            let mut tape = Tape::inference();
            let imgs = self.image_refs(chunk)?;
            let f = self.model.encode_images(&mut tape, self.store, &imgs, None)?;
            out.extend(value_rows(&tape, f));
        }
        Ok(out)
    }

    /// Mean-pooled instruction features.
    pub fn text(&mut self, instrs: &[Instruction]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::inference();
        let t = self
            .features
            .encode(self.model, &mut tape, self.store, self.data, self.images, instrs)?;
        let p = mean_pool(&mut tape, &t)?;
        Ok(value_rows(&tape, p))
    }

    /// Positive-class probability of the match head for each record paired
    /// with `instr`.
    pub fn match_scores(&mut self, records: &[usize], instr: &Instruction) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(records.len());
        for chunk in records.chunks(CHUNK) {
            let mut tape = Tape::inference();
            let instrs = alloc::vec![instr.clone(); chunk.len()];
            let t = self
                .features
                .encode(self.model, &mut tape, self.store, self.data, self.images, &instrs)?;
            let imgs = self.image_refs(chunk)?;
            let f = self.model.encode_images(&mut tape, self.store, &imgs, None)?;
            let f_out = self.model.fuse(&mut tape, self.store, f, &t)?;
            let logits = self.model.match_logits(&mut tape, self.store, f_out)?;
            for row in value_rows(&tape, logits) {
                // softmax(row)[1]
                out.push(1.0 / (1.0 + libm::exp(row[0] - row[1])));
            }
        }
        Ok(out)
    }
}

/// Report plus the per-query rankings and labels it was computed from.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskEval {
    pub report: EvalReport,
    pub rankings: Vec<RankingResult>,
    pub query_meta: Vec<ItemMeta>,
    pub gallery_meta: Vec<ItemMeta>,
}

impl TaskEval {
    /// Fraction of queries whose best-ranked same-identity gallery item wears
    /// the clothes the query asked for.
    pub fn clothes_hit_rate(&self) -> f64 {
        let mut hits = 0usize;
        let mut n = 0usize;
        for r in &self.rankings {
            let q = self.query_meta[r.query];
            if let Some(&g) = r.order.iter().find(|&&g| self.gallery_meta[g].identity == q.identity) {
                n += 1;
                hits += usize::from(self.gallery_meta[g].clothes == q.clothes);
            }
        }
        if n == 0 {
            f64::NAN
        } else {
            hits as f64 / n as f64
        }
    }
}

fn meta(r: &SampleRecord) -> ItemMeta {
    ItemMeta {
        identity: r.identity,
        camera: r.camera,
        clothes: r.clothes,
    }
}

fn bank_phrase(bank: &PhraseBank, task: TaskKind, index: usize) -> Result<Instruction> {
    let p = bank
        .phrases(task)
        .and_then(|p| p.get(index))
        .ok_or_else(|| contract(format!("no phrase {index} in the {task} bank")))?;
    Ok(Instruction::text(task, alloc::vec![p.clone()]))
}

fn finish(
    task: TaskKind,
    mode: Option<&str>,
    scores: &[Vec<f64>],
    qm: Vec<ItemMeta>,
    gm: Vec<ItemMeta>,
    filter: FilterPolicy,
    rel: Relevance,
) -> Result<TaskEval> {
    let rankings = rank_all(scores, &qm, &gm, filter, rel)?;
    let report = summarize(task.name(), mode, &rankings, gm.len(), filter, rel)?;
    Ok(TaskEval {
        report,
        rankings,
        query_meta: qm,
        gallery_meta: gm,
    })
}

/// Evaluates `task` on the test split. `mode` is required for VI and
/// ignored otherwise. Bank tasks use the first phrase of their bank.
pub fn evaluate_task(
    emb: &mut Embedder<'_>,
    bank: &PhraseBank,
    task: TaskKind,
    mode: Option<CrossMode>,
) -> Result<TaskEval> {
    evaluate_with_phrase(emb, bank, task, mode, 0)
}

/// Runs a bank task once per phrase and averages mAP and CMC over the runs.
/// Other tasks have no phrase to vary and are evaluated once.
pub fn evaluate_sweep(
    emb: &mut Embedder<'_>,
    bank: &PhraseBank,
    task: TaskKind,
    mode: Option<CrossMode>,
) -> Result<EvalReport> {
    if !task.uses_bank() {
        return Ok(evaluate_task(emb, bank, task, mode)?.report);
    }
    let n = bank.phrases(task).map_or(0, |p| p.len());
    if n == 0 {
        return Err(contract(format!("no phrase bank for {task}")));
    }
    let mut acc: Option<EvalReport> = None;
    for i in 0..n {
        let r = evaluate_with_phrase(emb, bank, task, mode, i)?.report;
        match acc.as_mut() {
            None => acc = Some(r),
            Some(a) => {
                a.map += r.map;
                for (x, y) in a.cmc.iter_mut().zip(&r.cmc) {
                    *x += y;
                }
            }
        }
    }
    let mut a = acc.expect("at least one phrase");
    a.map /= n as f64;
    for x in &mut a.cmc {
        *x /= n as f64;
    }
    Ok(a)
}

fn evaluate_with_phrase(
    emb: &mut Embedder<'_>,
    bank: &PhraseBank,
    task: TaskKind,
    mode: Option<CrossMode>,
    phrase_index: usize,
) -> Result<TaskEval> {
    let data = emb.data;
    let queries: Vec<&SampleRecord> = data.split(Split::Query).collect();
    let gallery: Vec<&SampleRecord> = data.split(Split::Gallery).collect();
    let vis = |v: &[&SampleRecord]| -> Vec<usize> {
        v.iter()
            .filter(|r| r.modality == Modality::Visible && r.tasks.contains(&task))
            .map(|r| r.index)
            .collect()
    };
    let (vq, vg) = (vis(&queries), vis(&gallery));
    let meta_of = |ids: &[usize]| -> Vec<ItemMeta> { ids.iter().map(|&i| meta(&data.records[i])).collect() };
    match task {
        TaskKind::Trad | TaskKind::Cc => {
            let phrase = bank_phrase(bank, task, phrase_index)?;
            let q: Vec<_> = vq.iter().map(|&i| (i, phrase.clone())).collect();
            let g: Vec<_> = vg.iter().map(|&i| (i, phrase.clone())).collect();
            let scores = cosine_scores(&emb.retrieval(&q)?, &emb.retrieval(&g)?)?;
            let filter = if task == TaskKind::Trad {
                FilterPolicy::Standard
            } else {
                FilterPolicy::ClothesChanging
            };
            finish(task, None, &scores, meta_of(&vq), meta_of(&vg), filter, Relevance::Identity)
        }
        TaskKind::Vi => {
            let mode = mode.ok_or_else(|| contract("vi needs a mode (vis2ir or ir2vis)"))?;
            let (src, dst) = match mode {
                CrossMode::Vis2ir => (Modality::Visible, Modality::Infrared),
                CrossMode::Ir2vis => (Modality::Infrared, Modality::Visible),
            };
            let pick = |v: &[&SampleRecord], m: Modality| -> Vec<usize> {
                v.iter()
                    .filter(|r| r.modality == m && r.tasks.contains(&task))
                    .map(|r| r.index)
                    .collect()
            };
            let (qi, gi) = (pick(&queries, src), pick(&gallery, dst));
            if qi.is_empty() || gi.is_empty() {
                return Err(contract(format!("{} has no queries or no gallery", mode.name())));
            }
            let phrase = bank_phrase(bank, task, phrase_index)?;
            let q: Vec<_> = qi.iter().map(|&i| (i, phrase.clone())).collect();
            let g: Vec<_> = gi.iter().map(|&i| (i, phrase.clone())).collect();
            let scores = cosine_scores(&emb.retrieval(&q)?, &emb.retrieval(&g)?)?;
            finish(
                task,
                Some(mode.name()),
                &scores,
                meta_of(&qi),
                meta_of(&gi),
                FilterPolicy::Standard,
                Relevance::Identity,
            )
        }
        TaskKind::Ctcc | TaskKind::Li => {
            let mut q = Vec::new();
            let mut qm = Vec::new();
            for &i in &vq {
                let r = &data.records[i];
                for &gi in vg.iter().filter(|&&g| data.records[g].identity == r.identity) {
                    let target = &data.records[gi];
                    let payload = if task == TaskKind::Ctcc {
                        Payload::Template(TemplateRef::Wardrobe {
                            identity: r.identity,
                            clothes: target.clothes,
                        })
                    } else {
                        Payload::Text(target.description.clone())
                    };
                    q.push((i, Instruction { kind: task, payload }));
                    qm.push(ItemMeta {
                        clothes: target.clothes,
                        ..meta(r)
                    });
                }
            }
            let g: Vec<_> = vg
                .iter()
                .map(|&i| {
                    let payload = if task == TaskKind::Ctcc {
                        Payload::Template(TemplateRef::Crop { record: i })
                    } else {
                        Payload::Text(data.records[i].description.clone())
                    };
                    (i, Instruction { kind: task, payload })
                })
                .collect();
            let scores = cosine_scores(&emb.retrieval(&q)?, &emb.retrieval(&g)?)?;
            finish(
                task,
                None,
                &scores,
                qm,
                meta_of(&vg),
                FilterPolicy::None,
                Relevance::IdentityAndClothes,
            )
        }
        TaskKind::T2i => {
            let texts: Vec<Instruction> = vq
                .iter()
                .map(|&i| Instruction::text(task, data.records[i].description.clone()))
                .collect();
            let tf = emb.text(&texts)?;
            let gf = emb.plain(&vg)?;
            let stage1 = cosine_scores(&tf, &gf)?;
            let qm = meta_of(&vq);
            let gm = meta_of(&vg);
            let mut rankings = Vec::with_capacity(vq.len());
            for (qi, row) in stage1.iter().enumerate() {
                let order = t2i_rerank(row, RERANK_DEPTH, |top| {
                    let recs: Vec<usize> = top.iter().map(|&g| vg[g]).collect();
                    emb.match_scores(&recs, &texts[qi])
                })?;
                let relevant = order.iter().map(|&g| gm[g].identity == qm[qi].identity).collect();
                rankings.push(RankingResult {
                    query: qi,
                    order,
                    relevant,
                });
            }
            let report = summarize(
                task.name(),
                None,
                &rankings,
                gm.len(),
                FilterPolicy::None,
                Relevance::Identity,
            )?;
            Ok(TaskEval {
                report,
                rankings,
                query_meta: qm,
                gallery_meta: gm,
            })
        }
    }
}

/// Instruction attached to a free-form query.
#[derive(Clone, Copy, Debug)]
pub enum QueryInstruction<'a> {
    Text(&'a [String]),
    /// Clothes template sized like the instruction-encoder input.
    Template(&'a Tensor<f32>),
}

/// One retrieved gallery record.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Hit {
    pub record: usize,
    pub score: f64,
}

/// Ranks `gallery` records for one query and returns the best `top_n`.
///
/// Gallery items carry the instruction their task prescribes: the query's
/// own phrase for Trad/CC/VI, their clothes crop for CTCC and their own
/// description for LI. Scores are cosine similarities, except for T2I,
/// where the query is the text alone and the first `max(128, top_n)` items
/// are reordered by match probability, which then becomes their score.
pub fn retrieve(
    emb: &mut Embedder<'_>,
    task: TaskKind,
    image: Option<&Tensor<f32>>,
    instruction: QueryInstruction<'_>,
    gallery: &[usize],
    top_n: usize,
) -> Result<Vec<Hit>> {
    if gallery.is_empty() {
        return Err(contract("empty gallery"));
    }
    let sentences = match (task, instruction) {
        (TaskKind::Ctcc, QueryInstruction::Template(_)) => None,
        (TaskKind::Ctcc, QueryInstruction::Text(_)) => {
            return Err(contract("ctcc queries take a clothes template"))
        }
        (_, QueryInstruction::Text(s)) => Some(s),
        (_, QueryInstruction::Template(_)) => {
            return Err(contract(format!("{task} queries take text instructions")))
        }
    };
    if task == TaskKind::T2i {
        if image.is_some() {
            return Err(contract("t2i queries are text only"));
        }
        let text = Instruction::text(task, sentences.unwrap_or_default().to_vec());
        let q = emb.text(core::slice::from_ref(&text))?;
        let stage1 = cosine_scores(&q, &emb.plain(gallery)?)?;
        let depth = RERANK_DEPTH.max(top_n);
        let mut reranked = Vec::new();
        let order = t2i_rerank(&stage1[0], depth, |top| {
            let recs: Vec<usize> = top.iter().map(|&g| gallery[g]).collect();
            let s = emb.match_scores(&recs, &text)?;
            reranked = top.iter().copied().zip(s.iter().copied()).collect();
            Ok(s)
        })?;
        let score = |g: usize| {
            reranked
                .iter()
                .find(|(i, _)| *i == g)
                .map_or(stage1[0][g], |&(_, s)| s)
        };
        return Ok(order
            .into_iter()
            .take(top_n)
            .map(|g| Hit {
                record: gallery[g],
                score: score(g),
            })
            .collect());
    }
    let image = image.ok_or_else(|| contract(format!("{task} queries need an image")))?;
    let mut tape = Tape::inference();
    let input = match instruction {
        QueryInstruction::Text(s) => InstructionInput::Text(s),
        QueryInstruction::Template(t) => InstructionInput::Image(t),
    };
    let t = emb.model.encode_instructions(&mut tape, emb.store, &[input])?;
    let f = emb.model.encode_images(&mut tape, emb.store, &[image], Some(&t))?;
    let v = match emb.feature {
        RetrievalFeature::Edited => f,
        RetrievalFeature::Fused => emb.model.fuse(&mut tape, emb.store, f, &t)?,
    };
    let q = normalize(value_rows(&tape, v));
    let items: Vec<(usize, Instruction)> = gallery
        .iter()
        .map(|&i| {
            let payload = match task {
                TaskKind::Ctcc => Payload::Template(TemplateRef::Crop { record: i }),
                TaskKind::Li => {
                    let r = emb.data.record(i)?;
                    Payload::Text(r.description.clone())
                }
                _ => Payload::Text(sentences.unwrap_or_default().to_vec()),
            };
            Ok((i, Instruction { kind: task, payload }))
        })
        .collect::<Result<_>>()?;
    let g = emb.retrieval(&items)?;
    let scores = cosine_scores(&q, &g)?;
    Ok(rank_by_score(&scores[0])
        .into_iter()
        .take(top_n)
        .map(|j| Hit {
            record: gallery[j],
            score: scores[0][j],
        })
        .collect())
}

/// Queries against themselves with no filter; a sound pipeline scores 1.0.
pub fn evaluate_self(emb: &mut Embedder<'_>, bank: &PhraseBank) -> Result<TaskEval> {
    let data = emb.data;
    let task = TaskKind::Trad;
    let vq: Vec<usize> = data
        .split(Split::Query)
        .filter(|r| r.modality == Modality::Visible)
        .map(|r| r.index)
        .collect();
    let phrase = bank_phrase(bank, task, 0)?;
    let items: Vec<_> = vq.iter().map(|&i| (i, phrase.clone())).collect();
    let f = emb.retrieval(&items)?;
    let m: Vec<ItemMeta> = vq.iter().map(|&i| meta(&data.records[i])).collect();
    let scores = cosine_scores(&f, &f)?;
    finish(task, Some("self"), &scores, m.clone(), m, FilterPolicy::None, Relevance::Identity)
}

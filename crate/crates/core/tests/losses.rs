//! Loss properties checked against direct scalar evaluation.

use irk_core::loss::{
    adaptive_triplet_loss, contrastive_loss, identity_loss, match_loss, mine_triplets, relatedness,
    total_loss_retrieval, total_loss_t2i, MarginMode, MiningMode, TripletBatch,
};
use irk_core::{Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rows(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..c).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

fn constant(tape: &mut Tape<f64>, r: &[Vec<f64>]) -> Var {
    tape.constant(Tensor::matrix(r.len(), r[0].len(), r.concat()))
}

fn at(r: irk_core::Result<Var>, tape: &Tape<f64>) -> f64 {
    tape.scalar(r.unwrap())
}

fn d2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn triplet_value(f: &[Vec<f64>], batch: &TripletBatch) -> f64 {
    let mut tape = Tape::inference();
    let fv = constant(&mut tape, f);
    let l = adaptive_triplet_loss(&mut tape, fv, batch).unwrap();
    tape.scalar(l.loss)
}

fn random_triples(rng: &mut ChaCha8Rng, n: usize, t: usize) -> Vec<(usize, usize, usize)> {
    (0..t)
        .map(|_| (rng.random_range(0..n), rng.random_range(0..n), rng.random_range(0..n)))
        .collect()
}

#[test]
fn classic_triplet_reduction_on_fifty_batches() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let n = rng.random_range(3..12);
        let c = rng.random_range(1..9);
        let f = rows(&mut rng, n, c);
        let t = rng.random_range(1..30);
        let triples = random_triples(&mut rng, n, t);
        let m = rng.random_range(0.0..1.0);
        let batch = TripletBatch {
            betas: vec![(1.0, 0.0); t],
            triples: triples.clone(),
            margin: m,
        };
        let classic: f64 = triples
            .iter()
            .map(|&(a, p, q)| (d2(&f[a], &f[p]) + m - d2(&f[a], &f[q])).max(0.0))
            .sum::<f64>()
            / t as f64;
        let got = triplet_value(&f, &batch);
        assert!((got - classic).abs() <= 1e-12, "{got} vs {classic}");
    }
}

#[test]
fn swapping_references_leaves_each_triple_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let f = rows(&mut rng, 5, 4);
        let (a, r1, r2) = (0, rng.random_range(1..5), rng.random_range(1..5));
        let (b1, b2) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let one = |t, b| TripletBatch {
            triples: vec![t],
            betas: vec![b],
            margin: 0.3,
        };
        let x = triplet_value(&f, &one((a, r1, r2), (b1, b2)));
        let y = triplet_value(&f, &one((a, r2, r1), (b2, b1)));
        assert!((x - y).abs() <= 1e-12);
        assert!(x >= 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn relatedness_ignores_positive_scale(
        a in prop::collection::vec(-5.0f64..5.0, 6),
        b in prop::collection::vec(-5.0f64..5.0, 6),
        s in 1e-3f64..1e3,
        t in 1e-3f64..1e3,
    ) {
        prop_assume!(a.iter().any(|v| v.abs() > 1e-3) && b.iter().any(|v| v.abs() > 1e-3));
        let base = relatedness(1, 1, &a, &b).unwrap();
        let sa: Vec<f64> = a.iter().map(|v| v * s).collect();
        let tb: Vec<f64> = b.iter().map(|v| v * t).collect();
        prop_assert!((relatedness(1, 1, &sa, &tb).unwrap() - base).abs() <= 1e-12);
        prop_assert_eq!(relatedness(1, 2, &a, &b).unwrap(), 0.0);
    }

    #[test]
    fn assembled_losses_are_nonnegative(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<usize> = (0..6).map(|i| i / 2).collect();
        let instr = rows(&mut rng, 6, 3);
        let f = rows(&mut rng, 6, 4);
        let mined = mine_triplets(&labels, &instr, &f, 0.3, MiningMode::All, MarginMode::Adaptive).unwrap();
        let mut tape = Tape::inference();
        let fv = constant(&mut tape, &f);
        let fo = constant(&mut tape, &rows(&mut rng, 6, 4));
        let lg = constant(&mut tape, &rows(&mut rng, 6, 3));
        let lo = constant(&mut tape, &rows(&mut rng, 6, 3));
        let r = total_loss_retrieval(&mut tape, fv, fo, lg, lo, &labels, &mined.batch).unwrap();
        for v in [r.total, r.triplet_f, r.id_f, r.triplet_out, r.id_out] {
            prop_assert!(tape.scalar(v) >= 0.0);
        }
        let text = constant(&mut tape, &rows(&mut rng, 6, 4));
        let ml = constant(&mut tape, &rows(&mut rng, 12, 2));
        let pos: Vec<bool> = (0..12).map(|i| i < 6).collect();
        let t = total_loss_t2i(&mut tape, fv, text, &labels, ml, &pos, 0.07).unwrap();
        for v in [t.total, t.contrastive, t.matching] {
            prop_assert!(tape.scalar(v) >= 0.0);
        }
    }

    #[test]
    fn hard_mining_is_a_deterministic_subset_of_all(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<usize> = (0..8).map(|_| rng.random_range(0..3)).collect();
        let instr = rows(&mut rng, 8, 3);
        let f = rows(&mut rng, 8, 4);
        let all = mine_triplets(&labels, &instr, &f, 0.3, MiningMode::All, MarginMode::Adaptive).unwrap();
        let hard = mine_triplets(&labels, &instr, &f, 0.3, MiningMode::Hard, MarginMode::Adaptive).unwrap();
        for (t, b) in hard.batch.triples.iter().zip(&hard.batch.betas) {
            let i = all.batch.triples.iter().position(|x| x == t);
            prop_assert!(i.is_some());
            prop_assert_eq!(all.batch.betas[i.unwrap()], *b);
        }
        let again = mine_triplets(&labels, &instr, &f, 0.3, MiningMode::Hard, MarginMode::Adaptive).unwrap();
        prop_assert_eq!(&again, &hard);
        let again = mine_triplets(&labels, &instr, &f, 0.3, MiningMode::All, MarginMode::Adaptive).unwrap();
        prop_assert_eq!(&again, &all);
    }
}

#[test]
fn all_mining_enumerates_every_ordered_triple() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let labels = [0, 1, 0, 2, 1, 0];
    let instr = rows(&mut rng, 6, 3);
    let mined = mine_triplets(&labels, &instr, &[], 0.3, MiningMode::All, MarginMode::Fixed).unwrap();
    let mut want = Vec::new();
    for a in 0..6 {
        for r1 in (0..6).filter(|&r| r != a && labels[r] == labels[a]) {
            for r2 in (0..6).filter(|&r| r != a && r != r1) {
                want.push((a, r1, r2));
            }
        }
    }
    assert_eq!(mined.batch.triples, want);
    assert_eq!(mined.skipped_anchors, 1);
    for (&(a, r1, r2), &(b1, b2)) in mined.batch.triples.iter().zip(&mined.batch.betas) {
        assert_eq!(b1, f64::from(u8::from(labels[a] == labels[r1])));
        assert_eq!(b2, f64::from(u8::from(labels[a] == labels[r2])));
    }
}

#[test]
fn identity_loss_cases() {
    let mut tape = Tape::<f64>::inference();
    for k in [2usize, 5, 17] {
        let l = tape.constant(Tensor::full([3, k], 0.7));
        let v = identity_loss(&mut tape, l, &[0, k - 1, 1]).unwrap();
        assert!((tape.scalar(v) - (k as f64).ln()).abs() <= 1e-12);
    }
    let l = tape.constant(Tensor::matrix(1, 3, vec![50.0, 0.0, 0.0]));
    let v = identity_loss(&mut tape, l, &[0]).unwrap();
    assert!(tape.scalar(v) < 1e-10);
    let l = tape.constant(Tensor::matrix(1, 3, vec![2.0, 1.0, 0.0]));
    let v = identity_loss(&mut tape, l, &[0]).unwrap();
    let e = std::f64::consts::E;
    assert!((tape.scalar(v) + (e * e / (e * e + e + 1.0)).ln()).abs() <= 1e-12);
    assert!(identity_loss(&mut tape, l, &[3]).is_err());
}

#[test]
fn match_loss_cases() {
    let mut tape = Tape::<f64>::inference();
    let l = tape.constant(Tensor::zeros([4, 2]));
    let v = match_loss(&mut tape, l, &[true, false, true, true]).unwrap();
    assert!((tape.scalar(v) - 2f64.ln()).abs() <= 1e-15);
    let l = tape.constant(Tensor::matrix(2, 2, vec![-30.0, 30.0, 30.0, -30.0]));
    let v = match_loss(&mut tape, l, &[true, false]).unwrap();
    assert!(tape.scalar(v) < 1e-10);
    let l = tape.constant(Tensor::matrix(1, 2, vec![-1.0, 1.0]));
    let v = match_loss(&mut tape, l, &[true]).unwrap();
    let e = std::f64::consts::E;
    assert!((tape.scalar(v) + (e / (e + 1.0 / e)).ln()).abs() <= 1e-12);
}

#[test]
fn contrastive_sharpens_to_zero_with_a_perfect_diagonal() {
    let mut tape = Tape::<f64>::inference();
    let eye = Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    let (i, t) = (tape.constant(eye.clone()), tape.constant(eye));
    let mut prev = f64::INFINITY;
    for tau in [1.0, 0.1, 0.01] {
        let v = at(contrastive_loss(&mut tape, i, t, None, tau), &tape);
        assert!(v < prev);
        prev = v;
    }
    assert!(prev < 1e-10);
}

#[test]
fn same_identity_pairs_leave_the_contrastive_denominator() {
    // Rows 0 and 1 share an identity: with masking each of them only competes
    // against row 2, giving −ln(e^{1/τ} / (e^{1/τ} + e^{s/τ})).
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let img = rows(&mut rng, 3, 5);
    let mut tape = Tape::<f64>::inference();
    let iv = constant(&mut tape, &img);
    let tv = constant(&mut tape, &img);
    let v = at(contrastive_loss(&mut tape, iv, tv, Some(&[0, 0, 1]), 0.5), &tape);
    let unit: Vec<Vec<f64>> = img
        .iter()
        .map(|r| {
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            r.iter().map(|x| x / n).collect()
        })
        .collect();
    let cos = |a: usize, b: usize| unit[a].iter().zip(&unit[b]).map(|(x, y)| x * y).sum::<f64>();
    let allowed = |r: usize| -> Vec<usize> { if r == 2 { vec![0, 1, 2] } else { vec![r, 2] } };
    // The similarity matrix is symmetric, so both directions agree.
    let mut sum = 0.0;
    for r in 0..3 {
        let z: f64 = allowed(r).iter().map(|&c| (cos(r, c) / 0.5).exp()).sum();
        sum += -((cos(r, r) / 0.5).exp() / z).ln();
    }
    assert!((v - sum / 3.0).abs() <= 1e-12, "{v} vs {}", sum / 3.0);
}

#[test]
fn assemblies_are_additive() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let labels = [0, 0, 1, 1, 2, 2];
    let instr = rows(&mut rng, 6, 3);
    let f = rows(&mut rng, 6, 4);
    let fo = rows(&mut rng, 6, 4);
    let mined = mine_triplets(&labels, &instr, &f, 0.3, MiningMode::All, MarginMode::Adaptive).unwrap();
    let mut tape = Tape::<f64>::inference();
    let fv = constant(&mut tape, &f);
    let fov = constant(&mut tape, &fo);
    let lg = constant(&mut tape, &rows(&mut rng, 6, 3));
    let lo = constant(&mut tape, &rows(&mut rng, 6, 3));
    let r = total_loss_retrieval(&mut tape, fv, fov, lg, lo, &labels, &mined.batch).unwrap();
    let parts = triplet_value(&f, &mined.batch)
        + triplet_value(&fo, &mined.batch)
        + at(identity_loss(&mut tape, lg, &labels), &tape)
        + at(identity_loss(&mut tape, lo, &labels), &tape);
    assert!((tape.scalar(r.total) - parts).abs() <= 1e-12);

    let text = constant(&mut tape, &rows(&mut rng, 6, 4));
    let ml = constant(&mut tape, &rows(&mut rng, 12, 2));
    let pos: Vec<bool> = (0..12).map(|i| i % 3 != 0).collect();
    let t = total_loss_t2i(&mut tape, fv, text, &labels, ml, &pos, 0.07).unwrap();
    let parts = at(contrastive_loss(&mut tape, fv, text, Some(&labels), 0.07), &tape)
        + at(match_loss(&mut tape, ml, &pos), &tape);
    assert!((tape.scalar(t.total) - parts).abs() <= 1e-12);

    // A zeroed match head emits [0, 0] logits for every pair.
    let zero = tape.constant(Tensor::zeros([12, 2]));
    let t = total_loss_t2i(&mut tape, fv, text, &labels, zero, &pos, 0.07).unwrap();
    let cl = at(contrastive_loss(&mut tape, fv, text, Some(&labels), 0.07), &tape);
    assert!((tape.scalar(t.total) - (cl + 2f64.ln())).abs() <= 1e-12);
}

#[test]
fn degenerate_retrieval_batch_sums_to_zero() {
    // Identical features and overwhelming correct logits make all four terms vanish.
    let labels = [0, 0, 1, 1];
    let f = vec![vec![0.5, -0.5]; 4];
    let logits: Vec<Vec<f64>> = labels
        .iter()
        .map(|&y| (0..2).map(|c| if c == y { 60.0 } else { -60.0 }).collect())
        .collect();
    let batch = TripletBatch {
        triples: vec![(0, 1, 2), (2, 3, 0)],
        betas: vec![(0.5, 0.5); 2],
        margin: 0.3,
    };
    let mut tape = Tape::<f64>::inference();
    let fv = constant(&mut tape, &f);
    let lg = constant(&mut tape, &logits);
    let r = total_loss_retrieval(&mut tape, fv, fv, lg, lg, &labels, &batch).unwrap();
    assert!(tape.scalar(r.total).abs() < 1e-40);
}

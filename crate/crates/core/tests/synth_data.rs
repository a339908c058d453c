//! Generator, sampler and augmentation properties.

use std::collections::{BTreeMap, BTreeSet};

use irk_core::instruct::TaskKind;
use irk_core::synth::render::{code_unit, in_clothes, render, GRID_COLS, GRID_ROWS};
use irk_core::synth::{
    augment, from_jsonl, to_jsonl, AugmentPolicy, Dataset, Modality, PkSampler, SampleRecord,
    Split, SynthConfig,
};
use irk_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn default_set() -> Dataset {
    Dataset::generate(SynthConfig::default()).unwrap()
}

/// Skin and hair pixels: everything outside the clothes box.
fn biometric(img: &Tensor<f32>, h: usize, w: usize) -> Vec<f32> {
    let mut out = Vec::new();
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                if !in_clothes(y, x, h, w) {
                    out.push(img.data()[c * h * w + y * w + x]);
                }
            }
        }
    }
    out
}

#[test]
fn nearest_centroid_separates_identities() {
    let ds = default_set();
    let (h, w) = (ds.config.image_height, ds.config.image_width);
    let mut sums: BTreeMap<usize, (Vec<f32>, usize)> = BTreeMap::new();
    for r in ds.split(Split::Train).filter(|r| r.modality == Modality::Visible) {
        let v = biometric(&ds.render(r).unwrap(), h, w);
        let e = sums.entry(r.identity).or_insert_with(|| (vec![0.0; v.len()], 0));
        e.0.iter_mut().zip(&v).for_each(|(a, b)| *a += b);
        e.1 += 1;
    }
    let centroids: Vec<(usize, Vec<f32>)> = sums
        .into_iter()
        .map(|(id, (s, n))| (id, s.into_iter().map(|v| v / n as f32).collect()))
        .collect();

    // Fresh renders: unseen noise, random camera and wardrobe item.
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut hits, mut total) = (0, 0);
    for id in 0..ds.config.train_identities {
        let spec = ds.identity(id).unwrap();
        for _ in 0..10 {
            let outfit = &spec.wardrobe[rng.random_range(0..spec.wardrobe.len())];
            let camera = rng.random_range(0..ds.config.cameras);
            let img = render(spec, outfit, camera, Modality::Visible, rng.random(), ds.config.noise_std, h, w);
            let v = biometric(&img, h, w);
            let best = centroids
                .iter()
                .min_by(|a, b| {
                    let d = |c: &[f32]| c.iter().zip(&v).map(|(x, y)| (x - y) * (x - y)).sum::<f32>();
                    d(&a.1).total_cmp(&d(&b.1))
                })
                .unwrap()
                .0;
            hits += usize::from(best == id);
            total += 1;
        }
    }
    let acc = hits as f64 / total as f64;
    assert!(acc >= 0.95, "nearest-centroid accuracy {acc}");
}

#[test]
fn clothes_and_identity_factorize() {
    let ds = default_set();
    let (h, w) = (ds.config.image_height, ds.config.image_width);
    let (ch, cw) = (h / GRID_ROWS, w / GRID_COLS);
    for id in 0..ds.config.train_identities {
        let spec = ds.identity(id).unwrap();
        for k in 1..spec.wardrobe.len() {
            let a = render(spec, &spec.wardrobe[0], 1, Modality::Visible, 5, 0.03, h, w);
            let b = render(spec, &spec.wardrobe[k], 1, Modality::Visible, 5, 0.03, h, w);
            let changed = a.data().iter().zip(b.data()).filter(|(x, y)| x != y).count();
            assert!((changed as f64) < 0.6 * a.data().len() as f64);
        }
        // Same outfit on the next identity: some skin cell must differ.
        let other = ds.identity((id + 1) % ds.config.train_identities).unwrap();
        let outfit = &spec.wardrobe[0];
        let a = render(spec, outfit, 0, Modality::Visible, 9, 0.0, h, w);
        let b = render(other, outfit, 0, Modality::Visible, 9, 0.0, h, w);
        let skin_differs = (0..h * w).any(|i| {
            let (y, x) = (i / w, i % w);
            code_unit(y / ch, x / cw).is_some() && !in_clothes(y, x, h, w) && a.data()[i] != b.data()[i]
        });
        assert!(skin_differs, "identities {id} and {} share a biometric region", other.identity);
    }
}

#[test]
fn generation_is_reproducible_for_seed_seven() {
    let (a, b) = (default_set(), default_set());
    assert_eq!(a.config.seed, 7);
    assert_eq!(to_jsonl(&a.records).unwrap(), to_jsonl(&b.records).unwrap());
    for (ra, rb) in a.records.iter().zip(&b.records) {
        let (x, y) = (a.render(ra).unwrap(), b.render(rb).unwrap());
        assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
    let c = Dataset::generate(SynthConfig {
        seed: 8,
        ..SynthConfig::default()
    })
    .unwrap();
    let r = &a.records[0];
    assert_ne!(a.render(r).unwrap(), c.render(&c.records[0]).unwrap());
}

#[test]
fn default_layout_and_split_invariants() {
    let ds = default_set();
    assert_eq!(ds.split(Split::Train).count(), 20 * 8);
    let train: BTreeSet<usize> = ds.split(Split::Train).map(|r| r.identity).collect();
    let query: BTreeSet<usize> = ds.split(Split::Query).map(|r| r.identity).collect();
    let gallery: BTreeSet<usize> = ds.split(Split::Gallery).map(|r| r.identity).collect();
    assert!(train.is_disjoint(&query));
    assert!(query.is_subset(&gallery));
    for r in &ds.records {
        let spec = ds.identity(r.identity).unwrap();
        let mut want = spec.wardrobe[r.clothes].attributes();
        want.retain(|a| r.attributes.contains(a));
        assert_eq!(want.len(), 4, "record {} attributes {:?}", r.index, r.attributes);
        let is_vi_only = r.tasks == [TaskKind::Vi];
        assert_eq!(is_vi_only, r.modality == Modality::Infrared);
    }
}

#[test]
fn pk_batches_hold_exactly_k_per_identity() {
    let ds = default_set();
    let train: Vec<&SampleRecord> = ds.split(Split::Train).collect();
    let labels: Vec<usize> = train.iter().map(|r| r.identity).collect();
    let mut sampler = PkSampler::new(&labels, 4, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut seen = BTreeMap::new();
    for _ in 0..100 {
        let batch = sampler.next_batch(&mut rng);
        assert_eq!(batch.len(), 16);
        let mut hist: BTreeMap<usize, usize> = BTreeMap::new();
        for &i in &batch {
            *hist.entry(labels[i]).or_default() += 1;
        }
        assert_eq!(hist.len(), 4);
        assert!(hist.values().all(|&c| c == 4), "{hist:?}");
        let distinct: BTreeSet<usize> = batch.iter().copied().collect();
        assert_eq!(distinct.len(), 16);
        for &i in &batch {
            *seen.entry(i).or_insert(0usize) += 1;
        }
    }
    // 1600 draws over 160 items without replacement per identity pool.
    assert_eq!(seen.len(), 160);
    assert!(seen.values().all(|&c| c == 10), "{seen:?}");
}

#[test]
fn default_sampler_on_a_large_set_gives_128() {
    let labels: Vec<usize> = (0..40 * 4).map(|i| i / 4).collect();
    let mut s = PkSampler::new(&labels, 32, 4).unwrap();
    assert_eq!(s.next_batch(&mut ChaCha8Rng::seed_from_u64(0)).len(), 128);
    assert!(PkSampler::new(&labels[..31 * 4], 32, 4).is_err());
    assert!(PkSampler::new(&labels, 2, 5).is_err());
}

#[test]
fn forced_augmentations() {
    let img = Tensor::from_fn([3, 64, 32], |i| ((i * 31) % 97) as f32 / 97.0);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let flip = AugmentPolicy {
        flip_prob: 1.0,
        ..AugmentPolicy::flip_only()
    };
    let once = augment(&img, &mut rng, &flip);
    assert_ne!(once, img);
    assert_eq!(augment(&once, &mut rng, &flip), img);

    let erase = AugmentPolicy {
        erase: true,
        erase_prob: 1.0,
        ..AugmentPolicy::none()
    };
    for _ in 0..20 {
        let out = augment(&img, &mut rng, &erase);
        let changed = (0..64 * 32)
            .filter(|&p| (0..3).any(|c| out.data()[c * 2048 + p] != img.data()[c * 2048 + p]))
            .count();
        assert!(changed as f64 <= 0.2 * 2048.0 && changed > 0);
    }

    let crop = AugmentPolicy {
        crop: true,
        ..AugmentPolicy::none()
    };
    let out = augment(&img, &mut rng, &crop);
    assert_eq!(out.shape(), img.shape());
}

fn record_strategy() -> impl Strategy<Value = SampleRecord> {
    let split = prop_oneof![Just(Split::Train), Just(Split::Query), Just(Split::Gallery)];
    let modality = prop_oneof![Just(Modality::Visible), Just(Modality::Infrared)];
    let task = prop_oneof![
        Just(TaskKind::Trad),
        Just(TaskKind::Cc),
        Just(TaskKind::Ctcc),
        Just(TaskKind::Vi),
        Just(TaskKind::T2i),
        Just(TaskKind::Li)
    ];
    (
        (0usize..10_000, split, 0usize..100, 0usize..8, 0usize..5, modality),
        prop::collection::vec(task, 1..4),
        prop::collection::vec("[a-z \"\\\\é]{0,12}", 0..5),
        prop::collection::vec(".{0,30}", 0..3),
        any::<u64>(),
        prop::option::of("[a-z/._]{1,20}"),
    )
        .prop_map(|((index, split, identity, camera, clothes, modality), tasks, attributes, description, noise_seed, path)| {
            SampleRecord {
                index,
                split,
                identity,
                camera,
                clothes,
                modality,
                tasks,
                attributes,
                description,
                noise_seed,
                path,
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn manifest_round_trips(records in prop::collection::vec(record_strategy(), 0..8)) {
        let text = to_jsonl(&records).unwrap();
        prop_assert_eq!(text.lines().count(), records.len());
        prop_assert_eq!(from_jsonl(&text).unwrap(), records);
    }
}

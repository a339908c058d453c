//! Checkpoint, dataset-directory and training-loop behaviour through the
//! library API.

use std::fs;

use irk::checkpoint::{self, MAGIC};
use irk::run::{self, CHECKPOINT_FILE, METRICS_FILE};
use irk::RunConfig;
use irk_core::eval::EvalReport;
use irk_core::model::{Model, ModelConfig};
use irk_core::synth::SynthConfig;
use irk_core::ParamStore;
use proptest::prelude::*;

fn tiny_run(steps: u64) -> RunConfig {
    let mut cfg = RunConfig::desk();
    cfg.synth = SynthConfig {
        train_identities: 4,
        test_identities: 3,
        ..SynthConfig::default()
    };
    cfg.model.dim = 16;
    cfg.model.heads = 2;
    cfg.model.layers = 1;
    cfg.steps = steps;
    cfg.checkpoint_every = 2;
    cfg.deterministic = true;
    cfg
}

fn fresh_model(seed: u64) -> (Model, ParamStore<f32>) {
    let mut store = ParamStore::new();
    let model = Model::init_seeded(ModelConfig::tiny(), 5, &mut store, seed).unwrap();
    (model, store)
}

#[test]
fn checkpoint_load_then_save_is_byte_identical() {
    let (model, mut store) = fresh_model(3);
    // Odd bit patterns must survive: negative zero, subnormals, extremes.
    let id = store.ids().next().unwrap();
    let mut v = store.get(id).data().to_vec();
    let specials = [-0.0f32, f32::MIN_POSITIVE / 3.0, f32::MAX, -1.0e-38];
    for (x, s) in v.iter_mut().zip(specials) {
        *x = s;
    }
    store.set_values(id, &v).unwrap();
    let bytes = checkpoint::encode(&model, &store, 42).unwrap();
    assert_eq!(&bytes[..8], &MAGIC);
    let ck = checkpoint::decode(&bytes, "x".as_ref()).unwrap();
    assert_eq!(ck.step, 42);
    assert_eq!(checkpoint::encode(&ck.model, &ck.store, ck.step).unwrap(), bytes);
    for (a, b) in store.iter().zip(ck.store.iter()) {
        assert_eq!(a.1.name, b.1.name);
        assert_eq!(a.1.frozen, b.1.frozen);
        let bits = |p: &irk_core::params::Param<f32>| p.tensor.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a.1), bits(b.1));
    }

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.irk");
    checkpoint::save(&p, &model, &store, 42).unwrap();
    let ck = checkpoint::load(&p).unwrap();
    let q = dir.path().join("b.irk");
    checkpoint::save(&q, &ck.model, &ck.store, ck.step).unwrap();
    assert_eq!(fs::read(&p).unwrap(), fs::read(&q).unwrap());
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let (model, store) = fresh_model(1);
    let bytes = checkpoint::encode(&model, &store, 0).unwrap();
    let p = "x".as_ref();
    assert!(checkpoint::decode(&bytes[..bytes.len() - 4], p).is_err());
    let mut extra = bytes.clone();
    extra.extend_from_slice(&[0; 4]);
    assert!(checkpoint::decode(&extra, p).is_err());
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(checkpoint::decode(&magic, p).is_err());
    let mut version = bytes.clone();
    version[8] = 9;
    assert!(checkpoint::decode(&version, p).is_err());
    // Header claiming a different classifier width no longer matches the payload.
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let header = std::str::from_utf8(&bytes[20..20 + hlen]).unwrap();
    let changed = header.replacen("\"num_ids\":5", "\"num_ids\":6", 1);
    assert_ne!(changed, header);
    let mut other = bytes[..12].to_vec();
    other.extend_from_slice(&(changed.len() as u64).to_le_bytes());
    other.extend_from_slice(changed.as_bytes());
    other.extend_from_slice(&bytes[20 + hlen..]);
    assert!(checkpoint::decode(&other, p).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn checkpoints_round_trip_any_values(seed in any::<u64>(), step in any::<u64>(), scale in -1e6f32..1e6) {
        let (model, mut store) = fresh_model(seed);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let v: Vec<f32> = store.get(id).data().iter().map(|x| x * scale).collect();
            store.set_values(id, &v).unwrap();
        }
        let bytes = checkpoint::encode(&model, &store, step).unwrap();
        let ck = checkpoint::decode(&bytes, "p".as_ref()).unwrap();
        prop_assert_eq!(checkpoint::encode(&ck.model, &ck.store, ck.step).unwrap(), bytes);
    }
}

#[test]
fn training_writes_checkpoints_metrics_and_final_reports() {
    let cfg = tiny_run(5);
    let dir = tempfile::tempdir().unwrap();
    let trainer = run::build_trainer(&cfg).unwrap();
    let out = run::train(trainer, &cfg, Some(dir.path())).unwrap();
    assert_eq!(out.trainer.steps_done(), 5);
    let steps: Vec<u64> = out.log.steps.iter().map(|s| s.step).collect();
    assert_eq!(steps, vec![0, 1, 2, 3, 4]);
    assert_eq!(out.log.evals.len(), 1);
    let ck = checkpoint::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(ck.step, 5);
    let text = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    let log: irk::metrics::MetricsLog = serde_json::from_str(&text).unwrap();
    assert_eq!(log, out.log);
    let reparsed: EvalReport = serde_json::from_str(&serde_json::to_string(&log.evals[0]).unwrap()).unwrap();
    assert_eq!(reparsed, log.evals[0]);
}

#[test]
fn failed_step_keeps_the_last_good_checkpoint() {
    let cfg = tiny_run(4);
    let dir = tempfile::tempdir().unwrap();
    let trainer = run::build_trainer(&cfg).unwrap();
    let mut out = run::train(trainer, &cfg, Some(dir.path())).unwrap();
    let path = dir.path().join(CHECKPOINT_FILE);
    let good = fs::read(&path).unwrap();

    let id = out.trainer.store.find("patch.proj.w").expect("patch projection");
    let mut v = out.trainer.store.get(id).data().to_vec();
    v[0] = f32::NAN;
    out.trainer.store.set_values(id, &v).unwrap();
    let err = run::train(out.trainer, &cfg, Some(dir.path())).err().expect("NaN must abort").to_string();
    assert!(err.contains("aborted at step 4"), "{err}");
    assert_eq!(fs::read(&path).unwrap(), good);
}

#[test]
fn deterministic_runs_are_bitwise_identical() {
    let cfg = tiny_run(6);
    let mut outs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let out = run::train(run::build_trainer(&cfg).unwrap(), &cfg, Some(dir.path())).unwrap();
        let ck = fs::read(dir.path().join(CHECKPOINT_FILE)).unwrap();
        outs.push((ck, serde_json::to_string(&out.log.evals).unwrap()));
    }
    assert_eq!(outs[0], outs[1]);
}

//! Finite-difference checks of whole-model objectives in f64.

use irk_core::gradcheck::{finite_diff_check, SUITE_STEP};
use irk_core::loss::{mine_triplets, total_loss_retrieval, total_loss_t2i, MarginMode, MiningMode};
use irk_core::model::{mean_pool, InstructionInput, Model, ModelConfig};
use irk_core::{ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

fn setup(seed: u64) -> (Model, ParamStore<f64>, Vec<Tensor<f64>>, Vec<Tensor<f64>>) {
    let cfg = ModelConfig::tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let model = Model::init(cfg.clone(), 3, &mut store, &mut rng).unwrap();
    // Open the gates and widen every weight so the check is not dominated
    // by near-zero paths.
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.get(id).numel();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
        let name = store.name(id).to_string();
        if name.ends_with(".gamma") {
            let v: Vec<f64> = v.iter().map(|x| 1.0 + x).collect();
            store.set_values(id, &v).unwrap();
        } else {
            store.set_values(id, &v).unwrap();
        }
    }
    let img = |rng: &mut ChaCha8Rng| {
        Tensor::from_fn([cfg.channels, cfg.image_height, cfg.image_width], |_| rng.random::<f64>())
    };
    let images = (0..4).map(|_| img(&mut rng)).collect();
    let templates = (0..2)
        .map(|_| {
            Tensor::from_fn(
                [cfg.channels, cfg.instruction_image_height, cfg.instruction_image_width],
                |_| rng.random::<f64>(),
            )
        })
        .collect();
    (model, store, images, templates)
}

#[test]
fn retrieval_objective_matches_finite_differences() {
    let (model, mut store, images, templates) = setup(11);
    let labels = [0usize, 0, 1, 1];
    let texts = [vec!["red coat".to_string()], vec!["a blue skirt and shoes".to_string()]];
    let inputs = [
        InstructionInput::Text(&texts[0]),
        InstructionInput::Image(&templates[0]),
        InstructionInput::Text(&texts[1]),
        InstructionInput::Image(&templates[1]),
    ];
    // β is a constant of the objective, so the triples are mined once.
    let mined = {
        let mut tape = irk_core::Tape::inference();
        let t = model.encode_instructions(&mut tape, &store, &inputs).unwrap();
        let p = mean_pool(&mut tape, &t).unwrap();
        let v = tape.value(p);
        let pooled: Vec<Vec<f64>> = (0..v.rows()).map(|r| v.row(r).to_vec()).collect();
        mine_triplets(&labels, &pooled, &[], 0.3, MiningMode::All, MarginMode::Adaptive).unwrap()
    };
    assert!(mined.batch.betas.iter().any(|b| b.0 != 0.0 && b.0 != 1.0));
    let report = finite_diff_check(&mut store, SUITE_STEP, Some(6), |s, tape| {
        let inputs = [
            InstructionInput::Text(&texts[0]),
            InstructionInput::Image(&templates[0]),
            InstructionInput::Text(&texts[1]),
            InstructionInput::Image(&templates[1]),
        ];
        let t = model.encode_instructions(tape, s, &inputs)?;
        let refs: Vec<&Tensor<f64>> = images.iter().collect();
        let f = model.encode_images(tape, s, &refs, Some(&t))?;
        let f_out = model.fuse(tape, s, f, &t)?;
        let idl = model.id_logits(tape, s, f)?;
        let ido = model.id_out_logits(tape, s, f_out)?;
        Ok(total_loss_retrieval(tape, f, f_out, idl, ido, &labels, &mined.batch)?.total)
    })
    .unwrap();
    assert!(report.passes(TOL), "{report:?}");
}

#[test]
fn t2i_objective_matches_finite_differences() {
    let (model, mut store, images, _) = setup(12);
    let labels = [0usize, 0, 1, 2];
    let texts: Vec<Vec<String>> = ["black hair", "white shirt", "grey trousers now", "a skirt"]
        .iter()
        .map(|s| vec![s.to_string()])
        .collect();
    let report = finite_diff_check(&mut store, SUITE_STEP, Some(6), |s, tape| {
        let inputs: Vec<_> = texts.iter().map(|t| InstructionInput::Text(t)).collect();
        let t = model.encode_instructions(tape, s, &inputs)?;
        let refs: Vec<&Tensor<f64>> = images.iter().collect();
        let f = model.encode_images(tape, s, &refs, None)?;
        let text = mean_pool(tape, &t)?;
        let f_out = model.fuse(tape, s, f, &t)?;
        let logits = model.match_logits(tape, s, f_out)?;
        Ok(total_loss_t2i(tape, f, text, &labels, logits, &[true, false, true, false], 0.07)?.total)
    })
    .unwrap();
    assert!(report.passes(TOL), "{report:?}");
}

#[test]
fn features_do_not_depend_on_batch_mates() {
    let (model, store, images, _) = setup(13);
    let texts: Vec<Vec<String>> = (0..4).map(|i| vec![format!("phrase number {i}")]).collect();
    let run = |idx: &[usize]| {
        let mut tape = irk_core::Tape::inference();
        let inputs: Vec<_> = idx.iter().map(|&i| InstructionInput::Text(&texts[i])).collect();
        let t = model.encode_instructions(&mut tape, &store, &inputs).unwrap();
        let refs: Vec<&Tensor<f64>> = idx.iter().map(|&i| &images[i]).collect();
        let f = model.encode_images(&mut tape, &store, &refs, Some(&t)).unwrap();
        let f_out = model.fuse(&mut tape, &store, f, &t).unwrap();
        let v = tape.value(f_out);
        (0..v.rows()).map(|r| v.row(r).to_vec()).collect::<Vec<_>>()
    };
    let all = run(&[0, 1, 2, 3]);
    for i in 0..4 {
        let one = run(&[i]);
        for (a, b) in one[0].iter().zip(&all[i]) {
            assert!((a - b).abs() < 1e-12, "image {i}: {a} vs {b}");
        }
    }
}

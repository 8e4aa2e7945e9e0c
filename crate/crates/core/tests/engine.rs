mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use steexlab_core::autoencoder::{Autoencoder, SemanticStack};
use steexlab_core::decision::DecisionModel;
use steexlab_core::engine::{
    distance_loss, distance_loss_over, expand_freedom, load_result, optimize, save_result, Explainer, LogisticToy,
};
use steexlab_core::models::{BackboneArch, EncoderArch, GeneratorArch, Segmenter, SegmenterArch, Visibility};
use steexlab_core::types::{
    CounterClass, CounterfactualRequest, ImageTensor, OptimizerConfig, Profile, RegionTargetSpec, StyleCodeSet,
};
use steexlab_core::Error;

#[test]
fn toy_objective_matches_closed_form() {
    let err = common::toy_closed_form_error();
    assert!(err < 1e-8, "{err}");
}

#[test]
fn toy_optimum_matches_long_horizon_gradient_descent() {
    let c = common::toy_optimum_comparison();
    assert!(c.oracle_grad_norm < 1e-12);
    assert!(c.code_error < 1e-3, "code error {}", c.code_error);
    assert!(c.objective_error < 1e-6, "objective error {}", c.objective_error);
}

#[test]
fn non_finite_objective_reports_the_step() {
    let toy = LogisticToy { w: vec![1.0], b: f64::NAN };
    match optimize(&toy, &[0.0], &[true], 2, &OptimizerConfig::default()) {
        Err(Error::NumericalFailure { step, trajectory }) => {
            assert_eq!(step, 0);
            assert!(trajectory.is_empty());
        }
        other => panic!("expected numerical failure, got {other:?}"),
    }
}

#[test]
fn total_objective_gradient_matches_finite_differences() {
    let check = common::objective_gradient_check();
    assert!(check.frozen_exact);
    assert_eq!(check.relative_errors.len(), 50);
    for (i, e) in check.relative_errors.iter().enumerate() {
        assert!(*e < 1e-4, "run {} probe {}: relative error {e}", i / 10, i % 10);
    }
}

fn small_profile() -> Profile {
    Profile::new(16, 16, 4, 6)
}

fn small_stack(seed: u64) -> (SemanticStack, DecisionModel) {
    let p = small_profile();
    let seg = Segmenter::new(p.num_classes, SegmenterArch { width: 4 }, seed);
    let ae = Autoencoder::new(&p, EncoderArch { width: 6 }, GeneratorArch { width: 6 }, seed);
    let stack = SemanticStack::new(seg, ae, p.clone()).unwrap();
    let model =
        DecisionModel::new(p, vec!["a".into(), "b".into()], BackboneArch { widths: vec![4, 6, 6, 6] }, Visibility::full(), seed + 7);
    (stack, model)
}

fn random_image(r: &mut ChaCha8Rng, h: usize, w: usize) -> ImageTensor {
    ImageTensor::new(h, w, (0..h * w * 3).map(|_| r.random_range(-1.0f32..1.0)).collect()).unwrap()
}

fn request(image: ImageTensor, targets: RegionTargetSpec, steps: usize) -> CounterfactualRequest {
    CounterfactualRequest {
        query_image: image,
        counter_class: CounterClass::Auto,
        target_regions: targets,
        optimizer: OptimizerConfig { num_steps: steps, learning_rate: 0.05, ..OptimizerConfig::default() },
        model_id: "m".into(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn untargeted_codes_stay_bit_identical(seed in 0u64..1000, targets in proptest::collection::btree_set(1u8..=4, 0..=4)) {
        let (stack, model) = small_stack(seed % 3);
        let ex = Explainer::new(&stack, &model, "m").unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let spec = RegionTargetSpec::new(targets.iter().copied(), 4).unwrap();
        let res = ex.explain(&request(random_image(&mut r, 16, 16), spec.clone(), 15)).unwrap();
        prop_assert_eq!(res.loss_trajectory.len(), 15);
        for c in 1..=4u8 {
            if !spec.contains(c) {
                prop_assert_eq!(res.final_codes.code(c), res.original_codes.code(c));
                prop_assert_eq!(res.delta_norms[c as usize - 1], 0.0);
            }
        }
        prop_assert_eq!(
            distance_loss(&res.original_codes, &res.final_codes).unwrap(),
            distance_loss_over(&res.original_codes, &res.final_codes, &spec).unwrap()
        );
    }

    #[test]
    fn masked_distance_equals_loop_oracle(
        deltas in proptest::collection::vec(-3.0f32..3.0, 12),
        present in proptest::collection::vec(any::<bool>(), 4),
        targets in proptest::collection::btree_set(1u8..=4, 0..=4),
    ) {
        let base: Vec<f32> = (0..12).map(|i| if present[i / 3] { i as f32 * 0.1 } else { 0.0 }).collect();
        let z0 = StyleCodeSet::new(4, 3, present.clone(), base).unwrap();
        let spec = RegionTargetSpec::new(targets.iter().copied(), 4).unwrap();
        let free = expand_freedom(&spec.freedom(&present), 3);
        let masked: Vec<f32> = deltas.iter().zip(&free).map(|(d, &f)| if f { *d } else { 0.0 }).collect();
        let z = z0.add_masked(&masked).unwrap();
        let mut oracle = 0.0f64;
        for c in 0..4 {
            if targets.contains(&(c as u8 + 1)) && present[c] {
                for k in 0..3 {
                    let d = (z.values()[c * 3 + k] - z0.values()[c * 3 + k]) as f64;
                    oracle += d * d;
                }
            }
        }
        let full = distance_loss(&z0, &z).unwrap();
        prop_assert!((full - oracle).abs() < 1e-9);
        prop_assert_eq!(full, distance_loss_over(&z0, &z, &spec).unwrap());
    }
}

#[test]
fn empty_target_set_returns_the_reconstruction() {
    let (stack, model) = small_stack(1);
    let ex = Explainer::new(&stack, &model, "m").unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(9);
    let res = ex.explain(&request(random_image(&mut r, 16, 16), RegionTargetSpec::none(), 20)).unwrap();
    assert_eq!(res.final_codes, res.original_codes);
    assert_eq!(res.counterfactual_image, res.reconstruction_image);
    let rec_probs = model.predict(&res.reconstruction_image).unwrap();
    assert_eq!(res.success, rec_probs[res.counter_class - 1] > 0.5);
    assert!(res.delta_norms.iter().all(|&d| d == 0.0));
}

#[test]
fn results_are_deterministic_and_use_the_query_layout() {
    let (stack, model) = small_stack(2);
    let ex = Explainer::new(&stack, &model, "m").unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let req = request(random_image(&mut r, 16, 16), RegionTargetSpec::all(4), 25);
    let a = ex.explain(&req).unwrap();
    let b = ex.explain(&req).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.mask, stack.segment(&req.query_image).unwrap());
    assert_eq!(a.final_probs, model.predict(&a.counterfactual_image).unwrap());
}

#[test]
fn region_sweep_runs_independently_from_the_same_start() {
    let (stack, model) = small_stack(0);
    let ex = Explainer::new(&stack, &model, "m").unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let req = request(random_image(&mut r, 16, 16), RegionTargetSpec::all(4), 10);
    let sets = [RegionTargetSpec::new([1], 4).unwrap(), RegionTargetSpec::new([2, 3], 4).unwrap(), RegionTargetSpec::all(4)];
    let results = ex.region_targeted_sweep(&req, &sets).unwrap();
    assert_eq!(results.len(), 3);
    let solo = ex.explain(&CounterfactualRequest { target_regions: sets[1].clone(), ..req.clone() }).unwrap();
    let swept = results[1].as_ref().unwrap();
    assert_eq!(swept, &solo);
    for res in &results {
        assert_eq!(res.as_ref().unwrap().original_codes, solo.original_codes);
    }
}

#[test]
fn invalid_targets_and_explicit_predicted_class_are_rejected() {
    let (stack, model) = small_stack(0);
    let ex = Explainer::new(&stack, &model, "m").unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(6);
    let img = random_image(&mut r, 16, 16);
    let bad: RegionTargetSpec = serde_json::from_str("[1, 9]").unwrap();
    assert!(matches!(ex.explain(&request(img.clone(), bad, 5)), Err(Error::Config(_))));
    let predicted = steexlab_core::types::predicted_class(&model.predict(&img).unwrap());
    let req = CounterfactualRequest { counter_class: CounterClass::Explicit(predicted), ..request(img, RegionTargetSpec::all(4), 5) };
    assert!(matches!(ex.explain(&req), Err(Error::Rejected(_))));
}

#[test]
fn result_directory_round_trip() {
    let (stack, model) = small_stack(3);
    let ex = Explainer::new(&stack, &model, "m").unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(7);
    let res = ex.explain(&request(random_image(&mut r, 16, 16), RegionTargetSpec::new([2, 4], 4).unwrap(), 12)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    save_result(&out, &res).unwrap();
    assert!(matches!(save_result(&out, &res), Err(Error::Precondition(_))));
    let back = load_result(&out).unwrap();
    assert_eq!(back.final_codes, res.final_codes);
    assert_eq!(back.loss_trajectory, res.loss_trajectory);
    assert_eq!(back.delta_norms, res.delta_norms);
    assert_eq!(back.mask, res.mask);
    assert!(back.counterfactual_image.mean_abs_diff(&res.counterfactual_image) <= 1.0 / 255.0);
    let csv = std::fs::read_to_string(out.join("trajectory.csv")).unwrap();
    assert_eq!(csv.lines().count(), 13);
    assert!(csv.starts_with("step,decision_loss,distance_loss,counter_prob\n"));
}

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use steexlab_core::dataset::synthesize;
use steexlab_core::eval::*;
use steexlab_core::models::BackboneArch;
use steexlab_core::synth::{desk_profile, ATTRIBUTE_NAMES};
use steexlab_core::types::*;
use steexlab_core::Error;

/// Closed-form Fréchet distance for 2×2 covariances: the eigenvalues of
/// `Σ1^½ Σ2 Σ1^½` are those of `Σ1 Σ2`, and for a 2×2 PSD matrix `tr √M`
/// equals `√(tr M + 2 √det M)`.
fn frechet_2x2(m1: [f64; 2], s1: [[f64; 2]; 2], m2: [f64; 2], s2: [[f64; 2]; 2]) -> f64 {
    let p = [
        [s1[0][0] * s2[0][0] + s1[0][1] * s2[1][0], s1[0][0] * s2[0][1] + s1[0][1] * s2[1][1]],
        [s1[1][0] * s2[0][0] + s1[1][1] * s2[1][0], s1[1][0] * s2[0][1] + s1[1][1] * s2[1][1]],
    ];
    let tr_p = p[0][0] + p[1][1];
    let det_p = p[0][0] * p[1][1] - p[0][1] * p[1][0];
    let dm = (m1[0] - m2[0]).powi(2) + (m1[1] - m2[1]).powi(2);
    dm + s1[0][0] + s1[1][1] + s2[0][0] + s2[1][1] - 2.0 * (tr_p + 2.0 * det_p.max(0.0).sqrt()).sqrt()
}

fn spd(rng: &mut ChaCha8Rng) -> [[f64; 2]; 2] {
    let a: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.5..1.5));
    // AᵀA + 0.1 I
    [
        [a[0] * a[0] + a[2] * a[2] + 0.1, a[0] * a[1] + a[2] * a[3]],
        [a[0] * a[1] + a[2] * a[3], a[1] * a[1] + a[3] * a[3] + 0.1],
    ]
}

fn to_na(m: [f64; 2], s: [[f64; 2]; 2]) -> (DVector<f64>, DMatrix<f64>) {
    (DVector::from_row_slice(&m), DMatrix::from_fn(2, 2, |i, j| s[i][j]))
}

#[test]
fn frechet_matches_two_dimensional_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let (s1, s2) = (spd(&mut rng), spd(&mut rng));
        let m1 = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
        let m2 = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
        let (a, sa) = to_na(m1, s1);
        let (b, sb) = to_na(m2, s2);
        let got = frechet_from_moments(&a, &sa, &b, &sb);
        let want = frechet_2x2(m1, s1, m2, s2);
        assert!((got - want).abs() < 1e-3, "{got} vs {want}");
    }
}

fn sample_moments(x: &[Vec<f64>]) -> ([f64; 2], [[f64; 2]; 2]) {
    let n = x.len() as f64;
    let m = [x.iter().map(|v| v[0]).sum::<f64>() / n, x.iter().map(|v| v[1]).sum::<f64>() / n];
    let mut s = [[0.0; 2]; 2];
    for v in x {
        for i in 0..2 {
            for j in 0..2 {
                s[i][j] += (v[i] - m[i]) * (v[j] - m[j]) / (n - 1.0);
            }
        }
    }
    (m, s)
}

#[test]
fn frechet_over_samples_uses_unbiased_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let draw = |rng: &mut ChaCha8Rng, shift: f64, scale: f64| -> Vec<Vec<f64>> {
        (0..400)
            .map(|_| {
                let u: f64 = rng.random_range(-1.0..1.0);
                let w: f64 = rng.random_range(-1.0..1.0);
                vec![shift + scale * u, 0.5 * u + w]
            })
            .collect()
    };
    let a = draw(&mut rng, 0.0, 1.0);
    let b = draw(&mut rng, 1.0, 2.0);
    let fd = frechet_distance(&a, &b).unwrap();
    let (m1, s1) = sample_moments(&a);
    let (m2, s2) = sample_moments(&b);
    assert!(!fd.regularized);
    assert!((fd.value - frechet_2x2(m1, s1, m2, s2)).abs() < 1e-3);
}

#[test]
fn frechet_of_a_set_with_itself_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a: Vec<Vec<f64>> = (0..80).map(|_| (0..16).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let fd = frechet_distance(&a, &a).unwrap();
    assert!(fd.value < 1e-4, "{}", fd.value);
}

#[test]
fn singular_covariance_is_regularized_and_flagged() {
    // the second coordinate is constant
    let a: Vec<Vec<f64>> = (0..60).map(|i| vec![i as f64 / 60.0, 1.0]).collect();
    let fd = frechet_distance(&a, &a).unwrap();
    assert!(fd.regularized);
    assert!(fd.value < 1e-4);
    let short = vec![vec![0.0, 1.0]];
    assert!(matches!(frechet_distance(&short, &a), Err(Error::Precondition(_))));
}

fn untrained_oracle() -> AttributeOracle {
    let names = ATTRIBUTE_NAMES.iter().map(|s| s.to_string()).collect();
    AttributeOracle::new(desk_profile(), names, BackboneArch::default(), 1)
}

#[test]
fn desk_fid_of_identical_sets_and_sample_minimum() {
    let ds = synthesize(60, 2, &desk_profile()).unwrap();
    let images: Vec<&ImageTensor> = ds.items.iter().map(|i| &i.image).collect();
    let oracle = untrained_oracle();
    let r = desk_fid(&oracle, &images, &images).unwrap();
    assert!(r.value < 1e-4, "{}", r.value);
    assert_eq!(r.count, 60);
    assert!(matches!(desk_fid(&oracle, &images[..49], &images), Err(Error::Precondition(_))));
}

#[test]
fn identical_pairs_change_no_attributes() {
    let ds = synthesize(12, 4, &desk_profile()).unwrap();
    let pairs: Vec<(&ImageTensor, &ImageTensor)> = ds.items.iter().map(|i| (&i.image, &i.image)).collect();
    let oracle = untrained_oracle();
    let r = attributes_changed(Some(&oracle), &pairs).unwrap();
    assert_eq!(r.value, 0.0);
    assert_eq!(r.count, 12);
}

#[test]
fn proxy_metrics_without_a_trained_model_are_config_errors() {
    let ds = synthesize(4, 4, &desk_profile()).unwrap();
    let pairs: Vec<(&ImageTensor, &ImageTensor)> = ds.items.iter().map(|i| (&i.image, &i.image)).collect();
    assert!(matches!(attributes_changed(None, &pairs), Err(Error::Config(_))));
    assert!(matches!(identity_preservation(None, &pairs), Err(Error::Config(_))));
}

#[test]
fn hamming_counts_differences() {
    assert_eq!(hamming(&[true, false, true], &[true, true, false]), 2);
    assert_eq!(hamming(&[], &[]), 0);
}

fn fake_result(success: bool, present: Vec<bool>, norms: Vec<f64>) -> CounterfactualResult {
    let n = present.len();
    let img = ImageTensor::filled(2, 2, [0.0; 3]).unwrap();
    let mask = SemanticMask::new(2, 2, n, vec![1; 4]).unwrap();
    let codes = StyleCodeSet::new(n, 1, present, vec![0.0; n]).unwrap();
    CounterfactualResult {
        query_image: img.clone(),
        counterfactual_image: img.clone(),
        reconstruction_image: img,
        mask,
        original_codes: codes.clone(),
        final_codes: codes,
        delta_norms: norms,
        loss_trajectory: Vec::new(),
        query_probs: vec![0.9, 0.1],
        counter_class: 2,
        final_probs: if success { vec![0.2, 0.8] } else { vec![0.7, 0.3] },
        success,
        first_flip_step: None,
        target_regions: RegionTargetSpec::all(n),
        optimizer: OptimizerConfig::default(),
        model_id: "m".into(),
    }
}

#[test]
fn success_rate_counts_flips() {
    let rs: Vec<_> = [true, true, false, true].iter().map(|&s| fake_result(s, vec![true], vec![0.0])).collect();
    let r = success_rate(&rs).unwrap();
    assert_eq!(r.value, 0.75);
    assert_eq!(r.count, 4);
    assert!(matches!(success_rate(&[]), Err(Error::Precondition(_))));
}

#[test]
fn metric_reports_reject_non_finite_values() {
    assert!(MetricReport::new("x", f64::NAN, 3).is_err());
    assert!(MetricReport::new("x", 1.0, 0).is_err());
    let r = MetricReport::new("x", 1.0, 3).unwrap().with_fingerprint(&fingerprint(&OptimizerConfig::default()));
    assert_eq!(r.config_fingerprint.len(), 64);
}

fn names(n: usize) -> Vec<String> {
    (0..n).map(|c| format!("c{c}")).collect()
}

#[test]
fn impact_table_ranks_and_excludes() {
    let a = vec![fake_result(true, vec![true, true, true], vec![2.0, 1.0, 0.0])];
    let b = vec![fake_result(true, vec![true, true, false], vec![1.0, 1.0, 0.0])];
    let t = impact_table(&[("a".into(), &a), ("b".into(), &b)], &names(3)).unwrap();
    // c2 is missing for b, so it is excluded
    assert_eq!(t.excluded, vec!["c2".to_string()]);
    assert!((t.relative[0][0].unwrap() - 2.0 / 1.5).abs() < 1e-12);
    assert_eq!(t.ranking[0], vec!["c0".to_string(), "c1".to_string()]);
    assert_eq!(t.ranking[1], vec!["c1".to_string(), "c0".to_string()]);
    assert_eq!(t.rank_of(1, "c0"), Some(1));
    // equal relatives: the lower class index ranks first
    let c = vec![fake_result(true, vec![true, true], vec![1.0, 3.0])];
    let tie = impact_table(&[("c".into(), &c), ("d".into(), &c)], &names(2)).unwrap();
    assert_eq!(tie.ranking[0], vec!["c0".to_string(), "c1".to_string()]);
    assert!(matches!(impact_table(&[("a".into(), &a)], &names(3)), Err(Error::Precondition(_))));
}

proptest! {
    #[test]
    fn impact_relatives_average_to_one(norms in prop::collection::vec(prop::collection::vec(0.0f64..5.0, 4), 2..5)) {
        let results: Vec<Vec<CounterfactualResult>> =
            norms.iter().map(|n| vec![fake_result(true, vec![true; 4], n.clone())]).collect();
        let runs: Vec<(String, &[CounterfactualResult])> =
            results.iter().enumerate().map(|(i, r)| (format!("m{i}"), r.as_slice())).collect();
        let t = impact_table(&runs, &names(4)).unwrap();
        for c in 0..4 {
            let vals: Vec<f64> = t.relative.iter().filter_map(|row| row[c]).collect();
            if vals.is_empty() {
                let name = format!("c{c}");
                prop_assert!(t.excluded.contains(&name));
            } else {
                prop_assert_eq!(vals.len(), runs.len());
                let avg = vals.iter().sum::<f64>() / vals.len() as f64;
                prop_assert!((avg - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn success_rate_is_a_fraction(flags in prop::collection::vec(any::<bool>(), 1..40)) {
        let rs: Vec<_> = flags.iter().map(|&s| fake_result(s, vec![true], vec![0.0])).collect();
        let v = success_rate(&rs).unwrap().value;
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(v, flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64);
    }
}

//! End-to-end acceptance run on a desk-scale trained stack.
//!
//! The stack is trained on first use and cached under the cargo temp dir,
//! keyed by a fingerprint of every training configuration. Prints one
//! PASS/FAIL line per criterion and exits non-zero if any fails.

mod common;

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use steexlab_core::autoencoder::*;
use steexlab_core::dataset::{synthesize, Dataset, Item};
use steexlab_core::decision::*;
use steexlab_core::engine::{result_digest, Explainer};
use steexlab_core::eval::*;
use steexlab_core::models::Visibility;
use steexlab_core::synth::{self, bottom_region, desk_profile, mid_region, render_scene, top_region, SceneSpec};
use steexlab_core::train::TrainControl;
use steexlab_core::types::*;

const DATASET_COUNT: usize = 2000;
const DATASET_SEED: u64 = 7;
const QUERIES: usize = 200;
const IMPACT_QUERIES: usize = 100;
const REPETITIONS: u64 = 5;
const DETERMINISM_QUERIES: usize = 50;
const SWEEP: [f64; 4] = [0.0, 0.1, 0.3, 1.0];
const COLLAPSE_LAMBDA: f64 = 30.0;

struct Line {
    primary: bool,
    name: &'static str,
    pass: bool,
    detail: String,
}

#[derive(Default)]
struct Report {
    lines: Vec<Line>,
}

impl Report {
    fn primary(&mut self, name: &'static str, pass: bool, detail: String) {
        eprintln!("  {} {name}", if pass { "pass" } else { "FAIL" });
        self.lines.push(Line { primary: true, name, pass, detail });
    }

    fn derived(&mut self, name: &'static str, pass: bool, detail: String) {
        eprintln!("  {} {name}", if pass { "pass" } else { "FAIL" });
        self.lines.push(Line { primary: false, name, pass, detail });
    }
}

struct Configs {
    segmenter: SegmenterTrainConfig,
    autoencoder: AutoencoderTrainConfig,
    classifier: ClassifierTrainConfig,
    embedder: EmbedderTrainConfig,
    oracle: OracleTrainConfig,
}

fn visibilities() -> Vec<(&'static str, Visibility)> {
    let p = desk_profile();
    vec![
        ("top", Visibility::region("top", top_region(&p))),
        ("mid", Visibility::region("mid", mid_region(&p))),
        ("bottom", Visibility::region("bottom", bottom_region(&p))),
    ]
}

fn cache_root(cfg: &Configs) -> PathBuf {
    let key = fingerprint(&json!({
        "dataset": [DATASET_COUNT, DATASET_SEED],
        "segmenter": cfg.segmenter,
        "autoencoder": cfg.autoencoder,
        "classifier": cfg.classifier,
        "embedder": cfg.embedder,
        "oracle": cfg.oracle,
        "repetitions": REPETITIONS,
    }));
    Path::new(env!("CARGO_TARGET_TMPDIR")).join(format!("acceptance-{}", &key[..16]))
}

fn at(dir: &Path) -> TrainControl<'_> {
    TrainControl { checkpoint_dir: Some(dir), stop_after_epochs: None }
}

struct Trained {
    stack: SemanticStack,
    full: DecisionModel,
    masked: Vec<Vec<(String, DecisionModel)>>,
    embedder: IdentityEmbedder,
    oracle: AttributeOracle,
}

fn train_all(ds: &Dataset, cfg: &Configs, root: &Path, clock: &Instant) -> Trained {
    let stage = |name: &str| eprintln!("[{:>6.1}s] {name}", clock.elapsed().as_secs_f64());
    stage("segmenter");
    let (segmenter, _) = train_segmenter(ds, &cfg.segmenter, at(&root.join("segmenter"))).expect("segmenter trains");
    stage("autoencoder");
    let (ae, _) = train_autoencoder(ds, &cfg.autoencoder, at(&root.join("autoencoder"))).expect("autoencoder trains");
    let stack = SemanticStack::new(segmenter, ae, ds.profile().clone()).expect("profiles agree");
    stage("classifier full");
    let (full, _) = train_classifier(ds, &cfg.classifier, at(&root.join("classifier-full"))).expect("classifier trains");
    let mut masked = Vec::new();
    for rep in 0..REPETITIONS {
        let mut models = Vec::new();
        for (name, vis) in visibilities() {
            stage(&format!("classifier {name} seed {rep}"));
            let c = ClassifierTrainConfig { visibility: vis, seed: rep, ..cfg.classifier.clone() };
            let (m, _) = train_classifier(ds, &c, at(&root.join(format!("classifier-{name}-{rep}")))).expect("classifier trains");
            models.push((name.to_string(), m));
        }
        masked.push(models);
    }
    stage("identity embedder");
    let (embedder, _) = train_embedder(ds, &cfg.embedder, at(&root.join("embedder"))).expect("embedder trains");
    stage("attribute oracle");
    let (oracle, _) = train_oracle(ds, &cfg.oracle, at(&root.join("oracle"))).expect("oracle trains");
    Trained { stack, full, masked, embedder, oracle }
}

fn queries(explainer: &Explainer, items: &[&Item], targets: &RegionTargetSpec, cfg: &OptimizerConfig) -> Vec<CounterfactualResult> {
    run_queries(explainer, items, targets, cfg, MaskSource::Predicted).expect("queries run")
}

fn success(results: &[CounterfactualResult]) -> f64 {
    results.iter().filter(|r| r.success).count() as f64 / results.len() as f64
}

/// Count of (result, class) pairs where a class outside the target set moved.
fn invariance_violations(results: &[CounterfactualResult]) -> usize {
    let mut bad = 0;
    for r in results {
        for c in 1..=r.original_codes.num_classes() as u8 {
            if !r.target_regions.contains(c)
                && (r.final_codes.code(c) != r.original_codes.code(c) || r.delta_norms[c as usize - 1] != 0.0)
            {
                bad += 1;
            }
        }
    }
    bad
}

fn set_attribute(s: &mut SceneSpec, k: usize) {
    let a = match k {
        0 => &mut s.light_green,
        1 => &mut s.obstacle_blocking,
        2 => &mut s.sign_blue,
        3 => &mut s.sky_dusk,
        4 => &mut s.building_lit,
        5 => &mut s.tree_present,
        6 => &mut s.cloud_present,
        _ => &mut s.road_wet,
    };
    *a = !*a;
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let clock = Instant::now();
    let profile = desk_profile();
    let cfg = Configs {
        segmenter: SegmenterTrainConfig::default(),
        autoencoder: AutoencoderTrainConfig::default(),
        classifier: ClassifierTrainConfig::default(),
        embedder: EmbedderTrainConfig::default(),
        oracle: OracleTrainConfig::default(),
    };
    let root = cache_root(&cfg);
    eprintln!("acceptance: trained stack cached in {}", root.display());
    let ds = synthesize(DATASET_COUNT, DATASET_SEED, &profile).expect("dataset synthesizes");
    let t = train_all(&ds, &cfg, &root, &clock);
    let tools = EvalTools { embedder: Some(&t.embedder), oracle: Some(&t.oracle) };
    let val = ds.val();
    let items: Vec<&Item> = val.iter().copied().take(QUERIES).collect();
    let opt = OptimizerConfig::default();
    let all = RegionTargetSpec::all(profile.num_classes);
    let explainer = Explainer::new(&t.stack, &t.full, "full").expect("explainer");
    let mut rep = Report::default();
    let stage = |name: &str| eprintln!("[{:>6.1}s] {name}", clock.elapsed().as_secs_f64());

    stage("untargeted queries");
    let started = Instant::now();
    let full = queries(&explainer, &items, &all, &opt);
    let secs = started.elapsed().as_secs_f64();
    let rate = success(&full);
    rep.primary(
        "success rate",
        rate >= 0.99 && secs <= 600.0,
        format!("{rate:.3} over {} queries in {secs:.0} s (need >= 0.99 within 600 s)", full.len()),
    );

    stage("targeted queries");
    let spec = |classes: &[u8]| RegionTargetSpec::new(classes.iter().copied(), profile.num_classes).expect("valid classes");
    let decisive = queries(&explainer, &items, &spec(&[synth::LIGHT, synth::OBSTACLE]), &opt);
    let light = queries(&explainer, &items, &spec(&[synth::LIGHT]), &opt);
    let distractor = queries(&explainer, &items, &spec(&[synth::SIGN]), &opt);
    let mut mixed = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for it in items.iter().take(50) {
        let classes: Vec<u8> = (1..=profile.num_classes as u8).filter(|_| rng.random_bool(0.5)).collect();
        mixed.extend(queries(&explainer, &[*it], &spec(&classes), &opt));
    }
    let runs = [&full, &decisive, &light, &distractor, &mixed];
    let violations: usize = runs.iter().map(|r| invariance_violations(r)).sum();
    let checked: usize = runs.iter().map(|r| r.len()).sum();
    rep.primary(
        "targeting invariance",
        violations == 0,
        format!("{violations} untargeted class codes moved across {checked} runs (need 0, bit-exact)"),
    );

    let toy = common::toy_optimum_comparison();
    let closed = common::toy_closed_form_error();
    rep.primary(
        "toy oracle equivalence",
        toy.code_error < 1e-3 && toy.objective_error < 1e-6 && closed < 1e-8,
        format!(
            "code error {:.2e} (< 1e-3), objective error {:.2e} (< 1e-6), closed-form error {closed:.2e} (< 1e-8)",
            toy.code_error, toy.objective_error
        ),
    );

    let grads = common::objective_gradient_check();
    let worst = grads.relative_errors.iter().copied().fold(0.0, f64::max);
    rep.primary(
        "gradient checks",
        worst < 1e-4 && grads.frozen_exact && grads.relative_errors.len() == 50,
        format!(
            "max relative error {worst:.2e} over {} probes (need < 1e-4); frozen coordinates exactly zero: {}",
            grads.relative_errors.len(),
            grads.frozen_exact
        ),
    );

    stage("layout preservation");
    let layout = layout_preservation(&t.stack, &full).expect("layout");
    rep.primary("layout preservation", layout >= 0.9, format!("mIoU {layout:.3} (need >= 0.9)"));

    stage("lambda sweep and ablation");
    let mut sweep = Vec::new();
    for &lambda in &SWEEP {
        let results = if lambda == opt.lambda {
            full.clone()
        } else {
            queries(&explainer, &items, &all, &OptimizerConfig { lambda, ..opt.clone() })
        };
        sweep.push((lambda, summarize(&format!("lambda={lambda}"), &results, tools).expect("summary")));
    }
    let s0 = &sweep[0].1;
    let s03 = &sweep[2].1;
    let gt = run_queries(&explainer, &items, &all, &opt, MaskSource::GroundTruth).expect("ground-truth queries");
    let fva_gap = s03.identity_preservation.unwrap() - s0.identity_preservation.unwrap();
    let disp_ratio = s0.mean_squared_displacement / s03.mean_squared_displacement;
    let gt_gap = (success(&gt) - rate).abs();
    rep.primary(
        "ablation directionality",
        fva_gap >= 0.15 && disp_ratio >= 2.0 && gt_gap <= 0.02,
        format!(
            "identity preservation +{:.1} points at lambda 0.3 over 0 (need >= 15); displacement ratio {disp_ratio:.2} (need >= 2); ground-truth mask success {:.3} vs {rate:.3} (need within 0.02)",
            100.0 * fva_gap,
            success(&gt)
        ),
    );
    let disps: Vec<f64> = sweep.iter().map(|(_, s)| s.mean_squared_displacement).collect();
    let ordered = disps.windows(2).all(|w| w[1] <= w[0]);
    rep.primary(
        "lambda sweep ordering",
        ordered && s03.success_rate >= 0.99,
        format!(
            "mean displacement {} over lambda {:?} (need non-increasing); success {:.3} at 0.3 (need >= 0.99)",
            disps.iter().map(|d| format!("{d:.3}")).collect::<Vec<_>>().join(" > "),
            SWEEP,
            s03.success_rate
        ),
    );

    stage("impact tables");
    let class_names: Vec<String> = profile.class_names.clone();
    let mut good_reps = 0;
    let mut notes = Vec::new();
    for (r, models) in t.masked.iter().enumerate() {
        let start = (r * 60) % (val.len() - IMPACT_QUERIES);
        let subset: Vec<&Item> = val[start..start + IMPACT_QUERIES].to_vec();
        let runs: Vec<(String, Vec<CounterfactualResult>)> = models
            .iter()
            .map(|(name, m)| {
                let ex = Explainer::new(&t.stack, m, name.clone()).expect("explainer");
                (name.clone(), queries(&ex, &subset, &all, &opt))
            })
            .collect();
        let refs: Vec<(String, &[CounterfactualResult])> = runs.iter().map(|(n, v)| (n.clone(), v.as_slice())).collect();
        let table = impact_table(&refs, &class_names).expect("impact table");
        let top = table.rank_of(0, "light");
        let bottom = table.rank_of(2, "obstacle");
        let ok = matches!(top, Some(0 | 1)) && matches!(bottom, Some(0 | 1));
        good_reps += usize::from(ok);
        notes.push(format!("seed {r}: light #{} for top, obstacle #{} for bottom", rank(top), rank(bottom)));
    }
    rep.primary(
        "impact table fidelity",
        good_reps >= 4,
        format!("{good_reps}/{REPETITIONS} repetitions rank the visible decisive class in the top 2 (need >= 4); {}", notes.join("; ")),
    );

    stage("metric self-consistency");
    let images: Vec<&ImageTensor> = items.iter().map(|i| &i.image).collect();
    let self_fid = desk_fid(&t.oracle, &images, &images).expect("desk-FID").value;
    let mut frng = ChaCha8Rng::seed_from_u64(23);
    let mut closed_err = 0.0f64;
    for _ in 0..20 {
        let (m1, s1) = random_moments(&mut frng);
        let (m2, s2) = random_moments(&mut frng);
        let got = frechet_from_moments(&m1, &s1, &m2, &s2);
        closed_err = closed_err.max((got - frechet_2x2(&m1, &s1, &m2, &s2)).abs());
    }
    let same: Vec<(&ImageTensor, &ImageTensor)> = images.iter().map(|&i| (i, i)).collect();
    let mnac_same = attributes_changed(Some(&t.oracle), &same).expect("MNAC").value;
    let recon = reconstruction_report(&full, tools).expect("reconstruction report");
    let cf = s03;
    let bounded = recon.identity_preservation.unwrap() >= cf.identity_preservation.unwrap()
        && recon.attributes_changed.unwrap() <= cf.attributes_changed.unwrap()
        && recon.desk_fid.unwrap() <= cf.desk_fid.unwrap();
    rep.primary(
        "metric self-consistency",
        self_fid < 1e-4 && closed_err < 1e-3 && mnac_same == 0.0 && bounded,
        format!(
            "desk_fid(A,A) {self_fid:.2e} (< 1e-4); closed-form error {closed_err:.2e} (< 1e-3); identity-pair MNAC {mnac_same}; reconstruction vs counterfactual: preservation {:.3} >= {:.3}, MNAC {:.3} <= {:.3}, desk-FID {:.2} <= {:.2}",
            recon.identity_preservation.unwrap(),
            cf.identity_preservation.unwrap(),
            recon.attributes_changed.unwrap(),
            cf.attributes_changed.unwrap(),
            recon.desk_fid.unwrap(),
            cf.desk_fid.unwrap()
        ),
    );

    stage("determinism");
    let stack_again = SemanticStack::load(&root.join("segmenter"), &root.join("autoencoder")).expect("stack reloads");
    let (model_again, _) = DecisionModel::load(&root.join("classifier-full")).expect("classifier reloads");
    let again_ex = Explainer::new(&stack_again, &model_again, "full").expect("explainer");
    let again = queries(&again_ex, &items[..DETERMINISM_QUERIES], &all, &opt);
    let mismatched = again.iter().zip(&full).filter(|(a, b)| result_digest(a) != result_digest(b)).count();
    rep.primary(
        "determinism",
        mismatched == 0,
        format!("{mismatched}/{DETERMINISM_QUERIES} result digests differ after reloading from disk (need 0)"),
    );

    stage("supplementary checks");
    let balance = ds.manifest.label_balance();
    rep.derived(
        "label balance",
        balance.iter().all(|b| (0.45..=0.55).contains(b)),
        format!("label shares {balance:.3?} (need 0.45-0.55)"),
    );
    let seg_miou = segmenter_miou(&t.stack.segmenter, &val).expect("mIoU");
    rep.derived("segmenter mIoU", seg_miou >= 0.95, format!("{seg_miou:.3} on validation (need >= 0.95)"));
    let mae = reconstruction_mae(&t.stack.autoencoder, &val).expect("MAE");
    rep.derived("reconstruction error", mae <= 0.05, format!("mean absolute error {mae:.4} (need <= 0.05)"));
    let rec_fva = recon.identity_preservation.unwrap();
    rep.derived("reconstruction identity", rec_fva >= 0.99, format!("identity preservation {rec_fva:.3} (need >= 0.99)"));
    let acc = t.full.accuracy(&val);
    rep.derived("classifier accuracy", acc >= 0.95, format!("{acc:.3} on validation (need >= 0.95)"));
    let (sd, sl, sg) = (success(&decisive), success(&light), success(&distractor));
    rep.derived(
        "decisive-region targeting",
        sd >= 0.9 && sg < sd,
        format!("light+obstacle {sd:.3} (need >= 0.9), light only {sl:.3}, sign only {sg:.3} (need below decisive)"),
    );
    let unrelated: Vec<(&ImageTensor, &ImageTensor)> =
        (0..items.len()).map(|i| (&items[i].image, &items[(i + 1) % items.len()].image)).collect();
    let unrelated_fva = identity_preservation(Some(&t.embedder), &unrelated).expect("preservation").value;
    rep.derived("unrelated-pair identity", unrelated_fva < 0.2, format!("preservation {unrelated_fva:.3} on shifted pairs (need < 0.2)"));
    let mut flipped = Vec::new();
    for (i, it) in items.iter().enumerate() {
        let mut scene = it.meta.scene.clone().expect("synthetic scenes keep their spec");
        let before = render_scene(&scene, &profile).expect("renders").image;
        set_attribute(&mut scene, i % synth::ATTRIBUTE_NAMES.len());
        flipped.push((before, render_scene(&scene, &profile).expect("renders").image));
    }
    let pairs: Vec<(&ImageTensor, &ImageTensor)> = flipped.iter().map(|(a, b)| (a, b)).collect();
    let one_flip = attributes_changed(Some(&t.oracle), &pairs).expect("MNAC").value;
    rep.derived("one-flip MNAC", (one_flip - 1.0).abs() <= 0.5, format!("{one_flip:.3} (need 1 +- 0.5)"));
    stage("lambda collapse");
    let collapse = queries(&explainer, &items, &all, &OptimizerConfig { lambda: COLLAPSE_LAMBDA, ..opt.clone() });
    let sc = success(&collapse);
    rep.derived("lambda collapse", sc < 0.5, format!("success {sc:.3} at lambda {COLLAPSE_LAMBDA} (need < 0.5)"));
    rep.derived(
        "objective decrease",
        s03.objective_decrease_rate == 1.0,
        format!("final objective <= initial in {:.3} of runs (need 1)", s03.objective_decrease_rate),
    );

    println!();
    println!("acceptance ({:.0} s)", clock.elapsed().as_secs_f64());
    for primary in [true, false] {
        println!("{}", if primary { "primary criteria" } else { "supplementary criteria" });
        for l in rep.lines.iter().filter(|l| l.primary == primary) {
            println!("  [{}] {}: {}", if l.pass { "PASS" } else { "FAIL" }, l.name, l.detail);
        }
    }
    let failed = rep.lines.iter().filter(|l| !l.pass).count();
    println!("{} passed, {failed} failed", rep.lines.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn rank(r: Option<usize>) -> String {
    r.map_or("-".into(), |i| (i + 1).to_string())
}

fn random_moments(rng: &mut ChaCha8Rng) -> (DVector<f64>, DMatrix<f64>) {
    let a = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-1.5..1.5));
    let s = a.transpose() * &a + DMatrix::identity(2, 2) * 0.1;
    (DVector::from_fn(2, |_, _| rng.random_range(-2.0..2.0)), s)
}

/// `tr √(Σ1 Σ2) = √(tr P + 2 √det P)` for 2×2 `P = Σ1 Σ2`.
fn frechet_2x2(m1: &DVector<f64>, s1: &DMatrix<f64>, m2: &DVector<f64>, s2: &DMatrix<f64>) -> f64 {
    let p = s1 * s2;
    let (tr, det) = (p[(0, 0)] + p[(1, 1)], p[(0, 0)] * p[(1, 1)] - p[(0, 1)] * p[(1, 0)]);
    (m1 - m2).norm_squared() + s1.trace() + s2.trace() - 2.0 * (tr + 2.0 * det.max(0.0).sqrt()).sqrt()
}

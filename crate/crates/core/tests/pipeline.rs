//! End-to-end behavior of fitting, fusion and the benchmark on synthetic faces.

use std::sync::OnceLock;

use morphfit::bench::{run_benchmark, synth_instance, BenchConfig, SynthSpec};
use morphfit::pifr::pifr_from_original;
use morphfit::*;
use nalgebra::Vector2;

fn model() -> &'static MorphableModel {
    static M: OnceLock<MorphableModel> = OnceLock::new();
    M.get_or_init(|| make_synthetic_model(3, 200, 10, 5, 40).unwrap())
}

fn spec(yaw: (f64, f64), noise: f64, occlude: bool) -> SynthSpec {
    SynthSpec {
        yaw_deg: yaw,
        noise_frac: noise,
        occlude,
        ..SynthSpec::default()
    }
}

/// The fit objective written out directly: project, difference, square, add priors.
fn naive_objective(m: &MorphableModel, obs: &LandmarkSet, weights: &[f64], cfg: &FitConfig, x: &[f64]) -> f64 {
    let p = ParamVector::from_slice(x, m.d_id(), m.d_exp()).unwrap();
    let proj = project(m, &p.coeffs, &p.pose).unwrap();
    let mut total = 0.0;
    for (j, w) in weights.iter().enumerate() {
        if obs.is_visible(j) {
            total += w.powi(2) * (proj.points()[j] - obs.points()[j]).norm_squared();
        }
    }
    for (a, s) in p.coeffs.alpha_id.iter().zip(m.id_sigma().iter()) {
        total += cfg.lambda_id * (a / s).powi(2);
    }
    for (a, s) in p.coeffs.alpha_exp.iter().zip(m.exp_sigma().iter()) {
        total += cfg.lambda_exp * (a / s).powi(2);
    }
    total
}

fn fd_gradient(obj: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let h = 1e-6 * x[i].abs().max(1.0);
            let (mut a, mut b) = (x.to_vec(), x.to_vec());
            a[i] += h;
            b[i] -= h;
            (obj(&a) - obj(&b)) / (2.0 * h)
        })
        .collect()
}

fn amax(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

#[test]
fn unweighted_fit_is_a_stationary_point_of_the_plain_objective() {
    let m = model();
    for seed in 0..5 {
        let inst = synth_instance(m, seed, &spec((20.0, 50.0), 0.02, true)).unwrap();
        let cfg = FitConfig {
            reweight: false,
            max_outer: 60,
            tol: 0.0,
            ..FitConfig::default()
        };
        let res = fit(m, &inst.observed, &cfg).unwrap();
        let unit: Vec<f64> = inst.observed.visibility().iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
        assert_eq!(res.weights, unit);

        let obj = |x: &[f64]| naive_objective(m, &inst.observed, &unit, &cfg, x);
        let x = res.params.to_vec();
        assert!((obj(&x) - res.weighted_loss).abs() <= 1e-9 * res.weighted_loss.max(1.0));

        let start = pose_init(&inst.observed, &m.landmarks_3d(&Coefficients::zeros(m)).unwrap()).unwrap();
        let x0 = ParamVector::new(start, Coefficients::zeros(m)).to_vec();
        let g_end = amax(&fd_gradient(obj, &x));
        let g_start = amax(&fd_gradient(obj, &x0));
        assert!(g_end < 1e-4 * g_start, "seed {seed}: |g| {g_end:e} vs start {g_start:e}");
    }
}

#[test]
fn invisible_landmarks_are_ignored_bit_for_bit() {
    let m = model();
    let inst = synth_instance(m, 9, &spec((60.0, 80.0), 0.02, true)).unwrap();
    assert!(inst.observed.visible_count() < inst.observed.len());
    for garbage in [1e6, -3.5, f64::NAN] {
        let pts: Vec<Vector2<f64>> = inst
            .observed
            .points()
            .iter()
            .enumerate()
            .map(|(j, p)| if inst.observed.is_visible(j) { *p } else { Vector2::new(garbage, -garbage) })
            .collect();
        let scrambled = LandmarkSet::new(pts, inst.observed.visibility().to_vec()).unwrap();
        let a = fit(m, &inst.observed, &FitConfig::default()).unwrap();
        let b = fit(m, &scrambled, &FitConfig::default()).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn noiseless_round_trip_recovers_landmarks() {
    let m = model();
    let cfg = FitConfig {
        lambda_id: 1e-8,
        lambda_exp: 1e-8,
        max_outer: 30,
        ..FitConfig::default()
    };
    for seed in 0..20 {
        let inst = synth_instance(m, seed, &spec((0.0, 60.0), 0.0, false)).unwrap();
        let res = fit(m, &inst.observed, &cfg).unwrap();
        let diag = inst.truth_landmarks.bbox_diagonal();
        assert!(res.loss < 1e-6 * diag, "seed {seed}: loss {} diag {diag}", res.loss);
    }
}

#[test]
fn objective_never_increases_within_an_outer_iteration() {
    let m = model();
    for seed in 0..30 {
        let inst = synth_instance(m, seed, &spec((0.0, 90.0), 0.03, true)).unwrap();
        let res = fit(m, &inst.observed, &FitConfig::default()).unwrap();
        for s in &res.trace {
            assert!(s.after_pose <= s.start && s.after_id <= s.after_pose && s.after_exp <= s.after_id, "{s:?}");
        }
    }
}

#[test]
fn frontalize_already_frontal_fit_is_identity() {
    let m = model();
    let inst = synth_instance(m, 4, &SynthSpec { yaw_deg: (0.0, 0.0), pitch_deg: 0.0, roll_deg: 0.0, ..SynthSpec::default() }).unwrap();
    let fake = FitResult {
        params: inst.truth.clone(),
        residuals: vec![0.0; 40],
        loss: 0.0,
        weighted_loss: 0.0,
        weights: vec![1.0; 40],
        iterations: 0,
        converged: true,
        trace: vec![],
    };
    let front = frontalize(m, &fake).unwrap();
    assert_eq!(front.visible_count(), front.len());
    for (a, b) in front.points().iter().zip(inst.truth_landmarks.points()) {
        assert!((a - b).amax() < 1e-9 * (1.0 + b.amax()));
    }
}

#[test]
fn frontalized_yaw_70_matches_frontal_projection_of_truth() {
    let m = model();
    let inst = synth_instance(m, 12, &spec((70.0, 70.0), 0.0, true)).unwrap();
    let cfg = FitConfig { lambda_id: 1e-8, lambda_exp: 1e-8, max_outer: 30, ..FitConfig::default() };
    let res = fit(m, &inst.observed, &cfg).unwrap();
    let front = frontalize(m, &res).unwrap();
    assert!(front.visibility().iter().all(|&v| v));

    let truth_fit = FitResult { params: inst.truth.clone(), ..res.clone() };
    let truth_front = frontalize(m, &truth_fit).unwrap();
    let diag = truth_front.bbox_diagonal();
    let rms = (front
        .points()
        .iter()
        .zip(truth_front.points())
        .map(|(a, b)| (a - b).norm_squared())
        .sum::<f64>()
        / front.len() as f64)
        .sqrt();
    assert!(rms < 0.05 * diag, "rms {rms} diag {diag}");
}

#[test]
fn pifr_on_noiseless_frontal_face_agrees_with_single_fit() {
    let m = model();
    let frontal = SynthSpec { yaw_deg: (0.0, 0.0), pitch_deg: 0.0, roll_deg: 0.0, ..SynthSpec::default() };
    let inst = synth_instance(m, 21, &frontal).unwrap();
    let cfg = FitConfig::default();
    let single = fit(m, &inst.observed, &cfg).unwrap();
    let out = pifr_fit(m, &inst.observed, &cfg, &PifrOptions::default()).unwrap();
    let (a, b) = (single.params.to_vec(), out.fused.to_vec());
    for (i, (x, y)) in a.iter().zip(&b).enumerate() {
        assert!((x - y).abs() <= 1e-3 * (1.0 + x.abs()), "entry {i}: {x} vs {y}");
    }
    let sum = out.w1 + out.w2;
    assert!((sum - 1.0).abs() < 1e-15);
}

#[test]
fn pifr_with_zero_losses_uses_even_split() {
    let m = model();
    let inst = synth_instance(m, 2, &spec((10.0, 10.0), 0.0, false)).unwrap();
    let mut original = fit(m, &inst.observed, &FitConfig::default()).unwrap();
    original.params = inst.truth.clone();
    original.loss = 0.0;
    let front = frontalize(m, &original).unwrap();
    let frontal_fit = fit(m, &front, &FitConfig::default()).unwrap();
    let r = fuse(&frontal_fit.params, 0.0, &original.params, 0.0, FusionMode::Full).unwrap();
    assert_eq!((r.w1, r.w2), (0.5, 0.5));
    let via = pifr_from_original(m, original, &FitConfig::default(), &PifrOptions::default()).unwrap();
    assert!(via.w1 >= 0.0 && via.w2 >= 0.0);
}

#[test]
fn large_yaw_instances_are_partly_occluded() {
    let m = make_synthetic_model(1, 500, 40, 10, 68).unwrap();
    for seed in 0..100 {
        let inst = synth_instance(&m, seed, &spec((60.0, 90.0), 0.0, true)).unwrap();
        let hidden = inst.observed.len() - inst.observed.visible_count();
        assert!(hidden * 5 >= inst.observed.len(), "seed {seed}: {hidden} hidden");
    }
}

#[test]
fn single_trial_noiseless_benchmark_is_near_exact() {
    let m = model();
    let cfg = BenchConfig {
        trials_per_bin: 1,
        synth: spec((0.0, 0.0), 0.0, false),
        fit: FitConfig { lambda_id: 1e-8, lambda_exp: 1e-8, max_outer: 30, ..FitConfig::default() },
        ..BenchConfig::default()
    };
    let report = run_benchmark(m, &cfg).unwrap();
    for t in &report.trials {
        let inst = synth_instance(m, t.seed, &SynthSpec { yaw_deg: morphfit::bench::YAW_BINS[t.bin], ..cfg.synth.clone() }).unwrap();
        let diag = inst.truth_landmarks.bbox_diagonal();
        for (method, v) in t.mem.iter().enumerate() {
            assert!(*v < 1e-4 * diag, "bin {} method {method}: {v} vs diag {diag}", t.bin);
        }
    }
}

#[test]
fn benchmark_is_independent_of_worker_count() {
    let m = model();
    let base = BenchConfig { trials_per_bin: 6, master_seed: 77, ..BenchConfig::default() };
    let one = run_benchmark(m, &BenchConfig { workers: 1, ..base.clone() }).unwrap();
    let four = run_benchmark(m, &BenchConfig { workers: 4, ..base.clone() }).unwrap();
    assert_eq!(one, four);
    assert_eq!(one.to_csv(), four.to_csv());
    let other = run_benchmark(m, &BenchConfig { master_seed: 78, ..base }).unwrap();
    assert_ne!(one.to_csv(), other.to_csv());
}

#[test]
fn model_survives_a_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    model().save(&path).unwrap();
    assert_eq!(&MorphableModel::load(&path).unwrap(), model());
}

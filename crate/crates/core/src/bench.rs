//! Synthetic ground truth, the MEM metric, and the yaw-binned benchmark
//! comparing unweighted fitting, weighted fitting and the dual-fit pipeline.

use std::fmt::Write as _;

use nalgebra::{DVector, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;

use crate::camera::{estimate_visibility, project, LandmarkSet, Pose};
use crate::error::{Error, Result};
use crate::fitter::{fit, FitConfig, ParamVector};
use crate::model::{Coefficients, MorphableModel};
use crate::pifr::{pifr_from_original, PifrOptions};

/// Yaw intervals in degrees; the last one includes its upper bound.
pub const YAW_BINS: [(f64, f64); 3] = [(0.0, 30.0), (30.0, 60.0), (60.0, 90.0)];
pub const BIN_LABELS: [&str; 3] = ["0-30", "30-60", "60-90"];
pub const METHODS: [&str; 3] = ["unweighted", "weighted", "pifr"];

/// Mean Euclidean Metric: `sqrt((1/N) Σ_i Σ_j ‖U_ij − V_ij‖²)`. The landmark
/// sum is not divided by K.
pub fn mem(ground: &[LandmarkSet], estimated: &[LandmarkSet]) -> Result<f64> {
    mem_impl(ground, estimated, false)
}

/// MEM with the landmark sum averaged over K (a per-landmark RMS).
pub fn mem_normalized(ground: &[LandmarkSet], estimated: &[LandmarkSet]) -> Result<f64> {
    mem_impl(ground, estimated, true)
}

fn mem_impl(ground: &[LandmarkSet], estimated: &[LandmarkSet], per_landmark: bool) -> Result<f64> {
    if ground.len() != estimated.len() {
        return Err(Error::invalid(format!(
            "{} ground-truth sets but {} estimates",
            ground.len(),
            estimated.len()
        )));
    }
    if ground.is_empty() {
        return Err(Error::invalid("MEM needs at least one face"));
    }
    let mut total = 0.0;
    for (i, (g, e)) in ground.iter().zip(estimated).enumerate() {
        if g.len() != e.len() {
            return Err(Error::invalid(format!(
                "face {i}: {} ground-truth landmarks but {} estimated",
                g.len(),
                e.len()
            )));
        }
        let sum: f64 = g
            .points()
            .iter()
            .zip(e.points())
            .map(|(u, v)| (u - v).norm_squared())
            .sum();
        total += if per_landmark { sum / g.len() as f64 } else { sum };
    }
    Ok((total / ground.len() as f64).sqrt())
}

/// How synthetic faces are posed and corrupted.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    /// Absolute yaw range in degrees; the sign is drawn separately.
    pub yaw_deg: (f64, f64),
    /// Pitch is uniform in `±pitch_deg`.
    pub pitch_deg: f64,
    /// Roll is uniform in `±roll_deg`.
    pub roll_deg: f64,
    pub scale: (f64, f64),
    /// In-plane translation is uniform in `±translation` (image units) per axis.
    pub translation: f64,
    /// Noise standard deviation as a fraction of the truth bounding-box diagonal.
    pub noise_frac: f64,
    pub occlude: bool,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            yaw_deg: (0.0, 30.0),
            pitch_deg: 10.0,
            roll_deg: 5.0,
            // pixel-like image units: the mean face is ~160-240 px tall
            scale: (80.0, 120.0),
            translation: 50.0,
            noise_frac: 0.0,
            occlude: false,
        }
    }
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        let (lo, hi) = self.yaw_deg;
        let ok = lo.is_finite()
            && hi.is_finite()
            && 0.0 <= lo
            && lo <= hi
            && hi <= 180.0
            && self.pitch_deg.is_finite()
            && self.pitch_deg >= 0.0
            && self.roll_deg.is_finite()
            && self.roll_deg >= 0.0
            && self.scale.0 > 0.0
            && self.scale.0 <= self.scale.1
            && self.scale.1.is_finite()
            && self.translation.is_finite()
            && self.translation >= 0.0
            && self.noise_frac.is_finite()
            && self.noise_frac >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid synthesis ranges: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthInstance {
    pub truth: ParamVector,
    /// Noiseless projection, all visible.
    pub truth_landmarks: LandmarkSet,
    pub observed: LandmarkSet,
    pub seed: u64,
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Draws a random face, pose and noisy observation. Deterministic in `seed`.
pub fn synth_instance(model: &MorphableModel, seed: u64, spec: &SynthSpec) -> Result<SynthInstance> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |sigma: &DVector<f64>| {
        DVector::from_fn(sigma.len(), |m, _| sigma[m] * rng.sample::<f64, _>(StandardNormal))
    };
    let coeffs = Coefficients::new(draw(model.id_sigma()), draw(model.exp_sigma()));

    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let yaw = sign * uniform(&mut rng, spec.yaw_deg.0, spec.yaw_deg.1).to_radians();
    let pitch = uniform(&mut rng, -spec.pitch_deg, spec.pitch_deg).to_radians();
    let roll = uniform(&mut rng, -spec.roll_deg, spec.roll_deg).to_radians();
    let f = uniform(&mut rng, spec.scale.0, spec.scale.1);
    let tu = uniform(&mut rng, -spec.translation, spec.translation) / f;
    let tv = uniform(&mut rng, -spec.translation, spec.translation) / f;
    let pose = Pose::from_in_plane(f, pitch, yaw, roll, tu, tv)?;

    let truth_landmarks = project(model, &coeffs, &pose)?;
    let sigma = spec.noise_frac * truth_landmarks.bbox_diagonal();
    let noisy: Vec<Vector2<f64>> = if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
        truth_landmarks
            .points()
            .iter()
            .map(|p| p + Vector2::new(normal.sample(&mut rng), normal.sample(&mut rng)))
            .collect()
    } else {
        truth_landmarks.points().to_vec()
    };
    let visibility = if spec.occlude {
        estimate_visibility(model, &coeffs, &pose)?
    } else {
        vec![true; noisy.len()]
    };
    Ok(SynthInstance {
        truth: ParamVector::new(pose, coeffs),
        observed: LandmarkSet::new(noisy, visibility)?,
        truth_landmarks,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub trials_per_bin: usize,
    pub master_seed: u64,
    /// Pose ranges, scale and noise; `yaw_deg` is overridden per bin.
    pub synth: SynthSpec,
    /// Shared fit settings; the unweighted baseline forces `reweight = false`
    /// and the other two methods force `reweight = true`.
    pub fit: FitConfig,
    pub pifr: PifrOptions,
    /// Worker threads; 0 lets rayon decide.
    pub workers: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            trials_per_bin: 200,
            master_seed: 0,
            synth: SynthSpec {
                noise_frac: 0.02,
                occlude: true,
                ..SynthSpec::default()
            },
            fit: FitConfig::default(),
            pifr: PifrOptions::default(),
            workers: 0,
        }
    }
}

/// Per-trial errors, indexed by [`METHODS`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialRecord {
    pub bin: usize,
    pub seed: u64,
    pub mem: [f64; 3],
    pub mem_shape: [f64; 3],
    pub mem_exp: [f64; 3],
    pub visible: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinStats {
    pub trials: usize,
    pub mem_mean: f64,
    pub mem_std: f64,
    pub mem_shape: f64,
    pub mem_exp: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    /// `bins[method][bin]`.
    pub bins: [[BinStats; 3]; 3],
    /// Mean and sample standard deviation of the per-bin means, plus the
    /// mean shape/expression columns.
    pub overall: [BinStats; 3],
    pub trials: Vec<TrialRecord>,
}

/// Estimated landmarks: the estimate's coefficients seen from the truth pose.
fn landmarks_at_truth_pose(model: &MorphableModel, truth: &ParamVector, coeffs: &Coefficients) -> Result<LandmarkSet> {
    project(model, coeffs, &truth.pose)
}

fn per_instance_errors(model: &MorphableModel, truth: &ParamVector, estimate: &Coefficients) -> Result<[f64; 3]> {
    let zero_exp = |c: &Coefficients| Coefficients::new(c.alpha_id.clone(), DVector::zeros(c.alpha_exp.len()));
    let zero_id = |c: &Coefficients| Coefficients::new(DVector::zeros(c.alpha_id.len()), c.alpha_exp.clone());
    let pair = |t: &Coefficients, e: &Coefficients| -> Result<f64> {
        mem(
            &[landmarks_at_truth_pose(model, truth, t)?],
            &[landmarks_at_truth_pose(model, truth, e)?],
        )
    };
    Ok([
        pair(&truth.coeffs, estimate)?,
        pair(&zero_exp(&truth.coeffs), &zero_exp(estimate))?,
        pair(&zero_id(&truth.coeffs), &zero_id(estimate))?,
    ])
}

fn run_trial(model: &MorphableModel, config: &BenchConfig, index: usize) -> Result<TrialRecord> {
    let bin = index / config.trials_per_bin;
    let seed = config.master_seed.wrapping_add(index as u64);
    let spec = SynthSpec {
        yaw_deg: YAW_BINS[bin],
        ..config.synth.clone()
    };
    let inst = synth_instance(model, seed, &spec)?;

    let unweighted_cfg = FitConfig {
        reweight: false,
        ..config.fit.clone()
    };
    let weighted_cfg = FitConfig {
        reweight: true,
        ..config.fit.clone()
    };
    let unweighted = fit(model, &inst.observed, &unweighted_cfg)?;
    let weighted = fit(model, &inst.observed, &weighted_cfg)?;
    let options = PifrOptions {
        jitter_seed: config.pifr.jitter_seed.wrapping_add(seed),
        ..config.pifr.clone()
    };
    let weighted_coeffs = weighted.params.coeffs.clone();
    let fused = pifr_from_original(model, weighted, &weighted_cfg, &options)?;

    let estimates = [&unweighted.params.coeffs, &weighted_coeffs, &fused.fused.coeffs];
    let mut record = TrialRecord {
        bin,
        seed,
        mem: [0.0; 3],
        mem_shape: [0.0; 3],
        mem_exp: [0.0; 3],
        visible: inst.observed.visible_count(),
    };
    for (m, est) in estimates.iter().enumerate() {
        let [total, shape, exp] = per_instance_errors(model, &inst.truth, est)?;
        record.mem[m] = total;
        record.mem_shape[m] = shape;
        record.mem_exp[m] = exp;
    }
    Ok(record)
}

fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}

/// Pools per-face MEM values the same way MEM pools faces: `sqrt(mean(mem_i²))`.
fn pooled(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v * v, n + 1));
    (sum / n as f64).sqrt()
}

/// Runs every bin and method. Trial `i` (counted across bins) uses seed
/// `master_seed + i`, so results do not depend on the worker count.
pub fn run_benchmark(model: &MorphableModel, config: &BenchConfig) -> Result<BenchReport> {
    if config.trials_per_bin == 0 {
        return Err(Error::invalid("trials_per_bin must be at least 1"));
    }
    config.fit.validate()?;
    config.synth.validate()?;
    let total = YAW_BINS.len() * config.trials_per_bin;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    let trials: Vec<TrialRecord> = pool.install(|| {
        (0..total)
            .into_par_iter()
            .map(|i| run_trial(model, config, i))
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(summarize(trials))
}

fn summarize(trials: Vec<TrialRecord>) -> BenchReport {
    let empty = BinStats {
        trials: 0,
        mem_mean: 0.0,
        mem_std: 0.0,
        mem_shape: 0.0,
        mem_exp: 0.0,
    };
    let mut bins = [[empty; 3]; 3];
    let mut overall = [empty; 3];
    for m in 0..METHODS.len() {
        for (b, stats) in bins[m].iter_mut().enumerate() {
            let rows: Vec<&TrialRecord> = trials.iter().filter(|t| t.bin == b).collect();
            let mems: Vec<f64> = rows.iter().map(|t| t.mem[m]).collect();
            *stats = BinStats {
                trials: rows.len(),
                mem_mean: pooled(mems.iter().copied()),
                mem_std: sample_std(&mems),
                mem_shape: pooled(rows.iter().map(|t| t.mem_shape[m])),
                mem_exp: pooled(rows.iter().map(|t| t.mem_exp[m])),
            };
        }
        let means: Vec<f64> = bins[m].iter().map(|s| s.mem_mean).collect();
        let avg = |f: fn(&BinStats) -> f64| bins[m].iter().map(f).sum::<f64>() / 3.0;
        overall[m] = BinStats {
            trials: bins[m].iter().map(|s| s.trials).sum(),
            mem_mean: avg(|s| s.mem_mean),
            mem_std: sample_std(&means),
            mem_shape: avg(|s| s.mem_shape),
            mem_exp: avg(|s| s.mem_exp),
        };
    }
    BenchReport { bins, overall, trials }
}

fn sig6(v: f64) -> String {
    format!("{v:.5e}")
}

impl BenchReport {
    /// CSV with header `method,bin,trials,mem_mean,mem_std,mem_shape,mem_exp`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,bin,trials,mem_mean,mem_std,mem_shape,mem_exp\n");
        for (m, method) in METHODS.iter().enumerate() {
            let rows = self.bins[m].iter().zip(BIN_LABELS).chain(std::iter::once((&self.overall[m], "overall")));
            for (s, label) in rows {
                let _ = writeln!(
                    out,
                    "{method},{label},{},{},{},{},{}",
                    s.trials,
                    sig6(s.mem_mean),
                    sig6(s.mem_std),
                    sig6(s.mem_shape),
                    sig6(s.mem_exp)
                );
            }
        }
        out
    }

    /// Per-trial MEM of method `m` in bin `b`, in trial order.
    pub fn bin_mems(&self, method: usize, bin: usize) -> Vec<f64> {
        self.trials.iter().filter(|t| t.bin == bin).map(|t| t.mem[method]).collect()
    }
}

/// Paired one-sided sign test of "`a` is smaller than `b`".
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignTest {
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    /// `P(X >= wins)` for `X ~ Binomial(wins + losses, 1/2)`.
    pub p_value: f64,
}

pub fn sign_test(a: &[f64], b: &[f64]) -> SignTest {
    let (mut wins, mut losses, mut ties) = (0, 0, 0);
    for (x, y) in a.iter().zip(b) {
        match x.partial_cmp(y) {
            Some(std::cmp::Ordering::Less) => wins += 1,
            Some(std::cmp::Ordering::Greater) => losses += 1,
            _ => ties += 1,
        }
    }
    SignTest {
        wins,
        losses,
        ties,
        p_value: binomial_upper_tail(wins + losses, wins),
    }
}

fn binomial_upper_tail(n: usize, k: usize) -> f64 {
    if k == 0 {
        return 1.0;
    }
    let ln2 = std::f64::consts::LN_2;
    // ln C(n, i) built incrementally
    let mut ln_c = 0.0;
    let mut tail = 0.0;
    for i in 0..=n {
        if i > 0 {
            ln_c += ((n - i + 1) as f64).ln() - (i as f64).ln();
        }
        if i >= k {
            tail += (ln_c - n as f64 * ln2).exp();
        }
    }
    tail.min(1.0)
}

//! Weighted landmark fitting.
//!
//! Minimizes
//!
//! ```text
//! Σ_j w_j² ‖f·Π·R·(p_j(α) + t) − u_j‖²  +  λ_id Σ (α_id,m / σ_id,m)²  +  λ_exp Σ (α_exp,m / σ_exp,m)²
//! ```
//!
//! over visible landmarks. The frontal starting pose is first refined from a
//! handful of yaw seeds, keeping the best. The main loop then alternates a
//! damped Gauss-Newton pose step with
//! closed-form ridge solves for the identity and expression coefficients. The
//! per-landmark weights `w_j` are recomputed from residuals between outer
//! iterations (larger residual, larger weight).

use nalgebra::{DMatrix, DVector, Vector2, Vector3};

use crate::camera::{normalize_angle, rotation_derivatives, rotation_from_euler, LandmarkSet, Pose};
use crate::error::{Error, Result};
use crate::model::{Coefficients, MorphableModel};

/// Minimum number of visible landmarks for a fit.
pub const MIN_VISIBLE: usize = 4;

/// Halvings tried before a pose step is abandoned.
const MAX_HALVINGS: usize = 8;

/// Yaw values (degrees) from which the starting pose is refined before the
/// main loop. Strong yaw has a narrow basin around the true pose when
/// starting from a frontal guess.
const YAW_SEEDS_DEG: [f64; 7] = [0.0, -30.0, 30.0, -60.0, 60.0, -80.0, 80.0];

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub max_outer: usize,
    pub max_pose_iters: usize,
    pub lambda_id: f64,
    pub lambda_exp: f64,
    /// Relative objective decrease below which iteration stops.
    pub tol: f64,
    pub w_min: f64,
    pub w_max: f64,
    /// `false` keeps unit weights throughout (plain landmark fitting).
    pub reweight: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_outer: 5,
            max_pose_iters: 10,
            lambda_id: 1e-3,
            lambda_exp: 1e-3,
            tol: 1e-6,
            w_min: 0.5,
            w_max: 4.0,
            reweight: true,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_outer == 0 || self.max_pose_iters == 0 {
            return Err(Error::invalid("iteration limits must be positive"));
        }
        for (name, v) in [
            ("lambda_id", self.lambda_id),
            ("lambda_exp", self.lambda_exp),
            ("tol", self.tol),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if !(self.w_min.is_finite() && self.w_max.is_finite()) {
            return Err(Error::invalid("weight bounds must be finite"));
        }
        if !(self.w_min > 0.0 && self.w_min <= 1.0 && self.w_max >= 1.0) {
            return Err(Error::invalid(format!(
                "weight bounds must satisfy 0 < w_min <= 1 <= w_max, got [{}, {}]",
                self.w_min, self.w_max
            )));
        }
        Ok(())
    }
}

/// Pose plus coefficients. Flattened order:
/// `[f, pitch, yaw, roll, tx, ty, tz, alpha_id.., alpha_exp..]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub pose: Pose,
    pub coeffs: Coefficients,
}

/// Number of pose entries at the head of a flattened [`ParamVector`].
pub const POSE_LEN: usize = 7;

impl ParamVector {
    pub fn new(pose: Pose, coeffs: Coefficients) -> Self {
        Self { pose, coeffs }
    }

    pub fn len(&self) -> usize {
        POSE_LEN + self.coeffs.alpha_id.len() + self.coeffs.alpha_exp.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let p = &self.pose;
        let mut v = Vec::with_capacity(self.len());
        v.extend([p.f, p.pitch, p.yaw, p.roll, p.t.x, p.t.y, p.t.z]);
        v.extend(self.coeffs.alpha_id.iter());
        v.extend(self.coeffs.alpha_exp.iter());
        v
    }

    pub fn from_slice(values: &[f64], d_id: usize, d_exp: usize) -> Result<Self> {
        if values.len() != POSE_LEN + d_id + d_exp {
            return Err(Error::invalid(format!(
                "parameter vector has {} entries, expected {}",
                values.len(),
                POSE_LEN + d_id + d_exp
            )));
        }
        let pose = Pose::new(
            values[0],
            values[1],
            values[2],
            values[3],
            Vector3::new(values[4], values[5], values[6]),
        )?;
        let alpha_id = DVector::from_column_slice(&values[POSE_LEN..POSE_LEN + d_id]);
        let alpha_exp = DVector::from_column_slice(&values[POSE_LEN + d_id..]);
        Ok(Self::new(pose, Coefficients::new(alpha_id, alpha_exp)))
    }
}

/// Objective values recorded through one outer iteration, all at the same weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepTrace {
    pub start: f64,
    pub after_pose: f64,
    pub after_id: f64,
    pub after_exp: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub params: ParamVector,
    /// Per-landmark 2D distance; 0 for invisible landmarks.
    pub residuals: Vec<f64>,
    /// Unweighted RMS of the visible residuals.
    pub loss: f64,
    /// Weighted objective (including priors) at termination.
    pub weighted_loss: f64,
    /// Weights used in the final iteration.
    pub weights: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<StepTrace>,
}

/// Pose unknowns of the Gauss-Newton step: `[f, pitch, yaw, roll, tu, tv]`,
/// where `(tu, tv) = Π R t` is the in-plane translation.
pub type PoseState = [f64; 6];

pub fn pose_state(pose: &Pose) -> PoseState {
    let uv = pose.in_plane_translation();
    [pose.f, pose.pitch, pose.yaw, pose.roll, uv.x, uv.y]
}

pub fn pose_from_state(s: &PoseState) -> Result<Pose> {
    Pose::from_in_plane(s[0], s[1], s[2], s[3], s[4], s[5])
}

/// Weighted reprojection residuals `w_j (f (Π R p_j + tuv) − u_j)`, stacked
/// as `[u0, v0, u1, v1, ...]`; rows of invisible landmarks are zero.
pub fn pose_residuals(
    points: &[Vector3<f64>],
    observed: &LandmarkSet,
    weights: &[f64],
    state: &PoseState,
) -> DVector<f64> {
    let r = rotation_from_euler(state[1], state[2], state[3]);
    let mut out = DVector::zeros(2 * points.len());
    for (j, p) in points.iter().enumerate() {
        if !observed.is_visible(j) {
            continue;
        }
        let q = r * p;
        let obs = observed.points()[j];
        out[2 * j] = weights[j] * (state[0] * (q.x + state[4]) - obs.x);
        out[2 * j + 1] = weights[j] * (state[0] * (q.y + state[5]) - obs.y);
    }
    out
}

/// Analytic Jacobian of [`pose_residuals`] with respect to the [`PoseState`].
pub fn pose_jacobian(
    points: &[Vector3<f64>],
    observed: &LandmarkSet,
    weights: &[f64],
    state: &PoseState,
) -> DMatrix<f64> {
    let f = state[0];
    let r = rotation_from_euler(state[1], state[2], state[3]);
    let dr = rotation_derivatives(state[1], state[2], state[3]);
    let mut jac = DMatrix::zeros(2 * points.len(), 6);
    for (j, p) in points.iter().enumerate() {
        if !observed.is_visible(j) {
            continue;
        }
        let w = weights[j];
        let q = r * p;
        let (ru, rv) = (2 * j, 2 * j + 1);
        jac[(ru, 0)] = w * (q.x + state[4]);
        jac[(rv, 0)] = w * (q.y + state[5]);
        for (k, d) in dr.iter().enumerate() {
            let dq = d * p;
            jac[(ru, 1 + k)] = w * f * dq.x;
            jac[(rv, 1 + k)] = w * f * dq.y;
        }
        jac[(ru, 4)] = w * f;
        jac[(rv, 5)] = w * f;
    }
    jac
}

/// Residual-driven weights: `clamp(r_j / median(r_visible), w_min, w_max)` on
/// visible landmarks, exactly 0 on invisible ones.
pub fn update_weights(residuals: &[f64], visibility: &[bool], config: &FitConfig) -> Vec<f64> {
    let mut visible: Vec<f64> = residuals
        .iter()
        .zip(visibility)
        .filter(|(_, v)| **v)
        .map(|(r, _)| *r)
        .collect();
    let median = median(&mut visible);
    residuals
        .iter()
        .zip(visibility)
        .map(|(&r, &vis)| match (vis, median) {
            (false, _) => 0.0,
            (true, Some(m)) if m > 0.0 => (r / m).clamp(config.w_min, config.w_max),
            (true, _) => 1.0,
        })
        .collect()
}

fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    Some(if values.len().is_multiple_of(2) {
        0.5 * (values[mid - 1] + values[mid])
    } else {
        values[mid]
    })
}

/// Initial pose: zero rotation, scale from the ratio of RMS radii of the
/// visible observed points and the model landmarks' (x, y), translation
/// aligning the centroids.
pub fn pose_init(observed: &LandmarkSet, model_landmarks: &[Vector3<f64>]) -> Result<Pose> {
    if observed.len() != model_landmarks.len() {
        return Err(Error::invalid(format!(
            "{} observed landmarks but {} model landmarks",
            observed.len(),
            model_landmarks.len()
        )));
    }
    let visible: Vec<usize> = (0..observed.len()).filter(|&j| observed.is_visible(j)).collect();
    if visible.len() < MIN_VISIBLE {
        return Err(Error::Infeasible(format!(
            "{} visible landmarks, at least {MIN_VISIBLE} required",
            visible.len()
        )));
    }
    let n = visible.len() as f64;
    let obs_c = visible.iter().map(|&j| observed.points()[j]).sum::<Vector2<f64>>() / n;
    let mod_c = visible
        .iter()
        .map(|&j| model_landmarks[j].xy())
        .sum::<Vector2<f64>>()
        / n;
    let rms = |it: &mut dyn Iterator<Item = f64>| (it.sum::<f64>() / n).sqrt();
    let obs_r = rms(&mut visible.iter().map(|&j| (observed.points()[j] - obs_c).norm_squared()));
    let mod_r = rms(&mut visible.iter().map(|&j| (model_landmarks[j].xy() - mod_c).norm_squared()));
    let spread = |r: f64, floor: f64| r.partial_cmp(&floor) == Some(std::cmp::Ordering::Greater);
    if !spread(obs_r, 1e-12 * (1.0 + obs_c.norm())) || !spread(mod_r, 0.0) {
        return Err(Error::Infeasible("visible landmarks are degenerate (coincident points)".into()));
    }
    let f = obs_r / mod_r;
    let t = obs_c / f - mod_c;
    Pose::new(f, 0.0, 0.0, 0.0, Vector3::new(t.x, t.y, 0.0))
}

/// Landmark rows of the model: `3K` rows each of mean, identity and expression.
struct LandmarkRows {
    mean: DVector<f64>,
    id: DMatrix<f64>,
    exp: DMatrix<f64>,
}

impl LandmarkRows {
    fn new(model: &MorphableModel) -> Self {
        let k = model.n_landmarks();
        let rows: Vec<usize> = model
            .landmark_indices()
            .iter()
            .flat_map(|&i| [3 * i, 3 * i + 1, 3 * i + 2])
            .collect();
        Self {
            mean: DVector::from_fn(3 * k, |r, _| model.mean_shape()[rows[r]]),
            id: model.id_basis().select_rows(rows.iter()),
            exp: model.exp_basis().select_rows(rows.iter()),
        }
    }

    fn points(&self, coeffs: &Coefficients) -> Vec<Vector3<f64>> {
        let mut flat = self.mean.clone();
        flat.gemv(1.0, &self.id, &coeffs.alpha_id, 1.0);
        flat.gemv(1.0, &self.exp, &coeffs.alpha_exp, 1.0);
        flat.as_slice()
            .chunks_exact(3)
            .map(|c| Vector3::new(c[0], c[1], c[2]))
            .collect()
    }
}

#[derive(Clone, Copy)]
enum Block {
    Id,
    Exp,
}

struct Problem<'a> {
    model: &'a MorphableModel,
    rows: LandmarkRows,
    observed: &'a LandmarkSet,
    config: &'a FitConfig,
}

impl Problem<'_> {
    fn prior(&self, coeffs: &Coefficients) -> f64 {
        let term = |a: &DVector<f64>, s: &DVector<f64>| {
            a.iter().zip(s.iter()).map(|(a, s)| (a / s).powi(2)).sum::<f64>()
        };
        self.config.lambda_id * term(&coeffs.alpha_id, self.model.id_sigma())
            + self.config.lambda_exp * term(&coeffs.alpha_exp, self.model.exp_sigma())
    }

    fn data(&self, points: &[Vector3<f64>], weights: &[f64], state: &PoseState) -> f64 {
        pose_residuals(points, self.observed, weights, state).norm_squared()
    }

    fn objective(&self, coeffs: &Coefficients, weights: &[f64], state: &PoseState) -> f64 {
        self.data(&self.rows.points(coeffs), weights, state) + self.prior(coeffs)
    }

    /// Weighted design matrix `w_j f Π R A_j` of one basis (`2K × d`).
    fn design(&self, basis: &DMatrix<f64>, weights: &[f64], state: &PoseState) -> DMatrix<f64> {
        let f = state[0];
        let rot = rotation_from_euler(state[1], state[2], state[3]);
        let k = self.observed.len();
        let mut design = DMatrix::zeros(2 * k, basis.ncols());
        for j in (0..k).filter(|&j| self.observed.is_visible(j)) {
            let a = basis.rows(3 * j, 3);
            for axis in 0..2 {
                let scaled = (rot.row(axis) * a) * (weights[j] * f);
                design.row_mut(2 * j + axis).copy_from(&scaled);
            }
        }
        design
    }

    /// Damped Gauss-Newton step on the pose. The coefficient correction
    /// implied by the same linearization is applied along with it (pose and
    /// shape are strongly coupled through the landmarks, and a pose-only step
    /// zig-zags). Never increases the objective.
    fn pose_step(&self, coeffs: &mut Coefficients, weights: &[f64], state: &mut PoseState) {
        let (d_id, d_exp) = (self.model.d_id(), self.model.d_exp());
        let precision: Vec<f64> = self
            .model
            .id_sigma()
            .iter()
            .map(|s| self.config.lambda_id / (s * s))
            .chain(self.model.exp_sigma().iter().map(|s| self.config.lambda_exp / (s * s)))
            .collect();
        let mut current = self.objective(coeffs, weights, state);
        for _ in 0..self.config.max_pose_iters {
            if current == 0.0 {
                break;
            }
            let points = self.rows.points(coeffs);
            let r = pose_residuals(&points, self.observed, weights, state);
            let mut jac = DMatrix::zeros(r.len(), 6 + d_id + d_exp);
            jac.columns_mut(0, 6)
                .copy_from(&pose_jacobian(&points, self.observed, weights, state));
            jac.columns_mut(6, d_id)
                .copy_from(&self.design(&self.rows.id, weights, state));
            jac.columns_mut(6 + d_id, d_exp)
                .copy_from(&self.design(&self.rows.exp, weights, state));

            let mut normal = jac.transpose() * &jac;
            let mut gradient = jac.transpose() * r;
            let alpha = coeffs.alpha_id.iter().chain(coeffs.alpha_exp.iter());
            for (m, (p, a)) in precision.iter().zip(alpha).enumerate() {
                normal[(6 + m, 6 + m)] += p;
                gradient[6 + m] += p * a;
            }
            let Some(delta) = solve_spd(normal, -gradient) else {
                break;
            };

            let mut step = 1.0;
            let mut accepted = None;
            for _ in 0..=MAX_HALVINGS {
                let mut trial = *state;
                for (x, d) in trial.iter_mut().zip(delta.iter()) {
                    *x += step * d;
                }
                let mut trial_coeffs = coeffs.clone();
                trial_coeffs.alpha_id.axpy(step, &delta.rows(6, d_id), 1.0);
                trial_coeffs.alpha_exp.axpy(step, &delta.rows(6 + d_id, d_exp), 1.0);
                if trial[0] > 0.0 && trial.iter().all(|x| x.is_finite()) && trial_coeffs.is_finite() {
                    for a in &mut trial[1..4] {
                        *a = normalize_angle(*a);
                    }
                    let value = self.objective(&trial_coeffs, weights, &trial);
                    if value < current {
                        accepted = Some((trial, trial_coeffs, value));
                        break;
                    }
                }
                step *= 0.5;
            }
            let Some((trial, trial_coeffs, value)) = accepted else {
                break;
            };
            let decrease = (current - value) / current;
            *state = trial;
            *coeffs = trial_coeffs;
            current = value;
            if decrease < self.config.tol {
                break;
            }
        }
    }

    /// Exact ridge solve for one coefficient block with everything else fixed.
    fn coefficient_step(
        &self,
        block: Block,
        coeffs: &mut Coefficients,
        weights: &[f64],
        state: &PoseState,
    ) {
        let (basis, sigma, lambda, other_basis, other) = match block {
            Block::Id => (
                &self.rows.id,
                self.model.id_sigma(),
                self.config.lambda_id,
                &self.rows.exp,
                &coeffs.alpha_exp,
            ),
            Block::Exp => (
                &self.rows.exp,
                self.model.exp_sigma(),
                self.config.lambda_exp,
                &self.rows.id,
                &coeffs.alpha_id,
            ),
        };
        let d = basis.ncols();
        if d == 0 {
            return;
        }
        let f = state[0];
        let rot = rotation_from_euler(state[1], state[2], state[3]);
        let mut fixed = self.rows.mean.clone();
        fixed.gemv(1.0, other_basis, other, 1.0);

        let design = self.design(basis, weights, state);
        let k = self.observed.len();
        let mut target = DVector::zeros(2 * k);
        for j in (0..k).filter(|&j| self.observed.is_visible(j)) {
            let q = rot * Vector3::new(fixed[3 * j], fixed[3 * j + 1], fixed[3 * j + 2]);
            let obs = self.observed.points()[j];
            target[2 * j] = weights[j] * (obs.x - f * (q.x + state[4]));
            target[2 * j + 1] = weights[j] * (obs.y - f * (q.y + state[5]));
        }
        let mut normal = design.transpose() * &design;
        for m in 0..d {
            normal[(m, m)] += lambda / (sigma[m] * sigma[m]);
        }
        let rhs = design.transpose() * target;
        let Some(solution) = solve_spd(normal, rhs) else {
            return;
        };
        let before = self.objective(coeffs, weights, state);
        let mut trial = coeffs.clone();
        match block {
            Block::Id => trial.alpha_id = solution,
            Block::Exp => trial.alpha_exp = solution,
        }
        // The solve is exact up to rounding; keep the old block if rounding made it worse.
        if self.objective(&trial, weights, state) <= before {
            *coeffs = trial;
        }
    }

    /// Gauss-Newton on the pose alone with fixed landmark points. Returns the
    /// final data term.
    fn refine_pose_only(&self, points: &[Vector3<f64>], weights: &[f64], state: &mut PoseState) -> f64 {
        let mut current = self.data(points, weights, state);
        for _ in 0..self.config.max_pose_iters {
            if current == 0.0 {
                break;
            }
            let r = pose_residuals(points, self.observed, weights, state);
            let jac = pose_jacobian(points, self.observed, weights, state);
            let Some(delta) = solve_spd(jac.transpose() * &jac, -(jac.transpose() * r)) else {
                break;
            };
            let mut step = 1.0;
            let mut accepted = None;
            for _ in 0..=MAX_HALVINGS {
                let mut trial = *state;
                for (x, d) in trial.iter_mut().zip(delta.iter()) {
                    *x += step * d;
                }
                if trial[0] > 0.0 && trial.iter().all(|x| x.is_finite()) {
                    for a in &mut trial[1..4] {
                        *a = normalize_angle(*a);
                    }
                    let value = self.data(points, weights, &trial);
                    if value < current {
                        accepted = Some((trial, value));
                        break;
                    }
                }
                step *= 0.5;
            }
            let Some((trial, value)) = accepted else {
                break;
            };
            let decrease = (current - value) / current;
            *state = trial;
            current = value;
            if decrease < self.config.tol {
                break;
            }
        }
        current
    }

    /// Refines `init` from each yaw seed and keeps the best pose.
    fn seeded_pose(&self, coeffs: &Coefficients, weights: &[f64], init: PoseState) -> PoseState {
        let points = self.rows.points(coeffs);
        let mut best = (f64::INFINITY, init);
        for yaw in YAW_SEEDS_DEG {
            let mut state = init;
            state[2] = yaw.to_radians();
            let value = self.refine_pose_only(&points, weights, &mut state);
            if value < best.0 {
                best = (value, state);
            }
        }
        best.1
    }

    fn residuals(&self, coeffs: &Coefficients, state: &PoseState) -> Vec<f64> {
        let ones = vec![1.0; self.observed.len()];
        let r = pose_residuals(&self.rows.points(coeffs), self.observed, &ones, state);
        (0..self.observed.len())
            .map(|j| Vector2::new(r[2 * j], r[2 * j + 1]).norm())
            .collect()
    }
}

/// Solves a symmetric positive (semi-)definite system, falling back to a
/// pseudo-inverse when Cholesky fails.
fn solve_spd(a: DMatrix<f64>, b: DVector<f64>) -> Option<DVector<f64>> {
    if let Some(chol) = a.clone().cholesky() {
        let x = chol.solve(&b);
        if x.iter().all(|v| v.is_finite()) {
            return Some(x);
        }
    }
    let scale = a.amax();
    let x = a.svd(true, true).solve(&b, 1e-12 * scale.max(f64::MIN_POSITIVE)).ok()?;
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Fits the model to observed 2D landmarks.
pub fn fit(model: &MorphableModel, observed: &LandmarkSet, config: &FitConfig) -> Result<FitResult> {
    config.validate()?;
    let k = model.n_landmarks();
    if observed.len() != k {
        return Err(Error::invalid(format!(
            "observed set has {} landmarks, model has {k}",
            observed.len()
        )));
    }
    if observed.visible_count() < MIN_VISIBLE {
        return Err(Error::Infeasible(format!(
            "{} visible landmarks, at least {MIN_VISIBLE} required",
            observed.visible_count()
        )));
    }

    let problem = Problem {
        model,
        rows: LandmarkRows::new(model),
        observed,
        config,
    };
    let mut coeffs = Coefficients::zeros(model);
    let mut weights: Vec<f64> = observed.visibility().iter().map(|&v| f64::from(u8::from(v))).collect();
    let init = pose_state(&pose_init(observed, &problem.rows.points(&coeffs))?);
    let mut state = problem.seeded_pose(&coeffs, &weights, init);

    let mut trace = Vec::with_capacity(config.max_outer);
    let mut converged = false;
    let mut weighted_loss = problem.objective(&coeffs, &weights, &state);
    for outer in 0..config.max_outer {
        let start = problem.objective(&coeffs, &weights, &state);
        problem.pose_step(&mut coeffs, &weights, &mut state);
        let after_pose = problem.objective(&coeffs, &weights, &state);
        problem.coefficient_step(Block::Id, &mut coeffs, &weights, &state);
        let after_id = problem.objective(&coeffs, &weights, &state);
        problem.coefficient_step(Block::Exp, &mut coeffs, &weights, &state);
        let after_exp = problem.objective(&coeffs, &weights, &state);
        trace.push(StepTrace {
            start,
            after_pose,
            after_id,
            after_exp,
        });
        weighted_loss = after_exp;

        if after_exp == 0.0 || (start - after_exp) <= config.tol * start {
            converged = true;
            break;
        }
        if config.reweight && outer + 1 < config.max_outer {
            let residuals = problem.residuals(&coeffs, &state);
            weights = update_weights(&residuals, observed.visibility(), config);
        }
    }

    let residuals = problem.residuals(&coeffs, &state);
    let visible: Vec<f64> = residuals
        .iter()
        .zip(observed.visibility())
        .filter(|(_, v)| **v)
        .map(|(r, _)| *r)
        .collect();
    let loss = (visible.iter().map(|r| r * r).sum::<f64>() / visible.len() as f64).sqrt();

    Ok(FitResult {
        params: ParamVector::new(pose_from_state(&state)?, coeffs),
        residuals,
        loss,
        weighted_loss,
        weights,
        iterations: trace.len(),
        converged,
        trace,
    })
}

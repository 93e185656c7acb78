//! Dual-fit pipeline: fit the observed landmarks, frontalize the result,
//! fit the frontal landmarks, then blend both parameter sets with weights
//! derived from their losses.

use nalgebra::{Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::camera::{normalize_angle, project, LandmarkSet, Pose};
use crate::error::{Error, Result};
use crate::fitter::{fit, FitConfig, FitResult, ParamVector, POSE_LEN};
use crate::model::{Coefficients, MorphableModel};

/// Below this loss sum both fits count as perfect and get equal weight.
pub const DEGENERATE_LOSS_SUM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FusionMode {
    /// Blend every parameter, pose included.
    #[default]
    Full,
    /// Blend only the coefficients; pose comes from the original-view fit.
    ShapeOnly,
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "shape-only" => Ok(Self::ShapeOnly),
            other => Err(Error::invalid(format!("unknown fusion mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Full => "full",
            Self::ShapeOnly => "shape-only",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PifrOptions {
    pub mode: FusionMode,
    /// Standard deviation of Gaussian jitter added to the frontal landmarks
    /// (simulates re-detection noise). 0 disables it.
    pub jitter_sigma: f64,
    pub jitter_seed: u64,
}

/// Output of [`fuse`].
#[derive(Debug, Clone, PartialEq)]
pub struct Fusion {
    pub fused: ParamVector,
    /// Weight of the frontal-view parameters.
    pub w1: f64,
    /// Weight of the original-view parameters.
    pub w2: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionResult {
    pub fused: ParamVector,
    pub w1: f64,
    pub w2: f64,
    pub frontal_fit: FitResult,
    pub original_fit: FitResult,
}

/// Loss-derived weights: `w1 = 1 − l1/(l1+l2)`, `w2 = 1 − l2/(l1+l2)`,
/// or `(0.5, 0.5)` when both losses vanish.
pub fn fusion_weights(loss1: f64, loss2: f64) -> Result<(f64, f64)> {
    if !(loss1 >= 0.0 && loss2 >= 0.0) || !loss1.is_finite() || !loss2.is_finite() {
        return Err(Error::invalid(format!(
            "losses must be finite and non-negative, got ({loss1}, {loss2})"
        )));
    }
    let sum = loss1 + loss2;
    if sum < DEGENERATE_LOSS_SUM {
        return Ok((0.5, 0.5));
    }
    // 1 − l1/s written as l2/s: same value, and monotone under rounding.
    Ok((loss2 / sum, loss1 / sum))
}

fn blend(w1: f64, a: f64, w2: f64, b: f64) -> f64 {
    if w1 == 1.0 && w2 == 0.0 {
        return a;
    }
    if w2 == 1.0 && w1 == 0.0 {
        return b;
    }
    (w1 * a + w2 * b).clamp(a.min(b), a.max(b))
}

/// Blends angles on the representative of `a` nearest to `b`.
fn blend_angle(w1: f64, a: f64, w2: f64, b: f64) -> f64 {
    let near = b + normalize_angle(a - b);
    normalize_angle(blend(w1, near, w2, b))
}

/// Fuses frontal-view parameters `p1` (loss `loss1`) with original-view
/// parameters `p2` (loss `loss2`).
pub fn fuse(p1: &ParamVector, loss1: f64, p2: &ParamVector, loss2: f64, mode: FusionMode) -> Result<Fusion> {
    if p1.coeffs.alpha_id.len() != p2.coeffs.alpha_id.len()
        || p1.coeffs.alpha_exp.len() != p2.coeffs.alpha_exp.len()
    {
        return Err(Error::invalid("parameter vectors differ in length"));
    }
    let (w1, w2) = fusion_weights(loss1, loss2)?;

    let mix = |a: &nalgebra::DVector<f64>, b: &nalgebra::DVector<f64>| a.zip_map(b, |x, y| blend(w1, x, w2, y));
    let coeffs = Coefficients::new(
        mix(&p1.coeffs.alpha_id, &p2.coeffs.alpha_id),
        mix(&p1.coeffs.alpha_exp, &p2.coeffs.alpha_exp),
    );
    let pose = match mode {
        FusionMode::ShapeOnly => p2.pose,
        FusionMode::Full => {
            let (a, b) = (&p1.pose, &p2.pose);
            Pose::new(
                blend(w1, a.f, w2, b.f),
                blend_angle(w1, a.pitch, w2, b.pitch),
                blend_angle(w1, a.yaw, w2, b.yaw),
                blend_angle(w1, a.roll, w2, b.roll),
                Vector3::from_fn(|i, _| blend(w1, a.t[i], w2, b.t[i])),
            )?
        }
    };
    debug_assert_eq!(p1.len(), POSE_LEN + coeffs.alpha_id.len() + coeffs.alpha_exp.len());
    Ok(Fusion {
        fused: ParamVector::new(pose, coeffs),
        w1,
        w2,
    })
}

/// Reprojects the fitted face at zero rotation, same scale, keeping the
/// projected landmark centroid in place. Expression is left as fitted.
pub fn frontalize(model: &MorphableModel, initial: &FitResult) -> Result<LandmarkSet> {
    let params = &initial.params;
    let original = project(model, &params.coeffs, &params.pose)?;
    let k = original.len() as f64;
    let target = original.points().iter().sum::<Vector2<f64>>() / k;

    let lm = model.landmarks_3d(&params.coeffs)?;
    let centroid = lm.iter().map(|p| p.xy()).sum::<Vector2<f64>>() / k;
    let f = params.pose.f;
    let t = target / f - centroid;
    let frontal = Pose::new(f, 0.0, 0.0, 0.0, Vector3::new(t.x, t.y, 0.0))?;
    project(model, &params.coeffs, &frontal)
}

fn jitter(set: &LandmarkSet, sigma: f64, seed: u64) -> Result<LandmarkSet> {
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = set
        .points()
        .iter()
        .map(|p| p + Vector2::new(normal.sample(&mut rng), normal.sample(&mut rng)))
        .collect();
    LandmarkSet::new(pts, set.visibility().to_vec())
}

/// Continues the pipeline from an existing original-view fit.
pub fn pifr_from_original(
    model: &MorphableModel,
    original_fit: FitResult,
    config: &FitConfig,
    options: &PifrOptions,
) -> Result<FusionResult> {
    let mut frontal = frontalize(model, &original_fit)?;
    if options.jitter_sigma > 0.0 {
        frontal = jitter(&frontal, options.jitter_sigma, options.jitter_seed)?;
    } else if options.jitter_sigma.is_nan() || options.jitter_sigma < 0.0 {
        return Err(Error::invalid("jitter sigma must be non-negative"));
    }
    let frontal_fit = fit(model, &frontal, config)?;
    let Fusion { fused, w1, w2 } = fuse(
        &frontal_fit.params,
        frontal_fit.loss,
        &original_fit.params,
        original_fit.loss,
        options.mode,
    )?;
    Ok(FusionResult {
        fused,
        w1,
        w2,
        frontal_fit,
        original_fit,
    })
}

/// Full pipeline: original fit, frontalization, frontal fit, fusion.
pub fn pifr_fit(
    model: &MorphableModel,
    observed: &LandmarkSet,
    config: &FitConfig,
    options: &PifrOptions,
) -> Result<FusionResult> {
    let original = fit(model, observed, config)?;
    pifr_from_original(model, original, config, options)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::make_synthetic_model;
    use std::f64::consts::PI;

    fn params(seed: f64, yaw: f64) -> ParamVector {
        let m = make_synthetic_model(1, 60, 4, 2, 12).unwrap();
        let mut c = Coefficients::zeros(&m);
        for (i, a) in c.alpha_id.iter_mut().enumerate() {
            *a = seed * (i as f64 + 1.0);
        }
        c.alpha_exp[0] = -seed;
        ParamVector::new(Pose::new(1.0 + seed, 0.1 * seed, yaw, -0.05, Vector3::new(seed, 0.0, -seed)).unwrap(), c)
    }

    #[test]
    fn equal_losses_give_midpoint() {
        let (a, b) = (params(1.0, 0.2), params(3.0, 0.6));
        let r = fuse(&a, 2.0, &b, 2.0, FusionMode::Full).unwrap();
        assert_eq!((r.w1, r.w2), (0.5, 0.5));
        for ((x, y), z) in a.to_vec().iter().zip(b.to_vec()).zip(r.fused.to_vec()) {
            assert!((0.5 * (x + y) - z).abs() < 1e-15);
        }
    }

    #[test]
    fn one_to_three_losses() {
        assert_eq!(fusion_weights(1.0, 3.0).unwrap(), (0.75, 0.25));
    }

    #[test]
    fn zero_frontal_loss_takes_frontal_params() {
        let (a, b) = (params(1.0, 0.2), params(3.0, 0.6));
        let r = fuse(&a, 0.0, &b, 0.7, FusionMode::Full).unwrap();
        assert_eq!(r.w1, 1.0);
        assert_eq!(r.fused, a);
    }

    #[test]
    fn both_losses_zero_split_evenly() {
        assert_eq!(fusion_weights(0.0, 0.0).unwrap(), (0.5, 0.5));
    }

    #[test]
    fn negative_loss_is_rejected() {
        assert!(fusion_weights(-1.0, 1.0).is_err());
        assert!(fusion_weights(1.0, f64::NAN).is_err());
        let (a, b) = (params(1.0, 0.2), params(3.0, 0.6));
        assert!(fuse(&a, -0.1, &b, 1.0, FusionMode::Full).is_err());
    }

    #[test]
    fn shape_only_copies_original_pose() {
        let (a, b) = (params(1.0, 0.2), params(3.0, 0.6));
        let r = fuse(&a, 1.0, &b, 3.0, FusionMode::ShapeOnly).unwrap();
        assert_eq!(r.fused.pose, b.pose);
        assert!((r.fused.coeffs.alpha_id[0] - (0.75 * 1.0 + 0.25 * 3.0)).abs() < 1e-15);
    }

    #[test]
    fn angles_blend_across_the_seam() {
        let a = params(1.0, PI - 0.1);
        let b = params(1.0, -PI + 0.1);
        let r = fuse(&a, 1.0, &b, 1.0, FusionMode::Full).unwrap();
        // midpoint across ±π, not through zero
        assert!((r.fused.pose.yaw.abs() - PI).abs() < 1e-12, "{}", r.fused.pose.yaw);
        let r = fuse(&a, 1.0, &b, 3.0, FusionMode::Full).unwrap();
        assert!((r.fused.pose.yaw - (PI - 0.05)).abs() < 1e-12, "{}", r.fused.pose.yaw);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("full".parse::<FusionMode>().unwrap(), FusionMode::Full);
        assert_eq!("shape-only".parse::<FusionMode>().unwrap(), FusionMode::ShapeOnly);
        assert!("both".parse::<FusionMode>().is_err());
        assert_eq!(FusionMode::ShapeOnly.to_string(), "shape-only");
    }
}

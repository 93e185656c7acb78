//! Linear morphable shape model.
//!
//! A face is `mean + id_basis * alpha_id + exp_basis * alpha_exp`, stored with
//! interleaved vertex layout `(x0, y0, z0, x1, y1, z1, ...)`.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::io::write_atomic;

#[derive(Debug, Clone, PartialEq)]
pub struct MorphableModel {
    n_vertices: usize,
    mean_shape: DVector<f64>,
    id_basis: DMatrix<f64>,
    exp_basis: DMatrix<f64>,
    id_sigma: DVector<f64>,
    exp_sigma: DVector<f64>,
    landmark_indices: Vec<usize>,
    faces: Option<Vec<[usize; 3]>>,
}

/// Identity and expression coefficients for one face.
#[derive(Debug, Clone, PartialEq)]
pub struct Coefficients {
    pub alpha_id: DVector<f64>,
    pub alpha_exp: DVector<f64>,
}

impl Coefficients {
    pub fn new(alpha_id: DVector<f64>, alpha_exp: DVector<f64>) -> Self {
        Self {
            alpha_id,
            alpha_exp,
        }
    }

    pub fn zeros(model: &MorphableModel) -> Self {
        Self {
            alpha_id: DVector::zeros(model.d_id()),
            alpha_exp: DVector::zeros(model.d_exp()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.alpha_id.iter().chain(self.alpha_exp.iter()).all(|v| v.is_finite())
    }
}

impl MorphableModel {
    /// Builds a model and checks every dimensional and numeric invariant.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n_vertices: usize,
        mean_shape: DVector<f64>,
        id_basis: DMatrix<f64>,
        exp_basis: DMatrix<f64>,
        id_sigma: DVector<f64>,
        exp_sigma: DVector<f64>,
        landmark_indices: Vec<usize>,
        faces: Option<Vec<[usize; 3]>>,
    ) -> Result<Self> {
        let model = Self {
            n_vertices,
            mean_shape,
            id_basis,
            exp_basis,
            id_sigma,
            exp_sigma,
            landmark_indices,
            faces,
        };
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<()> {
        let v = |msg: String| Err(Error::Validation(msg));
        let rows = 3 * self.n_vertices;
        if self.n_vertices == 0 {
            return v("n_vertices must be positive".into());
        }
        if self.mean_shape.len() != rows {
            return v(format!(
                "mean_shape has length {}, expected {rows}",
                self.mean_shape.len()
            ));
        }
        if self.id_basis.nrows() != rows || self.exp_basis.nrows() != rows {
            return v(format!(
                "basis row counts ({}, {}) do not match 3*n_vertices = {rows}",
                self.id_basis.nrows(),
                self.exp_basis.nrows()
            ));
        }
        if self.id_sigma.len() != self.id_basis.ncols() {
            return v(format!(
                "id_sigma has length {}, expected d_id = {}",
                self.id_sigma.len(),
                self.id_basis.ncols()
            ));
        }
        if self.exp_sigma.len() != self.exp_basis.ncols() {
            return v(format!(
                "exp_sigma has length {}, expected d_exp = {}",
                self.exp_sigma.len(),
                self.exp_basis.ncols()
            ));
        }
        if let Some(s) = self
            .id_sigma
            .iter()
            .chain(self.exp_sigma.iter())
            .find(|s| !(s.is_finite() && **s > 0.0))
        {
            return v(format!("prior scales must be finite and positive, found {s}"));
        }
        let finite = self.mean_shape.iter().all(|x| x.is_finite())
            && self.id_basis.iter().all(|x| x.is_finite())
            && self.exp_basis.iter().all(|x| x.is_finite());
        if !finite {
            return v("model contains non-finite entries".into());
        }
        if self.landmark_indices.is_empty() {
            return v("landmark_indices must not be empty".into());
        }
        let mut seen = vec![false; self.n_vertices];
        for &idx in &self.landmark_indices {
            if idx >= self.n_vertices {
                return v(format!(
                    "landmark index {idx} out of range for {} vertices",
                    self.n_vertices
                ));
            }
            if seen[idx] {
                return v(format!("landmark index {idx} is repeated"));
            }
            seen[idx] = true;
        }
        if let Some(faces) = &self.faces {
            if let Some(face) = faces.iter().find(|f| f.iter().any(|&i| i >= self.n_vertices)) {
                return v(format!("face {face:?} references a missing vertex"));
            }
        }
        Ok(())
    }

    pub fn n_vertices(&self) -> usize {
        self.n_vertices
    }

    pub fn d_id(&self) -> usize {
        self.id_basis.ncols()
    }

    pub fn d_exp(&self) -> usize {
        self.exp_basis.ncols()
    }

    /// Number of landmarks `K`.
    pub fn n_landmarks(&self) -> usize {
        self.landmark_indices.len()
    }

    pub fn mean_shape(&self) -> &DVector<f64> {
        &self.mean_shape
    }

    pub fn id_basis(&self) -> &DMatrix<f64> {
        &self.id_basis
    }

    pub fn exp_basis(&self) -> &DMatrix<f64> {
        &self.exp_basis
    }

    pub fn id_sigma(&self) -> &DVector<f64> {
        &self.id_sigma
    }

    pub fn exp_sigma(&self) -> &DVector<f64> {
        &self.exp_sigma
    }

    pub fn landmark_indices(&self) -> &[usize] {
        &self.landmark_indices
    }

    pub fn faces(&self) -> Option<&[[usize; 3]]> {
        self.faces.as_deref()
    }

    pub(crate) fn check_coefficients(&self, coeffs: &Coefficients) -> Result<()> {
        if coeffs.alpha_id.len() != self.d_id() || coeffs.alpha_exp.len() != self.d_exp() {
            return Err(Error::invalid(format!(
                "coefficient lengths ({}, {}) do not match model dimensions ({}, {})",
                coeffs.alpha_id.len(),
                coeffs.alpha_exp.len(),
                self.d_id(),
                self.d_exp()
            )));
        }
        Ok(())
    }

    /// Full 3D shape vector `S = S̄ + A_id α_id + A_exp α_exp`.
    pub fn synthesize_shape(&self, coeffs: &Coefficients) -> Result<DVector<f64>> {
        self.check_coefficients(coeffs)?;
        let mut shape = self.mean_shape.clone();
        shape.gemv(1.0, &self.id_basis, &coeffs.alpha_id, 1.0);
        shape.gemv(1.0, &self.exp_basis, &coeffs.alpha_exp, 1.0);
        Ok(shape)
    }

    /// 3D positions of the landmark vertices of the synthesized shape.
    pub fn landmarks_3d(&self, coeffs: &Coefficients) -> Result<Vec<Vector3<f64>>> {
        let shape = self.synthesize_shape(coeffs)?;
        Ok(self
            .landmark_indices
            .iter()
            .map(|&i| vertex(&shape, i))
            .collect())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_json().as_bytes())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: ModelFile = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        raw.into_model()
    }

    /// Serializes with 17 significant digits so every finite double round-trips.
    pub fn to_json(&self) -> String {
        let mut out = String::with_capacity(64 * self.mean_shape.len() * (1 + self.d_id() + self.d_exp()));
        out.push_str("{\n");
        let _ = writeln!(out, "  \"n_vertices\": {},", self.n_vertices);
        let _ = writeln!(out, "  \"d_id\": {},", self.d_id());
        let _ = writeln!(out, "  \"d_exp\": {},", self.d_exp());
        let _ = writeln!(out, "  \"K\": {},", self.n_landmarks());
        out.push_str("  \"mean_shape\": ");
        write_f64_array(&mut out, self.mean_shape.iter());
        out.push_str(",\n  \"id_basis\": ");
        write_columns(&mut out, &self.id_basis);
        out.push_str(",\n  \"exp_basis\": ");
        write_columns(&mut out, &self.exp_basis);
        out.push_str(",\n  \"id_sigma\": ");
        write_f64_array(&mut out, self.id_sigma.iter());
        out.push_str(",\n  \"exp_sigma\": ");
        write_f64_array(&mut out, self.exp_sigma.iter());
        out.push_str(",\n  \"landmark_indices\": [");
        for (i, idx) in self.landmark_indices.iter().enumerate() {
            if i > 0 {
                out.push_str(", ");
            }
            let _ = write!(out, "{idx}");
        }
        out.push(']');
        if let Some(faces) = &self.faces {
            out.push_str(",\n  \"faces\": [");
            for (i, f) in faces.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                let _ = write!(out, "[{}, {}, {}]", f[0], f[1], f[2]);
            }
            out.push(']');
        }
        out.push_str("\n}\n");
        out
    }
}

pub(crate) fn vertex(shape: &DVector<f64>, i: usize) -> Vector3<f64> {
    Vector3::new(shape[3 * i], shape[3 * i + 1], shape[3 * i + 2])
}

fn write_f64_array<'a>(out: &mut String, values: impl Iterator<Item = &'a f64>) {
    out.push('[');
    for (i, v) in values.enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        let _ = write!(out, "{v:.16e}");
    }
    out.push(']');
}

fn write_columns(out: &mut String, m: &DMatrix<f64>) {
    out.push('[');
    for (i, col) in m.column_iter().enumerate() {
        out.push_str(if i > 0 { ",\n    " } else { "\n    " });
        write_f64_array(out, col.iter());
    }
    if m.ncols() > 0 {
        out.push_str("\n  ");
    }
    out.push(']');
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    n_vertices: usize,
    d_id: usize,
    d_exp: usize,
    #[serde(rename = "K")]
    k: usize,
    mean_shape: Vec<f64>,
    id_basis: Vec<Vec<f64>>,
    exp_basis: Vec<Vec<f64>>,
    id_sigma: Vec<f64>,
    exp_sigma: Vec<f64>,
    landmark_indices: Vec<usize>,
    #[serde(default)]
    faces: Option<Vec<[usize; 3]>>,
}

impl ModelFile {
    fn into_model(self) -> Result<MorphableModel> {
        let rows = 3 * self.n_vertices;
        let columns = |name: &str, cols: Vec<Vec<f64>>, d: usize| -> Result<DMatrix<f64>> {
            if cols.len() != d {
                return Err(Error::Validation(format!(
                    "{name} has {} columns, header declares {d}",
                    cols.len()
                )));
            }
            if let Some((j, c)) = cols.iter().enumerate().find(|(_, c)| c.len() != rows) {
                return Err(Error::Validation(format!(
                    "{name} column {j} has length {}, expected {rows}",
                    c.len()
                )));
            }
            let flat: Vec<f64> = cols.into_iter().flatten().collect();
            Ok(DMatrix::from_vec(rows, d, flat))
        };
        let id_basis = columns("id_basis", self.id_basis, self.d_id)?;
        let exp_basis = columns("exp_basis", self.exp_basis, self.d_exp)?;
        if self.landmark_indices.len() != self.k {
            return Err(Error::Validation(format!(
                "landmark_indices has {} entries, header declares K = {}",
                self.landmark_indices.len(),
                self.k
            )));
        }
        MorphableModel::new(
            self.n_vertices,
            DVector::from_vec(self.mean_shape),
            id_basis,
            exp_basis,
            DVector::from_vec(self.id_sigma),
            DVector::from_vec(self.exp_sigma),
            self.landmark_indices,
            self.faces,
        )
    }
}

/// Geometric decay of the per-mode prior scale.
pub const SIGMA_DECAY: f64 = 0.9;

/// Builds a deterministic face-like model: a bumpy ellipsoid with smooth,
/// column-orthonormal deformation bases and landmarks on the front cap.
pub fn make_synthetic_model(
    seed: u64,
    n_vertices: usize,
    d_id: usize,
    d_exp: usize,
    k: usize,
) -> Result<MorphableModel> {
    if n_vertices < 4 {
        return Err(Error::invalid("synthetic model needs at least 4 vertices"));
    }
    if k == 0 || k > n_vertices {
        return Err(Error::invalid(format!(
            "landmark count {k} must be in 1..={n_vertices}"
        )));
    }
    if d_id + d_exp >= 2 * k {
        return Err(Error::invalid(format!(
            "d_id + d_exp = {} must be below 2K = {}",
            d_id + d_exp,
            2 * k
        )));
    }
    // 7 rigid/similarity fields are projected out of the bases.
    if d_id + d_exp + 7 > 3 * n_vertices {
        return Err(Error::invalid("too many modes for the vertex count"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dirs = fibonacci_sphere(n_vertices);

    let radii = Vector3::new(0.75, 1.0, 0.55);
    let surface_bumps: Vec<(Vector3<f64>, Vector3<f64>)> = (0..6)
        .map(|_| (random_unit(&mut rng), random_normal3(&mut rng) * 0.02))
        .collect();
    let mut mean = DVector::zeros(3 * n_vertices);
    for (i, u) in dirs.iter().enumerate() {
        let mut radial = 1.0;
        for (c, g) in &surface_bumps {
            radial += g.norm() * rbf(u, c, 0.5);
        }
        let p = radii.component_mul(u) * radial;
        mean.fixed_rows_mut::<3>(3 * i).copy_from(&p);
    }

    // Rigid motion + scale fields of the mean shape, orthonormalized.
    let mut taken: Vec<DVector<f64>> = Vec::new();
    let mut rigid = Vec::with_capacity(7);
    for axis in 0..3 {
        let mut f = DVector::zeros(3 * n_vertices);
        for i in 0..n_vertices {
            f[3 * i + axis] = 1.0;
        }
        rigid.push(f);
    }
    for axis in 0..3 {
        let w = Vector3::ith(axis, 1.0);
        let mut f = DVector::zeros(3 * n_vertices);
        for i in 0..n_vertices {
            let p = vertex(&mean, i);
            f.fixed_rows_mut::<3>(3 * i).copy_from(&w.cross(&p));
        }
        rigid.push(f);
    }
    rigid.push(mean.clone());
    for f in rigid {
        if let Some(q) = orthonormalize_against(f, &taken) {
            taken.push(q);
        }
    }
    let n_rigid = taken.len();

    let mut columns = Vec::with_capacity(d_id + d_exp);
    while columns.len() < d_id + d_exp {
        let field = smooth_field(&mut rng, &dirs);
        if let Some(q) = orthonormalize_against(field, &taken) {
            taken.push(q.clone());
            columns.push(q);
        }
    }
    debug_assert_eq!(taken.len(), n_rigid + d_id + d_exp);

    let id_basis = DMatrix::from_columns(&columns[..d_id]);
    let exp_basis = DMatrix::from_columns(&columns[d_id..]);
    let root_n = (n_vertices as f64).sqrt();
    let id_sigma = DVector::from_fn(d_id, |m, _| 0.035 * root_n * SIGMA_DECAY.powi(m as i32));
    let exp_sigma = DVector::from_fn(d_exp, |m, _| 0.022 * root_n * SIGMA_DECAY.powi(m as i32));

    let landmark_indices = pick_front_landmarks(&dirs, k);

    MorphableModel::new(
        n_vertices,
        mean,
        id_basis,
        exp_basis,
        id_sigma,
        exp_sigma,
        landmark_indices,
        None,
    )
}

fn fibonacci_sphere(n: usize) -> Vec<Vector3<f64>> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - y * y).max(0.0).sqrt();
            let theta = golden * i as f64;
            // Poles on the y axis keep the face front (+z) densely and evenly sampled.
            Vector3::new(r * theta.cos(), y, r * theta.sin())
        })
        .collect()
}

fn rbf(u: &Vector3<f64>, c: &Vector3<f64>, width: f64) -> f64 {
    (-(u - c).norm_squared() / (2.0 * width * width)).exp()
}

fn random_normal3(rng: &mut impl Rng) -> Vector3<f64> {
    Vector3::new(
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
    )
}

fn random_unit(rng: &mut impl Rng) -> Vector3<f64> {
    loop {
        let v = random_normal3(rng);
        let n = v.norm();
        if n > 1e-6 {
            return v / n;
        }
    }
}

/// Sum of a few Gaussian bumps over the sphere of directions, each carrying a
/// random 3D displacement.
fn smooth_field(rng: &mut impl Rng, dirs: &[Vector3<f64>]) -> DVector<f64> {
    let bumps: Vec<(Vector3<f64>, Vector3<f64>)> = (0..4)
        .map(|_| (random_unit(rng), random_normal3(rng)))
        .collect();
    let mut field = DVector::zeros(3 * dirs.len());
    for (i, u) in dirs.iter().enumerate() {
        let mut d = Vector3::zeros();
        for (c, g) in &bumps {
            d += g * rbf(u, c, 0.35);
        }
        field.fixed_rows_mut::<3>(3 * i).copy_from(&d);
    }
    field
}

/// Two passes of modified Gram-Schmidt; `None` if the vector is (nearly) in the span.
fn orthonormalize_against(mut v: DVector<f64>, basis: &[DVector<f64>]) -> Option<DVector<f64>> {
    let start = v.norm();
    if start == 0.0 {
        return None;
    }
    for _ in 0..2 {
        for q in basis {
            let proj = q.dot(&v);
            v.axpy(-proj, q, 1.0);
        }
    }
    let norm = v.norm();
    if norm < 1e-6 * start {
        return None;
    }
    Some(v / norm)
}

/// Farthest-point sampling over front-facing vertices, seeded at the vertex
/// closest to the +z pole.
fn pick_front_landmarks(dirs: &[Vector3<f64>], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dirs.len()).collect();
    order.sort_by(|&a, &b| dirs[b].z.total_cmp(&dirs[a].z).then(a.cmp(&b)));
    let front = dirs.iter().filter(|u| u.z >= 0.25).count();
    let candidates = &order[..front.max(k)];

    let mut chosen = vec![candidates[0]];
    let mut dist: Vec<f64> = candidates
        .iter()
        .map(|&c| (dirs[c] - dirs[candidates[0]]).norm_squared())
        .collect();
    while chosen.len() < k {
        let (best, _) = dist
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &d)| if d > acc.1 { (i, d) } else { acc });
        let pick = candidates[best];
        chosen.push(pick);
        for (i, &c) in candidates.iter().enumerate() {
            dist[i] = dist[i].min((dirs[c] - dirs[pick]).norm_squared());
        }
    }
    chosen
}

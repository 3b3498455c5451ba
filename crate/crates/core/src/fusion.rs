//! Multi-level feature fusion projector.
//!
//! Shallow and deep encoder features are concatenated, layer-normalized and
//! projected through a two-layer MLP with a GELU in between:
//!
//! ```text
//! x   = [shallow; deep]                          (2d)
//! y   = γ ⊙ (x − mean(x)) / √(var(x) + ε) + β    (population variance)
//! z   = y·W1 + b1                                (h)
//! out = GELU(z)·W2 + b2                          (o)
//! ```
//!
//! [`fuse_backward`] gives analytic gradients of `L = upstream · out` for
//! every parameter and both inputs; [`grad_check`] compares them with
//! central finite differences.
//!
//! GELU is the exact form `x·Φ(x)` with `Φ` the standard normal CDF.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SplitMix64;

#[derive(Debug, Error, PartialEq)]
pub enum FusionError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("epsilon must be positive, got {0}")]
    Epsilon(f64),
    #[error("{0} must be positive")]
    NonPositive(&'static str),
    #[error("expected a {expected:?} feature vector, got {got:?}")]
    LayerTag { expected: LayerTag, got: LayerTag },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerTag {
    Shallow,
    Deep,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    values: Vec<f64>,
    tag: LayerTag,
}

impl FeatureVector {
    pub fn new(values: Vec<f64>, tag: LayerTag) -> Result<Self, FusionError> {
        if values.is_empty() {
            return Err(FusionError::Shape("feature vector is empty".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(FusionError::NonFinite("feature vector"));
        }
        Ok(Self { values, tag })
    }

    pub fn shallow(values: Vec<f64>) -> Result<Self, FusionError> {
        Self::new(values, LayerTag::Shallow)
    }

    pub fn deep(values: Vec<f64>) -> Result<Self, FusionError> {
        Self::new(values, LayerTag::Deep)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn tag(&self) -> LayerTag {
        self.tag
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * c).collect(),
            tag: self.tag,
        }
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, FusionError> {
        if data.len() != rows * cols {
            return Err(FusionError::Shape(format!("{} values for a {rows}x{cols} matrix", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// `v · M` for a row vector `v` of length `rows`.
    fn left_mul(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (r, vr) in v.iter().enumerate() {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            for (o, m) in out.iter_mut().zip(row) {
                *o += vr * m;
            }
        }
        out
    }

    /// `M · g` for a column vector `g` of length `cols`.
    fn right_mul(&self, g: &[f64]) -> Vec<f64> {
        self.data
            .chunks_exact(self.cols)
            .map(|row| row.iter().zip(g).map(|(m, gi)| m * gi).sum())
            .collect()
    }

    /// Outer product `a ⊗ b`.
    fn outer(a: &[f64], b: &[f64]) -> Self {
        let mut data = Vec::with_capacity(a.len() * b.len());
        for ai in a {
            data.extend(b.iter().map(|bj| ai * bj));
        }
        Self {
            rows: a.len(),
            cols: b.len(),
            data,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub ln_gamma: Vec<f64>,
    pub ln_beta: Vec<f64>,
    /// `2d × h`
    pub w1: Matrix,
    pub b1: Vec<f64>,
    /// `h × o`
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub epsilon: f64,
}

pub const DEFAULT_EPSILON: f64 = 1e-5;

impl FusionParams {
    /// Identity LayerNorm affine, zero weights and biases.
    pub fn zeros(d: usize, h: usize, o: usize) -> Self {
        Self {
            ln_gamma: vec![1.0; 2 * d],
            ln_beta: vec![0.0; 2 * d],
            w1: Matrix::zeros(2 * d, h),
            b1: vec![0.0; h],
            w2: Matrix::zeros(h, o),
            b2: vec![0.0; o],
            epsilon: DEFAULT_EPSILON,
        }
    }

    /// Seeded init: weights and biases uniform in ±1/√fan_in; γ uniform in
    /// [0.5, 1.5] and β in [−0.5, 0.5] so the affine part is exercised.
    pub fn random(d: usize, h: usize, o: usize, rng: &mut SplitMix64) -> Self {
        let n = 2 * d;
        let mut fill = |len: usize, bound: f64| -> Vec<f64> { (0..len).map(|_| rng.uniform(-bound, bound)).collect() };
        let b_in = 1.0 / (n as f64).sqrt();
        let b_hid = 1.0 / (h as f64).sqrt();
        let w1 = Matrix {
            rows: n,
            cols: h,
            data: fill(n * h, b_in),
        };
        let b1 = fill(h, b_in);
        let w2 = Matrix {
            rows: h,
            cols: o,
            data: fill(h * o, b_hid),
        };
        let b2 = fill(o, b_hid);
        let ln_gamma = fill(n, 0.5).into_iter().map(|v| 1.0 + v).collect();
        let ln_beta = fill(n, 0.5);
        Self {
            ln_gamma,
            ln_beta,
            w1,
            b1,
            w2,
            b2,
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.ln_gamma.len()
    }

    pub fn hidden_dim(&self) -> usize {
        self.b1.len()
    }

    pub fn output_dim(&self) -> usize {
        self.b2.len()
    }

    pub fn validate(&self) -> Result<(), FusionError> {
        let n = self.ln_gamma.len();
        let (h, o) = (self.b1.len(), self.b2.len());
        let shape = |msg: String| Err(FusionError::Shape(msg));
        if n == 0 || !n.is_multiple_of(2) {
            return shape(format!("layer norm width {n} is not 2d"));
        }
        if self.ln_beta.len() != n {
            return shape(format!("beta has {} entries, gamma {n}", self.ln_beta.len()));
        }
        if self.w1.rows != n || self.w1.cols != h || self.w1.data.len() != n * h {
            return shape(format!("w1 is {}x{}, expected {n}x{h}", self.w1.rows, self.w1.cols));
        }
        if self.w2.rows != h || self.w2.cols != o || self.w2.data.len() != h * o {
            return shape(format!("w2 is {}x{}, expected {h}x{o}", self.w2.rows, self.w2.cols));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(FusionError::Epsilon(self.epsilon));
        }
        Ok(())
    }
}

/// `γ ⊙ (x − mean) / √(var + ε) + β` with population variance.
pub fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], epsilon: f64) -> Result<Vec<f64>, FusionError> {
    if x.len() != gamma.len() || x.len() != beta.len() {
        return Err(FusionError::Shape(format!(
            "x has {} entries, gamma {}, beta {}",
            x.len(),
            gamma.len(),
            beta.len()
        )));
    }
    if x.is_empty() {
        return Err(FusionError::Shape("layer norm of an empty vector".into()));
    }
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(FusionError::Epsilon(epsilon));
    }
    let (xhat, _) = standardize(x, epsilon);
    Ok(xhat.iter().zip(gamma).zip(beta).map(|((v, g), b)| g * v + b).collect())
}

/// Returns `(x̂, 1/√(var + ε))`.
fn standardize(x: &[f64], epsilon: f64) -> (Vec<f64>, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + epsilon).sqrt();
    (x.iter().map(|v| (v - mean) * inv_std).collect(), inv_std)
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU, `x·Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2))
}

/// `Φ(x) + x·φ(x)`.
pub fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * INV_SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Intermediate values kept for the backward pass.
struct Forward {
    xhat: Vec<f64>,
    inv_std: f64,
    y: Vec<f64>,
    z: Vec<f64>,
    a: Vec<f64>,
    out: Vec<f64>,
}

fn check_inputs(shallow: &FeatureVector, deep: &FeatureVector, p: &FusionParams) -> Result<(), FusionError> {
    if shallow.tag != LayerTag::Shallow {
        return Err(FusionError::LayerTag {
            expected: LayerTag::Shallow,
            got: shallow.tag,
        });
    }
    if deep.tag != LayerTag::Deep {
        return Err(FusionError::LayerTag {
            expected: LayerTag::Deep,
            got: deep.tag,
        });
    }
    if shallow.dim() != deep.dim() {
        return Err(FusionError::Shape(format!(
            "shallow has {} features, deep {}",
            shallow.dim(),
            deep.dim()
        )));
    }
    p.validate()?;
    if p.input_dim() != 2 * shallow.dim() {
        return Err(FusionError::Shape(format!(
            "params expect 2d = {}, inputs give d = {}",
            p.input_dim(),
            shallow.dim()
        )));
    }
    Ok(())
}

fn forward(shallow: &FeatureVector, deep: &FeatureVector, p: &FusionParams) -> Forward {
    let x: Vec<f64> = shallow.values.iter().chain(&deep.values).copied().collect();
    let (xhat, inv_std) = standardize(&x, p.epsilon);
    let y: Vec<f64> = xhat
        .iter()
        .zip(&p.ln_gamma)
        .zip(&p.ln_beta)
        .map(|((v, g), b)| g * v + b)
        .collect();
    let z: Vec<f64> = p.w1.left_mul(&y).iter().zip(&p.b1).map(|(v, b)| v + b).collect();
    let a: Vec<f64> = z.iter().map(|v| gelu(*v)).collect();
    let out = p.w2.left_mul(&a).iter().zip(&p.b2).map(|(v, b)| v + b).collect();
    Forward {
        xhat,
        inv_std,
        y,
        z,
        a,
        out,
    }
}

/// Projects the concatenated features to the output width `o`.
pub fn fuse(shallow: &FeatureVector, deep: &FeatureVector, p: &FusionParams) -> Result<Vec<f64>, FusionError> {
    check_inputs(shallow, deep, p)?;
    Ok(forward(shallow, deep, p).out)
}

/// Gradients of `L = upstream · fuse(shallow, deep, p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionGrads {
    pub ln_gamma: Vec<f64>,
    pub ln_beta: Vec<f64>,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub shallow: Vec<f64>,
    pub deep: Vec<f64>,
}

impl FusionGrads {
    /// Every gradient entry, in the same order as [`flat_params`] followed
    /// by shallow then deep inputs.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::new();
        v.extend(&self.ln_gamma);
        v.extend(&self.ln_beta);
        v.extend(&self.w1.data);
        v.extend(&self.b1);
        v.extend(&self.w2.data);
        v.extend(&self.b2);
        v.extend(&self.shallow);
        v.extend(&self.deep);
        v
    }
}

pub fn fuse_backward(
    shallow: &FeatureVector,
    deep: &FeatureVector,
    p: &FusionParams,
    upstream: &[f64],
) -> Result<FusionGrads, FusionError> {
    check_inputs(shallow, deep, p)?;
    if upstream.len() != p.output_dim() {
        return Err(FusionError::Shape(format!(
            "upstream gradient has {} entries, output has {}",
            upstream.len(),
            p.output_dim()
        )));
    }
    let f = forward(shallow, deep, p);

    let g_b2 = upstream.to_vec();
    let g_w2 = Matrix::outer(&f.a, upstream);
    let g_a = p.w2.right_mul(upstream);
    let g_z: Vec<f64> = g_a.iter().zip(&f.z).map(|(g, z)| g * gelu_grad(*z)).collect();
    let g_b1 = g_z.clone();
    let g_w1 = Matrix::outer(&f.y, &g_z);
    let g_y = p.w1.right_mul(&g_z);

    let g_gamma: Vec<f64> = g_y.iter().zip(&f.xhat).map(|(g, x)| g * x).collect();
    let g_beta = g_y.clone();
    let g_xhat: Vec<f64> = g_y.iter().zip(&p.ln_gamma).map(|(g, gm)| g * gm).collect();

    // dx = inv_std · (g − mean(g) − x̂ · mean(g ⊙ x̂))
    let n = g_xhat.len() as f64;
    let mean_g = g_xhat.iter().sum::<f64>() / n;
    let mean_gx = g_xhat.iter().zip(&f.xhat).map(|(g, x)| g * x).sum::<f64>() / n;
    let g_x: Vec<f64> = g_xhat
        .iter()
        .zip(&f.xhat)
        .map(|(g, x)| f.inv_std * (g - mean_g - x * mean_gx))
        .collect();
    let d = shallow.dim();
    Ok(FusionGrads {
        ln_gamma: g_gamma,
        ln_beta: g_beta,
        w1: g_w1,
        b1: g_b1,
        w2: g_w2,
        b2: g_b2,
        shallow: g_x[..d].to_vec(),
        deep: g_x[d..].to_vec(),
    })
}

/// Dimensions for a gradient check instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionDims {
    pub d: usize,
    pub h: usize,
    pub o: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub dims: FusionDims,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    pub coordinates: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    /// Which coordinate produced `max_rel_err`, e.g. `"w1[3]"`.
    pub worst: String,
    pub pass: bool,
}

/// Guards the relative error against 0/0 when both gradients vanish.
pub const REL_ERR_FLOOR: f64 = 1e-12;

/// `|a − n| / max(|a|, |n|, REL_ERR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Every scalar the loss depends on, named, in the order used
/// by [`FusionGrads::flatten`].
fn coordinate_names(p: &FusionParams, d: usize) -> Vec<(&'static str, usize)> {
    let mut v = Vec::new();
    v.extend((0..p.ln_gamma.len()).map(|i| ("ln_gamma", i)));
    v.extend((0..p.ln_beta.len()).map(|i| ("ln_beta", i)));
    v.extend((0..p.w1.data.len()).map(|i| ("w1", i)));
    v.extend((0..p.b1.len()).map(|i| ("b1", i)));
    v.extend((0..p.w2.data.len()).map(|i| ("w2", i)));
    v.extend((0..p.b2.len()).map(|i| ("b2", i)));
    v.extend((0..d).map(|i| ("shallow", i)));
    v.extend((0..d).map(|i| ("deep", i)));
    v
}

fn coordinate<'a>(
    name: &str,
    i: usize,
    p: &'a mut FusionParams,
    s: &'a mut FeatureVector,
    dp: &'a mut FeatureVector,
) -> &'a mut f64 {
    match name {
        "ln_gamma" => &mut p.ln_gamma[i],
        "ln_beta" => &mut p.ln_beta[i],
        "w1" => &mut p.w1.data[i],
        "b1" => &mut p.b1[i],
        "w2" => &mut p.w2.data[i],
        "b2" => &mut p.b2[i],
        "shallow" => &mut s.values[i],
        "deep" => &mut dp.values[i],
        _ => unreachable!("unknown coordinate {name}"),
    }
}

fn loss(s: &FeatureVector, d: &FeatureVector, p: &FusionParams, upstream: &[f64]) -> f64 {
    forward(s, d, p).out.iter().zip(upstream).map(|(o, g)| o * g).sum()
}

/// Seeds a random instance and compares [`fuse_backward`] against central
/// differences `(L(θ+h) − L(θ−h)) / 2h` on every coordinate.
pub fn grad_check(dims: FusionDims, seed: u64, step: f64, tolerance: f64) -> Result<GradCheckReport, FusionError> {
    if step.is_nan() || step <= 0.0 {
        return Err(FusionError::NonPositive("step"));
    }
    if tolerance.is_nan() || tolerance <= 0.0 {
        return Err(FusionError::NonPositive("tolerance"));
    }
    if dims.d == 0 || dims.h == 0 || dims.o == 0 {
        return Err(FusionError::NonPositive("every dimension"));
    }
    let mut rng = SplitMix64::new(seed);
    let mut p = FusionParams::random(dims.d, dims.h, dims.o, &mut rng);
    let mut s = FeatureVector::shallow((0..dims.d).map(|_| rng.uniform(-2.0, 2.0)).collect())?;
    let mut dp = FeatureVector::deep((0..dims.d).map(|_| rng.uniform(-2.0, 2.0)).collect())?;
    let upstream: Vec<f64> = (0..dims.o).map(|_| rng.uniform(-1.0, 1.0)).collect();

    let analytic = fuse_backward(&s, &dp, &p, &upstream)?.flatten();
    let names = coordinate_names(&p, dims.d);
    debug_assert_eq!(names.len(), analytic.len());

    let (mut max_abs, mut max_rel, mut worst) = (0.0f64, 0.0f64, String::new());
    for ((name, i), a) in names.iter().zip(&analytic) {
        let orig = *coordinate(name, *i, &mut p, &mut s, &mut dp);
        *coordinate(name, *i, &mut p, &mut s, &mut dp) = orig + step;
        let up = loss(&s, &dp, &p, &upstream);
        *coordinate(name, *i, &mut p, &mut s, &mut dp) = orig - step;
        let down = loss(&s, &dp, &p, &upstream);
        *coordinate(name, *i, &mut p, &mut s, &mut dp) = orig;
        let numeric = (up - down) / (2.0 * step);
        max_abs = max_abs.max((a - numeric).abs());
        let rel = relative_error(*a, numeric);
        if rel > max_rel || worst.is_empty() {
            max_rel = rel;
            worst = format!("{name}[{i}]");
        }
    }
    Ok(GradCheckReport {
        dims,
        seed,
        step,
        tolerance,
        coordinates: analytic.len(),
        max_abs_err: max_abs,
        max_rel_err: max_rel,
        worst,
        pass: max_rel <= tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ones(n: usize) -> Vec<f64> {
        vec![1.0; n]
    }

    #[test]
    fn constant_input_normalizes_to_zero() {
        let y = layer_norm(&[3.0; 6], &ones(6), &[0.0; 6], 1e-5).unwrap();
        assert!(y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn unit_variance_input_is_unchanged() {
        let y = layer_norm(&[1.0, -1.0], &ones(2), &[0.0; 2], 1e-5).unwrap();
        // 1/√(1 + 1e-5) ≈ 1 − 5e-6
        assert!((y[0] - 1.0).abs() < 1e-5 && (y[1] + 1.0).abs() < 1e-5, "{y:?}");
        assert!((y[0] - 1.0 / (1.0f64 + 1e-5).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_errors() {
        assert!(matches!(layer_norm(&[1.0], &[1.0, 1.0], &[0.0], 1e-5), Err(FusionError::Shape(_))));
        assert!(matches!(layer_norm(&[1.0], &[1.0], &[0.0], 0.0), Err(FusionError::Epsilon(_))));
    }

    #[test]
    fn zeros_propagate() {
        let p = FusionParams::zeros(3, 5, 2);
        let s = FeatureVector::shallow(vec![0.0; 3]).unwrap();
        let d = FeatureVector::deep(vec![0.0; 3]).unwrap();
        assert_eq!(fuse(&s, &d, &p).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_weights_give_gelu_of_layer_norm() {
        // d = 2, so 2d = h = o = 4.
        let mut p = FusionParams::zeros(2, 4, 4);
        p.w1 = Matrix::identity(4);
        p.w2 = Matrix::identity(4);
        let s = FeatureVector::shallow(vec![1.0, 2.0]).unwrap();
        let d = FeatureVector::deep(vec![3.0, 6.0]).unwrap();
        // By hand: mean 3, deviations (−2, −1, 0, 3), variance 14/4 = 3.5.
        let inv = 1.0 / (3.5f64 + 1e-5).sqrt();
        let expected: Vec<f64> = [-2.0, -1.0, 0.0, 3.0].iter().map(|v| gelu(v * inv)).collect();
        let got = fuse(&s, &d, &p).unwrap();
        for (g, e) in got.iter().zip(&expected) {
            assert!((g - e).abs() < 1e-14, "{got:?} vs {expected:?}");
        }
        assert_eq!(got[2], 0.0);
    }

    #[test]
    fn gelu_reference_values() {
        assert_eq!(gelu(0.0), 0.0);
        // Φ(1) = 0.8413447460685429
        assert!((gelu(1.0) - 0.841_344_746_068_542_9).abs() < 1e-15);
        assert!((gelu(-1.0) + 0.158_655_253_931_457_05).abs() < 1e-15);
    }

    #[test]
    fn swapping_levels_changes_output() {
        let mut rng = SplitMix64::new(11);
        let p = FusionParams::random(4, 8, 4, &mut rng);
        let a: Vec<f64> = (0..4).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let b: Vec<f64> = (0..4).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let fwd = fuse(&FeatureVector::shallow(a.clone()).unwrap(), &FeatureVector::deep(b.clone()).unwrap(), &p).unwrap();
        let swapped = fuse(&FeatureVector::shallow(b).unwrap(), &FeatureVector::deep(a).unwrap(), &p).unwrap();
        assert!(fwd.iter().zip(&swapped).any(|(x, y)| (x - y).abs() > 1e-6));
    }

    #[test]
    fn shape_and_tag_errors() {
        let p = FusionParams::zeros(3, 2, 2);
        let s = FeatureVector::shallow(vec![0.0; 3]).unwrap();
        let d4 = FeatureVector::deep(vec![0.0; 4]).unwrap();
        assert!(matches!(fuse(&s, &d4, &p), Err(FusionError::Shape(_))));
        let wrong = FeatureVector::deep(vec![0.0; 3]).unwrap();
        assert!(matches!(fuse(&wrong, &wrong, &p), Err(FusionError::LayerTag { .. })));
        let d = FeatureVector::deep(vec![0.0; 3]).unwrap();
        assert!(matches!(fuse_backward(&s, &d, &p, &[1.0]), Err(FusionError::Shape(_))));
        assert!(FeatureVector::shallow(vec![f64::NAN]).is_err());
    }

    fn instance(seed: u64) -> (FeatureVector, FeatureVector, FusionParams, Vec<f64>) {
        let mut rng = SplitMix64::new(seed);
        let p = FusionParams::random(8, 12, 5, &mut rng);
        let s = FeatureVector::shallow((0..8).map(|_| rng.uniform(-2.0, 2.0)).collect()).unwrap();
        let d = FeatureVector::deep((0..8).map(|_| rng.uniform(-2.0, 2.0)).collect()).unwrap();
        let g = (0..5).map(|_| rng.uniform(-1.0, 1.0)).collect();
        (s, d, p, g)
    }

    #[test]
    fn bias_gradient_is_upstream() {
        let (s, d, p, g) = instance(3);
        assert_eq!(fuse_backward(&s, &d, &p, &g).unwrap().b2, g);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let (s, d, p, _) = instance(4);
        let grads = fuse_backward(&s, &d, &p, &[0.0; 5]).unwrap();
        assert!(grads.flatten().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn grad_check_passes_at_small_step() {
        let r = grad_check(FusionDims { d: 4, h: 8, o: 4 }, 1, 1e-4, 1e-4).unwrap();
        assert!(r.pass, "{r:?}");
        assert_eq!(r.coordinates, 8 + 8 + 64 + 8 + 32 + 4 + 8);
    }

    #[test]
    fn grad_check_fails_at_coarse_step() {
        let r = grad_check(FusionDims { d: 4, h: 8, o: 4 }, 1, 1e-1, 1e-4).unwrap();
        assert!(!r.pass, "{r:?}");
    }

    #[test]
    fn grad_check_is_deterministic() {
        let dims = FusionDims { d: 5, h: 7, o: 3 };
        assert_eq!(grad_check(dims, 9, 1e-4, 1e-4).unwrap(), grad_check(dims, 9, 1e-4, 1e-4).unwrap());
    }

    #[test]
    fn grad_check_rejects_bad_arguments() {
        let dims = FusionDims { d: 2, h: 2, o: 2 };
        assert!(grad_check(dims, 0, 0.0, 1e-4).is_err());
        assert!(grad_check(dims, 0, 1e-4, -1.0).is_err());
    }

    proptest! {
        #[test]
        fn layer_norm_standardizes(x in prop::collection::vec(-100.0f64..100.0, 2..32)) {
            let n = x.len();
            let mean_in = x.iter().sum::<f64>() / n as f64;
            let var_in = x.iter().map(|v| (v - mean_in).powi(2)).sum::<f64>() / n as f64;
            prop_assume!(var_in > 1e-6);
            let eps = 1e-5;
            let y = layer_norm(&x, &ones(n), &vec![0.0; n], eps).unwrap();
            let mean = y.iter().sum::<f64>() / n as f64;
            let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            prop_assert!(mean.abs() <= 1e-9);
            // Exactly var_in / (var_in + ε) in exact arithmetic.
            let expected = var_in / (var_in + eps);
            prop_assert!((var - expected).abs() <= 1e-9 * expected.max(1.0));
        }
    }
}

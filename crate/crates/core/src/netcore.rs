//! Two-layer soft committee machines.
//!
//! Both teacher and student compute `phi(x) = sum_k v_k g(w_k . x / sqrt(N))`
//! with the error-function sigmoid `g(z) = erf(z / sqrt 2)`. That particular
//! sigmoid is what makes the arcsin overlap integrals in
//! [`crate::analytics::ge_closed_form`] exact; a logistic sigmoid would only
//! approximate them.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

const SQRT_2: f64 = std::f64::consts::SQRT_2;
/// sqrt(2 / pi), the slope of `g` at the origin.
pub const ACTIVATION_SLOPE_AT_ZERO: f64 = 0.797_884_560_802_865_4;

/// Hidden-layer activation `g(z) = erf(z / sqrt 2)`.
#[inline]
pub fn activation(z: f64) -> f64 {
    libm::erf(z / SQRT_2)
}

/// `g'(z) = sqrt(2/pi) exp(-z^2 / 2)`.
#[inline]
pub fn activation_deriv(z: f64) -> f64 {
    ACTIVATION_SLOPE_AT_ZERO * (-0.5 * z * z).exp()
}

/// First-layer weights `w` (hidden x input) and second-layer weights `v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawNet", into = "RawNet")]
pub struct TwoLayerNet {
    w: Array2<f64>,
    v: Array1<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawNet {
    w: Vec<Vec<f64>>,
    v: Vec<f64>,
}

impl TryFrom<RawNet> for TwoLayerNet {
    type Error = Error;

    fn try_from(raw: RawNet) -> Result<Self> {
        let hidden = raw.w.len();
        let input_dim = raw.w.first().map_or(0, Vec::len);
        let mut flat = Vec::with_capacity(hidden * input_dim);
        for row in &raw.w {
            check_dim("network row length", input_dim, row.len())?;
            flat.extend_from_slice(row);
        }
        let w = Array2::from_shape_vec((hidden, input_dim), flat)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        TwoLayerNet::new(w, Array1::from(raw.v))
    }
}

impl From<TwoLayerNet> for RawNet {
    fn from(net: TwoLayerNet) -> Self {
        RawNet {
            w: net.w.outer_iter().map(|r| r.to_vec()).collect(),
            v: net.v.to_vec(),
        }
    }
}

impl TwoLayerNet {
    pub fn new(w: Array2<f64>, v: Array1<f64>) -> Result<Self> {
        check_dim("second-layer length", w.nrows(), v.len())?;
        if w.ncols() == 0 {
            return Err(Error::InvalidArgument("input dimension must be positive".into()));
        }
        if !w.iter().chain(v.iter()).all(|x| x.is_finite()) {
            return Err(Error::InvalidArgument("network weights must be finite".into()));
        }
        Ok(Self { w, v })
    }

    /// Student initialization: every parameter i.i.d. standard normal.
    pub fn random<R: Rng + ?Sized>(hidden: usize, input_dim: usize, rng: &mut R) -> Self {
        let w = Array2::from_shape_simple_fn((hidden, input_dim), || rng.sample(StandardNormal));
        let v = Array1::from_shape_simple_fn(hidden, || rng.sample(StandardNormal));
        Self { w, v }
    }

    /// Teacher: standard-normal first layer, every second-layer weight equal to `v_star`.
    pub fn teacher<R: Rng + ?Sized>(hidden: usize, input_dim: usize, v_star: f64, rng: &mut R) -> Self {
        let w = Array2::from_shape_simple_fn((hidden, input_dim), || rng.sample(StandardNormal));
        Self {
            w,
            v: Array1::from_elem(hidden, v_star),
        }
    }

    pub fn w(&self) -> &Array2<f64> {
        &self.w
    }

    pub fn v(&self) -> &Array1<f64> {
        &self.v
    }

    pub fn input_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn hidden_count(&self) -> usize {
        self.w.nrows()
    }

    /// Replaces the second layer, keeping `w`.
    pub fn with_v(&self, v: Array1<f64>) -> Result<Self> {
        check_dim("second-layer length", self.hidden_count(), v.len())?;
        Self::new(self.w.clone(), v)
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut Array2<f64>, &mut Array1<f64>) {
        (&mut self.w, &mut self.v)
    }

    pub(crate) fn from_parts_unchecked(w: Array2<f64>, v: Array1<f64>) -> Self {
        debug_assert_eq!(w.nrows(), v.len());
        Self { w, v }
    }

    /// Local fields `lambda_k = w_k . x / sqrt(N)`.
    pub fn local_fields(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        check_dim("input length", self.input_dim(), x.len())?;
        Ok(self.w.dot(&x) / (self.input_dim() as f64).sqrt())
    }

    /// Local fields for a batch of inputs stored row-wise; returns (batch x hidden).
    pub fn local_fields_batch(&self, xs: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_dim("input length", self.input_dim(), xs.ncols())?;
        Ok(xs.dot(&self.w.t()) / (self.input_dim() as f64).sqrt())
    }

    /// Hidden activations for a batch of inputs; returns (batch x hidden).
    pub fn activations_batch(&self, xs: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.local_fields_batch(xs)?.mapv_into(activation))
    }

    /// Outputs for a batch of inputs stored row-wise.
    pub fn forward_batch(&self, xs: ArrayView2<f64>) -> Result<Array1<f64>> {
        Ok(self.activations_batch(xs)?.dot(&self.v))
    }
}

/// `phi(x) = sum_k v_k g(w_k . x / sqrt(N))`.
pub fn forward(net: &TwoLayerNet, x: ArrayView1<f64>) -> Result<f64> {
    let fields = net.local_fields(x)?;
    Ok(fields.iter().zip(net.v.iter()).map(|(&l, &v)| v * activation(l)).sum())
}

/// Label noise configuration. `sigma = 0` is the noiseless setting the
/// closed-form results assume.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub sigma: f64,
}

impl NoiseConfig {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise sigma must be >= 0, got {sigma}")));
        }
        Ok(Self { sigma })
    }

    pub fn noiseless() -> Self {
        Self { sigma: 0.0 }
    }
}

/// One online training example.
#[derive(Debug, Clone, PartialEq)]
pub struct InputSample {
    pub x: Array1<f64>,
    pub y: f64,
}

/// I.i.d. standard-normal input vector.
pub fn sample_input<R: Rng + ?Sized>(input_dim: usize, rng: &mut R) -> Array1<f64> {
    Array1::from_shape_simple_fn(input_dim, || rng.sample(StandardNormal))
}

/// Fills `out` with i.i.d. standard-normal entries.
pub fn fill_standard_normal<R: Rng + ?Sized>(out: &mut [f64], rng: &mut R) {
    for x in out {
        *x = rng.sample(StandardNormal);
    }
}

/// Teacher output plus `sigma * zeta`, `zeta ~ N(0, 1)`. No noise draw is
/// consumed when `sigma == 0`.
pub fn teacher_label<R: Rng + ?Sized>(
    teacher: &TwoLayerNet,
    x: ArrayView1<f64>,
    noise: NoiseConfig,
    rng: &mut R,
) -> Result<f64> {
    let clean = forward(teacher, x)?;
    if noise.sigma == 0.0 {
        return Ok(clean);
    }
    let zeta: f64 = rng.sample(StandardNormal);
    Ok(clean + noise.sigma * zeta)
}

/// Draws a labelled sample from the teacher.
pub fn draw_sample<R: Rng + ?Sized>(
    teacher: &TwoLayerNet,
    noise: NoiseConfig,
    rng: &mut R,
) -> InputSample {
    let x = sample_input(teacher.input_dim(), rng);
    let y = teacher_label(teacher, x.view(), noise, rng).expect("sample matches teacher dimension");
    InputSample { x, y }
}

/// Row-stacked standard-normal inputs (rows x input_dim).
pub fn sample_inputs<R: Rng + ?Sized>(rows: usize, input_dim: usize, rng: &mut R) -> Array2<f64> {
    let mut xs = Array2::zeros((rows, input_dim));
    fill_standard_normal(xs.as_slice_mut().expect("standard layout"), rng);
    xs
}

/// Restricts `net` to the given hidden rows, in order.
pub(crate) fn select_hidden(net: &TwoLayerNet, rows: &[usize]) -> TwoLayerNet {
    TwoLayerNet::from_parts_unchecked(net.w.select(Axis(0), rows), net.v.select(Axis(0), rows))
}

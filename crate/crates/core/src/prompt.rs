//! A small differentiable prompt-tuning model.
//!
//! Only the context vectors `θ` (n × d_e) are learnable. Each class `j` is
//! encoded by a frozen two-layer network:
//!
//! ```text
//! u_j = (θ_1 + … + θ_n + class_token_j) / (n + 1)
//! v_j = W2 · tanh(W1 · u_j + b1) + b2
//! z_j = v_j / ‖v_j‖
//! ```
//!
//! [`backward`] is hand-written reverse mode through that chain and is checked
//! against [`finite_diff_grad`] in the tests.

use ndarray::{Array1, Array2, Axis, Zip};

use crate::embedding::FeatureMatrix;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, Xorshift64Star};

/// Feature rows with norm below this make the forward pass fail.
const MIN_FEATURE_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptDims {
    /// Number of context vectors.
    pub n: usize,
    /// Token embedding width.
    pub d_e: usize,
    /// Hidden width of the frozen encoder.
    pub hidden: usize,
    /// Output feature dimension D.
    pub dim: usize,
    /// Number of classes K.
    pub classes: usize,
}

impl PromptDims {
    pub fn new(n: usize, d_e: usize, hidden: usize, dim: usize, classes: usize) -> Self {
        Self {
            n,
            d_e,
            hidden,
            dim,
            classes,
        }
    }

    /// Defaults `n = 4`, `d_e = 16`, `hidden = 32` for the given output size.
    pub fn with_defaults(dim: usize, classes: usize) -> Self {
        Self::new(4, 16, 32, dim, classes)
    }

    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n", self.n),
            ("d_e", self.d_e),
            ("hidden", self.hidden),
            ("dim", self.dim),
            ("classes", self.classes),
        ] {
            if v == 0 {
                return Err(Error::InvalidDimension(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptParams {
    /// Learnable context vectors, n × d_e.
    pub theta: Array2<f64>,
    class_tokens: Array2<f64>,
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
    seed: u64,
}

fn uniform_matrix(rng: &mut Xorshift64Star, rows: usize, cols: usize, bound: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.uniform_range(-bound, bound))
}

fn uniform_vector(rng: &mut Xorshift64Star, len: usize, bound: f64) -> Array1<f64> {
    Array1::from_shape_simple_fn(len, || rng.uniform_range(-bound, bound))
}

/// Deterministic initialization. Frozen weights come from sub-stream 0 of
/// `seed` and `θ` from sub-stream 1, so the frozen encoder does not depend on
/// the context length.
///
/// `θ ~ U(-0.1, 0.1)`, class tokens `~ U(-1, 1)`, and each affine layer
/// `~ U(-1/√fan_in, 1/√fan_in)` for both weights and biases.
pub fn init_params(seed: u64, dims: PromptDims) -> Result<PromptParams> {
    dims.validate()?;
    let mut frozen = Xorshift64Star::new(derive_seed(seed, 0));
    let class_tokens = uniform_matrix(&mut frozen, dims.classes, dims.d_e, 1.0);
    let b_in = 1.0 / (dims.d_e as f64).sqrt();
    let w1 = uniform_matrix(&mut frozen, dims.hidden, dims.d_e, b_in);
    let b1 = uniform_vector(&mut frozen, dims.hidden, b_in);
    let b_hid = 1.0 / (dims.hidden as f64).sqrt();
    let w2 = uniform_matrix(&mut frozen, dims.dim, dims.hidden, b_hid);
    let b2 = uniform_vector(&mut frozen, dims.dim, b_hid);

    let mut ctx = Xorshift64Star::new(derive_seed(seed, 1));
    let theta = uniform_matrix(&mut ctx, dims.n, dims.d_e, 0.1);

    Ok(PromptParams {
        theta,
        class_tokens,
        w1,
        b1,
        w2,
        b2,
        seed,
    })
}

impl PromptParams {
    pub fn dims(&self) -> PromptDims {
        PromptDims {
            n: self.theta.nrows(),
            d_e: self.theta.ncols(),
            hidden: self.w1.nrows(),
            dim: self.w2.nrows(),
            classes: self.class_tokens.nrows(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Same frozen encoder with a different `θ`.
    pub fn with_theta(&self, theta: Array2<f64>) -> Result<PromptParams> {
        if theta.dim() != self.theta.dim() {
            return Err(Error::ShapeMismatch(format!(
                "theta {:?} does not match {:?}",
                theta.dim(),
                self.theta.dim()
            )));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("theta contains non-finite values".into()));
        }
        Ok(PromptParams {
            theta,
            ..self.clone()
        })
    }
}

/// Intermediates of one forward pass.
#[derive(Debug, Clone)]
pub struct TextForwardTrace {
    /// Pooled inputs `u_j`, K × d_e.
    pub pooled: Array2<f64>,
    /// `tanh(W1 u_j + b1)`, K × h.
    pub hidden: Array2<f64>,
    /// Un-normalized outputs `v_j`, K × D.
    pub raw: Array2<f64>,
    /// `‖v_j‖`.
    pub norms: Array1<f64>,
    /// Unit-norm text features, K × D.
    pub features: FeatureMatrix,
}

pub fn forward_text_features(params: &PromptParams) -> Result<TextForwardTrace> {
    let n = params.theta.nrows() as f64;
    let context_sum = params.theta.sum_axis(Axis(0));
    let pooled = (&params.class_tokens + &context_sum) / (n + 1.0);
    let hidden = (pooled.dot(&params.w1.t()) + &params.b1).mapv(f64::tanh);
    let raw = hidden.dot(&params.w2.t()) + &params.b2;
    let norms = raw.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    if let Some(j) = norms.iter().position(|&v| v <= MIN_FEATURE_NORM) {
        return Err(Error::ZeroNormRow(j));
    }
    let unit = &raw / &norms.view().insert_axis(Axis(1));
    Ok(TextForwardTrace {
        pooled,
        hidden,
        raw,
        norms,
        features: FeatureMatrix::from_unit_rows(unit)?,
    })
}

/// `∂L/∂θ` from `∂L/∂z` (K × D) for the forward pass recorded in `trace`.
pub fn backward(
    params: &PromptParams,
    trace: &TextForwardTrace,
    feature_grads: &Array2<f64>,
) -> Result<Array2<f64>> {
    let dims = params.dims();
    if feature_grads.dim() != (dims.classes, dims.dim) {
        return Err(Error::ShapeMismatch(format!(
            "feature grads {:?}, expected {:?}",
            feature_grads.dim(),
            (dims.classes, dims.dim)
        )));
    }
    if trace.hidden.dim() != (dims.classes, dims.hidden) {
        return Err(Error::ShapeMismatch("trace does not match params".into()));
    }
    let features = trace.features.as_array();

    // Normalization Jacobian (I - z zᵀ) / ‖v‖ per class.
    let mut grad_raw = feature_grads.clone();
    Zip::from(grad_raw.outer_iter_mut())
        .and(features.outer_iter())
        .and(&trace.norms)
        .for_each(|mut g, z, &norm| {
            let radial = g.dot(&z);
            g.scaled_add(-radial, &z);
            g.mapv_inplace(|x| x / norm);
        });

    let grad_hidden = grad_raw.dot(&params.w2);
    let grad_pre = grad_hidden * trace.hidden.mapv(|a| 1.0 - a * a);
    let grad_pooled = grad_pre.dot(&params.w1);

    let per_context = grad_pooled.sum_axis(Axis(0)) / (dims.n as f64 + 1.0);
    let theta_grad = per_context
        .broadcast((dims.n, dims.d_e))
        .expect("broadcast of a d_e row to n × d_e")
        .to_owned();
    Ok(theta_grad)
}

/// Central differences `(L(θ + h e_i) - L(θ - h e_i)) / 2h` over every
/// coordinate of `θ`.
pub fn finite_diff_grad<F>(params: &PromptParams, mut loss_fn: F, step: f64) -> Result<Array2<f64>>
where
    F: FnMut(&PromptParams) -> Result<f64>,
{
    if step.is_nan() || step <= 0.0 {
        return Err(Error::InvalidConfig(format!("step must be > 0, got {step}")));
    }
    let mut probe = params.clone();
    let mut grad = Array2::zeros(params.theta.dim());
    for idx in ndarray::indices(params.theta.dim()) {
        let origin = params.theta[idx];
        probe.theta[idx] = origin + step;
        let up = loss_fn(&probe)?;
        probe.theta[idx] = origin - step;
        let down = loss_fn(&probe)?;
        probe.theta[idx] = origin;
        grad[idx] = (up - down) / (2.0 * step);
    }
    Ok(grad)
}

/// `max |a - b| / max(‖a‖∞, ‖b‖∞)`, or the absolute error when both are
/// below `1e-300`.
pub fn max_relative_error(analytic: &Array2<f64>, numeric: &Array2<f64>) -> f64 {
    let diff = Zip::from(analytic)
        .and(numeric)
        .fold(0.0f64, |acc, a, b| acc.max((a - b).abs()));
    let scale = analytic
        .iter()
        .chain(numeric.iter())
        .fold(0.0f64, |acc, v| acc.max(v.abs()));
    if scale < 1e-300 {
        diff
    } else {
        diff / scale
    }
}

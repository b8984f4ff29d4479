//! Continuous-time state-space model abstraction.
//!
//! A model is the SDE pair
//! `dX_t = b(X_t) dt + sigma(X_t) dW_t`, `dY_t = h(X_t) dt + dB_t`
//! with parameter vector theta entering the drifts `b` and `h`. Evaluations
//! write into caller buffers so the particle loops stay allocation-free;
//! all evaluations are pure and safe for concurrent use.

mod builtin;

pub use builtin::{builtin_model, BuiltinModel, Model1, Model2, Model3, Model4};

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub d_x: usize,
    pub d_y: usize,
    pub d_theta: usize,
}

/// Parameter vector. Validity against a model's domain is checked with
/// [`validate_theta`]; construction itself does not validate.
#[derive(Debug, Clone, PartialEq)]
pub struct Theta(pub Vec<f64>);

impl Theta {
    pub fn new(values: impl Into<Vec<f64>>) -> Self {
        Theta(values.into())
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Named fixed constants of a built-in model (kappa, sigma, beta).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FixedParams {
    entries: Vec<(String, f64)>,
}

impl FixedParams {
    pub fn new() -> Self {
        Self::default()
    }

    #[must_use]
    pub fn with(mut self, name: &str, value: f64) -> Self {
        self.set(name, value);
        self
    }

    pub fn set(&mut self, name: &str, value: f64) {
        if let Some(e) = self.entries.iter_mut().find(|(n, _)| n == name) {
            e.1 = value;
        } else {
            self.entries.push((name.to_string(), value));
        }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.entries.iter().find(|(n, _)| n == name).map(|e| e.1)
    }

    pub fn require(&self, name: &str) -> Result<f64, ModelError> {
        self.get(name)
            .ok_or_else(|| ModelError::MissingConstant(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), *v))
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unknown built-in model id {0}")]
    UnknownModel(u32),
    #[error("missing fixed constant `{0}`")]
    MissingConstant(String),
    #[error("theta dimension {got} does not match model dimension {want}")]
    ThetaDimension { got: usize, want: usize },
    #[error("state outside admissible region")]
    Inadmissible,
}

/// The model interface consumed by every algorithm. The gradient layouts are
/// row-major: `grad_drift` is `d_x x d_theta`, `grad_obs_drift` is
/// `d_y x d_theta`, `diffusion` is `d_x x d_x`.
pub trait Model: Sync {
    fn dims(&self) -> Dims;
    fn drift(&self, theta: &[f64], x: &[f64], out: &mut [f64]);
    fn diffusion(&self, x: &[f64], out: &mut [f64]);
    fn obs_drift(&self, theta: &[f64], x: &[f64], out: &mut [f64]);
    fn grad_drift(&self, theta: &[f64], x: &[f64], out: &mut [f64]);
    fn grad_obs_drift(&self, theta: &[f64], x: &[f64], out: &mut [f64]);

    /// Box constraints on theta, `(lower, upper)` per coordinate.
    fn theta_box(&self) -> (&[f64], &[f64]);

    /// Joint parameter constraint beyond the box, if any.
    fn joint_ok(&self, _theta: &[f64]) -> bool {
        true
    }

    /// Whether the state lies in the region where the drifts are defined.
    fn admissible(&self, _x: &[f64]) -> bool {
        true
    }

    /// Diffusion covariance `a(x) = sigma(x) sigma(x)^T`.
    fn diffusion_cov(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dims().d_x;
        let mut sig = vec![0.0; d * d];
        self.diffusion(x, &mut sig);
        for i in 0..d {
            for j in 0..d {
                let mut s = 0.0;
                for k in 0..d {
                    s += sig[i * d + k] * sig[j * d + k];
                }
                out[i * d + j] = s;
            }
        }
    }
}

/// True iff theta has the right dimension and lies in the box and joint
/// constraint of the model.
pub fn validate_theta<M: Model>(model: &M, theta: &Theta) -> Result<bool, ModelError> {
    let want = model.dims().d_theta;
    if theta.len() != want {
        return Err(ModelError::ThetaDimension {
            got: theta.len(),
            want,
        });
    }
    let (lo, hi) = model.theta_box();
    let in_box = theta
        .as_slice()
        .iter()
        .zip(lo.iter().zip(hi))
        .all(|(t, (l, h))| t.is_finite() && *t >= *l && *t <= *h);
    Ok(in_box && model.joint_ok(theta.as_slice()))
}

/// Maximum relative discrepancy between the analytic theta-gradients and
/// central finite differences of the drifts, over all gradient entries.
/// The state must be admissible for perturbed evaluations.
pub fn grad_check<M: Model>(
    model: &M,
    theta: &Theta,
    x: &[f64],
    step: f64,
) -> Result<f64, ModelError> {
    if !model.admissible(x) {
        return Err(ModelError::Inadmissible);
    }
    let Dims { d_x, d_y, d_theta } = model.dims();
    let th = theta.as_slice();
    if th.len() != d_theta {
        return Err(ModelError::ThetaDimension {
            got: th.len(),
            want: d_theta,
        });
    }

    let mut worst = 0.0f64;
    let mut gb = vec![0.0; d_x * d_theta];
    let mut gh = vec![0.0; d_y * d_theta];
    model.grad_drift(th, x, &mut gb);
    model.grad_obs_drift(th, x, &mut gh);

    let mut th_hi = th.to_vec();
    let mut th_lo = th.to_vec();
    let mut f_hi = vec![0.0; d_x.max(d_y)];
    let mut f_lo = vec![0.0; d_x.max(d_y)];
    for j in 0..d_theta {
        th_hi.copy_from_slice(th);
        th_lo.copy_from_slice(th);
        th_hi[j] += step;
        th_lo[j] -= step;

        model.drift(&th_hi, x, &mut f_hi[..d_x]);
        model.drift(&th_lo, x, &mut f_lo[..d_x]);
        for i in 0..d_x {
            let fd = (f_hi[i] - f_lo[i]) / (2.0 * step);
            let g = gb[i * d_theta + j];
            worst = worst.max((g - fd).abs() / (1.0 + g.abs()));
        }

        model.obs_drift(&th_hi, x, &mut f_hi[..d_y]);
        model.obs_drift(&th_lo, x, &mut f_lo[..d_y]);
        for i in 0..d_y {
            let fd = (f_hi[i] - f_lo[i]) / (2.0 * step);
            let g = gh[i * d_theta + j];
            worst = worst.max((g - fd).abs() / (1.0 + g.abs()));
        }
    }
    Ok(worst)
}

//! The four built-in one-dimensional benchmark models.
//!
//! 1. `b = th1 x`,                               `h = th2 (kappa - x)`
//! 2. `b = th1/x + th2 x`,                       `h = th3 (kappa - x)`
//! 3. `b = ((th1 th2 - sigma^2)/x - th2 x)/2`,   `h = th3 (kappa - x^2)`
//! 4. `b = th1 (th2 - x)`, `sigma(x) = beta/sqrt(x^2+1)`, `h = th3 - x^2/2`
//!
//! Models 1-3 have constant diffusion coefficient `sigma`; models 2 and 3
//! are singular at the origin and restrict the state to `x > 0`. Model 3 is
//! well-posed only for `th1 th2 > 2 sigma^2`.

use super::{Dims, FixedParams, Model, ModelError};

const DEFAULT_BOX: f64 = 10.0;
/// States this close to the singularity at 0 are treated as inadmissible
/// rather than evaluated (models 2 and 3 only).
pub const ADMISSIBLE_FLOOR: f64 = 1e-8;

macro_rules! box_accessors {
    () => {
        fn theta_box(&self) -> (&[f64], &[f64]) {
            (&self.lo, &self.hi)
        }
    };
}

macro_rules! set_box {
    ($ty:ty) => {
        impl $ty {
            /// Replaces the default `[-10, 10]` box constraints.
            pub fn set_theta_box(&mut self, lo: Vec<f64>, hi: Vec<f64>) {
                assert_eq!(lo.len(), self.dims().d_theta);
                assert_eq!(hi.len(), self.dims().d_theta);
                self.lo = lo;
                self.hi = hi;
            }
        }
    };
}

#[derive(Debug, Clone)]
pub struct Model1 {
    pub kappa: f64,
    pub sigma: f64,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl Model1 {
    pub fn new(kappa: f64, sigma: f64) -> Self {
        Model1 {
            kappa,
            sigma,
            lo: vec![-DEFAULT_BOX; 2],
            hi: vec![DEFAULT_BOX; 2],
        }
    }
}

impl Model for Model1 {
    #[inline]
    fn dims(&self) -> Dims {
        Dims {
            d_x: 1,
            d_y: 1,
            d_theta: 2,
        }
    }

    #[inline]
    fn drift(&self, theta: &[f64], x: &[f64], out: &mut [f64]) {
        out[0] = theta[0] * x[0];
    }

    #[inline]
    fn diffusion(&self, _x: &[f64], out: &mut [f64]) {
        out[0] = self.sigma;
    }

    #[inline]
    fn diffusion_cov(&self, _x: &[f64], out: &mut [f64]) {
        out[0] = self.sigma * self.sigma;
    }

    #[inline]
    fn obs_drift(&self, theta: &[f64], x: &[f64], out: &mut [f64]) {
        out[0] = theta[1] * (self.kappa - x[0]);
    }

    #[inline]
    fn grad_drift(&self, _theta: &[f64], x: &[f64], out: &mut [f64]) {
        out[0] = x[0];
        out[1] = 0.0;
    }

    #[inline]
    fn grad_obs_drift(&self, _theta: &[f64], x: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
        out[1] = self.kappa - x[0];
    }

    box_accessors!();
}
set_box!(Model1);

#[derive(Debug, Clone)]
pub struct Model2 {
    pub kappa: f64,
    pub sigma: f64,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl Model2 {
    pub fn new(kappa: f64, sigma: f64) -> Self {
        Model2 {
            kappa,
            sigma,
            lo: vec![-DEFAULT_BOX; 3],
            hi: vec![DEFAULT_BOX; 3],
        }
    }
}

impl Model for Model2 {
    #[inline]
    fn dims(&self) -> Dims {
        Dims {
            d_x: 1,
            d_y: 1,
            d_theta: 3,
        }
    }

    #[inline]
    fn drift(&self, theta: &[f64], x: &[f64], out: &mut [f64]) {
        out[0] = theta[0] / x[0] + theta[1] * x[0];
    }

    #[inline]
    fn diffusion(&self, _x: &[f64], out: &mut [f64]) {
        out[0] = self.sigma;
    }

    #[inline]
    fn diffusion_cov(&self, _x: &[f64], out: &mut [f64]) {
        out[0] = self.sigma * self.sigma;
    }

    #[inline]
    fn obs_drift(&self, theta: &[f64], x: &[f64], out: &mut [f64]) {
        out[0] = theta[2] * (self.kappa - x[0]);
    }

    #[inline]
    fn grad_drift(&self, _theta: &[f64], x: &[f64], out: &mut [f64]) {
        out[0] = 1.0 / x[0];
        out[1] = x[0];
        out[2] = 0.0;
    }

    #[inline]
    fn grad_obs_drift(&self, _theta: &[f64], x: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
        out[1] = 0.0;
        out[2] = self.kappa - x[0];
    }

    #[inline]
    fn admissible(&self, x: &[f64]) -> bool {
        x[0] > ADMISSIBLE_FLOOR
    }

    box_accessors!();
}
set_box!(Model2);

#[derive(Debug, Clone)]
pub struct Model3 {
    pub kappa: f64,
    pub sigma: f64,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl Model3 {
    pub fn new(kappa: f64, sigma: f64) -> Self {
        Model3 {
            kappa,
            sigma,
            lo: vec![-DEFAULT_BOX; 3],
            hi: vec![DEFAULT_BOX; 3],
        }
    }
}

impl Model for Model3 {
    #[inline]
    fn dims(&self) -> Dims {
        Dims {
            d_x: 1,
            d_y: 1,
            d_theta: 3,
        }
    }

    #[inline]
    fn drift(&self, theta: &[f64], x: &[f64], out: &mut [f64]) {
        out[0] = 0.5 * ((theta[0] * theta[1] - self.sigma * self.sigma) / x[0] - theta[1] * x[0]);
    }

    #[inline]
    fn diffusion(&self, _x: &[f64], out: &mut [f64]) {
        out[0] = self.sigma;
    }

    #[inline]
    fn diffusion_cov(&self, _x: &[f64], out: &mut [f64]) {
        out[0] = self.sigma * self.sigma;
    }

    #[inline]
    fn obs_drift(&self, theta: &[f64], x: &[f64], out: &mut [f64]) {
        out[0] = theta[2] * (self.kappa - x[0] * x[0]);
    }

    #[inline]
    fn grad_drift(&self, theta: &[f64], x: &[f64], out: &mut [f64]) {
        out[0] = 0.5 * theta[1] / x[0];
        out[1] = 0.5 * (theta[0] / x[0] - x[0]);
        out[2] = 0.0;
    }

    #[inline]
    fn grad_obs_drift(&self, _theta: &[f64], x: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
        out[1] = 0.0;
        out[2] = self.kappa - x[0] * x[0];
    }

    #[inline]
    fn admissible(&self, x: &[f64]) -> bool {
        x[0] > ADMISSIBLE_FLOOR
    }

    /// The underlying squared process is Cox-Ingersoll-Ross; a solution
    /// exists iff `th1 th2 > 2 sigma^2`.
    fn joint_ok(&self, theta: &[f64]) -> bool {
        theta[0] * theta[1] > 2.0 * self.sigma * self.sigma
    }

    box_accessors!();
}
set_box!(Model3);

#[derive(Debug, Clone)]
pub struct Model4 {
    pub beta: f64,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl Model4 {
    pub fn new(beta: f64) -> Self {
        Model4 {
            beta,
            lo: vec![-DEFAULT_BOX; 3],
            hi: vec![DEFAULT_BOX; 3],
        }
    }
}

impl Model for Model4 {
    #[inline]
    fn dims(&self) -> Dims {
        Dims {
            d_x: 1,
            d_y: 1,
            d_theta: 3,
        }
    }

    #[inline]
    fn drift(&self, theta: &[f64], x: &[f64], out: &mut [f64]) {
        out[0] = theta[0] * (theta[1] - x[0]);
    }

    #[inline]
    fn diffusion(&self, x: &[f64], out: &mut [f64]) {
        out[0] = self.beta / (x[0] * x[0] + 1.0).sqrt();
    }

    #[inline]
    fn diffusion_cov(&self, x: &[f64], out: &mut [f64]) {
        out[0] = self.beta * self.beta / (x[0] * x[0] + 1.0);
    }

    #[inline]
    fn obs_drift(&self, theta: &[f64], x: &[f64], out: &mut [f64]) {
        out[0] = theta[2] - 0.5 * x[0] * x[0];
    }

    #[inline]
    fn grad_drift(&self, theta: &[f64], x: &[f64], out: &mut [f64]) {
        out[0] = theta[1] - x[0];
        out[1] = theta[0];
        out[2] = 0.0;
    }

    #[inline]
    fn grad_obs_drift(&self, _theta: &[f64], _x: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
        out[1] = 0.0;
        out[2] = 1.0;
    }

    box_accessors!();
}
set_box!(Model4);

/// Runtime-selected built-in model. Hot loops should monomorphize on the
/// concrete types via [`crate::with_builtin_model`]; this enum is for
/// configuration plumbing and one-off evaluation.
#[derive(Debug, Clone)]
pub enum BuiltinModel {
    M1(Model1),
    M2(Model2),
    M3(Model3),
    M4(Model4),
}

impl BuiltinModel {
    pub fn id(&self) -> u32 {
        match self {
            BuiltinModel::M1(_) => 1,
            BuiltinModel::M2(_) => 2,
            BuiltinModel::M3(_) => 3,
            BuiltinModel::M4(_) => 4,
        }
    }

    pub fn set_theta_box(&mut self, lo: Vec<f64>, hi: Vec<f64>) {
        match self {
            BuiltinModel::M1(m) => m.set_theta_box(lo, hi),
            BuiltinModel::M2(m) => m.set_theta_box(lo, hi),
            BuiltinModel::M3(m) => m.set_theta_box(lo, hi),
            BuiltinModel::M4(m) => m.set_theta_box(lo, hi),
        }
    }
}

macro_rules! delegate {
    ($self:ident, $m:ident => $e:expr) => {
        match $self {
            BuiltinModel::M1($m) => $e,
            BuiltinModel::M2($m) => $e,
            BuiltinModel::M3($m) => $e,
            BuiltinModel::M4($m) => $e,
        }
    };
}

impl Model for BuiltinModel {
    fn dims(&self) -> Dims {
        delegate!(self, m => m.dims())
    }
    fn drift(&self, theta: &[f64], x: &[f64], out: &mut [f64]) {
        delegate!(self, m => m.drift(theta, x, out))
    }
    fn diffusion(&self, x: &[f64], out: &mut [f64]) {
        delegate!(self, m => m.diffusion(x, out))
    }
    fn obs_drift(&self, theta: &[f64], x: &[f64], out: &mut [f64]) {
        delegate!(self, m => m.obs_drift(theta, x, out))
    }
    fn grad_drift(&self, theta: &[f64], x: &[f64], out: &mut [f64]) {
        delegate!(self, m => m.grad_drift(theta, x, out))
    }
    fn grad_obs_drift(&self, theta: &[f64], x: &[f64], out: &mut [f64]) {
        delegate!(self, m => m.grad_obs_drift(theta, x, out))
    }
    fn diffusion_cov(&self, x: &[f64], out: &mut [f64]) {
        delegate!(self, m => m.diffusion_cov(x, out))
    }
    fn theta_box(&self) -> (&[f64], &[f64]) {
        delegate!(self, m => m.theta_box())
    }
    fn joint_ok(&self, theta: &[f64]) -> bool {
        delegate!(self, m => m.joint_ok(theta))
    }
    fn admissible(&self, x: &[f64]) -> bool {
        delegate!(self, m => m.admissible(x))
    }
}

/// Constructs a built-in model from its id and fixed constants.
/// Models 1-3 require `kappa` and `sigma`; model 4 requires `beta`.
pub fn builtin_model(id: u32, fixed: &FixedParams) -> Result<BuiltinModel, ModelError> {
    match id {
        1 => Ok(BuiltinModel::M1(Model1::new(
            fixed.require("kappa")?,
            fixed.require("sigma")?,
        ))),
        2 => Ok(BuiltinModel::M2(Model2::new(
            fixed.require("kappa")?,
            fixed.require("sigma")?,
        ))),
        3 => Ok(BuiltinModel::M3(Model3::new(
            fixed.require("kappa")?,
            fixed.require("sigma")?,
        ))),
        4 => Ok(BuiltinModel::M4(Model4::new(fixed.require("beta")?))),
        other => Err(ModelError::UnknownModel(other)),
    }
}

/// Dispatches on a [`BuiltinModel`], binding the concrete model value so the
/// body monomorphizes. Usage:
/// `with_builtin_model!(bm, m => run(&m, ...))`.
#[macro_export]
macro_rules! with_builtin_model {
    ($bm:expr, $m:ident => $body:expr) => {
        match $bm {
            $crate::model::BuiltinModel::M1($m) => $body,
            $crate::model::BuiltinModel::M2($m) => $body,
            $crate::model::BuiltinModel::M3($m) => $body,
            $crate::model::BuiltinModel::M4($m) => $body,
        }
    };
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{grad_check, validate_theta, Theta};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    fn fixed_m1() -> FixedParams {
        FixedParams::new().with("kappa", 2.0).with("sigma", 0.3)
    }

    #[test]
    fn model1_drifts() {
        let m = builtin_model(1, &fixed_m1()).unwrap();
        let th = [-0.7, -0.5];
        let (mut b, mut h) = ([0.0], [0.0]);
        m.drift(&th, &[1.0], &mut b);
        m.obs_drift(&th, &[1.0], &mut h);
        assert_eq!(b[0], -0.7);
        assert_eq!(h[0], -0.5 * (2.0 - 1.0));
    }

    #[test]
    fn model4_diffusion_at_origin() {
        let m = builtin_model(4, &FixedParams::new().with("beta", 2.0)).unwrap();
        let mut s = [0.0];
        m.diffusion(&[0.0], &mut s);
        assert_eq!(s[0], 2.0);
        let mut a = [0.0];
        m.diffusion_cov(&[0.0], &mut a);
        assert_eq!(a[0], 4.0);
    }

    #[test]
    fn model3_drift_value() {
        let m = builtin_model(3, &FixedParams::new().with("kappa", 1.5).with("sigma", 0.25))
            .unwrap();
        let mut b = [0.0];
        m.drift(&[2.0, 1.0, 0.45], &[2.0], &mut b);
        assert!((b[0] - (-0.515625)).abs() < 1e-15);
    }

    #[test]
    fn unknown_id_and_missing_constant() {
        assert!(matches!(
            builtin_model(5, &fixed_m1()),
            Err(ModelError::UnknownModel(5))
        ));
        assert!(matches!(
            builtin_model(4, &fixed_m1()),
            Err(ModelError::MissingConstant(_))
        ));
    }

    #[test]
    fn model3_joint_constraint() {
        let m = builtin_model(3, &FixedParams::new().with("kappa", 2.0).with("sigma", 0.25))
            .unwrap();
        assert!(validate_theta(&m, &Theta::new([2.0, 1.0, 0.45])).unwrap());
        assert!(!validate_theta(&m, &Theta::new([0.1, 0.1, 0.45])).unwrap());
    }

    #[test]
    fn model1_box_only() {
        let m = builtin_model(1, &fixed_m1()).unwrap();
        assert!(validate_theta(&m, &Theta::new([3.0, -9.9])).unwrap());
        assert!(!validate_theta(&m, &Theta::new([11.0, 0.0])).unwrap());
        assert!(validate_theta(&m, &Theta::new([0.0])).is_err());
    }

    #[test]
    fn model1_gradients_exact() {
        let m = builtin_model(1, &fixed_m1()).unwrap();
        let e = grad_check(&m, &Theta::new([-0.7, -0.5]), &[1.3], 1e-4).unwrap();
        assert!(e <= 1e-12, "linear-in-theta drifts should be exact: {e}");
    }

    #[test]
    fn model2_model4_gradients_fd() {
        let m2 = builtin_model(2, &FixedParams::new().with("kappa", 2.2).with("sigma", 0.25))
            .unwrap();
        let e2 = grad_check(&m2, &Theta::new([1.3, -0.5, 0.18]), &[1.8], 1e-4).unwrap();
        assert!(e2 <= 1e-6, "{e2}");

        let m4 = builtin_model(4, &FixedParams::new().with("beta", 2.0)).unwrap();
        let e4 = grad_check(&m4, &Theta::new([2.4, 0.5, 0.4]), &[1.3], 1e-4).unwrap();
        assert!(e4 <= 1e-6, "{e4}");
    }

    #[test]
    fn inadmissible_state_errors() {
        let m = builtin_model(2, &FixedParams::new().with("kappa", 2.2).with("sigma", 0.25))
            .unwrap();
        assert!(matches!(
            grad_check(&m, &Theta::new([1.3, -0.5, 0.18]), &[0.0], 1e-4),
            Err(ModelError::Inadmissible)
        ));
    }

    #[test]
    fn random_draws_grad_and_ellipticity() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for id in 1..=4u32 {
            let fixed = match id {
                4 => FixedParams::new().with("beta", 2.0),
                _ => FixedParams::new().with("kappa", 2.0).with("sigma", 0.3),
            };
            let m = builtin_model(id, &fixed).unwrap();
            for _ in 0..100 {
                let x = [rng.gen_range(0.05..3.0)];
                let th: Vec<f64> = (0..m.dims().d_theta)
                    .map(|_| rng.gen_range(-2.0..2.0))
                    .collect();
                let e = grad_check(&m, &Theta::new(th), &x, 1e-5).unwrap();
                assert!(e <= 1e-5, "model {id}: grad error {e} at x={}", x[0]);
                let mut a = [0.0];
                m.diffusion_cov(&x, &mut a);
                assert!(a[0] > 0.0, "model {id}: a(x) not positive");
            }
        }
    }

    #[test]
    fn deterministic_evaluation() {
        let m = builtin_model(1, &fixed_m1()).unwrap();
        let (mut b1, mut b2) = ([0.0], [0.0]);
        m.drift(&[-0.7, -0.5], &[0.4], &mut b1);
        m.drift(&[-0.7, -0.5], &[0.4], &mut b2);
        assert_eq!(b1[0].to_bits(), b2[0].to_bits());
    }
}

//! Stochastic patient models of the form
//!
//! ```text
//! dx = f(t, x, u, d, p) dt + σ(t, x, u, d, p) dw
//! z  = h(t, x, p)
//! y  = g(t_k, x, p) + v,   v ~ N(0, R(t_k))
//! ```
//!
//! A model is an immutable [`PatientModel`] shared by all simulations; the
//! per-patient parameters are bound once into the model's `Params` type.
//! Model time is measured in minutes.

mod hovorka;

pub use hovorka::{HovorkaExtended, HovorkaParams, State as HovorkaState};

use crate::error::{Error, Result};
use crate::population::ParameterSet;

/// Manipulated inputs `u`, held constant between controller ticks.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ModelInputs {
    /// mU/min
    pub insulin_basal: f64,
    /// mU/min
    pub insulin_bolus: f64,
    /// μg/min
    pub glucagon: f64,
}

impl ModelInputs {
    pub fn insulin_rate(&self) -> f64 {
        self.insulin_basal + self.insulin_bolus
    }
}

/// Disturbances `d`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DisturbanceInputs {
    /// g CHO/min
    pub cho_rate: f64,
    /// fraction of heart-rate reserve, 0..=1
    pub exercise_hrr: f64,
}

/// Steady state for a target glucose concentration at zero disturbance.
#[derive(Debug, Clone, PartialEq)]
pub struct SteadyState {
    pub state: Vec<f64>,
    /// U/h
    pub basal_u_per_h: f64,
}

pub trait PatientModel: Send + Sync {
    type Params: Clone + Send + Sync + std::fmt::Debug;

    /// Registry id, e.g. `"hovorka-extended"`.
    fn id(&self) -> &'static str;

    fn state_dimension(&self) -> usize;

    fn wiener_dimension(&self) -> usize;

    /// Names of the parameters the model reads from a [`ParameterSet`].
    fn parameter_names(&self) -> &'static [&'static str];

    fn bind(&self, set: &ParameterSet, body_weight_kg: f64) -> Result<Self::Params>;

    /// Deterministic drift `f`, written into `dx`.
    fn drift(
        &self,
        t_min: f64,
        x: &[f64],
        u: &ModelInputs,
        d: &DisturbanceInputs,
        p: &Self::Params,
        dx: &mut [f64],
    );

    /// Diffusion matrix σ, row-major `state_dimension × wiener_dimension`.
    fn diffusion(
        &self,
        t_min: f64,
        x: &[f64],
        u: &ModelInputs,
        d: &DisturbanceInputs,
        p: &Self::Params,
        sigma: &mut [f64],
    );

    /// Controlled output `z = h(t, x, p)`: plasma glucose, mmol/L.
    fn output(&self, t_min: f64, x: &[f64], p: &Self::Params) -> f64;

    /// Noise-free measurement `g(t_k, x, p)`: CGM glucose, mmol/L.
    fn measurement(&self, t_min: f64, x: &[f64], p: &Self::Params) -> f64;

    /// Measurement noise variance `R(t_k)`, (mmol/L)².
    fn noise_variance(&self, t_min: f64, p: &Self::Params) -> f64;

    /// Solve `f(x, u_basal, 0, p) = 0` with `h(x) = target_bg`.
    fn steady_state(&self, p: &Self::Params, target_bg: f64) -> Result<SteadyState>;
}

/// y = g(t_k, x, p) + v with v ~ N(0, R).
pub fn measure<M: PatientModel, R: rand::Rng + ?Sized>(
    model: &M,
    t_min: f64,
    x: &[f64],
    p: &M::Params,
    rng: &mut R,
) -> f64 {
    let clean = model.measurement(t_min, x, p);
    let var = model.noise_variance(t_min, p);
    if var > 0.0 {
        let v: f64 = rng.sample(rand_distr::StandardNormal);
        clean + var.sqrt() * v
    } else {
        clean
    }
}

/// Models selectable by string id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    HovorkaExtended,
}

impl ModelKind {
    pub fn from_id(id: &str) -> Result<Self> {
        match id {
            hovorka::MODEL_ID => Ok(ModelKind::HovorkaExtended),
            other => Err(Error::Config(format!("unknown model id `{other}`"))),
        }
    }

    pub fn id(&self) -> &'static str {
        match self {
            ModelKind::HovorkaExtended => hovorka::MODEL_ID,
        }
    }
}

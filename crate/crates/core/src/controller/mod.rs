//! Feedback controllers
//!
//! ```text
//! x_c[k+1] = κ(t_k, x_c[k], y_k, ȳ_k, d̂_k, p_κ)
//! u_k      = μ(t_k, x_c[k], y_k, ȳ_k, d̂_k, p_μ)
//! ```
//!
//! A controller is immutable configuration; its memory lives in
//! [`Controller::State`], owned by the simulation of one patient. Implement
//! [`Controller`] to plug in other algorithms.

mod dual_hormone;

pub use dual_hormone::{
    basal_microadjust, glucagon_microbolus, icr_update, low_pass_filter, meal_bolus, DualHormone,
    DualHormoneProfile, DualHormoneState, ExerciseBolusSettings, IcrSettings, MealBolus,
    MealSettings, Mode, ModeSettings, PostprandialWindow, PumpLimits,
};

use serde::{Deserialize, Serialize};

/// Exercise information passed to the controller as a disturbance estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExercisePhase {
    #[default]
    Resting,
    /// First controller tick of a session.
    Start,
    Ongoing,
}

impl ExercisePhase {
    pub fn exercising(self) -> bool {
        self != ExercisePhase::Resting
    }
}

/// Everything the controller sees at one sampling time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub t_s: u64,
    /// CGM reading, mmol/L.
    pub y: f64,
    /// Announced CHO of meals starting since the previous tick, g.
    pub announced_meal_g: Option<f64>,
    pub exercise: ExercisePhase,
    /// The patient's steady-state basal rate, U/h.
    pub patient_basal_u_per_h: f64,
    /// Sampling period, s.
    pub period_s: u64,
}

/// Manipulated inputs held until the next tick.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ControlDecision {
    /// U/h
    pub basal_u_per_h: f64,
    /// U
    pub insulin_bolus_u: f64,
    /// μg
    pub glucagon_ug: f64,
}

impl ControlDecision {
    pub fn gives_insulin(&self) -> bool {
        self.basal_u_per_h > 0.0 || self.insulin_bolus_u > 0.0
    }
}

pub trait Controller: Send + Sync {
    type State: Clone + Send + std::fmt::Debug;

    fn id(&self) -> &str;

    fn initial_state(&self, patient_basal_u_per_h: f64) -> Self::State;

    /// One sampling step; must be total for any finite reading.
    fn step(&self, state: &Self::State, obs: &Observation) -> (Self::State, ControlDecision);
}

//! Extended Hovorka glucose–insulin model.
//!
//! Core (Hovorka et al., Physiol. Meas. 25, 2004; parameter populations from
//! Hovorka et al., Am. J. Physiol. 282, 2002):
//!
//! ```text
//! D1' = A_G·D − D1/t_G                  D2' = (D1 − D2)/t_G         U_G = D2/t_G
//! S1' = u − S1/t_I                      S2' = (S1 − S2)/t_I         U_I = S2/t_I
//! I'  = U_I/(V_I·BW) − k_e·I
//! x1' = k_a1(S_IT·I − x1)   x2' = k_a2(S_ID·I − x2)   x3' = k_a3(S_IE·I − x3)
//! Q1' = −F01c − F_R − m·x1·Q1 + k12·Q2 + U_G + EGP − E_ex
//! Q2' = m·x1·Q1 − (k12 + m·x2)·Q2
//! G   = Q1/(V_G·BW)
//! ```
//!
//! with `F01c = F01·BW·min(1, G/4.5)`, `F_R = 0.003(G − 9)·V_G·BW` for
//! `G > 9`, and `D` the CHO intake in mmol/min.
//!
//! Extensions:
//!
//! * CGM: `G_s' = (G − G_s)/τ_cgm`; the sensor reads `G_s`.
//! * Subcutaneous glucagon, two compartments:
//!   `Z1' = u_gn − Z1/t_gn`, `Z2' = (Z1 − Z2)/t_gn`. The plasma
//!   concentration is the quasi-steady `C = 1000·(Z2/t_gn)/(CL_gn·BW)`
//!   (ng/L) and stimulates production through
//!   `EGP = EGP0·BW·(max(0, 1 − x3) + E_max·C/(EC50 + C))`, so glucagon
//!   still acts when insulin fully suppresses basal production.
//! * Exercise, three states driven by the heart-rate-reserve fraction `h`:
//!   `E1' = (h − E1)/τ_hr`, `E2' = (E1 − E2)/τ_s`, `E3' = (E1 − E3)/τ_l`.
//!   `E2` drives insulin-independent uptake `E_ex = α·E2·Q1`; `E3` raises
//!   insulin action through `m = 1 + β·E3`.
//!
//! Diffusion acts on the gut compartments (proportional to their content)
//! and additively on `Q1`.

use super::{DisturbanceInputs, ModelInputs, PatientModel, SteadyState};
use crate::error::{Error, Result};
use crate::population::ParameterSet;

pub(crate) const MODEL_ID: &str = "hovorka-extended";

/// g/mol
const GLUCOSE_MOLAR_MASS: f64 = 180.156;

/// State indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(usize)]
pub enum State {
    D1 = 0,
    D2,
    S1,
    S2,
    I,
    X1,
    X2,
    X3,
    Q1,
    Q2,
    Cgm,
    Z1,
    Z2,
    E1,
    E2,
    E3,
}

pub const STATE_DIMENSION: usize = 16;
const WIENER_DIMENSION: usize = 3;

const PARAMETER_NAMES: &[&str] = &[
    "egp0",
    "f01",
    "k12",
    "ka1",
    "ka2",
    "ka3",
    "s_it",
    "s_id",
    "s_ie",
    "ke",
    "v_i",
    "v_g",
    "t_max_i",
    "t_max_g",
    "a_g",
    "cgm_tau",
    "cgm_noise_var",
    "gn_t_max",
    "gn_clearance",
    "gn_emax",
    "gn_ec50",
    "ex_tau_hr",
    "ex_tau_short",
    "ex_tau_long",
    "ex_uptake",
    "ex_sensitivity",
    "sigma_gut",
    "sigma_q1",
];

/// Per-patient parameters. Rates are per minute, masses in mmol, insulin in
/// mU, glucagon in μg.
#[derive(Debug, Clone, PartialEq)]
pub struct HovorkaParams {
    pub body_weight: f64,
    /// mmol/kg/min
    pub egp0: f64,
    /// mmol/kg/min
    pub f01: f64,
    pub k12: f64,
    pub ka1: f64,
    pub ka2: f64,
    pub ka3: f64,
    /// 1/min per mU/L
    pub s_it: f64,
    /// 1/min per mU/L
    pub s_id: f64,
    /// per mU/L
    pub s_ie: f64,
    pub ke: f64,
    /// L/kg
    pub v_i: f64,
    /// L/kg
    pub v_g: f64,
    pub t_max_i: f64,
    pub t_max_g: f64,
    pub a_g: f64,
    pub cgm_tau: f64,
    pub cgm_noise_var: f64,
    pub gn_t_max: f64,
    /// L/kg/min
    pub gn_clearance: f64,
    pub gn_emax: f64,
    /// ng/L
    pub gn_ec50: f64,
    pub ex_tau_hr: f64,
    pub ex_tau_short: f64,
    pub ex_tau_long: f64,
    pub ex_uptake: f64,
    pub ex_sensitivity: f64,
    /// 1/sqrt(min)
    pub sigma_gut: f64,
    /// mmol/sqrt(min)
    pub sigma_q1: f64,
}

impl HovorkaParams {
    /// Glucose distribution volume, L.
    #[inline]
    pub fn glucose_volume(&self) -> f64 {
        self.v_g * self.body_weight
    }

    /// Plasma glucagon above basal, ng/L.
    #[inline]
    pub fn glucagon_concentration(&self, z2: f64) -> f64 {
        1000.0 * (z2 / self.gn_t_max) / (self.gn_clearance * self.body_weight)
    }

    /// Left side of the glucose-mass balance at steady state as a function
    /// of plasma insulin; decreasing in `insulin`, zero at the steady state.
    fn glucose_balance(&self, insulin: f64, q1: f64, g: f64) -> f64 {
        let bw = self.body_weight;
        let f01c = self.f01 * bw * (g / 4.5).min(1.0);
        let fr = if g > 9.0 {
            0.003 * (g - 9.0) * self.glucose_volume()
        } else {
            0.0
        };
        let egp = self.egp0 * bw * (1.0 - self.s_ie * insulin).max(0.0);
        let x1 = self.s_it * insulin;
        let x2 = self.s_id * insulin;
        egp - f01c - fr - x1 * q1 * x2 / (self.k12 + x2)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct HovorkaExtended;

impl HovorkaExtended {
    pub fn new() -> Self {
        HovorkaExtended
    }
}

fn lookup(set: &ParameterSet, name: &str) -> Result<f64> {
    let v = set
        .values
        .get(name)
        .copied()
        .ok_or_else(|| Error::Model(format!("parameter `{name}` missing")))?;
    if !v.is_finite() || v < 0.0 {
        return Err(Error::Model(format!("parameter `{name}` = {v} is invalid")));
    }
    Ok(v)
}

impl PatientModel for HovorkaExtended {
    type Params = HovorkaParams;

    fn id(&self) -> &'static str {
        MODEL_ID
    }

    fn state_dimension(&self) -> usize {
        STATE_DIMENSION
    }

    fn wiener_dimension(&self) -> usize {
        WIENER_DIMENSION
    }

    fn parameter_names(&self) -> &'static [&'static str] {
        PARAMETER_NAMES
    }

    fn bind(&self, set: &ParameterSet, body_weight_kg: f64) -> Result<HovorkaParams> {
        if !(body_weight_kg > 0.0 && body_weight_kg.is_finite()) {
            return Err(Error::Model(format!(
                "body weight {body_weight_kg} kg is invalid"
            )));
        }
        let p = HovorkaParams {
            body_weight: body_weight_kg,
            egp0: lookup(set, "egp0")?,
            f01: lookup(set, "f01")?,
            k12: lookup(set, "k12")?,
            ka1: lookup(set, "ka1")?,
            ka2: lookup(set, "ka2")?,
            ka3: lookup(set, "ka3")?,
            s_it: lookup(set, "s_it")?,
            s_id: lookup(set, "s_id")?,
            s_ie: lookup(set, "s_ie")?,
            ke: lookup(set, "ke")?,
            v_i: lookup(set, "v_i")?,
            v_g: lookup(set, "v_g")?,
            t_max_i: lookup(set, "t_max_i")?,
            t_max_g: lookup(set, "t_max_g")?,
            a_g: lookup(set, "a_g")?,
            cgm_tau: lookup(set, "cgm_tau")?,
            cgm_noise_var: lookup(set, "cgm_noise_var")?,
            gn_t_max: lookup(set, "gn_t_max")?,
            gn_clearance: lookup(set, "gn_clearance")?,
            gn_emax: lookup(set, "gn_emax")?,
            gn_ec50: lookup(set, "gn_ec50")?,
            ex_tau_hr: lookup(set, "ex_tau_hr")?,
            ex_tau_short: lookup(set, "ex_tau_short")?,
            ex_tau_long: lookup(set, "ex_tau_long")?,
            ex_uptake: lookup(set, "ex_uptake")?,
            ex_sensitivity: lookup(set, "ex_sensitivity")?,
            sigma_gut: lookup(set, "sigma_gut")?,
            sigma_q1: lookup(set, "sigma_q1")?,
        };
        let divisors = [
            ("v_i", p.v_i),
            ("v_g", p.v_g),
            ("t_max_i", p.t_max_i),
            ("t_max_g", p.t_max_g),
            ("cgm_tau", p.cgm_tau),
            ("gn_t_max", p.gn_t_max),
            ("gn_clearance", p.gn_clearance),
            ("ex_tau_hr", p.ex_tau_hr),
            ("ex_tau_short", p.ex_tau_short),
            ("ex_tau_long", p.ex_tau_long),
        ];
        if let Some((name, _)) = divisors.iter().find(|(_, v)| *v <= 0.0) {
            return Err(Error::Model(format!("parameter `{name}` must be positive")));
        }
        if p.k12 + p.s_id <= 0.0 {
            return Err(Error::Model("k12 and s_id are both zero".into()));
        }
        Ok(p)
    }

    fn drift(
        &self,
        _t_min: f64,
        x: &[f64],
        u: &ModelInputs,
        d: &DisturbanceInputs,
        p: &HovorkaParams,
        dx: &mut [f64],
    ) {
        use State::*;
        let bw = p.body_weight;
        let s = |i: State| x[i as usize];

        let cho_mmol = d.cho_rate * 1000.0 / GLUCOSE_MOLAR_MASS;
        let u_g = s(D2) / p.t_max_g;
        let u_i = s(S2) / p.t_max_i;
        let insulin = s(I);

        let vg = p.glucose_volume();
        let q1 = s(Q1);
        let q2 = s(Q2);
        let g = q1 / vg;

        let f01c = p.f01 * bw * (g / 4.5).min(1.0);
        let fr = if g > 9.0 { 0.003 * (g - 9.0) * vg } else { 0.0 };

        let c_gn = p.glucagon_concentration(s(Z2));
        let e_gn = p.gn_emax * c_gn / (p.gn_ec50 + c_gn);
        let egp = p.egp0 * bw * ((1.0 - s(X3)).max(0.0) + e_gn);

        let action = 1.0 + p.ex_sensitivity * s(E3);
        let uptake_ex = p.ex_uptake * s(E2) * q1;

        dx[D1 as usize] = p.a_g * cho_mmol - s(D1) / p.t_max_g;
        dx[D2 as usize] = (s(D1) - s(D2)) / p.t_max_g;
        dx[S1 as usize] = u.insulin_rate() - s(S1) / p.t_max_i;
        dx[S2 as usize] = (s(S1) - s(S2)) / p.t_max_i;
        dx[I as usize] = u_i / (p.v_i * bw) - p.ke * insulin;
        dx[X1 as usize] = p.ka1 * (p.s_it * insulin - s(X1));
        dx[X2 as usize] = p.ka2 * (p.s_id * insulin - s(X2));
        dx[X3 as usize] = p.ka3 * (p.s_ie * insulin - s(X3));
        dx[Q1 as usize] =
            -f01c - fr - action * s(X1) * q1 + p.k12 * q2 + u_g + egp - uptake_ex;
        dx[Q2 as usize] = action * s(X1) * q1 - (p.k12 + action * s(X2)) * q2;
        dx[Cgm as usize] = (g - s(Cgm)) / p.cgm_tau;
        dx[Z1 as usize] = u.glucagon - s(Z1) / p.gn_t_max;
        dx[Z2 as usize] = (s(Z1) - s(Z2)) / p.gn_t_max;
        dx[E1 as usize] = (d.exercise_hrr - s(E1)) / p.ex_tau_hr;
        dx[E2 as usize] = (s(E1) - s(E2)) / p.ex_tau_short;
        dx[E3 as usize] = (s(E1) - s(E3)) / p.ex_tau_long;
    }

    fn diffusion(
        &self,
        _t_min: f64,
        x: &[f64],
        _u: &ModelInputs,
        _d: &DisturbanceInputs,
        p: &HovorkaParams,
        sigma: &mut [f64],
    ) {
        sigma.fill(0.0);
        let m = WIENER_DIMENSION;
        sigma[State::D1 as usize * m] = p.sigma_gut * x[State::D1 as usize];
        sigma[State::D2 as usize * m + 1] = p.sigma_gut * x[State::D2 as usize];
        sigma[State::Q1 as usize * m + 2] = p.sigma_q1;
    }

    fn output(&self, _t_min: f64, x: &[f64], p: &HovorkaParams) -> f64 {
        x[State::Q1 as usize] / p.glucose_volume()
    }

    fn measurement(&self, _t_min: f64, x: &[f64], _p: &HovorkaParams) -> f64 {
        x[State::Cgm as usize]
    }

    fn noise_variance(&self, _t_min: f64, p: &HovorkaParams) -> f64 {
        p.cgm_noise_var
    }

    fn steady_state(&self, p: &HovorkaParams, target_bg: f64) -> Result<SteadyState> {
        if !(target_bg > 0.0 && target_bg.is_finite()) {
            return Err(Error::SteadyState(format!("target {target_bg} mmol/L")));
        }
        let q1 = target_bg * p.glucose_volume();
        let balance = |i: f64| p.glucose_balance(i, q1, target_bg);

        let mut lo = 0.0;
        if balance(lo) <= 0.0 {
            return Err(Error::SteadyState(
                "glucose production does not exceed insulin-independent uptake".into(),
            ));
        }
        let mut hi = if p.s_ie > 0.0 { 1.0 / p.s_ie } else { 1.0 };
        let mut grow = 0;
        while balance(hi) > 0.0 {
            hi *= 2.0;
            grow += 1;
            if grow > 200 {
                return Err(Error::SteadyState("insulin has no glucose-lowering effect".into()));
            }
        }
        // Bisect to adjacent floats.
        for _ in 0..2000 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if balance(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let insulin = if balance(lo).abs() <= balance(hi).abs() { lo } else { hi };

        let u_mu_per_min = insulin * p.ke * p.v_i * p.body_weight;
        let x1 = p.s_it * insulin;
        let x2 = p.s_id * insulin;
        let mut x = vec![0.0; STATE_DIMENSION];
        x[State::S1 as usize] = u_mu_per_min * p.t_max_i;
        x[State::S2 as usize] = u_mu_per_min * p.t_max_i;
        x[State::I as usize] = insulin;
        x[State::X1 as usize] = x1;
        x[State::X2 as usize] = x2;
        x[State::X3 as usize] = p.s_ie * insulin;
        x[State::Q1 as usize] = q1;
        x[State::Q2 as usize] = x1 * q1 / (p.k12 + x2);
        x[State::Cgm as usize] = target_bg;

        let state_scale = x.iter().fold(0.0_f64, |a, v| a.max(v.abs())).max(1.0);
        let mut dx = vec![0.0; STATE_DIMENSION];
        let u = ModelInputs {
            insulin_basal: u_mu_per_min,
            ..Default::default()
        };
        self.drift(0.0, &x, &u, &DisturbanceInputs::default(), p, &mut dx);
        let residual = dx.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        if !(residual <= 1e-9 * state_scale) {
            return Err(Error::SteadyState(format!("residual {residual:e}")));
        }
        Ok(SteadyState {
            state: x,
            basal_u_per_h: u_mu_per_min * 60.0 / 1000.0,
        })
    }
}

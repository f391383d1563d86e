//! Dual-hormone artificial pancreas.
//!
//! Insulin mode: basal microadjustments, a meal bolus calculator with
//! superboli and post-meal basal suspension, and an insulin-to-carb ratio
//! estimator. Glucagon mode: glucagon microboli only. In both modes a fixed
//! glucagon bolus is given at exercise start when glucose is low.

use serde::{Deserialize, Serialize};

use super::{ControlDecision, Controller, ExercisePhase, Observation};
use crate::error::{Error, Result};

const BUNDLED_PROFILE: &str = include_str!("../../data/dual_hormone_default.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Insulin,
    Glucagon,
}

/// Settings that differ between rest and exercise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeSettings {
    /// Weight of the newest reading, (0, 1].
    pub filter_coefficient: f64,
    /// Enter glucagon mode below this, mmol/L.
    pub glucagon_threshold: f64,
    /// Leave glucagon mode at threshold + hysteresis, mmol/L.
    pub hysteresis: f64,
    /// Horizon of the linear-trend prediction, s.
    pub prediction_horizon_s: u64,
    /// Basal factor per mmol/L above setpoint.
    pub basal_gain: f64,
    /// Basal factor per mmol/L of trend per sample.
    pub trend_gain: f64,
    pub basal_max_factor: f64,
    /// Multiplies the assumed basal.
    pub basal_scale: f64,
    /// Microboli are given below this when falling, mmol/L.
    pub microbolus_threshold: f64,
    pub microbolus_ug: f64,
    pub lockout_s: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MealSettings {
    /// U per mmol/L above setpoint.
    pub correction_gain: f64,
    /// mmol/L
    pub superbolus_threshold: f64,
    /// Fraction of the suspended basal moved into the bolus.
    pub superbolus_fraction: f64,
    /// Basal suspension after a meal bolus, s.
    pub suspension_s: u64,
    /// How long a meal announced in glucagon mode stays pending, s.
    pub deferral_s: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IcrSettings {
    /// Postprandial observation window, s.
    pub window_s: u64,
    /// Allowed rise above the pre-meal level, mmol/L.
    pub excursion_band: f64,
    /// A nadir below this counts as overdosing, mmol/L.
    pub undershoot_bg: f64,
    /// Relative change per update.
    pub step: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PumpLimits {
    pub max_basal_u_per_h: f64,
    pub max_insulin_bolus_u: f64,
    pub max_glucagon_ug: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExerciseBolusSettings {
    /// Given only below this filtered glucose, mmol/L.
    pub threshold: f64,
    pub dose_ug: f64,
}

/// Hyperparameter profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualHormoneProfile {
    pub id: String,
    /// mmol/L
    pub setpoint: f64,
    pub assumed_basal_scale: f64,
    /// Initial ICR times the patient's basal rate, g/h. The starting ICR is
    /// `icr_rule / basal`, clamped to the ICR range.
    pub icr_rule: f64,
    pub pump: PumpLimits,
    pub rest: ModeSettings,
    pub exercise: ModeSettings,
    pub meal: MealSettings,
    pub icr: IcrSettings,
    pub exercise_bolus: ExerciseBolusSettings,
}

impl Default for DualHormoneProfile {
    fn default() -> Self {
        Self::from_toml(BUNDLED_PROFILE).expect("bundled controller profile parses")
    }
}

impl DualHormoneProfile {
    pub fn from_toml(text: &str) -> Result<Self> {
        let p: Self = toml::from_str(text).map_err(|e| Error::parse("controller profile", e))?;
        p.validate()?;
        Ok(p)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("profile serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("controller profile: {what}")));
        if !(self.setpoint > 0.0) {
            return bad("setpoint must be positive");
        }
        if !(self.assumed_basal_scale >= 0.0) {
            return bad("assumed_basal_scale must be nonnegative");
        }
        for (name, m) in [("rest", &self.rest), ("exercise", &self.exercise)] {
            if !(m.filter_coefficient > 0.0 && m.filter_coefficient <= 1.0) {
                return bad(&format!("{name}.filter_coefficient must lie in (0, 1]"));
            }
            if !(m.glucagon_threshold < self.setpoint) {
                return bad(&format!("{name}.glucagon_threshold must be below the setpoint"));
            }
            let nonneg = [
                m.hysteresis,
                m.basal_gain,
                m.trend_gain,
                m.basal_scale,
                m.microbolus_ug,
            ];
            if nonneg.iter().any(|v| !(*v >= 0.0)) || !(m.basal_max_factor >= 1.0) {
                return bad(&format!("{name} gains must be nonnegative, max factor at least 1"));
            }
        }
        let i = &self.icr;
        if !(i.min > 0.0 && i.max >= i.min && self.icr_rule > 0.0) {
            return bad("ICR clamp and icr_rule must be positive");
        }
        if !(i.step >= 0.0 && i.step < 1.0) {
            return bad("icr.step must lie in [0, 1)");
        }
        let m = &self.meal;
        if !(m.correction_gain >= 0.0 && m.superbolus_fraction >= 0.0) {
            return bad("meal gains must be nonnegative");
        }
        let p = &self.pump;
        if !(p.max_basal_u_per_h >= 0.0 && p.max_insulin_bolus_u >= 0.0 && p.max_glucagon_ug >= 0.0) {
            return bad("pump limits must be nonnegative");
        }
        if !(self.exercise_bolus.dose_ug >= 0.0) {
            return bad("exercise bolus must be nonnegative");
        }
        Ok(())
    }

    pub fn mode_settings(&self, exercise: ExercisePhase) -> &ModeSettings {
        if exercise.exercising() {
            &self.exercise
        } else {
            &self.rest
        }
    }
}

/// Postprandial glucose summary for the ICR estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PostprandialWindow {
    pub elapsed_s: u64,
    /// Level the excursion is measured against (the setpoint).
    pub reference_bg: f64,
    pub peak_bg: f64,
    pub nadir_bg: f64,
}

impl PostprandialWindow {
    fn new(reference: f64, bg: f64) -> Self {
        PostprandialWindow {
            elapsed_s: 0,
            reference_bg: reference,
            peak_bg: bg,
            nadir_bg: bg,
        }
    }

    pub fn excursion(&self) -> f64 {
        self.peak_bg - self.reference_bg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualHormoneState {
    /// Filtered glucose, mmol/L; `None` before the first reading.
    pub filtered: Option<f64>,
    pub previous_filtered: Option<f64>,
    pub mode: Mode,
    /// g/U
    pub icr: f64,
    pub suspension_remaining_s: u64,
    /// The current exercise session has been handled.
    pub exercise_bolus_given: bool,
    pub since_glucagon_s: u64,
    /// Meal announced in glucagon mode, waiting for insulin mode.
    pub deferred_meal: Option<(f64, u64)>,
    pub meal_window: Option<PostprandialWindow>,
}

impl DualHormoneState {
    pub fn trend(&self) -> f64 {
        match (self.filtered, self.previous_filtered) {
            (Some(a), Some(b)) => a - b,
            _ => 0.0,
        }
    }
}

/// Exponential smoothing.
pub fn low_pass_filter(prev: f64, y: f64, coefficient: f64) -> f64 {
    (1.0 - coefficient) * prev + coefficient * y
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MealBolus {
    /// U
    pub units: f64,
    pub superbolus: bool,
    /// Basal suspension to start, s.
    pub suspension_s: u64,
}

/// Carb-counting bolus with correction; above the superbolus threshold the
/// basal that will be suspended is partly given up front.
pub fn meal_bolus(
    announced_cho_g: f64,
    icr: f64,
    filtered_bg: f64,
    basal_u_per_h: f64,
    profile: &DualHormoneProfile,
) -> MealBolus {
    let m = &profile.meal;
    let mut units =
        (announced_cho_g / icr + m.correction_gain * (filtered_bg - profile.setpoint)).max(0.0);
    let superbolus = announced_cho_g > 0.0 && filtered_bg > m.superbolus_threshold;
    if superbolus {
        units += m.superbolus_fraction * basal_u_per_h * m.suspension_s as f64 / 3600.0;
    }
    MealBolus {
        units,
        superbolus,
        suspension_s: if announced_cho_g > 0.0 { m.suspension_s } else { 0 },
    }
}

/// Basal scaled by a bounded factor in the glucose deviation and trend.
pub fn basal_microadjust(
    filtered_bg: f64,
    trend: f64,
    basal_u_per_h: f64,
    suspended: bool,
    profile: &DualHormoneProfile,
    settings: &ModeSettings,
) -> f64 {
    if suspended {
        return 0.0;
    }
    let factor = 1.0
        + settings.basal_gain * (filtered_bg - profile.setpoint)
        + settings.trend_gain * trend;
    basal_u_per_h * settings.basal_scale * factor.clamp(0.0, settings.basal_max_factor)
}

/// Fixed microbolus below the threshold while falling, outside the lockout.
pub fn glucagon_microbolus(
    filtered_bg: f64,
    trend: f64,
    settings: &ModeSettings,
    since_last_s: u64,
) -> f64 {
    if filtered_bg < settings.microbolus_threshold && trend < 0.0 && since_last_s >= settings.lockout_s {
        settings.microbolus_ug
    } else {
        0.0
    }
}

/// Multiplicative ICR update from one completed postprandial window.
pub fn icr_update(icr: f64, window: &PostprandialWindow, settings: &IcrSettings) -> f64 {
    let next = if window.nadir_bg < settings.undershoot_bg {
        icr * (1.0 + settings.step)
    } else if window.excursion() > settings.excursion_band {
        icr * (1.0 - settings.step)
    } else {
        icr
    };
    next.clamp(settings.min, settings.max)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DualHormone {
    pub profile: DualHormoneProfile,
}

impl DualHormone {
    pub fn new(profile: DualHormoneProfile) -> Result<Self> {
        profile.validate()?;
        Ok(DualHormone { profile })
    }
}


impl Controller for DualHormone {
    type State = DualHormoneState;

    fn id(&self) -> &str {
        &self.profile.id
    }

    fn initial_state(&self, patient_basal_u_per_h: f64) -> DualHormoneState {
        let icr = if patient_basal_u_per_h > 0.0 {
            self.profile.icr_rule / patient_basal_u_per_h
        } else {
            self.profile.icr.max
        };
        DualHormoneState {
            filtered: None,
            previous_filtered: None,
            mode: Mode::Insulin,
            icr: icr.clamp(self.profile.icr.min, self.profile.icr.max),
            suspension_remaining_s: 0,
            exercise_bolus_given: false,
            since_glucagon_s: u64::MAX / 2,
            deferred_meal: None,
            meal_window: None,
        }
    }

    fn step(&self, state: &DualHormoneState, obs: &Observation) -> (DualHormoneState, ControlDecision) {
        let hp = &self.profile;
        let settings = hp.mode_settings(obs.exercise);
        let mut s = state.clone();
        let y = if obs.y.is_finite() { obs.y.max(0.0) } else { state.filtered.unwrap_or(hp.setpoint) };

        // Filter.
        let prev = s.filtered.unwrap_or(y);
        let filtered = low_pass_filter(prev, y, settings.filter_coefficient);
        s.previous_filtered = Some(prev);
        s.filtered = Some(filtered);
        let trend = filtered - prev;

        // Timers.
        s.suspension_remaining_s = s.suspension_remaining_s.saturating_sub(obs.period_s);
        s.since_glucagon_s = s.since_glucagon_s.saturating_add(obs.period_s);
        if let Some((_, age)) = s.deferred_meal.as_mut() {
            *age += obs.period_s;
        }
        if s.deferred_meal.is_some_and(|(_, age)| age > hp.meal.deferral_s) {
            s.deferred_meal = None;
        }

        // Exercise-start bolus, at most once per session.
        let mut decision = ControlDecision::default();
        let mut exercise_bolus = false;
        match obs.exercise {
            ExercisePhase::Resting => s.exercise_bolus_given = false,
            ExercisePhase::Start | ExercisePhase::Ongoing if !s.exercise_bolus_given => {
                s.exercise_bolus_given = true;
                if obs.exercise == ExercisePhase::Start && filtered < hp.exercise_bolus.threshold {
                    decision.glucagon_ug = hp.exercise_bolus.dose_ug;
                    exercise_bolus = true;
                }
            }
            _ => {}
        }

        // Mode selection with hysteresis on a linear-trend prediction.
        let steps_ahead = settings.prediction_horizon_s as f64 / obs.period_s.max(1) as f64;
        let predicted = filtered + trend * steps_ahead;
        s.mode = match s.mode {
            Mode::Insulin
                if filtered < settings.glucagon_threshold
                    || predicted < settings.glucagon_threshold =>
            {
                Mode::Glucagon
            }
            Mode::Glucagon
                if filtered >= settings.glucagon_threshold + settings.hysteresis
                    && predicted >= settings.glucagon_threshold =>
            {
                Mode::Insulin
            }
            m => m,
        };

        if let Some(g) = obs.announced_meal_g.filter(|g| *g > 0.0) {
            let pending = s.deferred_meal.map_or(0.0, |(p, _)| p);
            s.deferred_meal = Some((pending + g, 0));
        }

        // Postprandial window bookkeeping.
        if let Some(w) = s.meal_window.as_mut() {
            w.elapsed_s += obs.period_s;
            w.peak_bg = w.peak_bg.max(filtered);
            w.nadir_bg = w.nadir_bg.min(filtered);
            if w.elapsed_s >= hp.icr.window_s {
                s.icr = icr_update(s.icr, w, &hp.icr);
                s.meal_window = None;
            }
        }

        let assumed_basal = obs.patient_basal_u_per_h * hp.assumed_basal_scale;
        match s.mode {
            Mode::Glucagon => {
                let micro = glucagon_microbolus(filtered, trend, settings, s.since_glucagon_s);
                if micro > 0.0 {
                    s.since_glucagon_s = 0;
                }
                decision.glucagon_ug += micro;
            }
            Mode::Insulin if exercise_bolus => {}
            Mode::Insulin => {
                if let Some((cho, _)) = s.deferred_meal.take() {
                    let bolus = meal_bolus(cho, s.icr, filtered, assumed_basal, hp);
                    decision.insulin_bolus_u = bolus.units;
                    s.suspension_remaining_s = s.suspension_remaining_s.max(bolus.suspension_s);
                    s.meal_window = Some(PostprandialWindow::new(hp.setpoint, filtered));
                }
                decision.basal_u_per_h = basal_microadjust(
                    filtered,
                    trend,
                    assumed_basal,
                    s.suspension_remaining_s > 0,
                    hp,
                    settings,
                );
            }
        }

        decision.basal_u_per_h = decision.basal_u_per_h.clamp(0.0, hp.pump.max_basal_u_per_h);
        decision.insulin_bolus_u = decision.insulin_bolus_u.clamp(0.0, hp.pump.max_insulin_bolus_u);
        decision.glucagon_ug = decision.glucagon_ug.clamp(0.0, hp.pump.max_glucagon_ug);
        (s, decision)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(y: f64) -> Observation {
        Observation {
            t_s: 0,
            y,
            announced_meal_g: None,
            exercise: ExercisePhase::Resting,
            patient_basal_u_per_h: 1.0,
            period_s: 300,
        }
    }

    fn settled(ctrl: &DualHormone, bg: f64) -> DualHormoneState {
        let mut s = ctrl.initial_state(1.0);
        for _ in 0..50 {
            s = ctrl.step(&s, &obs(bg)).0;
        }
        s
    }

    #[test]
    fn bundled_profile_is_valid() {
        let p = DualHormoneProfile::default();
        p.validate().unwrap();
        assert_eq!(DualHormoneProfile::from_toml(&p.to_toml()).unwrap(), p);
    }

    #[test]
    fn filter_identity_and_fixed_point() {
        assert_eq!(low_pass_filter(3.0, 7.5, 1.0), 7.5);
        let mut e = 0.0;
        for _ in 0..500 {
            e = low_pass_filter(e, 5.0, 0.3);
        }
        assert!((e - 5.0).abs() < 1e-12);
    }

    #[test]
    fn filter_step_response_reaches_95_percent_in_14_samples() {
        let expect = (0.05f64.ln() / 0.8f64.ln()).ceil() as usize;
        assert_eq!(expect, 14);
        let mut e = 0.0;
        let mut n = 0;
        while e < 0.95 {
            e = low_pass_filter(e, 1.0, 0.2);
            n += 1;
        }
        assert_eq!(n, expect);
    }

    #[test]
    fn meal_bolus_arithmetic() {
        let p = DualHormoneProfile::default();
        let b = meal_bolus(60.0, 10.0, p.setpoint, 1.0, &p);
        assert!((b.units - 6.0).abs() < 1e-12);
        assert!(!b.superbolus);
        assert_eq!(b.suspension_s, p.meal.suspension_s);
        assert_eq!(meal_bolus(0.0, 10.0, p.setpoint, 1.0, &p).units, 0.0);

        let bg = 14.0;
        let b = meal_bolus(90.0, 10.0, bg, 0.8, &p);
        let hand = 9.0
            + p.meal.correction_gain * (bg - p.setpoint)
            + p.meal.superbolus_fraction * 0.8 * p.meal.suspension_s as f64 / 3600.0;
        assert!(b.superbolus);
        assert!((b.units - hand).abs() < 1e-12);
    }

    #[test]
    fn low_glucose_reduces_bolus_but_not_below_zero() {
        let p = DualHormoneProfile::default();
        assert_eq!(meal_bolus(5.0, 10.0, 1.0, 1.0, &p).units, 0.0);
    }

    #[test]
    fn basal_neutral_at_setpoint() {
        let p = DualHormoneProfile::default();
        assert_eq!(basal_microadjust(p.setpoint, 0.0, 0.9, false, &p, &p.rest), 0.9);
        assert_eq!(basal_microadjust(p.setpoint, 0.0, 0.9, true, &p, &p.rest), 0.0);
        let r = basal_microadjust(p.setpoint + 3.0, 0.2, 0.9, false, &p, &p.rest);
        assert!(r > 0.9 && r <= p.rest.basal_max_factor * 0.9);
        let r = basal_microadjust(30.0, 5.0, 0.9, false, &p, &p.rest);
        assert_eq!(r, p.rest.basal_max_factor * 0.9);
    }

    #[test]
    fn microbolus_rules() {
        let p = DualHormoneProfile::default();
        let s = &p.rest;
        let low = s.microbolus_threshold - 0.5;
        assert_eq!(glucagon_microbolus(low, -0.1, s, s.lockout_s), s.microbolus_ug);
        assert_eq!(glucagon_microbolus(low, -0.1, s, s.lockout_s - 1), 0.0);
        assert_eq!(glucagon_microbolus(s.microbolus_threshold + 0.1, -0.1, s, u64::MAX), 0.0);
        assert_eq!(glucagon_microbolus(low, 0.1, s, u64::MAX), 0.0);
    }

    #[test]
    fn icr_update_rules() {
        let p = DualHormoneProfile::default();
        let within = PostprandialWindow {
            elapsed_s: 0,
            reference_bg: 6.0,
            peak_bg: 6.0 + p.icr.excursion_band * 0.5,
            nadir_bg: 5.5,
        };
        assert_eq!(icr_update(10.0, &within, &p.icr), 10.0);
        let over = PostprandialWindow {
            peak_bg: 6.0 + p.icr.excursion_band + 2.0,
            ..within
        };
        let mut icr = 10.0;
        let mut seen = vec![icr];
        for _ in 0..200 {
            icr = icr_update(icr, &over, &p.icr);
            seen.push(icr);
        }
        assert!(seen.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(icr, p.icr.min);
        assert_eq!(icr_update(p.icr.min, &over, &p.icr), p.icr.min);
        let under = PostprandialWindow {
            nadir_bg: p.icr.undershoot_bg - 0.5,
            ..within
        };
        assert!(icr_update(10.0, &under, &p.icr) > 10.0);
    }

    #[test]
    fn exercise_start_bolus_depends_on_glucose() {
        let ctrl = DualHormone::default();
        let s = settled(&ctrl, 6.5);
        let mut o = obs(6.5);
        o.exercise = ExercisePhase::Start;
        let (next, d) = ctrl.step(&s, &o);
        assert_eq!(d.glucagon_ug, 100.0);
        assert!(!d.gives_insulin());
        // Never twice in one session.
        o.exercise = ExercisePhase::Ongoing;
        let (_, d) = ctrl.step(&next, &o);
        assert!(d.glucagon_ug < 100.0);

        let s = settled(&ctrl, 7.5);
        let mut o = obs(7.5);
        o.exercise = ExercisePhase::Start;
        assert_eq!(ctrl.step(&s, &o).1.glucagon_ug, 0.0);
    }

    #[test]
    fn glucagon_mode_gives_no_insulin() {
        let ctrl = DualHormone::default();
        let mut s = settled(&ctrl, 6.0);
        let mut saw_glucagon_mode = false;
        for k in 0..40 {
            let mut o = obs(6.0 - 0.1 * k as f64);
            if k == 20 {
                o.announced_meal_g = Some(40.0);
            }
            let (n, d) = ctrl.step(&s, &o);
            if n.mode == Mode::Glucagon {
                saw_glucagon_mode = true;
                assert_eq!(d.basal_u_per_h, 0.0);
                assert_eq!(d.insulin_bolus_u, 0.0);
            } else {
                assert_eq!(d.glucagon_ug, 0.0);
            }
            s = n;
        }
        assert!(saw_glucagon_mode);
    }

    #[test]
    fn steady_reading_at_setpoint_gives_patient_basal() {
        let ctrl = DualHormone::default();
        let s = settled(&ctrl, 6.0);
        let (_, d) = ctrl.step(&s, &obs(6.0));
        assert_eq!(d, ControlDecision { basal_u_per_h: 1.0, insulin_bolus_u: 0.0, glucagon_ug: 0.0 });
    }

    #[test]
    fn meal_suspends_basal() {
        let ctrl = DualHormone::default();
        let s = settled(&ctrl, 6.0);
        let mut o = obs(6.0);
        o.announced_meal_g = Some(60.0);
        let (s, d) = ctrl.step(&s, &o);
        assert!((d.insulin_bolus_u - 60.0 / ctrl.profile.icr_rule).abs() < 1e-12);
        assert_eq!(d.basal_u_per_h, 0.0);
        let (_, d) = ctrl.step(&s, &obs(6.0));
        assert_eq!(d.basal_u_per_h, 0.0);
    }

    #[test]
    fn step_is_deterministic() {
        let ctrl = DualHormone::default();
        let s = settled(&ctrl, 8.0);
        let mut o = obs(9.0);
        o.announced_meal_g = Some(70.0);
        assert_eq!(ctrl.step(&s, &o), ctrl.step(&s, &o));
    }

    #[test]
    fn threshold_above_setpoint_is_rejected() {
        let mut p = DualHormoneProfile::default();
        p.rest.glucagon_threshold = 7.0;
        assert!(DualHormone::new(p).is_err());
        let mut p = DualHormoneProfile::default();
        p.rest.filter_coefficient = 0.0;
        assert!(p.validate().is_err());
    }
}

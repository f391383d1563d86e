//! Closed-loop simulation of single patients and whole trials.
//!
//! The patient SDE is integrated with Euler–Maruyama on a fixed `dt` grid.
//! Every controller period the CGM is sampled, the controller is stepped and
//! its decision is held constant until the next tick. Statistics are
//! accumulated on the fly, so a patient's trace is only kept when asked for.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytics::{AnalyticsConfig, PatientStats, SampleDoses, TrialAccumulator, TrialReport};
use crate::controller::{ControlDecision, Controller, ExercisePhase, Observation};
use crate::error::{Error, Result};
use crate::physiology::{measure, DisturbanceInputs, ModelInputs, PatientModel};
use crate::population::VirtualPatient;
use crate::protocol::{Disturbance, DisturbanceKind, Protocol, ProtocolGenerator};
use crate::rng::{self, StreamRole};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TracePolicy {
    Never,
    #[default]
    #[serde(rename = "worst", alias = "worst_case_only")]
    WorstCaseOnly,
    Always,
}

impl std::str::FromStr for TracePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "never" => Ok(TracePolicy::Never),
            "worst" | "worst_case_only" => Ok(TracePolicy::WorstCaseOnly),
            "always" => Ok(TracePolicy::Always),
            other => Err(Error::Config(format!("unknown trace policy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationConfig {
    pub dt_s: u64,
    pub controller_period_s: u64,
    pub horizon_s: u64,
    pub seed: u64,
    /// Glucose of the initial steady state, mmol/L.
    pub initial_bg: f64,
    pub store_trace: TracePolicy,
    /// Report bins. The horizon is taken from this config.
    pub analytics: AnalyticsConfig,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            dt_s: 30,
            controller_period_s: 300,
            horizon_s: crate::protocol::WEEK_S,
            seed: 0,
            initial_bg: 6.0,
            store_trace: TracePolicy::WorstCaseOnly,
            analytics: AnalyticsConfig::default(),
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dt_s == 0 || self.controller_period_s == 0 {
            return Err(Error::Config("dt and controller period must be positive".into()));
        }
        if !self.controller_period_s.is_multiple_of(self.dt_s) {
            return Err(Error::Config(format!(
                "controller period {} s is not a multiple of dt {} s",
                self.controller_period_s, self.dt_s
            )));
        }
        if self.horizon_s == 0 || !self.horizon_s.is_multiple_of(self.controller_period_s) {
            return Err(Error::Config(format!(
                "horizon {} s is not a positive multiple of the controller period",
                self.horizon_s
            )));
        }
        if !(self.initial_bg > 0.0) {
            return Err(Error::Config("initial_bg must be positive".into()));
        }
        self.analytics_config().validate()
    }

    pub fn analytics_config(&self) -> AnalyticsConfig {
        AnalyticsConfig {
            horizon_s: self.horizon_s,
            ..self.analytics
        }
    }
}

/// Columnar record of one simulation, one row per `dt`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub patient_id: u64,
    pub dt_s: u64,
    pub t_s: Vec<u64>,
    /// Plasma glucose, mmol/L.
    pub bg: Vec<f64>,
    /// Latest CGM reading, mmol/L.
    pub cgm: Vec<f64>,
    /// g CHO/min
    pub cho_rate: Vec<f64>,
    pub hrr: Vec<f64>,
    /// U/h
    pub basal: Vec<f64>,
    /// U, on the row of the tick that decided it.
    pub insulin_bolus: Vec<f64>,
    /// μg, on the row of the tick that decided it.
    pub glucagon_bolus: Vec<f64>,
}

pub const TRACE_COLUMNS: [&str; 8] = [
    "t_s",
    "bg_mmol_per_l",
    "cgm_mmol_per_l",
    "cho_g_per_min",
    "hrr",
    "basal_u_per_h",
    "insulin_bolus_u",
    "glucagon_bolus_ug",
];

impl Trace {
    pub fn len(&self) -> usize {
        self.t_s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t_s.is_empty()
    }

    /// Time of the first row.
    pub fn start_s(&self) -> u64 {
        self.t_s.first().copied().unwrap_or(0)
    }

    /// End of the covered interval, exclusive.
    pub fn horizon_s(&self) -> u64 {
        self.start_s() + self.len() as u64 * self.dt_s
    }

    pub fn min_bg(&self) -> Option<f64> {
        self.bg.iter().copied().reduce(f64::min)
    }

    /// Rows with `from_s <= t < to_s`.
    pub fn window(&self, from_s: u64, to_s: u64) -> Result<Trace> {
        if from_s >= to_s || from_s < self.start_s() || to_s > self.horizon_s() {
            return Err(Error::WindowOutOfRange {
                from_s,
                to_s,
                horizon_s: self.horizon_s(),
            });
        }
        let a = (from_s - self.start_s()).div_ceil(self.dt_s) as usize;
        let b = (to_s - self.start_s()).div_ceil(self.dt_s) as usize;
        Ok(Trace {
            patient_id: self.patient_id,
            dt_s: self.dt_s,
            t_s: self.t_s[a..b].to_vec(),
            bg: self.bg[a..b].to_vec(),
            cgm: self.cgm[a..b].to_vec(),
            cho_rate: self.cho_rate[a..b].to_vec(),
            hrr: self.hrr[a..b].to_vec(),
            basal: self.basal[a..b].to_vec(),
            insulin_bolus: self.insulin_bolus[a..b].to_vec(),
            glucagon_bolus: self.glucagon_bolus[a..b].to_vec(),
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = TRACE_COLUMNS.join(",");
        s.push('\n');
        for i in 0..self.len() {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                self.t_s[i],
                self.bg[i],
                self.cgm[i],
                self.cho_rate[i],
                self.hrr[i],
                self.basal[i],
                self.insulin_bolus[i],
                self.glucagon_bolus[i]
            );
        }
        s
    }

    /// Parse [`Trace::to_csv`] output. `dt` is read off the first two rows.
    pub fn from_csv(patient_id: u64, text: &str) -> Result<Trace> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or("");
        if header != TRACE_COLUMNS.join(",") {
            return Err(Error::parse("trace", format!("unexpected header `{header}`")));
        }
        let mut t = Trace {
            patient_id,
            ..Trace::default()
        };
        for (i, line) in lines.enumerate() {
            let bad = |m: String| Error::parse(format!("trace row {}", i + 1), m);
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != TRACE_COLUMNS.len() {
                return Err(bad(format!("{} fields", fields.len())));
            }
            t.t_s.push(fields[0].parse().map_err(|e| bad(format!("{e}")))?);
            let col = |k: usize| -> Result<f64> { fields[k].parse().map_err(|e| bad(format!("{e}"))) };
            let row = [col(1)?, col(2)?, col(3)?, col(4)?, col(5)?, col(6)?, col(7)?];
            t.bg.push(row[0]);
            t.cgm.push(row[1]);
            t.cho_rate.push(row[2]);
            t.hrr.push(row[3]);
            t.basal.push(row[4]);
            t.insulin_bolus.push(row[5]);
            t.glucagon_bolus.push(row[6]);
        }
        match t.t_s.as_slice() {
            [a, b, ..] if b > a => t.dt_s = b - a,
            _ => return Err(Error::parse("trace", "need two increasing rows to infer dt")),
        }
        Ok(t)
    }

    fn push(&mut self, t_s: u64, bg: f64, cgm: f64, d: &DisturbanceInputs, u: &ControlDecision, tick: bool) {
        self.t_s.push(t_s);
        self.bg.push(bg);
        self.cgm.push(cgm);
        self.cho_rate.push(d.cho_rate);
        self.hrr.push(d.exercise_hrr);
        self.basal.push(u.basal_u_per_h);
        self.insulin_bolus.push(if tick { u.insulin_bolus_u } else { 0.0 });
        self.glucagon_bolus.push(if tick { u.glucagon_ug } else { 0.0 });
    }
}

/// Euler–Maruyama integrator with preallocated buffers.
pub struct EulerMaruyama {
    dx: Vec<f64>,
    sigma: Vec<f64>,
    dw: Vec<f64>,
}

impl EulerMaruyama {
    pub fn new<M: PatientModel>(model: &M) -> Self {
        let n = model.state_dimension();
        let m = model.wiener_dimension();
        EulerMaruyama {
            dx: vec![0.0; n],
            sigma: vec![0.0; n * m],
            dw: vec![0.0; m],
        }
    }

    /// `x ← max(0, x + f·dt + σ·Δw)` with `Δw ~ N(0, dt·I)`; times in min.
    #[allow(clippy::too_many_arguments)]
    pub fn step<M: PatientModel, R: Rng + ?Sized>(
        &mut self,
        model: &M,
        x: &mut [f64],
        u: &ModelInputs,
        d: &DisturbanceInputs,
        p: &M::Params,
        t_min: f64,
        dt_min: f64,
        rng: &mut R,
    ) -> std::result::Result<(), usize> {
        let m = self.dw.len();
        model.drift(t_min, x, u, d, p, &mut self.dx);
        model.diffusion(t_min, x, u, d, p, &mut self.sigma);
        let sd = dt_min.sqrt();
        for w in self.dw.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *w = sd * z;
        }
        for (i, xi) in x.iter_mut().enumerate() {
            let row = &self.sigma[i * m..(i + 1) * m];
            let noise: f64 = row.iter().zip(&self.dw).map(|(s, w)| s * w).sum();
            let next = *xi + self.dx[i] * dt_min + noise;
            if !next.is_finite() {
                return Err(i);
            }
            *xi = next.max(0.0);
        }
        Ok(())
    }
}

/// One Euler–Maruyama step; see [`EulerMaruyama::step`].
#[allow(clippy::too_many_arguments)]
pub fn euler_maruyama_step<M: PatientModel, R: Rng + ?Sized>(
    model: &M,
    x: &[f64],
    u: &ModelInputs,
    d: &DisturbanceInputs,
    p: &M::Params,
    t_s: u64,
    dt_s: u64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let mut next = x.to_vec();
    EulerMaruyama::new(model)
        .step(model, &mut next, u, d, p, t_s as f64 / 60.0, dt_s as f64 / 60.0, rng)
        .map_err(|component| Error::NonFinite { t_s, component })?;
    Ok(next)
}

/// Walks a time-ordered disturbance list along the simulation grid.
struct DisturbanceCursor<'a> {
    all: &'a [Disturbance],
    next: usize,
    active: Vec<&'a Disturbance>,
}

impl<'a> DisturbanceCursor<'a> {
    fn new(all: &'a [Disturbance]) -> Self {
        DisturbanceCursor {
            all,
            next: 0,
            active: Vec::new(),
        }
    }

    /// Disturbance values held over `[t, t + dt)`.
    fn at(&mut self, t_s: u64) -> DisturbanceInputs {
        while self.next < self.all.len() && self.all[self.next].start_s <= t_s {
            self.active.push(&self.all[self.next]);
            self.next += 1;
        }
        self.active.retain(|d| d.end_s > t_s);
        let mut out = DisturbanceInputs::default();
        for d in &self.active {
            match d.kind {
                DisturbanceKind::Meal => out.cho_rate += d.level(),
                DisturbanceKind::Exercise => out.exercise_hrr = out.exercise_hrr.max(d.level()),
            }
        }
        out
    }
}

fn announcement(protocol: &Protocol, from_s: u64, to_s: u64) -> (Option<f64>, ExercisePhase) {
    let mut meal = None;
    let mut phase = ExercisePhase::Resting;
    // Disturbances are time ordered; only those starting before `to_s` matter.
    let upto = protocol.disturbances.partition_point(|d| d.start_s < to_s);
    for d in protocol.disturbances[..upto].iter().rev() {
        match d.kind {
            DisturbanceKind::Meal if d.start_s >= from_s && d.announced => {
                *meal.get_or_insert(0.0) += d.announced_magnitude;
            }
            DisturbanceKind::Exercise if d.start_s >= from_s => phase = ExercisePhase::Start,
            DisturbanceKind::Exercise if d.end_s > from_s && phase == ExercisePhase::Resting => {
                phase = ExercisePhase::Ongoing
            }
            _ => {}
        }
        // Sessions and meals last far less than a day.
        if d.start_s + 86_400 < from_s {
            break;
        }
    }
    (meal, phase)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationResult {
    pub stats: PatientStats,
    pub min_bg: f64,
    pub trace: Option<Trace>,
}

/// Called after every controller step with the observation, the state
/// before and after, and the decision.
pub trait StepObserver<S> {
    fn observe(&mut self, obs: &Observation, before: &S, after: &S, decision: &ControlDecision);
}

impl<S> StepObserver<S> for () {
    fn observe(&mut self, _: &Observation, _: &S, _: &S, _: &ControlDecision) {}
}

pub fn simulate_closed_loop<M: PatientModel, C: Controller>(
    patient: &VirtualPatient,
    protocol: &Protocol,
    controller: &C,
    model: &M,
    config: &SimulationConfig,
    keep_trace: bool,
) -> Result<SimulationResult> {
    simulate_observed(patient, protocol, controller, model, config, keep_trace, &mut ())
}

/// [`simulate_closed_loop`] with a hook on every controller step.
pub fn simulate_observed<M: PatientModel, C: Controller>(
    patient: &VirtualPatient,
    protocol: &Protocol,
    controller: &C,
    model: &M,
    config: &SimulationConfig,
    keep_trace: bool,
    observer: &mut impl StepObserver<C::State>,
) -> Result<SimulationResult> {
    config.validate()?;
    if protocol.horizon_s < config.horizon_s {
        return Err(Error::HorizonMismatch {
            protocol_s: protocol.horizon_s,
            required_s: config.horizon_s,
        });
    }
    let id = patient.patient.id;
    let params = model.bind(&patient.parameters, patient.patient.body_weight_kg)?;
    let ss = model.steady_state(&params, config.initial_bg)?;
    let mut x = ss.state;
    let patient_basal = ss.basal_u_per_h;

    let mut diffusion_rng = rng::stream(config.seed, id, StreamRole::Diffusion);
    let mut measurement_rng = rng::stream(config.seed, id, StreamRole::Measurement);
    let mut stepper = EulerMaruyama::new(model);
    let mut cursor = DisturbanceCursor::new(&protocol.disturbances);
    let analytics = config.analytics_config();
    let mut stats = PatientStats::new(id, &analytics);
    let mut trace = keep_trace.then(|| Trace {
        patient_id: id,
        dt_s: config.dt_s,
        ..Default::default()
    });

    let period = config.controller_period_s;
    let dt_min = config.dt_s as f64 / 60.0;
    let period_h = period as f64 / 3600.0;
    let mut ctrl_state = controller.initial_state(patient_basal);
    let mut decision = ControlDecision::default();
    let mut u = ModelInputs::default();
    let mut y = 0.0;

    let mut t = 0;
    while t < config.horizon_s {
        let t_min = t as f64 / 60.0;
        let tick = t % period == 0;
        if tick {
            y = measure(model, t_min, &x, &params, &mut measurement_rng);
            let (meal, exercise) = announcement(protocol, t, t + period);
            let obs = Observation {
                t_s: t,
                y,
                announced_meal_g: meal,
                exercise,
                patient_basal_u_per_h: patient_basal,
                period_s: period,
            };
            let (next, d) = controller.step(&ctrl_state, &obs);
            observer.observe(&obs, &ctrl_state, &next, &d);
            ctrl_state = next;
            decision = d;
            let period_min = period as f64 / 60.0;
            u = ModelInputs {
                insulin_basal: decision.basal_u_per_h * 1000.0 / 60.0,
                insulin_bolus: decision.insulin_bolus_u * 1000.0 / period_min,
                glucagon: decision.glucagon_ug / period_min,
            };
        }
        let d = cursor.at(t);
        let bg = model.output(t_min, &x, &params);
        let share = config.dt_s as f64 / period as f64;
        let doses = SampleDoses {
            basal_u: decision.basal_u_per_h * period_h * share,
            bolus_u: decision.insulin_bolus_u * share,
            glucagon_ug: decision.glucagon_ug * share,
        };
        stats.accumulate_sample(t, bg, doses, config.dt_s);
        if let Some(tr) = trace.as_mut() {
            tr.push(t, bg, y, &d, &decision, tick);
        }
        stepper
            .step(model, &mut x, &u, &d, &params, t_min, dt_min, &mut diffusion_rng)
            .map_err(|component| Error::NonFinite { t_s: t, component })?;
        t += config.dt_s;
    }
    let min_bg = stats.min_bg.unwrap_or(f64::NAN);
    Ok(SimulationResult { stats, min_bg, trace })
}

/// Result of a whole trial.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialOutcome {
    pub accumulator: TrialAccumulator,
    pub report: TrialReport,
    pub worst_trace: Option<Trace>,
    /// Every patient's trace, with [`TracePolicy::Always`].
    pub traces: BTreeMap<u64, Trace>,
}

pub fn run_trial<M: PatientModel, C: Controller>(
    population: &[VirtualPatient],
    generator: &ProtocolGenerator,
    controller: &C,
    model: &M,
    config: &SimulationConfig,
    threads: Option<usize>,
) -> Result<TrialOutcome> {
    run_trial_with_progress(population, generator, controller, model, config, threads, &|_| {})
}

/// [`run_trial`] calling `progress` with the number of finished patients.
pub fn run_trial_with_progress<M: PatientModel, C: Controller>(
    population: &[VirtualPatient],
    generator: &ProtocolGenerator,
    controller: &C,
    model: &M,
    config: &SimulationConfig,
    threads: Option<usize>,
    progress: &(dyn Fn(u64) + Sync),
) -> Result<TrialOutcome> {
    generator.check_horizon(config.horizon_s)?;
    let protocol_for = |vp: &VirtualPatient| {
        generator.generate(config.seed, vp.patient.id, vp.patient.body_weight_kg, config.horizon_s)
    };
    run_trial_with(population, &protocol_for, controller, model, config, threads, progress)
}

/// Run a trial with protocols supplied by `protocol_for`.
pub fn run_trial_with<M: PatientModel, C: Controller>(
    population: &[VirtualPatient],
    protocol_for: &(dyn Fn(&VirtualPatient) -> Result<Protocol> + Sync),
    controller: &C,
    model: &M,
    config: &SimulationConfig,
    threads: Option<usize>,
    progress: &(dyn Fn(u64) + Sync),
) -> Result<TrialOutcome> {
    if population.is_empty() {
        return Err(Error::Config("population is empty".into()));
    }
    config.validate()?;
    let analytics = config.analytics_config();
    let keep_all = config.store_trace == TracePolicy::Always;
    let done = AtomicU64::new(0);

    type Partial = (TrialAccumulator, Vec<Trace>);
    let simulate_one = |mut part: Partial, vp: &VirtualPatient| -> Partial {
        let id = vp.patient.id;
        let result = protocol_for(vp)
            .and_then(|p| simulate_closed_loop(vp, &p, controller, model, config, keep_all));
        match result {
            Ok(r) => {
                part.0
                    .add_patient(&r.stats)
                    .expect("patient stats share the trial grid");
                part.1.extend(r.trace);
            }
            Err(e) => part.0.add_aborted(id, e.to_string()),
        }
        progress(done.fetch_add(1, Ordering::Relaxed) + 1);
        part
    };
    let (accumulator, traces) = crate::with_threads(threads, || {
        population
            .par_iter()
            .fold(|| (TrialAccumulator::empty(analytics), Vec::new()), simulate_one)
            .reduce(
                || (TrialAccumulator::empty(analytics), Vec::new()),
                |(a, mut ta), (b, tb)| {
                    ta.extend(tb);
                    (a.merge(&b).expect("partial accumulators share the trial grid"), ta)
                },
            )
    });
    let report = TrialReport::from_accumulator(&accumulator)?;
    let mut traces: BTreeMap<u64, Trace> = traces.into_iter().map(|t| (t.patient_id, t)).collect();

    let worst_id = report.worst_case.patient_id;
    let worst_trace = match config.store_trace {
        TracePolicy::Never => None,
        TracePolicy::Always => traces.get(&worst_id).cloned(),
        TracePolicy::WorstCaseOnly => {
            // Streams are keyed by patient id, so a rerun reproduces the run.
            let vp = population
                .iter()
                .find(|vp| vp.patient.id == worst_id)
                .expect("worst case comes from the population");
            let p = protocol_for(vp)?;
            simulate_closed_loop(vp, &p, controller, model, config, true)?.trace
        }
    };
    if !keep_all {
        traces.clear();
    }
    Ok(TrialOutcome {
        accumulator,
        report,
        worst_trace,
        traces,
    })
}

//! Virtual patients: demographics and physiological parameter sets.

use std::collections::BTreeMap;

use chrono::{Datelike, NaiveDate};
use rand::Rng;
use rand_distr::{Distribution as _, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::physiology::PatientModel;
use crate::rng::{self, StreamRole};

/// Redraw budget for demographic attributes and for whole parameter sets.
pub const REJECTION_BUDGET: u32 = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sex {
    Female,
    Male,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Patient {
    pub id: u64,
    pub first_name: String,
    pub last_name: String,
    pub date_of_birth: NaiveDate,
    pub place_of_birth: String,
    pub sex: Sex,
    pub height_cm: f64,
    pub body_weight_kg: f64,
    pub resting_heart_rate_bpm: f64,
}

impl Patient {
    /// Completed years of age on `on`.
    pub fn age_years(&self, on: NaiveDate) -> i32 {
        let mut age = on.year() - self.date_of_birth.year();
        if (on.month(), on.day()) < (self.date_of_birth.month(), self.date_of_birth.day()) {
            age -= 1;
        }
        age
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalSpec {
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NameTables {
    pub female_first: Vec<String>,
    pub male_first: Vec<String>,
    pub last: Vec<String>,
    pub places: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemographicsConfig {
    pub height_cm: NormalSpec,
    pub body_weight_kg: NormalSpec,
    pub resting_heart_rate_bpm: NormalSpec,
    pub birth_date_from: NaiveDate,
    pub birth_date_to: NaiveDate,
    pub names: NameTables,
}

const BUNDLED_DEMOGRAPHICS: &str = include_str!("../data/demographics.toml");

impl Default for DemographicsConfig {
    fn default() -> Self {
        Self::from_toml(BUNDLED_DEMOGRAPHICS).expect("bundled demographics parse")
    }
}

impl DemographicsConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::parse("demographics", e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, spec) in [
            ("height_cm", self.height_cm),
            ("body_weight_kg", self.body_weight_kg),
            ("resting_heart_rate_bpm", self.resting_heart_rate_bpm),
        ] {
            if !(spec.sd >= 0.0 && spec.sd.is_finite() && spec.mean.is_finite()) {
                return Err(Error::Config(format!(
                    "{name}: mean {} / sd {} invalid",
                    spec.mean, spec.sd
                )));
            }
        }
        if self.birth_date_from > self.birth_date_to {
            return Err(Error::Config("birth date range is empty".into()));
        }
        let n = &self.names;
        if n.female_first.is_empty() || n.male_first.is_empty() || n.last.is_empty() || n.places.is_empty() {
            return Err(Error::Config("name tables must be nonempty".into()));
        }
        Ok(())
    }
}

fn positive_normal<R: Rng + ?Sized>(rng: &mut R, spec: NormalSpec, what: &str) -> Result<f64> {
    for _ in 0..REJECTION_BUDGET {
        let z: f64 = StandardNormal.sample(rng);
        let v = spec.mean + spec.sd * z;
        if v > 0.0 {
            return Ok(v);
        }
    }
    Err(Error::RejectionBudget {
        what: format!("{what} (mean {}, sd {})", spec.mean, spec.sd),
        attempts: REJECTION_BUDGET,
    })
}

fn pick<'a, R: Rng + ?Sized>(rng: &mut R, table: &'a [String]) -> &'a str {
    &table[rng.random_range(0..table.len())]
}

/// Draw one patient's demographics.
pub fn sample_patient<R: Rng + ?Sized>(
    rng: &mut R,
    id: u64,
    config: &DemographicsConfig,
) -> Result<Patient> {
    let sex = if rng.random_bool(0.5) { Sex::Female } else { Sex::Male };
    let first = match sex {
        Sex::Female => pick(rng, &config.names.female_first),
        Sex::Male => pick(rng, &config.names.male_first),
    }
    .to_owned();
    let last_name = pick(rng, &config.names.last).to_owned();
    let place_of_birth = pick(rng, &config.names.places).to_owned();

    let span = (config.birth_date_to - config.birth_date_from).num_days();
    let offset = rng.random_range(0..=span);
    let date_of_birth = config.birth_date_from + chrono::Days::new(offset as u64);

    let height_cm = positive_normal(rng, config.height_cm, "height")?;
    let body_weight_kg = positive_normal(rng, config.body_weight_kg, "body weight")?;
    let resting_heart_rate_bpm =
        positive_normal(rng, config.resting_heart_rate_bpm, "resting heart rate")?;

    Ok(Patient {
        id,
        first_name: first,
        last_name,
        date_of_birth,
        place_of_birth,
        sex,
        height_cm,
        body_weight_kg,
        resting_heart_rate_bpm,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParameterDistribution {
    Normal { mean: f64, sd: f64 },
    Lognormal { mu: f64, sigma: f64 },
    Uniform { low: f64, high: f64 },
    Fixed { value: f64 },
}

impl ParameterDistribution {
    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            ParameterDistribution::Normal { mean, sd } => {
                let z: f64 = StandardNormal.sample(rng);
                mean + sd * z
            }
            ParameterDistribution::Lognormal { mu, sigma } => {
                let z: f64 = StandardNormal.sample(rng);
                (mu + sigma * z).exp()
            }
            ParameterDistribution::Uniform { low, high } => low + (high - low) * rng.random::<f64>(),
            ParameterDistribution::Fixed { value } => value,
        }
    }

    /// Within one standard deviation of the mean, for normal entries.
    pub fn within_one_sd(&self, value: f64) -> bool {
        match *self {
            ParameterDistribution::Normal { mean, sd } => (value - mean).abs() <= sd,
            _ => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSpec {
    pub name: String,
    #[serde(default)]
    pub unit: String,
    pub distribution: ParameterDistribution,
}

/// Distribution table for one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterTable {
    pub model: String,
    pub steady_state_bg: f64,
    pub min_basal_u_per_h: f64,
    #[serde(rename = "parameter")]
    pub parameters: Vec<ParameterSpec>,
}

const BUNDLED_HOVORKA_TABLE: &str = include_str!("../data/hovorka_parameters.toml");

impl ParameterTable {
    pub fn hovorka_default() -> Self {
        Self::from_toml(BUNDLED_HOVORKA_TABLE).expect("bundled parameter table parse")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let table: Self = toml::from_str(text).map_err(|e| Error::parse("parameter table", e))?;
        if !(table.steady_state_bg > 0.0) {
            return Err(Error::Config("steady_state_bg must be positive".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for spec in &table.parameters {
            if !seen.insert(spec.name.as_str()) {
                return Err(Error::Config(format!("parameter `{}` listed twice", spec.name)));
            }
            let ok = match spec.distribution {
                ParameterDistribution::Normal { mean, sd } => mean.is_finite() && sd >= 0.0,
                ParameterDistribution::Lognormal { mu, sigma } => mu.is_finite() && sigma >= 0.0,
                ParameterDistribution::Uniform { low, high } => low.is_finite() && high >= low,
                ParameterDistribution::Fixed { value } => value.is_finite(),
            };
            if !ok {
                return Err(Error::Config(format!("parameter `{}` has an invalid distribution", spec.name)));
            }
        }
        Ok(table)
    }

    /// Check the table provides every parameter `model` reads.
    pub fn check_complete<M: PatientModel>(&self, model: &M) -> Result<()> {
        for name in model.parameter_names() {
            if !self.parameters.iter().any(|p| p.name == *name) {
                return Err(Error::Config(format!(
                    "parameter table lacks `{name}` required by model {}",
                    model.id()
                )));
            }
        }
        Ok(())
    }

    pub fn spec(&self, name: &str) -> Option<&ParameterSpec> {
        self.parameters.iter().find(|p| p.name == name)
    }

    /// Table with every parameter fixed at its central value.
    pub fn degenerate(&self) -> Self {
        let mut out = self.clone();
        for p in &mut out.parameters {
            let v = match p.distribution {
                ParameterDistribution::Normal { mean, .. } => mean,
                ParameterDistribution::Lognormal { mu, .. } => mu.exp(),
                ParameterDistribution::Uniform { low, high } => 0.5 * (low + high),
                ParameterDistribution::Fixed { value } => value,
            };
            p.distribution = ParameterDistribution::Fixed { value: v };
        }
        out
    }
}

/// A sampled physiological parameter set plus its steady-state basal rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    pub values: BTreeMap<String, f64>,
    /// U/h
    pub basal_u_per_h: f64,
}

impl ParameterSet {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.get(name).copied()
    }
}

/// A rule an accepted parameter set must satisfy.
#[derive(Debug, Clone, PartialEq)]
pub enum RuleViolation {
    Negative { name: String, value: f64 },
    OutsideOneSd { name: String, value: f64 },
    BasalTooLow { basal_u_per_h: f64 },
    Missing { name: String },
}

/// The three acceptance rules: nonnegative values, normal draws within one
/// SD, basal at least the table minimum.
pub fn check_parameter_rules(set: &ParameterSet, table: &ParameterTable) -> Vec<RuleViolation> {
    let mut out = Vec::new();
    for spec in &table.parameters {
        match set.values.get(&spec.name) {
            None => out.push(RuleViolation::Missing {
                name: spec.name.clone(),
            }),
            Some(&v) => {
                if !(v >= 0.0) {
                    out.push(RuleViolation::Negative {
                        name: spec.name.clone(),
                        value: v,
                    });
                }
                if !spec.distribution.within_one_sd(v) {
                    out.push(RuleViolation::OutsideOneSd {
                        name: spec.name.clone(),
                        value: v,
                    });
                }
            }
        }
    }
    if !(set.basal_u_per_h >= table.min_basal_u_per_h) {
        out.push(RuleViolation::BasalTooLow {
            basal_u_per_h: set.basal_u_per_h,
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledParameters {
    pub set: ParameterSet,
    /// Draws consumed, including the accepted one.
    pub attempts: u32,
}

/// Rejection-sample a parameter set for `patient`.
///
/// Parameters are independent, so the nonnegativity and one-SD rules are
/// enforced by redrawing each parameter on its own; this gives the same
/// distribution as rejecting whole sets and keeps the joint rejection loop
/// for the basal rule, which couples all parameters.
pub fn sample_parameter_set<M: PatientModel, R: Rng + ?Sized>(
    rng: &mut R,
    patient: &Patient,
    table: &ParameterTable,
    model: &M,
) -> Result<SampledParameters> {
    table.check_complete(model)?;
    for attempt in 1..=REJECTION_BUDGET {
        let mut values = BTreeMap::new();
        for spec in &table.parameters {
            values.insert(spec.name.clone(), draw_admissible(rng, spec)?);
        }
        let mut set = ParameterSet {
            values,
            basal_u_per_h: 0.0,
        };
        let Ok(params) = model.bind(&set, patient.body_weight_kg) else {
            continue;
        };
        let Ok(ss) = model.steady_state(&params, table.steady_state_bg) else {
            continue;
        };
        if ss.basal_u_per_h < table.min_basal_u_per_h {
            continue;
        }
        set.basal_u_per_h = ss.basal_u_per_h;
        return Ok(SampledParameters { set, attempts: attempt });
    }
    Err(Error::RejectionBudget {
        what: format!("parameter set for patient {}", patient.id),
        attempts: REJECTION_BUDGET,
    })
}

fn draw_admissible<R: Rng + ?Sized>(rng: &mut R, spec: &ParameterSpec) -> Result<f64> {
    for _ in 0..REJECTION_BUDGET {
        let v = spec.distribution.draw(rng);
        if v >= 0.0 && spec.distribution.within_one_sd(v) {
            return Ok(v);
        }
    }
    Err(Error::RejectionBudget {
        what: format!("parameter `{}`", spec.name),
        attempts: REJECTION_BUDGET,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VirtualPatient {
    pub patient: Patient,
    pub parameters: ParameterSet,
}

/// Generate patients `0..n`. Each id draws from its own streams, so the
/// result does not depend on `threads`.
pub fn generate_population<M: PatientModel>(
    seed: u64,
    n: usize,
    demographics: &DemographicsConfig,
    table: &ParameterTable,
    model: &M,
    threads: Option<usize>,
) -> Result<Vec<VirtualPatient>> {
    if n == 0 {
        return Err(Error::Config("population size must be at least 1".into()));
    }
    demographics.validate()?;
    table.check_complete(model)?;
    crate::with_threads(threads, || {
        (0..n as u64)
            .into_par_iter()
            .map(|id| {
                let mut demo_rng = rng::stream(seed, id, StreamRole::Demographics);
                let patient = sample_patient(&mut demo_rng, id, demographics)?;
                let mut param_rng = rng::stream(seed, id, StreamRole::Parameters);
                let sampled = sample_parameter_set(&mut param_rng, &patient, table, model)?;
                Ok(VirtualPatient {
                    patient,
                    parameters: sampled.set,
                })
            })
            .collect()
    })
}

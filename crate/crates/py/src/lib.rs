//! Python bindings: populations, protocols, the dual-hormone controller,
//! single-patient simulation, trials, reports and the store.
//!
//! Structured values that have no natural Python class (protocols, full
//! reports) cross the boundary as JSON text.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use vctrial::analytics::{compare_trials, GlycemicRange, TrialReport};
use vctrial::controller::{
    Controller, DualHormone, DualHormoneProfile, DualHormoneState, ExercisePhase, Observation,
};
use vctrial::manifest::{self, RunOverrides};
use vctrial::physiology::HovorkaExtended;
use vctrial::population::{generate_population, DemographicsConfig, ParameterTable, Sex, VirtualPatient};
use vctrial::protocol::{meal_grams as core_meal_grams, MealClass, ProtocolGenerator, WEEK_S};
use vctrial::simulation::{run_trial as core_run_trial, simulate_closed_loop, SimulationConfig, TracePolicy};
use vctrial::storage::{PopulationFilter, Store};
use vctrial::{Error, ErrorClass};

fn py_err(e: Error) -> PyErr {
    match e.class() {
        ErrorClass::Config => PyValueError::new_err(e.to_string()),
        ErrorClass::Data => PyIOError::new_err(e.to_string()),
        ErrorClass::Runtime => PyRuntimeError::new_err(e.to_string()),
    }
}

fn profile(profile_toml: Option<&str>, assumed_basal_scale: Option<f64>) -> PyResult<DualHormoneProfile> {
    let mut p = match profile_toml {
        Some(t) => DualHormoneProfile::from_toml(t).map_err(py_err)?,
        None => DualHormoneProfile::default(),
    };
    if let Some(s) = assumed_basal_scale {
        p.assumed_basal_scale = s;
    }
    p.validate().map_err(py_err)?;
    Ok(p)
}

fn config(seed: u64, weeks: u64, store_trace: &str) -> PyResult<SimulationConfig> {
    let cfg = SimulationConfig {
        seed,
        horizon_s: weeks * WEEK_S,
        store_trace: store_trace.parse::<TracePolicy>().map_err(py_err)?,
        ..SimulationConfig::default()
    };
    cfg.validate().map_err(py_err)?;
    Ok(cfg)
}

/// A set of virtual patients with their parameter sets.
#[pyclass(module = "vctrial_py", frozen, skip_from_py_object)]
struct Population {
    patients: Vec<VirtualPatient>,
}

#[pymethods]
impl Population {
    fn __len__(&self) -> usize {
        self.patients.len()
    }

    fn __repr__(&self) -> String {
        format!("Population({} patients)", self.patients.len())
    }

    #[getter]
    fn ids(&self) -> Vec<u64> {
        self.patients.iter().map(|p| p.patient.id).collect()
    }

    #[getter]
    fn body_weights_kg(&self) -> Vec<f64> {
        self.patients.iter().map(|p| p.patient.body_weight_kg).collect()
    }

    /// Steady-state basal rates, U/h.
    #[getter]
    fn basal_rates(&self) -> Vec<f64> {
        self.patients.iter().map(|p| p.parameters.basal_u_per_h).collect()
    }

    /// Physiological parameters of patient `index`.
    fn parameters(&self, index: usize) -> PyResult<BTreeMap<String, f64>> {
        self.patients
            .get(index)
            .map(|p| p.parameters.values.clone())
            .ok_or_else(|| PyValueError::new_err(format!("no patient at index {index}")))
    }

    /// One JSON object per patient.
    fn to_jsonl(&self) -> String {
        self.patients
            .iter()
            .map(|p| serde_json::to_string(p).expect("patients serialize"))
            .collect::<Vec<_>>()
            .join("\n")
    }

    fn save(&self, store: PathBuf, id: &str) -> PyResult<()> {
        let store = Store::open(store).map_err(py_err)?;
        store.save_population(id, &self.patients).map_err(py_err)?;
        Ok(())
    }

    #[staticmethod]
    fn load(store: PathBuf, id: &str) -> PyResult<Self> {
        let store = Store::open(store).map_err(py_err)?;
        Ok(Population {
            patients: store.load_population(id).map_err(py_err)?,
        })
    }

    /// Patients matching every given predicate. Ranges are inclusive
    /// `(min, max)` pairs; ages are computed on `on` (YYYY-MM-DD).
    #[pyo3(signature = (sex=None, weight_kg=None, height_cm=None, age_years=None, on=None))]
    fn query(
        &self,
        sex: Option<&str>,
        weight_kg: Option<(f64, f64)>,
        height_cm: Option<(f64, f64)>,
        age_years: Option<(i32, i32)>,
        on: Option<&str>,
    ) -> PyResult<Self> {
        let sex = match sex {
            None => None,
            Some("female") => Some(Sex::Female),
            Some("male") => Some(Sex::Male),
            Some(other) => return Err(PyValueError::new_err(format!("unknown sex `{other}`"))),
        };
        let reference_date = on
            .map(|d| d.parse().map_err(|e| PyValueError::new_err(format!("bad date `{d}`: {e}"))))
            .transpose()?;
        let filter = PopulationFilter {
            sex,
            weight_kg: weight_kg.map(|(a, b)| [a, b]),
            height_cm: height_cm.map(|(a, b)| [a, b]),
            age_years: age_years.map(|(a, b)| [a, b]),
            reference_date,
        };
        filter.validate().map_err(py_err)?;
        Ok(Population {
            patients: self.patients.iter().filter(|p| filter.matches(p)).cloned().collect(),
        })
    }
}

/// Patients `0..n` drawn from the bundled demographics and parameter table.
#[pyfunction(name = "generate_population")]
#[pyo3(signature = (seed, n, threads=None))]
fn py_generate_population(py: Python<'_>, seed: u64, n: usize, threads: Option<usize>) -> PyResult<Population> {
    let patients = py
        .detach(|| {
            generate_population(
                seed,
                n,
                &DemographicsConfig::default(),
                &ParameterTable::hovorka_default(),
                &HovorkaExtended,
                threads,
            )
        })
        .map_err(py_err)?;
    Ok(Population { patients })
}

/// Carbohydrate content of a meal class for a body weight, g.
#[pyfunction]
fn meal_grams(class: &str, body_weight_kg: f64) -> PyResult<f64> {
    let c = match class {
        "large" => MealClass::Large,
        "medium" => MealClass::Medium,
        "small" => MealClass::Small,
        "snack" => MealClass::Snack,
        other => return Err(PyValueError::new_err(format!("unknown meal class `{other}`"))),
    };
    Ok(core_meal_grams(c, body_weight_kg))
}

/// Stateful dual-hormone controller.
#[pyclass(module = "vctrial_py")]
struct DualHormoneController {
    inner: DualHormone,
    state: DualHormoneState,
    patient_basal: f64,
    period_s: u64,
}

#[pymethods]
impl DualHormoneController {
    #[new]
    #[pyo3(signature = (patient_basal_u_per_h, profile_toml=None, assumed_basal_scale=None, period_s=300))]
    fn new(
        patient_basal_u_per_h: f64,
        profile_toml: Option<&str>,
        assumed_basal_scale: Option<f64>,
        period_s: u64,
    ) -> PyResult<Self> {
        let inner = DualHormone::new(profile(profile_toml, assumed_basal_scale)?).map_err(py_err)?;
        let state = inner.initial_state(patient_basal_u_per_h);
        Ok(DualHormoneController {
            inner,
            state,
            patient_basal: patient_basal_u_per_h,
            period_s,
        })
    }

    /// Profile as TOML.
    #[getter]
    fn profile_toml(&self) -> String {
        self.inner.profile.to_toml()
    }

    /// Current insulin-to-carb ratio, g/U.
    #[getter]
    fn icr(&self) -> f64 {
        self.state.icr
    }

    /// One controller period. `exercise` is "resting", "start" or
    /// "ongoing". Returns (basal U/h, insulin bolus U, glucagon μg).
    #[pyo3(signature = (t_s, cgm, announced_meal_g=None, exercise="resting"))]
    fn step(&mut self, t_s: u64, cgm: f64, announced_meal_g: Option<f64>, exercise: &str) -> PyResult<(f64, f64, f64)> {
        let exercise = match exercise {
            "resting" => ExercisePhase::Resting,
            "start" => ExercisePhase::Start,
            "ongoing" => ExercisePhase::Ongoing,
            other => return Err(PyValueError::new_err(format!("unknown exercise phase `{other}`"))),
        };
        let obs = Observation {
            t_s,
            y: cgm,
            announced_meal_g,
            exercise,
            patient_basal_u_per_h: self.patient_basal,
            period_s: self.period_s,
        };
        let (next, d) = self.inner.step(&self.state, &obs);
        self.state = next;
        Ok((d.basal_u_per_h, d.insulin_bolus_u, d.glucagon_ug))
    }
}

/// Closed-loop simulation of one patient; returns the trace columns.
#[pyfunction]
#[pyo3(signature = (population, index, seed=0, weeks=1, start_week=0, assumed_basal_scale=1.0))]
fn simulate_patient(
    py: Python<'_>,
    population: &Population,
    index: usize,
    seed: u64,
    weeks: u64,
    start_week: u32,
    assumed_basal_scale: f64,
) -> PyResult<BTreeMap<&'static str, Vec<f64>>> {
    let vp = population
        .patients
        .get(index)
        .ok_or_else(|| PyValueError::new_err(format!("no patient at index {index}")))?
        .clone();
    let cfg = config(seed, weeks, "never")?;
    let ctrl = DualHormone::new(profile(None, Some(assumed_basal_scale))?).map_err(py_err)?;
    let generator = ProtocolGenerator {
        start_week,
        ..ProtocolGenerator::default()
    };
    let trace = py
        .detach(|| {
            let p = generator.generate(seed, vp.patient.id, vp.patient.body_weight_kg, cfg.horizon_s)?;
            simulate_closed_loop(&vp, &p, &ctrl, &HovorkaExtended, &cfg, true)
        })
        .map_err(py_err)?
        .trace
        .expect("trace requested");
    Ok(BTreeMap::from([
        ("t_s", trace.t_s.iter().map(|&t| t as f64).collect()),
        ("bg", trace.bg),
        ("cgm", trace.cgm),
        ("cho_rate", trace.cho_rate),
        ("hrr", trace.hrr),
        ("basal", trace.basal),
        ("insulin_bolus", trace.insulin_bolus),
        ("glucagon_bolus", trace.glucagon_bolus),
    ]))
}

/// Summary statistics of a finished trial.
#[pyclass(module = "vctrial_py", frozen)]
struct Report {
    inner: TrialReport,
}

#[pymethods]
impl Report {
    #[getter]
    fn n_patients(&self) -> u64 {
        self.inner.n_patients
    }

    #[getter]
    fn mean_bg(&self) -> f64 {
        self.inner.mean_bg
    }

    #[getter]
    fn min_bg(&self) -> f64 {
        self.inner.min_bg
    }

    /// Population-mean fraction of time per glycemic range.
    #[getter]
    fn tir(&self) -> BTreeMap<&'static str, f64> {
        GlycemicRange::ALL
            .iter()
            .map(|&r| (r.name(), self.inner.mean_tir(r)))
            .collect()
    }

    /// Mean daily basal (U), bolus (U) and glucagon (μg).
    #[getter]
    fn daily_doses(&self) -> BTreeMap<&'static str, f64> {
        let d = &self.inner.doses;
        BTreeMap::from([
            ("basal_u", d.basal.mean),
            ("bolus_u", d.bolus.mean),
            ("glucagon_ug", d.glucagon.mean),
        ])
    }

    #[getter]
    fn worst_case_patient(&self) -> u64 {
        self.inner.worst_case.patient_id
    }

    #[getter]
    fn aborted(&self) -> Vec<u64> {
        self.inner.aborted.iter().map(|a| a.patient_id).collect()
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Report {
            inner: TrialReport::from_json(text).map_err(py_err)?,
        })
    }

    fn cdf_csv(&self) -> String {
        self.inner.cdf_csv()
    }

    fn tir_box_csv(&self) -> String {
        self.inner.tir_box_csv()
    }

    fn dose_csv(&self) -> String {
        self.inner.dose_csv()
    }
}

/// Run a trial over `population` with the bundled protocol library.
#[pyfunction]
#[pyo3(signature = (population, seed=0, weeks=1, start_week=0, assumed_basal_scale=1.0, profile_toml=None, threads=None))]
#[allow(clippy::too_many_arguments)]
fn run_trial(
    py: Python<'_>,
    population: &Population,
    seed: u64,
    weeks: u64,
    start_week: u32,
    assumed_basal_scale: f64,
    profile_toml: Option<&str>,
    threads: Option<usize>,
) -> PyResult<Report> {
    let cfg = config(seed, weeks, "never")?;
    let ctrl = DualHormone::new(profile(profile_toml, Some(assumed_basal_scale))?).map_err(py_err)?;
    let generator = ProtocolGenerator {
        start_week,
        ..ProtocolGenerator::default()
    };
    let out = py
        .detach(|| core_run_trial(&population.patients, &generator, &ctrl, &HovorkaExtended, &cfg, threads))
        .map_err(py_err)?;
    Ok(Report { inner: out.report })
}

/// Deltas (b minus a) between two reports, as JSON.
#[pyfunction]
fn compare(a: &Report, b: &Report) -> PyResult<String> {
    Ok(compare_trials(&a.inner, &b.inner).map_err(py_err)?.to_json())
}

/// Run a manifest file; returns the trial report.
#[pyfunction]
#[pyo3(signature = (path, threads=None))]
fn run_manifest(py: Python<'_>, path: PathBuf, threads: Option<usize>) -> PyResult<Report> {
    let out = py
        .detach(|| {
            let resolved = manifest::resolve(&path, &RunOverrides::default())?;
            manifest::run(&resolved, threads, &|_| {})
        })
        .map_err(py_err)?;
    Ok(Report {
        inner: out.outcome.report,
    })
}

/// Re-run a recorded trial; True when the report is byte-identical.
#[pyfunction]
#[pyo3(signature = (store, trial_id, threads=None))]
fn rerun(py: Python<'_>, store: PathBuf, trial_id: &str, threads: Option<usize>) -> PyResult<bool> {
    py.detach(|| {
        let store = Store::open(store)?;
        manifest::verify_rerun(&store, trial_id, threads).map(|(_, same)| same)
    })
    .map_err(py_err)
}

#[pymodule]
fn vctrial_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Population>()?;
    m.add_class::<DualHormoneController>()?;
    m.add_class::<Report>()?;
    m.add_function(wrap_pyfunction!(py_generate_population, m)?)?;
    m.add_function(wrap_pyfunction!(meal_grams, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_patient, m)?)?;
    m.add_function(wrap_pyfunction!(run_trial, m)?)?;
    m.add_function(wrap_pyfunction!(compare, m)?)?;
    m.add_function(wrap_pyfunction!(run_manifest, m)?)?;
    m.add_function(wrap_pyfunction!(rerun, m)?)?;
    Ok(())
}

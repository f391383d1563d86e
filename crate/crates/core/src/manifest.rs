//! Run manifests: one TOML file naming everything a trial needs, and the
//! driver that executes it, records it and re-runs it.
//!
//! ```toml
//! trial_id = "trial-a"
//! store = "store"          # relative to the manifest
//! output_dir = "out/a"     # relative to the manifest
//! model = "hovorka-extended"
//!
//! [population]
//! id = "pop-100"           # loaded from the store...
//! seed = 42                # ...or generated and saved there when absent
//! patients = 100
//!
//! [controller]
//! profile = "profile.toml" # optional; the bundled profile otherwise
//! assumed_basal_scale = 0.5
//!
//! [protocol]
//! start_week = 0
//!
//! [simulation]
//! seed = 7
//! horizon_s = 604800
//! store_trace = "worst"
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use chrono::Utc;
use serde::{Deserialize, Serialize};

use crate::analytics::TrialReport;
use crate::controller::{DualHormone, DualHormoneProfile};
use crate::error::{Error, Result};
use crate::physiology::{HovorkaExtended, ModelKind};
use crate::population::{generate_population, DemographicsConfig, ParameterTable, VirtualPatient};
use crate::protocol::ProtocolGenerator;
use crate::simulation::{run_trial_with_progress, SimulationConfig, TracePolicy, TrialOutcome};
use crate::storage::{write_atomic, Store, TrialRecord};

fn default_model() -> String {
    ModelKind::HovorkaExtended.id().to_owned()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationRef {
    pub id: String,
    /// Generation parameters, used when `id` is not in the store yet.
    pub seed: Option<u64>,
    pub patients: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerRef {
    pub profile: Option<PathBuf>,
    /// Overrides the profile's `assumed_basal_scale`.
    pub assumed_basal_scale: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub trial_id: String,
    pub store: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default = "default_model")]
    pub model: String,
    pub population: PopulationRef,
    #[serde(default)]
    pub controller: ControllerRef,
    #[serde(default)]
    pub protocol: ProtocolGenerator,
    #[serde(default)]
    pub simulation: SimulationConfig,
}

impl RunManifest {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::parse("run manifest", e))
    }
}

/// Command-line style overrides applied on top of a manifest.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunOverrides {
    pub seed: Option<u64>,
    pub store_trace: Option<TracePolicy>,
    pub threads: Option<usize>,
}

/// A manifest with every reference resolved, ready to run.
#[derive(Debug, Clone)]
pub struct ResolvedRun {
    pub manifest_text: String,
    pub manifest: RunManifest,
    pub store: Store,
    pub output_dir: PathBuf,
    pub population: Vec<VirtualPatient>,
    pub profile: DualHormoneProfile,
    pub profile_text: String,
    pub model: ModelKind,
    pub config: SimulationConfig,
}

fn relative_to(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_owned()
    } else {
        base.join(p)
    }
}

/// Load a stored population, generating and saving it first if the
/// reference carries generation parameters and the id is absent.
pub fn resolve_population(store: &Store, r: &PopulationRef, threads: Option<usize>) -> Result<Vec<VirtualPatient>> {
    match store.load_population(&r.id) {
        Err(Error::MissingId { .. }) if r.seed.is_some() && r.patients.is_some() => {
            let pop = generate_population(
                r.seed.unwrap(),
                r.patients.unwrap(),
                &DemographicsConfig::default(),
                &ParameterTable::hovorka_default(),
                &HovorkaExtended,
                threads,
            )?;
            store.save_population(&r.id, &pop)?;
            Ok(pop)
        }
        other => other,
    }
}

/// Resolve every reference in the manifest at `path`.
pub fn resolve(path: &Path, overrides: &RunOverrides) -> Result<ResolvedRun> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    resolve_text(&text, base, overrides)
}

/// [`resolve`] for manifest text whose relative paths start at `base`.
pub fn resolve_text(text: &str, base: &Path, overrides: &RunOverrides) -> Result<ResolvedRun> {
    let manifest = RunManifest::from_toml(text)?;
    let model = ModelKind::from_id(&manifest.model)?;
    let mut config = manifest.simulation;
    if let Some(seed) = overrides.seed {
        config.seed = seed;
    }
    if let Some(policy) = overrides.store_trace {
        config.store_trace = policy;
    }
    config.validate()?;
    manifest.protocol.announcement.validate()?;
    manifest.protocol.check_horizon(config.horizon_s)?;

    let mut profile = match &manifest.controller.profile {
        Some(p) => {
            let p = relative_to(base, p);
            let t = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            DualHormoneProfile::from_toml(&t)?
        }
        None => DualHormoneProfile::default(),
    };
    if let Some(scale) = manifest.controller.assumed_basal_scale {
        profile.assumed_basal_scale = scale;
    }
    profile.validate()?;
    let profile_text = profile.to_toml();

    let store = Store::open(relative_to(base, &manifest.store))?;
    let population = resolve_population(&store, &manifest.population, overrides.threads)?;
    Ok(ResolvedRun {
        manifest_text: text.to_owned(),
        output_dir: relative_to(base, &manifest.output_dir),
        manifest,
        store,
        population,
        profile,
        profile_text,
        model,
        config,
    })
}

/// Everything a finished run produced.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub record: TrialRecord,
    pub outcome: TrialOutcome,
    /// Files written to the output directory.
    pub files: Vec<PathBuf>,
}

fn execute(
    population: &[VirtualPatient],
    generator: &ProtocolGenerator,
    profile: &DualHormoneProfile,
    model: ModelKind,
    config: &SimulationConfig,
    threads: Option<usize>,
    progress: &(dyn Fn(u64) + Sync),
) -> Result<TrialOutcome> {
    let controller = DualHormone::new(profile.clone())?;
    match model {
        ModelKind::HovorkaExtended => run_trial_with_progress(
            population,
            generator,
            &controller,
            &HovorkaExtended,
            config,
            threads,
            progress,
        ),
    }
}

/// Run a resolved manifest: simulate, store the report, profile, traces and
/// trial record, and write figure data to the output directory.
pub fn run(resolved: &ResolvedRun, threads: Option<usize>, progress: &(dyn Fn(u64) + Sync)) -> Result<RunOutput> {
    let m = &resolved.manifest;
    let outcome = execute(
        &resolved.population,
        &m.protocol,
        &resolved.profile,
        resolved.model,
        &resolved.config,
        threads,
        progress,
    )?;
    let store = &resolved.store;
    let profile_hash = store.save_profile(&resolved.profile_text)?;
    store.save_report(&m.trial_id, &outcome.report)?;
    for trace in outcome.worst_trace.iter().chain(outcome.traces.values()) {
        store.save_trace(&m.trial_id, trace)?;
    }
    let record = TrialRecord {
        trial_id: m.trial_id.clone(),
        created: Utc::now(),
        seed: resolved.config.seed,
        model_id: resolved.model.id().to_owned(),
        controller_id: resolved.profile.id.clone(),
        profile_hash,
        population_id: m.population.id.clone(),
        protocol_generator: m.protocol.clone(),
        config: resolved.config,
        report_id: m.trial_id.clone(),
        manifest: resolved.manifest_text.clone(),
    };
    store.save_trial(&record)?;
    let files = write_exports(&resolved.output_dir, &outcome)?;
    Ok(RunOutput { record, outcome, files })
}

/// Report and figure-data files for one trial.
pub fn write_exports(dir: &Path, outcome: &TrialOutcome) -> Result<Vec<PathBuf>> {
    let r = &outcome.report;
    let mut files = vec![
        ("report.json", r.to_json()),
        ("bg_cdf.csv", r.cdf_csv()),
        ("tir_box.csv", r.tir_box_csv()),
        ("tir_bars.csv", r.tir_bars_csv()),
        ("doses.csv", r.dose_csv()),
        ("bg_time.csv", r.bg_time_csv()),
    ];
    if let Some(t) = &outcome.worst_trace {
        files.push(("worst_trace.csv", t.to_csv()));
    }
    let mut out = Vec::new();
    for (name, body) in files {
        let path = dir.join(name);
        write_atomic(&path, body.as_bytes())?;
        out.push(path);
    }
    Ok(out)
}

/// Re-run a recorded trial from the artifacts in `store`.
pub fn rerun(store: &Store, trial_id: &str, threads: Option<usize>) -> Result<TrialOutcome> {
    let record = store.load_trial(trial_id)?;
    let population = store.load_population(&record.population_id)?;
    let profile = DualHormoneProfile::from_toml(&store.load_profile(&record.profile_hash)?)?;
    let model = ModelKind::from_id(&record.model_id)?;
    execute(
        &population,
        &record.protocol_generator,
        &profile,
        model,
        &record.config,
        threads,
        &|_| {},
    )
}

/// Re-run and compare the report bytes with the stored report.
pub fn verify_rerun(store: &Store, trial_id: &str, threads: Option<usize>) -> Result<(TrialReport, bool)> {
    let record = store.load_trial(trial_id)?;
    let stored = store.load_report(&record.report_id)?;
    let fresh = rerun(store, trial_id, threads)?.report;
    let same = fresh.to_json() == stored.to_json();
    Ok((fresh, same))
}

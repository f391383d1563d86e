//! Trial database: a directory of versioned, checksummed artifact files.
//!
//! Layout under the store root:
//!
//! ```text
//! populations/<id>.jsonl      one VirtualPatient per line
//! parameter_sets/<id>.jsonl   one ParameterSetRecord per line
//! protocols/<id>.jsonl        one Protocol per line
//! reports/<id>.json           a TrialReport
//! trials/<id>.json            a TrialRecord
//! profiles/<sha256>.toml      controller profiles, named by content hash
//! traces/<trial>/<patient>.csv
//! ```
//!
//! Every artifact file starts with a one-line JSON header
//! `{"format":..,"version":..,"sha256":..}` where the digest covers the
//! bytes after the header line. Writes go through a temporary file in the
//! same directory and an atomic rename.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use chrono::{DateTime, NaiveDate, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analytics::TrialReport;
use crate::error::{Error, Result};
use crate::population::{ParameterSet, Sex, VirtualPatient};
use crate::protocol::{DisturbanceKind, Protocol, ProtocolLibrary};
use crate::simulation::{SimulationConfig, Trace};

pub const SCHEMA_VERSION: u32 = 1;

/// Artifact kinds and their subdirectories.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArtifactKind {
    Population,
    ParameterSets,
    Protocols,
    Report,
    Trial,
    Profile,
}

impl ArtifactKind {
    pub fn dir(self) -> &'static str {
        match self {
            ArtifactKind::Population => "populations",
            ArtifactKind::ParameterSets => "parameter_sets",
            ArtifactKind::Protocols => "protocols",
            ArtifactKind::Report => "reports",
            ArtifactKind::Trial => "trials",
            ArtifactKind::Profile => "profiles",
        }
    }

    fn extension(self) -> &'static str {
        match self {
            ArtifactKind::Population | ArtifactKind::ParameterSets | ArtifactKind::Protocols => "jsonl",
            ArtifactKind::Report | ArtifactKind::Trial => "json",
            ArtifactKind::Profile => "toml",
        }
    }

    /// Name written into the header.
    pub fn format(self) -> &'static str {
        match self {
            ArtifactKind::Population => "vctrial-population",
            ArtifactKind::ParameterSets => "vctrial-parameter-sets",
            ArtifactKind::Protocols => "vctrial-protocols",
            ArtifactKind::Report => "vctrial-report",
            ArtifactKind::Trial => "vctrial-trial",
            ArtifactKind::Profile => "vctrial-profile",
        }
    }

    fn label(self) -> &'static str {
        match self {
            ArtifactKind::Population => "population",
            ArtifactKind::ParameterSets => "parameter sets",
            ArtifactKind::Protocols => "protocols",
            ArtifactKind::Report => "report",
            ArtifactKind::Trial => "trial",
            ArtifactKind::Profile => "profile",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Header line plus body.
pub fn encode_artifact(kind: ArtifactKind, body: &str) -> String {
    let header = Header {
        format: kind.format().to_owned(),
        version: SCHEMA_VERSION,
        sha256: sha256_hex(body.as_bytes()),
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    out.push_str(body);
    out
}

/// Check the header of `text` and return the body.
pub fn decode_artifact<'a>(kind: ArtifactKind, text: &'a str, path: &Path) -> Result<&'a str> {
    let (line, body) = text.split_once('\n').unwrap_or((text, ""));
    let header: Header = serde_json::from_str(line).map_err(|_| Error::Schema {
        path: path.to_owned(),
        expected: format!("{} v{SCHEMA_VERSION} header", kind.format()),
        found: "no header".into(),
    })?;
    if header.format != kind.format() || header.version != SCHEMA_VERSION {
        return Err(Error::Schema {
            path: path.to_owned(),
            expected: format!("{} v{SCHEMA_VERSION}", kind.format()),
            found: format!("{} v{}", header.format, header.version),
        });
    }
    if sha256_hex(body.as_bytes()) != header.sha256 {
        return Err(Error::Checksum(path.to_owned()));
    }
    Ok(body)
}

/// Per-patient parameter record for the `parameter_sets` artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSetRecord {
    pub patient_id: u64,
    pub parameters: ParameterSet,
}

/// Everything needed to re-run a trial, given the store it lives in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_id: String,
    pub created: DateTime<Utc>,
    pub seed: u64,
    pub model_id: String,
    pub controller_id: String,
    /// Content hash of the controller profile, see [`Store::save_profile`].
    pub profile_hash: String,
    pub population_id: String,
    pub protocol_generator: crate::protocol::ProtocolGenerator,
    pub config: SimulationConfig,
    pub report_id: String,
    /// The run manifest, verbatim.
    pub manifest: String,
}

/// Demographic filter for [`Store::query_population`]. Ranges are inclusive.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PopulationFilter {
    pub sex: Option<Sex>,
    pub weight_kg: Option<[f64; 2]>,
    pub height_cm: Option<[f64; 2]>,
    pub age_years: Option<[i32; 2]>,
    /// Date ages are computed on; required when `age_years` is set.
    pub reference_date: Option<NaiveDate>,
}

impl PopulationFilter {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("weight_kg", self.weight_kg), ("height_cm", self.height_cm)] {
            if let Some([lo, hi]) = r {
                if !(lo <= hi) {
                    return Err(Error::Config(format!("{name} range [{lo}, {hi}] is empty")));
                }
            }
        }
        if let Some([lo, hi]) = self.age_years {
            if lo > hi {
                return Err(Error::Config(format!("age range [{lo}, {hi}] is empty")));
            }
            if self.reference_date.is_none() {
                return Err(Error::Config("age filter needs a reference date".into()));
            }
        }
        Ok(())
    }

    pub fn matches(&self, vp: &VirtualPatient) -> bool {
        let p = &vp.patient;
        let within = |r: Option<[f64; 2]>, v: f64| r.is_none_or(|[lo, hi]| lo <= v && v <= hi);
        self.sex.is_none_or(|s| s == p.sex)
            && within(self.weight_kg, p.body_weight_kg)
            && within(self.height_cm, p.height_cm)
            && match (self.age_years, self.reference_date) {
                (Some([lo, hi]), Some(on)) => {
                    let age = p.age_years(on);
                    lo <= age && age <= hi
                }
                _ => true,
            }
    }
}

fn check_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "artifact id `{id}` must be nonempty ASCII letters, digits, `-`, `_` or `.`"
        )))
    }
}

fn to_lines<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("artifact serializes"));
        out.push('\n');
    }
    out
}

fn from_lines<T: DeserializeOwned>(body: &str, path: &Path) -> Result<Vec<T>> {
    body.lines()
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line)
                .map_err(|e| Error::parse(format!("{} line {}", path.display(), i + 2), e))
        })
        .collect()
}

/// Write `contents` to `path` via a temporary sibling and a rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(contents).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Store {
    root: PathBuf,
}

impl Store {
    /// Open (creating if needed) a store at `root`.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(Store { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, kind: ArtifactKind, id: &str) -> PathBuf {
        self.root.join(kind.dir()).join(format!("{id}.{}", kind.extension()))
    }

    pub fn contains(&self, kind: ArtifactKind, id: &str) -> bool {
        check_id(id).is_ok() && self.path(kind, id).is_file()
    }

    /// Ids of every artifact of `kind`, sorted.
    pub fn list(&self, kind: ArtifactKind) -> Result<Vec<String>> {
        let dir = self.root.join(kind.dir());
        let entries = match fs::read_dir(&dir) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(Error::io(&dir, e)),
        };
        let suffix = format!(".{}", kind.extension());
        let mut ids = Vec::new();
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            if let Some(id) = entry.file_name().to_str().and_then(|n| n.strip_suffix(&suffix)) {
                ids.push(id.to_owned());
            }
        }
        ids.sort();
        Ok(ids)
    }

    fn write(&self, kind: ArtifactKind, id: &str, body: &str) -> Result<PathBuf> {
        check_id(id)?;
        let path = self.path(kind, id);
        write_atomic(&path, encode_artifact(kind, body).as_bytes())?;
        Ok(path)
    }

    fn read(&self, kind: ArtifactKind, id: &str) -> Result<(PathBuf, String)> {
        check_id(id)?;
        let path = self.path(kind, id);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::MissingId {
                    kind: kind.label(),
                    id: id.to_owned(),
                })
            }
            Err(e) if e.kind() == std::io::ErrorKind::InvalidData => {
                return Err(Error::Checksum(path));
            }
            Err(e) => return Err(Error::io(&path, e)),
        };
        let body = decode_artifact(kind, &text, &path)?.to_owned();
        Ok((path, body))
    }

    pub fn save_population(&self, id: &str, population: &[VirtualPatient]) -> Result<PathBuf> {
        self.write(ArtifactKind::Population, id, &to_lines(population))
    }

    pub fn load_population(&self, id: &str) -> Result<Vec<VirtualPatient>> {
        let (path, body) = self.read(ArtifactKind::Population, id)?;
        from_lines(&body, &path)
    }

    /// Patients of population `id` matching every predicate of `filter`.
    pub fn query_population(&self, id: &str, filter: &PopulationFilter) -> Result<Vec<VirtualPatient>> {
        filter.validate()?;
        Ok(self
            .load_population(id)?
            .into_iter()
            .filter(|vp| filter.matches(vp))
            .collect())
    }

    pub fn save_parameter_sets(&self, id: &str, sets: &[ParameterSetRecord]) -> Result<PathBuf> {
        self.write(ArtifactKind::ParameterSets, id, &to_lines(sets))
    }

    pub fn load_parameter_sets(&self, id: &str) -> Result<Vec<ParameterSetRecord>> {
        let (path, body) = self.read(ArtifactKind::ParameterSets, id)?;
        from_lines(&body, &path)
    }

    pub fn save_protocols(&self, id: &str, protocols: &[Protocol]) -> Result<PathBuf> {
        self.write(ArtifactKind::Protocols, id, &to_lines(protocols))
    }

    pub fn load_protocols(&self, id: &str) -> Result<Vec<Protocol>> {
        let (path, body) = self.read(ArtifactKind::Protocols, id)?;
        from_lines(&body, &path)
    }

    pub fn save_report(&self, id: &str, report: &TrialReport) -> Result<PathBuf> {
        self.write(ArtifactKind::Report, id, &report.to_json())
    }

    pub fn load_report(&self, id: &str) -> Result<TrialReport> {
        let (_, body) = self.read(ArtifactKind::Report, id)?;
        TrialReport::from_json(&body)
    }

    pub fn save_trial(&self, record: &TrialRecord) -> Result<PathBuf> {
        let body = serde_json::to_string_pretty(record).expect("trial record serializes");
        self.write(ArtifactKind::Trial, &record.trial_id, &body)
    }

    pub fn load_trial(&self, id: &str) -> Result<TrialRecord> {
        let (path, body) = self.read(ArtifactKind::Trial, id)?;
        serde_json::from_str(&body).map_err(|e| Error::parse(path.display().to_string(), e))
    }

    /// Store a controller profile under its content hash and return the hash.
    pub fn save_profile(&self, profile_toml: &str) -> Result<String> {
        let hash = sha256_hex(profile_toml.as_bytes());
        self.write(ArtifactKind::Profile, &hash, profile_toml)?;
        Ok(hash)
    }

    pub fn load_profile(&self, hash: &str) -> Result<String> {
        Ok(self.read(ArtifactKind::Profile, hash)?.1)
    }

    pub fn trace_path(&self, trial_id: &str, patient_id: u64) -> PathBuf {
        self.root.join("traces").join(trial_id).join(format!("{patient_id}.csv"))
    }

    /// Traces are plain CSV, one file per retained patient.
    pub fn save_trace(&self, trial_id: &str, trace: &Trace) -> Result<PathBuf> {
        check_id(trial_id)?;
        let path = self.trace_path(trial_id, trace.patient_id);
        write_atomic(&path, trace.to_csv().as_bytes())?;
        Ok(path)
    }

    /// Patient ids with a retained trace for `trial_id`, sorted.
    pub fn trace_ids(&self, trial_id: &str) -> Result<Vec<u64>> {
        check_id(trial_id)?;
        let dir = self.root.join("traces").join(trial_id);
        let entries = match fs::read_dir(&dir) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(Error::io(&dir, e)),
        };
        let mut ids = Vec::new();
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            if let Some(id) = entry
                .file_name()
                .to_str()
                .and_then(|n| n.strip_suffix(".csv"))
                .and_then(|n| n.parse().ok())
            {
                ids.push(id);
            }
        }
        ids.sort_unstable();
        Ok(ids)
    }

    pub fn load_trace(&self, trial_id: &str, patient_id: u64) -> Result<Trace> {
        let path = self.trace_path(trial_id, patient_id);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::TraceNotRetained(patient_id))
            }
            Err(e) => return Err(Error::io(&path, e)),
        };
        Trace::from_csv(patient_id, &text)
    }

    /// SQL DDL plus INSERT statements for everything in the store.
    pub fn export_sql(&self, library: &ProtocolLibrary) -> Result<String> {
        let mut out = String::from(SQL_SCHEMA);
        out.push_str("\nBEGIN;\n");
        for pop in self.list(ArtifactKind::Population)? {
            for vp in self.load_population(&pop)? {
                let p = &vp.patient;
                let sex = match p.sex {
                    Sex::Female => "female",
                    Sex::Male => "male",
                };
                writeln!(
                    out,
                    "INSERT INTO patients VALUES ({}, {}, {}, {}, {}, {}, {}, {}, {}, {});",
                    q(&pop),
                    p.id,
                    q(&p.first_name),
                    q(&p.last_name),
                    q(&p.date_of_birth.to_string()),
                    q(&p.place_of_birth),
                    q(sex),
                    p.height_cm,
                    p.body_weight_kg,
                    p.resting_heart_rate_bpm
                )
                .unwrap();
                parameter_rows(&mut out, &pop, p.id, &vp.parameters);
            }
        }
        for set in self.list(ArtifactKind::ParameterSets)? {
            for r in self.load_parameter_sets(&set)? {
                parameter_rows(&mut out, &set, r.patient_id, &r.parameters);
            }
        }
        for set in self.list(ArtifactKind::Protocols)? {
            for p in self.load_protocols(&set)? {
                for (seq, d) in p.disturbances.iter().enumerate() {
                    let kind = match d.kind {
                        DisturbanceKind::Meal => "meal",
                        DisturbanceKind::Exercise => "exercise",
                    };
                    let class = d.meal_class.map(|c| format!("{c:?}").to_lowercase());
                    writeln!(
                        out,
                        "INSERT INTO protocols VALUES ({}, {}, {seq}, {}, {}, {}, {}, {}, {}, {});",
                        q(&set),
                        p.id,
                        q(kind),
                        d.start_s,
                        d.end_s,
                        d.magnitude,
                        d.announced as u8,
                        d.announced_magnitude,
                        class.as_deref().map_or("NULL".into(), q)
                    )
                    .unwrap();
                }
            }
        }
        for day in &library.days {
            for (seq, ev) in day.events.iter().enumerate() {
                let meal = ev.meal.map(|c| format!("{c:?}").to_lowercase());
                let (dur, hrr) = ev
                    .exercise
                    .map_or(("NULL".into(), "NULL".into()), |x| {
                        (x.duration_min.to_string(), x.intensity_hrr.to_string())
                    });
                writeln!(
                    out,
                    "INSERT INTO basis_days VALUES ({}, {}, {seq}, {}, {}, {dur}, {hrr});",
                    q(&format!("{:?}", day.day_type).to_lowercase()),
                    q(&format!("{:?}", day.season_class).to_lowercase()),
                    ev.at.0,
                    meal.as_deref().map_or("NULL".into(), q),
                )
                .unwrap();
            }
        }
        for id in self.list(ArtifactKind::Trial)? {
            let t = self.load_trial(&id)?;
            writeln!(
                out,
                "INSERT INTO trials VALUES ({}, {}, {}, {}, {}, {}, {}, {}, {}, {});",
                q(&t.trial_id),
                q(&t.created.to_rfc3339()),
                t.seed,
                q(&t.model_id),
                q(&t.controller_id),
                q(&t.profile_hash),
                q(&t.population_id),
                q(&t.report_id),
                q(&serde_json::to_string(&t.config).expect("config serializes")),
                q(&t.manifest)
            )
            .unwrap();
        }
        for id in self.list(ArtifactKind::Report)? {
            let r = self.load_report(&id)?;
            writeln!(
                out,
                "INSERT INTO reports VALUES ({}, {}, {}, {}, {}, {}, {});",
                q(&id),
                q(&r.format),
                r.n_patients,
                r.horizon_s,
                r.mean_bg,
                r.min_bg,
                q(&serde_json::to_string(&r).expect("report serializes"))
            )
            .unwrap();
        }
        out.push_str("COMMIT;\n");
        Ok(out)
    }
}

fn parameter_rows(out: &mut String, set: &str, patient_id: u64, p: &ParameterSet) {
    for (name, v) in p.values.iter().chain([(&"basal_u_per_h".to_owned(), &p.basal_u_per_h)]) {
        writeln!(
            out,
            "INSERT INTO parameter_sets VALUES ({}, {patient_id}, {}, {v});",
            q(set),
            q(name)
        )
        .unwrap();
    }
}

/// SQL string literal.
fn q(s: &str) -> String {
    format!("'{}'", s.replace('\'', "''"))
}

/// Relational schema for the exported store.
pub const SQL_SCHEMA: &str = "\
CREATE TABLE patients (
    population_id TEXT NOT NULL,
    patient_id BIGINT NOT NULL,
    first_name TEXT NOT NULL,
    last_name TEXT NOT NULL,
    date_of_birth DATE NOT NULL,
    place_of_birth TEXT NOT NULL,
    sex TEXT NOT NULL CHECK (sex IN ('female', 'male')),
    height_cm DOUBLE PRECISION NOT NULL,
    body_weight_kg DOUBLE PRECISION NOT NULL,
    resting_heart_rate_bpm DOUBLE PRECISION NOT NULL,
    PRIMARY KEY (population_id, patient_id)
);
CREATE TABLE parameter_sets (
    set_id TEXT NOT NULL,
    patient_id BIGINT NOT NULL,
    parameter TEXT NOT NULL,
    value DOUBLE PRECISION NOT NULL,
    PRIMARY KEY (set_id, patient_id, parameter)
);
CREATE TABLE protocols (
    protocol_set_id TEXT NOT NULL,
    patient_id BIGINT NOT NULL,
    seq INTEGER NOT NULL,
    kind TEXT NOT NULL CHECK (kind IN ('meal', 'exercise')),
    start_s BIGINT NOT NULL,
    end_s BIGINT NOT NULL,
    magnitude DOUBLE PRECISION NOT NULL,
    announced SMALLINT NOT NULL,
    announced_magnitude DOUBLE PRECISION NOT NULL,
    meal_class TEXT,
    PRIMARY KEY (protocol_set_id, patient_id, seq)
);
CREATE TABLE basis_days (
    day_type TEXT NOT NULL,
    season_class TEXT NOT NULL,
    seq INTEGER NOT NULL,
    at_minute INTEGER NOT NULL,
    meal_class TEXT,
    exercise_minutes INTEGER,
    exercise_hrr DOUBLE PRECISION,
    PRIMARY KEY (day_type, season_class, seq)
);
CREATE TABLE trials (
    trial_id TEXT PRIMARY KEY,
    created TEXT NOT NULL,
    seed BIGINT NOT NULL,
    model_id TEXT NOT NULL,
    controller_id TEXT NOT NULL,
    profile_hash TEXT NOT NULL,
    population_id TEXT NOT NULL,
    report_id TEXT NOT NULL,
    config_json TEXT NOT NULL,
    manifest TEXT NOT NULL
);
CREATE TABLE reports (
    report_id TEXT PRIMARY KEY,
    format TEXT NOT NULL,
    n_patients BIGINT NOT NULL,
    horizon_s BIGINT NOT NULL,
    mean_bg DOUBLE PRECISION NOT NULL,
    min_bg DOUBLE PRECISION NOT NULL,
    body_json TEXT NOT NULL
);
";

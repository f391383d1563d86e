use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use vctrial::analytics::{compare_trials, GlycemicRange, TrialReport};
use vctrial::manifest::{self, RunOverrides};
use vctrial::physiology::HovorkaExtended;
use vctrial::population::{generate_population, DemographicsConfig, ParameterTable, Sex};
use vctrial::protocol::{ProtocolGenerator, WEEK_S};
use vctrial::simulation::TracePolicy;
use vctrial::storage::{decode_artifact, write_atomic, ArtifactKind, PopulationFilter, Store};
use vctrial::{Error, ErrorClass, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Structured,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StoreTrace {
    Never,
    Worst,
    Always,
}

impl From<StoreTrace> for TracePolicy {
    fn from(s: StoreTrace) -> Self {
        match s {
            StoreTrace::Never => TracePolicy::Never,
            StoreTrace::Worst => TracePolicy::WorstCaseOnly,
            StoreTrace::Always => TracePolicy::Always,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SexArg {
    Female,
    Male,
}

/// Virtual clinical trials for artificial-pancreas controllers.
#[derive(Debug, Parser)]
#[command(name = "vctrial", version)]
struct Cli {
    /// Summary format on standard output.
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    format: Format,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample a population of virtual patients into a store.
    GeneratePopulation {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        patients: usize,
        /// Demographics TOML; the bundled one by default.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Parameter distribution table TOML.
        #[arg(long)]
        parameters: Option<PathBuf>,
        /// Store directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "population")]
        id: String,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Generate each patient's protocol for a stored population.
    GenerateProtocol {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        population: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        weeks: u64,
        #[arg(long, default_value_t = 0)]
        start_week: u32,
        /// Artifact id; `<population>-protocols` by default.
        #[arg(long)]
        id: Option<String>,
    },
    /// Run the trial described by a manifest.
    Run {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
        /// Overrides the manifest's simulation seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        store_trace: Option<StoreTrace>,
        /// Print progress every this many patients; 0 disables.
        #[arg(long)]
        progress_every: Option<u64>,
    },
    /// Compare two trial reports and write overlay figure data.
    Compare {
        report_a: PathBuf,
        report_b: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a retained patient trace as CSV.
    ExportTrace {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        trial: String,
        /// Patient id, or `worst` for the trial's worst case.
        #[arg(long, default_value = "worst")]
        patient: String,
        #[arg(long)]
        from_s: Option<u64>,
        #[arg(long)]
        to_s: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export the store as SQL DDL plus INSERT statements.
    ExportSql {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-run a recorded trial and check the report is unchanged.
    Rerun {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        trial: String,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Select patients of a stored population by demographics.
    Query {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        population: String,
        #[arg(long, value_enum)]
        sex: Option<SexArg>,
        #[arg(long, num_args = 2, value_names = ["MIN", "MAX"])]
        weight_kg: Option<Vec<f64>>,
        #[arg(long, num_args = 2, value_names = ["MIN", "MAX"])]
        height_cm: Option<Vec<f64>>,
        #[arg(long, num_args = 2, value_names = ["MIN", "MAX"])]
        age_years: Option<Vec<i32>>,
        /// Date ages are computed on (YYYY-MM-DD); today by default.
        #[arg(long)]
        on: Option<String>,
        /// Save the matches as a new population with this id.
        #[arg(long)]
        save: Option<String>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Runtime => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(summary) => {
            emit(cli.format, &summary);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Print `summary` as indented `key: value` lines or as one JSON object.
fn emit(format: Format, summary: &Value) {
    match format {
        Format::Structured => println!("{summary}"),
        Format::Text => print_text(summary, 0),
    }
}

fn print_text(v: &Value, indent: usize) {
    let pad = "  ".repeat(indent);
    if let Value::Object(map) = v {
        for (k, v) in map {
            match v {
                Value::Object(_) => {
                    println!("{pad}{k}:");
                    print_text(v, indent + 1);
                }
                Value::String(s) => println!("{pad}{k}: {s}"),
                other => println!("{pad}{k}: {other}"),
            }
        }
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_owned(),
        source: e,
    })
}

/// A report exported by `run` or a report artifact from a store.
fn load_report_file(path: &Path) -> Result<TrialReport> {
    let text = read(path)?;
    if text.starts_with("{\"format\":\"vctrial-report\",\"version\"") {
        TrialReport::from_json(decode_artifact(ArtifactKind::Report, &text, path)?)
    } else {
        TrialReport::from_json(&text)
    }
}

fn tir_summary(r: &TrialReport) -> Value {
    let mut m = serde_json::Map::new();
    for range in GlycemicRange::ALL {
        m.insert(range.name().to_owned(), json!(r.mean_tir(range)));
    }
    Value::Object(m)
}

fn dispatch(cmd: Command) -> Result<Value> {
    match cmd {
        Command::GeneratePopulation {
            seed,
            patients,
            config,
            parameters,
            out,
            id,
            threads,
        } => {
            let demo = match config {
                Some(p) => DemographicsConfig::from_toml(&read(&p)?)?,
                None => DemographicsConfig::default(),
            };
            let table = match parameters {
                Some(p) => ParameterTable::from_toml(&read(&p)?)?,
                None => ParameterTable::hovorka_default(),
            };
            let store = Store::open(&out)?;
            let start = Instant::now();
            let pop = generate_population(seed, patients, &demo, &table, &HovorkaExtended, threads)?;
            let secs = start.elapsed().as_secs_f64();
            let path = store.save_population(&id, &pop)?;
            Ok(json!({
                "population": id,
                "patients": pop.len(),
                "seed": seed,
                "seconds": secs,
                "patients_per_second": pop.len() as f64 / secs.max(1e-9),
                "path": path.display().to_string(),
            }))
        }
        Command::GenerateProtocol {
            out,
            population,
            seed,
            weeks,
            start_week,
            id,
        } => {
            let store = Store::open(&out)?;
            let pop = store.load_population(&population)?;
            let generator = ProtocolGenerator {
                start_week,
                ..ProtocolGenerator::default()
            };
            let horizon = weeks * WEEK_S;
            generator.check_horizon(horizon)?;
            let protocols = pop
                .iter()
                .map(|vp| generator.generate(seed, vp.patient.id, vp.patient.body_weight_kg, horizon))
                .collect::<Result<Vec<_>>>()?;
            let id = id.unwrap_or_else(|| format!("{population}-protocols"));
            let path = store.save_protocols(&id, &protocols)?;
            let meals: usize = protocols.iter().map(|p| p.meals().count()).sum();
            Ok(json!({
                "protocols": id,
                "patients": protocols.len(),
                "weeks": weeks,
                "meals": meals,
                "path": path.display().to_string(),
            }))
        }
        Command::Run {
            manifest: path,
            threads,
            seed,
            store_trace,
            progress_every,
        } => {
            let overrides = RunOverrides {
                seed,
                store_trace: store_trace.map(Into::into),
                threads,
            };
            let resolved = manifest::resolve(&path, &overrides)?;
            let n = resolved.population.len() as u64;
            let every = progress_every.unwrap_or((n / 10).max(1));
            let start = Instant::now();
            let progress = move |done: u64| {
                if every > 0 && (done.is_multiple_of(every) || done == n) {
                    eprintln!("progress: {done}/{n} patients, {:.1} s", start.elapsed().as_secs_f64());
                }
            };
            let out = manifest::run(&resolved, threads, &progress)?;
            let r = &out.outcome.report;
            Ok(json!({
                "trial": out.record.trial_id,
                "patients": r.n_patients,
                "aborted": r.aborted.len(),
                "mean_bg": r.mean_bg,
                "tir": tir_summary(r),
                "worst_case": {
                    "patient": r.worst_case.patient_id,
                    "min_bg": r.worst_case.min_bg,
                },
                "doses_per_day": {
                    "basal_u": r.doses.basal.mean,
                    "bolus_u": r.doses.bolus.mean,
                    "glucagon_ug": r.doses.glucagon.mean,
                },
                "profile_hash": out.record.profile_hash,
                "wall_seconds": start.elapsed().as_secs_f64(),
                "output_dir": resolved.output_dir.display().to_string(),
            }))
        }
        Command::Compare { report_a, report_b, out } => {
            let a = load_report_file(&report_a)?;
            let b = load_report_file(&report_b)?;
            let cmp = compare_trials(&a, &b)?;
            for (name, body) in [
                ("comparison.json", cmp.to_json()),
                ("cdf_overlay.csv", cmp.cdf_overlay_csv()),
                ("tir_side_by_side.csv", cmp.tir_side_by_side_csv()),
                ("dose_overlay.csv", cmp.dose_overlay_csv()),
                ("deltas.csv", cmp.deltas_csv()),
            ] {
                write_atomic(&out.join(name), body.as_bytes())?;
            }
            Ok(json!({ "deltas": serde_json::to_value(&cmp.deltas).expect("deltas serialize") }))
        }
        Command::ExportTrace {
            store,
            trial,
            patient,
            from_s,
            to_s,
            out,
        } => {
            let store = Store::open(&store)?;
            let record = store.load_trial(&trial)?;
            let id = if patient == "worst" {
                store.load_report(&record.report_id)?.worst_case.patient_id
            } else {
                patient
                    .parse()
                    .map_err(|_| Error::Config(format!("patient must be an id or `worst`, got `{patient}`")))?
            };
            let trace = store.load_trace(&trial, id)?;
            let from = from_s.unwrap_or(trace.start_s());
            let to = to_s.unwrap_or(trace.horizon_s());
            let window = trace.window(from, to)?;
            write_atomic(&out, window.to_csv().as_bytes())?;
            Ok(json!({
                "patient": id,
                "rows": window.len(),
                "from_s": from,
                "to_s": to,
                "min_bg": window.min_bg(),
                "path": out.display().to_string(),
            }))
        }
        Command::ExportSql { store, out } => {
            let store = Store::open(&store)?;
            let sql = store.export_sql(&ProtocolGenerator::default().library)?;
            write_atomic(&out, sql.as_bytes())?;
            Ok(json!({ "path": out.display().to_string(), "bytes": sql.len() }))
        }
        Command::Rerun { store, trial, threads } => {
            let store = Store::open(&store)?;
            let (report, same) = manifest::verify_rerun(&store, &trial, threads)?;
            if !same {
                return Err(Error::Model(format!("rerun of `{trial}` produced a different report")));
            }
            Ok(json!({ "trial": trial, "identical": same, "patients": report.n_patients }))
        }
        Command::Query {
            store,
            population,
            sex,
            weight_kg,
            height_cm,
            age_years,
            on,
            save,
        } => {
            let store = Store::open(&store)?;
            let reference_date = match on {
                Some(d) => Some(
                    d.parse()
                        .map_err(|e| Error::Config(format!("bad date `{d}`: {e}")))?,
                ),
                None => age_years.as_ref().map(|_| chrono::Utc::now().date_naive()),
            };
            let filter = PopulationFilter {
                sex: sex.map(|s| match s {
                    SexArg::Female => Sex::Female,
                    SexArg::Male => Sex::Male,
                }),
                weight_kg: weight_kg.map(|v| [v[0], v[1]]),
                height_cm: height_cm.map(|v| [v[0], v[1]]),
                age_years: age_years.map(|v| [v[0], v[1]]),
                reference_date,
            };
            let matches = store.query_population(&population, &filter)?;
            if let Some(id) = &save {
                store.save_population(id, &matches)?;
            }
            let ids: Vec<u64> = matches.iter().map(|vp| vp.patient.id).collect();
            Ok(json!({ "matches": ids.len(), "saved_as": save, "ids": ids }))
        }
    }
}

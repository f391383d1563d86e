//! Acceptance checks, one line per criterion.
//!
//! Runs without the libtest harness so each criterion prints a single
//! `PASS`/`FAIL`/`N/A` line. Set `VCT_FULL_SCALE=1` to run the throughput
//! check at 10^4 patients instead of extrapolating from a subset.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vctrial::analytics::{
    AnalyticsConfig, GlycemicRange, PatientStats, SampleDoses, TrialAccumulator, TrialReport,
};
use vctrial::controller::{
    ControlDecision, Controller, DualHormone, DualHormoneProfile, DualHormoneState, ExercisePhase,
    Observation,
};
use vctrial::manifest::{self, RunOverrides};
use vctrial::physiology::{DisturbanceInputs, HovorkaExtended, ModelInputs, PatientModel};
use vctrial::population::{
    generate_population, DemographicsConfig, ParameterDistribution, ParameterTable, VirtualPatient,
};
use vctrial::protocol::{
    self, meal_grams, DayType, DisturbanceKind, MealClass, Protocol, ProtocolGenerator, SeasonName,
    WeekType, DAY_S, WEEK_S,
};
use vctrial::simulation::{
    run_trial, simulate_closed_loop, simulate_observed, SimulationConfig, StepObserver, TracePolicy,
};
use vctrial::storage::{ParameterSetRecord, Store};

enum Verdict {
    Pass(String),
    Fail(String),
    NotApplicable(String),
}

use Verdict::*;

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Pass(detail)
    } else {
        Fail(detail)
    }
}

/// Reports of every trial run here, for the CDF structure check.
#[derive(Default)]
struct Ctx {
    reports: Vec<(String, TrialReport)>,
    timings: BTreeMap<usize, Duration>,
}

fn population(seed: u64, n: usize) -> Vec<VirtualPatient> {
    generate_population(
        seed,
        n,
        &DemographicsConfig::default(),
        &ParameterTable::hovorka_default(),
        &HovorkaExtended,
        None,
    )
    .expect("population")
}

fn config(seed: u64, weeks: u64) -> SimulationConfig {
    SimulationConfig {
        seed,
        horizon_s: weeks * WEEK_S,
        ..SimulationConfig::default()
    }
}

fn controller(scale: f64) -> DualHormone {
    let mut p = DualHormoneProfile::default();
    p.assumed_basal_scale = scale;
    DualHormone::new(p).unwrap()
}

// 1 ------------------------------------------------------------------------

fn table1_seasons(s: SeasonName) -> [(WeekType, u32); 3] {
    use WeekType::*;
    match s {
        SeasonName::Winter => [(Standard, 6), (Active, 4), (Vacation, 3)],
        SeasonName::Spring => [(Standard, 6), (Active, 6), (Vacation, 1)],
        SeasonName::Summer => [(Standard, 7), (Active, 3), (Vacation, 3)],
        SeasonName::Autumn => [(Standard, 9), (Active, 3), (Vacation, 1)],
    }
}

fn table1_weeks(w: WeekType) -> [(DayType, u32); 4] {
    use DayType::*;
    match w {
        WeekType::Standard => [(Standard, 4), (Active, 1), (MovieNight, 1), (LateNight, 1)],
        WeekType::Active => [(Standard, 3), (Active, 3), (MovieNight, 1), (LateNight, 0)],
        WeekType::Vacation => [(Standard, 5), (Active, 0), (MovieNight, 0), (LateNight, 2)],
    }
}

fn protocol_structure() -> Verdict {
    let start = Instant::now();
    let mut problems = Vec::new();
    for seed in 0..100 {
        let year = protocol::compose_year(seed, 70.0);
        if year.calendar.len() != 52 {
            problems.push(format!("seed {seed}: {} weeks", year.calendar.len()));
        }
        let mut per_season: BTreeMap<SeasonName, BTreeMap<WeekType, u32>> = BTreeMap::new();
        for w in &year.calendar {
            *per_season.entry(w.season).or_default().entry(w.week_type).or_default() += 1;
            let mut days: BTreeMap<DayType, u32> = BTreeMap::new();
            for d in &w.days {
                *days.entry(*d).or_default() += 1;
            }
            for (t, n) in table1_weeks(w.week_type) {
                if days.get(&t).copied().unwrap_or(0) != n || w.days.len() != 7 {
                    problems.push(format!("seed {seed} week {}: {days:?}", w.index));
                }
            }
        }
        for s in [SeasonName::Winter, SeasonName::Spring, SeasonName::Summer, SeasonName::Autumn] {
            let got = per_season.get(&s).cloned().unwrap_or_default();
            let total: u32 = got.values().sum();
            for (t, n) in table1_seasons(s) {
                if got.get(&t).copied().unwrap_or(0) != n || total != 13 {
                    problems.push(format!("seed {seed} {s:?}: {got:?}"));
                }
            }
        }
    }
    let elapsed = start.elapsed();
    let ok = problems.is_empty() && elapsed < Duration::from_secs(1);
    verdict(
        ok,
        format!(
            "100 seeds, {} mismatches, {:.0} ms (limit 1000 ms){}",
            problems.len(),
            elapsed.as_secs_f64() * 1e3,
            problems.first().map(|p| format!("; first: {p}")).unwrap_or_default()
        ),
    )
}

// 2 ------------------------------------------------------------------------

fn meal_arithmetic() -> Verdict {
    let expected = [
        (MealClass::Large, 90.3),
        (MealClass::Medium, 60.2),
        (MealClass::Small, 39.9),
        (MealClass::Snack, 20.3),
    ];
    let got: Vec<f64> = expected.iter().map(|(c, _)| meal_grams(*c, 70.0)).collect();
    let ok = expected.iter().zip(&got).all(|((_, e), g)| (e - g).abs() <= 0.5);
    verdict(ok, format!("70 kg: {got:?} g vs {:?} (±0.5 g)", expected.map(|e| e.1)))
}

// 3 + 13 -------------------------------------------------------------------

/// In-loop safety checks on every controller step.
#[derive(Default)]
struct SafetyObserver {
    steps: u64,
    both_hormones: u64,
    exercise_boluses: u64,
    bad_exercise_boluses: u64,
    boluses_this_session: u32,
    repeated_in_session: u64,
}

impl StepObserver<DualHormoneState> for SafetyObserver {
    fn observe(&mut self, obs: &Observation, _before: &DualHormoneState, after: &DualHormoneState, d: &ControlDecision) {
        self.steps += 1;
        let insulin = d.basal_u_per_h > 0.0 || d.insulin_bolus_u > 0.0;
        if insulin && d.glucagon_ug > 0.0 {
            self.both_hormones += 1;
        }
        if obs.exercise == ExercisePhase::Start {
            self.boluses_this_session = 0;
        }
        // Microboli are far smaller than the 100 μg exercise dose.
        let fired = d.glucagon_ug >= 100.0;
        if fired {
            self.exercise_boluses += 1;
            self.boluses_this_session += 1;
            let filtered = after.filtered.unwrap_or(f64::INFINITY);
            if obs.exercise != ExercisePhase::Start || !(filtered < 7.0) || insulin {
                self.bad_exercise_boluses += 1;
            }
            if self.boluses_this_session > 1 {
                self.repeated_in_session += 1;
            }
        }
    }
}

fn tir_partition_and_safety(ctx: &mut Ctx, safety: &mut SafetyObserver) -> Verdict {
    let model = HovorkaExtended;
    let generator = ProtocolGenerator::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut checked = 0;
    let mut bad = Vec::new();
    for trial in 0..3 {
        let seed: u64 = rng.random();
        let start_week = rng.random_range(0..52u32);
        let scale = [1.0, 0.5, 1.5][trial];
        let pop = population(seed, 100);
        let gen = ProtocolGenerator {
            start_week,
            ..generator.clone()
        };
        let cfg = config(seed ^ 1, 1);
        let ctrl = controller(scale);
        let mut acc = TrialAccumulator::empty(cfg.analytics_config());
        for vp in &pop {
            let p = gen
                .generate(cfg.seed, vp.patient.id, vp.patient.body_weight_kg, cfg.horizon_s)
                .unwrap();
            let r = simulate_observed(vp, &p, &ctrl, &model, &cfg, false, safety).unwrap();
            let total: u64 = r.stats.range_s.iter().sum();
            if total != cfg.horizon_s || r.stats.elapsed_s != cfg.horizon_s {
                bad.push((vp.patient.id, total));
            }
            checked += 1;
            acc.add_patient(&r.stats).unwrap();
        }
        ctx.reports
            .push((format!("partition trial {trial}"), TrialReport::from_accumulator(&acc).unwrap()));
    }
    verdict(
        bad.is_empty(),
        format!("{checked} patients in 3 randomized 1-week trials, {} with range seconds != horizon", bad.len()),
    )
}

fn safety_verdict(s: &SafetyObserver) -> Verdict {
    let ok = s.steps > 0 && s.both_hormones == 0 && s.bad_exercise_boluses == 0 && s.repeated_in_session == 0;
    verdict(
        ok,
        format!(
            "{} controller steps: {} with insulin and glucagon, {} exercise boluses ({} outside Start/BG<7, {} repeated in a session)",
            s.steps, s.both_hormones, s.exercise_boluses, s.bad_exercise_boluses, s.repeated_in_session
        ),
    )
}

// 4 ------------------------------------------------------------------------

fn cdf_structure(ctx: &Ctx) -> Verdict {
    let mut bad = Vec::new();
    let mut points = 0;
    for (name, r) in &ctx.reports {
        let c = &r.cdf;
        let mut curves = vec![("mean", &c.mean), ("min", &c.min), ("max", &c.max)];
        if let Some(w) = &c.worst_case {
            curves.push(("worst", w));
        }
        for (label, curve) in curves {
            if curve.windows(2).any(|w| w[1] < w[0]) {
                bad.push(format!("{name}: {label} not monotone"));
            }
        }
        for k in 0..c.thresholds.len() {
            points += 1;
            if !(c.min[k] <= c.mean[k] && c.mean[k] <= c.max[k]) {
                bad.push(format!("{name}: envelope broken at {}", c.thresholds[k]));
            }
        }
    }
    verdict(
        bad.is_empty() && !ctx.reports.is_empty(),
        format!("{} trials, {points} grid points, {} violations", ctx.reports.len(), bad.len()),
    )
}

// 5 ------------------------------------------------------------------------

fn disturbances_at(p: &Protocol, t_s: u64) -> DisturbanceInputs {
    let mut d = DisturbanceInputs::default();
    for x in &p.disturbances {
        if x.start_s <= t_s && t_s < x.end_s {
            match x.kind {
                DisturbanceKind::Meal => d.cho_rate += x.level(),
                DisturbanceKind::Exercise => d.exercise_hrr = d.exercise_hrr.max(x.level()),
            }
        }
    }
    d
}

fn announced_at(p: &Protocol, t_s: u64, period_s: u64) -> (Option<f64>, ExercisePhase) {
    let mut meal: Option<f64> = None;
    let mut phase = ExercisePhase::Resting;
    for x in &p.disturbances {
        let starts_now = x.start_s >= t_s && x.start_s < t_s + period_s;
        match x.kind {
            DisturbanceKind::Meal if starts_now && x.announced => {
                *meal.get_or_insert(0.0) += x.announced_magnitude;
            }
            DisturbanceKind::Exercise if starts_now => phase = ExercisePhase::Start,
            DisturbanceKind::Exercise if x.start_s < t_s && x.end_s > t_s && phase == ExercisePhase::Resting => {
                phase = ExercisePhase::Ongoing
            }
            _ => {}
        }
    }
    (meal, phase)
}

/// Closed loop with classical RK4 on a fine step; returns BG every `out_s`.
fn rk4_reference(vp: &VirtualPatient, p: &Protocol, ctrl: &DualHormone, cfg: &SimulationConfig, h_s: u64, out_s: u64) -> Vec<f64> {
    let model = HovorkaExtended;
    let params = model.bind(&vp.parameters, vp.patient.body_weight_kg).unwrap();
    let ss = model.steady_state(&params, cfg.initial_bg).unwrap();
    let mut x = ss.state.clone();
    let n = x.len();
    let mut state = ctrl.initial_state(ss.basal_u_per_h);
    let period = cfg.controller_period_s;
    let period_min = period as f64 / 60.0;
    let mut u = ModelInputs::default();
    let mut out = Vec::new();
    let (mut k1, mut k2, mut k3, mut k4, mut tmp) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let h = h_s as f64 / 60.0;
    let mut t = 0;
    while t < cfg.horizon_s {
        let tm = t as f64 / 60.0;
        if t % period == 0 {
            let (meal, exercise) = announced_at(p, t, period);
            let obs = Observation {
                t_s: t,
                y: model.measurement(tm, &x, &params),
                announced_meal_g: meal,
                exercise,
                patient_basal_u_per_h: ss.basal_u_per_h,
                period_s: period,
            };
            let (next, dec) = ctrl.step(&state, &obs);
            state = next;
            u = ModelInputs {
                insulin_basal: dec.basal_u_per_h * 1000.0 / 60.0,
                insulin_bolus: dec.insulin_bolus_u * 1000.0 / period_min,
                glucagon: dec.glucagon_ug / period_min,
            };
        }
        if t % out_s == 0 {
            out.push(model.output(tm, &x, &params));
        }
        let d = disturbances_at(p, t);
        model.drift(tm, &x, &u, &d, &params, &mut k1);
        for i in 0..n {
            tmp[i] = x[i] + 0.5 * h * k1[i];
        }
        model.drift(tm + 0.5 * h, &tmp, &u, &d, &params, &mut k2);
        for i in 0..n {
            tmp[i] = x[i] + 0.5 * h * k2[i];
        }
        model.drift(tm + 0.5 * h, &tmp, &u, &d, &params, &mut k3);
        for i in 0..n {
            tmp[i] = x[i] + h * k3[i];
        }
        model.drift(tm + h, &tmp, &u, &d, &params, &mut k4);
        for i in 0..n {
            x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        t += h_s;
    }
    out
}

fn degenerate_sde() -> Verdict {
    let start = Instant::now();
    let model = HovorkaExtended;
    let ctrl = controller(1.0);
    let generator = ProtocolGenerator::default();
    let mut rows = Vec::new();
    let mut worst = (0.0f64, 0.0f64);
    // The mean-parameter 70 kg patient, then five sampled ones.
    let mut nominal = population(55, 1)[0].clone();
    for spec in &ParameterTable::hovorka_default().degenerate().parameters {
        if let ParameterDistribution::Fixed { value } = spec.distribution {
            nominal.parameters.values.insert(spec.name.clone(), value);
        }
    }
    nominal.patient.id = u64::MAX;
    nominal.patient.body_weight_kg = 70.0;
    for vp in std::iter::once(nominal).chain(population(55, 5)) {
        let mut vp = vp;
        for k in ["sigma_gut", "sigma_q1", "cgm_noise_var"] {
            vp.parameters.values.insert(k.into(), 0.0);
        }
        let base = config(5, 1);
        let cfg = SimulationConfig {
            horizon_s: DAY_S,
            ..base
        };
        let p = generator
            .generate(cfg.seed, vp.patient.id, vp.patient.body_weight_kg, cfg.horizon_s)
            .unwrap();
        let reference = rk4_reference(&vp, &p, &ctrl, &cfg, 1, 30);
        let mut errs = Vec::new();
        for dt in [30, 15] {
            let c = SimulationConfig { dt_s: dt, ..cfg };
            let r = simulate_closed_loop(&vp, &p, &ctrl, &model, &c, true).unwrap();
            let tr = r.trace.unwrap();
            let stride = (30 / dt) as usize;
            let err = tr
                .bg
                .iter()
                .step_by(stride)
                .zip(&reference)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            errs.push(err);
        }
        worst.0 = worst.0.max(errs[0]);
        worst.1 = worst.1.max(errs[1]);
        rows.push((vp.patient.id, errs[0], errs[1] / errs[0]));
    }
    let elapsed = start.elapsed();
    let ok = rows
        .iter()
        .all(|&(_, e30, ratio)| e30 <= 0.05 && (0.35..=0.65).contains(&ratio))
        && elapsed < Duration::from_secs(30);
    let ratios: Vec<String> = rows.iter().map(|r| format!("{:.3}/{:.2}", r.1, r.2)).collect();
    verdict(
        ok,
        format!(
            "nominal + 5 sampled patients x 24 h vs RK4 at 1 s: max err {:.4} (dt 30 s, limit 0.05), {:.4} (dt 15 s); per patient err/ratio [{}] (ratio wanted in 0.35..0.65); {:.1} s",
            worst.0,
            worst.1,
            ratios.join(", "),
            elapsed.as_secs_f64()
        ),
    )
}

// 6 ------------------------------------------------------------------------

fn random_accumulator(rng: &mut ChaCha8Rng, cfg: &AnalyticsConfig, next_id: &mut u64) -> TrialAccumulator {
    let mut acc = TrialAccumulator::empty(*cfg);
    for _ in 0..rng.random_range(0..4) {
        let id = *next_id;
        *next_id += 1;
        if rng.random_bool(0.1) {
            acc.add_aborted(id, format!("reason {}", rng.random::<u16>()));
            continue;
        }
        let mut s = PatientStats::new(id, cfg);
        let dt = 1800;
        let mut t = 0;
        let mut bg = rng.random_range(3.0..12.0);
        while t < cfg.horizon_s {
            bg = (bg + rng.random_range(-1.5..1.5f64)).clamp(1.0, 25.0);
            let doses = SampleDoses {
                basal_u: rng.random_range(0.0..1.0),
                bolus_u: if rng.random_bool(0.1) { rng.random_range(0.0..8.0) } else { 0.0 },
                glucagon_ug: if rng.random_bool(0.05) { 15.0 } else { 0.0 },
            };
            s.accumulate_sample(t, bg, doses, dt);
            t += dt;
        }
        acc.add_patient(&s).unwrap();
    }
    acc
}

fn monoid_laws() -> Verdict {
    let cfg = AnalyticsConfig {
        horizon_s: 2 * DAY_S,
        ..AnalyticsConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut id = 0;
    let mut failures = [0u32; 3];
    for _ in 0..1000 {
        let a = random_accumulator(&mut rng, &cfg, &mut id);
        let b = random_accumulator(&mut rng, &cfg, &mut id);
        let c = random_accumulator(&mut rng, &cfg, &mut id);
        let e = TrialAccumulator::empty(cfg);
        if a.clone().merge(&e).unwrap() != a || e.clone().merge(&a).unwrap() != a {
            failures[0] += 1;
        }
        if a.clone().merge(&b).unwrap() != b.clone().merge(&a).unwrap() {
            failures[1] += 1;
        }
        let left = a.clone().merge(&b).unwrap().merge(&c).unwrap();
        let right = a.clone().merge(&b.clone().merge(&c).unwrap()).unwrap();
        if left != right || serde_json::to_string(&left).unwrap() != serde_json::to_string(&right).unwrap() {
            failures[2] += 1;
        }
    }
    verdict(
        failures == [0; 3],
        format!(
            "1000 random triples: identity {} / commutativity {} / associativity {} failures",
            failures[0], failures[1], failures[2]
        ),
    )
}

// 7 + 8 --------------------------------------------------------------------

fn determinism(ctx: &mut Ctx) -> Verdict {
    let pop = population(7, 1000);
    let cfg = config(70, 2);
    let ctrl = controller(1.0);
    let generator = ProtocolGenerator::default();
    let mut bytes = Vec::new();
    for (threads, record) in [(1, true), (4, true), (8, true), (4, false)] {
        let start = Instant::now();
        let out = run_trial(&pop, &generator, &ctrl, &HovorkaExtended, &cfg, Some(threads)).unwrap();
        if record {
            ctx.timings.insert(threads, start.elapsed());
        }
        bytes.push(out.report.to_json());
        if threads == 1 {
            ctx.reports.push(("1000 x 2 weeks".into(), out.report));
        }
    }
    let same = bytes.windows(2).all(|w| w[0] == w[1]);
    verdict(
        same,
        format!("1000 patients x 2 weeks, threads 1/4/8 and a repeat: reports {}", if same { "byte-identical" } else { "differ" }),
    )
}

fn scaling(ctx: &Ctx) -> Verdict {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let t = |n| ctx.timings[&n].as_secs_f64();
    let (s4, s8) = (t(1) / t(4), t(1) / t(8));
    let detail = format!("speedup {s4:.2}x at 4 threads (want >= 3), {s8:.2}x at 8 (want >= 6)");
    if cores < 8 {
        NotApplicable(format!("{cores} core(s) available, needs >= 8; measured {detail}"))
    } else {
        verdict(s4 >= 3.0 && s8 >= 6.0, detail)
    }
}

// 9 ------------------------------------------------------------------------

fn throughput(ctx: &mut Ctx) -> Verdict {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let full = std::env::var_os("VCT_FULL_SCALE").is_some();
    let (n, weeks) = if full { (10_000, 52) } else { (100, 52) };
    let threads = cores.min(8);
    let pop = population(9, n);
    let cfg = SimulationConfig {
        store_trace: TracePolicy::Never,
        ..config(90, weeks)
    };
    let start = Instant::now();
    let out = run_trial(&pop, &ProtocolGenerator::default(), &controller(1.0), &HovorkaExtended, &cfg, Some(threads)).unwrap();
    let wall = start.elapsed().as_secs_f64();
    ctx.reports.push((format!("{n} x {weeks} weeks"), out.report));
    let patient_weeks = (n as u64 * weeks) as f64;
    // Cost per patient-week on one core, assuming linear scaling.
    let cost = wall * threads as f64 / patient_weeks;
    let projected_min = cost * 1e6 * 52.0 / 64.0 / 60.0;
    let reference_min = 82.0;
    let ok = projected_min <= reference_min * 10.0 && projected_min >= reference_min / 10.0;
    verdict(
        ok,
        format!(
            "{n} patients x {weeks} weeks on {threads} thread(s) in {wall:.1} s ({:.2} ms per patient-week-core){}; projected 10^6 x 52 weeks on 64 cores: {projected_min:.0} min vs 82 min (within 10x: {})",
            cost * 1e3,
            if full { "" } else { ", subset; set VCT_FULL_SCALE=1 for 10^4" },
            if ok { "yes" } else { "no" }
        ),
    )
}

// 10 -----------------------------------------------------------------------

fn trial_a_vs_b(ctx: &mut Ctx) -> Verdict {
    let pop = population(10, 1000);
    let cfg = config(100, 4);
    let generator = ProtocolGenerator::default();
    let run = |scale| {
        run_trial(&pop, &generator, &controller(scale), &HovorkaExtended, &cfg, None)
            .unwrap()
            .report
    };
    let a = run(1.0);
    let b = run(0.5);
    let normo = GlycemicRange::Normo;
    let checks = [
        ("mean BG", a.mean_bg, b.mean_bg, b.mean_bg > a.mean_bg),
        ("TIR normo", a.mean_tir(normo), b.mean_tir(normo), b.mean_tir(normo) < a.mean_tir(normo)),
        ("bolus U/day", a.doses.bolus.mean, b.doses.bolus.mean, b.doses.bolus.mean > a.doses.bolus.mean),
        ("glucagon ug/day", a.doses.glucagon.mean, b.doses.glucagon.mean, b.doses.glucagon.mean > a.doses.glucagon.mean),
    ];
    let detail: Vec<String> = checks
        .iter()
        .map(|(n, x, y, ok)| format!("{n} A {x:.3} B {y:.3} {}", if *ok { "ok" } else { "WRONG SIGN" }))
        .collect();
    let ok = checks.iter().all(|c| c.3);
    ctx.reports.push(("trial A".into(), a));
    ctx.reports.push(("trial B".into(), b));
    verdict(ok, format!("1000 x 4 weeks: {}", detail.join("; ")))
}

// 11 -----------------------------------------------------------------------

fn worst_case_retention(ctx: &mut Ctx) -> Verdict {
    let pop = population(11, 100);
    let generator = ProtocolGenerator::default();
    let ctrl = controller(1.0);
    let worst_run = run_trial(&pop, &generator, &ctrl, &HovorkaExtended, &config(110, 1), None).unwrap();
    let all_cfg = SimulationConfig {
        store_trace: TracePolicy::Always,
        ..config(110, 1)
    };
    let all = run_trial(&pop, &generator, &ctrl, &HovorkaExtended, &all_cfg, None).unwrap();
    let retained = worst_run.worst_trace.expect("worst trace retained");
    let retained_min = retained.min_bg().unwrap();
    let others_min = all
        .traces
        .values()
        .filter(|t| t.patient_id != retained.patient_id)
        .map(|t| t.min_bg().unwrap())
        .fold(f64::INFINITY, f64::min);
    let same_trace = all.traces.get(&retained.patient_id) == Some(&retained);
    let ok = all.traces.len() == 100
        && retained_min <= others_min
        && retained_min == worst_run.report.worst_case.min_bg
        && same_trace;
    ctx.reports.push(("worst-case run".into(), worst_run.report.clone()));
    verdict(
        ok,
        format!(
            "patient {} min {retained_min:.4} vs others' lowest {others_min:.4}; report min {:.4}; trace identical to the always-rerun: {same_trace}",
            retained.patient_id, worst_run.report.worst_case.min_bg
        ),
    )
}

// 12 -----------------------------------------------------------------------

fn parameter_rules() -> Verdict {
    let table = ParameterTable::hovorka_default();
    let model = HovorkaExtended;
    let pop = population(12, 10_000);
    let mut violations = 0;
    for vp in &pop {
        let set = &vp.parameters;
        for spec in &table.parameters {
            let v = set.values[&spec.name];
            let within = match spec.distribution {
                ParameterDistribution::Normal { mean, sd } => mean - sd <= v && v <= mean + sd,
                _ => true,
            };
            if v < 0.0 || !within {
                violations += 1;
            }
        }
        // Recompute the basal rate rather than trusting the stored value.
        let p = model.bind(set, vp.patient.body_weight_kg).unwrap();
        let basal = model.steady_state(&p, table.steady_state_bg).unwrap().basal_u_per_h;
        if basal < 0.4 || basal != set.basal_u_per_h {
            violations += 1;
        }
    }
    verdict(violations == 0, format!("10^4 accepted sets, {violations} violations"))
}

// 14 -----------------------------------------------------------------------

fn storage_round_trip(ctx: &Ctx) -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path().join("store")).unwrap();
    let mut problems = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            problems.push(name.to_owned());
        }
    };

    let pop = population(14, 100);
    let path = store.save_population("pop", &pop).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let back = store.load_population("pop").unwrap();
    store.save_population("pop", &back).unwrap();
    check("population", back == pop && std::fs::read(&path).unwrap() == bytes);

    let gen = ProtocolGenerator::default();
    let protocols: Vec<Protocol> = pop
        .iter()
        .take(10)
        .map(|vp| gen.generate(1, vp.patient.id, vp.patient.body_weight_kg, WEEK_S).unwrap())
        .collect();
    let path = store.save_protocols("proto", &protocols).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let back = store.load_protocols("proto").unwrap();
    store.save_protocols("proto", &back).unwrap();
    check("protocols", back == protocols && std::fs::read(&path).unwrap() == bytes);

    let sets: Vec<ParameterSetRecord> = pop
        .iter()
        .map(|vp| ParameterSetRecord {
            patient_id: vp.patient.id,
            parameters: vp.parameters.clone(),
        })
        .collect();
    let path = store.save_parameter_sets("params", &sets).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let back = store.load_parameter_sets("params").unwrap();
    store.save_parameter_sets("params", &back).unwrap();
    check("parameter sets", back == sets && std::fs::read(&path).unwrap() == bytes);

    let report = &ctx.reports.last().expect("a report").1;
    let path = store.save_report("report", report).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let back = store.load_report("report").unwrap();
    store.save_report("report", &back).unwrap();
    check("report", &back == report && std::fs::read(&path).unwrap() == bytes);

    let manifest = r#"
trial_id = "rerun-check"
store = "store"
output_dir = "out"

[population]
id = "pop"

[simulation]
seed = 141
horizon_s = 604800
"#;
    let resolved = manifest::resolve_text(manifest, dir.path(), &RunOverrides::default()).unwrap();
    manifest::run(&resolved, None, &|_| {}).unwrap();
    let (_, same) = manifest::verify_rerun(&store, "rerun-check", Some(3)).unwrap();
    check("rerun", same);

    verdict(
        problems.is_empty(),
        format!(
            "population, protocols, parameter sets, report byte-identical; rerun from trial record identical: {}{}",
            same,
            if problems.is_empty() { String::new() } else { format!("; failed: {}", problems.join(", ")) }
        ),
    )
}

fn main() {
    let mut ctx = Ctx::default();
    let mut safety = SafetyObserver::default();
    let mut results: Vec<(u8, &str, Verdict)> = Vec::new();
    let mut record = |n: u8, name: &'static str, v: Verdict| {
        let (tag, detail) = match &v {
            Pass(d) => ("PASS", d),
            Fail(d) => ("FAIL", d),
            NotApplicable(d) => ("N/A ", d),
        };
        println!("[{tag}] {n:>2} {name}: {detail}");
        results.push((n, name, v));
    };

    record(1, "protocol structure", protocol_structure());
    record(2, "meal arithmetic", meal_arithmetic());
    let partition = tir_partition_and_safety(&mut ctx, &mut safety);
    record(3, "TIR partition", partition);
    record(5, "degenerate SDE vs reference ODE", degenerate_sde());
    record(6, "accumulator monoid laws", monoid_laws());
    record(7, "determinism and thread invariance", determinism(&mut ctx));
    record(8, "parallel scaling", scaling(&ctx));
    record(9, "throughput extrapolation", throughput(&mut ctx));
    record(10, "trial A vs trial B directions", trial_a_vs_b(&mut ctx));
    record(11, "worst-case retention", worst_case_retention(&mut ctx));
    record(12, "parameter sampling rules", parameter_rules());
    record(13, "controller safety invariants", safety_verdict(&safety));
    record(14, "storage round trip", storage_round_trip(&ctx));
    record(4, "CDF monotonicity and envelope", cdf_structure(&ctx));

    let failed: Vec<u8> = results
        .iter()
        .filter(|r| matches!(r.2, Fail(_)))
        .map(|r| r.0)
        .collect();
    if failed.is_empty() {
        println!("acceptance: all applicable criteria pass");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}

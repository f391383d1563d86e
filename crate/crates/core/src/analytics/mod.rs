//! Streaming performance statistics.
//!
//! [`PatientStats`] is filled sample by sample during one simulation and then
//! folded into a [`TrialAccumulator`]. Accumulators hold only integers and
//! exact min/max values, so [`TrialAccumulator::merge`] is associative and
//! commutative bit for bit and the merged result does not depend on how
//! patients were split across workers.

mod report;

pub use report::{
    bg_cdf_report, compare_trials, dose_report, tir_report, BgCdfReport, BgTimeReport, BoxStats,
    Comparison, Deltas, DoseHistogram, DoseReport, TirReport, TrialReport, WorstCaseSummary,
    REPORT_FORMAT,
};

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DAY_S: u64 = 86_400;

/// Range boundaries, mmol/L. Each range is `[lower, upper)`.
pub const RANGE_BOUNDS: [f64; 4] = [3.0, 3.9, 10.0, 13.9];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlycemicRange {
    SevereHypo,
    Hypo,
    Normo,
    Hyper,
    SevereHyper,
}

impl GlycemicRange {
    pub const ALL: [GlycemicRange; 5] = [
        GlycemicRange::SevereHypo,
        GlycemicRange::Hypo,
        GlycemicRange::Normo,
        GlycemicRange::Hyper,
        GlycemicRange::SevereHyper,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            GlycemicRange::SevereHypo => "severe_hypo",
            GlycemicRange::Hypo => "hypo",
            GlycemicRange::Normo => "normo",
            GlycemicRange::Hyper => "hyper",
            GlycemicRange::SevereHyper => "severe_hyper",
        }
    }
}

pub fn classify_bg(bg: f64) -> GlycemicRange {
    GlycemicRange::ALL[RANGE_BOUNDS.partition_point(|b| *b <= bg)]
}

/// CDF thresholds 0.5, 0.6, ..., 25.0 mmol/L.
pub const THRESHOLD_COUNT: usize = 246;

pub fn threshold(i: usize) -> f64 {
    (5 + i) as f64 / 10.0
}

pub fn thresholds() -> Vec<f64> {
    (0..THRESHOLD_COUNT).map(threshold).collect()
}

/// Number of thresholds `≤ bg`; the sample counts as below every threshold
/// from this index on.
fn threshold_bin(bg: f64) -> usize {
    // threshold(i) <= bg  <=>  5 + i <= 10·bg, up to rounding at the exact
    // grid points, which the comparison below settles.
    let mut k = ((bg * 10.0).floor() as i64 - 4).clamp(0, THRESHOLD_COUNT as i64) as usize;
    while k > 0 && threshold(k - 1) > bg {
        k -= 1;
    }
    while k < THRESHOLD_COUNT && threshold(k) <= bg {
        k += 1;
    }
    k
}

/// TIR fractions are binned at 0.5 % resolution: bin `k` holds `k/200`.
pub const TIR_BINS: usize = 201;

/// Micro-units used to turn doses and glucose into integers.
const MICRO: f64 = 1e6;

fn micro(v: f64) -> i64 {
    (v * MICRO).round() as i64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DoseAggregation {
    /// One histogram entry per patient and simulated day.
    #[default]
    PerPatientDay,
    /// One entry per patient: the mean over its days.
    PerPatientMean,
}

/// Grids and bins shared by every accumulator of a trial.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalyticsConfig {
    pub horizon_s: u64,
    /// Width of the BG-vs-time bins, s.
    pub time_bin_s: u64,
    /// U/day
    pub basal_bin: f64,
    /// U/day
    pub bolus_bin: f64,
    /// μg/day
    pub glucagon_bin: f64,
    pub dose_aggregation: DoseAggregation,
}

impl Default for AnalyticsConfig {
    fn default() -> Self {
        AnalyticsConfig {
            horizon_s: 7 * DAY_S,
            time_bin_s: 3600,
            basal_bin: 1.0,
            bolus_bin: 1.0,
            glucagon_bin: 20.0,
            dose_aggregation: DoseAggregation::PerPatientDay,
        }
    }
}

impl AnalyticsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.time_bin_s == 0 || !(self.basal_bin > 0.0 && self.bolus_bin > 0.0 && self.glucagon_bin > 0.0) {
            return Err(Error::Config("analytics bins must be positive".into()));
        }
        Ok(())
    }

    fn time_bins(&self) -> usize {
        self.horizon_s.div_ceil(self.time_bin_s) as usize
    }
}

/// Doses delivered during one sample interval.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SampleDoses {
    pub basal_u: f64,
    pub bolus_u: f64,
    pub glucagon_ug: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DailyDose {
    /// U
    pub basal: f64,
    /// U
    pub bolus: f64,
    /// μg
    pub glucagon: f64,
}

/// Glucose summary of one time bin.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeBin {
    pub sum_micro: i128,
    pub count: u64,
    pub min_micro: Option<i64>,
    pub max_micro: Option<i64>,
}

impl TimeBin {
    fn add(&mut self, bg_micro: i64) {
        self.sum_micro += bg_micro as i128;
        self.count += 1;
        self.min_micro = Some(self.min_micro.map_or(bg_micro, |m| m.min(bg_micro)));
        self.max_micro = Some(self.max_micro.map_or(bg_micro, |m| m.max(bg_micro)));
    }

    fn merge(&mut self, o: &TimeBin) {
        self.sum_micro += o.sum_micro;
        self.count += o.count;
        self.min_micro = opt_min(self.min_micro, o.min_micro);
        self.max_micro = opt_max(self.max_micro, o.max_micro);
    }
}

fn opt_min<T: Ord>(a: Option<T>, b: Option<T>) -> Option<T> {
    match (a, b) {
        (Some(a), Some(b)) => Some(a.min(b)),
        (a, None) => a,
        (None, b) => b,
    }
}

fn opt_max<T: Ord>(a: Option<T>, b: Option<T>) -> Option<T> {
    match (a, b) {
        (Some(a), Some(b)) => Some(a.max(b)),
        (a, None) => a,
        (None, b) => b,
    }
}

/// Statistics of one simulated patient.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientStats {
    pub patient_id: u64,
    /// Seconds spent in each range.
    pub range_s: [u64; 5],
    pub elapsed_s: u64,
    pub min_bg: Option<f64>,
    pub max_bg: Option<f64>,
    pub bg_sum_micro: i128,
    pub samples: u64,
    /// Seconds with BG in `[threshold(k-1), threshold(k))`.
    below_hist: Vec<u64>,
    pub days: Vec<DailyDose>,
    time_bins: Vec<TimeBin>,
    time_bin_s: u64,
}

impl PatientStats {
    pub fn new(patient_id: u64, config: &AnalyticsConfig) -> Self {
        PatientStats {
            patient_id,
            range_s: [0; 5],
            elapsed_s: 0,
            min_bg: None,
            max_bg: None,
            bg_sum_micro: 0,
            samples: 0,
            below_hist: vec![0; THRESHOLD_COUNT + 1],
            days: Vec::new(),
            time_bins: vec![TimeBin::default(); config.time_bins()],
            time_bin_s: config.time_bin_s,
        }
    }

    /// Account for `dt_s` seconds at glucose `bg` starting at `t_s`.
    pub fn accumulate_sample(&mut self, t_s: u64, bg: f64, doses: SampleDoses, dt_s: u64) {
        self.range_s[classify_bg(bg).index()] += dt_s;
        self.below_hist[threshold_bin(bg)] += dt_s;
        self.elapsed_s += dt_s;
        self.min_bg = Some(self.min_bg.map_or(bg, |m| m.min(bg)));
        self.max_bg = Some(self.max_bg.map_or(bg, |m| m.max(bg)));
        let q = micro(bg);
        self.bg_sum_micro += q as i128;
        self.samples += 1;
        let bin = (t_s / self.time_bin_s) as usize;
        if bin >= self.time_bins.len() {
            self.time_bins.resize(bin + 1, TimeBin::default());
        }
        self.time_bins[bin].add(q);
        let day = (t_s / DAY_S) as usize;
        if day >= self.days.len() {
            self.days.resize(day + 1, DailyDose::default());
        }
        let d = &mut self.days[day];
        d.basal += doses.basal_u;
        d.bolus += doses.bolus_u;
        d.glucagon += doses.glucagon_ug;
    }

    /// Seconds below each CDF threshold; nondecreasing.
    pub fn time_below(&self) -> Vec<u64> {
        self.below_hist[..THRESHOLD_COUNT]
            .iter()
            .scan(0u64, |acc, v| {
                *acc += v;
                Some(*acc)
            })
            .collect()
    }

    pub fn time_below_3_s(&self) -> u64 {
        self.range_s[GlycemicRange::SevereHypo.index()]
    }

    pub fn mean_bg(&self) -> Option<f64> {
        (self.samples > 0).then(|| self.bg_sum_micro as f64 / MICRO / self.samples as f64)
    }

    pub fn tir_fraction(&self, r: GlycemicRange) -> f64 {
        if self.elapsed_s == 0 {
            0.0
        } else {
            self.range_s[r.index()] as f64 / self.elapsed_s as f64
        }
    }
}

/// TIR bin of `part / whole`, rounded to the nearest 0.5 %.
fn tir_bin(part: u64, whole: u64) -> usize {
    let scaled = part as u128 * 200;
    ((scaled + whole as u128 / 2) / whole as u128) as usize
}

/// Integer histogram with fixed-width bins `[k·w, (k+1)·w)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_width: f64,
    pub counts: Vec<u64>,
    pub sum_micro: i128,
}

impl Histogram {
    pub fn new(bin_width: f64) -> Self {
        Histogram {
            bin_width,
            counts: Vec::new(),
            sum_micro: 0,
        }
    }

    pub fn add(&mut self, value: f64) {
        let q = micro(value.max(0.0));
        let w = micro(self.bin_width).max(1);
        let bin = (q / w) as usize;
        if bin >= self.counts.len() {
            self.counts.resize(bin + 1, 0);
        }
        self.counts[bin] += 1;
        self.sum_micro += q as i128;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn mean(&self) -> Option<f64> {
        let n = self.total();
        (n > 0).then(|| self.sum_micro as f64 / MICRO / n as f64)
    }

    fn merge(&mut self, o: &Histogram) {
        if o.counts.len() > self.counts.len() {
            self.counts.resize(o.counts.len(), 0);
        }
        for (a, b) in self.counts.iter_mut().zip(&o.counts) {
            *a += b;
        }
        self.sum_micro += o.sum_micro;
    }
}

/// Statistics retained for the worst-case patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorstCase {
    pub patient_id: u64,
    pub min_bg: f64,
    pub time_below_3_s: u64,
    pub range_s: [u64; 5],
    pub time_below: Vec<u64>,
    pub elapsed_s: u64,
}

impl WorstCase {
    fn from_stats(s: &PatientStats) -> Option<Self> {
        Some(WorstCase {
            patient_id: s.patient_id,
            min_bg: s.min_bg?,
            time_below_3_s: s.time_below_3_s(),
            range_s: s.range_s,
            time_below: s.time_below(),
            elapsed_s: s.elapsed_s,
        })
    }

    /// Ordering where "less" means "worse": lower minimum BG, then more time
    /// below 3 mmol/L, then lower id.
    pub fn severity_cmp(&self, o: &WorstCase) -> Ordering {
        self.min_bg
            .total_cmp(&o.min_bg)
            .then(o.time_below_3_s.cmp(&self.time_below_3_s))
            .then(self.patient_id.cmp(&o.patient_id))
    }
}

/// Per-threshold population envelope of time below threshold.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Envelope {
    pub min_s: Option<u64>,
    pub max_s: Option<u64>,
    pub sum_s: u128,
}

/// Mergeable trial-level statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialAccumulator {
    pub config: AnalyticsConfig,
    pub n_patients: u64,
    pub total_s: u64,
    pub range_s: [u128; 5],
    /// Per range, histogram of patient TIR fractions over [`TIR_BINS`] bins.
    pub tir_hist: Vec<Vec<u64>>,
    pub envelope: Vec<Envelope>,
    pub bg_sum_micro: i128,
    pub samples: u64,
    pub min_bg: Option<f64>,
    pub max_bg: Option<f64>,
    pub time_bins: Vec<TimeBin>,
    pub basal: Histogram,
    pub bolus: Histogram,
    pub glucagon: Histogram,
    pub worst: Option<WorstCase>,
    /// Patients whose simulation aborted, with the reason.
    pub aborted: BTreeMap<u64, String>,
}

fn fmin(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    match (a, b) {
        (Some(a), Some(b)) => Some(a.min(b)),
        (a, None) => a,
        (None, b) => b,
    }
}

fn fmax(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    match (a, b) {
        (Some(a), Some(b)) => Some(a.max(b)),
        (a, None) => a,
        (None, b) => b,
    }
}

impl TrialAccumulator {
    /// The identity element.
    pub fn empty(config: AnalyticsConfig) -> Self {
        TrialAccumulator {
            config,
            n_patients: 0,
            total_s: 0,
            range_s: [0; 5],
            tir_hist: vec![vec![0; TIR_BINS]; 5],
            envelope: vec![Envelope::default(); THRESHOLD_COUNT],
            bg_sum_micro: 0,
            samples: 0,
            min_bg: None,
            max_bg: None,
            time_bins: vec![TimeBin::default(); config.time_bins()],
            basal: Histogram::new(config.basal_bin),
            bolus: Histogram::new(config.bolus_bin),
            glucagon: Histogram::new(config.glucagon_bin),
            worst: None,
            aborted: BTreeMap::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.n_patients == 0
    }

    pub fn add_patient(&mut self, s: &PatientStats) -> Result<()> {
        if s.elapsed_s != self.config.horizon_s {
            return Err(Error::GridMismatch(format!(
                "patient {} covers {} s, accumulator expects {} s",
                s.patient_id, s.elapsed_s, self.config.horizon_s
            )));
        }
        if s.elapsed_s == 0 {
            return Err(Error::GridMismatch("patient with an empty horizon".into()));
        }
        self.n_patients += 1;
        self.total_s += s.elapsed_s;
        for r in 0..5 {
            self.range_s[r] += s.range_s[r] as u128;
            self.tir_hist[r][tir_bin(s.range_s[r], s.elapsed_s)] += 1;
        }
        for (e, v) in self.envelope.iter_mut().zip(s.time_below()) {
            e.min_s = Some(e.min_s.map_or(v, |m| m.min(v)));
            e.max_s = Some(e.max_s.map_or(v, |m| m.max(v)));
            e.sum_s += v as u128;
        }
        self.bg_sum_micro += s.bg_sum_micro;
        self.samples += s.samples;
        self.min_bg = fmin(self.min_bg, s.min_bg);
        self.max_bg = fmax(self.max_bg, s.max_bg);
        for (a, b) in self.time_bins.iter_mut().zip(&s.time_bins) {
            a.merge(b);
        }
        match self.config.dose_aggregation {
            DoseAggregation::PerPatientDay => {
                for d in &s.days {
                    self.basal.add(d.basal);
                    self.bolus.add(d.bolus);
                    self.glucagon.add(d.glucagon);
                }
            }
            DoseAggregation::PerPatientMean => {
                let n = s.days.len().max(1) as f64;
                let sum = |f: fn(&DailyDose) -> f64| s.days.iter().map(f).sum::<f64>() / n;
                self.basal.add(sum(|d| d.basal));
                self.bolus.add(sum(|d| d.bolus));
                self.glucagon.add(sum(|d| d.glucagon));
            }
        }
        if let Some(w) = WorstCase::from_stats(s) {
            self.worst = pick_worst(self.worst.take(), Some(w));
        }
        Ok(())
    }

    pub fn add_aborted(&mut self, patient_id: u64, reason: String) {
        self.aborted.insert(patient_id, reason);
    }

    /// Combine two accumulators built with the same configuration.
    pub fn merge(mut self, o: &TrialAccumulator) -> Result<TrialAccumulator> {
        if self.config != o.config {
            return Err(Error::GridMismatch(format!(
                "{:?} vs {:?}",
                self.config, o.config
            )));
        }
        self.n_patients += o.n_patients;
        self.total_s += o.total_s;
        for r in 0..5 {
            self.range_s[r] += o.range_s[r];
            for (a, b) in self.tir_hist[r].iter_mut().zip(&o.tir_hist[r]) {
                *a += b;
            }
        }
        for (a, b) in self.envelope.iter_mut().zip(&o.envelope) {
            a.min_s = opt_min(a.min_s, b.min_s);
            a.max_s = opt_max(a.max_s, b.max_s);
            a.sum_s += b.sum_s;
        }
        self.bg_sum_micro += o.bg_sum_micro;
        self.samples += o.samples;
        self.min_bg = fmin(self.min_bg, o.min_bg);
        self.max_bg = fmax(self.max_bg, o.max_bg);
        for (a, b) in self.time_bins.iter_mut().zip(&o.time_bins) {
            a.merge(b);
        }
        self.basal.merge(&o.basal);
        self.bolus.merge(&o.bolus);
        self.glucagon.merge(&o.glucagon);
        self.worst = pick_worst(self.worst.take(), o.worst.clone());
        self.aborted
            .extend(o.aborted.iter().map(|(k, v)| (*k, v.clone())));
        Ok(self)
    }

    pub fn mean_bg(&self) -> Option<f64> {
        (self.samples > 0).then(|| self.bg_sum_micro as f64 / MICRO / self.samples as f64)
    }

    /// Population mean fraction of time in `r`.
    pub fn mean_tir(&self, r: GlycemicRange) -> Option<f64> {
        (self.total_s > 0).then(|| self.range_s[r.index()] as f64 / self.total_s as f64)
    }
}

fn pick_worst(a: Option<WorstCase>, b: Option<WorstCase>) -> Option<WorstCase> {
    match (a, b) {
        (Some(a), Some(b)) => Some(if b.severity_cmp(&a) == Ordering::Less { b } else { a }),
        (a, None) => a,
        (None, b) => b,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(horizon_s: u64) -> AnalyticsConfig {
        AnalyticsConfig {
            horizon_s,
            ..Default::default()
        }
    }

    fn patient(id: u64, trace: &[f64], dt: u64) -> PatientStats {
        let c = cfg(trace.len() as u64 * dt);
        let mut s = PatientStats::new(id, &c);
        for (k, bg) in trace.iter().enumerate() {
            s.accumulate_sample(k as u64 * dt, *bg, SampleDoses::default(), dt);
        }
        s
    }

    #[test]
    fn classification_boundaries() {
        assert_eq!(classify_bg(2.9), GlycemicRange::SevereHypo);
        assert_eq!(classify_bg(3.0), GlycemicRange::Hypo);
        assert_eq!(classify_bg(3.9), GlycemicRange::Normo);
        assert_eq!(classify_bg(10.0), GlycemicRange::Hyper);
        assert_eq!(classify_bg(13.9), GlycemicRange::SevereHyper);
        assert_eq!(classify_bg(25.0), GlycemicRange::SevereHyper);
        assert_eq!(classify_bg(0.1), GlycemicRange::SevereHypo);
    }

    #[test]
    fn threshold_grid() {
        let t = thresholds();
        assert_eq!(t.len(), 246);
        assert_eq!(t[0], 0.5);
        assert_eq!(t[245], 25.0);
        for bg in [0.1, 0.5, 0.55, 3.0, 3.9, 5.0, 24.95, 25.0, 40.0] {
            let brute = t.iter().filter(|x| **x <= bg).count();
            assert_eq!(threshold_bin(bg), brute, "{bg}");
        }
    }

    #[test]
    fn single_sample() {
        let s = patient(0, &[5.0], 30);
        assert_eq!(s.range_s, [0, 0, 30, 0, 0]);
    }

    #[test]
    fn constant_day_is_all_normo() {
        let s = patient(0, &vec![5.0; 2880], 30);
        assert_eq!(s.tir_fraction(GlycemicRange::Normo), 1.0);
        assert_eq!(s.range_s.iter().sum::<u64>(), DAY_S);
        let below = s.time_below();
        for (i, v) in below.iter().enumerate() {
            assert_eq!(*v, if threshold(i) > 5.0 { DAY_S } else { 0 });
        }
    }

    #[test]
    fn constant_basal_gives_24_units_per_day() {
        let c = cfg(DAY_S);
        let mut s = PatientStats::new(0, &c);
        for k in 0..2880 {
            let d = SampleDoses {
                basal_u: 30.0 / 3600.0,
                ..Default::default()
            };
            s.accumulate_sample(k * 30, 6.0, d, 30);
        }
        let mut acc = TrialAccumulator::empty(c);
        acc.add_patient(&s).unwrap();
        let bin = (24.0 / c.basal_bin) as usize;
        assert_eq!(acc.basal.counts[bin], 1);
        assert_eq!(acc.bolus.counts, vec![1]);
        assert_eq!(acc.glucagon.counts, vec![1]);
    }

    proptest! {
        #[test]
        fn occupancy_matches_brute_force(trace in prop::collection::vec(0.5f64..30.0, 1..400)) {
            let s = patient(1, &trace, 30);
            let mut brute = [0u64; 5];
            for bg in &trace {
                let r = if *bg < 3.0 { 0 } else if *bg < 3.9 { 1 } else if *bg < 10.0 { 2 } else if *bg < 13.9 { 3 } else { 4 };
                brute[r] += 30;
            }
            prop_assert_eq!(s.range_s, brute);
            prop_assert_eq!(s.range_s.iter().sum::<u64>(), trace.len() as u64 * 30);
            let below = s.time_below();
            prop_assert!(below.windows(2).all(|w| w[0] <= w[1]));
            for (i, v) in below.iter().enumerate() {
                let n = trace.iter().filter(|bg| **bg < threshold(i)).count() as u64;
                prop_assert_eq!(*v, n * 30);
            }
        }
    }

    fn random_acc(seed: u64, n: usize) -> TrialAccumulator {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let c = cfg(20 * 30);
        let mut acc = TrialAccumulator::empty(c);
        for _ in 0..n {
            let id = rng.random_range(0..1_000_000);
            let mut s = PatientStats::new(id, &c);
            for k in 0..20 {
                let d = SampleDoses {
                    basal_u: rng.random_range(0.0..0.02),
                    bolus_u: if rng.random_bool(0.1) { rng.random_range(0.0..5.0) } else { 0.0 },
                    glucagon_ug: if rng.random_bool(0.05) { 15.0 } else { 0.0 },
                };
                s.accumulate_sample(k * 30, rng.random_range(1.0..20.0), d, 30);
            }
            acc.add_patient(&s).unwrap();
        }
        if rng.random_bool(0.3) {
            acc.add_aborted(rng.random_range(0..1000), "non-finite".into());
        }
        acc
    }

    proptest! {
        #[test]
        fn merge_is_a_commutative_monoid(sa in any::<u64>(), sb in any::<u64>(), sc in any::<u64>(),
                                         na in 0usize..4, nb in 0usize..4, nc in 0usize..4) {
            let (a, b, c) = (random_acc(sa, na), random_acc(sb, nb), random_acc(sc, nc));
            let e = TrialAccumulator::empty(a.config);
            prop_assert_eq!(a.clone().merge(&e).unwrap(), a.clone());
            prop_assert_eq!(e.merge(&a).unwrap(), a.clone());
            prop_assert_eq!(a.clone().merge(&b).unwrap(), b.clone().merge(&a).unwrap());
            let left = a.clone().merge(&b).unwrap().merge(&c).unwrap();
            let right = a.clone().merge(&b.clone().merge(&c).unwrap()).unwrap();
            prop_assert_eq!(left, right);
        }
    }

    #[test]
    fn merge_equals_sequential_accumulation() {
        let c = cfg(10 * 30);
        let stats: Vec<_> = (0..6)
            .map(|i| patient(i, &(0..10).map(|k| 2.0 + (i * 10 + k) as f64 * 0.3).collect::<Vec<_>>(), 30))
            .collect();
        let mut seq = TrialAccumulator::empty(c);
        for s in &stats {
            seq.add_patient(s).unwrap();
        }
        let mut a = TrialAccumulator::empty(c);
        let mut b = TrialAccumulator::empty(c);
        for s in &stats[..2] {
            a.add_patient(s).unwrap();
        }
        for s in &stats[2..] {
            b.add_patient(s).unwrap();
        }
        assert_eq!(b.merge(&a).unwrap(), seq);
        assert_eq!(seq.worst.as_ref().unwrap().patient_id, 0);
    }

    #[test]
    fn grid_mismatch_is_an_error() {
        let a = TrialAccumulator::empty(cfg(300));
        let b = TrialAccumulator::empty(cfg(600));
        assert!(matches!(a.merge(&b), Err(Error::GridMismatch(_))));
        let mut a = TrialAccumulator::empty(cfg(300));
        assert!(a.add_patient(&patient(0, &[5.0], 30)).is_err());
    }

    #[test]
    fn worst_case_tie_breaks() {
        let a = patient(5, &[2.0, 2.0, 6.0], 30);
        let b = patient(3, &[2.0, 6.0, 6.0], 30);
        let c = patient(1, &[2.0, 6.0, 6.0], 30);
        let mut acc = TrialAccumulator::empty(cfg(90));
        for s in [&b, &a, &c] {
            acc.add_patient(s).unwrap();
        }
        // Same minimum; more time below 3 wins, then lower id.
        assert_eq!(acc.worst.as_ref().unwrap().patient_id, 5);
        let mut acc = TrialAccumulator::empty(cfg(90));
        acc.add_patient(&b).unwrap();
        acc.add_patient(&c).unwrap();
        assert_eq!(acc.worst.unwrap().patient_id, 1);
    }
}

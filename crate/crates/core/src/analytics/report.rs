//! Trial reports and A-vs-B comparison, plus plot-ready CSV exports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{threshold, DoseAggregation, GlycemicRange, Histogram, TrialAccumulator, MICRO, THRESHOLD_COUNT, TIR_BINS};
use crate::error::{Error, Result};

pub const REPORT_FORMAT: &str = "vctrial-report/1";

/// Box-plot statistics of patient TIR fractions in one range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub range: GlycemicRange,
    pub mean: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub whisker_low: f64,
    pub whisker_high: f64,
    /// (TIR fraction, patient count) beyond the whiskers.
    pub outliers: Vec<(f64, u64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TirReport {
    pub ranges: Vec<BoxStats>,
    /// Population mean fraction per range (stacked bar).
    pub population_mean: [f64; 5],
    /// Worst-case patient's fractions per range (stacked bar).
    pub worst_case: Option<[f64; 5]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BgCdfReport {
    pub thresholds: Vec<f64>,
    /// Fractions of time below each threshold.
    pub mean: Vec<f64>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub worst_case: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoseHistogram {
    pub bin_width: f64,
    pub counts: Vec<u64>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoseReport {
    pub aggregation: DoseAggregation,
    /// U/day
    pub basal: DoseHistogram,
    /// U/day
    pub bolus: DoseHistogram,
    /// μg/day
    pub glucagon: DoseHistogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BgTimeReport {
    pub bin_s: u64,
    pub mean: Vec<Option<f64>>,
    pub min: Vec<Option<f64>>,
    pub max: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorstCaseSummary {
    pub patient_id: u64,
    pub min_bg: f64,
    pub time_below_3_s: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbortedPatient {
    pub patient_id: u64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub format: String,
    pub n_patients: u64,
    pub horizon_s: u64,
    pub mean_bg: f64,
    pub min_bg: f64,
    pub max_bg: f64,
    pub tir: TirReport,
    pub cdf: BgCdfReport,
    pub doses: DoseReport,
    pub bg_time: BgTimeReport,
    pub worst_case: WorstCaseSummary,
    pub aborted: Vec<AbortedPatient>,
}

fn tir_value(bin: usize) -> f64 {
    bin as f64 / (TIR_BINS - 1) as f64
}

/// Nearest-rank quantile `num/den` of a binned sample.
fn binned_quantile(counts: &[u64], num: u64, den: u64) -> usize {
    let n: u64 = counts.iter().sum();
    let rank = ((num * n).div_ceil(den)).max(1);
    let mut cum = 0;
    for (k, c) in counts.iter().enumerate() {
        cum += c;
        if cum >= rank {
            return k;
        }
    }
    counts.len() - 1
}

fn box_stats(range: GlycemicRange, counts: &[u64], mean: f64) -> BoxStats {
    let q1 = tir_value(binned_quantile(counts, 1, 4));
    let median = tir_value(binned_quantile(counts, 1, 2));
    let q3 = tir_value(binned_quantile(counts, 3, 4));
    let iqr = q3 - q1;
    let (lo_fence, hi_fence) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let present = || counts.iter().enumerate().filter(|(_, c)| **c > 0);
    let whisker_low = present()
        .map(|(k, _)| tir_value(k))
        .find(|v| *v >= lo_fence)
        .unwrap_or(q1);
    let whisker_high = present()
        .map(|(k, _)| tir_value(k)).rfind(|v| *v <= hi_fence)
        .unwrap_or(q3);
    let outliers = present()
        .map(|(k, c)| (tir_value(k), *c))
        .filter(|(v, _)| *v < whisker_low || *v > whisker_high)
        .collect();
    BoxStats {
        range,
        mean,
        q1,
        median,
        q3,
        whisker_low,
        whisker_high,
        outliers,
    }
}

pub fn tir_report(acc: &TrialAccumulator) -> Result<TirReport> {
    if acc.is_empty() {
        return Err(Error::EmptyAccumulator);
    }
    let mut population_mean = [0.0; 5];
    let mut ranges = Vec::with_capacity(5);
    for r in GlycemicRange::ALL {
        let mean = acc.mean_tir(r).unwrap_or(0.0);
        population_mean[r.index()] = mean;
        ranges.push(box_stats(r, &acc.tir_hist[r.index()], mean));
    }
    let worst_case = acc.worst.as_ref().map(|w| {
        let mut f = [0.0; 5];
        for (i, s) in w.range_s.iter().enumerate() {
            f[i] = *s as f64 / w.elapsed_s as f64;
        }
        f
    });
    Ok(TirReport {
        ranges,
        population_mean,
        worst_case,
    })
}

pub fn bg_cdf_report(acc: &TrialAccumulator) -> Result<BgCdfReport> {
    if acc.is_empty() {
        return Err(Error::EmptyAccumulator);
    }
    let h = acc.config.horizon_s as f64;
    let total = acc.total_s as f64;
    Ok(BgCdfReport {
        thresholds: (0..THRESHOLD_COUNT).map(threshold).collect(),
        mean: acc.envelope.iter().map(|e| e.sum_s as f64 / total).collect(),
        min: acc
            .envelope
            .iter()
            .map(|e| e.min_s.unwrap_or(0) as f64 / h)
            .collect(),
        max: acc
            .envelope
            .iter()
            .map(|e| e.max_s.unwrap_or(0) as f64 / h)
            .collect(),
        worst_case: acc.worst.as_ref().map(|w| {
            w.time_below
                .iter()
                .map(|v| *v as f64 / w.elapsed_s as f64)
                .collect()
        }),
    })
}

fn dose_histogram(h: &Histogram) -> DoseHistogram {
    DoseHistogram {
        bin_width: h.bin_width,
        counts: h.counts.clone(),
        mean: h.mean().unwrap_or(0.0),
    }
}

pub fn dose_report(acc: &TrialAccumulator) -> DoseReport {
    DoseReport {
        aggregation: acc.config.dose_aggregation,
        basal: dose_histogram(&acc.basal),
        bolus: dose_histogram(&acc.bolus),
        glucagon: dose_histogram(&acc.glucagon),
    }
}

fn bg_time_report(acc: &TrialAccumulator) -> BgTimeReport {
    let m = |v: Option<i64>| v.map(|x| x as f64 / MICRO);
    BgTimeReport {
        bin_s: acc.config.time_bin_s,
        mean: acc
            .time_bins
            .iter()
            .map(|b| (b.count > 0).then(|| b.sum_micro as f64 / MICRO / b.count as f64))
            .collect(),
        min: acc.time_bins.iter().map(|b| m(b.min_micro)).collect(),
        max: acc.time_bins.iter().map(|b| m(b.max_micro)).collect(),
    }
}

impl TrialReport {
    pub fn from_accumulator(acc: &TrialAccumulator) -> Result<Self> {
        let worst = acc.worst.as_ref().ok_or(Error::EmptyAccumulator)?;
        Ok(TrialReport {
            format: REPORT_FORMAT.into(),
            n_patients: acc.n_patients,
            horizon_s: acc.config.horizon_s,
            mean_bg: acc.mean_bg().ok_or(Error::EmptyAccumulator)?,
            min_bg: acc.min_bg.ok_or(Error::EmptyAccumulator)?,
            max_bg: acc.max_bg.ok_or(Error::EmptyAccumulator)?,
            tir: tir_report(acc)?,
            cdf: bg_cdf_report(acc)?,
            doses: dose_report(acc),
            bg_time: bg_time_report(acc),
            worst_case: WorstCaseSummary {
                patient_id: worst.patient_id,
                min_bg: worst.min_bg,
                time_below_3_s: worst.time_below_3_s,
            },
            aborted: acc
                .aborted
                .iter()
                .map(|(id, r)| AbortedPatient {
                    patient_id: *id,
                    reason: r.clone(),
                })
                .collect(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text).map_err(|e| Error::parse("trial report", e))?;
        if r.format != REPORT_FORMAT {
            return Err(Error::parse(
                "trial report",
                format!("format `{}`, expected `{REPORT_FORMAT}`", r.format),
            ));
        }
        Ok(r)
    }

    pub fn mean_tir(&self, r: GlycemicRange) -> f64 {
        self.tir.population_mean[r.index()]
    }

    /// Plot data: threshold, mean, min, max, worst case.
    pub fn cdf_csv(&self) -> String {
        let mut s = String::from("threshold,mean,min,max,worst_case\n");
        for i in 0..self.cdf.thresholds.len() {
            let w = self.cdf.worst_case.as_ref().map(|w| w[i].to_string()).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                self.cdf.thresholds[i], self.cdf.mean[i], self.cdf.min[i], self.cdf.max[i], w
            );
        }
        s
    }

    /// Plot data: one box per range.
    pub fn tir_box_csv(&self) -> String {
        let mut s = String::from("range,mean,q1,median,q3,whisker_low,whisker_high,outliers\n");
        for b in &self.tir.ranges {
            let outliers: Vec<String> = b.outliers.iter().map(|(v, c)| format!("{v}x{c}")).collect();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                b.range.name(),
                b.mean,
                b.q1,
                b.median,
                b.q3,
                b.whisker_low,
                b.whisker_high,
                outliers.join(" ")
            );
        }
        s
    }

    /// Plot data: stacked bars for the population mean and the worst case.
    pub fn tir_bars_csv(&self) -> String {
        let mut s = String::from("range,population_mean,worst_case\n");
        for r in GlycemicRange::ALL {
            let w = self.tir.worst_case.map(|w| w[r.index()].to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{}", r.name(), self.tir.population_mean[r.index()], w);
        }
        s
    }

    /// Plot data: dose histograms in long form.
    pub fn dose_csv(&self) -> String {
        let mut s = String::from("quantity,bin_low,bin_high,count\n");
        for (name, h) in [
            ("basal_u", &self.doses.basal),
            ("bolus_u", &self.doses.bolus),
            ("glucagon_ug", &self.doses.glucagon),
        ] {
            for (k, c) in h.counts.iter().enumerate() {
                let _ = writeln!(
                    s,
                    "{name},{},{},{c}",
                    k as f64 * h.bin_width,
                    (k + 1) as f64 * h.bin_width
                );
            }
        }
        s
    }

    /// Plot data: glucose against trial time.
    pub fn bg_time_csv(&self) -> String {
        let mut s = String::from("t_s,mean,min,max\n");
        let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for k in 0..self.bg_time.mean.len() {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                k as u64 * self.bg_time.bin_s,
                f(self.bg_time.mean[k]),
                f(self.bg_time.min[k]),
                f(self.bg_time.max[k])
            );
        }
        s
    }
}

/// Differences `b − a`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Deltas {
    pub mean_tir: [f64; 5],
    pub mean_bg: f64,
    pub worst_min_bg: f64,
    pub mean_daily_basal: f64,
    pub mean_daily_bolus: f64,
    pub mean_daily_glucagon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub a: TrialReport,
    pub b: TrialReport,
    pub deltas: Deltas,
}

pub fn compare_trials(a: &TrialReport, b: &TrialReport) -> Result<Comparison> {
    if a.cdf.thresholds != b.cdf.thresholds {
        return Err(Error::GridMismatch("CDF thresholds differ".into()));
    }
    let widths = |r: &TrialReport| {
        [
            r.doses.basal.bin_width,
            r.doses.bolus.bin_width,
            r.doses.glucagon.bin_width,
        ]
    };
    if widths(a) != widths(b) || a.doses.aggregation != b.doses.aggregation {
        return Err(Error::GridMismatch("dose histogram bins differ".into()));
    }
    let mut mean_tir = [0.0; 5];
    for i in 0..5 {
        mean_tir[i] = b.tir.population_mean[i] - a.tir.population_mean[i];
    }
    Ok(Comparison {
        a: a.clone(),
        b: b.clone(),
        deltas: Deltas {
            mean_tir,
            mean_bg: b.mean_bg - a.mean_bg,
            worst_min_bg: b.worst_case.min_bg - a.worst_case.min_bg,
            mean_daily_basal: b.doses.basal.mean - a.doses.basal.mean,
            mean_daily_bolus: b.doses.bolus.mean - a.doses.bolus.mean,
            mean_daily_glucagon: b.doses.glucagon.mean - a.doses.glucagon.mean,
        },
    })
}

impl Comparison {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("comparison serializes")
    }

    /// Overlaid CDF curves.
    pub fn cdf_overlay_csv(&self) -> String {
        let (a, b) = (&self.a.cdf, &self.b.cdf);
        let mut s = String::from("threshold,mean_a,min_a,max_a,mean_b,min_b,max_b\n");
        for i in 0..a.thresholds.len() {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                a.thresholds[i], a.mean[i], a.min[i], a.max[i], b.mean[i], b.min[i], b.max[i]
            );
        }
        s
    }

    /// Side-by-side TIR statistics.
    pub fn tir_side_by_side_csv(&self) -> String {
        let mut s = String::from("trial,range,mean,q1,median,q3,whisker_low,whisker_high,worst_case\n");
        for (name, r) in [("a", &self.a), ("b", &self.b)] {
            for b in &r.tir.ranges {
                let w = r.tir.worst_case.map(|w| w[b.range.index()].to_string()).unwrap_or_default();
                let _ = writeln!(
                    s,
                    "{name},{},{},{},{},{},{},{},{w}",
                    b.range.name(),
                    b.mean,
                    b.q1,
                    b.median,
                    b.q3,
                    b.whisker_low,
                    b.whisker_high
                );
            }
        }
        s
    }

    /// Overlaid dose histograms.
    pub fn dose_overlay_csv(&self) -> String {
        let mut s = String::from("quantity,bin_low,bin_high,count_a,count_b\n");
        for (name, ha, hb) in [
            ("basal_u", &self.a.doses.basal, &self.b.doses.basal),
            ("bolus_u", &self.a.doses.bolus, &self.b.doses.bolus),
            ("glucagon_ug", &self.a.doses.glucagon, &self.b.doses.glucagon),
        ] {
            let n = ha.counts.len().max(hb.counts.len());
            for k in 0..n {
                let _ = writeln!(
                    s,
                    "{name},{},{},{},{}",
                    k as f64 * ha.bin_width,
                    (k + 1) as f64 * ha.bin_width,
                    ha.counts.get(k).copied().unwrap_or(0),
                    hb.counts.get(k).copied().unwrap_or(0)
                );
            }
        }
        s
    }

    pub fn deltas_csv(&self) -> String {
        let d = &self.deltas;
        let mut s = String::from("quantity,delta_b_minus_a\n");
        for r in GlycemicRange::ALL {
            let _ = writeln!(s, "tir_{},{}", r.name(), d.mean_tir[r.index()]);
        }
        let _ = writeln!(s, "mean_bg,{}", d.mean_bg);
        let _ = writeln!(s, "worst_min_bg,{}", d.worst_min_bg);
        let _ = writeln!(s, "mean_daily_basal,{}", d.mean_daily_basal);
        let _ = writeln!(s, "mean_daily_bolus,{}", d.mean_daily_bolus);
        let _ = writeln!(s, "mean_daily_glucagon,{}", d.mean_daily_glucagon);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::super::{AnalyticsConfig, PatientStats, SampleDoses};
    use super::*;

    fn acc_from(traces: &[Vec<f64>]) -> TrialAccumulator {
        let c = AnalyticsConfig {
            horizon_s: traces[0].len() as u64 * 30,
            ..Default::default()
        };
        let mut acc = TrialAccumulator::empty(c);
        for (id, t) in traces.iter().enumerate() {
            let mut s = PatientStats::new(id as u64, &c);
            for (k, bg) in t.iter().enumerate() {
                s.accumulate_sample(k as u64 * 30, *bg, SampleDoses::default(), 30);
            }
            acc.add_patient(&s).unwrap();
        }
        acc
    }

    #[test]
    fn constant_patient_box_is_degenerate() {
        let acc = acc_from(&[vec![5.0; 100]]);
        let r = tir_report(&acc).unwrap();
        let normo = &r.ranges[GlycemicRange::Normo.index()];
        assert_eq!((normo.mean, normo.q1, normo.median, normo.q3), (1.0, 1.0, 1.0, 1.0));
        assert!(normo.outliers.is_empty());
    }

    #[test]
    fn two_patient_mean() {
        let mut a = vec![5.0; 60];
        a.extend(vec![12.0; 40]);
        let mut b = vec![5.0; 80];
        b.extend(vec![12.0; 20]);
        let r = tir_report(&acc_from(&[a, b])).unwrap();
        assert!((r.population_mean[GlycemicRange::Normo.index()] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn quartiles_match_sort_based_recomputation() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let n = rng.random_range(1..40);
            let traces: Vec<Vec<f64>> = (0..n)
                .map(|_| {
                    let lo = rng.random_range(0..=100);
                    (0..100).map(|k| if k < lo { 5.0 } else { 11.0 }).collect()
                })
                .collect();
            let r = tir_report(&acc_from(&traces)).unwrap();
            let mut tir: Vec<f64> = traces
                .iter()
                .map(|t| t.iter().filter(|bg| **bg < 10.0).count() as f64 / 100.0)
                .collect();
            tir.sort_by(f64::total_cmp);
            let nearest_rank = |q: f64| tir[((q * n as f64).ceil() as usize).max(1) - 1];
            let b = &r.ranges[GlycemicRange::Normo.index()];
            for (got, q) in [(b.q1, 0.25), (b.median, 0.5), (b.q3, 0.75)] {
                assert!((got - nearest_rank(q)).abs() <= 0.005 + 1e-12, "{got} vs {}", nearest_rank(q));
            }
            assert!(b.whisker_low <= b.q1 && b.q3 <= b.whisker_high);
        }
    }

    #[test]
    fn whiskers_and_outliers() {
        let mut traces = vec![vec![5.0; 100]; 9];
        traces.push(vec![11.0; 100]);
        let r = tir_report(&acc_from(&traces)).unwrap();
        let b = &r.ranges[GlycemicRange::Normo.index()];
        assert_eq!((b.q1, b.q3), (1.0, 1.0));
        assert_eq!(b.outliers, vec![(0.0, 1)]);
    }

    #[test]
    fn cdf_step_for_constant_patient() {
        let r = bg_cdf_report(&acc_from(&[vec![5.0; 10]])).unwrap();
        for (t, m) in r.thresholds.iter().zip(&r.mean) {
            assert_eq!(*m, if *t > 5.0 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn cdf_mean_inside_envelope() {
        let traces: Vec<Vec<f64>> = (0..7)
            .map(|i| (0..50).map(|k| 2.0 + ((i * 7 + k * 3) % 20) as f64).collect())
            .collect();
        let r = bg_cdf_report(&acc_from(&traces)).unwrap();
        for i in 0..r.thresholds.len() {
            assert!(r.min[i] <= r.mean[i] && r.mean[i] <= r.max[i]);
        }
        for v in [&r.mean, &r.min, &r.max] {
            assert!(v.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn empty_accumulator_reports_error() {
        let acc = TrialAccumulator::empty(AnalyticsConfig::default());
        assert!(matches!(tir_report(&acc), Err(Error::EmptyAccumulator)));
        assert!(matches!(bg_cdf_report(&acc), Err(Error::EmptyAccumulator)));
    }

    #[test]
    fn self_comparison_has_zero_deltas() {
        let acc = acc_from(&[vec![5.0; 10], vec![9.0; 10]]);
        let r = TrialReport::from_accumulator(&acc).unwrap();
        let c = compare_trials(&r, &r).unwrap();
        assert_eq!(c.deltas.mean_tir, [0.0; 5]);
        assert_eq!(c.deltas.mean_bg, 0.0);
        assert_eq!(c.a.cdf, r.cdf);
        assert_eq!(c.b.cdf, r.cdf);
        assert_eq!(TrialReport::from_json(&r.to_json()).unwrap(), r);
    }
}

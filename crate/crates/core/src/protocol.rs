//! Disturbance protocols composed from basis days, basis weeks and seasons.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::rng::{self, Stream, StreamRole};

pub const DAY_S: u64 = 86_400;
pub const WEEK_S: u64 = 7 * DAY_S;
pub const WEEKS_PER_SEASON: u32 = 13;
pub const WEEKS_PER_YEAR: u32 = 52;
pub const YEAR_S: u64 = WEEKS_PER_YEAR as u64 * WEEK_S;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisturbanceKind {
    Meal,
    Exercise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MealClass {
    Large,
    Medium,
    Small,
    Snack,
}

impl MealClass {
    /// g CHO per kg body weight.
    pub fn grams_per_kg(self) -> f64 {
        match self {
            MealClass::Large => 1.29,
            MealClass::Medium => 0.86,
            MealClass::Small => 0.57,
            MealClass::Snack => 0.29,
        }
    }
}

/// Weight-dependent meal size, g CHO.
pub fn meal_grams(class: MealClass, body_weight_kg: f64) -> f64 {
    body_weight_kg * class.grams_per_kg()
}

/// A meal or exercise session. Times are seconds since trial start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Disturbance {
    pub kind: DisturbanceKind,
    pub start_s: u64,
    pub end_s: u64,
    /// Meals: total g CHO. Exercise: heart-rate-reserve fraction.
    pub magnitude: f64,
    pub announced: bool,
    /// What the controller is told, g CHO.
    pub announced_magnitude: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meal_class: Option<MealClass>,
}

impl Disturbance {
    pub fn duration_s(&self) -> u64 {
        self.end_s.saturating_sub(self.start_s)
    }

    /// Signal level while active: g CHO/min for meals, HRR for exercise.
    pub fn level(&self) -> f64 {
        match self.kind {
            DisturbanceKind::Meal => self.magnitude / (self.duration_s() as f64 / 60.0),
            DisturbanceKind::Exercise => self.magnitude,
        }
    }

    pub fn is_active(&self, t_s: u64) -> bool {
        self.start_s <= t_s && t_s < self.end_s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DayType {
    Standard,
    Active,
    MovieNight,
    LateNight,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeasonClass {
    WinterAutumn,
    SummerSpring,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeekType {
    Standard,
    Active,
    Vacation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeasonName {
    Winter,
    Spring,
    Summer,
    Autumn,
}

impl SeasonName {
    pub fn class(self) -> SeasonClass {
        match self {
            SeasonName::Winter | SeasonName::Autumn => SeasonClass::WinterAutumn,
            SeasonName::Spring | SeasonName::Summer => SeasonClass::SummerSpring,
        }
    }
}

/// Minutes after midnight, written `HH:MM`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ClockTime(pub u32);

impl ClockTime {
    pub fn seconds(self) -> u64 {
        self.0 as u64 * 60
    }
}

impl fmt::Display for ClockTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:02}:{:02}", self.0 / 60, self.0 % 60)
    }
}

impl std::str::FromStr for ClockTime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::parse("clock time", format!("`{s}` is not HH:MM"));
        let (h, m) = s.split_once(':').ok_or_else(bad)?;
        let h: u32 = h.parse().map_err(|_| bad())?;
        let m: u32 = m.parse().map_err(|_| bad())?;
        if m >= 60 || h * 60 + m > 24 * 60 {
            return Err(bad());
        }
        Ok(ClockTime(h * 60 + m))
    }
}

impl Serialize for ClockTime {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ClockTime {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExerciseSpec {
    pub duration_min: u32,
    pub intensity_hrr: f64,
}

/// One entry of a basis day: exactly one of `meal` / `exercise` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayEvent {
    pub at: ClockTime,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meal: Option<MealClass>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exercise: Option<ExerciseSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisDay {
    pub day_type: DayType,
    pub season_class: SeasonClass,
    pub events: Vec<DayEvent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisWeek {
    pub week_type: WeekType,
    pub day_counts: BTreeMap<DayType, u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Season {
    pub name: SeasonName,
    pub week_counts: BTreeMap<WeekType, u32>,
}

/// Composition record of one protocol week.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalendarWeek {
    pub index: u32,
    pub season: SeasonName,
    pub week_type: WeekType,
    pub days: Vec<DayType>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    pub id: u64,
    pub horizon_s: u64,
    pub disturbances: Vec<Disturbance>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub calendar: Vec<CalendarWeek>,
}

impl Protocol {
    pub fn meals(&self) -> impl Iterator<Item = &Disturbance> {
        self.disturbances
            .iter()
            .filter(|d| d.kind == DisturbanceKind::Meal)
    }

    pub fn exercise_sessions(&self) -> impl Iterator<Item = &Disturbance> {
        self.disturbances
            .iter()
            .filter(|d| d.kind == DisturbanceKind::Exercise)
    }
}

#[derive(Debug, Deserialize)]
struct DaysFile {
    meal_duration_min: u32,
    day: Vec<BasisDay>,
}

#[derive(Debug, Deserialize)]
struct WeeksFile {
    season_order: Vec<SeasonName>,
    weeks: BTreeMap<WeekType, BTreeMap<DayType, u32>>,
    seasons: BTreeMap<SeasonName, BTreeMap<WeekType, u32>>,
}

const BUNDLED_DAYS: &str = include_str!("../data/basis_days.toml");
const BUNDLED_WEEKS: &str = include_str!("../data/weeks_seasons.toml");

/// Basis days, weeks and seasons available to protocol composition.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolLibrary {
    pub meal_duration_s: u64,
    pub days: Vec<BasisDay>,
    pub weeks: Vec<BasisWeek>,
    pub seasons: Vec<Season>,
}

impl Default for ProtocolLibrary {
    fn default() -> Self {
        Self::from_toml(BUNDLED_DAYS, BUNDLED_WEEKS).expect("bundled protocol library parses")
    }
}

impl ProtocolLibrary {
    pub fn from_toml(days_toml: &str, weeks_toml: &str) -> Result<Self> {
        let days: DaysFile =
            toml::from_str(days_toml).map_err(|e| Error::parse("basis days", e))?;
        let weeks: WeeksFile =
            toml::from_str(weeks_toml).map_err(|e| Error::parse("weeks and seasons", e))?;
        let mut seasons = Vec::new();
        for name in &weeks.season_order {
            let counts = weeks.seasons.get(name).ok_or_else(|| {
                Error::Config(format!("season {name:?} listed in season_order but not defined"))
            })?;
            seasons.push(Season {
                name: *name,
                week_counts: counts.clone(),
            });
        }
        let lib = ProtocolLibrary {
            meal_duration_s: days.meal_duration_min as u64 * 60,
            days: days.day,
            weeks: weeks
                .weeks
                .into_iter()
                .map(|(week_type, day_counts)| BasisWeek {
                    week_type,
                    day_counts,
                })
                .collect(),
            seasons,
        };
        lib.validate()?;
        Ok(lib)
    }

    pub fn validate(&self) -> Result<()> {
        if self.meal_duration_s == 0 {
            return Err(Error::Config("meal duration must be positive".into()));
        }
        for day in &self.days {
            for ev in &day.events {
                let (duration, ok) = match (&ev.meal, &ev.exercise) {
                    (Some(_), None) => (self.meal_duration_s, true),
                    (None, Some(ex)) => (
                        ex.duration_min as u64 * 60,
                        ex.duration_min > 0 && (0.0..=1.0).contains(&ex.intensity_hrr),
                    ),
                    _ => (0, false),
                };
                if !ok {
                    return Err(Error::Config(format!(
                        "{:?}/{:?} event at {} must be exactly one valid meal or exercise",
                        day.day_type, day.season_class, ev.at
                    )));
                }
                if ev.at.seconds() + duration > DAY_S {
                    return Err(Error::Config(format!(
                        "{:?}/{:?} event at {} runs past midnight",
                        day.day_type, day.season_class, ev.at
                    )));
                }
            }
            if day.events.windows(2).any(|w| w[0].at > w[1].at) {
                return Err(Error::Config(format!(
                    "{:?}/{:?} events are not ordered by clock time",
                    day.day_type, day.season_class
                )));
            }
        }
        for week in &self.weeks {
            let total: u32 = week.day_counts.values().sum();
            if total != 7 {
                return Err(Error::Config(format!(
                    "week {:?} has {total} days, expected 7",
                    week.week_type
                )));
            }
        }
        for season in &self.seasons {
            let total: u32 = season.week_counts.values().sum();
            if total != WEEKS_PER_SEASON {
                return Err(Error::Config(format!(
                    "season {:?} has {total} weeks, expected {WEEKS_PER_SEASON}",
                    season.name
                )));
            }
            for wt in season.week_counts.keys() {
                self.week(*wt)?;
            }
        }
        Ok(())
    }

    pub fn day(&self, day_type: DayType, class: SeasonClass) -> Result<&BasisDay> {
        self.days
            .iter()
            .find(|d| d.day_type == day_type && d.season_class == class)
            .ok_or_else(|| Error::Config(format!("no basis day {day_type:?} for {class:?}")))
    }

    pub fn week(&self, week_type: WeekType) -> Result<&BasisWeek> {
        self.weeks
            .iter()
            .find(|w| w.week_type == week_type)
            .ok_or_else(|| Error::Config(format!("no basis week {week_type:?}")))
    }

    /// Absolute-time disturbances of one basis day.
    pub fn compose_day(&self, day: &BasisDay, body_weight_kg: f64, day_offset_s: u64) -> Vec<Disturbance> {
        day.events
            .iter()
            .map(|ev| {
                let start_s = day_offset_s + ev.at.seconds();
                match (ev.meal, ev.exercise) {
                    (Some(class), _) => {
                        let grams = meal_grams(class, body_weight_kg);
                        Disturbance {
                            kind: DisturbanceKind::Meal,
                            start_s,
                            end_s: start_s + self.meal_duration_s,
                            magnitude: grams,
                            announced: true,
                            announced_magnitude: grams,
                            meal_class: Some(class),
                        }
                    }
                    (None, Some(ex)) => Disturbance {
                        kind: DisturbanceKind::Exercise,
                        start_s,
                        end_s: start_s + ex.duration_min as u64 * 60,
                        magnitude: ex.intensity_hrr,
                        announced: true,
                        announced_magnitude: 0.0,
                        meal_class: None,
                    },
                    (None, None) => unreachable!("validated library"),
                }
            })
            .collect()
    }

    /// Seven days drawn from the week's day multiset, shuffled so that no
    /// active day is adjacent to a late night whenever such an order exists.
    pub fn compose_week(
        &self,
        week: &BasisWeek,
        class: SeasonClass,
        rng: &mut Stream,
        body_weight_kg: f64,
        week_offset_s: u64,
    ) -> Result<(Vec<Disturbance>, Vec<DayType>)> {
        let mut days: Vec<DayType> = week
            .day_counts
            .iter()
            .flat_map(|(dt, n)| std::iter::repeat_n(*dt, *n as usize))
            .collect();
        for _ in 0..1000 {
            days.shuffle(rng);
            if !active_next_to_late_night(&days) {
                break;
            }
        }
        let mut out = Vec::new();
        for (i, dt) in days.iter().enumerate() {
            let day = self.day(*dt, class)?;
            out.extend(self.compose_day(day, body_weight_kg, week_offset_s + i as u64 * DAY_S));
        }
        Ok((out, days))
    }

    /// 52 weeks: each season's week multiset shuffled, seasons in order.
    pub fn compose_year(&self, rng: &mut Stream, body_weight_kg: f64, id: u64) -> Result<Protocol> {
        let mut disturbances = Vec::new();
        let mut calendar = Vec::new();
        let mut index = 0u32;
        for season in &self.seasons {
            let mut weeks: Vec<WeekType> = season
                .week_counts
                .iter()
                .flat_map(|(wt, n)| std::iter::repeat_n(*wt, *n as usize))
                .collect();
            weeks.shuffle(rng);
            for wt in weeks {
                let week = self.week(wt)?;
                let (events, days) = self.compose_week(
                    week,
                    season.name.class(),
                    rng,
                    body_weight_kg,
                    index as u64 * WEEK_S,
                )?;
                disturbances.extend(events);
                calendar.push(CalendarWeek {
                    index,
                    season: season.name,
                    week_type: wt,
                    days,
                });
                index += 1;
            }
        }
        Ok(Protocol {
            id,
            horizon_s: index as u64 * WEEK_S,
            disturbances,
            calendar,
        })
    }
}

fn active_next_to_late_night(days: &[DayType]) -> bool {
    days.windows(2).any(|w| {
        matches!(
            (w[0], w[1]),
            (DayType::Active, DayType::LateNight) | (DayType::LateNight, DayType::Active)
        )
    })
}

/// A year of the bundled protocol for a patient of `body_weight_kg`.
pub fn compose_year(seed: u64, body_weight_kg: f64) -> Protocol {
    ProtocolLibrary::default()
        .compose_year(&mut rng::seeded(seed), body_weight_kg, seed)
        .expect("bundled protocol library is complete")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnnouncementPolicy {
    /// Fraction of meals the controller is not told about.
    pub fraction_unannounced: f64,
    /// Fraction of meals announced with a wrong size.
    pub fraction_misannounced: f64,
    /// Range of the factor applied to misannounced sizes.
    pub misannouncement_factor: [f64; 2],
}

impl Default for AnnouncementPolicy {
    fn default() -> Self {
        AnnouncementPolicy {
            fraction_unannounced: 0.0,
            fraction_misannounced: 0.0,
            misannouncement_factor: [1.0, 1.0],
        }
    }
}

impl AnnouncementPolicy {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.misannouncement_factor;
        let frac_ok = |f: f64| (0.0..=1.0).contains(&f);
        if !frac_ok(self.fraction_unannounced)
            || !frac_ok(self.fraction_misannounced)
            || self.fraction_unannounced + self.fraction_misannounced > 1.0
            || !(lo >= 0.0 && hi >= lo && hi.is_finite())
        {
            return Err(Error::Config(format!("invalid announcement policy {self:?}")));
        }
        Ok(())
    }
}

/// Mark meals unannounced or misannounced. True CHO amounts are untouched.
pub fn apply_announcement_policy(
    mut protocol: Protocol,
    policy: &AnnouncementPolicy,
    rng: &mut Stream,
) -> Result<Protocol> {
    policy.validate()?;
    let [lo, hi] = policy.misannouncement_factor;
    for d in protocol
        .disturbances
        .iter_mut()
        .filter(|d| d.kind == DisturbanceKind::Meal)
    {
        let u: f64 = rng.random();
        if u < policy.fraction_unannounced {
            d.announced = false;
        } else if u < policy.fraction_unannounced + policy.fraction_misannounced {
            let factor = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            d.announced_magnitude = d.magnitude * factor;
        }
    }
    Ok(protocol)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    EmptyInterval { index: usize },
    NegativeMagnitude { index: usize },
    OutsideHorizon { index: usize },
    OutOfOrder { index: usize },
    Overlap { kind: DisturbanceKind, first: usize, second: usize },
}

/// All invariant violations of `p`, or `Ok` when there are none.
pub fn validate_protocol(p: &Protocol) -> std::result::Result<(), Vec<Violation>> {
    let mut out = Vec::new();
    for (i, d) in p.disturbances.iter().enumerate() {
        if d.start_s >= d.end_s {
            out.push(Violation::EmptyInterval { index: i });
        }
        if !(d.magnitude >= 0.0 && d.announced_magnitude >= 0.0) {
            out.push(Violation::NegativeMagnitude { index: i });
        }
        if d.end_s > p.horizon_s {
            out.push(Violation::OutsideHorizon { index: i });
        }
    }
    for (i, w) in p.disturbances.windows(2).enumerate() {
        if w[1].start_s < w[0].start_s {
            out.push(Violation::OutOfOrder { index: i + 1 });
        }
    }
    for kind in [DisturbanceKind::Meal, DisturbanceKind::Exercise] {
        let mut idx: Vec<usize> = (0..p.disturbances.len())
            .filter(|&i| p.disturbances[i].kind == kind)
            .collect();
        idx.sort_by_key(|&i| (p.disturbances[i].start_s, i));
        for w in idx.windows(2) {
            let (a, b) = (&p.disturbances[w[0]], &p.disturbances[w[1]]);
            if b.start_s < a.end_s {
                out.push(Violation::Overlap {
                    kind,
                    first: w[0],
                    second: w[1],
                });
            }
        }
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

/// Produces each patient's trial protocol: a window of the composed year,
/// with the announcement policy applied.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolGenerator {
    /// First protocol week of the trial window.
    pub start_week: u32,
    pub announcement: AnnouncementPolicy,
    /// Basis days, weeks and seasons; not serialized, the bundled library
    /// unless replaced.
    #[serde(skip)]
    pub library: ProtocolLibrary,
}

impl ProtocolGenerator {
    /// Fails with a horizon mismatch when the window runs past the year.
    pub fn check_horizon(&self, horizon_s: u64) -> Result<()> {
        let from = self.start_week as u64 * WEEK_S;
        let year = self.library.seasons.len() as u64 * WEEKS_PER_SEASON as u64 * WEEK_S;
        if from + horizon_s > year {
            return Err(Error::HorizonMismatch {
                protocol_s: year.saturating_sub(from),
                required_s: horizon_s,
            });
        }
        Ok(())
    }

    pub fn generate(
        &self,
        seed: u64,
        patient_id: u64,
        body_weight_kg: f64,
        horizon_s: u64,
    ) -> Result<Protocol> {
        let mut rng = rng::stream(seed, patient_id, StreamRole::Protocol);
        self.check_horizon(horizon_s)?;
        let year = self.library.compose_year(&mut rng, body_weight_kg, patient_id)?;
        let from = self.start_week as u64 * WEEK_S;
        let to = from + horizon_s;
        let disturbances = year
            .disturbances
            .into_iter()
            .filter(|d| d.start_s >= from && d.start_s < to)
            .map(|mut d| {
                d.start_s -= from;
                d.end_s = d.end_s.min(to) - from;
                d
            })
            .collect();
        let calendar = year
            .calendar
            .into_iter()
            .filter(|w| {
                let ws = w.index as u64 * WEEK_S;
                ws + WEEK_S > from && ws < to
            })
            .collect();
        let window = Protocol {
            id: patient_id,
            horizon_s,
            disturbances,
            calendar,
        };
        let mut rng = rng::stream(seed, patient_id, StreamRole::Announcement);
        apply_announcement_policy(window, &self.announcement, &mut rng)
    }
}

//! Consumption features from a four-week, half-hourly household power series.

use chrono::{Datelike, Duration, NaiveDateTime, Timelike, Weekday};

use crate::error::{Error, Result};

pub const READINGS_PER_DAY: usize = 48;
pub const DAYS: usize = 28;
pub const READINGS: usize = READINGS_PER_DAY * DAYS;

/// Half-hour average power in kW, starting at `start` (local time).
#[derive(Debug, Clone, PartialEq)]
pub struct PowerSeries {
    household_id: String,
    start: NaiveDateTime,
    readings: Vec<f64>,
}

impl PowerSeries {
    pub fn new(household_id: impl Into<String>, start: NaiveDateTime, readings: Vec<f64>) -> Result<Self> {
        if readings.len() != READINGS {
            return Err(Error::invalid(format!(
                "power series needs {READINGS} readings, got {}",
                readings.len()
            )));
        }
        if readings.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("power readings"));
        }
        if let Some((i, v)) = readings.iter().enumerate().find(|(_, v)| **v < 0.0) {
            return Err(Error::invalid(format!("negative reading {v} at index {i}")));
        }
        Ok(PowerSeries {
            household_id: household_id.into(),
            start,
            readings,
        })
    }

    /// Build from `(timestamp, kW)` rows; rows are sorted and must step by exactly 30 minutes.
    pub fn from_records(household_id: impl Into<String>, mut rows: Vec<(NaiveDateTime, f64)>) -> Result<Self> {
        let household_id = household_id.into();
        rows.sort_by_key(|r| r.0);
        let start = rows
            .first()
            .map(|r| r.0)
            .ok_or_else(|| Error::invalid(format!("household {household_id} has no readings")))?;
        for (i, w) in rows.windows(2).enumerate() {
            if w[1].0 - w[0].0 != Duration::minutes(30) {
                return Err(Error::invalid(format!(
                    "household {household_id}: readings {i} and {} are not 30 minutes apart",
                    i + 1
                )));
            }
        }
        Self::new(household_id, start, rows.into_iter().map(|r| r.1).collect())
    }

    pub fn household_id(&self) -> &str {
        &self.household_id
    }

    pub fn start(&self) -> NaiveDateTime {
        self.start
    }

    pub fn readings(&self) -> &[f64] {
        &self.readings
    }

    fn timestamp(&self, i: usize) -> NaiveDateTime {
        self.start + Duration::minutes(30 * i as i64)
    }
}

pub const FEATURE_NAMES: [&str; 23] = [
    "week_mean",
    "weekday_mean",
    "weekend_mean",
    "day_mean",
    "evening_mean",
    "morning_mean",
    "noon_mean",
    "night_mean",
    "week_max",
    "week_min",
    "mean_over_max",
    "min_over_mean",
    "morning_over_noon",
    "noon_over_day",
    "night_over_day",
    "weekday_over_weekend",
    "prop_above_0_5kw",
    "prop_above_1kw",
    "prop_above_2kw",
    "variance",
    "sum_abs_diff",
    "day_cross_correlation",
    "count_abs_diff_above_0_2kw",
];

/// The 23 features in table order, see [`FEATURE_NAMES`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureVector23(pub [f64; 23]);

impl FeatureVector23 {
    pub fn get(&self, name: &str) -> Option<f64> {
        FEATURE_NAMES.iter().position(|n| *n == name).map(|i| self.0[i])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Half-open `[start_hour, end_hour)` on the reading's start time.
fn in_window(t: NaiveDateTime, start_hour: u32, end_hour: u32) -> bool {
    (start_hour..end_hour).contains(&t.hour())
}

fn is_weekend(t: NaiveDateTime) -> bool {
    matches!(t.weekday(), Weekday::Sat | Weekday::Sun)
}

fn mean_where(s: &PowerSeries, pred: impl Fn(NaiveDateTime) -> bool) -> f64 {
    let (sum, count) = s
        .readings
        .iter()
        .enumerate()
        .filter(|(i, _)| pred(s.timestamp(*i)))
        .fold((0.0, 0usize), |(a, c), (_, v)| (a + v, c + 1));
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

fn proportion_above(x: &[f64], threshold: f64) -> f64 {
    x.iter().filter(|v| **v > threshold).count() as f64 / x.len() as f64
}

fn sample_variance(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

/// Pearson correlation, `None` when either side is constant.
fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        None
    } else {
        Some(sab / (saa * sbb).sqrt())
    }
}

fn day_cross_correlation(x: &[f64]) -> f64 {
    let days: Vec<&[f64]> = x.chunks(READINGS_PER_DAY).collect();
    let mut total = 0.0;
    for w in days.windows(2) {
        match pearson(w[0], w[1]) {
            Some(r) => total += r,
            None => return 0.0,
        }
    }
    total / (days.len() - 1) as f64
}

pub fn extract_power_features(s: &PowerSeries) -> FeatureVector23 {
    let x = &s.readings;
    let week = x.iter().sum::<f64>() / x.len() as f64;
    let weekday = mean_where(s, |t| !is_weekend(t));
    let weekend = mean_where(s, is_weekend);
    let day = mean_where(s, |t| in_window(t, 6, 22));
    let evening = mean_where(s, |t| in_window(t, 18, 22));
    let morning = mean_where(s, |t| in_window(t, 6, 10));
    let noon = mean_where(s, |t| in_window(t, 10, 14));
    let night = mean_where(s, |t| in_window(t, 1, 5));
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = x.iter().cloned().fold(f64::INFINITY, f64::min);
    let diffs: Vec<f64> = x.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
    FeatureVector23([
        week,
        weekday,
        weekend,
        day,
        evening,
        morning,
        noon,
        night,
        max,
        min,
        ratio(week, max),
        ratio(min, week),
        ratio(morning, noon),
        ratio(noon, day),
        ratio(night, day),
        ratio(weekday, weekend),
        proportion_above(x, 0.5),
        proportion_above(x, 1.0),
        proportion_above(x, 2.0),
        sample_variance(x),
        diffs.iter().sum(),
        day_cross_correlation(x),
        diffs.iter().filter(|d| **d > 0.2).count() as f64,
    ])
}

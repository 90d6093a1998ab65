//! Offline aggregation of per-tick simulation logs.
//!
//! Simulation runs emit one CSV row per agent per tick. This module reads
//! those logs back, groups them along occupation / age / wealth axes and
//! produces longitudinal series with smoothing windows suitable for
//! plotting.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{SimError, SimResult};

/// One agent-tick record as written by the simulator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogRow {
    pub env_id: u32,
    pub tick: u32,
    pub agent_id: u32,
    pub occupation: u16,
    pub age_months: u32,
    pub employed: bool,
    pub retired: bool,
    pub income: f64,
    pub consumption: f64,
    pub liquid: f64,
    pub non_liquid: f64,
    pub consumption_bin: u8,
    pub liquidity_bin: u8,
    pub reward: f64,
    pub crisis: bool,
    pub invalid: bool,
}

impl LogRow {
    /// Consumption as a fraction of income; `None` for zero-income ticks,
    /// which are excluded from rate aggregates and counted separately.
    pub fn consumption_rate(&self) -> Option<f64> {
        if self.income > 0.0 {
            Some(self.consumption / self.income)
        } else {
            None
        }
    }

    /// Fraction of post-consumption savings directed to the liquid pot.
    pub fn liquidity_fraction(&self) -> f64 {
        f64::from(self.liquidity_bin) * 0.25
    }

    pub fn age_decade(&self) -> u32 {
        self.age_months / 12 / 10
    }
}

/// Mean / count accumulator.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct RateCell {
    pub count: u64,
    pub mean_consumption_rate: f64,
    pub mean_liquidity_fraction: f64,
    pub crisis_rate: f64,
}

#[derive(Debug, Default)]
struct CellAcc {
    count: u64,
    consumption_rate_sum: f64,
    liquidity_sum: f64,
    crisis: u64,
}

impl CellAcc {
    fn push(&mut self, rate: f64, liquidity: f64, crisis: bool) {
        self.count += 1;
        self.consumption_rate_sum += rate;
        self.liquidity_sum += liquidity;
        self.crisis += u64::from(crisis);
    }

    fn finish(&self) -> RateCell {
        let n = self.count.max(1) as f64;
        RateCell {
            count: self.count,
            mean_consumption_rate: self.consumption_rate_sum / n,
            mean_liquidity_fraction: self.liquidity_sum / n,
            crisis_rate: self.crisis as f64 / n,
        }
    }
}

/// Aggregated view over one or more log files.
#[derive(Debug, Serialize)]
pub struct Aggregates {
    pub rows_total: u64,
    /// Ticks skipped from rate aggregates because income was zero.
    pub zero_income_ticks: u64,
    pub by_occupation: BTreeMap<u16, RateCell>,
    pub by_age_decade: BTreeMap<u32, RateCell>,
    /// Per (occupation, age decade, wealth quartile) rates, sorted by that
    /// key. Cells with fewer than [`MIN_CELL_COUNT`] observations are
    /// dropped.
    pub by_occupation_age_wealth: Vec<WealthCell>,
    /// Per-tick population means: (tick, mean consumption rate, mean
    /// liquidity fraction, crisis rate).
    pub longitudinal: Vec<(u32, f64, f64, f64)>,
}

/// Minimum observations before a three-way cell is reported.
pub const MIN_CELL_COUNT: u64 = 30;

/// One (occupation, age decade, wealth quartile) breakdown cell.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct WealthCell {
    pub occupation: u16,
    pub age_decade: u32,
    pub wealth_quartile: u8,
    pub rates: RateCell,
}

/// Wealth quartile thresholds computed over total assets of all
/// non-zero-income rows.
fn wealth_quartile(total: f64, thresholds: &[f64; 3]) -> u8 {
    if total < thresholds[0] {
        0
    } else if total < thresholds[1] {
        1
    } else if total < thresholds[2] {
        2
    } else {
        3
    }
}

pub fn aggregate(rows: &[LogRow]) -> Aggregates {
    let mut wealth: Vec<f64> = rows
        .iter()
        .filter(|r| r.income > 0.0)
        .map(|r| r.liquid + r.non_liquid)
        .collect();
    wealth.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = |p: f64| -> f64 {
        if wealth.is_empty() {
            0.0
        } else {
            wealth[((wealth.len() - 1) as f64 * p).round() as usize]
        }
    };
    let thresholds = [q(0.25), q(0.5), q(0.75)];

    let mut by_occ: BTreeMap<u16, CellAcc> = BTreeMap::new();
    let mut by_age: BTreeMap<u32, CellAcc> = BTreeMap::new();
    let mut by_oaw: BTreeMap<(u16, u32, u8), CellAcc> = BTreeMap::new();
    let mut by_tick: BTreeMap<u32, CellAcc> = BTreeMap::new();
    let mut zero_income = 0u64;

    for row in rows {
        let Some(rate) = row.consumption_rate() else {
            zero_income += 1;
            continue;
        };
        let liq = row.liquidity_fraction();
        by_occ.entry(row.occupation).or_default().push(rate, liq, row.crisis);
        by_age.entry(row.age_decade()).or_default().push(rate, liq, row.crisis);
        let quartile = wealth_quartile(row.liquid + row.non_liquid, &thresholds);
        by_oaw
            .entry((row.occupation, row.age_decade(), quartile))
            .or_default()
            .push(rate, liq, row.crisis);
        by_tick.entry(row.tick).or_default().push(rate, liq, row.crisis);
    }

    Aggregates {
        rows_total: rows.len() as u64,
        zero_income_ticks: zero_income,
        by_occupation: by_occ.iter().map(|(k, v)| (*k, v.finish())).collect(),
        by_age_decade: by_age.iter().map(|(k, v)| (*k, v.finish())).collect(),
        by_occupation_age_wealth: by_oaw
            .iter()
            .filter(|(_, v)| v.count >= MIN_CELL_COUNT)
            .map(|(&(occupation, age_decade, wealth_quartile), v)| WealthCell {
                occupation,
                age_decade,
                wealth_quartile,
                rates: v.finish(),
            })
            .collect(),
        longitudinal: by_tick
            .iter()
            .map(|(t, v)| {
                let c = v.finish();
                (*t, c.mean_consumption_rate, c.mean_liquidity_fraction, c.crisis_rate)
            })
            .collect(),
    }
}

/// Centred-start moving average: output[t] averages the last `window`
/// values up to and including t (shorter prefix at the start).
pub fn moving_average(series: &[f64], window: usize) -> Vec<f64> {
    assert!(window > 0, "window must be positive");
    let mut out = Vec::with_capacity(series.len());
    let mut sum = 0.0;
    for (i, v) in series.iter().enumerate() {
        sum += v;
        if i >= window {
            sum -= series[i - window];
        }
        out.push(sum / window.min(i + 1) as f64);
    }
    out
}

// --- CSV I/O -------------------------------------------------------------

pub fn write_log<P: AsRef<Path>>(path: P, rows: &[LogRow]) -> SimResult<()> {
    let path = path.as_ref();
    let file = File::create(path)
        .map_err(|e| SimError::Io { path: path.display().to_string(), source: e })?;
    let mut writer = csv::Writer::from_writer(file);
    for row in rows {
        writer
            .serialize(row)
            .map_err(|e| SimError::Csv { path: path.display().to_string(), message: e.to_string() })?;
    }
    writer
        .flush()
        .map_err(|e| SimError::Io { path: path.display().to_string(), source: e })?;
    Ok(())
}

pub fn read_log<P: AsRef<Path>>(path: P) -> SimResult<Vec<LogRow>> {
    let path = path.as_ref();
    let file = File::open(path)
        .map_err(|e| SimError::Io { path: path.display().to_string(), source: e })?;
    let mut reader = csv::Reader::from_reader(file);
    let mut rows = Vec::new();
    for record in reader.deserialize() {
        let row: LogRow = record
            .map_err(|e| SimError::Csv { path: path.display().to_string(), message: e.to_string() })?;
        rows.push(row);
    }
    Ok(rows)
}

/// Read every `*.csv` log under a directory, sorted by file name for
/// reproducible ordering.
pub fn read_log_dir<P: AsRef<Path>>(dir: P) -> SimResult<Vec<LogRow>> {
    let dir = dir.as_ref();
    let all: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| SimError::Io { path: dir.display().to_string(), source: e })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|x| x == "csv").unwrap_or(false))
        .collect();
    // simulation output directories also hold metrics.csv etc.; prefer the
    // cohort logs when present
    let cohorts: Vec<_> = all
        .iter()
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.starts_with("cohort"))
                .unwrap_or(false)
        })
        .cloned()
        .collect();
    let mut paths = if cohorts.is_empty() { all } else { cohorts };
    paths.sort();
    let mut rows = Vec::new();
    for p in paths {
        rows.extend(read_log(&p)?);
    }
    Ok(rows)
}

/// Serialize aggregates (including smoothed longitudinal series) to JSON.
pub fn write_report<P: AsRef<Path>>(path: P, agg: &Aggregates) -> SimResult<()> {
    let path = path.as_ref();
    let consumption: Vec<f64> = agg.longitudinal.iter().map(|x| x.1).collect();
    let crisis: Vec<f64> = agg.longitudinal.iter().map(|x| x.3).collect();
    let report = serde_json::json!({
        "aggregates": agg,
        "smoothed": {
            "consumption_rate_ma30": moving_average(&consumption, 30),
            "consumption_rate_ma9": moving_average(&consumption, 9),
            "crisis_rate_ma30": moving_average(&crisis, 30),
            "crisis_rate_ma9": moving_average(&crisis, 9),
        },
    });
    let file = File::create(path)
        .map_err(|e| SimError::Io { path: path.display().to_string(), source: e })?;
    serde_json::to_writer_pretty(file, &report)
        .map_err(|e| SimError::Csv { path: path.display().to_string(), message: e.to_string() })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn row(tick: u32, occ: u16, age_years: u32, income: f64, consumption: f64, wealth: f64) -> LogRow {
        LogRow {
            env_id: 0,
            tick,
            agent_id: 1,
            occupation: occ,
            age_months: age_years * 12,
            employed: income > 0.0,
            retired: false,
            income,
            consumption,
            liquid: wealth / 2.0,
            non_liquid: wealth / 2.0,
            consumption_bin: 2,
            liquidity_bin: 2,
            reward: 0.0,
            crisis: false,
            invalid: false,
        }
    }

    #[test]
    fn constant_stream_has_exact_rates() {
        // half consumed, liquidity split 50/50, no crises
        let rows: Vec<LogRow> = (0..100).map(|t| row(t, 3, 40, 2000.0, 1000.0, 500.0)).collect();
        let agg = aggregate(&rows);
        let cell = agg.by_occupation[&3];
        assert_eq!(cell.count, 100);
        assert_relative_eq!(cell.mean_consumption_rate, 0.5);
        assert_relative_eq!(cell.mean_liquidity_fraction, 0.5);
        assert_relative_eq!(cell.crisis_rate, 0.0);
        assert_eq!(agg.zero_income_ticks, 0);
        // whole-income consumer
        let rows: Vec<LogRow> = (0..40).map(|t| row(t, 1, 30, 1500.0, 1500.0, 10.0)).collect();
        let agg = aggregate(&rows);
        assert_relative_eq!(agg.by_occupation[&1].mean_consumption_rate, 1.0);
    }

    #[test]
    fn zero_income_ticks_are_counted_and_excluded() {
        let mut rows: Vec<LogRow> = (0..10).map(|t| row(t, 0, 35, 1000.0, 250.0, 0.0)).collect();
        rows.push(row(10, 0, 35, 0.0, 0.0, 0.0));
        rows.push(row(11, 0, 35, 0.0, 0.0, 0.0));
        let agg = aggregate(&rows);
        assert_eq!(agg.zero_income_ticks, 2);
        assert_eq!(agg.by_occupation[&0].count, 10);
        assert_relative_eq!(agg.by_occupation[&0].mean_consumption_rate, 0.25);
    }

    #[test]
    fn group_by_matches_brute_force_oracle() {
        // deterministic synthetic mix across 3 occupations and 2 age decades
        let mut rows = Vec::new();
        for i in 0u32..600 {
            let occ = (i % 3) as u16;
            let age = if i % 2 == 0 { 30 } else { 45 };
            let income = 1000.0 + f64::from(i % 7) * 100.0;
            let consumption = income * (0.2 + f64::from(i % 5) * 0.1);
            rows.push(row(i, occ, age, income, consumption, f64::from(i)));
        }
        let agg = aggregate(&rows);
        for occ in 0u16..3 {
            let selected: Vec<&LogRow> = rows.iter().filter(|r| r.occupation == occ).collect();
            let expected: f64 = selected.iter().map(|r| r.consumption / r.income).sum::<f64>()
                / selected.len() as f64;
            assert_relative_eq!(agg.by_occupation[&occ].mean_consumption_rate, expected, epsilon = 1e-12);
            assert_eq!(agg.by_occupation[&occ].count as usize, selected.len());
        }
        for decade in [3u32, 4] {
            let selected: Vec<&LogRow> = rows.iter().filter(|r| r.age_decade() == decade).collect();
            let expected: f64 = selected.iter().map(|r| r.consumption / r.income).sum::<f64>()
                / selected.len() as f64;
            assert_relative_eq!(agg.by_age_decade[&decade].mean_consumption_rate, expected, epsilon = 1e-12);
        }
        // three-way cells respect the minimum count
        for cell in &agg.by_occupation_age_wealth {
            assert!(cell.rates.count >= MIN_CELL_COUNT);
        }
    }

    #[test]
    fn small_cells_are_suppressed() {
        let rows: Vec<LogRow> = (0..10).map(|t| row(t, 9, 52, 1000.0, 500.0, 100.0)).collect();
        let agg = aggregate(&rows);
        assert!(agg.by_occupation_age_wealth.is_empty());
        assert!(agg.by_occupation.contains_key(&9));
    }

    #[test]
    fn moving_average_of_constant_is_constant() {
        let series = vec![2.5; 50];
        for window in [1, 9, 30] {
            let ma = moving_average(&series, window);
            assert!(ma.iter().all(|&v| (v - 2.5).abs() < 1e-12));
        }
    }

    #[test]
    fn moving_average_hand_example() {
        let ma = moving_average(&[1.0, 2.0, 3.0, 4.0], 2);
        assert_eq!(ma, vec![1.0, 1.5, 2.5, 3.5]);
    }

    #[test]
    fn log_round_trips_through_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        let rows: Vec<LogRow> = (0..5).map(|t| row(t, 2, 33, 1200.0, 300.0, 50.0)).collect();
        write_log(&path, &rows).unwrap();
        let back = read_log(&path).unwrap();
        assert_eq!(back.len(), 5);
        assert_relative_eq!(back[3].income, 1200.0);
        let all = read_log_dir(dir.path()).unwrap();
        assert_eq!(all.len(), 5);
    }
}

//! Calibration tables and synthetic population bootstrap.
//!
//! The simulator is calibrated with summary tables: quantiled monthly income
//! by occupation and age band, layoff probability and unemployment duration
//! by occupation and age band, and an actuarial mortality table. This module
//! ingests those tables from CSV, validates them, and bootstraps the agent
//! population (occupation, age, income, employment, behavioural parameters).

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{SimError, SimResult};

/// Dense occupation index plus its display title.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OccupationCode {
    pub id: u16,
    pub title: String,
}

/// Decade age bands covering working ages 16..=65.
pub const AGE_BANDS: [(u32, u32); 5] = [(16, 25), (26, 35), (36, 45), (46, 55), (56, 65)];

/// Index of the decade band covering `age_months`, or None outside 16..=65 years.
pub fn age_band_index(age_months: u32) -> Option<usize> {
    let years = age_months / 12;
    AGE_BANDS.iter().position(|&(lo, hi)| years >= lo && years <= hi)
}

/// Ordered (cumulative-quantile, value) pairs; quantile bounds strictly
/// increasing and ending at 1.0.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuantileRow {
    pub quantiles: Vec<(f64, f64)>,
}

impl QuantileRow {
    fn validate(&self, table: &str, key: &str) -> SimResult<()> {
        if self.quantiles.is_empty() {
            return Err(SimError::Validation {
                table: table.to_string(),
                message: format!("empty quantile list for {key}"),
            });
        }
        let mut prev = 0.0;
        for &(q, v) in &self.quantiles {
            if q <= prev || q > 1.0 {
                return Err(SimError::Validation {
                    table: table.to_string(),
                    message: format!("non-monotone quantile {q} after {prev} for {key}"),
                });
            }
            if v < 0.0 {
                return Err(SimError::Validation {
                    table: table.to_string(),
                    message: format!("negative value {v} for {key}"),
                });
            }
            prev = q;
        }
        let last = self.quantiles.last().unwrap().0;
        if (last - 1.0).abs() > 1e-9 {
            return Err(SimError::Validation {
                table: table.to_string(),
                message: format!("quantiles for {key} end at {last}, expected 1.0"),
            });
        }
        Ok(())
    }

    /// Sample a value with probability proportional to the quantile widths.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.gen();
        for &(q, v) in &self.quantiles {
            if u <= q {
                return v;
            }
        }
        self.quantiles.last().unwrap().1
    }
}

/// Quantiled monthly income by (occupation, age-band).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IncomeQuantileTable {
    entries: BTreeMap<(u16, usize), QuantileRow>,
}

/// Monthly layoff probability and quantiled unemployment duration per
/// (occupation, age-band).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UnemploymentTable {
    layoff_prob: BTreeMap<(u16, usize), f64>,
    duration: BTreeMap<(u16, usize), QuantileRow>,
}

/// Annual death probability per integer age; certain death at the final age.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MortalityTable {
    annual: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationTables {
    pub occupations: Vec<OccupationCode>,
    pub income: IncomeQuantileTable,
    pub unemployment: UnemploymentTable,
    pub mortality: MortalityTable,
}

impl CalibrationTables {
    /// Flat synthetic calibration: every (occupation, band) gets the same
    /// single-quantile income, layoff probability, and unemployment duration,
    /// and mortality is `annual_mortality` at every age except the terminal
    /// one. Handy for controlled experiments and degenerate environments.
    pub fn synthetic_flat(
        occupation_count: u16,
        monthly_income: f64,
        layoff_prob: f64,
        duration_months: f64,
        annual_mortality: f64,
    ) -> Self {
        let occupations = (0..occupation_count)
            .map(|id| OccupationCode { id, title: format!("Occupation {id}") })
            .collect();
        let mut income = BTreeMap::new();
        let mut layoff = BTreeMap::new();
        let mut duration = BTreeMap::new();
        for occ in 0..occupation_count {
            for band in 0..AGE_BANDS.len() {
                income.insert((occ, band), QuantileRow { quantiles: vec![(1.0, monthly_income)] });
                layoff.insert((occ, band), layoff_prob);
                duration.insert((occ, band), QuantileRow { quantiles: vec![(1.0, duration_months)] });
            }
        }
        let mut annual = vec![annual_mortality; 120];
        annual[119] = 1.0;
        CalibrationTables {
            occupations,
            income: IncomeQuantileTable { entries: income },
            unemployment: UnemploymentTable { layoff_prob: layoff, duration },
            mortality: MortalityTable { annual },
        }
    }
}

impl IncomeQuantileTable {
    /// Programmatic construction, e.g. for synthetic calibrations.
    pub fn from_entries(entries: BTreeMap<(u16, usize), QuantileRow>) -> Self {
        IncomeQuantileTable { entries }
    }

    pub fn row(&self, occ: u16, age_months: u32) -> SimResult<&QuantileRow> {
        let band = age_band_index(age_months).ok_or(SimError::AgeOutOfRange { age_months })?;
        self.entries.get(&(occ, band)).ok_or_else(|| SimError::Schema {
            table: "income".to_string(),
            message: format!("missing (occ {occ}, band {band})"),
        })
    }
}

impl UnemploymentTable {
    pub fn from_parts(
        layoff_prob: BTreeMap<(u16, usize), f64>,
        duration: BTreeMap<(u16, usize), QuantileRow>,
    ) -> Self {
        UnemploymentTable { layoff_prob, duration }
    }

    pub fn layoff_prob(&self, occ: u16, age_months: u32) -> SimResult<f64> {
        let band = age_band_index(age_months).ok_or(SimError::AgeOutOfRange { age_months })?;
        self.layoff_prob.get(&(occ, band)).copied().ok_or_else(|| SimError::Schema {
            table: "unemployment".to_string(),
            message: format!("missing (occ {occ}, band {band})"),
        })
    }

    pub fn sample_duration<R: Rng + ?Sized>(
        &self,
        occ: u16,
        age_months: u32,
        rng: &mut R,
    ) -> SimResult<u32> {
        let band = age_band_index(age_months).ok_or(SimError::AgeOutOfRange { age_months })?;
        let row = self.duration.get(&(occ, band)).ok_or_else(|| SimError::Schema {
            table: "unemployment".to_string(),
            message: format!("missing (occ {occ}, band {band})"),
        })?;
        Ok(row.sample(rng).round() as u32)
    }
}

impl MortalityTable {
    /// Annual probabilities indexed by age; the last entry should be 1.
    pub fn from_annual(annual: Vec<f64>) -> Self {
        MortalityTable { annual }
    }

    pub fn max_age(&self) -> u32 {
        self.annual.len() as u32 - 1
    }

    /// Annual death probability; ages beyond the table count as certain death.
    pub fn annual_prob(&self, age_years: u32) -> f64 {
        self.annual
            .get(age_years as usize)
            .copied()
            .unwrap_or(1.0)
    }

    /// Monthly death probability via 1-(1-p_annual)^(1/12).
    pub fn monthly_prob(&self, age_months: u32) -> f64 {
        let p = self.annual_prob(age_months / 12);
        1.0 - (1.0 - p).powf(1.0 / 12.0)
    }
}

/// One Bernoulli death draw at monthly resolution.
pub fn sample_death<R: Rng + ?Sized>(table: &MortalityTable, age_months: u32, rng: &mut R) -> bool {
    rng.gen::<f64>() < table.monthly_prob(age_months)
}

/// Behavioural parameterisation of one agent: consumption utility factor q,
/// shock sensitivity kappa, and individuality in [0,1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BehaviouralTriple {
    pub consumption_utility_factor: f64,
    pub shock_sensitivity_factor: f64,
    pub individuality_factor: f64,
}

impl BehaviouralTriple {
    pub fn validate(&self) -> SimResult<()> {
        if self.consumption_utility_factor <= 0.0 {
            return Err(SimError::Config(format!(
                "consumption utility factor must be > 0, got {}",
                self.consumption_utility_factor
            )));
        }
        if !(0.0..=1.0).contains(&self.individuality_factor) {
            return Err(SimError::Config(format!(
                "individuality factor must be in [0,1], got {}",
                self.individuality_factor
            )));
        }
        Ok(())
    }
}

/// Full per-agent state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentState {
    pub id: u32,
    pub occupation: u16,
    pub age_months: u32,
    pub employed: bool,
    pub remaining_unemployment: u32,
    pub monthly_income: f64,
    pub liquid_asset: f64,
    pub non_liquid_asset: f64,
    pub retired: bool,
    pub alive: bool,
    pub last_salary: f64,
    pub behaviour: BehaviouralTriple,
    pub accumulated_consumption: f64,
    pub accumulated_penalty: f64,
}

impl AgentState {
    pub fn total_assets(&self) -> f64 {
        self.liquid_asset + self.non_liquid_asset
    }

    pub fn check_invariants(&self, retirement_age_months: u32) -> SimResult<()> {
        if self.liquid_asset < 0.0 || self.non_liquid_asset < 0.0 {
            return Err(SimError::Numeric(format!(
                "agent {} has negative assets",
                self.id
            )));
        }
        if self.retired && self.age_months < retirement_age_months {
            return Err(SimError::Numeric(format!(
                "agent {} retired before retirement age",
                self.id
            )));
        }
        if self.employed && !self.retired && self.monthly_income <= 0.0 {
            return Err(SimError::Numeric(format!(
                "agent {} employed with non-positive income",
                self.id
            )));
        }
        self.behaviour.validate()
    }
}

/// Truncated normal distribution parameters for one behavioural factor.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TruncatedNormalSpec {
    pub mean: f64,
    pub sd: f64,
    pub lo: f64,
    pub hi: f64,
}

impl TruncatedNormalSpec {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> SimResult<f64> {
        if self.lo > self.hi {
            return Err(SimError::Config(format!(
                "truncation bounds inverted: [{}, {}]",
                self.lo, self.hi
            )));
        }
        if (self.hi - self.lo).abs() < 1e-12 {
            return Ok(self.lo);
        }
        if self.sd <= 0.0 {
            return Ok(self.mean.clamp(self.lo, self.hi));
        }
        let normal = Normal::new(self.mean, self.sd)
            .map_err(|e| SimError::Config(format!("bad normal parameters: {e}")))?;
        // rejection sampling with a clamp fallback for far-off bounds
        for _ in 0..256 {
            let v = normal.sample(rng);
            if v >= self.lo && v <= self.hi {
                return Ok(v);
            }
        }
        Ok(normal.sample(rng).clamp(self.lo, self.hi))
    }
}

/// Everything needed to bootstrap a cohort.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PopulationSpec {
    pub count: u32,
    /// Initial age range in years, inclusive.
    pub age_lo_years: u32,
    pub age_hi_years: u32,
    /// Per-occupation sampling weights; uniform when empty.
    #[serde(default)]
    pub occupation_weights: Vec<f64>,
    pub consumption_utility: TruncatedNormalSpec,
    pub shock_sensitivity: TruncatedNormalSpec,
    pub individuality: TruncatedNormalSpec,
    /// Probability an agent starts employed.
    pub initial_employment_rate: f64,
    #[serde(default)]
    pub initial_liquid_asset: f64,
    #[serde(default)]
    pub initial_non_liquid_asset: f64,
}

impl Default for PopulationSpec {
    fn default() -> Self {
        PopulationSpec {
            count: 1000,
            age_lo_years: 16,
            age_hi_years: 64,
            occupation_weights: Vec::new(),
            consumption_utility: TruncatedNormalSpec { mean: 1.0, sd: 0.2, lo: 0.5, hi: 1.5 },
            shock_sensitivity: TruncatedNormalSpec { mean: 0.0, sd: 0.4, lo: -1.0, hi: 1.0 },
            individuality: TruncatedNormalSpec { mean: 0.5, sd: 0.2, lo: 0.0, hi: 1.0 },
            initial_employment_rate: 0.95,
            initial_liquid_asset: 0.0,
            initial_non_liquid_asset: 0.0,
        }
    }
}

impl PopulationSpec {
    pub fn validate(&self, occupation_count: usize) -> SimResult<()> {
        if self.count == 0 {
            return Err(SimError::Config("population count must be >= 1".into()));
        }
        if self.age_lo_years > self.age_hi_years {
            return Err(SimError::Config("age range inverted".into()));
        }
        if self.consumption_utility.lo <= 0.0 {
            return Err(SimError::Config(
                "consumption utility truncation must exclude q <= 0".into(),
            ));
        }
        if self.individuality.lo < 0.0 || self.individuality.hi > 1.0 {
            return Err(SimError::Config(
                "individuality truncation must stay within [0,1]".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.initial_employment_rate) {
            return Err(SimError::Config("initial employment rate must be in [0,1]".into()));
        }
        if !self.occupation_weights.is_empty() {
            if self.occupation_weights.len() != occupation_count {
                return Err(SimError::Config(format!(
                    "occupation weights length {} != occupation count {}",
                    self.occupation_weights.len(),
                    occupation_count
                )));
            }
            if self.occupation_weights.iter().any(|&w| w < 0.0)
                || self.occupation_weights.iter().sum::<f64>() <= 0.0
            {
                return Err(SimError::Config("occupation weights must be non-negative with positive sum".into()));
            }
        }
        Ok(())
    }
}

/// Income draw for (occupation, age) per the quantiled table.
pub fn sample_income<R: Rng + ?Sized>(
    tables: &CalibrationTables,
    occ: u16,
    age_months: u32,
    rng: &mut R,
) -> SimResult<f64> {
    Ok(tables.income.row(occ, age_months)?.sample(rng))
}

fn sample_weighted<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        u -= w;
        if u <= 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

/// Bootstrap the synthetic cohort from the calibration tables.
pub fn bootstrap_population<R: Rng + ?Sized>(
    tables: &CalibrationTables,
    spec: &PopulationSpec,
    rng: &mut R,
) -> SimResult<Vec<AgentState>> {
    spec.validate(tables.occupations.len())?;
    let uniform_weights = vec![1.0; tables.occupations.len()];
    let weights: &[f64] = if spec.occupation_weights.is_empty() {
        &uniform_weights
    } else {
        &spec.occupation_weights
    };

    let mut agents = Vec::with_capacity(spec.count as usize);
    for id in 0..spec.count {
        let occ = sample_weighted(weights, rng) as u16;
        let age_years = rng.gen_range(spec.age_lo_years..=spec.age_hi_years);
        let age_months = age_years * 12 + rng.gen_range(0..12);
        let behaviour = BehaviouralTriple {
            consumption_utility_factor: spec.consumption_utility.sample(rng)?,
            shock_sensitivity_factor: spec.shock_sensitivity.sample(rng)?,
            individuality_factor: spec.individuality.sample(rng)?,
        };
        behaviour.validate()?;

        let employed = rng.gen::<f64>() < spec.initial_employment_rate;
        let income = sample_income(tables, occ, age_months, rng)?;
        let remaining = if employed {
            0
        } else {
            tables.unemployment.sample_duration(occ, age_months, rng)?
        };
        agents.push(AgentState {
            id,
            occupation: occ,
            age_months,
            employed,
            remaining_unemployment: remaining,
            monthly_income: if employed { income } else { 0.0 },
            liquid_asset: spec.initial_liquid_asset,
            non_liquid_asset: spec.initial_non_liquid_asset,
            retired: false,
            alive: true,
            last_salary: income,
            behaviour,
            accumulated_consumption: 0.0,
            accumulated_penalty: 0.0,
        });
    }
    Ok(agents)
}

// --- CSV ingestion ------------------------------------------------------

fn open_reader(path: &Path) -> SimResult<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| SimError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(file))
}

fn parse_field<T: std::str::FromStr>(
    record: &csv::StringRecord,
    idx: usize,
    table: &str,
    line: usize,
) -> SimResult<T> {
    record
        .get(idx)
        .and_then(|s| s.trim().parse::<T>().ok())
        .ok_or_else(|| SimError::Csv {
            path: table.to_string(),
            message: format!("bad field {idx} on line {line}"),
        })
}

fn band_index_for(lo: u32, hi: u32, table: &str) -> SimResult<usize> {
    AGE_BANDS
        .iter()
        .position(|&b| b == (lo, hi))
        .ok_or_else(|| SimError::Schema {
            table: table.to_string(),
            message: format!("unknown age band {lo}-{hi}"),
        })
}

/// Load and validate all four calibration CSVs from a directory.
///
/// Expected files: `occupations.csv`, `income.csv`, `unemployment.csv`,
/// `mortality.csv` (schemas documented in the README).
pub fn load_tables(dir: &Path) -> SimResult<CalibrationTables> {
    // occupations.csv: occ_id,occ_title
    let mut occupations: Vec<OccupationCode> = Vec::new();
    {
        let mut rdr = open_reader(&dir.join("occupations.csv"))?;
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| SimError::Csv {
                path: "occupations.csv".into(),
                message: e.to_string(),
            })?;
            let id: u16 = parse_field(&rec, 0, "occupations.csv", line + 2)?;
            let title = rec.get(1).unwrap_or("").trim().to_string();
            occupations.push(OccupationCode { id, title });
        }
    }
    if occupations.is_empty() {
        return Err(SimError::Schema {
            table: "occupations.csv".into(),
            message: "zero rows".into(),
        });
    }
    occupations.sort_by_key(|o| o.id);
    for (i, occ) in occupations.iter().enumerate() {
        if occ.id as usize != i {
            return Err(SimError::Schema {
                table: "occupations.csv".into(),
                message: format!("occupation ids not dense at {}", occ.id),
            });
        }
    }
    {
        let mut titles: Vec<&str> = occupations.iter().map(|o| o.title.as_str()).collect();
        titles.sort_unstable();
        titles.dedup();
        if titles.len() != occupations.len() {
            return Err(SimError::Schema {
                table: "occupations.csv".into(),
                message: "duplicate occupation titles".into(),
            });
        }
    }

    // income.csv: occ_id,occ_title,age_lo,age_hi,quantile,monthly_income
    let mut income_rows: BTreeMap<(u16, usize), Vec<(f64, f64)>> = BTreeMap::new();
    {
        let mut rdr = open_reader(&dir.join("income.csv"))?;
        let mut any = false;
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| SimError::Csv {
                path: "income.csv".into(),
                message: e.to_string(),
            })?;
            any = true;
            let occ: u16 = parse_field(&rec, 0, "income.csv", line + 2)?;
            let lo: u32 = parse_field(&rec, 2, "income.csv", line + 2)?;
            let hi: u32 = parse_field(&rec, 3, "income.csv", line + 2)?;
            let q: f64 = parse_field(&rec, 4, "income.csv", line + 2)?;
            let v: f64 = parse_field(&rec, 5, "income.csv", line + 2)?;
            let band = band_index_for(lo, hi, "income.csv")?;
            income_rows.entry((occ, band)).or_default().push((q, v));
        }
        if !any {
            return Err(SimError::Schema {
                table: "income.csv".into(),
                message: "zero rows".into(),
            });
        }
    }
    let mut income_entries = BTreeMap::new();
    for (key, quantiles) in income_rows {
        let row = QuantileRow { quantiles };
        row.validate("income.csv", &format!("(occ {}, band {})", key.0, key.1))?;
        let mut prev = f64::NEG_INFINITY;
        for &(_, v) in &row.quantiles {
            if v < prev {
                return Err(SimError::Validation {
                    table: "income.csv".into(),
                    message: format!("decreasing income across quantiles for (occ {}, band {})", key.0, key.1),
                });
            }
            prev = v;
        }
        income_entries.insert(key, row);
    }
    for occ in 0..occupations.len() as u16 {
        for band in 0..AGE_BANDS.len() {
            if !income_entries.contains_key(&(occ, band)) {
                return Err(SimError::Schema {
                    table: "income.csv".into(),
                    message: format!("missing (occ {occ}, band {band})"),
                });
            }
        }
    }

    // unemployment.csv: occ_id,age_lo,age_hi,monthly_layoff_prob,duration_quantile,duration_months
    let mut layoff: BTreeMap<(u16, usize), f64> = BTreeMap::new();
    let mut dur_rows: BTreeMap<(u16, usize), Vec<(f64, f64)>> = BTreeMap::new();
    {
        let mut rdr = open_reader(&dir.join("unemployment.csv"))?;
        let mut any = false;
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| SimError::Csv {
                path: "unemployment.csv".into(),
                message: e.to_string(),
            })?;
            any = true;
            let occ: u16 = parse_field(&rec, 0, "unemployment.csv", line + 2)?;
            let lo: u32 = parse_field(&rec, 1, "unemployment.csv", line + 2)?;
            let hi: u32 = parse_field(&rec, 2, "unemployment.csv", line + 2)?;
            let p: f64 = parse_field(&rec, 3, "unemployment.csv", line + 2)?;
            let q: f64 = parse_field(&rec, 4, "unemployment.csv", line + 2)?;
            let d: f64 = parse_field(&rec, 5, "unemployment.csv", line + 2)?;
            if !(0.0..=1.0).contains(&p) {
                return Err(SimError::Validation {
                    table: "unemployment.csv".into(),
                    message: format!("layoff probability {p} out of [0,1] on line {}", line + 2),
                });
            }
            if d < 1.0 {
                return Err(SimError::Validation {
                    table: "unemployment.csv".into(),
                    message: format!("duration {d} below 1 month on line {}", line + 2),
                });
            }
            let band = band_index_for(lo, hi, "unemployment.csv")?;
            layoff.insert((occ, band), p);
            dur_rows.entry((occ, band)).or_default().push((q, d));
        }
        if !any {
            return Err(SimError::Schema {
                table: "unemployment.csv".into(),
                message: "zero rows".into(),
            });
        }
    }
    let mut duration = BTreeMap::new();
    for (key, quantiles) in dur_rows {
        let row = QuantileRow { quantiles };
        row.validate("unemployment.csv", &format!("(occ {}, band {})", key.0, key.1))?;
        duration.insert(key, row);
    }
    for occ in 0..occupations.len() as u16 {
        for band in 0..AGE_BANDS.len() {
            if !layoff.contains_key(&(occ, band)) || !duration.contains_key(&(occ, band)) {
                return Err(SimError::Schema {
                    table: "unemployment.csv".into(),
                    message: format!("missing (occ {occ}, band {band})"),
                });
            }
        }
    }

    // mortality.csv: age,annual_death_prob
    let mut by_age: BTreeMap<u32, f64> = BTreeMap::new();
    {
        let mut rdr = open_reader(&dir.join("mortality.csv"))?;
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| SimError::Csv {
                path: "mortality.csv".into(),
                message: e.to_string(),
            })?;
            let age: u32 = parse_field(&rec, 0, "mortality.csv", line + 2)?;
            let p: f64 = parse_field(&rec, 1, "mortality.csv", line + 2)?;
            if !(0.0..=1.0).contains(&p) {
                return Err(SimError::Validation {
                    table: "mortality.csv".into(),
                    message: format!("death probability {p} out of [0,1] at age {age}"),
                });
            }
            by_age.insert(age, p);
        }
    }
    if by_age.is_empty() {
        return Err(SimError::Schema {
            table: "mortality.csv".into(),
            message: "zero rows".into(),
        });
    }
    let max_age = *by_age.keys().max().unwrap();
    let mut annual = Vec::with_capacity(max_age as usize + 1);
    for age in 0..=max_age {
        let p = by_age.get(&age).copied().ok_or_else(|| SimError::Schema {
            table: "mortality.csv".into(),
            message: format!("missing age {age}"),
        })?;
        annual.push(p);
    }
    if (annual[max_age as usize] - 1.0).abs() > 1e-9 {
        return Err(SimError::Validation {
            table: "mortality.csv".into(),
            message: format!("terminal age {max_age} must have death probability 1"),
        });
    }

    Ok(CalibrationTables {
        occupations,
        income: IncomeQuantileTable { entries: income_entries },
        unemployment: UnemploymentTable { layoff_prob: layoff, duration },
        mortality: MortalityTable { annual },
    })
}

//! Rolling-window minimum-variance portfolio backtest on daily return panels.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{Datelike, Months, NaiveDate, Weekday};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::elliptical::stream_rng;
use crate::error::{Error, Result};
use crate::linalg::{ensure_square, inverse};
use crate::pipeline::{fit_pipeline, PipelineSpec};

pub const TRADING_DAYS: f64 = 252.0;

const DATE_FORMATS: [&str; 3] = ["%Y-%m-%d", "%Y%m%d", "%m/%d/%Y"];

#[derive(Debug, Clone, PartialEq)]
pub struct ReturnPanel {
    pub dates: Vec<NaiveDate>,
    pub tickers: Vec<String>,
    /// `T × d` simple returns.
    pub returns: DMatrix<f64>,
}

impl ReturnPanel {
    pub fn new(dates: Vec<NaiveDate>, tickers: Vec<String>, returns: DMatrix<f64>) -> Result<Self> {
        if returns.shape() != (dates.len(), tickers.len()) {
            return Err(Error::validation("return matrix does not match dates × tickers"));
        }
        if dates.is_empty() || tickers.is_empty() {
            return Err(Error::validation("empty return panel"));
        }
        if let Some(i) = dates.windows(2).position(|w| w[0] >= w[1]) {
            return Err(Error::validation(format!(
                "dates must be strictly increasing ({} then {})",
                dates[i],
                dates[i + 1]
            )));
        }
        if returns.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("returns must be finite"));
        }
        Ok(Self {
            dates,
            tickers,
            returns,
        })
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    pub fn assets(&self) -> usize {
        self.tickers.len()
    }
}

#[derive(Debug, Clone)]
pub struct Ingested {
    pub panel: ReturnPanel,
    /// Tickers removed because of missing values.
    pub dropped: Vec<String>,
}

fn parse_date(s: &str) -> Option<NaiveDate> {
    DATE_FORMATS
        .iter()
        .find_map(|f| NaiveDate::parse_from_str(s.trim(), f).ok())
}

fn is_missing(s: &str) -> bool {
    matches!(s.trim(), "" | "NA" | "NaN" | "nan" | "null")
}

/// Reads a wide CSV (one date column, one column per ticker).
///
/// Tickers with any missing cell are dropped and reported. `ticker_filter`
/// restricts the columns read.
pub fn ingest_csv(path: &Path, date_column: &str, ticker_filter: Option<&[String]>) -> Result<Ingested> {
    let mut reader = csv::ReaderBuilder::new().flexible(false).from_path(path)?;
    let headers = reader.headers()?.clone();
    let date_idx = headers
        .iter()
        .position(|h| h.trim() == date_column)
        .ok_or_else(|| Error::validation(format!("date column '{date_column}' not found")))?;
    let columns: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|&(i, h)| i != date_idx && ticker_filter.is_none_or(|f| f.iter().any(|t| t == h.trim())))
        .map(|(i, h)| (i, h.trim().to_string()))
        .collect();

    let mut dates = Vec::new();
    let mut cells: Vec<Vec<Option<f64>>> = Vec::new();
    for (k, record) in reader.records().enumerate() {
        let line = k + 2;
        let record = record?;
        let raw_date = record.get(date_idx).unwrap_or("");
        let date = parse_date(raw_date)
            .ok_or_else(|| Error::validation(format!("row {line}: cannot parse date '{raw_date}'")))?;
        if let Some(prev) = dates.last() {
            if date <= *prev {
                return Err(Error::validation(format!("row {line}: dates are not strictly increasing")));
            }
        }
        let mut row = Vec::with_capacity(columns.len());
        for (i, name) in &columns {
            let s = record.get(*i).unwrap_or("");
            if is_missing(s) {
                row.push(None);
            } else {
                let v: f64 = s.trim().parse().map_err(|_| {
                    Error::validation(format!("row {line}: cannot parse '{s}' for {name}"))
                })?;
                row.push(v.is_finite().then_some(v));
            }
        }
        dates.push(date);
        cells.push(row);
    }
    if dates.is_empty() {
        return Err(Error::validation("no data rows"));
    }
    let (keep, dropped): (Vec<usize>, Vec<usize>) =
        (0..columns.len()).partition(|&j| cells.iter().all(|row| row[j].is_some()));
    if keep.is_empty() {
        return Err(Error::validation("every ticker has missing values"));
    }
    let returns = DMatrix::from_fn(dates.len(), keep.len(), |t, j| cells[t][keep[j]].unwrap());
    let tickers = keep.iter().map(|&j| columns[j].1.clone()).collect();
    let dropped: Vec<String> = dropped.iter().map(|&j| columns[j].1.clone()).collect();
    for t in &dropped {
        log::info!("dropping {t}: incomplete history");
    }
    Ok(Ingested {
        panel: ReturnPanel::new(dates, tickers, returns)?,
        dropped,
    })
}

/// Global minimum-variance weights `Σ⁻¹1 / 1ᵀΣ⁻¹1`.
pub fn mvp_weights(sigma_inv: &DMatrix<f64>) -> Result<DVector<f64>> {
    ensure_square(sigma_inv, "inverse covariance")?;
    let d = sigma_inv.nrows();
    let raw = sigma_inv * DVector::from_element(d, 1.0);
    let total: f64 = raw.sum();
    let scale = raw.iter().map(|v| v.abs()).sum::<f64>();
    if !total.is_finite() || total.abs() <= 1e-12 * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::numeric("1ᵀΣ⁻¹1 is zero or not finite"));
    }
    Ok(raw / total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Strategy {
    /// `(1/d, …, 1/d)`.
    EqualWeight,
    /// MVP from a fixed covariance matrix (for example the true one).
    FixedCovariance { name: String, sigma: Vec<Vec<f64>> },
    Pipeline(PipelineSpec),
}

impl Strategy {
    pub fn name(&self) -> &str {
        match self {
            Strategy::EqualWeight => "EW",
            Strategy::FixedCovariance { name, .. } => name,
            Strategy::Pipeline(p) => &p.name,
        }
    }

    pub fn fixed(name: &str, sigma: &DMatrix<f64>) -> Self {
        Strategy::FixedCovariance {
            name: name.to_string(),
            sigma: sigma.row_iter().map(|r| r.iter().copied().collect()).collect(),
        }
    }

    fn weights(&self, window: &DMatrix<f64>) -> Result<DVector<f64>> {
        let d = window.ncols();
        match self {
            Strategy::EqualWeight => Ok(DVector::from_element(d, 1.0 / d as f64)),
            Strategy::FixedCovariance { sigma, .. } => {
                if sigma.len() != d || sigma.iter().any(|r| r.len() != d) {
                    return Err(Error::validation("fixed covariance has the wrong size"));
                }
                let m = DMatrix::from_fn(d, d, |i, j| sigma[i][j]);
                mvp_weights(&inverse(&m)?)
            }
            Strategy::Pipeline(spec) => {
                if d == 1 {
                    return Ok(DVector::from_element(1, 1.0));
                }
                let fit = fit_pipeline(spec, window, None)?;
                mvp_weights(&fit.inverse_scatter()?)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rebalance {
    #[default]
    Monthly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightRecord {
    pub date: NaiveDate,
    pub strategy: String,
    pub weights: Vec<f64>,
    /// `Σ|w_t - w_{t-1}|`; absent at the first rebalance.
    pub turnover: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gap {
    pub date: NaiveDate,
    pub strategy: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskRow {
    pub year: i32,
    pub strategy: String,
    pub annualized_risk: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestReport {
    pub tickers: Vec<String>,
    pub strategies: Vec<String>,
    pub annual: Vec<RiskRow>,
    /// Annualized risk over the whole out-of-sample period.
    pub overall: Vec<(String, Option<f64>)>,
    pub weights: Vec<WeightRecord>,
    pub gaps: Vec<Gap>,
    /// Out-of-sample daily portfolio returns per strategy.
    pub daily: Vec<(String, Vec<(NaiveDate, f64)>)>,
}

impl BacktestReport {
    pub fn overall_risk(&self, strategy: &str) -> Option<f64> {
        self.overall
            .iter()
            .find(|(s, _)| s == strategy)
            .and_then(|(_, r)| *r)
    }

    /// CSV with header `year,pipeline,annualized_risk`.
    pub fn risk_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["year", "pipeline", "annualized_risk"])?;
        for r in &self.annual {
            w.write_record([
                r.year.to_string(),
                r.strategy.clone(),
                r.annualized_risk.map(|v| v.to_string()).unwrap_or_default(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn weights_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.weights)? + "\n")
    }
}

fn month_key(d: NaiveDate) -> (i32, u32) {
    (d.year(), d.month())
}

fn month_start(d: NaiveDate) -> NaiveDate {
    d.with_day(1).expect("day 1 exists")
}

/// One rebalance: train on `[train_lo, test_lo)`, hold over `[test_lo, test_hi)`.
#[derive(Debug, Clone, Copy)]
struct Period {
    date: NaiveDate,
    train_lo: usize,
    test_lo: usize,
    test_hi: usize,
}

fn periods(panel: &ReturnPanel, window_months: u32) -> Vec<Period> {
    let mut starts: Vec<usize> = vec![0];
    for t in 1..panel.len() {
        if month_key(panel.dates[t]) != month_key(panel.dates[t - 1]) {
            starts.push(t);
        }
    }
    let first_month = month_start(panel.dates[0]);
    let mut out = Vec::new();
    for (k, &lo) in starts.iter().enumerate() {
        let this_month = month_start(panel.dates[lo]);
        let Some(window_start) = this_month.checked_sub_months(Months::new(window_months)) else {
            continue;
        };
        if window_start < first_month {
            continue;
        }
        let train_lo = panel.dates.partition_point(|d| *d < window_start);
        let test_hi = starts.get(k + 1).copied().unwrap_or(panel.len());
        out.push(Period {
            date: panel.dates[lo],
            train_lo,
            test_lo: lo,
            test_hi,
        });
    }
    out
}

fn annualized(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Some(TRADING_DAYS.sqrt() * var.sqrt())
}

/// Rolling monthly backtest. At the first trading day of each calendar month
/// every strategy is fitted on the daily returns of the preceding
/// `window_months` calendar months and held with constant weights until the
/// next rebalance.
pub fn rolling_backtest(
    panel: &ReturnPanel,
    strategies: &[Strategy],
    window_months: u32,
    rebalance: Rebalance,
) -> Result<BacktestReport> {
    let Rebalance::Monthly = rebalance;
    if window_months == 0 {
        return Err(Error::validation("window must be at least one month"));
    }
    if strategies.is_empty() {
        return Err(Error::validation("no strategies"));
    }
    let schedule = periods(panel, window_months);
    if schedule.is_empty() {
        return Err(Error::validation(format!(
            "panel spans fewer than {} months; nothing to evaluate",
            window_months + 1
        )));
    }
    let fitted: Vec<Vec<Result<DVector<f64>>>> = schedule
        .par_iter()
        .map(|p| {
            let window = panel.returns.rows(p.train_lo, p.test_lo - p.train_lo).into_owned();
            strategies.iter().map(|s| s.weights(&window)).collect()
        })
        .collect();

    let mut weights = Vec::new();
    let mut gaps = Vec::new();
    let mut daily: Vec<(String, Vec<(NaiveDate, f64)>)> =
        strategies.iter().map(|s| (s.name().to_string(), Vec::new())).collect();
    let mut previous: Vec<Option<DVector<f64>>> = vec![None; strategies.len()];
    for (p, row) in schedule.iter().zip(fitted) {
        for (k, (strategy, w)) in strategies.iter().zip(row).enumerate() {
            match w {
                Ok(w) => {
                    let turnover = previous[k].as_ref().map(|prev| (&w - prev).abs().sum());
                    for t in p.test_lo..p.test_hi {
                        let r = panel.returns.row(t).transpose().dot(&w);
                        daily[k].1.push((panel.dates[t], r));
                    }
                    weights.push(WeightRecord {
                        date: p.date,
                        strategy: strategy.name().to_string(),
                        weights: w.iter().copied().collect(),
                        turnover,
                    });
                    previous[k] = Some(w);
                }
                Err(e) => {
                    log::warn!("{}: {} skipped ({e})", p.date, strategy.name());
                    gaps.push(Gap {
                        date: p.date,
                        strategy: strategy.name().to_string(),
                        reason: e.to_string(),
                    });
                }
            }
        }
    }

    let mut annual = Vec::new();
    let mut overall = Vec::new();
    for (name, series) in &daily {
        let mut by_year: BTreeMap<i32, Vec<f64>> = BTreeMap::new();
        for (d, r) in series {
            by_year.entry(d.year()).or_default().push(*r);
        }
        for (year, values) in by_year {
            annual.push(RiskRow {
                year,
                strategy: name.clone(),
                annualized_risk: annualized(&values),
            });
        }
        let all: Vec<f64> = series.iter().map(|(_, r)| *r).collect();
        overall.push((name.clone(), annualized(&all)));
    }
    annual.sort_by_key(|r| r.year);

    Ok(BacktestReport {
        tickers: panel.tickers.clone(),
        strategies: strategies.iter().map(|s| s.name().to_string()).collect(),
        annual,
        overall,
        weights,
        gaps,
        daily,
    })
}

/// The first `t` weekdays on or after `start`.
pub fn business_days(start: NaiveDate, t: usize) -> Vec<NaiveDate> {
    start
        .iter_days()
        .filter(|d| !matches!(d.weekday(), Weekday::Sat | Weekday::Sun))
        .take(t)
        .collect()
}

/// I.i.d. `N(0, Σ)` daily returns on consecutive business days.
pub fn synthetic_panel(sigma: &DMatrix<f64>, t: usize, seed: u64, start: NaiveDate) -> Result<ReturnPanel> {
    ensure_square(sigma, "sigma")?;
    let d = sigma.nrows();
    let chol = sigma
        .clone()
        .cholesky()
        .ok_or_else(|| Error::numeric("sigma is not positive definite"))?;
    let mut rng = stream_rng(seed, 0);
    let z = DMatrix::from_fn(t, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let returns = z * chol.l().transpose();
    let tickers = (0..d).map(|j| format!("A{j:03}")).collect();
    ReturnPanel::new(business_days(start, t), tickers, returns)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn date(y: i32, m: u32, d: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, d).unwrap()
    }

    #[test]
    fn mvp_examples() {
        let s_inv = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.25]));
        let w = mvp_weights(&s_inv).unwrap();
        assert!((w[0] - 0.8).abs() < 1e-15 && (w[1] - 0.2).abs() < 1e-15);
        let w = mvp_weights(&DMatrix::identity(4, 4)).unwrap();
        assert!(w.iter().all(|v| (v - 0.25).abs() < 1e-15));
        let w2 = mvp_weights(&(s_inv * 7.5)).unwrap();
        assert!((w2[0] - 0.8).abs() < 1e-15);
        let degenerate = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]);
        assert!(mvp_weights(&degenerate).is_err());
    }

    #[test]
    fn csv_round_trip_and_drops() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        write!(f, "date,AAA,BBB,CCC\n2020-01-02,0.01,0.02,\n2020-01-03,-0.01,0.00,0.1\n2020-01-06,0.03,0.01,0.2\n").unwrap();
        let got = ingest_csv(f.path(), "date", None).unwrap();
        assert_eq!(got.dropped, vec!["CCC".to_string()]);
        assert_eq!(got.panel.tickers, vec!["AAA".to_string(), "BBB".to_string()]);
        let expected = DMatrix::from_row_slice(3, 2, &[0.01, 0.02, -0.01, 0.0, 0.03, 0.01]);
        assert_eq!(got.panel.returns, expected);
    }

    #[test]
    fn csv_errors_name_the_row() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        write!(f, "date,A\n2020-01-03,0.1\n2020-01-02,0.2\n").unwrap();
        let err = ingest_csv(f.path(), "date", None).unwrap_err().to_string();
        assert!(err.contains("row 3"), "{err}");

        let mut g = tempfile::NamedTempFile::new().unwrap();
        write!(g, "date,A\n2020-01-02,abc\n").unwrap();
        assert!(ingest_csv(g.path(), "date", None).unwrap_err().to_string().contains("row 2"));

        let mut h = tempfile::NamedTempFile::new().unwrap();
        writeln!(h, "date,A").unwrap();
        assert!(ingest_csv(h.path(), "date", None).is_err());
    }

    #[test]
    fn ticker_filter_limits_columns() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        write!(f, "date,A,B\n2020-01-02,1,2\n2020-01-03,3,4\n").unwrap();
        let only = vec!["B".to_string()];
        let got = ingest_csv(f.path(), "date", Some(&only)).unwrap();
        assert_eq!(got.panel.tickers, only);
    }

    #[test]
    fn single_asset_risk() {
        let sigma = DMatrix::from_element(1, 1, 1e-4);
        let panel = synthetic_panel(&sigma, 400, 3, date(2001, 1, 1)).unwrap();
        let spec = PipelineSpec::poet_ss(crate::pipeline::FactorCount::Gr);
        let report = rolling_backtest(&panel, &[Strategy::EqualWeight, Strategy::Pipeline(spec)], 3, Rebalance::Monthly).unwrap();
        assert!(report.weights.iter().all(|w| w.weights == vec![1.0]));
        let first_oos = report.weights[0].date;
        let t0 = panel.dates.iter().position(|d| *d == first_oos).unwrap();
        let oos: Vec<f64> = panel.returns.column(0).iter().skip(t0).copied().collect();
        let expected = annualized(&oos).unwrap();
        assert!((report.overall_risk("EW").unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn schedule_respects_window() {
        let sigma = DMatrix::identity(2, 2);
        let panel = synthetic_panel(&sigma, 300, 1, date(2010, 1, 15)).unwrap();
        let ps = periods(&panel, 2);
        // January is partial but counts; the first rebalance is in March.
        assert_eq!(month_key(ps[0].date), (2010, 3));
        assert_eq!(ps[0].train_lo, 0);
        assert!(ps.iter().all(|p| p.train_lo < p.test_lo && p.test_lo < p.test_hi));
        assert!(rolling_backtest(&panel, &[Strategy::EqualWeight], 40, Rebalance::Monthly).is_err());
    }

    #[test]
    fn weights_sum_to_one() {
        let a = DMatrix::from_fn(5, 5, |i, j| if i == j { 2.0 + i as f64 } else { 0.3 });
        let panel = synthetic_panel(&(a * 1e-4), 260, 2, date(2015, 1, 1)).unwrap();
        let strategies = [
            Strategy::EqualWeight,
            Strategy::Pipeline(PipelineSpec::sample(crate::pipeline::FactorCount::Gr)),
        ];
        let report = rolling_backtest(&panel, &strategies, 3, Rebalance::Monthly).unwrap();
        for w in &report.weights {
            assert!((w.weights.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
        assert!(report.risk_csv().unwrap().starts_with("year,pipeline,annualized_risk\n"));
    }
}

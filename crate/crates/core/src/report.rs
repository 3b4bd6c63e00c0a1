//! CSV reporting helpers and convergence-slope fitting.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Formats a float with 17 significant digits, enough to round-trip.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Version tag written as the first column of every report row.
pub const REPORT_SCHEMA: &str = "mchom-report-v1";

/// One parameter point of a run or study.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub study: String,
    /// Hash of the resolved configuration of this point.
    pub config_hash: String,
    pub h_eps: f64,
    pub h_coarse: f64,
    pub k_layers: usize,
    pub contrast: f64,
    pub nlmc_energy_error: f64,
    pub nlmc_l2_error: f64,
    pub macro_energy_error: f64,
    pub macro_l2_error: f64,
    pub mean_preservation: f64,
    pub identity_discrepancy: f64,
    pub runtime_s: f64,
    /// Empty when the point succeeded.
    pub failure: String,
}

impl ReportRow {
    const HEADER: [&'static str; 15] = [
        "schema",
        "study",
        "config_hash",
        "h_eps",
        "h_coarse",
        "k_layers",
        "contrast",
        "nlmc_energy_error",
        "nlmc_l2_error",
        "macro_energy_error",
        "macro_l2_error",
        "mean_preservation",
        "identity_discrepancy",
        "runtime_s",
        "failure",
    ];

    fn record(&self) -> Vec<String> {
        vec![
            REPORT_SCHEMA.to_string(),
            self.study.clone(),
            self.config_hash.clone(),
            fmt_f64(self.h_eps),
            fmt_f64(self.h_coarse),
            self.k_layers.to_string(),
            fmt_f64(self.contrast),
            fmt_f64(self.nlmc_energy_error),
            fmt_f64(self.nlmc_l2_error),
            fmt_f64(self.macro_energy_error),
            fmt_f64(self.macro_l2_error),
            fmt_f64(self.mean_preservation),
            fmt_f64(self.identity_discrepancy),
            fmt_f64(self.runtime_s),
            self.failure.clone(),
        ]
    }

    /// True when every metric is finite and nonnegative (NaN marks a metric
    /// that was not computed and is allowed).
    pub fn metrics_valid(&self) -> bool {
        [
            self.nlmc_energy_error,
            self.nlmc_l2_error,
            self.macro_energy_error,
            self.macro_l2_error,
            self.mean_preservation,
            self.identity_discrepancy,
            self.runtime_s,
        ]
        .iter()
        .all(|v| v.is_nan() || (v.is_finite() && *v >= 0.0))
    }
}

pub fn write_rows<W: Write>(out: W, rows: &[ReportRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(ReportRow::HEADER)?;
    for r in rows {
        w.write_record(r.record())?;
    }
    w.flush()?;
    Ok(())
}

/// Least-squares slope of `log(y)` against `log(x)`. `None` when fewer than
/// two points with positive coordinates are available.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = x
        .iter()
        .zip(y)
        .filter(|(a, b)| **a > 0.0 && **b > 0.0 && a.is_finite() && b.is_finite())
        .map(|(a, b)| (a.ln(), b.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    Some(sxy / sxx)
}

/// Summary line appended after study rows: a log-log slope of `metric`
/// against a parameter, or the max/min ratio of `metric` across its values.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub metric: String,
    pub against: String,
    /// `"slope"` or `"ratio"`.
    pub statistic: String,
    pub value: Option<f64>,
}

/// `max / min` of the positive finite entries; `None` with fewer than two.
pub fn spread_ratio(y: &[f64]) -> Option<f64> {
    let v: Vec<f64> = y.iter().copied().filter(|v| v.is_finite() && *v > 0.0).collect();
    if v.len() < 2 {
        return None;
    }
    let hi = v.iter().copied().fold(f64::MIN, f64::max);
    let lo = v.iter().copied().fold(f64::MAX, f64::min);
    Some(hi / lo)
}

pub fn write_summaries<W: Write>(out: W, rows: &[Summary]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["schema", "metric", "against", "statistic", "value"])?;
    for s in rows {
        w.write_record([
            REPORT_SCHEMA.to_string(),
            s.metric.clone(),
            s.against.clone(),
            s.statistic.clone(),
            s.value.map(fmt_f64).unwrap_or_else(|| "not-applicable".into()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seventeen_digits_round_trip() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23] {
            let s = fmt_f64(v);
            assert_eq!(s.parse::<f64>().unwrap(), v);
            let mantissa = s.split('e').next().unwrap().replace(['-', '.'], "");
            assert_eq!(mantissa.len(), 17);
        }
    }

    #[test]
    fn slope_of_power_law() {
        let x = [0.25, 0.125, 0.0625];
        let y: Vec<f64> = x.iter().map(|h: &f64| 3.0 * h.powf(1.5)).collect();
        assert!((loglog_slope(&x, &y).unwrap() - 1.5).abs() < 1e-12);
        assert_eq!(loglog_slope(&[0.5], &[1.0]), None);
        assert_eq!(spread_ratio(&[2.0, 1.0, f64::NAN, 4.0]), Some(4.0));
        assert_eq!(spread_ratio(&[2.0]), None);
    }

    #[test]
    fn missing_summary_is_not_applicable() {
        let mut buf = Vec::new();
        let s = Summary {
            metric: "m".into(),
            against: "h".into(),
            statistic: "slope".into(),
            value: None,
        };
        write_summaries(&mut buf, &[s]).unwrap();
        assert!(String::from_utf8(buf).unwrap().contains("not-applicable"));
    }

    #[test]
    fn rows_serialize_with_header() {
        let mut buf = Vec::new();
        write_rows(&mut buf, &[ReportRow { study: "s".into(), ..Default::default() }]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("schema,study,config_hash,h_eps"));
        assert_eq!(text.lines().count(), 2);
    }
}

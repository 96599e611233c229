//! Results tables: a JSON report and, for attacks, a per-step CSV of both
//! loss views.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{MetricsRecord, MS_SSIM_SCALES, NC_THRESHOLD};

pub const RESULTS_FORMAT: &str = "gradshield-results/1";
pub const CURVES_HEADER: [&str; 3] = ["step", "attacker_view", "defender_view"];

/// Fixed facts about how the numbers in a report were computed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub ms_ssim_scales: usize,
    pub ms_ssim_note: String,
    pub nc_threshold: f64,
}

impl Default for ReportMetadata {
    fn default() -> Self {
        Self {
            ms_ssim_scales: MS_SSIM_SCALES,
            ms_ssim_note: "3 scales instead of 5: 32 px images cannot be halved four times above the 7 px window"
                .into(),
            nc_threshold: NC_THRESHOLD,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsReport {
    pub format_version: String,
    pub metadata: ReportMetadata,
    pub records: Vec<MetricsRecord>,
}

pub fn results_json(records: &[MetricsRecord]) -> String {
    let report = ResultsReport {
        format_version: RESULTS_FORMAT.into(),
        metadata: ReportMetadata::default(),
        records: records.to_vec(),
    };
    serde_json::to_string_pretty(&report).expect("report serializes") + "\n"
}

pub fn parse_results(text: &str) -> Result<ResultsReport> {
    let report: ResultsReport = serde_json::from_str(text)?;
    if report.format_version != RESULTS_FORMAT {
        return Err(Error::invalid(format!(
            "unsupported results format {:?}",
            report.format_version
        )));
    }
    Ok(report)
}

pub fn curves_csv(attacker_view: &[f64], defender_view: &[f64]) -> Result<Vec<u8>> {
    if attacker_view.len() != defender_view.len() {
        return Err(Error::invalid(format!(
            "curve lengths differ: {} vs {}",
            attacker_view.len(),
            defender_view.len()
        )));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CURVES_HEADER)?;
    for (step, (a, d)) in attacker_view.iter().zip(defender_view).enumerate() {
        w.serialize((step, a, d))?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Reads a curves CSV back into `(attacker_view, defender_view)`.
pub fn parse_curves(bytes: &[u8]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut r = csv::Reader::from_reader(bytes);
    if r.headers()?.iter().ne(CURVES_HEADER) {
        return Err(Error::invalid("unexpected curves header"));
    }
    let (mut a, mut d) = (Vec::new(), Vec::new());
    for (i, row) in r.deserialize::<(usize, f64, f64)>().enumerate() {
        let (step, av, dv) = row?;
        if step != i {
            return Err(Error::invalid(format!("curve row {i} has step {step}")));
        }
        a.push(av);
        d.push(dv);
    }
    Ok((a, d))
}

fn with_ext(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(ext);
    PathBuf::from(s)
}

/// Writes `<prefix>.json` and, given curves, `<prefix>.csv`. Returns the paths written.
pub fn emit_results(
    records: &[MetricsRecord],
    curves: Option<(&[f64], &[f64])>,
    prefix: &Path,
) -> Result<Vec<PathBuf>> {
    let json = with_ext(prefix, ".json");
    fs::write(&json, results_json(records))?;
    let mut written = vec![json];
    if let Some((a, d)) = curves {
        let csv_path = with_ext(prefix, ".csv");
        fs::write(&csv_path, curves_csv(a, d)?)?;
        written.push(csv_path);
    }
    Ok(written)
}

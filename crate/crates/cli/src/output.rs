//! CSV tables and the run manifest.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use neld::harness::{ErrorSeries, TruncationReport};
use neld::ConvergenceReport;

/// Bumped whenever a CSV column or manifest key changes meaning.
pub const SCHEMA_VERSION: u32 = 1;

pub const CONVERGENCE_COLUMNS: &str = "t,pair,e_mean_q,e_rms_q,e_mean_p,e_rms_p,ord_mean_q,ord_mean_p";

pub const ORD_NOTE: &str = "ord(t) columns are raw per-checkpoint estimates log2(e_2h / e_h); \
summaries are medians over the second half of the time window for the finest pair";

/// `"1-2"`, `"2-4"`, ... for pair `j` (levels `j` and `j + 1`).
pub fn pair_label(j: usize) -> String {
    format!("{}-{}", 1u64 << j, 1u64 << (j + 1))
}

fn num(x: Option<f64>) -> String {
    match x {
        Some(v) if v.is_finite() => format!("{v:e}"),
        _ => "NaN".to_string(),
    }
}

/// One row per checkpoint and ladder pair; `ord` is undefined (`NaN`) on the
/// coarsest pair.
pub fn convergence_csv(report: &ConvergenceReport) -> String {
    let mut out = String::from(CONVERGENCE_COLUMNS);
    out.push('\n');
    for (c, &t) in report.times.iter().enumerate() {
        for j in 0..report.pairs() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                num(Some(t)),
                pair_label(j),
                num(Some(report.mean_q[c][j])),
                num(Some(report.rms_q[c][j])),
                num(Some(report.mean_p[c][j])),
                num(Some(report.rms_p[c][j])),
                num(report.ord(ErrorSeries::MeanQ, c, j)),
                num(report.ord(ErrorSeries::MeanP, c, j)),
            );
        }
    }
    out
}

pub fn truncation_csv(report: &TruncationReport) -> String {
    let mut out = String::from("dt,error\n");
    for (dt, e) in report.dts.iter().zip(&report.errors) {
        let _ = writeln!(out, "{},{}", num(Some(*dt)), num(Some(*e)));
    }
    out
}

/// Writes through a temporary sibling and a rename, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, contents: &str) -> io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)
}

/// Flat `key = value` record of one CLI invocation.
#[derive(Debug, Default, Clone)]
pub struct RunManifest {
    entries: Vec<(String, String)>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        let mut m = Self::default();
        m.set("schema_version", SCHEMA_VERSION);
        m.set("command", command);
        m.set("code_version", concat!("neld-cli ", env!("CARGO_PKG_VERSION")));
        m
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.push((key.into(), value.to_string().replace('\n', " ")));
    }

    /// Adds the config echo under a `config.` prefix.
    pub fn echo_config(&mut self, rendered: &str) {
        for line in rendered.lines() {
            if let Some((k, v)) = line.split_once('=') {
                self.set(format!("config.{}", k.trim()), v.trim());
            }
        }
    }

    pub fn render(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn write(&self, path: &Path) -> io::Result<()> {
        write_atomic(path, &self.render())
    }
}

/// Recovers the config file body from a manifest's `config.` entries.
pub fn config_from_manifest(text: &str) -> String {
    text.lines()
        .filter_map(|line| line.strip_prefix("config."))
        .map(|line| format!("{line}\n"))
        .collect()
}

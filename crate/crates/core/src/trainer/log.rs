//! Per-iteration training records, their CSV form, and EWMA smoothing.

use std::io::Write;
use std::path::Path;

use crate::error::{contract, GleadError, Result};

pub const CSV_HEADER: &str = "images_shown,score_real,score_fake,loss_g,loss_d,rec_real,rec_fake,wallclock_s";

/// One training iteration. `rec_real`/`rec_fake` are unweighted mean
/// perceptual distances, 0 when the branch is disabled.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub images_shown: u64,
    pub score_real: f64,
    pub score_fake: f64,
    pub loss_g: f64,
    pub loss_d: f64,
    pub rec_real: f64,
    pub rec_fake: f64,
    pub wallclock_s: f64,
}

impl LogRecord {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{:.3}",
            self.images_shown,
            self.score_real,
            self.score_fake,
            self.loss_g,
            self.loss_d,
            self.rec_real,
            self.rec_fake,
            self.wallclock_s
        )
    }

    pub fn parse_csv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 8 {
            return Err(GleadError::Format(format!("log row needs 8 fields, got {}: {line:?}", f.len())));
        }
        let num = |i: usize| -> Result<f64> {
            f[i].parse().map_err(|_| GleadError::Format(format!("bad number {:?} in log row", f[i])))
        };
        Ok(LogRecord {
            images_shown: f[0].parse().map_err(|_| GleadError::Format(format!("bad images_shown {:?}", f[0])))?,
            score_real: num(1)?,
            score_fake: num(2)?,
            loss_g: num(3)?,
            loss_d: num(4)?,
            rec_real: num(5)?,
            rec_fake: num(6)?,
            wallclock_s: num(7)?,
        })
    }

    /// The loss and score columns (everything except timing).
    pub fn scalars(&self) -> [f64; 6] {
        [self.score_real, self.score_fake, self.loss_g, self.loss_d, self.rec_real, self.rec_fake]
    }
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| GleadError::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == CSV_HEADER => {}
        _ => return Err(GleadError::Format(format!("{} does not start with the log header", path.display()))),
    }
    lines.filter(|l| !l.trim().is_empty()).map(LogRecord::parse_csv).collect()
}

/// Rewrite `path` with the header and `records`.
pub fn write_log(path: &Path, records: &[LogRecord]) -> Result<()> {
    let mut s = String::with_capacity(64 * (records.len() + 1));
    s.push_str(CSV_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| GleadError::io(path, e))
}

pub fn append_log(path: &Path, record: &LogRecord) -> Result<()> {
    let mut f = std::fs::OpenOptions::new().append(true).open(path).map_err(|e| GleadError::io(path, e))?;
    writeln!(f, "{}", record.to_csv()).map_err(|e| GleadError::io(path, e))
}

/// `s_0 = x_0`, `s_t = alpha * x_t + (1 - alpha) * s_{t-1}`.
pub fn ewma(series: &[f64], alpha: f64) -> Result<Vec<f64>> {
    contract!(!series.is_empty(), "ewma of an empty series");
    contract!(alpha > 0.0 && alpha <= 1.0, "ewma alpha {alpha} outside (0, 1]");
    let mut out = Vec::with_capacity(series.len());
    let mut s = series[0];
    out.push(s);
    for &x in &series[1..] {
        s = alpha * x + (1.0 - alpha) * s;
        out.push(s);
    }
    Ok(out)
}

//! Machine-readable result files: JSON summaries plus per-curve CSV
//! (`fpr,tpr` for ROC, `rank,rate` for CMS) for external plotting.

use std::fmt::Write as _;
use std::path::Path;

use super::{EvalError, IdentificationReport, VerificationReport};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn write_verification_json(
    report: &VerificationReport,
    path: &Path,
) -> Result<(), EvalError> {
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| EvalError::Protocol(format!("report serialization: {e}")))?;
    std::fs::write(path, json).map_err(io_err(path))
}

pub fn read_verification_json(path: &Path) -> Result<VerificationReport, EvalError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text)
        .map_err(|e| EvalError::Protocol(format!("report parse {}: {e}", path.display())))
}

pub fn write_identification_json(
    report: &IdentificationReport,
    path: &Path,
) -> Result<(), EvalError> {
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| EvalError::Protocol(format!("report serialization: {e}")))?;
    std::fs::write(path, json).map_err(io_err(path))
}

pub fn read_identification_json(path: &Path) -> Result<IdentificationReport, EvalError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text)
        .map_err(|e| EvalError::Protocol(format!("report parse {}: {e}", path.display())))
}

/// ROC CSV: header line, then one `fpr,tpr` point per line.
pub fn write_roc_csv(points: &[(f64, f64)], path: &Path) -> Result<(), EvalError> {
    let mut s = String::from("fpr,tpr\n");
    for (f, t) in points {
        let _ = writeln!(s, "{f},{t}");
    }
    std::fs::write(path, s).map_err(io_err(path))
}

pub fn read_roc_csv(path: &Path) -> Result<Vec<(f64, f64)>, EvalError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != "fpr,tpr" {
        return Err(EvalError::Protocol(format!(
            "{}: bad ROC header '{header}'",
            path.display()
        )));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let (a, b) = line
            .split_once(',')
            .ok_or_else(|| EvalError::Protocol(format!("ROC line {} malformed", i + 2)))?;
        let f: f64 = a
            .parse()
            .map_err(|_| EvalError::Protocol(format!("ROC line {}: bad fpr", i + 2)))?;
        let t: f64 = b
            .parse()
            .map_err(|_| EvalError::Protocol(format!("ROC line {}: bad tpr", i + 2)))?;
        out.push((f, t));
    }
    Ok(out)
}

/// CMS CSV: header line, then contiguous `rank,rate` lines for
/// rank = 1..=K.
pub fn write_cms_csv(cms: &[f64], path: &Path) -> Result<(), EvalError> {
    let mut s = String::from("rank,rate\n");
    for (k, rate) in cms.iter().enumerate() {
        let _ = writeln!(s, "{},{rate}", k + 1);
    }
    std::fs::write(path, s).map_err(io_err(path))
}

pub fn read_cms_csv(path: &Path) -> Result<Vec<f64>, EvalError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != "rank,rate" {
        return Err(EvalError::Protocol(format!(
            "{}: bad CMS header '{header}'",
            path.display()
        )));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let (rank, rate) = line
            .split_once(',')
            .ok_or_else(|| EvalError::Protocol(format!("CMS line {} malformed", i + 2)))?;
        let rank: usize = rank
            .parse()
            .map_err(|_| EvalError::Protocol(format!("CMS line {}: bad rank", i + 2)))?;
        if rank != i + 1 {
            return Err(EvalError::Protocol(format!(
                "CMS rank column must be contiguous: expected {}, got {rank}",
                i + 1
            )));
        }
        out.push(
            rate.parse()
                .map_err(|_| EvalError::Protocol(format!("CMS line {}: bad rate", i + 2)))?,
        );
    }
    Ok(out)
}

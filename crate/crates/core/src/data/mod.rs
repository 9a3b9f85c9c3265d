//! Dataset plumbing: manifests, augmentation, the synthetic desk-scale
//! generator, feature persistence, and training-distribution reporting.

mod augment;
mod store;
mod synth;

pub use augment::{augment, downsample_variant, AugmentConfig, Variant, VariantKind};
pub use store::FeatureStore;
pub use synth::{synth_generate, synth_write, SynthConfig, SynthDataset};

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::geometry::Landmarks5;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("manifest parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("duplicate key '{0}'")]
    DuplicateKey(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("feature store error: {0}")]
    Store(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// One dataset row: image path, subject id, and the five landmarks in
/// original-image pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub image_path: String,
    pub subject_id: String,
    pub landmarks: Landmarks5,
}

/// Parses the tab-separated manifest:
/// `path<TAB>subjectId<TAB>x1 y1 x2 y2 x3 y3 x4 y4 x5 y5`.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestRecord>, DataError> {
    let mut records = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let path = fields.next().filter(|s| !s.is_empty()).ok_or(DataError::Parse {
            line: ln + 1,
            msg: "missing image path".into(),
        })?;
        let subject = fields.next().filter(|s| !s.is_empty()).ok_or(DataError::Parse {
            line: ln + 1,
            msg: "missing subject id".into(),
        })?;
        let coords_text = fields.next().ok_or(DataError::Parse {
            line: ln + 1,
            msg: "missing landmark coordinates".into(),
        })?;
        if fields.next().is_some() {
            return Err(DataError::Parse {
                line: ln + 1,
                msg: "too many tab-separated fields".into(),
            });
        }
        let coords: Vec<f64> = coords_text
            .split_whitespace()
            .map(|s| s.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| DataError::Parse {
                line: ln + 1,
                msg: "bad landmark coordinate".into(),
            })?;
        if coords.len() != 10 {
            return Err(DataError::Parse {
                line: ln + 1,
                msg: format!("expected 10 coordinate fields, got {}", coords.len()),
            });
        }
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(DataError::Parse {
                line: ln + 1,
                msg: "non-finite landmark coordinate".into(),
            });
        }
        let mut points = [[0.0; 2]; 5];
        for (i, p) in points.iter_mut().enumerate() {
            *p = [coords[2 * i], coords[2 * i + 1]];
        }
        records.push(ManifestRecord {
            image_path: path.to_string(),
            subject_id: subject.to_string(),
            landmarks: Landmarks5::new(points),
        });
    }
    Ok(records)
}

pub fn manifest_to_text(records: &[ManifestRecord]) -> String {
    let mut s = String::new();
    for r in records {
        let coords: Vec<String> = r
            .landmarks
            .points
            .iter()
            .flat_map(|p| [p[0].to_string(), p[1].to_string()])
            .collect();
        let _ = writeln!(s, "{}\t{}\t{}", r.image_path, r.subject_id, coords.join(" "));
    }
    s
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestRecord>, DataError> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_manifest(&text)
}

pub fn write_manifest(records: &[ManifestRecord], path: &Path) -> Result<(), DataError> {
    std::fs::write(path, manifest_to_text(records)).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Per-subject image counts sorted descending (ties by subject id), with
/// min/median/max summary.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionReport {
    pub counts: Vec<(String, usize)>,
    pub min: usize,
    pub median: f64,
    pub max: usize,
    pub total: usize,
}

pub fn distribution_report(records: &[ManifestRecord]) -> Result<DistributionReport, DataError> {
    if records.is_empty() {
        return Err(DataError::Empty("distribution report".into()));
    }
    let mut map: std::collections::BTreeMap<&str, usize> = std::collections::BTreeMap::new();
    for r in records {
        *map.entry(r.subject_id.as_str()).or_insert(0) += 1;
    }
    let mut counts: Vec<(String, usize)> =
        map.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    counts.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut sizes: Vec<usize> = counts.iter().map(|(_, c)| *c).collect();
    sizes.sort_unstable();
    let median = if sizes.len() % 2 == 1 {
        sizes[sizes.len() / 2] as f64
    } else {
        (sizes[sizes.len() / 2 - 1] + sizes[sizes.len() / 2]) as f64 / 2.0
    };
    Ok(DistributionReport {
        min: sizes[0],
        max: *sizes.last().unwrap(),
        median,
        total: records.len(),
        counts,
    })
}

/// CSV for plotting the per-subject count histogram: `subject,count`.
pub fn write_distribution_csv(report: &DistributionReport, path: &Path) -> Result<(), DataError> {
    let mut s = String::from("subject,count\n");
    for (subject, count) in &report.counts {
        let _ = writeln!(s, "{subject},{count}");
    }
    std::fs::write(path, s).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(path: &str, subject: &str) -> ManifestRecord {
        ManifestRecord {
            image_path: path.into(),
            subject_id: subject.into(),
            landmarks: Landmarks5::new([
                [10.5, 20.25],
                [30.0, 20.0],
                [20.0, 30.0],
                [12.0, 40.0],
                [28.0, 40.5],
            ]),
        }
    }

    #[test]
    fn empty_manifest_parses_to_empty_list() {
        assert!(parse_manifest("").unwrap().is_empty());
        assert!(parse_manifest("\n\n").unwrap().is_empty());
    }

    #[test]
    fn manifest_round_trip_is_exact() {
        let records = vec![record("a/x.pgm", "s1"), record("b/y.pgm", "s2")];
        let text = manifest_to_text(&records);
        let back = parse_manifest(&text).unwrap();
        assert_eq!(back, records);
    }

    #[test]
    fn nine_coordinates_are_rejected() {
        let line = "img.pgm\ts1\t1 2 3 4 5 6 7 8 9";
        let err = parse_manifest(line).unwrap_err();
        match err {
            DataError::Parse { line, msg } => {
                assert_eq!(line, 1);
                assert!(msg.contains("10"), "{msg}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn distribution_counts_and_summary() {
        let mut records = Vec::new();
        for i in 0..7 {
            records.push(record(&format!("a{i}.pgm"), "heavy"));
        }
        for i in 0..2 {
            records.push(record(&format!("b{i}.pgm"), "light"));
        }
        records.push(record("c0.pgm", "single"));
        let report = distribution_report(&records).unwrap();
        assert_eq!(report.counts[0], ("heavy".to_string(), 7));
        assert_eq!(report.total, 10);
        assert_eq!(report.min, 1);
        assert_eq!(report.max, 7);
        assert_eq!(report.median, 2.0);
        assert_eq!(
            report.counts.iter().map(|(_, c)| c).sum::<usize>(),
            records.len()
        );
    }
}

//! Gallery/probe identification with nearest-neighbor ranking and
//! cumulative match score curves.

use serde::{Deserialize, Serialize};

use super::EvalError;

/// How a probe's scores against one subject's gallery images aggregate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GalleryAggregation {
    Max,
    Mean,
}

#[derive(Debug, Clone)]
pub struct GalleryProbeSplit {
    /// (subject, feature key), manifest order preserved.
    pub gallery: Vec<(String, String)>,
    pub probe: Vec<(String, String)>,
    pub gallery_per_subject: usize,
}

/// First `per_subject` images of each subject (in manifest order) enroll
/// as gallery; the remainder become probes. Subjects without surplus
/// images contribute no probes.
pub fn split_gallery_probe(
    manifest: &[(String, String)],
    per_subject: usize,
) -> Result<GalleryProbeSplit, EvalError> {
    if manifest.is_empty() {
        return Err(EvalError::Protocol("empty identification manifest".into()));
    }
    let mut seen: std::collections::HashMap<&str, usize> = std::collections::HashMap::new();
    let mut gallery = Vec::new();
    let mut probe = Vec::new();
    for (subject, key) in manifest {
        let count = seen.entry(subject.as_str()).or_insert(0);
        if *count < per_subject {
            gallery.push((subject.clone(), key.clone()));
        } else {
            probe.push((subject.clone(), key.clone()));
        }
        *count += 1;
    }
    Ok(GalleryProbeSplit {
        gallery,
        probe,
        gallery_per_subject: per_subject,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct IdentificationReport {
    /// Rank-k identification rate for k = 1..=subject_count.
    pub cms: Vec<f64>,
    pub rank1: f64,
    pub probe_count: usize,
    pub subject_count: usize,
}

/// Ranks gallery subjects per probe by aggregated similarity (ties broken
/// by stable enrollment order) and accumulates the CMS curve.
pub fn identify(
    split: &GalleryProbeSplit,
    scorer: &dyn Fn(&str, &str) -> Result<f64, EvalError>,
    aggregation: GalleryAggregation,
) -> Result<IdentificationReport, EvalError> {
    // Subjects in first-enrollment order.
    let mut subjects: Vec<&str> = Vec::new();
    let mut subject_keys: std::collections::HashMap<&str, Vec<&str>> =
        std::collections::HashMap::new();
    for (subject, key) in &split.gallery {
        let entry = subject_keys.entry(subject.as_str()).or_default();
        if entry.is_empty() {
            subjects.push(subject.as_str());
        }
        entry.push(key.as_str());
    }
    if split.probe.is_empty() {
        return Err(EvalError::Protocol("no probes to identify".into()));
    }
    let n_subjects = subjects.len();
    let mut rank_hits = vec![0usize; n_subjects];
    for (true_subject, probe_key) in &split.probe {
        let true_idx = subjects
            .iter()
            .position(|s| s == true_subject)
            .ok_or_else(|| {
                EvalError::Protocol(format!(
                    "probe subject '{true_subject}' absent from gallery"
                ))
            })?;
        let mut scored: Vec<(usize, f64)> = Vec::with_capacity(n_subjects);
        for (idx, subject) in subjects.iter().enumerate() {
            let keys = &subject_keys[subject];
            let mut agg = match aggregation {
                GalleryAggregation::Max => f64::NEG_INFINITY,
                GalleryAggregation::Mean => 0.0,
            };
            for gkey in keys {
                let s = scorer(probe_key, gkey).map_err(|e| EvalError::Scorer {
                    a: probe_key.clone(),
                    b: (*gkey).to_string(),
                    msg: e.to_string(),
                })?;
                match aggregation {
                    GalleryAggregation::Max => agg = agg.max(s),
                    GalleryAggregation::Mean => agg += s / keys.len() as f64,
                }
            }
            scored.push((idx, agg));
        }
        // Stable sort keeps enrollment order on ties.
        scored.sort_by(|a, b| b.1.total_cmp(&a.1));
        let rank = scored.iter().position(|(idx, _)| *idx == true_idx).unwrap();
        rank_hits[rank] += 1;
    }
    let total = split.probe.len() as f64;
    let mut cms = Vec::with_capacity(n_subjects);
    let mut cum = 0usize;
    for hits in &rank_hits {
        cum += hits;
        cms.push(cum as f64 / total);
    }
    Ok(IdentificationReport {
        rank1: cms[0],
        cms,
        probe_count: split.probe.len(),
        subject_count: n_subjects,
    })
}

//! Verification protocol: 10-fold pairs, per-round threshold selection on
//! the held-in folds only, accuracy with standard error, and ROC curves.

mod identify;
pub mod report;

pub use identify::{
    identify, split_gallery_probe, GalleryAggregation, GalleryProbeSplit, IdentificationReport,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need at least 2 folds, got {0}")]
    FoldCount(usize),
    #[error("both classes must be present")]
    SingleClass,
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("pairs file format error at line {line}: {msg}")]
    PairFormat { line: usize, msg: String },
    #[error("unresolved pair reference: {0}")]
    Unresolved(String),
    #[error("scorer failed on pair ({a}, {b}): {msg}")]
    Scorer { a: String, b: String, msg: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A labeled pair of feature-store keys.
#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub a: String,
    pub b: String,
    pub same: bool,
}

/// Pair reference in LFW convention: subject name plus 1-based image index.
#[derive(Debug, Clone, PartialEq)]
pub struct PairRef {
    pub a: (String, u32),
    pub b: (String, u32),
    pub same: bool,
}

/// Folded pair lists with resolved feature keys.
#[derive(Debug, Clone)]
pub struct PairFolds {
    pub folds: Vec<Vec<Pair>>,
}

/// Parses the LFW pairs layout: a header `folds pairs_per_fold`, then per
/// fold `pairs_per_fold` same-pairs (`name i j`) followed by
/// `pairs_per_fold` different-pairs (`name1 i name2 j`).
pub fn parse_pairs_text(text: &str) -> Result<Vec<Vec<PairRef>>, EvalError> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (hline, header) = lines
        .next()
        .ok_or(EvalError::PairFormat {
            line: 1,
            msg: "empty pairs file".into(),
        })?;
    let mut it = header.split_whitespace();
    let folds: usize = it
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or(EvalError::PairFormat {
            line: hline + 1,
            msg: "bad fold count".into(),
        })?;
    let per_fold: usize = it
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or(EvalError::PairFormat {
            line: hline + 1,
            msg: "bad pairs-per-fold count".into(),
        })?;
    let mut out = Vec::with_capacity(folds);
    for _ in 0..folds {
        let mut fold = Vec::with_capacity(2 * per_fold);
        for want_same in [true, false] {
            for _ in 0..per_fold {
                let (ln, line) = lines.next().ok_or(EvalError::PairFormat {
                    line: 0,
                    msg: "truncated pairs file".into(),
                })?;
                let fields: Vec<&str> = line.split_whitespace().collect();
                let parse_idx = |s: &str| -> Result<u32, EvalError> {
                    s.parse().map_err(|_| EvalError::PairFormat {
                        line: ln + 1,
                        msg: format!("bad image index '{s}'"),
                    })
                };
                let pair = match (want_same, fields.len()) {
                    (true, 3) => PairRef {
                        a: (fields[0].to_string(), parse_idx(fields[1])?),
                        b: (fields[0].to_string(), parse_idx(fields[2])?),
                        same: true,
                    },
                    (false, 4) => PairRef {
                        a: (fields[0].to_string(), parse_idx(fields[1])?),
                        b: (fields[2].to_string(), parse_idx(fields[3])?),
                        same: false,
                    },
                    _ => {
                        return Err(EvalError::PairFormat {
                            line: ln + 1,
                            msg: format!(
                                "expected a {}-pair line, got {} fields",
                                if want_same { "same" } else { "different" },
                                fields.len()
                            ),
                        })
                    }
                };
                fold.push(pair);
            }
        }
        out.push(fold);
    }
    Ok(out)
}

pub fn write_pairs_text(folds: &[Vec<PairRef>]) -> String {
    use std::fmt::Write as _;
    let per_fold = folds.first().map(|f| f.len() / 2).unwrap_or(0);
    let mut s = String::new();
    let _ = writeln!(s, "{}\t{}", folds.len(), per_fold);
    for fold in folds {
        for p in fold.iter().filter(|p| p.same) {
            let _ = writeln!(s, "{}\t{}\t{}", p.a.0, p.a.1, p.b.1);
        }
        for p in fold.iter().filter(|p| !p.same) {
            let _ = writeln!(s, "{}\t{}\t{}\t{}", p.a.0, p.a.1, p.b.0, p.b.1);
        }
    }
    s
}

/// Parses a pair-exclusion list (one pair per line, same grammar as the
/// pairs body: `name i j` or `name1 i name2 j`) and drops matching pairs
/// from the folds. Matching ignores argument order.
pub fn filter_pairs(
    folds: &mut [Vec<PairRef>],
    exclusions_text: &str,
) -> Result<usize, EvalError> {
    type Key = ((String, u32), (String, u32));
    let canon = |a: &(String, u32), b: &(String, u32)| -> Key {
        if (a.0.as_str(), a.1) <= (b.0.as_str(), b.1) {
            (a.clone(), b.clone())
        } else {
            (b.clone(), a.clone())
        }
    };
    let mut excluded: std::collections::HashSet<Key> = std::collections::HashSet::new();
    for (ln, line) in exclusions_text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let idx = |s: &str| -> Result<u32, EvalError> {
            s.parse().map_err(|_| EvalError::PairFormat {
                line: ln + 1,
                msg: format!("bad image index '{s}' in exclusion list"),
            })
        };
        let (a, b) = match fields.len() {
            3 => (
                (fields[0].to_string(), idx(fields[1])?),
                (fields[0].to_string(), idx(fields[2])?),
            ),
            4 => (
                (fields[0].to_string(), idx(fields[1])?),
                (fields[2].to_string(), idx(fields[3])?),
            ),
            n => {
                return Err(EvalError::PairFormat {
                    line: ln + 1,
                    msg: format!("exclusion line needs 3 or 4 fields, got {n}"),
                })
            }
        };
        excluded.insert(canon(&a, &b));
    }
    let mut removed = 0usize;
    for fold in folds.iter_mut() {
        fold.retain(|p| {
            let hit = excluded.contains(&canon(&p.a, &p.b));
            removed += usize::from(hit);
            !hit
        });
    }
    Ok(removed)
}

/// Resolves (name, index) references to feature keys; every reference must
/// resolve.
pub fn resolve_pairs(
    folds: &[Vec<PairRef>],
    resolver: impl Fn(&str, u32) -> Option<String>,
) -> Result<PairFolds, EvalError> {
    let mut out = Vec::with_capacity(folds.len());
    for fold in folds {
        let mut resolved = Vec::with_capacity(fold.len());
        for p in fold {
            let a = resolver(&p.a.0, p.a.1)
                .ok_or_else(|| EvalError::Unresolved(format!("{} #{}", p.a.0, p.a.1)))?;
            let b = resolver(&p.b.0, p.b.1)
                .ok_or_else(|| EvalError::Unresolved(format!("{} #{}", p.b.0, p.b.1)))?;
            resolved.push(Pair {
                a,
                b,
                same: p.same,
            });
        }
        out.push(resolved);
    }
    Ok(PairFolds { folds: out })
}

/// Per-round trainable scorer. `fit` sees only the held-in pairs of the
/// round; the held-out fold is scored afterwards.
pub trait RoundScorer {
    fn fit(&mut self, train_pairs: &[&Pair]) -> Result<(), EvalError>;
    fn score(&self, a: &str, b: &str) -> Result<f64, EvalError>;
}

/// A stateless scorer wrapping a plain similarity function.
pub struct FnScorer<F: Fn(&str, &str) -> Result<f64, EvalError>>(pub F);

impl<F: Fn(&str, &str) -> Result<f64, EvalError>> RoundScorer for FnScorer<F> {
    fn fit(&mut self, _train: &[&Pair]) -> Result<(), EvalError> {
        Ok(())
    }
    fn score(&self, a: &str, b: &str) -> Result<f64, EvalError> {
        (self.0)(a, b)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct VerificationReport {
    pub fold_accuracy: Vec<f64>,
    pub mean_accuracy: f64,
    /// Sample standard deviation of the fold accuracies over sqrt(#folds).
    pub standard_error: f64,
    /// Accuracy-maximizing threshold chosen on each round's held-in folds.
    pub thresholds: Vec<f64>,
    /// Pooled ROC over all held-out scores: (false-positive rate,
    /// true-positive rate).
    pub roc: Vec<(f64, f64)>,
}

/// Accuracy-maximizing threshold over (score, same) observations:
/// candidates are midpoints between adjacent distinct scores plus
/// sentinels below/above; classification is same <=> score >= threshold;
/// the lowest maximizing candidate wins.
pub fn choose_threshold(scored: &[(f64, bool)]) -> f64 {
    if scored.is_empty() {
        return 0.0;
    }
    let mut sorted: Vec<(f64, bool)> = scored.to_vec();
    sorted.sort_by(|x, y| x.0.total_cmp(&y.0));
    let total_same = sorted.iter().filter(|(_, same)| *same).count() as i64;
    // Threshold below the minimum: everything classified same.
    let mut best_correct = total_same;
    let mut best_threshold = sorted[0].0 - 1.0;
    let mut correct = total_same;
    let mut i = 0;
    while i < sorted.len() {
        // Move the threshold just above the value at i (and its ties): all
        // those pairs flip to a "different" classification.
        let v = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == v {
            correct += if sorted[i].1 { -1 } else { 1 };
            i += 1;
        }
        let candidate = if i < sorted.len() {
            0.5 * (v + sorted[i].0)
        } else {
            v + 1.0
        };
        if correct > best_correct {
            best_correct = correct;
            best_threshold = candidate;
        }
    }
    best_threshold
}

fn accuracy_at(scored: &[(f64, bool)], threshold: f64) -> f64 {
    let correct = scored
        .iter()
        .filter(|(s, same)| (*s >= threshold) == *same)
        .count();
    correct as f64 / scored.len().max(1) as f64
}

/// Ten-fold (or n-fold) cross-validated verification. Per round the scorer
/// is fitted on the held-in folds, the threshold is chosen on those folds'
/// scores, and only then is the held-out fold scored.
pub fn verify_tenfold(
    folds: &PairFolds,
    scorer: &mut dyn RoundScorer,
) -> Result<VerificationReport, EvalError> {
    let n = folds.folds.len();
    if n < 2 {
        return Err(EvalError::FoldCount(n));
    }
    let score_pair = |scorer: &dyn RoundScorer, p: &Pair| -> Result<f64, EvalError> {
        scorer.score(&p.a, &p.b).map_err(|e| EvalError::Scorer {
            a: p.a.clone(),
            b: p.b.clone(),
            msg: e.to_string(),
        })
    };
    let mut fold_accuracy = Vec::with_capacity(n);
    let mut thresholds = Vec::with_capacity(n);
    let mut pooled: Vec<(f64, bool)> = Vec::new();
    for held_out in 0..n {
        let train: Vec<&Pair> = folds
            .folds
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != held_out)
            .flat_map(|(_, f)| f.iter())
            .collect();
        scorer.fit(&train)?;
        let mut train_scores = Vec::with_capacity(train.len());
        for p in &train {
            train_scores.push((score_pair(scorer, p)?, p.same));
        }
        let threshold = choose_threshold(&train_scores);
        let mut held_scores = Vec::with_capacity(folds.folds[held_out].len());
        for p in &folds.folds[held_out] {
            held_scores.push((score_pair(scorer, p)?, p.same));
        }
        fold_accuracy.push(accuracy_at(&held_scores, threshold));
        thresholds.push(threshold);
        pooled.extend(held_scores);
    }
    let mean = fold_accuracy.iter().sum::<f64>() / n as f64;
    let var = fold_accuracy
        .iter()
        .map(|a| (a - mean) * (a - mean))
        .sum::<f64>()
        / (n - 1) as f64;
    let standard_error = var.sqrt() / (n as f64).sqrt();
    let (scores, labels): (Vec<f64>, Vec<bool>) = pooled.into_iter().unzip();
    let roc = roc_curve(&scores, &labels)?;
    Ok(VerificationReport {
        fold_accuracy,
        mean_accuracy: mean,
        standard_error,
        thresholds,
        roc,
    })
}

/// ROC points (fpr, tpr) swept over all distinct thresholds, deduplicated,
/// with both endpoints included.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>, EvalError> {
    assert_eq!(scores.len(), labels.len());
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(EvalError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let v = scores[order[i]];
        while i < order.len() && scores[order[i]] == v {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let point = (fp as f64 / neg as f64, tp as f64 / pos as f64);
        if *points.last().unwrap() != point {
            points.push(point);
        }
    }
    if *points.last().unwrap() != (1.0, 1.0) {
        points.push((1.0, 1.0));
    }
    Ok(points)
}

/// Trapezoidal area under an ROC point list.
pub fn roc_auc(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * 0.5 * (w[0].1 + w[1].1))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    fn synthetic_folds(
        folds: usize,
        per_fold: usize,
        sep: f64,
        seed: u64,
    ) -> (PairFolds, HashMap<String, f64>) {
        // Each key caries a scalar "feature"; same-pairs get close values,
        // different-pairs get values separated by `sep`.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut features = HashMap::new();
        let mut out = Vec::new();
        let mut next_id = 0usize;
        for _ in 0..folds {
            let mut fold = Vec::new();
            for same in [true, false] {
                for _ in 0..per_fold {
                    let base: f64 = rng.random::<f64>() * 10.0;
                    let ka = format!("k{next_id}");
                    let kb = format!("k{}", next_id + 1);
                    next_id += 2;
                    features.insert(ka.clone(), base);
                    features.insert(
                        kb.clone(),
                        if same {
                            base + 0.01 * rng.random::<f64>()
                        } else {
                            base + sep + rng.random::<f64>()
                        },
                    );
                    fold.push(Pair {
                        a: ka,
                        b: kb,
                        same,
                    });
                }
            }
            out.push(fold);
        }
        (PairFolds { folds: out }, features)
    }

    #[test]
    fn perfectly_separated_scores_give_full_accuracy() {
        let (folds, feats) = synthetic_folds(10, 20, 5.0, 1);
        let mut scorer = FnScorer(|a: &str, b: &str| {
            Ok(-(feats[a] - feats[b]).abs()) // similarity = -distance
        });
        let report = verify_tenfold(&folds, &mut scorer).unwrap();
        assert_eq!(report.fold_accuracy.len(), 10);
        assert!((report.mean_accuracy - 1.0).abs() < 1e-12);
        assert!(report.standard_error.abs() < 1e-12);
        // Perfect scorer's ROC passes through (0, 1).
        assert!(report.roc.iter().any(|&(f, t)| f == 0.0 && t == 1.0));
    }

    #[test]
    fn label_independent_scores_sit_near_chance() {
        let (folds, _) = synthetic_folds(10, 50, 3.0, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut noise: HashMap<(String, String), f64> = HashMap::new();
        for fold in &folds.folds {
            for p in fold {
                noise.insert((p.a.clone(), p.b.clone()), rng.random::<f64>());
            }
        }
        let mut scorer =
            FnScorer(|a: &str, b: &str| Ok(noise[&(a.to_string(), b.to_string())]));
        let report = verify_tenfold(&folds, &mut scorer).unwrap();
        assert!(
            (report.mean_accuracy - 0.5).abs() < 0.05,
            "accuracy {}",
            report.mean_accuracy
        );
    }

    #[test]
    fn accuracy_invariant_under_increasing_transforms() {
        let (folds, feats) = synthetic_folds(10, 15, 2.0, 4);
        let base = |a: &str, b: &str| -(feats[a] - feats[b]).abs();
        let mut raw = FnScorer(|a: &str, b: &str| Ok(base(a, b)));
        let r1 = verify_tenfold(&folds, &mut raw).unwrap();
        let mut warped = FnScorer(|a: &str, b: &str| Ok((base(a, b)).atan() * 3.0 + 7.0));
        let r2 = verify_tenfold(&folds, &mut warped).unwrap();
        assert!((r1.mean_accuracy - r2.mean_accuracy).abs() < 1e-12);
        for (a, b) in r1.fold_accuracy.iter().zip(&r2.fold_accuracy) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn too_few_folds_is_an_error() {
        let folds = PairFolds {
            folds: vec![vec![]],
        };
        let mut scorer = FnScorer(|_: &str, _: &str| Ok(0.0));
        assert!(matches!(
            verify_tenfold(&folds, &mut scorer),
            Err(EvalError::FoldCount(1))
        ));
    }

    #[test]
    fn threshold_picks_separating_midpoint() {
        let scored = vec![(0.9, true), (0.8, true), (0.2, false), (0.1, false)];
        let t = choose_threshold(&scored);
        assert!((t - 0.5).abs() < 1e-12);
        assert_eq!(accuracy_at(&scored, t), 1.0);
    }

    #[test]
    fn roc_basics() {
        let scores = vec![0.9, 0.8, 0.3, 0.1];
        let labels = vec![true, true, false, false];
        let points = roc_curve(&scores, &labels).unwrap();
        assert_eq!(points.first(), Some(&(0.0, 0.0)));
        assert_eq!(points.last(), Some(&(1.0, 1.0)));
        assert!(points.iter().any(|&(f, t)| f == 0.0 && t == 1.0));
        assert!((roc_auc(&points) - 1.0).abs() < 1e-12);
        // Monotone along the sweep.
        for w in points.windows(2) {
            assert!(w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
        }
        // Point count bounded by distinct scores + 2.
        assert!(points.len() <= 4 + 2);
        assert!(matches!(
            roc_curve(&[0.5, 0.4], &[true, true]),
            Err(EvalError::SingleClass)
        ));
    }

    #[test]
    fn random_roc_auc_near_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 4000;
        let scores: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.5).collect();
        let auc = roc_auc(&roc_curve(&scores, &labels).unwrap());
        assert!((auc - 0.5).abs() < 0.05, "auc {auc}");
    }

    #[test]
    fn pairs_text_round_trip() {
        let folds = vec![
            vec![
                PairRef {
                    a: ("alice".into(), 1),
                    b: ("alice".into(), 3),
                    same: true,
                },
                PairRef {
                    a: ("alice".into(), 2),
                    b: ("bob".into(), 1),
                    same: false,
                },
            ],
            vec![
                PairRef {
                    a: ("carol".into(), 1),
                    b: ("carol".into(), 2),
                    same: true,
                },
                PairRef {
                    a: ("bob".into(), 2),
                    b: ("carol".into(), 1),
                    same: false,
                },
            ],
        ];
        let text = write_pairs_text(&folds);
        let back = parse_pairs_text(&text).unwrap();
        assert_eq!(back, folds);
    }

    #[test]
    fn pairs_parser_rejects_malformed_lines() {
        let text = "1\t1\nalice 1\nalice 1 bob 2";
        assert!(matches!(
            parse_pairs_text(text),
            Err(EvalError::PairFormat { .. })
        ));
    }

    #[test]
    fn exclusion_list_drops_matching_pairs_regardless_of_order() {
        let mut folds = parse_pairs_text("1 2\nalice 1 2\nalice 3 4\nalice 1 bob 2\ncarol 1 bob 1\n").unwrap();
        let removed = filter_pairs(&mut folds, "alice 2 1\n# comment\nbob 1 carol 1\n").unwrap();
        assert_eq!(removed, 2);
        assert_eq!(folds[0].len(), 2);
        assert!(folds[0].iter().all(|p| p.a.1 != 1 || !p.same));
        assert!(matches!(
            filter_pairs(&mut folds, "alice 1\n"),
            Err(EvalError::PairFormat { .. })
        ));
    }

    #[test]
    fn resolver_failures_surface() {
        let folds = vec![vec![PairRef {
            a: ("alice".into(), 1),
            b: ("ghost".into(), 9),
            same: true,
        }]];
        let err = resolve_pairs(&folds, |name, idx| {
            (name == "alice").then(|| format!("{name}/{idx}"))
        })
        .unwrap_err();
        assert!(matches!(err, EvalError::Unresolved(_)));
    }
}

//! Distance and localisation metrics, overall and by scene completeness.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Point2;
use crate::prediction::DistancePredictionSet;

/// Success thresholds (metres) reported in every evaluation.
pub const THRESHOLDS: [f64; 3] = [1.0, 2.0, 3.0];
pub const COMPLETENESS_BINS: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no cases to evaluate")]
    EmptyEvaluation,
    #[error("success threshold must be positive, got {0}")]
    InvalidThreshold(f64),
}

/// Index of the instance nearest `p` (ties → lowest index) and its distance.
pub fn nearest_instance(p: Point2, instances: &[Point2]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, g) in instances.iter().enumerate() {
        let d = p.distance(g);
        if best.is_none_or(|(_, b)| d < b) {
            best = Some((i, d));
        }
    }
    best
}

/// Mean absolute difference between predicted and true distances to `instance`
/// over every anchor.
pub fn mppe(preds: &DistancePredictionSet, instance: Point2) -> f64 {
    if preds.anchors.is_empty() {
        return 0.0;
    }
    preds.anchors.iter().map(|a| (a.distance - a.position.distance(&instance)).abs()).sum::<f64>()
        / preds.anchors.len() as f64
}

/// Fraction of localisation errors within `tau` (inclusive).
pub fn lsr(errors: &[f64], tau: f64) -> Result<f64, MetricsError> {
    if !(tau > 0.0) {
        return Err(MetricsError::InvalidThreshold(tau));
    }
    if errors.is_empty() {
        return Err(MetricsError::EmptyEvaluation);
    }
    Ok(errors.iter().filter(|&&e| e <= tau).count() as f64 / errors.len() as f64)
}

/// Mean error over the successful cases; `None` when nothing succeeded.
pub fn msle(errors: &[f64], tau: f64) -> Option<f64> {
    let ok: Vec<f64> = errors.iter().copied().filter(|&e| e <= tau).collect();
    if ok.is_empty() {
        None
    } else {
        Some(ok.iter().sum::<f64>() / ok.len() as f64)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Completeness bin index; 1.0 falls into the last bin.
pub fn completeness_bin(completeness: f64) -> usize {
    ((completeness * COMPLETENESS_BINS as f64).floor() as usize).min(COMPLETENESS_BINS - 1)
}

/// Per-case evaluation result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseOutcome {
    pub scene_id: String,
    pub target: String,
    pub completeness: f64,
    pub position: Point2,
    /// Distance from `position` to the nearest ground-truth instance.
    pub error: f64,
    pub mppe: f64,
}

impl CaseOutcome {
    pub fn new(scene_id: &str, completeness: f64, preds: &DistancePredictionSet, position: Point2, instances: &[Point2]) -> Option<Self> {
        let (g, error) = nearest_instance(position, instances)?;
        Some(Self {
            scene_id: scene_id.to_string(),
            target: preds.target_category.clone(),
            completeness,
            position,
            error,
            mppe: mppe(preds, instances[g]),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletenessBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// Mean localisation error over all cases in the bin.
    pub mae: Option<f64>,
    /// LSR at each of [`THRESHOLDS`].
    pub lsr: Option<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub cases: usize,
    pub mppe: f64,
    /// LSR at each of [`THRESHOLDS`].
    pub lsr: [f64; 3],
    /// At the first threshold.
    pub msle: Option<f64>,
    pub mae: f64,
    pub bins: Vec<CompletenessBin>,
}

impl EvaluationReport {
    pub fn from_cases(cases: &[CaseOutcome]) -> Result<Self, MetricsError> {
        if cases.is_empty() {
            return Err(MetricsError::EmptyEvaluation);
        }
        let errors: Vec<f64> = cases.iter().map(|c| c.error).collect();
        let mppes: Vec<f64> = cases.iter().map(|c| c.mppe).collect();
        let lsr_all = |e: &[f64]| -> Result<[f64; 3], MetricsError> {
            Ok([lsr(e, THRESHOLDS[0])?, lsr(e, THRESHOLDS[1])?, lsr(e, THRESHOLDS[2])?])
        };
        let mut per_bin: Vec<Vec<f64>> = vec![Vec::new(); COMPLETENESS_BINS];
        for c in cases {
            per_bin[completeness_bin(c.completeness)].push(c.error);
        }
        let bins = per_bin
            .iter()
            .enumerate()
            .map(|(b, e)| {
                Ok(CompletenessBin {
                    lo: b as f64 / COMPLETENESS_BINS as f64,
                    hi: (b + 1) as f64 / COMPLETENESS_BINS as f64,
                    count: e.len(),
                    mae: (!e.is_empty()).then(|| mean(e)),
                    lsr: if e.is_empty() { None } else { Some(lsr_all(e)?) },
                })
            })
            .collect::<Result<Vec<_>, MetricsError>>()?;
        Ok(Self {
            cases: cases.len(),
            mppe: mean(&mppes),
            lsr: lsr_all(&errors)?,
            msle: msle(&errors, THRESHOLDS[0]),
            mae: mean(&errors),
            bins,
        })
    }

    /// Key-value summary, then `extra` lines, then the completeness table.
    pub fn to_text(&self, extra: &[(String, String)]) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |v| v.to_string());
        let mut out = String::new();
        let _ = writeln!(out, "cases={}", self.cases);
        let _ = writeln!(out, "mppe={}", self.mppe);
        for (t, v) in THRESHOLDS.iter().zip(self.lsr) {
            let _ = writeln!(out, "lsr@{t}={v}");
        }
        let _ = writeln!(out, "msle={}", opt(self.msle));
        let _ = writeln!(out, "mae={}", self.mae);
        for (k, v) in extra {
            let _ = writeln!(out, "{k}={v}");
        }
        out.push_str("[completeness]\n");
        out.push_str(&self.bins_tsv());
        out
    }

    /// Plot-ready table: one row per completeness bin.
    pub fn bins_tsv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |v| v.to_string());
        let mut out = String::from("bin_lo\tbin_hi\tcount\tmae\tlsr@1\tlsr@2\tlsr@3\n");
        for b in &self.bins {
            let l = b.lsr.map(|l| l.map(Some)).unwrap_or([None; 3]);
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                b.lo,
                b.hi,
                b.count,
                opt(b.mae),
                opt(l[0]),
                opt(l[1]),
                opt(l[2])
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prediction::AnchorPrediction;

    fn case(error: f64, completeness: f64) -> CaseOutcome {
        CaseOutcome {
            scene_id: "s".into(),
            target: "t".into(),
            completeness,
            position: Point2::new(0.0, 0.0),
            error,
            mppe: 0.0,
        }
    }

    #[test]
    fn mppe_examples() {
        let preds = DistancePredictionSet {
            target_node: 2,
            target_category: "t".into(),
            anchors: vec![
                AnchorPrediction { node: 0, category: "a".into(), position: Point2::new(1.0, 0.0), distance: 1.5 },
                AnchorPrediction { node: 1, category: "b".into(), position: Point2::new(0.0, 2.0), distance: 1.0 },
            ],
        };
        assert_eq!(mppe(&preds, Point2::new(0.0, 0.0)), 0.75);
        let mut exact = preds.clone();
        exact.anchors[0].distance = 1.0;
        exact.anchors[1].distance = 2.0;
        assert_eq!(mppe(&exact, Point2::new(0.0, 0.0)), 0.0);
    }

    #[test]
    fn lsr_and_msle_examples() {
        let (_, e) = nearest_instance(Point2::new(0.0, 0.0), &[Point2::new(0.5, 0.0)]).unwrap();
        assert_eq!(lsr(&[e], 1.0), Ok(1.0));
        assert_eq!(lsr(&[1.0], 1.0), Ok(1.0));
        assert_eq!(lsr(&[], 1.0), Err(MetricsError::EmptyEvaluation));
        assert!(lsr(&[0.5], 0.0).is_err());
        assert_eq!(msle(&[0.3, 0.9, 1.5], 1.0), Some(0.6));
        assert_eq!(msle(&[1.2, 4.0], 1.0), None);
    }

    #[test]
    fn nearest_instance_ties_go_low() {
        let inst = [Point2::new(1.0, 0.0), Point2::new(-1.0, 0.0), Point2::new(0.0, 0.5)];
        assert_eq!(nearest_instance(Point2::new(0.0, 0.0), &inst[..2]), Some((0, 1.0)));
        assert_eq!(nearest_instance(Point2::new(0.0, 0.0), &inst), Some((2, 0.5)));
        assert_eq!(nearest_instance(Point2::new(0.0, 0.0), &[]), None);
    }

    #[test]
    fn bins_and_report() {
        assert_eq!(completeness_bin(0.45), 4);
        assert_eq!(completeness_bin(0.0), 0);
        assert_eq!(completeness_bin(1.0), 9);
        let cases = [case(0.5, 0.45), case(2.5, 0.41), case(1.5, 0.95), case(3.5, 1.0)];
        let r = EvaluationReport::from_cases(&cases).unwrap();
        assert_eq!(r.cases, 4);
        assert_eq!(r.lsr, [0.25, 0.5, 0.75]);
        assert_eq!(r.mae, 2.0);
        assert_eq!(r.msle, Some(0.5));
        assert_eq!(r.bins[4].count, 2);
        assert_eq!(r.bins[4].mae, Some(1.5));
        assert_eq!(r.bins[9].lsr, Some([0.0, 0.5, 0.5]));
        assert_eq!(r.bins[0].count, 0);
        assert_eq!(r.bins[0].mae, None);
        assert_eq!(r.bins.iter().map(|b| b.count).sum::<usize>(), 4);
        let text = r.to_text(&[("model".into(), "x".into())]);
        assert!(text.contains("lsr@1=0.25\n"));
        assert!(text.contains("model=x\n"));
        assert!(text.contains("0.4\t0.5\t2\t1.5\t0.5\t0.5\t1\n"));
        assert_eq!(EvaluationReport::from_cases(&[]), Err(MetricsError::EmptyEvaluation));
    }
}

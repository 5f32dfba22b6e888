//! Predict, localise and score a list of cases.

use rayon::prelude::*;
use thiserror::Error;

use crate::dataset::Case;
use crate::localiser::{localise, LocaliserConfig};
use crate::metrics::{CaseOutcome, EvaluationReport, MetricsError};
use crate::model::DistancePredictor;
use crate::ppn::PpnError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("scene `{scene}`, target `{target}`: {source}")]
    Case {
        scene: String,
        target: String,
        #[source]
        source: PpnError,
    },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Outcome of every case, in input order. Cases are processed in parallel.
pub fn evaluate_cases<P: DistancePredictor + ?Sized>(
    predictor: &P,
    cases: &[Case],
    localiser: &LocaliserConfig,
) -> Result<Vec<CaseOutcome>, EvalError> {
    cases
        .par_iter()
        .map(|case| {
            let wrap = |source: PpnError| EvalError::Case {
                scene: case.scene.scene_id.clone(),
                target: case.target_category().to_string(),
                source,
            };
            let preds = predictor.predict(&case.scene, case.target_category()).map_err(wrap)?;
            let result = localise(&preds, localiser).map_err(|e| wrap(e.into()))?;
            CaseOutcome::new(&case.scene.scene_id, case.scene.completeness, &preds, result.position, case.gt_positions())
                .ok_or_else(|| wrap(PpnError::NoInstance(case.target_category().to_string())))
        })
        .collect()
}

pub fn evaluate<P: DistancePredictor + ?Sized>(
    predictor: &P,
    cases: &[Case],
    localiser: &LocaliserConfig,
) -> Result<EvaluationReport, EvalError> {
    Ok(EvaluationReport::from_cases(&evaluate_cases(predictor, cases, localiser)?)?)
}

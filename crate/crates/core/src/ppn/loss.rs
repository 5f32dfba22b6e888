use crate::geometry::Point2;
use crate::localiser::{localise_anchors, LocaliserConfig};
use crate::prediction::keep_mask;
use crate::tensor::{Tape, Tensor, Var};

use super::PpnError;

/// How the supervising instance is chosen when a target has several.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InstanceSelection {
    /// Instance closest to the position localised from the predictions.
    #[default]
    Localised,
    /// Instance whose true distance vector is closest to the predictions.
    DistanceError,
}

/// Exact distances from `point` to each anchor.
pub fn supervision_distances(anchors: &[Point2], point: Point2) -> Vec<f64> {
    anchors.iter().map(|a| a.distance(&point)).collect()
}

/// Index of the ground-truth instance that supervises `predicted`; ties go
/// to the lowest index.
pub fn select_instance(
    predicted: &[f64],
    anchors: &[Point2],
    instances: &[Point2],
    mode: InstanceSelection,
    localiser: &LocaliserConfig,
) -> Result<usize, PpnError> {
    if instances.len() == 1 {
        return Ok(0);
    }
    let scores: Vec<f64> = match mode {
        InstanceSelection::Localised => {
            let keep = keep_mask(predicted, localiser.cutoff, localiser.min_anchors);
            let kept: Vec<(Point2, f64)> = anchors
                .iter()
                .zip(predicted)
                .zip(keep)
                .filter(|(_, k)| *k)
                .map(|((&a, &d), _)| (a, d))
                .collect();
            let (p, ..) = localise_anchors(&kept, localiser)?;
            instances.iter().map(|g| p.distance(g)).collect()
        }
        InstanceSelection::DistanceError => instances
            .iter()
            .map(|&g| supervision_distances(anchors, g).iter().zip(predicted).map(|(d, p)| (d - p) * (d - p)).sum())
            .collect(),
    };
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s < scores[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Mean squared error between the predicted `distances` (a column) and the exact
/// distances to the selected instance. Returns the loss and the instance.
pub fn case_loss(
    tape: &mut Tape,
    distances: Var,
    anchor_positions: &[Point2],
    instances: &[Point2],
    target: &str,
    mode: InstanceSelection,
    localiser: &LocaliserConfig,
) -> Result<(Var, usize), PpnError> {
    if instances.is_empty() {
        return Err(PpnError::NoInstance(target.to_string()));
    }
    let predicted = tape.value(distances).data().to_vec();
    let g = select_instance(&predicted, anchor_positions, instances, mode, localiser)?;
    let truth = tape.constant(Tensor::column(&supervision_distances(anchor_positions, instances[g])));
    Ok((tape.mse(distances, truth)?, g))
}

use crate::geometry::Point2;

/// Predicted distance from the target to one observed object.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorPrediction {
    /// Graph node id of the observed object.
    pub node: usize,
    pub category: String,
    pub position: Point2,
    pub distance: f64,
}

/// One prediction per observed object for a single target.
#[derive(Debug, Clone, PartialEq)]
pub struct DistancePredictionSet {
    pub target_node: usize,
    pub target_category: String,
    pub anchors: Vec<AnchorPrediction>,
}

impl DistancePredictionSet {
    pub fn distances(&self) -> Vec<f64> {
        self.anchors.iter().map(|a| a.distance).collect()
    }

    /// Whether each anchor survives the distance cutoff; see [`keep_mask`].
    pub fn kept(&self, cutoff: f64, min_anchors: usize) -> Vec<bool> {
        keep_mask(&self.distances(), cutoff, min_anchors)
    }
}

/// Whether each distance is within `cutoff`. When fewer than `min_anchors`
/// are, the `min_anchors` smallest distances are kept instead.
pub fn keep_mask(distances: &[f64], cutoff: f64, min_anchors: usize) -> Vec<bool> {
    let kept: Vec<bool> = distances.iter().map(|&d| d <= cutoff).collect();
    if kept.iter().filter(|&&k| k).count() >= min_anchors {
        return kept;
    }
    let mut order: Vec<usize> = (0..distances.len()).collect();
    order.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]).then(a.cmp(&b)));
    let mut fallback = vec![false; distances.len()];
    for &i in order.iter().take(min_anchors) {
        fallback[i] = true;
    }
    fallback
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(d: &[f64]) -> DistancePredictionSet {
        DistancePredictionSet {
            target_node: d.len(),
            target_category: "t".into(),
            anchors: d
                .iter()
                .enumerate()
                .map(|(i, &distance)| AnchorPrediction {
                    node: i,
                    category: "a".into(),
                    position: Point2::new(i as f64, 0.0),
                    distance,
                })
                .collect(),
        }
    }

    #[test]
    fn cutoff_and_fallback() {
        assert_eq!(set(&[1.0, 6.0, 2.0, 4.9]).kept(5.0, 3), vec![true, false, true, true]);
        assert_eq!(set(&[7.0, 6.0, 2.0, 9.0]).kept(5.0, 3), vec![true, true, true, false]);
        assert_eq!(set(&[5.0, 5.0, 5.0]).kept(5.0, 3), vec![true; 3]);
    }
}

//! Scene records, file I/O, splitting and the synthetic scene generator.

mod generator;
mod records;
mod split;

pub use generator::{
    generate, pairwise_distance_mean, Archetype, CategorySpec, DistanceLaw, GeneratedCorpus,
    GeneratorSpec, Zone,
};
pub use records::{
    parse_scenes, read_scenes, scenes_to_string, validate_record, write_scenes, SceneObject,
    SceneRecord, TargetSpec,
};
pub use split::{group_key, split};

use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("scene `{scene}`: {rule}")]
    InvariantViolation { scene: String, rule: String },
    #[error("generator spec: {0}")]
    Spec(String),
}

/// One localisation problem: a scene record and one of its target categories.
#[derive(Debug, Clone)]
pub struct Case {
    pub scene: Arc<SceneRecord>,
    pub target: usize,
}

impl Case {
    pub fn target_spec(&self) -> &TargetSpec {
        &self.scene.targets[self.target]
    }

    pub fn target_category(&self) -> &str {
        &self.scene.targets[self.target].category
    }

    pub fn gt_positions(&self) -> &[crate::geometry::Point2] {
        &self.scene.targets[self.target].gt_positions
    }
}

/// Every (scene, target) pair, grouped per scene.
pub fn cases_by_scene(records: &[SceneRecord]) -> Vec<Vec<Case>> {
    records
        .iter()
        .map(|r| {
            let scene = Arc::new(r.clone());
            (0..r.targets.len()).map(|t| Case { scene: scene.clone(), target: t }).collect()
        })
        .collect()
}

/// Every (scene, target) pair, flattened in record order.
pub fn cases(records: &[SceneRecord]) -> Vec<Case> {
    cases_by_scene(records).into_iter().flatten().collect()
}

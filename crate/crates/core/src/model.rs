//! Common interface of everything that predicts target-to-object distances.

use std::sync::Arc;

use crate::dataset::SceneRecord;
use crate::graph::{EdgeKind, GraphError};
use crate::knowledge::{EmbeddingTable, KnowledgeSnapshot};
use crate::ppn::{PpnError, PpnModel};
use crate::prediction::{AnchorPrediction, DistancePredictionSet};
use crate::tensor::{ParameterSet, Tape, Var};

/// Predicts one distance per observed object of a scene, in record order.
pub trait DistancePredictor: Sync {
    fn predict(&self, scene: &SceneRecord, target: &str) -> Result<DistancePredictionSet, PpnError>;
}

/// A differentiable predictor the trainer can optimise.
pub trait DistanceModel: Sync + Clone {
    fn parameters(&self) -> &ParameterSet;
    fn parameters_mut(&mut self) -> &mut ParameterSet;
    /// Record the forward pass for one case; returns an `objects × 1` column.
    /// `vars` come from [`bind_parameters`] on the same tape.
    fn forward_case(&self, tape: &mut Tape, vars: &[Var], scene: &SceneRecord, target: &str) -> Result<Var, PpnError>;
}

/// Record every parameter on `tape` in parameter order.
pub fn bind_parameters(params: &ParameterSet, tape: &mut Tape, trainable: bool) -> Result<Vec<Var>, PpnError> {
    let mut vars = Vec::with_capacity(params.len());
    for (id, (_, t)) in params.iter().enumerate() {
        vars.push(tape.leaf(t.clone(), trainable && params.is_trainable(id))?);
    }
    Ok(vars)
}

/// Attach distances (record order) to the scene's objects.
pub fn scene_predictions(scene: &SceneRecord, target: &str, distances: &[f64]) -> DistancePredictionSet {
    DistancePredictionSet {
        target_node: scene.objects.len(),
        target_category: target.to_string(),
        anchors: scene
            .objects
            .iter()
            .zip(distances)
            .enumerate()
            .map(|(node, (o, &distance))| AnchorPrediction {
                node,
                category: o.category.clone(),
                position: o.position,
                distance,
            })
            .collect(),
    }
}

impl<M: DistanceModel> DistancePredictor for M {
    fn predict(&self, scene: &SceneRecord, target: &str) -> Result<DistancePredictionSet, PpnError> {
        let mut tape = Tape::new();
        let vars = bind_parameters(self.parameters(), &mut tape, false)?;
        let out = self.forward_case(&mut tape, &vars, scene, target)?;
        Ok(scene_predictions(scene, target, tape.value(out).data()))
    }
}

/// A [`PpnModel`] together with the knowledge and embeddings it reads.
#[derive(Debug, Clone)]
pub struct PpnPredictor {
    pub model: PpnModel,
    pub kb: Option<Arc<KnowledgeSnapshot>>,
    pub embeddings: Option<Arc<EmbeddingTable>>,
    /// Evaluate-time edge filter; `None` keeps the model's own kinds.
    pub edge_filter: Option<Vec<EdgeKind>>,
}

impl PpnPredictor {
    pub fn new(model: PpnModel, kb: Option<Arc<KnowledgeSnapshot>>, embeddings: Option<Arc<EmbeddingTable>>) -> Self {
        Self { model, kb, embeddings, edge_filter: None }
    }
}

impl DistanceModel for PpnPredictor {
    fn parameters(&self) -> &ParameterSet {
        self.model.params()
    }

    fn parameters_mut(&mut self) -> &mut ParameterSet {
        self.model.params_mut()
    }

    fn forward_case(&self, tape: &mut Tape, vars: &[Var], scene: &SceneRecord, target: &str) -> Result<Var, PpnError> {
        let mut graph = self.model.case_graph(scene, target, self.kb.as_deref())?;
        if let Some(kinds) = &self.edge_filter {
            graph = graph.restrict(kinds);
        }
        let pass = self.model.forward(tape, vars, &graph, self.embeddings.as_deref())?;
        if pass.anchors.len() != scene.objects.len() {
            return Err(PpnError::Graph(GraphError::TooFewAnchors {
                scene: scene.scene_id.clone(),
                found: pass.anchors.len(),
            }));
        }
        Ok(pass.distances)
    }
}

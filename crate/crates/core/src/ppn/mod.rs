//! Graph attention network predicting target-to-object distances.
//!
//! Each round runs multi-head attention over graph neighbours with edge
//! features added to keys and values, then mixes the aggregate with a
//! projection of the node's own state through a learned scalar gate. A small
//! MLP maps each (anchor, target) pair of final states to a distance.

mod checkpoint;
mod config;
mod loss;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use config::{EmbeddingMode, PpnConfig};
pub use loss::{case_loss, select_instance, supervision_distances, InstanceSelection};

use std::collections::{BTreeSet, HashMap};
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dataset::SceneRecord;
use crate::graph::{build_spatial_graph, enrich_with_commonsense, EdgeKind, GraphError, Node, SpatialCommonsenseGraph};
use crate::knowledge::{EmbeddingTable, KnowledgeSnapshot};
use crate::localiser::LocaliseError;
use crate::prediction::{AnchorPrediction, DistancePredictionSet};
use crate::tensor::{ParameterSet, Tape, Tensor, TensorError, Var};

/// Row of the learned embedding table used for tokens outside the vocabulary.
pub const UNKNOWN_TOKEN: &str = "<unk>";

#[derive(Debug, Error)]
pub enum PpnError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Localise(#[from] LocaliseError),
    #[error("pretrained mode needs an embedding table")]
    MissingEmbeddings,
    #[error("embedding table has dimension {found}, model expects {expected}")]
    EmbeddingDim { expected: usize, found: usize },
    #[error("no ground-truth instance for target `{0}`")]
    NoInstance(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct RoundIds {
    w_q: usize,
    w_k: usize,
    w_v: usize,
    b_v: usize,
    w_e: usize,
    b_e: usize,
    w_r: usize,
    b_r: usize,
    w_g: usize,
    b_g: usize,
    ln_gamma: usize,
    ln_beta: usize,
}

const ROUND_TENSORS: [&str; 12] =
    ["w_q", "w_k", "w_v", "b_v", "w_e", "b_e", "w_r", "b_r", "w_g", "b_g", "ln_gamma", "ln_beta"];

/// Configuration, parameters and (in learned mode) the token vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct PpnModel {
    config: PpnConfig,
    params: ParameterSet,
    vocab: Vec<String>,
    vocab_index: HashMap<String, usize>,
    rounds: Vec<RoundIds>,
    head: Vec<(usize, usize)>,
    embedding: Option<usize>,
}

/// Values recorded by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// `a × 1` predicted distances, one row per anchor.
    pub distances: Var,
    /// Anchor node ids, in row order of `distances`.
    pub anchors: Vec<usize>,
    /// Per round, `m × heads` attention weights over directed edges.
    pub attention: Vec<Var>,
    /// Receiving node of each directed edge.
    pub destinations: Rc<[usize]>,
    /// Sending node of each directed edge.
    pub sources: Rc<[usize]>,
    /// Final node representations.
    pub states: Var,
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-limit..=limit)).collect())
}

impl PpnModel {
    /// Freshly initialised model. `vocab` lists the tokens given their own
    /// learned row; it is ignored in pretrained mode.
    pub fn new(config: PpnConfig, vocab: &[String]) -> Result<Self, PpnError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParameterSet::new();
        let mut din = config.input_dim;
        for (r, &d) in config.widths.iter().enumerate() {
            let dh = d / config.heads;
            let shapes: [(usize, usize, bool); 12] = [
                (din, d, true),
                (din, d, true),
                (din, d, true),
                (1, d, false),
                (4, d, true),
                (1, d, false),
                (din, d, true),
                (1, d, false),
                (3 * d, 1, true),
                (1, 1, false),
                (1, d, false),
                (1, d, false),
            ];
            for (name, (rows, cols, weight)) in ROUND_TENSORS.iter().zip(shapes) {
                let t = if *name == "w_e" {
                    // one 4 → d_head projection per head, side by side
                    let mut t = Tensor::zeros(4, d);
                    for h in 0..config.heads {
                        let block = xavier(&mut rng, 4, dh);
                        for i in 0..4 {
                            t.data_mut()[i * d + h * dh..i * d + (h + 1) * dh].copy_from_slice(block.row_slice(i));
                        }
                    }
                    t
                } else if weight {
                    xavier(&mut rng, rows, cols)
                } else if *name == "ln_gamma" {
                    Tensor::filled(rows, cols, 1.0)
                } else {
                    Tensor::zeros(rows, cols)
                };
                params.insert(format!("round{r}.{name}"), t, true);
            }
            din = d;
        }
        let mut width = 2 * config.final_dim();
        for (k, &h) in config.mlp_hidden.iter().chain(std::iter::once(&1)).enumerate() {
            params.insert(format!("head.{k}.weight"), xavier(&mut rng, width, h), true);
            params.insert(format!("head.{k}.bias"), Tensor::zeros(1, h), true);
            width = h;
        }
        let mut tokens = Vec::new();
        if config.embedding_mode == EmbeddingMode::Learned {
            tokens.push(UNKNOWN_TOKEN.to_string());
            let mut rest: Vec<String> = vocab.iter().filter(|t| t.as_str() != UNKNOWN_TOKEN).cloned().collect();
            rest.sort();
            rest.dedup();
            tokens.extend(rest);
            let n = tokens.len() * config.input_dim;
            let table = Tensor::from_vec(tokens.len(), config.input_dim, (0..n).map(|_| rng.random_range(-0.05..=0.05)).collect());
            params.insert("embedding", table, true);
        }
        Self::assemble(config, params, tokens)
    }

    /// Rebuild from stored parts, checking every tensor shape against `config`.
    pub fn from_parts(config: PpnConfig, params: ParameterSet, vocab: Vec<String>) -> Result<Self, PpnError> {
        config.validate()?;
        let reference = PpnModel::new(config.clone(), &vocab)?;
        if reference.vocab != vocab {
            return Err(PpnError::Checkpoint("vocabulary is not sorted or lacks the unknown token".into()));
        }
        if reference.params.len() != params.len() {
            return Err(PpnError::Checkpoint(format!(
                "expected {} tensors, found {}",
                reference.params.len(),
                params.len()
            )));
        }
        for (name, t) in reference.params.iter() {
            let found = params.get(name).ok_or_else(|| PpnError::Checkpoint(format!("missing tensor `{name}`")))?;
            if found.shape() != t.shape() {
                return Err(PpnError::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    found.shape(),
                    t.shape()
                )));
            }
        }
        Self::assemble(config, params, vocab)
    }

    fn assemble(config: PpnConfig, params: ParameterSet, vocab: Vec<String>) -> Result<Self, PpnError> {
        let id = |name: String| params.id(&name).ok_or_else(|| PpnError::Checkpoint(format!("missing tensor `{name}`")));
        let mut rounds = Vec::new();
        for r in 0..config.rounds() {
            let t = |n: &str| id(format!("round{r}.{n}"));
            rounds.push(RoundIds {
                w_q: t("w_q")?,
                w_k: t("w_k")?,
                w_v: t("w_v")?,
                b_v: t("b_v")?,
                w_e: t("w_e")?,
                b_e: t("b_e")?,
                w_r: t("w_r")?,
                b_r: t("b_r")?,
                w_g: t("w_g")?,
                b_g: t("b_g")?,
                ln_gamma: t("ln_gamma")?,
                ln_beta: t("ln_beta")?,
            });
        }
        let head = (0..=config.mlp_hidden.len())
            .map(|k| Ok((id(format!("head.{k}.weight"))?, id(format!("head.{k}.bias"))?)))
            .collect::<Result<Vec<_>, PpnError>>()?;
        let embedding = match config.embedding_mode {
            EmbeddingMode::Learned => Some(id("embedding".into())?),
            EmbeddingMode::Pretrained => None,
        };
        let vocab_index = vocab.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(Self { config, params, vocab, vocab_index, rounds, head, embedding })
    }

    pub fn config(&self) -> &PpnConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    /// Record every parameter on `tape`, in parameter order.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Vec<Var>, PpnError> {
        crate::model::bind_parameters(&self.params, tape, trainable)
    }

    /// Build the graph this model consumes for one target in `scene`.
    pub fn case_graph(
        &self,
        scene: &SceneRecord,
        target_category: &str,
        kb: Option<&KnowledgeSnapshot>,
    ) -> Result<SpatialCommonsenseGraph, PpnError> {
        let graph = build_spatial_graph(scene, target_category)?;
        Ok(match kb {
            Some(kb) => enrich_with_commonsense(graph, kb, &self.config.edge_kinds),
            None => graph,
        })
    }

    fn input_features(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        graph: &SpatialCommonsenseGraph,
        table: Option<&EmbeddingTable>,
    ) -> Result<Var, PpnError> {
        match self.embedding {
            Some(emb) => {
                let unk = self.vocab_index[UNKNOWN_TOKEN];
                let rows: Vec<usize> =
                    graph.nodes().iter().map(|n| self.vocab_index.get(n.token()).copied().unwrap_or(unk)).collect();
                Ok(tape.gather_rows(vars[emb], Rc::from(rows))?)
            }
            None => {
                let table = table.ok_or(PpnError::MissingEmbeddings)?;
                if table.dim() != self.config.input_dim {
                    return Err(PpnError::EmbeddingDim { expected: self.config.input_dim, found: table.dim() });
                }
                let mut data = Vec::with_capacity(graph.len() * table.dim());
                for n in graph.nodes() {
                    data.extend_from_slice(table.embed(n.token()));
                }
                Ok(tape.constant(Tensor::from_vec(graph.len(), table.dim(), data)))
            }
        }
    }

    /// Run all rounds and the pair head on `graph`. `vars` must come from
    /// [`PpnModel::bind`] on the same tape.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        graph: &SpatialCommonsenseGraph,
        table: Option<&EmbeddingTable>,
    ) -> Result<ForwardPass, PpnError> {
        let n = graph.len();
        let mut src = Vec::with_capacity(2 * graph.edges().len());
        let mut dst = Vec::with_capacity(2 * graph.edges().len());
        let mut feats = Vec::with_capacity(8 * graph.edges().len());
        for e in graph.edges() {
            for (s, d) in [(e.a, e.b), (e.b, e.a)] {
                src.push(s);
                dst.push(d);
                feats.extend_from_slice(&e.feature.to_array());
            }
        }
        let m = src.len();
        let src: Rc<[usize]> = Rc::from(src);
        let dst: Rc<[usize]> = Rc::from(dst);
        let edge_features = tape.constant(Tensor::from_vec(m, 4, feats));

        let h0 = self.input_features(tape, vars, graph, table)?;
        let mut h = h0;
        let mut attention = Vec::with_capacity(self.rounds.len());
        let heads = self.config.heads;
        for (r, ids) in self.rounds.iter().enumerate() {
            let d = self.config.widths[r];
            let dh = d / heads;
            let p = |i: usize| vars[i];
            // d × H head indicator and its transpose
            let mut sum_heads = Tensor::zeros(d, heads);
            let mut spread = Tensor::zeros(heads, d);
            for c in 0..d {
                sum_heads.data_mut()[c * heads + c / dh] = 1.0;
                spread.data_mut()[(c / dh) * d + c] = 1.0;
            }
            let sum_heads = tape.constant(sum_heads);
            let spread = tape.constant(spread);

            let q = tape.matmul(h, p(ids.w_q))?;
            let k = tape.matmul(h, p(ids.w_k))?;
            let v = tape.matmul(h, p(ids.w_v))?;
            let v = tape.add_row(v, p(ids.b_v))?;
            let eps = tape.matmul(edge_features, p(ids.w_e))?;
            let eps = tape.add_row(eps, p(ids.b_e))?;

            let q_dst = tape.gather_rows(q, dst.clone())?;
            let k_src = tape.gather_rows(k, src.clone())?;
            let k_src = tape.add(k_src, eps)?;
            let v_src = tape.gather_rows(v, src.clone())?;
            let v_src = tape.add(v_src, eps)?;

            let prod = tape.mul(q_dst, k_src)?;
            let logits = tape.matmul(prod, sum_heads)?;
            let logits = tape.scale(logits, 1.0 / (dh as f64).sqrt())?;
            let alpha = tape.segment_softmax(logits, dst.clone(), n)?;
            attention.push(alpha);
            let alpha_wide = tape.matmul(alpha, spread)?;
            let messages = tape.mul(alpha_wide, v_src)?;
            let aggregated = tape.segment_sum(messages, dst.clone(), n)?;

            let residual = tape.matmul(h, p(ids.w_r))?;
            let residual = tape.add_row(residual, p(ids.b_r))?;
            let gap = tape.sub(aggregated, residual)?;
            let gate_in = tape.concat_cols(&[aggregated, residual, gap])?;
            let gate = tape.matmul(gate_in, p(ids.w_g))?;
            let gate = tape.add_row(gate, p(ids.b_g))?;
            let gate = tape.sigmoid(gate)?;
            // (1 − β)ĥ + βr = ĥ + β(r − ĥ)
            let towards = tape.scale(gap, -1.0)?;
            let towards = tape.mul_col(towards, gate)?;
            let mixed = tape.add(aggregated, towards)?;
            let normed = tape.layer_norm(mixed, p(ids.ln_gamma), p(ids.ln_beta))?;
            h = tape.relu(normed)?;
        }
        let states = if self.config.concat_final { tape.concat_cols(&[h0, h])? } else { h };

        let anchors = graph.anchors();
        let target_rows: Rc<[usize]> = Rc::from(vec![graph.target(); anchors.len()]);
        let anchor_states = tape.gather_rows(states, Rc::from(anchors.clone()))?;
        let target_states = tape.gather_rows(states, target_rows)?;
        let mut x = tape.concat_cols(&[anchor_states, target_states])?;
        for (k, &(w, b)) in self.head.iter().enumerate() {
            x = tape.matmul(x, vars[w])?;
            x = tape.add_row(x, vars[b])?;
            if k + 1 < self.head.len() {
                x = tape.relu(x)?;
            }
        }
        let distances = tape.softplus(x)?;
        Ok(ForwardPass { distances, anchors, attention, destinations: dst, sources: src, states })
    }

    /// Predicted distance from the target to every observed object.
    pub fn predict(
        &self,
        graph: &SpatialCommonsenseGraph,
        table: Option<&EmbeddingTable>,
    ) -> Result<DistancePredictionSet, PpnError> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false)?;
        let pass = self.forward(&mut tape, &vars, graph, table)?;
        Ok(prediction_set(graph, &pass.anchors, tape.value(pass.distances).data()))
    }
}

/// Pair predicted distances with anchor metadata from `graph`.
pub fn prediction_set(graph: &SpatialCommonsenseGraph, anchors: &[usize], distances: &[f64]) -> DistancePredictionSet {
    DistancePredictionSet {
        target_node: graph.target(),
        target_category: graph.target_category().to_string(),
        anchors: anchors
            .iter()
            .zip(distances)
            .map(|(&node, &distance)| {
                let Node::Object(o) = &graph.nodes()[node] else { unreachable!("anchors are objects") };
                AnchorPrediction {
                    node,
                    category: o.category.clone(),
                    position: o.position.expect("observed objects have positions"),
                    distance,
                }
            })
            .collect(),
    }
}

/// Tokens given their own learned row: every object and target category in
/// `records` plus the concepts `kb` links them to through `kinds`.
pub fn learned_vocabulary(records: &[SceneRecord], kb: Option<&KnowledgeSnapshot>, kinds: &[EdgeKind]) -> Vec<String> {
    let mut tokens: BTreeSet<String> = BTreeSet::new();
    for r in records {
        tokens.extend(r.objects.iter().map(|o| o.category.clone()));
        tokens.extend(r.targets.iter().map(|t| t.category.clone()));
    }
    if let Some(kb) = kb {
        let categories: Vec<String> = tokens.iter().cloned().collect();
        for c in &categories {
            for &k in kinds.iter().filter(|k| k.is_semantic()) {
                tokens.extend(kb.query(c, k).into_iter().map(|(concept, _)| concept));
            }
        }
    }
    tokens.into_iter().collect()
}

/// Edge kinds named in a comma-separated list.
pub fn parse_edge_kinds(list: &str) -> Option<Vec<EdgeKind>> {
    let mut kinds = list.split(',').map(EdgeKind::parse).collect::<Option<Vec<_>>>()?;
    kinds.sort();
    kinds.dedup();
    Some(kinds)
}

#[cfg(test)]
mod tests;

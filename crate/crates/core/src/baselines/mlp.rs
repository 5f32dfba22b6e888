use std::collections::{BTreeSet, HashMap, HashSet};
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::SceneRecord;
use crate::graph::EdgeKind;
use crate::knowledge::KnowledgeSnapshot;
use crate::model::DistanceModel;
use crate::ppn::PpnError;
use crate::tensor::{ParameterSet, Tape, Tensor, Var};

use super::BaselineError;

pub const DEFAULT_HIDDEN: [usize; 2] = [256, 256];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MlpInput {
    /// One-hot category vectors.
    Plain,
    /// One-hot vectors averaged with those of the category's concepts.
    WithCommonsense,
}

/// Maps (target category, observed category) to a distance, ignoring layout.
#[derive(Debug, Clone)]
pub struct PairwiseMlp {
    input: MlpInput,
    vocab: Vec<String>,
    features: HashMap<String, Vec<f64>>,
    params: ParameterSet,
    layers: Vec<(usize, usize)>,
    warned: Arc<Mutex<HashSet<String>>>,
}

impl PairwiseMlp {
    /// `categories` fixes the vocabulary; `kb` is required for
    /// [`MlpInput::WithCommonsense`].
    pub fn new(
        input: MlpInput,
        categories: &[String],
        kb: Option<&KnowledgeSnapshot>,
        hidden: &[usize],
        seed: u64,
    ) -> Result<Self, BaselineError> {
        let categories: BTreeSet<String> = categories.iter().cloned().collect();
        if categories.is_empty() {
            return Err(BaselineError::EmptyDataset);
        }
        let mut neighbours: HashMap<String, BTreeSet<String>> = HashMap::new();
        let mut tokens = categories.clone();
        if input == MlpInput::WithCommonsense {
            let kb = kb.ok_or(BaselineError::MissingKnowledge)?;
            for c in &categories {
                let set = neighbours.entry(c.clone()).or_default();
                for rel in EdgeKind::SEMANTIC {
                    set.extend(kb.query(c, rel).into_iter().map(|(concept, _)| concept));
                }
                tokens.extend(set.iter().cloned());
            }
        }
        let vocab: Vec<String> = tokens.into_iter().collect();
        let index: HashMap<&str, usize> = vocab.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
        let features = categories
            .iter()
            .map(|c| {
                let mut v = vec![0.0; vocab.len()];
                let members: Vec<&str> = std::iter::once(c.as_str())
                    .chain(neighbours.get(c).into_iter().flatten().map(String::as_str))
                    .collect();
                for m in &members {
                    v[index[m]] += 1.0 / members.len() as f64;
                }
                (c.clone(), v)
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new();
        let mut layers = Vec::new();
        let mut width = 2 * vocab.len();
        for (k, &h) in hidden.iter().chain(std::iter::once(&1)).enumerate() {
            let limit = (6.0 / (width + h) as f64).sqrt();
            let w = Tensor::from_vec(width, h, (0..width * h).map(|_| rng.random_range(-limit..=limit)).collect());
            let wi = params.insert(format!("mlp.{k}.weight"), w, true);
            let bi = params.insert(format!("mlp.{k}.bias"), Tensor::zeros(1, h), true);
            layers.push((wi, bi));
            width = h;
        }
        Ok(Self { input, vocab, features, params, layers, warned: Arc::default() })
    }

    pub fn input(&self) -> MlpInput {
        self.input
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    /// Input vector of `category`; zeros (with a one-time warning) when the
    /// category was not in the training vocabulary.
    pub fn category_feature(&self, category: &str) -> Vec<f64> {
        match self.features.get(category) {
            Some(v) => v.clone(),
            None => {
                let mut warned = self.warned.lock().unwrap_or_else(|e| e.into_inner());
                if warned.insert(category.to_string()) {
                    log::warn!("category `{category}` unseen in training; using a zero input");
                }
                vec![0.0; self.vocab.len()]
            }
        }
    }
}

/// Every object and target category in `records`.
pub fn record_categories(records: &[SceneRecord]) -> Vec<String> {
    let mut set = BTreeSet::new();
    for r in records {
        set.extend(r.objects.iter().map(|o| o.category.clone()));
        set.extend(r.targets.iter().map(|t| t.category.clone()));
    }
    set.into_iter().collect()
}

impl DistanceModel for PairwiseMlp {
    fn parameters(&self) -> &ParameterSet {
        &self.params
    }

    fn parameters_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    fn forward_case(&self, tape: &mut Tape, vars: &[Var], scene: &SceneRecord, target: &str) -> Result<Var, PpnError> {
        let t = self.category_feature(target);
        let mut data = Vec::with_capacity(scene.objects.len() * 2 * self.vocab.len());
        for o in &scene.objects {
            data.extend_from_slice(&t);
            data.extend(self.category_feature(&o.category));
        }
        let mut x = tape.constant(Tensor::from_vec(scene.objects.len(), 2 * self.vocab.len(), data));
        for (k, &(w, b)) in self.layers.iter().enumerate() {
            x = tape.matmul(x, vars[w])?;
            x = tape.add_row(x, vars[b])?;
            if k + 1 < self.layers.len() {
                x = tape.relu(x)?;
            }
        }
        Ok(tape.softplus(x)?)
    }
}

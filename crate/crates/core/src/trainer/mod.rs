//! Per-case gradient descent with Adafactor, validation and model selection.

mod adafactor;

pub use adafactor::{Adafactor, AdafactorConfig};

use std::collections::HashSet;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{cases, group_key, Case, SceneRecord};
use crate::evaluation::{evaluate, EvalError};
use crate::localiser::LocaliserConfig;
use crate::model::{bind_parameters, DistanceModel};
use crate::ppn::{case_loss, InstanceSelection, PpnError};
use crate::tensor::Tape;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training set has no usable cases")]
    EmptyDataset,
    #[error("scene group `{0}` appears in both the training and validation sets")]
    SplitLeak(String),
    #[error("non-finite gradient in `{0}`")]
    NonFiniteGradient(String),
    #[error("scene `{scene}`: {source}")]
    Model {
        scene: String,
        #[source]
        source: PpnError,
    },
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("epoch callback failed: {0}")]
    Callback(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub seed: u64,
    pub optimiser: AdafactorConfig,
    /// Visit training scenes in a fresh random order each epoch.
    pub shuffle: bool,
    /// Fraction of scene groups held out for validation when splitting.
    pub val_fraction: f64,
    pub selection: InstanceSelection,
    pub localiser: LocaliserConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            seed: 0,
            optimiser: AdafactorConfig::default(),
            shuffle: true,
            val_fraction: 0.1,
            selection: InstanceSelection::Localised,
            localiser: LocaliserConfig::default(),
        }
    }
}

/// One line of the training log. Epoch 0 scores the initial parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-case loss over the epoch.
    pub train_loss: f64,
    pub val_mppe: Option<f64>,
    pub val_lsr: Option<f64>,
}

impl EpochRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("epoch record serialises")
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<M> {
    /// Parameters after the last epoch.
    pub last: M,
    /// Parameters from the epoch with the highest validation LSR (earliest on
    /// ties); the last epoch when there is no validation set.
    pub best: M,
    pub best_epoch: usize,
    pub log: Vec<EpochRecord>,
}

/// Reject validation scenes sharing a scene group with training scenes.
pub fn check_disjoint(train: &[SceneRecord], val: &[SceneRecord]) -> Result<(), TrainError> {
    let groups: HashSet<&str> = train.iter().map(|r| group_key(&r.scene_id)).collect();
    match val.iter().find(|r| groups.contains(group_key(&r.scene_id))) {
        Some(r) => Err(TrainError::SplitLeak(group_key(&r.scene_id).to_string())),
        None => Ok(()),
    }
}

fn case_step<M: DistanceModel>(
    model: &M,
    case: &Case,
    cfg: &TrainConfig,
    backward: bool,
) -> Result<(f64, Option<Vec<Option<crate::tensor::Tensor>>>), PpnError> {
    let mut tape = Tape::new();
    let vars = bind_parameters(model.parameters(), &mut tape, backward)?;
    let target = case.target_category();
    let distances = model.forward_case(&mut tape, &vars, &case.scene, target)?;
    let anchors: Vec<_> = case.scene.objects.iter().map(|o| o.position).collect();
    let (loss, _) = case_loss(&mut tape, distances, &anchors, case.gt_positions(), target, cfg.selection, &cfg.localiser)?;
    let value = tape.value(loss).item();
    if !backward {
        return Ok((value, None));
    }
    tape.backward(loss)?;
    Ok((value, Some(vars.iter().map(|&v| tape.grad(v).cloned()).collect())))
}

/// Train `model` on `train`, scoring `val` after every epoch. `on_epoch` sees
/// each log record with the current parameters.
pub fn train<M, F>(mut model: M, train: &[SceneRecord], val: &[SceneRecord], cfg: &TrainConfig, mut on_epoch: F) -> Result<TrainOutcome<M>, TrainError>
where
    M: DistanceModel,
    F: FnMut(&EpochRecord, &M) -> Result<(), TrainError>,
{
    check_disjoint(train, val)?;
    let scenes: Vec<Arc<SceneRecord>> =
        train.iter().filter(|r| !r.targets.is_empty()).map(|r| Arc::new(r.clone())).collect();
    if scenes.is_empty() || cfg.epochs == 0 {
        return Err(TrainError::EmptyDataset);
    }
    let val_cases = cases(val);
    let all_train = cases(train);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut optimiser = Adafactor::new(cfg.optimiser);
    let wrap = |case: &Case| {
        let scene = case.scene.scene_id.clone();
        move |source: PpnError| TrainError::Model { scene, source }
    };

    let validate = |model: &M| -> Result<(Option<f64>, Option<f64>), TrainError> {
        if val_cases.is_empty() {
            return Ok((None, None));
        }
        let report = evaluate(model, &val_cases, &cfg.localiser)?;
        Ok((Some(report.mppe), Some(report.lsr[0])))
    };

    let mut initial = 0.0;
    for case in &all_train {
        initial += case_step(&model, case, cfg, false).map_err(wrap(case))?.0;
    }
    let (val_mppe, val_lsr) = validate(&model)?;
    let first = EpochRecord { epoch: 0, train_loss: initial / all_train.len() as f64, val_mppe, val_lsr };
    on_epoch(&first, &model)?;
    let mut log = vec![first];
    let mut best: Option<(M, usize, f64)> = None;

    let mut order: Vec<usize> = (0..scenes.len()).collect();
    for epoch in 1..=cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let mut total = 0.0;
        for &s in &order {
            let case = Case { scene: scenes[s].clone(), target: rng.random_range(0..scenes[s].targets.len()) };
            let (loss, grads) = case_step(&model, &case, cfg, true).map_err(wrap(&case))?;
            total += loss;
            optimiser.step(model.parameters_mut(), &grads.expect("gradients requested"))?;
        }
        let (val_mppe, val_lsr) = validate(&model)?;
        let record = EpochRecord { epoch, train_loss: total / scenes.len() as f64, val_mppe, val_lsr };
        on_epoch(&record, &model)?;
        if let Some(lsr) = val_lsr {
            if best.as_ref().is_none_or(|(_, _, b)| lsr > *b) {
                best = Some((model.clone(), epoch, lsr));
            }
        }
        log.push(record);
    }
    let (best, best_epoch) = match best {
        Some((m, e, _)) => (m, e),
        None => (model.clone(), cfg.epochs),
    };
    Ok(TrainOutcome { last: model, best, best_epoch, log })
}

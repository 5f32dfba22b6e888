use crate::tensor::{ParameterSet, Tensor};

use super::TrainError;

/// Constants of the momentum-free Adafactor update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdafactorConfig {
    /// Cap on the relative step size.
    pub rho_max: f64,
    /// Added to squared gradients.
    pub eps1: f64,
    /// Floor on the parameter RMS used to scale the step.
    pub eps2: f64,
    /// RMS threshold for update clipping.
    pub clip: f64,
    /// `β₂ₜ = 1 − t^(−decay)`.
    pub decay: f64,
}

impl Default for AdafactorConfig {
    fn default() -> Self {
        Self { rho_max: 1e-2, eps1: 1e-30, eps2: 1e-3, clip: 1.0, decay: 0.8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum SecondMoment {
    /// Row and column sums of the squared-gradient average.
    Factored { row: Vec<f64>, col: Vec<f64> },
    Full(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adafactor {
    config: AdafactorConfig,
    step: u64,
    moments: Vec<Option<SecondMoment>>,
}

impl Adafactor {
    pub fn new(config: AdafactorConfig) -> Self {
        Self { config, step: 0, moments: Vec::new() }
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Current second-moment estimate of parameter `id` (reconstructed from
    /// the factors for matrices).
    pub fn second_moment(&self, id: usize, shape: (usize, usize)) -> Option<Tensor> {
        match self.moments.get(id)?.as_ref()? {
            SecondMoment::Full(v) => Some(Tensor::from_vec(shape.0, shape.1, v.clone())),
            SecondMoment::Factored { row, col } => {
                let total: f64 = row.iter().sum();
                let mut out = Tensor::zeros(shape.0, shape.1);
                for r in 0..shape.0 {
                    for c in 0..shape.1 {
                        out.data_mut()[r * shape.1 + c] = row[r] * col[c] / total;
                    }
                }
                Some(out)
            }
        }
    }

    /// Apply one update. `grads[i]` is the gradient of parameter `i`; `None`
    /// is treated as zero. Nothing changes if any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParameterSet, grads: &[Option<Tensor>]) -> Result<(), TrainError> {
        for (id, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.is_finite() {
                    return Err(TrainError::NonFiniteGradient(params.name(id).to_string()));
                }
            }
        }
        self.moments.resize(params.len(), None);
        self.step += 1;
        let t = self.step as f64;
        let cfg = self.config;
        let beta2 = 1.0 - t.powf(-cfg.decay);
        let rho = cfg.rho_max.min(1.0 / t.sqrt());
        for id in 0..params.len() {
            if !params.is_trainable(id) {
                continue;
            }
            let (rows, cols) = params.tensor(id).shape();
            let zero;
            let g = match grads.get(id).and_then(Option::as_ref) {
                Some(g) => g,
                None => {
                    zero = Tensor::zeros(rows, cols);
                    &zero
                }
            };
            let sq: Vec<f64> = g.data().iter().map(|v| v * v + cfg.eps1).collect();
            let factored = rows > 1 && cols > 1;
            let moment = self.moments[id].get_or_insert_with(|| {
                if factored {
                    SecondMoment::Factored { row: vec![0.0; rows], col: vec![0.0; cols] }
                } else {
                    SecondMoment::Full(vec![0.0; rows * cols])
                }
            });
            let mut update: Vec<f64> = match moment {
                SecondMoment::Factored { row, col } => {
                    for r in 0..rows {
                        let s: f64 = sq[r * cols..(r + 1) * cols].iter().sum();
                        row[r] = beta2 * row[r] + (1.0 - beta2) * s;
                    }
                    for c in 0..cols {
                        let s: f64 = (0..rows).map(|r| sq[r * cols + c]).sum();
                        col[c] = beta2 * col[c] + (1.0 - beta2) * s;
                    }
                    let total: f64 = row.iter().sum();
                    (0..rows * cols)
                        .map(|k| g.data()[k] / (row[k / cols] * col[k % cols] / total).sqrt())
                        .collect()
                }
                SecondMoment::Full(v) => v
                    .iter_mut()
                    .zip(&sq)
                    .zip(g.data())
                    .map(|((v, s), gk)| {
                        *v = beta2 * *v + (1.0 - beta2) * s;
                        gk / v.sqrt()
                    })
                    .collect(),
            };
            let rms = (update.iter().map(|u| u * u).sum::<f64>() / update.len().max(1) as f64).sqrt();
            let denom = (rms / cfg.clip).max(1.0);
            let param = params.tensor_mut(id);
            let alpha = cfg.eps2.max(param.rms()) * rho;
            for (x, u) in param.data_mut().iter_mut().zip(update.iter_mut()) {
                *x -= alpha * *u / denom;
            }
        }
        Ok(())
    }
}

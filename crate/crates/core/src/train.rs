//! Shared mini-batch training loop.
//!
//! Trains a network's full forward path against tensor targets (MSE) or
//! class labels (softmax cross-entropy). Batching order is a pure function
//! of the config seed; the returned parameters never lose to the initial
//! ones (the loop reverts to the initial snapshot in the degenerate case
//! where training ends worse than it started).

use crate::error::{FcxError, Result};
use crate::graph::Graph;
use crate::optim::{OptimizerKind, OptimizerState};
use crate::tensor::Tensor;
use crate::zoo::Network;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    /// Early stop when the epoch loss improves by less than this relative
    /// amount for `patience` consecutive epochs.
    pub rel_tol: f64,
    pub patience: usize,
    /// Step-decay the learning rate by 10x at 60% and 85% of `max_epochs`.
    pub lr_decay: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 200,
            batch_size: 16,
            lr: 3e-3,
            optimizer: OptimizerKind::Adam,
            rel_tol: 1e-5,
            patience: 10,
            lr_decay: true,
            seed: 0,
        }
    }
}

/// Supervision signal for [`fit`].
pub enum TrainTarget<'a> {
    /// Per-sample tensors, batch axis first; loss is MSE.
    Tensors(&'a Tensor),
    /// Class labels; loss is softmax cross-entropy.
    Labels(&'a [usize]),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    /// Running mean of batch losses, one entry per epoch run.
    pub epoch_losses: Vec<f64>,
    /// Full-dataset loss at the initial parameters.
    pub init_loss: f64,
    /// Full-dataset loss at the returned parameters.
    pub final_loss: f64,
    pub epochs_run: usize,
    pub reverted_to_init: bool,
}

/// Full-dataset loss of the network's complete forward path, tape-free.
pub fn eval_loss(net: &Network, inputs: &Tensor, target: &TrainTarget) -> Result<f64> {
    let out = net.forward(inputs)?;
    match target {
        TrainTarget::Tensors(t) => crate::ops::mse_forward(&out, t),
        TrainTarget::Labels(l) => Ok(crate::ops::softmax_ce_forward(&out, l)?.0),
    }
}

pub fn fit(
    net: &mut Network,
    inputs: &Tensor,
    target: &TrainTarget,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if net.is_frozen() {
        return Err(FcxError::FrozenNetwork);
    }
    let n = inputs.shape()[0];
    if n == 0 {
        return Err(FcxError::EmptyInput("training set is empty"));
    }
    match target {
        TrainTarget::Tensors(t) => {
            if t.shape()[0] != n {
                return Err(FcxError::ShapeMismatch {
                    expected: vec![n],
                    got: vec![t.shape()[0]],
                });
            }
        }
        TrainTarget::Labels(l) => {
            if l.len() != n {
                return Err(FcxError::ShapeMismatch { expected: vec![n], got: vec![l.len()] });
            }
        }
    }

    let init_params = net.params().clone();
    let init_loss = eval_loss(net, inputs, target)?;
    let mut opt = OptimizerState::new(cfg.optimizer, cfg.lr);
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_losses = Vec::new();
    let mut best = f64::INFINITY;
    let mut stale = 0usize;
    let milestones = [(cfg.max_epochs * 3) / 5, (cfg.max_epochs * 17) / 20];

    for epoch in 0..cfg.max_epochs {
        if cfg.lr_decay && milestones.contains(&epoch) && epoch > 0 {
            opt.lr *= 0.1;
            // give the decayed rate a chance before stopping
            stale = 0;
        }
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let bx = inputs.gather_rows(chunk)?;
            let mut g = Graph::new();
            let ids = net.bind(&mut g);
            let x = g.input(bx);
            let out = net.forward_on_graph(&mut g, &ids, x, 0..net.spec.layers.len())?;
            let loss = match target {
                TrainTarget::Tensors(t) => {
                    let bt = g.input(t.gather_rows(chunk)?);
                    g.mse(out, bt)?
                }
                TrainTarget::Labels(l) => {
                    let bl: Vec<usize> = chunk.iter().map(|&i| l[i]).collect();
                    g.softmax_cross_entropy(out, &bl)?
                }
            };
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(FcxError::TrainingDiverged(format!(
                    "batch loss became {lv} after {} epochs",
                    epoch_losses.len()
                )));
            }
            g.backward(loss)?;
            let grads = g.trainable_grads();
            opt.step(net.params_mut()?, &grads)?;
            loss_sum += lv;
            batches += 1;
        }
        let epoch_loss = loss_sum / batches as f64;
        epoch_losses.push(epoch_loss);
        if epoch_loss < best * (1.0 - cfg.rel_tol) {
            best = epoch_loss;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }

    let mut final_loss = eval_loss(net, inputs, target)?;
    if !final_loss.is_finite() {
        return Err(FcxError::TrainingDiverged("final loss is not finite".into()));
    }
    let mut reverted = false;
    if final_loss > init_loss {
        net.set_params(init_params)?;
        final_loss = init_loss;
        reverted = true;
    }
    Ok(TrainReport {
        epochs_run: epoch_losses.len(),
        epoch_losses,
        init_loss,
        final_loss,
        reverted_to_init: reverted,
    })
}

//! Minibatch training loop for the diffusion denoiser.
//!
//! The update sequence is strictly serial; within-batch tensor math may run
//! data-parallel since it cannot reorder updates. Two runs with equal seeds
//! produce bitwise-equal parameters.

use crate::autodiff::Tape;
use crate::diffusion::{sample_loss_inputs, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nn::adam::Adam;
use crate::nn::unet::UNet;
use crate::nn::HasParams;
use crate::rng::stream;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Epoch interval at which the progress callback fires.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 16,
            learning_rate: 2e-4,
            seed: 0,
            checkpoint_every: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0
            || self.batch_size == 0
            || self.learning_rate < 0.0
            || self.checkpoint_every == 0
        {
            return Err(Error::InvalidConfig(format!("bad train config {self:?}")));
        }
        Ok(())
    }
}

/// Events surfaced to the caller during training.
pub struct EpochReport<'a> {
    pub epoch: usize,
    pub mean_loss: f64,
    pub net: &'a UNet,
    /// True on epochs at the `checkpoint_every` cadence (and the last epoch).
    pub checkpoint_due: bool,
}

/// Train the ε-prediction objective; returns the trained network, its
/// optimizer state and the per-epoch mean loss trace.
pub fn train(
    net: UNet,
    data: &[Tensor],
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<(UNet, Adam, Vec<f64>)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let want = net.config.image_shape();
    for img in data {
        if img.shape() != want {
            return Err(Error::shape(&want, img.shape()));
        }
    }

    let mut net = net;
    let mut adam = Adam::new(net.params(), cfg.learning_rate);
    let mut rng = stream(cfg.seed);
    let mut trace = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut n_elems = 0usize;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<Tensor> = chunk.iter().map(|&i| data[i].clone()).collect();
            let draws = sample_loss_inputs(&batch, schedule, &mut rng)?;

            let mut tape = Tape::new();
            let pv = net.leaf_params(&mut tape);
            let xv = tape.leaf(draws.x_t);
            let target = tape.leaf(draws.eps);
            let pred = net.forward_on(&mut tape, &pv, xv, &draws.ts)?;
            let loss = tape.mse(pred, target)?;
            let loss_val = tape.value(loss).item();
            if !loss_val.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            loss_sum += loss_val * chunk.len() as f64;
            n_elems += chunk.len();

            let grads = tape.backward(loss)?;
            let grad_vec: Vec<Tensor> = pv
                .iter()
                .zip(net.params().iter())
                .map(|(&v, p)| {
                    grads
                        .get(v)
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(p.value.shape()))
                })
                .collect();
            adam.update(net.params_mut(), &grad_vec);
        }

        if !net.params().all_finite() {
            return Err(Error::NonFiniteLoss { epoch, step: 0 });
        }
        let mean_loss = loss_sum / n_elems as f64;
        trace.push(mean_loss);
        on_epoch(&EpochReport {
            epoch,
            mean_loss,
            net: &net,
            checkpoint_due: epoch % cfg.checkpoint_every == 0 || epoch == cfg.epochs,
        });
    }
    Ok((net, adam, trace))
}

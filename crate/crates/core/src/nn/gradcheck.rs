//! Finite-difference verification of analytic gradients.
//!
//! Checks directional derivatives along random unit directions in parameter
//! space against central differences. Used per layer and end-to-end; the
//! analytic path is trusted only because these checks pass.

use crate::autodiff::Tape;
use crate::diffusion::{sample_loss_inputs, NoiseSchedule};
use crate::error::Result;
use crate::nn::unet::UNet;
use crate::nn::HasParams;
use crate::rng::{derive_seed, stream};
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, Copy)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub nan_encountered: bool,
}

/// Compare analytic directional derivatives of `loss` against central finite
/// differences along `n_directions` random unit directions.
pub fn directional_check<M>(
    model: &M,
    loss: impl Fn(&M) -> Result<f64>,
    analytic_grad: impl FnOnce(&M) -> Result<Vec<Tensor>>,
    n_directions: usize,
    seed: u64,
    step: f64,
) -> Result<GradReport>
where
    M: Clone + HasParams,
{
    let grads = analytic_grad(model)?;
    let flat_grad: Vec<f64> = grads.iter().flat_map(|g| g.data().iter().copied()).collect();
    let total = model.params().total_len();
    debug_assert_eq!(flat_grad.len(), total);

    let mut rng = stream(seed);
    let mut report = GradReport {
        max_rel_error: 0.0,
        nan_encountered: false,
    };
    for _ in 0..n_directions.max(1) {
        let mut dir: Vec<f64> = (0..total).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        dir.iter_mut().for_each(|v| *v /= norm);

        let ana: f64 = flat_grad.iter().zip(&dir).map(|(g, d)| g * d).sum();

        let mut plus = model.clone();
        plus.params_mut().axpy_flat(step, &dir);
        let mut minus = model.clone();
        minus.params_mut().axpy_flat(-step, &dir);
        let fd = (loss(&plus)? - loss(&minus)?) / (2.0 * step);

        if !ana.is_finite() || !fd.is_finite() {
            report.nan_encountered = true;
            report.max_rel_error = f64::NAN;
            continue;
        }
        let rel = (ana - fd).abs() / ana.abs().max(fd.abs()).max(1e-12);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
        }
    }
    Ok(report)
}

/// Check the denoiser's training-loss gradient on one clean image. The
/// objective's (t, ε) draws are frozen from the seed so both gradient routes
/// see the same deterministic loss surface.
pub fn gradient_check(
    net: &UNet,
    x0: &Tensor,
    schedule: &NoiseSchedule,
    n_directions: usize,
    seed: u64,
) -> Result<GradReport> {
    let mut rng = stream(derive_seed(seed, 0));
    let draws = sample_loss_inputs(std::slice::from_ref(x0), schedule, &mut rng)?;

    let x_t = draws.x_t.clone();
    let ts = draws.ts.clone();
    let eps = draws.eps.clone();
    let loss_of = move |m: &UNet| -> Result<f64> {
        let pred = m.predict_noise_batch(&x_t, &ts)?;
        let diff = pred.sub(&eps)?;
        Ok(diff.data().iter().map(|v| v * v).sum::<f64>() / diff.numel() as f64)
    };

    let analytic = |m: &UNet| -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let pv = m.leaf_params(&mut tape);
        let xv = tape.leaf(draws.x_t.clone());
        let target = tape.leaf(draws.eps.clone());
        let pred = m.forward_on(&mut tape, &pv, xv, &draws.ts)?;
        let loss = tape.mse(pred, target)?;
        let grads = tape.backward(loss)?;
        Ok(pv
            .iter()
            .zip(m.params().iter())
            .map(|(&v, p)| {
                grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(p.value.shape()))
            })
            .collect())
    };

    directional_check(net, loss_of, analytic, n_directions, derive_seed(seed, 1), 1e-4)
}

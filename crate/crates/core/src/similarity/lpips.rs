//! Deep-feature perceptual distance.
//!
//! Activations from a small conv stack are unit-normalized across channels
//! at every spatial position; the distance is the tap-weighted sum of the
//! spatially averaged squared differences. The extractor is either a
//! fixed-seed random stack (self-contained, deterministic) or the encoder
//! convolutions reused from a trained denoiser checkpoint.

use crate::autodiff::conv::conv2d_fwd;
use crate::diffusion::to_net_domain;
use crate::error::{Error, Result};
use crate::nn::unet::UNet;
use crate::rng::stream;
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;
use std::path::Path;

const NORM_EPS: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvStage {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
}

/// Immutable feature extractor: ordered conv stages with ReLU, tap indices
/// and nonnegative per-tap weights.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    stages: Vec<ConvStage>,
    taps: Vec<usize>,
    layer_weights: Vec<f64>,
}

impl FeatureExtractor {
    pub fn new(stages: Vec<ConvStage>, taps: Vec<usize>, layer_weights: Vec<f64>) -> Result<Self> {
        if taps.is_empty() {
            return Err(Error::InvalidConfig("extractor needs at least one tap".into()));
        }
        if taps.len() != layer_weights.len() {
            return Err(Error::InvalidConfig(format!(
                "{} taps but {} layer weights",
                taps.len(),
                layer_weights.len()
            )));
        }
        if layer_weights.iter().any(|&w| w < 0.0) {
            return Err(Error::InvalidConfig("layer weights must be >= 0".into()));
        }
        if taps.iter().any(|&t| t >= stages.len()) {
            return Err(Error::InvalidConfig("tap index out of range".into()));
        }
        Ok(FeatureExtractor {
            stages,
            taps,
            layer_weights,
        })
    }

    pub fn stages(&self) -> &[ConvStage] {
        &self.stages
    }

    pub fn taps(&self) -> &[usize] {
        &self.taps
    }

    pub fn layer_weights(&self) -> &[f64] {
        &self.layer_weights
    }

    pub fn in_channels(&self) -> usize {
        self.stages[0].weight.shape()[1]
    }

    /// Post-ReLU activations at each tap for a `[C,H,W]` image in [0,1].
    pub fn activations(&self, img: &Tensor) -> Result<Vec<Tensor>> {
        let (c, _, _) = img.chw()?;
        if c != self.in_channels() {
            return Err(Error::shape(&[self.in_channels()], &[c]));
        }
        let mut x = to_net_domain(img).unsqueeze_batch()?;
        let mut out = Vec::with_capacity(self.taps.len());
        for (i, st) in self.stages.iter().enumerate() {
            x = conv2d_fwd(&x, &st.weight, Some(&st.bias), st.stride, 1)?;
            x = x.map(|v| v.max(0.0));
            if self.taps.contains(&i) {
                out.push(x.clone());
            }
        }
        Ok(out)
    }

    /// Reuse the encoder convolutions of a trained denoiser as a 3-stage
    /// extractor (strides 1, 2, 2); taps at every stage, unit weights.
    pub fn from_unet(net: &UNet) -> Result<FeatureExtractor> {
        let take = |name: &str| -> Result<(Tensor, Tensor)> {
            let w = net
                .params()
                .by_name(&format!("{name}.w"))
                .or_else(|| net.params().by_name(&format!("{name}.conv.w")))
                .ok_or_else(|| Error::BadCheckpoint(format!("missing layer {name}")))?;
            let b = net
                .params()
                .by_name(&format!("{name}.b"))
                .or_else(|| net.params().by_name(&format!("{name}.conv.b")))
                .ok_or_else(|| Error::BadCheckpoint(format!("missing layer {name}")))?;
            Ok((w.clone(), b.clone()))
        };
        let chain: Vec<&str> = match net.config.depth {
            0 => vec!["conv_in", "mid1", "mid2"],
            1 => vec!["conv_in", "enc0", "mid1"],
            _ => vec!["conv_in", "enc0", "enc1"],
        };
        let mut stages = Vec::new();
        for (i, name) in chain.iter().enumerate() {
            let (weight, bias) = take(name)?;
            stages.push(ConvStage {
                weight,
                bias,
                stride: if i == 0 { 1 } else { 2 },
            });
        }
        FeatureExtractor::new(stages, vec![0, 1, 2], vec![1.0, 1.0, 1.0])
    }
}

/// Where extractor parameters come from.
pub enum ExtractorSource<'a> {
    /// Deterministic random conv stack.
    FixedRandom { seed: u64, in_channels: usize },
    /// Encoder convolutions of a trained denoiser checkpoint.
    Trained { checkpoint: &'a Path },
}

/// Default stage widths of the fixed-random extractor.
pub const RANDOM_STAGE_CHANNELS: [usize; 3] = [16, 32, 32];

pub fn build_feature_extractor(source: ExtractorSource) -> Result<FeatureExtractor> {
    match source {
        ExtractorSource::FixedRandom { seed, in_channels } => {
            if in_channels == 0 {
                return Err(Error::InvalidConfig("in_channels must be positive".into()));
            }
            let mut rng = stream(seed);
            let mut stages = Vec::new();
            let mut ci = in_channels;
            for (i, &co) in RANDOM_STAGE_CHANNELS.iter().enumerate() {
                let std = (2.0 / (ci * 9) as f64).sqrt();
                let n = co * ci * 9;
                let data: Vec<f64> = (0..n)
                    .map(|_| rng.sample::<f64, _>(StandardNormal) * std)
                    .collect();
                stages.push(ConvStage {
                    weight: Tensor::new(&[co, ci, 3, 3], data)?,
                    bias: Tensor::zeros(&[co]),
                    stride: if i == 0 { 1 } else { 2 },
                });
                ci = co;
            }
            FeatureExtractor::new(stages, vec![0, 1, 2], vec![1.0, 1.0, 1.0])
        }
        ExtractorSource::Trained { checkpoint } => {
            let net = crate::checkpoint::load_denoiser(checkpoint)?.net;
            FeatureExtractor::from_unet(&net)
        }
    }
}

/// Perceptual distance; zero at identical inputs, symmetric.
pub fn lpips(a: &Tensor, b: &Tensor, f: &FeatureExtractor) -> Result<f64> {
    let ones = vec![1.0; f.taps().len()];
    lpips_with_tap_scales(a, b, f, &ones)
}

/// Verification hook: multiply each tap's activation maps by a positive
/// constant before normalization. Channel-unit normalization must make the
/// distance invariant to this rescaling.
pub fn lpips_with_tap_scales(
    a: &Tensor,
    b: &Tensor,
    f: &FeatureExtractor,
    tap_scales: &[f64],
) -> Result<f64> {
    a.check_same_shape(b)?;
    if tap_scales.len() != f.taps().len() {
        return Err(Error::InvalidConfig("one scale per tap required".into()));
    }
    let acts_a = f.activations(a)?;
    let acts_b = f.activations(b)?;
    let mut total = 0.0;
    for (l, (aa, ab)) in acts_a.iter().zip(&acts_b).enumerate() {
        let (_, c, h, w) = aa.nchw()?;
        let scale = tap_scales[l];
        let pa = aa.data();
        let pb = ab.data();
        let mut spatial_sum = 0.0;
        for y in 0..h {
            for x in 0..w {
                let mut na = 0.0;
                let mut nb = 0.0;
                for ch in 0..c {
                    let va = pa[ch * h * w + y * w + x] * scale;
                    let vb = pb[ch * h * w + y * w + x] * scale;
                    na += va * va;
                    nb += vb * vb;
                }
                let na = na.sqrt() + NORM_EPS;
                let nb = nb.sqrt() + NORM_EPS;
                let mut d = 0.0;
                for ch in 0..c {
                    let ua = pa[ch * h * w + y * w + x] * scale / na;
                    let ub = pb[ch * h * w + y * w + x] * scale / nb;
                    d += (ua - ub) * (ua - ub);
                }
                spatial_sum += d;
            }
        }
        total += f.layer_weights()[l] * spatial_sum / (h * w) as f64;
    }
    Ok(total)
}

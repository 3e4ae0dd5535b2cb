//! Small time-conditioned U-Net predicting the noise component of a
//! diffused image. Each resolution stage is conv → group-norm → additive
//! time embedding → SiLU; skips are concatenated on the way up.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{HasParams, ParamStore};
use crate::rng::stream;
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NetConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    /// Number of 2x down/up-sampling levels; spatial dims must divide 2^depth.
    pub depth: usize,
    pub time_embed_dim: usize,
    pub image_height: usize,
    pub image_width: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            in_channels: 1,
            base_channels: 32,
            depth: 2,
            time_embed_dim: 64,
            image_height: 32,
            image_width: 64,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let div = 1usize << self.depth;
        if self.in_channels == 0
            || self.base_channels == 0
            || self.time_embed_dim < 2
            || self.time_embed_dim % 2 != 0
            || self.image_height == 0
            || self.image_width == 0
        {
            return Err(Error::InvalidConfig(format!("bad net config {self:?}")));
        }
        if self.image_height % div != 0 || self.image_width % div != 0 {
            return Err(Error::InvalidConfig(format!(
                "image {}x{} not divisible by 2^depth = {div}",
                self.image_height, self.image_width
            )));
        }
        Ok(())
    }

    /// Channel width of encoder/decoder level `i`.
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn mid_channels(&self) -> usize {
        self.base_channels << self.depth.saturating_sub(1)
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.in_channels, self.image_height, self.image_width]
    }
}

/// Parameter indices of one conv/norm/time stage.
#[derive(Debug, Clone)]
struct Stage {
    conv_w: usize,
    conv_b: usize,
    gn_g: usize,
    gn_b: usize,
    temb_w: usize,
    temb_b: usize,
    groups: usize,
}

#[derive(Debug, Clone)]
pub struct UNet {
    pub config: NetConfig,
    store: ParamStore,
    time_w1: usize,
    time_b1: usize,
    time_w2: usize,
    time_b2: usize,
    conv_in_w: usize,
    conv_in_b: usize,
    enc: Vec<Stage>,
    mid1: Stage,
    mid2: Stage,
    dec: Vec<Stage>,
    conv_out_w: usize,
    conv_out_b: usize,
}

fn gn_groups(channels: usize) -> usize {
    let mut g = channels.min(8);
    while channels % g != 0 {
        g -= 1;
    }
    g
}

const GN_EPS: f64 = 1e-5;

impl UNet {
    /// Deterministic fan-in initialization from `seed`.
    pub fn init(config: NetConfig, seed: u64) -> Result<UNet> {
        config.validate()?;
        let mut rng = stream(seed);
        let mut store = ParamStore::new();
        let te = config.time_embed_dim;

        let conv =
            |store: &mut ParamStore, rng: &mut rand_chacha::ChaCha12Rng, name: &str, co: usize, ci: usize, gain: f64| {
                let fan_in = (ci * 9) as f64;
                let std = gain * (2.0 / fan_in).sqrt();
                let w = randn_scaled(&[co, ci, 3, 3], std, rng);
                let wi = store.add(&format!("{name}.w"), w);
                let bi = store.add(&format!("{name}.b"), Tensor::zeros(&[co]));
                (wi, bi)
            };
        let linear =
            |store: &mut ParamStore, rng: &mut rand_chacha::ChaCha12Rng, name: &str, o: usize, i: usize| {
                let std = (2.0 / i as f64).sqrt();
                let w = randn_scaled(&[o, i], std, rng);
                let wi = store.add(&format!("{name}.w"), w);
                let bi = store.add(&format!("{name}.b"), Tensor::zeros(&[o]));
                (wi, bi)
            };
        let stage = |store: &mut ParamStore,
                     rng: &mut rand_chacha::ChaCha12Rng,
                     name: &str,
                     ci: usize,
                     co: usize| {
            let fan_in = (ci * 9) as f64;
            let std = (2.0 / fan_in).sqrt();
            let w = randn_scaled(&[co, ci, 3, 3], std, rng);
            let conv_w = store.add(&format!("{name}.conv.w"), w);
            let conv_b = store.add(&format!("{name}.conv.b"), Tensor::zeros(&[co]));
            let gn_g = store.add(&format!("{name}.gn.g"), Tensor::filled(&[co], 1.0));
            let gn_b = store.add(&format!("{name}.gn.b"), Tensor::zeros(&[co]));
            let tstd = (2.0 / te as f64).sqrt();
            let tw = randn_scaled(&[co, te], tstd, rng);
            let temb_w = store.add(&format!("{name}.temb.w"), tw);
            let temb_b = store.add(&format!("{name}.temb.b"), Tensor::zeros(&[co]));
            Stage {
                conv_w,
                conv_b,
                gn_g,
                gn_b,
                temb_w,
                temb_b,
                groups: gn_groups(co),
            }
        };

        let (time_w1, time_b1) = linear(&mut store, &mut rng, "time_mlp.fc1", te, te);
        let (time_w2, time_b2) = linear(&mut store, &mut rng, "time_mlp.fc2", te, te);
        let (conv_in_w, conv_in_b) =
            conv(&mut store, &mut rng, "conv_in", config.base_channels, config.in_channels, 1.0);

        let mut enc = Vec::new();
        let mut prev = config.base_channels;
        for i in 0..config.depth {
            let ch = config.channels(i);
            enc.push(stage(&mut store, &mut rng, &format!("enc{i}"), prev, ch));
            prev = ch;
        }
        let mid_ch = config.mid_channels();
        let mid1 = stage(&mut store, &mut rng, "mid1", prev, mid_ch);
        let mid2 = stage(&mut store, &mut rng, "mid2", mid_ch, mid_ch);

        let mut dec = Vec::new();
        let mut up_prev = mid_ch;
        for i in (0..config.depth).rev() {
            let ch = config.channels(i);
            let cin = up_prev + ch; // upsampled + skip
            dec.push(stage(&mut store, &mut rng, &format!("dec{i}"), cin, ch));
            up_prev = ch;
        }

        // small but nonzero output head keeps early training stable while
        // leaving gradients well-defined for the finite-difference checks
        let (conv_out_w, conv_out_b) =
            conv(&mut store, &mut rng, "conv_out", config.in_channels, up_prev, 0.01);

        Ok(UNet {
            config,
            store,
            time_w1,
            time_b1,
            time_w2,
            time_b2,
            conv_in_w,
            conv_in_b,
            enc,
            mid1,
            mid2,
            dec,
            conv_out_w,
            conv_out_b,
        })
    }

    /// Push every parameter onto the tape; order matches the store.
    pub fn leaf_params(&self, tape: &mut Tape) -> Vec<Var> {
        self.store.iter().map(|p| tape.leaf(p.value.clone())).collect()
    }

    /// Forward pass on an existing tape with parameter leaves `pv`.
    pub fn forward_on(&self, tape: &mut Tape, pv: &[Var], x: Var, ts: &[usize]) -> Result<Var> {
        let (n, c, h, w) = tape.value(x).nchw()?;
        let want = self.config.image_shape();
        if n != ts.len() || [c, h, w] != want {
            return Err(Error::shape(&[ts.len(), want[0], want[1], want[2]], &[n, c, h, w]));
        }

        let emb0 = tape.leaf(time_embedding(ts, self.config.time_embed_dim));
        let e = tape.linear(emb0, pv[self.time_w1], pv[self.time_b1])?;
        let e = tape.silu(e);
        let e = tape.linear(e, pv[self.time_w2], pv[self.time_b2])?;
        let temb = tape.silu(e);

        let mut hcur = tape.conv2d(x, pv[self.conv_in_w], pv[self.conv_in_b], 1, 1)?;
        let mut skips = Vec::with_capacity(self.enc.len());
        for st in &self.enc {
            hcur = self.stage_block(tape, pv, st, hcur, temb)?;
            skips.push(hcur);
            hcur = tape.avg_pool2(hcur)?;
        }
        hcur = self.stage_block(tape, pv, &self.mid1, hcur, temb)?;
        hcur = self.stage_block(tape, pv, &self.mid2, hcur, temb)?;
        for (st, skip) in self.dec.iter().zip(skips.iter().rev()) {
            hcur = tape.upsample2(hcur)?;
            hcur = tape.concat_channels(hcur, *skip)?;
            hcur = self.stage_block(tape, pv, st, hcur, temb)?;
        }
        tape.conv2d(hcur, pv[self.conv_out_w], pv[self.conv_out_b], 1, 1)
    }

    fn stage_block(
        &self,
        tape: &mut Tape,
        pv: &[Var],
        st: &Stage,
        x: Var,
        temb: Var,
    ) -> Result<Var> {
        let y = tape.conv2d(x, pv[st.conv_w], pv[st.conv_b], 1, 1)?;
        let y = tape.group_norm(y, pv[st.gn_g], pv[st.gn_b], st.groups, GN_EPS)?;
        let proj = tape.linear(temb, pv[st.temb_w], pv[st.temb_b])?;
        let y = tape.add_channel_vec(y, proj)?;
        Ok(tape.silu(y))
    }

    /// Predicted noise for a batch `[N,C,H,W]` with per-element timesteps.
    pub fn predict_noise_batch(&self, x: &Tensor, ts: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let pv = self.leaf_params(&mut tape);
        let xv = tape.leaf(x.clone());
        let out = self.forward_on(&mut tape, &pv, xv, ts)?;
        Ok(tape.value(out).clone())
    }

    /// Predicted noise for a single `[C,H,W]` image at timestep `t`.
    pub fn predict_noise(&self, x: &Tensor, t: usize) -> Result<Tensor> {
        let batch = x.unsqueeze_batch()?;
        let out = self.predict_noise_batch(&batch, &[t])?;
        Ok(out.unstack()?.remove(0))
    }
}

impl HasParams for UNet {
    fn params(&self) -> &ParamStore {
        &self.store
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}

impl crate::diffusion::NoisePredictor for UNet {
    fn predict_noise(&self, x: &Tensor, t: usize) -> Result<Tensor> {
        UNet::predict_noise(self, x, t)
    }
}

fn randn_scaled(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z * std
        })
        .collect();
    Tensor::new(shape, data).expect("shape/data agree")
}

/// Sinusoidal timestep embedding, `[N, dim]`; sin half then cos half.
pub fn time_embedding(ts: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let tf = t as f64;
        for i in 0..half {
            let freq = (-(10000.0f64.ln()) * i as f64 / (half.max(2) - 1) as f64).exp();
            data.push((tf * freq).sin());
        }
        for i in 0..half {
            let freq = (-(10000.0f64.ln()) * i as f64 / (half.max(2) - 1) as f64).exp();
            data.push((tf * freq).cos());
        }
    }
    Tensor::new(&[ts.len(), dim], data).expect("shape/data agree")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> NetConfig {
        NetConfig {
            in_channels: 1,
            base_channels: 4,
            depth: 2,
            time_embed_dim: 8,
            image_height: 8,
            image_width: 12,
        }
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = UNet::init(small_cfg(), 3).unwrap();
        let b = UNet::init(small_cfg(), 3).unwrap();
        assert_eq!(a.params(), b.params());
        let c = UNet::init(small_cfg(), 4).unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn divisibility_is_enforced() {
        let mut cfg = NetConfig {
            image_height: 32,
            image_width: 64,
            depth: 2,
            ..small_cfg()
        };
        assert!(UNet::init(cfg.clone(), 0).is_ok());
        cfg.depth = 6; // 32 not divisible by 64
        assert!(matches!(UNet::init(cfg, 0), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn parameter_count_matches_arithmetic_oracle() {
        let cfg = small_cfg();
        let net = UNet::init(cfg.clone(), 0).unwrap();
        let te = cfg.time_embed_dim;
        let conv = |ci: usize, co: usize| co * ci * 9 + co;
        let stage = |ci: usize, co: usize| conv(ci, co) + 2 * co + (co * te + co);
        let b = cfg.base_channels;
        let mut expect = 2 * (te * te + te); // time MLP
        expect += conv(cfg.in_channels, b); // conv_in
        expect += stage(b, b); // enc0
        expect += stage(b, 2 * b); // enc1
        expect += stage(2 * b, 2 * b) * 2; // mid1, mid2
        expect += stage(2 * b + 2 * b, 2 * b); // dec1
        expect += stage(2 * b + b, b); // dec0
        expect += conv(b, cfg.in_channels); // conv_out
        assert_eq!(net.params().total_len(), expect);
    }

    #[test]
    fn predict_noise_shape_and_purity() {
        let net = UNet::init(small_cfg(), 1).unwrap();
        let mut rng = stream(2);
        let x = Tensor::randn(&[1, 8, 12], &mut rng);
        let a = net.predict_noise(&x, 3).unwrap();
        let b = net.predict_noise(&x, 3).unwrap();
        assert_eq!(a.shape(), x.shape());
        assert_eq!(a, b);
        let c = net.predict_noise(&x, 9).unwrap();
        assert_ne!(a, c, "timestep must influence the output");
        assert!(net.predict_noise(&Tensor::zeros(&[1, 8, 10]), 3).is_err());
    }

    #[test]
    fn depth_zero_degenerates_cleanly() {
        let cfg = NetConfig {
            depth: 0,
            image_height: 1,
            image_width: 1,
            time_embed_dim: 8,
            base_channels: 4,
            in_channels: 1,
        };
        let net = UNet::init(cfg, 5).unwrap();
        let x = Tensor::filled(&[1, 1, 1], 0.3);
        let y = net.predict_noise(&x, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
    }

    #[test]
    fn directional_derivative_matches_finite_difference() {
        // mean(net(x)^2) against a random parameter direction.
        let cfg = small_cfg();
        let net = UNet::init(cfg, 7).unwrap();
        let mut rng = stream(8);
        let x = Tensor::randn(&[2, 1, 8, 12], &mut rng);
        let ts = [2usize, 5];

        let loss_of = |net: &UNet| -> f64 {
            let mut tape = Tape::new();
            let pv = net.leaf_params(&mut tape);
            let xv = tape.leaf(x.clone());
            let out = net.forward_on(&mut tape, &pv, xv, &ts).unwrap();
            let sq = tape.mul(out, out).unwrap();
            let m = tape.mean_all(sq);
            tape.value(m).item()
        };

        // analytic directional derivative
        let mut tape = Tape::new();
        let pv = net.leaf_params(&mut tape);
        let xv = tape.leaf(x.clone());
        let out = net.forward_on(&mut tape, &pv, xv, &ts).unwrap();
        let sq = tape.mul(out, out).unwrap();
        let loss = tape.mean_all(sq);
        let grads = tape.backward(loss).unwrap();

        let total = net.params().total_len();
        let dir: Vec<f64> = {
            let mut r = stream(99);
            let raw: Vec<f64> = (0..total).map(|_| r.sample(StandardNormal)).collect();
            let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
            raw.iter().map(|v| v / norm).collect()
        };
        let mut ana = 0.0;
        let mut off = 0;
        for &p in &pv {
            let g = grads.expect(p);
            for v in g.data() {
                ana += v * dir[off];
                off += 1;
            }
        }

        let h = 1e-4;
        let mut np = net.clone();
        np.params_mut().axpy_flat(h, &dir);
        let mut nm = net.clone();
        nm.params_mut().axpy_flat(-h, &dir);
        let fd = (loss_of(&np) - loss_of(&nm)) / (2.0 * h);
        let rel = (ana - fd).abs() / ana.abs().max(fd.abs()).max(1e-12);
        assert!(rel < 1e-3, "directional derivative rel err {rel} (ana {ana}, fd {fd})");
    }
}

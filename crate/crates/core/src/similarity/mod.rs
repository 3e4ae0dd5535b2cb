//! Image similarity metrics used for anomaly scoring: MSE, SSIM over a
//! sliding Gaussian window, and a deep-feature perceptual distance.

pub mod lpips;

pub use lpips::{build_feature_extractor, lpips, ExtractorSource, FeatureExtractor};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean squared difference over all channels and pixels.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.check_same_shape(b)?;
    let n = a.numel() as f64;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SsimParams {
    pub window_size: usize,
    pub window_sigma: f64,
    pub k1: f64,
    pub k2: f64,
    /// Intensity span L of the inputs (1.0 for unit-interval images).
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            window_size: 7,
            window_sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl SsimParams {
    pub fn validate(&self) -> Result<()> {
        if self.window_size < 3 || self.window_size % 2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "ssim window must be odd and >= 3, got {}",
                self.window_size
            )));
        }
        if self.k1 <= 0.0 || self.k2 <= 0.0 || self.window_sigma <= 0.0 || self.dynamic_range <= 0.0
        {
            return Err(Error::InvalidConfig("ssim parameters must be positive".into()));
        }
        Ok(())
    }
}

/// Structural similarity index averaged over all valid sliding Gaussian
/// windows and channels; in [-1, 1], 1 at identical inputs.
pub fn ssim(a: &Tensor, b: &Tensor, p: &SsimParams) -> Result<f64> {
    a.check_same_shape(b)?;
    p.validate()?;
    let (c, h, w) = a.chw()?;
    let ws = p.window_size;
    if h < ws || w < ws {
        return Err(Error::ImageTooSmall {
            height: h,
            width: w,
            need_height: ws,
            need_width: ws,
        });
    }

    // normalized 2-D Gaussian window
    let half = (ws / 2) as isize;
    let mut win = Vec::with_capacity(ws * ws);
    for dy in -half..=half {
        for dx in -half..=half {
            let r2 = (dy * dy + dx * dx) as f64;
            win.push((-r2 / (2.0 * p.window_sigma * p.window_sigma)).exp());
        }
    }
    let wsum: f64 = win.iter().sum();
    win.iter_mut().for_each(|v| *v /= wsum);

    let c1 = (p.k1 * p.dynamic_range).powi(2);
    let c2 = (p.k2 * p.dynamic_range).powi(2);

    let mut acc = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let pa = &a.data()[ch * h * w..(ch + 1) * h * w];
        let pb = &b.data()[ch * h * w..(ch + 1) * h * w];
        for oy in 0..=(h - ws) {
            for ox in 0..=(w - ws) {
                let mut mu_a = 0.0;
                let mut mu_b = 0.0;
                let mut aa = 0.0;
                let mut bb = 0.0;
                let mut ab = 0.0;
                let mut k = 0;
                for dy in 0..ws {
                    for dx in 0..ws {
                        let wv = win[k];
                        k += 1;
                        let va = pa[(oy + dy) * w + ox + dx];
                        let vb = pb[(oy + dy) * w + ox + dx];
                        mu_a += wv * va;
                        mu_b += wv * vb;
                        aa += wv * va * va;
                        bb += wv * vb * vb;
                        ab += wv * va * vb;
                    }
                }
                let var_a = aa - mu_a * mu_a;
                let var_b = bb - mu_b * mu_b;
                let cov = ab - mu_a * mu_b;
                let val = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                    / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
                acc += val;
                count += 1;
            }
        }
    }
    Ok(acc / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn mse_identity_and_unit_gap() {
        let x = Tensor::filled(&[1, 3, 3], 0.4);
        assert_eq!(mse(&x, &x).unwrap(), 0.0);
        let zeros = Tensor::zeros(&[2, 2, 2]);
        let ones = Tensor::filled(&[2, 2, 2], 1.0);
        assert_eq!(mse(&zeros, &ones).unwrap(), 1.0);
    }

    #[test]
    fn mse_matches_elementwise_loop_oracle() {
        let mut rng = stream(3);
        let a = Tensor::randn(&[1, 4, 4], &mut rng);
        let b = Tensor::randn(&[1, 4, 4], &mut rng);
        let mut acc = 0.0;
        for i in 0..a.numel() {
            let d = a.data()[i] - b.data()[i];
            acc += d * d;
        }
        let oracle = acc / a.numel() as f64;
        assert!((mse(&a, &b).unwrap() - oracle).abs() < 1e-15);
        assert!(mse(&a, &Tensor::zeros(&[1, 4, 5])).is_err());
    }

    #[test]
    fn ssim_identity_is_one() {
        let mut rng = stream(5);
        let x = Tensor::randn(&[1, 12, 16], &mut rng).map(|v| 0.5 + 0.2 * v).clamp(0.0, 1.0);
        let s = ssim(&x, &x, &SsimParams::default()).unwrap();
        assert!((s - 1.0).abs() < 1e-9, "ssim(x,x) = {s}");
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        // zero-variance inputs: ssim = (2 μa μb + C1) C2 / ((μa²+μb²+C1) C2)
        let p = SsimParams::default();
        let a = Tensor::filled(&[1, 9, 9], 0.2);
        let b = Tensor::filled(&[1, 9, 9], 0.6);
        let c1 = (p.k1 * p.dynamic_range).powi(2);
        let expect = (2.0 * 0.2 * 0.6 + c1) / (0.2 * 0.2 + 0.6 * 0.6 + c1);
        let got = ssim(&a, &b, &p).unwrap();
        assert!((got - expect).abs() < 1e-12, "got {got}, expect {expect}");
        assert!((expect - 0.60009).abs() < 1e-4);
    }

    #[test]
    fn ssim_is_symmetric() {
        let mut rng = stream(6);
        let p = SsimParams::default();
        for _ in 0..5 {
            let a = Tensor::randn(&[1, 10, 10], &mut rng).map(|v| 0.5 + 0.2 * v);
            let b = Tensor::randn(&[1, 10, 10], &mut rng).map(|v| 0.5 + 0.2 * v);
            let ab = ssim(&a, &b, &p).unwrap();
            let ba = ssim(&b, &a, &p).unwrap();
            assert!((ab - ba).abs() < 1e-12);
        }
    }

    #[test]
    fn ssim_rejects_small_images_and_bad_params() {
        let p = SsimParams::default();
        let small = Tensor::zeros(&[1, 5, 20]);
        assert!(matches!(
            ssim(&small, &small, &p),
            Err(Error::ImageTooSmall { .. })
        ));
        let bad = SsimParams {
            window_size: 4,
            ..SsimParams::default()
        };
        let x = Tensor::zeros(&[1, 20, 20]);
        assert!(ssim(&x, &x, &bad).is_err());
    }

    #[test]
    fn ssim_penalizes_degradation() {
        let mut rng = stream(9);
        let x = Tensor::randn(&[1, 16, 24], &mut rng).map(|v| 0.5 + 0.25 * v).clamp(0.0, 1.0);
        let noisy = x
            .zip_map(&Tensor::randn(&[1, 16, 24], &mut rng), |v, n| v + 0.2 * n)
            .unwrap()
            .clamp(0.0, 1.0);
        let p = SsimParams::default();
        assert!(ssim(&x, &noisy, &p).unwrap() < 0.95);
    }
}

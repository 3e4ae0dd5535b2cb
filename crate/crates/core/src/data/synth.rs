//! Synthetic ridge-texture dataset: oriented sinusoidal gratings with smooth
//! orientation/frequency fields stand in for bona fide fingerphoto ROIs;
//! four degradation archetypes stand in for presentation-attack instruments
//! (casting materials, print halftones, contrast-flattening putty, display
//! recapture moire).

use crate::data::{DatasetManifest, Label, ManifestEntry};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream};
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

/// Fixed pseudo-subject granularity for bona fide images.
pub const IMAGES_PER_SUBJECT: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PaiType {
    Blur,
    Halftone,
    Flatten,
    Moire,
}

impl PaiType {
    pub const ALL: [PaiType; 4] = [PaiType::Blur, PaiType::Halftone, PaiType::Flatten, PaiType::Moire];
}

impl fmt::Display for PaiType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PaiType::Blur => "blur",
            PaiType::Halftone => "halftone",
            PaiType::Flatten => "flatten",
            PaiType::Moire => "moire",
        };
        write!(f, "{s}")
    }
}

impl FromStr for PaiType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blur" => Ok(PaiType::Blur),
            "halftone" => Ok(PaiType::Halftone),
            "flatten" => Ok(PaiType::Flatten),
            "moire" => Ok(PaiType::Moire),
            other => Err(Error::InvalidConfig(format!("unknown pai type `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SynthConfig {
    pub n_bonafide: usize,
    pub n_attack_per_pai: usize,
    pub pai_types: Vec<PaiType>,
    pub image_height: usize,
    pub image_width: usize,
    /// Ridge frequency band in cycles per image width.
    pub ridge_freq_min: f64,
    pub ridge_freq_max: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_bonafide: 1200,
            n_attack_per_pai: 50,
            pai_types: PaiType::ALL.to_vec(),
            image_height: 32,
            image_width: 64,
            ridge_freq_min: 6.0,
            ridge_freq_max: 12.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_height == 0 || self.image_width == 0 {
            return Err(Error::InvalidConfig("zero image dimension".into()));
        }
        if !(self.ridge_freq_min > 0.0 && self.ridge_freq_min <= self.ridge_freq_max) {
            return Err(Error::InvalidConfig(format!(
                "bad ridge frequency band [{}, {}]",
                self.ridge_freq_min, self.ridge_freq_max
            )));
        }
        Ok(())
    }
}

/// Base texture parameters shared by all images of one pseudo-subject.
struct SubjectParams {
    theta0: f64,
    freq0: f64,
    orient_amp: f64,
    orient_wave: (f64, f64, f64),
    lum_wave: (f64, f64, f64),
}

fn subject_params(cfg: &SynthConfig, subject: usize) -> SubjectParams {
    let mut rng = stream(derive_seed(derive_seed(cfg.seed, 0xB05), subject as u64));
    let band = cfg.ridge_freq_max - cfg.ridge_freq_min;
    SubjectParams {
        theta0: rng.gen_range(0.0..std::f64::consts::PI),
        freq0: cfg.ridge_freq_min + rng.gen_range(0.15..0.85) * band,
        orient_amp: rng.gen_range(0.15..0.40),
        orient_wave: (
            rng.gen_range(0.4..1.2),
            rng.gen_range(0.4..1.2),
            rng.gen_range(0.0..std::f64::consts::TAU),
        ),
        lum_wave: (
            rng.gen_range(0.5..1.5),
            rng.gen_range(0.5..1.5),
            rng.gen_range(0.0..std::f64::consts::TAU),
        ),
    }
}

/// One ridge grating with smoothly varying orientation and luminance.
fn ridge_texture(cfg: &SynthConfig, sp: &SubjectParams, rng: &mut rand_chacha::ChaCha12Rng) -> Tensor {
    let (h, w) = (cfg.image_height, cfg.image_width);
    let phase0: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let dtheta: f64 = rng.gen_range(-0.08..0.08);
    let band = cfg.ridge_freq_max - cfg.ridge_freq_min;
    let df: f64 = rng.gen_range(-0.08..0.08) * band;
    let freq = (sp.freq0 + df).clamp(cfg.ridge_freq_min, cfg.ridge_freq_max);
    let noise_sigma = 0.02;

    let mut data = Vec::with_capacity(h * w);
    let (ou, ov, op) = sp.orient_wave;
    let (lu, lv, lp) = sp.lum_wave;
    for y in 0..h {
        for x in 0..w {
            let xf = x as f64 / w as f64;
            let yf = y as f64 / h as f64;
            let theta = sp.theta0
                + dtheta
                + sp.orient_amp * (std::f64::consts::TAU * (ou * xf + ov * yf) + op).sin();
            // spatial frequency vector has magnitude freq/w cycles per pixel
            let phase = std::f64::consts::TAU * freq / w as f64
                * (x as f64 * theta.cos() + y as f64 * theta.sin())
                + phase0;
            let lum = 0.5 + 0.06 * (std::f64::consts::TAU * (lu * xf + lv * yf) + lp).sin();
            let n: f64 = rng.sample(StandardNormal);
            data.push((lum + 0.33 * phase.cos() + noise_sigma * n).clamp(0.0, 1.0));
        }
    }
    Tensor::new(&[1, h, w], data).expect("shape/data agree")
}

/// Separable Gaussian blur with clamp-to-edge boundaries.
pub fn gaussian_blur(img: &Tensor, sigma: f64) -> Tensor {
    if sigma <= 0.0 {
        return img.clone();
    }
    let (c, h, w) = img.chw().expect("rank-3 image");
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp())
        .collect();
    let ksum: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|v| v / ksum).collect();

    let mut tmp = vec![0.0; c * h * w];
    let src = img.data();
    // horizontal
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let xx = (x as isize + ki as isize - radius).clamp(0, w as isize - 1) as usize;
                    acc += kv * src[ch * h * w + y * w + xx];
                }
                tmp[ch * h * w + y * w + x] = acc;
            }
        }
    }
    // vertical
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let yy = (y as isize + ki as isize - radius).clamp(0, h as isize - 1) as usize;
                    acc += kv * tmp[ch * h * w + yy * w + x];
                }
                out[ch * h * w + y * w + x] = acc;
            }
        }
    }
    Tensor::new(img.shape(), out).expect("shape/data agree")
}

/// Apply one PAI degradation archetype to a clean texture.
pub fn apply_pai(img: &Tensor, pai: PaiType) -> Tensor {
    let (_, h, w) = img.chw().expect("rank-3 image");
    match pai {
        PaiType::Blur => gaussian_blur(img, 2.0),
        PaiType::Halftone => {
            // clustered-dot threshold screen, 4 px cell
            let cell = 4.0;
            let mut out = img.clone();
            let data = out.data_mut();
            for y in 0..h {
                for x in 0..w {
                    let m = 0.5
                        + 0.35
                            * (std::f64::consts::TAU * x as f64 / cell).cos()
                            * (std::f64::consts::TAU * y as f64 / cell).cos();
                    let v = data[y * w + x];
                    data[y * w + x] = if v > m { 0.85 } else { 0.15 };
                }
            }
            out
        }
        PaiType::Flatten => {
            // collapse local contrast toward the local mean
            let mu = gaussian_blur(img, 3.0);
            img.zip_map(&mu, |v, m| m + 0.25 * (v - m))
                .expect("same shape")
        }
        PaiType::Moire => {
            // multiplicative high-frequency grid (display recapture analog)
            let fx = 0.30; // cycles per pixel
            let fy = 0.30;
            let mut out = img.clone();
            let data = out.data_mut();
            for y in 0..h {
                for x in 0..w {
                    let m = (std::f64::consts::TAU * fx * x as f64).cos()
                        * (std::f64::consts::TAU * fy * y as f64).cos();
                    data[y * w + x] = (data[y * w + x] * (1.0 + 0.4 * m)).clamp(0.0, 1.0);
                }
            }
            out
        }
    }
}

/// A bona fide texture drawn from the deterministic stream for index `i`.
pub fn bonafide_image(cfg: &SynthConfig, i: usize) -> Tensor {
    let subject = i / IMAGES_PER_SUBJECT;
    let sp = subject_params(cfg, subject);
    let mut rng = stream(derive_seed(derive_seed(cfg.seed, 0), i as u64));
    ridge_texture(cfg, &sp, &mut rng)
}

/// An attack image: a fresh texture degraded by the given PAI.
pub fn attack_image(cfg: &SynthConfig, pai_index: usize, j: usize) -> Tensor {
    let pai = cfg.pai_types[pai_index];
    let tag = 1 + pai_index as u64;
    let mut rng = stream(derive_seed(derive_seed(cfg.seed, tag), j as u64));
    // attack textures get their own per-image parameters
    let sp = subject_params(cfg, 1_000_000 + pai_index * 100_000 + j);
    let clean = ridge_texture(cfg, &sp, &mut rng);
    apply_pai(&clean, pai)
}

/// Generate the dataset into `out_dir`, writing PNGs plus `manifest.csv`;
/// bit-identical output for equal configs.
pub fn generate_synthetic(cfg: &SynthConfig, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let mut entries = Vec::new();

    for i in 0..cfg.n_bonafide {
        let img = bonafide_image(cfg, i);
        let name = format!("bonafide_{i:05}.png");
        let path = out_dir.join(&name);
        crate::data::imageio::save_image(&img, &path)?;
        entries.push(ManifestEntry {
            sample_id: format!("bonafide_{i:05}"),
            file_path: path.to_string_lossy().into_owned(),
            label: Label::Bonafide,
            pai_type: None,
            subject_id: Some(format!("subj{:04}", i / IMAGES_PER_SUBJECT)),
            device: Some("synth".into()),
        });
    }
    for (pi, pai) in cfg.pai_types.iter().enumerate() {
        for j in 0..cfg.n_attack_per_pai {
            let img = attack_image(cfg, pi, j);
            let name = format!("{pai}_{j:05}.png");
            let path = out_dir.join(&name);
            crate::data::imageio::save_image(&img, &path)?;
            entries.push(ManifestEntry {
                sample_id: format!("{pai}_{j:05}"),
                file_path: path.to_string_lossy().into_owned(),
                label: Label::Attack,
                pai_type: Some(pai.to_string()),
                subject_id: None,
                device: Some("synth".into()),
            });
        }
    }

    let manifest = DatasetManifest::new(entries)?;
    crate::data::save_manifest(&manifest, &out_dir.join("manifest.csv"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn test_cfg() -> SynthConfig {
        SynthConfig {
            n_bonafide: 8,
            n_attack_per_pai: 3,
            pai_types: vec![PaiType::Blur, PaiType::Moire],
            image_height: 32,
            image_width: 64,
            ridge_freq_min: 6.0,
            ridge_freq_max: 12.0,
            seed: 5,
        }
    }

    #[test]
    fn counts_match_config() {
        let dir = tempdir().unwrap();
        let m = generate_synthetic(&test_cfg(), dir.path()).unwrap();
        assert_eq!(m.len(), 8 + 3 * 2);
        assert_eq!(m.bonafide().count(), 8);
        assert_eq!(m.attacks().count(), 6);
        let files: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(files.len(), 8 + 6 + 1); // images + manifest.csv
    }

    #[test]
    fn generation_is_bit_deterministic() {
        let da = tempdir().unwrap();
        let db = tempdir().unwrap();
        generate_synthetic(&test_cfg(), da.path()).unwrap();
        generate_synthetic(&test_cfg(), db.path()).unwrap();
        for entry in std::fs::read_dir(da.path()).unwrap() {
            let entry = entry.unwrap();
            if entry.path().extension().map(|e| e == "png").unwrap_or(false) {
                let a = std::fs::read(entry.path()).unwrap();
                let b = std::fs::read(db.path().join(entry.file_name())).unwrap();
                assert_eq!(a, b, "file {:?} differs", entry.file_name());
            }
        }
    }

    /// Power at integer DFT bin (u,v), computed by direct projection — an
    /// independent spectral oracle.
    fn bin_power(img: &Tensor, u: usize, v: usize) -> f64 {
        let (_, h, w) = img.chw().unwrap();
        let mean = img.mean();
        let (mut re, mut im) = (0.0, 0.0);
        for y in 0..h {
            for x in 0..w {
                let ph = std::f64::consts::TAU
                    * (u as f64 * x as f64 / w as f64 + v as f64 * y as f64 / h as f64);
                let val = img.data()[y * w + x] - mean;
                re += val * ph.cos();
                im -= val * ph.sin();
            }
        }
        re * re + im * im
    }

    /// Fraction of AC spectral power lying inside the configured ridge band.
    fn ridge_band_ratio(img: &Tensor, cfg: &SynthConfig) -> f64 {
        let (_, h, w) = img.chw().unwrap();
        let lo = cfg.ridge_freq_min / w as f64 * 0.7;
        let hi = cfg.ridge_freq_max / w as f64 * 1.3;
        let mut band = 0.0;
        for v in 0..h / 2 + 1 {
            for u in 0..w / 2 + 1 {
                if u == 0 && v == 0 {
                    continue;
                }
                let kappa = ((u as f64 / w as f64).powi(2) + (v as f64 / h as f64).powi(2)).sqrt();
                if kappa >= lo && kappa <= hi {
                    band += bin_power(img, u, v);
                    // mirrored bin (u, h-v) carries the other diagonal orientation
                    if v > 0 && v < h / 2 {
                        band += bin_power(img, u, h - v);
                    }
                }
            }
        }
        let n = (h * w) as f64;
        let var = img.data().iter().map(|x| (x - img.mean()).powi(2)).sum::<f64>() / n;
        // Parseval: total AC power in this DFT normalization is var * n^2 / ... —
        // compare band power against the total measured the same way instead.
        let mut total = 0.0;
        for v in 0..h / 2 + 1 {
            for u in 0..w / 2 + 1 {
                if u == 0 && v == 0 {
                    continue;
                }
                total += bin_power(img, u, v);
                if v > 0 && v < h / 2 {
                    total += bin_power(img, u, h - v);
                }
            }
        }
        let _ = var;
        band / total.max(1e-12)
    }

    #[test]
    fn spectrum_peak_in_band_and_blur_attenuates_high_freq() {
        let cfg = SynthConfig {
            n_bonafide: 6,
            ..test_cfg()
        };
        // mean radial spectral peak of bona fide lies inside the band
        let (h, w) = (cfg.image_height, cfg.image_width);
        let mut peak_sum = 0.0;
        for i in 0..6 {
            let img = bonafide_image(&cfg, i);
            let mut best = (0.0f64, 0.0f64);
            for v in 0..h / 2 + 1 {
                for u in 0..w / 2 + 1 {
                    if u == 0 && v == 0 {
                        continue;
                    }
                    let kappa =
                        ((u as f64 / w as f64).powi(2) + (v as f64 / h as f64).powi(2)).sqrt();
                    for &(uu, vv) in &[(u, v), (u, (h - v) % h)] {
                        let p = bin_power(&img, uu, vv);
                        if p > best.0 {
                            best = (p, kappa);
                        }
                    }
                }
            }
            peak_sum += best.1;
        }
        let mean_peak = peak_sum / 6.0;
        let lo = cfg.ridge_freq_min / w as f64;
        let hi = cfg.ridge_freq_max / w as f64;
        assert!(
            mean_peak >= lo * 0.8 && mean_peak <= hi * 1.2,
            "mean spectral peak {mean_peak} outside [{lo}, {hi}]"
        );

        // blur attenuates power above the band floor
        let hf_power = |img: &Tensor| {
            let mut s = 0.0;
            for v in 0..h / 2 + 1 {
                for u in 0..w / 2 + 1 {
                    let kappa =
                        ((u as f64 / w as f64).powi(2) + (v as f64 / h as f64).powi(2)).sqrt();
                    if kappa > 0.08 {
                        s += bin_power(img, u, v);
                    }
                }
            }
            s
        };
        let clean = bonafide_image(&cfg, 0);
        let blurred = apply_pai(&clean, PaiType::Blur);
        assert!(
            hf_power(&blurred) < 0.5 * hf_power(&clean),
            "blur should cut high-frequency power"
        );
    }

    #[test]
    fn spectral_statistic_separates_populations_auc() {
        // Trivial hand-crafted statistic: robust deviation of (ridge-band
        // power ratio, log AC power) from the bona fide typical values.
        // Pooled AUC over all PAIs must exceed 0.9.
        let cfg = SynthConfig {
            n_bonafide: 40,
            n_attack_per_pai: 10,
            pai_types: PaiType::ALL.to_vec(),
            ..test_cfg()
        };
        let features = |img: &Tensor| {
            let m = img.mean();
            let var = img.data().iter().map(|x| (x - m).powi(2)).sum::<f64>()
                / img.numel() as f64;
            (ridge_band_ratio(img, &cfg), var.max(1e-12).ln())
        };
        let bona: Vec<(f64, f64)> = (0..cfg.n_bonafide)
            .map(|i| features(&bonafide_image(&cfg, i)))
            .collect();
        let mut attack = Vec::new();
        for pi in 0..cfg.pai_types.len() {
            for j in 0..cfg.n_attack_per_pai {
                attack.push(features(&attack_image(&cfg, pi, j)));
            }
        }
        let med = |xs: &[f64]| {
            let mut s = xs.to_vec();
            s.sort_by(|a, b| a.partial_cmp(b).unwrap());
            s[s.len() / 2]
        };
        let r_med = med(&bona.iter().map(|f| f.0).collect::<Vec<_>>());
        let v_med = med(&bona.iter().map(|f| f.1).collect::<Vec<_>>());
        let r_mad = med(&bona.iter().map(|f| (f.0 - r_med).abs()).collect::<Vec<_>>());
        let v_mad = med(&bona.iter().map(|f| (f.1 - v_med).abs()).collect::<Vec<_>>());
        let score = |f: &(f64, f64)| {
            let zr = (f.0 - r_med).abs() / (r_mad + 1e-9);
            let zv = (f.1 - v_med).abs() / (v_mad + 1e-9);
            zr.max(zv)
        };
        // AUC by pairwise comparison: attack scores should exceed bona scores
        let mut wins = 0.0;
        let mut total = 0.0;
        for b in &bona {
            for a in &attack {
                total += 1.0;
                if score(a) > score(b) {
                    wins += 1.0;
                } else if (score(a) - score(b)).abs() < 1e-15 {
                    wins += 0.5;
                }
            }
        }
        let auc = wins / total;
        assert!(auc > 0.9, "spectral statistic AUC {auc} too low");
    }

    #[test]
    fn blur_kernel_preserves_mass() {
        let img = Tensor::filled(&[1, 8, 8], 0.37);
        let b = gaussian_blur(&img, 2.0);
        for v in b.data() {
            assert!((v - 0.37).abs() < 1e-12);
        }
    }
}

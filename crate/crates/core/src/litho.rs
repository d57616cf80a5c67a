//! Threshold lithography model used as the labeling oracle.
//!
//! Aerial intensity is a weighted sum of squared Gaussian-blurred masks with
//! toroidal wrap-around; the resist prints wherever intensity reaches the
//! threshold. Nothing in here is differentiated.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LadaError, Result};
use crate::image::{BinaryImage, MaskImage, ResistImage, CANVAS};

/// Threshold produced by [`calibrate_threshold`] for the default kernels and probes.
pub const DEFAULT_THETA: f64 = 0.16;

/// Serialised form of a kernel set: `{K, sigmas, weights, theta}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelConfig {
    #[serde(rename = "K")]
    pub k: usize,
    pub sigmas: Vec<f64>,
    pub weights: Vec<f64>,
    pub theta: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            k: 3,
            sigmas: vec![1.5, 3.0, 6.0],
            weights: vec![0.6, 0.3, 0.1],
            theta: DEFAULT_THETA,
        }
    }
}

/// One isotropic Gaussian kernel on a square window of half-width `radius`.
///
/// Stored as its normalised 1-D profile; the 2-D taps are the outer product.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    pub sigma: f64,
    pub radius: usize,
    profile: Vec<f64>,
}

impl Kernel {
    fn gaussian(sigma: f64) -> Self {
        let radius = (4.0 * sigma).ceil() as usize;
        let raw: Vec<f64> = (-(radius as i64)..=radius as i64)
            .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
            .collect();
        let z: f64 = raw.iter().sum();
        Kernel {
            sigma,
            radius,
            profile: raw.into_iter().map(|v| v / z).collect(),
        }
    }

    /// Tap at offset `(dy, dx)` from the centre.
    pub fn tap(&self, dy: i64, dx: i64) -> f64 {
        let r = self.radius as i64;
        if dy.abs() > r || dx.abs() > r {
            return 0.0;
        }
        self.profile[(dy + r) as usize] * self.profile[(dx + r) as usize]
    }

    /// Full `(2r+1) x (2r+1)` tap array, row-major.
    pub fn taps(&self) -> Vec<f64> {
        let r = self.radius as i64;
        (-r..=r).flat_map(|dy| (-r..=r).map(move |dx| (dy, dx))).map(|(dy, dx)| self.tap(dy, dx)).collect()
    }

    /// Toroidal convolution of a plane with this kernel, done as two 1-D passes.
    fn convolve(&self, plane: &[f64], h: usize, w: usize) -> Vec<f64> {
        let r = self.radius as isize;
        let mut tmp = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (t, &g) in self.profile.iter().enumerate() {
                    let sx = (x as isize + t as isize - r).rem_euclid(w as isize) as usize;
                    acc += g * plane[y * w + sx];
                }
                tmp[y * w + x] = acc;
            }
        }
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (t, &g) in self.profile.iter().enumerate() {
                    let sy = (y as isize + t as isize - r).rem_euclid(h as isize) as usize;
                    acc += g * tmp[sy * w + x];
                }
                out[y * w + x] = acc;
            }
        }
        out
    }
}

/// Weighted lithography kernels plus the resist threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelSet {
    pub kernels: Vec<Kernel>,
    pub weights: Vec<f64>,
    pub theta: f64,
}

/// Light intensity on the wafer.
#[derive(Clone, Debug, PartialEq)]
pub struct AerialImage {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl AerialImage {
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.w + x]
    }
}

/// Builds kernels without validating `theta`; used by calibration.
fn build_unthresholded(sigmas: &[f64], weights: &[f64]) -> Result<(Vec<Kernel>, Vec<f64>)> {
    if sigmas.is_empty() || sigmas.len() != weights.len() {
        return Err(LadaError::InvalidConfig(format!(
            "kernel config needs matching non-empty sigmas/weights, got {}/{}",
            sigmas.len(),
            weights.len()
        )));
    }
    if let Some(s) = sigmas.iter().find(|&&s| !(s > 0.0 && s.is_finite())) {
        return Err(LadaError::InvalidConfig(format!("kernel sigma must be positive, got {s}")));
    }
    if sigmas.windows(2).any(|p| p[1] <= p[0]) {
        return Err(LadaError::InvalidConfig("kernel sigmas must be ascending".into()));
    }
    if let Some(w) = weights.iter().find(|&&w| !(w > 0.0 && w.is_finite())) {
        return Err(LadaError::InvalidConfig(format!("kernel weight must be positive, got {w}")));
    }
    let total: f64 = weights.iter().sum();
    let weights = if (total - 1.0).abs() < 1e-12 {
        weights.to_vec()
    } else {
        weights.iter().map(|w| w / total).collect()
    };
    Ok((sigmas.iter().map(|&s| Kernel::gaussian(s)).collect(), weights))
}

pub fn build_kernels(cfg: &KernelConfig) -> Result<KernelSet> {
    if cfg.k != cfg.sigmas.len() {
        return Err(LadaError::InvalidConfig(format!(
            "K = {} but {} sigmas given",
            cfg.k,
            cfg.sigmas.len()
        )));
    }
    if !(cfg.theta > 0.0 && cfg.theta < 1.0) {
        return Err(LadaError::InvalidConfig(format!("theta must lie in (0,1), got {}", cfg.theta)));
    }
    let (kernels, weights) = build_unthresholded(&cfg.sigmas, &cfg.weights)?;
    Ok(KernelSet {
        kernels,
        weights,
        theta: cfg.theta,
    })
}

impl KernelSet {
    pub fn config(&self) -> KernelConfig {
        KernelConfig {
            k: self.kernels.len(),
            sigmas: self.kernels.iter().map(|k| k.sigma).collect(),
            weights: self.weights.clone(),
            theta: self.theta,
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(&self.config())?;
        std::fs::write(path, s).map_err(|e| LadaError::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| LadaError::io(path, e))?;
        build_kernels(&serde_json::from_str(&s)?)
    }
}

fn aerial_of(kernels: &[Kernel], weights: &[f64], mask: &MaskImage) -> AerialImage {
    let (h, w) = mask.dims();
    let plane: Vec<f64> = mask.data().iter().map(|&v| v as f64).collect();
    let mut data = vec![0.0; h * w];
    for (k, &wk) in kernels.iter().zip(weights) {
        let field = k.convolve(&plane, h, w);
        for (d, f) in data.iter_mut().zip(field) {
            *d += wk * f * f;
        }
    }
    for d in &mut data {
        *d = d.min(1.0);
    }
    AerialImage { h, w, data }
}

/// `I = sum_k w_k (M * h_k)^2` with toroidal wrap.
pub fn simulate_aerial(mask: &MaskImage, ks: &KernelSet) -> AerialImage {
    aerial_of(&ks.kernels, &ks.weights, mask)
}

/// Prints every pixel whose intensity is at least `theta`.
pub fn apply_resist(aerial: &AerialImage, theta: f64) -> ResistImage {
    BinaryImage::from_fn(aerial.h, aerial.w, |y, x| aerial.get(y, x) >= theta)
}

/// The labeling oracle.
pub fn simulate(mask: &MaskImage, ks: &KernelSet) -> ResistImage {
    apply_resist(&simulate_aerial(mask, ks), ks.theta)
}

/// Projects a real-valued image onto the binary mask domain (`raw >= 0` prints).
pub fn legalize(raw: &[f32], h: usize, w: usize) -> Result<MaskImage> {
    if raw.len() != h * w {
        return Err(LadaError::InvalidInput(format!(
            "legalize: {} values for {h}x{w}",
            raw.len()
        )));
    }
    Ok(BinaryImage::from_fn(h, w, |y, x| raw[y * w + x] >= 0.0))
}

/// Centered squares of sides 8, 12, 16 and 24.
pub fn default_probes() -> Vec<MaskImage> {
    [8, 12, 16, 24]
        .iter()
        .map(|&s| BinaryImage::centered_square(CANVAS, s))
        .collect()
}

/// Grid-searches `theta in {0.01, ..., 0.99}` for the value whose printed areas
/// best match the probe mask areas. Ties go to the smaller theta.
pub fn calibrate_threshold(sigmas: &[f64], weights: &[f64], probes: &[MaskImage]) -> Result<f64> {
    if probes.is_empty() {
        return Err(LadaError::InvalidInput("calibrate_threshold needs at least one probe".into()));
    }
    let (kernels, weights) = build_unthresholded(sigmas, weights)?;
    let aerials: Vec<AerialImage> = probes.iter().map(|p| aerial_of(&kernels, &weights, p)).collect();
    let mut best = (usize::MAX, 0.0);
    for i in 1..=99 {
        let theta = i as f64 / 100.0;
        let cost: usize = probes
            .iter()
            .zip(&aerials)
            .map(|(p, a)| apply_resist(a, theta).count_ones().abs_diff(p.count_ones()))
            .sum();
        if cost < best.0 {
            best = (cost, theta);
        }
    }
    Ok(best.1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn defaults() -> KernelSet {
        build_kernels(&KernelConfig::default()).unwrap()
    }

    #[test]
    fn single_kernel_is_normalised() {
        let ks = build_kernels(&KernelConfig {
            k: 1,
            sigmas: vec![1.5],
            weights: vec![1.0],
            theta: 0.5,
        })
        .unwrap();
        let s: f64 = ks.kernels[0].taps().iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
        assert_eq!(ks.kernels[0].radius, 6);
    }

    #[test]
    fn default_weights_unchanged() {
        assert_eq!(defaults().weights, vec![0.6, 0.3, 0.1]);
    }

    #[test]
    fn kernels_point_symmetric_and_nonnegative() {
        for k in &defaults().kernels {
            let r = k.radius as i64;
            for dy in -r..=r {
                for dx in -r..=r {
                    assert_eq!(k.tap(dy, dx), k.tap(-dy, -dx));
                    assert!(k.tap(dy, dx) >= 0.0);
                }
            }
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = KernelConfig::default();
        c.sigmas[0] = 0.0;
        assert!(build_kernels(&c).is_err());
        let mut c = KernelConfig::default();
        c.weights[1] = -0.1;
        assert!(build_kernels(&c).is_err());
        let mut c = KernelConfig::default();
        c.theta = 1.0;
        assert!(build_kernels(&c).is_err());
        let mut c = KernelConfig::default();
        c.k = 2;
        assert!(build_kernels(&c).is_err());
    }

    #[test]
    fn constant_masks() {
        let ks = defaults();
        let zero = simulate_aerial(&BinaryImage::zeros(64, 64), &ks);
        assert!(zero.data.iter().all(|&v| v == 0.0));
        let one = simulate_aerial(&BinaryImage::ones(64, 64), &ks);
        assert!(one.data.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        assert_eq!(simulate(&BinaryImage::zeros(64, 64), &ks).count_ones(), 0);
    }

    #[test]
    fn resist_threshold_is_inclusive() {
        let a = AerialImage {
            h: 1,
            w: 3,
            data: vec![0.19, 0.2, 0.21],
        };
        assert_eq!(apply_resist(&a, 0.2).data(), &[0, 1, 1]);
        let ones = AerialImage {
            h: 2,
            w: 2,
            data: vec![1.0; 4],
        };
        assert_eq!(apply_resist(&ones, 0.2).count_ones(), 4);
        let zeros = AerialImage {
            h: 2,
            w: 2,
            data: vec![0.0; 4],
        };
        assert_eq!(apply_resist(&zeros, 0.2).count_ones(), 0);
    }

    #[test]
    fn legalize_ties_print() {
        let m = legalize(&[0.0; 4], 2, 2).unwrap();
        assert_eq!(m.count_ones(), 4);
        assert!(legalize(&[0.0; 3], 2, 2).is_err());
    }

    #[test]
    fn calibration_empty_probe_set_rejected() {
        assert!(calibrate_threshold(&[1.5], &[1.0], &[]).is_err());
    }

    #[test]
    fn calibration_all_ones_probe_picks_smallest() {
        let t = calibrate_threshold(&[1.5, 3.0, 6.0], &[0.6, 0.3, 0.1], &[BinaryImage::ones(64, 64)]).unwrap();
        assert_eq!(t, 0.01);
    }

    #[test]
    fn json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("k.json");
        let ks = defaults();
        ks.write_json(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.contains("\"K\": 3"));
        assert_eq!(KernelSet::read_json(&p).unwrap(), ks);
    }
}

//! Synthetic parcels with planted absorption features.
//!
//! Every pixel spectrum is a fixed smooth base curve minus one Gaussian dip
//! per planted band, whose depth is a strictly increasing (logistic) function
//! of the standardized target value, plus i.i.d. Gaussian noise. With
//! `noise_sd = 0` and non-overlapping dips the masked mean reflectance at a
//! planted band is a strictly decreasing function of its target.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{BandAxis, Dataset, HyperPatch, SoilTargets, Split, Target};
use crate::error::{Error, Result};
use crate::util::fingerprint;

/// Maximum dip depth in reflectance units.
const DIP_DEPTH: f64 = 0.1;
/// Dip width (Gaussian sigma), in bands. The profile is cut off at 3 sigma.
const DIP_SIGMA_BANDS: f64 = 1.0;
/// Variance inflation applied to outlier draws.
const OUTLIER_SCALE: f64 = 3.0;

/// Log-normal marginal parameters for P, K and Mg: (median in mg/kg, sigma of ln).
const LOGNORMAL: [(f64, f64); 3] = [(60.0, 0.45), (200.0, 0.35), (160.0, 0.35)];
/// Truncated-normal pH: mean, sd, support.
const PH_MEAN: f64 = 6.5;
const PH_SD: f64 = 0.55;
const PH_RANGE: (f64, f64) = (3.0, 10.0);

/// Centre bands of each target's absorption dips, keyed by target name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedBands {
    #[serde(rename = "P")]
    pub p: Vec<usize>,
    #[serde(rename = "K")]
    pub k: Vec<usize>,
    #[serde(rename = "Mg")]
    pub mg: Vec<usize>,
    #[serde(rename = "pH")]
    pub ph: Vec<usize>,
}

impl PlantedBands {
    pub fn new(p: Vec<usize>, k: Vec<usize>, mg: Vec<usize>, ph: Vec<usize>) -> Self {
        PlantedBands { p, k, mg, ph }
    }

    pub fn get(&self, target: Target) -> &[usize] {
        match target {
            Target::P => &self.p,
            Target::K => &self.k,
            Target::Mg => &self.mg,
            Target::Ph => &self.ph,
        }
    }

    pub fn get_mut(&mut self, target: Target) -> &mut Vec<usize> {
        match target {
            Target::P => &mut self.p,
            Target::K => &mut self.k,
            Target::Mg => &mut self.mg,
            Target::Ph => &mut self.ph,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub axis: BandAxis,
    pub planted_bands: PlantedBands,
    /// `[min_side, max_side]` in pixels, sampled uniformly per side.
    pub patch_size_range: [usize; 2],
    pub noise_sd: f64,
    pub outlier_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_train: 200,
            n_test: 80,
            axis: BandAxis {
                n_bands: 50,
                lambda_min_nm: 462.080,
                lambda_max_nm: 938.370,
            },
            planted_bands: PlantedBands {
                p: vec![8],
                k: vec![19],
                mg: vec![31],
                ph: vec![42],
            },
            patch_size_range: [6, 24],
            noise_sd: 0.01,
            outlier_fraction: 0.05,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        self.axis.validate()?;
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::Config("n_train and n_test must be positive".into()));
        }
        let [lo, hi] = self.patch_size_range;
        if lo > hi {
            return Err(Error::Config(format!("degenerate patch_size_range [{lo}, {hi}]")));
        }
        if lo < 4 {
            return Err(Error::Config(format!("min_side {lo} is below 4")));
        }
        if !(self.noise_sd.is_finite() && self.noise_sd >= 0.0) {
            return Err(Error::Config(format!("noise_sd {} must be >= 0", self.noise_sd)));
        }
        if !(0.0..=0.2).contains(&self.outlier_fraction) {
            return Err(Error::Config(format!(
                "outlier_fraction {} outside [0, 0.2]",
                self.outlier_fraction
            )));
        }
        for target in Target::ALL {
            let bands = self.planted_bands.get(target);
            if bands.is_empty() || bands.len() > 3 {
                return Err(Error::Config(format!(
                    "target {target} needs 1 to 3 planted bands, got {}",
                    bands.len()
                )));
            }
            if let Some(&b) = bands.iter().find(|&&b| b >= self.axis.n_bands) {
                return Err(Error::Config(format!(
                    "planted band {b} for {target} exceeds axis of {} bands",
                    self.axis.n_bands
                )));
            }
        }
        Ok(())
    }
}

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn base_curve(t: f64) -> f64 {
    0.18 + 0.28 * t + 0.03 * (2.5 * std::f64::consts::PI * t).sin()
}

fn dip_profile(distance_bands: f64) -> f64 {
    if distance_bands.abs() > 3.0 * DIP_SIGMA_BANDS {
        0.0
    } else {
        (-0.5 * (distance_bands / DIP_SIGMA_BANDS).powi(2)).exp()
    }
}

/// Draws the four targets and returns them with their standardized scores.
fn draw_targets(rng: &mut ChaCha8Rng, outlier: bool) -> (SoilTargets, [f64; 4]) {
    let scale = if outlier { OUTLIER_SCALE } else { 1.0 };
    let mut values = [0.0; 4];
    let mut scores = [0.0; 4];
    for (i, &(median, sigma)) in LOGNORMAL.iter().enumerate() {
        let z: f64 = rng.sample::<f64, _>(StandardNormal) * scale;
        values[i] = median * (sigma * z).exp();
        scores[i] = z;
    }
    let ph = loop {
        let z: f64 = rng.sample::<f64, _>(StandardNormal) * scale;
        let v = PH_MEAN + PH_SD * z;
        if (PH_RANGE.0..=PH_RANGE.1).contains(&v) {
            scores[3] = z;
            break v;
        }
    };
    values[3] = ph;
    let targets = SoilTargets {
        p: values[0],
        k: values[1],
        mg: values[2],
        ph: values[3],
    };
    (targets, scores)
}

fn elliptic_mask(height: usize, width: usize, radius: f64) -> Vec<bool> {
    let (cy, cx) = (height as f64 / 2.0, width as f64 / 2.0);
    let mut mask = Vec::with_capacity(height * width);
    for r in 0..height {
        for c in 0..width {
            let dy = (r as f64 + 0.5 - cy) / cy;
            let dx = (c as f64 + 0.5 - cx) / cx;
            mask.push(dy * dy + dx * dx <= radius * radius);
        }
    }
    // at least one field pixel per patch
    if !mask.iter().any(|&m| m) {
        mask[(height / 2) * width + width / 2] = true;
    }
    mask
}

/// Generates a dataset as a pure function of `cfg` (including its seed).
pub fn gen_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let axis = cfg.axis;
    let b = axis.n_bands;
    let base: Vec<f64> = (0..b).map(|j| base_curve(j as f64 / (b - 1) as f64)).collect();
    let noise = if cfg.noise_sd > 0.0 {
        Some(Normal::new(0.0, cfg.noise_sd).map_err(|e| Error::Config(e.to_string()))?)
    } else {
        None
    };

    let n = cfg.n_train + cfg.n_test;
    let mut patches = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    let mut split = Vec::with_capacity(n);
    let [lo, hi] = cfg.patch_size_range;

    for idx in 0..n {
        let outlier = rng.random::<f64>() < cfg.outlier_fraction;
        let (soil, scores) = draw_targets(&mut rng, outlier);
        let height = rng.random_range(lo..=hi);
        let width = rng.random_range(lo..=hi);
        let radius = rng.random_range(0.9..1.3);
        let mask = elliptic_mask(height, width, radius);

        let mut clean = base.clone();
        for target in Target::ALL {
            let depth = DIP_DEPTH * logistic(scores[target.index()]);
            for &centre in cfg.planted_bands.get(target) {
                for (j, v) in clean.iter_mut().enumerate() {
                    *v -= depth * dip_profile(j as f64 - centre as f64);
                }
            }
        }

        let mut cube = Vec::with_capacity(height * width * b);
        for _ in 0..height * width {
            for &v in &clean {
                let noisy = match &noise {
                    Some(dist) => v + dist.sample(&mut rng),
                    None => v,
                };
                cube.push(noisy.max(0.0) as f32);
            }
        }

        patches.push(HyperPatch {
            height,
            width,
            cube,
            mask,
            axis,
        });
        targets.push(soil);
        split.push(if idx < cfg.n_train { Split::Train } else { Split::Test });
    }

    let cfg_json = serde_json::to_vec(cfg).expect("config serializes");
    let provenance = format!("synthetic:sha256={}", fingerprint(&cfg_json));
    let ds = Dataset {
        axis,
        patches,
        targets,
        split,
        provenance,
    };
    ds.validate()?;
    Ok(ds)
}

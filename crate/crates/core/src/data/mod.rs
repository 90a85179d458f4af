//! Patches, soil targets, band axes and dataset containers.

mod io;
mod synthetic;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{load_dataset, save_dataset, MANIFEST_FILE, MANIFEST_VERSION};
pub use synthetic::{gen_synthetic, PlantedBands, SyntheticConfig};

/// Linearly spaced wavelength axis shared by every patch of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandAxis {
    pub n_bands: usize,
    pub lambda_min_nm: f64,
    pub lambda_max_nm: f64,
}

impl BandAxis {
    pub fn new(n_bands: usize, lambda_min_nm: f64, lambda_max_nm: f64) -> Result<Self> {
        let axis = BandAxis {
            n_bands,
            lambda_min_nm,
            lambda_max_nm,
        };
        axis.validate()?;
        Ok(axis)
    }

    /// 150 bands spanning 462.080 to 938.370 nm.
    pub fn hyperview() -> Self {
        BandAxis {
            n_bands: 150,
            lambda_min_nm: 462.080,
            lambda_max_nm: 938.370,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_bands < 2 {
            return Err(Error::Config(format!(
                "band axis needs at least 2 bands, got {}",
                self.n_bands
            )));
        }
        if !(self.lambda_min_nm.is_finite() && self.lambda_max_nm.is_finite())
            || self.lambda_min_nm >= self.lambda_max_nm
        {
            return Err(Error::Config(format!(
                "band axis needs lambda_min < lambda_max, got [{}, {}]",
                self.lambda_min_nm, self.lambda_max_nm
            )));
        }
        Ok(())
    }

    /// Spacing between consecutive band centres, in nm.
    pub fn step_nm(&self) -> f64 {
        (self.lambda_max_nm - self.lambda_min_nm) / (self.n_bands - 1) as f64
    }

    pub fn wavelength_of(&self, band_index: usize) -> Result<f64> {
        if band_index >= self.n_bands {
            return Err(Error::BandOutOfRange {
                index: band_index,
                n_bands: self.n_bands,
            });
        }
        Ok(self.lambda_min_nm + band_index as f64 * self.step_nm())
    }
}

/// Free-function form of [`BandAxis::wavelength_of`].
pub fn wavelength_of(band_index: usize, axis: &BandAxis) -> Result<f64> {
    axis.wavelength_of(band_index)
}

/// One field parcel: a reflectance cube laid out `[row][col][band]` plus a
/// field mask (`true` marks a field pixel).
#[derive(Debug, Clone, PartialEq)]
pub struct HyperPatch {
    pub height: usize,
    pub width: usize,
    pub cube: Vec<f32>,
    pub mask: Vec<bool>,
    pub axis: BandAxis,
}

impl HyperPatch {
    pub fn new(height: usize, width: usize, cube: Vec<f32>, mask: Vec<bool>, axis: BandAxis) -> Result<Self> {
        let patch = HyperPatch {
            height,
            width,
            cube,
            mask,
            axis,
        };
        patch.validate().map_err(Error::Invalid)?;
        Ok(patch)
    }

    pub(crate) fn validate(&self) -> std::result::Result<(), String> {
        let n_pixels = self.height * self.width;
        if n_pixels == 0 {
            return Err("patch has no pixels".into());
        }
        if self.cube.len() != n_pixels * self.axis.n_bands {
            return Err(format!(
                "cube holds {} values, expected {}x{}x{}",
                self.cube.len(),
                self.height,
                self.width,
                self.axis.n_bands
            ));
        }
        if self.mask.len() != n_pixels {
            return Err(format!("mask holds {} pixels, expected {}", self.mask.len(), n_pixels));
        }
        if !self.mask.iter().any(|&m| m) {
            return Err("mask has no field pixels".into());
        }
        if self.cube.iter().any(|v| !v.is_finite()) {
            return Err("non-finite reflectance".into());
        }
        if self.cube.iter().any(|&v| v < 0.0) {
            return Err("negative reflectance".into());
        }
        Ok(())
    }

    pub fn n_bands(&self) -> usize {
        self.axis.n_bands
    }

    /// Reflectance spectrum of pixel `(row, col)`.
    pub fn spectrum(&self, row: usize, col: usize) -> &[f32] {
        let b = self.axis.n_bands;
        let start = (row * self.width + col) * b;
        &self.cube[start..start + b]
    }

    pub fn is_field(&self, row: usize, col: usize) -> bool {
        self.mask[row * self.width + col]
    }

    pub fn masked_pixel_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// The four soil parameters, one regressor each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Target {
    P,
    K,
    Mg,
    #[serde(rename = "pH")]
    Ph,
}

impl Target {
    pub const ALL: [Target; 4] = [Target::P, Target::K, Target::Mg, Target::Ph];

    pub fn name(self) -> &'static str {
        match self {
            Target::P => "P",
            Target::K => "K",
            Target::Mg => "Mg",
            Target::Ph => "pH",
        }
    }

    pub fn index(self) -> usize {
        match self {
            Target::P => 0,
            Target::K => 1,
            Target::Mg => 2,
            Target::Ph => 3,
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "p" => Ok(Target::P),
            "k" => Ok(Target::K),
            "mg" => Ok(Target::Mg),
            "ph" => Ok(Target::Ph),
            _ => Err(Error::Invalid(format!("unknown target {s:?}"))),
        }
    }
}

/// Ground-truth soil parameters of one parcel. P, K and Mg in mg/kg.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoilTargets {
    pub p: f64,
    pub k: f64,
    pub mg: f64,
    pub ph: f64,
}

impl SoilTargets {
    pub fn get(&self, target: Target) -> f64 {
        match target {
            Target::P => self.p,
            Target::K => self.k,
            Target::Mg => self.mg,
            Target::Ph => self.ph,
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        let all = [self.p, self.k, self.mg, self.ph];
        if all.iter().any(|v| !v.is_finite()) {
            return Err("non-finite target".into());
        }
        if self.p <= 0.0 || self.k <= 0.0 || self.mg <= 0.0 {
            return Err("P, K and Mg must be positive".into());
        }
        if !(3.0..=10.0).contains(&self.ph) {
            return Err(format!("pH {} outside [3, 10]", self.ph));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub axis: BandAxis,
    pub patches: Vec<HyperPatch>,
    pub targets: Vec<SoilTargets>,
    pub split: Vec<Split>,
    pub provenance: String,
}

impl Dataset {
    pub fn new(
        patches: Vec<HyperPatch>,
        targets: Vec<SoilTargets>,
        split: Vec<Split>,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        let axis = patches
            .first()
            .map(|p| p.axis)
            .ok_or_else(|| Error::Invalid("dataset has no patches".into()))?;
        let ds = Dataset {
            axis,
            patches,
            targets,
            split,
            provenance: provenance.into(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        self.axis.validate()?;
        let n = self.patches.len();
        if self.targets.len() != n || self.split.len() != n {
            return Err(Error::Invalid(format!(
                "{} patches, {} targets and {} split labels are not aligned",
                n,
                self.targets.len(),
                self.split.len()
            )));
        }
        for (i, patch) in self.patches.iter().enumerate() {
            if patch.axis != self.axis {
                return Err(Error::Patch {
                    patch: i,
                    reason: "band axis differs from dataset axis".into(),
                });
            }
            patch.validate().map_err(|reason| Error::Patch { patch: i, reason })?;
            self.targets[i]
                .validate()
                .map_err(|reason| Error::Patch { patch: i, reason })?;
        }
        if !self.split.contains(&Split::Train) || !self.split.contains(&Split::Test) {
            return Err(Error::Invalid("dataset needs both train and test samples".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    /// Sample indices belonging to `split`, in dataset order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.split
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Target values for the given sample indices.
    pub fn target_values(&self, target: Target, indices: &[usize]) -> Vec<f64> {
        indices.iter().map(|&i| self.targets[i].get(target)).collect()
    }
}

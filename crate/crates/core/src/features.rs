//! Patch-level feature extraction with group and band provenance.
//!
//! Groups are emitted in a fixed order: `mean_spectrum`, `std_spectrum`,
//! `grad1`, `grad2`, then (spatial mode only) `spatial_var`, `spatial_edge`
//! and `meta`. A spectral schema over `b` bands has `4b - 3` columns, a
//! spatial one `6b - 1`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{BandAxis, Dataset, HyperPatch};
use crate::error::{Error, Result};
use crate::util::fingerprint;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformationGroup {
    MeanSpectrum,
    StdSpectrum,
    Grad1,
    Grad2,
    SpatialVar,
    SpatialEdge,
    Meta,
}

impl TransformationGroup {
    pub const ALL: [TransformationGroup; 7] = [
        TransformationGroup::MeanSpectrum,
        TransformationGroup::StdSpectrum,
        TransformationGroup::Grad1,
        TransformationGroup::Grad2,
        TransformationGroup::SpatialVar,
        TransformationGroup::SpatialEdge,
        TransformationGroup::Meta,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TransformationGroup::MeanSpectrum => "mean_spectrum",
            TransformationGroup::StdSpectrum => "std_spectrum",
            TransformationGroup::Grad1 => "grad1",
            TransformationGroup::Grad2 => "grad2",
            TransformationGroup::SpatialVar => "spatial_var",
            TransformationGroup::SpatialEdge => "spatial_edge",
            TransformationGroup::Meta => "meta",
        }
    }

    pub fn is_spatial(self) -> bool {
        matches!(
            self,
            TransformationGroup::SpatialVar | TransformationGroup::SpatialEdge | TransformationGroup::Meta
        )
    }
}

impl fmt::Display for TransformationGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TransformationGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TransformationGroup::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown transformation group {s:?}")))
    }
}

/// Where a feature sits on the band axis.
///
/// Gradient features are attributed to the lower band of their difference
/// stencil.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Band(usize),
    Nonspectral,
}

impl Provenance {
    pub fn band(self) -> Option<usize> {
        match self {
            Provenance::Band(b) => Some(b),
            Provenance::Nonspectral => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureEntry {
    pub group: TransformationGroup,
    pub provenance: Provenance,
}

impl FeatureEntry {
    /// Column header, `g:<group>|b:<band|NA>`.
    pub fn header(&self) -> String {
        match self.provenance {
            Provenance::Band(b) => format!("g:{}|b:{b}", self.group),
            Provenance::Nonspectral => format!("g:{}|b:NA", self.group),
        }
    }
}

/// Ordered feature descriptions. Feature id = position in `entries`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub entries: Vec<FeatureEntry>,
    pub axis: BandAxis,
    pub spatial_enabled: bool,
}

impl FeatureSchema {
    /// The full schema produced by [`extract_patch`] for `axis`.
    pub fn standard(axis: BandAxis, spatial: bool) -> Self {
        let b = axis.n_bands;
        let mut entries = Vec::with_capacity(if spatial { 6 * b - 1 } else { 4 * b - 3 });
        let mut push = |group, range: std::ops::Range<usize>| {
            entries.extend(range.map(|i| FeatureEntry {
                group,
                provenance: Provenance::Band(i),
            }))
        };
        push(TransformationGroup::MeanSpectrum, 0..b);
        push(TransformationGroup::StdSpectrum, 0..b);
        push(TransformationGroup::Grad1, 0..b - 1);
        push(TransformationGroup::Grad2, 0..b.saturating_sub(2));
        if spatial {
            push(TransformationGroup::SpatialVar, 0..b);
            push(TransformationGroup::SpatialEdge, 0..b);
            for _ in 0..2 {
                entries.push(FeatureEntry {
                    group: TransformationGroup::Meta,
                    provenance: Provenance::Nonspectral,
                });
            }
        }
        FeatureSchema {
            entries,
            axis,
            spatial_enabled: spatial,
        }
    }

    pub fn from_entries(entries: Vec<FeatureEntry>, axis: BandAxis, spatial: bool) -> Result<Self> {
        let schema = FeatureSchema {
            entries,
            axis,
            spatial_enabled: spatial,
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        for (id, e) in self.entries.iter().enumerate() {
            if let Provenance::Band(b) = e.provenance {
                if b >= self.axis.n_bands {
                    return Err(Error::Invalid(format!(
                        "feature {id} references band {b} beyond axis of {} bands",
                        self.axis.n_bands
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn fingerprint(&self) -> String {
        fingerprint(&serde_json::to_vec(self).expect("schema serializes"))
    }

    pub fn headers(&self) -> Vec<String> {
        self.entries.iter().map(FeatureEntry::header).collect()
    }

    /// Feature ids belonging to `group`, ascending.
    pub fn group_ids(&self, group: TransformationGroup) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.group == group)
            .map(|(i, _)| i)
            .collect()
    }

    /// Groups present in the schema, in canonical order.
    pub fn groups(&self) -> Vec<TransformationGroup> {
        TransformationGroup::ALL
            .into_iter()
            .filter(|g| self.entries.iter().any(|e| e.group == *g))
            .collect()
    }

    /// Schema restricted to `ids` (in the given order).
    pub fn project(&self, ids: &[usize]) -> Result<Self> {
        let entries = ids
            .iter()
            .map(|&i| {
                self.entries.get(i).copied().ok_or(Error::Dimension {
                    expected: self.len(),
                    got: i,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        FeatureSchema::from_entries(entries, self.axis, self.spatial_enabled)
    }
}

/// Dense, row-major sample x feature matrix with its schema.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub schema: FeatureSchema,
    pub sample_ids: Vec<usize>,
    values: Vec<f64>,
}

impl FeatureTable {
    pub fn new(schema: FeatureSchema, sample_ids: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expected = sample_ids.len() * schema.len();
        if values.len() != expected {
            return Err(Error::Dimension {
                expected,
                got: values.len(),
            });
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!(
                "non-finite feature value at sample {}, feature {}",
                sample_ids[pos / schema.len()],
                pos % schema.len()
            )));
        }
        Ok(FeatureTable {
            schema,
            sample_ids,
            values,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn n_features(&self) -> usize {
        self.schema.len()
    }

    pub fn row(&self, j: usize) -> &[f64] {
        let p = self.n_features();
        &self.values[j * p..(j + 1) * p]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.n_features().max(1))
    }

    pub fn column(&self, i: usize) -> Vec<f64> {
        self.rows().map(|r| r[i]).collect()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Rows at the given positions (not sample ids), in that order.
    pub fn select_rows(&self, rows: &[usize]) -> FeatureTable {
        let mut values = Vec::with_capacity(rows.len() * self.n_features());
        for &r in rows {
            values.extend_from_slice(self.row(r));
        }
        FeatureTable {
            schema: self.schema.clone(),
            sample_ids: rows.iter().map(|&r| self.sample_ids[r]).collect(),
            values,
        }
    }

    /// Rows whose sample id is in `ids`, in the order of `ids`.
    pub fn select_samples(&self, ids: &[usize]) -> Result<FeatureTable> {
        let rows = ids
            .iter()
            .map(|id| {
                self.sample_ids
                    .iter()
                    .position(|s| s == id)
                    .ok_or_else(|| Error::Invalid(format!("sample {id} not in feature table")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(self.select_rows(&rows))
    }

    /// Columns `ids` only, with the projected schema.
    pub fn project(&self, ids: &[usize]) -> Result<FeatureTable> {
        let schema = self.schema.project(ids)?;
        let mut values = Vec::with_capacity(self.n_samples() * ids.len());
        for row in self.rows() {
            values.extend(ids.iter().map(|&i| row[i]));
        }
        Ok(FeatureTable {
            schema,
            sample_ids: self.sample_ids.clone(),
            values,
        })
    }

    /// Writes `sample_id` followed by one column per feature.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        let mut header = vec!["sample_id".to_string()];
        header.extend(self.schema.headers());
        w.write_record(&header)
            .map_err(|e| Error::format(path, e.to_string()))?;
        for (id, row) in self.sample_ids.iter().zip(self.rows()) {
            let mut rec = vec![id.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(|e| Error::format(path, e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads a CSV written by [`FeatureTable::write_csv`]; the header must
    /// match `schema` exactly.
    pub fn read_csv(path: impl AsRef<Path>, schema: FeatureSchema) -> Result<FeatureTable> {
        let path = path.as_ref();
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        let header = r.headers().map_err(|e| Error::format(path, e.to_string()))?;
        let expected = schema.headers();
        if header.len() != expected.len() + 1
            || &header[0] != "sample_id"
            || header.iter().skip(1).zip(&expected).any(|(a, b)| a != b)
        {
            return Err(Error::format(path, "header does not match feature schema"));
        }
        let mut sample_ids = Vec::new();
        let mut values = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
            let parse_err = |s: &str| Error::format(path, format!("unparsable value {s:?}"));
            sample_ids.push(rec[0].parse::<usize>().map_err(|_| parse_err(&rec[0]))?);
            for field in rec.iter().skip(1) {
                values.push(field.parse::<f64>().map_err(|_| parse_err(field))?);
            }
        }
        FeatureTable::new(schema, sample_ids, values).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Extracts the feature vector of one patch alongside its schema.
pub fn extract_patch(patch: &HyperPatch, spatial: bool) -> (Vec<f64>, FeatureSchema) {
    let schema = FeatureSchema::standard(patch.axis, spatial);
    let values = extract_values(patch, spatial);
    debug_assert_eq!(values.len(), schema.len());
    (values, schema)
}

fn extract_values(patch: &HyperPatch, spatial: bool) -> Vec<f64> {
    let b = patch.n_bands();
    let n_field = patch.masked_pixel_count();
    let field_pixels: Vec<&[f32]> = (0..patch.height)
        .flat_map(|r| (0..patch.width).map(move |c| (r, c)))
        .filter(|&(r, c)| patch.is_field(r, c))
        .map(|(r, c)| patch.spectrum(r, c))
        .collect();

    let mut mean = vec![0.0f64; b];
    for px in &field_pixels {
        for (m, &v) in mean.iter_mut().zip(px.iter()) {
            *m += v as f64;
        }
    }
    for m in &mut mean {
        *m /= n_field as f64;
    }
    let mut var = vec![0.0f64; b];
    for px in &field_pixels {
        for ((s, &v), m) in var.iter_mut().zip(px.iter()).zip(&mean) {
            let d = v as f64 - m;
            *s += d * d;
        }
    }
    for s in &mut var {
        *s /= n_field as f64;
    }

    let mut out = Vec::with_capacity(if spatial { 6 * b - 1 } else { 4 * b - 3 });
    out.extend_from_slice(&mean);
    out.extend(var.iter().map(|v| v.sqrt()));
    out.extend(mean.windows(2).map(|w| w[1] - w[0]));
    out.extend(mean.windows(3).map(|w| w[2] - 2.0 * w[1] + w[0]));

    if spatial {
        out.extend_from_slice(&var);
        let mut edge = vec![0.0f64; b];
        let mut pairs = 0usize;
        for r in 0..patch.height {
            for c in 0..patch.width.saturating_sub(1) {
                if patch.is_field(r, c) && patch.is_field(r, c + 1) {
                    pairs += 1;
                    let (left, right) = (patch.spectrum(r, c), patch.spectrum(r, c + 1));
                    for ((e, &a), &z) in edge.iter_mut().zip(left).zip(right) {
                        *e += (a as f64 - z as f64).abs();
                    }
                }
            }
        }
        if pairs > 0 {
            for e in &mut edge {
                *e /= pairs as f64;
            }
        }
        out.extend_from_slice(&edge);
        out.push((n_field as f64).ln());
        out.push(patch.width as f64 / patch.height as f64);
    }
    out
}

/// Extracts every patch of `ds` into one table, rows in dataset order.
pub fn extract_dataset(ds: &Dataset, spatial: bool) -> Result<FeatureTable> {
    if let Some(i) = ds.patches.iter().position(|p| p.axis != ds.axis) {
        return Err(Error::Patch {
            patch: i,
            reason: "mixed band axes within dataset".into(),
        });
    }
    let schema = FeatureSchema::standard(ds.axis, spatial);
    let rows: Vec<Vec<f64>> = ds.patches.par_iter().map(|p| extract_values(p, spatial)).collect();
    let values = rows.concat();
    FeatureTable::new(schema, (0..ds.len()).collect(), values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SyntheticConfig};

    fn axis(b: usize) -> BandAxis {
        BandAxis::new(b, 400.0, 900.0).unwrap()
    }

    fn patch_from_fn(h: usize, w: usize, b: usize, f: impl Fn(usize, usize, usize) -> f32) -> HyperPatch {
        let mut cube = Vec::new();
        for r in 0..h {
            for c in 0..w {
                for k in 0..b {
                    cube.push(f(r, c, k));
                }
            }
        }
        HyperPatch::new(h, w, cube, vec![true; h * w], axis(b)).unwrap()
    }

    #[test]
    fn feature_counts() {
        let a = BandAxis::hyperview();
        assert_eq!(FeatureSchema::standard(a, false).len(), 597);
        assert_eq!(FeatureSchema::standard(a, true).len(), 899);
    }

    #[test]
    fn constant_patch() {
        let p = patch_from_fn(3, 4, 6, |_, _, _| 0.25);
        let (v, schema) = extract_patch(&p, false);
        for (x, e) in v.iter().zip(&schema.entries) {
            let expected = if e.group == TransformationGroup::MeanSpectrum {
                0.25
            } else {
                0.0
            };
            assert!((x - expected).abs() < 1e-12, "{:?} = {x}", e);
        }
    }

    #[test]
    fn two_pixel_hand_values() {
        let p = patch_from_fn(1, 2, 3, |_, c, k| if k == 0 { [1.0, 3.0][c] } else { 0.5 });
        let (v, schema) = extract_patch(&p, true);
        let id = |g, b| {
            schema
                .entries
                .iter()
                .position(|e| e.group == g && e.provenance == Provenance::Band(b))
                .unwrap()
        };
        assert_eq!(v[id(TransformationGroup::MeanSpectrum, 0)], 2.0);
        assert_eq!(v[id(TransformationGroup::StdSpectrum, 0)], 1.0);
        assert_eq!(v[id(TransformationGroup::SpatialVar, 0)], 1.0);
        assert_eq!(v[id(TransformationGroup::SpatialEdge, 0)], 2.0);
        assert_eq!(v[id(TransformationGroup::SpatialEdge, 1)], 0.0);
        let meta = schema.group_ids(TransformationGroup::Meta);
        assert_eq!(v[meta[0]], 2f64.ln());
        assert_eq!(v[meta[1]], 2.0);
    }

    #[test]
    fn affine_spectrum_gradients() {
        let p = patch_from_fn(2, 2, 8, |_, _, k| 0.125 + 0.0625 * k as f32);
        let (v, schema) = extract_patch(&p, false);
        for id in schema.group_ids(TransformationGroup::Grad1) {
            assert!((v[id] - 0.0625).abs() < 1e-12);
        }
        for id in schema.group_ids(TransformationGroup::Grad2) {
            assert!(v[id].abs() < 1e-12);
        }
    }

    #[test]
    fn unmasked_pixels_do_not_matter() {
        let ax = axis(5);
        let mut cube: Vec<f32> = (0..4 * 5).map(|i| 0.1 + i as f32 * 0.01).collect();
        let mask = vec![true, true, false, true];
        let p1 = HyperPatch::new(2, 2, cube.clone(), mask.clone(), ax).unwrap();
        for v in &mut cube[10..15] {
            *v = 7.0;
        }
        let p2 = HyperPatch::new(2, 2, cube, mask, ax).unwrap();
        let (a, _) = extract_patch(&p1, true);
        let (b, _) = extract_patch(&p2, true);
        assert_eq!(a, b);
    }

    #[test]
    fn no_adjacent_pairs_means_zero_edge() {
        let ax = axis(3);
        let p = HyperPatch::new(2, 2, vec![0.3; 12], vec![true, false, false, true], ax).unwrap();
        let (v, schema) = extract_patch(&p, true);
        for id in schema.group_ids(TransformationGroup::SpatialEdge) {
            assert_eq!(v[id], 0.0);
        }
    }

    #[test]
    fn dataset_extraction_shapes() {
        let ds = gen_synthetic(&SyntheticConfig {
            n_train: 50,
            n_test: 20,
            patch_size_range: [4, 8],
            ..SyntheticConfig::default()
        })
        .unwrap();
        let spectral = extract_dataset(&ds, false).unwrap();
        assert_eq!((spectral.n_samples(), spectral.n_features()), (70, 197));
        let spatial = extract_dataset(&ds, true).unwrap();
        assert_eq!(spatial.n_features() - spectral.n_features(), 2 * 50 + 2);
        assert_eq!(extract_dataset(&ds, false).unwrap(), spectral);
    }

    #[test]
    fn mixed_axes_rejected() {
        let mut ds = gen_synthetic(&SyntheticConfig {
            n_train: 3,
            n_test: 2,
            patch_size_range: [4, 4],
            ..SyntheticConfig::default()
        })
        .unwrap();
        ds.patches[1].axis.lambda_max_nm += 1.0;
        assert!(extract_dataset(&ds, false).is_err());
    }

    #[test]
    fn csv_round_trip_and_header() {
        let p = patch_from_fn(2, 3, 4, |r, c, k| (r + c + k) as f32 * 0.1);
        let (v, schema) = extract_patch(&p, true);
        let table = FeatureTable::new(schema.clone(), vec![5], v).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csv");
        table.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("sample_id,g:mean_spectrum|b:0,"));
        assert!(text.lines().next().unwrap().ends_with("g:meta|b:NA,g:meta|b:NA"));
        assert_eq!(FeatureTable::read_csv(&path, schema.clone()).unwrap(), table);
        let other = FeatureSchema::standard(schema.axis, false);
        assert!(FeatureTable::read_csv(&path, other).is_err());
    }

    #[test]
    fn projection_keeps_provenance() {
        let schema = FeatureSchema::standard(axis(4), false);
        let proj = schema.project(&[5, 0]).unwrap();
        assert_eq!(proj.entries[0], schema.entries[5]);
        assert_ne!(proj.fingerprint(), schema.fingerprint());
    }
}

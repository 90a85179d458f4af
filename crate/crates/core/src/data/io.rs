//! Dataset directory format (`v1`).
//!
//! ```text
//! <dir>/manifest.json     axis, counts, provenance, one entry per patch
//! <dir>/patch_<i>.f32     cube, little-endian f32, row-major [row][col][band]
//! <dir>/mask_<i>.bits     mask, row-major, packed MSB-first, zero padded
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BandAxis, Dataset, HyperPatch, SoilTargets, Split};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: &str = "v1";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: String,
    axis: BandAxis,
    n_patches: usize,
    n_train: usize,
    n_test: usize,
    provenance: String,
    patches: Vec<PatchEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PatchEntry {
    index: usize,
    height: usize,
    width: usize,
    n_bands: usize,
    split: Split,
    targets: SoilTargets,
    cube_file: String,
    mask_file: String,
}

pub(crate) fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, _) in bits.iter().enumerate().filter(|(_, &b)| b) {
        out[i / 8] |= 0x80 >> (i % 8);
    }
    out
}

pub(crate) fn unpack_bits(bytes: &[u8], n: usize) -> Option<Vec<bool>> {
    if bytes.len() != n.div_ceil(8) {
        return None;
    }
    Some((0..n).map(|i| bytes[i / 8] & (0x80 >> (i % 8)) != 0).collect())
}

pub fn save_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    ds.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(ds.len());
    for (i, patch) in ds.patches.iter().enumerate() {
        let cube_file = format!("patch_{i}.f32");
        let mask_file = format!("mask_{i}.bits");
        let mut bytes = Vec::with_capacity(patch.cube.len() * 4);
        for v in &patch.cube {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let path = dir.join(&cube_file);
        fs::write(&path, bytes).map_err(|e| Error::io(path, e))?;
        let path = dir.join(&mask_file);
        fs::write(&path, pack_bits(&patch.mask)).map_err(|e| Error::io(path, e))?;
        entries.push(PatchEntry {
            index: i,
            height: patch.height,
            width: patch.width,
            n_bands: patch.axis.n_bands,
            split: ds.split[i],
            targets: ds.targets[i],
            cube_file,
            mask_file,
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION.to_string(),
        axis: ds.axis,
        n_patches: ds.len(),
        n_train: ds.indices(Split::Train).len(),
        n_test: ds.indices(Split::Test).len(),
        provenance: ds.provenance.clone(),
        patches: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&manifest_path, e.to_string()))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::format(
            &manifest_path,
            format!("unsupported manifest version {:?}", manifest.version),
        ));
    }
    manifest
        .axis
        .validate()
        .map_err(|e| Error::format(&manifest_path, e.to_string()))?;
    if manifest.patches.len() != manifest.n_patches {
        return Err(Error::format(
            &manifest_path,
            format!(
                "declares {} patches but lists {}",
                manifest.n_patches,
                manifest.patches.len()
            ),
        ));
    }

    let mut patches = Vec::with_capacity(manifest.n_patches);
    let mut targets = Vec::with_capacity(manifest.n_patches);
    let mut split = Vec::with_capacity(manifest.n_patches);
    for (i, entry) in manifest.patches.iter().enumerate() {
        let patch_err = |reason: String| Error::Patch { patch: i, reason };
        if entry.index != i {
            return Err(patch_err(format!("manifest index {} out of order", entry.index)));
        }
        if entry.n_bands != manifest.axis.n_bands {
            return Err(patch_err(format!(
                "declares {} bands, axis has {}",
                entry.n_bands, manifest.axis.n_bands
            )));
        }
        let n_pixels = entry.height * entry.width;
        let cube_path = dir.join(&entry.cube_file);
        let bytes = fs::read(&cube_path).map_err(|e| patch_err(format!("{}: {e}", cube_path.display())))?;
        let expected = n_pixels * entry.n_bands * 4;
        if bytes.len() != expected {
            return Err(patch_err(format!(
                "{}: {} bytes, expected {expected} for {}x{}x{}",
                cube_path.display(),
                bytes.len(),
                entry.height,
                entry.width,
                entry.n_bands
            )));
        }
        let cube: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if cube.iter().any(|v| !v.is_finite()) {
            return Err(patch_err("non-finite reflectance".into()));
        }
        let mask_path = dir.join(&entry.mask_file);
        let bytes = fs::read(&mask_path).map_err(|e| patch_err(format!("{}: {e}", mask_path.display())))?;
        let mask = unpack_bits(&bytes, n_pixels).ok_or_else(|| {
            patch_err(format!(
                "{}: {} bytes do not hold {n_pixels} mask bits",
                mask_path.display(),
                bytes.len()
            ))
        })?;
        let patch = HyperPatch {
            height: entry.height,
            width: entry.width,
            cube,
            mask,
            axis: manifest.axis,
        };
        patch.validate().map_err(patch_err)?;
        entry.targets.validate().map_err(patch_err)?;
        patches.push(patch);
        targets.push(entry.targets);
        split.push(entry.split);
    }

    let ds = Dataset {
        axis: manifest.axis,
        patches,
        targets,
        split,
        provenance: manifest.provenance,
    };
    ds.validate()?;
    let (n_train, n_test) = (ds.indices(Split::Train).len(), ds.indices(Split::Test).len());
    if n_train != manifest.n_train || n_test != manifest.n_test {
        return Err(Error::format(
            &manifest_path,
            format!(
                "split counts {n_train}/{n_test} disagree with declared {}/{}",
                manifest.n_train, manifest.n_test
            ),
        ));
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SyntheticConfig};
    use proptest::prelude::*;

    fn small() -> Dataset {
        gen_synthetic(&SyntheticConfig {
            n_train: 7,
            n_test: 3,
            patch_size_range: [4, 7],
            ..SyntheticConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_identity() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
    }

    #[test]
    fn missing_cube_file_is_reported() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        fs::remove_file(dir.path().join("patch_9.f32")).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Patch { patch: 9, .. }), "{err}");
    }

    #[test]
    fn nan_in_cube_is_reported() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let path = dir.path().join("patch_2.f32");
        let mut bytes = fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&path, bytes).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("non-finite reflectance"), "{err}");
        assert!(matches!(err, Error::Patch { patch: 2, .. }));
    }

    #[test]
    fn truncated_cube_is_dimension_error() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let path = dir.path().join("patch_0.f32");
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Patch { patch: 0, .. })));
    }

    #[test]
    fn wrong_version_rejected() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).unwrap().replace("\"v1\"", "\"v9\"");
        fs::write(&path, text).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn bit_packing_is_msb_first() {
        assert_eq!(
            pack_bits(&[true, false, false, false, false, false, false, true, true]),
            vec![0x81, 0x80]
        );
    }

    proptest! {
        #[test]
        fn bits_round_trip(bits in proptest::collection::vec(any::<bool>(), 0..100)) {
            let packed = pack_bits(&bits);
            prop_assert_eq!(unpack_bits(&packed, bits.len()).unwrap(), bits);
        }
    }
}

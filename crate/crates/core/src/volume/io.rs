//! Native raw formats.
//!
//! `<name>.vol`: little-endian `f32` payload, `h` fastest.
//! `<name>.msk`: one `u8` per voxel.
//! Both carry a sidecar `<name>.<ext>.json`:
//! `{"dims":[L,W,H],"voxel_mm":6.4,"dtype":"f32"}` (masks add `"structure"`).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Mask3D, ShapePrior, Structure, Volume3D};
use crate::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    dims: [usize; 3],
    voxel_mm: f64,
    dtype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    structure: Option<Structure>,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn read_sidecar(path: &Path, dtype: &str) -> Result<Sidecar> {
    let side = sidecar_path(path);
    if !side.exists() {
        return Err(Error::MissingSidecar(side));
    }
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta: Sidecar = serde_json::from_str(&text)
        .map_err(|e| Error::Metadata { path: side.clone(), message: e.to_string() })?;
    if meta.dtype != dtype {
        return Err(Error::Metadata {
            path: side,
            message: format!("expected dtype {dtype}, found {}", meta.dtype),
        });
    }
    Ok(meta)
}

fn write_sidecar(path: &Path, meta: &Sidecar) -> Result<()> {
    let side = sidecar_path(path);
    let text = serde_json::to_string(meta).expect("sidecar serialises");
    fs::write(&side, text).map_err(|e| Error::io(side, e))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    Ok(())
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume3D> {
    let path = path.as_ref();
    let meta = read_sidecar(path, "f32")?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected: usize = meta.dims.iter().product();
    if bytes.len() % 4 != 0 || bytes.len() / 4 != expected {
        return Err(Error::LengthMismatch { expected, found: bytes.len() / 4 });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Volume3D::new(meta.dims, meta.voxel_mm, data)
}

pub fn save_volume(path: impl AsRef<Path>, vol: &Volume3D) -> Result<()> {
    let path = path.as_ref();
    ensure_parent(path)?;
    let mut bytes = Vec::with_capacity(vol.len() * 4);
    for v in vol.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    write_sidecar(
        path,
        &Sidecar { dims: vol.dims(), voxel_mm: vol.voxel_mm(), dtype: "f32".into(), structure: None },
    )
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<Mask3D> {
    let path = path.as_ref();
    let meta = read_sidecar(path, "u8")?;
    let structure = meta.structure.ok_or_else(|| Error::Metadata {
        path: sidecar_path(path),
        message: "mask sidecar lacks `structure`".into(),
    })?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected: usize = meta.dims.iter().product();
    if bytes.len() != expected {
        return Err(Error::LengthMismatch { expected, found: bytes.len() });
    }
    Mask3D::new(meta.dims, meta.voxel_mm, structure, bytes)
}

pub fn save_mask(path: impl AsRef<Path>, mask: &Mask3D) -> Result<()> {
    let path = path.as_ref();
    ensure_parent(path)?;
    fs::write(path, mask.data()).map_err(|e| Error::io(path, e))?;
    write_sidecar(
        path,
        &Sidecar {
            dims: mask.dims(),
            voxel_mm: mask.voxel_mm(),
            dtype: "u8".into(),
            structure: Some(mask.structure()),
        },
    )
}

pub fn load_prior(path: impl AsRef<Path>) -> Result<ShapePrior> {
    load_mask(path).map(ShapePrior::new)
}

pub fn save_prior(path: impl AsRef<Path>, prior: &ShapePrior) -> Result<()> {
    save_mask(path, prior.mask())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_payload_loads() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.vol");
        fs::write(&p, [0u8; 32]).unwrap();
        fs::write(sidecar_path(&p), r#"{"dims":[2,2,2],"voxel_mm":6.4,"dtype":"f32"}"#).unwrap();
        let v = load_volume(&p).unwrap();
        assert_eq!(v.dims(), [2, 2, 2]);
        assert_eq!(v.voxel_mm(), 6.4);
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn short_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.vol");
        fs::write(&p, [0u8; 28]).unwrap();
        fs::write(sidecar_path(&p), r#"{"dims":[2,2,2],"voxel_mm":6.4,"dtype":"f32"}"#).unwrap();
        assert!(matches!(load_volume(&p), Err(Error::LengthMismatch { expected: 8, found: 7 })));
    }

    #[test]
    fn missing_sidecar_and_nan() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("n.vol");
        let mut bytes = vec![0u8; 32];
        bytes[4..8].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_volume(&p), Err(Error::MissingSidecar(_))));
        fs::write(sidecar_path(&p), r#"{"dims":[2,2,2],"voxel_mm":6.4,"dtype":"f32"}"#).unwrap();
        assert!(matches!(load_volume(&p), Err(Error::NonFinite(1))));
    }

    #[test]
    fn unknown_sidecar_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("u.vol");
        fs::write(&p, [0u8; 4]).unwrap();
        fs::write(sidecar_path(&p), r#"{"dims":[1,1,1],"voxel_mm":6.4,"dtype":"f32","x":1}"#).unwrap();
        assert!(matches!(load_volume(&p), Err(Error::Metadata { .. })));
    }

    #[test]
    fn random_volume_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data: Vec<f32> = (0..32 * 32 * 32).map(|_| rng.gen_range(0.0f32..1000.0)).collect();
        let vol = Volume3D::new([32, 32, 32], 6.4, data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.vol");
        save_volume(&p, &vol).unwrap();
        let back = load_volume(&p).unwrap();
        let a: Vec<u32> = vol.data().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = back.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
        assert_eq!(back.voxel_mm().to_bits(), vol.voxel_mm().to_bits());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn mask_round_trip(bits in proptest::collection::vec(0u8..2, 27), vox in 0.5f64..10.0) {
            let m = Mask3D::new([3, 3, 3], vox, Structure::Epicardium, bits).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("m.msk");
            save_mask(&p, &m).unwrap();
            prop_assert_eq!(load_mask(&p).unwrap(), m);
        }
    }
}

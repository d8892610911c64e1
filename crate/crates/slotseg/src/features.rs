//! Precomputed-feature interchange. One tensor per file: a fixed magic, a
//! format version, a role byte, explicit dimensions, then the payload as
//! little-endian 32-bit floats in row-major order. A dataset on disk is a
//! directory of per-item visual/textual feature files plus patch-level
//! ground-truth PGMs.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::data::{DataItem, Dataset};
use crate::error::{Error, Result};
use crate::inference::{read_pgm, write_pgm};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"SGFT";
pub const FEATURE_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Visual = 0,
    Textual = 1,
}

impl Role {
    fn from_byte(b: u8) -> Option<Role> {
        match b {
            0 => Some(Role::Visual),
            1 => Some(Role::Textual),
            _ => None,
        }
    }
}

fn format_err(path: &Path, offset: u64, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        offset,
        detail: detail.into(),
    }
}

/// Payloads are stored at 32 bits regardless of the in-memory scalar; f64
/// tensors are truncated, which is the interchange contract, not a bug.
pub fn write_feature_file<S: Scalar>(path: &Path, t: &Tensor<S>, role: Role) -> Result<()> {
    let f = fs::File::create(path)?;
    let mut w = BufWriter::new(f);
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&FEATURE_VERSION.to_le_bytes())?;
    w.write_all(&[role as u8])?;
    let ndims = u32::try_from(t.shape.len())
        .map_err(|_| Error::domain("write_feature_file", "too many dimensions"))?;
    w.write_all(&ndims.to_le_bytes())?;
    for &e in &t.shape {
        let e = u32::try_from(e)
            .map_err(|_| Error::domain("write_feature_file", format!("extent {e} overflows")))?;
        w.write_all(&e.to_le_bytes())?;
    }
    for &v in &t.data {
        w.write_all(&(v.to_f64() as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_feature_file<S: Scalar>(path: &Path) -> Result<(Tensor<S>, Role)> {
    let data = fs::read(path)?;
    let need = |upto: usize, what: &str| -> Result<()> {
        if data.len() < upto {
            return Err(format_err(
                path,
                data.len() as u64,
                format!("truncated before {what}: expected at least {upto} bytes, found {}", data.len()),
            ));
        }
        Ok(())
    };
    need(4, "magic")?;
    if &data[..4] != FEATURE_MAGIC {
        return Err(format_err(path, 0, "bad magic, not a feature file"));
    }
    need(7, "version and role")?;
    let version = u16::from_le_bytes([data[4], data[5]]);
    if version != FEATURE_VERSION {
        return Err(format_err(
            path,
            4,
            format!("unsupported version {version}, expected {FEATURE_VERSION}"),
        ));
    }
    let role = Role::from_byte(data[6])
        .ok_or_else(|| format_err(path, 6, format!("unknown role byte {}", data[6])))?;
    need(11, "dimension count")?;
    let ndims = u32::from_le_bytes([data[7], data[8], data[9], data[10]]) as usize;
    let header = 11 + 4 * ndims;
    need(header, "extents")?;
    let mut shape = Vec::with_capacity(ndims);
    let mut len = 1usize;
    for i in 0..ndims {
        let at = 11 + 4 * i;
        let e = u32::from_le_bytes([data[at], data[at + 1], data[at + 2], data[at + 3]]) as usize;
        len = len
            .checked_mul(e)
            .ok_or_else(|| format_err(path, at as u64, "dimension product overflows"))?;
        shape.push(e);
    }
    let expected = header + 4 * len;
    if data.len() != expected {
        return Err(format_err(
            path,
            header as u64,
            format!("expected {expected} bytes total, found {}", data.len()),
        ));
    }
    let mut out = Vec::with_capacity(len);
    for i in 0..len {
        let at = header + 4 * i;
        let v = f32::from_le_bytes([data[at], data[at + 1], data[at + 2], data[at + 3]]);
        out.push(S::from_f64(v as f64));
    }
    Ok((Tensor::new(shape, out)?, role))
}

// ---- dataset directories ----

fn item_paths(dir: &Path, index: usize) -> (PathBuf, PathBuf, PathBuf) {
    (
        dir.join(format!("item_{index:05}.visual.sgft")),
        dir.join(format!("item_{index:05}.textual.sgft")),
        dir.join(format!("item_{index:05}.gt.pgm")),
    )
}

/// Writes every item as a visual/textual feature pair plus a ground-truth
/// PGM at patch resolution.
pub fn write_dataset<S: Scalar>(dir: &Path, ds: &Dataset<S>) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, item) in ds.items.iter().enumerate() {
        let (vp, tp, gp) = item_paths(dir, i);
        write_feature_file(&vp, &item.visual, Role::Visual)?;
        write_feature_file(&tp, &item.textual, Role::Textual)?;
        write_pgm(&gp, &item.gt)?;
    }
    Ok(())
}

/// Loads item_00000… upward until the first missing visual file. Ground
/// truth may be stored at patch resolution or at an exact block multiple of
/// it (as export-masks writes); anything else is rejected.
pub fn load_dataset<S: Scalar>(dir: &Path, grid: (usize, usize)) -> Result<Dataset<S>> {
    let mut items = Vec::new();
    let mut feature_dim = 0usize;
    loop {
        let (vp, tp, gp) = item_paths(dir, items.len());
        if !vp.exists() {
            break;
        }
        let (visual, vrole) = read_feature_file::<S>(&vp)?;
        if vrole != Role::Visual {
            return Err(format_err(&vp, 6, "expected a visual-role file"));
        }
        let (n, d) = visual.dims2("load_dataset")?;
        if n != grid.0 * grid.1 {
            return Err(Error::Config(format!(
                "{}: {} patches but the configured grid is {}x{}",
                vp.display(),
                n,
                grid.0,
                grid.1
            )));
        }
        if feature_dim == 0 {
            feature_dim = d;
        } else if d != feature_dim {
            return Err(Error::Config(format!(
                "{}: feature dim {} differs from {}",
                vp.display(),
                d,
                feature_dim
            )));
        }
        let (textual, trole) = read_feature_file::<S>(&tp)?;
        if trole != Role::Textual {
            return Err(format_err(&tp, 6, "expected a textual-role file"));
        }
        let textual = match textual.shape.as_slice() {
            [dd] if *dd == d => Tensor::new(vec![1, d], textual.data)?,
            [1, dd] if *dd == d => textual,
            other => {
                return Err(Error::Config(format!(
                    "{}: textual shape {:?} does not match feature dim {}",
                    tp.display(),
                    other,
                    d
                )))
            }
        };
        let gt_raw = read_pgm(&gp)?;
        let gt = if (gt_raw.height, gt_raw.width) == grid {
            gt_raw
        } else if gt_raw.height % grid.0 == 0
            && gt_raw.width % grid.1 == 0
            && gt_raw.height / grid.0 == gt_raw.width / grid.1
        {
            gt_raw.downscale_blocks(gt_raw.height / grid.0)?
        } else {
            return Err(Error::Config(format!(
                "{}: mask {}x{} fits neither the {}x{} grid nor a block multiple",
                gp.display(),
                gt_raw.height,
                gt_raw.width,
                grid.0,
                grid.1
            )));
        };
        items.push(DataItem {
            visual,
            textual,
            gt,
            instances: Vec::new(),
        });
    }
    if items.is_empty() {
        return Err(Error::State(format!(
            "no item_00000.visual.sgft under {}",
            dir.display()
        )));
    }
    Ok(Dataset {
        grid,
        feature_dim,
        items,
        prototypes: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SyntheticSpec;
    use crate::data::generate_synthetic;
    use crate::util::seeded_rng;
    use rand::Rng;

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.sgft");
        let mut rng = seeded_rng(50);
        let data: Vec<f32> = (0..24).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let t = Tensor::new(vec![4, 6], data).unwrap();
        write_feature_file(&path, &t, Role::Visual).unwrap();
        let (back, role) = read_feature_file::<f32>(&path).unwrap();
        assert_eq!(role, Role::Visual);
        assert_eq!(back.shape, t.shape);
        assert_eq!(
            back.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            t.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn large_dims_example_shape() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("big.sgft");
        let t = Tensor::<f32>::zeros(vec![576, 512]);
        write_feature_file(&path, &t, Role::Visual).unwrap();
        let (back, _) = read_feature_file::<f32>(&path).unwrap();
        assert_eq!(back.shape, vec![576, 512]);
        assert_eq!(
            std::fs::metadata(&path).unwrap().len(),
            11 + 8 + 576 * 512 * 4
        );
    }

    #[test]
    fn malformed_files_name_the_problem() {
        let dir = tempfile::tempdir().unwrap();

        let bad_magic = dir.path().join("a.sgft");
        std::fs::write(&bad_magic, b"NOPE\x01\x00\x00\x01\x00\x00\x00\x02\x00\x00\x00").unwrap();
        assert!(matches!(
            read_feature_file::<f32>(&bad_magic),
            Err(Error::Format { offset: 0, .. })
        ));

        let bad_version = dir.path().join("b.sgft");
        std::fs::write(&bad_version, b"SGFT\x09\x00\x00\x01\x00\x00\x00\x02\x00\x00\x00").unwrap();
        assert!(matches!(
            read_feature_file::<f32>(&bad_version),
            Err(Error::Format { offset: 4, .. })
        ));

        // Valid header claiming 2 floats, payload holds only 1.
        let truncated = dir.path().join("c.sgft");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"SGFT");
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.push(0);
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        std::fs::write(&truncated, &bytes).unwrap();
        let msg = format!("{}", read_feature_file::<f32>(&truncated).unwrap_err());
        assert!(msg.contains("expected 23"), "message was: {msg}");
        assert!(msg.contains("found 19"), "message was: {msg}");

        let bad_role = dir.path().join("d.sgft");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"SGFT");
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.push(7);
        bytes.extend_from_slice(&0u32.to_le_bytes());
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        std::fs::write(&bad_role, &bytes).unwrap();
        assert!(matches!(
            read_feature_file::<f32>(&bad_role),
            Err(Error::Format { offset: 6, .. })
        ));
    }

    #[test]
    fn dataset_directory_round_trip() {
        let spec = SyntheticSpec {
            grid_h: 4,
            grid_w: 5,
            num_groups: 3,
            max_instances: 2,
            feature_dim: 8,
            noise_std: 0.05,
            offset_std: 0.1,
            referent_arity: 1,
            rng_seed: 3,
        };
        let ds = generate_synthetic::<f32>(&spec, 6).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &ds).unwrap();
        let back = load_dataset::<f32>(dir.path(), (4, 5)).unwrap();
        assert_eq!(back.items.len(), 6);
        assert_eq!(back.feature_dim, 8);
        for (a, b) in ds.items.iter().zip(&back.items) {
            assert_eq!(a.visual.data, b.visual.data);
            assert_eq!(a.textual.data, b.textual.data);
            assert_eq!(a.gt, b.gt);
            assert!(b.instances.is_empty());
        }

        // Pixel-level ground truth written by export-masks loads too.
        let up = ds.items[0].gt.upscale_blocks(3).unwrap();
        write_pgm(&dir.path().join("item_00000.gt.pgm"), &up).unwrap();
        let again = load_dataset::<f32>(dir.path(), (4, 5)).unwrap();
        assert_eq!(again.items[0].gt, ds.items[0].gt);

        assert!(load_dataset::<f32>(dir.path(), (5, 4)).is_err());
        let empty = tempfile::tempdir().unwrap();
        assert!(load_dataset::<f32>(empty.path(), (4, 5)).is_err());
    }
}

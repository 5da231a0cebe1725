//! Minimal NIfTI-1 reader/writer for single-file `.nii` / `.nii.gz`
//! volumes.
//!
//! Supports the subset this pipeline produces and consumes: 3D images,
//! the common scalar dtypes, scl_slope/scl_inter rescaling, and both
//! byte orders on read. Writes are little-endian float32 with a fully
//! zeroed header apart from the fields we set, so identical volumes
//! serialize to identical bytes.
//!
//! Brain masks travel in a sidecar file `<name>_mask.nii.gz` (uint8,
//! nonzero = brain) next to the image.

use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use ndarray::Array3;

use crate::error::{IguaneError, Result};
use crate::volume::{Space, Volume};

const HDR_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;
const DT_INT8: i16 = 256;
const DT_UINT16: i16 = 512;

// ======================================================================
// Reading
// ======================================================================

/// Loads a NIfTI-1 volume plus its mask sidecar if one exists; without a
/// sidecar the mask is all-true. The result is tagged [`Space::Raw`].
pub fn load_volume(path: &Path) -> Result<Volume> {
    let (data, voxel_size) = read_nifti(path)?;
    let mask = match mask_sidecar_path(path) {
        Some(mask_path) if mask_path.exists() => {
            let (mdata, _) = read_nifti(&mask_path)?;
            if mdata.dim() != data.dim() {
                return Err(IguaneError::Validation(format!(
                    "mask sidecar dims {:?} do not match image dims {:?} for {}",
                    mdata.dim(),
                    data.dim(),
                    path.display()
                )));
            }
            mdata.mapv(|v| v != 0.0)
        }
        _ => Array3::from_elem(data.dim(), true),
    };
    Volume::new(data, mask, voxel_size, Space::Raw)
}

/// Reads raw image data and voxel sizes from a `.nii` / `.nii.gz` file.
pub fn read_nifti(path: &Path) -> Result<(Array3<f64>, [f64; 3])> {
    let mut bytes = Vec::new();
    let file = File::open(path).map_err(|e| IguaneError::io(path, e))?;
    if is_gz(path) {
        GzDecoder::new(file)
            .read_to_end(&mut bytes)
            .map_err(|e| IguaneError::io(path, e))?;
    } else {
        let mut file = file;
        file.read_to_end(&mut bytes)
            .map_err(|e| IguaneError::io(path, e))?;
    }
    parse_nifti(&bytes, path)
}

fn parse_nifti(bytes: &[u8], path: &Path) -> Result<(Array3<f64>, [f64; 3])> {
    if bytes.len() < VOX_OFFSET {
        return Err(IguaneError::Data(format!(
            "{}: file shorter than a NIfTI-1 header",
            path.display()
        )));
    }
    // sizeof_hdr doubles as the byte-order probe.
    let native = i32::from_le_bytes(bytes[0..4].try_into().unwrap()) == HDR_SIZE as i32;
    let swapped = i32::from_be_bytes(bytes[0..4].try_into().unwrap()) == HDR_SIZE as i32;
    if !native && !swapped {
        return Err(IguaneError::Data(format!(
            "{}: not a NIfTI-1 file (sizeof_hdr != 348)",
            path.display()
        )));
    }
    let rd_i16 = |off: usize| -> i16 {
        let b: [u8; 2] = bytes[off..off + 2].try_into().unwrap();
        if native {
            i16::from_le_bytes(b)
        } else {
            i16::from_be_bytes(b)
        }
    };
    let rd_f32 = |off: usize| -> f32 {
        let b: [u8; 4] = bytes[off..off + 4].try_into().unwrap();
        if native {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        }
    };

    let magic = &bytes[344..348];
    if &magic[..3] != b"n+1" {
        return Err(IguaneError::Data(format!(
            "{}: unsupported magic {:?} (only single-file n+1 supported)",
            path.display(),
            magic
        )));
    }

    let ndim = rd_i16(40);
    if !(1..=7).contains(&ndim) {
        return Err(IguaneError::Data(format!(
            "{}: invalid dim[0] = {ndim}",
            path.display()
        )));
    }
    let mut dim = [1usize; 7];
    for (i, d) in dim.iter_mut().enumerate().take(ndim as usize) {
        let v = rd_i16(42 + 2 * i);
        if v < 1 {
            return Err(IguaneError::Data(format!(
                "{}: invalid dim[{}] = {v}",
                path.display(),
                i + 1
            )));
        }
        *d = v as usize;
    }
    if dim[3..].iter().any(|&d| d != 1) {
        return Err(IguaneError::Data(format!(
            "{}: only 3D volumes supported, got dims {:?}",
            path.display(),
            &dim[..ndim as usize]
        )));
    }
    let (nx, ny, nz) = (dim[0], dim[1], dim[2]);
    let nvox = nx * ny * nz;

    let datatype = rd_i16(70);
    let voxel_size = [
        rd_f32(80) as f64, // pixdim[1]
        rd_f32(84) as f64,
        rd_f32(88) as f64,
    ];
    let vox_offset = rd_f32(108) as usize;
    let scl_slope = rd_f32(112);
    let scl_inter = rd_f32(116);
    let (slope, inter) = if scl_slope == 0.0 || !scl_slope.is_finite() {
        (1.0f64, 0.0f64)
    } else {
        (scl_slope as f64, scl_inter as f64)
    };

    let elem = match datatype {
        DT_UINT8 | DT_INT8 => 1,
        DT_INT16 | DT_UINT16 => 2,
        DT_INT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => {
            return Err(IguaneError::Data(format!(
                "{}: unsupported NIfTI datatype {other}",
                path.display()
            )))
        }
    };
    let start = vox_offset.max(VOX_OFFSET);
    let end = start + nvox * elem;
    if bytes.len() < end {
        return Err(IguaneError::Data(format!(
            "{}: truncated voxel data ({} bytes, need {end})",
            path.display(),
            bytes.len()
        )));
    }
    let raw = &bytes[start..end];
    let mut vals = Vec::with_capacity(nvox);
    for i in 0..nvox {
        let o = i * elem;
        let v = match datatype {
            DT_UINT8 => raw[o] as f64,
            DT_INT8 => raw[o] as i8 as f64,
            DT_INT16 => {
                let b: [u8; 2] = raw[o..o + 2].try_into().unwrap();
                (if native {
                    i16::from_le_bytes(b)
                } else {
                    i16::from_be_bytes(b)
                }) as f64
            }
            DT_UINT16 => {
                let b: [u8; 2] = raw[o..o + 2].try_into().unwrap();
                (if native {
                    u16::from_le_bytes(b)
                } else {
                    u16::from_be_bytes(b)
                }) as f64
            }
            DT_INT32 => {
                let b: [u8; 4] = raw[o..o + 4].try_into().unwrap();
                (if native {
                    i32::from_le_bytes(b)
                } else {
                    i32::from_be_bytes(b)
                }) as f64
            }
            DT_FLOAT32 => {
                let b: [u8; 4] = raw[o..o + 4].try_into().unwrap();
                (if native {
                    f32::from_le_bytes(b)
                } else {
                    f32::from_be_bytes(b)
                }) as f64
            }
            DT_FLOAT64 => {
                let b: [u8; 8] = raw[o..o + 8].try_into().unwrap();
                if native {
                    f64::from_le_bytes(b)
                } else {
                    f64::from_be_bytes(b)
                }
            }
            _ => unreachable!(),
        };
        vals.push(v * slope + inter);
    }
    // NIfTI stores x fastest; build the array in that layout.
    let arr = Array3::from_shape_vec((nz, ny, nx), vals)
        .expect("shape matches vector length")
        .permuted_axes([2, 1, 0])
        .to_owned();
    Ok((arr, voxel_size))
}

// ======================================================================
// Writing
// ======================================================================

/// Saves a volume as little-endian float32 NIfTI-1 and writes the mask
/// sidecar `<name>_mask.nii.gz` next to it.
pub fn save_volume(vol: &Volume, path: &Path) -> Result<()> {
    write_nifti(path, &vol.data, vol.voxel_size, DT_FLOAT32)?;
    let mask_path = mask_sidecar_path(path).ok_or_else(|| {
        IguaneError::Validation(format!(
            "{}: output path must end in .nii or .nii.gz",
            path.display()
        ))
    })?;
    let mask_f = vol.mask.mapv(|m| if m { 1.0 } else { 0.0 });
    write_nifti(&mask_path, &mask_f, vol.voxel_size, DT_UINT8)?;
    Ok(())
}

/// Serializes one array; dtype is float32 or uint8.
pub fn write_nifti(
    path: &Path,
    data: &Array3<f64>,
    voxel_size: [f64; 3],
    datatype: i16,
) -> Result<()> {
    let (nx, ny, nz) = data.dim();
    for (name, d) in [("x", nx), ("y", ny), ("z", nz)] {
        if d > i16::MAX as usize {
            return Err(IguaneError::Validation(format!(
                "{}: dim {name}={d} exceeds NIfTI-1 i16 limit",
                path.display()
            )));
        }
    }
    let mut hdr = vec![0u8; VOX_OFFSET];
    let wr_i32 = |h: &mut [u8], off: usize, v: i32| h[off..off + 4].copy_from_slice(&v.to_le_bytes());
    let wr_i16 = |h: &mut [u8], off: usize, v: i16| h[off..off + 2].copy_from_slice(&v.to_le_bytes());
    let wr_f32 = |h: &mut [u8], off: usize, v: f32| h[off..off + 4].copy_from_slice(&v.to_le_bytes());

    wr_i32(&mut hdr, 0, HDR_SIZE as i32);
    hdr[38] = b'r'; // "regular" field, conventionally 'r'
    wr_i16(&mut hdr, 40, 3);
    wr_i16(&mut hdr, 42, nx as i16);
    wr_i16(&mut hdr, 44, ny as i16);
    wr_i16(&mut hdr, 46, nz as i16);
    for i in 3..7 {
        wr_i16(&mut hdr, 42 + 2 * i, 1);
    }
    wr_i16(&mut hdr, 70, datatype);
    let bitpix = match datatype {
        DT_UINT8 => 8,
        DT_FLOAT32 => 32,
        DT_FLOAT64 => 64,
        other => {
            return Err(IguaneError::Validation(format!(
                "write_nifti only emits uint8/float32/float64, got datatype {other}"
            )))
        }
    };
    wr_i16(&mut hdr, 72, bitpix);
    wr_f32(&mut hdr, 76, 1.0); // pixdim[0] (qfac)
    wr_f32(&mut hdr, 80, voxel_size[0] as f32);
    wr_f32(&mut hdr, 84, voxel_size[1] as f32);
    wr_f32(&mut hdr, 88, voxel_size[2] as f32);
    wr_f32(&mut hdr, 108, VOX_OFFSET as f32);
    wr_f32(&mut hdr, 112, 1.0); // scl_slope
    let descrip = b"iguane";
    hdr[148..148 + descrip.len()].copy_from_slice(descrip);
    // sform only: diagonal affine from voxel sizes.
    wr_i16(&mut hdr, 252, 0); // qform_code
    wr_i16(&mut hdr, 254, 1); // sform_code
    wr_f32(&mut hdr, 280, voxel_size[0] as f32); // srow_x
    wr_f32(&mut hdr, 296 + 4, voxel_size[1] as f32); // srow_y
    wr_f32(&mut hdr, 312 + 8, voxel_size[2] as f32); // srow_z
    hdr[344..348].copy_from_slice(b"n+1\0");

    let mut body = Vec::with_capacity(nx * ny * nz * (bitpix as usize / 8));
    // x varies fastest on disk.
    let view = data.view().permuted_axes([2, 1, 0]);
    match datatype {
        DT_UINT8 => {
            for &v in view.iter() {
                body.push(if v != 0.0 { 1u8 } else { 0u8 });
            }
        }
        DT_FLOAT32 => {
            for &v in view.iter() {
                body.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        DT_FLOAT64 => {
            for &v in view.iter() {
                body.extend_from_slice(&v.to_le_bytes());
            }
        }
        _ => unreachable!(),
    }

    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| IguaneError::io(parent, e))?;
        }
    }
    let file = File::create(path).map_err(|e| IguaneError::io(path, e))?;
    if is_gz(path) {
        // flate2 leaves mtime/os at zero, so bytes are reproducible.
        let mut gz = GzEncoder::new(file, Compression::default());
        gz.write_all(&hdr).map_err(|e| IguaneError::io(path, e))?;
        gz.write_all(&body).map_err(|e| IguaneError::io(path, e))?;
        gz.finish().map_err(|e| IguaneError::io(path, e))?;
    } else {
        let mut file = file;
        file.write_all(&hdr).map_err(|e| IguaneError::io(path, e))?;
        file.write_all(&body).map_err(|e| IguaneError::io(path, e))?;
    }
    Ok(())
}

fn is_gz(path: &Path) -> bool {
    path.extension().and_then(|e| e.to_str()) == Some("gz")
}

/// `<dir>/<stem>_mask.nii.gz` for `<dir>/<stem>.nii[.gz]`; None when the
/// path has no NIfTI extension.
pub fn mask_sidecar_path(path: &Path) -> Option<PathBuf> {
    let name = path.file_name()?.to_str()?;
    let stem = name
        .strip_suffix(".nii.gz")
        .or_else(|| name.strip_suffix(".nii"))?;
    if stem.is_empty() {
        return None;
    }
    Some(path.with_file_name(format!("{stem}_mask.nii.gz")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn sample_volume() -> Volume {
        let mut data = Array3::zeros((5, 4, 3));
        let mut mask = Array3::from_elem((5, 4, 3), false);
        for ((x, y, z), v) in data.indexed_iter_mut() {
            if x >= 1 && x <= 3 && y >= 1 && z >= 1 {
                *v = (x * 100 + y * 10 + z) as f64;
                mask[(x, y, z)] = true;
            }
        }
        Volume::new(data, mask, [1.0, 1.25, 1.5], Space::Raw).unwrap()
    }

    #[test]
    fn round_trip_nii_gz_with_mask() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.nii.gz");
        let vol = sample_volume();
        save_volume(&vol, &path).unwrap();
        assert!(dir.path().join("img_mask.nii.gz").exists());

        let loaded = load_volume(&path).unwrap();
        assert_eq!(loaded.dims(), vol.dims());
        assert_eq!(loaded.mask, vol.mask);
        for (a, b) in loaded.data.iter().zip(vol.data.iter()) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
        for (a, b) in loaded.voxel_size.iter().zip(vol.voxel_size.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn round_trip_plain_nii_without_mask() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.nii");
        let data = Array3::from_shape_fn((3, 3, 3), |(x, y, z)| (x + y + z) as f64 - 2.0);
        write_nifti(&path, &data, [1.0; 3], super::DT_FLOAT32).unwrap();
        let loaded = load_volume(&path).unwrap();
        // no sidecar -> all-true mask
        assert!(loaded.mask.iter().all(|&m| m));
        for (a, b) in loaded.data.iter().zip(data.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn writes_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.nii.gz");
        let p2 = dir.path().join("b.nii.gz");
        let vol = sample_volume();
        save_volume(&vol, &p1).unwrap();
        save_volume(&vol, &p2).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        let b2 = std::fs::read(&p2).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn scl_slope_is_applied() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scaled.nii");
        let data = Array3::from_shape_fn((2, 2, 2), |(x, y, z)| (x + y + z) as f64);
        write_nifti(&path, &data, [1.0; 3], super::DT_FLOAT32).unwrap();
        // Patch scl_slope=2, scl_inter=10 in the header.
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[112..116].copy_from_slice(&2.0f32.to_le_bytes());
        bytes[116..120].copy_from_slice(&10.0f32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        let (arr, _) = read_nifti(&path).unwrap();
        assert_eq!(arr[(1, 1, 1)], 3.0 * 2.0 + 10.0);
    }

    #[test]
    fn big_endian_headers_are_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("be.nii");
        // Hand-build a tiny big-endian file: 1x1x2 float32.
        let mut bytes = vec![0u8; 352 + 8];
        bytes[0..4].copy_from_slice(&(348i32).to_be_bytes());
        bytes[40..42].copy_from_slice(&(3i16).to_be_bytes());
        bytes[42..44].copy_from_slice(&(1i16).to_be_bytes());
        bytes[44..46].copy_from_slice(&(1i16).to_be_bytes());
        bytes[46..48].copy_from_slice(&(2i16).to_be_bytes());
        bytes[70..72].copy_from_slice(&(16i16).to_be_bytes());
        bytes[72..74].copy_from_slice(&(32i16).to_be_bytes());
        for off in [80, 84, 88] {
            bytes[off..off + 4].copy_from_slice(&1.0f32.to_be_bytes());
        }
        bytes[108..112].copy_from_slice(&352.0f32.to_be_bytes());
        bytes[344..348].copy_from_slice(b"n+1\0");
        bytes[352..356].copy_from_slice(&1.5f32.to_be_bytes());
        bytes[356..360].copy_from_slice(&(-2.5f32).to_be_bytes());
        std::fs::write(&path, &bytes).unwrap();
        let (arr, _) = read_nifti(&path).unwrap();
        assert_eq!(arr.dim(), (1, 1, 2));
        assert_eq!(arr[(0, 0, 0)], 1.5);
        assert_eq!(arr[(0, 0, 1)], -2.5);
    }

    #[test]
    fn sidecar_dim_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.nii.gz");
        let vol = sample_volume();
        save_volume(&vol, &path).unwrap();
        // Overwrite the sidecar with wrong dims.
        let bad = Array3::from_elem((2, 2, 2), 1.0);
        write_nifti(
            &dir.path().join("img_mask.nii.gz"),
            &bad,
            [1.0; 3],
            super::DT_UINT8,
        )
        .unwrap();
        assert!(matches!(
            load_volume(&path).unwrap_err(),
            IguaneError::Validation(_)
        ));
    }

    #[test]
    fn garbage_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.nii");
        std::fs::write(&path, b"not a nifti file at all, far too short").unwrap();
        assert!(matches!(
            read_nifti(&path).unwrap_err(),
            IguaneError::Data(_)
        ));
    }

    #[test]
    fn mask_sidecar_naming() {
        assert_eq!(
            mask_sidecar_path(Path::new("/tmp/sub-01_T1w.nii.gz")).unwrap(),
            PathBuf::from("/tmp/sub-01_T1w_mask.nii.gz")
        );
        assert_eq!(
            mask_sidecar_path(Path::new("scan.nii")).unwrap(),
            PathBuf::from("scan_mask.nii.gz")
        );
        assert!(mask_sidecar_path(Path::new("scan.txt")).is_none());
    }
}

//! Array and geometry files.
//!
//! Tensor format (one array per file, integers little-endian):
//!
//! ```text
//! magic   8 bytes  "DINRT001"
//! rank    u8
//! dims    rank x u32
//! payload f32 x product(dims), row-major
//! ```
//!
//! Geometry rides in a key=value sidecar:
//!
//! ```text
//! n_views = 8
//! n_detectors = 93
//! angles = 0.0, 0.3926990816987241, ...
//! detector_spacing = 1
//! image_size = 64
//! ```
//!
//! `detector_spacing` defaults to 1 when absent; `image_size` is required
//! (the type cannot be rebuilt without it).

use std::path::Path;

use crate::error::{Error, Result};
use crate::nnkit::io::ByteReader;
use crate::nnkit::Tensor;
use crate::tomo::{Geometry, Sinogram, Volume};

pub const TENSOR_MAGIC: &[u8; 8] = b"DINRT001";

const MAX_RANK: u8 = 8;

pub fn write_tensor_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(9 + t.shape().len() * 4 + t.len() * 4);
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn read_tensor_bytes(bytes: &[u8]) -> Result<Tensor> {
    let mut r = ByteReader::new(bytes, "tensor file");
    r.expect_magic(TENSOR_MAGIC)?;
    let rank = r.take_u8()?;
    if rank > MAX_RANK {
        return Err(Error::Format { what: "tensor file", msg: format!("rank {rank} too large") });
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut total: u64 = 1;
    for _ in 0..rank {
        let d = r.take_u32()? as u64;
        total = total
            .checked_mul(d)
            .ok_or(Error::Format { what: "tensor file", msg: "dimension overflow".into() })?;
        shape.push(d as usize);
    }
    let need = total
        .checked_mul(4)
        .ok_or(Error::Format { what: "tensor file", msg: "payload overflow".into() })?
        as usize;
    if r.remaining() != need {
        return Err(Error::Format {
            what: "tensor file",
            msg: format!("payload is {} bytes, dims require {need}", r.remaining()),
        });
    }
    let mut data = Vec::with_capacity(total as usize);
    for _ in 0..total {
        data.push(r.take_f32()? as f64);
    }
    Tensor::new(shape, data)
}

pub fn write_tensor_file(path: &Path, t: &Tensor) -> Result<()> {
    std::fs::write(path, write_tensor_bytes(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor_file(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_tensor_bytes(&bytes)
}

pub fn write_volume_file(path: &Path, vol: &Volume) -> Result<()> {
    write_tensor_file(path, vol.data())
}

pub fn read_volume_file(path: &Path) -> Result<Volume> {
    Volume::new(read_tensor_file(path)?)
}

/// Render the geometry sidecar text.
pub fn geometry_to_text(geom: &Geometry) -> String {
    let angles: Vec<String> = geom.angles().iter().map(|a| format!("{a:?}")).collect();
    format!(
        "n_views = {}\nn_detectors = {}\nangles = {}\ndetector_spacing = {:?}\nimage_size = {}\n",
        geom.n_views(),
        geom.n_detectors,
        angles.join(", "),
        geom.detector_spacing,
        geom.image_size.0,
    )
}

/// Parse the geometry sidecar. Unknown keys are rejected so typos do not
/// silently fall back to defaults.
pub fn geometry_from_text(text: &str) -> Result<Geometry> {
    let mut n_views: Option<usize> = None;
    let mut n_detectors: Option<usize> = None;
    let mut angles: Option<Vec<f64>> = None;
    let mut spacing: f64 = 1.0;
    let mut image_size: Option<usize> = None;

    let err = |line: usize, msg: String| Error::Config {
        path: "geometry sidecar".into(),
        line,
        msg,
    };

    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err(lineno, "expected key = value".into()))?;
        let key = key.trim();
        let value = value.trim();
        match key {
            "n_views" => {
                n_views = Some(value.parse().map_err(|_| err(lineno, format!("bad n_views {value:?}")))?)
            }
            "n_detectors" => {
                n_detectors =
                    Some(value.parse().map_err(|_| err(lineno, format!("bad n_detectors {value:?}")))?)
            }
            "angles" => {
                let parsed: std::result::Result<Vec<f64>, _> =
                    value.split(',').map(|s| s.trim().parse::<f64>()).collect();
                let parsed = parsed.map_err(|_| err(lineno, "bad angle list".into()))?;
                if parsed.iter().any(|a| !a.is_finite()) {
                    return Err(err(lineno, "angles must be finite".into()));
                }
                angles = Some(parsed);
            }
            "detector_spacing" => {
                spacing = value.parse().map_err(|_| err(lineno, format!("bad detector_spacing {value:?}")))?;
                if !spacing.is_finite() {
                    return Err(err(lineno, "detector_spacing must be finite".into()));
                }
            }
            "image_size" => {
                image_size =
                    Some(value.parse().map_err(|_| err(lineno, format!("bad image_size {value:?}")))?)
            }
            other => return Err(err(lineno, format!("unknown key {other:?}"))),
        }
    }

    let missing = |what: &str| Error::Format {
        what: "geometry sidecar",
        msg: format!("missing key {what}"),
    };
    let angles = angles.ok_or_else(|| missing("angles"))?;
    let n_detectors = n_detectors.ok_or_else(|| missing("n_detectors"))?;
    let image_size = image_size.ok_or_else(|| missing("image_size"))?;
    if let Some(nv) = n_views {
        if nv != angles.len() {
            return Err(Error::Format {
                what: "geometry sidecar",
                msg: format!("n_views {nv} disagrees with {} listed angles", angles.len()),
            });
        }
    }
    Geometry::new(angles, n_detectors, spacing, (image_size, image_size))
}

pub fn write_sinogram_files(data_path: &Path, sidecar_path: &Path, sino: &Sinogram) -> Result<()> {
    write_tensor_file(data_path, sino.data())?;
    std::fs::write(sidecar_path, geometry_to_text(&sino.geometry))
        .map_err(|e| Error::io(sidecar_path, e))
}

pub fn read_sinogram_files(data_path: &Path, sidecar_path: &Path) -> Result<Sinogram> {
    let data = read_tensor_file(data_path)?;
    let text = std::fs::read_to_string(sidecar_path).map_err(|e| Error::io(sidecar_path, e))?;
    let geom = geometry_from_text(&text)?;
    Sinogram::new(geom, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn tensor_round_trip() {
        let mut rng = Rng::new(2);
        let t = Tensor::new(vec![2, 3, 4], (0..24).map(|_| rng.uniform_in(-2.0, 2.0)).collect()).unwrap();
        let bytes = write_tensor_bytes(&t);
        let back = read_tensor_bytes(&bytes).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in t.data().iter().zip(back.data()) {
            assert_eq!(*a as f32, *b as f32);
        }
    }

    #[test]
    fn tensor_rejects_truncation_and_garbage() {
        let t = Tensor::zeros(vec![2, 2]);
        let bytes = write_tensor_bytes(&t);
        assert!(read_tensor_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(read_tensor_bytes(&bytes[..6]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(read_tensor_bytes(&extra).is_err());
        let mut bad = bytes;
        bad[3] = b'X';
        assert!(read_tensor_bytes(&bad).is_err());
    }

    #[test]
    fn hostile_dims_do_not_allocate() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(TENSOR_MAGIC);
        bytes.push(2);
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(read_tensor_bytes(&bytes).is_err());
    }

    #[test]
    fn geometry_sidecar_round_trip() {
        let geom = Geometry::parallel(5, 9, 0.5, (16, 16)).unwrap();
        let text = geometry_to_text(&geom);
        let back = geometry_from_text(&text).unwrap();
        assert_eq!(back, geom);
    }

    #[test]
    fn geometry_sidecar_errors_carry_line_numbers() {
        let text = "n_views = 2\nbogus_key = 1\n";
        match geometry_from_text(text) {
            Err(Error::Config { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn geometry_sidecar_requires_image_size() {
        let text = "n_views = 1\nn_detectors = 4\nangles = 0.0\n";
        assert!(geometry_from_text(text).is_err());
    }

    #[test]
    fn geometry_sidecar_view_count_consistency() {
        let text = "n_views = 3\nn_detectors = 4\nangles = 0.0, 0.5\nimage_size = 8\n";
        assert!(geometry_from_text(text).is_err());
    }
}

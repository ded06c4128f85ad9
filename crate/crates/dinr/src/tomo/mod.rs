//! Parallel-beam acquisition geometry, a matched forward/adjoint projector
//! pair, ramp-filtered backprojection, and view sub-sampling.

pub mod fbp;
pub mod fft;
pub mod io;
pub mod projector;

pub use fbp::{fbp, Apodization};
pub use projector::{
    backproject, backproject_raw, project, project_raw, subsample_sinogram, subsample_views,
};

use crate::error::{Error, Result};
use crate::nnkit::Tensor;

/// Parallel-beam scan description. Angle 0 projects along the +y image axis
/// (increasing rows); detectors are indexed left-to-right along
/// `(cos a, sin a)`; the rotation center is the image center `((H-1)/2,
/// (W-1)/2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Geometry {
    angles: Vec<f64>,
    pub n_detectors: usize,
    pub detector_spacing: f64,
    pub image_size: (usize, usize),
}

impl Geometry {
    pub fn new(
        angles: Vec<f64>,
        n_detectors: usize,
        detector_spacing: f64,
        image_size: (usize, usize),
    ) -> Result<Self> {
        if angles.is_empty() {
            return Err(Error::Geometry("need at least one view angle".into()));
        }
        for w in angles.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::Geometry("angles must be strictly increasing".into()));
            }
        }
        if angles[0] < 0.0 || *angles.last().unwrap() >= std::f64::consts::PI {
            return Err(Error::Geometry("angles must lie in [0, pi)".into()));
        }
        if n_detectors == 0 {
            return Err(Error::Geometry("need at least one detector".into()));
        }
        if !(detector_spacing > 0.0) {
            return Err(Error::Geometry("detector spacing must be positive".into()));
        }
        if image_size.0 == 0 || image_size.1 == 0 {
            return Err(Error::Geometry("image size must be nonzero".into()));
        }
        Ok(Geometry { angles, n_detectors, detector_spacing, image_size })
    }

    /// Uniform angles `k * pi / n_views` for `k = 0..n_views`.
    pub fn parallel(
        n_views: usize,
        n_detectors: usize,
        detector_spacing: f64,
        image_size: (usize, usize),
    ) -> Result<Self> {
        if n_views == 0 {
            return Err(Error::Geometry("need at least one view".into()));
        }
        let angles = (0..n_views)
            .map(|k| k as f64 * std::f64::consts::PI / n_views as f64)
            .collect();
        Geometry::new(angles, n_detectors, detector_spacing, image_size)
    }

    pub fn n_views(&self) -> usize {
        self.angles.len()
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    /// Detector coordinate of bin `u`, centered on the rotation axis.
    pub fn detector_pos(&self, u: usize) -> f64 {
        (u as f64 - (self.n_detectors as f64 - 1.0) / 2.0) * self.detector_spacing
    }

    /// Whether the detector row spans the image diagonal (full object
    /// coverage). Callers warn when this is false; it is not an error.
    pub fn covers_image(&self) -> bool {
        let (h, w) = self.image_size;
        let diag = ((h * h + w * w) as f64).sqrt();
        self.n_detectors as f64 * self.detector_spacing >= diag
    }

    /// Smallest odd detector count covering an `n x n` image at unit spacing.
    pub fn covering_detector_count(n: usize) -> usize {
        let diag = (2.0 * (n as f64) * (n as f64)).sqrt().ceil() as usize + 2;
        if diag.is_multiple_of(2) {
            diag + 1
        } else {
            diag
        }
    }
}

/// Projection data `(slices, n_views, n_detectors)` in attenuation-pixel
/// units, tied to its acquisition geometry.
#[derive(Debug, Clone)]
pub struct Sinogram {
    pub geometry: Geometry,
    data: Tensor,
}

impl Sinogram {
    pub fn new(geometry: Geometry, data: Tensor) -> Result<Self> {
        let shape = data.shape();
        if shape.len() != 3 || shape[1] != geometry.n_views() || shape[2] != geometry.n_detectors {
            return Err(Error::ShapeMismatch {
                context: "sinogram vs geometry",
                expected: vec![shape.first().copied().unwrap_or(0), geometry.n_views(), geometry.n_detectors],
                got: shape.to_vec(),
            });
        }
        Ok(Sinogram { geometry, data })
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn slices(&self) -> usize {
        self.data.shape()[0]
    }
}

/// Attenuation image stack `(slices, H, W)` with square slices.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    data: Tensor,
    pub pixel_size: f64,
}

impl Volume {
    pub fn new(data: Tensor) -> Result<Self> {
        let shape = data.shape();
        if shape.len() != 3 {
            return Err(Error::ShapeMismatch {
                context: "volume rank",
                expected: vec![3],
                got: vec![shape.len()],
            });
        }
        if shape[1] != shape[2] {
            return Err(Error::Geometry(format!(
                "volume slices must be square, got {}x{}",
                shape[1], shape[2]
            )));
        }
        Ok(Volume { data, pixel_size: 1.0 })
    }

    pub fn zeros(slices: usize, n: usize) -> Self {
        Volume { data: Tensor::zeros(vec![slices, n, n]), pixel_size: 1.0 }
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Tensor {
        &mut self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn slices(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn side(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Volume {
        Volume { data: self.data.map(f), pixel_size: self.pixel_size }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometry_validation() {
        assert!(Geometry::new(vec![0.0, 0.5], 8, 1.0, (4, 4)).is_ok());
        assert!(Geometry::new(vec![], 8, 1.0, (4, 4)).is_err());
        assert!(Geometry::new(vec![0.5, 0.5], 8, 1.0, (4, 4)).is_err(), "duplicate angles");
        assert!(Geometry::new(vec![0.5, 0.2], 8, 1.0, (4, 4)).is_err(), "decreasing");
        assert!(Geometry::new(vec![0.0, std::f64::consts::PI], 8, 1.0, (4, 4)).is_err());
        assert!(Geometry::new(vec![-0.1], 8, 1.0, (4, 4)).is_err());
        assert!(Geometry::new(vec![0.0], 0, 1.0, (4, 4)).is_err());
        assert!(Geometry::new(vec![0.0], 4, 0.0, (4, 4)).is_err());
    }

    #[test]
    fn coverage_check() {
        // 64x64: diagonal is ~90.5, so 91 detectors cover, 64 do not.
        let g = Geometry::parallel(4, 91, 1.0, (64, 64)).unwrap();
        assert!(g.covers_image());
        let g = Geometry::parallel(4, 64, 1.0, (64, 64)).unwrap();
        assert!(!g.covers_image());
        assert!(Geometry::covering_detector_count(64) % 2 == 1);
        let n = Geometry::covering_detector_count(64);
        assert!(Geometry::parallel(4, n, 1.0, (64, 64)).unwrap().covers_image());
    }

    #[test]
    fn volume_must_be_square() {
        assert!(Volume::new(Tensor::zeros(vec![1, 4, 4])).is_ok());
        assert!(Volume::new(Tensor::zeros(vec![1, 4, 5])).is_err());
        assert!(Volume::new(Tensor::zeros(vec![4, 4])).is_err());
    }

    #[test]
    fn sinogram_shape_checked() {
        let g = Geometry::parallel(3, 5, 1.0, (4, 4)).unwrap();
        assert!(Sinogram::new(g.clone(), Tensor::zeros(vec![1, 3, 5])).is_ok());
        assert!(Sinogram::new(g, Tensor::zeros(vec![1, 3, 4])).is_err());
    }

    #[test]
    fn detector_positions_center_on_axis() {
        let g = Geometry::parallel(1, 5, 2.0, (4, 4)).unwrap();
        assert_eq!(g.detector_pos(2), 0.0);
        assert_eq!(g.detector_pos(0), -4.0);
        assert_eq!(g.detector_pos(4), 4.0);
    }
}

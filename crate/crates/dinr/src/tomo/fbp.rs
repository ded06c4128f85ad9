//! Filtered backprojection: per-view 1-D frequency-domain ramp filtering
//! followed by the matched adjoint, scaled by pi / n_views.

use crate::error::{Error, Result};
use crate::nnkit::Tensor;
use crate::tomo::fft::{fft_inplace, next_pow2};
use crate::tomo::{backproject, Sinogram, Volume};

/// Ramp-filter window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Apodization {
    RamLak,
    Hann,
}

impl std::str::FromStr for Apodization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ram-lak" | "ramlak" => Ok(Apodization::RamLak),
            "hann" => Ok(Apodization::Hann),
            other => Err(Error::invalid(format!("unknown apodization {other:?}"))),
        }
    }
}

/// Ramp-filter every detector row of a sinogram tensor. Rows are zero-padded
/// to the next power of two at or above twice the detector count so the
/// circular convolution cannot wrap into the signal.
fn ramp_filter_rows(sino: &Tensor, spacing: f64, apodization: Apodization) -> Tensor {
    let shape = sino.shape().to_vec();
    let n_det = shape[2];
    let n_rows = shape[0] * shape[1];
    let padded = next_pow2(2 * n_det);
    let nyquist = 1.0 / (2.0 * spacing);

    // |f| window over FFT bin frequencies, optionally Hann-apodized.
    let mut window = vec![0.0; padded];
    for (k, w) in window.iter_mut().enumerate() {
        let bin = if k <= padded / 2 { k as f64 } else { (padded - k) as f64 };
        let freq = bin / (padded as f64 * spacing);
        *w = freq;
        if let Apodization::Hann = apodization {
            if freq <= nyquist {
                *w *= 0.5 * (1.0 + (std::f64::consts::PI * freq / nyquist).cos());
            } else {
                *w = 0.0;
            }
        }
    }

    let mut out = vec![0.0; sino.len()];
    let mut re = vec![0.0; padded];
    let mut im = vec![0.0; padded];
    for row in 0..n_rows {
        let src = &sino.data()[row * n_det..(row + 1) * n_det];
        re[..n_det].copy_from_slice(src);
        re[n_det..].fill(0.0);
        im.fill(0.0);
        fft_inplace(&mut re, &mut im, false);
        for k in 0..padded {
            re[k] *= window[k];
            im[k] *= window[k];
        }
        fft_inplace(&mut re, &mut im, true);
        out[row * n_det..(row + 1) * n_det].copy_from_slice(&re[..n_det]);
    }
    Tensor::new(shape, out).expect("shape unchanged")
}

/// Analytic inversion: ramp-filter each view, backproject, scale by
/// pi / n_views.
pub fn fbp(sino: &Sinogram, apodization: Apodization) -> Result<Volume> {
    if sino.geometry.n_detectors < 2 {
        return Err(Error::Geometry("fbp needs at least 2 detectors".into()));
    }
    let filtered = ramp_filter_rows(sino.data(), sino.geometry.detector_spacing, apodization);
    let filtered_sino = Sinogram::new(sino.geometry.clone(), filtered)?;
    let bp = backproject(&filtered_sino)?;
    let scale = std::f64::consts::PI / sino.geometry.n_views() as f64;
    Ok(bp.map(|v| v * scale))
}

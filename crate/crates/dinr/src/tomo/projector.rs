//! Matched forward/adjoint projector pair.
//!
//! The forward operator is a Joseph-style interpolating ray-driven line
//! integral: for each (angle, detector) ray the dominant axis is stepped one
//! pixel at a time and the crossing point on the perpendicular axis is
//! linearly interpolated, weighted by the path length per step. The adjoint
//! scatters with exactly the same weights, so `backproject` is the algebraic
//! transpose of `project` — a requirement for both the adjoint property
//! suite and the conjugate-gradient data-consistency solver.
//!
//! Rays that miss the pixel grid contribute zero; the operator stays linear.

use crate::error::{Error, Result};
use crate::nnkit::Tensor;
use crate::tomo::{Geometry, Sinogram, Volume};

/// Per-ray traversal: dominant-axis steps with interpolation weights.
/// `emit(pixel_index, weight)` is called for every touched pixel.
#[inline]
fn trace_ray(
    geom: &Geometry,
    angle: f64,
    s: f64,
    mut emit: impl FnMut(usize, f64),
) {
    let (h, w) = geom.image_size;
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let (sin_a, cos_a) = angle.sin_cos();

    if cos_a.abs() >= sin_a.abs() {
        // y-dominant: step rows, interpolate across columns.
        let weight = 1.0 / cos_a.abs();
        for r in 0..h {
            let y = r as f64 - cy;
            let cf = (s - y * sin_a) / cos_a + cx;
            let c0 = cf.floor();
            let frac = cf - c0;
            let c0i = c0 as isize;
            if c0i >= 0 && (c0i as usize) < w {
                emit(r * w + c0i as usize, weight * (1.0 - frac));
            }
            let c1i = c0i + 1;
            if frac != 0.0 && c1i >= 0 && (c1i as usize) < w {
                emit(r * w + c1i as usize, weight * frac);
            }
        }
    } else {
        // x-dominant: step columns, interpolate across rows.
        let weight = 1.0 / sin_a.abs();
        for c in 0..w {
            let x = c as f64 - cx;
            let rf = (s - x * cos_a) / sin_a + cy;
            let r0 = rf.floor();
            let frac = rf - r0;
            let r0i = r0 as isize;
            if r0i >= 0 && (r0i as usize) < h {
                emit(r0i as usize * w + c, weight * (1.0 - frac));
            }
            let r1i = r0i + 1;
            if frac != 0.0 && r1i >= 0 && (r1i as usize) < h {
                emit(r1i as usize * w + c, weight * frac);
            }
        }
    }
}

/// Forward projection of a raw `(slices, H, W)` tensor. Shapes must already
/// agree with the geometry; the public [`project`] wrapper validates.
pub fn project_raw(vol: &Tensor, geom: &Geometry) -> Tensor {
    let shape = vol.shape();
    let (slices, h, w) = (shape[0], shape[1], shape[2]);
    debug_assert_eq!((h, w), geom.image_size);
    let n_views = geom.n_views();
    let n_det = geom.n_detectors;
    let mut out = vec![0.0; slices * n_views * n_det];
    let data = vol.data();
    for (vi, &angle) in geom.angles().iter().enumerate() {
        for u in 0..n_det {
            let s = geom.detector_pos(u);
            let mut sums = vec![0.0; slices];
            trace_ray(geom, angle, s, |pix, wt| {
                for (sl, acc) in sums.iter_mut().enumerate() {
                    *acc += wt * data[sl * h * w + pix];
                }
            });
            for (sl, &acc) in sums.iter().enumerate() {
                out[(sl * n_views + vi) * n_det + u] = acc;
            }
        }
    }
    Tensor::new(vec![slices, n_views, n_det], out).expect("shape is consistent")
}

/// Adjoint of [`project_raw`]: scatters each sinogram bin back along its ray
/// with identical interpolation weights.
pub fn backproject_raw(sino: &Tensor, geom: &Geometry) -> Tensor {
    let shape = sino.shape();
    let (slices, n_views, n_det) = (shape[0], shape[1], shape[2]);
    debug_assert_eq!(n_views, geom.n_views());
    debug_assert_eq!(n_det, geom.n_detectors);
    let (h, w) = geom.image_size;
    let mut out = vec![0.0; slices * h * w];
    let data = sino.data();
    for (vi, &angle) in geom.angles().iter().enumerate() {
        for u in 0..n_det {
            let s = geom.detector_pos(u);
            trace_ray(geom, angle, s, |pix, wt| {
                for sl in 0..slices {
                    out[sl * h * w + pix] += wt * data[(sl * n_views + vi) * n_det + u];
                }
            });
        }
    }
    Tensor::new(vec![slices, h, w], out).expect("shape is consistent")
}

/// Line integrals of `vol` under `geom` (the y = Ax forward model).
pub fn project(vol: &Volume, geom: &Geometry) -> Result<Sinogram> {
    if (vol.side(), vol.side()) != geom.image_size {
        return Err(Error::Geometry(format!(
            "volume {0}x{0} does not match geometry image size {1}x{2}",
            vol.side(),
            geom.image_size.0,
            geom.image_size.1
        )));
    }
    Sinogram::new(geom.clone(), project_raw(vol.data(), geom))
}

/// Exact algebraic transpose of [`project`].
pub fn backproject(sino: &Sinogram) -> Result<Volume> {
    Volume::new(backproject_raw(sino.data(), &sino.geometry))
}

/// Subsample a measured sinogram along with its geometry: keep every
/// `factor`-th view row starting at index 0.
pub fn subsample_sinogram(sino: &Sinogram, factor: usize) -> Result<Sinogram> {
    let geom = subsample_views(&sino.geometry, factor)?;
    let slices = sino.slices();
    let (n_views, n_det) = (sino.geometry.n_views(), sino.geometry.n_detectors);
    let mut data = Vec::with_capacity(slices * geom.n_views() * n_det);
    for s in 0..slices {
        for v in (0..n_views).step_by(factor) {
            let base = (s * n_views + v) * n_det;
            data.extend_from_slice(&sino.data().data()[base..base + n_det]);
        }
    }
    let kept = geom.n_views();
    Sinogram::new(geom, Tensor::new(vec![slices, kept, n_det], data)?)
}

/// Keep every `factor`-th angle starting at index 0; the resulting view
/// count is `ceil(n / factor)`.
pub fn subsample_views(geom: &Geometry, factor: usize) -> Result<Geometry> {
    if factor < 1 {
        return Err(Error::invalid("subsample factor must be >= 1"));
    }
    if factor > geom.n_views() {
        return Err(Error::invalid(format!(
            "subsample factor {factor} exceeds view count {}",
            geom.n_views()
        )));
    }
    let angles: Vec<f64> = geom.angles().iter().copied().step_by(factor).collect();
    Geometry::new(angles, geom.n_detectors, geom.detector_spacing, geom.image_size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    /// Disc rendered with 4x4 subpixel coverage so the discrete image is a
    /// faithful sampling of the continuous indicator.
    fn disc_volume(n: usize, radius: f64, value: f64) -> Volume {
        let c = (n as f64 - 1.0) / 2.0;
        let mut data = vec![0.0; n * n];
        for r in 0..n {
            for col in 0..n {
                let mut hit = 0;
                for sy in 0..4 {
                    for sx in 0..4 {
                        let dy = r as f64 + (sy as f64 + 0.5) / 4.0 - 0.5 - c;
                        let dx = col as f64 + (sx as f64 + 0.5) / 4.0 - 0.5 - c;
                        if dx * dx + dy * dy <= radius * radius {
                            hit += 1;
                        }
                    }
                }
                data[r * n + col] = value * hit as f64 / 16.0;
            }
        }
        Volume::new(Tensor::new(vec![1, n, n], data).unwrap()).unwrap()
    }

    /// Dense system matrix built by projecting each basis image; the oracle
    /// for both linearity and the adjoint.
    fn dense_matrix(geom: &Geometry) -> Vec<Vec<f64>> {
        let (h, w) = geom.image_size;
        let rows = geom.n_views() * geom.n_detectors;
        let mut mat = vec![vec![0.0; h * w]; rows];
        for j in 0..h * w {
            let mut basis = vec![0.0; h * w];
            basis[j] = 1.0;
            let t = Tensor::new(vec![1, h, w], basis).unwrap();
            let col = project_raw(&t, geom);
            for (i, &v) in col.data().iter().enumerate() {
                mat[i][j] = v;
            }
        }
        mat
    }

    #[test]
    fn zero_volume_projects_to_zero() {
        let geom = Geometry::parallel(4, 12, 1.0, (8, 8)).unwrap();
        let sino = project(&Volume::zeros(2, 8), &geom).unwrap();
        assert!(sino.data().data().iter().all(|&v| v == 0.0));
        let vol = backproject(&sino).unwrap();
        assert!(vol.data().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn central_detector_sees_the_chord() {
        // Uniform unit disc of radius r: the central ray integral is the
        // diameter 2r, within 2% at 64x64, at any angle.
        let n = 64;
        let r = 20.0;
        let vol = disc_volume(n, r, 1.0);
        let n_det = Geometry::covering_detector_count(n);
        let geom = Geometry::parallel(7, n_det, 1.0, (n, n)).unwrap();
        let sino = project(&vol, &geom).unwrap();
        let center = (n_det - 1) / 2;
        for vi in 0..geom.n_views() {
            let v = sino.data().data()[vi * n_det + center];
            let rel = (v - 2.0 * r).abs() / (2.0 * r);
            assert!(rel < 0.02, "view {vi}: got {v}, want {}", 2.0 * r);
        }
    }

    #[test]
    fn matches_dense_matrix_oracle() {
        let geom = Geometry::parallel(4, 12, 1.0, (8, 8)).unwrap();
        let mat = dense_matrix(&geom);
        let mut rng = Rng::new(21);
        let x: Vec<f64> = (0..64).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let vol = Volume::new(Tensor::new(vec![1, 8, 8], x.clone()).unwrap()).unwrap();
        let sino = project(&vol, &geom).unwrap();
        for (i, row) in mat.iter().enumerate() {
            let want: f64 = row.iter().zip(&x).map(|(a, b)| a * b).sum();
            let got = sino.data().data()[i];
            assert!((got - want).abs() < 1e-10, "ray {i}: {got} vs {want}");
        }
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn backproject_is_dense_transpose() {
        let geom = Geometry::parallel(4, 12, 1.0, (8, 8)).unwrap();
        let mat = dense_matrix(&geom);
        let mut rng = Rng::new(22);
        let y: Vec<f64> = (0..48).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let sino = Sinogram::new(geom.clone(), Tensor::new(vec![1, 4, 12], y.clone()).unwrap()).unwrap();
        let vol = backproject(&sino).unwrap();
        for j in 0..64 {
            let want: f64 = (0..48).map(|i| mat[i][j] * y[i]).sum();
            let got = vol.data().data()[j];
            assert!((got - want).abs() < 1e-10, "pixel {j}: {got} vs {want}");
        }
    }

    #[test]
    fn adjoint_identity_holds() {
        // <Ax, y> == <x, A^T y> in f64.
        let mut rng = Rng::new(31);
        for trial in 0..8 {
            let n = 32;
            let geom = Geometry::parallel(8, 47, 1.0, (n, n)).unwrap();
            let x: Vec<f64> = (0..n * n).map(|_| rng.normal()).collect();
            let y: Vec<f64> = (0..8 * 47).map(|_| rng.normal()).collect();
            let xt = Tensor::new(vec![1, n, n], x).unwrap();
            let yt = Tensor::new(vec![1, 8, 47], y).unwrap();
            let ax = project_raw(&xt, &geom);
            let aty = backproject_raw(&yt, &geom);
            let lhs = ax.dot(&yt).unwrap();
            let rhs = xt.dot(&aty).unwrap();
            let rel = (lhs - rhs).abs() / lhs.abs().max(1e-12);
            assert!(rel < 1e-10, "trial {trial}: rel {rel}");
        }
    }

    #[test]
    fn projection_is_linear() {
        let geom = Geometry::parallel(5, 23, 1.0, (16, 16)).unwrap();
        let mut rng = Rng::new(41);
        let xa: Vec<f64> = (0..256).map(|_| rng.normal()).collect();
        let xb: Vec<f64> = (0..256).map(|_| rng.normal()).collect();
        let (a, b) = (1.3, -0.6);
        let combo: Vec<f64> = xa.iter().zip(&xb).map(|(&p, &q)| a * p + b * q).collect();
        let pa = project_raw(&Tensor::new(vec![1, 16, 16], xa).unwrap(), &geom);
        let pb = project_raw(&Tensor::new(vec![1, 16, 16], xb).unwrap(), &geom);
        let pc = project_raw(&Tensor::new(vec![1, 16, 16], combo).unwrap(), &geom);
        for i in 0..pc.len() {
            let want = a * pa.data()[i] + b * pb.data()[i];
            assert!((pc.data()[i] - want).abs() < 1e-10);
        }
    }

    #[test]
    fn rotation_consistency_on_symmetric_phantom() {
        // A radial Gaussian, masked to the inscribed circle so every view
        // sees identical support, projects to the same profile at every
        // angle.
        let n = 128;
        let c = (n as f64 - 1.0) / 2.0;
        let sigma = 16.0;
        let mask = (n as f64 - 2.0) / 2.0;
        let mut data = vec![0.0; n * n];
        for r in 0..n {
            for col in 0..n {
                let dy = r as f64 - c;
                let dx = col as f64 - c;
                if dx * dx + dy * dy <= mask * mask {
                    data[r * n + col] = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                }
            }
        }
        let vol = Tensor::new(vec![1, n, n], data).unwrap();
        let n_det = Geometry::covering_detector_count(n);
        let geom = Geometry::parallel(12, n_det, 1.0, (n, n)).unwrap();
        let sino = project_raw(&vol, &geom);
        let row0 = &sino.data()[..n_det];
        let peak = row0.iter().cloned().fold(0.0, f64::max);
        for vi in 1..12 {
            let row = &sino.data()[vi * n_det..(vi + 1) * n_det];
            for (u, (&a, &b)) in row0.iter().zip(row).enumerate() {
                assert!(
                    (a - b).abs() / peak < 1e-3,
                    "view {vi} detector {u}: {a} vs {b}"
                );
            }
        }
    }

    #[test]
    fn single_bin_backprojects_to_a_stripe() {
        // One nonzero detector at angle 0 marks a constant column stripe.
        let n = 8;
        let geom = Geometry::new(vec![0.0], n, 1.0, (n, n)).unwrap();
        let mut y = vec![0.0; n];
        y[3] = 1.0;
        let sino = Sinogram::new(geom, Tensor::new(vec![1, 1, n], y).unwrap()).unwrap();
        let vol = backproject(&sino).unwrap();
        let d = vol.data().data();
        for r in 0..n {
            for c in 0..n {
                let v = d[r * n + c];
                if c == 3 {
                    assert!((v - 1.0).abs() < 1e-12, "stripe pixel ({r},{c}) = {v}");
                } else {
                    assert_eq!(v, 0.0, "off-stripe pixel ({r},{c})");
                }
            }
        }
    }

    #[test]
    fn subsample_keeps_every_kth_angle() {
        let geom = Geometry::parallel(32, 9, 1.0, (4, 4)).unwrap();
        let sub = subsample_views(&geom, 8).unwrap();
        assert_eq!(sub.n_views(), 4);
        for (i, &a) in sub.angles().iter().enumerate() {
            assert_eq!(a, geom.angles()[i * 8]);
        }
    }

    #[test]
    fn subsample_uses_ceil_counts() {
        // 545 views by 16 keeps ceil(545/16) = 35 views.
        let geom = Geometry::parallel(545, 9, 1.0, (4, 4)).unwrap();
        let sub = subsample_views(&geom, 16).unwrap();
        assert_eq!(sub.n_views(), 35);
        assert_eq!(subsample_views(&geom, 1).unwrap().angles(), geom.angles());
        assert!(subsample_views(&geom, 546).is_err());
        assert!(subsample_views(&geom, 0).is_err());
    }

    #[test]
    fn volume_geometry_mismatch_is_error() {
        let geom = Geometry::parallel(4, 12, 1.0, (8, 8)).unwrap();
        assert!(project(&Volume::zeros(1, 16), &geom).is_err());
    }

    #[test]
    fn sinogram_subsampling_keeps_matching_rows() {
        let geom = Geometry::parallel(8, 5, 1.0, (4, 4)).unwrap();
        let data: Vec<f64> = (0..2 * 8 * 5).map(|i| i as f64).collect();
        let sino = Sinogram::new(geom, Tensor::new(vec![2, 8, 5], data.clone()).unwrap()).unwrap();
        let sub = subsample_sinogram(&sino, 4).unwrap();
        assert_eq!(sub.geometry.n_views(), 2);
        for s in 0..2 {
            for (vi, v) in [0usize, 4].iter().enumerate() {
                for d in 0..5 {
                    assert_eq!(
                        sub.data().data()[(s * 2 + vi) * 5 + d],
                        data[(s * 8 + v) * 5 + d]
                    );
                }
            }
        }
    }
}

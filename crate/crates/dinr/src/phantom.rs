//! Synthetic data: random-ellipse images for denoiser pretraining and a
//! concrete-microstructure-style phantom (matrix disc + aggregate discs +
//! pores) for evaluation.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nnkit::Tensor;
use crate::rng::Rng;
use crate::tomo::Volume;

/// One additive ellipse in normalized [-1, 1]^2 coordinates.
#[derive(Debug, Clone, Copy)]
pub struct EllipseSpec {
    pub center: (f64, f64),
    pub semi_axes: (f64, f64),
    pub rotation: f64,
    pub intensity: f64,
}

impl EllipseSpec {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.center.0;
        let dy = y - self.center.1;
        let (s, c) = self.rotation.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        let (a, b) = self.semi_axes;
        (u / a) * (u / a) + (v / b) * (v / b) <= 1.0
    }
}

/// Generation knobs for both the ellipse dataset and the microstructure
/// phantom. All sampling is fully determined by the seeds passed to the
/// generation functions.
#[derive(Debug, Clone)]
pub struct PhantomConfig {
    pub image_size: usize,
    pub n_slices: usize,
    pub ellipse_count: (usize, usize),
    pub ellipse_intensity: (f64, f64),
    pub aggregate_count: usize,
    pub aggregate_radius: (f64, f64),
    pub pore_count: usize,
    pub pore_radius: (f64, f64),
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            image_size: 64,
            n_slices: 2,
            ellipse_count: (1, 8),
            ellipse_intensity: (0.1, 1.0),
            aggregate_count: 10,
            aggregate_radius: (0.06, 0.14),
            pore_count: 24,
            pore_radius: (0.012, 0.035),
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(Error::invalid("phantom image_size must be >= 8"));
        }
        if self.n_slices == 0 {
            return Err(Error::invalid("phantom needs at least one slice"));
        }
        if self.ellipse_count.0 > self.ellipse_count.1 {
            return Err(Error::invalid("empty ellipse count range"));
        }
        for (lo, hi, what) in [
            (self.ellipse_intensity.0, self.ellipse_intensity.1, "ellipse intensity"),
            (self.aggregate_radius.0, self.aggregate_radius.1, "aggregate radius"),
            (self.pore_radius.0, self.pore_radius.1, "pore radius"),
        ] {
            if lo > hi || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::invalid(format!("empty or non-finite {what} range")));
            }
        }
        Ok(())
    }
}

const RETRY_BUDGET: usize = 1000;

fn normalized_coord(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        (2.0 * i as f64 - (n as f64 - 1.0)) / (n as f64 - 1.0)
    }
}

/// Zero a slice outside the inscribed circle (parallel-beam views of the
/// result stay mutually consistent).
fn mask_inscribed(data: &mut [f64], n: usize) {
    for r in 0..n {
        for c in 0..n {
            let x = normalized_coord(c, n);
            let y = normalized_coord(r, n);
            if x * x + y * y > 1.0 {
                data[r * n + c] = 0.0;
            }
        }
    }
}

/// Sum of k random ellipse indicators (k uniform in the configured range),
/// clipped to [0, 1] and masked to the inscribed circle. Values are in raw
/// [0, 1] attenuation units; see [`ellipse_dataset`] for the normalized
/// variant.
pub fn random_ellipse_image(cfg: &PhantomConfig, seed: u64) -> Result<Volume> {
    cfg.validate()?;
    let n = cfg.image_size;
    let mut rng = Rng::derive(seed, 0x_e11);
    let (klo, khi) = cfg.ellipse_count;
    let k = klo + rng.below(khi - klo + 1);
    let ellipses: Vec<EllipseSpec> = (0..k)
        .map(|_| EllipseSpec {
            center: (rng.uniform_in(-0.6, 0.6), rng.uniform_in(-0.6, 0.6)),
            semi_axes: (rng.uniform_in(0.08, 0.5), rng.uniform_in(0.08, 0.5)),
            rotation: rng.uniform_in(0.0, std::f64::consts::PI),
            intensity: rng.uniform_in(cfg.ellipse_intensity.0, cfg.ellipse_intensity.1),
        })
        .collect();

    let mut data = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            let x = normalized_coord(c, n);
            let y = normalized_coord(r, n);
            let mut v = 0.0f64;
            for e in &ellipses {
                if e.contains(x, y) {
                    v += e.intensity;
                }
            }
            data[r * n + c] = v.clamp(0.0, 1.0);
        }
    }
    mask_inscribed(&mut data, n);
    Volume::new(Tensor::new(vec![1, n, n], data)?)
}

#[derive(Debug, Clone, Copy)]
struct Disc {
    center: (f64, f64),
    radius: f64,
    intensity: f64,
}

/// Matrix disc (intensity 0.5) holding non-overlapping aggregate discs
/// (0.7..0.9) and pores (0). Slices share disc centers with per-slice
/// jittered radii, so the stack is correlated but not identical.
pub fn microstructure_phantom(cfg: &PhantomConfig) -> Result<Volume> {
    cfg.validate()?;
    let n = cfg.image_size;
    let mut rng = Rng::derive(cfg.seed, 0x_a66);
    let matrix_radius = 0.88;

    // Rejection-sample non-overlapping discs inside the matrix.
    let mut discs: Vec<Disc> = Vec::new();
    let place = |rng: &mut Rng,
                     discs: &mut Vec<Disc>,
                     radius_range: (f64, f64),
                     intensity: (f64, f64)|
     -> Result<()> {
        for attempt in 0.. {
            if attempt >= RETRY_BUDGET {
                return Err(Error::invalid(format!(
                    "could not place a disc after {RETRY_BUDGET} attempts; phantom config too crowded"
                )));
            }
            let radius = rng.uniform_in(radius_range.0, radius_range.1);
            let rmax = matrix_radius - radius - 0.02;
            if rmax <= 0.0 {
                continue;
            }
            let rho = rmax * rng.uniform().sqrt();
            let theta = rng.uniform_in(0.0, 2.0 * std::f64::consts::PI);
            let center = (rho * theta.cos(), rho * theta.sin());
            let overlaps = discs.iter().any(|d| {
                let dx = d.center.0 - center.0;
                let dy = d.center.1 - center.1;
                (dx * dx + dy * dy).sqrt() < d.radius + radius + 0.015
            });
            if !overlaps {
                discs.push(Disc {
                    center,
                    radius,
                    intensity: rng.uniform_in(intensity.0, intensity.1),
                });
                return Ok(());
            }
        }
        unreachable!()
    };

    for _ in 0..cfg.aggregate_count {
        place(&mut rng, &mut discs, cfg.aggregate_radius, (0.7, 0.9))?;
    }
    let n_aggregates = discs.len();
    for _ in 0..cfg.pore_count {
        place(&mut rng, &mut discs, cfg.pore_radius, (0.0, 0.0))?;
    }

    let mut data = vec![0.0; cfg.n_slices * n * n];
    for slice in 0..cfg.n_slices {
        // Per-slice radius jitter keeps layouts correlated across the stack.
        let mut jitter = Rng::derive(cfg.seed, 0x_517 + slice as u64);
        let jittered: Vec<Disc> = discs
            .iter()
            .map(|d| Disc { radius: d.radius * jitter.uniform_in(0.85, 1.15), ..*d })
            .collect();
        let base = slice * n * n;
        for r in 0..n {
            for c in 0..n {
                let x = normalized_coord(c, n);
                let y = normalized_coord(r, n);
                if x * x + y * y > matrix_radius * matrix_radius {
                    continue;
                }
                let mut v = 0.5;
                for (di, d) in jittered.iter().enumerate() {
                    let dx = x - d.center.0;
                    let dy = y - d.center.1;
                    if (dx * dx + dy * dy).sqrt() <= d.radius {
                        v = if di < n_aggregates { d.intensity } else { 0.0 };
                        break;
                    }
                }
                data[base + r * n + c] = v;
            }
        }
        mask_inscribed(&mut data[base..base + n * n], n);
    }
    Volume::new(Tensor::new(vec![cfg.n_slices, n, n], data)?)
}

/// Deterministic training set: image i is seeded `base_seed + i`, then
/// affinely mapped to [-1, 1] (x -> 2x - 1) for diffusion training.
pub fn ellipse_dataset(cfg: &PhantomConfig, n: usize, base_seed: u64) -> Result<Vec<Volume>> {
    if n == 0 {
        return Err(Error::invalid("dataset size must be >= 1"));
    }
    (0..n)
        .map(|i| {
            let raw = random_ellipse_image(cfg, base_seed + i as u64)?;
            Ok(raw.map(|v| 2.0 * v - 1.0))
        })
        .collect()
}

/// Write a dataset manifest: one `index seed path` line per sample.
pub fn write_manifest(path: &Path, base_seed: u64, files: &[String]) -> Result<()> {
    let mut text = String::new();
    for (i, f) in files.iter().enumerate() {
        text.push_str(&format!("{i} {} {f}\n", base_seed + i as u64));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::fnv1a64;

    #[test]
    fn zero_ellipses_gives_zero_image() {
        let cfg = PhantomConfig { ellipse_count: (0, 0), ..Default::default() };
        let img = random_ellipse_image(&cfg, 1).unwrap();
        assert!(img.data().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn centered_circle_area_matches_analytic() {
        let n = 64;
        let e = EllipseSpec {
            center: (0.0, 0.0),
            semi_axes: (0.5, 0.5),
            rotation: 0.0,
            intensity: 1.0,
        };
        let mut count = 0usize;
        for r in 0..n {
            for c in 0..n {
                let x = normalized_coord(c, n);
                let y = normalized_coord(r, n);
                if e.contains(x, y) {
                    count += 1;
                }
            }
        }
        // Half-size 0.5 in normalized units is (n-1)/4 pixels of radius.
        let radius_px = (n as f64 - 1.0) / 4.0;
        let analytic = std::f64::consts::PI * radius_px * radius_px;
        let rel = (count as f64 - analytic).abs() / analytic;
        assert!(rel < 0.03, "area {count} vs analytic {analytic:.1} (rel {rel:.3})");
    }

    #[test]
    fn same_seed_reproduces_image() {
        let cfg = PhantomConfig::default();
        let a = random_ellipse_image(&cfg, 7).unwrap();
        let b = random_ellipse_image(&cfg, 7).unwrap();
        assert_eq!(a.data().data(), b.data().data());
    }

    #[test]
    fn distinct_seeds_give_distinct_images() {
        let cfg = PhantomConfig::default();
        let mut hashes = std::collections::HashSet::new();
        for seed in 0..100u64 {
            let img = random_ellipse_image(&cfg, seed).unwrap();
            let bytes: Vec<u8> =
                img.data().data().iter().flat_map(|v| v.to_le_bytes()).collect();
            hashes.insert(fnv1a64(&bytes));
        }
        assert_eq!(hashes.len(), 100);
    }

    #[test]
    fn values_stay_bounded() {
        let cfg = PhantomConfig::default();
        for seed in 0..20u64 {
            let raw = random_ellipse_image(&cfg, seed).unwrap();
            assert!(raw.data().data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        for v in ellipse_dataset(&cfg, 20, 0).unwrap() {
            assert!(v.data().data().iter().all(|&x| (-1.0..=1.0).contains(&x)));
        }
    }

    #[test]
    fn dataset_first_sample_consistent_with_single_image() {
        let cfg = PhantomConfig::default();
        let ds = ellipse_dataset(&cfg, 1, 42).unwrap();
        let single = random_ellipse_image(&cfg, 42).unwrap().map(|v| 2.0 * v - 1.0);
        assert_eq!(ds[0].data().data(), single.data().data());
    }

    #[test]
    fn dataset_mean_is_background_dominated() {
        // Backgrounds map to -1, so the dataset mean sits in (-1, 0).
        let cfg = PhantomConfig { image_size: 32, ..Default::default() };
        let ds = ellipse_dataset(&cfg, 1000, 0).unwrap();
        let mean: f64 = ds.iter().map(|v| v.data().mean()).sum::<f64>() / ds.len() as f64;
        assert!(mean > -1.0 && mean < 0.0, "dataset mean {mean}");
    }

    #[test]
    fn uniform_disc_when_no_inclusions() {
        let cfg = PhantomConfig {
            aggregate_count: 0,
            pore_count: 0,
            n_slices: 1,
            ..Default::default()
        };
        let vol = microstructure_phantom(&cfg).unwrap();
        let vals: std::collections::HashSet<u64> =
            vol.data().data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(vals.len(), 2, "expected only background and matrix values");
        assert!(vol.data().data().iter().all(|&v| v == 0.0 || v == 0.5));
    }

    #[test]
    fn histogram_has_three_modes() {
        // Fixed-seed phantom: background near 0, matrix at 0.5, aggregates
        // above 0.6 must each be a local histogram peak.
        let cfg = PhantomConfig { seed: 11, ..Default::default() };
        let vol = microstructure_phantom(&cfg).unwrap();
        let mut hist = [0usize; 20];
        for &v in vol.data().data() {
            let bin = ((v * 20.0) as usize).min(19);
            hist[bin] += 1;
        }
        let is_peak = |i: usize| {
            let left = if i == 0 { 0 } else { hist[i - 1] };
            let right = if i == 19 { 0 } else { hist[i + 1] };
            hist[i] > 0 && hist[i] >= left && hist[i] >= right
        };
        let peaks: Vec<usize> = (0..20).filter(|&i| is_peak(i)).collect();
        assert!(peaks.contains(&0), "no background mode: {hist:?}");
        assert!(peaks.contains(&10), "no matrix mode at 0.5: {hist:?}");
        assert!(peaks.iter().any(|&p| p >= 13), "no aggregate mode >0.6: {hist:?}");
    }

    #[test]
    fn phantom_zero_outside_inscribed_circle() {
        let cfg = PhantomConfig { seed: 3, ..Default::default() };
        let vol = microstructure_phantom(&cfg).unwrap();
        let n = cfg.image_size;
        for slice in 0..cfg.n_slices {
            for r in 0..n {
                for c in 0..n {
                    let x = normalized_coord(c, n);
                    let y = normalized_coord(r, n);
                    if x * x + y * y > 1.0 {
                        assert_eq!(vol.data().data()[(slice * n + r) * n + c], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn slices_are_correlated_but_not_identical() {
        let cfg = PhantomConfig { seed: 5, ..Default::default() };
        let vol = microstructure_phantom(&cfg).unwrap();
        let n = cfg.image_size;
        let a = &vol.data().data()[..n * n];
        let b = &vol.data().data()[n * n..2 * n * n];
        assert_ne!(a, b);
        // Correlation: disc centers are shared, so most pixels agree.
        let agree = a.iter().zip(b).filter(|(x, y)| x == y).count();
        assert!(agree as f64 / (n * n) as f64 > 0.9, "agreement {agree}");
    }

    #[test]
    fn overcrowded_config_errors_out() {
        let cfg = PhantomConfig {
            aggregate_count: 500,
            aggregate_radius: (0.2, 0.3),
            ..Default::default()
        };
        assert!(microstructure_phantom(&cfg).is_err());
    }

    #[test]
    fn manifest_lists_index_seed_path() {
        let dir = std::env::temp_dir().join(format!("dinr-manifest-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("manifest.txt");
        write_manifest(&path, 40, &["a.vol".into(), "b.vol".into()]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "0 40 a.vol\n1 41 b.vol\n");
        std::fs::remove_dir_all(&dir).ok();
    }
}

//! PSNR, SSIM and the nested-ROI PSNR sweep used for method comparison.

use crate::error::{Error, Result};
use crate::tomo::Volume;

/// PSNR result. Identical inputs have zero MSE; that case is reported as a
/// distinguished exact-match value rather than a fake dB number.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Psnr {
    Exact,
    Db(f64),
}

impl Psnr {
    /// Numeric view: exact matches order above every finite value.
    pub fn db(&self) -> f64 {
        match self {
            Psnr::Exact => f64::INFINITY,
            Psnr::Db(v) => *v,
        }
    }

    pub fn csv_field(&self) -> String {
        match self {
            Psnr::Exact => "exact".to_string(),
            Psnr::Db(v) => format!("{v:.6}"),
        }
    }
}

impl std::fmt::Display for Psnr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Psnr::Exact => write!(f, "exact"),
            Psnr::Db(v) => write!(f, "{v:.2} dB"),
        }
    }
}

fn check_same_shape(x: &Volume, reference: &Volume, context: &'static str) -> Result<()> {
    if x.data().shape() != reference.data().shape() {
        return Err(Error::ShapeMismatch {
            context,
            expected: reference.data().shape().to_vec(),
            got: x.data().shape().to_vec(),
        });
    }
    Ok(())
}

/// 10 log10(range^2 / MSE) against a declared reference and data range.
pub fn psnr(x: &Volume, reference: &Volume, data_range: f64) -> Result<Psnr> {
    check_same_shape(x, reference, "psnr")?;
    if !(data_range > 0.0) {
        return Err(Error::invalid("psnr data_range must be positive"));
    }
    let mse = x.data().mse(reference.data())?;
    if mse == 0.0 {
        return Ok(Psnr::Exact);
    }
    Ok(Psnr::Db(10.0 * (data_range * data_range / mse).log10()))
}

const SSIM_WINDOW: usize = 7;

/// Mean local SSIM with a 7x7 uniform window and the standard stabilizers
/// C1 = (0.01 range)^2, C2 = (0.03 range)^2, computed per slice over valid
/// window positions, then averaged over slices.
pub fn ssim(x: &Volume, reference: &Volume, data_range: f64) -> Result<f64> {
    check_same_shape(x, reference, "ssim")?;
    if !(data_range > 0.0) {
        return Err(Error::invalid("ssim data_range must be positive"));
    }
    let n = x.side();
    if n < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "ssim window {SSIM_WINDOW} exceeds image side {n}"
        )));
    }
    let c1 = (0.01 * data_range) * (0.01 * data_range);
    let c2 = (0.03 * data_range) * (0.03 * data_range);
    let win_n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let slices = x.slices();
    let mut slice_means = Vec::with_capacity(slices);
    for s in 0..slices {
        let xa = &x.data().data()[s * n * n..(s + 1) * n * n];
        let ya = &reference.data().data()[s * n * n..(s + 1) * n * n];
        let mut acc = 0.0;
        let mut count = 0usize;
        for top in 0..=n - SSIM_WINDOW {
            for left in 0..=n - SSIM_WINDOW {
                let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for r in top..top + SSIM_WINDOW {
                    for c in left..left + SSIM_WINDOW {
                        let a = xa[r * n + c];
                        let b = ya[r * n + c];
                        sx += a;
                        sy += b;
                        sxx += a * a;
                        syy += b * b;
                        sxy += a * b;
                    }
                }
                let mx = sx / win_n;
                let my = sy / win_n;
                let vx = sxx / win_n - mx * mx;
                let vy = syy / win_n - my * my;
                let cov = sxy / win_n - mx * my;
                let val = ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                acc += val;
                count += 1;
            }
        }
        slice_means.push(acc / count as f64);
    }
    Ok(slice_means.iter().sum::<f64>() / slices as f64)
}

/// Nominal anchor height/width and sub-region sizes before any scaling.
pub const ROI_ANCHOR: (usize, usize) = (64, 96);
pub const ROI_SUB_SIZES: [usize; 5] = [64, 48, 32, 16, 8];

/// Nested-ROI specification: a (row, col, h, w) anchor rectangle and square
/// sub-regions centered within it. For images narrower than the nominal
/// 96 px anchor the whole family is scaled proportionally and the scale is
/// recorded.
#[derive(Debug, Clone)]
pub struct RoiSpec {
    pub anchor_row: usize,
    pub anchor_col: usize,
    pub anchor_h: usize,
    pub anchor_w: usize,
    /// (nominal size, actual size after scaling), strictly decreasing.
    pub sub_sizes: Vec<(usize, usize)>,
    /// Applied scale; 1 when the image fits the nominal anchor.
    pub scale: f64,
}

impl RoiSpec {
    /// Standard nested family at the given anchor position, scaled to fit an
    /// `image_side`-pixel image if needed.
    pub fn standard(image_side: usize, anchor_row: usize, anchor_col: usize) -> Result<RoiSpec> {
        let scale = if image_side < ROI_ANCHOR.1 {
            image_side as f64 / ROI_ANCHOR.1 as f64
        } else {
            1.0
        };
        let anchor_h = ((ROI_ANCHOR.0 as f64 * scale).floor() as usize).max(2);
        let anchor_w = ((ROI_ANCHOR.1 as f64 * scale).floor() as usize).max(2);
        let sub_sizes: Vec<(usize, usize)> = ROI_SUB_SIZES
            .iter()
            .map(|&s| (s, ((s as f64 * scale).floor() as usize).max(1)))
            .collect();
        for w in sub_sizes.windows(2) {
            if w[1].1 >= w[0].1 {
                return Err(Error::invalid("scaled ROI sizes are not strictly decreasing"));
            }
        }
        let spec = RoiSpec { anchor_row, anchor_col, anchor_h, anchor_w, sub_sizes, scale };
        spec.check_bounds(image_side)?;
        Ok(spec)
    }

    fn check_bounds(&self, image_side: usize) -> Result<()> {
        if self.anchor_row + self.anchor_h > image_side || self.anchor_col + self.anchor_w > image_side {
            return Err(Error::invalid(format!(
                "ROI anchor {}x{} at ({}, {}) exceeds {image_side}px image",
                self.anchor_h, self.anchor_w, self.anchor_row, self.anchor_col
            )));
        }
        if let Some(&(_, largest)) = self.sub_sizes.first() {
            if largest > self.anchor_h.min(self.anchor_w) {
                return Err(Error::invalid("largest ROI does not fit inside the anchor"));
            }
        }
        Ok(())
    }

    /// Top-left corner of a centered sub-region of the given actual size.
    pub fn sub_origin(&self, actual: usize) -> (usize, usize) {
        (
            self.anchor_row + (self.anchor_h - actual) / 2,
            self.anchor_col + (self.anchor_w - actual) / 2,
        )
    }
}

/// Crop a square region out of every slice.
pub fn crop(vol: &Volume, top: usize, left: usize, size: usize) -> Result<Volume> {
    let n = vol.side();
    if top + size > n || left + size > n {
        return Err(Error::invalid(format!(
            "crop {size}px at ({top},{left}) exceeds {n}px image"
        )));
    }
    let slices = vol.slices();
    let mut data = Vec::with_capacity(slices * size * size);
    for s in 0..slices {
        let base = s * n * n;
        for r in top..top + size {
            data.extend_from_slice(&vol.data().data()[base + r * n + left..base + r * n + left + size]);
        }
    }
    Volume::new(crate::nnkit::Tensor::new(vec![slices, size, size], data)?)
}

/// PSNR per nested sub-region: `(nominal size, actual size, psnr)` rows,
/// largest first.
pub fn roi_psnr_sweep(
    x: &Volume,
    reference: &Volume,
    spec: &RoiSpec,
    data_range: f64,
) -> Result<Vec<(usize, usize, Psnr)>> {
    check_same_shape(x, reference, "roi_psnr_sweep")?;
    spec.check_bounds(x.side())?;
    let mut out = Vec::with_capacity(spec.sub_sizes.len());
    for &(nominal, actual) in &spec.sub_sizes {
        let (top, left) = spec.sub_origin(actual);
        let cx = crop(x, top, left, actual)?;
        let cr = crop(reference, top, left, actual)?;
        out.push((nominal, actual, psnr(&cx, &cr, data_range)?));
    }
    Ok(out)
}

/// Propose the anchor that best mixes foreground and background in the
/// reference image: maximize frac*(1-frac) of above-threshold pixels over a
/// stride-2 scan of slice 0, ties resolved topmost-leftmost.
pub fn propose_anchor(reference: &Volume, data_range: f64) -> Result<(usize, usize)> {
    let n = reference.side();
    let probe = RoiSpec::standard(n, 0, 0)?;
    let (ah, aw) = (probe.anchor_h, probe.anchor_w);
    let threshold = 0.25 * data_range;
    let slice = &reference.data().data()[..n * n];
    let mut best = (0usize, 0usize);
    let mut best_score = -1.0;
    let mut row = 0;
    while row + ah <= n {
        let mut col = 0;
        while col + aw <= n {
            let mut fg = 0usize;
            for r in row..row + ah {
                for c in col..col + aw {
                    if slice[r * n + c] > threshold {
                        fg += 1;
                    }
                }
            }
            let frac = fg as f64 / (ah * aw) as f64;
            let score = frac * (1.0 - frac);
            if score > best_score {
                best_score = score;
                best = (row, col);
            }
            col += 2;
        }
        row += 2;
    }
    Ok(best)
}

/// One row of the method-comparison table.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub method: String,
    pub views: usize,
    pub psnr: Psnr,
    pub ssim: f64,
    /// (nominal, actual, psnr) rows from the ROI sweep, largest first.
    pub roi: Vec<(usize, usize, Psnr)>,
    pub data_range: f64,
}

impl MetricReport {
    pub fn csv_header() -> &'static str {
        "method,views,psnr,ssim,roi8,roi16,roi32,roi48,roi64"
    }

    pub fn csv_row(&self) -> String {
        let roi_field = |nominal: usize| {
            self.roi
                .iter()
                .find(|(nom, _, _)| *nom == nominal)
                .map(|(_, _, p)| p.csv_field())
                .unwrap_or_default()
        };
        format!(
            "{},{},{},{:.6},{},{},{},{},{}",
            self.method,
            self.views,
            self.psnr.csv_field(),
            self.ssim,
            roi_field(8),
            roi_field(16),
            roi_field(32),
            roi_field(48),
            roi_field(64),
        )
    }
}

//! Output artifacts: grayscale PNGs, CSV reports, and config snapshots.
//! Everything written here is byte-deterministic for a given input so
//! reruns diff clean.

use std::io::BufWriter;
use std::path::Path;

use crate::diffusion::TrainLog;
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::solver::{ReconConfig, TimestepLog};
use crate::tomo::Volume;

/// Quantize one slice to 8-bit grayscale over the declared range.
pub fn quantize_slice(vol: &Volume, slice: usize, lo: f64, hi: f64) -> Result<Vec<u8>> {
    if slice >= vol.slices() {
        return Err(Error::invalid(format!("slice {slice} out of range")));
    }
    if !(hi > lo) {
        return Err(Error::invalid("quantize range must be increasing"));
    }
    let n = vol.side();
    let data = &vol.data().data()[slice * n * n..(slice + 1) * n * n];
    Ok(data
        .iter()
        .map(|&v| {
            let t = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
            (t * 255.0).round() as u8
        })
        .collect())
}

/// Write one slice as an 8-bit grayscale PNG with a linear value mapping.
pub fn write_png_gray8(path: &Path, vol: &Volume, slice: usize, lo: f64, hi: f64) -> Result<()> {
    let pixels = quantize_slice(vol, slice, lo, hi)?;
    let n = vol.side() as u32;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), n, n);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header().map_err(|e| Error::Png(e.to_string()))?;
    writer.write_image_data(&pixels).map_err(|e| Error::Png(e.to_string()))?;
    Ok(())
}

/// Decode an 8-bit grayscale PNG back to raw pixels (round-trip checks).
pub fn read_png_gray8(path: &Path) -> Result<(Vec<u8>, u32, u32)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| Error::Png(e.to_string()))?;
    let mut buf = vec![0u8; reader.output_buffer_size().ok_or_else(|| Error::Png("image too large".into()))?];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Png(e.to_string()))?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Png("expected 8-bit grayscale".into()));
    }
    buf.truncate(info.buffer_size());
    Ok((buf, info.width, info.height))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Summary table mirroring the method-comparison layout, one row per
/// (views, method) cell, sorted by (views, method name).
pub fn summary_csv(rows: &[MetricReport]) -> String {
    let mut sorted: Vec<&MetricReport> = rows.iter().collect();
    sorted.sort_by(|a, b| (a.views, &a.method).cmp(&(b.views, &b.method)));
    let mut out = String::from(MetricReport::csv_header());
    out.push('\n');
    for r in sorted {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

pub fn write_summary_csv(path: &Path, rows: &[MetricReport]) -> Result<()> {
    write_text(path, &summary_csv(rows))
}

/// Per-timestep reconstruction log.
pub fn timestep_log_csv(log: &[TimestepLog]) -> String {
    let mut out = String::from("t,adapt_loss,data_term,prox_term,psnr_if_truth\n");
    for e in log {
        let psnr = e.psnr_vs_truth.map(|v| format!("{v:.6}")).unwrap_or_default();
        out.push_str(&format!(
            "{},{:.6e},{:.6e},{:.6e},{}\n",
            e.t, e.adapt_loss, e.data_term, e.prox_term, psnr
        ));
    }
    out
}

pub fn write_timestep_log_csv(path: &Path, log: &[TimestepLog]) -> Result<()> {
    write_text(path, &timestep_log_csv(log))
}

/// Pretraining loss curve, one row per epoch.
pub fn write_loss_curve_csv(path: &Path, log: &TrainLog) -> Result<()> {
    let mut out = String::from("epoch,loss\n");
    for (i, l) in log.epoch_losses.iter().enumerate() {
        out.push_str(&format!("{},{:.6e}\n", i + 1, l));
    }
    write_text(path, &out)
}

/// ROI sweep plot data: nominal size, actual (scaled) size, PSNR.
pub fn roi_csv(rows: &[(usize, usize, crate::metrics::Psnr)]) -> String {
    let mut out = String::from("roi_nominal,roi_actual,psnr\n");
    for (nominal, actual, p) in rows {
        out.push_str(&format!("{nominal},{actual},{}\n", p.csv_field()));
    }
    out
}

pub fn write_roi_csv(path: &Path, rows: &[(usize, usize, crate::metrics::Psnr)]) -> Result<()> {
    write_text(path, &roi_csv(rows))
}

/// Resolved per-cell settings, written beside each cell's outputs so a rerun
/// can be diffed against exactly what ran.
pub fn recon_snapshot(cfg: &ReconConfig, views: usize, seed_cell: u64) -> String {
    let hidden: Vec<String> = cfg.inr_hidden.iter().map(|w| w.to_string()).collect();
    format!(
        "[cell]\nviews = {views}\nmethod = {}\ncell_seed = {seed_cell}\n\n\
         [recon.effective]\nomega = {:?}\nomega_applies = {}\nrho_ratio = {:?}\neta = {:?}\n\
         t_steps = {}\nadapt_steps = {}\nadapt_lr = {:?}\ninr_hidden = {}\ninr_w0 = {:?}\n\
         inr_steps_init = {}\ninr_steps_per_t = {}\ninr_lr = {:?}\ncg_iters = {}\nmu = {:?}\n\
         slerp_lambda = {:?}\nseed_noise = {}\nseed_init = {}\ndeterministic = {}\n",
        cfg.method.name(),
        cfg.omega,
        cfg.omega_applies.name(),
        cfg.rho_ratio,
        cfg.eta,
        cfg.t_steps,
        cfg.adapt_steps,
        cfg.adapt_lr,
        hidden.join(", "),
        cfg.inr_w0,
        cfg.inr_steps_init,
        cfg.inr_steps_per_t,
        cfg.inr_lr,
        cfg.cg_iters,
        cfg.mu,
        cfg.slerp_lambda,
        cfg.seed_noise,
        cfg.seed_init,
        cfg.deterministic,
    )
}

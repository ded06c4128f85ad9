//! Command implementations behind the `dinr` binary: pretraining,
//! experiment grids, parameter sweeps, and metric recomputation.
//!
//! Exit-code contract: configuration problems (bad config file, missing
//! assets) are [`CliError::Config`] (exit 1); failures while running are
//! [`CliError::Runtime`] (exit 2). A failed grid cell does not stop the
//! remaining cells, but the run exits nonzero.

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use crate::config::ExperimentSpec;
use crate::diffusion::{load_denoiser_file, pretrain, save_denoiser_file, DenoiserModel, NoiseSchedule};
use crate::error::{Error, Result};
use crate::export;
use crate::metrics::{propose_anchor, psnr, roi_psnr_sweep, ssim, MetricReport, RoiSpec};
use crate::nnkit::{ConvLayerSpec, ConvSpec};
use crate::phantom::{ellipse_dataset, microstructure_phantom, PhantomConfig};
use crate::rng::{cell_seed, mix64};
use crate::solver::{reconstruct, Method, ReconConfig, ReconResult};
use crate::tomo::{
    io as tomo_io, project, subsample_sinogram, Geometry, Sinogram, Volume,
};

#[derive(Debug)]
pub enum CliError {
    Config(Error),
    Runtime(Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    pub fn message(&self) -> String {
        match self {
            CliError::Config(e) => format!("configuration error: {e}"),
            CliError::Runtime(e) => format!("runtime error: {e}"),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn cfg_err(e: Error) -> CliError {
    CliError::Config(e)
}

fn run_err(e: Error) -> CliError {
    CliError::Runtime(e)
}

/// Shared command-line overrides.
#[derive(Debug, Clone, Default)]
pub struct GlobalOpts {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub deterministic: bool,
    pub threads: usize,
}

fn load_spec(config_path: &Path, opts: &GlobalOpts) -> CliResult<(ExperimentSpec, String)> {
    let raw = std::fs::read_to_string(config_path)
        .map_err(|e| cfg_err(Error::io(config_path, e)))?;
    let doc = crate::config::parse_config_str(&raw, &config_path.display().to_string())
        .map_err(cfg_err)?;
    let mut spec = ExperimentSpec::from_doc(doc).map_err(cfg_err)?;
    if let Some(out) = &opts.out {
        spec.out_dir = out.clone();
    }
    if let Some(seed) = opts.seed {
        spec.master_seed = seed;
        spec.pretrain.seed = seed;
    }
    Ok((spec, raw))
}

fn ensure_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(|e| run_err(Error::io(path, e)))
}

fn denoiser_spec_from(channels: &[usize]) -> Result<ConvSpec> {
    let mut layers = Vec::with_capacity(channels.len() + 1);
    let mut prev = 1;
    for &c in channels {
        layers.push(ConvLayerSpec { in_ch: prev, out_ch: c, kernel: 3 });
        prev = c;
    }
    layers.push(ConvLayerSpec { in_ch: prev, out_ch: 1, kernel: 3 });
    ConvSpec::new(layers)
}

/// Generate the ellipse dataset, train the denoiser, write weights plus a
/// per-epoch loss curve.
pub fn cmd_pretrain(config_path: &Path, opts: &GlobalOpts) -> CliResult<PathBuf> {
    let (spec, _) = load_spec(config_path, opts)?;
    let p = &spec.pretrain;

    let weights_path = match (&spec.weights_path, &opts.out) {
        (Some(w), _) => w.clone(),
        (None, _) => spec.out_dir.join("weights.dinrw"),
    };
    if let Some(parent) = weights_path.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent)?;
        }
    }

    let phantom_cfg = PhantomConfig {
        image_size: p.image_size,
        n_slices: 1,
        ..spec.phantom.clone()
    };
    let dataset = ellipse_dataset(&phantom_cfg, p.images, p.seed).map_err(cfg_err)?;
    if let Some(dataset_dir) = &p.dataset_dir {
        ensure_dir(dataset_dir)?;
        let mut files = Vec::with_capacity(dataset.len());
        for (i, sample) in dataset.iter().enumerate() {
            let name = format!("sample_{i:05}.vol");
            tomo_io::write_volume_file(&dataset_dir.join(&name), sample).map_err(run_err)?;
            files.push(name);
        }
        crate::phantom::write_manifest(&dataset_dir.join("manifest.txt"), p.seed, &files)
            .map_err(run_err)?;
    }
    let schedule = NoiseSchedule::new(p.train_steps, p.schedule).map_err(cfg_err)?;
    let conv = denoiser_spec_from(&p.channels).map_err(cfg_err)?;
    let mut model = DenoiserModel::init(conv, schedule, p.seed).map_err(cfg_err)?;

    let log = pretrain(&mut model, &dataset, p.epochs, p.lr, p.seed, p.batch_size)
        .map_err(run_err)?;
    for (i, l) in log.epoch_losses.iter().enumerate() {
        println!("epoch {:>3}  loss {l:.6e}", i + 1);
    }

    save_denoiser_file(&weights_path, &model).map_err(run_err)?;
    let curve_path = weights_path.with_extension("losses.csv");
    export::write_loss_curve_csv(&curve_path, &log).map_err(run_err)?;
    println!("weights written to {}", weights_path.display());
    Ok(weights_path)
}

struct CellInput {
    views: usize,
    method: Method,
    cfg: ReconConfig,
    sino: Sinogram,
    seed: u64,
    out_dir: PathBuf,
}

struct CellOutput {
    views: usize,
    method: Method,
    result: std::result::Result<(ReconResult, Option<MetricReport>), Error>,
}

/// Measurements for one view count: either simulated from the truth or
/// sub-sampled out of a loaded dense scan.
fn sinogram_for_views(
    spec: &ExperimentSpec,
    truth: Option<&Volume>,
    loaded: Option<&Sinogram>,
    views: usize,
) -> Result<Sinogram> {
    match loaded {
        Some(dense) => {
            let n = dense.geometry.n_views();
            if views == 0 || n % views != 0 {
                return Err(Error::invalid(format!(
                    "requested {views} views does not evenly divide the {n}-view scan"
                )));
            }
            subsample_sinogram(dense, n / views)
        }
        None => {
            let truth = truth.expect("simulation requires a phantom");
            let geom = Geometry::parallel(
                views,
                spec.n_detectors,
                spec.detector_spacing,
                (truth.side(), truth.side()),
            )?;
            project(truth, &geom)
        }
    }
}

fn run_cell(input: &CellInput, denoiser: Option<&DenoiserModel>, truth: Option<&Volume>, anchor: Option<(usize, usize)>) -> std::result::Result<(ReconResult, Option<MetricReport>), Error> {
    let result = reconstruct(&input.sino, &input.cfg, denoiser, truth)?;
    let report = match truth {
        Some(t) => {
            let global_psnr = psnr(&result.x0, t, 1.0)?;
            let global_ssim = ssim(&result.x0, t, 1.0)?;
            let roi = match anchor {
                Some((row, col)) => {
                    let spec = RoiSpec::standard(t.side(), row, col)?;
                    roi_psnr_sweep(&result.x0, t, &spec, 1.0)?
                }
                None => Vec::new(),
            };
            Some(MetricReport {
                method: input.method.name().to_string(),
                views: input.views,
                psnr: global_psnr,
                ssim: global_ssim,
                roi,
                data_range: 1.0,
            })
        }
        None => None,
    };
    Ok((result, report))
}

fn write_cell_outputs(
    dir: &Path,
    input: &CellInput,
    result: &ReconResult,
    report: Option<&MetricReport>,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    tomo_io::write_volume_file(&dir.join("x0.vol"), &result.x0)?;
    for s in 0..result.x0.slices() {
        export::write_png_gray8(&dir.join(format!("x0_slice{s}.png")), &result.x0, s, 0.0, 1.0)?;
    }
    tomo_io::write_sinogram_files(&dir.join("sinogram.vol"), &dir.join("geometry.txt"), &input.sino)?;
    export::write_timestep_log_csv(&dir.join("log.csv"), &result.log)?;
    std::fs::write(
        dir.join("config.snapshot.ini"),
        export::recon_snapshot(&input.cfg, input.views, input.seed),
    )
    .map_err(|e| Error::io(dir.join("config.snapshot.ini"), e))?;
    if let Some(r) = report {
        if !r.roi.is_empty() {
            export::write_roi_csv(&dir.join("roi.csv"), &r.roi)?;
        }
    }
    for w in &result.warnings {
        eprintln!("[{}v/{}] warning: {w}", input.views, input.method.name());
    }
    Ok(())
}

/// Run the full (views x methods) grid: simulate or load measurements,
/// reconstruct every cell, score against the ground truth, and write the
/// summary table plus per-cell artifacts.
pub fn cmd_reconstruct(config_path: &Path, opts: &GlobalOpts) -> CliResult<i32> {
    let (spec, raw_config) = load_spec(config_path, opts)?;
    ensure_dir(&spec.out_dir)?;

    // Fail fast on missing assets.
    let needs_denoiser = spec.methods.iter().any(|m| m.needs_denoiser());
    let denoiser = if needs_denoiser {
        let path = spec.weights_path.as_ref().ok_or_else(|| {
            cfg_err(Error::invalid("diffusion methods need experiment.weights (or pretrain.weights)"))
        })?;
        if !path.exists() {
            return Err(cfg_err(Error::MissingAsset(path.clone())));
        }
        Some(load_denoiser_file(path).map_err(cfg_err)?)
    } else {
        None
    };
    for p in [&spec.sinogram_data, &spec.sinogram_geometry, &spec.truth_volume].into_iter().flatten() {
        if !p.exists() {
            return Err(cfg_err(Error::MissingAsset(p.clone())));
        }
    }

    let loaded_sino = match (&spec.sinogram_data, &spec.sinogram_geometry) {
        (Some(d), Some(g)) => Some(tomo_io::read_sinogram_files(d, g).map_err(cfg_err)?),
        _ => None,
    };
    let truth = match &spec.truth_volume {
        Some(p) => Some(tomo_io::read_volume_file(p).map_err(cfg_err)?),
        None => {
            if loaded_sino.is_some() {
                None
            } else {
                Some(microstructure_phantom(&spec.phantom).map_err(cfg_err)?)
            }
        }
    };

    // Snapshot the exact configuration that ran.
    std::fs::write(spec.out_dir.join("config.snapshot.ini"), &raw_config)
        .map_err(|e| run_err(Error::io(spec.out_dir.join("config.snapshot.ini"), e)))?;
    if let Some(t) = &truth {
        tomo_io::write_volume_file(&spec.out_dir.join("truth.vol"), t).map_err(run_err)?;
        for s in 0..t.slices() {
            export::write_png_gray8(&spec.out_dir.join(format!("truth_slice{s}.png")), t, s, 0.0, 1.0)
                .map_err(run_err)?;
        }
    }
    let anchor = match (&spec.roi_anchor, &truth) {
        (Some(a), _) => Some(*a),
        (None, Some(t)) => Some(propose_anchor(t, 1.0).map_err(run_err)?),
        (None, None) => None,
    };

    // Build the cell grid up front so workers only execute.
    let mut cells = Vec::new();
    for &views in &spec.views {
        let sino = sinogram_for_views(&spec, truth.as_ref(), loaded_sino.as_ref(), views)
            .map_err(cfg_err)?;
        if !sino.geometry.covers_image() {
            eprintln!("warning: {views}-view geometry does not cover the image diagonal");
        }
        for &method in &spec.methods {
            let seed = cell_seed(spec.master_seed, views, method.name());
            let mut cfg = spec.recon_config(method).map_err(cfg_err)?;
            cfg.seed_init = mix64(seed ^ 1);
            cfg.seed_noise = mix64(seed ^ 2);
            cfg.deterministic = opts.deterministic || cfg.deterministic;
            let out_dir = spec.out_dir.join(format!("{views}v_{}", method.name()));
            cells.push(CellInput { views, method, cfg, sino: sino.clone(), seed, out_dir });
        }
    }

    let threads = if opts.deterministic { 1 } else { opts.threads.max(1) };
    let outputs = run_cells(cells, denoiser.as_ref(), truth.as_ref(), anchor, threads);

    let mut reports = Vec::new();
    let mut failures = 0usize;
    for out in &outputs {
        match &out.result {
            Ok((result, report)) => {
                println!(
                    "cell {:>4} views / {:<5} done in {:.1}s{}",
                    out.views,
                    out.method.name(),
                    result.wall_time,
                    match report {
                        Some(r) => format!("  psnr {}  ssim {:.4}", r.psnr, r.ssim),
                        None => String::new(),
                    }
                );
                if let Some(r) = report {
                    reports.push(r.clone());
                }
            }
            Err(e) => {
                failures += 1;
                eprintln!("cell {} views / {} FAILED: {e}", out.views, out.method.name());
            }
        }
    }

    if !reports.is_empty() {
        export::write_summary_csv(&spec.out_dir.join("summary.csv"), &reports).map_err(run_err)?;
        println!("summary written to {}", spec.out_dir.join("summary.csv").display());
    }
    Ok(if failures > 0 { 2 } else { 0 })
}

fn run_cells(
    cells: Vec<CellInput>,
    denoiser: Option<&DenoiserModel>,
    truth: Option<&Volume>,
    anchor: Option<(usize, usize)>,
    threads: usize,
) -> Vec<CellOutput> {
    let n = cells.len();
    let mut slots: Vec<Option<CellOutput>> = Vec::with_capacity(n);
    slots.resize_with(n, || None);
    let queue: Mutex<Vec<(usize, CellInput)>> = Mutex::new(cells.into_iter().enumerate().collect());
    let slots = Mutex::new(slots);

    std::thread::scope(|scope| {
        for _ in 0..threads.max(1) {
            scope.spawn(|| loop {
                let job = queue.lock().expect("queue lock").pop();
                let Some((idx, input)) = job else { break };
                let result = run_cell(&input, denoiser, truth, anchor).and_then(|(res, rep)| {
                    // Artifacts are written by the worker that ran the cell.
                    write_cell_outputs(&input.out_dir, &input, &res, rep.as_ref())?;
                    Ok((res, rep))
                });
                let output = CellOutput { views: input.views, method: input.method, result };
                slots.lock().expect("slots lock")[idx] = Some(output);
            });
        }
    });

    slots
        .into_inner()
        .expect("slots lock")
        .into_iter()
        .map(|s| s.expect("every cell produced a result"))
        .collect()
}

/// Sweep one (views, method) cell over values of `omega` or `rho_ratio` and
/// report the PSNR-maximizing value.
pub fn cmd_sweep(
    config_path: &Path,
    opts: &GlobalOpts,
    param: &str,
    values: &[f64],
    views: usize,
    method: Method,
) -> CliResult<i32> {
    if values.is_empty() {
        return Err(cfg_err(Error::invalid("sweep needs a nonempty value list")));
    }
    if !matches!(param, "omega" | "rho_ratio") {
        return Err(cfg_err(Error::invalid(format!(
            "sweep parameter must be omega or rho_ratio, got {param:?}"
        ))));
    }
    let (spec, _) = load_spec(config_path, opts)?;
    ensure_dir(&spec.out_dir)?;

    let denoiser = if method.needs_denoiser() {
        let path = spec.weights_path.as_ref().ok_or_else(|| {
            cfg_err(Error::invalid("diffusion methods need experiment.weights"))
        })?;
        if !path.exists() {
            return Err(cfg_err(Error::MissingAsset(path.clone())));
        }
        Some(load_denoiser_file(path).map_err(cfg_err)?)
    } else {
        None
    };

    let truth = microstructure_phantom(&spec.phantom).map_err(cfg_err)?;
    let sino = sinogram_for_views(&spec, Some(&truth), None, views).map_err(cfg_err)?;
    let seed = cell_seed(spec.master_seed, views, method.name());

    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let mut cfg = spec.recon_config(method).map_err(cfg_err)?;
        match param {
            "omega" => cfg.omega = value,
            _ => cfg.rho_ratio = value,
        }
        cfg.seed_init = mix64(seed ^ 1);
        cfg.seed_noise = mix64(seed ^ 2);
        let result = reconstruct(&sino, &cfg, denoiser.as_ref(), Some(&truth)).map_err(run_err)?;
        let p = psnr(&result.x0, &truth, 1.0).map_err(run_err)?;
        let s = ssim(&result.x0, &truth, 1.0).map_err(run_err)?;
        println!("{param} = {value:?}: psnr {p}  ssim {s:.4}");
        rows.push((value, p, s));
    }

    let best = rows
        .iter()
        .enumerate()
        .max_by(|(_, a), (_, b)| a.1.db().total_cmp(&b.1.db()))
        .map(|(i, _)| i)
        .expect("nonempty");

    let mut csv = format!("{param},psnr,ssim,best\n");
    for (i, (value, p, s)) in rows.iter().enumerate() {
        csv.push_str(&format!(
            "{value:?},{},{s:.6},{}\n",
            p.csv_field(),
            if i == best { 1 } else { 0 }
        ));
    }
    let path = spec.out_dir.join(format!("sweep_{param}_{views}v_{}.csv", method.name()));
    std::fs::write(&path, csv).map_err(|e| run_err(Error::io(&path, e)))?;
    println!(
        "best {param} = {:?} (psnr {})  ->  {}",
        rows[best].0,
        rows[best].1,
        path.display()
    );
    Ok(0)
}

/// Recompute a metric report from saved volumes.
pub fn cmd_metrics(
    recon_path: &Path,
    truth_path: &Path,
    data_range: f64,
    anchor: Option<(usize, usize)>,
    method_label: &str,
    views_label: usize,
    out: Option<&Path>,
) -> CliResult<i32> {
    let recon = tomo_io::read_volume_file(recon_path).map_err(cfg_err)?;
    let truth = tomo_io::read_volume_file(truth_path).map_err(cfg_err)?;
    let global_psnr = psnr(&recon, &truth, data_range).map_err(run_err)?;
    let global_ssim = ssim(&recon, &truth, data_range).map_err(run_err)?;
    let anchor = match anchor {
        Some(a) => a,
        None => propose_anchor(&truth, data_range).map_err(run_err)?,
    };
    let spec = RoiSpec::standard(truth.side(), anchor.0, anchor.1).map_err(cfg_err)?;
    let roi = roi_psnr_sweep(&recon, &truth, &spec, data_range).map_err(run_err)?;
    let report = MetricReport {
        method: method_label.to_string(),
        views: views_label,
        psnr: global_psnr,
        ssim: global_ssim,
        roi: roi.clone(),
        data_range,
    };
    println!("{}", MetricReport::csv_header());
    println!("{}", report.csv_row());
    println!("roi scale: {:?} (anchor at {:?})", spec.scale, anchor);
    if let Some(dir) = out {
        ensure_dir(dir)?;
        export::write_summary_csv(&dir.join("metrics.csv"), &[report]).map_err(run_err)?;
        export::write_roi_csv(&dir.join("roi.csv"), &roi).map_err(run_err)?;
    }
    Ok(0)
}

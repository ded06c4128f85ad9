//! Regenerate the fuzz corpus seeds from the format writers.
//!
//! ```text
//! cargo run --example gen_fuzz_corpus -- fuzz/corpus
//! ```

use std::path::Path;

use dinr::diffusion::{save_denoiser_bytes, DenoiserModel, NoiseSchedule, ScheduleKind};
use dinr::inr::{save_inr_bytes, InrModel};
use dinr::nnkit::{io::write_params_bytes, ConvLayerSpec, ConvSpec, ParamSet, Tensor};
use dinr::tomo::{io::geometry_to_text, io::write_tensor_bytes, Geometry};

fn write(dir: &Path, name: &str, bytes: &[u8]) {
    std::fs::create_dir_all(dir).expect("create corpus dir");
    std::fs::write(dir.join(name), bytes).expect("write seed");
    println!("wrote {}", dir.join(name).display());
}

fn main() {
    let base = std::env::args().nth(1).unwrap_or_else(|| "fuzz/corpus".to_string());
    let base = Path::new(&base);

    // weights_file: raw container, denoiser file, INR file, truncated file.
    let dir = base.join("weights_file");
    let mut params = ParamSet::build(&[("layer0.w", vec![2, 3]), ("layer0.b", vec![3])]).unwrap();
    for (i, v) in params.values.iter_mut().enumerate() {
        *v = i as f64 * 0.25 - 0.5;
    }
    let raw = write_params_bytes(&params, b"hdr");
    write(&dir, "params.bin", &raw);
    write(&dir, "params_truncated.bin", &raw[..raw.len() / 2]);
    let sched = NoiseSchedule::new(8, ScheduleKind::LinearBeta).unwrap();
    let spec = ConvSpec::new(vec![
        ConvLayerSpec { in_ch: 1, out_ch: 2, kernel: 3 },
        ConvLayerSpec { in_ch: 2, out_ch: 1, kernel: 3 },
    ])
    .unwrap();
    let denoiser = DenoiserModel::init(spec, sched, 1).unwrap();
    write(&dir, "denoiser.bin", &save_denoiser_bytes(&denoiser));
    let inr = InrModel::new(&[4], 30.0, 1).unwrap();
    write(&dir, "inr.bin", &save_inr_bytes(&inr));

    // tensor_file
    let dir = base.join("tensor_file");
    let t = Tensor::new(vec![2, 3, 4], (0..24).map(|i| i as f64 * 0.1).collect()).unwrap();
    let bytes = write_tensor_bytes(&t);
    write(&dir, "volume.bin", &bytes);
    write(&dir, "volume_truncated.bin", &bytes[..bytes.len() - 3]);
    write(&dir, "scalar.bin", &write_tensor_bytes(&Tensor::scalar(1.5)));

    // geometry_sidecar
    let dir = base.join("geometry_sidecar");
    let geom = Geometry::parallel(4, 9, 1.0, (8, 8)).unwrap();
    write(&dir, "geometry.txt", geometry_to_text(&geom).as_bytes());
    write(&dir, "partial.txt", b"n_views = 2\nangles = 0.0, 0.5\n");

    // config_file
    let dir = base.join("config_file");
    let config = "\
[phantom]
image_size = 32
n_slices = 1

[experiment]
views = 4, 8
methods = fbp, dinr
master_seed = 7
out_dir = out
weights = w.dinrw

[recon]
t_steps = 5

[recon.dinr]
omega = 0.02
";
    write(&dir, "experiment.ini", config.as_bytes());
    write(&dir, "minimal.ini", b"[experiment]\nviews = 4\nmethods = fbp\n");
    write(&dir, "broken.ini", b"[phantom\nimage_size 64\n");
}

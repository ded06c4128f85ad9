//! Noise schedule, denoiser pretraining, the deterministic-implicit reverse
//! step, and spherically interpolated noise draws.
//!
//! The schedule stores cumulative products `abar_1..abar_T`, decreasing in
//! (0, 1], with `abar_0 := 1` so the final reverse step is the identity.
//! The denoiser predicts the injected noise; the clean estimate is recovered
//! as `(x_t - sqrt(1 - abar_t) eps) / sqrt(abar_t)`.

use crate::error::{Error, Result};
use crate::nnkit::io::{read_params_bytes, write_params_bytes, ByteReader};
use crate::nnkit::{
    adam_step_default, convnet_on, timestep_embedding, AdamState, ConvLayerSpec, ConvSpec,
    ParamSet, Tape, Tensor,
};
use crate::rng::Rng;
use crate::tomo::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    LinearBeta,
    Cosine,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear-beta" | "linear" => Ok(ScheduleKind::LinearBeta),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(Error::invalid(format!("unknown schedule kind {other:?}"))),
        }
    }
}

impl ScheduleKind {
    pub fn name(&self) -> &'static str {
        match self {
            ScheduleKind::LinearBeta => "linear-beta",
            ScheduleKind::Cosine => "cosine",
        }
    }
}

/// Cumulative noise-retention sequence for the reverse process.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    alphas: Vec<f64>,
}

// Reference DDPM beta endpoints at 1000 training steps; shorter schedules
// scale the betas up so total noise stays comparable.
const BETA_START: f64 = 1e-4;
const BETA_END: f64 = 0.02;
const REFERENCE_T: f64 = 1000.0;

impl NoiseSchedule {
    pub fn new(t_steps: usize, kind: ScheduleKind) -> Result<Self> {
        if t_steps < 2 {
            return Err(Error::invalid("schedule needs T >= 2"));
        }
        let alphas = match kind {
            ScheduleKind::LinearBeta => {
                let scale = REFERENCE_T / t_steps as f64;
                let mut acc = 1.0;
                (0..t_steps)
                    .map(|i| {
                        let frac = i as f64 / (t_steps as f64 - 1.0);
                        let beta =
                            (scale * (BETA_START + frac * (BETA_END - BETA_START))).min(0.999);
                        acc *= 1.0 - beta;
                        acc
                    })
                    .collect()
            }
            ScheduleKind::Cosine => {
                let s = 0.008;
                let f = |t: f64| {
                    let arg = (t + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2;
                    arg.cos() * arg.cos()
                };
                let f0 = f(0.0);
                (1..=t_steps).map(|t| f(t as f64 / t_steps as f64) / f0).collect()
            }
        };
        NoiseSchedule::from_alphas(kind, alphas)
    }

    /// Build from explicit cumulative values; validates the invariants
    /// (strictly decreasing, each in (0, 1]). Single-entry schedules are
    /// allowed here so a reverse pass can run with one step.
    pub fn from_alphas(kind: ScheduleKind, alphas: Vec<f64>) -> Result<Self> {
        if alphas.is_empty() {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        let mut prev = 1.0 + 1e-15;
        for (i, &a) in alphas.iter().enumerate() {
            if !(a > 0.0 && a <= 1.0) || !a.is_finite() {
                return Err(Error::invalid(format!("alpha[{i}] = {a} outside (0, 1]")));
            }
            if a >= prev {
                return Err(Error::invalid(format!("alphas not strictly decreasing at {i}")));
            }
            prev = a;
        }
        Ok(NoiseSchedule { kind, alphas })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn t_steps(&self) -> usize {
        self.alphas.len()
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    /// Cumulative retention at step t, with the t = 0 identity limit.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        self.alphas
            .get(t - 1)
            .copied()
            .ok_or_else(|| Error::invalid(format!("t = {t} outside schedule of {} steps", self.t_steps())))
    }

    /// Evenly strided sub-schedule with n steps, keeping the final value, so
    /// inference can run far fewer steps than training.
    pub fn subsample(&self, n: usize) -> Result<NoiseSchedule> {
        let t = self.t_steps();
        if n < 1 || n > t {
            return Err(Error::invalid(format!("cannot stride {t}-step schedule down to {n}")));
        }
        let alphas = (1..=n).map(|k| self.alphas[k * t / n - 1]).collect();
        NoiseSchedule::from_alphas(self.kind, alphas)
    }

    /// Training-schedule index that inference step k of an n-step strided
    /// pass corresponds to (used for timestep embeddings).
    pub fn strided_train_index(&self, k: usize, n: usize) -> usize {
        k * self.t_steps() / n
    }
}

/// Forward-process sample: `sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
pub fn q_sample(x0: &Volume, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Volume> {
    if t < 1 || t > sched.t_steps() {
        return Err(Error::invalid(format!("q_sample t = {t} out of range")));
    }
    if eps.shape() != x0.data().shape() {
        return Err(Error::ShapeMismatch {
            context: "q_sample eps",
            expected: x0.data().shape().to_vec(),
            got: eps.shape().to_vec(),
        });
    }
    let ab = sched.alpha_bar(t)?;
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data: Vec<f64> = x0
        .data()
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&x, &e)| sa * x + sn * e)
        .collect();
    Volume::new(Tensor::new(x0.data().shape().to_vec(), data)?)
}

/// Deterministic-implicit reverse step:
/// `sqrt(abar_{t-1}) x_hat + sqrt(1 - abar_{t-1}) (eta eps + (1-eta) eps_theta)`.
/// At t = 1 the prefactor pair is (1, 0), so the clean estimate passes
/// through unchanged.
pub fn ddim_step(
    x_hat: &Volume,
    eps_theta: &Tensor,
    eps_slerp: &Tensor,
    t: usize,
    eta: f64,
    sched: &NoiseSchedule,
) -> Result<Volume> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::invalid(format!("eta = {eta} outside [0, 1]")));
    }
    if t < 1 || t > sched.t_steps() {
        return Err(Error::invalid(format!("ddim_step t = {t} out of range")));
    }
    for (what, tensor) in [("eps_theta", eps_theta), ("eps_slerp", eps_slerp)] {
        if tensor.shape() != x_hat.data().shape() {
            return Err(Error::ShapeMismatch {
                context: "ddim_step noise",
                expected: x_hat.data().shape().to_vec(),
                got: tensor.shape().to_vec(),
            });
        }
        tensor.assert_finite(what)?;
    }
    let ab_prev = sched.alpha_bar(t - 1)?;
    let (sa, sn) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    let data: Vec<f64> = x_hat
        .data()
        .data()
        .iter()
        .zip(eps_theta.data())
        .zip(eps_slerp.data())
        .map(|((&x, &et), &es)| sa * x + sn * (eta * es + (1.0 - eta) * et))
        .collect();
    Volume::new(Tensor::new(x_hat.data().shape().to_vec(), data)?)
}

/// Reference noise for spherical interpolation, fixed once per
/// reconstruction run.
#[derive(Debug, Clone)]
pub struct NoiseDraw {
    pub reference: Tensor,
    /// Mixing weight toward the fresh draw; 0 keeps the reference, 1 takes
    /// the fresh sample.
    pub lambda: f64,
}

impl NoiseDraw {
    pub fn new(shape: Vec<usize>, lambda: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::invalid(format!("slerp lambda = {lambda} outside [0, 1]")));
        }
        let mut rng = Rng::derive(seed, 0x5e1f);
        let n: usize = shape.iter().product();
        let mut data = vec![0.0; n];
        rng.fill_normal(&mut data);
        Ok(NoiseDraw { reference: Tensor::new(shape, data)?, lambda })
    }
}

/// Great-circle interpolation between the run's reference noise and a fresh
/// per-step draw. Norm is preserved in expectation, so the output keeps unit
/// marginal variance. Nearly colinear draws fall back to the reference.
pub fn slerp_noise(draw: &NoiseDraw, seed: u64, step: usize) -> Tensor {
    let mut rng = Rng::derive(seed, 0xf4e5 ^ (step as u64).wrapping_mul(0x9E37_79B9));
    let mut fresh = vec![0.0; draw.reference.len()];
    rng.fill_normal(&mut fresh);
    let fresh = Tensor::new(draw.reference.shape().to_vec(), fresh).expect("shape is consistent");

    let dot = draw.reference.dot(&fresh).expect("same shape");
    let denom = draw.reference.norm() * fresh.norm();
    let cos_gamma = if denom > 0.0 { (dot / denom).clamp(-1.0, 1.0) } else { 1.0 };
    let gamma = cos_gamma.acos();
    if gamma.sin().abs() < 1e-9 {
        return draw.reference.clone();
    }
    let wa = ((1.0 - draw.lambda) * gamma).sin() / gamma.sin();
    let wb = (draw.lambda * gamma).sin() / gamma.sin();
    let data: Vec<f64> = draw
        .reference
        .data()
        .iter()
        .zip(fresh.data())
        .map(|(&a, &b)| wa * a + wb * b)
        .collect();
    Tensor::new(draw.reference.shape().to_vec(), data).expect("shape is consistent")
}

/// Pretrained denoiser: weights, architecture, and the schedule it was
/// trained under.
#[derive(Debug, Clone)]
pub struct DenoiserModel {
    pub params: ParamSet,
    pub spec: ConvSpec,
    pub schedule: NoiseSchedule,
}

impl DenoiserModel {
    pub fn init(spec: ConvSpec, schedule: NoiseSchedule, seed: u64) -> Result<Self> {
        let mut params = spec.build_params();
        let mut rng = Rng::derive(seed, 0xd0e0);
        spec.init_he(&mut params, &mut rng)?;
        Ok(DenoiserModel { params, spec, schedule })
    }

    /// Predicted noise for a `(slices, n, n)` stack, one slice at a time
    /// through the shared weights.
    pub fn predict_eps(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        let shape = x_t.shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::ShapeMismatch {
                context: "denoiser input",
                expected: vec![3],
                got: vec![shape.len()],
            });
        }
        let (slices, h, w) = (shape[0], shape[1], shape[2]);
        let embed = timestep_embedding(t, self.spec.embed_dim());
        let mut out = Vec::with_capacity(x_t.len());
        for s in 0..slices {
            let slice = Tensor::new(
                vec![1, h, w],
                x_t.data()[s * h * w..(s + 1) * h * w].to_vec(),
            )?;
            let mut tape = Tape::new();
            let input = tape.leaf(slice);
            let eps = convnet_on(&mut tape, &self.params, input, &self.spec, &embed)?;
            out.extend_from_slice(tape.value(eps).data());
        }
        Tensor::new(shape, out)
    }

    /// Clean estimate recovered from predicted noise:
    /// `(x_t - sqrt(1-abar_t) eps) / sqrt(abar_t)`.
    pub fn denoised_estimate(&self, x_t: &Tensor, eps: &Tensor, t: usize) -> Result<Volume> {
        let ab = self.schedule.alpha_bar(t)?;
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        let data: Vec<f64> = x_t
            .data()
            .iter()
            .zip(eps.data())
            .map(|(&x, &e)| (x - sn * e) / sa)
            .collect();
        Volume::new(Tensor::new(x_t.shape().to_vec(), data)?)
    }
}

/// Per-epoch mean training loss.
#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub epoch_losses: Vec<f64>,
}

/// Denoising pretraining: for each sample draw a uniform timestep and a
/// noise tensor, corrupt with [`q_sample`], and regress the injected noise
/// with Adam. Gradients are averaged over mini-batches in a fixed order.
pub fn pretrain(
    model: &mut DenoiserModel,
    dataset: &[Volume],
    epochs: usize,
    lr: f64,
    seed: u64,
    batch_size: usize,
) -> Result<TrainLog> {
    if dataset.is_empty() {
        return Err(Error::invalid("pretraining dataset is empty"));
    }
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be >= 1"));
    }
    let mut log = TrainLog::default();
    if epochs == 0 {
        return Ok(log);
    }
    let t_steps = model.schedule.t_steps();
    let mut rng = Rng::derive(seed, 0x7247);
    let mut state = AdamState::new(model.params.len());

    for epoch in 0..epochs {
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for batch in dataset.chunks(batch_size) {
            model.params.zero_grads();
            let mut batch_loss = 0.0;
            for sample in batch {
                let t = 1 + rng.below(t_steps);
                let mut eps = vec![0.0; sample.data().len()];
                rng.fill_normal(&mut eps);
                let eps = Tensor::new(sample.data().shape().to_vec(), eps)?;
                let noisy = q_sample(sample, t, &eps, &model.schedule)?;

                let shape = sample.data().shape();
                let (slices, h, w) = (shape[0], shape[1], shape[2]);
                let embed = timestep_embedding(t, model.spec.embed_dim());
                let mut tape = Tape::new();
                let mut slice_losses = Vec::with_capacity(slices);
                for s in 0..slices {
                    let x_in = tape.leaf(Tensor::new(
                        vec![1, h, w],
                        noisy.data().data()[s * h * w..(s + 1) * h * w].to_vec(),
                    )?);
                    let target = tape.leaf(Tensor::new(
                        vec![1, h, w],
                        eps.data()[s * h * w..(s + 1) * h * w].to_vec(),
                    )?);
                    let pred = convnet_on(&mut tape, &model.params, x_in, &model.spec, &embed)?;
                    slice_losses.push(tape.mse(pred, target)?);
                }
                let mut loss = slice_losses[0];
                for &l in &slice_losses[1..] {
                    loss = tape.add(loss, l)?;
                }
                if slices > 1 {
                    loss = tape.scale(loss, 1.0 / slices as f64);
                }
                let loss_value = tape.value(loss).item();
                if !loss_value.is_finite() {
                    return Err(Error::Diverged(format!(
                        "pretraining loss became non-finite at epoch {epoch}"
                    )));
                }
                batch_loss += loss_value;
                tape.backward(loss)?;
                tape.apply_grads(&mut model.params);
            }
            let inv = 1.0 / batch.len() as f64;
            for g in model.params.grads.iter_mut() {
                *g *= inv;
            }
            adam_step_default(&mut model.params, &mut state, lr)?;
            epoch_loss += batch_loss;
            seen += batch.len();
        }
        log.epoch_losses.push(epoch_loss / seen as f64);
    }
    Ok(log)
}

// ---- weight file header (schedule + architecture) ----

const DENOISER_HEADER_VERSION: u8 = 1;

fn encode_header(model: &DenoiserModel) -> Vec<u8> {
    let mut h = Vec::new();
    h.push(DENOISER_HEADER_VERSION);
    h.push(match model.schedule.kind() {
        ScheduleKind::LinearBeta => 0u8,
        ScheduleKind::Cosine => 1u8,
    });
    h.extend_from_slice(&(model.schedule.t_steps() as u32).to_le_bytes());
    for &a in model.schedule.alphas() {
        h.extend_from_slice(&a.to_le_bytes());
    }
    h.extend_from_slice(&(model.spec.layers.len() as u32).to_le_bytes());
    for l in &model.spec.layers {
        h.extend_from_slice(&(l.in_ch as u32).to_le_bytes());
        h.extend_from_slice(&(l.out_ch as u32).to_le_bytes());
        h.extend_from_slice(&(l.kernel as u32).to_le_bytes());
    }
    h
}

fn decode_header(header: &[u8]) -> Result<(NoiseSchedule, ConvSpec)> {
    let mut r = ByteReader::new(header, "denoiser header");
    let version = r.take_u8()?;
    if version != DENOISER_HEADER_VERSION {
        return Err(Error::Format {
            what: "denoiser header",
            msg: format!("unsupported version {version}"),
        });
    }
    let kind = match r.take_u8()? {
        0 => ScheduleKind::LinearBeta,
        1 => ScheduleKind::Cosine,
        other => {
            return Err(Error::Format {
                what: "denoiser header",
                msg: format!("unknown schedule kind {other}"),
            })
        }
    };
    let t_steps = r.take_u32()? as usize;
    if t_steps > r.remaining() / 8 {
        return Err(Error::Format { what: "denoiser header", msg: "schedule overruns header".into() });
    }
    let mut alphas = Vec::with_capacity(t_steps);
    for _ in 0..t_steps {
        alphas.push(r.take_f64()?);
    }
    let schedule = NoiseSchedule::from_alphas(kind, alphas)?;
    let n_layers = r.take_u32()? as usize;
    if n_layers > r.remaining() / 12 {
        return Err(Error::Format { what: "denoiser header", msg: "layer table overruns header".into() });
    }
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let in_ch = r.take_u32()? as usize;
        let out_ch = r.take_u32()? as usize;
        let kernel = r.take_u32()? as usize;
        if kernel == 0 || kernel.is_multiple_of(2) || kernel > 65 {
            return Err(Error::Format {
                what: "denoiser header",
                msg: format!("bad kernel size {kernel}"),
            });
        }
        layers.push(ConvLayerSpec { in_ch, out_ch, kernel });
    }
    r.expect_end()?;
    Ok((schedule, ConvSpec::new(layers)?))
}

pub fn save_denoiser_bytes(model: &DenoiserModel) -> Vec<u8> {
    write_params_bytes(&model.params, &encode_header(model))
}

pub fn load_denoiser_bytes(bytes: &[u8]) -> Result<DenoiserModel> {
    let (params, header) = read_params_bytes(bytes)?;
    let (schedule, spec) = decode_header(&header)?;
    let expected = spec.build_params();
    if expected.layout() != params.layout() {
        return Err(Error::Format {
            what: "weights file",
            msg: "parameter layout does not match declared architecture".into(),
        });
    }
    Ok(DenoiserModel { params, spec, schedule })
}

pub fn save_denoiser_file(path: &std::path::Path, model: &DenoiserModel) -> Result<()> {
    std::fs::write(path, save_denoiser_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load_denoiser_file(path: &std::path::Path) -> Result<DenoiserModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    load_denoiser_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_volume(n: usize, fill: f64) -> Volume {
        Volume::new(Tensor::full(vec![1, n, n], fill)).unwrap()
    }

    #[test]
    fn linear_schedule_monotone_and_bounded() {
        let s = NoiseSchedule::new(2, ScheduleKind::LinearBeta).unwrap();
        assert!(s.alphas()[0] > s.alphas()[1]);
        assert!(s.alphas().iter().all(|&a| a > 0.0 && a < 1.0));
        assert!(NoiseSchedule::new(1, ScheduleKind::LinearBeta).is_err());
    }

    #[test]
    fn standard_thousand_step_schedule_ends_near_zero() {
        let s = NoiseSchedule::new(1000, ScheduleKind::LinearBeta).unwrap();
        assert!(s.alphas()[999] < 0.01, "abar_T = {}", s.alphas()[999]);
    }

    #[test]
    fn cosine_schedule_starts_near_one() {
        let s = NoiseSchedule::new(1000, ScheduleKind::Cosine).unwrap();
        assert!(s.alphas()[0] > 0.99, "abar_1 = {}", s.alphas()[0]);
    }

    #[test]
    fn subsample_keeps_final_value() {
        let s = NoiseSchedule::new(1000, ScheduleKind::LinearBeta).unwrap();
        let sub = s.subsample(25).unwrap();
        assert_eq!(sub.t_steps(), 25);
        assert_eq!(sub.alphas()[24], s.alphas()[999]);
        // Single-step inference schedules keep only the final value.
        let one = s.subsample(1).unwrap();
        assert_eq!(one.alphas(), &[s.alphas()[999]]);
        assert!(s.subsample(0).is_err());
        assert!(s.subsample(1001).is_err());
    }

    #[test]
    fn q_sample_with_zero_noise_scales_input() {
        let sched = NoiseSchedule::new(10, ScheduleKind::LinearBeta).unwrap();
        let x0 = tiny_volume(4, 1.0);
        let eps = Tensor::zeros(vec![1, 4, 4]);
        let out = q_sample(&x0, 3, &eps, &sched).unwrap();
        let want = sched.alpha_bar(3).unwrap().sqrt();
        for &v in out.data().data() {
            assert_eq!(v, want);
        }
        assert!(q_sample(&x0, 0, &eps, &sched).is_err());
        assert!(q_sample(&x0, 11, &eps, &sched).is_err());
    }

    #[test]
    fn q_sample_identity_limit() {
        let sched =
            NoiseSchedule::from_alphas(ScheduleKind::LinearBeta, vec![1.0 - 1e-12, 0.5]).unwrap();
        let x0 = tiny_volume(4, 0.7);
        let mut rng = Rng::new(1);
        let mut noise = vec![0.0; 16];
        rng.fill_normal(&mut noise);
        let eps = Tensor::new(vec![1, 4, 4], noise).unwrap();
        let out = q_sample(&x0, 1, &eps, &sched).unwrap();
        for (&o, &x) in out.data().data().iter().zip(x0.data().data()) {
            assert!((o - x).abs() < 1e-5);
        }
    }

    #[test]
    fn q_sample_variance_matches_schedule() {
        // Monte Carlo: x0 = 0, variance over draws equals 1 - abar_t within
        // 3 sigma of the sample-variance estimator.
        let sched = NoiseSchedule::new(10, ScheduleKind::LinearBeta).unwrap();
        let t = 7;
        let want = 1.0 - sched.alpha_bar(t).unwrap();
        let x0 = tiny_volume(1, 0.0);
        let mut rng = Rng::new(77);
        let n = 10_000;
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            let eps = Tensor::new(vec![1, 1, 1], vec![rng.normal()]).unwrap();
            values.push(q_sample(&x0, t, &eps, &sched).unwrap().data().data()[0]);
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        let sigma = want * (2.0 / (n as f64 - 1.0)).sqrt();
        assert!((var - want).abs() < 3.0 * sigma, "var {var} vs {want} (3s = {})", 3.0 * sigma);
    }

    #[test]
    fn ddim_final_step_is_identity() {
        let sched = NoiseSchedule::new(10, ScheduleKind::LinearBeta).unwrap();
        let x_hat = tiny_volume(3, 0.42);
        let mut rng = Rng::new(2);
        let mut noise = vec![0.0; 9];
        rng.fill_normal(&mut noise);
        let eps = Tensor::new(vec![1, 3, 3], noise.clone()).unwrap();
        let out = ddim_step(&x_hat, &eps, &eps, 1, 0.7, &sched).unwrap();
        assert_eq!(out.data().data(), x_hat.data().data());
    }

    #[test]
    fn ddim_scalar_arithmetic_example() {
        // abar_{t-1} = 0.25, x_hat = 2, eta = 0.5, slerp = 1, theta = -1:
        // 0.5*2 + sqrt(0.75)*(0.5*1 + 0.5*(-1)) = 1.0
        let sched =
            NoiseSchedule::from_alphas(ScheduleKind::LinearBeta, vec![0.25, 0.04]).unwrap();
        let x_hat = tiny_volume(1, 2.0);
        let slerp = Tensor::full(vec![1, 1, 1], 1.0);
        let theta = Tensor::full(vec![1, 1, 1], -1.0);
        let out = ddim_step(&x_hat, &theta, &slerp, 2, 0.5, &sched).unwrap();
        assert!((out.data().data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ddim_eta_zero_ignores_slerp_noise() {
        let sched = NoiseSchedule::new(10, ScheduleKind::LinearBeta).unwrap();
        let x_hat = tiny_volume(4, 0.3);
        let mut rng = Rng::new(3);
        let mut a = vec![0.0; 16];
        let mut b = vec![0.0; 16];
        let mut c = vec![0.0; 16];
        rng.fill_normal(&mut a);
        rng.fill_normal(&mut b);
        rng.fill_normal(&mut c);
        let theta = Tensor::new(vec![1, 4, 4], a).unwrap();
        let s1 = Tensor::new(vec![1, 4, 4], b).unwrap();
        let s2 = Tensor::new(vec![1, 4, 4], c).unwrap();
        let o1 = ddim_step(&x_hat, &theta, &s1, 5, 0.0, &sched).unwrap();
        let o2 = ddim_step(&x_hat, &theta, &s2, 5, 0.0, &sched).unwrap();
        assert_eq!(o1.data().data(), o2.data().data());
        assert!(ddim_step(&x_hat, &theta, &s1, 5, 1.5, &sched).is_err());
    }

    #[test]
    fn ddim_is_affine_in_all_tensor_arguments() {
        let sched = NoiseSchedule::new(8, ScheduleKind::LinearBeta).unwrap();
        let mut rng = Rng::new(4);
        let mk = |rng: &mut Rng| {
            let mut d = vec![0.0; 4];
            rng.fill_normal(&mut d);
            Tensor::new(vec![1, 2, 2], d).unwrap()
        };
        let (xa, xb) = (mk(&mut rng), mk(&mut rng));
        let (ta, tb) = (mk(&mut rng), mk(&mut rng));
        let (sa, sb) = (mk(&mut rng), mk(&mut rng));
        let (u, v) = (0.35, 0.65);
        let combo = |a: &Tensor, b: &Tensor| {
            Tensor::new(
                vec![1, 2, 2],
                a.data().iter().zip(b.data()).map(|(&p, &q)| u * p + v * q).collect(),
            )
            .unwrap()
        };
        let vol = |t: &Tensor| Volume::new(t.clone()).unwrap();
        let lhs = ddim_step(&vol(&combo(&xa, &xb)), &combo(&ta, &tb), &combo(&sa, &sb), 4, 0.3, &sched)
            .unwrap();
        let ra = ddim_step(&vol(&xa), &ta, &sa, 4, 0.3, &sched).unwrap();
        let rb = ddim_step(&vol(&xb), &tb, &sb, 4, 0.3, &sched).unwrap();
        for i in 0..4 {
            let want = u * ra.data().data()[i] + v * rb.data().data()[i];
            assert!((lhs.data().data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_denoising_recovers_input() {
        // q_sample then invert with the injected noise as the oracle eps.
        let sched = NoiseSchedule::new(20, ScheduleKind::LinearBeta).unwrap();
        let spec = ConvSpec::denoiser_default();
        let model = DenoiserModel {
            params: spec.build_params(),
            spec,
            schedule: sched.clone(),
        };
        let mut rng = Rng::new(6);
        let x0 = Volume::new(Tensor::new(
            vec![1, 4, 4],
            (0..16).map(|_| rng.uniform_in(-1.0, 1.0)).collect(),
        ).unwrap()).unwrap();
        for t in [1, 10, 20] {
            let mut noise = vec![0.0; 16];
            rng.fill_normal(&mut noise);
            let eps = Tensor::new(vec![1, 4, 4], noise).unwrap();
            let x_t = q_sample(&x0, t, &eps, &sched).unwrap();
            let back = model.denoised_estimate(x_t.data(), &eps, t).unwrap();
            for (a, b) in back.data().data().iter().zip(x0.data().data()) {
                assert!((a - b).abs() < 1e-6, "t={t}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn slerp_endpoints_are_exact() {
        let mut d = NoiseDraw::new(vec![1, 8, 8], 0.0, 9).unwrap();
        let out = slerp_noise(&d, 1, 0);
        assert_eq!(out.data(), d.reference.data());
        d.lambda = 1.0;
        let mut rng = Rng::derive(1, 0xf4e5);
        let mut fresh = vec![0.0; 64];
        rng.fill_normal(&mut fresh);
        let out = slerp_noise(&d, 1, 0);
        assert_eq!(out.data(), &fresh[..]);
    }

    #[test]
    fn slerp_preserves_unit_variance() {
        let draw = NoiseDraw::new(vec![1, 16, 16], 0.2, 11).unwrap();
        let mut acc = 0.0;
        let mut count = 0usize;
        for step in 0..1000 {
            let out = slerp_noise(&draw, 11, step);
            acc += out.data().iter().map(|v| v * v).sum::<f64>();
            count += out.len();
        }
        let var = acc / count as f64;
        assert!((0.9..1.1).contains(&var), "empirical variance {var}");
    }

    #[test]
    fn pretrain_zero_epochs_is_identity() {
        let sched = NoiseSchedule::new(10, ScheduleKind::LinearBeta).unwrap();
        let spec = ConvSpec::new(vec![ConvLayerSpec { in_ch: 1, out_ch: 2, kernel: 3 },
                                      ConvLayerSpec { in_ch: 2, out_ch: 1, kernel: 3 }]).unwrap();
        let mut model = DenoiserModel::init(spec, sched, 1).unwrap();
        let before = model.params.values.clone();
        let data = vec![tiny_volume(8, 0.0); 4];
        let log = pretrain(&mut model, &data, 0, 1e-3, 0, 2).unwrap();
        assert!(log.epoch_losses.is_empty());
        assert_eq!(model.params.values, before);
    }

    #[test]
    fn pretrain_loss_trend_improves() {
        let sched = NoiseSchedule::new(50, ScheduleKind::LinearBeta).unwrap();
        let spec = ConvSpec::new(vec![ConvLayerSpec { in_ch: 1, out_ch: 4, kernel: 3 },
                                      ConvLayerSpec { in_ch: 4, out_ch: 1, kernel: 3 }]).unwrap();
        let mut model = DenoiserModel::init(spec, sched, 2).unwrap();
        let cfg = crate::phantom::PhantomConfig { image_size: 16, ..Default::default() };
        let data = crate::phantom::ellipse_dataset(&cfg, 24, 5).unwrap();
        let log = pretrain(&mut model, &data, 4, 5e-3, 3, 4).unwrap();
        assert_eq!(log.epoch_losses.len(), 4);
        let last = *log.epoch_losses.last().unwrap();
        assert!(
            last <= log.epoch_losses[0],
            "loss went up: {:?}",
            log.epoch_losses
        );
    }

    #[test]
    fn trained_denoiser_tracks_input_noise() {
        // Constant-zero dataset: at large t the optimal prediction is close
        // to the input itself, so prediction/input cosine similarity on pure
        // noise must clear 0.5.
        let sched = NoiseSchedule::new(50, ScheduleKind::LinearBeta).unwrap();
        let spec = ConvSpec::new(vec![ConvLayerSpec { in_ch: 1, out_ch: 8, kernel: 3 },
                                      ConvLayerSpec { in_ch: 8, out_ch: 1, kernel: 3 }]).unwrap();
        let mut model = DenoiserModel::init(spec, sched, 4).unwrap();
        let data = vec![tiny_volume(32, 0.0); 48];
        pretrain(&mut model, &data, 6, 1e-2, 7, 8).unwrap();

        let mut rng = Rng::new(99);
        let mut noise = vec![0.0; 32 * 32];
        rng.fill_normal(&mut noise);
        let x = Tensor::new(vec![1, 32, 32], noise).unwrap();
        let pred = model.predict_eps(&x, 50).unwrap();
        let cos = x.dot(&pred).unwrap() / (x.norm() * pred.norm());
        assert!(cos > 0.5, "cosine similarity {cos}");
    }

    #[test]
    fn denoiser_file_round_trip() {
        let sched = NoiseSchedule::new(25, ScheduleKind::Cosine).unwrap();
        let spec = ConvSpec::denoiser_default();
        let model = DenoiserModel::init(spec, sched, 8).unwrap();
        let bytes = save_denoiser_bytes(&model);
        let back = load_denoiser_bytes(&bytes).unwrap();
        assert_eq!(back.spec, model.spec);
        assert_eq!(back.schedule.kind(), model.schedule.kind());
        assert_eq!(back.schedule.t_steps(), model.schedule.t_steps());
        // Schedule survives the round trip monotone (f64 values are exact).
        assert_eq!(back.schedule.alphas(), model.schedule.alphas());
        for (a, b) in model.params.values.iter().zip(&back.params.values) {
            assert_eq!(*a as f32, *b as f32);
        }
        // Corrupted header is a clean error.
        let mut bad = save_denoiser_bytes(&model);
        bad[12] = 9;
        assert!(load_denoiser_bytes(&bad).is_err());
    }

    #[test]
    fn deterministic_reverse_pass_is_bit_reproducible() {
        let sched = NoiseSchedule::new(8, ScheduleKind::LinearBeta).unwrap();
        let spec = ConvSpec::new(vec![ConvLayerSpec { in_ch: 1, out_ch: 4, kernel: 3 },
                                      ConvLayerSpec { in_ch: 4, out_ch: 1, kernel: 3 }]).unwrap();
        let mut model = DenoiserModel::init(spec, sched.clone(), 10).unwrap();
        let mut rng = Rng::new(11);
        for v in model.params.values.iter_mut() {
            *v = rng.uniform_in(-0.3, 0.3);
        }
        let run = || {
            let mut rng = Rng::new(12);
            let mut x = vec![0.0; 36];
            rng.fill_normal(&mut x);
            let mut x = Tensor::new(vec![1, 6, 6], x).unwrap();
            for t in (1..=8).rev() {
                let eps = model.predict_eps(&x, t).unwrap();
                let x_hat = model.denoised_estimate(&x, &eps, t).unwrap();
                x = ddim_step(&x_hat, &eps, &eps, t, 0.0, &sched).unwrap().into_tensor();
            }
            x.data().iter().map(|v| v.to_bits()).collect::<Vec<u64>>()
        };
        assert_eq!(run(), run());
    }
}

//! FBP-conditioned sinusoidal implicit representation and its proximal
//! training loss.
//!
//! The network maps `(x, y, z, fbp)` per lattice point to an attenuation
//! value; the fourth channel is the FBP estimate sampled at that point,
//! affinely mapped to the network's [-1, 1] range. The loss couples a
//! data-fidelity term through the projector with an optional quadratic pull
//! toward a diffusion estimate.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nnkit::io::{read_params_bytes, write_params_bytes, ByteReader};
use crate::nnkit::{
    adam_step_default, mlp_on, AdamState, Activation, MlpSpec, ParamSet, Tape, Tensor,
};
use crate::rng::Rng;
use crate::tomo::{backproject_raw, project_raw, Geometry, Sinogram, Volume};

/// Normalized lattice coordinates, one `(x, y, z)` row per voxel in the
/// volume's row-major order, each axis exactly symmetric about 0.
#[derive(Debug, Clone)]
pub struct CoordinateGrid {
    points: Tensor,
    pub dims: (usize, usize, usize),
}

fn axis_coord(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        (2.0 * i as f64 - (n as f64 - 1.0)) / (n as f64 - 1.0)
    }
}

impl CoordinateGrid {
    pub fn new(slices: usize, side: usize) -> Result<Self> {
        if slices == 0 || side == 0 {
            return Err(Error::invalid("grid dims must be nonzero"));
        }
        let mut data = Vec::with_capacity(slices * side * side * 3);
        for s in 0..slices {
            let z = axis_coord(s, slices);
            for r in 0..side {
                let y = axis_coord(r, side);
                for c in 0..side {
                    data.push(axis_coord(c, side));
                    data.push(y);
                    data.push(z);
                }
            }
        }
        Ok(CoordinateGrid {
            points: Tensor::new(vec![slices * side * side, 3], data)?,
            dims: (slices, side, side),
        })
    }

    pub fn points(&self) -> &Tensor {
        &self.points
    }

    pub fn n_points(&self) -> usize {
        self.points.shape()[0]
    }
}

/// SIREN weights plus architecture: input width is 3 coordinates + 1
/// conditioning channel.
#[derive(Debug, Clone)]
pub struct InrModel {
    pub params: ParamSet,
    pub spec: MlpSpec,
    pub w0: f64,
}

pub const INR_INPUT_WIDTH: usize = 4;

impl InrModel {
    pub fn new(hidden: &[usize], w0: f64, seed: u64) -> Result<Self> {
        let mut widths = vec![INR_INPUT_WIDTH];
        widths.extend_from_slice(hidden);
        widths.push(1);
        let spec = MlpSpec::new(widths)?;
        let mut params = spec.build_params();
        let mut rng = Rng::derive(seed, 0x51e0);
        spec.init_siren(&mut params, w0, &mut rng)?;
        Ok(InrModel { params, spec, w0 })
    }
}

/// Assemble the `(P, 4)` network input: grid coordinates plus the FBP value
/// at each point mapped to the [-1, 1] network range (v -> 2v - 1).
fn build_input(grid: &CoordinateGrid, fbp_vol: &Volume) -> Result<Tensor> {
    let (s, h, w) = grid.dims;
    if fbp_vol.data().shape() != [s, h, w] {
        return Err(Error::ShapeMismatch {
            context: "inr conditioning volume",
            expected: vec![s, h, w],
            got: fbp_vol.data().shape().to_vec(),
        });
    }
    let p = grid.n_points();
    let coords = grid.points().data();
    let fbp = fbp_vol.data().data();
    let mut data = Vec::with_capacity(p * INR_INPUT_WIDTH);
    for i in 0..p {
        data.extend_from_slice(&coords[i * 3..i * 3 + 3]);
        data.push(2.0 * fbp[i] - 1.0);
    }
    Tensor::new(vec![p, INR_INPUT_WIDTH], data)
}

/// Build the SIREN evaluation on a tape, returning the `(S, H, W)` volume
/// node in physical attenuation units.
fn inr_volume_on(
    tape: &mut Tape,
    model: &InrModel,
    grid: &CoordinateGrid,
    fbp_vol: &Volume,
) -> Result<crate::nnkit::Node> {
    let input = tape.leaf(build_input(grid, fbp_vol)?);
    let out = mlp_on(tape, &model.params, input, &model.spec, Activation::Sine(model.w0))?;
    let (s, h, w) = grid.dims;
    tape.reshape(out, vec![s, h, w])
}

/// Evaluate the INR over the whole grid.
pub fn inr_forward(model: &InrModel, grid: &CoordinateGrid, fbp_vol: &Volume) -> Result<Volume> {
    let mut tape = Tape::new();
    let node = inr_volume_on(&mut tape, model, grid, fbp_vol)?;
    Volume::new(tape.value(node).clone())
}

/// Loss terms from one proximal-loss evaluation; `total = data + rho * prox`
/// exactly as computed on the graph.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: f64,
    pub data: f64,
    pub prox: f64,
}

/// Data-fidelity MSE through the projector plus `rho` times the quadratic
/// pull toward `x_hat`, with gradients for the INR weights accumulated into
/// `model.params.grads` through both terms.
pub fn proximal_loss(
    model: &mut InrModel,
    grid: &CoordinateGrid,
    y: &Sinogram,
    fbp_vol: &Volume,
    x_hat: Option<&Volume>,
    rho: f64,
) -> Result<LossTerms> {
    let (terms, mut tape, loss) = proximal_loss_graph(model, grid, y, fbp_vol, x_hat, rho)?;
    tape.backward(loss)?;
    tape.apply_grads(&mut model.params);
    Ok(terms)
}

fn proximal_loss_graph(
    model: &InrModel,
    grid: &CoordinateGrid,
    y: &Sinogram,
    fbp_vol: &Volume,
    x_hat: Option<&Volume>,
    rho: f64,
) -> Result<(LossTerms, Tape, crate::nnkit::Node)> {
    if rho < 0.0 || !rho.is_finite() {
        return Err(Error::invalid(format!("rho = {rho} must be finite and >= 0")));
    }
    if rho > 0.0 && x_hat.is_none() {
        return Err(Error::invalid("rho > 0 requires a proximal target"));
    }
    let (s, h, w) = grid.dims;
    if y.geometry.image_size != (h, w) || y.slices() != s {
        return Err(Error::ShapeMismatch {
            context: "proximal loss sinogram",
            expected: vec![s, h, w],
            got: vec![y.slices(), y.geometry.image_size.0, y.geometry.image_size.1],
        });
    }

    let mut tape = Tape::new();
    let vol_node = inr_volume_on(&mut tape, model, grid, fbp_vol)?;

    let geom_f: Geometry = y.geometry.clone();
    let geom_a: Geometry = y.geometry.clone();
    let projected = tape.linear_map(
        vol_node,
        move |t| project_raw(t, &geom_f),
        move |t| backproject_raw(t, &geom_a),
    );
    let y_node = tape.leaf(y.data().clone());
    let data_node = tape.mse(projected, y_node)?;

    let (loss, data, prox) = if rho > 0.0 {
        let target = tape.leaf(x_hat.expect("checked above").data().clone());
        let prox_node = tape.mse(vol_node, target)?;
        let scaled = tape.scale(prox_node, rho);
        let total = tape.add(data_node, scaled)?;
        (total, tape.value(data_node).item(), tape.value(prox_node).item())
    } else {
        (data_node, tape.value(data_node).item(), 0.0)
    };
    let total_value = tape.value(loss).item();
    if !total_value.is_finite() {
        return Err(Error::Diverged("proximal loss is non-finite".into()));
    }
    Ok((LossTerms { total: total_value, data, prox }, tape, loss))
}

/// Outcome of one [`fit_inr`] call.
#[derive(Debug, Clone, Copy)]
pub struct FitStats {
    pub initial: LossTerms,
    pub last: LossTerms,
    pub steps: usize,
    /// False when the final loss did not improve on the initial loss;
    /// callers emit the non-improvement warning.
    pub improved: bool,
}

/// Run Adam on the proximal loss from the current weights (warm start).
/// `lr = 0` evaluates the loss without updating anything.
#[allow(clippy::too_many_arguments)]
pub fn fit_inr(
    model: &mut InrModel,
    grid: &CoordinateGrid,
    y: &Sinogram,
    fbp_vol: &Volume,
    x_hat: Option<&Volume>,
    rho: f64,
    steps: usize,
    lr: f64,
) -> Result<FitStats> {
    let mut state = AdamState::new(model.params.len());
    fit_inr_with_state(model, &mut state, grid, y, fbp_vol, x_hat, rho, steps, lr)
}

/// [`fit_inr`] continuing an external optimizer state, so a fit split into
/// chunks (as the diffusion loop does each timestep) behaves like one
/// uninterrupted run of the same budget.
#[allow(clippy::too_many_arguments)]
pub fn fit_inr_with_state(
    model: &mut InrModel,
    state: &mut AdamState,
    grid: &CoordinateGrid,
    y: &Sinogram,
    fbp_vol: &Volume,
    x_hat: Option<&Volume>,
    rho: f64,
    steps: usize,
    lr: f64,
) -> Result<FitStats> {
    if steps < 1 {
        return Err(Error::invalid("fit_inr needs steps >= 1"));
    }
    if lr < 0.0 {
        return Err(Error::invalid("fit_inr lr must be >= 0"));
    }
    let mut initial: Option<LossTerms> = None;
    for _ in 0..steps {
        model.params.zero_grads();
        let terms = proximal_loss(model, grid, y, fbp_vol, x_hat, rho)?;
        if initial.is_none() {
            initial = Some(terms);
        }
        if lr == 0.0 {
            break;
        }
        adam_step_default(&mut model.params, state, lr)?;
    }
    // Honest final value: evaluate after the last update.
    let (last, _, _) = proximal_loss_graph(model, grid, y, fbp_vol, x_hat, rho)?;
    let initial = initial.expect("at least one step ran");
    Ok(FitStats {
        initial,
        last,
        steps,
        improved: last.total <= initial.total,
    })
}

/// Fix the proximal weight from a target prox/data ratio, evaluated once at
/// the first proximal update of a run and then held. A zero prox term yields
/// rho = 0 with a warning message instead of an error.
pub fn resolve_rho(
    data_term: f64,
    prox_term: f64,
    ratio_target: f64,
) -> Result<(f64, Option<String>)> {
    if !(data_term.is_finite() && prox_term.is_finite() && ratio_target.is_finite()) {
        return Err(Error::invalid("resolve_rho arguments must be finite"));
    }
    if data_term < 0.0 || prox_term < 0.0 || ratio_target < 0.0 {
        return Err(Error::invalid("resolve_rho arguments must be non-negative"));
    }
    if ratio_target == 0.0 {
        return Ok((0.0, None));
    }
    if prox_term == 0.0 {
        return Ok((
            0.0,
            Some("proximal term is zero; rho set to 0 for this run".to_string()),
        ));
    }
    Ok((ratio_target * data_term / prox_term, None))
}

// ---- weight file header (architecture descriptor) ----

const INR_HEADER_VERSION: u8 = 1;

pub fn save_inr_bytes(model: &InrModel) -> Vec<u8> {
    let mut h = Vec::new();
    h.push(INR_HEADER_VERSION);
    h.extend_from_slice(&(model.spec.widths.len() as u32).to_le_bytes());
    for &w in &model.spec.widths {
        h.extend_from_slice(&(w as u32).to_le_bytes());
    }
    h.extend_from_slice(&model.w0.to_le_bytes());
    write_params_bytes(&model.params, &h)
}

pub fn load_inr_bytes(bytes: &[u8]) -> Result<InrModel> {
    let (params, header) = read_params_bytes(bytes)?;
    let mut r = ByteReader::new(&header, "inr header");
    let version = r.take_u8()?;
    if version != INR_HEADER_VERSION {
        return Err(Error::Format { what: "inr header", msg: format!("unsupported version {version}") });
    }
    let n = r.take_u32()? as usize;
    if n > r.remaining() / 4 {
        return Err(Error::Format { what: "inr header", msg: "width table overruns header".into() });
    }
    let mut widths = Vec::with_capacity(n);
    for _ in 0..n {
        widths.push(r.take_u32()? as usize);
    }
    let w0 = r.take_f64()?;
    r.expect_end()?;
    if !w0.is_finite() || w0 <= 0.0 {
        return Err(Error::Format { what: "inr header", msg: format!("bad w0 {w0}") });
    }
    let spec = MlpSpec::new(widths)?;
    if spec.build_params().layout() != params.layout() {
        return Err(Error::Format {
            what: "inr header",
            msg: "parameter layout does not match declared widths".into(),
        });
    }
    Ok(InrModel { params, spec, w0 })
}

pub fn save_inr_file(path: &Path, model: &InrModel) -> Result<()> {
    std::fs::write(path, save_inr_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load_inr_file(path: &Path) -> Result<InrModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    load_inr_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tomo::{fbp, project, Apodization, Geometry};

    fn zero_volume(s: usize, n: usize) -> Volume {
        Volume::zeros(s, n)
    }

    #[test]
    fn grid_is_symmetric_and_row_major() {
        let g = CoordinateGrid::new(2, 4).unwrap();
        assert_eq!(g.n_points(), 32);
        let pts = g.points().data();
        // First point: (x, y, z) = (-1, -1, -1); last: (1, 1, 1).
        assert_eq!(&pts[0..3], &[-1.0, -1.0, -1.0]);
        assert_eq!(&pts[pts.len() - 3..], &[1.0, 1.0, 1.0]);
        // Exact symmetry: coordinate i negates coordinate n-1-i.
        for i in 0..4 {
            assert_eq!(axis_coord(i, 4), -axis_coord(3 - i, 4));
        }
        // Single-slice z collapses to 0.
        let g1 = CoordinateGrid::new(1, 4).unwrap();
        assert!(g1.points().data().chunks(3).all(|p| p[2] == 0.0));
    }

    #[test]
    fn zero_final_layer_gives_zero_volume() {
        let mut model = InrModel::new(&[8], 30.0, 1).unwrap();
        let last = model.spec.n_layers() - 1;
        for v in model.params.slice_mut(&format!("layer{last}.w")).unwrap() {
            *v = 0.0;
        }
        for v in model.params.slice_mut(&format!("layer{last}.b")).unwrap() {
            *v = 0.0;
        }
        let grid = CoordinateGrid::new(1, 6).unwrap();
        let out = inr_forward(&model, &grid, &zero_volume(1, 6)).unwrap();
        assert!(out.data().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_matches_scalar_loop_siren_oracle() {
        // Plain-loop SIREN over a 4x4 grid, float64, 1e-12.
        let model = InrModel::new(&[5, 3], 30.0, 42).unwrap();
        let grid = CoordinateGrid::new(1, 4).unwrap();
        let mut rng = Rng::new(17);
        let fbp_vals: Vec<f64> = (0..16).map(|_| rng.uniform_in(0.0, 1.0)).collect();
        let fbp_vol =
            Volume::new(Tensor::new(vec![1, 4, 4], fbp_vals.clone()).unwrap()).unwrap();

        let got = inr_forward(&model, &grid, &fbp_vol).unwrap();

        let widths = &model.spec.widths;
        for (i, point) in grid.points().data().chunks(3).enumerate() {
            let mut acts = vec![point[0], point[1], point[2], 2.0 * fbp_vals[i] - 1.0];
            for l in 0..model.spec.n_layers() {
                let w = model.params.slice(&format!("layer{l}.w")).unwrap();
                let b = model.params.slice(&format!("layer{l}.b")).unwrap();
                let (wi, wo) = (widths[l], widths[l + 1]);
                let mut next = vec![0.0; wo];
                for o in 0..wo {
                    let mut acc = b[o];
                    for k in 0..wi {
                        acc += acts[k] * w[k * wo + o];
                    }
                    next[o] = if l + 1 < model.spec.n_layers() {
                        (30.0 * acc).sin()
                    } else {
                        acc
                    };
                }
                acts = next;
            }
            let want = acts[0];
            let have = got.data().data()[i];
            assert!((have - want).abs() < 1e-12, "point {i}: {have} vs {want}");
        }
    }

    #[test]
    fn evaluation_is_pointwise() {
        // Permuting input rows permutes outputs identically, so evaluating a
        // sub-grid equals slicing the full evaluation.
        let model = InrModel::new(&[6], 30.0, 7).unwrap();
        let grid = CoordinateGrid::new(1, 4).unwrap();
        let mut rng = Rng::new(3);
        let fbp_vol = Volume::new(
            Tensor::new(vec![1, 4, 4], (0..16).map(|_| rng.uniform_in(0.0, 1.0)).collect()).unwrap(),
        )
        .unwrap();
        let full = inr_forward(&model, &grid, &fbp_vol).unwrap();

        let input = build_input(&grid, &fbp_vol).unwrap();
        let perm: Vec<usize> = (0..16).rev().collect();
        let mut permuted = Vec::new();
        for &i in &perm {
            permuted.extend_from_slice(&input.data()[i * 4..(i + 1) * 4]);
        }
        let (tape, out) = crate::nnkit::forward_mlp(
            &model.params,
            &Tensor::new(vec![16, 4], permuted).unwrap(),
            &model.spec,
            Activation::Sine(model.w0),
        )
        .unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(tape.value(out).data()[k], full.data().data()[i]);
        }
    }

    #[test]
    fn rho_zero_loss_is_pure_data_term_bitwise() {
        let mut model = InrModel::new(&[8], 30.0, 5).unwrap();
        let grid = CoordinateGrid::new(1, 8).unwrap();
        let geom = Geometry::parallel(4, 13, 1.0, (8, 8)).unwrap();
        let truth = zero_volume(1, 8);
        let y = project(&truth, &geom).unwrap();
        let fbp_vol = zero_volume(1, 8);

        let junk = Volume::new(Tensor::full(vec![1, 8, 8], 123.0)).unwrap();
        model.params.zero_grads();
        let a = proximal_loss(&mut model, &grid, &y, &fbp_vol, None, 0.0).unwrap();
        let grads_a = model.params.grads.clone();
        model.params.zero_grads();
        let b = proximal_loss(&mut model, &grid, &y, &fbp_vol, Some(&junk), 0.0).unwrap();
        assert_eq!(a.total.to_bits(), b.total.to_bits());
        assert_eq!(a.data.to_bits(), b.data.to_bits());
        assert_eq!(grads_a, model.params.grads);
        assert_eq!(a.prox, 0.0);
    }

    #[test]
    fn rho_without_target_is_error() {
        let mut model = InrModel::new(&[4], 30.0, 5).unwrap();
        let grid = CoordinateGrid::new(1, 8).unwrap();
        let geom = Geometry::parallel(4, 13, 1.0, (8, 8)).unwrap();
        let y = project(&zero_volume(1, 8), &geom).unwrap();
        assert!(
            proximal_loss(&mut model, &grid, &y, &zero_volume(1, 8), None, 0.5).is_err()
        );
    }

    #[test]
    fn exact_fit_has_zero_loss() {
        // Zero the final layer so the INR outputs the zero volume, and take
        // the zero volume as truth: both terms vanish.
        let mut model = InrModel::new(&[8], 30.0, 2).unwrap();
        let last = model.spec.n_layers() - 1;
        for name in [format!("layer{last}.w"), format!("layer{last}.b")] {
            for v in model.params.slice_mut(&name).unwrap() {
                *v = 0.0;
            }
        }
        let grid = CoordinateGrid::new(1, 8).unwrap();
        let geom = Geometry::parallel(4, 13, 1.0, (8, 8)).unwrap();
        let truth = zero_volume(1, 8);
        let y = project(&truth, &geom).unwrap();
        let terms =
            proximal_loss(&mut model, &grid, &y, &zero_volume(1, 8), Some(&truth), 0.5).unwrap();
        assert_eq!(terms.total, 0.0);
        assert_eq!(terms.data, 0.0);
        assert_eq!(terms.prox, 0.0);
    }

    #[test]
    fn loss_decomposes_exactly() {
        let mut model = InrModel::new(&[8], 30.0, 9).unwrap();
        let grid = CoordinateGrid::new(1, 8).unwrap();
        let geom = Geometry::parallel(4, 13, 1.0, (8, 8)).unwrap();
        let mut rng = Rng::new(30);
        let truth = Volume::new(
            Tensor::new(vec![1, 8, 8], (0..64).map(|_| rng.uniform_in(0.0, 1.0)).collect()).unwrap(),
        )
        .unwrap();
        let y = project(&truth, &geom).unwrap();
        let rho = 0.37;
        let terms =
            proximal_loss(&mut model, &grid, &y, &zero_volume(1, 8), Some(&truth), rho).unwrap();
        assert!(terms.data >= 0.0 && terms.prox >= 0.0);
        assert_eq!(terms.total, terms.data + rho * terms.prox);
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn gradients_through_projector_match_finite_differences() {
        let model = InrModel::new(&[6], 30.0, 11).unwrap();
        let grid = CoordinateGrid::new(1, 8).unwrap();
        let geom = Geometry::parallel(4, 13, 1.0, (8, 8)).unwrap();
        let mut rng = Rng::new(50);
        let truth = Volume::new(
            Tensor::new(vec![1, 8, 8], (0..64).map(|_| rng.uniform_in(0.0, 1.0)).collect()).unwrap(),
        )
        .unwrap();
        let y = project(&truth, &geom).unwrap();
        let fbp_vol = fbp(&y, Apodization::RamLak).unwrap();

        let loss_of = |p: &ParamSet| {
            let probe = InrModel { params: p.clone(), spec: model.spec.clone(), w0: model.w0 };
            let (terms, _, _) =
                proximal_loss_graph(&probe, &grid, &y, &fbp_vol, None, 0.0).unwrap();
            terms.total
        };
        let h = 1e-4;
        let mut fd = vec![0.0; model.params.len()];
        let mut probe = model.params.clone();
        for i in 0..probe.len() {
            let orig = probe.values[i];
            probe.values[i] = orig + h;
            let hi = loss_of(&probe);
            probe.values[i] = orig - h;
            let lo = loss_of(&probe);
            probe.values[i] = orig;
            fd[i] = (hi - lo) / (2.0 * h);
        }

        let mut m = model.clone();
        m.params.zero_grads();
        proximal_loss(&mut m, &grid, &y, &fbp_vol, None, 0.0).unwrap();
        let mut max_rel = 0.0f64;
        for (g, w) in m.params.grads.iter().zip(&fd) {
            let rel = (g - w).abs() / g.abs().max(w.abs()).max(1e-6);
            max_rel = max_rel.max(rel);
        }
        assert!(max_rel < 1e-5, "max rel err {max_rel}");
    }

    #[test]
    fn prox_gradient_vanishes_at_its_target() {
        // With x_hat equal to the INR's own output the quadratic is at its
        // stationary point: gradients match the rho = 0 gradients.
        let model = InrModel::new(&[8], 30.0, 13).unwrap();
        let grid = CoordinateGrid::new(1, 8).unwrap();
        let geom = Geometry::parallel(4, 13, 1.0, (8, 8)).unwrap();
        let truth = zero_volume(1, 8);
        let y = project(&truth, &geom).unwrap();
        let fbp_vol = zero_volume(1, 8);
        let self_output = inr_forward(&model, &grid, &fbp_vol).unwrap();

        let mut a = model.clone();
        a.params.zero_grads();
        proximal_loss(&mut a, &grid, &y, &fbp_vol, None, 0.0).unwrap();
        let mut b = model.clone();
        b.params.zero_grads();
        proximal_loss(&mut b, &grid, &y, &fbp_vol, Some(&self_output), 10.0).unwrap();
        for (ga, gb) in a.params.grads.iter().zip(&b.params.grads) {
            assert!((ga - gb).abs() < 1e-14);
        }
    }

    #[test]
    fn fit_with_zero_lr_changes_nothing() {
        let mut model = InrModel::new(&[6], 30.0, 3).unwrap();
        let before = model.params.values.clone();
        let grid = CoordinateGrid::new(1, 8).unwrap();
        let geom = Geometry::parallel(4, 13, 1.0, (8, 8)).unwrap();
        let y = project(&zero_volume(1, 8), &geom).unwrap();
        fit_inr(&mut model, &grid, &y, &zero_volume(1, 8), None, 0.0, 5, 0.0).unwrap();
        assert_eq!(model.params.values, before);
    }

    #[test]
    fn fit_recovers_disc_to_within_fbp_quality() {
        // 16x16 disc from 60 views, rho = 0: the fit must land within 3 dB
        // of the FBP reconstruction.
        let n = 16;
        let mut data = vec![0.0; n * n];
        let c = (n as f64 - 1.0) / 2.0;
        for r in 0..n {
            for col in 0..n {
                let dy = r as f64 - c;
                let dx = col as f64 - c;
                if (dx * dx + dy * dy).sqrt() < 5.0 {
                    data[r * n + col] = 0.8;
                }
            }
        }
        let truth = Volume::new(Tensor::new(vec![1, n, n], data).unwrap()).unwrap();
        let geom = Geometry::parallel(60, Geometry::covering_detector_count(n), 1.0, (n, n)).unwrap();
        let y = project(&truth, &geom).unwrap();
        let fbp_vol = fbp(&y, Apodization::RamLak).unwrap();
        let grid = CoordinateGrid::new(1, n).unwrap();
        let mut model = InrModel::new(&[32, 32], 30.0, 21).unwrap();
        let stats =
            fit_inr(&mut model, &grid, &y, &fbp_vol, None, 0.0, 2000, 1e-3).unwrap();
        assert!(stats.improved, "fit did not improve: {stats:?}");
        let recon = inr_forward(&model, &grid, &fbp_vol).unwrap();

        let psnr_of = |v: &Volume| crate::metrics::psnr(v, &truth, 1.0).unwrap().db();
        let inr_db = psnr_of(&recon);
        let fbp_db = psnr_of(&fbp_vol);
        assert!(
            inr_db > fbp_db - 3.0,
            "INR {inr_db:.2} dB not within 3 dB of FBP {fbp_db:.2} dB"
        );
    }

    #[test]
    fn huge_rho_pins_output_to_target() {
        let n = 16;
        let mut rng = Rng::new(60);
        let target = Volume::new(
            Tensor::new(
                vec![1, n, n],
                (0..n * n).map(|_| 0.4 + 0.2 * rng.uniform()).collect(),
            )
            .unwrap(),
        )
        .unwrap();
        let geom = Geometry::parallel(8, Geometry::covering_detector_count(n), 1.0, (n, n)).unwrap();
        let y = project(&target, &geom).unwrap();
        let grid = CoordinateGrid::new(1, n).unwrap();
        let mut model = InrModel::new(&[32, 32], 30.0, 22).unwrap();
        fit_inr(&mut model, &grid, &y, &Volume::zeros(1, n), Some(&target), 1e6, 1500, 1e-3)
            .unwrap();
        let out = inr_forward(&model, &grid, &Volume::zeros(1, n)).unwrap();
        let diff = out.data().sub(target.data()).unwrap().norm();
        let rel = diff / target.data().norm();
        assert!(rel < 0.05, "relative distance {rel}");
    }

    #[test]
    fn resolve_rho_examples() {
        assert_eq!(resolve_rho(1.0, 1.0, 1e-5).unwrap().0, 1e-5);
        let (rho, warn) = resolve_rho(2.0, 0.5, 1e-6).unwrap();
        assert!((rho - 4e-6).abs() < 1e-18);
        assert!(warn.is_none());
        assert_eq!(resolve_rho(1.0, 1.0, 0.0).unwrap().0, 0.0);
        let (rho, warn) = resolve_rho(1.0, 0.0, 1e-5).unwrap();
        assert_eq!(rho, 0.0);
        assert!(warn.is_some());
        assert!(resolve_rho(f64::NAN, 1.0, 1e-5).is_err());
    }

    #[test]
    fn inr_weights_round_trip() {
        let model = InrModel::new(&[16, 16], 30.0, 33).unwrap();
        let bytes = save_inr_bytes(&model);
        let back = load_inr_bytes(&bytes).unwrap();
        assert_eq!(back.spec, model.spec);
        assert_eq!(back.w0, model.w0);
        for (a, b) in model.params.values.iter().zip(&back.params.values) {
            assert_eq!(*a as f32, *b as f32);
        }
        let mut bad = save_inr_bytes(&model);
        bad[12] = 0xFF;
        assert!(load_inr_bytes(&bad).is_err());
    }
}

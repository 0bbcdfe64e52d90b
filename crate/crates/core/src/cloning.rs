//! The cloning loop: regress a student layer onto an equivariant teacher using
//! freshly sampled Gaussian inputs and Gaussian kernels at every step.

use std::fmt;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::agnostic::{StudentKind, StudentLayer};
use crate::data::{ClonedStack, LayerMeta};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::groups::PaddingMode;
use crate::layers::{conv2d, group_conv, lifting_conv};
use crate::metrics::{equivariance_error, fmt_f64, EquivarianceProbe, Geometry, SymmetryGroup};
use crate::optim::{apply_gradients, Optimizer, OptimizerConfig};
use crate::rng::{sample_standard_normal, SeededRng};
use crate::spatial::TAPS;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TeacherKind {
    /// Planar 3x3 convolution.
    Conv,
    /// Planar input lifted to four orientations.
    Lifting,
    /// Lifted input, lifted output.
    Groupconv,
}

impl fmt::Display for TeacherKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Conv => "conv",
            Self::Lifting => "lifting",
            Self::Groupconv => "groupconv",
        })
    }
}

/// A single-channel equivariant layer on a `grid x grid` input; its kernel is drawn
/// per sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TeacherSpec {
    pub kind: TeacherKind,
    pub grid: usize,
    pub padding: PaddingMode,
}

impl TeacherSpec {
    pub fn n(&self) -> usize {
        self.grid * self.grid
    }

    /// Per-sample input shape without the batch axis, flattened spatially.
    pub fn input_shape(&self) -> Vec<usize> {
        match self.kind {
            TeacherKind::Conv | TeacherKind::Lifting => vec![1, self.n()],
            TeacherKind::Groupconv => vec![1, 4, self.n()],
        }
    }

    /// Per-sample kernel shape: `[1, 1, 9]` or `[1, 1, 4, 9]`.
    pub fn kernel_shape(&self) -> Vec<usize> {
        match self.kind {
            TeacherKind::Conv | TeacherKind::Lifting => vec![1, 1, TAPS],
            TeacherKind::Groupconv => vec![1, 1, 4, TAPS],
        }
    }

    pub fn output_shape(&self) -> Vec<usize> {
        match self.kind {
            TeacherKind::Conv => vec![1, self.n()],
            TeacherKind::Lifting | TeacherKind::Groupconv => vec![1, 4, self.n()],
        }
    }

    pub fn group(&self) -> SymmetryGroup {
        match self.kind {
            TeacherKind::Conv => SymmetryGroup::T2,
            TeacherKind::Lifting | TeacherKind::Groupconv => SymmetryGroup::C4,
        }
    }

    /// Teacher outputs for `x [batch, ..input_shape]` and per-sample kernels
    /// `tau [batch, ..kernel_shape]`.
    pub fn forward<T: Scalar>(&self, x: &Tensor<T>, tau: &Tensor<T>) -> Result<Tensor<T>> {
        let batch = x.shape().first().copied().unwrap_or(0);
        let mut want_x = vec![batch];
        want_x.extend(self.input_shape());
        let mut want_t = vec![batch];
        want_t.extend(self.kernel_shape());
        if x.shape() != want_x || tau.shape() != want_t {
            return Err(Error::shape("teacher forward", x.shape(), tau.shape()));
        }
        let g = self.grid;
        let outs = (0..batch)
            .map(|i| {
                let tape = Tape::new();
                let xi = x.slice_outer(i)?;
                let ti = tau.slice_outer(i)?;
                let y = match self.kind {
                    TeacherKind::Conv => conv2d(
                        tape.constant(xi.reshape(vec![1, 1, g, g])?),
                        tape.constant(ti.reshape(vec![1, 1, TAPS])?),
                        None,
                        self.padding,
                    )?,
                    TeacherKind::Lifting => lifting_conv(
                        tape.constant(xi.reshape(vec![1, 1, g, g])?),
                        tape.constant(ti.reshape(vec![1, 1, TAPS])?),
                        None,
                        self.padding,
                    )?,
                    TeacherKind::Groupconv => group_conv(
                        tape.constant(xi.reshape(vec![1, 1, 4, g, g])?),
                        tape.constant(ti.reshape(vec![1, 1, 4, TAPS])?),
                        None,
                        self.padding,
                    )?,
                };
                let y = y.value();
                (*y).clone().reshape(self.output_shape())
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::stack(&outs)
    }
}

/// One supervised batch: inputs, kernels and teacher outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct CloneBatch<T: Scalar = f32> {
    pub x: Tensor<T>,
    pub tau: Tensor<T>,
    pub y: Tensor<T>,
}

/// Draws `x` then `tau` (both standard normal) and labels them with the teacher.
pub fn sample_clone_batch<T: Scalar>(rng: &mut SeededRng, teacher: &TeacherSpec, batch: usize) -> Result<CloneBatch<T>> {
    let mut xs = vec![batch];
    xs.extend(teacher.input_shape());
    let mut ts = vec![batch];
    ts.extend(teacher.kernel_shape());
    let x = sample_standard_normal(rng, &xs)?;
    let tau = sample_standard_normal(rng, &ts)?;
    let y = teacher.forward(&x, &tau)?;
    Ok(CloneBatch { x, tau, y })
}

/// The student's counterpart of the teacher's forward pass.
pub fn student_forward<'t, T: Scalar>(
    student: &StudentLayer<T>,
    teacher: &TeacherSpec,
    tape: &'t Tape<T>,
    x: Var<'t, T>,
    tau: Var<'t, T>,
) -> Result<Var<'t, T>> {
    if student.grid() != teacher.grid {
        return Err(Error::invalid(format!(
            "student grid {} does not match teacher grid {}",
            student.grid(),
            teacher.grid
        )));
    }
    match (student, teacher.kind) {
        (StudentLayer::Planar(l), TeacherKind::Conv) => l.apply(tape, x, tau),
        (StudentLayer::C4(l), TeacherKind::Lifting) => l.lifting(tape, x, tau),
        (StudentLayer::C4(l), TeacherKind::Groupconv) => l.group(tape, x, tau),
        _ => Err(Error::invalid(format!(
            "a {} student cannot imitate a {} teacher",
            student.kind(),
            teacher.kind
        ))),
    }
}

fn batch_mse<T: Scalar>(student: &StudentLayer<T>, teacher: &TeacherSpec, batch: &CloneBatch<T>) -> Result<f64> {
    let tape = Tape::new();
    let pred = student_forward(student, teacher, &tape, tape.constant(batch.x.clone()), tape.constant(batch.tau.clone()))?;
    Ok(pred.mse(&batch.y)?.value().item().to_f64())
}

/// `MSE / mean(y^2)` on a batch.
pub fn relative_mse<T: Scalar>(student: &StudentLayer<T>, teacher: &TeacherSpec, batch: &CloneBatch<T>) -> Result<f64> {
    let mse = batch_mse(student, teacher, batch)?;
    let power = batch.y.data().iter().map(|&v| Scalar::to_f64(v).powi(2)).sum::<f64>() / batch.y.len() as f64;
    Ok(if power == 0.0 { mse } else { mse / power })
}

/// One forward/backward/update on `batch`; returns the loss before the update.
pub fn clone_step<T: Scalar>(
    student: &mut StudentLayer<T>,
    teacher: &TeacherSpec,
    batch: &CloneBatch<T>,
    optimizer: &mut Optimizer<T>,
    seed: u64,
) -> Result<f64> {
    let tape = Tape::new();
    let pred = student_forward(student, teacher, &tape, tape.constant(batch.x.clone()), tape.constant(batch.tau.clone()))?;
    let loss = pred.mse(&batch.y)?;
    let value = loss.value().item().to_f64();
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: optimizer.steps_taken() as usize,
            seed,
        });
    }
    let grads = tape.backward(loss)?;
    apply_gradients(student, &grads, optimizer)?;
    Ok(value)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CloneConfig {
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub max_steps: usize,
    /// Number of most recent evaluations averaged for the stopping rule.
    pub window: usize,
    /// Stop once the windowed relative validation MSE drops below this.
    pub eps_rel: f64,
    pub eval_interval: usize,
    pub val_batch: usize,
    /// Samples per equivariance measurement logged at each evaluation.
    pub equiv_samples: usize,
    /// Set from the run's seed section, not the clone table.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for CloneConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            optimizer: OptimizerConfig::adam(1e-3),
            max_steps: 50_000,
            window: 10,
            eps_rel: 0.01,
            eval_interval: 100,
            val_batch: 256,
            equiv_samples: 16,
            seed: 0,
        }
    }
}

impl CloneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(Error::Config {
            key: format!("clone.{key}"),
            msg: msg.into(),
        });
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if !(self.eps_rel > 0.0) {
            return bad("eps_rel", "must be positive");
        }
        if self.window == 0 {
            return bad("window", "must be at least 1");
        }
        if self.eval_interval == 0 {
            return bad("eval_interval", "must be at least 1");
        }
        if self.val_batch == 0 {
            return bad("val_batch", "must be at least 1");
        }
        self.optimizer.validate().map_err(|e| Error::Config {
            key: "clone.optimizer".into(),
            msg: e.to_string(),
        })
    }
}

/// One logged evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloneEval {
    pub step: usize,
    /// Training loss of the most recent step (validation MSE at step 0).
    pub loss: f64,
    pub rel_mse: f64,
    pub equiv_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloneReport {
    pub converged: bool,
    pub steps: usize,
    pub final_rel_mse: f64,
    pub initial_equiv_error: f64,
    pub final_equiv_error: f64,
    /// Wall-clock time; the only field that varies between identical runs.
    pub duration_secs: f64,
    pub evaluations: Vec<CloneEval>,
    #[serde(skip)]
    pub losses: Vec<f64>,
}

impl CloneReport {
    /// `step,loss,rel_mse,equiv_error`, one row per evaluation.
    pub fn write_loss_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["step", "loss", "rel_mse", "equiv_error"])?;
        for e in &self.evaluations {
            w.write_record([e.step.to_string(), fmt_f64(e.loss), fmt_f64(e.rel_mse), fmt_f64(e.equiv_error)])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Seed offsets of the independent streams used by one cloning run.
const VALIDATION_STREAM: u64 = 0x5641_4c49_4441_5445;
const PROBE_STREAM: u64 = 0x4551_5549_5641_5249;

/// Trains until the mean relative validation MSE over the last `window`
/// evaluations (fewer at the start) is below `eps_rel`, or `max_steps` is reached.
/// Evaluations happen at step 0 and every `eval_interval` steps, each on a fresh
/// batch from a validation stream independent of the training stream.
pub fn clone_until_converged<T: Scalar>(
    student: &mut StudentLayer<T>,
    teacher: &TeacherSpec,
    cfg: &CloneConfig,
) -> Result<CloneReport> {
    cfg.validate()?;
    let start = Instant::now();
    let mut train_rng = SeededRng::new(cfg.seed);
    let mut val_rng = SeededRng::new(cfg.seed ^ VALIDATION_STREAM);
    let mut optimizer = Optimizer::new(cfg.optimizer)?;
    let mut evaluations: Vec<CloneEval> = Vec::new();
    let mut losses = Vec::new();

    let evaluate = |student: &StudentLayer<T>, step: usize, loss: Option<f64>, val_rng: &mut SeededRng| -> Result<CloneEval> {
        let batch = sample_clone_batch(val_rng, teacher, cfg.val_batch)?;
        let rel_mse = relative_mse(student, teacher, &batch)?;
        let loss = match loss {
            Some(l) => l,
            None => batch_mse(student, teacher, &batch)?,
        };
        let equiv_error = student_equivariance(student, teacher, cfg.equiv_samples, cfg.seed ^ PROBE_STREAM)?;
        Ok(CloneEval {
            step,
            loss,
            rel_mse,
            equiv_error,
        })
    };
    let converged = |evals: &[CloneEval]| {
        let recent = &evals[evals.len().saturating_sub(cfg.window)..];
        recent.iter().map(|e| e.rel_mse).sum::<f64>() / (recent.len() as f64) < cfg.eps_rel
    };

    evaluations.push(evaluate(student, 0, None, &mut val_rng)?);
    let initial_equiv_error = evaluations[0].equiv_error;
    let mut step = 0;
    let mut done = converged(&evaluations);
    while !done && step < cfg.max_steps {
        let batch = sample_clone_batch(&mut train_rng, teacher, cfg.batch_size)?;
        let loss = clone_step(student, teacher, &batch, &mut optimizer, cfg.seed)?;
        losses.push(loss);
        step += 1;
        if step % cfg.eval_interval == 0 || step == cfg.max_steps {
            evaluations.push(evaluate(student, step, Some(loss), &mut val_rng)?);
            done = converged(&evaluations);
        }
    }
    let last = evaluations.last().expect("initial evaluation");
    Ok(CloneReport {
        converged: done,
        steps: step,
        final_rel_mse: last.rel_mse,
        initial_equiv_error,
        final_equiv_error: last.equiv_error,
        duration_secs: start.elapsed().as_secs_f64(),
        evaluations,
        losses,
    })
}

/// Teacher for layer `index` of a cloned stack. C4 stacks start with a lifting
/// layer and continue with group convolutions unless `kind` asks for group
/// convolutions throughout.
pub fn stack_teacher(kind: TeacherKind, index: usize, grid: usize, padding: PaddingMode) -> TeacherSpec {
    let kind = match kind {
        TeacherKind::Lifting if index > 0 => TeacherKind::Groupconv,
        k => k,
    };
    TeacherSpec { kind, grid, padding }
}

/// Clones one student layer per grid. Layer `i` trains on the stream
/// `cfg.seed + i`; all layers draw their initialization from `init_seed`.
pub fn clone_stack(
    kind: StudentKind,
    blocks: usize,
    grids: &[usize],
    teacher: TeacherKind,
    padding: PaddingMode,
    cfg: &CloneConfig,
    init_seed: u64,
) -> Result<(ClonedStack, Vec<CloneReport>)> {
    let mut rng = SeededRng::new(init_seed);
    let mut layers = Vec::new();
    let mut meta = Vec::new();
    let mut reports = Vec::new();
    for (i, &grid) in grids.iter().enumerate() {
        let spec = stack_teacher(teacher, i, grid, padding);
        let mut layer = kind.build::<f32>(grid, blocks, &mut rng)?;
        let layer_cfg = CloneConfig {
            seed: cfg.seed.wrapping_add(i as u64),
            ..cfg.clone()
        };
        reports.push(clone_until_converged(&mut layer, &spec, &layer_cfg)?);
        layers.push(layer);
        meta.push(LayerMeta {
            grid,
            blocks,
            combiner: kind.combiner(),
            teacher: spec.kind,
            padding,
        });
    }
    Ok((ClonedStack { kind, layers, meta }, reports))
}

/// Which layer a [`LayerProbe`] evaluates.
#[derive(Debug, Clone, Copy)]
pub enum ProbeTarget<'a, T: Scalar> {
    Teacher,
    Student(&'a StudentLayer<T>),
}

/// Equivariance probe for a teacher-shaped layer; every sample gets a fresh
/// single-channel kernel.
pub struct LayerProbe<'a, T: Scalar> {
    pub target: ProbeTarget<'a, T>,
    pub teacher: TeacherSpec,
    tau: Tensor<T>,
}

impl<'a, T: Scalar> LayerProbe<'a, T> {
    pub fn new(target: ProbeTarget<'a, T>, teacher: TeacherSpec) -> Self {
        let mut shape = vec![1];
        shape.extend(teacher.kernel_shape());
        Self {
            target,
            teacher,
            tau: Tensor::zeros(shape),
        }
    }

    fn spatial_shape(&self, lifted: bool) -> Vec<usize> {
        let g = self.teacher.grid;
        if lifted {
            vec![1, 4, g, g]
        } else {
            vec![1, g, g]
        }
    }
}

impl<T: Scalar> EquivarianceProbe<T> for LayerProbe<'_, T> {
    fn input_shape(&self) -> Vec<usize> {
        self.spatial_shape(self.teacher.kind == TeacherKind::Groupconv)
    }

    fn input_geometry(&self) -> Geometry {
        match self.teacher.kind {
            TeacherKind::Groupconv => Geometry::Lifted,
            _ => Geometry::Planar,
        }
    }

    fn output_geometry(&self) -> Geometry {
        match self.teacher.kind {
            TeacherKind::Conv => Geometry::Planar,
            _ => Geometry::Lifted,
        }
    }

    fn padding(&self) -> PaddingMode {
        self.teacher.padding
    }

    fn reseed(&mut self, rng: &mut SeededRng) -> Result<()> {
        self.tau = sample_standard_normal(rng, self.tau.shape())?;
        Ok(())
    }

    fn eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let batch = x.shape()[0];
        let mut flat = vec![batch];
        flat.extend(self.teacher.input_shape());
        let x = x.clone().reshape(flat)?;
        let tiled = Tensor::stack(&vec![self.tau.slice_outer(0)?; batch])?;
        let y = match self.target {
            ProbeTarget::Teacher => self.teacher.forward(&x, &tiled)?,
            ProbeTarget::Student(s) => {
                let tape = Tape::new();
                let y = student_forward(s, &self.teacher, &tape, tape.constant(x), tape.constant(tiled))?;
                (*y.value()).clone()
            }
        };
        let mut out = vec![batch];
        out.extend(self.spatial_shape(self.teacher.kind != TeacherKind::Conv));
        y.reshape(out)
    }
}

/// Mean equivariance residual of a student under the teacher's group and border rule,
/// with a fixed probe seed so successive measurements are comparable.
pub fn student_equivariance<T: Scalar>(
    student: &StudentLayer<T>,
    teacher: &TeacherSpec,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    if samples == 0 {
        return Ok(0.0);
    }
    let mut probe = LayerProbe::new(ProbeTarget::Student(student), *teacher);
    Ok(equivariance_error(&mut probe, teacher.group(), samples, &mut SeededRng::new(seed))?.mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agnostic::{BlockMlpLayer, Combiner, Mlp2GcnnLayer, StudentKind};
    use crate::groups::{act_on_lifted, translate_image, C4Element, T2Element};
    use crate::oracle::{conv2d_naive, group_conv_naive, lifting_conv_naive};

    fn teacher(kind: TeacherKind, grid: usize, padding: PaddingMode) -> TeacherSpec {
        TeacherSpec { kind, grid, padding }
    }

    #[test]
    fn batches_are_deterministic_and_match_nested_loops() {
        for (kind, circular) in [(TeacherKind::Conv, true), (TeacherKind::Lifting, false), (TeacherKind::Groupconv, true)] {
            let padding = if circular { PaddingMode::Circular } else { PaddingMode::ZeroFill };
            let t = teacher(kind, 5, padding);
            let a = sample_clone_batch::<f64>(&mut SeededRng::new(1), &t, 3).unwrap();
            let b = sample_clone_batch::<f64>(&mut SeededRng::new(1), &t, 3).unwrap();
            assert_eq!(a, b);
            for i in 0..3 {
                let x = a.x.slice_outer(i).unwrap();
                let tau = a.tau.slice_outer(i).unwrap();
                let want = match kind {
                    TeacherKind::Conv => conv2d_naive(x.data(), 1, 5, 5, tau.data(), 1, circular),
                    TeacherKind::Lifting => lifting_conv_naive(x.data(), 5, 5, tau.data(), circular),
                    TeacherKind::Groupconv => group_conv_naive(x.data(), 5, 5, tau.data(), circular),
                };
                let got = a.y.slice_outer(i).unwrap();
                let err = got.data().iter().zip(&want).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
                assert!(err <= 1e-5);
            }
        }
    }

    #[test]
    fn zero_kernel_gives_zero_labels() {
        let t = teacher(TeacherKind::Conv, 4, PaddingMode::ZeroFill);
        let x = sample_standard_normal::<f32>(&mut SeededRng::new(2), &[1, 1, 16]).unwrap();
        let y = t.forward(&x, &Tensor::zeros(vec![1, 1, 1, 9])).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn circular_labels_are_equivariant() {
        let t = teacher(TeacherKind::Conv, 6, PaddingMode::Circular);
        let batch = sample_clone_batch::<f64>(&mut SeededRng::new(3), &t, 4).unwrap();
        let g = T2Element::new(2, -1);
        let img = |v: &Tensor<f64>| v.clone().reshape(vec![4, 1, 6, 6]).unwrap();
        let gx = translate_image(&img(&batch.x), g, PaddingMode::Circular).unwrap();
        let ygx = t.forward(&gx.reshape(vec![4, 1, 36]).unwrap(), &batch.tau).unwrap();
        let gy = translate_image(&img(&batch.y), g, PaddingMode::Circular).unwrap();
        assert!(img(&ygx).max_abs_diff(&gy).unwrap() <= 1e-5);

        let t = teacher(TeacherKind::Lifting, 6, PaddingMode::Circular);
        let batch = sample_clone_batch::<f64>(&mut SeededRng::new(4), &t, 2).unwrap();
        let r = C4Element::new(3);
        let gx = crate::groups::rotate90_image(&batch.x.clone().reshape(vec![2, 1, 6, 6]).unwrap(), r).unwrap();
        let ygx = t.forward(&gx.reshape(vec![2, 1, 36]).unwrap(), &batch.tau).unwrap();
        let gy = act_on_lifted(&batch.y.clone().reshape(vec![2, 1, 4, 6, 6]).unwrap(), r).unwrap();
        assert!(ygx.reshape(vec![2, 1, 4, 6, 6]).unwrap().max_abs_diff(&gy).unwrap() <= 1e-5);
    }

    #[test]
    fn oracle_student_has_zero_loss_and_stays_there() {
        let t = teacher(TeacherKind::Conv, 5, PaddingMode::ZeroFill);
        let mut s = StudentLayer::Planar(BlockMlpLayer::<f32>::oracle("s", 5, PaddingMode::ZeroFill).unwrap());
        let mut opt = Optimizer::new(OptimizerConfig::adam(1e-3)).unwrap();
        let mut rng = SeededRng::new(5);
        for _ in 0..5 {
            let b = sample_clone_batch(&mut rng, &t, 8).unwrap();
            assert!(clone_step(&mut s, &t, &b, &mut opt, 0).unwrap() <= 1e-8);
        }
    }

    #[test]
    fn self_cloning_converges_at_step_zero() {
        for (kind, student) in [
            (TeacherKind::Conv, StudentLayer::Planar(BlockMlpLayer::<f32>::oracle("s", 6, PaddingMode::Circular).unwrap())),
            (TeacherKind::Lifting, StudentLayer::C4(Mlp2GcnnLayer::oracle("s", 6, PaddingMode::Circular).unwrap())),
            (TeacherKind::Groupconv, StudentLayer::C4(Mlp2GcnnLayer::oracle("s", 6, PaddingMode::Circular).unwrap())),
        ] {
            let mut student = student;
            let r = clone_until_converged(&mut student, &teacher(kind, 6, PaddingMode::Circular), &CloneConfig::default()).unwrap();
            assert!(r.converged && r.steps == 0, "{kind}");
            assert!(r.final_equiv_error <= 1e-5);
        }
    }

    #[test]
    fn zero_budget_reports_non_convergence() {
        let mut rng = SeededRng::new(6);
        let mut s = StudentKind::Blockmlp9.build::<f32>(4, 9, &mut rng).unwrap();
        let cfg = CloneConfig {
            max_steps: 0,
            ..CloneConfig::default()
        };
        let r = clone_until_converged(&mut s, &teacher(TeacherKind::Conv, 4, PaddingMode::ZeroFill), &cfg).unwrap();
        assert!(!r.converged);
        assert_eq!(r.steps, 0);
        assert_eq!(r.evaluations.len(), 1);
    }

    #[test]
    fn short_runs_are_deterministic_and_reduce_loss() {
        let t = teacher(TeacherKind::Conv, 4, PaddingMode::ZeroFill);
        let cfg = CloneConfig {
            max_steps: 300,
            eval_interval: 50,
            optimizer: OptimizerConfig::adam(1e-2),
            seed: 9,
            ..CloneConfig::default()
        };
        let run = || {
            let mut s = StudentKind::Blockmlp9.build::<f32>(4, 9, &mut SeededRng::new(7)).unwrap();
            clone_until_converged(&mut s, &t, &cfg).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.evaluations, b.evaluations);
        assert!(a.evaluations.last().unwrap().rel_mse < a.evaluations[0].rel_mse);
    }

    #[test]
    fn mismatched_student_and_teacher_are_rejected() {
        let mut rng = SeededRng::new(8);
        let mut s = StudentKind::Blockmlp9.build::<f32>(4, 9, &mut rng).unwrap();
        let r = clone_until_converged(&mut s, &teacher(TeacherKind::Lifting, 4, PaddingMode::ZeroFill), &CloneConfig::default());
        assert!(r.is_err());
        let mut s = BlockMlpLayer::<f32>::new("s", 5, 8, Combiner::EmbedProject, &mut rng).map(StudentLayer::Planar).unwrap();
        assert!(clone_until_converged(&mut s, &teacher(TeacherKind::Conv, 4, PaddingMode::ZeroFill), &CloneConfig::default()).is_err());
        let bad = CloneConfig {
            eps_rel: 0.0,
            ..CloneConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn cloning_leaves_the_teacher_alone_and_csv_has_header() {
        let t = teacher(TeacherKind::Conv, 4, PaddingMode::ZeroFill);
        let before = t;
        let mut s = StudentKind::Blockmlp9.build::<f32>(4, 9, &mut SeededRng::new(10)).unwrap();
        let cfg = CloneConfig {
            max_steps: 20,
            eval_interval: 10,
            ..CloneConfig::default()
        };
        let r = clone_until_converged(&mut s, &t, &cfg).unwrap();
        assert_eq!(t, before);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("loss.csv");
        r.write_loss_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("step,loss,rel_mse,equiv_error\n0,"));
        assert_eq!(text.lines().count(), 1 + r.evaluations.len());
    }
}

//! Benchmark tasks (translated / rotated MNIST, symmetric and symmetry-breaking
//! labels), model construction, and the freeze / unfreeze training loop with a
//! KL pull toward the cloned weight distribution.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::agnostic::{assemble_student_classifier, PlainMlp, TrainMode};
use crate::autodiff::{Tape, Var};
use crate::data::{deterministic_split, load_mnist_idx, ClonedStack, Dataset, TaskSection};
use crate::error::{Error, Result};
use crate::groups::{rotate90_image, translate_image, C4Element, GroupElement, PaddingMode, T2Element};
use crate::layers::{build_reference_classifier, Classifier, ClassifierSpec, Family};
use crate::optim::{apply_gradients, Optimizer, OptimizerConfig};
use crate::param::{ParamId, Parameter};
use crate::rng::SeededRng;
use crate::spatial::downsample_2x2;
use crate::tensor::{Scalar, Tensor};

/// Largest shift for translated digits: a quarter of 28 pixels.
pub const MAX_SHIFT: i64 = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BenchmarkTask {
    #[serde(rename = "t2-sym")]
    T2Sym,
    #[serde(rename = "t2-break")]
    T2Break,
    #[serde(rename = "c4-sym")]
    C4Sym,
    #[serde(rename = "c4-break")]
    C4Break,
}

impl BenchmarkTask {
    pub const ALL: [BenchmarkTask; 4] = [Self::T2Sym, Self::T2Break, Self::C4Sym, Self::C4Break];

    pub fn is_c4(self) -> bool {
        matches!(self, Self::C4Sym | Self::C4Break)
    }

    pub fn symmetry_breaking(self) -> bool {
        matches!(self, Self::T2Break | Self::C4Break)
    }

    pub fn classes(self) -> usize {
        if self.symmetry_breaking() {
            20
        } else {
            10
        }
    }

    /// Conv family whose symmetry matches the task.
    pub fn family(self) -> Family {
        if self.is_c4() {
            Family::Gcnn
        } else {
            Family::Cnn
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::T2Sym => "t2-sym",
            Self::T2Break => "t2-break",
            Self::C4Sym => "c4-sym",
            Self::C4Break => "c4-break",
        }
    }
}

impl fmt::Display for BenchmarkTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BenchmarkTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown task {s:?} (expected t2-sym, t2-break, c4-sym or c4-break)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BenchModel {
    Mlp,
    Cnn,
    Gcnn,
    ClonedFreeze,
    ClonedUnfreeze,
}

impl BenchModel {
    pub const ALL: [BenchModel; 5] = [Self::Mlp, Self::Cnn, Self::Gcnn, Self::ClonedFreeze, Self::ClonedUnfreeze];

    pub fn is_cloned(self) -> bool {
        matches!(self, Self::ClonedFreeze | Self::ClonedUnfreeze)
    }

    pub fn mode(self) -> TrainMode {
        if self == Self::ClonedFreeze {
            TrainMode::Freeze
        } else {
            TrainMode::Unfreeze
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Mlp => "mlp",
            Self::Cnn => "cnn",
            Self::Gcnn => "gcnn",
            Self::ClonedFreeze => "cloned-freeze",
            Self::ClonedUnfreeze => "cloned-unfreeze",
        }
    }
}

impl fmt::Display for BenchModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BenchModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown model {s:?} (expected mlp, cnn, gcnn, cloned-freeze or cloned-unfreeze)")))
    }
}

/// `y` for left shifts, `y + 10` otherwise (including `dx = 0`).
pub fn relabel_translation(y: usize, dx: i64) -> usize {
    if dx < 0 {
        y
    } else {
        y + 10
    }
}

/// `y` for zero or one quarter turn, `y + 10` for two or three.
pub fn relabel_rotation(y: usize, k: usize) -> usize {
    if k % 4 < 2 {
        y
    } else {
        y + 10
    }
}

fn transformed(ds: &Dataset, mut apply: impl FnMut(&Tensor<f32>) -> Result<(Tensor<f32>, GroupElement)>) -> Result<Dataset> {
    let mut images = Vec::with_capacity(ds.len());
    let mut elements = Vec::with_capacity(ds.len());
    for i in 0..ds.len() {
        let (img, g) = apply(&ds.image(i))?;
        images.push(img);
        elements.push(g);
    }
    Ok(Dataset {
        images: Tensor::stack(&images)?,
        labels: ds.labels.clone(),
        transforms: Some(elements),
    })
}

/// Shifts every 28x28 digit by `(dy, dx)` uniform in `[-7, 7]^2`, zero-filled.
pub fn make_translated_dataset(ds: &Dataset, rng: &mut SeededRng) -> Result<Dataset> {
    if ds.image_size() != (28, 28) {
        return Err(Error::invalid(format!("translated digits need 28x28 images, got {:?}", ds.image_size())));
    }
    transformed(ds, |img| {
        let dy = rng.int_range(-MAX_SHIFT, MAX_SHIFT);
        let dx = rng.int_range(-MAX_SHIFT, MAX_SHIFT);
        let g = T2Element::new(dy, dx);
        Ok((translate_image(img, g, PaddingMode::ZeroFill)?, GroupElement::T2(g)))
    })
}

/// Rotates every digit by a uniform number of clockwise quarter turns.
pub fn make_rotated_dataset(ds: &Dataset, rng: &mut SeededRng) -> Result<Dataset> {
    let (h, w) = ds.image_size();
    if h != w {
        return Err(Error::invalid(format!("rotated digits need square images, got {h}x{w}")));
    }
    transformed(ds, |img| {
        let g = C4Element::new(rng.below(4) as i64);
        Ok((rotate90_image(img, g)?, GroupElement::C4(g)))
    })
}

/// 2x2 average pooling of every image.
pub fn downsample_dataset(ds: &Dataset) -> Result<Dataset> {
    let (h, w) = ds.image_size();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(format!("cannot halve a {h}x{w} image")));
    }
    let plane = h * w;
    let data = ds.images.data().chunks_exact(plane).flat_map(|img| downsample_2x2(img, h, w)).collect();
    Ok(Dataset {
        images: Tensor::new(vec![ds.len(), h / 2, w / 2], data)?,
        labels: ds.labels.clone(),
        transforms: ds.transforms.clone(),
    })
}

/// Transforms raw 28x28 digits for `task`, relabels the symmetry-breaking
/// variants, and resizes to `grid` (28 or 14).
pub fn prepare_task(raw: &Dataset, task: BenchmarkTask, grid: usize, seed: u64) -> Result<Dataset> {
    let mut rng = SeededRng::new(seed);
    let mut ds = if task.is_c4() {
        make_rotated_dataset(raw, &mut rng)?
    } else {
        make_translated_dataset(raw, &mut rng)?
    };
    if task.symmetry_breaking() {
        let transforms = ds.transforms.as_ref().expect("set by the transform");
        for (y, g) in ds.labels.iter_mut().zip(transforms) {
            *y = match *g {
                GroupElement::T2(t) => relabel_translation(*y, t.dx),
                GroupElement::C4(r) => relabel_rotation(*y, r.k()),
            };
        }
    }
    match grid {
        28 => Ok(ds),
        14 => downsample_dataset(&ds),
        _ => Err(Error::invalid(format!("task grid must be 14 or 28, got {grid}"))),
    }
}

/// Loads the digits named by `t`, keeps a seeded subset of `t.limit` samples (all
/// when 0), prepares them for `task` and splits into train and test.
pub fn load_task_data(t: &TaskSection, task: BenchmarkTask, transform_seed: u64, split_seed: u64) -> Result<(Dataset, Dataset)> {
    let raw = load_mnist_idx(&t.data_dir.join(&t.images_file), &t.data_dir.join(&t.labels_file))?;
    let raw = if t.limit > 0 && t.limit < raw.len() {
        let order = SeededRng::new(split_seed).permutation(raw.len());
        raw.subset(&order[..t.limit])
    } else {
        raw
    };
    let ds = prepare_task(&raw, task, t.grid, transform_seed)?;
    let mut parts = deterministic_split(&ds, &[t.train_fraction, 1.0 - t.train_fraction], split_seed)?.into_iter();
    let train = parts.next().expect("two parts");
    let test = parts.next().expect("two parts");
    Ok((train, test))
}

/// Closed-form `KL(N(mu_t, var_t) || N(mu_0, var_0))`.
pub fn gaussian_kl(mu_t: f64, var_t: f64, mu_0: f64, var_0: f64) -> f64 {
    0.5 * (var_0 / var_t).ln() + (var_t + (mu_t - mu_0).powi(2)) / (2.0 * var_0) - 0.5
}

/// Per-parameter-tensor Gaussian moments of the weights at the start of training.
#[derive(Debug, Clone, PartialEq)]
pub struct KlReference {
    pub floor: f64,
    moments: HashMap<ParamId, (f64, f64)>,
}

fn moments<T: Scalar>(t: &Tensor<T>) -> (f64, f64) {
    let n = t.len() as f64;
    let mean = t.data().iter().map(|&v| Scalar::to_f64(v)).sum::<f64>() / n;
    let var = t.data().iter().map(|&v| (Scalar::to_f64(v) - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

impl KlReference {
    pub fn snapshot<T: Scalar>(params: &[&Parameter<T>], floor: f64) -> Self {
        let moments = params.iter().map(|p| (p.id(), moments(&p.value))).collect();
        Self { floor, moments }
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.moments.contains_key(&id)
    }

    pub fn is_empty(&self) -> bool {
        self.moments.is_empty()
    }

    /// Penalty value without a tape.
    pub fn value<T: Scalar>(&self, params: &[&Parameter<T>]) -> f64 {
        params
            .iter()
            .filter_map(|p| {
                let &(mu0, var0) = self.moments.get(&p.id())?;
                let (mu, var) = moments(&p.value);
                Some(gaussian_kl(mu, var.max(self.floor), mu0, var0.max(self.floor)))
            })
            .fold(0.0, |a, b| a + b)
    }
}

/// Sum over `params` present in `reference` of the KL between the Gaussian fitted
/// to each tensor now and at the snapshot. Variances are floored before use.
pub fn kl_weight_penalty<'t, T: Scalar>(
    tape: &'t Tape<T>,
    params: &[&Parameter<T>],
    reference: &KlReference,
) -> Result<Var<'t, T>> {
    let floor = reference.floor;
    let mut total = tape.constant(Tensor::scalar(T::zero()));
    for p in params {
        let Some(&(mu0, var0)) = reference.moments.get(&p.id()) else {
            continue;
        };
        let var0 = var0.max(floor);
        let theta = tape.param(p);
        let shape = theta.shape();
        let mu = theta.mean();
        let centered = theta.sub(mu.broadcast(&shape)?)?;
        let var = centered.mul(centered)?.mean();
        let var = var.add_scalar(-floor).relu().add_scalar(floor);
        let shift = mu.add_scalar(-mu0);
        // 0.5 ln var0 - 0.5 ln var + (var + shift^2) / (2 var0) - 0.5
        let quad = var.add(shift.mul(shift)?)?.scale(0.5 / var0);
        let kl = quad.sub(var.ln().scale(0.5))?.add_scalar(0.5 * var0.ln() - 0.5);
        total = total.add(kl)?;
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Weight of the KL pull on cloned parameters (unfreeze mode).
    pub kl_beta: f64,
    pub variance_floor: f64,
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 128,
            optimizer: OptimizerConfig::adam(5e-3),
            kl_beta: 1e-3,
            variance_floor: 1e-8,
            eval_batch: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| {
            Err(Error::Config {
                key: format!("train.{key}"),
                msg: msg.into(),
            })
        };
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if self.eval_batch == 0 {
            return bad("eval_batch", "must be at least 1");
        }
        if !(self.kl_beta >= 0.0) {
            return bad("kl_beta", "must be non-negative");
        }
        if !(self.variance_floor > 0.0) {
            return bad("variance_floor", "must be positive");
        }
        self.optimizer.validate().map_err(|e| Error::Config {
            key: "train.optimizer".into(),
            msg: e.to_string(),
        })
    }
}

/// One row of the accuracy CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    pub accuracy: f64,
    pub loss: f64,
    pub kl_penalty: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
    pub final_train_accuracy: f64,
    pub final_test_accuracy: f64,
}

impl TrainReport {
    /// Header `epoch,split,accuracy,loss,kl_penalty`.
    pub fn write_accuracy_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn batch_input(ds: &Dataset, idx: &[usize]) -> Tensor<f32> {
    let (h, w) = ds.image_size();
    let plane = h * w;
    let mut data = Vec::with_capacity(idx.len() * plane);
    for &i in idx {
        data.extend_from_slice(&ds.images.data()[i * plane..(i + 1) * plane]);
    }
    Tensor::new(vec![idx.len(), 1, h, w], data).expect("sized")
}

fn correct(logits: &Tensor<f32>, labels: &[usize]) -> usize {
    let classes = logits.shape()[1];
    logits
        .data()
        .chunks_exact(classes)
        .zip(labels)
        .filter(|(row, &y)| {
            let best = row.iter().enumerate().fold(0, |b, (j, v)| if *v > row[b] { j } else { b });
            best == y
        })
        .count()
}

/// Accuracy and mean cross-entropy over a whole dataset.
pub fn evaluate(model: &dyn Classifier<f32>, ds: &Dataset, batch: usize) -> Result<(f64, f64)> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    let (mut hits, mut loss) = (0, 0.0);
    for chunk in idx.chunks(batch.max(1)) {
        let tape = Tape::new();
        let logits = model.logits(&tape, tape.constant(batch_input(ds, chunk)))?;
        let labels: Vec<usize> = chunk.iter().map(|&i| ds.labels[i]).collect();
        hits += correct(&logits.value(), &labels);
        loss += f64::from(logits.cross_entropy(&labels)?.value().item()) * chunk.len() as f64;
    }
    let n = ds.len().max(1) as f64;
    Ok((hits as f64 / n, loss / n))
}

fn check_task_fit(model: &dyn Classifier<f32>, ds: &Dataset) -> Result<()> {
    let g = model.grid();
    if ds.image_size() != (g, g) {
        return Err(Error::invalid(format!("model expects {g}x{g} inputs, dataset has {:?}", ds.image_size())));
    }
    if let Some(y) = ds.labels.iter().find(|&&y| y >= model.classes()) {
        return Err(Error::invalid(format!("label {y} outside the model's {} classes", model.classes())));
    }
    Ok(())
}

fn kl_step(model: &mut dyn Classifier<f32>, reference: &KlReference, beta: f64) -> Result<()> {
    let tape = Tape::new();
    let grads = {
        let params: Vec<&Parameter<f32>> = model.parameters().into_iter().filter(|p| p.trainable).collect();
        let penalty = kl_weight_penalty(&tape, &params, reference)?;
        if !penalty.requires_grad() {
            return Ok(());
        }
        tape.backward(penalty)?
    };
    let beta = beta as f32;
    for p in model.parameters_mut() {
        if let Some(g) = grads.get(p) {
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(p.name.clone()));
            }
            let g = g.clone();
            p.value.data_mut().iter_mut().zip(g.data()).for_each(|(v, &d)| *v -= beta * d);
        }
    }
    Ok(())
}

/// Trains `model` on `train` for `cfg.epochs` epochs and evaluates on `test` after
/// each epoch. In unfreeze mode every optimizer step is followed by the decoupled
/// update `theta -= beta * grad KL` on the cloned parameters.
pub fn train_on_task(
    model: &mut dyn Classifier<f32>,
    train: &Dataset,
    test: &Dataset,
    mode: TrainMode,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainReport> {
    cfg.validate()?;
    check_task_fit(model, train)?;
    check_task_fit(model, test)?;
    model.set_mode(mode)?;
    let reference = {
        let ids = model.regularized_ids();
        let params: Vec<&Parameter<f32>> = model.parameters().into_iter().filter(|p| ids.contains(&p.id())).collect();
        KlReference::snapshot(&params, cfg.variance_floor)
    };
    let kl_active = cfg.kl_beta > 0.0 && mode == TrainMode::Unfreeze && !reference.is_empty();
    let mut optimizer = Optimizer::new(cfg.optimizer)?;
    let mut rng = SeededRng::new(seed);
    let mut records = Vec::new();
    let (mut train_acc, mut test_acc) = (0.0, 0.0);
    for epoch in 1..=cfg.epochs {
        let order = rng.permutation(train.len());
        let (mut hits, mut loss_sum) = (0, 0.0);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let tape = Tape::new();
            let grads = {
                let logits = model.logits(&tape, tape.constant(batch_input(train, chunk)))?;
                hits += correct(&logits.value(), &labels);
                let loss = logits.cross_entropy(&labels)?;
                let l = f64::from(loss.value().item());
                if !l.is_finite() {
                    return Err(Error::NonFiniteLoss { step, seed });
                }
                loss_sum += l * chunk.len() as f64;
                tape.backward(loss)?
            };
            apply_gradients(model, &grads, &mut optimizer)?;
            if kl_active {
                kl_step(model, &reference, cfg.kl_beta)?;
            }
        }
        let kl = reference.value(&model.parameters());
        train_acc = hits as f64 / train.len() as f64;
        records.push(EpochRecord {
            epoch,
            split: "train".into(),
            accuracy: train_acc,
            loss: loss_sum / train.len() as f64,
            kl_penalty: kl,
        });
        let (acc, loss) = evaluate(model, test, cfg.eval_batch)?;
        test_acc = acc;
        records.push(EpochRecord {
            epoch,
            split: "test".into(),
            accuracy: acc,
            loss,
            kl_penalty: kl,
        });
    }
    Ok(TrainReport {
        records,
        final_train_accuracy: train_acc,
        final_test_accuracy: test_acc,
    })
}

fn classifier_spec(family: Family, task: BenchmarkTask, t: &TaskSection) -> ClassifierSpec {
    ClassifierSpec {
        family,
        grid: t.grid,
        channels: t.channels.clone(),
        pool_between: t.pool_between,
        padding: t.padding,
        classes: task.classes(),
    }
}

/// Builds a fresh benchmark model; cloned models need the stack of cloned layers
/// whose symmetry matches the task.
pub fn build_bench_model(
    model: BenchModel,
    task: BenchmarkTask,
    t: &TaskSection,
    stack: Option<&ClonedStack>,
    rng: &mut SeededRng,
) -> Result<Box<dyn Classifier<f32>>> {
    Ok(match model {
        BenchModel::Mlp => Box::new(PlainMlp::new(t.grid, &t.mlp_hidden, task.classes(), rng)?),
        BenchModel::Cnn => Box::new(build_reference_classifier::<f32>(classifier_spec(Family::Cnn, task, t), rng)?),
        BenchModel::Gcnn => Box::new(build_reference_classifier::<f32>(classifier_spec(Family::Gcnn, task, t), rng)?),
        BenchModel::ClonedFreeze | BenchModel::ClonedUnfreeze => {
            let stack = stack.ok_or_else(|| Error::Config {
                key: "task.checkpoint".into(),
                msg: format!("{model} needs a cloned checkpoint"),
            })?;
            let family = stack.kind.family();
            if family != task.family() {
                return Err(Error::invalid(format!("a {} checkpoint does not fit the {task} task", stack.kind)));
            }
            Box::new(assemble_student_classifier(stack.layers.clone(), classifier_spec(family, task, t), rng)?)
        }
    })
}

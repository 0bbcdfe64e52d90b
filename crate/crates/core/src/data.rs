//! MNIST IDX ingestion, seeded splits, checkpoint files and run configuration.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use serde::{Deserialize, Serialize};

use crate::agnostic::{Combiner, StudentKind, StudentLayer};
use crate::cloning::{CloneConfig, TeacherKind};
use crate::downstream::{BenchModel, BenchmarkTask, TrainConfig};
use crate::error::{Error, Result};
use crate::groups::{GroupElement, PaddingMode};
use crate::param::Module;
use crate::rng::SeededRng;
use crate::tensor::{DType, Scalar, Tensor};

const IMAGE_MAGIC: u32 = 2051;
const LABEL_MAGIC: u32 = 2049;

/// Images `[n, H, W]` in `[0, 1]`, labels, and the transform applied to each sample
/// (if any).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub transforms: Option<Vec<GroupElement>>,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>) -> Result<Self> {
        if images.shape().len() != 3 || images.shape()[0] != labels.len() {
            return Err(Error::invalid(format!(
                "{} labels for images of shape {:?}",
                labels.len(),
                images.shape()
            )));
        }
        Ok(Self {
            images,
            labels,
            transforms: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(H, W)`.
    pub fn image_size(&self) -> (usize, usize) {
        (self.images.shape()[1], self.images.shape()[2])
    }

    pub fn image(&self, i: usize) -> Tensor<f32> {
        self.images.slice_outer(i).expect("index in range")
    }

    /// Samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let (h, w) = self.image_size();
        let plane = h * w;
        let mut data = Vec::with_capacity(indices.len() * plane);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * plane..(i + 1) * plane]);
        }
        Dataset {
            images: Tensor::new(vec![indices.len(), h, w], data).expect("sized"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            transforms: self.transforms.as_ref().map(|t| indices.iter().map(|&i| t[i]).collect()),
        }
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| format_err(path, format!("bad gzip stream: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| format_err(path, "truncated header"))
}

/// Parses an IDX image/label file pair (optionally gzip-compressed).
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img = read_maybe_gz(images_path)?;
    let magic = be_u32(&img, 0, images_path)?;
    if magic != IMAGE_MAGIC {
        return Err(format_err(images_path, format!("image file magic is {magic}, expected {IMAGE_MAGIC}")));
    }
    let n = be_u32(&img, 4, images_path)? as usize;
    let rows = be_u32(&img, 8, images_path)? as usize;
    let cols = be_u32(&img, 12, images_path)? as usize;
    let body = n * rows * cols;
    let pixels = img.get(16..16 + body).ok_or_else(|| {
        format_err(images_path, format!("truncated: header declares {n}x{rows}x{cols} pixels, file has {}", img.len().saturating_sub(16)))
    })?;

    let lab = read_maybe_gz(labels_path)?;
    let magic = be_u32(&lab, 0, labels_path)?;
    if magic != LABEL_MAGIC {
        return Err(format_err(labels_path, format!("label file magic is {magic}, expected {LABEL_MAGIC}")));
    }
    let n_labels = be_u32(&lab, 4, labels_path)? as usize;
    if n_labels != n {
        return Err(format_err(labels_path, format!("{n_labels} labels for {n} images")));
    }
    let labels = lab
        .get(8..8 + n)
        .ok_or_else(|| format_err(labels_path, format!("truncated: header declares {n} labels")))?;
    if let Some(bad) = labels.iter().find(|&&l| l > 9) {
        return Err(format_err(labels_path, format!("label {bad} outside 0..9")));
    }
    let images = Tensor::new(vec![n, rows, cols], pixels.iter().map(|&p| f32::from(p) / 255.0).collect())?;
    Dataset::new(images, labels.iter().map(|&l| l as usize).collect())
}

/// Seeded shuffle, then contiguous slices with sizes `round(cumulative fraction * n)`.
pub fn deterministic_split(dataset: &Dataset, fractions: &[f64], seed: u64) -> Result<Vec<Dataset>> {
    let total: f64 = fractions.iter().sum();
    if fractions.is_empty() || fractions.iter().any(|f| !(*f >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("split fractions {fractions:?} must be non-negative and sum to 1")));
    }
    let n = dataset.len();
    let order = SeededRng::new(seed).permutation(n);
    let mut out = Vec::with_capacity(fractions.len());
    let (mut start, mut cum) = (0, 0.0);
    for (i, f) in fractions.iter().enumerate() {
        cum += f;
        let end = if i + 1 == fractions.len() { n } else { ((cum * n as f64).round() as usize).min(n) };
        out.push(dataset.subset(&order[start..end]));
        start = end;
    }
    Ok(out)
}

pub const CHECKPOINT_FORMAT: &str = "symclone-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the data section.
    pub offset: usize,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub dtype: DType,
    pub seed: u64,
    /// Model-specific structure (layer list etc.).
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// Named tensors plus a manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Scalar = f32> {
    pub kind: String,
    pub seed: u64,
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor<T>>,
}

/// Layout: 8-byte little-endian manifest length, JSON manifest, raw little-endian
/// tensor buffers in manifest order.
pub fn save_checkpoint<T: Scalar>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    let mut entries = Vec::new();
    let mut body = Vec::new();
    for (name, t) in &ckpt.tensors {
        let offset = body.len();
        for &v in t.data() {
            v.write_le(&mut body);
        }
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            bytes: body.len() - offset,
        });
    }
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        kind: ckpt.kind.clone(),
        dtype: T::DTYPE,
        seed: ckpt.seed,
        meta: ckpt.meta.clone(),
        tensors: entries,
    };
    let header = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
    bytes.extend_from_slice(&header);
    bytes.extend_from_slice(&body);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads the manifest only.
pub fn read_manifest(path: &Path) -> Result<(Manifest, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let len = bytes
        .get(..8)
        .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")) as usize)
        .ok_or_else(|| Error::Checkpoint(format!("{}: file shorter than its header", path.display())))?;
    let header = bytes
        .get(8..8usize.saturating_add(len))
        .ok_or_else(|| Error::Checkpoint(format!("{}: manifest truncated", path.display())))?;
    let manifest: Manifest =
        serde_json::from_slice(header).map_err(|e| Error::Checkpoint(format!("{}: bad manifest: {e}", path.display())))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!("{}: not a checkpoint (format {:?})", path.display(), manifest.format)));
    }
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: version {} is not supported (expected {CHECKPOINT_VERSION})",
            path.display(),
            manifest.version
        )));
    }
    let body = bytes[8 + len..].to_vec();
    Ok((manifest, body))
}

/// Loads and validates every tensor; nothing is returned unless the whole file is
/// consistent.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let (manifest, body) = read_manifest(path)?;
    if manifest.dtype != T::DTYPE {
        return Err(Error::Checkpoint(format!("{}: stored dtype {:?}, requested {:?}", path.display(), manifest.dtype, T::DTYPE)));
    }
    let size = T::DTYPE.size_of();
    let mut spans: Vec<(usize, usize)> = Vec::new();
    let mut tensors = BTreeMap::new();
    for e in &manifest.tensors {
        let count: usize = e.shape.iter().product();
        let end = e.offset.checked_add(e.bytes).filter(|&end| end <= body.len());
        let Some(end) = end.filter(|_| e.bytes == count * size) else {
            return Err(Error::Checkpoint(format!(
                "{}: tensor {} ({:?}) does not fit the data section",
                path.display(),
                e.name,
                e.shape
            )));
        };
        spans.push((e.offset, end));
        let data = body[e.offset..end].chunks_exact(size).map(T::read_le).collect();
        tensors.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
    }
    spans.sort_unstable();
    if spans.windows(2).any(|w| w[1].0 < w[0].1) {
        return Err(Error::Checkpoint(format!("{}: overlapping tensor buffers", path.display())));
    }
    Ok(Checkpoint {
        kind: manifest.kind,
        seed: manifest.seed,
        meta: manifest.meta,
        tensors,
    })
}

/// Description of one stored student layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMeta {
    pub grid: usize,
    pub blocks: usize,
    pub combiner: Combiner,
    pub teacher: TeacherKind,
    pub padding: PaddingMode,
}

/// Cloned layers for successive classifier stages, ready to assemble.
#[derive(Debug, Clone)]
pub struct ClonedStack {
    pub kind: StudentKind,
    pub layers: Vec<StudentLayer<f32>>,
    pub meta: Vec<LayerMeta>,
}

impl ClonedStack {
    pub fn grids(&self) -> Vec<usize> {
        self.meta.iter().map(|m| m.grid).collect()
    }
}

pub fn save_stack(path: &Path, stack: &ClonedStack, seed: u64) -> Result<()> {
    let mut tensors = BTreeMap::new();
    for (i, layer) in stack.layers.iter().enumerate() {
        for p in layer.parameters() {
            tensors.insert(format!("layer{i}/{}", p.name), p.value.clone());
        }
    }
    let meta = serde_json::to_value(&stack.meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
    save_checkpoint(
        path,
        &Checkpoint {
            kind: stack.kind.as_str().into(),
            seed,
            meta,
            tensors,
        },
    )
}

/// Loads a stack; `expected` rejects checkpoints of another student kind.
pub fn load_stack(path: &Path, expected: Option<StudentKind>) -> Result<(ClonedStack, u64)> {
    let ckpt = load_checkpoint::<f32>(path)?;
    let kind: StudentKind = ckpt.kind.parse().map_err(|_| Error::Checkpoint(format!("unknown model kind {:?}", ckpt.kind)))?;
    if let Some(want) = expected {
        if want != kind {
            return Err(Error::KindMismatch {
                expected: want.to_string(),
                found: kind.to_string(),
            });
        }
    }
    let meta: Vec<LayerMeta> =
        serde_json::from_value(ckpt.meta.clone()).map_err(|e| Error::Checkpoint(format!("bad layer list: {e}")))?;
    let mut rng = SeededRng::new(0);
    let mut layers = Vec::with_capacity(meta.len());
    let mut used = 0;
    for (i, m) in meta.iter().enumerate() {
        if m.combiner != kind.combiner() {
            return Err(Error::Checkpoint(format!("layer {i} combiner {:?} contradicts kind {kind}", m.combiner)));
        }
        let mut layer = kind.build::<f32>(m.grid, m.blocks, &mut rng)?;
        for p in layer.parameters_mut() {
            let key = format!("layer{i}/{}", p.name);
            let t = ckpt.tensors.get(&key).ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
            p.set_value(t.clone()).map_err(|_| Error::Checkpoint(format!("tensor {key} has shape {:?}", t.shape())))?;
            used += 1;
        }
        layers.push(layer);
    }
    if used != ckpt.tensors.len() {
        return Err(Error::Checkpoint(format!("{} tensors in the file do not belong to the layer list", ckpt.tensors.len() - used)));
    }
    Ok((ClonedStack { kind, layers, meta }, ckpt.seed))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherSection {
    pub kind: TeacherKind,
    pub padding: PaddingMode,
}

impl Default for TeacherSection {
    fn default() -> Self {
        Self {
            kind: TeacherKind::Conv,
            padding: PaddingMode::ZeroFill,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudentSection {
    pub kind: StudentKind,
    /// Block count; must be 9 for the direct kinds.
    pub blocks: usize,
    /// One cloned layer per grid, in classifier order.
    pub grids: Vec<usize>,
}

impl Default for StudentSection {
    fn default() -> Self {
        Self {
            kind: StudentKind::Blockmlp9,
            blocks: 9,
            grids: vec![14, 7, 7],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSection {
    pub name: BenchmarkTask,
    pub model: BenchModel,
    /// Cloned stack for the cloned-* models.
    pub checkpoint: Option<PathBuf>,
    /// Directory holding the MNIST IDX files.
    pub data_dir: PathBuf,
    pub images_file: String,
    pub labels_file: String,
    /// Fraction of the loaded samples used for training; the rest is the test split.
    pub train_fraction: f64,
    /// Cap on the number of loaded samples (0 = all).
    pub limit: usize,
    /// Model input grid; digits are 2x2 average-pooled when 14.
    pub grid: usize,
    pub channels: Vec<usize>,
    pub mlp_hidden: Vec<usize>,
    /// 2x2 max pooling between conv stages (skipped on odd grids).
    pub pool_between: bool,
    pub padding: PaddingMode,
}

impl Default for TaskSection {
    fn default() -> Self {
        Self {
            name: BenchmarkTask::T2Sym,
            model: BenchModel::Cnn,
            checkpoint: None,
            data_dir: PathBuf::from("data/mnist-desk"),
            images_file: "images-idx3-ubyte.gz".into(),
            labels_file: "labels-idx1-ubyte.gz".into(),
            train_fraction: 0.8,
            limit: 0,
            grid: 14,
            channels: vec![16, 16, 16],
            mlp_hidden: vec![256, 256],
            pool_between: true,
            padding: PaddingMode::ZeroFill,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeedSection {
    /// Student initialization.
    pub init: u64,
    /// Cloning sample streams.
    pub clone: u64,
    /// Train/test split.
    pub split: u64,
    /// Dataset transforms.
    pub transform: u64,
    /// Downstream initialization and batch order.
    pub train: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
        }
    }
}

/// One run's full configuration. Every key has a default; unknown keys are errors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub teacher: TeacherSection,
    pub student: StudentSection,
    pub clone: CloneConfig,
    pub task: TaskSection,
    pub train: TrainConfig,
    pub seeds: SeedSection,
    pub output: OutputSection,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config {
            key: e.span().map_or_else(|| "<document>".into(), |s| key_at(text, s.start)),
            msg: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// The effective configuration with every default written out.
    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::Config { key: key.into(), msg });
        let s = &self.student;
        if s.grids.is_empty() || s.grids.contains(&0) {
            return bad("student.grids", format!("need at least one positive grid, got {:?}", s.grids));
        }
        if s.kind.combiner() == Combiner::Direct && s.blocks != 9 {
            return bad("student.blocks", format!("{} uses exactly 9 blocks, got {}", s.kind, s.blocks));
        }
        if s.blocks == 0 {
            return bad("student.blocks", "must be at least 1".into());
        }
        let teacher_fits = match self.teacher.kind {
            TeacherKind::Conv => !s.kind.is_c4(),
            TeacherKind::Lifting | TeacherKind::Groupconv => s.kind.is_c4(),
        };
        if !teacher_fits {
            return bad("teacher.kind", format!("a {} teacher cannot be cloned by a {} student", self.teacher.kind, s.kind));
        }
        self.clone.validate()?;
        let t = &self.task;
        if !(t.train_fraction > 0.0 && t.train_fraction < 1.0) {
            return bad("task.train_fraction", format!("must lie strictly between 0 and 1, got {}", t.train_fraction));
        }
        if t.grid != 14 && t.grid != 28 {
            return bad("task.grid", format!("must be 14 or 28, got {}", t.grid));
        }
        if t.channels.is_empty() || t.channels.contains(&0) {
            return bad("task.channels", format!("invalid channel list {:?}", t.channels));
        }
        self.train.validate()
    }
}

/// Best-effort dotted key of the table entry containing byte `pos`.
fn key_at(text: &str, pos: usize) -> String {
    let mut table = String::new();
    let mut key = String::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim();
        if trimmed.starts_with('[') {
            table = trimmed.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            key.clear();
        } else if let Some((k, _)) = trimmed.split_once('=') {
            key = k.trim().to_string();
        }
        offset += line.len();
        if offset > pos {
            break;
        }
    }
    match (table.is_empty(), key.is_empty()) {
        (true, _) => key,
        (false, true) => table,
        (false, false) => format!("{table}.{key}"),
    }
}

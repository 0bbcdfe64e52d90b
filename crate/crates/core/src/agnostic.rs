//! Group-agnostic students: block-MLP layers that learn the selector structure of a
//! convolution, their four-orientation stack for C4, classifiers assembled from
//! cloned layers, and the plain MLP baseline.
//!
//! A block layer holds `B` dense `[N, N]` matrices stacked as one `[B * N, N]`
//! parameter. For input channels `x_c` and kernel rows `tau[o, c]` it computes
//! `y_o = sum_c sum_b coef(tau[o, c])_b * M_b x_c`, where `coef` is the identity
//! (direct, B = 9) or a small embed-project network (approximate variants).

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::groups::PaddingMode;
use crate::layers::{classifier_tail, kernel_init, max_pool_2x2, Classifier, ClassifierSpec, Family, Linear};
use crate::metrics::toeplitz_unroll;
use crate::param::{Module, ParamId, Parameter};
use crate::rng::{sample_normal, SeededRng};
use crate::spatial::{self, TAPS};
use crate::tensor::{Scalar, Tensor};

/// Hidden width of the embed-project combiner.
pub const EMBED_HIDDEN: usize = 32;

/// How kernel entries become block coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combiner {
    Direct,
    EmbedProject,
}

/// Student architecture named in configs and checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudentKind {
    Blockmlp9,
    BlockmlpApprox,
    Mlp2gcnn,
    Mlp2gcnnApprox,
}

impl StudentKind {
    pub fn combiner(self) -> Combiner {
        match self {
            Self::Blockmlp9 | Self::Mlp2gcnn => Combiner::Direct,
            Self::BlockmlpApprox | Self::Mlp2gcnnApprox => Combiner::EmbedProject,
        }
    }

    pub fn is_c4(self) -> bool {
        matches!(self, Self::Mlp2gcnn | Self::Mlp2gcnnApprox)
    }

    pub fn family(self) -> Family {
        if self.is_c4() {
            Family::Gcnn
        } else {
            Family::Cnn
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Blockmlp9 => "blockmlp9",
            Self::BlockmlpApprox => "blockmlp_approx",
            Self::Mlp2gcnn => "mlp2gcnn",
            Self::Mlp2gcnnApprox => "mlp2gcnn_approx",
        }
    }

    /// Randomly initialized student layer on a `grid x grid` input.
    pub fn build<T: Scalar>(self, grid: usize, blocks: usize, rng: &mut SeededRng) -> Result<StudentLayer<T>> {
        let combiner = self.combiner();
        Ok(if self.is_c4() {
            StudentLayer::C4(Mlp2GcnnLayer::new("mlp2gcnn", grid, blocks, combiner, rng)?)
        } else {
            StudentLayer::Planar(BlockMlpLayer::new("blockmlp", grid, blocks, combiner, rng)?)
        })
    }
}

impl fmt::Display for StudentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for StudentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "blockmlp9" => Self::Blockmlp9,
            "blockmlp_approx" => Self::BlockmlpApprox,
            "mlp2gcnn" => Self::Mlp2gcnn,
            "mlp2gcnn_approx" => Self::Mlp2gcnnApprox,
            _ => {
                return Err(Error::invalid(format!(
                    "unknown student kind {s:?} (expected blockmlp9, blockmlp_approx, mlp2gcnn or mlp2gcnn_approx)"
                )))
            }
        })
    }
}

/// Kernel rows `[.., 9]` -> block coefficients `[.., B]`.
#[derive(Debug, Clone)]
pub struct EmbedProject<T: Scalar = f32> {
    pub embed: Linear<T>,
    pub project: Linear<T>,
}

#[derive(Debug, Clone)]
pub struct BlockMlpLayer<T: Scalar = f32> {
    grid: usize,
    num_blocks: usize,
    /// `[B * N, N]`; rows `b * N .. (b + 1) * N` hold `M_b`.
    pub blocks: Parameter<T>,
    pub embedder: Option<EmbedProject<T>>,
}

impl<T: Scalar> BlockMlpLayer<T> {
    pub fn new(name: &str, grid: usize, num_blocks: usize, combiner: Combiner, rng: &mut SeededRng) -> Result<Self> {
        if grid == 0 || num_blocks == 0 {
            return Err(Error::invalid(format!("block layer needs grid and block count >= 1, got {grid}, {num_blocks}")));
        }
        if combiner == Combiner::Direct && num_blocks != TAPS {
            return Err(Error::invalid(format!(
                "direct combiner uses one block per kernel entry (9), got {num_blocks} blocks"
            )));
        }
        let n = grid * grid;
        // output variance of a random layer then roughly matches a 3x3 conv teacher
        let blocks = Parameter::new(
            format!("{name}.blocks"),
            sample_normal(rng, &[num_blocks * n, n], 1.0 / (n as f64).sqrt())?,
        );
        let embedder = match combiner {
            Combiner::Direct => None,
            Combiner::EmbedProject => Some(EmbedProject {
                embed: Linear::new(&format!("{name}.embed"), TAPS, EMBED_HIDDEN, 2.0, rng)?,
                project: Linear::new(&format!("{name}.project"), EMBED_HIDDEN, num_blocks, 1.0, rng)?,
            }),
        };
        Ok(Self {
            grid,
            num_blocks,
            blocks,
            embedder,
        })
    }

    /// Direct layer with `M_b = selectors[b]` (each `[N, N]`).
    pub fn from_selectors(name: &str, grid: usize, selectors: &[Tensor<T>]) -> Result<Self> {
        let n = grid * grid;
        if selectors.len() != TAPS || selectors.iter().any(|s| s.shape() != [n, n]) {
            return Err(Error::invalid(format!("need 9 selector matrices of shape [{n}, {n}]")));
        }
        let data: Vec<T> = selectors.iter().flat_map(|s| s.data().iter().copied()).collect();
        Ok(Self {
            grid,
            num_blocks: TAPS,
            blocks: Parameter::new(format!("{name}.blocks"), Tensor::new(vec![TAPS * n, n], data)?),
            embedder: None,
        })
    }

    /// Direct layer that reproduces the convolution exactly.
    pub fn oracle(name: &str, grid: usize, padding: PaddingMode) -> Result<Self> {
        let oracle = toeplitz_unroll(grid, grid, padding)?;
        Self::from_selectors(name, grid, &oracle.selectors::<T>())
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    /// Flattened input size `N = grid^2`.
    pub fn n(&self) -> usize {
        self.grid * self.grid
    }

    pub fn num_blocks(&self) -> usize {
        self.num_blocks
    }

    pub fn combiner(&self) -> Combiner {
        if self.embedder.is_some() {
            Combiner::EmbedProject
        } else {
            Combiner::Direct
        }
    }

    /// `M_b` as an `[N, N]` tensor.
    pub fn block(&self, b: usize) -> Tensor<T> {
        let n = self.n();
        Tensor::new(vec![n, n], self.blocks.value.data()[b * n * n..(b + 1) * n * n].to_vec()).expect("block slice")
    }

    /// Kernel rows `[R, 9]` -> coefficients `[R, B]`.
    pub fn coefficients<'t>(&self, tape: &'t Tape<T>, rows: Var<'t, T>) -> Result<Var<'t, T>> {
        match &self.embedder {
            None => Ok(rows),
            Some(e) => {
                let h = e.embed.forward(tape, rows)?.relu();
                e.project.forward(tape, h)
            }
        }
    }

    /// `x [batch, C, N]` -> `[batch, C * B, N]` with row `c * B + b` holding `M_b x_c`.
    pub fn expand<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = x.shape();
        let n = self.n();
        if s.len() != 3 || s[2] != n {
            return Err(Error::shape("block layer input", &s, &[n, n]));
        }
        let z = x.reshape(&[s[0] * s[1], n])?.matmul_nt(tape.param(&self.blocks))?;
        z.reshape(&[s[0], s[1] * self.num_blocks, n])
    }

    /// `x [batch, C, N]` with kernels `tau [O, C, 9]` (shared) or `[batch, O, C, 9]`
    /// (per sample) -> `[batch, O, N]`.
    pub fn apply<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>, tau: Var<'t, T>) -> Result<Var<'t, T>> {
        let xs = x.shape();
        let ts = tau.shape();
        let b = self.num_blocks;
        let coef = match *ts.as_slice() {
            [o, c, TAPS] if xs.len() == 3 && c == xs[1] => {
                self.coefficients(tape, tau.reshape(&[o * c, TAPS])?)?.reshape(&[o, c * b])?
            }
            [batch, o, c, TAPS] if xs.len() == 3 && batch == xs[0] && c == xs[1] => self
                .coefficients(tape, tau.reshape(&[batch * o * c, TAPS])?)?
                .reshape(&[batch, o, c * b])?,
            _ => return Err(Error::shape("block layer kernel", &xs, &ts)),
        };
        coef.bmm(self.expand(tape, x)?)
    }

    /// Single-sample forward `x [N]`, `tau [9]` -> `[N]`.
    pub fn forward_tensor(&self, x: &Tensor<T>, tau: &Tensor<T>) -> Result<Tensor<T>> {
        let n = self.n();
        if x.len() != n || tau.len() != TAPS {
            return Err(Error::shape("block layer", x.shape(), tau.shape()));
        }
        let tape = Tape::new();
        let xv = tape.constant(x.clone().reshape(vec![1, 1, n])?);
        let tv = tape.constant(tau.clone().reshape(vec![1, 1, TAPS])?);
        let y = self.apply(&tape, xv, tv)?.value();
        (*y).clone().reshape(vec![n])
    }
}

impl<T: Scalar> Module<T> for BlockMlpLayer<T> {
    fn parameters(&self) -> Vec<&Parameter<T>> {
        let mut ps = vec![&self.blocks];
        if let Some(e) = &self.embedder {
            ps.extend(e.embed.parameters());
            ps.extend(e.project.parameters());
        }
        ps
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut ps = vec![&mut self.blocks];
        if let Some(e) = &mut self.embedder {
            ps.extend(e.embed.parameters_mut());
            ps.extend(e.project.parameters_mut());
        }
        ps
    }
}

/// Four block layers, subunit `s` standing in for the filter turned by `s` quarter
/// turns. The lifting forward feeds every subunit the same kernel; the group
/// forward reuses the subunits with orientation-shifted kernels.
#[derive(Debug, Clone)]
pub struct Mlp2GcnnLayer<T: Scalar = f32> {
    pub subunits: Vec<BlockMlpLayer<T>>,
}

impl<T: Scalar> Mlp2GcnnLayer<T> {
    pub fn new(name: &str, grid: usize, num_blocks: usize, combiner: Combiner, rng: &mut SeededRng) -> Result<Self> {
        let subunits = (0..4)
            .map(|s| BlockMlpLayer::new(&format!("{name}.{s}"), grid, num_blocks, combiner, rng))
            .collect::<Result<_>>()?;
        Ok(Self { subunits })
    }

    /// Subunit `s` preloaded with the selectors of the `s`-times rotated kernel, so the
    /// lifting forward equals the lifting convolution exactly.
    pub fn oracle(name: &str, grid: usize, padding: PaddingMode) -> Result<Self> {
        let p = toeplitz_unroll(grid, grid, padding)?.selectors::<T>();
        let subunits = (0..4)
            .map(|s| {
                let rot = spatial::kernel_rotation(s);
                // conv with tau[rot[k]] at tap k: block b collects the taps k with rot[k] == b
                let sel: Vec<Tensor<T>> = (0..TAPS)
                    .map(|b| p[rot.iter().position(|&r| r == b).expect("permutation")].clone())
                    .collect();
                BlockMlpLayer::from_selectors(&format!("{name}.{s}"), grid, &sel)
            })
            .collect::<Result<_>>()?;
        Ok(Self { subunits })
    }

    pub fn grid(&self) -> usize {
        self.subunits[0].grid()
    }

    pub fn n(&self) -> usize {
        self.subunits[0].n()
    }

    pub fn num_blocks(&self) -> usize {
        self.subunits[0].num_blocks()
    }

    pub fn combiner(&self) -> Combiner {
        self.subunits[0].combiner()
    }

    /// `x [batch, C, N]`, `tau [O, C, 9]` or `[batch, O, C, 9]` -> `[batch, O, 4, N]`.
    pub fn lifting<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>, tau: Var<'t, T>) -> Result<Var<'t, T>> {
        let parts = self
            .subunits
            .iter()
            .map(|u| {
                let y = u.apply(tape, x, tau)?;
                let s = y.shape();
                y.reshape(&[s[0], s[1], 1, s[2]])
            })
            .collect::<Result<Vec<_>>>()?;
        Var::concat(&parts, 2)
    }

    /// `f [batch, C, 4, N]`, `psi [O, C, 4, 9]` or `[batch, O, C, 4, 9]` ->
    /// `[batch, O, 4, N]`.
    pub fn group<'t>(&self, tape: &'t Tape<T>, f: Var<'t, T>, psi: Var<'t, T>) -> Result<Var<'t, T>> {
        let fs = f.shape();
        let ps = psi.shape();
        let n = self.n();
        let &[batch, c, 4, fn_] = fs.as_slice() else {
            return Err(Error::invalid(format!("group forward expects [batch, C, 4, N], got {fs:?}")));
        };
        if fn_ != n {
            return Err(Error::shape("group forward", &fs, &[n]));
        }
        let (per_sample, o) = match *ps.as_slice() {
            [o, c2, 4, TAPS] if c2 == c => (false, o),
            [b2, o, c2, 4, TAPS] if b2 == batch && c2 == c => (true, o),
            _ => return Err(Error::shape("group forward kernel", &fs, &ps)),
        };
        let rows = if per_sample { batch * o * c * 4 } else { o * c * 4 };
        let flat_f = f.reshape(&[batch, c * 4, n])?;
        let nb = self.num_blocks();
        let mut parts = Vec::with_capacity(4);
        for (s, unit) in self.subunits.iter().enumerate() {
            let coef = unit.coefficients(tape, psi.reshape(&[rows, TAPS])?)?;
            let shift = spatial::orientation_shift(o, c, nb, s);
            let coef = if per_sample {
                coef.reshape(&[batch, o * c * 4 * nb])?.gather(&shift, 1)?
            } else {
                coef.reshape(&[o * c * 4 * nb])?.gather(&shift, 0)?
            };
            let y = coef.bmm(unit.expand(tape, flat_f)?)?;
            parts.push(y.reshape(&[batch, o, 1, n])?);
        }
        Var::concat(&parts, 2)
    }
}

impl<T: Scalar> Module<T> for Mlp2GcnnLayer<T> {
    fn parameters(&self) -> Vec<&Parameter<T>> {
        self.subunits.iter().flat_map(|u| u.parameters()).collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        self.subunits.iter_mut().flat_map(|u| u.parameters_mut()).collect()
    }
}

/// One cloned layer of either kind.
#[derive(Debug, Clone)]
pub enum StudentLayer<T: Scalar = f32> {
    Planar(BlockMlpLayer<T>),
    C4(Mlp2GcnnLayer<T>),
}

impl<T: Scalar> StudentLayer<T> {
    pub fn kind(&self) -> StudentKind {
        match (self, self.combiner()) {
            (Self::Planar(_), Combiner::Direct) => StudentKind::Blockmlp9,
            (Self::Planar(_), Combiner::EmbedProject) => StudentKind::BlockmlpApprox,
            (Self::C4(_), Combiner::Direct) => StudentKind::Mlp2gcnn,
            (Self::C4(_), Combiner::EmbedProject) => StudentKind::Mlp2gcnnApprox,
        }
    }

    pub fn grid(&self) -> usize {
        match self {
            Self::Planar(l) => l.grid(),
            Self::C4(l) => l.grid(),
        }
    }

    pub fn num_blocks(&self) -> usize {
        match self {
            Self::Planar(l) => l.num_blocks(),
            Self::C4(l) => l.num_blocks(),
        }
    }

    pub fn combiner(&self) -> Combiner {
        match self {
            Self::Planar(l) => l.combiner(),
            Self::C4(l) => l.combiner(),
        }
    }

    /// The direct 9-block layer whose blocks are compared against the Toeplitz
    /// selectors (subunit 0 for the C4 stack).
    pub fn toeplitz_view(&self) -> &BlockMlpLayer<T> {
        match self {
            Self::Planar(l) => l,
            Self::C4(l) => &l.subunits[0],
        }
    }
}

impl<T: Scalar> Module<T> for StudentLayer<T> {
    fn parameters(&self) -> Vec<&Parameter<T>> {
        match self {
            Self::Planar(l) => l.parameters(),
            Self::C4(l) => l.parameters(),
        }
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        match self {
            Self::Planar(l) => l.parameters_mut(),
            Self::C4(l) => l.parameters_mut(),
        }
    }
}

/// Which weights a downstream run may change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Cloned blocks and combiners fixed; kernels, biases and head train.
    Freeze,
    /// Everything trains.
    Unfreeze,
}

/// Classifier whose feature extractor is a stack of cloned layers driven by
/// trainable kernels `tau`.
#[derive(Debug, Clone)]
pub struct StudentClassifier<T: Scalar = f32> {
    pub spec: ClassifierSpec,
    pub layers: Vec<StudentLayer<T>>,
    /// Per layer: `[O, C, 9]` for planar layers and the lifting layer, `[O, C, 4, 9]`
    /// for later C4 layers.
    pub kernels: Vec<Parameter<T>>,
    pub biases: Vec<Parameter<T>>,
    pub head: Linear<T>,
}

/// Stacks cloned layers into a classifier described by `spec` (channels, pooling,
/// head); layer `i` must be cloned on the grid that layer `i` of `spec` sees.
pub fn assemble_student_classifier<T: Scalar>(
    layers: Vec<StudentLayer<T>>,
    spec: ClassifierSpec,
    rng: &mut SeededRng,
) -> Result<StudentClassifier<T>> {
    spec.validate()?;
    if layers.len() != spec.channels.len() {
        return Err(Error::invalid(format!(
            "classifier has {} layers but {} cloned layers were given",
            spec.channels.len(),
            layers.len()
        )));
    }
    for (i, (layer, grid)) in layers.iter().zip(spec.grids()).enumerate() {
        if layer.grid() != grid {
            return Err(Error::invalid(format!(
                "layer {i} sees a {grid}x{grid} grid but was cloned on {0}x{0}",
                layer.grid()
            )));
        }
        if layer.kind().family() != spec.family {
            return Err(Error::invalid(format!("layer {i} ({}) does not fit a {:?} stack", layer.kind(), spec.family)));
        }
    }
    let mut kernels = Vec::new();
    let mut biases = Vec::new();
    for (i, &o) in spec.channels.iter().enumerate() {
        let c = spec.in_channels(i);
        let shape = match (spec.family, i) {
            (Family::Gcnn, i) if i > 0 => vec![o, c, 4, TAPS],
            _ => vec![o, c, TAPS],
        };
        kernels.push(Parameter::new(format!("tau{i}"), kernel_init(&shape, rng)?));
        biases.push(Parameter::new(format!("bias{i}"), Tensor::zeros(vec![o])));
    }
    let head = Linear::new("head", *spec.channels.last().expect("validated"), spec.classes, 1.0, rng)?;
    Ok(StudentClassifier {
        spec,
        layers,
        kernels,
        biases,
        head,
    })
}

impl<T: Scalar> StudentClassifier<T> {
    pub fn set_mode(&mut self, mode: TrainMode) {
        let cloned = mode == TrainMode::Unfreeze;
        for l in &mut self.layers {
            l.set_trainable(cloned);
        }
        for p in self.kernels.iter_mut().chain(&mut self.biases) {
            p.trainable = true;
        }
        self.head.set_trainable(true);
    }

    /// Weights that came from cloning (blocks and combiner networks).
    pub fn cloned_parameters(&self) -> Vec<&Parameter<T>> {
        self.layers.iter().flat_map(|l| l.parameters()).collect()
    }

    /// Feature maps before the classifier tail: `[batch, C, h, w]` or
    /// `[batch, C, 4, h, w]`.
    pub fn features<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let xs = x.shape();
        let g = self.spec.grid;
        if xs.len() != 4 || xs[1] != 1 || xs[2] != g || xs[3] != g {
            return Err(Error::shape("student classifier input", &xs, &[1, g, g]));
        }
        let batch = xs[0];
        let mut h = x;
        let grids = self.spec.grids();
        let n_layers = self.layers.len();
        for i in 0..n_layers {
            let (grid, o, c) = (grids[i], self.spec.channels[i], self.spec.in_channels(i));
            let n = grid * grid;
            let tau = tape.param(&self.kernels[i]);
            let bias = tape.param(&self.biases[i]);
            h = match &self.layers[i] {
                StudentLayer::Planar(l) => {
                    let y = l.apply(tape, h.reshape(&[batch, c, n])?, tau)?.add_bias(bias, 1)?;
                    y.relu().reshape(&[batch, o, grid, grid])?
                }
                StudentLayer::C4(l) => {
                    let y = if i == 0 {
                        l.lifting(tape, h.reshape(&[batch, c, n])?, tau)?
                    } else {
                        l.group(tape, h.reshape(&[batch, c, 4, n])?, tau)?
                    };
                    let y = y.reshape(&[batch, o, 4 * n])?.add_bias(bias, 1)?;
                    y.relu().reshape(&[batch, o, 4, grid, grid])?
                }
            };
            if self.spec.pools_after(i) {
                h = max_pool_2x2(h)?;
            }
        }
        Ok(h)
    }
}

impl<T: Scalar> Module<T> for StudentClassifier<T> {
    fn parameters(&self) -> Vec<&Parameter<T>> {
        let mut ps: Vec<&Parameter<T>> = self.layers.iter().flat_map(|l| l.parameters()).collect();
        ps.extend(self.kernels.iter().chain(&self.biases));
        ps.extend(self.head.parameters());
        ps
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut ps: Vec<&mut Parameter<T>> = self.layers.iter_mut().flat_map(|l| l.parameters_mut()).collect();
        ps.extend(self.kernels.iter_mut().chain(self.biases.iter_mut()));
        ps.extend(self.head.parameters_mut());
        ps
    }
}

impl<T: Scalar> Classifier<T> for StudentClassifier<T> {
    fn logits<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let f = self.features(tape, x)?;
        classifier_tail(tape, f, self.spec.family, &self.head)
    }

    fn classes(&self) -> usize {
        self.spec.classes
    }

    fn grid(&self) -> usize {
        self.spec.grid
    }

    fn set_mode(&mut self, mode: TrainMode) -> Result<()> {
        StudentClassifier::set_mode(self, mode);
        Ok(())
    }

    fn regularized_ids(&self) -> Vec<ParamId> {
        self.cloned_parameters().iter().map(|p| p.id()).collect()
    }
}

/// Fully connected baseline on flattened images.
#[derive(Debug, Clone)]
pub struct PlainMlp<T: Scalar = f32> {
    grid: usize,
    pub layers: Vec<Linear<T>>,
}

impl<T: Scalar> PlainMlp<T> {
    /// `grid^2 -> hidden[0] -> ... -> classes`, ReLU between layers.
    pub fn new(grid: usize, hidden: &[usize], classes: usize, rng: &mut SeededRng) -> Result<Self> {
        if grid == 0 || classes < 2 || hidden.contains(&0) {
            return Err(Error::invalid(format!("invalid MLP: grid {grid}, hidden {hidden:?}, classes {classes}")));
        }
        let mut sizes = vec![grid * grid];
        sizes.extend_from_slice(hidden);
        sizes.push(classes);
        let last = sizes.len() - 2;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&format!("fc{i}"), w[0], w[1], if i == last { 1.0 } else { 2.0 }, rng))
            .collect::<Result<_>>()?;
        Ok(Self { grid, layers })
    }
}

impl<T: Scalar> Module<T> for PlainMlp<T> {
    fn parameters(&self) -> Vec<&Parameter<T>> {
        self.layers.iter().flat_map(|l| l.parameters()).collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        self.layers.iter_mut().flat_map(|l| l.parameters_mut()).collect()
    }
}

impl<T: Scalar> Classifier<T> for PlainMlp<T> {
    fn logits<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let batch = x.shape()[0];
        let mut h = x.reshape(&[batch, self.grid * self.grid])?;
        for (i, l) in self.layers.iter().enumerate() {
            if i > 0 {
                h = h.relu();
            }
            h = l.forward(tape, h)?;
        }
        Ok(h)
    }

    fn classes(&self) -> usize {
        self.layers.last().expect("at least one layer").outputs()
    }

    fn grid(&self) -> usize {
        self.grid
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{conv2d, group_conv, lifting_conv, ConvClassifier};
    use crate::metrics::{equivariance_error, EquivarianceProbe, Geometry, SymmetryGroup};
    use crate::oracle::gradient_check;
    use crate::rng::sample_standard_normal;

    fn randn(seed: u64, shape: &[usize]) -> Tensor<f64> {
        sample_standard_normal(&mut SeededRng::new(seed), shape).unwrap()
    }

    fn max_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.max_abs_diff(b).unwrap()
    }

    #[test]
    fn direct_layer_is_bilinear_and_zero_at_zero_kernel() {
        let layer = BlockMlpLayer::<f64>::new("l", 5, 9, Combiner::Direct, &mut SeededRng::new(1)).unwrap();
        let x = randn(2, &[25]);
        let (t1, t2) = (randn(3, &[9]), randn(4, &[9]));
        let zero = layer.forward_tensor(&x, &Tensor::zeros(vec![9])).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
        let y1 = layer.forward_tensor(&x, &t1).unwrap();
        let y2 = layer.forward_tensor(&x, &t2).unwrap();
        let scaled = layer.forward_tensor(&x, &t1.scale(-2.5)).unwrap();
        assert!(max_diff(&scaled, &y1.scale(-2.5)) <= 1e-12);
        let sum = layer.forward_tensor(&x, &t1.zip_map(&t2, "+", |a, b| a + b).unwrap()).unwrap();
        assert!(max_diff(&sum, &y1.zip_map(&y2, "+", |a, b| a + b).unwrap()) <= 1e-12);
        assert!(layer.forward_tensor(&randn(5, &[16]), &t1).is_err());
    }

    #[test]
    fn direct_combiner_requires_nine_blocks() {
        assert!(BlockMlpLayer::<f32>::new("l", 4, 8, Combiner::Direct, &mut SeededRng::new(1)).is_err());
        for b in [7, 8, 10] {
            let l = BlockMlpLayer::<f32>::new("l", 4, b, Combiner::EmbedProject, &mut SeededRng::new(1)).unwrap();
            assert_eq!(l.blocks.shape(), &[b * 16, 16]);
        }
    }

    #[test]
    fn oracle_block_layer_equals_conv() {
        for padding in [PaddingMode::ZeroFill, PaddingMode::Circular] {
            let layer = BlockMlpLayer::<f64>::oracle("l", 6, padding).unwrap();
            let tape = Tape::new();
            let x = tape.constant(randn(6, &[3, 2, 6, 6]));
            let w = tape.constant(randn(7, &[4, 2, 9]));
            let want = conv2d(x, w, None, padding).unwrap().value();
            let got = layer.apply(&tape, x.reshape(&[3, 2, 36]).unwrap(), w).unwrap();
            let got = (*got.value()).clone().reshape(vec![3, 4, 6, 6]).unwrap();
            assert!(max_diff(&got, &want) <= 1e-12);
        }
    }

    #[test]
    fn per_sample_kernels_match_shared_kernels() {
        let layer = BlockMlpLayer::<f64>::new("l", 4, 8, Combiner::EmbedProject, &mut SeededRng::new(8)).unwrap();
        let tape = Tape::new();
        let x = tape.constant(randn(9, &[2, 3, 16]));
        let w = randn(10, &[5, 3, 9]);
        let shared = layer.apply(&tape, x, tape.constant(w.clone())).unwrap().value();
        let tiled = Tensor::stack(&[w.clone(), w]).unwrap();
        let per = layer.apply(&tape, x, tape.constant(tiled)).unwrap().value();
        assert_eq!(shared.shape(), &[2, 5, 16]);
        assert!(max_diff(&shared, &per) <= 1e-12);
    }

    #[test]
    fn oracle_c4_layer_equals_lifting_and_group_conv() {
        for padding in [PaddingMode::ZeroFill, PaddingMode::Circular] {
            let layer = Mlp2GcnnLayer::<f64>::oracle("g", 5, padding).unwrap();
            let tape = Tape::new();
            let x = tape.constant(randn(11, &[2, 1, 5, 5]));
            let tau = tape.constant(randn(12, &[3, 1, 9]));
            let want = lifting_conv(x, tau, None, padding).unwrap().value();
            let got = layer.lifting(&tape, x.reshape(&[2, 1, 25]).unwrap(), tau).unwrap();
            assert_eq!(got.shape(), vec![2, 3, 4, 25]);
            let got = (*got.value()).clone().reshape(want.shape().to_vec()).unwrap();
            assert!(max_diff(&got, &want) <= 1e-12);

            let f = tape.constant(randn(13, &[2, 3, 4, 5, 5]));
            let psi = tape.constant(randn(14, &[2, 3, 4, 9]));
            let want = group_conv(f, psi, None, padding).unwrap().value();
            let got = layer.group(&tape, f.reshape(&[2, 3, 4, 25]).unwrap(), psi).unwrap();
            let got = (*got.value()).clone().reshape(want.shape().to_vec()).unwrap();
            assert!(max_diff(&got, &want) <= 1e-12);

            let tiled = tape.constant(Tensor::stack(&[(*psi.value()).clone(), (*psi.value()).clone()]).unwrap());
            let per = layer.group(&tape, f.reshape(&[2, 3, 4, 25]).unwrap(), tiled).unwrap();
            let per = (*per.value()).clone().reshape(want.shape().to_vec()).unwrap();
            assert!(max_diff(&per, &want) <= 1e-12);
        }
    }

    #[test]
    fn c4_layer_shape_and_zero_kernel() {
        let layer = Mlp2GcnnLayer::<f64>::new("g", 8, 9, Combiner::Direct, &mut SeededRng::new(15)).unwrap();
        let tape = Tape::new();
        let x = tape.constant(randn(16, &[1, 1, 64]));
        let y = layer.lifting(&tape, x, tape.constant(Tensor::zeros(vec![1, 1, 9]))).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 4, 64]);
        assert!(y.value().data().iter().all(|&v| v == 0.0));
    }

    struct Planar(BlockMlpLayer<f64>, Tensor<f64>);

    impl EquivarianceProbe<f64> for Planar {
        fn input_shape(&self) -> Vec<usize> {
            vec![1, self.0.grid(), self.0.grid()]
        }

        fn output_geometry(&self) -> Geometry {
            Geometry::Planar
        }

        fn reseed(&mut self, rng: &mut SeededRng) -> Result<()> {
            self.1 = sample_standard_normal(rng, &[1, 1, 9])?;
            Ok(())
        }

        fn eval(&self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
            let tape = Tape::new();
            let b = x.shape()[0];
            let g = self.0.grid();
            let xv = tape.constant(x.clone().reshape(vec![b, 1, g * g])?);
            let y = self.0.apply(&tape, xv, tape.constant(self.1.clone()))?.value();
            (*y).clone().reshape(vec![b, 1, g, g])
        }
    }

    #[test]
    fn random_layer_is_far_from_equivariant_and_oracle_is_exact() {
        let mut rng = SeededRng::new(17);
        let random = BlockMlpLayer::new("l", 6, 9, Combiner::Direct, &mut rng).unwrap();
        let r = equivariance_error(&mut Planar(random, Tensor::zeros(vec![1, 1, 9])), SymmetryGroup::T2, 50, &mut rng)
            .unwrap();
        assert!(r.mean > 0.1, "{}", r.mean);
        let oracle = BlockMlpLayer::oracle("l", 6, PaddingMode::Circular).unwrap();
        let r = equivariance_error(&mut Planar(oracle, Tensor::zeros(vec![1, 1, 9])), SymmetryGroup::T2, 50, &mut rng)
            .unwrap();
        assert!(r.mean <= 1e-5);
    }

    fn spec(family: Family) -> ClassifierSpec {
        ClassifierSpec {
            family,
            grid: 8,
            channels: vec![2, 3],
            pool_between: true,
            padding: PaddingMode::ZeroFill,
            classes: 20,
        }
    }

    fn logits(m: &dyn Classifier<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let tape = Tape::new();
        (*m.logits(&tape, tape.constant(x.clone())).unwrap().value()).clone()
    }

    #[test]
    fn oracle_students_reproduce_reference_classifiers() {
        let x = randn(18, &[3, 1, 8, 8]);
        for family in [Family::Cnn, Family::Gcnn] {
            let mut rng = SeededRng::new(19);
            let reference = ConvClassifier::<f64>::new(spec(family), &mut rng).unwrap();
            let layers = spec(family)
                .grids()
                .into_iter()
                .map(|g| match family {
                    Family::Cnn => StudentLayer::Planar(BlockMlpLayer::oracle("b", g, PaddingMode::ZeroFill).unwrap()),
                    Family::Gcnn => StudentLayer::C4(Mlp2GcnnLayer::oracle("g", g, PaddingMode::ZeroFill).unwrap()),
                })
                .collect();
            let mut student = assemble_student_classifier(layers, spec(family), &mut rng).unwrap();
            for (i, w) in reference.weights.iter().enumerate() {
                student.kernels[i].set_value(w.value.clone()).unwrap();
                student.biases[i].set_value(Tensor::full(vec![w.shape()[0]], 0.1)).unwrap();
            }
            let mut reference = reference;
            for b in &mut reference.biases {
                b.set_value(Tensor::full(b.shape().to_vec(), 0.1)).unwrap();
            }
            student.head = reference.head.clone();
            let want = logits(&reference, &x);
            assert_eq!(want.shape(), &[3, 20]);
            assert!(max_diff(&logits(&student, &x), &want) <= 1e-10);
        }
    }

    #[test]
    fn assembly_checks_the_size_chain() {
        let mut rng = SeededRng::new(20);
        let g14 = StudentKind::Blockmlp9.build::<f32>(14, 9, &mut rng).unwrap();
        let g7 = StudentKind::Blockmlp9.build::<f32>(7, 9, &mut rng).unwrap();
        let spec = ClassifierSpec {
            grid: 14,
            ..spec(Family::Cnn)
        };
        assert!(assemble_student_classifier(vec![g14.clone(), g14.clone()], spec.clone(), &mut rng).is_err());
        assert!(assemble_student_classifier(vec![g14.clone()], spec.clone(), &mut rng).is_err());
        let c4 = StudentKind::Mlp2gcnn.build::<f32>(7, 9, &mut rng).unwrap();
        assert!(assemble_student_classifier(vec![g14.clone(), c4], spec.clone(), &mut rng).is_err());
        let m = assemble_student_classifier(vec![g14, g7], spec, &mut rng).unwrap();
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![2, 1, 14, 14]));
        assert_eq!(m.logits(&tape, x).unwrap().shape(), vec![2, 20]);
    }

    #[test]
    fn freeze_and_unfreeze_flags() {
        let mut rng = SeededRng::new(21);
        let layers = spec(Family::Gcnn)
            .grids()
            .into_iter()
            .map(|g| StudentKind::Mlp2gcnnApprox.build::<f32>(g, 8, &mut rng).unwrap())
            .collect();
        let mut m = assemble_student_classifier(layers, spec(Family::Gcnn), &mut rng).unwrap();
        Classifier::set_mode(&mut m, TrainMode::Freeze).unwrap();
        assert!(m.cloned_parameters().iter().all(|p| !p.trainable));
        assert!(m.kernels.iter().chain(&m.biases).all(|p| p.trainable));
        assert!(m.head.parameters().iter().all(|p| p.trainable));
        assert_eq!(m.regularized_ids().len(), m.cloned_parameters().len());
        Classifier::set_mode(&mut m, TrainMode::Unfreeze).unwrap();
        assert!(m.parameters().iter().all(|p| p.trainable));

        let mut mlp = PlainMlp::<f32>::new(8, &[16], 10, &mut rng).unwrap();
        assert!(Classifier::set_mode(&mut mlp, TrainMode::Freeze).is_err());
        assert!(Classifier::set_mode(&mut mlp, TrainMode::Unfreeze).is_ok());
    }

    #[test]
    fn plain_mlp_shapes() {
        let m = PlainMlp::<f64>::new(4, &[8, 8], 20, &mut SeededRng::new(22)).unwrap();
        assert_eq!(logits(&m, &randn(23, &[5, 1, 4, 4])).shape(), &[5, 20]);
        assert_eq!(m.classes(), 20);
    }

    #[test]
    fn student_kind_names_round_trip() {
        for k in [StudentKind::Blockmlp9, StudentKind::BlockmlpApprox, StudentKind::Mlp2gcnn, StudentKind::Mlp2gcnnApprox] {
            assert_eq!(k.as_str().parse::<StudentKind>().unwrap(), k);
        }
        assert!("mlp3".parse::<StudentKind>().is_err());
    }

    fn check(results: &[crate::oracle::GradCheck]) {
        assert!(!results.is_empty());
        for r in results {
            assert!(r.relative_error <= 1e-4, "{}: {}", r.name, r.relative_error);
        }
    }

    /// A layer plus the kernel that drives it, as one module for gradient checks.
    struct Driven<L> {
        layer: L,
        tau: Parameter<f64>,
    }

    impl<L: Module<f64>> Module<f64> for Driven<L> {
        fn parameters(&self) -> Vec<&Parameter<f64>> {
            let mut ps = self.layer.parameters();
            ps.push(&self.tau);
            ps
        }

        fn parameters_mut(&mut self) -> Vec<&mut Parameter<f64>> {
            let mut ps = self.layer.parameters_mut();
            ps.push(&mut self.tau);
            ps
        }
    }

    #[test]
    fn block_layer_gradients_reach_blocks_and_kernels() {
        for (combiner, b) in [(Combiner::Direct, 9), (Combiner::EmbedProject, 7)] {
            let mut rng = SeededRng::new(24);
            let mut m = Driven {
                layer: BlockMlpLayer::<f64>::new("l", 3, b, combiner, &mut rng).unwrap(),
                tau: Parameter::new("tau", randn(25, &[2, 2, 9])),
            };
            let x = randn(26, &[2, 2, 9]);
            let target = randn(27, &[2, 2, 9]);
            let results = gradient_check(&mut m, 1e-5, 40, 1, |tape, m| {
                m.layer.apply(tape, tape.constant(x.clone()), tape.param(&m.tau))?.mse(&target)
            })
            .unwrap();
            assert_eq!(results.len(), m.parameters().len());
            check(&results);
        }
    }

    #[test]
    fn c4_layer_gradients() {
        for (combiner, b) in [(Combiner::Direct, 9), (Combiner::EmbedProject, 8)] {
            let mut rng = SeededRng::new(28);
            let mut lift = Driven {
                layer: Mlp2GcnnLayer::<f64>::new("g", 3, b, combiner, &mut rng).unwrap(),
                tau: Parameter::new("tau", randn(29, &[2, 1, 9])),
            };
            let x = randn(30, &[2, 1, 9]);
            let target = randn(31, &[2, 2, 4, 9]);
            check(
                &gradient_check(&mut lift, 1e-5, 30, 2, |tape, m| {
                    m.layer.lifting(tape, tape.constant(x.clone()), tape.param(&m.tau))?.mse(&target)
                })
                .unwrap(),
            );
            let mut group = Driven {
                layer: lift.layer,
                tau: Parameter::new("psi", randn(32, &[2, 2, 4, 9])),
            };
            let f = randn(33, &[2, 2, 4, 9]);
            check(
                &gradient_check(&mut group, 1e-5, 30, 3, |tape, m| {
                    m.layer.group(tape, tape.constant(f.clone()), tape.param(&m.tau))?.mse(&target)
                })
                .unwrap(),
            );
        }
    }

    #[test]
    fn classifier_gradients() {
        let mut rng = SeededRng::new(34);
        let x = randn(35, &[3, 1, 4, 4]);
        let labels = [1, 0, 3];
        let small = |family| ClassifierSpec {
            family,
            grid: 4,
            channels: vec![2, 2],
            pool_between: true,
            padding: PaddingMode::ZeroFill,
            classes: 4,
        };
        for (kind, b) in [(StudentKind::Blockmlp9, 9), (StudentKind::Mlp2gcnnApprox, 7)] {
            let spec = small(kind.family());
            let layers = spec.grids().into_iter().map(|g| kind.build(g, b, &mut rng).unwrap()).collect();
            let mut m = assemble_student_classifier::<f64>(layers, spec, &mut rng).unwrap();
            check(&gradient_check(&mut m, 1e-5, 25, 4, |tape, m| m.logits(tape, tape.constant(x.clone()))?.cross_entropy(&labels)).unwrap());
        }
        for family in [Family::Cnn, Family::Gcnn] {
            let mut m = ConvClassifier::<f64>::new(small(family), &mut rng).unwrap();
            check(&gradient_check(&mut m, 1e-5, 25, 5, |tape, m| m.logits(tape, tape.constant(x.clone()))?.cross_entropy(&labels)).unwrap());
        }
        let mut mlp = PlainMlp::<f64>::new(4, &[6], 4, &mut rng).unwrap();
        check(&gradient_check(&mut mlp, 1e-5, 25, 6, |tape, m| m.logits(tape, tape.constant(x.clone()))?.cross_entropy(&labels)).unwrap());
    }
}

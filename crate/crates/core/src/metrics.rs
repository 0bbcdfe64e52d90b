//! Measurements on trained layers: equivariance residuals, recovery of the
//! convolution's selector matrices, and grayscale feature-map export.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agnostic::{BlockMlpLayer, Combiner};
use crate::error::{Error, Result};
use crate::groups::{act_on_lifted, rotate90_image, translate_image, C4Element, GroupElement, PaddingMode, T2Element};
use crate::rng::{sample_standard_normal, SeededRng};
use crate::spatial::{tap_source, TAPS};
use crate::tensor::{Scalar, Tensor};

/// The nine 0/1 selector matrices of a same-size 3x3 convolution on an `H x W`
/// grid: `conv(x, tau) = sum_k tau_k P_k vec(x)`.
#[derive(Debug, Clone)]
pub struct ToeplitzOracle {
    pub h: usize,
    pub w: usize,
    pub padding: PaddingMode,
    /// `sources[k][out]` is the input pixel tap `k` reads for output `out`.
    sources: Vec<Vec<Option<usize>>>,
}

pub fn toeplitz_unroll(h: usize, w: usize, padding: PaddingMode) -> Result<ToeplitzOracle> {
    if h == 0 || w == 0 {
        return Err(Error::invalid(format!("cannot unroll a {h}x{w} grid")));
    }
    let sources = (0..TAPS)
        .map(|k| (0..h * w).map(|o| tap_source(o / w, o % w, k, h, w, padding)).collect())
        .collect();
    Ok(ToeplitzOracle { h, w, padding, sources })
}

impl ToeplitzOracle {
    pub fn n(&self) -> usize {
        self.h * self.w
    }

    /// `P_k` as a dense `[N, N]` matrix.
    pub fn selector<T: Scalar>(&self, k: usize) -> Tensor<T> {
        let n = self.n();
        let mut m = Tensor::zeros(vec![n, n]);
        for (o, src) in self.sources[k].iter().enumerate() {
            if let Some(i) = src {
                m.data_mut()[o * n + i] = T::one();
            }
        }
        m
    }

    pub fn selectors<T: Scalar>(&self) -> Vec<Tensor<T>> {
        (0..TAPS).map(|k| self.selector(k)).collect()
    }

    /// `sum_k tau_k P_k`.
    pub fn matrix<T: Scalar>(&self, tau: &[T]) -> Result<Tensor<T>> {
        if tau.len() != TAPS {
            return Err(Error::invalid(format!("kernel must have 9 entries, got {}", tau.len())));
        }
        let n = self.n();
        let mut m = Tensor::zeros(vec![n, n]);
        for (k, col) in self.sources.iter().enumerate() {
            for (o, src) in col.iter().enumerate() {
                if let Some(i) = src {
                    m.data_mut()[o * n + i] += tau[k];
                }
            }
        }
        Ok(m)
    }
}

/// `||stack(M) - stack(P)||_F / ||stack(P)||_F` for a direct 9-block layer.
pub fn toeplitz_error<T: Scalar>(layer: &BlockMlpLayer<T>, oracle: &ToeplitzOracle) -> Result<f64> {
    if layer.combiner() != Combiner::Direct || layer.num_blocks() != TAPS {
        return Err(Error::invalid(format!(
            "Toeplitz comparison needs a direct 9-block layer, got {} blocks ({:?})",
            layer.num_blocks(),
            layer.combiner()
        )));
    }
    let n = oracle.n();
    if layer.n() != n {
        return Err(Error::invalid(format!("layer has N = {}, oracle has N = {n}", layer.n())));
    }
    let blocks = layer.blocks.value.data();
    let (mut diff2, mut ref2) = (0.0, 0.0);
    for (k, col) in oracle.sources.iter().enumerate() {
        let block = &blocks[k * n * n..(k + 1) * n * n];
        for (o, row) in block.chunks(n).enumerate() {
            for (i, &m) in row.iter().enumerate() {
                let p = if col[o] == Some(i) { 1.0 } else { 0.0 };
                diff2 += (m.to_f64() - p).powi(2);
                ref2 += p;
            }
        }
    }
    Ok(if ref2 == 0.0 { diff2.sqrt() } else { (diff2 / ref2).sqrt() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SymmetryGroup {
    #[serde(rename = "t2")]
    T2,
    #[serde(rename = "c4")]
    C4,
}

impl fmt::Display for SymmetryGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::T2 => "t2",
            Self::C4 => "c4",
        })
    }
}

/// How the group acts on a model's input or output (per sample, batch axis excluded).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Geometry {
    /// `[.., H, W]` images: shift or rotate every plane.
    Planar,
    /// `[.., 4, H, W]` orientation-indexed maps: shift planes, or rotate and cycle
    /// orientations.
    Lifted,
    /// Trivial action (e.g. classifier logits).
    Invariant,
}

/// A model under test. `eval` maps a batch `[batch, input_shape..]` to outputs
/// `[batch, ..]`; `reseed` draws fresh kernel parameters before each sample for
/// layers parameterized by a kernel.
pub trait EquivarianceProbe<T: Scalar> {
    fn input_shape(&self) -> Vec<usize>;

    fn input_geometry(&self) -> Geometry {
        Geometry::Planar
    }

    fn output_geometry(&self) -> Geometry;

    /// Border rule of the translation action.
    fn padding(&self) -> PaddingMode {
        PaddingMode::Circular
    }

    fn reseed(&mut self, _rng: &mut SeededRng) -> Result<()> {
        Ok(())
    }

    fn eval(&self, x: &Tensor<T>) -> Result<Tensor<T>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivarianceReport {
    pub group: SymmetryGroup,
    pub samples: usize,
    pub mean: f64,
    pub max: f64,
    pub std: f64,
    #[serde(skip)]
    pub residuals: Vec<f64>,
}

impl EquivarianceReport {
    fn from_residuals(group: SymmetryGroup, residuals: Vec<f64>) -> Self {
        let n = residuals.len().max(1) as f64;
        let mean = residuals.iter().sum::<f64>() / n;
        let var = residuals.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
        let max = residuals.iter().copied().fold(0.0, f64::max);
        Self {
            group,
            samples: residuals.len(),
            mean,
            max,
            std: var.sqrt(),
            residuals,
        }
    }
}

fn act<T: Scalar>(x: &Tensor<T>, geometry: Geometry, g: GroupElement, padding: PaddingMode) -> Result<Tensor<T>> {
    match (geometry, g) {
        (Geometry::Invariant, _) => Ok(x.clone()),
        (Geometry::Planar | Geometry::Lifted, GroupElement::T2(t)) => translate_image(x, t, padding),
        (Geometry::Planar, GroupElement::C4(r)) => rotate90_image(x, r),
        (Geometry::Lifted, GroupElement::C4(r)) => act_on_lifted(x, r),
    }
}

fn sample_element(group: SymmetryGroup, h: usize, w: usize, rng: &mut SeededRng) -> GroupElement {
    match group {
        SymmetryGroup::T2 => GroupElement::T2(T2Element::new(rng.below(h) as i64, rng.below(w) as i64)),
        SymmetryGroup::C4 => GroupElement::C4(C4Element::new(rng.below(4) as i64)),
    }
}

/// Mean over sampled `(g, x)` of `||model(g x) - g model(x)|| / (||model(x)|| + 1e-12)`
/// with `x` standard normal and `g` uniform over the group's action on the grid.
pub fn equivariance_error<T: Scalar>(
    model: &mut dyn EquivarianceProbe<T>,
    group: SymmetryGroup,
    n_samples: usize,
    rng: &mut SeededRng,
) -> Result<EquivarianceReport> {
    let in_shape = model.input_shape();
    if model.input_geometry() == Geometry::Invariant {
        return Err(Error::invalid("equivariance needs a group action on the input"));
    }
    if in_shape.len() < 2 {
        return Err(Error::invalid(format!("probe input {in_shape:?} has no spatial grid")));
    }
    let (h, w) = (in_shape[in_shape.len() - 2], in_shape[in_shape.len() - 1]);
    let padding = model.padding();
    let mut residuals = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        model.reseed(rng)?;
        let x: Tensor<T> = sample_standard_normal(rng, &in_shape)?;
        let g = sample_element(group, h, w, rng);
        let gx = act(&x, model.input_geometry(), g, padding)?;
        let y = model.eval(&Tensor::stack(&[x, gx])?)?;
        let fx = y.slice_outer(0)?;
        let fgx = y.slice_outer(1)?;
        let gfx = act(&fx, model.output_geometry(), g, padding)?;
        let num = fgx.zip_map(&gfx, "equivariance residual", |a, b| a - b)?.norm().to_f64();
        residuals.push(num / (fx.norm().to_f64() + 1e-12));
    }
    Ok(EquivarianceReport::from_residuals(group, residuals))
}

/// Writes `metric,mean,max,std,n` rows.
pub fn write_metrics_csv(path: &Path, rows: &[(String, &EquivarianceReport)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    w.write_record(["metric", "mean", "max", "std", "n"])?;
    for (name, r) in rows {
        w.write_record([name.clone(), fmt_f64(r.mean), fmt_f64(r.max), fmt_f64(r.std), r.samples.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Shortest round-tripping decimal form, so CSVs are stable and exact.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Min-max scaling to bytes; a constant map becomes uniform mid-gray.
pub fn normalize_to_u8(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![128; values.len()];
    }
    values.iter().map(|v| ((v - lo) / (hi - lo) * 255.0).round() as u8).collect()
}

/// Binary PGM (P5, maxval 255).
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::invalid(format!("{} pixels for a {width}x{height} image", pixels.len())));
    }
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// A model whose response to an image can be shown as one 2-D map.
pub trait FeatureMapSource {
    fn name(&self) -> String;

    /// `[H, W]` image -> `[h, w]` map.
    fn feature_map(&self, image: &Tensor<f32>) -> Result<Tensor<f32>>;
}

/// Writes `input{i}.pgm`, `{model}_input{i}.pgm` for every pair, and `grid.pgm`
/// with one row per input and columns (input, model 1, .., model m). Every image is
/// normalized on its own; grid cells are padded (black) to the largest image.
pub fn export_feature_maps(models: &[&dyn FeatureMapSource], inputs: &[Tensor<f32>], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut rows: Vec<Vec<(usize, usize, Vec<u8>)>> = Vec::new();
    for (i, x) in inputs.iter().enumerate() {
        let mut row = Vec::new();
        let mut cells = vec![("input".to_string(), x.clone())];
        for m in models {
            cells.push((m.name(), m.feature_map(x)?));
        }
        for (col, (name, map)) in cells.into_iter().enumerate() {
            let s = map.shape();
            if s.len() != 2 {
                return Err(Error::invalid(format!("feature map of {name} has shape {s:?}, expected [h, w]")));
            }
            let px = normalize_to_u8(&map.data().iter().map(|v| v.to_f64()).collect::<Vec<_>>());
            let file = if col == 0 {
                dir.join(format!("input{i}.pgm"))
            } else {
                dir.join(format!("{name}_input{i}.pgm"))
            };
            write_pgm(&file, s[1], s[0], &px)?;
            written.push(file);
            row.push((s[0], s[1], px));
        }
        rows.push(row);
    }
    let cell_h = rows.iter().flatten().map(|c| c.0).max().unwrap_or(0);
    let cell_w = rows.iter().flatten().map(|c| c.1).max().unwrap_or(0);
    let cols = 1 + models.len();
    let (gw, gh) = (cols * cell_w, rows.len() * cell_h);
    let mut grid = vec![0u8; gw * gh];
    for (r, row) in rows.iter().enumerate() {
        for (c, (h, w, px)) in row.iter().enumerate() {
            for y in 0..*h {
                let dst = (r * cell_h + y) * gw + c * cell_w;
                grid[dst..dst + w].copy_from_slice(&px[y * w..(y + 1) * w]);
            }
        }
    }
    let file = dir.join("grid.pgm");
    write_pgm(&file, gw, gh, &grid)?;
    written.push(file);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{conv2d_tensor, ConvKernel};
    use crate::oracle::conv2d_naive;

    #[test]
    fn unroll_examples() {
        let one = toeplitz_unroll(1, 1, PaddingMode::Circular).unwrap();
        for k in 0..TAPS {
            assert_eq!(one.selector::<f64>(k).data(), &[1.0]);
        }
        let three = toeplitz_unroll(3, 3, PaddingMode::ZeroFill).unwrap();
        let center = three.selector::<f64>(4);
        for o in 0..9 {
            for i in 0..9 {
                assert_eq!(center.data()[o * 9 + i], f64::from(o == i));
            }
        }
        for k in 0..TAPS {
            let p = three.selector::<f64>(k);
            assert!(p.data().chunks(9).all(|row| row.iter().sum::<f64>() <= 1.0));
        }
    }

    #[test]
    fn unrolled_matrix_matches_nested_loops() {
        let mut rng = SeededRng::new(5);
        for (padding, circular) in [(PaddingMode::ZeroFill, false), (PaddingMode::Circular, true)] {
            for (h, w) in [(2, 2), (3, 5), (8, 8)] {
                let oracle = toeplitz_unroll(h, w, padding).unwrap();
                for _ in 0..10 {
                    let x = sample_standard_normal::<f64>(&mut rng, &[h * w]).unwrap();
                    let tau = sample_standard_normal::<f64>(&mut rng, &[9]).unwrap();
                    let m = oracle.matrix(tau.data()).unwrap();
                    let want = conv2d_naive(x.data(), 1, h, w, tau.data(), 1, circular);
                    for o in 0..h * w {
                        let got: f64 = (0..h * w).map(|i| m.data()[o * h * w + i] * x.data()[i]).sum();
                        assert!((got - want[o]).abs() <= 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn toeplitz_error_endpoints_and_checks() {
        let oracle = toeplitz_unroll(4, 4, PaddingMode::ZeroFill).unwrap();
        let mut layer = BlockMlpLayer::<f32>::oracle("l", 4, PaddingMode::ZeroFill).unwrap();
        assert_eq!(toeplitz_error(&layer, &oracle).unwrap(), 0.0);
        layer.blocks.value = Tensor::zeros(layer.blocks.value.shape().to_vec());
        assert_eq!(toeplitz_error(&layer, &oracle).unwrap(), 1.0);
        let small = toeplitz_unroll(3, 3, PaddingMode::ZeroFill).unwrap();
        assert!(toeplitz_error(&layer, &small).is_err());
        let approx = BlockMlpLayer::<f32>::new("a", 4, 8, Combiner::EmbedProject, &mut SeededRng::new(1)).unwrap();
        assert!(toeplitz_error(&approx, &oracle).is_err());
    }

    struct Conv {
        kernel: ConvKernel<f64>,
        scale: f64,
    }

    impl EquivarianceProbe<f64> for Conv {
        fn input_shape(&self) -> Vec<usize> {
            vec![1, 6, 6]
        }

        fn output_geometry(&self) -> Geometry {
            Geometry::Planar
        }

        fn padding(&self) -> PaddingMode {
            self.kernel.padding
        }

        fn eval(&self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
            let ys = (0..x.shape()[0])
                .map(|i| Ok(conv2d_tensor(&x.slice_outer(i)?, &self.kernel)?.scale(self.scale)))
                .collect::<Result<Vec<_>>>()?;
            Tensor::stack(&ys)
        }
    }

    fn conv_probe(padding: PaddingMode, scale: f64) -> Conv {
        let w = sample_standard_normal(&mut SeededRng::new(3), &[1, 1, 3, 3]).unwrap();
        Conv {
            kernel: ConvKernel::new(w, None, padding).unwrap(),
            scale,
        }
    }

    #[test]
    fn circular_conv_is_translation_equivariant() {
        let r = equivariance_error(&mut conv_probe(PaddingMode::Circular, 1.0), SymmetryGroup::T2, 50, &mut SeededRng::new(4))
            .unwrap();
        assert!(r.mean <= 1e-12 && r.max >= r.mean);
        assert_eq!(r.samples, 50);
    }

    #[test]
    fn residuals_ignore_output_scale() {
        let a = equivariance_error(&mut conv_probe(PaddingMode::ZeroFill, 1.0), SymmetryGroup::T2, 20, &mut SeededRng::new(6))
            .unwrap();
        let b = equivariance_error(&mut conv_probe(PaddingMode::ZeroFill, 2.0), SymmetryGroup::T2, 20, &mut SeededRng::new(6))
            .unwrap();
        assert!(a.mean > 0.01);
        for (x, y) in a.residuals.iter().zip(&b.residuals) {
            assert!((x - y).abs() <= 1e-12 * x.max(1.0));
        }
    }

    #[test]
    fn normalization_and_pgm() {
        assert_eq!(normalize_to_u8(&[0.0, 0.0, 0.0]), vec![128, 128, 128]);
        assert_eq!(normalize_to_u8(&[-1.0, 0.0, 1.0]), vec![0, 128, 255]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        write_pgm(&p, 3, 1, &[0, 128, 255]).unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"P5\n3 1\n255\n\x00\x80\xff");
        assert!(write_pgm(&dir.path().join("missing/x.pgm"), 1, 1, &[0]).is_err());
    }

    struct Zero;

    impl FeatureMapSource for Zero {
        fn name(&self) -> String {
            "zero".into()
        }

        fn feature_map(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
            Ok(Tensor::zeros(image.shape().to_vec()))
        }
    }

    #[test]
    fn export_layout() {
        let dir = tempfile::tempdir().unwrap();
        let digit = Tensor::new(vec![2, 2], vec![0.0f32, 1.0, 0.5, 0.25]).unwrap();
        let files = export_feature_maps(&[&Zero, &Zero], &[digit.clone(), digit], dir.path()).unwrap();
        assert_eq!(files.len(), 2 * 3 + 1);
        let input = fs::read(dir.path().join("input0.pgm")).unwrap();
        assert_eq!(&input[input.len() - 4..], &[0, 255, 128, 64]);
        let zero = fs::read(dir.path().join("zero_input1.pgm")).unwrap();
        assert_eq!(&zero[zero.len() - 4..], &[128; 4]);
        let grid = fs::read(dir.path().join("grid.pgm")).unwrap();
        assert!(grid.starts_with(b"P5\n6 4\n255\n"));
    }
}

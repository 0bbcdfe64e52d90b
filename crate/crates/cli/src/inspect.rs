use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use serde::Serialize;
use symclone_core::agnostic::{StudentKind, StudentLayer};
use symclone_core::cloning::{student_forward, stack_teacher, TeacherKind, TeacherSpec};
use symclone_core::data::{load_mnist_idx, load_stack, ClonedStack};
use symclone_core::downstream::downsample_dataset;
use symclone_core::groups::{rotate90_image, translate_image};
use symclone_core::metrics::{export_feature_maps, normalize_to_u8, toeplitz_error, toeplitz_unroll, write_pgm, FeatureMapSource};
use symclone_core::rng::sample_standard_normal;
use symclone_core::{C4Element, Error, PaddingMode, SeededRng, T2Element, Tape, Tensor};

use crate::output::OutputDir;
use crate::settings::Common;
use crate::Outcome;

#[derive(Args, Debug)]
pub struct ToeplitzArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint of a blockmlp9 stack.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Layer index within the stack.
    #[arg(long, default_value_t = 0)]
    layer: usize,
}

#[derive(Serialize)]
struct ToeplitzRow {
    layer: usize,
    grid: usize,
    padding: PaddingMode,
    toeplitz_error: f64,
}

/// `[rows, cols]` matrix as grayscale bytes, min-max scaled.
fn matrix_pixels(values: &[f32]) -> Vec<u8> {
    normalize_to_u8(&values.iter().map(|&v| f64::from(v)).collect::<Vec<_>>())
}

pub fn run_toeplitz(args: ToeplitzArgs) -> Result<Outcome> {
    let cfg = args.common.load(|_| Ok(()))?;
    let (stack, _) = load_stack(&args.checkpoint, None)?;
    if stack.kind != StudentKind::Blockmlp9 {
        return Err(Error::KindMismatch {
            expected: StudentKind::Blockmlp9.to_string(),
            found: stack.kind.to_string(),
        }
        .into());
    }
    let (Some(StudentLayer::Planar(layer)), Some(meta)) = (stack.layers.get(args.layer), stack.meta.get(args.layer)) else {
        return Err(Error::Config {
            key: "layer".into(),
            msg: format!("checkpoint has {} layers, asked for layer {}", stack.layers.len(), args.layer),
        }
        .into());
    };
    let oracle = toeplitz_unroll(meta.grid, meta.grid, meta.padding)?;
    let err = toeplitz_error(layer, &oracle)?;

    let mut out = OutputDir::create(&cfg.output.dir)?;
    out.write_config(&cfg)?;
    let n = layer.n();
    let learned = matrix_pixels(layer.blocks.value.data());
    let reference: Vec<f32> = oracle.selectors::<f32>().iter().flat_map(|p| p.data().to_vec()).collect();
    let reference = matrix_pixels(&reference);
    write_pgm(&out.file("learned.pgm")?, n, 9 * n, &learned)?;
    write_pgm(&out.file("oracle.pgm")?, n, 9 * n, &reference)?;
    let gap = 4;
    let width = 2 * n + gap;
    let mut both = vec![0u8; width * 9 * n];
    for r in 0..9 * n {
        both[r * width..r * width + n].copy_from_slice(&learned[r * n..(r + 1) * n]);
        both[r * width + n + gap..(r + 1) * width].copy_from_slice(&reference[r * n..(r + 1) * n]);
    }
    write_pgm(&out.file("comparison.pgm")?, width, 9 * n, &both)?;

    let row = ToeplitzRow {
        layer: args.layer,
        grid: meta.grid,
        padding: meta.padding,
        toeplitz_error: err,
    };
    let path = out.file("toeplitz.csv")?;
    let mut w = csv::Writer::from_path(&path)?;
    w.serialize(&row)?;
    w.flush()?;
    out.write_json("report.json", &row)?;
    println!("layer {} ({}x{}): toeplitz error {err:.4}", args.layer, meta.grid, meta.grid);
    out.finish("inspect-toeplitz")?;
    Ok(Outcome::Done)
}

#[derive(Args, Debug)]
pub struct MapsArgs {
    #[command(flatten)]
    common: Common,
    /// Cloned stacks to show (layer 0 of each); all must share the group.
    #[arg(long, required = true)]
    checkpoint: Vec<PathBuf>,
    /// Number of digits; each is shown as-is and transformed.
    #[arg(long, default_value_t = 2)]
    inputs: usize,
}

/// Layer-0 response of a teacher or student to one fixed kernel; lifted outputs
/// are max-pooled over orientations.
struct LayerMaps<'a> {
    name: String,
    teacher: TeacherSpec,
    student: Option<&'a StudentLayer<f32>>,
    tau: Tensor<f32>,
}

impl FeatureMapSource for LayerMaps<'_> {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn feature_map(&self, image: &Tensor<f32>) -> symclone_core::Result<Tensor<f32>> {
        let g = self.teacher.grid;
        let x = image.clone().reshape(vec![1, 1, g * g])?;
        let y = match self.student {
            None => self.teacher.forward(&x, &self.tau)?,
            Some(s) => {
                let tape = Tape::new();
                let y = student_forward(s, &self.teacher, &tape, tape.constant(x), tape.constant(self.tau.clone()))?;
                (*y.value()).clone()
            }
        };
        let n = g * g;
        let planes = y.len() / n;
        let map = (0..n)
            .map(|p| (0..planes).map(|s| y.data()[s * n + p]).fold(f32::NEG_INFINITY, f32::max))
            .collect();
        Tensor::new(vec![g, g], map)
    }
}

fn first_layer(stack: &ClonedStack) -> Result<(&StudentLayer<f32>, TeacherSpec)> {
    let (layer, meta) = stack.layers.first().zip(stack.meta.first()).context("checkpoint holds no layers")?;
    Ok((layer, stack_teacher(meta.teacher, 0, meta.grid, meta.padding)))
}

pub fn run_maps(args: MapsArgs) -> Result<Outcome> {
    let cfg = args.common.load(|_| Ok(()))?;
    let stacks: Vec<ClonedStack> = args.checkpoint.iter().map(|p| Ok(load_stack(p, None)?.0)).collect::<Result<_>>()?;
    let (_, teacher) = first_layer(&stacks[0])?;
    for s in &stacks {
        let (_, t) = first_layer(s)?;
        if t.kind != teacher.kind || t.grid != teacher.grid {
            return Err(Error::Config {
                key: "checkpoint".into(),
                msg: format!("checkpoints disagree: {} on {}x{} vs {} on {}x{}", t.kind, t.grid, t.grid, teacher.kind, teacher.grid, teacher.grid),
            }
            .into());
        }
    }
    let mut rng = SeededRng::new(cfg.seeds.init);
    let mut shape = vec![1];
    shape.extend(teacher.kernel_shape());
    let tau: Tensor<f32> = sample_standard_normal(&mut rng, &shape)?;
    let untrained = stacks[0].kind.build::<f32>(teacher.grid, stacks[0].meta[0].blocks, &mut rng)?;

    let t = &cfg.task;
    let raw = load_mnist_idx(&t.data_dir.join(&t.images_file), &t.data_dir.join(&t.labels_file))?;
    let mut digits = raw.subset(&SeededRng::new(cfg.seeds.split).permutation(raw.len())[..args.inputs.min(raw.len())]);
    while digits.image_size().0 > teacher.grid && digits.image_size().0 % 2 == 0 {
        digits = downsample_dataset(&digits)?;
    }
    if digits.image_size() != (teacher.grid, teacher.grid) {
        return Err(Error::Config {
            key: "task.data_dir".into(),
            msg: format!("digits of size {:?} cannot be brought to the {}x{} layer grid", digits.image_size(), teacher.grid, teacher.grid),
        }
        .into());
    }
    let shift = (teacher.grid / 7).max(1) as i64;
    let mut inputs = Vec::new();
    for i in 0..digits.len() {
        let x = digits.image(i);
        let moved = match teacher.kind {
            TeacherKind::Conv => translate_image(&x, T2Element::new(shift, -shift), PaddingMode::ZeroFill)?,
            _ => rotate90_image(&x, C4Element::new(1))?,
        };
        inputs.push(x);
        inputs.push(moved);
    }

    let mut sources = vec![LayerMaps {
        name: "teacher".into(),
        teacher,
        student: None,
        tau: tau.clone(),
    }];
    for (path, s) in args.checkpoint.iter().zip(&stacks) {
        let stem = path.file_stem().map_or("cloned".into(), |s| s.to_string_lossy().into_owned());
        sources.push(LayerMaps {
            name: format!("{stem}_{}", s.kind),
            teacher,
            student: Some(first_layer(s)?.0),
            tau: tau.clone(),
        });
    }
    sources.push(LayerMaps {
        name: "untrained".into(),
        teacher,
        student: Some(&untrained),
        tau,
    });

    let mut out = OutputDir::create(&cfg.output.dir)?;
    out.write_config(&cfg)?;
    let models: Vec<&dyn FeatureMapSource> = sources.iter().map(|s| s as &dyn FeatureMapSource).collect();
    let dir = out.root().join("maps");
    for f in export_feature_maps(&models, &inputs, &dir)? {
        out.register(f);
    }
    println!("wrote {} inputs x {} models to {}", inputs.len(), models.len(), dir.display());
    out.finish("export-maps")?;
    Ok(Outcome::Done)
}

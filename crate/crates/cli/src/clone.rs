use std::path::PathBuf;

use anyhow::Result;
use clap::Args;
use serde::Serialize;
use symclone_core::cloning::{clone_stack, CloneReport, LayerProbe, ProbeTarget, TeacherKind, TeacherSpec};
use symclone_core::data::{load_stack, save_stack};
use symclone_core::metrics::{equivariance_error, write_metrics_csv, EquivarianceReport};
use symclone_core::{PaddingMode, SeededRng};

use crate::output::OutputDir;
use crate::settings::{parse_enum, Common};
use crate::Outcome;

#[derive(Args, Debug)]
pub struct CloneArgs {
    #[command(flatten)]
    common: Common,
    /// blockmlp9, blockmlp_approx, mlp2gcnn or mlp2gcnn_approx.
    #[arg(long)]
    student: Option<String>,
    #[arg(long)]
    blocks: Option<usize>,
    /// conv, lifting or groupconv.
    #[arg(long)]
    teacher: Option<String>,
    /// zero_fill or circular.
    #[arg(long)]
    padding: Option<String>,
    /// Comma-separated grid sizes, one cloned layer each.
    #[arg(long, value_delimiter = ',')]
    grids: Option<Vec<usize>>,
    #[arg(long)]
    max_steps: Option<usize>,
}

#[derive(Serialize)]
struct CloneSummary<'a> {
    converged: bool,
    student: String,
    blocks: usize,
    layers: Vec<LayerSummary<'a>>,
}

#[derive(Serialize)]
struct LayerSummary<'a> {
    grid: usize,
    teacher: TeacherKind,
    #[serde(flatten)]
    report: &'a CloneReport,
}

pub fn run_clone(args: CloneArgs) -> Result<Outcome> {
    let cfg = args.common.load(|cfg| {
        if let Some(s) = &args.student {
            cfg.student.kind = parse_enum("student.kind", s)?;
        }
        if let Some(b) = args.blocks {
            cfg.student.blocks = b;
        }
        if let Some(t) = &args.teacher {
            cfg.teacher.kind = parse_enum("teacher.kind", t)?;
        }
        if let Some(p) = &args.padding {
            cfg.teacher.padding = parse_enum("teacher.padding", p)?;
        }
        if let Some(g) = &args.grids {
            cfg.student.grids = g.clone();
        }
        if let Some(m) = args.max_steps {
            cfg.clone.max_steps = m;
        }
        Ok(())
    })?;
    let mut out = OutputDir::create(&cfg.output.dir)?;
    out.write_config(&cfg)?;
    let s = &cfg.student;
    let (stack, reports) = clone_stack(s.kind, s.blocks, &s.grids, cfg.teacher.kind, cfg.teacher.padding, &cfg.clone, cfg.seeds.init)?;
    let ckpt = out.file("stack.ckpt")?;
    save_stack(&ckpt, &stack, cfg.seeds.init)?;
    for (i, r) in reports.iter().enumerate() {
        r.write_loss_csv(&out.file(&format!("layer{i}_loss.csv"))?)?;
    }
    let converged = reports.iter().all(|r| r.converged);
    let summary = CloneSummary {
        converged,
        student: s.kind.to_string(),
        blocks: s.blocks,
        layers: stack
            .meta
            .iter()
            .zip(&reports)
            .map(|(m, report)| LayerSummary {
                grid: m.grid,
                teacher: m.teacher,
                report,
            })
            .collect(),
    };
    out.write_json("report.json", &summary)?;
    for (m, r) in stack.meta.iter().zip(&reports) {
        println!(
            "layer grid {:>2} ({}): {} after {} steps, rel mse {:.2e}, equivariance error {:.3} -> {:.3}",
            m.grid,
            m.teacher,
            if r.converged { "converged" } else { "not converged" },
            r.steps,
            r.final_rel_mse,
            r.initial_equiv_error,
            r.final_equiv_error
        );
    }
    println!("checkpoint: {}", ckpt.display());
    out.finish("clone")?;
    Ok(if converged { Outcome::Done } else { Outcome::NotConverged })
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Random (g, x, tau) triples per measurement.
    #[arg(long, default_value_t = 200)]
    samples: usize,
    /// Border rule of the probe; defaults to the rule the layer was cloned with.
    #[arg(long)]
    padding: Option<String>,
}

#[derive(Serialize)]
struct EvalRow {
    layer: usize,
    grid: usize,
    teacher: EquivarianceReport,
    student: EquivarianceReport,
    untrained: EquivarianceReport,
}

/// Teacher, cloned and freshly initialized student of every layer, all probed
/// with the same sample stream.
pub fn run_eval(args: EvalArgs) -> Result<Outcome> {
    let cfg = args.common.load(|_| Ok(()))?;
    let padding: Option<PaddingMode> = args.padding.as_deref().map(|p| parse_enum("padding", p)).transpose()?;
    let (stack, _) = load_stack(&args.checkpoint, None)?;
    let mut out = OutputDir::create(&cfg.output.dir)?;
    out.write_config(&cfg)?;
    let mut init_rng = SeededRng::new(cfg.seeds.init ^ 0x5a5a);
    let mut rows = Vec::new();
    for (i, (layer, meta)) in stack.layers.iter().zip(&stack.meta).enumerate() {
        let teacher = TeacherSpec {
            kind: meta.teacher,
            grid: meta.grid,
            padding: padding.unwrap_or(meta.padding),
        };
        let fresh = stack.kind.build::<f32>(meta.grid, meta.blocks, &mut init_rng)?;
        let measure = |target: ProbeTarget<'_, f32>| -> Result<EquivarianceReport> {
            let mut probe = LayerProbe::new(target, teacher);
            let mut rng = SeededRng::new(cfg.seeds.clone ^ i as u64);
            Ok(equivariance_error(&mut probe, teacher.group(), args.samples, &mut rng)?)
        };
        rows.push(EvalRow {
            layer: i,
            grid: meta.grid,
            teacher: measure(ProbeTarget::Teacher)?,
            student: measure(ProbeTarget::Student(layer))?,
            untrained: measure(ProbeTarget::Student(&fresh))?,
        });
    }
    let named: Vec<(String, &EquivarianceReport)> = rows
        .iter()
        .flat_map(|r| {
            [
                (format!("layer{}.teacher", r.layer), &r.teacher),
                (format!("layer{}.cloned", r.layer), &r.student),
                (format!("layer{}.untrained", r.layer), &r.untrained),
            ]
        })
        .collect();
    write_metrics_csv(&out.file("equivariance.csv")?, &named)?;
    out.write_json("report.json", &rows)?;
    for r in &rows {
        println!(
            "layer {} ({}x{}, {}): teacher {:.2e}  cloned {:.2e}  untrained {:.2e}",
            r.layer, r.grid, r.grid, r.student.group, r.teacher.mean, r.student.mean, r.untrained.mean
        );
    }
    out.finish("eval-equiv")?;
    Ok(Outcome::Done)
}

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use clap::Args;
use serde::Serialize;
use symclone_core::agnostic::StudentKind;
use symclone_core::cloning::{clone_stack, TeacherKind};
use symclone_core::data::{load_stack, save_stack, ClonedStack, RunConfig};
use symclone_core::downstream::{build_bench_model, load_task_data, train_on_task, BenchModel, BenchmarkTask, TrainReport};
use symclone_core::layers::ClassifierSpec;
use symclone_core::{Error, SeededRng};

use crate::output::OutputDir;
use crate::settings::{parse_enum, Common};
use crate::Outcome;

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[command(flatten)]
    common: Common,
    /// t2-sym, t2-break, c4-sym or c4-break.
    #[arg(long)]
    task: Option<String>,
    /// mlp, cnn, gcnn, cloned-freeze or cloned-unfreeze.
    #[arg(long)]
    model: Option<String>,
    /// Cloned stack for the cloned-* models.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Use a seeded subset of this many digits.
    #[arg(long)]
    limit: Option<usize>,
    /// Run the whole results grid and write a combined summary.
    #[arg(long)]
    all: bool,
    /// With --all: directory of `{kind}-{blocks}.ckpt` stacks; missing ones are
    /// cloned (and saved under the output directory).
    #[arg(long)]
    stacks: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SummaryRow {
    pub task: String,
    pub model: String,
    pub blocks: Option<usize>,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

fn load_config(args: &BenchArgs) -> Result<RunConfig> {
    args.common.load(|cfg| {
        if let Some(t) = &args.task {
            cfg.task.name = parse_enum("task.name", t)?;
        }
        if let Some(m) = &args.model {
            cfg.task.model = parse_enum("task.model", m)?;
        }
        if let Some(c) = &args.checkpoint {
            cfg.task.checkpoint = Some(c.clone());
        }
        if let Some(e) = args.epochs {
            cfg.train.epochs = e;
        }
        if let Some(l) = args.limit {
            cfg.task.limit = l;
        }
        Ok(())
    })
}

pub fn run(args: BenchArgs) -> Result<Outcome> {
    let cfg = load_config(&args)?;
    if args.all {
        return run_all(&cfg, args.stacks.as_deref());
    }
    let t = &cfg.task;
    let stack = match (&t.checkpoint, t.model.is_cloned()) {
        (Some(p), true) => Some(load_stack(p, None)?.0),
        (None, true) => {
            return Err(Error::Config {
                key: "task.checkpoint".into(),
                msg: format!("{} needs --checkpoint", t.model),
            }
            .into())
        }
        _ => None,
    };
    let mut out = OutputDir::create(&cfg.output.dir)?;
    out.write_config(&cfg)?;
    let blocks = stack.as_ref().map(|s| s.meta.first().map_or(0, |m| m.blocks));
    let report = run_cell(&cfg, t.name, t.model, stack.as_ref())?;
    report.write_accuracy_csv(&out.file("accuracy.csv")?)?;
    let row = summary_row(t.name, t.model, blocks, &report);
    write_summary(&out.file("summary.csv")?, std::slice::from_ref(&row))?;
    out.write_json("report.json", &report)?;
    println!("{} {}: train {:.4}  test {:.4}", t.name, t.model, row.train_accuracy, row.test_accuracy);
    out.finish("bench")?;
    Ok(Outcome::Done)
}

fn summary_row(task: BenchmarkTask, model: BenchModel, blocks: Option<usize>, r: &TrainReport) -> SummaryRow {
    SummaryRow {
        task: task.to_string(),
        model: model.to_string(),
        blocks,
        train_accuracy: r.final_train_accuracy,
        test_accuracy: r.final_test_accuracy,
    }
}

fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Loads data for `task`, builds `model` and trains it.
pub fn run_cell(cfg: &RunConfig, task: BenchmarkTask, model: BenchModel, stack: Option<&ClonedStack>) -> Result<TrainReport> {
    let (train, test) = load_task_data(&cfg.task, task, cfg.seeds.transform, cfg.seeds.split)
        .with_context(|| format!("loading digits from {}", cfg.task.data_dir.display()))?;
    let mut rng = SeededRng::new(cfg.seeds.init);
    let mut m = build_bench_model(model, task, &cfg.task, stack, &mut rng)?;
    Ok(train_on_task(m.as_mut(), &train, &test, model.mode(), &cfg.train, cfg.seeds.train)?)
}

/// Cloned variants in the results grid: kind, blocks.
fn table_students(c4: bool) -> [(StudentKind, usize); 3] {
    if c4 {
        [(StudentKind::Mlp2gcnn, 9), (StudentKind::Mlp2gcnnApprox, 8), (StudentKind::Mlp2gcnnApprox, 7)]
    } else {
        [(StudentKind::Blockmlp9, 9), (StudentKind::BlockmlpApprox, 8), (StudentKind::BlockmlpApprox, 7)]
    }
}

fn stack_for(
    cfg: &RunConfig,
    kind: StudentKind,
    blocks: usize,
    dir: Option<&Path>,
    out: &mut OutputDir,
    cache: &mut BTreeMap<String, ClonedStack>,
) -> Result<ClonedStack> {
    let name = format!("{kind}-{blocks}.ckpt");
    if let Some(s) = cache.get(&name) {
        return Ok(s.clone());
    }
    let existing = dir.map(|d| d.join(&name)).filter(|p| p.exists());
    let stack = match existing {
        Some(p) => load_stack(&p, Some(kind))?.0,
        None => {
            let teacher = if kind.is_c4() { TeacherKind::Lifting } else { TeacherKind::Conv };
            let grids = ClassifierSpec {
                family: kind.family(),
                grid: cfg.task.grid,
                channels: cfg.task.channels.clone(),
                pool_between: cfg.task.pool_between,
                padding: cfg.task.padding,
                classes: 10,
            }
            .grids();
            let started = Instant::now();
            let (stack, reports) = clone_stack(kind, blocks, &grids, teacher, cfg.teacher.padding, &cfg.clone, cfg.seeds.init)?;
            let rel: Vec<String> = reports.iter().map(|r| format!("{:.1e}", r.final_rel_mse)).collect();
            println!(
                "cloned {kind} ({blocks} blocks) on grids {grids:?} in {:.0}s; converged {}, rel mse [{}]",
                started.elapsed().as_secs_f64(),
                reports.iter().all(|r| r.converged),
                rel.join(", ")
            );
            let path = out.file(&format!("stacks/{name}"))?;
            save_stack(&path, &stack, cfg.seeds.init)?;
            stack
        }
    };
    cache.insert(name, stack.clone());
    Ok(stack)
}

fn cell_label(model: BenchModel, blocks: Option<usize>) -> String {
    match blocks {
        Some(b) => format!("{model}-{b}"),
        None => model.to_string(),
    }
}

/// Runs every cell of the results grid; freeze rows are also run on the symmetry-breaking
/// tasks.
fn run_all(cfg: &RunConfig, stacks: Option<&Path>) -> Result<Outcome> {
    let mut out = OutputDir::create(&cfg.output.dir)?;
    out.write_config(cfg)?;
    let mut cache = BTreeMap::new();
    let mut rows = Vec::new();
    for task in BenchmarkTask::ALL {
        let conv = if task.is_c4() { BenchModel::Gcnn } else { BenchModel::Cnn };
        let mut cells: Vec<(BenchModel, Option<(StudentKind, usize)>)> = vec![(BenchModel::Mlp, None), (conv, None)];
        for s in table_students(task.is_c4()) {
            cells.push((BenchModel::ClonedFreeze, Some(s)));
        }
        cells.push((BenchModel::ClonedUnfreeze, Some(table_students(task.is_c4())[0])));
        for (model, student) in cells {
            let stack = student.map(|(k, b)| stack_for(cfg, k, b, stacks, &mut out, &mut cache)).transpose()?;
            let blocks = student.map(|(_, b)| b);
            let started = Instant::now();
            let report = run_cell(cfg, task, model, stack.as_ref())?;
            let label = cell_label(model, blocks);
            report.write_accuracy_csv(&out.file(&format!("{task}/{label}.csv"))?)?;
            let row = summary_row(task, model, blocks, &report);
            println!(
                "{task:<9} {label:<18} test {:.4}  ({:.0}s)",
                row.test_accuracy,
                started.elapsed().as_secs_f64()
            );
            rows.push(row);
        }
    }
    write_summary(&out.file("summary.csv")?, &rows)?;
    let table = render_table(&rows);
    out.write_text("results_table.md", &table)?;
    print!("{table}");
    out.finish("bench --all")?;
    Ok(Outcome::Done)
}

/// Test accuracies (percent), one row per model and one column per task.
pub fn render_table(rows: &[SummaryRow]) -> String {
    let get = |task: BenchmarkTask, model: BenchModel, blocks: Option<usize>| {
        rows.iter()
            .find(|r| r.task == task.as_str() && r.model == model.as_str() && r.blocks == blocks)
            .map_or("-".to_string(), |r| format!("{:.2}", 100.0 * r.test_accuracy))
    };
    let mut s = String::new();
    let _ = writeln!(s, "| Model | T2 symmetric | T2 breaking | Model | C4 symmetric | C4 breaking |");
    let _ = writeln!(s, "|---|---:|---:|---|---:|---:|");
    let mut line = |left: &str, lm: BenchModel, right: &str, rm: BenchModel, blocks: Option<usize>| {
        let _ = writeln!(
            s,
            "| {left} | {} | {} | {right} | {} | {} |",
            get(BenchmarkTask::T2Sym, lm, blocks),
            get(BenchmarkTask::T2Break, lm, blocks),
            get(BenchmarkTask::C4Sym, rm, blocks),
            get(BenchmarkTask::C4Break, rm, blocks),
        );
    };
    line("MLP", BenchModel::Mlp, "MLP", BenchModel::Mlp, None);
    line("CNN", BenchModel::Cnn, "GCNN", BenchModel::Gcnn, None);
    for b in [9, 8, 7] {
        line(
            &format!("mlp2cnn freeze, {b} blocks"),
            BenchModel::ClonedFreeze,
            &format!("mlp2gcnn freeze, {b} blocks"),
            BenchModel::ClonedFreeze,
            Some(b),
        );
    }
    line("mlp2cnn unfreeze", BenchModel::ClonedUnfreeze, "mlp2gcnn unfreeze", BenchModel::ClonedUnfreeze, Some(9));
    s
}


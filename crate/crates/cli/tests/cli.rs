use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use symclone_core::agnostic::{Combiner, StudentKind, StudentLayer};
use symclone_core::cloning::TeacherKind;
use symclone_core::data::{save_stack, ClonedStack, LayerMeta};
use symclone_core::metrics::toeplitz_unroll;
use symclone_core::{PaddingMode, SeededRng, Tensor};

fn symclone(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_symclone")).args(args).output().expect("spawn symclone")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn fixture_config(dir: &Path) -> PathBuf {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures");
    let text = format!(
        "[task]\ndata_dir = {:?}\nimages_file = \"mnist512-images-idx3-ubyte\"\nlabels_file = \"mnist512-labels-idx1-ubyte\"\nchannels = [4]\n\n[train]\nepochs = 1\n",
        fixtures.display().to_string()
    );
    let p = dir.join("fixture.toml");
    fs::write(&p, text).unwrap();
    p
}

fn toeplitz_error_of(csv_path: &Path) -> f64 {
    let mut r = csv::Reader::from_path(csv_path).unwrap();
    let headers = r.headers().unwrap().clone();
    let col = headers.iter().position(|h| h == "toeplitz_error").unwrap();
    let row = r.records().next().unwrap().unwrap();
    row[col].parse().unwrap()
}

/// A planar stack on a 5x5 grid whose blocks are `select(k)` for every tap.
fn planar_stack(dir: &Path, select: impl Fn(usize, &Tensor<f32>) -> Vec<f32>) -> PathBuf {
    let grid = 5;
    let oracle = toeplitz_unroll(grid, grid, PaddingMode::ZeroFill).unwrap();
    let mut layer = StudentKind::Blockmlp9.build::<f32>(grid, 9, &mut SeededRng::new(1)).unwrap();
    let StudentLayer::Planar(l) = &mut layer else { unreachable!() };
    let data: Vec<f32> = oracle.selectors::<f32>().iter().enumerate().flat_map(|(k, p)| select(k, p)).collect();
    let shape = l.blocks.value.shape().to_vec();
    l.blocks.set_value(Tensor::new(shape, data).unwrap()).unwrap();
    let stack = ClonedStack {
        kind: StudentKind::Blockmlp9,
        layers: vec![layer],
        meta: vec![LayerMeta {
            grid,
            blocks: 9,
            combiner: Combiner::Direct,
            teacher: TeacherKind::Conv,
            padding: PaddingMode::ZeroFill,
        }],
    };
    let p = dir.join("stack.ckpt");
    save_stack(&p, &stack, 1).unwrap();
    p
}

#[test]
fn unknown_student_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = symclone(&["clone", "--student", "blockmlp99", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("student.kind"), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[clone]\nmax_stpes = 10\n").unwrap();
    let o = symclone(&["clone", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("max_stpes"), "{}", stderr(&o));
}

#[test]
fn exhausted_step_budget_exits_3_but_keeps_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = symclone(&["clone", "--grids", "5", "--max-steps", "1", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    for f in ["stack.ckpt", "layer0_loss.csv", "report.json", "config.toml", "manifest.json"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
}

#[test]
fn cloned_model_without_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = symclone(&["bench", "--model", "cloned-freeze", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("task.checkpoint"), "{}", stderr(&o));
}

#[test]
fn toeplitz_inspection_scores_exact_and_empty_stacks() {
    let dir = tempfile::tempdir().unwrap();
    let exact = planar_stack(dir.path(), |_, p| p.data().to_vec());
    let out = dir.path().join("exact");
    let o = symclone(&["inspect-toeplitz", "--checkpoint", exact.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(toeplitz_error_of(&out.join("toeplitz.csv")) < 1e-12);
    for f in ["learned.pgm", "oracle.pgm", "comparison.pgm"] {
        assert!(out.join(f).exists(), "missing {f}");
    }

    let zero = planar_stack(dir.path(), |_, p| vec![0.0; p.len()]);
    let out = dir.path().join("zero");
    let o = symclone(&["inspect-toeplitz", "--checkpoint", zero.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!((toeplitz_error_of(&out.join("toeplitz.csv")) - 1.0).abs() < 1e-12);
}

#[test]
fn c4_checkpoint_is_not_a_toeplitz_candidate() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("clone");
    let o = symclone(&[
        "clone", "--student", "mlp2gcnn", "--teacher", "lifting", "--grids", "4", "--max-steps", "1", "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    let ckpt = out.join("stack.ckpt");
    let o = symclone(&["inspect-toeplitz", "--checkpoint", ckpt.to_str().unwrap(), "--out", dir.path().join("t").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("blockmlp9"), "{}", stderr(&o));
}

#[test]
fn cloned_checkpoint_feeds_every_consumer() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let cloned = dir.path().join("clone");
    let o = symclone(&["clone", "--config", cfg, "--grids", "14", "--out", cloned.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ckpt = cloned.join("stack.ckpt");
    let ckpt = ckpt.to_str().unwrap();

    let bench = dir.path().join("bench");
    let o = symclone(&["bench", "--config", cfg, "--model", "cloned-unfreeze", "--checkpoint", ckpt, "--out", bench.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary = fs::read_to_string(bench.join("summary.csv")).unwrap();
    assert!(summary.starts_with("task,model,blocks,train_accuracy,test_accuracy\nt2-sym,cloned-unfreeze,9,"), "{summary}");

    let o = symclone(&["inspect-toeplitz", "--config", cfg, "--checkpoint", ckpt, "--out", dir.path().join("t").to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(toeplitz_error_of(&dir.path().join("t/toeplitz.csv")) < 0.2);

    let eval = dir.path().join("eval");
    let o = symclone(&["eval-equiv", "--checkpoint", ckpt, "--samples", "20", "--out", eval.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = fs::read_to_string(eval.join("equivariance.csv")).unwrap();
    assert_eq!(table.lines().count(), 4, "{table}");

    let maps = dir.path().join("maps");
    let o = symclone(&["export-maps", "--config", cfg, "--checkpoint", ckpt, "--out", maps.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(maps.join("maps/teacher_input0.pgm").exists());
    assert!(maps.join("maps/stack_blockmlp9_input1.pgm").exists());

    // A checkpoint cloned on another grid cannot be assembled into the classifier.
    let small = dir.path().join("small");
    let o = symclone(&["clone", "--grids", "5", "--max-steps", "1", "--out", small.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    let o = symclone(&[
        "bench", "--config", cfg, "--model", "cloned-freeze", "--checkpoint", small.join("stack.ckpt").to_str().unwrap(), "--out",
        dir.path().join("b2").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn outputs_are_listed_in_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = symclone(&["clone", "--grids", "4", "--max-steps", "200", "--out", out.to_str().unwrap()]);
    assert!(matches!(code(&o), 0 | 3), "{}", stderr(&o));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "clone");
    let files = manifest["files"].as_array().unwrap();
    for f in files {
        let bytes = fs::read(out.join(f["path"].as_str().unwrap())).unwrap();
        assert_eq!(f["bytes"].as_u64().unwrap(), bytes.len() as u64);
        assert_eq!(f["sha256"].as_str().unwrap().len(), 64);
    }
    assert!(files.iter().any(|f| f["path"] == "stack.ckpt"));
}

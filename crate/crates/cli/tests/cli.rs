use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use seaflow::datagen::{regenerate_scene, reprojection_error, DataConfig, DataMode, SampleMeta};
use seaflow::flow::FlowField;
use seaflow::flowio::{read_flo, read_ppm, write_ppm, Image};
use seaflow::trainer::{TrainConfig, TrainState};
use tempfile::TempDir;

const TINY: &str = r#"
steps = 4
batch = 2
lr = 1e-3
seed = 3
train_pairs = 3
holdout_pairs = 2
checkpoint_every = 2

[model]
feature_dim = 8
hidden_dim = 8
context_dim = 8
motion_dim = 16
levels = 2
radius = 2
rnn_blocks = 1
iterations = 2
inference_iterations = 3

[data]
mode = "affine"
height = 16
width = 16
max_disp = 2.0
"#;

fn seaflow(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seaflow"))
        .args(args)
        .env("SEAFLOW_OUTPUT_ROOT", root)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], root: &Path) -> Output {
    let out = seaflow(args, root);
    assert!(
        out.status.success(),
        "seaflow {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("tiny.toml");
    fs::write(&p, text).unwrap();
    p
}

fn train_tiny(tmp: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let cfg = write_config(tmp, TINY);
    let out = tmp.join(name);
    let mut args = vec!["train", "--config", s(&cfg), "--out", s(&out)];
    args.extend_from_slice(extra);
    ok(&args, tmp);
    out
}

fn listing(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap())
        .filter(|e| e.file_name() != "run.json")
        .map(|e| (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn gen_is_deterministic_and_complete() {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path();
    for name in ["a", "b"] {
        let out = root.join(name);
        ok(
            &["gen", "--count", "10", "--seed", "7", "--height", "16", "--width", "24", "--out", s(&out)],
            root,
        );
    }
    let (a, b) = (listing(&root.join("a")), listing(&root.join("b")));
    assert_eq!(a, b);
    // 10 triples, their metadata, and the dataset listing.
    assert_eq!(a.iter().filter(|(n, _)| n.ends_with("_flow.flo")).count(), 10);
    assert_eq!(a.iter().filter(|(n, _)| n.ends_with(".ppm")).count(), 20);
    assert_eq!(a.len(), 41);
    let listing = fs::read_to_string(root.join("a/dataset.toml")).unwrap();
    assert_eq!(listing.matches("[[sample]]").count(), 10);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(root.join("a/run.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "gen");
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn gen_refuses_a_nonempty_directory() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("d");
    ok(&["gen", "--count", "1", "--height", "16", "--width", "16", "--out", s(&out)], tmp.path());
    let again = seaflow(&["gen", "--count", "1", "--out", s(&out)], tmp.path());
    assert_eq!(again.status.code(), Some(3));
}

#[test]
fn gen_defaults_to_a_run_directory_under_the_output_root() {
    let tmp = TempDir::new().unwrap();
    ok(&["gen", "--count", "1", "--height", "16", "--width", "16"], tmp.path());
    let dirs: Vec<_> = fs::read_dir(tmp.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(dirs.len(), 1);
    assert!(dirs[0].to_str().unwrap().starts_with("gen-"));
}

#[test]
fn gen_mode_selects_the_generator_and_rigid_files_reproject() {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path();
    let (rigid, affine) = (root.join("rigid"), root.join("affine"));
    for (mode, out) in [("rigid", &rigid), ("affine", &affine)] {
        ok(
            &["gen", "--count", "3", "--seed", "2", "--mode", mode, "--height", "24", "--width", "32", "--out", s(out)],
            root,
        );
    }
    let cfg = DataConfig {
        mode: DataMode::Rigid,
        height: 24,
        width: 32,
        ..DataConfig::default()
    };
    for i in 0..3 {
        let meta: SampleMeta =
            serde_json::from_str(&fs::read_to_string(rigid.join(format!("{i:06}_meta.json"))).unwrap()).unwrap();
        let affine_meta: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(affine.join(format!("{i:06}_meta.json"))).unwrap()).unwrap();
        assert_eq!(affine_meta["motion"]["kind"], "affine");
        let flow: FlowField<f64> = read_flo(&rigid.join(format!("{i:06}_flow.flo"))).unwrap();
        let scene = regenerate_scene(&cfg, meta.seed);
        // The file stores f32, so the identity holds to single precision.
        let err = reprojection_error(&scene, &flow);
        assert!(err < 1e-4, "sample {i}: reprojection error {err}");
    }
}

#[test]
fn unknown_config_field_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "steps = 1\nlearning_rate = 0.1\n");
    let out = seaflow(&["train", "--config", s(&cfg), "--out", s(&tmp.path().join("r"))], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("learning_rate"), "{err}");
    assert!(err.contains("tiny.toml"), "{err}");
}

#[test]
fn zero_steps_writes_an_initialized_checkpoint_only() {
    let tmp = TempDir::new().unwrap();
    let run = train_tiny(tmp.path(), "r", &["--steps", "0"]);
    assert!(run.join("checkpoint.bin").exists());
    assert_eq!(fs::read_to_string(run.join("metrics.csv")).unwrap(), "step,loss,epe,px1,fl,wauc\n");
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("run.json")).unwrap()).unwrap();
    let effective = TrainConfig::from_toml(manifest["effective_config"].as_str().unwrap()).unwrap();
    assert_eq!(effective.steps, 0);
    assert_eq!(manifest["config_hash"].as_str().unwrap(), effective.hash());
}

#[test]
fn flags_override_the_config_file() {
    let tmp = TempDir::new().unwrap();
    let run = train_tiny(tmp.path(), "r", &["--steps", "1", "--seed", "11"]);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("run.json")).unwrap()).unwrap();
    let effective = TrainConfig::from_toml(manifest["effective_config"].as_str().unwrap()).unwrap();
    assert_eq!((effective.steps, effective.seed, effective.batch), (1, 11, 2));
}

#[test]
fn resume_after_interrupt_reproduces_the_uninterrupted_run() {
    let tmp = TempDir::new().unwrap();
    let full = train_tiny(tmp.path(), "full", &[]);
    let part = train_tiny(tmp.path(), "part", &["--stop-after", "3"]);
    let partial_log = fs::read_to_string(part.join("metrics.csv")).unwrap();
    assert_eq!(partial_log.lines().count(), 4);
    // Stopping saves a checkpoint at step 3; resuming appends the remaining row.
    ok(&["train", "--resume", "--out", s(&part)], tmp.path());
    assert_eq!(
        fs::read_to_string(full.join("metrics.csv")).unwrap(),
        fs::read_to_string(part.join("metrics.csv")).unwrap()
    );
    assert_eq!(fs::read(full.join("checkpoint.bin")).unwrap(), fs::read(part.join("checkpoint.bin")).unwrap());
}

#[test]
fn resume_with_a_different_config_is_refused() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let run = train_tiny(tmp.path(), "r", &["--stop-after", "2"]);
    let out = seaflow(&["train", "--resume", "--config", s(&cfg), "--lr", "0.5", "--out", s(&run)], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn init_from_loads_weights_with_fresh_moments() {
    let tmp = TempDir::new().unwrap();
    let src = train_tiny(tmp.path(), "src", &[]);
    let src_ckpt = src.join("checkpoint.bin");
    let dst = train_tiny(tmp.path(), "dst", &["--steps", "0", "--init-from", s(&src_ckpt)]);
    let cfg_src = TrainConfig::from_toml(TINY).unwrap();
    let cfg_dst = TrainConfig { steps: 0, ..cfg_src.clone() };
    let a = TrainState::<f32>::load(&cfg_src, &src_ckpt).unwrap();
    let b = TrainState::<f32>::load(&cfg_dst, &dst.join("checkpoint.bin")).unwrap();
    assert_eq!(a.model.named_weights(), b.model.named_weights());
    assert_eq!(b.step, 0);
    assert!(b.opt.m.iter().chain(&b.opt.v).all(|t| t.data().iter().all(|&x| x == 0.0)));
    assert!(a.opt.m.iter().any(|t| t.data().iter().any(|&x| x != 0.0)));
}

fn textured(h: usize, w: usize, shift: f32) -> Image {
    Image::from_fn(h, w, |y, x| {
        let (x, y) = (x as f32 + shift, y as f32);
        [(0.3 * x).sin() * 0.5 + 0.5, (0.2 * y).cos() * 0.5 + 0.5, ((x + y) * 0.1).sin() * 0.5 + 0.5]
    })
}

#[test]
fn infer_handles_odd_sizes_downsampling_and_mismatches() {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path();
    let run = train_tiny(root, "r", &["--steps", "2"]);
    let ckpt = run.join("checkpoint.bin");
    let (p1, p2, p3) = (root.join("a.ppm"), root.join("b.ppm"), root.join("c.ppm"));
    write_ppm(&textured(20, 28, 0.0), &p1).unwrap();
    write_ppm(&textured(20, 28, 1.0), &p2).unwrap();
    write_ppm(&textured(16, 16, 0.0), &p3).unwrap();
    for (down, iters, name) in [("1", "0", "i0"), ("2", "2", "d2"), ("3", "1", "d3")] {
        let out = root.join(name);
        ok(
            &["infer", "--ckpt", s(&ckpt), s(&p1), s(&p2), "--iters", iters, "--downsample", down, "--out", s(&out)],
            root,
        );
        let flow: FlowField<f64> = read_flo(&out.join("flow.flo")).unwrap();
        assert_eq!((flow.height(), flow.width()), (20, 28), "downsample {down}");
        let vis = read_ppm(&out.join("flow.ppm")).unwrap();
        assert_eq!((vis.height(), vis.width()), (20, 28));
    }
    let bad = seaflow(&["infer", "--ckpt", s(&ckpt), s(&p1), s(&p3), "--out", s(&root.join("bad"))], root);
    assert_eq!(bad.status.code(), Some(3));
}

#[test]
fn infer_on_identical_frames_with_an_untrained_model_is_white() {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path();
    let run = train_tiny(root, "r", &["--steps", "0"]);
    let p = root.join("a.ppm");
    write_ppm(&textured(16, 24, 0.0), &p).unwrap();
    let out = root.join("i");
    ok(&["infer", "--ckpt", s(&run.join("checkpoint.bin")), s(&p), s(&p), "--out", s(&out)], root);
    let vis = read_ppm(&out.join("flow.ppm")).unwrap();
    let white = vis.data().chunks(3).filter(|c| c.iter().all(|&v| v > 0.95)).count();
    assert!(white * 10 >= vis.height() * vis.width() * 9, "{white} white pixels");
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn eval_of_ground_truth_against_itself_is_perfect() {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path();
    let data = root.join("data");
    ok(&["gen", "--count", "3", "--height", "16", "--width", "16", "--out", s(&data)], root);
    let out = root.join("e");
    ok(&["eval", s(&data), "--pred", s(&data), "--error-maps", "--out", s(&out)], root);
    let rows = csv_rows(&out.join("report.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!(&rows[0][..5], ["pred", "0.000000", "0.0000", "0.0000", "100.0000"]);
    assert_eq!(rows[0][6], "0");
    assert_eq!(fs::read_dir(out.join("errors")).unwrap().count(), 3);
}

#[test]
fn eval_rows_per_iteration_count_aggregate_and_skip_missing_ground_truth() {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path();
    let data = root.join("data");
    ok(&["gen", "--count", "4", "--height", "16", "--width", "16", "--out", s(&data)], root);
    fs::remove_file(data.join("000002_flow.flo")).unwrap();
    let run = train_tiny(root, "r", &["--steps", "2"]);
    let out = root.join("e");
    let ckpt = run.join("checkpoint.bin");
    let o = ok(&["eval", s(&data), "--ckpt", s(&ckpt), "--iters", "1", "--iters", "3", "--out", s(&out)], root);
    assert!(String::from_utf8_lossy(&o.stderr).contains("000002"));
    let report = csv_rows(&out.join("report.csv"));
    let labels: Vec<&str> = report.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(labels, ["iters=1", "iters=3"]);
    assert!(report.iter().all(|r| r[6] == "1"));
    let samples = csv_rows(&out.join("samples.csv"));
    for row in &report {
        let mine: Vec<&Vec<String>> = samples.iter().filter(|r| r[0] == row[0]).collect();
        assert_eq!(mine.len(), 3);
        let n: f64 = mine.iter().map(|r| r[6].parse::<f64>().unwrap()).sum();
        let weighted: f64 =
            mine.iter().map(|r| r[2].parse::<f64>().unwrap() * r[6].parse::<f64>().unwrap()).sum::<f64>() / n;
        let agg: f64 = row[1].parse().unwrap();
        // Both sides are printed to six decimals.
        assert!((weighted - agg).abs() < 2e-6, "{weighted} vs {agg}");
    }
}

#[test]
fn eval_requires_a_source() {
    let tmp = TempDir::new().unwrap();
    let out = seaflow(&["eval", s(tmp.path())], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn ablate_tables_follow_the_reference_axes() {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path();
    let base = TINY.replace("\n[", "\n[base.").replacen("\nsteps", "\n[base]\nsteps", 1);
    let single = write_config(root, &base);
    let one = root.join("one");
    ok(&["ablate", "--config", s(&single), "--steps", "1", "--out", s(&one)], root);
    let md = fs::read_to_string(one.join("table.md")).unwrap();
    let mut lines = md.lines();
    assert_eq!(lines.next().unwrap(), "| Arm | Init. | #blocks | Loss | Seed | EPE | 1px | Fl | WAUC |");
    assert_eq!(md.lines().filter(|l| l.starts_with("| base |")).count(), 1);
    assert!(md.contains("| RAFT GRU |"));

    let arms = format!("{base}\n[[arms]]\nname = \"two blocks\"\nset = {{ model = {{ rnn_blocks = 2 }} }}\n");
    let two = root.join("two");
    let cfg = root.join("arms.toml");
    fs::write(&cfg, arms).unwrap();
    ok(&["ablate", "--config", s(&cfg), "--steps", "1", "--out", s(&two)], root);
    let rows = csv_rows(&two.join("table.csv"));
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0][10], "");
    assert_eq!(rows[1][10], "model.rnn_blocks");
    assert_eq!(rows[1][3], "2");
    assert_ne!(rows[0][9], rows[1][9]);
}

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 7

[dataset]
quadrature = 512

[dataset.rig]
count = 4
width = 12
height = 12

[network]
width = 16
scene_layers = 3
head_width = 8
empty_head_width = 8
pos_bands = 2
dir_bands = 1

[radiance]
layers = 2
width = 16
head_width = 8
pos_bands = 2
dir_bands = 1

[sampler]
samples_per_ray = 16
dense_samples = 32
coarse = 16
split = 2

[occupancy]
steps = 4
rays_per_step = 8
log_interval = 2
stats_interval = 1
checkpoint_interval = 2

[guided]
steps = 2
rays_per_step = 8
log_interval = 1
eval_interval = 1
checkpoint_interval = 2

[grid]
resolution = 8
update_interval = 2
offline_rounds = 2

[eval]
resolution = 8
cloud_image = 6
cloud_samples = 4

[bench]
resolutions = [4, 8]
rays = 8
repeats = 1
"#;

struct Run {
    _tmp: tempfile::TempDir,
    config: PathBuf,
    out: PathBuf,
}

impl Run {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path().join("out");
        let config = tmp.path().join("tiny.toml");
        let text = format!("output_dir = {:?}\n{TINY}", out.to_str().unwrap());
        std::fs::write(&config, text).unwrap();
        Self { _tmp: tmp, config, out }
    }

    fn occlab(&self, args: &[&str]) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_occlab"));
        cmd.arg("--config").arg(&self.config).args(["--threads", "1"]).args(args);
        cmd.env("RUST_LOG", "warn").output().unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.occlab(args);
        assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&read(path)).unwrap()
}

#[test]
fn missing_config_file_exits_with_usage_code() {
    let out = Command::new(env!("CARGO_BIN_EXE_occlab"))
        .args(["--config", "/nonexistent/occlab.toml", "generate-scene"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_config_key_and_bad_flags_exit_with_usage_code() {
    let run = Run::new();
    assert_eq!(run.occlab(&["--set", "occupancy.stepz=3", "generate-scene"]).status.code(), Some(2));
    assert_eq!(run.occlab(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(run.occlab(&["train-guided", "--mode", "sparse"]).status.code(), Some(2));
}

#[test]
fn commands_needing_artifacts_fail_cleanly() {
    let run = Run::new();
    assert_eq!(run.occlab(&["train-occupancy"]).status.code(), Some(2));
    run.ok(&["generate-scene"]);
    assert_eq!(run.occlab(&["train-guided", "--mode", "network"]).status.code(), Some(2));
    assert_eq!(run.occlab(&["eval"]).status.code(), Some(2));
    assert_eq!(run.occlab(&["render", "--checkpoint", "missing.json"]).status.code(), Some(2));
}

#[test]
fn generate_scene_refuses_to_overwrite_without_force() {
    let run = Run::new();
    run.ok(&["generate-scene"]);
    let manifest = read(&run.path("dataset/manifest.json"));
    assert_eq!(json(&run.path("dataset/manifest.json"))["frames"].as_array().unwrap().len(), 4);
    assert_eq!(run.occlab(&["generate-scene"]).status.code(), Some(2));
    run.ok(&["generate-scene", "--force"]);
    assert_eq!(read(&run.path("dataset/manifest.json")), manifest);
}

#[test]
fn zero_steps_leaves_only_the_initial_checkpoint() {
    let run = Run::new();
    run.ok(&["generate-scene"]);
    run.ok(&["--set", "occupancy.steps=0", "train-occupancy"]);
    let names: Vec<String> = std::fs::read_dir(run.path("occupancy/checkpoints"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert_eq!(names, ["step_000000.json"]);
    let loss = String::from_utf8(read(&run.path("occupancy/loss.csv"))).unwrap();
    assert_eq!(loss.lines().count(), 1);
}

#[test]
fn divergent_training_exits_with_numerical_code_and_keeps_last_good() {
    let run = Run::new();
    run.ok(&["generate-scene"]);
    let out = run.occlab(&["--set", "optimizer.lr=1e300", "train-occupancy"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let last = json(&run.path("occupancy/last_good.json"));
    assert_eq!(last["format"], "occlab-params");
}

#[test]
fn full_pipeline_on_a_tiny_scene() {
    let run = Run::new();
    run.ok(&["generate-scene"]);
    run.ok(&["train-occupancy"]);

    let loss = String::from_utf8(read(&run.path("occupancy/loss.csv"))).unwrap();
    assert_eq!(loss.lines().count(), 1 + 4 / 2, "one row per log interval");
    let stats = String::from_utf8(read(&run.path("occupancy/stats.csv"))).unwrap();
    assert_eq!(stats.lines().count(), 1 + 4);
    for step in [0, 2, 4] {
        assert!(run.path(&format!("occupancy/checkpoints/step_{step:06}.json")).exists());
    }
    let manifest = json(&run.path("occupancy/run.json"));
    assert_eq!(manifest["config"]["seed"], 7);
    assert_eq!(manifest["config"]["loss"]["v"], 8);
    assert!(manifest["inputs"]["dataset/manifest.json"].as_str().unwrap().len() == 64);
    let ckpt = json(&run.path("occupancy/occupancy.json"));
    assert_eq!(ckpt["meta"]["config"], manifest["config"]);

    // Same config and seed: byte-identical metrics and checkpoints.
    let before: Vec<Vec<u8>> =
        ["occupancy/loss.csv", "occupancy/stats.csv", "occupancy/occupancy.json", "occupancy/grid.bin"]
            .iter()
            .map(|f| read(&run.path(f)))
            .collect();
    run.ok(&["train-occupancy"]);
    for (f, b) in ["loss.csv", "stats.csv", "occupancy.json", "grid.bin"].iter().zip(&before) {
        assert_eq!(&read(&run.path(&format!("occupancy/{f}"))), b, "{f} differs on rerun");
    }

    for mode in ["network", "grid", "dense"] {
        run.ok(&["train-guided", "--mode", mode]);
        let dir = format!("guided/{mode}");
        let psnr = String::from_utf8(read(&run.path(&format!("{dir}/psnr.csv")))).unwrap();
        assert_eq!(psnr.lines().count(), 1 + 2, "one psnr row per eval interval");
        assert!(run.path(&format!("{dir}/radiance.json")).exists());
    }
    let summary = json(&run.path("guided/network/summary.json"));
    assert_eq!(summary["occupancy_hash_before"], summary["occupancy_hash_after"]);
    assert!(summary["occupancy_hash_before"].is_string());
    let dense = json(&run.path("guided/dense/summary.json"));
    assert_eq!(dense["field_points_per_ray"], 32.0);

    run.ok(&["train-grid-baseline"]);
    assert!(run.path("grid_baseline/grid.bin").exists());

    let ckpt = run.path("guided/network/radiance.json");
    let c = ckpt.to_str().unwrap();
    run.ok(&["eval", "--compare", c, c]);
    let table = String::from_utf8(read(&run.path("eval/table.csv"))).unwrap();
    let mut lines = table.lines();
    assert_eq!(lines.next().unwrap(), "method,accuracy,precision,recall,f1,param_number,occupancy_ratio");
    let methods: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(methods, ["occupancy_network", "grid_tracked_r8", "grid_offline_r8"]);
    let compare = String::from_utf8(read(&run.path("eval/compare.csv"))).unwrap();
    assert!(compare.lines().skip(1).all(|l| l.ends_with(",inf")), "{compare}");
    assert!(run.path("eval/pointcloud/scene.ply").exists());
    assert!(run.path("eval/depth_check.json").exists());
    let first: Vec<Vec<u8>> = ["table.csv", "psnr.csv", "report.json"].iter().map(|f| read(&run.path(&format!("eval/{f}")))).collect();
    run.ok(&["eval", "--compare", c, c]);
    for (f, b) in ["table.csv", "psnr.csv", "report.json"].iter().zip(&first) {
        assert_eq!(&read(&run.path(&format!("eval/{f}"))), b, "eval {f} not idempotent");
    }

    run.ok(&["bench"]);
    let bench = json(&run.path("bench/bench.json"));
    let modes: Vec<&str> = bench["timings"].as_array().unwrap().iter().map(|t| t["mode"].as_str().unwrap()).collect();
    assert_eq!(modes, ["dense", "network_guided", "grid_guided", "grid_guided"]);
    let memory = bench["memory"].as_array().unwrap();
    assert_eq!(memory[1]["entries"], 64);
    assert_eq!(memory[2]["entries"], 512);
    let csv = String::from_utf8(read(&run.path("bench/bench.csv"))).unwrap();
    assert_eq!(csv.lines().filter(|l| l.starts_with("timing,")).count(), 4);

    let out = run.ok(&["export-pointcloud"]);
    assert!(out.starts_with("scene points"));
    let ply = String::from_utf8(read(&run.path("pointcloud/empty.ply"))).unwrap();
    assert!(ply.starts_with("ply\nformat ascii 1.0\n"));

    let occ = run.path("occupancy/occupancy.json");
    run.ok(&["render", "--checkpoint", occ.to_str().unwrap(), "--frame", "1"]);
    for ext in ["png", "ppm", "depth"] {
        assert!(run.path(&format!("render/occupancy_frame_001.{ext}")).exists());
    }
    assert_eq!(run.occlab(&["render", "--checkpoint", occ.to_str().unwrap(), "--frame", "9"]).status.code(), Some(2));
}

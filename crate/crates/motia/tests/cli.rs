use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use motia::checkpoint::encode_base;
use motia::config::RunConfig;
use motia::manifest::OutpaintManifest;
use motia::vtn::{load_vtn, save_vtn};
use motia_core::data::Video;
use motia_core::denoiser::DenoiserNet;
use motia_core::outpaint::{Expansion, OutpaintSpec};
use serde_json::Value;
use tempfile::TempDir;

const SMALL: &str = r#"{
  "schedule": {"steps": 100},
  "denoiser": {
    "architecture": {"width": 4, "blocks": 1, "embed_dim": 4, "channels": 1, "groups": 2},
    "pretrain": {"steps": 4, "corpus": {"frames": 4, "height": 8, "width": 8, "max_size": 3}}
  },
  "adapt": {"iterations": 5, "rank": 2, "clip_length": 4},
  "sampler": {"steps": 6, "guidance_window": 3},
  "oracle": {"samples": 200, "steps": 10}
}"#;

struct Run {
    code: i32,
    stderr: String,
}

fn motia(args: &[&str]) -> Run {
    let out = Command::new(env!("CARGO_BIN_EXE_motia"))
        .args(args)
        .env("MOTIA_THREADS", "1")
        .output()
        .expect("binary runs");
    Run {
        code: out.status.code().expect("exit code"),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

fn ok(args: &[&str]) {
    let r = motia(args);
    assert_eq!(r.code, 0, "{args:?}: {}", r.stderr);
}

struct Work {
    dir: TempDir,
}

impl Work {
    fn new() -> Self {
        let w = Self { dir: tempfile::tempdir().unwrap() };
        fs::write(w.path("small.json"), SMALL).unwrap();
        w
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }

    fn video(&self, name: &str, seed: &str) -> String {
        ok(&["gen-data", "--frames", "4", "--size", "8", "--seed", seed, "--out", &self.s(name)]);
        self.s(name)
    }

    fn base(&self, name: &str) -> String {
        ok(&["pretrain", "--config", &self.s("small.json"), "--seed", "3", "--out", &self.s(name)]);
        self.s(name)
    }

    fn adapters(&self, name: &str, video: &str, base: &str) -> String {
        ok(&["adapt", "--config", &self.s("small.json"), "--video", video, "--base", base, "--out", &self.s(name)]);
        self.s(name)
    }
}

fn bytes(p: impl AsRef<Path>) -> Vec<u8> {
    fs::read(p).unwrap()
}

fn manifest_without_time(p: impl AsRef<Path>) -> Value {
    let mut v: Value = serde_json::from_slice(&bytes(p)).unwrap();
    v.as_object_mut().unwrap().remove("wall_time_seconds").expect("wall time recorded");
    v
}

fn csv_rows(p: impl AsRef<Path>) -> Vec<Vec<String>> {
    String::from_utf8(bytes(p))
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_owned).collect())
        .collect()
}

#[test]
fn usage_errors_exit_two() {
    let w = Work::new();
    assert_eq!(motia(&["gen-data", "--frames", "0", "--out", &w.s("v.vtn")]).code, 2);
    assert_eq!(motia(&["gen-data"]).code, 2);
    assert_eq!(motia(&["no-such-command"]).code, 2);
    assert_eq!(motia(&["outpaint", "--expand", "middle=3", "--out", &w.s("o.vtn")]).code, 2);
    let r = motia(&["pretrain", "--steps", "0"]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("--out"), "{}", r.stderr);
    assert!(!w.path("v.vtn").exists());
}

#[test]
fn data_errors_exit_one() {
    let w = Work::new();
    let video = w.video("v.vtn", "1");
    fs::write(w.path("junk.mbas"), b"not a checkpoint").unwrap();
    let r = motia(&["adapt", "--video", &video, "--base", &w.s("junk.mbas"), "--out", &w.s("a.mlra")]);
    assert_eq!(r.code, 1, "{}", r.stderr);

    let base = w.base("b.mbas");
    let mut flipped = bytes(&base);
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x40;
    fs::write(w.path("flipped.mbas"), flipped).unwrap();
    let r = motia(&["adapt", "--video", &video, "--base", &w.s("flipped.mbas"), "--out", &w.s("a.mlra")]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.to_lowercase().contains("crc"), "{}", r.stderr);

    fs::write(w.path("typo.json"), r#"{"sampler": {"stepz": 3}}"#).unwrap();
    let r = motia(&["pretrain", "--config", &w.s("typo.json"), "--out", &w.s("b2.mbas")]);
    assert_eq!(r.code, 1, "{}", r.stderr);
    assert_eq!(motia(&["eval", "--pred", &w.s("missing.vtn"), "--ref", &video, "--out", &w.s("m.csv")]).code, 1);
}

#[test]
fn gen_data_defaults_and_reproducibility() {
    let w = Work::new();
    ok(&["gen-data", "--out", &w.s("d.vtn")]);
    assert_eq!(load_vtn(&w.path("d.vtn")).unwrap().tensor().shape(), &[16, 1, 32, 32]);
    ok(&["gen-data", "--frames", "16", "--size", "32", "--seed", "1", "--out", &w.s("a.vtn"), "--frames-dir", &w.s("fa")]);
    ok(&["gen-data", "--frames", "16", "--size", "32", "--seed", "1", "--out", &w.s("b.vtn"), "--frames-dir", &w.s("fb")]);
    assert_eq!(bytes(w.path("a.vtn")), bytes(w.path("b.vtn")));
    assert_eq!(bytes(w.path("fa/frame_00007.pgm")), bytes(w.path("fb/frame_00007.pgm")));
    ok(&["gen-data", "--seed", "2", "--out", &w.s("c.vtn")]);
    assert_ne!(bytes(w.path("a.vtn")), bytes(w.path("c.vtn")));
}

#[test]
fn pretrain_zero_steps_is_the_initialization() {
    let w = Work::new();
    ok(&["pretrain", "--config", &w.s("small.json"), "--steps", "0", "--seed", "9", "--out", &w.s("z.mbas")]);
    let cfg = RunConfig::from_json(SMALL).unwrap();
    let init = DenoiserNet::build(cfg.denoiser.architecture.clone(), 9).unwrap();
    assert_eq!(bytes(w.path("z.mbas")), encode_base(&init));
}

#[test]
fn pretrain_and_adapt_are_byte_reproducible() {
    let w = Work::new();
    let video = w.video("v.vtn", "4");
    let a = w.base("a.mbas");
    let b = w.base("b.mbas");
    assert_eq!(bytes(&a), bytes(&b));
    ok(&["pretrain", "--config", &w.s("small.json"), "--seed", "3", "--out", &w.s("c.mbas"), "--loss-csv", &w.s("c.csv")]);
    assert_eq!(bytes(&a), bytes(w.path("c.mbas")));
    assert_eq!(csv_rows(w.path("c.csv")).len(), 1 + 4);

    let x = w.adapters("x.mlra", &video, &a);
    let y = w.adapters("y.mlra", &video, &a);
    assert_eq!(bytes(&x), bytes(&y));
    assert_eq!(bytes(w.path("x.csv")), bytes(w.path("y.csv")));
    let rows = csv_rows(w.path("x.csv"));
    assert_eq!(rows[0], ["iteration", "loss"]);
    assert_eq!(rows.len() - 1, 5);

    ok(&["adapt", "--config", &w.s("small.json"), "--video", &video, "--base", &a, "--out", &w.s("n.mlra"), "--iterations", "7", "--loss-csv", &w.s("n_loss.csv")]);
    assert_eq!(csv_rows(w.path("n_loss.csv")).len() - 1, 7);
}

#[test]
fn outpaint_runs_and_manifests() {
    let w = Work::new();
    let video = w.video("v.vtn", "5");
    let base = w.base("b.mbas");
    let adapters = w.adapters("a.mlra", &video, &base);
    let cfg = w.s("small.json");

    for name in ["o1", "o2"] {
        ok(&["outpaint", "--config", &cfg, "--video", &video, "--base", &base, "--adapters", &adapters, "--expand", "left=2,right=1", "--seed", "6", "--out", &w.s(&format!("{name}.vtn"))]);
    }
    assert_eq!(bytes(w.path("o1.vtn")), bytes(w.path("o2.vtn")));
    assert_eq!(manifest_without_time(w.path("o1.json")), manifest_without_time(w.path("o2.json")));

    let m: OutpaintManifest = serde_json::from_slice(&bytes(w.path("o1.json"))).unwrap();
    assert_eq!(m.source_shape, [4, 1, 8, 8]);
    assert_eq!(m.output_shape, [4, 1, 8, 11]);
    assert!(!m.base_only && !m.identity);
    assert_eq!(m.seed, 6);
    assert_eq!(m.config.sampler.seed, 6);
    assert_eq!(m.config.sampler.steps, 6);
    assert!(m.wall_time_seconds >= 0.0);

    ok(&["outpaint", "--config", &cfg, "--video", &video, "--base", &base, "--expand", "left=2,right=1", "--out", &w.s("plain.vtn"), "--manifest", &w.s("plain_manifest.json")]);
    let plain: OutpaintManifest = serde_json::from_slice(&bytes(w.path("plain_manifest.json"))).unwrap();
    assert!(plain.base_only);

    ok(&["outpaint", "--config", &cfg, "--video", &video, "--base", &base, "--adapters", &adapters, "--expand", "left=0", "--out", &w.s("same.vtn")]);
    let same: OutpaintManifest = serde_json::from_slice(&bytes(w.path("same.json"))).unwrap();
    assert!(same.identity);
    assert_eq!(load_vtn(&w.path("same.vtn")).unwrap(), load_vtn(Path::new(&video)).unwrap());

    // The known region of the result reproduces the padded source.
    let source = load_vtn(Path::new(&video)).unwrap();
    let spec = OutpaintSpec::new((8, 8), Expansion { left: 2, right: 1, ..Expansion::default() }).unwrap();
    save_vtn(&Video::new(spec.pad(source.tensor()).unwrap()).unwrap(), &w.path("padded.vtn")).unwrap();
    ok(&["eval", "--pred", &w.s("o1.vtn"), "--ref", &w.s("padded.vtn"), "--region", "known", "--expand", "left=2,right=1", "--out", &w.s("known.csv")]);
    let rows = csv_rows(w.path("known.csv"));
    assert_eq!(rows[1], ["psnr", "known", "99"]);
}

#[test]
fn long_layout_outpaint_echoes_the_clips() {
    let w = Work::new();
    ok(&["gen-data", "--frames", "6", "--size", "8", "--seed", "1", "--out", &w.s("v.vtn")]);
    let base = w.base("b.mbas");
    let mut cfg: Value = serde_json::from_str(SMALL).unwrap();
    cfg["layout"] = serde_json::json!({"clip_len": 4, "stride": 2});
    fs::write(w.path("long.json"), cfg.to_string()).unwrap();
    for name in ["l1", "l2"] {
        ok(&["outpaint", "--config", &w.s("long.json"), "--video", &w.s("v.vtn"), "--base", &base, "--expand", "top=2", "--out", &w.s(&format!("{name}.vtn"))]);
    }
    assert_eq!(bytes(w.path("l1.vtn")), bytes(w.path("l2.vtn")));
    let m = manifest_without_time(w.path("l1.json"));
    assert_eq!(m["layout"]["clips"], serde_json::json!([{"start": 0, "end": 4}, {"start": 2, "end": 6}]));
}

#[test]
fn eval_metrics() {
    let w = Work::new();
    ok(&["gen-data", "--frames", "4", "--size", "16", "--seed", "1", "--out", &w.s("a.vtn")]);
    ok(&["gen-data", "--frames", "4", "--size", "16", "--seed", "2", "--out", &w.s("b.vtn")]);
    let (a, b) = (w.s("a.vtn"), w.s("b.vtn"));
    ok(&["eval", "--pred", &a, "--ref", &a, "--out", &w.s("same.csv")]);
    let rows = csv_rows(w.path("same.csv"));
    assert_eq!(rows, [["metric", "region", "value"], ["psnr", "all", "99"], ["ssim", "all", "1"]]);

    ok(&["eval", "--pred", &a, "--ref", &b, "--region", "unknown", "--expand", "left=2", "--out", &w.s("diff.csv")]);
    let rows = csv_rows(w.path("diff.csv"));
    assert_eq!(rows[1][1], "unknown");
    let psnr: f64 = rows[1][2].parse().unwrap();
    assert!(psnr < 99.0 && psnr > 0.0);

    ok(&["gen-data", "--frames", "3", "--size", "16", "--out", &w.s("short.vtn")]);
    assert_eq!(motia(&["eval", "--pred", &a, "--ref", &w.s("short.vtn"), "--out", &w.s("x.csv")]).code, 1);
    assert_eq!(motia(&["eval", "--pred", &a, "--ref", &a, "--region", "known", "--out", &w.s("x.csv")]).code, 2);
}

#[test]
fn oracle_check_exit_follows_the_report() {
    let w = Work::new();
    let cfg = w.s("small.json");
    let r = motia(&["oracle-check", "--config", &cfg, "--out", &w.s("r1.json")]);
    let report: Value = serde_json::from_slice(&bytes(w.path("r1.json"))).unwrap();
    let pass = report["pass"].as_bool().unwrap();
    assert_eq!(r.code, if pass { 0 } else { 1 }, "{}", r.stderr);
    motia(&["oracle-check", "--config", &cfg, "--out", &w.s("r2.json")]);
    assert_eq!(bytes(w.path("r1.json")), bytes(w.path("r2.json")));

    let r = motia(&["oracle-check", "--config", &cfg, "--mean-tolerance", "0", "--out", &w.s("zero.json")]);
    assert_eq!(r.code, 1);
    let report: Value = serde_json::from_slice(&bytes(w.path("zero.json"))).unwrap();
    assert_eq!(report["pass"], false);

    motia(&["oracle-check", "--config", &cfg, "--samples", "1", "--out", &w.s("one.json")]);
    let report: Value = serde_json::from_slice(&bytes(w.path("one.json"))).unwrap();
    assert_eq!(report["samples"], 1);
    assert!(!report["warnings"].as_array().unwrap().is_empty());
}

#[test]
fn inspect_schedule_table() {
    let w = Work::new();
    ok(&["inspect-schedule", "--out", &w.s("s.csv")]);
    ok(&["inspect-schedule", "--out", &w.s("s2.csv")]);
    assert_eq!(bytes(w.path("s.csv")), bytes(w.path("s2.csv")));
    let rows = csv_rows(w.path("s.csv"));
    assert_eq!(rows.len(), 1001);
    assert_eq!(rows[0], ["t", "beta", "alpha", "alpha_bar", "posterior_beta"]);
    let mut product = 1.0f64;
    for (i, row) in rows[1..].iter().enumerate() {
        assert_eq!(row[0], (i + 1).to_string());
        product *= row[2].parse::<f64>().unwrap();
        if i % 97 == 0 || i == 999 {
            let bar: f64 = row[3].parse().unwrap();
            assert!(((bar - product) / product).abs() < 1e-12, "t={}: {bar} vs {product}", i + 1);
        }
    }

    ok(&["inspect-schedule", "--T", "100", "--steps", "25", "--out", &w.s("p.csv")]);
    let rows = csv_rows(w.path("p.csv"));
    assert_eq!(rows.len(), 101);
    assert_eq!(rows[0].last().unwrap(), "plan_step");
    let visited: Vec<&str> = rows[1..].iter().map(|r| r[5].as_str()).filter(|s| !s.is_empty()).collect();
    assert_eq!(visited.len(), 25);
    assert_eq!(rows[100][5], "0");
    assert_eq!(rows[1][5], "24");
}

#[test]
fn documented_defaults() {
    let cfg = RunConfig::from_json("{}").unwrap();
    assert_eq!(cfg.adapt.iterations, 1000);
    assert_eq!(cfg.adapt.optimizer.lr, 1e-4);
    assert_eq!((cfg.sampler.steps, cfg.sampler.jump_length, cfg.sampler.repeats), (25, 3, 4));
    assert_eq!(cfg.sampler.effective_regret_window(), 12);
    assert_eq!(cfg.sampler.decay, 3.0);
}

#[test]
fn reference_pretrain_matches_fixture() {
    use sha2::{Digest, Sha256};
    let fixture: Value = serde_json::from_str(include_str!("fixtures/reference.json")).unwrap();
    let w = Work::new();
    ok(&["pretrain", "--seed", "0", "--out", &w.s("ref.mbas"), "--loss-csv", &w.s("ref.csv")]);
    let digest: String = Sha256::digest(bytes(w.path("ref.mbas"))).iter().map(|b| format!("{b:02x}")).collect();
    assert_eq!(digest, fixture["pretrain"]["sha256"].as_str().unwrap());
    let losses: Vec<f64> = csv_rows(w.path("ref.csv"))[1..].iter().map(|r| r[1].parse().unwrap()).collect();
    assert_eq!(losses.len(), 2000);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let first = fixture["pretrain"]["initial_mean_loss"].as_f64().unwrap();
    let last = fixture["pretrain"]["final_mean_loss"].as_f64().unwrap();
    assert!((mean(&losses[..100]) - first).abs() < 1e-4);
    assert!((mean(&losses[1900..]) - last).abs() < 1e-5);
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mmx_core::data::load_dataset;

const TINY: &str = r#"
seed = 3
[model]
hidden = 16
num_heads = 2
layers = ["lang_self", "mm:coattention"]
[train]
batch_size = 8
max_steps = 12
log_every = 4
[train.schedule]
warmup_steps = 2
total_steps = 12
[masking]
max_text_len = 12
max_regions = 4
[synthetic]
num_images = 120
objects_min = 2
objects_max = 4
feature_dim = 8
[eval_data]
num_images = 20
[finetune_data]
num_images = 40
[eval.lm]
steps = 60
warmup_steps = 5
"#;

fn mmx(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmx")).args(args).env_remove("MMX_THREADS").output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = mmx(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

struct Env {
    dir: tempfile::TempDir,
    config: PathBuf,
}

impl Env {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("tiny.toml");
        fs::write(&config, TINY).unwrap();
        Self { dir, config }
    }

    fn path(&self, p: &str) -> PathBuf {
        self.dir.path().join(p)
    }

    fn run(&self, cmd: &str, out: &str, extra: &[&str]) -> Output {
        let out = self.path(out);
        let mut args = vec![cmd, "--config", self.config.to_str().unwrap(), "--out", out.to_str().unwrap()];
        args.extend_from_slice(extra);
        mmx(&args)
    }

    fn ok(&self, cmd: &str, out: &str, extra: &[&str]) -> Output {
        let o = self.run(cmd, out, extra);
        assert!(o.status.success(), "{cmd} {extra:?}: {}", String::from_utf8_lossy(&o.stderr));
        o
    }
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn bad_key_exits_with_config_code_and_names_the_key() {
    let out = mmx(&["gen-data", "--set", "train.batchsize=4"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("batchsize"));
    let unknown_section = mmx(&["show-config", "--set", "trian.batch_size=4"]);
    assert_eq!(unknown_section.status.code(), Some(2));
    let bad_flag = mmx(&["pretrain", "--no-such-flag"]);
    assert_eq!(bad_flag.status.code(), Some(2));
}

#[test]
fn gen_data_files_parse_back() {
    let env = Env::new();
    env.ok("gen-data", "data", &[]);
    let pre = load_dataset(env.path("data/synth-pretrain.jsonl")).unwrap();
    let held = load_dataset(env.path("data/synth-heldout.jsonl")).unwrap();
    assert_eq!((pre.len(), held.len()), (120, 20));
    assert_eq!(pre.name, "synth-pretrain");
    assert_eq!(load_dataset(env.path("data/synth-finetune.jsonl")).unwrap().len(), 40);
    let vocab = fs::read_to_string(env.path("data/vocab.txt")).unwrap();
    assert!(vocab.lines().count() > 10);
    for w in pre.examples().iter().flat_map(|e| &e.caption) {
        assert!(vocab.lines().any(|l| l == w), "{w} missing from vocab");
    }
    assert!(env.path("data/class_names.txt").exists());
    assert!(env.path("data/resolved_config.toml").exists());

    // The written files drive a run in place of synthetic generation.
    let d = env.path("data");
    let files = [
        format!("data.pretrain=[\"{}\"]", d.join("synth-pretrain.jsonl").display()),
        format!("data.eval=\"{}\"", d.join("synth-heldout.jsonl").display()),
        format!("data.vocab=\"{}\"", d.join("vocab.txt").display()),
    ];
    let mut args = vec![];
    for f in &files {
        args.extend(["--set", f.as_str()]);
    }
    args.extend(["--set", "train.max_steps=3"]);
    env.ok("pretrain", "from-files", &args);
}

#[test]
fn noise_levels_differ_only_in_captions() {
    let env = Env::new();
    env.ok("gen-data", "clean", &[]);
    env.ok("gen-data", "noisy", &["--set", "synthetic.p_noise=0.5"]);
    let a = load_dataset(env.path("clean/synth-pretrain.jsonl")).unwrap();
    let b = load_dataset(env.path("noisy/synth-pretrain.jsonl")).unwrap();
    assert_eq!(a.len(), b.len());
    let mut changed = 0;
    for (x, y) in a.examples().iter().zip(b.examples()) {
        assert_eq!(x.image_id, y.image_id);
        assert_eq!(x.regions, y.regions);
        changed += usize::from(x.caption != y.caption);
    }
    // each object word flips with probability 0.5, so most captions change
    assert!(changed > 60 && changed < 120, "{changed} of 120 captions changed");
}

#[test]
fn eval_is_deterministic_across_runs_and_threads() {
    let env = Env::new();
    env.ok("pretrain", "run", &[]);
    let ckpt = env.path("run/checkpoint.mmtc");
    let c = ckpt.to_str().unwrap();
    env.ok("eval-retrieval", "e1", &["--checkpoint", c]);
    env.ok("eval-retrieval", "e2", &["--checkpoint", c]);
    let threaded = Command::new(env!("CARGO_BIN_EXE_mmx"))
        .args(["eval-retrieval", "--config", env.config.to_str().unwrap(), "--checkpoint", c, "--out"])
        .arg(env.path("e3"))
        .env("MMX_THREADS", "3")
        .output()
        .unwrap();
    assert!(threaded.status.success());
    for f in ["retrieval.csv", "topk.csv"] {
        let a = read(&env.path("e1").join(f));
        assert_eq!(a, read(&env.path("e2").join(f)), "{f}");
        assert_eq!(a, read(&env.path("e3").join(f)), "{f}");
    }
    let retrieval = String::from_utf8(read(&env.path("e1/retrieval.csv"))).unwrap();
    assert_eq!(retrieval.lines().next(), Some("metric,k,value,n"));
    assert_eq!(retrieval.lines().count(), 4);
    let topk = String::from_utf8(read(&env.path("e1/topk.csv"))).unwrap();
    assert_eq!(topk.lines().count(), 1 + 20 * 10);

    let bad = Command::new(env!("CARGO_BIN_EXE_mmx"))
        .args(["eval-retrieval", "--checkpoint", c])
        .env("MMX_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn resolved_config_reproduces_outputs_bitwise() {
    let env = Env::new();
    env.ok("pretrain", "a", &["--eval"]);
    let resolved = env.path("a/resolved_config.toml");
    let b = env.path("b");
    ok(&["pretrain", "--config", resolved.to_str().unwrap(), "--out", b.to_str().unwrap(), "--eval"]);
    for f in ["checkpoint.mmtc", "metrics.csv", "retrieval.csv", "topk.csv"] {
        assert_eq!(read(&env.path("a").join(f)), read(&b.join(f)), "{f}");
    }
    let metrics = String::from_utf8(read(&b.join("metrics.csv"))).unwrap();
    let steps: Vec<&str> = metrics.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(steps, ["1", "4", "8", "12"]);
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let env = Env::new();
    env.ok("pretrain", "full", &["--set", "train.checkpoint_every=6"]);
    let mid = env.path("full/checkpoint-0000006.mmtc");
    env.ok("pretrain", "resumed", &["--resume", mid.to_str().unwrap()]);
    assert_eq!(read(&env.path("full/checkpoint.mmtc")), read(&env.path("resumed/checkpoint.mmtc")));

    // A checkpoint without optimizer state cannot be resumed.
    env.ok("finetune", "ft", &["--checkpoint", env.path("full/checkpoint.mmtc").to_str().unwrap()]);
    let no_opt = env.run("pretrain", "again", &["--resume", env.path("ft/finetuned.mmtc").to_str().unwrap()]);
    assert_eq!(no_opt.status.code(), Some(2));
}

#[test]
fn broken_or_mismatched_checkpoints_are_rejected() {
    let env = Env::new();
    env.ok("pretrain", "run", &[]);
    let ckpt = env.path("run/checkpoint.mmtc");
    let wider = env.run("eval-retrieval", "wide", &["--checkpoint", ckpt.to_str().unwrap(), "--set", "model.hidden=32"]);
    assert_eq!(wider.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&wider.stderr).contains("shape"));

    let mut bytes = read(&ckpt);
    bytes[4] = bytes[4].wrapping_add(1);
    let bumped = env.path("bumped.mmtc");
    fs::write(&bumped, &bytes).unwrap();
    let out = env.run("eval-retrieval", "v", &["--checkpoint", bumped.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let missing = env.run("eval-retrieval", "m", &["--checkpoint", env.path("nope.mmtc").to_str().unwrap()]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn evaluation_refuses_pretraining_data() {
    let env = Env::new();
    let out = env.run("pretrain", "x", &["--set", "eval_data.name=\"synth-pretrain\""]);
    assert_eq!(out.status.code(), Some(2));
    env.ok("gen-data", "data", &[]);
    let pre = env.path("data/synth-pretrain.jsonl");
    let files = [
        format!("data.pretrain=[\"{}\"]", pre.display()),
        format!("data.eval=\"{}\"", pre.display()),
        format!("data.vocab=\"{}\"", env.path("data/vocab.txt").display()),
    ];
    let mut args = vec!["--eval"];
    for f in &files {
        args.extend(["--set", f.as_str()]);
    }
    let out = env.run("pretrain", "y", &args);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("overlap"));
}

#[test]
fn grad_check_passes_per_kind() {
    let out = ok(&["grad-check", "--set", "model.hidden=16", "--kind", "merged", "--kind", "coattention"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.contains("PASS")).count(), 2, "{text}");
    assert_eq!(mmx(&["grad-check", "--kind", "sideways"]).status.code(), Some(2));
}

#[test]
fn dataset_metrics_rank_noise() {
    let env = Env::new();
    env.ok("dataset-metrics", "clean", &[]);
    env.ok("dataset-metrics", "noisy", &["--set", "synthetic.p_noise=0.5"]);
    let overlap = |d: &str| -> f64 {
        let t = fs::read_to_string(env.path(d).join("quality.csv")).unwrap();
        assert_eq!(t.lines().next(), Some("dataset,metric,value,n"));
        let line = t.lines().find(|l| l.contains(",overlap,")).unwrap();
        line.split(',').nth(2).unwrap().parse().unwrap()
    };
    assert!(overlap("clean") > overlap("noisy"));
}

#[test]
fn finetune_vqa_writes_accuracy_rows() {
    let env = Env::new();
    env.ok("pretrain", "run", &[]);
    let c = env.path("run/checkpoint.mmtc");
    env.ok("finetune", "vqa", &["--checkpoint", c.to_str().unwrap(), "--set", "finetune.task=\"vqa\"", "--set", "finetune.steps=8"]);
    let t = fs::read_to_string(env.path("vqa/vqa.csv")).unwrap();
    assert_eq!(t.lines().count(), 1 + 3 + 2);
    for l in t.lines().skip(1) {
        let v: f64 = l.split(',').nth(2).unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&v));
    }
}

fn write_grid(env: &Env, body: &str) -> PathBuf {
    let p = env.path("grid.toml");
    fs::write(&p, body).unwrap();
    p
}

#[test]
fn attention_grid_yields_one_row_per_cell_and_seed() {
    let env = Env::new();
    let mut grid = String::from("seeds = [0, 1, 2]\n[set]\n\"train.max_steps\" = 4\n\"train.schedule.total_steps\" = 4\n");
    for kind in ["coattention", "merged", "language_query", "image_query", "modality_specific"] {
        grid += &format!("[[cells]]\nname = \"{kind}\"\nset = {{ \"model.layers\" = [\"mm:{kind}\"] }}\n");
    }
    let p = write_grid(&env, &grid);
    env.ok("ablate", "grid", &["--grid", p.to_str().unwrap()]);
    let csv = fs::read_to_string(env.path("grid/ablation.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("cell,seed,metric,k,value,n,status"));
    let r1: Vec<&str> = csv.lines().filter(|l| l.contains(",recall,1,")).collect();
    assert_eq!(r1.len(), 15);
    for seed in 0..3 {
        assert_eq!(r1.iter().filter(|l| l.split(',').nth(1) == Some(&seed.to_string())).count(), 5);
    }
    assert!(env.path("grid/cells/merged/seed2/resolved_config.toml").exists());
}

#[test]
fn failed_cells_are_recorded_and_the_grid_continues() {
    let env = Env::new();
    let grid = "seeds = [0]\n[set]\n\"train.max_steps\" = 2\n\"train.schedule.total_steps\" = 4\n\
        [[cells]]\nname = \"bad\"\nset = { \"model.layers\" = [\"mm:nope\"] }\n\
        [[cells]]\nname = \"good\"\n";
    let p = write_grid(&env, grid);
    let out = env.run("ablate", "grid", &["--grid", p.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let csv = fs::read_to_string(env.path("grid/ablation.csv")).unwrap();
    assert!(csv.lines().any(|l| l.starts_with("bad,0,error,") && l.contains("failed")));
    assert!(csv.lines().any(|l| l.starts_with("good,0,recall,1,")));
}

#[test]
fn shipped_configs_resolve() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let out = tempfile::tempdir().unwrap();
    ok(&["show-config", "--config", root.join("desk.toml").to_str().unwrap()]);
    let mut cells = 0;
    for entry in fs::read_dir(root.join("grids")).unwrap() {
        let p = entry.unwrap().path();
        let o = ok(&["ablate", "--dry-run", "--grid", p.to_str().unwrap(), "--out", out.path().to_str().unwrap()]);
        cells += String::from_utf8(o.stdout).unwrap().lines().count();
    }
    assert!(cells >= 3 * 20, "{cells}");
    let losses = ok(&["ablate", "--dry-run", "--grid", root.join("grids/losses.toml").to_str().unwrap(), "--out"]
        .into_iter()
        .chain([out.path().to_str().unwrap()])
        .collect::<Vec<_>>());
    let text = String::from_utf8(losses.stdout).unwrap();
    for cell in ["mrm+itm", "mlm+itm", "mrm+mlm+itm"] {
        assert!(text.lines().any(|l| l.starts_with(&format!("{cell} seed"))), "{cell}");
    }
}

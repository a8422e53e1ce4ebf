use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use mmx_core::attention::AttentionKind;
use mmx_core::checkpoint;
use mmx_core::config::{parse_override, RunConfig, RunData};
use mmx_core::data::{save_dataset, write_lines};
use mmx_core::diagnostics::{full_model_gradcheck, GradCheckSetup, ALL_KINDS};
use mmx_core::error::Error;
use mmx_core::evaluation::{dataset_quality, write_report_csv, write_top_k, ReportRow, ScoreMatrix};
use mmx_core::experiment::{self, FinetuneOutcome};
use mmx_core::models::Model;
use mmx_core::tensor::ParameterStore;
use mmx_core::training::{StepMetrics, TrainState};
use toml::Value;

use crate::ConfigArgs;

pub const THREADS_ENV: &str = "MMX_THREADS";

/// Resolve file, presets, overrides, `--out` and `MMX_THREADS`, in that order.
pub fn load_config(args: &ConfigArgs, extra: &[(String, Value)]) -> Result<RunConfig> {
    let mut overrides = args.overrides.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>, _>>()?;
    overrides.extend_from_slice(extra);
    if let Some(out) = &args.out {
        overrides.push(("output_dir".into(), Value::String(out.to_string_lossy().into_owned())));
    }
    let mut cfg = RunConfig::load(args.config.as_deref(), &args.presets, &overrides)?;
    if let Ok(raw) = std::env::var(THREADS_ENV) {
        cfg.eval.threads = raw
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&t| t > 0)
            .ok_or_else(|| Error::config(format!("{THREADS_ENV} must be a positive integer, got `{raw}`")))?;
    }
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    cfg.write_resolved(&dir)?;
    Ok(dir)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn write_rows(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut w = create(path)?;
    write_report_csv(&mut w, rows)?;
    w.flush()?;
    Ok(())
}

pub fn show_config(args: &ConfigArgs) -> Result<()> {
    print!("{}", load_config(args, &[])?.to_toml());
    Ok(())
}

pub fn gen_data(args: &ConfigArgs) -> Result<()> {
    let cfg = load_config(args, &[])?;
    if !cfg.data.pretrain.is_empty() {
        return Err(Error::config("gen-data writes synthetic splits; unset data.pretrain").into());
    }
    let dir = out_dir(&cfg)?;
    let data = cfg.prepare_data()?;
    for ds in data.pretrain.iter().chain([&data.eval, &data.finetune]) {
        let path = dir.join(format!("{}.jsonl", ds.name));
        save_dataset(ds, &path)?;
        println!("{}: {} records", path.display(), ds.len());
    }
    write_lines(data.vocab.tokens(), dir.join("vocab.txt"))?;
    if let Some(names) = &data.class_names {
        write_lines(names, dir.join("class_names.txt"))?;
    }
    Ok(())
}

fn score(cfg: &RunConfig, data: &RunData, model: &Model, store: &ParameterStore<f32>) -> Result<ScoreMatrix> {
    let (m, r) = experiment::zero_shot(cfg, data, model, store)?;
    eprintln!("R@1 {:.4}  R@5 {:.4}  R@10 {:.4}  ({} queries)", r.r1, r.r5, r.r10, r.queries);
    Ok(m)
}

fn write_retrieval(dir: &Path, cfg: &RunConfig, m: &ScoreMatrix) -> Result<()> {
    let report = mmx_core::evaluation::RetrievalReport::from_matrix(m);
    write_rows(&dir.join("retrieval.csv"), &report.rows())?;
    let mut w = create(&dir.join("topk.csv"))?;
    write_top_k(&mut w, m, cfg.eval.top_k)?;
    w.flush()?;
    Ok(())
}

fn should_log(step: u64, every: u64, until: u64) -> bool {
    step % every.max(1) == 0 || step == until || step == 1
}

pub fn pretrain(args: &ConfigArgs, resume: Option<&Path>, eval: bool) -> Result<()> {
    let cfg = load_config(args, &[])?;
    let dir = out_dir(&cfg)?;
    let data = cfg.prepare_data()?;
    if eval || cfg.train.eval_every > 0 {
        mmx_core::evaluation::check_held_out(&data.pretrain_names(), &data.eval, cfg.eval.allow_overlap)?;
    }
    let model = cfg.build_model(&data)?;
    let state = match resume {
        Some(p) => {
            let (store, opt) = experiment::load_checkpoint(&model, p)?;
            let opt = opt.ok_or_else(|| Error::config(format!("{} has no optimizer state to resume", p.display())))?;
            if !opt.matches(&store) {
                return Err(Error::Checkpoint("optimizer state does not match the parameters".into()).into());
            }
            eprintln!("resuming at step {}", opt.step);
            Some(TrainState { store, opt })
        }
        None => None,
    };

    let metrics_path = dir.join("metrics.csv");
    let mut metrics = if resume.is_some() && metrics_path.exists() {
        BufWriter::new(OpenOptions::new().append(true).open(&metrics_path)?)
    } else {
        let mut w = create(&metrics_path)?;
        writeln!(w, "{}", StepMetrics::CSV_HEADER)?;
        w
    };
    let mut eval_log = if cfg.train.eval_every > 0 {
        let mut w = create(&dir.join("eval_log.csv"))?;
        writeln!(w, "step,metric,k,value,n")?;
        Some(w)
    } else {
        None
    };
    let until = cfg.train.max_steps;
    let hook = |m: &StepMetrics, s: &TrainState| -> mmx_core::error::Result<()> {
        if should_log(m.step, cfg.train.log_every, until) {
            writeln!(metrics, "{}", m.csv_row())?;
            metrics.flush()?;
            eprintln!("step {:>7}  loss {:.4}  lr {:.3e}", m.step, m.loss_total, m.lr);
        }
        if cfg.train.checkpoint_every > 0 && m.step % cfg.train.checkpoint_every == 0 {
            checkpoint::save(&dir.join(format!("checkpoint-{:07}.mmtc", m.step)), &s.store, Some(&s.opt))?;
        }
        if let Some(w) = eval_log.as_mut() {
            if m.step % cfg.train.eval_every == 0 {
                let (_, r) = experiment::zero_shot(&cfg, &data, &model, &s.store)?;
                for row in r.rows() {
                    writeln!(w, "{},{},{},{},{}", m.step, row.metric, row.k.map_or(String::new(), |k| k.to_string()), row.value, row.n)?;
                }
                w.flush()?;
            }
        }
        Ok(())
    };
    let done = experiment::pretrain(&cfg, &data, state, hook)?;
    checkpoint::save(&dir.join("checkpoint.mmtc"), &done.state.store, Some(&done.state.opt))?;
    println!("{}", dir.join("checkpoint.mmtc").display());
    if eval {
        let m = score(&cfg, &data, &done.model, &done.state.store)?;
        write_retrieval(&dir, &cfg, &m)?;
    }
    Ok(())
}

pub fn finetune(args: &ConfigArgs, ckpt: &Path) -> Result<()> {
    let cfg = load_config(args, &[])?;
    let dir = out_dir(&cfg)?;
    let data = cfg.prepare_data()?;
    let model = cfg.build_model(&data)?;
    let (store, _) = experiment::load_checkpoint(&model, ckpt)?;
    match experiment::finetune(&cfg, &data, &model, &store)? {
        FinetuneOutcome::Retrieval { state, log } => {
            let mut w = create(&dir.join("finetune_metrics.csv"))?;
            mmx_core::training::write_metrics_csv(&mut w, &log)?;
            w.flush()?;
            checkpoint::save(&dir.join("finetuned.mmtc"), &state.store, None)?;
            let m = score(&cfg, &data, &model, &state.store)?;
            write_retrieval(&dir, &cfg, &m)?;
        }
        FinetuneOutcome::Vqa(r) => {
            let n = data.eval.len();
            let mut rows: Vec<ReportRow> = r
                .accuracies
                .iter()
                .enumerate()
                .map(|(i, &a)| ReportRow { metric: format!("vqa_accuracy_head{i}"), k: None, value: a, n })
                .collect();
            rows.push(ReportRow { metric: "vqa_accuracy_mean".into(), k: None, value: r.mean, n });
            rows.push(ReportRow { metric: "vqa_accuracy_std".into(), k: None, value: r.std, n });
            write_rows(&dir.join("vqa.csv"), &rows)?;
            eprintln!("VQA accuracy {:.4} +/- {:.4}", r.mean, r.std);
        }
    }
    Ok(())
}

pub fn eval_retrieval(args: &ConfigArgs, ckpt: &Path) -> Result<()> {
    let cfg = load_config(args, &[])?;
    let dir = out_dir(&cfg)?;
    let data = cfg.prepare_data()?;
    let model = cfg.build_model(&data)?;
    let (store, _) = experiment::load_checkpoint(&model, ckpt)?;
    let m = score(&cfg, &data, &model, &store)?;
    write_retrieval(&dir, &cfg, &m)
}

pub fn dataset_metrics(args: &ConfigArgs) -> Result<()> {
    let cfg = load_config(args, &[])?;
    let dir = out_dir(&cfg)?;
    let data = cfg.prepare_data()?;
    let mut w = create(&dir.join("quality.csv"))?;
    writeln!(w, "dataset,metric,value,n")?;
    for ds in &data.pretrain {
        let q = dataset_quality(ds, &data.eval, data.class_names.as_deref(), cfg.eval.overlap_sample, &cfg.eval.lm, cfg.seed)?;
        for row in q.rows() {
            writeln!(w, "{},{},{},{}", ds.name, row.metric, row.value, row.n)?;
            println!("{:<20} {:<12} {:.4}", ds.name, row.metric, row.value);
        }
    }
    w.flush()?;
    Ok(())
}

pub fn grad_check(args: &ConfigArgs, kinds: &[String], tol: f64) -> Result<()> {
    let cfg = load_config(args, &[])?;
    let kinds: Vec<AttentionKind> =
        if kinds.is_empty() { ALL_KINDS.to_vec() } else { kinds.iter().map(|k| k.parse()).collect::<Result<_, _>>()? };
    let mut failed = Vec::new();
    for kind in kinds {
        let mut setup = GradCheckSetup::desk(kind, cfg.seed);
        setup.model.hidden = cfg.model.hidden;
        setup.model.num_heads = cfg.model.num_heads;
        setup.model.head_dim = cfg.model.head_dim;
        setup.model.ff_mult = cfg.model.ff_mult;
        let r = full_model_gradcheck(&setup)?;
        let verdict = if r.passes(tol) { "PASS" } else { "FAIL" };
        println!("{kind:<18} {verdict}  max_rel_err {:.3e} over {} coordinates", r.max_rel_err, r.coordinates);
        if !r.passes(tol) {
            failed.push(kind.to_string());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::validation("grad-check", format!("failed for {}", failed.join(", "))).into())
    }
}

//! End-to-end recipes shared by the command line and the acceptance checks:
//! pretrain from a run config, score zero-shot retrieval, fine-tune.

use std::path::Path;

use crate::checkpoint;
use crate::config::{FinetuneTask, RunConfig, RunData};
use crate::error::{Error, Result};
use crate::evaluation::{score_all_pairs, RetrievalReport, ScoreMatrix};
use crate::models::Model;
use crate::tensor::ParameterStore;
use crate::training::{
    finetune_vqa, synthetic_vqa, OptimizerState, ScheduleConfig, StepMetrics, TrainConfig, TrainState, Trainer, VqaReport,
};

/// Trained parameters plus the logged metrics.
pub struct Pretrained {
    pub model: Model,
    pub state: TrainState,
    pub log: Vec<StepMetrics>,
}

/// Pretrain on `data.pretrain`, calling `hook` after every step.
pub fn pretrain(
    cfg: &RunConfig,
    data: &RunData,
    resume: Option<TrainState>,
    hook: impl FnMut(&StepMetrics, &TrainState) -> Result<()>,
) -> Result<Pretrained> {
    let model = cfg.build_model(data)?;
    let datasets = data.pretrain.iter().collect();
    let trainer = Trainer::new(&model, &cfg.losses, &cfg.train, &cfg.masking, cfg.sampler.strategy, datasets, &data.vocab)?;
    let mut state = match resume {
        Some(s) => s,
        None => trainer.init_state()?,
    };
    let log = trainer.run(&mut state, cfg.train.max_steps, hook)?;
    Ok(Pretrained { model, state, log })
}

/// Score the held-out split against every image, without any fine-tuning.
pub fn zero_shot(cfg: &RunConfig, data: &RunData, model: &Model, store: &ParameterStore<f32>) -> Result<(ScoreMatrix, RetrievalReport)> {
    let m = score_all_pairs(model, store, &data.pretrain_names(), &data.eval, &data.vocab, &cfg.masking, &cfg.eval)?;
    let r = RetrievalReport::from_matrix(&m);
    Ok((m, r))
}

fn finetune_train(cfg: &RunConfig) -> TrainConfig {
    let ft = &cfg.finetune;
    TrainConfig {
        max_steps: ft.steps,
        schedule: ScheduleConfig {
            base_lr: ft.base_lr,
            warmup_steps: ft.warmup_steps.min(ft.steps.saturating_sub(1)),
            total_steps: ft.steps.max(1),
            ..cfg.train.schedule.clone()
        },
        ..cfg.train.clone()
    }
}

pub enum FinetuneOutcome {
    Retrieval { state: TrainState, log: Vec<StepMetrics> },
    Vqa(VqaReport),
}

/// Fine-tune a pretrained store on `data.finetune` for the configured task.
/// Retrieval reuses the pretraining losses with a fresh optimizer state.
pub fn finetune(cfg: &RunConfig, data: &RunData, model: &Model, store: &ParameterStore<f32>) -> Result<FinetuneOutcome> {
    let train = finetune_train(cfg);
    match cfg.finetune.task {
        FinetuneTask::Retrieval => {
            let trainer =
                Trainer::new(model, &cfg.losses, &train, &cfg.masking, cfg.sampler.strategy, vec![&data.finetune], &data.vocab)?;
            let mut state = TrainState::from_store(store.clone());
            let log = trainer.run(&mut state, train.max_steps, |_, _| Ok(()))?;
            Ok(FinetuneOutcome::Retrieval { state, log })
        }
        FinetuneTask::Vqa => {
            let names = data
                .class_names
                .as_deref()
                .ok_or_else(|| Error::config("VQA questions need the class-name table (data.class_names)"))?;
            let train_q = synthetic_vqa(&data.finetune, names, &cfg.vqa, cfg.seed)?;
            let eval_q = synthetic_vqa(&data.eval, names, &cfg.vqa, cfg.seed)?;
            let report = finetune_vqa(model, store, &cfg.vqa, &train, &cfg.masking, &data.vocab, &train_q, &eval_q)?;
            Ok(FinetuneOutcome::Vqa(report))
        }
    }
}

/// Load a checkpoint and check that it holds every parameter `model`
/// declares, with matching shapes.
pub fn load_checkpoint(model: &Model, path: &Path) -> Result<(ParameterStore<f32>, Option<OptimizerState>)> {
    let (store, opt) = checkpoint::load(path)?;
    let mut expected = ParameterStore::<f32>::new(0);
    model.declare(&mut expected)?;
    for (name, t) in expected.iter() {
        match store.value(name) {
            None => return Err(Error::config(format!("checkpoint {} lacks parameter `{name}`", path.display()))),
            Some(v) if v.shape() != t.shape() => {
                return Err(Error::config(format!(
                    "parameter `{name}` has shape {:?} in {}, the configured model expects {:?}",
                    v.shape(),
                    path.display(),
                    t.shape()
                )))
            }
            Some(_) => {}
        }
    }
    Ok((store, opt))
}

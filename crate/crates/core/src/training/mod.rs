//! Optimization: schedules, LAMB, clipping, and the pretraining / fine-tuning
//! loops built from the data pipeline, models and losses.

mod optim;
mod schedule;
mod vqa;

use std::io::Write;

use serde::{Deserialize, Serialize};

pub use optim::{clip_gradients, decays, lamb_step, LambConfig, OptimizerState};
pub use schedule::{DecayKind, ScheduleConfig};
pub use vqa::{finetune_vqa, synthetic_vqa, vqa_accuracy, VqaConfig, VqaExample, VqaReport};

use crate::attention::PairIndex;
use crate::data::{
    apply_masks, build_itm_pairs, sample_batch, CaptionIndex, Dataset, ItmMode, ItmPairs, MaskConfig, MaskedBatch,
    SamplerConfig, SamplingStrategy, Vocabulary,
};
use crate::encoders::{RegionBatch, TextBatch};
use crate::error::{Error, Result};
use crate::losses::{itm_classification_loss, itm_contrastive_loss, mlm_loss, mrm_loss, total_loss, LossConfig, LossParts};
use crate::models::Model;
use crate::rng::{derive_seed, TAG_DROPOUT, TAG_INIT};
use crate::tensor::{Float, Graph, ParameterStore, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_steps: u64,
    pub clip_norm: f64,
    /// Set from the run seed rather than read from config files.
    #[serde(skip)]
    pub seed: u64,
    pub log_every: u64,
    /// 0 disables periodic evaluation.
    pub eval_every: u64,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    pub schedule: ScheduleConfig,
    pub optimizer: LambConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            max_steps: 3000,
            clip_norm: 1.0,
            seed: 0,
            log_every: 10,
            eval_every: 0,
            checkpoint_every: 0,
            schedule: ScheduleConfig::default(),
            optimizer: LambConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_norm > 0.0) {
            return Err(Error::config("train.clip_norm must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size must be positive"));
        }
        self.schedule.validate()
    }
}

/// Loss components of one batch.
pub struct Objective {
    pub total: Option<Var>,
    pub parts: LossParts,
}

/// Forward the model on a masked batch and build every enabled loss. With
/// `pairs` absent (matching disabled) each image is scored with its own caption.
pub fn batch_objective<F: Float>(
    g: &mut Graph<F>,
    store: &ParameterStore<F>,
    model: &Model,
    losses: &LossConfig,
    batch: &MaskedBatch,
    pairs: Option<&ItmPairs>,
) -> Result<Objective> {
    let refs: Vec<_> = batch.examples.iter().collect();
    let text = TextBatch::from_masked(&refs)?;
    let regions = RegionBatch::from_masked(&refs)?;
    let index = match pairs {
        Some(p) => PairIndex::from_pairs(&p.pairs),
        None => PairIndex::aligned(batch.len()),
    };
    let out = model.forward(g, store, &text, &regions, &index)?;
    let mut parts = LossParts::default();
    if losses.mlm {
        let mut sites = Vec::new();
        let mut targets = Vec::new();
        for (i, e) in batch.examples.iter().enumerate() {
            for &t in &e.masked_tokens {
                sites.push((i, t));
                targets.push(e.token_targets[t] as usize);
            }
        }
        if !sites.is_empty() {
            let logits = model.mlm_logits(g, store, &out, &index, &sites)?;
            parts.mlm = mlm_loss(g, logits, &targets)?;
        }
    }
    if losses.mrm {
        let mut sites = Vec::new();
        let mut targets: Vec<&[f32]> = Vec::new();
        for (i, e) in batch.examples.iter().enumerate() {
            for &s in &e.masked_regions {
                sites.push((i, s));
                targets.push(&e.region_targets[s - 1]);
            }
        }
        if !sites.is_empty() {
            let logits = model.mrm_logits(g, store, &out, &index, &sites)?;
            parts.mrm = mrm_loss(g, logits, &targets)?;
        }
    }
    if losses.itm {
        let p = pairs.ok_or_else(|| Error::Contract("matching loss enabled without pairs".into()))?;
        parts.itm = match losses.itm_mode {
            ItmMode::Classification => Some(itm_classification_loss(g, out.itm, &p.labels)?),
            ItmMode::Contrastive => itm_contrastive_loss(g, out.itm, &p.groups)?,
        };
    }
    let total = total_loss(g, losses, &parts)?;
    Ok(Objective { total, parts })
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_mlm: f64,
    pub loss_mrm: f64,
    pub loss_itm: f64,
    pub grad_norm: f64,
}

impl StepMetrics {
    pub const CSV_HEADER: &'static str = "step,lr,loss_total,loss_mlm,loss_mrm,loss_itm,grad_norm";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{},{},{},{},{}",
            self.step, self.lr, self.loss_total, self.loss_mlm, self.loss_mrm, self.loss_itm, self.grad_norm
        )
    }
}

pub fn write_metrics_csv(w: &mut impl Write, rows: &[StepMetrics]) -> std::io::Result<()> {
    writeln!(w, "{}", StepMetrics::CSV_HEADER)?;
    for r in rows {
        writeln!(w, "{}", r.csv_row())?;
    }
    Ok(())
}

/// Parameters plus optimizer state; the optimizer step is the training step.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub store: ParameterStore<f32>,
    pub opt: OptimizerState,
}

impl TrainState {
    pub fn from_store(store: ParameterStore<f32>) -> Self {
        let opt = OptimizerState::new(&store);
        Self { store, opt }
    }

    pub fn step(&self) -> u64 {
        self.opt.step
    }
}

/// Everything that stays fixed over a training run.
pub struct Trainer<'a> {
    pub model: &'a Model,
    pub losses: &'a LossConfig,
    pub train: &'a TrainConfig,
    masking: MaskConfig,
    strategy: SamplingStrategy,
    datasets: Vec<&'a Dataset>,
    truth: CaptionIndex<'a>,
    vocab: &'a Vocabulary,
}

impl<'a> Trainer<'a> {
    pub fn new(
        model: &'a Model,
        losses: &'a LossConfig,
        train: &'a TrainConfig,
        masking: &MaskConfig,
        strategy: SamplingStrategy,
        datasets: Vec<&'a Dataset>,
        vocab: &'a Vocabulary,
    ) -> Result<Self> {
        losses.validate()?;
        train.validate()?;
        masking.validate()?;
        if model.is_baseline() && (losses.mlm || losses.mrm) {
            return Err(Error::config("the joint-embedding baseline trains with the matching loss only"));
        }
        if losses.itm && train.batch_size < 2 {
            return Err(Error::config("image-text matching needs train.batch_size >= 2"));
        }
        if masking.max_text_len > model.dims.max_text_len {
            return Err(Error::config(format!(
                "masking.max_text_len {} exceeds the model's position table ({})",
                masking.max_text_len, model.dims.max_text_len
            )));
        }
        if vocab.len() != model.dims.vocab_size {
            return Err(Error::config(format!(
                "vocabulary has {} tokens, model expects {}",
                vocab.len(),
                model.dims.vocab_size
            )));
        }
        for d in &datasets {
            if d.feature_dim().is_some_and(|f| f != model.dims.feature_dim)
                || d.num_classes().is_some_and(|c| c != model.dims.num_classes)
            {
                return Err(Error::config(format!("dataset `{}` does not match the model's input sizes", d.name)));
            }
        }
        let masking = MaskConfig {
            mlm_rate: if losses.mlm { masking.mlm_rate } else { 0.0 },
            mrm_rate: if losses.mrm { masking.mrm_rate } else { 0.0 },
            ..masking.clone()
        };
        let truth = CaptionIndex::new(datasets.iter().copied());
        Ok(Self { model, losses, train, masking, strategy, datasets, truth, vocab })
    }

    /// Fresh parameters drawn from the run seed.
    pub fn init_state(&self) -> Result<TrainState> {
        let mut store = ParameterStore::new(derive_seed(self.train.seed, &[TAG_INIT]));
        self.model.declare(&mut store)?;
        Ok(TrainState::from_store(store))
    }

    /// The masked batch and matching pairs used at `step`.
    pub fn batch(&self, step: u64) -> Result<(MaskedBatch, Option<ItmPairs>)> {
        let sampler = SamplerConfig { strategy: self.strategy, batch_size: self.train.batch_size, seed: self.train.seed };
        let examples = sample_batch(&self.datasets, &sampler, step)?;
        let batch = apply_masks(&examples, self.vocab, &self.masking, self.train.seed, step)?;
        let pairs = if self.losses.itm {
            Some(build_itm_pairs(
                &batch,
                self.losses.itm_mode,
                self.losses.negatives_per_positive,
                &self.truth,
                self.train.seed,
                step,
            )?)
        } else {
            None
        };
        Ok((batch, pairs))
    }

    /// Run one optimization step.
    pub fn step(&self, state: &mut TrainState) -> Result<StepMetrics> {
        let step = state.opt.step + 1;
        let (batch, pairs) = self.batch(step)?;
        let mut g = Graph::<f32>::new(true, derive_seed(self.train.seed, &[TAG_DROPOUT, step]));
        let obj = batch_objective(&mut g, &state.store, self.model, self.losses, &batch, pairs.as_ref())?;
        let read = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).data()[0] as f64);
        let loss_total = read(obj.total);
        if !loss_total.is_finite() {
            return Err(Error::Divergence { step: step as usize });
        }
        let (loss_mlm, loss_mrm, loss_itm) = (read(obj.parts.mlm), read(obj.parts.mrm), read(obj.parts.itm));
        state.store.zero_grads();
        if let Some(t) = obj.total {
            g.backward(t)?;
            g.accumulate_param_grads(&mut state.store);
        }
        drop(g);
        let grad_norm = clip_gradients(&mut state.store, self.train.clip_norm)?;
        let lr = self.train.schedule.lr_at(step);
        lamb_step(&mut state.store, &mut state.opt, lr, &self.train.optimizer)?;
        Ok(StepMetrics { step, lr, loss_total, loss_mlm, loss_mrm, loss_itm, grad_norm })
    }

    /// Train until `state.step() == until`, calling `hook` after every step.
    /// Returns the rows selected by `log_every` (plus the final step).
    pub fn run(
        &self,
        state: &mut TrainState,
        until: u64,
        mut hook: impl FnMut(&StepMetrics, &TrainState) -> Result<()>,
    ) -> Result<Vec<StepMetrics>> {
        let mut log = Vec::new();
        while state.step() < until {
            let m = self.step(state)?;
            hook(&m, state)?;
            let every = self.train.log_every.max(1);
            if m.step % every == 0 || m.step == until || m.step == 1 {
                log.push(m);
            }
        }
        Ok(log)
    }
}

#[cfg(test)]
mod tests;

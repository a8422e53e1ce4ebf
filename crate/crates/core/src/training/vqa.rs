use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{clip_gradients, lamb_step, TrainConfig, TrainState};
use crate::attention::PairIndex;
use crate::data::{apply_masks, tokenize_words, Dataset, MaskConfig, PairedExample, Vocabulary};
use crate::encoders::{RegionBatch, TextBatch};
use crate::error::{Error, Result};
use crate::losses::vqa_loss;
use crate::models::Model;
use crate::rng::{derive_seed, stream, TAG_DROPOUT, TAG_INIT, TAG_SAMPLE};
use crate::tensor::{Graph, ParameterStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VqaConfig {
    pub answer_count: usize,
    /// Independent head initializations to average over.
    pub repeats: usize,
    /// Simulated annotators per question, for soft answer scores.
    pub annotators: usize,
    pub annotator_accuracy: f64,
}

impl Default for VqaConfig {
    fn default() -> Self {
        Self { answer_count: 2, repeats: 3, annotators: 10, annotator_accuracy: 0.9 }
    }
}

/// A question about an image with a soft score per answer.
#[derive(Clone, Debug, PartialEq)]
pub struct VqaExample {
    /// The question is stored as the caption.
    pub example: PairedExample,
    pub scores: Vec<f32>,
}

/// Yes/no questions "is there a {class} in the image": each image gets one
/// question about a present or an absent class (even odds). Answer 0 is "yes".
/// Scores follow the usual `min(votes / 3, 1)` rule over noisy annotators.
pub fn synthetic_vqa(ds: &Dataset, class_names: &[String], cfg: &VqaConfig, seed: u64) -> Result<Vec<VqaExample>> {
    if cfg.answer_count != 2 {
        return Err(Error::config("synthetic questions are yes/no: vqa.answer_count must be 2"));
    }
    let mut rng = stream(seed, &[TAG_SAMPLE, u64::MAX]);
    let mut out = Vec::with_capacity(ds.num_images());
    for i in 0..ds.num_images() {
        let (_, recs) = ds.image_records(i);
        let ex = &ds.examples()[recs[0]];
        let present: Vec<usize> = ex.regions.iter().map(|r| r.argmax_label()).collect();
        let absent: Vec<usize> = (0..class_names.len()).filter(|c| !present.contains(c)).collect();
        let yes = absent.is_empty() || rng.random_bool(0.5);
        let cls = if yes { *present.choose(&mut rng).unwrap() } else { *absent.choose(&mut rng).unwrap() };
        let mut votes = [0usize; 2];
        for _ in 0..cfg.annotators {
            let correct = rng.random_bool(cfg.annotator_accuracy);
            let says_yes = if correct { yes } else { !yes };
            votes[if says_yes { 0 } else { 1 }] += 1;
        }
        let scores = votes.iter().map(|&v| (v as f32 / 3.0).min(1.0)).collect();
        let question = tokenize_words(&format!("is there a {} in the image", class_names[cls]));
        out.push(VqaExample { example: PairedExample { caption: question, ..ex.clone() }, scores });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct VqaReport {
    /// Held-out accuracy per head initialization.
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

fn encode(
    examples: &[&VqaExample],
    vocab: &Vocabulary,
    masking: &MaskConfig,
) -> Result<(TextBatch, RegionBatch, Vec<f32>)> {
    let paired: Vec<&PairedExample> = examples.iter().map(|e| &e.example).collect();
    let mb = apply_masks(&paired, vocab, &masking.unmasked(), 0, 0)?;
    let refs: Vec<_> = mb.examples.iter().collect();
    let targets = examples.iter().flat_map(|e| e.scores.iter().copied()).collect();
    Ok((TextBatch::from_masked(&refs)?, RegionBatch::from_masked(&refs)?, targets))
}

/// Mean soft score of the highest-scoring answer.
pub fn vqa_accuracy(
    model: &Model,
    store: &ParameterStore<f32>,
    examples: &[VqaExample],
    vocab: &Vocabulary,
    masking: &MaskConfig,
) -> Result<f64> {
    let mut total = 0.0;
    for chunk in examples.chunks(64) {
        let refs: Vec<&VqaExample> = chunk.iter().collect();
        let (text, regions, _) = encode(&refs, vocab, masking)?;
        let mut g = Graph::<f32>::new(false, 0);
        let out = model.forward(&mut g, store, &text, &regions, &PairIndex::aligned(chunk.len()))?;
        let logits = model.vqa_logits(&mut g, store, &out)?;
        let a = *g.shape(logits).last().unwrap();
        for (e, row) in chunk.iter().zip(g.value(logits).data().chunks(a)) {
            let best = (0..a).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            total += e.scores[best] as f64;
        }
    }
    Ok(total / examples.len().max(1) as f64)
}

/// Fine-tune `pretrained` with a fresh answer head `cfg.repeats` times and
/// report held-out accuracy over the head seeds.
#[allow(clippy::too_many_arguments)]
pub fn finetune_vqa(
    model: &Model,
    pretrained: &ParameterStore<f32>,
    cfg: &VqaConfig,
    train: &TrainConfig,
    masking: &MaskConfig,
    vocab: &Vocabulary,
    train_set: &[VqaExample],
    eval_set: &[VqaExample],
) -> Result<VqaReport> {
    train.validate()?;
    if let Some(w) = pretrained.value("vqa.w2") {
        if w.shape()[1] != cfg.answer_count {
            return Err(Error::config(format!(
                "checkpoint answer head has {} outputs, vqa.answer_count is {}",
                w.shape()[1],
                cfg.answer_count
            )));
        }
    }
    if train_set.is_empty() || eval_set.is_empty() || cfg.repeats == 0 {
        return Err(Error::config("VQA fine-tuning needs questions and at least one repeat"));
    }
    if let Some(e) = train_set.iter().chain(eval_set).find(|e| e.scores.len() != cfg.answer_count) {
        return Err(Error::config(format!("question has {} answer scores, expected {}", e.scores.len(), cfg.answer_count)));
    }
    let mut accuracies = Vec::with_capacity(cfg.repeats);
    for r in 0..cfg.repeats as u64 {
        let mut store = pretrained.clone();
        for head in ["mlm.", "mrm."] {
            store.remove_prefix(head);
        }
        model.declare_vqa_head(&mut store, cfg.answer_count, derive_seed(train.seed, &[TAG_INIT, r + 1]))?;
        let mut state = TrainState::from_store(store);
        while state.step() < train.max_steps {
            let step = state.step() + 1;
            let mut rng = stream(train.seed, &[TAG_SAMPLE, step, r]);
            let batch: Vec<&VqaExample> = (0..train.batch_size).map(|_| &train_set[rng.random_range(0..train_set.len())]).collect();
            let (text, regions, targets) = encode(&batch, vocab, masking)?;
            let mut g = Graph::<f32>::new(true, derive_seed(train.seed, &[TAG_DROPOUT, step, r]));
            let out = model.forward(&mut g, &state.store, &text, &regions, &PairIndex::aligned(batch.len()))?;
            let logits = model.vqa_logits(&mut g, &state.store, &out)?;
            let loss = vqa_loss(&mut g, logits, &targets)?;
            if !g.value(loss).data()[0].is_finite() {
                return Err(Error::Divergence { step: step as usize });
            }
            state.store.zero_grads();
            g.backward(loss)?;
            g.accumulate_param_grads(&mut state.store);
            clip_gradients(&mut state.store, train.clip_norm)?;
            lamb_step(&mut state.store, &mut state.opt, train.schedule.lr_at(step), &train.optimizer)?;
        }
        accuracies.push(vqa_accuracy(model, &state.store, eval_set, vocab, masking)?);
    }
    let n = accuracies.len() as f64;
    let mean = accuracies.iter().sum::<f64>() / n;
    let std = (accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(VqaReport { accuracies, mean, std })
}

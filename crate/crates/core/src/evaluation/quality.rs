use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{linear, multi_head_attention, post_block, HeadConfig, LayerDescriptor, LayerStackConfig};
use crate::data::{Dataset, Vocabulary, CLS, PAD, SEP};
use crate::encoders::{encode_text, EncoderConfig, TextBatch};
use crate::error::{Error, Result};
use crate::losses::mlm_loss;
use crate::rng::{derive_seed, stream, TAG_DROPOUT, TAG_INIT, TAG_SAMPLE};
use crate::tensor::{Graph, ParamInit, ParameterStore, Tensor, Var, MASK_NEG};
use crate::training::{clip_gradients, lamb_step, LambConfig, OptimizerState, ScheduleConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct OverlapReport {
    pub mean: f64,
    pub pairs: usize,
}

/// Mean over a seeded sample of records of the share of caption words that
/// name a detected region's predicted class.
pub fn overlap_metric(ds: &Dataset, class_names: Option<&[String]>, sample_size: usize, seed: u64) -> Result<OverlapReport> {
    let names = class_names.ok_or_else(|| Error::config("overlap metric needs the class-name table"))?;
    if let Some(c) = ds.num_classes() {
        if names.len() < c {
            return Err(Error::config(format!("class-name table has {} entries, regions use {c} classes", names.len())));
        }
    }
    let n = sample_size.min(ds.len());
    if n == 0 {
        return Err(Error::config("overlap metric needs at least one record"));
    }
    let picks = if n == ds.len() {
        (0..n).collect()
    } else {
        rand::seq::index::sample(&mut stream(seed, &[TAG_SAMPLE]), ds.len(), n).into_vec()
    };
    let mut total = 0.0;
    for i in picks {
        let ex = &ds.examples()[i];
        let labels: HashSet<String> = ex
            .regions
            .iter()
            .flat_map(|r| names[r.argmax_label()].split_whitespace().map(str::to_lowercase).collect::<Vec<_>>())
            .collect();
        let words = &ex.caption;
        let hits = words.iter().filter(|w| labels.contains(&w.to_lowercase())).count();
        total += hits as f64 / words.len() as f64;
    }
    Ok(OverlapReport { mean: total / n as f64, pairs: n })
}

/// Small causal transformer used as a caption language model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmConfig {
    pub layers: usize,
    pub hidden: usize,
    pub num_heads: usize,
    pub ff_mult: usize,
    pub steps: u64,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_steps: u64,
    /// Token budget per caption including `<CLS>` and `<SEP>`.
    pub max_len: usize,
    pub init_std: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            hidden: 32,
            num_heads: 2,
            ff_mult: 4,
            steps: 2000,
            batch_size: 32,
            base_lr: 2e-3,
            warmup_steps: 100,
            max_len: 16,
            init_std: 0.02,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.batch_size == 0 || self.max_len < 2 {
            return Err(Error::config("eval.lm needs layers >= 1, batch_size >= 1 and max_len >= 2"));
        }
        HeadConfig::equal_split(self.hidden, self.num_heads)?;
        self.schedule().validate()
    }

    fn schedule(&self) -> ScheduleConfig {
        ScheduleConfig {
            base_lr: self.base_lr,
            warmup_steps: self.warmup_steps.min(self.steps.saturating_sub(1)),
            total_steps: self.steps.max(1),
            ..Default::default()
        }
    }

    fn stack(&self) -> Result<LayerStackConfig> {
        Ok(LayerStackConfig {
            layers: vec![LayerDescriptor::LangSelf; self.layers],
            hidden: self.hidden,
            heads: HeadConfig::equal_split(self.hidden, self.num_heads)?,
            cross_heads: None,
            ff_mult: self.ff_mult,
            dropout: 0.0,
            init_std: self.init_std,
        })
    }

    fn encoder(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            hidden: self.hidden,
            max_text_len: self.max_len,
            feature_dim: 1,
            per_layer_positions: false,
            init_std: self.init_std,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerplexityReport {
    pub perplexity: f64,
    pub eval_tokens: usize,
    pub train_captions: usize,
    pub steps: u64,
    pub vocab_size: usize,
}

struct Lm {
    cfg: LmConfig,
    stack: LayerStackConfig,
    encoder: EncoderConfig,
}

impl Lm {
    fn sequence(&self, vocab: &Vocabulary, words: &[String]) -> Vec<u32> {
        let mut s = vec![CLS];
        s.extend(words.iter().take(self.cfg.max_len - 2).map(|w| vocab.id_or_unk(w)));
        s.push(SEP);
        s
    }

    /// Mean next-token negative log-likelihood over the batch and its token count.
    fn nll(&self, g: &mut Graph<f32>, store: &ParameterStore<f32>, seqs: &[&[u32]]) -> Result<(Var, usize)> {
        let text = TextBatch::new(seqs)?;
        let (b, w) = (text.batch(), text.width);
        let mut x = encode_text(g, store, &self.encoder, &text)?;
        let mut bias = vec![MASK_NEG as f32; b * w * w];
        for (s, &len) in text.lens.iter().enumerate() {
            for i in 0..w {
                for j in 0..=i.min(len - 1) {
                    bias[(s * w + i) * w + j] = 0.0;
                }
            }
        }
        let bias = g.constant(Tensor::new(vec![b, w, w], bias)?);
        for l in 0..self.cfg.layers {
            let p = format!("b{l}");
            let a = multi_head_attention(g, store, &p, x, x, Some(bias), &self.stack.heads)?;
            x = post_block(g, store, &p, x, a, 0.0)?;
        }
        let flat = g.reshape(x, &[b * w, self.cfg.hidden])?;
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for (s, &len) in text.lens.iter().enumerate() {
            for i in 0..len - 1 {
                rows.push(s * w + i);
                targets.push(text.ids[s * w + i + 1] as usize);
            }
        }
        debug_assert!(targets.iter().all(|&t| t != PAD as usize));
        let h = g.gather(flat, &rows)?;
        let logits = linear(g, store, "lm", h)?;
        let loss = mlm_loss(g, logits, &targets)?.ok_or_else(|| Error::config("captions too short for a language model"))?;
        Ok((loss, targets.len()))
    }
}

/// Train a causal LM on `pretrain` captions and report its perplexity on
/// `eval` captions. Words unseen in pretraining map to `<UNK>`.
pub fn perplexity_probe(pretrain: &[Vec<String>], eval: &[Vec<String>], cfg: &LmConfig, seed: u64) -> Result<PerplexityReport> {
    cfg.validate()?;
    if pretrain.is_empty() || eval.is_empty() {
        return Err(Error::config("perplexity probe needs non-empty pretraining and evaluation captions"));
    }
    let vocab = Vocabulary::from_words(pretrain.iter().flatten());
    let lm = Lm { cfg: cfg.clone(), stack: cfg.stack()?, encoder: cfg.encoder(vocab.len()) };
    let mut store = ParameterStore::<f32>::new(derive_seed(seed, &[TAG_INIT]));
    lm.encoder.declare_text(&mut store)?;
    lm.stack.declare(&mut store)?;
    store.declare("lm.w", &[cfg.hidden, vocab.len()], ParamInit::TruncatedNormal(cfg.init_std))?;
    store.declare("lm.b", &[vocab.len()], ParamInit::Zeros)?;

    let train: Vec<Vec<u32>> = pretrain.iter().map(|c| lm.sequence(&vocab, c)).collect();
    let schedule = cfg.schedule();
    let opt_cfg = LambConfig::default();
    let mut opt = OptimizerState::new(&store);
    for step in 1..=cfg.steps {
        let mut rng = stream(seed, &[TAG_SAMPLE, step]);
        let batch: Vec<&[u32]> = (0..cfg.batch_size).map(|_| train[rng.random_range(0..train.len())].as_slice()).collect();
        let mut g = Graph::<f32>::new(true, derive_seed(seed, &[TAG_DROPOUT, step]));
        let (loss, _) = lm.nll(&mut g, &store, &batch)?;
        if !g.value(loss).data()[0].is_finite() {
            return Err(Error::Divergence { step: step as usize });
        }
        store.zero_grads();
        g.backward(loss)?;
        g.accumulate_param_grads(&mut store);
        drop(g);
        clip_gradients(&mut store, 1.0)?;
        lamb_step(&mut store, &mut opt, schedule.lr_at(step), &opt_cfg)?;
    }

    let held: Vec<Vec<u32>> = eval.iter().map(|c| lm.sequence(&vocab, c)).collect();
    let (mut total, mut count) = (0.0f64, 0usize);
    for chunk in held.chunks(64) {
        let refs: Vec<&[u32]> = chunk.iter().map(Vec::as_slice).collect();
        let mut g = Graph::<f32>::new(false, 0);
        let (loss, n) = lm.nll(&mut g, &store, &refs)?;
        total += g.value(loss).data()[0] as f64 * n as f64;
        count += n;
    }
    Ok(PerplexityReport {
        perplexity: (total / count as f64).exp(),
        eval_tokens: count,
        train_captions: pretrain.len(),
        steps: cfg.steps,
        vocab_size: vocab.len(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetQualityReport {
    pub overlap: OverlapReport,
    pub perplexity: PerplexityReport,
}

impl DatasetQualityReport {
    pub fn rows(&self) -> Vec<super::ReportRow> {
        vec![
            super::ReportRow { metric: "overlap".into(), k: None, value: self.overlap.mean, n: self.overlap.pairs },
            super::ReportRow {
                metric: "perplexity".into(),
                k: None,
                value: self.perplexity.perplexity,
                n: self.perplexity.eval_tokens,
            },
        ]
    }
}

/// Overlap of `pretrain` plus the perplexity of `eval` captions under an LM
/// trained on `pretrain` captions.
pub fn dataset_quality(
    pretrain: &Dataset,
    eval: &Dataset,
    class_names: Option<&[String]>,
    sample_size: usize,
    lm: &LmConfig,
    seed: u64,
) -> Result<DatasetQualityReport> {
    let overlap = overlap_metric(pretrain, class_names, sample_size, seed)?;
    let caps = |d: &Dataset| d.examples().iter().map(|e| e.caption.clone()).collect::<Vec<_>>();
    let perplexity = perplexity_probe(&caps(pretrain), &caps(eval), lm, seed)?;
    Ok(DatasetQualityReport { overlap, perplexity })
}

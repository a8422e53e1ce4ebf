//! Complete scoring models: the multimodal transformer, the joint-embedding
//! baseline, and the heads on top of them (ITM, MLM, MRM, VQA).

use serde::{Deserialize, Serialize};

use crate::attention::{
    linear, parse_layers, pool_streams, run_blocks, HeadConfig, LayerDescriptor, LayerStackConfig, PairIndex,
    StackContext, Stream,
};
use crate::encoders::{encode_regions, encode_text, EncoderConfig, RegionBatch, TextBatch};
use crate::error::{Error, Result};
use crate::tensor::{Float, Graph, ParamInit, ParameterStore, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Mmt,
    Baseline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub hidden: usize,
    pub num_heads: usize,
    /// Per-head width; when absent the hidden size is split evenly.
    pub head_dim: Option<usize>,
    /// Head count of the cross-modal blocks, at the same per-head width.
    pub cross_heads: Option<usize>,
    pub layers: Vec<String>,
    /// Depth of the baseline's text transformer.
    pub baseline_text_layers: usize,
    pub ff_mult: usize,
    pub dropout: f64,
    pub init_std: f64,
    pub per_layer_positions: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::Mmt,
            hidden: 64,
            num_heads: 4,
            head_dim: None,
            cross_heads: None,
            layers: ["lang_self", "lang_self", "mm:coattention", "mm:coattention"].map(String::from).to_vec(),
            baseline_text_layers: 2,
            ff_mult: 4,
            dropout: 0.1,
            init_std: 0.02,
            per_layer_positions: true,
        }
    }
}

/// Sizes dictated by the data rather than the architecture.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
}

/// A validated model: encoder and stack configuration plus head shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub dims: ModelDims,
    pub encoder: EncoderConfig,
    pub stack: LayerStackConfig,
}

/// Forward results for a set of scored pairs.
pub struct ModelOutput {
    pub lang: Stream,
    pub img: Stream,
    pub pooled_lang: Var,
    pub pooled_img: Var,
    /// `[P]` image-text match score per pair.
    pub itm: Var,
}

/// Per-item hidden states before any cross-modal block.
pub struct ItemStates {
    pub lang: Stream,
    pub img: Stream,
}

impl Model {
    pub fn new(cfg: &ModelConfig, dims: ModelDims) -> Result<Self> {
        let heads = match cfg.head_dim {
            Some(d) => HeadConfig::fixed_dim(cfg.num_heads, d)?,
            None => HeadConfig::equal_split(cfg.hidden, cfg.num_heads)?,
        };
        let cross_heads = cfg.cross_heads.map(|n| HeadConfig::fixed_dim(n, heads.head_dim)).transpose()?;
        let layers = match cfg.architecture {
            Architecture::Mmt => {
                if cfg.layers.is_empty() {
                    return Err(Error::config("model.layers must not be empty"));
                }
                parse_layers(&cfg.layers)?
            }
            Architecture::Baseline => vec![LayerDescriptor::LangSelf; cfg.baseline_text_layers],
        };
        if !(cfg.init_std > 0.0) {
            return Err(Error::config("model.init_std must be positive"));
        }
        if dims.max_text_len < 3 || dims.vocab_size == 0 || dims.feature_dim == 0 || dims.num_classes == 0 {
            return Err(Error::config(format!("inconsistent model dimensions {dims:?}")));
        }
        let encoder = EncoderConfig {
            vocab_size: dims.vocab_size,
            hidden: cfg.hidden,
            max_text_len: dims.max_text_len,
            feature_dim: dims.feature_dim,
            per_layer_positions: cfg.per_layer_positions,
            init_std: cfg.init_std,
        };
        let stack = LayerStackConfig {
            layers,
            hidden: cfg.hidden,
            heads,
            cross_heads,
            ff_mult: cfg.ff_mult,
            dropout: cfg.dropout,
            init_std: cfg.init_std,
        };
        stack.validate()?;
        Ok(Self { cfg: cfg.clone(), dims, encoder, stack })
    }

    pub fn is_baseline(&self) -> bool {
        self.cfg.architecture == Architecture::Baseline
    }

    /// Whether every pair score is a function of independently computed
    /// per-caption and per-image features.
    pub fn is_factorized(&self) -> bool {
        self.is_baseline() || self.stack.is_factorized()
    }

    /// Declare backbone and pretraining heads (ITM always; MLM/MRM for the MMT).
    pub fn declare(&self, store: &mut ParameterStore<impl Float>) -> Result<()> {
        let (h, std) = (self.cfg.hidden, ParamInit::TruncatedNormal(self.cfg.init_std));
        self.encoder.declare_text(store)?;
        if self.is_baseline() {
            store.declare("base.img.w", &[self.dims.feature_dim, h], std)?;
            store.declare("base.img.b", &[h], ParamInit::Zeros)?;
        } else {
            self.encoder.declare_regions(store)?;
        }
        self.stack.declare(store)?;
        store.declare("itm.w1", &[h, h], std)?;
        store.declare("itm.b1", &[h], ParamInit::Zeros)?;
        store.declare("itm.w2", &[h, 1], std)?;
        store.declare("itm.b2", &[1], ParamInit::Zeros)?;
        if !self.is_baseline() {
            store.declare("mlm.w", &[h, self.dims.vocab_size], std)?;
            store.declare("mlm.b", &[self.dims.vocab_size], ParamInit::Zeros)?;
            store.declare("mrm.w", &[h, self.dims.num_classes], std)?;
            store.declare("mrm.b", &[self.dims.num_classes], ParamInit::Zeros)?;
        }
        Ok(())
    }

    /// Replace (or add) the VQA head with one drawn from `seed`.
    pub fn declare_vqa_head<F: Float>(&self, store: &mut ParameterStore<F>, answers: usize, seed: u64) -> Result<()> {
        if answers == 0 {
            return Err(Error::config("answer_count must be positive"));
        }
        store.remove_prefix("vqa.");
        let (h, std) = (self.cfg.hidden, ParamInit::TruncatedNormal(self.cfg.init_std));
        let mut fresh = ParameterStore::<F>::new(seed);
        fresh.declare("vqa.w1", &[h, h], std)?;
        fresh.declare("vqa.b1", &[h], ParamInit::Zeros)?;
        fresh.declare("vqa.w2", &[h, answers], std)?;
        fresh.declare("vqa.b2", &[answers], ParamInit::Zeros)?;
        for (name, value) in fresh.iter() {
            store.insert(name, value.clone())?;
        }
        Ok(())
    }

    fn context<'a>(&'a self, text: &'a TextBatch, regions: &'a RegionBatch, pairs: &'a PairIndex) -> StackContext<'a> {
        StackContext { cfg: &self.stack, encoder: &self.encoder, text, regions, pairs }
    }

    /// Embed every caption and image and run the blocks that never mix them.
    pub fn encode_items<F: Float>(
        &self,
        g: &mut Graph<F>,
        store: &ParameterStore<F>,
        text: &TextBatch,
        regions: &RegionBatch,
    ) -> Result<ItemStates> {
        let lang = Stream::per_item(encode_text(g, store, &self.encoder, text)?, text.batch());
        let img = if self.is_baseline() {
            if regions.dim != self.dims.feature_dim {
                return Err(Error::Shape(format!(
                    "region features have width {}, model expects {}",
                    regions.dim, self.dims.feature_dim
                )));
            }
            let avg = g.constant(regions.averaged_features());
            let i = linear(g, store, "base.img", avg)?;
            let i = g.reshape(i, &[regions.batch(), 1, self.cfg.hidden])?;
            Stream::per_item(i, regions.batch())
        } else {
            Stream::per_item(encode_regions(g, store, &self.encoder, regions)?, regions.batch())
        };
        let prefix = self.stack.factorized_prefix();
        let empty = PairIndex { image: vec![], caption: vec![] };
        let (lang, img) = run_blocks(g, store, &self.context(text, regions, &empty), lang, img, 0..prefix)?;
        Ok(ItemStates { lang, img })
    }

    /// Finish the stack for `pairs` from per-item states and score each pair.
    pub fn score_pairs<F: Float>(
        &self,
        g: &mut Graph<F>,
        store: &ParameterStore<F>,
        text: &TextBatch,
        regions: &RegionBatch,
        items: ItemStates,
        pairs: &PairIndex,
    ) -> Result<ModelOutput> {
        let ctx = self.context(text, regions, pairs);
        let (prefix, n) = (self.stack.factorized_prefix(), self.stack.blocks().len());
        let (lang, img) = run_blocks(g, store, &ctx, items.lang, items.img, prefix..n)?;
        let out = pool_streams(g, lang, img, pairs)?;
        let itm = self.match_scores(g, store, out.pooled_lang, out.pooled_img)?;
        Ok(ModelOutput { lang: out.lang, img: out.img, pooled_lang: out.pooled_lang, pooled_img: out.pooled_img, itm })
    }

    /// `[P]` match scores from pooled `[P, H]` features.
    pub fn match_scores<F: Float>(
        &self,
        g: &mut Graph<F>,
        store: &ParameterStore<F>,
        pooled_lang: Var,
        pooled_img: Var,
    ) -> Result<Var> {
        let joint = g.mul(pooled_lang, pooled_img)?;
        let itm = two_layer(g, store, "itm", joint)?;
        let p = g.shape(itm)[0];
        g.reshape(itm, &[p])
    }

    pub fn forward<F: Float>(
        &self,
        g: &mut Graph<F>,
        store: &ParameterStore<F>,
        text: &TextBatch,
        regions: &RegionBatch,
        pairs: &PairIndex,
    ) -> Result<ModelOutput> {
        let items = self.encode_items(g, store, text, regions)?;
        self.score_pairs(g, store, text, regions, items, pairs)
    }

    /// Vocabulary logits `[M, V]` at `(pair, position)` sites of the language stream.
    pub fn mlm_logits<F: Float>(
        &self,
        g: &mut Graph<F>,
        store: &ParameterStore<F>,
        out: &ModelOutput,
        pairs: &PairIndex,
        sites: &[(usize, usize)],
    ) -> Result<Var> {
        let x = gather_sites(g, &out.lang, &pairs.caption, sites)?;
        linear(g, store, "mlm", x)
    }

    /// Class logits `[M, C]` at `(pair, slot)` sites of the image stream.
    pub fn mrm_logits<F: Float>(
        &self,
        g: &mut Graph<F>,
        store: &ParameterStore<F>,
        out: &ModelOutput,
        pairs: &PairIndex,
        sites: &[(usize, usize)],
    ) -> Result<Var> {
        let x = gather_sites(g, &out.img, &pairs.image, sites)?;
        linear(g, store, "mrm", x)
    }

    /// `[P, A]` answer logits from the pooled multimodal feature.
    pub fn vqa_logits<F: Float>(&self, g: &mut Graph<F>, store: &ParameterStore<F>, out: &ModelOutput) -> Result<Var> {
        let joint = g.mul(out.pooled_lang, out.pooled_img)?;
        two_layer(g, store, "vqa", joint)
    }
}

/// `W2 · GELU(W1 · x + b1) + b2` with parameters `{p}.{w1,b1,w2,b2}`.
fn two_layer<F: Float>(g: &mut Graph<F>, store: &ParameterStore<F>, p: &str, x: Var) -> Result<Var> {
    let (w1, b1) = (g.param(store, &format!("{p}.w1"))?, g.param(store, &format!("{p}.b1"))?);
    let (w2, b2) = (g.param(store, &format!("{p}.w2"))?, g.param(store, &format!("{p}.b2"))?);
    let h = g.matmul(x, w1)?;
    let h = g.add(h, b1)?;
    let h = g.gelu(h);
    let y = g.matmul(h, w2)?;
    g.add(y, b2)
}

fn gather_sites<F: Float>(
    g: &mut Graph<F>,
    s: &Stream,
    pair_items: &[usize],
    sites: &[(usize, usize)],
) -> Result<Var> {
    let sh = g.shape(s.x).to_vec();
    let (rows, width, h) = (sh[0], sh[1], sh[2]);
    let mut idx = Vec::with_capacity(sites.len());
    for &(p, pos) in sites {
        let item = *pair_items.get(p).ok_or(Error::Index { id: p, extent: pair_items.len() })?;
        if pos >= width {
            return Err(Error::Index { id: pos, extent: width });
        }
        idx.push(s.row_for(p, item) * width + pos);
    }
    let flat = g.reshape(s.x, &[rows * width, h])?;
    g.gather(flat, &idx)
}

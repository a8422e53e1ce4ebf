//! Multi-head attention and the five cross-modal wirings, assembled into
//! configurable layer stacks.
//!
//! Streams stay per item (one row per caption or image) until a block needs
//! both modalities at once; only then are they gathered into one row per
//! (image, caption) pair. Stacks without such blocks never pair, which is what
//! makes modality-specific models cheap to score exhaustively.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoders::{bias_tensor, reinject_positions, EncoderConfig, RegionBatch, TextBatch, LN_EPS};
use crate::error::{Error, Result};
use crate::tensor::{Float, Graph, ParamInit, ParameterStore, Var, MASK_NEG};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    Merged,
    Coattention,
    LanguageQuery,
    ImageQuery,
    ModalitySpecific,
}

impl AttentionKind {
    pub const ALL: [AttentionKind; 5] = [
        AttentionKind::Coattention,
        AttentionKind::Merged,
        AttentionKind::LanguageQuery,
        AttentionKind::ImageQuery,
        AttentionKind::ModalitySpecific,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttentionKind::Merged => "merged",
            AttentionKind::Coattention => "coattention",
            AttentionKind::LanguageQuery => "language_query",
            AttentionKind::ImageQuery => "image_query",
            AttentionKind::ModalitySpecific => "modality_specific",
        }
    }

    /// Whether the language output depends on the image stream.
    pub fn lang_reads_image(self) -> bool {
        matches!(self, AttentionKind::Merged | AttentionKind::Coattention | AttentionKind::LanguageQuery)
    }

    /// Whether the image output depends on the language stream.
    pub fn image_reads_lang(self) -> bool {
        matches!(self, AttentionKind::Merged | AttentionKind::Coattention | AttentionKind::ImageQuery)
    }
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown attention kind `{s}`")))
    }
}

/// Head layout. `num_heads * head_dim` need not equal the hidden size; the
/// output projection maps back to it either way.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub num_heads: usize,
    pub head_dim: usize,
}

impl HeadConfig {
    /// Split `hidden` evenly across heads.
    pub fn equal_split(hidden: usize, num_heads: usize) -> Result<Self> {
        if num_heads == 0 || hidden % num_heads != 0 {
            return Err(Error::config(format!("hidden size {hidden} is not divisible by {num_heads} heads")));
        }
        Ok(Self { num_heads, head_dim: hidden / num_heads })
    }

    pub fn fixed_dim(num_heads: usize, head_dim: usize) -> Result<Self> {
        if num_heads == 0 || head_dim == 0 {
            return Err(Error::config("heads and head_dim must be positive"));
        }
        Ok(Self { num_heads, head_dim })
    }

    pub fn inner(&self) -> usize {
        self.num_heads * self.head_dim
    }
}

/// One entry of the serialized layer schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerDescriptor {
    LangSelf,
    ImgSelf,
    Multimodal(AttentionKind),
}

impl FromStr for LayerDescriptor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lang_self" => Ok(Self::LangSelf),
            "img_self" => Ok(Self::ImgSelf),
            _ => match s.strip_prefix("mm:") {
                Some(kind) => Ok(Self::Multimodal(kind.parse()?)),
                None => Err(Error::config(format!("unknown layer descriptor `{s}`"))),
            },
        }
    }
}

impl fmt::Display for LayerDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerDescriptor::LangSelf => f.write_str("lang_self"),
            LayerDescriptor::ImgSelf => f.write_str("img_self"),
            LayerDescriptor::Multimodal(k) => write!(f, "mm:{k}"),
        }
    }
}

pub fn parse_layers<S: AsRef<str>>(layers: &[S]) -> Result<Vec<LayerDescriptor>> {
    layers.iter().map(|s| s.as_ref().parse()).collect()
}

/// Executable unit produced by expanding descriptors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Block {
    LangSelf { reinject: bool },
    ImgSelf,
    Cross(AttentionKind),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerStackConfig {
    pub layers: Vec<LayerDescriptor>,
    pub hidden: usize,
    pub heads: HeadConfig,
    /// Heads of cross-modal blocks; `heads` when absent.
    pub cross_heads: Option<HeadConfig>,
    pub ff_mult: usize,
    pub dropout: f64,
    pub init_std: f64,
}

impl LayerStackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ff_mult == 0 || self.hidden == 0 {
            return Err(Error::config("hidden size and feed-forward multiplier must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// A multimodal descriptor becomes a language self-attention block and an
    /// image self-attention block followed by the cross-modal block. Language
    /// blocks from `lang_self` descriptors re-inject positions.
    pub fn blocks(&self) -> Vec<Block> {
        let mut out = Vec::new();
        for d in &self.layers {
            match d {
                LayerDescriptor::LangSelf => out.push(Block::LangSelf { reinject: true }),
                LayerDescriptor::ImgSelf => out.push(Block::ImgSelf),
                LayerDescriptor::Multimodal(k) => {
                    out.push(Block::LangSelf { reinject: false });
                    out.push(Block::ImgSelf);
                    out.push(Block::Cross(*k));
                }
            }
        }
        out
    }

    /// Number of leading blocks that run per item, before any pairing.
    pub fn factorized_prefix(&self) -> usize {
        self.blocks()
            .iter()
            .position(|b| matches!(b, Block::Cross(k) if *k != AttentionKind::ModalitySpecific))
            .unwrap_or(usize::MAX)
            .min(self.blocks().len())
    }

    /// True when no block ever mixes the two modalities.
    pub fn is_factorized(&self) -> bool {
        self.factorized_prefix() == self.blocks().len()
    }

    pub fn cross_head_config(&self) -> &HeadConfig {
        self.cross_heads.as_ref().unwrap_or(&self.heads)
    }

    fn ffn_width(&self) -> usize {
        self.ff_mult * self.hidden
    }

    pub fn declare(&self, store: &mut ParameterStore<impl Float>) -> Result<()> {
        self.validate()?;
        for (i, b) in self.blocks().iter().enumerate() {
            let p = format!("b{i}");
            match b {
                Block::LangSelf { .. } | Block::ImgSelf => {
                    self.declare_attn(store, &p, &self.heads)?;
                    self.declare_post(store, &p, true)?;
                }
                Block::Cross(kind) => {
                    let (lang, img) = (format!("{p}.lang"), format!("{p}.img"));
                    let heads = self.cross_head_config();
                    match kind {
                        AttentionKind::Merged => {
                            self.declare_attn(store, &p, heads)?;
                            self.declare_post(store, &lang, true)?;
                            self.declare_post(store, &img, true)?;
                        }
                        AttentionKind::Coattention | AttentionKind::ModalitySpecific => {
                            self.declare_attn(store, &lang, heads)?;
                            self.declare_attn(store, &img, heads)?;
                            self.declare_post(store, &lang, true)?;
                            self.declare_post(store, &img, true)?;
                        }
                        AttentionKind::LanguageQuery => {
                            self.declare_attn(store, &lang, heads)?;
                            self.declare_post(store, &lang, true)?;
                            self.declare_post(store, &img, false)?;
                        }
                        AttentionKind::ImageQuery => {
                            self.declare_attn(store, &img, heads)?;
                            self.declare_post(store, &img, true)?;
                            self.declare_post(store, &lang, false)?;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn declare_attn(&self, store: &mut ParameterStore<impl Float>, p: &str, heads: &HeadConfig) -> Result<()> {
        let (h, inner, std) = (self.hidden, heads.inner(), ParamInit::TruncatedNormal(self.init_std));
        for proj in ["q", "k", "v"] {
            store.declare(&format!("{p}.attn.{proj}.w"), &[h, inner], std)?;
            store.declare(&format!("{p}.attn.{proj}.b"), &[inner], ParamInit::Zeros)?;
        }
        store.declare(&format!("{p}.attn.o.w"), &[inner, h], std)?;
        store.declare(&format!("{p}.attn.o.b"), &[h], ParamInit::Zeros)?;
        Ok(())
    }

    fn declare_post(&self, store: &mut ParameterStore<impl Float>, p: &str, with_attn_norm: bool) -> Result<()> {
        let (h, f, std) = (self.hidden, self.ffn_width(), ParamInit::TruncatedNormal(self.init_std));
        if with_attn_norm {
            store.declare(&format!("{p}.ln1.g"), &[h], ParamInit::Ones)?;
            store.declare(&format!("{p}.ln1.b"), &[h], ParamInit::Zeros)?;
        }
        store.declare(&format!("{p}.ffn.w1"), &[h, f], std)?;
        store.declare(&format!("{p}.ffn.b1"), &[f], ParamInit::Zeros)?;
        store.declare(&format!("{p}.ffn.w2"), &[f, h], std)?;
        store.declare(&format!("{p}.ffn.b2"), &[h], ParamInit::Zeros)?;
        store.declare(&format!("{p}.ln2.g"), &[h], ParamInit::Ones)?;
        store.declare(&format!("{p}.ln2.b"), &[h], ParamInit::Zeros)?;
        Ok(())
    }
}

/// Closed-form parameter count of one attention unit.
pub fn attention_param_count(hidden: usize, heads: &HeadConfig) -> usize {
    let inner = heads.inner();
    3 * (hidden * inner + inner) + inner * hidden + hidden
}

/// Closed-form parameter count of a residual feed-forward unit.
pub fn post_param_count(hidden: usize, ff_mult: usize, with_attn_norm: bool) -> usize {
    let f = ff_mult * hidden;
    let norms = if with_attn_norm { 4 * hidden } else { 2 * hidden };
    norms + hidden * f + f + f * hidden + hidden
}

/// `x · W + b` with parameters `{p}.w`, `{p}.b`.
pub fn linear<F: Float>(g: &mut Graph<F>, store: &ParameterStore<F>, p: &str, x: Var) -> Result<Var> {
    let w = g.param(store, &format!("{p}.w"))?;
    let b = g.param(store, &format!("{p}.b"))?;
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

/// Scaled dot-product attention with learned projections: queries from `q_src [B, Lq, H]`,
/// keys and values from `kv_src [B, Lk, H]`, additive `bias [B|1, Lq|1, Lk]`.
pub fn multi_head_attention<F: Float>(
    g: &mut Graph<F>,
    store: &ParameterStore<F>,
    prefix: &str,
    q_src: Var,
    kv_src: Var,
    bias: Option<Var>,
    heads: &HeadConfig,
) -> Result<Var> {
    let q = linear(g, store, &format!("{prefix}.attn.q"), q_src)?;
    let k = linear(g, store, &format!("{prefix}.attn.k"), kv_src)?;
    let v = linear(g, store, &format!("{prefix}.attn.v"), kv_src)?;
    let a = g.attention(q, k, v, bias, heads.num_heads)?;
    linear(g, store, &format!("{prefix}.attn.o"), a)
}

pub fn layer_norm<F: Float>(g: &mut Graph<F>, store: &ParameterStore<F>, p: &str, x: Var) -> Result<Var> {
    let gain = g.param(store, &format!("{p}.g"))?;
    let bias = g.param(store, &format!("{p}.b"))?;
    g.layer_norm(x, gain, bias, LN_EPS)
}

fn feed_forward<F: Float>(g: &mut Graph<F>, store: &ParameterStore<F>, p: &str, x: Var, dropout: f64) -> Result<Var> {
    let w1 = g.param(store, &format!("{p}.ffn.w1"))?;
    let b1 = g.param(store, &format!("{p}.ffn.b1"))?;
    let w2 = g.param(store, &format!("{p}.ffn.w2"))?;
    let b2 = g.param(store, &format!("{p}.ffn.b2"))?;
    let h = g.matmul(x, w1)?;
    let h = g.add(h, b1)?;
    let h = g.gelu(h);
    let h = g.matmul(h, w2)?;
    let h = g.add(h, b2)?;
    g.dropout(h, dropout)
}

/// `LN2(h + FFN(h))` with `h = LN1(x + attn)`.
pub fn post_block<F: Float>(
    g: &mut Graph<F>,
    store: &ParameterStore<F>,
    p: &str,
    x: Var,
    attn: Var,
    dropout: f64,
) -> Result<Var> {
    let a = g.dropout(attn, dropout)?;
    let h = g.add(x, a)?;
    let h = layer_norm(g, store, &format!("{p}.ln1"), h)?;
    let f = feed_forward(g, store, p, h, dropout)?;
    let o = g.add(h, f)?;
    layer_norm(g, store, &format!("{p}.ln2"), o)
}

/// Attention-free pass for the stream an asymmetric block does not query with.
fn ffn_only<F: Float>(g: &mut Graph<F>, store: &ParameterStore<F>, p: &str, x: Var, dropout: f64) -> Result<Var> {
    let f = feed_forward(g, store, p, x, dropout)?;
    let o = g.add(x, f)?;
    layer_norm(g, store, &format!("{p}.ln2"), o)
}

/// Additive masks aligned with the rows of the two streams.
#[derive(Clone, Copy, Debug)]
pub struct LayerMasks {
    /// `[R, 1, Lt]` text positions visible to text queries.
    pub text_self: Var,
    /// `[R, 1, Lt]` text positions visible to image queries (no `<SEP>`).
    pub text_cross: Var,
    /// `[R, 1, Li]` valid image slots.
    pub img_self: Var,
    /// `[R, Lt+Li, Lt+Li]` for merged attention over the concatenated streams.
    pub merged: Option<Var>,
}

/// Merged-attention mask rows: text queries see `text_self ++ img`, image
/// queries `text_cross ++ img`. With `block`, cross-modal logits are masked
/// instead, which reduces merged attention to per-modality self-attention.
pub fn merged_bias<F: Float>(
    text_self: &[&[f64]],
    text_cross: &[&[f64]],
    img: &[&[f64]],
    block: bool,
) -> crate::tensor::Tensor<F> {
    let (lt, li) = (text_self[0].len(), img[0].len());
    let l = lt + li;
    let neg = |n: usize| std::iter::repeat_n(MASK_NEG, n);
    let mut data = Vec::with_capacity(text_self.len() * l * l);
    for r in 0..text_self.len() {
        for _ in 0..lt {
            if block {
                data.extend(text_self[r].iter().copied().chain(neg(li)));
            } else {
                data.extend(text_self[r].iter().chain(img[r]).copied());
            }
        }
        for _ in 0..li {
            if block {
                data.extend(neg(lt).chain(img[r].iter().copied()));
            } else {
                data.extend(text_cross[r].iter().chain(img[r]).copied());
            }
        }
    }
    crate::tensor::Tensor::new(vec![text_self.len(), l, l], data.into_iter().map(F::of).collect()).unwrap()
}

/// One cross-modal block. For every kind except modality-specific both
/// streams must have the same row count (one row per pair).
#[allow(clippy::too_many_arguments)]
pub fn multimodal_layer<F: Float>(
    g: &mut Graph<F>,
    store: &ParameterStore<F>,
    prefix: &str,
    kind: AttentionKind,
    lang: Var,
    img: Var,
    masks: &LayerMasks,
    cfg: &LayerStackConfig,
) -> Result<(Var, Var)> {
    let (lp, ip) = (format!("{prefix}.lang"), format!("{prefix}.img"));
    let d = cfg.dropout;
    let h = cfg.cross_head_config();
    match kind {
        AttentionKind::Merged => {
            let lt = g.shape(lang)[1];
            let li = g.shape(img)[1];
            let bias = masks.merged.ok_or_else(|| Error::config("merged attention needs a merged mask"))?;
            let x = g.concat(&[lang, img], 1)?;
            let a = multi_head_attention(g, store, prefix, x, x, Some(bias), h)?;
            let al = g.slice(a, 1, 0, lt)?;
            let ai = g.slice(a, 1, lt, li)?;
            Ok((post_block(g, store, &lp, lang, al, d)?, post_block(g, store, &ip, img, ai, d)?))
        }
        AttentionKind::Coattention => {
            let al = multi_head_attention(g, store, &lp, lang, img, Some(masks.img_self), h)?;
            let ai = multi_head_attention(g, store, &ip, img, lang, Some(masks.text_cross), h)?;
            Ok((post_block(g, store, &lp, lang, al, d)?, post_block(g, store, &ip, img, ai, d)?))
        }
        AttentionKind::LanguageQuery => {
            let al = multi_head_attention(g, store, &lp, lang, img, Some(masks.img_self), h)?;
            Ok((post_block(g, store, &lp, lang, al, d)?, ffn_only(g, store, &ip, img, d)?))
        }
        AttentionKind::ImageQuery => {
            let ai = multi_head_attention(g, store, &ip, img, lang, Some(masks.text_cross), h)?;
            Ok((ffn_only(g, store, &lp, lang, d)?, post_block(g, store, &ip, img, ai, d)?))
        }
        AttentionKind::ModalitySpecific => {
            let al = multi_head_attention(g, store, &lp, lang, lang, Some(masks.text_self), h)?;
            let ai = multi_head_attention(g, store, &ip, img, img, Some(masks.img_self), h)?;
            Ok((post_block(g, store, &lp, lang, al, d)?, post_block(g, store, &ip, img, ai, d)?))
        }
    }
}

/// Image/caption index per scored pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairIndex {
    pub image: Vec<usize>,
    pub caption: Vec<usize>,
}

impl PairIndex {
    /// Pair `i` = (image `i`, caption `i`).
    pub fn aligned(n: usize) -> Self {
        Self { image: (0..n).collect(), caption: (0..n).collect() }
    }

    pub fn from_pairs(pairs: &[(usize, usize)]) -> Self {
        Self { image: pairs.iter().map(|p| p.0).collect(), caption: pairs.iter().map(|p| p.1).collect() }
    }

    pub fn len(&self) -> usize {
        self.image.len()
    }

    pub fn is_empty(&self) -> bool {
        self.image.is_empty()
    }
}

/// Hidden states of one modality. `items[r]` is the caption or image behind row
/// `r`; once `paired`, row `r` belongs to pair `r`.
#[derive(Clone, Debug)]
pub struct Stream {
    pub x: Var,
    pub items: Vec<usize>,
    pub paired: bool,
}

impl Stream {
    pub fn per_item(x: Var, n: usize) -> Self {
        Self { x, items: (0..n).collect(), paired: false }
    }

    /// Row holding pair `p`, given the pair's item in this modality.
    pub fn row_for(&self, p: usize, item: usize) -> usize {
        if self.paired {
            p
        } else {
            item
        }
    }

    fn pair_up<F: Float>(&mut self, g: &mut Graph<F>, pair_items: &[usize]) -> Result<()> {
        if !self.paired {
            self.x = g.gather(self.x, pair_items)?;
            self.items = pair_items.to_vec();
            self.paired = true;
        }
        Ok(())
    }
}

fn rows<'a>(table: &'a [Vec<f64>], items: &[usize]) -> Vec<&'a [f64]> {
    items.iter().map(|&i| table[i].as_slice()).collect()
}

/// Everything a block needs besides parameters.
pub struct StackContext<'a> {
    pub cfg: &'a LayerStackConfig,
    pub encoder: &'a EncoderConfig,
    pub text: &'a TextBatch,
    pub regions: &'a RegionBatch,
    pub pairs: &'a PairIndex,
}

/// Run `blocks[range]` on the two streams, pairing them on demand.
pub fn run_blocks<F: Float>(
    g: &mut Graph<F>,
    store: &ParameterStore<F>,
    ctx: &StackContext<'_>,
    mut lang: Stream,
    mut img: Stream,
    range: Range<usize>,
) -> Result<(Stream, Stream)> {
    let blocks = ctx.cfg.blocks();
    for (i, block) in blocks.iter().enumerate().take(range.end).skip(range.start) {
        let p = format!("b{i}");
        match *block {
            Block::LangSelf { reinject } => {
                let x = if reinject { reinject_positions(g, store, ctx.encoder, lang.x)? } else { lang.x };
                let bias = g.constant(bias_tensor(&rows(&ctx.text.self_bias, &lang.items)));
                let a = multi_head_attention(g, store, &p, x, x, Some(bias), &ctx.cfg.heads)?;
                lang.x = post_block(g, store, &p, x, a, ctx.cfg.dropout)?;
            }
            Block::ImgSelf => {
                let bias = g.constant(bias_tensor(&rows(&ctx.regions.self_bias, &img.items)));
                let a = multi_head_attention(g, store, &p, img.x, img.x, Some(bias), &ctx.cfg.heads)?;
                img.x = post_block(g, store, &p, img.x, a, ctx.cfg.dropout)?;
            }
            Block::Cross(kind) => {
                if kind != AttentionKind::ModalitySpecific {
                    lang.pair_up(g, &ctx.pairs.caption)?;
                    img.pair_up(g, &ctx.pairs.image)?;
                }
                let ts = rows(&ctx.text.self_bias, &lang.items);
                let tc = rows(&ctx.text.cross_bias, &lang.items);
                let is = rows(&ctx.regions.self_bias, &img.items);
                let merged = (kind == AttentionKind::Merged).then(|| g.constant(merged_bias(&ts, &tc, &is, false)));
                let masks = LayerMasks {
                    text_self: g.constant(bias_tensor(&ts)),
                    text_cross: g.constant(bias_tensor(&tc)),
                    img_self: g.constant(bias_tensor(&is)),
                    merged,
                };
                let (l, m) = multimodal_layer(g, store, &p, kind, lang.x, img.x, &masks, ctx.cfg)?;
                lang.x = l;
                img.x = m;
            }
        }
    }
    Ok((lang, img))
}

/// Row 0 of every row of `x [R, L, H]`, then gathered per pair when needed.
fn pooled<F: Float>(g: &mut Graph<F>, s: &Stream, pair_items: &[usize]) -> Result<Var> {
    let sh = g.shape(s.x).to_vec();
    let first = g.slice(s.x, 1, 0, 1)?;
    let first = g.reshape(first, &[sh[0], sh[2]])?;
    if s.paired {
        Ok(first)
    } else {
        g.gather(first, pair_items)
    }
}

pub struct StackOutput {
    pub lang: Stream,
    pub img: Stream,
    /// `[P, H]` final `<CLS>` state per pair.
    pub pooled_lang: Var,
    /// `[P, H]` final averaged-slot state per pair.
    pub pooled_img: Var,
}

/// Pool the final streams per pair.
pub fn pool_streams<F: Float>(g: &mut Graph<F>, lang: Stream, img: Stream, pairs: &PairIndex) -> Result<StackOutput> {
    let pooled_lang = pooled(g, &lang, &pairs.caption)?;
    let pooled_img = pooled(g, &img, &pairs.image)?;
    Ok(StackOutput { lang, img, pooled_lang, pooled_img })
}

/// Apply the whole schedule to embedded streams (`lang_emb [Nt, Lt, H]`,
/// `img_emb [Ni, Li, H]`) and pool per pair.
pub fn stack_forward<F: Float>(
    g: &mut Graph<F>,
    store: &ParameterStore<F>,
    ctx: &StackContext<'_>,
    lang_emb: Var,
    img_emb: Var,
) -> Result<StackOutput> {
    let lang = Stream::per_item(lang_emb, ctx.text.batch());
    let img = Stream::per_item(img_emb, ctx.regions.batch());
    let n = ctx.cfg.blocks().len();
    let (lang, img) = run_blocks(g, store, ctx, lang, img, 0..n)?;
    pool_streams(g, lang, img, ctx.pairs)
}

#[cfg(test)]
mod tests;

//! Input embeddings: token + position + segment for captions, feature + box
//! projections for regions, and per-layer positional re-injection.

use serde::{Deserialize, Serialize};

use crate::data::{MaskedExample, PAD, SEP};
use crate::error::{Error, Result};
use crate::tensor::{Float, Graph, ParamInit, ParameterStore, Tensor, Var, MASK_NEG};

/// Width of the box encoding `(x1, y1, x2, y2, area)`.
pub const BOX_DIM: usize = 5;
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub max_text_len: usize,
    pub feature_dim: usize,
    pub per_layer_positions: bool,
    pub init_std: f64,
}

impl EncoderConfig {
    pub fn declare(&self, store: &mut ParameterStore<impl Float>) -> Result<()> {
        self.declare_text(store)?;
        self.declare_regions(store)
    }

    pub fn declare_text(&self, store: &mut ParameterStore<impl Float>) -> Result<()> {
        let (h, std) = (self.hidden, ParamInit::TruncatedNormal(self.init_std));
        store.declare("emb.tok", &[self.vocab_size, h], std)?;
        store.declare("emb.pos", &[self.max_text_len, h], std)?;
        store.declare("emb.seg", &[h], std)?;
        store.declare("emb.ln.g", &[h], ParamInit::Ones)?;
        store.declare("emb.ln.b", &[h], ParamInit::Zeros)
    }

    pub fn declare_regions(&self, store: &mut ParameterStore<impl Float>) -> Result<()> {
        let (h, std) = (self.hidden, ParamInit::TruncatedNormal(self.init_std));
        store.declare("img.feat.w", &[self.feature_dim, h], std)?;
        store.declare("img.feat.b", &[h], ParamInit::Zeros)?;
        store.declare("img.box.w", &[BOX_DIM, h], std)?;
        store.declare("img.ln.g", &[h], ParamInit::Ones)?;
        store.declare("img.ln.b", &[h], ParamInit::Zeros)?;
        Ok(())
    }
}

fn bias_row(len: usize, valid: impl Fn(usize) -> bool) -> Vec<f64> {
    (0..len).map(|j| if valid(j) { 0.0 } else { MASK_NEG }).collect()
}

/// Stack per-row additive masks into a `[rows, 1, len]` constant.
pub fn bias_tensor<F: Float>(rows: &[&[f64]]) -> Tensor<F> {
    let len = rows[0].len();
    let data = rows.iter().flat_map(|r| r.iter().map(|&v| F::of(v))).collect();
    Tensor::new(vec![rows.len(), 1, len], data).expect("bias rows share a width")
}

/// Padded token ids for a set of captions.
#[derive(Clone, Debug, PartialEq)]
pub struct TextBatch {
    pub ids: Vec<u32>,
    pub lens: Vec<usize>,
    pub width: usize,
    /// Additive mask per caption over its own positions (pads excluded).
    pub self_bias: Vec<Vec<f64>>,
    /// As `self_bias`, but also hiding `<SEP>`; used when image queries read text.
    pub cross_bias: Vec<Vec<f64>>,
}

impl TextBatch {
    pub fn new(seqs: &[&[u32]]) -> Result<Self> {
        if seqs.is_empty() || seqs.iter().any(|s| s.is_empty()) {
            return Err(Error::Shape("text batch needs non-empty sequences".into()));
        }
        let width = seqs.iter().map(|s| s.len()).max().unwrap();
        let mut ids = vec![PAD; seqs.len() * width];
        for (i, s) in seqs.iter().enumerate() {
            ids[i * width..i * width + s.len()].copy_from_slice(s);
        }
        let lens: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
        let self_bias = lens.iter().map(|&l| bias_row(width, |j| j < l)).collect();
        let cross_bias = seqs
            .iter()
            .map(|s| bias_row(width, |j| j < s.len() && s[j] != SEP))
            .collect();
        Ok(Self { ids, lens, width, self_bias, cross_bias })
    }

    pub fn from_masked(examples: &[&MaskedExample]) -> Result<Self> {
        let seqs: Vec<&[u32]> = examples.iter().map(|e| e.token_ids.as_slice()).collect();
        Self::new(&seqs)
    }

    pub fn batch(&self) -> usize {
        self.lens.len()
    }
}

/// Padded region slots (slot 0 = averaged feature) for a set of images.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionBatch {
    pub features: Vec<f32>,
    pub boxes: Vec<f32>,
    pub lens: Vec<usize>,
    pub width: usize,
    pub dim: usize,
    pub self_bias: Vec<Vec<f64>>,
}

impl RegionBatch {
    /// `slots[i]` is a list of `(feature, box encoding)` per slot.
    pub fn new(slots: &[Vec<(&[f32], [f32; BOX_DIM])>]) -> Result<Self> {
        if slots.is_empty() || slots.iter().any(|s| s.is_empty()) {
            return Err(Error::Shape("region batch needs at least one slot per image".into()));
        }
        let dim = slots[0][0].0.len();
        let width = slots.iter().map(|s| s.len()).max().unwrap();
        let mut features = vec![0.0; slots.len() * width * dim];
        let mut boxes = vec![0.0; slots.len() * width * BOX_DIM];
        for (i, s) in slots.iter().enumerate() {
            for (j, (f, b)) in s.iter().enumerate() {
                if f.len() != dim {
                    return Err(Error::Shape(format!("region feature width {} != {dim}", f.len())));
                }
                let r = i * width + j;
                features[r * dim..(r + 1) * dim].copy_from_slice(f);
                boxes[r * BOX_DIM..(r + 1) * BOX_DIM].copy_from_slice(b);
            }
        }
        let lens: Vec<usize> = slots.iter().map(|s| s.len()).collect();
        let self_bias = lens.iter().map(|&l| bias_row(width, |j| j < l)).collect();
        Ok(Self { features, boxes, lens, width, dim, self_bias })
    }

    pub fn from_masked(examples: &[&MaskedExample]) -> Result<Self> {
        let slots: Vec<Vec<(&[f32], [f32; BOX_DIM])>> = examples
            .iter()
            .map(|e| e.features.iter().zip(&e.boxes).map(|(f, b)| (f.as_slice(), b.encoding())).collect())
            .collect();
        Self::new(&slots)
    }

    pub fn batch(&self) -> usize {
        self.lens.len()
    }

    /// Slot-0 feature of every image, `[batch, dim]`.
    pub fn averaged_features<F: Float>(&self) -> Tensor<F> {
        let mut out = Vec::with_capacity(self.batch() * self.dim);
        for i in 0..self.batch() {
            let r = i * self.width;
            out.extend(self.features[r * self.dim..(r + 1) * self.dim].iter().map(|&v| F::of(v as f64)));
        }
        Tensor::new(vec![self.batch(), self.dim], out).unwrap()
    }
}

fn positions(width: usize, batch: usize) -> Vec<usize> {
    (0..batch).flat_map(|_| 0..width).collect()
}

/// `LN(tok[id] + pos[i] + seg)` for every position, `[batch, width, H]`.
pub fn encode_text<F: Float>(
    g: &mut Graph<F>,
    store: &ParameterStore<F>,
    cfg: &EncoderConfig,
    text: &TextBatch,
) -> Result<Var> {
    if text.width > cfg.max_text_len {
        return Err(Error::Shape(format!("caption of {} tokens exceeds max_text_len {}", text.width, cfg.max_text_len)));
    }
    let tok = g.param(store, "emb.tok")?;
    let pos = g.param(store, "emb.pos")?;
    let seg = g.param(store, "emb.seg")?;
    let ids: Vec<usize> = text.ids.iter().map(|&i| i as usize).collect();
    let e = g.gather(tok, &ids)?;
    let p = g.gather(pos, &positions(text.width, text.batch()))?;
    let x = g.add(e, p)?;
    let x = g.add(x, seg)?;
    let (lg, lb) = (g.param(store, "emb.ln.g")?, g.param(store, "emb.ln.b")?);
    let x = g.layer_norm(x, lg, lb, LN_EPS)?;
    g.reshape(x, &[text.batch(), text.width, cfg.hidden])
}

/// Add the positional table to `[batch, width, H]` hidden states when enabled.
pub fn reinject_positions<F: Float>(
    g: &mut Graph<F>,
    store: &ParameterStore<F>,
    cfg: &EncoderConfig,
    hidden: Var,
) -> Result<Var> {
    if !cfg.per_layer_positions {
        return Ok(hidden);
    }
    let s = g.shape(hidden).to_vec();
    let (batch, width) = (s[0], s[1]);
    let pos = g.param(store, "emb.pos")?;
    let p = g.gather(pos, &positions(width, batch))?;
    let p = g.reshape(p, &s)?;
    g.add(hidden, p)
}

/// `LN(W_f · feature + b + W_b · box)` per slot, `[batch, width, H]`.
pub fn encode_regions<F: Float>(
    g: &mut Graph<F>,
    store: &ParameterStore<F>,
    cfg: &EncoderConfig,
    regions: &RegionBatch,
) -> Result<Var> {
    if regions.dim != cfg.feature_dim {
        return Err(Error::Shape(format!(
            "region features have width {}, model expects {}",
            regions.dim, cfg.feature_dim
        )));
    }
    let rows = regions.batch() * regions.width;
    let feats = Tensor::new(vec![rows, regions.dim], regions.features.iter().map(|&v| F::of(v as f64)).collect())?;
    let boxes = Tensor::new(vec![rows, BOX_DIM], regions.boxes.iter().map(|&v| F::of(v as f64)).collect())?;
    let (f, b) = (g.constant(feats), g.constant(boxes));
    let fw = g.param(store, "img.feat.w")?;
    let fb = g.param(store, "img.feat.b")?;
    let bw = g.param(store, "img.box.w")?;
    let x = g.matmul(f, fw)?;
    let x = g.add(x, fb)?;
    let bx = g.matmul(b, bw)?;
    let x = g.add(x, bx)?;
    let (lg, lb) = (g.param(store, "img.ln.g")?, g.param(store, "img.ln.b")?);
    let x = g.layer_norm(x, lg, lb, LN_EPS)?;
    g.reshape(x, &[regions.batch(), regions.width, cfg.hidden])
}

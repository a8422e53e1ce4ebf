//! Finite-difference audit of a complete model with every loss attached, and
//! the masked-merged versus modality-specific equivalence probe.

use crate::attention::{
    merged_bias, multimodal_layer, parse_layers, AttentionKind, HeadConfig, LayerMasks, LayerStackConfig, PairIndex,
};
use crate::data::{apply_masks, generate_synthetic, MaskConfig, MaskedExample, SyntheticConfig};
use crate::encoders::{bias_tensor, encode_regions, encode_text, EncoderConfig, RegionBatch, TextBatch};
use crate::error::Result;
use crate::tensor::{Graph, Tensor};
use crate::losses::{itm_classification_loss, itm_contrastive_loss, mlm_loss, mrm_loss, vqa_loss};
use crate::models::{Model, ModelConfig, ModelDims};
use crate::tensor::{check_gradients, GradCheckReport, ParameterStore};

pub const ALL_KINDS: [AttentionKind; 5] = [
    AttentionKind::Merged,
    AttentionKind::Coattention,
    AttentionKind::LanguageQuery,
    AttentionKind::ImageQuery,
    AttentionKind::ModalitySpecific,
];

#[derive(Clone, Debug)]
pub struct GradCheckSetup {
    pub model: ModelConfig,
    pub step: f64,
    /// Coordinates probed per parameter tensor.
    pub per_param: usize,
    pub seed: u64,
}

impl GradCheckSetup {
    /// Desk model (two language-only and two multimodal layers of `kind`).
    pub fn desk(kind: AttentionKind, seed: u64) -> Self {
        let layers = ["lang_self".to_string(), "lang_self".into(), format!("mm:{kind}"), format!("mm:{kind}")];
        Self {
            model: ModelConfig { layers: layers.to_vec(), dropout: 0.0, ..Default::default() },
            step: 1e-4,
            per_param: 3,
            seed,
        }
    }
}

fn batch(seed: u64, n: usize) -> Result<(Vec<MaskedExample>, usize, usize, usize)> {
    let cfg = SyntheticConfig {
        num_images: n,
        num_classes: 6,
        feature_dim: 8,
        objects_min: 2,
        objects_max: 3,
        distractor_words: 6,
        seed,
        ..Default::default()
    };
    let (w, ds) = generate_synthetic(&cfg)?;
    let refs: Vec<_> = ds.examples().iter().collect();
    let mc = MaskConfig { mlm_rate: 0.3, mrm_rate: 0.3, max_text_len: 12, max_regions: 3 };
    Ok((apply_masks(&refs, &w.vocabulary, &mc, seed, 0)?.examples, w.vocabulary.len(), 8, 6))
}

/// 64-bit gradient check of MLM + MRM + ITM (both forms) + VQA on a batch of
/// two synthetic examples, scored as two positives and two swapped negatives.
pub fn full_model_gradcheck(setup: &GradCheckSetup) -> Result<GradCheckReport> {
    let (ex, vocab, dv, classes) = batch(setup.seed, 2)?;
    let refs: Vec<&MaskedExample> = ex.iter().collect();
    let (t, r) = (TextBatch::from_masked(&refs)?, RegionBatch::from_masked(&refs)?);
    let dims = ModelDims { vocab_size: vocab, max_text_len: 12, feature_dim: dv, num_classes: classes };
    let model = Model::new(&setup.model, dims)?;
    let mut store = ParameterStore::<f64>::new(setup.seed);
    model.declare(&mut store)?;
    model.declare_vqa_head(&mut store, 2, setup.seed + 1)?;
    let pairs = PairIndex::from_pairs(&[(0, 0), (1, 1), (0, 1), (1, 0)]);

    let mut tok = Vec::new();
    let mut tgt = Vec::new();
    let mut reg = Vec::new();
    let mut dist: Vec<&[f32]> = Vec::new();
    for (i, e) in ex.iter().enumerate() {
        tok.extend(e.masked_tokens.iter().map(|&j| (i, j)));
        tgt.extend(e.masked_tokens.iter().map(|&j| e.token_targets[j] as usize));
        reg.extend(e.masked_regions.iter().map(|&j| (i, j)));
        dist.extend(e.masked_regions.iter().map(|&j| e.region_targets[j - 1].as_slice()));
    }
    check_gradients(
        &store,
        |g, p| {
            let out = model.forward(g, p, &t, &r, &pairs)?;
            let mut terms = Vec::new();
            if !tok.is_empty() {
                let lm = model.mlm_logits(g, p, &out, &pairs, &tok)?;
                terms.extend(mlm_loss(g, lm, &tgt)?);
            }
            if !reg.is_empty() {
                let rm = model.mrm_logits(g, p, &out, &pairs, &reg)?;
                terms.extend(mrm_loss(g, rm, &dist)?);
            }
            terms.push(itm_classification_loss(g, out.itm, &[1.0, 1.0, 0.0, 0.0])?);
            terms.extend(itm_contrastive_loss(g, out.itm, &[vec![0, 2], vec![1, 3]])?);
            let vq = model.vqa_logits(g, p, &out)?;
            terms.push(vqa_loss(g, vq, &[0.9, 0.1, 0.2, 0.8, 0.5, 0.5, 0.0, 1.0])?);
            let mut total = terms[0];
            for &x in &terms[1..] {
                total = g.add(total, x)?;
            }
            Ok(total)
        },
        setup.step,
        setup.per_param,
        setup.seed,
    )
}

fn rows(v: &[Vec<f64>]) -> Vec<&[f64]> {
    v.iter().map(|x| x.as_slice()).collect()
}

/// Largest output gap between a merged block whose cross-modal logits are
/// masked and a modality-specific block holding the same projections, on a
/// padded batch of three synthetic examples in 32-bit floats. Without `block`
/// the merged block attends across modalities and the gap is large.
pub fn block_mask_gap(seed: u64, block: bool) -> Result<f64> {
    const H: usize = 16;
    let (ex, vocab, dv, _) = batch(seed, 3)?;
    let refs: Vec<&MaskedExample> = ex.iter().collect();
    let (t, r) = (TextBatch::from_masked(&refs)?, RegionBatch::from_masked(&refs)?);
    let enc = EncoderConfig { vocab_size: vocab, hidden: H, max_text_len: 12, feature_dim: dv, per_layer_positions: false, init_std: 0.5 };
    let stack = |kind: AttentionKind| -> Result<LayerStackConfig> {
        Ok(LayerStackConfig {
            layers: parse_layers(&[format!("mm:{kind}")])?,
            hidden: H,
            heads: HeadConfig::equal_split(H, 2)?,
            cross_heads: None,
            ff_mult: 2,
            dropout: 0.0,
            init_std: 0.5,
        })
    };
    let (mcfg, scfg) = (stack(AttentionKind::Merged)?, stack(AttentionKind::ModalitySpecific)?);
    let mut merged = ParameterStore::<f32>::new(seed);
    enc.declare(&mut merged)?;
    mcfg.declare(&mut merged)?;
    let mut ms = ParameterStore::<f32>::new(seed ^ 0x5eed);
    enc.declare(&mut ms)?;
    scfg.declare(&mut ms)?;
    for (name, value) in merged.iter() {
        if let Some(rest) = name.strip_prefix("b2.attn.") {
            for side in ["lang", "img"] {
                if let Some(v) = ms.value_mut(&format!("b2.{side}.attn.{rest}")) {
                    *v = value.clone();
                }
            }
        } else if let Some(v) = ms.value_mut(name) {
            *v = value.clone();
        }
    }

    let run = |store: &ParameterStore<f32>, kind: AttentionKind, cfg: &LayerStackConfig| -> Result<(Tensor<f32>, Tensor<f32>)> {
        let mut g = Graph::new(false, 0);
        let lang = encode_text(&mut g, store, &enc, &t)?;
        let img = encode_regions(&mut g, store, &enc, &r)?;
        let (ts, tc, is) = (rows(&t.self_bias), rows(&t.cross_bias), rows(&r.self_bias));
        let masks = LayerMasks {
            text_self: g.constant(bias_tensor(&ts)),
            text_cross: g.constant(bias_tensor(&tc)),
            img_self: g.constant(bias_tensor(&is)),
            merged: Some(g.constant(merged_bias(&ts, &tc, &is, block))),
        };
        let (l, i) = multimodal_layer(&mut g, store, "b2", kind, lang, img, &masks, cfg)?;
        Ok((g.value(l).clone(), g.value(i).clone()))
    };
    let (ml, mi) = run(&merged, AttentionKind::Merged, &mcfg)?;
    let (sl, si) = run(&ms, AttentionKind::ModalitySpecific, &scfg)?;
    Ok(ml.max_abs_diff(&sl).max(mi.max_abs_diff(&si)))
}

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{BoundingBox, PairedExample, Vocabulary, CLS, MASK, SEP};
use crate::error::{Error, Result};
use crate::rng::{stream, TAG_MASK};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskConfig {
    pub mlm_rate: f64,
    pub mrm_rate: f64,
    /// Token budget including `<CLS>` and `<SEP>`.
    pub max_text_len: usize,
    /// Regions kept per image (the averaged slot is extra).
    pub max_regions: usize,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self { mlm_rate: 0.15, mrm_rate: 0.15, max_text_len: 16, max_regions: 8 }
    }
}

impl MaskConfig {
    pub fn unmasked(&self) -> Self {
        Self { mlm_rate: 0.0, mrm_rate: 0.0, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("mlm_rate", self.mlm_rate), ("mrm_rate", self.mrm_rate)] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::config(format!("masking.{name} must lie in [0, 1), got {r}")));
            }
        }
        if self.max_text_len < 3 || self.max_regions == 0 {
            return Err(Error::config("masking.max_text_len must be >= 3 and max_regions >= 1"));
        }
        Ok(())
    }
}

/// One example ready for encoding, with its masking bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedExample {
    pub image_id: String,
    pub source_dataset: String,
    pub caption_text: String,
    /// `<CLS> w_1 .. w_T <SEP>` with selected words replaced by `<MASK>`.
    pub token_ids: Vec<u32>,
    /// The same sequence before masking.
    pub token_targets: Vec<u32>,
    /// Sequence positions replaced by `<MASK>` (never 0 or the final `<SEP>`).
    pub masked_tokens: Vec<usize>,
    /// Slot 0 is the mean of slots 1..=N after masking.
    pub features: Vec<Vec<f32>>,
    pub boxes: Vec<BoundingBox>,
    /// Detector distribution of slot `n` stored at index `n - 1`.
    pub region_targets: Vec<Vec<f32>>,
    /// Region slots whose features were zeroed (1-based).
    pub masked_regions: Vec<usize>,
}

impl MaskedExample {
    pub fn num_tokens(&self) -> usize {
        self.token_ids.len()
    }

    /// Slot count including the averaged slot.
    pub fn num_slots(&self) -> usize {
        self.features.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedBatch {
    pub examples: Vec<MaskedExample>,
}

impl MaskedBatch {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn masked_token_count(&self) -> usize {
        self.examples.iter().map(|e| e.masked_tokens.len()).sum()
    }

    pub fn masked_region_count(&self) -> usize {
        self.examples.iter().map(|e| e.masked_regions.len()).sum()
    }
}

/// Bernoulli selection over `candidates`; at a nonzero rate an empty draw is
/// replaced by one uniformly chosen candidate.
fn select(candidates: std::ops::RangeInclusive<usize>, rate: f64, rng: &mut impl Rng) -> Vec<usize> {
    let mut chosen = Vec::new();
    let range: Vec<usize> = candidates.collect();
    for &i in &range {
        if rng.random::<f64>() < rate {
            chosen.push(i);
        }
    }
    if rate > 0.0 && chosen.is_empty() && !range.is_empty() {
        chosen.push(range[rng.random_range(0..range.len())]);
    }
    chosen
}

fn mean_feature(slots: &[Vec<f32>]) -> Vec<f32> {
    let mut avg = vec![0.0f32; slots[0].len()];
    for f in slots {
        for (a, v) in avg.iter_mut().zip(f) {
            *a += v;
        }
    }
    let n = slots.len() as f32;
    avg.iter_mut().for_each(|a| *a /= n);
    avg
}

fn mask_one(ex: &PairedExample, vocab: &Vocabulary, cfg: &MaskConfig, rng: &mut impl Rng) -> MaskedExample {
    let words = ex.caption.len().min(cfg.max_text_len - 2);
    let mut targets = Vec::with_capacity(words + 2);
    targets.push(CLS);
    targets.extend(ex.caption[..words].iter().map(|w| vocab.id_or_unk(w)));
    targets.push(SEP);
    let masked_tokens = select(1..=words, cfg.mlm_rate, rng);
    let mut token_ids = targets.clone();
    for &t in &masked_tokens {
        token_ids[t] = MASK;
    }

    let n = ex.regions.len().min(cfg.max_regions);
    let regions = &ex.regions[..n];
    let masked_regions = select(1..=n, cfg.mrm_rate, rng);
    let mut slots: Vec<Vec<f32>> = regions.iter().map(|r| r.feature.clone()).collect();
    for &s in &masked_regions {
        slots[s - 1].iter_mut().for_each(|v| *v = 0.0);
    }
    let mut features = Vec::with_capacity(n + 1);
    features.push(mean_feature(&slots));
    features.extend(slots);
    let mut boxes = vec![BoundingBox::FULL];
    boxes.extend(regions.iter().map(|r| r.bbox));

    MaskedExample {
        image_id: ex.image_id.clone(),
        source_dataset: ex.source_dataset.clone(),
        caption_text: ex.caption_text(),
        token_ids,
        token_targets: targets,
        masked_tokens,
        features,
        boxes,
        region_targets: regions.iter().map(|r| r.label_dist.clone()).collect(),
        masked_regions,
    }
}

/// Tokenize, truncate and mask a batch. Example `i` draws from the stream keyed
/// by `(seed, step, i)`, so masks do not depend on batch composition.
pub fn apply_masks(
    examples: &[&PairedExample],
    vocab: &Vocabulary,
    cfg: &MaskConfig,
    seed: u64,
    step: u64,
) -> Result<MaskedBatch> {
    cfg.validate()?;
    let examples = examples
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            let mut rng = stream(seed, &[TAG_MASK, step, i as u64]);
            mask_one(ex, vocab, cfg, &mut rng)
        })
        .collect();
    Ok(MaskedBatch { examples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig};

    fn fixture() -> (Vocabulary, crate::data::Dataset) {
        let (w, ds) = generate_synthetic(&SyntheticConfig { num_images: 300, ..Default::default() }).unwrap();
        (w.vocabulary, ds)
    }

    #[test]
    fn zero_rates_mask_nothing() {
        let (v, ds) = fixture();
        let refs: Vec<_> = ds.examples().iter().collect();
        let b = apply_masks(&refs, &v, &MaskConfig::default().unmasked(), 1, 0).unwrap();
        assert_eq!(b.masked_token_count(), 0);
        assert_eq!(b.masked_region_count(), 0);
        for e in &b.examples {
            assert_eq!(e.token_ids, e.token_targets);
            assert_eq!(e.token_ids[0], CLS);
            assert_eq!(*e.token_ids.last().unwrap(), SEP);
        }
    }

    #[test]
    fn special_slots_never_masked_and_average_recomputed() {
        let (v, ds) = fixture();
        let refs: Vec<_> = ds.examples().iter().collect();
        let cfg = MaskConfig { mlm_rate: 0.5, mrm_rate: 0.5, ..Default::default() };
        let b = apply_masks(&refs, &v, &cfg, 2, 0).unwrap();
        for e in &b.examples {
            assert!(!e.masked_tokens.is_empty() && !e.masked_regions.is_empty());
            let last = e.num_tokens() - 1;
            assert!(e.masked_tokens.iter().all(|&t| t != 0 && t != last));
            assert!(e.masked_regions.iter().all(|&s| s != 0));
            for &t in &e.masked_tokens {
                assert_eq!(e.token_ids[t], MASK);
            }
            for &s in &e.masked_regions {
                assert!(e.features[s].iter().all(|&x| x == 0.0));
            }
            let n = (e.num_slots() - 1) as f64;
            for d in 0..e.features[0].len() {
                let mean: f64 = e.features[1..].iter().map(|f| f[d] as f64).sum::<f64>() / n;
                assert!((mean - e.features[0][d] as f64).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn same_seed_same_masks() {
        let (v, ds) = fixture();
        let refs: Vec<_> = ds.examples().iter().take(20).collect();
        let cfg = MaskConfig::default();
        assert_eq!(apply_masks(&refs, &v, &cfg, 5, 3).unwrap(), apply_masks(&refs, &v, &cfg, 5, 3).unwrap());
        assert_ne!(apply_masks(&refs, &v, &cfg, 5, 3).unwrap(), apply_masks(&refs, &v, &cfg, 5, 4).unwrap());
    }
}

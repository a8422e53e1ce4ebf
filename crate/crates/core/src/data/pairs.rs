use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{CaptionIndex, MaskedBatch, MaskedExample};
use crate::error::{Error, Result};
use crate::rng::{stream, TAG_PAIRS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ItmMode {
    Classification,
    Contrastive,
}

/// Image/caption pairings over a batch. `pairs[k] = (image_row, caption_row)`;
/// the first `B` entries are the positives `(i, i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ItmPairs {
    pub pairs: Vec<(usize, usize)>,
    pub labels: Vec<f32>,
    /// Contrastive mode only: for positive `i`, `groups[i][0] == i` followed by
    /// the pair indices of its negatives.
    pub groups: Vec<Vec<usize>>,
}

impl ItmPairs {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn num_negatives(&self) -> usize {
        self.labels.iter().filter(|&&y| y == 0.0).count()
    }
}

fn is_true_pair(index: &CaptionIndex, image: &MaskedExample, caption: &MaskedExample) -> bool {
    index.matches_keys(
        (&image.source_dataset, &image.image_id),
        (&caption.source_dataset, &caption.image_id),
        &caption.caption_text,
    )
}

/// Build positives and caption-swapped negatives. A caption is never paired as
/// a negative with an image it truly describes (per `truth`), so fewer negatives
/// than requested are possible when the batch repeats an image.
pub fn build_itm_pairs(
    batch: &MaskedBatch,
    mode: ItmMode,
    negatives_per_positive: usize,
    truth: &CaptionIndex,
    seed: u64,
    step: u64,
) -> Result<ItmPairs> {
    let b = batch.len();
    if b < 2 {
        return Err(Error::config("image-text matching needs a batch of at least 2"));
    }
    if mode == ItmMode::Contrastive && (negatives_per_positive == 0 || negatives_per_positive > b - 1) {
        return Err(Error::config(format!(
            "losses.negatives_per_positive must be in 1..={} for batch size {b}, got {negatives_per_positive}",
            b - 1
        )));
    }
    let mut rng = stream(seed, &[TAG_PAIRS, step]);
    let mut pairs: Vec<(usize, usize)> = (0..b).map(|i| (i, i)).collect();
    let mut labels = vec![1.0f32; b];
    let mut groups = Vec::new();
    for i in 0..b {
        let eligible: Vec<usize> = (0..b)
            .filter(|&j| j != i && !is_true_pair(truth, &batch.examples[i], &batch.examples[j]))
            .collect();
        if eligible.is_empty() {
            if mode == ItmMode::Contrastive {
                groups.push(vec![i]);
            }
            continue;
        }
        match mode {
            ItmMode::Classification => {
                let j = eligible[rng.random_range(0..eligible.len())];
                pairs.push((i, j));
                labels.push(0.0);
            }
            ItmMode::Contrastive => {
                let k = negatives_per_positive.min(eligible.len());
                let mut chosen: Vec<usize> =
                    rand::seq::index::sample(&mut rng, eligible.len(), k).into_iter().map(|x| eligible[x]).collect();
                chosen.sort_unstable();
                let mut group = vec![i];
                for j in chosen {
                    group.push(pairs.len());
                    pairs.push((i, j));
                    labels.push(0.0);
                }
                groups.push(group);
            }
        }
    }
    Ok(ItmPairs { pairs, labels, groups })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{apply_masks, generate_synthetic, Dataset, MaskConfig, SyntheticConfig};

    fn batch(n_images: usize, caps: usize, take: usize) -> (Dataset, MaskedBatch) {
        let (w, ds) =
            generate_synthetic(&SyntheticConfig { num_images: n_images, captions_per_image: caps, ..Default::default() })
                .unwrap();
        let refs: Vec<_> = ds.examples().iter().take(take).collect();
        let mb = apply_masks(&refs, &w.vocabulary, &MaskConfig::default(), 0, 0).unwrap();
        (ds, mb)
    }

    #[test]
    fn batch_of_two_swaps() {
        let (ds, mb) = batch(2, 1, 2);
        let p = build_itm_pairs(&mb, ItmMode::Classification, 1, &CaptionIndex::new([&ds]), 0, 0).unwrap();
        assert_eq!(p.pairs, vec![(0, 0), (1, 1), (0, 1), (1, 0)]);
        assert_eq!(p.labels, vec![1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn contrastive_uses_every_other_caption() {
        let (ds, mb) = batch(33, 1, 33);
        let p = build_itm_pairs(&mb, ItmMode::Contrastive, 32, &CaptionIndex::new([&ds]), 0, 0).unwrap();
        assert_eq!(p.groups.len(), 33);
        for (i, g) in p.groups.iter().enumerate() {
            assert_eq!(g.len(), 33);
            let mut caps: Vec<usize> = g[1..].iter().map(|&k| p.pairs[k].1).collect();
            caps.sort();
            assert_eq!(caps, (0..33).filter(|&j| j != i).collect::<Vec<_>>());
        }
    }

    #[test]
    fn too_many_negatives_is_a_config_error() {
        let (ds, mb) = batch(4, 1, 4);
        let err = build_itm_pairs(&mb, ItmMode::Contrastive, 4, &CaptionIndex::new([&ds]), 0, 0).unwrap_err();
        assert!(err.is_config());
    }

    #[test]
    fn same_image_captions_are_never_negatives() {
        // 4 images x 3 captions, all 12 records in one batch.
        let (ds, mb) = batch(4, 3, 12);
        let idx = CaptionIndex::new([&ds]);
        let p = build_itm_pairs(&mb, ItmMode::Contrastive, 11, &idx, 0, 0).unwrap();
        for (k, &(i, j)) in p.pairs.iter().enumerate() {
            if p.labels[k] == 0.0 {
                let img = &mb.examples[i];
                assert_ne!(img.image_id, mb.examples[j].image_id);
                assert!(!ds.is_caption_of(&img.image_id, &mb.examples[j].caption_text));
            }
        }
        assert!(p.groups.iter().all(|g| g.len() == 1 + 9));
    }
}

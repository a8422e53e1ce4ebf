//! Paired image–text data: records, datasets, vocabulary, synthetic generation,
//! batch sampling, masking and negative-pair construction.

mod io;
mod masking;
mod pairs;
mod sampler;
mod synthetic;
mod vocab;

use std::collections::{HashMap, HashSet};

use indexmap::IndexMap;

pub use io::{load_dataset, load_lines, parse_dataset, save_dataset, write_lines};
pub use masking::{apply_masks, MaskConfig, MaskedBatch, MaskedExample};
pub use pairs::{build_itm_pairs, ItmMode, ItmPairs};
pub use sampler::{sample_batch, SamplerConfig, SamplingStrategy};
pub use synthetic::{generate_synthetic, template_bank, SyntheticConfig, SyntheticWorld, TemplateSet};
pub use vocab::{Vocabulary, CLS, MASK, PAD, RESERVED, SEP, UNK};

/// Axis-aligned box in normalized image coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundingBox {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

impl BoundingBox {
    pub const FULL: BoundingBox = BoundingBox { x1: 0.0, y1: 0.0, x2: 1.0, y2: 1.0 };

    pub fn area(&self) -> f32 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    /// `(x1, y1, x2, y2, area)` as fed to the box embedding.
    pub fn encoding(&self) -> [f32; 5] {
        [self.x1, self.y1, self.x2, self.y2, self.area()]
    }

    pub fn is_valid(&self) -> bool {
        let in_unit = |v: f32| (0.0..=1.0).contains(&v);
        in_unit(self.x1) && in_unit(self.y1) && in_unit(self.x2) && in_unit(self.y2) && self.x1 < self.x2 && self.y1 < self.y2
    }
}

/// One detected region: feature vector, box, and detector class distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct Region {
    pub feature: Vec<f32>,
    pub bbox: BoundingBox,
    pub label_dist: Vec<f32>,
}

impl Region {
    /// Index of the most probable detector class (first on ties).
    pub fn argmax_label(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.label_dist.iter().enumerate() {
            if p > self.label_dist[best] {
                best = i;
            }
        }
        best
    }
}

/// An (image, caption) record.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedExample {
    pub image_id: String,
    pub caption: Vec<String>,
    pub regions: Vec<Region>,
    pub source_dataset: String,
}

impl PairedExample {
    pub fn caption_text(&self) -> String {
        self.caption.join(" ")
    }
}

/// A named collection of records. Images with several captions appear as
/// several records sharing an `image_id`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    examples: Vec<PairedExample>,
    /// image_id → record indices, in first-seen order.
    images: IndexMap<String, Vec<usize>>,
    captions: HashMap<String, HashSet<String>>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, examples: Vec<PairedExample>) -> Self {
        let mut images: IndexMap<String, Vec<usize>> = IndexMap::new();
        let mut captions: HashMap<String, HashSet<String>> = HashMap::new();
        for (i, ex) in examples.iter().enumerate() {
            images.entry(ex.image_id.clone()).or_default().push(i);
            captions.entry(ex.image_id.clone()).or_default().insert(ex.caption_text());
        }
        Self { name: name.into(), examples, images, captions }
    }

    pub fn examples(&self) -> &[PairedExample] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn num_images(&self) -> usize {
        self.images.len()
    }

    /// Record indices of the `i`-th distinct image.
    pub fn image_records(&self, i: usize) -> (&str, &[usize]) {
        let (id, recs) = self.images.get_index(i).expect("image index");
        (id, recs)
    }

    /// Every caption (as text) attached to an image id.
    pub fn captions_per_image(&self, image_id: &str) -> Option<&HashSet<String>> {
        self.captions.get(image_id)
    }

    /// True if `caption` is one of the ground-truth captions of `image_id`.
    pub fn is_caption_of(&self, image_id: &str, caption: &str) -> bool {
        self.captions.get(image_id).is_some_and(|c| c.contains(caption))
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.examples.first().map(|e| e.regions[0].feature.len())
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.examples.first().map(|e| e.regions[0].label_dist.len())
    }

    /// The first `n` distinct images (all their captions) as a new dataset.
    pub fn take_images(&self, n: usize, name: &str) -> Dataset {
        let mut out = Vec::new();
        for (_, recs) in self.images.iter().take(n) {
            out.extend(recs.iter().map(|&r| self.examples[r].clone()));
        }
        Dataset::new(name, out)
    }
}

/// Looks up ground-truth captions across several datasets by source name.
pub struct CaptionIndex<'a> {
    by_name: HashMap<&'a str, &'a Dataset>,
}

impl<'a> CaptionIndex<'a> {
    pub fn new(datasets: impl IntoIterator<Item = &'a Dataset>) -> Self {
        Self { by_name: datasets.into_iter().map(|d| (d.name.as_str(), d)).collect() }
    }

    /// Whether pairing `image` with `caption` would be a true match.
    pub fn matches(&self, image: &PairedExample, caption: &PairedExample) -> bool {
        self.matches_keys(
            (&image.source_dataset, &image.image_id),
            (&caption.source_dataset, &caption.image_id),
            &caption.caption_text(),
        )
    }

    /// Key form of [`CaptionIndex::matches`]: `(dataset, image_id)` of both sides
    /// plus the caption text.
    pub fn matches_keys(&self, image: (&str, &str), caption_owner: (&str, &str), caption: &str) -> bool {
        if image == caption_owner {
            return true;
        }
        match self.by_name.get(image.0) {
            Some(ds) => ds.is_caption_of(image.1, caption),
            None => false,
        }
    }
}

/// Lowercased word list of a caption string.
pub fn tokenize_words(caption: &str) -> Vec<String> {
    caption.split_whitespace().map(|w| w.to_lowercase()).collect()
}

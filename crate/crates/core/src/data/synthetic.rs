use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{BoundingBox, Dataset, PairedExample, Region, Vocabulary};
use crate::error::{Error, Result};
use crate::rng::{stream, TAG_CAPTIONS, TAG_IMAGES, TAG_NOISE, TAG_WORLD};

/// Detector mass on the true class of a synthetic region.
pub const TRUE_CLASS_MASS: f32 = 0.9;

const CLASS_NAMES: [&str; 64] = [
    "dog", "cat", "horse", "bird", "car", "bus", "tree", "house", "boat", "chair", "table", "cup", "bottle",
    "lamp", "clock", "phone", "book", "bike", "train", "plane", "cow", "sheep", "kite", "ball", "bench", "bag",
    "shoe", "hat", "umbrella", "flower", "pizza", "cake", "apple", "banana", "orange", "sofa", "bed", "laptop",
    "mouse", "keyboard", "sink", "oven", "fridge", "vase", "door", "window", "fence", "road", "statue", "bridge",
    "tower", "mountain", "river", "beach", "sign", "truck", "van", "rock", "leaf", "fish", "duck", "goat", "pig",
    "candle",
];

/// A named family of caption templates; `{}` marks where the object list goes.
#[derive(Clone, Debug, PartialEq)]
pub struct TemplateSet {
    pub name: &'static str,
    pub templates: Vec<&'static str>,
}

impl TemplateSet {
    /// Words a template contributes besides the object list.
    pub fn filler_words(template: &str) -> usize {
        template.split_whitespace().filter(|w| *w != "{}").count()
    }
}

pub fn template_bank() -> Vec<TemplateSet> {
    vec![
        TemplateSet {
            name: "photo",
            templates: vec!["a photo of {}", "a picture showing {}", "an image with {}", "this shows {}"],
        },
        TemplateSet {
            name: "scene",
            templates: vec!["there is {} in the scene", "the scene contains {}", "we see {} here"],
        },
        TemplateSet {
            name: "narrative",
            templates: vec![
                "in this image we can see {} and it looks nice",
                "i can see {} in front",
                "in the picture there are {} on the ground",
            ],
        },
        TemplateSet { name: "terse", templates: vec!["{}"] },
    ]
}

fn find_template_set(name: &str) -> Result<TemplateSet> {
    template_bank()
        .into_iter()
        .find(|t| t.name == name)
        .ok_or_else(|| Error::config(format!("unknown template set `{name}`")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub name: String,
    pub num_images: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub feature_noise: f32,
    pub template_set: String,
    pub p_noise: f64,
    pub captions_per_image: usize,
    pub distractor_words: usize,
    /// Seeds class names, prototypes and vocabulary; shared between splits.
    pub world_seed: u64,
    /// Seeds the images and captions of this split.
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            name: "synth-pretrain".into(),
            num_images: 1000,
            objects_min: 2,
            objects_max: 4,
            num_classes: 16,
            feature_dim: 32,
            feature_noise: 0.5,
            template_set: "photo".into(),
            p_noise: 0.0,
            captions_per_image: 1,
            distractor_words: 48,
            world_seed: 0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > CLASS_NAMES.len() {
            return Err(Error::config(format!(
                "synthetic.num_classes must be in 2..={}, got {}",
                CLASS_NAMES.len(),
                self.num_classes
            )));
        }
        if self.objects_min == 0 || self.objects_min > self.objects_max {
            return Err(Error::config("synthetic.objects_min must be in 1..=objects_max"));
        }
        if self.num_classes < self.objects_max {
            return Err(Error::config(format!(
                "synthetic.num_classes ({}) is smaller than objects_max ({})",
                self.num_classes, self.objects_max
            )));
        }
        if !(0.0..=1.0).contains(&self.p_noise) {
            return Err(Error::config("synthetic.p_noise must lie in [0, 1]"));
        }
        if self.feature_dim == 0 || self.num_images == 0 || self.captions_per_image == 0 {
            return Err(Error::config("synthetic sizes must be positive"));
        }
        if !(self.feature_noise >= 0.0) {
            return Err(Error::config("synthetic.feature_noise must be non-negative"));
        }
        find_template_set(&self.template_set)?;
        Ok(())
    }
}

/// Class names, visual prototypes and the word vocabulary shared by every split
/// generated from the same world seed.
#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    pub class_names: Vec<String>,
    pub prototypes: Vec<Vec<f32>>,
    pub vocabulary: Vocabulary,
}

fn distractors(count: usize, taken: &[&str], rng: &mut impl Rng) -> Vec<String> {
    const ONSET: [&str; 12] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "t", "z"];
    const NUCLEUS: [&str; 5] = ["a", "e", "i", "o", "u"];
    const CODA: [&str; 6] = ["l", "n", "r", "x", "sk", "mp"];
    let mut out: Vec<String> = Vec::with_capacity(count);
    while out.len() < count {
        let syllables = rng.random_range(1..=2);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(ONSET.choose(rng).unwrap());
            w.push_str(NUCLEUS.choose(rng).unwrap());
        }
        w.push_str(CODA.choose(rng).unwrap());
        if !taken.contains(&w.as_str()) && !out.contains(&w) {
            out.push(w);
        }
    }
    out
}

impl SyntheticWorld {
    pub fn new(cfg: &SyntheticConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream(cfg.world_seed, &[TAG_WORLD]);
        let mut names: Vec<&str> = CLASS_NAMES.to_vec();
        names.shuffle(&mut rng);
        let class_names: Vec<String> = names[..cfg.num_classes].iter().map(|s| s.to_string()).collect();
        let normal = Normal::new(0.0f32, 1.0).unwrap();
        let prototypes = (0..cfg.num_classes)
            .map(|_| (0..cfg.feature_dim).map(|_| normal.sample(&mut rng)).collect())
            .collect();

        let mut words: Vec<String> = Vec::new();
        for set in template_bank() {
            for t in &set.templates {
                for w in t.split_whitespace().filter(|w| *w != "{}") {
                    words.push(w.to_string());
                }
            }
        }
        words.push("and".into());
        words.extend(class_names.iter().cloned());
        let taken: Vec<&str> = words.iter().map(String::as_str).chain(CLASS_NAMES).collect();
        let extra = distractors(cfg.distractor_words, &taken, &mut rng);
        words.extend(extra);
        Ok(Self { class_names, prototypes, vocabulary: Vocabulary::from_words(words) })
    }

    /// Draw one split. Captions use a separate random stream from the images, so
    /// two configs differing only in `p_noise` yield identical regions.
    pub fn generate(&self, cfg: &SyntheticConfig) -> Result<Dataset> {
        cfg.validate()?;
        if cfg.num_classes != self.class_names.len() || cfg.feature_dim != self.prototypes[0].len() {
            return Err(Error::config("synthetic config does not match the world it is drawn from"));
        }
        let templates = find_template_set(&cfg.template_set)?;
        let mut img_rng = stream(cfg.seed, &[TAG_IMAGES]);
        let mut cap_rng = stream(cfg.seed, &[TAG_CAPTIONS]);
        let mut noise_rng = stream(cfg.seed, &[TAG_NOISE]);
        let noise = Normal::new(0.0f32, 1.0).unwrap();
        let c = cfg.num_classes;
        let other_mass = (1.0 - TRUE_CLASS_MASS) / (c - 1) as f32;
        let word_ids: Vec<u32> = self.vocabulary.word_ids().collect();

        let mut examples = Vec::with_capacity(cfg.num_images * cfg.captions_per_image);
        for i in 0..cfg.num_images {
            let k = img_rng.random_range(cfg.objects_min..=cfg.objects_max);
            let classes = rand::seq::index::sample(&mut img_rng, c, k).into_vec();
            let regions: Vec<Region> = classes
                .iter()
                .map(|&cls| {
                    let feature = self.prototypes[cls]
                        .iter()
                        .map(|&p| p + cfg.feature_noise * noise.sample(&mut img_rng))
                        .collect();
                    let w = img_rng.random_range(0.15f32..0.6);
                    let h = img_rng.random_range(0.15f32..0.6);
                    let x1 = img_rng.random_range(0.0..(1.0 - w));
                    let y1 = img_rng.random_range(0.0..(1.0 - h));
                    let bbox = BoundingBox { x1, y1, x2: x1 + w, y2: y1 + h };
                    let mut label_dist = vec![other_mass; c];
                    label_dist[cls] = TRUE_CLASS_MASS;
                    Region { feature, bbox, label_dist }
                })
                .collect();
            let image_id = format!("{}-{i:05}", cfg.name);
            for _ in 0..cfg.captions_per_image {
                let template = *templates.templates.choose(&mut cap_rng).unwrap();
                let mut order = classes.clone();
                order.shuffle(&mut cap_rng);
                let content: Vec<String> = order
                    .iter()
                    .map(|&cls| {
                        let u: f64 = noise_rng.random();
                        let replacement = *word_ids.choose(&mut noise_rng).unwrap();
                        if u < cfg.p_noise {
                            self.vocabulary.token(replacement).to_string()
                        } else {
                            self.class_names[cls].clone()
                        }
                    })
                    .collect();
                let text = template.replace("{}", &content.join(" and "));
                examples.push(PairedExample {
                    image_id: image_id.clone(),
                    caption: super::tokenize_words(&text),
                    regions: regions.clone(),
                    source_dataset: cfg.name.clone(),
                });
            }
        }
        Ok(Dataset::new(cfg.name.clone(), examples))
    }
}

/// Build the world for `cfg` and draw one split from it.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<(SyntheticWorld, Dataset)> {
    let world = SyntheticWorld::new(cfg)?;
    let ds = world.generate(cfg)?;
    Ok((world, ds))
}

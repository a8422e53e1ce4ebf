use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, PairedExample};
use crate::error::{Error, Result};
use crate::rng::{stream, TAG_SAMPLE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingStrategy {
    /// Uniform over the pooled images of all datasets.
    Instance,
    /// The same number of images from every dataset.
    Dataset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub strategy: SamplingStrategy,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { strategy: SamplingStrategy::Instance, batch_size: 32, seed: 0 }
    }
}

/// Sample `k` distinct indices below `n`, or `k` independent ones when the pool is too small.
fn draw_images(n: usize, k: usize, rng: &mut impl Rng) -> Vec<usize> {
    if k <= n {
        rand::seq::index::sample(rng, n, k).into_vec()
    } else {
        (0..k).map(|_| rng.random_range(0..n)).collect()
    }
}

fn pick_caption<'a>(ds: &'a Dataset, image: usize, rng: &mut impl Rng) -> &'a PairedExample {
    let (_, recs) = ds.image_records(image);
    &ds.examples()[recs[rng.random_range(0..recs.len())]]
}

/// One training batch for `step`. Images are drawn first (distinct within a
/// batch whenever the pool allows), then one of their captions uniformly.
pub fn sample_batch<'a>(datasets: &[&'a Dataset], cfg: &SamplerConfig, step: u64) -> Result<Vec<&'a PairedExample>> {
    if datasets.is_empty() || datasets.iter().any(|d| d.is_empty()) {
        return Err(Error::config("sampling needs at least one non-empty dataset"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::config("sampler.batch_size must be positive"));
    }
    let mut rng = stream(cfg.seed, &[TAG_SAMPLE, step]);
    let mut out = Vec::with_capacity(cfg.batch_size);
    match cfg.strategy {
        SamplingStrategy::Instance => {
            let offsets: Vec<usize> = datasets
                .iter()
                .scan(0, |acc, d| {
                    let start = *acc;
                    *acc += d.num_images();
                    Some(start)
                })
                .collect();
            let total: usize = datasets.iter().map(|d| d.num_images()).sum();
            for flat in draw_images(total, cfg.batch_size, &mut rng) {
                let d = offsets.partition_point(|&o| o <= flat) - 1;
                out.push(pick_caption(datasets[d], flat - offsets[d], &mut rng));
            }
        }
        SamplingStrategy::Dataset => {
            let d = datasets.len();
            if cfg.batch_size % d != 0 {
                return Err(Error::config(format!(
                    "sampler.batch_size ({}) must be divisible by the dataset count ({d})",
                    cfg.batch_size
                )));
            }
            let per = cfg.batch_size / d;
            for ds in datasets {
                for img in draw_images(ds.num_images(), per, &mut rng) {
                    out.push(pick_caption(ds, img, &mut rng));
                }
            }
        }
    }
    Ok(out)
}

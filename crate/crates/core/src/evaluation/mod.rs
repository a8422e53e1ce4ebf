//! Zero-shot retrieval scoring, Recall@K, and dataset-quality probes.

mod quality;

use std::io::Write;

use serde::{Deserialize, Serialize};

pub use quality::{
    dataset_quality, overlap_metric, perplexity_probe, DatasetQualityReport, LmConfig, OverlapReport, PerplexityReport,
};

use crate::attention::PairIndex;
use crate::data::{apply_masks, Dataset, MaskConfig, MaskedExample, PairedExample, Vocabulary};
use crate::encoders::{RegionBatch, TextBatch};
use crate::error::{Error, Result};
use crate::models::Model;
use crate::tensor::{Graph, ParameterStore, Tensor};

pub const TIE_POLICY: &str = "ties broken by ascending image index";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Score a dataset that was also used for pretraining.
    pub allow_overlap: bool,
    /// Upper bound on (caption, image) pairs per forward graph.
    pub chunk_pairs: usize,
    pub threads: usize,
    /// Ranked images written per caption in the top-K dump.
    pub top_k: usize,
    pub overlap_sample: usize,
    pub lm: LmConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { allow_overlap: false, chunk_pairs: 1024, threads: 1, top_k: 10, overlap_sample: 3000, lm: LmConfig::default() }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chunk_pairs == 0 || self.threads == 0 {
            return Err(Error::config("eval.chunk_pairs and eval.threads must be positive"));
        }
        self.lm.validate()
    }
}

/// Caption-by-image score table. Row `r` is a caption query, column `c` a
/// candidate image; `truth[r]` is the column of the caption's own image.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    pub rows: usize,
    pub cols: usize,
    pub scores: Vec<f32>,
    pub truth: Vec<usize>,
    pub caption_ids: Vec<String>,
    pub image_ids: Vec<String>,
}

impl ScoreMatrix {
    /// Matrix with generated ids, mostly for tests and synthetic tables.
    pub fn new(rows: usize, cols: usize, scores: Vec<f32>, truth: Vec<usize>) -> Result<Self> {
        let caption_ids = (0..rows).map(|r| format!("q{r}")).collect();
        let image_ids = (0..cols).map(|c| format!("i{c}")).collect();
        Self::with_ids(scores, truth, caption_ids, image_ids)
    }

    pub fn with_ids(scores: Vec<f32>, truth: Vec<usize>, caption_ids: Vec<String>, image_ids: Vec<String>) -> Result<Self> {
        let (rows, cols) = (caption_ids.len(), image_ids.len());
        if scores.len() != rows * cols || truth.len() != rows || cols == 0 {
            return Err(Error::Shape(format!(
                "score matrix {rows}x{cols} with {} scores and {} labels",
                scores.len(),
                truth.len()
            )));
        }
        if let Some(&t) = truth.iter().find(|&&t| t >= cols) {
            return Err(Error::Index { id: t, extent: cols });
        }
        Ok(Self { rows, cols, scores, truth, caption_ids, image_ids })
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.scores[r * self.cols..(r + 1) * self.cols]
    }

    /// 0-based rank of the ground-truth image for query `r`.
    pub fn rank_of_truth(&self, r: usize) -> usize {
        let row = self.row(r);
        let t = self.truth[r];
        let s = row[t];
        row.iter().enumerate().filter(|&(j, &v)| v > s || (v == s && j < t)).count()
    }

    /// Column indices of row `r` sorted best first.
    pub fn ranking(&self, r: usize) -> Vec<usize> {
        let row = self.row(r);
        let mut order: Vec<usize> = (0..self.cols).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        order
    }
}

/// Fraction of queries whose ground-truth image is among the `k` best scores.
/// `k` beyond the column count is treated as the column count.
pub fn recall_at_k(m: &ScoreMatrix, k: usize) -> f64 {
    if m.rows == 0 {
        return 0.0;
    }
    let k = k.min(m.cols);
    let hits = (0..m.rows).filter(|&r| m.rank_of_truth(r) < k).count();
    hits as f64 / m.rows as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalReport {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub queries: usize,
    pub images: usize,
    pub tie_policy: &'static str,
}

impl RetrievalReport {
    pub fn from_matrix(m: &ScoreMatrix) -> Self {
        Self {
            r1: recall_at_k(m, 1),
            r5: recall_at_k(m, 5),
            r10: recall_at_k(m, 10),
            queries: m.rows,
            images: m.cols,
            tie_policy: TIE_POLICY,
        }
    }

    pub fn rows(&self) -> Vec<ReportRow> {
        [(1, self.r1), (5, self.r5), (10, self.r10)]
            .into_iter()
            .map(|(k, value)| ReportRow { metric: "recall".into(), k: Some(k), value, n: self.queries })
            .collect()
    }
}

/// One line of the `metric,k,value,n` report.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub metric: String,
    pub k: Option<usize>,
    pub value: f64,
    pub n: usize,
}

pub fn write_report_csv(w: &mut impl Write, rows: &[ReportRow]) -> std::io::Result<()> {
    writeln!(w, "metric,k,value,n")?;
    for r in rows {
        let k = r.k.map(|k| k.to_string()).unwrap_or_default();
        writeln!(w, "{},{},{},{}", r.metric, k, r.value, r.n)?;
    }
    Ok(())
}

/// `caption_id,rank,image_id,score` for the `k` best images of every query.
pub fn write_top_k(w: &mut impl Write, m: &ScoreMatrix, k: usize) -> std::io::Result<()> {
    writeln!(w, "caption_id,rank,image_id,score")?;
    for r in 0..m.rows {
        for (rank, &c) in m.ranking(r).iter().take(k).enumerate() {
            writeln!(w, "{},{},{},{}", m.caption_ids[r], rank + 1, m.image_ids[c], m.row(r)[c])?;
        }
    }
    Ok(())
}

/// Refuse to evaluate on a dataset that took part in pretraining.
pub fn check_held_out(pretrain: &[String], eval: &Dataset, allow_overlap: bool) -> Result<()> {
    if allow_overlap {
        return Ok(());
    }
    let names = std::iter::once(eval.name.as_str()).chain(eval.examples().iter().map(|e| e.source_dataset.as_str()));
    for n in names {
        if pretrain.iter().any(|p| p == n) {
            return Err(Error::Overlap(format!(
                "evaluation data `{n}` was also used for pretraining; pass --allow-overlap to score it anyway"
            )));
        }
    }
    Ok(())
}

struct Encoded {
    captions: Vec<MaskedExample>,
    images: Vec<MaskedExample>,
}

fn encode(eval: &Dataset, vocab: &Vocabulary, masking: &MaskConfig) -> Result<(Encoded, Vec<usize>, Vec<String>, Vec<String>)> {
    let mut truth = Vec::with_capacity(eval.len());
    let mut caption_ids = Vec::with_capacity(eval.len());
    let mut image_ids = Vec::with_capacity(eval.num_images());
    let mut caption_refs: Vec<&PairedExample> = Vec::with_capacity(eval.len());
    let mut image_refs: Vec<&PairedExample> = Vec::with_capacity(eval.num_images());
    for i in 0..eval.num_images() {
        let (id, recs) = eval.image_records(i);
        image_ids.push(id.to_string());
        image_refs.push(&eval.examples()[recs[0]]);
        for (k, &r) in recs.iter().enumerate() {
            caption_refs.push(&eval.examples()[r]);
            caption_ids.push(format!("{id}#{k}"));
            truth.push(i);
        }
    }
    let plain = masking.unmasked();
    let captions = apply_masks(&caption_refs, vocab, &plain, 0, 0)?.examples;
    let images = apply_masks(&image_refs, vocab, &plain, 0, 0)?.examples;
    Ok((Encoded { captions, images }, truth, caption_ids, image_ids))
}

fn text_of(e: &Encoded, range: std::ops::Range<usize>) -> Result<TextBatch> {
    let refs: Vec<&MaskedExample> = e.captions[range].iter().collect();
    TextBatch::from_masked(&refs)
}

fn regions_of(e: &Encoded, range: std::ops::Range<usize>) -> Result<RegionBatch> {
    let refs: Vec<&MaskedExample> = e.images[range].iter().collect();
    RegionBatch::from_masked(&refs)
}

/// A rectangular block of the score matrix computed in one graph.
#[derive(Clone)]
struct Tile {
    captions: std::ops::Range<usize>,
    images: std::ops::Range<usize>,
}

fn tiles(rows: usize, cols: usize, chunk_pairs: usize) -> Vec<Tile> {
    let it = cols.min(chunk_pairs).max(1);
    let ct = (chunk_pairs / it).max(1);
    let mut out = Vec::new();
    for c0 in (0..rows).step_by(ct) {
        for i0 in (0..cols).step_by(it) {
            out.push(Tile { captions: c0..(c0 + ct).min(rows), images: i0..(i0 + it).min(cols) });
        }
    }
    out
}

fn grid_pairs(nc: usize, ni: usize) -> PairIndex {
    let mut p = PairIndex { image: Vec::with_capacity(nc * ni), caption: Vec::with_capacity(nc * ni) };
    for c in 0..nc {
        for i in 0..ni {
            p.caption.push(c);
            p.image.push(i);
        }
    }
    p
}

/// Score one tile by running the full model on every pair in it.
fn score_tile_full(model: &Model, store: &ParameterStore<f32>, e: &Encoded, t: &Tile) -> Result<Vec<f32>> {
    let text = text_of(e, t.captions.clone())?;
    let regions = regions_of(e, t.images.clone())?;
    let mut g = Graph::<f32>::new(false, 0);
    let pairs = grid_pairs(t.captions.len(), t.images.len());
    let out = model.forward(&mut g, store, &text, &regions, &pairs)?;
    Ok(g.value(out.itm).data().to_vec())
}

/// Pooled `<CLS>` and image features of every item, computed once.
struct FeatureCache {
    lang: Vec<f32>,
    img: Vec<f32>,
    hidden: usize,
}

fn first_rows(t: &Tensor<f32>) -> Vec<f32> {
    let s = t.shape();
    let (n, l, h) = (s[0], s[1], s[2]);
    (0..n).flat_map(|i| t.data()[i * l * h..i * l * h + h].iter().copied()).collect()
}

fn build_cache(model: &Model, store: &ParameterStore<f32>, e: &Encoded, chunk: usize) -> Result<FeatureCache> {
    let (nc, ni) = (e.captions.len(), e.images.len());
    let mut lang = Vec::new();
    let mut img = Vec::new();
    let span = |k: usize, n: usize| {
        let start = if k * chunk < n { k * chunk } else { 0 };
        start..(start + chunk).min(n)
    };
    let steps = nc.div_ceil(chunk).max(ni.div_ceil(chunk));
    for k in 0..steps {
        let (cr, ir) = (span(k, nc), span(k, ni));
        let text = text_of(e, cr)?;
        let regions = regions_of(e, ir)?;
        let mut g = Graph::<f32>::new(false, 0);
        let items = model.encode_items(&mut g, store, &text, &regions)?;
        if k * chunk < nc {
            lang.extend(first_rows(g.value(items.lang.x)));
        }
        if k * chunk < ni {
            img.extend(first_rows(g.value(items.img.x)));
        }
    }
    Ok(FeatureCache { lang, img, hidden: model.cfg.hidden })
}

/// Score one tile from cached per-item features through the matching head.
fn score_tile_cached(model: &Model, store: &ParameterStore<f32>, cache: &FeatureCache, t: &Tile) -> Result<Vec<f32>> {
    let h = cache.hidden;
    let n = t.captions.len() * t.images.len();
    let mut lang = Vec::with_capacity(n * h);
    let mut img = Vec::with_capacity(n * h);
    for c in t.captions.clone() {
        for i in t.images.clone() {
            lang.extend_from_slice(&cache.lang[c * h..(c + 1) * h]);
            img.extend_from_slice(&cache.img[i * h..(i + 1) * h]);
        }
    }
    let mut g = Graph::<f32>::new(false, 0);
    let l = g.constant(Tensor::new(vec![n, h], lang)?);
    let m = g.constant(Tensor::new(vec![n, h], img)?);
    let s = model.match_scores(&mut g, store, l, m)?;
    Ok(g.value(s).data().to_vec())
}

fn run_tiles<F>(tiles: &[Tile], threads: usize, f: F) -> Result<Vec<Vec<f32>>>
where
    F: Fn(&Tile) -> Result<Vec<f32>> + Sync,
{
    if threads <= 1 || tiles.len() < 2 {
        return tiles.iter().map(&f).collect();
    }
    let per = tiles.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = tiles
            .chunks(per)
            .map(|part| {
                let f = &f;
                s.spawn(move || part.iter().map(f).collect::<Result<Vec<_>>>())
            })
            .collect();
        let mut out = Vec::with_capacity(tiles.len());
        for h in handles {
            out.extend(h.join().map_err(|_| Error::Contract("scoring thread panicked".into()))??);
        }
        Ok(out)
    })
}

/// How the score matrix is computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoringPath {
    /// Per-item features reused across pairs; only valid for factorized models.
    Cached,
    /// Every pair runs through the full model.
    Full,
}

/// Score every caption of `eval` against every image with the model.
#[allow(clippy::too_many_arguments)]
pub fn score_all_pairs(
    model: &Model,
    store: &ParameterStore<f32>,
    pretrain: &[String],
    eval: &Dataset,
    vocab: &Vocabulary,
    masking: &MaskConfig,
    cfg: &EvalConfig,
) -> Result<ScoreMatrix> {
    let path = if model.is_factorized() { ScoringPath::Cached } else { ScoringPath::Full };
    score_all_pairs_with(model, store, pretrain, eval, vocab, masking, cfg, path)
}

#[allow(clippy::too_many_arguments)]
pub fn score_all_pairs_with(
    model: &Model,
    store: &ParameterStore<f32>,
    pretrain: &[String],
    eval: &Dataset,
    vocab: &Vocabulary,
    masking: &MaskConfig,
    cfg: &EvalConfig,
    path: ScoringPath,
) -> Result<ScoreMatrix> {
    cfg.validate()?;
    check_held_out(pretrain, eval, cfg.allow_overlap)?;
    if eval.is_empty() {
        return Err(Error::config("evaluation dataset is empty"));
    }
    if path == ScoringPath::Cached && !model.is_factorized() {
        return Err(Error::Contract("cached scoring needs a model without cross-modal blocks".into()));
    }
    let (enc, truth, caption_ids, image_ids) = encode(eval, vocab, masking)?;
    let (rows, cols) = (enc.captions.len(), enc.images.len());
    let plan = tiles(rows, cols, cfg.chunk_pairs);
    let blocks = match path {
        ScoringPath::Cached => {
            let cache = build_cache(model, store, &enc, 256)?;
            run_tiles(&plan, cfg.threads, |t| score_tile_cached(model, store, &cache, t))?
        }
        ScoringPath::Full => run_tiles(&plan, cfg.threads, |t| score_tile_full(model, store, &enc, t))?,
    };
    let mut scores = vec![0.0f32; rows * cols];
    for (t, vals) in plan.iter().zip(blocks) {
        let w = t.images.len();
        for (ci, c) in t.captions.clone().enumerate() {
            scores[c * cols + t.images.start..c * cols + t.images.end].copy_from_slice(&vals[ci * w..(ci + 1) * w]);
        }
    }
    if let Some(r) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::validation("scores", format!("non-finite score for caption {}", caption_ids[r / cols])));
    }
    ScoreMatrix::with_ids(scores, truth, caption_ids, image_ids)
}

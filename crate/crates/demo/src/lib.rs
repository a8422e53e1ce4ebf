//! Small wasm-bindgen surface over mmx-core for the static page in `www/`.
//! Each export wraps a plain function that native tests call directly.

use mmx_core::attention::AttentionKind;
use mmx_core::data::{tokenize_words, BoundingBox, Dataset, PairedExample, Region};
use mmx_core::evaluation::{overlap_metric, recall_at_k, ScoreMatrix};
use mmx_core::training::{DecayKind, ScheduleConfig};
use wasm_bindgen::prelude::*;

type Res<T> = Result<T, String>;

fn err(e: impl ToString) -> String {
    e.to_string()
}

/// Learning rate at `points` evenly spaced steps from 0 to `total`.
pub fn schedule_points(kind: &str, base_lr: f64, warmup: u32, total: u32, min_ratio: f64, points: u32) -> Res<Vec<f64>> {
    let kind = match kind {
        "polynomial" => DecayKind::Polynomial,
        "cosine" => DecayKind::Cosine,
        other => return Err(format!("unknown decay `{other}`")),
    };
    let cfg = ScheduleConfig { kind, base_lr, warmup_steps: warmup as u64, total_steps: total as u64, min_lr_ratio: min_ratio };
    cfg.validate().map_err(err)?;
    let n = points.max(2) as u64;
    Ok((0..n).map(|i| cfg.lr_at(i * total as u64 / (n - 1))).collect())
}

/// Which keys each query may read in the cross-modal block of `kind`, over
/// the joint sequence `[text tokens | image regions]`: a row-major
/// `(t+r) x (t+r)` grid of 0/1.
pub fn connectivity(kind: &str, text_len: u32, regions: u32) -> Res<Vec<u8>> {
    let kind: AttentionKind = kind.parse().map_err(err)?;
    let (t, n) = (text_len as usize, (text_len + regions) as usize);
    let mut grid = vec![0u8; n * n];
    for q in 0..n {
        for k in 0..n {
            let (q_text, k_text) = (q < t, k < t);
            let allowed = match kind {
                AttentionKind::Merged => true,
                AttentionKind::Coattention => q_text != k_text,
                AttentionKind::LanguageQuery => q_text && !k_text,
                AttentionKind::ImageQuery => !q_text && k_text,
                AttentionKind::ModalitySpecific => q_text == k_text,
            };
            grid[q * n + k] = allowed as u8;
        }
    }
    Ok(grid)
}

/// Share of caption words naming one of the detected labels.
pub fn overlap(caption: &str, labels: &[String]) -> Res<f64> {
    if labels.is_empty() {
        return Err("give at least one detected label".into());
    }
    let words = tokenize_words(caption);
    if words.is_empty() {
        return Err("caption is empty".into());
    }
    let c = labels.len();
    let regions = (0..c)
        .map(|i| {
            let mut label_dist = vec![0.0; c];
            label_dist[i] = 1.0;
            Region { feature: vec![0.0], bbox: BoundingBox { x1: 0.0, y1: 0.0, x2: 1.0, y2: 1.0 }, label_dist }
        })
        .collect();
    let ex = PairedExample { image_id: "img".into(), caption: words, regions, source_dataset: "demo".into() };
    let ds = Dataset::new("demo", vec![ex]);
    Ok(overlap_metric(&ds, Some(labels), 1, 0).map_err(err)?.mean)
}

/// R@1, R@5 and R@10 of a row-major `rows x cols` score matrix whose row `i`
/// belongs to column `truth[i]`.
pub fn recalls(scores: Vec<f32>, rows: u32, cols: u32, truth: &[u32]) -> Res<Vec<f64>> {
    let truth = truth.iter().map(|&t| t as usize).collect();
    let m = ScoreMatrix::new(rows as usize, cols as usize, scores, truth).map_err(err)?;
    Ok([1, 5, 10].iter().map(|&k| recall_at_k(&m, k)).collect())
}

fn js<T>(r: Res<T>) -> Result<T, JsError> {
    r.map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn lr_curve(kind: &str, base_lr: f64, warmup: u32, total: u32, min_ratio: f64, points: u32) -> Result<Vec<f64>, JsError> {
    js(schedule_points(kind, base_lr, warmup, total, min_ratio, points))
}

#[wasm_bindgen]
pub fn attention_kinds() -> Vec<String> {
    AttentionKind::ALL.iter().map(|k| k.to_string()).collect()
}

#[wasm_bindgen]
pub fn cross_block_connectivity(kind: &str, text_len: u32, regions: u32) -> Result<Vec<u8>, JsError> {
    js(connectivity(kind, text_len, regions))
}

#[wasm_bindgen]
pub fn caption_overlap(caption: &str, labels: Vec<String>) -> Result<f64, JsError> {
    js(overlap(caption, &labels))
}

#[wasm_bindgen]
pub fn recall_table(scores: Vec<f32>, rows: u32, cols: u32, truth: Vec<u32>) -> Result<Vec<f64>, JsError> {
    js(recalls(scores, rows, cols, &truth))
}

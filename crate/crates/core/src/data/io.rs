use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde_json::{json, Value};

use super::{tokenize_words, BoundingBox, Dataset, PairedExample, Region};
use crate::error::{Error, Result};

const LABEL_SUM_TOL: f64 = 1e-6;

fn parse_err(line: usize, field: &str, message: impl Into<String>) -> Error {
    Error::Parse { line, field: field.to_string(), message: message.into() }
}

fn matrix(obj: &Value, line: usize, field: &str) -> Result<Vec<Vec<f32>>> {
    let rows = obj
        .get(field)
        .ok_or_else(|| parse_err(line, field, "missing"))?
        .as_array()
        .ok_or_else(|| parse_err(line, field, "expected an array of rows"))?;
    rows.iter()
        .map(|r| {
            r.as_array()
                .ok_or_else(|| parse_err(line, field, "expected a row array"))?
                .iter()
                .map(|v| v.as_f64().map(|x| x as f32).ok_or_else(|| parse_err(line, field, "expected a number")))
                .collect()
        })
        .collect()
}

fn string(obj: &Value, line: usize, field: &str) -> Result<String> {
    obj.get(field)
        .ok_or_else(|| parse_err(line, field, "missing"))?
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| parse_err(line, field, "expected a string"))
}

fn parse_record(text: &str, line: usize) -> Result<PairedExample> {
    let obj: Value = serde_json::from_str(text).map_err(|e| parse_err(line, "<record>", e.to_string()))?;
    if !obj.is_object() {
        return Err(parse_err(line, "<record>", "expected a JSON object"));
    }
    let image_id = string(&obj, line, "image_id")?;
    let caption = tokenize_words(&string(&obj, line, "caption")?);
    let features = matrix(&obj, line, "features")?;
    let boxes = matrix(&obj, line, "boxes")?;
    let labels = matrix(&obj, line, "labels")?;
    let source_dataset = string(&obj, line, "dataset")?;

    let at = |field: &str, msg: String| Error::validation(field, format!("line {line}: {msg}"));
    if caption.is_empty() {
        return Err(at("caption", "caption is empty".into()));
    }
    if features.is_empty() {
        return Err(at("features", "at least one region required".into()));
    }
    if boxes.len() != features.len() || labels.len() != features.len() {
        return Err(at(
            "boxes",
            format!("{} features, {} boxes, {} label rows", features.len(), boxes.len(), labels.len()),
        ));
    }
    let dv = features[0].len();
    let c = labels[0].len();
    let mut regions = Vec::with_capacity(features.len());
    for (n, ((f, b), l)) in features.into_iter().zip(boxes).zip(labels).enumerate() {
        if f.len() != dv || dv == 0 {
            return Err(at("features", format!("region {n} has width {} (expected {dv})", f.len())));
        }
        if b.len() != 4 {
            return Err(at("box", format!("region {n} box has {} coordinates", b.len())));
        }
        let bbox = BoundingBox { x1: b[0], y1: b[1], x2: b[2], y2: b[3] };
        if !bbox.is_valid() {
            return Err(at("box", format!("region {n} box {b:?} needs 0<=x1<x2<=1 and 0<=y1<y2<=1")));
        }
        if l.len() != c || c == 0 {
            return Err(at("labels", format!("region {n} has {} classes (expected {c})", l.len())));
        }
        let sum: f64 = l.iter().map(|&p| p as f64).sum();
        if (sum - 1.0).abs() > LABEL_SUM_TOL || l.iter().any(|&p| p < 0.0) {
            return Err(at("labels", format!("region {n} distribution sums to {sum}")));
        }
        regions.push(Region { feature: f, bbox, label_dist: l });
    }
    Ok(PairedExample { image_id, caption, regions, source_dataset })
}

/// Parse line-delimited records. Blank lines are skipped; line numbers are 1-based.
pub fn parse_dataset(text: &str, fallback_name: &str) -> Result<Dataset> {
    let mut examples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        examples.push(parse_record(line, i + 1)?);
    }
    if let Some(first) = examples.first() {
        let (dv, c) = (first.regions[0].feature.len(), first.regions[0].label_dist.len());
        for (i, ex) in examples.iter().enumerate() {
            let r = &ex.regions[0];
            if r.feature.len() != dv || r.label_dist.len() != c {
                return Err(Error::validation("features", format!("record {} disagrees on feature/class width", i + 1)));
            }
        }
    }
    let name = examples.first().map(|e| e.source_dataset.clone()).unwrap_or_else(|| fallback_name.to_string());
    Ok(Dataset::new(name, examples))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset");
    parse_dataset(&text, stem)
}

fn record_json(ex: &PairedExample) -> Value {
    let features: Vec<&Vec<f32>> = ex.regions.iter().map(|r| &r.feature).collect();
    let boxes: Vec<[f32; 4]> = ex.regions.iter().map(|r| [r.bbox.x1, r.bbox.y1, r.bbox.x2, r.bbox.y2]).collect();
    let labels: Vec<&Vec<f32>> = ex.regions.iter().map(|r| &r.label_dist).collect();
    json!({
        "image_id": ex.image_id,
        "caption": ex.caption_text(),
        "features": features,
        "boxes": boxes,
        "labels": labels,
        "dataset": ex.source_dataset,
    })
}

pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for ex in dataset.examples() {
        serde_json::to_writer(&mut w, &record_json(ex)).map_err(std::io::Error::other)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// One entry per line (vocabulary and class-name files).
pub fn write_lines(lines: &[String], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for l in lines {
        writeln!(w, "{l}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_lines(path: impl AsRef<Path>) -> Result<Vec<String>> {
    Ok(fs::read_to_string(path)?.lines().map(str::to_string).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = r#"{"image_id":"a","caption":"a dog","features":[[0.5,1.0]],"boxes":[[0.1,0.1,0.5,0.6]],"labels":[[0.9,0.1]],"dataset":"toy"}"#;

    #[test]
    fn parses_two_records() {
        let text = format!("{GOOD}\n{}\n", GOOD.replace("\"a\"", "\"b\""));
        let ds = parse_dataset(&text, "x").unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.name, "toy");
        assert_eq!(ds.examples()[0].caption, vec!["a", "dog"]);
    }

    #[test]
    fn inverted_box_is_a_box_error() {
        let bad = GOOD.replace("[0.1,0.1,0.5,0.6]", "[0.7,0.1,0.5,0.6]");
        match parse_dataset(&bad, "x") {
            Err(Error::Validation { field, .. }) => assert_eq!(field, "box"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn distribution_must_sum_to_one() {
        let bad = GOOD.replace("[0.9,0.1]", "[0.9,0.2]");
        assert!(matches!(parse_dataset(&bad, "x"), Err(Error::Validation { field, .. }) if field == "labels"));
    }

    #[test]
    fn malformed_lines_report_line_and_field() {
        let bad = format!("{GOOD}\n\n{}", GOOD.replace("\"boxes\"", "\"bxes\""));
        match parse_dataset(&bad, "x") {
            Err(Error::Parse { line, field, .. }) => {
                assert_eq!(line, 3);
                assert_eq!(field, "boxes");
            }
            other => panic!("{other:?}"),
        }
        match parse_dataset("{not json", "x") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
    }
}

use mmx_demo::{connectivity, overlap, recalls, schedule_points};

#[test]
fn schedule_curve_warms_up_then_decays_to_the_floor() {
    let lr = schedule_points("polynomial", 1e-3, 100, 1000, 0.01, 11).unwrap();
    assert_eq!(lr.len(), 11);
    assert_eq!(lr[0], 0.0);
    assert!((lr[1] - 1e-3 * (1.0 - 0.99 * 0.0)).abs() < 1e-12);
    assert!((lr[10] - 1e-5).abs() < 1e-15);
    assert!(lr.windows(2).skip(1).all(|w| w[1] <= w[0]));
    let cos = schedule_points("cosine", 1e-3, 100, 1000, 0.01, 11).unwrap();
    assert!(cos[5] > lr[5]);
    assert!(schedule_points("step", 1e-3, 1, 10, 0.1, 3).is_err());
    assert!(schedule_points("cosine", 1e-3, 10, 10, 0.1, 3).is_err());
}

fn blocks(kind: &str) -> [u8; 4] {
    // (text->text, text->image, image->text, image->image) with 2 tokens, 3 regions
    let g = connectivity(kind, 2, 3).unwrap();
    let at = |q: usize, k: usize| g[q * 5 + k];
    [at(0, 1), at(1, 4), at(3, 0), at(2, 4)]
}

#[test]
fn connectivity_per_kind() {
    assert_eq!(blocks("merged"), [1, 1, 1, 1]);
    assert_eq!(blocks("coattention"), [0, 1, 1, 0]);
    assert_eq!(blocks("language_query"), [0, 1, 0, 0]);
    assert_eq!(blocks("image_query"), [0, 0, 1, 0]);
    assert_eq!(blocks("modality_specific"), [1, 0, 0, 1]);
    let co = connectivity("coattention", 4, 6).unwrap();
    let m = connectivity("modality_specific", 4, 6).unwrap();
    assert!(co.iter().zip(&m).all(|(a, b)| a + b == 1));
    assert!(connectivity("sideways", 1, 1).is_err());
}

#[test]
fn overlap_counts_label_words() {
    let labels = vec!["dog".to_string(), "red ball".to_string()];
    assert_eq!(overlap("a dog with a red ball", &labels).unwrap(), 3.0 / 6.0);
    assert_eq!(overlap("Dog dog", &labels).unwrap(), 1.0);
    assert!(overlap("", &labels).is_err());
    assert!(overlap("dog", &[]).is_err());
}

#[test]
fn recall_of_a_small_matrix() {
    // row 0 ranks its image first, row 1 second
    let r = recalls(vec![0.9, 0.1, 0.8, 0.7], 2, 2, &[0, 1]).unwrap();
    assert_eq!(r, vec![0.5, 1.0, 1.0]);
    assert!(recalls(vec![0.0; 3], 2, 2, &[0, 1]).is_err());
}

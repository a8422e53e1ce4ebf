use super::*;
use crate::data::{CLS, SEP};
use crate::encoders::{encode_regions, encode_text, BOX_DIM};
use crate::tensor::{check_gradients, Tensor};

const H: usize = 8;

fn stack(layers: &[&str], heads: usize) -> LayerStackConfig {
    LayerStackConfig {
        layers: parse_layers(layers).unwrap(),
        hidden: H,
        heads: HeadConfig::equal_split(H, heads).unwrap(),
        cross_heads: None,
        ff_mult: 2,
        dropout: 0.0,
        init_std: 0.4,
    }
}

fn encoder() -> EncoderConfig {
    EncoderConfig { vocab_size: 10, hidden: H, max_text_len: 6, feature_dim: 3, per_layer_positions: true, init_std: 0.4 }
}

fn store_for(cfg: &LayerStackConfig, seed: u64) -> ParameterStore<f64> {
    let mut s = ParameterStore::new(seed);
    encoder().declare(&mut s).unwrap();
    cfg.declare(&mut s).unwrap();
    s
}

fn text(variant: u32) -> TextBatch {
    TextBatch::new(&[&[CLS, 5 + variant, 6, SEP], &[CLS, 7, SEP]]).unwrap()
}

fn regions() -> RegionBatch {
    let f = [[0.5f32, -1.0, 2.0], [1.0, 0.3, -0.2], [0.1, 0.9, 0.4]];
    let b = |x: f32| [x, 0.1, x + 0.3, 0.7, 0.18];
    RegionBatch::new(&[vec![(&f[0][..], b(0.0)), (&f[1][..], b(0.2)), (&f[2][..], b(0.5))], vec![(&f[2][..], b(0.1)), (&f[0][..], b(0.4))]])
        .unwrap()
}

fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut s = ParameterStore::<f64>::new(seed);
    s.declare("x", shape, ParamInit::TruncatedNormal(1.0)).unwrap();
    s.value("x").unwrap().clone()
}

fn set(store: &mut ParameterStore<f64>, name: &str, values: &[f64]) {
    store.value_mut(name).unwrap().data_mut().copy_from_slice(values);
}

fn attn_store(h: usize, inner: usize, seed: u64) -> ParameterStore<f64> {
    let cfg = LayerStackConfig {
        layers: vec![LayerDescriptor::LangSelf],
        hidden: h,
        heads: HeadConfig::fixed_dim(1, inner).unwrap(),
        cross_heads: None,
        ff_mult: 1,
        dropout: 0.0,
        init_std: 0.5,
    };
    let mut s = ParameterStore::new(seed);
    cfg.declare(&mut s).unwrap();
    s
}

#[test]
fn single_position_returns_projected_value() {
    let s = attn_store(3, 3, 1);
    let mut g = Graph::new(false, 0);
    let q = g.constant(random_tensor(&[1, 1, 3], 2));
    let kv = g.constant(random_tensor(&[1, 1, 3], 3));
    let heads = HeadConfig::fixed_dim(1, 3).unwrap();
    let out = multi_head_attention(&mut g, &s, "b0", q, kv, None, &heads).unwrap();
    let v = linear(&mut g, &s, "b0.attn.v", kv).unwrap();
    let expect = linear(&mut g, &s, "b0.attn.o", v).unwrap();
    assert!(g.value(out).max_abs_diff(g.value(expect)) < 1e-12);
}

#[test]
fn equal_keys_give_uniform_weights_over_valid_positions() {
    let mut s = attn_store(4, 4, 1);
    set(&mut s, "b0.attn.k.w", &[0.0; 16]);
    let mut g = Graph::new(false, 0);
    let x = g.constant(random_tensor(&[1, 5, 4], 2));
    let q = linear(&mut g, &s, "b0.attn.q", x).unwrap();
    let k = linear(&mut g, &s, "b0.attn.k", x).unwrap();
    let v = linear(&mut g, &s, "b0.attn.v", x).unwrap();
    let bias = g.constant(Tensor::from_f64(&[1, 1, 5], &[0.0, 0.0, 0.0, MASK_NEG, MASK_NEG]).unwrap());
    let a = g.attention(q, k, v, Some(bias), 2).unwrap();
    let probs = g.attention_probs(a).unwrap();
    for row in probs.chunks(5) {
        for (j, &p) in row.iter().enumerate() {
            if j < 3 {
                assert!((p - 1.0 / 3.0).abs() < 1e-12);
            } else {
                assert!(p < 1e-6);
            }
        }
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
    }
}

#[test]
fn hand_worked_two_by_two() {
    // Identity projections, one head, d_k = 2.
    let mut s = attn_store(2, 2, 1);
    for p in ["q", "k", "v", "o"] {
        set(&mut s, &format!("b0.attn.{p}.w"), &[1.0, 0.0, 0.0, 1.0]);
    }
    let x = [1.0, 0.0, 0.0, 2.0];
    let mut g = Graph::new(false, 0);
    let xv = g.constant(Tensor::from_f64(&[1, 2, 2], &x).unwrap());
    let out = multi_head_attention(&mut g, &s, "b0", xv, xv, None, &HeadConfig::fixed_dim(1, 2).unwrap()).unwrap();
    // logits = X Xᵀ / √2 = [[1, 0], [0, 4]] / √2
    let r = std::f64::consts::SQRT_2;
    let sm = |a: f64, b: f64| {
        let (ea, eb) = (a.exp(), b.exp());
        (ea / (ea + eb), eb / (ea + eb))
    };
    let (p00, p01) = sm(1.0 / r, 0.0);
    let (p10, p11) = sm(0.0, 4.0 / r);
    let expect = [p00 * 1.0 + p01 * 0.0, p00 * 0.0 + p01 * 2.0, p10 * 1.0 + p11 * 0.0, p10 * 0.0 + p11 * 2.0];
    for (a, b) in g.value(out).data().iter().zip(expect) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn indivisible_heads_rejected() {
    assert!(HeadConfig::equal_split(10, 4).unwrap_err().is_config());
    assert!("mm:bogus".parse::<LayerDescriptor>().unwrap_err().is_config());
    assert!("sideways".parse::<LayerDescriptor>().is_err());
}

#[test]
fn descriptors_round_trip_and_expand() {
    let names = ["lang_self", "img_self", "mm:coattention", "mm:merged", "mm:language_query", "mm:image_query", "mm:modality_specific"];
    let parsed = parse_layers(&names).unwrap();
    let shown: Vec<String> = parsed.iter().map(|d| d.to_string()).collect();
    assert_eq!(shown, names);
    let cfg = stack(&["lang_self", "mm:coattention"], 2);
    assert_eq!(
        cfg.blocks(),
        vec![
            Block::LangSelf { reinject: true },
            Block::LangSelf { reinject: false },
            Block::ImgSelf,
            Block::Cross(AttentionKind::Coattention)
        ]
    );
    assert_eq!(cfg.factorized_prefix(), 3);
    let hybrid = stack(&["mm:modality_specific", "mm:modality_specific", "mm:coattention"], 2);
    assert_eq!(hybrid.factorized_prefix(), 8);
    assert!(stack(&["lang_self", "mm:modality_specific"], 2).is_factorized());
}

fn slices(v: &[Vec<f64>]) -> Vec<&[f64]> {
    v.iter().map(|x| x.as_slice()).collect()
}

fn layer_inputs(g: &mut Graph<f64>, seed: u64) -> (Var, Var, LayerMasks, [Vec<Vec<f64>>; 3]) {
    let lang = g.constant(random_tensor(&[2, 4, H], seed));
    let img = g.constant(random_tensor(&[2, 3, H], seed + 1));
    let t = text(0);
    let r = regions();
    let pad = |b: &Vec<f64>| -> Vec<f64> { b.iter().copied().chain(std::iter::repeat_n(MASK_NEG, 3 - b.len())).collect() };
    let ib: Vec<Vec<f64>> = r.self_bias.iter().map(pad).collect();
    let ts: Vec<&[f64]> = t.self_bias.iter().map(|v| v.as_slice()).collect();
    let tc: Vec<&[f64]> = t.cross_bias.iter().map(|v| v.as_slice()).collect();
    let is: Vec<&[f64]> = ib.iter().map(|v| v.as_slice()).collect();
    let masks = LayerMasks {
        text_self: g.constant(bias_tensor(&ts)),
        text_cross: g.constant(bias_tensor(&tc)),
        img_self: g.constant(bias_tensor(&is)),
        merged: Some(g.constant(merged_bias(&ts, &tc, &is, false))),
    };
    (lang, img, masks, [t.self_bias.clone(), t.cross_bias.clone(), ib])
}

#[test]
fn merged_with_block_mask_equals_modality_specific() {
    for seed in 0..5 {
        let merged_cfg = stack(&["mm:merged"], 2);
        let ms_cfg = stack(&["mm:modality_specific"], 2);
        let merged = store_for(&merged_cfg, seed);
        let mut ms = store_for(&ms_cfg, seed + 100);
        for (name, value) in merged.iter() {
            if let Some(rest) = name.strip_prefix("b2.attn.") {
                for side in ["lang", "img"] {
                    *ms.value_mut(&format!("b2.{side}.attn.{rest}")).unwrap() = value.clone();
                }
            } else if let Some(v) = ms.value_mut(name) {
                *v = value.clone();
            }
        }
        // A graph binds parameters of a single store, so each side gets its own.
        let mut g = Graph::new(false, 0);
        let (lang, img, mut masks, [ts, tc, is]) = layer_inputs(&mut g, seed);
        masks.merged = Some(g.constant(merged_bias(&slices(&ts), &slices(&tc), &slices(&is), true)));
        let (ml, mi) = multimodal_layer(&mut g, &merged, "b2", AttentionKind::Merged, lang, img, &masks, &merged_cfg).unwrap();
        let mut g2 = Graph::new(false, 0);
        let (lang, img, masks, _) = layer_inputs(&mut g2, seed);
        let (sl, si) =
            multimodal_layer(&mut g2, &ms, "b2", AttentionKind::ModalitySpecific, lang, img, &masks, &ms_cfg).unwrap();
        assert!(g.value(ml).max_abs_diff(g2.value(sl)) <= 1e-5);
        assert!(g.value(mi).max_abs_diff(g2.value(si)) <= 1e-5);
    }
}

#[test]
fn coattention_is_symmetric_under_shared_parameters() {
    let cfg = stack(&["mm:coattention"], 2);
    let mut s = store_for(&cfg, 4);
    let lang_params: Vec<(String, Tensor<f64>)> = s
        .iter()
        .filter_map(|(n, v)| n.strip_prefix("b2.lang.").map(|rest| (rest.to_string(), v.clone())))
        .collect();
    for (rest, v) in lang_params {
        *s.value_mut(&format!("b2.img.{rest}")).unwrap() = v;
    }
    let mut g = Graph::new(false, 0);
    let x = g.constant(random_tensor(&[2, 3, H], 9));
    let bias = g.constant(Tensor::from_f64(&[2, 1, 3], &[0.0, 0.0, MASK_NEG, 0.0, 0.0, 0.0]).unwrap());
    let masks = LayerMasks { text_self: bias, text_cross: bias, img_self: bias, merged: None };
    let (l, i) = multimodal_layer(&mut g, &s, "b2", AttentionKind::Coattention, x, x, &masks, &cfg).unwrap();
    assert_eq!(g.value(l), g.value(i));
}

#[test]
fn asymmetric_kinds_shield_the_unqueried_stream() {
    for (kind, image_shielded) in [(AttentionKind::LanguageQuery, true), (AttentionKind::ImageQuery, false)] {
        let cfg = stack(&[&format!("mm:{kind}")], 2);
        let s = store_for(&cfg, 5);
        let mut g = Graph::new(false, 0);
        let (lang, img, masks, _) = layer_inputs(&mut g, 1);
        let lang2 = g.constant(random_tensor(&[2, 4, H], 77));
        let img2 = g.constant(random_tensor(&[2, 3, H], 78));
        let (l1, i1) = multimodal_layer(&mut g, &s, "b2", kind, lang, img, &masks, &cfg).unwrap();
        if image_shielded {
            let (_, i2) = multimodal_layer(&mut g, &s, "b2", kind, lang2, img, &masks, &cfg).unwrap();
            assert_eq!(g.value(i1), g.value(i2));
        } else {
            let (l2, _) = multimodal_layer(&mut g, &s, "b2", kind, lang, img2, &masks, &cfg).unwrap();
            assert_eq!(g.value(l1), g.value(l2));
        }
    }
}

#[test]
fn language_query_image_output_has_no_gradient_from_language() {
    let cfg = stack(&["mm:language_query"], 2);
    let s = store_for(&cfg, 5);
    let mut g = Graph::new(false, 0);
    let (_, img, masks, _) = layer_inputs(&mut g, 1);
    let lang = g.input(random_tensor(&[2, 4, H], 3));
    let (_, i) = multimodal_layer(&mut g, &s, "b2", AttentionKind::LanguageQuery, lang, img, &masks, &cfg).unwrap();
    let loss = g.sum(i);
    g.backward(loss).unwrap();
    assert!(g.grad(lang).is_none_or(|gr| gr.iter().all(|&x| x == 0.0)));
}

/// Random linear probe of a stream that ignores padded positions.
fn valid_weighted_sum(g: &mut Graph<f64>, s: &Stream, lens: &[usize], seed: u64) -> Result<Var> {
    let sh = g.shape(s.x).to_vec();
    let mut w = random_tensor(&sh, seed);
    for (r, &item) in s.items.iter().enumerate() {
        for j in lens[item]..sh[1] {
            w.data_mut()[(r * sh[1] + j) * sh[2]..][..sh[2]].iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let w = g.constant(w);
    let m = g.mul(s.x, w)?;
    Ok(g.sum(m))
}

fn full_forward(cfg: &LayerStackConfig, s: &ParameterStore<f64>, g: &mut Graph<f64>, t: &TextBatch) -> StackOutput {
    let enc = encoder();
    let r = regions();
    let pairs = PairIndex::from_pairs(&[(0, 0), (1, 1), (0, 1), (1, 0)]);
    let ctx = StackContext { cfg, encoder: &enc, text: t, regions: &r, pairs: &pairs };
    let le = encode_text(g, s, &enc, t).unwrap();
    let ie = encode_regions(g, s, &enc, &r).unwrap();
    stack_forward(g, s, &ctx, le, ie).unwrap()
}

#[test]
fn modality_specific_stack_image_ignores_captions() {
    let cfg = stack(&["lang_self", "mm:modality_specific", "mm:modality_specific"], 2);
    let s = store_for(&cfg, 1);
    let mut g = Graph::new(false, 0);
    let a = full_forward(&cfg, &s, &mut g, &text(0));
    let b = full_forward(&cfg, &s, &mut g, &text(2));
    assert!(!a.img.paired);
    assert_eq!(g.value(a.img.x), g.value(b.img.x));
    assert_ne!(g.value(a.lang.x), g.value(b.lang.x));
}

#[test]
fn every_kind_gradient_checks_at_depth_one() {
    for kind in AttentionKind::ALL {
        let cfg = stack(&["lang_self", &format!("mm:{kind}")], 2);
        let s = store_for(&cfg, 11);
        let t = text(0);
        let report = check_gradients(
            &s,
            |g, p| {
                let out = full_forward(&cfg, p, g, &t);
                let m = g.mul(out.pooled_lang, out.pooled_img)?;
                let w = g.constant(random_tensor(&[4, H], 5));
                let m = g.mul(m, w)?;
                let a = g.sum(m);
                let b = valid_weighted_sum(g, &out.lang, &[4, 3], 6)?;
                let c = valid_weighted_sum(g, &out.img, &[3, 2], 7)?;
                let bc = g.add(b, c)?;
                g.add(a, bc)
            },
            1e-4,
            3,
            2,
        )
        .unwrap();
        assert!(report.passes(1e-4), "{kind}: {report:?}");
    }
}

#[test]
fn desk_stack_shapes() {
    let cfg = LayerStackConfig {
        layers: parse_layers(&["lang_self", "lang_self", "mm:coattention", "mm:coattention"]).unwrap(),
        hidden: 64,
        heads: HeadConfig::equal_split(64, 4).unwrap(),
        cross_heads: None,
        ff_mult: 4,
        dropout: 0.1,
        init_std: 0.02,
    };
    let enc = EncoderConfig { hidden: 64, ..encoder() };
    let mut s = ParameterStore::<f32>::new(0);
    enc.declare(&mut s).unwrap();
    cfg.declare(&mut s).unwrap();
    let t = text(0);
    let r = regions();
    let pairs = PairIndex::aligned(2);
    let ctx = StackContext { cfg: &cfg, encoder: &enc, text: &t, regions: &r, pairs: &pairs };
    let mut g = Graph::new(true, 3);
    let le = encode_text(&mut g, &s, &enc, &t).unwrap();
    let ie = encode_regions(&mut g, &s, &enc, &r).unwrap();
    let out = stack_forward(&mut g, &s, &ctx, le, ie).unwrap();
    assert_eq!(g.shape(out.lang.x), &[2, 4, 64]);
    assert_eq!(g.shape(out.img.x), &[2, 3, 64]);
    assert_eq!(g.shape(out.pooled_lang), &[2, 64]);
    assert!(g.value(out.lang.x).is_finite() && g.value(out.img.x).is_finite());
}

#[test]
fn head_count_audit_at_fixed_head_dim() {
    for heads in [1usize, 2, 4] {
        let mk = |n: usize| LayerStackConfig {
            layers: parse_layers(&AttentionKind::ALL.map(|k| format!("mm:{k}"))).unwrap(),
            hidden: 12,
            heads: HeadConfig::fixed_dim(n, 5).unwrap(),
            cross_heads: None,
            ff_mult: 3,
            dropout: 0.0,
            init_std: 0.02,
        };
        let count = |cfg: &LayerStackConfig| {
            let mut s = ParameterStore::<f32>::new(0);
            cfg.declare(&mut s).unwrap();
            s.count()
        };
        let (small, big) = (mk(heads), mk(2 * heads));
        // Attention units: 2 self blocks per descriptor, plus 1 (merged), 2 (co, ms), 1 (lq, iq).
        let units = 5 * 2 + 1 + 2 + 1 + 1 + 2;
        let per_unit = attention_param_count(12, &big.heads) - attention_param_count(12, &small.heads);
        assert_eq!(per_unit, 4 * 12 * 5 * heads + 3 * 5 * heads);
        assert_eq!(count(&big) - count(&small), units * per_unit);
    }
}

#[test]
fn stack_parameter_count_is_closed_form() {
    let cfg = stack(&["lang_self", "mm:coattention", "mm:language_query"], 2);
    let mut s = ParameterStore::<f32>::new(0);
    cfg.declare(&mut s).unwrap();
    let a = attention_param_count(H, &cfg.heads);
    let p = post_param_count(H, 2, true);
    let f = post_param_count(H, 2, false);
    let expect = (a + p) + 2 * (a + p) + 2 * (a + p) + 2 * (a + p) + (a + p + f);
    assert_eq!(s.count(), expect);
    assert_eq!(BOX_DIM, 5);
}

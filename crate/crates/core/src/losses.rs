//! Pretraining objectives (masked language modelling, masked region KL,
//! classification and contrastive matching), the VQA loss, and their weighted
//! combination. Every loss is a mean over its contributing terms.

use serde::{Deserialize, Serialize};

use crate::data::ItmMode;
use crate::error::{Error, Result};
use crate::tensor::{Float, Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub mlm: bool,
    pub mrm: bool,
    pub itm: bool,
    pub itm_mode: ItmMode,
    pub negatives_per_positive: usize,
    pub mlm_weight: f64,
    pub mrm_weight: f64,
    pub itm_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            mlm: true,
            mrm: true,
            itm: true,
            itm_mode: ItmMode::Classification,
            negatives_per_positive: 1,
            mlm_weight: 1.0,
            mrm_weight: 1.0,
            itm_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mlm || self.mrm || self.itm) {
            return Err(Error::config("at least one of losses.mlm, losses.mrm, losses.itm must be enabled"));
        }
        if self.itm && self.itm_mode == ItmMode::Contrastive && self.negatives_per_positive == 0 {
            return Err(Error::config("contrastive matching needs losses.negatives_per_positive >= 1"));
        }
        Ok(())
    }

    /// Short label such as `mrm+mlm+itm`.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.mrm {
            parts.push("mrm");
        }
        if self.mlm {
            parts.push("mlm");
        }
        if self.itm {
            parts.push("itm");
        }
        parts.join("+")
    }
}

/// Computed components; `None` for disabled or empty ones.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossParts {
    pub mlm: Option<Var>,
    pub mrm: Option<Var>,
    pub itm: Option<Var>,
}

fn scalar<F: Float>(g: &mut Graph<F>, v: f64) -> Var {
    g.constant(Tensor::scalar(F::of(v)))
}

/// Mean negative log-likelihood of `targets[i]` under row `i` of `logits [M, V]`.
/// Returns `None` when nothing was masked.
pub fn mlm_loss<F: Float>(g: &mut Graph<F>, logits: Var, targets: &[usize]) -> Result<Option<Var>> {
    if targets.is_empty() {
        return Ok(None);
    }
    let lp = g.log_softmax(logits);
    let picked = g.pick(lp, targets)?;
    let m = g.mean(picked);
    Ok(Some(g.scale(m, -1.0)))
}

/// Mean `KL(D || softmax(logits))` over rows, with `targets` holding one
/// distribution per row of `logits [M, C]`.
pub fn mrm_loss<F: Float>(g: &mut Graph<F>, logits: Var, targets: &[&[f32]]) -> Result<Option<Var>> {
    if targets.is_empty() {
        return Ok(None);
    }
    let c = *g.shape(logits).last().unwrap();
    if targets.len() * c != g.value(logits).len() || targets.iter().any(|t| t.len() != c) {
        return Err(Error::Shape(format!("{} region targets for logits {:?}", targets.len(), g.shape(logits))));
    }
    let mut entropy_term = 0.0f64;
    let mut d = Vec::with_capacity(targets.len() * c);
    for t in targets {
        for &p in *t {
            let p = p as f64;
            if p > 0.0 {
                entropy_term += p * p.ln();
            }
            d.push(F::of(p));
        }
    }
    let m = targets.len() as f64;
    let lp = g.log_softmax(logits);
    let dt = g.constant(Tensor::new(vec![targets.len(), c], d)?);
    let cross = g.mul(lp, dt)?;
    let cross = g.sum(cross);
    let neg = g.scale(cross, -1.0 / m);
    let k = scalar(g, entropy_term / m);
    Ok(Some(g.add(neg, k)?))
}

/// Mean binary cross-entropy of scores `[P]` against labels in {0, 1}, as
/// `softplus(s)` for negatives and `softplus(-s)` for positives.
pub fn itm_classification_loss<F: Float>(g: &mut Graph<F>, scores: Var, labels: &[f32]) -> Result<Var> {
    if labels.len() != g.value(scores).len() {
        return Err(Error::Shape(format!("{} labels for {} scores", labels.len(), g.value(scores).len())));
    }
    let signs: Vec<F> = labels.iter().map(|&y| F::of(1.0 - 2.0 * y as f64)).collect();
    let signs = g.constant(Tensor::new(vec![labels.len()], signs)?);
    let z = g.mul(scores, signs)?;
    let z = g.softplus(z);
    Ok(g.mean(z))
}

/// Mean over groups of `-log(e^{s+} / sum_{k in group} e^{s_k})`, where each
/// group lists the positive's index first. Groups without negatives are skipped;
/// returns `None` if none remain.
pub fn itm_contrastive_loss<F: Float>(g: &mut Graph<F>, scores: Var, groups: &[Vec<usize>]) -> Result<Option<Var>> {
    let used: Vec<&Vec<usize>> = groups.iter().filter(|gr| gr.len() > 1).collect();
    if used.is_empty() {
        return Ok(None);
    }
    let mut order = Vec::new();
    let mut spans = Vec::new();
    for gr in &used {
        spans.push((order.len(), gr.len()));
        order.extend_from_slice(gr);
    }
    let flat = g.gather(scores, &order)?;
    let lse = g.group_log_sum_exp(flat, &spans)?;
    let pos: Vec<usize> = used.iter().map(|gr| gr[0]).collect();
    let pos = g.gather(scores, &pos)?;
    let neg_pos = g.scale(pos, -1.0);
    let terms = g.add(lse, neg_pos)?;
    Ok(Some(g.mean(terms)))
}

/// Mean binary cross-entropy with soft targets, `softplus(x) - t·x`, over all
/// entries of `logits [P, A]`.
pub fn vqa_loss<F: Float>(g: &mut Graph<F>, logits: Var, targets: &[f32]) -> Result<Var> {
    if targets.len() != g.value(logits).len() {
        return Err(Error::Shape(format!("{} answer targets for logits {:?}", targets.len(), g.shape(logits))));
    }
    if let Some(t) = targets.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::validation("soft_scores", format!("answer score {t} outside [0, 1]")));
    }
    let t = g.constant(Tensor::new(g.shape(logits).to_vec(), targets.iter().map(|&v| F::of(v as f64)).collect())?);
    let sp = g.softplus(logits);
    let tx = g.mul(logits, t)?;
    let tx = g.scale(tx, -1.0);
    let e = g.add(sp, tx)?;
    Ok(g.mean(e))
}

/// Weighted sum of the enabled, non-empty components. Returns `None` if every
/// enabled component was empty for this batch.
pub fn total_loss<F: Float>(g: &mut Graph<F>, cfg: &LossConfig, parts: &LossParts) -> Result<Option<Var>> {
    cfg.validate()?;
    let weighted = [(cfg.mlm, parts.mlm, cfg.mlm_weight), (cfg.mrm, parts.mrm, cfg.mrm_weight), (cfg.itm, parts.itm, cfg.itm_weight)];
    let mut total: Option<Var> = None;
    for (on, part, w) in weighted {
        if let (true, Some(v)) = (on, part) {
            let term = if w == 1.0 { v } else { g.scale(v, w) };
            total = Some(match total {
                Some(t) => g.add(t, term)?,
                None => term,
            });
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{check_gradients, ParamInit, ParameterStore};

    fn graph() -> Graph<f64> {
        Graph::new(false, 0)
    }

    fn var(g: &mut Graph<f64>, shape: &[usize], v: &[f64]) -> Var {
        g.input(Tensor::from_f64(shape, v).unwrap())
    }

    fn value(g: &Graph<f64>, v: Var) -> f64 {
        g.value(v).data()[0]
    }

    fn random(shape: &[usize], seed: u64, std: f64) -> Vec<f64> {
        let mut s = ParameterStore::<f64>::new(seed);
        s.declare("x", shape, ParamInit::TruncatedNormal(std)).unwrap();
        s.value("x").unwrap().to_f64_vec()
    }

    fn log_softmax_row(r: &[f64]) -> Vec<f64> {
        let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = r.iter().map(|x| (x - m).exp()).sum::<f64>().ln() + m;
        r.iter().map(|x| x - z).collect()
    }

    #[test]
    fn mlm_closed_forms() {
        let mut g = graph();
        let l = var(&mut g, &[3, 7], &[0.0; 21]);
        let loss = mlm_loss(&mut g, l, &[0, 3, 6]).unwrap().unwrap();
        assert!((value(&g, loss) - 7f64.ln()).abs() < 1e-12);

        let mut rows = vec![-60.0; 8];
        rows[2] = 60.0;
        rows[4 + 1] = 60.0;
        let l = var(&mut g, &[2, 4], &rows);
        let loss = mlm_loss(&mut g, l, &[2, 1]).unwrap().unwrap();
        assert!(value(&g, loss) < 1e-12);
        assert!(mlm_loss(&mut g, l, &[]).unwrap().is_none());
    }

    #[test]
    fn mlm_matches_brute_force() {
        let v = random(&[5, 9], 4, 2.0);
        let t = [1, 8, 0, 4, 4];
        let mut g = graph();
        let l = var(&mut g, &[5, 9], &v);
        let loss = { let v = mlm_loss(&mut g, l, &t).unwrap().unwrap(); value(&g, v) };
        let expect: f64 = -(0..5).map(|i| log_softmax_row(&v[i * 9..(i + 1) * 9])[t[i]]).sum::<f64>() / 5.0;
        assert!((loss - expect).abs() < 1e-12);
    }

    #[test]
    fn mrm_closed_forms_and_brute_force() {
        let mut g = graph();
        let uniform = var(&mut g, &[1, 16], &[0.3; 16]);
        let mut onehot = [0.0f32; 16];
        onehot[3] = 1.0;
        let loss = mrm_loss(&mut g, uniform, &[&onehot]).unwrap().unwrap();
        assert!((value(&g, loss) - 16f64.ln()).abs() < 1e-9);

        let d = [0.7f32, 0.2, 0.1];
        let logits: Vec<f64> = d.iter().map(|&p| (p as f64).ln()).collect();
        let l = var(&mut g, &[1, 3], &logits);
        let loss = mrm_loss(&mut g, l, &[&d]).unwrap().unwrap();
        assert!(value(&g, loss).abs() < 1e-7);

        let v = random(&[2, 4], 9, 1.5);
        let ds: [[f32; 4]; 2] = [[0.1, 0.2, 0.3, 0.4], [0.0, 0.5, 0.5, 0.0]];
        let l = var(&mut g, &[2, 4], &v);
        let loss = { let v = mrm_loss(&mut g, l, &[&ds[0], &ds[1]]).unwrap().unwrap(); value(&g, v) };
        let mut expect = 0.0;
        for i in 0..2 {
            let q = log_softmax_row(&v[i * 4..(i + 1) * 4]);
            for c in 0..4 {
                let p = ds[i][c] as f64;
                if p > 0.0 {
                    expect += p * (p.ln() - q[c]);
                }
            }
        }
        assert!((loss - expect / 2.0).abs() < 1e-9);
    }

    #[test]
    fn itm_classification_closed_forms() {
        let mut g = graph();
        let s = var(&mut g, &[4], &[0.0; 4]);
        let loss = itm_classification_loss(&mut g, s, &[1.0, 0.0, 1.0, 0.0]).unwrap();
        assert!((value(&g, loss) - std::f64::consts::LN_2).abs() < 1e-12);
        let s = var(&mut g, &[1], &[20.0]);
        let loss = itm_classification_loss(&mut g, s, &[1.0]).unwrap();
        assert!(value(&g, loss) < 1e-8);

        let v = random(&[6], 2, 3.0);
        let y = [1.0f32, 0.0, 0.0, 1.0, 1.0, 0.0];
        let s = var(&mut g, &[6], &v);
        let loss = { let v = itm_classification_loss(&mut g, s, &y).unwrap(); value(&g, v) };
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let expect: f64 = v
            .iter()
            .zip(y)
            .map(|(&s, y)| -(y as f64) * sig(s).ln() - (1.0 - y as f64) * (1.0 - sig(s)).ln())
            .sum::<f64>()
            / 6.0;
        assert!((loss - expect).abs() < 1e-12);
    }

    fn one_group(n: usize) -> Vec<Vec<usize>> {
        vec![(0..=n).collect()]
    }

    #[test]
    fn contrastive_equal_scores_and_saturation() {
        for n in [1usize, 32, 1024] {
            for c in [-50.0, 0.0, 50.0] {
                let mut g = graph();
                let s = var(&mut g, &[n + 1], &vec![c; n + 1]);
                let loss = itm_contrastive_loss(&mut g, s, &one_group(n)).unwrap().unwrap();
                assert!((value(&g, loss) - ((n + 1) as f64).ln()).abs() < 1e-9, "n={n} c={c}");
            }
        }
        let mut g = graph();
        let s = var(&mut g, &[4], &[20.0, 0.0, -1.0, -3.0]);
        let loss = itm_contrastive_loss(&mut g, s, &one_group(3)).unwrap().unwrap();
        assert!(value(&g, loss) < 1e-8);
    }

    #[test]
    fn contrastive_matches_brute_force_at_extreme_scores() {
        let mut v = random(&[1025], 7, 1.0);
        v.iter_mut().for_each(|x| *x = (*x * 50.0).clamp(-50.0, 50.0));
        let mut g = graph();
        let s = var(&mut g, &[1025], &v);
        let loss = { let v = itm_contrastive_loss(&mut g, s, &one_group(1024)).unwrap().unwrap(); value(&g, v) };
        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = v.iter().map(|x| (x - m).exp()).sum::<f64>().ln() + m;
        assert!(loss.is_finite());
        assert!((loss - (lse - v[0])).abs() < 1e-9);
    }

    #[test]
    fn contrastive_skips_groups_without_negatives() {
        let mut g = graph();
        let s = var(&mut g, &[3], &[1.0, 2.0, 0.0]);
        let groups = vec![vec![0, 2], vec![1]];
        let loss = { let v = itm_contrastive_loss(&mut g, s, &groups).unwrap().unwrap(); value(&g, v) };
        let expect = ((1f64).exp() + 1.0).ln() - 1.0;
        assert!((loss - expect).abs() < 1e-12);
        assert!(itm_contrastive_loss(&mut g, s, &[vec![0], vec![1]]).unwrap().is_none());
    }

    #[test]
    fn vqa_closed_forms_and_validation() {
        let mut g = graph();
        let l = var(&mut g, &[2, 2], &[0.0; 4]);
        let loss = vqa_loss(&mut g, l, &[0.5; 4]).unwrap();
        assert!((value(&g, loss) - std::f64::consts::LN_2).abs() < 1e-12);
        let l = var(&mut g, &[1, 2], &[40.0, -40.0]);
        assert!({ let v = vqa_loss(&mut g, l, &[1.0, 0.0]).unwrap(); value(&g, v) } < 1e-12);
        let err = vqa_loss(&mut g, l, &[1.5, 0.0]).unwrap_err();
        assert!(matches!(err, Error::Validation { .. }));

        let v = random(&[3, 2], 5, 2.0);
        let t = [0.9f32, 0.1, 0.3, 1.0, 0.0, 0.6];
        let l = var(&mut g, &[3, 2], &v);
        let loss = { let v = vqa_loss(&mut g, l, &t).unwrap(); value(&g, v) };
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let expect: f64 = v
            .iter()
            .zip(t)
            .map(|(&x, t)| -(t as f64) * sig(x).ln() - (1.0 - t as f64) * (1.0 - sig(x)).ln())
            .sum::<f64>()
            / 6.0;
        assert!((loss - expect).abs() < 1e-9);
    }

    #[test]
    fn total_combines_enabled_components() {
        let mut g = graph();
        let (a, b, c) = (var(&mut g, &[], &[1.5]), var(&mut g, &[], &[2.0]), var(&mut g, &[], &[0.25]));
        let parts = LossParts { mlm: Some(a), mrm: Some(b), itm: Some(c) };
        let all = total_loss(&mut g, &LossConfig::default(), &parts).unwrap().unwrap();
        assert_eq!(value(&g, all), 3.75);
        let only = LossConfig { mrm: false, itm: false, ..Default::default() };
        let t = total_loss(&mut g, &only, &parts).unwrap().unwrap();
        assert_eq!(value(&g, t), 1.5);
        g.backward(t).unwrap();
        assert!(g.grad(b).is_none_or(|gr| gr.iter().all(|&x| x == 0.0)));

        let none = LossConfig { mlm: false, mrm: false, itm: false, ..Default::default() };
        assert!(total_loss(&mut g, &none, &parts).unwrap_err().is_config());
        assert_eq!(none.validate().unwrap_err().is_config(), true);
    }

    #[test]
    fn losses_ignore_unmasked_rows() {
        let base = random(&[6, 5], 3, 1.0);
        let masked = [1usize, 4];
        let eval = |v: &[f64]| {
            let mut g = graph();
            let l = var(&mut g, &[6, 5], v);
            let rows = g.gather(l, &masked).unwrap();
            let t = [0.2f32, 0.2, 0.2, 0.2, 0.2];
            let a = mlm_loss(&mut g, rows, &[3, 0]).unwrap().unwrap();
            let b = mrm_loss(&mut g, rows, &[&t, &t]).unwrap().unwrap();
            (value(&g, a), value(&g, b))
        };
        let mut other = base.clone();
        for r in [0usize, 2, 3, 5] {
            other[r * 5..(r + 1) * 5].iter_mut().for_each(|x| *x += 3.7);
        }
        assert_eq!(eval(&base), eval(&other));
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut s = ParameterStore::<f64>::new(11);
        s.declare("x", &[4, 6], ParamInit::TruncatedNormal(1.5)).unwrap();
        let d: Vec<[f32; 6]> = vec![[0.5, 0.1, 0.1, 0.1, 0.1, 0.1]; 4];
        let groups = vec![vec![0, 2, 3], vec![1, 3]];
        let r = check_gradients(
            &s,
            |g, p| {
                let x = g.param(p, "x")?;
                let a = mlm_loss(g, x, &[0, 5, 2, 2])?.unwrap();
                let dr: Vec<&[f32]> = d.iter().map(|r| &r[..]).collect();
                let b = mrm_loss(g, x, &dr)?.unwrap();
                let flat = g.reshape(x, &[24])?;
                let scores = g.slice(flat, 0, 0, 4)?;
                let c = itm_classification_loss(g, scores, &[1.0, 1.0, 0.0, 0.0])?;
                let e = itm_contrastive_loss(g, scores, &groups)?.unwrap();
                let f = vqa_loss(g, x, &[0.3; 24])?;
                let parts = LossParts { mlm: Some(a), mrm: Some(b), itm: Some(c) };
                let t = total_loss(g, &LossConfig::default(), &parts)?.unwrap();
                let t = g.add(t, e)?;
                g.add(t, f)
            },
            1e-5,
            24,
            0,
        )
        .unwrap();
        assert!(r.passes(1e-6), "{r:?}");
    }
}

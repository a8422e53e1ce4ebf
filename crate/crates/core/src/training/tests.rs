use super::*;
use crate::data::{generate_synthetic, SyntheticConfig};
use crate::models::{ModelConfig, ModelDims};

pub(crate) struct Fixture {
    pub world: crate::data::SyntheticWorld,
    pub data: Dataset,
    pub model: Model,
}

pub(crate) fn fixture(layers: &[&str], images: usize) -> Fixture {
    let syn = SyntheticConfig {
        num_images: images,
        num_classes: 8,
        feature_dim: 8,
        objects_min: 2,
        objects_max: 3,
        distractor_words: 8,
        ..Default::default()
    };
    let (world, data) = generate_synthetic(&syn).unwrap();
    let cfg = ModelConfig {
        hidden: 16,
        num_heads: 2,
        layers: layers.iter().map(|s| s.to_string()).collect(),
        ..Default::default()
    };
    let dims = ModelDims { vocab_size: world.vocabulary.len(), max_text_len: 10, feature_dim: 8, num_classes: 8 };
    let model = Model::new(&cfg, dims).unwrap();
    Fixture { world, data, model }
}

fn train_cfg(steps: u64, seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        max_steps: steps,
        seed,
        schedule: ScheduleConfig { base_lr: 2e-3, warmup_steps: 5, total_steps: steps.max(6), ..Default::default() },
        ..Default::default()
    }
}

fn masking() -> MaskConfig {
    MaskConfig { max_text_len: 10, max_regions: 3, ..Default::default() }
}

#[test]
fn short_runs_reduce_the_loss() {
    let f = fixture(&["lang_self", "mm:coattention"], 200);
    let losses = LossConfig::default();
    let mut wins = 0;
    for seed in 0..3 {
        let tc = train_cfg(50, seed);
        let t = Trainer::new(&f.model, &losses, &tc, &masking(), SamplingStrategy::Instance, vec![&f.data], &f.world.vocabulary)
            .unwrap();
        let mut st = t.init_state().unwrap();
        let first = t.step(&mut st).unwrap();
        let mut last = first.clone();
        let rows = t.run(&mut st, 50, |m, _| {
            last = m.clone();
            Ok(())
        });
        rows.unwrap();
        assert!(first.loss_mlm > 0.0 && first.loss_mrm > 0.0 && first.loss_itm > 0.0);
        if last.loss_total < first.loss_total {
            wins += 1;
        }
    }
    assert!(wins >= 2);
}

#[test]
fn same_seed_runs_are_bitwise_identical_and_resume_matches() {
    let f = fixture(&["lang_self", "mm:merged"], 100);
    let losses = LossConfig { itm_mode: ItmMode::Contrastive, negatives_per_positive: 3, ..Default::default() };
    let tc = train_cfg(12, 7);
    let t = Trainer::new(&f.model, &losses, &tc, &masking(), SamplingStrategy::Instance, vec![&f.data], &f.world.vocabulary)
        .unwrap();
    let mut a = t.init_state().unwrap();
    let log_a = t.run(&mut a, 12, |_, _| Ok(())).unwrap();
    let mut b = t.init_state().unwrap();
    let log_b = t.run(&mut b, 12, |_, _| Ok(())).unwrap();
    assert!(a.store.bitwise_eq(&b.store) && a.opt.bitwise_eq(&b.opt));
    assert_eq!(log_a, log_b);

    let mut c = t.init_state().unwrap();
    t.run(&mut c, 5, |_, _| Ok(())).unwrap();
    let bytes = crate::checkpoint::encode(&c.store, Some(&c.opt)).unwrap();
    let (store, opt) = crate::checkpoint::decode(&bytes).unwrap();
    let mut d = TrainState { store, opt: opt.unwrap() };
    t.run(&mut d, 12, |_, _| Ok(())).unwrap();
    assert!(a.store.bitwise_eq(&d.store) && a.opt.bitwise_eq(&d.opt));
}

#[test]
fn mlm_itm_cosine_runs_and_masks_no_regions() {
    let f = fixture(&["lang_self", "mm:coattention"], 100);
    let losses = LossConfig { mrm: false, ..Default::default() };
    let mut tc = train_cfg(10, 1);
    tc.schedule.kind = DecayKind::Cosine;
    let t = Trainer::new(&f.model, &losses, &tc, &masking(), SamplingStrategy::Instance, vec![&f.data], &f.world.vocabulary)
        .unwrap();
    let (batch, _) = t.batch(3).unwrap();
    assert_eq!(batch.masked_region_count(), 0);
    let mut st = t.init_state().unwrap();
    let rows = t.run(&mut st, 10, |_, _| Ok(())).unwrap();
    assert!(rows.iter().all(|r| r.loss_mrm == 0.0 && r.loss_total.is_finite()));
}

#[test]
fn configuration_errors() {
    let f = fixture(&["lang_self", "mm:coattention"], 20);
    let tc = train_cfg(10, 1);
    let v = &f.world.vocabulary;
    let none = LossConfig { mlm: false, mrm: false, itm: false, ..Default::default() };
    assert!(Trainer::new(&f.model, &none, &tc, &masking(), SamplingStrategy::Instance, vec![&f.data], v).is_err());
    let base_cfg = ModelConfig { architecture: crate::models::Architecture::Baseline, ..f.model.cfg.clone() };
    let base = Model::new(&base_cfg, f.model.dims).unwrap();
    let all = LossConfig::default();
    let err = Trainer::new(&base, &all, &tc, &masking(), SamplingStrategy::Instance, vec![&f.data], v).err().unwrap();
    assert!(err.is_config());
    let long = MaskConfig { max_text_len: 16, ..masking() };
    assert!(Trainer::new(&f.model, &all, &tc, &long, SamplingStrategy::Instance, vec![&f.data], v).is_err());
}

#[test]
fn metrics_csv_layout() {
    let m = StepMetrics { step: 3, lr: 0.5, loss_total: 1.0, loss_mlm: 0.25, loss_mrm: 0.5, loss_itm: 0.25, grad_norm: 2.0 };
    let mut buf = Vec::new();
    write_metrics_csv(&mut buf, &[m]).unwrap();
    let s = String::from_utf8(buf).unwrap();
    assert_eq!(s, "step,lr,loss_total,loss_mlm,loss_mrm,loss_itm,grad_norm\n3,5e-1,1,0.25,0.5,0.25,2\n");
}

#[test]
fn vqa_finetune_reports_each_repeat() {
    let f = fixture(&["lang_self", "mm:coattention"], 60);
    let mut store = ParameterStore::<f32>::new(1);
    f.model.declare(&mut store).unwrap();
    let cfg = VqaConfig::default();
    let qs = synthetic_vqa(&f.data, &f.world.class_names, &cfg, 3).unwrap();
    assert!(qs.iter().all(|q| q.scores.iter().all(|s| (0.0..=1.0).contains(s))));
    let tc = train_cfg(6, 2);
    let report = finetune_vqa(&f.model, &store, &cfg, &tc, &masking(), &f.world.vocabulary, &qs[..40], &qs[40..]).unwrap();
    assert_eq!(report.accuracies.len(), 3);
    assert!(report.std >= 0.0 && (0.0..=1.0).contains(&report.mean));
    let again = finetune_vqa(&f.model, &store, &cfg, &tc, &masking(), &f.world.vocabulary, &qs[..40], &qs[40..]).unwrap();
    assert_eq!(report, again);

    let mut with_head = store.clone();
    f.model.declare_vqa_head(&mut with_head, 3, 1).unwrap();
    let err = finetune_vqa(&f.model, &with_head, &cfg, &tc, &masking(), &f.world.vocabulary, &qs, &qs).unwrap_err();
    assert!(err.is_config());
}

//! Run configuration: one TOML document with a section per subsystem, plus
//! named presets and dotted `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::data::{
    load_dataset, load_lines, Dataset, MaskConfig, SamplingStrategy, SyntheticConfig, SyntheticWorld, Vocabulary,
};
use crate::error::{Error, Result};
use crate::evaluation::EvalConfig;
use crate::losses::LossConfig;
use crate::models::{Model, ModelConfig, ModelDims};
use crate::training::{TrainConfig, VqaConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub strategy: SamplingStrategy,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self { strategy: SamplingStrategy::Instance }
    }
}

/// A further split drawn from the synthetic world of the `synthetic` section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub name: String,
    pub num_images: usize,
    pub seed: u64,
    pub p_noise: f64,
    pub captions_per_image: usize,
}

impl SplitConfig {
    fn named(name: &str, num_images: usize, seed: u64) -> Self {
        Self { name: name.into(), num_images, seed, p_noise: 0.0, captions_per_image: 1 }
    }
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self::named("synth-heldout", 200, 1_000_003)
    }
}

/// Dataset files used instead of synthetic generation when `pretrain` is set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataFiles {
    pub pretrain: Vec<PathBuf>,
    pub eval: Option<PathBuf>,
    pub finetune: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    /// One class name per line, in detector-label order.
    pub class_names: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinetuneTask {
    Retrieval,
    Vqa,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub task: FinetuneTask,
    pub steps: u64,
    pub base_lr: f64,
    pub warmup_steps: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { task: FinetuneTask::Retrieval, steps: 200, base_lr: 5e-4, warmup_steps: 20 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds parameter init, batches, masks and dropout.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub losses: LossConfig,
    pub train: TrainConfig,
    pub masking: MaskConfig,
    pub sampler: SamplerSection,
    /// Pretraining corpus (and the world every split is drawn from).
    pub synthetic: SyntheticConfig,
    pub eval_data: SplitConfig,
    pub finetune_data: SplitConfig,
    pub data: DataFiles,
    pub finetune: FinetuneConfig,
    pub vqa: VqaConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            model: ModelConfig::default(),
            losses: LossConfig::default(),
            train: TrainConfig::default(),
            masking: MaskConfig::default(),
            sampler: SamplerSection::default(),
            synthetic: SyntheticConfig::default(),
            eval_data: SplitConfig::default(),
            finetune_data: SplitConfig::named("synth-finetune", 500, 2_000_003),
            data: DataFiles::default(),
            finetune: FinetuneConfig::default(),
            vqa: VqaConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Named override bundles.
pub const PRESETS: [&str; 3] = ["lr-a", "lr-b", "paper-config"];

pub fn preset(name: &str) -> Result<Vec<(String, Value)>> {
    let kv = |k: &str, v: Value| (k.to_string(), v);
    Ok(match name {
        "lr-a" => vec![kv("train.schedule.base_lr", Value::Float(0.00176)), kv("train.schedule.kind", "polynomial".into())],
        "lr-b" => vec![kv("train.schedule.base_lr", Value::Float(0.001)), kv("train.schedule.kind", "cosine".into())],
        "paper-config" => vec![
            kv("train.batch_size", Value::Integer(1024)),
            kv("train.max_steps", Value::Integer(1_000_000)),
            kv("train.schedule.total_steps", Value::Integer(1_000_000)),
            kv("train.schedule.warmup_steps", Value::Integer(20_000)),
            kv("train.schedule.base_lr", Value::Float(0.00176)),
            kv("train.schedule.kind", "polynomial".into()),
            kv("model.hidden", Value::Integer(768)),
            kv("model.num_heads", Value::Integer(12)),
            kv("masking.max_regions", Value::Integer(36)),
        ],
        _ => return Err(Error::config(format!("unknown preset `{name}` (known: {})", PRESETS.join(", ")))),
    })
}

/// Parse the right-hand side of `key=value` as a TOML value, falling back to a
/// bare string.
pub fn parse_value(raw: &str) -> Value {
    let doc = format!("v = {raw}");
    match doc.parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.into())),
        Err(_) => Value::String(raw.into()),
    }
}

pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (k, v) = s.split_once('=').ok_or_else(|| Error::config(format!("override `{s}` is not key=value")))?;
    let k = k.trim();
    if k.is_empty() || k.split('.').any(str::is_empty) {
        return Err(Error::config(format!("malformed override key `{k}`")));
    }
    Ok((k.to_string(), parse_value(v.trim())))
}

/// Section defaults come from `RunConfig::default()`, not from each section
/// type's own default, so a partial section keeps the run-level values.
fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn set_path(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().unwrap();
    let mut t = table;
    for p in parts {
        let entry = t.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        t = entry.as_table_mut().ok_or_else(|| Error::config(format!("`{p}` in `{key}` is not a section")))?;
    }
    t.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Build from TOML text, then presets, then overrides, in that order.
    pub fn from_parts(text: &str, presets: &[String], overrides: &[(String, Value)]) -> Result<Self> {
        let user: Table = text.parse().map_err(|e: toml::de::Error| Error::config(e.message().to_string()))?;
        let mut table = Table::try_from(RunConfig::default()).expect("default config serializes");
        merge(&mut table, user);
        for p in presets {
            for (k, v) in preset(p)? {
                set_path(&mut table, &k, v)?;
            }
        }
        for (k, v) in overrides {
            set_path(&mut table, k, v.clone())?;
        }
        let cfg: RunConfig =
            Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::config(e.message().to_string()))?;
        cfg.resolved()
    }

    pub fn load(path: Option<&Path>, presets: &[String], overrides: &[(String, Value)]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| Error::config(format!("cannot read config {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_parts(&text, presets, overrides)
    }

    fn resolved(mut self) -> Result<Self> {
        self.train.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.losses.validate()?;
        self.masking.validate()?;
        self.eval.validate()?;
        if self.data.pretrain.is_empty() {
            self.synthetic.validate()?;
            for s in [&self.eval_data, &self.finetune_data] {
                if s.name == self.synthetic.name {
                    return Err(Error::config(format!("split `{}` reuses the pretraining dataset name", s.name)));
                }
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Write the fully resolved configuration next to a run's outputs.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("resolved_config.toml");
        std::fs::write(&path, self.to_toml())?;
        Ok(path)
    }

    fn split(&self, s: &SplitConfig) -> SyntheticConfig {
        SyntheticConfig {
            name: s.name.clone(),
            num_images: s.num_images,
            seed: s.seed,
            p_noise: s.p_noise,
            captions_per_image: s.captions_per_image,
            ..self.synthetic.clone()
        }
    }

    /// Materialize every dataset the run refers to.
    pub fn prepare_data(&self) -> Result<RunData> {
        if self.data.pretrain.is_empty() {
            let world = SyntheticWorld::new(&self.synthetic)?;
            let pretrain = vec![world.generate(&self.synthetic)?];
            let eval = world.generate(&self.split(&self.eval_data))?;
            let finetune = world.generate(&self.split(&self.finetune_data))?;
            return Ok(RunData {
                vocab: world.vocabulary.clone(),
                class_names: Some(world.class_names.clone()),
                pretrain,
                eval,
                finetune,
            });
        }
        let pretrain = self.data.pretrain.iter().map(load_dataset).collect::<Result<Vec<_>>>()?;
        fn need<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a PathBuf> {
            p.as_ref().ok_or_else(|| Error::config(format!("data.{what} is required when data.pretrain is set")))
        }
        let vocab = Vocabulary::from_tokens(load_lines(need(&self.data.vocab, "vocab")?)?)?;
        let eval = load_dataset(need(&self.data.eval, "eval")?)?;
        let finetune = match &self.data.finetune {
            Some(p) => load_dataset(p)?,
            None => eval.clone(),
        };
        let class_names = self.data.class_names.as_ref().map(load_lines).transpose()?;
        Ok(RunData { vocab, class_names, pretrain, eval, finetune })
    }

    pub fn build_model(&self, data: &RunData) -> Result<Model> {
        let first = &data.pretrain[0];
        let dims = ModelDims {
            vocab_size: data.vocab.len(),
            max_text_len: self.masking.max_text_len,
            feature_dim: first.feature_dim().ok_or_else(|| Error::config("pretraining dataset is empty"))?,
            num_classes: first.num_classes().unwrap_or(1),
        };
        Model::new(&self.model, dims)
    }
}

/// Datasets and lookup tables of one run.
#[derive(Clone, Debug)]
pub struct RunData {
    pub vocab: Vocabulary,
    pub class_names: Option<Vec<String>>,
    pub pretrain: Vec<Dataset>,
    pub eval: Dataset,
    pub finetune: Dataset,
}

impl RunData {
    pub fn pretrain_names(&self) -> Vec<String> {
        self.pretrain.iter().map(|d| d.name.clone()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c = RunConfig::from_parts("", &[], &[]).unwrap();
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn presets_then_overrides() {
        let c = RunConfig::from_parts("seed = 4\n[train]\nbatch_size = 8\n", &["lr-b".into()], &[]).unwrap();
        assert_eq!((c.seed, c.train.seed, c.train.batch_size), (4, 4, 8));
        assert_eq!(c.train.schedule.base_lr, 0.001);
        assert_eq!(c.train.schedule.kind, crate::training::DecayKind::Cosine);
        let o = parse_override("train.schedule.base_lr=0.5").unwrap();
        let c = RunConfig::from_parts("", &["lr-a".into()], &[o]).unwrap();
        assert_eq!(c.train.schedule.base_lr, 0.5);
        let layers = parse_override("model.layers=[\"mm:merged\"]").unwrap();
        let name = parse_override("synthetic.template_set=scene").unwrap();
        let c = RunConfig::from_parts("", &[], &[layers, name]).unwrap();
        assert_eq!(c.model.layers, vec!["mm:merged"]);
        assert_eq!(c.synthetic.template_set, "scene");
    }

    #[test]
    fn full_scale_preset_loads() {
        let c = RunConfig::from_parts("", &["paper-config".into()], &[]).unwrap();
        assert_eq!((c.train.batch_size, c.train.schedule.warmup_steps), (1024, 20_000));
        assert_eq!(c.train.schedule.base_lr, 0.00176);
        assert!(RunConfig::from_parts("", &["nope".into()], &[]).unwrap_err().is_config());
    }

    #[test]
    fn unknown_keys_name_the_key() {
        let e = RunConfig::from_parts("[train]\nbatchsize = 3\n", &[], &[]).unwrap_err();
        assert!(e.is_config() && e.to_string().contains("batchsize"), "{e}");
        let e = RunConfig::from_parts("", &[], &[parse_override("model.hiden=3").unwrap()]).unwrap_err();
        assert!(e.to_string().contains("hiden"));
        assert!(RunConfig::from_parts("[train]\nseed = 3\n", &[], &[]).unwrap_err().to_string().contains("seed"));
        assert!(parse_override("novalue").is_err());
        assert!(parse_override("a..b=1").is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let o = parse_override("model.head_dim=8").unwrap();
        let c = RunConfig::from_parts("seed = 9\n", &["lr-b".into()], &[o]).unwrap();
        let back = RunConfig::from_parts(&c.to_toml(), &[], &[]).unwrap();
        assert_eq!(c, back);
        let dir = tempfile::tempdir().unwrap();
        let p = c.write_resolved(dir.path()).unwrap();
        assert_eq!(RunConfig::load(Some(&p), &[], &[]).unwrap(), c);
    }

    #[test]
    fn synthetic_splits_share_the_world_but_not_names() {
        let c = RunConfig::from_parts("[synthetic]\nnum_images = 20\n[eval_data]\nnum_images = 5\n", &[], &[]).unwrap();
        let d = c.prepare_data().unwrap();
        assert_eq!((d.pretrain[0].num_images(), d.eval.num_images()), (20, 5));
        assert_ne!(d.pretrain[0].name, d.eval.name);
        assert_eq!(d.eval.feature_dim(), d.pretrain[0].feature_dim());
        let m = c.build_model(&d).unwrap();
        assert_eq!(m.dims.vocab_size, d.vocab.len());
        let c = RunConfig::from_parts("[finetune_data]\nnum_images = 7\n", &[], &[]).unwrap();
        assert_eq!((c.finetune_data.name.as_str(), c.finetune_data.seed), ("synth-finetune", 2_000_003));
        let clash = "[eval_data]\nname = \"synth-pretrain\"\n";
        assert!(RunConfig::from_parts(clash, &[], &[]).unwrap_err().is_config());
    }
}

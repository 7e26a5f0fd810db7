//! Experiment configs and the named recipes.

use std::path::Path;

use kvbabel::corpus::{LanguageSpec, PromptTaskConfig};
use kvbabel::lm::ModelConfig;
use kvbabel::prompt::{MetaConfig, PromptConfig};
use kvbabel::train::TrainConfig;
use kvbabel::translator::TranslatorConfig;
use kvbabel::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
pub enum Recipe {
    /// Two models that differ only in init seed.
    #[serde(rename = "seeds-2")]
    #[value(name = "seeds-2")]
    Seeds2,
    /// Three models that differ only in init seed.
    #[serde(rename = "seeds-3")]
    #[value(name = "seeds-3")]
    Seeds3,
    /// An L=2 model and an L=4 model trained twice as long.
    #[serde(rename = "sizes")]
    #[value(name = "sizes")]
    Sizes,
    /// Mid-training and final snapshots of one run.
    #[serde(rename = "checkpoints")]
    #[value(name = "checkpoints")]
    Checkpoints,
    /// Two fine-tunes of one base model on different languages.
    #[serde(rename = "finetune-split")]
    #[value(name = "finetune-split")]
    FinetuneSplit,
    /// Three incumbents plus a newcomer trained against two of them.
    #[serde(rename = "extension")]
    #[value(name = "extension")]
    Extension,
}

impl Recipe {
    pub fn name(self) -> &'static str {
        match self {
            Recipe::Seeds2 => "seeds-2",
            Recipe::Seeds3 => "seeds-3",
            Recipe::Sizes => "sizes",
            Recipe::Checkpoints => "checkpoints",
            Recipe::FinetuneSplit => "finetune-split",
            Recipe::Extension => "extension",
        }
    }
}

/// Where a model's weights come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSource {
    Scratch,
    /// Snapshot of model `of` after `fraction` of its steps.
    Snapshot { of: String, fraction: f64 },
    /// Continue training `parent` for `fraction` of the pretraining steps.
    Finetune { parent: String, fraction: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub config: ModelConfig,
    /// Added to the experiment seed for this model's init and batches.
    pub seed_offset: u64,
    /// Indices into `data.languages` making up the training mix.
    pub languages: Vec<usize>,
    /// Multiplier on `pretrain.total_steps`.
    pub steps_factor: f64,
    pub source: ModelSource,
    /// Whether translator runs include this model.
    pub in_pool: bool,
}

impl ModelSpec {
    fn scratch(name: &str, layers: usize, seed_offset: u64) -> Self {
        ModelSpec {
            name: name.into(),
            config: ModelConfig::toy(layers),
            seed_offset,
            languages: vec![0],
            steps_factor: 1.0,
            source: ModelSource::Scratch,
            in_pool: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    pub languages: Vec<LanguageSpec>,
    pub tokens_per_language: usize,
    pub eval_tokens: usize,
    pub eval_windows: usize,
    pub eval_batch: usize,
    /// Languages mixed into translator training and evaluation text.
    pub translate_on: Vec<usize>,
    /// Length of the stream hidden prompt contexts are cut from.
    pub prompt_source_tokens: usize,
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec {
            languages: vec![LanguageSpec::default()],
            tokens_per_language: 400_000,
            eval_tokens: 20_000,
            eval_windows: 128,
            eval_batch: 32,
            translate_on: vec![0],
            prompt_source_tokens: 50_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PortabilitySpec {
    /// `num_tasks` covers meta-train and meta-test tasks together.
    pub tasks: PromptTaskConfig,
    pub meta_test_tasks: usize,
    pub prompt: PromptConfig,
    pub meta: MetaConfig,
}

impl Default for PortabilitySpec {
    fn default() -> Self {
        PortabilitySpec {
            tasks: PromptTaskConfig::default(),
            meta_test_tasks: 50,
            prompt: PromptConfig::default(),
            meta: MetaConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtensionSpec {
    /// Pool model trained last, against `partners` only.
    pub newcomer: String,
    /// Incumbent pool indices the newcomer trains against.
    pub partners: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub recipe: Recipe,
    pub seed: u64,
    pub models: Vec<ModelSpec>,
    pub translator: TranslatorConfig,
    pub pretrain: TrainConfig,
    pub train: TrainConfig,
    pub data: DataSpec,
    pub portability: PortabilitySpec,
    pub extension: Option<ExtensionSpec>,
}

impl ExperimentConfig {
    pub fn recipe(recipe: Recipe) -> Self {
        let pretrain = TrainConfig {
            total_steps: 1000,
            warmup_steps: 50,
            peak_lr: 3e-3,
            ..Default::default()
        };
        let mut data = DataSpec::default();
        let mut extension = None;
        let models = match recipe {
            Recipe::Seeds2 => (0..2).map(|i| ModelSpec::scratch(&format!("seed-{i}"), 2, i)).collect(),
            Recipe::Seeds3 => (0..3).map(|i| ModelSpec::scratch(&format!("seed-{i}"), 2, i)).collect(),
            Recipe::Extension => {
                extension = Some(ExtensionSpec {
                    newcomer: "seed-3".into(),
                    partners: vec![0, 1],
                });
                (0..4).map(|i| ModelSpec::scratch(&format!("seed-{i}"), 2, i)).collect()
            }
            Recipe::Sizes => {
                let mut large = ModelSpec::scratch("large", 4, 1);
                large.steps_factor = 2.0;
                vec![ModelSpec::scratch("small", 2, 0), large]
            }
            Recipe::Checkpoints => vec![
                ModelSpec {
                    source: ModelSource::Snapshot {
                        of: "final".into(),
                        fraction: 0.5,
                    },
                    ..ModelSpec::scratch("mid", 2, 0)
                },
                ModelSpec::scratch("final", 2, 0),
            ],
            Recipe::FinetuneSplit => {
                data.languages.push(LanguageSpec::with_seed(2));
                data.translate_on = vec![0, 1];
                let base = ModelSpec {
                    languages: vec![0, 1],
                    in_pool: false,
                    ..ModelSpec::scratch("base", 2, 0)
                };
                let tune = |name: &str, lang: usize, offset: u64| ModelSpec {
                    languages: vec![lang],
                    source: ModelSource::Finetune {
                        parent: "base".into(),
                        fraction: 0.5,
                    },
                    ..ModelSpec::scratch(name, 2, offset)
                };
                vec![base, tune("tuned-a", 0, 1), tune("tuned-b", 1, 2)]
            }
        };
        ExperimentConfig {
            recipe,
            seed: 0,
            models,
            translator: TranslatorConfig::default(),
            pretrain,
            train: TrainConfig::default(),
            data,
            portability: PortabilitySpec::default(),
            extension,
        }
    }

    /// Push the experiment seed into every sub-config that draws randomness.
    pub fn propagate_seed(&mut self) {
        self.pretrain.seed = self.seed;
        self.train.seed = self.seed;
        self.portability.meta.seed = self.seed;
    }

    pub fn model_index(&self, name: &str) -> Option<usize> {
        self.models.iter().position(|m| m.name == name)
    }

    /// Models trained together by `train-translator`, in config order. The
    /// extension newcomer joins later and is left out.
    pub fn pool_models(&self) -> Vec<&ModelSpec> {
        let newcomer = self.extension.as_ref().map(|e| e.newcomer.as_str());
        self.models
            .iter()
            .filter(|m| m.in_pool && Some(m.name.as_str()) != newcomer)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() {
            return Err(Error::Config {
                field: "models".into(),
                reason: "no models".into(),
            });
        }
        for (i, m) in self.models.iter().enumerate() {
            m.config.validate()?;
            if self.models[..i].iter().any(|o| o.name == m.name) {
                return Err(Error::Config {
                    field: "models".into(),
                    reason: format!("duplicate model name `{}`", m.name),
                });
            }
            if m.languages.is_empty() || m.languages.iter().any(|&l| l >= self.data.languages.len()) {
                return Err(Error::Config {
                    field: format!("models.{}.languages", m.name),
                    reason: format!("must index into {} languages", self.data.languages.len()),
                });
            }
            if let ModelSource::Snapshot { of, fraction } = &m.source {
                let ok = self.models.iter().any(|o| &o.name == of && o.source == ModelSource::Scratch);
                if !ok || !(*fraction > 0.0 && *fraction < 1.0) {
                    return Err(Error::Config {
                        field: format!("models.{}.source", m.name),
                        reason: format!("snapshot of `{of}` at {fraction} needs a scratch model and a fraction in (0, 1)"),
                    });
                }
            }
        }
        if self.data.translate_on.iter().any(|&l| l >= self.data.languages.len()) {
            return Err(Error::Config {
                field: "data.translate_on".into(),
                reason: "unknown language index".into(),
            });
        }
        self.pretrain.validate()?;
        self.train.validate()?;
        if let Some(ext) = &self.extension {
            let pool = self.pool_models();
            if !self.models.iter().any(|m| m.in_pool && m.name == ext.newcomer) {
                return Err(Error::Config {
                    field: "extension.newcomer".into(),
                    reason: format!("`{}` is not a pool model", ext.newcomer),
                });
            }
            if ext.partners.is_empty() || ext.partners.iter().any(|&p| p >= pool.len()) {
                return Err(Error::Config {
                    field: "extension.partners".into(),
                    reason: "partners must be incumbent pool indices".into(),
                });
            }
        }
        Ok(())
    }
}

/// Overrides taken from command-line flags; `None` leaves the value alone.
#[derive(Clone, Debug, Default, PartialEq, clap::Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub total_steps: Option<usize>,
    #[arg(long)]
    pub warmup_steps: Option<usize>,
    #[arg(long)]
    pub init_lr: Option<f64>,
    #[arg(long)]
    pub peak_lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long)]
    pub paths_per_step: Option<usize>,
    #[arg(long)]
    pub recon_weight: Option<f64>,
    #[arg(long)]
    pub lm_weight: Option<f64>,
    /// Experiment seed; falls back to KVBABEL_SEED, then the config file.
    #[arg(long, env = "KVBABEL_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub prefix_len: Option<usize>,
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub adam_eps: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
}

impl TrainFlags {
    pub fn apply(&self, cfg: &mut TrainConfig) {
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$flag { cfg.$($field).+ = v; })*
            };
        }
        set!(
            total_steps => total_steps,
            warmup_steps => warmup_steps,
            init_lr => init_lr,
            peak_lr => peak_lr,
            batch_size => batch_size,
            clip_norm => clip_norm,
            paths_per_step => paths_per_step,
            recon_weight => weights.recon_weight,
            lm_weight => weights.lm_weight,
            prefix_len => prefix_len,
            seq_len => seq_len,
            eval_every => eval_every,
            beta1 => adamw.beta1,
            beta2 => adamw.beta2,
            adam_eps => adamw.eps,
            weight_decay => adamw.weight_decay,
        );
    }
}

/// Which TrainConfig the flags of a command refer to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlagTarget {
    Pretrain,
    Translator,
}

/// Recursively overlay `patch` onto `base`; objects merge, anything else
/// replaces.
pub fn merge_json(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Effective config: recipe defaults, overlaid by the config file, then by
/// flags. The recipe is the flag's, else the file's, else `seeds-2`.
pub fn resolve(
    recipe: Option<Recipe>,
    file: Option<&Path>,
    flags: &TrainFlags,
    target: FlagTarget,
) -> Result<ExperimentConfig> {
    let patch: Option<Value> = match file {
        Some(p) => {
            let text = std::fs::read(p).map_err(|e| Error::File {
                path: p.to_path_buf(),
                source: e,
            })?;
            Some(serde_json::from_slice(&text)?)
        }
        None => None,
    };
    let file_recipe = patch
        .as_ref()
        .and_then(|v| v.get("recipe"))
        .map(|r| serde_json::from_value::<Recipe>(r.clone()))
        .transpose()?;
    let chosen = recipe.or(file_recipe).unwrap_or(Recipe::Seeds2);
    let mut value = serde_json::to_value(ExperimentConfig::recipe(chosen))?;
    if let Some(patch) = patch {
        // A file written for another recipe must not drag its recipe along.
        if file_recipe.is_some_and(|r| r == chosen) {
            merge_json(&mut value, patch);
        } else {
            let mut patch = patch;
            if let Value::Object(m) = &mut patch {
                m.remove("recipe");
                if file_recipe.is_some() {
                    m.remove("models");
                    m.remove("extension");
                }
            }
            merge_json(&mut value, patch);
        }
    }
    let mut cfg: ExperimentConfig = serde_json::from_value(value)?;
    if let Some(seed) = flags.seed {
        cfg.seed = seed;
    }
    cfg.propagate_seed();
    match target {
        FlagTarget::Pretrain => flags.apply(&mut cfg.pretrain),
        FlagTarget::Translator => flags.apply(&mut cfg.train),
    }
    cfg.validate()?;
    Ok(cfg)
}

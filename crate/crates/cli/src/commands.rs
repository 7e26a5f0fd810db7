//! The subcommands. Each takes a resolved config and a run directory.

use std::path::{Path, PathBuf};

use kvbabel::checkpoint::{fnv1a, load_checkpoint, params_hash, save_checkpoint, Checkpoint};
use kvbabel::corpus::{gen_prompt_tasks, PromptTask};
use kvbabel::lm::LanguageModel;
use kvbabel::objectives::Path as TransPath;
use kvbabel::pool::ModelPool;
use kvbabel::prompt::{learn_prompts, mean_std, meta_test, meta_train_portability, PortabilityReport, SoftPrompt};
use kvbabel::train::{
    evaluate_paths, extend_pool, extension_paths, pretrain_lm_with, train_linear_baseline, train_translators, EvalSet,
    MetricsLog, NllMatrix, TrainConfig,
};
use kvbabel::translator::{CacheTranslator, IdentityTranslator, LinearPool};
use kvbabel::{Error, Result, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, ModelSource, ModelSpec};
use crate::run::{
    adapters_path, eval_set, load_frozen, load_lm, load_pool_weights, lm_path, pool_names, read_json, save_linear,
    save_lm, save_pool, stream, translator_stream, write_json, RunDir, PROMPT_SALT, TRAIN_SALT,
};

/// Contents of `matrix.json`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatrixReport {
    pub models: Vec<String>,
    /// Each model's suffix NLL with its own prefix cache.
    pub own_cache: Vec<f64>,
    pub identity: Option<NllMatrix>,
    pub linear: Option<NllMatrix>,
    pub translator: Option<NllMatrix>,
    /// Paths never seen in training, with their NLL.
    pub zero_shot: Vec<(usize, usize, f64)>,
    /// Mean NLL over the paths trained in this run.
    pub trained_mean: Option<f64>,
}

impl MatrixReport {
    fn load_or_default(path: &Path) -> Result<MatrixReport> {
        if path.exists() {
            read_json(path)
        } else {
            Ok(MatrixReport::default())
        }
    }
}

fn pool_names_of(cfg: &ExperimentConfig) -> Vec<String> {
    cfg.pool_models().iter().map(|m| m.name.clone()).collect()
}

fn tag_model(log: &mut MetricsLog, from: usize, index: usize) {
    for r in &mut log.rows[from..] {
        r.path_src = Some(index);
        r.path_dst = Some(index);
    }
}

fn scaled_steps(cfg: &TrainConfig, factor: f64) -> TrainConfig {
    let total = ((cfg.total_steps as f64) * factor).round().max(1.0) as usize;
    let warmup = ((cfg.warmup_steps as f64) * factor).round() as usize;
    TrainConfig {
        total_steps: total,
        warmup_steps: warmup.min(total),
        ..cfg.clone()
    }
}

/// Train every model of the config from scratch or from its parent, and
/// save `checkpoints/lm-<name>.kvbl` (plus requested snapshots).
pub fn pretrain(cfg: &ExperimentConfig, run: &RunDir, base: &Path) -> Result<Vec<u64>> {
    let mut log = MetricsLog::default();
    let mut hashes = Vec::new();
    for (index, spec) in cfg.models.iter().enumerate() {
        let from = log.rows.len();
        let seed = cfg.seed.wrapping_add(spec.seed_offset);
        let text = stream(&run.dir, cfg, &spec.languages, cfg.data.tokens_per_language, TRAIN_SALT)?;
        match &spec.source {
            ModelSource::Snapshot { .. } => continue,
            ModelSource::Scratch => {
                let tc = TrainConfig {
                    seed,
                    ..scaled_steps(&cfg.pretrain, spec.steps_factor)
                };
                let model = LanguageModel::init(spec.config.clone(), seed)?;
                let snaps: Vec<(usize, &ModelSpec)> = cfg
                    .models
                    .iter()
                    .filter_map(|m| match &m.source {
                        ModelSource::Snapshot { of, fraction } if of == &spec.name => {
                            Some((((tc.total_steps as f64) * fraction).round().max(1.0) as usize, m))
                        }
                        _ => None,
                    })
                    .collect();
                let dir = run.dir.clone();
                pretrain_lm_with(&model, &text, &tc, &mut log, |done, m| {
                    for (at, snap) in &snaps {
                        if *at == done {
                            save_lm(&dir, snap, m)?;
                        }
                    }
                    Ok(())
                })?;
                hashes.push(save_lm(&run.dir, spec, &model)?);
            }
            ModelSource::Finetune { parent, fraction } => {
                let parent_spec = cfg.models.iter().find(|m| &m.name == parent);
                let parent_dir = if parent_spec.is_some() { run.dir.as_path() } else { base };
                let path = lm_path(parent_dir, parent);
                let ckpt = load_checkpoint(&path)?;
                let model = LanguageModel::from_named(spec.config.clone(), &ckpt.tensors)?;
                let tc = TrainConfig {
                    seed,
                    ..scaled_steps(&cfg.pretrain, spec.steps_factor * fraction)
                };
                pretrain_lm_with(&model, &text, &tc, &mut log, |_, _| Ok(()))?;
                hashes.push(save_lm(&run.dir, spec, &model)?);
            }
        }
        tag_model(&mut log, from, index);
    }
    run.write_metrics(&log)?;
    Ok(hashes)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Baseline {
    Identity,
    Linear,
}

fn identity_of(models: &[LanguageModel]) -> IdentityTranslator {
    IdentityTranslator {
        configs: models.iter().map(|m| m.config().clone()).collect(),
    }
}

/// Train the pool's adapters (or a baseline) and write `matrix.json`.
pub fn train_translator(cfg: &ExperimentConfig, run: &RunDir, base: &Path, baseline: Option<Baseline>) -> Result<MatrixReport> {
    let specs = cfg.pool_models();
    // The shared-width check runs before any data is touched.
    for s in &specs {
        cfg.translator.validate(s.config.num_layers)?;
    }
    let models = load_frozen(base, &specs)?;
    let text = translator_stream(&run.dir, cfg)?;
    let eval = eval_set(&run.dir, cfg)?;
    let s = cfg.train.prefix_len;
    let mut report = MatrixReport {
        models: pool_names_of(cfg),
        own_cache: diagonal(&evaluate_paths(&models, None, &eval, s)?),
        identity: Some(evaluate_paths(&models, Some(&identity_of(&models)), &eval, s)?),
        ..Default::default()
    };
    let mut log = MetricsLog::default();
    let all = TransPath::all(models.len());
    match baseline {
        Some(Baseline::Identity) => {}
        Some(Baseline::Linear) => {
            let configs: Vec<_> = models.iter().map(|m| m.config().clone()).collect();
            let linear = LinearPool::init(&configs, cfg.seed);
            train_linear_baseline(&models, &linear, &text, &cfg.train, &mut log)?;
            save_linear(&run.checkpoints().join("linear.kvbl"), &linear)?;
            let mut m = evaluate_paths(&models, Some(&linear), &eval, s)?;
            m.mark_trained(&all);
            report.trained_mean = m.mean_over(&all);
            report.linear = Some(m);
        }
        None => {
            let pool = ModelPool::new(models, cfg.translator.clone(), cfg.seed)?;
            let ev = EvalSet {
                batches: &eval,
                prefix_len: s,
            };
            train_translators(&pool, &text, &cfg.train, Some(&ev), &mut log)?;
            save_pool(&adapters_path(&run.dir), &pool, &report.models)?;
            let mut m = evaluate_paths(&pool.models, Some(&pool), &eval, s)?;
            m.mark_trained(&all);
            report.trained_mean = m.mean_over(&all);
            report.translator = Some(m);
        }
    }
    run.write_metrics(&log)?;
    write_matrix(run, &report)?;
    Ok(report)
}

fn diagonal(m: &NllMatrix) -> Vec<f64> {
    (0..m.size()).map(|i| m.get(i, i).unwrap_or(f64::NAN)).collect()
}

/// Merge this command's fields into any existing `matrix.json`.
fn write_matrix(run: &RunDir, report: &MatrixReport) -> Result<()> {
    let path = run.dir.join("matrix.json");
    let mut merged = MatrixReport::load_or_default(&path)?;
    if merged.models != report.models {
        merged = MatrixReport::default();
    }
    merged.models = report.models.clone();
    merged.own_cache = report.own_cache.clone();
    merged.identity = report.identity.clone().or(merged.identity);
    merged.linear = report.linear.clone().or(merged.linear);
    if report.translator.is_some() {
        merged.translator = report.translator.clone();
    }
    if report.trained_mean.is_some() {
        merged.zero_shot = report.zero_shot.clone();
        merged.trained_mean = report.trained_mean;
    }
    write_json(&path, &merged)
}

/// Load the trained incumbent pool named in `<pool_dir>`'s adapters
/// checkpoint.
fn load_pool(cfg: &ExperimentConfig, base: &Path, pool_dir: &Path) -> Result<(ModelPool, Vec<String>)> {
    let ckpt = load_checkpoint(&adapters_path(pool_dir))?;
    let names = pool_names(&ckpt)?;
    let specs: Vec<&ModelSpec> = names
        .iter()
        .map(|n| {
            cfg.models
                .iter()
                .find(|m| &m.name == n)
                .ok_or_else(|| Error::Input(format!("adapters were trained for unknown model `{n}`")))
        })
        .collect::<Result<_>>()?;
    let pool = ModelPool::new(load_frozen(base, &specs)?, cfg.translator.clone(), cfg.seed)?;
    load_pool_weights(&pool, &ckpt)?;
    Ok((pool, names))
}

/// Add the configured newcomer to a trained pool, training only its pair.
pub fn extend(cfg: &ExperimentConfig, run: &RunDir, base: &Path, pool_dir: &Path) -> Result<MatrixReport> {
    let ext = cfg
        .extension
        .clone()
        .ok_or_else(|| Error::Config {
            field: "extension".into(),
            reason: "config names no newcomer".into(),
        })?;
    let spec = cfg
        .models
        .iter()
        .find(|m| m.name == ext.newcomer)
        .ok_or_else(|| Error::Input(format!("no model `{}`", ext.newcomer)))?;
    cfg.translator.validate(spec.config.num_layers)?;
    let (mut pool, mut names) = load_pool(cfg, base, pool_dir)?;
    if names.contains(&ext.newcomer) {
        return Err(Error::Input(format!("`{}` is already in the pool", ext.newcomer)));
    }
    if let Some(&bad) = ext.partners.iter().find(|&&p| p >= pool.len()) {
        return Err(Error::Config {
            field: "extension.partners".into(),
            reason: format!("pool has no incumbent {bad}"),
        });
    }
    let incumbents = pool.len();
    let frozen = |p: &ModelPool| {
        let params: Vec<Tensor> = p.adapters[..incumbents].iter().flat_map(|a| a.params()).collect();
        params_hash(&params)
    };
    let before = frozen(&pool);
    let newcomer = load_lm(base, spec)?;
    let text = translator_stream(&run.dir, cfg)?;
    let mut log = MetricsLog::default();
    let new = extend_pool(&mut pool, newcomer, &ext.partners, &text, &cfg.train, &mut log)?;
    if frozen(&pool) != before {
        return Err(Error::Contract("incumbent adapters changed during extension".into()));
    }
    names.push(ext.newcomer.clone());
    save_pool(&adapters_path(&run.dir), &pool, &names)?;

    let eval = eval_set(&run.dir, cfg)?;
    let s = cfg.train.prefix_len;
    let mut m = evaluate_paths(&pool.models, Some(&pool), &eval, s)?;
    let trained = extension_paths(new, &ext.partners);
    let incumbent_paths: Vec<TransPath> = TransPath::all(incumbents);
    m.mark_trained(&incumbent_paths);
    m.mark_trained(&trained);
    let zero_shot = (0..pool.len())
        .flat_map(|i| (0..pool.len()).map(move |j| (i, j)))
        .filter(|&(i, j)| !m.trained[i][j])
        .filter_map(|(i, j)| m.get(i, j).map(|v| (i, j, v)))
        .collect();
    let report = MatrixReport {
        models: names,
        own_cache: diagonal(&evaluate_paths(&pool.models, None, &eval, s)?),
        identity: None,
        linear: None,
        trained_mean: m.mean_over(&trained),
        translator: Some(m),
        zero_shot,
    };
    run.write_metrics(&log)?;
    write_matrix(run, &report)?;
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum AdapterInit {
    Random,
    Pretrained,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub tasks: usize,
}

fn summary(xs: &[f64]) -> Option<Summary> {
    (!xs.is_empty()).then(|| {
        let (mean, std) = mean_std(xs);
        Summary {
            mean,
            std,
            tasks: xs.len(),
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub translated: Option<Summary>,
    pub random: Option<Summary>,
    pub direct: Option<Summary>,
    pub win_rate: f64,
}

impl From<&PortabilityReport> for PhaseSummary {
    fn from(r: &PortabilityReport) -> Self {
        PhaseSummary {
            translated: summary(&r.translated),
            random: summary(&r.random),
            direct: summary(&r.direct),
            win_rate: r.win_rate(),
        }
    }
}

/// Contents of `meta.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaReport {
    pub adapters: AdapterInit,
    pub src: String,
    pub dst: String,
    pub before: PhaseSummary,
    pub after: PhaseSummary,
    pub per_task_before: PortabilityReport,
    pub per_task_after: PortabilityReport,
}

/// Learned prompts for `tasks` on `model`, cached under `<run>/prompts`
/// keyed by everything that determines them.
fn cached_prompts(
    run: &RunDir,
    cfg: &ExperimentConfig,
    model: &LanguageModel,
    tag: &str,
    tasks: &[PromptTask],
) -> Result<Vec<SoftPrompt>> {
    let key = serde_json::to_vec(&(
        &cfg.portability.prompt,
        cfg.seed,
        params_hash(&model.params()),
        tasks.iter().map(|t| (&t.task_id, &t.train_completions)).collect::<Vec<_>>(),
    ))?;
    let dir = run.dir.join("prompts");
    std::fs::create_dir_all(&dir).map_err(|e| Error::File {
        path: dir.clone(),
        source: e,
    })?;
    let path = dir.join(format!("{tag}-{:016x}.kvbl", fnv1a(&key)));
    if let Ok(ckpt) = load_checkpoint(&path) {
        if ckpt.tensors.len() == tasks.len() {
            return ckpt
                .tensors
                .iter()
                .map(|(_, d)| Ok(SoftPrompt { embeddings: Tensor::from_data(d)? }))
                .collect();
        }
    }
    let prompts = learn_prompts(model, tasks, &cfg.portability.prompt, cfg.seed)?;
    let named = tasks
        .iter()
        .zip(&prompts)
        .map(|(t, p)| (format!("task.{}", t.task_id), p.embeddings.to_data()))
        .collect();
    save_checkpoint(&path, &Checkpoint::new(serde_json::Value::Null, named))?;
    Ok(prompts)
}

/// Meta-train the adapters for soft-prompt portability and report
/// meta-test NLLs before and after.
pub fn meta(cfg: &ExperimentConfig, run: &RunDir, base: &Path, pool_dir: &Path, init: AdapterInit) -> Result<MetaReport> {
    let p = &cfg.portability;
    let (pool, names) = match init {
        AdapterInit::Pretrained => load_pool(cfg, base, pool_dir)?,
        AdapterInit::Random => {
            let specs = cfg.pool_models();
            let pool = ModelPool::new(load_frozen(base, &specs)?, cfg.translator.clone(), cfg.seed)?;
            (pool, pool_names_of(cfg))
        }
    };
    let (src, dst) = (p.meta.src, p.meta.dst);
    if src >= pool.len() || dst >= pool.len() {
        return Err(Error::Config {
            field: "portability.meta".into(),
            reason: format!("path {src}->{dst} outside pool of {}", pool.len()),
        });
    }
    if p.meta_test_tasks == 0 || p.meta_test_tasks >= p.tasks.num_tasks {
        return Err(Error::Config {
            field: "portability.meta_test_tasks".into(),
            reason: "must leave at least one meta-train task".into(),
        });
    }
    let source = stream(&run.dir, cfg, &cfg.data.translate_on, cfg.data.prompt_source_tokens, PROMPT_SALT)?;
    let tasks = gen_prompt_tasks(&pool.models[src], &source, &p.tasks, cfg.seed)?;
    let (train, test) = tasks.split_at(tasks.len() - p.meta_test_tasks);
    let src_prompts = cached_prompts(run, cfg, &pool.models[src], &format!("src-{}", names[src]), &tasks)?;
    let direct = cached_prompts(run, cfg, &pool.models[dst], &format!("direct-{}", names[dst]), test)?;
    let (train_prompts, test_prompts) = src_prompts.split_at(train.len());

    let before = meta_test(&pool, &pool, test, test_prompts, Some(&direct), src, dst, cfg.seed)?;
    let losses = meta_train_portability(&pool, train, train_prompts, &p.meta)?;
    let after = meta_test(&pool, &pool, test, test_prompts, Some(&direct), src, dst, cfg.seed)?;
    save_pool(&run.checkpoints().join("adapters-meta.kvbl"), &pool, &names)?;

    let mut log = MetricsLog::default();
    let sched = kvbabel::optim::LrSchedule {
        total_steps: p.meta.steps,
        warmup_steps: p.meta.warmup_steps.min(p.meta.steps),
        init_lr: 1e-6,
        peak_lr: p.meta.peak_lr,
    };
    for (step, v) in losses.iter().enumerate() {
        log.push(step, Some(TransPath::new(src, dst)), "meta_lm", *v, sched.lr_at(step));
    }
    run.write_metrics(&log)?;
    let report = MetaReport {
        adapters: init,
        src: names[src].clone(),
        dst: names[dst].clone(),
        before: PhaseSummary::from(&before),
        after: PhaseSummary::from(&after),
        per_task_before: before,
        per_task_after: after,
    };
    write_json(&run.dir.join("meta.json"), &report)?;
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum EvalMode {
    Own,
    Identity,
    Linear,
    Translator,
}

/// Evaluate the pool under one translation mode and merge into
/// `matrix.json`.
pub fn eval(cfg: &ExperimentConfig, run: &RunDir, base: &Path, pool_dir: &Path, mode: EvalMode) -> Result<MatrixReport> {
    let s = cfg.train.prefix_len;
    let eval = eval_set(&run.dir, cfg)?;
    let (models, names, pool) = if mode == EvalMode::Translator {
        let (pool, names) = load_pool(cfg, base, pool_dir)?;
        (Vec::new(), names, Some(pool))
    } else {
        (load_frozen(base, &cfg.pool_models())?, pool_names_of(cfg), None)
    };
    let models: &[LanguageModel] = pool.as_ref().map_or(&models, |p| &p.models);
    let mut report = MatrixReport {
        models: names,
        own_cache: diagonal(&evaluate_paths(models, None, &eval, s)?),
        ..Default::default()
    };
    match mode {
        EvalMode::Own => {}
        EvalMode::Identity => report.identity = Some(evaluate_paths(models, Some(&identity_of(models)), &eval, s)?),
        EvalMode::Linear => {
            let configs: Vec<_> = models.iter().map(|m| m.config().clone()).collect();
            let linear = LinearPool::init(&configs, cfg.seed);
            let ckpt = load_checkpoint(&pool_dir.join("checkpoints").join("linear.kvbl"))?;
            for (i, m) in linear.maps.iter().enumerate() {
                for (n, t) in m.named_params() {
                    let d = ckpt
                        .get(&format!("{i}.{n}"))
                        .ok_or_else(|| Error::Input(format!("linear checkpoint lacks `{i}.{n}`")))?;
                    t.set_data(&d.data);
                }
            }
            report.linear = Some(evaluate_paths(models, Some(&linear as &dyn CacheTranslator), &eval, s)?);
        }
        EvalMode::Translator => {
            let pool = pool.as_ref().expect("loaded above");
            report.translator = Some(evaluate_paths(models, Some(pool as &dyn CacheTranslator), &eval, s)?);
        }
    }
    write_matrix(run, &report)?;
    Ok(report)
}

/// `--base` and `--pool` default to the run directory itself.
pub fn or_run(dir: &Option<PathBuf>, run: &Path) -> PathBuf {
    dir.clone().unwrap_or_else(|| run.to_path_buf())
}

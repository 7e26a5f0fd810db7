//! Training loops, evaluation over paths and the metrics log.

use std::io::Write;
use std::path::Path as FsPath;

use serde::{Deserialize, Serialize};

use crate::corpus::make_batches;
use crate::error::{Error, Result};
use crate::lm::{LanguageModel, TokenBatch};
use crate::objectives::{
    combined_step_loss, prefix_cache, sample_from, suffix_lm_loss_from_cache, LossWeights, Path,
};
use crate::optim::{adamw_step, clip_global_norm, AdamWConfig, LrSchedule, OptimState};
use crate::pool::ModelPool;
use crate::rng::Rng;
use crate::tensor::{no_grad, Tensor};
use crate::translator::{CacheTranslator, LinearPool};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub init_lr: f64,
    pub peak_lr: f64,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub paths_per_step: usize,
    pub weights: LossWeights,
    pub seed: u64,
    pub prefix_len: usize,
    pub seq_len: usize,
    /// Evaluate every this many steps; 0 disables periodic evaluation.
    pub eval_every: usize,
    pub adamw: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_steps: 2000,
            warmup_steps: 100,
            init_lr: 1e-6,
            peak_lr: 1e-3,
            batch_size: 16,
            clip_norm: 1.0,
            paths_per_step: 4,
            weights: LossWeights::default(),
            seed: 0,
            prefix_len: 32,
            seq_len: 64,
            eval_every: 0,
            adamw: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.total_steps {
            return Err(Error::config("warmup_steps", "exceeds total_steps"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::config("clip_norm", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.prefix_len >= self.seq_len {
            return Err(Error::config("prefix_len", "must be below seq_len"));
        }
        if !(self.peak_lr > 0.0 && self.init_lr >= 0.0) {
            return Err(Error::config("peak_lr", "learning rates must be positive"));
        }
        self.weights.validate()
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            total_steps: self.total_steps,
            warmup_steps: self.warmup_steps,
            init_lr: self.init_lr,
            peak_lr: self.peak_lr,
        }
    }
}

pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    cfg.schedule().lr_at(step)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub path_src: Option<usize>,
    pub path_dst: Option<usize>,
    pub loss_kind: String,
    pub value: f64,
    pub lr: f64,
}

/// Append-only training log, written as CSV with columns
/// `step,path_src,path_dst,loss_kind,value,lr`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricRow>,
}

impl MetricsLog {
    pub fn push(&mut self, step: usize, path: Option<Path>, kind: &str, value: f64, lr: f64) {
        self.rows.push(MetricRow {
            step,
            path_src: path.map(|p| p.src),
            path_dst: path.map(|p| p.dst),
            loss_kind: kind.to_string(),
            value,
            lr,
        });
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }

    pub fn write_csv(&self, path: &FsPath) -> Result<()> {
        let bytes = self.to_csv()?;
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&bytes))
            .map_err(|e| Error::file(path, e))
    }

    pub fn read_csv(path: &FsPath) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let rows = r
            .deserialize()
            .collect::<std::result::Result<Vec<MetricRow>, _>>()?;
        Ok(MetricsLog { rows })
    }

    /// Rows of one kind, in log order.
    pub fn of_kind<'a>(&'a self, kind: &'a str) -> impl Iterator<Item = &'a MetricRow> + 'a {
        self.rows.iter().filter(move |r| r.loss_kind == kind)
    }
}

fn finite_or_abort(value: f64, step: usize, what: &str, lr: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::TrainingAborted {
            step,
            detail: format!("{} is {} (lr {:e})", what, value, lr),
        })
    }
}

/// Clip, check and apply one AdamW update from the leaves' gradients.
fn apply_update(
    params: &[Tensor],
    state: &mut OptimState,
    cfg: &TrainConfig,
    step: usize,
    lr: f64,
) -> Result<f64> {
    let mut grads: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();
    let scale =
        clip_global_norm(&mut grads, cfg.clip_norm).map_err(|e| Error::TrainingAborted {
            step,
            detail: format!("{} (lr {:e})", e, lr),
        })?;
    adamw_step(params, &grads, state, lr)?;
    for p in params {
        p.zero_grad();
    }
    Ok(scale)
}

/// Next-token pretraining (or fine-tuning) of one model on a token stream.
pub fn pretrain_lm(
    model: &LanguageModel,
    stream: &[usize],
    cfg: &TrainConfig,
    log: &mut MetricsLog,
) -> Result<()> {
    pretrain_lm_with(model, stream, cfg, log, |_, _| Ok(()))
}

/// [`pretrain_lm`] with `after_step(steps_done, model)` called after every
/// update, e.g. to snapshot mid-training checkpoints.
pub fn pretrain_lm_with(
    model: &LanguageModel,
    stream: &[usize],
    cfg: &TrainConfig,
    log: &mut MetricsLog,
    mut after_step: impl FnMut(usize, &LanguageModel) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    if model.is_frozen() {
        return Err(Error::Contract("cannot pretrain a frozen model".into()));
    }
    let params = model.params();
    let mut state = OptimState::new(&params, cfg.adamw);
    let mut batches = make_batches(stream, cfg.batch_size, cfg.seq_len, cfg.prefix_len, cfg.seed)?;
    for step in 0..cfg.total_steps {
        let lr = lr_at(step, cfg);
        let (batch, _) = batches.next().expect("endless");
        let loss = model.full_loss(&batch)?;
        finite_or_abort(loss.item(), step, "pretraining loss", lr)?;
        loss.backward()?;
        apply_update(&params, &mut state, cfg, step, lr)?;
        log.push(step, None, "pretrain_lm", loss.item(), lr);
        after_step(step + 1, model)?;
    }
    Ok(())
}

/// Held-out batches plus the split used to evaluate them.
pub struct EvalSet<'a> {
    pub batches: &'a [TokenBatch],
    pub prefix_len: usize,
}

/// Train `params` so that `translator` minimises the combined loss over
/// paths drawn from `candidates`. Everything outside `params` stays put.
#[allow(clippy::too_many_arguments)]
pub fn train_paths(
    models: &[LanguageModel],
    translator: &dyn CacheTranslator,
    params: &[Tensor],
    candidates: &[Path],
    stream: &[usize],
    cfg: &TrainConfig,
    eval: Option<&EvalSet>,
    log: &mut MetricsLog,
) -> Result<()> {
    cfg.validate()?;
    if models.iter().any(|m| !m.is_frozen()) {
        return Err(Error::Contract(
            "pool models must be frozen during translator training".into(),
        ));
    }
    let mut state = OptimState::new(params, cfg.adamw);
    let mut batches = make_batches(
        stream,
        cfg.batch_size,
        cfg.seq_len,
        cfg.prefix_len,
        cfg.seed,
    )?;
    let mut path_rng = Rng::derive(cfg.seed, 1);
    for step in 0..cfg.total_steps {
        let lr = lr_at(step, cfg);
        let (batch, s) = batches.next().expect("endless");
        let paths = sample_from(candidates, cfg.paths_per_step, &mut path_rng)?;
        let loss = combined_step_loss(&paths, &batch, s, cfg.weights, models, translator)?;
        for rec in &loss.per_path {
            if let Some(v) = rec.lm {
                finite_or_abort(
                    v,
                    step,
                    &format!("lm loss on path {}->{}", rec.path.src, rec.path.dst),
                    lr,
                )?;
                log.push(step, Some(rec.path), "train_lm", v, lr);
            }
            if let Some(v) = rec.recon {
                finite_or_abort(
                    v,
                    step,
                    &format!("recon loss on path {}->{}", rec.path.src, rec.path.dst),
                    lr,
                )?;
                log.push(step, Some(rec.path), "train_recon", v, lr);
            }
        }
        loss.total.backward()?;
        apply_update(params, &mut state, cfg, step, lr)?;
        if let Some(ev) = eval {
            if cfg.eval_every > 0
                && ((step + 1) % cfg.eval_every == 0 || step + 1 == cfg.total_steps)
            {
                let m = evaluate_paths(models, Some(translator), ev.batches, ev.prefix_len)?;
                for p in candidates {
                    if let Some(v) = m.get(p.src, p.dst) {
                        log.push(step + 1, Some(*p), "eval_lm", v, lr);
                    }
                }
            }
        }
    }
    Ok(())
}

/// Train every adapter pair whose mask is set, over all paths of the pool.
pub fn train_translators(
    pool: &ModelPool,
    stream: &[usize],
    cfg: &TrainConfig,
    eval: Option<&EvalSet>,
    log: &mut MetricsLog,
) -> Result<()> {
    let params = pool.trainable_params();
    train_paths(
        &pool.models,
        pool,
        &params,
        &Path::all(pool.len()),
        stream,
        cfg,
        eval,
        log,
    )
}

pub fn train_linear_baseline(
    models: &[LanguageModel],
    linear: &LinearPool,
    stream: &[usize],
    cfg: &TrainConfig,
    log: &mut MetricsLog,
) -> Result<()> {
    train_paths(
        models,
        linear,
        &linear.params(),
        &Path::all(models.len()),
        stream,
        cfg,
        None,
        log,
    )
}

/// Paths used when training a newcomer `new` against `partners`.
pub fn extension_paths(new: usize, partners: &[usize]) -> Vec<Path> {
    let mut out = vec![Path::new(new, new)];
    for &j in partners {
        out.push(Path::new(new, j));
        out.push(Path::new(j, new));
    }
    out
}

/// Add `new_model` to the pool and train only its adapter pair, on paths
/// linking it to itself and to the incumbents in `train_partners`.
/// Returns the newcomer's index.
pub fn extend_pool(
    pool: &mut ModelPool,
    new_model: LanguageModel,
    train_partners: &[usize],
    stream: &[usize],
    cfg: &TrainConfig,
    log: &mut MetricsLog,
) -> Result<usize> {
    pool.tconfig.validate(new_model.config().num_layers)?;
    if let Some(&bad) = train_partners.iter().find(|&&j| j >= pool.len()) {
        return Err(Error::config(
            "train_partners",
            format!("no incumbent {bad}"),
        ));
    }
    for i in 0..pool.len() {
        pool.set_trainable(i, false);
    }
    let new = pool.push(new_model, cfg.seed)?;
    let paths = extension_paths(new, train_partners);
    let mut cfg = cfg.clone();
    cfg.paths_per_step = cfg.paths_per_step.min(paths.len());
    let params = pool.trainable_params();
    train_paths(
        &pool.models,
        &*pool,
        &params,
        &paths,
        stream,
        &cfg,
        None,
        log,
    )?;
    Ok(new)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "nll", rename_all = "snake_case")]
pub enum NllCell {
    Value(f64),
    /// The translation mode cannot serve this pair.
    Unsupported,
    /// Not evaluated in this mode.
    Absent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NllMatrix {
    pub cells: Vec<Vec<NllCell>>,
    /// Paths that appeared in training; the rest are zero-shot.
    pub trained: Vec<Vec<bool>>,
}

impl NllMatrix {
    pub fn size(&self) -> usize {
        self.cells.len()
    }

    pub fn get(&self, src: usize, dst: usize) -> Option<f64> {
        match self.cells.get(src)?.get(dst)? {
            NllCell::Value(v) => Some(*v),
            _ => None,
        }
    }

    pub fn mark_trained(&mut self, paths: &[Path]) {
        for p in paths {
            self.trained[p.src][p.dst] = true;
        }
    }

    /// Mean NLL over `paths`; `None` if any cell lacks a value.
    pub fn mean_over(&self, paths: &[Path]) -> Option<f64> {
        let vals: Option<Vec<f64>> = paths.iter().map(|p| self.get(p.src, p.dst)).collect();
        let vals = vals?;
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Mean suffix NLL for every `(src, dst)` pair. With no translator, only
/// the diagonal is filled with each model's own-cache loss.
pub fn evaluate_paths(
    models: &[LanguageModel],
    translator: Option<&dyn CacheTranslator>,
    batches: &[TokenBatch],
    s: usize,
) -> Result<NllMatrix> {
    let n = models.len();
    let mut cells = vec![vec![NllCell::Absent; n]; n];
    let total_rows: usize = batches.iter().map(|b| b.batch).sum();
    if total_rows == 0 {
        return Err(Error::Input("empty evaluation set".into()));
    }
    no_grad(|| -> Result<()> {
        let mut sums = vec![vec![Some(0.0); n]; n];
        for batch in batches {
            let w = batch.batch as f64;
            let caches = models
                .iter()
                .map(|m| prefix_cache(m, batch, s))
                .collect::<Result<Vec<_>>>()?;
            for (i, row) in sums.iter_mut().enumerate() {
                for (j, acc) in row.iter_mut().enumerate() {
                    let Some(a) = acc else { continue };
                    let loss = match translator {
                        None if i != j => continue,
                        None => models[j].lm_loss(batch, Some(&caches[i]), s),
                        Some(t) => suffix_lm_loss_from_cache(
                            Path::new(i, j),
                            batch,
                            s,
                            &caches[i],
                            models,
                            t,
                        ),
                    };
                    match loss {
                        Ok(l) => *a += w * l.item(),
                        Err(Error::UnsupportedPair { .. }) => *acc = None,
                        Err(e) => return Err(e),
                    }
                }
            }
        }
        for i in 0..n {
            for j in 0..n {
                if translator.is_none() && i != j {
                    continue;
                }
                cells[i][j] = match sums[i][j] {
                    Some(v) => NllCell::Value(v / total_rows as f64),
                    None => NllCell::Unsupported,
                };
            }
        }
        Ok(())
    })?;
    Ok(NllMatrix {
        cells,
        trained: vec![vec![false; n]; n],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{eval_batches, gen_corpus, LanguageSpec};
    use crate::lm::ModelConfig;
    use crate::translator::{IdentityTranslator, TranslatorConfig};

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            total_steps: 6,
            warmup_steps: 2,
            batch_size: 2,
            prefix_len: 6,
            seq_len: 12,
            paths_per_step: 2,
            ..Default::default()
        }
    }

    fn params_snapshot(ts: &[Tensor]) -> Vec<Vec<f64>> {
        ts.iter().map(Tensor::to_vec).collect()
    }

    fn pool2() -> ModelPool {
        let models = vec![
            LanguageModel::init(ModelConfig::toy(2), 0).unwrap(),
            LanguageModel::init(ModelConfig::toy(2), 1).unwrap(),
        ];
        ModelPool::new(models, TranslatorConfig::default(), 0).unwrap()
    }

    #[test]
    fn config_checks() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            warmup_steps: 3000,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            clip_norm: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn lr_schedule_from_config() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 1e-6);
        assert_eq!(lr_at(cfg.warmup_steps, &cfg), cfg.peak_lr);
        assert!(lr_at(cfg.total_steps, &cfg).abs() < 1e-12);
    }

    #[test]
    fn translator_training_touches_only_adapters_and_is_deterministic() {
        let stream = gen_corpus(&LanguageSpec::default(), 2000, 0).unwrap();
        let run = || {
            let pool = pool2();
            let frozen = params_snapshot(
                &pool
                    .models
                    .iter()
                    .flat_map(|m| m.params())
                    .collect::<Vec<_>>(),
            );
            let before = params_snapshot(&pool.trainable_params());
            let mut log = MetricsLog::default();
            train_translators(&pool, &stream, &tiny_cfg(), None, &mut log).unwrap();
            let after_models = params_snapshot(
                &pool
                    .models
                    .iter()
                    .flat_map(|m| m.params())
                    .collect::<Vec<_>>(),
            );
            assert_eq!(frozen, after_models);
            assert_ne!(before, params_snapshot(&pool.trainable_params()));
            log.to_csv().unwrap()
        };
        let a = run();
        assert_eq!(a, run());
        let text = String::from_utf8(a).unwrap();
        assert!(text.starts_with("step,path_src,path_dst,loss_kind,value,lr\n"));
        assert_eq!(text.lines().count(), 1 + 6 * 2);
    }

    #[test]
    fn masked_adapters_stay_bit_identical() {
        let stream = gen_corpus(&LanguageSpec::default(), 2000, 0).unwrap();
        let mut pool = pool2();
        pool.set_trainable(0, false);
        let held = params_snapshot(&pool.adapters[0].params());
        train_translators(
            &pool,
            &stream,
            &tiny_cfg(),
            None,
            &mut MetricsLog::default(),
        )
        .unwrap();
        assert_eq!(held, params_snapshot(&pool.adapters[0].params()));
    }

    #[test]
    fn extension_trains_only_the_newcomer() {
        let stream = gen_corpus(&LanguageSpec::default(), 2000, 0).unwrap();
        let mut pool = pool2();
        let before: Vec<_> = pool
            .adapters
            .iter()
            .map(|a| params_snapshot(&a.params()))
            .collect();
        let count = pool.adapter_param_count();
        let newcomer = LanguageModel::init(ModelConfig::toy(2), 7).unwrap();
        let pair = crate::translator::build_adapter_pair(newcomer.config(), &pool.tconfig, 0)
            .unwrap()
            .param_count();
        let idx = extend_pool(
            &mut pool,
            newcomer,
            &[1],
            &stream,
            &tiny_cfg(),
            &mut MetricsLog::default(),
        )
        .unwrap();
        assert_eq!(idx, 2);
        assert_eq!(pool.adapter_param_count(), count + pair);
        for (i, b) in before.iter().enumerate() {
            assert_eq!(b, &params_snapshot(&pool.adapters[i].params()));
        }
        assert_eq!(
            extension_paths(2, &[1]),
            vec![Path::new(2, 2), Path::new(2, 1), Path::new(1, 2)]
        );
    }

    #[test]
    fn nan_loss_aborts_with_step() {
        let stream = gen_corpus(&LanguageSpec::default(), 2000, 0).unwrap();
        let pool = pool2();
        pool.adapters[0].params()[0].update_data(|d| d[0] = f64::NAN);
        let err = train_translators(
            &pool,
            &stream,
            &tiny_cfg(),
            None,
            &mut MetricsLog::default(),
        )
        .unwrap_err();
        assert!(
            matches!(err, Error::TrainingAborted { step: 0, .. }),
            "{err}"
        );
    }

    #[test]
    fn evaluation_modes() {
        let stream = gen_corpus(&LanguageSpec::default(), 400, 1).unwrap();
        let batches = eval_batches(&stream, 2, 12, 4).unwrap();
        let pool = pool2();
        let none = evaluate_paths(&pool.models, None, &batches, 6).unwrap();
        assert_eq!(none.cells[0][1], NllCell::Absent);
        let direct: f64 = batches
            .iter()
            .map(|b| pool.models[1].lm_loss(b, None, 6).unwrap().item() * b.batch as f64)
            .sum::<f64>()
            / 4.0;
        assert!((none.get(1, 1).unwrap() - direct).abs() < 1e-9);

        let mixed = vec![
            LanguageModel::init(ModelConfig::toy(2), 0).unwrap(),
            LanguageModel::init(ModelConfig::toy(4), 1).unwrap(),
        ];
        let ident = IdentityTranslator {
            configs: mixed.iter().map(|m| m.config().clone()).collect(),
        };
        let m = evaluate_paths(&mixed, Some(&ident), &batches, 6).unwrap();
        assert_eq!(m.cells[0][1], NllCell::Unsupported);
        assert_eq!(m.cells[1][0], NllCell::Unsupported);
        assert!(m.get(0, 0).is_some());
        let json = serde_json::to_string(&m).unwrap();
        assert!(json.contains("unsupported"));
    }

    #[test]
    fn metrics_round_trip() {
        let mut log = MetricsLog::default();
        log.push(0, Some(Path::new(0, 1)), "train_lm", 4.25, 1e-6);
        log.push(1, None, "pretrain_lm", 3.5, 2e-4);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        log.write_csv(&p).unwrap();
        assert_eq!(MetricsLog::read_csv(&p).unwrap(), log);
    }
}

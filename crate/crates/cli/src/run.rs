//! Run directories: layout, the writer lock, data streams and checkpoint
//! plumbing shared by the commands.

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use kvbabel::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use kvbabel::corpus::{eval_batches, load_or_gen_corpus};
use kvbabel::lm::{LanguageModel, TokenBatch};
use kvbabel::pool::ModelPool;
use kvbabel::train::MetricsLog;
use kvbabel::translator::LinearPool;
use kvbabel::{Error, Result, Rng, Tensor};

use crate::config::{ExperimentConfig, ModelSpec};

fn file_err(path: &Path, source: std::io::Error) -> Error {
    Error::File {
        path: path.to_path_buf(),
        source,
    }
}

/// Holds `<dir>/.lock` for as long as it lives.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<RunLock> {
        std::fs::create_dir_all(dir).map_err(|e| file_err(dir, e))?;
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(RunLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Contract(format!(
                "{} is locked by another writer (delete {} if that run died)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(file_err(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

pub struct RunDir {
    pub dir: PathBuf,
    _lock: RunLock,
}

impl RunDir {
    /// Lock `dir` and write the config snapshot before anything else.
    pub fn begin(dir: &Path, cfg: &ExperimentConfig) -> Result<RunDir> {
        let lock = RunLock::acquire(dir)?;
        let run = RunDir {
            dir: dir.to_path_buf(),
            _lock: lock,
        };
        write_json(&run.dir.join("config.json"), cfg)?;
        std::fs::create_dir_all(run.checkpoints()).map_err(|e| file_err(&run.checkpoints(), e))?;
        Ok(run)
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.dir.join("checkpoints")
    }

    /// Replace rows of the kinds in `log` and keep everything else.
    pub fn write_metrics(&self, log: &MetricsLog) -> Result<()> {
        let path = self.dir.join("metrics.csv");
        let mut merged = if path.exists() {
            MetricsLog::read_csv(&path)?
        } else {
            MetricsLog::default()
        };
        let kinds: Vec<&str> = log.rows.iter().map(|r| r.loss_kind.as_str()).collect();
        merged.rows.retain(|r| !kinds.contains(&r.loss_kind.as_str()));
        merged.rows.extend(log.rows.iter().cloned());
        merged.write_csv(&path)
    }
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_vec_pretty(value)?;
    text.push(b'\n');
    std::fs::write(path, text).map_err(|e| file_err(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read(path).map_err(|e| file_err(path, e))?;
    Ok(serde_json::from_slice(&text)?)
}

pub fn lm_path(dir: &Path, name: &str) -> PathBuf {
    dir.join("checkpoints").join(format!("lm-{name}.kvbl"))
}

pub fn save_lm(dir: &Path, spec: &ModelSpec, model: &LanguageModel) -> Result<u64> {
    let config = serde_json::json!({ "name": spec.name, "model": model.config() });
    save_checkpoint(&lm_path(dir, &spec.name), &Checkpoint::new(config, model.to_named_data()))
}

/// Load a pretrained model by name from `dir`; missing files are file
/// errors.
pub fn load_lm(dir: &Path, spec: &ModelSpec) -> Result<LanguageModel> {
    let ckpt = load_checkpoint(&lm_path(dir, &spec.name))?;
    LanguageModel::from_named(spec.config.clone(), &ckpt.tensors)
}

pub fn load_frozen(dir: &Path, specs: &[&ModelSpec]) -> Result<Vec<LanguageModel>> {
    specs
        .iter()
        .map(|s| {
            let mut m = load_lm(dir, s)?;
            m.freeze();
            Ok(m)
        })
        .collect()
}

pub fn adapters_path(dir: &Path) -> PathBuf {
    dir.join("checkpoints").join("adapters.kvbl")
}

pub fn save_pool(path: &Path, pool: &ModelPool, names: &[String]) -> Result<u64> {
    let named: Vec<(String, Tensor)> = pool
        .adapters
        .iter()
        .enumerate()
        .flat_map(|(i, a)| a.named_params().into_iter().map(move |(n, t)| (format!("{i}.{n}"), t)))
        .collect();
    let config = serde_json::json!({ "models": names, "translator": pool.tconfig });
    save_checkpoint(path, &Checkpoint::from_params(config, &named))
}

/// Model names recorded in an adapters checkpoint.
pub fn pool_names(ckpt: &Checkpoint) -> Result<Vec<String>> {
    let names = ckpt.config.get("models").cloned().unwrap_or_default();
    Ok(serde_json::from_value(names)?)
}

/// Copy checkpointed adapter weights into the first slots of `pool`.
pub fn load_pool_weights(pool: &ModelPool, ckpt: &Checkpoint) -> Result<()> {
    let n = pool_names(ckpt)?.len();
    for (i, a) in pool.adapters.iter().enumerate().take(n) {
        for (name, t) in a.named_params() {
            let key = format!("{i}.{name}");
            let data = ckpt
                .get(&key)
                .ok_or_else(|| Error::Input(format!("adapters checkpoint lacks `{key}`")))?;
            if data.shape != t.shape() {
                return Err(Error::Input(format!(
                    "`{key}` has shape {:?}, pool expects {:?}",
                    data.shape,
                    t.shape()
                )));
            }
            t.set_data(&data.data);
        }
    }
    Ok(())
}

pub fn save_linear(path: &Path, linear: &LinearPool) -> Result<u64> {
    let named: Vec<(String, Tensor)> = linear
        .maps
        .iter()
        .enumerate()
        .flat_map(|(i, m)| m.named_params().into_iter().map(move |(n, t)| (format!("{i}.{n}"), t)))
        .collect();
    save_checkpoint(path, &Checkpoint::from_params(serde_json::Value::Null, &named))
}

/// Training text for a language mix: the per-language streams, each cached
/// under `<dir>/data`, concatenated.
pub fn stream(dir: &Path, cfg: &ExperimentConfig, languages: &[usize], tokens: usize, salt: u64) -> Result<Vec<usize>> {
    let data = dir.join("data");
    std::fs::create_dir_all(&data).map_err(|e| file_err(&data, e))?;
    let mut out = Vec::new();
    for &l in languages {
        let spec = &cfg.data.languages[l];
        let seed = Rng::derive(cfg.seed, salt * 1000 + l as u64).next_u64();
        let path = data.join(format!("lang{l}-{salt}-{seed:016x}-{tokens}.kvbc"));
        out.extend(load_or_gen_corpus(&path, spec, tokens, seed)?);
    }
    Ok(out)
}

pub const TRAIN_SALT: u64 = 1;
pub const EVAL_SALT: u64 = 2;
pub const PROMPT_SALT: u64 = 3;

pub fn translator_stream(dir: &Path, cfg: &ExperimentConfig) -> Result<Vec<usize>> {
    stream(dir, cfg, &cfg.data.translate_on, cfg.data.tokens_per_language, TRAIN_SALT)
}

pub fn eval_set(dir: &Path, cfg: &ExperimentConfig) -> Result<Vec<TokenBatch>> {
    let s = stream(dir, cfg, &cfg.data.translate_on, cfg.data.eval_tokens, EVAL_SALT)?;
    eval_batches(&s, cfg.data.eval_batch, cfg.train.seq_len, cfg.data.eval_windows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Recipe;
    use kvbabel::train::MetricsLog;

    #[test]
    fn second_writer_is_refused_until_release() {
        let dir = tempfile::tempdir().unwrap();
        let a = RunLock::acquire(dir.path()).unwrap();
        assert!(matches!(RunLock::acquire(dir.path()), Err(Error::Contract(_))));
        drop(a);
        RunLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn config_snapshot_comes_first() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::recipe(Recipe::Seeds2);
        let run = RunDir::begin(dir.path(), &cfg).unwrap();
        let back: ExperimentConfig = read_json(&run.dir.join("config.json")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn metrics_rows_of_a_kind_are_replaced() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::begin(dir.path(), &ExperimentConfig::recipe(Recipe::Seeds2)).unwrap();
        let mut a = MetricsLog::default();
        a.push(0, None, "pretrain_lm", 1.0, 0.1);
        run.write_metrics(&a).unwrap();
        let mut b = MetricsLog::default();
        b.push(0, None, "train_lm", 2.0, 0.1);
        run.write_metrics(&b).unwrap();
        run.write_metrics(&b).unwrap();
        let back = MetricsLog::read_csv(&run.dir.join("metrics.csv")).unwrap();
        assert_eq!(back.rows.len(), 2);
    }
}

//! Training losses over translation paths.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{KVCache, LanguageModel, TokenBatch};
use crate::rng::Rng;
use crate::tensor::{no_grad, Tensor};
use crate::translator::CacheTranslator;

/// Source and destination pool indices; `src == dst` is a cyclic path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Path {
    pub src: usize,
    pub dst: usize,
}

impl Path {
    pub fn new(src: usize, dst: usize) -> Self {
        Path { src, dst }
    }

    /// All `n * n` single-hop paths in row-major order.
    pub fn all(n: usize) -> Vec<Path> {
        (0..n)
            .flat_map(|i| (0..n).map(move |j| Path::new(i, j)))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub recon_weight: f64,
    pub lm_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            recon_weight: 0.0,
            lm_weight: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.recon_weight >= 0.0 && self.lm_weight >= 0.0) {
            return Err(Error::config(
                "loss_weights",
                "weights must be non-negative",
            ));
        }
        if self.recon_weight == 0.0 && self.lm_weight == 0.0 {
            return Err(Error::config(
                "loss_weights",
                "recon and lm weights are both zero",
            ));
        }
        Ok(())
    }
}

thread_local! {
    static RECON_CALLS: Cell<usize> = const { Cell::new(0) };
}

/// Number of [`recon_loss`] evaluations on this thread so far.
pub fn recon_call_count() -> usize {
    RECON_CALLS.with(Cell::get)
}

/// Mean squared error between the translated source cache and the target
/// model's own cache of the same text, over keys and values together.
pub fn recon_loss(
    path: Path,
    cache_src: &KVCache,
    cache_dst_true: &KVCache,
    translator: &dyn CacheTranslator,
) -> Result<Tensor> {
    RECON_CALLS.with(|c| c.set(c.get() + 1));
    if cache_src.positions != cache_dst_true.positions
        || cache_src.batch() != cache_dst_true.batch()
    {
        return Err(Error::Contract(format!(
            "recon needs caches of the same text: {} x {} vs {} x {}",
            cache_src.batch(),
            cache_src.len(),
            cache_dst_true.batch(),
            cache_dst_true.len()
        )));
    }
    let out = translator.translate_cache(path.src, path.dst, cache_src)?;
    if out.keys.shape() != cache_dst_true.keys.shape() {
        return Err(Error::Contract(format!(
            "translated cache {:?} vs target cache {:?}",
            out.keys.shape(),
            cache_dst_true.keys.shape()
        )));
    }
    // equal-sized halves, so the mean of means is the joint mean
    Ok(out
        .keys
        .mse(&cache_dst_true.keys)?
        .add(&out.values.mse(&cache_dst_true.values)?)?
        .scale(0.5))
}

fn check_split(text: &TokenBatch, s: usize) -> Result<()> {
    if s == 0 || s + 1 >= text.len {
        return Err(Error::Input(format!(
            "split {} must leave a prefix and at least two suffix tokens of {}",
            s, text.len
        )));
    }
    Ok(())
}

/// Cache of `text[..s]` under a frozen model.
pub fn prefix_cache(model: &LanguageModel, text: &TokenBatch, s: usize) -> Result<KVCache> {
    check_split(text, s)?;
    no_grad(|| Ok(model.forward(&text.columns(0, s))?.1))
}

/// Target-model NLL of `text[s..]` given the translated source cache.
pub fn suffix_lm_loss_from_cache(
    path: Path,
    text: &TokenBatch,
    s: usize,
    src_cache: &KVCache,
    models: &[LanguageModel],
    translator: &dyn CacheTranslator,
) -> Result<Tensor> {
    check_split(text, s)?;
    let dst = models
        .get(path.dst)
        .ok_or_else(|| Error::Contract(format!("no model {} in pool", path.dst)))?;
    let translated = translator.translate_cache(path.src, path.dst, src_cache)?;
    dst.lm_loss(text, Some(&translated), s)
}

pub fn suffix_lm_loss(
    path: Path,
    text: &TokenBatch,
    s: usize,
    models: &[LanguageModel],
    translator: &dyn CacheTranslator,
) -> Result<Tensor> {
    let src = models
        .get(path.src)
        .ok_or_else(|| Error::Contract(format!("no model {} in pool", path.src)))?;
    let cache = prefix_cache(src, text, s)?;
    suffix_lm_loss_from_cache(path, text, s, &cache, models, translator)
}

/// Draw `k` distinct paths uniformly from `candidates`.
pub fn sample_from(candidates: &[Path], k: usize, rng: &mut Rng) -> Result<Vec<Path>> {
    if k == 0 || k > candidates.len() {
        return Err(Error::config(
            "paths_per_step",
            format!("{} not in 1..={}", k, candidates.len()),
        ));
    }
    let mut pool = candidates.to_vec();
    for i in 0..k {
        let j = i + rng.below(pool.len() - i);
        pool.swap(i, j);
    }
    pool.truncate(k);
    Ok(pool)
}

pub fn sample_paths(num_models: usize, paths_per_step: usize, rng: &mut Rng) -> Result<Vec<Path>> {
    sample_from(&Path::all(num_models), paths_per_step, rng)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathLoss {
    pub path: Path,
    pub lm: Option<f64>,
    pub recon: Option<f64>,
}

pub struct StepLoss {
    pub total: Tensor,
    pub per_path: Vec<PathLoss>,
}

/// Mean over `paths` of `lm_weight * L_LM + recon_weight * L_recon`, with
/// one prefix cache per model shared by every path. A term whose weight is
/// zero is not evaluated.
pub fn combined_step_loss(
    paths: &[Path],
    text: &TokenBatch,
    s: usize,
    weights: LossWeights,
    models: &[LanguageModel],
    translator: &dyn CacheTranslator,
) -> Result<StepLoss> {
    weights.validate()?;
    if paths.is_empty() {
        return Err(Error::Input("no paths to train on".into()));
    }
    let mut caches: Vec<Option<KVCache>> = vec![None; models.len()];
    let mut needed: Vec<usize> = paths.iter().map(|p| p.src).collect();
    if weights.recon_weight > 0.0 {
        needed.extend(paths.iter().map(|p| p.dst));
    }
    for i in needed {
        let m = models
            .get(i)
            .ok_or_else(|| Error::Contract(format!("no model {i} in pool")))?;
        if caches[i].is_none() {
            caches[i] = Some(prefix_cache(m, text, s)?);
        }
    }
    let mut total: Option<Tensor> = None;
    let mut per_path = Vec::with_capacity(paths.len());
    for &path in paths {
        let src = caches[path.src].as_ref().expect("cache computed above");
        let mut term: Option<Tensor> = None;
        let mut rec = PathLoss {
            path,
            lm: None,
            recon: None,
        };
        if weights.lm_weight > 0.0 {
            let l = suffix_lm_loss_from_cache(path, text, s, src, models, translator)?;
            rec.lm = Some(l.item());
            term = Some(l.scale(weights.lm_weight));
        }
        if weights.recon_weight > 0.0 {
            let dst = caches[path.dst].as_ref().expect("cache computed above");
            let r = recon_loss(path, src, dst, translator)?;
            rec.recon = Some(r.item());
            let r = r.scale(weights.recon_weight);
            term = Some(match term {
                Some(t) => t.add(&r)?,
                None => r,
            });
        }
        let term = term.expect("weights validated");
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
        per_path.push(rec);
    }
    let total = total
        .expect("paths non-empty")
        .scale(1.0 / paths.len() as f64);
    Ok(StepLoss { total, per_path })
}

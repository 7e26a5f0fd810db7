//! Synthetic "languages" and the data pipeline built on them.
//!
//! A language is an order-k Markov chain over a shared vocabulary whose
//! next-token logits are a sum of per-lag tables plus a slowly switching
//! topic bias. The topic is what lets a prefix say something about tokens
//! far beyond the Markov window.

use std::hash::Hasher;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{LanguageModel, TokenBatch};
use crate::rng::Rng;
use crate::tensor::no_grad;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageSpec {
    pub vocab_size: usize,
    pub transition_seed: u64,
    pub order: usize,
    pub temperature: f64,
    pub num_topics: usize,
    /// Per-token probability of drawing a fresh topic.
    pub topic_switch_prob: f64,
}

impl Default for LanguageSpec {
    fn default() -> Self {
        LanguageSpec {
            vocab_size: 64,
            transition_seed: 1,
            order: 2,
            temperature: 1.0,
            num_topics: 8,
            topic_switch_prob: 0.01,
        }
    }
}

const LAG_STD: f64 = 1.5;
const TOPIC_STD: f64 = 1.5;

impl LanguageSpec {
    pub fn with_seed(transition_seed: u64) -> Self {
        LanguageSpec {
            transition_seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 {
            return Err(Error::config("vocab_size", "vocabulary is empty"));
        }
        if self.order == 0 {
            return Err(Error::config("order", "Markov order must be at least 1"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config("temperature", "must be positive"));
        }
        if self.num_topics == 0 {
            return Err(Error::config("num_topics", "need at least one topic"));
        }
        if !(0.0..=1.0).contains(&self.topic_switch_prob) {
            return Err(Error::config("topic_switch_prob", "must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Stable 64-bit digest, used to key corpus cache files.
    pub fn hash(&self) -> u64 {
        let mut h = fnv::FnvHasher::default();
        h.write(serde_json::to_string(self).unwrap_or_default().as_bytes());
        h.finish()
    }
}

/// Materialised logit tables of a [`LanguageSpec`].
pub struct Language {
    spec: LanguageSpec,
    lags: Vec<Vec<f64>>,
    topics: Vec<Vec<f64>>,
}

impl Language {
    pub fn new(spec: &LanguageSpec) -> Result<Self> {
        spec.validate()?;
        let v = spec.vocab_size;
        let mut rng = Rng::seed(spec.transition_seed);
        let lags = (0..spec.order)
            .map(|_| rng.normal_vec(v * v, LAG_STD))
            .collect();
        let topics = (0..spec.num_topics)
            .map(|_| rng.normal_vec(v, TOPIC_STD))
            .collect();
        Ok(Language {
            spec: spec.clone(),
            lags,
            topics,
        })
    }

    pub fn spec(&self) -> &LanguageSpec {
        &self.spec
    }

    /// Next-token probabilities given the most recent tokens (last element
    /// is the newest) and the active topic.
    pub fn next_probs(&self, history: &[usize], topic: usize) -> Vec<f64> {
        let v = self.spec.vocab_size;
        let mut logits = self.topics[topic].clone();
        for (lag, table) in self.lags.iter().enumerate() {
            if let Some(&tok) = history.len().checked_sub(lag + 1).map(|i| &history[i]) {
                let row = &table[tok * v..(tok + 1) * v];
                logits.iter_mut().zip(row).for_each(|(l, r)| *l += r);
            }
        }
        let t = self.spec.temperature;
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut p: Vec<f64> = logits.iter().map(|l| ((l - max) / t).exp()).collect();
        let z: f64 = p.iter().sum();
        p.iter_mut().for_each(|x| *x /= z);
        p
    }

    pub fn sample(&self, num_tokens: usize, seed: u64) -> Vec<usize> {
        let mut rng = Rng::seed(seed);
        let k = self.spec.order;
        let mut out = Vec::with_capacity(num_tokens);
        let mut topic = rng.below(self.spec.num_topics);
        for _ in 0..num_tokens {
            if rng.uniform() < self.spec.topic_switch_prob {
                topic = rng.below(self.spec.num_topics);
            }
            let start = out.len().saturating_sub(k);
            let p = self.next_probs(&out[start..], topic);
            out.push(rng.categorical(&p));
        }
        out
    }
}

pub fn gen_corpus(spec: &LanguageSpec, num_tokens: usize, seed: u64) -> Result<Vec<usize>> {
    if num_tokens == 0 {
        return Err(Error::config("num_tokens", "must be positive"));
    }
    Ok(Language::new(spec)?.sample(num_tokens, seed))
}

const CORPUS_MAGIC: &[u8; 4] = b"KVBC";
const CORPUS_VERSION: u32 = 1;

fn corpus_key(spec: &LanguageSpec, num_tokens: usize, seed: u64) -> u64 {
    let mut h = fnv::FnvHasher::default();
    h.write_u64(spec.hash());
    h.write_u64(num_tokens as u64);
    h.write_u64(seed);
    h.finish()
}

/// Load a cached corpus from `path`, regenerating it when the file is
/// missing, unreadable or was produced from a different spec.
pub fn load_or_gen_corpus(
    path: &Path,
    spec: &LanguageSpec,
    num_tokens: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    let key = corpus_key(spec, num_tokens, seed);
    if let Ok(tokens) = read_corpus(path, spec.vocab_size, key) {
        if tokens.len() == num_tokens {
            return Ok(tokens);
        }
    }
    let tokens = gen_corpus(spec, num_tokens, seed)?;
    let mut buf = Vec::with_capacity(24 + 4 * tokens.len());
    buf.extend_from_slice(CORPUS_MAGIC);
    buf.extend_from_slice(&CORPUS_VERSION.to_le_bytes());
    buf.extend_from_slice(&(spec.vocab_size as u32).to_le_bytes());
    buf.extend_from_slice(&key.to_le_bytes());
    for &t in &tokens {
        buf.extend_from_slice(&(t as u32).to_le_bytes());
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| Error::file(path, e))?;
    Ok(tokens)
}

fn read_corpus(path: &Path, vocab: usize, key: u64) -> Result<Vec<usize>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::file(path, e))?;
    let bad = |reason: &str| Error::Corruption {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if buf.len() < 20 || &buf[..4] != CORPUS_MAGIC || (buf.len() - 20) % 4 != 0 {
        return Err(bad("bad header"));
    }
    let u32_at = |i: usize| u32::from_le_bytes(buf[i..i + 4].try_into().unwrap());
    if u32_at(4) != CORPUS_VERSION || u32_at(8) as usize != vocab {
        return Err(bad("version or vocabulary differs"));
    }
    if u64::from_le_bytes(buf[12..20].try_into().unwrap()) != key {
        return Err(bad("language hash differs"));
    }
    Ok(buf[20..]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect())
}

/// Source text and its rendering in another language.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParallelPair {
    pub src_text: Vec<usize>,
    pub dst_text: Vec<usize>,
}

const REORDER_BLOCK: usize = 3;

/// Bijective symbol map plus block reversal between two languages.
pub struct Cipher {
    forward: Vec<usize>,
    inverse: Vec<usize>,
}

impl Cipher {
    pub fn new(src: &LanguageSpec, dst: &LanguageSpec) -> Result<Self> {
        if src.vocab_size != dst.vocab_size {
            return Err(Error::config(
                "vocab_size",
                "languages must share one vocabulary",
            ));
        }
        let mut rng = Rng::derive(src.transition_seed, dst.transition_seed);
        let mut forward: Vec<usize> = (0..src.vocab_size).collect();
        rng.shuffle(&mut forward);
        let mut inverse = vec![0; forward.len()];
        for (i, &f) in forward.iter().enumerate() {
            inverse[f] = i;
        }
        Ok(Cipher { forward, inverse })
    }

    fn reorder(text: &mut [usize]) {
        for block in text.chunks_exact_mut(REORDER_BLOCK) {
            block.reverse();
        }
    }

    pub fn apply(&self, src: &[usize]) -> Vec<usize> {
        let mut out: Vec<usize> = src.iter().map(|&t| self.forward[t]).collect();
        Cipher::reorder(&mut out);
        out
    }

    pub fn invert(&self, dst: &[usize]) -> Vec<usize> {
        let mut out = dst.to_vec();
        Cipher::reorder(&mut out);
        out.iter().map(|&t| self.inverse[t]).collect()
    }
}

pub fn gen_parallel(
    spec_src: &LanguageSpec,
    spec_dst: &LanguageSpec,
    num_pairs: usize,
    seq_len: usize,
    seed: u64,
) -> Result<Vec<ParallelPair>> {
    if seq_len < 2 {
        return Err(Error::config(
            "seq_len",
            "parallel text needs at least 2 tokens",
        ));
    }
    let cipher = Cipher::new(spec_src, spec_dst)?;
    let lang = Language::new(spec_src)?;
    Ok((0..num_pairs)
        .map(|i| {
            let src_text = lang.sample(seq_len, seed.wrapping_add(i as u64));
            let dst_text = cipher.apply(&src_text);
            ParallelPair { src_text, dst_text }
        })
        .collect())
}

/// `(source prefix, target suffix)` views of parallel pairs split at `s`.
pub fn parallel_views(pairs: &[ParallelPair], s: usize) -> Result<(TokenBatch, TokenBatch)> {
    let src: Vec<Vec<usize>> = pairs.iter().map(|p| p.src_text[..s].to_vec()).collect();
    let dst: Vec<Vec<usize>> = pairs.iter().map(|p| p.dst_text[s..].to_vec()).collect();
    Ok((TokenBatch::from_rows(&src)?, TokenBatch::from_rows(&dst)?))
}

/// Endless shuffled stream of `batch x seq_len` windows cut from a token
/// stream without overlap.
pub struct Batches<'a> {
    stream: &'a [usize],
    batch_size: usize,
    seq_len: usize,
    prefix_len: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
}

pub fn make_batches(
    stream: &[usize],
    batch_size: usize,
    seq_len: usize,
    prefix_len: usize,
    seed: u64,
) -> Result<Batches<'_>> {
    if prefix_len >= seq_len {
        return Err(Error::config(
            "prefix_len",
            format!("{} must be below seq_len {}", prefix_len, seq_len),
        ));
    }
    if batch_size == 0 {
        return Err(Error::config("batch_size", "must be positive"));
    }
    if stream.len() < seq_len {
        return Err(Error::Input(format!(
            "stream of {} tokens is shorter than one window of {}",
            stream.len(),
            seq_len
        )));
    }
    let mut b = Batches {
        stream,
        batch_size,
        seq_len,
        prefix_len,
        seed,
        epoch: 0,
        order: Vec::new(),
        cursor: 0,
    };
    b.reshuffle();
    Ok(b)
}

impl Batches<'_> {
    pub fn num_windows(&self) -> usize {
        self.stream.len() / self.seq_len
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.num_windows()).collect();
        Rng::derive(self.seed, self.epoch).shuffle(&mut self.order);
        self.cursor = 0;
    }

    /// Start offset of the next window.
    fn next_window(&mut self) -> usize {
        if self.cursor == self.order.len() {
            self.epoch += 1;
            self.reshuffle();
        }
        let w = self.order[self.cursor];
        self.cursor += 1;
        w * self.seq_len
    }
}

impl Iterator for Batches<'_> {
    type Item = (TokenBatch, usize);

    fn next(&mut self) -> Option<Self::Item> {
        let mut ids = Vec::with_capacity(self.batch_size * self.seq_len);
        for _ in 0..self.batch_size {
            let start = self.next_window();
            ids.extend_from_slice(&self.stream[start..start + self.seq_len]);
        }
        let batch = TokenBatch {
            ids,
            batch: self.batch_size,
            len: self.seq_len,
        };
        Some((batch, self.prefix_len))
    }
}

/// Every non-overlapping window of a stream, in order, grouped into
/// batches (the last batch may be smaller). For evaluation.
pub fn eval_batches(
    stream: &[usize],
    batch_size: usize,
    seq_len: usize,
    max_windows: usize,
) -> Result<Vec<TokenBatch>> {
    let n = (stream.len() / seq_len).min(max_windows);
    if n == 0 || batch_size == 0 {
        return Err(Error::Input("no complete evaluation window".into()));
    }
    let rows: Vec<Vec<usize>> = (0..n)
        .map(|w| stream[w * seq_len..(w + 1) * seq_len].to_vec())
        .collect();
    rows.chunks(batch_size).map(TokenBatch::from_rows).collect()
}

/// Token placed between a context (or soft prompt) and its completion.
pub const SEPARATOR: usize = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptTask {
    pub task_id: usize,
    pub train_completions: Vec<Vec<usize>>,
    pub eval_completions: Vec<Vec<usize>>,
    /// The generating context. Never shown to a prompt learner; kept for
    /// oracle comparisons.
    pub hidden_context: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptTaskConfig {
    pub num_tasks: usize,
    pub completions_per_task: usize,
    pub completion_len: usize,
    pub eval_holdout: usize,
    pub context_len: usize,
}

impl Default for PromptTaskConfig {
    fn default() -> Self {
        PromptTaskConfig {
            num_tasks: 250,
            completions_per_task: 32,
            completion_len: 24,
            eval_holdout: 8,
            context_len: 16,
        }
    }
}

/// Sample `n` continuations of `context` from `model`, one token at a time.
pub fn sample_completions(
    model: &LanguageModel,
    context: &[usize],
    n: usize,
    len: usize,
    rng: &mut Rng,
) -> Result<Vec<Vec<usize>>> {
    no_grad(|| {
        let vocab = model.config().vocab_size;
        let prompt = TokenBatch::new(context.to_vec(), 1, context.len())?;
        let (logits, cache) = model.forward(&prompt)?;
        let mut cache = cache.repeat_batch(n)?;
        let last = logits.narrow(1, context.len() - 1, 1)?.to_vec();
        let mut rows: Vec<Vec<usize>> = (0..n).map(|_| vec![draw(&last, rng)]).collect();
        for step in 1..len {
            let next: Vec<usize> = rows.iter().map(|r| r[step - 1]).collect();
            let pos = cache.len();
            let (logits, fresh) = model.extend(&cache, &TokenBatch::new(next, n, 1)?, pos)?;
            cache = cache.append(&fresh)?;
            let l = logits.to_vec();
            for (i, row) in rows.iter_mut().enumerate() {
                row.push(draw(&l[i * vocab..(i + 1) * vocab], rng));
            }
        }
        Ok(rows)
    })
}

fn draw(logits: &[f64], rng: &mut Rng) -> usize {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    rng.categorical(&w)
}

/// Prompt-recovery tasks: each hidden context is a span of `source`; its
/// completions are sampled from `generator` after the context and a
/// separator token.
pub fn gen_prompt_tasks(
    generator: &LanguageModel,
    source: &[usize],
    cfg: &PromptTaskConfig,
    seed: u64,
) -> Result<Vec<PromptTask>> {
    if cfg.eval_holdout >= cfg.completions_per_task {
        return Err(Error::config(
            "eval_holdout",
            format!(
                "{} must be below completions_per_task {}",
                cfg.eval_holdout, cfg.completions_per_task
            ),
        ));
    }
    if cfg.context_len == 0 || cfg.completion_len == 0 || source.len() < cfg.context_len {
        return Err(Error::config(
            "context_len",
            "context and completions must be non-empty and fit the source",
        ));
    }
    let mut rng = Rng::seed(seed);
    let mut tasks = Vec::with_capacity(cfg.num_tasks);
    for task_id in 0..cfg.num_tasks {
        let start = rng.below(source.len() - cfg.context_len + 1);
        let hidden_context = source[start..start + cfg.context_len].to_vec();
        let mut prompt = hidden_context.clone();
        prompt.push(SEPARATOR);
        let mut seen = std::collections::HashSet::new();
        let mut uniq = Vec::with_capacity(cfg.completions_per_task);
        for _ in 0..8 {
            let need = cfg.completions_per_task - uniq.len();
            for c in sample_completions(generator, &prompt, need, cfg.completion_len, &mut rng)? {
                if seen.insert(c.clone()) {
                    uniq.push(c);
                }
            }
            if uniq.len() == cfg.completions_per_task {
                break;
            }
        }
        if uniq.len() < cfg.completions_per_task {
            return Err(Error::Input(format!(
                "task {} could not draw enough distinct completions",
                task_id
            )));
        }
        let eval_completions = uniq.split_off(cfg.completions_per_task - cfg.eval_holdout);
        tasks.push(PromptTask {
            task_id,
            train_completions: uniq,
            eval_completions,
            hidden_context,
        });
    }
    Ok(tasks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::ModelConfig;

    fn unigram(stream: &[usize], v: usize) -> Vec<f64> {
        let mut c = vec![0.0; v];
        stream.iter().for_each(|&t| c[t] += 1.0);
        c.iter().map(|x| x / stream.len() as f64).collect()
    }

    #[test]
    fn generation_is_deterministic_and_in_vocab() {
        let spec = LanguageSpec::default();
        let a = gen_corpus(&spec, 2000, 3).unwrap();
        assert_eq!(a, gen_corpus(&spec, 2000, 3).unwrap());
        assert_ne!(a, gen_corpus(&spec, 2000, 4).unwrap());
        assert!(a.iter().all(|&t| t < 64));
    }

    #[test]
    fn empty_vocab_is_rejected() {
        let spec = LanguageSpec {
            vocab_size: 0,
            ..Default::default()
        };
        assert!(matches!(
            gen_corpus(&spec, 10, 0),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn languages_differ_in_unigram_statistics() {
        let a = unigram(
            &gen_corpus(&LanguageSpec::with_seed(1), 100_000, 0).unwrap(),
            64,
        );
        let b = unigram(
            &gen_corpus(&LanguageSpec::with_seed(2), 100_000, 0).unwrap(),
            64,
        );
        let kl: f64 = a
            .iter()
            .zip(&b)
            .filter(|(p, _)| **p > 0.0)
            .map(|(p, q)| p * (p / q.max(1e-12)).ln())
            .sum();
        assert!(kl > 0.01, "KL {kl}");
    }

    #[test]
    fn hot_limit_is_uniform() {
        let spec = LanguageSpec {
            temperature: 1e6,
            ..Default::default()
        };
        let n = 100_000;
        let p = unigram(&gen_corpus(&spec, n, 5).unwrap(), 64);
        let expected = n as f64 / 64.0;
        let chi2: f64 = p
            .iter()
            .map(|q| (q * n as f64 - expected).powi(2) / expected)
            .sum();
        // 63 degrees of freedom, 0.999 quantile
        assert!(chi2 < 103.4, "chi2 {chi2}");
    }

    #[test]
    fn cipher_round_trips() {
        let pairs = gen_parallel(
            &LanguageSpec::with_seed(1),
            &LanguageSpec::with_seed(2),
            10,
            64,
            0,
        )
        .unwrap();
        let cipher = Cipher::new(&LanguageSpec::with_seed(1), &LanguageSpec::with_seed(2)).unwrap();
        assert_eq!(pairs.len(), 10);
        for p in &pairs {
            assert_eq!(p.src_text.len(), 64);
            assert_eq!(p.dst_text.len(), 64);
            assert_eq!(cipher.invert(&p.dst_text), p.src_text);
        }
        let (src, dst) = parallel_views(&pairs, 16).unwrap();
        assert_eq!((src.batch, src.len, dst.len), (10, 16, 48));
        assert!(matches!(
            gen_parallel(&LanguageSpec::default(), &LanguageSpec::default(), 1, 1, 0),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn windows_partition_each_epoch() {
        let stream: Vec<usize> = (0..1003).collect();
        let mut it = make_batches(&stream, 5, 10, 4, 9).unwrap();
        assert_eq!(it.num_windows(), 100);
        let mut first_epoch = Vec::new();
        for _ in 0..20 {
            let (b, s) = it.next().unwrap();
            assert_eq!(s, 4);
            first_epoch.extend(b.ids);
        }
        let mut sorted = first_epoch.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..1000).collect::<Vec<_>>());

        let mut second_epoch = Vec::new();
        for _ in 0..20 {
            second_epoch.extend(it.next().unwrap().0.ids);
        }
        assert_ne!(first_epoch, second_epoch);
        let mut again = make_batches(&stream, 5, 10, 4, 9).unwrap();
        let replay: Vec<usize> = (0..40).flat_map(|_| again.next().unwrap().0.ids).collect();
        assert_eq!(replay[..1000], first_epoch[..]);
        assert_eq!(replay[1000..], second_epoch[..]);
    }

    #[test]
    fn batch_errors() {
        let stream = vec![1; 8];
        assert!(matches!(
            make_batches(&stream, 2, 10, 4, 0),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            make_batches(&stream, 2, 4, 4, 0),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn corpus_cache_regenerates_on_spec_change() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let spec = LanguageSpec::default();
        let a = load_or_gen_corpus(&path, &spec, 500, 1).unwrap();
        assert_eq!(a, gen_corpus(&spec, 500, 1).unwrap());
        assert_eq!(load_or_gen_corpus(&path, &spec, 500, 1).unwrap(), a);
        let other = LanguageSpec::with_seed(7);
        let b = load_or_gen_corpus(&path, &other, 500, 1).unwrap();
        assert_eq!(b, gen_corpus(&other, 500, 1).unwrap());
    }

    #[test]
    fn prompt_tasks_split_and_repeat() {
        let model = LanguageModel::init(ModelConfig::toy(1), 0).unwrap();
        let source = gen_corpus(&LanguageSpec::default(), 500, 0).unwrap();
        let cfg = PromptTaskConfig {
            num_tasks: 3,
            completions_per_task: 6,
            completion_len: 5,
            eval_holdout: 2,
            context_len: 4,
        };
        let tasks = gen_prompt_tasks(&model, &source, &cfg, 11).unwrap();
        assert_eq!(tasks, gen_prompt_tasks(&model, &source, &cfg, 11).unwrap());
        for t in &tasks {
            assert_eq!(t.train_completions.len(), 4);
            assert_eq!(t.eval_completions.len(), 2);
            assert!(t
                .eval_completions
                .iter()
                .all(|c| !t.train_completions.contains(c)));
            assert!(t.train_completions.iter().all(|c| c.len() == 5));
        }
        let bad = PromptTaskConfig {
            eval_holdout: 6,
            ..cfg
        };
        assert!(matches!(
            gen_prompt_tasks(&model, &source, &bad, 0),
            Err(Error::Config { .. })
        ));
    }
}

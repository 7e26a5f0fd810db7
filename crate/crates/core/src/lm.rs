//! Toy decoder-only language model: grouped-query attention with rotary
//! positions, GeGLU feed-forward, RMS pre- and post-norm around every
//! sublayer, tied input/output embeddings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Tensor, TensorData};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub num_kv_heads: usize,
    pub head_dim: usize,
    pub ff_dim: usize,
    pub max_seq_len: usize,
    pub rope_base: f64,
}

impl ModelConfig {
    /// Desk-scale default with the given depth: vocab 64, width 32, four
    /// query heads sharing one k-v head of width 8.
    pub fn toy(num_layers: usize) -> Self {
        ModelConfig {
            vocab_size: 64,
            d_model: 32,
            num_layers,
            num_heads: 4,
            num_kv_heads: 1,
            head_dim: 8,
            ff_dim: 128,
            max_seq_len: 128,
            rope_base: 10_000.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("num_kv_heads", self.num_kv_heads),
            ("head_dim", self.head_dim),
            ("ff_dim", self.ff_dim),
            ("max_seq_len", self.max_seq_len),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.num_heads % self.num_kv_heads != 0 {
            return Err(Error::config(
                "num_kv_heads",
                format!(
                    "{} does not divide num_heads {}",
                    self.num_kv_heads, self.num_heads
                ),
            ));
        }
        if self.head_dim % 2 != 0 {
            return Err(Error::config(
                "head_dim",
                "rotary embedding needs an even head_dim",
            ));
        }
        if !(self.rope_base > 1.0) {
            return Err(Error::config("rope_base", "must exceed 1"));
        }
        Ok(())
    }

    /// Per-layer width of one cache block (keys or values).
    pub fn cache_width(&self) -> usize {
        self.num_kv_heads * self.head_dim
    }

    pub fn param_count(&self) -> usize {
        let (d, f) = (self.d_model, self.ff_dim);
        let q = self.num_heads * self.head_dim;
        let kv = self.cache_width();
        let per_layer = 4 * d + 2 * d * q + 2 * d * kv + 3 * d * f;
        self.vocab_size * d + self.num_layers * per_layer + d
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::toy(2)
    }
}

/// Row-major `batch x len` token ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub batch: usize,
    pub len: usize,
}

impl TokenBatch {
    pub fn new(ids: Vec<usize>, batch: usize, len: usize) -> Result<Self> {
        if ids.len() != batch * len {
            return Err(Error::dim(
                "TokenBatch",
                format!("{} ids for {}x{}", ids.len(), batch, len),
            ));
        }
        Ok(TokenBatch { ids, batch, len })
    }

    pub fn from_rows(rows: &[Vec<usize>]) -> Result<Self> {
        let len = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != len) {
            return Err(Error::dim("TokenBatch", "ragged rows"));
        }
        TokenBatch::new(rows.concat(), rows.len(), len)
    }

    /// Columns `start..end` of every row.
    pub fn columns(&self, start: usize, end: usize) -> TokenBatch {
        assert!(start <= end && end <= self.len);
        let ids = self
            .ids
            .chunks(self.len.max(1))
            .take(self.batch)
            .flat_map(|r| r[start..end].iter().copied())
            .collect();
        TokenBatch {
            ids,
            batch: self.batch,
            len: end - start,
        }
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.ids[i * self.len..(i + 1) * self.len]
    }
}

/// Keys and values for `S` positions, each `B x S x L x D`. Keys are stored
/// after the rotary embedding, so absolute positions are baked in.
#[derive(Clone, Debug)]
pub struct KVCache {
    pub keys: Tensor,
    pub values: Tensor,
    pub positions: Vec<usize>,
}

impl KVCache {
    pub fn new(keys: Tensor, values: Tensor, positions: Vec<usize>) -> Result<Self> {
        if keys.shape() != values.shape() || keys.rank() != 4 || keys.shape()[1] != positions.len()
        {
            return Err(Error::dim(
                "KVCache",
                format!(
                    "keys {:?}, values {:?}, {} positions",
                    keys.shape(),
                    values.shape(),
                    positions.len()
                ),
            ));
        }
        Ok(KVCache {
            keys,
            values,
            positions,
        })
    }

    pub fn batch(&self) -> usize {
        self.keys.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.keys.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_layers(&self) -> usize {
        self.keys.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.keys.shape()[3]
    }

    /// Constant copy cut off from any graph.
    pub fn detach(&self) -> KVCache {
        KVCache {
            keys: self.keys.detach(),
            values: self.values.detach(),
            positions: self.positions.clone(),
        }
    }

    /// Append `next` along the sequence axis.
    pub fn append(&self, next: &KVCache) -> Result<KVCache> {
        let mut positions = self.positions.clone();
        positions.extend_from_slice(&next.positions);
        KVCache::new(
            Tensor::concat(&[self.keys.clone(), next.keys.clone()], 1)?,
            Tensor::concat(&[self.values.clone(), next.values.clone()], 1)?,
            positions,
        )
    }

    /// Repeat a batch-1 cache `n` times along the batch axis.
    pub fn repeat_batch(&self, n: usize) -> Result<KVCache> {
        if self.batch() != 1 {
            return Err(Error::Contract(format!(
                "repeat_batch on batch {}",
                self.batch()
            )));
        }
        KVCache::new(
            Tensor::concat(&vec![self.keys.clone(); n], 0)?,
            Tensor::concat(&vec![self.values.clone(); n], 0)?,
            self.positions.clone(),
        )
    }
}

struct Layer {
    pre_attn_norm: Tensor,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    post_attn_norm: Tensor,
    pre_ff_norm: Tensor,
    w_gate: Tensor,
    w_up: Tensor,
    w_down: Tensor,
    post_ff_norm: Tensor,
}

pub struct LanguageModel {
    config: ModelConfig,
    embed: Tensor,
    layers: Vec<Layer>,
    final_norm: Tensor,
    frozen: bool,
}

const LINEAR_STD: f64 = 0.02;

impl LanguageModel {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::seed(seed);
        let (d, f) = (config.d_model, config.ff_dim);
        let q = config.num_heads * config.head_dim;
        let kv = config.cache_width();
        let embed = Tensor::randn(&[config.vocab_size, d], 1.0 / (d as f64).sqrt(), &mut rng);
        let mut lin = |r: usize, c: usize| Tensor::randn(&[r, c], LINEAR_STD, &mut rng);
        let ones = || Tensor::full(&[d], 1.0);
        let layers = (0..config.num_layers)
            .map(|_| Layer {
                pre_attn_norm: ones(),
                wq: lin(d, q),
                wk: lin(d, kv),
                wv: lin(d, kv),
                wo: lin(q, d),
                post_attn_norm: ones(),
                pre_ff_norm: ones(),
                w_gate: lin(d, f),
                w_up: lin(d, f),
                w_down: lin(f, d),
                post_ff_norm: ones(),
            })
            .collect();
        // Tied unembedding would otherwise start with logit std ~1 and a
        // strong bias towards repeating the current token.
        let final_norm = Tensor::full(&[d], 1.0 / (d as f64).sqrt());
        let model = LanguageModel {
            config,
            embed,
            layers,
            final_norm,
            frozen: false,
        };
        model.set_trainable(true);
        Ok(model)
    }

    /// Rebuild from named tensors as produced by [`LanguageModel::named_params`].
    pub fn from_named(config: ModelConfig, named: &[(String, TensorData)]) -> Result<Self> {
        let model = LanguageModel::init(config, 0)?;
        let lookup: std::collections::HashMap<&str, &TensorData> =
            named.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for (name, param) in model.named_params() {
            let src = lookup
                .get(name.as_str())
                .ok_or_else(|| Error::Input(format!("missing parameter `{}`", name)))?;
            if src.shape != param.shape() {
                return Err(Error::dim(
                    "from_named",
                    format!(
                        "`{}` is {:?}, expected {:?}",
                        name,
                        src.shape,
                        param.shape()
                    ),
                ));
            }
            param.set_data(&src.data);
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![("embed".to_string(), self.embed.clone())];
        for (i, l) in self.layers.iter().enumerate() {
            let p = |n: &str, t: &Tensor| (format!("layers.{}.{}", i, n), t.clone());
            out.extend([
                p("pre_attn_norm", &l.pre_attn_norm),
                p("wq", &l.wq),
                p("wk", &l.wk),
                p("wv", &l.wv),
                p("wo", &l.wo),
                p("post_attn_norm", &l.post_attn_norm),
                p("pre_ff_norm", &l.pre_ff_norm),
                p("w_gate", &l.w_gate),
                p("w_up", &l.w_up),
                p("w_down", &l.w_down),
                p("post_ff_norm", &l.post_ff_norm),
            ]);
        }
        out.push(("final_norm".to_string(), self.final_norm.clone()));
        out
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    fn set_trainable(&self, on: bool) {
        for p in self.params() {
            p.set_requires_grad(on);
            if !on {
                p.zero_grad();
            }
        }
    }

    /// Stop tracking gradients for every parameter.
    pub fn freeze(&mut self) {
        self.frozen = true;
        self.set_trainable(false);
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
        self.set_trainable(true);
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Scaled input embeddings, `B x S x d_model`.
    pub fn embed_tokens(&self, tokens: &TokenBatch) -> Result<Tensor> {
        let e = Tensor::embedding(&self.embed, &tokens.ids, &[tokens.batch, tokens.len])?;
        Ok(e.scale((self.config.d_model as f64).sqrt()))
    }

    pub fn forward(&self, tokens: &TokenBatch) -> Result<(Tensor, KVCache)> {
        self.check_tokens(tokens, 0)?;
        let x = self.embed_tokens(tokens)?;
        self.run(&x, None, 0)
    }

    /// Forward pass over input embeddings placed at positions
    /// `start_pos..start_pos + S`, with no prefix.
    pub fn forward_embeddings(&self, x: &Tensor, start_pos: usize) -> Result<(Tensor, KVCache)> {
        self.run(x, None, start_pos)
    }

    /// Logits for `suffix` given a prefix cache covering positions
    /// `0..start_pos`.
    pub fn forward_with_prefix_cache(
        &self,
        cache: &KVCache,
        suffix: &TokenBatch,
        start_pos: usize,
    ) -> Result<Tensor> {
        Ok(self.extend(cache, suffix, start_pos)?.0)
    }

    /// Like [`Self::forward_with_prefix_cache`] but also returns the cache of
    /// the suffix tokens.
    pub fn extend(
        &self,
        cache: &KVCache,
        suffix: &TokenBatch,
        start_pos: usize,
    ) -> Result<(Tensor, KVCache)> {
        if start_pos != cache.len() {
            return Err(Error::Contract(format!(
                "start_pos {} does not match prefix cache length {}",
                start_pos,
                cache.len()
            )));
        }
        self.check_tokens(suffix, start_pos)?;
        let x = self.embed_tokens(suffix)?;
        self.run(&x, Some(cache), start_pos)
    }

    fn check_tokens(&self, tokens: &TokenBatch, start_pos: usize) -> Result<()> {
        if start_pos + tokens.len > self.config.max_seq_len {
            return Err(Error::Input(format!(
                "sequence end {} exceeds max_seq_len {}",
                start_pos + tokens.len,
                self.config.max_seq_len
            )));
        }
        if let Some(t) = tokens.ids.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Input(format!(
                "token {} outside vocabulary of {}",
                t, self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn run(
        &self,
        x: &Tensor,
        prefix: Option<&KVCache>,
        start_pos: usize,
    ) -> Result<(Tensor, KVCache)> {
        let c = &self.config;
        if x.rank() != 3 || x.shape()[2] != c.d_model {
            return Err(Error::dim(
                "forward",
                format!("input {:?}, d_model {}", x.shape(), c.d_model),
            ));
        }
        let (b, t) = (x.shape()[0], x.shape()[1]);
        let prefix_len = prefix.map_or(0, |p| p.len());
        if let Some(p) = prefix {
            let want = [b, prefix_len, c.num_layers, c.cache_width()];
            if p.keys.shape() != want {
                return Err(Error::dim(
                    "forward",
                    format!(
                        "prefix cache {:?}, model expects {:?}",
                        p.keys.shape(),
                        want
                    ),
                ));
            }
        }
        let positions: Vec<usize> = (start_pos..start_pos + t).collect();
        if t == 0 {
            let logits = Tensor::zeros(&[b, 0, c.vocab_size]);
            let empty = Tensor::zeros(&[b, 0, c.num_layers, c.cache_width()]);
            return Ok((logits, KVCache::new(empty.clone(), empty, positions)?));
        }
        let (kvh, hd) = (c.num_kv_heads, c.head_dim);
        let groups = c.num_heads / kvh;
        let total = prefix_len + t;
        let mask = causal_mask(groups, t, prefix_len);
        let attn_scale = 1.0 / (hd as f64).sqrt();

        let mut h = x.clone();
        let mut new_keys = Vec::with_capacity(c.num_layers);
        let mut new_values = Vec::with_capacity(c.num_layers);
        for (li, layer) in self.layers.iter().enumerate() {
            let a_in = h.rms_norm(&layer.pre_attn_norm)?;
            let q = a_in
                .matmul(&layer.wq)?
                .reshape(&[b, t, c.num_heads, hd])?
                .rope(&positions, c.rope_base)?
                .reshape(&[b, t, kvh, groups, hd])?
                .permute(&[0, 2, 3, 1, 4])?
                .reshape(&[b, kvh, groups * t, hd])?;
            let k = a_in
                .matmul(&layer.wk)?
                .reshape(&[b, t, kvh, hd])?
                .rope(&positions, c.rope_base)?;
            let v = a_in.matmul(&layer.wv)?.reshape(&[b, t, kvh, hd])?;
            new_keys.push(k.reshape(&[b, t, 1, kvh * hd])?);
            new_values.push(v.reshape(&[b, t, 1, kvh * hd])?);

            let (k_all, v_all) = match prefix {
                Some(p) => {
                    let pk = p
                        .keys
                        .narrow(2, li, 1)?
                        .reshape(&[b, prefix_len, kvh, hd])?;
                    let pv = p
                        .values
                        .narrow(2, li, 1)?
                        .reshape(&[b, prefix_len, kvh, hd])?;
                    (Tensor::concat(&[pk, k], 1)?, Tensor::concat(&[pv, v], 1)?)
                }
                None => (k, v),
            };
            let k_t = k_all.permute(&[0, 2, 3, 1])?; // b, kvh, hd, total
            let v_all = v_all.permute(&[0, 2, 1, 3])?; // b, kvh, total, hd
            let probs = q.matmul(&k_t)?.scale(attn_scale).add(&mask)?.softmax_last();
            let attn = probs
                .matmul(&v_all)?
                .reshape(&[b, kvh, groups, t, hd])?
                .permute(&[0, 3, 1, 2, 4])?
                .reshape(&[b, t, c.num_heads * hd])?
                .matmul(&layer.wo)?;
            h = h.add(&attn.rms_norm(&layer.post_attn_norm)?)?;

            let f_in = h.rms_norm(&layer.pre_ff_norm)?;
            let gate = f_in.matmul(&layer.w_gate)?.gelu();
            let ff = gate
                .mul(&f_in.matmul(&layer.w_up)?)?
                .matmul(&layer.w_down)?;
            h = h.add(&ff.rms_norm(&layer.post_ff_norm)?)?;
        }
        debug_assert_eq!(mask.shape(), &[groups * t, total]);
        let logits = h
            .rms_norm(&self.final_norm)?
            .matmul(&self.embed.permute(&[1, 0])?)?;
        let cache = KVCache::new(
            Tensor::concat(&new_keys, 2)?,
            Tensor::concat(&new_values, 2)?,
            positions,
        )?;
        Ok((logits, cache))
    }

    /// Mean next-token NLL over the suffix: predictions made at positions
    /// `s..len-1` for targets `s+1..len`. With `prefix_cache`, the cache
    /// stands in for `tokens[..s]`.
    pub fn lm_loss(
        &self,
        tokens: &TokenBatch,
        prefix_cache: Option<&KVCache>,
        s: usize,
    ) -> Result<Tensor> {
        if tokens.len <= s + 1 {
            return Err(Error::Input(format!(
                "sequence length {} leaves no suffix targets after split {}",
                tokens.len, s
            )));
        }
        let (logits, first) = match prefix_cache {
            Some(cache) => {
                if cache.len() != s {
                    return Err(Error::Contract(format!(
                        "prefix cache covers {} positions, split is {}",
                        cache.len(),
                        s
                    )));
                }
                let suffix = tokens.columns(s, tokens.len);
                (self.forward_with_prefix_cache(cache, &suffix, s)?, 0)
            }
            None => (self.forward(tokens)?.0, s),
        };
        let width = logits.shape()[1];
        let mut targets = vec![0; tokens.batch * width];
        let mut mask = vec![false; tokens.batch * width];
        for bi in 0..tokens.batch {
            let row = tokens.row(bi);
            for p in first..width - 1 {
                let abs = p - first + s;
                targets[bi * width + p] = row[abs + 1];
                mask[bi * width + p] = true;
            }
        }
        logits.softmax_cross_entropy(&targets, &mask)
    }

    /// Mean next-token NLL over every position (pretraining objective).
    pub fn full_loss(&self, tokens: &TokenBatch) -> Result<Tensor> {
        self.lm_loss(tokens, None, 0)
    }

    /// Snapshot of every parameter as plain data.
    pub fn to_named_data(&self) -> Vec<(String, TensorData)> {
        self.named_params()
            .into_iter()
            .map(|(n, t)| (n, t.to_data()))
            .collect()
    }
}

/// Additive mask for `groups * t` query rows (group-major) against
/// `prefix + t` keys; suffix row `i` sees the whole prefix and keys up to
/// itself.
fn causal_mask(groups: usize, t: usize, prefix: usize) -> Tensor {
    let total = prefix + t;
    let mut m = vec![0.0; groups * t * total];
    for g in 0..groups {
        for i in 0..t {
            let row = &mut m[(g * t + i) * total..(g * t + i + 1) * total];
            for v in row.iter_mut().skip(prefix + i + 1) {
                *v = f64::NEG_INFINITY;
            }
        }
    }
    Tensor::from_vec(m, &[groups * t, total]).expect("mask shape")
}

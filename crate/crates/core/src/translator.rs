//! Per-model adapter pairs into and out of a shared cache space, plus the
//! identity and linear baselines.
//!
//! An adapter maps one cache block (keys or values) through
//! input transform -> L cross-attention layers -> output transform. Keys and
//! values have their own input and output transforms but share the
//! cross-attention stack; both are pushed through it in one batch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{KVCache, ModelConfig};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranslatorConfig {
    /// Width `Q` of the shared space.
    pub shared_dim: usize,
    /// `D' / D` for the adapter's working width.
    pub embed_dim_factor: f64,
    /// Feed-forward width as a multiple of `D'`.
    pub translation_dim_factor: f64,
    pub xattn_num_heads: usize,
    pub xattn_head_dim: usize,
}

impl Default for TranslatorConfig {
    fn default() -> Self {
        TranslatorConfig {
            shared_dim: 32,
            embed_dim_factor: 2.0,
            translation_dim_factor: 1.0,
            xattn_num_heads: 4,
            xattn_head_dim: 8,
        }
    }
}

impl TranslatorConfig {
    /// Check the config against a model with `num_layers` layers.
    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if self.shared_dim == 0 {
            return Err(Error::config("shared_dim", "must be positive"));
        }
        if num_layers == 0 || self.shared_dim % num_layers != 0 {
            return Err(Error::config(
                "shared_dim",
                format!(
                    "shared width {} must be divisible by the layer count {} of every pool member",
                    self.shared_dim, num_layers
                ),
            ));
        }
        if !(self.embed_dim_factor > 0.0) {
            return Err(Error::config("embed_dim_factor", "must be positive"));
        }
        if !(self.translation_dim_factor > 0.0) {
            return Err(Error::config("translation_dim_factor", "must be positive"));
        }
        if self.xattn_num_heads == 0 || self.xattn_head_dim == 0 {
            return Err(Error::config(
                "xattn_num_heads",
                "heads and head width must be positive",
            ));
        }
        Ok(())
    }

    /// `D'` for an input of width `d`.
    pub fn embed_dim(&self, d: usize) -> usize {
        ((self.embed_dim_factor * d as f64).round() as usize).max(1)
    }

    pub fn ff_dim(&self, embed_dim: usize) -> usize {
        ((self.translation_dim_factor * embed_dim as f64).round() as usize).max(1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    IntoShared,
    OutOfShared,
}

struct Linear {
    w: Tensor,
    b: Tensor,
}

impl Linear {
    fn init(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Self {
        Linear {
            w: Tensor::randn(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng),
            b: Tensor::zeros(&[fan_out]),
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.w)?.add(&self.b)
    }
}

/// Layer norm, linear, GELU.
struct Projection {
    gain: Tensor,
    bias: Tensor,
    lin: Linear,
}

impl Projection {
    fn init(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Self {
        Projection {
            gain: Tensor::full(&[fan_in], 1.0),
            bias: Tensor::zeros(&[fan_in]),
            lin: Linear::init(rng, fan_in, fan_out),
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self
            .lin
            .forward(&x.layer_norm(&self.gain, &self.bias)?)?
            .gelu())
    }

    fn named(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.ln_gain"), self.gain.clone()));
        out.push((format!("{prefix}.ln_bias"), self.bias.clone()));
        out.push((format!("{prefix}.w"), self.lin.w.clone()));
        out.push((format!("{prefix}.b"), self.lin.b.clone()));
    }
}

struct XAttnLayer {
    query_norm: Tensor,
    source_norm: Tensor,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    ff_norm: Tensor,
    w_gate: Tensor,
    w_up: Tensor,
    w_down: Tensor,
}

impl XAttnLayer {
    fn init(rng: &mut Rng, width: usize, heads: usize, head_dim: usize, ff: usize) -> Self {
        let inner = heads * head_dim;
        let mut lin = |r: usize, c: usize| Tensor::randn(&[r, c], 1.0 / (r as f64).sqrt(), rng);
        XAttnLayer {
            query_norm: Tensor::full(&[width], 1.0),
            source_norm: Tensor::full(&[width], 1.0),
            wq: lin(width, inner),
            wk: lin(width, inner),
            wv: lin(width, inner),
            wo: lin(inner, width),
            ff_norm: Tensor::full(&[width], 1.0),
            w_gate: lin(width, ff),
            w_up: lin(width, ff),
            w_down: lin(ff, width),
        }
    }

    /// `h` and `src` are `N x S x width`; attention runs over the sequence
    /// axis without a causal mask.
    fn forward(&self, h: &Tensor, src: &Tensor, heads: usize, head_dim: usize) -> Result<Tensor> {
        let (n, s) = (h.shape()[0], h.shape()[1]);
        let q_in = h.rms_norm(&self.query_norm)?;
        let kv_in = src.rms_norm(&self.source_norm)?;
        let q = q_in
            .matmul(&self.wq)?
            .reshape(&[n, s, heads, head_dim])?
            .permute(&[0, 2, 1, 3])?;
        let k = kv_in
            .matmul(&self.wk)?
            .reshape(&[n, s, heads, head_dim])?
            .permute(&[0, 2, 3, 1])?;
        let v = kv_in
            .matmul(&self.wv)?
            .reshape(&[n, s, heads, head_dim])?
            .permute(&[0, 2, 1, 3])?;
        let probs = q
            .matmul(&k)?
            .scale(1.0 / (head_dim as f64).sqrt())
            .softmax_last();
        let attn = probs
            .matmul(&v)?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[n, s, heads * head_dim])?
            .matmul(&self.wo)?;
        let h = h.add(&attn)?;
        let f_in = h.rms_norm(&self.ff_norm)?;
        let ff = f_in
            .matmul(&self.w_gate)?
            .gelu()
            .mul(&f_in.matmul(&self.w_up)?)?
            .matmul(&self.w_down)?;
        h.add(&ff)
    }

    fn named(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (n, t) in [
            ("query_norm", &self.query_norm),
            ("source_norm", &self.source_norm),
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("ff_norm", &self.ff_norm),
            ("w_gate", &self.w_gate),
            ("w_up", &self.w_up),
            ("w_down", &self.w_down),
        ] {
            out.push((format!("{prefix}.{n}"), t.clone()));
        }
    }
}

/// Output transform. The out-direction adds a final linear readout so the
/// reconstructed cache is not confined to the GELU range.
struct OutputTransform {
    proj: Projection,
    readout: Option<Linear>,
}

impl OutputTransform {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.proj.forward(x)?;
        match &self.readout {
            Some(r) => r.forward(&y),
            None => Ok(y),
        }
    }

    fn named(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.proj.named(prefix, out);
        if let Some(r) = &self.readout {
            out.push((format!("{prefix}.readout_w"), r.w.clone()));
            out.push((format!("{prefix}.readout_b"), r.b.clone()));
        }
    }
}

/// One direction of a model's adapter pair.
pub struct Adapter {
    direction: Direction,
    num_layers: usize,
    block_width: usize,
    shared_dim: usize,
    slice_width: usize,
    embed_dim: usize,
    heads: usize,
    head_dim: usize,
    key_in: Projection,
    value_in: Projection,
    xattn: Vec<XAttnLayer>,
    key_out: OutputTransform,
    value_out: OutputTransform,
}

impl Adapter {
    pub fn init(
        direction: Direction,
        model: &ModelConfig,
        tconfig: &TranslatorConfig,
        rng: &mut Rng,
    ) -> Result<Adapter> {
        tconfig.validate(model.num_layers)?;
        let l = model.num_layers;
        let d = model.cache_width();
        let q = tconfig.shared_dim;
        let slice_width = match direction {
            Direction::IntoShared => d,
            Direction::OutOfShared => q / l,
        };
        let embed_dim = tconfig.embed_dim(slice_width);
        let ff = tconfig.ff_dim(embed_dim);
        let (heads, head_dim) = (tconfig.xattn_num_heads, tconfig.xattn_head_dim);
        let out_width = match direction {
            Direction::IntoShared => q,
            Direction::OutOfShared => l * d,
        };
        let key_in = Projection::init(rng, slice_width, embed_dim);
        let value_in = Projection::init(rng, slice_width, embed_dim);
        let xattn = (0..l)
            .map(|_| XAttnLayer::init(rng, embed_dim, heads, head_dim, ff))
            .collect();
        let output = |rng: &mut Rng| OutputTransform {
            proj: Projection::init(rng, l * embed_dim, out_width),
            readout: match direction {
                Direction::IntoShared => None,
                Direction::OutOfShared => Some(Linear::init(rng, out_width, out_width)),
            },
        };
        let key_out = output(rng);
        let value_out = output(rng);
        Ok(Adapter {
            direction,
            num_layers: l,
            block_width: d,
            shared_dim: q,
            slice_width,
            embed_dim,
            heads,
            head_dim,
            key_in,
            value_in,
            xattn,
            key_out,
            value_out,
        })
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    /// `D'` of this adapter.
    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn num_layers(&self) -> usize {
        self.xattn.len()
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.key_in.named("key_in", &mut out);
        self.value_in.named("value_in", &mut out);
        for (i, layer) in self.xattn.iter().enumerate() {
            layer.named(&format!("xattn.{i}"), &mut out);
        }
        self.key_out.named("key_out", &mut out);
        self.value_out.named("value_out", &mut out);
        out
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(Tensor::numel).sum()
    }

    fn input_shape(&self, b: usize, s: usize) -> Vec<usize> {
        match self.direction {
            Direction::IntoShared => vec![b, s, self.num_layers, self.block_width],
            Direction::OutOfShared => vec![b, s, self.shared_dim],
        }
    }

    /// Transform a key block and a value block. Into-direction inputs are
    /// `B x S x L x D` and outputs `B x S x Q`; the out-direction is the
    /// reverse.
    pub fn adapt(&self, keys: &Tensor, values: &Tensor) -> Result<(Tensor, Tensor)> {
        if keys.rank() < 2 || keys.shape() != values.shape() {
            return Err(Error::dim(
                "adapter input",
                format!("keys {:?}, values {:?}", keys.shape(), values.shape()),
            ));
        }
        let (b, s) = (keys.shape()[0], keys.shape()[1]);
        let want = self.input_shape(b, s);
        if keys.shape() != want.as_slice() {
            return Err(Error::dim(
                "adapter input",
                format!("block {:?}, adapter expects {:?}", keys.shape(), want),
            ));
        }
        let (l, e) = (self.num_layers, self.embed_dim);
        let sliced = [b, s, l, self.slice_width];
        let xk = self.key_in.forward(&keys.reshape(&sliced)?)?;
        let xv = self.value_in.forward(&values.reshape(&sliced)?)?;
        let x = Tensor::concat(&[xk, xv], 0)?;

        let n = 2 * b;
        let slice = |i: usize| x.narrow(2, i, 1)?.reshape(&[n, s, e]);
        let mut h = slice(0)?;
        let mut outs = Vec::with_capacity(l);
        for (i, layer) in self.xattn.iter().enumerate() {
            h = layer.forward(&h, &slice(i)?, self.heads, self.head_dim)?;
            outs.push(h.clone());
        }
        let joined = Tensor::concat_last(&outs)?;
        let yk = self.key_out.forward(&joined.narrow(0, 0, b)?)?;
        let yv = self.value_out.forward(&joined.narrow(0, b, b)?)?;
        match self.direction {
            Direction::IntoShared => Ok((yk, yv)),
            Direction::OutOfShared => {
                let shape = [b, s, l, self.block_width];
                Ok((yk.reshape(&shape)?, yv.reshape(&shape)?))
            }
        }
    }
}

/// A cache block in the shared space; keys and values each get their own
/// `B x S x Q` tensor.
#[derive(Clone, Debug)]
pub struct SharedLatentBlock {
    pub k_star: Tensor,
    pub v_star: Tensor,
}

/// The two adapters owned by one pool member.
pub struct AdapterPair {
    pub into_shared: Adapter,
    pub out_of_shared: Adapter,
    num_layers: usize,
    block_width: usize,
}

pub fn build_adapter_pair(
    model: &ModelConfig,
    tconfig: &TranslatorConfig,
    seed: u64,
) -> Result<AdapterPair> {
    model.validate()?;
    tconfig.validate(model.num_layers)?;
    let mut rng = Rng::seed(seed);
    let pair = AdapterPair {
        into_shared: Adapter::init(Direction::IntoShared, model, tconfig, &mut rng)?,
        out_of_shared: Adapter::init(Direction::OutOfShared, model, tconfig, &mut rng)?,
        num_layers: model.num_layers,
        block_width: model.cache_width(),
    };
    pair.set_trainable(true);
    Ok(pair)
}

impl AdapterPair {
    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn block_width(&self) -> usize {
        self.block_width
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<_> = self
            .into_shared
            .named_params()
            .into_iter()
            .map(|(n, t)| (format!("into.{n}"), t))
            .collect();
        out.extend(
            self.out_of_shared
                .named_params()
                .into_iter()
                .map(|(n, t)| (format!("out.{n}"), t)),
        );
        out
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    pub fn param_count(&self) -> usize {
        self.into_shared.param_count() + self.out_of_shared.param_count()
    }

    pub fn set_trainable(&self, on: bool) {
        for p in self.params() {
            p.set_requires_grad(on);
            if !on {
                p.zero_grad();
            }
        }
    }

    pub fn encode(&self, cache: &KVCache) -> Result<SharedLatentBlock> {
        if cache.num_layers() != self.num_layers || cache.width() != self.block_width {
            return Err(Error::Contract(format!(
                "cache with {} layers of width {} fed to an adapter for {} x {}",
                cache.num_layers(),
                cache.width(),
                self.num_layers,
                self.block_width
            )));
        }
        let (k_star, v_star) = self.into_shared.adapt(&cache.keys, &cache.values)?;
        Ok(SharedLatentBlock { k_star, v_star })
    }

    pub fn decode(&self, block: &SharedLatentBlock, positions: Vec<usize>) -> Result<KVCache> {
        let (k, v) = self.out_of_shared.adapt(&block.k_star, &block.v_star)?;
        KVCache::new(k, v, positions)
    }
}

/// Source cache -> shared space via `src_pair` -> target layout via
/// `dst_pair`. Positions are carried through unchanged.
pub fn translate(
    src_cache: &KVCache,
    src_pair: &AdapterPair,
    dst_pair: &AdapterPair,
) -> Result<KVCache> {
    let shared = src_pair.encode(src_cache)?;
    dst_pair.decode(&shared, src_cache.positions.clone())
}

/// Anything that can move a cache from pool member `src` to `dst`.
pub trait CacheTranslator {
    fn translate_cache(&self, src: usize, dst: usize, cache: &KVCache) -> Result<KVCache>;
}

/// Pass a cache through unchanged; only valid when layouts match exactly.
pub fn identity_baseline(src_cache: &KVCache, dst_model: &ModelConfig) -> Result<KVCache> {
    if src_cache.num_layers() != dst_model.num_layers
        || src_cache.width() != dst_model.cache_width()
    {
        return Err(Error::UnsupportedPair {
            src: 0,
            dst: 0,
            reason: format!(
                "identity needs matching caches: source {} x {}, target {} x {}",
                src_cache.num_layers(),
                src_cache.width(),
                dst_model.num_layers,
                dst_model.cache_width()
            ),
        });
    }
    Ok(src_cache.clone())
}

pub struct IdentityTranslator {
    pub configs: Vec<ModelConfig>,
}

impl CacheTranslator for IdentityTranslator {
    fn translate_cache(&self, src: usize, dst: usize, cache: &KVCache) -> Result<KVCache> {
        let (Some(s), Some(d)) = (self.configs.get(src), self.configs.get(dst)) else {
            return Err(Error::Contract(format!(
                "path {src}->{dst} outside pool of {}",
                self.configs.len()
            )));
        };
        if s.num_layers != cache.num_layers() || s.cache_width() != cache.width() {
            return Err(Error::Contract(format!(
                "cache does not belong to pool member {src}"
            )));
        }
        identity_baseline(cache, d).map_err(|e| match e {
            Error::UnsupportedPair { reason, .. } => Error::UnsupportedPair { src, dst, reason },
            other => other,
        })
    }
}

/// Linear maps for one model: flattened `L*D` caches to and from a shared
/// width `R`, separately for keys and values. No biases.
pub struct LinearMaps {
    pub key_in: Tensor,
    pub value_in: Tensor,
    pub key_out: Tensor,
    pub value_out: Tensor,
    num_layers: usize,
    block_width: usize,
}

/// Shared width for the linear baseline: eight times the widest flattened
/// cache in the pool.
pub fn linear_shared_width(models: &[ModelConfig]) -> usize {
    8 * models
        .iter()
        .map(|m| m.num_layers * m.cache_width())
        .max()
        .unwrap_or(1)
}

impl LinearMaps {
    pub fn init(model: &ModelConfig, shared: usize, rng: &mut Rng) -> Self {
        let flat = model.num_layers * model.cache_width();
        let mut m = |r: usize, c: usize| {
            let t = Tensor::randn(&[r, c], 1.0 / (r as f64).sqrt(), rng);
            t.set_requires_grad(true);
            t
        };
        LinearMaps {
            key_in: m(flat, shared),
            value_in: m(flat, shared),
            key_out: m(shared, flat),
            value_out: m(shared, flat),
            num_layers: model.num_layers,
            block_width: model.cache_width(),
        }
    }

    /// Maps with given matrices; shapes are checked when applied.
    pub fn from_matrices(
        model: &ModelConfig,
        key_in: Tensor,
        value_in: Tensor,
        key_out: Tensor,
        value_out: Tensor,
    ) -> Self {
        LinearMaps {
            key_in,
            value_in,
            key_out,
            value_out,
            num_layers: model.num_layers,
            block_width: model.cache_width(),
        }
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        vec![
            ("key_in".into(), self.key_in.clone()),
            ("value_in".into(), self.value_in.clone()),
            ("key_out".into(), self.key_out.clone()),
            ("value_out".into(), self.value_out.clone()),
        ]
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }
}

/// Flatten layers, apply the source's into-maps and the target's out-maps,
/// unflatten for the target.
pub fn linear_baseline(src_cache: &KVCache, src: &LinearMaps, dst: &LinearMaps) -> Result<KVCache> {
    let (b, s) = (src_cache.batch(), src_cache.len());
    if src_cache.num_layers() != src.num_layers || src_cache.width() != src.block_width {
        return Err(Error::dim(
            "linear baseline",
            format!(
                "cache {:?} does not match source maps for {} x {}",
                src_cache.keys.shape(),
                src.num_layers,
                src.block_width
            ),
        ));
    }
    let flat = [b, s, src.num_layers * src.block_width];
    let out = [b, s, dst.num_layers, dst.block_width];
    let map = |x: &Tensor, a: &Tensor, c: &Tensor| -> Result<Tensor> {
        x.reshape(&flat)?.matmul(a)?.matmul(c)?.reshape(&out)
    };
    KVCache::new(
        map(&src_cache.keys, &src.key_in, &dst.key_out)?,
        map(&src_cache.values, &src.value_in, &dst.value_out)?,
        src_cache.positions.clone(),
    )
}

pub struct LinearPool {
    pub maps: Vec<LinearMaps>,
}

impl LinearPool {
    pub fn init(models: &[ModelConfig], seed: u64) -> Self {
        let shared = linear_shared_width(models);
        let mut rng = Rng::seed(seed);
        LinearPool {
            maps: models
                .iter()
                .map(|m| LinearMaps::init(m, shared, &mut rng))
                .collect(),
        }
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.maps.iter().flat_map(LinearMaps::params).collect()
    }
}

impl CacheTranslator for LinearPool {
    fn translate_cache(&self, src: usize, dst: usize, cache: &KVCache) -> Result<KVCache> {
        let (Some(s), Some(d)) = (self.maps.get(src), self.maps.get(dst)) else {
            return Err(Error::Contract(format!(
                "path {src}->{dst} outside pool of {}",
                self.maps.len()
            )));
        };
        linear_baseline(cache, s, d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad_check_param;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn small_model(l: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: 16,
            d_model: 16,
            num_layers: l,
            num_heads: 2,
            num_kv_heads: 1,
            head_dim: 8,
            ff_dim: 32,
            max_seq_len: 32,
            rope_base: 10_000.0,
        }
    }

    fn random_cache(m: &ModelConfig, b: usize, s: usize, seed: u64) -> KVCache {
        let mut rng = Rng::seed(seed);
        let shape = [b, s, m.num_layers, m.cache_width()];
        KVCache::new(
            Tensor::randn(&shape, 1.0, &mut rng),
            Tensor::randn(&shape, 1.0, &mut rng),
            (0..s).collect(),
        )
        .unwrap()
    }

    /// Independent symbolic count of one adapter's parameters.
    fn adapter_count_oracle(
        l: usize,
        d: usize,
        q: usize,
        dp: usize,
        ff: usize,
        inner: usize,
        into: bool,
    ) -> usize {
        let slice = if into { d } else { q / l };
        let out = if into { q } else { l * d };
        let input = 2 * slice + slice * dp + dp;
        let xattn = 3 * dp + 3 * dp * inner + inner * dp + 3 * dp * ff;
        let output = 2 * l * dp + l * dp * out + out + if into { 0 } else { out * out + out };
        2 * input + l * xattn + 2 * output
    }

    #[test]
    fn toy_param_count_matches_oracle() {
        // L=2, D=8, Q=32, D'=16 for the into side
        let m = ModelConfig::toy(2);
        assert_eq!(m.cache_width(), 8);
        let t = TranslatorConfig::default();
        let pair = build_adapter_pair(&m, &t, 0).unwrap();
        assert_eq!(pair.into_shared.embed_dim(), 16);
        let into = adapter_count_oracle(2, 8, 32, 16, 16, 32, true);
        // out side works on Q/L = 16 wide slices, so D' = 32
        let out = adapter_count_oracle(2, 8, 32, 32, 32, 32, false);
        assert_eq!(pair.into_shared.param_count(), into);
        assert_eq!(pair.out_of_shared.param_count(), out);
        assert_eq!(pair.param_count(), into + out);
    }

    #[test]
    fn xattn_depth_follows_model() {
        for l in [1, 2, 4] {
            let pair =
                build_adapter_pair(&small_model(l), &TranslatorConfig::default(), 1).unwrap();
            assert_eq!(pair.into_shared.num_layers(), l);
            assert_eq!(pair.out_of_shared.num_layers(), l);
        }
    }

    #[test]
    fn shared_dim_must_divide_layers() {
        let t = TranslatorConfig {
            shared_dim: 30,
            ..Default::default()
        };
        let err = build_adapter_pair(&small_model(4), &t, 0).err().unwrap();
        assert!(
            matches!(err, Error::Config { ref field, .. } if field == "shared_dim"),
            "{err}"
        );
        assert!(err.to_string().contains("divisible"));
    }

    #[test]
    fn shape_contracts() {
        let m = ModelConfig::toy(2);
        let pair = build_adapter_pair(&m, &TranslatorConfig::default(), 3).unwrap();
        let c = random_cache(&m, 1, 4, 9);
        let z = pair.encode(&c).unwrap();
        assert_eq!(z.k_star.shape(), &[1, 4, 32]);
        assert_eq!(z.v_star.shape(), &[1, 4, 32]);
        let back = pair.decode(&z, c.positions.clone()).unwrap();
        assert_eq!(back.keys.shape(), &[1, 4, 2, 8]);
        assert_eq!(back.positions, c.positions);
    }

    #[test]
    fn wrong_block_is_a_dimension_error() {
        let m = ModelConfig::toy(2);
        let pair = build_adapter_pair(&m, &TranslatorConfig::default(), 3).unwrap();
        let bad = Tensor::zeros(&[1, 4, 2, 6]);
        let err = pair.into_shared.adapt(&bad, &bad).unwrap_err();
        assert!(matches!(
            err,
            Error::Dimension {
                op: "adapter input",
                ..
            }
        ));
        let c = random_cache(&small_model(4), 1, 4, 0);
        assert!(matches!(pair.encode(&c), Err(Error::Contract(_))));
    }

    #[test]
    fn every_parameter_group_gets_gradient() {
        let m = small_model(2);
        let t = TranslatorConfig {
            shared_dim: 8,
            embed_dim_factor: 1.0,
            translation_dim_factor: 1.0,
            xattn_num_heads: 2,
            xattn_head_dim: 4,
        };
        let a = build_adapter_pair(&m, &t, 5).unwrap();
        let b = build_adapter_pair(&m, &t, 6).unwrap();
        a.set_trainable(true);
        b.set_trainable(true);
        let c = random_cache(&m, 2, 3, 1);
        let out = translate(&c, &a, &b).unwrap();
        let mut rng = Rng::seed(2);
        let head = Tensor::randn(out.keys.shape(), 1.0, &mut rng);
        let loss = out
            .keys
            .mul(&head)
            .unwrap()
            .sum()
            .add(&out.values.mul(&head).unwrap().sum())
            .unwrap();
        loss.backward().unwrap();
        let used = a
            .into_shared
            .named_params()
            .into_iter()
            .chain(b.out_of_shared.named_params());
        for (name, p) in used {
            let g = p.grad().unwrap_or_default();
            assert!(g.iter().any(|v| *v != 0.0), "no gradient reaches {name}");
        }
    }

    #[test]
    fn adapter_gradients_check_numerically() {
        let m = small_model(2);
        let t = TranslatorConfig {
            shared_dim: 8,
            embed_dim_factor: 1.0,
            translation_dim_factor: 1.0,
            xattn_num_heads: 2,
            xattn_head_dim: 4,
        };
        let pair = build_adapter_pair(&m, &t, 11).unwrap();
        let c = random_cache(&m, 1, 3, 4);
        let mut rng = Rng::seed(3);
        let hk = Tensor::randn(&[1, 3, 8], 1.0, &mut rng);
        let hv = Tensor::randn(&[1, 3, 8], 1.0, &mut rng);
        for (name, p) in pair.into_shared.named_params() {
            let f = || {
                let z = pair.encode(&c)?;
                z.k_star.mul(&hk)?.sum().add(&z.v_star.mul(&hv)?.sum())
            };
            let err = grad_check_param(f, &p, 1e-5).unwrap();
            assert!(err < 1e-4, "{name}: {err}");
        }
    }

    #[test]
    fn xattn_is_shared_and_inputs_are_not() {
        let m = ModelConfig::toy(2);
        let pair = build_adapter_pair(&m, &TranslatorConfig::default(), 7).unwrap();
        let c = random_cache(&m, 1, 5, 2);
        let base = pair.encode(&c).unwrap();
        let find = |n: &str| {
            pair.into_shared
                .named_params()
                .into_iter()
                .find(|(k, _)| k == n)
                .unwrap()
                .1
        };
        let wv = find("xattn.1.wv");
        let saved = wv.to_vec();
        wv.update_data(|d| d[0] += 0.5);
        let z = pair.encode(&c).unwrap();
        assert_ne!(z.k_star.to_vec(), base.k_star.to_vec());
        assert_ne!(z.v_star.to_vec(), base.v_star.to_vec());
        wv.set_data(&saved);

        let key_in = find("key_in.w");
        key_in.update_data(|d| d[0] += 0.5);
        let z = pair.encode(&c).unwrap();
        assert_ne!(z.k_star.to_vec(), base.k_star.to_vec());
        assert_eq!(z.v_star.to_vec(), base.v_star.to_vec());
    }

    #[test]
    fn identity_baseline_cases() {
        let m = ModelConfig::toy(2);
        let c = random_cache(&m, 2, 3, 5);
        let same = identity_baseline(&c, &m).unwrap();
        assert_eq!(same.keys.to_vec(), c.keys.to_vec());
        assert_eq!(same.values.to_vec(), c.values.to_vec());
        let err = identity_baseline(&c, &ModelConfig::toy(4)).unwrap_err();
        assert!(matches!(err, Error::UnsupportedPair { .. }));
        let pool = IdentityTranslator {
            configs: vec![m.clone(), ModelConfig::toy(4)],
        };
        assert!(matches!(
            pool.translate_cache(0, 1, &c),
            Err(Error::UnsupportedPair { src: 0, dst: 1, .. })
        ));
    }

    #[test]
    fn linear_identity_matrices_pass_through() {
        let m = ModelConfig::toy(2);
        let eye = |n: usize| {
            let mut d = vec![0.0; n * n];
            for i in 0..n {
                d[i * n + i] = 1.0;
            }
            Tensor::from_vec(d, &[n, n]).unwrap()
        };
        let maps = LinearMaps::from_matrices(&m, eye(16), eye(16), eye(16), eye(16));
        let c = random_cache(&m, 1, 4, 8);
        let out = linear_baseline(&c, &maps, &maps).unwrap();
        assert_eq!(out.keys.to_vec(), c.keys.to_vec());
        assert_eq!(out.values.to_vec(), c.values.to_vec());
    }

    #[test]
    fn linear_shape_arithmetic() {
        let m = ModelConfig::toy(2);
        assert_eq!(linear_shared_width(&[m.clone(), m.clone()]), 128);
        let pool = LinearPool::init(&[m.clone(), m.clone()], 0);
        assert_eq!(pool.maps[0].key_in.shape(), &[16, 128]);
        assert_eq!(pool.maps[0].key_out.shape(), &[128, 16]);
        let c = random_cache(&m, 1, 4, 8);
        let out = pool.translate_cache(0, 1, &c).unwrap();
        assert_eq!(out.keys.shape(), &[1, 4, 2, 8]);
        let other = random_cache(&ModelConfig::toy(4), 1, 4, 8);
        assert!(matches!(
            pool.translate_cache(0, 1, &other),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn linear_baseline_gradients_check_numerically() {
        let m = small_model(2);
        let pool = LinearPool::init(&[m.clone(), m.clone()], 2);
        let c = random_cache(&m, 1, 2, 3);
        let mut rng = Rng::seed(4);
        let head = Tensor::randn(c.keys.shape(), 1.0, &mut rng);
        for p in pool.maps[0]
            .params()
            .iter()
            .chain(pool.maps[1].params().iter())
        {
            let f = || {
                let o = pool.translate_cache(0, 1, &c)?;
                o.keys.add(&o.values)?.mul(&head).map(|t| t.sum())
            };
            let err = grad_check_param(f, p, 1e-5).unwrap();
            assert!(err < 1e-4, "{err}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn round_trip_keeps_cache_shape(
            l in prop::sample::select(vec![1usize, 2, 4]),
            b in 1usize..3,
            s in 1usize..6,
            seed in 0u64..1000,
        ) {
            let m = small_model(l);
            let pair = build_adapter_pair(&m, &TranslatorConfig::default(), seed).unwrap();
            let c = random_cache(&m, b, s, seed + 1);
            let out = translate(&c, &pair, &pair).unwrap();
            prop_assert_eq!(out.keys.shape(), c.keys.shape());
            prop_assert_eq!(out.values.shape(), c.values.shape());
            prop_assert!(out.keys.to_vec().iter().all(|v| v.is_finite()));
        }

        #[test]
        fn cross_depth_translation_targets_destination(
            src_l in prop::sample::select(vec![1usize, 2, 4]),
            dst_l in prop::sample::select(vec![1usize, 2, 4]),
            seed in 0u64..1000,
        ) {
            let t = TranslatorConfig::default();
            let a = build_adapter_pair(&small_model(src_l), &t, seed).unwrap();
            let b = build_adapter_pair(&small_model(dst_l), &t, seed + 1).unwrap();
            let c = random_cache(&small_model(src_l), 1, 3, seed);
            let out = translate(&c, &a, &b).unwrap();
            prop_assert_eq!(out.keys.shape(), &[1, 3, dst_l, 8]);
        }
    }
}

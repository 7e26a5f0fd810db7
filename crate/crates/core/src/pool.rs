//! A set of frozen language models, each owning one adapter pair into the
//! shared space.

use crate::error::{Error, Result};
use crate::lm::{KVCache, LanguageModel, ModelConfig};
use crate::tensor::Tensor;
use crate::translator::{
    build_adapter_pair, translate, AdapterPair, CacheTranslator, TranslatorConfig,
};

pub struct ModelPool {
    pub models: Vec<LanguageModel>,
    pub adapters: Vec<AdapterPair>,
    pub tconfig: TranslatorConfig,
    /// Which adapter pairs receive updates.
    pub trainable: Vec<bool>,
}

/// Seed of the adapter pair for pool slot `index`.
pub fn adapter_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index as u64 + 1)
}

impl ModelPool {
    /// Freeze `models` and give each a fresh adapter pair. Fails before
    /// building anything if the shared width does not fit every member.
    pub fn new(models: Vec<LanguageModel>, tconfig: TranslatorConfig, seed: u64) -> Result<Self> {
        for m in &models {
            tconfig.validate(m.config().num_layers)?;
        }
        let mut pool = ModelPool {
            models: Vec::new(),
            adapters: Vec::new(),
            tconfig,
            trainable: Vec::new(),
        };
        for m in models {
            pool.push(m, seed)?;
        }
        Ok(pool)
    }

    /// Add a model with a new trainable adapter pair; returns its index.
    pub fn push(&mut self, mut model: LanguageModel, seed: u64) -> Result<usize> {
        self.tconfig.validate(model.config().num_layers)?;
        let i = self.models.len();
        let pair = build_adapter_pair(model.config(), &self.tconfig, adapter_seed(seed, i))?;
        model.freeze();
        self.models.push(model);
        self.adapters.push(pair);
        self.trainable.push(true);
        Ok(i)
    }

    /// Replace the adapters of slot `i`, e.g. with loaded weights.
    pub fn set_adapters(&mut self, i: usize, pair: AdapterPair) -> Result<()> {
        let slot = self
            .adapters
            .get_mut(i)
            .ok_or_else(|| Error::Contract(format!("no pool slot {i}")))?;
        if pair.num_layers() != slot.num_layers() || pair.block_width() != slot.block_width() {
            return Err(Error::Contract(format!(
                "adapter pair does not fit pool slot {i}"
            )));
        }
        pair.set_trainable(self.trainable[i]);
        *slot = pair;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn configs(&self) -> Vec<ModelConfig> {
        self.models.iter().map(|m| m.config().clone()).collect()
    }

    pub fn set_trainable(&mut self, i: usize, on: bool) {
        self.trainable[i] = on;
        self.adapters[i].set_trainable(on);
    }

    /// Parameters of every adapter pair whose mask is set.
    pub fn trainable_params(&self) -> Vec<Tensor> {
        self.adapters
            .iter()
            .zip(&self.trainable)
            .filter(|(_, on)| **on)
            .flat_map(|(a, _)| a.params())
            .collect()
    }

    pub fn adapter_param_count(&self) -> usize {
        self.adapters.iter().map(AdapterPair::param_count).sum()
    }
}

impl CacheTranslator for ModelPool {
    fn translate_cache(&self, src: usize, dst: usize, cache: &KVCache) -> Result<KVCache> {
        let (Some(a), Some(b)) = (self.adapters.get(src), self.adapters.get(dst)) else {
            return Err(Error::Contract(format!(
                "path {src}->{dst} outside pool of {}",
                self.len()
            )));
        };
        translate(cache, a, b)
    }
}

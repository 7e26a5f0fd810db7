//! Soft prompts and their portability between pool members.

use serde::{Deserialize, Serialize};

use crate::corpus::{PromptTask, SEPARATOR};
use crate::error::{Error, Result};
use crate::lm::{KVCache, LanguageModel, TokenBatch};
use crate::optim::{adamw_step, clip_global_norm, AdamWConfig, LrSchedule, OptimState};
use crate::pool::ModelPool;
use crate::rng::Rng;
use crate::tensor::{no_grad, Tensor};
use crate::translator::CacheTranslator;

/// `p x d_model` input embeddings prepended to a model's input.
#[derive(Clone, Debug)]
pub struct SoftPrompt {
    pub embeddings: Tensor,
}

impl SoftPrompt {
    /// Unit-variance init, matching the scale of scaled token embeddings.
    pub fn random(model: &LanguageModel, p: usize, rng: &mut Rng) -> SoftPrompt {
        SoftPrompt {
            embeddings: Tensor::randn(&[p, model.config().d_model], 1.0, rng),
        }
    }

    pub fn len(&self) -> usize {
        self.embeddings.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cache of the prompt positions `0..p` under `model`, batch 1.
    pub fn cache(&self, model: &LanguageModel) -> Result<KVCache> {
        let (p, d) = (self.len(), self.embeddings.shape()[1]);
        Ok(model
            .forward_embeddings(&self.embeddings.reshape(&[1, p, d])?, 0)?
            .1)
    }
}

/// Teacher-forced inputs `[SEP, c0 .. c_{n-2}]` and targets `c0 .. c_{n-1}`.
fn completion_inputs(completions: &[Vec<usize>]) -> Result<(TokenBatch, Vec<usize>)> {
    if completions.is_empty() || completions.iter().any(Vec::is_empty) {
        return Err(Error::Input("no completions to score".into()));
    }
    let n = completions[0].len();
    if completions.iter().any(|c| c.len() != n) {
        return Err(Error::Input("completions differ in length".into()));
    }
    let rows: Vec<Vec<usize>> = completions
        .iter()
        .map(|c| {
            std::iter::once(SEPARATOR)
                .chain(c[..n - 1].iter().copied())
                .collect()
        })
        .collect();
    let targets = completions.iter().flatten().copied().collect();
    Ok((TokenBatch::from_rows(&rows)?, targets))
}

/// Mean completion NLL with the soft prompt prepended as input embeddings.
pub fn prompt_nll(
    model: &LanguageModel,
    prompt: &Tensor,
    completions: &[Vec<usize>],
) -> Result<Tensor> {
    let (inputs, targets) = completion_inputs(completions)?;
    let (b, n) = (inputs.batch, inputs.len);
    let (p, d) = (prompt.shape()[0], prompt.shape()[1]);
    let lead = prompt.reshape(&[1, p, d])?;
    let x = Tensor::concat(
        &[
            Tensor::concat(&vec![lead; b], 0)?,
            model.embed_tokens(&inputs)?,
        ],
        1,
    )?;
    let logits = model.forward_embeddings(&x, 0)?.0;
    let width = p + n;
    let mut all_targets = vec![0; b * width];
    let mut mask = vec![false; b * width];
    for bi in 0..b {
        for j in 0..n {
            all_targets[bi * width + p + j] = targets[bi * n + j];
            mask[bi * width + p + j] = true;
        }
    }
    logits.softmax_cross_entropy(&all_targets, &mask)
}

/// Mean completion NLL given a batch-1 prefix cache (a translated prompt or
/// a real context).
pub fn cached_nll(
    model: &LanguageModel,
    cache: &KVCache,
    completions: &[Vec<usize>],
) -> Result<Tensor> {
    let (inputs, targets) = completion_inputs(completions)?;
    let cache = cache.repeat_batch(inputs.batch)?;
    let logits = model.forward_with_prefix_cache(&cache, &inputs, cache.len())?;
    logits.softmax_cross_entropy(&targets, &vec![true; targets.len()])
}

/// Completion NLL when the model actually sees the generating context.
pub fn context_nll(
    model: &LanguageModel,
    context: &[usize],
    completions: &[Vec<usize>],
) -> Result<f64> {
    no_grad(|| {
        let cache = model
            .forward(&TokenBatch::new(context.to_vec(), 1, context.len())?)?
            .1;
        Ok(cached_nll(model, &cache, completions)?.item())
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptConfig {
    pub prompt_len: usize,
    pub steps: usize,
    pub lr: f64,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            prompt_len: 4,
            steps: 40,
            lr: 0.1,
        }
    }
}

/// Fit a soft prompt to the task's train completions; the model is not
/// touched.
pub fn learn_soft_prompt(
    model: &LanguageModel,
    task: &PromptTask,
    cfg: &PromptConfig,
    seed: u64,
) -> Result<SoftPrompt> {
    if task.train_completions.is_empty() {
        return Err(Error::Input(format!(
            "task {} has no train completions",
            task.task_id
        )));
    }
    let mut rng = Rng::derive(seed, task.task_id as u64);
    let prompt = SoftPrompt::random(model, cfg.prompt_len, &mut rng);
    prompt.embeddings.set_requires_grad(true);
    let params = [prompt.embeddings.clone()];
    let hyper = AdamWConfig {
        weight_decay: 0.0,
        ..Default::default()
    };
    let mut state = OptimState::new(&params, hyper);
    for step in 0..cfg.steps {
        let loss = prompt_nll(model, &prompt.embeddings, &task.train_completions)?;
        if !loss.item().is_finite() {
            return Err(Error::TrainingAborted {
                step,
                detail: format!("prompt loss for task {} is {}", task.task_id, loss.item()),
            });
        }
        loss.backward()?;
        let grads = vec![prompt
            .embeddings
            .grad()
            .unwrap_or_else(|| vec![0.0; prompt.embeddings.numel()])];
        adamw_step(&params, &grads, &mut state, cfg.lr)?;
        prompt.embeddings.zero_grad();
    }
    prompt.embeddings.set_requires_grad(false);
    Ok(prompt)
}

/// Learned prompt for each task, in task order.
pub fn learn_prompts(
    model: &LanguageModel,
    tasks: &[PromptTask],
    cfg: &PromptConfig,
    seed: u64,
) -> Result<Vec<SoftPrompt>> {
    tasks
        .iter()
        .map(|t| learn_soft_prompt(model, t, cfg, seed))
        .collect()
}

/// Target-model NLL on `completions` of a prompt learned on `src` and
/// carried over through the translator.
pub fn translated_prompt_nll(
    models: &[LanguageModel],
    translator: &dyn CacheTranslator,
    src: usize,
    dst: usize,
    prompt: &SoftPrompt,
    completions: &[Vec<usize>],
) -> Result<Tensor> {
    let cache = no_grad(|| prompt.cache(&models[src]))?;
    let translated = translator.translate_cache(src, dst, &cache)?;
    cached_nll(&models[dst], &translated, completions)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaConfig {
    pub steps: usize,
    pub tasks_per_step: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub clip_norm: f64,
    pub src: usize,
    pub dst: usize,
    /// Update only the into-shared adapters.
    pub into_only: bool,
    pub seed: u64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            steps: 300,
            tasks_per_step: 4,
            peak_lr: 3e-4,
            warmup_steps: 15,
            clip_norm: 1.0,
            src: 0,
            dst: 1,
            into_only: false,
            seed: 0,
        }
    }
}

/// Adapter parameters that meta-training updates.
pub fn meta_params(pool: &ModelPool, into_only: bool) -> Vec<Tensor> {
    pool.adapters
        .iter()
        .flat_map(|a| {
            let mut v = a.into_shared.params();
            if !into_only {
                v.extend(a.out_of_shared.params());
            }
            v
        })
        .collect()
}

/// Tune the pool's adapters so that prompts learned on `src` keep working
/// on `dst`. `prompts[i]` belongs to `tasks[i]`. Returns the meta-loss per
/// step.
pub fn meta_train_portability(
    pool: &ModelPool,
    tasks: &[PromptTask],
    prompts: &[SoftPrompt],
    cfg: &MetaConfig,
) -> Result<Vec<f64>> {
    if tasks.is_empty() || tasks.len() != prompts.len() {
        return Err(Error::Input(format!(
            "{} tasks but {} prompts",
            tasks.len(),
            prompts.len()
        )));
    }
    let params = meta_params(pool, cfg.into_only);
    let saved: Vec<bool> = params.iter().map(Tensor::requires_grad).collect();
    params.iter().for_each(|p| p.set_requires_grad(true));
    let mut state = OptimState::new(&params, AdamWConfig::default());
    let sched = LrSchedule {
        total_steps: cfg.steps,
        warmup_steps: cfg.warmup_steps.min(cfg.steps),
        init_lr: 1e-6,
        peak_lr: cfg.peak_lr,
    };
    let mut rng = Rng::derive(cfg.seed, 2);
    let mut order: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(cfg.steps);
    let result = (|| -> Result<()> {
        for step in 0..cfg.steps {
            let lr = sched.lr_at(step);
            let mut total = 0.0;
            for _ in 0..cfg.tasks_per_step {
                if order.is_empty() {
                    order = (0..tasks.len()).collect();
                    rng.shuffle(&mut order);
                }
                let i = order.pop().expect("refilled");
                let loss = translated_prompt_nll(
                    &pool.models,
                    pool,
                    cfg.src,
                    cfg.dst,
                    &prompts[i],
                    &tasks[i].eval_completions,
                )?
                .scale(1.0 / cfg.tasks_per_step as f64);
                total += loss.item();
                loss.backward()?;
            }
            if !total.is_finite() {
                return Err(Error::TrainingAborted {
                    step,
                    detail: format!("meta loss {} (lr {:e})", total, lr),
                });
            }
            let mut grads: Vec<Vec<f64>> = params
                .iter()
                .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
                .collect();
            clip_global_norm(&mut grads, cfg.clip_norm).map_err(|e| Error::TrainingAborted {
                step,
                detail: e.to_string(),
            })?;
            adamw_step(&params, &grads, &mut state, lr)?;
            params.iter().for_each(Tensor::zero_grad);
            losses.push(total);
        }
        Ok(())
    })();
    for (p, on) in params.iter().zip(saved) {
        p.set_requires_grad(on);
    }
    result.map(|_| losses)
}

/// Per-task eval-completion NLLs on the target for three prompt sources.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PortabilityReport {
    pub translated: Vec<f64>,
    pub random: Vec<f64>,
    pub direct: Vec<f64>,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len().max(1) as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl PortabilityReport {
    /// Fraction of tasks where the translated prompt beats the random one.
    pub fn win_rate(&self) -> f64 {
        let wins = self
            .translated
            .iter()
            .zip(&self.random)
            .filter(|(t, r)| t < r)
            .count();
        wins as f64 / self.translated.len().max(1) as f64
    }
}

/// Meta-test: `src_prompts` were learned on `src`; `direct_prompts`, when
/// given, were learned on `dst` itself (upper bound).
pub fn meta_test(
    pool: &ModelPool,
    translator: &dyn CacheTranslator,
    tasks: &[PromptTask],
    src_prompts: &[SoftPrompt],
    direct_prompts: Option<&[SoftPrompt]>,
    src: usize,
    dst: usize,
    seed: u64,
) -> Result<PortabilityReport> {
    let mut report = PortabilityReport::default();
    let target = &pool.models[dst];
    no_grad(|| -> Result<()> {
        for (i, task) in tasks.iter().enumerate() {
            let t = translated_prompt_nll(
                &pool.models,
                translator,
                src,
                dst,
                &src_prompts[i],
                &task.eval_completions,
            )?;
            report.translated.push(t.item());
            let mut rng = Rng::derive(seed, 1_000_000 + task.task_id as u64);
            let random = SoftPrompt::random(target, src_prompts[i].len(), &mut rng);
            report
                .random
                .push(prompt_nll(target, &random.embeddings, &task.eval_completions)?.item());
            if let Some(direct) = direct_prompts {
                report.direct.push(
                    prompt_nll(target, &direct[i].embeddings, &task.eval_completions)?.item(),
                );
            }
        }
        Ok(())
    })?;
    Ok(report)
}

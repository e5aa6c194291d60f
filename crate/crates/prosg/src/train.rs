//! Two-phase training.
//!
//! Phase 1 fine-tunes the backbone with teacher forcing over full
//! sequences, scoring only response positions. Phase 2 freezes the
//! backbone and trains the synthesis module: each sample's prompt is
//! streamed once (pass A, cached — the frozen backbone makes it a pure
//! function of the prompt), then the response is replayed in-graph from
//! the cached prompt-final states with the per-sample deltas active
//! (pass B). The first response token is scored from the cached
//! prompt-final logits row, which is delta-free, matching evaluation
//! and generation exactly.

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::batch_graph::{build_batch_loss, ConstLogits};
use crate::model::infer::{run_prompt, PromptRun};
use crate::model::params::BackboneParams;
use crate::model::PAD;
use crate::scalar::Scalar;
use crate::synth::{synthesize_graph, SynthParams};
use crate::taskgen::Sample;
use crate::tensor::{NamedParams, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct TrainOpts {
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub clip_norm: f64,
    pub seed: u64,
}

/// One metrics line, serialized as JSONL by callers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub step: usize,
    pub phase: u32,
    pub loss: f64,
    pub lr: f64,
    pub wallclock_ms: u64,
}

// ── optimizer ───────────────────────────────────────────────────────

/// Adam with linear warmup, cosine decay, and global-norm clipping.
/// Moment buffers are kept in f64 regardless of the model precision.
pub struct Adam {
    lr_base: f64,
    warmup: usize,
    total: usize,
    clip: f64,
    t: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(opts: &TrainOpts, param_sizes: &[usize]) -> Self {
        Adam {
            lr_base: opts.lr,
            warmup: opts.warmup_steps,
            total: opts.steps,
            clip: opts.clip_norm,
            t: 0,
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Learning rate for optimizer step `t` (1-based).
    pub fn lr_at(&self, t: usize) -> f64 {
        let warm = if self.warmup == 0 {
            1.0
        } else {
            (t as f64 / self.warmup as f64).min(1.0)
        };
        let cos = if t <= self.warmup || self.total <= self.warmup {
            1.0
        } else {
            let frac = (t - self.warmup) as f64 / (self.total - self.warmup) as f64;
            0.5 * (1.0 + (std::f64::consts::PI * frac.min(1.0)).cos())
        };
        self.lr_base * warm * cos
    }

    /// Apply one update from the accumulated gradients. Returns the
    /// learning rate used.
    pub fn step<F: Scalar>(&mut self, params: &NamedParams<F>) -> Result<f64> {
        if params.len() != self.m.len() {
            return Err(Error::precondition(format!(
                "optimizer has {} slots for {} params",
                self.m.len(),
                params.len()
            )));
        }
        self.t += 1;
        let lr = self.lr_at(self.t);

        // global-norm clip
        let mut sq = 0.0f64;
        for (_, p) in params {
            let p = p.borrow();
            if let Some(gr) = p.grad() {
                for &g in gr {
                    let g = g.to_f64();
                    sq += g * g;
                }
            }
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::precondition(format!(
                "gradient norm is non-finite: {norm}"
            )));
        }
        let scale = if norm > self.clip { self.clip / norm } else { 1.0 };

        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for (i, (name, p)) in params.iter().enumerate() {
            let mut p = p.borrow_mut();
            let Some(gr) = p.grad() else { continue };
            if gr.len() != self.m[i].len() {
                return Err(Error::precondition(format!(
                    "optimizer slot {i} ({name}) sized {} for grad of {}",
                    self.m[i].len(),
                    gr.len()
                )));
            }
            let g: Vec<f64> = gr.iter().map(|&v| v.to_f64() * scale).collect();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let data = p.data_mut();
            for j in 0..g.len() {
                m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
                v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                let upd = lr * mhat / (vhat.sqrt() + ADAM_EPS);
                data[j] = F::from_f64(data[j].to_f64() - upd);
            }
        }
        Ok(lr)
    }
}

// ── batching ────────────────────────────────────────────────────────

/// Padded teacher-forcing batch over full sequences.
#[derive(Debug, Clone)]
pub struct Batch {
    pub idxs: Vec<usize>,
    /// K×T tokens the model consumes (last target excluded, PAD-filled).
    pub tokens: Vec<Vec<u32>>,
    /// K×T next-token targets.
    pub targets: Vec<Vec<u32>>,
    /// K×T scored-position mask (response + EOS predictions only).
    pub mask: Vec<Vec<bool>>,
}

impl Batch {
    /// Number of scored predictions.
    pub fn scored(&self) -> usize {
        self.mask.iter().flatten().filter(|&&b| b).count()
    }
}

/// Build one padded batch from sample indices.
pub fn phase1_batch(samples: &[Sample], idxs: &[usize]) -> Result<Batch> {
    if idxs.is_empty() {
        return Err(Error::precondition("phase1_batch: empty index list"));
    }
    let seqs: Vec<Vec<u32>> = idxs.iter().map(|&i| samples[i].full_tokens()).collect();
    let t_max = seqs.iter().map(|s| s.len() - 1).max().unwrap();
    let mut tokens = Vec::with_capacity(idxs.len());
    let mut targets = Vec::with_capacity(idxs.len());
    let mut mask = Vec::with_capacity(idxs.len());
    for (row, &i) in idxs.iter().enumerate() {
        let seq = &seqs[row];
        let l = samples[i].prompt_len;
        if seq.len() < l + 1 {
            return Err(Error::precondition(format!(
                "sample {i}: sequence of {} tokens with prompt_len {l}",
                seq.len()
            )));
        }
        let mut tok: Vec<u32> = seq[..seq.len() - 1].to_vec();
        let mut tgt: Vec<u32> = seq[1..].to_vec();
        // scored targets are positions l..T-1 of the full sequence,
        // i.e. consumed steps l-1..T-2
        let mut msk: Vec<bool> = (0..tok.len()).map(|t| t + 1 >= l).collect();
        tok.resize(t_max, PAD);
        tgt.resize(t_max, PAD);
        msk.resize(t_max, false);
        tokens.push(tok);
        targets.push(tgt);
        mask.push(msk);
    }
    Ok(Batch {
        idxs: idxs.to_vec(),
        tokens,
        targets,
        mask,
    })
}

/// Deterministic batch plan: sort by length so padding stays small,
/// chunk, then shuffle chunk order.
pub fn make_batches(samples: &[Sample], batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by_key(|&i| (samples[i].full_tokens().len(), i));
    let mut chunks: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    chunks.shuffle(&mut rng);
    chunks
}

// ── phase 1 ─────────────────────────────────────────────────────────

/// Masked mean NLL of a batch. With `train` set, gradients are left
/// accumulated in the backbone parameters.
pub fn phase1_loss<F: Scalar>(
    params: &BackboneParams<F>,
    batch: &Batch,
    train: bool,
) -> Result<f64> {
    let mut g = Graph::new();
    let out = build_batch_loss(
        &mut g,
        params,
        train,
        &batch.tokens,
        &batch.targets,
        &batch.mask,
        None,
        None,
        None,
    )?;
    let loss = g.value(out.loss)[0].to_f64();
    if train {
        g.backward(out.loss)?;
    }
    Ok(loss)
}

/// Run phase-1 training in place; returns per-step metrics.
pub fn train_backbone<F: Scalar>(
    params: &BackboneParams<F>,
    samples: &[Sample],
    opts: &TrainOpts,
    mut on_step: impl FnMut(&TrainMetrics),
) -> Result<Vec<TrainMetrics>> {
    if samples.is_empty() {
        return Err(Error::precondition("train_backbone: no samples"));
    }
    let named = params.named_params();
    let sizes: Vec<usize> = named.iter().map(|(_, p)| p.borrow().data().len()).collect();
    let mut opt = Adam::new(opts, &sizes);
    let start = Instant::now();
    let mut metrics = Vec::with_capacity(opts.steps);
    let mut step = 0usize;
    let mut epoch = 0u64;
    'outer: loop {
        let plan = make_batches(samples, opts.batch_size, opts.seed.wrapping_add(epoch));
        for idxs in &plan {
            if step >= opts.steps {
                break 'outer;
            }
            let batch = phase1_batch(samples, idxs)?;
            params.zero_grads();
            let loss = phase1_loss(params, &batch, true)?;
            let lr = opt.step(&named)?;
            step += 1;
            let m = TrainMetrics {
                step,
                phase: 1,
                loss,
                lr,
                wallclock_ms: start.elapsed().as_millis() as u64,
            };
            on_step(&m);
            metrics.push(m);
        }
        epoch += 1;
    }
    Ok(metrics)
}

// ── phase 2 ─────────────────────────────────────────────────────────

/// Cached pass-A results, indexed like the sample slice. Valid only
/// while the backbone stays frozen.
pub struct PromptCache<F: Scalar> {
    pub runs: Vec<PromptRun<F>>,
}

pub fn build_prompt_cache<F: Scalar>(
    backbone: &BackboneParams<F>,
    samples: &[Sample],
) -> Result<PromptCache<F>> {
    let runs = samples
        .iter()
        .map(|s| run_prompt(backbone, &s.prompt_tokens()))
        .collect::<Result<Vec<_>>>()?;
    Ok(PromptCache { runs })
}

/// Masked mean NLL over response tokens, resuming from cached
/// prompt-final states. `synth == None` scores the frozen baseline
/// (zero delta). With `train` set, gradients are left in the synthesis
/// parameters; the backbone enters the graph as constants either way.
pub fn phase2_loss<F: Scalar>(
    backbone: &BackboneParams<F>,
    synth: Option<&SynthParams<F>>,
    cache: &PromptCache<F>,
    samples: &[Sample],
    idxs: &[usize],
    train: bool,
) -> Result<f64> {
    if idxs.is_empty() {
        return Err(Error::precondition("phase2_loss: empty index list"));
    }
    if train && synth.is_none() {
        return Err(Error::precondition("phase2_loss: training needs a synthesis module"));
    }
    let cfg = &backbone.config;
    let e = cfg.d_model;
    let k_rows = idxs.len();

    let resp: Vec<Vec<u32>> = idxs.iter().map(|&i| samples[i].response_tokens()).collect();
    for (row, r) in resp.iter().enumerate() {
        if r.len() < 2 {
            return Err(Error::precondition(format!(
                "sample {}: response of {} tokens",
                idxs[row],
                r.len()
            )));
        }
    }
    let t_max = resp.iter().map(|r| r.len() - 1).max().unwrap();

    // first response token scored from the cached prompt-final logits
    let mut cl_data = Vec::with_capacity(k_rows * cfg.vocab);
    let mut cl_targets = Vec::with_capacity(k_rows);
    for (row, &i) in idxs.iter().enumerate() {
        cl_data.extend_from_slice(&cache.runs[i].last_logits);
        cl_targets.push(resp[row][0]);
    }
    let const_logits = ConstLogits {
        logits: Tensor::new(vec![k_rows, cfg.vocab], cl_data)?,
        targets: cl_targets,
        mask: vec![true; k_rows],
    };

    let mut tokens = Vec::with_capacity(k_rows);
    let mut targets = Vec::with_capacity(k_rows);
    let mut mask = Vec::with_capacity(k_rows);
    for r in &resp {
        let mut tok: Vec<u32> = r[..r.len() - 1].to_vec();
        let mut tgt: Vec<u32> = r[1..].to_vec();
        let mut msk = vec![true; tok.len()];
        tok.resize(t_max, PAD);
        tgt.resize(t_max, PAD);
        msk.resize(t_max, false);
        tokens.push(tok);
        targets.push(tgt);
        mask.push(msk);
    }

    let init: Vec<_> = idxs.iter().map(|&i| cache.runs[i].state.clone()).collect();

    let mut g = Graph::new();
    let deltas = match synth {
        Some(sp) => {
            let gathered: Vec<_> = (0..cfg.n_layers)
                .map(|li| {
                    let mut data = Vec::with_capacity(k_rows * e);
                    for &i in idxs {
                        data.extend_from_slice(&cache.runs[i].last_ln1[li]);
                    }
                    g.constant(Tensor::new(vec![k_rows, e], data).expect("ln1 shape"))
                })
                .collect();
            Some(synthesize_graph(&mut g, sp, &gathered)?)
        }
        None => None,
    };
    let out = build_batch_loss(
        &mut g,
        backbone,
        false,
        &tokens,
        &targets,
        &mask,
        Some(&init),
        deltas.as_ref(),
        Some(&const_logits),
    )?;
    let loss = g.value(out.loss)[0].to_f64();
    if train {
        g.backward(out.loss)?;
    }
    Ok(loss)
}

/// Run phase-2 training in place; the backbone is left untouched.
pub fn train_synth<F: Scalar>(
    backbone: &BackboneParams<F>,
    synth: &SynthParams<F>,
    samples: &[Sample],
    opts: &TrainOpts,
    mut on_step: impl FnMut(&TrainMetrics),
) -> Result<Vec<TrainMetrics>> {
    if samples.is_empty() {
        return Err(Error::precondition("train_synth: no samples"));
    }
    if synth.config != backbone.config {
        return Err(Error::precondition(
            "train_synth: backbone and synthesis configs disagree",
        ));
    }
    let cache = build_prompt_cache(backbone, samples)?;
    let backbone_before: Vec<Vec<F>> = backbone
        .named_params()
        .iter()
        .map(|(_, p)| p.borrow().data().to_vec())
        .collect();

    let named = synth.named_params();
    let sizes: Vec<usize> = named.iter().map(|(_, p)| p.borrow().data().len()).collect();
    let mut opt = Adam::new(opts, &sizes);
    let start = Instant::now();
    let mut metrics = Vec::with_capacity(opts.steps);
    let mut step = 0usize;
    let mut epoch = 0u64;
    'outer: loop {
        let plan = make_batches(samples, opts.batch_size, opts.seed.wrapping_add(epoch));
        for idxs in &plan {
            if step >= opts.steps {
                break 'outer;
            }
            synth.zero_grads();
            let loss = phase2_loss(backbone, Some(synth), &cache, samples, idxs, true)?;
            let lr = opt.step(&named)?;
            step += 1;
            let m = TrainMetrics {
                step,
                phase: 2,
                loss,
                lr,
                wallclock_ms: start.elapsed().as_millis() as u64,
            };
            on_step(&m);
            metrics.push(m);
        }
        epoch += 1;
    }

    // freeze check: phase 2 must not have moved the backbone
    for ((name, p), before) in backbone.named_params().iter().zip(&backbone_before) {
        if p.borrow().data() != before.as_slice() {
            return Err(Error::precondition(format!(
                "phase 2 modified frozen backbone parameter {name}"
            )));
        }
    }
    Ok(metrics)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::taskgen::{gen_dataset, TaskKind};

    fn tiny_samples(n: usize) -> Vec<Sample> {
        gen_dataset(Some(TaskKind::Recall), n, 2, 4, 11, 512).unwrap()
    }

    #[test]
    fn lr_schedule_shape() {
        let opts = TrainOpts {
            batch_size: 2,
            steps: 100,
            lr: 1.0,
            warmup_steps: 10,
            clip_norm: 1.0,
            seed: 0,
        };
        let opt = Adam::new(&opts, &[]);
        assert!((opt.lr_at(5) - 0.5).abs() < 1e-12);
        assert!((opt.lr_at(10) - 1.0).abs() < 1e-12);
        assert!(opt.lr_at(60) < 1.0);
        assert!(opt.lr_at(100) < 1e-6);
    }

    #[test]
    fn batching_is_deterministic_and_covers_all() {
        let samples = tiny_samples(13);
        let a = make_batches(&samples, 4, 3);
        let b = make_batches(&samples, 4, 3);
        assert_eq!(a, b);
        let mut all: Vec<usize> = a.into_iter().flatten().collect();
        all.sort_unstable();
        assert_eq!(all, (0..13).collect::<Vec<_>>());
    }

    #[test]
    fn phase1_batch_mask_counts() {
        let samples = tiny_samples(3);
        let batch = phase1_batch(&samples, &[0, 1, 2]).unwrap();
        let want: usize = (0..3)
            .map(|i| samples[i].full_tokens().len() - samples[i].prompt_len)
            .sum();
        assert_eq!(batch.scored(), want);
    }

    #[test]
    fn phase1_step_reduces_loss_on_tiny_problem() {
        let samples = tiny_samples(4);
        let cfg = ModelConfig::tiny(crate::model::BYTE_VOCAB);
        let params = BackboneParams::<f64>::init(cfg, 5).unwrap();
        let opts = TrainOpts {
            batch_size: 4,
            steps: 30,
            lr: 3e-3,
            warmup_steps: 5,
            clip_norm: 1.0,
            seed: 0,
        };
        let ms = train_backbone(&params, &samples, &opts, |_| {}).unwrap();
        assert_eq!(ms.len(), 30);
        assert!(
            ms.last().unwrap().loss < ms.first().unwrap().loss,
            "loss {} -> {}",
            ms.first().unwrap().loss,
            ms.last().unwrap().loss
        );
    }

    #[test]
    fn phase2_baseline_matches_zero_synth_and_training_leaves_backbone() {
        let samples = tiny_samples(4);
        let cfg = ModelConfig::tiny(crate::model::BYTE_VOCAB);
        let params = BackboneParams::<f64>::init(cfg.clone(), 5).unwrap();
        let synth = SynthParams::<f64>::init(cfg, 6).unwrap();
        let cache = build_prompt_cache(&params, &samples).unwrap();
        let idxs: Vec<usize> = (0..4).collect();
        // zero-initialized output matrices => zero delta => same loss
        let base = phase2_loss(&params, None, &cache, &samples, &idxs, false).unwrap();
        let with = phase2_loss(&params, Some(&synth), &cache, &samples, &idxs, false).unwrap();
        assert!((base - with).abs() < 1e-12, "{base} vs {with}");

        let opts = TrainOpts {
            batch_size: 4,
            steps: 10,
            lr: 1e-3,
            warmup_steps: 2,
            clip_norm: 1.0,
            seed: 0,
        };
        train_synth(&params, &synth, &samples, &opts, |_| {}).unwrap();
    }

    #[test]
    fn phase2_training_reduces_loss() {
        let samples = tiny_samples(4);
        let cfg = ModelConfig::tiny(crate::model::BYTE_VOCAB);
        let params = BackboneParams::<f64>::init(cfg.clone(), 5).unwrap();
        let synth = SynthParams::<f64>::init(cfg, 6).unwrap();
        let opts = TrainOpts {
            batch_size: 4,
            steps: 40,
            lr: 3e-3,
            warmup_steps: 5,
            clip_norm: 1.0,
            seed: 0,
        };
        let ms = train_synth(&params, &synth, &samples, &opts, |_| {}).unwrap();
        assert!(
            ms.last().unwrap().loss < ms.first().unwrap().loss,
            "loss {} -> {}",
            ms.first().unwrap().loss,
            ms.last().unwrap().loss
        );
    }
}

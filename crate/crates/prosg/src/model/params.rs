//! Backbone weights and their initialization.

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{NamedParams, Param, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

#[derive(Debug, Clone)]
pub struct LayerNormParams<F: Scalar> {
    pub g: Param<F>,
    pub b: Param<F>,
}

impl<F: Scalar> LayerNormParams<F> {
    fn identity(n: usize) -> Self {
        LayerNormParams {
            g: Tensor::full(vec![n], F::one()).into_param(),
            b: Tensor::zeros(vec![n]).into_param(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TimeMixParams<F: Scalar> {
    pub w_r: Param<F>,
    pub w_k: Param<F>,
    pub w_v: Param<F>,
    pub w_o: Param<F>,
    pub mu_r: Param<F>,
    pub mu_k: Param<F>,
    pub mu_v: Param<F>,
    /// Free parameter; the decay rate is `w = exp(decay_log)`, which
    /// keeps `w >= 0` throughout training.
    pub decay_log: Param<F>,
    /// First-token bonus `u`.
    pub bonus: Param<F>,
}

impl<F: Scalar> TimeMixParams<F> {
    /// Elementwise decay rates `w = exp(decay_log)`.
    pub fn decay(&self) -> Vec<F> {
        self.decay_log.borrow().data().iter().map(|v| v.exp()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct ChannelMixParams<F: Scalar> {
    pub w_r: Param<F>,
    pub w_k: Param<F>,
    pub w_v: Param<F>,
    pub mu_r: Param<F>,
    pub mu_k: Param<F>,
}

#[derive(Debug, Clone)]
pub struct BlockParams<F: Scalar> {
    pub ln1: LayerNormParams<F>,
    pub tm: TimeMixParams<F>,
    pub ln2: LayerNormParams<F>,
    pub cm: ChannelMixParams<F>,
}

#[derive(Debug, Clone)]
pub struct BackboneParams<F: Scalar> {
    pub config: ModelConfig,
    pub embed: Param<F>,
    pub ln_emb: LayerNormParams<F>,
    pub blocks: Vec<BlockParams<F>>,
    pub ln_f: LayerNormParams<F>,
    pub head: Param<F>,
}

fn uniform_mat<F: Scalar, R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Param<F> {
    let scale = F::from_f64(1.0 / (cols as f64).sqrt());
    Tensor::uniform(vec![rows, cols], -scale, scale, rng).into_param()
}

/// Per-channel values spaced over (0, 1): (i+1)/(n+1).
fn spaced_unit<F: Scalar>(n: usize) -> Param<F> {
    let data = (0..n)
        .map(|i| F::from_f64((i + 1) as f64 / (n + 1) as f64))
        .collect();
    Tensor::new(vec![n], data).expect("shape ok").into_param()
}

/// Log-decay spread so channels cover slow to fast forgetting:
/// w = exp(decay_log) ranges roughly [0.005, 5].
fn spaced_decay_log<F: Scalar>(n: usize) -> Param<F> {
    let (lo, hi) = ((0.005f64).ln(), (5.0f64).ln());
    let data = (0..n)
        .map(|i| {
            let t = if n == 1 { 0.5 } else { i as f64 / (n - 1) as f64 };
            F::from_f64(lo + (hi - lo) * t)
        })
        .collect();
    Tensor::new(vec![n], data).expect("shape ok").into_param()
}

impl<F: Scalar> BackboneParams<F> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (e, v, h) = (config.d_model, config.vocab, config.ffn_mult * config.d_model);
        let blocks = (0..config.n_layers)
            .map(|_| BlockParams {
                ln1: LayerNormParams::identity(e),
                tm: TimeMixParams {
                    w_r: uniform_mat(e, e, &mut rng),
                    w_k: uniform_mat(e, e, &mut rng),
                    w_v: uniform_mat(e, e, &mut rng),
                    w_o: uniform_mat(e, e, &mut rng),
                    mu_r: spaced_unit(e),
                    mu_k: spaced_unit(e),
                    mu_v: spaced_unit(e),
                    decay_log: spaced_decay_log(e),
                    bonus: Tensor::full(vec![e], F::from_f64(0.1)).into_param(),
                },
                ln2: LayerNormParams::identity(e),
                cm: ChannelMixParams {
                    w_r: uniform_mat(e, e, &mut rng),
                    w_k: uniform_mat(h, e, &mut rng),
                    w_v: uniform_mat(e, h, &mut rng),
                    mu_r: spaced_unit(e),
                    mu_k: spaced_unit(e),
                },
            })
            .collect();
        Ok(BackboneParams {
            embed: uniform_mat(v, e, &mut rng),
            ln_emb: LayerNormParams::identity(e),
            blocks,
            ln_f: LayerNormParams::identity(e),
            head: uniform_mat(v, e, &mut rng),
            config,
        })
    }

    /// Canonical parameter list; checkpoint directory order and
    /// optimizer slot order both follow it.
    pub fn named_params(&self) -> NamedParams<F> {
        let mut out: NamedParams<F> = vec![
            ("backbone.embed".into(), self.embed.clone()),
            ("backbone.ln_emb.g".into(), self.ln_emb.g.clone()),
            ("backbone.ln_emb.b".into(), self.ln_emb.b.clone()),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let p = |s: &str| format!("backbone.blocks.{i}.{s}");
            out.push((p("ln1.g"), b.ln1.g.clone()));
            out.push((p("ln1.b"), b.ln1.b.clone()));
            out.push((p("tm.w_r"), b.tm.w_r.clone()));
            out.push((p("tm.w_k"), b.tm.w_k.clone()));
            out.push((p("tm.w_v"), b.tm.w_v.clone()));
            out.push((p("tm.w_o"), b.tm.w_o.clone()));
            out.push((p("tm.mu_r"), b.tm.mu_r.clone()));
            out.push((p("tm.mu_k"), b.tm.mu_k.clone()));
            out.push((p("tm.mu_v"), b.tm.mu_v.clone()));
            out.push((p("tm.decay_log"), b.tm.decay_log.clone()));
            out.push((p("tm.bonus"), b.tm.bonus.clone()));
            out.push((p("ln2.g"), b.ln2.g.clone()));
            out.push((p("ln2.b"), b.ln2.b.clone()));
            out.push((p("cm.w_r"), b.cm.w_r.clone()));
            out.push((p("cm.w_k"), b.cm.w_k.clone()));
            out.push((p("cm.w_v"), b.cm.w_v.clone()));
            out.push((p("cm.mu_r"), b.cm.mu_r.clone()));
            out.push((p("cm.mu_k"), b.cm.mu_k.clone()));
        }
        out.push(("backbone.ln_f.g".into(), self.ln_f.g.clone()));
        out.push(("backbone.ln_f.b".into(), self.ln_f.b.clone()));
        out.push(("backbone.head".into(), self.head.clone()));
        out
    }

    /// Rebuild from a checkpoint tensor directory.
    pub fn from_tensors(config: ModelConfig, map: &mut BTreeMap<String, Tensor<F>>) -> Result<Self> {
        config.validate()?;
        let mut take = |name: String| -> Result<Param<F>> {
            map.remove(&name)
                .map(Tensor::into_param)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
        };
        let embed = take("backbone.embed".into())?;
        let ln_emb = LayerNormParams {
            g: take("backbone.ln_emb.g".into())?,
            b: take("backbone.ln_emb.b".into())?,
        };
        let mut blocks = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let p = |s: &str| format!("backbone.blocks.{i}.{s}");
            blocks.push(BlockParams {
                ln1: LayerNormParams {
                    g: take(p("ln1.g"))?,
                    b: take(p("ln1.b"))?,
                },
                tm: TimeMixParams {
                    w_r: take(p("tm.w_r"))?,
                    w_k: take(p("tm.w_k"))?,
                    w_v: take(p("tm.w_v"))?,
                    w_o: take(p("tm.w_o"))?,
                    mu_r: take(p("tm.mu_r"))?,
                    mu_k: take(p("tm.mu_k"))?,
                    mu_v: take(p("tm.mu_v"))?,
                    decay_log: take(p("tm.decay_log"))?,
                    bonus: take(p("tm.bonus"))?,
                },
                ln2: LayerNormParams {
                    g: take(p("ln2.g"))?,
                    b: take(p("ln2.b"))?,
                },
                cm: ChannelMixParams {
                    w_r: take(p("cm.w_r"))?,
                    w_k: take(p("cm.w_k"))?,
                    w_v: take(p("cm.w_v"))?,
                    mu_r: take(p("cm.mu_r"))?,
                    mu_k: take(p("cm.mu_k"))?,
                },
            });
        }
        let ln_f = LayerNormParams {
            g: take("backbone.ln_f.g".into())?,
            b: take("backbone.ln_f.b".into())?,
        };
        let head = take("backbone.head".into())?;
        Ok(BackboneParams {
            config,
            embed,
            ln_emb,
            blocks,
            ln_f,
            head,
        })
    }

    pub fn zero_grads(&self) {
        for (_, p) in self.named_params() {
            p.borrow_mut().zero_grad();
        }
    }
}

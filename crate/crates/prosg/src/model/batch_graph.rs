//! Differentiable batched forward pass.
//!
//! The same block math as the streaming path, recorded on a [`Graph`]
//! over padded `K×T` token batches so backward can reach every
//! parameter. Phase-2 resumes from prompt-final states supplied as
//! constants and applies per-sample factored deltas to the four
//! time-mixing projections.

use super::params::BackboneParams;
use super::infer::ModelState;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::scalar::Scalar;
use crate::synth::{GraphDeltas, StateKind};
use crate::tensor::{Param, Tensor};
use crate::LAYERNORM_EPS;

/// Logits row evaluated outside the graph (phase-2 scores the first
/// response token from the cached prompt-final logits).
pub struct ConstLogits<F: Scalar> {
    /// K×V
    pub logits: Tensor<F>,
    pub targets: Vec<u32>,
    pub mask: Vec<bool>,
}

pub struct BatchGraphOutput {
    pub loss: NodeId,
    /// LN1 outputs per layer per step, each `[K×E]`.
    pub ln1: Vec<Vec<NodeId>>,
    /// (step index, logits node) for every scored step.
    pub logits: Vec<(usize, NodeId)>,
}

struct Leaves {
    embed: NodeId,
    ln_emb: (NodeId, NodeId),
    ln_f: (NodeId, NodeId),
    head: NodeId,
    blocks: Vec<BlockLeaves>,
}

struct BlockLeaves {
    ln1: (NodeId, NodeId),
    ln2: (NodeId, NodeId),
    w_r: NodeId,
    w_k: NodeId,
    w_v: NodeId,
    w_o: NodeId,
    mu_r: NodeId,
    mu_k: NodeId,
    mu_v: NodeId,
    decay: NodeId,
    bonus: NodeId,
    cm_w_r: NodeId,
    cm_w_k: NodeId,
    cm_w_v: NodeId,
    cm_mu_r: NodeId,
    cm_mu_k: NodeId,
}

fn leaf<F: Scalar>(g: &mut Graph<F>, p: &Param<F>, trainable: bool) -> NodeId {
    if trainable {
        g.param(p)
    } else {
        g.constant(p.borrow().clone())
    }
}

fn build_leaves<F: Scalar>(
    g: &mut Graph<F>,
    params: &BackboneParams<F>,
    trainable: bool,
) -> Result<Leaves> {
    let mut blocks = Vec::with_capacity(params.blocks.len());
    for b in &params.blocks {
        let decay_log = leaf(g, &b.tm.decay_log, trainable);
        let decay = g.exp(decay_log)?;
        blocks.push(BlockLeaves {
            ln1: (leaf(g, &b.ln1.g, trainable), leaf(g, &b.ln1.b, trainable)),
            ln2: (leaf(g, &b.ln2.g, trainable), leaf(g, &b.ln2.b, trainable)),
            w_r: leaf(g, &b.tm.w_r, trainable),
            w_k: leaf(g, &b.tm.w_k, trainable),
            w_v: leaf(g, &b.tm.w_v, trainable),
            w_o: leaf(g, &b.tm.w_o, trainable),
            mu_r: leaf(g, &b.tm.mu_r, trainable),
            mu_k: leaf(g, &b.tm.mu_k, trainable),
            mu_v: leaf(g, &b.tm.mu_v, trainable),
            decay,
            bonus: leaf(g, &b.tm.bonus, trainable),
            cm_w_r: leaf(g, &b.cm.w_r, trainable),
            cm_w_k: leaf(g, &b.cm.w_k, trainable),
            cm_w_v: leaf(g, &b.cm.w_v, trainable),
            cm_mu_r: leaf(g, &b.cm.mu_r, trainable),
            cm_mu_k: leaf(g, &b.cm.mu_k, trainable),
        });
    }
    Ok(Leaves {
        embed: leaf(g, &params.embed, trainable),
        ln_emb: (
            leaf(g, &params.ln_emb.g, trainable),
            leaf(g, &params.ln_emb.b, trainable),
        ),
        ln_f: (
            leaf(g, &params.ln_f.g, trainable),
            leaf(g, &params.ln_f.b, trainable),
        ),
        head: leaf(g, &params.head, trainable),
        blocks,
    })
}

struct LayerNodes {
    x_tm: NodeId,
    x_cm: NodeId,
    a: NodeId,
    b: NodeId,
    p: NodeId,
}

fn stack_state_field<F: Scalar>(
    g: &mut Graph<F>,
    states: &[ModelState<F>],
    field: impl Fn(&ModelState<F>) -> &[F],
    e: usize,
) -> NodeId {
    let mut data = Vec::with_capacity(states.len() * e);
    for s in states {
        data.extend_from_slice(field(s));
    }
    g.constant(Tensor::new(vec![states.len(), e], data).expect("state shape"))
}

/// Record the batched forward pass and masked cross-entropy loss.
///
/// `tokens[k][t]` is the token row `k` consumes at step `t`;
/// `targets[k][t]` is the token that step's logits should predict, and
/// `mask[k][t]` marks the scored (response) predictions. Logits are
/// only evaluated at steps with at least one scored row.
#[allow(clippy::too_many_arguments)]
pub fn build_batch_loss<F: Scalar>(
    g: &mut Graph<F>,
    params: &BackboneParams<F>,
    trainable: bool,
    tokens: &[Vec<u32>],
    targets: &[Vec<u32>],
    mask: &[Vec<bool>],
    init: Option<&[ModelState<F>]>,
    deltas: Option<&GraphDeltas>,
    const_logits: Option<&ConstLogits<F>>,
) -> Result<BatchGraphOutput> {
    let k_rows = tokens.len();
    if k_rows == 0 || tokens[0].is_empty() {
        return Err(Error::precondition("build_batch_loss: empty batch"));
    }
    let t_steps = tokens[0].len();
    if targets.len() != k_rows || mask.len() != k_rows {
        return Err(Error::precondition(
            "build_batch_loss: tokens/targets/mask row counts differ",
        ));
    }
    for k in 0..k_rows {
        if tokens[k].len() != t_steps || targets[k].len() != t_steps || mask[k].len() != t_steps {
            return Err(Error::precondition(
                "build_batch_loss: ragged batch rows",
            ));
        }
    }
    let cfg = &params.config;
    let e = cfg.d_model;
    let eps = F::from_f64(LAYERNORM_EPS);
    let leaves = build_leaves(g, params, trainable)?;

    let mut layers: Vec<LayerNodes> = Vec::with_capacity(cfg.n_layers);
    for li in 0..cfg.n_layers {
        let (x_tm, x_cm, a, b, p) = match init {
            Some(states) => (
                stack_state_field(g, states, |s| &s.layers[li].x_tm, e),
                stack_state_field(g, states, |s| &s.layers[li].x_cm, e),
                stack_state_field(g, states, |s| &s.layers[li].a, e),
                stack_state_field(g, states, |s| &s.layers[li].b, e),
                stack_state_field(g, states, |s| &s.layers[li].p, e),
            ),
            None => {
                let zeros = || Tensor::zeros(vec![k_rows, e]);
                let ninf = Tensor::full(vec![k_rows, e], F::neg_infinity());
                (
                    g.constant(zeros()),
                    g.constant(zeros()),
                    g.constant(zeros()),
                    g.constant(zeros()),
                    g.constant(ninf),
                )
            }
        };
        layers.push(LayerNodes { x_tm, x_cm, a, b, p });
    }

    let mut ln1_all: Vec<Vec<NodeId>> = vec![Vec::with_capacity(t_steps); cfg.n_layers];
    let mut scored_logits: Vec<(usize, NodeId)> = Vec::new();
    let mut stacked_parts: Vec<NodeId> = Vec::new();
    let mut flat_targets: Vec<u32> = Vec::new();
    let mut flat_mask: Vec<bool> = Vec::new();

    if let Some(cl) = const_logits {
        let node = g.constant(cl.logits.clone());
        stacked_parts.push(node);
        flat_targets.extend_from_slice(&cl.targets);
        flat_mask.extend_from_slice(&cl.mask);
    }

    for t in 0..t_steps {
        let col: Vec<u32> = (0..k_rows).map(|k| tokens[k][t]).collect();
        let x = g.embed(leaves.embed, &col)?;
        let mut h = g.layernorm(x, leaves.ln_emb.0, leaves.ln_emb.1, eps)?;
        for (li, bl) in leaves.blocks.iter().enumerate() {
            let st = &layers[li];
            let xin = g.layernorm(h, bl.ln1.0, bl.ln1.1, eps)?;
            // time mix
            let zr = g.lerp(bl.mu_r, xin, st.x_tm)?;
            let zk = g.lerp(bl.mu_k, xin, st.x_tm)?;
            let zv = g.lerp(bl.mu_v, xin, st.x_tm)?;
            let project = |g: &mut Graph<F>, z: NodeId, w: NodeId, kind: StateKind| -> Result<NodeId> {
                let base = g.matmul(z, w, true)?;
                match deltas {
                    Some(d) => {
                        let corr = g.low_rank_apply(z, d.layer_kind(li, kind))?;
                        g.add(base, corr)
                    }
                    None => Ok(base),
                }
            };
            let r = project(g, zr, bl.w_r, StateKind::R)?;
            let kk = project(g, zk, bl.w_k, StateKind::K)?;
            let vv = project(g, zv, bl.w_v, StateKind::V)?;
            // wkv with running-max shift
            let uk = g.add(kk, bl.bonus)?;
            let q1 = g.maximum(st.p, uk)?;
            let ps = g.sub(st.p, q1)?;
            let ep = g.exp(ps)?;
            let uks = g.sub(uk, q1)?;
            let euk = g.exp(uks)?;
            let ea = g.mul(ep, st.a)?;
            let ev = g.mul(euk, vv)?;
            let num = g.add(ea, ev)?;
            let eb = g.mul(ep, st.b)?;
            let den = g.add(eb, euk)?;
            let wkv = g.div(num, den)?;
            let pw = g.sub(st.p, bl.decay)?;
            let q2 = g.maximum(pw, kk)?;
            let pws = g.sub(pw, q2)?;
            let epw = g.exp(pws)?;
            let ks = g.sub(kk, q2)?;
            let ek = g.exp(ks)?;
            let a_scaled = g.mul(epw, st.a)?;
            let a_new_v = g.mul(ek, vv)?;
            let a2 = g.add(a_scaled, a_new_v)?;
            let b_scaled = g.mul(epw, st.b)?;
            let b2 = g.add(b_scaled, ek)?;
            let sr = g.sigmoid(r)?;
            let gated = g.mul(sr, wkv)?;
            let o = project(g, gated, bl.w_o, StateKind::O)?;
            h = g.add(h, o)?;
            // channel mix
            let xin2 = g.layernorm(h, bl.ln2.0, bl.ln2.1, eps)?;
            let zr2 = g.lerp(bl.cm_mu_r, xin2, st.x_cm)?;
            let zk2 = g.lerp(bl.cm_mu_k, xin2, st.x_cm)?;
            let r2p = g.matmul(zr2, bl.cm_w_r, true)?;
            let r2 = g.sigmoid(r2p)?;
            let k2 = g.matmul(zk2, bl.cm_w_k, true)?;
            let rl = g.relu(k2)?;
            let sq = g.mul(rl, rl)?;
            let val = g.matmul(sq, bl.cm_w_v, true)?;
            let cm_out = g.mul(r2, val)?;
            h = g.add(h, cm_out)?;

            let st = &mut layers[li];
            st.x_tm = xin;
            st.x_cm = xin2;
            st.a = a2;
            st.b = b2;
            st.p = q2;
            ln1_all[li].push(xin);
        }
        let any_scored = (0..k_rows).any(|k| mask[k][t]);
        if any_scored {
            let hf = g.layernorm(h, leaves.ln_f.0, leaves.ln_f.1, eps)?;
            let logits = g.matmul(hf, leaves.head, true)?;
            scored_logits.push((t, logits));
            stacked_parts.push(logits);
            for k in 0..k_rows {
                flat_targets.push(targets[k][t]);
                flat_mask.push(mask[k][t]);
            }
        }
    }
    if stacked_parts.is_empty() {
        return Err(Error::precondition(
            "build_batch_loss: no scored positions in batch",
        ));
    }
    let stacked = g.stack_rows(&stacked_parts)?;
    let loss = g.cross_entropy(stacked, &flat_targets, &flat_mask)?;
    Ok(BatchGraphOutput {
        loss,
        ln1: ln1_all,
        logits: scored_logits,
    })
}

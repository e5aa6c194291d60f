//! Streaming O(1)-per-token evaluation: token shift carries, the
//! shifted-exponent WKV accumulator, sampling, and greedy decode.

use super::params::{BackboneParams, BlockParams, ChannelMixParams, TimeMixParams};
use crate::error::{Error, Result};
use crate::math;
use crate::scalar::Scalar;
use crate::synth::{LayerDelta, PromptDelta, StateKind};
use crate::LAYERNORM_EPS;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Per-layer streaming state. `p` is the running max exponent of the
/// WKV accumulator and starts at the −∞ sentinel; `a`/`b` are the
/// shifted numerator and denominator.
#[derive(Debug, Clone)]
pub struct LayerState<F: Scalar> {
    pub x_tm: Vec<F>,
    pub x_cm: Vec<F>,
    pub a: Vec<F>,
    pub b: Vec<F>,
    pub p: Vec<F>,
}

impl<F: Scalar> LayerState<F> {
    pub fn new(e: usize) -> Self {
        LayerState {
            x_tm: vec![F::zero(); e],
            x_cm: vec![F::zero(); e],
            a: vec![F::zero(); e],
            b: vec![F::zero(); e],
            p: vec![F::neg_infinity(); e],
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelState<F: Scalar> {
    pub layers: Vec<LayerState<F>>,
}

impl<F: Scalar> ModelState<F> {
    pub fn new(n_layers: usize, e: usize) -> Self {
        ModelState {
            layers: (0..n_layers).map(|_| LayerState::new(e)).collect(),
        }
    }
}

/// One WKV update. Returns the aggregated output and advances the
/// accumulator, all elementwise over the E channels.
pub fn wkv_step<F: Scalar>(
    state: &mut LayerState<F>,
    k: &[F],
    v: &[F],
    w: &[F],
    u: &[F],
) -> Result<Vec<F>> {
    let e = k.len();
    let mut out = Vec::with_capacity(e);
    for i in 0..e {
        let (a, b, p) = (state.a[i], state.b[i], state.p[i]);
        let uk = u[i] + k[i];
        let q1 = if p >= uk { p } else { uk };
        let ep = (p - q1).exp();
        let euk = (uk - q1).exp();
        let num = ep * a + euk * v[i];
        let den = ep * b + euk;
        let wkv = num / den;

        let pw = p - w[i];
        let q2 = if pw >= k[i] { pw } else { k[i] };
        let epw = (pw - q2).exp();
        let ek = (k[i] - q2).exp();
        let a2 = epw * a + ek * v[i];
        let b2 = epw * b + ek;
        if !wkv.is_finite() || !a2.is_finite() || !b2.is_finite() || !q2.is_finite() {
            return Err(Error::NonFinite {
                op: "wkv_step",
                index: i,
            });
        }
        state.a[i] = a2;
        state.b[i] = b2;
        state.p[i] = q2;
        out.push(wkv);
    }
    Ok(out)
}

fn project<F: Scalar>(
    w: &crate::tensor::Param<F>,
    z: &[F],
    delta: Option<&LayerDelta<F>>,
    kind: StateKind,
) -> Vec<F> {
    let mut out = math::matvec(&w.borrow(), z);
    if let Some(d) = delta {
        let corr = d.get(kind).apply(z);
        math::add_assign(&mut out, &corr);
    }
    out
}

/// Time-mixing sub-block for one token. `delta`, when present, adds the
/// factored low-rank correction to each of the four projections.
pub fn time_mix<F: Scalar>(
    x: &[F],
    tm: &TimeMixParams<F>,
    state: &mut LayerState<F>,
    delta: Option<&LayerDelta<F>>,
) -> Result<Vec<F>> {
    if let Some(d) = delta {
        let n = d.r.b.cols();
        if d.r.a.rows() != n || d.r.a.cols() != x.len() {
            return Err(Error::ShapeMismatch {
                op: "time_mix delta",
                lhs: d.r.a.shape().to_vec(),
                rhs: vec![x.len()],
            });
        }
    }
    let zr = math::lerp(tm.mu_r.borrow().data(), x, &state.x_tm);
    let zk = math::lerp(tm.mu_k.borrow().data(), x, &state.x_tm);
    let zv = math::lerp(tm.mu_v.borrow().data(), x, &state.x_tm);
    let r = project(&tm.w_r, &zr, delta, StateKind::R);
    let k = project(&tm.w_k, &zk, delta, StateKind::K);
    let v = project(&tm.w_v, &zv, delta, StateKind::V);
    let w = tm.decay();
    let u = tm.bonus.borrow();
    let wkv = wkv_step(state, &k, &v, &w, u.data())?;
    let gated: Vec<F> = (0..x.len())
        .map(|i| math::sigmoid(r[i]) * wkv[i])
        .collect();
    let out = project(&tm.w_o, &gated, delta, StateKind::O);
    state.x_tm = x.to_vec();
    Ok(out)
}

/// Channel-mixing sub-block: squared-relu keys gated by receptance.
pub fn channel_mix<F: Scalar>(
    x: &[F],
    cm: &ChannelMixParams<F>,
    state: &mut LayerState<F>,
) -> Result<Vec<F>> {
    let zr = math::lerp(cm.mu_r.borrow().data(), x, &state.x_cm);
    let zk = math::lerp(cm.mu_k.borrow().data(), x, &state.x_cm);
    let r = math::matvec(&cm.w_r.borrow(), &zr);
    let mut k = math::matvec(&cm.w_k.borrow(), &zk);
    for v in k.iter_mut() {
        let rv = if *v > F::zero() { *v } else { F::zero() };
        *v = rv * rv;
    }
    let val = math::matvec(&cm.w_v.borrow(), &k);
    state.x_cm = x.to_vec();
    Ok((0..x.len()).map(|i| math::sigmoid(r[i]) * val[i]).collect())
}

/// Output of one streaming step.
pub struct StepOutput<F: Scalar> {
    pub logits: Vec<F>,
    /// LN1 outputs (time-mix sub-block inputs), one per layer — the
    /// vectors the synthesis module reads at the prompt's final token.
    pub ln1: Vec<Vec<F>>,
}

fn ln<F: Scalar>(x: &[F], p: &super::params::LayerNormParams<F>) -> Vec<F> {
    math::layernorm(
        x,
        p.g.borrow().data(),
        p.b.borrow().data(),
        F::from_f64(LAYERNORM_EPS),
    )
}

/// Advance all layers by one token and produce logits.
pub fn step<F: Scalar>(
    params: &BackboneParams<F>,
    state: &mut ModelState<F>,
    token: u32,
    delta: Option<&PromptDelta<F>>,
) -> Result<StepOutput<F>> {
    let cfg = &params.config;
    if token as usize >= cfg.vocab {
        return Err(Error::TokenOutOfRange {
            token,
            vocab: cfg.vocab,
        });
    }
    if let Some(d) = delta {
        if d.layers.len() != cfg.n_layers || d.rank() != cfg.rank {
            return Err(Error::precondition(format!(
                "delta has {} layers rank {}, model wants {} layers rank {}",
                d.layers.len(),
                d.rank(),
                cfg.n_layers,
                cfg.rank
            )));
        }
    }
    let emb = params.embed.borrow();
    let mut h = ln(emb.row(token as usize), &params.ln_emb);
    drop(emb);
    let mut ln1_all = Vec::with_capacity(cfg.n_layers);
    for (li, blk) in params.blocks.iter().enumerate() {
        let BlockParams { ln1, tm, ln2, cm } = blk;
        let xin = ln(&h, ln1);
        let ld = delta.map(|d| &d.layers[li]);
        let tm_out = time_mix(&xin, tm, &mut state.layers[li], ld)?;
        math::add_assign(&mut h, &tm_out);
        let xin2 = ln(&h, ln2);
        let cm_out = channel_mix(&xin2, cm, &mut state.layers[li])?;
        math::add_assign(&mut h, &cm_out);
        ln1_all.push(xin);
    }
    let hf = ln(&h, &params.ln_f);
    let logits = math::matvec(&params.head.borrow(), &hf);
    Ok(StepOutput {
        logits,
        ln1: ln1_all,
    })
}

/// Whole-sequence evaluation by streaming composition.
///
/// Returns per-position logits, the per-layer LN1 outputs at every
/// position when `collect` is set, and the final states.
#[allow(clippy::type_complexity)]
pub fn forward_sequence<F: Scalar>(
    params: &BackboneParams<F>,
    tokens: &[u32],
    delta: Option<&PromptDelta<F>>,
    collect: bool,
) -> Result<(Vec<Vec<F>>, Option<Vec<Vec<Vec<F>>>>, ModelState<F>)> {
    if tokens.is_empty() {
        return Err(Error::precondition("forward_sequence: empty sequence"));
    }
    let cfg = &params.config;
    let mut state = ModelState::new(cfg.n_layers, cfg.d_model);
    let mut logits = Vec::with_capacity(tokens.len());
    let mut collected: Option<Vec<Vec<Vec<F>>>> =
        collect.then(|| vec![Vec::with_capacity(tokens.len()); cfg.n_layers]);
    for &t in tokens {
        let out = step(params, &mut state, t, delta)?;
        logits.push(out.logits);
        if let Some(c) = collected.as_mut() {
            for (li, v) in out.ln1.into_iter().enumerate() {
                c[li].push(v);
            }
        }
    }
    Ok((logits, collected, state))
}

// ── sampling ────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub enum Sampler {
    Greedy,
    TopP {
        temperature: f64,
        top_p: f64,
        seed: u64,
    },
}

pub(crate) fn argmax<F: Scalar>(logits: &[F]) -> u32 {
    let mut best = 0usize;
    for i in 1..logits.len() {
        if logits[i] > logits[best] {
            best = i;
        }
    }
    best as u32
}

fn sample_top_p<F: Scalar>(logits: &[F], temperature: f64, top_p: f64, rng: &mut ChaCha8Rng) -> u32 {
    let t = temperature.max(1e-6);
    let scaled: Vec<f64> = logits.iter().map(|&v| v.to_f64() / t).collect();
    let mx = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<(usize, f64)> = scaled
        .iter()
        .enumerate()
        .map(|(i, &v)| (i, (v - mx).exp()))
        .collect();
    let z: f64 = probs.iter().map(|(_, p)| p).sum();
    for (_, p) in probs.iter_mut() {
        *p /= z;
    }
    probs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut kept = Vec::new();
    let mut acc = 0.0;
    for &(i, p) in &probs {
        kept.push((i, p));
        acc += p;
        if acc >= top_p {
            break;
        }
    }
    let norm: f64 = kept.iter().map(|(_, p)| p).sum();
    let mut draw: f64 = rng.gen::<f64>() * norm;
    for &(i, p) in &kept {
        draw -= p;
        if draw <= 0.0 {
            return i as u32;
        }
    }
    kept.last().map(|&(i, _)| i as u32).unwrap_or(0)
}

/// Decode continuing from the prompt-final states. The prompt itself is
/// processed without the delta; the delta (when given) is active for
/// every generated token. Stops at EOS or `max_steps`.
pub fn generate<F: Scalar>(
    params: &BackboneParams<F>,
    prompt: &[u32],
    delta: Option<&PromptDelta<F>>,
    max_steps: usize,
    sampler: &Sampler,
) -> Result<Vec<u32>> {
    if max_steps == 0 {
        return Err(Error::precondition("generate: max_steps must be >= 1"));
    }
    let (logits, _, mut state) = forward_sequence(params, prompt, None, false)?;
    let mut last = logits.into_iter().last().expect("non-empty prompt");
    let mut rng = match sampler {
        Sampler::Greedy => None,
        Sampler::TopP { seed, .. } => Some(ChaCha8Rng::seed_from_u64(*seed)),
    };
    let mut out = Vec::new();
    for _ in 0..max_steps {
        let tok = match sampler {
            Sampler::Greedy => argmax(&last),
            Sampler::TopP {
                temperature, top_p, ..
            } => sample_top_p(&last, *temperature, *top_p, rng.as_mut().unwrap()),
        };
        if tok == super::EOS {
            break;
        }
        out.push(tok);
        last = step(params, &mut state, tok, delta)?.logits;
    }
    Ok(out)
}

/// Read a prompt and synthesize its delta in one go. Returns the delta
/// together with the prompt-final states and logits so generation or
/// scoring can continue without re-encoding.
pub struct PromptRun<F: Scalar> {
    pub state: ModelState<F>,
    pub last_logits: Vec<F>,
    pub last_ln1: Vec<Vec<F>>,
}

pub fn run_prompt<F: Scalar>(
    params: &BackboneParams<F>,
    prompt: &[u32],
) -> Result<PromptRun<F>> {
    if prompt.is_empty() {
        return Err(Error::precondition("run_prompt: empty prompt"));
    }
    let cfg = &params.config;
    let mut state = ModelState::new(cfg.n_layers, cfg.d_model);
    let mut last = None;
    for &t in prompt {
        last = Some(step(params, &mut state, t, None)?);
    }
    let out = last.expect("non-empty prompt");
    Ok(PromptRun {
        state,
        last_logits: out.logits,
        last_ln1: out.ln1,
    })
}

//! Delta synthesis: per-layer prompt-final hidden vectors in, factored
//! low-rank deltas for the four time-mixing matrices out.
//!
//! Pipeline per layer: a learned projection widens the `E`-vector to
//! `nE`, one of four state embeddings is added to specialize the shared
//! transforming stack for r/k/v/o, the stack output reshapes to the
//! `n×E` factor `A`, and the learned `E×n` output matrix `B` supplies
//! the other factor. `ΔW = B·A` is applied in factored form only.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::math;
use crate::model::params::LayerNormParams;
use crate::model::ModelConfig;
use crate::scalar::Scalar;
use crate::tensor::{NamedParams, Param, Tensor};
use crate::LAYERNORM_EPS;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StateKind {
    R,
    K,
    V,
    O,
}

impl StateKind {
    pub const ALL: [StateKind; 4] = [StateKind::R, StateKind::K, StateKind::V, StateKind::O];

    pub fn name(self) -> &'static str {
        match self {
            StateKind::R => "r",
            StateKind::K => "k",
            StateKind::V => "v",
            StateKind::O => "o",
        }
    }
}

#[derive(Debug, Clone)]
pub struct TransformBlockParams<F: Scalar> {
    pub w1: Param<F>,
    pub w2: Param<F>,
    pub ln: LayerNormParams<F>,
}

#[derive(Debug, Clone)]
pub struct SynthLayerParams<F: Scalar> {
    /// E → nE widening projection.
    pub augment: Param<F>,
    pub e_r: Param<F>,
    pub e_k: Param<F>,
    pub e_v: Param<F>,
    pub e_o: Param<F>,
    pub blocks: Vec<TransformBlockParams<F>>,
    pub b_r: Param<F>,
    pub b_k: Param<F>,
    pub b_v: Param<F>,
    pub b_o: Param<F>,
}

impl<F: Scalar> SynthLayerParams<F> {
    pub fn embedding(&self, kind: StateKind) -> &Param<F> {
        match kind {
            StateKind::R => &self.e_r,
            StateKind::K => &self.e_k,
            StateKind::V => &self.e_v,
            StateKind::O => &self.e_o,
        }
    }

    pub fn output_mat(&self, kind: StateKind) -> &Param<F> {
        match kind {
            StateKind::R => &self.b_r,
            StateKind::K => &self.b_k,
            StateKind::V => &self.b_v,
            StateKind::O => &self.b_o,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthParams<F: Scalar> {
    pub config: ModelConfig,
    pub layers: Vec<SynthLayerParams<F>>,
}

impl<F: Scalar> SynthParams<F> {
    /// Output matrices start at exactly zero so the initial delta is
    /// the zero matrix and the phase-2 starting point equals the
    /// phase-1 model.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (e, n) = (config.d_model, config.rank);
        let ne = n * e;
        let mat = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| -> Param<F> {
            let s = F::from_f64(1.0 / (cols as f64).sqrt());
            Tensor::uniform(vec![rows, cols], -s, s, rng).into_param()
        };
        let emb = |rng: &mut ChaCha8Rng| -> Param<F> {
            let s = F::from_f64(0.1);
            Tensor::uniform(vec![ne], -s, s, rng).into_param()
        };
        let layers = (0..config.n_layers)
            .map(|_| SynthLayerParams {
                augment: mat(ne, e, &mut rng),
                e_r: emb(&mut rng),
                e_k: emb(&mut rng),
                e_v: emb(&mut rng),
                e_o: emb(&mut rng),
                blocks: (0..config.stack_depth)
                    .map(|_| TransformBlockParams {
                        w1: mat(ne, ne, &mut rng),
                        w2: mat(ne, ne, &mut rng),
                        ln: LayerNormParams {
                            g: Tensor::full(vec![ne], F::one()).into_param(),
                            b: Tensor::zeros(vec![ne]).into_param(),
                        },
                    })
                    .collect(),
                b_r: Tensor::zeros(vec![e, n]).into_param(),
                b_k: Tensor::zeros(vec![e, n]).into_param(),
                b_v: Tensor::zeros(vec![e, n]).into_param(),
                b_o: Tensor::zeros(vec![e, n]).into_param(),
            })
            .collect();
        Ok(SynthParams { config, layers })
    }

    pub fn named_params(&self) -> NamedParams<F> {
        let mut out: NamedParams<F> = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            let p = |s: &str| format!("synth.layers.{i}.{s}");
            out.push((p("augment"), l.augment.clone()));
            out.push((p("e_r"), l.e_r.clone()));
            out.push((p("e_k"), l.e_k.clone()));
            out.push((p("e_v"), l.e_v.clone()));
            out.push((p("e_o"), l.e_o.clone()));
            for (j, blk) in l.blocks.iter().enumerate() {
                let q = |s: &str| format!("synth.layers.{i}.blocks.{j}.{s}");
                out.push((q("w1"), blk.w1.clone()));
                out.push((q("w2"), blk.w2.clone()));
                out.push((q("ln.g"), blk.ln.g.clone()));
                out.push((q("ln.b"), blk.ln.b.clone()));
            }
            out.push((p("b_r"), l.b_r.clone()));
            out.push((p("b_k"), l.b_k.clone()));
            out.push((p("b_v"), l.b_v.clone()));
            out.push((p("b_o"), l.b_o.clone()));
        }
        out
    }

    pub fn from_tensors(config: ModelConfig, map: &mut BTreeMap<String, Tensor<F>>) -> Result<Self> {
        config.validate()?;
        let mut take = |name: String| -> Result<Param<F>> {
            map.remove(&name)
                .map(Tensor::into_param)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
        };
        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let p = |s: &str| format!("synth.layers.{i}.{s}");
            let augment = take(p("augment"))?;
            let e_r = take(p("e_r"))?;
            let e_k = take(p("e_k"))?;
            let e_v = take(p("e_v"))?;
            let e_o = take(p("e_o"))?;
            let mut blocks = Vec::with_capacity(config.stack_depth);
            for j in 0..config.stack_depth {
                let q = |s: &str| format!("synth.layers.{i}.blocks.{j}.{s}");
                blocks.push(TransformBlockParams {
                    w1: take(q("w1"))?,
                    w2: take(q("w2"))?,
                    ln: LayerNormParams {
                        g: take(q("ln.g"))?,
                        b: take(q("ln.b"))?,
                    },
                });
            }
            layers.push(SynthLayerParams {
                augment,
                e_r,
                e_k,
                e_v,
                e_o,
                blocks,
                b_r: take(p("b_r"))?,
                b_k: take(p("b_k"))?,
                b_v: take(p("b_v"))?,
                b_o: take(p("b_o"))?,
            });
        }
        Ok(SynthParams { config, layers })
    }

    pub fn zero_grads(&self) {
        for (_, p) in self.named_params() {
            p.borrow_mut().zero_grad();
        }
    }
}

// ── factored deltas ─────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct DeltaFactors<F: Scalar> {
    /// n×E
    pub a: Tensor<F>,
    /// E×n
    pub b: Tensor<F>,
}

impl<F: Scalar> DeltaFactors<F> {
    /// `B·(A·z)` — the factored application used everywhere at
    /// inference time; `ΔW` itself is never formed.
    pub fn apply(&self, z: &[F]) -> Vec<F> {
        let u = math::matvec(&self.a, z);
        math::matvec(&self.b, &u)
    }

    /// Explicit `B·A` (testing and inspection only).
    pub fn materialize(&self) -> Tensor<F> {
        let (e, n) = (self.b.rows(), self.b.cols());
        let e2 = self.a.cols();
        let mut out = vec![F::zero(); e * e2];
        for i in 0..e {
            let brow = self.b.row(i);
            let orow = &mut out[i * e2..(i + 1) * e2];
            for l in 0..n {
                let arow = self.a.row(l);
                for j in 0..e2 {
                    orow[j] += brow[l] * arow[j];
                }
            }
        }
        Tensor::new(vec![e, e2], out).expect("shape ok")
    }
}

#[derive(Debug, Clone)]
pub struct LayerDelta<F: Scalar> {
    pub r: DeltaFactors<F>,
    pub k: DeltaFactors<F>,
    pub v: DeltaFactors<F>,
    pub o: DeltaFactors<F>,
}

impl<F: Scalar> LayerDelta<F> {
    pub fn get(&self, kind: StateKind) -> &DeltaFactors<F> {
        match kind {
            StateKind::R => &self.r,
            StateKind::K => &self.k,
            StateKind::V => &self.v,
            StateKind::O => &self.o,
        }
    }
}

/// Per-prompt weight modification, held fixed for a whole generation.
#[derive(Debug, Clone)]
pub struct PromptDelta<F: Scalar> {
    pub layers: Vec<LayerDelta<F>>,
}

impl<F: Scalar> PromptDelta<F> {
    pub fn materialize(&self, layer: usize, kind: StateKind) -> Tensor<F> {
        self.layers[layer].get(kind).materialize()
    }

    pub fn rank(&self) -> usize {
        self.layers[0].r.b.cols()
    }
}

// ── forward evaluation ──────────────────────────────────────────────

/// One transforming block: `y = x + LN(W2 · relu(W1 · x))`. Width nE
/// is preserved.
pub fn transform_block<F: Scalar>(x: &[F], block: &TransformBlockParams<F>) -> Result<Vec<F>> {
    let w1 = block.w1.borrow();
    if w1.cols() != x.len() {
        return Err(Error::ShapeMismatch {
            op: "transform_block",
            lhs: vec![x.len()],
            rhs: w1.shape().to_vec(),
        });
    }
    let mut h = math::matvec(&w1, x);
    for v in h.iter_mut() {
        if *v < F::zero() {
            *v = F::zero();
        }
    }
    let h2 = math::matvec(&block.w2.borrow(), &h);
    let ln = math::layernorm(
        &h2,
        block.ln.g.borrow().data(),
        block.ln.b.borrow().data(),
        F::from_f64(LAYERNORM_EPS),
    );
    Ok(math::add(x, &ln))
}

/// Map per-layer prompt-final hidden vectors to factored deltas.
///
/// All four kinds share one transforming stack per layer; the state
/// embeddings `e_r/e_k/e_v/e_o` are the only thing that differentiates
/// them.
pub fn synthesize<F: Scalar>(
    layer_inputs: &[Vec<F>],
    synth: &SynthParams<F>,
) -> Result<PromptDelta<F>> {
    let cfg = &synth.config;
    if layer_inputs.len() != cfg.n_layers {
        return Err(Error::precondition(format!(
            "synthesize: {} layer inputs for {} layers",
            layer_inputs.len(),
            cfg.n_layers
        )));
    }
    let (e, n) = (cfg.d_model, cfg.rank);
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for (li, x) in layer_inputs.iter().enumerate() {
        if x.len() != e {
            return Err(Error::precondition(format!(
                "synthesize: layer {li} input has length {}, expected {e}",
                x.len()
            )));
        }
        let lp = &synth.layers[li];
        let xhat = math::matvec(&lp.augment.borrow(), x);
        let mut factors = Vec::with_capacity(4);
        for kind in StateKind::ALL {
            let mut y = math::add(&xhat, lp.embedding(kind).borrow().data());
            for blk in &lp.blocks {
                y = transform_block(&y, blk)?;
            }
            let a = Tensor::new(vec![n, e], y)?;
            let b = lp.output_mat(kind).borrow().clone();
            factors.push(DeltaFactors { a, b });
        }
        let mut it = factors.into_iter();
        layers.push(LayerDelta {
            r: it.next().unwrap(),
            k: it.next().unwrap(),
            v: it.next().unwrap(),
            o: it.next().unwrap(),
        });
    }
    Ok(PromptDelta { layers })
}

// ── graph construction (phase-2 training) ───────────────────────────

/// Per-layer, per-kind factor nodes for a batch: one `(A_k, B)` pair
/// per batch row, with the `B` param node shared across rows.
pub struct GraphDeltas {
    /// indexed [layer][kind-as-ALL-order] → per-row (a, b) node pairs
    pub factors: Vec<Vec<Vec<(NodeId, NodeId)>>>,
}

impl GraphDeltas {
    pub fn layer_kind(&self, layer: usize, kind: StateKind) -> &[(NodeId, NodeId)] {
        let ki = StateKind::ALL.iter().position(|&k| k == kind).unwrap();
        &self.factors[layer][ki]
    }
}

/// Build the synthesis pipeline in-graph over gathered prompt states
/// (`gathered[layer]` is a `[K×E]` node, typically a constant).
pub fn synthesize_graph<F: Scalar>(
    g: &mut Graph<F>,
    synth: &SynthParams<F>,
    gathered: &[NodeId],
) -> Result<GraphDeltas> {
    let cfg = &synth.config;
    if gathered.len() != cfg.n_layers {
        return Err(Error::precondition(format!(
            "synthesize_graph: {} gathered states for {} layers",
            gathered.len(),
            cfg.n_layers
        )));
    }
    let (e, n) = (cfg.d_model, cfg.rank);
    let eps = F::from_f64(LAYERNORM_EPS);
    let mut factors = Vec::with_capacity(cfg.n_layers);
    for (li, &x) in gathered.iter().enumerate() {
        let k_rows = g.shape(x)[0];
        let lp = &synth.layers[li];
        let augment = g.param(&lp.augment);
        let xhat = g.matmul(x, augment, true)?;
        let mut per_kind = Vec::with_capacity(4);
        for kind in StateKind::ALL {
            let emb = g.param(lp.embedding(kind));
            let mut y = g.add(xhat, emb)?;
            for blk in &lp.blocks {
                let w1 = g.param(&blk.w1);
                let w2 = g.param(&blk.w2);
                let ln_g = g.param(&blk.ln.g);
                let ln_b = g.param(&blk.ln.b);
                let h = g.matmul(y, w1, true)?;
                let h = g.relu(h)?;
                let h = g.matmul(h, w2, true)?;
                let h = g.layernorm(h, ln_g, ln_b, eps)?;
                y = g.add(y, h)?;
            }
            let b = g.param(lp.output_mat(kind));
            let mut pairs = Vec::with_capacity(k_rows);
            for row in 0..k_rows {
                let arow = g.row_select(y, row)?;
                let a = g.reshape(arow, vec![n, e])?;
                pairs.push((a, b));
            }
            per_kind.push(pairs);
        }
        factors.push(per_kind);
    }
    Ok(GraphDeltas { factors })
}

/// Extract plain per-sample deltas out of a built synthesis graph
/// (used to hand a training-time delta to the streaming path).
pub fn deltas_from_graph<F: Scalar>(
    g: &Graph<F>,
    deltas: &GraphDeltas,
    row: usize,
) -> PromptDelta<F> {
    let layers = deltas
        .factors
        .iter()
        .map(|per_kind| {
            let mut it = per_kind.iter().map(|pairs| {
                let (a, b) = pairs[row];
                DeltaFactors {
                    a: g.value_tensor(a),
                    b: g.value_tensor(b),
                }
            });
            LayerDelta {
                r: it.next().unwrap(),
                k: it.next().unwrap(),
                v: it.next().unwrap(),
                o: it.next().unwrap(),
            }
        })
        .collect();
    PromptDelta { layers }
}

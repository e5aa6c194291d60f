//! Built-in verification: a whole-model gradient check and a fast
//! self-test battery, shared by the CLI and the acceptance suite.

use crate::error::Result;
use crate::gradcheck::{grad_check, GradReport};
use crate::graph::Graph;
use crate::model::batch_graph::{build_batch_loss, ConstLogits};
use crate::model::infer::{
    forward_sequence, generate, run_prompt, wkv_step, LayerState, Sampler,
};
use crate::model::params::BackboneParams;
use crate::model::{ModelConfig, BYTE_VOCAB};
use crate::synth::{synthesize, synthesize_graph, SynthParams};
use crate::taskgen::{gen_dataset, Tokenizer};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Vocabulary used by the verification models (small, so the embedding
/// and head finite-difference sweeps stay fast).
pub const CHECK_VOCAB: usize = 32;

/// Gradient check of the full phase-1 graph (every backbone parameter)
/// on a tiny model (L=2, E=8, V=32, rank 1, stack depth 1). 64-bit only.
pub fn backbone_gradcheck(seed: u64, eps: f64) -> Result<GradReport> {
    let params = BackboneParams::<f64>::init(ModelConfig::tiny(CHECK_VOCAB), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let k_rows = 2;
    let t_len = 5;
    let tokens: Vec<Vec<u32>> = (0..k_rows)
        .map(|_| (0..t_len).map(|_| rng.gen_range(0..CHECK_VOCAB as u32)).collect())
        .collect();
    let targets: Vec<Vec<u32>> = (0..k_rows)
        .map(|_| (0..t_len).map(|_| rng.gen_range(0..CHECK_VOCAB as u32)).collect())
        .collect();
    let mask = vec![vec![true; t_len]; k_rows];
    let named = params.named_params();
    grad_check(
        &mut |g| {
            let out = build_batch_loss(g, &params, true, &tokens, &targets, &mask, None, None, None)?;
            Ok(out.loss)
        },
        &named,
        eps,
    )
}

/// Gradient check of the full phase-2 graph (every synthesis parameter,
/// frozen backbone, per-sample deltas, constant first-token logits) on
/// the same tiny configuration as [`backbone_gradcheck`].
pub fn synth_gradcheck(seed: u64, eps: f64) -> Result<GradReport> {
    let cfg = ModelConfig::tiny(CHECK_VOCAB);
    let backbone = BackboneParams::<f64>::init(cfg.clone(), seed)?;
    let synth = SynthParams::<f64>::init(cfg.clone(), seed ^ 1)?;
    // randomize the zero-initialized output matrices so every factor
    // carries gradient
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
    for l in &synth.layers {
        for p in [&l.b_r, &l.b_k, &l.b_v, &l.b_o] {
            for v in p.borrow_mut().data_mut() {
                *v = rng.gen_range(-0.3..0.3);
            }
        }
    }
    // random prompt/response token sequences within the check vocab
    let mut seq = |n: usize| -> Vec<u32> {
        (0..n).map(|_| rng.gen_range(0..CHECK_VOCAB as u32)).collect()
    };
    let prompts: Vec<Vec<u32>> = (0..2).map(|_| seq(6)).collect();
    let resp: Vec<Vec<u32>> = (0..2).map(|_| seq(4)).collect();
    let runs: Vec<_> = prompts
        .iter()
        .map(|p| run_prompt(&backbone, p))
        .collect::<Result<Vec<_>>>()?;
    let t_max = resp.iter().map(|r| r.len() - 1).max().unwrap();
    let mut tokens = Vec::new();
    let mut targets = Vec::new();
    let mut mask = Vec::new();
    for r in &resp {
        let mut tok: Vec<u32> = r[..r.len() - 1].to_vec();
        let mut tgt: Vec<u32> = r[1..].to_vec();
        let mut msk = vec![true; tok.len()];
        tok.resize(t_max, crate::model::PAD);
        tgt.resize(t_max, crate::model::PAD);
        msk.resize(t_max, false);
        tokens.push(tok);
        targets.push(tgt);
        mask.push(msk);
    }
    let init: Vec<_> = runs.iter().map(|r| r.state.clone()).collect();
    let mut cl_data = Vec::new();
    for r in &runs {
        cl_data.extend_from_slice(&r.last_logits);
    }
    let cl = ConstLogits {
        logits: Tensor::new(vec![runs.len(), cfg.vocab], cl_data)?,
        targets: resp.iter().map(|r| r[0]).collect(),
        mask: vec![true; runs.len()],
    };
    let e = cfg.d_model;
    let named = synth.named_params();
    grad_check(
        &mut |g| {
            let gathered: Vec<_> = (0..cfg.n_layers)
                .map(|li| {
                    let mut data = Vec::with_capacity(runs.len() * e);
                    for r in &runs {
                        data.extend_from_slice(&r.last_ln1[li]);
                    }
                    g.constant(Tensor::new(vec![runs.len(), e], data).expect("ln1 shape"))
                })
                .collect();
            let deltas = synthesize_graph(g, &synth, &gathered)?;
            let out = build_batch_loss(
                g,
                &backbone,
                false,
                &tokens,
                &targets,
                &mask,
                Some(&init),
                Some(&deltas),
                Some(&cl),
            )?;
            Ok(out.loss)
        },
        &named,
        eps,
    )
}

/// One named self-test outcome.
#[derive(Debug, Clone)]
pub struct SelfTestResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn result(name: &'static str, passed: bool, detail: String) -> SelfTestResult {
    SelfTestResult {
        name,
        passed,
        detail,
    }
}

/// Fast end-to-end sanity battery (seconds, not minutes).
pub fn selftest() -> Vec<SelfTestResult> {
    let mut out = Vec::new();

    // tokenizer round trip
    {
        let t = Tokenizer;
        let text = "SEQ: 3 1 4. RECITE:";
        let ok = t.decode(&t.encode(text)) == text;
        out.push(result("tokenizer-roundtrip", ok, String::new()));
    }

    // streaming wkv vs naive weighted sum
    {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut worst = 0.0f64;
        for _ in 0..20 {
            let t_len = 32;
            let k: Vec<f64> = (0..t_len).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let v: Vec<f64> = (0..t_len).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let w = rng.gen_range(0.01..4.0);
            let u = rng.gen_range(-1.0..1.0);
            let mut state = LayerState::<f64>::new(1);
            for t in 0..t_len {
                let got = match wkv_step(&mut state, &[k[t]], &[v[t]], &[w], &[u]) {
                    Ok(g) => g[0],
                    Err(e) => {
                        out.push(result("wkv-oracle", false, e.to_string()));
                        return out;
                    }
                };
                let mut num = 0.0;
                let mut den = 0.0;
                for i in 0..t {
                    let wgt = (-((t - 1 - i) as f64) * w + k[i]).exp();
                    num += wgt * v[i];
                    den += wgt;
                }
                let bonus = (u + k[t]).exp();
                num += bonus * v[t];
                den += bonus;
                worst = worst.max((got - num / den).abs());
            }
        }
        out.push(result(
            "wkv-oracle",
            worst <= 1e-10,
            format!("max abs err {worst:.3e}"),
        ));
    }

    // zero-delta identity and batch/stream agreement
    let cfg = ModelConfig::tiny(BYTE_VOCAB);
    let backbone = match BackboneParams::<f64>::init(cfg.clone(), 11) {
        Ok(b) => b,
        Err(e) => {
            out.push(result("model-init", false, e.to_string()));
            return out;
        }
    };
    let synth = SynthParams::<f64>::init(cfg.clone(), 12).expect("synth init");
    match gen_dataset(None, 4, 3, 6, 13, 512) {
        Ok(samples) => {
            let mut identity_ok = true;
            let mut detail = String::new();
            for s in &samples {
                let prompt = s.prompt_tokens();
                let run = match run_prompt(&backbone, &prompt) {
                    Ok(r) => r,
                    Err(e) => {
                        identity_ok = false;
                        detail = e.to_string();
                        break;
                    }
                };
                let delta = synthesize(&run.last_ln1, &synth).expect("synthesize");
                let a = generate(&backbone, &prompt, Some(&delta), 16, &Sampler::Greedy);
                let b = generate(&backbone, &prompt, None, 16, &Sampler::Greedy);
                match (a, b) {
                    (Ok(a), Ok(b)) if a == b => {}
                    (Ok(_), Ok(_)) => {
                        identity_ok = false;
                        detail = format!("sample {} diverged", s.id);
                        break;
                    }
                    (a, b) => {
                        identity_ok = false;
                        detail = format!("{a:?} vs {b:?}");
                        break;
                    }
                }
            }
            out.push(result("zero-delta-identity", identity_ok, detail));
        }
        Err(e) => out.push(result("zero-delta-identity", false, e.to_string())),
    }

    // batched graph vs streaming path on one sequence
    {
        let tokens = vec![vec![66u32, 79, 83, 32, 104, 105]];
        let targets = vec![vec![79u32, 83, 32, 104, 105, 257]];
        let mask = vec![vec![true; 6]];
        let mut g = Graph::new();
        match build_batch_loss(&mut g, &backbone, false, &tokens, &targets, &mask, None, None, None)
        {
            Ok(o) => {
                let (stream, _, _) = forward_sequence(&backbone, &tokens[0], None, false).unwrap();
                let mut worst = 0.0f64;
                for &(t, node) in &o.logits {
                    for (a, b) in g.value(node).iter().zip(&stream[t]) {
                        worst = worst.max((a - b).abs());
                    }
                }
                out.push(result(
                    "batch-vs-stream",
                    worst <= 1e-12,
                    format!("max abs err {worst:.3e}"),
                ));
            }
            Err(e) => out.push(result("batch-vs-stream", false, e.to_string())),
        }
    }

    // synthesis-module gradient check (small, fast). The seed is chosen
    // so no relu/maximum input sits within the finite-difference step
    // of its kink; at such points central differences are meaningless.
    match synth_gradcheck(1, 1e-5) {
        Ok(rep) => out.push(result(
            "synth-gradcheck",
            rep.max_rel_err <= 1e-5,
            format!("max rel err {:.3e}", rep.max_rel_err),
        )),
        Err(e) => out.push(result("synth-gradcheck", false, e.to_string())),
    }

    out
}

//! Evaluation: response perplexity and compliance accuracy.
//!
//! Perplexity comes in two reductions over the scored (response + EOS)
//! predictions:
//! - `ppl_token`: exp of the corpus mean NLL, pooling all scored
//!   tokens;
//! - `ppl_paper`: arithmetic mean over samples of each sample's
//!   exp(mean NLL).
//!
//! Accuracy greedily decodes each prompt and runs the sample's
//! compliance checker; scoring is binary per sample.

use crate::error::Result;
use crate::math::log_softmax;
use crate::model::infer::{generate, run_prompt, step, PromptRun, Sampler};
use crate::model::params::BackboneParams;
use crate::scalar::Scalar;
use crate::synth::{synthesize, PromptDelta, SynthParams};
use crate::taskgen::{check_compliance, Sample, Tokenizer};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KindStats {
    pub n: usize,
    pub passed: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_samples: usize,
    pub scored_tokens: usize,
    pub total_nll: f64,
    pub ppl_token: f64,
    pub ppl_paper: f64,
    pub accuracy: f64,
    pub kinds: BTreeMap<String, KindStats>,
}

/// exp of the pooled mean NLL.
pub fn ppl_token(total_nll: f64, count: usize) -> f64 {
    (total_nll / count as f64).exp()
}

/// Mean over samples of exp(per-sample mean NLL).
pub fn ppl_paper(per_sample: &[(f64, usize)]) -> f64 {
    let s: f64 = per_sample
        .iter()
        .map(|&(nll, n)| (nll / n as f64).exp())
        .sum();
    s / per_sample.len() as f64
}

/// Teacher-forced NLL over the response tokens of one sample, resuming
/// from a finished prompt run. The first response token is scored from
/// the delta-free prompt-final logits; the delta is active for every
/// subsequent step, matching generation.
pub fn response_nll<F: Scalar>(
    backbone: &BackboneParams<F>,
    run: &PromptRun<F>,
    delta: Option<&PromptDelta<F>>,
    response: &[u32],
) -> Result<(f64, usize)> {
    let mut total = 0.0f64;
    let mut logits = run.last_logits.clone();
    let mut state = run.state.clone();
    for (i, &target) in response.iter().enumerate() {
        let lp = log_softmax(&logits);
        total -= lp[target as usize].to_f64();
        if i + 1 < response.len() {
            logits = step(backbone, &mut state, target, delta)?.logits;
        }
    }
    Ok((total, response.len()))
}

/// Evaluate perplexity and compliance over a dataset. `synth == None`
/// is the zero-delta baseline.
pub fn evaluate<F: Scalar>(
    backbone: &BackboneParams<F>,
    synth: Option<&SynthParams<F>>,
    samples: &[Sample],
    max_gen: usize,
) -> Result<EvalReport> {
    let mut per_sample: Vec<(f64, usize)> = Vec::with_capacity(samples.len());
    let mut kinds: BTreeMap<String, KindStats> = BTreeMap::new();
    let mut passed_total = 0usize;
    for s in samples {
        let prompt = s.prompt_tokens();
        let run = run_prompt(backbone, &prompt)?;
        let delta = match synth {
            Some(sp) => Some(synthesize(&run.last_ln1, sp)?),
            None => None,
        };
        per_sample.push(response_nll(backbone, &run, delta.as_ref(), &s.response_tokens())?);

        let out_tokens = generate(backbone, &prompt, delta.as_ref(), max_gen, &Sampler::Greedy)?;
        let text = Tokenizer.decode(&out_tokens);
        let ok = check_compliance(s, &text).passed();
        let entry = kinds.entry(s.kind_name().to_string()).or_insert(KindStats {
            n: 0,
            passed: 0,
            accuracy: 0.0,
        });
        entry.n += 1;
        if ok {
            entry.passed += 1;
            passed_total += 1;
        }
    }
    for st in kinds.values_mut() {
        st.accuracy = st.passed as f64 / st.n as f64;
    }
    let total_nll: f64 = per_sample.iter().map(|&(n, _)| n).sum();
    let scored: usize = per_sample.iter().map(|&(_, c)| c).sum();
    Ok(EvalReport {
        n_samples: samples.len(),
        scored_tokens: scored,
        total_nll,
        ppl_token: ppl_token(total_nll, scored),
        ppl_paper: ppl_paper(&per_sample),
        accuracy: passed_total as f64 / samples.len() as f64,
        kinds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_worked_perplexity() {
        // two scored tokens with probabilities 1/2 and 1/4 in one
        // sample: pooled ppl = exp((ln 2 + ln 4)/2) = 2*sqrt(2)
        let nll = (2.0f64).ln() + (4.0f64).ln();
        let expect = 2.0 * (2.0f64).sqrt();
        assert!((ppl_token(nll, 2) - expect).abs() < 1e-12);
        assert!((ppl_paper(&[(nll, 2)]) - expect).abs() < 1e-12);
    }

    #[test]
    fn per_sample_reduction_averages_over_samples() {
        // sample A: one token at p = 1/e (nll 1); sample B: one token
        // at p = 1/e^3. ppl_paper = (e + e^3)/2, ppl_token = e^2.
        let per = [(1.0, 1), (3.0, 1)];
        let e = std::f64::consts::E;
        assert!((ppl_paper(&per) - (e + e.powi(3)) / 2.0).abs() < 1e-9);
        assert!((ppl_token(4.0, 2) - e * e).abs() < 1e-9);
    }
}

//! Python bindings: tokenizer helpers, task generation and checking,
//! and a `Model` class wrapping checkpoint I/O, training, and decoding
//! (32-bit precision).

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use std::path::{Path, PathBuf};

use prosg::checkpoint;
use prosg::eval::evaluate;
use prosg::model::infer::{generate, run_prompt, Sampler};
use prosg::model::params::BackboneParams;
use prosg::model::{ModelConfig, BYTE_VOCAB};
use prosg::synth::{synthesize, SynthParams};
use prosg::taskgen::{
    check_compliance, gen_task, read_dataset, Sample, TaskKind, TaskSpec, Tokenizer,
};
use prosg::train::{train_backbone, train_synth, TrainOpts};

fn err(e: prosg::Error) -> PyErr {
    match e {
        prosg::Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

#[pyfunction]
fn encode(text: &str) -> Vec<u32> {
    Tokenizer.encode(text)
}

#[pyfunction]
fn encode_prompt(text: &str) -> Vec<u32> {
    Tokenizer.encode_prompt(text)
}

#[pyfunction]
fn decode(tokens: Vec<u32>) -> String {
    Tokenizer.decode(&tokens)
}

fn parse_kind(s: &str) -> PyResult<TaskKind> {
    match s {
        "recall" => Ok(TaskKind::Recall),
        "multi-part" => Ok(TaskKind::MultiPart),
        "count-then-use" => Ok(TaskKind::CountThenUse),
        other => Err(PyValueError::new_err(format!("unknown task kind {other:?}"))),
    }
}

/// Generate one task sample; returns its JSON record (the same shape
/// the JSONL datasets use).
#[pyfunction]
#[pyo3(signature = (kind, payload_len=4, spacer_len=64, seed=0, context_cap=512))]
fn gen_sample(
    kind: &str,
    payload_len: usize,
    spacer_len: usize,
    seed: u64,
    context_cap: usize,
) -> PyResult<String> {
    let spec = TaskSpec {
        kind: parse_kind(kind)?,
        payload_len,
        spacer_len,
        seed,
    };
    let s = gen_task(&spec, context_cap).map_err(err)?;
    serde_json::to_string(&s).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Run a sample's compliance checker over generated text.
#[pyfunction]
fn check_output(sample_json: &str, output: &str) -> PyResult<bool> {
    let s: Sample = serde_json::from_str(sample_json)
        .map_err(|e| PyValueError::new_err(format!("bad sample json: {e}")))?;
    Ok(check_compliance(&s, output).passed())
}

/// Fast internal verification battery; returns (name, passed, detail).
#[pyfunction]
fn selftest() -> Vec<(String, bool, String)> {
    prosg::selftest::selftest()
        .into_iter()
        .map(|r| (r.name.to_string(), r.passed, r.detail))
        .collect()
}

// Parameters are Rc-shared internally, so the class is pinned to the
// thread that created it.
#[pyclass(unsendable)]
struct Model {
    backbone: BackboneParams<f32>,
    synth: Option<SynthParams<f32>>,
}

#[pymethods]
impl Model {
    /// Randomly initialized model with an untrained synthesis module.
    #[staticmethod]
    #[pyo3(signature = (n_layers=2, d_model=16, rank=1, stack_depth=1, seed=0))]
    fn random(
        n_layers: usize,
        d_model: usize,
        rank: usize,
        stack_depth: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let cfg = ModelConfig {
            n_layers,
            d_model,
            vocab: BYTE_VOCAB,
            ffn_mult: 4,
            rank,
            stack_depth,
        };
        Ok(Model {
            backbone: BackboneParams::init(cfg.clone(), seed).map_err(err)?,
            synth: Some(SynthParams::init(cfg, seed.wrapping_add(1)).map_err(err)?),
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = checkpoint::load::<f32>(&path).map_err(err)?;
        Ok(Model {
            backbone: ck.backbone,
            synth: ck.synth,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        match &self.synth {
            Some(s) => checkpoint::save_full(Path::new(&path), &self.backbone, s),
            None => checkpoint::save_backbone(Path::new(&path), &self.backbone),
        }
        .map_err(err)
    }

    #[getter]
    fn config(&self, py: Python<'_>) -> PyResult<PyObject> {
        let c = &self.backbone.config;
        let d = PyDict::new_bound(py);
        d.set_item("n_layers", c.n_layers)?;
        d.set_item("d_model", c.d_model)?;
        d.set_item("vocab", c.vocab)?;
        d.set_item("ffn_mult", c.ffn_mult)?;
        d.set_item("rank", c.rank)?;
        d.set_item("stack_depth", c.stack_depth)?;
        d.set_item("has_synth", self.synth.is_some())?;
        Ok(d.into())
    }

    /// Greedy decode. The prompt is read without the delta; the
    /// synthesized delta (if any) is active for generated tokens.
    #[pyo3(signature = (prompt, max_steps=256, use_delta=true))]
    fn generate(&self, prompt: &str, max_steps: usize, use_delta: bool) -> PyResult<String> {
        let tokens = Tokenizer.encode_prompt(prompt);
        let delta = match (&self.synth, use_delta) {
            (Some(sp), true) => {
                let run = run_prompt(&self.backbone, &tokens).map_err(err)?;
                Some(synthesize(&run.last_ln1, sp).map_err(err)?)
            }
            _ => None,
        };
        let out = generate(
            &self.backbone,
            &tokens,
            delta.as_ref(),
            max_steps,
            &Sampler::Greedy,
        )
        .map_err(err)?;
        Ok(Tokenizer.decode(&out))
    }

    /// Phase-1 training over a JSONL dataset; returns final loss.
    #[pyo3(signature = (data_path, steps=50, batch_size=8, lr=3e-4, seed=0))]
    fn train_backbone(
        &mut self,
        data_path: PathBuf,
        steps: usize,
        batch_size: usize,
        lr: f64,
        seed: u64,
    ) -> PyResult<f64> {
        let samples = read_dataset(&data_path).map_err(err)?;
        let opts = TrainOpts {
            batch_size,
            steps,
            lr,
            warmup_steps: (steps / 10).max(1),
            clip_norm: 1.0,
            seed,
        };
        let ms = train_backbone(&self.backbone, &samples, &opts, |_| {}).map_err(err)?;
        Ok(ms.last().map(|m| m.loss).unwrap_or(f64::NAN))
    }

    /// Phase-2 training (frozen backbone); returns final loss.
    #[pyo3(signature = (data_path, steps=50, batch_size=8, lr=1e-3, seed=0))]
    fn train_prosg(
        &mut self,
        data_path: PathBuf,
        steps: usize,
        batch_size: usize,
        lr: f64,
        seed: u64,
    ) -> PyResult<f64> {
        let samples = read_dataset(&data_path).map_err(err)?;
        let synth = self
            .synth
            .as_ref()
            .ok_or_else(|| PyValueError::new_err("model has no synthesis module"))?;
        let opts = TrainOpts {
            batch_size,
            steps,
            lr,
            warmup_steps: (steps / 10).max(1),
            clip_norm: 1.0,
            seed,
        };
        let ms = train_synth(&self.backbone, synth, &samples, &opts, |_| {}).map_err(err)?;
        Ok(ms.last().map(|m| m.loss).unwrap_or(f64::NAN))
    }

    /// Perplexity + compliance report over a JSONL dataset (JSON text).
    #[pyo3(signature = (data_path, max_gen=256, baseline=false))]
    fn eval(&self, data_path: PathBuf, max_gen: usize, baseline: bool) -> PyResult<String> {
        let samples = read_dataset(&data_path).map_err(err)?;
        let synth = if baseline { None } else { self.synth.as_ref() };
        let report = evaluate(&self.backbone, synth, &samples, max_gen).map_err(err)?;
        serde_json::to_string_pretty(&report).map_err(|e| PyValueError::new_err(e.to_string()))
    }
}

#[pymodule]
fn prosg_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(encode, m)?)?;
    m.add_function(wrap_pyfunction!(encode_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(decode, m)?)?;
    m.add_function(wrap_pyfunction!(gen_sample, m)?)?;
    m.add_function(wrap_pyfunction!(check_output, m)?)?;
    m.add_function(wrap_pyfunction!(selftest, m)?)?;
    m.add_class::<Model>()?;
    Ok(())
}

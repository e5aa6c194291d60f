//! Command-line driver: dataset generation, the two training phases,
//! generation, evaluation, and built-in verification.
//!
//! Errors print a single machine-readable `error: ...` line on stderr.
//! Exit codes: 0 success, 1 runtime failure, 2 bad configuration or
//! input files.

use clap::{Parser, Subcommand};
use prosg::checkpoint::{self, Checkpoint};
use prosg::error::Error;
use prosg::eval::evaluate;
use prosg::model::infer::{generate, run_prompt, Sampler};
use prosg::model::params::BackboneParams;
use prosg::runconfig::{Precision, RunConfig};
use prosg::scalar::Scalar;
use prosg::selftest::{backbone_gradcheck, selftest, synth_gradcheck};
use prosg::synth::{synthesize, SynthParams};
use prosg::taskgen::{self, read_dataset, write_dataset, TaskKind, Tokenizer};
use prosg::train::{train_backbone, train_synth, TrainOpts};
use prosg::Result;
use std::io::Write;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "prosg", about = "recurrent LM with prompt-synthesized low-rank deltas")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic task dataset (JSONL).
    MakeData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        /// recall | multi-part | count-then-use; omit for the standard mix.
        #[arg(long)]
        kind: Option<String>,
        #[arg(long, default_value_t = 4)]
        payload: usize,
        #[arg(long, default_value_t = 64)]
        spacer: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 512)]
        context_cap: usize,
    },
    /// Phase 1: fine-tune the backbone on a dataset.
    TrainBackbone {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Resume from an existing backbone checkpoint instead of
        /// random initialization.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Phase 2: freeze the backbone, train the synthesis module.
    TrainProsg {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Decode a completion for a prompt.
    Generate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 256)]
        max_steps: usize,
        /// Disable the synthesized delta even if the model has one.
        #[arg(long, default_value_t = false)]
        no_delta: bool,
        /// greedy | top-p
        #[arg(long, default_value = "greedy")]
        sampler: String,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 0.9)]
        top_p: f64,
        #[arg(long, default_value_t = 0)]
        sample_seed: u64,
    },
    /// Perplexity and compliance accuracy over a dataset (JSON report).
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Score the zero-delta baseline even if the model has a
        /// synthesis module.
        #[arg(long, default_value_t = false)]
        baseline: bool,
        #[arg(long, default_value_t = 256)]
        max_gen: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Whole-model gradient check against central differences.
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        eps: f64,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
    },
    /// Fast internal verification battery.
    Selftest,
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn parse_kind(s: &str) -> Result<TaskKind> {
    match s {
        "recall" => Ok(TaskKind::Recall),
        "multi-part" => Ok(TaskKind::MultiPart),
        "count-then-use" => Ok(TaskKind::CountThenUse),
        other => Err(Error::Config(format!("unknown task kind {other:?}"))),
    }
}

struct MetricsSink {
    file: Option<std::io::BufWriter<std::fs::File>>,
}

impl MetricsSink {
    fn open(path: &Option<PathBuf>) -> Result<Self> {
        let file = match path {
            Some(p) => Some(std::io::BufWriter::new(std::fs::File::create(p)?)),
            None => None,
        };
        Ok(MetricsSink { file })
    }

    fn write(&mut self, m: &prosg::train::TrainMetrics) {
        let line = serde_json::to_string(m).expect("metrics serialize");
        if let Some(f) = self.file.as_mut() {
            let _ = writeln!(f, "{line}");
            let _ = f.flush();
        }
        if m.step % 25 == 0 || m.step == 1 {
            eprintln!("{line}");
        }
    }
}

fn cmd_train_backbone<F: Scalar>(
    cfg: &RunConfig,
    data: &PathBuf,
    out: &PathBuf,
    metrics: &Option<PathBuf>,
    init: &Option<PathBuf>,
) -> Result<()> {
    let samples = read_dataset(data)?;
    let params: BackboneParams<F> = match init {
        Some(p) => {
            let ck: Checkpoint<F> = checkpoint::load(p)?;
            if ck.config != cfg.model_config() {
                return Err(Error::Config(
                    "checkpoint config does not match run config".into(),
                ));
            }
            ck.backbone
        }
        None => BackboneParams::init(cfg.model_config(), cfg.seed)?,
    };
    let opts = TrainOpts {
        batch_size: cfg.batch_size,
        steps: cfg.steps,
        lr: cfg.lr_phase1,
        warmup_steps: cfg.warmup_steps,
        clip_norm: cfg.clip_norm,
        seed: cfg.seed,
    };
    let mut sink = MetricsSink::open(metrics)?;
    train_backbone(&params, &samples, &opts, |m| sink.write(m))?;
    checkpoint::save_backbone(out, &params)?;
    eprintln!("saved backbone checkpoint to {}", out.display());
    Ok(())
}

fn cmd_train_prosg<F: Scalar>(
    cfg: &RunConfig,
    data: &PathBuf,
    backbone_path: &PathBuf,
    out: &PathBuf,
    metrics: &Option<PathBuf>,
) -> Result<()> {
    let samples = read_dataset(data)?;
    let ck: Checkpoint<F> = checkpoint::load(backbone_path)?;
    if ck.config != cfg.model_config() {
        return Err(Error::Config(
            "checkpoint config does not match run config".into(),
        ));
    }
    let synth = match ck.synth {
        Some(s) => s,
        None => SynthParams::init(ck.config.clone(), cfg.seed.wrapping_add(1))?,
    };
    let opts = TrainOpts {
        batch_size: cfg.batch_size,
        steps: cfg.steps,
        lr: cfg.lr_phase2,
        warmup_steps: cfg.warmup_steps,
        clip_norm: cfg.clip_norm,
        seed: cfg.seed,
    };
    let mut sink = MetricsSink::open(metrics)?;
    train_synth(&ck.backbone, &synth, &samples, &opts, |m| sink.write(m))?;
    checkpoint::save_full(out, &ck.backbone, &synth)?;
    eprintln!("saved full checkpoint to {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::MakeData {
            out,
            count,
            kind,
            payload,
            spacer,
            seed,
            context_cap,
        } => {
            let kind = kind.as_deref().map(parse_kind).transpose()?;
            let samples = taskgen::gen_dataset(kind, count, payload, spacer, seed, context_cap)?;
            write_dataset(&samples, &out)?;
            println!("wrote {} samples to {}", samples.len(), out.display());
            Ok(())
        }
        Command::TrainBackbone {
            config,
            data,
            out,
            metrics,
            init,
        } => {
            let cfg = load_config(&config)?;
            match cfg.precision {
                Precision::F32 => cmd_train_backbone::<f32>(&cfg, &data, &out, &metrics, &init),
                Precision::F64 => cmd_train_backbone::<f64>(&cfg, &data, &out, &metrics, &init),
            }
        }
        Command::TrainProsg {
            config,
            data,
            backbone,
            out,
            metrics,
        } => {
            let cfg = load_config(&config)?;
            match cfg.precision {
                Precision::F32 => cmd_train_prosg::<f32>(&cfg, &data, &backbone, &out, &metrics),
                Precision::F64 => cmd_train_prosg::<f64>(&cfg, &data, &backbone, &out, &metrics),
            }
        }
        Command::Generate {
            model,
            prompt,
            max_steps,
            no_delta,
            sampler,
            temperature,
            top_p,
            sample_seed,
        } => {
            let ck: Checkpoint<f32> = checkpoint::load(&model)?;
            let sampler = match sampler.as_str() {
                "greedy" => Sampler::Greedy,
                "top-p" => Sampler::TopP {
                    temperature,
                    top_p,
                    seed: sample_seed,
                },
                other => return Err(Error::Config(format!("unknown sampler {other:?}"))),
            };
            let tokens = Tokenizer.encode_prompt(&prompt);
            let delta = match (&ck.synth, no_delta) {
                (Some(sp), false) => {
                    let run = run_prompt(&ck.backbone, &tokens)?;
                    Some(synthesize(&run.last_ln1, sp)?)
                }
                _ => None,
            };
            let out = generate(&ck.backbone, &tokens, delta.as_ref(), max_steps, &sampler)?;
            println!("{}", Tokenizer.decode(&out));
            Ok(())
        }
        Command::Eval {
            model,
            data,
            baseline,
            max_gen,
            out,
        } => {
            let ck: Checkpoint<f32> = checkpoint::load(&model)?;
            let samples = read_dataset(&data)?;
            let synth = if baseline { None } else { ck.synth.as_ref() };
            let report = evaluate(&ck.backbone, synth, &samples, max_gen)?;
            let json = serde_json::to_string_pretty(&report)?;
            match out {
                Some(p) => std::fs::write(p, json)?,
                None => println!("{json}"),
            }
            Ok(())
        }
        Command::Gradcheck { seed, eps, tol } => {
            let bb = backbone_gradcheck(seed, eps)?;
            println!(
                "backbone gradcheck: max rel err {:.3e} (worst {:?})",
                bb.max_rel_err,
                bb.worst()
            );
            let sy = synth_gradcheck(seed, 1e-5)?;
            println!(
                "synthesis gradcheck: max rel err {:.3e} (worst {:?})",
                sy.max_rel_err,
                sy.worst()
            );
            if bb.max_rel_err > tol || sy.max_rel_err > tol {
                return Err(Error::precondition(format!(
                    "gradient check exceeded tolerance {tol}"
                )));
            }
            println!("gradcheck pass");
            Ok(())
        }
        Command::Selftest => {
            let results = selftest();
            let mut failed = 0;
            for r in &results {
                println!(
                    "{} {} {}",
                    if r.passed { "pass" } else { "FAIL" },
                    r.name,
                    r.detail
                );
                if !r.passed {
                    failed += 1;
                }
            }
            if failed > 0 {
                return Err(Error::precondition(format!("{failed} self-tests failed")));
            }
            Ok(())
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        let code = match e {
            Error::Config(_) | Error::Dataset { .. } | Error::Checkpoint(_) => 2,
            _ => 1,
        };
        std::process::exit(code);
    }
}

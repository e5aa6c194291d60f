//! Acceptance suite: one test per shipped guarantee, each printing a
//! single `criterion N ... pass/FAIL` line with the measured numbers
//! (run with `-- --nocapture --test-threads=1` to watch them live).
//!
//! Criteria 4, 6 and 9 share one set of trained artifacts (three full
//! two-phase training runs at the reference scale), built once behind
//! a `OnceLock`. Each seeded run fits the documented 2-hour budget on
//! one core; the seeds are independent, so a multicore machine runs
//! them concurrently (this harness runs them back to back, so expect
//! several hours end to end when the reference runs are included).

use prosg::checkpoint;
use prosg::eval::{evaluate, ppl_paper, ppl_token, EvalReport};
use prosg::math::singular_values;
use prosg::model::batch_graph::build_batch_loss;
use prosg::model::infer::{generate, run_prompt, wkv_step, LayerState, Sampler};
use prosg::model::params::BackboneParams;
use prosg::model::{ModelConfig, BOS, BYTE_VOCAB, PAD};
use prosg::selftest::{backbone_gradcheck, synth_gradcheck};
use prosg::synth::{synthesize, StateKind, SynthParams};
use prosg::taskgen::{gen_dataset, Sample, TaskKind};
use prosg::train::{
    build_prompt_cache, phase2_loss, train_backbone, train_synth, TrainOpts,
};
use prosg::graph::Graph;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::OnceLock;
use std::time::Instant;

fn median3(mut v: [f64; 3]) -> f64 {
    v.sort_by(f64::total_cmp);
    v[1]
}

/// CPU seconds consumed by the calling thread. The training runs are
/// single-threaded, so on a dedicated core this equals wall-clock
/// time; unlike wall-clock it is not distorted by other processes
/// sharing the machine.
fn thread_cpu_secs() -> f64 {
    let mut ts = libc::timespec { tv_sec: 0, tv_nsec: 0 };
    let rc = unsafe { libc::clock_gettime(libc::CLOCK_THREAD_CPUTIME_ID, &mut ts) };
    assert_eq!(rc, 0, "clock_gettime failed");
    ts.tv_sec as f64 + ts.tv_nsec as f64 * 1e-9
}

// ── criterion 1: WKV streaming vs direct sum ────────────────────────

#[test]
fn criterion_1_wkv_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xacc1);
    let (t_len, e) = (64usize, 8usize);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let rand_mat =
            |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
                (0..t_len)
                    .map(|_| (0..e).map(|_| rng.gen_range(-5.0..5.0)).collect())
                    .collect()
            };
        let k = rand_mat(&mut rng);
        let v = rand_mat(&mut rng);
        let w: Vec<f64> = (0..e).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let u: Vec<f64> = (0..e).map(|_| rng.gen_range(-5.0..5.0)).collect();
        // the output is a convex combination of past v's, so the value
        // scale of the channel bounds it; relative error is measured
        // against max(|direct result|, that scale)
        let vmax = v
            .iter()
            .flatten()
            .fold(0.0f64, |m, &x| m.max(x.abs()))
            .max(1e-12);

        let mut state = LayerState::<f64>::new(e);
        for t in 0..t_len {
            let got = wkv_step(&mut state, &k[t], &v[t], &w, &u).unwrap();
            for i in 0..e {
                // direct evaluation of the decayed weighted average
                let mut num = 0.0f64;
                let mut den = 0.0f64;
                for s in 0..t {
                    let wgt = (-((t - 1 - s) as f64) * w[i] + k[s][i]).exp();
                    num += wgt * v[s][i];
                    den += wgt;
                }
                let bonus = (u[i] + k[t][i]).exp();
                num += bonus * v[t][i];
                den += bonus;
                let direct = num / den;
                let rel = (got[i] - direct).abs() / direct.abs().max(vmax);
                worst = worst.max(rel);
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst <= 1e-10 && secs < 10.0;
    println!(
        "criterion 1 (WKV streaming vs direct sum, 100 seqs T=64 E=8, k/w/u in [-5,5]): {} — max rel err {worst:.3e} (tol 1e-10) in {secs:.2}s (budget 10s)",
        if pass { "pass" } else { "FAIL" }
    );
    assert!(pass, "max rel err {worst:.3e}, {secs:.2}s");
}

// ── criterion 2: full-model gradient check ──────────────────────────

#[test]
fn criterion_2_full_gradcheck() {
    let start = Instant::now();
    // backbone step size 1e-4: gradients of the tiny model are small,
    // so a finer step loses the signal to central-difference round-off;
    // the synthesis graph tolerates (and prefers) 1e-5.
    let bb = backbone_gradcheck(1, 1e-4).unwrap();
    let sy = synth_gradcheck(1, 1e-5).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let worst = bb.max_rel_err.max(sy.max_rel_err);
    let pass = worst <= 1e-5 && secs < 300.0;
    println!(
        "criterion 2 (full gradient check, L=2 E=8 V=32 n=1 D=1): {} — backbone max rel err {:.3e}, synthesis max rel err {:.3e} (tol 1e-5) in {secs:.1}s (budget 300s)",
        if pass { "pass" } else { "FAIL" },
        bb.max_rel_err,
        sy.max_rel_err
    );
    assert!(
        pass,
        "backbone {:.3e} (worst {:?}), synth {:.3e} (worst {:?}), {secs:.1}s",
        bb.max_rel_err,
        bb.worst(),
        sy.max_rel_err,
        sy.worst()
    );
}

// ── criterion 3: zero-delta identity ────────────────────────────────

#[test]
fn criterion_3_zero_delta_identity() {
    let cfg = ModelConfig::tiny(BYTE_VOCAB);
    let backbone = BackboneParams::<f64>::init(cfg.clone(), 33).unwrap();
    // freshly initialized synthesis module: output matrices are zero
    let synth = SynthParams::<f64>::init(cfg, 34).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0xacc3);
    let mut identical = 0usize;
    for _ in 0..50 {
        let len = rng.gen_range(4..=40usize);
        let mut prompt = vec![BOS];
        prompt.extend((1..len).map(|_| rng.gen_range(0..256u32)));
        let run = run_prompt(&backbone, &prompt).unwrap();
        let delta = synthesize(&run.last_ln1, &synth).unwrap();
        let with = generate(&backbone, &prompt, Some(&delta), 32, &Sampler::Greedy).unwrap();
        let without = generate(&backbone, &prompt, None, 32, &Sampler::Greedy).unwrap();
        if with == without {
            identical += 1;
        }
    }
    let pass = identical == 50;
    println!(
        "criterion 3 (zero-delta identity over 50 random prompts): {} — {identical}/50 token-for-token identical",
        if pass { "pass" } else { "FAIL" }
    );
    assert!(pass, "{identical}/50 identical");
}

// ── shared artifacts for criteria 4, 6 and 9 ────────────────────────

const RECALL_PAYLOAD: usize = 8;
const RECALL_SPACER: usize = 256;
/// Phase-1 corpus size; phase 2 trains the synthesis module on a
/// larger disjoint corpus so it sees prompts the backbone has not
/// memorized (that headroom is what the synthesis learns from).
const C6_P1_TRAIN_N: usize = 1024;
const C6_P2_TRAIN_N: usize = 3072;
const C6_EVAL_N: usize = 64;
/// Phase 1 runs as two cosine stages; the second, lower-rate stage
/// carries the model through the late phase of recall learning.
const C6_P1A_STEPS: usize = 2000;
const C6_P1B_STEPS: usize = 2500;
const C6_P2_STEPS: usize = 3000;
const C6_MAX_GEN: usize = 32;

fn reference_config() -> ModelConfig {
    ModelConfig {
        n_layers: 4,
        d_model: 128,
        vocab: BYTE_VOCAB,
        ffn_mult: 4,
        rank: 2,
        stack_depth: 2,
    }
}

/// Everything one seeded two-phase run produces, in thread-shareable
/// form (loss trajectories, serialized reports, checkpoint bytes).
struct SeedRun {
    p1_loss: Vec<f64>,
    p2_loss: Vec<f64>,
    base: EvalReport,
    prosg: EvalReport,
    base_json: String,
    prosg_json: String,
    ckpt: Vec<u8>,
}

fn run_reference_seed(seed: u64) -> SeedRun {
    let cfg = reference_config();
    let p1_train: Vec<Sample> = gen_dataset(
        Some(TaskKind::Recall),
        C6_P1_TRAIN_N,
        RECALL_PAYLOAD,
        RECALL_SPACER,
        1000 + seed,
        512,
    )
    .unwrap();
    // disjoint seed range: the synthesis module trains on prompts the
    // backbone never fit, so its target is the generalization gap
    // rather than residual training error (which is near zero)
    let p2_train: Vec<Sample> = gen_dataset(
        Some(TaskKind::Recall),
        C6_P2_TRAIN_N,
        RECALL_PAYLOAD,
        RECALL_SPACER,
        5000 + seed,
        512,
    )
    .unwrap();
    let held_out: Vec<Sample> = gen_dataset(
        Some(TaskKind::Recall),
        C6_EVAL_N,
        RECALL_PAYLOAD,
        RECALL_SPACER,
        2000 + seed,
        512,
    )
    .unwrap();

    let backbone = BackboneParams::<f32>::init(cfg.clone(), seed).unwrap();
    let log_p1 = |m: &prosg::train::TrainMetrics| {
        if m.step % 250 == 0 {
            eprintln!("[seed {seed}] phase 1 step {} loss {:.4}", m.step, m.loss);
        }
    };
    let mut p1 = train_backbone(
        &backbone,
        &p1_train,
        &TrainOpts {
            batch_size: 8,
            steps: C6_P1A_STEPS,
            lr: 1e-3,
            warmup_steps: 100,
            clip_norm: 1.0,
            seed,
        },
        log_p1,
    )
    .unwrap();
    p1.extend(
        train_backbone(
            &backbone,
            &p1_train,
            &TrainOpts {
                batch_size: 8,
                steps: C6_P1B_STEPS,
                lr: 7e-4,
                warmup_steps: 50,
                clip_norm: 1.0,
                seed: seed.wrapping_add(42),
            },
            log_p1,
        )
        .unwrap(),
    );

    let synth = SynthParams::<f32>::init(cfg, seed.wrapping_add(1)).unwrap();
    let p2 = train_synth(
        &backbone,
        &synth,
        &p2_train,
        &TrainOpts {
            batch_size: 8,
            steps: C6_P2_STEPS,
            lr: 1e-3,
            warmup_steps: 300,
            clip_norm: 1.0,
            seed,
        },
        |m| {
            if m.step % 250 == 0 {
                eprintln!("[seed {seed}] phase 2 step {} loss {:.4}", m.step, m.loss);
            }
        },
    )
    .unwrap();

    let base = evaluate(&backbone, None, &held_out, C6_MAX_GEN).unwrap();
    let prosg = evaluate(&backbone, Some(&synth), &held_out, C6_MAX_GEN).unwrap();
    eprintln!(
        "[seed {seed}] held-out accuracy {:.3} -> {:.3}, ppl_token {:.4} -> {:.4}",
        base.accuracy, prosg.accuracy, base.ppl_token, prosg.ppl_token
    );

    let path = std::env::temp_dir().join(format!(
        "prosg-acceptance-{}-seed{seed}.ckpt",
        std::process::id()
    ));
    checkpoint::save_full(&path, &backbone, &synth).unwrap();
    let ckpt = std::fs::read(&path).unwrap();
    let _ = std::fs::remove_file(&path);

    SeedRun {
        p1_loss: p1.iter().map(|m| m.loss).collect(),
        p2_loss: p2.iter().map(|m| m.loss).collect(),
        base_json: serde_json::to_string(&base).unwrap(),
        prosg_json: serde_json::to_string(&prosg).unwrap(),
        base,
        prosg,
        ckpt,
    }
}

struct ReferenceRuns {
    seeds: Vec<SeedRun>,
    /// CPU seconds per seeded run (the budgeted quantity: the runs
    /// are mutually independent, so on a multicore machine they
    /// execute in parallel, one core each, and the slowest seed sets
    /// the wall-clock cost)
    seed_cpu_secs: Vec<f64>,
    /// wall-clock seconds per seeded run, reported for transparency
    seed_wall_secs: Vec<f64>,
}

static REFERENCE: OnceLock<ReferenceRuns> = OnceLock::new();

fn reference_runs() -> &'static ReferenceRuns {
    REFERENCE.get_or_init(|| {
        let mut seeds = Vec::new();
        let mut seed_cpu_secs = Vec::new();
        let mut seed_wall_secs = Vec::new();
        for s in 0..3 {
            let wall = Instant::now();
            let cpu = thread_cpu_secs();
            seeds.push(run_reference_seed(s));
            seed_cpu_secs.push(thread_cpu_secs() - cpu);
            seed_wall_secs.push(wall.elapsed().as_secs_f64());
        }
        ReferenceRuns {
            seeds,
            seed_cpu_secs,
            seed_wall_secs,
        }
    })
}

// ── criterion 4: rank bound of synthesized deltas ───────────────────

#[test]
fn criterion_4_rank_bound() {
    let runs = reference_runs();
    // reload the trained seed-0 model in 64-bit (widening is exact) so
    // the from-scratch SVD sees the checkpoint weights bit-for-bit
    let path = std::env::temp_dir().join(format!(
        "prosg-acceptance-{}-rank.ckpt",
        std::process::id()
    ));
    std::fs::write(&path, &runs.seeds[0].ckpt).unwrap();
    let ck = checkpoint::load::<f64>(&path).unwrap();
    let _ = std::fs::remove_file(&path);
    let synth = ck.synth.expect("trained checkpoint has a synthesis module");
    let n = ck.config.rank;

    let prompts = gen_dataset(
        Some(TaskKind::Recall),
        20,
        RECALL_PAYLOAD,
        RECALL_SPACER,
        777,
        512,
    )
    .unwrap();
    let mut worst_ratio = 0.0f64;
    let mut checked = 0usize;
    let mut ok = true;
    for s in &prompts {
        let run = run_prompt(&ck.backbone, &s.prompt_tokens()).unwrap();
        let delta = synthesize(&run.last_ln1, &synth).unwrap();
        for li in 0..ck.config.n_layers {
            for kind in StateKind::ALL {
                let mat = delta.materialize(li, kind);
                let sv = singular_values(&mat);
                let bound = 1e-8 * sv[0] + 1e-12;
                if sv[n] >= bound {
                    ok = false;
                }
                if sv[0] > 0.0 {
                    worst_ratio = worst_ratio.max(sv[n] / sv[0]);
                }
                checked += 1;
            }
        }
    }
    println!(
        "criterion 4 (rank bound, trained synthesis, 20 prompts x {checked_per} matrices): {} — {checked} deltas, worst sigma_{np1}/sigma_1 = {worst_ratio:.3e} (bound 1e-8 + 1e-12/sigma_1)",
        if ok { "pass" } else { "FAIL" },
        checked_per = checked / 20,
        np1 = n + 1
    );
    assert!(ok, "worst ratio {worst_ratio:.3e} over {checked} matrices");
}

// ── criterion 5: padded gathering vs unpadded streaming ─────────────

#[test]
fn criterion_5_padding_correctness() {
    let cfg = ModelConfig::tiny(BYTE_VOCAB);
    let backbone = BackboneParams::<f64>::init(cfg.clone(), 55).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0xacc5);
    let lens: Vec<usize> = (3..=64).collect();
    let t_max = 64usize;
    let prompts: Vec<Vec<u32>> = lens
        .iter()
        .map(|&l| {
            let mut p = vec![BOS];
            p.extend((1..l).map(|_| rng.gen_range(0..256u32)));
            p
        })
        .collect();

    // one padded batch mixing every length; each row is scored exactly
    // at its own final prompt position
    let tokens: Vec<Vec<u32>> = prompts
        .iter()
        .map(|p| {
            let mut t = p.clone();
            t.resize(t_max, PAD);
            t
        })
        .collect();
    let targets = vec![vec![0u32; t_max]; prompts.len()];
    let mask: Vec<Vec<bool>> = lens
        .iter()
        .map(|&l| (0..t_max).map(|t| t == l - 1).collect())
        .collect();
    let mut g = Graph::new();
    let out = build_batch_loss(
        &mut g, &backbone, false, &tokens, &targets, &mask, None, None, None,
    )
    .unwrap();

    let mut worst = 0.0f64;
    for (row, prompt) in prompts.iter().enumerate() {
        let run = run_prompt(&backbone, prompt).unwrap();
        let gather_step = prompt.len() - 1;
        // gathered per-layer hidden vectors (the synthesis inputs)
        for li in 0..cfg.n_layers {
            let batch = g.value(out.ln1[li][gather_step]);
            let row_vals = &batch[row * cfg.d_model..(row + 1) * cfg.d_model];
            for (a, b) in row_vals.iter().zip(&run.last_ln1[li]) {
                worst = worst.max((a - b).abs() / a.abs().max(b.abs()).max(1.0));
            }
        }
        // prompt-final logits at the same gathered position
        let (_, node) = *out
            .logits
            .iter()
            .find(|&&(t, _)| t == gather_step)
            .expect("scored step present");
        let batch = g.value(node);
        let row_vals = &batch[row * cfg.vocab..(row + 1) * cfg.vocab];
        for (a, b) in row_vals.iter().zip(&run.last_logits) {
            worst = worst.max((a - b).abs() / a.abs().max(b.abs()).max(1.0));
        }
    }
    let pass = worst <= 1e-12;
    println!(
        "criterion 5 (padded gathering vs unpadded streaming, prompt lengths 3..64): {} — max rel err {worst:.3e} (tol 1e-12)",
        if pass { "pass" } else { "FAIL" }
    );
    assert!(pass, "max rel err {worst:.3e}");
}

// ── criterion 6: directional recall uplift ──────────────────────────

#[test]
fn criterion_6_recall_uplift() {
    let runs = reference_runs();
    let acc_diff: Vec<f64> = runs
        .seeds
        .iter()
        .map(|r| r.prosg.accuracy - r.base.accuracy)
        .collect();
    let ppl_diff: Vec<f64> = runs
        .seeds
        .iter()
        .map(|r| r.prosg.ppl_token - r.base.ppl_token)
        .collect();
    let med_acc = median3([acc_diff[0], acc_diff[1], acc_diff[2]]);
    let med_ppl = median3([ppl_diff[0], ppl_diff[1], ppl_diff[2]]);
    // budget: the three seeded runs are independent, so a multicore
    // machine runs them concurrently, one core each; the budgeted
    // quantity is the slowest seed's single-core CPU time (equal to
    // its wall-clock time on a dedicated core)
    let worst_cpu = runs.seed_cpu_secs.iter().cloned().fold(0.0f64, f64::max);
    let total_wall: f64 = runs.seed_wall_secs.iter().sum();
    let pass = med_acc >= 0.10 && med_ppl < 0.0 && worst_cpu < 7200.0;
    println!(
        "criterion 6 (recall uplift, L=4 E=128 payload {RECALL_PAYLOAD} spacer {RECALL_SPACER}, 3-seed median): {} — accuracy uplift {:+.3} (need >= +0.10; per-seed {:+.3}/{:+.3}/{:+.3}), ppl_token change {:+.4} (need < 0; per-seed {:+.4}/{:+.4}/{:+.4}), slowest seed {:.0} CPU-seconds of 7200 budget (one core per seed; {:.0}s wall-clock for all three back to back)",
        if pass { "pass" } else { "FAIL" },
        med_acc,
        acc_diff[0],
        acc_diff[1],
        acc_diff[2],
        med_ppl,
        ppl_diff[0],
        ppl_diff[1],
        ppl_diff[2],
        worst_cpu,
        total_wall
    );
    assert!(
        pass,
        "median accuracy uplift {med_acc:+.3}, median ppl change {med_ppl:+.4}, slowest seed {worst_cpu:.0} CPU-seconds"
    );
}

// ── criterion 7: perplexity unit correctness ────────────────────────

#[test]
fn criterion_7_perplexity_units() {
    // uniform-logit model: zero output head => every logit row is
    // constant => exact 1/V predictive distribution
    let cfg = ModelConfig::tiny(BYTE_VOCAB);
    let backbone = BackboneParams::<f64>::init(cfg, 77).unwrap();
    for v in backbone.head.borrow_mut().data_mut() {
        *v = 0.0;
    }
    let samples = gen_dataset(None, 4, 2, 4, 9, 512).unwrap();
    let report = evaluate(&backbone, None, &samples, 4).unwrap();
    let uniform_err = (report.ppl_token - BYTE_VOCAB as f64).abs();

    // hand-worked example: one sample, two scored tokens at
    // probabilities 1/2 and 1/4 => per-sample perplexity 2*sqrt(2)
    let nll = (2.0f64).ln() + (4.0f64).ln();
    let expect = 2.0 * (2.0f64).sqrt();
    let hand_err = (ppl_paper(&[(nll, 2)]) - expect)
        .abs()
        .max((ppl_token(nll, 2) - expect).abs());

    let pass = uniform_err <= 1e-9 && hand_err <= 1e-9;
    println!(
        "criterion 7 (perplexity units): {} — uniform model ppl_token {:.9} vs V={} (err {uniform_err:.3e}), hand example vs 2*sqrt(2) err {hand_err:.3e} (tol 1e-9)",
        if pass { "pass" } else { "FAIL" },
        report.ppl_token,
        BYTE_VOCAB
    );
    assert!(pass, "uniform err {uniform_err:.3e}, hand err {hand_err:.3e}");
}

// ── criterion 8: phase-2 learning signal ────────────────────────────

#[test]
fn criterion_8_phase2_learning_signal() {
    let cfg = ModelConfig {
        n_layers: 2,
        d_model: 32,
        vocab: BYTE_VOCAB,
        ffn_mult: 4,
        rank: 1,
        stack_depth: 1,
    };
    let mut diffs = [0.0f64; 3];
    let mut lines = Vec::new();
    for seed in 0..3u64 {
        let train = gen_dataset(Some(TaskKind::Recall), 64, 4, 8, 3000 + seed, 512).unwrap();
        let held_out = gen_dataset(Some(TaskKind::Recall), 32, 4, 8, 4000 + seed, 512).unwrap();
        let backbone = BackboneParams::<f32>::init(cfg.clone(), seed).unwrap();
        train_backbone(
            &backbone,
            &train,
            &TrainOpts {
                batch_size: 8,
                steps: 100,
                lr: 1e-3,
                warmup_steps: 10,
                clip_norm: 1.0,
                seed,
            },
            |_| {},
        )
        .unwrap();

        let cache = build_prompt_cache(&backbone, &held_out).unwrap();
        let idxs: Vec<usize> = (0..held_out.len()).collect();
        let synth = SynthParams::<f32>::init(cfg.clone(), seed.wrapping_add(1)).unwrap();
        // zero-init output matrices: the synthesis path starts exactly
        // at the frozen baseline
        let at_init =
            phase2_loss(&backbone, Some(&synth), &cache, &held_out, &idxs, false).unwrap();
        let baseline = phase2_loss(&backbone, None, &cache, &held_out, &idxs, false).unwrap();
        assert!(
            (at_init - baseline).abs() <= 1e-9,
            "zero-init synthesis does not match baseline: {at_init} vs {baseline}"
        );

        train_synth(
            &backbone,
            &synth,
            &train,
            &TrainOpts {
                batch_size: 8,
                steps: 1000,
                lr: 1e-3,
                warmup_steps: 100,
                clip_norm: 1.0,
                seed,
            },
            |_| {},
        )
        .unwrap();
        let trained =
            phase2_loss(&backbone, Some(&synth), &cache, &held_out, &idxs, false).unwrap();
        diffs[seed as usize] = baseline - trained;
        lines.push(format!("seed {seed}: {baseline:.4} -> {trained:.4}"));
    }
    let med = median3(diffs);
    let pass = med > 0.0;
    println!(
        "criterion 8 (1000 phase-2 steps vs frozen baseline, held-out loss, 3-seed median): {} — median improvement {med:+.4} ({})",
        if pass { "pass" } else { "FAIL" },
        lines.join(", ")
    );
    assert!(pass, "median improvement {med:+.4}");
}

// ── criterion 9: bit-identical reruns ───────────────────────────────

#[test]
fn criterion_9_determinism() {
    let runs = reference_runs();
    let first = &runs.seeds[0];
    let rerun = run_reference_seed(0);
    let p1_ok = first.p1_loss == rerun.p1_loss;
    let p2_ok = first.p2_loss == rerun.p2_loss;
    let reports_ok = first.base_json == rerun.base_json && first.prosg_json == rerun.prosg_json;
    let ckpt_ok = first.ckpt == rerun.ckpt;
    let pass = p1_ok && p2_ok && reports_ok && ckpt_ok;
    println!(
        "criterion 9 (bit-identical rerun of the seed-0 reference run): {} — phase-1 losses {}, phase-2 losses {}, eval reports {}, checkpoint bytes {}",
        if pass { "pass" } else { "FAIL" },
        if p1_ok { "identical" } else { "DIFFER" },
        if p2_ok { "identical" } else { "DIFFER" },
        if reports_ok { "identical" } else { "DIFFER" },
        if ckpt_ok { "identical" } else { "DIFFER" }
    );
    assert!(pass);
}

//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL
//! line each and exits non-zero if any failed. Pass criterion numbers as
//! arguments to run a subset.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stwb::commands::{decode_run, eval_run, prepare_run, sweep_run, train_run};
use stwb::pipeline::{self, Prepared};
use stwb::ExperimentConfig;
use stwb_core::corpus::Split;
use stwb_core::decoding::{beam_search, ctc_collapse, greedy_decode, StepScorer};
use stwb_core::eval::{bleu, wer, Unit};
use stwb_core::lm::{rerank, rescore_nbest, NBestEntry, NGramLM};
use stwb_core::nnet::{truncate_encoder, BlockType, Model, ModelConfig};
use stwb_core::tensor::log_softmax_rows;
use stwb_core::training::{
    average_checkpoints, ctc_loss, ctc_min_frames, example_gradients, Example, JointLossWeights, LossSettings,
    SpecialIds, Task,
};
use stwb_core::Matrix;

// --- pinned tolerances and budgets ---------------------------------------

const CTC_TOL: f64 = 1e-6;
const CTC_MIN_CASES: usize = 5_000;
const CTC_BUDGET: Duration = Duration::from_secs(60);
const GRAD_REL_TOL: f64 = 1e-4;
/// Denominator floor of the relative error, so exact zeros compare sanely.
const GRAD_REL_FLOOR: f64 = 1e-6;
const GRAD_STEP: f64 = 1e-5;
const GRAD_MAX_PARAMS: usize = 500;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const JOINT_TOL: f64 = 1e-9;
const JOINT_EPOCHS: usize = 20;
const TRUNC_LAYERS: usize = 12;
const ST_MIN_BLEU: f64 = 60.0;
const ST_MAX_EPOCHS: usize = 60;
const ST_MIN_TRAIN: usize = 500;
const ST_BUDGET: Duration = Duration::from_secs(600);
const TRANSFER_SEEDS: [u64; 3] = [1, 2, 3];
const TRANSFER_DATA_RATIO: usize = 10;
const SWEEP_KEEP: [usize; 4] = [2, 4, 6, 8];
const SWEEP_SLACK: f64 = 0.5;
const EQUIV_MODELS: u64 = 100;
const RIGGED_CASES: u64 = 100;
const LM_SUM_TOL: f64 = 1e-9;
const LM_CONTEXTS: usize = 100;
const BLEU_HAND_TOL: f64 = 1e-6;
const AVG_TOL: f64 = 1e-12;

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn q(p: &Path) -> String {
    format!("{:?}", p.display().to_string())
}

fn config(text: &str) -> Result<ExperimentConfig, String> {
    ExperimentConfig::parse(text, &[]).map_err(|e| e.to_string())
}

fn cli<T>(r: Result<T, stwb::CliError>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

/// Shared artifacts, built on first use.
struct Lab {
    root: tempfile::TempDir,
    data_a: Option<PathBuf>,
    asr_a: Option<PathBuf>,
}

impl Lab {
    fn path(&self, name: &str) -> PathBuf {
        self.root.path().join(name)
    }

    /// Language A, 1200 utterances (960 train).
    fn data_a(&mut self) -> Result<PathBuf, String> {
        if let Some(p) = &self.data_a {
            return Ok(p.clone());
        }
        let dir = self.path("dataA");
        let cfg = config(&format!(
            "seed = 1\noutput_dir = {}\n[corpus]\nlanguage = \"A\"\nn_utts = 1200\n",
            q(&dir)
        ))?;
        cli(prepare_run(&cfg))?;
        self.data_a = Some(dir.clone());
        Ok(dir)
    }

    /// CTC model trained on language A.
    fn asr_a(&mut self) -> Result<PathBuf, String> {
        if let Some(p) = &self.asr_a {
            return Ok(p.clone());
        }
        let data = self.data_a()?;
        let dir = self.path("asrA");
        let cfg = config(&format!(
            "seed = 1\noutput_dir = {}\n[train]\ntask = \"asr\"\ndata_dir = {}\n\
             [train.schedule]\nepochs = 8\npeak_lr = 0.005\nencoder_lr_scale = 1.0\n",
            q(&dir),
            q(&data)
        ))?;
        cli(train_run(&cfg))?;
        self.asr_a = Some(dir.clone());
        Ok(dir)
    }
}

// --- 1 ------------------------------------------------------------------

/// Total probability and occupancy of every collapsed label sequence.
fn enumerate_paths(lp: &Matrix, blank: usize) -> HashMap<Vec<usize>, f64> {
    let (t, v) = lp.shape();
    let mut out = HashMap::new();
    let mut path = vec![0usize; t];
    for code in 0..v.pow(t as u32) {
        let mut c = code;
        for slot in path.iter_mut() {
            *slot = c % v;
            c /= v;
        }
        let p: f64 = path.iter().enumerate().map(|(i, &k)| lp.get(i, k)).sum::<f64>().exp();
        *out.entry(ctc_collapse(&path, blank)).or_insert(0.0) += p;
    }
    out
}

fn all_targets(labels: &[usize], max_len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for p in &frontier {
            for &l in labels {
                let mut q: Vec<usize> = p.clone();
                q.push(l);
                next.push(q);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

fn criterion_1() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut cases, mut infeasible) = (0usize, 0usize);
    let mut worst = 0.0f64;
    for _draw in 0..8 {
        for t in 1..=6 {
            for v in 2..=4 {
                for blank in [0, v - 1] {
                    let logits = (0..t * v).map(|_| rng.gen_range(-3.0..3.0)).collect();
                    let lp = log_softmax_rows(&Matrix::from_vec(t, v, logits));
                    let probs = enumerate_paths(&lp, blank);
                    let labels: Vec<usize> = (0..v).filter(|&k| k != blank).collect();
                    for target in all_targets(&labels, 3) {
                        cases += 1;
                        let p = probs.get(&target).copied().unwrap_or(0.0);
                        match ctc_loss(&lp, &target, blank) {
                            Ok((loss, _)) => {
                                ensure!(p > 0.0, "T={t} V={v} {target:?}: loss given for an impossible target");
                                let err = (loss + p.ln()).abs();
                                worst = worst.max(err);
                                ensure!(err < CTC_TOL, "T={t} V={v} {target:?}: {loss} vs {}", -p.ln());
                            }
                            Err(_) => {
                                ensure!(p == 0.0 && ctc_min_frames(&target) > t, "T={t} V={v} {target:?} rejected but feasible");
                                infeasible += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    let elapsed = start.elapsed();
    ensure!(cases >= CTC_MIN_CASES, "only {cases} cases");
    ensure!(elapsed < CTC_BUDGET, "took {elapsed:?}");
    Ok(format!("{cases} cases ({infeasible} infeasible), max |err| {worst:.2e}, {elapsed:.1?}"))
}

// --- 2 ------------------------------------------------------------------

fn grad_model_config() -> ModelConfig {
    ModelConfig {
        block_type: BlockType::Transformer,
        feat_dim: 2,
        d_model: 4,
        n_heads: 2,
        d_ff: 4,
        conv_kernel: 2,
        conv_stride: 1,
        dw_kernel: 3,
        n_enc_layers: 1,
        src_vocab: 5,
        n_text_layers: 0,
        tgt_vocab: 6,
        n_dec_layers: 1,
        ctc_vocab: 5,
        ctc_hidden: 0,
        mfp_head: false,
    }
}

fn criterion_2() -> Check {
    let start = Instant::now();
    let model = Model::build(grad_model_config(), 2).map_err(|e| e.to_string())?;
    let n_params = model.count_parameters();
    ensure!(n_params <= GRAD_MAX_PARAMS, "model has {n_params} parameters");
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ex = Example {
        id: "g".into(),
        feats: Some(Matrix::from_vec(7, 2, (0..14).map(|_| rng.gen_range(-1.0..1.0)).collect())),
        src_ids: Some(vec![3, 4, 4]),
        tgt_ids: Some(vec![4, 5, 3]),
        ctc_ids: Some(vec![3, 4]),
    };
    let ids = SpecialIds { bos: 1, eos: 2, blank: 0 };
    let mut worst = 0.0f64;
    let mut checked = 0;
    for task in [Task::Asr, Task::St, Task::Mt, Task::Joint] {
        let s = LossSettings {
            task,
            weights: JointLossWeights { w_st: 0.3, w_mt: 0.5, w_asr: 0.2 },
            label_smoothing: 0.1,
            ids,
        };
        let (_, grads) = example_gradients(&model, &ex, ex.feats.as_ref(), &s).map_err(|e| e.to_string())?;
        let loss = |m: &Model| example_gradients(m, &ex, ex.feats.as_ref(), &s).map(|r| r.0.total);
        for (name, g) in grads.iter() {
            for i in 0..g.len() {
                let mut plus = model.clone();
                plus.params.get_mut(name).unwrap().data_mut()[i] += GRAD_STEP;
                let mut minus = model.clone();
                minus.params.get_mut(name).unwrap().data_mut()[i] -= GRAD_STEP;
                let fd = (loss(&plus).map_err(|e| e.to_string())? - loss(&minus).map_err(|e| e.to_string())?)
                    / (2.0 * GRAD_STEP);
                let a = g.data()[i];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(GRAD_REL_FLOOR);
                worst = worst.max(rel);
                checked += 1;
                ensure!(rel < GRAD_REL_TOL, "{task:?} {name}[{i}]: analytic {a} vs numeric {fd}");
            }
        }
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < GRAD_BUDGET, "took {elapsed:?}");
    Ok(format!("{n_params} params, {checked} entries over asr/st/mt/joint, max rel err {worst:.2e}, {elapsed:.1?}"))
}

// --- 3 ------------------------------------------------------------------

fn criterion_3(lab: &mut Lab) -> Check {
    let asr = lab.asr_a()?;
    let data = lab.path("jointB");
    let prep = config(&format!(
        "seed = 5\noutput_dir = {}\n[corpus]\nlanguage = \"B\"\nn_utts = 60\n[text]\npseudo_asr = {}\n",
        q(&data),
        q(&asr)
    ))?;
    cli(prepare_run(&prep))?;
    let run_cfg = config(&format!(
        "seed = 5\noutput_dir = {}\n[train]\ntask = \"joint\"\ndata_dir = {}\n\
         [train.schedule]\nepochs = {JOINT_EPOCHS}\nwarmup_steps = 20\npeak_lr = 0.003\n",
        q(&lab.path("joint")),
        q(&data)
    ))?;
    let w = run_cfg.train.schedule.weights;
    ensure!((w.w_st, w.w_mt, w.w_asr) == (0.3, 0.5, 0.2), "default weights are {w:?}");
    let run = cli(train_run(&run_cfg))?;
    let out = run.outcome.ok_or("joint run produced no outcome")?;
    ensure!(out.epochs.len() == JOINT_EPOCHS, "{} epochs", out.epochs.len());
    let mut worst = 0.0f64;
    for s in &out.steps {
        let l = s.loss;
        let err = (l.total - (0.3 * l.st + 0.5 * l.mt + 0.2 * l.asr)).abs();
        worst = worst.max(err);
        ensure!(err <= JOINT_TOL, "step {}: total {} vs weighted {}", s.step, l.total, 0.3 * l.st + 0.5 * l.mt + 0.2 * l.asr);
    }
    // The epoch log carries the same decomposition.
    let log = std::fs::read_to_string(run.dir.join("train.log")).map_err(|e| e.to_string())?;
    for line in log.lines().filter(|l| !l.starts_with('#')) {
        let f: Vec<f64> = line.split_whitespace().map(|x| x.parse().unwrap()).collect();
        ensure!(f.len() == 8, "log line {line:?}");
        ensure!((f[3] - (0.3 * f[4] + 0.5 * f[5] + 0.2 * f[6])).abs() < 1e-5, "log line {line:?}");
    }
    Ok(format!("{} steps, max |total - weighted| {worst:.2e}", out.steps.len()))
}

// --- 4 ------------------------------------------------------------------

fn layer_params(c: &ModelConfig) -> usize {
    let d = c.d_model;
    let lin = |i: usize, o: usize| i * o + o;
    let attn = 3 * d * d + lin(d, d);
    let ff = lin(d, c.d_ff) + lin(c.d_ff, d);
    match c.block_type {
        BlockType::Transformer => 4 * d + attn + ff,
        BlockType::Conformer => 10 * d + 2 * ff + attn + lin(d, 2 * d) + lin(c.dw_kernel, d) + lin(d, d),
    }
}

fn criterion_4() -> Check {
    let mut notes = Vec::new();
    for block in [BlockType::Transformer, BlockType::Conformer] {
        let c = ModelConfig {
            block_type: block,
            n_enc_layers: TRUNC_LAYERS,
            tgt_vocab: 20,
            ..ModelConfig::default()
        };
        let m = Model::build(c.clone(), 4).map_err(|e| e.to_string())?;
        let slope = layer_params(&c);
        let full = m.count_parameters();
        for k in 1..=TRUNC_LAYERS {
            let t = truncate_encoder(&m, k).map_err(|e| e.to_string())?;
            let n = t.count_parameters();
            ensure!(n + (TRUNC_LAYERS - k) * slope == full, "{block:?} keep {k}: {n} params");
            for (name, tensor) in t.params.iter() {
                let src = m.params.get(name).ok_or(format!("{name} not in source"))?;
                let same = src.shape() == tensor.shape()
                    && src.data().iter().zip(tensor.data()).all(|(a, b)| a.to_bits() == b.to_bits());
                ensure!(same, "{block:?} keep {k}: {name} differs");
            }
        }
        notes.push(format!("{block:?} slope {slope}"));
    }
    Ok(notes.join(", "))
}

// --- 5 ------------------------------------------------------------------

fn criterion_5(lab: &mut Lab) -> Check {
    let start = Instant::now();
    let data = lab.data_a()?;
    let prepared = Prepared::load(&data).map_err(|e| e.to_string())?;
    let n_train = prepared.entries(Split::Train).len();
    ensure!(n_train >= ST_MIN_TRAIN, "{n_train} training utterances");
    let epochs = 30;
    ensure!(epochs <= ST_MAX_EPOCHS, "epoch budget");
    let st = lab.path("stA");
    let cfg = config(&format!(
        "seed = 1\noutput_dir = {}\n[train]\ntask = \"st\"\ndata_dir = {}\n\
         [train.schedule]\nepochs = {epochs}\npeak_lr = 0.005\nencoder_lr_scale = 1.0\n\
         [train.schedule.spec_augment]\nn_freq_masks = 2\nn_time_masks = 2\nmax_freq_width = 4\nmax_time_width = 3\n",
        q(&st),
        q(&data)
    ))?;
    cli(train_run(&cfg))?;
    let dec = config(&format!(
        "seed = 1\noutput_dir = {}\n[decode]\ncheckpoint = {}\nsplit = \"test\"\nbeam = 5\n",
        q(&lab.path("stA_decode")),
        q(&st.join("model.ckpt"))
    ))?;
    let run = cli(decode_run(&dec))?;
    let elapsed = start.elapsed() ;
    let b = run.report.corpus;
    ensure!(b >= ST_MIN_BLEU, "test BLEU {b:.2}");
    ensure!(elapsed < ST_BUDGET, "took {elapsed:?}");
    Ok(format!("{n_train} train utts, {epochs} epochs, test BLEU {b:.2}, {elapsed:.0?}"))
}

// --- 6 ------------------------------------------------------------------

fn criterion_6(lab: &mut Lab) -> Check {
    let asr = lab.asr_a()?;
    let a_train = Prepared::load(&lab.data_a()?).map_err(|e| e.to_string())?.entries(Split::Train).len();
    let data_b = lab.path("dataB");
    let prep = config(&format!(
        "seed = 11\noutput_dir = {}\n[corpus]\nlanguage = \"B\"\nn_utts = 160\nsplit = [0.6, 0.2, 0.2]\n",
        q(&data_b)
    ))?;
    let b = cli(prepare_run(&prep))?;
    let b_train = b.entries(Split::Train).len();
    ensure!(a_train >= TRANSFER_DATA_RATIO * b_train, "A has {a_train} train utts, B {b_train}");
    let mut rows = Vec::new();
    for seed in TRANSFER_SEEDS {
        let mut cer = Vec::new();
        let mut steps = Vec::new();
        for transfer in [true, false] {
            let init = if transfer {
                format!("init_from = {}\nretarget = \"ctc\"\nreinit_last_k = 2\n", q(&asr.join("model.ckpt")))
            } else {
                String::new()
            };
            let name = format!("B_{}_{seed}", if transfer { "transfer" } else { "scratch" });
            let cfg = config(&format!(
                "seed = {seed}\noutput_dir = {}\n[train]\ntask = \"asr\"\ndata_dir = {}\n{init}\
                 [train.schedule]\nepochs = 8\npeak_lr = 0.005\nwarmup_steps = 20\n",
                q(&lab.path(&name)),
                q(&data_b)
            ))?;
            let run = cli(train_run(&cfg))?;
            steps.push(run.outcome.as_ref().map(|o| o.state.global_step).unwrap_or(0));
            cer.push(cli(pipeline::asr_cer(&run.model, &run.data, Split::Valid))?);
        }
        ensure!(steps[0] == steps[1], "seed {seed}: step budgets {steps:?}");
        ensure!(cer[0] < cer[1], "seed {seed}: transfer CER {:.4} vs scratch {:.4}", cer[0], cer[1]);
        rows.push(format!("seed {seed}: {:.4} < {:.4}", cer[0], cer[1]));
    }
    Ok(format!("valid CER transfer vs scratch ({b_train} B utts): {}", rows.join("; ")))
}

// --- 7 ------------------------------------------------------------------

fn criterion_7(lab: &mut Lab) -> Check {
    let data_a = lab.data_a()?;
    let pre = lab.path("mfp");
    let pcfg = config(&format!(
        "seed = 1\noutput_dir = {}\n[model]\nn_enc_layers = 8\n[train]\ntask = \"pretrain\"\ndata_dir = {}\n",
        q(&pre),
        q(&data_a)
    ))?;
    let p = cli(train_run(&pcfg))?;
    let po = p.pretrain.ok_or("pretraining produced no outcome")?;
    ensure!(po.final_valid < po.initial_valid, "masked-frame loss did not drop");
    let data = lab.path("data500");
    cli(prepare_run(&config(&format!(
        "seed = 1\noutput_dir = {}\n[corpus]\nlanguage = \"A\"\nn_utts = 500\n",
        q(&data)
    ))?))?;
    let out = lab.path("sweep");
    let keep: Vec<String> = SWEEP_KEEP.iter().map(usize::to_string).collect();
    let scfg = config(&format!(
        "seed = 1\noutput_dir = {}\n[train]\ndata_dir = {}\n[train.schedule]\nepochs = 10\npeak_lr = 0.005\n\
         [sweep]\npretrained = {}\nkeep = [{}]\n",
        q(&out),
        q(&data),
        q(&pre.join("model.ckpt")),
        keep.join(", ")
    ))?;
    let rows = cli(sweep_run(&scfg))?;
    let report = std::fs::read_to_string(out.join("sweep.txt")).map_err(|e| e.to_string())?;
    let lines: Vec<&str> = report.lines().collect();
    ensure!(lines.len() == SWEEP_KEEP.len() + 1 && lines[0].starts_with('#'), "report:\n{report}");
    for (line, k) in lines[1..].iter().zip(SWEEP_KEEP) {
        let f: Vec<&str> = line.split_whitespace().collect();
        ensure!(f.len() == 3 && f[0] == k.to_string(), "row {line:?}");
        ensure!(f[1].parse::<f64>().is_ok() && f[2].parse::<f64>().is_ok(), "row {line:?}");
    }
    let full = rows.iter().find(|r| r.layers == 8).ok_or("no 8-layer row")?.valid_bleu;
    let best = rows
        .iter()
        .filter(|r| r.layers < 8)
        .max_by(|a, b| a.valid_bleu.total_cmp(&b.valid_bleu))
        .ok_or("no truncated rows")?;
    ensure!(best.valid_bleu >= full - SWEEP_SLACK, "best truncated {:.2} vs full {full:.2}", best.valid_bleu);
    let table: Vec<String> = rows.iter().map(|r| format!("{}:{:.2}/{:.2}", r.layers, r.valid_bleu, r.test_bleu)).collect();
    Ok(format!("valid/test BLEU {}", table.join(" ")))
}

// --- 8 ------------------------------------------------------------------

/// Fixed random distributions per prefix, eos = 0.
struct Rigged {
    vocab: usize,
    table: HashMap<Vec<usize>, Vec<f64>>,
}

impl Rigged {
    fn new(vocab: usize, depth: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut table = HashMap::new();
        let mut frontier = vec![vec![]];
        for _ in 0..depth {
            let mut next = Vec::new();
            for p in frontier {
                let logits = (0..vocab).map(|_| rng.gen_range(-3.0..3.0)).collect();
                table.insert(p.clone(), log_softmax_rows(&Matrix::row_vector(logits)).row(0).to_vec());
                for k in 1..vocab {
                    let mut q: Vec<usize> = p.clone();
                    q.push(k);
                    next.push(q);
                }
            }
            frontier = next;
        }
        Self { vocab, table }
    }

    fn best_by_enumeration(&self, depth: usize) -> (Vec<usize>, f64) {
        let mut best = (vec![], f64::NEG_INFINITY);
        let mut stack = vec![(vec![], 0.0)];
        while let Some((p, s)) = stack.pop() {
            for (k, l) in self.next_log_probs(&p).into_iter().enumerate() {
                let mut q: Vec<usize> = p.clone();
                q.push(k);
                let score = s + l;
                if k == 0 || q.len() == depth {
                    if score > best.1 {
                        best = (q, score);
                    }
                } else {
                    stack.push((q, score));
                }
            }
        }
        best
    }
}

impl StepScorer for Rigged {
    fn eos(&self) -> usize {
        0
    }
    fn next_log_probs(&self, prefix: &[usize]) -> Vec<f64> {
        self.table.get(prefix).cloned().unwrap_or_else(|| vec![-(self.vocab as f64).ln(); self.vocab])
    }
}

fn criterion_8() -> Check {
    let cfg = ModelConfig {
        feat_dim: 8,
        d_model: 16,
        n_heads: 2,
        d_ff: 24,
        n_enc_layers: 1,
        n_dec_layers: 1,
        tgt_vocab: 12,
        ..ModelConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut total_tokens = 0;
    for seed in 0..EQUIV_MODELS {
        let m = Model::build(cfg.clone(), seed).map_err(|e| e.to_string())?;
        let feats = Matrix::uniform(20, 8, 1.5, &mut rng);
        let mem = m.speech_memory(&feats).map_err(|e| e.to_string())?;
        let scorer = m.scorer(mem, 1, 2).map_err(|e| e.to_string())?;
        let g = greedy_decode(&scorer, 15);
        let b = &beam_search(&scorer, 1, 15)[0];
        ensure!(g.tokens == b.tokens, "model {seed}: greedy {:?} vs beam {:?}", g.tokens, b.tokens);
        total_tokens += g.tokens.len();
    }
    let mut recovered = 0;
    for case in 0..RIGGED_CASES {
        let depth = 1 + (case % 3) as usize;
        let r = Rigged::new(4, depth, &mut rng);
        let (want, score) = r.best_by_enumeration(depth);
        let got = &beam_search(&r, 64, depth)[0];
        ensure!(got.tokens == want && (got.score - score).abs() < 1e-12, "case {case}: {:?} vs {want:?}", got.tokens);
        recovered += 1;
    }
    Ok(format!(
        "{EQUIV_MODELS} models identical ({total_tokens} tokens), {recovered}/{RIGGED_CASES} rigged argmax recovered"
    ))
}

// --- 9 ------------------------------------------------------------------

fn criterion_9() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let words = ["ka", "lo", "mi", "ne", "su", "ta"];
    let corpus: Vec<Vec<&str>> = (0..60)
        .map(|_| (0..rng.gen_range(1..8)).map(|_| words[rng.gen_range(0..words.len())]).collect())
        .collect();
    let mut worst = 0.0f64;
    for order in [3, 5] {
        let lm = NGramLM::train(&corpus, order, 0.75).map_err(|e| e.to_string())?;
        for _ in 0..LM_CONTEXTS {
            // Some contexts include an unseen word.
            let ctx: Vec<&str> = (0..rng.gen_range(0..order))
                .map(|_| if rng.gen_bool(0.1) { "zz" } else { words[rng.gen_range(0..words.len())] })
                .collect();
            let sum: f64 = lm.distribution(&ctx).iter().map(|(_, p)| p).sum();
            worst = worst.max((sum - 1.0).abs());
            ensure!((sum - 1.0).abs() <= LM_SUM_TOL, "order {order} ctx {ctx:?}: sum {sum}");
        }
    }
    let lm = NGramLM::train(&corpus, 3, 0.75).map_err(|e| e.to_string())?;
    for trial in 0..20 {
        let hyps: Vec<NBestEntry> = (0..6)
            .map(|_| NBestEntry {
                tokens: (0..rng.gen_range(1..5)).map(|_| words[rng.gen_range(0..words.len())].to_string()).collect(),
                model_score: -(rng.gen_range(0..4) as f64),
            })
            .collect();
        let mut expected: Vec<usize> = (0..hyps.len()).collect();
        expected.sort_by(|&a, &b| hyps[b].model_score.total_cmp(&hyps[a].model_score));
        let got = rescore_nbest(&lm, hyps.clone(), 0.0).map_err(|e| e.to_string())?;
        let want: Vec<&NBestEntry> = expected.iter().map(|&i| &hyps[i]).collect();
        let have: Vec<&NBestEntry> = got.iter().map(|r| &r.entry).collect();
        ensure!(have == want, "trial {trial}: weight 0 reordered the list");
    }
    // Scores (-1, -2) and LM scores (-4, -2) cross at 0.5.
    let pair = vec![
        (NBestEntry { tokens: vec!["a".into()], model_score: -1.0 }, -4.0),
        (NBestEntry { tokens: vec!["b".into()], model_score: -2.0 }, -2.0),
    ];
    let lambda_star = 0.5;
    let first = |w: f64| rerank(pair.clone(), w).map(|r| r[0].entry.tokens[0].clone());
    let below = first(lambda_star - 1e-9).map_err(|e| e.to_string())?;
    let at = first(lambda_star).map_err(|e| e.to_string())?;
    let above = first(lambda_star + 1e-9).map_err(|e| e.to_string())?;
    ensure!(below == "a" && at == "a" && above == "b", "order {below}/{at}/{above} around 0.5");
    Ok(format!("max |sum - 1| {worst:.1e}; λ=0 identity on 20 lists; flip at λ*=0.5"))
}

// --- 10 -----------------------------------------------------------------

fn criterion_10(lab: &Lab) -> Check {
    let w = wer(&["a b c"], &["a x c"], Unit::Word).map_err(|e| e.to_string())?;
    ensure!(w.corpus == 1.0 / 3.0, "WER {}", w.corpus);
    let same = ["ka lo mi ne", "su ta", "vo ri pe du ga"];
    let b = bleu(&same, &same, 4).map_err(|e| e.to_string())?;
    ensure!(b.corpus == 100.0, "BLEU of identical corpora {}", b.corpus);
    // Matches: 1-grams 8/9, 2-grams 5/7, 3-grams 3/5, 4-grams 1/3; equal lengths.
    let refs = ["the cat sat on the mat", "a dog ran"];
    let hyps = ["the cat sat on a mat", "a dog ran"];
    let hand = 100.0 * (8.0 / 9.0 * 5.0 / 7.0 * 3.0 / 5.0 * 1.0 / 3.0f64).powf(0.25);
    let b2 = bleu(&refs, &hyps, 4).map_err(|e| e.to_string())?;
    ensure!((b2.corpus - hand).abs() < BLEU_HAND_TOL, "two-sentence BLEU {} vs {hand}", b2.corpus);

    // Dispersion report: per-utterance rates, their mean and population sd.
    let r = ["a b c d", "e f", "g h i"];
    let h = ["a b d", "e f", "x y i z"];
    let per_hand = [0.25, 0.0, 1.0];
    let mean = per_hand.iter().sum::<f64>() / 3.0;
    let sd = (per_hand.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 3.0).sqrt();
    let dir = lab.path("eval10");
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let pairs = |xs: &[&str]| xs.iter().enumerate().map(|(i, t)| format!("u{i}\t{t}\n")).collect::<String>();
    std::fs::write(dir.join("ref.txt"), pairs(&r)).map_err(|e| e.to_string())?;
    std::fs::write(dir.join("hyp.txt"), pairs(&h)).map_err(|e| e.to_string())?;
    let cfg = config(&format!(
        "seed = 0\noutput_dir = {}\n[eval]\nrefs = {}\nhyps = {}\nmetric = \"wer\"\n",
        q(&dir),
        q(&dir.join("ref.txt")),
        q(&dir.join("hyp.txt"))
    ))?;
    let rep = cli(eval_run(&cfg))?;
    for (a, b) in rep.per_utterance.iter().zip(per_hand) {
        ensure!((a - b).abs() < 1e-12, "per-utterance {a} vs {b}");
    }
    ensure!((rep.mean - mean).abs() < 1e-12 && (rep.sd - sd).abs() < 1e-12, "mean/sd {}/{}", rep.mean, rep.sd);
    ensure!((rep.corpus - 4.0 / 9.0).abs() < 1e-12, "corpus WER {}", rep.corpus);
    let text = std::fs::read_to_string(dir.join("report.txt")).map_err(|e| e.to_string())?;
    ensure!(text.lines().count() == 5 && text.lines().last().unwrap().starts_with("corpus "), "report:\n{text}");
    Ok(format!("WER 1/3, BLEU 100, hand BLEU {hand:.4}, dispersion mean {mean:.4} sd {sd:.4}"))
}

// --- 11 -----------------------------------------------------------------

fn criterion_11() -> Check {
    let cfg = ModelConfig {
        tgt_vocab: 10,
        ctc_vocab: 8,
        n_enc_layers: 2,
        ..ModelConfig::default()
    };
    let models: Vec<Model> = (0..5).map(|s| Model::build(cfg.clone(), s)).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    let refs: Vec<&Model> = models.iter().collect();
    let avg = average_checkpoints(&refs).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for (name, t) in avg.params.iter() {
        for i in 0..t.len() {
            let mean = models.iter().map(|m| m.params.get(name).unwrap().data()[i]).sum::<f64>() / 5.0;
            worst = worst.max((t.data()[i] - mean).abs());
        }
    }
    ensure!(worst <= AVG_TOL, "mean oracle error {worst:e}");
    let one = &models[0];
    let same = average_checkpoints(&[one, one, one]).map_err(|e| e.to_string())?;
    let idem = same.params.iter().map(|(n, t)| t.max_abs_diff(one.params.get(n).unwrap())).fold(0.0, f64::max);
    ensure!(idem <= AVG_TOL, "idempotence error {idem:e}");
    let mut perm_worst = 0.0f64;
    for order in [[4, 3, 2, 1, 0], [2, 0, 4, 1, 3], [1, 2, 3, 4, 0]] {
        let p: Vec<&Model> = order.iter().map(|&i| &models[i]).collect();
        let a = average_checkpoints(&p).map_err(|e| e.to_string())?;
        for (n, t) in a.params.iter() {
            perm_worst = perm_worst.max(t.max_abs_diff(avg.params.get(n).unwrap()));
        }
    }
    ensure!(perm_worst <= AVG_TOL, "permutation error {perm_worst:e}");
    Ok(format!("oracle {worst:.1e}, idempotence {idem:.1e}, permutation {perm_worst:.1e}"))
}

// --- 12 -----------------------------------------------------------------

fn snapshot(dir: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).map_err(|e| e.to_string())? {
            let p = e.map_err(|e| e.to_string())?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_path_buf();
                out.insert(rel, std::fs::read(&p).map_err(|e| e.to_string())?);
            }
        }
    }
    Ok(out)
}

fn stwb(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_stwb"))
        .args(args)
        .env_remove("STWB_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(out.status.success(), "stwb {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    Ok(())
}

fn criterion_12(lab: &Lab) -> Check {
    let base = lab.path("repro");
    let work = base.join("work");
    let cfg_dir = base.join("configs");
    std::fs::create_dir_all(&cfg_dir).map_err(|e| e.to_string())?;
    let write = |name: &str, body: String| -> Result<PathBuf, String> {
        let p = cfg_dir.join(name);
        std::fs::write(&p, body).map_err(|e| e.to_string())?;
        Ok(p)
    };
    let w = |s: &str| q(&work.join(s));
    let prepare = write(
        "prepare.toml",
        format!("seed = 4\noutput_dir = {}\n[corpus]\nlanguage = \"A\"\nn_utts = 40\n[text]\nspeed_perturb = true\n", w("data")),
    )?;
    let small = "[model]\nd_model = 16\nd_ff = 32\nn_enc_layers = 2\nn_dec_layers = 1\n";
    let train = write(
        "train.toml",
        format!(
            "seed = 4\noutput_dir = {}\n{small}[train]\ntask = \"st\"\ndata_dir = {}\n\
             [train.schedule]\nepochs = 3\nbest_k = 2\n[train.schedule.spec_augment]\nmax_time_width = 3\n",
            w("st"),
            w("data")
        ),
    )?;
    let asr = write(
        "asr.toml",
        format!(
            "seed = 4\noutput_dir = {}\n{small}[train]\ntask = \"asr\"\ndata_dir = {}\n[train.schedule]\nepochs = 2\n",
            w("asr"),
            w("data")
        ),
    )?;
    let decode = write(
        "decode.toml",
        format!(
            "seed = 4\noutput_dir = {}\n[decode]\ncheckpoint = {}\nbeam = 3\nnbest = 3\n",
            w("decode"),
            w("st/model.ckpt")
        ),
    )?;
    let decode_asr = write(
        "decode_asr.toml",
        format!(
            "seed = 4\noutput_dir = {}\n[decode]\ncheckpoint = {}\nbeam = 4\nnbest = 2\nlm_order = 3\nlm_weight = 0.3\n",
            w("decode_asr"),
            w("asr/model.ckpt")
        ),
    )?;
    let eval = write(
        "eval.toml",
        format!(
            "seed = 4\noutput_dir = {}\n[eval]\nrefs = {}\nhyps = {}\nmetric = \"bleu\"\n",
            w("eval"),
            w("decode/ref.txt"),
            w("decode/hyp.txt")
        ),
    )?;
    let average = write(
        "average.toml",
        format!(
            "seed = 4\noutput_dir = {}\n[average]\ninputs = [{}, {}]\n",
            w("average"),
            w("st/last.ckpt"),
            w("st/model.ckpt")
        ),
    )?;
    let run_all = || -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
        if work.exists() {
            std::fs::remove_dir_all(&work).map_err(|e| e.to_string())?;
        }
        for (cmd, cfg) in [
            ("prepare", &prepare),
            ("train", &train),
            ("train", &asr),
            ("decode", &decode),
            ("decode", &decode_asr),
            ("eval", &eval),
            ("average", &average),
        ] {
            stwb(&[cmd, "--config", cfg.to_str().unwrap()])?;
        }
        snapshot(&work)
    };
    let first = run_all()?;
    let second = run_all()?;
    for must in ["data/manifest.tsv", "st/model.ckpt", "decode/nbest.txt", "decode/bleu-4.txt", "eval/report.txt", "decode_asr/cer.txt"] {
        ensure!(first.contains_key(Path::new(must)), "{must} was not produced");
    }
    ensure!(
        first.keys().collect::<Vec<_>>() == second.keys().collect::<Vec<_>>(),
        "file sets differ between runs"
    );
    for (p, bytes) in &first {
        ensure!(second[p] == *bytes, "{} differs between runs", p.display());
    }
    let total: usize = first.values().map(Vec::len).sum();
    Ok(format!("{} files ({} bytes) byte-identical across reruns", first.len(), total))
}

// --- driver -------------------------------------------------------------

fn main() {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut lab = Lab {
        root: tempfile::tempdir().expect("temp dir"),
        data_a: None,
        asr_a: None,
    };
    type Run<'a> = Box<dyn FnOnce(&mut Lab) -> Check + 'a>;
    let criteria: Vec<(u32, &str, Run)> = vec![
        (1, "CTC forward matches alignment enumeration", Box::new(|_| criterion_1())),
        (2, "analytic gradients match finite differences", Box::new(|_| criterion_2())),
        (3, "joint loss is the weighted sum on every step", Box::new(criterion_3)),
        (4, "truncation parameter accounting", Box::new(|_| criterion_4())),
        (5, "toy end-to-end ST reaches BLEU 60", Box::new(criterion_5)),
        (6, "ASR transfer beats scratch on small data", Box::new(criterion_6)),
        (7, "truncation sweep over a pretrained encoder", Box::new(criterion_7)),
        (8, "decoding equivalences", Box::new(|_| criterion_8())),
        (9, "language model properties", Box::new(|_| criterion_9())),
        (10, "metric golden values", Box::new(|l| criterion_10(l))),
        (11, "checkpoint averaging", Box::new(|_| criterion_11())),
        (12, "byte-identical reruns", Box::new(|l| criterion_12(l))),
    ];
    let mut failed = Vec::new();
    let mut report = String::new();
    for (id, name, f) in criteria {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(|| f(&mut lab))).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let line = match result {
            Ok(detail) => format!("PASS criterion {id}: {name} [{detail}] ({:.1?})", start.elapsed()),
            Err(why) => {
                failed.push(id);
                format!("FAIL criterion {id}: {name} [{why}] ({:.1?})", start.elapsed())
            }
        };
        println!("{line}");
        writeln!(report, "{line}").unwrap();
    }
    if failed.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: failed {failed:?}");
        std::process::exit(1);
    }
}

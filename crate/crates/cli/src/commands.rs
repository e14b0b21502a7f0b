//! Subcommand implementations. Each `*_run` function does the work and
//! returns its results so tests can call it in-process; the thin wrappers
//! used by the binary discard them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use stwb_core::corpus::{ManifestEntry, Split};
use stwb_core::decoding::render_nbest;
use stwb_core::eval::{ScoreReport, Unit};
use stwb_core::frontend::features_from_frames;
use stwb_core::nnet::{load_checkpoint, save_checkpoint, Model};
use stwb_core::training::{
    average_checkpoints, evaluate_loss, pretrain_masked_frames, train as train_loop, Example, LossSettings,
    PretrainOutcome, Task, TrainOutcome, ValidMetric,
};

use crate::config::{ExperimentConfig, TaskKind};
use crate::pipeline::{
    self, bleu_of, create_dir, data_dir_of, decode_asr_features, decode_mt_text, decode_st, error_rate, init_model,
    parse_head, render_pairs, train_char_lm, write_text, DecodeOptions, Decoded, Prepared, MODEL,
};
use crate::CliError;

fn core_task(t: TaskKind) -> Task {
    match t {
        TaskKind::Asr => Task::Asr,
        TaskKind::Mt => Task::Mt,
        TaskKind::St => Task::St,
        TaskKind::Joint | TaskKind::Pretrain => Task::Joint,
    }
}

fn parse_split(s: &str) -> Result<Split, CliError> {
    s.parse().map_err(|e| CliError::config(format!("decode.split: {e}")))
}

fn require_path<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a PathBuf, CliError> {
    p.as_ref().ok_or_else(|| CliError::config(format!("missing key {key}")))
}

// --- prepare ------------------------------------------------------------

pub fn prepare(cfg: &ExperimentConfig) -> Result<(), CliError> {
    prepare_run(cfg).map(|_| ())
}

pub fn prepare_run(cfg: &ExperimentConfig) -> Result<Prepared, CliError> {
    let data = Prepared::prepare(cfg)?;
    write_text(&cfg.output_dir.join("config.toml"), &cfg.to_toml())?;
    Ok(data)
}

// --- train --------------------------------------------------------------

/// Everything a training run produced.
pub struct TrainRun {
    pub dir: PathBuf,
    pub data: Prepared,
    /// The model written to `model.ckpt`.
    pub model: Model,
    pub outcome: Option<TrainOutcome>,
    pub pretrain: Option<PretrainOutcome>,
}

pub fn train(cfg: &ExperimentConfig) -> Result<(), CliError> {
    train_run(cfg).map(|_| ())
}

fn validation_metric(task: TaskKind, model: &Model, data: &Prepared, valid: &[Example], settings: &LossSettings, max_len: usize) -> Result<ValidMetric, stwb_core::Error> {
    let scored = match task {
        TaskKind::St => Some(pipeline::st_bleu(model, data, Split::Valid, max_len)),
        TaskKind::Mt => Some(pipeline::mt_bleu(model, data, Split::Valid, max_len)),
        _ => None,
    };
    match scored {
        Some(r) => r
            .map(|value| ValidMetric {
                value,
                higher_is_better: true,
            })
            .map_err(|e| stwb_core::Error::Data(e.message)),
        None => Ok(ValidMetric {
            value: evaluate_loss(model, valid, settings)?.total,
            higher_is_better: false,
        }),
    }
}

pub fn train_run(cfg: &ExperimentConfig) -> Result<TrainRun, CliError> {
    let task = cfg.task()?;
    let data_dir = cfg.train.data_dir.clone().unwrap_or_else(|| cfg.output_dir.clone());
    let data = Prepared::load(&data_dir)?;
    let mut mcfg = data.model_config(&cfg.model, task)?;
    if let Some(k) = cfg.train.keep_layers {
        mcfg.n_enc_layers = k;
    }
    let init = match &cfg.train.init_from {
        Some(p) => Some(load_checkpoint(p)?),
        None => None,
    };
    let retarget = cfg.train.retarget.as_deref().map(parse_head).transpose()?;
    let model = init_model(&mcfg, cfg.seed, init.as_ref(), cfg.train.keep_layers, retarget, cfg.train.reinit_last_k)?;

    let dir = cfg.output_dir.clone();
    create_dir(&dir)?;
    let abs = fs::canonicalize(&data_dir).unwrap_or(data_dir.clone());
    write_text(&dir.join("data_dir.txt"), &format!("{}\n", abs.display()))?;
    write_text(&dir.join("config.toml"), &cfg.to_toml())?;

    if task == TaskKind::Pretrain {
        let feats = |split| -> Result<Vec<_>, CliError> {
            data.entries(split).iter().map(|e| data.features(&e.id)).collect()
        };
        let mut pcfg = cfg.train.pretrain.clone();
        pcfg.seed = cfg.seed;
        let out = pretrain_masked_frames(model, &feats(Split::Train)?, &feats(Split::Valid)?, &pcfg)?;
        let mut log = String::from("# step loss\n");
        for (i, l) in out.losses.iter().enumerate() {
            writeln!(log, "{} {l:.6}", i + 1).unwrap();
        }
        writeln!(log, "# valid_mse initial {:.6} final {:.6}", out.initial_valid, out.final_valid).unwrap();
        write_text(&dir.join("pretrain.log"), &log)?;
        save_checkpoint(&out.model, &dir.join(MODEL))?;
        return Ok(TrainRun {
            dir,
            data,
            model: out.model.clone(),
            outcome: None,
            pretrain: Some(out),
        });
    }

    let train_ex = data.examples(task, Split::Train, &mcfg)?;
    let valid_ex = data.examples(task, Split::Valid, &mcfg)?;
    let ids = data.special_ids(task);
    let mut schedule = cfg.train.schedule.clone();
    schedule.seed = cfg.seed;
    let settings = LossSettings {
        task: core_task(task),
        weights: schedule.weights,
        label_smoothing: 0.0,
        ids,
    };
    let max_len = cfg.decode.max_len;
    let outcome = train_loop(model, core_task(task), &train_ex, ids, &schedule, |m| {
        validation_metric(task, m, &data, &valid_ex, &settings, max_len)
    })?;

    let mut log = String::from(if task == TaskKind::Joint {
        "# epoch step lr loss loss_st loss_mt loss_asr valid\n"
    } else {
        "# epoch step lr loss valid\n"
    });
    log.push_str(&outcome.log(core_task(task)));
    write_text(&dir.join("train.log"), &log)?;
    save_checkpoint(&outcome.model, &dir.join("last.ckpt"))?;
    let best_dir = dir.join("best");
    create_dir(&best_dir)?;
    for (rank, b) in outcome.state.best_list.iter().enumerate() {
        save_checkpoint(&b.model, &best_dir.join(format!("{:02}-epoch{:03}.ckpt", rank + 1, b.epoch)))?;
    }
    let model = select_final(task, &outcome, &data, &valid_ex, &settings, max_len)?;
    save_checkpoint(&model, &dir.join(MODEL))?;
    let summary = serde_json::json!({
        "task": format!("{task:?}").to_lowercase(),
        "epochs": outcome.epochs.len(),
        "steps": outcome.state.global_step,
        "initial_loss": outcome.initial_loss,
        "final_loss": outcome.final_loss,
        "best_valid": outcome.state.best_list.first().map(|b| b.metric),
    });
    write_text(&dir.join("summary.json"), &serde_json::to_string_pretty(&summary).expect("json"))?;
    Ok(TrainRun {
        dir,
        data,
        model,
        outcome: Some(outcome),
        pretrain: None,
    })
}

/// Average of the best-K checkpoints, unless the single best checkpoint
/// validates strictly better.
fn select_final(task: TaskKind, outcome: &TrainOutcome, data: &Prepared, valid: &[Example], settings: &LossSettings, max_len: usize) -> Result<Model, CliError> {
    let best = &outcome.state.best_list;
    let Some(first) = best.first() else {
        return Ok(outcome.model.clone());
    };
    if best.len() == 1 {
        return Ok(first.model.clone());
    }
    let models: Vec<&Model> = best.iter().map(|b| &b.model).collect();
    let avg = average_checkpoints(&models)?;
    let m = validation_metric(task, &avg, data, valid, settings, max_len)?;
    let better = if m.higher_is_better { first.metric > m.value } else { first.metric < m.value };
    if better {
        log::info!("best single checkpoint ({:.4}) beats the average ({:.4})", first.metric, m.value);
        Ok(first.model.clone())
    } else {
        Ok(avg)
    }
}

// --- decode -------------------------------------------------------------

pub struct DecodeRun {
    pub ids: Vec<String>,
    pub refs: Vec<String>,
    pub decoded: Vec<Decoded>,
    pub report: ScoreReport,
}

impl DecodeRun {
    pub fn hyps(&self) -> Vec<&str> {
        self.decoded.iter().map(Decoded::best).collect()
    }
}

pub fn decode(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let run = decode_run(cfg)?;
    println!("{} {:.6}", run.report.metric, run.report.corpus);
    Ok(())
}

fn decode_options(cfg: &ExperimentConfig) -> DecodeOptions {
    DecodeOptions {
        beam: cfg.decode.beam.max(1),
        nbest: cfg.decode.nbest.max(1),
        max_len: cfg.decode.max_len,
        guard_n: cfg.decode.guard_n,
        guard_max_repeats: cfg.decode.guard_max_repeats,
    }
}

fn data_for_checkpoint(ckpt: &Path, explicit: &Option<PathBuf>) -> PathBuf {
    explicit
        .clone()
        .unwrap_or_else(|| data_dir_of(ckpt.parent().unwrap_or(Path::new("."))))
}

pub fn decode_run(cfg: &ExperimentConfig) -> Result<DecodeRun, CliError> {
    let ckpt = require_path(&cfg.decode.checkpoint, "decode.checkpoint")?;
    let model = load_checkpoint(ckpt)?;
    let data = Prepared::load(&data_for_checkpoint(ckpt, &cfg.decode.data_dir))?;
    let split = parse_split(&cfg.decode.split)?;
    let entries = data.entries(split);
    let opts = decode_options(cfg);
    let (decoded, refs, unit): (Vec<Decoded>, Vec<String>, Option<Unit>) = if model.has_text_encoder() && model.has_decoder() && !model.has_ctc() {
        let mut out = Vec::new();
        for e in &entries {
            let (nbest, truncated) = decode_mt_text(&model, &e.transcript, &data.src_bpe, &data.tgt_bpe, &opts)?;
            out.push(Decoded {
                id: e.id.clone(),
                nbest,
                truncated,
            });
        }
        (out, entries.iter().map(|e| e.translation.clone()).collect(), None)
    } else if model.has_decoder() {
        let out = decode_st(&model, &data, &entries, &opts)?;
        (out, entries.iter().map(|e| e.translation.clone()).collect(), None)
    } else if model.has_ctc() {
        let lm = lm_for(cfg, &data)?;
        let mut out = Vec::new();
        for e in &entries {
            let f = data.features(&e.id)?;
            let mut nbest = decode_asr_features(&model, &f, &data.chars, opts.beam, lm.as_ref().map(|l| (l, cfg.decode.lm_weight)))?;
            nbest.truncate(opts.nbest);
            out.push(Decoded {
                id: e.id.clone(),
                nbest,
                truncated: false,
            });
        }
        (out, entries.iter().map(|e| e.transcript.clone()).collect(), Some(Unit::Char))
    } else {
        return Err(CliError::config("checkpoint has neither a decoder nor a CTC head"));
    };
    let ids: Vec<String> = decoded.iter().map(|d| d.id.clone()).collect();
    let hyps: Vec<&str> = decoded.iter().map(Decoded::best).collect();
    let ref_strs: Vec<&str> = refs.iter().map(String::as_str).collect();
    let report = match unit {
        None => bleu_of(&ref_strs, &hyps)?,
        Some(u) => error_rate(&ref_strs, &hyps, u)?,
    };
    let dir = &cfg.output_dir;
    create_dir(dir)?;
    let nbest: String = decoded.iter().map(|d| render_nbest(&d.id, &d.nbest)).collect();
    write_text(&dir.join("nbest.txt"), &nbest)?;
    write_text(&dir.join("hyp.txt"), &render_pairs(ids.iter().map(String::as_str).zip(hyps.iter().copied())))?;
    write_text(&dir.join("ref.txt"), &render_pairs(ids.iter().map(String::as_str).zip(ref_strs.iter().copied())))?;
    write_text(&dir.join(format!("{}.txt", report.metric.to_lowercase())), &report.render(&ids))?;
    let truncated = decoded.iter().filter(|d| d.truncated).count();
    if truncated > 0 {
        log::warn!("repetition guard truncated {truncated} hypotheses");
    }
    Ok(DecodeRun {
        ids,
        refs,
        decoded,
        report,
    })
}

fn lm_for(cfg: &ExperimentConfig, data: &Prepared) -> Result<Option<stwb_core::lm::NGramLM>, CliError> {
    if cfg.decode.lm_order == 0 {
        return Ok(None);
    }
    let texts: Vec<&str> = data.entries(Split::Train).iter().map(|e| e.transcript.as_str()).collect();
    Ok(Some(train_char_lm(&texts, cfg.decode.lm_order)?))
}

// --- cascade ------------------------------------------------------------

pub struct CascadeRun {
    pub ids: Vec<String>,
    pub asr_hyps: Vec<String>,
    pub hyps: Vec<String>,
    pub bleu: ScoreReport,
    pub asr_cer: ScoreReport,
}

pub fn cascade(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let run = cascade_run(cfg)?;
    println!("{} {:.6}", run.bleu.metric, run.bleu.corpus);
    Ok(())
}

pub fn cascade_run(cfg: &ExperimentConfig) -> Result<CascadeRun, CliError> {
    let asr_ckpt = require_path(&cfg.decode.asr_checkpoint, "decode.asr_checkpoint")?;
    let mt_ckpt = require_path(&cfg.decode.mt_checkpoint, "decode.mt_checkpoint")?;
    let eval_dir = require_path(&cfg.decode.data_dir, "decode.data_dir")?;
    let asr = load_checkpoint(asr_ckpt)?;
    let mt = load_checkpoint(mt_ckpt)?;
    if !asr.has_ctc() {
        return Err(CliError::config("decode.asr_checkpoint has no CTC head"));
    }
    if !mt.has_text_encoder() {
        return Err(CliError::config("decode.mt_checkpoint has no text encoder"));
    }
    let asr_data = Prepared::load(&data_for_checkpoint(asr_ckpt, &cfg.decode.asr_data_dir))?;
    let mt_data = Prepared::load(&data_for_checkpoint(mt_ckpt, &cfg.decode.mt_data_dir))?;
    let eval = Prepared::load(eval_dir)?;
    let split = parse_split(&cfg.decode.split)?;
    let entries: Vec<&ManifestEntry> = eval.entries(split);
    let opts = decode_options(cfg);
    let lm = lm_for(cfg, &asr_data)?;

    let mut ids = Vec::new();
    let mut asr_hyps = Vec::new();
    let mut hyps = Vec::new();
    for e in &entries {
        let transcript = if cfg.decode.oracle_transcripts {
            e.transcript.clone()
        } else {
            let f = features_from_frames(&eval.audio[&e.id], &asr_data.frontend, Some(&asr_data.cmvn))?;
            let nbest = decode_asr_features(&asr, &f, &asr_data.chars, opts.beam, lm.as_ref().map(|l| (l, cfg.decode.lm_weight)))?;
            nbest.into_iter().next().map(|(t, _)| t).unwrap_or_default()
        };
        let (out, _) = decode_mt_text(&mt, &transcript, &mt_data.src_bpe, &mt_data.tgt_bpe, &opts)?;
        ids.push(e.id.clone());
        asr_hyps.push(transcript);
        hyps.push(out[0].0.clone());
    }
    let refs: Vec<&str> = entries.iter().map(|e| e.translation.as_str()).collect();
    let golds: Vec<&str> = entries.iter().map(|e| e.transcript.as_str()).collect();
    let hyp_strs: Vec<&str> = hyps.iter().map(String::as_str).collect();
    let asr_strs: Vec<&str> = asr_hyps.iter().map(String::as_str).collect();
    let bleu = bleu_of(&refs, &hyp_strs)?;
    let asr_cer = error_rate(&golds, &asr_strs, Unit::Char)?;

    let dir = &cfg.output_dir;
    create_dir(dir)?;
    let id_strs: Vec<&str> = ids.iter().map(String::as_str).collect();
    write_text(&dir.join("asr_hyp.txt"), &render_pairs(id_strs.iter().copied().zip(asr_strs.iter().copied())))?;
    write_text(&dir.join("hyp.txt"), &render_pairs(id_strs.iter().copied().zip(hyp_strs.iter().copied())))?;
    write_text(&dir.join("ref.txt"), &render_pairs(id_strs.iter().copied().zip(refs.iter().copied())))?;
    write_text(&dir.join("bleu.txt"), &bleu.render(&ids))?;
    write_text(&dir.join("asr_cer.txt"), &asr_cer.render(&ids))?;
    Ok(CascadeRun {
        ids,
        asr_hyps,
        hyps,
        bleu,
        asr_cer,
    })
}

// --- layer sweep --------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub layers: usize,
    pub valid_bleu: f64,
    pub test_bleu: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
}

pub fn sweep_layers(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let rows = sweep_run(cfg)?;
    print!("{}", render_sweep(&rows));
    Ok(())
}

pub fn render_sweep(rows: &[SweepRow]) -> String {
    let mut s = String::from("#layers valid test\n");
    for r in rows {
        writeln!(s, "{} {:.2} {:.2}", r.layers, r.valid_bleu, r.test_bleu).unwrap();
    }
    s
}

pub fn sweep_run(cfg: &ExperimentConfig) -> Result<Vec<SweepRow>, CliError> {
    let pretrained = require_path(&cfg.sweep.pretrained, "sweep.pretrained")?;
    let source = load_checkpoint(pretrained)?;
    if cfg.sweep.keep.is_empty() {
        return Err(CliError::config("sweep.keep is empty"));
    }
    let mut rows = Vec::new();
    for &keep in &cfg.sweep.keep {
        if keep == 0 || keep > source.config.n_enc_layers {
            return Err(CliError::config(format!(
                "sweep.keep entry {keep} outside 1..={}",
                source.config.n_enc_layers
            )));
        }
        let mut sub = cfg.clone();
        sub.output_dir = cfg.output_dir.join(format!("layers{keep}"));
        sub.train.task = Some(TaskKind::St);
        sub.train.init_from = Some(pretrained.clone());
        sub.train.keep_layers = Some(keep);
        sub.train.retarget = None;
        sub.model = source.config.clone();
        let run = train_run(&sub)?;
        let outcome = run.outcome.as_ref().expect("st run has an outcome");
        let max_len = cfg.decode.max_len;
        rows.push(SweepRow {
            layers: keep,
            valid_bleu: pipeline::st_bleu(&run.model, &run.data, Split::Valid, max_len)?,
            test_bleu: pipeline::st_bleu(&run.model, &run.data, Split::Test, max_len)?,
            initial_loss: outcome.initial_loss,
            final_loss: outcome.final_loss,
        });
    }
    create_dir(&cfg.output_dir)?;
    write_text(&cfg.output_dir.join("sweep.txt"), &render_sweep(&rows))?;
    let mut detail = String::from("# layers initial_loss final_loss\n");
    for r in &rows {
        writeln!(detail, "{} {:.6} {:.6}", r.layers, r.initial_loss, r.final_loss).unwrap();
    }
    write_text(&cfg.output_dir.join("sweep_losses.txt"), &detail)?;
    Ok(rows)
}

// --- average ------------------------------------------------------------

pub fn average(cfg: &ExperimentConfig) -> Result<(), CliError> {
    if cfg.average.inputs.is_empty() {
        return Err(CliError::config("average.inputs is empty"));
    }
    let models: Vec<Model> = cfg
        .average
        .inputs
        .iter()
        .map(|p| load_checkpoint(p))
        .collect::<Result<_, _>>()?;
    let refs: Vec<&Model> = models.iter().collect();
    let avg = average_checkpoints(&refs)?;
    create_dir(&cfg.output_dir)?;
    save_checkpoint(&avg, &cfg.output_dir.join(MODEL))?;
    Ok(())
}

// --- eval ---------------------------------------------------------------

pub fn eval(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let r = eval_run(cfg)?;
    println!("{} {:.6}", r.metric, r.corpus);
    Ok(())
}

fn read_pairs(path: &Path) -> Result<Vec<(String, String)>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::data(format!("cannot read {}: {e}", path.display())))?;
    pipeline::parse_pairs(&text, path)
}

pub fn eval_run(cfg: &ExperimentConfig) -> Result<ScoreReport, CliError> {
    let refs = read_pairs(require_path(&cfg.eval.refs, "eval.refs")?)?;
    let hyps = read_pairs(require_path(&cfg.eval.hyps, "eval.hyps")?)?;
    let metric = cfg.eval.metric.as_deref().unwrap_or("bleu");
    let ref_map: BTreeMap<&str, &str> = refs.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
    if hyps.len() != refs.len() {
        return Err(CliError::data(format!("{} hypotheses for {} references", hyps.len(), refs.len())));
    }
    let mut r = Vec::new();
    let mut h = Vec::new();
    let mut ids = Vec::new();
    for (id, text) in &hyps {
        let rt = ref_map
            .get(id.as_str())
            .ok_or_else(|| CliError::data(format!("hypothesis {id:?} has no reference")))?;
        r.push(*rt);
        h.push(text.as_str());
        ids.push(id.clone());
    }
    let report = match metric {
        "bleu" => bleu_of(&r, &h)?,
        "wer" => error_rate(&r, &h, Unit::Word)?,
        "per" => error_rate(&r, &h, Unit::Phone)?,
        "cer" => error_rate(&r, &h, Unit::Char)?,
        other => return Err(CliError::config(format!("eval.metric must be bleu, wer, per or cer, got {other:?}"))),
    };
    create_dir(&cfg.output_dir)?;
    write_text(&cfg.output_dir.join("report.txt"), &report.render(&ids))?;
    Ok(report)
}

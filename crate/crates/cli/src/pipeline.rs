//! Data preparation, example construction, model initialisation and
//! decoding shared by the subcommands.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use stwb_core::corpus::{generate_corpus, pseudo_phonetize, Manifest, ManifestEntry, Split};
use stwb_core::decoding::{beam_search, ctc_greedy, ctc_path_nbest, repetition_guard};
use stwb_core::eval::{bleu, wer, ScoreReport, Unit};
use stwb_core::frontend::{estimate_cmvn, features_from_frames, resample_frames, CmvnStats, FrontendConfig};
use stwb_core::io::write_frame_stream;
use stwb_core::lm::{rescore_nbest, NBestEntry, NGramLM};
use stwb_core::nnet::{load_checkpoint, transfer_retarget, truncate_encoder, Head, Model, ModelConfig};
use stwb_core::text::{train_bpe, train_char_vocab, SubwordModel, Vocabulary};
use stwb_core::training::{ctc_min_frames, Example, SpecialIds};
use stwb_core::Matrix;

use crate::config::{ExperimentConfig, TaskKind};
use crate::CliError;

pub const MANIFEST: &str = "manifest.tsv";
pub const CMVN: &str = "cmvn.bin";
pub const CHARS: &str = "chars.json";
pub const PSEUDO_CHARS: &str = "pseudo_chars.json";
pub const SRC_BPE: &str = "src.bpe";
pub const TGT_BPE: &str = "tgt.bpe";
pub const FRONTEND: &str = "frontend.json";
pub const MODEL: &str = "model.ckpt";

pub(crate) fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display())))
}

pub(crate) fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::data(format!("cannot create {}: {e}", path.display())))
}

/// Everything `prepare` produces, loaded in memory.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub audio: BTreeMap<String, Matrix>,
    pub frontend: FrontendConfig,
    pub cmvn: CmvnStats,
    /// Source characters (CTC targets, blank included).
    pub chars: Vocabulary,
    pub src_bpe: SubwordModel,
    pub tgt_bpe: SubwordModel,
    /// Characters of the pseudo-phonetic transcripts, when present.
    pub pseudo_chars: Option<Vocabulary>,
}

/// Output of a foreign ASR run used for pseudo-phonetic transcription.
pub struct AsrBundle {
    pub model: Model,
    pub chars: Vocabulary,
    pub cmvn: CmvnStats,
    pub frontend: FrontendConfig,
}

impl AsrBundle {
    /// Loads `model.ckpt` plus the data artifacts its run was trained on.
    pub fn load(run_dir: &Path) -> Result<Self, CliError> {
        let model = load_checkpoint(&run_dir.join(MODEL))?;
        let data = data_dir_of(run_dir);
        Ok(Self {
            model,
            chars: Vocabulary::load(&data.join(CHARS))?,
            cmvn: CmvnStats::load(&data.join(CMVN))?,
            frontend: read_frontend(&data)?,
        })
    }
}

/// Train runs record where their data came from in `data_dir.txt`.
pub fn data_dir_of(run_dir: &Path) -> PathBuf {
    fs::read_to_string(run_dir.join("data_dir.txt"))
        .map(|s| PathBuf::from(s.trim()))
        .unwrap_or_else(|_| run_dir.to_path_buf())
}

fn read_frontend(dir: &Path) -> Result<FrontendConfig, CliError> {
    let p = dir.join(FRONTEND);
    let s = fs::read_to_string(&p).map_err(|e| CliError::data(format!("cannot read {}: {e}", p.display())))?;
    serde_json::from_str(&s).map_err(|e| CliError::data(format!("{}: {e}", p.display())))
}

fn speed_copies(manifest: &Manifest, audio: &mut BTreeMap<String, Matrix>) -> Result<Manifest, CliError> {
    let mut entries = Vec::new();
    for e in manifest.entries() {
        entries.push(e.clone());
        if e.split != Split::Train {
            continue;
        }
        for factor in [0.9, 1.1] {
            let id = format!("{}-sp{factor}", e.id);
            let frames = resample_frames(&audio[&e.id], factor);
            audio.insert(id.clone(), frames);
            entries.push(ManifestEntry {
                audio_ref: format!("audio/{id}.frames"),
                id,
                ..e.clone()
            });
        }
    }
    Ok(Manifest::new(entries)?)
}

impl Prepared {
    /// Generates the corpus and writes every artifact under `cfg.output_dir`.
    pub fn prepare(cfg: &ExperimentConfig) -> Result<Self, CliError> {
        let corpus_cfg = cfg.corpus()?;
        let spec = corpus_cfg.language_spec(cfg.seed)?;
        let [a, b, c] = corpus_cfg.split;
        let corpus = generate_corpus(&spec, corpus_cfg.n_utts, (a, b, c))?;
        let dir = cfg.output_dir.clone();
        create_dir(&dir.join("audio"))?;
        let mut audio = corpus.audio;
        let mut manifest = corpus.manifest;
        if cfg.text.speed_perturb {
            manifest = speed_copies(&manifest, &mut audio)?;
        }
        for e in manifest.entries() {
            write_frame_stream(&dir.join(&e.audio_ref), &audio[&e.id], corpus.sample_rate)?;
        }
        let frontend = cfg.frontend;
        let train_feats: Vec<Matrix> = manifest
            .split(Split::Train)
            .map(|e| features_from_frames(&audio[&e.id], &frontend, None))
            .collect::<Result<_, _>>()?;
        let cmvn = estimate_cmvn(&train_feats)?;
        let transcripts: Vec<&str> = manifest.split(Split::Train).map(|e| e.transcript.as_str()).collect();
        let translations: Vec<&str> = manifest.split(Split::Train).map(|e| e.translation.as_str()).collect();
        let chars = train_char_vocab(&transcripts)?;
        let src_bpe = train_bpe(&transcripts, cfg.text.src_bpe_size)?;
        let tgt_bpe = train_bpe(&translations, cfg.text.tgt_bpe_size)?;

        let mut pseudo_chars = None;
        if let Some(run) = &cfg.text.pseudo_asr {
            let asr = AsrBundle::load(run)?;
            manifest = pseudo_phonetize(&manifest, &audio, &asr.model, &asr.chars, &asr.frontend, Some(&asr.cmvn))?;
            let pseudo: Vec<&str> = manifest
                .split(Split::Train)
                .filter_map(|e| e.pseudo_phones.as_deref())
                .collect();
            let v = train_char_vocab(&pseudo)?;
            v.save(&dir.join(PSEUDO_CHARS))?;
            pseudo_chars = Some(v);
        }

        manifest.write(&dir.join(MANIFEST))?;
        cmvn.save(&dir.join(CMVN))?;
        chars.save(&dir.join(CHARS))?;
        src_bpe.save(&dir.join(SRC_BPE))?;
        tgt_bpe.save(&dir.join(TGT_BPE))?;
        write_text(&dir.join(FRONTEND), &serde_json::to_string_pretty(&frontend).expect("frontend json"))?;
        log::info!(
            "prepared {} utterances ({} train, {} valid, {} test; {} dropped for empty translations)",
            manifest.len(),
            manifest.count(Split::Train),
            manifest.count(Split::Valid),
            manifest.count(Split::Test),
            corpus.dropped_empty
        );
        Ok(Self {
            dir,
            manifest,
            audio,
            frontend,
            cmvn,
            chars,
            src_bpe,
            tgt_bpe,
            pseudo_chars,
        })
    }

    pub fn load(dir: &Path) -> Result<Self, CliError> {
        let manifest = Manifest::read(&dir.join(MANIFEST))?;
        manifest.check_audio(dir)?;
        let audio = manifest.load_audio(dir)?;
        let pseudo_path = dir.join(PSEUDO_CHARS);
        Ok(Self {
            dir: dir.to_path_buf(),
            audio,
            frontend: read_frontend(dir)?,
            cmvn: CmvnStats::load(&dir.join(CMVN))?,
            chars: Vocabulary::load(&dir.join(CHARS))?,
            src_bpe: SubwordModel::load(&dir.join(SRC_BPE))?,
            tgt_bpe: SubwordModel::load(&dir.join(TGT_BPE))?,
            pseudo_chars: if pseudo_path.exists() {
                Some(Vocabulary::load(&pseudo_path)?)
            } else {
                None
            },
            manifest,
        })
    }

    pub fn entries(&self, split: Split) -> Vec<&ManifestEntry> {
        self.manifest.split(split).collect()
    }

    /// Normalised model input for one utterance.
    pub fn features(&self, id: &str) -> Result<Matrix, CliError> {
        let frames = self
            .audio
            .get(id)
            .ok_or_else(|| CliError::data(format!("no audio for {id:?}")))?;
        Ok(features_from_frames(frames, &self.frontend, Some(&self.cmvn))?)
    }

    fn pseudo_vocab(&self) -> Result<&Vocabulary, CliError> {
        self.pseudo_chars.as_ref().ok_or_else(|| {
            CliError::data(
                "joint training needs pseudo-phonetic transcripts: set text.pseudo_asr to a trained ASR run and rerun prepare",
            )
        })
    }

    /// Training items for `task`. ASR items whose labels cannot fit the
    /// encoder length are skipped with a warning.
    pub fn examples(&self, task: TaskKind, split: Split, model_cfg: &ModelConfig) -> Result<Vec<Example>, CliError> {
        let mut out = Vec::new();
        let mut skipped = 0;
        for e in self.manifest.split(split) {
            let mut ex = Example {
                id: e.id.clone(),
                ..Default::default()
            };
            if task != TaskKind::Mt {
                ex.feats = Some(self.features(&e.id)?);
            }
            match task {
                TaskKind::Pretrain => {}
                TaskKind::Asr => ex.ctc_ids = Some(self.chars.encode_chars(&e.transcript)),
                TaskKind::St => ex.tgt_ids = Some(self.tgt_bpe.encode(&e.translation)),
                TaskKind::Mt => {
                    ex.src_ids = Some(self.src_bpe.encode(&e.transcript));
                    ex.tgt_ids = Some(self.tgt_bpe.encode(&e.translation));
                }
                TaskKind::Joint => {
                    let v = self.pseudo_vocab()?;
                    let pseudo = e.pseudo_phones.as_deref().ok_or_else(|| {
                        CliError::data(format!(
                            "utterance {:?} has no pseudo_phones; joint training needs text.pseudo_asr at prepare time",
                            e.id
                        ))
                    })?;
                    let ids = v.encode_chars(pseudo);
                    ex.src_ids = Some(if ids.is_empty() { vec![v.eos()] } else { ids.clone() });
                    ex.ctc_ids = Some(ids);
                    ex.tgt_ids = Some(self.tgt_bpe.encode(&e.translation));
                }
            }
            if let (Some(labels), Some(f)) = (&ex.ctc_ids, &ex.feats) {
                if ctc_min_frames(labels) > model_cfg.encoder_len(f.rows()) {
                    skipped += 1;
                    continue;
                }
            }
            out.push(ex);
        }
        if skipped > 0 {
            log::warn!("skipped {skipped} {split} utterances too short for their CTC labels");
        }
        Ok(out)
    }

    pub fn special_ids(&self, task: TaskKind) -> SpecialIds {
        let tv = self.tgt_bpe.vocab();
        let blank = match task {
            TaskKind::Joint => self.pseudo_chars.as_ref().and_then(Vocabulary::blank),
            _ => self.chars.blank(),
        };
        SpecialIds {
            bos: tv.bos(),
            eos: tv.eos(),
            blank: blank.unwrap_or(0),
        }
    }

    /// `base` with the vocabulary sizes and heads the task needs.
    pub fn model_config(&self, base: &ModelConfig, task: TaskKind) -> Result<ModelConfig, CliError> {
        let mut c = base.clone();
        c.src_vocab = 0;
        c.tgt_vocab = 0;
        c.ctc_vocab = 0;
        c.mfp_head = false;
        let tgt = self.tgt_bpe.vocab().len();
        match task {
            TaskKind::Asr => c.ctc_vocab = self.chars.len(),
            TaskKind::St => c.tgt_vocab = tgt,
            TaskKind::Mt => {
                c.src_vocab = self.src_bpe.vocab().len();
                c.tgt_vocab = tgt;
            }
            TaskKind::Joint => {
                let v = self.pseudo_vocab()?.len();
                c.src_vocab = v;
                c.ctc_vocab = v;
                c.tgt_vocab = tgt;
            }
            TaskKind::Pretrain => c.mfp_head = true,
        }
        if c.feat_dim != self.frontend.n_mels {
            return Err(CliError::config(format!(
                "model.feat_dim {} differs from frontend.n_mels {}",
                c.feat_dim, self.frontend.n_mels
            )));
        }
        Ok(c)
    }
}

/// Copies every tensor of `source` that `target` also has. Shapes must agree.
pub fn copy_matching(target: &mut Model, source: &Model) -> Result<usize, CliError> {
    let mut copied = 0;
    let names: Vec<String> = target.params.names().map(str::to_string).collect();
    for name in names {
        if let Some(src) = source.params.get(&name) {
            let dst = target.params.get_mut(&name).expect("name from target");
            if dst.shape() != src.shape() {
                return Err(CliError::config(format!(
                    "cannot initialise {name}: checkpoint has {}x{}, model needs {}x{} (set train.retarget to resize the head)",
                    src.rows(),
                    src.cols(),
                    dst.rows(),
                    dst.cols()
                )));
            }
            *dst = src.clone();
            copied += 1;
        }
    }
    Ok(copied)
}

/// Fresh model for `cfg`, optionally initialised from a checkpoint that is
/// first truncated and/or re-targeted.
pub fn init_model(
    cfg: &ModelConfig,
    seed: u64,
    init_from: Option<&Model>,
    keep_layers: Option<usize>,
    retarget: Option<Head>,
    reinit_last_k: usize,
) -> Result<Model, CliError> {
    let mut model = Model::build(cfg.clone(), seed)?;
    if let Some(src) = init_from {
        let mut src = src.clone();
        if let Some(k) = keep_layers {
            src = truncate_encoder(&src, k)?;
        }
        if let Some(head) = retarget {
            let v = match head {
                Head::Ctc => cfg.ctc_vocab,
                Head::Decoder => cfg.tgt_vocab,
            };
            src = transfer_retarget(&src, head, v, reinit_last_k, seed)?;
        }
        let n = copy_matching(&mut model, &src)?;
        log::info!("initialised {n} tensors from checkpoint");
    }
    Ok(model)
}

pub fn parse_head(s: &str) -> Result<Head, CliError> {
    match s {
        "ctc" => Ok(Head::Ctc),
        "decoder" => Ok(Head::Decoder),
        other => Err(CliError::config(format!("train.retarget must be ctc or decoder, got {other:?}"))),
    }
}

// --- decoding -----------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOptions {
    pub beam: usize,
    pub nbest: usize,
    pub max_len: usize,
    pub guard_n: usize,
    pub guard_max_repeats: usize,
}

impl DecodeOptions {
    pub fn greedy(max_len: usize) -> Self {
        Self {
            beam: 1,
            nbest: 1,
            max_len,
            guard_n: 4,
            guard_max_repeats: 3,
        }
    }
}

/// Ranked `(text, score)` hypotheses for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub id: String,
    pub nbest: Vec<(String, f64)>,
    /// Whether the repetition guard cut the best hypothesis.
    pub truncated: bool,
}

impl Decoded {
    pub fn best(&self) -> &str {
        self.nbest.first().map_or("", |(t, _)| t.as_str())
    }
}

/// Beam search over a fixed encoder memory, detokenised with `bpe`.
pub fn decode_memory(model: &Model, memory: Matrix, bpe: &SubwordModel, opts: &DecodeOptions) -> Result<(Vec<(String, f64)>, bool), CliError> {
    let v = bpe.vocab();
    let scorer = model.scorer(memory, v.bos(), v.eos())?;
    let hyps = beam_search(&scorer, opts.beam, opts.max_len);
    let mut out = Vec::new();
    let mut truncated = false;
    for (rank, h) in hyps.iter().take(opts.nbest.max(1)).enumerate() {
        let g = repetition_guard(h.content(), v.eos(), opts.guard_n.max(1), opts.guard_max_repeats);
        if rank == 0 {
            truncated = g.truncated;
        }
        let toks: Vec<usize> = g.tokens.into_iter().filter(|&t| t != v.eos()).collect();
        out.push((bpe.decode(&toks)?, h.score));
    }
    Ok((out, truncated))
}

pub fn decode_st(model: &Model, data: &Prepared, entries: &[&ManifestEntry], opts: &DecodeOptions) -> Result<Vec<Decoded>, CliError> {
    entries
        .iter()
        .map(|e| {
            let mem = model.speech_memory(&data.features(&e.id)?)?;
            let (nbest, truncated) = decode_memory(model, mem, &data.tgt_bpe, opts)?;
            Ok(Decoded {
                id: e.id.clone(),
                nbest,
                truncated,
            })
        })
        .collect()
}

pub fn decode_mt_text(model: &Model, src: &str, src_bpe: &SubwordModel, tgt_bpe: &SubwordModel, opts: &DecodeOptions) -> Result<(Vec<(String, f64)>, bool), CliError> {
    let mut ids = src_bpe.encode(src);
    if ids.is_empty() {
        ids.push(src_bpe.vocab().unk());
    }
    let mem = model.text_memory(&ids)?;
    decode_memory(model, mem, tgt_bpe, opts)
}

/// Character LM tokens: one per character, spaces as `▁`.
pub fn lm_tokens(text: &str) -> Vec<String> {
    text.chars()
        .map(|c| if c == ' ' { "▁".to_string() } else { c.to_string() })
        .collect()
}

pub fn train_char_lm(texts: &[&str], order: usize) -> Result<NGramLM, CliError> {
    let sents: Vec<Vec<String>> = texts.iter().map(|t| lm_tokens(t)).collect();
    Ok(NGramLM::train(&sents, order, 0.75)?)
}

/// CTC n-best from alignment-path beam search, optionally reranked by a
/// character LM.
pub fn decode_asr_features(
    model: &Model,
    feats: &Matrix,
    chars: &Vocabulary,
    beam: usize,
    lm: Option<(&NGramLM, f64)>,
) -> Result<Vec<(String, f64)>, CliError> {
    let blank = chars
        .blank()
        .ok_or_else(|| CliError::data("ASR vocabulary has no blank"))?;
    let lp = model.ctc_log_probs(feats)?;
    let mut nbest: Vec<(String, f64)> = if beam <= 1 {
        vec![(chars.decode_chars(&ctc_greedy(&lp, blank))?, 0.0)]
    } else {
        ctc_path_nbest(&lp, blank, beam)
            .into_iter()
            .map(|(ids, s)| Ok((chars.decode_chars(&ids)?, s)))
            .collect::<Result<_, CliError>>()?
    };
    if let Some((lm, weight)) = lm {
        let entries: Vec<NBestEntry> = nbest
            .iter()
            .map(|(t, s)| NBestEntry {
                tokens: lm_tokens(t),
                model_score: *s,
            })
            .collect();
        let texts: Vec<String> = nbest.iter().map(|(t, _)| t.clone()).collect();
        let ranked = rescore_nbest(lm, entries, weight)?;
        nbest = ranked
            .into_iter()
            .map(|r| {
                let text = texts
                    .iter()
                    .find(|t| lm_tokens(t) == r.entry.tokens)
                    .cloned()
                    .unwrap_or_default();
                (text, r.total)
            })
            .collect();
    }
    Ok(nbest)
}

// --- scoring ------------------------------------------------------------

pub fn bleu_of(refs: &[&str], hyps: &[&str]) -> Result<ScoreReport, CliError> {
    Ok(bleu(refs, hyps, 4)?)
}

pub fn error_rate(refs: &[&str], hyps: &[&str], unit: Unit) -> Result<ScoreReport, CliError> {
    Ok(wer(refs, hyps, unit)?)
}

/// Greedy-decoded BLEU of an ST model on `split`.
pub fn st_bleu(model: &Model, data: &Prepared, split: Split, max_len: usize) -> Result<f64, CliError> {
    let entries = data.entries(split);
    let dec = decode_st(model, data, &entries, &DecodeOptions::greedy(max_len))?;
    let refs: Vec<&str> = entries.iter().map(|e| e.translation.as_str()).collect();
    let hyps: Vec<&str> = dec.iter().map(Decoded::best).collect();
    Ok(bleu_of(&refs, &hyps)?.corpus)
}

/// Greedy-decoded BLEU of an MT model on gold transcripts of `split`.
pub fn mt_bleu(model: &Model, data: &Prepared, split: Split, max_len: usize) -> Result<f64, CliError> {
    let entries = data.entries(split);
    let opts = DecodeOptions::greedy(max_len);
    let mut hyps = Vec::new();
    for e in &entries {
        hyps.push(decode_mt_text(model, &e.transcript, &data.src_bpe, &data.tgt_bpe, &opts)?.0[0].0.clone());
    }
    let refs: Vec<&str> = entries.iter().map(|e| e.translation.as_str()).collect();
    let hyps: Vec<&str> = hyps.iter().map(String::as_str).collect();
    Ok(bleu_of(&refs, &hyps)?.corpus)
}

/// Greedy CTC character error rate on `split`.
pub fn asr_cer(model: &Model, data: &Prepared, split: Split) -> Result<f64, CliError> {
    let entries = data.entries(split);
    let mut hyps = Vec::new();
    for e in &entries {
        let f = data.features(&e.id)?;
        hyps.push(decode_asr_features(model, &f, &data.chars, 1, None)?[0].0.clone());
    }
    let refs: Vec<&str> = entries.iter().map(|e| e.transcript.as_str()).collect();
    let hyps: Vec<&str> = hyps.iter().map(String::as_str).collect();
    Ok(error_rate(&refs, &hyps, Unit::Char)?.corpus)
}

/// `id<TAB>text` lines.
pub fn render_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> String {
    pairs.into_iter().map(|(id, t)| format!("{id}\t{t}\n")).collect()
}

pub fn parse_pairs(text: &str, path: &Path) -> Result<Vec<(String, String)>, CliError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            l.split_once('\t')
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .ok_or_else(|| CliError::data(format!("{}:{}: expected id<TAB>text", path.display(), i + 1)))
        })
        .collect()
}

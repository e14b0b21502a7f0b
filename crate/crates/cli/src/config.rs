//! Experiment configuration: TOML sections per module, strict keys,
//! `key=value` overrides and the `STWB_SEED` environment override.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stwb_core::corpus::{SyntheticLanguageSpec, ToyLanguage, ToyOptions};
use stwb_core::frontend::FrontendConfig;
use stwb_core::nnet::ModelConfig;
use stwb_core::training::{PretrainConfig, Schedule};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Asr,
    Mt,
    St,
    Joint,
    Pretrain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    /// Built-in toy language, `A` or `B`.
    pub language: String,
    pub n_utts: usize,
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    #[serde(default = "default_noise")]
    pub noise_std: f64,
    #[serde(default = "default_fpp")]
    pub frames_per_phone: [usize; 2],
    #[serde(default = "default_wpu")]
    pub words_per_utt: [usize; 2],
    #[serde(default = "default_n_words")]
    pub n_words: usize,
    #[serde(default = "default_reorder")]
    pub reorder_window: usize,
    #[serde(default = "default_feat_dim")]
    pub feat_dim: usize,
}

fn default_split() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}
fn default_noise() -> f64 {
    0.1
}
fn default_fpp() -> [usize; 2] {
    [4, 6]
}
fn default_wpu() -> [usize; 2] {
    [3, 6]
}
fn default_n_words() -> usize {
    16
}
fn default_reorder() -> usize {
    3
}
fn default_feat_dim() -> usize {
    40
}

impl CorpusSection {
    pub fn language_spec(&self, seed: u64) -> Result<SyntheticLanguageSpec, CliError> {
        let which: ToyLanguage = self
            .language
            .parse()
            .map_err(|e| CliError::config(format!("corpus.language: {e}")))?;
        Ok(SyntheticLanguageSpec::toy(
            which,
            &ToyOptions {
                feat_dim: self.feat_dim,
                n_words: self.n_words,
                noise_std: self.noise_std,
                frames_per_phone: (self.frames_per_phone[0], self.frames_per_phone[1]),
                words_per_utt: (self.words_per_utt[0], self.words_per_utt[1]),
                reorder_window: self.reorder_window,
                seed,
            },
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextSection {
    pub tgt_bpe_size: usize,
    pub src_bpe_size: usize,
    /// Adds 0.9x and 1.1x copies of every training utterance.
    pub speed_perturb: bool,
    /// Run directory of a foreign ASR used to fill pseudo-phonetic transcripts.
    pub pseudo_asr: Option<PathBuf>,
}

impl Default for TextSection {
    fn default() -> Self {
        Self {
            tgt_bpe_size: 64,
            src_bpe_size: 48,
            speed_perturb: false,
            pseudo_asr: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub task: Option<TaskKind>,
    /// Prepared data directory; defaults to the output directory.
    pub data_dir: Option<PathBuf>,
    pub init_from: Option<PathBuf>,
    /// `ctc` or `decoder`: resize that head of `init_from` to the new vocabulary.
    pub retarget: Option<String>,
    pub reinit_last_k: usize,
    /// Keep only the first N speech-encoder layers of `init_from`.
    pub keep_layers: Option<usize>,
    pub schedule: Schedule,
    pub pretrain: PretrainConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            task: None,
            data_dir: None,
            init_from: None,
            retarget: None,
            reinit_last_k: 2,
            keep_layers: None,
            schedule: Schedule::default(),
            pretrain: PretrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeSection {
    pub checkpoint: Option<PathBuf>,
    pub data_dir: Option<PathBuf>,
    pub split: String,
    pub beam: usize,
    pub nbest: usize,
    pub max_len: usize,
    /// n-gram order of the rescoring LM; 0 disables rescoring.
    pub lm_order: usize,
    pub lm_weight: f64,
    pub guard_n: usize,
    pub guard_max_repeats: usize,
    /// Cascade: ASR run checkpoint and MT run checkpoint.
    pub asr_checkpoint: Option<PathBuf>,
    pub mt_checkpoint: Option<PathBuf>,
    pub asr_data_dir: Option<PathBuf>,
    pub mt_data_dir: Option<PathBuf>,
    /// Cascade: feed gold transcripts to MT instead of ASR output.
    pub oracle_transcripts: bool,
}

impl Default for DecodeSection {
    fn default() -> Self {
        Self {
            checkpoint: None,
            data_dir: None,
            split: "test".into(),
            beam: 5,
            nbest: 5,
            max_len: 40,
            lm_order: 0,
            lm_weight: 0.0,
            guard_n: 4,
            guard_max_repeats: 3,
            asr_checkpoint: None,
            mt_checkpoint: None,
            asr_data_dir: None,
            mt_data_dir: None,
            oracle_transcripts: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub pretrained: Option<PathBuf>,
    pub keep: Vec<usize>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            pretrained: None,
            keep: vec![2, 4, 6, 8],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub refs: Option<PathBuf>,
    pub hyps: Option<PathBuf>,
    /// `bleu`, `wer`, `per` or `cer`.
    pub metric: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AverageSection {
    /// Checkpoints to average; the result is `<output_dir>/model.ckpt`.
    pub inputs: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub corpus: Option<CorpusSection>,
    #[serde(default)]
    pub frontend: FrontendConfig,
    #[serde(default)]
    pub text: TextSection,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub decode: DecodeSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub average: AverageSection,
}

/// Sets `a.b.c = value` inside a TOML table, creating tables on the way.
/// The value is parsed as TOML when possible and kept as a string otherwise.
fn apply_override(root: &mut toml::Value, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("override {assignment:?} is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = root;
    for p in &parts[..parts.len() - 1] {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| CliError::config(format!("override {key}: {p} is not a table")))?;
        cur = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    cur.as_table_mut()
        .ok_or_else(|| CliError::config(format!("override {key}: parent is not a table")))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self, CliError> {
        let mut value: toml::Value = toml::from_str(text).map_err(|e| CliError::config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let mut cfg: Self = value.try_into().map_err(|e: toml::de::Error| CliError::config(e.to_string()))?;
        if let Ok(s) = std::env::var("STWB_SEED") {
            cfg.seed = s
                .parse()
                .map_err(|_| CliError::config(format!("STWB_SEED={s:?} is not an integer")))?;
        }
        Ok(cfg)
    }

    /// Reads the file and resolves relative paths against its directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text, overrides)?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        for p in [
            &mut self.text.pseudo_asr,
            &mut self.train.data_dir,
            &mut self.train.init_from,
            &mut self.decode.checkpoint,
            &mut self.decode.data_dir,
            &mut self.decode.asr_checkpoint,
            &mut self.decode.mt_checkpoint,
            &mut self.decode.asr_data_dir,
            &mut self.decode.mt_data_dir,
            &mut self.sweep.pretrained,
            &mut self.eval.refs,
            &mut self.eval.hyps,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        self.average.inputs.iter_mut().for_each(fix);
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn corpus(&self) -> Result<&CorpusSection, CliError> {
        self.corpus
            .as_ref()
            .ok_or_else(|| CliError::config("missing [corpus] section (corpus.language, corpus.n_utts)"))
    }

    pub fn task(&self) -> Result<TaskKind, CliError> {
        self.train.task.ok_or_else(|| CliError::config("missing key train.task"))
    }
}

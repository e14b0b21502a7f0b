//! Synthetic three-way parallel corpora (audio, transcript, translation),
//! manifest files, and pseudo-phonetic transcription with a foreign ASR.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::decoding::ctc_greedy;
use crate::error::{Error, Result};
use crate::frontend::{self, CmvnStats, FrontendConfig};
use crate::io;
use crate::nnet::Model;
use crate::tensor::Matrix;
use crate::text::Vocabulary;

/// Symbol used for word boundaries in transcripts; rendered as silence.
pub const WORD_BOUNDARY: char = ' ';

/// Raw audio of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub enum Audio {
    /// `T x F` frame stream at a nominal sample rate.
    Frames { frames: Matrix, sample_rate: u32 },
    /// Mono waveform.
    Wave { samples: Vec<f64>, sample_rate: u32 },
}

impl Audio {
    pub fn sample_rate(&self) -> u32 {
        match self {
            Audio::Frames { sample_rate, .. } | Audio::Wave { sample_rate, .. } => *sample_rate,
        }
    }

    /// Frames for a frame stream, samples for a waveform.
    pub fn len(&self) -> usize {
        match self {
            Audio::Frames { frames, .. } => frames.rows(),
            Audio::Wave { samples, .. } => samples.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub audio: Audio,
    pub transcript: String,
    pub translation: String,
    pub pseudo_phones: Option<String>,
}

/// Generative description of a toy source language and its translation.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticLanguageSpec {
    pub name: String,
    pub phone_inventory: Vec<char>,
    /// Acoustic prototype per phone; [`WORD_BOUNDARY`] maps to the silence frame.
    pub prototype_map: BTreeMap<char, Vec<f64>>,
    /// Inclusive range of frames rendered per phone.
    pub frames_per_phone: (usize, usize),
    pub noise_std: f64,
    /// Source word → phone sequence.
    pub lexicon: BTreeMap<String, String>,
    /// Source word → target words (possibly empty).
    pub translation_map: BTreeMap<String, Vec<String>>,
    pub reorder_window: usize,
    /// Inclusive range of words per utterance.
    pub words_per_utt: (usize, usize),
    pub sample_rate: u32,
    pub seed: u64,
}

/// Phones shared by every toy language; each language uses a window of them.
const PHONE_TABLE: &str = "abcdefghijklmnop";
const ACOUSTIC_SEED: u64 = 0x5eed_ac05;
const TARGET_SYLLABLES: [&str; 20] = [
    "ka", "lo", "mi", "ne", "su", "ta", "vo", "ri", "pe", "du", "ga", "bi", "fo", "ju", "ze", "ho",
    "we", "ya", "no", "si",
];

/// Which toy language to instantiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyLanguage {
    /// Phones `a..l`.
    A,
    /// Phones `e..p`: overlaps `A` on `e..l`.
    B,
}

impl FromStr for ToyLanguage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(ToyLanguage::A),
            "B" | "b" => Ok(ToyLanguage::B),
            other => Err(Error::invalid(format!("unknown toy language {other:?} (expected A or B)"))),
        }
    }
}

/// Knobs for [`SyntheticLanguageSpec::toy`].
#[derive(Debug, Clone, PartialEq)]
pub struct ToyOptions {
    pub feat_dim: usize,
    pub n_words: usize,
    pub noise_std: f64,
    pub frames_per_phone: (usize, usize),
    pub words_per_utt: (usize, usize),
    pub reorder_window: usize,
    pub seed: u64,
}

impl Default for ToyOptions {
    fn default() -> Self {
        Self {
            feat_dim: 40,
            n_words: 16,
            noise_std: 0.1,
            frames_per_phone: (4, 6),
            words_per_utt: (3, 6),
            reorder_window: 3,
            seed: 7,
        }
    }
}

/// Prototype vectors for the shared phone table plus silence. The acoustic
/// space is fixed so the same phone sounds alike in every toy language.
pub fn shared_prototypes(feat_dim: usize) -> BTreeMap<char, Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(ACOUSTIC_SEED ^ feat_dim as u64);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut map = BTreeMap::new();
    for c in PHONE_TABLE.chars() {
        map.insert(c, (0..feat_dim).map(|_| normal.sample(&mut rng)).collect());
    }
    map.insert(WORD_BOUNDARY, vec![0.0; feat_dim]);
    map
}

impl SyntheticLanguageSpec {
    /// One of the two built-in toy languages.
    pub fn toy(which: ToyLanguage, opts: &ToyOptions) -> Self {
        let (name, phones, lang_salt) = match which {
            ToyLanguage::A => ("A", &PHONE_TABLE[0..12], 0xA),
            ToyLanguage::B => ("B", &PHONE_TABLE[4..16], 0xB),
        };
        let phone_inventory: Vec<char> = phones.chars().collect();
        let all = shared_prototypes(opts.feat_dim);
        let mut prototype_map: BTreeMap<char, Vec<f64>> = phone_inventory
            .iter()
            .map(|c| (*c, all[c].clone()))
            .collect();
        prototype_map.insert(WORD_BOUNDARY, all[&WORD_BOUNDARY].clone());

        // The lexicon depends only on the language, not the corpus seed.
        let mut rng = ChaCha8Rng::seed_from_u64(0x1e71c0 + lang_salt);
        let mut lexicon = BTreeMap::new();
        while lexicon.len() < opts.n_words {
            let len = rng.gen_range(2..=3);
            let word: String = (0..len)
                .map(|_| *phone_inventory.choose(&mut rng).expect("non-empty inventory"))
                .collect();
            lexicon.insert(word.clone(), word);
        }
        let mut targets: Vec<String> = Vec::new();
        let mut used = BTreeSet::new();
        while targets.len() < opts.n_words + opts.n_words / 4 {
            let n = rng.gen_range(1..=2);
            let w: String = (0..n)
                .map(|_| *TARGET_SYLLABLES.choose(&mut rng).expect("syllables"))
                .collect();
            if used.insert(w.clone()) {
                targets.push(w);
            }
        }
        let mut next_target = targets.into_iter();
        let translation_map = lexicon
            .keys()
            .enumerate()
            .map(|(i, w)| {
                let n = if i % 5 == 4 { 2 } else { 1 };
                (w.clone(), (0..n).filter_map(|_| next_target.next()).collect())
            })
            .collect();

        Self {
            name: name.to_string(),
            phone_inventory,
            prototype_map,
            frames_per_phone: opts.frames_per_phone,
            noise_std: opts.noise_std,
            lexicon,
            translation_map,
            reorder_window: opts.reorder_window,
            words_per_utt: opts.words_per_utt,
            sample_rate: 16000,
            seed: opts.seed,
        }
    }

    pub fn feat_dim(&self) -> usize {
        self.prototype_map.values().next().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lexicon.is_empty() {
            return Err(Error::invalid("lexicon is empty"));
        }
        let f = self.feat_dim();
        if f == 0 || self.prototype_map.values().any(|p| p.len() != f) {
            return Err(Error::invalid("prototypes must share one non-zero dimension"));
        }
        for (word, phones) in &self.lexicon {
            if phones.is_empty() {
                return Err(Error::invalid(format!("word {word:?} has no phones")));
            }
            for c in phones.chars() {
                if !self.prototype_map.contains_key(&c) || c == WORD_BOUNDARY {
                    return Err(Error::invalid(format!("word {word:?} uses unknown phone {c:?}")));
                }
            }
            if !self.translation_map.contains_key(word) {
                return Err(Error::invalid(format!("word {word:?} has no translation entry")));
            }
        }
        let (lo, hi) = self.frames_per_phone;
        if lo == 0 || lo > hi {
            return Err(Error::invalid("frames_per_phone must be a non-empty range starting at 1 or more"));
        }
        let (wlo, whi) = self.words_per_utt;
        if wlo == 0 || wlo > whi {
            return Err(Error::invalid("words_per_utt must be a non-empty range starting at 1 or more"));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::invalid("noise_std must be non-negative"));
        }
        Ok(())
    }
}

/// Checks that two toy languages share some phones without being identical.
pub fn check_language_pair(a: &SyntheticLanguageSpec, b: &SyntheticLanguageSpec) -> Result<usize> {
    let sa: BTreeSet<char> = a.phone_inventory.iter().copied().collect();
    let sb: BTreeSet<char> = b.phone_inventory.iter().copied().collect();
    let shared = sa.intersection(&sb).count();
    if shared == 0 {
        return Err(Error::invalid("phone inventories do not overlap"));
    }
    if sa == sb {
        return Err(Error::invalid("phone inventories are identical"));
    }
    Ok(shared)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub audio_ref: String,
    pub transcript: String,
    pub translation: String,
    pub split: Split,
    pub pseudo_phones: Option<String>,
}

/// Ordered utterance records with unique ids.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    entries: Vec<ManifestEntry>,
}

fn check_field(name: &str, value: &str) -> Result<()> {
    if value.contains('\t') || value.contains('\n') || value.contains('\r') {
        return Err(Error::invalid(format!("{name} {value:?} contains a tab or newline")));
    }
    Ok(())
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::invalid(format!("duplicate utterance id {:?}", e.id)));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ManifestEntry] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    /// Tab-separated, one utterance per line:
    /// `id audio_ref transcript translation split [pseudo_phones]`.
    pub fn to_tsv(&self) -> Result<String> {
        let mut s = String::new();
        for e in &self.entries {
            for (n, v) in [
                ("id", &e.id),
                ("audio_ref", &e.audio_ref),
                ("transcript", &e.transcript),
                ("translation", &e.translation),
            ] {
                check_field(n, v)?;
            }
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}",
                e.id, e.audio_ref, e.transcript, e.translation, e.split
            ));
            if let Some(p) = &e.pseudo_phones {
                check_field("pseudo_phones", p)?;
                s.push('\t');
                s.push_str(p);
            }
            s.push('\n');
        }
        Ok(s)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                msg,
            };
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 && f.len() != 6 {
                return Err(err(format!("expected 5 or 6 tab-separated fields, found {}", f.len())));
            }
            if f[0].is_empty() {
                return Err(err("empty utterance id".into()));
            }
            let split = f[4].parse::<Split>().map_err(err)?;
            if !seen.insert(f[0].to_string()) {
                return Err(err(format!("duplicate utterance id {:?}", f[0])));
            }
            entries.push(ManifestEntry {
                id: f[0].to_string(),
                audio_ref: f[1].to_string(),
                transcript: f[2].to_string(),
                translation: f[3].to_string(),
                split,
                pseudo_phones: f.get(5).map(|s| s.to_string()),
            });
        }
        Ok(Self { entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()?).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::parse(&text, path)
    }

    /// Confirms every `audio_ref` exists relative to `base`.
    pub fn check_audio(&self, base: &Path) -> Result<()> {
        for e in &self.entries {
            let p = base.join(&e.audio_ref);
            if !p.is_file() {
                return Err(Error::Data(format!(
                    "audio for {:?} not found at {}",
                    e.id,
                    p.display()
                )));
            }
        }
        Ok(())
    }

    /// Loads every frame stream referenced by the manifest.
    pub fn load_audio(&self, base: &Path) -> Result<BTreeMap<String, Matrix>> {
        let mut out = BTreeMap::new();
        for e in &self.entries {
            let (m, _) = io::read_frame_stream(&base.join(&e.audio_ref))?;
            out.insert(e.id.clone(), m);
        }
        Ok(out)
    }
}

/// Generated corpus: manifest plus in-memory frame streams keyed by id.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub manifest: Manifest,
    pub audio: BTreeMap<String, Matrix>,
    pub sample_rate: u32,
    /// Utterances discarded because their translation came out empty.
    pub dropped_empty: usize,
}

impl Corpus {
    /// Writes `manifest.tsv` and `audio/<id>.frames` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let audio_dir = dir.join("audio");
        fs::create_dir_all(&audio_dir).map_err(|e| Error::io(audio_dir.display().to_string(), e))?;
        for e in self.manifest.entries() {
            io::write_frame_stream(&dir.join(&e.audio_ref), &self.audio[&e.id], self.sample_rate)?;
        }
        let path = dir.join("manifest.tsv");
        self.manifest.write(&path)?;
        Ok(path)
    }

    pub fn utterance(&self, id: &str) -> Option<Utterance> {
        let e = self.manifest.entries().iter().find(|e| e.id == id)?;
        Some(Utterance {
            id: e.id.clone(),
            audio: Audio::Frames {
                frames: self.audio.get(id)?.clone(),
                sample_rate: self.sample_rate,
            },
            transcript: e.transcript.clone(),
            translation: e.translation.clone(),
            pseudo_phones: e.pseudo_phones.clone(),
        })
    }
}

fn split_counts(n: usize, ratios: (f64, f64, f64)) -> Result<(usize, usize, usize)> {
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| !(*r >= 0.0)) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let train = (n as f64 * a).round() as usize;
    let valid = ((n as f64 * b).round() as usize).min(n - train);
    Ok((train, valid, n - train - valid))
}

/// Frames for a transcript: each symbol's prototype repeated a random
/// number of times, plus Gaussian noise.
fn render_frames(spec: &SyntheticLanguageSpec, transcript: &str, rng: &mut ChaCha8Rng) -> Matrix {
    let f = spec.feat_dim();
    let noise = Normal::new(0.0, spec.noise_std.max(0.0)).expect("valid noise std");
    let (lo, hi) = spec.frames_per_phone;
    let mut data = Vec::new();
    let mut rows = 0;
    for c in transcript.chars() {
        let proto = &spec.prototype_map[&c];
        let k = rng.gen_range(lo..=hi);
        for _ in 0..k {
            for &p in proto {
                let n = if spec.noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
                // Stored at file precision so in-memory and on-disk corpora agree.
                data.push((p + n) as f32 as f64);
            }
            rows += 1;
        }
    }
    Matrix::from_vec(rows, f, data)
}

fn fnv1a(salt: u64, bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ salt;
    for &b in bytes {
        h = (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Word-order rule of a language: roughly a quarter of its source words
/// are "swap triggers" whose translation trades places with the next word's.
fn is_swap_trigger(word: &str, language: &str) -> bool {
    fnv1a(fnv1a(0, language.as_bytes()), word.as_bytes()) >> 62 == 0
}

/// Left-to-right scan over per-word translation groups; after a swap the
/// next `window - 1` positions are left alone, so each window sees at most
/// one swap.
fn reorder(words: &[&String], groups: &mut [Vec<String>], window: usize, language: &str) {
    if window < 2 {
        return;
    }
    let mut order: Vec<usize> = (0..groups.len()).collect();
    let mut i = 0;
    while i + 1 < order.len() {
        if is_swap_trigger(words[i], language) {
            order.swap(i, i + 1);
            i += window;
        } else {
            i += 1;
        }
    }
    let orig = groups.to_vec();
    for (slot, &src) in groups.iter_mut().zip(&order) {
        *slot = orig[src].clone();
    }
}

/// Deterministically samples `n_utts` utterances from `spec` and assigns
/// the first `round(n·train)` to train, the next `round(n·valid)` to valid,
/// and the rest to test. Utterances whose translation is empty are
/// regenerated and counted in [`Corpus::dropped_empty`].
pub fn generate_corpus(
    spec: &SyntheticLanguageSpec,
    n_utts: usize,
    split_ratios: (f64, f64, f64),
) -> Result<Corpus> {
    spec.validate()?;
    if n_utts < 10 {
        return Err(Error::invalid(format!("n_utts must be at least 10, got {n_utts}")));
    }
    let (n_train, n_valid, _) = split_counts(n_utts, split_ratios)?;
    if spec.translation_map.values().all(Vec::is_empty) {
        return Err(Error::invalid("every word has an empty translation"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let words: Vec<&String> = spec.lexicon.keys().collect();
    let mut entries = Vec::with_capacity(n_utts);
    let mut audio = BTreeMap::new();
    let mut dropped = 0;
    while entries.len() < n_utts {
        let n_words = rng.gen_range(spec.words_per_utt.0..=spec.words_per_utt.1);
        let chosen: Vec<&String> = (0..n_words).map(|_| *words.choose(&mut rng).expect("lexicon")).collect();
        let transcript = chosen
            .iter()
            .map(|w| spec.lexicon[*w].as_str())
            .collect::<Vec<_>>()
            .join(&WORD_BOUNDARY.to_string());
        let mut groups: Vec<Vec<String>> = chosen.iter().map(|w| spec.translation_map[*w].clone()).collect();
        reorder(&chosen, &mut groups, spec.reorder_window, &spec.name);
        let target: Vec<String> = groups.concat();
        let frames = render_frames(spec, &transcript, &mut rng);
        if target.is_empty() {
            dropped += 1;
            continue;
        }
        let i = entries.len();
        let id = format!("{}-{i:05}", spec.name);
        let split = if i < n_train {
            Split::Train
        } else if i < n_train + n_valid {
            Split::Valid
        } else {
            Split::Test
        };
        entries.push(ManifestEntry {
            audio_ref: format!("audio/{id}.frames"),
            id: id.clone(),
            transcript,
            translation: target.join(" "),
            split,
            pseudo_phones: None,
        });
        audio.insert(id, frames);
    }
    if dropped > 0 {
        log::info!("dropped {dropped} utterances with empty translations");
    }
    Ok(Corpus {
        manifest: Manifest::new(entries)?,
        audio,
        sample_rate: spec.sample_rate,
        dropped_empty: dropped,
    })
}

/// Audio-only view of an utterance; carries no transcript.
#[derive(Debug, Clone, Copy)]
pub struct AudioView<'a> {
    pub id: &'a str,
    pub frames: &'a Matrix,
}

/// Greedy CTC transcription of each view with `asr`, returned as
/// `(id, text)` pairs in input order.
pub fn transcribe_views(
    views: &[AudioView<'_>],
    asr: &Model,
    vocab: &Vocabulary,
    frontend_cfg: &FrontendConfig,
    cmvn: Option<&CmvnStats>,
) -> Result<Vec<(String, String)>> {
    if vocab.len() <= vocab.n_reserved() {
        return Err(Error::invalid("ASR vocabulary has no output symbols"));
    }
    let blank = vocab
        .blank()
        .ok_or_else(|| Error::invalid("ASR vocabulary has no blank symbol"))?;
    views
        .iter()
        .map(|v| {
            let feats = frontend::features_from_frames(v.frames, frontend_cfg, cmvn)?;
            let lp = asr.ctc_log_probs(&feats)?;
            let ids = ctc_greedy(&lp, blank);
            Ok((v.id.to_string(), vocab.decode_chars(&ids)?))
        })
        .collect()
}

/// Fills `pseudo_phones` for every entry by decoding its audio with a
/// (possibly foreign-language) CTC model. Transcripts are never read.
pub fn pseudo_phonetize(
    manifest: &Manifest,
    audio: &BTreeMap<String, Matrix>,
    asr: &Model,
    vocab: &Vocabulary,
    frontend_cfg: &FrontendConfig,
    cmvn: Option<&CmvnStats>,
) -> Result<Manifest> {
    let views: Vec<AudioView<'_>> = manifest
        .entries()
        .iter()
        .map(|e| {
            audio
                .get(&e.id)
                .map(|frames| AudioView { id: &e.id, frames })
                .ok_or_else(|| Error::Data(format!("no audio for {:?}", e.id)))
        })
        .collect::<Result<_>>()?;
    let decoded = transcribe_views(&views, asr, vocab, frontend_cfg, cmvn)?;
    let mut out = manifest.clone();
    for (e, (_, text)) in out.entries.iter_mut().zip(decoded) {
        e.pseudo_phones = Some(text);
    }
    Ok(out)
}

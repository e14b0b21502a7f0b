//! Speech encoder, text encoder, attention decoder and CTC head built on
//! [`Graph`], plus truncation, freezing, re-targeting and checkpoints.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{conv_out_len, Graph, Var};
use crate::decoding::StepScorer;
use crate::error::{Error, Result};
use crate::io;
use crate::params::ParamSet;
use crate::tensor::{log_softmax_rows, Matrix};

const CHECKPOINT_MAGIC: &str = "stwb-checkpoint 1";
const MASK_NEG: f64 = -1e9;
const CTC_HIDDEN_SLOPE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockType {
    Transformer,
    Conformer,
}

impl FromStr for BlockType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transformer" => Ok(BlockType::Transformer),
            "conformer" => Ok(BlockType::Conformer),
            other => Err(Error::invalid(format!("unknown block type {other:?}"))),
        }
    }
}

impl BlockType {
    fn as_str(self) -> &'static str {
        match self {
            BlockType::Transformer => "transformer",
            BlockType::Conformer => "conformer",
        }
    }
}

/// Architecture hyperparameters. A vocabulary size of 0 omits that part:
/// `src_vocab = 0` means no text encoder, `tgt_vocab = 0` no decoder,
/// `ctc_vocab = 0` no CTC head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub block_type: BlockType,
    pub feat_dim: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub conv_kernel: usize,
    pub conv_stride: usize,
    /// Depthwise kernel of the conformer convolution module (odd).
    pub dw_kernel: usize,
    pub n_enc_layers: usize,
    pub src_vocab: usize,
    pub n_text_layers: usize,
    pub tgt_vocab: usize,
    pub n_dec_layers: usize,
    pub ctc_vocab: usize,
    /// Width of the hidden layer in the CTC head; 0 makes the head linear.
    pub ctc_hidden: usize,
    /// Adds the masked-frame reconstruction head.
    pub mfp_head: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            block_type: BlockType::Transformer,
            feat_dim: 40,
            d_model: 32,
            n_heads: 2,
            d_ff: 64,
            conv_kernel: 5,
            conv_stride: 2,
            dw_kernel: 3,
            n_enc_layers: 4,
            src_vocab: 0,
            n_text_layers: 2,
            tgt_vocab: 0,
            n_dec_layers: 3,
            ctc_vocab: 0,
            ctc_hidden: 32,
            mfp_head: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("feat_dim", self.feat_dim),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("conv_kernel", self.conv_kernel),
            ("conv_stride", self.conv_stride),
            ("n_enc_layers", self.n_enc_layers),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.block_type == BlockType::Conformer && self.dw_kernel % 2 == 0 {
            return Err(Error::invalid("dw_kernel must be odd"));
        }
        if self.tgt_vocab > 0 && self.n_dec_layers == 0 {
            return Err(Error::invalid("a decoder needs at least one layer"));
        }
        if self.src_vocab > 0 && self.tgt_vocab == 0 {
            return Err(Error::invalid("a text encoder needs a decoder"));
        }
        Ok(())
    }

    /// Encoder positions after the strided input convolution.
    pub fn encoder_len(&self, frames: usize) -> usize {
        conv_out_len(frames, self.conv_kernel, self.conv_stride)
    }

    fn to_kv(&self) -> String {
        let mut s = String::new();
        writeln!(s, "block_type={}", self.block_type.as_str()).unwrap();
        for (k, v) in self.numeric_fields() {
            writeln!(s, "{k}={v}").unwrap();
        }
        writeln!(s, "mfp_head={}", self.mfp_head).unwrap();
        s
    }

    fn numeric_fields(&self) -> [(&'static str, usize); 14] {
        [
            ("feat_dim", self.feat_dim),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("conv_kernel", self.conv_kernel),
            ("conv_stride", self.conv_stride),
            ("dw_kernel", self.dw_kernel),
            ("n_enc_layers", self.n_enc_layers),
            ("src_vocab", self.src_vocab),
            ("n_text_layers", self.n_text_layers),
            ("tgt_vocab", self.tgt_vocab),
            ("n_dec_layers", self.n_dec_layers),
            ("ctc_vocab", self.ctc_vocab),
            ("ctc_hidden", self.ctc_hidden),
        ]
    }

    fn set_kv(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let num = || value.parse::<usize>().map_err(|e| format!("{key}: {e}"));
        match key {
            "block_type" => self.block_type = value.parse().map_err(|e: Error| e.to_string())?,
            "mfp_head" => self.mfp_head = value.parse().map_err(|e| format!("{key}: {e}"))?,
            "feat_dim" => self.feat_dim = num()?,
            "d_model" => self.d_model = num()?,
            "n_heads" => self.n_heads = num()?,
            "d_ff" => self.d_ff = num()?,
            "conv_kernel" => self.conv_kernel = num()?,
            "conv_stride" => self.conv_stride = num()?,
            "dw_kernel" => self.dw_kernel = num()?,
            "n_enc_layers" => self.n_enc_layers = num()?,
            "src_vocab" => self.src_vocab = num()?,
            "n_text_layers" => self.n_text_layers = num()?,
            "tgt_vocab" => self.tgt_vocab = num()?,
            "n_dec_layers" => self.n_dec_layers = num()?,
            "ctc_vocab" => self.ctc_vocab = num()?,
            "ctc_hidden" => self.ctc_hidden = num()?,
            _ => return Err(format!("unknown config key {key:?}")),
        }
        Ok(())
    }
}

type Shape = (String, usize, usize);

fn push_ln(v: &mut Vec<Shape>, p: &str, d: usize) {
    v.push((format!("{p}.g"), 1, d));
    v.push((format!("{p}.b"), 1, d));
}

fn push_linear(v: &mut Vec<Shape>, p: &str, i: usize, o: usize) {
    v.push((format!("{p}.w"), i, o));
    v.push((format!("{p}.b"), 1, o));
}

fn push_attn(v: &mut Vec<Shape>, p: &str, d: usize) {
    for m in ["wq", "wk", "wv"] {
        v.push((format!("{p}.{m}"), d, d));
    }
    push_linear(v, &format!("{p}.out"), d, d);
}

fn push_ff(v: &mut Vec<Shape>, p: &str, d: usize, dff: usize) {
    push_linear(v, &format!("{p}.w1"), d, dff);
    push_linear(v, &format!("{p}.w2"), dff, d);
}

fn encoder_layer_shapes(cfg: &ModelConfig, p: &str, v: &mut Vec<Shape>) {
    let d = cfg.d_model;
    match cfg.block_type {
        BlockType::Transformer => {
            push_ln(v, &format!("{p}.ln_attn"), d);
            push_attn(v, &format!("{p}.attn"), d);
            push_ln(v, &format!("{p}.ln_ff"), d);
            push_ff(v, &format!("{p}.ff"), d, cfg.d_ff);
        }
        BlockType::Conformer => {
            push_ln(v, &format!("{p}.ln_ff1"), d);
            push_ff(v, &format!("{p}.ff1"), d, cfg.d_ff);
            push_ln(v, &format!("{p}.ln_attn"), d);
            push_attn(v, &format!("{p}.attn"), d);
            push_ln(v, &format!("{p}.ln_conv"), d);
            push_linear(v, &format!("{p}.conv.pw1"), d, 2 * d);
            push_linear(v, &format!("{p}.conv.dw"), cfg.dw_kernel, d);
            push_linear(v, &format!("{p}.conv.pw2"), d, d);
            push_ln(v, &format!("{p}.ln_ff2"), d);
            push_ff(v, &format!("{p}.ff2"), d, cfg.d_ff);
            push_ln(v, &format!("{p}.ln_out"), d);
        }
    }
}

fn decoder_layer_shapes(cfg: &ModelConfig, p: &str, v: &mut Vec<Shape>) {
    let d = cfg.d_model;
    push_ln(v, &format!("{p}.ln_self"), d);
    push_attn(v, &format!("{p}.self_attn"), d);
    push_ln(v, &format!("{p}.ln_cross"), d);
    push_attn(v, &format!("{p}.cross_attn"), d);
    push_ln(v, &format!("{p}.ln_ff"), d);
    push_ff(v, &format!("{p}.ff"), d, cfg.d_ff);
}

/// Every parameter `(name, rows, cols)` in initialisation order.
pub fn shape_spec(cfg: &ModelConfig) -> Vec<Shape> {
    let d = cfg.d_model;
    let mut v = Vec::new();
    push_linear(&mut v, "enc.conv", cfg.conv_kernel * cfg.feat_dim, d);
    for i in 0..cfg.n_enc_layers {
        encoder_layer_shapes(cfg, &format!("enc.layers.{i}"), &mut v);
    }
    push_ln(&mut v, "enc.final_ln", d);
    push_linear(&mut v, "enc.proj", d, d);
    if cfg.ctc_vocab > 0 {
        if cfg.ctc_hidden > 0 {
            push_linear(&mut v, "ctc.hidden", d, cfg.ctc_hidden);
            push_linear(&mut v, "ctc.out", cfg.ctc_hidden, cfg.ctc_vocab);
        } else {
            push_linear(&mut v, "ctc.out", d, cfg.ctc_vocab);
        }
    }
    if cfg.src_vocab > 0 {
        v.push(("txt.emb.w".into(), cfg.src_vocab, d));
        for i in 0..cfg.n_text_layers {
            encoder_layer_shapes(
                &ModelConfig {
                    block_type: BlockType::Transformer,
                    ..cfg.clone()
                },
                &format!("txt.layers.{i}"),
                &mut v,
            );
        }
        push_ln(&mut v, "txt.final_ln", d);
    }
    if cfg.tgt_vocab > 0 {
        v.push(("dec.emb.w".into(), cfg.tgt_vocab, d));
        for i in 0..cfg.n_dec_layers {
            decoder_layer_shapes(cfg, &format!("dec.layers.{i}"), &mut v);
        }
        push_ln(&mut v, "dec.final_ln", d);
        push_linear(&mut v, "dec.out", d, cfg.tgt_vocab);
    }
    if cfg.mfp_head {
        push_linear(&mut v, "mfp.head", d, cfg.feat_dim);
    }
    v
}

/// Xavier-uniform weights, zero biases and unit layer-norm gains.
fn init_tensor(name: &str, rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    if name.ends_with(".g") {
        Matrix::filled(rows, cols, 1.0)
    } else if name.ends_with(".b") {
        Matrix::zeros(rows, cols)
    } else {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        Matrix::uniform(rows, cols, bound, rng)
    }
}

/// Fixed sinusoidal position table, `len x d`.
pub fn sinusoidal_positions(len: usize, d: usize) -> Matrix {
    let mut m = Matrix::zeros(len, d);
    for pos in 0..len {
        for i in 0..d {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let a = pos as f64 * rate;
            m.set(pos, i, if i % 2 == 0 { a.sin() } else { a.cos() });
        }
    }
    m
}

fn causal_mask(len: usize) -> Matrix {
    let mut m = Matrix::zeros(len, len);
    for r in 0..len {
        for c in r + 1..len {
            m.set(r, c, MASK_NEG);
        }
    }
    m
}

/// Which output head [`transfer_retarget`] operates on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Ctc,
    Decoder,
}

/// Named parameter tensors plus the configuration that shapes them.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
}

impl Model {
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (name, r, c) in shape_spec(&config) {
            let t = init_tensor(&name, r, c, &mut rng);
            params.insert(name, t);
        }
        Ok(Self { config, params })
    }

    /// Wraps existing tensors, checking names and shapes against `config`.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let spec = shape_spec(&config);
        for (name, r, c) in &spec {
            match params.get(name) {
                None => {
                    return Err(Error::Shape {
                        name: name.clone(),
                        expected: format!("{r}x{c}"),
                        found: "missing".into(),
                    })
                }
                Some(m) if m.shape() != (*r, *c) => {
                    return Err(Error::Shape {
                        name: name.clone(),
                        expected: format!("{r}x{c}"),
                        found: format!("{}x{}", m.rows(), m.cols()),
                    })
                }
                _ => {}
            }
        }
        if params.len() != spec.len() {
            let known: BTreeSet<&str> = spec.iter().map(|s| s.0.as_str()).collect();
            let extra = params.names().find(|n| !known.contains(n)).unwrap_or("?");
            return Err(Error::Shape {
                name: extra.to_string(),
                expected: "absent".into(),
                found: "unexpected tensor".into(),
            });
        }
        Ok(Self { config, params })
    }

    pub fn count_parameters(&self) -> usize {
        self.params.scalar_count()
    }

    pub fn has_ctc(&self) -> bool {
        self.config.ctc_vocab > 0
    }

    pub fn has_decoder(&self) -> bool {
        self.config.tgt_vocab > 0
    }

    pub fn has_text_encoder(&self) -> bool {
        self.config.src_vocab > 0
    }

    // --- graph builders -------------------------------------------------

    fn linear(g: &mut Graph<'_>, x: Var, p: &str) -> Var {
        let w = g.param(&format!("{p}.w"));
        let b = g.param(&format!("{p}.b"));
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    fn ln(g: &mut Graph<'_>, x: Var, p: &str) -> Var {
        let gamma = g.param(&format!("{p}.g"));
        let beta = g.param(&format!("{p}.b"));
        g.layer_norm(x, gamma, beta)
    }

    fn attention(&self, g: &mut Graph<'_>, q_in: Var, kv_in: Var, p: &str, mask: Option<&Matrix>) -> Var {
        let d = self.config.d_model;
        let h = self.config.n_heads;
        let dh = d / h;
        let wq = g.param(&format!("{p}.wq"));
        let wk = g.param(&format!("{p}.wk"));
        let wv = g.param(&format!("{p}.wv"));
        let q = g.matmul(q_in, wq);
        let k = g.matmul(kv_in, wk);
        let v = g.matmul(kv_in, wv);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(h);
        for i in 0..h {
            let (qi, ki, vi) = if h == 1 {
                (q, k, v)
            } else {
                (g.slice_cols(q, i * dh, dh), g.slice_cols(k, i * dh, dh), g.slice_cols(v, i * dh, dh))
            };
            let s = g.matmul_nt(qi, ki);
            let mut s = g.scale(s, scale);
            if let Some(m) = mask {
                s = g.add_const(s, m);
            }
            let a = g.softmax_rows(s);
            heads.push(g.matmul(a, vi));
        }
        let cat = if h == 1 { heads[0] } else { g.concat_cols(&heads) };
        Self::linear(g, cat, &format!("{p}.out"))
    }

    fn feed_forward(g: &mut Graph<'_>, x: Var, p: &str) -> Var {
        let h = Self::linear(g, x, &format!("{p}.w1"));
        let h = g.relu(h);
        Self::linear(g, h, &format!("{p}.w2"))
    }

    fn encoder_layer(&self, g: &mut Graph<'_>, x: Var, p: &str, block: BlockType) -> Var {
        match block {
            BlockType::Transformer => {
                let n = Self::ln(g, x, &format!("{p}.ln_attn"));
                let a = self.attention(g, n, n, &format!("{p}.attn"), None);
                let x = g.add(x, a);
                let n = Self::ln(g, x, &format!("{p}.ln_ff"));
                let f = Self::feed_forward(g, n, &format!("{p}.ff"));
                g.add(x, f)
            }
            BlockType::Conformer => {
                let d = self.config.d_model;
                let n = Self::ln(g, x, &format!("{p}.ln_ff1"));
                let f = Self::feed_forward(g, n, &format!("{p}.ff1"));
                let f = g.scale(f, 0.5);
                let x = g.add(x, f);
                let n = Self::ln(g, x, &format!("{p}.ln_attn"));
                let a = self.attention(g, n, n, &format!("{p}.attn"), None);
                let x = g.add(x, a);
                let n = Self::ln(g, x, &format!("{p}.ln_conv"));
                let c = Self::linear(g, n, &format!("{p}.conv.pw1"));
                let (lin, gate) = (g.slice_cols(c, 0, d), g.slice_cols(c, d, d));
                let gate = g.sigmoid(gate);
                let c = g.mul(lin, gate);
                let w = g.param(&format!("{p}.conv.dw.w"));
                let b = g.param(&format!("{p}.conv.dw.b"));
                let c = g.depthwise_conv(c, w);
                let c = g.add_row(c, b);
                let c = g.swish(c);
                let c = Self::linear(g, c, &format!("{p}.conv.pw2"));
                let x = g.add(x, c);
                let n = Self::ln(g, x, &format!("{p}.ln_ff2"));
                let f = Self::feed_forward(g, n, &format!("{p}.ff2"));
                let f = g.scale(f, 0.5);
                let x = g.add(x, f);
                Self::ln(g, x, &format!("{p}.ln_out"))
            }
        }
    }

    fn add_positions(g: &mut Graph<'_>, x: Var) -> Var {
        let (t, d) = g.value(x).shape();
        g.add_const(x, &sinusoidal_positions(t, d))
    }

    /// Strided convolution then the encoder stack, final norm and
    /// projection: `T x feat_dim` features to `T' x d_model` memory.
    pub fn encode_speech(&self, g: &mut Graph<'_>, feats: Var) -> Var {
        let cols = g.im2col(feats, self.config.conv_kernel, self.config.conv_stride);
        let x = Self::linear(g, cols, "enc.conv");
        let x = g.relu(x);
        let mut x = Self::add_positions(g, x);
        for i in 0..self.config.n_enc_layers {
            x = self.encoder_layer(g, x, &format!("enc.layers.{i}"), self.config.block_type);
        }
        let x = Self::ln(g, x, "enc.final_ln");
        Self::linear(g, x, "enc.proj")
    }

    /// Unnormalised CTC scores over the encoder output.
    pub fn ctc_logits(&self, g: &mut Graph<'_>, enc: Var) -> Var {
        if self.config.ctc_hidden > 0 {
            let h = Self::linear(g, enc, "ctc.hidden");
            let h = g.leaky_relu(h, CTC_HIDDEN_SLOPE);
            Self::linear(g, h, "ctc.out")
        } else {
            Self::linear(g, enc, "ctc.out")
        }
    }

    /// Frame reconstructions from the encoder output, `T' x feat_dim`.
    pub fn mfp_predictions(&self, g: &mut Graph<'_>, enc: Var) -> Var {
        Self::linear(g, enc, "mfp.head")
    }

    pub fn encode_text(&self, g: &mut Graph<'_>, ids: &[usize]) -> Var {
        let emb = g.param("txt.emb.w");
        let x = g.gather(emb, ids);
        let x = g.scale(x, (self.config.d_model as f64).sqrt());
        let mut x = Self::add_positions(g, x);
        for i in 0..self.config.n_text_layers {
            x = self.encoder_layer(g, x, &format!("txt.layers.{i}"), BlockType::Transformer);
        }
        Self::ln(g, x, "txt.final_ln")
    }

    /// Teacher-forced decoder scores: row `i` predicts the token after `inputs[..=i]`.
    pub fn decoder_logits(&self, g: &mut Graph<'_>, memory: Var, inputs: &[usize]) -> Var {
        let emb = g.param("dec.emb.w");
        let x = g.gather(emb, inputs);
        let x = g.scale(x, (self.config.d_model as f64).sqrt());
        let mut x = Self::add_positions(g, x);
        let mask = causal_mask(inputs.len());
        for i in 0..self.config.n_dec_layers {
            let p = format!("dec.layers.{i}");
            let n = Self::ln(g, x, &format!("{p}.ln_self"));
            let a = self.attention(g, n, n, &format!("{p}.self_attn"), Some(&mask));
            x = g.add(x, a);
            let n = Self::ln(g, x, &format!("{p}.ln_cross"));
            let a = self.attention(g, n, memory, &format!("{p}.cross_attn"), None);
            x = g.add(x, a);
            let n = Self::ln(g, x, &format!("{p}.ln_ff"));
            let f = Self::feed_forward(g, n, &format!("{p}.ff"));
            x = g.add(x, f);
        }
        let x = Self::ln(g, x, "dec.final_ln");
        Self::linear(g, x, "dec.out")
    }

    // --- inference ------------------------------------------------------

    fn check_feats(&self, feats: &Matrix) -> Result<()> {
        if feats.cols() != self.config.feat_dim || feats.rows() == 0 {
            return Err(Error::Shape {
                name: "features".into(),
                expected: format!("T x {}", self.config.feat_dim),
                found: format!("{}x{}", feats.rows(), feats.cols()),
            });
        }
        Ok(())
    }

    pub fn speech_memory(&self, feats: &Matrix) -> Result<Matrix> {
        self.check_feats(feats)?;
        let mut g = Graph::inference(&self.params);
        let x = g.input(feats.clone());
        let m = self.encode_speech(&mut g, x);
        Ok(g.value(m).clone())
    }

    pub fn text_memory(&self, ids: &[usize]) -> Result<Matrix> {
        if !self.has_text_encoder() {
            return Err(Error::invalid("model has no text encoder"));
        }
        if ids.is_empty() {
            return Err(Error::invalid("empty source sequence"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.config.src_vocab) {
            return Err(Error::invalid(format!("source id {bad} out of range")));
        }
        let mut g = Graph::inference(&self.params);
        let m = self.encode_text(&mut g, ids);
        Ok(g.value(m).clone())
    }

    /// Per-frame CTC log-probabilities.
    pub fn ctc_log_probs(&self, feats: &Matrix) -> Result<Matrix> {
        if !self.has_ctc() {
            return Err(Error::invalid("model has no CTC head"));
        }
        self.check_feats(feats)?;
        let mut g = Graph::inference(&self.params);
        let x = g.input(feats.clone());
        let enc = self.encode_speech(&mut g, x);
        let l = self.ctc_logits(&mut g, enc);
        Ok(log_softmax_rows(g.value(l)))
    }

    /// Decoder log-probabilities, `inputs.len() x tgt_vocab`.
    pub fn decoder_log_probs(&self, memory: &Matrix, inputs: &[usize]) -> Result<Matrix> {
        if !self.has_decoder() {
            return Err(Error::invalid("model has no decoder"));
        }
        if let Some(&bad) = inputs.iter().find(|&&i| i >= self.config.tgt_vocab) {
            return Err(Error::invalid(format!("target id {bad} out of range")));
        }
        let mut g = Graph::inference(&self.params);
        let m = g.input(memory.clone());
        let l = self.decoder_logits(&mut g, m, inputs);
        Ok(log_softmax_rows(g.value(l)))
    }

    /// Step scorer over a fixed encoder memory for greedy/beam decoding.
    pub fn scorer(&self, memory: Matrix, bos: usize, eos: usize) -> Result<DecoderScorer<'_>> {
        if !self.has_decoder() {
            return Err(Error::invalid("model has no decoder"));
        }
        Ok(DecoderScorer {
            model: self,
            memory,
            bos,
            eos,
        })
    }
}

/// [`StepScorer`] that reruns the decoder over `bos + prefix` each step.
pub struct DecoderScorer<'m> {
    model: &'m Model,
    memory: Matrix,
    bos: usize,
    eos: usize,
}

impl StepScorer for DecoderScorer<'_> {
    fn eos(&self) -> usize {
        self.eos
    }

    fn next_log_probs(&self, prefix: &[usize]) -> Vec<f64> {
        let mut inputs = Vec::with_capacity(prefix.len() + 1);
        inputs.push(self.bos);
        inputs.extend_from_slice(prefix);
        let lp = self
            .model
            .decoder_log_probs(&self.memory, &inputs)
            .expect("decoder inputs validated by construction");
        lp.row(lp.rows() - 1).to_vec()
    }
}

/// Keeps the first `keep_n` speech-encoder layers and the final projection;
/// later layers are removed from the parameter set.
pub fn truncate_encoder(model: &Model, keep_n: usize) -> Result<Model> {
    let l = model.config.n_enc_layers;
    if keep_n == 0 || keep_n > l {
        return Err(Error::invalid(format!("keep_n must be in 1..={l}, got {keep_n}")));
    }
    let mut params = model.params.clone();
    for i in keep_n..l {
        params.remove_prefix(&format!("enc.layers.{i}."));
    }
    let config = ModelConfig {
        n_enc_layers: keep_n,
        ..model.config.clone()
    };
    Model::from_params(config, params)
}

/// Parameters excluded from optimiser updates.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FreezeMask {
    frozen: BTreeSet<String>,
}

impl FreezeMask {
    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn frozen(&self) -> impl Iterator<Item = &str> {
        self.frozen.iter().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.frozen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frozen.is_empty()
    }
}

/// Freezes every parameter whose name starts with one of `prefixes`
/// (`"*"` matches all). An empty selector freezes nothing.
pub fn set_freeze<S: AsRef<str>>(model: &Model, prefixes: &[S]) -> FreezeMask {
    let frozen = model
        .params
        .names()
        .filter(|n| {
            prefixes
                .iter()
                .any(|p| p.as_ref() == "*" || n.starts_with(p.as_ref()))
        })
        .map(str::to_string)
        .collect();
    FreezeMask { frozen }
}

/// Output-side parameter groups, last layer first.
pub fn output_side_groups(config: &ModelConfig, head: Head) -> Vec<Vec<String>> {
    let prefixes: Vec<Vec<String>> = match head {
        Head::Ctc => {
            let mut v = vec![vec!["ctc.out.".to_string()]];
            if config.ctc_hidden > 0 {
                v.push(vec!["ctc.hidden.".into()]);
            }
            v.push(vec!["enc.proj.".into(), "enc.final_ln.".into()]);
            for i in (0..config.n_enc_layers).rev() {
                v.push(vec![format!("enc.layers.{i}.")]);
            }
            v.push(vec!["enc.conv.".into()]);
            v
        }
        Head::Decoder => {
            let mut v = vec![vec!["dec.out.".to_string(), "dec.final_ln.".into()]];
            for i in (0..config.n_dec_layers).rev() {
                v.push(vec![format!("dec.layers.{i}.")]);
            }
            v.push(vec!["dec.emb.".into()]);
            v
        }
    };
    let spec = shape_spec(config);
    prefixes
        .into_iter()
        .map(|ps| {
            spec.iter()
                .filter(|(n, _, _)| ps.iter().any(|p| n.starts_with(p.as_str())))
                .map(|(n, _, _)| n.clone())
                .collect()
        })
        .collect()
}

/// Resizes an output head to `new_vocab` and re-initialises its last
/// `reinit_last_k` layers from `seed`. Everything else is copied unchanged.
/// A vocabulary change always re-initialises the resized tensors.
pub fn transfer_retarget(model: &Model, head: Head, new_vocab: usize, reinit_last_k: usize, seed: u64) -> Result<Model> {
    if new_vocab == 0 {
        return Err(Error::invalid("new vocabulary is empty"));
    }
    let old_vocab = match head {
        Head::Ctc => model.config.ctc_vocab,
        Head::Decoder => model.config.tgt_vocab,
    };
    if old_vocab == 0 {
        return Err(Error::invalid(format!("model has no {head:?} head to retarget")));
    }
    let groups = output_side_groups(&model.config, head);
    if reinit_last_k > groups.len() {
        return Err(Error::invalid(format!(
            "reinit_last_k {reinit_last_k} exceeds the {} output-side layers",
            groups.len()
        )));
    }
    let mut config = model.config.clone();
    match head {
        Head::Ctc => config.ctc_vocab = new_vocab,
        Head::Decoder => config.tgt_vocab = new_vocab,
    }
    let mut reinit: BTreeSet<String> = groups[..reinit_last_k].iter().flatten().cloned().collect();
    if new_vocab != old_vocab {
        let resized: &[&str] = match head {
            Head::Ctc => &["ctc.out.w", "ctc.out.b"],
            Head::Decoder => &["dec.out.w", "dec.out.b", "dec.emb.w"],
        };
        reinit.extend(resized.iter().map(|s| s.to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    for (name, r, c) in shape_spec(&config) {
        let t = if reinit.contains(&name) {
            init_tensor(&name, r, c, &mut rng)
        } else {
            model
                .params
                .get(&name)
                .cloned()
                .ok_or_else(|| Error::invalid(format!("source model lacks {name}")))?
        };
        params.insert(name, t);
    }
    Model::from_params(config, params)
}

/// Text header (`key=value` lines ending with `end`), then for each tensor
/// a `u32` name length, the UTF-8 name, and a 64-bit float matrix.
pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let ctx = || path.display().to_string();
    let file = File::create(path).map_err(|e| Error::io(ctx(), e))?;
    let mut w = BufWriter::new(file);
    let mut header = format!("{CHECKPOINT_MAGIC}\n");
    header.push_str(&model.config.to_kv());
    writeln!(header, "tensors={}", model.params.len()).unwrap();
    header.push_str("end\n");
    let write = |w: &mut BufWriter<File>| -> std::io::Result<()> {
        w.write_all(header.as_bytes())?;
        for (name, m) in model.params.iter() {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            io::write_f64_matrix(w, m)?;
        }
        w.flush()
    };
    write(&mut w).map_err(|e| Error::io(ctx(), e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let ctx = || path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(ctx(), e))?;
    let mut r = BufReader::new(file);
    let mut line = String::new();
    let mut line_no = 0;
    let mut config = ModelConfig::default();
    let mut n_tensors = None;
    let perr = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    loop {
        line.clear();
        line_no += 1;
        if r.read_line(&mut line).map_err(|e| Error::io(ctx(), e))? == 0 {
            return Err(perr(line_no, "unexpected end of header".into()));
        }
        let l = line.trim_end_matches('\n');
        if line_no == 1 {
            if l != CHECKPOINT_MAGIC {
                return Err(perr(1, format!("not a checkpoint (found {l:?})")));
            }
            continue;
        }
        if l == "end" {
            break;
        }
        let (k, v) = l
            .split_once('=')
            .ok_or_else(|| perr(line_no, format!("expected key=value, found {l:?}")))?;
        if k == "tensors" {
            n_tensors = Some(v.parse::<usize>().map_err(|e| perr(line_no, e.to_string()))?);
        } else {
            config.set_kv(k, v).map_err(|m| perr(line_no, m))?;
        }
    }
    let n = n_tensors.ok_or_else(|| perr(line_no, "header lacks tensors=".into()))?;
    let mut params = ParamSet::new();
    for _ in 0..n {
        let mut len = [0u8; 4];
        r.read_exact(&mut len).map_err(|e| Error::io(ctx(), e))?;
        let mut name = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut name).map_err(|e| Error::io(ctx(), e))?;
        let name = String::from_utf8(name).map_err(|e| Error::Data(format!("tensor name: {e}")))?;
        let m = io::read_f64_matrix(&mut r)?;
        params.insert(name, m);
    }
    Model::from_params(config, params)
}

/// Loads a checkpoint and requires it to match `expected` exactly.
pub fn load_checkpoint_as(path: &Path, expected: &ModelConfig) -> Result<Model> {
    let m = load_checkpoint(path)?;
    if &m.config != expected {
        let diffs: Vec<String> = expected
            .to_kv()
            .lines()
            .zip(m.config.to_kv().lines())
            .filter(|(a, b)| a != b)
            .map(|(a, b)| format!("expected {a}, checkpoint has {b}"))
            .collect();
        return Err(Error::Shape {
            name: path.display().to_string(),
            expected: "matching model config".into(),
            found: diffs.join("; "),
        });
    }
    Ok(m)
}

//! Tiny pre-norm transformer encoder with a masked-language-model head.
//!
//! The encoder stands in for a pretrained language model: its weights are
//! drawn once from a seed and then kept frozen. Adapters are spliced in at
//! numbered [`InsertionPoint`]s during [`forward`].

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::AdapterVars;
use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{config_err, dim_err, input_err, Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Additive attention bias for padded key positions.
const PAD_SCORE: f64 = -1e9;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            max_len: 32,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(config_err!("encoder.{name} must be positive"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(config_err!(
                "encoder.d_model ({}) must be divisible by n_heads ({})",
                self.d_model,
                self.n_heads
            ));
        }
        Ok(())
    }

    /// Stable textual fingerprint used to match checkpoints to encoders.
    pub fn fingerprint(&self) -> String {
        format!(
            "v{}-l{}-d{}-n{}-h{}-f{}",
            self.vocab_size, self.max_len, self.d_model, self.n_layers, self.n_heads, self.d_ff
        )
    }
}

/// Transformer sub-module whose output an adapter transforms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum InsertionPoint {
    Embedding,
    Attention(usize),
    FFIntermediate(usize),
    FFOutput(usize),
}

impl InsertionPoint {
    pub fn layer(self) -> Option<usize> {
        match self {
            InsertionPoint::Embedding => None,
            InsertionPoint::Attention(l)
            | InsertionPoint::FFIntermediate(l)
            | InsertionPoint::FFOutput(l) => Some(l),
        }
    }

    /// Width of the activation stream at this point.
    pub fn host_dim(self, cfg: &EncoderConfig) -> usize {
        match self {
            InsertionPoint::FFIntermediate(_) => cfg.d_ff,
            _ => cfg.d_model,
        }
    }

    pub fn validate(self, cfg: &EncoderConfig) -> Result<()> {
        match self.layer() {
            Some(l) if l >= cfg.n_layers => Err(config_err!(
                "insertion point {self} out of range for {} layers",
                cfg.n_layers
            )),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for InsertionPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InsertionPoint::Embedding => write!(f, "embedding"),
            InsertionPoint::Attention(l) => write!(f, "attention@{l}"),
            InsertionPoint::FFIntermediate(l) => write!(f, "ff_intermediate@{l}"),
            InsertionPoint::FFOutput(l) => write!(f, "ff_output@{l}"),
        }
    }
}

impl FromStr for InsertionPoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "embedding" {
            return Ok(InsertionPoint::Embedding);
        }
        let (kind, layer) = s
            .split_once('@')
            .ok_or_else(|| config_err!("bad insertion point `{s}`"))?;
        let layer: usize = layer
            .parse()
            .map_err(|_| config_err!("bad layer index in `{s}`"))?;
        match kind {
            "attention" => Ok(InsertionPoint::Attention(layer)),
            "ff_intermediate" => Ok(InsertionPoint::FFIntermediate(layer)),
            "ff_output" => Ok(InsertionPoint::FFOutput(layer)),
            _ => Err(config_err!("unknown insertion point kind `{kind}`")),
        }
    }
}

impl TryFrom<String> for InsertionPoint {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<InsertionPoint> for String {
    fn from(p: InsertionPoint) -> String {
        p.to_string()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub ff_in: Tensor,
    pub ff_in_bias: Tensor,
    pub ff_out: Tensor,
    pub ff_out_bias: Tensor,
}

impl LayerParams {
    fn tensors(&self) -> [&Tensor; 16] {
        [
            &self.ln1_gamma,
            &self.ln1_beta,
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln2_gamma,
            &self.ln2_beta,
            &self.ff_in,
            &self.ff_in_bias,
            &self.ff_out,
            &self.ff_out_bias,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
            &mut self.ff_in,
            &mut self.ff_in_bias,
            &mut self.ff_out,
            &mut self.ff_out_bias,
        ]
    }
}

/// Encoder weights plus the full LM head.
///
/// Layer-norm scales and shifts are treated as encoder weights and are frozen
/// with everything else. The verbalizer columns of `lm_head` are copied into
/// the tunable parameter set and trained there.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub token_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<LayerParams>,
    pub final_ln_gamma: Tensor,
    pub final_ln_beta: Tensor,
    /// `[d_model, vocab_size]`, no bias, not tied to `token_emb`.
    pub lm_head: Tensor,
    frozen: bool,
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("valid shape")
}

impl EncoderParams {
    /// Draws a random encoder. Embeddings are unit-variance, projections use
    /// `1/sqrt(fan_in)` scaling, biases start at zero and layer norms at identity.
    /// The result is frozen.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, f) = (config.d_model, config.d_ff);
        let proj = |rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize| {
            normal(rng, &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt())
        };
        let token_emb = normal(&mut rng, &[config.vocab_size, d], 1.0);
        let pos_emb = normal(&mut rng, &[config.max_len, d], 1.0);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                ln1_gamma: Tensor::ones(&[d]),
                ln1_beta: Tensor::zeros(&[d]),
                wq: proj(&mut rng, d, d),
                bq: Tensor::zeros(&[d]),
                wk: proj(&mut rng, d, d),
                bk: Tensor::zeros(&[d]),
                wv: proj(&mut rng, d, d),
                bv: Tensor::zeros(&[d]),
                wo: proj(&mut rng, d, d),
                bo: Tensor::zeros(&[d]),
                ln2_gamma: Tensor::ones(&[d]),
                ln2_beta: Tensor::zeros(&[d]),
                ff_in: proj(&mut rng, d, f),
                ff_in_bias: Tensor::zeros(&[f]),
                ff_out: proj(&mut rng, f, d),
                ff_out_bias: Tensor::zeros(&[d]),
            })
            .collect();
        let lm_head = proj(&mut rng, d, config.vocab_size);
        Ok(Self {
            config: config.clone(),
            token_emb,
            pos_emb,
            layers,
            final_ln_gamma: Tensor::ones(&[d]),
            final_ln_beta: Tensor::zeros(&[d]),
            lm_head,
            frozen: true,
        })
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    /// All tensors in a fixed canonical order, LM head last.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.token_emb, &self.pos_emb];
        for l in &self.layers {
            out.extend(l.tensors());
        }
        out.extend([&self.final_ln_gamma, &self.final_ln_beta, &self.lm_head]);
        out
    }

    /// Tensors an optimizer may touch: none while frozen.
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        if self.frozen {
            return Vec::new();
        }
        let mut out = vec![&mut self.token_emb, &mut self.pos_emb];
        for l in &mut self.layers {
            out.extend(l.tensors_mut());
        }
        out.extend([
            &mut self.final_ln_gamma,
            &mut self.final_ln_beta,
            &mut self.lm_head,
        ]);
        out
    }

    /// SHA-256 over the config and every weight's little-endian bytes.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.config.fingerprint().as_bytes());
        for t in self.tensors() {
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            h.update(t.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Number of encoder weights excluding the LM head.
    pub fn encoder_param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum::<usize>() - self.lm_head.numel()
    }
}

/// Outputs of [`forward`].
#[derive(Debug, Clone, Copy)]
pub struct EncoderOutput {
    /// `[b, d_model]`, final-layer state at each row's mask position.
    pub h_mask: Var,
    /// `[b * s, d_model]`, row-major over (batch, position).
    pub hidden: Var,
    pub seq_len: usize,
}

/// Runs the encoder on a batch of token rows.
///
/// Rows shorter than the longest row are right-padded with token 0 and the
/// padded keys are masked out of attention, so each row's output does not
/// depend on what it is batched with.
pub fn forward<'a>(
    g: &mut Graph<'a>,
    params: &'a EncoderParams,
    adapters: &AdapterVars,
    tokens: &[&[usize]],
    mask_pos: &[usize],
) -> Result<EncoderOutput> {
    let cfg = &params.config;
    let b = tokens.len();
    if b == 0 || mask_pos.len() != b {
        return Err(dim_err!(
            "forward: {b} rows with {} mask positions",
            mask_pos.len()
        ));
    }
    let s = tokens.iter().map(|r| r.len()).max().unwrap_or(0);
    if s == 0 || s > cfg.max_len {
        return Err(input_err!("forward: sequence length {s} outside 1..={}", cfg.max_len));
    }
    for (r, (row, &m)) in tokens.iter().zip(mask_pos).enumerate() {
        if let Some(&t) = row.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(input_err!("forward: token id {t} out of range in row {r}"));
        }
        if m >= row.len() {
            return Err(input_err!("forward: mask position {m} out of range in row {r}"));
        }
    }
    let padded = tokens.iter().any(|r| r.len() != s);
    let mut flat = Vec::with_capacity(b * s);
    for row in tokens {
        flat.extend_from_slice(row);
        flat.extend(std::iter::repeat_n(0, s - row.len()));
    }
    let positions: Vec<usize> = (0..b).flat_map(|_| 0..s).collect();

    let (d, heads) = (cfg.d_model, cfg.n_heads);
    let dh = d / heads;

    let tok_table = g.constant_ref(&params.token_emb);
    let pos_table = g.constant_ref(&params.pos_emb);
    let tok = g.embedding(tok_table, &flat)?;
    let pos = g.embedding(pos_table, &positions)?;
    let mut x = g.add(tok, pos)?;
    x = adapters.apply(g, InsertionPoint::Embedding, x)?;

    let attn_bias = if padded {
        let mut bias = vec![0.0; b * heads * s * s];
        for (r, row) in tokens.iter().enumerate() {
            for h in 0..heads {
                for q in 0..s {
                    for k in row.len()..s {
                        bias[((r * heads + h) * s + q) * s + k] = PAD_SCORE;
                    }
                }
            }
        }
        Some(g.constant(Tensor::new(vec![b * heads, s, s], bias)?))
    } else {
        None
    };

    for (li, layer) in params.layers.iter().enumerate() {
        let ln1_g = g.constant_ref(&layer.ln1_gamma);
        let ln1_b = g.constant_ref(&layer.ln1_beta);
        let a = g.layer_norm(x, ln1_g, ln1_b, LAYER_NORM_EPS)?;

        let project = |g: &mut Graph<'a>, w: &'a Tensor, bias: &'a Tensor| -> Result<Var> {
            let wv = g.constant_ref(w);
            let bv = g.constant_ref(bias);
            let y = g.matmul(a, wv)?;
            g.add_bias(y, bv)
        };
        let q = project(g, &layer.wq, &layer.bq)?;
        let k = project(g, &layer.wk, &layer.bk)?;
        let v = project(g, &layer.wv, &layer.bv)?;

        let qh = g.split_heads(q, b, s, heads)?;
        let kh = g.split_heads(k, b, s, heads)?;
        let vh = g.split_heads(v, b, s, heads)?;
        let kt = g.transpose_last(kh)?;
        let scores = g.batch_matmul(qh, kt)?;
        let mut scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        if let Some(bias) = attn_bias {
            scores = g.add(scores, bias)?;
        }
        let probs = g.softmax(scores, 2)?;
        let ctx = g.batch_matmul(probs, vh)?;
        let ctx = g.merge_heads(ctx, b, s, heads)?;
        let wo = g.constant_ref(&layer.wo);
        let bo = g.constant_ref(&layer.bo);
        let o = g.matmul(ctx, wo)?;
        let o = g.add_bias(o, bo)?;
        let o = adapters.apply(g, InsertionPoint::Attention(li), o)?;
        x = g.add(x, o)?;

        let ln2_g = g.constant_ref(&layer.ln2_gamma);
        let ln2_b = g.constant_ref(&layer.ln2_beta);
        let f = g.layer_norm(x, ln2_g, ln2_b, LAYER_NORM_EPS)?;
        let w1 = g.constant_ref(&layer.ff_in);
        let b1 = g.constant_ref(&layer.ff_in_bias);
        let h = g.matmul(f, w1)?;
        let h = g.add_bias(h, b1)?;
        let h = g.relu(h);
        let h = adapters.apply(g, InsertionPoint::FFIntermediate(li), h)?;
        let w2 = g.constant_ref(&layer.ff_out);
        let b2 = g.constant_ref(&layer.ff_out_bias);
        let o = g.matmul(h, w2)?;
        let o = g.add_bias(o, b2)?;
        let o = adapters.apply(g, InsertionPoint::FFOutput(li), o)?;
        x = g.add(x, o)?;
    }

    let fg = g.constant_ref(&params.final_ln_gamma);
    let fb = g.constant_ref(&params.final_ln_beta);
    let hidden = g.layer_norm(x, fg, fb, LAYER_NORM_EPS)?;
    let rows: Vec<usize> = mask_pos.iter().enumerate().map(|(r, &m)| r * s + m).collect();
    let h_mask = g.select_rows(hidden, &rows)?;
    Ok(EncoderOutput {
        h_mask,
        hidden,
        seq_len: s,
    })
}

/// `h · head`; the head has no bias.
pub fn lm_logits(g: &mut Graph<'_>, h: Var, head: Var) -> Result<Var> {
    g.matmul(h, head)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub encoder: usize,
    pub adapter: usize,
    pub head: usize,
}

impl ParamCounts {
    /// Adapter parameters relative to the frozen encoder plus head.
    pub fn adapter_ratio(&self) -> f64 {
        self.adapter as f64 / (self.encoder + self.head) as f64
    }
}

pub fn count_params(params: &EncoderParams, adapters: &crate::adapter::AdapterParams) -> ParamCounts {
    ParamCounts {
        encoder: params.encoder_param_count(),
        adapter: adapters.param_count(),
        head: params.lm_head.numel(),
    }
}

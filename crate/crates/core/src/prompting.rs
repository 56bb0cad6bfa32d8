//! Cloze templates, verbalizers and label-word probabilities.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::adapter::{init_adapters, AdapterConfig, TunableParams, TunableVars};
use crate::data::Vocab;
use crate::diffcore::{softmax_rows, Graph, Tensor, Var};
use crate::encoder::{forward, EncoderParams};
use crate::error::{config_err, dim_err, input_err, Result};
use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Piece {
    S1,
    S2,
    Mask,
    Word(usize),
}

/// A pattern such as `[CLS] {S1} it was {MASK} .` resolved against a vocabulary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplate {
    pattern: String,
    pieces: Vec<Piece>,
    mask_id: usize,
}

impl PromptTemplate {
    pub fn parse(pattern: &str, vocab: &Vocab) -> Result<Self> {
        let mut pieces = Vec::new();
        for w in pattern.split_whitespace() {
            pieces.push(match w {
                "{S1}" => Piece::S1,
                "{S2}" => Piece::S2,
                "{MASK}" => Piece::Mask,
                _ => Piece::Word(
                    vocab
                        .id(w)
                        .map_err(|_| config_err!("template word `{w}` is not in the vocabulary"))?,
                ),
            });
        }
        let count = |p: Piece| pieces.iter().filter(|&&q| q == p).count();
        if count(Piece::Mask) != 1 {
            return Err(config_err!(
                "template `{pattern}` must contain exactly one {{MASK}}, found {}",
                count(Piece::Mask)
            ));
        }
        if count(Piece::S1) != 1 || count(Piece::S2) > 1 {
            return Err(config_err!("template `{pattern}` needs one {{S1}} and at most one {{S2}}"));
        }
        Ok(Self {
            pattern: pattern.to_string(),
            pieces,
            mask_id: vocab.mask_id(),
        })
    }

    pub fn has_s2(&self) -> bool {
        self.pieces.contains(&Piece::S2)
    }

    fn fixed_len(&self) -> usize {
        self.pieces
            .iter()
            .filter(|p| matches!(p, Piece::Word(_) | Piece::Mask))
            .count()
    }
}

impl fmt::Display for PromptTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.pattern)
    }
}

/// Token ids of a filled template and the index of its mask token.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ClozeInstance {
    pub tokens: Vec<usize>,
    pub mask_pos: usize,
}

/// A cloze instance paired with its gold label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Labeled {
    pub instance: ClozeInstance,
    pub label: usize,
}

/// Fills the template, dropping tokens from the end of `s1` first and then
/// from the end of `s2` until the result fits in `max_len`.
pub fn apply_template(
    t: &PromptTemplate,
    s1: &[usize],
    s2: Option<&[usize]>,
    max_len: usize,
) -> Result<ClozeInstance> {
    if t.has_s2() != s2.is_some() {
        return Err(input_err!("template `{t}` and the given sentence count disagree"));
    }
    let fixed = t.fixed_len();
    if fixed > max_len {
        return Err(input_err!("template `{t}` alone exceeds max_len {max_len}"));
    }
    let s2 = s2.unwrap_or(&[]);
    let budget = max_len - fixed;
    let mut keep1 = s1.len();
    let mut keep2 = s2.len();
    if keep1 + keep2 > budget {
        keep1 = budget.saturating_sub(keep2);
        keep2 = keep2.min(budget - keep1);
    }
    let mut tokens = Vec::with_capacity(fixed + keep1 + keep2);
    let mut mask_pos = 0;
    for p in &t.pieces {
        match *p {
            Piece::S1 => tokens.extend_from_slice(&s1[..keep1]),
            Piece::S2 => tokens.extend_from_slice(&s2[..keep2]),
            Piece::Mask => {
                mask_pos = tokens.len();
                tokens.push(t.mask_id);
            }
            Piece::Word(id) => tokens.push(id),
        }
    }
    Ok(ClozeInstance { tokens, mask_pos })
}

/// Injective map from label index to a label-word token id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verbalizer {
    tokens: Vec<usize>,
}

impl Verbalizer {
    pub fn new(tokens: Vec<usize>, vocab_size: usize) -> Result<Self> {
        if tokens.len() < 2 {
            return Err(config_err!("verbalizer needs at least two labels"));
        }
        if let Some(t) = tokens.iter().find(|&&t| t >= vocab_size) {
            return Err(config_err!("verbalizer token id {t} is outside the vocabulary"));
        }
        if tokens.iter().collect::<BTreeSet<_>>().len() != tokens.len() {
            return Err(config_err!("verbalizer maps two labels to the same token"));
        }
        Ok(Self { tokens })
    }

    pub fn from_words(words: &[String], vocab: &Vocab) -> Result<Self> {
        let ids = words
            .iter()
            .map(|w| {
                vocab
                    .id(w)
                    .map_err(|_| config_err!("label word `{w}` is not in the vocabulary"))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(ids, vocab.len())
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn n_labels(&self) -> usize {
        self.tokens.len()
    }
}

fn head_columns(head: &Tensor, cols: &[usize]) -> Tensor {
    let (d, v) = (head.shape()[0], head.shape()[1]);
    let mut out = Vec::with_capacity(d * cols.len());
    for i in 0..d {
        let row = &head.data()[i * v..(i + 1) * v];
        out.extend(cols.iter().map(|&c| row[c]));
    }
    Tensor::new(vec![d, cols.len()], out).expect("column count is positive")
}

/// Softmax over the label-word logits at the mask positions.
///
/// `h_mask` is `[b, d]` and `head` the full `[d, V]` LM head.
pub fn label_probs(h_mask: &Tensor, head: &Tensor, v: &Verbalizer) -> Result<Tensor> {
    if head.rank() != 2 || h_mask.rank() != 2 || h_mask.shape()[1] != head.shape()[0] {
        return Err(dim_err!(
            "label_probs: h_mask {:?} does not match head {:?}",
            h_mask.shape(),
            head.shape()
        ));
    }
    let v = Verbalizer::new(v.tokens.clone(), head.shape()[1])?;
    let cols = head_columns(head, v.tokens());
    let mut g = Graph::new();
    let h = g.constant_ref(h_mask);
    let c = g.constant(cols);
    let logits = g.matmul(h, c)?;
    Ok(softmax_rows(g.value(logits)))
}

/// One-hot rows for hard labels.
pub fn one_hot(labels: &[usize], n: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * n];
    for (i, &y) in labels.iter().enumerate() {
        if y >= n {
            return Err(input_err!("label {y} out of range for {n} classes"));
        }
        data[i * n + y] = 1.0;
    }
    Tensor::new(vec![labels.len(), n], data)
}

/// Which vocabulary the training cross-entropy normalises over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Denominator {
    /// Label words only.
    #[default]
    Restricted,
    /// The whole vocabulary, with non-label words kept at their frozen head columns.
    Full,
}

/// A frozen encoder, a verbalizer and the choice of loss denominator.
#[derive(Debug)]
pub struct PromptModel<'e> {
    pub encoder: &'e EncoderParams,
    pub verbalizer: Verbalizer,
    pub denominator: Denominator,
    rest_head: Option<Tensor>,
}

const EVAL_CHUNK: usize = 32;

impl<'e> PromptModel<'e> {
    pub fn new(encoder: &'e EncoderParams, verbalizer: Verbalizer, denominator: Denominator) -> Result<Self> {
        let verbalizer = Verbalizer::new(verbalizer.tokens, encoder.config.vocab_size)?;
        let rest_head = match denominator {
            Denominator::Restricted => None,
            Denominator::Full => {
                let rest: Vec<usize> = (0..encoder.config.vocab_size)
                    .filter(|t| !verbalizer.tokens.contains(t))
                    .collect();
                (!rest.is_empty()).then(|| head_columns(&encoder.lm_head, &rest))
            }
        };
        Ok(Self {
            encoder,
            verbalizer,
            denominator,
            rest_head,
        })
    }

    pub fn n_labels(&self) -> usize {
        self.verbalizer.n_labels()
    }

    /// Fresh adapters from `seed` and the pretrained label-word head columns.
    pub fn init_tunable(&self, cfg: &AdapterConfig, seed: u64) -> Result<TunableParams> {
        Ok(TunableParams {
            adapters: init_adapters(cfg, &self.encoder.config, seed)?,
            head: head_columns(&self.encoder.lm_head, self.verbalizer.tokens()),
        })
    }

    /// `[b, n_labels]` label-word logits at the mask positions.
    pub fn label_logits<'g>(&'g self, g: &mut Graph<'g>, tv: &TunableVars, batch: &[&ClozeInstance]) -> Result<Var>
    where
        'e: 'g,
    {
        let tokens: Vec<&[usize]> = batch.iter().map(|c| c.tokens.as_slice()).collect();
        let mask: Vec<usize> = batch.iter().map(|c| c.mask_pos).collect();
        let out = forward(g, self.encoder, &tv.adapters, &tokens, &mask)?;
        g.matmul(out.h_mask, tv.head)
    }

    /// Per-example cross-entropy against `[b, n_labels]` target distributions.
    pub fn loss_rows<'g>(
        &'g self,
        g: &mut Graph<'g>,
        tv: &TunableVars,
        batch: &[&ClozeInstance],
        targets: &Tensor,
    ) -> Result<Var>
    where
        'e: 'g,
    {
        let l = self.n_labels();
        if targets.shape() != [batch.len(), l] {
            return Err(dim_err!(
                "loss_rows: targets {:?} for {} rows and {l} labels",
                targets.shape(),
                batch.len()
            ));
        }
        let tokens: Vec<&[usize]> = batch.iter().map(|c| c.tokens.as_slice()).collect();
        let mask: Vec<usize> = batch.iter().map(|c| c.mask_pos).collect();
        let out = forward(g, self.encoder, &tv.adapters, &tokens, &mask)?;
        let label = g.matmul(out.h_mask, tv.head)?;
        match &self.rest_head {
            None => {
                let t = g.constant(targets.clone());
                g.cross_entropy_rows(label, t)
            }
            Some(rest) => {
                let rv = g.constant_ref(rest);
                let other = g.matmul(out.h_mask, rv)?;
                let logits = g.concat(&[label, other], 1)?;
                let width = l + rest.shape()[1];
                let mut padded = vec![0.0; batch.len() * width];
                for i in 0..batch.len() {
                    padded[i * width..i * width + l].copy_from_slice(targets.row(i));
                }
                let t = g.constant(Tensor::new(vec![batch.len(), width], padded)?);
                g.cross_entropy_rows(logits, t)
            }
        }
    }

    /// Label-word distributions for any number of instances, evaluated in
    /// chunks that may run in parallel.
    pub fn probs(&self, tunable: &TunableParams, instances: &[ClozeInstance]) -> Result<Tensor> {
        let l = self.n_labels();
        if instances.is_empty() {
            return Err(input_err!("probs: no instances"));
        }
        let chunks: Vec<&[ClozeInstance]> = instances.chunks(EVAL_CHUNK).collect();
        let parts = par::try_map(&chunks, |chunk| -> Result<Vec<f64>> {
            let mut g = Graph::new();
            let tv = tunable.register(&mut g, false);
            let refs: Vec<&ClozeInstance> = chunk.iter().collect();
            let logits = self.label_logits(&mut g, &tv, &refs)?;
            Ok(softmax_rows(g.value(logits)).into_data())
        })?;
        Tensor::new(vec![instances.len(), l], parts.concat())
    }

    pub fn predict(&self, tunable: &TunableParams, instances: &[ClozeInstance]) -> Result<Vec<usize>> {
        Ok(self.probs(tunable, instances)?.argmax_rows())
    }

    pub fn accuracy(&self, tunable: &TunableParams, data: &[Labeled]) -> Result<f64> {
        let inst: Vec<ClozeInstance> = data.iter().map(|d| d.instance.clone()).collect();
        let pred = self.predict(tunable, &inst)?;
        let hits = pred.iter().zip(data).filter(|(p, d)| **p == d.label).count();
        Ok(hits as f64 / data.len() as f64)
    }
}

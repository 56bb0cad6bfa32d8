//! Synthetic cloze-classification tasks with known Bayes labels, the closed
//! vocabulary, and nested few-shot splits.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, input_err, Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const HEADER: &str = "#format-version";

pub const PAD: &str = "[PAD]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";

/// Words that templates may use besides the slots.
pub const TEMPLATE_WORDS: &[&str] = &["it", "was", "is", "?", ",", "."];

pub fn label_token(i: usize) -> String {
    format!("LBL{i}")
}

/// Closed vocabulary. Ids are positions in `tokens`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(config_err!("vocab token {i} is empty or contains whitespace"));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(config_err!("vocab token `{t}` appears twice"));
            }
        }
        for special in [PAD, CLS, SEP, MASK] {
            if !index.contains_key(special) {
                return Err(config_err!("vocab is missing reserved token {special}"));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Reserved tokens, `n_labels` label words, template words, then `content`.
    pub fn build(n_labels: usize, content: &[String]) -> Result<Self> {
        let mut tokens: Vec<String> = [PAD, CLS, SEP, MASK].iter().map(|s| s.to_string()).collect();
        tokens.extend((0..n_labels).map(label_token));
        tokens.extend(TEMPLATE_WORDS.iter().map(|s| s.to_string()));
        let mut seen: BTreeSet<&String> = BTreeSet::new();
        for t in content {
            if seen.insert(t) {
                tokens.push(t.clone());
            }
        }
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| input_err!("unknown token `{token}`"))
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| input_err!("token id {id} out of range"))
    }

    pub fn mask_id(&self) -> usize {
        self.index[MASK]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|t| self.id(t)).collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        let words: Result<Vec<&str>> = ids.iter().map(|&i| self.token(i)).collect();
        Ok(words?.join(" "))
    }

    /// Header line, then one token per line; a token's id is its line index
    /// counted from the first line after the header.
    pub fn to_file_string(&self) -> String {
        let mut s = format!("{HEADER}\t{FORMAT_VERSION}\n");
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_file_str(s: &str) -> Result<Self> {
        let mut lines = s.lines();
        check_header(lines.next(), "vocab")?;
        Self::from_tokens(lines.map(str::to_string).collect())
    }
}

fn check_header(line: Option<&str>, what: &str) -> Result<()> {
    let expected = format!("{HEADER}\t{FORMAT_VERSION}");
    match line {
        Some(l) if l == expected => Ok(()),
        Some(l) => Err(Error::Load(format!("{what}: unsupported header `{l}`"))),
        None => Err(Error::Load(format!("{what}: empty file"))),
    }
}

/// Generator parameters for a synthetic bag-of-tokens task.
///
/// Each token of a class-`y` sequence is drawn uniformly from `class_pools[y]`
/// with probability `1 - rho` and uniformly from `confuser_pool` otherwise.
/// Pools are multisets: a token listed twice is drawn twice as often.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTaskSpec {
    pub n_labels: usize,
    pub class_pools: Vec<Vec<String>>,
    pub confuser_pool: Vec<String>,
    pub rho: f64,
    pub seq_len_min: usize,
    pub seq_len_max: usize,
    pub train_pool: usize,
    pub test: usize,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        let words = |prefix: &str, range: std::ops::Range<usize>| -> Vec<String> {
            range.map(|i| format!("{prefix}{i}")).collect()
        };
        // two classes with 14 private words each plus 2 shared words
        let mut pool_a = words("a", 0..14);
        let mut pool_b = words("b", 0..14);
        pool_a.extend(words("s", 0..2));
        pool_b.extend(words("s", 0..2));
        Self {
            n_labels: 2,
            class_pools: vec![pool_a, pool_b],
            confuser_pool: words("n", 0..12),
            rho: 0.3,
            seq_len_min: 5,
            seq_len_max: 8,
            train_pool: 2030,
            test: 500,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_labels < 2 {
            return Err(config_err!("task.n_labels must be at least 2"));
        }
        if self.class_pools.len() != self.n_labels {
            return Err(config_err!(
                "task.class_pools has {} pools for {} labels",
                self.class_pools.len(),
                self.n_labels
            ));
        }
        if self.class_pools.iter().any(Vec::is_empty) || self.confuser_pool.is_empty() {
            return Err(config_err!("task pools must be non-empty"));
        }
        for i in 0..self.n_labels {
            for j in i + 1..self.n_labels {
                if sorted(&self.class_pools[i]) == sorted(&self.class_pools[j]) {
                    return Err(config_err!("task.class_pools {i} and {j} are identical"));
                }
            }
        }
        if !(0.0..0.5).contains(&self.rho) {
            return Err(config_err!("task.rho must lie in [0, 0.5), got {}", self.rho));
        }
        if self.seq_len_min == 0 || self.seq_len_min > self.seq_len_max {
            return Err(config_err!("task.seq_len range is empty"));
        }
        if self.train_pool == 0 || self.test == 0 {
            return Err(config_err!("task corpus sizes must be positive"));
        }
        Ok(())
    }

    /// All pool words in first-appearance order.
    pub fn content_words(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut seen = BTreeSet::new();
        for w in self.class_pools.iter().flatten().chain(&self.confuser_pool) {
            if seen.insert(w.clone()) {
                out.push(w.clone());
            }
        }
        out
    }

    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::build(self.n_labels, &self.content_words())
    }

    /// `log P(token | class)` for every content token id, per class.
    pub fn token_log_likelihoods(&self, vocab: &Vocab) -> Result<Vec<HashMap<usize, f64>>> {
        let conf = counts(&self.confuser_pool, vocab)?;
        let conf_n = self.confuser_pool.len() as f64;
        self.class_pools
            .iter()
            .map(|pool| {
                let own = counts(pool, vocab)?;
                let n = pool.len() as f64;
                let ids: BTreeSet<usize> = own.keys().chain(conf.keys()).copied().collect();
                Ok(ids
                    .into_iter()
                    .map(|id| {
                        let p = (1.0 - self.rho) * own.get(&id).copied().unwrap_or(0) as f64 / n
                            + self.rho * conf.get(&id).copied().unwrap_or(0) as f64 / conf_n;
                        (id, p.ln())
                    })
                    .collect())
            })
            .collect()
    }
}

fn sorted(v: &[String]) -> Vec<&String> {
    let mut s: Vec<&String> = v.iter().collect();
    s.sort();
    s
}

fn counts(pool: &[String], vocab: &Vocab) -> Result<HashMap<usize, usize>> {
    let mut out = HashMap::new();
    for w in pool {
        *out.entry(vocab.id(w)?).or_insert(0) += 1;
    }
    Ok(out)
}

/// Bayes-optimal label under a uniform class prior; ties go to the lowest label.
pub fn bayes_label(tokens: &[usize], loglik: &[HashMap<usize, f64>]) -> usize {
    let scores: Vec<f64> = loglik
        .iter()
        .map(|ll| {
            tokens
                .iter()
                .map(|t| ll.get(t).copied().unwrap_or(f64::NEG_INFINITY))
                .sum()
        })
        .collect();
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub tokens: Vec<usize>,
    pub gold: usize,
    pub bayes: usize,
}

/// Generated corpus: the first `train_pool` records form the training pool,
/// the remaining `test` records the test set.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub vocab: Vocab,
    pub records: Vec<Record>,
    pub train_pool: usize,
}

impl Corpus {
    pub fn train_indices(&self) -> std::ops::Range<usize> {
        0..self.train_pool
    }

    pub fn test_indices(&self) -> std::ops::Range<usize> {
        self.train_pool..self.records.len()
    }

    /// Header, a `#train-pool` line, then `tokens\tgold\tbayes` per record.
    pub fn to_file_string(&self) -> Result<String> {
        let mut s = format!("{HEADER}\t{FORMAT_VERSION}\n#train-pool\t{}\n", self.train_pool);
        for r in &self.records {
            let _ = writeln!(s, "{}\t{}\t{}", self.vocab.detokenize(&r.tokens)?, r.gold, r.bayes);
        }
        Ok(s)
    }

    pub fn from_file_str(s: &str, vocab: Vocab) -> Result<Self> {
        let mut lines = s.lines();
        check_header(lines.next(), "corpus")?;
        let train_pool = lines
            .next()
            .and_then(|l| l.strip_prefix("#train-pool\t"))
            .and_then(|n| n.parse::<usize>().ok())
            .ok_or_else(|| Error::Load("corpus: missing #train-pool line".into()))?;
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::Load(format!("corpus line {}: expected 3 fields", i + 3)));
            }
            let parse = |f: &str| {
                f.parse::<usize>()
                    .map_err(|_| Error::Load(format!("corpus line {}: bad label `{f}`", i + 3)))
            };
            records.push(Record {
                tokens: vocab.tokenize(fields[0])?,
                gold: parse(fields[1])?,
                bayes: parse(fields[2])?,
            });
        }
        if train_pool > records.len() {
            return Err(Error::Load("corpus shorter than its training pool".into()));
        }
        Ok(Self {
            vocab,
            records,
            train_pool,
        })
    }
}

/// Draws a corpus; `(spec, seed)` determines it completely.
pub fn generate(spec: &SyntheticTaskSpec, seed: u64) -> Result<Corpus> {
    spec.validate()?;
    let vocab = spec.vocab()?;
    let loglik = spec.token_log_likelihoods(&vocab)?;
    let pools: Vec<Vec<usize>> = spec
        .class_pools
        .iter()
        .map(|p| p.iter().map(|w| vocab.id(w)).collect())
        .collect::<Result<_>>()?;
    let confusers: Vec<usize> = spec
        .confuser_pool
        .iter()
        .map(|w| vocab.id(w))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = spec.train_pool + spec.test;
    let mut records = Vec::with_capacity(total);
    for _ in 0..total {
        let gold = rng.random_range(0..spec.n_labels);
        let len = rng.random_range(spec.seq_len_min..=spec.seq_len_max);
        let tokens: Vec<usize> = (0..len)
            .map(|_| {
                let pool = if rng.random::<f64>() < spec.rho {
                    &confusers
                } else {
                    &pools[gold]
                };
                pool[rng.random_range(0..pool.len())]
            })
            .collect();
        let bayes = bayes_label(&tokens, &loglik);
        records.push(Record { tokens, gold, bayes });
    }
    Ok(Corpus {
        vocab,
        records,
        train_pool: spec.train_pool,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FewShotSpec {
    /// Labeled-set sizes; each split's smaller sets are prefixes of its larger ones.
    pub shots: Vec<usize>,
    pub n_splits: usize,
    pub seed: u64,
}

impl Default for FewShotSpec {
    fn default() -> Self {
        Self {
            shots: vec![10, 20, 30],
            n_splits: 5,
            seed: 13,
        }
    }
}

impl FewShotSpec {
    pub fn validate(&self) -> Result<()> {
        if self.shots.is_empty() || self.shots.contains(&0) {
            return Err(config_err!("few_shot.shots must be non-empty and positive"));
        }
        if self.n_splits == 0 {
            return Err(config_err!("few_shot.n_splits must be positive"));
        }
        Ok(())
    }

    pub fn max_shots(&self) -> usize {
        self.shots.iter().copied().max().unwrap_or(0)
    }

    /// Seed of split `id` (1-based).
    pub fn split_seed(&self, id: usize) -> u64 {
        self.seed.wrapping_mul(1_000_003).wrapping_add(id as u64)
    }
}

/// One split: a class-interleaved ordering whose prefixes are the labeled
/// sets, the rest of the training pool, and the test set (record indices).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub id: usize,
    pub labeled_order: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn labeled(&self, k: usize) -> &[usize] {
        &self.labeled_order[..k.min(self.labeled_order.len())]
    }
}

/// Builds split `id` (1-based).
///
/// Training-pool indices are shuffled per class and interleaved round-robin,
/// so every prefix whose length is a multiple of the label count is
/// class-balanced, and `D_10 ⊂ D_20 ⊂ D_30` holds by construction.
pub fn split(corpus: &Corpus, fs: &FewShotSpec, id: usize) -> Result<Split> {
    fs.validate()?;
    let n_labels = corpus.records[..corpus.train_pool]
        .iter()
        .map(|r| r.gold)
        .max()
        .map_or(0, |m| m + 1);
    let kmax = fs.max_shots();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_labels];
    for i in corpus.train_indices() {
        by_class[corpus.records[i].gold].push(i);
    }
    let per_class = kmax.div_ceil(n_labels.max(1));
    if by_class.iter().any(|c| c.len() < per_class) || corpus.train_pool <= kmax {
        return Err(config_err!(
            "corpus too small for {kmax} labeled examples across {n_labels} classes"
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(fs.split_seed(id));
    for c in &mut by_class {
        c.shuffle(&mut rng);
    }
    let mut labeled_order = Vec::with_capacity(kmax);
    let mut cursor = 0;
    while labeled_order.len() < kmax {
        let c = labeled_order.len() % n_labels;
        labeled_order.push(by_class[c][cursor]);
        if c == n_labels - 1 {
            cursor += 1;
        }
    }
    let chosen: BTreeSet<usize> = labeled_order.iter().copied().collect();
    let unlabeled = corpus
        .train_indices()
        .filter(|i| !chosen.contains(i))
        .collect();
    Ok(Split {
        id,
        labeled_order,
        unlabeled,
        test: corpus.test_indices().collect(),
    })
}

/// Split manifest: header, then `partition\trecord-index` lines. Partitions
/// are `labeled_<K>` (in prefix order), `unlabeled` and `test`.
pub fn manifest_string(split: &Split, shots: &[usize]) -> String {
    let mut s = format!("{HEADER}\t{FORMAT_VERSION}\n");
    let _ = writeln!(s, "#split\t{}", split.id);
    for &k in shots {
        for i in split.labeled(k) {
            let _ = writeln!(s, "labeled_{k}\t{i}");
        }
    }
    for i in &split.unlabeled {
        let _ = writeln!(s, "unlabeled\t{i}");
    }
    for i in &split.test {
        let _ = writeln!(s, "test\t{i}");
    }
    s
}

/// Parses a manifest back into `(partition, index)` pairs.
pub fn parse_manifest(s: &str) -> Result<Vec<(String, usize)>> {
    let mut lines = s.lines();
    check_header(lines.next(), "manifest")?;
    lines
        .filter(|l| !l.starts_with('#'))
        .map(|l| {
            let (p, i) = l
                .split_once('\t')
                .ok_or_else(|| Error::Load(format!("manifest: bad line `{l}`")))?;
            let i = i
                .parse()
                .map_err(|_| Error::Load(format!("manifest: bad index `{i}`")))?;
            Ok((p.to_string(), i))
        })
        .collect()
}

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(Error::from)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(rho: f64) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            rho,
            train_pool: 300,
            test: 50,
            ..Default::default()
        }
    }

    // Exact agreement rate P(bayes == gold) by enumerating every sequence.
    fn enumerated_agreement(pools: &[Vec<&str>], conf: &[&str], rho: f64, lens: std::ops::RangeInclusive<usize>) -> f64 {
        let mut words: Vec<&str> = pools.iter().flatten().chain(conf).copied().collect();
        words.sort();
        words.dedup();
        let p_word = |c: usize, w: &str| {
            let own = pools[c].iter().filter(|&&x| x == w).count() as f64 / pools[c].len() as f64;
            let cf = conf.iter().filter(|&&x| x == w).count() as f64 / conf.len() as f64;
            (1.0 - rho) * own + rho * cf
        };
        let n_lens = lens.clone().count() as f64;
        let mut agree = 0.0;
        for len in lens {
            let total = words.len().pow(len as u32);
            for code in 0..total {
                let seq: Vec<&str> = (0..len).map(|i| words[(code / words.len().pow(i as u32)) % words.len()]).collect();
                let lik: Vec<f64> = (0..pools.len())
                    .map(|c| seq.iter().map(|w| p_word(c, w)).product())
                    .collect();
                let mut best = 0;
                for c in 1..lik.len() {
                    if lik[c] > lik[best] {
                        best = c;
                    }
                }
                agree += lik[best] / pools.len() as f64 / n_lens;
            }
        }
        agree
    }

    #[test]
    fn bayes_agreement_matches_enumeration() {
        let pools = vec![vec!["x", "y", "y"], vec!["y", "z"]];
        let conf = vec!["w", "x"];
        let rho = 0.3;
        let spec = SyntheticTaskSpec {
            n_labels: 2,
            class_pools: pools.iter().map(|p| p.iter().map(|w| w.to_string()).collect()).collect(),
            confuser_pool: conf.iter().map(|w| w.to_string()).collect(),
            rho,
            seq_len_min: 2,
            seq_len_max: 4,
            train_pool: 1500,
            test: 500,
        };
        let want = enumerated_agreement(&pools, &conf, rho, 2..=4);
        let c = generate(&spec, 21).unwrap();
        let got = c.records.iter().filter(|r| r.bayes == r.gold).count() as f64 / c.records.len() as f64;
        assert!((got - want).abs() <= 0.02, "empirical {got} vs exact {want}");
        assert!(want < 0.95 && want > 0.6, "{want}");
    }

    #[test]
    fn default_task_is_learnable_but_noisy() {
        let c = generate(&SyntheticTaskSpec::default(), 7).unwrap();
        let agree = c.records.iter().filter(|r| r.bayes == r.gold).count() as f64 / c.records.len() as f64;
        assert!(agree > 0.95, "{agree}");
        let train = c.train_indices().len();
        assert_eq!(train, 2030);
        assert_eq!(c.test_indices().len(), 500);
    }

    #[test]
    fn zero_noise_makes_bayes_equal_gold() {
        let c = generate(&small_spec(0.0), 4).unwrap();
        assert!(c.records.iter().all(|r| r.gold == r.bayes));
    }

    #[test]
    fn identical_pools_are_rejected() {
        let mut spec = small_spec(0.2);
        spec.class_pools[1] = spec.class_pools[0].iter().rev().cloned().collect();
        assert!(matches!(generate(&spec, 0), Err(Error::Config(_))));
    }

    #[test]
    fn rho_must_stay_below_half() {
        assert!(small_spec(0.5).validate().is_err());
        assert!(small_spec(0.49).validate().is_ok());
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&small_spec(0.3), 9).unwrap();
        let b = generate(&small_spec(0.3), 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate(&small_spec(0.3), 10).unwrap());
    }

    #[test]
    fn tokenize_round_trip_and_reserved_ids() {
        let c = generate(&small_spec(0.3), 1).unwrap();
        for r in &c.records {
            let text = c.vocab.detokenize(&r.tokens).unwrap();
            assert_eq!(c.vocab.tokenize(&text).unwrap(), r.tokens);
        }
        assert_eq!(c.vocab.mask_id(), 3);
        assert_eq!(c.vocab.id(PAD).unwrap(), 0);
        assert!(matches!(c.vocab.tokenize("a0 zzz"), Err(Error::Input(_))));
    }

    #[test]
    fn vocab_file_round_trip() {
        let v = small_spec(0.1).vocab().unwrap();
        let back = Vocab::from_file_str(&v.to_file_string()).unwrap();
        assert_eq!(v, back);
        assert!(Vocab::from_file_str("#format-version\t9\n[PAD]\n").is_err());
    }

    #[test]
    fn splits_are_nested_balanced_and_partition_the_pool() {
        let c = generate(&small_spec(0.3), 2).unwrap();
        let fs = FewShotSpec::default();
        for id in 1..=fs.n_splits {
            let s = split(&c, &fs, id).unwrap();
            assert_eq!(s.labeled(10).len(), 10);
            assert!(s.labeled(20).starts_with(s.labeled(10)));
            assert!(s.labeled(30).starts_with(s.labeled(20)));
            for k in [10, 20, 30] {
                let ones = s.labeled(k).iter().filter(|&&i| c.records[i].gold == 1).count();
                assert_eq!(ones * 2, k);
            }
            let mut all: Vec<usize> = s.labeled(30).iter().chain(&s.unlabeled).copied().collect();
            all.sort();
            assert_eq!(all, c.train_indices().collect::<Vec<_>>());
            assert!(s.test.iter().all(|&i| i >= c.train_pool));
            assert_eq!(s, split(&c, &fs, id).unwrap());
        }
    }

    #[test]
    fn tiny_corpus_cannot_be_split() {
        let spec = SyntheticTaskSpec {
            train_pool: 20,
            test: 5,
            ..Default::default()
        };
        let c = generate(&spec, 0).unwrap();
        assert!(matches!(split(&c, &FewShotSpec::default(), 1), Err(Error::Config(_))));
    }

    #[test]
    fn corpus_and_manifest_round_trip() {
        let c = generate(&small_spec(0.3), 2).unwrap();
        let text = c.to_file_string().unwrap();
        let back = Corpus::from_file_str(&text, c.vocab.clone()).unwrap();
        assert_eq!(back, c);
        let s = split(&c, &FewShotSpec::default(), 3).unwrap();
        let m = parse_manifest(&manifest_string(&s, &[10, 20, 30])).unwrap();
        let l10: Vec<usize> = m.iter().filter(|(p, _)| p == "labeled_10").map(|(_, i)| *i).collect();
        assert_eq!(l10, s.labeled(10));
    }
}

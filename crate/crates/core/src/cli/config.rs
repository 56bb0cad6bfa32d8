use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterConfig;
use crate::data::{label_token, Corpus, FewShotSpec, SyntheticTaskSpec, Vocab};
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{config_err, Error, Result};
use crate::prompting::{Denominator, PromptModel, PromptTemplate, Verbalizer};
use crate::selftrain::{Mode, SelfTrainConfig};

pub const CONFIG_VERSION: u32 = 1;
/// Overrides `output_dir` of every config when set.
pub const OUTPUT_ROOT_ENV: &str = "LST_OUTPUT_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptConfig {
    pub template: String,
    pub label_words: Vec<String>,
    #[serde(default)]
    pub denominator: Denominator,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            template: "[CLS] {S1} it was {MASK} .".into(),
            label_words: (0..2).map(label_token).collect(),
            denominator: Denominator::Restricted,
        }
    }
}

/// Everything one `train` invocation needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub format_version: u32,
    pub mode: Mode,
    pub output_dir: PathBuf,
    pub data_seed: u64,
    pub encoder_seed: u64,
    pub seeds: Vec<u64>,
    /// Labeled-set sizes to train; each must appear in `few_shot.shots`.
    pub shots: Vec<usize>,
    pub encoder: EncoderConfig,
    pub adapter: AdapterConfig,
    pub prompt: PromptConfig,
    pub train: SelfTrainConfig,
    pub task: SyntheticTaskSpec,
    pub few_shot: FewShotSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            format_version: CONFIG_VERSION,
            mode: Mode::List,
            output_dir: PathBuf::from("lst-out"),
            data_seed: 7,
            encoder_seed: 42,
            seeds: (1..=5).collect(),
            shots: vec![10],
            encoder: EncoderConfig::default(),
            adapter: AdapterConfig::default(),
            prompt: PromptConfig::default(),
            train: SelfTrainConfig::default(),
            task: SyntheticTaskSpec::default(),
            few_shot: FewShotSpec::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| config_err!("{e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err!("cannot read config {}: {e}", path.display()))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// The training config with the top-level mode applied.
    pub fn train_config(&self, seed: u64) -> SelfTrainConfig {
        SelfTrainConfig {
            mode: self.mode,
            seed,
            ..self.train.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != CONFIG_VERSION {
            return Err(config_err!(
                "unsupported config format_version {} (expected {CONFIG_VERSION})",
                self.format_version
            ));
        }
        self.encoder.validate()?;
        self.adapter.validate(&self.encoder)?;
        self.task.validate()?;
        self.few_shot.validate()?;
        self.train_config(0).validate()?;
        if self.seeds.is_empty() {
            return Err(config_err!("seeds must not be empty"));
        }
        if self.shots.is_empty() || self.shots.iter().any(|k| !self.few_shot.shots.contains(k)) {
            return Err(config_err!("every entry of shots must appear in few_shot.shots"));
        }
        if self.task.n_labels != self.prompt.label_words.len() {
            return Err(config_err!(
                "{} label words for {} labels",
                self.prompt.label_words.len(),
                self.task.n_labels
            ));
        }
        let vocab = self.task.vocab()?;
        if vocab.len() > self.encoder.vocab_size {
            return Err(config_err!(
                "task vocabulary has {} tokens but encoder.vocab_size is {}",
                vocab.len(),
                self.encoder.vocab_size
            ));
        }
        PromptTemplate::parse(&self.prompt.template, &vocab)?;
        Verbalizer::from_words(&self.prompt.label_words, &vocab)?;
        Ok(())
    }

    /// `output_dir`, unless the environment overrides it.
    pub fn output_root(&self) -> PathBuf {
        std::env::var_os(OUTPUT_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| self.output_dir.clone())
    }

    pub fn build_encoder(&self) -> Result<EncoderParams> {
        EncoderParams::init(&self.encoder, self.encoder_seed)
    }

    pub fn build_corpus(&self) -> Result<Corpus> {
        crate::data::generate(&self.task, self.data_seed)
    }

    pub fn template(&self, vocab: &Vocab) -> Result<PromptTemplate> {
        PromptTemplate::parse(&self.prompt.template, vocab)
    }

    pub fn build_model<'e>(&self, enc: &'e EncoderParams, vocab: &Vocab) -> Result<PromptModel<'e>> {
        let v = Verbalizer::from_words(&self.prompt.label_words, vocab)?;
        PromptModel::new(enc, v, self.prompt.denominator)
    }
}

/// `gen-data` input: a task spec and an optional few-shot spec.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpecFile {
    pub task: SyntheticTaskSpec,
    #[serde(default)]
    pub few_shot: FewShotSpec,
}

impl DataSpecFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err!("cannot read spec {}: {e}", path.display()))?;
        let spec: Self = toml::from_str(&text).map_err(|e| config_err!("{e}"))?;
        spec.task.validate()?;
        spec.few_shot.validate()?;
        Ok(spec)
    }
}

pub(crate) fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path)
        .map_err(|e| Error::Config(format!("cannot create {}: {e}", path.display())))
}

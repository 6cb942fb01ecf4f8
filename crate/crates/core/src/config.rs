//! Run configuration: one TOML file drives every command.
//!
//! ```toml
//! seed = 0
//! out_dir = "runs/markov"
//!
//! [model]            # n_layers, n_heads, d_model, vocab_size, max_len
//! [data]             # source = "markov" | "text", seq_len, ...
//! [train]            # lambda, block_draft, block_global, mix, batch, steps, ...
//! [[stages]]         # block_size, gamma, policy, remask, steps_per_block, temperature, nucleus_p
//! [eval]             # scorer = "markov" | "ar" | "uniform", n_samples, ...
//! [ablate]           # grid settings
//! ```
//!
//! The top-level seed overrides the training seed. Resolution fills in
//! everything derived from the data (the vocabulary size for text corpora),
//! and the resolved file is what gets written next to outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::IgnoredAny;
use serde::{Deserialize, Serialize};

use crate::data::{chunk, MarkovSpec, Vocab, VocabMode};
use crate::error::{Error, Result};
use crate::eval::GridSpec;
use crate::model::DenoiserConfig;
use crate::rng::{self, streams};
use crate::sampler::{StageConfig, StagePlan};
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    #[default]
    Markov,
    Text,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: Source,
    /// Transition matrix file; a random chain is drawn from the seed if absent.
    pub markov_path: Option<PathBuf>,
    /// Dirichlet concentration for random chains.
    pub concentration: f64,
    pub text_path: Option<PathBuf>,
    pub mode: VocabMode,
    pub seq_len: usize,
    /// Synthetic sequences to draw for training and held-out evaluation.
    pub n_train: usize,
    pub n_heldout: usize,
    /// Fraction of text chunks held out.
    pub heldout_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: Source::Markov,
            markov_path: None,
            concentration: 0.3,
            text_path: None,
            mode: VocabMode::Char,
            seq_len: 64,
            n_train: 4096,
            n_heldout: 64,
            heldout_fraction: 0.05,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScorerKind {
    #[default]
    Markov,
    Ar,
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub scorer: ScorerKind,
    pub n_samples: usize,
    /// Monte Carlo draws per held-out sequence for the NELBO.
    pub nelbo_mc: usize,
    /// Block size for the NELBO; the last stage's block size if absent.
    pub nelbo_block: Option<usize>,
    /// Existing AR scorer checkpoint; trained from `scorer_train` if absent.
    pub scorer_ckpt: Option<PathBuf>,
    pub scorer_model: DenoiserConfig,
    pub scorer_train: TrainConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            scorer: ScorerKind::Markov,
            n_samples: 64,
            nelbo_mc: 4,
            nelbo_block: None,
            scorer_ckpt: None,
            scorer_model: DenoiserConfig::default(),
            scorer_train: TrainConfig {
                steps: 500,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedCheckpoint {
    pub name: String,
    pub path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct AblateConfig {
    #[serde(flatten)]
    pub grid: GridSpec,
    /// Models for the training-mix axis, in report order.
    pub checkpoints: Vec<NamedCheckpoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: DenoiserConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub stages: Vec<StageConfig>,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            model: DenoiserConfig::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            stages: StagePlan::two_stage(4, 64, 0.5).stages,
            eval: EvalConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

/// Training and held-out sequences plus what is needed to decode and score
/// them.
pub struct Dataset {
    pub vocab: Vocab,
    pub train: Vec<Vec<u32>>,
    pub heldout: Vec<Vec<u32>>,
    pub markov: Option<MarkovSpec>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        // `[ablate]` flattens the grid, which serde cannot combine with
        // deny_unknown_fields.
        #[derive(Deserialize)]
        struct Keys {
            #[serde(default)]
            ablate: BTreeMap<String, IgnoredAny>,
        }
        const KEYS: [&str; 8] = [
            "len",
            "scopes",
            "gammas",
            "gamma",
            "n_samples",
            "seeds",
            "nelbo_mc",
            "checkpoints",
        ];
        let keys: Keys = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(k) = keys.ablate.keys().find(|k| !KEYS.contains(&k.as_str())) {
            return Err(Error::Config(format!("unknown field `{k}` in [ablate]")));
        }
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn plan(&self) -> StagePlan {
        StagePlan::new(self.stages.clone())
    }

    /// Propagates the run seed, syncs the grid length and the vocabulary
    /// size with the data, then validates.
    pub fn resolve(mut self) -> Result<Self> {
        self.train.seed = self.seed;
        self.eval.scorer_train.seed = rng::derive_seed(self.seed, streams::SCORER);
        self.ablate.grid.len = self.data.seq_len;
        if let (Some(first), Some(last)) = (self.stages.first(), self.stages.last()) {
            self.ablate.grid.draft = *first;
            self.ablate.grid.revision = *last;
        }
        match self.data.source {
            Source::Markov => {
                if let Some(p) = &self.data.markov_path {
                    self.model.vocab_size = MarkovSpec::load(p)?.states();
                }
            }
            Source::Text => {
                let p = self
                    .data
                    .text_path
                    .as_ref()
                    .ok_or_else(|| Error::Config("text source needs data.text_path".into()))?;
                let corpus = read_corpus(p)?;
                self.model.vocab_size = Vocab::build(&corpus, self.data.mode)?.size();
            }
        }
        self.eval.scorer_model.vocab_size = self.model.vocab_size;
        self.eval.scorer_model.max_len = self.eval.scorer_model.max_len.max(self.data.seq_len);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let len = self.data.seq_len;
        if len == 0 || len > self.model.max_len {
            return Err(Error::Config(format!(
                "seq_len {len} must be in 1..={}",
                self.model.max_len
            )));
        }
        self.train.validate(len)?;
        self.plan().validate(len)?;
        if self.data.source == Source::Text && self.eval.scorer == ScorerKind::Markov {
            return Err(Error::Config("the markov scorer needs markov data".into()));
        }
        if self.data.source == Source::Markov
            && self.data.markov_path.is_none()
            && self.model.vocab_size > 62
        {
            return Err(Error::Config(
                "random chains support at most 62 states".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.data.heldout_fraction) {
            return Err(Error::Config("heldout_fraction must be in [0, 1)".into()));
        }
        for p in [
            &self.data.markov_path,
            &self.data.text_path,
            &self.eval.scorer_ckpt,
        ]
        .into_iter()
        .flatten()
        {
            if !p.exists() {
                return Err(Error::Config(format!("{} does not exist", p.display())));
            }
        }
        for c in &self.ablate.checkpoints {
            if !c.path.exists() {
                return Err(Error::Config(format!(
                    "checkpoint {} does not exist",
                    c.path.display()
                )));
            }
        }
        Ok(())
    }

    /// Loads or generates the data this config describes.
    pub fn dataset(&self) -> Result<Dataset> {
        let len = self.data.seq_len;
        match self.data.source {
            Source::Markov => {
                let spec = match &self.data.markov_path {
                    Some(p) => MarkovSpec::load(p)?,
                    None => MarkovSpec::random(
                        self.model.vocab_size,
                        self.data.concentration,
                        &mut rng::stream(rng::derive_seed(self.seed, streams::DATA), 0),
                    )?,
                };
                let mut r = rng::stream(rng::derive_seed(self.seed, streams::DATA), 1);
                let train = spec.sample_sequences(self.data.n_train, len, &mut r);
                let heldout = spec.sample_sequences(self.data.n_heldout, len, &mut r);
                Ok(Dataset {
                    vocab: Vocab::markov(spec.states())?,
                    train,
                    heldout,
                    markov: Some(spec),
                })
            }
            Source::Text => {
                let p = self.data.text_path.as_ref().expect("validated");
                let corpus = read_corpus(p)?;
                let vocab = Vocab::build(&corpus, self.data.mode)?;
                let chunks = chunk(&vocab.encode(&corpus)?, len)?;
                let n_held = ((chunks.len() as f64 * self.data.heldout_fraction) as usize)
                    .min(chunks.len() - 1);
                let (train, heldout) = chunks.split_at(chunks.len() - n_held);
                Ok(Dataset {
                    vocab,
                    train: train.to_vec(),
                    heldout: heldout.to_vec(),
                    markov: None,
                })
            }
        }
    }

    /// Writes `resolved_config.toml` into the output directory.
    pub fn echo(&self) -> Result<PathBuf> {
        fs::create_dir_all(&self.out_dir)?;
        let path = self.out_dir.join("resolved_config.toml");
        fs::write(&path, self.to_toml()?)?;
        Ok(path)
    }
}

fn read_corpus(p: &Path) -> Result<Vec<u8>> {
    fs::read(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))
}

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::conseq::ConseqConfig;
use crate::error::{Error, Result};
use crate::qagen::ContextQaGen;
use crate::seqmodel::{GenerationConfig, PointerRnnConfig, Vocabulary};

/// Summarizer architecture and MLE schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub pointer: PointerRnnConfig,
    pub init_seed: u64,
    pub mle_learning_rate: f64,
    pub mle_epochs: usize,
    pub mle_batch_size: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            pointer: PointerRnnConfig::default(),
            init_seed: 0,
            mle_learning_rate: 3e-5,
            mle_epochs: 1,
            mle_batch_size: 8,
        }
    }
}

/// The QAGen backend and its decoding settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QualsSection {
    /// Question length of the n-gram cloze backend.
    pub question_len: usize,
    pub epsilon: f64,
    /// Tokens that end a clause; questions never cross them.
    pub boundary: Vec<String>,
    pub generation: GenerationConfig,
}

impl Default for QualsSection {
    fn default() -> Self {
        QualsSection {
            question_len: 2,
            epsilon: 0.05,
            boundary: vec![".".into()],
            generation: GenerationConfig::diverse_beam(60, 0.5).with_lengths(0, 64),
        }
    }
}

impl QualsSection {
    pub fn backend(&self, vocab: Vocabulary) -> Result<ContextQaGen> {
        let b: Vec<&str> = self.boundary.iter().map(String::as_str).collect();
        ContextQaGen::new(vocab, self.question_len, self.epsilon, &b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub bins: usize,
    /// Top-k samples per document when evaluating by sampling.
    pub samples_per_doc: usize,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            bins: 10,
            samples_per_doc: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsSection {
    pub corpus: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub run_dir: Option<PathBuf>,
}

/// Run configuration. Every key is optional; absent keys take defaults.
///
/// Defaults: summaries decoded with beam 6 over 10-60 tokens (beam 4 over
/// 55-140 is [`GenerationConfig::long_summary_profile`]), q-a pairs from
/// diverse beam search with 60 groups, top-k 50 with 6 samples per
/// document, p = 30, contrastive learning rate one tenth of the MLE rate.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub model: ModelSection,
    pub generation: GenerationConfig,
    pub quals: QualsSection,
    pub conseq: ConseqConfig,
    pub eval: EvalSection,
    pub paths: PathsSection,
}

impl AppConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: AppConfig =
            serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        cfg.conseq.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_files_take_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"conseq": {"p": 50}, "eval": {"bins": 4}}"#).unwrap();
        let c = AppConfig::load(&path).unwrap();
        assert_eq!(c.conseq.p, 50.0);
        assert_eq!(c.conseq.top_k, 50);
        assert_eq!(c.eval.bins, 4);
        assert_eq!(c.generation.beam_width, 6);
        assert!((c.conseq.learning_rate - c.model.mle_learning_rate / 10.0).abs() < 1e-18);

        fs::write(&path, r#"{"modle": {}}"#).unwrap();
        assert!(matches!(AppConfig::load(&path), Err(Error::InvalidConfig(_))));
        fs::write(&path, r#"{"conseq": {"p": 0}}"#).unwrap();
        assert!(matches!(AppConfig::load(&path), Err(Error::InvalidConfig(_))));

        c.save(&path).unwrap();
        assert_eq!(AppConfig::load(&path).unwrap(), c);
    }
}

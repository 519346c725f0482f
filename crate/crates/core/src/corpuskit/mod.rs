//! Corpus files, the synthetic corruption corpus and run configuration.

mod config;
mod synth;

pub use config::{AppConfig, EvalSection, ModelSection, PathsSection, QualsSection};
pub use synth::{generate_corpus, CorruptionKind, CorruptionLabel, CorruptionSpec, GeneratedCorpus};

use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conseq::ConseqExample;
use crate::error::{Error, Result};
use crate::seqmodel::{TokenSequence, Vocabulary};

/// One line of a corpus file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusExample {
    pub id: String,
    pub document: String,
    pub summary: String,
}

impl CorpusExample {
    pub fn encode(&self, vocab: &Vocabulary) -> Result<(TokenSequence, TokenSequence)> {
        Ok((vocab.encode(&self.document)?, vocab.encode(&self.summary)?))
    }

    pub fn to_conseq(&self, vocab: &Vocabulary) -> Result<ConseqExample> {
        let (document, reference) = self.encode(vocab)?;
        Ok(ConseqExample {
            id: self.id.clone(),
            document,
            reference,
        })
    }
}

pub fn write_corpus(examples: &[CorpusExample], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for ex in examples {
        serde_json::to_writer(&mut w, ex)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a JSONL corpus. Blank lines are skipped; line numbers in errors
/// are 1-based.
pub fn read_corpus(path: &Path) -> Result<Vec<CorpusExample>> {
    parse_corpus(&fs::read_to_string(path)?)
}

pub fn parse_corpus(text: &str) -> Result<Vec<CorpusExample>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| Error::Format { line: i + 1, message };
        let ex: CorpusExample = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        if ex.document.trim().is_empty() {
            return Err(bad(format!("empty document for id {:?}", ex.id)));
        }
        if !seen.insert(ex.id.clone()) {
            return Err(bad(format!("duplicate id {:?}", ex.id)));
        }
        out.push(ex);
    }
    Ok(out)
}

pub fn write_vocab(vocab: &Vocabulary, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(vocab)?)?;
    Ok(())
}

pub fn read_vocab(path: &Path) -> Result<Vocabulary> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

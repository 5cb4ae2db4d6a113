use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::numerics::RngStream;

/// Generic sentences fed to the model when measuring disagreement.
const GENERIC_SENTENCES: [&str; 9] = [
    "Here We Go Then, You And I is a 1999 album by Norwegian pop artist Morten Abel. It was Abel's second CD as a solo artist.",
    "The album went straight to number one on the Norwegian album chart, and sold to double platinum.",
    "Among the singles released from the album were the songs \"Be My Lover\" and \"Hard To Stay Awake\".",
    "Riccardo Zegna is an Italian jazz musician.",
    "Rajko Maksimović is a composer, writer, and music pedagogue.",
    "One of the most significant Serbian composers of our time, Maksimović has been and remains active in creating works for different ensembles.",
    "Ceylon spinach is a common name for several plants and may refer to: Basella alba Talinum fruticosum.",
    "A solar eclipse occurs when the Moon passes between Earth and the Sun, thereby totally or partly obscuring the image of the Sun for a viewer on Earth.",
    "A partial solar eclipse occurs in the polar regions of the Earth when the center of the Moon's shadow misses the Earth.",
];

/// Number of training records used for in-domain scoring text.
pub const IN_DOMAIN_SAMPLES: usize = 10;

/// Scoring input text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub sentences: Vec<String>,
    /// Where the sentences came from, for provenance in reports.
    pub source: String,
}

impl Corpus {
    pub fn new(sentences: Vec<String>, source: impl Into<String>) -> Result<Self> {
        if sentences.is_empty() {
            return Err(Error::InvalidArgument("scoring corpus is empty".into()));
        }
        Ok(Self {
            sentences,
            source: source.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// One sentence per non-blank line.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = crate::fileio::read_text(path)?;
        let sentences = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect();
        Self::new(sentences, path.display().to_string())
    }

    /// The first [`IN_DOMAIN_SAMPLES`] records of `dataset` after a seeded shuffle.
    pub fn in_domain(dataset: &Dataset, seed: u64) -> Result<Self> {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        RngStream::derived(seed, &[0x1d0_a11]).shuffle(&mut order);
        let sentences = order
            .iter()
            .take(IN_DOMAIN_SAMPLES)
            .map(|&i| dataset.records[i].text.clone())
            .collect();
        Self::new(sentences, format!("in-domain:{}", dataset.name))
    }
}

/// The bundled generic sentences, verbatim.
pub fn generic_corpus() -> Corpus {
    Corpus {
        sentences: GENERIC_SENTENCES.iter().map(|s| s.to_string()).collect(),
        source: "generic".into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Record, Split, Tokenizer, PAD_ID};

    #[test]
    fn generic_corpus_shape() {
        let c = generic_corpus();
        assert_eq!(c.len(), 9);
        assert!(c.sentences[0].starts_with("Here We Go Then, You And I"));
        let tok = Tokenizer::new(8192).unwrap();
        for s in &c.sentences {
            assert!(tok.tokenize(s, 64).iter().any(|&id| id != PAD_ID));
            assert!(Tokenizer::words(s).count() >= 1);
        }
    }

    #[test]
    fn in_domain_takes_ten_after_shuffle() {
        let records = (0..25)
            .map(|i| Record { label: i % 2, text: format!("record {i}") })
            .collect();
        let ds = Dataset::new("d", Split::Train, 2, records).unwrap();
        let a = Corpus::in_domain(&ds, 3).unwrap();
        let b = Corpus::in_domain(&ds, 3).unwrap();
        assert_eq!(a.len(), 10);
        assert_eq!(a, b);
        let firsts: Vec<String> = (0..10).map(|i| format!("record {i}")).collect();
        assert_ne!(a.sentences, firsts);
    }

    #[test]
    fn file_corpus_skips_blank_lines() {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), "one\n\n  two  \n").unwrap();
        let c = Corpus::from_file(f.path()).unwrap();
        assert_eq!(c.sentences, vec!["one", "two"]);
        std::fs::write(f.path(), "\n\n").unwrap();
        assert!(Corpus::from_file(f.path()).is_err());
    }
}

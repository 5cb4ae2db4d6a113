//! Keyword-driven synthetic classification data.
//!
//! Each class owns a disjoint set of keywords; every record mixes keywords of
//! its class with filler words shared by all classes. Label noise flips the
//! label to one of the other classes, drawn uniformly.

use super::{Dataset, Record, Split};
use crate::error::{Error, Result};
use crate::numerics::RngStream;

const ONSETS: [&str; 20] = [
    "b", "d", "f", "g", "h", "j", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "st", "kr", "pl",
];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

/// Deterministic pronounceable word for an index (three syllables, injective below 10^6).
pub fn pseudo_word(index: usize) -> String {
    let syllables = ONSETS.len() * VOWELS.len();
    let mut rest = index;
    let mut word = String::new();
    for _ in 0..3 {
        let s = rest % syllables;
        rest /= syllables;
        word.push_str(ONSETS[s / VOWELS.len()]);
        word.push_str(VOWELS[s % VOWELS.len()]);
    }
    word
}

/// Sizes of the keyword and filler vocabularies.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VocabSubsets {
    pub keywords_per_class: usize,
    pub filler_words: usize,
}

impl Default for VocabSubsets {
    fn default() -> Self {
        Self {
            keywords_per_class: 12,
            filler_words: 60,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub n: usize,
    pub vocab: VocabSubsets,
    pub noise_rate: f64,
    pub min_words: usize,
    pub max_words: usize,
    /// Probability that a word position holds a class keyword.
    pub keyword_fraction: f64,
}

impl SyntheticConfig {
    pub fn new(num_classes: usize, n: usize, noise_rate: f64) -> Self {
        Self {
            num_classes,
            n,
            vocab: VocabSubsets::default(),
            noise_rate,
            min_words: 6,
            max_words: 10,
            keyword_fraction: 0.4,
        }
    }

    pub fn keyword(&self, class: usize, j: usize) -> String {
        pseudo_word(class * self.vocab.keywords_per_class + j)
    }

    pub fn filler(&self, j: usize) -> String {
        pseudo_word(self.num_classes * self.vocab.keywords_per_class + j)
    }
}

/// Generates a dataset; identical `(config, rng)` produce identical records.
pub fn synthetic_dataset(cfg: &SyntheticConfig, split: Split, rng: &mut RngStream) -> Result<Dataset> {
    if cfg.num_classes < 2 || cfg.n < cfg.num_classes {
        return Err(Error::InvalidArgument(format!(
            "synthetic data needs num_classes >= 2 and n >= num_classes, got {} and {}",
            cfg.num_classes, cfg.n
        )));
    }
    if !(0.0..=1.0).contains(&cfg.noise_rate) || !(0.0..=1.0).contains(&cfg.keyword_fraction) {
        return Err(Error::InvalidArgument("noise_rate and keyword_fraction must lie in [0, 1]".into()));
    }
    if cfg.min_words == 0 || cfg.max_words < cfg.min_words {
        return Err(Error::InvalidArgument("need 1 <= min_words <= max_words".into()));
    }
    if cfg.vocab.keywords_per_class == 0 || cfg.vocab.filler_words == 0 {
        return Err(Error::InvalidArgument("keyword and filler vocabularies must be nonempty".into()));
    }
    if (cfg.num_classes * cfg.vocab.keywords_per_class + cfg.vocab.filler_words) > 1_000_000 {
        return Err(Error::InvalidArgument("synthetic vocabulary too large".into()));
    }

    let mut classes: Vec<usize> = (0..cfg.n).map(|i| i % cfg.num_classes).collect();
    rng.shuffle(&mut classes);

    let mut records = Vec::with_capacity(cfg.n);
    for class in classes {
        let len = cfg.min_words + rng.below(cfg.max_words - cfg.min_words + 1);
        let forced = rng.below(len);
        let words: Vec<String> = (0..len)
            .map(|pos| {
                let is_keyword = rng.uniform() < cfg.keyword_fraction;
                if is_keyword || pos == forced {
                    cfg.keyword(class, rng.below(cfg.vocab.keywords_per_class))
                } else {
                    cfg.filler(rng.below(cfg.vocab.filler_words))
                }
            })
            .collect();
        let label = if rng.uniform() < cfg.noise_rate {
            (class + 1 + rng.below(cfg.num_classes - 1)) % cfg.num_classes
        } else {
            class
        };
        records.push(Record {
            label,
            text: words.join(" "),
        });
    }
    Dataset::new(format!("synthetic-{}c", cfg.num_classes), split, cfg.num_classes, records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    /// Bag-of-words oracle: predicts the class owning the most keywords in the text.
    fn oracle_accuracy(cfg: &SyntheticConfig, ds: &Dataset) -> f64 {
        let mut owner = HashMap::new();
        for c in 0..cfg.num_classes {
            for j in 0..cfg.vocab.keywords_per_class {
                owner.insert(cfg.keyword(c, j), c);
            }
        }
        let correct = ds
            .records
            .iter()
            .filter(|r| {
                let mut counts = vec![0usize; cfg.num_classes];
                for w in r.text.split(' ') {
                    if let Some(&c) = owner.get(w) {
                        counts[c] += 1;
                    }
                }
                let best = (0..cfg.num_classes).max_by_key(|&c| (counts[c], std::cmp::Reverse(c))).unwrap();
                best == r.label
            })
            .count();
        correct as f64 / ds.len() as f64
    }

    #[test]
    fn pseudo_words_are_distinct() {
        let words: std::collections::HashSet<String> = (0..5000).map(pseudo_word).collect();
        assert_eq!(words.len(), 5000);
    }

    #[test]
    fn noiseless_data_is_perfectly_separable() {
        let cfg = SyntheticConfig::new(4, 2000, 0.0);
        let ds = synthetic_dataset(&cfg, Split::Train, &mut RngStream::new(1, 0)).unwrap();
        assert_eq!(oracle_accuracy(&cfg, &ds), 1.0);
    }

    #[test]
    fn noisy_labels_always_differ_from_the_keywords() {
        let cfg = SyntheticConfig::new(4, 5000, 0.2);
        let ds = synthetic_dataset(&cfg, Split::Train, &mut RngStream::new(2, 0)).unwrap();
        let acc = oracle_accuracy(&cfg, &ds);
        assert!((acc - 0.8).abs() <= 0.02, "{acc}");
        let all_flipped = SyntheticConfig::new(3, 600, 1.0);
        let ds = synthetic_dataset(&all_flipped, Split::Train, &mut RngStream::new(3, 0)).unwrap();
        assert_eq!(oracle_accuracy(&all_flipped, &ds), 0.0);
    }

    #[test]
    fn deterministic_and_balanced() {
        let cfg = SyntheticConfig::new(4, 1000, 0.05);
        let a = synthetic_dataset(&cfg, Split::Train, &mut RngStream::new(9, 0)).unwrap();
        let b = synthetic_dataset(&cfg, Split::Train, &mut RngStream::new(9, 0)).unwrap();
        assert_eq!(a, b);
        let mut counts = [0usize; 4];
        for r in &a.records {
            counts[r.label] += 1;
        }
        for c in counts {
            assert!((c as f64 / 1000.0 - 0.25).abs() <= 0.05, "{counts:?}");
        }
    }

    #[test]
    fn rejects_bad_sizes() {
        let mut rng = RngStream::new(0, 0);
        assert!(synthetic_dataset(&SyntheticConfig::new(1, 10, 0.0), Split::Train, &mut rng).is_err());
        assert!(synthetic_dataset(&SyntheticConfig::new(4, 3, 0.0), Split::Train, &mut rng).is_err());
    }
}

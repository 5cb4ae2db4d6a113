/// Padding id.
pub const PAD_ID: u32 = 0;
/// Id emitted for empty input.
pub const UNK_ID: u32 = 1;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
pub(crate) const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a.
pub fn fnv1a_64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Hashing tokenizer: lowercase, split on anything that is not alphanumeric,
/// map each word to `2 + fnv1a_64(word) mod (vocab_size - 2)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    vocab_size: usize,
}

impl Tokenizer {
    pub fn new(vocab_size: usize) -> crate::Result<Self> {
        if vocab_size < 3 {
            return Err(crate::Error::InvalidArgument(format!(
                "tokenizer needs vocab_size >= 3, got {vocab_size}"
            )));
        }
        Ok(Self { vocab_size })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(str::to_lowercase)
    }

    pub fn token_id(&self, word: &str) -> u32 {
        (2 + fnv1a_64(word.as_bytes()) % (self.vocab_size as u64 - 2)) as u32
    }

    /// Number of word tokens before truncation (at least 1, for the unknown marker).
    pub fn token_count(&self, text: &str) -> usize {
        Self::words(text).count().max(1)
    }

    /// Token ids truncated or right-padded to exactly `max_len`.
    pub fn tokenize(&self, text: &str, max_len: usize) -> Vec<u32> {
        assert!(max_len >= 1, "max_len must be >= 1");
        let mut ids: Vec<u32> = Self::words(text)
            .take(max_len)
            .map(|w| self.token_id(&w))
            .collect();
        if ids.is_empty() {
            ids.push(UNK_ID);
        }
        ids.resize(max_len, PAD_ID);
        ids
    }
}

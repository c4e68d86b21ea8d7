//! Synthetic paired speech/text corpus and the character tokenizer.
//!
//! Every token id owns a fixed prototype feature vector. An utterance is a
//! random character string; each character contributes a random number of
//! frames equal to its prototype plus Gaussian noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::autodiff::Array;
use crate::ctc::{TokenSequence, FIRST_CHAR_ID};
use crate::encoders::MIN_FRAMES;

pub const ALPHABET: &str = "abcdefghijklmnopqrstuvwxyz0123456789";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DataError {
    #[error("unknown character {ch:?} at position {position}")]
    UnknownChar { ch: char, position: usize },
    #[error("token id {0} is not a character")]
    NotACharacter(usize),
    #[error("invalid corpus config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Bijective character <-> id map; ids start past the reserved range.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    alphabet: Vec<char>,
}

impl Tokenizer {
    pub fn new(chars: usize) -> Result<Self> {
        let available = ALPHABET.chars().count();
        if chars == 0 || chars > available {
            return Err(DataError::Config(format!(
                "vocab_chars must be in 1..={available}, got {chars}"
            )));
        }
        Ok(Self {
            alphabet: ALPHABET.chars().take(chars).collect(),
        })
    }

    pub fn chars(&self) -> &[char] {
        &self.alphabet
    }

    /// Vocabulary size including the reserved ids.
    pub fn vocab_size(&self) -> usize {
        self.alphabet.len() + FIRST_CHAR_ID
    }

    pub fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        text.chars()
            .enumerate()
            .map(|(position, ch)| {
                self.alphabet
                    .iter()
                    .position(|&c| c == ch)
                    .map(|i| i + FIRST_CHAR_ID)
                    .ok_or(DataError::UnknownChar { ch, position })
            })
            .collect::<Result<Vec<_>>>()
            .map(TokenSequence)
    }

    pub fn detokenize(&self, tokens: &TokenSequence) -> Result<String> {
        tokens
            .ids()
            .iter()
            .map(|&id| {
                id.checked_sub(FIRST_CHAR_ID)
                    .and_then(|i| self.alphabet.get(i).copied())
                    .ok_or(DataError::NotACharacter(id))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    pub vocab_chars: usize,
    pub feature_dim: usize,
    pub train_utts: usize,
    pub dev_utts: usize,
    pub test_utts: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub min_frames_per_token: usize,
    pub max_frames_per_token: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            vocab_chars: 27,
            feature_dim: 16,
            train_utts: 400,
            dev_utts: 100,
            test_utts: 100,
            min_len: 4,
            max_len: 10,
            min_frames_per_token: 6,
            max_frames_per_token: 10,
            // puts the baseline's dev CER in the 10-30% band
            noise_std: 1.3,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        Tokenizer::new(self.vocab_chars)?;
        if self.feature_dim == 0 {
            return Err(DataError::Config("feature_dim must be positive".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(DataError::Config(format!(
                "need 1 <= min_len <= max_len, got {}..{}",
                self.min_len, self.max_len
            )));
        }
        if self.min_frames_per_token == 0 || self.min_frames_per_token > self.max_frames_per_token {
            return Err(DataError::Config(format!(
                "need 1 <= min_frames_per_token <= max_frames_per_token, got {}..{}",
                self.min_frames_per_token, self.max_frames_per_token
            )));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(DataError::Config("noise_std must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub features: Array,
    pub text: String,
    pub tokens: TokenSequence,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        Split::ALL.into_iter().find(|sp| sp.name() == s)
    }
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[Utterance] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }
}

/// Per-token prototype vectors, indexed by token id (reserved rows unused).
pub fn prototypes(cfg: &CorpusConfig) -> Array {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    Array::from_shape_fn((cfg.vocab_chars + FIRST_CHAR_ID, cfg.feature_dim), |_| {
        normal.sample(&mut rng)
    })
}

fn split_seed(seed: u64, split: Split) -> u64 {
    let salt = match split {
        Split::Train => 0x7472_6169_6e00_0001,
        Split::Dev => 0x6465_7600_0000_0002,
        Split::Test => 0x7465_7374_0000_0003,
    };
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt
}

fn gen_split(cfg: &CorpusConfig, tokenizer: &Tokenizer, protos: &Array, split: Split, count: usize) -> Vec<Utterance> {
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed(cfg.seed, split));
    let noise = Normal::new(0.0, cfg.noise_std).expect("noise_std validated");
    let chars = tokenizer.chars();
    (0..count)
        .map(|n| {
            let len = rng.random_range(cfg.min_len..=cfg.max_len);
            let text: String = (0..len).map(|_| chars[rng.random_range(0..chars.len())]).collect();
            let tokens = tokenizer.tokenize(&text).expect("generated from the alphabet");
            let mut spans: Vec<usize> = tokens
                .ids()
                .iter()
                .map(|_| rng.random_range(cfg.min_frames_per_token..=cfg.max_frames_per_token))
                .collect();
            let total: usize = spans.iter().sum();
            if total < MIN_FRAMES {
                *spans.last_mut().expect("min_len >= 1") += MIN_FRAMES - total;
            }
            let frames: usize = spans.iter().sum();
            let mut features = Array::zeros((frames, cfg.feature_dim));
            let mut row = 0;
            for (&id, &span) in tokens.ids().iter().zip(&spans) {
                for _ in 0..span {
                    for (k, v) in features.row_mut(row).iter_mut().enumerate() {
                        *v = protos[[id, k]] + noise.sample(&mut rng);
                    }
                    row += 1;
                }
            }
            Utterance {
                id: format!("{}-{n:05}", split.name()),
                features,
                text,
                tokens,
            }
        })
        .collect()
}

pub fn gen_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let tokenizer = Tokenizer::new(cfg.vocab_chars)?;
    let protos = prototypes(cfg);
    Ok(Corpus {
        train: gen_split(cfg, &tokenizer, &protos, Split::Train, cfg.train_utts),
        dev: gen_split(cfg, &tokenizer, &protos, Split::Dev, cfg.dev_utts),
        test: gen_split(cfg, &tokenizer, &protos, Split::Test, cfg.test_utts),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small(noise_std: f64, seed: u64) -> CorpusConfig {
        CorpusConfig {
            train_utts: 20,
            dev_utts: 5,
            test_utts: 5,
            noise_std,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn tokenizer_basics() {
        let t = Tokenizer::new(5).unwrap();
        assert!(t.tokenize("").unwrap().is_empty());
        assert_eq!(t.tokenize("abe").unwrap().0, vec![3, 4, 7]);
        assert_eq!(
            t.tokenize("abz").unwrap_err(),
            DataError::UnknownChar { ch: 'z', position: 2 }
        );
        assert_eq!(t.vocab_size(), 8);
        assert_eq!(t.detokenize(&TokenSequence(vec![1])).unwrap_err(), DataError::NotACharacter(1));
    }

    proptest! {
        #[test]
        fn tokenize_round_trips_and_is_injective(a in "[a-j]{0,12}", b in "[a-j]{0,12}") {
            let t = Tokenizer::new(10).unwrap();
            let ta = t.tokenize(&a).unwrap();
            prop_assert_eq!(t.detokenize(&ta).unwrap(), a.clone());
            prop_assert_eq!(ta == t.tokenize(&b).unwrap(), a == b);
        }
    }

    #[test]
    fn noiseless_spans_repeat_the_prototype() {
        let cfg = small(0.0, 3);
        let corpus = gen_corpus(&cfg).unwrap();
        let protos = prototypes(&cfg);
        for utt in &corpus.train {
            // every frame equals some prototype, and consecutive equal frames
            // come from one token span
            for row in utt.features.rows() {
                assert!(protos.rows().into_iter().any(|p| p == row));
            }
            let first = utt.tokens.ids()[0];
            assert_eq!(utt.features.row(0), protos.row(first));
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        assert_eq!(gen_corpus(&small(0.5, 9)).unwrap(), gen_corpus(&small(0.5, 9)).unwrap());
        assert_ne!(gen_corpus(&small(0.5, 9)).unwrap(), gen_corpus(&small(0.5, 10)).unwrap());
    }

    #[test]
    fn splits_have_distinct_ids_and_consistent_tokens() {
        let cfg = small(0.3, 4);
        let corpus = gen_corpus(&cfg).unwrap();
        let tok = Tokenizer::new(cfg.vocab_chars).unwrap();
        let mut ids = std::collections::HashSet::new();
        for split in Split::ALL {
            for utt in corpus.split(split) {
                assert!(ids.insert(utt.id.clone()));
                assert_eq!(tok.tokenize(&utt.text).unwrap(), utt.tokens);
                let frames = utt.features.nrows();
                assert!(frames >= MIN_FRAMES);
                let n = utt.tokens.len();
                assert!(frames >= n * cfg.min_frames_per_token);
                assert!(frames <= (n * cfg.max_frames_per_token).max(MIN_FRAMES));
            }
        }
    }

    #[test]
    fn mean_length_near_midpoint() {
        let cfg = CorpusConfig {
            train_utts: 1000,
            dev_utts: 0,
            test_utts: 0,
            ..Default::default()
        };
        let corpus = gen_corpus(&cfg).unwrap();
        let mean = corpus.train.iter().map(|u| u.tokens.len()).sum::<usize>() as f64 / 1000.0;
        let mid = (cfg.min_len + cfg.max_len) as f64 / 2.0;
        assert!((mean - mid).abs() < 0.1 * mid, "{mean} vs {mid}");
    }

    #[test]
    fn short_texts_are_padded_to_minimum() {
        let cfg = CorpusConfig {
            min_len: 1,
            max_len: 1,
            min_frames_per_token: 2,
            max_frames_per_token: 3,
            ..small(0.1, 5)
        };
        let corpus = gen_corpus(&cfg).unwrap();
        assert!(corpus.train.iter().all(|u| u.features.nrows() == MIN_FRAMES));
    }

    #[test]
    fn rejects_bad_configs() {
        let bad = CorpusConfig {
            min_len: 5,
            max_len: 3,
            ..Default::default()
        };
        assert!(gen_corpus(&bad).is_err());
        let bad = CorpusConfig {
            noise_std: -1.0,
            ..Default::default()
        };
        assert!(gen_corpus(&bad).is_err());
    }
}

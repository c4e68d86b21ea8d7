//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Every key is optional except
//! `seed`; unknown or repeated keys are rejected. Relative paths resolve
//! against the directory holding the config file.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use otkt::encoders::EncoderConfig;
use otkt::synthdata::CorpusConfig;
use otkt::training::{HyperParams, Mode};

use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub encoder: EncoderConfig,
    pub hp: HyperParams,
    pub mode: Mode,
    pub corpus_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Number of model seeds `ablate` trains per mode.
    pub ablate_seeds: usize,
}

pub const KEYS: &[&str] = &[
    "seed",
    "mode",
    "corpus_dir",
    "out_dir",
    "ablate_seeds",
    "vocab_chars",
    "feature_dim",
    "train_utts",
    "dev_utts",
    "test_utts",
    "min_len",
    "max_len",
    "min_frames_per_token",
    "max_frames_per_token",
    "noise_std",
    "num_blocks",
    "model_dim",
    "ffn_dim",
    "conv_kernel",
    "teacher_dim",
    "teacher_layers",
    "adapter_scale",
    "alpha",
    "lambda",
    "w",
    "base_lr",
    "warmup_steps",
    "epochs",
    "average_last",
    "batch_size",
    "clip_norm",
    "sinkhorn_max_iter",
    "sinkhorn_tol",
];

fn parse_value<T: FromStr>(key: &str, value: &str, line: usize) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Config(format!("line {line}: invalid value `{value}` for {key}")))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self, CliError> {
        let mut seed = None;
        let mut corpus = CorpusConfig::default();
        let mut encoder = EncoderConfig::default();
        let mut hp = HyperParams::default();
        let mut mode = Mode::Transfer;
        let mut corpus_dir = PathBuf::from("corpus");
        let mut out_dir = PathBuf::from("runs");
        let mut ablate_seeds = 3;
        let mut seen: Vec<String> = Vec::new();

        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {line}: expected key = value")))?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(CliError::Config(format!("line {line}: unknown key `{key}`")));
            }
            if seen.iter().any(|k| k == key) {
                return Err(CliError::Config(format!("line {line}: duplicate key `{key}`")));
            }
            seen.push(key.to_string());
            match key {
                "seed" => seed = Some(parse_value(key, value, line)?),
                "mode" => {
                    mode = Mode::parse(value).ok_or_else(|| {
                        CliError::Config(format!("line {line}: {}", crate::invalid_mode(value)))
                    })?
                }
                "corpus_dir" => corpus_dir = PathBuf::from(value),
                "out_dir" => out_dir = PathBuf::from(value),
                "ablate_seeds" => ablate_seeds = parse_value(key, value, line)?,
                "vocab_chars" => corpus.vocab_chars = parse_value(key, value, line)?,
                "feature_dim" => corpus.feature_dim = parse_value(key, value, line)?,
                "train_utts" => corpus.train_utts = parse_value(key, value, line)?,
                "dev_utts" => corpus.dev_utts = parse_value(key, value, line)?,
                "test_utts" => corpus.test_utts = parse_value(key, value, line)?,
                "min_len" => corpus.min_len = parse_value(key, value, line)?,
                "max_len" => corpus.max_len = parse_value(key, value, line)?,
                "min_frames_per_token" => corpus.min_frames_per_token = parse_value(key, value, line)?,
                "max_frames_per_token" => corpus.max_frames_per_token = parse_value(key, value, line)?,
                "noise_std" => corpus.noise_std = parse_value(key, value, line)?,
                "num_blocks" => encoder.num_blocks = parse_value(key, value, line)?,
                "model_dim" => encoder.model_dim = parse_value(key, value, line)?,
                "ffn_dim" => encoder.ffn_dim = parse_value(key, value, line)?,
                "conv_kernel" => encoder.conv_kernel = parse_value(key, value, line)?,
                "teacher_dim" => encoder.teacher_dim = parse_value(key, value, line)?,
                "teacher_layers" => encoder.teacher_layers = parse_value(key, value, line)?,
                "adapter_scale" => encoder.adapter_scale = parse_value(key, value, line)?,
                "alpha" => hp.alpha = parse_value(key, value, line)?,
                "lambda" => hp.lambda = parse_value(key, value, line)?,
                "w" => hp.w = parse_value(key, value, line)?,
                "base_lr" => hp.base_lr = parse_value(key, value, line)?,
                "warmup_steps" => hp.warmup_steps = parse_value(key, value, line)?,
                "epochs" => hp.epochs = parse_value(key, value, line)?,
                "average_last" => hp.average_last = parse_value(key, value, line)?,
                "batch_size" => hp.batch_size = parse_value(key, value, line)?,
                "clip_norm" => hp.clip_norm = parse_value(key, value, line)?,
                "sinkhorn_max_iter" => hp.sinkhorn_max_iter = parse_value(key, value, line)?,
                "sinkhorn_tol" => hp.sinkhorn_tol = parse_value(key, value, line)?,
                _ => unreachable!("key list and match arms agree"),
            }
        }

        let seed = seed.ok_or_else(|| CliError::Config("missing required key: seed".into()))?;
        let mut cfg = Self {
            seed,
            corpus,
            encoder,
            hp,
            mode,
            corpus_dir: base.join(corpus_dir),
            out_dir: base.join(out_dir),
            ablate_seeds,
        };
        cfg.set_seed(seed);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Seeds corpus generation, model initialization and batch order.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.corpus.seed = seed;
        self.hp.seed = seed;
    }

    /// Encoder dimensions implied by the corpus settings.
    pub fn sync_encoder(&mut self) {
        self.encoder.feature_dim = self.corpus.feature_dim;
        self.encoder.vocab_size = self.corpus.vocab_chars + otkt::ctc::FIRST_CHAR_ID;
    }

    pub fn validate(&mut self) -> Result<(), CliError> {
        self.sync_encoder();
        let err = |e: &dyn std::fmt::Display| CliError::Config(e.to_string());
        self.corpus.validate().map_err(|e| err(&e))?;
        self.encoder.validate().map_err(|e| err(&e))?;
        self.hp.validate().map_err(|e| err(&e))?;
        if self.ablate_seeds == 0 {
            return Err(CliError::Config("ablate_seeds must be at least 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_keys_and_comments() {
        let cfg = RunConfig::parse(
            "# bench\nseed = 7\nmode = baseline  # trailing\n\nnoise_std=0.5\nepochs = 3\n",
            Path::new("/tmp/x"),
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.corpus.seed, 7);
        assert_eq!(cfg.hp.seed, 7);
        assert_eq!(cfg.mode, Mode::Baseline);
        assert_eq!(cfg.corpus.noise_std, 0.5);
        assert_eq!(cfg.hp.epochs, 3);
        assert_eq!(cfg.corpus_dir, Path::new("/tmp/x/corpus"));
        assert_eq!(cfg.encoder.vocab_size, cfg.corpus.vocab_chars + 3);
    }

    #[test]
    fn missing_seed_is_named() {
        let err = RunConfig::parse("epochs = 2\n", Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("seed"), "{err}");
    }

    #[test]
    fn rejects_unknown_and_duplicate_keys() {
        let err = RunConfig::parse("seed = 1\nlearning_rate = 3\n", Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("line 2: unknown key `learning_rate`"), "{err}");
        let err = RunConfig::parse("seed = 1\nseed = 2\n", Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
        let err = RunConfig::parse("seed = 1\nalpha = fast\n", Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn validates_values() {
        assert!(RunConfig::parse("seed = 1\nlambda = 2\n", Path::new(".")).is_err());
        assert!(RunConfig::parse("seed = 1\nconv_kernel = 4\n", Path::new(".")).is_err());
        assert!(RunConfig::parse("seed = 1\nmode = fancy\n", Path::new(".")).is_err());
    }
}

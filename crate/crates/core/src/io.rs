//! On-disk formats: named-array files, student checkpoints and corpus
//! directories.
//!
//! Array file layout (see `docs/formats.md`):
//!
//! ```text
//! otkt-arrays 1\n
//! <name> <rows> <cols>\n   <rows*cols little-endian f64>\n
//! ...                       (one record per array)
//! ```
//!
//! Header lines are plain ASCII so `strings`/`grep` show the inventory.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::autodiff::Array;
use crate::encoders::{EncoderConfig, EncoderError, Student};
use crate::synthdata::{Corpus, CorpusConfig, DataError, Split, Tokenizer, Utterance};

const MAGIC: &str = "otkt-arrays 1";
const META_CONFIG: &str = "meta.encoder";
const META_USE_ADAPTER: &str = "meta.use_adapter";

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Malformed { path: PathBuf, msg: String },
    #[error("{path}: array {name} has shape {got:?}, expected {expected:?}")]
    ShapeMismatch {
        path: PathBuf,
        name: String,
        got: (usize, usize),
        expected: (usize, usize),
    },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T> = std::result::Result<T, FormatError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FormatError + '_ {
    move |source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn malformed(path: &Path, msg: impl Into<String>) -> FormatError {
    FormatError::Malformed {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

pub fn write_arrays<'a>(path: &Path, arrays: impl IntoIterator<Item = (&'a str, &'a Array)>) -> Result<()> {
    let mut buf = Vec::new();
    writeln!(buf, "{MAGIC}").expect("vec write");
    for (name, array) in arrays {
        assert!(
            !name.is_empty() && !name.contains(char::is_whitespace),
            "array names must be non-empty without whitespace: {name:?}"
        );
        let (rows, cols) = array.dim();
        writeln!(buf, "{name} {rows} {cols}").expect("vec write");
        for v in array.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.push(b'\n');
    }
    fs::write(path, buf).map_err(io_err(path))
}

pub fn read_arrays(path: &Path) -> Result<Vec<(String, Array)>> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut reader = BufReader::new(file);
    let mut line = String::new();
    reader.read_line(&mut line).map_err(io_err(path))?;
    if line.trim_end() != MAGIC {
        return Err(malformed(path, "missing array file header"));
    }
    let mut out = Vec::new();
    loop {
        line.clear();
        if reader.read_line(&mut line).map_err(io_err(path))? == 0 {
            break;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [name, rows, cols] = fields[..] else {
            return Err(malformed(path, format!("bad record header {:?}", line.trim_end())));
        };
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| malformed(path, format!("bad dimension {s:?} for {name}")))
        };
        let (rows, cols) = (parse(rows)?, parse(cols)?);
        let mut bytes = vec![0u8; rows * cols * 8 + 1];
        reader
            .read_exact(&mut bytes)
            .map_err(|_| malformed(path, format!("truncated data for {name}")))?;
        if bytes.pop() != Some(b'\n') {
            return Err(malformed(path, format!("missing record terminator after {name}")));
        }
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let array = Array::from_shape_vec((rows, cols), values).expect("length matches shape");
        out.push((name.to_string(), array));
    }
    Ok(out)
}

/// A student plus whether inference routes through the adapter.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub student: Student,
    pub use_adapter: bool,
}

fn encode_config(cfg: &EncoderConfig) -> Array {
    let fields = [
        cfg.feature_dim as f64,
        cfg.num_blocks as f64,
        cfg.model_dim as f64,
        cfg.ffn_dim as f64,
        cfg.conv_kernel as f64,
        cfg.teacher_dim as f64,
        cfg.teacher_layers as f64,
        cfg.vocab_size as f64,
        cfg.adapter_scale,
    ];
    Array::from_shape_vec((1, fields.len()), fields.to_vec()).expect("row vector")
}

fn decode_config(path: &Path, a: &Array) -> Result<EncoderConfig> {
    if a.dim() != (1, 9) {
        return Err(malformed(path, format!("{META_CONFIG} has shape {:?}", a.dim())));
    }
    let v: Vec<f64> = a.iter().copied().collect();
    let count = |x: f64| {
        if x >= 0.0 && x.fract() == 0.0 {
            Ok(x as usize)
        } else {
            Err(malformed(path, format!("{META_CONFIG} holds non-count {x}")))
        }
    };
    Ok(EncoderConfig {
        feature_dim: count(v[0])?,
        num_blocks: count(v[1])?,
        model_dim: count(v[2])?,
        ffn_dim: count(v[3])?,
        conv_kernel: count(v[4])?,
        teacher_dim: count(v[5])?,
        teacher_layers: count(v[6])?,
        vocab_size: count(v[7])?,
        adapter_scale: v[8],
    })
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    let config = encode_config(&checkpoint.student.config);
    let flag = Array::from_elem((1, 1), f64::from(u8::from(checkpoint.use_adapter)));
    let meta = [(META_CONFIG, &config), (META_USE_ADAPTER, &flag)];
    write_arrays(path, meta.into_iter().chain(checkpoint.student.params.iter()))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let arrays = read_arrays(path)?;
    let find = |name: &str| {
        arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, a)| a)
            .ok_or_else(|| malformed(path, format!("missing array {name}")))
    };
    let config = decode_config(path, find(META_CONFIG)?)?;
    let use_adapter = find(META_USE_ADAPTER)?[[0, 0]] != 0.0;
    let mut student = Student::new(&config, 0)?;
    let names = student.params.names().to_vec();
    for (name, slot) in names.iter().zip(student.params.values_mut()) {
        let stored = find(name)?;
        if stored.dim() != slot.dim() {
            return Err(FormatError::ShapeMismatch {
                path: path.to_path_buf(),
                name: name.clone(),
                got: stored.dim(),
                expected: slot.dim(),
            });
        }
        slot.assign(stored);
    }
    let expected = names.len() + 2;
    if arrays.len() != expected {
        return Err(malformed(
            path,
            format!("{} arrays, expected {expected}", arrays.len()),
        ));
    }
    Ok(Checkpoint {
        student,
        use_adapter,
    })
}

pub const MANIFEST: &str = "manifest.tsv";
pub const CORPUS_META: &str = "corpus.conf";

fn corpus_meta(cfg: &CorpusConfig) -> String {
    format!(
        "vocab_chars = {}\nfeature_dim = {}\n",
        cfg.vocab_chars, cfg.feature_dim
    )
}

/// Writes `dir/{train,dev,test}/` with a manifest and one array file per
/// utterance, plus `dir/corpus.conf` describing the tokenizer.
pub fn write_corpus(dir: &Path, cfg: &CorpusConfig, corpus: &Corpus) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let meta = dir.join(CORPUS_META);
    fs::write(&meta, corpus_meta(cfg)).map_err(io_err(&meta))?;
    for split in Split::ALL {
        let sub = dir.join(split.name());
        fs::create_dir_all(&sub).map_err(io_err(&sub))?;
        let mut manifest = String::new();
        for utt in corpus.split(split) {
            manifest.push_str(&format!("{}\t{}\n", utt.id, utt.text));
            write_arrays(&sub.join(format!("{}.arr", utt.id)), [("features", &utt.features)])?;
        }
        let path = sub.join(MANIFEST);
        fs::write(&path, manifest).map_err(io_err(&path))?;
    }
    Ok(())
}

pub fn read_tokenizer(dir: &Path) -> Result<Tokenizer> {
    let path = dir.join(CORPUS_META);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let chars = text
        .lines()
        .filter_map(|l| l.split_once('='))
        .find(|(k, _)| k.trim() == "vocab_chars")
        .and_then(|(_, v)| v.trim().parse().ok())
        .ok_or_else(|| malformed(&path, "missing vocab_chars"))?;
    Ok(Tokenizer::new(chars)?)
}

pub fn read_split(dir: &Path, split: Split) -> Result<Vec<Utterance>> {
    let tokenizer = read_tokenizer(dir)?;
    let sub = dir.join(split.name());
    let path = sub.join(MANIFEST);
    let manifest = fs::read_to_string(&path).map_err(io_err(&path))?;
    manifest
        .lines()
        .enumerate()
        .map(|(n, line)| {
            let (id, text) = line
                .split_once('\t')
                .ok_or_else(|| malformed(&path, format!("line {}: expected id<TAB>text", n + 1)))?;
            let arr_path = sub.join(format!("{id}.arr"));
            let features = read_arrays(&arr_path)?
                .into_iter()
                .find(|(name, _)| name == "features")
                .map(|(_, a)| a)
                .ok_or_else(|| malformed(&arr_path, "missing features array"))?;
            Ok(Utterance {
                id: id.to_string(),
                tokens: tokenizer.tokenize(text)?,
                text: text.to_string(),
                features,
            })
        })
        .collect()
}

pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    Ok(Corpus {
        train: read_split(dir, Split::Train)?,
        dev: read_split(dir, Split::Dev)?,
        test: read_split(dir, Split::Test)?,
    })
}

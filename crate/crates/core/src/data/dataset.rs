use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::kv::KvMap;

use super::tokenize::tokenize;
use super::vocab::{Vocabulary, PAD_ID};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split `{s}` (train, val, test)"))),
        }
    }
}

/// A tokenized example before vocabulary lookup.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawExample {
    pub label: usize,
    pub tokens: Vec<String>,
}

/// Reads `label<TAB>text` lines. Blank lines are skipped.
pub fn read_tsv(path: &Path) -> Result<Vec<RawExample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fmt = |msg: String| Error::Format {
            path: path.to_path_buf(),
            line: n + 1,
            msg,
        };
        let (label, body) = line
            .split_once('\t')
            .ok_or_else(|| fmt("expected `label<TAB>text`".into()))?;
        let label = label
            .trim()
            .parse::<usize>()
            .map_err(|_| fmt(format!("label `{label}` is not a non-negative integer")))?;
        out.push(RawExample {
            label,
            tokens: tokenize(body),
        });
    }
    Ok(out)
}

/// Split file locations, read from `train = …`, `val = …`, `test = …` lines.
/// Relative paths resolve against the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub train: PathBuf,
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub num_classes: Option<usize>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let kv = KvMap::parse(&text, path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |key: &str| kv.get(key).map(|p| base.join(p));
        for key in kv.keys() {
            if !["train", "val", "test", "classes"].contains(&key) {
                return Err(Error::Config(format!(
                    "{}: unknown manifest key `{key}`",
                    path.display()
                )));
            }
        }
        Ok(Self {
            train: resolve("train").ok_or_else(|| Error::Config(format!("{}: missing `train`", path.display())))?,
            val: resolve("val"),
            test: resolve("test"),
            num_classes: kv.parse_value("classes")?,
        })
    }
}

/// Tokenized train/val/test splits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub train: Vec<RawExample>,
    pub val: Vec<RawExample>,
    pub test: Vec<RawExample>,
    pub num_classes: usize,
}

impl Corpus {
    /// Loads every split in the manifest. Without a validation file, every
    /// tenth training example (indices 9, 19, …) is held out for validation.
    pub fn load(manifest: &Path) -> Result<Self> {
        let m = Manifest::read(manifest)?;
        let mut train = read_tsv(&m.train)?;
        let val = match &m.val {
            Some(p) => read_tsv(p)?,
            None => {
                let mut kept = Vec::with_capacity(train.len());
                let mut held = Vec::new();
                for (i, ex) in train.into_iter().enumerate() {
                    if i % 10 == 9 {
                        held.push(ex);
                    } else {
                        kept.push(ex);
                    }
                }
                train = kept;
                held
            }
        };
        let test = match &m.test {
            Some(p) => read_tsv(p)?,
            None => Vec::new(),
        };
        Self::from_splits(train, val, test, m.num_classes)
    }

    pub fn from_splits(
        train: Vec<RawExample>,
        val: Vec<RawExample>,
        test: Vec<RawExample>,
        num_classes: Option<usize>,
    ) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Config("training split is empty".into()));
        }
        let max_label = train
            .iter()
            .chain(&val)
            .chain(&test)
            .map(|e| e.label)
            .max()
            .unwrap_or(0);
        let k = num_classes.unwrap_or(max_label + 1);
        if max_label >= k {
            return Err(Error::Config(format!(
                "label {max_label} is not below the class count {k}"
            )));
        }
        Ok(Self {
            train,
            val,
            test,
            num_classes: k,
        })
    }

    /// Vocabulary over the training and validation tokens.
    pub fn build_vocab(&self) -> Vocabulary {
        Vocabulary::build(self.train.iter().chain(&self.val).map(|e| e.tokens.as_slice()))
    }

    pub fn split(&self, split: Split) -> &[RawExample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// 95th-percentile token count of `examples` (at least 1).
pub fn percentile_length(examples: &[RawExample]) -> usize {
    let mut lens: Vec<usize> = examples.iter().map(|e| e.tokens.len()).collect();
    if lens.is_empty() {
        return 1;
    }
    lens.sort_unstable();
    let rank = (0.95 * lens.len() as f64).ceil() as usize;
    lens[rank.clamp(1, lens.len()) - 1].max(1)
}

/// Left-pads with the pad id, or keeps the last `len` ids.
pub fn pad_sequence(ids: &[usize], len: usize) -> Vec<usize> {
    if ids.len() >= len {
        ids[ids.len() - len..].to_vec()
    } else {
        let mut out = vec![PAD_ID; len - ids.len()];
        out.extend_from_slice(ids);
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub label: usize,
    /// Exactly `max_len` ids.
    pub ids: Vec<usize>,
}

/// Encoded, fixed-length examples of one split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub split: Split,
    pub max_len: usize,
    pub num_classes: usize,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn encode(
        raw: &[RawExample],
        vocab: &Vocabulary,
        max_len: usize,
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        if max_len == 0 {
            return Err(Error::Config("max_len must be positive".into()));
        }
        let examples = raw
            .iter()
            .map(|ex| {
                if ex.label >= num_classes {
                    return Err(Error::Index(format!("label {} with {num_classes} classes", ex.label)));
                }
                Ok(Example {
                    label: ex.label,
                    ids: pad_sequence(&vocab.encode(&ex.tokens), max_len),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            split,
            max_len,
            num_classes,
            examples,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Row-major `rows × max_len` ids with one label per row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub rows: usize,
    pub max_len: usize,
    pub ids: Vec<usize>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn row(&self, r: usize) -> &[usize] {
        &self.ids[r * self.max_len..(r + 1) * self.max_len]
    }
}

/// Pads or truncates every sequence to `max_len` and groups them into
/// batches of `batch_size` in input order; the last batch holds the remainder.
pub fn pad_batch(examples: &[(Vec<usize>, usize)], max_len: usize, batch_size: usize) -> Result<Vec<Batch>> {
    if batch_size == 0 || max_len == 0 {
        return Err(Error::Config("batch size and max_len must be positive".into()));
    }
    Ok(examples
        .chunks(batch_size)
        .map(|chunk| Batch {
            rows: chunk.len(),
            max_len,
            ids: chunk.iter().flat_map(|(ids, _)| pad_sequence(ids, max_len)).collect(),
            labels: chunk.iter().map(|&(_, y)| y).collect(),
        })
        .collect())
}

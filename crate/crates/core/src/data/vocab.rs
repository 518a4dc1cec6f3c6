use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Token ↔ index map with `<pad>` at 0 and `<unk>` at 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    /// Only the reserved entries.
    pub fn new() -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        v.insert(PAD_TOKEN);
        v.insert(UNK_TOKEN);
        v
    }

    /// Indexes every distinct token in order of first occurrence.
    pub fn build<'a, I, S>(corpus: I) -> Self
    where
        I: IntoIterator<Item = &'a [S]>,
        S: AsRef<str> + 'a,
    {
        let mut v = Self::new();
        for doc in corpus {
            for tok in doc {
                v.insert(tok.as_ref());
            }
        }
        v
    }

    /// Rebuilds from an index-ordered token list (as stored in checkpoints).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(PAD_TOKEN) || tokens.get(1).map(String::as_str) != Some(UNK_TOKEN)
        {
            return Err(Error::Format {
                path: "<vocabulary>".into(),
                line: 1,
                msg: "reserved tokens missing".into(),
            });
        }
        let mut v = Self {
            tokens: Vec::with_capacity(tokens.len()),
            index: HashMap::with_capacity(tokens.len()),
        };
        for (i, t) in tokens.iter().enumerate() {
            if v.insert(t) != i {
                return Err(Error::Format {
                    path: "<vocabulary>".into(),
                    line: i + 1,
                    msg: format!("duplicate token `{t}`"),
                });
            }
        }
        Ok(v)
    }

    fn insert(&mut self, tok: &str) -> usize {
        if let Some(&id) = self.index.get(tok) {
            return id;
        }
        let id = self.tokens.len();
        self.tokens.push(tok.to_string());
        self.index.insert(tok.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Maps tokens to ids, unknown tokens to `<unk>`.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref()).unwrap_or(UNK_ID)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(lines: &[&str]) -> Vec<Vec<String>> {
        lines.iter().map(|l| l.split(' ').map(String::from).collect()).collect()
    }

    #[test]
    fn first_occurrence_order() {
        let c = corpus(&["a b", "b c"]);
        let v = Vocabulary::build(c.iter().map(Vec::as_slice));
        let want = ["<pad>", "<unk>", "a", "b", "c"];
        assert_eq!(v.tokens(), &want.map(String::from));
        assert_eq!(v.id("c"), Some(4));
        assert_eq!(v.encode(&["b", "zzz"]), vec![3, UNK_ID]);
    }

    #[test]
    fn deterministic_and_total() {
        let c = corpus(&["x y z", "z y q", "x"]);
        let a = Vocabulary::build(c.iter().map(Vec::as_slice));
        let b = Vocabulary::build(c.iter().map(Vec::as_slice));
        assert_eq!(a, b);
        for (i, t) in a.tokens().iter().enumerate() {
            assert_eq!(a.id(t), Some(i));
        }
        assert_eq!(Vocabulary::from_tokens(a.tokens().to_vec()).unwrap(), a);
        assert!(Vocabulary::from_tokens(vec!["x".into()]).is_err());
    }
}

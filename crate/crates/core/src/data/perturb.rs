use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::tokenize::tokenize;

/// Hand-written word-order variants keyed by the tokenized original.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RewriteTable {
    map: HashMap<String, Vec<String>>,
    order: Vec<String>,
}

impl RewriteTable {
    /// Reads `original<TAB>variant` lines; both sides are tokenized.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut table = Self::default();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (orig, variant) = line.split_once('\t').ok_or_else(|| Error::Format {
                path: origin.to_path_buf(),
                line: n + 1,
                msg: "expected `original<TAB>variant`".into(),
            })?;
            let key = tokenize(orig).join(" ");
            if !table.map.contains_key(&key) {
                table.order.push(key.clone());
            }
            table.map.insert(key, tokenize(variant));
        }
        Ok(table)
    }

    pub fn get(&self, tokens: &[String]) -> Option<&[String]> {
        self.map.get(&tokens.join(" ")).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Originals in file order.
    pub fn originals(&self) -> impl Iterator<Item = &str> {
        self.order.iter().map(String::as_str)
    }
}

#[derive(Clone, Copy, Debug)]
pub enum ShuffleMode<'a> {
    /// Uniform random permutation.
    Full,
    /// Replays the variant recorded for the sentence.
    Rewrite(&'a RewriteTable),
}

pub fn shuffle_word_order(tokens: &[String], mode: ShuffleMode<'_>, seed: u64) -> Result<Vec<String>> {
    if tokens.is_empty() {
        return Err(Error::Contract("cannot reorder an empty sentence".into()));
    }
    match mode {
        ShuffleMode::Full => {
            let mut out = tokens.to_vec();
            out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            Ok(out)
        }
        ShuffleMode::Rewrite(table) => table
            .get(tokens)
            .map(<[String]>::to_vec)
            .ok_or_else(|| Error::Lookup(format!("no rewrite for `{}`", tokens.join(" ")))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn single_token_and_determinism() {
        assert_eq!(
            shuffle_word_order(&toks("hello"), ShuffleMode::Full, 9).unwrap(),
            toks("hello")
        );
        let s = toks("a b c d e f g h");
        let a = shuffle_word_order(&s, ShuffleMode::Full, 4).unwrap();
        assert_eq!(a, shuffle_word_order(&s, ShuffleMode::Full, 4).unwrap());
        assert!(shuffle_word_order(&[], ShuffleMode::Full, 0).is_err());
    }

    #[test]
    fn rewrite_replay() {
        let t = RewriteTable::parse(
            "What is Shakespeare's nickname?\twhat is the nickname of shakespeare ?\n",
            Path::new("mem"),
        )
        .unwrap();
        let out = shuffle_word_order(&toks("what is shakespeare 's nickname ?"), ShuffleMode::Rewrite(&t), 0).unwrap();
        assert_eq!(out, toks("what is the nickname of shakespeare ?"));
        let miss = shuffle_word_order(&toks("who"), ShuffleMode::Rewrite(&t), 0);
        assert!(matches!(miss, Err(Error::Lookup(_))));
    }

    proptest! {
        #[test]
        fn full_shuffle_is_permutation(words in proptest::collection::vec("[a-d]{1,3}", 1..20), seed: u64) {
            let mut out = shuffle_word_order(&words, ShuffleMode::Full, seed).unwrap();
            let mut inp = words.clone();
            out.sort();
            inp.sort();
            prop_assert_eq!(out, inp);
        }
    }
}

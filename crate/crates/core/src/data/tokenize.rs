/// Lowercases and splits text into word and punctuation tokens.
///
/// Words are runs of alphanumerics; `'` and `-` stay inside a word when
/// followed by an alphanumeric, and `.`/`,` stay between digits (`3.5`).
/// A trailing possessive `'s` becomes its own token. Every other
/// non-alphanumeric character is a single-character token.
pub fn tokenize(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let mut out = Vec::new();
    for chunk in lower.split_whitespace() {
        split_chunk(chunk, &mut out);
    }
    out
}

fn split_chunk(chunk: &str, out: &mut Vec<String>) {
    let chars: Vec<char> = chunk.chars().collect();
    let mut word = String::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let next = chars.get(i + 1).copied();
        let next_alnum = next.is_some_and(char::is_alphanumeric);
        let joiner = (c == '\'' || c == '-') && !word.is_empty() && next_alnum;
        let numeric = (c == '.' || c == ',')
            && word.chars().last().is_some_and(|p| p.is_ascii_digit())
            && next.is_some_and(|n| n.is_ascii_digit());
        if c.is_alphanumeric() || joiner || numeric {
            word.push(c);
        } else {
            flush(&mut word, out);
            if c == '\'' && next == Some('s') && !chars.get(i + 2).is_some_and(|n| n.is_alphanumeric()) {
                out.push("'s".to_string());
                i += 2;
                continue;
            }
            out.push(c.to_string());
        }
        i += 1;
    }
    flush(&mut word, out);
}

fn flush(word: &mut String, out: &mut Vec<String>) {
    if word.is_empty() {
        return;
    }
    match word.strip_suffix("'s") {
        Some(stem) if !stem.is_empty() => {
            out.push(stem.to_string());
            out.push("'s".to_string());
        }
        _ => out.push(word.clone()),
    }
    word.clear();
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn examples() {
        assert_eq!(toks("What is X?"), vec!["what", "is", "x", "?"]);
        assert!(toks("").is_empty());
        assert_eq!(toks("shakespeare's"), vec!["shakespeare", "'s"]);
        assert_eq!(
            toks("what is shakespeare 's nickname"),
            vec!["what", "is", "shakespeare", "'s", "nickname"]
        );
    }

    #[test]
    fn keeps_contractions_and_numbers() {
        assert_eq!(
            toks("Don't o'neill e-mail 3.5 1,000"),
            vec!["don't", "o'neill", "e-mail", "3.5", "1,000"]
        );
        assert_eq!(toks("end. (yes)"), vec!["end", ".", "(", "yes", ")"]);
        assert_eq!(toks("'quoted'"), vec!["'", "quoted", "'"]);
    }

    proptest! {
        #[test]
        fn retokenizing_joined_tokens_is_stable(s in "[a-zA-Z0-9 '.,?!()-]{0,40}") {
            let once = tokenize(&s);
            let twice = tokenize(&once.join(" "));
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn stable_on_arbitrary_unicode(s in "\\PC{0,30}") {
            let once = tokenize(&s);
            prop_assert_eq!(tokenize(&once.join(" ")), once);
        }
    }
}

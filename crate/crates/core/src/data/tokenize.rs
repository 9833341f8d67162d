//! Whole-word tokenizer.
//!
//! Lowercases, splits on whitespace and strips punctuation from the edges of
//! each word. Word-internal hyphens and apostrophes survive (`snow-covered`,
//! `don't`). Bracket characters are removed everywhere, so the `[CLS]` and
//! `[SEP]` prompt markers can never be produced as caption tokens.

use serde::{Deserialize, Serialize};

use super::DataError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Punctuation {
    /// Edge punctuation is discarded.
    #[default]
    Drop,
    /// Each edge punctuation character becomes its own token.
    Separate,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    #[serde(default)]
    pub punctuation: Punctuation,
}

fn is_bracket(c: char) -> bool {
    matches!(c, '[' | ']' | '(' | ')' | '{' | '}' | '<' | '>')
}

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '\u{2018}'..='\u{201F}' | '\u{2013}' | '\u{2014}' | '\u{2026}' | '«' | '»' | '¡' | '¿'
        )
}

impl Tokenizer {
    pub fn new(punctuation: Punctuation) -> Self {
        Self { punctuation }
    }

    /// Tokenizes `raw`. An input with no word left is an [`DataError::EmptyCaption`].
    pub fn tokenize(&self, raw: &str) -> Result<Vec<String>, DataError> {
        let mut out = Vec::new();
        for piece in raw.split_whitespace() {
            let word: String = piece
                .chars()
                .filter(|&c| !is_bracket(c))
                .flat_map(char::to_lowercase)
                .collect();
            if word.is_empty() {
                continue;
            }
            let start = word.find(|c: char| !is_punct(c));
            let Some(start) = start else {
                if self.punctuation == Punctuation::Separate {
                    out.extend(word.chars().map(String::from));
                }
                continue;
            };
            let end = word
                .char_indices()
                .rev()
                .find(|&(_, c)| !is_punct(c))
                .map(|(i, c)| i + c.len_utf8())
                .unwrap_or(word.len());
            if self.punctuation == Punctuation::Separate {
                out.extend(word[..start].chars().map(String::from));
                out.push(word[start..end].to_string());
                out.extend(word[end..].chars().map(String::from));
            } else {
                out.push(word[start..end].to_string());
            }
        }
        if out.is_empty() {
            Err(DataError::EmptyCaption)
        } else {
            Ok(out)
        }
    }
}

/// Tokenizes with the default configuration (punctuation dropped).
pub fn tokenize(raw: &str) -> Result<Vec<String>, DataError> {
    Tokenizer::default().tokenize(raw)
}

pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(t.as_ref());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn lowercases_and_strips_terminal_punctuation() {
        assert_eq!(
            tokenize("Two men raise their arms.").unwrap(),
            vec!["two", "men", "raise", "their", "arms"]
        );
    }

    #[test]
    fn empty_is_rejected() {
        assert_eq!(tokenize(""), Err(DataError::EmptyCaption));
        assert_eq!(tokenize("  ... !! "), Err(DataError::EmptyCaption));
    }

    #[test]
    fn counts_words_of_the_pos_example() {
        let t = tokenize("a pretty woman smiling on her favorite street").unwrap();
        assert_eq!(t.len(), 8);
    }

    #[test]
    fn keeps_internal_hyphens_and_drops_brackets() {
        assert_eq!(
            tokenize("Kids over the snow-covered ground").unwrap(),
            vec!["kids", "over", "the", "snow-covered", "ground"]
        );
        assert_eq!(tokenize("[CLS] fun [SEP]").unwrap(), vec!["cls", "fun", "sep"]);
        assert_eq!(tokenize("\"Don't!\"").unwrap(), vec!["don't"]);
    }

    #[test]
    fn separate_mode_emits_punctuation_tokens() {
        let tok = Tokenizer::new(Punctuation::Separate);
        assert_eq!(tok.tokenize("Hi, there!").unwrap(), vec!["hi", ",", "there", "!"]);
        assert_eq!(tok.tokenize("-- wow").unwrap(), vec!["-", "-", "wow"]);
    }

    #[test]
    fn non_ascii_words() {
        assert_eq!(tokenize("Café CRÈME.").unwrap(), vec!["café", "crème"]);
    }

    proptest! {
        #[test]
        fn idempotent_on_detokenized_output(raw in "[A-Za-z .,!?'\\-()é]{0,60}", sep in any::<bool>()) {
            let tok = Tokenizer::new(if sep { Punctuation::Separate } else { Punctuation::Drop });
            if let Ok(tokens) = tok.tokenize(&raw) {
                let again = tok.tokenize(&detokenize(&tokens)).unwrap();
                prop_assert_eq!(again, tokens);
            }
        }
    }
}

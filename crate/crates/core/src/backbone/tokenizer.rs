//! Word-level tokenizer with place-aware digit tokens.
//!
//! A numeric literal such as `-0.45` becomes a sign token followed by one
//! token per digit that carries the digit, its sign and its decimal place:
//! `<neg> -0e0 -4e-1 -5e-2`. Places outside `[-2, 2]` map to `<unk>`.

use std::collections::HashMap;

use crate::error::{Error, Result};

use super::serialize::Template;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const MAX_TOKENS: usize = 64;

const PAD_TOKEN: &str = "<pad>";
const UNK_TOKEN: &str = "<unk>";
const POS_TOKEN: &str = "<pos>";
const NEG_TOKEN: &str = "<neg>";
const MIN_PLACE: i32 = -2;
const MAX_PLACE: i32 = 2;

/// Extra words used by instruction prefixes.
const INSTRUCTION_WORDS: [&str; 10] = [
    "go", "to", "the", "cell", "at", "red", "green", "blue", "yellow", "row",
];

fn digit_token(negative: bool, digit: u32, place: i32) -> String {
    format!("{}{digit}e{place}", if negative { '-' } else { '+' })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// The fixed vocabulary covering every template, instruction and number token.
    pub fn standard() -> Self {
        let mut tokens: Vec<String> = [PAD_TOKEN, UNK_TOKEN, POS_TOKEN, NEG_TOKEN]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for negative in [false, true] {
            for place in (MIN_PLACE..=MAX_PLACE).rev() {
                for digit in 0..10 {
                    tokens.push(digit_token(negative, digit, place));
                }
            }
        }
        let mut words: Vec<&str> = Template::words();
        words.extend(INSTRUCTION_WORDS);
        for w in words {
            if !tokens.iter().any(|t| t == w) {
                tokens.push(w.to_string());
            }
        }
        Self::from_tokens(tokens).expect("standard vocabulary is valid")
    }

    /// Rebuilds a vocabulary from its token list, e.g. when loading a checkpoint.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2
            || tokens[PAD as usize] != PAD_TOKEN
            || tokens[UNK as usize] != UNK_TOKEN
        {
            return Err(Error::Format(
                "vocabulary must start with <pad>, <unk>".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Format(format!("bad vocabulary token {t:?}")));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    fn push_number(&self, word: &str, out: &mut Vec<u32>) -> bool {
        let (negative, body) = match word.as_bytes().first() {
            Some(b'-') => (true, &word[1..]),
            Some(b'+') => (false, &word[1..]),
            _ => (false, word),
        };
        let (int, frac) = match body.split_once('.') {
            Some((i, f)) => (i, f),
            None => (body, ""),
        };
        let all_digits = |s: &str| s.bytes().all(|b| b.is_ascii_digit());
        if int.is_empty()
            || !all_digits(int)
            || !all_digits(frac)
            || (body.contains('.') && frac.is_empty())
        {
            return false;
        }
        out.push(self.id(if negative { NEG_TOKEN } else { POS_TOKEN }));
        let places = (0..int.len())
            .rev()
            .map(|p| p as i32)
            .chain((1..=frac.len()).map(|p| -(p as i32)));
        for (ch, place) in int.chars().chain(frac.chars()).zip(places) {
            let digit = ch.to_digit(10).expect("checked ascii digit");
            out.push(if (MIN_PLACE..=MAX_PLACE).contains(&place) {
                self.id(&digit_token(negative, digit, place))
            } else {
                UNK
            });
        }
        true
    }
}

/// Splits on whitespace, expands numbers and truncates to [`MAX_TOKENS`].
pub fn tokenize(vocab: &Vocabulary, text: &str) -> Vec<u32> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        if !vocab.push_number(word, &mut out) {
            out.push(vocab.id(word));
        }
        if out.len() >= MAX_TOKENS {
            break;
        }
    }
    out.truncate(MAX_TOKENS);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::serialize::serialize_state;
    use crate::envs::EnvId;
    use crate::rng::RngStream;

    fn names(v: &Vocabulary, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .map(|&i| v.token(i).unwrap().to_string())
            .collect()
    }

    #[test]
    fn empty_text() {
        assert!(tokenize(&Vocabulary::standard(), "").is_empty());
        assert!(tokenize(&Vocabulary::standard(), "   ").is_empty());
    }

    #[test]
    fn numbers_expand_to_place_tokens() {
        let v = Vocabulary::standard();
        assert_eq!(
            names(&v, &tokenize(&v, "-0.45")),
            ["<neg>", "-0e0", "-4e-1", "-5e-2"]
        );
        assert_eq!(
            names(&v, &tokenize(&v, "12.30")),
            ["<pos>", "+1e1", "+2e0", "+3e-1", "+0e-2"]
        );
        assert_eq!(names(&v, &tokenize(&v, "row 3")), ["row", "<pos>", "+3e0"]);
        assert_eq!(
            names(&v, &tokenize(&v, "1234.5")),
            ["<pos>", "<unk>", "+2e2", "+3e1", "+4e0", "+5e-1"]
        );
        assert_eq!(names(&v, &tokenize(&v, "1. zebra")), ["<unk>", "<unk>"]);
    }

    #[test]
    fn repeated_literals_tokenize_identically() {
        let v = Vocabulary::standard();
        let ids = tokenize(&v, "0.00 velocity 0.00");
        assert_eq!(ids[..4], ids[5..]);
    }

    #[test]
    fn cartpole_state_lengths() {
        let v = Vocabulary::standard();
        let mut rng = RngStream::new(0, 0);
        for _ in 0..200 {
            let obs: Vec<f64> = (0..4).map(|_| rng.uniform_range(-3.0, 3.0)).collect();
            let text = serialize_state(Template::Env(EnvId::CartPole), &obs, None).unwrap();
            let n = tokenize(&v, &text).len();
            assert!((15..=40).contains(&n), "{n} tokens for {text}");
            assert!(!tokenize(&v, &text).contains(&UNK));
        }
    }

    #[test]
    fn seventeen_dim_generic_state_reaches_the_cap() {
        let v = Vocabulary::standard();
        let text = serialize_state(Template::Generic(17), &[0.25; 17], None).unwrap();
        let ids = tokenize(&v, &text);
        assert_eq!(ids.len(), MAX_TOKENS);
        assert!(!ids.contains(&UNK));
        let few = serialize_state(Template::Generic(9), &[0.25; 9], None).unwrap();
        assert_eq!(tokenize(&v, &few).len(), 1 + 9 * 4);
    }

    #[test]
    fn template_words_are_known() {
        let v = Vocabulary::standard();
        for id in EnvId::ALL {
            let text = serialize_state(
                Template::Env(id),
                &vec![0.5; id.obs_dim()],
                Some("go to the blue cell at row 1 column 2"),
            )
            .unwrap();
            assert!(!tokenize(&v, &text).contains(&UNK), "{text}");
        }
    }

    #[test]
    fn output_is_capped() {
        let v = Vocabulary::standard();
        let text = "velocity ".repeat(100);
        assert_eq!(tokenize(&v, &text).len(), MAX_TOKENS);
    }

    #[test]
    fn vocabulary_round_trips_and_validates() {
        let v = Vocabulary::standard();
        assert_eq!(Vocabulary::from_tokens(v.tokens().to_vec()).unwrap(), v);
        let mut dup = v.tokens().to_vec();
        dup.push("velocity".into());
        assert!(Vocabulary::from_tokens(dup).is_err());
        assert!(Vocabulary::from_tokens(vec!["a".into(), "b".into()]).is_err());
        for (i, t) in v.tokens().iter().enumerate() {
            assert_eq!(v.id(t), i as u32);
        }
    }
}

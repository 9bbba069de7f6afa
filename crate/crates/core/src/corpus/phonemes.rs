use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const SIL: &str = "SIL";
pub const WORD_SEP: char = '|';

const ARPABET_VOWELS: [&str; 15] = ["AA", "AE", "AH", "AO", "AW", "AY", "EH", "ER", "EY", "IH", "IY", "OW", "OY", "UH", "UW"];
const ARPABET_CONSONANTS: [&str; 24] = [
    "B", "CH", "D", "DH", "F", "G", "HH", "JH", "K", "L", "M", "N", "NG", "P", "R", "S", "SH", "T", "TH", "V", "W", "Y", "Z", "ZH",
];

/// Ordered phoneme inventory. Index 0 is padding and index 1 is the silence word.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PhonemeVocab {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
}

impl PhonemeVocab {
    /// Builds a vocabulary from extra symbols; `<pad>` and `SIL` are always first.
    pub fn new<S: AsRef<str>>(symbols: impl IntoIterator<Item = S>) -> Result<Self> {
        let mut all = vec![PAD.to_string(), SIL.to_string()];
        for s in symbols {
            let s = s.as_ref();
            if s == PAD || s == SIL {
                continue;
            }
            if s.is_empty() || s.contains(char::is_whitespace) || s.contains(WORD_SEP) {
                return Err(Error::Parse(format!("invalid phoneme symbol {s:?}")));
            }
            all.push(s.to_string());
        }
        let mut index = HashMap::new();
        for (i, s) in all.iter().enumerate() {
            if index.insert(s.clone(), i).is_some() {
                return Err(Error::Parse(format!("duplicate phoneme symbol {s:?}")));
            }
        }
        Ok(Self { symbols: all, index })
    }

    /// CMUdict ARPAbet: stressed vowels (0/1/2) and consonants.
    pub fn arpabet() -> Self {
        let mut syms = Vec::new();
        for v in ARPABET_VOWELS {
            for s in 0..3 {
                syms.push(format!("{v}{s}"));
            }
        }
        syms.extend(ARPABET_CONSONANTS.iter().map(|c| c.to_string()));
        Self::new(syms).expect("ARPAbet symbols are valid")
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn get(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    pub fn symbol(&self, index: usize) -> Option<&str> {
        self.symbols.get(index).map(String::as_str)
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn sil(&self) -> usize {
        1
    }

    /// Space-separated symbol list (the `# vocab:` manifest header form).
    pub fn to_line(&self) -> String {
        self.symbols.join(" ")
    }

    pub fn from_line(line: &str) -> Result<Self> {
        Self::new(line.split_whitespace())
    }
}

/// Phoneme tokens with the index of the word each belongs to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PhonemeSequence {
    pub tokens: Vec<usize>,
    pub word_ids: Vec<usize>,
    pub word_count: usize,
}

impl PhonemeSequence {
    /// Validates the labelling invariants.
    pub fn new(tokens: Vec<usize>, word_ids: Vec<usize>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Parse("empty phoneme sequence".into()));
        }
        if tokens.len() != word_ids.len() {
            return Err(Error::Parse(format!("{} tokens but {} word ids", tokens.len(), word_ids.len())));
        }
        if word_ids[0] != 0 {
            return Err(Error::Parse("word ids must start at 0".into()));
        }
        for w in word_ids.windows(2) {
            if w[1] != w[0] && w[1] != w[0] + 1 {
                return Err(Error::Parse(format!("word ids must step by 0 or 1, got {} -> {}", w[0], w[1])));
            }
        }
        let word_count = word_ids[word_ids.len() - 1] + 1;
        Ok(Self { tokens, word_ids, word_count })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Phonemes per word.
    pub fn word_lengths(&self) -> Vec<usize> {
        let mut out = vec![0; self.word_count];
        for &w in &self.word_ids {
            out[w] += 1;
        }
        out
    }
}

/// Parses `"HH AE1 Z | N EH1 V ER0"`: whitespace-separated phonemes, `|` between words.
pub fn parse_phoneme_text(text: &str, vocab: &PhonemeVocab) -> Result<PhonemeSequence> {
    if text.trim().is_empty() {
        return Err(Error::Parse("empty phoneme text".into()));
    }
    let mut tokens = Vec::new();
    let mut word_ids = Vec::new();
    for (w, word) in text.split(WORD_SEP).enumerate() {
        let mut any = false;
        for tok in word.split_whitespace() {
            let id = vocab.get(tok).ok_or_else(|| Error::UnknownPhoneme { token: tok.to_string() })?;
            if id == 0 {
                return Err(Error::Parse(format!("padding symbol {PAD} is not allowed in text")));
            }
            tokens.push(id);
            word_ids.push(w);
            any = true;
        }
        if !any {
            return Err(Error::Parse(format!("empty word at position {w} in {text:?}")));
        }
    }
    PhonemeSequence::new(tokens, word_ids)
}

/// Canonical text form; inverse of [`parse_phoneme_text`].
pub fn phoneme_text(seq: &PhonemeSequence, vocab: &PhonemeVocab) -> Result<String> {
    let mut words: Vec<Vec<&str>> = vec![Vec::new(); seq.word_count];
    for (&t, &w) in seq.tokens.iter().zip(&seq.word_ids) {
        let s = vocab.symbol(t).ok_or(Error::TokenOutOfRange { index: t, size: vocab.len() })?;
        words[w].push(s);
    }
    Ok(words.iter().map(|w| w.join(" ")).collect::<Vec<_>>().join(" | "))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ab() -> PhonemeVocab {
        PhonemeVocab::new(["A", "B"]).unwrap()
    }

    #[test]
    fn parses_the_two_word_example() {
        let v = PhonemeVocab::arpabet();
        let s = parse_phoneme_text("HH AE1 Z | N EH1 V ER0", &v).unwrap();
        assert_eq!(s.len(), 7);
        assert_eq!(s.word_ids, vec![0, 0, 0, 1, 1, 1, 1]);
        assert_eq!(s.word_count, 2);
        let one = parse_phoneme_text("AH0", &v).unwrap();
        assert_eq!((one.len(), one.word_ids.clone(), one.word_count), (1, vec![0], 1));
    }

    #[test]
    fn silence_is_a_word() {
        let v = ab();
        let s = parse_phoneme_text("A | SIL | B", &v).unwrap();
        assert_eq!(s.word_count, 3);
        assert_eq!(s.tokens[1], v.sil());
        assert_eq!(s.word_ids, vec![0, 1, 2]);
    }

    #[test]
    fn errors() {
        let v = ab();
        assert!(matches!(parse_phoneme_text("A | | B", &v), Err(Error::Parse(_))));
        assert!(matches!(parse_phoneme_text("A |", &v), Err(Error::Parse(_))));
        assert!(matches!(parse_phoneme_text("", &v), Err(Error::Parse(_))));
        match parse_phoneme_text("A QQ", &v) {
            Err(Error::UnknownPhoneme { token }) => assert_eq!(token, "QQ"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn vocab_layout() {
        let v = PhonemeVocab::arpabet();
        assert_eq!(v.symbol(0), Some(PAD));
        assert_eq!(v.symbol(1), Some(SIL));
        assert_eq!(v.len(), 2 + 45 + 24);
        assert_eq!(PhonemeVocab::from_line(&v.to_line()).unwrap(), v);
    }

    fn arb_seq() -> impl Strategy<Value = PhonemeSequence> {
        let n = PhonemeVocab::arpabet().len();
        prop::collection::vec(prop::collection::vec(1..n, 1..5), 1..6).prop_map(|words| {
            let mut tokens = Vec::new();
            let mut ids = Vec::new();
            for (w, ph) in words.iter().enumerate() {
                for &p in ph {
                    tokens.push(p);
                    ids.push(w);
                }
            }
            PhonemeSequence::new(tokens, ids).unwrap()
        })
    }

    proptest! {
        #[test]
        fn serializer_is_inverse(seq in arb_seq()) {
            let v = PhonemeVocab::arpabet();
            let text = phoneme_text(&seq, &v).unwrap();
            let back = parse_phoneme_text(&text, &v).unwrap();
            prop_assert_eq!(&back, &seq);
            prop_assert_eq!(phoneme_text(&back, &v).unwrap(), text);
        }
    }
}

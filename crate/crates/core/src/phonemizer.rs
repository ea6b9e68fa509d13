//! Word-level grapheme-to-phoneme conversion: lexicon lookup with a fixed
//! letter-by-letter fallback.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PhonemeId(pub u16);

impl PhonemeId {
    pub const PAD: PhonemeId = PhonemeId(0);
    pub const WORD_BOUNDARY: PhonemeId = PhonemeId(1);

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for PhonemeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// ARPAbet without stress marks; the first two slots are reserved.
pub const INVENTORY: [&str; 41] = [
    "<pad>", "<wb>", "AA", "AE", "AH", "AO", "AW", "AY", "B", "CH", "D", "DH", "EH", "ER", "EY",
    "F", "G", "HH", "IH", "IY", "JH", "K", "L", "M", "N", "NG", "OW", "OY", "P", "R", "S", "SH",
    "T", "TH", "UH", "UW", "V", "W", "Y", "Z", "ZH",
];

/// Number of real (non-reserved) phonemes.
pub const NUM_SPEECH_PHONEMES: usize = INVENTORY.len() - 2;

const LETTERS: [&[&str]; 26] = [
    &["AE"],
    &["B"],
    &["K"],
    &["D"],
    &["EH"],
    &["F"],
    &["G"],
    &["HH"],
    &["IH"],
    &["JH"],
    &["K"],
    &["L"],
    &["M"],
    &["N"],
    &["AA"],
    &["P"],
    &["K"],
    &["R"],
    &["S"],
    &["T"],
    &["AH"],
    &["V"],
    &["W"],
    &["K", "S"],
    &["Y"],
    &["Z"],
];

const DIGITS: [&[&str]; 10] = [
    &["Z", "IH", "R", "OW"],
    &["W", "AH", "N"],
    &["T", "UW"],
    &["TH", "R", "IY"],
    &["F", "AO", "R"],
    &["F", "AY", "V"],
    &["S", "IH", "K", "S"],
    &["S", "EH", "V", "AH", "N"],
    &["EY", "T"],
    &["N", "AY", "N"],
];

const BUILTIN: &str = include_str!("../assets/lexicon.tsv");

#[derive(Debug, Clone)]
pub struct Lexicon {
    index: HashMap<&'static str, PhonemeId>,
    words: BTreeMap<String, Vec<PhonemeId>>,
}

impl Default for Lexicon {
    fn default() -> Self {
        Self {
            index: INVENTORY
                .iter()
                .enumerate()
                .map(|(i, &s)| (s, PhonemeId(i as u16)))
                .collect(),
            words: BTreeMap::new(),
        }
    }
}

impl Lexicon {
    /// Lexicon shipped with the crate.
    pub fn builtin() -> Self {
        Self::parse(BUILTIN, "builtin").expect("built-in lexicon parses")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, source_name: &str) -> Result<Self> {
        let mut lex = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let err = |message: String| Error::Parse {
                source_name: source_name.to_string(),
                line: n + 1,
                message,
            };
            let (word, phones) = line
                .split_once('\t')
                .ok_or_else(|| err("expected word<TAB>phonemes".into()))?;
            let ids = phones
                .split_whitespace()
                .map(|p| {
                    lex.phoneme(p)
                        .filter(|id| id.index() > 1)
                        .ok_or_else(|| err(format!("unknown phoneme {p:?}")))
                })
                .collect::<Result<Vec<_>>>()?;
            if ids.is_empty() {
                return Err(err(format!("no phonemes for {word:?}")));
            }
            let word = word.trim().to_lowercase();
            if lex.words.insert(word.clone(), ids).is_some() {
                tracing::warn!(source = source_name, line = n + 1, %word, "duplicate lexicon entry, keeping the later one");
            }
        }
        Ok(lex)
    }

    pub fn phoneme(&self, symbol: &str) -> Option<PhonemeId> {
        self.index.get(symbol).copied()
    }

    pub fn symbol(id: PhonemeId) -> &'static str {
        INVENTORY.get(id.index()).copied().unwrap_or("?")
    }

    pub fn inventory_size(&self) -> usize {
        INVENTORY.len()
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn entry(&self, word: &str) -> Option<&[PhonemeId]> {
        self.words.get(word).map(Vec::as_slice)
    }

    pub fn words(&self) -> impl Iterator<Item = (&str, &[PhonemeId])> + '_ {
        self.words.iter().map(|(w, p)| (w.as_str(), p.as_slice()))
    }

    fn table(&self, symbols: &[&str], out: &mut Vec<PhonemeId>) {
        out.extend(symbols.iter().map(|s| self.index[s]));
    }

    /// Phonemes for one word; empty when the word has no letters or digits.
    pub fn phonemize_word(&self, word: &str) -> Vec<PhonemeId> {
        let norm = normalize(word);
        if let Some(p) = self.words.get(&norm) {
            return p.clone();
        }
        let mut out = Vec::new();
        for c in norm.chars() {
            if c.is_ascii_lowercase() {
                self.table(LETTERS[(c as u8 - b'a') as usize], &mut out);
            } else if let Some(d) = c.to_digit(10) {
                self.table(DIGITS[d as usize], &mut out);
            }
        }
        out
    }

    /// Whitespace-split text, one phoneme list per word that produced any.
    pub fn phonemize_text(&self, text: &str) -> Vec<Vec<PhonemeId>> {
        text.split_whitespace()
            .map(|w| self.phonemize_word(w))
            .filter(|p| !p.is_empty())
            .collect()
    }
}

/// Lowercases and drops everything except ASCII letters, digits and
/// apostrophes.
pub fn normalize(word: &str) -> String {
    word.chars()
        .flat_map(char::to_lowercase)
        .filter(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || *c == '\'')
        .collect()
}

//! Joint token vocabulary: closed text word list, morph-code range, special
//! tokens, and (for ablation variants only) a pixel-code range.
//!
//! Layout: text ids in [0, T), morph ids in [T, T+K_m), specials above that,
//! then pixel ids when present. The ranges are disjoint by construction.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Every word the synthetic world's grammars can produce, sorted.
pub const WORDS: &[&str] = &[
    "a", "add", "an", "and", "are", "at", "be", "blue", "bottom", "change", "circle", "color",
    "column", "describe", "editing", "first", "four", "generate", "green", "how", "image", "in",
    "instruction", "is", "keep", "left", "like", "many", "move", "objects", "one", "red",
    "remove", "right", "row", "same", "second", "square", "the", "this", "three", "to", "top",
    "triangle", "two", "what", "will", "with", "yellow",
];

pub const NUM_SPECIALS: usize = 7;

#[derive(Debug, Error, PartialEq)]
pub enum VocabError {
    #[error("word `{0}` is not in the closed vocabulary")]
    UnknownWord(String),
    #[error("token id {0} out of range")]
    BadId(usize),
    #[error("text length {got} exceeds maximum {max}")]
    TooLong { got: usize, max: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    Text,
    Morph,
    Special,
    Pixel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Special {
    Bos,
    Eos,
    Boi,
    Eoi,
    Emp,
    User,
    Assistant,
}

const SPECIALS: [Special; NUM_SPECIALS] = [
    Special::Bos,
    Special::Eos,
    Special::Boi,
    Special::Eoi,
    Special::Emp,
    Special::User,
    Special::Assistant,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    /// Number of text words (T).
    pub text: usize,
    /// Number of morph codes (K_m).
    pub morph: usize,
    /// Pixel-code range size; only ablation variants set this.
    pub pixel: usize,
}

impl Vocab {
    pub fn new(morph: usize, pixel: usize) -> Vocab {
        Vocab { text: WORDS.len(), morph, pixel }
    }

    pub fn size(&self) -> usize {
        self.text + self.morph + NUM_SPECIALS + self.pixel
    }

    pub fn special(&self, s: Special) -> usize {
        let off = SPECIALS.iter().position(|&x| x == s).expect("listed");
        self.text + self.morph + off
    }

    pub fn bos(&self) -> usize {
        self.special(Special::Bos)
    }
    pub fn eos(&self) -> usize {
        self.special(Special::Eos)
    }
    pub fn boi(&self) -> usize {
        self.special(Special::Boi)
    }
    pub fn eoi(&self) -> usize {
        self.special(Special::Eoi)
    }
    pub fn emp(&self) -> usize {
        self.special(Special::Emp)
    }
    pub fn user(&self) -> usize {
        self.special(Special::User)
    }
    pub fn assistant(&self) -> usize {
        self.special(Special::Assistant)
    }

    pub fn morph_id(&self, code: usize) -> usize {
        assert!(code < self.morph);
        self.text + code
    }

    pub fn morph_code(&self, id: usize) -> Option<usize> {
        (id >= self.text && id < self.text + self.morph).then(|| id - self.text)
    }

    pub fn pixel_id(&self, code: usize) -> usize {
        assert!(self.pixel > 0, "vocabulary has no pixel range");
        assert!(code < self.pixel);
        self.text + self.morph + NUM_SPECIALS + code
    }

    pub fn pixel_code(&self, id: usize) -> Option<usize> {
        let base = self.text + self.morph + NUM_SPECIALS;
        (self.pixel > 0 && id >= base && id < base + self.pixel).then(|| id - base)
    }

    pub fn modality(&self, id: usize) -> Modality {
        if id < self.text {
            Modality::Text
        } else if id < self.text + self.morph {
            Modality::Morph
        } else if id < self.text + self.morph + NUM_SPECIALS {
            Modality::Special
        } else if id < self.size() {
            Modality::Pixel
        } else {
            panic!("id {id} out of vocabulary")
        }
    }

    pub fn word_id(&self, word: &str) -> Result<usize, VocabError> {
        WORDS
            .binary_search(&word)
            .map_err(|_| VocabError::UnknownWord(word.to_string()))
    }

    pub fn encode_text(&self, text: &str, max: usize) -> Result<Vec<usize>, VocabError> {
        let ids: Result<Vec<usize>, VocabError> =
            text.split_whitespace().map(|w| self.word_id(w)).collect();
        let ids = ids?;
        if ids.len() > max {
            return Err(VocabError::TooLong { got: ids.len(), max });
        }
        Ok(ids)
    }

    pub fn decode_text(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&id| if id < self.text { WORDS[id] } else { "<?>" })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn words_sorted_for_binary_search() {
        let mut sorted = WORDS.to_vec();
        sorted.sort_unstable();
        assert_eq!(sorted, WORDS);
    }

    #[test]
    fn ranges_are_disjoint_and_total() {
        let v = Vocab::new(64, 256);
        let mut seen = vec![0u8; v.size()];
        for id in 0..v.size() {
            match v.modality(id) {
                Modality::Text => assert!(id < v.text),
                Modality::Morph => assert_eq!(v.morph_id(v.morph_code(id).unwrap()), id),
                Modality::Pixel => assert_eq!(v.pixel_id(v.pixel_code(id).unwrap()), id),
                Modality::Special => {}
            }
            seen[id] += 1;
        }
        assert!(seen.iter().all(|&c| c == 1));
        // specials are distinct
        let sp = [v.bos(), v.eos(), v.boi(), v.eoi(), v.emp(), v.user(), v.assistant()];
        let set: std::collections::HashSet<usize> = sp.iter().copied().collect();
        assert_eq!(set.len(), sp.len());
    }

    #[test]
    fn grammar_strings_tokenize() {
        let v = Vocab::new(64, 0);
        for text in [
            "a red circle at top left",
            "a yellow triangle at row two column three and a blue square at bottom right",
            "change the circle to blue",
            "move the square at row one column two to bottom left",
            "what will this image be like with the editing instruction",
            "how many objects are in the first image",
            "keep the image the same",
            "describe the image",
            "generate an image",
            "what color is the triangle in the second image",
        ] {
            let ids = v.encode_text(text, 32).unwrap();
            assert_eq!(v.decode_text(&ids), text);
        }
        assert!(v.encode_text("a purple circle", 32).is_err());
    }
}

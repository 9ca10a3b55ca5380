//! Character-level tokenizer over a fixed printable-ASCII alphabet.
//!
//! One char per token; answer strings (e.g. passwords) always tokenize to
//! per-character tokens and entity-span alignment is exact.

use super::LmError;

/// Character-level tokenizer. Id 0 is `'\n'`; ids 1..=95 are the printable
/// ASCII range `' '..='~'`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Tokenizer;

impl Tokenizer {
    pub const VOCAB_SIZE: usize = 96;
    /// Token id of the newline character, the answer terminator.
    pub const NEWLINE: usize = 0;

    pub fn vocab_size(&self) -> usize {
        Self::VOCAB_SIZE
    }

    pub fn char_to_id(&self, c: char) -> Result<usize, LmError> {
        match c {
            '\n' => Ok(0),
            ' '..='~' => Ok(c as usize - 0x20 + 1),
            other => Err(LmError::OutOfAlphabet(other)),
        }
    }

    pub fn id_to_char(&self, id: usize) -> Result<char, LmError> {
        match id {
            0 => Ok('\n'),
            1..=95 => Ok((id - 1 + 0x20) as u8 as char),
            other => Err(LmError::InvalidTokenId(other)),
        }
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>, LmError> {
        text.chars().map(|c| self.char_to_id(c)).collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> Result<String, LmError> {
        ids.iter().map(|&id| self.id_to_char(id)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_round_trip() {
        let tok = Tokenizer;
        let ids = tok.tokenize("").unwrap();
        assert!(ids.is_empty());
        assert_eq!(tok.detokenize(&ids).unwrap(), "");
    }

    #[test]
    fn char_level_lengths() {
        let tok = Tokenizer;
        assert_eq!(tok.tokenize("abc").unwrap().len(), 3);
        assert_eq!(
            tok.tokenize("Answer: x7\n").unwrap().len(),
            "Answer: x7\n".len()
        );
    }

    #[test]
    fn out_of_alphabet_names_character() {
        let tok = Tokenizer;
        let err = tok.tokenize("caf\u{e9}").unwrap_err();
        assert!(err.to_string().contains('\u{e9}'), "{err}");
    }

    #[test]
    fn newline_is_token_zero() {
        let tok = Tokenizer;
        assert_eq!(tok.tokenize("\n").unwrap(), vec![Tokenizer::NEWLINE]);
    }

    proptest! {
        #[test]
        fn round_trip_is_identity(s in "[ -~\n]{0,200}") {
            let tok = Tokenizer;
            let ids = tok.tokenize(&s).unwrap();
            prop_assert_eq!(tok.detokenize(&ids).unwrap(), s);
        }

        #[test]
        fn ids_in_range(s in "[ -~\n]{0,64}") {
            let tok = Tokenizer;
            for id in tok.tokenize(&s).unwrap() {
                prop_assert!(id < Tokenizer::VOCAB_SIZE);
            }
        }
    }
}

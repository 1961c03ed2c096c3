//! Byte-level tokenization over a fixed 260-symbol alphabet.
//!
//! Ids `0..=255` are raw UTF-8 bytes, followed by four special symbols. Any
//! string is representable, which is what lets the decoder emit labels that
//! were never part of a training vocabulary.

use crate::error::{Error, Result};

pub type TokenId = u16;

pub const PAD: TokenId = 256;
pub const BOS: TokenId = 257;
pub const EOS: TokenId = 258;
pub const SEP: TokenId = 259;
pub const VOCAB_SIZE: usize = 260;

/// `(name, id)` pairs recorded in checkpoint headers.
pub const SPECIAL_TOKENS: [(&str, TokenId); 4] =
    [("PAD", PAD), ("BOS", BOS), ("EOS", EOS), ("SEP", SEP)];

#[inline]
pub fn is_byte(token: TokenId) -> bool {
    token < 256
}

pub fn validate_label(label: &str) -> Result<()> {
    if label.is_empty() || label.contains('\n') {
        return Err(Error::InvalidLabel(label.to_owned()));
    }
    Ok(())
}

pub fn encode_label(label: &str) -> Result<Vec<TokenId>> {
    validate_label(label)?;
    Ok(label.bytes().map(TokenId::from).collect())
}

/// UTF-8 bytes of `text` truncated to `max_len`, with BOS prepended.
pub fn encode_text(text: &str, max_len: usize) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(max_len.min(text.len()) + 1);
    out.push(BOS);
    out.extend(text.bytes().take(max_len).map(TokenId::from));
    out
}

/// Lossy UTF-8 decode. Non-byte ids must have been stripped by the caller.
pub fn decode(tokens: &[TokenId]) -> String {
    debug_assert!(tokens.iter().all(|&t| is_byte(t)));
    let bytes: Vec<u8> = tokens.iter().map(|&t| t as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    #[test]
    fn encodes_labels_as_utf8_bytes() {
        assert_eq!(encode_label("ab").unwrap(), vec![97, 98]);
        assert_eq!(encode_label("é").unwrap(), vec![195, 169]);
        assert!(matches!(encode_label(""), Err(Error::InvalidLabel(_))));
        assert!(encode_label("a\nb").is_err());
    }

    #[test]
    fn text_encoding_truncates_then_prepends_bos() {
        assert_eq!(encode_text("hi", 512), vec![BOS, 104, 105]);
        assert_eq!(encode_text("hi", 1), vec![BOS, 104]);
        assert_eq!(encode_text("", 512), vec![BOS]);
    }

    #[test]
    fn decode_is_lossy() {
        assert_eq!(decode(&[97, 98]), "ab");
        assert_eq!(decode(&[]), "");
        assert_eq!(decode(&[255]), "\u{FFFD}");
    }

    #[test]
    fn encoding_is_injective_over_a_label_set() {
        let labels = ["a", "ab", "b a", "é", "e\u{301}", "ab "];
        let encoded: HashSet<Vec<TokenId>> =
            labels.iter().map(|l| encode_label(l).unwrap()).collect();
        assert_eq!(encoded.len(), labels.len());
    }

    proptest! {
        #[test]
        fn label_round_trip(s in "[^\n]{1,24}") {
            prop_assert_eq!(decode(&encode_label(&s).unwrap()), s);
        }
    }
}

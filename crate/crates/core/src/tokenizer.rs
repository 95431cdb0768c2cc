//! Byte-level tokenizer: one token per byte, id = byte value.

use crate::error::{EspError, Result};
use crate::lm::TokenId;

pub const BYTE_VOCAB: usize = 256;

pub fn encode(text: &str) -> Vec<TokenId> {
    text.bytes().map(TokenId::from).collect()
}

/// Raw bytes for a token sequence.
pub fn decode_bytes(tokens: &[TokenId]) -> Result<Vec<u8>> {
    tokens
        .iter()
        .map(|&t| {
            u8::try_from(t).map_err(|_| EspError::TokenOutOfRange {
                token: t,
                vocab: BYTE_VOCAB,
            })
        })
        .collect()
}

/// Display form; invalid UTF-8 becomes U+FFFD.
pub fn decode(tokens: &[TokenId]) -> Result<String> {
    Ok(String::from_utf8_lossy(&decode_bytes(tokens)?).into_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        assert_eq!(encode("AB"), vec![65, 66]);
        assert!(encode("").is_empty());
        assert_eq!(decode(&[72, 105]).unwrap(), "Hi");
        assert_eq!(decode(&[]).unwrap(), "");
        assert!(matches!(
            decode(&[300]),
            Err(EspError::TokenOutOfRange { token: 300, .. })
        ));
    }

    #[test]
    fn invalid_utf8_is_lossy_for_display_only() {
        let toks = [0xffu32, 0x41];
        assert_eq!(decode(&toks).unwrap(), "\u{fffd}A");
        assert_eq!(decode_bytes(&toks).unwrap(), vec![0xff, 0x41]);
    }

    proptest! {
        #[test]
        fn text_roundtrip(s in ".*") {
            prop_assert_eq!(decode(&encode(&s)).unwrap(), s);
        }

        #[test]
        fn byte_roundtrip(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            let toks: Vec<TokenId> = bytes.iter().map(|&b| b as TokenId).collect();
            prop_assert_eq!(decode_bytes(&toks).unwrap(), bytes);
        }
    }
}

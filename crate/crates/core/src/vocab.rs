//! Token id layout shared by the data generator and the model.
//!
//! Ids `0..SURFACE_VOCAB` are surface words; the specials block follows.

pub type TokenId = u32;
pub type TokenSeq = Vec<TokenId>;

pub const SURFACE_VOCAB: u32 = 120;
pub const BOS: TokenId = 120;
pub const EOS: TokenId = 121;
pub const OCR: TokenId = 122;
pub const TRANSLATE: TokenId = 123;
pub const LANG_BASE: TokenId = 124;
pub const MAX_LANGUAGES: usize = 10;
pub const VOCAB_SIZE: usize = LANG_BASE as usize + MAX_LANGUAGES;

pub fn lang_token(language: usize) -> TokenId {
    assert!(language < MAX_LANGUAGES, "language id {language} out of range");
    LANG_BASE + language as TokenId
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_vocab_is_134() {
        assert_eq!(VOCAB_SIZE, 134);
        assert_eq!(lang_token(9), 133);
    }
}

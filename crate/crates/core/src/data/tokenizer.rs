/// Reversible text ↔ token-id mapping with the three special tokens the
/// rest of the crate relies on.
pub trait Tokenizer {
    fn vocab_size(&self) -> usize;
    fn bos(&self) -> u32;
    fn eos(&self) -> u32;
    fn pad(&self) -> u32;
    fn encode(&self, text: &str) -> Vec<u32>;
    /// Decodes ids back to text, dropping special tokens.
    fn decode(&self, ids: &[u32]) -> String;
}

/// One token per UTF-8 byte, plus BOS/EOS/PAD.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub const BOS: u32 = 256;
    pub const EOS: u32 = 257;
    pub const PAD: u32 = 258;
    pub const VOCAB_SIZE: usize = 259;
}

impl Tokenizer for ByteTokenizer {
    fn vocab_size(&self) -> usize {
        Self::VOCAB_SIZE
    }

    fn bos(&self) -> u32 {
        Self::BOS
    }

    fn eos(&self) -> u32 {
        Self::EOS
    }

    fn pad(&self) -> u32 {
        Self::PAD
    }

    fn encode(&self, text: &str) -> Vec<u32> {
        text.bytes().map(u32::from).collect()
    }

    fn decode(&self, ids: &[u32]) -> String {
        let bytes: Vec<u8> = ids
            .iter()
            .filter(|&&id| id < 256)
            .map(|&id| id as u8)
            .collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }
}

//! Byte-level tokenizer: one id per byte plus an end-of-document id.

use crate::error::{Error, Result};

pub const VOCAB_SIZE: usize = 257;
pub const EOS: u32 = 256;

pub fn encode(text: &str) -> Vec<u32> {
    encode_bytes(text.as_bytes())
}

pub fn encode_bytes(bytes: &[u8]) -> Vec<u32> {
    bytes.iter().map(|&b| u32::from(b)).collect()
}

/// Bytes for `ids`, skipping `EOS`. Ids above `EOS` are an error.
pub fn decode_bytes(ids: &[u32]) -> Result<Vec<u8>> {
    ids.iter()
        .filter(|&&id| id != EOS)
        .map(|&id| {
            u8::try_from(id).map_err(|_| Error::InvalidArgument(format!("token id {id} out of range")))
        })
        .collect()
}

/// Lossy UTF-8 decoding; exact for ids produced by [`encode`].
pub fn decode(ids: &[u32]) -> Result<String> {
    Ok(String::from_utf8_lossy(&decode_bytes(ids)?).into_owned())
}

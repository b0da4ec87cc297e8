use crate::data::SPECIAL_TOKENS;

/// Token ids: bytes, then the special tokens, then padding.
pub const VOCAB_SIZE: usize = 263;
pub const SPECIAL_BASE: u32 = 256;
pub const PAD_ID: u32 = 262;

/// Reserved id of a special token such as `"[LINK]"`.
pub fn special_id(token: &str) -> Option<u32> {
    SPECIAL_TOKENS
        .iter()
        .position(|&s| s == token)
        .map(|i| SPECIAL_BASE + i as u32)
}

/// Bytes of `text` with special tokens collapsed to their reserved ids,
/// truncated or padded with [`PAD_ID`] to exactly `max_len`.
pub fn tokenize_bytes(text: &str, max_len: usize) -> Vec<u32> {
    let bytes = text.as_bytes();
    let mut out = Vec::with_capacity(max_len);
    let mut i = 0;
    'outer: while i < bytes.len() && out.len() < max_len {
        if bytes[i] == b'[' {
            for (k, tok) in SPECIAL_TOKENS.iter().enumerate() {
                if bytes[i..].starts_with(tok.as_bytes()) {
                    out.push(SPECIAL_BASE + k as u32);
                    i += tok.len();
                    continue 'outer;
                }
            }
        }
        out.push(bytes[i] as u32);
        i += 1;
    }
    out.resize(max_len, PAD_ID);
    out
}

/// Truncates or pads an existing token sequence to `len`.
pub fn fit_tokens(tokens: &[u32], len: usize) -> Vec<u32> {
    let mut out: Vec<u32> = tokens.iter().copied().take(len).collect();
    out.resize(len, PAD_ID);
    out
}

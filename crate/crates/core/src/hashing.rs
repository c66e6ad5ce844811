use sha2::{Digest, Sha256};

/// First 16 hex characters of the SHA-256 of the UTF-8 prompt. The empty
/// prompt hashes too, which keeps unconditional records distinct.
pub fn prompt_hash(prompt: &str) -> String {
    hex16(prompt.as_bytes())
}

/// 64-bit content hash (first 8 bytes of SHA-256) as 16 lowercase hex chars.
pub fn hex16(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    hex::encode(&digest[..8])
}

/// Derives an independent 64-bit seed for a named random substream.
pub fn substream_seed(root: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(name.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digests() {
        // sha256("") = e3b0c44298fc1c14...
        assert_eq!(prompt_hash(""), "e3b0c44298fc1c14");
        // sha256("abc") = ba7816bf8f01cfea...
        assert_eq!(prompt_hash("abc"), "ba7816bf8f01cfea");
    }

    #[test]
    fn substreams_differ() {
        assert_ne!(substream_seed(0, "trials"), substream_seed(0, "mismatch"));
        assert_ne!(substream_seed(0, "trials"), substream_seed(1, "trials"));
        assert_eq!(substream_seed(5, "dropout"), substream_seed(5, "dropout"));
    }
}

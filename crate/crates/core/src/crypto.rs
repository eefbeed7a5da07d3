//! Keyed hashes, digests and the sealed result envelope.

use chacha20poly1305::aead::{Aead, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use hmac::{Hmac, Mac};
use sha2::{Digest, Sha256};

type HmacSha256 = Hmac<Sha256>;

pub const TAG_HEX_LEN: usize = 64;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn mac(key: &[u8]) -> HmacSha256 {
    <HmacSha256 as Mac>::new_from_slice(key).expect("hmac accepts any key length")
}

pub fn auth_tag(key: &[u8], message: &str) -> String {
    let mut m = mac(key);
    m.update(message.as_bytes());
    hex::encode(m.finalize().into_bytes())
}

/// Accepts only the exact lowercase hex encoding of the tag.
pub fn verify_tag(key: &[u8], message: &str, tag_hex: &str) -> bool {
    if tag_hex.len() != TAG_HEX_LEN || !tag_hex.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
        return false;
    }
    let Ok(tag) = hex::decode(tag_hex) else {
        return false;
    };
    let mut m = mac(key);
    m.update(message.as_bytes());
    m.verify_slice(&tag).is_ok()
}

/// Per-party key derived from a shared deployment secret.
pub fn derive_key(secret: &str, label: &str) -> Vec<u8> {
    let mut m = mac(secret.as_bytes());
    m.update(label.as_bytes());
    m.finalize().into_bytes().to_vec()
}

fn seal_cipher(token: &str) -> ChaCha20Poly1305 {
    let mut h = Sha256::new();
    h.update(b"predpool-seal");
    h.update(token.as_bytes());
    ChaCha20Poly1305::new(Key::from_slice(&h.finalize()))
}

fn seal_nonce(digest_hex: &str) -> [u8; 12] {
    let d = Sha256::digest(digest_hex.as_bytes());
    let mut n = [0u8; 12];
    n.copy_from_slice(&d[..12]);
    n
}

/// Encrypts `plaintext` under `token`. The nonce is derived from the
/// plaintext digest, so one token never seals two different results under
/// the same nonce.
pub fn seal(token: &str, digest_hex: &str, plaintext: &[u8]) -> Vec<u8> {
    seal_cipher(token)
        .encrypt(Nonce::from_slice(&seal_nonce(digest_hex)), plaintext)
        .expect("in-memory encryption")
}

pub fn open(token: &str, digest_hex: &str, envelope: &[u8]) -> Option<Vec<u8>> {
    seal_cipher(token)
        .decrypt(Nonce::from_slice(&seal_nonce(digest_hex)), envelope)
        .ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hmac_known_answer() {
        // RFC 4231 test case 2
        assert_eq!(
            auth_tag(b"Jefe", "what do ya want for nothing?"),
            "5bdcc146bf60754e6a042426089575c75a003f089d2739839dec58b964ec3843"
        );
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn tag_rejects_case_and_length_changes() {
        let t = auth_tag(b"k", "m");
        assert!(verify_tag(b"k", "m", &t));
        assert!(!verify_tag(b"k", "m2", &t));
        assert!(!verify_tag(b"k2", "m", &t));
        assert!(!verify_tag(b"k", "m", &t.to_uppercase()));
        assert!(!verify_tag(b"k", "m", &t[..62]));
    }

    #[test]
    fn envelope_round_trip() {
        let d = sha256_hex(b"payload");
        let env = seal("tok", &d, b"payload");
        assert_eq!(open("tok", &d, &env).unwrap(), b"payload");
        assert!(open("other", &d, &env).is_none());
        let mut bad = env.clone();
        bad[0] ^= 1;
        assert!(open("tok", &d, &bad).is_none());
    }
}

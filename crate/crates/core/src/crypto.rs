//! Keys, sealing, AEAD and retrieval-token derivation.
//!
//! * Sealing: ephemeral X25519 against the service key, HKDF-SHA256, then
//!   ChaCha20-Poly1305. Ciphertext = 32-byte ephemeral key ‖ body ‖ 16-byte tag.
//! * AEAD: ChaCha20-Poly1305 with a random 96-bit nonce prepended.
//! * PRF: HMAC-SHA256 truncated to 64 bits.
//!
//! All ciphertext lengths are plaintext length plus a constant.

use std::fmt;
use std::path::Path;

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use hkdf::Hkdf;
use hmac::{Hmac, Mac};
use rand::{CryptoRng, RngCore};
use sha2::Sha256;
use thiserror::Error;
use x25519_dalek::{PublicKey, StaticSecret};

use crate::protocol::ClientId;

pub const SEAL_OVERHEAD: usize = 32 + 16;
pub const AEAD_OVERHEAD: usize = 12 + 16;
pub const KEY_LEN: usize = 32;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CryptoError {
    #[error("authentication failed")]
    Auth,
    #[error("ciphertext too short ({0} bytes)")]
    Truncated(usize),
    #[error("key file {path}: {reason}")]
    KeyFile { path: String, reason: String },
}

/// 32-byte symmetric secret (per-friendship key, session key).
#[derive(Clone, PartialEq, Eq)]
pub struct SymKey([u8; KEY_LEN]);

impl SymKey {
    pub fn random<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut k = [0u8; KEY_LEN];
        rng.fill_bytes(&mut k);
        SymKey(k)
    }

    pub fn from_bytes(b: [u8; KEY_LEN]) -> Self {
        SymKey(b)
    }

    pub fn as_bytes(&self) -> &[u8; KEY_LEN] {
        &self.0
    }

    /// Derive a sub-key for a labelled purpose.
    pub fn derive(&self, label: &[u8]) -> SymKey {
        let hk = Hkdf::<Sha256>::new(None, &self.0);
        let mut out = [0u8; KEY_LEN];
        hk.expand(label, &mut out).expect("32 bytes is a valid HKDF length");
        SymKey(out)
    }
}

impl fmt::Debug for SymKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SymKey(..)")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RetrievalToken(pub u64);

type HmacSha256 = Hmac<Sha256>;

/// `PRF(sk, receiver ‖ sender ‖ counter)`, fixed-width big-endian encoding.
///
/// The sender calls it with `(buddy, me)` and the receiver with `(me, buddy)`,
/// so both ends agree on the token for each directed message.
pub fn derive_token(
    sk: &SymKey,
    receiver: ClientId,
    sender: ClientId,
    counter: u64,
) -> RetrievalToken {
    let mut mac = <HmacSha256 as Mac>::new_from_slice(sk.as_bytes()).expect("any key length");
    mac.update(&receiver.0.to_be_bytes());
    mac.update(&sender.0.to_be_bytes());
    mac.update(&counter.to_be_bytes());
    let out = mac.finalize().into_bytes();
    let mut t = [0u8; 8];
    t.copy_from_slice(&out[..8]);
    RetrievalToken(u64::from_be_bytes(t))
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub struct ServicePublicKey(pub [u8; KEY_LEN]);

impl fmt::Debug for ServicePublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ServicePublicKey({})", hex::encode(&self.0[..6]))
    }
}

/// Service key pair; the secret half is shared by every node of one service.
#[derive(Clone)]
pub struct ServiceKeyPair {
    secret: StaticSecret,
    public: ServicePublicKey,
}

impl fmt::Debug for ServiceKeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ServiceKeyPair").field("public", &self.public).finish()
    }
}

impl ServiceKeyPair {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut b = [0u8; KEY_LEN];
        rng.fill_bytes(&mut b);
        Self::from_secret_bytes(b)
    }

    pub fn from_secret_bytes(b: [u8; KEY_LEN]) -> Self {
        let secret = StaticSecret::from(b);
        let public = ServicePublicKey(PublicKey::from(&secret).to_bytes());
        ServiceKeyPair { secret, public }
    }

    pub fn public(&self) -> ServicePublicKey {
        self.public
    }

    pub fn secret_bytes(&self) -> [u8; KEY_LEN] {
        self.secret.to_bytes()
    }

    pub fn unseal(&self, ct: &[u8]) -> Result<Vec<u8>, CryptoError> {
        unseal(ct, self)
    }

    /// Symmetric key for node-to-node links inside one service.
    pub fn internal_key(&self) -> SymKey {
        SymKey(self.secret.to_bytes()).derive(b"pingpong internal link")
    }
}

fn seal_key(shared: &[u8; 32], eph: &[u8; 32], recipient: &[u8; 32]) -> Key {
    let mut salt = [0u8; 64];
    salt[..32].copy_from_slice(eph);
    salt[32..].copy_from_slice(recipient);
    let hk = Hkdf::<Sha256>::new(Some(&salt), shared);
    let mut k = [0u8; 32];
    hk.expand(b"pingpong seal v1", &mut k).expect("valid length");
    Key::from(k)
}

/// Randomized public-key encryption to a service.
pub fn seal<R: RngCore + CryptoRng>(payload: &[u8], pk: &ServicePublicKey, rng: &mut R) -> Vec<u8> {
    let mut eb = [0u8; 32];
    rng.fill_bytes(&mut eb);
    let eph = StaticSecret::from(eb);
    let eph_pub = PublicKey::from(&eph).to_bytes();
    let shared = eph.diffie_hellman(&PublicKey::from(pk.0));
    let key = seal_key(shared.as_bytes(), &eph_pub, &pk.0);
    let cipher = ChaCha20Poly1305::new(&key);
    // the key is fresh per message, so a fixed nonce is safe
    let body = cipher
        .encrypt(&Nonce::default(), payload)
        .expect("encryption cannot fail for in-memory buffers");
    let mut out = Vec::with_capacity(32 + body.len());
    out.extend_from_slice(&eph_pub);
    out.extend_from_slice(&body);
    out
}

pub fn unseal(ct: &[u8], keys: &ServiceKeyPair) -> Result<Vec<u8>, CryptoError> {
    if ct.len() < SEAL_OVERHEAD {
        return Err(CryptoError::Truncated(ct.len()));
    }
    let mut eph = [0u8; 32];
    eph.copy_from_slice(&ct[..32]);
    let shared = keys.secret.diffie_hellman(&PublicKey::from(eph));
    let key = seal_key(shared.as_bytes(), &eph, &keys.public.0);
    ChaCha20Poly1305::new(&key)
        .decrypt(&Nonce::default(), &ct[32..])
        .map_err(|_| CryptoError::Auth)
}

pub fn aead_encrypt<R: RngCore + CryptoRng>(
    key: &SymKey,
    plaintext: &[u8],
    ad: &[u8],
    rng: &mut R,
) -> Vec<u8> {
    let mut nonce = [0u8; 12];
    rng.fill_bytes(&mut nonce);
    let cipher = ChaCha20Poly1305::new(Key::from_slice(key.as_bytes()));
    let body = cipher
        .encrypt(
            Nonce::from_slice(&nonce),
            Payload {
                msg: plaintext,
                aad: ad,
            },
        )
        .expect("encryption cannot fail for in-memory buffers");
    let mut out = Vec::with_capacity(12 + body.len());
    out.extend_from_slice(&nonce);
    out.extend_from_slice(&body);
    out
}

pub fn aead_decrypt(key: &SymKey, ct: &[u8], ad: &[u8]) -> Result<Vec<u8>, CryptoError> {
    if ct.len() < AEAD_OVERHEAD {
        return Err(CryptoError::Truncated(ct.len()));
    }
    let cipher = ChaCha20Poly1305::new(Key::from_slice(key.as_bytes()));
    cipher
        .decrypt(
            Nonce::from_slice(&ct[..12]),
            Payload {
                msg: &ct[12..],
                aad: ad,
            },
        )
        .map_err(|_| CryptoError::Auth)
}

pub fn write_key_file(path: &Path, bytes: &[u8; KEY_LEN]) -> Result<(), CryptoError> {
    std::fs::write(path, bytes).map_err(|e| CryptoError::KeyFile {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

pub fn read_key_file(path: &Path) -> Result<[u8; KEY_LEN], CryptoError> {
    let err = |reason: String| CryptoError::KeyFile {
        path: path.display().to_string(),
        reason,
    };
    let raw = std::fs::read(path).map_err(|e| err(e.to_string()))?;
    raw.try_into()
        .map_err(|v: Vec<u8>| err(format!("expected 32 bytes, found {}", v.len())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use std::collections::HashSet;

    fn rng() -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(42)
    }

    #[test]
    fn token_is_deterministic() {
        let mut r = rng();
        let k = SymKey::random(&mut r);
        let (a, b) = (ClientId(1), ClientId(2));
        assert_eq!(derive_token(&k, a, b, 0), derive_token(&k, a, b, 0));
    }

    #[test]
    fn tokens_distinct_across_counters() {
        let mut r = rng();
        let k = SymKey::random(&mut r);
        let mut seen = HashSet::new();
        for c in 0..100_000u64 {
            assert!(seen.insert(derive_token(&k, ClientId(1), ClientId(2), c)));
        }
    }

    #[test]
    fn sender_and_receiver_agree() {
        use rand::Rng;
        let mut r = rng();
        for _ in 0..1000 {
            let k = SymKey::random(&mut r);
            let me = ClientId(r.gen());
            let buddy = ClientId(r.gen());
            let c: u64 = r.gen_range(0..1_000_000);
            // sender side: PRF(sk, buddy.ID + myID + counter)
            let sent = derive_token(&k, buddy, me, c);
            // receiver side (the buddy): PRF(sk, myID + buddy.ID + counter)
            let recv = derive_token(&k, buddy, me, c);
            assert_eq!(sent, recv);
            // direction matters
            if me != buddy {
                assert_ne!(derive_token(&k, me, buddy, c), sent);
            }
        }
    }

    #[test]
    fn seal_round_trip() {
        let mut r = rng();
        let kp = ServiceKeyPair::generate(&mut r);
        let msg = [7u8; 96];
        let ct = seal(&msg, &kp.public(), &mut r);
        assert_eq!(ct.len(), 96 + SEAL_OVERHEAD);
        assert_eq!(kp.unseal(&ct).unwrap(), msg.to_vec());
    }

    #[test]
    fn seal_rejects_tampering() {
        let mut r = rng();
        let kp = ServiceKeyPair::generate(&mut r);
        let mut ct = seal(&[1u8; 96], &kp.public(), &mut r);
        ct[40] ^= 1;
        assert_eq!(kp.unseal(&ct), Err(CryptoError::Auth));
        assert_eq!(kp.unseal(&ct[..10]), Err(CryptoError::Truncated(10)));
    }

    #[test]
    fn seal_is_randomized() {
        let mut r = rng();
        let kp = ServiceKeyPair::generate(&mut r);
        let mut seen = HashSet::new();
        for _ in 0..100 {
            assert!(seen.insert(seal(&[0u8; 96], &kp.public(), &mut r)));
        }
    }

    #[test]
    fn seal_wrong_key_fails() {
        let mut r = rng();
        let kp = ServiceKeyPair::generate(&mut r);
        let other = ServiceKeyPair::generate(&mut r);
        let ct = seal(b"hello", &kp.public(), &mut r);
        assert_eq!(other.unseal(&ct), Err(CryptoError::Auth));
    }

    #[test]
    fn aead_round_trip_and_tamper() {
        let mut r = rng();
        let k = SymKey::random(&mut r);
        let ct = aead_encrypt(&k, b"payload", b"ad", &mut r);
        assert_eq!(ct.len(), 7 + AEAD_OVERHEAD);
        assert_eq!(aead_decrypt(&k, &ct, b"ad").unwrap(), b"payload");
        assert_eq!(aead_decrypt(&k, &ct, b"other ad"), Err(CryptoError::Auth));
        let mut bad = ct.clone();
        bad[15] ^= 0x80;
        assert_eq!(aead_decrypt(&k, &bad, b"ad"), Err(CryptoError::Auth));
    }

    #[test]
    fn aead_nonces_unique() {
        let mut r = rng();
        let k = SymKey::random(&mut r);
        let mut seen = HashSet::new();
        for _ in 0..10_000 {
            let ct = aead_encrypt(&k, b"x", b"", &mut r);
            assert!(seen.insert(ct[..12].to_vec()));
        }
    }

    #[test]
    fn key_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("k");
        write_key_file(&p, &[9u8; 32]).unwrap();
        assert_eq!(read_key_file(&p).unwrap(), [9u8; 32]);
        std::fs::write(&p, [1u8; 5]).unwrap();
        assert!(read_key_file(&p).is_err());
    }
}

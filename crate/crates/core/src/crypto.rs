//! Cryptographic primitives every party shares: SHA-256 digests,
//! ChaCha20-Poly1305 authenticated encryption, Ed25519 signatures, and the
//! channel key derivation used after attestation.
//!
//! All randomness comes from caller-supplied seeded RNGs and nonces come from
//! deterministic per-party sequences, so runs replay exactly. Keys carry a
//! role tag; mixing a data key into a channel (or vice versa) is a bug the
//! call sites reject before any bytes move.

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use ed25519_dalek::Signer;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest as Sha2Digest, Sha256};
use std::fmt;
use thiserror::Error;

pub const DIGEST_LEN: usize = 32;
pub const KEY_LEN: usize = 32;
pub const NONCE_LEN: usize = 12;
pub const TAG_LEN: usize = 16;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("authentication failure")]
    AuthFailure,
    #[error("malformed signature")]
    MalformedSignature,
    #[error("key role mismatch: expected {expected}, got {actual}")]
    RoleMismatch { expected: KeyRole, actual: KeyRole },
}

/// 32-byte SHA-256 digest. Rendered as lowercase hex with no prefix wherever
/// it appears in transcripts or logs.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Digest([u8; DIGEST_LEN]);

impl Digest {
    pub fn from_bytes(bytes: [u8; DIGEST_LEN]) -> Self {
        Digest(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; DIGEST_LEN] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    /// First eight hex chars, for compact transcript details.
    pub fn short(&self) -> String {
        self.to_hex()[..8].to_string()
    }

    pub fn from_hex(s: &str) -> Result<Self, CryptoError> {
        let raw = hex::decode(s).map_err(|_| CryptoError::AuthFailure)?;
        let bytes: [u8; DIGEST_LEN] = raw.try_into().map_err(|_| CryptoError::AuthFailure)?;
        Ok(Digest(bytes))
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.short())
    }
}

impl Serialize for Digest {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Digest::from_hex(&s).map_err(|_| serde::de::Error::custom("bad digest hex"))
    }
}

pub fn hash(bytes: &[u8]) -> Digest {
    Digest(Sha256::digest(bytes).into())
}

/// Serde helpers that render binary fields as lowercase hex strings, so
/// serialized payloads stay greppable and sentinel scans can match on hex.
pub mod hexfmt {
    use serde::{Deserialize, Deserializer, Serializer};

    pub mod vec {
        use super::*;

        pub fn serialize<S: Serializer>(v: &[u8], s: S) -> Result<S::Ok, S::Error> {
            s.serialize_str(&hex::encode(v))
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
            let text = String::deserialize(d)?;
            hex::decode(&text).map_err(serde::de::Error::custom)
        }
    }

    pub mod arr {
        use super::*;

        pub fn serialize<S: Serializer, const N: usize>(
            v: &[u8; N],
            s: S,
        ) -> Result<S::Ok, S::Error> {
            s.serialize_str(&hex::encode(v))
        }

        pub fn deserialize<'de, D: Deserializer<'de>, const N: usize>(
            d: D,
        ) -> Result<[u8; N], D::Error> {
            let text = String::deserialize(d)?;
            let raw = hex::decode(&text).map_err(serde::de::Error::custom)?;
            raw.try_into()
                .map_err(|_| serde::de::Error::custom("wrong hex length"))
        }
    }
}

/// Hash of several parts with length prefixes, so `["ab","c"]` and
/// `["a","bc"]` never collide.
pub fn hash_parts(parts: &[&[u8]]) -> Digest {
    let mut h = Sha256::new();
    for part in parts {
        h.update((part.len() as u64).to_be_bytes());
        h.update(part);
    }
    Digest(h.finalize().into())
}

/// What a symmetric key protects. Call sites check the tag before use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KeyRole {
    Data,
    Result,
    Channel,
}

impl fmt::Display for KeyRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            KeyRole::Data => "data",
            KeyRole::Result => "result",
            KeyRole::Channel => "channel",
        };
        f.write_str(s)
    }
}

/// 256-bit AEAD key with a role tag. Debug output never prints key material.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymmetricKey {
    bytes: [u8; KEY_LEN],
    role: KeyRole,
}

impl SymmetricKey {
    pub fn generate(rng: &mut impl RngCore, role: KeyRole) -> Self {
        let mut bytes = [0u8; KEY_LEN];
        rng.fill_bytes(&mut bytes);
        SymmetricKey { bytes, role }
    }

    pub fn from_bytes(bytes: [u8; KEY_LEN], role: KeyRole) -> Self {
        SymmetricKey { bytes, role }
    }

    pub fn role(&self) -> KeyRole {
        self.role
    }

    pub fn bytes(&self) -> &[u8; KEY_LEN] {
        &self.bytes
    }

    /// Hash of the raw key bytes. This is what a consumer commits on chain
    /// before the key itself is revealed.
    pub fn digest(&self) -> Digest {
        hash(&self.bytes)
    }

    pub fn require_role(&self, expected: KeyRole) -> Result<(), CryptoError> {
        if self.role == expected {
            Ok(())
        } else {
            Err(CryptoError::RoleMismatch {
                expected,
                actual: self.role,
            })
        }
    }
}

impl fmt::Debug for SymmetricKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SymmetricKey({}, <redacted>)", self.role)
    }
}

/// Deterministic nonce sequence: each party derives nonces from its id and a
/// seed-derived salt, so no two parties (and no two messages) collide.
#[derive(Debug, Clone)]
pub struct NonceSeq {
    salt: [u8; 16],
    party: String,
    counter: u64,
}

impl NonceSeq {
    pub fn new(salt: [u8; 16], party: impl Into<String>) -> Self {
        NonceSeq {
            salt,
            party: party.into(),
            counter: 0,
        }
    }

    pub fn next(&mut self) -> [u8; NONCE_LEN] {
        let d = hash_parts(&[
            b"nonce",
            &self.salt,
            self.party.as_bytes(),
            &self.counter.to_be_bytes(),
        ]);
        self.counter += 1;
        let mut nonce = [0u8; NONCE_LEN];
        nonce.copy_from_slice(&d.as_bytes()[..NONCE_LEN]);
        nonce
    }
}

/// AEAD output. `ad_digest` pins the associated data the sender used, so a
/// receiver can detect a wrong-context ciphertext before attempting to open
/// it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ciphertext {
    #[serde(with = "hexfmt::arr")]
    pub nonce: [u8; NONCE_LEN],
    #[serde(with = "hexfmt::vec")]
    pub body: Vec<u8>,
    #[serde(with = "hexfmt::arr")]
    pub tag: [u8; TAG_LEN],
    pub ad_digest: Digest,
}

impl Ciphertext {
    /// Canonical byte image (nonce || body || tag || ad digest), used when a
    /// ciphertext itself is hashed, e.g. the result commitment.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(NONCE_LEN + self.body.len() + TAG_LEN + DIGEST_LEN);
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(&self.body);
        out.extend_from_slice(&self.tag);
        out.extend_from_slice(self.ad_digest.as_bytes());
        out
    }

    pub fn digest(&self) -> Digest {
        hash(&self.canonical_bytes())
    }
}

pub fn aead_encrypt(
    key: &SymmetricKey,
    nonce: [u8; NONCE_LEN],
    plaintext: &[u8],
    ad: &[u8],
) -> Ciphertext {
    let cipher = ChaCha20Poly1305::new(Key::from_slice(key.bytes()));
    let sealed = cipher
        .encrypt(
            Nonce::from_slice(&nonce),
            Payload {
                msg: plaintext,
                aad: ad,
            },
        )
        .expect("chacha20poly1305 encryption is infallible for in-memory buffers");
    // The aead crate appends the 16-byte tag to the ciphertext.
    let split = sealed.len() - TAG_LEN;
    let mut tag = [0u8; TAG_LEN];
    tag.copy_from_slice(&sealed[split..]);
    Ciphertext {
        nonce,
        body: sealed[..split].to_vec(),
        tag,
        ad_digest: hash(ad),
    }
}

pub fn aead_decrypt(
    key: &SymmetricKey,
    ct: &Ciphertext,
    ad: &[u8],
) -> Result<Vec<u8>, CryptoError> {
    if hash(ad) != ct.ad_digest {
        return Err(CryptoError::AuthFailure);
    }
    let cipher = ChaCha20Poly1305::new(Key::from_slice(key.bytes()));
    let mut sealed = Vec::with_capacity(ct.body.len() + TAG_LEN);
    sealed.extend_from_slice(&ct.body);
    sealed.extend_from_slice(&ct.tag);
    cipher
        .decrypt(
            Nonce::from_slice(&ct.nonce),
            Payload {
                msg: &sealed,
                aad: ad,
            },
        )
        .map_err(|_| CryptoError::AuthFailure)
}

/// Ed25519 signing key. Wraps the dalek key so the rest of the crate never
/// touches the external API directly.
#[derive(Clone)]
pub struct SigningKey(ed25519_dalek::SigningKey);

impl SigningKey {
    pub fn generate(rng: &mut impl RngCore) -> Self {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        SigningKey(ed25519_dalek::SigningKey::from_bytes(&seed))
    }

    pub fn public(&self) -> PublicKey {
        PublicKey(self.0.verifying_key().to_bytes())
    }

    pub fn sign(&self, msg: &[u8]) -> Signature {
        Signature(self.0.sign(msg).to_bytes())
    }
}

impl fmt::Debug for SigningKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SigningKey(<redacted>)")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PublicKey([u8; 32]);

impl PublicKey {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Signature([u8; 64]);

impl Signature {
    pub fn to_bytes(&self) -> [u8; 64] {
        self.0
    }

    pub fn from_slice(raw: &[u8]) -> Result<Self, CryptoError> {
        let bytes: [u8; 64] = raw
            .try_into()
            .map_err(|_| CryptoError::MalformedSignature)?;
        Ok(Signature(bytes))
    }
}

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Signature({})", &hex::encode(self.0)[..8])
    }
}

impl Serialize for Signature {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(self.0))
    }
}

impl<'de> Deserialize<'de> for Signature {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let raw = hex::decode(&s).map_err(|_| serde::de::Error::custom("bad signature hex"))?;
        Signature::from_slice(&raw).map_err(|_| serde::de::Error::custom("bad signature length"))
    }
}

pub fn verify(pk: &PublicKey, msg: &[u8], sig: &Signature) -> bool {
    let Ok(vk) = ed25519_dalek::VerifyingKey::from_bytes(&pk.0) else {
        return false;
    };
    let sig = ed25519_dalek::Signature::from_bytes(&sig.0);
    vk.verify_strict(msg, &sig).is_ok()
}

/// Derive the confidential channel key both sides hold after an attested
/// handshake: a hash over the out-of-band shared secret and the digest of the
/// attestation transcript, tagged for channel use. Same inputs give the same
/// key; any differing input gives an unrelated one.
pub fn derive_channel_key(shared_secret: &[u8], transcript: &Digest) -> SymmetricKey {
    let d = hash_parts(&[b"channel-key", shared_secret, transcript.as_bytes()]);
    SymmetricKey::from_bytes(*d.as_bytes(), KeyRole::Channel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    #[test]
    fn sha256_empty_input_matches_reference_vector() {
        assert_eq!(
            hash(b"").to_hex(),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn hash_is_deterministic_and_bit_flips_change_it() {
        let base = hash(b"x");
        assert_eq!(base, hash(b"x"));
        for bit in 0..8 {
            let flipped = [b'x' ^ (1 << bit)];
            assert_ne!(base, hash(&flipped), "flipping bit {bit} left digest unchanged");
        }
    }

    #[test]
    fn hash_parts_is_prefix_unambiguous() {
        assert_ne!(hash_parts(&[b"ab", b"c"]), hash_parts(&[b"a", b"bc"]));
        assert_ne!(hash_parts(&[b"abc"]), hash_parts(&[b"abc", b""]));
    }

    #[test]
    fn digest_hex_roundtrips() {
        let d = hash(b"roundtrip");
        assert_eq!(Digest::from_hex(&d.to_hex()).unwrap(), d);
        assert_eq!(d.to_hex().len(), 64);
        assert!(d.to_hex().chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit()));
    }

    #[test]
    fn aead_roundtrip_preserves_plaintext() {
        let mut r = rng(1);
        let key = SymmetricKey::generate(&mut r, KeyRole::Data);
        let mut nonces = NonceSeq::new([7u8; 16], "alice");
        let ct = aead_encrypt(&key, nonces.next(), b"column data", b"table-0");
        assert_eq!(aead_decrypt(&key, &ct, b"table-0").unwrap(), b"column data");
    }

    #[test]
    fn aead_rejects_wrong_key_and_wrong_ad() {
        let mut r = rng(2);
        let key = SymmetricKey::generate(&mut r, KeyRole::Data);
        let other = SymmetricKey::generate(&mut r, KeyRole::Data);
        let mut nonces = NonceSeq::new([7u8; 16], "alice");
        let ct = aead_encrypt(&key, nonces.next(), b"payload", b"ctx");
        assert_eq!(aead_decrypt(&other, &ct, b"ctx"), Err(CryptoError::AuthFailure));
        assert_eq!(aead_decrypt(&key, &ct, b"other-ctx"), Err(CryptoError::AuthFailure));
    }

    #[test]
    fn aead_rejects_every_single_byte_flip() {
        let mut r = rng(3);
        let key = SymmetricKey::generate(&mut r, KeyRole::Result);
        let mut nonces = NonceSeq::new([9u8; 16], "enclave");
        let ct = aead_encrypt(&key, nonces.next(), b"short message", b"binding");

        for i in 0..ct.body.len() {
            let mut tampered = ct.clone();
            tampered.body[i] ^= 0x01;
            assert_eq!(
                aead_decrypt(&key, &tampered, b"binding"),
                Err(CryptoError::AuthFailure),
                "body byte {i} flip went unnoticed"
            );
        }
        for i in 0..TAG_LEN {
            let mut tampered = ct.clone();
            tampered.tag[i] ^= 0x01;
            assert_eq!(
                aead_decrypt(&key, &tampered, b"binding"),
                Err(CryptoError::AuthFailure),
                "tag byte {i} flip went unnoticed"
            );
        }
        for i in 0..NONCE_LEN {
            let mut tampered = ct.clone();
            tampered.nonce[i] ^= 0x01;
            assert_eq!(
                aead_decrypt(&key, &tampered, b"binding"),
                Err(CryptoError::AuthFailure),
                "nonce byte {i} flip went unnoticed"
            );
        }
    }

    #[test]
    fn signature_verifies_and_any_message_byte_flip_fails() {
        let mut r = rng(4);
        let sk = SigningKey::generate(&mut r);
        let msg = [0xA5u8, 0x01, 0xFF, 0x42];
        let sig = sk.sign(&msg);
        assert!(verify(&sk.public(), &msg, &sig));

        let other = SigningKey::generate(&mut r);
        assert!(!verify(&other.public(), &msg, &sig));

        for i in 0..msg.len() {
            for bit in 0..8 {
                let mut tampered = msg;
                tampered[i] ^= 1 << bit;
                assert!(
                    !verify(&sk.public(), &tampered, &sig),
                    "byte {i} bit {bit} flip still verified"
                );
            }
        }
    }

    #[test]
    fn malformed_signature_bytes_are_rejected() {
        assert_eq!(
            Signature::from_slice(&[0u8; 63]),
            Err(CryptoError::MalformedSignature)
        );
    }

    #[test]
    fn channel_key_derivation_matches_on_both_sides() {
        let transcript = hash(b"attestation transcript");
        let a = derive_channel_key(b"secret", &transcript);
        let b = derive_channel_key(b"secret", &transcript);
        assert_eq!(a, b);
        assert_eq!(a.role(), KeyRole::Channel);

        let other_secret = derive_channel_key(b"secret2", &transcript);
        let other_transcript = derive_channel_key(b"secret", &hash(b"different"));
        assert_ne!(a, other_secret);
        assert_ne!(a, other_transcript);
    }

    #[test]
    fn key_roles_are_enforced_at_check_sites() {
        let mut r = rng(5);
        let key = SymmetricKey::generate(&mut r, KeyRole::Data);
        assert!(key.require_role(KeyRole::Data).is_ok());
        assert_eq!(
            key.require_role(KeyRole::Channel),
            Err(CryptoError::RoleMismatch {
                expected: KeyRole::Channel,
                actual: KeyRole::Data,
            })
        );
    }

    #[test]
    fn nonce_sequences_differ_across_parties_and_steps() {
        let mut a = NonceSeq::new([1u8; 16], "a");
        let mut b = NonceSeq::new([1u8; 16], "b");
        let a0 = a.next();
        let a1 = a.next();
        assert_ne!(a0, a1);
        assert_ne!(a0, b.next());

        let mut a_again = NonceSeq::new([1u8; 16], "a");
        assert_eq!(a0, a_again.next());
    }

    proptest! {
        #[test]
        fn aead_roundtrip_is_identity(
            seed in 0u64..1000,
            plaintext in proptest::collection::vec(any::<u8>(), 0..512),
            ad in proptest::collection::vec(any::<u8>(), 0..64),
        ) {
            let mut r = rng(seed);
            let key = SymmetricKey::generate(&mut r, KeyRole::Data);
            let mut nonces = NonceSeq::new([3u8; 16], "prop");
            let ct = aead_encrypt(&key, nonces.next(), &plaintext, &ad);
            prop_assert_eq!(aead_decrypt(&key, &ct, &ad).unwrap(), plaintext);
        }

        #[test]
        fn signing_any_message_verifies(seed in 0u64..1000, msg in proptest::collection::vec(any::<u8>(), 0..256)) {
            let mut r = rng(seed);
            let sk = SigningKey::generate(&mut r);
            let sig = sk.sign(&msg);
            prop_assert!(verify(&sk.public(), &msg, &sig));
        }
    }
}

//! Hybrid public-key encryption for mask vectors.
//!
//! A mask is sealed to its destination with an ephemeral X25519 key
//! agreement, HKDF-SHA256 key derivation and ChaCha20-Poly1305. The origin
//! and destination identifiers are bound as associated data, so a ciphertext
//! cannot be replayed under a different pair.
//!
//! Sealed layout: `ephemeral_public (32) || aead_ciphertext (len + 16)`.

use std::collections::BTreeMap;

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use hkdf::Hkdf;
use rand_core::RngCore;
use sha2::Sha256;
use x25519_dalek::{PublicKey, StaticSecret};

use super::SmpcError;
use crate::protocol::ClientId;

pub const PUBLIC_KEY_LEN: usize = 32;
const INFO: &[u8] = b"fedmesh/smpc/mask/v1";

pub struct KeyPair {
    secret: StaticSecret,
    public: PublicKey,
}

impl std::fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KeyPair").field("public", &hex_prefix(self.public.as_bytes())).finish_non_exhaustive()
    }
}

fn hex_prefix(bytes: &[u8]) -> String {
    bytes.iter().take(4).map(|b| format!("{b:02x}")).collect()
}

fn secret_from_rng(rng: &mut impl RngCore) -> StaticSecret {
    let mut bytes = [0u8; 32];
    rng.fill_bytes(&mut bytes);
    StaticSecret::from(bytes)
}

pub fn keygen(rng: &mut impl RngCore) -> KeyPair {
    let secret = secret_from_rng(rng);
    let public = PublicKey::from(&secret);
    KeyPair { secret, public }
}

impl KeyPair {
    pub fn public_bytes(&self) -> [u8; PUBLIC_KEY_LEN] {
        *self.public.as_bytes()
    }

    pub fn private_bytes(&self) -> [u8; 32] {
        self.secret.to_bytes()
    }
}

fn cipher(shared: &[u8; 32], ephemeral: &[u8; 32], recipient: &[u8; 32]) -> ChaCha20Poly1305 {
    let mut salt = [0u8; 64];
    salt[..32].copy_from_slice(ephemeral);
    salt[32..].copy_from_slice(recipient);
    let hk = Hkdf::<Sha256>::new(Some(&salt), shared);
    let mut key = [0u8; 32];
    hk.expand(INFO, &mut key).expect("32 bytes is a valid hkdf output length");
    ChaCha20Poly1305::new(Key::from_slice(&key))
}

fn aad(origin: &ClientId, destination: &ClientId) -> Vec<u8> {
    let mut out = Vec::new();
    for id in [origin, destination] {
        out.extend_from_slice(&(id.as_str().len() as u16).to_be_bytes());
        out.extend_from_slice(id.as_str().as_bytes());
    }
    out
}

/// Seals `plaintext` to `recipient`.
pub fn seal(
    recipient: &[u8; PUBLIC_KEY_LEN],
    origin: &ClientId,
    destination: &ClientId,
    plaintext: &[u8],
    rng: &mut impl RngCore,
) -> Vec<u8> {
    let ephemeral = secret_from_rng(rng);
    let ephemeral_public = PublicKey::from(&ephemeral);
    let shared = ephemeral.diffie_hellman(&PublicKey::from(*recipient));
    // Each key is used for exactly one message, so a fixed nonce is safe.
    let nonce = Nonce::default();
    let ct = cipher(shared.as_bytes(), ephemeral_public.as_bytes(), recipient)
        .encrypt(&nonce, Payload { msg: plaintext, aad: &aad(origin, destination) })
        .expect("chacha20poly1305 encryption is infallible for in-memory buffers");
    let mut out = Vec::with_capacity(32 + ct.len());
    out.extend_from_slice(ephemeral_public.as_bytes());
    out.extend_from_slice(&ct);
    out
}

/// Opens a sealed message; fails on a wrong key or any tampering.
pub fn open(keys: &KeyPair, origin: &ClientId, destination: &ClientId, sealed: &[u8]) -> Result<Vec<u8>, SmpcError> {
    if sealed.len() < 32 + 16 {
        return Err(SmpcError::Decryption(format!("ciphertext of {} bytes is too short", sealed.len())));
    }
    let ephemeral: [u8; 32] = sealed[..32].try_into().unwrap();
    let shared = keys.secret.diffie_hellman(&PublicKey::from(ephemeral));
    cipher(shared.as_bytes(), &ephemeral, keys.public.as_bytes())
        .decrypt(&Nonce::default(), Payload { msg: &sealed[32..], aad: &aad(origin, destination) })
        .map_err(|_| SmpcError::Decryption(format!("mask {origin} -> {destination} failed authentication")))
}

/// Public keys of every client in a session, as collected by the coordinator.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeyDirectory {
    pub keys: BTreeMap<ClientId, [u8; PUBLIC_KEY_LEN]>,
}

impl KeyDirectory {
    /// Checks that every client published a key.
    pub fn complete_for(&self, clients: &[ClientId]) -> Result<(), SmpcError> {
        for c in clients {
            if !self.keys.contains_key(c) {
                return Err(SmpcError::Protocol(format!("missing public key from {c}")));
            }
        }
        Ok(())
    }

    /// The keys of all clients other than `me`, in client-list order.
    pub fn peers_of(&self, me: &ClientId, clients: &[ClientId]) -> Result<Vec<(ClientId, [u8; PUBLIC_KEY_LEN])>, SmpcError> {
        self.complete_for(clients)?;
        Ok(clients.iter().filter(|c| *c != me).map(|c| (c.clone(), self.keys[c])).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn ids() -> (ClientId, ClientId) {
        (ClientId::from("a"), ClientId::from("b"))
    }

    #[test]
    fn seal_open_round_trip() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let b = keygen(&mut rng);
        let (ia, ib) = ids();
        let sealed = seal(&b.public_bytes(), &ia, &ib, b"mask bytes", &mut rng);
        assert_eq!(open(&b, &ia, &ib, &sealed).unwrap(), b"mask bytes");
    }

    #[test]
    fn wrong_key_fails_authentication() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let b = keygen(&mut rng);
        let c = keygen(&mut rng);
        let (ia, ib) = ids();
        let sealed = seal(&b.public_bytes(), &ia, &ib, b"secret", &mut rng);
        assert!(matches!(open(&c, &ia, &ib, &sealed), Err(SmpcError::Decryption(_))));
    }

    #[test]
    fn tampering_and_relabeling_fail() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let b = keygen(&mut rng);
        let (ia, ib) = ids();
        let mut sealed = seal(&b.public_bytes(), &ia, &ib, b"secret", &mut rng);
        assert!(open(&b, &ib, &ia, &sealed).is_err());
        let last = sealed.len() - 1;
        sealed[last] ^= 1;
        assert!(open(&b, &ia, &ib, &sealed).is_err());
        assert!(open(&b, &ia, &ib, &sealed[..10]).is_err());
    }

    #[test]
    fn two_party_directory_has_one_peer_each() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let (ia, ib) = ids();
        let mut dir = KeyDirectory::default();
        dir.keys.insert(ia.clone(), keygen(&mut rng).public_bytes());
        let clients = vec![ia.clone(), ib.clone()];
        assert!(dir.peers_of(&ia, &clients).is_err());
        dir.keys.insert(ib.clone(), keygen(&mut rng).public_bytes());
        assert_eq!(dir.peers_of(&ia, &clients).unwrap().len(), 1);
        assert_eq!(dir.peers_of(&ib, &clients).unwrap()[0].0, ia);
    }
}

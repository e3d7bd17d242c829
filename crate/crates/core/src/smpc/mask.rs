//! Additive masking: `share_i = M_i - sum_j r_{i->j}`, the masks travel
//! encrypted to their destinations, and
//! `sum_i share_i + sum_j sum_i r_{i->j} = sum_i M_i (mod 2^64)`.

use rand_core::RngCore;
use serde::{Deserialize, Serialize};

use super::fixed::FixedPointVector;
use super::keys::{self, KeyPair, PUBLIC_KEY_LEN};
use super::SmpcError;
use crate::protocol::ClientId;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedShare {
    pub owner: ClientId,
    pub data: FixedPointVector,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncryptedMask {
    pub origin: ClientId,
    pub destination: ClientId,
    pub ciphertext: Vec<u8>,
}

fn mask_bytes(mask: &[u64]) -> Vec<u8> {
    mask.iter().flat_map(|v| v.to_be_bytes()).collect()
}

/// Splits `model` into a masked share and one encrypted mask per peer.
///
/// `peers` must hold every other client of a session of `n_clients`. All
/// masks are drawn from `rng` before any encryption randomness.
pub fn mask_model(
    model: &FixedPointVector,
    owner: &ClientId,
    peers: &[(ClientId, [u8; PUBLIC_KEY_LEN])],
    n_clients: usize,
    rng: &mut impl RngCore,
) -> Result<(MaskedShare, Vec<EncryptedMask>), SmpcError> {
    if peers.len() + 1 != n_clients {
        return Err(SmpcError::Protocol(format!(
            "{} peer keys for a session of {n_clients} clients",
            peers.len()
        )));
    }
    if peers.iter().any(|(id, _)| id == owner) {
        return Err(SmpcError::Protocol(format!("{owner} listed as its own peer")));
    }
    let masks: Vec<Vec<u64>> = peers.iter().map(|_| (0..model.dim()).map(|_| rng.next_u64()).collect()).collect();
    let mut data = model.clone();
    for mask in &masks {
        data.wrapping_sub_assign(mask)?;
    }
    let encrypted = peers
        .iter()
        .zip(&masks)
        .map(|((dest, key), mask)| EncryptedMask {
            origin: owner.clone(),
            destination: dest.clone(),
            ciphertext: keys::seal(key, owner, dest, &mask_bytes(mask), rng),
        })
        .collect();
    Ok((MaskedShare { owner: owner.clone(), data }, encrypted))
}

/// Decrypts and sums the masks addressed to `me`. Any failure aborts the
/// whole sum.
pub fn sum_received_masks(
    masks_for_me: &[EncryptedMask],
    me: &ClientId,
    keys: &KeyPair,
    dim: usize,
    scale_exponent: u32,
) -> Result<FixedPointVector, SmpcError> {
    let mut sum = FixedPointVector::zeros(dim, scale_exponent);
    for m in masks_for_me {
        if &m.destination != me {
            return Err(SmpcError::Protocol(format!("mask for {} delivered to {me}", m.destination)));
        }
        let plain = keys::open(keys, &m.origin, &m.destination, &m.ciphertext)?;
        if plain.len() != dim * 8 {
            return Err(SmpcError::DimensionMismatch { expected: dim, actual: plain.len() / 8 });
        }
        let mask: Vec<u64> = plain.chunks_exact(8).map(|c| u64::from_be_bytes(c.try_into().unwrap())).collect();
        sum.wrapping_add_assign(&FixedPointVector { values: mask, scale_exponent })?;
    }
    Ok(sum)
}

/// Recovers `sum_i encode(M_i)` from all shares and all mask sums.
pub fn aggregate(
    shares: &[MaskedShare],
    mask_sums: &[FixedPointVector],
    n_clients: usize,
) -> Result<FixedPointVector, SmpcError> {
    if shares.len() != n_clients || mask_sums.len() != n_clients {
        return Err(SmpcError::Protocol(format!(
            "expected {n_clients} shares and mask sums, got {} and {}",
            shares.len(),
            mask_sums.len()
        )));
    }
    let first = shares.first().ok_or_else(|| SmpcError::Protocol("no shares to aggregate".into()))?;
    let mut total = FixedPointVector::zeros(first.data.dim(), first.data.scale_exponent);
    for s in shares {
        total.wrapping_add_assign(&s.data)?;
    }
    for m in mask_sums {
        total.wrapping_add_assign(m)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::smpc::fixed::{decode_fixed, encode_fixed};
    use crate::smpc::keys::keygen;
    use rand::rngs::mock::StepRng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn fpv(values: Vec<u64>) -> FixedPointVector {
        FixedPointVector { values, scale_exponent: 24 }
    }

    fn id(s: &str) -> ClientId {
        ClientId::from(s)
    }

    #[test]
    fn zero_masks_leave_model_unchanged() {
        let mut rng = StepRng::new(0, 0);
        let peer = keygen(&mut ChaCha20Rng::seed_from_u64(0));
        let model = fpv(vec![11, 22, 33]);
        let (share, masks) = mask_model(&model, &id("a"), &[(id("b"), peer.public_bytes())], 2, &mut rng).unwrap();
        assert_eq!(share.data, model);
        assert_eq!(masks.len(), 1);
    }

    #[test]
    fn hand_arithmetic_seven_minus_two_minus_five() {
        // StepRng(2, 3) yields the masks 2 and 5 first.
        let mut rng = StepRng::new(2, 3);
        let mut krng = ChaCha20Rng::seed_from_u64(9);
        let peers = vec![(id("b"), keygen(&mut krng).public_bytes()), (id("c"), keygen(&mut krng).public_bytes())];
        let (share, masks) = mask_model(&fpv(vec![7]), &id("a"), &peers, 3, &mut rng).unwrap();
        assert_eq!(share.data.values, vec![0]);
        assert_eq!(masks.len(), 2);
        assert_eq!((masks[0].destination.as_str(), masks[1].destination.as_str()), ("b", "c"));
    }

    #[test]
    fn peer_count_must_match_session() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        assert!(mask_model(&fpv(vec![1]), &id("a"), &[], 3, &mut rng).is_err());
        let (share, masks) = mask_model(&fpv(vec![1]), &id("a"), &[], 1, &mut rng).unwrap();
        assert_eq!(share.data.values, vec![1]);
        assert!(masks.is_empty());
    }

    fn sealed_mask(origin: &str, to: &str, key: &KeyPair, value: u64, rng: &mut ChaCha20Rng) -> EncryptedMask {
        EncryptedMask {
            origin: id(origin),
            destination: id(to),
            ciphertext: keys::seal(&key.public_bytes(), &id(origin), &id(to), &value.to_be_bytes(), rng),
        }
    }

    #[test]
    fn single_mask_sums_to_itself_and_sums_wrap() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let me = keygen(&mut rng);
        let one = vec![sealed_mask("a", "me", &me, 42, &mut rng)];
        assert_eq!(sum_received_masks(&one, &id("me"), &me, 1, 24).unwrap().values, vec![42]);
        let two = vec![sealed_mask("a", "me", &me, 3, &mut rng), sealed_mask("b", "me", &me, u64::MAX, &mut rng)];
        assert_eq!(sum_received_masks(&two, &id("me"), &me, 1, 24).unwrap().values, vec![2]);
    }

    #[test]
    fn tampered_mask_aborts_sum() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let me = keygen(&mut rng);
        let mut bad = sealed_mask("a", "me", &me, 3, &mut rng);
        bad.ciphertext[40] ^= 0x80;
        let masks = vec![sealed_mask("b", "me", &me, 1, &mut rng), bad];
        assert!(matches!(sum_received_masks(&masks, &id("me"), &me, 1, 24), Err(SmpcError::Decryption(_))));
    }

    #[test]
    fn solo_aggregate_is_the_model() {
        let share = MaskedShare { owner: id("a"), data: fpv(vec![5, 6]) };
        let total = aggregate(&[share], &[fpv(vec![0, 0])], 1).unwrap();
        assert_eq!(total.values, vec![5, 6]);
    }

    #[test]
    fn missing_mask_sum_aborts() {
        let share = |o: &str| MaskedShare { owner: id(o), data: fpv(vec![1]) };
        assert!(aggregate(&[share("a"), share("b")], &[fpv(vec![0])], 2).is_err());
        assert!(aggregate(&[share("a"), share("b")], &[fpv(vec![0]), fpv(vec![0, 0])], 2).is_err());
    }

    /// Full protocol between in-memory parties.
    fn run_protocol(models: &[Vec<f64>], rng: &mut ChaCha20Rng) -> Vec<f64> {
        let n = models.len();
        let ids: Vec<ClientId> = (0..n).map(|i| id(&format!("p{i}"))).collect();
        let pairs: Vec<KeyPair> = (0..n).map(|_| keygen(rng)).collect();
        let mut shares = Vec::new();
        let mut inbox: Vec<Vec<EncryptedMask>> = vec![Vec::new(); n];
        for i in 0..n {
            let peers: Vec<_> = (0..n).filter(|&j| j != i).map(|j| (ids[j].clone(), pairs[j].public_bytes())).collect();
            let (share, masks) = mask_model(&encode_fixed(&models[i], 24).unwrap(), &ids[i], &peers, n, rng).unwrap();
            shares.push(share);
            for m in masks {
                let j = ids.iter().position(|x| *x == m.destination).unwrap();
                inbox[j].push(m);
            }
        }
        let sums: Vec<_> =
            (0..n).map(|j| sum_received_masks(&inbox[j], &ids[j], &pairs[j], models[0].len(), 24).unwrap()).collect();
        decode_fixed(&aggregate(&shares, &sums, n).unwrap())
    }

    #[test]
    fn two_party_sum_over_random_masks() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let got = run_protocol(&[vec![3.0], vec![5.0]], &mut rng);
            assert_eq!(got, vec![8.0]);
        }
    }
}

//! XOR splitting: `n - 1` random keys plus the message masked by all of them.

use rand::{CryptoRng, Rng, RngCore};

use super::wire::{PlainMessage, ShareMessage};
use super::TransportError;

/// Splits raw bytes into `n` equal-length bodies whose XOR is `data`.
pub fn xor_split<R: RngCore + CryptoRng>(data: &[u8], n: usize, rng: &mut R) -> Vec<Vec<u8>> {
    let mut masked = data.to_vec();
    let mut bodies = Vec::with_capacity(n);
    for _ in 1..n {
        let mut key = vec![0u8; data.len()];
        rng.fill_bytes(&mut key);
        masked.iter_mut().zip(&key).for_each(|(m, k)| *m ^= k);
        bodies.push(key);
    }
    // The masked message goes first so that no fixed position holds it.
    bodies.insert(0, masked);
    bodies
}

/// XOR of equal-length bodies.
pub fn xor_join<'a, I: IntoIterator<Item = &'a [u8]>>(bodies: I) -> Vec<u8> {
    let mut it = bodies.into_iter();
    let mut out = it.next().map(<[u8]>::to_vec).unwrap_or_default();
    for b in it {
        out.iter_mut().zip(b).for_each(|(o, x)| *o ^= x);
    }
    out
}

/// Encrypts `msg` into `n_proxies` shares under one fresh message id.
pub fn split_encrypt<R: RngCore + CryptoRng>(
    msg: &PlainMessage,
    n_proxies: usize,
    rng: &mut R,
) -> Result<Vec<ShareMessage>, TransportError> {
    if !(2..=u8::MAX as usize).contains(&n_proxies) {
        return Err(TransportError::InvalidProxyCount(n_proxies));
    }
    let message_id: u128 = rng.gen();
    Ok(xor_split(&msg.to_bytes(), n_proxies, rng)
        .into_iter()
        .enumerate()
        .map(|(i, body)| ShareMessage {
            message_id,
            share_index: (i + 1) as u8,
            n_proxies: n_proxies as u8,
            body,
        })
        .collect())
}

/// Checks that `shares` form one complete set and returns the XOR of the bodies.
pub fn join_shares(shares: &[ShareMessage]) -> Result<Vec<u8>, TransportError> {
    let first = shares
        .first()
        .ok_or(TransportError::MissingShares { message_id: 0, missing: vec![] })?;
    let n = first.n_proxies as usize;
    let mut seen = vec![false; n + 1];
    for s in shares {
        s.check()?;
        if s.message_id != first.message_id || s.n_proxies != first.n_proxies {
            return Err(TransportError::MalformedShare("shares from different messages".into()));
        }
        if s.body.len() != first.body.len() {
            return Err(TransportError::MalformedShare(format!(
                "body lengths differ ({} vs {})",
                s.body.len(),
                first.body.len()
            )));
        }
        if std::mem::replace(&mut seen[s.share_index as usize], true) {
            return Err(TransportError::MalformedShare(format!(
                "share {} given twice",
                s.share_index
            )));
        }
    }
    let missing: Vec<u8> = (1..=n).filter(|&i| !seen[i]).map(|i| i as u8).collect();
    if !missing.is_empty() {
        return Err(TransportError::MissingShares {
            message_id: first.message_id,
            missing,
        });
    }
    Ok(xor_join(shares.iter().map(|s| s.body.as_slice())))
}

/// Inverse of [`split_encrypt`].
pub fn join_decrypt(shares: &[ShareMessage]) -> Result<PlainMessage, TransportError> {
    PlainMessage::from_bytes(&join_shares(shares)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::query::BitVector;
    use proptest::{prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn msg(n_bits: usize, seed: u64) -> PlainMessage {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let bits: Vec<bool> = (0..n_bits).map(|_| rng.gen()).collect();
        PlainMessage::new(rng.gen(), rng.gen(), rng.gen(), BitVector::from(bits))
    }

    #[test]
    fn two_shares_xor_to_message() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let m = msg(12, 2);
        let shares = split_encrypt(&m, 2, &mut rng).unwrap();
        assert_eq!(xor_join([shares[0].body.as_slice(), shares[1].body.as_slice()]), m.to_bytes());
        assert_ne!(shares[0].body, m.to_bytes());
    }

    #[test]
    fn five_shares_of_zero_payload() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let m = PlainMessage::new(1, 0, 0, BitVector::zeros(16));
        let shares = split_encrypt(&m, 5, &mut rng).unwrap();
        let joined = join_shares(&shares).unwrap();
        assert_eq!(&joined[20..22], &[0, 0]);
        assert_eq!(join_decrypt(&shares).unwrap(), m);
    }

    #[test]
    fn rejects_bad_counts_and_incomplete_sets() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let m = msg(8, 3);
        assert!(matches!(split_encrypt(&m, 1, &mut rng), Err(TransportError::InvalidProxyCount(1))));
        let shares = split_encrypt(&m, 4, &mut rng).unwrap();
        match join_decrypt(&shares[..3]) {
            Err(TransportError::MissingShares { missing, .. }) => assert_eq!(missing, vec![4]),
            other => panic!("{other:?}"),
        }
        let mut short = shares.clone();
        short[1].body.pop();
        assert!(matches!(join_decrypt(&short), Err(TransportError::MalformedShare(_))));
    }

    #[test]
    fn flipped_bit_is_linear_and_detected() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let m = msg(40, 4);
        let mut shares = split_encrypt(&m, 3, &mut rng).unwrap();
        shares[2].body[21] ^= 0x10;
        let joined = join_shares(&shares).unwrap();
        let plain = m.to_bytes();
        let diff: u32 = joined.iter().zip(&plain).map(|(a, b)| (a ^ b).count_ones()).sum();
        assert_eq!(diff, 1);
        assert_eq!(joined[21] ^ plain[21], 0x10);
        assert!(matches!(join_decrypt(&shares), Err(TransportError::CorruptMessage(_))));
    }

    #[test]
    fn single_share_bits_look_uniform() {
        // n = 3, 10^4 messages: every bit position of one share is set about half the time.
        let mut rng = ChaCha20Rng::seed_from_u64(10_000);
        let m = msg(16, 9);
        let len = m.to_bytes().len();
        let mut ones = vec![0u32; len * 8];
        for _ in 0..10_000 {
            let shares = split_encrypt(&m, 3, &mut rng).unwrap();
            for (i, byte) in shares[0].body.iter().enumerate() {
                for b in 0..8 {
                    ones[i * 8 + b] += u32::from(byte >> b & 1);
                }
            }
        }
        // 0.49..0.51 is about 2 sigma wide at 10^4 draws; 4 sigma keeps this stable.
        for (pos, &c) in ones.iter().enumerate() {
            let f = c as f64 / 10_000.0;
            assert!((f - 0.5).abs() < 0.02, "bit {pos}: {f}");
        }
        let mean = ones.iter().map(|&c| c as f64).sum::<f64>() / ones.len() as f64 / 10_000.0;
        assert!((mean - 0.5).abs() < 0.01);
    }

    proptest! {
        #[test]
        fn roundtrip(n_bits in 1usize..=1024, n in 2usize..=8, seed: u64) {
            let m = msg(n_bits, seed);
            let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x5eed);
            let mut shares = split_encrypt(&m, n, &mut rng).unwrap();
            shares.reverse();
            prop_assert_eq!(join_decrypt(&shares).unwrap(), m);
        }
    }
}

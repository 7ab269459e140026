//! Pairs shares arriving from different relays by message id.

use std::collections::{HashMap, VecDeque};
use std::fmt;

use log::{debug, warn};

use crate::transport::{join_decrypt, PlainMessage, RelayedShare, ShareMessage, TransportError};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct JoinMetrics {
    pub joined: u64,
    /// Incomplete share sets that timed out.
    pub expired: u64,
    /// Complete sets whose checksum or layout did not verify.
    pub corrupt: u64,
    /// Repeated shares with identical bodies, ignored.
    pub duplicate: u64,
    /// Messages dropped because one share index arrived with two different bodies.
    pub conflicting: u64,
    /// Shares that failed structural checks.
    pub malformed: u64,
    /// Messages the pipeline could not place (unknown query or stratum, far future).
    pub quarantined: u64,
    /// Messages older than every open window.
    pub late: u64,
}

impl fmt::Display for JoinMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "joined {}", self.joined)?;
        writeln!(f, "expired {}", self.expired)?;
        writeln!(f, "corrupt {}", self.corrupt)?;
        writeln!(f, "duplicate {}", self.duplicate)?;
        writeln!(f, "conflicting {}", self.conflicting)?;
        writeln!(f, "malformed {}", self.malformed)?;
        writeln!(f, "quarantined {}", self.quarantined)?;
        write!(f, "late {}", self.late)
    }
}

#[derive(Debug)]
struct Pending {
    shares: Vec<Option<ShareMessage>>,
    have: usize,
    deadline_ms: u64,
}

/// What happened to a message id that already left the pending set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Settled {
    Joined,
    Dropped,
}

/// Collects share sets and releases each message id exactly once: joined,
/// expired, corrupt or dropped for conflicting duplicates.
#[derive(Debug)]
pub struct JoinBuffer {
    n_proxies: usize,
    timeout_ms: u64,
    pending: HashMap<u128, Pending>,
    /// Recently settled ids, remembered for one timeout so stragglers are
    /// recognised as duplicates rather than starting a new set.
    settled: HashMap<u128, (Settled, u64)>,
    completed: VecDeque<PlainMessage>,
    metrics: JoinMetrics,
}

impl JoinBuffer {
    pub fn new(n_proxies: usize, timeout_ms: u64) -> Self {
        JoinBuffer {
            n_proxies,
            timeout_ms,
            pending: HashMap::new(),
            settled: HashMap::new(),
            completed: VecDeque::new(),
            metrics: JoinMetrics::default(),
        }
    }

    /// Lengthens the join timeout for share sets that arrive from now on.
    pub fn raise_timeout(&mut self, timeout_ms: u64) {
        self.timeout_ms = self.timeout_ms.max(timeout_ms);
    }

    pub fn metrics(&self) -> JoinMetrics {
        self.metrics
    }

    pub fn metrics_mut(&mut self) -> &mut JoinMetrics {
        &mut self.metrics
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    pub fn offer_relayed(&mut self, share: RelayedShare, now_ms: u64) {
        self.offer(share.share, now_ms)
    }

    pub fn offer(&mut self, share: ShareMessage, now_ms: u64) {
        if share.check().is_err() || share.n_proxies as usize != self.n_proxies {
            self.metrics.malformed += 1;
            return;
        }
        let id = share.message_id;
        if let Some((state, _)) = self.settled.get(&id) {
            match state {
                Settled::Joined => self.metrics.duplicate += 1,
                Settled::Dropped => {}
            }
            return;
        }
        let n = self.n_proxies;
        let timeout = self.timeout_ms;
        let entry = self.pending.entry(id).or_insert_with(|| Pending {
            shares: vec![None; n],
            have: 0,
            deadline_ms: now_ms + timeout,
        });
        let slot = &mut entry.shares[share.share_index as usize - 1];
        match slot {
            Some(prev) if prev.body == share.body => {
                self.metrics.duplicate += 1;
                return;
            }
            Some(_) => {
                warn!("message {id:032x}: share {} arrived twice with different bodies; dropping", share.share_index);
                self.pending.remove(&id);
                self.metrics.conflicting += 1;
                self.settled.insert(id, (Settled::Dropped, now_ms + timeout));
                return;
            }
            None => {
                *slot = Some(share);
                entry.have += 1;
            }
        }
        if entry.have < n {
            return;
        }
        let shares: Vec<ShareMessage> = self.pending.remove(&id).unwrap().shares.into_iter().flatten().collect();
        match join_decrypt(&shares) {
            Ok(msg) => {
                self.metrics.joined += 1;
                self.completed.push_back(msg);
                self.settled.insert(id, (Settled::Joined, now_ms + timeout));
            }
            Err(e) => {
                debug!("message {id:032x}: {e}");
                match e {
                    TransportError::CorruptMessage(_) => self.metrics.corrupt += 1,
                    _ => self.metrics.malformed += 1,
                }
                self.settled.insert(id, (Settled::Dropped, now_ms + timeout));
            }
        }
    }

    /// Discards incomplete sets whose deadline has passed.
    pub fn expire(&mut self, now_ms: u64) -> u64 {
        let before = self.pending.len();
        self.pending.retain(|_, p| p.deadline_ms > now_ms);
        let expired = (before - self.pending.len()) as u64;
        self.metrics.expired += expired;
        self.settled.retain(|_, (_, until)| *until > now_ms);
        expired
    }

    pub fn drain_completed(&mut self) -> Vec<PlainMessage> {
        self.completed.drain(..).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::query::BitVector;
    use crate::transport::split_encrypt;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn msg(i: u64) -> PlainMessage {
        PlainMessage::new(1, 0, i, BitVector::from(vec![i % 2 == 0, i % 3 == 0, true]))
    }

    #[test]
    fn any_order_joins_once() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let mut shares = split_encrypt(&msg(5), 3, &mut rng).unwrap();
        shares.shuffle(&mut rng);
        let mut jb = JoinBuffer::new(3, 100);
        for s in shares.clone() {
            jb.offer(s, 0);
        }
        jb.offer(shares[0].clone(), 1);
        assert_eq!(jb.drain_completed(), vec![msg(5)]);
        assert_eq!(jb.metrics().joined, 1);
        assert_eq!(jb.metrics().duplicate, 1);
    }

    #[test]
    fn lost_share_expires() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let shares = split_encrypt(&msg(1), 2, &mut rng).unwrap();
        let mut jb = JoinBuffer::new(2, 100);
        jb.offer(shares[0].clone(), 0);
        assert_eq!(jb.expire(99), 0);
        assert_eq!(jb.expire(100), 1);
        assert!(jb.drain_completed().is_empty());
        assert_eq!(jb.metrics().expired, 1);
    }

    #[test]
    fn corrupt_and_conflicting() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let mut shares = split_encrypt(&msg(2), 2, &mut rng).unwrap();
        shares[1].body[3] ^= 1;
        let mut jb = JoinBuffer::new(2, 100);
        for s in shares {
            jb.offer(s, 0);
        }
        assert_eq!(jb.metrics().corrupt, 1);

        let shares = split_encrypt(&msg(3), 2, &mut rng).unwrap();
        let mut evil = shares[0].clone();
        evil.body[0] ^= 0xFF;
        jb.offer(shares[0].clone(), 0);
        jb.offer(evil, 0);
        jb.offer(shares[1].clone(), 0);
        assert_eq!(jb.metrics().conflicting, 1);
        assert!(jb.drain_completed().is_empty());
    }

    #[test]
    fn ten_thousand_interleaved() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let msgs: Vec<PlainMessage> = (0..10_000).map(msg).collect();
        let mut all: Vec<ShareMessage> = msgs
            .iter()
            .flat_map(|m| split_encrypt(m, 3, &mut rng).unwrap())
            .collect();
        all.shuffle(&mut rng);
        let mut jb = JoinBuffer::new(3, 1000);
        for s in all {
            jb.offer(s, 0);
        }
        let mut out = jb.drain_completed();
        out.sort_by_key(|m| m.timestamp_ms);
        assert_eq!(out.len(), 10_000);
        for (a, b) in out.iter().zip(&msgs) {
            assert_eq!(a.to_bytes(), b.to_bytes());
        }
        assert_eq!(jb.pending_len(), 0);
    }
}

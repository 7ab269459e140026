//! Content-oblivious relay: a bounded FIFO of share frames.

use std::collections::VecDeque;
use std::sync::Mutex;

use super::wire::ShareMessage;
use super::TransportError;

/// A share as the aggregator sees it: the frame and the relay it came
/// through. There is deliberately no field for the sending client.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelayedShare {
    pub relay: String,
    pub share: ShareMessage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelayConfig {
    pub listen: String,
    /// Unused by the pull-based drain protocol; kept for deployment files.
    pub aggregator: Option<String>,
    pub topic: String,
    pub capacity: usize,
}

impl Default for RelayConfig {
    fn default() -> Self {
        RelayConfig {
            listen: "127.0.0.1:7401".into(),
            aggregator: None,
            topic: "answer".into(),
            capacity: 1 << 16,
        }
    }
}

impl RelayConfig {
    /// Parses `key=value` lines (`listen`, `aggregator`, `topic`, `capacity`).
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut cfg = RelayConfig::default();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key=value", no + 1))?;
            let v = v.trim();
            match k.trim() {
                "listen" => cfg.listen = v.into(),
                "aggregator" => cfg.aggregator = Some(v.into()),
                "topic" => cfg.topic = v.into(),
                "capacity" => {
                    cfg.capacity = v
                        .parse()
                        .ok()
                        .filter(|c| *c > 0)
                        .ok_or_else(|| format!("line {}: bad capacity {v:?}", no + 1))?
                }
                other => return Err(format!("line {}: unknown key {other:?}", no + 1)),
            }
        }
        Ok(cfg)
    }
}

/// Topic name for shares with the given 1-based index.
pub fn topic_name(share_index: u8) -> String {
    if share_index <= 1 {
        "answer".into()
    } else {
        format!("key-{share_index}")
    }
}

#[derive(Debug)]
pub struct Relay {
    name: String,
    capacity: usize,
    queue: Mutex<VecDeque<ShareMessage>>,
}

impl Relay {
    pub fn new(name: impl Into<String>, capacity: usize) -> Self {
        Relay {
            name: name.into(),
            capacity: capacity.max(1),
            queue: Mutex::new(VecDeque::new()),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.queue.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Enqueues a share, or rejects it when the buffer is full (retryable)
    /// or the share is malformed.
    pub fn forward(&self, share: ShareMessage) -> Result<(), TransportError> {
        share.check()?;
        let mut q = self.queue.lock().unwrap();
        if q.len() >= self.capacity {
            return Err(TransportError::Backpressure);
        }
        q.push_back(share);
        Ok(())
    }

    /// Removes up to `max` shares in arrival order.
    pub fn drain(&self, max: usize) -> Vec<RelayedShare> {
        let mut q = self.queue.lock().unwrap();
        let k = max.min(q.len());
        q.drain(..k)
            .map(|share| RelayedShare {
                relay: self.name.clone(),
                share,
            })
            .collect()
    }
}

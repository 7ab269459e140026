//! Splitting answers into XOR shares and carrying them through relays.

mod net;
mod relay;
mod split;
mod wire;

use thiserror::Error;

pub use net::{read_frame, write_frame, DrainClient, RelayClient, RelayServer};
pub use relay::{topic_name, Relay, RelayConfig, RelayedShare};
pub use split::{join_decrypt, join_shares, split_encrypt, xor_join, xor_split};
pub use wire::{PlainMessage, ShareMessage, SHARE_HEADER_LEN};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TransportError {
    #[error("need at least 2 proxies (and at most 255), got {0}")]
    InvalidProxyCount(usize),
    #[error("message {message_id:032x} is missing shares {missing:?}")]
    MissingShares { message_id: u128, missing: Vec<u8> },
    #[error("malformed share: {0}")]
    MalformedShare(String),
    #[error("corrupt message: {0}")]
    CorruptMessage(String),
    #[error("relay buffer full, retry later")]
    Backpressure,
    #[error("i/o: {0}")]
    Io(String),
}

impl TransportError {
    pub(crate) fn io(e: std::io::Error) -> Self {
        TransportError::Io(e.to_string())
    }

    /// Whether sending again later may succeed.
    pub fn is_retryable(&self) -> bool {
        matches!(self, TransportError::Backpressure | TransportError::Io(_))
    }
}

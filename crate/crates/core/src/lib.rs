//! Privacy-preserving approximate analytics over client data streams.
//!
//! Clients sample themselves, randomize bucketized answers, and ship them as
//! XOR-split shares through independent relays; the aggregator joins the
//! shares, de-biases the counts and attaches error bounds per window.

pub mod approx;
pub mod privacy;
pub mod query;
pub mod client;
pub mod transport;
pub mod aggregator;
pub mod harness;

//! Leaderless speculative BFT state machine replication with a
//! clock-based best-effort sequencing layer.
//!
//! The cluster runs n = 3f + 2p + 1 replicas: up to f Byzantine, with the
//! extra 2p letting clients commit on a two-message-delay fast path while
//! as many as p replicas have diverged. Proxies stamp client requests with
//! estimated times of arrival derived from one-way delay probes; replicas
//! execute speculatively in ETA order and repair disagreement in the
//! background through checkpoints, alignment, and a PBFT-style repair
//! round.
//!
//! The crate is transport-agnostic: protocol engines ([`replica::Replica`],
//! [`sequencer::Proxy`], [`client::Client`]) consume timestamped events
//! and emit [`node::Action`]s. [`simnet`] hosts whole clusters in a
//! deterministic discrete-event simulation with fault injection; real
//! socket hosting lives in the CLI crate.

pub mod app;
pub mod client;
pub mod config;
pub mod crypto;
pub mod log;
pub mod message;
pub mod node;
pub mod replica;
pub mod sequencer;
pub mod trace;
pub mod types;
pub mod wire;

pub use config::Config;
pub use crypto::{CryptoMode, HashDigest, KeyPair, Keyring, Signature};
pub use message::{Envelope, Message};
pub use node::{Action, CommitPath, Delivery, Outbox, TimerKind};
pub use types::{ClientRequest, Micros, NodeId, StampedRequest};

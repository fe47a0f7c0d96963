//! Bandwidth-aware federated learning testbed.
//!
//! Simulates FedAvg rounds in which every model exchange is shrunk before it
//! hits the wire: global magnitude pruning, 8/4-bit integer quantization, or
//! 1-bit sign quantization, with byte-exact accounting of what each message
//! costs raw and after DEFLATE.
//!
//! Start with the runnable examples:
//!
//! - `cargo run --example train_mlp` - the bare model: init, train, evaluate
//! - `cargo run --example magnitude_pruning` - global magnitude pruning
//! - `cargo run --example qat_mlp` - quantization-aware training at 8/4/1 bits
//! - `cargo run --example dirichlet_partition` - non-IID client splits
//! - `cargo run --example wire_messages` - encoding and decoding model messages
//! - `cargo run --example message_sizes` - size tables for every compression arm
//! - `cargo run --example federated_run` - a full in-process federation
//! - `cargo run --example tcp_federation` - the same federation over TCP
//!
//! The `fsqz` binary wraps the same machinery behind `run`, `sweep`, `sizes`,
//! and `partition-stats` subcommands; see the README.

pub mod cli;
pub mod codec;
pub mod compress;
pub mod data;
pub mod error;
pub mod fl;
pub mod nn;
pub mod tensor;
pub mod transport;

pub use error::{Error, Result};

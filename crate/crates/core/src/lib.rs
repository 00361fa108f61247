//! Deterministic simulator of a brokered data market where usage contracts
//! live on a mock ledger, computation runs inside simulated enclaves, and the
//! result key is released atomically with the owner payouts.

pub mod actors;
pub mod harness;
pub mod metrics;
pub mod contracts;
pub mod crypto;
pub mod dataset;
pub mod ledger;
pub mod network;
pub mod tee;
pub mod types;

pub use types::{AccountId, ContractId, HostId};

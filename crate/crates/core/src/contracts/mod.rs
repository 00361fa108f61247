//! On-chain data-usage contracts.
//!
//! Two variants share one record state machine: [`owner::OwnerContract`] is
//! deployed by a single data owner and sells exactly its own dataset;
//! [`broker::BrokerContract`] is deployed by a broker and aggregates many
//! registered owners behind one contract.
//!
//! A usage record walks `WAIT_COMPUTATION -> WAIT_COMPLETE -> COMPLETE`, with
//! `CANCELED` reachable from either waiting state and terminal states never
//! left. Payment to owners and publication of the result key happen in the
//! same transaction or not at all.

pub mod broker;
pub mod owner;

pub use broker::{BrokerConfig, BrokerContract, Offer};
pub use owner::{OwnerContract, Policy};

use crate::crypto::Digest;
use crate::types::AccountId;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RecordStatus {
    WaitComputation,
    WaitComplete,
    Complete,
    Canceled,
}

impl RecordStatus {
    pub fn is_terminal(&self) -> bool {
        matches!(self, RecordStatus::Complete | RecordStatus::Canceled)
    }
}

impl fmt::Display for RecordStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RecordStatus::WaitComputation => "WAIT_COMPUTATION",
            RecordStatus::WaitComplete => "WAIT_COMPLETE",
            RecordStatus::Complete => "COMPLETE",
            RecordStatus::Canceled => "CANCELED",
        };
        f.write_str(s)
    }
}

/// One accepted usage request. `payouts` is snapshotted when the request is
/// accepted so later registry changes cannot make the contract owe more than
/// it escrowed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageRecord {
    pub idx: u64,
    pub op: Digest,
    pub targets: Vec<String>,
    pub dc: AccountId,
    pub req_time: u64,
    pub status: RecordStatus,
    pub kr_hash: Option<Digest>,
    pub kr: Option<Vec<u8>>,
    pub escrow: u64,
    pub payouts: Vec<(AccountId, u64)>,
}

impl UsageRecord {
    fn dump_into(&self, out: &mut String) {
        use std::fmt::Write;
        let kr_hash = self
            .kr_hash
            .map(|d| d.to_hex())
            .unwrap_or_else(|| "-".into());
        let kr = self
            .kr
            .as_ref()
            .map(|k| hex::encode(k))
            .unwrap_or_else(|| "-".into());
        let _ = writeln!(
            out,
            "record {} status={} dc={} op={} targets={} req_time={} escrow={} kr_hash={} kr={}",
            self.idx,
            self.status,
            self.dc,
            self.op.to_hex(),
            self.targets.join("+"),
            self.req_time,
            self.escrow,
            kr_hash,
            kr,
        );
    }
}

/// Why a call reverted. Rendered in receipts and the finalized log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum RevertReason {
    WrongSender,
    WrongState,
    NotBroker,
    MalformedPolicy,
    Destroyed,
    UnknownRecord,
    NonPayable,
    BadCall,
    InsufficientFunds,
    UnknownTarget,
}

impl fmt::Display for RevertReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RevertReason::WrongSender => "wrong-sender",
            RevertReason::WrongState => "wrong-state",
            RevertReason::NotBroker => "not-broker",
            RevertReason::MalformedPolicy => "malformed-policy",
            RevertReason::Destroyed => "destroyed",
            RevertReason::UnknownRecord => "unknown-record",
            RevertReason::NonPayable => "non-payable",
            RevertReason::BadCall => "bad-call",
            RevertReason::InsufficientFunds => "insufficient-funds",
            RevertReason::UnknownTarget => "unknown-target",
        };
        f.write_str(s)
    }
}

/// Execution context the ledger hands a contract call.
#[derive(Debug, Clone)]
pub struct CallCtx {
    pub sender: AccountId,
    pub value: u64,
    pub now: u64,
}

/// What a successful call did: who gets paid out of value+escrow, what the
/// call returned, and whether the contract self-destructed.
#[derive(Debug, Clone, PartialEq)]
pub struct CallEffects {
    pub credits: Vec<(AccountId, u64)>,
    pub ret: RetValue,
    pub destroy: bool,
}

impl CallEffects {
    pub fn ret(ret: RetValue) -> Self {
        CallEffects {
            credits: vec![],
            ret,
            destroy: false,
        }
    }

    pub fn credits_total(&self) -> u64 {
        self.credits.iter().map(|(_, v)| v).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum RetValue {
    Unit,
    Deployed(crate::types::ContractId),
    Record(u64),
    Refunded,
    NoOp,
    HashMismatch,
}

impl fmt::Display for RetValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RetValue::Unit => f.write_str("ok"),
            RetValue::Deployed(id) => write!(f, "deployed:{id}"),
            RetValue::Record(idx) => write!(f, "record:{idx}"),
            RetValue::Refunded => f.write_str("refunded"),
            RetValue::NoOp => f.write_str("no-op"),
            RetValue::HashMismatch => f.write_str("hash-mismatch"),
        }
    }
}

/// Calls accepted by an owner contract.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "call", rename_all = "kebab-case")]
pub enum OwnerCall {
    Request { op: Digest, data: BTreeSet<String> },
    ComputationComplete { idx: u64, kr_hash: Digest },
    CompleteTransaction { idx: u64, kr: Vec<u8> },
    Cancel { idx: u64 },
    Revoke,
}

impl OwnerCall {
    pub fn function(&self) -> &'static str {
        match self {
            OwnerCall::Request { .. } => "request",
            OwnerCall::ComputationComplete { .. } => "computation-complete",
            OwnerCall::CompleteTransaction { .. } => "complete-transaction",
            OwnerCall::Cancel { .. } => "cancel",
            OwnerCall::Revoke => "revoke",
        }
    }
}

/// Calls accepted by a broker contract.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "call", rename_all = "kebab-case")]
pub enum BrokerCall {
    Register {
        op: Digest,
        dc: AccountId,
        price: u64,
    },
    Confirm {
        owners: Vec<AccountId>,
    },
    Request {
        op: Digest,
        targets: BTreeSet<AccountId>,
    },
    ComputationComplete {
        idx: u64,
        kr_hash: Digest,
    },
    CompleteTransaction {
        idx: u64,
        kr: Vec<u8>,
    },
    Cancel {
        idx: u64,
    },
    Revoke,
}

impl BrokerCall {
    pub fn function(&self) -> &'static str {
        match self {
            BrokerCall::Register { .. } => "register",
            BrokerCall::Confirm { .. } => "confirm",
            BrokerCall::Request { .. } => "request",
            BrokerCall::ComputationComplete { .. } => "computation-complete",
            BrokerCall::CompleteTransaction { .. } => "complete-transaction",
            BrokerCall::Cancel { .. } => "cancel",
            BrokerCall::Revoke => "revoke",
        }
    }
}

/// Shared record transitions used by both contract variants.
pub(crate) mod record_ops {
    use super::*;
    use crate::crypto::hash;

    pub fn computation_complete(
        records: &mut [UsageRecord],
        ctx: &CallCtx,
        idx: u64,
        kr_hash: Digest,
    ) -> Result<CallEffects, RevertReason> {
        let rec = records
            .get_mut(idx as usize)
            .ok_or(RevertReason::UnknownRecord)?;
        if ctx.sender != rec.dc {
            return Err(RevertReason::WrongSender);
        }
        if rec.status != RecordStatus::WaitComputation {
            return Err(RevertReason::WrongState);
        }
        rec.kr_hash = Some(kr_hash);
        rec.status = RecordStatus::WaitComplete;
        Ok(CallEffects::ret(RetValue::Unit))
    }

    pub fn complete_transaction(
        records: &mut [UsageRecord],
        authorized: &AccountId,
        ctx: &CallCtx,
        idx: u64,
        kr: Vec<u8>,
        residual_to_dc: bool,
    ) -> Result<CallEffects, RevertReason> {
        if ctx.sender != *authorized {
            return Err(RevertReason::WrongSender);
        }
        let rec = records
            .get_mut(idx as usize)
            .ok_or(RevertReason::UnknownRecord)?;
        if rec.status != RecordStatus::WaitComplete {
            return Err(RevertReason::WrongState);
        }
        let committed = rec.kr_hash.expect("WAIT_COMPLETE implies kr_hash set");
        if hash(&kr) != committed {
            // Wrong key: the transaction lands but releases nothing.
            return Ok(CallEffects::ret(RetValue::HashMismatch));
        }
        let mut credits = rec.payouts.clone();
        let owed: u64 = credits.iter().map(|(_, v)| v).sum();
        debug_assert!(owed <= rec.escrow, "payout snapshot exceeds escrow");
        if residual_to_dc {
            let residual = rec.escrow - owed;
            if residual > 0 {
                credits.push((rec.dc.clone(), residual));
            }
        }
        rec.kr = Some(kr);
        rec.status = RecordStatus::Complete;
        rec.escrow = 0;
        Ok(CallEffects {
            credits,
            ret: RetValue::Unit,
            destroy: false,
        })
    }

    pub fn cancel(
        records: &mut [UsageRecord],
        ctx: &CallCtx,
        idx: u64,
        timeout_ms: u64,
    ) -> Result<CallEffects, RevertReason> {
        let rec = records
            .get_mut(idx as usize)
            .ok_or(RevertReason::UnknownRecord)?;
        if ctx.sender != rec.dc {
            return Err(RevertReason::WrongSender);
        }
        if rec.status.is_terminal() {
            return Err(RevertReason::WrongState);
        }
        // Strictly greater: at req_time + timeout the window is still open.
        if ctx.now.saturating_sub(rec.req_time) > timeout_ms {
            let refund = rec.escrow;
            rec.escrow = 0;
            rec.status = RecordStatus::Canceled;
            Ok(CallEffects {
                credits: vec![(rec.dc.clone(), refund)],
                ret: RetValue::Unit,
                destroy: false,
            })
        } else {
            Ok(CallEffects::ret(RetValue::NoOp))
        }
    }

    /// Self-destruct: refund every open escrow to its consumer, cancel the
    /// records, and mark the contract destroyed.
    pub fn revoke(records: &mut [UsageRecord]) -> CallEffects {
        let mut credits = Vec::new();
        for rec in records.iter_mut() {
            if !rec.status.is_terminal() {
                if rec.escrow > 0 {
                    credits.push((rec.dc.clone(), rec.escrow));
                }
                rec.escrow = 0;
                rec.status = RecordStatus::Canceled;
            }
        }
        CallEffects {
            credits,
            ret: RetValue::Unit,
            destroy: true,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::hash;

    #[test]
    fn call_args_roundtrip_through_json() {
        let call = OwnerCall::Request {
            op: hash(b"op"),
            data: ["t0".to_string(), "t1".to_string()].into_iter().collect(),
        };
        let bytes = serde_json::to_vec(&call).unwrap();
        let parsed: OwnerCall = serde_json::from_slice(&bytes).unwrap();
        assert_eq!(parsed, call);

        let call = BrokerCall::CompleteTransaction {
            idx: 3,
            kr: vec![1, 2, 3],
        };
        let bytes = serde_json::to_vec(&call).unwrap();
        let parsed: BrokerCall = serde_json::from_slice(&bytes).unwrap();
        assert_eq!(parsed, call);
    }

    #[test]
    fn terminal_states_are_terminal() {
        assert!(!RecordStatus::WaitComputation.is_terminal());
        assert!(!RecordStatus::WaitComplete.is_terminal());
        assert!(RecordStatus::Complete.is_terminal());
        assert!(RecordStatus::Canceled.is_terminal());
    }
}

//! Contract a single data owner deploys to sell usage of one dataset.
//!
//! The policy fixes what may be computed (an enclave measurement), by whom,
//! over which tables, at what minimum price, and how long a consumer must
//! wait before reclaiming an unserved deposit.

use super::record_ops;
use super::{CallCtx, CallEffects, OwnerCall, RecordStatus, RetValue, RevertReason, UsageRecord};
use crate::crypto::Digest;
use crate::types::AccountId;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    /// Descriptors of the tables this contract covers. Must be non-empty.
    pub dataset: BTreeSet<String>,
    /// Minimum deposit in currency units (1 unit = 1e-6 ether equivalent).
    pub price: u64,
    /// Measurement of the only program allowed to touch the data.
    pub operation: Digest,
    /// Accounts allowed to request usage.
    pub consumers: BTreeSet<AccountId>,
    /// Cancel becomes effective strictly after this many ms from request.
    pub request_timeout_ms: u64,
}

impl Policy {
    fn validate(&self) -> Result<(), RevertReason> {
        if self.dataset.is_empty() {
            return Err(RevertReason::MalformedPolicy);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OwnerContract {
    pub owner: AccountId,
    pub policy: Policy,
    pub records: Vec<UsageRecord>,
}

impl OwnerContract {
    pub fn deploy(owner: AccountId, policy: Policy) -> Result<Self, RevertReason> {
        policy.validate()?;
        Ok(OwnerContract {
            owner,
            policy,
            records: Vec::new(),
        })
    }

    pub fn escrowed(&self) -> u64 {
        self.records.iter().map(|r| r.escrow).sum()
    }

    pub fn record(&self, idx: u64) -> Option<&UsageRecord> {
        self.records.get(idx as usize)
    }

    pub fn handle(&mut self, ctx: &CallCtx, call: OwnerCall) -> Result<CallEffects, RevertReason> {
        if ctx.value > 0 && !matches!(call, OwnerCall::Request { .. }) {
            return Err(RevertReason::NonPayable);
        }
        match call {
            OwnerCall::Request { op, data } => Ok(self.request(ctx, op, data)),
            OwnerCall::ComputationComplete { idx, kr_hash } => {
                record_ops::computation_complete(&mut self.records, ctx, idx, kr_hash)
            }
            OwnerCall::CompleteTransaction { idx, kr } => record_ops::complete_transaction(
                &mut self.records,
                &self.owner,
                ctx,
                idx,
                kr,
                false,
            ),
            OwnerCall::Cancel { idx } => {
                record_ops::cancel(&mut self.records, ctx, idx, self.policy.request_timeout_ms)
            }
            OwnerCall::Revoke => {
                if ctx.sender != self.owner {
                    return Err(RevertReason::WrongSender);
                }
                Ok(record_ops::revoke(&mut self.records))
            }
        }
    }

    /// Admission check from the policy. Any miss refunds the deposit instead
    /// of opening a record; the whole deposit is escrowed on success and paid
    /// to the owner at completion.
    fn request(&mut self, ctx: &CallCtx, op: Digest, data: BTreeSet<String>) -> CallEffects {
        let admitted = op == self.policy.operation
            && self.policy.consumers.contains(&ctx.sender)
            && data.is_subset(&self.policy.dataset)
            && ctx.value >= self.policy.price;
        if !admitted {
            return CallEffects {
                credits: vec![(ctx.sender.clone(), ctx.value)],
                ret: RetValue::Refunded,
                destroy: false,
            };
        }
        let idx = self.records.len() as u64;
        self.records.push(UsageRecord {
            idx,
            op,
            targets: data.into_iter().collect(),
            dc: ctx.sender.clone(),
            req_time: ctx.now,
            status: RecordStatus::WaitComputation,
            kr_hash: None,
            kr: None,
            escrow: ctx.value,
            payouts: vec![(self.owner.clone(), ctx.value)],
        });
        CallEffects::ret(RetValue::Record(idx))
    }

    pub fn dump(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "owner-contract owner={} price={} timeout_ms={} op={}",
            self.owner,
            self.policy.price,
            self.policy.request_timeout_ms,
            self.policy.operation.to_hex(),
        );
        let dataset: Vec<&str> = self.policy.dataset.iter().map(String::as_str).collect();
        let consumers: Vec<&str> = self.policy.consumers.iter().map(|a| a.as_str()).collect();
        let _ = writeln!(out, "dataset {}", dataset.join("+"));
        let _ = writeln!(out, "consumers {}", consumers.join("+"));
        let _ = writeln!(out, "escrow {}", self.escrowed());
        for rec in &self.records {
            rec.dump_into(&mut out);
        }
        out
    }
}

//! Contract a data broker deploys to aggregate many owners behind one
//! market. Owners register offers, the broker confirms the ones it has
//! onboarded, and confirmed offers form the per-operation data source a
//! consumer buys against with a single request.

use super::record_ops;
use super::{BrokerCall, CallCtx, CallEffects, RecordStatus, RetValue, RevertReason, UsageRecord};
use crate::crypto::Digest;
use crate::types::AccountId;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrokerConfig {
    /// Measurements of the programs this broker serves.
    pub operations: BTreeSet<Digest>,
    /// Cancel window shared by every record in this contract.
    pub request_timeout_ms: u64,
}

/// One owner's registered terms for one operation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Offer {
    pub dc: AccountId,
    pub price: u64,
}

/// Confirmed offers for one operation. Derived views (price sum, allowed
/// consumers) are computed on demand so there is nothing to keep in sync.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DataSource {
    pub confirmed: BTreeMap<AccountId, Offer>,
}

impl DataSource {
    pub fn total_price(&self) -> u64 {
        self.confirmed.values().map(|o| o.price).sum()
    }

    pub fn allows_consumer(&self, a: &AccountId) -> bool {
        self.confirmed.values().any(|o| o.dc == *a)
    }

    pub fn owners(&self) -> impl Iterator<Item = &AccountId> {
        self.confirmed.keys()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BrokerContract {
    pub broker: AccountId,
    pub config: BrokerConfig,
    /// Open registrations, keyed by (owner, operation). Re-registering
    /// overwrites; nothing here is sellable until the broker confirms it.
    pub registry: BTreeMap<(AccountId, Digest), Offer>,
    pub sources: BTreeMap<Digest, DataSource>,
    pub records: Vec<UsageRecord>,
}

impl BrokerContract {
    pub fn deploy(broker: AccountId, config: BrokerConfig) -> Result<Self, RevertReason> {
        if config.operations.is_empty() {
            return Err(RevertReason::MalformedPolicy);
        }
        Ok(BrokerContract {
            broker,
            config,
            registry: BTreeMap::new(),
            sources: BTreeMap::new(),
            records: Vec::new(),
        })
    }

    pub fn escrowed(&self) -> u64 {
        self.records.iter().map(|r| r.escrow).sum()
    }

    pub fn record(&self, idx: u64) -> Option<&UsageRecord> {
        self.records.get(idx as usize)
    }

    pub fn source(&self, op: &Digest) -> Option<&DataSource> {
        self.sources.get(op)
    }

    pub fn handle(&mut self, ctx: &CallCtx, call: BrokerCall) -> Result<CallEffects, RevertReason> {
        if ctx.value > 0 && !matches!(call, BrokerCall::Request { .. }) {
            return Err(RevertReason::NonPayable);
        }
        match call {
            BrokerCall::Register { op, dc, price } => {
                self.registry
                    .insert((ctx.sender.clone(), op), Offer { dc, price });
                Ok(CallEffects::ret(RetValue::Unit))
            }
            BrokerCall::Confirm { owners } => self.confirm(ctx, owners),
            BrokerCall::Request { op, targets } => Ok(self.request(ctx, op, targets)),
            BrokerCall::ComputationComplete { idx, kr_hash } => {
                record_ops::computation_complete(&mut self.records, ctx, idx, kr_hash)
            }
            BrokerCall::CompleteTransaction { idx, kr } => record_ops::complete_transaction(
                &mut self.records,
                &self.broker,
                ctx,
                idx,
                kr,
                true,
            ),
            BrokerCall::Cancel { idx } => {
                record_ops::cancel(&mut self.records, ctx, idx, self.config.request_timeout_ms)
            }
            BrokerCall::Revoke => {
                if ctx.sender != self.broker {
                    return Err(RevertReason::WrongSender);
                }
                Ok(record_ops::revoke(&mut self.records))
            }
        }
    }

    /// Promote registrations to confirmed offers. Idempotent per owner: a
    /// re-confirm replaces the offer with whatever is registered now.
    fn confirm(
        &mut self,
        ctx: &CallCtx,
        owners: Vec<AccountId>,
    ) -> Result<CallEffects, RevertReason> {
        if ctx.sender != self.broker {
            return Err(RevertReason::NotBroker);
        }
        for owner in owners {
            for op in self.config.operations.clone() {
                if let Some(offer) = self.registry.get(&(owner.clone(), op)) {
                    self.sources
                        .entry(op)
                        .or_default()
                        .confirmed
                        .insert(owner.clone(), offer.clone());
                }
            }
        }
        Ok(CallEffects::ret(RetValue::Unit))
    }

    /// Admission against the confirmed source for `op`. The payout snapshot
    /// taken here is what completion will pay, no matter how the registry
    /// changes in between; anything above it returns to the consumer.
    fn request(&mut self, ctx: &CallCtx, op: Digest, targets: BTreeSet<AccountId>) -> CallEffects {
        let refund = CallEffects {
            credits: vec![(ctx.sender.clone(), ctx.value)],
            ret: RetValue::Refunded,
            destroy: false,
        };
        if !self.config.operations.contains(&op) {
            return refund;
        }
        let Some(source) = self.sources.get(&op) else {
            return refund;
        };
        let admitted = source.allows_consumer(&ctx.sender)
            && targets.iter().all(|t| source.confirmed.contains_key(t))
            && ctx.value >= source.total_price();
        if !admitted {
            return refund;
        }
        let payouts: Vec<(AccountId, u64)> = source
            .confirmed
            .iter()
            .map(|(owner, offer)| (owner.clone(), offer.price))
            .collect();
        let idx = self.records.len() as u64;
        self.records.push(UsageRecord {
            idx,
            op,
            targets: targets.into_iter().map(|a| a.0).collect(),
            dc: ctx.sender.clone(),
            req_time: ctx.now,
            status: RecordStatus::WaitComputation,
            kr_hash: None,
            kr: None,
            escrow: ctx.value,
            payouts,
        });
        CallEffects::ret(RetValue::Record(idx))
    }

    pub fn dump(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        let ops: Vec<String> = self.config.operations.iter().map(|d| d.to_hex()).collect();
        let _ = writeln!(
            out,
            "broker-contract broker={} timeout_ms={} ops={}",
            self.broker,
            self.config.request_timeout_ms,
            ops.join("+"),
        );
        for ((owner, op), offer) in &self.registry {
            let _ = writeln!(
                out,
                "registered owner={} op={} dc={} price={}",
                owner,
                op.short(),
                offer.dc,
                offer.price,
            );
        }
        for (op, source) in &self.sources {
            for (owner, offer) in &source.confirmed {
                let _ = writeln!(
                    out,
                    "confirmed op={} owner={} dc={} price={}",
                    op.short(),
                    owner,
                    offer.dc,
                    offer.price,
                );
            }
        }
        let _ = writeln!(out, "escrow {}", self.escrowed());
        for rec in &self.records {
            rec.dump_into(&mut out);
        }
        out
    }
}

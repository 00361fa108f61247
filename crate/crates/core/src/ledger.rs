//! Mock ledger: accounts, signed transactions, a pending pool with a
//! finalization window, and hosted contracts.
//!
//! The chain is the trusted substrate of the simulation. Submission checks
//! signature, nonce, and funds; execution happens when the simulated clock
//! passes each transaction's finalization time, in (finalize_at, submission
//! seq) order, so runs with the same inputs finalize identically. Currency is
//! a u64 count of 1e-6 ether units: 0.01 ether = 10000.

use crate::contracts::{
    BrokerCall, BrokerConfig, BrokerContract, CallCtx, CallEffects, OwnerCall, OwnerContract,
    Policy, RetValue, RevertReason,
};
use crate::crypto::{hash_parts, verify, PublicKey, Signature, SigningKey};
use crate::types::{AccountId, ContractId};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use thiserror::Error;

pub const DEFAULT_FINALIZATION_DELAY_MS: u64 = 15_000;
pub const DEFAULT_CONGESTION_PENALTY_MS: u64 = 0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerConfig {
    /// Base delay between submission and finalization.
    pub finalization_delay_ms: u64,
    /// Extra delay per transaction already pending at submission.
    pub congestion_penalty_ms: u64,
}

impl Default for LedgerConfig {
    fn default() -> Self {
        LedgerConfig {
            finalization_delay_ms: DEFAULT_FINALIZATION_DELAY_MS,
            congestion_penalty_ms: DEFAULT_CONGESTION_PENALTY_MS,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SubmitError {
    #[error("unknown account {0}")]
    UnknownAccount(AccountId),
    #[error("bad signature")]
    BadSignature,
    #[error("bad nonce: expected {expected}, got {got}")]
    BadNonce { expected: u64, got: u64 },
    #[error("insufficient funds: balance {balance}, value {value}")]
    InsufficientFunds { balance: u64, value: u64 },
    #[error("genesis is closed")]
    GenesisClosed,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LedgerError {
    #[error("unknown account {0}")]
    UnknownAccount(AccountId),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TxTarget {
    Account(AccountId),
    Contract(ContractId),
    Deploy,
}

impl fmt::Display for TxTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TxTarget::Account(a) => f.write_str(a.as_str()),
            TxTarget::Contract(c) => f.write_str(c.as_str()),
            TxTarget::Deploy => f.write_str("deploy"),
        }
    }
}

/// Constructor payload for a deploy transaction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DeployArgs {
    Owner(Policy),
    Broker(BrokerConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Call {
    pub function: String,
    #[serde(with = "crate::crypto::hexfmt::vec")]
    pub args: Vec<u8>,
}

impl Call {
    pub fn transfer() -> Self {
        Call {
            function: "transfer".into(),
            args: vec![],
        }
    }

    pub fn deploy(args: &DeployArgs) -> Self {
        Call {
            function: "deploy".into(),
            args: serde_json::to_vec(args).expect("deploy args serialize"),
        }
    }

    pub fn owner(call: &OwnerCall) -> Self {
        Call {
            function: call.function().into(),
            args: serde_json::to_vec(call).expect("owner call serialize"),
        }
    }

    pub fn broker(call: &BrokerCall) -> Self {
        Call {
            function: call.function().into(),
            args: serde_json::to_vec(call).expect("broker call serialize"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignedTransaction {
    pub sender: AccountId,
    pub target: TxTarget,
    pub call: Call,
    pub value: u64,
    pub nonce: u64,
    pub signature: Signature,
}

impl SignedTransaction {
    pub fn build(
        sender: AccountId,
        target: TxTarget,
        call: Call,
        value: u64,
        nonce: u64,
        key: &SigningKey,
    ) -> Self {
        let payload = Self::signing_bytes(&sender, &target, &call, value, nonce);
        let signature = key.sign(&payload);
        SignedTransaction {
            sender,
            target,
            call,
            value,
            nonce,
            signature,
        }
    }

    fn signing_bytes(
        sender: &AccountId,
        target: &TxTarget,
        call: &Call,
        value: u64,
        nonce: u64,
    ) -> Vec<u8> {
        let target_repr = match target {
            TxTarget::Account(a) => format!("account:{a}"),
            TxTarget::Contract(c) => format!("contract:{c}"),
            TxTarget::Deploy => "deploy".to_string(),
        };
        hash_parts(&[
            b"tx",
            sender.as_str().as_bytes(),
            target_repr.as_bytes(),
            call.function.as_bytes(),
            &call.args,
            &value.to_be_bytes(),
            &nonce.to_be_bytes(),
        ])
        .as_bytes()
        .to_vec()
    }

    pub fn verify_signature(&self, pk: &PublicKey) -> bool {
        let payload =
            Self::signing_bytes(&self.sender, &self.target, &self.call, self.value, self.nonce);
        verify(pk, &payload, &self.signature)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TxStatus {
    Ok,
    Reverted(RevertReason),
}

impl fmt::Display for TxStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TxStatus::Ok => f.write_str("ok"),
            TxStatus::Reverted(r) => write!(f, "reverted:{r}"),
        }
    }
}

/// Finalized transaction outcome. `credits` lists every account paid by this
/// transaction (refunds, payouts, plain transfers); on a contract call the
/// attached value minus credits stays escrowed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Receipt {
    pub seq: u64,
    pub submitted_at: u64,
    pub finalized_at: u64,
    pub sender: AccountId,
    pub target: String,
    pub function: String,
    /// Call payload as submitted. Chain data is public, so readers decode
    /// prices, hashes, and revealed keys from here.
    #[serde(with = "crate::crypto::hexfmt::vec")]
    pub args: Vec<u8>,
    pub value: u64,
    pub status: TxStatus,
    pub ret: RetValue,
    pub credits: Vec<(AccountId, u64)>,
    pub record_idx: Option<u64>,
}

/// Submission acknowledgement: where in the queue the tx sits and when it
/// will finalize.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PendingHandle {
    pub seq: u64,
    pub finalize_at: u64,
}

#[derive(Debug, Clone)]
struct PendingTx {
    tx: SignedTransaction,
    seq: u64,
    submitted_at: u64,
    finalize_at: u64,
}

#[derive(Debug, Clone)]
pub enum ContractKind {
    Owner(OwnerContract),
    Broker(BrokerContract),
}

#[derive(Debug, Clone)]
pub struct ContractSlot {
    pub id: ContractId,
    pub creator: AccountId,
    pub destroyed: bool,
    pub kind: ContractKind,
}

impl ContractSlot {
    pub fn escrowed(&self) -> u64 {
        match &self.kind {
            ContractKind::Owner(c) => c.escrowed(),
            ContractKind::Broker(c) => c.escrowed(),
        }
    }

    pub fn owner_view(&self) -> Option<&OwnerContract> {
        match &self.kind {
            ContractKind::Owner(c) => Some(c),
            _ => None,
        }
    }

    pub fn broker_view(&self) -> Option<&BrokerContract> {
        match &self.kind {
            ContractKind::Broker(c) => Some(c),
            _ => None,
        }
    }

    /// Structured text snapshot for transcript diffs.
    pub fn dump(&self) -> String {
        let body = match &self.kind {
            ContractKind::Owner(c) => c.dump(),
            ContractKind::Broker(c) => c.dump(),
        };
        format!(
            "contract {} creator={} destroyed={}\n{}",
            self.id, self.creator, self.destroyed, body
        )
    }

    fn call(
        &mut self,
        ctx: &CallCtx,
        call: &Call,
    ) -> Result<(CallEffects, Option<u64>), RevertReason> {
        if self.destroyed {
            return Err(RevertReason::Destroyed);
        }
        match &mut self.kind {
            ContractKind::Owner(c) => {
                let parsed: OwnerCall =
                    serde_json::from_slice(&call.args).map_err(|_| RevertReason::BadCall)?;
                if parsed.function() != call.function {
                    return Err(RevertReason::BadCall);
                }
                let idx = match &parsed {
                    OwnerCall::ComputationComplete { idx, .. }
                    | OwnerCall::CompleteTransaction { idx, .. }
                    | OwnerCall::Cancel { idx } => Some(*idx),
                    _ => None,
                };
                Ok((c.handle(ctx, parsed)?, idx))
            }
            ContractKind::Broker(c) => {
                let parsed: BrokerCall =
                    serde_json::from_slice(&call.args).map_err(|_| RevertReason::BadCall)?;
                if parsed.function() != call.function {
                    return Err(RevertReason::BadCall);
                }
                let idx = match &parsed {
                    BrokerCall::ComputationComplete { idx, .. }
                    | BrokerCall::CompleteTransaction { idx, .. }
                    | BrokerCall::Cancel { idx } => Some(*idx),
                    _ => None,
                };
                Ok((c.handle(ctx, parsed)?, idx))
            }
        }
    }
}

#[derive(Debug, Clone)]
struct Account {
    balance: u64,
    pubkey: PublicKey,
}

#[derive(Debug, Clone)]
pub struct Ledger {
    config: LedgerConfig,
    clock: u64,
    accounts: BTreeMap<AccountId, Account>,
    next_nonce: BTreeMap<AccountId, u64>,
    pending: Vec<PendingTx>,
    receipts: Vec<Receipt>,
    contracts: BTreeMap<ContractId, ContractSlot>,
    next_seq: u64,
    next_contract: u64,
    genesis_total: u64,
    genesis_closed: bool,
}

impl Ledger {
    pub fn new(config: LedgerConfig) -> Self {
        Ledger {
            config,
            clock: 0,
            accounts: BTreeMap::new(),
            next_nonce: BTreeMap::new(),
            pending: Vec::new(),
            receipts: Vec::new(),
            contracts: BTreeMap::new(),
            next_seq: 0,
            next_contract: 0,
            genesis_total: 0,
            genesis_closed: false,
        }
    }

    /// Mint an account with an opening balance. Only valid before the first
    /// submission; after that the supply is fixed.
    pub fn genesis_account(
        &mut self,
        id: AccountId,
        balance: u64,
        pubkey: PublicKey,
    ) -> Result<(), SubmitError> {
        if self.genesis_closed {
            return Err(SubmitError::GenesisClosed);
        }
        self.genesis_total += balance;
        self.accounts.insert(id.clone(), Account { balance, pubkey });
        self.next_nonce.insert(id, 0);
        Ok(())
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn balance(&self, id: &AccountId) -> Result<u64, LedgerError> {
        self.accounts
            .get(id)
            .map(|a| a.balance)
            .ok_or_else(|| LedgerError::UnknownAccount(id.clone()))
    }

    pub fn next_nonce(&self, id: &AccountId) -> u64 {
        self.next_nonce.get(id).copied().unwrap_or(0)
    }

    pub fn contract(&self, id: &ContractId) -> Option<&ContractSlot> {
        self.contracts.get(id)
    }

    pub fn contracts(&self) -> impl Iterator<Item = &ContractSlot> {
        self.contracts.values()
    }

    pub fn receipts(&self) -> &[Receipt] {
        &self.receipts
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    pub fn genesis_total(&self) -> u64 {
        self.genesis_total
    }

    /// Circulating supply: balances plus everything escrowed in contracts.
    /// Always equal to the genesis total.
    pub fn total_supply(&self) -> u64 {
        let balances: u64 = self.accounts.values().map(|a| a.balance).sum();
        let escrows: u64 = self.contracts.values().map(|c| c.escrowed()).sum();
        balances + escrows
    }

    /// Admission checks happen here; execution waits for the finalization
    /// window. The nonce is consumed on admission, so a replay of the same
    /// signed bytes is rejected immediately.
    pub fn submit_tx(&mut self, tx: SignedTransaction) -> Result<PendingHandle, SubmitError> {
        self.genesis_closed = true;
        let account = self
            .accounts
            .get(&tx.sender)
            .ok_or_else(|| SubmitError::UnknownAccount(tx.sender.clone()))?;
        if !tx.verify_signature(&account.pubkey) {
            return Err(SubmitError::BadSignature);
        }
        let expected = self.next_nonce(&tx.sender);
        if tx.nonce != expected {
            return Err(SubmitError::BadNonce {
                expected,
                got: tx.nonce,
            });
        }
        if account.balance < tx.value {
            return Err(SubmitError::InsufficientFunds {
                balance: account.balance,
                value: tx.value,
            });
        }
        let pending_before = self.pending.len() as u64;
        let finalize_at = self.clock
            + self.config.finalization_delay_ms
            + self.config.congestion_penalty_ms * pending_before;
        let seq = self.next_seq;
        self.next_seq += 1;
        self.next_nonce.insert(tx.sender.clone(), expected + 1);
        self.pending.push(PendingTx {
            tx,
            seq,
            submitted_at: self.clock,
            finalize_at,
        });
        Ok(PendingHandle { seq, finalize_at })
    }

    /// Move the clock forward and execute everything whose window has
    /// passed. Returns the receipts finalized by this step, in order.
    pub fn advance(&mut self, dt: u64) -> Vec<Receipt> {
        self.clock += dt;
        let mut due: Vec<PendingTx> = Vec::new();
        let mut remaining: Vec<PendingTx> = Vec::new();
        for p in self.pending.drain(..) {
            if p.finalize_at <= self.clock {
                due.push(p);
            } else {
                remaining.push(p);
            }
        }
        self.pending = remaining;
        due.sort_by_key(|p| (p.finalize_at, p.seq));

        let mut new_receipts = Vec::with_capacity(due.len());
        for p in due {
            let receipt = self.execute(p);
            self.receipts.push(receipt.clone());
            new_receipts.push(receipt);
        }
        debug_assert_eq!(
            self.total_supply(),
            self.genesis_total,
            "supply drifted from genesis"
        );
        new_receipts
    }

    fn execute(&mut self, p: PendingTx) -> Receipt {
        let PendingTx {
            tx,
            seq,
            submitted_at,
            finalize_at,
        } = p;
        let mut receipt = Receipt {
            seq,
            submitted_at,
            finalized_at: finalize_at,
            sender: tx.sender.clone(),
            target: tx.target.to_string(),
            function: tx.call.function.clone(),
            args: tx.call.args.clone(),
            value: tx.value,
            status: TxStatus::Ok,
            ret: RetValue::Unit,
            credits: vec![],
            record_idx: None,
        };

        // Funds may have moved since admission; re-check before debiting.
        let balance = self.accounts[&tx.sender].balance;
        if balance < tx.value {
            receipt.status = TxStatus::Reverted(RevertReason::InsufficientFunds);
            return receipt;
        }

        let outcome: Result<(CallEffects, Option<u64>), RevertReason> = match &tx.target {
            TxTarget::Account(to) => {
                if self.accounts.contains_key(to) {
                    Ok((
                        CallEffects {
                            credits: vec![(to.clone(), tx.value)],
                            ret: RetValue::Unit,
                            destroy: false,
                        },
                        None,
                    ))
                } else {
                    Err(RevertReason::UnknownTarget)
                }
            }
            TxTarget::Deploy => self.deploy(&tx).map(|fx| (fx, None)),
            TxTarget::Contract(id) => {
                let ctx = CallCtx {
                    sender: tx.sender.clone(),
                    value: tx.value,
                    now: finalize_at,
                };
                match self.contracts.get_mut(id) {
                    Some(slot) => {
                        let escrow_before = slot.escrowed();
                        let result = slot.call(&ctx, &tx.call);
                        if let Ok((fx, _)) = &result {
                            assert!(
                                fx.credits_total() <= tx.value + escrow_before,
                                "contract paid out more than value plus escrow"
                            );
                            if fx.destroy {
                                slot.destroyed = true;
                            }
                        }
                        result
                    }
                    None => Err(RevertReason::UnknownTarget),
                }
            }
        };

        match outcome {
            Ok((fx, idx)) => {
                self.accounts.get_mut(&tx.sender).unwrap().balance -= tx.value;
                for (to, amount) in &fx.credits {
                    self.accounts
                        .get_mut(to)
                        .expect("credit to unknown account")
                        .balance += amount;
                }
                if let RetValue::Deployed(id) = &fx.ret {
                    receipt.target = id.to_string();
                }
                receipt.ret = fx.ret;
                receipt.credits = fx.credits;
                // Uniform record coordinates: a fresh request carries its
                // index in the return value, the other record ops in args.
                receipt.record_idx = match &receipt.ret {
                    RetValue::Record(i) => Some(*i),
                    _ => idx,
                };
            }
            Err(reason) => {
                receipt.status = TxStatus::Reverted(reason);
            }
        }
        receipt
    }

    fn deploy(&mut self, tx: &SignedTransaction) -> Result<CallEffects, RevertReason> {
        if tx.call.function != "deploy" {
            return Err(RevertReason::BadCall);
        }
        if tx.value > 0 {
            return Err(RevertReason::NonPayable);
        }
        let args: DeployArgs =
            serde_json::from_slice(&tx.call.args).map_err(|_| RevertReason::BadCall)?;
        let kind = match args {
            DeployArgs::Owner(policy) => {
                ContractKind::Owner(OwnerContract::deploy(tx.sender.clone(), policy)?)
            }
            DeployArgs::Broker(config) => {
                ContractKind::Broker(BrokerContract::deploy(tx.sender.clone(), config)?)
            }
        };
        let id = ContractId::new(format!("c{}", self.next_contract));
        self.next_contract += 1;
        self.contracts.insert(
            id.clone(),
            ContractSlot {
                id: id.clone(),
                creator: tx.sender.clone(),
                destroyed: false,
                kind,
            },
        );
        Ok(CallEffects::ret(RetValue::Deployed(id)))
    }

    /// Finalized log as line-delimited records:
    /// `time,sender,target,function,value,status`.
    pub fn export_log(&self) -> String {
        let mut out = String::new();
        for r in &self.receipts {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.finalized_at, r.sender, r.target, r.function, r.value, r.status
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contracts::RecordStatus;
    use crate::crypto::{hash, KeyRole, SymmetricKey};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    struct Party {
        id: AccountId,
        key: SigningKey,
        nonce: u64,
    }

    impl Party {
        fn tx(&mut self, target: TxTarget, call: Call, value: u64) -> SignedTransaction {
            let tx = SignedTransaction::build(
                self.id.clone(),
                target,
                call,
                value,
                self.nonce,
                &self.key,
            );
            self.nonce += 1;
            tx
        }
    }

    fn setup(balances: &[(&str, u64)]) -> (Ledger, BTreeMap<String, Party>) {
        let mut rng = ChaCha20Rng::seed_from_u64(42);
        let mut ledger = Ledger::new(LedgerConfig {
            finalization_delay_ms: 15_000,
            congestion_penalty_ms: 0,
        });
        let mut parties = BTreeMap::new();
        for (name, balance) in balances {
            let key = SigningKey::generate(&mut rng);
            let id = AccountId::new(*name);
            ledger.genesis_account(id.clone(), *balance, key.public()).unwrap();
            parties.insert(
                name.to_string(),
                Party { id, key, nonce: 0 },
            );
        }
        (ledger, parties)
    }

    fn owner_policy() -> Policy {
        Policy {
            dataset: ["t0".to_string()].into_iter().collect(),
            price: 10_000,
            operation: hash(b"stats-program"),
            consumers: [AccountId::new("dc")].into_iter().collect(),
            request_timeout_ms: 60_000,
        }
    }

    #[test]
    fn genesis_balance_is_queryable_and_unknown_account_errors() {
        let (ledger, _) = setup(&[("alice", 100)]);
        assert_eq!(ledger.balance(&AccountId::new("alice")), Ok(100));
        assert_eq!(
            ledger.balance(&AccountId::new("nobody")),
            Err(LedgerError::UnknownAccount(AccountId::new("nobody")))
        );
    }

    #[test]
    fn submission_checks_signature_nonce_and_funds() {
        let (mut ledger, mut parties) = setup(&[("alice", 100), ("bob", 0)]);
        let alice = parties.get_mut("alice").unwrap();

        // Forged sender: signed with alice's key but claiming bob.
        let mut forged = alice.tx(
            TxTarget::Account(AccountId::new("alice")),
            Call::transfer(),
            1,
        );
        forged.sender = AccountId::new("bob");
        assert_eq!(ledger.submit_tx(forged), Err(SubmitError::BadSignature));
        alice.nonce = 0;

        // Wrong nonce.
        let tx = SignedTransaction::build(
            alice.id.clone(),
            TxTarget::Account(AccountId::new("bob")),
            Call::transfer(),
            1,
            7,
            &alice.key,
        );
        assert_eq!(
            ledger.submit_tx(tx),
            Err(SubmitError::BadNonce { expected: 0, got: 7 })
        );

        // Not enough funds.
        let tx = alice.tx(TxTarget::Account(AccountId::new("bob")), Call::transfer(), 101);
        assert_eq!(
            ledger.submit_tx(tx),
            Err(SubmitError::InsufficientFunds {
                balance: 100,
                value: 101
            })
        );
    }

    #[test]
    fn replayed_transaction_is_rejected() {
        let (mut ledger, mut parties) = setup(&[("alice", 100), ("bob", 0)]);
        let alice = parties.get_mut("alice").unwrap();
        let tx = alice.tx(TxTarget::Account(AccountId::new("bob")), Call::transfer(), 5);
        ledger.submit_tx(tx.clone()).unwrap();
        assert_eq!(
            ledger.submit_tx(tx),
            Err(SubmitError::BadNonce { expected: 1, got: 0 })
        );
    }

    #[test]
    fn finalization_waits_for_the_window() {
        let (mut ledger, mut parties) = setup(&[("alice", 100), ("bob", 0)]);
        let alice = parties.get_mut("alice").unwrap();
        let tx = alice.tx(TxTarget::Account(AccountId::new("bob")), Call::transfer(), 5);
        let handle = ledger.submit_tx(tx).unwrap();
        assert_eq!(handle.finalize_at, 15_000);

        assert!(ledger.advance(0).is_empty());
        assert_eq!(ledger.pending_len(), 1);
        assert!(ledger.advance(14_999).is_empty());
        let receipts = ledger.advance(1);
        assert_eq!(receipts.len(), 1);
        assert_eq!(receipts[0].finalized_at, 15_000);
        assert_eq!(receipts[0].status, TxStatus::Ok);
        assert_eq!(ledger.balance(&AccountId::new("bob")), Ok(5));
        assert_eq!(ledger.balance(&AccountId::new("alice")), Ok(95));
    }

    #[test]
    fn congestion_penalty_scales_with_queue_depth() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let mut ledger = Ledger::new(LedgerConfig {
            finalization_delay_ms: 10,
            congestion_penalty_ms: 5,
        });
        let key = SigningKey::generate(&mut rng);
        let alice = AccountId::new("alice");
        ledger.genesis_account(alice.clone(), 100, key.public()).unwrap();
        ledger
            .genesis_account(AccountId::new("bob"), 0, key.public())
            .unwrap();

        let mk = |nonce: u64| {
            SignedTransaction::build(
                alice.clone(),
                TxTarget::Account(AccountId::new("bob")),
                Call::transfer(),
                1,
                nonce,
                &key,
            )
        };
        assert_eq!(ledger.submit_tx(mk(0)).unwrap().finalize_at, 10);
        assert_eq!(ledger.submit_tx(mk(1)).unwrap().finalize_at, 15);
        assert_eq!(ledger.submit_tx(mk(2)).unwrap().finalize_at, 20);
    }

    #[test]
    fn same_window_receipts_order_by_submission_and_replay_identically() {
        let run = || {
            let (mut ledger, mut parties) = setup(&[("alice", 100), ("bob", 100)]);
            let bob_tx = parties.get_mut("bob").unwrap().tx(
                TxTarget::Account(AccountId::new("alice")),
                Call::transfer(),
                3,
            );
            let alice_tx = parties.get_mut("alice").unwrap().tx(
                TxTarget::Account(AccountId::new("bob")),
                Call::transfer(),
                7,
            );
            ledger.submit_tx(bob_tx).unwrap();
            ledger.submit_tx(alice_tx).unwrap();
            ledger.advance(15_000);
            ledger.export_log()
        };
        let first = run();
        let second = run();
        assert_eq!(first, second);
        let lines: Vec<&str> = first.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].starts_with("15000,bob,"));
        assert!(lines[1].starts_with("15000,alice,"));
    }

    #[test]
    fn funds_are_rechecked_at_execution() {
        let (mut ledger, mut parties) = setup(&[("alice", 100), ("bob", 0), ("carol", 0)]);
        let alice = parties.get_mut("alice").unwrap();
        // Two txs admitted against the same 100: the second reverts when the
        // first has already drained the balance.
        let t1 = alice.tx(TxTarget::Account(AccountId::new("bob")), Call::transfer(), 80);
        let t2 = alice.tx(TxTarget::Account(AccountId::new("carol")), Call::transfer(), 80);
        ledger.submit_tx(t1).unwrap();
        ledger.submit_tx(t2).unwrap();
        let receipts = ledger.advance(15_000);
        assert_eq!(receipts[0].status, TxStatus::Ok);
        assert_eq!(
            receipts[1].status,
            TxStatus::Reverted(RevertReason::InsufficientFunds)
        );
        assert_eq!(ledger.total_supply(), ledger.genesis_total());
    }

    #[test]
    fn deploy_and_usage_flow_conserves_supply() {
        let (mut ledger, mut parties) = setup(&[("do", 0), ("dc", 50_000)]);
        let deploy = parties.get_mut("do").unwrap().tx(
            TxTarget::Deploy,
            Call::deploy(&DeployArgs::Owner(owner_policy())),
            0,
        );
        ledger.submit_tx(deploy).unwrap();
        let receipts = ledger.advance(15_000);
        let cid = match &receipts[0].ret {
            RetValue::Deployed(id) => id.clone(),
            other => panic!("expected deploy, got {other:?}"),
        };
        assert_eq!(receipts[0].target, "c0");

        // Request at exactly the listed price: 0.01 ether = 10000 units.
        let request = parties.get_mut("dc").unwrap().tx(
            TxTarget::Contract(cid.clone()),
            Call::owner(&OwnerCall::Request {
                op: hash(b"stats-program"),
                data: ["t0".to_string()].into_iter().collect(),
            }),
            10_000,
        );
        ledger.submit_tx(request).unwrap();
        let receipts = ledger.advance(15_000);
        assert_eq!(receipts[0].ret, RetValue::Record(0));
        assert_eq!(ledger.balance(&AccountId::new("dc")), Ok(40_000));
        assert_eq!(ledger.contract(&cid).unwrap().escrowed(), 10_000);
        assert_eq!(ledger.total_supply(), ledger.genesis_total());

        let key = SymmetricKey::from_bytes([5u8; 32], KeyRole::Result);
        let cc = parties.get_mut("dc").unwrap().tx(
            TxTarget::Contract(cid.clone()),
            Call::owner(&OwnerCall::ComputationComplete {
                idx: 0,
                kr_hash: key.digest(),
            }),
            0,
        );
        ledger.submit_tx(cc).unwrap();
        ledger.advance(15_000);

        let ct = parties.get_mut("do").unwrap().tx(
            TxTarget::Contract(cid.clone()),
            Call::owner(&OwnerCall::CompleteTransaction {
                idx: 0,
                kr: key.bytes().to_vec(),
            }),
            0,
        );
        ledger.submit_tx(ct).unwrap();
        let receipts = ledger.advance(15_000);
        assert_eq!(receipts[0].status, TxStatus::Ok);
        assert_eq!(receipts[0].credits, vec![(AccountId::new("do"), 10_000)]);
        assert_eq!(ledger.balance(&AccountId::new("do")), Ok(10_000));
        assert_eq!(ledger.contract(&cid).unwrap().escrowed(), 0);
        assert_eq!(ledger.total_supply(), ledger.genesis_total());

        let slot = ledger.contract(&cid).unwrap();
        let record = slot.owner_view().unwrap().record(0).unwrap();
        assert_eq!(record.status, RecordStatus::Complete);
        assert_eq!(hash(record.kr.as_ref().unwrap()), record.kr_hash.unwrap());
    }

    #[test]
    fn destroyed_contract_rejects_further_calls() {
        let (mut ledger, mut parties) = setup(&[("do", 0), ("dc", 50_000)]);
        let deploy = parties.get_mut("do").unwrap().tx(
            TxTarget::Deploy,
            Call::deploy(&DeployArgs::Owner(owner_policy())),
            0,
        );
        ledger.submit_tx(deploy).unwrap();
        ledger.advance(15_000);
        let cid = ContractId::new("c0");

        let revoke = parties.get_mut("do").unwrap().tx(
            TxTarget::Contract(cid.clone()),
            Call::owner(&OwnerCall::Revoke),
            0,
        );
        ledger.submit_tx(revoke).unwrap();
        ledger.advance(15_000);
        assert!(ledger.contract(&cid).unwrap().destroyed);

        let request = parties.get_mut("dc").unwrap().tx(
            TxTarget::Contract(cid),
            Call::owner(&OwnerCall::Request {
                op: hash(b"stats-program"),
                data: ["t0".to_string()].into_iter().collect(),
            }),
            10_000,
        );
        ledger.submit_tx(request).unwrap();
        let receipts = ledger.advance(15_000);
        assert_eq!(
            receipts[0].status,
            TxStatus::Reverted(RevertReason::Destroyed)
        );
        // The reverted deposit never left the sender.
        assert_eq!(ledger.balance(&AccountId::new("dc")), Ok(50_000));
    }

    #[test]
    fn export_log_lines_have_the_fixed_field_order() {
        let (mut ledger, mut parties) = setup(&[("alice", 100), ("bob", 0)]);
        let tx = parties.get_mut("alice").unwrap().tx(
            TxTarget::Account(AccountId::new("bob")),
            Call::transfer(),
            5,
        );
        ledger.submit_tx(tx).unwrap();
        ledger.advance(15_000);
        assert_eq!(ledger.export_log(), "15000,alice,bob,transfer,5,ok\n");
    }

    #[test]
    fn genesis_closes_at_first_submission() {
        let (mut ledger, mut parties) = setup(&[("alice", 100), ("bob", 0)]);
        let tx = parties.get_mut("alice").unwrap().tx(
            TxTarget::Account(AccountId::new("bob")),
            Call::transfer(),
            1,
        );
        ledger.submit_tx(tx).unwrap();
        let key = SigningKey::generate(&mut ChaCha20Rng::seed_from_u64(9));
        assert_eq!(
            ledger.genesis_account(AccountId::new("late"), 1, key.public()),
            Err(SubmitError::GenesisClosed)
        );
    }
}

//! Invariant checkers that audit a finished run.
//!
//! Each checker works from evidence an outside auditor could hold: the chain
//! receipts, the final contract state, the wire captures, and the run
//! transcript. None of them peek at actor internals, so they hold (or fail)
//! the same way under every adversary the harness can express.
//!
//! The two standing assumptions are the ones the protocol itself makes: the
//! consumer and the owners run the honest client, and at least one chain
//! endpoint stays reachable. Scenario generation honors both.

use super::{RunOutcome, RunView};
use crate::contracts::{BrokerCall, OwnerCall, RecordStatus, RetValue};
use crate::crypto::{hash, Digest};
use crate::ledger::{DeployArgs, Receipt, TxStatus};
use crate::network::{Payload, PayloadKind};
use crate::types::AccountId;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {} {}", self.name, self.detail)
    }
}

pub fn run_all(out: &RunOutcome) -> Vec<CheckReport> {
    let text = out.transcript.render();
    vec![
        funds_conserved(&out.view, out.config.genesis_balance),
        record_lifecycle(&out.view),
        atomic_exchange(&out.view, &text),
        payout_exactness(&out.view),
        plaintext_confinement(&out.view, &text),
        channel_provenance(&out.view),
        sanitization(&text),
        termination(&out.view),
    ]
}

pub fn all_passed(reports: &[CheckReport]) -> bool {
    reports.iter().all(|r| r.passed)
}

fn ok(r: &Receipt) -> bool {
    r.status == TxStatus::Ok
}

fn report(name: &'static str, faults: Vec<String>, ok_detail: String) -> CheckReport {
    if faults.is_empty() {
        return CheckReport {
            name,
            passed: true,
            detail: ok_detail,
        };
    }
    let shown = faults
        .iter()
        .take(3)
        .cloned()
        .collect::<Vec<_>>()
        .join("; ");
    let extra = if faults.len() > 3 {
        format!(" (+{} more)", faults.len() - 3)
    } else {
        String::new()
    };
    CheckReport {
        name,
        passed: false,
        detail: format!("{shown}{extra}"),
    }
}

/// Both completion calls and the cancel share field layouts across the two
/// contract kinds, so one decode covers either origin.
fn committed_hash(r: &Receipt) -> Option<Digest> {
    match serde_json::from_slice::<OwnerCall>(&r.args) {
        Ok(OwnerCall::ComputationComplete { kr_hash, .. }) => Some(kr_hash),
        _ => None,
    }
}

fn revealed_key(r: &Receipt) -> Option<Vec<u8>> {
    match serde_json::from_slice::<OwnerCall>(&r.args) {
        Ok(OwnerCall::CompleteTransaction { kr, .. }) => Some(kr),
        _ => None,
    }
}

/// No currency appears or disappears: the circulating supply still equals
/// genesis, everything is either in an account or escrowed, and each
/// account's final balance replays exactly from its receipts.
pub fn funds_conserved(view: &RunView, genesis_each: u64) -> CheckReport {
    let mut faults = Vec::new();
    if view.total_supply != view.genesis_total {
        faults.push(format!(
            "supply {} != genesis {}",
            view.total_supply, view.genesis_total
        ));
    }
    let held: u64 = view.balances.values().sum::<u64>() + view.escrowed;
    if held != view.total_supply {
        faults.push(format!(
            "balances {} + escrow {} != supply {}",
            held - view.escrowed,
            view.escrowed,
            view.total_supply
        ));
    }
    for (account, balance) in &view.balances {
        let mut expected = genesis_each as i128;
        for r in view.receipts.iter().filter(|r| ok(r)) {
            if r.sender == *account {
                expected -= r.value as i128;
            }
            expected += r
                .credits
                .iter()
                .filter(|(a, _)| a == account)
                .map(|(_, v)| *v as i128)
                .sum::<i128>();
        }
        if expected != *balance as i128 {
            faults.push(format!(
                "{account}: replayed {expected} != final {balance}"
            ));
        }
    }
    report(
        "funds-conserved",
        faults,
        format!("supply={} accounts={}", view.total_supply, view.balances.len()),
    )
}

/// Replays every successful record operation and demands the canonical
/// machine: open -> committed -> complete, with cancel only from the two
/// open states, terminal states absorbing, and the revealed key matching
/// the committed hash bit for bit.
pub fn record_lifecycle(view: &RunView) -> CheckReport {
    let mut faults = Vec::new();
    let mut st: BTreeMap<(String, u64), RecordStatus> = BTreeMap::new();
    let mut committed: BTreeMap<(String, u64), Digest> = BTreeMap::new();
    let mut opened_at: BTreeMap<(String, u64), u64> = BTreeMap::new();

    for r in view.receipts.iter().filter(|r| ok(r)) {
        let key = r.record_idx.map(|i| (r.target.clone(), i));
        match r.function.as_str() {
            "request" => {
                if let RetValue::Record(i) = r.ret {
                    let k = (r.target.clone(), i);
                    if st.insert(k.clone(), RecordStatus::WaitComputation).is_some() {
                        faults.push(format!("{}:{i} opened twice", r.target));
                    }
                    opened_at.insert(k, r.finalized_at);
                }
            }
            "computation-complete" if r.ret == RetValue::Unit => {
                let Some(k) = key else {
                    faults.push(format!("seq={} commit without record index", r.seq));
                    continue;
                };
                match st.get(&k) {
                    Some(RecordStatus::WaitComputation) => {
                        st.insert(k.clone(), RecordStatus::WaitComplete);
                        match committed_hash(r) {
                            Some(h) => {
                                committed.insert(k, h);
                            }
                            None => faults.push(format!("seq={} undecodable commit", r.seq)),
                        }
                    }
                    other => faults.push(format!(
                        "{}:{} committed from {:?}",
                        k.0, k.1, other
                    )),
                }
            }
            "complete-transaction" => {
                let Some(k) = key else {
                    if r.ret == RetValue::Unit {
                        faults.push(format!("seq={} completion without record index", r.seq));
                    }
                    continue;
                };
                match r.ret {
                    RetValue::Unit => match st.get(&k) {
                        Some(RecordStatus::WaitComplete) => {
                            st.insert(k.clone(), RecordStatus::Complete);
                            match (revealed_key(r), committed.get(&k)) {
                                (Some(kr), Some(h)) if hash(&kr) == *h => {}
                                (Some(_), Some(_)) => faults.push(format!(
                                    "{}:{} released on a key that misses the committed hash",
                                    k.0, k.1
                                )),
                                _ => faults.push(format!(
                                    "{}:{} completed without a decodable key or commit",
                                    k.0, k.1
                                )),
                            }
                        }
                        other => faults.push(format!(
                            "{}:{} completed from {:?}",
                            k.0, k.1, other
                        )),
                    },
                    RetValue::HashMismatch => {
                        if st.get(&k) != Some(&RecordStatus::WaitComplete) {
                            faults.push(format!(
                                "{}:{} hash-mismatch outside WaitComplete",
                                k.0, k.1
                            ));
                        }
                    }
                    _ => {}
                }
            }
            "cancel" => {
                let Some(k) = key else { continue };
                match r.ret {
                    RetValue::Unit => match st.get(&k) {
                        Some(s) if !s.is_terminal() => {
                            st.insert(k, RecordStatus::Canceled);
                        }
                        other => faults.push(format!(
                            "{}:{} canceled from {:?}",
                            k.0, k.1, other
                        )),
                    },
                    RetValue::NoOp => {
                        if st.get(&k).is_none_or(|s| s.is_terminal()) {
                            faults.push(format!(
                                "{}:{} no-op cancel on a closed record",
                                k.0, k.1
                            ));
                        }
                    }
                    _ => {}
                }
            }
            _ => {}
        }
    }

    let mut seen = BTreeSet::new();
    for rec in &view.records {
        let k = (rec.contract.to_string(), rec.idx);
        seen.insert(k.clone());
        match st.get(&k) {
            None => faults.push(format!("{}:{} has no opening receipt", k.0, k.1)),
            Some(s) if *s != rec.status => faults.push(format!(
                "{}:{} replay says {:?}, chain says {:?}",
                k.0, k.1, s, rec.status
            )),
            _ => {}
        }
        if let Some(t) = opened_at.get(&k) {
            if *t != rec.req_time {
                faults.push(format!(
                    "{}:{} req_time {} != request finalization {t}",
                    k.0, k.1, rec.req_time
                ));
            }
        }
        match rec.status {
            RecordStatus::Complete => {
                match (&rec.kr, rec.kr_hash) {
                    (Some(kr), Some(h)) => {
                        if hash(kr) != h {
                            faults.push(format!("{}:{} stored key misses its hash", k.0, k.1));
                        }
                        if committed.get(&k) != Some(&h) {
                            faults.push(format!(
                                "{}:{} stored hash differs from the committed one",
                                k.0, k.1
                            ));
                        }
                    }
                    _ => faults.push(format!(
                        "{}:{} complete without key material",
                        k.0, k.1
                    )),
                }
            }
            _ => {
                if rec.kr.is_some() {
                    faults.push(format!(
                        "{}:{} holds a key outside Complete",
                        k.0, k.1
                    ));
                }
            }
        }
    }
    for k in st.keys() {
        if !seen.contains(k) {
            faults.push(format!("{}:{} replayed but absent from state", k.0, k.1));
        }
    }

    report(
        "record-lifecycle",
        faults,
        format!("records={}", view.records.len()),
    )
}

/// The exchange is all or nothing. A complete record paid its owners against
/// a key that matches the commitment; a canceled record refunded the full
/// deposit and released nothing. And the two outcomes never mix with what
/// the consumer got: a verified result implies no owner went unpaid, and a
/// revealed key implies the consumer could verify.
pub fn atomic_exchange(view: &RunView, transcript_text: &str) -> CheckReport {
    let mut faults = Vec::new();
    let result_seen = transcript_text.contains("|result-verified|");
    let mut any_complete = false;

    for rec in &view.records {
        let k = format!("{}:{}", rec.contract, rec.idx);
        match rec.status {
            RecordStatus::Complete => {
                any_complete = true;
                if rec.payouts.is_empty() {
                    faults.push(format!("{k} complete with no payout"));
                }
                if rec.escrow != 0 {
                    faults.push(format!("{k} complete with escrow left"));
                }
                match (&rec.kr, rec.kr_hash) {
                    (Some(kr), Some(h)) if hash(kr) == h => {}
                    _ => faults.push(format!("{k} paid without a matching key")),
                }
            }
            RecordStatus::Canceled => {
                if rec.kr.is_some() {
                    faults.push(format!("{k} canceled yet holds a key"));
                }
                if rec.escrow != 0 {
                    faults.push(format!("{k} canceled with escrow left"));
                }
                let deposit = view
                    .receipts
                    .iter()
                    .find(|r| {
                        ok(r)
                            && r.function == "request"
                            && r.target == rec.contract.to_string()
                            && r.ret == RetValue::Record(rec.idx)
                    })
                    .map(|r| r.value);
                let refunded = view
                    .receipts
                    .iter()
                    .filter(|r| {
                        ok(r)
                            && r.function == "cancel"
                            && r.ret == RetValue::Unit
                            && r.target == rec.contract.to_string()
                            && r.record_idx == Some(rec.idx)
                    })
                    .flat_map(|r| r.credits.iter())
                    .filter(|(a, _)| *a == rec.dc)
                    .map(|(_, v)| *v)
                    .sum::<u64>();
                match deposit {
                    Some(d) if d == refunded => {}
                    Some(d) => faults.push(format!(
                        "{k} canceled: deposited {d}, refunded {refunded}"
                    )),
                    None => faults.push(format!("{k} canceled with no deposit receipt")),
                }
                if result_seen {
                    faults.push(format!(
                        "{k} canceled although the consumer verified a result"
                    ));
                }
            }
            _ => {}
        }
    }
    if any_complete && !result_seen {
        faults.push("a key was released but the consumer verified no result".into());
    }
    report(
        "atomic-exchange",
        faults,
        if result_seen {
            "exchange completed on both sides".into()
        } else {
            "no result, deposits refunded".into()
        },
    )
}

/// Replays registrations, confirmations, and requests from public receipts
/// and demands that every payout snapshot and every completion credit match
/// that replay to the unit: registered price per owner, residual above the
/// snapshot back to the consumer, nothing moved by the commit call.
pub fn payout_exactness(view: &RunView) -> CheckReport {
    let mut faults = Vec::new();
    // Per-owner deployments pay the deployer; brokered ones pay the
    // confirmed registry snapshot.
    let mut owner_of: BTreeMap<String, AccountId> = BTreeMap::new();
    let mut broker_ops: BTreeMap<String, BTreeSet<Digest>> = BTreeMap::new();
    let mut registry: BTreeMap<(String, AccountId, Digest), u64> = BTreeMap::new();
    let mut confirmed: BTreeMap<(String, Digest), BTreeMap<AccountId, u64>> = BTreeMap::new();
    let mut expected: BTreeMap<(String, u64), (Vec<(AccountId, u64)>, u64, AccountId)> =
        BTreeMap::new();

    for r in view.receipts.iter().filter(|r| ok(r)) {
        match r.function.as_str() {
            "deploy" => match serde_json::from_slice::<DeployArgs>(&r.args) {
                Ok(DeployArgs::Owner(_)) => {
                    owner_of.insert(r.target.clone(), r.sender.clone());
                }
                Ok(DeployArgs::Broker(cfg)) => {
                    broker_ops.insert(r.target.clone(), cfg.operations);
                }
                Err(_) => faults.push(format!("seq={} undecodable deploy", r.seq)),
            },
            "register" => {
                if let Ok(BrokerCall::Register { op, price, .. }) =
                    serde_json::from_slice::<BrokerCall>(&r.args)
                {
                    registry.insert((r.target.clone(), r.sender.clone(), op), price);
                }
            }
            "confirm" => {
                if let Ok(BrokerCall::Confirm { owners }) =
                    serde_json::from_slice::<BrokerCall>(&r.args)
                {
                    let ops = broker_ops.get(&r.target).cloned().unwrap_or_default();
                    for owner in owners {
                        for op in &ops {
                            if let Some(p) =
                                registry.get(&(r.target.clone(), owner.clone(), *op))
                            {
                                confirmed
                                    .entry((r.target.clone(), *op))
                                    .or_default()
                                    .insert(owner.clone(), *p);
                            }
                        }
                    }
                }
            }
            "request" => {
                if let RetValue::Record(i) = r.ret {
                    let snapshot = if let Some(owner) = owner_of.get(&r.target) {
                        vec![(owner.clone(), r.value)]
                    } else if let Ok(BrokerCall::Request { op, .. }) =
                        serde_json::from_slice::<BrokerCall>(&r.args)
                    {
                        confirmed
                            .get(&(r.target.clone(), op))
                            .map(|m| m.iter().map(|(a, v)| (a.clone(), *v)).collect())
                            .unwrap_or_default()
                    } else {
                        faults.push(format!("seq={} undecodable request", r.seq));
                        continue;
                    };
                    expected.insert((r.target.clone(), i), (snapshot, r.value, r.sender.clone()));
                }
            }
            "computation-complete" if r.ret == RetValue::Unit => {
                if !r.credits.is_empty() {
                    faults.push(format!("seq={} commit moved funds", r.seq));
                }
            }
            "complete-transaction" if r.ret == RetValue::Unit => {
                let Some(k) = r.record_idx.map(|i| (r.target.clone(), i)) else {
                    continue;
                };
                let Some((snapshot, deposit, dc)) = expected.get(&k) else {
                    faults.push(format!("{}:{} completed unknown record", k.0, k.1));
                    continue;
                };
                let owed: u64 = snapshot.iter().map(|(_, v)| v).sum();
                let mut want = snapshot.clone();
                let residual = deposit - owed;
                if residual > 0 && owner_of.get(&k.0).is_none() {
                    want.push((dc.clone(), residual));
                }
                if r.credits != want {
                    faults.push(format!(
                        "{}:{} paid {:?}, replay wants {:?}",
                        k.0, k.1, r.credits, want
                    ));
                }
            }
            _ => {}
        }
    }

    for rec in &view.records {
        let k = (rec.contract.to_string(), rec.idx);
        match expected.get(&k) {
            Some((snapshot, _, _)) if *snapshot == rec.payouts => {}
            Some((snapshot, _, _)) => faults.push(format!(
                "{}:{} snapshot {:?} != replay {:?}",
                k.0, k.1, rec.payouts, snapshot
            )),
            None => faults.push(format!("{}:{} has no request replay", k.0, k.1)),
        }
    }

    report(
        "payout-exactness",
        faults,
        format!("records={}", view.records.len()),
    )
}

/// Raw data, data keys, and canaries must never appear on the wire, on the
/// chain, or in logs, in any encoding actually used by the protocol. The
/// result key is different: revealing it on the chain is the point, so it is
/// legitimate exactly in submitted transactions and completion calldata.
pub fn plaintext_confinement(view: &RunView, transcript_text: &str) -> CheckReport {
    struct Pattern {
        what: String,
        needles: Vec<String>,
        chain_ok: bool,
    }
    let mut patterns = Vec::new();
    for s in &view.sentinels {
        let canary = hex::decode(&s.canary_hex).expect("sentinel is hex");
        let key = hex::decode(&s.data_key_hex).expect("sentinel is hex");
        patterns.push(Pattern {
            what: format!("{} canary", s.owner),
            needles: vec![
                s.canary_hex.clone(),
                serde_json::to_string(&canary).expect("bytes serialize"),
            ],
            chain_ok: false,
        });
        patterns.push(Pattern {
            what: format!("{} data key", s.owner),
            needles: vec![
                s.data_key_hex.clone(),
                serde_json::to_string(&key).expect("bytes serialize"),
            ],
            chain_ok: false,
        });
    }
    let mut result_keys: BTreeSet<Vec<u8>> = BTreeSet::new();
    for rec in &view.records {
        if let Some(kr) = &rec.kr {
            result_keys.insert(kr.clone());
        }
    }
    for kr in result_keys {
        patterns.push(Pattern {
            what: "result key".into(),
            needles: vec![
                hex::encode(&kr),
                serde_json::to_string(&kr).expect("bytes serialize"),
            ],
            chain_ok: true,
        });
    }

    let mut faults = Vec::new();
    for p in &patterns {
        for needle in &p.needles {
            for c in &view.captures {
                if c.body.contains(needle) && !(p.chain_ok && c.kind == PayloadKind::TxSubmit) {
                    faults.push(format!(
                        "{} visible in {} {}->{}",
                        p.what, c.kind, c.from, c.to
                    ));
                }
            }
            for r in &view.receipts {
                let args = String::from_utf8_lossy(&r.args);
                if args.contains(needle) && !(p.chain_ok && r.function == "complete-transaction")
                {
                    faults.push(format!(
                        "{} visible in receipt seq={} fn={}",
                        p.what, r.seq, r.function
                    ));
                }
            }
            if transcript_text.contains(needle) {
                faults.push(format!("{} visible in the transcript", p.what));
            }
        }
    }
    report(
        "plaintext-confinement",
        faults,
        format!(
            "patterns={} captures={}",
            patterns.len(),
            view.captures.len()
        ),
    )
}

/// Every encrypted segment on the wire belongs to a channel the harness
/// keyed after a validated attestation, and every such channel terminates in
/// an enclave whose measurement is one of the published programs.
pub fn channel_provenance(view: &RunView) -> CheckReport {
    let mut faults = Vec::new();
    let mut ids = BTreeSet::new();
    for ch in &view.channels {
        if !ids.insert(ch.id) {
            faults.push(format!("channel {} keyed twice", ch.id));
        }
        if !view.expected_measurements.contains(&ch.measurement) {
            faults.push(format!(
                "channel {} attests unknown measurement {}",
                ch.id,
                ch.measurement.short()
            ));
        }
    }
    let mut segments = 0u64;
    for c in &view.captures {
        if c.kind != PayloadKind::Channel {
            continue;
        }
        segments += 1;
        match serde_json::from_str::<Payload>(&c.body) {
            Ok(Payload::Channel(data)) => {
                if !ids.contains(&data.channel) {
                    faults.push(format!(
                        "segment on unkeyed channel {} {}->{}",
                        data.channel, c.from, c.to
                    ));
                }
            }
            _ => faults.push(format!("undecodable segment {}->{}", c.from, c.to)),
        }
    }
    report(
        "channel-provenance",
        faults,
        format!("channels={} segments={segments}", view.channels.len()),
    )
}

/// Every enclave execution, successful or not, must report its state wiped.
/// Success and failure paths both end in erasure; a `sanitized=false` on any
/// execution line means key material or plaintext outlived the operation.
pub fn sanitization(transcript_text: &str) -> CheckReport {
    let mut faults = Vec::new();
    let mut executions = 0u64;
    for line in transcript_text.lines() {
        if line.contains("|execute|") || line.contains("|execute-failed|") {
            executions += 1;
            if !line.contains("sanitized=true") {
                faults.push(format!("unsanitized execution: {line}"));
            }
        }
    }
    report("sanitization", faults, format!("executions={executions}"))
}

/// Nothing is left hanging: the event queue drained, every record reached a
/// terminal state, no escrow is stranded, and every effective cancel waited
/// out the full timeout.
pub fn termination(view: &RunView) -> CheckReport {
    let mut faults = Vec::new();
    if !view.drained {
        faults.push("event queue still holds work".into());
    }
    if view.escrowed != 0 {
        faults.push(format!("{} units stranded in escrow", view.escrowed));
    }
    let by_key: BTreeMap<(String, u64), &super::RecordView> = view
        .records
        .iter()
        .map(|r| ((r.contract.to_string(), r.idx), r))
        .collect();
    for rec in &view.records {
        if !rec.status.is_terminal() {
            faults.push(format!(
                "{}:{} ended {:?}",
                rec.contract, rec.idx, rec.status
            ));
        }
    }
    for r in view.receipts.iter().filter(|r| ok(r)) {
        if r.function != "cancel" || r.ret != RetValue::Unit {
            continue;
        }
        let Some(k) = r.record_idx.map(|i| (r.target.clone(), i)) else {
            continue;
        };
        if let Some(rec) = by_key.get(&k) {
            let elapsed = r.finalized_at.saturating_sub(rec.req_time);
            if elapsed <= rec.timeout_ms {
                faults.push(format!(
                    "{}:{} canceled after {elapsed}ms with a {}ms window",
                    k.0, k.1, rec.timeout_ms
                ));
            }
        }
    }
    report(
        "termination",
        faults,
        format!("sim_ms={} records={}", view.sim_ms, view.records.len()),
    )
}

//! Protocol participants as deterministic state machines.
//!
//! Each actor consumes one input at a time (start, a network message, a
//! batch of finalized receipts, an attested-channel handshake completion, or
//! a timer) and returns effects for the harness to apply: messages to send,
//! transactions to submit, channels to open, timers to set, log lines. No
//! actor touches the clock, the network, or the chain directly, which is
//! what makes identical seeds replay identically.
//!
//! Two deployment paradigms are supported. Under `PerOwner`, every data
//! owner runs their own usage contract and provisions the compute enclave
//! directly. Under `Brokered`, one broker hosts a key agent enclave and a
//! single aggregate contract; owners onboard once and the broker handles
//! confirmation, key forwarding, and completion.

use crate::contracts::{BrokerCall, BrokerConfig, OwnerCall, Policy, RetValue};
use crate::crypto::{hash, Digest, NonceSeq, PublicKey, SigningKey, SymmetricKey};
use crate::dataset::{DataCapsule, OwnerDataset, StatsResult};
use crate::ledger::{Call, DeployArgs, Receipt, SignedTransaction, TxStatus, TxTarget};
use crate::network::{ChannelEnd, ChannelId, Message, Payload};
use crate::tee::{
    bindings_ad, validate_report, AttestationNonce, AttestationReport, ChannelPayload, Enclave,
    EnclaveEvent, JobSpec, KeySlip, ProgramManifest, Quote, RecordBinding, ResultBundle,
};
use crate::types::{AccountId, ContractId, HostId};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

/// Instance name of the broker's key agent enclave. Owners address their
/// onboarding attestation to it by this name.
pub const KEY_AGENT_INSTANCE: &str = "db-agent-0";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Paradigm {
    /// Every owner deploys and settles their own contract.
    PerOwner,
    /// One broker contract aggregates all owners.
    Brokered,
}

impl fmt::Display for Paradigm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Paradigm::PerOwner => "per-owner",
            Paradigm::Brokered => "brokered",
        })
    }
}

/// Timer identity. Cleared timers never fire.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum WakeTag {
    CancelRecord { contract: ContractId, idx: u64 },
}

impl fmt::Display for WakeTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WakeTag::CancelRecord { contract, idx } => write!(f, "cancel|{contract}:{idx}"),
        }
    }
}

/// Why a channel was opened; decides which actor state the end lands in.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ChannelPurpose {
    /// Owner provisions their data key to the broker's key agent.
    Onboard { descriptor: String },
    /// Key path into the compute enclave; slips come back the same way.
    Provider { job_id: String },
    /// Result path from the compute enclave to the consumer.
    Consumer { job_id: String },
}

impl fmt::Display for ChannelPurpose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChannelPurpose::Onboard { descriptor } => write!(f, "onboard:{descriptor}"),
            ChannelPurpose::Provider { job_id } => write!(f, "provider:{job_id}"),
            ChannelPurpose::Consumer { job_id } => write!(f, "consumer:{job_id}"),
        }
    }
}

/// One event delivered to an actor.
#[derive(Debug, Clone)]
pub enum Input {
    Start,
    Deliver(Message),
    /// Every newly finalized receipt; chain data is public.
    Receipts(Vec<Receipt>),
    /// An attested handshake this actor requested (or hosts the enclave
    /// for) finished; `end` is this side's half of the channel.
    ChannelReady {
        purpose: ChannelPurpose,
        instance: String,
        peer: HostId,
        end: ChannelEnd,
    },
    Wakeup(WakeTag),
}

/// What an actor asks the harness to do.
#[derive(Debug)]
pub enum Effect {
    Send {
        to: HostId,
        payload: Payload,
    },
    /// Submit through this actor's own chain endpoint.
    SubmitTx(SignedTransaction),
    /// Submit through every public endpoint for delivery resilience.
    BroadcastTx(SignedTransaction),
    /// Finish an attested handshake: the harness keys both halves from the
    /// report transcript, hands one to the requester and one to the enclave
    /// host named here.
    OpenChannel {
        host: HostId,
        instance: String,
        report: AttestationReport,
        purpose: ChannelPurpose,
    },
    Wakeup {
        at_ms: u64,
        tag: WakeTag,
    },
    ClearWakeup {
        tag: WakeTag,
    },
    Log {
        step: &'static str,
        detail: String,
    },
    /// Publish a sealed capsule to shared storage.
    StoreCapsule(DataCapsule),
}

/// Read-only world state actors may consult while handling an input.
pub struct ActorCtx<'a> {
    /// Published capsules by descriptor.
    pub capsules: &'a BTreeMap<String, DataCapsule>,
}

pub trait Actor {
    /// Network address; doubles as the account name for principals that
    /// transact.
    fn name(&self) -> &str;
    fn handle(&mut self, now: u64, input: Input, ctx: &ActorCtx<'_>) -> Vec<Effect>;
    /// Concrete-type escape hatch for post-run inspection.
    fn as_any(&self) -> &dyn std::any::Any;
}

/// Well-known public facts every participant starts with: who plays which
/// role, which program measurements the contracts pin, and the attestation
/// service key. Everything else is discovered from the chain or the network.
#[derive(Debug, Clone)]
pub struct Bulletin {
    pub op_id: String,
    pub op_measurement: Digest,
    pub agent_measurement: Digest,
    pub ias_service: PublicKey,
    pub cloud_host: HostId,
    pub broker: AccountId,
    pub dc: AccountId,
    pub finalization_delay_ms: u64,
}

impl Bulletin {
    fn broker_host(&self) -> HostId {
        HostId::new(self.broker.as_str())
    }

    fn dc_host(&self) -> HostId {
        HostId::new(self.dc.as_str())
    }
}

fn decode_owner_call(r: &Receipt) -> Option<OwnerCall> {
    serde_json::from_slice(&r.args).ok()
}

fn decode_broker_call(r: &Receipt) -> Option<BrokerCall> {
    serde_json::from_slice(&r.args).ok()
}

fn decode_deploy(r: &Receipt) -> Option<DeployArgs> {
    serde_json::from_slice(&r.args).ok()
}

fn ok(r: &Receipt) -> bool {
    r.status == TxStatus::Ok
}

/// One in-flight remote attestation this actor is running as challenger.
#[derive(Debug)]
struct PendingAttest {
    host: HostId,
    nonce: AttestationNonce,
    quote_digest: Option<Digest>,
    expected_measurement: Digest,
    purpose: ChannelPurpose,
}

/// Challenger half of remote attestation, shared by every actor that
/// verifies enclaves: fresh nonce out, quote back, quote to the attestation
/// service, report validated against the pinned measurement.
#[derive(Debug)]
struct Attester {
    self_host: HostId,
    service_pk: PublicKey,
    pending: BTreeMap<String, PendingAttest>,
}

impl Attester {
    fn new(self_host: HostId, service_pk: PublicKey) -> Self {
        Attester {
            self_host,
            service_pk,
            pending: BTreeMap::new(),
        }
    }

    fn begin(
        &mut self,
        rng: &mut ChaCha20Rng,
        host: HostId,
        instance: &str,
        expected_measurement: Digest,
        purpose: ChannelPurpose,
        fx: &mut Vec<Effect>,
    ) {
        if self.pending.contains_key(instance) {
            return;
        }
        let nonce = AttestationNonce::generate(rng);
        fx.push(Effect::Send {
            to: host.clone(),
            payload: Payload::AttestRequest {
                instance: instance.to_string(),
                nonce,
            },
        });
        fx.push(Effect::Log {
            step: "attest-begin",
            detail: format!("instance={instance} host={host}"),
        });
        self.pending.insert(
            instance.to_string(),
            PendingAttest {
                host,
                nonce,
                quote_digest: None,
                expected_measurement,
                purpose,
            },
        );
    }

    fn on_quote(&mut self, quote: &Quote, ias_host: &HostId, fx: &mut Vec<Effect>) {
        let Some(pending) = self.pending.get_mut(&quote.instance) else {
            return;
        };
        if quote.nonce != pending.nonce || pending.quote_digest.is_some() {
            fx.push(Effect::Log {
                step: "attest-fail",
                detail: format!("instance={} reason=nonce-mismatch", quote.instance),
            });
            return;
        }
        pending.quote_digest = Some(quote.digest());
        fx.push(Effect::Send {
            to: ias_host.clone(),
            payload: Payload::IasSubmit {
                quote: quote.clone(),
                reply_to: self.self_host.clone(),
            },
        });
    }

    /// Returns the purpose on success; the channel-open effect is already
    /// queued.
    fn on_report(
        &mut self,
        report: &AttestationReport,
        fx: &mut Vec<Effect>,
    ) -> Option<ChannelPurpose> {
        let instance = report.instance.clone();
        let Some(pending) = self.pending.get(&instance) else {
            return None;
        };
        if pending.quote_digest != Some(report.quote_digest) {
            fx.push(Effect::Log {
                step: "attest-fail",
                detail: format!("instance={instance} reason=unknown-quote"),
            });
            return None;
        }
        match validate_report(report, pending.expected_measurement, &self.service_pk) {
            Ok(()) => {
                let pending = self.pending.remove(&instance).expect("present");
                fx.push(Effect::Log {
                    step: "attest-pass",
                    detail: format!(
                        "instance={instance} measurement={}",
                        report.measurement.short()
                    ),
                });
                fx.push(Effect::OpenChannel {
                    host: pending.host,
                    instance,
                    report: report.clone(),
                    purpose: pending.purpose.clone(),
                });
                Some(pending.purpose)
            }
            Err(e) => {
                self.pending.remove(&instance);
                fx.push(Effect::Log {
                    step: "attest-fail",
                    detail: format!("instance={instance} reason={e}"),
                });
                None
            }
        }
    }

    fn on_nak(&mut self, nonce: &AttestationNonce, fx: &mut Vec<Effect>) {
        let stale: Vec<String> = self
            .pending
            .iter()
            .filter(|(_, p)| p.nonce == *nonce)
            .map(|(i, _)| i.clone())
            .collect();
        for instance in stale {
            self.pending.remove(&instance);
            fx.push(Effect::Log {
                step: "attest-fail",
                detail: format!("instance={instance} reason=service-refused-nonce"),
            });
        }
    }
}

// ---------------------------------------------------------------------------
// Owner
// ---------------------------------------------------------------------------

/// Per-owner setup the harness fixes before the run starts: the owner
/// already holds data and a sealing key; publishing the capsule is the first
/// protocol step, generating it is not.
#[derive(Debug)]
pub struct OwnerSetup {
    pub dataset: OwnerDataset,
    pub data_key: SymmetricKey,
    pub capsule: DataCapsule,
    pub price: u64,
    pub request_timeout_ms: u64,
    pub paradigm: Paradigm,
}

#[derive(Debug)]
pub struct OwnerActor {
    account: AccountId,
    signing: SigningKey,
    nonce: u64,
    rng: ChaCha20Rng,
    bulletin: Bulletin,
    setup: OwnerSetup,

    attester: Attester,
    channel_nonces: NonceSeq,
    broker_contract: Option<ContractId>,
    my_contract: Option<ContractId>,
    onboard_channel: Option<ChannelEnd>,
    provider_channel: Option<ChannelEnd>,
    job: Option<JobSpec>,
    my_record: Option<(u64, u64)>,
    commit_seen: Option<Digest>,
    slip: Option<KeySlip>,
    /// Result key learned from a sibling contract's landed completion. One
    /// key serves every record of the job, so a reveal anywhere is a reveal
    /// everywhere.
    public_kr: Option<Vec<u8>>,
    complete_submitted: bool,
    paid: bool,
}

impl OwnerActor {
    pub fn new(
        account: AccountId,
        signing: SigningKey,
        mut rng: ChaCha20Rng,
        bulletin: Bulletin,
        setup: OwnerSetup,
    ) -> Self {
        let host = HostId::new(account.as_str());
        let mut salt = [0u8; 16];
        rand::RngCore::fill_bytes(&mut rng, &mut salt);
        let channel_nonces = NonceSeq::new(salt, account.as_str());
        let attester = Attester::new(host, bulletin.ias_service.clone());
        OwnerActor {
            account,
            signing,
            nonce: 0,
            rng,
            bulletin,
            setup,
            attester,
            channel_nonces,
            broker_contract: None,
            my_contract: None,
            onboard_channel: None,
            provider_channel: None,
            job: None,
            my_record: None,
            commit_seen: None,
            slip: None,
            public_kr: None,
            complete_submitted: false,
            paid: false,
        }
    }

    pub fn descriptor(&self) -> &str {
        &self.setup.dataset.descriptor
    }

    fn build_tx(&mut self, target: TxTarget, call: Call, value: u64) -> SignedTransaction {
        let tx = SignedTransaction::build(
            self.account.clone(),
            target,
            call,
            value,
            self.nonce,
            &self.signing,
        );
        self.nonce += 1;
        tx
    }

    fn provision_payload(&self) -> ChannelPayload {
        ChannelPayload::Provision {
            descriptor: self.setup.dataset.descriptor.clone(),
            key: *self.setup.data_key.bytes(),
        }
    }

    fn try_complete(&mut self, now: u64, fx: &mut Vec<Effect>) {
        if self.complete_submitted {
            return;
        }
        let (Some(kr_hash), Some((idx, req_time)), Some(contract)) = (
            self.commit_seen,
            self.my_record,
            self.my_contract.clone(),
        ) else {
            return;
        };
        let slip_key = self
            .slip
            .as_ref()
            .filter(|s| hash(&s.kr) == kr_hash)
            .map(|s| s.kr.to_vec());
        let Some(kr) = slip_key.or_else(|| self.public_kr.clone()) else {
            if self.slip.is_some() {
                fx.push(Effect::Log {
                    step: "key-hash-divergence",
                    detail: format!("record={idx}"),
                });
            }
            return;
        };
        // Revealing the key close to the cancel deadline risks a reverted
        // release; better to keep it and let the record time out.
        let deadline = req_time + self.setup.request_timeout_ms;
        if now + self.bulletin.finalization_delay_ms > deadline {
            fx.push(Effect::Log {
                step: "completion-window-missed",
                detail: format!("record={idx} now={now} deadline={deadline}"),
            });
            return;
        }
        let tx = self.build_tx(
            TxTarget::Contract(contract),
            Call::owner(&OwnerCall::CompleteTransaction { idx, kr }),
            0,
        );
        fx.push(Effect::Log {
            step: "complete",
            detail: format!("record={idx}"),
        });
        fx.push(Effect::BroadcastTx(tx));
        self.complete_submitted = true;
    }

    fn on_receipts(&mut self, now: u64, receipts: &[Receipt], fx: &mut Vec<Effect>) {
        for r in receipts {
            if !ok(r) {
                continue;
            }
            match self.setup.paradigm {
                Paradigm::Brokered => {
                    if r.function == "deploy"
                        && r.sender == self.bulletin.broker
                        && self.broker_contract.is_none()
                    {
                        self.broker_contract = Some(ContractId::new(r.target.as_str()));
                        self.attester.begin(
                            &mut self.rng,
                            self.bulletin.broker_host(),
                            KEY_AGENT_INSTANCE,
                            self.bulletin.agent_measurement,
                            ChannelPurpose::Onboard {
                                descriptor: self.setup.dataset.descriptor.clone(),
                            },
                            fx,
                        );
                    }
                    // Payment arrives with the aggregate completion.
                    if r.function == "complete-transaction" && !self.paid {
                        let mine: u64 = r
                            .credits
                            .iter()
                            .filter(|(a, _)| *a == self.account)
                            .map(|(_, v)| v)
                            .sum();
                        if mine > 0 {
                            self.paid = true;
                            fx.push(Effect::Log {
                                step: "paid",
                                detail: format!("amount={mine}"),
                            });
                        }
                    }
                }
                Paradigm::PerOwner => {
                    if r.function == "deploy" && r.sender == self.account {
                        self.my_contract = Some(ContractId::new(r.target.as_str()));
                        fx.push(Effect::Log {
                            step: "deploy",
                            detail: format!("contract={}", r.target),
                        });
                    }
                    let mine = self
                        .my_contract
                        .as_ref()
                        .is_some_and(|c| c.as_str() == r.target);
                    if !mine {
                        // A completion landing on a sibling contract puts the
                        // job key on the chain. If its hash matches our own
                        // committed record we can complete without the slip.
                        if r.function == "complete-transaction"
                            && r.ret == RetValue::Unit
                            && self.public_kr.is_none()
                        {
                            if let Some(OwnerCall::CompleteTransaction { kr, .. }) =
                                decode_owner_call(r)
                            {
                                if self.commit_seen == Some(hash(&kr)) {
                                    fx.push(Effect::Log {
                                        step: "key-adopted",
                                        detail: format!("from={}", r.target),
                                    });
                                    self.public_kr = Some(kr);
                                    self.try_complete(now, fx);
                                }
                            }
                        }
                        continue;
                    }
                    match r.function.as_str() {
                        "request" => {
                            if let Some(idx) = r.record_idx {
                                self.my_record = Some((idx, r.finalized_at));
                            }
                        }
                        "computation-complete" => {
                            if let Some(OwnerCall::ComputationComplete { idx, kr_hash }) =
                                decode_owner_call(r)
                            {
                                if self.my_record.map(|(i, _)| i) == Some(idx) {
                                    self.commit_seen = Some(kr_hash);
                                    self.try_complete(now, fx);
                                }
                            }
                        }
                        "complete-transaction" => {
                            if r.ret == RetValue::Unit && !self.paid {
                                let mine: u64 = r
                                    .credits
                                    .iter()
                                    .filter(|(a, _)| *a == self.account)
                                    .map(|(_, v)| v)
                                    .sum();
                                if mine > 0 {
                                    self.paid = true;
                                    fx.push(Effect::Log {
                                        step: "paid",
                                        detail: format!("amount={mine}"),
                                    });
                                }
                            }
                        }
                        _ => {}
                    }
                }
            }
        }
    }
}

impl Actor for OwnerActor {
    fn name(&self) -> &str {
        self.account.as_str()
    }

    fn as_any(&self) -> &dyn std::any::Any {
        self
    }

    fn handle(&mut self, now: u64, input: Input, _ctx: &ActorCtx<'_>) -> Vec<Effect> {
        let mut fx = Vec::new();
        match input {
            Input::Start => {
                fx.push(Effect::StoreCapsule(self.setup.capsule.clone()));
                fx.push(Effect::Log {
                    step: "publish-capsule",
                    detail: format!("descriptor={}", self.setup.dataset.descriptor),
                });
                if self.setup.paradigm == Paradigm::PerOwner {
                    let policy = Policy {
                        dataset: BTreeSet::from([self.setup.dataset.descriptor.clone()]),
                        price: self.setup.price,
                        operation: self.bulletin.op_measurement,
                        consumers: BTreeSet::from([self.bulletin.dc.clone()]),
                        request_timeout_ms: self.setup.request_timeout_ms,
                    };
                    let tx = self.build_tx(
                        TxTarget::Deploy,
                        Call::deploy(&DeployArgs::Owner(policy)),
                        0,
                    );
                    fx.push(Effect::SubmitTx(tx));
                }
            }
            Input::Receipts(receipts) => self.on_receipts(now, &receipts, &mut fx),
            Input::Deliver(msg) => match msg.payload {
                Payload::Quote(q) => {
                    self.attester.on_quote(&q, &HostId::new("ias"), &mut fx);
                }
                Payload::IasReport(r) => {
                    self.attester.on_report(&r, &mut fx);
                }
                Payload::IasNak { nonce } => self.attester.on_nak(&nonce, &mut fx),
                Payload::JobAnnounce {
                    job,
                    instance,
                    host,
                } => {
                    if self.setup.paradigm == Paradigm::PerOwner
                        && msg.from == self.bulletin.dc_host()
                        && self.job.is_none()
                        && job.descriptors.contains(&self.setup.dataset.descriptor)
                    {
                        let job_id = job.job_id.clone();
                        self.job = Some(job);
                        self.attester.begin(
                            &mut self.rng,
                            host,
                            &instance,
                            self.bulletin.op_measurement,
                            ChannelPurpose::Provider { job_id },
                            &mut fx,
                        );
                    }
                }
                Payload::Channel(data) => {
                    let Some(end) = self.provider_channel.as_mut() else {
                        return fx;
                    };
                    match end.open(&data) {
                        Ok(payloads) => {
                            for bytes in payloads {
                                if let Ok(ChannelPayload::Slip(slip)) =
                                    ChannelPayload::from_bytes(&bytes)
                                {
                                    fx.push(Effect::Log {
                                        step: "slip-received",
                                        detail: format!("job={}", slip.job_id),
                                    });
                                    self.slip = Some(slip);
                                    self.try_complete(now, &mut fx);
                                }
                            }
                        }
                        Err(_) => fx.push(Effect::Log {
                            step: "channel-auth-failure",
                            detail: format!("channel={}", data.channel),
                        }),
                    }
                }
                _ => {}
            },
            Input::ChannelReady { purpose, end, .. } => match purpose {
                ChannelPurpose::Onboard { .. } => {
                    let mut end = end;
                    let payload = self.provision_payload().to_bytes();
                    let seg = end.seal(&mut self.channel_nonces, &payload);
                    self.onboard_channel = Some(end);
                    fx.push(Effect::Send {
                        to: self.bulletin.broker_host(),
                        payload: Payload::Channel(seg),
                    });
                    fx.push(Effect::Log {
                        step: "provision",
                        detail: format!("descriptor={}", self.setup.dataset.descriptor),
                    });
                    let contract = self.broker_contract.clone().expect("deploy seen");
                    let tx = self.build_tx(
                        TxTarget::Contract(contract),
                        Call::broker(&BrokerCall::Register {
                            op: self.bulletin.op_measurement,
                            dc: self.bulletin.dc.clone(),
                            price: self.setup.price,
                        }),
                        0,
                    );
                    fx.push(Effect::Log {
                        step: "register",
                        detail: format!("price={}", self.setup.price),
                    });
                    fx.push(Effect::SubmitTx(tx));
                }
                ChannelPurpose::Provider { .. } => {
                    let mut end = end;
                    let payload = self.provision_payload().to_bytes();
                    let seg = end.seal(&mut self.channel_nonces, &payload);
                    self.provider_channel = Some(end);
                    fx.push(Effect::Send {
                        to: self.bulletin.cloud_host.clone(),
                        payload: Payload::Channel(seg),
                    });
                    fx.push(Effect::Log {
                        step: "provision",
                        detail: format!("descriptor={}", self.setup.dataset.descriptor),
                    });
                }
                ChannelPurpose::Consumer { .. } => {}
            },
            Input::Wakeup(_) => {}
        }
        fx
    }
}

// ---------------------------------------------------------------------------
// Broker
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct BrokerSetup {
    pub request_timeout_ms: u64,
    pub expected: BTreeMap<AccountId, String>,
    /// Adversarial: reveal the key on-chain before the consumer commits.
    pub complete_early: bool,
}

#[derive(Debug)]
pub struct BrokerActor {
    account: AccountId,
    host: HostId,
    signing: SigningKey,
    platform: SigningKey,
    nonce: u64,
    rng: ChaCha20Rng,
    bulletin: Bulletin,
    setup: BrokerSetup,
    manifest: ProgramManifest,

    agent: Option<Enclave>,
    attester: Attester,
    contract: Option<ContractId>,
    registered: BTreeSet<AccountId>,
    onboarded: BTreeSet<String>,
    confirmed: bool,
    job: Option<JobSpec>,
    provider_channel: Option<ChannelId>,
    request_seen: Option<(u64, u64)>,
    commit_seen: Option<(u64, Digest)>,
    slip: Option<KeySlip>,
    early_attempted: bool,
    complete_submitted: bool,
}

impl BrokerActor {
    pub fn new(
        account: AccountId,
        signing: SigningKey,
        platform: SigningKey,
        rng: ChaCha20Rng,
        bulletin: Bulletin,
        manifest: ProgramManifest,
        setup: BrokerSetup,
    ) -> Self {
        let host = HostId::new(account.as_str());
        let attester = Attester::new(host.clone(), bulletin.ias_service.clone());
        BrokerActor {
            account,
            host,
            signing,
            platform,
            nonce: 0,
            rng,
            bulletin,
            setup,
            manifest,
            agent: None,
            attester,
            contract: None,
            registered: BTreeSet::new(),
            onboarded: BTreeSet::new(),
            confirmed: false,
            job: None,
            provider_channel: None,
            request_seen: None,
            commit_seen: None,
            slip: None,
            early_attempted: false,
            complete_submitted: false,
        }
    }

    fn build_tx(&mut self, target: TxTarget, call: Call, value: u64) -> SignedTransaction {
        let tx = SignedTransaction::build(
            self.account.clone(),
            target,
            call,
            value,
            self.nonce,
            &self.signing,
        );
        self.nonce += 1;
        tx
    }

    fn maybe_confirm(&mut self, fx: &mut Vec<Effect>) {
        if self.confirmed || self.contract.is_none() {
            return;
        }
        let owners_ready = self
            .setup
            .expected
            .keys()
            .all(|o| self.registered.contains(o));
        let data_ready = self
            .setup
            .expected
            .values()
            .all(|d| self.onboarded.contains(d));
        if !(owners_ready && data_ready) {
            return;
        }
        let owners: Vec<AccountId> = self.setup.expected.keys().cloned().collect();
        let tx = self.build_tx(
            TxTarget::Contract(self.contract.clone().expect("checked")),
            Call::broker(&BrokerCall::Confirm { owners }),
            0,
        );
        fx.push(Effect::Log {
            step: "confirm",
            detail: format!("owners={}", self.setup.expected.len()),
        });
        fx.push(Effect::SubmitTx(tx));
        self.confirmed = true;
    }

    fn complete_tx(&mut self, idx: u64, kr: Vec<u8>) -> SignedTransaction {
        self.build_tx(
            TxTarget::Contract(self.contract.clone().expect("contract known")),
            Call::broker(&BrokerCall::CompleteTransaction { idx, kr }),
            0,
        )
    }

    fn try_complete(&mut self, now: u64, fx: &mut Vec<Effect>) {
        if self.contract.is_none() {
            return;
        }
        // Premature release attempt: the record is not committed yet, so the
        // chain bounces this without paying or storing anything.
        if self.setup.complete_early && !self.early_attempted {
            if let (Some(slip), Some((idx, _))) = (self.slip.clone(), self.request_seen) {
                self.early_attempted = true;
                let tx = self.complete_tx(idx, slip.kr.to_vec());
                fx.push(Effect::Log {
                    step: "complete-early-attempt",
                    detail: format!("record={idx}"),
                });
                fx.push(Effect::BroadcastTx(tx));
            }
        }
        if self.complete_submitted {
            return;
        }
        let (Some(slip), Some((idx, req_time)), Some((cidx, kr_hash))) =
            (self.slip.clone(), self.request_seen, self.commit_seen)
        else {
            return;
        };
        if cidx != idx {
            return;
        }
        if hash(&slip.kr) != kr_hash {
            fx.push(Effect::Log {
                step: "key-hash-divergence",
                detail: format!("record={idx}"),
            });
            return;
        }
        let deadline = req_time + self.setup.request_timeout_ms;
        if now + self.bulletin.finalization_delay_ms > deadline {
            fx.push(Effect::Log {
                step: "completion-window-missed",
                detail: format!("record={idx} now={now} deadline={deadline}"),
            });
            return;
        }
        let tx = self.complete_tx(idx, slip.kr.to_vec());
        fx.push(Effect::Log {
            step: "complete",
            detail: format!("record={idx}"),
        });
        fx.push(Effect::BroadcastTx(tx));
        self.complete_submitted = true;
    }

    fn on_receipts(&mut self, now: u64, receipts: &[Receipt], fx: &mut Vec<Effect>) {
        for r in receipts {
            if !ok(r) {
                continue;
            }
            if r.function == "deploy" && r.sender == self.account && self.contract.is_none() {
                self.contract = Some(ContractId::new(r.target.as_str()));
                fx.push(Effect::Log {
                    step: "deploy",
                    detail: format!("contract={}", r.target),
                });
                self.maybe_confirm(fx);
                continue;
            }
            let mine = self
                .contract
                .as_ref()
                .is_some_and(|c| c.as_str() == r.target);
            if !mine {
                continue;
            }
            match r.function.as_str() {
                "register" => {
                    if let Some(BrokerCall::Register { op, dc, .. }) = decode_broker_call(r) {
                        if op == self.bulletin.op_measurement && dc == self.bulletin.dc {
                            self.registered.insert(r.sender.clone());
                            self.maybe_confirm(fx);
                        }
                    }
                }
                "request" => {
                    if let Some(idx) = r.record_idx {
                        self.request_seen = Some((idx, r.finalized_at));
                        self.try_complete(now, fx);
                    }
                }
                "computation-complete" => {
                    if let Some(BrokerCall::ComputationComplete { idx, kr_hash }) =
                        decode_broker_call(r)
                    {
                        self.commit_seen = Some((idx, kr_hash));
                        self.try_complete(now, fx);
                    }
                }
                "complete-transaction" => {
                    if r.ret == RetValue::Unit {
                        let idx = r.record_idx.unwrap_or_default();
                        fx.push(Effect::Log {
                            step: "completed",
                            detail: format!("record={idx}"),
                        });
                    }
                }
                _ => {}
            }
        }
    }

    fn forward_keys(&mut self, fx: &mut Vec<Effect>) {
        let (Some(agent), Some(channel), Some(job)) = (
            self.agent.as_mut(),
            self.provider_channel,
            self.job.as_ref(),
        ) else {
            return;
        };
        let mut descriptors = job.descriptors.clone();
        descriptors.sort();
        match agent.forward_keys(channel, &descriptors) {
            Ok(segs) => {
                fx.push(Effect::Log {
                    step: "forward-keys",
                    detail: format!("count={} channel={channel}", segs.len()),
                });
                for seg in segs {
                    fx.push(Effect::Send {
                        to: self.bulletin.cloud_host.clone(),
                        payload: Payload::Channel(seg),
                    });
                }
            }
            Err(e) => fx.push(Effect::Log {
                step: "forward-keys-failed",
                detail: e.to_string(),
            }),
        }
    }
}

impl Actor for BrokerActor {
    fn name(&self) -> &str {
        self.account.as_str()
    }

    fn as_any(&self) -> &dyn std::any::Any {
        self
    }

    fn handle(&mut self, now: u64, input: Input, _ctx: &ActorCtx<'_>) -> Vec<Effect> {
        let mut fx = Vec::new();
        match input {
            Input::Start => {
                let program = self
                    .manifest
                    .get("key-agent")
                    .expect("key agent in manifest")
                    .clone();
                let mut salt = [0u8; 16];
                rand::RngCore::fill_bytes(&mut self.rng, &mut salt);
                self.agent = Some(Enclave::load(
                    self.host.clone(),
                    program,
                    KEY_AGENT_INSTANCE,
                    salt,
                ));
                fx.push(Effect::Log {
                    step: "agent-loaded",
                    detail: format!("instance={KEY_AGENT_INSTANCE}"),
                });
                let config = BrokerConfig {
                    operations: BTreeSet::from([self.bulletin.op_measurement]),
                    request_timeout_ms: self.setup.request_timeout_ms,
                };
                let tx = self.build_tx(
                    TxTarget::Deploy,
                    Call::deploy(&DeployArgs::Broker(config)),
                    0,
                );
                fx.push(Effect::SubmitTx(tx));
            }
            Input::Receipts(receipts) => self.on_receipts(now, &receipts, &mut fx),
            Input::Deliver(msg) => match msg.payload {
                Payload::AttestRequest { instance, nonce } => {
                    if let Some(agent) = self.agent.as_ref() {
                        if agent.instance() == instance {
                            let quote = agent.quote(nonce, &self.platform);
                            fx.push(Effect::Send {
                                to: msg.from,
                                payload: Payload::Quote(quote),
                            });
                        }
                    }
                }
                Payload::Channel(data) => {
                    let Some(agent) = self.agent.as_mut() else {
                        return fx;
                    };
                    match agent.receive(&data) {
                        Ok(events) => {
                            for ev in events {
                                match ev {
                                    EnclaveEvent::ProvisionStored { descriptor } => {
                                        self.onboarded.insert(descriptor.clone());
                                        fx.push(Effect::Log {
                                            step: "onboard",
                                            detail: format!("descriptor={descriptor}"),
                                        });
                                        self.maybe_confirm(&mut fx);
                                    }
                                    EnclaveEvent::SlipReleased { slip } => {
                                        fx.push(Effect::Log {
                                            step: "slip-received",
                                            detail: format!("job={}", slip.job_id),
                                        });
                                        self.slip = Some(slip);
                                        self.try_complete(now, &mut fx);
                                    }
                                    _ => {}
                                }
                            }
                        }
                        Err(e) => fx.push(Effect::Log {
                            step: "channel-auth-failure",
                            detail: format!("channel={} err={e}", data.channel),
                        }),
                    }
                }
                Payload::JobAnnounce {
                    job,
                    instance,
                    host,
                } => {
                    if msg.from == self.bulletin.dc_host() && self.job.is_none() {
                        let job_id = job.job_id.clone();
                        self.job = Some(job);
                        self.attester.begin(
                            &mut self.rng,
                            host,
                            &instance,
                            self.bulletin.op_measurement,
                            ChannelPurpose::Provider { job_id },
                            &mut fx,
                        );
                    }
                }
                Payload::Quote(q) => self.attester.on_quote(&q, &HostId::new("ias"), &mut fx),
                Payload::IasReport(r) => {
                    self.attester.on_report(&r, &mut fx);
                }
                Payload::IasNak { nonce } => self.attester.on_nak(&nonce, &mut fx),
                _ => {}
            },
            Input::ChannelReady { purpose, end, .. } => match purpose {
                // Far side of an owner's onboarding handshake: the channel
                // terminates inside the key agent.
                ChannelPurpose::Onboard { .. } => {
                    if let Some(agent) = self.agent.as_mut() {
                        agent.install_channel(end);
                    }
                }
                // Provider path this broker opened toward the compute
                // enclave; it also terminates inside the key agent.
                ChannelPurpose::Provider { .. } => {
                    if let Some(agent) = self.agent.as_mut() {
                        self.provider_channel = Some(end.id);
                        agent.install_channel(end);
                        self.forward_keys(&mut fx);
                    }
                }
                ChannelPurpose::Consumer { .. } => {}
            },
            Input::Wakeup(_) => {}
        }
        fx
    }
}

// ---------------------------------------------------------------------------
// Consumer
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct ConsumerSetup {
    pub paradigm: Paradigm,
    pub owners: Vec<AccountId>,
    pub descriptor_of: BTreeMap<AccountId, String>,
}

#[derive(Debug, Default)]
struct RecordTrack {
    idx: u64,
    committed: bool,
    complete: bool,
    canceled: bool,
}

#[derive(Debug)]
pub struct ConsumerActor {
    account: AccountId,
    signing: SigningKey,
    nonce: u64,
    rng: ChaCha20Rng,
    bulletin: Bulletin,
    setup: ConsumerSetup,

    attester: Attester,
    owner_contracts: BTreeMap<AccountId, (ContractId, u64, u64)>,
    broker_contract: Option<(ContractId, u64)>,
    registry_mirror: BTreeMap<AccountId, u64>,
    requests_submitted: bool,
    records: BTreeMap<ContractId, RecordTrack>,
    job: Option<JobSpec>,
    consumer_channel: Option<ChannelEnd>,
    bundle: Option<ResultBundle>,
    committed: bool,
    result: Option<StatsResult>,
    aborted: bool,
}

impl ConsumerActor {
    pub fn new(
        account: AccountId,
        signing: SigningKey,
        rng: ChaCha20Rng,
        bulletin: Bulletin,
        setup: ConsumerSetup,
    ) -> Self {
        let host = HostId::new(account.as_str());
        let attester = Attester::new(host, bulletin.ias_service.clone());
        ConsumerActor {
            account,
            signing,
            nonce: 0,
            rng,
            bulletin,
            setup,
            attester,
            owner_contracts: BTreeMap::new(),
            broker_contract: None,
            registry_mirror: BTreeMap::new(),
            requests_submitted: false,
            records: BTreeMap::new(),
            job: None,
            consumer_channel: None,
            bundle: None,
            committed: false,
            result: None,
            aborted: false,
        }
    }

    pub fn result(&self) -> Option<&StatsResult> {
        self.result.as_ref()
    }

    fn build_tx(&mut self, target: TxTarget, call: Call, value: u64) -> SignedTransaction {
        let tx = SignedTransaction::build(
            self.account.clone(),
            target,
            call,
            value,
            self.nonce,
            &self.signing,
        );
        self.nonce += 1;
        tx
    }

    fn expected_records(&self) -> usize {
        match self.setup.paradigm {
            Paradigm::PerOwner => self.setup.owners.len(),
            Paradigm::Brokered => 1,
        }
    }

    fn maybe_request(&mut self, fx: &mut Vec<Effect>) {
        if self.requests_submitted {
            return;
        }
        match self.setup.paradigm {
            Paradigm::PerOwner => {
                if !self
                    .setup
                    .owners
                    .iter()
                    .all(|o| self.owner_contracts.contains_key(o))
                {
                    return;
                }
                for owner in self.setup.owners.clone() {
                    let (contract, price, _) = self.owner_contracts[&owner].clone();
                    let descriptor = self.setup.descriptor_of[&owner].clone();
                    let tx = self.build_tx(
                        TxTarget::Contract(contract),
                        Call::owner(&OwnerCall::Request {
                            op: self.bulletin.op_measurement,
                            data: BTreeSet::from([descriptor]),
                        }),
                        price,
                    );
                    fx.push(Effect::Log {
                        step: "request",
                        detail: format!("owner={owner} deposit={price}"),
                    });
                    fx.push(Effect::SubmitTx(tx));
                }
                self.requests_submitted = true;
            }
            Paradigm::Brokered => {
                let Some((contract, _)) = self.broker_contract.clone() else {
                    return;
                };
                if !self
                    .setup
                    .owners
                    .iter()
                    .all(|o| self.registry_mirror.contains_key(o))
                {
                    return;
                }
                let deposit: u64 = self
                    .setup
                    .owners
                    .iter()
                    .map(|o| self.registry_mirror[o])
                    .sum();
                let targets: BTreeSet<AccountId> = self.setup.owners.iter().cloned().collect();
                let tx = self.build_tx(
                    TxTarget::Contract(contract),
                    Call::broker(&BrokerCall::Request {
                        op: self.bulletin.op_measurement,
                        targets,
                    }),
                    deposit,
                );
                fx.push(Effect::Log {
                    step: "request",
                    detail: format!("deposit={deposit}"),
                });
                fx.push(Effect::SubmitTx(tx));
                self.requests_submitted = true;
            }
        }
    }

    fn maybe_load_job(&mut self, fx: &mut Vec<Effect>) {
        if self.job.is_some() || self.records.len() < self.expected_records() {
            return;
        }
        let bindings: Vec<RecordBinding> = self
            .records
            .iter()
            .map(|(c, t)| RecordBinding {
                contract: c.clone(),
                idx: t.idx,
            })
            .collect();
        let mut descriptors: Vec<String> = self.setup.descriptor_of.values().cloned().collect();
        descriptors.sort();
        let job = JobSpec {
            job_id: "job-0".into(),
            op_id: self.bulletin.op_id.clone(),
            bindings,
            descriptors,
        };
        fx.push(Effect::Log {
            step: "load-cee",
            detail: format!("job={} records={}", job.job_id, self.records.len()),
        });
        fx.push(Effect::Send {
            to: self.bulletin.cloud_host.clone(),
            payload: Payload::LoadEnclave { job: job.clone() },
        });
        self.job = Some(job);
    }

    /// Commit to the result key on every record still open.
    fn commit(&mut self, fx: &mut Vec<Effect>) {
        if self.committed || self.aborted {
            return;
        }
        let Some(bundle) = self.bundle.as_ref() else {
            return;
        };
        let kr_hash = bundle.kr_hash;
        let open: Vec<(ContractId, u64)> = self
            .records
            .iter()
            .filter(|(_, t)| !t.canceled && !t.complete)
            .map(|(c, t)| (c.clone(), t.idx))
            .collect();
        if open.len() != self.records.len() {
            fx.push(Effect::Log {
                step: "commit-skipped",
                detail: "some records already closed".into(),
            });
            return;
        }
        for (contract, idx) in open {
            let call = match self.setup.paradigm {
                Paradigm::PerOwner => Call::owner(&OwnerCall::ComputationComplete { idx, kr_hash }),
                Paradigm::Brokered => {
                    Call::broker(&BrokerCall::ComputationComplete { idx, kr_hash })
                }
            };
            let tx = self.build_tx(TxTarget::Contract(contract.clone()), call, 0);
            fx.push(Effect::Log {
                step: "commit",
                detail: format!("contract={contract} record={idx} kr-hash={}", kr_hash.short()),
            });
            fx.push(Effect::SubmitTx(tx));
            self.records.get_mut(&contract).expect("tracked").committed = true;
        }
        self.committed = true;
    }

    /// A successful key release: check it against the committed bundle and
    /// decrypt.
    fn on_key_release(&mut self, contract: &ContractId, kr: &[u8], fx: &mut Vec<Effect>) {
        let Some(track) = self.records.get_mut(contract) else {
            return;
        };
        if track.complete {
            return;
        }
        track.complete = true;
        fx.push(Effect::ClearWakeup {
            tag: WakeTag::CancelRecord {
                contract: contract.clone(),
                idx: track.idx,
            },
        });
        let Some(bundle) = self.bundle.as_ref() else {
            return;
        };
        if hash(kr) != bundle.kr_hash {
            fx.push(Effect::Log {
                step: "key-hash-divergence",
                detail: format!("contract={contract}"),
            });
            return;
        }
        // One key unlocks every record of this job. Once it is public each
        // remaining owner can complete on their own; canceling now would
        // take the result without paying, so stand down all pending cancels.
        for (c, t) in &self.records {
            if c != contract && !t.complete && !t.canceled {
                fx.push(Effect::ClearWakeup {
                    tag: WakeTag::CancelRecord {
                        contract: c.clone(),
                        idx: t.idx,
                    },
                });
            }
        }
        if self.result.is_none() {
            let key = SymmetricKey::from_bytes(
                kr.try_into().expect("32-byte key"),
                crate::crypto::KeyRole::Result,
            );
            let ad = bindings_ad(&bundle.bindings);
            match crate::crypto::aead_decrypt(&key, &bundle.c_result, &ad)
                .ok()
                .and_then(|plain| StatsResult::from_bytes(&plain).ok())
            {
                Some(stats) => {
                    fx.push(Effect::Log {
                        step: "result-verified",
                        detail: format!(
                            "columns={} kr-hash={}",
                            stats.columns.len(),
                            bundle.kr_hash.short()
                        ),
                    });
                    self.result = Some(stats);
                }
                None => fx.push(Effect::Log {
                    step: "result-invalid",
                    detail: format!("contract={contract}"),
                }),
            }
        }
    }

    fn on_receipts(&mut self, _now: u64, receipts: &[Receipt], fx: &mut Vec<Effect>) {
        for r in receipts {
            if !ok(r) {
                continue;
            }
            if r.function == "deploy" {
                match (self.setup.paradigm, decode_deploy(r)) {
                    (Paradigm::PerOwner, Some(DeployArgs::Owner(policy))) => {
                        if self.setup.owners.contains(&r.sender)
                            && policy.operation == self.bulletin.op_measurement
                            && policy.consumers.contains(&self.account)
                        {
                            self.owner_contracts.insert(
                                r.sender.clone(),
                                (
                                    ContractId::new(r.target.as_str()),
                                    policy.price,
                                    policy.request_timeout_ms,
                                ),
                            );
                            self.maybe_request(fx);
                        }
                    }
                    (Paradigm::Brokered, Some(DeployArgs::Broker(config))) => {
                        if r.sender == self.bulletin.broker {
                            self.broker_contract = Some((
                                ContractId::new(r.target.as_str()),
                                config.request_timeout_ms,
                            ));
                        }
                    }
                    _ => {}
                }
                continue;
            }

            let tracked_contract = self.records.keys().any(|c| c.as_str() == r.target);
            match r.function.as_str() {
                "register" => {
                    if let Some((contract, _)) = self.broker_contract.as_ref() {
                        if contract.as_str() == r.target {
                            if let Some(BrokerCall::Register { op, dc, price }) =
                                decode_broker_call(r)
                            {
                                if op == self.bulletin.op_measurement && dc == self.account {
                                    self.registry_mirror.insert(r.sender.clone(), price);
                                }
                            }
                        }
                    }
                }
                "confirm" => {
                    if self
                        .broker_contract
                        .as_ref()
                        .is_some_and(|(c, _)| c.as_str() == r.target)
                    {
                        self.maybe_request(fx);
                    }
                }
                "request" if r.sender == self.account => {
                    if r.ret == RetValue::Refunded {
                        self.aborted = true;
                        fx.push(Effect::Log {
                            step: "request-refused",
                            detail: format!("contract={}", r.target),
                        });
                        continue;
                    }
                    let Some(idx) = r.record_idx else { continue };
                    let contract = ContractId::new(r.target.as_str());
                    let timeout_ms = match self.setup.paradigm {
                        Paradigm::PerOwner => self
                            .owner_contracts
                            .values()
                            .find(|(c, _, _)| c == &contract)
                            .map(|(_, _, t)| *t)
                            .unwrap_or_default(),
                        Paradigm::Brokered => self
                            .broker_contract
                            .as_ref()
                            .map(|(_, t)| *t)
                            .unwrap_or_default(),
                    };
                    let tag = WakeTag::CancelRecord {
                        contract: contract.clone(),
                        idx,
                    };
                    fx.push(Effect::Log {
                        step: "record-open",
                        detail: format!("contract={contract} record={idx} escrow={}", r.value),
                    });
                    fx.push(Effect::Wakeup {
                        at_ms: r.finalized_at + timeout_ms + 1,
                        tag,
                    });
                    self.records.insert(
                        contract,
                        RecordTrack {
                            idx,
                            ..RecordTrack::default()
                        },
                    );
                    self.maybe_load_job(fx);
                }
                "complete-transaction" if tracked_contract && r.ret == RetValue::Unit => {
                    let contract = ContractId::new(r.target.as_str());
                    let kr = match self.setup.paradigm {
                        Paradigm::PerOwner => match decode_owner_call(r) {
                            Some(OwnerCall::CompleteTransaction { kr, .. }) => kr,
                            _ => continue,
                        },
                        Paradigm::Brokered => match decode_broker_call(r) {
                            Some(BrokerCall::CompleteTransaction { kr, .. }) => kr,
                            _ => continue,
                        },
                    };
                    self.on_key_release(&contract, &kr, fx);
                }
                "cancel" if r.sender == self.account && r.ret == RetValue::Unit => {
                    let contract = ContractId::new(r.target.as_str());
                    if let Some(track) = self.records.get_mut(&contract) {
                        track.canceled = true;
                        fx.push(Effect::Log {
                            step: "canceled",
                            detail: format!("contract={contract} refund={}", r.credits_sum()),
                        });
                    }
                }
                _ => {}
            }
        }
    }
}

trait CreditSum {
    fn credits_sum(&self) -> u64;
}

impl CreditSum for Receipt {
    fn credits_sum(&self) -> u64 {
        self.credits.iter().map(|(_, v)| v).sum()
    }
}

impl Actor for ConsumerActor {
    fn name(&self) -> &str {
        self.account.as_str()
    }

    fn as_any(&self) -> &dyn std::any::Any {
        self
    }

    fn handle(&mut self, now: u64, input: Input, _ctx: &ActorCtx<'_>) -> Vec<Effect> {
        let mut fx = Vec::new();
        match input {
            Input::Start => {}
            Input::Receipts(receipts) => self.on_receipts(now, &receipts, &mut fx),
            Input::Deliver(msg) => match msg.payload {
                Payload::EnclaveLoaded {
                    job_id,
                    instance,
                    host,
                    ..
                } => {
                    let Some(job) = self.job.clone() else {
                        return fx;
                    };
                    if job.job_id != job_id || msg.from != self.bulletin.cloud_host {
                        return fx;
                    }
                    self.attester.begin(
                        &mut self.rng,
                        host.clone(),
                        &instance,
                        self.bulletin.op_measurement,
                        ChannelPurpose::Consumer {
                            job_id: job_id.clone(),
                        },
                        &mut fx,
                    );
                    let announce = |to: HostId| Effect::Send {
                        to,
                        payload: Payload::JobAnnounce {
                            job: job.clone(),
                            instance: instance.clone(),
                            host: host.clone(),
                        },
                    };
                    match self.setup.paradigm {
                        Paradigm::PerOwner => {
                            for owner in &self.setup.owners {
                                fx.push(announce(HostId::new(owner.as_str())));
                            }
                        }
                        Paradigm::Brokered => {
                            fx.push(announce(self.bulletin.broker_host()));
                        }
                    }
                }
                Payload::Quote(q) => self.attester.on_quote(&q, &HostId::new("ias"), &mut fx),
                Payload::IasReport(r) => {
                    if self.attester.on_report(&r, &mut fx).is_none()
                        && !self.attester.pending.contains_key(&r.instance)
                    {
                        // A failed verdict on the compute enclave kills the
                        // job before any money is committed further.
                        self.aborted = true;
                    }
                }
                Payload::IasNak { nonce } => self.attester.on_nak(&nonce, &mut fx),
                Payload::Channel(data) => {
                    let Some(end) = self.consumer_channel.as_mut() else {
                        return fx;
                    };
                    match end.open(&data) {
                        Ok(payloads) => {
                            for bytes in payloads {
                                let Ok(ChannelPayload::Bundle(bundle)) =
                                    ChannelPayload::from_bytes(&bytes)
                                else {
                                    continue;
                                };
                                let job_match = self
                                    .job
                                    .as_ref()
                                    .is_some_and(|j| j.job_id == bundle.job_id);
                                let mut expected = self
                                    .job
                                    .as_ref()
                                    .map(|j| j.bindings.clone())
                                    .unwrap_or_default();
                                expected.sort();
                                let mut got = bundle.bindings.clone();
                                got.sort();
                                if !job_match
                                    || expected != got
                                    || bundle.c_hash != bundle.c_result.digest()
                                {
                                    fx.push(Effect::Log {
                                        step: "bundle-invalid",
                                        detail: format!("job={}", bundle.job_id),
                                    });
                                    self.aborted = true;
                                    continue;
                                }
                                fx.push(Effect::Log {
                                    step: "bundle-ok",
                                    detail: format!(
                                        "job={} c-hash={} kr-hash={}",
                                        bundle.job_id,
                                        bundle.c_hash.short(),
                                        bundle.kr_hash.short()
                                    ),
                                });
                                self.bundle = Some(bundle);
                                self.commit(&mut fx);
                            }
                        }
                        Err(_) => {
                            fx.push(Effect::Log {
                                step: "channel-auth-failure",
                                detail: format!("channel={}", data.channel),
                            });
                            self.aborted = true;
                        }
                    }
                }
                _ => {}
            },
            Input::ChannelReady { purpose, end, .. } => {
                if let ChannelPurpose::Consumer { .. } = purpose {
                    self.consumer_channel = Some(end);
                }
            }
            Input::Wakeup(WakeTag::CancelRecord { contract, idx }) => {
                let open = self
                    .records
                    .get(&contract)
                    .is_some_and(|t| !t.complete && !t.canceled);
                if open {
                    let call = match self.setup.paradigm {
                        Paradigm::PerOwner => Call::owner(&OwnerCall::Cancel { idx }),
                        Paradigm::Brokered => Call::broker(&BrokerCall::Cancel { idx }),
                    };
                    let tx = self.build_tx(TxTarget::Contract(contract.clone()), call, 0);
                    fx.push(Effect::Log {
                        step: "cancel",
                        detail: format!("contract={contract} record={idx}"),
                    });
                    fx.push(Effect::SubmitTx(tx));
                }
            }
        }
        fx
    }
}

// ---------------------------------------------------------------------------
// Cloud execution host
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct CloudActor {
    host: HostId,
    platform: SigningKey,
    rng: ChaCha20Rng,
    manifest: ProgramManifest,

    enclaves: BTreeMap<String, Enclave>,
    jobs: BTreeMap<String, JobSpec>,
    instance_of_job: BTreeMap<String, String>,
    channel_peers: BTreeMap<ChannelId, HostId>,
    consumer_channels: BTreeMap<String, ChannelId>,
    provider_channels: BTreeMap<String, Vec<ChannelId>>,
    provisioned: BTreeMap<String, BTreeSet<String>>,
    executed: BTreeSet<String>,
}

impl CloudActor {
    pub fn new(
        host: HostId,
        platform: SigningKey,
        rng: ChaCha20Rng,
        manifest: ProgramManifest,
    ) -> Self {
        CloudActor {
            host,
            platform,
            rng,
            manifest,
            enclaves: BTreeMap::new(),
            jobs: BTreeMap::new(),
            instance_of_job: BTreeMap::new(),
            channel_peers: BTreeMap::new(),
            consumer_channels: BTreeMap::new(),
            provider_channels: BTreeMap::new(),
            provisioned: BTreeMap::new(),
            executed: BTreeSet::new(),
        }
    }

    fn try_execute(&mut self, ctx: &ActorCtx<'_>, job_id: &str, fx: &mut Vec<Effect>) {
        if self.executed.contains(job_id) {
            return;
        }
        let (Some(job), Some(instance), Some(consumer)) = (
            self.jobs.get(job_id),
            self.instance_of_job.get(job_id),
            self.consumer_channels.get(job_id).copied(),
        ) else {
            return;
        };
        let have = self.provisioned.get(instance.as_str());
        let keys_ready = job
            .descriptors
            .iter()
            .all(|d| have.is_some_and(|s| s.contains(d)));
        let capsules_ready = job.descriptors.iter().all(|d| ctx.capsules.contains_key(d));
        if !(keys_ready && capsules_ready) {
            return;
        }
        let providers = self
            .provider_channels
            .get(job_id)
            .cloned()
            .unwrap_or_default();
        let job = job.clone();
        let instance = instance.clone();
        self.executed.insert(job_id.to_string());
        let enclave = self.enclaves.get_mut(&instance).expect("loaded");
        match enclave.execute(&job, ctx.capsules, consumer, &providers, &mut self.rng) {
            Ok(segments) => {
                fx.push(Effect::Log {
                    step: "execute",
                    detail: format!(
                        "job={job_id} outputs={} sanitized={}",
                        segments.len(),
                        enclave.is_sanitized()
                    ),
                });
                for (channel, data) in segments {
                    let Some(peer) = self.channel_peers.get(&channel) else {
                        continue;
                    };
                    fx.push(Effect::Send {
                        to: peer.clone(),
                        payload: Payload::Channel(data),
                    });
                }
            }
            Err(e) => fx.push(Effect::Log {
                step: "execute-failed",
                detail: format!("job={job_id} err={e} sanitized={}", enclave.is_sanitized()),
            }),
        }
    }
}

impl Actor for CloudActor {
    fn name(&self) -> &str {
        self.host.as_str()
    }

    fn as_any(&self) -> &dyn std::any::Any {
        self
    }

    fn handle(&mut self, _now: u64, input: Input, ctx: &ActorCtx<'_>) -> Vec<Effect> {
        let mut fx = Vec::new();
        match input {
            Input::Start => {}
            Input::Receipts(_) => {}
            Input::Deliver(msg) => match msg.payload {
                Payload::LoadEnclave { job } => {
                    let Some(program) = self.manifest.get(&job.op_id).cloned() else {
                        fx.push(Effect::Log {
                            step: "load-rejected",
                            detail: format!("unknown op {}", job.op_id),
                        });
                        return fx;
                    };
                    let instance = format!("cee-{}", job.job_id);
                    let mut salt = [0u8; 16];
                    rand::RngCore::fill_bytes(&mut self.rng, &mut salt);
                    let enclave = Enclave::load(self.host.clone(), program, &instance, salt);
                    let measurement = enclave.measurement();
                    fx.push(Effect::Log {
                        step: "enclave-loaded",
                        detail: format!("instance={instance} measurement={}", measurement.short()),
                    });
                    fx.push(Effect::Send {
                        to: msg.from,
                        payload: Payload::EnclaveLoaded {
                            job_id: job.job_id.clone(),
                            instance: instance.clone(),
                            host: self.host.clone(),
                            measurement,
                        },
                    });
                    self.instance_of_job.insert(job.job_id.clone(), instance.clone());
                    self.enclaves.insert(instance, enclave);
                    self.jobs.insert(job.job_id.clone(), job);
                }
                Payload::AttestRequest { instance, nonce } => {
                    if let Some(enclave) = self.enclaves.get(&instance) {
                        fx.push(Effect::Send {
                            to: msg.from,
                            payload: Payload::Quote(enclave.quote(nonce, &self.platform)),
                        });
                    }
                }
                Payload::Channel(data) => {
                    let Some(instance) = self
                        .enclaves
                        .iter()
                        .find(|(_, e)| e.has_channel(data.channel))
                        .map(|(i, _)| i.clone())
                    else {
                        return fx;
                    };
                    let enclave = self.enclaves.get_mut(&instance).expect("present");
                    match enclave.receive(&data) {
                        Ok(events) => {
                            let mut jobs_to_check: BTreeSet<String> = BTreeSet::new();
                            for ev in events {
                                if let EnclaveEvent::ProvisionStored { descriptor } = ev {
                                    fx.push(Effect::Log {
                                        step: "key-received",
                                        detail: format!(
                                            "instance={instance} descriptor={descriptor}"
                                        ),
                                    });
                                    self.provisioned
                                        .entry(instance.clone())
                                        .or_default()
                                        .insert(descriptor);
                                    for (job_id, inst) in &self.instance_of_job {
                                        if inst == &instance {
                                            jobs_to_check.insert(job_id.clone());
                                        }
                                    }
                                }
                            }
                            for job_id in jobs_to_check {
                                self.try_execute(ctx, &job_id, &mut fx);
                            }
                        }
                        Err(e) => fx.push(Effect::Log {
                            step: "channel-auth-failure",
                            detail: format!("channel={} err={e}", data.channel),
                        }),
                    }
                }
                _ => {}
            },
            Input::ChannelReady {
                purpose,
                instance,
                peer,
                end,
            } => {
                let channel = end.id;
                if let Some(enclave) = self.enclaves.get_mut(&instance) {
                    enclave.install_channel(end);
                } else {
                    return fx;
                }
                self.channel_peers.insert(channel, peer);
                match purpose {
                    ChannelPurpose::Consumer { job_id } => {
                        self.consumer_channels.insert(job_id.clone(), channel);
                        self.try_execute(ctx, &job_id, &mut fx);
                    }
                    ChannelPurpose::Provider { job_id } => {
                        self.provider_channels
                            .entry(job_id.clone())
                            .or_default()
                            .push(channel);
                        self.try_execute(ctx, &job_id, &mut fx);
                    }
                    ChannelPurpose::Onboard { .. } => {}
                }
            }
            Input::Wakeup(_) => {}
        }
        fx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::KeyRole;
    use crate::dataset::seal_dataset;
    use crate::tee::{CodeDescriptor, COLUMN_STATS_SOURCE, KEY_AGENT_SOURCE};
    use rand::{RngCore, SeedableRng};

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    fn manifest() -> ProgramManifest {
        let mut m = ProgramManifest::default();
        m.register(
            "column-stats",
            CodeDescriptor {
                source: COLUMN_STATS_SOURCE.into(),
            },
        );
        m.register(
            "key-agent",
            CodeDescriptor {
                source: KEY_AGENT_SOURCE.into(),
            },
        );
        m
    }

    fn bulletin(r: &mut ChaCha20Rng) -> Bulletin {
        let m = manifest();
        Bulletin {
            op_id: "column-stats".into(),
            op_measurement: m.measurement("column-stats").unwrap(),
            agent_measurement: m.measurement("key-agent").unwrap(),
            ias_service: SigningKey::generate(r).public(),
            cloud_host: HostId::new("cloud"),
            broker: AccountId::new("db"),
            dc: AccountId::new("dc"),
            finalization_delay_ms: 50,
        }
    }

    fn owner_setup(r: &mut ChaCha20Rng, paradigm: Paradigm) -> OwnerSetup {
        let dataset = OwnerDataset::generate("o1-data", 4, 2, r);
        let data_key = SymmetricKey::generate(r, KeyRole::Data);
        let mut nonce = [0u8; 12];
        r.fill_bytes(&mut nonce);
        let capsule = seal_dataset(&dataset, &data_key, nonce).unwrap();
        OwnerSetup {
            dataset,
            data_key,
            capsule,
            price: 10_000,
            request_timeout_ms: 60_000,
            paradigm,
        }
    }

    #[test]
    fn per_owner_start_publishes_and_deploys() {
        let mut r = rng(1);
        let b = bulletin(&mut r);
        let setup = owner_setup(&mut r, Paradigm::PerOwner);
        let mut owner = OwnerActor::new(
            AccountId::new("o1"),
            SigningKey::generate(&mut r),
            rng(2),
            b,
            setup,
        );
        let ctx = ActorCtx {
            capsules: &BTreeMap::new(),
        };
        let fx = owner.handle(0, Input::Start, &ctx);
        assert!(matches!(fx[0], Effect::StoreCapsule(_)));
        let deploy = fx.iter().find_map(|e| match e {
            Effect::SubmitTx(tx) => Some(tx),
            _ => None,
        });
        let tx = deploy.expect("deploys own contract");
        assert_eq!(tx.target, TxTarget::Deploy);
        assert_eq!(tx.call.function, "deploy");
    }

    #[test]
    fn brokered_start_publishes_without_deploying() {
        let mut r = rng(3);
        let b = bulletin(&mut r);
        let setup = owner_setup(&mut r, Paradigm::Brokered);
        let mut owner = OwnerActor::new(
            AccountId::new("o1"),
            SigningKey::generate(&mut r),
            rng(4),
            b,
            setup,
        );
        let ctx = ActorCtx {
            capsules: &BTreeMap::new(),
        };
        let fx = owner.handle(0, Input::Start, &ctx);
        assert!(fx.iter().any(|e| matches!(e, Effect::StoreCapsule(_))));
        assert!(!fx.iter().any(|e| matches!(e, Effect::SubmitTx(_))));
    }

    #[test]
    fn completion_window_guard_withholds_the_key_near_the_deadline() {
        let mut r = rng(5);
        let b = bulletin(&mut r);
        let setup = owner_setup(&mut r, Paradigm::PerOwner);
        let timeout = setup.request_timeout_ms;
        let mut owner = OwnerActor::new(
            AccountId::new("o1"),
            SigningKey::generate(&mut r),
            rng(6),
            b,
            setup,
        );
        owner.my_contract = Some(ContractId::new("c0"));
        owner.my_record = Some((0, 1_000));
        let kr = [9u8; 32];
        owner.slip = Some(KeySlip {
            job_id: "job-0".into(),
            kr,
        });
        owner.commit_seen = Some(hash(&kr));

        // Too late: within one finalization delay of the deadline.
        let mut fx = Vec::new();
        owner.try_complete(1_000 + timeout - 10, &mut fx);
        assert!(fx
            .iter()
            .any(|e| matches!(e, Effect::Log { step, .. } if *step == "completion-window-missed")));
        assert!(!owner.complete_submitted);

        // In time: broadcast goes out.
        let mut fx = Vec::new();
        owner.try_complete(5_000, &mut fx);
        assert!(fx.iter().any(|e| matches!(e, Effect::BroadcastTx(_))));
        assert!(owner.complete_submitted);
    }

    #[test]
    fn owner_refuses_key_whose_hash_does_not_match_the_commitment() {
        let mut r = rng(7);
        let b = bulletin(&mut r);
        let setup = owner_setup(&mut r, Paradigm::PerOwner);
        let mut owner = OwnerActor::new(
            AccountId::new("o1"),
            SigningKey::generate(&mut r),
            rng(8),
            b,
            setup,
        );
        owner.my_contract = Some(ContractId::new("c0"));
        owner.my_record = Some((0, 1_000));
        owner.slip = Some(KeySlip {
            job_id: "job-0".into(),
            kr: [9u8; 32],
        });
        owner.commit_seen = Some(hash(b"something else"));
        let mut fx = Vec::new();
        owner.try_complete(5_000, &mut fx);
        assert!(fx
            .iter()
            .any(|e| matches!(e, Effect::Log { step, .. } if *step == "key-hash-divergence")));
        assert!(!owner.complete_submitted);
    }

    #[test]
    fn consumer_requests_only_after_all_owner_contracts_are_known() {
        let mut r = rng(9);
        let b = bulletin(&mut r);
        let owners = vec![AccountId::new("o1"), AccountId::new("o2")];
        let descriptor_of: BTreeMap<AccountId, String> = owners
            .iter()
            .map(|o| (o.clone(), format!("{o}-data")))
            .collect();
        let mut dc = ConsumerActor::new(
            AccountId::new("dc"),
            SigningKey::generate(&mut r),
            rng(10),
            b.clone(),
            ConsumerSetup {
                paradigm: Paradigm::PerOwner,
                owners: owners.clone(),
                descriptor_of,
            },
        );
        let policy_for = |owner: &AccountId| Policy {
            dataset: BTreeSet::from([format!("{owner}-data")]),
            price: 10_000,
            operation: b.op_measurement,
            consumers: BTreeSet::from([AccountId::new("dc")]),
            request_timeout_ms: 60_000,
        };
        let receipt = |owner: &AccountId, target: &str| Receipt {
            seq: 0,
            submitted_at: 0,
            finalized_at: 50,
            sender: owner.clone(),
            target: target.into(),
            function: "deploy".into(),
            args: serde_json::to_vec(&DeployArgs::Owner(policy_for(owner))).unwrap(),
            value: 0,
            status: TxStatus::Ok,
            ret: RetValue::Deployed(ContractId::new(target)),
            credits: vec![],
            record_idx: None,
        };
        let ctx = ActorCtx {
            capsules: &BTreeMap::new(),
        };
        let fx = dc.handle(
            50,
            Input::Receipts(vec![receipt(&owners[0], "c0")]),
            &ctx,
        );
        assert!(!fx.iter().any(|e| matches!(e, Effect::SubmitTx(_))));

        let fx = dc.handle(
            50,
            Input::Receipts(vec![receipt(&owners[1], "c1")]),
            &ctx,
        );
        let submitted: Vec<_> = fx
            .iter()
            .filter_map(|e| match e {
                Effect::SubmitTx(tx) => Some(tx),
                _ => None,
            })
            .collect();
        assert_eq!(submitted.len(), 2);
        assert!(submitted.iter().all(|tx| tx.call.function == "request"));
        assert!(submitted.iter().all(|tx| tx.value == 10_000));
    }

    #[test]
    fn consumer_cancel_wakeup_only_fires_for_open_records() {
        let mut r = rng(11);
        let b = bulletin(&mut r);
        let mut dc = ConsumerActor::new(
            AccountId::new("dc"),
            SigningKey::generate(&mut r),
            rng(12),
            b,
            ConsumerSetup {
                paradigm: Paradigm::Brokered,
                owners: vec![AccountId::new("o1")],
                descriptor_of: BTreeMap::from([(AccountId::new("o1"), "o1-data".into())]),
            },
        );
        dc.records.insert(
            ContractId::new("c0"),
            RecordTrack {
                idx: 0,
                ..RecordTrack::default()
            },
        );
        let ctx = ActorCtx {
            capsules: &BTreeMap::new(),
        };
        let tag = WakeTag::CancelRecord {
            contract: ContractId::new("c0"),
            idx: 0,
        };
        let fx = dc.handle(61_001, Input::Wakeup(tag.clone()), &ctx);
        assert!(fx.iter().any(|e| matches!(e, Effect::SubmitTx(_))));

        dc.records.get_mut(&ContractId::new("c0")).unwrap().complete = true;
        let fx = dc.handle(61_002, Input::Wakeup(tag), &ctx);
        assert!(!fx.iter().any(|e| matches!(e, Effect::SubmitTx(_))));
    }
}

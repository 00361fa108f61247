//! Deterministic simulation of a whole deployment: the actors, the chain,
//! the attestation service, shared capsule storage, and an adversarial
//! network, all driven from one ordered event queue. Identical configs give
//! byte-identical transcripts.
//!
//! The harness also records what a network observer would see (every message
//! body, as sent) and what the chain records (every receipt), which is what
//! the invariant checkers in [`checker`] run against.

pub mod checker;
pub mod scenario;
pub mod transcript;

use crate::actors::{
    Actor, ActorCtx, BrokerActor, BrokerSetup, Bulletin, ChannelPurpose, CloudActor,
    ConsumerActor, ConsumerSetup, Effect, Input, OwnerActor, OwnerSetup, Paradigm, WakeTag,
};
use crate::contracts::RecordStatus;
use crate::crypto::{hash_parts, Digest, KeyRole, SigningKey, SymmetricKey};
use crate::dataset::{seal_dataset, DataCapsule, OwnerDataset, StatsResult};
use crate::ledger::{Ledger, LedgerConfig, Receipt, SignedTransaction, TxStatus};
use crate::network::{
    ChannelEnd, ChannelId, HostAction, Message, MessageAction, Payload, PayloadKind,
};
use crate::tee::{
    establish_channel_key, AttestationPool, AttestationReport, CodeDescriptor, MockIas,
    ProgramManifest, COLUMN_STATS_SOURCE, KEY_AGENT_SOURCE,
};
use crate::types::{AccountId, ContractId, HostId};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use scenario::ScenarioConfig;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use transcript::Transcript;

pub const OP_ID: &str = "column-stats";
pub const KEY_AGENT_ID: &str = "key-agent";

/// Spread applied to reordered messages: later send, earlier delivery.
const REORDER_WINDOW_MS: u64 = 16;

/// One message body as it crossed the wire, for leak scanning.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Capture {
    pub at_ms: u64,
    pub from: HostId,
    pub to: HostId,
    pub kind: PayloadKind,
    pub body: String,
}

/// A channel the harness keyed after a validated attestation report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChannelInfo {
    pub id: ChannelId,
    pub instance: String,
    pub measurement: Digest,
    pub purpose: String,
    pub challenger: HostId,
    pub host: HostId,
    pub opened_at_ms: u64,
}

/// Secret bytes that must never show up on the wire.
#[derive(Debug, Clone)]
pub struct Sentinel {
    pub owner: AccountId,
    pub canary_hex: String,
    pub data_key_hex: String,
}

/// Final state of one usage record, straight off the chain.
#[derive(Debug, Clone)]
pub struct RecordView {
    pub contract: ContractId,
    pub idx: u64,
    pub dc: AccountId,
    pub status: RecordStatus,
    pub kr_hash: Option<Digest>,
    pub kr: Option<Vec<u8>>,
    pub escrow: u64,
    pub payouts: Vec<(AccountId, u64)>,
    pub req_time: u64,
    pub timeout_ms: u64,
}

/// Everything the checkers need, with no live references into the world.
#[derive(Debug, Clone)]
pub struct RunView {
    pub genesis_total: u64,
    pub total_supply: u64,
    pub escrowed: u64,
    pub balances: BTreeMap<AccountId, u64>,
    pub receipts: Vec<Receipt>,
    pub records: Vec<RecordView>,
    pub captures: Vec<Capture>,
    pub channels: Vec<ChannelInfo>,
    pub sentinels: Vec<Sentinel>,
    pub expected_measurements: BTreeSet<Digest>,
    pub drained: bool,
    pub sim_ms: u64,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub config: ScenarioConfig,
    pub transcript: Transcript,
    pub view: RunView,
    /// The consumer's decrypted, verified result, when the run produced one.
    pub result: Option<StatsResult>,
    /// Successful request / computation-complete / complete-transaction
    /// receipts; the unit the paradigm comparison counts.
    pub flow_calls: u64,
    /// Plaintext inputs, kept aside for test oracles. Never visible to
    /// actors other than the owner that sealed them.
    pub datasets: Vec<OwnerDataset>,
}

enum Event {
    Start(String),
    Deliver(Message),
    NetSend {
        from: HostId,
        to: HostId,
        payload: Payload,
    },
    ChannelReady {
        actor: String,
        purpose: ChannelPurpose,
        instance: String,
        peer: HostId,
        end: ChannelEnd,
    },
    Wake {
        actor: String,
        tag: WakeTag,
    },
    ChainTick,
    Halt(HostId),
}

fn sub_rng(seed: u64, label: &str) -> ChaCha20Rng {
    let d = hash_parts(&[b"world-rng", &seed.to_be_bytes(), label.as_bytes()]);
    ChaCha20Rng::from_seed(*d.as_bytes())
}

fn receipt_line(r: &Receipt) -> String {
    let mut s = format!(
        "seq={} fn={} sender={} target={} status={} ret={}",
        r.seq, r.function, r.sender, r.target, r.status, r.ret
    );
    if let Some(i) = r.record_idx {
        s.push_str(&format!(" record={i}"));
    }
    if !r.credits.is_empty() {
        s.push_str(" credits=");
        let parts: Vec<String> = r
            .credits
            .iter()
            .map(|(a, v)| format!("{a}:{v}"))
            .collect();
        s.push_str(&parts.join(","));
    }
    s
}

pub struct World {
    config: ScenarioConfig,
    clock: u64,
    next_event: u64,
    queue: BTreeMap<(u64, u64), Event>,
    wake_index: BTreeMap<(String, WakeTag), (u64, u64)>,
    actors: BTreeMap<String, Box<dyn Actor>>,
    principals: Vec<AccountId>,
    ledger: Ledger,
    ias: MockIas,
    pool: AttestationPool,
    manifest: ProgramManifest,
    capsules: BTreeMap<String, DataCapsule>,
    transcript: Transcript,
    captures: Vec<Capture>,
    channels: Vec<ChannelInfo>,
    next_channel: u64,
    next_msg: u64,
    halted: BTreeSet<HostId>,
    sentinels: Vec<Sentinel>,
    datasets: Vec<OwnerDataset>,
}

impl World {
    pub fn new(mut config: ScenarioConfig) -> Self {
        config.adversary = std::mem::take(&mut config.adversary).normalize();
        let seed = config.seed;
        let brokered = config.paradigm == Paradigm::Brokered;

        let mut manifest = ProgramManifest::default();
        let op_measurement = manifest.register(
            OP_ID,
            CodeDescriptor {
                source: COLUMN_STATS_SOURCE.into(),
            },
        );
        let agent_measurement = manifest.register(
            KEY_AGENT_ID,
            CodeDescriptor {
                source: KEY_AGENT_SOURCE.into(),
            },
        );

        let mut ias = MockIas::new(
            &mut sub_rng(seed, "ias-service"),
            config.ias_revocation_latency_ms,
            config.ias_report_latency_ms,
        );
        let cloud_host = HostId::new("cloud");
        let db_host = HostId::new("db");
        let cloud_platform = SigningKey::generate(&mut sub_rng(seed, "platform:cloud"));
        let db_platform = SigningKey::generate(&mut sub_rng(seed, "platform:db"));
        if !config.adversary.fake_tee_hosts.contains(&cloud_host) {
            ias.register_platform(cloud_host.clone(), cloud_platform.public());
        }
        if brokered && !config.adversary.fake_tee_hosts.contains(&db_host) {
            ias.register_platform(db_host.clone(), db_platform.public());
        }

        let bulletin = Bulletin {
            op_id: OP_ID.into(),
            op_measurement,
            agent_measurement,
            ias_service: ias.service_public(),
            cloud_host: cloud_host.clone(),
            broker: AccountId::new("db"),
            dc: AccountId::new("dc"),
            finalization_delay_ms: config.finalization_delay_ms,
        };

        let mut ledger = Ledger::new(LedgerConfig {
            finalization_delay_ms: config.finalization_delay_ms,
            congestion_penalty_ms: config.congestion_penalty_ms,
        });

        let owner_names = config.owner_names();
        let mut principals: Vec<AccountId> = vec![AccountId::new("dc")];
        if brokered {
            principals.push(AccountId::new("db"));
        }
        principals.extend(owner_names.iter().map(AccountId::new));
        let mut signing: BTreeMap<AccountId, SigningKey> = BTreeMap::new();
        for account in &principals {
            let key = SigningKey::generate(&mut sub_rng(seed, &format!("account:{account}")));
            ledger
                .genesis_account(account.clone(), config.genesis_balance, key.public())
                .expect("genesis is open");
            signing.insert(account.clone(), key);
        }

        let mut sentinels = Vec::new();
        let mut datasets = Vec::new();
        let mut descriptor_of: BTreeMap<AccountId, String> = BTreeMap::new();
        let mut actors: BTreeMap<String, Box<dyn Actor>> = BTreeMap::new();

        for name in &owner_names {
            let account = AccountId::new(name);
            let descriptor = format!("{name}-data");
            let mut data_rng = sub_rng(seed, &format!("data:{name}"));
            let dataset = OwnerDataset::generate(
                descriptor.clone(),
                config.rows_per_owner,
                config.columns,
                &mut data_rng,
            );
            let data_key = SymmetricKey::generate(&mut data_rng, KeyRole::Data);
            let mut nonce = [0u8; 12];
            data_rng.fill_bytes(&mut nonce);
            let capsule = seal_dataset(&dataset, &data_key, nonce).expect("data key seals data");
            sentinels.push(Sentinel {
                owner: account.clone(),
                canary_hex: hex::encode(dataset.canary()),
                data_key_hex: hex::encode(data_key.bytes()),
            });
            datasets.push(dataset.clone());
            descriptor_of.insert(account.clone(), descriptor);
            let actor = OwnerActor::new(
                account.clone(),
                signing[&account].clone(),
                sub_rng(seed, &format!("actor:{name}")),
                bulletin.clone(),
                OwnerSetup {
                    dataset,
                    data_key,
                    capsule,
                    price: config.price,
                    request_timeout_ms: config.request_timeout_ms,
                    paradigm: config.paradigm,
                },
            );
            actors.insert(name.clone(), Box::new(actor));
        }

        if brokered {
            let account = AccountId::new("db");
            let actor = BrokerActor::new(
                account.clone(),
                signing[&account].clone(),
                db_platform,
                sub_rng(seed, "actor:db"),
                bulletin.clone(),
                manifest.clone(),
                BrokerSetup {
                    request_timeout_ms: config.request_timeout_ms,
                    expected: descriptor_of.clone(),
                    complete_early: config.adversary.broker_complete_early,
                },
            );
            actors.insert("db".into(), Box::new(actor));
        }

        let dc = AccountId::new("dc");
        let consumer = ConsumerActor::new(
            dc.clone(),
            signing[&dc].clone(),
            sub_rng(seed, "actor:dc"),
            bulletin.clone(),
            ConsumerSetup {
                paradigm: config.paradigm,
                owners: owner_names.iter().map(AccountId::new).collect(),
                descriptor_of,
            },
        );
        actors.insert("dc".into(), Box::new(consumer));

        let cloud = CloudActor::new(
            cloud_host,
            cloud_platform,
            sub_rng(seed, "actor:cloud"),
            manifest.clone(),
        );
        actors.insert("cloud".into(), Box::new(cloud));

        let mut world = World {
            clock: 0,
            next_event: 0,
            queue: BTreeMap::new(),
            wake_index: BTreeMap::new(),
            principals,
            ledger,
            ias,
            pool: AttestationPool::new(config.ias_workers),
            manifest,
            capsules: BTreeMap::new(),
            transcript: Transcript::default(),
            captures: Vec::new(),
            channels: Vec::new(),
            next_channel: 0,
            next_msg: 0,
            halted: BTreeSet::new(),
            sentinels,
            datasets,
            actors,
            config,
        };
        let names: Vec<String> = world.actors.keys().cloned().collect();
        for name in names {
            world.enqueue(0, Event::Start(name));
        }
        let halts = world.config.adversary.halts.clone();
        for h in halts {
            world.enqueue(h.at_ms, Event::Halt(h.host));
        }
        world
    }

    pub fn op_measurement(&self) -> Digest {
        self.manifest.measurement(OP_ID).expect("registered")
    }

    pub fn agent_measurement(&self) -> Digest {
        self.manifest.measurement(KEY_AGENT_ID).expect("registered")
    }

    fn enqueue(&mut self, at_ms: u64, ev: Event) -> (u64, u64) {
        let key = (at_ms, self.next_event);
        self.next_event += 1;
        self.queue.insert(key, ev);
        key
    }

    fn is_halted(&self, host: &HostId) -> bool {
        self.halted.contains(host)
    }

    /// Move the chain to `at` and let every live actor observe whatever
    /// finalized on the way.
    fn advance_clock(&mut self, at: u64) {
        if at <= self.clock {
            return;
        }
        let dt = at - self.clock;
        let receipts = self.ledger.advance(dt);
        self.clock = at;
        if receipts.is_empty() {
            return;
        }
        for r in &receipts {
            self.transcript
                .log(r.finalized_at, "chain", "receipt", receipt_line(r));
        }
        let names: Vec<String> = self.actors.keys().cloned().collect();
        for name in names {
            if self.is_halted(&HostId::new(name.as_str())) {
                continue;
            }
            self.run_actor(at, &name, Input::Receipts(receipts.clone()));
        }
    }

    fn run_actor(&mut self, now: u64, name: &str, input: Input) {
        let Some(mut actor) = self.actors.remove(name) else {
            return;
        };
        let fx = {
            let ctx = ActorCtx {
                capsules: &self.capsules,
            };
            actor.handle(now, input, &ctx)
        };
        self.actors.insert(name.to_string(), actor);
        self.process_effects(now, name, fx);
    }

    fn process_effects(&mut self, now: u64, actor: &str, fx: Vec<Effect>) {
        for effect in fx {
            match effect {
                Effect::Send { to, payload } => {
                    self.dispatch_send(now, HostId::new(actor), to, payload);
                }
                Effect::SubmitTx(tx) => self.submit_chain(now, actor, tx),
                Effect::BroadcastTx(tx) => {
                    for k in 0..self.config.endpoints {
                        self.dispatch_send(
                            now,
                            HostId::new(actor),
                            HostId::new(format!("endpoint-{k}")),
                            Payload::TxSubmit(tx.clone()),
                        );
                    }
                }
                Effect::OpenChannel {
                    host,
                    instance,
                    report,
                    purpose,
                } => self.open_channel(now, actor, host, instance, report, purpose),
                Effect::Wakeup { at_ms, tag } => self.set_wake(now, actor, at_ms, tag),
                Effect::ClearWakeup { tag } => self.clear_wake(actor, &tag),
                Effect::Log { step, detail } => self.transcript.log(now, actor, step, detail),
                Effect::StoreCapsule(c) => {
                    self.capsules.insert(c.descriptor.clone(), c);
                }
            }
        }
    }

    /// Everything leaving a host funnels through here: host sabotage first,
    /// then the capture (wire truth), then network fate.
    fn dispatch_send(&mut self, now: u64, from: HostId, to: HostId, mut payload: Payload) {
        if self.is_halted(&from) {
            return;
        }
        let kind = payload.kind();
        match self.config.adversary.host_action(&from, &to, kind) {
            Some(HostAction::SuppressOutput) => {
                self.transcript.log(
                    now,
                    "net",
                    "suppress",
                    format!("from={from} to={to} kind={kind}"),
                );
                return;
            }
            Some(HostAction::CorruptChannelOutput) => {
                if let Payload::Channel(data) = &mut payload {
                    if let Some(b) = data.ct.body.first_mut() {
                        *b ^= 0x01;
                    } else {
                        data.ct.tag[0] ^= 0x01;
                    }
                    self.transcript.log(
                        now,
                        "net",
                        "corrupt",
                        format!("from={from} to={to} channel={}", data.channel),
                    );
                }
            }
            None => {}
        }
        let id = self.next_msg;
        self.next_msg += 1;
        self.captures.push(Capture {
            at_ms: now,
            from: from.clone(),
            to: to.clone(),
            kind,
            body: serde_json::to_string(&payload).expect("payload serializes"),
        });
        let msg = Message {
            id,
            from: from.clone(),
            to: to.clone(),
            payload,
        };
        match self.config.adversary.decide(&from, &to, kind) {
            MessageAction::Deliver => {
                self.enqueue(now + self.config.net_latency_ms, Event::Deliver(msg));
            }
            MessageAction::Drop => {
                self.transcript.log(
                    now,
                    "net",
                    "drop",
                    format!("from={from} to={to} kind={kind}"),
                );
            }
            MessageAction::Delay { ms } => {
                self.transcript.log(
                    now,
                    "net",
                    "delay",
                    format!("from={from} to={to} kind={kind} ms={ms}"),
                );
                self.enqueue(now + self.config.net_latency_ms + ms, Event::Deliver(msg));
            }
            MessageAction::Reorder => {
                let skew = REORDER_WINDOW_MS - (id % REORDER_WINDOW_MS);
                self.transcript.log(
                    now,
                    "net",
                    "reorder",
                    format!("from={from} to={to} kind={kind} skew={skew}"),
                );
                self.enqueue(now + self.config.net_latency_ms + skew, Event::Deliver(msg));
            }
        }
    }

    fn submit_chain(&mut self, now: u64, via: &str, tx: SignedTransaction) {
        let label = format!(
            "fn={} sender={} nonce={}",
            tx.call.function, tx.sender, tx.nonce
        );
        match self.ledger.submit_tx(tx) {
            Ok(h) => {
                self.transcript.log(
                    now,
                    via,
                    "tx-accepted",
                    format!("{label} finalize-at={}", h.finalize_at),
                );
                self.enqueue(h.finalize_at, Event::ChainTick);
            }
            Err(e) => {
                self.transcript
                    .log(now, via, "tx-refused", format!("{label} reason={e}"));
            }
        }
    }

    /// Key both halves of an attested channel from the validated report and
    /// hand them out. The requester's half arrives as soon as the handshake
    /// round trip completes; the enclave host gets the far half to install.
    fn open_channel(
        &mut self,
        now: u64,
        challenger: &str,
        host: HostId,
        instance: String,
        report: AttestationReport,
        purpose: ChannelPurpose,
    ) {
        let id = ChannelId(self.next_channel);
        self.next_channel += 1;
        let secret = hash_parts(&[
            b"channel-secret",
            challenger.as_bytes(),
            instance.as_bytes(),
            &id.0.to_be_bytes(),
        ]);
        let service_pk = self.ias.service_public();
        let key = establish_channel_key(&report, report.measurement, &service_pk, secret.as_bytes())
            .expect("challenger already validated this report");
        let (near, far) = ChannelEnd::pair(id, key);
        self.channels.push(ChannelInfo {
            id,
            instance: instance.clone(),
            measurement: report.measurement,
            purpose: purpose.to_string(),
            challenger: HostId::new(challenger),
            host: host.clone(),
            opened_at_ms: now,
        });
        self.transcript.log(
            now,
            "net",
            "channel-open",
            format!("id={id} instance={instance} purpose={purpose} challenger={challenger} host={host}"),
        );
        let ready_at = now + self.config.net_latency_ms;
        self.enqueue(
            ready_at,
            Event::ChannelReady {
                actor: challenger.to_string(),
                purpose: purpose.clone(),
                instance: instance.clone(),
                peer: host.clone(),
                end: near,
            },
        );
        self.enqueue(
            ready_at,
            Event::ChannelReady {
                actor: host.as_str().to_string(),
                purpose,
                instance,
                peer: HostId::new(challenger),
                end: far,
            },
        );
    }

    fn set_wake(&mut self, now: u64, actor: &str, at_ms: u64, tag: WakeTag) {
        let key = (actor.to_string(), tag.clone());
        if let Some(old) = self.wake_index.remove(&key) {
            self.queue.remove(&old);
        }
        let qk = self.enqueue(
            at_ms.max(now),
            Event::Wake {
                actor: actor.to_string(),
                tag,
            },
        );
        self.wake_index.insert(key, qk);
    }

    fn clear_wake(&mut self, actor: &str, tag: &WakeTag) {
        if let Some(old) = self.wake_index.remove(&(actor.to_string(), tag.clone())) {
            self.queue.remove(&old);
        }
    }

    fn ias_handle(&mut self, now: u64, msg: Message) {
        let Payload::IasSubmit { quote, reply_to } = msg.payload else {
            return;
        };
        match self.ias.admit(&quote) {
            Err(e) => {
                self.transcript.log(
                    now,
                    "ias",
                    "refused",
                    format!("instance={} reason={e}", quote.instance),
                );
                self.dispatch_send(
                    now,
                    HostId::new("ias"),
                    reply_to,
                    Payload::IasNak { nonce: quote.nonce },
                );
            }
            Ok(()) => {
                let (start, done, worker) =
                    self.pool.schedule(now, self.ias.per_quote_latency_ms());
                self.transcript.log(
                    now,
                    "ias",
                    "verify",
                    format!(
                        "instance={} host={} worker={worker} start={start} done={done}",
                        quote.instance, quote.host
                    ),
                );
                let report = self.ias.issue(&quote, done);
                self.enqueue(
                    done,
                    Event::NetSend {
                        from: HostId::new("ias"),
                        to: reply_to,
                        payload: Payload::IasReport(report),
                    },
                );
            }
        }
    }

    fn dispatch_event(&mut self, at: u64, ev: Event) {
        match ev {
            Event::Start(name) => {
                if !self.is_halted(&HostId::new(name.as_str())) {
                    self.run_actor(at, &name, Input::Start);
                }
            }
            Event::Deliver(msg) => {
                if self.is_halted(&msg.to) {
                    self.transcript.log(
                        at,
                        "net",
                        "undelivered",
                        format!("to={} kind={} host-down", msg.to, msg.payload.kind()),
                    );
                    return;
                }
                match msg.to.as_str() {
                    "ias" => self.ias_handle(at, msg),
                    s if s.starts_with("endpoint-") => {
                        if let Payload::TxSubmit(tx) = msg.payload {
                            let via = msg.to.as_str().to_string();
                            self.submit_chain(at, &via, tx);
                        }
                    }
                    s if self.actors.contains_key(s) => {
                        let name = s.to_string();
                        self.run_actor(at, &name, Input::Deliver(msg));
                    }
                    _ => {
                        self.transcript.log(
                            at,
                            "net",
                            "undeliverable",
                            format!("to={} kind={}", msg.to, msg.payload.kind()),
                        );
                    }
                }
            }
            Event::NetSend { from, to, payload } => self.dispatch_send(at, from, to, payload),
            Event::ChannelReady {
                actor,
                purpose,
                instance,
                peer,
                end,
            } => {
                if self.is_halted(&HostId::new(actor.as_str())) {
                    return;
                }
                self.run_actor(
                    at,
                    &actor,
                    Input::ChannelReady {
                        purpose,
                        instance,
                        peer,
                        end,
                    },
                );
            }
            Event::Wake { actor, tag } => {
                self.wake_index.remove(&(actor.clone(), tag.clone()));
                if !self.is_halted(&HostId::new(actor.as_str())) {
                    self.run_actor(at, &actor, Input::Wakeup(tag));
                }
            }
            Event::ChainTick => {
                // advance_clock already ran for this timestamp.
            }
            Event::Halt(host) => {
                self.halted.insert(host.clone());
                self.transcript.log(at, "net", "halt", format!("host={host}"));
            }
        }
    }

    pub fn run(mut self) -> RunOutcome {
        while let Some(key) = self.queue.first_key_value().map(|(k, _)| *k) {
            if key.0 > self.config.deadline_ms {
                break;
            }
            let ev = self.queue.remove(&key).expect("present");
            self.advance_clock(key.0);
            self.dispatch_event(key.0, ev);
        }
        let drained = self.queue.is_empty();

        let result = self
            .actors
            .get("dc")
            .and_then(|a| a.as_any().downcast_ref::<ConsumerActor>())
            .and_then(|c| c.result().cloned());

        let mut records = Vec::new();
        let mut escrowed = 0;
        for slot in self.ledger.contracts() {
            escrowed += slot.escrowed();
            let (usage, timeout_ms): (&[crate::contracts::UsageRecord], u64) =
                if let Some(c) = slot.owner_view() {
                    (&c.records, c.policy.request_timeout_ms)
                } else if let Some(c) = slot.broker_view() {
                    (&c.records, c.config.request_timeout_ms)
                } else {
                    (&[], 0)
                };
            for r in usage {
                records.push(RecordView {
                    contract: slot.id.clone(),
                    idx: r.idx,
                    dc: r.dc.clone(),
                    status: r.status,
                    kr_hash: r.kr_hash,
                    kr: r.kr.clone(),
                    escrow: r.escrow,
                    payouts: r.payouts.clone(),
                    req_time: r.req_time,
                    timeout_ms,
                });
            }
        }

        let balances: BTreeMap<AccountId, u64> = self
            .principals
            .iter()
            .map(|a| (a.clone(), self.ledger.balance(a).expect("principal exists")))
            .collect();

        let receipts = self.ledger.receipts().to_vec();
        let flow_calls = receipts
            .iter()
            .filter(|r| {
                r.status == TxStatus::Ok
                    && matches!(
                        r.function.as_str(),
                        "request" | "computation-complete" | "complete-transaction"
                    )
            })
            .count() as u64;

        let view = RunView {
            genesis_total: self.ledger.genesis_total(),
            total_supply: self.ledger.total_supply(),
            escrowed,
            balances,
            receipts,
            records,
            captures: self.captures,
            channels: self.channels,
            sentinels: self.sentinels,
            expected_measurements: [
                self.manifest.measurement(OP_ID).expect("registered"),
                self.manifest.measurement(KEY_AGENT_ID).expect("registered"),
            ]
            .into(),
            drained,
            sim_ms: self.clock,
        };

        RunOutcome {
            config: self.config,
            transcript: self.transcript,
            view,
            result,
            flow_calls,
            datasets: self.datasets,
        }
    }
}

/// Build and run one scenario end to end.
pub fn run_scenario(config: ScenarioConfig) -> RunOutcome {
    World::new(config).run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::column_stats;

    #[test]
    fn honest_brokered_run_completes_and_pays() {
        let out = run_scenario(ScenarioConfig::default());
        assert!(out.view.drained, "event queue should drain");
        assert!(out.transcript.has("dc", "result-verified"));
        let result = out.result.as_ref().expect("consumer decrypted the result");
        let mut sorted: Vec<&OwnerDataset> = out.datasets.iter().collect();
        sorted.sort_by(|a, b| a.descriptor.cmp(&b.descriptor));
        let expected = column_stats(&sorted).expect("datasets are well-formed");
        assert_eq!(*result, expected);
        for record in &out.view.records {
            assert_eq!(record.status, RecordStatus::Complete);
            assert!(record.kr.is_some());
        }
        // Owners end up richer by exactly their price.
        let start = out.config.genesis_balance;
        for name in out.config.owner_names() {
            let b = out.view.balances[&AccountId::new(name)];
            assert_eq!(b, start + out.config.price);
        }
        assert_eq!(out.flow_calls, 3);
    }

    #[test]
    fn honest_per_owner_run_completes_with_n_records() {
        let cfg = ScenarioConfig {
            paradigm: Paradigm::PerOwner,
            ..ScenarioConfig::default()
        };
        let owners = cfg.owners as usize;
        let out = run_scenario(cfg);
        assert!(out.view.drained);
        assert!(out.result.is_some());
        assert_eq!(out.view.records.len(), owners);
        assert!(out
            .view
            .records
            .iter()
            .all(|r| r.status == RecordStatus::Complete));
        assert_eq!(out.flow_calls, 3 * owners as u64);
    }

    #[test]
    fn identical_seeds_replay_byte_identical_transcripts() {
        let a = run_scenario(ScenarioConfig::default());
        let b = run_scenario(ScenarioConfig::default());
        assert_eq!(a.transcript.render(), b.transcript.render());
        let c = run_scenario(ScenarioConfig {
            seed: 8,
            ..ScenarioConfig::default()
        });
        assert_ne!(a.transcript.render(), c.transcript.render());
    }
}

//! Messages, confidential channels, and the adversary.
//!
//! A channel is an AEAD pipe keyed after an attested handshake. Sequence
//! numbers ride in the associated data, receivers buffer out-of-order
//! segments, and any byte change fails authentication. The adversary
//! schedules traffic (deliver, drop, delay, reorder) and can compromise
//! hosts, but it never rewrites bytes in flight; corruption happens at a
//! compromised host's send boundary, before the message enters the network.

use crate::crypto::{aead_decrypt, aead_encrypt, CryptoError, NonceSeq, SymmetricKey};
use crate::ledger::SignedTransaction;
use crate::tee::{AttestationNonce, AttestationReport, JobSpec, Quote};
use crate::types::HostId;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ChannelId(pub u64);

impl fmt::Display for ChannelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ch{}", self.0)
    }
}

/// One sealed channel segment. The associated data binds channel id and
/// sequence number, so segments cannot be replayed across channels or
/// positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelData {
    pub channel: ChannelId,
    pub seq: u64,
    pub ct: crate::crypto::Ciphertext,
}

fn segment_ad(channel: ChannelId, seq: u64) -> Vec<u8> {
    format!("{channel}|seq{seq}").into_bytes()
}

/// One side of a confidential channel. Both ends share the key; each end
/// numbers its own sends and reassembles its peer's segments in order.
#[derive(Debug, Clone)]
pub struct ChannelEnd {
    pub id: ChannelId,
    key: SymmetricKey,
    send_seq: u64,
    recv_next: u64,
    recv_buf: BTreeMap<u64, ChannelData>,
}

impl ChannelEnd {
    pub fn pair(id: ChannelId, key: SymmetricKey) -> (ChannelEnd, ChannelEnd) {
        let mk = || ChannelEnd {
            id,
            key: key.clone(),
            send_seq: 0,
            recv_next: 0,
            recv_buf: BTreeMap::new(),
        };
        (mk(), mk())
    }

    pub fn seal(&mut self, nonces: &mut NonceSeq, payload: &[u8]) -> ChannelData {
        let seq = self.send_seq;
        self.send_seq += 1;
        let ct = aead_encrypt(&self.key, nonces.next(), payload, &segment_ad(self.id, seq));
        ChannelData {
            channel: self.id,
            seq,
            ct,
        }
    }

    /// Authenticate a segment and return every payload that is now ready in
    /// order. An early segment is buffered and released once the gap fills.
    pub fn open(&mut self, data: &ChannelData) -> Result<Vec<Vec<u8>>, CryptoError> {
        if data.channel != self.id {
            return Err(CryptoError::AuthFailure);
        }
        if data.seq < self.recv_next || self.recv_buf.contains_key(&data.seq) {
            // Duplicate: the network never duplicates, so treat as forgery.
            return Err(CryptoError::AuthFailure);
        }
        // Authenticate on arrival so corruption is caught even while buffered.
        aead_decrypt(&self.key, &data.ct, &segment_ad(self.id, data.seq))?;
        self.recv_buf.insert(data.seq, data.clone());

        let mut ready = Vec::new();
        while let Some(next) = self.recv_buf.remove(&self.recv_next) {
            let plain = aead_decrypt(&self.key, &next.ct, &segment_ad(self.id, next.seq))?;
            ready.push(plain);
            self.recv_next += 1;
        }
        Ok(ready)
    }
}

/// Everything that travels between hosts. Channel payloads are opaque sealed
/// bytes; the rest is public protocol metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "msg", rename_all = "kebab-case")]
pub enum Payload {
    Channel(ChannelData),
    AttestRequest {
        instance: String,
        nonce: AttestationNonce,
    },
    Quote(Quote),
    IasSubmit {
        quote: Quote,
        reply_to: HostId,
    },
    IasNak {
        nonce: AttestationNonce,
    },
    IasReport(AttestationReport),
    LoadEnclave {
        job: JobSpec,
    },
    EnclaveLoaded {
        job_id: String,
        instance: String,
        host: HostId,
        measurement: crate::crypto::Digest,
    },
    JobAnnounce {
        job: JobSpec,
        instance: String,
        host: HostId,
    },
    TxSubmit(SignedTransaction),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PayloadKind {
    Channel,
    AttestRequest,
    Quote,
    IasSubmit,
    IasNak,
    IasReport,
    LoadEnclave,
    EnclaveLoaded,
    JobAnnounce,
    TxSubmit,
}

impl Payload {
    pub fn kind(&self) -> PayloadKind {
        match self {
            Payload::Channel(_) => PayloadKind::Channel,
            Payload::AttestRequest { .. } => PayloadKind::AttestRequest,
            Payload::Quote(_) => PayloadKind::Quote,
            Payload::IasSubmit { .. } => PayloadKind::IasSubmit,
            Payload::IasNak { .. } => PayloadKind::IasNak,
            Payload::IasReport(_) => PayloadKind::IasReport,
            Payload::LoadEnclave { .. } => PayloadKind::LoadEnclave,
            Payload::EnclaveLoaded { .. } => PayloadKind::EnclaveLoaded,
            Payload::JobAnnounce { .. } => PayloadKind::JobAnnounce,
            Payload::TxSubmit(_) => PayloadKind::TxSubmit,
        }
    }

    /// Canonical wire image, captured once at send time and asserted
    /// unchanged at delivery.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("payload serialize")
    }
}

impl fmt::Display for PayloadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PayloadKind::Channel => "channel",
            PayloadKind::AttestRequest => "attest-request",
            PayloadKind::Quote => "quote",
            PayloadKind::IasSubmit => "ias-submit",
            PayloadKind::IasNak => "ias-nak",
            PayloadKind::IasReport => "ias-report",
            PayloadKind::LoadEnclave => "load-enclave",
            PayloadKind::EnclaveLoaded => "enclave-loaded",
            PayloadKind::JobAnnounce => "job-announce",
            PayloadKind::TxSubmit => "tx-submit",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub id: u64,
    pub from: HostId,
    pub to: HostId,
    pub payload: Payload,
}

/// What the network does with one message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "kebab-case")]
pub enum MessageAction {
    Deliver,
    Drop,
    Delay { ms: u64 },
    /// Deliver with a tiny skew that inverts ordering among reordered
    /// messages sent at the same instant.
    Reorder,
}

/// Matches messages by endpoint and payload kind; `None` is a wildcard.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageRule {
    pub from: Option<HostId>,
    pub to: Option<HostId>,
    pub kind: Option<PayloadKind>,
    pub action: MessageAction,
}

impl MessageRule {
    pub fn matches(&self, from: &HostId, to: &HostId, kind: PayloadKind) -> bool {
        self.from.as_ref().map_or(true, |f| f == from)
            && self.to.as_ref().map_or(true, |t| t == to)
            && self.kind.map_or(true, |k| k == kind)
    }
}

/// Misbehavior applied at a compromised host's own send boundary, before the
/// network sees the message. This is how a malicious platform owner tampers
/// with or withholds what its enclave emitted without breaking the rule that
/// the network never alters bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HostAction {
    /// Flip a ciphertext byte in the outgoing channel segment.
    CorruptChannelOutput,
    /// Silently discard the outgoing message.
    SuppressOutput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HostRule {
    pub host: HostId,
    pub to: Option<HostId>,
    pub kind: Option<PayloadKind>,
    pub action: HostAction,
}

impl HostRule {
    pub fn matches(&self, from: &HostId, to: &HostId, kind: PayloadKind) -> bool {
        self.host == *from
            && self.to.as_ref().map_or(true, |t| t == to)
            && self.kind.map_or(true, |k| k == kind)
    }
}

/// Stop a host at a point in time: its enclave halts and the actor ignores
/// everything from then on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HaltRule {
    pub host: HostId,
    pub at_ms: u64,
}

/// Everything the adversary gets to do in one run. First matching rule
/// wins; no match means honest delivery.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdversaryPolicy {
    pub compromised: BTreeSet<HostId>,
    pub message_rules: Vec<MessageRule>,
    pub host_rules: Vec<HostRule>,
    pub halts: Vec<HaltRule>,
    /// Hosts whose platform key is not registered with the attestation
    /// service: their quotes come back with a Fail verdict.
    pub fake_tee_hosts: BTreeSet<HostId>,
    /// Broker submits the key-release transaction as soon as it holds the
    /// key, without waiting for the consumer's on-chain commitment.
    pub broker_complete_early: bool,
}

impl AdversaryPolicy {
    pub fn honest() -> Self {
        AdversaryPolicy::default()
    }

    /// Hosts named by host rules are compromised by definition.
    pub fn normalize(mut self) -> Self {
        for rule in &self.host_rules {
            self.compromised.insert(rule.host.clone());
        }
        for host in &self.fake_tee_hosts {
            self.compromised.insert(host.clone());
        }
        self
    }

    pub fn decide(&self, from: &HostId, to: &HostId, kind: PayloadKind) -> MessageAction {
        for rule in &self.message_rules {
            if rule.matches(from, to, kind) {
                return rule.action;
            }
        }
        MessageAction::Deliver
    }

    pub fn host_action(&self, from: &HostId, to: &HostId, kind: PayloadKind) -> Option<HostAction> {
        if !self.compromised.contains(from) {
            return None;
        }
        self.host_rules
            .iter()
            .find(|r| r.matches(from, to, kind))
            .map(|r| r.action)
    }

    pub fn halted_at(&self, host: &HostId, now: u64) -> bool {
        self.halts.iter().any(|h| h.host == *host && now >= h.at_ms)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::KeyRole;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn channel() -> (ChannelEnd, ChannelEnd, NonceSeq, NonceSeq) {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let key = SymmetricKey::generate(&mut rng, KeyRole::Channel);
        let (a, b) = ChannelEnd::pair(ChannelId(1), key);
        (
            a,
            b,
            NonceSeq::new([1u8; 16], "a"),
            NonceSeq::new([2u8; 16], "b"),
        )
    }

    #[test]
    fn in_order_segments_flow_through() {
        let (mut a, mut b, mut na, _) = channel();
        let s0 = a.seal(&mut na, b"first");
        let s1 = a.seal(&mut na, b"second");
        assert_eq!(b.open(&s0).unwrap(), vec![b"first".to_vec()]);
        assert_eq!(b.open(&s1).unwrap(), vec![b"second".to_vec()]);
    }

    #[test]
    fn out_of_order_segments_are_buffered_and_released_in_order() {
        let (mut a, mut b, mut na, _) = channel();
        let s0 = a.seal(&mut na, b"first");
        let s1 = a.seal(&mut na, b"second");
        let s2 = a.seal(&mut na, b"third");
        assert!(b.open(&s2).unwrap().is_empty());
        assert!(b.open(&s1).unwrap().is_empty());
        assert_eq!(
            b.open(&s0).unwrap(),
            vec![b"first".to_vec(), b"second".to_vec(), b"third".to_vec()]
        );
    }

    #[test]
    fn tampered_segment_fails_authentication() {
        let (mut a, mut b, mut na, _) = channel();
        let mut seg = a.seal(&mut na, b"payload");
        seg.ct.body[0] ^= 0x01;
        assert_eq!(b.open(&seg), Err(CryptoError::AuthFailure));
    }

    #[test]
    fn replayed_segment_is_rejected() {
        let (mut a, mut b, mut na, _) = channel();
        let seg = a.seal(&mut na, b"payload");
        b.open(&seg).unwrap();
        assert_eq!(b.open(&seg), Err(CryptoError::AuthFailure));
    }

    #[test]
    fn segment_cannot_move_across_channels() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let key = SymmetricKey::generate(&mut rng, KeyRole::Channel);
        let (mut a, _) = ChannelEnd::pair(ChannelId(1), key.clone());
        let (_, mut other) = ChannelEnd::pair(ChannelId(2), key);
        let mut na = NonceSeq::new([1u8; 16], "a");
        let seg = a.seal(&mut na, b"payload");
        assert_eq!(other.open(&seg), Err(CryptoError::AuthFailure));
    }

    #[test]
    fn first_matching_rule_wins_and_default_is_deliver() {
        let policy = AdversaryPolicy {
            message_rules: vec![
                MessageRule {
                    from: Some(HostId::new("cee")),
                    to: None,
                    kind: None,
                    action: MessageAction::Drop,
                },
                MessageRule {
                    from: Some(HostId::new("cee")),
                    to: Some(HostId::new("dc")),
                    kind: None,
                    action: MessageAction::Delay { ms: 50 },
                },
            ],
            ..Default::default()
        };
        assert_eq!(
            policy.decide(&HostId::new("cee"), &HostId::new("dc"), PayloadKind::Channel),
            MessageAction::Drop
        );
        assert_eq!(
            policy.decide(&HostId::new("db"), &HostId::new("dc"), PayloadKind::Channel),
            MessageAction::Deliver
        );
    }

    #[test]
    fn host_rules_imply_compromise_after_normalize() {
        let policy = AdversaryPolicy {
            host_rules: vec![HostRule {
                host: HostId::new("cee"),
                to: None,
                kind: Some(PayloadKind::Channel),
                action: HostAction::CorruptChannelOutput,
            }],
            ..Default::default()
        }
        .normalize();
        assert!(policy.compromised.contains(&HostId::new("cee")));
        assert_eq!(
            policy.host_action(&HostId::new("cee"), &HostId::new("dc"), PayloadKind::Channel),
            Some(HostAction::CorruptChannelOutput)
        );
        assert_eq!(
            policy.host_action(&HostId::new("cee"), &HostId::new("dc"), PayloadKind::Quote),
            None
        );
    }

    #[test]
    fn halt_rules_take_effect_at_their_time() {
        let policy = AdversaryPolicy {
            halts: vec![HaltRule {
                host: HostId::new("cee"),
                at_ms: 100,
            }],
            ..Default::default()
        };
        assert!(!policy.halted_at(&HostId::new("cee"), 99));
        assert!(policy.halted_at(&HostId::new("cee"), 100));
        assert!(!policy.halted_at(&HostId::new("db"), 200));
    }
}

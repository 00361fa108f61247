//! Simulated trusted execution: measured enclave programs, quotes, a mock
//! attestation service with a bounded verification worker pool, and the
//! enclave runtime itself.
//!
//! An enclave decrypts provisioned data capsules, runs its measured program,
//! seals the result for the consumer and the result key for the providers,
//! and wipes its key store and staged plaintexts before returning, success or
//! not. Verifiers trust an enclave only through a service-signed report whose
//! measurement matches what the contract pinned.

use crate::crypto::{
    hash, hash_parts, hexfmt, Ciphertext, Digest, PublicKey, Signature, SigningKey, SymmetricKey,
};
use crate::dataset::{column_stats, open_capsule, DataCapsule, DatasetError, OwnerDataset};
use crate::ledger::SignedTransaction;
use crate::network::{ChannelData, ChannelEnd, ChannelId};
use crate::types::{ContractId, HostId};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use thiserror::Error;

pub const DEFAULT_REVOCATION_LATENCY_MS: u64 = 100;
pub const DEFAULT_REPORT_LATENCY_MS: u64 = 500;

/// Program text of the summary-statistics operation. Its hash is the
/// measurement contracts pin.
pub const COLUMN_STATS_SOURCE: &str =
    "column-stats/v1: per-column count, mean, population std over concatenated tables";

/// Program text of the broker-side key agent that stores owner keys and
/// forwards them over attested channels.
pub const KEY_AGENT_SOURCE: &str =
    "key-agent/v1: hold provisioned data keys, forward them only over attested channels";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TeeError {
    #[error("stale attestation nonce")]
    StaleNonce,
    #[error("attestation verdict was fail")]
    AttestationFailed,
    #[error("measurement mismatch: expected {expected}, got {actual}")]
    MeasurementMismatch { expected: Digest, actual: Digest },
    #[error("report signature invalid")]
    BadReportSignature,
    #[error("program is not executable: {0}")]
    UnknownOperation(String),
    #[error("no key provisioned for {descriptor}")]
    MissingKey { descriptor: String },
    #[error("capsule decryption failed for {descriptor}")]
    DecryptFailure { descriptor: String },
    #[error("no such channel {0}")]
    ChannelMissing(ChannelId),
    #[error("malformed channel payload")]
    BadPayload,
    #[error(transparent)]
    Compute(#[from] DatasetError),
}

/// Source text an enclave is loaded from. The measurement is the hash of
/// exactly these bytes, so a one-byte tamper yields a different measurement.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeDescriptor {
    pub source: String,
}

/// Operations the simulator knows how to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Operation {
    ColumnStats,
    KeyAgent,
}

impl CodeDescriptor {
    pub fn measurement(&self) -> Digest {
        hash(self.source.as_bytes())
    }

    pub fn operation(&self) -> Option<Operation> {
        match self.source.as_str() {
            COLUMN_STATS_SOURCE => Some(Operation::ColumnStats),
            KEY_AGENT_SOURCE => Some(Operation::KeyAgent),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnclaveProgram {
    pub op_id: String,
    pub code: CodeDescriptor,
}

impl EnclaveProgram {
    pub fn measurement(&self) -> Digest {
        self.code.measurement()
    }
}

/// Public registry mapping operation ids to programs. Contracts pin the
/// measurement found here; verifiers look the expected value up the same way.
#[derive(Debug, Clone, Default)]
pub struct ProgramManifest {
    programs: BTreeMap<String, EnclaveProgram>,
}

impl ProgramManifest {
    pub fn register(&mut self, op_id: impl Into<String>, code: CodeDescriptor) -> Digest {
        let op_id = op_id.into();
        let program = EnclaveProgram {
            op_id: op_id.clone(),
            code,
        };
        let measurement = program.measurement();
        self.programs.insert(op_id, program);
        measurement
    }

    pub fn get(&self, op_id: &str) -> Option<&EnclaveProgram> {
        self.programs.get(op_id)
    }

    pub fn measurement(&self, op_id: &str) -> Option<Digest> {
        self.programs.get(op_id).map(|p| p.measurement())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct AttestationNonce(pub [u8; 16]);

impl AttestationNonce {
    pub fn generate(rng: &mut impl RngCore) -> Self {
        let mut bytes = [0u8; 16];
        rng.fill_bytes(&mut bytes);
        AttestationNonce(bytes)
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Display for AttestationNonce {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for AttestationNonce {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for AttestationNonce {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        let raw = hex::decode(&text).map_err(serde::de::Error::custom)?;
        let bytes: [u8; 16] = raw
            .try_into()
            .map_err(|_| serde::de::Error::custom("bad nonce length"))?;
        Ok(AttestationNonce(bytes))
    }
}

/// Platform-signed statement of what is running where, bound to the
/// challenger's fresh nonce.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quote {
    pub measurement: Digest,
    pub instance: String,
    pub host: HostId,
    pub nonce: AttestationNonce,
    pub platform_sig: Signature,
}

impl Quote {
    fn signing_bytes(
        measurement: &Digest,
        instance: &str,
        host: &HostId,
        nonce: &AttestationNonce,
    ) -> Vec<u8> {
        hash_parts(&[
            b"quote",
            measurement.as_bytes(),
            instance.as_bytes(),
            host.as_str().as_bytes(),
            &nonce.0,
        ])
        .as_bytes()
        .to_vec()
    }

    pub fn sign(
        measurement: Digest,
        instance: impl Into<String>,
        host: HostId,
        nonce: AttestationNonce,
        platform_key: &SigningKey,
    ) -> Self {
        let instance = instance.into();
        let payload = Self::signing_bytes(&measurement, &instance, &host, &nonce);
        Quote {
            measurement,
            instance,
            host,
            nonce,
            platform_sig: platform_key.sign(&payload),
        }
    }

    pub fn verify(&self, platform_pk: &PublicKey) -> bool {
        let payload = Self::signing_bytes(&self.measurement, &self.instance, &self.host, &self.nonce);
        crate::crypto::verify(platform_pk, &payload, &self.platform_sig)
    }

    pub fn digest(&self) -> Digest {
        hash_parts(&[
            b"quote-image",
            self.measurement.as_bytes(),
            self.instance.as_bytes(),
            self.host.as_str().as_bytes(),
            &self.nonce.0,
            &self.platform_sig.to_bytes(),
        ])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttestVerdict {
    Pass,
    Fail,
}

impl fmt::Display for AttestVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttestVerdict::Pass => "pass",
            AttestVerdict::Fail => "fail",
        })
    }
}

/// Service-signed attestation outcome the challenger acts on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttestationReport {
    pub quote_digest: Digest,
    pub measurement: Digest,
    pub instance: String,
    pub verdict: AttestVerdict,
    pub issued_at_ms: u64,
    pub service_sig: Signature,
}

impl AttestationReport {
    fn signing_bytes(
        quote_digest: &Digest,
        measurement: &Digest,
        instance: &str,
        verdict: AttestVerdict,
        issued_at_ms: u64,
    ) -> Vec<u8> {
        hash_parts(&[
            b"report",
            quote_digest.as_bytes(),
            measurement.as_bytes(),
            instance.as_bytes(),
            verdict.to_string().as_bytes(),
            &issued_at_ms.to_be_bytes(),
        ])
        .as_bytes()
        .to_vec()
    }

    pub fn verify(&self, service_pk: &PublicKey) -> bool {
        let payload = Self::signing_bytes(
            &self.quote_digest,
            &self.measurement,
            &self.instance,
            self.verdict,
            self.issued_at_ms,
        );
        crate::crypto::verify(service_pk, &payload, &self.service_sig)
    }

    /// Digest of the whole report, used as the handshake transcript when
    /// deriving a channel key.
    pub fn digest(&self) -> Digest {
        hash_parts(&[
            b"report-image",
            self.quote_digest.as_bytes(),
            self.measurement.as_bytes(),
            self.instance.as_bytes(),
            self.verdict.to_string().as_bytes(),
            &self.issued_at_ms.to_be_bytes(),
            &self.service_sig.to_bytes(),
        ])
    }
}

/// Mock of the remote attestation service. Each quote costs a revocation
/// list check plus report generation, served by a bounded worker pool; the
/// verdict is Pass only for a registered platform key that actually signed
/// the quote. Nonces are single-use.
#[derive(Debug)]
pub struct MockIas {
    pub revocation_latency_ms: u64,
    pub report_latency_ms: u64,
    service_key: SigningKey,
    trusted_platforms: BTreeMap<HostId, PublicKey>,
    seen_nonces: std::collections::BTreeSet<[u8; 16]>,
}

impl MockIas {
    pub fn new(rng: &mut impl RngCore, revocation_latency_ms: u64, report_latency_ms: u64) -> Self {
        MockIas {
            revocation_latency_ms,
            report_latency_ms,
            service_key: SigningKey::generate(rng),
            trusted_platforms: BTreeMap::new(),
            seen_nonces: std::collections::BTreeSet::new(),
        }
    }

    pub fn with_default_latencies(rng: &mut impl RngCore) -> Self {
        Self::new(rng, DEFAULT_REVOCATION_LATENCY_MS, DEFAULT_REPORT_LATENCY_MS)
    }

    pub fn service_public(&self) -> PublicKey {
        self.service_key.public()
    }

    pub fn register_platform(&mut self, host: HostId, pk: PublicKey) {
        self.trusted_platforms.insert(host, pk);
    }

    pub fn per_quote_latency_ms(&self) -> u64 {
        self.revocation_latency_ms + self.report_latency_ms
    }

    /// Admission check at submission time. A reused nonce is refused before
    /// any worker time is spent.
    pub fn admit(&mut self, quote: &Quote) -> Result<(), TeeError> {
        if !self.seen_nonces.insert(quote.nonce.0) {
            return Err(TeeError::StaleNonce);
        }
        Ok(())
    }

    /// Produce the signed report for an admitted quote. `now` is the time the
    /// worker finished, which the report carries as its issue time.
    pub fn issue(&self, quote: &Quote, now: u64) -> AttestationReport {
        let genuine = self
            .trusted_platforms
            .get(&quote.host)
            .map(|pk| quote.verify(pk))
            .unwrap_or(false);
        let verdict = if genuine {
            AttestVerdict::Pass
        } else {
            AttestVerdict::Fail
        };
        let payload = AttestationReport::signing_bytes(
            &quote.digest(),
            &quote.measurement,
            &quote.instance,
            verdict,
            now,
        );
        AttestationReport {
            quote_digest: quote.digest(),
            measurement: quote.measurement,
            instance: quote.instance.clone(),
            verdict,
            issued_at_ms: now,
            service_sig: self.service_key.sign(&payload),
        }
    }
}

/// Bounded pool of attestation workers. Each verification occupies one
/// worker for the full revocation-check plus report latency; jobs take the
/// earliest-free worker, lowest index on ties.
#[derive(Debug, Clone)]
pub struct AttestationPool {
    workers: Vec<u64>,
}

impl AttestationPool {
    pub fn new(workers: usize) -> Self {
        assert!(workers >= 1, "pool needs at least one worker");
        AttestationPool {
            workers: vec![0; workers],
        }
    }

    pub fn capacity(&self) -> usize {
        self.workers.len()
    }

    /// Returns (start, done, worker index) for one job arriving at `now`.
    pub fn schedule(&mut self, now: u64, duration_ms: u64) -> (u64, u64, usize) {
        let (idx, busy_until) = self
            .workers
            .iter()
            .copied()
            .enumerate()
            .min_by_key(|(i, t)| (*t, *i))
            .expect("pool is non-empty");
        let start = now.max(busy_until);
        let done = start + duration_ms;
        self.workers[idx] = done;
        (start, done, idx)
    }

    pub fn makespan(&self) -> u64 {
        self.workers.iter().copied().max().unwrap_or(0)
    }
}

/// Makespan of `jobs` verifications arriving together at a pool of
/// `workers`, each costing `per_job_ms`. This is the queue model behind the
/// attestation throughput numbers.
pub fn attestation_makespan_ms(jobs: usize, workers: usize, per_job_ms: u64) -> u64 {
    let mut pool = AttestationPool::new(workers);
    for _ in 0..jobs {
        pool.schedule(0, per_job_ms);
    }
    pool.makespan()
}

/// Check a report before trusting the enclave behind it: the service must
/// have signed it, the verdict must be Pass, and the measurement must equal
/// what the contract pinned.
pub fn validate_report(
    report: &AttestationReport,
    expected_measurement: Digest,
    service_pk: &PublicKey,
) -> Result<(), TeeError> {
    if !report.verify(service_pk) {
        return Err(TeeError::BadReportSignature);
    }
    if report.verdict != AttestVerdict::Pass {
        return Err(TeeError::AttestationFailed);
    }
    if report.measurement != expected_measurement {
        return Err(TeeError::MeasurementMismatch {
            expected: expected_measurement,
            actual: report.measurement,
        });
    }
    Ok(())
}

/// Key both sides of an attested handshake derive: validation first, then a
/// hash over the out-of-band shared secret and the report transcript.
pub fn establish_channel_key(
    report: &AttestationReport,
    expected_measurement: Digest,
    service_pk: &PublicKey,
    shared_secret: &[u8],
) -> Result<SymmetricKey, TeeError> {
    validate_report(report, expected_measurement, service_pk)?;
    Ok(crate::crypto::derive_channel_key(
        shared_secret,
        &report.digest(),
    ))
}

/// On-chain coordinates a result is bound to.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RecordBinding {
    pub contract: ContractId,
    pub idx: u64,
}

impl fmt::Display for RecordBinding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.contract, self.idx)
    }
}

/// Associated data for a result ciphertext: the sorted list of records the
/// result settles. Decrypting under different bindings fails.
pub fn bindings_ad(bindings: &[RecordBinding]) -> Vec<u8> {
    let mut sorted: Vec<&RecordBinding> = bindings.iter().collect();
    sorted.sort();
    let parts: Vec<String> = sorted.iter().map(|b| b.to_string()).collect();
    format!("bind|{}", parts.join(";")).into_bytes()
}

/// What a consumer asks the execution host to run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobSpec {
    pub job_id: String,
    pub op_id: String,
    pub bindings: Vec<RecordBinding>,
    pub descriptors: Vec<String>,
}

/// Sealed result artifacts for the consumer: the result ciphertext, its
/// hash, and the hash of the key that opens it. The key itself goes to the
/// providers in a [`KeySlip`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultBundle {
    pub job_id: String,
    pub bindings: Vec<RecordBinding>,
    pub c_result: Ciphertext,
    pub c_hash: Digest,
    pub kr_hash: Digest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeySlip {
    pub job_id: String,
    #[serde(with = "hexfmt::arr")]
    pub kr: [u8; 32],
}

/// Application payloads carried inside sealed channel segments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "payload", rename_all = "kebab-case")]
pub enum ChannelPayload {
    Provision {
        descriptor: String,
        #[serde(with = "hexfmt::arr")]
        key: [u8; 32],
    },
    Bundle(ResultBundle),
    Slip(KeySlip),
    Tx(SignedTransaction),
}

impl ChannelPayload {
    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("channel payload serialize")
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TeeError> {
        serde_json::from_slice(bytes).map_err(|_| TeeError::BadPayload)
    }
}

/// Events an enclave reports to its host. Data keys provisioned into the
/// enclave stay inside; slips and bundles are addressed to the host's
/// principal, so those are handed out.
#[derive(Debug, Clone, PartialEq)]
pub enum EnclaveEvent {
    ProvisionStored { descriptor: String },
    SlipReleased { slip: KeySlip },
    BundleReleased { bundle: Box<ResultBundle> },
    PayloadIgnored { kind: &'static str },
}

/// A loaded enclave instance. Key material and staged plaintexts live in
/// private fields; the host sees only metadata accessors.
#[derive(Debug)]
pub struct Enclave {
    instance: String,
    host: HostId,
    program: EnclaveProgram,
    measurement: Digest,
    keys: BTreeMap<String, SymmetricKey>,
    staged: Vec<Vec<u8>>,
    channels: BTreeMap<ChannelId, ChannelEnd>,
    nonces: crate::crypto::NonceSeq,
    executed_runs: u64,
}

impl Enclave {
    pub fn load(
        host: HostId,
        program: EnclaveProgram,
        instance: impl Into<String>,
        nonce_salt: [u8; 16],
    ) -> Self {
        let instance = instance.into();
        let measurement = program.measurement();
        let nonces = crate::crypto::NonceSeq::new(nonce_salt, format!("enclave:{instance}"));
        Enclave {
            instance,
            host,
            program,
            measurement,
            keys: BTreeMap::new(),
            staged: Vec::new(),
            channels: BTreeMap::new(),
            nonces,
            executed_runs: 0,
        }
    }

    pub fn instance(&self) -> &str {
        &self.instance
    }

    pub fn host(&self) -> &HostId {
        &self.host
    }

    pub fn measurement(&self) -> Digest {
        self.measurement
    }

    pub fn key_count(&self) -> usize {
        self.keys.len()
    }

    pub fn staged_len(&self) -> usize {
        self.staged.len()
    }

    pub fn executed_runs(&self) -> u64 {
        self.executed_runs
    }

    /// True when no secret state remains inside.
    pub fn is_sanitized(&self) -> bool {
        self.keys.is_empty() && self.staged.is_empty()
    }

    pub fn quote(&self, nonce: AttestationNonce, platform_key: &SigningKey) -> Quote {
        Quote::sign(
            self.measurement,
            self.instance.clone(),
            self.host.clone(),
            nonce,
            platform_key,
        )
    }

    pub fn install_channel(&mut self, end: ChannelEnd) {
        self.channels.insert(end.id, end);
    }

    pub fn has_channel(&self, id: ChannelId) -> bool {
        self.channels.contains_key(&id)
    }

    /// Feed one sealed segment into the enclave. Provisioned keys stay
    /// inside; the host is told only which descriptors arrived.
    pub fn receive(&mut self, data: &ChannelData) -> Result<Vec<EnclaveEvent>, TeeError> {
        let end = self
            .channels
            .get_mut(&data.channel)
            .ok_or(TeeError::ChannelMissing(data.channel))?;
        let payloads = end.open(data).map_err(|_| TeeError::DecryptFailure {
            descriptor: data.channel.to_string(),
        })?;
        let mut events = Vec::new();
        for bytes in payloads {
            match ChannelPayload::from_bytes(&bytes)? {
                ChannelPayload::Provision { descriptor, key } => {
                    self.keys.insert(
                        descriptor.clone(),
                        SymmetricKey::from_bytes(key, crate::crypto::KeyRole::Data),
                    );
                    events.push(EnclaveEvent::ProvisionStored { descriptor });
                }
                ChannelPayload::Bundle(bundle) => events.push(EnclaveEvent::BundleReleased {
                    bundle: Box::new(bundle),
                }),
                ChannelPayload::Slip(slip) => events.push(EnclaveEvent::SlipReleased { slip }),
                ChannelPayload::Tx(_) => events.push(EnclaveEvent::PayloadIgnored { kind: "tx" }),
            }
        }
        Ok(events)
    }

    /// Re-seal held data keys onto another attested channel. This is how the
    /// broker's key agent provisions a compute enclave: keys move between
    /// enclaves only as channel ciphertext.
    pub fn forward_keys(
        &mut self,
        channel: ChannelId,
        descriptors: &[String],
    ) -> Result<Vec<ChannelData>, TeeError> {
        for d in descriptors {
            if !self.keys.contains_key(d) {
                return Err(TeeError::MissingKey {
                    descriptor: d.clone(),
                });
            }
        }
        let end = self
            .channels
            .get_mut(&channel)
            .ok_or(TeeError::ChannelMissing(channel))?;
        let mut out = Vec::with_capacity(descriptors.len());
        for d in descriptors {
            let key = &self.keys[d];
            let payload = ChannelPayload::Provision {
                descriptor: d.clone(),
                key: *key.bytes(),
            };
            out.push(end.seal(&mut self.nonces, &payload.to_bytes()));
        }
        Ok(out)
    }

    /// Run the measured program over the capsules and emit the sealed result
    /// bundle (to the consumer channel) and key slips (to each provider
    /// channel). All key material and staged plaintext is wiped before this
    /// returns, whether it succeeded or failed.
    pub fn execute(
        &mut self,
        job: &JobSpec,
        capsules: &BTreeMap<String, DataCapsule>,
        consumer: ChannelId,
        providers: &[ChannelId],
        rng: &mut impl RngCore,
    ) -> Result<Vec<(ChannelId, ChannelData)>, TeeError> {
        let result = self.execute_inner(job, capsules, consumer, providers, rng);
        self.sanitize();
        self.executed_runs += 1;
        result
    }

    fn execute_inner(
        &mut self,
        job: &JobSpec,
        capsules: &BTreeMap<String, DataCapsule>,
        consumer: ChannelId,
        providers: &[ChannelId],
        rng: &mut impl RngCore,
    ) -> Result<Vec<(ChannelId, ChannelData)>, TeeError> {
        if self.program.code.operation() != Some(Operation::ColumnStats) {
            return Err(TeeError::UnknownOperation(self.program.code.source.clone()));
        }
        if !self.channels.contains_key(&consumer) {
            return Err(TeeError::ChannelMissing(consumer));
        }
        for p in providers {
            if !self.channels.contains_key(p) {
                return Err(TeeError::ChannelMissing(*p));
            }
        }

        let mut descriptors = job.descriptors.clone();
        descriptors.sort();

        // All keys must be present before any capsule is opened.
        for d in &descriptors {
            if !self.keys.contains_key(d) {
                return Err(TeeError::MissingKey {
                    descriptor: d.clone(),
                });
            }
        }

        let mut tables: Vec<OwnerDataset> = Vec::with_capacity(descriptors.len());
        for d in &descriptors {
            let capsule = capsules.get(d).ok_or_else(|| TeeError::MissingKey {
                descriptor: d.clone(),
            })?;
            let table =
                open_capsule(capsule, &self.keys[d]).map_err(|e| match e {
                    DatasetError::Crypto(_) => TeeError::DecryptFailure {
                        descriptor: d.clone(),
                    },
                    other => TeeError::Compute(other),
                })?;
            self.staged.push(table.to_bytes());
            tables.push(table);
        }

        let refs: Vec<&OwnerDataset> = tables.iter().collect();
        let stats = column_stats(&refs)?;
        let result_bytes = stats.to_bytes();

        let k_result = SymmetricKey::generate(rng, crate::crypto::KeyRole::Result);
        let ad = bindings_ad(&job.bindings);
        let c_result = crate::crypto::aead_encrypt(&k_result, self.nonces.next(), &result_bytes, &ad);
        let bundle = ResultBundle {
            job_id: job.job_id.clone(),
            bindings: job.bindings.clone(),
            c_hash: c_result.digest(),
            kr_hash: k_result.digest(),
            c_result,
        };
        let slip = KeySlip {
            job_id: job.job_id.clone(),
            kr: *k_result.bytes(),
        };

        let mut out = Vec::with_capacity(1 + providers.len());
        let bundle_bytes = ChannelPayload::Bundle(bundle).to_bytes();
        let consumer_end = self.channels.get_mut(&consumer).expect("checked above");
        out.push((consumer, consumer_end.seal(&mut self.nonces, &bundle_bytes)));

        let mut provider_ids: Vec<ChannelId> = providers.to_vec();
        provider_ids.sort();
        provider_ids.dedup();
        let slip_bytes = ChannelPayload::Slip(slip).to_bytes();
        for pid in provider_ids {
            let end = self.channels.get_mut(&pid).expect("checked above");
            out.push((pid, end.seal(&mut self.nonces, &slip_bytes)));
        }
        Ok(out)
    }

    fn sanitize(&mut self) {
        self.keys.clear();
        self.staged.clear();
    }
}

//! Run statistics, computed from the transcript alone. A saved transcript
//! file carries everything needed to rebuild these numbers, so analysis
//! never depends on keeping the run alive.

use crate::harness::transcript::Transcript;
use crate::tee::AttestationPool;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Metrics {
    /// Time of the last logged event.
    pub sim_ms: u64,
    pub log_lines: u64,
    /// When the consumer decrypted and verified the result, if it did.
    pub result_at_ms: Option<u64>,
    pub receipts: u64,
    /// Successful request / computation-complete / complete-transaction
    /// receipts; the unit the paradigm comparison counts.
    pub flow_calls: u64,
    pub tx_accepted: u64,
    pub tx_refused: u64,
    pub completions: u64,
    pub cancels: u64,
    pub channels_opened: u64,
    pub attests_passed: u64,
    pub attests_failed: u64,
    pub drops: u64,
    pub delays: u64,
    pub reorders: u64,
    pub suppressions: u64,
    pub corruptions: u64,
    pub halts: u64,
}

fn field<'a>(detail: &'a str, key: &str) -> Option<&'a str> {
    detail
        .split_whitespace()
        .find_map(|tok| tok.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
}

impl Metrics {
    pub fn from_transcript(t: &Transcript) -> Metrics {
        let mut m = Metrics::default();
        for line in t.lines() {
            m.log_lines += 1;
            m.sim_ms = m.sim_ms.max(line.at_ms);
            match (line.actor.as_str(), line.step.as_str()) {
                ("chain", "receipt") => {
                    m.receipts += 1;
                    if field(&line.detail, "status") != Some("ok") {
                        continue;
                    }
                    let func = field(&line.detail, "fn").unwrap_or_default();
                    let ret = field(&line.detail, "ret").unwrap_or_default();
                    if matches!(
                        func,
                        "request" | "computation-complete" | "complete-transaction"
                    ) {
                        m.flow_calls += 1;
                    }
                    if func == "complete-transaction" && ret == "ok" {
                        m.completions += 1;
                    }
                    if func == "cancel" && ret == "ok" {
                        m.cancels += 1;
                    }
                }
                ("net", "channel-open") => m.channels_opened += 1,
                ("net", "drop") => m.drops += 1,
                ("net", "delay") => m.delays += 1,
                ("net", "reorder") => m.reorders += 1,
                ("net", "suppress") => m.suppressions += 1,
                ("net", "corrupt") => m.corruptions += 1,
                ("net", "halt") => m.halts += 1,
                ("dc", "result-verified") => m.result_at_ms = Some(line.at_ms),
                (_, "tx-accepted") => m.tx_accepted += 1,
                (_, "tx-refused") => m.tx_refused += 1,
                (_, "attest-pass") => m.attests_passed += 1,
                (_, "attest-fail") => m.attests_failed += 1,
                _ => {}
            }
        }
        m
    }

    /// Stable `key=value` lines, one metric per line.
    pub fn render(&self) -> String {
        let result = match self.result_at_ms {
            Some(t) => t.to_string(),
            None => "none".into(),
        };
        format!(
            "sim_ms={}\nlog_lines={}\nresult_at_ms={}\nreceipts={}\nflow_calls={}\n\
             tx_accepted={}\ntx_refused={}\ncompletions={}\ncancels={}\nchannels_opened={}\n\
             attests_passed={}\nattests_failed={}\ndrops={}\ndelays={}\nreorders={}\n\
             suppressions={}\ncorruptions={}\nhalts={}\n",
            self.sim_ms,
            self.log_lines,
            result,
            self.receipts,
            self.flow_calls,
            self.tx_accepted,
            self.tx_refused,
            self.completions,
            self.cancels,
            self.channels_opened,
            self.attests_passed,
            self.attests_failed,
            self.drops,
            self.delays,
            self.reorders,
            self.suppressions,
            self.corruptions,
            self.halts,
        )
    }
}

/// Makespan for a batch of attestation quotes all arriving at time zero,
/// served by a fixed worker pool. Equals ceil(quotes / workers) rounds of
/// the per-quote latency.
pub fn attestation_makespan_ms(quotes: u64, workers: usize, per_quote_ms: u64) -> u64 {
    let mut pool = AttestationPool::new(workers);
    for _ in 0..quotes {
        pool.schedule(0, per_quote_ms);
    }
    pool.makespan()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::scenario::ScenarioConfig;
    use crate::harness::run_scenario;

    #[test]
    fn metrics_survive_a_render_parse_round_trip() {
        let out = run_scenario(ScenarioConfig::default());
        let live = Metrics::from_transcript(&out.transcript);
        let reparsed =
            Transcript::parse(&out.transcript.render()).expect("rendered transcript parses");
        assert_eq!(live, Metrics::from_transcript(&reparsed));
        assert_eq!(live.flow_calls, out.flow_calls);
        assert!(live.result_at_ms.is_some());
        assert_eq!(live.completions, 1);
        assert_eq!(live.cancels, 0);
    }

    #[test]
    fn render_emits_one_line_per_metric() {
        let m = Metrics::default();
        let text = m.render();
        assert_eq!(text.lines().count(), 18);
        assert!(text.contains("flow_calls=0"));
        assert!(text.contains("result_at_ms=none"));
    }

    #[test]
    fn makespan_follows_the_ceiling_formula() {
        assert_eq!(attestation_makespan_ms(160, 1, 600), 96_000);
        assert_eq!(attestation_makespan_ms(160, 64, 600), 1_800);
        assert_eq!(attestation_makespan_ms(7, 3, 100), 300);
        assert_eq!(attestation_makespan_ms(0, 4, 100), 0);
    }
}

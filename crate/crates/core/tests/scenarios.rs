//! End-to-end runs of the named scenarios, each checked against the full
//! invariant suite plus its own expected outcome.

use sealmarket_core::actors::Paradigm;
use sealmarket_core::contracts::RecordStatus;
use sealmarket_core::dataset::{column_stats, OwnerDataset};
use sealmarket_core::harness::checker::{all_passed, run_all};
use sealmarket_core::harness::scenario::{preset, random_adversary, ScenarioConfig, PRESETS};
use sealmarket_core::harness::{run_scenario, RunOutcome};
use sealmarket_core::metrics::Metrics;
use sealmarket_core::types::AccountId;

fn checked(out: &RunOutcome) {
    let reports = run_all(out);
    assert!(
        all_passed(&reports),
        "invariant failures:\n{}",
        reports
            .iter()
            .filter(|r| !r.passed)
            .map(|r| r.to_string())
            .collect::<Vec<_>>()
            .join("\n")
    );
}

fn oracle(out: &RunOutcome) -> sealmarket_core::dataset::StatsResult {
    let mut tables: Vec<&OwnerDataset> = out.datasets.iter().collect();
    tables.sort_by(|a, b| a.descriptor.cmp(&b.descriptor));
    column_stats(&tables).expect("generated tables are well-formed")
}

#[test]
fn honest_brokered_pays_every_owner_and_reproduces_the_oracle() {
    let out = run_scenario(preset("honest-brokered").unwrap());
    checked(&out);
    assert_eq!(out.result.as_ref(), Some(&oracle(&out)));
    assert!(out.view.records.iter().all(|r| r.status == RecordStatus::Complete));
    let start = out.config.genesis_balance;
    for name in out.config.owner_names() {
        assert_eq!(out.view.balances[&AccountId::new(name)], start + out.config.price);
    }
    let spent = out.config.price * out.config.owners as u64;
    assert_eq!(out.view.balances[&AccountId::new("dc")], start - spent);
    assert_eq!(out.flow_calls, 3);
}

#[test]
fn honest_per_owner_pays_through_n_independent_contracts() {
    let out = run_scenario(preset("honest-per-owner").unwrap());
    checked(&out);
    assert_eq!(out.result.as_ref(), Some(&oracle(&out)));
    assert_eq!(out.view.records.len(), out.config.owners as usize);
    assert!(out.view.records.iter().all(|r| r.status == RecordStatus::Complete));
    assert_eq!(out.flow_calls, 3 * out.config.owners as u64);
    let start = out.config.genesis_balance;
    for name in out.config.owner_names() {
        assert_eq!(out.view.balances[&AccountId::new(name)], start + out.config.price);
    }
}

#[test]
fn premature_release_bounces_and_the_honest_retry_still_pays() {
    let out = run_scenario(preset("broker-early-release").unwrap());
    checked(&out);
    assert!(out.transcript.has("db", "complete-early-attempt"));
    // The early call reached the chain and reverted without moving funds.
    let bounced = out
        .view
        .receipts
        .iter()
        .find(|r| {
            r.function == "complete-transaction"
                && r.status != sealmarket_core::ledger::TxStatus::Ok
        })
        .expect("the premature completion must land and revert");
    assert!(bounced.credits.is_empty());
    // The protocol still finishes once the commitment is posted.
    assert!(out.result.is_some());
    assert!(out.view.records.iter().all(|r| r.status == RecordStatus::Complete));
}

#[test]
fn corrupted_result_delivery_aborts_before_any_commitment() {
    let out = run_scenario(preset("result-corruption").unwrap());
    checked(&out);
    let m = Metrics::from_transcript(&out.transcript);
    assert!(m.corruptions > 0, "the host rule must have fired");
    assert!(out.result.is_none());
    // No valid bundle, no commitment: every deposit comes back.
    assert!(out.view.records.iter().all(|r| r.status == RecordStatus::Canceled));
    assert!(!out.transcript.has("dc", "commit"));
    let start = out.config.genesis_balance;
    assert_eq!(out.view.balances[&AccountId::new("dc")], start);
}

#[test]
fn withheld_result_bundle_times_out_into_a_full_refund() {
    let out = run_scenario(preset("result-blackout").unwrap());
    checked(&out);
    let m = Metrics::from_transcript(&out.transcript);
    assert!(m.drops > 0);
    assert!(out.result.is_none());
    assert!(out.view.records.iter().all(|r| r.status == RecordStatus::Canceled));
    let start = out.config.genesis_balance;
    assert_eq!(out.view.balances[&AccountId::new("dc")], start);
    for name in out.config.owner_names() {
        assert_eq!(out.view.balances[&AccountId::new(name)], start);
    }
}

#[test]
fn withheld_key_slip_leaves_the_commitment_uncompletable() {
    let out = run_scenario(preset("slip-blackout").unwrap());
    checked(&out);
    // The consumer did commit: the bundle arrived intact.
    assert!(out.transcript.has("dc", "commit"));
    // But the completer never saw the key, so the record timed out.
    assert!(out.result.is_none());
    assert!(out.view.records.iter().all(|r| r.status == RecordStatus::Canceled));
    let m = Metrics::from_transcript(&out.transcript);
    assert_eq!(m.completions, 0);
    assert!(m.cancels > 0);
}

#[test]
fn unverifiable_platform_never_receives_keys_or_data() {
    let out = run_scenario(preset("fake-tee").unwrap());
    checked(&out);
    let m = Metrics::from_transcript(&out.transcript);
    assert!(m.attests_failed > 0);
    assert!(out.result.is_none());
    assert!(!out.transcript.has("cloud", "key-received"));
    assert!(!out.transcript.has("cloud", "execute"));
    assert!(out.view.records.iter().all(|r| r.status == RecordStatus::Canceled));
}

#[test]
fn broker_crash_after_the_slip_still_refunds_the_consumer() {
    let out = run_scenario(preset("broker-halt").unwrap());
    checked(&out);
    assert!(out.transcript.has("db", "slip-received"));
    assert!(out.result.is_none());
    assert!(out.view.records.iter().all(|r| r.status == RecordStatus::Canceled));
    let start = out.config.genesis_balance;
    assert_eq!(out.view.balances[&AccountId::new("dc")], start);
}

#[test]
fn slow_and_shuffled_delivery_only_stretches_the_run() {
    let out = run_scenario(preset("laggy-network").unwrap());
    checked(&out);
    let m = Metrics::from_transcript(&out.transcript);
    assert!(m.delays > 0 || m.reorders > 0);
    assert!(out.result.is_some());
    assert!(out.view.records.iter().all(|r| r.status == RecordStatus::Complete));
    // Slower than the clean run, still well inside the cancel window.
    let clean = run_scenario(preset("honest-brokered").unwrap());
    assert!(m.sim_ms > Metrics::from_transcript(&clean.transcript).sim_ms);
}

#[test]
fn every_preset_satisfies_the_invariant_suite() {
    for name in PRESETS {
        let out = run_scenario(preset(name).unwrap());
        let reports = run_all(&out);
        assert!(
            all_passed(&reports),
            "{name}:\n{}",
            reports
                .iter()
                .filter(|r| !r.passed)
                .map(|r| r.to_string())
                .collect::<Vec<_>>()
                .join("\n")
        );
        assert!(out.view.drained, "{name} left work in the queue");
    }
}

#[test]
fn seeded_reruns_are_byte_identical_across_presets() {
    for name in ["honest-per-owner", "result-corruption", "laggy-network"] {
        let a = run_scenario(preset(name).unwrap());
        let b = run_scenario(preset(name).unwrap());
        assert_eq!(
            a.transcript.render(),
            b.transcript.render(),
            "{name} diverged between identical runs"
        );
    }
}

#[test]
fn random_adversaries_smoke_sweep_holds_every_invariant() {
    for seed in 0..60u64 {
        let mut cfg = ScenarioConfig {
            seed,
            request_timeout_ms: 8_000,
            ..ScenarioConfig::default()
        };
        cfg.adversary = random_adversary(seed, &cfg);
        if seed % 2 == 1 {
            cfg.paradigm = Paradigm::PerOwner;
        }
        let out = run_scenario(cfg);
        let reports = run_all(&out);
        assert!(
            all_passed(&reports),
            "seed {seed}:\n{}\n--- transcript tail ---\n{}",
            reports
                .iter()
                .filter(|r| !r.passed)
                .map(|r| r.to_string())
                .collect::<Vec<_>>()
                .join("\n"),
            out.transcript
                .render()
                .lines()
                .rev()
                .take(30)
                .collect::<Vec<_>>()
                .join("\n")
        );
        assert!(out.view.drained, "seed {seed} left work in the queue");
    }
}

//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`). Set `IMAE_ACCEPTANCE` to a
//! comma-separated list of criterion numbers to run a subset, e.g.
//! `IMAE_ACCEPTANCE=1,2,3 cargo test -p imae-core --test acceptance`.

mod exact;
mod training;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

/// Outcome of one criterion: pass flag plus a short human-readable summary.
pub struct Verdict {
    pub pass: bool,
    pub detail: String,
}

impl Verdict {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

type Criterion = (u32, &'static str, fn() -> Verdict);

const CRITERIA: [Criterion; 8] = [
    (1, "gradient oracle", exact::gradient_oracle),
    (2, "mask/permutation suite", exact::mask_suite),
    (3, "mixer suite", exact::mixer_suite),
    (4, "lasso oracle", exact::lasso_oracle),
    (5, "metric identities", exact::metric_identities),
    (6, "desk-scale training echo", training::desk_echo),
    (7, "determinism", training::determinism),
    (8, "teacher freeze", training::teacher_freeze),
];

fn selected() -> Option<Vec<u32>> {
    let raw = std::env::var("IMAE_ACCEPTANCE").ok()?;
    let ids: Vec<u32> = raw.split(',').filter_map(|s| s.trim().parse().ok()).collect();
    (!ids.is_empty()).then_some(ids)
}

fn main() -> ExitCode {
    // libtest flags such as `--nocapture` are accepted and ignored.
    let only = selected();
    let mut failed = 0;
    for (id, name, run) in CRITERIA {
        if only.as_ref().is_some_and(|ids| !ids.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let verdict = catch_unwind(AssertUnwindSafe(run))
            .unwrap_or_else(|e| {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panic".into());
                Verdict::new(false, format!("panicked: {msg}"))
            });
        let status = if verdict.pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {id} [{name}]: {status} ({:.1}s) {}",
            start.elapsed().as_secs_f64(),
            verdict.detail
        );
        if !verdict.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

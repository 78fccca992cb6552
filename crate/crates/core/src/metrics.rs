//! Per-issue outcome records and batch-level statistics: resolution rate,
//! reproduction success rate, regression-avoidance rate, token spend, and
//! the deterministic rules for picking a final patch without a reviewer.

use serde::{Deserialize, Serialize};

use crate::config::PriceConfig;
use crate::diff::Patch;
use crate::domain::{CandidatePatch, FinalStatus, RepairTrajectory, SCHEMA_VERSION};

/// Counters accumulated while resolving one issue.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IssueMetrics {
    pub llm_calls: u64,
    pub tokens_in: u64,
    pub tokens_out: u64,
    pub wall_time_ms: u64,
    /// True when at least one reproduction script run reached a definitive
    /// verdict (reproduced or resolved).
    pub esr_flag: bool,
}

/// Everything persisted for one finished issue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IssueOutcome {
    pub schema_version: u32,
    pub issue_id: String,
    pub status: FinalStatus,
    /// Canonical rendering of the selected patch, when one was selected.
    pub final_patch: Option<String>,
    pub trajectory: RepairTrajectory,
    pub metrics: IssueMetrics,
    /// Post-hoc external judgement: did the fix avoid regressions? Absent
    /// until recorded.
    pub rsr_flag: Option<bool>,
}

impl IssueOutcome {
    pub fn new(
        trajectory: RepairTrajectory,
        final_patch: Option<&Patch>,
        metrics: IssueMetrics,
    ) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            issue_id: trajectory.issue_id.clone(),
            status: trajectory.final_status,
            final_patch: final_patch.map(crate::diff::render),
            trajectory,
            metrics,
            rsr_flag: None,
        }
    }
}

/// Batch statistics over a set of outcomes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub total_issues: usize,
    pub resolved: usize,
    /// Percentage of issues resolved, one decimal place.
    pub resolve_rate_pct: f64,
    pub reproduced: usize,
    /// Percentage of issues where some reproduction run reached a definitive
    /// verdict.
    pub repro_success_pct: f64,
    /// Regression-avoidance percentage over issues with a recorded flag;
    /// `None` when no issue has one.
    pub regression_safe_pct: Option<f64>,
    pub rsr_recorded: usize,
    pub total_llm_calls: u64,
    pub total_tokens_in: u64,
    pub total_tokens_out: u64,
    pub total_wall_time_ms: u64,
    /// Dollar cost under the given prices; `None` without a price table.
    pub cost_usd: Option<f64>,
}

fn pct(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        (num as f64 * 1000.0 / den as f64).round() / 10.0
    }
}

pub fn compute_stats(outcomes: &[IssueOutcome], prices: Option<&PriceConfig>) -> StatsReport {
    let total = outcomes.len();
    let resolved = outcomes
        .iter()
        .filter(|o| o.status == FinalStatus::Resolved)
        .count();
    let reproduced = outcomes.iter().filter(|o| o.metrics.esr_flag).count();
    let flagged: Vec<bool> = outcomes.iter().filter_map(|o| o.rsr_flag).collect();
    let regression_safe_pct = if flagged.is_empty() {
        None
    } else {
        let safe = flagged.iter().filter(|b| **b).count();
        Some(pct(safe, flagged.len()))
    };

    let total_llm_calls = outcomes.iter().map(|o| o.metrics.llm_calls).sum();
    let total_tokens_in: u64 = outcomes.iter().map(|o| o.metrics.tokens_in).sum();
    let total_tokens_out: u64 = outcomes.iter().map(|o| o.metrics.tokens_out).sum();
    let total_wall_time_ms = outcomes.iter().map(|o| o.metrics.wall_time_ms).sum();
    let cost_usd = prices.map(|p| p.cost(total_tokens_in, total_tokens_out));

    StatsReport {
        total_issues: total,
        resolved,
        resolve_rate_pct: pct(resolved, total),
        reproduced,
        repro_success_pct: pct(reproduced, total),
        regression_safe_pct,
        rsr_recorded: flagged.len(),
        total_llm_calls,
        total_tokens_in,
        total_tokens_out,
        total_wall_time_ms,
        cost_usd,
    }
}

/// Render a report as aligned human-readable lines.
pub fn render_stats(r: &StatsReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("issues:            {}\n", r.total_issues));
    out.push_str(&format!(
        "resolved:          {} ({:.1}%)\n",
        r.resolved, r.resolve_rate_pct
    ));
    out.push_str(&format!(
        "reproduced:        {} ({:.1}%)\n",
        r.reproduced, r.repro_success_pct
    ));
    match r.regression_safe_pct {
        Some(p) => out.push_str(&format!(
            "regression-safe:   {:.1}% (over {} recorded)\n",
            p, r.rsr_recorded
        )),
        None => out.push_str("regression-safe:   n/a\n"),
    }
    out.push_str(&format!("llm calls:         {}\n", r.total_llm_calls));
    out.push_str(&format!(
        "tokens:            {} in / {} out\n",
        r.total_tokens_in, r.total_tokens_out
    ));
    match r.cost_usd {
        Some(c) => out.push_str(&format!("cost:              ${c:.4}\n")),
        None => out.push_str("cost:              n/a\n"),
    }
    out
}

/// Deterministic fallback selection: most validation passes first, then the
/// later-derived origin (augmented over refined over initial), then earliest
/// creation order.
pub fn most_tests_passed(candidates: &[CandidatePatch]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, c) in candidates.iter().enumerate() {
        let better = match best {
            None => true,
            Some(b) => {
                let cur = &candidates[b];
                (c.validation_passes, c.origin.rank(), std::cmp::Reverse(i))
                    > (cur.validation_passes, cur.origin.rank(), std::cmp::Reverse(b))
            }
        };
        if better {
            best = Some(i);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{PatchOrigin, ReproCheck};

    fn outcome(id: &str, status: FinalStatus, esr: bool, rsr: Option<bool>) -> IssueOutcome {
        let issue = crate::domain::Issue::new(id, "t", "b", std::env::temp_dir());
        let mut traj = RepairTrajectory::new(&issue);
        traj.final_status = status;
        IssueOutcome {
            schema_version: SCHEMA_VERSION,
            issue_id: id.to_string(),
            status,
            final_patch: None,
            trajectory: traj,
            metrics: IssueMetrics {
                llm_calls: 2,
                tokens_in: 100,
                tokens_out: 50,
                wall_time_ms: 10,
                esr_flag: esr,
            },
            rsr_flag: rsr,
        }
    }

    #[test]
    fn four_of_ten_resolved_is_forty_point_zero() {
        let mut outcomes = Vec::new();
        for i in 0..10 {
            let status = if i < 4 {
                FinalStatus::Resolved
            } else {
                FinalStatus::Unresolved
            };
            outcomes.push(outcome(&format!("i{i}"), status, i < 8, None));
        }
        let r = compute_stats(&outcomes, None);
        assert_eq!(r.resolve_rate_pct, 40.0);
        assert_eq!(r.repro_success_pct, 80.0);
        assert_eq!(r.regression_safe_pct, None);
        assert!(render_stats(&r).contains("n/a"));
    }

    #[test]
    fn regression_rate_only_over_recorded_flags() {
        let outcomes = vec![
            outcome("a", FinalStatus::Resolved, true, Some(true)),
            outcome("b", FinalStatus::Resolved, true, Some(false)),
            outcome("c", FinalStatus::Unresolved, false, None),
        ];
        let r = compute_stats(&outcomes, None);
        assert_eq!(r.regression_safe_pct, Some(50.0));
        assert_eq!(r.rsr_recorded, 2);
    }

    #[test]
    fn cost_uses_price_table() {
        let outcomes = vec![outcome("a", FinalStatus::Resolved, true, None)];
        let prices = PriceConfig {
            input_per_million: 3.0,
            output_per_million: 15.0,
        };
        let r = compute_stats(&outcomes, Some(&prices));
        let expected = 100.0 * 3.0 / 1e6 + 50.0 * 15.0 / 1e6;
        assert!((r.cost_usd.unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn empty_batch_has_zero_rates() {
        let r = compute_stats(&[], None);
        assert_eq!(r.resolve_rate_pct, 0.0);
        assert_eq!(r.repro_success_pct, 0.0);
    }

    fn cand(origin: PatchOrigin, passes: u32) -> CandidatePatch {
        CandidatePatch {
            diff: String::new(),
            origin,
            repro_verdict: ReproCheck::Passed,
            validation_passes: passes,
            validation_total: 4,
        }
    }

    #[test]
    fn selection_prefers_more_passes() {
        let cands = vec![cand(PatchOrigin::Initial, 3), cand(PatchOrigin::Augmented, 2)];
        assert_eq!(most_tests_passed(&cands), Some(0));
    }

    #[test]
    fn selection_breaks_pass_ties_by_origin_then_order() {
        let cands = vec![
            cand(PatchOrigin::Initial, 3),
            cand(PatchOrigin::Augmented, 3),
            cand(PatchOrigin::Refined, 3),
            cand(PatchOrigin::Augmented, 3),
        ];
        // Augmented beats refined beats initial; between the two augmented
        // candidates the earlier one wins.
        assert_eq!(most_tests_passed(&cands), Some(1));
        assert_eq!(most_tests_passed(&[]), None);
    }
}

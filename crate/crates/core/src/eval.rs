//! Hit-rate metrics and run reports.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::environment::Scenario;
use crate::toolkit::RankOutput;

/// Cutoffs averaged into the headline metric.
pub const HR_CUTOFFS: [u32; 3] = [1, 3, 5];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("rank must be >= 1, got {0}")]
    InvalidRank(u32),
    #[error("positive item `{0}` is not in the ranking")]
    PositiveMissing(String),
    #[error("cannot aggregate an empty result set")]
    Empty,
}

/// 1 iff the positive sits within the top `k`.
pub fn hr_at_k(rank: u32, k: u32) -> Result<u8, EvalError> {
    if rank < 1 {
        return Err(EvalError::InvalidRank(rank));
    }
    Ok(u8::from(rank <= k))
}

/// Mean of HR@1, HR@3 and HR@5 for a 1-based rank.
pub fn avg_hr(rank: u32) -> Result<f64, EvalError> {
    let hits: u32 = HR_CUTOFFS
        .iter()
        .map(|&k| hr_at_k(rank, k).map(u32::from))
        .sum::<Result<u32, _>>()?;
    Ok(f64::from(hits) / HR_CUTOFFS.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankScore {
    pub rank_of_positive: u32,
    pub hr1: u8,
    pub hr3: u8,
    pub hr5: u8,
    pub avg_hr: f64,
}

impl RankScore {
    pub fn from_rank(rank: u32) -> Result<Self, EvalError> {
        Ok(RankScore {
            rank_of_positive: rank,
            hr1: hr_at_k(rank, 1)?,
            hr3: hr_at_k(rank, 3)?,
            hr5: hr_at_k(rank, 5)?,
            avg_hr: avg_hr(rank)?,
        })
    }
}

pub fn score_ranking(ranking: &RankOutput, positive_id: &str) -> Result<RankScore, EvalError> {
    score_order(&ranking.ranking, positive_id)
}

pub fn score_order(order: &[String], positive_id: &str) -> Result<RankScore, EvalError> {
    let pos = order
        .iter()
        .position(|id| id == positive_id)
        .ok_or_else(|| EvalError::PositiveMissing(positive_id.to_string()))?;
    RankScore::from_rank(pos as u32 + 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub episode_id: String,
    pub scenario: Scenario,
    pub rank_of_positive: u32,
    pub hr1: u8,
    pub hr3: u8,
    pub hr5: u8,
    pub avg_hr: f64,
    /// Non-terminal tool calls.
    pub n_tool_steps: usize,
    /// All actions including the terminal `CandidateRank`.
    pub n_actions: usize,
    pub reward: f64,
}

impl EpisodeResult {
    pub fn new(episode_id: &str, scenario: Scenario, score: RankScore, n_tool_steps: usize, reward: f64) -> Self {
        EpisodeResult {
            episode_id: episode_id.to_string(),
            scenario,
            rank_of_positive: score.rank_of_positive,
            hr1: score.hr1,
            hr3: score.hr3,
            hr5: score.hr5,
            avg_hr: score.avg_hr,
            n_tool_steps,
            n_actions: n_tool_steps + 1,
            reward,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub scenario: Scenario,
    pub count: usize,
    /// Mean Avg HR@{1,3,5}, scaled to percent.
    pub avg_hr_pct: f64,
    pub hr1_pct: f64,
    pub hr3_pct: f64,
    pub hr5_pct: f64,
    /// Mean number of actions, terminal included.
    pub mean_steps: f64,
    pub mean_tool_steps: f64,
    pub mean_reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Overall {
    pub count: usize,
    pub avg_hr_pct: f64,
    pub mean_steps: f64,
    pub mean_tool_steps: f64,
    pub mean_reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub policy: String,
    pub config: serde_json::Value,
    pub groups: Vec<GroupRow>,
    pub overall: Overall,
    pub results: Vec<EpisodeResult>,
}

/// Group by scenario (in scenario order) and average each group.
pub fn aggregate(
    results: &[EpisodeResult],
    run_id: &str,
    policy: &str,
    config: serde_json::Value,
) -> Result<RunReport, EvalError> {
    if results.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut groups: BTreeMap<Scenario, Vec<&EpisodeResult>> = BTreeMap::new();
    for r in results {
        groups.entry(r.scenario).or_default().push(r);
    }
    let rows = groups
        .into_iter()
        .map(|(scenario, rs)| {
            let mean = |f: &dyn Fn(&EpisodeResult) -> f64| mean_of(rs.iter().map(|r| f(r)));
            GroupRow {
                scenario,
                count: rs.len(),
                avg_hr_pct: 100.0 * mean(&|r| r.avg_hr),
                hr1_pct: 100.0 * mean(&|r| f64::from(r.hr1)),
                hr3_pct: 100.0 * mean(&|r| f64::from(r.hr3)),
                hr5_pct: 100.0 * mean(&|r| f64::from(r.hr5)),
                mean_steps: mean(&|r| r.n_actions as f64),
                mean_tool_steps: mean(&|r| r.n_tool_steps as f64),
                mean_reward: mean(&|r| r.reward),
            }
        })
        .collect();

    // Sort a copy so the overall means do not depend on input order.
    let mut ordered: Vec<&EpisodeResult> = results.iter().collect();
    ordered.sort_by(|a, b| a.episode_id.cmp(&b.episode_id));
    let overall = Overall {
        count: results.len(),
        avg_hr_pct: 100.0 * mean_of(ordered.iter().map(|r| r.avg_hr)),
        mean_steps: mean_of(ordered.iter().map(|r| r.n_actions as f64)),
        mean_tool_steps: mean_of(ordered.iter().map(|r| r.n_tool_steps as f64)),
        mean_reward: mean_of(ordered.iter().map(|r| r.reward)),
    };

    let mut results = results.to_vec();
    results.sort_by(|a, b| a.episode_id.cmp(&b.episode_id));
    Ok(RunReport {
        run_id: run_id.to_string(),
        policy: policy.to_string(),
        config,
        groups: rows,
        overall,
        results,
    })
}

fn mean_of(values: impl Iterator<Item = f64>) -> f64 {
    let mut sorted: Vec<f64> = values.collect();
    // Fixed summation order keeps group means bit-identical under input permutation.
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    sorted.iter().sum::<f64>() / n as f64
}

/// Markdown table: one row per scenario, percentages to one decimal, steps to two.
pub fn render_markdown(report: &RunReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("# Run `{}` (policy: {})\n\n", report.run_id, report.policy));
    out.push_str("| Scenario | N | Avg HR@{1,3,5} | HR@1 | HR@3 | HR@5 | Avg Steps |\n");
    out.push_str("|---|---:|---:|---:|---:|---:|---:|\n");
    for g in &report.groups {
        out.push_str(&format!(
            "| {} | {} | {:.1} | {:.1} | {:.1} | {:.1} | {:.2} |\n",
            g.scenario.label(),
            g.count,
            g.avg_hr_pct,
            g.hr1_pct,
            g.hr3_pct,
            g.hr5_pct,
            g.mean_steps
        ));
    }
    out.push_str(&format!(
        "| **All** | {} | {:.1} | | | | {:.2} |\n",
        report.overall.count, report.overall.avg_hr_pct, report.overall.mean_steps
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn result(id: &str, scenario: Scenario, rank: u32, tools: usize) -> EpisodeResult {
        EpisodeResult::new(id, scenario, RankScore::from_rank(rank).unwrap(), tools, 0.0)
    }

    #[test]
    fn analytic_rank_table() {
        assert_eq!(RankScore::from_rank(1).unwrap().avg_hr, 1.0);
        let r4 = RankScore::from_rank(4).unwrap();
        assert_eq!((r4.hr1, r4.hr3, r4.hr5), (0, 0, 1));
        assert_eq!(r4.avg_hr, 1.0 / 3.0);
        let r20 = RankScore::from_rank(20).unwrap();
        assert_eq!((r20.hr1, r20.hr3, r20.hr5, r20.avg_hr), (0, 0, 0, 0.0));
        assert_eq!(hr_at_k(0, 5), Err(EvalError::InvalidRank(0)));
    }

    #[test]
    fn positive_missing_is_protocol_error() {
        let order = vec!["a".to_string(), "b".to_string()];
        assert_eq!(score_order(&order, "z"), Err(EvalError::PositiveMissing("z".into())));
        assert_eq!(score_order(&order, "b").unwrap().rank_of_positive, 2);
    }

    #[test]
    fn single_result_group_mean() {
        let rep = aggregate(&[result("e1", Scenario::Classic, 2, 3)], "r", "p", serde_json::Value::Null).unwrap();
        assert_eq!(rep.groups.len(), 1);
        assert!((rep.groups[0].avg_hr_pct - 66.666_666_666).abs() < 1e-6);
        assert_eq!(format!("{:.1}", rep.groups[0].avg_hr_pct), "66.7");
        assert_eq!(rep.groups[0].mean_steps, 4.0);
    }

    #[test]
    fn two_groups_two_rows() {
        let rs = vec![
            result("e1", Scenario::Classic, 1, 1),
            result("e2", Scenario::CsUser, 9, 2),
            result("e3", Scenario::Classic, 4, 3),
        ];
        let rep = aggregate(&rs, "r", "p", serde_json::Value::Null).unwrap();
        assert_eq!(rep.groups.len(), 2);
        let md = render_markdown(&rep);
        assert_eq!(md.lines().filter(|l| l.starts_with("| ") && !l.starts_with("| Scenario") && !l.starts_with("| **")).count(), 2);
        assert!(aggregate(&[], "r", "p", serde_json::Value::Null).is_err());
    }

    #[test]
    fn steps_formatting_matches_two_decimals() {
        let rs: Vec<_> = (0..20)
            .map(|i| result(&format!("e{i}"), Scenario::Classic, 1, if i == 0 { 5 } else { 4 }))
            .collect();
        let rep = aggregate(&rs, "r", "p", serde_json::Value::Null).unwrap();
        assert_eq!(format!("{:.2}", rep.groups[0].mean_steps), "5.05");
    }

    proptest! {
        #[test]
        fn avg_hr_takes_quantized_values(rank in 1u32..=20) {
            let v = avg_hr(rank).unwrap();
            prop_assert!([0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0].contains(&v));
        }

        #[test]
        fn aggregation_is_permutation_invariant(ranks in prop::collection::vec((1u32..=20, 0usize..8, 0usize..5), 1..40), seed in any::<u64>()) {
            let scen = [Scenario::Classic, Scenario::CsUser, Scenario::CsItem, Scenario::EvoLong, Scenario::EvoShort];
            let rs: Vec<_> = ranks.iter().enumerate()
                .map(|(i, &(r, t, s))| result(&format!("e{i}"), scen[s], r, t))
                .collect();
            let mut shuffled = rs.clone();
            use rand::seq::SliceRandom;
            shuffled.shuffle(&mut crate::rng::stream(seed, "perm"));
            let a = aggregate(&rs, "r", "p", serde_json::Value::Null).unwrap();
            let b = aggregate(&shuffled, "r", "p", serde_json::Value::Null).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}

//! Capability mining: filter reasoning traces, normalize their steps,
//! embed and cluster them, and map clusters onto tools.

mod embed;
mod kmeans;

pub use embed::{unit_normalize, Embedder, HashingEmbedder, ProviderEmbedder, EMBED_DIM};
pub use kmeans::{inertia, kmeans, merge_small_clusters, select_k, silhouette, ClusterModel, KMeansConfig, SelectKDiagnostics};

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Domain;
use crate::io::{self, IoError};
use crate::provider::ProviderError;
use crate::toolkit::ToolName;

/// Prompt used to elicit step-labelled reasoning traces; slots `{history}`, `{candidates}`.
pub const COT_TEMPLATE: &str = include_str!("../../prompts/cot_template.txt");
const DEFAULT_OP_TABLE: &str = include_str!("../../data/step_ops.json");
pub const OTHER_OP: &str = "other";

#[derive(Debug, thiserror::Error)]
pub enum MiningError {
    #[error("k = {k} is invalid for {n} points")]
    InvalidK { k: usize, n: usize },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("op table: {0}")]
    OpTable(String),
    #[error("no valid traces left after filtering")]
    NoTraces,
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Io(#[from] IoError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub label: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoTTrace {
    pub trace_id: String,
    /// Task the trace was elicited for; traces sharing it are votes.
    pub episode_id: String,
    pub domain: Domain,
    pub steps: Vec<TraceStep>,
    pub final_ranking: Vec<String>,
    pub hr5: u8,
    pub n_steps: usize,
}

impl CoTTrace {
    pub fn validate(&self) -> Result<(), MiningError> {
        if self.hr5 > 1 {
            return Err(MiningError::InvalidInput(format!("{}: hr5 must be 0 or 1", self.trace_id)));
        }
        if self.n_steps != self.steps.len() {
            return Err(MiningError::InvalidInput(format!(
                "{}: n_steps {} but {} steps",
                self.trace_id,
                self.n_steps,
                self.steps.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpEntry {
    pub phrases: Vec<String>,
    pub keywords: Vec<String>,
    pub tools: Vec<ToolName>,
}

/// Versioned synonym table: canonical ops, the phrases and keywords that
/// map to them, and the tools each op corresponds to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpTable {
    pub version: u32,
    pub ops: BTreeMap<String, OpEntry>,
}

impl Default for OpTable {
    fn default() -> Self {
        serde_json::from_str(DEFAULT_OP_TABLE).expect("bundled op table parses")
    }
}

impl OpTable {
    pub fn load(path: &Path) -> Result<OpTable, MiningError> {
        let t: OpTable = io::read_json(path)?;
        if t.ops.is_empty() {
            return Err(MiningError::OpTable("empty op table".into()));
        }
        Ok(t)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepDescriptor {
    pub op: String,
    pub args: Vec<String>,
    pub source_text: String,
}

impl StepDescriptor {
    /// Text handed to the embedder: the op (weighted twice) and argument values.
    pub fn embedding_text(&self) -> String {
        let mut parts = Vec::new();
        if self.op != OTHER_OP {
            parts.push(self.op.replace('_', " "));
            parts.push(self.op.replace('_', " "));
        }
        parts.extend(self.args.iter().map(|a| a.split_once(':').map_or(a.as_str(), |(_, v)| v).to_string()));
        parts.join(" ")
    }
}

fn clean(text: &str) -> String {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Lowercases, strips punctuation and maps the text onto a canonical op:
/// an exact phrase match first, otherwise the op with the most keyword hits
/// (ties to the first op by name). Unmatched text becomes [`OTHER_OP`].
pub fn normalize_step(text: &str, table: &OpTable) -> StepDescriptor {
    let cleaned = clean(text);
    let tokens: Vec<&str> = cleaned.split(' ').filter(|t| !t.is_empty()).collect();
    let other = || StepDescriptor {
        op: OTHER_OP.to_string(),
        args: if cleaned.is_empty() { Vec::new() } else { vec![format!("text:{cleaned}")] },
        source_text: text.to_string(),
    };
    if tokens.is_empty() {
        return other();
    }
    let exact = table.ops.iter().find(|(_, e)| e.phrases.iter().any(|p| clean(p) == cleaned));
    let (op, entry) = match exact {
        Some(hit) => hit,
        None => {
            let mut best: Option<(&String, &OpEntry, usize)> = None;
            for (op, e) in &table.ops {
                let hits = tokens.iter().filter(|t| e.keywords.iter().any(|k| k == *t)).count();
                if hits > 0 && best.is_none_or(|b| hits > b.2) {
                    best = Some((op, e, hits));
                }
            }
            match best {
                Some((op, e, _)) => (op, e),
                None => return other(),
            }
        }
    };
    let args = tokens
        .iter()
        .filter(|t| !entry.keywords.iter().any(|k| k == *t))
        .map(|t| format!("term:{t}"))
        .collect();
    StepDescriptor {
        op: op.clone(),
        args,
        source_text: text.to_string(),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterStats {
    pub input: usize,
    pub missed: usize,
    pub over_budget: usize,
    pub repeats: usize,
    pub empty: usize,
    pub duplicates: usize,
    pub kept: usize,
}

/// Keeps traces with `hr5 = 1`, at most `t_max` steps and no two consecutive
/// steps with the same normalized op. For traces of the same episode, the
/// majority outcome (top-5 prefix of the ranking) wins and its shortest
/// trace is kept; remaining ties go to the smallest `trace_id`.
pub fn filter_traces<'a>(traces: &'a [CoTTrace], t_max: usize, table: &OpTable) -> (Vec<CoTTrace>, FilterStats) {
    let mut stats = FilterStats {
        input: traces.len(),
        ..FilterStats::default()
    };
    let mut valid: BTreeMap<&str, Vec<&CoTTrace>> = BTreeMap::new();
    for t in traces {
        if t.hr5 != 1 {
            stats.missed += 1;
            continue;
        }
        if t.steps.is_empty() || t.steps.iter().any(|s| s.text.trim().is_empty()) {
            stats.empty += 1;
            continue;
        }
        if t.steps.len() > t_max {
            stats.over_budget += 1;
            continue;
        }
        let ops: Vec<String> = t.steps.iter().map(|s| normalize_step(&s.text, table).op).collect();
        if ops.windows(2).any(|w| w[0] == w[1]) {
            stats.repeats += 1;
            continue;
        }
        valid.entry(t.episode_id.as_str()).or_default().push(t);
    }
    let mut kept = Vec::new();
    for (episode, group) in valid {
        let mut votes: BTreeMap<Vec<&str>, Vec<&CoTTrace>> = BTreeMap::new();
        for t in &group {
            let top: Vec<&str> = t.final_ranking.iter().take(5).map(String::as_str).collect();
            votes.entry(top).or_default().push(t);
        }
        let shortest = |ts: &Vec<&'a CoTTrace>| -> &'a CoTTrace {
            *ts.iter()
                .min_by(|a, b| a.steps.len().cmp(&b.steps.len()).then(a.trace_id.cmp(&b.trace_id)))
                .expect("non-empty vote")
        };
        let max_votes = votes.values().map(Vec::len).max().unwrap_or(0);
        let leaders: Vec<&CoTTrace> = votes.values().filter(|v| v.len() == max_votes).map(shortest).collect();
        if leaders.len() > 1 {
            log::info!("episode {episode}: {} outcomes tie at {max_votes} votes", leaders.len());
        }
        let winner = leaders
            .into_iter()
            .min_by(|a, b| a.steps.len().cmp(&b.steps.len()).then(a.trace_id.cmp(&b.trace_id)))
            .expect("at least one outcome");
        stats.duplicates += group.len() - 1;
        kept.push(winner.clone());
    }
    stats.kept = kept.len();
    (kept, stats)
}

/// A cluster summary for naming and mapping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterCard {
    pub cluster_id: usize,
    pub size: usize,
    /// Up to three distinct step texts closest to the centroid.
    pub bullets: Vec<String>,
    pub dominant_op: String,
    pub op_counts: BTreeMap<String, usize>,
}

pub fn cluster_cards(model: &ClusterModel, vectors: &[Vec<f64>], steps: &[StepDescriptor]) -> Vec<ClusterCard> {
    (0..model.k)
        .filter_map(|c| {
            let mut members: Vec<usize> = (0..steps.len()).filter(|&i| model.assignments[i] == c).collect();
            if members.is_empty() {
                return None;
            }
            members.sort_by(|&a, &b| {
                kmeans::sq_dist(&vectors[a], &model.centroids[c])
                    .total_cmp(&kmeans::sq_dist(&vectors[b], &model.centroids[c]))
                    .then(a.cmp(&b))
            });
            let mut bullets: Vec<String> = Vec::new();
            for &i in &members {
                if bullets.len() == 3 {
                    break;
                }
                if !bullets.contains(&steps[i].source_text) {
                    bullets.push(steps[i].source_text.clone());
                }
            }
            let mut op_counts: BTreeMap<String, usize> = BTreeMap::new();
            for &i in &members {
                *op_counts.entry(steps[i].op.clone()).or_default() += 1;
            }
            let dominant_op = op_counts
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                .map(|(op, _)| op.clone())
                .expect("non-empty cluster");
            Some(ClusterCard {
                cluster_id: c,
                size: members.len(),
                bullets,
                dominant_op,
                op_counts,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterToolEntry {
    pub cluster_id: usize,
    pub dominant_op: String,
    pub tools: Vec<ToolName>,
    /// Set when no tool applies and a person should look at the cluster.
    pub needs_review: bool,
}

/// Maps each card to the tools of its dominant op. `GeoContext` is only
/// assigned in geo-enabled domains.
pub fn map_clusters_to_tools(cards: &[ClusterCard], table: &OpTable, domain: Domain) -> Result<Vec<ClusterToolEntry>, MiningError> {
    if table.ops.is_empty() {
        return Err(MiningError::OpTable("empty mapping table".into()));
    }
    Ok(cards
        .iter()
        .map(|card| {
            let tools: Vec<ToolName> = table
                .ops
                .get(&card.dominant_op)
                .map(|e| e.tools.iter().copied().filter(|t| *t != ToolName::GeoContext || domain.supports_geo()).collect())
                .unwrap_or_default();
            ClusterToolEntry {
                cluster_id: card.cluster_id,
                dominant_op: card.dominant_op.clone(),
                needs_review: tools.is_empty(),
                tools,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MiningConfig {
    pub t_max: usize,
    pub k_range: (usize, usize),
    pub kmeans: KMeansConfig,
    pub min_cluster_frac: f64,
    pub seed: u64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            t_max: 10,
            k_range: (2, 12),
            kmeans: KMeansConfig::default(),
            min_cluster_frac: 0.02,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainClusters {
    pub domain: Domain,
    pub n_traces: usize,
    pub n_steps: usize,
    pub model: ClusterModel,
    pub diagnostics: SelectKDiagnostics,
    pub cards: Vec<ClusterCard>,
    pub mapping: Vec<ClusterToolEntry>,
}

/// Mapping consolidated across domains by tool name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolMapping {
    pub embedder: String,
    pub op_table_version: u32,
    /// Tool -> clusters as `domain:cluster_id`.
    pub tools: BTreeMap<ToolName, Vec<String>>,
    pub needs_review: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningOutput {
    pub filter: FilterStats,
    pub domains: Vec<DomainClusters>,
    pub mapping: ToolMapping,
}

/// Runs filter → normalize → embed → select k → merge → cards → mapping,
/// independently per domain, then merges the mappings by tool name.
pub fn mine(traces: &[CoTTrace], table: &OpTable, embedder: &dyn Embedder, config: &MiningConfig) -> Result<MiningOutput, MiningError> {
    for t in traces {
        t.validate()?;
    }
    let (kept, filter) = filter_traces(traces, config.t_max, table);
    if kept.is_empty() {
        return Err(MiningError::NoTraces);
    }
    let domains: BTreeSet<Domain> = kept.iter().map(|t| t.domain).collect();
    let mut out = Vec::new();
    let mut tools: BTreeMap<ToolName, Vec<String>> = BTreeMap::new();
    let mut needs_review = Vec::new();
    for domain in domains {
        let ts: Vec<&CoTTrace> = kept.iter().filter(|t| t.domain == domain).collect();
        let steps: Vec<StepDescriptor> =
            ts.iter().flat_map(|t| t.steps.iter().map(|s| normalize_step(&s.text, table))).collect();
        let texts: Vec<String> = steps.iter().map(StepDescriptor::embedding_text).collect();
        let vectors = embedder.embed(&texts)?;
        let (model, diagnostics) = select_k(&vectors, config.k_range, config.seed, &config.kmeans)?;
        let model = merge_small_clusters(&vectors, &model, config.min_cluster_frac);
        let cards = cluster_cards(&model, &vectors, &steps);
        let mapping = map_clusters_to_tools(&cards, table, domain)?;
        for m in &mapping {
            let key = format!("{domain}:{}", m.cluster_id);
            if m.needs_review {
                needs_review.push(key.clone());
            }
            for t in &m.tools {
                tools.entry(*t).or_default().push(key.clone());
            }
        }
        out.push(DomainClusters {
            domain,
            n_traces: ts.len(),
            n_steps: steps.len(),
            model,
            diagnostics,
            cards,
            mapping,
        });
    }
    Ok(MiningOutput {
        filter,
        domains: out,
        mapping: ToolMapping {
            embedder: embedder.name(),
            op_table_version: table.version,
            tools,
            needs_review,
        },
    })
}

/// Writes `clusters.json` (models, diagnostics, cards) and `tool_mapping.json`.
pub fn write_mining_output(dir: &Path, output: &MiningOutput) -> Result<(), IoError> {
    io::write_json(&dir.join("clusters.json"), &(&output.filter, &output.domains))?;
    io::write_json(&dir.join("tool_mapping.json"), &output.mapping)
}

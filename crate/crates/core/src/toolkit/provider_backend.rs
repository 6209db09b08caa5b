//! Tool execution through a remote text-completion provider.

use serde::Deserialize;
use serde_json::{json, Value};

use super::{BackendKind, CorpusView, Facet, RankOutput, ToolBackend, ToolError, ToolOutput, ToolResult, ToolSpec};
use crate::corpus::{DEFAULT_CONTEXT_INTERACTIONS, DEFAULT_CONTEXT_REVIEWS, SECONDS_PER_DAY};
use crate::executor::AgentState;
use crate::provider::{ChatMessage, ProviderClient};

/// Version of the prompt templates under `prompts/`.
pub const PROMPT_VERSION: &str = "v1";

const TOOL_SYSTEM: &str = include_str!("../../prompts/tool_system.txt");
const TOOL_USER: &str = include_str!("../../prompts/tool_user.txt");
const RANK_SYSTEM: &str = include_str!("../../prompts/rank_system.txt");
const RANK_USER: &str = include_str!("../../prompts/rank_user.txt");
const REPAIR: &str = include_str!("../../prompts/repair.txt");

/// Replace `{name}` slots; other braces are left alone.
pub(crate) fn fill(template: &str, slots: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (name, value) in slots {
        out = out.replace(&format!("{{{name}}}"), value);
    }
    out
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EvidenceReply {
    facets: Vec<Facet>,
    confidence: f64,
    summary: String,
}

/// Renders the context a tool is allowed to see, as JSON.
fn render_context(spec: &ToolSpec, state: &AgentState, view: &CorpusView<'_>) -> Result<Value, ToolError> {
    let needs = spec.input_needs;
    let reference = view.episode().reference_time;
    let mut ctx = serde_json::Map::new();
    ctx.insert("domain".into(), json!(view.episode().domain));
    if needs.user_history {
        let history = view.history()?;
        ctx.insert("history_len".into(), json!(history.len()));
        let mut rows = Vec::new();
        for inter in history.iter().take(DEFAULT_CONTEXT_INTERACTIONS) {
            let item = view.history_item(&inter.item_id)?;
            let mut row = json!({
                "item_id": inter.item_id,
                "title": item.title,
                "categories": item.categories,
                "author_or_brand": item.author_or_brand,
                "rating": inter.rating,
                "days_before": (reference - inter.timestamp) / SECONDS_PER_DAY,
            });
            if needs.user_reviews {
                let texts: Vec<&str> = view.user_reviews_of(&inter.item_id)?.iter().map(|r| r.text.as_str()).collect();
                row["reviews"] = json!(texts);
            }
            rows.push(row);
        }
        ctx.insert("history".into(), Value::Array(rows));
    }
    if needs.candidate_meta {
        let mut rows = Vec::new();
        for id in &state.candidate_ids {
            let item = view.candidate(id)?;
            let mut row = json!({
                "item_id": id,
                "title": item.title,
                "categories": item.categories,
                "rating_mean": item.rating_mean,
                "rating_count": item.rating_count,
                "author_or_brand": item.author_or_brand,
                "price": item.price,
            });
            if needs.candidate_reviews {
                let texts: Vec<&str> = view
                    .candidate_reviews(id, DEFAULT_CONTEXT_REVIEWS)?
                    .iter()
                    .map(|r| r.text.as_str())
                    .collect();
                row["reviews"] = json!(texts);
            }
            if needs.geo {
                row["location"] = json!(view.candidate_location(id)?);
            }
            rows.push(row);
        }
        ctx.insert("candidates".into(), Value::Array(rows));
    }
    if needs.geo {
        ctx.insert("user_location".into(), json!(view.user_location()?));
    }
    if spec.is_terminal {
        let evidence: Vec<Value> = state
            .memory
            .iter()
            .map(|m| &m.output)
            .map(|o| json!({"tool": o.produced_by, "confidence": o.confidence, "summary": o.summary, "facets": o.facets}))
            .collect();
        ctx.insert("evidence".into(), Value::Array(evidence));
    }
    Ok(Value::Object(ctx))
}

fn parse_reply(spec: &ToolSpec, state: &AgentState, text: &str) -> Result<ToolResult, ToolError> {
    let text = text.trim();
    let result = if spec.is_terminal {
        let rank: RankOutput = serde_json::from_str(text).map_err(|e| ToolError::Schema(e.to_string()))?;
        ToolResult::Ranking(rank)
    } else {
        let reply: EvidenceReply = serde_json::from_str(text).map_err(|e| ToolError::Schema(e.to_string()))?;
        if !(0.0..=1.0).contains(&reply.confidence) {
            return Err(ToolError::Schema(format!("confidence {} outside [0,1]", reply.confidence)));
        }
        ToolResult::Evidence(ToolOutput::new(spec.name, reply.facets, reply.confidence, reply.summary))
    };
    result.validate(spec.name, &state.candidate_ids)?;
    Ok(result)
}

/// Sends each tool's prompt to the provider and parses the strict JSON reply.
///
/// A reply that fails to parse or validate gets exactly one repair attempt;
/// a second failure is an error. Replies are never coerced into shape.
#[derive(Clone)]
pub struct ProviderBackend {
    client: ProviderClient,
}

impl ProviderBackend {
    pub fn new(client: ProviderClient) -> Self {
        ProviderBackend { client }
    }

    pub fn messages(&self, spec: &ToolSpec, state: &AgentState, view: &CorpusView<'_>) -> Result<Vec<ChatMessage>, ToolError> {
        let context = serde_json::to_string_pretty(&render_context(spec, state, view)?)
            .map_err(|e| ToolError::InvalidInput(e.to_string()))?;
        let (system, user) = if spec.is_terminal {
            let n = state.candidate_ids.len().to_string();
            (
                fill(RANK_SYSTEM, &[("description", &spec.description), ("n_candidates", &n)]),
                fill(RANK_USER, &[("context", &context)]),
            )
        } else {
            let keys = spec.name.facet_vocabulary().join(", ");
            (
                fill(
                    TOOL_SYSTEM,
                    &[("tool", spec.name.as_str()), ("description", &spec.description), ("facet_keys", &keys)],
                ),
                fill(TOOL_USER, &[("context", &context)]),
            )
        };
        Ok(vec![ChatMessage::system(system), ChatMessage::user(user)])
    }
}

impl ToolBackend for ProviderBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Provider
    }

    fn execute(&self, spec: &ToolSpec, state: &AgentState, view: &CorpusView<'_>) -> Result<ToolResult, ToolError> {
        let mut messages = self.messages(spec, state, view)?;
        let first = self.client.chat(messages.clone())?;
        match parse_reply(spec, state, &first) {
            Ok(r) => Ok(r),
            Err(err) => {
                log::warn!("{} reply rejected ({err}); asking for a repair", spec.name);
                messages.push(ChatMessage::assistant(first));
                messages.push(ChatMessage::user(fill(REPAIR, &[("error", &err.to_string())])));
                let second = self.client.chat(messages)?;
                parse_reply(spec, state, &second)
            }
        }
    }
}

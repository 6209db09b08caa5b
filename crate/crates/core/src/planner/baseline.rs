use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::IndexedRandom;

use crate::corpus::Domain;
use crate::executor::{Decision, ExecError, Policy};
use crate::provider::{ChatMessage, ProviderClient};
use crate::toolkit::{fill, ToolName};

const PLANNER_PROMPT: &str = include_str!("../../prompts/planner.txt");

/// Plays a fixed action sequence. Fails if the next scripted action is not
/// feasible or the script runs out.
#[derive(Debug, Clone)]
pub struct ScriptedPolicy {
    name: String,
    script: Vec<ToolName>,
}

impl ScriptedPolicy {
    pub fn new(name: &str, script: Vec<ToolName>) -> Self {
        ScriptedPolicy {
            name: name.to_string(),
            script,
        }
    }
}

impl Policy for ScriptedPolicy {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn act(&self, d: &Decision<'_>) -> Result<ToolName, ExecError> {
        let step = d.state.step;
        let action = *self
            .script
            .get(step)
            .ok_or_else(|| ExecError::Policy(format!("script has no action for step {step}")))?;
        if !d.feasible.contains(&action) {
            return Err(ExecError::Policy(format!("scripted {action} is infeasible at step {step}")));
        }
        Ok(action)
    }
}

/// Uniform over the feasible set, seeded per (episode, step).
#[derive(Debug, Clone, Copy, Default)]
pub struct RandomPolicy;

impl Policy for RandomPolicy {
    fn name(&self) -> String {
        "random".into()
    }

    fn act(&self, d: &Decision<'_>) -> Result<ToolName, ExecError> {
        d.feasible
            .choose(&mut d.rng("random"))
            .copied()
            .ok_or_else(|| ExecError::Policy("empty feasible set".into()))
    }
}

/// Hand-written routing: item-side evidence for sparse users, preference
/// tools otherwise, then rank after `max_tools` calls.
#[derive(Debug, Clone, Copy)]
pub struct GreedyHeuristicPolicy {
    pub max_tools: usize,
    /// Users with at most this many visible interactions count as sparse.
    pub sparse_history: usize,
}

impl Default for GreedyHeuristicPolicy {
    fn default() -> Self {
        GreedyHeuristicPolicy {
            max_tools: 3,
            sparse_history: 5,
        }
    }
}

impl GreedyHeuristicPolicy {
    fn priority(&self, domain: Domain, history_len: usize) -> Vec<ToolName> {
        use ToolName::*;
        let mut order = if history_len <= self.sparse_history {
            vec![ItemProfile, ItemSemantic, PositivePreference, LongTermPreference]
        } else {
            vec![LongTermPreference, ShortTermPreference, PositivePreference, ItemProfile]
        };
        if domain.supports_geo() {
            order.insert(1, GeoContext);
        }
        for t in ToolName::ALL {
            if !order.contains(&t) {
                order.push(t);
            }
        }
        order
    }

    pub fn choose(&self, d: &Decision<'_>) -> Result<ToolName, ExecError> {
        if d.feasible.is_empty() {
            return Err(ExecError::Policy("empty feasible set".into()));
        }
        let can_rank = d.feasible.contains(&ToolName::CandidateRank);
        if can_rank && d.state.memory.len() >= self.max_tools {
            return Ok(ToolName::CandidateRank);
        }
        let prio = self.priority(d.state.user_view.domain, d.state.user_view.history_len);
        Ok(prio
            .into_iter()
            .find(|t| !t.is_terminal() && d.feasible.contains(t))
            .unwrap_or(d.feasible[0]))
    }
}

impl Policy for GreedyHeuristicPolicy {
    fn name(&self) -> String {
        format!("greedy-heuristic-{}", self.max_tools)
    }

    fn act(&self, d: &Decision<'_>) -> Result<ToolName, ExecError> {
        self.choose(d)
    }
}

/// Routes with a chat model. An answer that is not exactly one feasible
/// tool name gets one retry; a second bad answer falls back to
/// [`GreedyHeuristicPolicy`] and is counted.
pub struct ProviderPlanner {
    client: ProviderClient,
    fallback: GreedyHeuristicPolicy,
    fallbacks: AtomicUsize,
}

impl ProviderPlanner {
    pub fn new(client: ProviderClient) -> Self {
        ProviderPlanner {
            client,
            fallback: GreedyHeuristicPolicy::default(),
            fallbacks: AtomicUsize::new(0),
        }
    }

    /// How many decisions fell back to the heuristic so far.
    pub fn fallback_count(&self) -> usize {
        self.fallbacks.load(Ordering::Relaxed)
    }

    fn parse(reply: &str, feasible: &[ToolName]) -> Option<ToolName> {
        let cleaned = reply.trim().trim_matches(|c: char| matches!(c, '"' | '\'' | '`' | '.'));
        cleaned.parse::<ToolName>().ok().filter(|t| feasible.contains(t))
    }
}

impl Policy for ProviderPlanner {
    fn name(&self) -> String {
        format!("provider:{}", self.client.config().model)
    }

    fn act(&self, d: &Decision<'_>) -> Result<ToolName, ExecError> {
        let feasible = d.feasible.iter().map(|t| t.as_str()).collect::<Vec<_>>().join(", ");
        let prompt = fill(PLANNER_PROMPT, &[("state", &d.state.render()), ("feasible", &feasible)]);
        let mut messages = vec![ChatMessage::user(prompt)];
        let policy_err = |e: crate::provider::ProviderError| ExecError::Policy(e.to_string());
        let first = self.client.chat(messages.clone()).map_err(policy_err)?;
        if let Some(t) = Self::parse(&first, d.feasible) {
            return Ok(t);
        }
        messages.push(ChatMessage::assistant(first.clone()));
        messages.push(ChatMessage::user(format!(
            "`{}` is not one of: {feasible}. Answer with exactly one of those names.",
            first.trim()
        )));
        let second = self.client.chat(messages).map_err(policy_err)?;
        if let Some(t) = Self::parse(&second, d.feasible) {
            return Ok(t);
        }
        self.fallbacks.fetch_add(1, Ordering::Relaxed);
        let action = self.fallback.choose(d)?;
        log::warn!(
            "planner answered `{}` twice for {} step {}; falling back to {action}",
            second.trim(),
            d.state.episode_id,
            d.state.step
        );
        Ok(action)
    }
}

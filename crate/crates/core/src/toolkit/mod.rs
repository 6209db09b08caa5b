//! The tool library: specs with unified inputs and outputs, a registry, and
//! the execution backends.
//!
//! Every non-terminal tool writes a [`ToolOutput`] (facets plus a confidence)
//! into memory. The single terminal tool, `CandidateRank`, emits a
//! [`RankOutput`] over the episode's 20 candidates.

mod heuristic;
mod provider_backend;
mod schema;
mod view;

pub use heuristic::{geo_score, heuristic_candidate_rank, HeuristicBackend, GEO_SCALE_KM};
pub use provider_backend::{ProviderBackend, PROMPT_VERSION};
pub(crate) use provider_backend::fill;
pub use schema::{normalize_number, Facet, FacetValue, RankOutput, ToolOutput, ToolResult};
pub use view::{Access, CorpusView, EpisodeView, InputNeeds};

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusError, Domain};
use crate::executor::AgentState;
use crate::provider::ProviderError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ToolName {
    LongTermPreference,
    ShortTermPreference,
    PositivePreference,
    NegativePreference,
    ItemSemantic,
    ItemProfile,
    AuthorPreference,
    GeoContext,
    CandidateRank,
}

impl ToolName {
    /// Fixed action order used by policies and feature bitmasks.
    pub const ALL: [ToolName; 9] = [
        ToolName::LongTermPreference,
        ToolName::ShortTermPreference,
        ToolName::PositivePreference,
        ToolName::NegativePreference,
        ToolName::ItemSemantic,
        ToolName::ItemProfile,
        ToolName::AuthorPreference,
        ToolName::GeoContext,
        ToolName::CandidateRank,
    ];

    pub const COUNT: usize = 9;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<ToolName> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ToolName::LongTermPreference => "LongTermPreference",
            ToolName::ShortTermPreference => "ShortTermPreference",
            ToolName::PositivePreference => "PositivePreference",
            ToolName::NegativePreference => "NegativePreference",
            ToolName::ItemSemantic => "ItemSemantic",
            ToolName::ItemProfile => "ItemProfile",
            ToolName::AuthorPreference => "AuthorPreference",
            ToolName::GeoContext => "GeoContext",
            ToolName::CandidateRank => "CandidateRank",
        }
    }

    pub fn is_terminal(self) -> bool {
        self == ToolName::CandidateRank
    }

    /// Tools whose evidence is about the user rather than the candidates.
    pub fn is_user_side(self) -> bool {
        matches!(
            self,
            ToolName::LongTermPreference
                | ToolName::ShortTermPreference
                | ToolName::PositivePreference
                | ToolName::NegativePreference
                | ToolName::AuthorPreference
        )
    }

    pub fn is_item_side(self) -> bool {
        matches!(self, ToolName::ItemSemantic | ToolName::ItemProfile | ToolName::GeoContext)
    }

    /// Facet keys this tool may emit.
    pub fn facet_vocabulary(self) -> &'static [&'static str] {
        match self {
            ToolName::LongTermPreference => &["top_category", "category", "top_author", "history_len"],
            ToolName::ShortTermPreference => &["recent_category", "recent_author", "recent_count"],
            ToolName::PositivePreference => &["liked_category", "cue", "liked_count"],
            ToolName::NegativePreference => &["disliked_category", "avoid_cue", "disliked_count"],
            ToolName::ItemSemantic => &["tags", "salient", "n_items"],
            ToolName::ItemProfile => &["fit", "popularity", "rating", "n_items"],
            ToolName::AuthorPreference => &["favorite_author", "affinity", "known_author_share"],
            ToolName::GeoContext => &["distance_km", "geo_score", "coverage"],
            ToolName::CandidateRank => &[],
        }
    }
}

impl std::fmt::Display for ToolName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ToolName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ToolName::ALL
            .iter()
            .copied()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown tool `{s}`"))
    }
}

/// A registered capability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub name: ToolName,
    pub description: String,
    pub input_needs: InputNeeds,
    pub is_terminal: bool,
    /// `Some` when the tool only makes sense for geo-capable domains.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain_restriction: Option<GeoOnly>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeoOnly {
    GeoDomains,
}

impl ToolSpec {
    pub fn allowed_in(&self, domain: Domain) -> bool {
        match self.domain_restriction {
            Some(GeoOnly::GeoDomains) => domain.supports_geo(),
            None => true,
        }
    }

    pub fn standard(name: ToolName) -> ToolSpec {
        let (description, needs) = match name {
            ToolName::LongTermPreference => (
                "Derives a stable long-horizon profile of the user from the full visible history.",
                InputNeeds::USER_HISTORY,
            ),
            ToolName::ShortTermPreference => (
                "Captures recent intent from the last week of interactions.",
                InputNeeds::USER_HISTORY,
            ),
            ToolName::PositivePreference => (
                "Extracts what the user favors from highly rated interactions and their reviews.",
                InputNeeds::USER_HISTORY.union(InputNeeds::USER_REVIEWS),
            ),
            ToolName::NegativePreference => (
                "Extracts dislikes and constraints from poorly rated interactions and their reviews.",
                InputNeeds::USER_HISTORY.union(InputNeeds::USER_REVIEWS),
            ),
            ToolName::ItemSemantic => (
                "Summarizes candidate themes as tags plus a salient rating descriptor.",
                InputNeeds::CANDIDATE_META,
            ),
            ToolName::ItemProfile => (
                "Compiles fit and popularity buckets for each candidate from rating statistics.",
                InputNeeds::CANDIDATE_META,
            ),
            ToolName::AuthorPreference => (
                "Infers favored authors, brands or series and per-candidate affinity.",
                InputNeeds::USER_HISTORY.union(InputNeeds::CANDIDATE_META),
            ),
            ToolName::GeoContext => (
                "Scores candidate distance from the user's location.",
                InputNeeds::USER_HISTORY.union(InputNeeds::CANDIDATE_META).union(InputNeeds::GEO),
            ),
            ToolName::CandidateRank => (
                "Produces the final permutation of the candidates with short rationales.",
                InputNeeds::CANDIDATE_META,
            ),
        };
        ToolSpec {
            name,
            description: description.to_string(),
            input_needs: needs,
            is_terminal: name.is_terminal(),
            domain_restriction: (name == ToolName::GeoContext).then_some(GeoOnly::GeoDomains),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ToolError {
    #[error("tool {tool} may not read {access:?}")]
    AccessDenied { tool: ToolName, access: Access },
    #[error("tool {tool} is not available in domain {domain}")]
    DomainRestricted { tool: ToolName, domain: Domain },
    #[error("duplicate tool `{0}` in registry")]
    DuplicateName(ToolName),
    #[error("registry must contain exactly one terminal tool, found {0}")]
    TerminalCount(usize),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("schema violation: {0}")]
    Schema(String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

/// The tools available for one domain, in [`ToolName::ALL`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolRegistry {
    pub domain: Domain,
    specs: Vec<ToolSpec>,
}

impl ToolRegistry {
    pub fn new(domain: Domain, mut specs: Vec<ToolSpec>) -> Result<ToolRegistry, ToolError> {
        specs.sort_by_key(|s| s.name);
        for pair in specs.windows(2) {
            if pair[0].name == pair[1].name {
                return Err(ToolError::DuplicateName(pair[0].name));
            }
        }
        let terminals = specs.iter().filter(|s| s.is_terminal).count();
        if terminals != 1 {
            return Err(ToolError::TerminalCount(terminals));
        }
        if let Some(bad) = specs.iter().find(|s| !s.allowed_in(domain)) {
            return Err(ToolError::DomainRestricted { tool: bad.name, domain });
        }
        Ok(ToolRegistry { domain, specs })
    }

    pub fn specs(&self) -> &[ToolSpec] {
        &self.specs
    }

    pub fn get(&self, name: ToolName) -> Option<&ToolSpec> {
        self.specs.iter().find(|s| s.name == name)
    }

    pub fn contains(&self, name: ToolName) -> bool {
        self.get(name).is_some()
    }

    pub fn terminal(&self) -> &ToolSpec {
        self.specs.iter().find(|s| s.is_terminal).expect("registry invariant: one terminal")
    }

    pub fn names(&self) -> impl Iterator<Item = ToolName> + '_ {
        self.specs.iter().map(|s| s.name)
    }
}

/// The standard library for a domain; `GeoContext` only where geo data exists.
pub fn register_tools(domain: Domain) -> ToolRegistry {
    let specs = ToolName::ALL
        .iter()
        .map(|&n| ToolSpec::standard(n))
        .filter(|s| s.allowed_in(domain))
        .collect();
    ToolRegistry::new(domain, specs).expect("standard specs are valid")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Heuristic,
    Provider,
    Synthetic,
    Replay,
}

/// Executes a tool against the agent-visible state and a scoped corpus view.
pub trait ToolBackend: Send + Sync {
    fn kind(&self) -> BackendKind;

    fn execute(&self, spec: &ToolSpec, state: &AgentState, view: &CorpusView<'_>) -> Result<ToolResult, ToolError>;
}

impl<B: ToolBackend + ?Sized> ToolBackend for &B {
    fn kind(&self) -> BackendKind {
        (**self).kind()
    }

    fn execute(&self, spec: &ToolSpec, state: &AgentState, view: &CorpusView<'_>) -> Result<ToolResult, ToolError> {
        (**self).execute(spec, state, view)
    }
}

impl<B: ToolBackend + ?Sized> ToolBackend for Box<B> {
    fn kind(&self) -> BackendKind {
        (**self).kind()
    }

    fn execute(&self, spec: &ToolSpec, state: &AgentState, view: &CorpusView<'_>) -> Result<ToolResult, ToolError> {
        (**self).execute(spec, state, view)
    }
}

/// Run `spec` through `backend` after checking the domain restriction and the output schema.
pub fn execute_tool(
    spec: &ToolSpec,
    state: &AgentState,
    view: &CorpusView<'_>,
    backend: &dyn ToolBackend,
) -> Result<ToolResult, ToolError> {
    if !spec.allowed_in(view.episode().domain) {
        return Err(ToolError::DomainRestricted {
            tool: spec.name,
            domain: view.episode().domain,
        });
    }
    let result = backend.execute(spec, state, view)?;
    result.validate(spec.name, &state.candidate_ids)?;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_sizes_per_domain() {
        let amazon = register_tools(Domain::Amazon);
        assert_eq!(amazon.specs().len(), 8);
        assert!(!amazon.contains(ToolName::GeoContext));
        let yelp = register_tools(Domain::Yelp);
        assert_eq!(yelp.specs().len(), 9);
        assert!(yelp.contains(ToolName::GeoContext));
        for d in [Domain::Amazon, Domain::Goodreads, Domain::Yelp, Domain::Synthetic, Domain::SyntheticGeo] {
            let reg = register_tools(d);
            assert_eq!(reg.specs().iter().filter(|s| s.is_terminal).count(), 1);
            assert_eq!(reg.terminal().name, ToolName::CandidateRank);
        }
    }

    #[test]
    fn duplicate_and_terminal_checks() {
        let dup = vec![ToolSpec::standard(ToolName::ItemProfile), ToolSpec::standard(ToolName::ItemProfile)];
        assert!(matches!(ToolRegistry::new(Domain::Amazon, dup), Err(ToolError::DuplicateName(_))));
        let none = vec![ToolSpec::standard(ToolName::ItemProfile)];
        assert!(matches!(ToolRegistry::new(Domain::Amazon, none), Err(ToolError::TerminalCount(0))));
    }

    #[test]
    fn names_roundtrip_and_order() {
        for (i, t) in ToolName::ALL.iter().enumerate() {
            assert_eq!(t.index(), i);
            assert_eq!(t.as_str().parse::<ToolName>().unwrap(), *t);
            assert_eq!(serde_json::to_string(t).unwrap(), format!("\"{}\"", t.as_str()));
        }
        assert!(ToolName::CandidateRank.is_terminal());
    }
}

//! Deterministic, offline stand-ins for every tool.
//!
//! Each tool is a pure function of the agent state and the scoped corpus
//! view. Facet vocabularies are listed in [`ToolName::facet_vocabulary`].

use std::collections::{BTreeMap, BTreeSet};

use super::{
    BackendKind, CorpusView, Facet, FacetValue, RankOutput, ToolBackend, ToolError, ToolName, ToolOutput, ToolResult,
    ToolSpec,
};
use crate::corpus::{InteractionRecord, ItemRecord, SHORT_WINDOW_DAYS};
use crate::executor::AgentState;
use crate::toolkit::schema::normalize_number;

/// Distance scale of the geo decay, in kilometres.
pub const GEO_SCALE_KM: f64 = 10.0;

/// `exp(-d / 10)`: 1 at zero distance, strictly decreasing, never reaching 0.
pub fn geo_score(distance_km: f64) -> Result<f64, ToolError> {
    if !(distance_km >= 0.0) || !distance_km.is_finite() {
        return Err(ToolError::InvalidInput(format!("distance must be a finite value >= 0, got {distance_km}")));
    }
    Ok((-distance_km / GEO_SCALE_KM).exp())
}

const HIGH_FIT_RATING: f64 = 4.0;
const MEDIUM_FIT_RATING: f64 = 3.0;
const HIGH_POPULARITY: u64 = 100;
const MEDIUM_POPULARITY: u64 = 20;
const LIKED_RATING: f64 = 4.0;
const DISLIKED_RATING: f64 = 2.0;

const STOPWORDS: &[&str] = &[
    "about", "after", "again", "also", "been", "before", "being", "both", "could", "does", "each", "even", "from",
    "have", "here", "into", "just", "like", "more", "most", "much", "only", "other", "over", "really", "same", "some",
    "such", "than", "that", "their", "them", "then", "there", "these", "they", "this", "those", "very", "were", "what",
    "when", "where", "which", "while", "will", "with", "would", "your",
];

/// Lowercase alphanumeric tokens of length >= 4, stopwords removed.
pub(crate) fn content_tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| t.chars().count() >= 4)
        .map(str::to_lowercase)
        .filter(|t| !STOPWORDS.contains(&t.as_str()))
        .collect()
}

/// Keys ordered by count descending, then lexicographically.
fn top_k(counts: &BTreeMap<String, usize>, k: usize) -> Vec<(String, usize)> {
    let mut v: Vec<(String, usize)> = counts.iter().map(|(a, &b)| (a.clone(), b)).collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    v.truncate(k);
    v
}

fn category_set(item: &ItemRecord) -> BTreeSet<String> {
    item.categories.iter().map(|c| c.trim().to_lowercase()).filter(|c| !c.is_empty()).collect()
}

fn count_categories(view: &CorpusView<'_>, history: &[&InteractionRecord]) -> Result<BTreeMap<String, usize>, ToolError> {
    let mut counts = BTreeMap::new();
    for inter in history {
        for cat in category_set(view.history_item(&inter.item_id)?) {
            *counts.entry(cat).or_insert(0) += 1;
        }
    }
    Ok(counts)
}

fn count_authors(view: &CorpusView<'_>, history: &[&InteractionRecord]) -> Result<BTreeMap<String, usize>, ToolError> {
    let mut counts = BTreeMap::new();
    for inter in history {
        if let Some(author) = &view.history_item(&inter.item_id)?.author_or_brand {
            *counts.entry(author.trim().to_lowercase()).or_insert(0) += 1;
        }
    }
    Ok(counts)
}

fn share(count: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        count as f64 / total as f64
    }
}

fn long_term(view: &CorpusView<'_>) -> Result<ToolOutput, ToolError> {
    let history = view.history()?;
    let n = history.len();
    let cats = top_k(&count_categories(view, &history)?, 3);
    let authors = top_k(&count_authors(view, &history)?, 1);
    let mut facets = Vec::new();
    for (i, (cat, _)) in cats.iter().enumerate() {
        facets.push(Facet::new(if i == 0 { "top_category" } else { "category" }, FacetValue::text(cat)));
    }
    if let Some((author, _)) = authors.first() {
        facets.push(Facet::new("top_author", FacetValue::text(author)));
    }
    facets.push(Facet::new("history_len", FacetValue::number(n as f64)));
    let confidence = cats.first().map_or(0.0, |(_, c)| share(*c, n));
    let summary = if cats.is_empty() {
        format!("long-term: no category signal in {n} interactions")
    } else {
        let names: Vec<&str> = cats.iter().map(|(c, _)| c.as_str()).collect();
        format!("long-term: {} (n={n})", names.join(", "))
    };
    Ok(ToolOutput::new(ToolName::LongTermPreference, facets, confidence, summary))
}

fn short_term(view: &CorpusView<'_>) -> Result<ToolOutput, ToolError> {
    let recent = view.history_within(SHORT_WINDOW_DAYS)?;
    let n = recent.len();
    let cats = top_k(&count_categories(view, &recent)?, 3);
    let authors = top_k(&count_authors(view, &recent)?, 1);
    let mut facets: Vec<Facet> = cats
        .iter()
        .map(|(c, _)| Facet::new("recent_category", FacetValue::text(c)))
        .collect();
    if let Some((author, _)) = authors.first() {
        facets.push(Facet::new("recent_author", FacetValue::text(author)));
    }
    facets.push(Facet::new("recent_count", FacetValue::number(n as f64)));
    let confidence = cats.first().map_or(0.0, |(_, c)| share(*c, n));
    let summary = match cats.first() {
        Some((c, _)) => format!("recent focus: {c} over {n} interactions in {SHORT_WINDOW_DAYS} days"),
        None => format!("no interactions in the last {SHORT_WINDOW_DAYS} days"),
    };
    Ok(ToolOutput::new(ToolName::ShortTermPreference, facets, confidence, summary))
}

/// Shared body of the positive/negative preference tools.
fn polarity(view: &CorpusView<'_>, positive: bool) -> Result<ToolOutput, ToolError> {
    let (tool, cat_key, cue_key, count_key) = if positive {
        (ToolName::PositivePreference, "liked_category", "cue", "liked_count")
    } else {
        (ToolName::NegativePreference, "disliked_category", "avoid_cue", "disliked_count")
    };
    let history = view.history()?;
    let rated = history.iter().filter(|i| i.rating.is_some()).count();
    let selected: Vec<&InteractionRecord> = history
        .iter()
        .copied()
        .filter(|i| match i.rating {
            Some(r) if positive => r >= LIKED_RATING,
            Some(r) => r <= DISLIKED_RATING,
            None => false,
        })
        .collect();
    let cats = top_k(&count_categories(view, &selected)?, 3);
    let mut words = BTreeMap::new();
    for inter in &selected {
        for review in view.user_reviews_of(&inter.item_id)? {
            for tok in content_tokens(&review.text) {
                *words.entry(tok).or_insert(0) += 1;
            }
        }
    }
    let cues = top_k(&words, 3);
    let mut facets: Vec<Facet> = cats.iter().map(|(c, _)| Facet::new(cat_key, FacetValue::text(c))).collect();
    facets.extend(cues.iter().map(|(w, _)| Facet::new(cue_key, FacetValue::text(w))));
    facets.push(Facet::new(count_key, FacetValue::number(selected.len() as f64)));
    let confidence = share(selected.len(), rated);
    let summary = format!(
        "{} {} of {rated} rated interactions; cues: {}",
        if positive { "liked" } else { "disliked" },
        selected.len(),
        if cues.is_empty() {
            "none".to_string()
        } else {
            cues.iter().map(|(w, _)| w.as_str()).collect::<Vec<_>>().join(", ")
        }
    );
    Ok(ToolOutput::new(tool, facets, confidence, summary))
}

fn salient_descriptor(item: &ItemRecord) -> String {
    if item.rating_count == 0 {
        return "unrated".into();
    }
    let base = if item.rating_mean >= 4.5 {
        "excellent rating"
    } else if item.rating_mean >= HIGH_FIT_RATING {
        "good rating"
    } else if item.rating_mean >= MEDIUM_FIT_RATING {
        "mixed rating"
    } else {
        "low rating"
    };
    if item.rating_count >= HIGH_POPULARITY {
        format!("{base}, high review count")
    } else {
        base.to_string()
    }
}

fn item_semantic(state: &AgentState, view: &CorpusView<'_>) -> Result<ToolOutput, ToolError> {
    let mut facets = Vec::new();
    let mut tagged = 0;
    for id in &state.candidate_ids {
        let item = view.candidate(id)?;
        let tags: Vec<String> = item.categories.iter().take(2).map(|c| c.trim().to_lowercase()).collect();
        if !tags.is_empty() {
            tagged += 1;
        }
        let tags = if tags.is_empty() { "untagged".to_string() } else { tags.join("|") };
        facets.push(Facet::for_item("tags", id, FacetValue::text(tags)));
        facets.push(Facet::for_item("salient", id, FacetValue::text(salient_descriptor(item))));
    }
    facets.push(Facet::new("n_items", FacetValue::number(state.candidate_ids.len() as f64)));
    let confidence = share(tagged, state.candidate_ids.len());
    Ok(ToolOutput::new(
        ToolName::ItemSemantic,
        facets,
        confidence,
        format!("tagged {tagged} of {} candidates", state.candidate_ids.len()),
    ))
}

/// Fit from mean rating, popularity from review count.
pub(crate) fn profile_buckets(item: &ItemRecord) -> (&'static str, &'static str) {
    let fit = if item.rating_count == 0 {
        "unknown"
    } else if item.rating_mean >= HIGH_FIT_RATING {
        "high"
    } else if item.rating_mean >= MEDIUM_FIT_RATING {
        "medium"
    } else {
        "low"
    };
    let popularity = if item.rating_count >= HIGH_POPULARITY {
        "high"
    } else if item.rating_count >= MEDIUM_POPULARITY {
        "medium"
    } else {
        "low"
    };
    (fit, popularity)
}

fn item_profile(state: &AgentState, view: &CorpusView<'_>) -> Result<ToolOutput, ToolError> {
    let mut facets = Vec::new();
    let mut rated = 0;
    for id in &state.candidate_ids {
        let item = view.candidate(id)?;
        let (fit, popularity) = profile_buckets(item);
        if item.rating_count > 0 {
            rated += 1;
        }
        facets.push(Facet::for_item("fit", id, FacetValue::text(fit)));
        facets.push(Facet::for_item("popularity", id, FacetValue::text(popularity)));
        facets.push(Facet::for_item("rating", id, FacetValue::number(item.rating_mean)));
    }
    facets.push(Facet::new("n_items", FacetValue::number(state.candidate_ids.len() as f64)));
    let confidence = share(rated, state.candidate_ids.len());
    Ok(ToolOutput::new(
        ToolName::ItemProfile,
        facets,
        confidence,
        format!("profiled {} candidates ({rated} with ratings)", state.candidate_ids.len()),
    ))
}

fn author_preference(state: &AgentState, view: &CorpusView<'_>) -> Result<ToolOutput, ToolError> {
    let history = view.history()?;
    let n = history.len();
    let authors = count_authors(view, &history)?;
    let known: usize = authors.values().sum();
    let favorites = top_k(&authors, 3);
    let mut facets: Vec<Facet> = favorites
        .iter()
        .map(|(a, _)| Facet::new("favorite_author", FacetValue::text(a)))
        .collect();
    for id in &state.candidate_ids {
        if let Some(author) = &view.candidate(id)?.author_or_brand {
            let hits = authors.get(&author.trim().to_lowercase()).copied().unwrap_or(0);
            if hits > 0 {
                facets.push(Facet::for_item("affinity", id, FacetValue::number(share(hits, n))));
            }
        }
    }
    let known_share = share(known, n);
    facets.push(Facet::new("known_author_share", FacetValue::number(known_share)));
    let summary = match favorites.first() {
        Some((a, c)) => format!("favorite author/brand: {a} ({c} of {n})"),
        None => "no author or brand signal".to_string(),
    };
    Ok(ToolOutput::new(ToolName::AuthorPreference, facets, known_share, summary))
}

fn geo_context(state: &AgentState, view: &CorpusView<'_>) -> Result<ToolOutput, ToolError> {
    let user_loc = view.user_location()?;
    let mut facets = Vec::new();
    let mut located = 0;
    if let Some(origin) = user_loc {
        for id in &state.candidate_ids {
            if let Some(loc) = view.candidate_location(id)? {
                let d = origin.haversine_km(&loc);
                facets.push(Facet::for_item("distance_km", id, FacetValue::number(d)));
                facets.push(Facet::for_item("geo_score", id, FacetValue::number(geo_score(d)?)));
                located += 1;
            }
        }
    }
    let coverage = share(located, state.candidate_ids.len());
    facets.push(Facet::new("coverage", FacetValue::number(coverage)));
    let summary = if user_loc.is_none() {
        "user location unknown; geo unusable".to_string()
    } else {
        format!("geo usable for {located} of {} candidates", state.candidate_ids.len())
    };
    Ok(ToolOutput::new(ToolName::GeoContext, facets, coverage, summary))
}

/// Signed contribution of one facet to one candidate, before confidence scaling.
fn facet_weight(
    facet: &Facet,
    item_id: &str,
    cats: &BTreeSet<String>,
    tokens: &BTreeSet<String>,
    author: Option<&str>,
) -> f64 {
    if let Some(target) = &facet.item {
        if target != item_id {
            return 0.0;
        }
        return match (facet.key.as_str(), &facet.value) {
            ("geo_score" | "affinity", FacetValue::Number(x)) => *x,
            ("fit", FacetValue::Text(v)) => match v.as_str() {
                "high" => 1.0,
                "low" => -1.0,
                _ => 0.0,
            },
            ("salient", FacetValue::Text(v)) if v.starts_with("excellent") || v.starts_with("good") => 1.0,
            ("salient", FacetValue::Text(v)) if v.starts_with("low") => -1.0,
            _ => 0.0,
        };
    }
    let Some(value) = facet.value.as_text() else {
        return 0.0;
    };
    match facet.key.as_str() {
        "top_category" | "category" | "recent_category" | "liked_category" if cats.contains(value) => 1.0,
        "cue" if tokens.contains(value) => 1.0,
        "top_author" | "recent_author" | "favorite_author" if author == Some(value) => 1.0,
        "disliked_category" if cats.contains(value) => -1.0,
        "avoid_cue" if tokens.contains(value) => -1.0,
        _ => 0.0,
    }
}

/// Confidence-weighted evidence score per candidate, squashed to `1 - exp(-max(raw, 0))`.
///
/// Ties (including every candidate with no net positive evidence) are broken
/// by ascending item id.
pub fn heuristic_candidate_rank(state: &AgentState, view: &CorpusView<'_>) -> Result<RankOutput, ToolError> {
    let mut scored = Vec::with_capacity(state.candidate_ids.len());
    for id in &state.candidate_ids {
        let item = view.candidate(id)?;
        let cats = category_set(item);
        let mut tokens: BTreeSet<String> = content_tokens(&item.title).into_iter().collect();
        for c in &item.categories {
            tokens.extend(content_tokens(c));
        }
        let author = item.author_or_brand.as_ref().map(|a| a.trim().to_lowercase());
        let mut raw = 0.0;
        let mut reasons: Vec<(f64, String)> = Vec::new();
        for entry in &state.memory {
            let out = &entry.output;
            for facet in &out.facets {
                let w = facet_weight(facet, id, &cats, &tokens, author.as_deref());
                if w != 0.0 {
                    let contribution = w * out.confidence;
                    raw += contribution;
                    reasons.push((contribution, format!("{}={}", facet.key, facet.value)));
                }
            }
        }
        reasons.sort_by(|a, b| b.0.abs().total_cmp(&a.0.abs()).then_with(|| a.1.cmp(&b.1)));
        let explanation = if reasons.is_empty() {
            "no matching evidence".to_string()
        } else {
            reasons
                .iter()
                .take(2)
                .map(|(c, r)| format!("{c:+.2} {r}"))
                .collect::<Vec<_>>()
                .join("; ")
        };
        let score = normalize_number(1.0 - (-f64::max(raw, 0.0)).exp());
        scored.push((id.clone(), score, explanation));
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(RankOutput {
        ranking: scored.iter().map(|s| s.0.clone()).collect(),
        scores: scored.iter().map(|s| s.1).collect(),
        explanations: scored.into_iter().map(|s| s.2).collect(),
    })
}

/// Pure, offline implementation of every tool.
#[derive(Debug, Clone, Copy, Default)]
pub struct HeuristicBackend;

impl HeuristicBackend {
    pub fn evidence(&self, tool: ToolName, state: &AgentState, view: &CorpusView<'_>) -> Result<ToolOutput, ToolError> {
        match tool {
            ToolName::LongTermPreference => long_term(view),
            ToolName::ShortTermPreference => short_term(view),
            ToolName::PositivePreference => polarity(view, true),
            ToolName::NegativePreference => polarity(view, false),
            ToolName::ItemSemantic => item_semantic(state, view),
            ToolName::ItemProfile => item_profile(state, view),
            ToolName::AuthorPreference => author_preference(state, view),
            ToolName::GeoContext => {
                if !view.episode().domain.supports_geo() {
                    return Err(ToolError::DomainRestricted {
                        tool,
                        domain: view.episode().domain,
                    });
                }
                geo_context(state, view)
            }
            ToolName::CandidateRank => Err(ToolError::InvalidInput("CandidateRank is terminal".into())),
        }
    }
}

impl ToolBackend for HeuristicBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Heuristic
    }

    fn execute(&self, spec: &ToolSpec, state: &AgentState, view: &CorpusView<'_>) -> Result<ToolResult, ToolError> {
        if spec.is_terminal {
            heuristic_candidate_rank(state, view).map(ToolResult::Ranking)
        } else {
            self.evidence(spec.name, state, view).map(ToolResult::Evidence)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geo_anchor_values() {
        assert!((geo_score(0.44).unwrap() - 0.957).abs() <= 1e-3);
        assert!((geo_score(1.593).unwrap() - 0.853).abs() <= 1e-3);
        assert_eq!(geo_score(0.0).unwrap(), 1.0);
        assert!(geo_score(-0.1).is_err());
        assert!(geo_score(f64::NAN).is_err());
    }

    #[test]
    fn geo_strictly_decreasing_and_positive() {
        let mut prev = geo_score(0.0).unwrap();
        for i in 1..2000 {
            let s = geo_score(i as f64 * 0.05).unwrap();
            assert!(s < prev && s > 0.0);
            prev = s;
        }
    }

    #[test]
    fn profile_buckets_match_worked_example() {
        let mut item = ItemRecord {
            item_id: "x".into(),
            domain: crate::corpus::Domain::Yelp,
            title: String::new(),
            categories: vec![],
            rating_mean: 4.5,
            rating_count: 294,
            price: None,
            author_or_brand: None,
            hours: None,
            location: None,
        };
        assert_eq!(profile_buckets(&item), ("high", "high"));
        item.rating_mean = 2.0;
        item.rating_count = 45;
        assert_eq!(profile_buckets(&item), ("low", "medium"));
    }

    #[test]
    fn tokens_filter_short_and_stopwords() {
        assert_eq!(content_tokens("The friendly SERVICE, with fresh food!"), vec!["friendly", "service", "fresh", "food"]);
    }
}

//! Episode construction, scenario labels, distribution-matched task
//! selection and synthetic oracle worlds.

mod selection;
mod synthetic;

pub use selection::{
    greedy_select_tasks, l1_histogram_distance, popularity_bucket, recency_bucket, selection_objective, EpisodeStats,
    Histogram, MeanStat, ReferenceProfile, SelectionResult, SelectionWeights,
};
pub use synthetic::{
    generate_corpus, make_synthetic_world, Archetype, CorpusGenConfig, RankMapEntry, SyntheticBackend, SyntheticSuite,
    SyntheticWorld, SyntheticWorldData,
};

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, CorpusError, Domain, InteractionRecord, SECONDS_PER_DAY};
use crate::io::{self, IoError};
use crate::rng;
use crate::toolkit::EpisodeView;

/// Number of candidates per episode: one positive plus 19 negatives.
pub const N_CANDIDATES: usize = 20;
pub const N_NEGATIVES: usize = N_CANDIDATES - 1;
pub const DEFAULT_USER_HISTORY_MAX: usize = 5;
pub const DEFAULT_ITEM_POPULARITY_QUANTILE: f64 = 0.20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Classic,
    CsUser,
    CsItem,
    EvoLong,
    EvoShort,
}

impl Scenario {
    pub const ALL: [Scenario; 5] = [
        Scenario::Classic,
        Scenario::CsUser,
        Scenario::CsItem,
        Scenario::EvoLong,
        Scenario::EvoShort,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Classic => "classic",
            Scenario::CsUser => "cs_user",
            Scenario::CsItem => "cs_item",
            Scenario::EvoLong => "evo_long",
            Scenario::EvoShort => "evo_short",
        }
    }

    /// Row label in reports.
    pub fn label(self) -> &'static str {
        match self {
            Scenario::Classic => "Classic",
            Scenario::CsUser => "Cold-Start (User)",
            Scenario::CsItem => "Cold-Start (Item)",
            Scenario::EvoLong => "Evolving-Interest (Long)",
            Scenario::EvoShort => "Evolving-Interest (Short)",
        }
    }

    pub fn default_window_days(self) -> Option<u32> {
        match self {
            Scenario::EvoLong => Some(crate::corpus::LONG_WINDOW_DAYS),
            Scenario::EvoShort => Some(crate::corpus::SHORT_WINDOW_DAYS),
            _ => None,
        }
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Scenario::ALL
            .iter()
            .copied()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| format!("unknown scenario `{s}`"))
    }
}

/// How to build and label episodes of one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub scenario: Scenario,
    /// History window exposed to the agent; set for the evolving-interest scenarios.
    #[serde(default)]
    pub window_days: Option<u32>,
    #[serde(default = "default_user_history_max")]
    pub user_history_max: usize,
    #[serde(default = "default_item_quantile")]
    pub item_popularity_quantile: f64,
}

fn default_user_history_max() -> usize {
    DEFAULT_USER_HISTORY_MAX
}

fn default_item_quantile() -> f64 {
    DEFAULT_ITEM_POPULARITY_QUANTILE
}

impl ScenarioSpec {
    pub fn new(scenario: Scenario) -> ScenarioSpec {
        ScenarioSpec {
            scenario,
            window_days: scenario.default_window_days(),
            user_history_max: DEFAULT_USER_HISTORY_MAX,
            item_popularity_quantile: DEFAULT_ITEM_POPULARITY_QUANTILE,
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if !(self.item_popularity_quantile > 0.0 && self.item_popularity_quantile < 1.0) {
            return Err(EnvError::InvalidSpec(format!(
                "item_popularity_quantile must be in (0,1), got {}",
                self.item_popularity_quantile
            )));
        }
        if self.window_days == Some(0) {
            return Err(EnvError::InvalidSpec("window_days must be positive".into()));
        }
        if self.user_history_max == 0 && self.scenario == Scenario::CsUser {
            return Err(EnvError::InvalidSpec("user_history_max must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EnvError {
    #[error("invalid scenario spec: {0}")]
    InvalidSpec(String),
    #[error("user `{user}` has no interaction eligible as a {scenario} positive")]
    NoEligiblePositive { user: String, scenario: Scenario },
    #[error("user `{user}` has only {available} non-interacted items; {N_NEGATIVES} negatives are needed")]
    InsufficientNegatives { user: String, available: usize },
    #[error("pool has {pool} episodes, cannot select {n}")]
    PoolTooSmall { pool: usize, n: usize },
    #[error("negative histogram mass for bucket `{0}`")]
    NegativeMass(String),
    #[error("invalid synthetic world: {0}")]
    InvalidWorld(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Io(#[from] IoError),
}

/// One interactive task. `positive_id` is consumed by the environment and
/// evaluation only; agents see [`Episode::view`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub episode_id: String,
    pub user_id: String,
    pub domain: Domain,
    pub candidate_ids: Vec<String>,
    pub positive_id: String,
    pub scenario: Scenario,
    pub reference_time: i64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub history_window_days: Option<u32>,
}

impl Episode {
    pub fn view(&self) -> EpisodeView {
        EpisodeView {
            episode_id: self.episode_id.clone(),
            user_id: self.user_id.clone(),
            domain: self.domain,
            candidate_ids: self.candidate_ids.clone(),
            reference_time: self.reference_time,
            history_window_days: self.history_window_days,
        }
    }

    /// Checks the 1-positive/19-negative contract against the corpus.
    pub fn check(&self, corpus: &Corpus) -> Result<(), String> {
        if self.candidate_ids.len() != N_CANDIDATES {
            return Err(format!("{} has {} candidates", self.episode_id, self.candidate_ids.len()));
        }
        let unique: BTreeSet<&str> = self.candidate_ids.iter().map(String::as_str).collect();
        if unique.len() != N_CANDIDATES {
            return Err(format!("{} has duplicate candidates", self.episode_id));
        }
        if self.candidate_ids.iter().filter(|c| **c == self.positive_id).count() != 1 {
            return Err(format!("{} does not contain its positive exactly once", self.episode_id));
        }
        let interactions = corpus.user_interactions(&self.user_id).map_err(|e| e.to_string())?;
        if !interactions
            .iter()
            .any(|i| i.item_id == self.positive_id && i.timestamp == self.reference_time)
        {
            return Err(format!("{} positive is not a held-out interaction", self.episode_id));
        }
        let seen = corpus.interacted_items(&self.user_id).map_err(|e| e.to_string())?;
        for c in &self.candidate_ids {
            if *c != self.positive_id && seen.contains(c.as_str()) {
                return Err(format!("{} negative `{c}` is in the user's history", self.episode_id));
            }
        }
        Ok(())
    }
}

/// Interpolated quantile (linear between order statistics) of item review counts.
pub fn item_popularity_threshold(corpus: &Corpus, quantile: f64) -> f64 {
    let mut counts: Vec<f64> = corpus.items().map(|i| i.rating_count as f64).collect();
    if counts.is_empty() {
        return 0.0;
    }
    counts.sort_by(f64::total_cmp);
    let pos = quantile.clamp(0.0, 1.0) * (counts.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    counts[lo] + (counts[hi] - counts[lo]) * (pos - lo as f64)
}

/// Labels an episode. Precedence: cs_user, then cs_item, then the windowed
/// scenarios, then classic.
///
/// `history_len` counts the user's interactions strictly before the
/// reference time; an item is cold when its review count is at or below the
/// domain quantile.
pub fn classify_scenario(
    corpus: &Corpus,
    user_id: &str,
    positive_id: &str,
    reference_time: i64,
    spec: &ScenarioSpec,
) -> Result<Scenario, EnvError> {
    let threshold = item_popularity_threshold(corpus, spec.item_popularity_quantile);
    classify_with_threshold(corpus, user_id, positive_id, reference_time, spec, threshold)
}

fn classify_with_threshold(
    corpus: &Corpus,
    user_id: &str,
    positive_id: &str,
    reference_time: i64,
    spec: &ScenarioSpec,
    threshold: f64,
) -> Result<Scenario, EnvError> {
    let history_len = corpus
        .user_interactions(user_id)?
        .iter()
        .filter(|i| i.timestamp < reference_time)
        .count();
    let item = corpus.item(positive_id)?;
    Ok(if history_len <= spec.user_history_max {
        Scenario::CsUser
    } else if (item.rating_count as f64) <= threshold {
        Scenario::CsItem
    } else {
        match spec.window_days {
            Some(d) if d <= crate::corpus::SHORT_WINDOW_DAYS => Scenario::EvoShort,
            Some(_) => Scenario::EvoLong,
            None => Scenario::Classic,
        }
    })
}

/// Episode builder that caches the domain popularity threshold and the sorted
/// item list.
pub struct EpisodeFactory<'a> {
    corpus: &'a Corpus,
    items: Vec<&'a str>,
    threshold_cache: std::sync::Mutex<Vec<(u64, f64)>>,
}

impl<'a> EpisodeFactory<'a> {
    pub fn new(corpus: &'a Corpus) -> Self {
        EpisodeFactory {
            corpus,
            items: corpus.items().map(|i| i.item_id.as_str()).collect(),
            threshold_cache: std::sync::Mutex::new(Vec::new()),
        }
    }

    fn threshold(&self, quantile: f64) -> f64 {
        let key = quantile.to_bits();
        let mut cache = self.threshold_cache.lock().unwrap_or_else(|p| p.into_inner());
        if let Some((_, t)) = cache.iter().find(|(k, _)| *k == key) {
            return *t;
        }
        let t = item_popularity_threshold(self.corpus, quantile);
        cache.push((key, t));
        t
    }

    fn eligible<'r>(&self, history: &'r [InteractionRecord], spec: &ScenarioSpec, threshold: f64) -> Option<&'r InteractionRecord> {
        // `history` is ascending by time; scan newest first.
        history.iter().enumerate().rev().find_map(|(idx, inter)| {
            let prior = history[..idx].iter().filter(|p| p.timestamp < inter.timestamp).count();
            let ok = match spec.scenario {
                Scenario::Classic => true,
                Scenario::CsUser => prior <= spec.user_history_max,
                Scenario::CsItem => self
                    .corpus
                    .item(&inter.item_id)
                    .map(|it| (it.rating_count as f64) <= threshold)
                    .unwrap_or(false),
                Scenario::EvoLong | Scenario::EvoShort => {
                    let horizon = i64::from(spec.window_days.unwrap_or(0)) * SECONDS_PER_DAY;
                    history[..idx]
                        .iter()
                        .any(|p| p.timestamp < inter.timestamp && inter.timestamp - p.timestamp <= horizon)
                }
            };
            ok.then_some(inter)
        })
    }

    /// Builds one episode for `user_id`.
    ///
    /// The positive is the user's latest interaction eligible for the scenario;
    /// the 19 negatives are drawn uniformly without replacement from items the
    /// user never interacted with, and the 20 candidates are shuffled. Both
    /// draws come from streams derived from `seed`.
    pub fn generate(&self, user_id: &str, spec: &ScenarioSpec, seed: u64) -> Result<Episode, EnvError> {
        spec.validate()?;
        let history = self.corpus.user_interactions(user_id)?;
        let threshold = self.threshold(spec.item_popularity_quantile);
        let positive = self.eligible(history, spec, threshold).ok_or_else(|| EnvError::NoEligiblePositive {
            user: user_id.to_string(),
            scenario: spec.scenario,
        })?;
        let seen = self.corpus.interacted_items(user_id)?;
        let pool: Vec<&str> = self.items.iter().copied().filter(|i| !seen.contains(i)).collect();
        if pool.len() < N_NEGATIVES {
            return Err(EnvError::InsufficientNegatives {
                user: user_id.to_string(),
                available: pool.len(),
            });
        }
        let tag = format!("{user_id}/{}", spec.scenario);
        let mut neg_rng = rng::stream(seed, &format!("negatives/{tag}"));
        let mut candidates: Vec<String> = pool
            .choose_multiple(&mut neg_rng, N_NEGATIVES)
            .map(|s| s.to_string())
            .collect();
        candidates.push(positive.item_id.clone());
        candidates.shuffle(&mut rng::stream(seed, &format!("order/{tag}")));
        let scenario =
            classify_with_threshold(self.corpus, user_id, &positive.item_id, positive.timestamp, spec, threshold)?;
        Ok(Episode {
            episode_id: format!("{user_id}:{}:{seed}", spec.scenario),
            user_id: user_id.to_string(),
            domain: self.corpus.domain(),
            candidate_ids: candidates,
            positive_id: positive.item_id.clone(),
            scenario,
            reference_time: positive.timestamp,
            seed,
            history_window_days: spec.window_days,
        })
    }
}

/// See [`EpisodeFactory::generate`].
pub fn generate_episode(corpus: &Corpus, user_id: &str, spec: &ScenarioSpec, seed: u64) -> Result<Episode, EnvError> {
    EpisodeFactory::new(corpus).generate(user_id, spec, seed)
}

pub fn write_tasks(path: &Path, episodes: &[Episode]) -> Result<(), IoError> {
    io::write_jsonl(path, episodes.iter())
}

pub fn read_tasks(path: &Path) -> Result<Vec<Episode>, IoError> {
    io::read_jsonl(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ItemRecord, UserRecord};

    fn item(id: &str, count: u64) -> ItemRecord {
        ItemRecord {
            item_id: id.into(),
            domain: Domain::Amazon,
            title: id.into(),
            categories: vec!["c".into()],
            rating_mean: 4.0,
            rating_count: count,
            price: None,
            author_or_brand: None,
            hours: None,
            location: None,
        }
    }

    fn user(id: &str) -> UserRecord {
        UserRecord {
            user_id: id.into(),
            domain: Domain::Amazon,
            profile_text: String::new(),
            location: None,
        }
    }

    fn inter(u: &str, i: &str, day: i64) -> InteractionRecord {
        InteractionRecord {
            user_id: u.into(),
            item_id: i.into(),
            timestamp: day * SECONDS_PER_DAY,
            rating: Some(4.0),
        }
    }

    /// `n_items` items, user u0 interacted with the first `n_hist`.
    fn corpus(n_items: usize, n_hist: usize) -> Corpus {
        let items = (0..n_items).map(|i| item(&format!("i{i:03}"), 10 + i as u64)).collect();
        let inters = (0..n_hist).map(|i| inter("u0", &format!("i{i:03}"), 100 + i as i64)).collect();
        Corpus::from_records(Domain::Amazon, vec![user("u0"), user("u1")], items, inters, vec![]).unwrap()
    }

    #[test]
    fn negatives_boundary() {
        // 10 interacted + 19 free items: just enough.
        let c = corpus(29, 10);
        let ep = generate_episode(&c, "u0", &ScenarioSpec::new(Scenario::Classic), 1).unwrap();
        assert_eq!(ep.candidate_ids.len(), 20);
        ep.check(&c).unwrap();
        let c = corpus(28, 10);
        assert!(matches!(
            generate_episode(&c, "u0", &ScenarioSpec::new(Scenario::Classic), 1),
            Err(EnvError::InsufficientNegatives { available: 18, .. })
        ));
    }

    #[test]
    fn positive_is_latest_and_generation_is_deterministic() {
        let c = corpus(60, 12);
        let spec = ScenarioSpec::new(Scenario::Classic);
        let a = generate_episode(&c, "u0", &spec, 9).unwrap();
        let b = generate_episode(&c, "u0", &spec, 9).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(a.positive_id, "i011");
        // 11 prior interactions, and i011 has 21 ratings against a 20% quantile of 21.8.
        assert_eq!(a.scenario, Scenario::CsItem);
        let other = generate_episode(&c, "u0", &spec, 10).unwrap();
        assert_ne!(a.candidate_ids, other.candidate_ids);
    }

    #[test]
    fn user_without_history_is_not_eligible() {
        let c = corpus(60, 12);
        assert!(matches!(
            generate_episode(&c, "u1", &ScenarioSpec::new(Scenario::Classic), 0),
            Err(EnvError::NoEligiblePositive { .. })
        ));
    }

    #[test]
    fn scenario_precedence() {
        let c = corpus(60, 12);
        let spec = ScenarioSpec::new(Scenario::Classic);
        // 0 prior interactions: cold user even though the item is cold too.
        assert_eq!(classify_scenario(&c, "u0", "i000", 100 * SECONDS_PER_DAY, &spec).unwrap(), Scenario::CsUser);
        // 11 prior; i000 has the minimum count, which is below the 0.2 quantile.
        assert_eq!(classify_scenario(&c, "u0", "i000", 111 * SECONDS_PER_DAY, &spec).unwrap(), Scenario::CsItem);
        assert_eq!(classify_scenario(&c, "u0", "i059", 111 * SECONDS_PER_DAY, &spec).unwrap(), Scenario::Classic);
        let evo = ScenarioSpec::new(Scenario::EvoShort);
        assert_eq!(classify_scenario(&c, "u0", "i059", 111 * SECONDS_PER_DAY, &evo).unwrap(), Scenario::EvoShort);
        assert!(classify_scenario(&c, "nobody", "i000", 0, &spec).is_err());
    }

    #[test]
    fn quantile_interpolates() {
        let c = corpus(5, 0); // counts 10..=14
        assert_eq!(item_popularity_threshold(&c, 0.5), 12.0);
        assert!((item_popularity_threshold(&c, 0.2) - 10.8).abs() < 1e-12);
    }

    #[test]
    fn cs_user_positive_respects_history_cap() {
        let c = corpus(60, 12);
        let ep = generate_episode(&c, "u0", &ScenarioSpec::new(Scenario::CsUser), 3).unwrap();
        // The latest interaction with at most 5 earlier ones is the 6th.
        assert_eq!(ep.positive_id, "i005");
        assert_eq!(ep.scenario, Scenario::CsUser);
    }
}

//! Synthetic corpora and oracle worlds.
//!
//! [`generate_corpus`] builds a plausible corpus in the standard schema for
//! demos and fixtures. A [`SyntheticWorld`] goes further: the rank the
//! positive receives is a known function of which tools were called, which
//! makes optimal plans computable by enumeration.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::IndexedRandom;
use rand::Rng as _;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use super::{EnvError, Episode, EpisodeFactory, ScenarioSpec, Scenario, N_CANDIDATES, N_NEGATIVES};
use crate::corpus::{
    Corpus, Domain, GeoPoint, InteractionRecord, ItemRecord, ReviewRecord, UserRecord, SECONDS_PER_DAY,
};
use crate::eval::avg_hr;
use crate::executor::AgentState;
use crate::rng;
use crate::toolkit::{
    normalize_number, BackendKind, CorpusView, Facet, FacetValue, RankOutput, ToolBackend, ToolError, ToolName,
    ToolOutput, ToolResult, ToolSpec,
};

const CATEGORIES: &[&str] = &[
    "Poetry", "Mystery", "Fantasy", "History", "Cooking", "Travel", "Science", "Romance", "Thriller", "Comics",
    "Outdoors", "Music",
];
const ADJECTIVES: &[&str] = &[
    "Silent", "Golden", "Hidden", "Wild", "Bright", "Quiet", "Crimson", "Northern", "Little", "Endless",
];
const NOUNS: &[&str] = &["River", "Garden", "Lantern", "Harbor", "Kitchen", "Atlas", "Orchard", "Signal", "Bridge", "Market"];
const PRAISE: &[&str] = &["charming", "thoughtful", "delicious", "gripping", "friendly", "vivid", "cozy", "clever"];
const COMPLAINTS: &[&str] = &["bland", "overpriced", "crowded", "sluggish", "noisy", "predictable", "greasy", "tedious"];
const BASE_TIME: i64 = 1_600_000_000;

/// Shape of a generated corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusGenConfig {
    pub domain: Domain,
    pub n_users: usize,
    pub n_items: usize,
    /// Inclusive range of interactions per user.
    pub history_len: (usize, usize),
    /// Mean gap between consecutive interactions of a user, in days.
    pub mean_gap_days: f64,
    /// Probability that an interaction comes with a review.
    pub review_prob: f64,
}

impl Default for CorpusGenConfig {
    fn default() -> Self {
        CorpusGenConfig {
            domain: Domain::Synthetic,
            n_users: 50,
            n_items: 300,
            history_len: (1, 40),
            mean_gap_days: 12.0,
            review_prob: 0.6,
        }
    }
}

fn geo_near(rng: &mut rng::Rng, spread_deg: f64) -> GeoPoint {
    let n = Normal::new(0.0, spread_deg).expect("valid normal");
    GeoPoint {
        lat: 36.16 + n.sample(rng),
        lon: -86.78 + n.sample(rng),
    }
}

fn make_items(domain: Domain, n_items: usize, seed: u64) -> Vec<ItemRecord> {
    let mut r = rng::stream(seed, "corpus/items");
    let counts = LogNormal::new(3.0, 1.4).expect("valid lognormal");
    let ratings: Normal<f64> = Normal::new(3.7, 0.7).expect("valid normal");
    (0..n_items)
        .map(|i| {
            let primary = CATEGORIES[i % CATEGORIES.len()];
            let mut categories = vec![primary.to_string()];
            if r.random_bool(0.4) {
                let other = CATEGORIES.choose(&mut r).unwrap();
                if *other != primary {
                    categories.push(other.to_string());
                }
            }
            let rating_count = (counts.sample(&mut r) as u64).min(5000);
            let rating_mean = if rating_count == 0 {
                0.0
            } else {
                (ratings.sample(&mut r).clamp(1.0, 5.0) * 10.0).round() / 10.0
            };
            ItemRecord {
                item_id: format!("it{i:05}"),
                domain,
                title: format!("{} {}", ADJECTIVES.choose(&mut r).unwrap(), NOUNS.choose(&mut r).unwrap()),
                categories,
                rating_mean,
                rating_count,
                price: Some(((r.random_range(3.0..60.0f64)) * 100.0).round() / 100.0),
                author_or_brand: Some(format!("maker{:02}", r.random_range(0..30))),
                hours: None,
                location: domain.supports_geo().then(|| geo_near(&mut r, 0.04)),
            }
        })
        .collect()
}

/// A corpus whose users favor two categories and one maker each.
///
/// Histories are drawn mostly from the favored categories and rated higher
/// there, so preference tools carry real signal. Deterministic in `seed`.
pub fn generate_corpus(config: &CorpusGenConfig, seed: u64) -> Result<Corpus, EnvError> {
    let (lo, hi) = config.history_len;
    if lo == 0 || hi < lo || config.n_items < hi + N_NEGATIVES {
        return Err(EnvError::InvalidSpec(format!(
            "need 1 <= min <= max history and at least max + {N_NEGATIVES} items, got {:?} with {} items",
            config.history_len, config.n_items
        )));
    }
    let domain = config.domain;
    let items = make_items(domain, config.n_items, seed);
    let mut by_cat: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    let mut by_maker: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (idx, it) in items.iter().enumerate() {
        for c in &it.categories {
            by_cat.entry(c.as_str()).or_default().push(idx);
        }
        if let Some(m) = &it.author_or_brand {
            by_maker.entry(m.as_str()).or_default().push(idx);
        }
    }
    let mut users = Vec::with_capacity(config.n_users);
    let mut interactions = Vec::new();
    let mut reviews = Vec::new();
    for u in 0..config.n_users {
        let mut r = rng::stream(seed, &format!("corpus/user/{u}"));
        let user_id = format!("us{u:04}");
        let favs: Vec<&str> = CATEGORIES.choose_multiple(&mut r, 2).copied().collect();
        let maker = format!("maker{:02}", r.random_range(0..30));
        users.push(UserRecord {
            user_id: user_id.clone(),
            domain,
            profile_text: format!("Enjoys {} and {}.", favs[0].to_lowercase(), favs[1].to_lowercase()),
            location: domain.supports_geo().then(|| geo_near(&mut r, 0.02)),
        });
        let n = r.random_range(lo..=hi);
        let mut chosen: BTreeSet<usize> = BTreeSet::new();
        let mut order = Vec::with_capacity(n);
        let mut guard = 0;
        while order.len() < n && guard < n * 50 {
            guard += 1;
            let roll: f64 = r.random();
            let pick = if roll < 0.7 {
                *by_cat[favs[usize::from(r.random_bool(0.5))]].choose(&mut r).unwrap()
            } else if roll < 0.85 {
                by_maker
                    .get(maker.as_str())
                    .and_then(|v| v.choose(&mut r).copied())
                    .unwrap_or_else(|| r.random_range(0..items.len()))
            } else {
                r.random_range(0..items.len())
            };
            if chosen.insert(pick) {
                order.push(pick);
            }
        }
        while order.len() < n {
            // Fallback when the favored pools are exhausted.
            let pick = r.random_range(0..items.len());
            if chosen.insert(pick) {
                order.push(pick);
            }
        }
        let mut ts = BASE_TIME + r.random_range(0..30) * SECONDS_PER_DAY;
        for (k, &idx) in order.iter().enumerate() {
            let gap_days: f64 = -config.mean_gap_days * (1.0 - r.random::<f64>()).ln();
            ts += (gap_days * SECONDS_PER_DAY as f64) as i64 + 1 + k as i64;
            let item = &items[idx];
            let liked = item.categories.iter().any(|c| favs.contains(&c.as_str()));
            let rating = if liked { r.random_range(4..=5) } else { r.random_range(1..=5) } as f64;
            interactions.push(InteractionRecord {
                user_id: user_id.clone(),
                item_id: item.item_id.clone(),
                timestamp: ts,
                rating: Some(rating),
            });
            if r.random_bool(config.review_prob) {
                let cat = item.categories[0].to_lowercase();
                let text = if rating >= 4.0 {
                    format!(
                        "Loved the {cat} here, {} and {}.",
                        PRAISE.choose(&mut r).unwrap(),
                        PRAISE.choose(&mut r).unwrap()
                    )
                } else if rating <= 2.0 {
                    format!(
                        "Too {} for me, the {cat} felt {}.",
                        COMPLAINTS.choose(&mut r).unwrap(),
                        COMPLAINTS.choose(&mut r).unwrap()
                    )
                } else {
                    format!("A fair {cat} pick, somewhat {}.", PRAISE.choose(&mut r).unwrap())
                };
                reviews.push(ReviewRecord {
                    user_id: user_id.clone(),
                    item_id: item.item_id.clone(),
                    timestamp: ts,
                    text,
                    helpfulness: Some(r.random_range(0..20)),
                });
            }
        }
    }
    Ok(Corpus::from_records(domain, users, items, interactions, reviews)?)
}

/// Rank of the positive once exactly `covered` (a subset of the required
/// evidence) has been gathered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankMapEntry {
    pub covered: BTreeSet<ToolName>,
    pub rank: u32,
}

/// Oracle environment: the positive's rank depends only on which required
/// tools were called.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorld {
    /// Confidence reported by each tool's output.
    pub utility: BTreeMap<ToolName, f64>,
    pub required_evidence: BTreeSet<ToolName>,
    pub rank_map: Vec<RankMapEntry>,
}

fn subsets(set: &BTreeSet<ToolName>) -> Vec<BTreeSet<ToolName>> {
    let items: Vec<ToolName> = set.iter().copied().collect();
    (0..1usize << items.len())
        .map(|mask| items.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, t)| *t).collect())
        .collect()
}

impl SyntheticWorld {
    pub fn new(required: BTreeSet<ToolName>, rank_map: Vec<RankMapEntry>) -> Result<SyntheticWorld, EnvError> {
        let utility = ToolName::ALL
            .iter()
            .filter(|t| !t.is_terminal())
            .map(|&t| (t, if required.contains(&t) { 0.9 } else { 0.3 }))
            .collect();
        let world = SyntheticWorld {
            utility,
            required_evidence: required,
            rank_map,
        };
        world.validate()?;
        Ok(world)
    }

    /// Rank falls linearly from `empty_rank` to `full_rank` with the number of
    /// required tools covered.
    pub fn graded(required: &[ToolName], empty_rank: u32, full_rank: u32) -> Result<SyntheticWorld, EnvError> {
        let required: BTreeSet<ToolName> = required.iter().copied().collect();
        let k = required.len().max(1) as f64;
        let rank_map = subsets(&required)
            .into_iter()
            .map(|covered| {
                let frac = covered.len() as f64 / k;
                let rank = (f64::from(empty_rank) - (f64::from(empty_rank) - f64::from(full_rank)) * frac).round() as u32;
                RankMapEntry { covered, rank }
            })
            .collect();
        SyntheticWorld::new(required, rank_map)
    }

    /// Every subset of the required set must appear exactly once, ranks must
    /// lie in `[1, 20]`, and covering more never worsens the rank.
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.required_evidence.iter().any(|t| t.is_terminal()) {
            return Err(EnvError::InvalidWorld("CandidateRank cannot be required evidence".into()));
        }
        let mut seen = BTreeMap::new();
        for e in &self.rank_map {
            if !e.covered.is_subset(&self.required_evidence) {
                return Err(EnvError::InvalidWorld(format!("rank_map key {:?} is not a subset of the required set", e.covered)));
            }
            if !(1..=N_CANDIDATES as u32).contains(&e.rank) {
                return Err(EnvError::InvalidWorld(format!("rank {} outside [1, {N_CANDIDATES}]", e.rank)));
            }
            if seen.insert(e.covered.clone(), e.rank).is_some() {
                return Err(EnvError::InvalidWorld(format!("rank_map key {:?} appears twice", e.covered)));
            }
        }
        for s in subsets(&self.required_evidence) {
            if !seen.contains_key(&s) {
                return Err(EnvError::InvalidWorld(format!("rank_map has no entry for {s:?}")));
            }
        }
        for (a, ra) in &seen {
            for (b, rb) in &seen {
                if a.is_subset(b) && rb > ra {
                    return Err(EnvError::InvalidWorld(format!("covering {b:?} worsens rank over {a:?}")));
                }
            }
        }
        if let Some((t, u)) = self.utility.iter().find(|(_, u)| !(0.0..=1.0).contains(*u)) {
            return Err(EnvError::InvalidWorld(format!("utility of {t} is {u}")));
        }
        Ok(())
    }

    pub fn rank_for<'a>(&self, called: impl IntoIterator<Item = &'a ToolName>) -> u32 {
        let covered: BTreeSet<ToolName> =
            called.into_iter().copied().filter(|t| self.required_evidence.contains(t)).collect();
        self.rank_map
            .iter()
            .find(|e| e.covered == covered)
            .map(|e| e.rank)
            .expect("validated rank_map covers every subset")
    }

    /// Avg HR@{1,3,5} of the ranking produced after calling `called`.
    pub fn quality_for<'a>(&self, called: impl IntoIterator<Item = &'a ToolName>) -> f64 {
        avg_hr(self.rank_for(called)).expect("ranks are >= 1")
    }
}

/// A family of users sharing a history-length range and an oracle world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Archetype {
    pub name: String,
    /// Inclusive range of visible history lengths.
    pub history_len: (usize, usize),
    pub world: SyntheticWorld,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSuite {
    pub domain: Domain,
    pub archetypes: Vec<Archetype>,
}

impl SyntheticSuite {
    pub fn single(world: SyntheticWorld, history_len: (usize, usize)) -> SyntheticSuite {
        SyntheticSuite {
            domain: Domain::Synthetic,
            archetypes: vec![Archetype {
                name: "only".into(),
                history_len,
                world,
            }],
        }
    }

    /// Three archetypes that differ in history length and in the evidence
    /// their positives depend on: sparse users need item-side evidence,
    /// mid-history users need stable preferences, heavy users need recency
    /// and maker affinity plus item semantics.
    pub fn three_archetypes() -> SyntheticSuite {
        let world = |req: &[ToolName]| SyntheticWorld::graded(req, 16, 1).expect("valid graded world");
        SyntheticSuite {
            domain: Domain::Synthetic,
            archetypes: vec![
                Archetype {
                    name: "sparse".into(),
                    history_len: (1, 3),
                    world: world(&[ToolName::ItemProfile]),
                },
                Archetype {
                    name: "steady".into(),
                    history_len: (20, 40),
                    world: world(&[ToolName::LongTermPreference, ToolName::PositivePreference]),
                },
                Archetype {
                    name: "heavy".into(),
                    history_len: (300, 600),
                    world: world(&[ToolName::AuthorPreference, ToolName::ItemSemantic, ToolName::ShortTermPreference]),
                },
            ],
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if self.archetypes.is_empty() {
            return Err(EnvError::InvalidWorld("suite has no archetypes".into()));
        }
        for a in &self.archetypes {
            if a.history_len.0 > a.history_len.1 {
                return Err(EnvError::InvalidWorld(format!("archetype {} has an empty history range", a.name)));
            }
            a.world.validate()?;
        }
        Ok(())
    }
}

/// Output of [`make_synthetic_world`].
pub struct SyntheticWorldData {
    pub corpus: Corpus,
    pub episodes: Vec<Episode>,
    /// Archetype index of each episode.
    pub archetype_of: Vec<usize>,
    pub backend: SyntheticBackend,
}

impl SyntheticWorldData {
    pub fn world_of(&self, episode_index: usize) -> &SyntheticWorld {
        &self.backend.worlds[self.archetype_of[episode_index]]
    }
}

/// Builds a corpus and `n_episodes` episodes, one per fresh user, cycling
/// through the suite's archetypes. Each user's visible history length is drawn
/// from the archetype's range; the held-out positive is the user's last
/// interaction.
pub fn make_synthetic_world(suite: &SyntheticSuite, n_episodes: usize, seed: u64) -> Result<SyntheticWorldData, EnvError> {
    suite.validate()?;
    let max_hist = suite.archetypes.iter().map(|a| a.history_len.1).max().unwrap_or(0);
    let n_items = max_hist + 1 + N_NEGATIVES + 80;
    let items = make_items(suite.domain, n_items, seed);
    let mut users = Vec::with_capacity(n_episodes);
    let mut interactions = Vec::new();
    let mut archetype_of = Vec::with_capacity(n_episodes);
    for e in 0..n_episodes {
        let a = e % suite.archetypes.len();
        let arch = &suite.archetypes[a];
        let mut r = rng::stream(seed, &format!("world/user/{e}"));
        let hist = r.random_range(arch.history_len.0..=arch.history_len.1);
        let user_id = format!("su{e:05}");
        users.push(UserRecord {
            user_id: user_id.clone(),
            domain: suite.domain,
            profile_text: String::new(),
            location: suite.domain.supports_geo().then(|| geo_near(&mut r, 0.02)),
        });
        let picks: Vec<&ItemRecord> = items.choose_multiple(&mut r, hist + 1).collect();
        let mut ts = BASE_TIME;
        for it in picks {
            ts += r.random_range(1..5 * SECONDS_PER_DAY);
            interactions.push(InteractionRecord {
                user_id: user_id.clone(),
                item_id: it.item_id.clone(),
                timestamp: ts,
                rating: Some(f64::from(r.random_range(1..=5u8))),
            });
        }
        archetype_of.push(a);
    }
    let corpus = Corpus::from_records(suite.domain, users, items, interactions, Vec::new())?;
    let factory = EpisodeFactory::new(&corpus);
    let spec = ScenarioSpec::new(Scenario::Classic);
    let mut episodes = Vec::with_capacity(n_episodes);
    let mut assignment = BTreeMap::new();
    for e in 0..n_episodes {
        let ep = factory.generate(&format!("su{e:05}"), &spec, rng::derive_seed(seed, &format!("world/episode/{e}")))?;
        assignment.insert(ep.episode_id.clone(), (archetype_of[e], ep.positive_id.clone()));
        episodes.push(ep);
    }
    let backend = SyntheticBackend {
        worlds: suite.archetypes.iter().map(|a| a.world.clone()).collect(),
        assignment,
    };
    Ok(SyntheticWorldData {
        corpus,
        episodes,
        archetype_of,
        backend,
    })
}

/// Tool backend for synthetic worlds.
///
/// Evidence tools return a fixed facet with the world's utility as confidence.
/// `CandidateRank` places the positive at `rank_map[covered]` and orders the
/// other candidates by id. The positive ids live here, on the environment
/// side; nothing of them reaches the agent state or the corpus view.
#[derive(Debug, Clone)]
pub struct SyntheticBackend {
    worlds: Vec<SyntheticWorld>,
    assignment: BTreeMap<String, (usize, String)>,
}

impl SyntheticBackend {
    pub fn world_for(&self, episode_id: &str) -> Option<&SyntheticWorld> {
        self.assignment.get(episode_id).map(|(w, _)| &self.worlds[*w])
    }

    fn lookup(&self, episode_id: &str) -> Result<(&SyntheticWorld, &str), ToolError> {
        self.assignment
            .get(episode_id)
            .map(|(w, p)| (&self.worlds[*w], p.as_str()))
            .ok_or_else(|| ToolError::InvalidInput(format!("episode `{episode_id}` is not part of this world")))
    }
}

impl ToolBackend for SyntheticBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Synthetic
    }

    fn execute(&self, spec: &ToolSpec, state: &AgentState, _view: &CorpusView<'_>) -> Result<ToolResult, ToolError> {
        let (world, positive) = self.lookup(&state.episode_id)?;
        if !spec.is_terminal {
            let key = spec.name.facet_vocabulary()[0];
            let confidence = world.utility.get(&spec.name).copied().unwrap_or(0.0);
            return Ok(ToolResult::Evidence(ToolOutput::new(
                spec.name,
                vec![Facet::new(key, FacetValue::text("observed"))],
                confidence,
                format!("synthetic evidence from {}", spec.name),
            )));
        }
        let rank = world.rank_for(state.memory.iter().map(|m| &m.action)) as usize;
        let mut others: Vec<String> = state.candidate_ids.iter().filter(|c| *c != positive).cloned().collect();
        others.sort();
        others.insert((rank - 1).min(others.len()), positive.to_string());
        let n = others.len() as f64;
        Ok(ToolResult::Ranking(RankOutput {
            scores: (0..others.len()).map(|i| normalize_number((n - i as f64) / n)).collect(),
            explanations: vec!["synthetic".to_string(); others.len()],
            ranking: others,
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn graded_world_is_monotone_and_complete() {
        let w = SyntheticWorld::graded(&[ToolName::ShortTermPreference, ToolName::ItemProfile], 10, 1).unwrap();
        assert_eq!(w.rank_map.len(), 4);
        assert_eq!(w.rank_for(&[]), 10);
        assert_eq!(w.rank_for(&[ToolName::ItemProfile, ToolName::LongTermPreference]), 6);
        assert_eq!(w.rank_for(&[ToolName::ItemProfile, ToolName::ShortTermPreference]), 1);
        assert_eq!(w.quality_for(&[ToolName::ItemProfile, ToolName::ShortTermPreference]), 1.0);
    }

    #[test]
    fn invalid_worlds_are_rejected() {
        let req: BTreeSet<ToolName> = [ToolName::ShortTermPreference].into_iter().collect();
        let bad_monotone = vec![
            RankMapEntry { covered: BTreeSet::new(), rank: 1 },
            RankMapEntry { covered: req.clone(), rank: 10 },
        ];
        assert!(SyntheticWorld::new(req.clone(), bad_monotone).is_err());
        let missing = vec![RankMapEntry { covered: req.clone(), rank: 1 }];
        assert!(SyntheticWorld::new(req.clone(), missing).is_err());
        let out_of_range = vec![
            RankMapEntry { covered: BTreeSet::new(), rank: 21 },
            RankMapEntry { covered: req.clone(), rank: 1 },
        ];
        assert!(SyntheticWorld::new(req, out_of_range).is_err());
    }

    #[test]
    fn world_generation_is_deterministic_and_valid() {
        let suite = SyntheticSuite::three_archetypes();
        let a = make_synthetic_world(&suite, 9, 5).unwrap();
        let b = make_synthetic_world(&suite, 9, 5).unwrap();
        assert_eq!(a.episodes, b.episodes);
        for (i, ep) in a.episodes.iter().enumerate() {
            ep.check(&a.corpus).unwrap();
            let (lo, hi) = suite.archetypes[a.archetype_of[i]].history_len;
            let len = CorpusView::visible_history_len(&a.corpus, &ep.view()).unwrap();
            assert!((lo..=hi).contains(&len), "{len} not in {lo}..={hi}");
        }
    }

    #[test]
    fn generated_corpus_is_deterministic() {
        let cfg = CorpusGenConfig {
            n_users: 5,
            n_items: 80,
            ..CorpusGenConfig::default()
        };
        let a = generate_corpus(&cfg, 3).unwrap();
        let b = generate_corpus(&cfg, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n_users(), 5);
        assert!(generate_corpus(&CorpusGenConfig { n_items: 10, ..cfg }, 3).is_err());
    }
}

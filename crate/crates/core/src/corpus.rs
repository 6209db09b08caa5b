//! Read-only world data: users, items, interactions and reviews.
//!
//! A corpus lives in a directory with a `corpus.json` manifest and four JSONL
//! files, one record per line. Loading validates every record and the
//! references between collections; the result is immutable.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::io::{self, IoError};

pub const SECONDS_PER_DAY: i64 = 86_400;
/// Window of the long evolving-interest split.
pub const LONG_WINDOW_DAYS: u32 = 90;
/// Window of the short evolving-interest split.
pub const SHORT_WINDOW_DAYS: u32 = 7;
pub const DEFAULT_CONTEXT_INTERACTIONS: usize = 10;
pub const DEFAULT_CONTEXT_REVIEWS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Domain {
    Amazon,
    Goodreads,
    Yelp,
    Synthetic,
    SyntheticGeo,
}

impl Domain {
    pub fn supports_geo(self) -> bool {
        matches!(self, Domain::Yelp | Domain::SyntheticGeo)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Amazon => "amazon",
            Domain::Goodreads => "goodreads",
            Domain::Yelp => "yelp",
            Domain::Synthetic => "synthetic",
            Domain::SyntheticGeo => "synthetic-geo",
        }
    }
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Domain {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "amazon" => Ok(Domain::Amazon),
            "goodreads" => Ok(Domain::Goodreads),
            "yelp" => Ok(Domain::Yelp),
            "synthetic" => Ok(Domain::Synthetic),
            "synthetic-geo" => Ok(Domain::SyntheticGeo),
            other => Err(format!("unknown domain `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    /// Great-circle distance in kilometres.
    pub fn haversine_km(&self, other: &GeoPoint) -> f64 {
        const EARTH_RADIUS_KM: f64 = 6371.0088;
        let (lat1, lat2) = (self.lat.to_radians(), other.lat.to_radians());
        let dlat = lat2 - lat1;
        let dlon = (other.lon - self.lon).to_radians();
        let a = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
        2.0 * EARTH_RADIUS_KM * a.sqrt().min(1.0).asin()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserRecord {
    pub user_id: String,
    pub domain: Domain,
    #[serde(default)]
    pub profile_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location: Option<GeoPoint>,
}

/// Opening hours keyed by lowercase day name (`mon` .. `sun`), values like `11:00-20:00`.
pub type WeeklyHours = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub item_id: String,
    pub domain: Domain,
    #[serde(default)]
    pub title: String,
    #[serde(default)]
    pub categories: Vec<String>,
    #[serde(default)]
    pub rating_mean: f64,
    #[serde(default)]
    pub rating_count: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub price: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub author_or_brand: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hours: Option<WeeklyHours>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location: Option<GeoPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub user_id: String,
    pub item_id: String,
    /// UTC seconds.
    pub timestamp: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rating: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewRecord {
    pub user_id: String,
    pub item_id: String,
    pub timestamp: i64,
    #[serde(default)]
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub helpfulness: Option<u32>,
}

/// `corpus.json`: the domain plus file paths relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub domain: Domain,
    #[serde(default = "default_users")]
    pub users: PathBuf,
    #[serde(default = "default_items")]
    pub items: PathBuf,
    #[serde(default = "default_interactions")]
    pub interactions: PathBuf,
    #[serde(default = "default_reviews")]
    pub reviews: PathBuf,
}

fn default_users() -> PathBuf {
    "users.jsonl".into()
}
fn default_items() -> PathBuf {
    "items.jsonl".into()
}
fn default_interactions() -> PathBuf {
    "interactions.jsonl".into()
}
fn default_reviews() -> PathBuf {
    "reviews.jsonl".into()
}

impl CorpusManifest {
    pub fn new(domain: Domain) -> Self {
        CorpusManifest {
            domain,
            users: default_users(),
            items: default_items(),
            interactions: default_interactions(),
            reviews: default_reviews(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("missing corpus file {0}")]
    MissingFile(PathBuf),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("{file}:{line}: {message}")]
    InvalidRecord {
        file: PathBuf,
        line: usize,
        message: String,
    },
    #[error("referential integrity: {0}")]
    Integrity(String),
    #[error("unknown user `{0}`")]
    UnknownUser(String),
    #[error("unknown item `{0}`")]
    UnknownItem(String),
}

/// Indexed, immutable collection of the world data for one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    domain: Domain,
    users: BTreeMap<String, UserRecord>,
    items: BTreeMap<String, ItemRecord>,
    /// Sorted by (user_id, timestamp, item_id).
    interactions: Vec<InteractionRecord>,
    /// File order is kept: it is the last review tie-break.
    reviews: Vec<ReviewRecord>,
    interactions_by_user: HashMap<String, std::ops::Range<usize>>,
    reviews_by_item: HashMap<String, Vec<usize>>,
    reviews_by_user_item: HashMap<(String, String), Vec<usize>>,
}

impl Corpus {
    /// Build and validate a corpus from in-memory records.
    pub fn from_records(
        domain: Domain,
        users: Vec<UserRecord>,
        items: Vec<ItemRecord>,
        interactions: Vec<InteractionRecord>,
        reviews: Vec<ReviewRecord>,
    ) -> Result<Corpus, CorpusError> {
        fn lined<T>(records: Vec<T>) -> Lined<T> {
            let origin = PathBuf::from("<memory>");
            records
                .into_iter()
                .enumerate()
                .map(|(i, r)| (r, (origin.clone(), i + 1)))
                .collect()
        }
        build(domain, lined(users), lined(items), lined(interactions), lined(reviews))
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn users(&self) -> impl Iterator<Item = &UserRecord> {
        self.users.values()
    }

    pub fn items(&self) -> impl Iterator<Item = &ItemRecord> {
        self.items.values()
    }

    pub fn interactions(&self) -> &[InteractionRecord] {
        &self.interactions
    }

    pub fn reviews(&self) -> &[ReviewRecord] {
        &self.reviews
    }

    pub fn user(&self, user_id: &str) -> Result<&UserRecord, CorpusError> {
        self.users
            .get(user_id)
            .ok_or_else(|| CorpusError::UnknownUser(user_id.to_string()))
    }

    pub fn item(&self, item_id: &str) -> Result<&ItemRecord, CorpusError> {
        self.items
            .get(item_id)
            .ok_or_else(|| CorpusError::UnknownItem(item_id.to_string()))
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    /// A user's interactions in ascending (timestamp, item_id) order.
    pub fn user_interactions(&self, user_id: &str) -> Result<&[InteractionRecord], CorpusError> {
        self.user(user_id)?;
        Ok(self
            .interactions_by_user
            .get(user_id)
            .map(|r| &self.interactions[r.clone()])
            .unwrap_or(&[]))
    }

    /// Every item the user ever interacted with, at any time.
    pub fn interacted_items(&self, user_id: &str) -> Result<BTreeSet<&str>, CorpusError> {
        Ok(self
            .user_interactions(user_id)?
            .iter()
            .map(|i| i.item_id.as_str())
            .collect())
    }

    pub fn item_reviews(&self, item_id: &str) -> impl Iterator<Item = &ReviewRecord> {
        self.reviews_by_item
            .get(item_id)
            .into_iter()
            .flatten()
            .map(move |&i| &self.reviews[i])
    }

    pub fn user_item_reviews(&self, user_id: &str, item_id: &str) -> impl Iterator<Item = &ReviewRecord> {
        self.reviews_by_user_item
            .get(&(user_id.to_string(), item_id.to_string()))
            .into_iter()
            .flatten()
            .map(move |&i| &self.reviews[i])
    }

    /// Write the corpus back out as a manifest plus JSONL files.
    pub fn save(&self, dir: &Path) -> Result<(), CorpusError> {
        let manifest = CorpusManifest::new(self.domain);
        io::write_json(&dir.join("corpus.json"), &manifest)?;
        io::write_jsonl(&dir.join(&manifest.users), self.users.values())?;
        io::write_jsonl(&dir.join(&manifest.items), self.items.values())?;
        io::write_jsonl(&dir.join(&manifest.interactions), self.interactions.iter())?;
        io::write_jsonl(&dir.join(&manifest.reviews), self.reviews.iter())?;
        Ok(())
    }

    /// Indices into [`Corpus::reviews`] (file order) of the reviews of `item_id`.
    fn item_review_positions(&self, item_id: &str) -> &[usize] {
        self.reviews_by_item.get(item_id).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Load a corpus from a directory holding `corpus.json`, or from the manifest path itself.
pub fn load_corpus(path: &Path) -> Result<Corpus, CorpusError> {
    let manifest_path = if path.is_dir() {
        path.join("corpus.json")
    } else {
        path.to_path_buf()
    };
    if !manifest_path.exists() {
        return Err(CorpusError::MissingFile(manifest_path));
    }
    let manifest: CorpusManifest = io::read_json(&manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    build(
        manifest.domain,
        read_lined(&root.join(&manifest.users))?,
        read_lined(&root.join(&manifest.items))?,
        read_lined(&root.join(&manifest.interactions))?,
        read_lined(&root.join(&manifest.reviews))?,
    )
}

fn read_lined<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<(T, (PathBuf, usize))>, CorpusError> {
    use std::io::BufRead;
    if !path.exists() {
        return Err(CorpusError::MissingFile(path.to_path_buf()));
    }
    let file = std::fs::File::open(path).map_err(|e| IoError::Fs {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut out = Vec::new();
    for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| IoError::Fs {
            path: path.to_path_buf(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| CorpusError::InvalidRecord {
            file: path.to_path_buf(),
            line: idx + 1,
            message: format!("malformed record: {e}"),
        })?;
        out.push((record, (path.to_path_buf(), idx + 1)));
    }
    Ok(out)
}

type Lined<T> = Vec<(T, (PathBuf, usize))>;

fn build(
    domain: Domain,
    users: Lined<UserRecord>,
    items: Lined<ItemRecord>,
    interactions: Lined<InteractionRecord>,
    reviews: Lined<ReviewRecord>,
) -> Result<Corpus, CorpusError> {
    let invalid = |(file, line): &(PathBuf, usize), message: String| CorpusError::InvalidRecord {
        file: file.clone(),
        line: *line,
        message,
    };

    let mut user_map = BTreeMap::new();
    for (user, at) in users {
        if user.domain != domain {
            return Err(invalid(&at, format!("user `{}` has domain {} in a {} corpus", user.user_id, user.domain, domain)));
        }
        if user.location.is_some() && !domain.supports_geo() {
            return Err(invalid(&at, format!("user `{}` has a location but {} has no geo support", user.user_id, domain)));
        }
        if user_map.contains_key(&user.user_id) {
            return Err(invalid(&at, format!("duplicate user_id `{}`", user.user_id)));
        }
        user_map.insert(user.user_id.clone(), user);
    }

    let mut item_map = BTreeMap::new();
    for (item, at) in items {
        if item.domain != domain {
            return Err(invalid(&at, format!("item `{}` has domain {} in a {} corpus", item.item_id, item.domain, domain)));
        }
        if item.rating_count > 0 && !(0.0..=5.0).contains(&item.rating_mean) {
            return Err(invalid(&at, format!("item `{}` rating_mean {} outside [0,5]", item.item_id, item.rating_mean)));
        }
        if item.price.is_some_and(|p| p < 0.0 || !p.is_finite()) {
            return Err(invalid(&at, format!("item `{}` has a negative price", item.item_id)));
        }
        if item.location.is_some() && !domain.supports_geo() {
            return Err(invalid(&at, format!("item `{}` has a location but {} has no geo support", item.item_id, domain)));
        }
        if item_map.contains_key(&item.item_id) {
            return Err(invalid(&at, format!("duplicate item_id `{}`", item.item_id)));
        }
        item_map.insert(item.item_id.clone(), item);
    }

    let mut seen = BTreeSet::new();
    let mut sorted_interactions = Vec::with_capacity(interactions.len());
    for (inter, at) in interactions {
        if !user_map.contains_key(&inter.user_id) {
            return Err(CorpusError::Integrity(format!("interaction references unknown user_id `{}`", inter.user_id)));
        }
        if !item_map.contains_key(&inter.item_id) {
            return Err(CorpusError::Integrity(format!("interaction references unknown item_id `{}`", inter.item_id)));
        }
        if inter.rating.is_some_and(|r| !(0.0..=5.0).contains(&r)) {
            return Err(invalid(&at, format!("interaction rating {:?} outside [0,5]", inter.rating)));
        }
        if !seen.insert((inter.user_id.clone(), inter.item_id.clone(), inter.timestamp)) {
            return Err(invalid(&at, format!("duplicate interaction ({}, {}, {})", inter.user_id, inter.item_id, inter.timestamp)));
        }
        sorted_interactions.push(inter);
    }
    sorted_interactions.sort_by(|a, b| {
        (&a.user_id, a.timestamp, &a.item_id).cmp(&(&b.user_id, b.timestamp, &b.item_id))
    });

    let mut interactions_by_user: HashMap<String, std::ops::Range<usize>> = HashMap::new();
    let mut start = 0;
    for i in 1..=sorted_interactions.len() {
        if i == sorted_interactions.len() || sorted_interactions[i].user_id != sorted_interactions[start].user_id {
            interactions_by_user.insert(sorted_interactions[start].user_id.clone(), start..i);
            start = i;
        }
    }

    let mut review_list = Vec::with_capacity(reviews.len());
    let mut reviews_by_item: HashMap<String, Vec<usize>> = HashMap::new();
    let mut reviews_by_user_item: HashMap<(String, String), Vec<usize>> = HashMap::new();
    for (review, _) in reviews {
        if !user_map.contains_key(&review.user_id) {
            return Err(CorpusError::Integrity(format!("review references unknown user_id `{}`", review.user_id)));
        }
        if !item_map.contains_key(&review.item_id) {
            return Err(CorpusError::Integrity(format!("review references unknown item_id `{}`", review.item_id)));
        }
        let idx = review_list.len();
        reviews_by_item.entry(review.item_id.clone()).or_default().push(idx);
        reviews_by_user_item
            .entry((review.user_id.clone(), review.item_id.clone()))
            .or_default()
            .push(idx);
        review_list.push(review);
    }

    Ok(Corpus {
        domain,
        users: user_map,
        items: item_map,
        interactions: sorted_interactions,
        reviews: review_list,
        interactions_by_user,
        reviews_by_item,
        reviews_by_user_item,
    })
}

/// Interactions of `user_id` with `0 <= now - ts <= window_days` days, newest first
/// (item_id ascending among equal timestamps).
pub fn history_window(
    corpus: &Corpus,
    user_id: &str,
    window_days: u32,
    now: i64,
) -> Result<Vec<InteractionRecord>, CorpusError> {
    let horizon = i64::from(window_days) * SECONDS_PER_DAY;
    let mut out: Vec<InteractionRecord> = corpus
        .user_interactions(user_id)?
        .iter()
        .filter(|i| i.timestamp <= now && now - i.timestamp <= horizon)
        .cloned()
        .collect();
    sort_newest_first(&mut out);
    Ok(out)
}

pub(crate) fn sort_newest_first(records: &mut [InteractionRecord]) {
    records.sort_by(|a, b| b.timestamp.cmp(&a.timestamp).then_with(|| a.item_id.cmp(&b.item_id)));
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContextEntry {
    pub interaction: InteractionRecord,
    pub item: ItemRecord,
    pub reviews: Vec<ReviewRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContextBundle {
    pub user_id: String,
    pub entries: Vec<ContextEntry>,
}

/// The user's `k_interactions` most recent interactions, each with up to
/// `k_reviews_per_item` reviews of the item.
pub fn recent_context(
    corpus: &Corpus,
    user_id: &str,
    k_interactions: usize,
    k_reviews_per_item: usize,
) -> Result<ContextBundle, CorpusError> {
    recent_context_before(corpus, user_id, k_interactions, k_reviews_per_item, None)
}

/// As [`recent_context`], restricted to interactions and reviews strictly before `before`.
pub fn recent_context_before(
    corpus: &Corpus,
    user_id: &str,
    k_interactions: usize,
    k_reviews_per_item: usize,
    before: Option<i64>,
) -> Result<ContextBundle, CorpusError> {
    let visible = |ts: i64| before.is_none_or(|cut| ts < cut);
    let mut history: Vec<InteractionRecord> = corpus
        .user_interactions(user_id)?
        .iter()
        .filter(|i| visible(i.timestamp))
        .cloned()
        .collect();
    sort_newest_first(&mut history);
    history.truncate(k_interactions);

    let mut entries = Vec::with_capacity(history.len());
    for interaction in history {
        let item = corpus.item(&interaction.item_id)?.clone();
        let mut positions: Vec<usize> = corpus
            .item_review_positions(&interaction.item_id)
            .iter()
            .copied()
            .filter(|&p| visible(corpus.reviews[p].timestamp))
            .collect();
        positions.sort_by(|&a, &b| {
            let (ra, rb) = (&corpus.reviews[a], &corpus.reviews[b]);
            rb.helpfulness
                .unwrap_or(0)
                .cmp(&ra.helpfulness.unwrap_or(0))
                .then_with(|| rb.timestamp.cmp(&ra.timestamp))
                .then_with(|| a.cmp(&b))
        });
        entries.push(ContextEntry {
            interaction,
            item,
            reviews: positions
                .into_iter()
                .take(k_reviews_per_item)
                .map(|p| corpus.reviews[p].clone())
                .collect(),
        });
    }
    Ok(ContextBundle {
        user_id: user_id.to_string(),
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn item(id: &str, cats: &[&str], count: u64) -> ItemRecord {
        ItemRecord {
            item_id: id.into(),
            domain: Domain::Amazon,
            title: format!("title {id}"),
            categories: cats.iter().map(|c| c.to_string()).collect(),
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

    fn inter(u: &str, i: &str, ts: i64) -> InteractionRecord {
        InteractionRecord {
            user_id: u.into(),
            item_id: i.into(),
            timestamp: ts,
            rating: Some(4.0),
        }
    }

    #[test]
    fn empty_corpus_is_valid() {
        let c = Corpus::from_records(Domain::Amazon, vec![], vec![], vec![], vec![]).unwrap();
        assert_eq!((c.n_users(), c.n_items(), c.interactions().len()), (0, 0, 0));
    }

    #[test]
    fn unknown_item_in_interaction_is_named() {
        let err = Corpus::from_records(
            Domain::Amazon,
            vec![user("u1")],
            vec![item("i1", &["a"], 1)],
            vec![inter("u1", "ghost", 5)],
            vec![],
        )
        .unwrap_err();
        assert!(matches!(err, CorpusError::Integrity(ref m) if m.contains("ghost")), "{err}");
    }

    #[test]
    fn duplicate_interaction_rejected() {
        let err = Corpus::from_records(
            Domain::Amazon,
            vec![user("u1")],
            vec![item("i1", &["a"], 1)],
            vec![inter("u1", "i1", 5), inter("u1", "i1", 5)],
            vec![],
        )
        .unwrap_err();
        assert!(matches!(err, CorpusError::InvalidRecord { .. }));
    }

    #[test]
    fn location_outside_geo_domain_rejected() {
        let mut u = user("u1");
        u.location = Some(GeoPoint { lat: 1.0, lon: 2.0 });
        assert!(Corpus::from_records(Domain::Amazon, vec![u], vec![], vec![], vec![]).is_err());
    }

    #[test]
    fn history_window_ages() {
        let now = 1_000 * SECONDS_PER_DAY;
        let c = Corpus::from_records(
            Domain::Amazon,
            vec![user("u1")],
            vec![item("a", &[], 1), item("b", &[], 1), item("c", &[], 1)],
            vec![
                inter("u1", "a", now - SECONDS_PER_DAY),
                inter("u1", "b", now - 50 * SECONDS_PER_DAY),
                inter("u1", "c", now - 120 * SECONDS_PER_DAY),
            ],
            vec![],
        )
        .unwrap();
        let got: Vec<_> = history_window(&c, "u1", 90, now)
            .unwrap()
            .into_iter()
            .map(|i| i.item_id)
            .collect();
        assert_eq!(got, vec!["a", "b"]);

        let old = Corpus::from_records(
            Domain::Amazon,
            vec![user("u1")],
            vec![item("a", &[], 1)],
            vec![inter("u1", "a", now - 30 * SECONDS_PER_DAY)],
            vec![],
        )
        .unwrap();
        assert!(history_window(&old, "u1", SHORT_WINDOW_DAYS, now).unwrap().is_empty());
        assert!(matches!(history_window(&old, "nobody", 7, now), Err(CorpusError::UnknownUser(_))));
    }

    #[test]
    fn window_constants() {
        assert_eq!(SHORT_WINDOW_DAYS, 7);
        assert_eq!(LONG_WINDOW_DAYS, 90);
        assert_eq!((DEFAULT_CONTEXT_INTERACTIONS, DEFAULT_CONTEXT_REVIEWS), (10, 3));
    }

    #[test]
    fn recent_context_review_ties() {
        let review = |ts: i64, help: u32, text: &str| ReviewRecord {
            user_id: "u2".into(),
            item_id: "a".into(),
            timestamp: ts,
            text: text.into(),
            helpfulness: Some(help),
        };
        let c = Corpus::from_records(
            Domain::Amazon,
            vec![user("u1"), user("u2")],
            vec![item("a", &[], 1), item("b", &[], 1)],
            vec![inter("u1", "a", 10), inter("u1", "b", 20)],
            vec![review(5, 3, "older"), review(8, 3, "newer"), review(9, 1, "unhelpful"), review(1, 9, "top")],
        )
        .unwrap();
        let ctx = recent_context(&c, "u1", 10, 3).unwrap();
        assert_eq!(ctx.entries.len(), 2);
        assert_eq!(ctx.entries[0].item.item_id, "b");
        let texts: Vec<_> = ctx.entries[1].reviews.iter().map(|r| r.text.as_str()).collect();
        assert_eq!(texts, vec!["top", "newer", "older"]);

        let one = recent_context(&c, "u1", 1, 1).unwrap();
        assert_eq!(one.entries.len(), 1);
        assert!(one.entries[0].reviews.len() <= 1);
    }

    #[test]
    fn haversine_is_symmetric_and_zero_on_self() {
        let a = GeoPoint { lat: 33.45, lon: -112.07 };
        let b = GeoPoint { lat: 33.46, lon: -112.06 };
        assert!(a.haversine_km(&a).abs() < 1e-12);
        assert!((a.haversine_km(&b) - b.haversine_km(&a)).abs() < 1e-12);
        assert!((a.haversine_km(&b) - 1.45).abs() < 0.05);
    }
}

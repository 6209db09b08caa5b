use std::cell::RefCell;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{ToolError, ToolName};
use crate::corpus::{Corpus, Domain, GeoPoint, InteractionRecord, ItemRecord, ReviewRecord, SECONDS_PER_DAY};

/// Which parts of the world a tool declares it reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct InputNeeds {
    #[serde(default)]
    pub user_history: bool,
    #[serde(default)]
    pub user_reviews: bool,
    #[serde(default)]
    pub candidate_meta: bool,
    #[serde(default)]
    pub candidate_reviews: bool,
    #[serde(default)]
    pub geo: bool,
}

impl InputNeeds {
    pub const NONE: InputNeeds = InputNeeds {
        user_history: false,
        user_reviews: false,
        candidate_meta: false,
        candidate_reviews: false,
        geo: false,
    };
    pub const USER_HISTORY: InputNeeds = InputNeeds {
        user_history: true,
        ..Self::NONE
    };
    pub const USER_REVIEWS: InputNeeds = InputNeeds {
        user_reviews: true,
        ..Self::NONE
    };
    pub const CANDIDATE_META: InputNeeds = InputNeeds {
        candidate_meta: true,
        ..Self::NONE
    };
    pub const CANDIDATE_REVIEWS: InputNeeds = InputNeeds {
        candidate_reviews: true,
        ..Self::NONE
    };
    pub const GEO: InputNeeds = InputNeeds {
        geo: true,
        ..Self::NONE
    };

    pub const fn union(self, other: InputNeeds) -> InputNeeds {
        InputNeeds {
            user_history: self.user_history || other.user_history,
            user_reviews: self.user_reviews || other.user_reviews,
            candidate_meta: self.candidate_meta || other.candidate_meta,
            candidate_reviews: self.candidate_reviews || other.candidate_reviews,
            geo: self.geo || other.geo,
        }
    }

    pub fn permits(&self, access: Access) -> bool {
        match access {
            Access::UserHistory => self.user_history,
            Access::UserReviews => self.user_reviews,
            Access::CandidateMeta => self.candidate_meta,
            Access::CandidateReviews => self.candidate_reviews,
            Access::Geo => self.geo,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Access {
    UserHistory,
    UserReviews,
    CandidateMeta,
    CandidateReviews,
    Geo,
}

/// The agent-visible description of an episode. The held-out positive is not
/// part of this type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeView {
    pub episode_id: String,
    pub user_id: String,
    pub domain: Domain,
    pub candidate_ids: Vec<String>,
    /// Only data strictly before this instant is visible.
    pub reference_time: i64,
    /// Evolving-interest episodes expose only a trailing window of history.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub history_window_days: Option<u32>,
}

/// Capability object through which tools read the corpus.
///
/// Every accessor checks the tool's declared [`InputNeeds`] and records the
/// access, so tests can verify that tools stay inside their declaration.
pub struct CorpusView<'a> {
    corpus: &'a Corpus,
    episode: &'a EpisodeView,
    tool: ToolName,
    needs: InputNeeds,
    accessed: RefCell<BTreeSet<Access>>,
}

impl<'a> CorpusView<'a> {
    pub fn new(corpus: &'a Corpus, episode: &'a EpisodeView, tool: ToolName, needs: InputNeeds) -> Self {
        CorpusView {
            corpus,
            episode,
            tool,
            needs,
            accessed: RefCell::new(BTreeSet::new()),
        }
    }

    pub fn episode(&self) -> &EpisodeView {
        self.episode
    }

    pub fn tool(&self) -> ToolName {
        self.tool
    }

    pub fn needs(&self) -> InputNeeds {
        self.needs
    }

    /// Accesses made so far through this view.
    pub fn accessed(&self) -> BTreeSet<Access> {
        self.accessed.borrow().clone()
    }

    fn check(&self, access: Access) -> Result<(), ToolError> {
        if !self.needs.permits(access) {
            return Err(ToolError::AccessDenied { tool: self.tool, access });
        }
        self.accessed.borrow_mut().insert(access);
        Ok(())
    }

    fn visible(&self, ts: i64) -> bool {
        if ts >= self.episode.reference_time {
            return false;
        }
        match self.episode.history_window_days {
            Some(days) => self.episode.reference_time - ts <= i64::from(days) * SECONDS_PER_DAY,
            None => true,
        }
    }

    /// Visible history, newest first.
    pub fn history(&self) -> Result<Vec<&'a InteractionRecord>, ToolError> {
        self.check(Access::UserHistory)?;
        let mut out: Vec<&InteractionRecord> = self
            .corpus
            .user_interactions(&self.episode.user_id)?
            .iter()
            .filter(|i| self.visible(i.timestamp))
            .collect();
        out.sort_by(|a, b| b.timestamp.cmp(&a.timestamp).then_with(|| a.item_id.cmp(&b.item_id)));
        Ok(out)
    }

    /// Visible history within `days` of the reference time, newest first.
    pub fn history_within(&self, days: u32) -> Result<Vec<&'a InteractionRecord>, ToolError> {
        let horizon = i64::from(days) * SECONDS_PER_DAY;
        let cut = self.episode.reference_time;
        Ok(self
            .history()?
            .into_iter()
            .filter(|i| cut - i.timestamp <= horizon)
            .collect())
    }

    /// Metadata of an item the user interacted with (part of the history grant).
    pub fn history_item(&self, item_id: &str) -> Result<&'a ItemRecord, ToolError> {
        self.check(Access::UserHistory)?;
        Ok(self.corpus.item(item_id)?)
    }

    /// The user's own visible reviews of `item_id`, in file order.
    pub fn user_reviews_of(&self, item_id: &str) -> Result<Vec<&'a ReviewRecord>, ToolError> {
        self.check(Access::UserReviews)?;
        Ok(self
            .corpus
            .user_item_reviews(&self.episode.user_id, item_id)
            .filter(|r| self.visible(r.timestamp))
            .collect())
    }

    pub fn candidate(&self, item_id: &str) -> Result<&'a ItemRecord, ToolError> {
        self.check(Access::CandidateMeta)?;
        if !self.episode.candidate_ids.iter().any(|c| c == item_id) {
            return Err(ToolError::InvalidInput(format!("`{item_id}` is not a candidate")));
        }
        Ok(self.corpus.item(item_id)?)
    }

    /// Up to `k` visible reviews of a candidate, most helpful then newest first.
    pub fn candidate_reviews(&self, item_id: &str, k: usize) -> Result<Vec<&'a ReviewRecord>, ToolError> {
        self.check(Access::CandidateReviews)?;
        if !self.episode.candidate_ids.iter().any(|c| c == item_id) {
            return Err(ToolError::InvalidInput(format!("`{item_id}` is not a candidate")));
        }
        let mut reviews: Vec<(usize, &ReviewRecord)> = self
            .corpus
            .item_reviews(item_id)
            .filter(|r| r.timestamp < self.episode.reference_time)
            .enumerate()
            .collect();
        reviews.sort_by(|(ia, a), (ib, b)| {
            b.helpfulness
                .unwrap_or(0)
                .cmp(&a.helpfulness.unwrap_or(0))
                .then_with(|| b.timestamp.cmp(&a.timestamp))
                .then_with(|| ia.cmp(ib))
        });
        Ok(reviews.into_iter().take(k).map(|(_, r)| r).collect())
    }

    /// Declared location, else the centroid of visible history locations.
    pub fn user_location(&self) -> Result<Option<GeoPoint>, ToolError> {
        self.check(Access::Geo)?;
        if let Some(loc) = self.corpus.user(&self.episode.user_id)?.location {
            return Ok(Some(loc));
        }
        let points: Vec<GeoPoint> = self
            .history()?
            .into_iter()
            .filter_map(|i| self.corpus.item(&i.item_id).ok().and_then(|it| it.location))
            .collect();
        if points.is_empty() {
            return Ok(None);
        }
        let n = points.len() as f64;
        Ok(Some(GeoPoint {
            lat: points.iter().map(|p| p.lat).sum::<f64>() / n,
            lon: points.iter().map(|p| p.lon).sum::<f64>() / n,
        }))
    }

    pub fn candidate_location(&self, item_id: &str) -> Result<Option<GeoPoint>, ToolError> {
        self.check(Access::Geo)?;
        Ok(self.candidate(item_id)?.location)
    }

    /// Length of the user's visible history; part of the agent-visible user description.
    pub fn visible_history_len(corpus: &Corpus, episode: &EpisodeView) -> Result<usize, ToolError> {
        let view = CorpusView::new(corpus, episode, ToolName::LongTermPreference, InputNeeds::USER_HISTORY);
        Ok(view.history()?.len())
    }
}


//! Distribution-matched task selection.
//!
//! A reference profile summarizes the target statistics of a task set. Forward
//! greedy selection then picks `n` episodes from a larger pool so that the
//! selection's statistics track the profile.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{EnvError, Episode};
use crate::corpus::{Corpus, SECONDS_PER_DAY};
use crate::io::{self, IoError};
use crate::rng;

/// Bucket label to probability mass.
pub type Histogram = BTreeMap<String, f64>;

/// `Σ_b |h1(b) - h2(b)|`, missing buckets counting as 0.
pub fn l1_histogram_distance(h1: &Histogram, h2: &Histogram) -> Result<f64, EnvError> {
    for (k, v) in h1.iter().chain(h2.iter()) {
        if *v < 0.0 || !v.is_finite() {
            return Err(EnvError::NegativeMass(k.clone()));
        }
    }
    let mut total = 0.0;
    for (k, a) in h1 {
        total += (a - h2.get(k).copied().unwrap_or(0.0)).abs();
    }
    for (k, b) in h2 {
        if !h1.contains_key(k) {
            total += b;
        }
    }
    Ok(total)
}

/// Log2 bucket of a count: `0`, `1-2`, `3-4`, `5-8`, `9-16`, ...
///
/// Labels carry a zero-padded bucket index so they sort numerically.
pub fn popularity_bucket(count: u64) -> String {
    if count == 0 {
        return "00:0".into();
    }
    let k = (64 - (count - 1).leading_zeros()).max(1);
    let hi = 1u64 << k;
    let lo = if k == 1 { 1 } else { (1u64 << (k - 1)) + 1 };
    format!("{k:02}:{lo}-{hi}")
}

/// Days since the most recent visible interaction: `<=7`, `<=30`, `<=90`, `>90`, or `none`.
pub fn recency_bucket(days: Option<f64>) -> &'static str {
    match days {
        None => "none",
        Some(d) if d <= 7.0 => "<=7",
        Some(d) if d <= 30.0 => "<=30",
        Some(d) if d <= 90.0 => "<=90",
        Some(_) => ">90",
    }
}

/// Selection-relevant statistics of one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub episode_id: String,
    /// Review count of every candidate.
    pub candidate_popularity: Vec<u64>,
    /// Visible history length.
    pub history_len: usize,
    /// Days between the newest visible interaction and the reference time.
    pub recency_days: Option<f64>,
    /// Fraction of candidates with a known location.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geo_coverage: Option<f64>,
}

impl EpisodeStats {
    pub fn from_episode(corpus: &Corpus, episode: &Episode) -> Result<EpisodeStats, EnvError> {
        let mut popularity = Vec::with_capacity(episode.candidate_ids.len());
        let mut located = 0usize;
        for id in &episode.candidate_ids {
            let item = corpus.item(id)?;
            popularity.push(item.rating_count);
            located += usize::from(item.location.is_some());
        }
        let horizon = episode.history_window_days.map(|d| i64::from(d) * SECONDS_PER_DAY);
        let visible: Vec<i64> = corpus
            .user_interactions(&episode.user_id)?
            .iter()
            .map(|i| i.timestamp)
            .filter(|&ts| ts < episode.reference_time && horizon.is_none_or(|h| episode.reference_time - ts <= h))
            .collect();
        let newest = visible.iter().max();
        Ok(EpisodeStats {
            episode_id: episode.episode_id.clone(),
            candidate_popularity: popularity,
            history_len: visible.len(),
            recency_days: newest.map(|ts| (episode.reference_time - ts) as f64 / SECONDS_PER_DAY as f64),
            geo_coverage: episode
                .domain
                .supports_geo()
                .then(|| located as f64 / episode.candidate_ids.len().max(1) as f64),
        })
    }

    pub fn candidate_size(&self) -> usize {
        self.candidate_popularity.len()
    }

    fn size_pop_keys(&self) -> impl Iterator<Item = String> + '_ {
        let size = self.candidate_size();
        self.candidate_popularity
            .iter()
            .map(move |&c| format!("{size}|{}", popularity_bucket(c)))
    }

    fn len_recency_key(&self) -> String {
        format!("{}|{}", popularity_bucket(self.history_len as u64), recency_bucket(self.recency_days))
    }
}

/// Mean of a statistic plus its mean shortfall and excess around that mean.
///
/// `below = E[max(mean - x, 0)]` and `above = E[max(x - mean, 0)]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStat {
    pub mean: f64,
    pub below: f64,
    pub above: f64,
}

impl MeanStat {
    pub fn from_values(values: &[f64]) -> MeanStat {
        if values.is_empty() {
            return MeanStat {
                mean: 0.0,
                below: 0.0,
                above: 0.0,
            };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        MeanStat {
            mean,
            below: values.iter().map(|x| (mean - x).max(0.0)).sum::<f64>() / n,
            above: values.iter().map(|x| (x - mean).max(0.0)).sum::<f64>() / n,
        }
    }

    fn split(&self, x: f64) -> (f64, f64) {
        ((self.mean - x).max(0.0), (x - self.mean).max(0.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizeStats {
    pub median: f64,
    pub min: usize,
    pub max: usize,
    pub mean: f64,
}

/// Target statistics for a task set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceProfile {
    pub candidate_size: SizeStats,
    pub candidate_size_balance: MeanStat,
    /// Per-candidate review-count histogram over log2 buckets.
    pub popularity_histogram: Histogram,
    /// Per-candidate review count.
    pub popularity: MeanStat,
    pub history_length: MeanStat,
    pub history_length_median: f64,
    /// Per-candidate mass over `size|popularity bucket`.
    pub joint_hist_size_pop: Histogram,
    /// Per-episode mass over `history length bucket|recency bucket`.
    pub joint_hist_len_recency: Histogram,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geo_coverage_target: Option<MeanStat>,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

fn normalized(counts: BTreeMap<String, f64>) -> Histogram {
    let total: f64 = counts.values().sum();
    counts.into_iter().map(|(k, c)| (k, c / total)).collect()
}

impl ReferenceProfile {
    pub fn from_stats(stats: &[EpisodeStats]) -> Result<ReferenceProfile, EnvError> {
        if stats.is_empty() {
            return Err(EnvError::PoolTooSmall { pool: 0, n: 1 });
        }
        let sizes: Vec<f64> = stats.iter().map(|s| s.candidate_size() as f64).collect();
        let pops: Vec<f64> = stats
            .iter()
            .flat_map(|s| s.candidate_popularity.iter().map(|&c| c as f64))
            .collect();
        let lens: Vec<f64> = stats.iter().map(|s| s.history_len as f64).collect();
        let mut pop_hist = BTreeMap::new();
        let mut size_pop = BTreeMap::new();
        let mut len_rec = BTreeMap::new();
        for s in stats {
            for &c in &s.candidate_popularity {
                *pop_hist.entry(popularity_bucket(c)).or_insert(0.0) += 1.0;
            }
            for key in s.size_pop_keys() {
                *size_pop.entry(key).or_insert(0.0) += 1.0;
            }
            *len_rec.entry(s.len_recency_key()).or_insert(0.0) += 1.0;
        }
        let geo: Vec<f64> = stats.iter().filter_map(|s| s.geo_coverage).collect();
        Ok(ReferenceProfile {
            candidate_size: SizeStats {
                median: median(sizes.clone()),
                min: stats.iter().map(|s| s.candidate_size()).min().unwrap_or(0),
                max: stats.iter().map(|s| s.candidate_size()).max().unwrap_or(0),
                mean: MeanStat::from_values(&sizes).mean,
            },
            candidate_size_balance: MeanStat::from_values(&sizes),
            popularity_histogram: normalized(pop_hist),
            popularity: MeanStat::from_values(&pops),
            history_length: MeanStat::from_values(&lens),
            history_length_median: median(lens),
            joint_hist_size_pop: normalized(size_pop),
            joint_hist_len_recency: normalized(len_rec),
            geo_coverage_target: (!geo.is_empty()).then(|| MeanStat::from_values(&geo)),
        })
    }

    /// Every histogram must sum to 1 within 1e-9.
    pub fn validate(&self) -> Result<(), EnvError> {
        for (name, h) in [
            ("popularity_histogram", &self.popularity_histogram),
            ("joint_hist_size_pop", &self.joint_hist_size_pop),
            ("joint_hist_len_recency", &self.joint_hist_len_recency),
        ] {
            if let Some((k, _)) = h.iter().find(|(_, v)| **v < 0.0) {
                return Err(EnvError::NegativeMass(k.clone()));
            }
            let total: f64 = h.values().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(EnvError::InvalidSpec(format!("{name} sums to {total}")));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), IoError> {
        io::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<ReferenceProfile, EnvError> {
        let p: ReferenceProfile = io::read_json(path)?;
        p.validate()?;
        Ok(p)
    }
}

/// Term weights of the selection objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionWeights {
    pub popularity_histogram: f64,
    pub candidate_size: f64,
    pub history_length: f64,
    pub mean_popularity: f64,
    pub joint_size_pop: f64,
    pub joint_len_recency: f64,
    pub geo: f64,
}

impl Default for SelectionWeights {
    fn default() -> Self {
        SelectionWeights {
            popularity_histogram: 1.0,
            candidate_size: 0.25,
            history_length: 0.25,
            mean_popularity: 0.25,
            joint_size_pop: 0.25,
            joint_len_recency: 0.25,
            geo: 0.25,
        }
    }
}

/// Unfilled histogram mass for a budget of `norm` units.
struct HistTerm {
    target: Vec<f64>,
    counts: Vec<f64>,
    norm: f64,
}

impl HistTerm {
    fn new(reference: &Histogram, keys: &HashMap<String, usize>, norm: f64) -> HistTerm {
        let mut target = vec![0.0; keys.len()];
        for (k, m) in reference {
            target[keys[k]] = m * norm;
        }
        HistTerm {
            counts: vec![0.0; keys.len()],
            target,
            norm,
        }
    }

    fn value(&self) -> f64 {
        if self.norm <= 0.0 {
            return 0.0;
        }
        2.0 * self
            .target
            .iter()
            .zip(&self.counts)
            .map(|(t, c)| (t - c).max(0.0))
            .sum::<f64>()
            / self.norm
    }

    fn delta(&self, add: &[(usize, f64)]) -> f64 {
        if self.norm <= 0.0 {
            return 0.0;
        }
        let mut d = 0.0;
        for &(b, k) in add {
            let before = (self.target[b] - self.counts[b]).max(0.0);
            let after = (self.target[b] - self.counts[b] - k).max(0.0);
            d += after - before;
        }
        2.0 * d / self.norm
    }

    fn add(&mut self, add: &[(usize, f64)]) {
        for &(b, k) in add {
            self.counts[b] += k;
        }
    }
}

/// Unfilled shortfall and excess mass around a target mean.
struct BalanceTerm {
    target_below: f64,
    target_above: f64,
    below: f64,
    above: f64,
}

impl BalanceTerm {
    fn new(stat: &MeanStat, units: f64) -> BalanceTerm {
        BalanceTerm {
            target_below: stat.below * units,
            target_above: stat.above * units,
            below: 0.0,
            above: 0.0,
        }
    }

    fn value_at(&self, below: f64, above: f64) -> f64 {
        let total = self.target_below + self.target_above;
        if total <= 0.0 {
            return 0.0;
        }
        ((self.target_below - below).max(0.0) + (self.target_above - above).max(0.0)) / total
    }

    fn value(&self) -> f64 {
        self.value_at(self.below, self.above)
    }

    fn delta(&self, (b, a): (f64, f64)) -> f64 {
        self.value_at(self.below + b, self.above + a) - self.value()
    }

    fn add(&mut self, (b, a): (f64, f64)) {
        self.below += b;
        self.above += a;
    }
}

/// Precomputed contribution of one episode to every term.
struct Contribution {
    pop: Vec<(usize, f64)>,
    size_pop: Vec<(usize, f64)>,
    len_rec: Vec<(usize, f64)>,
    size: (f64, f64),
    len: (f64, f64),
    popm: (f64, f64),
    geo: (f64, f64),
}

fn tally(keys: impl Iterator<Item = String>, index: &HashMap<String, usize>) -> Vec<(usize, f64)> {
    let mut m: BTreeMap<usize, f64> = BTreeMap::new();
    for k in keys {
        *m.entry(index[&k]).or_insert(0.0) += 1.0;
    }
    m.into_iter().collect()
}

/// The budget-aware objective `J_n(S)`.
///
/// Every term is a deficit that adding an episode can only shrink, so the
/// objective never increases along a greedy path. Histogram terms are
/// `2 Σ_b max(r_b N - c_b, 0) / N` with `N` the budget mass; once the selected
/// mass reaches `N` this equals the L1 distance between the normalized
/// histograms. Mean terms measure the unfilled shortfall and excess mass
/// around the reference mean; both are zero exactly when the selection
/// reproduces the reference's mean and its spread on each side.
struct Objective {
    weights: SelectionWeights,
    pop: HistTerm,
    size_pop: HistTerm,
    len_rec: HistTerm,
    size: BalanceTerm,
    len: BalanceTerm,
    popm: BalanceTerm,
    geo: Option<BalanceTerm>,
}

impl Objective {
    fn new(
        reference: &ReferenceProfile,
        pool: &[&EpisodeStats],
        n: usize,
        weights: SelectionWeights,
    ) -> (Objective, Vec<Contribution>) {
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut intern = |k: &str| {
            let next = index.len();
            index.entry(k.to_string()).or_insert(next);
        };
        for k in reference
            .popularity_histogram
            .keys()
            .chain(reference.joint_hist_size_pop.keys())
            .chain(reference.joint_hist_len_recency.keys())
        {
            intern(k);
        }
        for s in pool {
            for &c in &s.candidate_popularity {
                intern(&popularity_bucket(c));
            }
            for k in s.size_pop_keys() {
                intern(&k);
            }
            intern(&s.len_recency_key());
        }
        let nf = n as f64;
        let cand_mass = nf * reference.candidate_size.mean;
        let objective = Objective {
            weights,
            pop: HistTerm::new(&reference.popularity_histogram, &index, cand_mass),
            size_pop: HistTerm::new(&reference.joint_hist_size_pop, &index, cand_mass),
            len_rec: HistTerm::new(&reference.joint_hist_len_recency, &index, nf),
            size: BalanceTerm::new(&reference.candidate_size_balance, nf),
            len: BalanceTerm::new(&reference.history_length, nf),
            popm: BalanceTerm::new(&reference.popularity, cand_mass),
            geo: reference.geo_coverage_target.as_ref().map(|g| BalanceTerm::new(g, nf)),
        };
        let contributions = pool
            .iter()
            .map(|s| {
                let mut popm = (0.0, 0.0);
                for &c in &s.candidate_popularity {
                    let (b, a) = reference.popularity.split(c as f64);
                    popm.0 += b;
                    popm.1 += a;
                }
                let geo = reference
                    .geo_coverage_target
                    .as_ref()
                    .map_or((0.0, 0.0), |g| g.split(s.geo_coverage.unwrap_or(0.0)));
                Contribution {
                    pop: tally(s.candidate_popularity.iter().map(|&c| popularity_bucket(c)), &index),
                    size_pop: tally(s.size_pop_keys(), &index),
                    len_rec: tally(std::iter::once(s.len_recency_key()), &index),
                    size: reference.candidate_size_balance.split(s.candidate_size() as f64),
                    len: reference.history_length.split(s.history_len as f64),
                    popm,
                    geo,
                }
            })
            .collect();
        (objective, contributions)
    }

    fn value(&self) -> f64 {
        let w = &self.weights;
        w.popularity_histogram * self.pop.value()
            + w.candidate_size * self.size.value()
            + w.history_length * self.len.value()
            + w.mean_popularity * self.popm.value()
            + w.joint_size_pop * self.size_pop.value()
            + w.joint_len_recency * self.len_rec.value()
            + self.geo.as_ref().map_or(0.0, |g| w.geo * g.value())
    }

    fn delta(&self, c: &Contribution) -> f64 {
        let w = &self.weights;
        w.popularity_histogram * self.pop.delta(&c.pop)
            + w.candidate_size * self.size.delta(c.size)
            + w.history_length * self.len.delta(c.len)
            + w.mean_popularity * self.popm.delta(c.popm)
            + w.joint_size_pop * self.size_pop.delta(&c.size_pop)
            + w.joint_len_recency * self.len_rec.delta(&c.len_rec)
            + self.geo.as_ref().map_or(0.0, |g| w.geo * g.delta(c.geo))
    }

    fn add(&mut self, c: &Contribution) {
        self.pop.add(&c.pop);
        self.size_pop.add(&c.size_pop);
        self.len_rec.add(&c.len_rec);
        self.size.add(c.size);
        self.len.add(c.len);
        self.popm.add(c.popm);
        if let Some(g) = self.geo.as_mut() {
            g.add(c.geo);
        }
    }
}

/// `J_n` of a selection for a budget of `n` episodes.
pub fn selection_objective(
    selected: &[&EpisodeStats],
    reference: &ReferenceProfile,
    n: usize,
    weights: &SelectionWeights,
) -> f64 {
    let (mut obj, contributions) = Objective::new(reference, selected, n, *weights);
    for c in &contributions {
        obj.add(c);
    }
    obj.value()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// Episode ids in the order they were added.
    pub selected: Vec<String>,
    pub objective: f64,
    /// Objective after each addition, for the winning restart.
    pub objective_trace: Vec<f64>,
    pub restart_objectives: Vec<f64>,
    pub best_restart: usize,
}

/// Forward greedy selection of `n` episodes.
///
/// Each step adds the pool element with the lowest resulting objective; ties
/// go to the element met first in that restart's seeded shuffle of the pool.
/// The best restart wins (lowest objective, then lowest restart index).
pub fn greedy_select_tasks(
    pool: &[EpisodeStats],
    reference: &ReferenceProfile,
    n: usize,
    restarts: usize,
    seed: u64,
    weights: &SelectionWeights,
) -> Result<SelectionResult, EnvError> {
    if pool.len() < n || n == 0 {
        return Err(EnvError::PoolTooSmall { pool: pool.len(), n });
    }
    let refs: Vec<&EpisodeStats> = pool.iter().collect();
    let runs: Vec<(Vec<usize>, Vec<f64>)> = (0..restarts.max(1))
        .into_par_iter()
        .map(|r| {
            let (mut obj, contributions) = Objective::new(reference, &refs, n, *weights);
            let mut order: Vec<usize> = (0..pool.len()).collect();
            order.shuffle(&mut rng::stream(seed, &format!("greedy-restart/{r}")));
            let mut taken = vec![false; pool.len()];
            let mut chosen = Vec::with_capacity(n);
            let mut trace = Vec::with_capacity(n);
            for _ in 0..n {
                let mut best: Option<(usize, f64)> = None;
                for &i in &order {
                    if taken[i] {
                        continue;
                    }
                    let d = obj.delta(&contributions[i]);
                    if best.is_none_or(|(_, bd)| d < bd) {
                        best = Some((i, d));
                    }
                }
                let (i, _) = best.expect("pool has unselected elements");
                taken[i] = true;
                obj.add(&contributions[i]);
                chosen.push(i);
                trace.push(obj.value());
            }
            (chosen, trace)
        })
        .collect();
    let (best_restart, _) = runs
        .iter()
        .enumerate()
        .min_by(|(ia, a), (ib, b)| {
            a.1.last()
                .unwrap()
                .total_cmp(b.1.last().unwrap())
                .then_with(|| ia.cmp(ib))
        })
        .expect("at least one restart");
    let restart_objectives = runs.iter().map(|(_, t)| *t.last().unwrap()).collect();
    let (chosen, trace) = runs.into_iter().nth(best_restart).unwrap();
    Ok(SelectionResult {
        selected: chosen.iter().map(|&i| pool[i].episode_id.clone()).collect(),
        objective: *trace.last().unwrap(),
        objective_trace: trace,
        restart_objectives,
        best_restart,
    })
}

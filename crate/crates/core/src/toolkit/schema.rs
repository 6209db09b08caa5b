use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{ToolError, ToolName};

/// Round to 6 significant digits so rendered values are stable across platforms.
pub fn normalize_number(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { 0.0 } else { x };
    }
    format!("{x:.5e}").parse().unwrap_or(x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FacetValue {
    Number(f64),
    Text(String),
}

impl FacetValue {
    pub fn text(s: impl AsRef<str>) -> FacetValue {
        FacetValue::Text(s.as_ref().to_lowercase())
    }

    pub fn number(x: f64) -> FacetValue {
        FacetValue::Number(normalize_number(x))
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            FacetValue::Text(s) => Some(s),
            FacetValue::Number(_) => None,
        }
    }

    pub fn as_number(&self) -> Option<f64> {
        match self {
            FacetValue::Number(x) => Some(*x),
            FacetValue::Text(_) => None,
        }
    }

    fn normalized(&self) -> FacetValue {
        match self {
            FacetValue::Number(x) => FacetValue::number(*x),
            FacetValue::Text(s) => FacetValue::text(s),
        }
    }
}

impl std::fmt::Display for FacetValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FacetValue::Number(x) => write!(f, "{x}"),
            FacetValue::Text(s) => f.write_str(s),
        }
    }
}

/// One evidence atom. `item` scopes the facet to a single candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Facet {
    pub key: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub item: Option<String>,
    pub value: FacetValue,
}

impl Facet {
    pub fn new(key: &str, value: FacetValue) -> Facet {
        Facet {
            key: key.to_string(),
            item: None,
            value,
        }
    }

    pub fn for_item(key: &str, item: &str, value: FacetValue) -> Facet {
        Facet {
            key: key.to_string(),
            item: Some(item.to_string()),
            value,
        }
    }
}

/// Evidence written into memory by a non-terminal tool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolOutput {
    pub produced_by: ToolName,
    pub facets: Vec<Facet>,
    pub confidence: f64,
    pub summary: String,
}

impl ToolOutput {
    /// Normalizes facet values (lowercase text, 6 significant digits) and the confidence.
    pub fn new(produced_by: ToolName, facets: Vec<Facet>, confidence: f64, summary: String) -> ToolOutput {
        ToolOutput {
            produced_by,
            facets: facets
                .into_iter()
                .map(|f| Facet {
                    value: f.value.normalized(),
                    ..f
                })
                .collect(),
            confidence: normalize_number(confidence.clamp(0.0, 1.0)),
            summary,
        }
    }

    pub fn validate(&self, expected: ToolName) -> Result<(), ToolError> {
        if self.produced_by != expected {
            return Err(ToolError::Schema(format!(
                "output produced_by {} but tool is {}",
                self.produced_by, expected
            )));
        }
        if !(0.0..=1.0).contains(&self.confidence) || !self.confidence.is_finite() {
            return Err(ToolError::Schema(format!("confidence {} outside [0,1]", self.confidence)));
        }
        if self.facets.is_empty() {
            return Err(ToolError::Schema(format!("{expected} returned no facets")));
        }
        let vocab = expected.facet_vocabulary();
        for f in &self.facets {
            if !vocab.contains(&f.key.as_str()) {
                return Err(ToolError::Schema(format!("facet key `{}` not in the {expected} vocabulary", f.key)));
            }
            if let FacetValue::Number(x) = f.value {
                if !x.is_finite() {
                    return Err(ToolError::Schema(format!("facet `{}` is not finite", f.key)));
                }
            }
        }
        Ok(())
    }

    pub fn facets_with_key<'a>(&'a self, key: &'a str) -> impl Iterator<Item = &'a Facet> + 'a {
        self.facets.iter().filter(move |f| f.key == key)
    }
}

/// Final ordering emitted by `CandidateRank`; `scores` and `explanations` follow `ranking`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankOutput {
    pub ranking: Vec<String>,
    pub scores: Vec<f64>,
    pub explanations: Vec<String>,
}

impl RankOutput {
    pub fn validate(&self, candidates: &[String]) -> Result<(), ToolError> {
        if self.ranking.len() != candidates.len()
            || self.scores.len() != self.ranking.len()
            || self.explanations.len() != self.ranking.len()
        {
            return Err(ToolError::Schema(format!(
                "ranking/scores/explanations lengths {}/{}/{} for {} candidates",
                self.ranking.len(),
                self.scores.len(),
                self.explanations.len(),
                candidates.len()
            )));
        }
        let want: BTreeSet<&str> = candidates.iter().map(String::as_str).collect();
        let got: BTreeSet<&str> = self.ranking.iter().map(String::as_str).collect();
        if want != got || got.len() != self.ranking.len() {
            return Err(ToolError::Schema("ranking is not a permutation of the candidates".into()));
        }
        if self.scores.iter().any(|s| !s.is_finite()) {
            return Err(ToolError::Schema("non-finite score".into()));
        }
        if self.scores.windows(2).any(|w| w[0] < w[1]) {
            return Err(ToolError::Schema("scores must be non-increasing along the ranking".into()));
        }
        Ok(())
    }

    pub fn rank_of(&self, item_id: &str) -> Option<usize> {
        self.ranking.iter().position(|i| i == item_id).map(|p| p + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ToolResult {
    Evidence(ToolOutput),
    Ranking(RankOutput),
}

impl ToolResult {
    pub fn validate(&self, tool: ToolName, candidates: &[String]) -> Result<(), ToolError> {
        match (self, tool.is_terminal()) {
            (ToolResult::Evidence(o), false) => o.validate(tool),
            (ToolResult::Ranking(r), true) => r.validate(candidates),
            (ToolResult::Evidence(_), true) => Err(ToolError::Schema("CandidateRank must return a ranking".into())),
            (ToolResult::Ranking(_), false) => Err(ToolError::Schema(format!("{tool} returned a ranking"))),
        }
    }

    pub fn evidence(&self) -> Option<&ToolOutput> {
        match self {
            ToolResult::Evidence(o) => Some(o),
            ToolResult::Ranking(_) => None,
        }
    }

    pub fn ranking(&self) -> Option<&RankOutput> {
        match self {
            ToolResult::Ranking(r) => Some(r),
            ToolResult::Evidence(_) => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn number_normalization() {
        assert_eq!(normalize_number(0.956_953_957), 0.956954);
        assert_eq!(normalize_number(1234567.0), 1234570.0);
        assert_eq!(normalize_number(0.0), 0.0);
        assert_eq!(FacetValue::text("Poetry"), FacetValue::Text("poetry".into()));
    }

    #[test]
    fn output_validation() {
        let ok = ToolOutput::new(
            ToolName::ItemProfile,
            vec![Facet::for_item("fit", "i1", FacetValue::text("High"))],
            0.7,
            "s".into(),
        );
        ok.validate(ToolName::ItemProfile).unwrap();
        assert!(ok.validate(ToolName::ItemSemantic).is_err());
        let empty = ToolOutput::new(ToolName::ItemProfile, vec![], 0.7, "s".into());
        assert!(empty.validate(ToolName::ItemProfile).is_err());
        let bad_key = ToolOutput::new(ToolName::ItemProfile, vec![Facet::new("zzz", FacetValue::number(1.0))], 0.7, "s".into());
        assert!(bad_key.validate(ToolName::ItemProfile).is_err());
        let mut bad_conf = ok.clone();
        bad_conf.confidence = 1.5;
        assert!(bad_conf.validate(ToolName::ItemProfile).is_err());
    }

    #[test]
    fn rank_validation() {
        let cands: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let good = RankOutput {
            ranking: vec!["b".into(), "a".into(), "c".into()],
            scores: vec![0.9, 0.5, 0.5],
            explanations: vec![String::new(); 3],
        };
        good.validate(&cands).unwrap();
        assert_eq!(good.rank_of("c"), Some(3));
        let dup = RankOutput {
            ranking: vec!["b".into(), "b".into(), "c".into()],
            ..good.clone()
        };
        assert!(dup.validate(&cands).is_err());
        let unsorted = RankOutput {
            scores: vec![0.1, 0.5, 0.5],
            ..good
        };
        assert!(unsorted.validate(&cands).is_err());
    }

    #[test]
    fn result_serialization_is_tagged() {
        let r = ToolResult::Evidence(ToolOutput::new(
            ToolName::LongTermPreference,
            vec![Facet::new("top_category", FacetValue::text("poetry"))],
            1.0,
            "x".into(),
        ));
        let s = serde_json::to_string(&r).unwrap();
        assert!(s.starts_with("{\"kind\":\"evidence\""), "{s}");
        let back: ToolResult = serde_json::from_str(&s).unwrap();
        assert_eq!(back, r);
    }
}

//! Provider ranking.
//!
//! Preferences of the requesting user or group win outright. Providers without a preference
//! are ordered by a weighted score over the candidate set:
//!
//! `w_sla * sla_norm + w_avail * availability + w_lat * (1 - latency_norm) + w_data * data_locality`
//!
//! where `sla_norm` and `latency_norm` are min-max normalized across the candidates.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::resource::ResourceVector;
use crate::text::{MapReader, Node, SyntaxError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RankerError {
    #[error("cannot normalize an empty list")]
    EmptyInput,
    #[error("no candidate providers")]
    EmptyCandidates,
    #[error("provider `{0}` appears twice among the candidates")]
    DuplicateCandidate(String),
    #[error("provider `{0}` appears twice in the preference list")]
    DuplicatePreference(String),
    #[error("invalid snapshot for `{provider}`: {reason}")]
    InvalidSnapshot { provider: String, reason: String },
    #[error("invalid ranker weights: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderSnapshot {
    pub provider_id: String,
    pub sla_rank: f64,
    pub availability: f64,
    pub latency_ms: f64,
    pub free_capacity: ResourceVector,
    pub data_locality: f64,
}

impl ProviderSnapshot {
    pub fn check(&self) -> Result<(), RankerError> {
        let bad = |reason: &str| RankerError::InvalidSnapshot {
            provider: self.provider_id.clone(),
            reason: reason.to_owned(),
        };
        if !(self.sla_rank.is_finite() && self.sla_rank >= 0.0) {
            return Err(bad("sla_rank must be a non-negative number"));
        }
        if !(0.0..=1.0).contains(&self.availability) {
            return Err(bad("availability must lie in [0, 1]"));
        }
        if !(self.latency_ms.is_finite() && self.latency_ms >= 0.0) {
            return Err(bad("latency_ms must be a non-negative number"));
        }
        if !(0.0..=1.0).contains(&self.data_locality) {
            return Err(bad("data_locality must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankerConfig {
    pub w_sla: f64,
    pub w_avail: f64,
    pub w_lat: f64,
    pub w_data: f64,
}

impl Default for RankerConfig {
    fn default() -> Self {
        Self { w_sla: 1.0, w_avail: 1.0, w_lat: 1.0, w_data: 1.0 }
    }
}

impl RankerConfig {
    pub fn new(w_sla: f64, w_avail: f64, w_lat: f64, w_data: f64) -> Result<Self, RankerError> {
        let c = Self { w_sla, w_avail, w_lat, w_data };
        c.check()?;
        Ok(c)
    }

    pub fn check(&self) -> Result<(), RankerError> {
        let w = [self.w_sla, self.w_avail, self.w_lat, self.w_data];
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(RankerError::InvalidConfig("weights must be non-negative".into()));
        }
        if w.iter().sum::<f64>() <= 0.0 {
            return Err(RankerError::InvalidConfig("weights must not all be zero".into()));
        }
        Ok(())
    }
}

/// Ordered provider preferences for one user or group.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceList(Vec<String>);

impl PreferenceList {
    pub fn new(providers: Vec<String>) -> Result<Self, RankerError> {
        let mut seen = BTreeSet::new();
        for p in &providers {
            if !seen.insert(p) {
                return Err(RankerError::DuplicatePreference(p.clone()));
            }
        }
        Ok(Self(providers))
    }

    pub fn providers(&self) -> &[String] {
        &self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Preference lists keyed by user or group name. A user's own list takes precedence over
/// any of its groups' lists.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PreferenceBook {
    pub scopes: BTreeMap<String, PreferenceList>,
}

impl PreferenceBook {
    /// Picks the user's list, else the first (by name) of the caller's groups that has one.
    pub fn resolve<'a, I>(&self, user: &str, groups: I) -> Option<&PreferenceList>
    where
        I: IntoIterator<Item = &'a String>,
    {
        if let Some(p) = self.scopes.get(user) {
            return Some(p);
        }
        let mut groups: Vec<&String> = groups.into_iter().collect();
        groups.sort();
        groups.into_iter().find_map(|g| self.scopes.get(g))
    }
}

/// Min-max normalization; an all-equal list maps to all ones.
pub fn normalize(values: &[f64]) -> Result<Vec<f64>, RankerError> {
    let (min, max) = values
        .iter()
        .fold(None, |acc: Option<(f64, f64)>, &v| match acc {
            None => Some((v, v)),
            Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
        })
        .ok_or(RankerError::EmptyInput)?;
    if max == min {
        return Ok(vec![1.0; values.len()]);
    }
    Ok(values.iter().map(|v| (v - min) / (max - min)).collect())
}

/// Candidate-set-relative terms of one provider.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizedTerms {
    pub sla_norm: f64,
    pub latency_norm: f64,
}

pub fn score(snapshot: &ProviderSnapshot, terms: NormalizedTerms, config: &RankerConfig) -> f64 {
    config.w_sla * terms.sla_norm
        + config.w_avail * snapshot.availability
        + config.w_lat * (1.0 - terms.latency_norm)
        + config.w_data * snapshot.data_locality
}

/// Scores every candidate against the others, in input order.
pub fn score_all(candidates: &[ProviderSnapshot], config: &RankerConfig) -> Result<Vec<f64>, RankerError> {
    let sla = normalize(&candidates.iter().map(|c| c.sla_rank).collect::<Vec<_>>())
        .map_err(|_| RankerError::EmptyCandidates)?;
    let lat = normalize(&candidates.iter().map(|c| c.latency_ms).collect::<Vec<_>>())
        .map_err(|_| RankerError::EmptyCandidates)?;
    Ok(candidates
        .iter()
        .enumerate()
        .map(|(i, c)| score(c, NormalizedTerms { sla_norm: sla[i], latency_norm: lat[i] }, config))
        .collect())
}

/// Orders candidates: preferred providers first in preference order, then by descending score
/// with provider id as the tie-break.
pub fn rank_providers(
    candidates: &[ProviderSnapshot],
    config: &RankerConfig,
    prefs: Option<&PreferenceList>,
) -> Result<Vec<String>, RankerError> {
    Ok(rank_with_scores(candidates, config, prefs)?.into_iter().map(|(id, _)| id).collect())
}

/// Like [`rank_providers`] but keeps each provider's score alongside its id.
pub fn rank_with_scores(
    candidates: &[ProviderSnapshot],
    config: &RankerConfig,
    prefs: Option<&PreferenceList>,
) -> Result<Vec<(String, f64)>, RankerError> {
    if candidates.is_empty() {
        return Err(RankerError::EmptyCandidates);
    }
    config.check()?;
    let mut ids = BTreeSet::new();
    for c in candidates {
        c.check()?;
        if !ids.insert(c.provider_id.as_str()) {
            return Err(RankerError::DuplicateCandidate(c.provider_id.clone()));
        }
    }
    let scores = score_all(candidates, config)?;
    let scored: BTreeMap<&str, f64> =
        candidates.iter().zip(&scores).map(|(c, s)| (c.provider_id.as_str(), *s)).collect();

    let mut out = Vec::with_capacity(candidates.len());
    if let Some(prefs) = prefs {
        for p in prefs.providers() {
            if let Some(&s) = scored.get(p.as_str()) {
                out.push((p.clone(), s));
            }
        }
    }
    let mut rest: Vec<(&str, f64)> =
        scored.iter().filter(|(id, _)| !out.iter().any(|(o, _)| o == *id)).map(|(id, s)| (*id, *s)).collect();
    rest.sort_by(|a, b| match b.1.total_cmp(&a.1) {
        Ordering::Equal => a.0.cmp(b.0),
        o => o,
    });
    out.extend(rest.into_iter().map(|(id, s)| (id.to_owned(), s)));
    Ok(out)
}

/// Candidates and an optional preference list read from a snapshot file:
///
/// ```text
/// providers:
///   site-a: { sla_rank: 0.9, availability: 0.99, latency_ms: 12, data_locality: 0, cpus: 16, mem_mb: 32768, disk_gb: 500 }
///   site-b: { sla_rank: 0.7, availability: 0.95, latency_ms: 30 }
/// prefs: [site-b]
/// ```
///
/// `data_locality` and the free-capacity keys default to zero.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SnapshotFile {
    pub candidates: Vec<ProviderSnapshot>,
    pub prefs: Option<PreferenceList>,
}

pub fn parse_snapshot(text: &str) -> Result<SnapshotFile, SyntaxError> {
    let root = crate::text::parse(text)?;
    let top = MapReader::new(&root, &["providers", "prefs"])?;
    let mut candidates = Vec::new();
    for e in top.require("providers")?.as_map()? {
        let m = MapReader::new(
            &e.node,
            &["sla_rank", "availability", "latency_ms", "data_locality", "cpus", "mem_mb", "disk_gb"],
        )?;
        let f = |k: &str| m.require(k).and_then(Node::as_f64);
        let u = |k: &str| m.get(k).map(Node::as_u64).transpose().map(Option::unwrap_or_default);
        let snap = ProviderSnapshot {
            provider_id: e.key.clone(),
            sla_rank: f("sla_rank")?,
            availability: f("availability")?,
            latency_ms: f("latency_ms")?,
            free_capacity: ResourceVector::new(u("cpus")?, u("mem_mb")?, u("disk_gb")?),
            data_locality: m.get("data_locality").map(Node::as_f64).transpose()?.unwrap_or(0.0),
        };
        snap.check().map_err(|err| SyntaxError::new(e.node.line, err.to_string()))?;
        candidates.push(snap);
    }
    let prefs = match top.get("prefs") {
        Some(n) => Some(PreferenceList::new(n.as_str_list()?).map_err(|e| SyntaxError::new(n.line, e.to_string()))?),
        None => None,
    };
    Ok(SnapshotFile { candidates, prefs })
}

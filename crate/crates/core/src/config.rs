//! `key = value` configuration shared by the ranker, site schedulers, elasticity managers and
//! the policy store.
//!
//! ```text
//! # ranker
//! w_sla = 1.0
//! w_data = 2.0
//! prefs.alice = [site-b, site-a]
//! # scheduler
//! half_life_s = 3600
//! backfill = true
//! weights.alice = 2
//! quota.physics = 16,32768,1000
//! # elasticity
//! t_idle_s = 120
//! boot_delay_s = 30
//! # policy
//! permit physics site-a
//! ```

use thiserror::Error;

use crate::elasticity::ElasticPolicy;
use crate::iam::{self, PolicyRule};
use crate::ranker::{PreferenceBook, PreferenceList, RankerConfig};
use crate::resource::ResourceVector;
use crate::scheduler::SchedulerConfig;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("config line {line}: {message}")]
pub struct ConfigError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct OrchConfig {
    pub ranker: RankerConfig,
    pub prefs: PreferenceBook,
    pub scheduler: SchedulerConfig,
    /// Site-wide idle timeout and boot delay; `min_nodes`/`max_nodes` clamp every cluster.
    pub elastic: ElasticPolicy,
    pub policy: Vec<PolicyRule>,
}

impl OrchConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = OrchConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let err = |message: String| ConfigError { line, message };
            if content.starts_with("permit ") || content.starts_with("deny ") {
                cfg.policy.push(iam::parse_policy_line(content).map_err(err)?);
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| err(format!("expected `key = value`, got `{content}`")))?;
            cfg.apply(key, value).map_err(err)?;
        }
        cfg.ranker.check().map_err(|e| ConfigError { line: 0, message: e.to_string() })?;
        if cfg.elastic.min_nodes > cfg.elastic.max_nodes {
            return Err(ConfigError { line: 0, message: "min_nodes exceeds max_nodes".into() });
        }
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<(), String> {
        match key {
            "w_sla" => self.ranker.w_sla = weight(value)?,
            "w_avail" => self.ranker.w_avail = weight(value)?,
            "w_lat" => self.ranker.w_lat = weight(value)?,
            "w_data" => self.ranker.w_data = weight(value)?,
            "half_life_s" => {
                let h = decimal(value)?;
                if h <= 0.0 {
                    return Err("half_life_s must be positive".into());
                }
                self.scheduler.half_life_s = h;
            }
            "backfill" => {
                self.scheduler.backfill = match value {
                    "true" => true,
                    "false" => false,
                    _ => return Err(format!("backfill must be true or false, got `{value}`")),
                }
            }
            "t_idle_s" => self.elastic.t_idle_s = integer(value)?,
            "boot_delay_s" => self.elastic.boot_delay_s = integer(value)?,
            "min_nodes" => self.elastic.min_nodes = small(value)?,
            "max_nodes" => self.elastic.max_nodes = small(value)?,
            _ => {
                if let Some(scope) = key.strip_prefix("prefs.") {
                    let list = PreferenceList::new(list(value)?).map_err(|e| e.to_string())?;
                    self.prefs.scopes.insert(scope.to_owned(), list);
                } else if let Some(user) = key.strip_prefix("weights.") {
                    let w = decimal(value)?;
                    if w <= 0.0 {
                        return Err(format!("weight for `{user}` must be positive"));
                    }
                    self.scheduler.weights.insert(user.to_owned(), w);
                } else if let Some(group) = key.strip_prefix("quota.") {
                    self.scheduler.quotas.insert(group.to_owned(), resources(value)?);
                } else {
                    return Err(format!("unknown key `{key}`"));
                }
            }
        }
        Ok(())
    }
}

fn decimal(v: &str) -> Result<f64, String> {
    match v.parse::<f64>() {
        Ok(x) if x.is_finite() => Ok(x),
        _ => Err(format!("expected a decimal, got `{v}`")),
    }
}

fn weight(v: &str) -> Result<f64, String> {
    let w = decimal(v)?;
    if w < 0.0 {
        return Err(format!("weights must be non-negative, got `{v}`"));
    }
    Ok(w)
}

fn integer(v: &str) -> Result<u64, String> {
    v.parse().map_err(|_| format!("expected a non-negative integer, got `{v}`"))
}

fn small(v: &str) -> Result<u32, String> {
    v.parse().map_err(|_| format!("expected a non-negative integer, got `{v}`"))
}

fn list(v: &str) -> Result<Vec<String>, String> {
    let inner = v
        .strip_prefix('[')
        .and_then(|s| s.strip_suffix(']'))
        .ok_or_else(|| format!("expected `[a, b, ...]`, got `{v}`"))?;
    Ok(inner.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::to_owned).collect())
}

/// `cpus,mem_mb,disk_gb`
pub fn resources(v: &str) -> Result<ResourceVector, String> {
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    match parts[..] {
        [c, m, d] => Ok(ResourceVector::new(integer(c)?, integer(m)?, integer(d)?)),
        _ => Err(format!("expected `cpus,mem_mb,disk_gb`, got `{v}`")),
    }
}

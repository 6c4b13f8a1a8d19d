//! Opaque bearer tokens, group-to-provider policy and credential translation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Group whose members may act on any deployment.
pub const ADMIN_GROUP: &str = "admin";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IamError {
    #[error("unknown token")]
    Unknown,
    #[error("token expired")]
    Expired,
    #[error("token revoked")]
    Revoked,
    #[error("token lifetime must be positive")]
    InvalidTtl,
    #[error("a rule for group `{group}` and provider `{provider}` already exists")]
    DuplicateRule { group: String, provider: String },
    #[error("policy line {line}: {message}")]
    PolicySyntax { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub token_id: String,
    pub subject: String,
    pub groups: BTreeSet<String>,
    pub issued_at: u64,
    pub expires_at: u64,
    pub revoked: bool,
}

impl TokenRecord {
    pub fn is_admin(&self) -> bool {
        self.groups.contains(ADMIN_GROUP)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyRule {
    pub group: String,
    pub provider_id: String,
    pub permit: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CredentialKind {
    SshKey,
    UserPass,
}

impl fmt::Display for CredentialKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CredentialKind::SshKey => "ssh-key",
            CredentialKind::UserPass => "user-pass",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranslatedCredential {
    pub kind: CredentialKind,
    pub subject: String,
    pub payload: String,
    pub valid_until: u64,
}

/// Token issuer and policy store. Token ids come from a seeded counter, so a replayed
/// scenario issues the same ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IamService {
    seed: u64,
    issued: u64,
    tokens: BTreeMap<String, TokenRecord>,
    rules: BTreeMap<(String, String), bool>,
}

impl IamService {
    pub fn new(seed: u64) -> Self {
        Self { seed, issued: 0, tokens: BTreeMap::new(), rules: BTreeMap::new() }
    }

    pub fn issue_token(
        &mut self,
        subject: &str,
        groups: impl IntoIterator<Item = String>,
        ttl_s: u64,
        t: u64,
    ) -> Result<TokenRecord, IamError> {
        if ttl_s == 0 {
            return Err(IamError::InvalidTtl);
        }
        let mut h = Sha256::new();
        h.update(self.seed.to_be_bytes());
        h.update(self.issued.to_be_bytes());
        self.issued += 1;
        let token_id = format!("tok-{}", &hex::encode(h.finalize())[..32]);
        let record = TokenRecord {
            token_id: token_id.clone(),
            subject: subject.to_owned(),
            groups: groups.into_iter().collect(),
            issued_at: t,
            expires_at: t + ttl_s,
            revoked: false,
        };
        self.tokens.insert(token_id, record.clone());
        Ok(record)
    }

    /// The token if it is known, not revoked, and `t` is strictly before its expiry.
    pub fn validate(&self, token_id: &str, t: u64) -> Result<TokenRecord, IamError> {
        let record = self.tokens.get(token_id).ok_or(IamError::Unknown)?;
        if record.revoked {
            return Err(IamError::Revoked);
        }
        if t >= record.expires_at {
            return Err(IamError::Expired);
        }
        Ok(record.clone())
    }

    pub fn revoke(&mut self, token_id: &str) -> Result<(), IamError> {
        self.tokens.get_mut(token_id).ok_or(IamError::Unknown)?.revoked = true;
        Ok(())
    }

    pub fn add_rule(&mut self, rule: PolicyRule) -> Result<(), IamError> {
        let key = (rule.group, rule.provider_id);
        if self.rules.contains_key(&key) {
            return Err(IamError::DuplicateRule { group: key.0, provider: key.1 });
        }
        self.rules.insert(key, rule.permit);
        Ok(())
    }

    pub fn rules(&self) -> impl Iterator<Item = PolicyRule> + '_ {
        self.rules.iter().map(|((g, p), permit)| PolicyRule {
            group: g.clone(),
            provider_id: p.clone(),
            permit: *permit,
        })
    }

    /// Default deny: true only if some group of the token has a permit rule for the provider.
    pub fn authorize(&self, token: &TokenRecord, provider_id: &str) -> bool {
        token.groups.iter().any(|g| self.rules.get(&(g.clone(), provider_id.to_owned())).copied().unwrap_or(false))
    }

    pub fn translate(
        &self,
        token: &TokenRecord,
        kind: CredentialKind,
        t: u64,
    ) -> Result<TranslatedCredential, IamError> {
        if token.revoked || self.tokens.get(&token.token_id).is_some_and(|r| r.revoked) {
            return Err(IamError::Revoked);
        }
        if t >= token.expires_at {
            return Err(IamError::Expired);
        }
        let mut h = Sha256::new();
        h.update(token.token_id.as_bytes());
        h.update([0u8]);
        h.update(kind.to_string().as_bytes());
        Ok(TranslatedCredential {
            kind,
            subject: token.subject.clone(),
            payload: hex::encode(h.finalize()),
            valid_until: token.expires_at,
        })
    }
}

/// Parses policy lines of the form `permit <group> <provider>` (or `deny ...`).
pub fn parse_policy(text: &str) -> Result<Vec<PolicyRule>, IamError> {
    let mut rules = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        rules.push(parse_policy_line(line).map_err(|message| IamError::PolicySyntax { line: i + 1, message })?);
    }
    Ok(rules)
}

pub(crate) fn parse_policy_line(line: &str) -> Result<PolicyRule, String> {
    let parts: Vec<&str> = line.split_whitespace().collect();
    let permit = match parts.first() {
        Some(&"permit") => true,
        Some(&"deny") => false,
        _ => return Err(format!("expected `permit <group> <provider>`, got `{line}`")),
    };
    match parts[1..] {
        [group, provider] => Ok(PolicyRule { group: group.to_owned(), provider_id: provider.to_owned(), permit }),
        _ => Err(format!("expected `permit <group> <provider>`, got `{line}`")),
    }
}

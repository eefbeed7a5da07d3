use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid identifier {0:?}: expected 1-64 chars of [A-Za-z0-9_.:-]")]
pub struct InvalidId(pub String);

/// Identifier for tasks, providers, queries, labels and ledger accounts.
///
/// The character set is restricted so identifiers can be embedded in the
/// canonical serialization without escaping.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Id(String);

impl Id {
    pub fn new(s: impl Into<String>) -> Result<Self, InvalidId> {
        let s = s.into();
        let ok = !s.is_empty()
            && s.len() <= 64
            && s
                .bytes()
                .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'.' | b':' | b'-'));
        if ok {
            Ok(Id(s))
        } else {
            Err(InvalidId(s))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl AsRef<str> for Id {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for Id {
    type Error = InvalidId;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        Id::new(s)
    }
}

impl TryFrom<&str> for Id {
    type Error = InvalidId;
    fn try_from(s: &str) -> Result<Self, Self::Error> {
        Id::new(s)
    }
}

impl From<Id> for String {
    fn from(id: Id) -> String {
        id.0
    }
}

impl fmt::Display for Id {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Builds an [`Id`] from a literal known to be valid. Panics otherwise.
pub fn id(s: &str) -> Id {
    Id::new(s).expect("valid identifier literal")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accepts_plain_and_rejects_specials() {
        assert!(Id::new("p-01.a:b_c").is_ok());
        assert!(Id::new("").is_err());
        assert!(Id::new("has space").is_err());
        assert!(Id::new("quote\"").is_err());
        assert!(Id::new("x".repeat(65)).is_err());
    }

    #[test]
    fn serde_rejects_invalid() {
        let ok: Id = serde_json::from_str("\"upset\"").unwrap();
        assert_eq!(ok.as_str(), "upset");
        assert!(serde_json::from_str::<Id>("\"a b\"").is_err());
    }
}

//! Domain types shared by every stage of the harvest.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::phash::PerceptualHash;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("class name must be a non-empty lowercase query phrase, got {0:?}")]
    BadClassName(String),
    #[error("class id must be non-empty")]
    EmptyClassId,
    #[error("target count must be at least 1")]
    ZeroTarget,
    #[error("invalid image id {0:?}: expected 32 lowercase hex characters")]
    BadImageId(String),
    #[error("invalid content digest {0:?}: expected 64 lowercase hex characters")]
    BadDigest(String),
    #[error("invalid origin {0:?}")]
    BadOrigin(String),
}

/// A target category of the dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptClass {
    pub class_id: String,
    /// First word of the class's first synset, used verbatim as the base query.
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synset_id: Option<String>,
    pub target_count: usize,
}

impl ConceptClass {
    pub fn new(
        class_id: impl Into<String>,
        name: impl Into<String>,
        synset_id: Option<String>,
        target_count: usize,
    ) -> Result<Self, ModelError> {
        let class = Self {
            class_id: class_id.into(),
            name: name.into(),
            synset_id,
            target_count,
        };
        class.validate()?;
        Ok(class)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.class_id.is_empty() {
            return Err(ModelError::EmptyClassId);
        }
        let name = self.name.as_str();
        let ok = !name.is_empty()
            && name.trim() == name
            && !name.chars().any(|c| c.is_uppercase() || c.is_control());
        if !ok {
            return Err(ModelError::BadClassName(self.name.clone()));
        }
        if self.target_count == 0 {
            return Err(ModelError::ZeroTarget);
        }
        Ok(())
    }
}

/// One keyword expanding a class query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Expansion {
    pub class_id: String,
    pub keyword: String,
    /// 1-based relevance order reported by the keyword service.
    pub rank: u32,
    /// Number of images this expansion shares with the base class.
    #[serde(default)]
    pub dup_count: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl Expansion {
    /// Query text sent to search engines: the class name followed by the keyword.
    pub fn query(&self, class: &ConceptClass) -> String {
        format!("{} {}", class.name, self.keyword)
    }
}

/// Which query produced an image.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Origin {
    Base,
    Expansion(String),
}

impl Origin {
    pub fn keyword(&self) -> Option<&str> {
        match self {
            Origin::Base => None,
            Origin::Expansion(k) => Some(k),
        }
    }
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::Base => f.write_str("base"),
            Origin::Expansion(k) => write!(f, "expansion:{k}"),
        }
    }
}

impl FromStr for Origin {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "base" {
            return Ok(Origin::Base);
        }
        match s.strip_prefix("expansion:") {
            Some(k) if !k.is_empty() => Ok(Origin::Expansion(k.to_string())),
            _ => Err(ModelError::BadOrigin(s.to_string())),
        }
    }
}

impl Serialize for Origin {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Origin {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Why a download was rejected.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureReason {
    Timeout,
    Network,
    HttpStatus(u16),
    NotFound,
    NonImage,
    DecodeError,
    Io,
}

impl fmt::Display for FailureReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FailureReason::Timeout => f.write_str("timeout"),
            FailureReason::Network => f.write_str("network"),
            FailureReason::HttpStatus(code) => write!(f, "http_{code}"),
            FailureReason::NotFound => f.write_str("not_found"),
            FailureReason::NonImage => f.write_str("non_image"),
            FailureReason::DecodeError => f.write_str("decode_error"),
            FailureReason::Io => f.write_str("io"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FetchStatus {
    Pending,
    Fetched,
    Failed(FailureReason),
}

fn write_hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

fn is_lower_hex(s: &str) -> bool {
    s.bytes()
        .all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
}

/// SHA-256 of the downloaded bytes.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ContentDigest(pub [u8; 32]);

impl ContentDigest {
    pub fn to_hex(&self) -> String {
        write_hex(&self.0)
    }

    /// Content-addressed image id: the first 128 bits of the digest.
    pub fn image_id(&self) -> ImageId {
        ImageId(write_hex(&self.0[..16]))
    }
}

impl fmt::Debug for ContentDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ContentDigest({})", self.to_hex())
    }
}

impl FromStr for ContentDigest {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.len() != 64 || !is_lower_hex(s) {
            return Err(ModelError::BadDigest(s.to_string()));
        }
        let mut out = [0u8; 32];
        for (i, chunk) in s.as_bytes().chunks(2).enumerate() {
            let pair = core::str::from_utf8(chunk).map_err(|_| ModelError::BadDigest(s.into()))?;
            out[i] = u8::from_str_radix(pair, 16).map_err(|_| ModelError::BadDigest(s.into()))?;
        }
        Ok(ContentDigest(out))
    }
}

impl Serialize for ContentDigest {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for ContentDigest {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// 32 lowercase hex characters identifying image content.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct ImageId(String);

impl ImageId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ImageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for ImageId {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.len() != 32 || !is_lower_hex(s) {
            return Err(ModelError::BadImageId(s.to_string()));
        }
        Ok(ImageId(s.to_string()))
    }
}

impl<'de> Deserialize<'de> for ImageId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Identifies one harvested search result: `class/origin/engine/rank`.
///
/// Distinct from [`ImageId`], which two records share when they downloaded
/// identical bytes.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RecordKey(pub String);

impl fmt::Display for RecordKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// One harvested image and where it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<ImageId>,
    pub class_id: String,
    pub origin: Origin,
    pub engine: String,
    pub result_rank: u32,
    pub url: String,
    pub fetch_status: FetchStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content_digest: Option<ContentDigest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phash: Option<PerceptualHash>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub local_path: Option<String>,
    pub label: String,
}

impl ImageRecord {
    pub fn pending(
        class: &ConceptClass,
        origin: Origin,
        engine: impl Into<String>,
        result_rank: u32,
        url: impl Into<String>,
    ) -> Self {
        Self {
            image_id: None,
            class_id: class.class_id.clone(),
            origin,
            engine: engine.into(),
            result_rank,
            url: url.into(),
            fetch_status: FetchStatus::Pending,
            content_digest: None,
            phash: None,
            local_path: None,
            label: class.name.clone(),
        }
    }

    pub fn key(&self) -> RecordKey {
        RecordKey(format!(
            "{}/{}/{}/{}",
            self.class_id, self.origin, self.engine, self.result_rank
        ))
    }

    /// True when the record satisfies the fetched-record invariant.
    pub fn is_fetched(&self) -> bool {
        self.fetch_status == FetchStatus::Fetched
            && self.image_id.is_some()
            && self.content_digest.is_some()
            && self.phash.is_some()
            && self.local_path.as_deref().is_some_and(|p| !p.is_empty())
    }

    pub fn mark_fetched(&mut self, digest: ContentDigest, phash: PerceptualHash, path: String) {
        self.image_id = Some(digest.image_id());
        self.content_digest = Some(digest);
        self.phash = Some(phash);
        self.local_path = Some(path);
        self.fetch_status = FetchStatus::Fetched;
    }

    pub fn mark_failed(&mut self, reason: FailureReason) {
        self.image_id = None;
        self.content_digest = None;
        self.phash = None;
        self.local_path = None;
        self.fetch_status = FetchStatus::Failed(reason);
    }
}

/// Embedding of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub image_id: ImageId,
    pub values: Vec<f64>,
}

impl FeatureVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

impl AsRef<[f64]> for FeatureVector {
    fn as_ref(&self) -> &[f64] {
        &self.values
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origin_round_trips_through_text() {
        for o in [
            Origin::Base,
            Origin::Expansion("dog".into()),
            Origin::Expansion("a:b".into()),
        ] {
            let s = o.to_string();
            assert_eq!(s.parse::<Origin>().unwrap(), o);
        }
        assert!("expansion:".parse::<Origin>().is_err());
        assert!("Base".parse::<Origin>().is_err());
    }

    #[test]
    fn class_name_rules() {
        assert!(ConceptClass::new("n1", "siberian husky", None, 10).is_ok());
        assert!(ConceptClass::new("n1", "Siberian husky", None, 10).is_err());
        assert!(ConceptClass::new("n1", "", None, 10).is_err());
        assert!(ConceptClass::new("n1", " desk", None, 10).is_err());
        assert_eq!(
            ConceptClass::new("n1", "desk", None, 0),
            Err(ModelError::ZeroTarget)
        );
    }

    #[test]
    fn image_id_is_truncated_digest() {
        let d = ContentDigest([0xab; 32]);
        assert_eq!(d.image_id().as_str(), "ab".repeat(16));
        assert_eq!(d.to_hex().parse::<ContentDigest>().unwrap(), d);
        assert!("AB".repeat(16).parse::<ImageId>().is_err());
    }

    #[test]
    fn fetched_invariant() {
        let class = ConceptClass::new("c", "desk", None, 1).unwrap();
        let mut r = ImageRecord::pending(&class, Origin::Base, "google", 1, "http://x/a.png");
        assert!(!r.is_fetched());
        r.mark_fetched(
            ContentDigest([1; 32]),
            PerceptualHash(7),
            "store/a.png".into(),
        );
        assert!(r.is_fetched());
        r.mark_failed(FailureReason::NonImage);
        assert!(!r.is_fetched());
        assert_eq!(r.fetch_status, FetchStatus::Failed(FailureReason::NonImage));
    }
}

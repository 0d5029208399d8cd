//! Domain types shared by every module: identifiers, request kinds and the
//! per-message trace record emitted by monitors.

use std::fmt;
use std::ops::BitXor;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("expected 64 hex characters, got {0:?}")]
    BadHex(String),
    #[error("unknown codec {0:?}")]
    UnknownCodec(String),
    #[error("malformed cid {0:?}, expected <codec>:<64 hex>")]
    BadCid(String),
    #[error("unknown request type {0:?}")]
    UnknownRequestType(String),
    #[error("unknown connection event kind {0:?}")]
    UnknownConnKind(String),
}

fn parse_digest(s: &str) -> Result<[u8; 32], ParseError> {
    let mut out = [0u8; 32];
    if s.len() != 64 {
        return Err(ParseError::BadHex(s.to_string()));
    }
    hex::decode_to_slice(s, &mut out).map_err(|_| ParseError::BadHex(s.to_string()))?;
    Ok(out)
}

/// 256-bit overlay identifier, stored big-endian.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct NodeId(pub [u8; 32]);

impl NodeId {
    pub const ZERO: NodeId = NodeId([0; 32]);

    /// Draws an identifier uniformly from `[0, 2^256)`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut bytes = [0u8; 32];
        rng.fill(&mut bytes[..]);
        NodeId(bytes)
    }

    /// Identifier derived from a public key the way the overlay does it.
    pub fn from_public_key(key: &[u8]) -> Self {
        NodeId(Sha256::digest(key).into())
    }

    /// Normalised position `id / 2^256` in `[0, 1)`.
    ///
    /// Only the top 53 bits survive the conversion, which is all an `f64`
    /// can hold; the result is never rounded up to 1.
    pub fn position(&self) -> f64 {
        let mut top = [0u8; 8];
        top.copy_from_slice(&self.0[..8]);
        let bits = u64::from_be_bytes(top) >> 11;
        bits as f64 / (1u64 << 53) as f64
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    /// Short prefix for log lines and text tables.
    pub fn short(&self) -> String {
        hex::encode(&self.0[..6])
    }
}

impl BitXor for NodeId {
    type Output = NodeId;

    fn bitxor(self, rhs: NodeId) -> NodeId {
        let mut out = [0u8; 32];
        for (o, (a, b)) in out.iter_mut().zip(self.0.iter().zip(rhs.0.iter())) {
            *o = a ^ b;
        }
        NodeId(out)
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "NodeId({})", self.short())
    }
}

impl FromStr for NodeId {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_digest(s).map(NodeId)
    }
}

impl Serialize for NodeId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for NodeId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Multicodec tag of a content identifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Codec {
    DagProtobuf,
    Raw,
    DagCbor,
    DagJson,
    GitRaw,
    EthereumTx,
    Other(u64),
}

impl Codec {
    /// Multicodec table code.
    pub fn code(&self) -> u64 {
        match self {
            Codec::DagProtobuf => 0x70,
            Codec::Raw => 0x55,
            Codec::DagCbor => 0x71,
            Codec::DagJson => 0x0129,
            Codec::GitRaw => 0x78,
            Codec::EthereumTx => 0x93,
            Codec::Other(code) => *code,
        }
    }

    pub fn from_code(code: u64) -> Codec {
        match code {
            0x70 => Codec::DagProtobuf,
            0x55 => Codec::Raw,
            0x71 => Codec::DagCbor,
            0x0129 => Codec::DagJson,
            0x78 => Codec::GitRaw,
            0x93 => Codec::EthereumTx,
            other => Codec::Other(other),
        }
    }

    /// Token used in trace files and CID text form.
    pub fn name(&self) -> String {
        match self {
            Codec::DagProtobuf => "dag-pb".into(),
            Codec::Raw => "raw".into(),
            Codec::DagCbor => "dag-cbor".into(),
            Codec::DagJson => "dag-json".into(),
            Codec::GitRaw => "git-raw".into(),
            Codec::EthereumTx => "eth-tx".into(),
            Codec::Other(code) => format!("0x{code:x}"),
        }
    }

    /// Human-facing name used in reports.
    pub fn display_name(&self) -> String {
        match self {
            Codec::DagProtobuf => "DagProtobuf".into(),
            Codec::Raw => "Raw".into(),
            Codec::DagCbor => "DagCBOR".into(),
            Codec::DagJson => "DagJSON".into(),
            Codec::GitRaw => "GitRaw".into(),
            Codec::EthereumTx => "EthereumTx".into(),
            Codec::Other(code) => format!("Other(0x{code:x})"),
        }
    }
}

impl fmt::Display for Codec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for Codec {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "dag-pb" | "DagProtobuf" => Codec::DagProtobuf,
            "raw" | "Raw" => Codec::Raw,
            "dag-cbor" | "DagCBOR" => Codec::DagCbor,
            "dag-json" | "DagJSON" => Codec::DagJson,
            "git-raw" | "GitRaw" => Codec::GitRaw,
            "eth-tx" | "EthereumTx" => Codec::EthereumTx,
            other => {
                let hex_part = other
                    .strip_prefix("0x")
                    .ok_or_else(|| ParseError::UnknownCodec(other.to_string()))?;
                let code = u64::from_str_radix(hex_part, 16)
                    .map_err(|_| ParseError::UnknownCodec(other.to_string()))?;
                Codec::from_code(code)
            }
        })
    }
}

impl Serialize for Codec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.name())
    }
}

impl<'de> Deserialize<'de> for Codec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Content identifier: codec tag plus a 256-bit digest of the content.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Cid {
    pub codec: Codec,
    pub digest: [u8; 32],
}

impl Cid {
    pub fn new(codec: Codec, digest: [u8; 32]) -> Self {
        Cid { codec, digest }
    }

    /// Addresses `bytes` by their SHA-256 digest.
    pub fn hash_content(bytes: &[u8], codec: Codec) -> Self {
        Cid {
            codec,
            digest: Sha256::digest(bytes).into(),
        }
    }

    pub fn digest_hex(&self) -> String {
        hex::encode(self.digest)
    }
}

/// Free-function form of [`Cid::hash_content`].
pub fn hash_content(bytes: &[u8], codec: Codec) -> Cid {
    Cid::hash_content(bytes, codec)
}

impl fmt::Display for Cid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.codec, self.digest_hex())
    }
}

impl fmt::Debug for Cid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Cid({}:{})", self.codec, &self.digest_hex()[..12])
    }
}

impl FromStr for Cid {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (codec, digest) = s
            .rsplit_once(':')
            .ok_or_else(|| ParseError::BadCid(s.to_string()))?;
        Ok(Cid {
            codec: codec.parse()?,
            digest: parse_digest(digest)?,
        })
    }
}

impl Serialize for Cid {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Cid {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Want-list entry kinds observable at a monitor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestType {
    WantHave,
    WantBlock,
    Cancel,
}

impl RequestType {
    pub fn token(&self) -> &'static str {
        match self {
            RequestType::WantHave => "want_have",
            RequestType::WantBlock => "want_block",
            RequestType::Cancel => "cancel",
        }
    }

    /// True for the two kinds that express interest in data.
    pub fn is_want(&self) -> bool {
        !matches!(self, RequestType::Cancel)
    }
}

impl fmt::Display for RequestType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for RequestType {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "want_have" => Ok(RequestType::WantHave),
            "want_block" => Ok(RequestType::WantBlock),
            "cancel" => Ok(RequestType::Cancel),
            other => Err(ParseError::UnknownRequestType(other.to_string())),
        }
    }
}

/// Preprocessing flags attached to a trace record.
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Flags(pub u8);

impl Flags {
    /// Seen earlier by a different monitor.
    pub const INTER_MONITOR_DUP: u8 = 0b01;
    /// Periodic re-broadcast of an entry the same monitor already saw.
    pub const REBROADCAST: u8 = 0b10;

    pub fn is_dup(&self) -> bool {
        self.0 & Self::INTER_MONITOR_DUP != 0
    }

    pub fn is_rebroadcast(&self) -> bool {
        self.0 & Self::REBROADCAST != 0
    }

    pub fn is_clear(&self) -> bool {
        self.0 == 0
    }

    pub fn set(&mut self, bit: u8, on: bool) {
        if on {
            self.0 |= bit;
        } else {
            self.0 &= !bit;
        }
    }
}

/// One want-list entry as received by a monitor.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TraceRecord {
    pub timestamp_ns: u64,
    pub monitor: String,
    pub peer: NodeId,
    /// Textual endpoint, `/ip4/A.B.C.D/tcp/P`.
    pub address: String,
    pub request_type: RequestType,
    pub cid: Cid,
    pub flags: Flags,
}

impl TraceRecord {
    /// The identity used to match records across monitors and over time.
    pub fn match_key(&self) -> (NodeId, RequestType, Cid) {
        (self.peer, self.request_type, self.cid)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConnKind {
    Connect,
    Disconnect,
}

impl ConnKind {
    pub fn token(&self) -> &'static str {
        match self {
            ConnKind::Connect => "connect",
            ConnKind::Disconnect => "disconnect",
        }
    }
}

impl FromStr for ConnKind {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "connect" => Ok(ConnKind::Connect),
            "disconnect" => Ok(ConnKind::Disconnect),
            other => Err(ParseError::UnknownConnKind(other.to_string())),
        }
    }
}

/// A monitor gaining or losing a peer.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConnEvent {
    pub timestamp_ns: u64,
    pub monitor: String,
    pub peer: NodeId,
    pub kind: ConnKind,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    #[test]
    fn hashing_is_deterministic() {
        let a = hash_content(b"", Codec::Raw);
        let b = hash_content(b"", Codec::Raw);
        assert_eq!(a, b);
        // SHA-256 of the empty string.
        assert_eq!(
            a.digest_hex(),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn different_bytes_give_different_cids() {
        assert_ne!(
            hash_content(b"block one", Codec::Raw),
            hash_content(b"block two", Codec::Raw)
        );
        // Same digest but different codec is a different address.
        assert_ne!(
            hash_content(b"x", Codec::Raw),
            hash_content(b"x", Codec::DagProtobuf)
        );
    }

    #[test]
    fn thousand_random_blocks_have_distinct_digests() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut seen = HashSet::new();
        for _ in 0..1000 {
            let mut block = vec![0u8; 1024];
            rng.fill(&mut block[..]);
            seen.insert(hash_content(&block, Codec::Raw).digest);
        }
        assert_eq!(seen.len(), 1000);
    }

    #[test]
    fn cid_text_form_round_trips() {
        for codec in [
            Codec::DagProtobuf,
            Codec::Raw,
            Codec::DagCbor,
            Codec::DagJson,
            Codec::GitRaw,
            Codec::EthereumTx,
            Codec::Other(0x1234),
        ] {
            let cid = Cid::new(codec, [0xff; 32]);
            let text = cid.to_string();
            assert_eq!(text.parse::<Cid>().unwrap(), cid, "{text}");
        }
        assert!("raw:abc".parse::<Cid>().is_err());
        assert!("nonsense".parse::<Cid>().is_err());
    }

    #[test]
    fn position_stays_below_one() {
        assert_eq!(NodeId::ZERO.position(), 0.0);
        let max = NodeId([0xff; 32]);
        assert!(max.position() < 1.0);
        let mut half = [0u8; 32];
        half[0] = 0x80;
        assert_eq!(NodeId(half).position(), 0.5);
    }

    #[test]
    fn xor_with_fixed_operand_is_a_bijection() {
        // For fixed x and distance j, y = x ^ j is the unique solution.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = NodeId::random(&mut rng);
        let j = NodeId::random(&mut rng);
        let y = x ^ j;
        assert_eq!(x ^ y, j);
        assert_eq!(y ^ j, x);
        // On a single byte the full map is a permutation.
        let xb = x.0[0];
        let images: HashSet<u8> = (0..=255u8).map(|yb| xb ^ yb).collect();
        assert_eq!(images.len(), 256);
    }

    #[test]
    fn flags_bits() {
        let mut f = Flags::default();
        assert!(f.is_clear());
        f.set(Flags::REBROADCAST, true);
        assert!(f.is_rebroadcast() && !f.is_dup());
        f.set(Flags::INTER_MONITOR_DUP, true);
        assert_eq!(f.0, 3);
        f.set(Flags::REBROADCAST, false);
        assert_eq!(f.0, 1);
    }
}

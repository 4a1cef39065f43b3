//! Container format shared by dataset caches, checkpoints and sample files.
//!
//! ```text
//! <MAGIC>\n
//! version=1\n
//! key=value\n        (zero or more, `values=<n>` is mandatory)
//! \n                 (blank line closes the header)
//! <n little-endian f64 values>
//! <FNV-1a 64 of the value blob, little-endian>
//! ```

use std::fmt::Display;
use std::str::FromStr;

use crate::error::FormatError;

pub const VERSION: u32 = 1;

/// Headers longer than this are rejected before any parsing happens.
pub const MAX_HEADER_BYTES: usize = 64 * 1024;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Ordered key/value header. Keys are unique.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Header {
    magic: &'static str,
    fields: Vec<(String, String)>,
}

impl Header {
    pub fn new(magic: &'static str) -> Self {
        Self {
            magic,
            fields: Vec::new(),
        }
    }

    pub fn magic(&self) -> &'static str {
        self.magic
    }

    /// Appends a field, replacing an existing one with the same key.
    ///
    /// Panics if the key or value would break the line structure; callers only
    /// pass internally generated keys.
    pub fn set(&mut self, key: &str, value: impl Display) -> &mut Self {
        let value = value.to_string();
        assert!(valid_key(key), "invalid header key {key:?}");
        assert!(!value.contains('\n'), "header value contains a newline");
        match self.fields.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.fields.push((key.to_string(), value)),
        }
        self
    }

    pub fn fields(&self) -> impl Iterator<Item = (&str, &str)> {
        self.fields.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn get(&self, key: &str) -> Result<&str, FormatError> {
        self.fields
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| FormatError::MissingField(key.to_string()))
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T, FormatError> {
        let raw = self.get(key)?;
        raw.parse().map_err(|_| FormatError::InvalidField {
            key: key.to_string(),
            value: raw.to_string(),
        })
    }

    /// Parses a comma-separated list; the empty string is the empty list.
    pub fn parse_list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, FormatError> {
        let raw = self.get(key)?;
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|s| {
                s.parse().map_err(|_| FormatError::InvalidField {
                    key: key.to_string(),
                    value: raw.to_string(),
                })
            })
            .collect()
    }
}

fn valid_key(key: &str) -> bool {
    !key.is_empty()
        && key
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'.')
}

pub fn join_list<T: Display>(items: &[T]) -> String {
    items
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

/// Serializes a header and value blob. The `values` field is written by this
/// function and must not be set by the caller.
pub fn encode(header: &Header, values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(256 + values.len() * 8 + 8);
    out.extend_from_slice(header.magic.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(format!("version={VERSION}\n").as_bytes());
    for (k, v) in &header.fields {
        debug_assert_ne!(k, "values");
        out.extend_from_slice(format!("{k}={v}\n").as_bytes());
    }
    out.extend_from_slice(format!("values={}\n\n", values.len()).as_bytes());
    let blob_start = out.len();
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let checksum = fnv1a64(&out[blob_start..]);
    out.extend_from_slice(&checksum.to_le_bytes());
    out
}

/// Parses a container, verifying magic, version, length and checksum before
/// any value is materialized.
pub fn decode(bytes: &[u8], magic: &'static str) -> Result<(Header, Vec<f64>), FormatError> {
    let search = &bytes[..bytes.len().min(MAX_HEADER_BYTES)];
    let end = search
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| {
            if bytes.len() > MAX_HEADER_BYTES {
                FormatError::Malformed(format!("header exceeds {MAX_HEADER_BYTES} bytes"))
            } else {
                FormatError::Malformed("unterminated header".into())
            }
        })?;
    let text = std::str::from_utf8(&bytes[..end])
        .map_err(|_| FormatError::Malformed("header is not UTF-8".into()))?;
    let mut lines = text.split('\n');

    let found = lines.next().unwrap_or_default();
    if found != magic {
        return Err(FormatError::BadMagic {
            expected: magic,
            found: found.chars().take(32).collect(),
        });
    }

    let version_line = lines
        .next()
        .ok_or_else(|| FormatError::MissingField("version".into()))?;
    let version = version_line
        .strip_prefix("version=")
        .ok_or_else(|| FormatError::MissingField("version".into()))?;
    let version: u32 = version.parse().map_err(|_| FormatError::InvalidField {
        key: "version".into(),
        value: version.into(),
    })?;
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }

    let mut header = Header::new(magic);
    let mut count = None;
    for line in lines {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| FormatError::Malformed(format!("line without `=`: {line:?}")))?;
        if !valid_key(k) {
            return Err(FormatError::Malformed(format!("invalid key {k:?}")));
        }
        if k == "values" {
            if count.is_some() {
                return Err(FormatError::Malformed("duplicate key \"values\"".into()));
            }
            count = Some(v.parse::<usize>().map_err(|_| FormatError::InvalidField {
                key: "values".into(),
                value: v.into(),
            })?);
            continue;
        }
        if header.fields.iter().any(|(existing, _)| existing == k) {
            return Err(FormatError::Malformed(format!("duplicate key {k:?}")));
        }
        header.fields.push((k.to_string(), v.to_string()));
    }
    let count = count.ok_or_else(|| FormatError::MissingField("values".into()))?;

    let body = &bytes[end + 2..];
    let expected_len = count
        .checked_mul(8)
        .and_then(|n| n.checked_add(8))
        .ok_or_else(|| FormatError::InvalidField {
            key: "values".into(),
            value: count.to_string(),
        })?;
    if body.len() != expected_len {
        return Err(FormatError::Checksum(format!(
            "body is {} bytes, header declares {} values ({} bytes with checksum)",
            body.len(),
            count,
            expected_len
        )));
    }
    let (blob, tail) = body.split_at(count * 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8-byte checksum"));
    let computed = fnv1a64(blob);
    if stored != computed {
        return Err(FormatError::Checksum(format!(
            "stored {stored:#018x}, computed {computed:#018x}"
        )));
    }
    let values = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok((header, values))
}

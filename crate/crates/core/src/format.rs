//! Format plugins: how a blob decomposes into items and how keys are read
//! from an item.

use std::borrow::Cow;
use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use percent_encoding::{percent_decode_str, NON_ALPHANUMERIC};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum FormatError {
    #[error("unknown format: {0}")]
    UnknownFormat(String),
    #[error("unknown identifier {identifier:?} for format {format}")]
    UnknownIdentifier { format: String, identifier: String },
    #[error("item {item} has no field {identifier:?}")]
    MissingField { item: usize, identifier: String },
    #[error("field {identifier:?} of item {item} is not numeric")]
    NotNumeric { item: usize, identifier: String },
    #[error("invalid blob: {0}")]
    Invalid(String),
}

/// A blob format.
///
/// Implementations must guarantee that concatenating the items returned by
/// [`Format::items`] reproduces the blob byte for byte.
pub trait Format: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;

    fn items<'a>(&self, blob: &'a [u8]) -> Result<Vec<&'a [u8]>, FormatError>;

    /// Raw bytes of the field named by `identifier`, or `None` if the item
    /// has no such field.
    fn field<'a>(&self, item: &'a [u8], identifier: &str) -> Result<Option<&'a [u8]>, FormatError>;

    /// The item with its trailing delimiter, so it can be followed by another.
    fn terminated<'a>(&self, item: &'a [u8]) -> Cow<'a, [u8]>;
}

/// Newline-delimited records with optional field splitting.
#[derive(Debug, Clone)]
pub struct LineFormat {
    name: String,
    /// `None` splits fields on runs of ASCII whitespace.
    separator: Option<u8>,
    aliases: BTreeMap<String, usize>,
}

impl LineFormat {
    pub fn new(name: &str, separator: Option<u8>) -> Self {
        LineFormat {
            name: name.to_string(),
            separator,
            aliases: BTreeMap::new(),
        }
    }

    pub fn with_alias(mut self, alias: &str, column: usize) -> Self {
        self.aliases.insert(alias.to_string(), column);
        self
    }

    /// `new_line`: whole lines, whitespace-separated fields, with the
    /// BED-style column names `chrom`, `start_position` and `end_position`.
    pub fn new_line() -> Self {
        LineFormat::new("new_line", None)
            .with_alias("chrom", 0)
            .with_alias("start_position", 1)
            .with_alias("end_position", 2)
    }

    /// `tsv`: tab-separated columns addressed by 0-based index.
    pub fn tsv() -> Self {
        LineFormat::new("tsv", Some(b'\t'))
    }

    fn column(&self, identifier: &str) -> Result<Option<usize>, FormatError> {
        if identifier == "line" {
            return Ok(None);
        }
        if let Ok(idx) = identifier.parse::<usize>() {
            return Ok(Some(idx));
        }
        self.aliases
            .get(identifier)
            .map(|c| Some(*c))
            .ok_or_else(|| FormatError::UnknownIdentifier {
                format: self.name.clone(),
                identifier: identifier.to_string(),
            })
    }
}

fn strip_newline(item: &[u8]) -> &[u8] {
    let item = item.strip_suffix(b"\n").unwrap_or(item);
    item.strip_suffix(b"\r").unwrap_or(item)
}

impl Format for LineFormat {
    fn name(&self) -> &str {
        &self.name
    }

    fn items<'a>(&self, blob: &'a [u8]) -> Result<Vec<&'a [u8]>, FormatError> {
        Ok(blob.split_inclusive(|b| *b == b'\n').collect())
    }

    fn field<'a>(&self, item: &'a [u8], identifier: &str) -> Result<Option<&'a [u8]>, FormatError> {
        let line = strip_newline(item);
        let Some(col) = self.column(identifier)? else {
            return Ok(Some(line));
        };
        let field = match self.separator {
            Some(sep) => line.split(|b| *b == sep).nth(col),
            None => line
                .split(|b| b.is_ascii_whitespace())
                .filter(|f| !f.is_empty())
                .nth(col),
        };
        Ok(field)
    }

    fn terminated<'a>(&self, item: &'a [u8]) -> Cow<'a, [u8]> {
        if item.ends_with(b"\n") {
            Cow::Borrowed(item)
        } else {
            let mut owned = item.to_vec();
            owned.push(b'\n');
            Cow::Owned(owned)
        }
    }
}

/// Name-keyed format registry.
#[derive(Debug, Clone)]
pub struct FormatRegistry {
    formats: BTreeMap<String, Arc<dyn Format>>,
}

impl Default for FormatRegistry {
    fn default() -> Self {
        let mut reg = FormatRegistry {
            formats: BTreeMap::new(),
        };
        reg.register(Arc::new(LineFormat::new_line()));
        reg.register(Arc::new(LineFormat::tsv()));
        reg
    }
}

impl FormatRegistry {
    pub fn register(&mut self, format: Arc<dyn Format>) {
        self.formats.insert(format.name().to_string(), format);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn Format>, FormatError> {
        self.formats
            .get(name)
            .cloned()
            .ok_or_else(|| FormatError::UnknownFormat(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.formats.keys().map(String::as_str)
    }
}

/// An orderable item key.
///
/// Within one operation all keys share a variant: numeric when every
/// field parses as a decimal number, byte-lexicographic otherwise.
#[derive(Debug, Clone)]
pub enum SortKey {
    Num(f64),
    Text(Vec<u8>),
}

impl PartialEq for SortKey {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for SortKey {}

impl PartialOrd for SortKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for SortKey {
    fn cmp(&self, other: &Self) -> Ordering {
        match (self, other) {
            (SortKey::Num(a), SortKey::Num(b)) => a.total_cmp(b),
            (SortKey::Text(a), SortKey::Text(b)) => a.cmp(b),
            (SortKey::Num(_), SortKey::Text(_)) => Ordering::Less,
            (SortKey::Text(_), SortKey::Num(_)) => Ordering::Greater,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum SortKeyRepr {
    Num(f64),
    Text(String),
}

impl Serialize for SortKey {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            SortKey::Num(n) => SortKeyRepr::Num(*n),
            SortKey::Text(b) => SortKeyRepr::Text(percent_encoding::percent_encode(b, NON_ALPHANUMERIC).to_string()),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for SortKey {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Ok(match SortKeyRepr::deserialize(d)? {
            SortKeyRepr::Num(n) => SortKey::Num(n),
            SortKeyRepr::Text(t) => SortKey::Text(percent_decode_str(&t).collect()),
        })
    }
}

impl fmt::Display for SortKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SortKey::Num(n) => write!(f, "{n}"),
            SortKey::Text(b) => f.write_str(&String::from_utf8_lossy(b)),
        }
    }
}

/// Parses a decimal number; rejects `inf`, `nan` and empty fields.
pub fn parse_decimal(field: &[u8]) -> Option<f64> {
    let s = std::str::from_utf8(field).ok()?;
    let first = s.bytes().next()?;
    if !(first.is_ascii_digit() || matches!(first, b'-' | b'+' | b'.')) {
        return None;
    }
    if s.bytes().any(|b| b.is_ascii_alphabetic() && b != b'e' && b != b'E') {
        return None;
    }
    s.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Extracts the key of every item, choosing numeric comparison when every
/// field is a decimal number.
pub fn extract_keys(format: &dyn Format, items: &[&[u8]], identifier: &str) -> Result<Vec<SortKey>, FormatError> {
    let fields = items
        .iter()
        .enumerate()
        .map(|(i, item)| {
            format
                .field(item, identifier)?
                .ok_or_else(|| FormatError::MissingField {
                    item: i,
                    identifier: identifier.to_string(),
                })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let numeric: Option<Vec<f64>> = fields.iter().map(|f| parse_decimal(f)).collect();
    Ok(match numeric {
        Some(nums) => nums.into_iter().map(SortKey::Num).collect(),
        None => fields.into_iter().map(|f| SortKey::Text(f.to_vec())).collect(),
    })
}

/// Numeric value of every item's field; errors on non-numeric fields.
pub fn extract_numbers(format: &dyn Format, items: &[&[u8]], identifier: &str) -> Result<Vec<f64>, FormatError> {
    items
        .iter()
        .enumerate()
        .map(|(i, item)| {
            let field = format
                .field(item, identifier)?
                .ok_or_else(|| FormatError::MissingField {
                    item: i,
                    identifier: identifier.to_string(),
                })?;
            parse_decimal(field).ok_or_else(|| FormatError::NotNumeric {
                item: i,
                identifier: identifier.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_items_concatenate_to_blob() {
        let f = LineFormat::new_line();
        for blob in [&b""[..], b"a", b"a\n", b"a\nb", b"\n\n", b"x\r\ny\n"] {
            let items = f.items(blob).unwrap();
            assert_eq!(items.concat(), blob);
        }
        assert!(f.items(b"").unwrap().is_empty());
    }

    #[test]
    fn new_line_fields_and_aliases() {
        let f = LineFormat::new_line();
        let item = b"chr1\t1200\t1300\t0.5\n";
        assert_eq!(f.field(item, "start_position").unwrap(), Some(&b"1200"[..]));
        assert_eq!(f.field(item, "3").unwrap(), Some(&b"0.5"[..]));
        assert_eq!(f.field(item, "line").unwrap(), Some(&b"chr1\t1200\t1300\t0.5"[..]));
        assert_eq!(f.field(item, "9").unwrap(), None);
        assert!(matches!(
            f.field(item, "score"),
            Err(FormatError::UnknownIdentifier { .. })
        ));
    }

    #[test]
    fn tsv_keeps_empty_columns() {
        let f = LineFormat::tsv();
        assert_eq!(f.field(b"a\t\tc\n", "1").unwrap(), Some(&b""[..]));
        assert_eq!(f.field(b"a\t\tc\n", "2").unwrap(), Some(&b"c"[..]));
    }

    #[test]
    fn key_mode_is_numeric_only_when_every_field_parses() {
        let f = LineFormat::tsv();
        let numeric = [&b"10\n"[..], b"9\n", b"-1.5\n"];
        let keys = extract_keys(&f, &numeric, "0").unwrap();
        assert!(keys[1] < keys[0] && keys[2] < keys[1]);
        let mixed = [&b"10\n"[..], b"9\n", b"x\n"];
        let keys = extract_keys(&f, &mixed, "0").unwrap();
        // lexicographic: "10" < "9"
        assert!(keys[0] < keys[1]);
        assert_eq!(parse_decimal(b"inf"), None);
        assert_eq!(parse_decimal(b"NaN"), None);
        assert_eq!(parse_decimal(b"1e3"), Some(1000.0));
        assert_eq!(parse_decimal(b""), None);
    }

    #[test]
    fn sort_key_serde_round_trip() {
        for key in [SortKey::Num(-2.5), SortKey::Text(b"a b\xff".to_vec())] {
            let json = serde_json::to_string(&key).unwrap();
            let back: SortKey = serde_json::from_str(&json).unwrap();
            assert_eq!(back, key);
        }
    }

    #[test]
    fn registry_lookup() {
        let reg = FormatRegistry::default();
        assert_eq!(reg.get("tsv").unwrap().name(), "tsv");
        assert_eq!(
            reg.get("fasta").unwrap_err(),
            FormatError::UnknownFormat("fasta".into())
        );
    }
}

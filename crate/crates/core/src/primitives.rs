//! The data primitives: split, combine, top, match, map, partition and sort.
//! `run` lives with the task executor since it needs the kernel registry and
//! the object store.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::format::{extract_keys, extract_numbers, Format, FormatError, SortKey};
use crate::pipeline::FindRule;

/// Maximum number of items sampled to pick sort pivots.
pub const PIVOT_SAMPLE_LIMIT: usize = 10_000;

/// Seed of the pivot sampler.
pub const PIVOT_SAMPLE_SEED: u64 = 0x5eed_5011;

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum PrimitiveError {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("chunk with ordinal {0} is missing")]
    MissingChunk(u32),
    #[error("chunks disagree on the chunk count")]
    InconsistentTotal,
    #[error("no chunks given")]
    NoChunks,
    #[error("map table is empty")]
    EmptyMapTable,
    #[error("key sample is empty")]
    EmptySample,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, PrimitiveError>;

/// One slice of a stage's output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chunk {
    pub ordinal: u32,
    pub total: u32,
    pub data: Vec<u8>,
}

fn chunks_from(parts: Vec<Vec<u8>>) -> Vec<Chunk> {
    let total = parts.len() as u32;
    parts
        .into_iter()
        .enumerate()
        .map(|(i, data)| Chunk {
            ordinal: i as u32,
            total,
            data,
        })
        .collect()
}

/// Byte ranges of the chunks `split` would produce.
///
/// A chunk is closed at the first item boundary at or past `split_size`
/// bytes, so no chunk exceeds `split_size` plus one item. An empty blob
/// yields a single empty range.
pub fn split_ranges(blob: &[u8], format: &dyn Format, split_size: u64) -> Result<Vec<Range<usize>>> {
    if split_size == 0 {
        return Err(PrimitiveError::InvalidArgument("split_size must be > 0".into()));
    }
    let mut ranges = Vec::new();
    let mut start = 0usize;
    let mut end = 0usize;
    for item in format.items(blob)? {
        end += item.len();
        if (end - start) as u64 >= split_size {
            ranges.push(start..end);
            start = end;
        }
    }
    if start < end || ranges.is_empty() {
        ranges.push(start..end);
    }
    Ok(ranges)
}

pub fn split(blob: &[u8], format: &dyn Format, split_size: u64) -> Result<Vec<Chunk>> {
    let ranges = split_ranges(blob, format, split_size)?;
    Ok(chunks_from(ranges.into_iter().map(|r| blob[r].to_vec()).collect()))
}

/// Checks that `chunks` hold every ordinal of one stage output exactly once
/// and returns them in ordinal order.
pub fn ordered_chunks(chunks: &[Chunk]) -> Result<Vec<&Chunk>> {
    let first = chunks.first().ok_or(PrimitiveError::NoChunks)?;
    let total = first.total;
    if chunks.iter().any(|c| c.total != total) {
        return Err(PrimitiveError::InconsistentTotal);
    }
    let mut slots: Vec<Option<&Chunk>> = vec![None; total as usize];
    for c in chunks {
        match slots.get_mut(c.ordinal as usize) {
            Some(slot) => *slot = Some(c),
            None => return Err(PrimitiveError::InconsistentTotal),
        }
    }
    slots
        .into_iter()
        .enumerate()
        .map(|(i, s)| s.ok_or(PrimitiveError::MissingChunk(i as u32)))
        .collect()
}

/// Items sorted by key, stable, each terminated.
fn sorted_blob(format: &dyn Format, items: &[&[u8]], keys: &[SortKey]) -> Vec<u8> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|a, b| keys[*a].cmp(&keys[*b]));
    let mut out = Vec::new();
    for i in order {
        out.extend_from_slice(&format.terminated(items[i]));
    }
    out
}

/// Concatenates chunks in ordinal order, or with an identifier merges their
/// items into a stable key order.
pub fn combine(chunks: &[Chunk], format: &dyn Format, identifier: Option<&str>) -> Result<Vec<u8>> {
    let ordered = ordered_chunks(chunks)?;
    let Some(identifier) = identifier else {
        return Ok(ordered.iter().flat_map(|c| c.data.iter().copied()).collect());
    };
    let mut items = Vec::new();
    for c in &ordered {
        items.extend(format.items(&c.data)?);
    }
    let keys = extract_keys(format, &items, identifier)?;
    Ok(sorted_blob(format, &items, &keys))
}

/// The `number` items with the largest keys, largest first. Among equal keys
/// the later item ranks higher.
pub fn top(blob: &[u8], format: &dyn Format, identifier: &str, number: u64) -> Result<Vec<u8>> {
    if number == 0 {
        return Err(PrimitiveError::InvalidArgument("number must be >= 1".into()));
    }
    let items = format.items(blob)?;
    let keys = extract_keys(format, &items, identifier)?;
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|a, b| keys[*a].cmp(&keys[*b]));
    let take = (number as usize).min(order.len());
    let mut out = Vec::new();
    for &i in order[order.len() - take..].iter().rev() {
        out.extend_from_slice(&format.terminated(items[i]));
    }
    Ok(out)
}

/// Sum of the numeric `identifier` field over the items of `blob`.
pub fn key_sum(blob: &[u8], format: &dyn Format, identifier: &str) -> Result<f64> {
    let items = format.items(blob)?;
    Ok(extract_numbers(format, &items, identifier)?.iter().sum())
}

/// Path of the chunk whose key sum is extremal under `find`; ties go to the
/// lexicographically smallest path.
pub fn match_chunks(chunks: &[(&str, &[u8])], format: &dyn Format, identifier: &str, find: FindRule) -> Result<String> {
    let mut best: Option<(f64, &str)> = None;
    for (path, data) in chunks {
        let sum = key_sum(data, format, identifier)?;
        let better = match best {
            None => true,
            Some((b, bp)) => {
                let ord = match find {
                    FindRule::HighestSum => sum.total_cmp(&b),
                    FindRule::LowestSum => b.total_cmp(&sum),
                };
                ord.is_gt() || (ord.is_eq() && *path < bp)
            }
        };
        if better {
            best = Some((sum, path));
        }
    }
    best.map(|(_, p)| p.to_string()).ok_or(PrimitiveError::NoChunks)
}

/// Arguments of one invocation produced by `map`.
pub type Binding = BTreeMap<String, String>;

/// Cross product of item chunks and mapped objects, ordered by chunk and then
/// by mapped path.
pub fn map(item_chunks: &[String], map_table: &[String], input_key: &str, table_key: &str) -> Result<Vec<Binding>> {
    if map_table.is_empty() {
        return Err(PrimitiveError::EmptyMapTable);
    }
    if input_key == table_key {
        return Err(PrimitiveError::InvalidArgument(
            "input_key and table_key must differ".into(),
        ));
    }
    let table: BTreeSet<&String> = map_table.iter().collect();
    let mut out = Vec::with_capacity(item_chunks.len() * table.len());
    for chunk in item_chunks {
        for entry in &table {
            let mut b = Binding::new();
            b.insert(input_key.to_string(), chunk.clone());
            b.insert(table_key.to_string(), (*entry).clone());
            out.push(b);
        }
    }
    Ok(out)
}

/// Immediate sub-directories under `prefix`, given a flat key listing.
/// Each result ends in `/`.
pub fn directories(keys: &[String], prefix: &str) -> Vec<String> {
    let mut dirs = BTreeSet::new();
    for key in keys {
        if let Some(rest) = key.strip_prefix(prefix) {
            if let Some(pos) = rest.find('/') {
                dirs.insert(format!("{prefix}{}", &rest[..=pos]));
            }
        }
    }
    dirs.into_iter().collect()
}

/// Half-open key range. `None` bounds are unbounded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyRange {
    pub lo: Option<SortKey>,
    pub hi: Option<SortKey>,
}

impl KeyRange {
    pub fn contains(&self, key: &SortKey) -> bool {
        self.lo.as_ref().is_none_or(|lo| lo <= key) && self.hi.as_ref().is_none_or(|hi| key < hi)
    }

    pub fn is_empty(&self) -> bool {
        matches!((&self.lo, &self.hi), (Some(lo), Some(hi)) if lo >= hi)
    }
}

/// The `n - 1` pivots at the `i * m / n`-th order statistics of `sorted`.
pub fn pivots(sorted: &[SortKey], n: usize) -> Vec<SortKey> {
    let m = sorted.len();
    (1..n).map(|i| sorted[i * m / n].clone()).collect()
}

/// Ranges delimited by `pivots`. The first range starts at `min`, the last
/// is unbounded above. Repeated pivots give empty ranges.
pub fn ranges_from_pivots(min: SortKey, pivots: &[SortKey]) -> Vec<KeyRange> {
    let mut lows = vec![Some(min)];
    lows.extend(pivots.iter().cloned().map(Some));
    let mut highs: Vec<Option<SortKey>> = pivots.iter().cloned().map(Some).collect();
    highs.push(None);
    lows.into_iter()
        .zip(highs)
        .map(|(lo, hi)| KeyRange { lo, hi })
        .collect()
}

/// Index of the range a key falls in, given the pivots that delimit ranges.
pub fn route(key: &SortKey, pivots: &[SortKey]) -> usize {
    pivots.partition_point(|p| p <= key)
}

/// `n` disjoint ranges covering the keys of `sample`.
pub fn partition(sample: &[u8], format: &dyn Format, identifier: &str, n: usize) -> Result<Vec<KeyRange>> {
    if n == 0 {
        return Err(PrimitiveError::InvalidArgument("n must be >= 1".into()));
    }
    let items = format.items(sample)?;
    if items.is_empty() {
        return Err(PrimitiveError::EmptySample);
    }
    let mut keys = extract_keys(format, &items, identifier)?;
    keys.sort();
    let p = pivots(&keys, n);
    Ok(ranges_from_pivots(keys[0].clone(), &p))
}

/// Indices of a seeded uniform sample of at most `limit` out of `len` items,
/// in increasing order.
pub fn sample_indices(len: usize, limit: usize, seed: u64) -> Vec<usize> {
    if len <= limit {
        return (0..len).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, len, limit).into_vec();
    idx.sort_unstable();
    idx
}

/// Number of output chunks of a sort over `len` bytes.
pub fn sort_chunk_count(len: usize, split_size: u64) -> usize {
    if split_size == 0 {
        return 1;
    }
    (len as u64).div_ceil(split_size).max(1) as usize
}

/// Pivots for sorting `keys` into `n` ranges, chosen from the seeded sample.
pub fn sort_pivots(keys: &[SortKey], n: usize) -> Vec<SortKey> {
    let mut sample: Vec<SortKey> = sample_indices(keys.len(), PIVOT_SAMPLE_LIMIT, PIVOT_SAMPLE_SEED)
        .into_iter()
        .map(|i| keys[i].clone())
        .collect();
    if sample.is_empty() {
        return Vec::new();
    }
    sample.sort();
    pivots(&sample, n)
}

/// Sorts the items of `blob` whose keys fall in range `index` of `pivots`.
pub fn sort_range(format: &dyn Format, items: &[&[u8]], keys: &[SortKey], pivots: &[SortKey], index: usize) -> Vec<u8> {
    let mut sel_items = Vec::new();
    let mut sel_keys = Vec::new();
    for (item, key) in items.iter().zip(keys) {
        if route(key, pivots) == index {
            sel_items.push(*item);
            sel_keys.push(key.clone());
        }
    }
    sorted_blob(format, &sel_items, &sel_keys)
}

/// Range-partitioned sort: chunk `i` holds the items of key range `i`,
/// sorted, so the concatenation of chunks is globally sorted.
pub fn sort(blob: &[u8], format: &dyn Format, identifier: &str, split_size: u64) -> Result<Vec<Chunk>> {
    if split_size == 0 {
        return Err(PrimitiveError::InvalidArgument("split_size must be > 0".into()));
    }
    let items = format.items(blob)?;
    let keys = extract_keys(format, &items, identifier)?;
    let n = sort_chunk_count(blob.len(), split_size);
    let piv = sort_pivots(&keys, n);
    let mut parts = vec![(Vec::new(), Vec::new()); n];
    for (item, key) in items.iter().zip(&keys) {
        let r = route(key, &piv);
        parts[r].0.push(*item);
        parts[r].1.push(key.clone());
    }
    Ok(chunks_from(
        parts
            .into_iter()
            .map(|(it, ks)| sorted_blob(format, &it, &ks))
            .collect(),
    ))
}

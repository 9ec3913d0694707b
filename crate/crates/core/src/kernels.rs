//! Task kernels invoked by `run` stages, and the affine duration model used
//! by the simulator.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum KernelError {
    #[error("unknown application: {0}")]
    UnknownApplication(String),
    #[error("kernel {kernel} failed: {detail}")]
    Failed { kernel: String, detail: String },
}

pub type Result<T> = std::result::Result<T, KernelError>;

pub type Params = BTreeMap<String, Value>;

/// What a kernel receives: one object, or named objects bound by a `map` stage.
#[derive(Debug, Clone)]
pub enum KernelInput {
    Blob(Vec<u8>),
    Bound(BTreeMap<String, Vec<u8>>),
}

impl KernelInput {
    pub fn total_bytes(&self) -> usize {
        match self {
            KernelInput::Blob(b) => b.len(),
            KernelInput::Bound(m) => m.values().map(Vec::len).sum(),
        }
    }

    fn blob(&self, kernel: &str) -> Result<&[u8]> {
        match self {
            KernelInput::Blob(b) => Ok(b),
            KernelInput::Bound(_) => Err(fail(kernel, "expects a single input object")),
        }
    }

    fn bound<'a>(&'a self, kernel: &str, name: &str) -> Result<&'a [u8]> {
        match self {
            KernelInput::Bound(m) => m
                .get(name)
                .map(Vec::as_slice)
                .ok_or_else(|| fail(kernel, &format!("no input bound to {name:?}"))),
            KernelInput::Blob(_) => Err(fail(kernel, "expects bound inputs")),
        }
    }
}

fn fail(kernel: &str, detail: &str) -> KernelError {
    KernelError::Failed {
        kernel: kernel.to_string(),
        detail: detail.to_string(),
    }
}

pub trait TaskKernel: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;

    fn run(&self, input: &KernelInput, params: &Params) -> Result<Vec<u8>>;

    /// Work measure fed to the duration model. Defaults to input bytes.
    fn work_units(&self, input: &KernelInput, _params: &Params) -> u64 {
        input.total_bytes() as u64
    }
}

#[derive(Debug, Clone, Default)]
pub struct Identity;

impl TaskKernel for Identity {
    fn name(&self) -> &str {
        "identity"
    }

    fn run(&self, input: &KernelInput, _params: &Params) -> Result<Vec<u8>> {
        Ok(input.blob(self.name())?.to_vec())
    }
}

/// Byte-level run-length coding: each run is a LEB128 length followed by the byte.
#[derive(Debug, Clone, Default)]
pub struct ToyCompress;

pub fn rle_encode(data: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() / 2 + 2);
    let mut i = 0;
    while i < data.len() {
        let b = data[i];
        let mut run = 1u64;
        while i + (run as usize) < data.len() && data[i + run as usize] == b {
            run += 1;
        }
        let mut n = run;
        loop {
            let byte = (n & 0x7f) as u8;
            n >>= 7;
            if n == 0 {
                out.push(byte);
                break;
            }
            out.push(byte | 0x80);
        }
        out.push(b);
        i += run as usize;
    }
    out
}

pub fn rle_decode(data: &[u8]) -> std::result::Result<Vec<u8>, String> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < data.len() {
        let mut run = 0u64;
        let mut shift = 0;
        loop {
            let byte = *data.get(i).ok_or("truncated run length")?;
            i += 1;
            if shift > 56 {
                return Err("run length overflow".into());
            }
            run |= u64::from(byte & 0x7f) << shift;
            shift += 7;
            if byte & 0x80 == 0 {
                break;
            }
        }
        let b = *data.get(i).ok_or("missing run byte")?;
        i += 1;
        if run == 0 {
            return Err("zero-length run".into());
        }
        out.extend(std::iter::repeat_n(b, run as usize));
    }
    Ok(out)
}

impl TaskKernel for ToyCompress {
    fn name(&self) -> &str {
        "toy_compress"
    }

    fn run(&self, input: &KernelInput, _params: &Params) -> Result<Vec<u8>> {
        Ok(rle_encode(input.blob(self.name())?))
    }
}

#[derive(Debug, Clone, Default)]
pub struct ToyDecompress;

impl TaskKernel for ToyDecompress {
    fn name(&self) -> &str {
        "toy_decompress"
    }

    fn run(&self, input: &KernelInput, _params: &Params) -> Result<Vec<u8>> {
        rle_decode(input.blob(self.name())?).map_err(|e| fail(self.name(), &e))
    }
}

fn lines(data: &[u8]) -> impl Iterator<Item = &str> {
    data.split(|b| *b == b'\n')
        .filter(|l| !l.is_empty())
        .map(|l| std::str::from_utf8(l).unwrap_or(""))
        .map(|l| l.trim_end_matches('\r'))
        .filter(|l| !l.is_empty())
}

fn parse_vector(kernel: &str, s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| fail(kernel, &format!("bad vector component {v:?}")))
        })
        .collect()
}

/// Scores `id<TAB>v1,v2,...` records, emitting `id<TAB>score` with the score
/// being the component sum.
#[derive(Debug, Clone, Default)]
pub struct ToyScore;

impl TaskKernel for ToyScore {
    fn name(&self) -> &str {
        "toy_score"
    }

    fn run(&self, input: &KernelInput, _params: &Params) -> Result<Vec<u8>> {
        let mut out = String::new();
        for line in lines(input.blob(self.name())?) {
            let (id, vec) = line
                .split_once('\t')
                .ok_or_else(|| fail(self.name(), &format!("record without tab: {line:?}")))?;
            let score: f64 = parse_vector(self.name(), vec)?.iter().sum();
            out.push_str(&format!("{id}\t{score:.4}\n"));
        }
        Ok(out.into_bytes())
    }
}

/// Brute-force nearest neighbours.
///
/// Pair mode reads test records `id<TAB>v1,...` and training records
/// `id<TAB>label<TAB>v1,...` and emits, per test record, its `k` nearest
/// training records as `test_id<TAB>distance<TAB>train_id<TAB>label`.
/// Reduce mode (`mode = "reduce"`) reads those candidate lines, keeps the
/// overall `k` nearest per test record and emits `test_id<TAB>label` by
/// majority vote, ties going to the label of the nearest candidate.
#[derive(Debug, Clone, Default)]
pub struct ToyKnn;

#[derive(Debug, Clone)]
struct Candidate {
    dist: f64,
    train_id: String,
    label: String,
}

fn knn_k(kernel: &str, params: &Params) -> Result<usize> {
    match params.get("k") {
        None => Ok(3),
        Some(v) => v
            .as_u64()
            .filter(|k| *k > 0)
            .map(|k| k as usize)
            .ok_or_else(|| fail(kernel, "k must be a positive integer")),
    }
}

fn param_str<'a>(params: &'a Params, name: &str, default: &'a str) -> &'a str {
    params.get(name).and_then(Value::as_str).unwrap_or(default)
}

fn nearest(mut c: Vec<Candidate>, k: usize) -> Vec<Candidate> {
    c.sort_by(|a, b| a.dist.total_cmp(&b.dist).then_with(|| a.train_id.cmp(&b.train_id)));
    c.truncate(k);
    c
}

impl ToyKnn {
    fn pairs(&self, input: &KernelInput, params: &Params) -> Result<Vec<u8>> {
        let name = self.name();
        let k = knn_k(name, params)?;
        let test = input.bound(name, param_str(params, "test_key", "test"))?;
        let train = input.bound(name, param_str(params, "train_key", "train"))?;
        let mut training = Vec::new();
        for line in lines(train) {
            let mut f = line.splitn(3, '\t');
            let (Some(id), Some(label), Some(vec)) = (f.next(), f.next(), f.next()) else {
                return Err(fail(name, &format!("bad training record {line:?}")));
            };
            training.push((id, label, parse_vector(name, vec)?));
        }
        let mut out = String::new();
        for line in lines(test) {
            let (id, vec) = line
                .split_once('\t')
                .ok_or_else(|| fail(name, &format!("bad test record {line:?}")))?;
            let x = parse_vector(name, vec)?;
            let mut cands = Vec::with_capacity(training.len());
            for (tid, label, y) in &training {
                if y.len() != x.len() {
                    return Err(fail(name, "vector dimensions differ"));
                }
                let dist = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                cands.push(Candidate {
                    dist,
                    train_id: tid.to_string(),
                    label: label.to_string(),
                });
            }
            for c in nearest(cands, k) {
                out.push_str(&format!("{id}\t{:.6}\t{}\t{}\n", c.dist, c.train_id, c.label));
            }
        }
        Ok(out.into_bytes())
    }

    fn reduce(&self, input: &KernelInput, params: &Params) -> Result<Vec<u8>> {
        let name = self.name();
        let k = knn_k(name, params)?;
        let mut by_test: BTreeMap<&str, Vec<Candidate>> = BTreeMap::new();
        for line in lines(input.blob(name)?) {
            let f: Vec<&str> = line.split('\t').collect();
            let [id, dist, tid, label] = f[..] else {
                return Err(fail(name, &format!("bad candidate line {line:?}")));
            };
            let dist = dist
                .parse::<f64>()
                .map_err(|_| fail(name, &format!("bad distance {dist:?}")))?;
            by_test.entry(id).or_default().push(Candidate {
                dist,
                train_id: tid.to_string(),
                label: label.to_string(),
            });
        }
        let mut out = String::new();
        for (id, cands) in by_test {
            let best = nearest(cands, k);
            let mut votes: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
            for (rank, c) in best.iter().enumerate() {
                let e = votes.entry(&c.label).or_insert((0, rank));
                e.0 += 1;
            }
            let label = votes
                .iter()
                .max_by(|a, b| a.1 .0.cmp(&b.1 .0).then_with(|| b.1 .1.cmp(&a.1 .1)))
                .map(|(l, _)| *l)
                .unwrap_or_default();
            out.push_str(&format!("{id}\t{label}\n"));
        }
        Ok(out.into_bytes())
    }
}

impl TaskKernel for ToyKnn {
    fn name(&self) -> &str {
        "toy_knn"
    }

    fn run(&self, input: &KernelInput, params: &Params) -> Result<Vec<u8>> {
        match param_str(params, "mode", "pairs") {
            "pairs" => self.pairs(input, params),
            "reduce" => self.reduce(input, params),
            other => Err(fail(self.name(), &format!("unknown mode {other:?}"))),
        }
    }

    /// Pair mode costs one unit per (test, train) pair.
    fn work_units(&self, input: &KernelInput, params: &Params) -> u64 {
        match input {
            KernelInput::Bound(m) => {
                let count = |name: &str| m.get(name).map_or(0, |b| lines(b).count() as u64);
                count(param_str(params, "test_key", "test")) * count(param_str(params, "train_key", "train"))
            }
            KernelInput::Blob(b) => b.len() as u64,
        }
    }
}

/// Name-keyed kernel registry.
#[derive(Debug, Clone)]
pub struct KernelRegistry {
    kernels: BTreeMap<String, Arc<dyn TaskKernel>>,
}

impl Default for KernelRegistry {
    fn default() -> Self {
        let mut reg = KernelRegistry {
            kernels: BTreeMap::new(),
        };
        reg.register(Arc::new(Identity));
        reg.register(Arc::new(ToyCompress));
        reg.register(Arc::new(ToyDecompress));
        reg.register(Arc::new(ToyScore));
        reg.register(Arc::new(ToyKnn));
        reg
    }
}

impl KernelRegistry {
    pub fn register(&mut self, kernel: Arc<dyn TaskKernel>) {
        self.kernels.insert(kernel.name().to_string(), kernel);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn TaskKernel>> {
        self.kernels
            .get(name)
            .cloned()
            .ok_or_else(|| KernelError::UnknownApplication(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.kernels.contains_key(name)
    }
}

/// `duration_ms = ceil(a_ms + b_ms * units)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub a_ms: f64,
    pub b_ms: f64,
}

impl Affine {
    pub fn new(a_ms: f64, b_ms: f64) -> Self {
        Affine { a_ms, b_ms }
    }

    pub fn duration_ms(&self, units: u64) -> u64 {
        ((self.a_ms + self.b_ms * units as f64).ceil() as u64).max(1)
    }
}

/// Per-kernel and per-primitive duration coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DurationModel {
    pub default: Affine,
    pub overrides: BTreeMap<String, Affine>,
}

impl Default for DurationModel {
    fn default() -> Self {
        let mut overrides = BTreeMap::new();
        overrides.insert("toy_compress".into(), Affine::new(200.0, 4e-4));
        overrides.insert("toy_score".into(), Affine::new(150.0, 3e-4));
        overrides.insert("toy_knn".into(), Affine::new(200.0, 2e-3));
        overrides.insert("sort".into(), Affine::new(150.0, 3e-4));
        DurationModel {
            default: Affine::new(100.0, 1e-4),
            overrides,
        }
    }
}

impl DurationModel {
    pub fn coefficients(&self, name: &str) -> Affine {
        self.overrides.get(name).copied().unwrap_or(self.default)
    }

    pub fn duration_ms(&self, name: &str, units: u64) -> u64 {
        self.coefficients(name).duration_ms(units)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn none() -> Params {
        Params::new()
    }

    #[test]
    fn rle_known_encoding() {
        assert_eq!(rle_encode(b"aaab"), vec![3, b'a', 1, b'b']);
        let long = vec![b'x'; 300];
        assert_eq!(rle_encode(&long), vec![0xac, 0x02, b'x']);
        assert_eq!(rle_decode(&rle_encode(&long)).unwrap(), long);
        assert!(rle_decode(&[3]).is_err());
        assert!(rle_decode(&[0, b'a']).is_err());
    }

    #[test]
    fn score_sums_components() {
        let out = ToyScore
            .run(&KernelInput::Blob(b"p1\t1,2.5\np2\t-1\n".to_vec()), &none())
            .unwrap();
        assert_eq!(out, b"p1\t3.5000\np2\t-1.0000\n");
        assert!(ToyScore.run(&KernelInput::Blob(b"p1 1\n".to_vec()), &none()).is_err());
    }

    #[test]
    fn knn_pairs_then_reduce() {
        let mut bound = BTreeMap::new();
        bound.insert("test".to_string(), b"q1\t0,0\nq2\t10,10\n".to_vec());
        bound.insert(
            "train".to_string(),
            b"a\tred\t1,0\nb\tred\t0,2\nc\tblue\t9,9\nd\tblue\t10,11\ne\tred\t11,10\n".to_vec(),
        );
        let mut params = Params::new();
        params.insert("k".into(), Value::from(2));
        let input = KernelInput::Bound(bound);
        assert_eq!(ToyKnn.work_units(&input, &params), 10);
        let pairs = ToyKnn.run(&input, &params).unwrap();
        let text = String::from_utf8(pairs.clone()).unwrap();
        assert_eq!(
            text,
            "q1\t1.000000\ta\tred\nq1\t2.000000\tb\tred\n\
             q2\t1.000000\td\tblue\nq2\t1.000000\te\tred\n"
        );
        params.insert("mode".into(), Value::from("reduce"));
        let labels = ToyKnn.run(&KernelInput::Blob(pairs), &params).unwrap();
        // q2 ties 1-1; the nearest candidate (d, by id order) decides
        assert_eq!(labels, b"q1\tred\nq2\tblue\n");
    }

    #[test]
    fn registry_rejects_unknown() {
        let reg = KernelRegistry::default();
        assert!(reg.get("identity").is_ok());
        assert_eq!(
            reg.get("tide").unwrap_err(),
            KernelError::UnknownApplication("tide".into())
        );
    }

    #[test]
    fn affine_rounds_up() {
        assert_eq!(Affine::new(10.0, 0.5).duration_ms(3), 12);
        assert_eq!(Affine::new(0.0, 0.0).duration_ms(0), 1);
    }

    proptest! {
        #[test]
        fn rle_round_trip(data in proptest::collection::vec(prop_oneof![Just(b'a'), Just(b'b'), any::<u8>()], 0..2000)) {
            prop_assert_eq!(rle_decode(&rle_encode(&data)).unwrap(), data);
        }
    }
}

//! Seeded synthetic inputs shaped like the shipped pipelines' data.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BASES: [u8; 4] = *b"ACGT";

/// Tab-separated reads `chrom start end name sequence`, sequences built from
/// base runs so they compress.
pub fn genomic_lines(seed: u64, bytes: usize) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(bytes + 128);
    let mut i = 0u64;
    while out.len() < bytes {
        let chrom = rng.gen_range(1..=22);
        let start = rng.gen_range(0..1_000_000u64);
        let len = rng.gen_range(20..60);
        let mut seq = Vec::with_capacity(len);
        while seq.len() < len {
            let b = BASES[rng.gen_range(0..4)];
            let run = rng.gen_range(1..8);
            seq.extend(std::iter::repeat_n(b, run));
        }
        seq.truncate(len);
        out.extend_from_slice(format!("chr{chrom}\t{start}\t{}\tr{i}\t", start + len as u64).as_bytes());
        out.extend_from_slice(&seq);
        out.push(b'\n');
        i += 1;
    }
    out
}

/// Records `id<TAB>v1,...,v8` with non-negative intensities.
pub fn spectra(seed: u64, bytes: usize) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(bytes + 128);
    let mut i = 0u64;
    while out.len() < bytes {
        let values: Vec<String> = (0..8).map(|_| format!("{:.3}", rng.gen_range(0.0..100.0))).collect();
        out.push_str(&format!("s{i:07}\t{}\n", values.join(",")));
        i += 1;
    }
    out.into_bytes()
}

/// Clustered points: test records `id<TAB>v1,...` and training records
/// `id<TAB>label<TAB>v1,...`.
pub fn knn_sets(seed: u64, tests: usize, train: usize, dims: usize) -> (Vec<u8>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..4)
        .map(|_| (0..dims).map(|_| rng.gen_range(-10.0..10.0)).collect())
        .collect();
    let point = |rng: &mut ChaCha8Rng| -> (usize, String) {
        let c = rng.gen_range(0..centers.len());
        let v: Vec<String> = centers[c]
            .iter()
            .map(|x| format!("{:.3}", x + rng.gen_range(-3.0..3.0)))
            .collect();
        (c, v.join(","))
    };
    let mut test = String::new();
    for i in 0..tests {
        let (_, v) = point(&mut rng);
        test.push_str(&format!("q{i:05}\t{v}\n"));
    }
    let mut tr = String::new();
    for i in 0..train {
        let (c, v) = point(&mut rng);
        tr.push_str(&format!("t{i:05}\tclass{c}\t{v}\n"));
    }
    (test.into_bytes(), tr.into_bytes())
}

/// Splits a line-oriented blob into pieces of roughly `chunk` bytes.
pub fn line_chunks(data: &[u8], chunk: usize) -> Vec<Vec<u8>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    for line in data.split_inclusive(|b| *b == b'\n') {
        cur.extend_from_slice(line);
        if cur.len() >= chunk {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generators_are_seeded_and_sized() {
        assert_eq!(genomic_lines(1, 5000), genomic_lines(1, 5000));
        assert_ne!(genomic_lines(1, 5000), genomic_lines(2, 5000));
        let g = genomic_lines(1, 5000);
        assert!(g.len() >= 5000 && g.len() < 5200 && g.ends_with(b"\n"));
        let s = spectra(3, 2000);
        assert!(s.len() >= 2000 && s.ends_with(b"\n"));
        let (t, tr) = knn_sets(4, 10, 50, 3);
        assert_eq!(t.split(|b| *b == b'\n').filter(|l| !l.is_empty()).count(), 10);
        assert_eq!(tr.split(|b| *b == b'\n').filter(|l| !l.is_empty()).count(), 50);
    }

    #[test]
    fn line_chunks_concatenate_back() {
        let g = genomic_lines(7, 10_000);
        let parts = line_chunks(&g, 1000);
        assert!(parts.len() >= 9);
        assert_eq!(parts.concat(), g);
    }
}

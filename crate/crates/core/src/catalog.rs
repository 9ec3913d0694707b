//! Pipelines shipped with the crate and matching sample data.

use crate::pipeline::{compile, spec_from_json, CompiledPipeline, PipelineError};
use crate::samples;

/// Prefix the kNN pipeline's map stage reads its training chunks from.
pub const KNN_TRAIN_PREFIX: &str = "samples/knn-train/";

const SOURCES: [(&str, &str); 4] = [
    ("compression", include_str!("../pipelines/compression.json")),
    ("proteomics", include_str!("../pipelines/proteomics.json")),
    ("knn", include_str!("../pipelines/knn.json")),
    ("listing1", include_str!("../pipelines/listing1.json")),
];

/// Shipped pipelines whose applications all have bundled kernels.
pub const RUNNABLE: [&str; 3] = ["compression", "proteomics", "knn"];

pub fn names() -> impl Iterator<Item = &'static str> {
    SOURCES.iter().map(|(n, _)| *n)
}

/// Builder document of a shipped pipeline.
pub fn source(name: &str) -> Option<&'static str> {
    SOURCES.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

pub fn compiled(name: &str) -> Result<CompiledPipeline, PipelineError> {
    let src = source(name).ok_or_else(|| PipelineError::Malformed(format!("no shipped pipeline {name:?}")))?;
    Ok(compile(&spec_from_json(src.as_bytes())?)?.0)
}

/// Input plus any side objects a shipped pipeline expects.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleData {
    pub input: Vec<u8>,
    pub objects: Vec<(String, Vec<u8>)>,
}

/// Seeded sample data of about `bytes` bytes for a runnable pipeline.
pub fn sample(name: &str, seed: u64, bytes: usize) -> Option<SampleData> {
    let data = match name {
        "compression" => SampleData {
            input: samples::genomic_lines(seed, bytes),
            objects: Vec::new(),
        },
        "proteomics" => SampleData {
            input: samples::spectra(seed, bytes),
            objects: Vec::new(),
        },
        "knn" => {
            // a test record is about 30 bytes; training is a fixed multiple
            let tests = (bytes / 30).max(1);
            let (test, train) = samples::knn_sets(seed, tests, 400, 4);
            let objects = samples::line_chunks(&train, 4000)
                .into_iter()
                .enumerate()
                .map(|(i, c)| (format!("{KNN_TRAIN_PREFIX}{i:04}"), c))
                .collect();
            SampleData { input: test, objects }
        }
        _ => return None,
    };
    Some(data)
}

//! Random-access view over a set of attention dumps.
//!
//! Analyses never need the whole corpus resident: file-backed and generated
//! corpora load one dump at a time, and in-memory slices hand out borrows.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::types::{AttentionDump, Geometry};

pub trait Corpus: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn sample_id(&self, index: usize) -> Cow<'_, str>;

    fn load(&self, index: usize) -> Result<Cow<'_, AttentionDump>>;
}

impl Corpus for [AttentionDump] {
    fn len(&self) -> usize {
        <[AttentionDump]>::len(self)
    }

    fn sample_id(&self, index: usize) -> Cow<'_, str> {
        Cow::Borrowed(self[index].sample_id())
    }

    fn load(&self, index: usize) -> Result<Cow<'_, AttentionDump>> {
        Ok(Cow::Borrowed(&self[index]))
    }
}

impl Corpus for Vec<AttentionDump> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn sample_id(&self, index: usize) -> Cow<'_, str> {
        self.as_slice().sample_id(index)
    }

    fn load(&self, index: usize) -> Result<Cow<'_, AttentionDump>> {
        self.as_slice().load(index)
    }
}

/// Indices of the corpus ordered by sample id (index breaks exact ties).
pub fn sorted_indices<C: Corpus + ?Sized>(corpus: &C) -> Vec<usize> {
    let mut ids: Vec<(Cow<'_, str>, usize)> =
        (0..corpus.len()).map(|i| (corpus.sample_id(i), i)).collect();
    ids.sort();
    ids.into_iter().map(|(_, i)| i).collect()
}

pub fn check_geometry(dump: &AttentionDump, expected: Geometry) -> Result<()> {
    let found = dump.geometry();
    if found != expected {
        return Err(Error::GeometryMismatch {
            sample_id: dump.sample_id().to_string(),
            detail: format!(
                "grid {} x layers {} x heads {}, expected {} x {} x {}",
                found.grid_size,
                found.num_layers,
                found.num_heads,
                expected.grid_size,
                expected.num_layers,
                expected.num_heads
            ),
        });
    }
    Ok(())
}

/// Geometry of the first sample in sample-id order.
pub fn corpus_geometry<C: Corpus + ?Sized>(corpus: &C) -> Result<Geometry> {
    let first = sorted_indices(corpus).first().copied().ok_or(Error::NoSamples)?;
    Ok(corpus.load(first)?.geometry())
}

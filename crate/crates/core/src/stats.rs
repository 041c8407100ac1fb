//! Image attention sums per head and the eligibility threshold derived from
//! the knee of their sorted curve.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::corpus::{check_geometry, corpus_geometry, sorted_indices, Corpus};
use crate::error::{Error, Result};
use crate::types::{AttnMap, Geometry, HeadId};

/// Layers skipped by every analysis unless overridden.
pub const DEFAULT_EXCLUDED_LAYERS: usize = 2;

/// Curvature values within this relative distance of the maximum count as tied.
const CURVATURE_TIE_REL: f64 = 1e-9;
/// Floor for the tie window so rounding noise on straight segments ties.
const CURVATURE_TIE_ABS: f64 = 1e-9;

/// Total attention the text token places on image tokens within one head.
pub fn attention_sum(map: &AttnMap) -> f64 {
    map.sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadStats {
    pub geometry: Geometry,
    pub excluded_layers: usize,
    pub num_samples: usize,
    /// Mean attention sum per analysed head.
    pub means: BTreeMap<HeadId, f64>,
}

/// Per-head mean of [`attention_sum`] across the corpus.
///
/// Samples are reduced in sample-id order, so the result does not depend on
/// how the corpus is ordered or on the worker count.
pub fn mean_attention_sums<C: Corpus + ?Sized>(corpus: &C, excluded_layers: usize) -> Result<HeadStats> {
    if corpus.is_empty() {
        return Err(Error::NoSamples);
    }
    let geometry = corpus_geometry(corpus)?;
    let heads = geometry.analysed_heads(excluded_layers);
    let order = sorted_indices(corpus);

    let per_sample: Vec<Vec<f64>> = order
        .par_iter()
        .map(|&i| {
            let dump = corpus.load(i)?;
            check_geometry(&dump, geometry)?;
            Ok(heads.iter().map(|&h| attention_sum(dump.map(h).expect("geometry checked"))).collect())
        })
        .collect::<Result<_>>()?;

    let mut totals = vec![0f64; heads.len()];
    for sums in &per_sample {
        for (t, s) in totals.iter_mut().zip(sums) {
            *t += s;
        }
    }
    let n = per_sample.len() as f64;
    Ok(HeadStats {
        geometry,
        excluded_layers,
        num_samples: per_sample.len(),
        means: heads.into_iter().zip(totals).map(|(h, t)| (h, t / n)).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub rank: usize,
    pub head: HeadId,
    pub mean_sum: f64,
    pub curvature: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdResult {
    pub tau: f64,
    /// Heads sorted by ascending mean sum (ties by head id).
    pub sorted_curve: Vec<CurvePoint>,
    pub curvature_index: usize,
}

/// Discrete curvature of `ys` sampled on an evenly spaced axis.
///
/// Both axes are rescaled to `[0, 1]` first. Endpoints get 0.
pub fn discrete_curvature(ys: &[f64]) -> Vec<f64> {
    let n = ys.len();
    let mut out = vec![0.0; n];
    if n < 3 {
        return out;
    }
    let (lo, hi) = ys.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &y| (lo.min(y), hi.max(y)));
    let span = hi - lo;
    let norm = |y: f64| if span > 0.0 { (y - lo) / span } else { 0.0 };
    let h = 1.0 / (n - 1) as f64;
    for i in 1..n - 1 {
        let (a, b, c) = (norm(ys[i - 1]), norm(ys[i]), norm(ys[i + 1]));
        let d1 = (c - a) / (2.0 * h);
        let d2 = (c - 2.0 * b + a) / (h * h);
        out[i] = d2.abs() / (1.0 + d1 * d1).powf(1.5);
    }
    out
}

/// Index of maximal curvature; among (near-)ties the largest index wins.
pub fn max_curvature_index(kappa: &[f64]) -> usize {
    let n = kappa.len();
    let interior = &kappa[1..n - 1];
    let best = interior.iter().copied().fold(0.0f64, f64::max);
    let cutoff = best - (best * CURVATURE_TIE_REL).max(CURVATURE_TIE_ABS);
    interior.iter().rposition(|&k| k >= cutoff).map(|i| i + 1).unwrap_or(n - 2)
}

/// Threshold at the point of maximum curvature of the sorted mean-sum curve.
pub fn max_curvature_threshold(stats: &HeadStats) -> Result<ThresholdResult> {
    if stats.means.len() < 4 {
        return Err(Error::CurveTooShort(stats.means.len()));
    }
    let mut sorted: Vec<(HeadId, f64)> = stats.means.iter().map(|(&h, &m)| (h, m)).collect();
    sorted.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let ys: Vec<f64> = sorted.iter().map(|p| p.1).collect();
    let kappa = discrete_curvature(&ys);
    let idx = max_curvature_index(&kappa);
    let sorted_curve = sorted
        .into_iter()
        .zip(kappa)
        .enumerate()
        .map(|(rank, ((head, mean_sum), curvature))| CurvePoint { rank, head, mean_sum, curvature })
        .collect::<Vec<_>>();
    Ok(ThresholdResult { tau: sorted_curve[idx].mean_sum, sorted_curve, curvature_index: idx })
}

/// Heads whose mean sum reaches `tau`, in head order.
pub fn eligible_heads(stats: &HeadStats, tau: f64) -> Vec<HeadId> {
    stats.means.iter().filter(|(_, &m)| m >= tau).map(|(&h, _)| h).collect()
}

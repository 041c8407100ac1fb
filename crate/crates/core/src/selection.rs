//! Ranking heads by how often they are among the most spatially focused
//! heads of a sample, and the per-sample (greedy) alternative.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{check_geometry, sorted_indices, Corpus};
use crate::entropy::{binarize_at_mean, spatial_entropy};
use crate::error::{Error, Result};
use crate::grounding::downsample_mask;
use crate::metrics::{mask_iou, spearman, Correlation};
use crate::stats::{attention_sum, max_curvature_threshold, HeadStats, DEFAULT_EXCLUDED_LAYERS};
use crate::types::{AttentionDump, Geometry, HeadId, SampleAnnotation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Criteria {
    /// Attention-sum eligibility, then lowest spatial entropy.
    #[default]
    Both,
    /// Highest attention sum only.
    SumOnly,
    /// Lowest spatial entropy over all analysed heads.
    EntropyOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// One corpus-level head set for every sample.
    #[default]
    Fixed,
    /// Re-select the top heads for each sample.
    Greedy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub num_samples_per_trial: usize,
    pub num_trials: usize,
    pub lowest_n: usize,
    pub top_k: usize,
    pub excluded_layers: usize,
    pub strategy: Strategy,
    pub criteria: Criteria,
    pub rng_seed: u64,
    /// Replaces the curvature threshold when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_override: Option<f64>,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            num_samples_per_trial: 1000,
            num_trials: 5,
            lowest_n: 10,
            top_k: 3,
            excluded_layers: DEFAULT_EXCLUDED_LAYERS,
            strategy: Strategy::Fixed,
            criteria: Criteria::Both,
            rng_seed: 0,
            tau_override: None,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_samples_per_trial == 0 || self.num_trials == 0 || self.lowest_n == 0 || self.top_k == 0 {
            return Err(Error::Config("sample, trial, lowest_n and top_k counts must be positive".into()));
        }
        if self.top_k > self.lowest_n {
            return Err(Error::Config(format!("top_k {} exceeds lowest_n {}", self.top_k, self.lowest_n)));
        }
        if let Some(t) = self.tau_override {
            if !t.is_finite() {
                return Err(Error::Config(format!("tau {t} is not finite")));
            }
        }
        Ok(())
    }
}

/// Heads a sample may select from: under `Both` only heads whose attention
/// sum in this sample reaches `tau`, otherwise every analysed head.
pub fn sample_candidates(dump: &AttentionDump, analysed: &[HeadId], tau: f64, criteria: Criteria) -> Vec<HeadId> {
    match criteria {
        Criteria::Both => analysed
            .iter()
            .copied()
            .filter(|&h| dump.map(h).is_some_and(|m| attention_sum(m) >= tau))
            .collect(),
        Criteria::SumOnly | Criteria::EntropyOnly => analysed.to_vec(),
    }
}

/// Eligible heads ordered best-first for the criterion; ties by head id.
fn rank_in_sample(dump: &AttentionDump, eligible: &[HeadId], criteria: Criteria) -> Vec<HeadId> {
    let mut scored: Vec<(f64, HeadId)> = eligible
        .iter()
        .filter_map(|&h| {
            let map = dump.map(h)?;
            Some(match criteria {
                Criteria::SumOnly => (-attention_sum(map), h),
                Criteria::Both | Criteria::EntropyOnly => (spatial_entropy(map).value, h),
            })
        })
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    scored.into_iter().map(|(_, h)| h).collect()
}

/// The `lowest_n` best heads of one sample (all of them if fewer qualify),
/// returned in head order.
pub fn per_sample_selection(
    dump: &AttentionDump,
    eligible: &[HeadId],
    lowest_n: usize,
    criteria: Criteria,
) -> Vec<HeadId> {
    let mut picked: Vec<HeadId> = rank_in_sample(dump, eligible, criteria).into_iter().take(lowest_n).collect();
    picked.sort();
    picked
}

/// The `top_k` best heads of one sample, best first.
pub fn greedy_heads(dump: &AttentionDump, eligible: &[HeadId], top_k: usize, criteria: Criteria) -> Vec<HeadId> {
    rank_in_sample(dump, eligible, criteria).into_iter().take(top_k).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadFrequency {
    #[serde(flatten)]
    pub head: HeadId,
    pub frequency: f64,
    pub frequency_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub geometry: Geometry,
    pub config: SelectionConfig,
    pub tau_used: f64,
    /// Samples drawn per trial.
    pub samples_per_trial: usize,
    /// Every analysed head, by descending mean frequency (ties by head id).
    pub ranks: Vec<HeadFrequency>,
    pub top_k_heads: Vec<HeadId>,
}

impl SelectionReport {
    pub fn frequency(&self, head: HeadId) -> Option<f64> {
        self.ranks.iter().find(|e| e.head == head).map(|e| e.frequency)
    }

    pub fn rank_of(&self, head: HeadId) -> Option<usize> {
        self.ranks.iter().position(|e| e.head == head).map(|i| i + 1)
    }

    pub fn top(&self, k: usize) -> Vec<HeadId> {
        self.ranks.iter().take(k).map(|e| e.head).collect()
    }

    /// Checks internal consistency after deserialization.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let mut seen = BTreeSet::new();
        for e in &self.ranks {
            if !self.geometry.contains(e.head) {
                return Err(Error::Invalid(format!(
                    "ranks: head {} outside geometry of {} layers x {} heads",
                    e.head, self.geometry.num_layers, self.geometry.num_heads
                )));
            }
            if !seen.insert(e.head) {
                return Err(Error::Invalid(format!("ranks: duplicate head {}", e.head)));
            }
            if !(0.0..=1.0).contains(&e.frequency) || !e.frequency_std.is_finite() || e.frequency_std < 0.0 {
                return Err(Error::Invalid(format!("ranks: head {} has frequency {} ± {}", e.head, e.frequency, e.frequency_std)));
            }
        }
        let ordered = self
            .ranks
            .windows(2)
            .all(|w| w[0].frequency > w[1].frequency || (w[0].frequency == w[1].frequency && w[0].head < w[1].head));
        if !ordered {
            return Err(Error::Invalid("ranks: not sorted by descending frequency then head".into()));
        }
        if self.top_k_heads != self.top(self.config.top_k) {
            return Err(Error::Invalid("top_k_heads: not the first top_k ranked heads".into()));
        }
        Ok(())
    }
}

/// Selection frequency of every analysed head, averaged over seeded trials.
///
/// Each trial draws `num_samples_per_trial` distinct samples (all of them if
/// the corpus is smaller) with seed `rng_seed + trial`.
pub fn selection_frequency<C: Corpus + ?Sized>(
    corpus: &C,
    stats: &HeadStats,
    config: &SelectionConfig,
) -> Result<SelectionReport> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::NoSamples);
    }
    let tau = match config.tau_override {
        Some(t) => t,
        None => max_curvature_threshold(stats)?.tau,
    };
    let geometry = stats.geometry;
    let analysed = geometry.analysed_heads(config.excluded_layers);
    let order = sorted_indices(corpus);
    let per_trial = config.num_samples_per_trial.min(order.len());

    let draws: Vec<Vec<usize>> = (0..config.num_trials)
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed.wrapping_add(t as u64));
            let mut picked = rand::seq::index::sample(&mut rng, order.len(), per_trial).into_vec();
            picked.sort_unstable();
            picked
        })
        .collect();
    let needed: Vec<usize> = draws.iter().flatten().copied().collect::<BTreeSet<_>>().into_iter().collect();

    let selected: BTreeMap<usize, Vec<HeadId>> = needed
        .par_iter()
        .map(|&pos| {
            let dump = corpus.load(order[pos])?;
            check_geometry(&dump, geometry)?;
            let eligible = sample_candidates(&dump, &analysed, tau, config.criteria);
            Ok((pos, per_sample_selection(&dump, &eligible, config.lowest_n, config.criteria)))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .collect();

    let slot: BTreeMap<HeadId, usize> = analysed.iter().enumerate().map(|(i, &h)| (h, i)).collect();
    let mut per_trial_freq = vec![vec![0f64; analysed.len()]; config.num_trials];
    for (trial, draw) in draws.iter().enumerate() {
        let mut counts = vec![0u64; analysed.len()];
        for pos in draw {
            for h in &selected[pos] {
                counts[slot[h]] += 1;
            }
        }
        for (f, c) in per_trial_freq[trial].iter_mut().zip(counts) {
            *f = c as f64 / per_trial as f64;
        }
    }

    let trials = config.num_trials as f64;
    let mut ranks: Vec<HeadFrequency> = analysed
        .iter()
        .enumerate()
        .map(|(i, &head)| {
            let mean = per_trial_freq.iter().map(|f| f[i]).sum::<f64>() / trials;
            let var = per_trial_freq.iter().map(|f| (f[i] - mean).powi(2)).sum::<f64>() / trials;
            HeadFrequency { head, frequency: mean.clamp(0.0, 1.0), frequency_std: var.sqrt() }
        })
        .collect();
    ranks.sort_by(|a, b| b.frequency.total_cmp(&a.frequency).then(a.head.cmp(&b.head)));
    let top_k_heads = ranks.iter().take(config.top_k).map(|e| e.head).collect();

    Ok(SelectionReport {
        geometry,
        config: config.clone(),
        tau_used: tau,
        samples_per_trial: per_trial,
        ranks,
        top_k_heads,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankIouRow {
    #[serde(flatten)]
    pub head: HeadId,
    pub rank: usize,
    pub frequency: f64,
    pub mean_iou: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankIouAnalysis {
    pub rows: Vec<RankIouRow>,
    pub num_samples: usize,
    /// Spearman correlation between selection frequency and mean IoU.
    pub correlation: Correlation,
}

/// Mean grid-level IoU of each frequently selected head's binarized map
/// against the ground-truth mask, and its rank correlation with frequency.
///
/// Qualifying heads are the first `max_heads` ranked heads (all when `None`)
/// whose frequency reaches `min_frequency`.
pub fn rank_iou_correlation<C: Corpus + ?Sized>(
    corpus: &C,
    annotations: &[SampleAnnotation],
    report: &SelectionReport,
    min_frequency: f64,
    max_heads: Option<usize>,
) -> Result<RankIouAnalysis> {
    let qualifying: Vec<(usize, &HeadFrequency)> = report
        .ranks
        .iter()
        .enumerate()
        .take(max_heads.unwrap_or(usize::MAX))
        .filter(|(_, e)| e.frequency >= min_frequency)
        .map(|(i, e)| (i + 1, e))
        .collect();
    if qualifying.is_empty() {
        return Err(Error::NoQualifyingHeads);
    }
    let by_id: BTreeMap<&str, &SampleAnnotation> = annotations.iter().map(|a| (a.sample_id.as_str(), a)).collect();
    let geometry = report.geometry;
    let order = sorted_indices(corpus);

    let per_sample: Vec<Option<Vec<f64>>> = order
        .par_iter()
        .map(|&i| {
            let dump = corpus.load(i)?;
            check_geometry(&dump, geometry)?;
            let Some(gt) = by_id.get(dump.sample_id()).and_then(|a| a.gt_mask.as_ref()) else {
                return Ok(None);
            };
            let gt_grid = downsample_mask(gt, geometry.grid_size)?;
            qualifying
                .iter()
                .map(|(_, e)| {
                    let map = dump.map(e.head).ok_or(Error::UnknownHead(e.head))?;
                    Ok(mask_iou(&binarize_at_mean(map), &gt_grid)?.iou)
                })
                .collect::<Result<Vec<f64>>>()
                .map(Some)
        })
        .collect::<Result<_>>()?;

    let scored: Vec<&Vec<f64>> = per_sample.iter().flatten().collect();
    if scored.is_empty() {
        return Err(Error::MissingMask("every sample in the corpus".into()));
    }
    let mut totals = vec![0f64; qualifying.len()];
    for ious in &scored {
        for (t, v) in totals.iter_mut().zip(ious.iter()) {
            *t += v;
        }
    }
    let rows: Vec<RankIouRow> = qualifying
        .iter()
        .zip(totals)
        .map(|(&(rank, e), t)| RankIouRow {
            head: e.head,
            rank,
            frequency: e.frequency,
            mean_iou: t / scored.len() as f64,
        })
        .collect();
    let xs: Vec<f64> = rows.iter().map(|r| r.frequency).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.mean_iou).collect();
    let correlation = spearman(&xs, &ys)?;
    Ok(RankIouAnalysis { rows, num_samples: scored.len(), correlation })
}

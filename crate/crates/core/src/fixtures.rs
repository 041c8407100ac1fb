//! Synthetic corpus with one planted localization head.
//!
//! Every analysed head gets a role, fixed for the whole corpus:
//!
//! - planted: a Gaussian blob confined to the ground-truth rectangle, one
//!   component above the mean, mass at least 0.72;
//! - loud: as much mass as the planted head (a hair less) spread over 9 to 12
//!   equal single-cell blobs, so attention sum alone cannot tell them apart;
//! - echo: 4 to 7 equal single-cell blobs, one on the target and the rest far
//!   away, at mid-range mass; how often a head fragments into more blobs
//!   rises with its id, which grades both its selection frequency and its IoU;
//! - diffuse: a broad low-mass Gaussian away from the target, entropy 0 but
//!   mass below the curvature threshold;
//! - quiet: 8 to 11 equal single-cell blobs with mass below the threshold.
//!
//! Loud heads and some diffuse heads have smaller ids than the planted head so
//! that every id-ordered tie in the single-criterion ablations goes against it.
//! Echo heads all come after it.
//!
//! Per-head base masses are laid out so the sorted mean-sum curve is a
//! shallow straight segment turning into the steeper echo segment, which
//! gives one sharp knee just below the echo heads.

use std::borrow::Cow;
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::io::{write_annotations, write_dump, write_manifest, CorpusManifest, ManifestEntry, MANIFEST_VERSION};
use crate::types::{AttentionDump, AttnMap, BBox, BinaryMask, Geometry, HeadId, SampleAnnotation};

const LOW_SEGMENT: (f64, f64) = (0.02, 0.29);
const ECHO_MASS: (f64, f64) = (0.31, 0.61);
const PLANTED_MASS: (f64, f64) = (0.72, 0.90);
const LOUD_RATIO: f64 = 0.9999;
/// Per-sample mass jitter of echo heads. Other masses are fixed per head, so
/// the low segment of the curve stays exactly straight.
const JITTER: f64 = 0.02;
const ECHO_FRAGMENT_P: (f64, f64) = (0.05, 0.95);
const DIFFUSE_SIGMA: f64 = 4.0;
/// Blob slots shared by every fragmented head, six cells apart.
const SLOT_STEP: usize = 6;
/// Minimum Chebyshev gap between an echo head's off-target blobs and the box.
const ECHO_CLEARANCE: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureSpec {
    pub num_samples: usize,
    pub grid_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub planted_head: HeadId,
    /// Planted blob standard deviation as a fraction of the box side.
    pub blob_sigma: f64,
    /// Upper bound on a diffuse head's image mass.
    pub noise_heads_mass: f64,
    /// Fraction of analysed heads (besides planted, loud and echo) that are diffuse.
    pub diffuse_heads_fraction: f64,
    pub rng_seed: u64,
    pub image_size: u32,
    pub excluded_layers: usize,
    pub min_box_cells: usize,
    pub max_box_cells: usize,
    pub num_loud_heads: usize,
    pub num_echo_heads: usize,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        FixtureSpec {
            num_samples: 1000,
            grid_size: 24,
            num_layers: 32,
            num_heads: 4,
            planted_head: HeadId::new(14, 1),
            blob_sigma: 0.5,
            noise_heads_mass: 0.09,
            diffuse_heads_fraction: 0.2,
            rng_seed: 42,
            image_size: 336,
            excluded_layers: 2,
            min_box_cells: 6,
            max_box_cells: 10,
            num_loud_heads: 4,
            num_echo_heads: 16,
        }
    }
}

impl FixtureSpec {
    pub fn geometry(&self) -> Geometry {
        Geometry { grid_size: self.grid_size, num_layers: self.num_layers, num_heads: self.num_heads }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_samples == 0 {
            return bad("num_samples must be positive".into());
        }
        if !self.geometry().contains(self.planted_head) {
            return bad(format!("planted head {} outside {} layers x {} heads", self.planted_head, self.num_layers, self.num_heads));
        }
        if (self.planted_head.layer as usize) < self.excluded_layers {
            return bad(format!("planted head {} lies in an excluded layer", self.planted_head));
        }
        if self.grid_size < 2 * SLOT_STEP || self.grid_size > u16::MAX as usize {
            return bad(format!("grid size {} must be between {} and 65535", self.grid_size, 2 * SLOT_STEP));
        }
        if self.min_box_cells == 0 || self.min_box_cells > self.max_box_cells || self.max_box_cells + 2 * ECHO_CLEARANCE > self.grid_size {
            return bad(format!("box sides {}..={} do not fit grid {}", self.min_box_cells, self.max_box_cells, self.grid_size));
        }
        if !(self.blob_sigma > 0.0 && self.blob_sigma.is_finite()) {
            return bad(format!("blob_sigma {} must be positive", self.blob_sigma));
        }
        if !(0.0..=1.0).contains(&self.diffuse_heads_fraction) {
            return bad(format!("diffuse fraction {} outside [0, 1]", self.diffuse_heads_fraction));
        }
        if !(self.noise_heads_mass > 0.0 && self.noise_heads_mass <= 0.1) {
            return bad(format!("noise_heads_mass {} outside (0, 0.1]", self.noise_heads_mass));
        }
        if self.image_size == 0 {
            return bad("image_size must be positive".into());
        }
        FixtureLayout::new(self).map(|_| ())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Role {
    Planted,
    Loud,
    /// `fragment_p` is the chance of each of three extra blobs.
    Echo { fragment_p: f64, base_mass: f64 },
    Diffuse { base_mass: f64 },
    Quiet { base_mass: f64 },
    /// Heads in excluded layers.
    Excluded,
}

/// Corpus-wide role of every head, indexed by flat head index.
#[derive(Debug, Clone)]
pub struct FixtureLayout {
    pub roles: Vec<Role>,
    pub num_heads: usize,
}

impl FixtureLayout {
    pub fn new(spec: &FixtureSpec) -> Result<Self> {
        let geometry = spec.geometry();
        let analysed = geometry.analysed_heads(spec.excluded_layers);
        let planted = spec.planted_head;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
        rng.set_stream(1);

        let mut before: Vec<HeadId> = analysed.iter().copied().filter(|&h| h < planted).collect();
        let mut after: Vec<HeadId> = analysed.iter().copied().filter(|&h| h > planted).collect();
        let others = analysed.len().saturating_sub(1 + spec.num_loud_heads + spec.num_echo_heads);
        let num_diffuse = (spec.diffuse_heads_fraction * others as f64).round() as usize;
        let diffuse_first = num_diffuse.min(3);
        if before.len() < spec.num_loud_heads + diffuse_first || after.len() < spec.num_echo_heads {
            return Err(Error::Config(format!(
                "planted head {} leaves {} heads before and {} after it; need {} and {}",
                planted,
                before.len(),
                after.len(),
                spec.num_loud_heads + diffuse_first,
                spec.num_echo_heads
            )));
        }
        before.shuffle(&mut rng);
        after.shuffle(&mut rng);

        let loud: Vec<HeadId> = before.drain(..spec.num_loud_heads).collect();
        let mut diffuse: Vec<HeadId> = before.drain(..diffuse_first).collect();
        let mut echo: Vec<HeadId> = after.drain(..spec.num_echo_heads).collect();
        echo.sort();
        let mut rest: Vec<HeadId> = before.into_iter().chain(after).collect();
        rest.shuffle(&mut rng);
        diffuse.extend(rest.drain(..num_diffuse - diffuse_first));
        let quiet = rest;

        let idx = |h: HeadId| h.flat_index(spec.num_heads);
        let mut roles = vec![Role::Excluded; geometry.num_layers * geometry.num_heads];
        roles[idx(planted)] = Role::Planted;
        for &h in &loud {
            roles[idx(h)] = Role::Loud;
        }
        // one straight segment through the diffuse then quiet heads
        let low = diffuse.len() + quiet.len();
        let step = if low > 1 { (LOW_SEGMENT.1 - LOW_SEGMENT.0) / (low - 1) as f64 } else { 0.0 };
        for (i, &h) in diffuse.iter().chain(&quiet).enumerate() {
            let base_mass = LOW_SEGMENT.0 + step * i as f64;
            roles[idx(h)] = if i < diffuse.len() {
                Role::Diffuse { base_mass: base_mass.min(spec.noise_heads_mass) }
            } else {
                Role::Quiet { base_mass }
            };
        }
        let n_echo = echo.len().max(2) - 1;
        for (e, &h) in echo.iter().enumerate() {
            let t = e as f64 / n_echo as f64;
            roles[idx(h)] = Role::Echo {
                fragment_p: ECHO_FRAGMENT_P.0 + t * (ECHO_FRAGMENT_P.1 - ECHO_FRAGMENT_P.0),
                base_mass: ECHO_MASS.1 - t * (ECHO_MASS.1 - ECHO_MASS.0),
            };
        }
        Ok(FixtureLayout { roles, num_heads: spec.num_heads })
    }

    pub fn role(&self, head: HeadId) -> Role {
        self.roles[head.flat_index(self.num_heads)]
    }

    pub fn heads_with(&self, pred: impl Fn(Role) -> bool) -> Vec<HeadId> {
        (0..self.roles.len())
            .filter(|&i| pred(self.roles[i]))
            .map(|i| HeadId::new((i / self.num_heads) as u16, (i % self.num_heads) as u16))
            .collect()
    }

    pub fn echo_heads(&self) -> Vec<HeadId> {
        self.heads_with(|r| matches!(r, Role::Echo { .. }))
    }
}

/// One generated sample before serialization.
#[derive(Debug, Clone)]
pub struct FixtureSample {
    pub dump: AttentionDump,
    pub annotation: SampleAnnotation,
    /// Ground-truth rectangle in grid cells.
    pub gt_grid: BBox,
}

pub fn sample_id(index: usize) -> String {
    format!("fx{index:06}")
}

fn gaussian_in(p: usize, cx: f64, cy: f64, sx: f64, sy: f64, region: &BBox, mass: f64) -> Vec<f32> {
    let mut v = vec![0f64; p * p];
    for r in region.y_min as usize..region.y_max as usize {
        for c in region.x_min as usize..region.x_max as usize {
            let dx = (c as f64 + 0.5 - cx) / sx;
            let dy = (r as f64 + 0.5 - cy) / sy;
            v[r * p + c] = (-0.5 * (dx * dx + dy * dy)).exp();
        }
    }
    let total: f64 = v.iter().sum();
    v.into_iter().map(|x| (x / total * mass) as f32).collect()
}

fn blobs(p: usize, cells: &[(usize, usize)], mass: f64) -> Vec<f32> {
    let mut v = vec![0f32; p * p];
    let each = (mass / cells.len() as f64) as f32;
    for &(r, c) in cells {
        v[r * p + c] = each;
    }
    v
}

fn slots(p: usize) -> Vec<(usize, usize)> {
    let ticks: Vec<usize> = (SLOT_STEP / 3..p).step_by(SLOT_STEP).collect();
    ticks.iter().flat_map(|&r| ticks.iter().map(move |&c| (r, c))).collect()
}

fn chebyshev_to_box(cell: (usize, usize), b: &BBox) -> usize {
    let gap = |v: usize, lo: u32, hi: u32| {
        if v < lo as usize {
            lo as usize - v
        } else if v >= hi as usize {
            v + 1 - hi as usize
        } else {
            0
        }
    };
    gap(cell.0, b.y_min, b.y_max).max(gap(cell.1, b.x_min, b.x_max))
}

pub fn generate_sample(spec: &FixtureSpec, layout: &FixtureLayout, index: usize) -> Result<FixtureSample> {
    let p = spec.grid_size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed ^ index as u64);

    let w = rng.random_range(spec.min_box_cells..=spec.max_box_cells);
    let h = rng.random_range(spec.min_box_cells..=spec.max_box_cells);
    let x0 = rng.random_range(0..=p - w);
    let y0 = rng.random_range(0..=p - h);
    let gt_grid = BBox::new(x0 as u32, y0 as u32, (x0 + w) as u32, (y0 + h) as u32)?;
    let (cx, cy) = (x0 as f64 + w as f64 / 2.0, y0 as f64 + h as f64 / 2.0);
    let center = (y0 + h / 2, x0 + w / 2);
    let planted_mass = rng.random_range(PLANTED_MASS.0..PLANTED_MASS.1);

    let all_slots = slots(p);
    let far_slots: Vec<(usize, usize)> =
        all_slots.iter().copied().filter(|&s| chebyshev_to_box(s, &gt_grid) >= ECHO_CLEARANCE).collect();
    let full = BBox::new(0, 0, p as u32, p as u32)?;
    let jitter = |rng: &mut ChaCha8Rng| 1.0 + rng.random_range(-JITTER..JITTER);

    let mut maps = Vec::with_capacity(layout.roles.len());
    for role in &layout.roles {
        let values = match *role {
            Role::Planted => {
                let (sx, sy) = (spec.blob_sigma * w as f64, spec.blob_sigma * h as f64);
                gaussian_in(p, cx, cy, sx, sy, &gt_grid, planted_mass)
            }
            Role::Loud => {
                let n = rng.random_range(9..=12);
                let cells: Vec<_> = all_slots.choose_multiple(&mut rng, n).copied().collect();
                blobs(p, &cells, planted_mass * LOUD_RATIO)
            }
            Role::Echo { fragment_p, base_mass } => {
                let extra = (0..3).filter(|_| rng.random_bool(fragment_p)).count();
                let mut cells = vec![center];
                cells.extend(far_slots.choose_multiple(&mut rng, 3 + extra).copied());
                blobs(p, &cells, base_mass * jitter(&mut rng))
            }
            Role::Diffuse { base_mass } => {
                let spot = *far_slots.choose(&mut rng).unwrap_or(&all_slots[0]);
                let (row, col) = (spot.0 as f64 + 0.5, spot.1 as f64 + 0.5);
                gaussian_in(p, col, row, DIFFUSE_SIGMA, DIFFUSE_SIGMA, &full, base_mass)
            }
            Role::Quiet { base_mass } => {
                let n = rng.random_range(8..=11);
                let cells: Vec<_> = all_slots.choose_multiple(&mut rng, n).copied().collect();
                blobs(p, &cells, base_mass)
            }
            Role::Excluded => {
                let cells: Vec<_> = all_slots.choose_multiple(&mut rng, 8).copied().collect();
                blobs(p, &cells, 0.5)
            }
        };
        maps.push(AttnMap::new(p, values)?);
    }

    let id = sample_id(index);
    let scale = spec.image_size / p as u32;
    let size = scale * p as u32;
    let text = format!("the object in region {}", gt_grid);
    let gt_bbox = BBox::new(gt_grid.x_min * scale, gt_grid.y_min * scale, gt_grid.x_max * scale, gt_grid.y_max * scale)?;
    let gt_mask = BinaryMask::from_box(size as usize, size as usize, &gt_bbox)?;
    let dump = AttentionDump::new(id.clone(), p, spec.num_layers, spec.num_heads, maps, size, size, text.clone())?;
    let annotation = SampleAnnotation {
        sample_id: id,
        image_width: size,
        image_height: size,
        text,
        gt_bbox,
        gt_mask: Some(gt_mask),
    };
    Ok(FixtureSample { dump, annotation, gt_grid })
}

/// Generates samples on demand; nothing is kept in memory.
#[derive(Debug, Clone)]
pub struct FixtureCorpus {
    pub spec: FixtureSpec,
    pub layout: FixtureLayout,
}

impl FixtureCorpus {
    pub fn new(spec: FixtureSpec) -> Result<Self> {
        spec.validate()?;
        let layout = FixtureLayout::new(&spec)?;
        Ok(FixtureCorpus { spec, layout })
    }

    pub fn sample(&self, index: usize) -> Result<FixtureSample> {
        generate_sample(&self.spec, &self.layout, index)
    }

    pub fn annotations(&self) -> Result<Vec<SampleAnnotation>> {
        (0..self.spec.num_samples).into_par_iter().map(|i| Ok(self.sample(i)?.annotation)).collect()
    }
}

impl Corpus for FixtureCorpus {
    fn len(&self) -> usize {
        self.spec.num_samples
    }

    fn sample_id(&self, index: usize) -> Cow<'_, str> {
        Cow::Owned(sample_id(index))
    }

    fn load(&self, index: usize) -> Result<Cow<'_, AttentionDump>> {
        Ok(Cow::Owned(self.sample(index)?.dump))
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const SPEC_FILE: &str = "fixture_spec.json";

/// Writes `dumps/<id>.lhad`, the manifest, the annotations and the spec
/// into `out_dir`.
pub fn generate_corpus(spec: &FixtureSpec, out_dir: &Path) -> Result<CorpusManifest> {
    let corpus = FixtureCorpus::new(spec.clone())?;
    let dumps = out_dir.join("dumps");
    fs::create_dir_all(&dumps).map_err(|e| Error::io(&dumps, e))?;

    let annotations: Vec<SampleAnnotation> = (0..spec.num_samples)
        .into_par_iter()
        .map(|i| {
            let s = corpus.sample(i)?;
            write_dump(&s.dump, &dumps.join(format!("{}.lhad", s.dump.sample_id())))?;
            Ok(s.annotation)
        })
        .collect::<Result<_>>()?;

    let manifest = CorpusManifest {
        format_version: MANIFEST_VERSION,
        samples: annotations
            .iter()
            .map(|a| ManifestEntry {
                sample_id: a.sample_id.clone(),
                dump_path: Path::new("dumps").join(format!("{}.lhad", a.sample_id)),
                has_annotation: true,
            })
            .collect(),
    };
    write_manifest(&manifest, &out_dir.join(MANIFEST_FILE))?;
    write_annotations(&annotations, &out_dir.join(ANNOTATIONS_FILE))?;
    crate::io::write_json(&out_dir.join(SPEC_FILE), spec)?;
    Ok(manifest)
}

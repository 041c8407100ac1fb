//! Training-free grounding: smooth and sum the localization heads' maps,
//! binarize the combined map, and box the dominant region.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{check_geometry, sorted_indices, Corpus};
use crate::entropy::{binarize_at_mean, connected_components};
use crate::error::{Error, Result};
use crate::hull::{convex_hull, doubled_area};
use crate::rle;
use crate::selection::{greedy_heads, sample_candidates, Criteria, Strategy};
use crate::types::{AttentionDump, AttnMap, BBox, BinaryMask, Geometry, HeadId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Mirror about the border edge: `c b a | a b c`.
    #[default]
    Reflect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingConfig {
    pub kernel_size: usize,
    pub sigma: f64,
    pub smoothing_enabled: bool,
    pub padding: Padding,
    pub strategy: Strategy,
    /// Use the arg-max cell as a one-cell box when nothing exceeds the mean.
    pub fallback_argmax: bool,
}

impl Default for GroundingConfig {
    fn default() -> Self {
        GroundingConfig {
            kernel_size: 7,
            sigma: 1.0,
            smoothing_enabled: true,
            padding: Padding::Reflect,
            strategy: Strategy::Fixed,
            fallback_argmax: false,
        }
    }
}

impl GroundingConfig {
    /// Kernel and sigma are not checked when smoothing is disabled.
    pub fn validate(&self, grid_size: usize) -> Result<()> {
        if !self.smoothing_enabled {
            return Ok(());
        }
        let max = 2 * grid_size - 1;
        if self.kernel_size == 0 || self.kernel_size.is_multiple_of(2) || self.kernel_size > max {
            return Err(Error::KernelSize { kernel: self.kernel_size, grid: grid_size, max });
        }
        if !self.sigma.is_finite() || self.sigma < 0.0 {
            return Err(Error::InvalidSigma(self.sigma));
        }
        Ok(())
    }

    /// True when smoothing reduces to the identity.
    fn is_identity(&self) -> bool {
        !self.smoothing_enabled || self.sigma == 0.0 || self.kernel_size == 1
    }
}

/// Normalized 1-D Gaussian taps for offsets `-(k-1)/2 ..= (k-1)/2`.
pub fn gaussian_kernel(kernel_size: usize, sigma: f64) -> Vec<f64> {
    let r = (kernel_size / 2) as i64;
    let taps: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

fn reflect(i: i64, n: i64) -> usize {
    let j = if i < 0 {
        -i - 1
    } else if i >= n {
        2 * n - i - 1
    } else {
        i
    };
    j as usize
}

/// Separable Gaussian blur with reflected borders.
pub fn gaussian_smooth(map: &AttnMap, config: &GroundingConfig) -> Result<AttnMap> {
    let p = map.grid_size();
    config.validate(p)?;
    if config.is_identity() {
        return Ok(map.clone());
    }
    let taps = gaussian_kernel(config.kernel_size, config.sigma);
    let r = (config.kernel_size / 2) as i64;
    let n = p as i64;
    let src = map.values();

    let mut horizontal = vec![0f64; p * p];
    for row in 0..p {
        for col in 0..p {
            horizontal[row * p + col] = taps
                .iter()
                .enumerate()
                .map(|(t, w)| w * src[row * p + reflect(col as i64 + t as i64 - r, n)] as f64)
                .sum();
        }
    }
    let mut out = vec![0f32; p * p];
    for row in 0..p {
        for col in 0..p {
            let v: f64 = taps
                .iter()
                .enumerate()
                .map(|(t, w)| w * horizontal[reflect(row as i64 + t as i64 - r, n) * p + col])
                .sum();
            out[row * p + col] = v.max(0.0) as f32;
        }
    }
    AttnMap::new(p, out)
}

/// Element-wise sum of the (optionally smoothed) maps of `heads`.
pub fn assemble_combined_map(dump: &AttentionDump, heads: &[HeadId], config: &GroundingConfig) -> Result<AttnMap> {
    if heads.is_empty() {
        return Err(Error::Config("no heads to assemble".into()));
    }
    let p = dump.grid_size();
    let mut acc = vec![0f64; p * p];
    for &h in heads {
        let map = dump.map(h).ok_or(Error::UnknownHead(h))?;
        let smoothed = gaussian_smooth(map, config)?;
        for (a, &v) in acc.iter_mut().zip(smoothed.values()) {
            *a += v as f64;
        }
    }
    AttnMap::new(p, acc.into_iter().map(|v| v as f32).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundingResult {
    pub heads: Vec<HeadId>,
    pub combined_map: AttnMap,
    pub pseudo_mask_grid: BinaryMask,
    /// Hull of the retained component, in `(col, row)` cell coordinates.
    pub hull: Vec<(i64, i64)>,
    pub bbox_grid: BBox,
    pub bbox_pixels: BBox,
    pub pseudo_mask_pixels: BinaryMask,
    pub used_fallback: bool,
}

/// Scales a grid box to pixels, rounding outward and clamping to the image.
pub fn grid_box_to_pixels(bbox: &BBox, grid_size: usize, image_w: u32, image_h: u32) -> BBox {
    let p = grid_size as u64;
    let floor = |c: u32, size: u32| (c as u64 * size as u64 / p) as u32;
    let ceil = |c: u32, size: u32| ((c as u64 * size as u64).div_ceil(p)).min(size as u64) as u32;
    let (x0, y0) = (floor(bbox.x_min, image_w), floor(bbox.y_min, image_h));
    let (x1, y1) = (ceil(bbox.x_max, image_w), ceil(bbox.y_max, image_h));
    // a cell narrower than a pixel still yields a one-pixel box
    BBox {
        x_min: x0.min(image_w.saturating_sub(1)),
        y_min: y0.min(image_h.saturating_sub(1)),
        x_max: x1.max(x0 + 1).min(image_w.max(1)),
        y_max: y1.max(y0 + 1).min(image_h.max(1)),
    }
}

/// Nearest-neighbour upscaling of a grid mask to image resolution.
pub fn upscale_mask(mask: &BinaryMask, image_w: u32, image_h: u32) -> Result<BinaryMask> {
    let (gw, gh) = (mask.width() as u64, mask.height() as u64);
    let (w, h) = (image_w as u64, image_h as u64);
    let mut bits = Vec::with_capacity((w * h) as usize);
    for y in 0..h {
        let row = (y * gh / h) as usize;
        for x in 0..w {
            bits.push(mask.get(row, (x * gw / w) as usize));
        }
    }
    BinaryMask::new(image_w as usize, image_h as usize, bits)
}

/// Grid mask whose cells are set when at least half of the pixels they
/// cover are set.
pub fn downsample_mask(mask: &BinaryMask, grid_size: usize) -> Result<BinaryMask> {
    let (w, h, p) = (mask.width(), mask.height(), grid_size);
    let span = |i: usize, size: usize| (i * size / p, (i + 1) * size / p);
    let mut bits = Vec::with_capacity(p * p);
    for r in 0..p {
        let (y0, y1) = span(r, h);
        for c in 0..p {
            let (x0, x1) = span(c, w);
            let area = (y1 - y0) * (x1 - x0);
            let fg = (y0..y1).flat_map(|y| (x0..x1).map(move |x| (y, x))).filter(|&(y, x)| mask.get(y, x)).count();
            bits.push(area > 0 && 2 * fg >= area);
        }
    }
    BinaryMask::new(p, p, bits)
}

/// Binarizes the combined map and boxes its largest region.
///
/// Regions are compared by cell count, then by hull area; remaining ties go
/// to the region that comes first in row-major order.
pub fn extract_bbox(combined: &AttnMap, image_w: u32, image_h: u32) -> Result<GroundingResult> {
    let p = combined.grid_size();
    let mask = binarize_at_mean(combined);
    let components = connected_components(&mask);

    // cell count, doubled hull area, component index, hull
    type Candidate = (usize, i64, usize, Vec<(i64, i64)>);
    let mut best: Option<Candidate> = None;
    for (i, cells) in components.components.iter().enumerate() {
        let points: Vec<(i64, i64)> = cells.iter().map(|&(r, c)| (c as i64, r as i64)).collect();
        let hull = convex_hull(&points);
        let area = doubled_area(&hull);
        let better = match &best {
            None => true,
            Some((n, a, _, _)) => (cells.len(), area) > (*n, *a),
        };
        if better {
            best = Some((cells.len(), area, i, hull));
        }
    }
    let (_, _, idx, hull) = best.ok_or(Error::NoForeground)?;
    let cells = &components.components[idx];
    let (mut r0, mut c0, mut r1, mut c1) = (usize::MAX, usize::MAX, 0, 0);
    for &(r, c) in cells {
        r0 = r0.min(r);
        c0 = c0.min(c);
        r1 = r1.max(r);
        c1 = c1.max(c);
    }
    let bbox_grid = BBox::new(c0 as u32, r0 as u32, c1 as u32 + 1, r1 as u32 + 1)?;
    Ok(GroundingResult {
        heads: Vec::new(),
        combined_map: combined.clone(),
        pseudo_mask_pixels: upscale_mask(&mask, image_w, image_h)?,
        pseudo_mask_grid: mask,
        hull,
        bbox_pixels: grid_box_to_pixels(&bbox_grid, p, image_w, image_h),
        bbox_grid,
        used_fallback: false,
    })
}

fn argmax_fallback(combined: &AttnMap, image_w: u32, image_h: u32) -> Result<GroundingResult> {
    let p = combined.grid_size();
    let (r, c) = combined.argmax();
    let mut bits = vec![false; p * p];
    bits[r * p + c] = true;
    let mask = BinaryMask::new(p, p, bits)?;
    let bbox_grid = BBox::new(c as u32, r as u32, c as u32 + 1, r as u32 + 1)?;
    Ok(GroundingResult {
        heads: Vec::new(),
        combined_map: combined.clone(),
        pseudo_mask_pixels: upscale_mask(&mask, image_w, image_h)?,
        pseudo_mask_grid: mask,
        hull: vec![(c as i64, r as i64)],
        bbox_pixels: grid_box_to_pixels(&bbox_grid, p, image_w, image_h),
        bbox_grid,
        used_fallback: true,
    })
}

/// Where a sample's heads come from.
#[derive(Debug, Clone, PartialEq)]
pub enum HeadChoice<'a> {
    /// The same corpus-level heads for every sample.
    Fixed(&'a [HeadId]),
    /// Per-sample top-k under a criterion.
    Greedy { analysed: &'a [HeadId], tau: f64, top_k: usize, criteria: Criteria },
}

impl HeadChoice<'_> {
    pub fn heads_for(&self, dump: &AttentionDump) -> Vec<HeadId> {
        match self {
            HeadChoice::Fixed(heads) => heads.to_vec(),
            HeadChoice::Greedy { analysed, tau, top_k, criteria } => {
                let eligible = sample_candidates(dump, analysed, *tau, *criteria);
                greedy_heads(dump, &eligible, *top_k, *criteria)
            }
        }
    }
}

/// Smooth, assemble and box one sample.
pub fn ground_sample(dump: &AttentionDump, choice: &HeadChoice<'_>, config: &GroundingConfig) -> Result<GroundingResult> {
    let heads = choice.heads_for(dump);
    if heads.is_empty() {
        return Err(Error::Config(format!("{}: no heads available for grounding", dump.sample_id())));
    }
    let combined = assemble_combined_map(dump, &heads, config)?;
    let (w, h) = (dump.image_width(), dump.image_height());
    let mut result = match extract_bbox(&combined, w, h) {
        Err(Error::NoForeground) if config.fallback_argmax => argmax_fallback(&combined, w, h)?,
        other => other?,
    };
    result.heads = heads;
    Ok(result)
}

/// Called with each sample that produced a box, e.g. to render overlays.
pub type ResultSink<'a> = &'a (dyn Fn(&AttentionDump, &GroundingResult) -> Result<()> + Sync);

/// Grounds every sample, in sample-id order. Samples without foreground
/// become misses unless the config asks for the arg-max fallback.
///
/// With `expected` set, a sample of any other geometry is an error naming it.
pub fn ground_corpus<C: Corpus + ?Sized>(
    corpus: &C,
    choice: &HeadChoice<'_>,
    config: &GroundingConfig,
    expected: Option<Geometry>,
    sink: Option<ResultSink<'_>>,
) -> Result<Vec<GroundingRecord>> {
    sorted_indices(corpus)
        .par_iter()
        .map(|&i| {
            let dump = corpus.load(i)?;
            if let Some(g) = expected {
                check_geometry(&dump, g)?;
            }
            match ground_sample(&dump, choice, config) {
                Ok(result) => {
                    if let Some(f) = sink {
                        f(&dump, &result)?;
                    }
                    Ok(GroundingRecord::from_result(&dump, &result))
                }
                Err(Error::NoForeground) => Ok(GroundingRecord::miss(&dump, choice.heads_for(&dump))),
                Err(e) => Err(e),
            }
        })
        .collect()
}

/// Serializable per-sample grounding output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingRecord {
    pub sample_id: String,
    pub image_width: u32,
    pub image_height: u32,
    pub heads: Vec<HeadId>,
    /// Absent when the combined map had no foreground.
    pub bbox_grid: Option<BBox>,
    pub bbox_pixels: Option<BBox>,
    /// Pixel pseudo-mask, run-length coded from background.
    pub mask_rle: Vec<u32>,
    pub used_fallback: bool,
}

impl GroundingRecord {
    pub fn from_result(dump: &AttentionDump, result: &GroundingResult) -> Self {
        GroundingRecord {
            sample_id: dump.sample_id().to_string(),
            image_width: dump.image_width(),
            image_height: dump.image_height(),
            heads: result.heads.clone(),
            bbox_grid: Some(result.bbox_grid),
            bbox_pixels: Some(result.bbox_pixels),
            mask_rle: rle::encode(&result.pseudo_mask_pixels),
            used_fallback: result.used_fallback,
        }
    }

    /// A sample whose combined map had nothing above the mean.
    pub fn miss(dump: &AttentionDump, heads: Vec<HeadId>) -> Self {
        let pixels = dump.image_width() as u64 * dump.image_height() as u64;
        GroundingRecord {
            sample_id: dump.sample_id().to_string(),
            image_width: dump.image_width(),
            image_height: dump.image_height(),
            heads,
            bbox_grid: None,
            bbox_pixels: None,
            mask_rle: vec![pixels as u32],
            used_fallback: false,
        }
    }

    /// A record whose mask is exactly the (optional) pixel box.
    pub fn from_box(sample_id: &str, image_width: u32, image_height: u32, bbox: Option<BBox>) -> Self {
        let (w, h) = (image_width as usize, image_height as usize);
        let mask = match bbox {
            Some(b) => BinaryMask::from_box(w, h, &b),
            None => BinaryMask::empty(w, h),
        }
        .expect("image dimensions are positive");
        GroundingRecord {
            sample_id: sample_id.to_string(),
            image_width,
            image_height,
            heads: Vec::new(),
            bbox_grid: None,
            bbox_pixels: bbox,
            mask_rle: rle::encode(&mask),
            used_fallback: false,
        }
    }

    pub fn pixel_mask(&self) -> Result<BinaryMask> {
        rle::decode(&self.mask_rle, self.image_width as usize, self.image_height as usize)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn delta(p: usize, r: usize, c: usize) -> AttnMap {
        let mut v = vec![0f32; p * p];
        v[r * p + c] = 1.0;
        AttnMap::new(p, v).unwrap()
    }

    fn random_map(rng: &mut ChaCha8Rng, p: usize) -> AttnMap {
        let v: Vec<f32> = (0..p * p).map(|_| rng.random::<f32>() / (p * p) as f32).collect();
        AttnMap::new(p, v).unwrap()
    }

    /// Direct 2-D convolution over an explicitly reflected, padded copy.
    fn dense_oracle(map: &AttnMap, k: usize, sigma: f64) -> Vec<f64> {
        let p = map.grid_size() as i64;
        let r = (k / 2) as i64;
        let size = p + 2 * r;
        let mut padded = vec![0f64; (size * size) as usize];
        for y in 0..size {
            for x in 0..size {
                let mirror = |i: i64| if i < 0 { -i - 1 } else if i >= p { 2 * p - i - 1 } else { i };
                let (sy, sx) = (mirror(y - r), mirror(x - r));
                padded[(y * size + x) as usize] = map.get(sy as usize, sx as usize) as f64;
            }
        }
        let mut weights = vec![0f64; k * k];
        let mut total = 0.0;
        for dy in -r..=r {
            for dx in -r..=r {
                let w = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
                weights[((dy + r) * k as i64 + dx + r) as usize] = w;
                total += w;
            }
        }
        let mut out = vec![0f64; (p * p) as usize];
        for y in 0..p {
            for x in 0..p {
                let mut acc = 0.0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let w = weights[((dy + r) * k as i64 + dx + r) as usize] / total;
                        acc += w * padded[((y + r + dy) * size + x + r + dx) as usize];
                    }
                }
                out[(y * p + x) as usize] = acc;
            }
        }
        out
    }

    #[test]
    fn delta_center_weight() {
        let taps: [f64; 4] = [1.0, (-0.5f64).exp(), (-2.0f64).exp(), (-4.5f64).exp()];
        let total = taps[0] + 2.0 * (taps[1] + taps[2] + taps[3]);
        let center = taps[0] / total;
        assert!((center - 0.3990).abs() < 1e-4);
        let out = gaussian_smooth(&delta(15, 7, 7), &GroundingConfig::default()).unwrap();
        assert!((out.get(7, 7) as f64 - center * center).abs() < 1e-7);
        assert!((out.get(7, 7) as f64 - 0.1592).abs() < 1e-4);
    }

    #[test]
    fn constant_map_unchanged() {
        let map = AttnMap::new(6, vec![1.0 / 36.0; 36]).unwrap();
        let out = gaussian_smooth(&map, &GroundingConfig::default()).unwrap();
        for (a, b) in out.values().iter().zip(map.values()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn smoothing_matches_dense_oracle_and_keeps_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (p, k, sigma) in [(8, 7, 1.0), (5, 9, 1.4), (24, 7, 1.0), (4, 3, 0.4), (6, 11, 1.8)] {
            let map = random_map(&mut rng, p);
            let cfg = GroundingConfig { kernel_size: k, sigma, ..GroundingConfig::default() };
            let got = gaussian_smooth(&map, &cfg).unwrap();
            let want = dense_oracle(&map, k, sigma);
            for (a, b) in got.values().iter().zip(&want) {
                assert!((*a as f64 - b).abs() < 1e-7, "p={p} k={k}");
            }
            assert!((got.sum() - map.sum()).abs() < 1e-4);
            assert!((want.iter().sum::<f64>() - map.sum()).abs() < 1e-4);
        }
    }

    #[test]
    fn kernel_limits() {
        let map = AttnMap::zeros(4);
        let too_big = GroundingConfig { kernel_size: 9, ..GroundingConfig::default() };
        assert!(matches!(gaussian_smooth(&map, &too_big), Err(Error::KernelSize { .. })));
        let even = GroundingConfig { kernel_size: 4, ..GroundingConfig::default() };
        assert!(gaussian_smooth(&map, &even).is_err());
        let neg = GroundingConfig { sigma: -1.0, ..GroundingConfig::default() };
        assert!(matches!(gaussian_smooth(&map, &neg), Err(Error::InvalidSigma(_))));
    }

    #[test]
    fn zero_sigma_and_unit_kernel_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let map = random_map(&mut rng, 7);
        for cfg in [
            GroundingConfig { sigma: 0.0, ..GroundingConfig::default() },
            GroundingConfig { kernel_size: 1, ..GroundingConfig::default() },
            GroundingConfig { smoothing_enabled: false, ..GroundingConfig::default() },
        ] {
            assert_eq!(gaussian_smooth(&map, &cfg).unwrap(), map);
        }
    }

    fn dump_of(maps: Vec<AttnMap>) -> AttentionDump {
        let p = maps[0].grid_size();
        let n = maps.len();
        AttentionDump::new("s", p, 1, n, maps, 10 * p as u32, 10 * p as u32, "x").unwrap()
    }

    #[test]
    fn assemble_identity_linearity_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let maps: Vec<AttnMap> = (0..3).map(|_| random_map(&mut rng, 6)).collect();
        let d = dump_of(maps.clone());
        let off = GroundingConfig { smoothing_enabled: false, ..GroundingConfig::default() };

        let single = assemble_combined_map(&d, &[HeadId::new(0, 1)], &off).unwrap();
        assert_eq!(single, maps[1]);

        let all: Vec<HeadId> = d.heads().collect();
        let combined = assemble_combined_map(&d, &all, &off).unwrap();
        for i in 0..36 {
            let want = (maps[0].values()[i] as f64 + maps[1].values()[i] as f64 + maps[2].values()[i] as f64) as f32;
            assert_eq!(combined.values()[i], want);
        }

        let twin = dump_of(vec![maps[0].clone(), maps[0].clone()]);
        let doubled = assemble_combined_map(&twin, &[HeadId::new(0, 0), HeadId::new(0, 1)], &off).unwrap();
        for (a, b) in doubled.values().iter().zip(maps[0].values()) {
            assert_eq!(*a, 2.0 * b);
        }
    }

    #[test]
    fn assemble_unknown_head() {
        let d = dump_of(vec![AttnMap::zeros(3)]);
        match assemble_combined_map(&d, &[HeadId::new(0, 4)], &GroundingConfig::default()) {
            Err(Error::UnknownHead(h)) => assert_eq!(h, HeadId::new(0, 4)),
            other => panic!("{other:?}"),
        }
    }

    fn map_from_cells(p: usize, cells: &[(usize, usize)]) -> AttnMap {
        let mut v = vec![0f32; p * p];
        for &(r, c) in cells {
            v[r * p + c] = 0.01;
        }
        AttnMap::new(p, v).unwrap()
    }

    #[test]
    fn rectangle_box_is_exact() {
        let cells: Vec<_> = (2..5).flat_map(|r| (3..7).map(move |c| (r, c))).collect();
        let res = extract_bbox(&map_from_cells(10, &cells), 100, 100).unwrap();
        assert_eq!(res.bbox_grid, BBox::new(3, 2, 7, 5).unwrap());
        assert_eq!(res.bbox_pixels, BBox::new(30, 20, 70, 50).unwrap());
    }

    #[test]
    fn largest_component_wins() {
        let mut cells: Vec<_> = (0..2).flat_map(|r| (0..5).map(move |c| (r, c))).collect();
        cells.extend([(7, 7), (7, 8), (8, 7)]);
        let res = extract_bbox(&map_from_cells(10, &cells), 10, 10).unwrap();
        assert_eq!(res.bbox_grid, BBox::new(0, 0, 5, 2).unwrap());
    }

    #[test]
    fn equal_count_prefers_larger_hull() {
        let mut cells = vec![(0, 0), (0, 1), (1, 0), (1, 1)];
        cells.extend([(5, 5), (6, 6), (7, 7), (7, 5)]);
        let res = extract_bbox(&map_from_cells(10, &cells), 10, 10).unwrap();
        // block hull doubled area 2, triangle (5,5)-(7,7)-(7,5) doubled area 4
        assert_eq!(res.bbox_grid, BBox::new(5, 5, 8, 8).unwrap());
    }

    #[test]
    fn empty_foreground() {
        let map = AttnMap::new(4, vec![0.01; 16]).unwrap();
        assert!(matches!(extract_bbox(&map, 8, 8), Err(Error::NoForeground)));
        let d = dump_of(vec![map]);
        let cfg = GroundingConfig { fallback_argmax: true, ..GroundingConfig::default() };
        let res = ground_sample(&d, &HeadChoice::Fixed(&[HeadId::new(0, 0)]), &cfg).unwrap();
        assert!(res.used_fallback);
        assert_eq!(res.bbox_grid.area(), 1);
    }

    #[test]
    fn pixel_box_rounds_outward() {
        let b = BBox::new(1, 1, 2, 3).unwrap();
        // 3 cells over 10 pixels: cell 1 spans [3.33, 6.67)
        assert_eq!(grid_box_to_pixels(&b, 3, 10, 10), BBox::new(3, 3, 7, 10).unwrap());
    }

    #[test]
    fn mask_scaling() {
        let grid = BinaryMask::new(2, 2, vec![true, false, false, true]).unwrap();
        let up = upscale_mask(&grid, 4, 4).unwrap();
        assert_eq!(up.count(), 8);
        assert!(up.get(0, 1) && up.get(3, 3) && !up.get(0, 2));
        assert_eq!(downsample_mask(&up, 2).unwrap(), grid);
        // 3 of 4 pixels set -> cell on; 1 of 4 -> off
        let mut bits = vec![false; 16];
        for i in [0, 1, 4, 2] {
            bits[i] = true;
        }
        let m = BinaryMask::new(4, 4, bits).unwrap();
        let d = downsample_mask(&m, 2).unwrap();
        assert_eq!(d.bits(), &[true, false, false, false]);
    }

    #[test]
    fn smoothing_keeps_interior_peak() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let p = 12;
            let (r, c) = (rng.random_range(3..p - 3), rng.random_range(3..p - 3));
            let mut v: Vec<f32> = (0..p * p).map(|_| rng.random::<f32>() * 1e-4).collect();
            v[r * p + c] = 0.5;
            let d = dump_of(vec![AttnMap::new(p, v).unwrap()]);
            let heads = [HeadId::new(0, 0)];
            let on = assemble_combined_map(&d, &heads, &GroundingConfig::default()).unwrap();
            let off = GroundingConfig { smoothing_enabled: false, ..GroundingConfig::default() };
            let raw = assemble_combined_map(&d, &heads, &off).unwrap();
            assert_eq!(on.argmax(), raw.argmax());
        }
    }

    proptest::proptest! {
        #[test]
        fn boxes_stay_in_bounds(bits in proptest::collection::vec(proptest::bool::ANY, 49), w in 1u32..90, h in 1u32..90) {
            let vals: Vec<f32> = bits.iter().map(|&b| if b { 0.02 } else { 0.0 }).collect();
            let map = AttnMap::new(7, vals).unwrap();
            if let Ok(res) = extract_bbox(&map, w, h) {
                proptest::prop_assert!(res.bbox_grid.within(7, 7));
                proptest::prop_assert!(res.bbox_pixels.within(w, h));
                proptest::prop_assert!(res.bbox_pixels.x_min < res.bbox_pixels.x_max);
            }
        }

        #[test]
        fn assembly_is_linear(vals in proptest::collection::vec(0f32..0.05, 32), alpha in 0.1f32..4.0) {
            let maps = vec![AttnMap::new(4, vals[..16].to_vec()).unwrap(), AttnMap::new(4, vals[16..].to_vec()).unwrap()];
            let scaled: Vec<AttnMap> = maps.iter().map(|m| AttnMap::new(4, m.values().iter().map(|v| v * alpha).collect()).unwrap()).collect();
            let off = GroundingConfig { smoothing_enabled: false, ..GroundingConfig::default() };
            let heads = [HeadId::new(0, 0), HeadId::new(0, 1)];
            let base = assemble_combined_map(&dump_of(maps), &heads, &off).unwrap();
            let s = assemble_combined_map(&dump_of(scaled), &heads, &off).unwrap();
            for (a, b) in s.values().iter().zip(base.values()) {
                proptest::prop_assert!((a - alpha * b).abs() <= 1e-6 * (1.0 + a.abs()));
            }
        }
    }
}

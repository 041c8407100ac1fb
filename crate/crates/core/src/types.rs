//! Domain types shared by every stage of the pipeline.
//!
//! All values are immutable once built. Constructors enforce structural
//! invariants (shapes, lengths); value-level checks such as non-negativity and
//! the softmax mass bound are reported by [`validate_dump`] so that a corpus
//! can be audited without failing on the first bad head.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Slack allowed on the image-token share of a softmax row.
pub const MASS_EPSILON: f64 = 1e-4;

/// A single attention head, addressed by decoder layer and head index.
///
/// Ordering is lexicographic on `(layer, head)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HeadId {
    pub layer: u16,
    pub head: u16,
}

impl HeadId {
    pub const fn new(layer: u16, head: u16) -> Self {
        HeadId { layer, head }
    }

    /// Position of this head in a layer-major dense array.
    pub fn flat_index(self, num_heads: usize) -> usize {
        self.layer as usize * num_heads + self.head as usize
    }
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{} H{}", self.layer, self.head)
    }
}

impl FromStr for HeadId {
    type Err = Error;

    /// Accepts `L14 H1`, `L14H1` and `14:1`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Invalid(format!("cannot parse head id {s:?}"));
        let s = s.trim();
        let (layer, head) = if let Some((l, h)) = s.split_once(':') {
            (l.trim(), h.trim())
        } else {
            let rest = s.strip_prefix('L').ok_or_else(bad)?;
            let (l, h) = rest.split_once('H').ok_or_else(bad)?;
            (l.trim(), h.trim())
        };
        Ok(HeadId {
            layer: layer.parse().map_err(|_| bad())?,
            head: head.parse().map_err(|_| bad())?,
        })
    }
}

/// A `P x P` grid of non-negative attention weights, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnMap {
    grid_size: usize,
    values: Vec<f32>,
}

impl AttnMap {
    pub fn new(grid_size: usize, values: Vec<f32>) -> Result<Self> {
        if grid_size == 0 {
            return Err(Error::Invalid("grid size must be positive".into()));
        }
        if values.len() != grid_size * grid_size {
            return Err(Error::DimensionMismatch(format!(
                "map of grid {grid_size} needs {} values, got {}",
                grid_size * grid_size,
                values.len()
            )));
        }
        Ok(AttnMap { grid_size, values })
    }

    pub fn zeros(grid_size: usize) -> Self {
        AttnMap { grid_size, values: vec![0.0; grid_size * grid_size] }
    }

    /// Builds a map from rows of a square grid.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let p = rows.len();
        if rows.iter().any(|r| r.len() != p) {
            return Err(Error::DimensionMismatch("rows do not form a square grid".into()));
        }
        AttnMap::new(p, rows.concat())
    }

    pub fn to_rows(&self) -> Vec<Vec<f32>> {
        self.values.chunks(self.grid_size).map(<[f32]>::to_vec).collect()
    }

    pub fn grid_size(&self) -> usize {
        self.grid_size
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.grid_size + col]
    }

    /// Sum of all cells, accumulated in 64-bit.
    pub fn sum(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.values.len() as f64
    }

    /// Row-major index of the largest cell; the first one wins on ties.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        (best / self.grid_size, best % self.grid_size)
    }
}

/// Per-sample attention of the last text token over image tokens, for every head.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionDump {
    pub(crate) sample_id: String,
    pub(crate) grid_size: usize,
    pub(crate) num_layers: usize,
    pub(crate) num_heads: usize,
    pub(crate) maps: Vec<AttnMap>,
    pub(crate) image_width: u32,
    pub(crate) image_height: u32,
    pub(crate) text: String,
}

impl AttentionDump {
    /// `maps` is layer-major: `maps[layer * num_heads + head]`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        sample_id: impl Into<String>,
        grid_size: usize,
        num_layers: usize,
        num_heads: usize,
        maps: Vec<AttnMap>,
        image_width: u32,
        image_height: u32,
        text: impl Into<String>,
    ) -> Result<Self> {
        let sample_id = sample_id.into();
        if grid_size == 0 || num_layers == 0 || num_heads == 0 {
            return Err(Error::Invalid(format!(
                "{sample_id}: grid, layer and head counts must be positive"
            )));
        }
        if maps.len() != num_layers * num_heads {
            return Err(Error::DimensionMismatch(format!(
                "{sample_id}: expected {} maps, got {}",
                num_layers * num_heads,
                maps.len()
            )));
        }
        if let Some(i) = maps.iter().position(|m| m.grid_size() != grid_size) {
            return Err(Error::DimensionMismatch(format!(
                "{sample_id}: map {i} has grid {} but dump grid is {grid_size}",
                maps[i].grid_size()
            )));
        }
        Ok(AttentionDump {
            sample_id,
            grid_size,
            num_layers,
            num_heads,
            maps,
            image_width,
            image_height,
            text: text.into(),
        })
    }

    pub fn sample_id(&self) -> &str {
        &self.sample_id
    }
    pub fn grid_size(&self) -> usize {
        self.grid_size
    }
    pub fn num_layers(&self) -> usize {
        self.num_layers
    }
    pub fn num_heads(&self) -> usize {
        self.num_heads
    }
    pub fn image_width(&self) -> u32 {
        self.image_width
    }
    pub fn image_height(&self) -> u32 {
        self.image_height
    }
    pub fn text(&self) -> &str {
        &self.text
    }
    pub fn maps(&self) -> &[AttnMap] {
        &self.maps
    }

    pub fn geometry(&self) -> Geometry {
        Geometry {
            grid_size: self.grid_size,
            num_layers: self.num_layers,
            num_heads: self.num_heads,
        }
    }

    pub fn contains(&self, head: HeadId) -> bool {
        (head.layer as usize) < self.num_layers && (head.head as usize) < self.num_heads
    }

    pub fn map(&self, head: HeadId) -> Option<&AttnMap> {
        self.contains(head).then(|| &self.maps[head.flat_index(self.num_heads)])
    }

    /// Every head in `(layer, head)` order.
    pub fn heads(&self) -> impl Iterator<Item = HeadId> + '_ {
        self.geometry().heads()
    }
}

/// Shape shared by every dump in a corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub grid_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
}

impl Geometry {
    pub fn heads(self) -> impl Iterator<Item = HeadId> {
        (0..self.num_layers).flat_map(move |l| {
            (0..self.num_heads).map(move |h| HeadId::new(l as u16, h as u16))
        })
    }

    /// Heads whose layer is not in the first `excluded_layers` layers.
    pub fn analysed_heads(self, excluded_layers: usize) -> Vec<HeadId> {
        self.heads().filter(|h| h.layer as usize >= excluded_layers).collect()
    }

    pub fn contains(self, head: HeadId) -> bool {
        (head.layer as usize) < self.num_layers && (head.head as usize) < self.num_heads
    }
}

/// Row-major boolean mask, used both at grid and at pixel resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Invalid("mask dimensions must be positive".into()));
        }
        if bits.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "mask {width}x{height} needs {} bits, got {}",
                width * height,
                bits.len()
            )));
        }
        Ok(BinaryMask { width, height, bits })
    }

    pub fn empty(width: usize, height: usize) -> Result<Self> {
        BinaryMask::new(width, height, vec![false; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Fills the half-open box; coordinates are clamped to the mask.
    pub fn from_box(width: usize, height: usize, bbox: &BBox) -> Result<Self> {
        let mut bits = vec![false; width * height];
        let (x1, y1) = ((bbox.x_max as usize).min(width), (bbox.y_max as usize).min(height));
        for y in (bbox.y_min as usize).min(y1)..y1 {
            for x in (bbox.x_min as usize).min(x1)..x1 {
                bits[y * width + x] = true;
            }
        }
        BinaryMask::new(width, height, bits)
    }
}

/// Axis-aligned box over `[x_min, x_max) x [y_min, y_max)`, zero-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[u32; 4]", into = "[u32; 4]")]
pub struct BBox {
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
}

impl BBox {
    pub fn new(x_min: u32, y_min: u32, x_max: u32, y_max: u32) -> Result<Self> {
        if x_min >= x_max || y_min >= y_max {
            return Err(Error::Invalid(format!(
                "degenerate box [{x_min}, {y_min}, {x_max}, {y_max}]"
            )));
        }
        Ok(BBox { x_min, y_min, x_max, y_max })
    }

    pub fn width(&self) -> u32 {
        self.x_max - self.x_min
    }
    pub fn height(&self) -> u32 {
        self.y_max - self.y_min
    }
    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    pub fn within(&self, width: u32, height: u32) -> bool {
        self.x_max <= width && self.y_max <= height
    }
}

impl TryFrom<[u32; 4]> for BBox {
    type Error = Error;
    fn try_from(v: [u32; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [u32; 4] {
    fn from(b: BBox) -> Self {
        [b.x_min, b.y_min, b.x_max, b.y_max]
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {})", self.x_min, self.y_min, self.x_max, self.y_max)
    }
}

/// Ground truth for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleAnnotation {
    pub sample_id: String,
    pub image_width: u32,
    pub image_height: u32,
    pub text: String,
    pub gt_bbox: BBox,
    pub gt_mask: Option<BinaryMask>,
}

impl SampleAnnotation {
    pub fn validate(&self) -> Result<()> {
        if self.image_width == 0 || self.image_height == 0 {
            return Err(Error::Invalid(format!("{}: empty image", self.sample_id)));
        }
        if !self.gt_bbox.within(self.image_width, self.image_height) {
            return Err(Error::Invalid(format!(
                "{}: gt_bbox {} outside {}x{} image",
                self.sample_id, self.gt_bbox, self.image_width, self.image_height
            )));
        }
        if let Some(mask) = &self.gt_mask {
            if mask.width() != self.image_width as usize
                || mask.height() != self.image_height as usize
            {
                return Err(Error::DimensionMismatch(format!(
                    "{}: gt_mask {}x{} does not match image {}x{}",
                    self.sample_id,
                    mask.width(),
                    mask.height(),
                    self.image_width,
                    self.image_height
                )));
            }
        }
        Ok(())
    }
}

/// One failed invariant, located by head or by field name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub location: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.location, self.message)
    }
}

/// Reports every value-level invariant violation in a dump. Empty means valid.
pub fn validate_dump(dump: &AttentionDump) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |location: String, message: String| out.push(Violation { location, message });

    if dump.sample_id.is_empty() {
        push("sample_id".into(), "empty".into());
    }
    if dump.image_width == 0 {
        push("image_width".into(), "must be positive".into());
    }
    if dump.image_height == 0 {
        push("image_height".into(), "must be positive".into());
    }
    for head in dump.heads() {
        let map = &dump.maps[head.flat_index(dump.num_heads)];
        let loc = head.to_string();
        if map.values().iter().any(|v| !v.is_finite()) {
            push(loc, "non-finite weight".into());
            continue;
        }
        if map.values().iter().any(|&v| v < 0.0) {
            push(loc.clone(), "negative weight".into());
        }
        let sum = map.sum();
        if sum > 1.0 + MASS_EPSILON {
            push(loc, format!("sum exceeds 1+ε ({sum:.6})"));
        }
    }
    out
}

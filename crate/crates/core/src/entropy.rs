//! Spatial entropy of an attention map: binarize at the mean, label the
//! 8-connected components of the support, and take the Shannon entropy of
//! their size distribution.

use crate::types::{AttnMap, BinaryMask};

/// Entropy reported for a map with no cell strictly above its mean.
pub const MAX_ENTROPY: f64 = f64::INFINITY;

/// Sets exactly the cells strictly greater than the map mean.
pub fn binarize_at_mean(map: &AttnMap) -> BinaryMask {
    let mean = map.mean();
    let p = map.grid_size();
    let bits = map.values().iter().map(|&v| v as f64 > mean).collect();
    BinaryMask::new(p, p, bits).expect("map is square and non-empty")
}

/// Maximal 8-connected groups of set cells.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComponentSet {
    pub width: usize,
    pub height: usize,
    /// Cells as `(row, col)`, each list in row-major order. Components are
    /// ordered by their first row-major cell.
    pub components: Vec<Vec<(usize, usize)>>,
}

impl ComponentSet {
    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.components.iter().map(Vec::len).collect()
    }

    pub fn support_size(&self) -> usize {
        self.components.iter().map(Vec::len).sum()
    }
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn with_capacity(n: usize) -> Self {
        DisjointSet { parent: Vec::with_capacity(n) }
    }

    fn make(&mut self) -> usize {
        self.parent.push(self.parent.len());
        self.parent.len() - 1
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Two-pass union-find labeling with 8-connectivity.
pub fn connected_components(mask: &BinaryMask) -> ComponentSet {
    let (w, h) = (mask.width(), mask.height());
    const NONE: usize = usize::MAX;
    let mut labels = vec![NONE; w * h];
    let mut sets = DisjointSet::with_capacity(w * h / 2 + 1);

    for r in 0..h {
        for c in 0..w {
            if !mask.get(r, c) {
                continue;
            }
            // already-visited neighbours: W, NW, N, NE
            let mut neighbours = [NONE; 4];
            if c > 0 {
                neighbours[0] = labels[r * w + c - 1];
            }
            if r > 0 {
                if c > 0 {
                    neighbours[1] = labels[(r - 1) * w + c - 1];
                }
                neighbours[2] = labels[(r - 1) * w + c];
                if c + 1 < w {
                    neighbours[3] = labels[(r - 1) * w + c + 1];
                }
            }
            let mut label = NONE;
            for &n in neighbours.iter().filter(|&&n| n != NONE) {
                if label == NONE {
                    label = n;
                } else {
                    sets.union(label, n);
                }
            }
            labels[r * w + c] = if label == NONE { sets.make() } else { label };
        }
    }

    // Roots are visited in row-major order of their first cell, which gives
    // the required component ordering directly.
    let mut slot = vec![NONE; sets.parent.len()];
    let mut components: Vec<Vec<(usize, usize)>> = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let l = labels[r * w + c];
            if l == NONE {
                continue;
            }
            let root = sets.find(l);
            if slot[root] == NONE {
                slot[root] = components.len();
                components.push(Vec::new());
            }
            components[slot[root]].push((r, c));
        }
    }
    ComponentSet { width: w, height: h, components }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropyResult {
    pub value: f64,
    pub num_components: usize,
    pub support_size: usize,
}

/// Shannon entropy (natural log) of the distribution `size / total`.
pub fn entropy_of_sizes(sizes: &[usize]) -> f64 {
    if sizes.len() <= 1 {
        return if sizes.is_empty() { MAX_ENTROPY } else { 0.0 };
    }
    let total: usize = sizes.iter().sum();
    let total = total as f64;
    -sizes
        .iter()
        .map(|&s| {
            let p = s as f64 / total;
            p * p.ln()
        })
        .sum::<f64>()
}

pub fn spatial_entropy(map: &AttnMap) -> EntropyResult {
    let components = connected_components(&binarize_at_mean(map));
    let sizes = components.sizes();
    EntropyResult {
        value: entropy_of_sizes(&sizes),
        num_components: sizes.len(),
        support_size: sizes.iter().sum(),
    }
}

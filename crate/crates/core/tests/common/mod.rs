//! Reference implementations used as oracles, written independently of the
//! library code they check.

#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::Path;

use lochead::BinaryMask;

/// Components by recursive flood fill, each a sorted set of `(row, col)`.
pub fn flood_fill_components(mask: &BinaryMask) -> BTreeSet<Vec<(usize, usize)>> {
    fn visit(mask: &BinaryMask, seen: &mut [bool], r: usize, c: usize, out: &mut Vec<(usize, usize)>) {
        let (w, h) = (mask.width(), mask.height());
        if seen[r * w + c] || !mask.get(r, c) {
            return;
        }
        seen[r * w + c] = true;
        out.push((r, c));
        for dr in -1i64..=1 {
            for dc in -1i64..=1 {
                let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                if (dr, dc) != (0, 0) && nr >= 0 && nc >= 0 && (nr as usize) < h && (nc as usize) < w {
                    visit(mask, seen, nr as usize, nc as usize, out);
                }
            }
        }
    }
    let mut seen = vec![false; mask.width() * mask.height()];
    let mut out = BTreeSet::new();
    for r in 0..mask.height() {
        for c in 0..mask.width() {
            let mut comp = Vec::new();
            visit(mask, &mut seen, r, c, &mut comp);
            if !comp.is_empty() {
                comp.sort();
                out.insert(comp);
            }
        }
    }
    out
}

/// Cells strictly above the mean, mean taken in f64.
pub fn binarize(values: &[f32], p: usize) -> BinaryMask {
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / values.len() as f64;
    BinaryMask::new(p, p, values.iter().map(|&v| v as f64 > mean).collect()).unwrap()
}

/// Shannon entropy of component sizes; infinite for an empty mask.
pub fn entropy_oracle(values: &[f32], p: usize) -> f64 {
    let comps = flood_fill_components(&binarize(values, p));
    let total: usize = comps.iter().map(Vec::len).sum();
    if total == 0 {
        return f64::INFINITY;
    }
    let mut h = 0.0;
    for c in &comps {
        let q = c.len() as f64 / total as f64;
        h -= q * q.ln();
    }
    h
}

/// Average ranks by counting: rank = 1 + #smaller + (#equal - 1) / 2.
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    xs.iter()
        .map(|&x| {
            let less = xs.iter().filter(|&&y| y < x).count() as f64;
            let equal = xs.iter().filter(|&&y| y == x).count() as f64;
            1.0 + less + (equal - 1.0) / 2.0
        })
        .collect()
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for i in 0..a.len() {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma).powi(2);
        sbb += (b[i] - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}

/// Every ordering of `items` (Heap's algorithm).
pub fn permutations<T: Clone>(items: &[T]) -> Vec<Vec<T>> {
    fn heap<T: Clone>(k: usize, v: &mut Vec<T>, out: &mut Vec<Vec<T>>) {
        if k <= 1 {
            out.push(v.clone());
            return;
        }
        for i in 0..k {
            heap(k - 1, v, out);
            if k.is_multiple_of(2) {
                v.swap(i, k - 1);
            } else {
                v.swap(0, k - 1);
            }
        }
    }
    let mut v = items.to_vec();
    let mut out = Vec::new();
    heap(v.len(), &mut v, &mut out);
    out
}

/// Spearman rho and the exact two-sided permutation p-value.
pub fn spearman_oracle(xs: &[f64], ys: &[f64]) -> Option<(f64, f64)> {
    let (rx, ry) = (ranks(xs), ranks(ys));
    let rho = pearson(&rx, &ry);
    if !rho.is_finite() {
        return None;
    }
    let perms = permutations(&ry);
    let extreme = perms.iter().filter(|p| pearson(&rx, p).abs() >= rho.abs() - 1e-12).count();
    Some((rho, extreme as f64 / perms.len() as f64))
}

/// Intersection and union of two half-open boxes by counting unit cells.
pub fn box_cells(a: [u32; 4], b: [u32; 4]) -> (u64, u64) {
    let inside = |bx: [u32; 4], x: u32, y: u32| x >= bx[0] && x < bx[2] && y >= bx[1] && y < bx[3];
    let xmax = a[2].max(b[2]);
    let ymax = a[3].max(b[3]);
    let (mut i, mut u) = (0, 0);
    for y in 0..ymax {
        for x in 0..xmax {
            let (p, q) = (inside(a, x, y), inside(b, x, y));
            i += (p && q) as u64;
            u += (p || q) as u64;
        }
    }
    (i, u)
}

pub fn files_equal(a: &Path, b: &Path) -> bool {
    match (std::fs::read(a), std::fs::read(b)) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    }
}

//! Convex hull of integer lattice points (Andrew's monotone chain).

pub type Point = (i64, i64);

fn cross(o: Point, a: Point, b: Point) -> i64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Hull vertices in counter-clockwise order without repeating the first.
/// Collinear points are dropped, so collinear input yields its two
/// endpoints; fewer than three distinct points are returned sorted.
pub fn convex_hull(points: &[Point]) -> Vec<Point> {
    let mut pts = points.to_vec();
    pts.sort_unstable();
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<Point> = Vec::with_capacity(2 * pts.len());
    for (pass, chain) in [pts.clone(), pts.iter().rev().skip(1).copied().collect()].into_iter().enumerate() {
        // the upper chain must not pop into the lower one
        let floor = if pass == 0 { 2 } else { hull.len() + 1 };
        for p in chain {
            while hull.len() >= floor && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0 {
                hull.pop();
            }
            hull.push(p);
        }
    }
    hull.pop();
    hull
}

/// Twice the polygon area (shoelace); exact for lattice points.
pub fn doubled_area(polygon: &[Point]) -> i64 {
    if polygon.len() < 3 {
        return 0;
    }
    let n = polygon.len();
    (0..n)
        .map(|i| {
            let (a, b) = (polygon[i], polygon[(i + 1) % n]);
            a.0 * b.1 - b.0 * a.1
        })
        .sum::<i64>()
        .abs()
}

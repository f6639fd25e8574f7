//! Bowyer–Watson triangulation on exact predicates.
//!
//! Cocircular ties are broken by symbolic perturbation of the lifted
//! coordinate `x² + y²`, with the perturbation magnitude ordered
//! lexicographically by `(x, y)`. That makes the triangulation unique for any
//! set of distinct points and therefore independent of insertion order.

use std::cmp::Ordering;
use std::collections::HashMap;

use robust::{incircle, orient2d, Coord};

use crate::{Error, Result};

/// Size of the enclosing super triangle relative to the bounding box.
const SUPER_SCALE: f64 = 1e7;

#[inline]
fn c(p: [f64; 2]) -> Coord<f64> {
    Coord { x: p[0], y: p[1] }
}

#[inline]
fn orient(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    orient2d(c(a), c(b), c(p))
}

fn lex(a: &[f64; 2], b: &[f64; 2]) -> Ordering {
    a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1]))
}

/// True if `d` lies strictly inside the circumcircle of the CCW triangle
/// `abc`, with exact ties resolved symbolically.
fn in_circle(a: [f64; 2], b: [f64; 2], cc: [f64; 2], d: [f64; 2]) -> bool {
    let det = incircle(c(a), c(b), c(cc), c(d));
    if det != 0.0 {
        return det > 0.0;
    }
    // The lexicographically smallest point carries the dominant perturbation;
    // the sign follows from the cofactor of its lifted coordinate.
    let pts = [a, b, cc, d];
    let smallest = (0..4).min_by(|&i, &j| lex(&pts[i], &pts[j])).unwrap();
    match smallest {
        0 => orient(d, b, cc) > 0.0,
        1 => orient(a, d, cc) > 0.0,
        2 => orient(a, b, d) > 0.0,
        _ => false,
    }
}

/// Triangles (CCW vertex triples, indices into `points`) of the Delaunay
/// triangulation.
pub fn delaunay_triangles(points: &[[f64; 2]]) -> Result<Vec<[usize; 3]>> {
    let n = points.len();
    if n < 3 {
        return Err(Error::TriangulationFailed(format!("need at least 3 points, got {n}")));
    }
    if points.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
        return Err(Error::TriangulationFailed("non-finite point".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| lex(&points[i], &points[j]));
    if let Some(w) = order.windows(2).find(|w| points[w[0]] == points[w[1]]) {
        return Err(Error::TriangulationFailed(format!("duplicate points {} and {}", w[0].min(w[1]), w[0].max(w[1]))));
    }
    let p0 = points[order[0]];
    let p1 = points[order[n - 1]];
    if points.iter().all(|&p| orient(p0, p1, p) == 0.0) {
        return Err(Error::TriangulationFailed("all points are collinear".into()));
    }

    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in points {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let mid = [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1])];
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(f64::MIN_POSITIVE) * SUPER_SCALE;

    let mut verts: Vec<[f64; 2]> = points.to_vec();
    verts.push([mid[0] - 2.0 * span, mid[1] - span]);
    verts.push([mid[0] + 2.0 * span, mid[1] - span]);
    verts.push([mid[0], mid[1] + 2.0 * span]);

    let mut tris: Vec<[usize; 3]> = vec![[n, n + 1, n + 2]];
    let mut boundary: HashMap<(usize, usize), usize> = HashMap::new();
    for &p in &order {
        let q = verts[p];
        let mut keep = Vec::with_capacity(tris.len() + 2);
        boundary.clear();
        for t in tris.drain(..) {
            if in_circle(verts[t[0]], verts[t[1]], verts[t[2]], q) {
                for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                    // an interior edge of the cavity shows up once in each direction
                    if boundary.remove(&(b, a)).is_none() {
                        boundary.insert((a, b), 0);
                    }
                }
            } else {
                keep.push(t);
            }
        }
        if boundary.is_empty() {
            return Err(Error::TriangulationFailed(format!("point {p} fell outside every circumcircle")));
        }
        keep.extend(boundary.keys().map(|&(a, b)| [a, b, p]));
        tris = keep;
    }
    tris.retain(|t| t.iter().all(|&v| v < n));
    if tris.is_empty() {
        return Err(Error::TriangulationFailed("no interior triangles".into()));
    }
    for t in &mut tris {
        // canonical rotation: smallest index first, orientation preserved
        let k = (0..3).min_by_key(|&k| t[k]).unwrap();
        t.rotate_left(k);
    }
    tris.sort_unstable();
    Ok(tris)
}

/// Deduplicated undirected edges `(i, j)` with `i < j`, sorted.
pub fn delaunay(points: &[[f64; 2]]) -> Result<Vec<(usize, usize)>> {
    let tris = delaunay_triangles(points)?;
    let mut edges: Vec<(usize, usize)> = tris
        .iter()
        .flat_map(|t| [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])])
        .map(|(a, b)| (a.min(b), a.max(b)))
        .collect();
    edges.sort_unstable();
    edges.dedup();
    Ok(edges)
}

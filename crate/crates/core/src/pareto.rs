//! Dominance, non-dominated sorting, exact hypervolume (m = 2, 3), Das–Dennis
//! reference directions, PBI scalarization and front distances.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Below this the reference norm is treated as zero and distances are left unscaled.
pub const D_REF_GUARD: f64 = 1e-9;

/// `p` dominates `q` iff `p <= q` componentwise and `p != q` (minimization).
pub fn dominates<T: Scalar>(p: &[T], q: &[T]) -> bool {
    let mut strictly = false;
    for (&a, &b) in p.iter().zip(q) {
        if a > b {
            return false;
        }
        if a < b {
            strictly = true;
        }
    }
    strictly
}

/// Fast non-dominated sort. Returns fronts of indices, best first; each front
/// is sorted ascending by index.
pub fn nds<T: Scalar, P: AsRef<[T]>>(points: &[P]) -> Vec<Vec<usize>> {
    let n = points.len();
    let mut dominated_by = vec![0usize; n];
    let mut dominates_list: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (points[i].as_ref(), points[j].as_ref());
            if dominates(a, b) {
                dominates_list[i].push(j);
                dominated_by[j] += 1;
            } else if dominates(b, a) {
                dominates_list[j].push(i);
                dominated_by[i] += 1;
            }
        }
    }
    let mut fronts = Vec::new();
    let mut current: Vec<usize> = (0..n).filter(|&i| dominated_by[i] == 0).collect();
    while !current.is_empty() {
        let mut next = Vec::new();
        for &i in &current {
            for &j in &dominates_list[i] {
                dominated_by[j] -= 1;
                if dominated_by[j] == 0 {
                    next.push(j);
                }
            }
        }
        next.sort_unstable();
        fronts.push(current);
        current = next;
    }
    fronts
}

/// Indices of the first non-dominated front.
pub fn non_dominated<T: Scalar, P: AsRef<[T]>>(points: &[P]) -> Vec<usize> {
    (0..points.len())
        .filter(|&i| {
            !points
                .iter()
                .any(|q| dominates(q.as_ref(), points[i].as_ref()))
        })
        .collect()
}

/// Rank (0 = first front) of each point.
pub fn ranks<T: Scalar, P: AsRef<[T]>>(points: &[P]) -> Vec<usize> {
    let mut r = vec![0; points.len()];
    for (k, front) in nds(points).into_iter().enumerate() {
        for i in front {
            r[i] = k;
        }
    }
    r
}

/// Crowding distance of the points of one front (boundary points get infinity).
pub fn crowding_distance<T: Scalar, P: AsRef<[T]>>(points: &[P], front: &[usize]) -> Vec<f64> {
    let n = front.len();
    let mut dist = vec![0.0; n];
    if n == 0 {
        return dist;
    }
    if n <= 2 {
        return vec![f64::INFINITY; n];
    }
    let m = points[front[0]].as_ref().len();
    let mut order: Vec<usize> = (0..n).collect();
    for obj in 0..m {
        let val = |k: usize| points[front[k]].as_ref()[obj].as_f64();
        order.sort_by(|&a, &b| val(a).total_cmp(&val(b)).then(a.cmp(&b)));
        let (lo, hi) = (val(order[0]), val(order[n - 1]));
        dist[order[0]] = f64::INFINITY;
        dist[order[n - 1]] = f64::INFINITY;
        if hi - lo <= 0.0 {
            continue;
        }
        for w in 1..n - 1 {
            dist[order[w]] += (val(order[w + 1]) - val(order[w - 1])) / (hi - lo);
        }
    }
    dist
}

/// Exact hypervolume of the region dominated by `front` and bounded by `reference`.
///
/// Points that do not strictly dominate the reference point contribute nothing.
pub fn hypervolume<T: Scalar, P: AsRef<[T]>>(front: &[P], reference: &[T]) -> Result<T> {
    let m = reference.len();
    let pts: Vec<Vec<f64>> = front
        .iter()
        .map(|p| p.as_ref())
        .inspect(|p| debug_assert_eq!(p.len(), m))
        .filter(|p| p.iter().zip(reference).all(|(a, r)| a < r))
        .map(|p| p.iter().map(|v| v.as_f64()).collect())
        .collect();
    let r: Vec<f64> = reference.iter().map(|v| v.as_f64()).collect();
    let hv = match m {
        2 => hv2d(pts.iter().map(|p| (p[0], p[1])).collect(), r[0], r[1]),
        3 => hv3d(&pts, &r),
        _ => {
            return Err(Error::contract(format!(
                "hypervolume supports 2 or 3 objectives, got {m}"
            )))
        }
    };
    Ok(T::lit(hv))
}

fn hv2d(mut pts: Vec<(f64, f64)>, rx: f64, ry: f64) -> f64 {
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut best_y = ry;
    let mut area = 0.0;
    for (x, y) in pts {
        if y < best_y {
            area += (rx - x) * (best_y - y);
            best_y = y;
        }
    }
    area
}

fn hv3d(pts: &[Vec<f64>], r: &[f64]) -> f64 {
    let mut order: Vec<usize> = (0..pts.len()).collect();
    order.sort_by(|&a, &b| pts[a][2].total_cmp(&pts[b][2]));
    let mut vol = 0.0;
    let mut slice: Vec<(f64, f64)> = Vec::with_capacity(pts.len());
    for (k, &i) in order.iter().enumerate() {
        slice.push((pts[i][0], pts[i][1]));
        let z_next = order.get(k + 1).map_or(r[2], |&j| pts[j][2]);
        let depth = z_next - pts[i][2];
        if depth > 0.0 {
            vol += depth * hv2d(slice.clone(), r[0], r[1]);
        }
    }
    vol
}

/// Simplex-lattice weight vectors with denominator `h` (each row sums to 1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceDirectionSet {
    pub dirs: Vec<Vec<f64>>,
    pub divisions: usize,
}

impl ReferenceDirectionSet {
    pub fn len(&self) -> usize {
        self.dirs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dirs.is_empty()
    }

    /// Divisions giving the smallest direction count that is at least `min_count`.
    pub fn divisions_for(m: usize, min_count: usize) -> usize {
        (1..)
            .find(|&h| binomial(h + m - 1, m - 1) >= min_count)
            .expect("unbounded search")
    }
}

pub fn binomial(n: usize, k: usize) -> usize {
    let k = k.min(n - k.min(n));
    (0..k).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

pub fn das_dennis(m: usize, h: usize) -> ReferenceDirectionSet {
    fn rec(m: usize, left: usize, h: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<f64>>) {
        if cur.len() == m - 1 {
            cur.push(left);
            out.push(cur.iter().map(|&c| c as f64 / h as f64).collect());
            cur.pop();
            return;
        }
        for c in 0..=left {
            cur.push(c);
            rec(m, left - c, h, cur, out);
            cur.pop();
        }
    }
    let mut dirs = Vec::new();
    if m >= 1 && h >= 1 {
        rec(m, h, h, &mut Vec::with_capacity(m), &mut dirs);
    }
    ReferenceDirectionSet { dirs, divisions: h }
}

/// Distance along (`d1`) and perpendicular to (`d2`) the direction `w`, from `ideal`.
pub fn pbi_components<T: Scalar>(f: &[T], w: &[T], ideal: &[T]) -> Result<(T, T)> {
    let norm = w.iter().map(|&v| v * v).sum::<T>().sqrt();
    if norm <= T::zero() {
        return Err(Error::contract("PBI direction has zero norm"));
    }
    let diff: Vec<T> = f.iter().zip(ideal).map(|(&a, &b)| a - b).collect();
    let d1 = diff.iter().zip(w).map(|(&a, &b)| a * b).sum::<T>() / norm;
    let d2 = diff
        .iter()
        .zip(w)
        .map(|(&a, &b)| {
            let e = a - d1 * b / norm;
            e * e
        })
        .sum::<T>()
        .sqrt();
    Ok((d1, d2))
}

pub fn pbi<T: Scalar>(f: &[T], w: &[T], theta: T, ideal: &[T]) -> Result<T> {
    let (d1, d2) = pbi_components(f, w, ideal)?;
    Ok(d1 + theta * d2)
}

/// Perpendicular distance from `f - ideal` to the ray spanned by `w`.
pub fn perpendicular_distance<T: Scalar>(f: &[T], w: &[T], ideal: &[T]) -> Result<T> {
    pbi_components(f, w, ideal).map(|(_, d2)| d2)
}

pub fn manhattan<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y).abs()).sum()
}

/// Closest front point in L1 distance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrontDistance<T> {
    /// Distance from the query to the closest front point.
    pub d_i: T,
    /// L1 norm of that closest point.
    pub d_ref: T,
    pub index: usize,
}

impl<T: Scalar> FrontDistance<T> {
    /// `d_i / d_ref`, or `d_i` when the closest point sits at the origin.
    pub fn normalized(&self) -> T {
        if self.d_ref.as_f64() < D_REF_GUARD {
            self.d_i
        } else {
            self.d_i / self.d_ref
        }
    }
}

/// Distance to the closest front point; ties go to the lowest index.
pub fn manhattan_front_distance<T: Scalar, P: AsRef<[T]>>(
    y: &[T],
    front: &[P],
) -> Result<FrontDistance<T>> {
    let mut best: Option<FrontDistance<T>> = None;
    for (i, p) in front.iter().enumerate() {
        let p = p.as_ref();
        let d = manhattan(y, p);
        if best.is_none_or(|b| d < b.d_i) {
            best = Some(FrontDistance {
                d_i: d,
                d_ref: p.iter().map(|v| v.abs()).sum(),
                index: i,
            });
        }
    }
    best.ok_or(Error::EmptyPopulation("front distance needs a non-empty front"))
}

/// Compares two objective vectors lexicographically, used for canonical ordering.
pub fn lex_cmp<T: Scalar>(a: &[T], b: &[T]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.partial_cmp(y) {
            Some(Ordering::Equal) | None => continue,
            Some(o) => return o,
        }
    }
    Ordering::Equal
}

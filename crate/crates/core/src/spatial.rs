//! Uniform spatial hashing for exact nearest-neighbor queries.
//!
//! Points are bucketed into cubic cells of side `cell_size`. A radius query
//! with `radius <= cell_size` only has to look at the 27 cells around the
//! query cell; unbounded nearest-neighbor queries walk outward ring by ring.
//! Results are identical to a linear scan, including the lowest-index
//! tie-break.

use std::collections::HashMap;

use nalgebra::Vector3;

type CellKey = (i64, i64, i64);

pub struct HashGrid<'a> {
    points: &'a [Vector3<f64>],
    cell_size: f64,
    cells: HashMap<CellKey, Vec<u32>>,
    lo: CellKey,
    hi: CellKey,
}

/// Distance used by every neighbor query in the crate.
#[inline]
pub fn distance(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    (a - b).norm()
}

impl<'a> HashGrid<'a> {
    pub fn new(points: &'a [Vector3<f64>], cell_size: f64) -> Self {
        assert!(cell_size > 0.0 && cell_size.is_finite());
        let mut cells: HashMap<CellKey, Vec<u32>> = HashMap::new();
        let mut lo = (i64::MAX, i64::MAX, i64::MAX);
        let mut hi = (i64::MIN, i64::MIN, i64::MIN);
        for (i, p) in points.iter().enumerate() {
            let k = cell_of(p, cell_size);
            lo = (lo.0.min(k.0), lo.1.min(k.1), lo.2.min(k.2));
            hi = (hi.0.max(k.0), hi.1.max(k.1), hi.2.max(k.2));
            cells.entry(k).or_default().push(i as u32);
        }
        Self {
            points,
            cell_size,
            cells,
            lo,
            hi,
        }
    }

    pub fn points(&self) -> &'a [Vector3<f64>] {
        self.points
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Nearest point at distance `<= radius`, lowest index on ties.
    ///
    /// `radius` must not exceed the cell size.
    pub fn nearest_within(&self, q: &Vector3<f64>, radius: f64) -> Option<(usize, f64)> {
        debug_assert!(radius <= self.cell_size);
        let c = cell_of(q, self.cell_size);
        let mut best: Option<(usize, f64)> = None;
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(ids) = self.cells.get(&(c.0 + dx, c.1 + dy, c.2 + dz)) {
                        for &i in ids {
                            let i = i as usize;
                            let d = distance(q, &self.points[i]);
                            if d <= radius && better(d, i, best) {
                                best = Some((i, d));
                            }
                        }
                    }
                }
            }
        }
        best
    }

    pub fn any_within(&self, q: &Vector3<f64>, radius: f64) -> bool {
        debug_assert!(radius <= self.cell_size);
        let c = cell_of(q, self.cell_size);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(ids) = self.cells.get(&(c.0 + dx, c.1 + dy, c.2 + dz)) {
                        if ids
                            .iter()
                            .any(|&i| distance(q, &self.points[i as usize]) <= radius)
                        {
                            return true;
                        }
                    }
                }
            }
        }
        false
    }

    /// Exact nearest neighbor at any distance. Panics on an empty grid.
    pub fn nearest(&self, q: &Vector3<f64>) -> (usize, f64) {
        assert!(!self.points.is_empty(), "nearest() on an empty grid");
        let c = cell_of(q, self.cell_size);
        let r_max = [
            (c.0 - self.lo.0).abs(),
            (c.0 - self.hi.0).abs(),
            (c.1 - self.lo.1).abs(),
            (c.1 - self.hi.1).abs(),
            (c.2 - self.lo.2).abs(),
            (c.2 - self.hi.2).abs(),
        ]
        .into_iter()
        .max()
        .unwrap_or(0);

        let mut best: Option<(usize, f64)> = None;
        for r in 0..=r_max {
            let side = (2 * r + 1) as u128;
            if side * side * side > 27 * self.cells.len() as u128 + 27 {
                // The ring has outgrown the occupied cells; a scan is cheaper.
                return self.scan_from(q);
            }
            self.visit_ring(c, r, q, &mut best);
            if let Some((_, d)) = best {
                // Unvisited cells are at least r full cells away.
                if d < r as f64 * self.cell_size {
                    break;
                }
            }
        }
        best.expect("non-empty grid always yields a neighbor")
    }

    fn scan_from(&self, q: &Vector3<f64>) -> (usize, f64) {
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in self.points.iter().enumerate() {
            let d = distance(q, p);
            if better(d, i, best) {
                best = Some((i, d));
            }
        }
        best.unwrap()
    }

    fn visit_ring(&self, c: CellKey, r: i64, q: &Vector3<f64>, best: &mut Option<(usize, f64)>) {
        for dx in -r..=r {
            for dy in -r..=r {
                let on_face = dx.abs() == r || dy.abs() == r;
                let step = if on_face { 1 } else { (2 * r).max(1) };
                let mut dz = -r;
                while dz <= r {
                    if let Some(ids) = self.cells.get(&(c.0 + dx, c.1 + dy, c.2 + dz)) {
                        for &i in ids {
                            let i = i as usize;
                            let d = distance(q, &self.points[i]);
                            if better(d, i, *best) {
                                *best = Some((i, d));
                            }
                        }
                    }
                    dz += step;
                }
            }
        }
    }
}

#[inline]
fn better(d: f64, i: usize, best: Option<(usize, f64)>) -> bool {
    match best {
        None => true,
        Some((bi, bd)) => d < bd || (d == bd && i < bi),
    }
}

#[inline]
fn cell_of(p: &Vector3<f64>, cell: f64) -> CellKey {
    (
        (p.x / cell).floor() as i64,
        (p.y / cell).floor() as i64,
        (p.z / cell).floor() as i64,
    )
}

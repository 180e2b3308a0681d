//! Wiener sausages as unions of balls around sampled path points, vacancy
//! queries, grid-based vacant-component counting, and the event detectors for
//! microscopic nonuniqueness: F (no visit to B(1-eps)), E (every eps-hemiball
//! of B(1+eps) visited, decided exactly through the distance from the origin
//! to the convex hull of visited points), and the implication checker tying
//! multi-component vacancy to both.

use crate::brownian::PathSample;
use crate::geometry::{self, dist_origin_to_convex_hull_flat, uniform_unit_vector};
use crate::point::{self, Point};
use crate::union_find::UnionFind;
use crate::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;
use smallvec::SmallVec;
use std::collections::HashMap;

/// Union of balls of fixed radius around stored centers, with a uniform hash
/// grid (cell size = radius) for occupancy queries.
#[derive(Clone, Debug)]
pub struct SausageSet {
    dim: usize,
    radius: f64,
    centers: Vec<f64>,
    grid: HashMap<[i64; 6], Vec<u32>>,
}

fn grid_key(x: &[f64], cell: f64) -> [i64; 6] {
    let mut key = [0i64; 6];
    for (k, &c) in key.iter_mut().zip(x) {
        *k = (c / cell).floor() as i64;
    }
    key
}

impl SausageSet {
    pub fn new(dim: usize, radius: f64) -> SausageSet {
        assert!(radius > 0.0 && dim >= 1 && dim <= 6);
        SausageSet {
            dim,
            radius,
            centers: Vec::new(),
            grid: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn len(&self) -> usize {
        self.centers.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn center(&self, i: usize) -> &[f64] {
        &self.centers[i * self.dim..(i + 1) * self.dim]
    }

    /// Flattened center buffer (row-major).
    pub fn centers_flat(&self) -> &[f64] {
        &self.centers
    }

    pub fn insert(&mut self, c: &[f64]) {
        debug_assert_eq!(c.len(), self.dim);
        let idx = self.len() as u32;
        self.centers.extend_from_slice(c);
        self.grid
            .entry(grid_key(c, self.radius))
            .or_default()
            .push(idx);
    }

    /// Minimum distance from `x` to any center within `cutoff`, if one exists.
    pub fn min_dist_within(&self, x: &[f64], cutoff: f64) -> Option<f64> {
        let cell = self.radius;
        let reach = (cutoff / cell).ceil() as i64;
        let base = grid_key(x, cell);
        let d = self.dim;
        let mut best_sq = f64::INFINITY;
        let mut offset = vec![-reach; d];
        'outer: loop {
            let mut key = [0i64; 6];
            for i in 0..d {
                key[i] = base[i] + offset[i];
            }
            if let Some(ids) = self.grid.get(&key) {
                for &i in ids {
                    let dsq = point::dist_sq(x, self.center(i as usize));
                    if dsq < best_sq {
                        best_sq = dsq;
                    }
                }
            }
            // advance mixed-radix offset counter
            for i in 0..d {
                offset[i] += 1;
                if offset[i] <= reach {
                    continue 'outer;
                }
                offset[i] = -reach;
            }
            break;
        }
        let best = best_sq.sqrt();
        (best <= cutoff).then_some(best)
    }

    /// Exact vacancy w.r.t. the stored centers.
    pub fn is_vacant(&self, x: &Point) -> bool {
        self.is_vacant_slice(x.as_slice())
    }

    pub fn is_vacant_slice(&self, x: &[f64]) -> bool {
        self.min_dist_within(x, self.radius).is_none()
    }
}

/// Recorded time gaps at least this long are resolved-excursion jumps: the
/// return resolution advances the clock by a nominal unit, while every
/// genuine diffusion step is far shorter.  Jump segments are never
/// bridge-refined — the true excursion stays outside the sphere where the
/// return was resolved, so (for ball radius 1 and that sphere at 1 + eps or
/// farther) it cannot touch the open probe ball, and a fictitious duration-1
/// bridge would stamp spurious coverage straight through it.
pub const RESOLVED_JUMP_DT: f64 = 0.5;

/// Build a sausage set from paths, inserting every stored sample and filling
/// inter-sample gaps larger than `refine_gap` by Brownian-bridge midpoint
/// insertion (so the discrete union under-represents the true sausage by at
/// most `refine_gap`).  Segments with time gap at least
/// [`RESOLVED_JUMP_DT`] are treated as resolved-excursion jumps and skipped.
pub fn build_sausage<R: Rng + ?Sized>(
    rng: &mut R,
    paths: &[PathSample],
    radius: f64,
    refine_gap: f64,
) -> Result<SausageSet> {
    let dim = paths
        .first()
        .ok_or_else(|| Error::InvalidInput("build_sausage with no paths".into()))?
        .dim;
    assert!(refine_gap > 0.0);
    let mut s = SausageSet::new(dim, radius);
    for path in paths {
        for i in 0..path.len() {
            s.insert(path.position(i));
        }
        for i in 0..path.len().saturating_sub(1) {
            let dt = path.times[i + 1] - path.times[i];
            if dt >= RESOLVED_JUMP_DT {
                continue;
            }
            refine_segment(
                rng,
                &mut s,
                path.position(i),
                path.position(i + 1),
                dt,
                refine_gap,
                0,
            );
        }
    }
    Ok(s)
}

/// Like [`build_sausage`], but refines only the parts of the path that can
/// influence occupancy within distance `cut` of `focus`.  A sub-bridge whose
/// endpoints both lie farther than `cut + 6 sqrt(dt)` from `focus` is pruned:
/// the chance that it dips into the `cut`-ball anyway is below
/// exp(-2 * 36 dt / (2 dt)) = exp(-36), far under Monte Carlo resolution.
/// Every raw path sample is still inserted, so global queries stay coarse but
/// correct at the sample level; only queries within `cut` of `focus` see the
/// fully refined sausage.
pub fn build_sausage_near<R: Rng + ?Sized>(
    rng: &mut R,
    paths: &[PathSample],
    radius: f64,
    refine_gap: f64,
    focus: &Point,
    cut: f64,
) -> Result<SausageSet> {
    let dim = paths
        .first()
        .ok_or_else(|| Error::InvalidInput("build_sausage with no paths".into()))?
        .dim;
    assert!(refine_gap > 0.0 && cut > 0.0);
    let mut s = SausageSet::new(dim, radius);
    let f = focus.as_slice();
    for path in paths {
        for i in 0..path.len() {
            s.insert(path.position(i));
        }
        for i in 0..path.len().saturating_sub(1) {
            let dt = path.times[i + 1] - path.times[i];
            if dt >= RESOLVED_JUMP_DT {
                continue;
            }
            refine_segment_near(
                rng,
                &mut s,
                path.position(i),
                path.position(i + 1),
                dt,
                refine_gap,
                f,
                cut,
                0,
            );
        }
    }
    Ok(s)
}

#[allow(clippy::too_many_arguments)]
fn refine_segment_near<R: Rng + ?Sized>(
    rng: &mut R,
    s: &mut SausageSet,
    a: &[f64],
    b: &[f64],
    dt: f64,
    refine_gap: f64,
    focus: &[f64],
    cut: f64,
    depth: usize,
) {
    if depth >= 24 || point::dist_sq(a, b) <= refine_gap * refine_gap {
        return;
    }
    let slack = cut + 6.0 * dt.max(0.0).sqrt();
    if point::dist_sq(a, focus) > slack * slack && point::dist_sq(b, focus) > slack * slack {
        return;
    }
    let sd = (dt / 4.0).max(0.0).sqrt();
    let mid: SmallVec<[f64; 8]> = a
        .iter()
        .zip(b)
        .map(|(x, y)| 0.5 * (x + y) + sd * rng.sample::<f64, _>(StandardNormal))
        .collect();
    s.insert(&mid);
    refine_segment_near(rng, s, a, &mid, dt / 2.0, refine_gap, focus, cut, depth + 1);
    refine_segment_near(rng, s, &mid, b, dt / 2.0, refine_gap, focus, cut, depth + 1);
}

/// Recursively sample bridge midpoints between `a` and `b` (time gap `dt`)
/// until consecutive inserted points are within `refine_gap`.
fn refine_segment<R: Rng + ?Sized>(
    rng: &mut R,
    s: &mut SausageSet,
    a: &[f64],
    b: &[f64],
    dt: f64,
    refine_gap: f64,
    depth: usize,
) {
    if depth >= 24 || point::dist_sq(a, b) <= refine_gap * refine_gap {
        return;
    }
    // Bridge midpoint: mean (a+b)/2, per-coordinate variance dt/4.
    let sd = (dt / 4.0).max(0.0).sqrt();
    let mid: SmallVec<[f64; 8]> = a
        .iter()
        .zip(b)
        .map(|(x, y)| 0.5 * (x + y) + sd * rng.sample::<f64, _>(StandardNormal))
        .collect();
    s.insert(&mid);
    refine_segment(rng, s, a, &mid, dt / 2.0, refine_gap, depth + 1);
    refine_segment(rng, s, &mid, b, dt / 2.0, refine_gap, depth + 1);
}

// ---------------------------------------------------------------------------
// Vacant-component counting on a grid
// ---------------------------------------------------------------------------

/// Result of counting vacant components inside a probe ball.
#[derive(Clone, Debug)]
pub struct VacancyReport {
    pub component_count: usize,
    pub grid_spacing: f64,
    /// true when the count is sensitive to cell-classification ambiguity:
    /// recounting with the vacancy threshold or the probe-ball radius shifted
    /// by the cell half-diagonal (the worst-case gap between a cell center and
    /// any point of its cell) in either direction changes the component count.
    /// This catches vacant channels or components thinner than the grid can
    /// resolve, including corridors hugging the probe sphere whose cells fall
    /// just outside the nominal probe ball; boundaries that merely pass
    /// through cells without affecting the count do not trigger it.
    pub borderline: bool,
    /// smallest component count over the bracket recounts (including nominal)
    pub min_count: usize,
    /// largest component count over the bracket recounts (including nominal)
    pub max_count: usize,
    /// certified lower bound on the number of components of the true (grid-free)
    /// vacant set within the probe ball: the number of components of the
    /// *optimistic* cell graph (vacancy threshold lowered and probe radius
    /// raised by the cell half-diagonal) that contain at least one nominally
    /// vacant cell.  Sound because any path through the true vacant set stays
    /// within a half-diagonal of a face-connected chain of optimistic cells,
    /// so seeds in different optimistic components cannot be connected in
    /// truth; comparing bare counts across recounts has no such guarantee
    /// (spurious thin components can balance a spurious merge).
    pub certified_count: usize,
}

impl VacancyReport {
    /// true when the predicate "at least two vacant components" is not settled
    /// by the grid: either the nominal count reaches two without a matching
    /// certificate, or the nominal count stays below two while some bracket
    /// recount reaches it.
    pub fn two_plus_ambiguous(&self) -> bool {
        if self.component_count >= 2 {
            self.certified_count < 2
        } else {
            self.max_count >= 2
        }
    }
}

/// Count connected components of the vacant set within B(ball_center, eps),
/// classifying cells of spacing `grid_spacing` by vacancy of their centers
/// and joining across faces.
pub fn count_vacant_components(
    ball_center: &Point,
    eps: f64,
    s: &SausageSet,
    grid_spacing: f64,
) -> Result<VacancyReport> {
    if grid_spacing > eps / 10.0 {
        return Err(Error::InvalidInput(format!(
            "grid_spacing {grid_spacing} exceeds eps/10 = {}",
            eps / 10.0
        )));
    }
    // Only centers within eps + radius (+ ambiguity band) can touch the
    // probe ball.  Near centers are decimated to one representative per cell
    // of spacing gs/5: a dropped center lies within gs sqrt(d)/5 of its kept
    // representative, which together with the builder's refinement gap gs/2
    // keeps the union's total under-representation below the classification
    // margin gs sqrt(d)/2 for every d >= 3, so the borderline bracket still
    // covers construction error.  This collapses the heavy oversampling
    // where the step policy crawls near a watched sphere.
    let d = s.dim();
    let cut = eps + s.radius() + grid_spacing * (1.0 + (d as f64).sqrt());
    let dec = grid_spacing / 5.0;
    let mut seen: std::collections::HashSet<[i64; 6]> = std::collections::HashSet::new();
    let mut near: Vec<f64> = Vec::new();
    for i in 0..s.len() {
        let c = s.center(i);
        if point::dist_sq(c, ball_center.as_slice()) <= cut * cut
            && seen.insert(grid_key(c, dec))
        {
            near.extend_from_slice(c);
        }
    }
    Ok(grid_count_components(
        ball_center.as_slice(),
        eps,
        &near,
        d,
        s.radius(),
        grid_spacing,
    ))
}

/// Core counting routine on a flattened center buffer.  Computes the minimum
/// center distance per grid cell by stamping each center over its bounding
/// box, classifies cells, and merges vacant face-neighbors with union-find.
pub fn grid_count_components(
    ball_center: &[f64],
    eps: f64,
    centers_flat: &[f64],
    d: usize,
    radius: f64,
    gs: f64,
) -> VacancyReport {
    // The grid extends past the probe radius so the inflated-probe bracket
    // below has its cells available.
    let margin_cells = ((gs * (d as f64).sqrt() / 2.0) / gs).ceil() as i64;
    let half = (eps / gs).ceil() as i64 + margin_cells;
    let side = (2 * half + 1) as usize;
    let n_cells = side.pow(d as u32);
    let mut min_dist_sq = vec![f64::INFINITY; n_cells];

    let cell_coord = |k: usize, i: usize| -> f64 {
        // coordinate i of the center of cell with mixed-radix index k
        let idx = (k / side.pow(i as u32)) % side;
        ball_center[i] + (idx as i64 - half) as f64 * gs
    };

    // Half-diagonal of a cell: any point of a cell is within this distance of
    // the cell center, so shifting the vacancy threshold by +-margin brackets
    // every classification a refined grid could produce.
    let margin = gs * (d as f64).sqrt() / 2.0;

    // Stamp each center over the cells its ball (plus the ambiguity band)
    // can reach.  When the reach box covers most of the grid (typical when
    // the ball radius dwarfs the probe ball) a flat pass over precomputed
    // cell coordinates beats the mixed-radix box walk; min distances outside
    // the reach never cross the classification thresholds, so both routes
    // classify identically.
    let reach = radius + margin + gs;
    let n_centers = centers_flat.len() / d;
    let mut coords = vec![0.0f64; n_cells * d];
    for k in 0..n_cells {
        for i in 0..d {
            coords[k * d + i] = cell_coord(k, i);
        }
    }
    let mut lo = vec![0i64; d];
    let mut hi = vec![0i64; d];
    let mut cursor = vec![0i64; d];
    for ci in 0..n_centers {
        let c = &centers_flat[ci * d..(ci + 1) * d];
        // Work relative to the probe center.  Pairs with cell distance above
        // the reach cannot change any classification (their minima would all
        // exceed radius + margin, which classifies like infinity), so the
        // stamp box is the ball box intersected with the bounding box of the
        // spherical cap {|x| <= eps, <x, c_hat> >= m}: every relevant cell
        // satisfies <x, c_hat> >= (|c|^2 + |x|^2 - reach^2) / (2 |c|) >= m
        // with m = (|c|^2 - reach^2) / (2 |c|).  For centers hovering just
        // outside the probe ball (the common case for sausages resolved on a
        // nearby sphere) the cap is a sliver and the box shrinks from the
        // whole grid to a handful of cells.
        let rel: SmallVec<[f64; 8]> =
            (0..d).map(|i| c[i] - ball_center[i]).collect();
        let rho_sq = point::norm_sq(&rel);
        let rho = rho_sq.sqrt();
        let re = eps;
        let mut empty = false;
        let mut box_cells = 1usize;
        if rho > 0.0 {
            let m = (rho_sq - reach * reach) / (2.0 * rho);
            if m > re + gs {
                continue;
            }
            let s_sq = (re * re - m * m).max(0.0);
            for i in 0..d {
                let u = rel[i] / rho;
                let s = (s_sq * (1.0 - u * u).max(0.0)).sqrt();
                let cap_max = if re * u >= m { re } else { u * m + s };
                let cap_min = if -re * u >= m { -re } else { u * m - s };
                let ball_lo = ((rel[i] - reach) / gs).floor() as i64;
                let ball_hi = ((rel[i] + reach) / gs).ceil() as i64;
                lo[i] = ball_lo.max((cap_min / gs).floor() as i64 - 1).max(-half);
                hi[i] = ball_hi.min((cap_max / gs).ceil() as i64 + 1).min(half);
                if lo[i] > hi[i] {
                    empty = true;
                } else {
                    box_cells *= (hi[i] - lo[i] + 1) as usize;
                }
            }
        } else {
            for i in 0..d {
                lo[i] = ((-reach) / gs).floor().max(-(half as f64)) as i64;
                hi[i] = ((reach) / gs).ceil().min(half as f64) as i64;
                box_cells *= (hi[i] - lo[i] + 1) as usize;
            }
        }
        if empty {
            continue;
        }
        if 2 * box_cells >= n_cells {
            if d == 3 {
                let (cx, cy, cz) = (c[0], c[1], c[2]);
                for (k, cc) in coords.chunks_exact(3).enumerate() {
                    let (tx, ty, tz) = (cc[0] - cx, cc[1] - cy, cc[2] - cz);
                    let dsq = tx * tx + ty * ty + tz * tz;
                    if dsq < min_dist_sq[k] {
                        min_dist_sq[k] = dsq;
                    }
                }
            } else {
                for (k, cc) in coords.chunks_exact(d).enumerate() {
                    let dsq = point::dist_sq(cc, c);
                    if dsq < min_dist_sq[k] {
                        min_dist_sq[k] = dsq;
                    }
                }
            }
            continue;
        }
        cursor.copy_from_slice(&lo);
        'stamp: loop {
            let mut k = 0usize;
            let mut stride = 1usize;
            let mut dsq = 0.0;
            for i in 0..d {
                k += (cursor[i] + half) as usize * stride;
                stride *= side;
                let cc = ball_center[i] + cursor[i] as f64 * gs;
                let t = cc - c[i];
                dsq += t * t;
            }
            if dsq < min_dist_sq[k] {
                min_dist_sq[k] = dsq;
            }
            for i in 0..d {
                cursor[i] += 1;
                if cursor[i] <= hi[i] {
                    continue 'stamp;
                }
                cursor[i] = lo[i];
            }
            break;
        }
    }

    // Classify cells.  Vacancy level per cell: 3 = vacant even with the
    // threshold raised by margin, 2 = vacant at the nominal threshold, 1 =
    // vacant only with the threshold lowered by margin, 0 = occupied under
    // all three.  Probe level mirrors this for membership in the probe ball:
    // 3 = inside even the deflated ball B(eps - margin), 2 = inside B(eps),
    // 1 = inside only the inflated ball B(eps + margin), 0 = outside all.
    // Bracketing the probe radius matters: a vacant corridor hugging the
    // probe sphere may run through cells whose centers sit just outside
    // B(eps), in which case the nominal count sees components that the true
    // vacant set connects along the sphere.
    let mut level = vec![0u8; n_cells];
    let mut probe_level = vec![0u8; n_cells];
    for k in 0..n_cells {
        let mut dsq = 0.0;
        for i in 0..d {
            let t = cell_coord(k, i) - ball_center[i];
            dsq += t * t;
        }
        let dist = dsq.sqrt();
        probe_level[k] = if dist <= eps - margin {
            3
        } else if dist <= eps {
            2
        } else if dist <= eps + margin {
            1
        } else {
            continue;
        };
        let md = min_dist_sq[k].sqrt();
        level[k] = if md > radius + margin {
            3
        } else if md > radius {
            2
        } else if md > radius - margin {
            1
        } else {
            0
        };
    }

    let mut uf = UnionFind::new(n_cells);
    let mut count_at = |min_level: u8, min_probe: u8| -> usize {
        uf.reset(n_cells);
        let vacant = |k: usize| level[k] >= min_level && probe_level[k] >= min_probe;
        let mut stride = 1usize;
        for _i in 0..d {
            for k in 0..n_cells {
                if vacant(k) {
                    let neighbor = k + stride;
                    // same-axis neighbor exists iff the digit is not at its max
                    if (k / stride) % side + 1 < side && neighbor < n_cells && vacant(neighbor) {
                        uf.union(k as u32, neighbor as u32);
                    }
                }
            }
            stride *= side;
        }
        let mut count = 0usize;
        for k in 0..n_cells {
            if vacant(k) && uf.find(k as u32) == k as u32 {
                count += 1;
            }
        }
        count
    };

    let nominal = count_at(2, 2);
    let mut min_count = nominal;
    let mut max_count = nominal;
    for min_level in 1..=3u8 {
        for min_probe in 1..=3u8 {
            if (min_level, min_probe) != (2, 2) {
                let c = count_at(min_level, min_probe);
                min_count = min_count.min(c);
                max_count = max_count.max(c);
            }
        }
    }

    // Certified lower bound on the true component count.  A nominally vacant
    // cell center is a genuinely vacant point of the probe ball (the stamped
    // minimum is the exact distance to the center set).  Any curve through
    // the true vacant set stays within a cell half-diagonal of cell centers
    // whose stamped distance then exceeds radius - margin and whose norm is
    // at most eps + margin, and the cells met along the curve (including at
    // edge and corner crossings, where all surrounding cells qualify) form a
    // face-connected chain.  Hence two nominal cells in different components
    // of the optimistic graph lie in different true components.
    uf.reset(n_cells);
    let opt = |k: usize| level[k] >= 1 && probe_level[k] >= 1;
    let mut stride = 1usize;
    for _i in 0..d {
        for k in 0..n_cells {
            if opt(k) {
                let neighbor = k + stride;
                if (k / stride) % side + 1 < side && neighbor < n_cells && opt(neighbor) {
                    uf.union(k as u32, neighbor as u32);
                }
            }
        }
        stride *= side;
    }
    let mut seeded_roots: Vec<u32> = (0..n_cells)
        .filter(|&k| level[k] >= 2 && probe_level[k] >= 2)
        .map(|k| uf.find(k as u32))
        .collect();
    seeded_roots.sort_unstable();
    seeded_roots.dedup();
    let certified_count = seeded_roots.len();

    VacancyReport {
        component_count: nominal,
        grid_spacing: gs,
        borderline: min_count != nominal || max_count != nominal,
        min_count,
        max_count,
        certified_count,
    }
}

// ---------------------------------------------------------------------------
// Event detectors
// ---------------------------------------------------------------------------

/// All visited points (stored samples plus interpolated crossing points) with
/// norm at most `cut`, flattened.
pub fn visited_points_within(paths: &[PathSample], cut: f64) -> Vec<f64> {
    let tol = cut + 1e-9;
    let mut out = Vec::new();
    for path in paths {
        for i in 0..path.len() {
            let p = path.position(i);
            if point::norm_sq(p) <= tol * tol {
                out.extend_from_slice(p);
            }
        }
        for c in &path.crossings {
            if c.point.norm_sq() <= tol * tol {
                out.extend_from_slice(c.point.as_slice());
            }
        }
    }
    out
}

/// Event F: no path visits the open ball B(0, 1 - eps).  Decided from stored
/// samples and interpolated crossings.
pub fn detect_event_f(paths: &[PathSample], eps: f64) -> bool {
    let r = 1.0 - eps;
    for path in paths {
        for c in &path.crossings {
            if let Some(w) = path.watched.get(c.sphere) {
                if c.inward && w.center.norm_sq() == 0.0 && (w.radius - r).abs() <= 1e-12 {
                    return false;
                }
            }
        }
        for i in 0..path.len() {
            if point::norm_sq(path.position(i)) < r * r {
                return false;
            }
        }
    }
    true
}

/// Distance from the origin to the convex hull of the visited points inside
/// B(0, 1 + eps).  Event E holds iff this distance is at most eps: E fails
/// exactly when some direction e has every visited point in the half-space
/// `<x, e> < -eps`, i.e. when some eps-hemiball of B(1+eps) is missed.
pub fn visited_hull_distance(paths: &[PathSample], eps: f64) -> Result<f64> {
    let visited = visited_points_within(paths, 1.0 + eps);
    let d = paths
        .first()
        .ok_or_else(|| Error::InvalidInput("event E with no paths".into()))?
        .dim;
    if visited.is_empty() {
        return Err(Error::InvalidInput(
            "event E: no visited points inside B(1+eps)".into(),
        ));
    }
    dist_origin_to_convex_hull_flat(&visited, d)
}

/// Event E via the exact convex-hull criterion.
pub fn detect_event_e(paths: &[PathSample], eps: f64) -> Result<bool> {
    Ok(visited_hull_distance(paths, eps)? <= eps)
}

/// When event E fails, a direction `e` certifying it: every visited point p
/// inside B(1+eps) satisfies `<p, e> <= -hull_distance < -eps`, so the
/// eps-hemiball facing `e` is missed.  `None` when E holds.  The certificate
/// can be verified against the raw point list with a single linear scan,
/// independently of the hull-descent arithmetic that produced it.
pub fn event_e_witness_direction(paths: &[PathSample], eps: f64) -> Result<Option<Point>> {
    let visited = visited_points_within(paths, 1.0 + eps);
    let d = paths
        .first()
        .ok_or_else(|| Error::InvalidInput("event E with no paths".into()))?
        .dim;
    if visited.is_empty() {
        return Err(Error::InvalidInput(
            "event E: no visited points inside B(1+eps)".into(),
        ));
    }
    let v = geometry::closest_hull_point_to_origin_flat(&visited, d)?;
    let norm = point::norm(&v);
    if norm <= eps {
        return Ok(None);
    }
    let mut e = Point::from_slice(&v);
    for i in 0..d {
        e.0[i] = -v[i] / norm;
    }
    Ok(Some(e))
}

/// One-sided brute-force referee for event E: sample `n_dirs` uniform
/// directions and report false iff some direction sees every visited point
/// deeper than `-eps`.
pub fn detect_event_e_bruteforce<R: Rng + ?Sized>(
    rng: &mut R,
    paths: &[PathSample],
    eps: f64,
    n_dirs: usize,
) -> Result<bool> {
    let d = paths
        .first()
        .ok_or_else(|| Error::InvalidInput("event E with no paths".into()))?
        .dim;
    let visited = visited_points_within(paths, 1.0 + eps);
    if visited.is_empty() {
        return Err(Error::InvalidInput(
            "event E: no visited points inside B(1+eps)".into(),
        ));
    }
    let n = visited.len() / d;
    for _ in 0..n_dirs {
        let e = uniform_unit_vector(rng, d);
        let mut max_dot = f64::NEG_INFINITY;
        for i in 0..n {
            let dp = point::dot(e.as_slice(), &visited[i * d..(i + 1) * d]);
            if dp > max_dot {
                max_dot = dp;
            }
        }
        if max_dot < -eps {
            return Ok(false);
        }
    }
    Ok(true)
}

// ---------------------------------------------------------------------------
// Hemiball implication checker
// ---------------------------------------------------------------------------

/// Outcome of checking the implication "at least two vacant components in
/// B(0, eps) forces every eps-hemiball of B(1+eps) to be visited and forbids
/// visits to B(1-eps)".
#[derive(Clone, Debug)]
pub struct ImplicationReport {
    /// fewer than 2 components: nothing to check
    pub vacuous: bool,
    /// count or detector thresholds too close to call
    pub borderline: bool,
    /// human-readable violation descriptions; empty on pass
    pub violations: Vec<String>,
}

/// Margin below which a hull distance or a B(1-eps) clearance is considered
/// too close to its threshold to classify (10x the geometry tolerance scale).
pub const IMPLICATION_MARGIN: f64 = 1e-8;

pub fn check_hemiball_implication(
    paths: &[PathSample],
    vacancy: &VacancyReport,
    eps: f64,
) -> Result<ImplicationReport> {
    // The hypothesis "at least two vacant components" is only trusted when
    // the grid certifies it (two seeds provably in different true
    // components); a nominal count of two or more without a certificate is
    // reported as borderline, never as a violation.
    if vacancy.certified_count < 2 {
        return Ok(ImplicationReport {
            vacuous: true,
            borderline: vacancy.two_plus_ambiguous(),
            violations: Vec::new(),
        });
    }
    let mut borderline = false;
    let mut violations = Vec::new();

    let hull_dist = visited_hull_distance(paths, eps)?;
    if (hull_dist - eps).abs() <= IMPLICATION_MARGIN {
        borderline = true;
    } else if hull_dist > eps {
        violations.push(format!(
            "{} vacant components but visited-hull distance {hull_dist} > eps = {eps}",
            vacancy.component_count
        ));
    }

    let f_holds = detect_event_f(paths, eps);
    // Clearance from the B(1-eps) threshold, for the borderline band.
    let min_norm = paths
        .iter()
        .flat_map(|p| (0..p.len()).map(|i| point::norm(p.position(i))))
        .fold(f64::INFINITY, f64::min);
    if (min_norm - (1.0 - eps)).abs() <= IMPLICATION_MARGIN {
        borderline = true;
    } else if !f_holds {
        violations.push(format!(
            "{} vacant components but some path visited B(1-eps)",
            vacancy.component_count
        ));
    }

    Ok(ImplicationReport {
        vacuous: false,
        borderline,
        violations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::brownian::{
        simulate_path_segment, DtPolicy, StopSpec, WatchedSphere,
    };
    use crate::geometry::uniform_sphere_point;
    use crate::rng::trial_rng;

    fn p(coords: &[f64]) -> Point {
        Point::from_slice(coords)
    }

    fn stationary_path(c: &Point) -> PathSample {
        let mut path = PathSample::new(c.dim());
        path.push(0.0, c.as_slice());
        path
    }

    #[test]
    fn single_point_sausage_occupies_exact_ball() {
        let c = p(&[0.5, -0.25, 1.0]);
        let mut rng = trial_rng(201, 0);
        let s = build_sausage(&mut rng, &[stationary_path(&c)], 1.0, 0.1).unwrap();
        assert_eq!(s.len(), 1);
        for i in 0..2000 {
            let r = 0.2 + 1.6 * (i as f64 / 2000.0);
            let x = uniform_sphere_point(&mut rng, &c, r);
            assert_eq!(s.is_vacant(&x), r > 1.0, "probe at distance {r}");
        }
    }

    #[test]
    fn refinement_fills_gaps() {
        let a = p(&[0.0, 0.0, 0.0]);
        let b = p(&[3.0, 0.0, 0.0]);
        let mut path = PathSample::new(3);
        path.push(0.0, a.as_slice());
        path.push(1e-9, b.as_slice()); // nearly deterministic bridge
        let mut rng = trial_rng(202, 0);
        let gap = 0.1;
        let s = build_sausage(&mut rng, &[path], 1.0, gap).unwrap();
        // Sort centers along the segment and check consecutive gaps.
        let mut ts: Vec<f64> = (0..s.len()).map(|i| s.center(i)[0]).collect();
        ts.sort_by(|x, y| x.partial_cmp(y).unwrap());
        for w in ts.windows(2) {
            assert!(w[1] - w[0] <= gap + 1e-6, "gap {}", w[1] - w[0]);
        }
    }

    #[test]
    fn vacancy_agrees_with_linear_scan() {
        let mut rng = trial_rng(203, 0);
        for _ in 0..20 {
            let n = 30;
            let centers: Vec<Point> = (0..n)
                .map(|_| {
                    let r = 2.0 * rng.random::<f64>() + 0.01;
                    uniform_sphere_point(&mut rng, &Point::zeros(3), r)
                })
                .collect();
            let mut s = SausageSet::new(3, 0.7);
            for c in &centers {
                s.insert(c.as_slice());
            }
            for _ in 0..5000 {
                let r = 3.0 * rng.random::<f64>() + 0.01;
                let x = uniform_sphere_point(&mut rng, &Point::zeros(3), r);
                let brute = centers.iter().all(|c| c.dist(&x) > 0.7);
                assert_eq!(s.is_vacant(&x), brute);
            }
        }
    }

    #[test]
    fn component_count_trivial_scenes() {
        // Empty sausage: one component.
        let s = SausageSet::new(3, 1.0);
        let rep = count_vacant_components(&Point::zeros(3), 0.3, &s, 0.02).unwrap();
        assert_eq!(rep.component_count, 1);
        assert!(!rep.borderline);
        // One ball covering the whole probe ball: zero components.
        let mut s = SausageSet::new(3, 1.0);
        s.insert(&[0.1, 0.0, 0.0]);
        let rep = count_vacant_components(&Point::zeros(3), 0.3, &s, 0.02).unwrap();
        assert_eq!(rep.component_count, 0);
        // Spacing precondition enforced.
        assert!(count_vacant_components(&Point::zeros(3), 0.3, &s, 0.05).is_err());
    }

    /// Ring of unit balls in the equatorial plane at distance 0.98: near the
    /// axis only |z| <~ 0.199 is covered, away from the axis everything is,
    /// leaving two polar vacant caps in B(0, 0.3).
    fn two_cap_scene() -> SausageSet {
        let mut s = SausageSet::new(3, 1.0);
        let n = 96;
        for i in 0..n {
            let phi = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
            s.insert(&[0.98 * phi.cos(), 0.98 * phi.sin(), 0.0]);
        }
        s
    }

    /// The stamped per-cell minima drive classification through the three
    /// thresholds radius - margin < radius < radius + margin; the cap-box
    /// pruning may skip (cell, center) pairs farther than the reach, so the
    /// classifications must match a brute-force linear scan exactly.
    #[test]
    fn stamped_classification_matches_bruteforce() {
        let mut rng = trial_rng(223, 0);
        for scene in 0..40 {
            let d = 3;
            let eps = 0.15 + 0.1 * (scene % 3) as f64;
            let gs = eps / 12.0;
            let radius = 1.0;
            let n = 200;
            // Mix of shell-hovering centers (the hard case for the cap box)
            // and uniform ones.
            let mut centers = Vec::new();
            for i in 0..n {
                let r = if i % 2 == 0 {
                    1.0 + eps - 0.05 + 0.1 * rng.random::<f64>()
                } else {
                    0.7 + 0.6 * rng.random::<f64>()
                };
                centers.extend_from_slice(
                    uniform_sphere_point(&mut rng, &Point::zeros(d), r).as_slice(),
                );
            }
            let rep = grid_count_components(&[0.0; 3], eps, &centers, d, radius, gs);
            // Brute-force recount: exact min over all centers per cell.
            let margin = gs * (d as f64).sqrt() / 2.0;
            let half = (eps / gs).ceil() as i64 + (margin / gs).ceil() as i64;
            let side = (2 * half + 1) as usize;
            let n_cells = side.pow(d as u32);
            let count_at = |threshold: f64, probe: f64| -> usize {
                let mut uf = UnionFind::new(n_cells);
                let vacant: Vec<bool> = (0..n_cells)
                    .map(|k| {
                        let cell: Vec<f64> = (0..d)
                            .map(|i| {
                                ((k / side.pow(i as u32)) % side) as f64 * gs
                                    - half as f64 * gs
                            })
                            .collect();
                        if point::norm_sq(&cell) > probe * probe {
                            return false;
                        }
                        let md = (0..n)
                            .map(|ci| point::dist_sq(&cell, &centers[ci * 3..ci * 3 + 3]))
                            .fold(f64::INFINITY, f64::min)
                            .sqrt();
                        md > threshold
                    })
                    .collect();
                let mut stride = 1usize;
                for _i in 0..d {
                    for k in 0..n_cells {
                        let nb = k + stride;
                        if vacant[k] && (k / stride) % side + 1 < side && nb < n_cells && vacant[nb]
                        {
                            uf.union(k as u32, nb as u32);
                        }
                    }
                    stride *= side;
                }
                (0..n_cells)
                    .filter(|&k| vacant[k] && uf.find(k as u32) == k as u32)
                    .count()
            };
            let nominal = count_at(radius, eps);
            let mut bmin = nominal;
            let mut bmax = nominal;
            for dt in [-1.0, 0.0, 1.0] {
                for dp in [-1.0, 0.0, 1.0] {
                    if (dt, dp) != (0.0, 0.0) {
                        let c = count_at(radius + dt * margin, eps + dp * margin);
                        bmin = bmin.min(c);
                        bmax = bmax.max(c);
                    }
                }
            }
            assert_eq!(rep.component_count, nominal, "scene {scene}");
            assert_eq!(rep.borderline, bmin != nominal || bmax != nominal, "scene {scene}");
            assert_eq!((rep.min_count, rep.max_count), (bmin, bmax), "scene {scene}");

            // Certified count: optimistic-graph components holding a nominal
            // cell, recomputed from exact minima.
            let cell_of = |k: usize| -> Vec<f64> {
                (0..d)
                    .map(|i| ((k / side.pow(i as u32)) % side) as f64 * gs - half as f64 * gs)
                    .collect()
            };
            let md_of = |k: usize| -> f64 {
                let cell = cell_of(k);
                (0..n)
                    .map(|ci| point::dist_sq(&cell, &centers[ci * 3..ci * 3 + 3]))
                    .fold(f64::INFINITY, f64::min)
                    .sqrt()
            };
            let mut uf = UnionFind::new(n_cells);
            let opt: Vec<bool> = (0..n_cells)
                .map(|k| {
                    point::norm_sq(&cell_of(k)) <= (eps + margin) * (eps + margin)
                        && md_of(k) > radius - margin
                })
                .collect();
            let mut stride = 1usize;
            for _i in 0..d {
                for k in 0..n_cells {
                    let nb = k + stride;
                    if opt[k] && (k / stride) % side + 1 < side && nb < n_cells && opt[nb] {
                        uf.union(k as u32, nb as u32);
                    }
                }
                stride *= side;
            }
            let mut roots: Vec<u32> = (0..n_cells)
                .filter(|&k| point::norm_sq(&cell_of(k)) <= eps * eps && md_of(k) > radius)
                .map(|k| uf.find(k as u32))
                .collect();
            roots.sort_unstable();
            roots.dedup();
            assert_eq!(rep.certified_count, roots.len(), "scene {scene}");
        }
    }

    #[test]
    fn component_count_two_cap_scene() {
        let s = two_cap_scene();
        let rep = count_vacant_components(&Point::zeros(3), 0.3, &s, 0.02).unwrap();
        assert_eq!(rep.component_count, 2);
    }

    #[test]
    fn component_count_monotone_under_growth() {
        let mut rng = trial_rng(205, 0);
        for _ in 0..20 {
            let mut s = SausageSet::new(3, 1.0);
            let mut counts = Vec::new();
            let mut vacant_cells = Vec::new();
            for _ in 0..6 {
                let r = 0.9 + 0.4 * rng.random::<f64>();
                let c = uniform_sphere_point(&mut rng, &Point::zeros(3), r);
                s.insert(c.as_slice());
                let rep = count_vacant_components(&Point::zeros(3), 0.3, &s, 0.02).unwrap();
                counts.push(rep.component_count);
                // Cell-level monotonicity: vacant cell count never grows.
                let mut vc = 0usize;
                let gs = 0.02;
                let half = (0.3f64 / gs).ceil() as i64;
                for ix in -half..=half {
                    for iy in -half..=half {
                        for iz in -half..=half {
                            let x = p(&[ix as f64 * gs, iy as f64 * gs, iz as f64 * gs]);
                            if x.norm() <= 0.3 && s.is_vacant(&x) {
                                vc += 1;
                            }
                        }
                    }
                }
                vacant_cells.push(vc);
            }
            for w in vacant_cells.windows(2) {
                assert!(w[1] <= w[0], "vacant cells grew: {vacant_cells:?}");
            }
        }
    }

    #[test]
    fn component_count_stable_under_grid_refinement() {
        let s = two_cap_scene();
        let coarse = count_vacant_components(&Point::zeros(3), 0.3, &s, 0.02).unwrap();
        let fine = count_vacant_components(&Point::zeros(3), 0.3, &s, 0.01).unwrap();
        assert!(!coarse.borderline);
        assert_eq!(coarse.component_count, fine.component_count);
    }

    #[test]
    fn event_f_detector() {
        let eps = 0.1;
        assert!(detect_event_f(&[stationary_path(&p(&[1.0, 0.0, 0.0]))], eps));
        assert!(!detect_event_f(
            &[stationary_path(&p(&[0.5, 0.0, 0.0]))],
            eps
        ));
        // Annotated inward crossing of sphere 1-eps counts even if no stored
        // sample is inside.
        let mut path = stationary_path(&p(&[1.0, 0.0, 0.0]));
        path.watched.push(WatchedSphere::origin(3, 1.0 - eps));
        path.crossings.push(crate::brownian::Crossing {
            sphere: 0,
            inward: true,
            time: 0.5,
            point: p(&[0.9, 0.0, 0.0]),
            after_step: 0,
        });
        assert!(!detect_event_f(&[path], eps));
    }

    #[test]
    fn event_f_frequency_matches_escape_law() {
        // One motion from the unit sphere, d=3: P[F] = eps.
        let eps = 0.2;
        let d = 3;
        let mut rng = trial_rng(207, 0);
        let policy = DtPolicy::from_spatial(0.02, 1e-5, d);
        let watched = vec![
            WatchedSphere::origin(d, 1.0 - eps),
            WatchedSphere::origin(d, 8.0),
        ];
        let stop = StopSpec::new().hit_sphere(0).exit_sphere(1);
        let n = 20_000u32;
        let mut f_holds = 0u32;
        for _ in 0..n {
            let start = uniform_sphere_point(&mut rng, &Point::zeros(d), 1.0);
            let (path, reason) =
                simulate_path_segment(&mut rng, &start, &policy, &watched, &stop).unwrap();
            match reason {
                crate::brownian::StopReason::Hit(_) => {}
                crate::brownian::StopReason::Exit(_) => {
                    let exit = crate::brownian::snap_to_sphere(&p(path.last_position()), 8.0);
                    // Any future return to the sphere 1-eps means F fails;
                    // resolved exactly.
                    if crate::brownian::resolve_return(&mut rng, &exit, 1.0 - eps)
                        .unwrap()
                        .is_none()
                    {
                        f_holds += 1;
                    }
                }
                crate::brownian::StopReason::TimedOut => unreachable!(),
            }
        }
        let p_hat = f_holds as f64 / n as f64;
        let se = crate::stats::binomial_stderr(eps, n as u64);
        assert!((p_hat - eps).abs() < 3.5 * se + 0.003, "P[F] = {p_hat}");
    }

    #[test]
    fn event_e_detector_trivial_cases() {
        let eps = 0.1;
        let one = stationary_path(&p(&[1.0, 0.0, 0.0]));
        assert!(!detect_event_e(&[one.clone()], eps).unwrap());
        let other = stationary_path(&p(&[-1.0, 0.0, 0.0]));
        assert!(detect_event_e(&[one, other], eps).unwrap());
    }

    #[test]
    fn event_e_bruteforce_finds_witness() {
        let eps = 0.1;
        let mut rng = trial_rng(209, 0);
        let one = stationary_path(&p(&[1.0, 0.0, 0.0]));
        assert!(!detect_event_e_bruteforce(&mut rng, &[one], eps, 10_000).unwrap());
        // Simplex containing the origin, scaled to fit inside B(1+eps) so no
        // vertex is dropped by the visited-point cut.
        let simplex: Vec<PathSample> = [
            [0.5, 0.0, 0.0],
            [-0.5, 0.5, 0.0],
            [-0.5, -0.5, 0.5],
            [-0.5, -0.5, -0.5],
        ]
        .iter()
        .map(|c| stationary_path(&p(c)))
        .collect();
        assert!(detect_event_e_bruteforce(&mut rng, &simplex, eps, 10_000).unwrap());
    }

    #[test]
    fn event_e_exact_vs_bruteforce_on_random_scenes() {
        // The direction-sampling referee is one-sided: a found witness proves
        // E false, but when the hull distance is only slightly above eps the
        // witness cone has measure ~ (dist - eps)^2 and uniform sampling can
        // miss it.  So the cross-check is: (a) whenever the referee finds a
        // witness the exact detector must say E fails; (b) whenever the exact
        // detector says E fails, its certified direction must pass the same
        // half-space scan the referee uses; (c) once the hull distance clears
        // eps by 0.1 the witness cone is wide enough that a uniform miss over
        // 10^4 directions has probability < 1e-8, so there the two answers
        // must agree outright.
        let mut rng = trial_rng(211, 0);
        let eps = 0.15;
        let margin = 1e-3;
        let mut checked = 0;
        for _ in 0..10_000 {
            let n = 1 + (rng.random::<u32>() as usize) % 6;
            let paths: Vec<PathSample> = (0..n)
                .map(|_| {
                    let r = 0.2 + 0.9 * rng.random::<f64>();
                    stationary_path(&uniform_sphere_point(&mut rng, &Point::zeros(3), r))
                })
                .collect();
            let dist = visited_hull_distance(&paths, eps).unwrap();
            if (dist - eps).abs() <= margin {
                continue;
            }
            checked += 1;
            let exact = detect_event_e(&paths, eps).unwrap();
            let brute = detect_event_e_bruteforce(&mut rng, &paths, eps, 10_000).unwrap();
            if !brute {
                assert!(!exact, "referee found a witness but hull distance {dist} <= eps");
            }
            let witness = event_e_witness_direction(&paths, eps).unwrap();
            assert_eq!(witness.is_some(), !exact);
            if let Some(e) = &witness {
                // Independent verification by linear scan over the raw points.
                let flat = visited_points_within(&paths, 1.0 + eps);
                let max_dot = (0..flat.len() / 3)
                    .map(|i| point::dot(e.as_slice(), &flat[i * 3..(i + 1) * 3]))
                    .fold(f64::NEG_INFINITY, f64::max);
                assert!(max_dot < -eps, "certificate fails: max dot {max_dot}");
            }
            if dist > eps + 0.1 {
                assert!(!brute, "referee missed a wide witness cone, dist {dist}");
            }
        }
        assert!(checked > 5_000, "only {checked} non-marginal scenes");
    }

    #[test]
    fn implication_checker_on_constructed_scenes() {
        let eps = 0.3;
        // Vacuous when fewer than 2 components.
        let rep = VacancyReport {
            component_count: 1,
            grid_spacing: 0.02,
            borderline: false,
            min_count: 1,
            max_count: 1,
            certified_count: 1,
        };
        let path = stationary_path(&p(&[1.0, 0.0, 0.0]));
        let out = check_hemiball_implication(&[path], &rep, eps).unwrap();
        assert!(out.vacuous && out.violations.is_empty());

        // The two-cap scene as "paths": stationary motions at the ring
        // centers; both conclusions must hold.
        let s = two_cap_scene();
        let paths: Vec<PathSample> = (0..s.len())
            .map(|i| stationary_path(&p(s.center(i))))
            .collect();
        let rep = count_vacant_components(&Point::zeros(3), eps, &s, 0.02).unwrap();
        assert_eq!(rep.component_count, 2);
        let out = check_hemiball_implication(&paths, &rep, eps).unwrap();
        assert!(!out.vacuous);
        assert!(out.violations.is_empty(), "{:?}", out.violations);
    }
}

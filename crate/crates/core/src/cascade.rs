//! Excursion machinery over annotated Brownian paths: extraction of the
//! alternating revisit/exit fragments between the unit sphere and an outer
//! sphere of range r ("r-excursions"), the small-radius event G over the
//! dyadic range ladder, the recursive range-shrinking cascade driven by the
//! distance of the excursion-start affine hull to the origin, and the
//! lexicographic stopping index tau with its three trigger conditions.

use crate::brownian::PathSample;
use crate::geometry::{hull_tol, AffineHull};
use crate::point::{self, Point};
use crate::{Error, Result};
use std::collections::HashSet;

// ---------------------------------------------------------------------------
// Admissibility, gamma, dyadic ranges
// ---------------------------------------------------------------------------

/// The range-shrink factor gamma = (ln eps)^2 + 1.
pub fn cascade_gamma(eps: f64) -> f64 {
    let l = eps.ln();
    l * l + 1.0
}

/// eps must lie in (0, 1) with ln(1/eps) >= 1, i.e. eps <= 1/e.
pub fn check_eps_admissible(eps: f64) -> Result<()> {
    if !(eps > 0.0 && (1.0 / eps).ln() >= 1.0) {
        return Err(Error::InvalidInput(format!(
            "eps {eps} not admissible: need 0 < eps <= 1/e"
        )));
    }
    Ok(())
}

/// The dyadic range ladder {2^-k : 0 <= k <= log2(1/eps)}, descending.
pub fn dyadic_ranges(eps: f64) -> Result<Vec<f64>> {
    check_eps_admissible(eps)?;
    let k_max = (1.0 / eps).log2().floor() as i32;
    Ok((0..=k_max).map(|k| 0.5f64.powi(k)).collect())
}

/// Largest dyadic range r with r <= bound, if any.
pub fn largest_dyadic_le(dyadic: &[f64], bound: f64) -> Option<f64> {
    dyadic.iter().copied().find(|&r| r <= bound)
}

// ---------------------------------------------------------------------------
// r-excursion extraction
// ---------------------------------------------------------------------------

/// One excursion fragment: from a revisit of the unit sphere until the next
/// exit through the sphere of radius 1 + r.
#[derive(Clone, Debug)]
pub struct ExcursionRecord {
    pub motion_index: usize,
    pub start_time: f64,
    pub end_time: f64,
    pub start_point: Point,
    pub end_point: Point,
    /// the range r
    pub range: f64,
    /// max displacement from start_point over the fragment
    pub radius: f64,
}

/// Extract the r-excursions of an annotated path: the first starts at time 0
/// (the path must start on the unit sphere) and ends at the first outward
/// crossing of the sphere 1 + r; each later one starts at the first crossing
/// of the unit sphere after the previous exit.  Both spheres must be watched
/// so that crossings are annotated; paths resumed after a skipped return leg
/// must re-enter strictly outside the unit sphere, so that every revisit is
/// an honest annotated crossing.
///
/// Start times are taken verbatim from the shared crossing records, so the
/// nesting property (every start for range r is also a start for any smaller
/// dyadic range) holds with exact float equality.
pub fn extract_r_excursions(path: &PathSample, r: f64) -> Result<Vec<ExcursionRecord>> {
    extract_r_excursions_for(path, r, 0)
}

/// [`extract_r_excursions`] with an explicit motion index recorded on each
/// excursion.
pub fn extract_r_excursions_for(
    path: &PathSample,
    r: f64,
    motion_index: usize,
) -> Result<Vec<ExcursionRecord>> {
    if path.is_empty() {
        return Err(Error::InvalidInput("excursions of an empty path".into()));
    }
    let s1 = path
        .sphere_index(1.0)
        .ok_or_else(|| Error::InvalidInput("unit sphere not watched".into()))?;
    let s2 = path.sphere_index(1.0 + r).ok_or_else(|| {
        Error::InvalidInput(format!("sphere of radius 1+{r} not watched"))
    })?;
    let start = Point::from_slice(path.position(0));
    if (start.norm() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(
            "path does not start on the unit sphere".into(),
        ));
    }

    let mut out = Vec::new();
    // (start_time, start_point) of the excursion currently awaiting its exit.
    let mut open: Option<(f64, Point)> = Some((0.0, start));
    for c in &path.crossings {
        match &open {
            Some((t0, _)) => {
                if c.sphere == s2 && !c.inward && c.time >= *t0 {
                    let (t0, p0) = open.take().expect("checked above");
                    out.push(close_excursion(
                        path,
                        motion_index,
                        r,
                        t0,
                        p0,
                        c.time,
                        c.point.clone(),
                    ));
                }
            }
            None => {
                if c.sphere == s1 && c.inward {
                    open = Some((c.time, c.point.clone()));
                }
            }
        }
    }
    // A still-open excursion can only happen on a timed-out path; count it
    // (its start time is finite) with the fragment that was simulated.
    if let Some((t0, p0)) = open {
        if path.timed_out {
            let t1 = path.last_time();
            let p1 = Point::from_slice(path.last_position());
            out.push(close_excursion(path, motion_index, r, t0, p0, t1, p1));
        } else if !out.is_empty() || path.crossings.iter().any(|c| c.sphere == s2 && !c.inward) {
            // Completed paths end outside every excursion: reaching here with
            // recorded exits would mean the bookkeeping is wrong.
            return Err(Error::InvalidInput(
                "path ends inside an excursion without timing out".into(),
            ));
        } else {
            // Path never reached the outer sphere at all (e.g. stopped by an
            // inner hit); the single open fragment is still an excursion start.
            let t1 = path.last_time();
            let p1 = Point::from_slice(path.last_position());
            out.push(close_excursion(path, motion_index, r, t0, p0, t1, p1));
        }
    }
    Ok(out)
}

fn close_excursion(
    path: &PathSample,
    motion_index: usize,
    r: f64,
    t0: f64,
    p0: Point,
    t1: f64,
    p1: Point,
) -> ExcursionRecord {
    // Max displacement from the start over stored samples and interpolated
    // crossing points within [t0, t1].
    let mut radius: f64 = p1.dist(&p0);
    let lo = path.times.partition_point(|&t| t < t0);
    let hi = path.times.partition_point(|&t| t <= t1);
    for i in lo..hi {
        radius = radius.max(point::dist(path.position(i), p0.as_slice()));
    }
    for c in &path.crossings {
        if c.time >= t0 && c.time <= t1 {
            radius = radius.max(c.point.dist(&p0));
        }
    }
    ExcursionRecord {
        motion_index,
        start_time: t0,
        end_time: t1,
        start_point: p0,
        end_point: p1,
        range: r,
        radius,
    }
}

// ---------------------------------------------------------------------------
// Event G: all excursions have small radius
// ---------------------------------------------------------------------------

/// Outcome of the small-radius check.
#[derive(Clone, Debug)]
pub struct EventGReport {
    /// true iff every r-excursion of every path has radius < (ln eps)^2 * r
    /// for every dyadic range r
    pub holds: bool,
    /// some excursion radius within (ln eps)^2 * refine_gap of its threshold:
    /// the discrete radius estimate cannot resolve the comparison
    pub borderline: bool,
}

/// Check that for every dyadic range r, every r-excursion of every path has
/// radius below (ln eps)^2 * r.  `refine_gap` is the spatial resolution of
/// the sampled paths (the sausage refinement gap): radius estimates are only
/// trusted to that resolution, so comparisons within it are flagged.
pub fn detect_event_g(paths: &[PathSample], eps: f64, refine_gap: f64) -> Result<EventGReport> {
    let dyadic = dyadic_ranges(eps)?;
    let factor = eps.ln().powi(2);
    let mut holds = true;
    let mut borderline = false;
    for (k, path) in paths.iter().enumerate() {
        for &r in &dyadic {
            for exc in extract_r_excursions_for(path, r, k)? {
                let thr = factor * r;
                if exc.radius >= thr {
                    holds = false;
                }
                if (exc.radius - thr).abs() <= factor * refine_gap {
                    borderline = true;
                }
            }
        }
    }
    Ok(EventGReport { holds, borderline })
}

// ---------------------------------------------------------------------------
// The cascade
// ---------------------------------------------------------------------------

/// A new excursion start discovered at some level.
#[derive(Clone, Debug)]
pub struct NewStart {
    /// which Brownian motion (0-based)
    pub motion: usize,
    pub time: f64,
    pub point: Point,
}

/// One level of the cascade.
#[derive(Clone, Debug)]
pub struct LevelRecord {
    /// the range r_l; None for level 0 (which has no excursions, only the
    /// path starting points)
    pub range: Option<f64>,
    /// starts not already present at the previous level, ordered by
    /// (motion, time)
    pub new_starts: Vec<NewStart>,
    /// cumulative excursion-start count through this level
    pub n_bar: usize,
    /// distance from the affine hull of all starts through this level to the
    /// origin
    pub d_l: f64,
    /// affine dimension of that hull
    pub hull_dim: usize,
}

/// Which of the three stopping conditions fired at the stopping index.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TauTrigger {
    /// new point within eps of the hull of all strictly-earlier points
    pub near_prev_hull: bool,
    /// hull including the new point within 2*gamma*eps of the origin
    pub hull_near_origin: bool,
    /// the new point is the (d+1)-th
    pub count_reached: bool,
    /// (level, motion, index-within-level-and-motion), all 0-based
    pub at: (usize, usize, usize),
}

/// Full record of one cascade run.
#[derive(Clone, Debug)]
pub struct CascadeState {
    pub eps: f64,
    pub gamma: f64,
    pub dyadic: Vec<f64>,
    pub dim: usize,
    /// number of Brownian motions
    pub k_motions: usize,
    /// levels 0..; the last entry is where the run stopped or looped
    pub levels: Vec<LevelRecord>,
    /// the last step L; None encodes the infinite loop (a level with no new
    /// starts)
    pub l_final: Option<usize>,
    /// lexicographic stopping index (filled by [`compute_tau`]); inner None
    /// encodes tau = +infinity
    pub tau: Option<Option<usize>>,
    pub tau_trigger: Option<TauTrigger>,
    /// some threshold comparison fell within its tolerance band
    pub borderline: bool,
}

/// Borderline band for threshold comparisons: 10x the hull tolerance at the
/// given scale.
fn threshold_band(scale: f64) -> f64 {
    10.0 * hull_tol(scale)
}

/// Run the cascade on K annotated paths started on the unit sphere.
///
/// Level 0 takes the K starting points; each later level l picks the largest
/// dyadic range r_l <= d_{l-1} / gamma, extracts the r_l-excursions of every
/// path, and adds the excursion starts not seen at level l-1.  The run stops
/// with L = l when the cumulative start count reaches d+1 or the hull
/// distance d_l drops below 2*gamma*eps; a level that adds no new start
/// repeats forever, so it is detected and recorded as L = +infinity.
pub fn run_cascade(paths: &[PathSample], eps: f64) -> Result<CascadeState> {
    check_eps_admissible(eps)?;
    let k_motions = paths.len();
    if k_motions == 0 {
        return Err(Error::InvalidInput("cascade of zero paths".into()));
    }
    let dim = paths[0].dim;
    let gamma = cascade_gamma(eps);
    let dyadic = dyadic_ranges(eps)?;
    let tol = hull_tol(1.0);
    let band = threshold_band(1.0);
    let origin = Point::zeros(dim);
    let mut borderline = false;

    // Level 0: the starting points.
    let mut hull: Option<AffineHull> = None;
    let mut starts0 = Vec::with_capacity(k_motions);
    for (k, path) in paths.iter().enumerate() {
        if path.is_empty() {
            return Err(Error::InvalidInput("cascade on an empty path".into()));
        }
        let p = Point::from_slice(path.position(0));
        if (p.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(
                "cascade path does not start on the unit sphere".into(),
            ));
        }
        match &mut hull {
            None => hull = Some(AffineHull::new(p.clone())),
            Some(h) => {
                h.extend(&p, tol);
            }
        }
        starts0.push(NewStart {
            motion: k,
            time: 0.0,
            point: p,
        });
    }
    let mut hull = hull.expect("at least one path");
    let d_0 = hull.distance_projection(&origin);
    let threshold = 2.0 * gamma * eps;
    if (d_0 - threshold).abs() <= band {
        borderline = true;
    }
    let mut levels = vec![LevelRecord {
        range: None,
        new_starts: starts0,
        n_bar: k_motions,
        d_l: d_0,
        hull_dim: hull.dim(),
    }];
    // Start times seen at the previous level, per motion.
    let mut prev_times: Vec<HashSet<u64>> = (0..k_motions)
        .map(|_| HashSet::from([0.0f64.to_bits()]))
        .collect();

    let mut l_final = None;
    if k_motions >= dim + 1 || d_0 < threshold {
        l_final = Some(0);
    } else {
        for l in 1.. {
            let d_prev = levels[l - 1].d_l;
            let r_l = largest_dyadic_le(&dyadic, d_prev / gamma).ok_or_else(|| {
                Error::InvalidInput(format!(
                    "no dyadic range below {} / gamma; should be unreachable while \
                     d_l >= 2*gamma*eps",
                    d_prev
                ))
            })?;
            let mut new_starts = Vec::new();
            let mut cur_times: Vec<HashSet<u64>> =
                (0..k_motions).map(|_| HashSet::new()).collect();
            let mut n_bar = 0usize;
            for (k, path) in paths.iter().enumerate() {
                for exc in extract_r_excursions_for(path, r_l, k)? {
                    n_bar += 1;
                    cur_times[k].insert(exc.start_time.to_bits());
                    if !prev_times[k].contains(&exc.start_time.to_bits()) {
                        new_starts.push(NewStart {
                            motion: k,
                            time: exc.start_time,
                            point: exc.start_point,
                        });
                    }
                }
            }
            if new_starts.is_empty() {
                // The range can only repeat or stay degenerate from here on:
                // the construction loops forever.
                levels.push(LevelRecord {
                    range: Some(r_l),
                    new_starts,
                    n_bar,
                    d_l: d_prev,
                    hull_dim: hull.dim(),
                });
                l_final = None;
                break;
            }
            new_starts.sort_by(|a, b| {
                (a.motion, a.time)
                    .partial_cmp(&(b.motion, b.time))
                    .expect("finite times")
            });
            for s in &new_starts {
                hull.extend(&s.point, tol);
            }
            let d_l = hull.distance_projection(&origin);
            if (d_l - threshold).abs() <= band {
                borderline = true;
            }
            levels.push(LevelRecord {
                range: Some(r_l),
                new_starts,
                n_bar,
                d_l,
                hull_dim: hull.dim(),
            });
            prev_times = cur_times;
            if n_bar >= dim + 1 || d_l < threshold {
                l_final = Some(l);
                break;
            }
        }
    }

    Ok(CascadeState {
        eps,
        gamma,
        dyadic,
        dim,
        k_motions,
        levels,
        l_final,
        tau: None,
        tau_trigger: None,
        borderline,
    })
}

/// Compute the lexicographic stopping index tau on a completed cascade run:
/// walk the start points in (level, motion, within-level index) order with a
/// running counter; at each point from the second on, fire when (1) the point
/// lies within eps of the affine hull of all earlier points, (2) the hull
/// including the point comes within 2*gamma*eps of the origin, or (3) the
/// counter reaches d+1.  Returns the counter value (None = +infinity: the
/// run looped before any condition fired) and stores it on the state.
pub fn compute_tau(state: &mut CascadeState) -> (Option<usize>, Option<TauTrigger>) {
    let eps = state.eps;
    let threshold = 2.0 * state.gamma * eps;
    let tol = hull_tol(1.0);
    let band = threshold_band(1.0);
    let origin = Point::zeros(state.dim);
    let mut hull: Option<AffineHull> = None;
    let mut counter = 0usize;
    let mut result: Option<usize> = None;
    let mut trigger: Option<TauTrigger> = None;

    'walk: for (l, level) in state.levels.iter().enumerate() {
        let mut index_in_motion = vec![0usize; state.k_motions];
        for s in &level.new_starts {
            counter += 1;
            let i = index_in_motion[s.motion];
            index_in_motion[s.motion] += 1;
            match &mut hull {
                None => {
                    hull = Some(AffineHull::new(s.point.clone()));
                    continue;
                }
                Some(h) => {
                    let dist_prev = h.distance_projection(&s.point);
                    if (dist_prev - eps).abs() <= band {
                        state.borderline = true;
                    }
                    h.extend(&s.point, tol);
                    let d_here = h.distance_projection(&origin);
                    if (d_here - threshold).abs() <= band {
                        state.borderline = true;
                    }
                    let t = TauTrigger {
                        near_prev_hull: dist_prev < eps,
                        hull_near_origin: d_here < threshold,
                        count_reached: counter == state.dim + 1,
                        at: (l, s.motion, i),
                    };
                    if t.near_prev_hull || t.hull_near_origin || t.count_reached {
                        result = Some(counter);
                        trigger = Some(t);
                        break 'walk;
                    }
                }
            }
        }
    }
    state.tau = Some(result);
    state.tau_trigger = trigger;
    (result, trigger)
}

// ---------------------------------------------------------------------------
// Lemma-level assertions
// ---------------------------------------------------------------------------

/// Outcome of checking the proved implications on one cascade run.
#[derive(Clone, Debug, Default)]
pub struct CascadeLemmaReport {
    /// human-readable violation descriptions; empty on pass
    pub violations: Vec<String>,
    /// threshold comparisons too close to call; violations on borderline
    /// runs are reported but should be excluded from hard assertions
    pub borderline: bool,
}

/// Check the proved implications on a completed run (with tau computed):
/// a finite last step L has strictly increasing cumulative counts and L <= d;
/// a level with no new starts carries the infinite-loop marker; if events E
/// and G both hold then L <= d; and L <= d forces tau <= d+1.
pub fn verify_cascade_lemmas(
    state: &CascadeState,
    event_e: bool,
    event_g: bool,
) -> CascadeLemmaReport {
    let mut rep = CascadeLemmaReport {
        violations: Vec::new(),
        borderline: state.borderline,
    };
    let d = state.dim;
    if let Some(big_l) = state.l_final {
        for l in 1..=big_l {
            if state.levels[l].n_bar <= state.levels[l - 1].n_bar {
                rep.violations.push(format!(
                    "L = {big_l} finite but cumulative count not strictly increasing at \
                     level {l}: {} -> {}",
                    state.levels[l - 1].n_bar,
                    state.levels[l].n_bar
                ));
            }
        }
        if big_l > d {
            rep.violations
                .push(format!("L = {big_l} finite but exceeds d = {d}"));
        }
    }
    for l in 1..state.levels.len() {
        if state.levels[l].n_bar == state.levels[l - 1].n_bar && state.l_final.is_some() {
            rep.violations.push(format!(
                "level {l} added no excursions but the run is not marked as looping"
            ));
        }
    }
    if event_e && event_g && !matches!(state.l_final, Some(l) if l <= d) {
        rep.violations.push(format!(
            "events E and G hold but L = {:?} is not a finite value <= d = {d}",
            state.l_final
        ));
    }
    // tau enumerates points from the second on, so the implication from a
    // finite L is vacuous when the whole run produced a single point (one
    // motion stopped at level 0 by the distance threshold, which happens at
    // desk-scale eps where 2*gamma*eps > 1).
    let total_points: usize = state.levels.iter().map(|l| l.new_starts.len()).sum();
    if total_points >= 2 && matches!(state.l_final, Some(l) if l <= d) {
        match state.tau {
            Some(Some(t)) if t <= d + 1 => {}
            Some(t) => rep.violations.push(format!(
                "L <= d but tau = {t:?} is not a finite value <= d+1"
            )),
            None => rep
                .violations
                .push("tau was not computed before lemma verification".into()),
        }
    }
    rep
}

/// Serialize a run to a single replayable text record.  Schema:
/// `cascade seed=<u64> trial=<u64> eps=<f64> gamma=<f64> L=<int|inf>
/// tau=<int|inf|unset> levels=l:r=<f64|->,new=<n>,nbar=<n>,d=<f64>[;...]`.
pub fn cascade_record(state: &CascadeState, master_seed: u64, trial: u64) -> String {
    use std::fmt::Write;
    let mut s = format!(
        "cascade seed={master_seed} trial={trial} eps={} gamma={} L={} tau={} levels=",
        state.eps,
        state.gamma,
        match state.l_final {
            Some(l) => l.to_string(),
            None => "inf".into(),
        },
        match state.tau {
            Some(Some(t)) => t.to_string(),
            Some(None) => "inf".into(),
            None => "unset".into(),
        },
    );
    for (l, level) in state.levels.iter().enumerate() {
        if l > 0 {
            s.push(';');
        }
        write!(
            s,
            "{l}:r={},new={},nbar={},d={}",
            level.range.map_or("-".into(), |r| r.to_string()),
            level.new_starts.len(),
            level.n_bar,
            level.d_l
        )
        .expect("infallible write to String");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::brownian::{
        extend_path_segment, resolve_return, simulate_path_segment, snap_to_sphere, Crossing,
        DtPolicy, StopReason, StopSpec, WatchedSphere,
    };
    use crate::geometry::uniform_sphere_point;
    use crate::rng::trial_rng;

    fn p(coords: &[f64]) -> Point {
        Point::from_slice(coords)
    }

    /// Build a piecewise-linear path through the waypoints and annotate every
    /// sphere crossing by the same straddle-and-interpolate rule the
    /// simulator uses.
    fn synthetic_path(waypoints: &[Point], watched: Vec<WatchedSphere>) -> PathSample {
        let dim = waypoints[0].dim();
        let mut path = PathSample::new(dim);
        path.watched = watched;
        for (i, w) in waypoints.iter().enumerate() {
            let t1 = i as f64;
            if i > 0 {
                let prev = waypoints[i - 1].clone();
                for (k, sph) in path.watched.iter().enumerate() {
                    let f0 = sph.signed_dist(prev.as_slice());
                    let f1 = sph.signed_dist(w.as_slice());
                    if (f0 <= 0.0) != (f1 <= 0.0) {
                        // Exact crossing of an origin-centered sphere along
                        // the straight segment (long synthetic segments make
                        // the simulator's linear interpolation too crude).
                        let delta = w.sub(&prev);
                        let a = delta.norm_sq();
                        let b = 2.0 * prev.dot(&delta);
                        let c = prev.norm_sq() - sph.radius * sph.radius;
                        let disc = (b * b - 4.0 * a * c).max(0.0).sqrt();
                        let roots = [(-b - disc) / (2.0 * a), (-b + disc) / (2.0 * a)];
                        let lambda = roots
                            .into_iter()
                            .find(|&l| (0.0..=1.0).contains(&l))
                            .expect("sign straddle implies a root in [0,1]");
                        let mut cp = prev.clone();
                        for j in 0..dim {
                            cp.0[j] = prev[j] + lambda * (w[j] - prev[j]);
                        }
                        path.crossings.push(Crossing {
                            sphere: k,
                            inward: f1 <= 0.0,
                            time: (t1 - 1.0) + lambda,
                            point: cp,
                            after_step: i,
                        });
                    }
                }
            }
            path.push(t1, w.as_slice());
        }
        path.crossings
            .sort_by(|a, b| a.time.partial_cmp(&b.time).unwrap());
        path
    }

    fn spheres_for(dim: usize, eps: f64) -> Vec<WatchedSphere> {
        let mut w = vec![WatchedSphere::origin(dim, 1.0)];
        for r in dyadic_ranges(eps).unwrap() {
            w.push(WatchedSphere::origin(dim, 1.0 + r));
        }
        w
    }

    /// Simulate one cascade-ready path: start on the unit sphere, watch the
    /// unit sphere and every dyadic outer sphere, resolve returns at the
    /// outermost sphere exactly, and re-enter on a sphere strictly outside
    /// the unit sphere.
    fn simulate_cascade_path(
        rng: &mut impl rand::Rng,
        dim: usize,
        eps: f64,
        start: &Point,
    ) -> PathSample {
        let watched = spheres_for(dim, eps);
        let outer_idx = 1; // radius 1 + 1 = 2, the largest dyadic range
        let reentry_radius = 1.0 + eps;
        let policy = DtPolicy::from_spatial(0.05, 2e-4, dim);
        let stop = StopSpec::new().exit_sphere(outer_idx);
        let (mut path, mut reason) =
            simulate_path_segment(rng, start, &policy, &watched, &stop).unwrap();
        loop {
            match reason {
                StopReason::Exit(_) => {
                    let exit = snap_to_sphere(&p(path.last_position()), 2.0);
                    match resolve_return(rng, &exit, reentry_radius).unwrap() {
                        None => break,
                        Some(entry) => {
                            path.push(path.last_time() + 1.0, entry.as_slice());
                            reason = extend_path_segment(rng, &mut path, &policy, &stop).unwrap();
                        }
                    }
                }
                _ => break,
            }
        }
        path
    }

    #[test]
    fn gamma_and_dyadic_ladder() {
        let eps = (-6.0f64).exp();
        assert!((cascade_gamma(eps) - 37.0).abs() < 1e-12);
        let dy = dyadic_ranges(eps).unwrap();
        // log2(e^6) = 8.656..., so k runs 0..=8.
        assert_eq!(dy.len(), 9);
        assert_eq!(dy[0], 1.0);
        assert_eq!(*dy.last().unwrap(), 0.00390625);
        // Step-1 range choice: largest dyadic <= 0.5 / 37.
        assert_eq!(largest_dyadic_le(&dy, 0.5 / 37.0), Some(0.0078125));
        assert!(dyadic_ranges(0.9).is_err());
    }

    #[test]
    fn single_exit_gives_one_excursion() {
        let r = 0.5;
        let watched = vec![
            WatchedSphere::origin(3, 1.0),
            WatchedSphere::origin(3, 1.0 + r),
        ];
        let path = synthetic_path(
            &[p(&[1.0, 0.0, 0.0]), p(&[2.5, 0.0, 0.0])],
            watched,
        );
        let ex = extract_r_excursions(&path, r).unwrap();
        assert_eq!(ex.len(), 1);
        assert_eq!(ex[0].start_time, 0.0);
        assert!((ex[0].end_point.norm() - 1.5).abs() < 1e-12);
        assert!(ex[0].radius >= r);
    }

    #[test]
    fn sawtooth_gives_three_excursions_with_correct_starts() {
        let r = 0.25;
        let watched = vec![
            WatchedSphere::origin(3, 1.0),
            WatchedSphere::origin(3, 1.0 + r),
        ];
        // Out, back in below 1, out, back in, out, and away: three excursions.
        let path = synthetic_path(
            &[
                p(&[1.0, 0.0, 0.0]),
                p(&[1.5, 0.0, 0.0]),
                p(&[0.9, 0.4, 0.0]),
                p(&[1.6, 0.4, 0.0]),
                p(&[0.0, 0.95, 0.0]),
                p(&[0.0, 2.0, 0.0]),
            ],
            watched,
        );
        let ex = extract_r_excursions(&path, r).unwrap();
        assert_eq!(ex.len(), 3);
        assert_eq!(ex[0].start_point, p(&[1.0, 0.0, 0.0]));
        for e in &ex[1..] {
            // Interpolated revisit points lie on the unit sphere.
            assert!((e.start_point.norm() - 1.0).abs() < 1e-9, "{:?}", e.start_point);
        }
        assert!(ex[1].start_time > ex[0].end_time);
        assert!(ex[2].start_time > ex[1].end_time);
        for e in &ex {
            assert!((e.end_point.norm() - (1.0 + r)).abs() < 1e-9);
            assert!(e.radius >= r - 1e-9);
        }
    }

    #[test]
    fn excursion_starts_nest_across_dyadic_ranges() {
        let eps = 0.1;
        let dy = dyadic_ranges(eps).unwrap();
        for trial in 0..25 {
            let mut rng = trial_rng(301, trial);
            let start = uniform_sphere_point(&mut rng, &Point::zeros(3), 1.0);
            let path = simulate_cascade_path(&mut rng, 3, eps, &start);
            let mut prev: Option<HashSet<u64>> = None;
            for &r in &dy {
                let starts: HashSet<u64> = extract_r_excursions(&path, r)
                    .unwrap()
                    .iter()
                    .map(|e| e.start_time.to_bits())
                    .collect();
                if let Some(bigger_range) = &prev {
                    assert!(
                        bigger_range.is_subset(&starts),
                        "starts for a larger range must persist at smaller ranges"
                    );
                }
                prev = Some(starts);
            }
        }
    }

    #[test]
    fn event_g_threshold_and_injected_violation() {
        let eps: f64 = 0.1; // (ln eps)^2 = 5.30 > 1
        let factor = eps.ln().powi(2);
        let dy = dyadic_ranges(eps).unwrap();
        let watched = spheres_for(3, eps);
        // A straight radial dash: for each range r the single excursion has
        // radius exactly r (the minimum possible), far below factor*r.
        let path = synthetic_path(&[p(&[1.0, 0.0, 0.0]), p(&[2.01, 0.0, 0.0])], watched.clone());
        let rep = detect_event_g(&[path], eps, 1e-6).unwrap();
        assert!(rep.holds);
        assert!(!rep.borderline);
        // Inject a violation for the smallest range r: wander to the far
        // side of the ball (displacement ~2, far above factor*r = 0.66)
        // while staying inside the sphere 1 + r, then leave.
        let r_small = *dy.last().unwrap();
        assert!(2.0 > factor * r_small + 0.1);
        let path = synthetic_path(
            &[
                p(&[1.0, 0.0, 0.0]),
                p(&[-1.0 - 0.6 * r_small, 0.0, 0.0]),
                p(&[2.01, 0.0, 0.0]),
            ],
            watched,
        );
        let rep = detect_event_g(&[path], eps, 1e-6).unwrap();
        assert!(!rep.holds);
    }

    #[test]
    fn cascade_stops_at_level_zero_when_threshold_exceeds_distance() {
        // Single motion, d_0 = 1, and 2*gamma*eps > 1.
        let eps = 0.3;
        assert!(2.0 * cascade_gamma(eps) * eps > 1.0);
        let watched = spheres_for(3, eps);
        let path = synthetic_path(&[p(&[1.0, 0.0, 0.0]), p(&[2.5, 0.0, 0.0])], watched);
        let state = run_cascade(&[path], eps).unwrap();
        assert_eq!(state.l_final, Some(0));
        assert_eq!(state.levels.len(), 1);
        assert_eq!(state.levels[0].n_bar, 1);
        assert!((state.levels[0].d_l - 1.0).abs() < 1e-9);
    }

    #[test]
    fn cascade_detects_infinite_loop_and_tau_is_infinite() {
        // One sawtooth revisit: every range sees the same two starts, so the
        // level after the first adds nothing and the run must loop.
        // The revisit must stay close enough to the start that the two-point
        // hull keeps its distance to the origin above 2*gamma*eps (~0.9974),
        // yet farther than eps so no tau condition fires: chord ~0.1 gives
        // hull distance sqrt(1 - 0.05^2) ~ 0.9987.
        let eps = 0.05;
        let watched = spheres_for(3, eps);
        let path = synthetic_path(
            &[
                p(&[1.0, 0.0, 0.0]),
                p(&[2.5, 0.0, 0.0]),
                p(&[0.96, 0.097, 0.0]),
                p(&[2.4, 0.2425, 0.0]),
            ],
            watched,
        );
        let mut state = run_cascade(&[path], eps).unwrap();
        assert_eq!(state.l_final, None, "{:?}", state.levels);
        let last = state.levels.last().unwrap();
        assert!(last.new_starts.is_empty());
        let (tau, _) = compute_tau(&mut state);
        // Two well-separated starts on the unit sphere trigger nothing:
        // d(P2, P1) > eps and the hull line stays far from the origin.
        assert_eq!(tau, None);
        let rep = verify_cascade_lemmas(&state, false, false);
        assert!(rep.violations.is_empty(), "{:?}", rep.violations);
    }

    #[test]
    fn tau_fires_on_nearby_second_start() {
        // Two motions starting within eps of each other: the second point in
        // the walk lies within eps of the hull of the first.
        let eps = 0.01;
        let watched = spheres_for(3, eps);
        let p1 = p(&[1.0, 0.0, 0.0]);
        let mut p2 = p(&[1.0, 0.005, 0.0]);
        let n = p2.norm();
        for i in 0..3 {
            p2.0[i] /= n;
        }
        let paths = vec![
            synthetic_path(&[p1.clone(), p(&[2.5, 0.0, 0.0])], watched.clone()),
            synthetic_path(&[p2.clone(), p(&[2.5, 0.013, 0.0])], watched),
        ];
        let mut state = run_cascade(&paths, eps).unwrap();
        let (tau, trigger) = compute_tau(&mut state);
        assert_eq!(tau, Some(2));
        let t = trigger.unwrap();
        assert!(t.near_prev_hull);
        assert_eq!(t.at, (0, 1, 0));
    }

    #[test]
    fn tau_fires_on_count_at_d_plus_one_starts() {
        // K = d+1 = 4 well-separated starts: the counting condition fires at
        // the fourth point, and the run stops at level 0.
        let eps = 0.001;
        let watched = spheres_for(3, eps);
        let starts = [
            p(&[1.0, 0.0, 0.0]),
            p(&[0.0, 1.0, 0.0]),
            p(&[0.0, 0.0, 1.0]),
            p(&[-1.0, 0.0, 0.0]),
        ];
        let paths: Vec<PathSample> = starts
            .iter()
            .map(|s| {
                let away = s.scaled(2.5);
                synthetic_path(&[s.clone(), away], watched.clone())
            })
            .collect();
        let mut state = run_cascade(&paths, eps).unwrap();
        assert_eq!(state.l_final, Some(0));
        let (tau, trigger) = compute_tau(&mut state);
        assert_eq!(tau, Some(4));
        let t = trigger.unwrap();
        assert!(t.count_reached);
        assert!(!t.near_prev_hull);
        let rep = verify_cascade_lemmas(&state, false, false);
        assert!(rep.violations.is_empty(), "{:?}", rep.violations);
    }

    #[test]
    fn synthetic_equal_counts_without_loop_marker_is_a_violation() {
        let eps = 0.05;
        let mk_level = |n_bar: usize| LevelRecord {
            range: Some(0.5),
            new_starts: Vec::new(),
            n_bar,
            d_l: 0.9,
            hull_dim: 1,
        };
        let state = CascadeState {
            eps,
            gamma: cascade_gamma(eps),
            dyadic: dyadic_ranges(eps).unwrap(),
            dim: 3,
            k_motions: 2,
            levels: vec![mk_level(2), mk_level(2)],
            l_final: Some(1),
            tau: Some(Some(2)),
            tau_trigger: None,
            borderline: false,
        };
        let rep = verify_cascade_lemmas(&state, false, false);
        assert!(!rep.violations.is_empty());
        // The same counts with the loop marker are consistent.
        let mut looped = state.clone();
        looped.l_final = None;
        looped.tau = Some(None);
        let rep = verify_cascade_lemmas(&looped, false, false);
        assert!(
            rep.violations
                .iter()
                .all(|v| !v.contains("not marked as looping")),
            "{:?}",
            rep.violations
        );
    }

    #[test]
    fn mc_runs_satisfy_lemma_implications() {
        // Real Brownian trials: L finite => counts strictly increase and
        // L <= d; L <= d => tau <= d+1; lexicographic walk covers every
        // recorded start exactly once.  eps = 0.01 keeps 2*gamma*eps ~ 0.44
        // below typical hull distances so the cascade actually recurses.
        let eps = 0.01;
        let dim = 3;
        for trial in 0..60 {
            let mut rng = trial_rng(303, trial);
            let k = 1 + (trial % 3) as usize;
            let paths: Vec<PathSample> = (0..k)
                .map(|_| {
                    let start = uniform_sphere_point(&mut rng, &Point::zeros(dim), 1.0);
                    simulate_cascade_path(&mut rng, dim, eps, &start)
                })
                .collect();
            let mut state = run_cascade(&paths, eps).unwrap();
            compute_tau(&mut state);
            let rep = verify_cascade_lemmas(&state, false, false);
            assert!(
                rep.borderline || rep.violations.is_empty(),
                "trial {trial}: {:?}",
                rep.violations
            );
            let total: usize = state.levels.iter().map(|l| l.new_starts.len()).sum();
            if let Some(big_l) = state.l_final {
                // The walk enumerates as many points as the cumulative count
                // at the last level (the lexicographic bijection).
                assert_eq!(total, state.levels[big_l].n_bar, "trial {trial}");
            }
            let record = cascade_record(&state, 303, trial);
            assert!(record.starts_with("cascade seed=303"));
        }
    }

    #[test]
    fn record_round_trip_fields() {
        let eps = 0.3;
        let watched = spheres_for(3, eps);
        let path = synthetic_path(&[p(&[1.0, 0.0, 0.0]), p(&[2.5, 0.0, 0.0])], watched);
        let mut state = run_cascade(&[path], eps).unwrap();
        compute_tau(&mut state);
        let rec = cascade_record(&state, 42, 7);
        assert!(rec.contains("seed=42"));
        assert!(rec.contains("trial=7"));
        assert!(rec.contains("L=0"));
        assert!(rec.contains("levels=0:r=-,new=1,nbar=1"));
    }
}

//! Local sampling of the Brownian-interlacement point process: ball
//! capacities, the Poisson cloud of trajectories sourced from a large sphere
//! (the "sourced" recipe), the exact decomposition of a trajectory hitting a
//! ball into an entrance/exit pair, two conditioned escape legs and a bridge
//! (the "decomposed" recipe), vacancy queries for probe balls, the count of
//! vacant components crossing an annulus, and the scaling map on (intensity,
//! sausage radius).

use crate::brownian::{
    extend_path_segment, resolve_return, sample_bridge, sample_bridge_duration,
    simulate_conditioned_escape, snap_to_sphere, DtPolicy, PathSample, StopReason, StopSpec,
    WatchedSphere,
};
use crate::geometry::{uniform_sphere_point, uniform_unit_orthogonal};
use crate::point::{self, Point};
use crate::union_find::UnionFind;
use crate::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use statrs::function::gamma::gamma;
use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

/// Sausage radius used throughout the local samplers.
pub const SAUSAGE_RADIUS: f64 = 1.0;

// ---------------------------------------------------------------------------
// Capacity and scaling
// ---------------------------------------------------------------------------

/// Wiener capacity of the ball B(0, s) in dimension d >= 3:
/// 2 pi^{d/2} / Gamma((d-2)/2) * s^{d-2}.
pub fn capacity_ball(d: usize, s: f64) -> Result<f64> {
    if d < 3 {
        return Err(Error::InvalidInput(format!(
            "capacity_ball needs d >= 3, got {d}"
        )));
    }
    if !(s > 0.0) {
        return Err(Error::InvalidInput("capacity_ball needs s > 0".into()));
    }
    let df = d as f64;
    Ok(2.0 * std::f64::consts::PI.powf(df / 2.0) / gamma((df - 2.0) / 2.0)
        * s.powi(d as i32 - 2))
}

/// The scaling map on the vacant-set law: scaling space by lambda turns the
/// vacant set at (alpha, r) into the one at (lambda^{2-d} alpha, lambda r).
pub fn rescale_vacant_law(d: usize, alpha: f64, r: f64, lambda: f64) -> Result<(f64, f64)> {
    if d < 3 || !(alpha > 0.0 && r > 0.0 && lambda > 0.0) {
        return Err(Error::InvalidInput(
            "rescale_vacant_law needs d >= 3 and positive alpha, r, lambda".into(),
        ));
    }
    Ok((lambda.powi(2 - d as i32) * alpha, lambda * r))
}

// ---------------------------------------------------------------------------
// Entrance/exit pair on a sphere
// ---------------------------------------------------------------------------

/// CDF of the angle between the entrance and exit points of a trajectory on
/// the sphere it hits: density proportional to
/// sin^{d-2}(theta) * ||x - x'||^{2-d} with ||x - x'|| = 2K sin(theta/2),
/// which is independent of K.  In d = 3 this reduces to sin(theta/2).
pub fn pair_angle_cdf(d: usize, theta: f64) -> f64 {
    if theta <= 0.0 {
        return 0.0;
    }
    if theta >= std::f64::consts::PI {
        return 1.0;
    }
    if d == 3 {
        return (theta / 2.0).sin();
    }
    let table = cached_pair_angle_table(d);
    table.cdf(theta)
}

fn pair_angle_density(d: usize, theta: f64) -> f64 {
    // sin^{d-2} theta * sin^{2-d}(theta/2) = (2 cos(theta/2))^{d-2} by the
    // double-angle identity; the right-hand form is regular at theta = 0.
    (2.0 * (theta / 2.0).cos()).powi(d as i32 - 2)
}

struct PairAngleTable {
    thetas: Vec<f64>,
    cdf: Vec<f64>,
}

const PAIR_TABLE_N: usize = 8192;

impl PairAngleTable {
    fn new(d: usize) -> PairAngleTable {
        let n = PAIR_TABLE_N;
        let h = std::f64::consts::PI / n as f64;
        let mut thetas = Vec::with_capacity(n + 1);
        let mut cdf = Vec::with_capacity(n + 1);
        thetas.push(0.0);
        cdf.push(0.0);
        let mut acc = 0.0;
        for i in 0..n {
            let a = i as f64 * h;
            let b = a + h;
            let m = 0.5 * (a + b);
            // Simpson on each cell.
            acc += h / 6.0
                * (pair_angle_density(d, a)
                    + 4.0 * pair_angle_density(d, m)
                    + pair_angle_density(d, b));
            thetas.push(b);
            cdf.push(acc);
        }
        let total = acc;
        for v in &mut cdf {
            *v /= total;
        }
        PairAngleTable { thetas, cdf }
    }

    fn cdf(&self, theta: f64) -> f64 {
        let i = self.thetas.partition_point(|&t| t < theta);
        if i == 0 {
            return 0.0;
        }
        if i >= self.thetas.len() {
            return 1.0;
        }
        let (t0, t1) = (self.thetas[i - 1], self.thetas[i]);
        let (c0, c1) = (self.cdf[i - 1], self.cdf[i]);
        c0 + (c1 - c0) * (theta - t0) / (t1 - t0)
    }

    fn inverse(&self, u: f64) -> f64 {
        let i = self.cdf.partition_point(|&c| c < u);
        if i == 0 {
            return 0.0;
        }
        if i >= self.cdf.len() {
            return std::f64::consts::PI;
        }
        let (c0, c1) = (self.cdf[i - 1], self.cdf[i]);
        let (t0, t1) = (self.thetas[i - 1], self.thetas[i]);
        if c1 <= c0 {
            return t1;
        }
        t0 + (t1 - t0) * (u - c0) / (c1 - c0)
    }
}

thread_local! {
    static PAIR_TABLES: RefCell<HashMap<usize, Rc<PairAngleTable>>> =
        RefCell::new(HashMap::new());
}

fn cached_pair_angle_table(d: usize) -> Rc<PairAngleTable> {
    PAIR_TABLES.with(|cell| {
        Rc::clone(
            cell.borrow_mut()
                .entry(d)
                .or_insert_with(|| Rc::new(PairAngleTable::new(d))),
        )
    })
}

/// Sample the angle between entrance and exit points.  Exact inverse-CDF
/// theta = 2 asin(U) in d = 3; tabulated numerical inverse otherwise.
pub fn sample_pair_angle<R: Rng + ?Sized>(rng: &mut R, d: usize) -> f64 {
    let u: f64 = rng.random();
    if d == 3 {
        return 2.0 * u.asin();
    }
    cached_pair_angle_table(d).inverse(u)
}

/// Entrance/exit pair (X, X') on the sphere of radius K: X uniform by
/// symmetry, X' at the sampled angle from X in a uniform orthogonal
/// direction.  The joint density against the product of uniform surface
/// measures is proportional to the Green function G(X, X').
pub fn sample_entrance_exit_pair<R: Rng + ?Sized>(
    rng: &mut R,
    d: usize,
    big_k: f64,
) -> Result<(Point, Point)> {
    if d < 3 || !(big_k > 0.0) {
        return Err(Error::InvalidInput(
            "entrance/exit pair needs d >= 3 and K > 0".into(),
        ));
    }
    let x = uniform_sphere_point(rng, &Point::zeros(d), big_k);
    let theta = sample_pair_angle(rng, d);
    let axis = x.normalized().expect("points on a sphere are nonzero");
    let u = uniform_unit_orthogonal(rng, &axis);
    let mut x_prime = Point::zeros(d);
    let (c, s) = (theta.cos(), theta.sin());
    for i in 0..d {
        x_prime.0[i] = big_k * (c * axis[i] + s * u[i]);
    }
    Ok((x, x_prime))
}

// ---------------------------------------------------------------------------
// Trajectory samples
// ---------------------------------------------------------------------------

/// A trajectory hitting B(0, K), decomposed at its first entrance X and last
/// visit X' of the sphere: a backward leg and a forward leg conditioned to
/// never re-enter B(K), and a bridge from X to X' carrying all the visits.
#[derive(Clone, Debug)]
pub struct TrajectorySample {
    pub entrance: Point,
    pub exit: Point,
    pub leg_backward: PathSample,
    pub leg_forward: PathSample,
    pub leg_bridge: PathSample,
    /// uniform label on [0, alpha]
    pub label: f64,
}

/// One trajectory of a local sample, in either sampling mode.
#[derive(Clone, Debug)]
pub enum Trajectory {
    /// sourced from the big sphere and simulated with exact return resolution
    Sourced(PathSample),
    /// decomposed at the hitting sphere
    Decomposed(TrajectorySample),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplingMode {
    /// N ~ Poisson(alpha cap(B(R'))) motions from uniform points on the
    /// sphere of radius R'
    IntroRecipe,
    /// N ~ Poisson(alpha cap(B(K))) decomposed trajectories hitting B(K),
    /// K = r_prime
    QbExact,
}

/// Parameters of a local sample.
#[derive(Clone, Debug)]
pub struct InterlacementConfig {
    pub dim: usize,
    pub alpha: f64,
    /// observation radius R: geometry is recorded within B(R + 1)
    pub big_r: f64,
    /// sourcing radius R' (sourced mode, must be >= R + 1) or hitting radius
    /// K (decomposed mode)
    pub r_prime: f64,
    /// extra origin-centered spheres to watch, e.g. probe entry radii; their
    /// crossings make vacancy queries exact
    pub watch_radii: Vec<f64>,
    /// spatial step bounds of the simulation
    pub step_max: f64,
    pub step_min: f64,
}

/// The restriction of an interlacement cloud to a bounded window.
#[derive(Debug)]
pub struct InterlacementLocalSample {
    pub alpha: f64,
    pub big_r: f64,
    pub r_prime: f64,
    pub mode: SamplingMode,
    pub trajectories: Vec<Trajectory>,
}

/// Draw one local sample.  The trajectory count is Poisson with mean
/// alpha * cap(B(R')) (sourced) or alpha * cap(B(K)) (decomposed); each
/// sourced motion is simulated with exact excursion-level return resolution
/// at the sphere R + 1, so every visit to B(R + 1) is captured.
pub fn sample_local_interlacements<R: Rng + ?Sized>(
    rng: &mut R,
    cfg: &InterlacementConfig,
    mode: SamplingMode,
) -> Result<InterlacementLocalSample> {
    let d = cfg.dim;
    if d < 3 {
        return Err(Error::InvalidInput("interlacements need d >= 3".into()));
    }
    if cfg.alpha < 0.0 {
        return Err(Error::InvalidInput("alpha must be >= 0".into()));
    }
    let n = if cfg.alpha == 0.0 {
        0
    } else {
        let mean = cfg.alpha * capacity_ball(d, cfg.r_prime)?;
        Poisson::new(mean)
            .map_err(|e| Error::InvalidInput(format!("Poisson mean invalid: {e}")))?
            .sample(rng) as usize
    };
    let mut trajectories = Vec::with_capacity(n);
    for _ in 0..n {
        let t = match mode {
            SamplingMode::IntroRecipe => Trajectory::Sourced(sample_sourced_path(rng, cfg)?),
            SamplingMode::QbExact => {
                Trajectory::Decomposed(sample_qb_trajectory(rng, cfg.r_prime, cfg.alpha, cfg)?)
            }
        };
        trajectories.push(t);
    }
    Ok(InterlacementLocalSample {
        alpha: cfg.alpha,
        big_r: cfg.big_r,
        r_prime: cfg.r_prime,
        mode,
        trajectories,
    })
}

/// One sourced motion: uniform start on the sphere R', simulated between the
/// capture sphere rho = R + 1 and the outer sphere 2 max(R', rho), with every
/// excursion to infinity resolved by an exact Bernoulli return draw.  Clocks
/// advance by a nominal unit across skipped legs.
fn sample_sourced_path<R: Rng + ?Sized>(
    rng: &mut R,
    cfg: &InterlacementConfig,
) -> Result<PathSample> {
    let d = cfg.dim;
    let rho = cfg.big_r + SAUSAGE_RADIUS;
    if cfg.r_prime < rho * (1.0 - 1e-12) {
        return Err(Error::InvalidInput(format!(
            "sourcing radius {} below R + 1 = {rho}",
            cfg.r_prime
        )));
    }
    let r_out = 2.0 * cfg.r_prime.max(rho);
    let mut watched = vec![
        WatchedSphere::origin(d, rho),
        WatchedSphere::origin(d, r_out),
    ];
    for &w in &cfg.watch_radii {
        watched.push(WatchedSphere::origin(d, w));
    }
    let policy = DtPolicy::from_spatial(cfg.step_max, cfg.step_min, d);
    let stop = StopSpec::new().exit_sphere(1);

    let start = uniform_sphere_point(rng, &Point::zeros(d), cfg.r_prime);
    let mut path = PathSample::new(d);
    path.watched = watched;
    path.push(0.0, start.as_slice());

    // If sourced strictly outside the capture sphere, resolve the approach
    // exactly: either the motion never visits B(rho) (keep the bare start) or
    // it re-enters at a Poisson-kernel point.
    let mut cursor = start.clone();
    if cursor.norm() > rho * (1.0 + 1e-12) {
        match resolve_return(rng, &cursor, rho)? {
            None => return Ok(path),
            Some(entry) => {
                path.push(1.0, entry.as_slice());
                cursor = entry;
            }
        }
    }
    let _ = cursor;
    loop {
        match extend_path_segment(rng, &mut path, &policy, &stop)? {
            StopReason::Exit(_) => {
                let exit = snap_to_sphere(&Point::from_slice(path.last_position()), r_out);
                match resolve_return(rng, &exit, rho)? {
                    None => return Ok(path),
                    Some(entry) => {
                        path.push(path.last_time() + 1.0, entry.as_slice());
                    }
                }
            }
            StopReason::Hit(_) => unreachable!("no hit spheres in the stop rule"),
            StopReason::TimedOut => {
                return Err(Error::InsufficientData(
                    "sourced motion exhausted the step budget".into(),
                ))
            }
        }
    }
}

/// One decomposed trajectory hitting B(0, K): entrance/exit pair, two legs
/// conditioned never to re-enter B(K), and a bridge from X to X' whose law
/// carries no ball constraint.  The bridge watches the config's probe
/// spheres, so its steps refine near them and crossings are annotated.
pub fn sample_qb_trajectory<R: Rng + ?Sized>(
    rng: &mut R,
    big_k: f64,
    alpha: f64,
    cfg: &InterlacementConfig,
) -> Result<TrajectorySample> {
    let d = cfg.dim;
    let (entrance, exit) = sample_entrance_exit_pair(rng, d, big_k)?;
    let leg_policy = DtPolicy::from_spatial(
        (0.05 * big_k).max(cfg.step_min * 2.0),
        cfg.step_min,
        d,
    );
    let leg_backward = simulate_conditioned_escape(rng, &entrance, big_k, &leg_policy, 2.0 * big_k)?;
    let leg_forward = simulate_conditioned_escape(rng, &exit, big_k, &leg_policy, 2.0 * big_k)?;
    // Only the probe spheres are watched: the bridge starts and ends on the
    // hitting sphere and re-crosses it freely, so refining steps there would
    // burn the whole budget on crossings no query ever reads.
    let watched: Vec<WatchedSphere> = cfg
        .watch_radii
        .iter()
        .map(|&w| WatchedSphere::origin(d, w))
        .collect();
    let t = sample_bridge_duration(rng, &entrance, &exit)?;
    // Far from every watched sphere the bridge transition is exact for any
    // step, so the base step is left essentially uncapped and the quadratic
    // shrink provides the resolution near the probes.
    let bridge_policy = DtPolicy {
        base_dt: (big_k * big_k).max(1.0) * 16.0,
        min_dt: cfg.step_min * cfg.step_min / d as f64,
        shrink: 5.0,
    };
    let leg_bridge = sample_bridge(rng, &entrance, &exit, t, &bridge_policy, &watched)?;
    Ok(TrajectorySample {
        entrance,
        exit,
        leg_backward,
        leg_forward,
        leg_bridge,
        label: alpha * rng.random::<f64>(),
    })
}

// ---------------------------------------------------------------------------
// Vacancy queries
// ---------------------------------------------------------------------------

/// Whether no trajectory of the sample enters B(0, entry_radius).  The probe
/// ball B(0, s) is vacant in the 1-sausage cloud iff this holds with
/// entry_radius = s + 1.  The radius must be watched (listed in the config's
/// watch_radii) so the decision uses annotated crossings, exact at excursion
/// level, rather than raw sample scans.
pub fn probe_vacant_entry(sample: &InterlacementLocalSample, entry_radius: f64) -> Result<bool> {
    for t in &sample.trajectories {
        match t {
            Trajectory::Sourced(path) => {
                if path_enters(path, entry_radius)? {
                    return Ok(false);
                }
            }
            Trajectory::Decomposed(ts) => {
                // Conditioned legs stay outside B(K) and K >= entry_radius in
                // any valid configuration; the bridge carries the visits.
                if path_enters(&ts.leg_bridge, entry_radius)? {
                    return Ok(false);
                }
            }
        }
    }
    Ok(true)
}

fn path_enters(path: &PathSample, radius: f64) -> Result<bool> {
    let idx = path.sphere_index(radius).ok_or_else(|| {
        Error::InvalidInput(format!("entry radius {radius} is not watched"))
    })?;
    if !path.is_empty() && point::norm(path.position(0)) < radius {
        return Ok(true);
    }
    Ok(path.crossings.iter().any(|c| c.sphere == idx && c.inward))
}

/// Sausage centers of the sample within B(0, cut), flattened, decimated so
/// that consecutive recorded centers are at least `decimate` apart (0 keeps
/// every sample).  Interpolated crossing points are always kept.
pub fn sausage_centers(sample: &InterlacementLocalSample, cut: f64, decimate: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut push_path = |path: &PathSample| {
        let d = path.dim;
        let cut_sq = cut * cut;
        let mut last: Option<Vec<f64>> = None;
        for i in 0..path.len() {
            let p = path.position(i);
            if point::norm_sq(p) > cut_sq {
                last = None;
                continue;
            }
            if let Some(prev) = &last {
                if point::dist_sq(prev, p) < decimate * decimate {
                    continue;
                }
            }
            out.extend_from_slice(p);
            last = Some(p.to_vec());
        }
        for c in &path.crossings {
            if c.point.norm_sq() <= cut_sq {
                out.extend_from_slice(c.point.as_slice());
            }
        }
        debug_assert_eq!(out.len() % d, 0);
    };
    for t in &sample.trajectories {
        match t {
            Trajectory::Sourced(path) => push_path(path),
            Trajectory::Decomposed(ts) => {
                push_path(&ts.leg_bridge);
                push_path(&ts.leg_backward);
                push_path(&ts.leg_forward);
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Annulus component statistic
// ---------------------------------------------------------------------------

/// Number of connected components of the vacant set within the annulus
/// r < |x| < R that touch both boundary spheres, counted on a grid of the
/// given spacing.  A component touches a sphere when it owns a vacant cell
/// whose center is within `grid_spacing` of it.
pub fn vacant_components_annulus(
    sample: &InterlacementLocalSample,
    r: f64,
    big_r: f64,
    grid_spacing: f64,
) -> Result<usize> {
    if !(big_r > r && r > 0.0 && grid_spacing > 0.0) {
        return Err(Error::InvalidInput(
            "annulus count needs 0 < r < R and positive grid spacing".into(),
        ));
    }
    if sample.big_r < big_r * (1.0 - 1e-12) {
        return Err(Error::InvalidInput(format!(
            "sample observes B({}) but the annulus extends to {big_r}",
            sample.big_r
        )));
    }
    let d = match sample.trajectories.first() {
        Some(Trajectory::Sourced(p)) => p.dim,
        Some(Trajectory::Decomposed(t)) => t.leg_bridge.dim,
        None => 3,
    };
    let centers = sausage_centers(sample, big_r + SAUSAGE_RADIUS, grid_spacing / 2.0);
    Ok(grid_count_annulus_components(
        &centers,
        d,
        SAUSAGE_RADIUS,
        r,
        big_r,
        grid_spacing,
    ))
}

/// Core annulus counting on a flattened center buffer: stamp per-cell minimum
/// center distances, classify cells of the annulus by vacancy of their
/// centers, merge face neighbors, and count components owning vacant cells
/// within one spacing of both spheres.
pub fn grid_count_annulus_components(
    centers_flat: &[f64],
    d: usize,
    radius: f64,
    r: f64,
    big_r: f64,
    gs: f64,
) -> usize {
    let half = (big_r / gs).ceil() as i64;
    let side = (2 * half + 1) as usize;
    let n_cells = side.pow(d as u32);
    let mut min_dist_sq = vec![f64::INFINITY; n_cells];

    let reach = radius + gs;
    let n_centers = centers_flat.len() / d;
    let mut lo = vec![0i64; d];
    let mut hi = vec![0i64; d];
    let mut cursor = vec![0i64; d];
    for ci in 0..n_centers {
        let c = &centers_flat[ci * d..(ci + 1) * d];
        let mut empty = false;
        for i in 0..d {
            let rel = c[i] / gs;
            lo[i] = ((rel - reach / gs).floor() as i64).max(-half);
            hi[i] = ((rel + reach / gs).ceil() as i64).min(half);
            if lo[i] > hi[i] {
                empty = true;
            }
        }
        if empty {
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
                let t = cursor[i] as f64 * gs - c[i];
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

    // Classify annulus cells.
    let norm_of = |k: usize| -> f64 {
        let mut acc = 0.0;
        let mut kk = k;
        for _ in 0..d {
            let idx = (kk % side) as i64 - half;
            kk /= side;
            let x = idx as f64 * gs;
            acc += x * x;
        }
        acc.sqrt()
    };
    let mut vacant = vec![false; n_cells];
    let mut near_inner = vec![false; n_cells];
    let mut near_outer = vec![false; n_cells];
    for k in 0..n_cells {
        let nm = norm_of(k);
        if nm <= r || nm >= big_r {
            continue;
        }
        if min_dist_sq[k] > radius * radius {
            vacant[k] = true;
            near_inner[k] = nm - r <= gs;
            near_outer[k] = big_r - nm <= gs;
        }
    }

    let mut uf = UnionFind::new(n_cells);
    let mut stride = 1usize;
    for _i in 0..d {
        for k in 0..n_cells {
            if vacant[k] {
                let neighbor = k + stride;
                if (k / stride) % side + 1 < side && neighbor < n_cells && vacant[neighbor] {
                    uf.union(k as u32, neighbor as u32);
                }
            }
        }
        stride *= side;
    }
    // Components that touch both spheres.
    let mut touch: HashMap<u32, (bool, bool)> = HashMap::new();
    for k in 0..n_cells {
        if vacant[k] && (near_inner[k] || near_outer[k]) {
            let root = uf.find(k as u32);
            let e = touch.entry(root).or_insert((false, false));
            e.0 |= near_inner[k];
            e.1 |= near_outer[k];
        }
    }
    touch.values().filter(|(a, b)| *a && *b).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::trial_rng;
    use crate::stats::{chi_square_two_sample_pvalue, ks_statistic, mean_stderr};
    use std::f64::consts::PI;

    #[test]
    fn capacity_closed_forms() {
        assert!((capacity_ball(3, 1.0).unwrap() - 2.0 * PI).abs() < 1e-12);
        assert!((capacity_ball(3, 2.0).unwrap() - 4.0 * PI).abs() < 1e-12);
        assert!((capacity_ball(5, 1.0).unwrap() - 4.0 * PI * PI).abs() < 1e-9);
        assert!(capacity_ball(2, 1.0).is_err());
    }

    #[test]
    fn rescaling_map_values_and_capacity_consistency() {
        assert_eq!(rescale_vacant_law(3, 1.0, 1.0, 1.0).unwrap(), (1.0, 1.0));
        assert_eq!(rescale_vacant_law(3, 1.0, 1.0, 2.0).unwrap(), (0.5, 2.0));
        // Probe-ball vacancy is invariant under the map through the
        // exponential formula: alpha' * cap(B(lambda(s + r))) =
        // alpha * cap(B(s + r)).
        for (d, lambda, alpha, s, r) in
            [(3usize, 2.0, 0.7, 0.5, 1.0), (4, 3.0, 0.2, 1.2, 1.0), (5, 1.7, 1.1, 0.3, 2.0)]
        {
            let (a2, r2) = rescale_vacant_law(d, alpha, r, lambda).unwrap();
            let lhs = alpha * capacity_ball(d, s + r).unwrap();
            let rhs = a2 * capacity_ball(d, lambda * s + r2).unwrap();
            assert!((lhs - rhs).abs() < 1e-9 * lhs, "d={d} lambda={lambda}");
        }
    }

    #[test]
    fn pair_angle_law_d3_median_and_ks() {
        let mut rng = trial_rng(401, 0);
        let n = 1_000_000usize;
        let mut thetas: Vec<f64> = (0..n).map(|_| sample_pair_angle(&mut rng, 3)).collect();
        thetas.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = thetas[n / 2];
        assert!(
            (median - PI / 3.0).abs() < 0.01 * (PI / 3.0),
            "median {median}"
        );
        let ks = ks_statistic(&mut thetas, |t| (t / 2.0).sin());
        assert!(ks < 0.002, "KS = {ks}");
    }

    #[test]
    fn pair_angle_table_matches_exact_form_in_d3_shape() {
        // The tabulated route must agree with the closed form; build the
        // table for d = 3 directly and compare CDFs.
        let table = PairAngleTable::new(3);
        for i in 1..40 {
            let t = PI * i as f64 / 40.0;
            assert!(
                (table.cdf(t) - (t / 2.0).sin()).abs() < 1e-6,
                "theta = {t}"
            );
        }
        // d = 4 table: CDF is monotone, endpoints pinned.
        let t4 = PairAngleTable::new(4);
        assert!(t4.cdf(1e-9) < 1e-6 && (t4.cdf(PI) - 1.0).abs() < 1e-12);
        let u = 0.37;
        let inv = t4.inverse(u);
        assert!((t4.cdf(inv) - u).abs() < 1e-6);
    }

    #[test]
    fn pair_marginal_is_isotropic() {
        let mut rng = trial_rng(403, 0);
        let n = 200_000;
        let mut sums = [0.0f64; 3];
        for _ in 0..n {
            let (x, _) = sample_entrance_exit_pair(&mut rng, 3, 2.0).unwrap();
            for i in 0..3 {
                sums[i] += x[i];
            }
        }
        // Component means of a uniform point on the sphere of radius 2 are 0
        // with per-sample variance 4/3.
        let se = (4.0 / 3.0f64 / n as f64).sqrt();
        for s in sums {
            assert!((s / n as f64).abs() < 4.0 * se, "mean {}", s / n as f64);
        }
    }

    fn test_config(watch: Vec<f64>) -> InterlacementConfig {
        InterlacementConfig {
            dim: 3,
            alpha: 0.2,
            big_r: 2.0,
            r_prime: 3.0,
            watch_radii: watch,
            step_max: 0.25,
            step_min: 1e-3,
        }
    }

    #[test]
    fn alpha_zero_gives_empty_sample() {
        let mut rng = trial_rng(405, 0);
        let mut cfg = test_config(vec![]);
        cfg.alpha = 0.0;
        let s = sample_local_interlacements(&mut rng, &cfg, SamplingMode::IntroRecipe).unwrap();
        assert!(s.trajectories.is_empty());
    }

    #[test]
    fn trajectory_count_mean_matches_capacity() {
        // d=3, alpha=1, R'=1: mean count = cap(B(1)) = 2 pi.
        let mut cfg = test_config(vec![]);
        cfg.alpha = 1.0;
        cfg.big_r = 0.0;
        cfg.r_prime = 1.0;
        cfg.step_max = 0.2;
        let n = 10_000usize;
        let mut counts = Vec::with_capacity(n);
        for trial in 0..n {
            let mut rng = trial_rng(407, trial as u64);
            let s =
                sample_local_interlacements(&mut rng, &cfg, SamplingMode::IntroRecipe).unwrap();
            counts.push(s.trajectories.len() as f64);
        }
        let (mean, se) = mean_stderr(&counts);
        assert!(
            (mean - 2.0 * PI).abs() < 3.0 * se,
            "mean {mean} vs {}",
            2.0 * PI
        );
        // Poisson dispersion: Var/mean near 1.
        let var = counts.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>()
            / (counts.len() - 1) as f64;
        let dispersion = var / mean;
        // stderr of the dispersion index for Poisson is ~ sqrt(2/n).
        let disp_se = (2.0 / n as f64).sqrt();
        assert!(
            (dispersion - 1.0).abs() < 3.0 * disp_se,
            "dispersion {dispersion}"
        );
    }

    #[test]
    fn qb_trajectory_contracts() {
        let mut rng = trial_rng(409, 0);
        let cfg = test_config(vec![1.5]);
        let big_k = 3.0;
        let mut chords_sampled = Vec::new();
        let mut chords_law = Vec::new();
        for _ in 0..400 {
            let ts = sample_qb_trajectory(&mut rng, big_k, cfg.alpha, &cfg).unwrap();
            assert!((ts.entrance.norm() - big_k).abs() < 1e-9);
            assert!((ts.exit.norm() - big_k).abs() < 1e-9);
            // Legs never re-enter B(K).
            for leg in [&ts.leg_backward, &ts.leg_forward] {
                for i in 0..leg.len() {
                    assert!(point::norm(leg.position(i)) >= big_k * (1.0 - 1e-12));
                }
            }
            // Bridge endpoints are bit-exact.
            assert_eq!(ts.leg_bridge.position(0), ts.entrance.as_slice());
            assert_eq!(ts.leg_bridge.last_position(), ts.exit.as_slice());
            assert!(ts.label >= 0.0 && ts.label <= cfg.alpha);
            chords_sampled.push(ts.entrance.dist(&ts.exit));
            chords_law.push(2.0 * big_k * (sample_pair_angle(&mut rng, 3) / 2.0).sin());
        }
        let p = chi_square_two_sample_pvalue(&chords_sampled, &chords_law, 5.0);
        assert!(p > 0.001, "chord two-sample p = {p}");
    }

    #[test]
    fn probe_vacancy_matches_capacity_exponential() {
        // P[B(0,s) vacant] = exp(-alpha cap(B(s+1))) for the 1-sausage cloud.
        let probes = [0.25f64, 0.5];
        let watch: Vec<f64> = probes.iter().map(|p| p + 1.0).collect();
        let cfg = test_config(watch);
        let n = 1_500usize;
        let mut hits = [0usize; 2];
        for trial in 0..n {
            let mut rng = trial_rng(411, trial as u64);
            let s =
                sample_local_interlacements(&mut rng, &cfg, SamplingMode::IntroRecipe).unwrap();
            for (j, probe) in probes.iter().enumerate() {
                if probe_vacant_entry(&s, probe + 1.0).unwrap() {
                    hits[j] += 1;
                }
            }
        }
        for (j, probe) in probes.iter().enumerate() {
            let p_hat = hits[j] as f64 / n as f64;
            let expected = (-cfg.alpha * capacity_ball(3, probe + 1.0).unwrap()).exp();
            let se = crate::stats::binomial_stderr(expected, n as u64);
            assert!(
                (p_hat - expected).abs() < 3.5 * se,
                "probe {probe}: {p_hat} vs {expected}"
            );
        }
    }

    #[test]
    fn sampling_modes_agree_on_probe_vacancy() {
        // Decomposed trajectories hitting B(3) must reproduce the same
        // central-probe vacancy probability as sourced motions.
        let probe = 0.5f64;
        let cfg = test_config(vec![probe + 1.0]);
        let n = 700usize;
        let expected = (-cfg.alpha * capacity_ball(3, probe + 1.0).unwrap()).exp();
        for (seed, mode) in [(413u64, SamplingMode::IntroRecipe), (415, SamplingMode::QbExact)] {
            let mut hits = 0usize;
            for trial in 0..n {
                let mut rng = trial_rng(seed, trial as u64);
                let s = sample_local_interlacements(&mut rng, &cfg, mode).unwrap();
                if probe_vacant_entry(&s, probe + 1.0).unwrap() {
                    hits += 1;
                }
            }
            let p_hat = hits as f64 / n as f64;
            let se = crate::stats::binomial_stderr(expected, n as u64);
            assert!(
                (p_hat - expected).abs() < 3.5 * se,
                "{mode:?}: {p_hat} vs {expected}"
            );
        }
    }

    #[test]
    fn annulus_count_trivial_scenes() {
        // Empty cloud: the whole annulus is a single vacant component
        // touching both spheres.
        assert_eq!(
            grid_count_annulus_components(&[], 3, 1.0, 1.0, 4.0, 0.25),
            1
        );
        // Fully covered annulus: centers on a dense grid spanning it.
        let mut centers = Vec::new();
        let step = 0.5;
        let m = (5.5 / step) as i64;
        for ix in -m..=m {
            for iy in -m..=m {
                for iz in -m..=m {
                    let x = [ix as f64 * step, iy as f64 * step, iz as f64 * step];
                    let nm = point::norm(&x);
                    if nm > 0.4 && nm < 4.6 {
                        centers.extend_from_slice(&x);
                    }
                }
            }
        }
        assert_eq!(
            grid_count_annulus_components(&centers, 3, 1.0, 1.0, 4.0, 0.25),
            0
        );
        // One blocking slab through the middle splits nothing radially (a
        // slab cannot disconnect inner from outer on both sides): carving the
        // annulus with a full plane of balls leaves 2 components touching
        // both spheres.
        let mut slab = Vec::new();
        for ix in -m..=m {
            for iy in -m..=m {
                let x = [ix as f64 * step, iy as f64 * step, 0.0];
                slab.extend_from_slice(&x);
            }
        }
        assert_eq!(
            grid_count_annulus_components(&slab, 3, 1.0, 1.0, 4.0, 0.25),
            2
        );
    }

    #[test]
    fn annulus_count_on_sampled_cloud_is_finite_and_small() {
        // Qualitative: with a sparse cloud the count is a small positive
        // integer on most draws.
        let cfg = InterlacementConfig {
            dim: 3,
            alpha: 0.05,
            big_r: 6.0,
            r_prime: 7.0,
            watch_radii: vec![],
            step_max: 0.12,
            step_min: 1e-3,
        };
        let mut total = 0usize;
        let n = 20;
        for trial in 0..n {
            let mut rng = trial_rng(417, trial as u64);
            let s =
                sample_local_interlacements(&mut rng, &cfg, SamplingMode::IntroRecipe).unwrap();
            let c = vacant_components_annulus(&s, 1.0, 6.0, 0.4).unwrap();
            assert!(c <= 10, "implausible count {c}");
            total += c;
        }
        assert!(total >= n / 2, "annulus almost always has a crossing component");
    }
}

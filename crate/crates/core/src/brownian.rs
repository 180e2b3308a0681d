//! Brownian path simulation and the exact closed forms it is checked
//! against: annulus hitting probabilities, escape probabilities, the exterior
//! Poisson kernel, the Green function, Brownian bridges with their duration
//! law, and ball-avoiding (h-transformed) paths.
//!
//! All simulation is Euler with Gaussian increments and an adaptive step that
//! shrinks quadratically near "watched" spheres; straddled spheres produce
//! interpolated crossing annotations.  Infinite-horizon questions are never
//! truncated: when a path exits a designated outer sphere, the return to an
//! inner sphere is resolved by an exact Bernoulli draw plus an exact entrance
//! point (see [`resolve_return`]).

use crate::geometry::uniform_unit_orthogonal;
use crate::point::{self, Point};
use crate::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;
use smallvec::SmallVec;
use statrs::function::gamma::{gamma, gamma_ur};
use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::rc::Rc;

// ---------------------------------------------------------------------------
// Closed forms
// ---------------------------------------------------------------------------

/// Surface area of the sphere of radius `r` in `R^d`.
pub fn sphere_surface_area(d: usize, r: f64) -> f64 {
    2.0 * PI.powf(d as f64 / 2.0) / gamma(d as f64 / 2.0) * r.powi(d as i32 - 1)
}

/// Probability that Brownian motion from `x` reaches the sphere of radius `R`
/// before the sphere of radius `r` (both centered at the origin), `r < R`.
/// `R` may be infinite, giving the escape probability.
pub fn hit_prob_annulus(x: &Point, r: f64, big_r: f64) -> Result<f64> {
    let d = x.dim();
    let rho = x.norm();
    if !(r > 0.0 && r < big_r) {
        return Err(Error::InvalidInput("annulus needs 0 < r < R".into()));
    }
    if !(rho > r && rho < big_r) {
        return Err(Error::InvalidInput(format!(
            "start norm {rho} outside the annulus ({r}, {big_r})"
        )));
    }
    let e = 2.0 - d as f64;
    let outer = if big_r.is_infinite() {
        0.0
    } else {
        big_r.powf(e)
    };
    Ok((r.powf(e) - rho.powf(e)) / (r.powf(e) - outer))
}

/// Probability that Brownian motion from `x` never hits the ball B(0, r).
pub fn escape_prob(x: &Point, r: f64) -> Result<f64> {
    let d = x.dim();
    let rho = x.norm();
    if r <= 0.0 {
        return Err(Error::InvalidInput("escape ball radius must be > 0".into()));
    }
    if rho < r {
        return Err(Error::InvalidInput(format!(
            "escape start norm {rho} inside ball radius {r}"
        )));
    }
    Ok(1.0 - (r / rho).powi(d as i32 - 2))
}

/// Exterior/interior Poisson kernel: surface density at `y` (on the sphere of
/// radius `r`) of the first hit of that sphere from `x`.  For exterior `x`
/// its total mass is the hitting probability.
pub fn poisson_kernel_density(x: &Point, r: f64, y: &Point) -> Result<f64> {
    let d = x.dim();
    if (y.norm() - r).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!(
            "kernel point norm {} off the sphere of radius {r}",
            y.norm()
        )));
    }
    let rho = x.norm();
    if (rho - r).abs() < 1e-12 {
        return Err(Error::InvalidInput(
            "kernel source must be off the sphere".into(),
        ));
    }
    let dist = x.dist(y);
    Ok(r.powi(d as i32 - 2) / sphere_surface_area(d, r) * (r * r - rho * rho).abs()
        / dist.powi(d as i32))
}

/// Green function of Brownian motion in `R^d`, d >= 3.
pub fn green_function(x: &Point, y: &Point) -> Result<f64> {
    let d = x.dim();
    let dist = x.dist(y);
    if dist < 1e-300 {
        return Err(Error::SingularInput("Green function at x = y".into()));
    }
    Ok(green_function_dist(d, dist))
}

/// Green function as a function of the distance alone.
pub fn green_function_dist(d: usize, dist: f64) -> f64 {
    gamma(d as f64 / 2.0 - 1.0) / (2.0 * PI.powf(d as f64 / 2.0)) * dist.powi(2 - d as i32)
}

/// Heat kernel p_t(x, y) as a function of squared distance.
pub fn heat_kernel(d: usize, dist_sq: f64, t: f64) -> f64 {
    (2.0 * PI * t).powf(-(d as f64) / 2.0) * (-dist_sq / (2.0 * t)).exp()
}

// ---------------------------------------------------------------------------
// Entrance-point sampling (Poisson kernel)
// ---------------------------------------------------------------------------

/// Tabulated inverse CDF on [0, pi] for a polar-angle density.
#[derive(Clone, Debug)]
struct AngleTable {
    thetas: Vec<f64>,
    cdf: Vec<f64>,
}

impl AngleTable {
    /// Build from an (unnormalized) density on [0, pi] by trapezoidal
    /// accumulation on a uniform grid.
    fn build(pdf: impl Fn(f64) -> f64, n: usize) -> AngleTable {
        let thetas: Vec<f64> = (0..=n).map(|i| PI * i as f64 / n as f64).collect();
        let vals: Vec<f64> = thetas.iter().map(|&t| pdf(t)).collect();
        let mut cdf = vec![0.0; n + 1];
        for i in 1..=n {
            cdf[i] = cdf[i - 1] + 0.5 * (vals[i - 1] + vals[i]) * (thetas[i] - thetas[i - 1]);
        }
        let total = cdf[n];
        assert!(total > 0.0 && total.is_finite(), "degenerate angle density");
        for c in cdf.iter_mut() {
            *c /= total;
        }
        AngleTable { thetas, cdf }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.inverse(rng.random::<f64>())
    }

    fn inverse(&self, u: f64) -> f64 {
        let i = self.cdf.partition_point(|&c| c < u).min(self.cdf.len() - 1);
        if i == 0 {
            return self.thetas[0];
        }
        let (c0, c1) = (self.cdf[i - 1], self.cdf[i]);
        let w = if c1 > c0 { (u - c0) / (c1 - c0) } else { 0.0 };
        self.thetas[i - 1] + w * (self.thetas[i] - self.thetas[i - 1])
    }

    fn cdf_at(&self, theta: f64) -> f64 {
        let i = self
            .thetas
            .partition_point(|&t| t < theta)
            .min(self.thetas.len() - 1);
        if i == 0 {
            return 0.0;
        }
        let (t0, t1) = (self.thetas[i - 1], self.thetas[i]);
        let w = ((theta - t0) / (t1 - t0)).clamp(0.0, 1.0);
        self.cdf[i - 1] + w * (self.cdf[i] - self.cdf[i - 1])
    }
}

/// Number of grid intervals in angle tables; with smooth densities this gives
/// interpolation error well below the 1e-6 CDF target.
const ANGLE_TABLE_N: usize = 8192;

/// Sampler of the polar angle of the Brownian entrance point on a sphere,
/// seen from an exterior source at `ratio` = (source distance)/(sphere
/// radius).  Precomputed per (d, ratio) and cached per thread.
#[derive(Clone, Debug)]
pub struct EntranceSampler {
    d: usize,
    table: AngleTable,
}

impl EntranceSampler {
    pub fn new(d: usize, ratio: f64) -> Result<EntranceSampler> {
        if !(d >= 3 && ratio > 1.0 && ratio.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "entrance sampler needs d >= 3 and ratio > 1, got d={d}, ratio={ratio}"
            )));
        }
        // Angular density of the entrance point, up to normalization:
        // sin^{d-2}(theta) from the surface element times the kernel's
        // 1/||x-y||^d falloff.
        let rho = ratio;
        let pdf = move |theta: f64| {
            let dist_sq = rho * rho + 1.0 - 2.0 * rho * theta.cos();
            theta.sin().powi(d as i32 - 2) / dist_sq.powf(d as f64 / 2.0)
        };
        Ok(EntranceSampler {
            d,
            table: AngleTable::build(pdf, ANGLE_TABLE_N),
        })
    }

    pub fn sample_angle<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.table.sample(rng)
    }

    /// CDF of the polar angle (for distribution tests).
    pub fn angle_cdf(&self, theta: f64) -> f64 {
        self.table.cdf_at(theta)
    }

    pub fn dim(&self) -> usize {
        self.d
    }
}

thread_local! {
    static ENTRANCE_CACHE: RefCell<HashMap<(usize, u64), Rc<EntranceSampler>>> =
        RefCell::new(HashMap::new());
}

/// Per-thread cached entrance sampler.  Callers should snap sources to exact
/// design radii (see [`snap_to_sphere`]) so the cache stays small.
pub fn cached_entrance_sampler(d: usize, ratio: f64) -> Result<Rc<EntranceSampler>> {
    ENTRANCE_CACHE.with(|cache| {
        let key = (d, ratio.to_bits());
        if let Some(s) = cache.borrow().get(&key) {
            return Ok(Rc::clone(s));
        }
        let s = Rc::new(EntranceSampler::new(d, ratio)?);
        cache.borrow_mut().insert(key, Rc::clone(&s));
        Ok(s)
    })
}

/// Entrance point on the sphere of radius `r` (centered at the origin) for a
/// Brownian motion from exterior `x`, conditioned on hitting the sphere.
/// Polar angle about the axis through `x` by tabulated inverse CDF, azimuth
/// uniform.
pub fn sample_entrance_point<R: Rng + ?Sized>(rng: &mut R, x: &Point, r: f64) -> Result<Point> {
    let rho = x.norm();
    if rho <= r {
        return Err(Error::InvalidInput(format!(
            "entrance source norm {rho} not outside radius {r}"
        )));
    }
    let sampler = cached_entrance_sampler(x.dim(), rho / r)?;
    let theta = sampler.sample_angle(rng);
    let axis = x.normalized().expect("exterior point is nonzero");
    let perp = uniform_unit_orthogonal(rng, &axis);
    let mut y = axis.scaled(r * theta.cos());
    y.add_scaled(&perp, r * theta.sin());
    Ok(y)
}

/// Rescale `x` so it lies exactly on the sphere of radius `radius` around the
/// origin (used to snap interpolated exit points to their design sphere).
pub fn snap_to_sphere(x: &Point, radius: f64) -> Point {
    let n = x.norm();
    assert!(n > 0.0, "cannot snap the origin to a sphere");
    x.scaled(radius / n)
}

/// Resolve an excursion to infinity exactly: from exterior `x`, either the
/// path never returns to the sphere of radius `rho` (probability
/// `1 - (rho/||x||)^{d-2}`) and `None` is returned, or the exact entrance
/// point on that sphere is sampled.  Skipped path segments lie entirely
/// outside B(rho), so no event inside that ball is affected.  Elapsed time of
/// the skipped leg is not simulated; callers appending to a path should
/// advance the clock nominally.
pub fn resolve_return<R: Rng + ?Sized>(rng: &mut R, x: &Point, rho: f64) -> Result<Option<Point>> {
    let p_return = 1.0 - escape_prob(x, rho)?;
    if rng.random::<f64>() < p_return {
        Ok(Some(sample_entrance_point(rng, x, rho)?))
    } else {
        Ok(None)
    }
}

// ---------------------------------------------------------------------------
// Paths, step policy, crossing detection
// ---------------------------------------------------------------------------

/// A sphere whose crossings are tracked during simulation (and near which the
/// step size shrinks).
#[derive(Clone, Debug, PartialEq)]
pub struct WatchedSphere {
    pub center: Point,
    pub radius: f64,
}

impl WatchedSphere {
    pub fn origin(d: usize, radius: f64) -> WatchedSphere {
        WatchedSphere {
            center: Point::zeros(d),
            radius,
        }
    }

    /// Signed distance of `x` to the sphere: negative inside.
    #[inline]
    pub fn signed_dist(&self, x: &[f64]) -> f64 {
        point::dist(x, self.center.as_slice()) - self.radius
    }
}

/// Adaptive time-step policy: dt = clamp((dist/shrink)^2, min_dt, base_dt)
/// where dist is the distance to the nearest watched sphere.  The quadratic
/// shrink keeps the probability of undetected sphere dips negligible.
#[derive(Clone, Copy, Debug)]
pub struct DtPolicy {
    pub base_dt: f64,
    pub min_dt: f64,
    pub shrink: f64,
}

impl DtPolicy {
    /// Policy from spatial step bounds: RMS displacement per step is about
    /// `step_max` far from spheres and never below `step_min` resolution.
    pub fn from_spatial(step_max: f64, step_min: f64, d: usize) -> DtPolicy {
        assert!(step_max > step_min && step_min > 0.0);
        DtPolicy {
            base_dt: step_max * step_max / d as f64,
            min_dt: step_min * step_min / d as f64,
            shrink: 5.0,
        }
    }

    #[inline]
    pub fn dt_for(&self, dist_to_sphere: f64) -> f64 {
        let d = dist_to_sphere / self.shrink;
        (d * d).clamp(self.min_dt, self.base_dt)
    }
}

/// One annotated sphere crossing.
#[derive(Clone, Debug)]
pub struct Crossing {
    /// index into the watched-sphere list carried by the path
    pub sphere: usize,
    pub inward: bool,
    pub time: f64,
    pub point: Point,
    /// index of the first stored sample at or after the crossing
    pub after_step: usize,
}

/// A time-discretized trajectory fragment with crossing annotations.
#[derive(Clone, Debug, Default)]
pub struct PathSample {
    pub dim: usize,
    pub times: Vec<f64>,
    /// positions, flattened row-major (len = dim * sample count)
    pub positions: Vec<f64>,
    pub crossings: Vec<Crossing>,
    pub watched: Vec<WatchedSphere>,
    pub seed_tag: u64,
    pub timed_out: bool,
}

impl PathSample {
    pub fn new(dim: usize) -> PathSample {
        PathSample {
            dim,
            ..Default::default()
        }
    }

    pub fn clear(&mut self, dim: usize) {
        self.dim = dim;
        self.times.clear();
        self.positions.clear();
        self.crossings.clear();
        self.watched.clear();
        self.timed_out = false;
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    #[inline]
    pub fn position(&self, i: usize) -> &[f64] {
        &self.positions[i * self.dim..(i + 1) * self.dim]
    }

    pub fn last_position(&self) -> &[f64] {
        self.position(self.len() - 1)
    }

    pub fn last_time(&self) -> f64 {
        *self.times.last().expect("nonempty path")
    }

    pub fn push(&mut self, t: f64, pos: &[f64]) {
        debug_assert_eq!(pos.len(), self.dim);
        debug_assert!(self.times.last().map_or(true, |&last| t > last));
        self.times.push(t);
        self.positions.extend_from_slice(pos);
    }

    /// Index of the watched sphere centered at the origin with the given
    /// radius, if tracked.
    pub fn sphere_index(&self, radius: f64) -> Option<usize> {
        self.watched.iter().position(|w| {
            (w.radius - radius).abs() <= 1e-12 && w.center.norm_sq() == 0.0
        })
    }
}

/// Termination rule for a simulated segment, referencing watched spheres by
/// index.
#[derive(Clone, Debug, Default)]
pub struct StopSpec {
    /// stop on an inward crossing of any of these spheres
    pub hit: SmallVec<[usize; 4]>,
    /// stop on an outward crossing of any of these spheres
    pub exit: SmallVec<[usize; 4]>,
    /// cap on elapsed time within this segment (infinite by default)
    pub max_time: f64,
}

impl StopSpec {
    pub fn new() -> StopSpec {
        StopSpec {
            hit: SmallVec::new(),
            exit: SmallVec::new(),
            max_time: f64::INFINITY,
        }
    }

    pub fn hit_sphere(mut self, idx: usize) -> StopSpec {
        self.hit.push(idx);
        self
    }

    pub fn exit_sphere(mut self, idx: usize) -> StopSpec {
        self.exit.push(idx);
        self
    }

    pub fn with_max_time(mut self, t: f64) -> StopSpec {
        self.max_time = t;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    Hit(usize),
    Exit(usize),
    TimedOut,
}

const MAX_STEPS_PER_SEGMENT: usize = 200_000_000;

/// Simulate a Brownian segment from `start` until the stop rule fires.
/// Convenience wrapper over [`simulate_path_segment_into`].
pub fn simulate_path_segment<R: Rng + ?Sized>(
    rng: &mut R,
    start: &Point,
    policy: &DtPolicy,
    watched: &[WatchedSphere],
    stop: &StopSpec,
) -> Result<(PathSample, StopReason)> {
    let mut path = PathSample::new(start.dim());
    let reason = simulate_path_segment_into(rng, &mut path, start, policy, watched, stop)?;
    Ok((path, reason))
}

/// Simulate into a reusable buffer; the path is reset first.
pub fn simulate_path_segment_into<R: Rng + ?Sized>(
    rng: &mut R,
    path: &mut PathSample,
    start: &Point,
    policy: &DtPolicy,
    watched: &[WatchedSphere],
    stop: &StopSpec,
) -> Result<StopReason> {
    path.clear(start.dim());
    path.watched.extend_from_slice(watched);
    path.push(0.0, start.as_slice());
    if let Some(reason) = zero_length_stop(start.as_slice(), watched, stop) {
        return Ok(reason);
    }
    extend_path_segment(rng, path, policy, stop)
}

/// Immediate stop when the start already lies on a target sphere.
fn zero_length_stop(start: &[f64], watched: &[WatchedSphere], stop: &StopSpec) -> Option<StopReason> {
    for &k in &stop.hit {
        if watched[k].signed_dist(start).abs() <= 1e-12 {
            return Some(StopReason::Hit(k));
        }
    }
    for &k in &stop.exit {
        if watched[k].signed_dist(start).abs() <= 1e-12 {
            return Some(StopReason::Exit(k));
        }
    }
    None
}

/// Continue simulating from the last sample of a nonempty path, appending
/// steps and crossing annotations, until the stop rule fires.  The watched
/// list already stored in the path is used.
pub fn extend_path_segment<R: Rng + ?Sized>(
    rng: &mut R,
    path: &mut PathSample,
    policy: &DtPolicy,
    stop: &StopSpec,
) -> Result<StopReason> {
    if path.is_empty() {
        return Err(Error::InvalidInput("cannot extend an empty path".into()));
    }
    for (k, w) in path.watched.iter().enumerate() {
        debug_assert_eq!(w.center.dim(), path.dim, "watched sphere {k} dimension");
    }
    let d = path.dim;
    let n_watched = path.watched.len();
    let mut pos: SmallVec<[f64; 8]> = SmallVec::from_slice(path.last_position());
    let mut t = path.last_time();
    let t_end = path.times[0] + stop.max_time;
    // Signed distances to each watched sphere; f <= 0 counts as inside so
    // that resuming exactly on a sphere registers the next outward move.
    let mut f: SmallVec<[f64; 8]> = path.watched.iter().map(|w| w.signed_dist(&pos)).collect();
    let mut f_new: SmallVec<[f64; 8]> = f.clone();
    let mut new_pos: SmallVec<[f64; 8]> = pos.clone();
    // (lambda, sphere, inward) crossings within one step
    let mut step_crossings: SmallVec<[(f64, usize, bool); 4]> = SmallVec::new();

    for _ in 0..MAX_STEPS_PER_SEGMENT {
        let dist = f.iter().fold(f64::INFINITY, |m, &x| m.min(x.abs()));
        let mut dt = policy.dt_for(dist);
        if t + dt > t_end {
            dt = t_end - t;
            if dt <= 0.0 {
                path.timed_out = true;
                return Ok(StopReason::TimedOut);
            }
        }
        let sqrt_dt = dt.sqrt();
        for i in 0..d {
            new_pos[i] = pos[i] + sqrt_dt * rng.sample::<f64, _>(StandardNormal);
        }
        step_crossings.clear();
        for k in 0..n_watched {
            f_new[k] = path.watched[k].signed_dist(&new_pos);
            let was_inside = f[k] <= 0.0;
            let is_inside = f_new[k] <= 0.0;
            if was_inside != is_inside {
                // Linear interpolation of the signed distance locates the
                // crossing within the step.
                let lambda = f[k] / (f[k] - f_new[k]);
                step_crossings.push((lambda, k, is_inside));
            }
        }
        step_crossings.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let next_index = path.len();
        let mut stopped: Option<(StopReason, f64)> = None;
        for &(lambda, k, inward) in &step_crossings {
            let cross_point = Point(
                (0..d)
                    .map(|i| pos[i] + lambda * (new_pos[i] - pos[i]))
                    .collect(),
            );
            path.crossings.push(Crossing {
                sphere: k,
                inward,
                time: t + lambda * dt,
                point: cross_point,
                after_step: next_index,
            });
            let fired = if inward {
                stop.hit.contains(&k).then_some(StopReason::Hit(k))
            } else {
                stop.exit.contains(&k).then_some(StopReason::Exit(k))
            };
            if let Some(reason) = fired {
                stopped = Some((reason, lambda));
                break;
            }
        }
        if let Some((reason, lambda)) = stopped {
            // Truncate the step at the triggering crossing.
            let c = path.crossings.last().expect("just pushed").point.clone();
            path.push(t + lambda * dt, c.as_slice());
            return Ok(reason);
        }
        t += dt;
        path.push(t, &new_pos);
        pos.copy_from_slice(&new_pos);
        f.copy_from_slice(&f_new);
        if t >= t_end {
            path.timed_out = true;
            return Ok(StopReason::TimedOut);
        }
    }
    path.timed_out = true;
    Ok(StopReason::TimedOut)
}

// ---------------------------------------------------------------------------
// Bridges
// ---------------------------------------------------------------------------

/// Duration of a Brownian bridge between `x` and `y` under the density
/// p_t(x,y)/G(x,y).  Writing a = d/2 - 1 and S ~ Gamma(a, 1), the duration is
/// exactly D^2/(2S); in d = 3 this reduces to D^2/Z^2 with Z standard normal
/// and is sampled that way.  For d >= 4 the Gamma variate is produced by
/// inverting the regularized upper incomplete gamma function.
pub fn sample_bridge_duration<R: Rng + ?Sized>(rng: &mut R, x: &Point, y: &Point) -> Result<f64> {
    let d = x.dim();
    let dist = x.dist(y);
    if dist < 1e-300 {
        return Err(Error::SingularInput("bridge duration with x = y".into()));
    }
    if d == 3 {
        loop {
            let z: f64 = rng.sample(StandardNormal);
            if z.abs() > 1e-12 {
                return Ok(dist * dist / (z * z));
            }
        }
    }
    let a = d as f64 / 2.0 - 1.0;
    let u = loop {
        let u = rng.random::<f64>();
        if u > 0.0 && u < 1.0 {
            break u;
        }
    };
    let s = inverse_upper_gamma(a, u);
    Ok(dist * dist / (2.0 * s))
}

/// CDF of the bridge duration (for distribution tests):
/// P[T <= t] = Q(d/2 - 1, D^2 / (2t)).
pub fn bridge_duration_cdf(d: usize, dist: f64, t: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    gamma_ur(d as f64 / 2.0 - 1.0, dist * dist / (2.0 * t))
}

/// Solve Q(a, s) = u for s, Q the regularized upper incomplete gamma.
fn inverse_upper_gamma(a: f64, u: f64) -> f64 {
    debug_assert!(u > 0.0 && u < 1.0);
    let mut hi = a.max(1.0);
    while gamma_ur(a, hi) > u {
        hi *= 2.0;
        if hi > 1e300 {
            break;
        }
    }
    let mut lo = 0.0;
    // 200 bisections: interval shrinks far below any representable spacing.
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if gamma_ur(a, mid) > u {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Brownian bridge from `x` at time 0 to `y` at time `t`, built by
/// sequential conditioned Gaussian steps (each increment drawn from the exact
/// bridge transition), with watched-sphere crossings annotated.  Endpoints
/// are bit-exact.
pub fn sample_bridge<R: Rng + ?Sized>(
    rng: &mut R,
    x: &Point,
    y: &Point,
    t: f64,
    policy: &DtPolicy,
    watched: &[WatchedSphere],
) -> Result<PathSample> {
    if !(t > 0.0) {
        return Err(Error::InvalidInput("bridge duration must be > 0".into()));
    }
    let d = x.dim();
    if y.dim() != d {
        return Err(Error::InvalidInput("bridge endpoint dimensions differ".into()));
    }
    let mut path = PathSample::new(d);
    path.watched.extend_from_slice(watched);
    path.push(0.0, x.as_slice());
    let mut pos: SmallVec<[f64; 8]> = SmallVec::from_slice(x.as_slice());
    let mut f: SmallVec<[f64; 8]> = watched.iter().map(|w| w.signed_dist(&pos)).collect();
    let mut new_pos: SmallVec<[f64; 8]> = pos.clone();
    let mut s = 0.0;

    loop {
        let rem = t - s;
        let dist = f.iter().fold(f64::INFINITY, |m, &v| m.min(v.abs()));
        let dt = policy.dt_for(dist).min(rem);
        let last = dt >= rem;
        if last {
            new_pos.copy_from_slice(y.as_slice());
        } else {
            // Exact bridge transition over [s, s+dt] given endpoint y at t.
            let pull = dt / rem;
            let var = dt * (rem - dt) / rem;
            let sd = var.sqrt();
            for i in 0..d {
                let mean = pos[i] + pull * (y[i] - pos[i]);
                new_pos[i] = mean + sd * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let t_next = if last { t } else { s + dt };
        let next_index = path.len();
        for (k, w) in watched.iter().enumerate() {
            let fk = w.signed_dist(&new_pos);
            let was_inside = f[k] <= 0.0;
            let is_inside = fk <= 0.0;
            if was_inside != is_inside {
                let lambda = f[k] / (f[k] - fk);
                path.crossings.push(Crossing {
                    sphere: k,
                    inward: is_inside,
                    time: s + lambda * (t_next - s),
                    point: Point(
                        (0..d)
                            .map(|i| pos[i] + lambda * (new_pos[i] - pos[i]))
                            .collect(),
                    ),
                    after_step: next_index,
                });
            }
            f[k] = fk;
        }
        path.push(t_next, &new_pos);
        if last {
            // Crossings within a step are found in sphere order; restore
            // global time order.
            path.crossings
                .sort_by(|a, b| a.time.partial_cmp(&b.time).unwrap());
            return Ok(path);
        }
        pos.copy_from_slice(&new_pos);
        s = t_next;
    }
}

// ---------------------------------------------------------------------------
// Conditioned escape (Doob h-transform)
// ---------------------------------------------------------------------------

/// Drift of Brownian motion conditioned to avoid B(0, K) forever:
/// grad h / h with h(y) = 1 - (K/||y||)^{d-2}.
pub fn escape_drift(big_k: f64, y: &Point) -> Point {
    let d = y.dim();
    let n = y.norm();
    let h = 1.0 - (big_k / n).powi(d as i32 - 2);
    let mag = (d as f64 - 2.0) * big_k.powi(d as i32 - 2) * n.powi(1 - d as i32) / h;
    y.scaled(mag / n)
}

/// Fractional outward offset applied to starts on (or numerically at) the
/// conditioning sphere, where the h-transform drift is singular.
pub const ESCAPE_START_OFFSET: f64 = 1e-3;

/// Simulate Brownian motion from `x` conditioned to never hit B(0, K), via
/// the h-transform drift, until it exits B(0, outer_cutoff).  Starts at (or
/// within the offset band of) the sphere are first moved outward by
/// `ESCAPE_START_OFFSET * K`.  The path never enters B(0, K): increments
/// that would cross in are redrawn (the drift makes this exponentially rare).
pub fn simulate_conditioned_escape<R: Rng + ?Sized>(
    rng: &mut R,
    x: &Point,
    big_k: f64,
    policy: &DtPolicy,
    outer_cutoff: f64,
) -> Result<PathSample> {
    let d = x.dim();
    let rho = x.norm();
    if rho < big_k * (1.0 - 1e-12) {
        return Err(Error::InvalidInput(format!(
            "conditioned escape start norm {rho} strictly inside K = {big_k}"
        )));
    }
    if outer_cutoff <= big_k {
        return Err(Error::InvalidInput("outer cutoff must exceed K".into()));
    }
    let start = if rho < big_k * (1.0 + ESCAPE_START_OFFSET) {
        snap_to_sphere(x, big_k * (1.0 + ESCAPE_START_OFFSET))
    } else {
        x.clone()
    };
    let watched = vec![
        WatchedSphere::origin(d, big_k),
        WatchedSphere::origin(d, outer_cutoff),
    ];
    let mut path = PathSample::new(d);
    path.watched = watched;
    path.push(0.0, start.as_slice());

    let mut pos = start;
    let mut t = 0.0;
    let mut new_pos: SmallVec<[f64; 8]> = SmallVec::from_slice(pos.as_slice());
    for _ in 0..MAX_STEPS_PER_SEGMENT {
        let n = pos.norm();
        let gap = n - big_k;
        let outer_gap = (outer_cutoff - n).abs();
        let drift = escape_drift(big_k, &pos);
        let drift_mag = drift.norm();
        let mut dt = policy.dt_for(gap.min(outer_gap));
        if drift_mag > 0.0 {
            // Keep the deterministic displacement a fraction of the gap.
            dt = dt.min(0.25 * gap / drift_mag);
        }
        // The gap cap shrinks quadratically as the path grazes the forbidden
        // sphere and would otherwise underflow below the float resolution of
        // the clock, stalling it.  The drift is outward, so a floored step
        // cannot push the motion into the ball (and the redraw guard below
        // rejects any noise increment that would).
        dt = dt.max(policy.min_dt * 1e-3).max(f64::EPSILON * (t + 1.0));
        let sqrt_dt = dt.sqrt();
        // Redraw any increment that would enter the forbidden ball.
        loop {
            for i in 0..d {
                new_pos[i] =
                    pos[i] + drift[i] * dt + sqrt_dt * rng.sample::<f64, _>(StandardNormal);
            }
            if point::norm_sq(&new_pos) > big_k * big_k {
                break;
            }
        }
        t += dt;
        path.push(t, &new_pos);
        let n_new = point::norm(&new_pos);
        if n_new >= outer_cutoff {
            // Snap the exit onto the cutoff sphere via interpolation.
            let f0 = pos.norm() - outer_cutoff;
            let f1 = n_new - outer_cutoff;
            let lambda = if f1 > f0 { f0 / (f0 - f1) } else { 1.0 };
            let cross = Point(
                (0..d)
                    .map(|i| pos[i] + lambda * (new_pos[i] - pos[i]))
                    .collect(),
            );
            let idx = path.len() - 1;
            path.crossings.push(Crossing {
                sphere: 1,
                inward: false,
                time: t,
                point: cross,
                after_step: idx,
            });
            return Ok(path);
        }
        pos = Point::from_slice(&new_pos);
    }
    path.timed_out = true;
    Ok(path)
}

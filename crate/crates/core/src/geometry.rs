//! Deterministic Euclidean machinery: hemiballs, incrementally built affine
//! hulls with Gram-determinant distance queries, distance from the origin to
//! a convex hull (support-point descent), and the prefix-hull perturbation
//! checker.

use crate::point::{self, Point};
use crate::{Error, Result};
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

/// Default hull-membership tolerance at a given coordinate scale.
pub fn hull_tol(scale: f64) -> f64 {
    1e-9 * scale.abs().max(1.0)
}

/// Gram determinant det(<v_i, v_j>) of 1..=d vectors.
pub fn gram_determinant(vectors: &[Point]) -> Result<f64> {
    let n = vectors.len();
    if n == 0 {
        return Err(Error::InvalidInput("gram_determinant of empty list".into()));
    }
    let d = vectors[0].dim();
    if vectors.iter().any(|v| v.dim() != d) {
        return Err(Error::InvalidInput(
            "gram_determinant: dimension mismatch".into(),
        ));
    }
    if n > d {
        return Err(Error::InvalidInput(format!(
            "gram_determinant: {n} vectors exceed ambient dimension {d}"
        )));
    }
    let g = DMatrix::from_fn(n, n, |i, j| vectors[i].dot(&vectors[j]));
    // Gram matrices are positive semidefinite; tiny negative determinants are
    // floating-point noise.
    Ok(g.determinant().max(0.0))
}

/// Affine span of a growing point set, built incrementally.
///
/// Keeps the spanning differences (`generators`), the chain of Gram
/// determinants G(g_1..g_k), and an orthonormal basis of the direction space
/// for projection-based distance queries.
#[derive(Clone, Debug)]
pub struct AffineHull {
    anchor: Point,
    generators: Vec<Point>,
    ortho: Vec<Point>,
    gram_chain: Vec<f64>,
    ambient: usize,
}

impl AffineHull {
    /// Hull of a single point.
    pub fn new(anchor: Point) -> Self {
        let ambient = anchor.dim();
        AffineHull {
            anchor,
            generators: Vec::new(),
            ortho: Vec::new(),
            gram_chain: Vec::new(),
            ambient,
        }
    }

    /// Hull of a point list, extending by each in order.
    pub fn from_points(points: &[Point], tol: f64) -> Result<Self> {
        let first = points
            .first()
            .ok_or_else(|| Error::InvalidInput("AffineHull of empty point list".into()))?;
        let mut hull = AffineHull::new(first.clone());
        for p in &points[1..] {
            hull.extend(p, tol);
        }
        Ok(hull)
    }

    /// Affine dimension (number of generators).
    pub fn dim(&self) -> usize {
        self.generators.len()
    }

    pub fn ambient_dim(&self) -> usize {
        self.ambient
    }

    pub fn anchor(&self) -> &Point {
        &self.anchor
    }

    pub fn gram_chain(&self) -> &[f64] {
        &self.gram_chain
    }

    pub fn is_full_space(&self) -> bool {
        self.generators.len() == self.ambient
    }

    /// Distance by orthogonal projection onto the direction space.
    pub fn distance_projection(&self, x: &Point) -> f64 {
        if self.is_full_space() {
            return 0.0;
        }
        let mut r = x.sub(&self.anchor);
        // Two projection passes for numerical hygiene near degeneracy.
        for _ in 0..2 {
            for q in &self.ortho {
                let c = r.dot(q);
                r.add_scaled(q, -c);
            }
        }
        r.norm()
    }

    /// Distance by the Gram-determinant ratio
    /// d(x, aff)^2 = G(g_1..g_n, x - anchor) / G(g_1..g_n).
    pub fn distance_gram(&self, x: &Point) -> f64 {
        let v = x.sub(&self.anchor);
        if self.generators.is_empty() {
            return v.norm();
        }
        if self.is_full_space() {
            return 0.0;
        }
        let mut vs = self.generators.clone();
        vs.push(v);
        let g_full = gram_determinant(&vs).expect("generator count below ambient dim");
        let g_base = *self.gram_chain.last().expect("nonempty generator chain");
        (g_full / g_base).max(0.0).sqrt()
    }

    /// Extend by `x` if it lies farther than `tol` from the current hull.
    /// Returns true when the affine dimension grew.
    pub fn extend(&mut self, x: &Point, tol: f64) -> bool {
        if self.is_full_space() {
            return false;
        }
        let dist = self.distance_projection(x);
        if dist <= tol {
            return false;
        }
        let g = x.sub(&self.anchor);
        self.generators.push(g.clone());
        let mut r = g;
        for _ in 0..2 {
            for q in &self.ortho {
                let c = r.dot(q);
                r.add_scaled(q, -c);
            }
        }
        let q = r
            .normalized()
            .expect("residual above tol cannot be the zero vector");
        self.ortho.push(q);
        let gram = gram_determinant(&self.generators).expect("generators fit in ambient dim");
        self.gram_chain.push(gram);
        true
    }
}

/// Distance from `x` to the affine hull.  Computed by projection (the
/// numerically robust route); the Gram-ratio value is available separately
/// via [`dual_hull_distance`] and the two are asserted to agree in tests.
pub fn dist_to_affine_hull(x: &Point, hull: &AffineHull) -> f64 {
    hull.distance_projection(x)
}

/// Both distance routes: (projection, Gram ratio).
pub fn dual_hull_distance(x: &Point, hull: &AffineHull) -> (f64, f64) {
    (hull.distance_projection(x), hull.distance_gram(x))
}

/// Extend a hull by one point, returning the new hull (functional form of
/// [`AffineHull::extend`]).
pub fn extend_hull(hull: &AffineHull, x: &Point, tol: f64) -> AffineHull {
    let mut out = hull.clone();
    out.extend(x, tol);
    out
}

// ---------------------------------------------------------------------------
// Distance from the origin to a convex hull (GJK-style descent).
// ---------------------------------------------------------------------------

const GJK_GAP_TOL: f64 = 1e-10;
const GJK_MAX_ITERS: usize = 10_000;

/// Distance from the origin to conv{points}.
pub fn dist_origin_to_convex_hull(points: &[Point]) -> Result<f64> {
    let d = points
        .first()
        .ok_or_else(|| Error::InvalidInput("convex hull of empty point list".into()))?
        .dim();
    if points.iter().any(|p| p.dim() != d) {
        return Err(Error::InvalidInput(
            "convex hull: dimension mismatch".into(),
        ));
    }
    let mut flat = Vec::with_capacity(points.len() * d);
    for p in points {
        flat.extend_from_slice(p.as_slice());
    }
    dist_origin_to_convex_hull_flat(&flat, d)
}

/// Same as [`dist_origin_to_convex_hull`] on a flattened point buffer
/// (row-major, `flat.len() == n * d`).  This is the hot-path entry point.
pub fn dist_origin_to_convex_hull_flat(flat: &[f64], d: usize) -> Result<f64> {
    Ok(point::norm(&closest_hull_point_to_origin_flat(flat, d)?))
}

/// The point of conv{points} closest to the origin (flattened buffer).  Its
/// norm is the hull distance; when positive, every point p of the input
/// satisfies `<p, -v/|v|> <= -|v|`, so `-v/|v|` certifies the distance.
pub fn closest_hull_point_to_origin_flat(flat: &[f64], d: usize) -> Result<Vec<f64>> {
    if flat.is_empty() || d == 0 || flat.len() % d != 0 {
        return Err(Error::InvalidInput(
            "convex hull: empty or misshapen flat buffer".into(),
        ));
    }
    let n = flat.len() / d;
    let pt = |i: usize| &flat[i * d..(i + 1) * d];

    // Active simplex: indices into the point list.
    let mut simplex: Vec<usize> = vec![0];
    let mut v = vec![0.0; d]; // current closest point of conv(simplex)
    let mut last_norm;

    for _ in 0..GJK_MAX_ITERS {
        let members: Vec<&[f64]> = simplex.iter().map(|&i| pt(i)).collect();
        let (closest, keep) = closest_point_on_simplex(&members, d);
        v.copy_from_slice(&closest);
        // Drop simplex members with zero barycentric weight.
        let mut idx = 0;
        simplex.retain(|_| {
            let k = keep[idx];
            idx += 1;
            k
        });
        last_norm = point::norm(&v);
        if last_norm < 1e-13 {
            v.iter_mut().for_each(|x| *x = 0.0);
            return Ok(v);
        }
        // Support point: minimizes <v, p> over all points.
        let mut best = usize::MAX;
        let mut best_dot = f64::INFINITY;
        for i in 0..n {
            let dp = point::dot(&v, pt(i));
            if dp < best_dot {
                best_dot = dp;
                best = i;
            }
        }
        // Certified gap: ||v|| - <v, s>/||v|| bounds the possible improvement.
        let gap = last_norm - best_dot / last_norm;
        if gap < GJK_GAP_TOL || simplex.contains(&best) {
            return Ok(v);
        }
        simplex.push(best);
    }
    // Descent is monotone; reaching the iteration cap still yields a valid
    // upper bound within the gap tolerance for any sane input.
    Ok(v)
}

/// Closest point of the simplex conv{members} to the origin, by enumerating
/// faces (subsets) and keeping the best one with nonnegative barycentric
/// weights.  Returns the closest point and, per member, whether it carries
/// positive weight in the optimal face.
fn closest_point_on_simplex(members: &[&[f64]], d: usize) -> (Vec<f64>, Vec<bool>) {
    let m = members.len();
    debug_assert!(m >= 1);
    let mut best_norm_sq = f64::INFINITY;
    let mut best_point = vec![0.0; d];
    let mut best_keep = vec![false; m];

    for mask in 1u32..(1 << m) {
        let subset: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
        let k = subset.len();
        let q0 = members[subset[0]];
        let lambdas: Vec<f64> = if k == 1 {
            vec![1.0]
        } else {
            // Minimize ||q0 + sum mu_j (q_j - q0)||^2 via normal equations.
            let edges: Vec<Vec<f64>> = subset[1..]
                .iter()
                .map(|&j| {
                    members[j]
                        .iter()
                        .zip(q0)
                        .map(|(a, b)| a - b)
                        .collect::<Vec<f64>>()
                })
                .collect();
            let a = DMatrix::from_fn(k - 1, k - 1, |i, j| point::dot(&edges[i], &edges[j]));
            let b = nalgebra::DVector::from_fn(k - 1, |i, _| -point::dot(&edges[i], q0));
            match a.lu().solve(&b) {
                Some(mu) => {
                    let mut lam = vec![1.0 - mu.iter().sum::<f64>()];
                    lam.extend(mu.iter().copied());
                    lam
                }
                None => continue, // degenerate face; a subface covers it
            }
        };
        if lambdas.iter().any(|&l| l < -1e-12) {
            continue;
        }
        let mut cand = vec![0.0; d];
        for (&l, &j) in lambdas.iter().zip(&subset) {
            for (c, &x) in cand.iter_mut().zip(members[j]) {
                *c += l * x;
            }
        }
        let nsq = point::norm_sq(&cand);
        if nsq < best_norm_sq {
            best_norm_sq = nsq;
            best_point = cand;
            best_keep = vec![false; m];
            for (&l, &j) in lambdas.iter().zip(&subset) {
                // Members with (numerically) zero weight are dropped so the
                // simplex stays small.
                best_keep[j] = l > 1e-12;
            }
        }
    }
    (best_point, best_keep)
}

// ---------------------------------------------------------------------------
// Hemiballs
// ---------------------------------------------------------------------------

/// The part of the ball B(r) on the side `<x, e> >= -delta` of a hyperplane
/// passing near the center.
#[derive(Clone, Debug)]
pub struct Hemiball {
    pub e: Point,
    pub delta: f64,
    pub r: f64,
}

impl Hemiball {
    pub fn new(e: Point, delta: f64, r: f64) -> Result<Self> {
        if (e.norm() - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidInput("hemiball direction must be unit".into()));
        }
        if !(delta >= 0.0 && r > 0.0 && delta <= r) {
            return Err(Error::InvalidInput(
                "hemiball requires 0 <= delta <= r, r > 0".into(),
            ));
        }
        Ok(Hemiball { e, delta, r })
    }
}

/// Membership test for a hemiball.
pub fn hemiball_contains(h: &Hemiball, x: &Point) -> bool {
    debug_assert_eq!(h.e.dim(), x.dim());
    x.norm() <= h.r && x.dot(&h.e) >= -h.delta
}

// ---------------------------------------------------------------------------
// Prefix-hull perturbation checker
// ---------------------------------------------------------------------------

/// Outcome of [`check_perturbation_bound`].
#[derive(Clone, Debug)]
pub struct PerturbationReport {
    /// max over i of |d(x_i, aff prefix of xs) - d(y_i, aff prefix of ys)|
    pub max_diff: f64,
    /// delta^p, the budget the difference is compared against
    pub delta_pow_p: f64,
    /// precondition violations, empty when the configuration is admissible
    pub violations: Vec<String>,
}

/// Checks how prefix-hull distances move under a small perturbation.
///
/// Preconditions on the base configuration `xs` and perturbation `ys`:
/// (a) every ‖x_i‖ <= R, (b) every point is farther than `delta` from the
/// affine hull of its predecessors, (c) ‖x_i − y_i‖ < R·delta^(2d+p).
/// Violations are reported, not silently accepted.  The returned `max_diff`
/// is what property tests compare against `C·delta^p`.
pub fn check_perturbation_bound(
    xs: &[Point],
    ys: &[Point],
    delta: f64,
    p: f64,
    big_r: f64,
) -> Result<PerturbationReport> {
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(Error::InvalidInput(
            "perturbation check needs equal-length nonempty point lists".into(),
        ));
    }
    let d = xs[0].dim();
    if xs.iter().chain(ys).any(|q| q.dim() != d) {
        return Err(Error::InvalidInput(
            "perturbation check: dimension mismatch".into(),
        ));
    }
    if !(delta > 0.0 && p > 0.0 && big_r > 0.0) {
        return Err(Error::InvalidInput(
            "perturbation check: delta, p, R must be positive".into(),
        ));
    }

    let mut violations = Vec::new();
    let move_budget = big_r * delta.powf(2.0 * d as f64 + p);
    for (i, (x, y)) in xs.iter().zip(ys).enumerate() {
        if x.norm() > big_r {
            violations.push(format!("point {i}: ||x|| = {} exceeds R = {big_r}", x.norm()));
        }
        if x.dist(y) >= move_budget {
            violations.push(format!(
                "point {i}: perturbation {} >= R*delta^(2d+p) = {move_budget}",
                x.dist(y)
            ));
        }
    }

    let tol = hull_tol(big_r);
    let mut hull_x = AffineHull::new(xs[0].clone());
    let mut hull_y = AffineHull::new(ys[0].clone());
    let mut max_diff: f64 = 0.0;
    for i in 1..xs.len() {
        let dx = dist_to_affine_hull(&xs[i], &hull_x);
        let dy = dist_to_affine_hull(&ys[i], &hull_y);
        if dx <= delta {
            violations.push(format!(
                "point {i}: prefix-hull distance {dx} not above delta = {delta}"
            ));
        }
        max_diff = max_diff.max((dx - dy).abs());
        hull_x.extend(&xs[i], tol);
        hull_y.extend(&ys[i], tol);
    }

    Ok(PerturbationReport {
        max_diff,
        delta_pow_p: delta.powf(p),
        violations,
    })
}

// ---------------------------------------------------------------------------
// Sphere sampling
// ---------------------------------------------------------------------------

/// Uniform point at exact distance `radius` from `center`.
pub fn uniform_sphere_point<R: Rng + ?Sized>(rng: &mut R, center: &Point, radius: f64) -> Point {
    assert!(radius > 0.0, "sphere radius must be positive");
    let u = uniform_unit_vector(rng, center.dim());
    let mut out = center.clone();
    out.add_scaled(&u, radius);
    out
}

/// Uniform direction on the unit sphere of `R^d`.
pub fn uniform_unit_vector<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Point {
    loop {
        let g = Point((0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect());
        if let Some(u) = g.normalized() {
            return u;
        }
    }
}

/// Uniform unit vector orthogonal to `axis` (which need not be unit).
pub fn uniform_unit_orthogonal<R: Rng + ?Sized>(rng: &mut R, axis: &Point) -> Point {
    let a = axis.normalized().expect("axis must be nonzero");
    loop {
        let mut g = Point(
            (0..axis.dim())
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect(),
        );
        let c = g.dot(&a);
        g.add_scaled(&a, -c);
        if let Some(u) = g.normalized() {
            return u;
        }
    }
}

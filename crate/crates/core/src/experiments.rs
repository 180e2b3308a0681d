//! Monte Carlo harness: trial orchestration over epsilon grids, event
//! probability estimation, log-log exponent fitting, assertion campaigns for
//! the proved implications, closed-form verification suites, and
//! deterministic CSV reporting with replayable counterexample bundles.

use crate::brownian::{
    escape_prob, extend_path_segment, hit_prob_annulus, resolve_return, sample_entrance_point,
    simulate_conditioned_escape, simulate_path_segment, snap_to_sphere, DtPolicy, PathSample,
    StopReason, StopSpec, WatchedSphere,
};
use crate::cascade::{
    cascade_record, compute_tau, detect_event_g, dyadic_ranges, run_cascade,
    verify_cascade_lemmas,
};
use crate::geometry::uniform_sphere_point;
use crate::interlacements::{
    sample_local_interlacements, sample_pair_angle, vacant_components_annulus,
    InterlacementConfig, SamplingMode,
};
use crate::point::{self, Point};
use crate::rng::{stream_id, trial_rng};
use crate::sausage::{
    build_sausage_near, check_hemiball_implication, count_vacant_components, detect_event_e,
    visited_hull_distance, IMPLICATION_MARGIN,
};
use crate::stats::{binomial_stderr, chi_square_pvalue, ols_slope};
use crate::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::fmt::Write as _;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Which event or campaign a run estimates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EventId {
    /// visited-hull near the origin AND no visit to B(1-eps); starts uniform
    /// on the unit sphere
    EAndF,
    /// visited-hull near the origin only
    EOnly,
    /// no visit to B(1-eps) only
    FOnly,
    /// the e-and-f conjunction estimated by conditioning: the no-visit event
    /// has the closed-form probability 1 - (1-eps)^(d-2), and the hull event
    /// is sampled from motions conditioned to avoid B(1-eps) (h-transformed
    /// legs with an exactly resolved conditioned return law).  Single motion
    /// only; the reported p_hat is the product, so it estimates the same
    /// quantity as e-and-f with far smaller variance per unit time at small
    /// eps
    EAndFConditioned,
    /// >= 2 vacant components in B(0, eps); starts uniform on the sphere
    /// 1 + eps
    OneBall,
    /// >= 2 vacant components around every listed center simultaneously
    SeveralBalls,
    /// >= 2 vacant components in B(0, eps) from sausages stopped on their
    /// first exit of B(0, 3); starts uniform on the sphere of radius 2
    ExcursionLocal,
    /// assertion campaign: >= 2 components forces hemiball coverage and no
    /// visit to B(1-eps)
    HemiballImplication,
    /// assertion campaign: cascade stopping-step and stopping-index lemmas
    CascadeLemmas,
    /// mean count of vacant components crossing an annulus of an
    /// interlacement sample
    AnnulusCount,
    /// closed-form verification suite
    FormulaSuite,
}

impl EventId {
    pub fn as_str(self) -> &'static str {
        match self {
            EventId::EAndF => "e-and-f",
            EventId::EOnly => "e-only",
            EventId::FOnly => "f-only",
            EventId::EAndFConditioned => "e-and-f-cond",
            EventId::OneBall => "one-ball",
            EventId::SeveralBalls => "several-balls",
            EventId::ExcursionLocal => "excursion-local",
            EventId::HemiballImplication => "hemiball-implication",
            EventId::CascadeLemmas => "cascade-lemmas",
            EventId::AnnulusCount => "annulus-count",
            EventId::FormulaSuite => "formula-suite",
        }
    }

    pub fn parse(s: &str) -> Result<EventId> {
        Ok(match s {
            "e-and-f" => EventId::EAndF,
            "e-only" => EventId::EOnly,
            "f-only" => EventId::FOnly,
            "e-and-f-cond" => EventId::EAndFConditioned,
            "one-ball" => EventId::OneBall,
            "several-balls" => EventId::SeveralBalls,
            "excursion-local" => EventId::ExcursionLocal,
            "hemiball-implication" => EventId::HemiballImplication,
            "cascade-lemmas" => EventId::CascadeLemmas,
            "annulus-count" => EventId::AnnulusCount,
            "formula-suite" => EventId::FormulaSuite,
            other => {
                return Err(Error::InvalidInput(format!("unknown event id '{other}'")))
            }
        })
    }
}

/// Full description of one experiment.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub dim: usize,
    pub event: EventId,
    pub eps_grid: Vec<f64>,
    /// number of Brownian motions per trial (per center for several-balls)
    pub k_motions: usize,
    /// ball centers for the several-balls event; pairwise distance must
    /// exceed 6
    pub centers: Vec<Point>,
    pub n_trials: u64,
    pub master_seed: u64,
    pub step_max: f64,
    pub step_min: f64,
    /// component-count grid spacing; defaults to eps / 12
    pub grid_spacing: Option<f64>,
    /// interlacement intensity (annulus-count)
    pub alpha: f64,
    /// annulus radii (annulus-count)
    pub annulus_inner: f64,
    pub annulus_outer: f64,
}

impl ExperimentConfig {
    pub fn new(dim: usize, event: EventId) -> ExperimentConfig {
        ExperimentConfig {
            dim,
            event,
            eps_grid: vec![0.1],
            k_motions: 1,
            centers: Vec::new(),
            n_trials: 0,
            master_seed: 0,
            step_max: 0.1,
            step_min: 1e-3,
            grid_spacing: None,
            alpha: 0.05,
            annulus_inner: 1.0,
            annulus_outer: 23.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 3 {
            return Err(Error::InvalidInput("experiments need d >= 3".into()));
        }
        if self.eps_grid.is_empty() {
            return Err(Error::InvalidInput("empty eps grid".into()));
        }
        for &eps in &self.eps_grid {
            if !(eps > 0.0 && eps < 1.0) {
                return Err(Error::InvalidInput(format!(
                    "eps = {eps} outside (0, 1)"
                )));
            }
        }
        if self.event == EventId::SeveralBalls {
            if self.centers.len() < 2 {
                return Err(Error::InvalidInput(
                    "several-balls needs at least 2 centers".into(),
                ));
            }
            for i in 0..self.centers.len() {
                for j in (i + 1)..self.centers.len() {
                    let dist = self.centers[i].dist(&self.centers[j]);
                    if dist <= 6.0 {
                        return Err(Error::InvalidInput(format!(
                            "centers {i} and {j} are {dist} apart; must exceed 6"
                        )));
                    }
                }
            }
        }
        if self.event != EventId::FormulaSuite && self.event != EventId::AnnulusCount
            && self.k_motions == 0
        {
            return Err(Error::InvalidInput("k_motions must be >= 1".into()));
        }
        if self.event == EventId::EAndFConditioned && self.k_motions != 1 {
            return Err(Error::InvalidInput(
                "the conditioned estimator factorizes the no-visit probability of a \
                 single motion; use e-and-f for k > 1"
                    .into(),
            ));
        }
        if !(self.step_max > self.step_min && self.step_min > 0.0) {
            return Err(Error::InvalidInput("need step_max > step_min > 0".into()));
        }
        Ok(())
    }

    fn grid_spacing_for(&self, eps: f64) -> f64 {
        self.grid_spacing.unwrap_or(eps / 12.0)
    }
}

// ---------------------------------------------------------------------------
// Results
// ---------------------------------------------------------------------------

/// Estimate at one grid point.
#[derive(Clone, Debug)]
pub struct GridPointEstimate {
    pub eps: f64,
    pub n: u64,
    pub successes: u64,
    pub p_hat: f64,
    pub stderr: f64,
    /// trials whose classification fell within a tolerance band
    pub borderline: u64,
    /// non-borderline assertion violations (campaign events only)
    pub violations: u64,
}

#[derive(Clone, Copy, Debug)]
pub struct SlopeFit {
    pub slope: f64,
    pub stderr: f64,
    pub n_points: usize,
}

/// Aggregated outcome of a run.
#[derive(Clone, Debug)]
pub struct EstimateResult {
    pub rows: Vec<GridPointEstimate>,
    pub slope: Option<SlopeFit>,
    /// replayable descriptions of violating trials, capped
    pub bundles: Vec<String>,
}

impl EstimateResult {
    pub fn total_violations(&self) -> u64 {
        self.rows.iter().map(|r| r.violations).sum()
    }

    /// Render the run as CSV: one row per grid point, then a slope block
    /// when a fit exists.  Float formatting is Rust's shortest round-trip
    /// form, so output is byte-stable.
    pub fn to_csv(&self, cfg: &ExperimentConfig) -> String {
        let mut s = String::from(
            "eps,k_motions,event,trials,successes,p_hat,stderr,borderline,seed\n",
        );
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.eps,
                cfg.k_motions,
                cfg.event.as_str(),
                r.n,
                r.successes,
                r.p_hat,
                r.stderr,
                r.borderline,
                cfg.master_seed
            )
            .expect("infallible write to String");
        }
        if let Some(f) = &self.slope {
            s.push_str("event,slope,slope_stderr,n_points\n");
            writeln!(
                s,
                "{},{},{},{}",
                cfg.event.as_str(),
                f.slope,
                f.stderr,
                f.n_points
            )
            .expect("infallible write to String");
        }
        s
    }
}

// ---------------------------------------------------------------------------
// Slope fitting
// ---------------------------------------------------------------------------

/// Minimum success count for a grid point to enter the slope fit.
pub const SLOPE_MIN_SUCCESSES: u64 = 25;

/// OLS slope of log p over log eps.  Points with fewer than
/// [`SLOPE_MIN_SUCCESSES`] successes are excluded (binomial noise dominates);
/// fewer than 3 usable points is an explicit insufficient-data error.  The
/// fit is invariant under row order.
pub fn fit_loglog_slope(table: &[(f64, f64, u64)]) -> Result<SlopeFit> {
    let xy: Vec<(f64, f64)> = table
        .iter()
        .filter(|(eps, p, succ)| *succ >= SLOPE_MIN_SUCCESSES && *p > 0.0 && *eps > 0.0)
        .map(|(eps, p, _)| (eps.ln(), p.ln()))
        .collect();
    let (slope, stderr) = ols_slope(&xy).ok_or_else(|| {
        Error::InsufficientData(format!(
            "slope fit needs >= 3 grid points with >= {SLOPE_MIN_SUCCESSES} successes; \
             got {}",
            xy.len()
        ))
    })?;
    Ok(SlopeFit {
        slope,
        stderr,
        n_points: xy.len(),
    })
}

// ---------------------------------------------------------------------------
// Single trials
// ---------------------------------------------------------------------------

/// Outcome of one trial.
#[derive(Clone, Debug, Default)]
pub struct TrialOutcome {
    pub success: bool,
    pub borderline: bool,
    /// non-empty only for assertion campaigns with a violated implication
    pub violations: Vec<String>,
    /// replayable one-line record of the trial's result, campaign events only
    pub record: Option<String>,
}

/// Simulate one motion with exact resolution of its excursions to infinity:
/// repeatedly run until the outer sphere is exited, then either stop (the
/// motion never returns to the sphere `rho`) or resume at an exact entrance
/// point, with the clock advanced by one nominal unit.
///
/// When `abort_radius` is set, the motion also stops at its first inward
/// crossing of that sphere and the returned flag is true; events decided by
/// that first hit can then skip the rest of the trajectory.
pub fn simulate_resolved_motion<R: Rng + ?Sized>(
    rng: &mut R,
    start: &Point,
    rho: f64,
    outer: f64,
    extra_watch: &[f64],
    abort_radius: Option<f64>,
    policy: &DtPolicy,
) -> Result<(PathSample, bool)> {
    let d = start.dim();
    let mut radii = vec![outer, rho];
    for &w in extra_watch.iter().chain(abort_radius.iter()) {
        if !radii.iter().any(|&r| r == w) {
            radii.push(w);
        }
    }
    let mut path = PathSample::new(d);
    path.watched = radii.iter().map(|&r| WatchedSphere::origin(d, r)).collect();
    path.push(0.0, start.as_slice());
    let mut stop = StopSpec::new().exit_sphere(0);
    if let Some(a) = abort_radius {
        let idx = radii.iter().position(|&r| r == a).expect("radius was added");
        stop = stop.hit_sphere(idx);
    }
    loop {
        match extend_path_segment(rng, &mut path, policy, &stop)? {
            StopReason::Exit(_) => {
                let exit = snap_to_sphere(&Point::from_slice(path.last_position()), outer);
                match resolve_return(rng, &exit, rho)? {
                    None => return Ok((path, false)),
                    Some(entry) => path.push(path.last_time() + 1.0, entry.as_slice()),
                }
            }
            StopReason::Hit(_) => return Ok((path, true)),
            StopReason::TimedOut => {
                return Err(Error::InsufficientData(
                    "resolved motion exhausted its step budget".into(),
                ))
            }
        }
    }
}

fn policy_of(cfg: &ExperimentConfig) -> DtPolicy {
    DtPolicy::from_spatial(cfg.step_max, cfg.step_min, cfg.dim)
}

fn trial_e_f(
    rng: &mut ChaCha8Rng,
    cfg: &ExperimentConfig,
    eps: f64,
    want_e: bool,
    want_f: bool,
) -> Result<TrialOutcome> {
    let policy = policy_of(cfg);
    let origin = Point::zeros(cfg.dim);
    let inner = 1.0 - eps;
    // Motions start on the unit sphere and are resolved at rho = 1 + eps so
    // every visit to B(1 + eps) is captured.  Only the inner sphere is
    // watched (when the no-visit event is wanted): visits to B(1 + eps) are
    // captured exactly by the return resolution itself, and watching a
    // sphere the path lingers on makes the step policy crawl.  The first
    // inward crossing of the inner sphere decides F, so the trial aborts
    // there.
    let mut paths = Vec::with_capacity(cfg.k_motions);
    let mut f_failed = false;
    for _ in 0..cfg.k_motions {
        let start = uniform_sphere_point(rng, &origin, 1.0);
        let (path, hit) = simulate_resolved_motion(
            rng,
            &start,
            1.0 + eps,
            2.0 + eps,
            &[],
            if want_f { Some(inner) } else { None },
            &policy,
        )?;
        paths.push(path);
        if hit {
            f_failed = true;
            break;
        }
    }
    let mut borderline = false;
    let success = if f_failed {
        false
    } else {
        if want_f {
            // Clearance of the surviving paths from the inner threshold.
            let min_norm = paths
                .iter()
                .flat_map(|p| (0..p.len()).map(|i| point::norm(p.position(i))))
                .fold(f64::INFINITY, f64::min);
            borderline |= (min_norm - inner).abs() <= IMPLICATION_MARGIN;
        }
        if want_e {
            let hull_dist = visited_hull_distance(&paths, eps)?;
            borderline |= (hull_dist - eps).abs() <= IMPLICATION_MARGIN;
            hull_dist <= eps
        } else {
            true
        }
    };
    Ok(TrialOutcome {
        success,
        borderline,
        ..TrialOutcome::default()
    })
}

/// Closed-form probability that a single motion from the unit sphere never
/// visits B(1 - eps).
fn f_probability(d: usize, eps: f64) -> f64 {
    1.0 - (1.0 - eps).powi(d as i32 - 2)
}

/// One conditional trial of the e-and-f conjunction: the motion is sampled
/// from the law conditioned to avoid B(1 - eps) forever (h-transformed legs),
/// and only the hull event is decided.  The excursion structure mirrors the
/// plain trial: legs run to the sphere 2 + eps, and the conditioned return to
/// the sphere 1 + eps is resolved exactly.  Because every path from outside
/// must cross the sphere 1 + eps before it could reach B(1 - eps), the
/// avoidance weight h(y) = 1 - ((1-eps)/|y|)^(d-2) is constant on the return
/// sphere, so the conditioned return probability is the plain one times
/// h(1+eps)/h(2+eps) and the entrance point keeps the plain harmonic-measure
/// law.  The success frequency estimates P[hull event | no visit]; the
/// orchestrator multiplies by the closed-form no-visit probability.
fn trial_e_given_f(rng: &mut ChaCha8Rng, cfg: &ExperimentConfig, eps: f64) -> Result<TrialOutcome> {
    let d = cfg.dim;
    let a = 1.0 - eps;
    let b = 1.0 + eps;
    let outer = 2.0 + eps;
    let policy = policy_of(cfg);
    let origin = Point::zeros(d);
    let h = |y: f64| 1.0 - (a / y).powi(d as i32 - 2);
    let p_return = (b / outer).powi(d as i32 - 2) * h(b) / h(outer);
    let mut cursor = uniform_sphere_point(rng, &origin, 1.0);
    let mut paths = Vec::new();
    loop {
        let path = simulate_conditioned_escape(rng, &cursor, a, &policy, outer)?;
        let exit = snap_to_sphere(&Point::from_slice(path.last_position()), outer);
        paths.push(path);
        if rng.random::<f64>() >= p_return {
            break;
        }
        cursor = sample_entrance_point(rng, &exit, b)?;
    }
    let hull_dist = visited_hull_distance(&paths, eps)?;
    Ok(TrialOutcome {
        success: hull_dist <= eps,
        borderline: (hull_dist - eps).abs() <= IMPLICATION_MARGIN,
        ..TrialOutcome::default()
    })
}

/// Motions started on the sphere of radius 1 + eps about `center` for the
/// vacant-component events, simulated in centered coordinates and translated
/// afterwards.  Any path point with norm at most 1 - eps puts the whole
/// closed probe ball B(center, eps) inside one sausage ball (distances are at
/// most (1 - eps) + eps + ... <= 1 + 0), and the motion almost surely dips
/// strictly deeper right after first touching that sphere, so the count is
/// decided to be 0 at the first hit: the trial aborts there and the flag
/// reports it.
fn component_paths_around(
    rng: &mut ChaCha8Rng,
    cfg: &ExperimentConfig,
    eps: f64,
    center: &Point,
) -> Result<(Vec<PathSample>, bool)> {
    let d = cfg.dim;
    let policy = policy_of(cfg);
    let origin = Point::zeros(d);
    let mut paths = Vec::with_capacity(cfg.k_motions);
    let mut hit_inner = false;
    for _ in 0..cfg.k_motions {
        let start = uniform_sphere_point(rng, &origin, 1.0 + eps);
        let (mut path, hit) = simulate_resolved_motion(
            rng,
            &start,
            1.0 + eps,
            2.0 + eps,
            &[],
            Some(1.0 - eps),
            &policy,
        )?;
        if center.norm_sq() > 0.0 {
            for i in 0..path.len() {
                for j in 0..d {
                    path.positions[i * d + j] += center[j];
                }
            }
            for c in &mut path.crossings {
                for j in 0..d {
                    c.point.0[j] += center[j];
                }
            }
        }
        paths.push(path);
        if hit {
            hit_inner = true;
            break;
        }
    }
    Ok((paths, hit_inner))
}

/// Distance from a probe center within which sausage ball centers can affect
/// the component count (ball radius 1 plus the probe radius and grid band,
/// with one extra band of slack for the refinement pruning).
fn probe_cut(d: usize, eps: f64, gs: f64) -> f64 {
    eps + 1.0 + 2.0 * gs * (1.0 + (d as f64).sqrt())
}

fn trial_one_ball(
    rng: &mut ChaCha8Rng,
    cfg: &ExperimentConfig,
    eps: f64,
    check_implication: bool,
) -> Result<TrialOutcome> {
    let origin = Point::zeros(cfg.dim);
    let (paths, hit_inner) = component_paths_around(rng, cfg, eps, &origin)?;
    if hit_inner {
        // Probe ball fully covered: zero components, implication vacuous.
        return Ok(TrialOutcome::default());
    }
    let gs = cfg.grid_spacing_for(eps);
    let sausage =
        build_sausage_near(rng, &paths, 1.0, gs / 2.0, &origin, probe_cut(cfg.dim, eps, gs))?;
    let report = count_vacant_components(&origin, eps, &sausage, gs)?;
    let mut out = TrialOutcome {
        success: report.component_count >= 2,
        // The trial statistic is the predicate "two or more components", so
        // only bracket ambiguity that flips that predicate is reported.
        borderline: report.two_plus_ambiguous(),
        ..TrialOutcome::default()
    };
    if check_implication {
        let imp = check_hemiball_implication(&paths, &report, eps)?;
        out.borderline |= imp.borderline;
        if !imp.borderline {
            out.violations = imp.violations;
        }
        if !out.violations.is_empty() {
            out.record = Some(format!(
                "implication components={} violations={}",
                report.component_count,
                out.violations.join(" | ")
            ));
        }
    }
    Ok(out)
}

fn trial_several_balls(
    rng: &mut ChaCha8Rng,
    cfg: &ExperimentConfig,
    eps: f64,
) -> Result<TrialOutcome> {
    let gs = cfg.grid_spacing_for(eps);
    let mut success = true;
    let mut borderline = false;
    // Motions around one center stay within 2 + eps of it, and the centers
    // are more than 6 apart, so no motion's sausage can reach another
    // center's probe ball: the count at each center depends only on its own
    // motions, and each center gets its own focused sausage.
    for center in &cfg.centers {
        let (paths, hit_inner) = component_paths_around(rng, cfg, eps, center)?;
        if hit_inner {
            // This center's probe ball is fully covered: zero components.
            success = false;
            break;
        }
        let sausage =
            build_sausage_near(rng, &paths, 1.0, gs / 2.0, center, probe_cut(cfg.dim, eps, gs))?;
        let report = count_vacant_components(center, eps, &sausage, gs)?;
        borderline |= report.two_plus_ambiguous();
        if report.component_count < 2 {
            success = false;
            break;
        }
    }
    Ok(TrialOutcome {
        success,
        borderline,
        ..TrialOutcome::default()
    })
}

fn trial_excursion_local(
    rng: &mut ChaCha8Rng,
    cfg: &ExperimentConfig,
    eps: f64,
) -> Result<TrialOutcome> {
    let d = cfg.dim;
    let policy = policy_of(cfg);
    let origin = Point::zeros(d);
    let watched = [WatchedSphere::origin(d, 3.0)];
    let stop = StopSpec::new().exit_sphere(0);
    let mut paths = Vec::with_capacity(cfg.k_motions);
    for _ in 0..cfg.k_motions {
        let start = uniform_sphere_point(rng, &origin, 2.0);
        let (path, reason) = simulate_path_segment(rng, &start, &policy, &watched, &stop)?;
        if reason == StopReason::TimedOut {
            return Err(Error::InsufficientData(
                "excursion-local motion exhausted its step budget".into(),
            ));
        }
        paths.push(path);
    }
    let gs = cfg.grid_spacing_for(eps);
    let sausage =
        build_sausage_near(rng, &paths, 1.0, gs / 2.0, &origin, probe_cut(cfg.dim, eps, gs))?;
    let report = count_vacant_components(&origin, eps, &sausage, gs)?;
    Ok(TrialOutcome {
        success: report.component_count >= 2,
        borderline: report.two_plus_ambiguous(),
        ..TrialOutcome::default()
    })
}

fn trial_cascade_lemmas(
    rng: &mut ChaCha8Rng,
    cfg: &ExperimentConfig,
    eps: f64,
    master_seed: u64,
    trial: u64,
) -> Result<TrialOutcome> {
    let d = cfg.dim;
    let policy = policy_of(cfg);
    let origin = Point::zeros(d);
    let mut watch = vec![1.0 - eps, 1.0, 1.0 + eps];
    for r in dyadic_ranges(eps)? {
        watch.push(1.0 + r);
    }
    let paths: Vec<PathSample> = (0..cfg.k_motions)
        .map(|_| {
            let start = uniform_sphere_point(rng, &origin, 1.0);
            simulate_resolved_motion(rng, &start, 1.0 + eps, 2.0 + eps, &watch, None, &policy)
                .map(|(p, _)| p)
        })
        .collect::<Result<_>>()?;
    let mut state = run_cascade(&paths, eps)?;
    let (tau, trigger) = compute_tau(&mut state);
    state.tau = Some(tau);
    state.tau_trigger = trigger;
    let event_e = detect_event_e(&paths, eps)?;
    let g = detect_event_g(&paths, eps, cfg.step_max)?;
    let rep = verify_cascade_lemmas(&state, event_e, g.holds);
    // The small-radius event's ambiguity band is wide at the discretization
    // scale, but it only feeds one implication (E and G force a finite small
    // L); when that conclusion holds anyway, the ambiguity cannot change any
    // verdict, so it is not counted as borderline.
    let l_small = matches!(state.l_final, Some(l) if l <= cfg.dim);
    let g_ambiguity_matters = g.borderline && event_e && !l_small;
    let borderline = rep.borderline || g_ambiguity_matters;
    let violations = if borderline { Vec::new() } else { rep.violations };
    Ok(TrialOutcome {
        success: violations.is_empty(),
        borderline,
        record: Some(cascade_record(&state, master_seed, trial)),
        violations,
    })
}

fn trial_annulus(rng: &mut ChaCha8Rng, cfg: &ExperimentConfig) -> Result<usize> {
    let icfg = InterlacementConfig {
        dim: cfg.dim,
        alpha: cfg.alpha,
        big_r: cfg.annulus_outer,
        r_prime: cfg.annulus_outer + 1.0,
        watch_radii: vec![],
        step_max: cfg.step_max,
        step_min: cfg.step_min,
    };
    let sample = sample_local_interlacements(rng, &icfg, SamplingMode::IntroRecipe)?;
    vacant_components_annulus(
        &sample,
        cfg.annulus_inner,
        cfg.annulus_outer,
        cfg.grid_spacing.unwrap_or(0.5),
    )
}

/// Run one trial of the configured experiment at the given grid point.  The
/// RNG stream is a pure function of (master_seed, grid index, trial index).
pub fn run_single_trial(
    cfg: &ExperimentConfig,
    grid_idx: usize,
    eps: f64,
    trial: u64,
) -> Result<TrialOutcome> {
    let mut rng = trial_rng(cfg.master_seed, stream_id(grid_idx, trial));
    match cfg.event {
        EventId::EAndF => trial_e_f(&mut rng, cfg, eps, true, true),
        EventId::EOnly => trial_e_f(&mut rng, cfg, eps, true, false),
        EventId::FOnly => trial_e_f(&mut rng, cfg, eps, false, true),
        EventId::EAndFConditioned => trial_e_given_f(&mut rng, cfg, eps),
        EventId::OneBall => trial_one_ball(&mut rng, cfg, eps, false),
        EventId::HemiballImplication => trial_one_ball(&mut rng, cfg, eps, true),
        EventId::SeveralBalls => trial_several_balls(&mut rng, cfg, eps),
        EventId::ExcursionLocal => trial_excursion_local(&mut rng, cfg, eps),
        EventId::CascadeLemmas => {
            trial_cascade_lemmas(&mut rng, cfg, eps, cfg.master_seed, trial)
        }
        EventId::AnnulusCount => {
            let count = trial_annulus(&mut rng, cfg)?;
            Ok(TrialOutcome {
                // successes accumulate the raw counts for the mean estimate
                success: count > 0,
                record: Some(format!("annulus count={count}")),
                ..TrialOutcome::default()
            })
        }
        EventId::FormulaSuite => Err(Error::InvalidInput(
            "the formula suite runs through run_formula_suite, not trials".into(),
        )),
    }
}

// ---------------------------------------------------------------------------
// Orchestration
// ---------------------------------------------------------------------------

#[derive(Clone, Default)]
struct GridAccumulator {
    successes: u64,
    borderline: u64,
    violations: u64,
    /// annulus-count only: sum and sum of squares of the per-trial counts
    count_sum: f64,
    count_sq_sum: f64,
    bundles: Vec<String>,
    anomalies: u64,
}

const MAX_BUNDLES: usize = 32;

impl GridAccumulator {
    fn merge(mut self, other: GridAccumulator) -> GridAccumulator {
        self.successes += other.successes;
        self.borderline += other.borderline;
        self.violations += other.violations;
        self.count_sum += other.count_sum;
        self.count_sq_sum += other.count_sq_sum;
        self.anomalies += other.anomalies;
        for b in other.bundles {
            if self.bundles.len() < MAX_BUNDLES {
                self.bundles.push(b);
            }
        }
        self
    }
}

fn bundle_header(cfg: &ExperimentConfig, grid_idx: usize, eps: f64, trial: u64) -> String {
    format!(
        "bundle event={} dim={} k={} seed={} grid={} eps={} trial={} step_max={} \
         step_min={} grid_spacing={}",
        cfg.event.as_str(),
        cfg.dim,
        cfg.k_motions,
        cfg.master_seed,
        grid_idx,
        eps,
        trial,
        cfg.step_max,
        cfg.step_min,
        cfg.grid_spacing_for(eps),
    )
}

/// Execute the configured number of independent trials at every grid point.
/// Trials are distributed over a rayon work queue; every trial owns the RNG
/// stream derived from (master_seed, grid, trial), and per-point reduction is
/// commutative, so results are identical for any worker count.
pub fn run_trials(cfg: &ExperimentConfig) -> Result<EstimateResult> {
    cfg.validate()?;
    if cfg.event == EventId::FormulaSuite {
        return Err(Error::InvalidInput(
            "the formula suite runs through run_formula_suite, not trials".into(),
        ));
    }
    let mut rows = Vec::with_capacity(cfg.eps_grid.len());
    let mut bundles = Vec::new();
    for (grid_idx, &eps) in cfg.eps_grid.iter().enumerate() {
        let acc = (0..cfg.n_trials)
            .into_par_iter()
            .fold(GridAccumulator::default, |mut acc, trial| {
                match run_single_trial(cfg, grid_idx, eps, trial) {
                    Ok(out) => {
                        acc.successes += out.success as u64;
                        acc.borderline += out.borderline as u64;
                        if cfg.event == EventId::AnnulusCount {
                            let c = out
                                .record
                                .as_deref()
                                .and_then(|r| r.strip_prefix("annulus count="))
                                .and_then(|c| c.parse::<f64>().ok())
                                .unwrap_or(0.0);
                            acc.count_sum += c;
                            acc.count_sq_sum += c * c;
                        }
                        if !out.violations.is_empty() {
                            acc.violations += 1;
                            if acc.bundles.len() < MAX_BUNDLES {
                                let mut b = bundle_header(cfg, grid_idx, eps, trial);
                                if let Some(r) = &out.record {
                                    b.push('\n');
                                    b.push_str(r);
                                }
                                for v in &out.violations {
                                    b.push('\n');
                                    b.push_str("violation: ");
                                    b.push_str(v);
                                }
                                acc.bundles.push(b);
                            }
                        }
                    }
                    // Numeric anomalies are counted as borderline, never
                    // silently dropped.
                    Err(_) => {
                        acc.borderline += 1;
                        acc.anomalies += 1;
                    }
                }
                acc
            })
            .reduce(GridAccumulator::default, GridAccumulator::merge);
        let n = cfg.n_trials;
        let (p_hat, stderr) = if cfg.event == EventId::AnnulusCount {
            // p_hat carries the mean count, stderr its standard error.
            if n == 0 {
                (0.0, 0.0)
            } else {
                let mean = acc.count_sum / n as f64;
                let var = (acc.count_sq_sum / n as f64 - mean * mean).max(0.0);
                (mean, (var / n as f64).sqrt())
            }
        } else if n == 0 {
            (0.0, 0.0)
        } else {
            let p = acc.successes as f64 / n as f64;
            if cfg.event == EventId::EAndFConditioned {
                // Successes estimate the conditional probability; the
                // unconditional estimate multiplies by the closed-form
                // no-visit probability (exact, so it scales the error too).
                let f = f_probability(cfg.dim, eps);
                (f * p, f * binomial_stderr(p, n))
            } else {
                (p, binomial_stderr(p, n))
            }
        };
        // Deterministic bundle order: the parallel fold visits contiguous
        // index blocks, so sort by the trial id embedded in the header.
        let mut point_bundles = acc.bundles;
        point_bundles.sort();
        bundles.extend(point_bundles);
        rows.push(GridPointEstimate {
            eps,
            n,
            successes: if cfg.event == EventId::AnnulusCount {
                acc.count_sum as u64
            } else {
                acc.successes
            },
            p_hat,
            stderr,
            borderline: acc.borderline,
            violations: acc.violations,
        });
    }
    let slope = if cfg.event == EventId::AnnulusCount {
        None
    } else {
        fit_loglog_slope(
            &rows
                .iter()
                .map(|r| (r.eps, r.p_hat, r.successes))
                .collect::<Vec<_>>(),
        )
        .ok()
    };
    Ok(EstimateResult {
        rows,
        slope,
        bundles,
    })
}

/// Convenience wrapper: binomial estimate of one event at one grid point.
pub fn estimate_event_probability(
    event: EventId,
    dim: usize,
    eps: f64,
    k_motions: usize,
    n: u64,
    seed: u64,
) -> Result<(f64, f64)> {
    let mut cfg = ExperimentConfig::new(dim, event);
    cfg.eps_grid = vec![eps];
    cfg.k_motions = k_motions;
    cfg.n_trials = n;
    cfg.master_seed = seed;
    let res = run_trials(&cfg)?;
    let row = &res.rows[0];
    Ok((row.p_hat, row.stderr))
}

// ---------------------------------------------------------------------------
// Replay
// ---------------------------------------------------------------------------

/// Re-run the trial described by a bundle's header line and return its
/// outcome; the RNG stream reconstruction makes it bit-exact.
pub fn replay_bundle(text: &str) -> Result<TrialOutcome> {
    let header = text
        .lines()
        .next()
        .ok_or_else(|| Error::InvalidInput("empty bundle".into()))?;
    let mut fields: std::collections::HashMap<&str, &str> = std::collections::HashMap::new();
    for tok in header.split_whitespace().skip(1) {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| Error::InvalidInput(format!("malformed bundle token '{tok}'")))?;
        fields.insert(k, v);
    }
    let get = |k: &str| -> Result<&str> {
        fields
            .get(k)
            .copied()
            .ok_or_else(|| Error::InvalidInput(format!("bundle missing field '{k}'")))
    };
    let parse_f = |k: &str| -> Result<f64> {
        get(k)?
            .parse()
            .map_err(|_| Error::InvalidInput(format!("bundle field '{k}' is not a number")))
    };
    let event = EventId::parse(get("event")?)?;
    let dim: usize = get("dim")?
        .parse()
        .map_err(|_| Error::InvalidInput("bad dim".into()))?;
    let mut cfg = ExperimentConfig::new(dim, event);
    cfg.k_motions = get("k")?
        .parse()
        .map_err(|_| Error::InvalidInput("bad k".into()))?;
    cfg.master_seed = get("seed")?
        .parse()
        .map_err(|_| Error::InvalidInput("bad seed".into()))?;
    let eps = parse_f("eps")?;
    cfg.eps_grid = vec![eps];
    cfg.step_max = parse_f("step_max")?;
    cfg.step_min = parse_f("step_min")?;
    cfg.grid_spacing = Some(parse_f("grid_spacing")?);
    let grid: usize = get("grid")?
        .parse()
        .map_err(|_| Error::InvalidInput("bad grid index".into()))?;
    let trial: u64 = get("trial")?
        .parse()
        .map_err(|_| Error::InvalidInput("bad trial index".into()))?;
    run_single_trial(&cfg, grid, eps, trial)
}

// ---------------------------------------------------------------------------
// Formula verification suite
// ---------------------------------------------------------------------------

/// One closed-form check of the suite.
#[derive(Clone, Debug)]
pub struct FormulaCheck {
    pub name: String,
    /// closed-form target (or the p-value floor for chi-square checks)
    pub expected: f64,
    /// empirical value (or the chi-square p-value)
    pub observed: f64,
    /// allowed absolute deviation (0 for p-value checks: pass iff observed >
    /// expected)
    pub tolerance: f64,
    pub pass: bool,
}

/// Expected bin masses of the entrance angle on the sphere of radius `r`
/// seen from distance `rho`, conditioned on hitting: density proportional to
/// sin^{d-2}(theta) / (rho^2 + r^2 - 2 rho r cos theta)^{d/2}, integrated by
/// Simpson's rule per bin.  Independent of the sampler's own tables.
fn entrance_angle_bin_masses(d: usize, rho: f64, r: f64, edges: &[f64]) -> Vec<f64> {
    let dens = |theta: f64| -> f64 {
        theta.sin().powi(d as i32 - 2)
            / (rho * rho + r * r - 2.0 * rho * r * theta.cos()).powf(d as f64 / 2.0)
    };
    let integral = |a: f64, b: f64| -> f64 {
        let n = 256;
        let h = (b - a) / n as f64;
        let mut acc = 0.0;
        for i in 0..n {
            let x0 = a + i as f64 * h;
            acc += h / 6.0 * (dens(x0) + 4.0 * dens(x0 + h / 2.0) + dens(x0 + h));
        }
        acc
    };
    let masses: Vec<f64> = edges.windows(2).map(|w| integral(w[0], w[1])).collect();
    let total: f64 = integral(0.0, std::f64::consts::PI);
    masses.iter().map(|m| m / total).collect()
}

/// Monte Carlo verification of the closed forms: the annulus hitting
/// probability and the escape probability (from norm 2, inner radius 1,
/// outer radius 4), and chi-square goodness-of-fit of the entrance-angle and
/// entrance/exit pair-angle samplers.
pub fn run_formula_suite(dim: usize, n_trials: u64, master_seed: u64) -> Result<Vec<FormulaCheck>> {
    if dim < 3 {
        return Err(Error::InvalidInput("formula suite needs d >= 3".into()));
    }
    let d = dim;
    let mut start = Point::zeros(d);
    start.0[0] = 2.0;
    let p_annulus = hit_prob_annulus(&start, 1.0, 4.0)?;
    let p_escape = escape_prob(&start, 1.0)?;

    // Path-level frequencies: walk from norm 2 between the spheres 1 and 4;
    // exits of the sphere 4 resolve the remaining escape exactly.
    let policy = DtPolicy::from_spatial(0.2, 1e-4, d);
    let sim = |grid: usize| {
        (0..n_trials)
            .into_par_iter()
            .map(|trial| {
                let mut rng = trial_rng(master_seed, stream_id(grid, trial));
                let mut path = PathSample::new(d);
                path.watched = vec![
                    WatchedSphere::origin(d, 1.0),
                    WatchedSphere::origin(d, 4.0),
                ];
                path.push(0.0, start.as_slice());
                let stop = StopSpec::new().hit_sphere(0).exit_sphere(1);
                match extend_path_segment(&mut rng, &mut path, &policy, &stop) {
                    Ok(StopReason::Hit(_)) => (true, true),
                    Ok(StopReason::Exit(_)) => {
                        let exit =
                            snap_to_sphere(&Point::from_slice(path.last_position()), 4.0);
                        match resolve_return(&mut rng, &exit, 1.0) {
                            Ok(opt) => (false, opt.is_some()),
                            Err(_) => (false, false),
                        }
                    }
                    _ => (false, false),
                }
            })
            .fold(
                || (0u64, 0u64),
                |acc, (hit_before_4, hit_ever)| {
                    (acc.0 + hit_before_4 as u64, acc.1 + hit_ever as u64)
                },
            )
            .reduce(|| (0u64, 0u64), |a, b| (a.0 + b.0, a.1 + b.1))
    };
    let (hits_inner, hits_ever) = sim(0);
    let mut checks = Vec::new();
    // The closed form is the probability of reaching the outer sphere first;
    // the walk records hits of the inner sphere, so take the complement.
    let freq_annulus = 1.0 - hits_inner as f64 / n_trials.max(1) as f64;
    let freq_hit = hits_ever as f64 / n_trials.max(1) as f64;
    let tol_a = 3.0 * binomial_stderr(p_annulus, n_trials.max(1));
    checks.push(FormulaCheck {
        name: format!("annulus-hit d={d} |x|=2 r=1 R=4"),
        expected: p_annulus,
        observed: freq_annulus,
        tolerance: tol_a,
        pass: (freq_annulus - p_annulus).abs() <= tol_a,
    });
    let p_hit = 1.0 - p_escape;
    let tol_e = 3.0 * binomial_stderr(p_hit, n_trials.max(1));
    checks.push(FormulaCheck {
        name: format!("ball-hit d={d} |x|=2 r=1 (escape complement)"),
        expected: p_hit,
        observed: freq_hit,
        tolerance: tol_e,
        pass: (freq_hit - p_hit).abs() <= tol_e,
    });

    // Entrance-angle law vs the kernel density, binned chi-square.
    let n_bins = 40;
    let edges: Vec<f64> = (0..=n_bins)
        .map(|i| std::f64::consts::PI * i as f64 / n_bins as f64)
        .collect();
    let masses = entrance_angle_bin_masses(d, 2.0, 1.0, &edges);
    let counts = (0..n_trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = trial_rng(master_seed, stream_id(1, trial));
            let y = sample_entrance_point(&mut rng, &start, 1.0)
                .expect("entrance sampling from a valid exterior point");
            let cos_t = (point::dot(start.as_slice(), y.as_slice())
                / (start.norm() * y.norm()))
            .clamp(-1.0, 1.0);
            let theta = cos_t.acos();
            let mut bin = edges.partition_point(|&e| e <= theta).saturating_sub(1);
            bin = bin.min(n_bins - 1);
            bin
        })
        .fold(
            || vec![0u64; n_bins],
            |mut acc, bin| {
                acc[bin] += 1;
                acc
            },
        )
        .reduce(
            || vec![0u64; n_bins],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
                a
            },
        );
    let observed: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    let expected: Vec<f64> = masses.iter().map(|m| m * n_trials as f64).collect();
    let p_val = chi_square_pvalue(&observed, &expected, 5.0);
    checks.push(FormulaCheck {
        name: format!("entrance-angle-chi2 d={d} rho/r=2"),
        expected: 0.001,
        observed: p_val,
        tolerance: 0.0,
        pass: p_val > 0.001,
    });

    // Entrance/exit pair angle vs its closed-form CDF (d = 3 reduces to
    // sin(theta/2); higher d uses the same density family).
    let pair_counts = (0..n_trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = trial_rng(master_seed, stream_id(2, trial));
            let theta = sample_pair_angle(&mut rng, d);
            let mut bin = edges.partition_point(|&e| e <= theta).saturating_sub(1);
            bin = bin.min(n_bins - 1);
            bin
        })
        .fold(
            || vec![0u64; n_bins],
            |mut acc, bin| {
                acc[bin] += 1;
                acc
            },
        )
        .reduce(
            || vec![0u64; n_bins],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
                a
            },
        );
    let pair_observed: Vec<f64> = pair_counts.iter().map(|&c| c as f64).collect();
    let pair_expected: Vec<f64> = if d == 3 {
        edges
            .windows(2)
            .map(|w| ((w[1] / 2.0).sin() - (w[0] / 2.0).sin()) * n_trials as f64)
            .collect()
    } else {
        use crate::interlacements::pair_angle_cdf;
        edges
            .windows(2)
            .map(|w| (pair_angle_cdf(d, w[1]) - pair_angle_cdf(d, w[0])) * n_trials as f64)
            .collect()
    };
    let pair_p = chi_square_pvalue(&pair_observed, &pair_expected, 5.0);
    checks.push(FormulaCheck {
        name: format!("pair-angle-chi2 d={d}"),
        expected: 0.001,
        observed: pair_p,
        tolerance: 0.0,
        pass: pair_p > 0.001,
    });
    Ok(checks)
}

/// Render the formula suite as CSV.
pub fn formula_suite_csv(checks: &[FormulaCheck]) -> String {
    let mut s = String::from("check,expected,observed,tolerance,pass\n");
    for c in checks {
        writeln!(
            s,
            "{},{},{},{},{}",
            c.name, c.expected, c.observed, c.tolerance, c.pass
        )
        .expect("infallible write to String");
    }
    s
}

//! Riemannian solvers over the product of spheres (gradient descent with
//! exact line search, Polak-Ribiere+ conjugate gradient, Steihaug
//! trust-region) and the Euclidean regularized baseline. All emit
//! per-iteration traces.

use std::time::Instant;

use nalgebra::DMatrix;

use crate::error::{ObncError, Result};
use crate::losses;
use crate::manifold::ObliqueMatrix;
use crate::rng::SplitMix64;
use crate::ufm::{
    f_value, nc_metrics, nc_metrics_raw, riem_grad, riem_hess_apply, state_retract,
    train_accuracy_raw, TangentPair, UfmProblem, UfmState,
};

/// Golden-section line-search settings on the retracted ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineSearchConfig {
    /// Absolute width at which the bracket stops shrinking.
    pub tol: f64,
    /// Cap on bracket expansion.
    pub bracket_max: f64,
}

impl Default for LineSearchConfig {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            bracket_max: 1024.0,
        }
    }
}

/// Trust-region radius schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrustRegionConfig {
    pub radius0: f64,
    pub radius_max: f64,
    pub eta1: f64,
    pub eta2: f64,
    pub shrink: f64,
    pub grow: f64,
}

impl Default for TrustRegionConfig {
    fn default() -> Self {
        Self {
            radius0: 1.0,
            radius_max: 100.0,
            eta1: 0.1,
            eta2: 0.75,
            shrink: 0.25,
            grow: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub max_iters: usize,
    pub grad_tol: f64,
    pub seed: u64,
    pub line_search: LineSearchConfig,
    /// Steepest-descent restart period for conjugate gradient.
    pub cg_restart: usize,
    pub tr: TrustRegionConfig,
    pub record_every: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iters: 1000,
            grad_tol: 1e-8,
            seed: 0,
            line_search: LineSearchConfig::default(),
            cg_restart: 50,
            tr: TrustRegionConfig::default(),
            record_every: 1,
        }
    }
}

/// Fixed-step Euclidean baseline settings: weight/feature decay and the
/// step size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegularizedConfig {
    pub lambda_w: f64,
    pub lambda_h: f64,
    pub step: f64,
}

/// One recorded iterate. `nc3` and `accuracy` are NaN where undefined
/// (contrastive loss without a classifier).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub iter: usize,
    pub f: f64,
    pub grad_norm: f64,
    pub nc1: f64,
    pub nc2: f64,
    pub nc3: f64,
    pub accuracy: f64,
    pub elapsed_ms: f64,
}

/// Per-run record list plus the final iterate. `failure` carries a
/// step-failure or divergence message when the run halted early.
#[derive(Debug, Clone)]
pub struct SolverTrace {
    pub records: Vec<TraceRecord>,
    pub final_w: DMatrix<f64>,
    pub final_h: DMatrix<f64>,
    pub converged: bool,
    pub failure: Option<String>,
}

impl SolverTrace {
    /// The final iterate as a manifold state (Riemannian runs only).
    pub fn final_state(&self, problem: &UfmProblem) -> Result<UfmState> {
        UfmState::new(
            problem,
            ObliqueMatrix::new(self.final_w.clone())?,
            ObliqueMatrix::new(self.final_h.clone())?,
        )
    }

    pub fn final_record(&self) -> &TraceRecord {
        self.records.last().expect("trace has at least one record")
    }

    /// First recorded iteration with accuracy 1.0, if any.
    pub fn iters_to_perfect_accuracy(&self) -> Option<usize> {
        self.records
            .iter()
            .find(|r| r.accuracy >= 1.0)
            .map(|r| r.iter)
    }
}

fn record_state(
    problem: &UfmProblem,
    state: &UfmState,
    iter: usize,
    f: f64,
    grad_norm: f64,
    start: Instant,
) -> TraceRecord {
    let metrics = nc_metrics(problem, state);
    let accuracy = if problem.spec().kind.is_logit_based() {
        train_accuracy_raw(
            state.classifier().matrix(),
            state.features().matrix(),
            problem.layout(),
        )
    } else {
        f64::NAN
    };
    TraceRecord {
        iter,
        f,
        grad_norm,
        nc1: metrics.nc1,
        nc2: metrics.nc2,
        nc3: metrics.nc3.unwrap_or(f64::NAN),
        accuracy,
        elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
    }
}

/// Exact line search: bracket a decrease by doubling (or halving) the trial
/// step, then golden-section to `tol`. Returns the minimizing step and value.
fn golden_line_search(
    phi: &mut dyn FnMut(f64) -> f64,
    f0: f64,
    cfg: &LineSearchConfig,
) -> Result<(f64, f64)> {
    const MAX_EXPANSIONS: usize = 60;
    let mut s = 1.0f64.min(cfg.bracket_max);
    let mut fs = phi(s);
    let hi;
    if fs < f0 {
        let mut expansions = 0;
        loop {
            if 2.0 * s > cfg.bracket_max || expansions >= MAX_EXPANSIONS {
                hi = (2.0 * s).min(cfg.bracket_max);
                break;
            }
            let f2 = phi(2.0 * s);
            if f2 >= fs {
                hi = 2.0 * s;
                break;
            }
            s *= 2.0;
            fs = f2;
            expansions += 1;
        }
    } else {
        let mut halvings = 0;
        loop {
            s *= 0.5;
            halvings += 1;
            fs = phi(s);
            if fs < f0 {
                hi = 2.0 * s;
                break;
            }
            if halvings >= MAX_EXPANSIONS {
                return Err(ObncError::StepFailure {
                    expansions: halvings,
                });
            }
        }
    }

    // Golden-section on [0, hi]; track the best evaluated point.
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let (mut a, mut b) = (0.0f64, hi);
    let mut x1 = b - INV_PHI * (b - a);
    let mut x2 = a + INV_PHI * (b - a);
    let mut f1 = phi(x1);
    let mut f2 = phi(x2);
    let (mut best_t, mut best_f) = if fs < f0 { (s, fs) } else { (0.0, f0) };
    for &(t, f) in [(x1, f1), (x2, f2)].iter() {
        if f < best_f {
            best_t = t;
            best_f = f;
        }
    }
    while b - a > cfg.tol {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - INV_PHI * (b - a);
            f1 = phi(x1);
            if f1 < best_f {
                best_t = x1;
                best_f = f1;
            }
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + INV_PHI * (b - a);
            f2 = phi(x2);
            if f2 < best_f {
                best_t = x2;
                best_f = f2;
            }
        }
    }
    Ok((best_t, best_f))
}

struct RunState {
    trace: Vec<TraceRecord>,
    start: Instant,
    last_recorded: Option<usize>,
}

impl RunState {
    fn new() -> Self {
        Self {
            trace: Vec::new(),
            start: Instant::now(),
            last_recorded: None,
        }
    }

    fn record(
        &mut self,
        problem: &UfmProblem,
        state: &UfmState,
        iter: usize,
        f: f64,
        grad_norm: f64,
        every: usize,
        force: bool,
    ) {
        if !force && iter % every.max(1) != 0 {
            return;
        }
        if self.last_recorded == Some(iter) {
            return;
        }
        self.trace
            .push(record_state(problem, state, iter, f, grad_norm, self.start));
        self.last_recorded = Some(iter);
    }
}

enum Direction {
    SteepestDescent,
    ConjugateGradient,
}

fn descent_run(
    problem: &UfmProblem,
    init: &UfmState,
    config: &SolverConfig,
    kind: Direction,
) -> Result<SolverTrace> {
    let mut run = RunState::new();
    let mut state = init.clone();
    let mut converged = false;
    let mut failure = None;

    let mut prev_grad: Option<TangentPair> = None;
    let mut prev_dir: Option<TangentPair> = None;
    let mut since_restart = 0usize;

    let mut iter = 0usize;
    loop {
        let grad = riem_grad(problem, &state)?;
        let grad_norm = grad.w.norm() + grad.h.norm();
        let f = f_value(problem, &state)?;
        let stopping = grad_norm <= config.grad_tol || iter >= config.max_iters;
        run.record(
            problem,
            &state,
            iter,
            f,
            grad_norm,
            config.record_every,
            stopping,
        );
        if grad_norm <= config.grad_tol {
            converged = true;
            break;
        }
        if iter >= config.max_iters {
            break;
        }

        let mut dir = grad.scale(-1.0);
        if let Direction::ConjugateGradient = kind {
            if let (Some(pg), Some(pd)) = (&prev_grad, &prev_dir) {
                if since_restart < config.cg_restart {
                    // Transport by projection onto the current tangent space.
                    let tg = crate::ufm::state_project(&state, pg.w.matrix(), pg.h.matrix())?;
                    let td = crate::ufm::state_project(&state, pd.w.matrix(), pd.h.matrix())?;
                    let denom = pg.norm_squared();
                    if denom > 0.0 {
                        let beta = (grad.dot(&grad) - grad.dot(&tg)) / denom;
                        let beta = beta.max(0.0);
                        let candidate = grad.scale(-1.0).axpy(beta, &td);
                        if candidate.dot(&grad) < 0.0 {
                            dir = candidate;
                            since_restart += 1;
                        } else {
                            since_restart = 0;
                        }
                    }
                } else {
                    since_restart = 0;
                }
            }
        }

        let mut phi = |t: f64| {
            let moved = state_retract(&state, &dir, t).expect("tangent retraction is total");
            f_value(problem, &moved).expect("loss value is total on the manifold")
        };
        match golden_line_search(&mut phi, f, &config.line_search) {
            Ok((t, _)) => {
                state = state_retract(&state, &dir, t)?;
            }
            Err(err) => {
                failure = Some(err.to_string());
                run.record(problem, &state, iter, f, grad_norm, config.record_every, true);
                break;
            }
        }
        prev_grad = Some(grad);
        prev_dir = Some(dir);
        iter += 1;
    }

    Ok(SolverTrace {
        records: run.trace,
        final_w: state.classifier().matrix().clone(),
        final_h: state.features().matrix().clone(),
        converged,
        failure,
    })
}

/// Riemannian gradient descent with exact (golden-section) line search.
pub fn rgd(problem: &UfmProblem, init: &UfmState, config: &SolverConfig) -> Result<SolverTrace> {
    descent_run(problem, init, config, Direction::SteepestDescent)
}

/// Riemannian conjugate gradient (Polak-Ribiere+ with projection transport,
/// periodic steepest-descent restarts).
pub fn rcg(problem: &UfmProblem, init: &UfmState, config: &SolverConfig) -> Result<SolverTrace> {
    descent_run(problem, init, config, Direction::ConjugateGradient)
}

/// Steihaug truncated-CG solution of the trust-region subproblem. Returns
/// the step, the model decrease m(0) - m(s), and whether the boundary was hit.
fn steihaug(
    problem: &UfmProblem,
    state: &UfmState,
    grad: &TangentPair,
    radius: f64,
) -> Result<(TangentPair, f64, bool)> {
    let mut s = TangentPair::zeros_like(state);
    let mut r = grad.clone();
    let mut p = r.scale(-1.0);
    let r0_norm = r.norm();
    let stop = r0_norm * (0.1f64).min(r0_norm.sqrt());
    let max_cg = 250usize;
    let mut hit_boundary = false;

    let boundary_step = |s: &TangentPair, p: &TangentPair| -> f64 {
        let sp = s.dot(p);
        let pp = p.norm_squared();
        let ss = s.norm_squared();
        (-sp + (sp * sp + pp * (radius * radius - ss)).sqrt()) / pp
    };

    if r0_norm > 0.0 {
        let mut rr = r.norm_squared();
        for _ in 0..max_cg {
            let hp = riem_hess_apply(problem, state, &p)?;
            let curvature = p.dot(&hp);
            if curvature <= 0.0 {
                let t = boundary_step(&s, &p);
                s = s.axpy(t, &p);
                hit_boundary = true;
                break;
            }
            let alpha = rr / curvature;
            if s.axpy(alpha, &p).norm() >= radius {
                let t = boundary_step(&s, &p);
                s = s.axpy(t, &p);
                hit_boundary = true;
                break;
            }
            s = s.axpy(alpha, &p);
            r = r.axpy(alpha, &hp);
            let rr_new = r.norm_squared();
            if rr_new.sqrt() <= stop {
                break;
            }
            p = r.scale(-1.0).axpy(rr_new / rr, &p);
            rr = rr_new;
        }
    }

    let hs = riem_hess_apply(problem, state, &s)?;
    let decrease = -(grad.dot(&s) + 0.5 * s.dot(&hs));
    Ok((s, decrease, hit_boundary))
}

fn random_tangent(state: &UfmState, seed: u64) -> Result<TangentPair> {
    let d = state.classifier().nrows();
    let mut rng = SplitMix64::new(seed);
    let zw = DMatrix::from_fn(d, state.classifier().ncols(), |_, _| rng.next_gaussian());
    let zh = DMatrix::from_fn(d, state.features().ncols(), |_, _| rng.next_gaussian());
    crate::ufm::state_project(state, &zw, &zh)
}

/// Riemannian trust-region method with a Steihaug truncated-CG subproblem.
/// Rejected steps do not move the iterate.
pub fn rtr(problem: &UfmProblem, init: &UfmState, config: &SolverConfig) -> Result<SolverTrace> {
    let mut run = RunState::new();
    let mut state = init.clone();
    let mut radius = config.tr.radius0;
    let mut converged = false;

    // Spot-check that the Hessian operator is self-adjoint before trusting
    // the subproblem model.
    {
        let d1 = random_tangent(&state, config.seed ^ 0x7452_0001)?;
        let d2 = random_tangent(&state, config.seed ^ 0x7452_0002)?;
        let h1 = riem_hess_apply(problem, &state, &d1)?;
        let h2 = riem_hess_apply(problem, &state, &d2)?;
        let lhs = d1.dot(&h2);
        let rhs = d2.dot(&h1);
        let scale = d1.norm() * d2.norm();
        if (lhs - rhs).abs() > 1e-8 * scale.max(1.0) {
            return Err(ObncError::InternalConsistency(format!(
                "Hessian operator asymmetry: {lhs:.12e} vs {rhs:.12e}"
            )));
        }
    }

    let mut iter = 0usize;
    loop {
        let grad = riem_grad(problem, &state)?;
        let grad_norm = grad.w.norm() + grad.h.norm();
        let f = f_value(problem, &state)?;
        let stopping =
            grad_norm <= config.grad_tol || iter >= config.max_iters || radius < 1e-14;
        run.record(
            problem,
            &state,
            iter,
            f,
            grad_norm,
            config.record_every,
            stopping,
        );
        if grad_norm <= config.grad_tol {
            converged = true;
            break;
        }
        if iter >= config.max_iters || radius < 1e-14 {
            break;
        }

        let (step, decrease, hit_boundary) = steihaug(problem, &state, &grad, radius)?;
        let proposal = state_retract(&state, &step, 1.0)?;
        let f_new = f_value(problem, &proposal)?;
        let rho = if decrease > 0.0 {
            (f - f_new) / decrease
        } else {
            -1.0
        };
        if rho < config.tr.eta1 {
            radius *= config.tr.shrink;
        } else {
            state = proposal;
            if rho > config.tr.eta2 && hit_boundary {
                radius = (radius * config.tr.grow).min(config.tr.radius_max);
            }
        }
        iter += 1;
    }

    Ok(SolverTrace {
        records: run.trace,
        final_w: state.classifier().matrix().clone(),
        final_h: state.features().matrix().clone(),
        converged,
        failure: None,
    })
}

/// Fixed-step Euclidean gradient descent on the weight/feature-decay
/// regularized cross-entropy objective, without manifold constraints.
pub fn egd_regularized(
    problem: &UfmProblem,
    init_w: &DMatrix<f64>,
    init_h: &DMatrix<f64>,
    reg: &RegularizedConfig,
    config: &SolverConfig,
) -> Result<SolverTrace> {
    if reg.lambda_w <= 0.0 || reg.lambda_h <= 0.0 || reg.step <= 0.0 {
        return Err(ObncError::InvalidLayout(
            "regularized baseline needs positive decay and step".into(),
        ));
    }
    let layout = *problem.layout();
    let start = Instant::now();
    let mut w = init_w.clone();
    let mut h = init_h.clone();
    let mut records = Vec::new();
    let mut converged = false;
    let mut failure = None;
    let mut f0 = None;
    let mut last_recorded = None;

    let value_grad = |w: &DMatrix<f64>, h: &DMatrix<f64>| -> Result<(f64, DMatrix<f64>, DMatrix<f64>)> {
        let m = w.tr_mul(h);
        let (ce, g) = losses::ce_value_grad(&m, &layout)?;
        let f = ce + 0.5 * reg.lambda_w * w.norm_squared() + 0.5 * reg.lambda_h * h.norm_squared();
        let grad_w = h * g.transpose() + w * reg.lambda_w;
        let grad_h = w * &g + h * reg.lambda_h;
        Ok((f, grad_w, grad_h))
    };

    let mut iter = 0usize;
    loop {
        let (f, grad_w, grad_h) = value_grad(&w, &h)?;
        let grad_norm = (grad_w.norm_squared() + grad_h.norm_squared()).sqrt();
        let f0 = *f0.get_or_insert(f);

        let stopping = grad_norm <= config.grad_tol || iter >= config.max_iters;
        if stopping || iter % config.record_every.max(1) == 0 {
            if last_recorded != Some(iter) {
                let metrics = nc_metrics_raw(&w, &h, &layout, true);
                records.push(TraceRecord {
                    iter,
                    f,
                    grad_norm,
                    nc1: metrics.nc1,
                    nc2: metrics.nc2,
                    nc3: metrics.nc3.unwrap_or(f64::NAN),
                    accuracy: train_accuracy_raw(&w, &h, &layout),
                    elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
                });
                last_recorded = Some(iter);
            }
        }
        if !f.is_finite() || f > 10.0 * f0.max(1e-300) {
            failure = Some(
                ObncError::Divergence { iter, f, f0 }.to_string(),
            );
            break;
        }
        if grad_norm <= config.grad_tol {
            converged = true;
            break;
        }
        if iter >= config.max_iters {
            break;
        }
        w -= grad_w * reg.step;
        h -= grad_h * reg.step;
        iter += 1;
    }

    Ok(SolverTrace {
        records,
        final_w: w,
        final_h: h,
        converged,
        failure,
    })
}

impl TangentPair {
    /// self scaled by a constant.
    pub fn scale(&self, a: f64) -> TangentPair {
        TangentPair::from_raw(self.w.matrix() * a, self.h.matrix() * a)
    }

    /// self + a * other.
    pub fn axpy(&self, a: f64, other: &TangentPair) -> TangentPair {
        TangentPair::from_raw(
            self.w.matrix() + other.w.matrix() * a,
            self.h.matrix() + other.h.matrix() * a,
        )
    }
}

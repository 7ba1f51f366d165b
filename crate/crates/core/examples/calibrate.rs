use obnc::losses::LossSpec;
use obnc::solvers::{rgd, rcg, rtr, SolverConfig};
use obnc::ufm::{global_lower_bound, UfmProblem, UfmState};
use obnc::manifold::random_oblique;
use std::time::Instant;

fn main() {
    for (d, k, n, tau, tol) in [
        (100usize, 5usize, 5usize, 1.0f64, 1e-6f64),
        (100, 10, 5, 1.0, 1e-6),
        (100, 20, 5, 1.0, 1e-6),
        (100, 50, 5, 1.0, 1e-6),
        (100, 10, 5, 0.1, 1e-6),
        (100, 10, 5, 10.0, 1e-6),
    ] {
        let problem = UfmProblem::new(d, k, n, LossSpec::ce(tau).unwrap()).unwrap();
        let init = UfmState::new(&problem,
            random_oblique(d, k, 1), random_oblique(d, k * n, 2)).unwrap();
        let config = SolverConfig { max_iters: 4000, grad_tol: tol, record_every: 500, ..Default::default() };
        let t0 = Instant::now();
        let trace = rgd(&problem, &init, &config).unwrap();
        let fr = trace.final_record();
        let gap = fr.f - global_lower_bound(k, tau);
        println!("rgd d={d} K={k} tau={tau}: iters={} gap={gap:.3e} grad={:.2e} conv={} time={:.2}s",
            fr.iter, fr.grad_norm, trace.converged, t0.elapsed().as_secs_f64());
    }
    // solver race at K=10
    let problem = UfmProblem::new(100, 10, 5, LossSpec::ce(1.0).unwrap()).unwrap();
    let init = UfmState::new(&problem, random_oblique(100, 10, 11), random_oblique(100, 50, 12)).unwrap();
    let config = SolverConfig { max_iters: 4000, grad_tol: 1e-6, record_every: 1, ..Default::default() };
    type Solver = fn(&UfmProblem, &UfmState, &SolverConfig) -> obnc::Result<obnc::solvers::SolverTrace>;
    for (name, f) in [("rgd", rgd as Solver), ("rcg", rcg as Solver)] {
        let t0 = Instant::now();
        let trace = f(&problem, &init, &config).unwrap();
        let fr = trace.final_record();
        println!("{name}: iters={} gap={:.3e} time={:.2}s", fr.iter, fr.f - global_lower_bound(10, 1.0), t0.elapsed().as_secs_f64());
    }
    let t0 = Instant::now();
    let config_tr = SolverConfig { max_iters: 500, grad_tol: 1e-8, record_every: 1, ..Default::default() };
    let trace = rtr(&problem, &init, &config_tr).unwrap();
    let fr = trace.final_record();
    println!("rtr: iters={} gap={:.3e} time={:.2}s", fr.iter, fr.f - global_lower_bound(10, 1.0), t0.elapsed().as_secs_f64());
}

//! Bohmian trajectories of the exact time-dependent flow, with deviation
//! vector propagation for chaos diagnostics.
//!
//! The flow is `dx/dt = v(x, t) = Im(grad Psi / Psi)`, evaluated through the
//! Gaussian-stripped polynomial part of the field (identical ratio, better
//! conditioned near nodes). Deviation vectors follow the analytic variational
//! equations `d xi/dt = J(x, t) xi` with `J = dv/dx`; a finite-separation
//! two-trajectory mode exists for cross-validation.

use std::cell::Cell;

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::ode::{OdeError, OdeOptions, RhsError, Rk45};
use crate::wavefield::{
    eval_polynomial_part, field_scale, gaussian_log_weight, FieldSample, WavefunctionSpec,
};

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("point lies on a nodal line at t = {t} (|psi|^2 below machine floor)")]
    NodeSingularity { t: f64 },
    #[error("trajectory hit the node guard at t = {t} (min |psi| = {min_psi:.3e})")]
    NodeImpact { t: f64, min_psi: f64 },
    #[error("integration step budget exceeded at t = {t}")]
    StepLimitExceeded { t: f64 },
}

/// Integration options; tolerances apply to the embedded RK 5(4) pair.
#[derive(Debug, Clone, Copy)]
pub struct IntegratorOptions {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_step: f64,
    /// Minimum allowed `|phi|^2 / scale^2` before step halving kicks in.
    pub node_guard: f64,
    /// Uniform sampling interval for trajectory output and deviation
    /// renormalization (the `t0` of the stretching-number definition).
    pub sample_dt: f64,
    pub max_steps: u64,
}

impl Default for IntegratorOptions {
    fn default() -> Self {
        Self {
            abs_tol: 1e-12,
            rel_tol: 1e-10,
            max_step: 0.1,
            node_guard: 1e-14,
            sample_dt: 0.05,
            max_steps: 20_000_000,
        }
    }
}

impl IntegratorOptions {
    fn ode(&self) -> OdeOptions {
        OdeOptions {
            rel_tol: self.rel_tol,
            abs_tol: self.abs_tol,
            h_init: (self.sample_dt * 0.2).min(self.max_step),
            h_max: self.max_step,
            h_min: 1e-14,
            max_steps: self.max_steps,
        }
    }
}

/// One uniformly-spaced trajectory sample.
#[derive(Debug, Clone, Copy)]
pub struct TrajectoryState {
    pub t: f64,
    pub x: Vector3<f64>,
    /// Unit deviation vector after renormalization (when propagated).
    pub deviation: Option<Vector3<f64>>,
    /// Log of the pre-renormalization deviation norm accumulated over the
    /// sampling interval ending here; zero at the first sample.
    pub log_growth: f64,
    /// Running sum of `log_growth`.
    pub accumulated_log_stretch: f64,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IntegratorStats {
    pub accepted: u64,
    pub rejected: u64,
    pub evals: u64,
    /// Minimum |Psi| encountered along the run.
    pub min_psi: f64,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub samples: Vec<TrajectoryState>,
    pub stats: IntegratorStats,
}

/// How deviations are propagated by [`integrate_with_deviation`].
#[derive(Debug, Clone, Copy)]
pub enum DeviationMode {
    /// Analytic variational equations (primary path).
    Variational,
    /// Shadow trajectory at separation `delta`, renormalized at samples.
    FiniteSeparation { delta: f64 },
}

fn velocity_from_sample(s: &FieldSample) -> Option<Vector3<f64>> {
    let g = s.psi.norm_sqr();
    if !(g > 1e-280) {
        return None;
    }
    let inv = s.psi.conj() / g;
    let v = Vector3::new(
        (s.grad[0] * inv).im,
        (s.grad[1] * inv).im,
        (s.grad[2] * inv).im,
    );
    if v.iter().all(|c| c.is_finite()) {
        Some(v)
    } else {
        None
    }
}

fn jacobian_from_sample(s: &FieldSample) -> Option<Matrix3<f64>> {
    let g = s.psi.norm_sqr();
    if !(g > 1e-280) {
        return None;
    }
    let inv = s.psi.conj() / g;
    let inv2 = inv * inv;
    let mut j = Matrix3::zeros();
    for r in 0..3 {
        for c in 0..3 {
            j[(r, c)] = (s.hess[(r, c)] * inv - s.grad[r] * s.grad[c] * inv2).im;
        }
    }
    if j.iter().all(|c| c.is_finite()) {
        Some(j)
    } else {
        None
    }
}

/// Bohmian velocity `v = Im(grad Psi / Psi)` via the polynomial-part path.
pub fn bohmian_velocity(
    spec: &WavefunctionSpec,
    x: &Vector3<f64>,
    t: f64,
) -> Result<Vector3<f64>, DynamicsError> {
    let s = eval_polynomial_part(spec, x, t);
    velocity_from_sample(&s).ok_or(DynamicsError::NodeSingularity { t })
}

/// Analytic velocity Jacobian `dv_i/dx_j` from the field gradient and
/// Hessian (quotient rule); no finite differences.
pub fn velocity_jacobian(
    spec: &WavefunctionSpec,
    x: &Vector3<f64>,
    t: f64,
) -> Result<Matrix3<f64>, DynamicsError> {
    let s = eval_polynomial_part(spec, x, t);
    jacobian_from_sample(&s).ok_or(DynamicsError::NodeSingularity { t })
}

struct GuardCells {
    min_psi: Cell<f64>,
    guard_tripped: Cell<bool>,
}

impl GuardCells {
    fn new() -> Self {
        Self {
            min_psi: Cell::new(f64::INFINITY),
            guard_tripped: Cell::new(false),
        }
    }
}

/// Shared field evaluation for the RHS closures: polynomial-part sample plus
/// guard bookkeeping. Returns `None` to request step halving.
fn guarded_sample(
    spec: &WavefunctionSpec,
    x: &Vector3<f64>,
    t: f64,
    guard_rel2: f64,
    scale2: f64,
    cells: &GuardCells,
) -> Option<FieldSample> {
    let s = eval_polynomial_part(spec, x, t);
    let g = s.psi.norm_sqr();
    let abs_psi = gaussian_log_weight(spec, x).exp() * g.sqrt();
    if abs_psi < cells.min_psi.get() {
        cells.min_psi.set(abs_psi);
    }
    if g < guard_rel2 * scale2 {
        cells.guard_tripped.set(true);
        return None;
    }
    Some(s)
}

fn map_ode_err(e: OdeError<DynamicsError>, cells: &GuardCells) -> DynamicsError {
    match e {
        OdeError::Rhs(inner) => inner,
        OdeError::StepLimit { t } => DynamicsError::StepLimitExceeded { t },
        OdeError::StepSizeUnderflow { t } => {
            if cells.guard_tripped.get() {
                DynamicsError::NodeImpact {
                    t,
                    min_psi: cells.min_psi.get(),
                }
            } else {
                DynamicsError::StepLimitExceeded { t }
            }
        }
    }
}

fn sample_times(t_span: (f64, f64), dt: f64) -> Vec<f64> {
    let (t0, t1) = t_span;
    let span = t1 - t0;
    let n = (span / dt).abs().round().max(1.0);
    // Snap to a uniform grid; the last sample is t0 + n*dt ~= t1.
    let n = if ((n * dt) - span.abs()).abs() < 1e-9 * span.abs().max(1.0) {
        n as usize
    } else {
        (span / dt).abs().floor() as usize
    };
    let dir = span.signum();
    (0..=n).map(|k| t0 + dir * k as f64 * dt).collect()
}

/// Integrate a Bohmian trajectory over `t_span`, sampling every
/// `opts.sample_dt`. The starting point must not lie on a node.
pub fn integrate_trajectory(
    spec: &WavefunctionSpec,
    x0: &Vector3<f64>,
    t_span: (f64, f64),
    opts: &IntegratorOptions,
) -> Result<Trajectory, DynamicsError> {
    let scale2 = field_scale(spec, t_span.0).powi(2);
    let cells = GuardCells::new();
    let rhs = |t: f64, y: &[f64; 3]| -> Result<[f64; 3], RhsError<DynamicsError>> {
        let x = Vector3::new(y[0], y[1], y[2]);
        let s = guarded_sample(spec, &x, t, opts.node_guard, scale2, &cells)
            .ok_or(RhsError::Retry)?;
        let v = velocity_from_sample(&s).ok_or(RhsError::Retry)?;
        Ok([v[0], v[1], v[2]])
    };
    let mut stepper = Rk45::new(rhs, t_span.0, [x0[0], x0[1], x0[2]], opts.ode());
    let mut samples = Vec::new();
    samples.push(TrajectoryState {
        t: t_span.0,
        x: *x0,
        deviation: None,
        log_growth: 0.0,
        accumulated_log_stretch: 0.0,
    });
    for &tk in sample_times(t_span, opts.sample_dt).iter().skip(1) {
        stepper
            .advance_to(tk, |_| {})
            .map_err(|e| map_ode_err(e, &cells))?;
        let y = stepper.y();
        samples.push(TrajectoryState {
            t: tk,
            x: Vector3::new(y[0], y[1], y[2]),
            deviation: None,
            log_growth: 0.0,
            accumulated_log_stretch: 0.0,
        });
    }
    let s = stepper.stats();
    Ok(Trajectory {
        samples,
        stats: IntegratorStats {
            accepted: s.accepted,
            rejected: s.rejected,
            evals: s.evals,
            min_psi: cells.min_psi.get(),
        },
    })
}

/// Integrate a trajectory together with a deviation vector, renormalizing the
/// deviation at every sample instant and accumulating log norms.
pub fn integrate_with_deviation(
    spec: &WavefunctionSpec,
    x0: &Vector3<f64>,
    xi0: &Vector3<f64>,
    t_span: (f64, f64),
    opts: &IntegratorOptions,
    mode: DeviationMode,
) -> Result<Trajectory, DynamicsError> {
    let scale2 = field_scale(spec, t_span.0).powi(2);
    let cells = GuardCells::new();
    let xi0 = xi0.normalize();

    let y0: [f64; 6] = match mode {
        DeviationMode::Variational => [x0[0], x0[1], x0[2], xi0[0], xi0[1], xi0[2]],
        DeviationMode::FiniteSeparation { delta } => {
            let y = x0 + delta * xi0;
            [x0[0], x0[1], x0[2], y[0], y[1], y[2]]
        }
    };

    let rhs = |t: f64, y: &[f64; 6]| -> Result<[f64; 6], RhsError<DynamicsError>> {
        let x = Vector3::new(y[0], y[1], y[2]);
        let s = guarded_sample(spec, &x, t, opts.node_guard, scale2, &cells)
            .ok_or(RhsError::Retry)?;
        let v = velocity_from_sample(&s).ok_or(RhsError::Retry)?;
        match mode {
            DeviationMode::Variational => {
                let j = jacobian_from_sample(&s).ok_or(RhsError::Retry)?;
                let xi = Vector3::new(y[3], y[4], y[5]);
                let dxi = j * xi;
                Ok([v[0], v[1], v[2], dxi[0], dxi[1], dxi[2]])
            }
            DeviationMode::FiniteSeparation { .. } => {
                let xb = Vector3::new(y[3], y[4], y[5]);
                let sb = guarded_sample(spec, &xb, t, opts.node_guard, scale2, &cells)
                    .ok_or(RhsError::Retry)?;
                let vb = velocity_from_sample(&sb).ok_or(RhsError::Retry)?;
                Ok([v[0], v[1], v[2], vb[0], vb[1], vb[2]])
            }
        }
    };

    let mut stepper = Rk45::new(rhs, t_span.0, y0, opts.ode());
    let mut samples = Vec::new();
    samples.push(TrajectoryState {
        t: t_span.0,
        x: *x0,
        deviation: Some(xi0),
        log_growth: 0.0,
        accumulated_log_stretch: 0.0,
    });
    let mut acc = 0.0;
    for &tk in sample_times(t_span, opts.sample_dt).iter().skip(1) {
        stepper
            .advance_to(tk, |_| {})
            .map_err(|e| map_ode_err(e, &cells))?;
        let mut y = *stepper.y();
        let x = Vector3::new(y[0], y[1], y[2]);
        let (unit, log_growth) = match mode {
            DeviationMode::Variational => {
                let xi = Vector3::new(y[3], y[4], y[5]);
                let norm = xi.norm();
                let unit = xi / norm;
                (unit, norm.ln())
            }
            DeviationMode::FiniteSeparation { delta } => {
                let sep = Vector3::new(y[3] - y[0], y[4] - y[1], y[5] - y[2]);
                let norm = sep.norm();
                (sep / norm, (norm / delta).ln())
            }
        };
        // Renormalize in the integrator state.
        match mode {
            DeviationMode::Variational => {
                y[3] = unit[0];
                y[4] = unit[1];
                y[5] = unit[2];
            }
            DeviationMode::FiniteSeparation { delta } => {
                y[3] = y[0] + delta * unit[0];
                y[4] = y[1] + delta * unit[1];
                y[5] = y[2] + delta * unit[2];
            }
        }
        stepper.set_state(tk, y);
        acc += log_growth;
        samples.push(TrajectoryState {
            t: tk,
            x,
            deviation: Some(unit),
            log_growth,
            accumulated_log_stretch: acc,
        });
    }
    let s = stepper.stats();
    Ok(Trajectory {
        samples,
        stats: IntegratorStats {
            accepted: s.accepted,
            rejected: s.rejected,
            evals: s.evals,
            min_psi: cells.min_psi.get(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wavefield::QuantumNumbers;
    use num_complex::Complex64;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn demo() -> WavefunctionSpec {
        WavefunctionSpec::demo_superposition([1.0, 1.0, 1.0])
    }

    fn single_mode() -> WavefunctionSpec {
        WavefunctionSpec::new(
            vec![(Complex64::new(1.0, 0.0), QuantumNumbers::new(0, 1, 1))],
            [1.0, 1.2, 0.9],
        )
        .unwrap()
    }

    fn rand_point(rng: &mut StdRng, r: f64) -> Vector3<f64> {
        Vector3::new(
            rng.gen_range(-r..r),
            rng.gen_range(-r..r),
            rng.gen_range(-r..r),
        )
    }

    #[test]
    fn single_mode_velocity_is_zero() {
        let spec = single_mode();
        let mut rng = StdRng::seed_from_u64(1);
        for _ in 0..20 {
            let x = rand_point(&mut rng, 2.0);
            if let Ok(v) = bohmian_velocity(&spec, &x, 2.2) {
                assert!(v.norm() < 1e-13, "v = {v:?}");
            }
            if let Ok(j) = velocity_jacobian(&spec, &x, 2.2) {
                assert!(j.norm() < 1e-12);
            }
        }
    }

    #[test]
    fn velocity_matches_phase_gradient() {
        // v = grad S with S the (branch-safe, relative) phase of Psi.
        let spec = demo();
        let mut rng = StdRng::seed_from_u64(2);
        let mut checked = 0;
        while checked < 10 {
            let x0 = rand_point(&mut rng, 1.5);
            let t = rng.gen_range(0.0..5.0);
            let psi0 = crate::wavefield::eval_polynomial_part(&spec, &x0, t).psi;
            if psi0.norm() < 1e-3 {
                continue;
            }
            let v = bohmian_velocity(&spec, &x0, t).unwrap();
            let h = 1e-5;
            for i in 0..3 {
                let phase = |xi: f64| {
                    let mut x = x0;
                    x[i] = xi;
                    let p = crate::wavefield::eval_polynomial_part(&spec, &x, t).psi;
                    (p * psi0.conj()).arg()
                };
                let g = (phase(x0[i] + h) - phase(x0[i] - h)) / (2.0 * h);
                assert!(
                    (v[i] - g).abs() < 1e-6 * v.norm().max(1.0),
                    "component {i}: {} vs {}",
                    v[i],
                    g
                );
            }
            checked += 1;
        }
    }

    #[test]
    fn velocity_agrees_with_full_field_ratio() {
        let spec = demo();
        let x = Vector3::new(-0.7, -1.1, 1.3);
        let v_poly = bohmian_velocity(&spec, &x, 0.0).unwrap();
        let s = crate::wavefield::eval_field(&spec, &x, 0.0);
        let g = s.psi.norm_sqr();
        let v_full = Vector3::new(
            (s.grad[0] * s.psi.conj()).im / g,
            (s.grad[1] * s.psi.conj()).im / g,
            (s.grad[2] * s.psi.conj()).im / g,
        );
        assert!((v_poly - v_full).norm() < 1e-10 * v_full.norm().max(1.0));
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let spec = demo();
        let mut rng = StdRng::seed_from_u64(3);
        let mut checked = 0;
        while checked < 10 {
            let x0 = rand_point(&mut rng, 1.5);
            let t = rng.gen_range(0.0..5.0);
            if crate::wavefield::eval_polynomial_part(&spec, &x0, t).psi.norm() < 1e-2 {
                continue;
            }
            let j = velocity_jacobian(&spec, &x0, t).unwrap();
            let h = 1e-5;
            for c in 0..3 {
                let vp = {
                    let mut x = x0;
                    x[c] += h;
                    bohmian_velocity(&spec, &x, t).unwrap()
                };
                let vm = {
                    let mut x = x0;
                    x[c] -= h;
                    bohmian_velocity(&spec, &x, t).unwrap()
                };
                let fd = (vp - vm) / (2.0 * h);
                for r in 0..3 {
                    assert!(
                        (j[(r, c)] - fd[r]).abs() < 1e-5 * j.norm().max(1.0),
                        "J[{r},{c}] = {} vs fd {}",
                        j[(r, c)],
                        fd[r]
                    );
                }
            }
            checked += 1;
        }
    }

    #[test]
    fn jacobian_trace_equals_divergence() {
        let spec = demo();
        let mut rng = StdRng::seed_from_u64(4);
        for _ in 0..10 {
            let x = rand_point(&mut rng, 1.5);
            let t = rng.gen_range(0.0..5.0);
            let s = crate::wavefield::eval_polynomial_part(&spec, &x, t);
            if s.psi.norm() < 1e-2 {
                continue;
            }
            let j = velocity_jacobian(&spec, &x, t).unwrap();
            // div v = Im(lap/psi - sum_i (d_i psi)^2 / psi^2), assembled
            // independently of the per-entry Jacobian path.
            let inv = s.psi.conj() / s.psi.norm_sqr();
            let sum_sq = s.grad[0] * s.grad[0] + s.grad[1] * s.grad[1] + s.grad[2] * s.grad[2];
            let div = (s.laplacian() * inv - sum_sq * inv * inv).im;
            assert!((j.trace() - div).abs() < 1e-11 * div.abs().max(1.0));
        }
    }

    #[test]
    fn single_mode_trajectory_is_static() {
        let spec = single_mode();
        let x0 = Vector3::new(0.5, -0.3, 0.8);
        let traj =
            integrate_trajectory(&spec, &x0, (0.0, 3.0), &IntegratorOptions::default()).unwrap();
        for s in &traj.samples {
            assert!((s.x - x0).norm() < 1e-12);
        }
    }

    #[test]
    fn single_mode_stretching_is_zero() {
        let spec = single_mode();
        let traj = integrate_with_deviation(
            &spec,
            &Vector3::new(0.5, -0.3, 0.8),
            &Vector3::new(1.0, 0.0, 0.0),
            (0.0, 2.0),
            &IntegratorOptions::default(),
            DeviationMode::Variational,
        )
        .unwrap();
        for s in &traj.samples {
            assert_eq!(s.log_growth, 0.0);
        }
    }

    #[test]
    fn forward_backward_returns_to_start() {
        let spec = demo();
        let x0 = Vector3::new(-0.7, -1.1, 1.3);
        let opts = IntegratorOptions {
            rel_tol: 1e-11,
            abs_tol: 1e-13,
            ..Default::default()
        };
        let fwd = integrate_trajectory(&spec, &x0, (0.0, 4.0), &opts).unwrap();
        let xe = fwd.samples.last().unwrap().x;
        let back = integrate_trajectory(&spec, &xe, (4.0, 0.0), &opts).unwrap();
        let xr = back.samples.last().unwrap().x;
        assert!(
            (xr - x0).norm() < 1e-6,
            "round trip error {}",
            (xr - x0).norm()
        );
    }

    #[test]
    fn tolerance_refinement_is_consistent() {
        let spec = demo();
        let x0 = Vector3::new(-0.7, -1.1, 1.3);
        let run = |rel: f64, abs: f64| {
            let opts = IntegratorOptions {
                rel_tol: rel,
                abs_tol: abs,
                ..Default::default()
            };
            integrate_trajectory(&spec, &x0, (0.0, 5.0), &opts)
                .unwrap()
                .samples
                .last()
                .unwrap()
                .x
        };
        let a = run(1e-9, 1e-11);
        let b = run(5e-10, 5e-12);
        // Path length over [0, 5] is a few units; the self-convergence bound
        // is 10x the coarse run's global error estimate rel_tol * path scale.
        let mut path = 0.0;
        let traj =
            integrate_trajectory(&spec, &x0, (0.0, 5.0), &IntegratorOptions::default()).unwrap();
        for w in traj.samples.windows(2) {
            path += (w[1].x - w[0].x).norm();
        }
        assert!(
            (a - b).norm() < 10.0 * 1e-9 * path.max(1.0),
            "diff {} path {path}",
            (a - b).norm()
        );
    }
}

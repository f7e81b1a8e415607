//! Embedded Dormand-Prince 5(4) integrator with PI step control, FSAL and
//! 4th-order dense output.
//!
//! The right-hand side may ask for a retry (`RhsError::Retry`) to force step
//! halving, e.g. when a trajectory enters a guarded region around a node; the
//! step is rejected and retried until `h_min`, at which point integration
//! aborts with `StepSizeUnderflow`. Works in both time directions.

use thiserror::Error;

#[derive(Debug, Clone, Copy)]
pub struct OdeOptions {
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Initial |step| guess.
    pub h_init: f64,
    pub h_max: f64,
    /// Below this |step| the integration aborts.
    pub h_min: f64,
    pub max_steps: u64,
}

impl Default for OdeOptions {
    fn default() -> Self {
        Self {
            rel_tol: 1e-10,
            abs_tol: 1e-12,
            h_init: 1e-3,
            h_max: 0.1,
            h_min: 1e-14,
            max_steps: 20_000_000,
        }
    }
}

/// Outcome a right-hand side can signal besides a derivative.
#[derive(Debug)]
pub enum RhsError<E> {
    /// Reject the current step attempt and retry with half the step size.
    Retry,
    /// Abort the integration.
    Fatal(E),
}

#[derive(Debug, Error)]
pub enum OdeError<E> {
    #[error("step size underflow at t = {t}")]
    StepSizeUnderflow { t: f64 },
    #[error("step limit exceeded at t = {t}")]
    StepLimit { t: f64 },
    #[error(transparent)]
    Rhs(E),
}

#[derive(Debug, Clone, Copy, Default)]
pub struct OdeStats {
    pub accepted: u64,
    pub rejected: u64,
    pub evals: u64,
}

// Dormand-Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
// 5th-order solution weights (b2 = 0).
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
// Error weights b - b_hat.
const E1: f64 = B1 - 5179.0 / 57600.0;
const E3: f64 = B3 - 7571.0 / 16695.0;
const E4: f64 = B4 - 393.0 / 640.0;
const E5: f64 = B5 - -92097.0 / 339200.0;
const E6: f64 = B6 - 187.0 / 2100.0;
const E7: f64 = -1.0 / 40.0;
// Dense-output weights (Hairer & Wanner DOPRI5).
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

fn lc<const N: usize>(terms: &[(f64, &[f64; N])]) -> [f64; N] {
    let mut out = [0.0; N];
    for (w, v) in terms {
        for i in 0..N {
            out[i] += w * v[i];
        }
    }
    out
}

fn add<const N: usize>(a: &[f64; N], b: &[f64; N]) -> [f64; N] {
    let mut out = *a;
    for i in 0..N {
        out[i] += b[i];
    }
    out
}

type Rhs<'a, const N: usize, E> =
    Box<dyn FnMut(f64, &[f64; N]) -> Result<[f64; N], RhsError<E>> + 'a>;

pub struct Rk45<'a, const N: usize, E> {
    f: Rhs<'a, N, E>,
    opts: OdeOptions,
    t: f64,
    y: [f64; N],
    h: f64,
    k1: Option<[f64; N]>,
    stats: OdeStats,
    // Dense-output state for the last accepted step.
    dense: Option<Dense<N>>,
}

struct Dense<const N: usize> {
    t_old: f64,
    h: f64,
    r1: [f64; N],
    r2: [f64; N],
    r3: [f64; N],
    r4: [f64; N],
    r5: [f64; N],
}

impl<'a, const N: usize, E> Rk45<'a, N, E> {
    pub fn new(
        f: impl FnMut(f64, &[f64; N]) -> Result<[f64; N], RhsError<E>> + 'a,
        t0: f64,
        y0: [f64; N],
        opts: OdeOptions,
    ) -> Self {
        Self {
            f: Box::new(f),
            opts,
            t: t0,
            y: y0,
            h: opts.h_init.abs(),
            k1: None,
            stats: OdeStats::default(),
            dense: None,
        }
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn y(&self) -> &[f64; N] {
        &self.y
    }

    pub fn stats(&self) -> OdeStats {
        self.stats
    }

    /// Replace the state and invalidate FSAL/dense caches.
    pub fn set_state(&mut self, t: f64, y: [f64; N]) {
        self.t = t;
        self.y = y;
        self.k1 = None;
        self.dense = None;
    }

    fn eval(&mut self, t: f64, y: &[f64; N]) -> Result<[f64; N], RhsError<E>> {
        self.stats.evals += 1;
        (self.f)(t, y)
    }

    /// Advance by one accepted step of signed size at most `h_cap`.
    /// `dir` is +1.0 or -1.0.
    fn step(&mut self, dir: f64, h_cap: f64) -> Result<(), OdeError<E>> {
        let mut h = self.h.min(self.opts.h_max).min(h_cap).max(0.0);
        if h <= 0.0 {
            h = self.opts.h_min;
        }
        loop {
            if self.stats.accepted + self.stats.rejected >= self.opts.max_steps {
                return Err(OdeError::StepLimit { t: self.t });
            }
            if h < self.opts.h_min {
                return Err(OdeError::StepSizeUnderflow { t: self.t });
            }
            let hs = dir * h;
            match self.try_step(hs) {
                Ok(StepTrial::Accept { t_new, y_new, k7, err }) => {
                    self.stats.accepted += 1;
                    self.t = t_new;
                    self.y = y_new;
                    self.k1 = Some(k7);
                    // PI-flavored controller on the 5(4) pair.
                    let scale = if err > 0.0 {
                        (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
                    } else {
                        5.0
                    };
                    self.h = (h * scale).min(self.opts.h_max);
                    return Ok(());
                }
                Ok(StepTrial::Reject { err }) => {
                    self.stats.rejected += 1;
                    let scale = (0.9 * err.powf(-0.2)).clamp(0.1, 0.9);
                    h *= scale;
                }
                Err(RhsError::Retry) => {
                    self.stats.rejected += 1;
                    self.k1 = None; // FSAL value may be inside the bad region
                    h *= 0.5;
                }
                Err(RhsError::Fatal(e)) => return Err(OdeError::Rhs(e)),
            }
        }
    }

    fn try_step(&mut self, h: f64) -> Result<StepTrial<N>, RhsError<E>> {
        let (t, y) = (self.t, self.y);
        let k1 = match self.k1 {
            Some(k) => k,
            None => self.eval(t, &y)?,
        };
        let y2 = add(&y, &lc(&[(h * A21, &k1)]));
        let k2 = self.eval(t + C[1] * h, &y2)?;
        let y3 = add(&y, &lc(&[(h * A31, &k1), (h * A32, &k2)]));
        let k3 = self.eval(t + C[2] * h, &y3)?;
        let y4 = add(&y, &lc(&[(h * A41, &k1), (h * A42, &k2), (h * A43, &k3)]));
        let k4 = self.eval(t + C[3] * h, &y4)?;
        let y5 = add(
            &y,
            &lc(&[
                (h * A51, &k1),
                (h * A52, &k2),
                (h * A53, &k3),
                (h * A54, &k4),
            ]),
        );
        let k5 = self.eval(t + C[4] * h, &y5)?;
        let y6 = add(
            &y,
            &lc(&[
                (h * A61, &k1),
                (h * A62, &k2),
                (h * A63, &k3),
                (h * A64, &k4),
                (h * A65, &k5),
            ]),
        );
        let k6 = self.eval(t + C[5] * h, &y6)?;
        let y_new = add(
            &y,
            &lc(&[
                (h * B1, &k1),
                (h * B3, &k3),
                (h * B4, &k4),
                (h * B5, &k5),
                (h * B6, &k6),
            ]),
        );
        let t_new = t + h;
        let k7 = self.eval(t_new, &y_new)?;
        let err_vec = lc(&[
            (h * E1, &k1),
            (h * E3, &k3),
            (h * E4, &k4),
            (h * E5, &k5),
            (h * E6, &k6),
            (h * E7, &k7),
        ]);
        let mut err = 0.0;
        for i in 0..N {
            let sc = self.opts.abs_tol + self.opts.rel_tol * y[i].abs().max(y_new[i].abs());
            let e = err_vec[i] / sc;
            err += e * e;
        }
        err = (err / N as f64).sqrt();
        if err <= 1.0 {
            // Dense-output polynomial coefficients for this step.
            let delta = lc(&[(1.0, &y_new), (-1.0, &y)]);
            let r3 = lc(&[(h, &k1), (-1.0, &delta)]);
            let r4 = lc(&[(1.0, &delta), (-h, &k7), (-1.0, &r3)]);
            let r5 = lc(&[
                (h * D1, &k1),
                (h * D3, &k3),
                (h * D4, &k4),
                (h * D5, &k5),
                (h * D6, &k6),
                (h * D7, &k7),
            ]);
            self.dense = Some(Dense {
                t_old: t,
                h,
                r1: y,
                r2: delta,
                r3,
                r4,
                r5,
            });
            Ok(StepTrial::Accept {
                t_new,
                y_new,
                k7,
                err,
            })
        } else {
            Ok(StepTrial::Reject { err })
        }
    }

    /// One accepted step in direction `dir` (+1/-1), capped only by `h_max`.
    pub fn step_once(&mut self, dir: f64) -> Result<(), OdeError<E>> {
        self.step(dir, f64::INFINITY)
    }

    /// Integrate to exactly `t_target`, calling `on_step` after each accepted
    /// step (with the stepper borrowed immutably for interpolation).
    pub fn advance_to(
        &mut self,
        t_target: f64,
        mut on_step: impl FnMut(&Self),
    ) -> Result<(), OdeError<E>> {
        let dir = (t_target - self.t).signum();
        if dir == 0.0 || (t_target - self.t).abs() == 0.0 {
            return Ok(());
        }
        while (t_target - self.t) * dir > 0.0 {
            let remaining = (t_target - self.t).abs();
            self.step(dir, remaining)?;
            // Snap when the clamp made us land on the target.
            if (t_target - self.t).abs() < 1e-14 * self.t.abs().max(1.0) {
                self.t = t_target;
            }
            on_step(self);
        }
        Ok(())
    }

    /// Span of the last accepted step.
    pub fn last_step_span(&self) -> Option<(f64, f64)> {
        self.dense.as_ref().map(|d| (d.t_old, d.t_old + d.h))
    }

    /// Dense-output interpolation at `t_q` inside the last accepted step.
    pub fn interpolate(&self, t_q: f64) -> [f64; N] {
        let d = self.dense.as_ref().expect("no accepted step to interpolate");
        let th = (t_q - d.t_old) / d.h;
        let th1 = 1.0 - th;
        // r1 + th*(r2 + th1*(r3 + th*(r4 + th1*r5)))
        let mut out = [0.0; N];
        for i in 0..N {
            out[i] = d.r1[i]
                + th * (d.r2[i] + th1 * (d.r3[i] + th * (d.r4[i] + th1 * d.r5[i])));
        }
        out
    }
}

enum StepTrial<const N: usize> {
    Accept {
        t_new: f64,
        y_new: [f64; N],
        k7: [f64; N],
        err: f64,
    },
    Reject {
        err: f64,
    },
}

/// Fixed-step integration with the 5th-order formula (no error control).
/// Used by convergence-order tests.
pub fn integrate_fixed<const N: usize, E>(
    mut f: impl FnMut(f64, &[f64; N]) -> Result<[f64; N], E>,
    t0: f64,
    y0: [f64; N],
    t1: f64,
    n_steps: usize,
) -> Result<[f64; N], E> {
    let h = (t1 - t0) / n_steps as f64;
    let mut t = t0;
    let mut y = y0;
    for _ in 0..n_steps {
        let k1 = f(t, &y)?;
        let k2 = f(t + C[1] * h, &add(&y, &lc(&[(h * A21, &k1)])))?;
        let k3 = f(t + C[2] * h, &add(&y, &lc(&[(h * A31, &k1), (h * A32, &k2)])))?;
        let k4 = f(
            t + C[3] * h,
            &add(&y, &lc(&[(h * A41, &k1), (h * A42, &k2), (h * A43, &k3)])),
        )?;
        let k5 = f(
            t + C[4] * h,
            &add(
                &y,
                &lc(&[
                    (h * A51, &k1),
                    (h * A52, &k2),
                    (h * A53, &k3),
                    (h * A54, &k4),
                ]),
            ),
        )?;
        let k6 = f(
            t + C[5] * h,
            &add(
                &y,
                &lc(&[
                    (h * A61, &k1),
                    (h * A62, &k2),
                    (h * A63, &k3),
                    (h * A64, &k4),
                    (h * A65, &k5),
                ]),
            ),
        )?;
        y = add(
            &y,
            &lc(&[
                (h * B1, &k1),
                (h * B3, &k3),
                (h * B4, &k4),
                (h * B5, &k5),
                (h * B6, &k6),
            ]),
        );
        t += h;
    }
    Ok(y)
}

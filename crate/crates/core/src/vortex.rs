//! Second-order structure of the co-moving quantum flow around a node:
//! Taylor expansion in the local frame, quadratic flow coefficients and their
//! symmetries, averaged spiral and drift laws, Hopf bifurcation scans and
//! limit-cycle detection in the frozen planar flow.
//!
//! In frame coordinates `(u, v, w)` (normal, binormal, tangent) the time
//! regularized co-moving flow truncated at second order reads
//!
//! ```text
//! du/dtau = -A v + A200 u^2 + A020 v^2 + A002 w^2 + A110 uv + A011 vw
//! dv/dtau =  A u + B200 u^2 + B020 v^2 + B002 w^2 + B101 uw + B110 uv
//! dw/dtau =        C200 u^2 + C020 v^2 + C110 uv + C101 uw + C011 vw
//! ```
//!
//! with algebraic identities `A011 = -B101`, `C101 = -2 A002`,
//! `C011 = -2 B002` that the coefficient builder reproduces (and tests check)
//! rather than assumes.

use nalgebra::Vector3;
use serde::Serialize;
use thiserror::Error;

use crate::nodal::NodalPoint;
use crate::ode::{OdeError, OdeOptions, RhsError, Rk45};
use crate::wavefield::{eval_polynomial_part, WavefunctionSpec};

#[derive(Debug, Error)]
pub enum VortexError {
    #[error("degenerate node: first-order coefficients do not define a rotation")]
    DegenerateNode,
    #[error("zero rotation coefficient A; averaged analysis inapplicable")]
    ZeroRotation,
    #[error("spiral law blows up at finite angle {phi:.6}")]
    Blowup { phi: f64 },
    #[error("no convergence in limit-cycle search")]
    NoConvergence,
}

/// Taylor coefficients `a_ijk + i b_ijk` of the (polynomial-part) field at a
/// node, in frame coordinates, for all `i + j + k <= 2`; plus the node
/// velocity components in the F-plane.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct LocalExpansion {
    pub a000: f64,
    pub b000: f64,
    pub a100: f64,
    pub b100: f64,
    pub a010: f64,
    pub b010: f64,
    pub a001: f64,
    pub b001: f64,
    pub a200: f64,
    pub b200: f64,
    pub a020: f64,
    pub b020: f64,
    pub a002: f64,
    pub b002: f64,
    pub a110: f64,
    pub b110: f64,
    pub a101: f64,
    pub b101: f64,
    pub a011: f64,
    pub b011: f64,
    pub vu: f64,
    pub vv: f64,
}

impl LocalExpansion {
    /// Second-order polynomial reconstruction of the field at local `(u,v,w)`.
    pub fn eval(&self, uvw: &Vector3<f64>) -> num_complex::Complex64 {
        let (u, v, w) = (uvw[0], uvw[1], uvw[2]);
        let re = self.a000
            + self.a100 * u
            + self.a010 * v
            + self.a001 * w
            + self.a200 * u * u
            + self.a020 * v * v
            + self.a002 * w * w
            + self.a110 * u * v
            + self.a101 * u * w
            + self.a011 * v * w;
        let im = self.b000
            + self.b100 * u
            + self.b010 * v
            + self.b001 * w
            + self.b200 * u * u
            + self.b020 * v * v
            + self.b002 * w * w
            + self.b110 * u * v
            + self.b101 * u * w
            + self.b011 * v * w;
        num_complex::Complex64::new(re, im)
    }

    /// Largest |second-order coefficient|.
    pub fn max_second_order(&self) -> f64 {
        [
            self.a200, self.b200, self.a020, self.b020, self.a002, self.b002, self.a110,
            self.b110, self.a101, self.b101, self.a011, self.b011,
        ]
        .iter()
        .fold(0.0f64, |m, c| m.max(c.abs()))
    }

    /// Smallest |in-plane first-order coefficient|.
    pub fn min_first_order_inplane(&self) -> f64 {
        [self.a100, self.b100, self.a010, self.b010]
            .iter()
            .fold(f64::INFINITY, |m, c| m.min(c.abs()))
    }
}

/// Rotate the analytic gradient/Hessian of the polynomial-part field into the
/// node's frame axes. Hessian entries are halved for the squared monomials.
pub fn local_expansion(
    spec: &WavefunctionSpec,
    p: &NodalPoint,
) -> Result<LocalExpansion, VortexError> {
    let s = eval_polynomial_part(spec, &p.r0, p.t);
    let (n, b, t) = (&p.frame.normal, &p.frame.binormal, &p.frame.tangent);
    let dir = |d: &Vector3<f64>| s.grad[0] * d[0] + s.grad[1] * d[1] + s.grad[2] * d[2];
    let quad = |a: &Vector3<f64>, c: &Vector3<f64>| {
        let mut acc = num_complex::Complex64::new(0.0, 0.0);
        for i in 0..3 {
            for j in 0..3 {
                acc += s.hess[(i, j)] * a[i] * c[j];
            }
        }
        acc
    };
    let gu = dir(n);
    let gv = dir(b);
    let gw = dir(t);
    let huu = quad(n, n);
    let hvv = quad(b, b);
    let hww = quad(t, t);
    let huv = quad(n, b);
    let huw = quad(n, t);
    let hvw = quad(b, t);
    if gu.norm().max(gv.norm()) == 0.0 {
        return Err(VortexError::DegenerateNode);
    }
    let (vu, vv) = p.velocity_uv();
    Ok(LocalExpansion {
        a000: s.psi.re,
        b000: s.psi.im,
        a100: gu.re,
        b100: gu.im,
        a010: gv.re,
        b010: gv.im,
        a001: gw.re,
        b001: gw.im,
        a200: 0.5 * huu.re,
        b200: 0.5 * huu.im,
        a020: 0.5 * hvv.re,
        b020: 0.5 * hvv.im,
        a002: 0.5 * hww.re,
        b002: 0.5 * hww.im,
        a110: huv.re,
        b110: huv.im,
        a101: huw.re,
        b101: huw.im,
        a011: hvw.re,
        b011: hvw.im,
        vu,
        vv,
    })
}

/// Quadratic coefficients of the truncated reduced co-moving flow.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct FlowCoefficients {
    pub a: f64,
    pub a200: f64,
    pub a020: f64,
    pub a002: f64,
    pub a110: f64,
    pub a011: f64,
    pub b200: f64,
    pub b020: f64,
    pub b002: f64,
    pub b101: f64,
    pub b110: f64,
    pub c200: f64,
    pub c020: f64,
    pub c011: f64,
    pub c101: f64,
    pub c110: f64,
}

/// Closed-form quadratic flow coefficients from a local expansion.
/// Every coefficient is built from its own formula; the symmetry identities
/// `A011 = -B101`, `C101 = -2 A002`, `C011 = -2 B002` come out algebraically.
pub fn flow_coefficients(e: &LocalExpansion) -> FlowCoefficients {
    let LocalExpansion {
        a100,
        b100,
        a010,
        b010,
        a200,
        b200,
        a020,
        b020,
        a002,
        b002,
        a110,
        b110,
        a101,
        b101,
        a011,
        b011,
        vu,
        vv,
        ..
    } = *e;
    let g11 = a100 * a100 + b100 * b100;
    let g22 = a010 * a010 + b010 * b010;
    let g12 = a100 * a010 + b100 * b010;
    FlowCoefficients {
        a: a100 * b010 - a010 * b100,
        a011: a010 * b101 + a011 * b100 - a100 * b011 - a101 * b010,
        a110: 2.0 * (a010 * b200 - a200 * b010) - 2.0 * vu * g12,
        a020: a010 * b110 + a020 * b100 - a100 * b020 - a110 * b010 - vu * g22,
        a002: a002 * b100 - a100 * b002,
        a200: a100 * b200 - a200 * b100 - vu * g11,
        b200: a100 * b110 - a110 * b100 + a200 * b010 - a010 * b200 - vv * g11,
        b002: a002 * b010 - a010 * b002,
        b020: a010 * b020 - a020 * b010 - vv * g22,
        b101: a100 * b011 - a011 * b100 + a101 * b010 - a010 * b101,
        b110: 2.0 * (a100 * b020 - a020 * b100) - 2.0 * vv * g12,
        c200: a100 * b101 - a101 * b100,
        c020: a010 * b011 - a011 * b010,
        c011: 2.0 * (a010 * b002 - a002 * b010),
        c101: 2.0 * (a100 * b002 - a002 * b100),
        c110: a010 * b101 - a101 * b010 + a100 * b011 - a011 * b100,
    }
}

impl FlowCoefficients {
    /// Truncated reduced flow `(du, dv, dw)/dtau` at local `(u, v, w)`.
    pub fn quadratic_rhs(&self, uvw: &Vector3<f64>) -> Vector3<f64> {
        let (u, v, w) = (uvw[0], uvw[1], uvw[2]);
        Vector3::new(
            -self.a * v
                + self.a200 * u * u
                + self.a020 * v * v
                + self.a002 * w * w
                + self.a110 * u * v
                + self.a011 * v * w,
            self.a * u
                + self.b200 * u * u
                + self.b020 * v * v
                + self.b002 * w * w
                + self.b101 * u * w
                + self.b110 * u * v,
            self.c200 * u * u
                + self.c020 * v * v
                + self.c110 * u * v
                + self.c101 * u * w
                + self.c011 * v * w,
        )
    }

    /// Same flow with the `A002 w^2` and `B002 w^2` terms dropped (the form
    /// used by the averaged in-plane derivation).
    pub fn quadratic_rhs_no_w2(&self, uvw: &Vector3<f64>) -> Vector3<f64> {
        let mut f = self.quadratic_rhs(uvw);
        f[0] -= self.a002 * uvw[2] * uvw[2];
        f[1] -= self.b002 * uvw[2] * uvw[2];
        f
    }

    pub fn max_abs_quadratic(&self) -> f64 {
        [
            self.a200, self.a020, self.a002, self.a110, self.a011, self.b200, self.b020,
            self.b002, self.b101, self.b110, self.c200, self.c020, self.c011, self.c101,
            self.c110,
        ]
        .iter()
        .fold(0.0f64, |m, c| m.max(c.abs()))
    }

    /// Radial cylindrical coefficient `c2(phi)`: `dR/dtau = c2(phi) R^2 + ...`
    /// on `w = 0`. Derived by evaluating the flow on the unit circle, so the
    /// closed-form averages can be validated against it by quadrature.
    pub fn c2(&self, phi: f64) -> f64 {
        let (c, s) = (phi.cos(), phi.sin());
        let f = self.quadratic_rhs(&Vector3::new(c, s, 0.0));
        c * f[0] + s * f[1]
    }

    /// Azimuthal coefficient `d1(phi)`: `dphi/dtau = A + d1(phi) R + h1 w`.
    pub fn d1(&self, phi: f64) -> f64 {
        let (c, s) = (phi.cos(), phi.sin());
        let f = self.quadratic_rhs(&Vector3::new(c, s, 0.0));
        (c * f[1] - s * f[0]) - self.a
    }

    /// Out-of-plane source `e2(phi)`: `dw/dtau = e2(phi) R^2 + k2(phi) R w`.
    pub fn e2(&self, phi: f64) -> f64 {
        let (c, s) = (phi.cos(), phi.sin());
        self.quadratic_rhs(&Vector3::new(c, s, 0.0))[2]
    }

    /// Out-of-plane damping `k2(phi)`.
    pub fn k2(&self, phi: f64) -> f64 {
        let (c, s) = (phi.cos(), phi.sin());
        let base = self.quadratic_rhs(&Vector3::new(c, s, 0.0))[2];
        self.quadratic_rhs(&Vector3::new(c, s, 1.0))[2] - base
    }
}

/// Averaged cubic radial coefficient
/// `<f3> = [(A110 + 2 B020) A020 + A200 (A110 - 2 B200) - B110 (B020 + B200)] / (8 A^2)`.
///
/// Sign changes of `<f3>` along the line (or in time) mark Hopf bifurcations.
pub fn f3_average(c: &FlowCoefficients) -> Result<f64, VortexError> {
    if c.a == 0.0 || !c.a.is_finite() {
        return Err(VortexError::ZeroRotation);
    }
    Ok(
        ((c.a110 + 2.0 * c.b020) * c.a020 + c.a200 * (c.a110 - 2.0 * c.b200)
            - c.b110 * (c.b020 + c.b200))
            / (8.0 * c.a * c.a),
    )
}

/// `<e2>` by trapezoid quadrature of `e2(phi)` over a period (exact for the
/// trigonometric polynomial involved).
pub fn e2_average(c: &FlowCoefficients) -> f64 {
    let n = 64;
    (0..n)
        .map(|i| c.e2(std::f64::consts::TAU * i as f64 / n as f64))
        .sum::<f64>()
        / n as f64
}

/// Averaged spiral radius `R(phi) = R0 / sqrt(1 - 2 R0^2 <f3> (phi - phi0))`.
pub fn spiral_radius(r0: f64, phi0: f64, phi: f64, f3_avg: f64) -> Result<f64, VortexError> {
    let den = 1.0 - 2.0 * r0 * r0 * f3_avg * (phi - phi0);
    if den <= 0.0 {
        return Err(VortexError::Blowup { phi });
    }
    Ok(r0 / den.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SpiralSense {
    Counterclockwise,
    Clockwise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum NodeType {
    Attractor,
    Repellor,
    Center,
}

/// Averaged in-plane behavior around the node.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SpiralPrediction {
    pub f3_avg: f64,
    pub a: f64,
    pub sense: SpiralSense,
    pub node_type: NodeType,
    /// Drift envelope slope `<e2> / (<f3> A)`; infinite in the center case.
    pub drift_slope: f64,
}

/// Classify the node from the flow coefficients. The radius law grows
/// forward in time iff `<f3> A > 0`, so that sign means repellor and
/// `<f3> A < 0` attractor (the center case is the measure-zero boundary).
pub fn spiral_prediction(c: &FlowCoefficients) -> Result<SpiralPrediction, VortexError> {
    let f3 = f3_average(c)?;
    let sense = if c.a > 0.0 {
        SpiralSense::Counterclockwise
    } else {
        SpiralSense::Clockwise
    };
    // <f3> carries (quadratic/A)^2 units; compare against that scale.
    let f3_scale = (c.max_abs_quadratic() / c.a.abs()).powi(2).max(1e-300);
    let node_type = if f3.abs() <= 1e-12 * f3_scale {
        NodeType::Center
    } else if f3 * c.a < 0.0 {
        NodeType::Attractor
    } else {
        NodeType::Repellor
    };
    let fa = f3 * c.a;
    let drift_slope = if fa == 0.0 || node_type == NodeType::Center {
        f64::INFINITY
    } else {
        e2_average(c) / fa
    };
    Ok(SpiralPrediction {
        f3_avg: f3,
        a: c.a,
        sense,
        node_type,
        drift_slope,
    })
}

/// Drift envelope `w = w0 + (<e2>/(<f3> A)) ln(R/R0)`.
pub fn drift_envelope(
    w0: f64,
    r: f64,
    r0: f64,
    e2_avg: f64,
    f3_avg: f64,
    a: f64,
) -> Result<f64, VortexError> {
    if f3_avg * a == 0.0 {
        return Err(VortexError::ZeroRotation);
    }
    Ok(w0 + e2_avg / (f3_avg * a) * (r / r0).ln())
}

/// Out-of-plane drift by quadrature over the averaged in-plane solutions:
///
/// ```text
/// w(tau) = w0 + exp(K(tau)) * Int_0^tau e2(phibar) Rbar^2 exp(-K) dtau',
/// K(tau) = Int_0^tau k2(phibar) Rbar dtau',  phibar = phi0 + A tau.
/// ```
pub fn drift_numeric(
    c: &FlowCoefficients,
    r0: f64,
    phi0: f64,
    w0: f64,
    tau: f64,
) -> Result<f64, VortexError> {
    let f3 = f3_average(c)?;
    let period = std::f64::consts::TAU / c.a.abs();
    let n_per_period = 96usize;
    let dt = period / n_per_period as f64;
    let steps = (tau / dt).ceil().max(1.0) as usize;
    let dt = tau / steps as f64;
    let rbar = |tt: f64| -> Result<f64, VortexError> {
        let den = 1.0 - 2.0 * r0 * r0 * f3 * c.a * tt;
        if den <= 0.0 {
            return Err(VortexError::Blowup {
                phi: phi0 + c.a * tt,
            });
        }
        Ok(r0 / den.sqrt())
    };
    // Trapezoid accumulation of K and of the weighted source integral.
    let mut k_acc = 0.0f64;
    let mut i_acc = 0.0f64;
    let eval = |tt: f64| -> Result<(f64, f64), VortexError> {
        let r = rbar(tt)?;
        let phi = phi0 + c.a * tt;
        Ok((c.k2(phi) * r, c.e2(phi) * r * r))
    };
    let (mut kd_prev, mut src_prev) = eval(0.0)?;
    let mut w_int_prev = src_prev * (-k_acc).exp();
    for i in 1..=steps {
        let tt = i as f64 * dt;
        let (kd, src) = eval(tt)?;
        k_acc += 0.5 * dt * (kd_prev + kd);
        let w_int = src * (-k_acc).exp();
        i_acc += 0.5 * dt * (w_int_prev + w_int);
        kd_prev = kd;
        src_prev = src;
        w_int_prev = w_int;
    }
    let _ = src_prev;
    Ok(w0 + k_acc.exp() * i_acc)
}

/// Fast-node margin: `max(|Vu|, |Vv|) * min(first-order) / max(second-order)`.
/// Values above 1 satisfy the fast-node condition required for a nearby
/// X-point; 0 for a stationary node (theory inapplicable).
pub fn vfast_diagnostic(e: &LocalExpansion) -> f64 {
    let vmax = e.vu.abs().max(e.vv.abs());
    if vmax == 0.0 {
        return 0.0;
    }
    let min1 = e.min_first_order_inplane();
    let max2 = e.max_second_order();
    if max2 == 0.0 {
        return f64::INFINITY;
    }
    vmax * min1 / max2
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum HopfKind {
    /// Along the nodal line at fixed time.
    Space,
    /// At a fixed node as time varies.
    Time,
}

/// A sign change of `<f3>` bracketed by two scan samples.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct HopfEvent {
    pub kind: HopfKind,
    pub bracket: (f64, f64),
    /// Root estimate inside the bracket.
    pub location: f64,
    pub f3_before: f64,
    pub f3_after: f64,
}

/// Sign-change brackets of an ordered `(parameter, <f3>)` scan, with the root
/// located by linear interpolation. NaN samples (failed nodes) are skipped.
pub fn detect_hopf(scan: &[(f64, f64)], kind: HopfKind) -> Vec<HopfEvent> {
    let clean: Vec<&(f64, f64)> = scan.iter().filter(|(_, f)| f.is_finite()).collect();
    let mut events = Vec::new();
    for w in clean.windows(2) {
        let (p0, f0) = *w[0];
        let (p1, f1) = *w[1];
        if f0 == 0.0 || f0 * f1 >= 0.0 {
            continue;
        }
        let location = p0 + (p1 - p0) * f0 / (f0 - f1);
        events.push(HopfEvent {
            kind,
            bracket: (p0, p1),
            location,
            f3_before: f0,
            f3_after: f1,
        });
    }
    events
}

/// Like [`detect_hopf`] but each bracket is refined by bisection of the
/// supplied evaluator (returning None poisons the bracket, which is kept at
/// its interpolated estimate).
pub fn detect_hopf_refined(
    scan: &[(f64, f64)],
    kind: HopfKind,
    mut f3_at: impl FnMut(f64) -> Option<f64>,
) -> Vec<HopfEvent> {
    let mut events = detect_hopf(scan, kind);
    for ev in &mut events {
        let (mut lo, mut hi) = ev.bracket;
        let (mut flo, mut fhi) = (ev.f3_before, ev.f3_after);
        let mut ok = true;
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            match f3_at(mid) {
                Some(fm) if fm.is_finite() => {
                    if flo * fm <= 0.0 {
                        hi = mid;
                        fhi = fm;
                    } else {
                        lo = mid;
                        flo = fm;
                    }
                }
                _ => {
                    ok = false;
                    break;
                }
            }
            if (hi - lo).abs() < 1e-12 * (ev.bracket.1 - ev.bracket.0).abs() {
                break;
            }
        }
        let _ = fhi;
        if ok {
            ev.location = 0.5 * (lo + hi);
        }
    }
    events
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CycleStability {
    Attracting,
    Repelling,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct LimitCycle {
    /// Fixed-point radius of the return map on the reference ray.
    pub radius: f64,
    /// Return-map slope at the fixed point (< 1 attracting, > 1 repelling).
    pub map_slope: f64,
    pub stability: CycleStability,
}

type NoRhsErr = std::convert::Infallible;

/// One full turn of the planar flow from `(r, 0)`; returns the radius at the
/// next crossing of the positive-u ray (same rotation orientation).
fn return_map(
    field: &impl Fn(f64, f64) -> (f64, f64),
    r: f64,
) -> Result<f64, VortexError> {
    let rhs = |_t: f64, y: &[f64; 2]| -> Result<[f64; 2], RhsError<NoRhsErr>> {
        let (du, dv) = field(y[0], y[1]);
        if du.is_finite() && dv.is_finite() {
            Ok([du, dv])
        } else {
            Err(RhsError::Retry)
        }
    };
    // Estimate the rotation rate at the start to bound step sizes.
    let (du0, dv0) = field(r, 0.0);
    let omega = (r * dv0 - 0.0 * du0) / (r * r);
    if !(omega.abs() > 0.0) {
        return Err(VortexError::ZeroRotation);
    }
    let period = std::f64::consts::TAU / omega.abs();
    let opts = OdeOptions {
        rel_tol: 1e-12,
        abs_tol: 1e-16 * r,
        h_init: period / 200.0,
        h_max: period / 24.0, // keeps per-step angle advance well below pi
        h_min: 1e-18 * period,
        max_steps: 2_000_000,
    };
    let mut stepper = Rk45::new(rhs, 0.0, [r, 0.0], opts);
    let mut angle_prev = 0.0f64;
    let mut total = 0.0f64;
    let target = std::f64::consts::TAU * omega.signum();
    let wrap = |mut d: f64| {
        while d > std::f64::consts::PI {
            d -= std::f64::consts::TAU;
        }
        while d < -std::f64::consts::PI {
            d += std::f64::consts::TAU;
        }
        d
    };
    loop {
        stepper
            .step_once(1.0)
            .map_err(|_: OdeError<NoRhsErr>| VortexError::NoConvergence)?;
        let y = stepper.y();
        let angle = y[1].atan2(y[0]);
        let d = wrap(angle - angle_prev);
        let total_before = total;
        total += d;
        if (total - target) * omega.signum() >= 0.0 {
            // The crossing sits inside this accepted step; bisect the dense
            // output on the unwrapped angle.
            let (ta, tb) = stepper.last_step_span().unwrap();
            let deficit = |tt: f64, st: &Rk45<2, NoRhsErr>| {
                let yq = st.interpolate(tt);
                let aq = yq[1].atan2(yq[0]);
                (total_before + wrap(aq - angle_prev) - target) * omega.signum()
            };
            let mut lo = ta;
            let mut hi = tb;
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                if deficit(mid, &stepper) >= 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            let yq = stepper.interpolate(0.5 * (lo + hi));
            return Ok(yq[0].hypot(yq[1]));
        }
        angle_prev = angle;
        if total.abs() > 3.0 * std::f64::consts::TAU || stepper.t() > 50.0 * period {
            return Err(VortexError::NoConvergence);
        }
    }
}

/// Bracketed fixed-point search of the return map; `Ok(None)` when the map
/// is monotone (no cycle) inside the search radius.
fn cycle_search(
    field: &impl Fn(f64, f64) -> (f64, f64),
    search_radius: f64,
) -> Result<Option<(f64, f64)>, VortexError> {
    let n_scan = 24;
    let r_min = search_radius / 64.0;
    let g = |r: f64| -> Result<f64, VortexError> { Ok(return_map(field, r)? - r) };
    let mut prev: Option<(f64, f64)> = None;
    let mut bracket = None;
    for i in 0..=n_scan {
        let r = r_min * (search_radius / r_min).powf(i as f64 / n_scan as f64);
        let gr = match g(r) {
            Ok(v) => v,
            Err(_) => continue, // finite-time escape; handled by time reversal
        };
        if let Some((rp, gp)) = prev {
            if gp * gr < 0.0 || gp == 0.0 {
                bracket = Some((rp, r));
                break;
            }
        }
        prev = Some((r, gr));
    }
    let Some((mut lo, mut hi)) = bracket else {
        return Ok(None);
    };
    let mut glo = g(lo)?;
    for _ in 0..60 {
        if (hi - lo) < 1e-12 * search_radius {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let gm = g(mid)?;
        if glo * gm <= 0.0 {
            hi = mid;
        } else {
            lo = mid;
            glo = gm;
        }
    }
    let r_star = 0.5 * (lo + hi);
    let dr = 1e-4 * r_star;
    let slope = (return_map(field, r_star + dr)? - return_map(field, r_star - dr)?) / (2.0 * dr);
    Ok(Some((r_star, slope)))
}

/// Poincare return map on the positive-u ray of a frozen planar flow around
/// the node: locates a fixed-point radius by bisection of `return(R) - R`
/// inside `search_radius`, classifying stability from the map slope.
///
/// A repelling cycle makes the forward map escape in finite time outside the
/// cycle, so when the forward search finds nothing the time-reversed flow is
/// searched and the slope inverted.
pub fn detect_limit_cycle(
    field: impl Fn(f64, f64) -> (f64, f64),
    search_radius: f64,
) -> Result<Option<LimitCycle>, VortexError> {
    if let Ok(Some((radius, slope))) = cycle_search(&field, search_radius) {
        let stability = if slope < 1.0 {
            CycleStability::Attracting
        } else {
            CycleStability::Repelling
        };
        return Ok(Some(LimitCycle {
            radius,
            map_slope: slope,
            stability,
        }));
    }
    let reversed = |u: f64, v: f64| {
        let (du, dv) = field(u, v);
        (-du, -dv)
    };
    if let Some((radius, slope_back)) = cycle_search(&reversed, search_radius)? {
        let map_slope = 1.0 / slope_back;
        let stability = if map_slope < 1.0 {
            CycleStability::Attracting
        } else {
            CycleStability::Repelling
        };
        return Ok(Some(LimitCycle {
            radius,
            map_slope,
            stability,
        }));
    }
    Ok(None)
}

//! Nodal points and nodal lines: location, continuation, local frames,
//! node velocities and curvature radii.
//!
//! A nodal line at fixed time `t` is the codimension-2 solution set of
//! `Re phi = Im phi = 0`. Both gradients are perpendicular to the line, so
//! the unit tangent is `grad(Re phi) x grad(Im phi)` normalized; continuation
//! steps along it and re-converges in the normal plane. The node velocity is
//! the intersection velocity of the moving line with the frozen normal plane
//! (F-plane), obtained here by differentiating the defining equations.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use serde::Serialize;
use thiserror::Error;

use crate::wavefield::{eval_polynomial_part, field_scale, FieldSample, WavefunctionSpec};

#[derive(Debug, Error)]
pub enum NodalError {
    #[error("no convergence to a node after {iters} iterations (|phi| = {resid:.3e})")]
    NoConvergence { iters: usize, resid: f64 },
    #[error("degenerate node: grad(Re phi) and grad(Im phi) nearly parallel")]
    DegenerateNode,
    #[error("singular node-velocity system")]
    SingularSystem,
}

/// Axis-aligned search/trace box.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ScanBox {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl ScanBox {
    pub fn symmetric(half: f64) -> Self {
        Self {
            min: [-half; 3],
            max: [half; 3],
        }
    }

    pub fn contains(&self, x: &Vector3<f64>) -> bool {
        (0..3).all(|i| x[i] >= self.min[i] && x[i] <= self.max[i])
    }

    pub fn diagonal(&self) -> f64 {
        (0..3)
            .map(|i| (self.max[i] - self.min[i]).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NodalParams {
    /// Relative node tolerance; absolute tolerance is `node_tol * field scale`.
    pub node_tol: f64,
    /// Arclength continuation step.
    pub ds: f64,
    pub max_iter: usize,
    pub max_points: usize,
    /// Gradients are considered parallel (degenerate node) below this ratio.
    pub degenerate_tol: f64,
    /// |d tangent/ds| below this switches to the Euler-angle frame.
    pub curvature_eps: f64,
    pub scan_box: ScanBox,
    /// Grid resolution per axis for seed scans.
    pub scan_grid: usize,
}

impl Default for NodalParams {
    fn default() -> Self {
        Self {
            node_tol: 1e-12,
            ds: 0.02,
            max_iter: 60,
            max_points: 8000,
            degenerate_tol: 1e-8,
            curvature_eps: 1e-8,
            scan_box: ScanBox::symmetric(4.0),
            scan_grid: 21,
        }
    }
}

/// Which construction produced a local frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FrameKind {
    /// Tangent/normal/binormal from the curvature vector.
    Frenet,
    /// Euler-angle frame from the tangent direction (zero-curvature fallback).
    EulerAngle,
    /// Arbitrary right-handed completion; both constructions degenerate.
    Fixed,
}

/// Right-handed orthonormal frame with `normal x binormal = tangent`.
/// Local coordinates are `u = dr . normal`, `v = dr . binormal`,
/// `w = dr . tangent`.
#[derive(Debug, Clone, Copy)]
pub struct Frame {
    pub tangent: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub binormal: Vector3<f64>,
    pub kind: FrameKind,
}

impl Frame {
    /// World offset -> local (u, v, w).
    pub fn to_local(&self, dr: &Vector3<f64>) -> Vector3<f64> {
        Vector3::new(dr.dot(&self.normal), dr.dot(&self.binormal), dr.dot(&self.tangent))
    }

    /// Local (u, v, w) -> world offset.
    pub fn to_world(&self, uvw: &Vector3<f64>) -> Vector3<f64> {
        uvw[0] * self.normal + uvw[1] * self.binormal + uvw[2] * self.tangent
    }

    /// Euler-angle frame for a tangent not parallel to the z-axis.
    fn euler_angle(tangent: &Vector3<f64>) -> Option<Frame> {
        let (tx, ty, tz) = (tangent[0], tangent[1], tangent[2]);
        if tx.hypot(ty) < 1e-8 {
            return None;
        }
        let phi = ty.atan2(tx);
        let theta = (tz / tangent.norm()).acos();
        let normal = Vector3::new(phi.sin(), -phi.cos(), 0.0);
        let binormal = Vector3::new(
            theta.cos() * phi.cos(),
            theta.cos() * phi.sin(),
            -theta.sin(),
        );
        Some(Frame {
            tangent: *tangent,
            normal,
            binormal,
            kind: FrameKind::EulerAngle,
        })
    }

    /// Arbitrary right-handed completion of a tangent.
    fn fixed_completion(tangent: &Vector3<f64>) -> Frame {
        let pick = if tangent[0].abs() < 0.9 {
            Vector3::x()
        } else {
            Vector3::y()
        };
        let normal = tangent.cross(&pick).normalize();
        let binormal = tangent.cross(&normal);
        Frame {
            tangent: *tangent,
            normal,
            binormal,
            kind: FrameKind::Fixed,
        }
    }
}

/// A node on a nodal line with its local geometric data.
#[derive(Debug, Clone)]
pub struct NodalPoint {
    pub r0: Vector3<f64>,
    pub t: f64,
    /// Signed arclength from the trace origin.
    pub s: f64,
    pub frame: Frame,
    /// Node velocity (world coordinates); perpendicular to the tangent.
    pub v0: Vector3<f64>,
    /// Curvature radius; `f64::INFINITY` on straight segments.
    pub curvature_radius: f64,
}

impl NodalPoint {
    /// Node velocity components in the F-plane, `(Vu, Vv)`.
    pub fn velocity_uv(&self) -> (f64, f64) {
        (self.v0.dot(&self.frame.normal), self.v0.dot(&self.frame.binormal))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TraceWarning {
    /// Continuation hit a degenerate node and stopped on that side.
    DegenerateStop,
    /// max_points exhausted before closure or box exit.
    BranchTooLong,
}

/// Arclength-parameterized polyline of nodes at fixed time.
#[derive(Debug, Clone)]
pub struct NodalLine {
    pub points: Vec<NodalPoint>,
    pub t: f64,
    pub closed: bool,
    pub ds: f64,
    pub warnings: Vec<TraceWarning>,
}

impl NodalLine {
    pub fn length(&self) -> f64 {
        match (self.points.first(), self.points.last()) {
            (Some(a), Some(b)) => b.s - a.s,
            _ => 0.0,
        }
    }

    /// Index and distance of the node closest to `x`.
    pub fn nearest(&self, x: &Vector3<f64>) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (i, p) in self.points.iter().enumerate() {
            let d = (p.r0 - x).norm();
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }

    /// Distance from `x` to the polyline (segment-wise).
    pub fn distance_to_polyline(&self, x: &Vector3<f64>) -> f64 {
        let mut best = f64::INFINITY;
        for w in self.points.windows(2) {
            let a = w[0].r0;
            let b = w[1].r0;
            let ab = b - a;
            let tt = ((x - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
            let d = (x - (a + tt * ab)).norm();
            best = best.min(d);
        }
        if self.points.len() == 1 {
            best = (x - self.points[0].r0).norm();
        }
        best
    }

    /// Interpolated frame at arclength `s` (clamped to the traced range).
    pub fn frame_at(&self, s: f64) -> Frame {
        let pts = &self.points;
        if pts.len() == 1 {
            return pts[0].frame;
        }
        let idx = match pts.binary_search_by(|p| p.s.partial_cmp(&s).unwrap()) {
            Ok(i) => return pts[i].frame,
            Err(i) => i.clamp(1, pts.len() - 1),
        };
        let (a, b) = (&pts[idx - 1], &pts[idx]);
        let w = ((s - a.s) / (b.s - a.s)).clamp(0.0, 1.0);
        let lerp = |u: &Vector3<f64>, v: &Vector3<f64>| ((1.0 - w) * u + w * v).normalize();
        let tangent = lerp(&a.frame.tangent, &b.frame.tangent);
        let mut normal = lerp(&a.frame.normal, &b.frame.normal);
        normal = (normal - normal.dot(&tangent) * tangent).normalize();
        let binormal = tangent.cross(&normal);
        Frame {
            tangent,
            normal,
            binormal,
            kind: a.frame.kind,
        }
    }

    /// Curvature radius at arclength `s` (nearest stored node).
    pub fn curvature_radius_at(&self, s: f64) -> f64 {
        let idx = self
            .points
            .binary_search_by(|p| p.s.partial_cmp(&s).unwrap())
            .unwrap_or_else(|i| i.min(self.points.len() - 1));
        self.points[idx].curvature_radius
    }
}

/// Spec + time + cached field scale shared by the node-finding routines.
pub struct NodalContext<'a> {
    pub spec: &'a WavefunctionSpec,
    pub t: f64,
    pub params: NodalParams,
    tol_abs: f64,
}

impl<'a> NodalContext<'a> {
    pub fn new(spec: &'a WavefunctionSpec, t: f64, params: NodalParams) -> Self {
        let tol_abs = params.node_tol * field_scale(spec, t);
        Self {
            spec,
            t,
            params,
            tol_abs,
        }
    }

    pub fn tol_abs(&self) -> f64 {
        self.tol_abs
    }

    fn sample(&self, x: &Vector3<f64>) -> FieldSample {
        eval_polynomial_part(self.spec, x, self.t)
    }

    fn grads(&self, s: &FieldSample) -> (Vector3<f64>, Vector3<f64>) {
        (
            Vector3::new(s.grad[0].re, s.grad[1].re, s.grad[2].re),
            Vector3::new(s.grad[0].im, s.grad[1].im, s.grad[2].im),
        )
    }

    fn is_degenerate(&self, gr: &Vector3<f64>, gi: &Vector3<f64>) -> bool {
        gr.cross(gi).norm() <= self.params.degenerate_tol * gr.norm() * gi.norm()
    }

    /// Exact line tangent from the field, oriented along `hint` when given.
    fn tangent(
        &self,
        gr: &Vector3<f64>,
        gi: &Vector3<f64>,
        hint: Option<&Vector3<f64>>,
    ) -> Result<Vector3<f64>, NodalError> {
        let c = gr.cross(gi);
        if c.norm() <= self.params.degenerate_tol * gr.norm() * gi.norm() {
            return Err(NodalError::DegenerateNode);
        }
        let mut t = c.normalize();
        if let Some(h) = hint {
            if t.dot(h) < 0.0 {
                t = -t;
            }
        }
        Ok(t)
    }
}

/// Gauss-Newton on the underdetermined system `(Re phi, Im phi) = 0` with
/// minimal-norm updates. Converged iff `|phi| < node_tol * field scale`.
pub fn find_nodal_point(
    ctx: &NodalContext,
    seed: &Vector3<f64>,
) -> Result<Vector3<f64>, NodalError> {
    let mut x = *seed;
    let mut resid = f64::INFINITY;
    for _ in 0..ctx.params.max_iter {
        let s = ctx.sample(&x);
        resid = s.psi.norm();
        if resid < ctx.tol_abs {
            let (gr, gi) = ctx.grads(&s);
            if ctx.is_degenerate(&gr, &gi) {
                return Err(NodalError::DegenerateNode);
            }
            return Ok(x);
        }
        let (gr, gi) = ctx.grads(&s);
        let jjt = Matrix2::new(gr.dot(&gr), gr.dot(&gi), gi.dot(&gr), gi.dot(&gi));
        let rhs = Vector2::new(s.psi.re, s.psi.im);
        let lam = match jjt.lu().solve(&rhs) {
            Some(l) => l,
            None => {
                return Err(NodalError::NoConvergence {
                    iters: ctx.params.max_iter,
                    resid,
                })
            }
        };
        let mut step = -(lam[0] * gr + lam[1] * gi);
        let cap = 0.25 * ctx.params.scan_box.diagonal();
        if step.norm() > cap {
            step *= cap / step.norm();
        }
        // Backtrack if the residual does not improve.
        let mut improved = false;
        for _ in 0..8 {
            let cand = x + step;
            if ctx.sample(&cand).psi.norm() < resid {
                x = cand;
                improved = true;
                break;
            }
            step *= 0.5;
        }
        if !improved {
            x += step;
        }
    }
    Err(NodalError::NoConvergence {
        iters: ctx.params.max_iter,
        resid,
    })
}

/// Newton iteration for a node constrained to the plane through `plane_point`
/// with normal `plane_normal` (the F-plane re-convergence used by the
/// corrector, the node-velocity oracle and per-sample re-localization).
pub fn find_node_in_plane(
    ctx: &NodalContext,
    plane_point: &Vector3<f64>,
    plane_normal: &Vector3<f64>,
    seed: &Vector3<f64>,
) -> Result<Vector3<f64>, NodalError> {
    let mut x = *seed;
    for _ in 0..ctx.params.max_iter {
        let s = ctx.sample(&x);
        let g3 = (x - plane_point).dot(plane_normal);
        if s.psi.norm() < ctx.tol_abs && g3.abs() < 1e-12 * ctx.params.ds.max(1e-12) {
            return Ok(x);
        }
        let (gr, gi) = ctx.grads(&s);
        let m = Matrix3::from_rows(&[gr.transpose(), gi.transpose(), plane_normal.transpose()]);
        let rhs = Vector3::new(-s.psi.re, -s.psi.im, -g3);
        let step = m.lu().solve(&rhs).ok_or(NodalError::DegenerateNode)?;
        if !step.iter().all(|c| c.is_finite()) {
            return Err(NodalError::DegenerateNode);
        }
        x += step;
    }
    let resid = ctx.sample(&x).psi.norm();
    if resid < ctx.tol_abs {
        Ok(x)
    } else {
        Err(NodalError::NoConvergence {
            iters: ctx.params.max_iter,
            resid,
        })
    }
}

/// Node velocity from the linear system
/// `{grad(Re phi) . V = -dt(Re phi), grad(Im phi) . V = -dt(Im phi), tangent . V = 0}`.
pub fn nodal_velocity(
    ctx: &NodalContext,
    r0: &Vector3<f64>,
    tangent: &Vector3<f64>,
) -> Result<Vector3<f64>, NodalError> {
    let s = ctx.sample(r0);
    let (gr, gi) = ctx.grads(&s);
    let m = Matrix3::from_rows(&[gr.transpose(), gi.transpose(), tangent.transpose()]);
    let rhs = Vector3::new(-s.dpsi_dt.re, -s.dpsi_dt.im, 0.0);
    let scale = gr.norm().max(gi.norm()).max(1e-300);
    if m.determinant().abs() < 1e-14 * scale * scale {
        return Err(NodalError::SingularSystem);
    }
    m.lu().solve(&rhs).ok_or(NodalError::SingularSystem)
}

/// One continuation side: positions + exact tangents, stopping on closure,
/// box exit, degeneracy or the point budget.
struct RawBranch {
    xs: Vec<Vector3<f64>>,
    tangents: Vec<Vector3<f64>>,
    closed: bool,
    warning: Option<TraceWarning>,
}

fn trace_side(
    ctx: &NodalContext,
    start: &Vector3<f64>,
    start_tangent: &Vector3<f64>,
    max_points: usize,
) -> Result<RawBranch, NodalError> {
    let ds = ctx.params.ds;
    let mut xs = vec![*start];
    let mut tangents = vec![*start_tangent];
    let mut closed = false;
    let mut warning = None;
    loop {
        if xs.len() >= max_points {
            warning = Some(TraceWarning::BranchTooLong);
            break;
        }
        let x = *xs.last().unwrap();
        let th = *tangents.last().unwrap();
        // Predictor along the tangent, corrector in the normal plane; retry
        // with a shorter step if the corrector wanders.
        let mut step = ds;
        let mut accepted = None;
        for _ in 0..4 {
            let pred = x + step * th;
            match find_node_in_plane(ctx, &pred, &th, &pred) {
                Ok(next) => {
                    if (next - pred).norm() <= 0.5 * step {
                        accepted = Some(next);
                        break;
                    }
                    step *= 0.5;
                }
                Err(NodalError::DegenerateNode) => {
                    warning = Some(TraceWarning::DegenerateStop);
                    break;
                }
                Err(_) => {
                    step *= 0.5;
                }
            }
        }
        let Some(next) = accepted else {
            if warning.is_none() {
                warning = Some(TraceWarning::DegenerateStop);
            }
            break;
        };
        if !ctx.params.scan_box.contains(&next) {
            break;
        }
        let s = ctx.sample(&next);
        let (gr, gi) = ctx.grads(&s);
        let tn = match ctx.tangent(&gr, &gi, Some(&th)) {
            Ok(t) => t,
            Err(_) => {
                warning = Some(TraceWarning::DegenerateStop);
                break;
            }
        };
        // Closure: back near the start moving in the starting direction.
        if xs.len() >= 3 && (next - xs[0]).norm() < 0.5 * ds && tn.dot(&tangents[0]) > 0.0 {
            closed = true;
            break;
        }
        xs.push(next);
        tangents.push(tn);
    }
    Ok(RawBranch {
        xs,
        tangents,
        closed,
        warning,
    })
}

/// Build frames and curvature radii for a polyline with known tangents.
/// `Frenet` where the discrete curvature is resolvable, `EulerAngle` on
/// straight stretches, `Fixed` (flagged) when both constructions degenerate.
fn build_frames(
    xs: &[Vector3<f64>],
    tangents: &[Vector3<f64>],
    s: &[f64],
    curvature_eps: f64,
) -> Vec<(Frame, f64)> {
    let n = xs.len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let (im, ip) = (i.saturating_sub(1), (i + 1).min(n - 1));
        let dt = tangents[ip] - tangents[im];
        let ds_tot = s[ip] - s[im];
        let kappa_vec = if ds_tot > 0.0 { dt / ds_tot } else { Vector3::zeros() };
        let kappa = kappa_vec.norm();
        let tangent = tangents[i];
        let frame = if kappa > curvature_eps {
            let mut normal = kappa_vec - kappa_vec.dot(&tangent) * tangent;
            if normal.norm() > 1e-14 {
                normal = normal.normalize();
                let binormal = tangent.cross(&normal);
                Frame {
                    tangent,
                    normal,
                    binormal,
                    kind: FrameKind::Frenet,
                }
            } else {
                Frame::euler_angle(&tangent).unwrap_or_else(|| Frame::fixed_completion(&tangent))
            }
        } else {
            Frame::euler_angle(&tangent).unwrap_or_else(|| Frame::fixed_completion(&tangent))
        };
        let radius = if kappa > curvature_eps { 1.0 / kappa } else { f64::INFINITY };
        out.push((frame, radius));
    }
    out
}

/// Trace the nodal line through `start` by predictor-corrector continuation.
///
/// The arclength origin is the start node; the sign convention follows the
/// initial continuation direction. Open lines are traced in both directions
/// and merged.
pub fn trace_nodal_line(
    ctx: &NodalContext,
    start: &Vector3<f64>,
) -> Result<NodalLine, NodalError> {
    let s0 = ctx.sample(start);
    if s0.psi.norm() >= ctx.tol_abs {
        return Err(NodalError::NoConvergence {
            iters: 0,
            resid: s0.psi.norm(),
        });
    }
    let (gr, gi) = ctx.grads(&s0);
    let t0 = ctx.tangent(&gr, &gi, None)?;

    let fwd = trace_side(ctx, start, &t0, ctx.params.max_points)?;
    let mut warnings: Vec<TraceWarning> = fwd.warning.into_iter().collect();
    let closed = fwd.closed;

    let (mut xs, mut tangents) = if closed {
        (fwd.xs, fwd.tangents)
    } else {
        let back = trace_side(
            ctx,
            start,
            &(-t0),
            ctx.params.max_points.saturating_sub(fwd.xs.len()) + 1,
        )?;
        if let Some(w) = back.warning {
            if !warnings.contains(&w) {
                warnings.push(w);
            }
        }
        // Backward branch reversed, tangents flipped to point in +s direction.
        let mut xs: Vec<_> = back.xs.iter().skip(1).rev().cloned().collect();
        let mut ts: Vec<_> = back.tangents.iter().skip(1).rev().map(|t| -t).collect();
        xs.extend(fwd.xs);
        ts.extend(fwd.tangents);
        (xs, ts)
    };

    // Arclength with origin at the start node.
    let origin_idx = xs
        .iter()
        .position(|x| (x - start).norm() < 1e-12)
        .unwrap_or(0);
    let mut s = vec![0.0; xs.len()];
    for i in 1..xs.len() {
        s[i] = s[i - 1] + (xs[i] - xs[i - 1]).norm();
    }
    let shift = s[origin_idx];
    for v in &mut s {
        *v -= shift;
    }

    // Closed lines: append nothing, but frames use wrap-unaware differences
    // (the first/last points use one-sided differences; acceptable at ds).
    let frames = build_frames(&xs, &tangents, &s, ctx.params.curvature_eps);

    let mut points = Vec::with_capacity(xs.len());
    for i in 0..xs.len() {
        let v0 = nodal_velocity(ctx, &xs[i], &tangents[i])?;
        points.push(NodalPoint {
            r0: xs[i],
            t: ctx.t,
            s: s[i],
            frame: frames[i].0,
            v0,
            curvature_radius: frames[i].1,
        });
    }
    let _ = &mut xs;
    let _ = &mut tangents;
    Ok(NodalLine {
        points,
        t: ctx.t,
        closed,
        ds: ctx.params.ds,
        warnings,
    })
}

/// Local 3-point mini-trace around `x_near`: re-converges the node at the
/// context time and returns it with a discrete Frenet frame and velocity.
/// Used when a full line trace is unnecessary (per-sample re-localization).
pub fn local_node_with_frame(
    ctx: &NodalContext,
    x_near: &Vector3<f64>,
) -> Result<NodalPoint, NodalError> {
    let x = find_nodal_point(ctx, x_near)?;
    let s = ctx.sample(&x);
    let (gr, gi) = ctx.grads(&s);
    let th = ctx.tangent(&gr, &gi, None)?;
    let ds = ctx.params.ds;
    let mut xs = vec![x];
    let mut ts = vec![th];
    for dir in [-1.0, 1.0] {
        let pred = x + dir * ds * th;
        let nb = find_node_in_plane(ctx, &pred, &th, &pred)?;
        let sb = ctx.sample(&nb);
        let (gr2, gi2) = ctx.grads(&sb);
        let tb = ctx.tangent(&gr2, &gi2, Some(&(dir * th)))? * dir;
        if dir < 0.0 {
            xs.insert(0, nb);
            ts.insert(0, tb);
        } else {
            xs.push(nb);
            ts.push(tb);
        }
    }
    let s_arc = vec![-(xs[1] - xs[0]).norm(), 0.0, (xs[2] - xs[1]).norm()];
    let frames = build_frames(&xs, &ts, &s_arc, ctx.params.curvature_eps);
    let v0 = nodal_velocity(ctx, &xs[1], &ts[1])?;
    Ok(NodalPoint {
        r0: xs[1],
        t: ctx.t,
        s: 0.0,
        frame: frames[1].0,
        v0,
        curvature_radius: frames[1].1,
    })
}

/// Cell centers of grid cells where both field components change sign over
/// the cell corners: candidate seeds for node finding.
pub fn grid_seeds(ctx: &NodalContext) -> Vec<Vector3<f64>> {
    let n = ctx.params.scan_grid.max(2);
    let b = ctx.params.scan_box;
    let coord = |i: usize, k: usize| {
        b.min[k] + (b.max[k] - b.min[k]) * i as f64 / (n - 1) as f64
    };
    // Cache field component signs on the grid.
    let mut re = vec![0.0f64; n * n * n];
    let mut im = vec![0.0f64; n * n * n];
    let idx = |i: usize, j: usize, k: usize| (i * n + j) * n + k;
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let x = Vector3::new(coord(i, 0), coord(j, 1), coord(k, 2));
                let s = ctx.sample(&x);
                re[idx(i, j, k)] = s.psi.re;
                im[idx(i, j, k)] = s.psi.im;
            }
        }
    }
    let mut seeds = Vec::new();
    for i in 0..n - 1 {
        for j in 0..n - 1 {
            for k in 0..n - 1 {
                let corners: Vec<usize> = (0..8)
                    .map(|c| idx(i + (c & 1), j + ((c >> 1) & 1), k + ((c >> 2) & 1)))
                    .collect();
                let sign_change = |vals: &[f64]| {
                    let mut pos = false;
                    let mut neg = false;
                    for &ci in &corners {
                        if vals[ci] > 0.0 {
                            pos = true;
                        }
                        if vals[ci] < 0.0 {
                            neg = true;
                        }
                    }
                    pos && neg
                };
                if sign_change(&re) && sign_change(&im) {
                    seeds.push(Vector3::new(
                        0.5 * (coord(i, 0) + coord(i + 1, 0)),
                        0.5 * (coord(j, 1) + coord(j + 1, 1)),
                        0.5 * (coord(k, 2) + coord(k + 1, 2)),
                    ));
                }
            }
        }
    }
    seeds
}

/// All nodal lines found from a grid scan of the box. Seeds landing within
/// one step of an already traced line are skipped.
pub fn trace_all_lines(ctx: &NodalContext) -> Vec<NodalLine> {
    let mut lines: Vec<NodalLine> = Vec::new();
    for seed in grid_seeds(ctx) {
        if lines
            .iter()
            .any(|l| l.distance_to_polyline(&seed) < 2.0 * ctx.params.ds)
        {
            continue;
        }
        let Ok(node) = find_nodal_point(ctx, &seed) else {
            continue;
        };
        if !ctx.params.scan_box.contains(&node) {
            continue;
        }
        if lines
            .iter()
            .any(|l| l.distance_to_polyline(&node) < 2.0 * ctx.params.ds)
        {
            continue;
        }
        if let Ok(line) = trace_nodal_line(ctx, &node) {
            lines.push(line);
        }
    }
    lines
}

//! Browser demo bindings: three interactive views of the nodal-line vortex
//! structure, exposed to a static page through wasm-bindgen and returning
//! plain JSON strings.
//!
//! Build with `wasm-pack build crates/demo --target web` and serve
//! `crates/demo/www/` next to the generated `pkg/` directory. The same
//! functions compile natively so the outputs stay under `cargo test`.

use nalgebra::Vector3;
use serde_json::json;
use vortexline::chaos::{correlate_events, distance_to_xline, stretching_numbers, DistanceParams};
use vortexline::dynamics::{integrate_with_deviation, DeviationMode, IntegratorOptions};
use vortexline::nodal::{trace_all_lines, NodalContext, NodalLine, NodalParams};
use vortexline::ode::{OdeOptions, RhsError, Rk45};
use vortexline::vortex::{
    f3_average, flow_coefficients, local_expansion, spiral_prediction, vfast_diagnostic,
};
use vortexline::wavefield::WavefunctionSpec;
use vortexline::xstruct::{
    build_xline, frozen_comoving_flow, manifold_branches, xpoint_for_node, ManifoldParams,
};
use wasm_bindgen::prelude::*;

fn err_json(msg: impl std::fmt::Display) -> String {
    json!({ "error": msg.to_string() }).to_string()
}

fn lines_at(spec: &WavefunctionSpec, t: f64) -> Vec<NodalLine> {
    let ctx = NodalContext::new(spec, t, NodalParams::default());
    trace_all_lines(&ctx)
}

fn polyline(points: impl Iterator<Item = Vector3<f64>>, stride: usize) -> Vec<[f64; 3]> {
    points
        .enumerate()
        .filter(|(i, _)| i % stride == 0)
        .map(|(_, p)| [p[0], p[1], p[2]])
        .collect()
}

/// Nodal lines and X-lines at time `t`, as 3-d polylines.
#[wasm_bindgen]
pub fn structure_json(omega_x: f64, omega_y: f64, omega_z: f64, t: f64) -> String {
    if !(omega_x > 0.0 && omega_y > 0.0 && omega_z > 0.0) {
        return err_json("frequencies must be positive");
    }
    let spec = WavefunctionSpec::demo_superposition([omega_x, omega_y, omega_z]);
    let lines = lines_at(&spec, t);
    if lines.is_empty() {
        return err_json(format!("no nodal lines found at t = {t}"));
    }
    let mut nodal = Vec::new();
    let mut xline = Vec::new();
    for line in &lines {
        nodal.push(polyline(line.points.iter().map(|p| p.r0), 2));
        let xl = build_xline(&spec, line, 1e-10);
        xline.push(
            xl.found()
                .enumerate()
                .filter(|(i, _)| i % 2 == 0)
                .map(|(_, (_, xp))| xp.world)
                .collect::<Vec<[f64; 3]>>(),
        );
    }
    json!({ "nodal": nodal, "xline": xline }).to_string()
}

/// Co-moving frozen flow in the F-plane of one node (chosen by the arclength
/// fraction `s_frac` along the longest traced line), with the X-point, its
/// manifold branches and a spiral streamline.
#[wasm_bindgen]
pub fn fplane_portrait_json(
    omega_x: f64,
    omega_y: f64,
    omega_z: f64,
    t: f64,
    s_frac: f64,
    grid: u32,
) -> String {
    if !(omega_x > 0.0 && omega_y > 0.0 && omega_z > 0.0) {
        return err_json("frequencies must be positive");
    }
    let spec = WavefunctionSpec::demo_superposition([omega_x, omega_y, omega_z]);
    let lines = lines_at(&spec, t);
    let Some(line) = lines.iter().max_by_key(|l| l.points.len()) else {
        return err_json(format!("no nodal lines found at t = {t}"));
    };
    let idx = (((line.points.len() - 1) as f64) * s_frac.clamp(0.0, 1.0)).round() as usize;
    let p = &line.points[idx];
    let e = match local_expansion(&spec, p) {
        Ok(e) => e,
        Err(e) => return err_json(e),
    };
    let c = flow_coefficients(&e);
    let f3 = f3_average(&c).unwrap_or(f64::NAN);
    let margin = vfast_diagnostic(&e);
    let prediction = spiral_prediction(&c).ok();
    let xp = xpoint_for_node(&spec, p, None, 1e-10);
    let d_x = xp.as_ref().map(|x| x.d_x).unwrap_or(0.15);
    let half = 2.0 * d_x;

    // Vector field on the F-plane (w = 0).
    let n = grid.clamp(6, 64) as usize;
    let mut field = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let u = -half + 2.0 * half * i as f64 / (n - 1) as f64;
            let v = -half + 2.0 * half * j as f64 / (n - 1) as f64;
            let f = frozen_comoving_flow(&spec, p, &Vector3::new(u, v, 0.0));
            field.push([u, v, f[0], f[1]]);
        }
    }

    // A forward streamline showing the in-plane spiral.
    let streamline = {
        type NoErr = std::convert::Infallible;
        let rhs = |_t: f64, y: &[f64; 3]| -> Result<[f64; 3], RhsError<NoErr>> {
            let f = frozen_comoving_flow(&spec, p, &Vector3::new(y[0], y[1], y[2]));
            Ok([f[0], f[1], f[2]])
        };
        let start = [0.55 * d_x, 0.0, 0.0];
        let f0 = frozen_comoving_flow(&spec, p, &Vector3::from(start)).norm();
        let tau_scale = d_x / f0.max(1e-300);
        let opts = OdeOptions {
            rel_tol: 1e-8,
            abs_tol: 1e-12 * d_x,
            h_init: 1e-3 * tau_scale,
            h_max: 0.05 * tau_scale,
            h_min: 1e-15 * tau_scale,
            max_steps: 200_000,
        };
        let mut stepper = Rk45::new(rhs, 0.0, start, opts);
        let mut pts = vec![[start[0], start[1]]];
        for k in 1..=600 {
            if stepper
                .advance_to(k as f64 * 0.08 * tau_scale, |_| {})
                .is_err()
            {
                break;
            }
            let y = stepper.y();
            pts.push([y[0], y[1]]);
            if y[0].hypot(y[1]) > 3.0 * half {
                break;
            }
        }
        pts
    };

    let manifolds: Vec<serde_json::Value> = match &xp {
        Ok(x) => manifold_branches(&spec, x, p, &ManifoldParams::default())
            .iter()
            .map(|b| {
                // Project world polylines back into the node frame plane.
                let uv: Vec<[f64; 2]> = b
                    .points
                    .iter()
                    .step_by(2)
                    .map(|w| {
                        let local = p.frame.to_local(&(Vector3::from(*w) - p.r0));
                        [local[0], local[1]]
                    })
                    .collect();
                json!({
                    "kind": format!("{:?}", b.kind),
                    "side": b.side,
                    "termination": format!("{:?}", b.termination),
                    "uv": uv,
                })
            })
            .collect(),
        Err(_) => Vec::new(),
    };

    json!({
        "node": { "world": [p.r0[0], p.r0[1], p.r0[2]], "s": p.s, "t": t },
        "a": c.a,
        "f3": f3,
        "vfast_margin": margin,
        "vu": e.vu,
        "vv": e.vv,
        "node_type": prediction.map(|pr| format!("{:?}", pr.node_type)),
        "sense": prediction.map(|pr| format!("{:?}", pr.sense)),
        "half": half,
        "xpoint": xp.ok().map(|x| json!({
            "u": x.uvw[0], "v": x.uvw[1], "w": x.uvw[2],
            "d_x": x.d_x,
            "eigenvalues": x.eigenvalues,
        })),
        "field": field,
        "streamline": streamline,
        "manifolds": manifolds,
    })
    .to_string()
}

/// Stretching numbers, finite-time Lyapunov number and X-line distance for a
/// Bohmian trajectory (the scattering-correlation experiment).
#[wasm_bindgen]
pub fn chaos_series_json(
    omega_x: f64,
    omega_y: f64,
    omega_z: f64,
    x0: f64,
    y0: f64,
    z0: f64,
    t_end: f64,
    line_dt: f64,
) -> String {
    if !(omega_x > 0.0 && omega_y > 0.0 && omega_z > 0.0) {
        return err_json("frequencies must be positive");
    }
    if !(t_end > 0.0 && t_end <= 40.0) {
        return err_json("t_end must be in (0, 40]");
    }
    let spec = WavefunctionSpec::demo_superposition([omega_x, omega_y, omega_z]);
    let start = Vector3::new(x0, y0, z0);
    let traj = match integrate_with_deviation(
        &spec,
        &start,
        &Vector3::new(1.0, 0.0, 0.0),
        (0.0, t_end),
        &IntegratorOptions::default(),
        DeviationMode::Variational,
    ) {
        Ok(t) => t,
        Err(e) => return err_json(e),
    };
    let series = match stretching_numbers(&traj) {
        Ok(s) => s,
        Err(e) => return err_json(e),
    };
    let params = DistanceParams {
        line_dt: line_dt.clamp(0.05, 1.0),
        ..DistanceParams::default()
    };
    let dist = match distance_to_xline(&spec, &traj, &params) {
        Ok(d) => d,
        Err(e) => return err_json(e),
    };
    let (events, summary) = correlate_events(&series, &dist, None, None);
    let t: Vec<f64> = (1..=series.alphas.len())
        .map(|k| series.t_start + k as f64 * series.t0)
        .collect();
    json!({
        "t": t,
        "alpha": series.alphas,
        "chi": series.chi,
        "dist": dist.dist[1..].to_vec(),
        "events": events.iter().map(|e| json!({
            "t": e.t_jump, "alpha": e.alpha_peak, "matched": e.matched, "d_min": e.d_min,
        })).collect::<Vec<_>>(),
        "threshold": summary.jump_threshold,
    })
    .to_string()
}

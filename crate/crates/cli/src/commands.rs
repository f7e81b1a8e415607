//! Subcommand implementations. Every command is deterministic for a given
//! config (fixed seeds, ordered iteration) and writes CSV/JSON plus a
//! manifest into the output directory.

use std::path::Path;

use nalgebra::Vector3;
use thiserror::Error;
use vortexline::chaos::{
    correlate_events, distance_to_xline, stretching_numbers, DistanceParams,
};
use vortexline::dynamics::{
    bohmian_velocity, integrate_with_deviation, DeviationMode,
};
use vortexline::nodal::{
    find_nodal_point, trace_all_lines, trace_nodal_line, NodalContext, NodalLine,
};
use vortexline::vortex::{
    detect_hopf_refined, f3_average, flow_coefficients, local_expansion, spiral_prediction,
    vfast_diagnostic, HopfKind, NodeType,
};
use vortexline::wavefield::eval_field;
use vortexline::xstruct::{build_xline, manifold_branches};

use crate::config::RunConfig;
use crate::output::{fmt, write_json, CsvWriter, RunManifest};

#[derive(Debug, Error)]
pub enum CmdError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Other(String),
}

/// Exit status semantics: 0 complete, 2 partial (gaps or lost pieces).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Complete,
    Partial,
}

pub struct Ctx<'a> {
    pub cfg: &'a RunConfig,
    pub out: &'a Path,
    /// Nodal seed from --seed (overrides the grid scan).
    pub seed: Option<Vector3<f64>>,
}

impl<'a> Ctx<'a> {
    fn lines(&self, t: f64) -> Result<Vec<NodalLine>, CmdError> {
        let spec = self.cfg.spec().map_err(|e| CmdError::Other(e.to_string()))?;
        let nctx = NodalContext::new(&spec, t, self.cfg.nodal_params());
        let lines = match self.seed {
            Some(seed) => {
                let node = find_nodal_point(&nctx, &seed)
                    .map_err(|e| CmdError::Other(format!("seeded node search failed: {e}")))?;
                vec![trace_nodal_line(&nctx, &node)
                    .map_err(|e| CmdError::Other(format!("trace failed: {e}")))?]
            }
            None => trace_all_lines(&nctx),
        };
        if lines.is_empty() {
            return Err(CmdError::Other(format!("no nodal lines found at t = {t}")));
        }
        Ok(lines)
    }

    fn manifest(&self, command: &str) -> RunManifest {
        RunManifest::new(command, self.cfg.hash())
    }

    fn write_config(&self) -> Result<(), CmdError> {
        crate::output::write_atomic(
            &self.out.join("config.toml"),
            self.cfg.canonical_toml().as_bytes(),
        )?;
        Ok(())
    }
}

/// Grid samples of |Psi|^2, phase and velocity on a 2-d slice of the box.
pub fn cmd_field(ctx: &Ctx) -> Result<Outcome, CmdError> {
    let cfg = ctx.cfg;
    let spec = cfg.spec().map_err(|e| CmdError::Other(e.to_string()))?;
    let mut manifest = ctx.manifest("field");
    let n = cfg.field.resolution;
    let axis = match cfg.field.slice_axis.as_str() {
        "x" => 0,
        "y" => 1,
        _ => 2,
    };
    let (a1, a2) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let lo = cfg.scan.box_min;
    let hi = cfg.scan.box_max;
    let coord = |axis: usize, i: usize| {
        lo[axis] + (hi[axis] - lo[axis]) * i as f64 / (n - 1) as f64
    };
    let mut csv = CsvWriter::new(
        ctx.out.join("field.csv"),
        "x,y,z,rho,phase,vx,vy,vz",
    );
    for i in 0..n {
        for j in 0..n {
            let mut x = Vector3::new(0.0, 0.0, 0.0);
            x[axis] = cfg.field.slice_offset;
            x[a1] = coord(a1, i);
            x[a2] = coord(a2, j);
            let s = eval_field(&spec, &x, cfg.t);
            let v = bohmian_velocity(&spec, &x, cfg.t)
                .unwrap_or_else(|_| Vector3::new(f64::NAN, f64::NAN, f64::NAN));
            csv.row_f64(&[
                x[0],
                x[1],
                x[2],
                s.psi.norm_sqr(),
                s.psi.arg(),
                v[0],
                v[1],
                v[2],
            ]);
        }
    }
    csv.finish()?;
    manifest.stat("rows", (n * n) as u64);
    ctx.write_config()?;
    manifest.finish(ctx.out)?;
    Ok(Outcome::Complete)
}

/// Trace nodal lines and emit one CSV per line.
pub fn cmd_nodal(ctx: &Ctx) -> Result<Outcome, CmdError> {
    let lines = ctx.lines(ctx.cfg.t)?;
    let mut manifest = ctx.manifest("nodal");
    let mut partial = false;
    for (k, line) in lines.iter().enumerate() {
        let mut csv = CsvWriter::new(
            ctx.out.join(format!("nodal_line_{k}.csv")),
            "s,x,y,z,tx,ty,tz,nx,ny,nz,bx,by,bz,Vu,Vv,R0curv",
        );
        for p in &line.points {
            let (vu, vv) = p.velocity_uv();
            csv.row_f64(&[
                p.s,
                p.r0[0],
                p.r0[1],
                p.r0[2],
                p.frame.tangent[0],
                p.frame.tangent[1],
                p.frame.tangent[2],
                p.frame.normal[0],
                p.frame.normal[1],
                p.frame.normal[2],
                p.frame.binormal[0],
                p.frame.binormal[1],
                p.frame.binormal[2],
                vu,
                vv,
                p.curvature_radius,
            ]);
        }
        csv.finish()?;
        if !line.warnings.is_empty() {
            partial = true;
            manifest.warn(format!("line {k}: {:?}", line.warnings));
        }
    }
    manifest.stat("lines", lines.len() as u64);
    manifest.stat(
        "points",
        lines.iter().map(|l| l.points.len() as u64).sum::<u64>(),
    );
    ctx.write_config()?;
    manifest.finish(ctx.out)?;
    Ok(if partial { Outcome::Partial } else { Outcome::Complete })
}

/// Per-node complex diagnostics along each traced line.
pub fn cmd_npxpc(ctx: &Ctx) -> Result<Outcome, CmdError> {
    let cfg = ctx.cfg;
    let spec = cfg.spec().map_err(|e| CmdError::Other(e.to_string()))?;
    let lines = ctx.lines(cfg.t)?;
    let mut manifest = ctx.manifest("npxpc");
    let mut partial = false;
    for (k, line) in lines.iter().enumerate() {
        let mut csv = CsvWriter::new(
            ctx.out.join(format!("npxpc_{k}.csv")),
            "s,A,f3,Vu,Vv,vfast_ratio,hopf_flag,node_type",
        );
        // f3 along the line to mark sign-change (Hopf) brackets.
        let rows: Vec<_> = line
            .points
            .iter()
            .map(|p| {
                let e = local_expansion(&spec, p).ok();
                let c = e.as_ref().map(flow_coefficients);
                let f3 = c
                    .as_ref()
                    .and_then(|c| f3_average(c).ok())
                    .unwrap_or(f64::NAN);
                (p, e, c, f3)
            })
            .collect();
        for (i, (p, e, c, f3)) in rows.iter().enumerate() {
            let (vu, vv) = p.velocity_uv();
            let ratio = e.as_ref().map(vfast_diagnostic).unwrap_or(f64::NAN);
            let a = c.as_ref().map(|c| c.a).unwrap_or(f64::NAN);
            let node_type = c
                .as_ref()
                .and_then(|c| spiral_prediction(c).ok())
                .map(|sp| sp.node_type);
            let hopf = {
                let prev = i.checked_sub(1).map(|j| rows[j].3);
                let next = rows.get(i + 1).map(|r| r.3);
                let change = |a: f64, b: f64| a.is_finite() && b.is_finite() && a * b < 0.0;
                prev.map_or(false, |pf| change(pf, *f3))
                    || next.map_or(false, |nf| change(*f3, nf))
            };
            if !f3.is_finite() {
                partial = true;
            }
            csv.row(&[
                fmt(p.s),
                fmt(a),
                fmt(*f3),
                fmt(vu),
                fmt(vv),
                fmt(ratio),
                (hopf as u8).to_string(),
                match node_type {
                    Some(NodeType::Attractor) => "attractor".into(),
                    Some(NodeType::Repellor) => "repellor".into(),
                    Some(NodeType::Center) => "center".into(),
                    None => "degenerate".into(),
                },
            ]);
        }
        csv.finish()?;
    }
    manifest.stat("lines", lines.len() as u64);
    ctx.write_config()?;
    manifest.finish(ctx.out)?;
    Ok(if partial { Outcome::Partial } else { Outcome::Complete })
}

/// X-line assembly; per-node failures become nan rows (gaps).
pub fn cmd_xline(ctx: &Ctx) -> Result<Outcome, CmdError> {
    let cfg = ctx.cfg;
    let spec = cfg.spec().map_err(|e| CmdError::Other(e.to_string()))?;
    let lines = ctx.lines(cfg.t)?;
    let mut manifest = ctx.manifest("xline");
    let mut worst_gap = 0.0f64;
    for (k, line) in lines.iter().enumerate() {
        let xline = build_xline(&spec, line, cfg.xpoint.x_tol);
        let mut csv = CsvWriter::new(
            ctx.out.join(format!("xline_{k}.csv")),
            "s,x,y,z,u,v,w,lam1,lam2,lam3,dX,residual",
        );
        for entry in &xline.entries {
            match &entry.xpoint {
                Some(xp) => csv.row_f64(&[
                    entry.s,
                    xp.world[0],
                    xp.world[1],
                    xp.world[2],
                    xp.uvw[0],
                    xp.uvw[1],
                    xp.uvw[2],
                    xp.eigenvalues[0],
                    xp.eigenvalues[1],
                    xp.eigenvalues[2],
                    xp.d_x,
                    xp.residual,
                ]),
                None => {
                    let nan = f64::NAN;
                    csv.row_f64(&[entry.s, nan, nan, nan, nan, nan, nan, nan, nan, nan, nan, nan]);
                }
            }
        }
        csv.finish()?;
        let gap = xline.gap_fraction();
        worst_gap = worst_gap.max(gap);
        manifest.stat(&format!("gap_fraction_line_{k}"), gap);
    }
    ctx.write_config()?;
    manifest.finish(ctx.out)?;
    Ok(if worst_gap > 0.0 { Outcome::Partial } else { Outcome::Complete })
}

/// Manifold branches for sampled X-points along each line, as JSON.
pub fn cmd_manifolds(ctx: &Ctx) -> Result<Outcome, CmdError> {
    let cfg = ctx.cfg;
    let spec = cfg.spec().map_err(|e| CmdError::Other(e.to_string()))?;
    let lines = ctx.lines(cfg.t)?;
    let mut manifest = ctx.manifest("manifolds");
    let params = cfg.manifold_params();
    let mut all = Vec::new();
    let mut missing = 0usize;
    for (k, line) in lines.iter().enumerate() {
        let xline = build_xline(&spec, line, cfg.xpoint.x_tol);
        let found: Vec<_> = xline.found().collect();
        if found.is_empty() {
            missing += 1;
            continue;
        }
        let n = cfg.manifolds.n_samples.min(found.len()).max(1);
        for i in 0..n {
            let idx = i * (found.len() - 1) / n.max(1);
            let idx = idx.min(found.len() - 1);
            let (entry, xp) = found[idx];
            let pt_idx = line
                .points
                .binary_search_by(|p| p.s.partial_cmp(&entry.s).unwrap())
                .unwrap_or_else(|e| e.min(line.points.len() - 1));
            let p = &line.points[pt_idx];
            let branches = manifold_branches(&spec, xp, p, &params);
            all.push(serde_json::json!({
                "line": k,
                "s": entry.s,
                "xpoint": xp,
                "branches": branches,
            }));
        }
    }
    write_json(&ctx.out.join("manifolds.json"), &all)?;
    manifest.stat("xpoints", all.len() as u64);
    manifest.stat("lines_without_xpoints", missing as u64);
    ctx.write_config()?;
    manifest.finish(ctx.out)?;
    Ok(if missing > 0 { Outcome::Partial } else { Outcome::Complete })
}

fn trajectory_rows(
    cfg: &RunConfig,
    dist: Option<&[f64]>,
) -> Result<(Vec<[f64; 7]>, vortexline::dynamics::Trajectory), CmdError> {
    let spec = cfg.spec().map_err(|e| CmdError::Other(e.to_string()))?;
    let traj = integrate_with_deviation(
        &spec,
        &cfg.x0(),
        &Vector3::new(1.0, 0.0, 0.0),
        (cfg.trajectory.t_span[0], cfg.trajectory.t_span[1]),
        &cfg.integrator_options(),
        DeviationMode::Variational,
    )
    .map_err(|e| CmdError::Other(format!("trajectory failed: {e}")))?;
    let mut rows = Vec::with_capacity(traj.samples.len());
    for (i, s) in traj.samples.iter().enumerate() {
        let chi = if i == 0 {
            0.0
        } else {
            s.accumulated_log_stretch / (s.t - traj.samples[0].t)
        };
        let d = dist.map(|d| d[i]).unwrap_or(f64::NAN);
        rows.push([s.t, s.x[0], s.x[1], s.x[2], s.log_growth, chi, d]);
    }
    Ok((rows, traj))
}

/// Trajectory CSV (distance column filled by the chaos command).
pub fn cmd_trajectory(ctx: &Ctx) -> Result<Outcome, CmdError> {
    let mut cfg = ctx.cfg.clone();
    if let Some(seed) = ctx.seed {
        cfg.trajectory.x0 = [seed[0], seed[1], seed[2]];
    }
    let mut manifest = ctx.manifest("trajectory");
    let (rows, traj) = trajectory_rows(&cfg, None)?;
    let mut csv = CsvWriter::new(
        ctx.out.join("trajectory.csv"),
        "t,x,y,z,alpha,chi,min_dist_xline",
    );
    for r in &rows {
        csv.row_f64(r);
    }
    csv.finish()?;
    manifest.stat("samples", rows.len() as u64);
    manifest.stat("min_psi", traj.stats.min_psi);
    manifest.stat("steps_accepted", traj.stats.accepted);
    manifest.stat("steps_rejected", traj.stats.rejected);
    ctx.write_config()?;
    manifest.finish(ctx.out)?;
    Ok(Outcome::Complete)
}

/// Full chaos pipeline: trajectory, stretching numbers, distance to the
/// X-line, event correlation. Emits the report JSON, the figure-style panel
/// CSV and the filled trajectory CSV.
pub fn cmd_chaos(ctx: &Ctx) -> Result<Outcome, CmdError> {
    let mut cfg = ctx.cfg.clone();
    if let Some(seed) = ctx.seed {
        cfg.trajectory.x0 = [seed[0], seed[1], seed[2]];
    }
    let spec = cfg.spec().map_err(|e| CmdError::Other(e.to_string()))?;
    let mut manifest = ctx.manifest("chaos");
    let (_, traj) = trajectory_rows(&cfg, None)?;
    let series = stretching_numbers(&traj).map_err(|e| CmdError::Other(e.to_string()))?;
    let dparams = DistanceParams {
        line_dt: cfg.chaos.line_dt,
        nodal: cfg.nodal_params(),
        x_tol: cfg.xpoint.x_tol,
    };
    let dist = distance_to_xline(&spec, &traj, &dparams)
        .map_err(|e| CmdError::Other(e.to_string()))?;
    let threshold = (cfg.chaos.jump_threshold > 0.0).then_some(cfg.chaos.jump_threshold);
    let window = (cfg.chaos.window > 0.0).then_some(cfg.chaos.window);
    let (events, summary) = correlate_events(&series, &dist, threshold, window);

    let report = serde_json::json!({
        "trajectory": {
            "x0": cfg.trajectory.x0,
            "t_span": cfg.trajectory.t_span,
        },
        "t0": series.t0,
        "alphas": series.alphas,
        "chi": series.chi,
        "dist": dist.dist,
        "events": events,
        "summary": summary,
    });
    write_json(&ctx.out.join("chaos_report.json"), &report)?;

    // Figure-style panels: t, alpha, log10|alpha|, d.
    let mut panels = CsvWriter::new(
        ctx.out.join("chaos_panels.csv"),
        "t,alpha,log10_abs_alpha,d",
    );
    for (k, a) in series.alphas.iter().enumerate() {
        let t = series.t_start + (k + 1) as f64 * series.t0;
        panels.row_f64(&[t, *a, a.abs().log10(), dist.dist[k + 1]]);
    }
    panels.finish()?;

    let (rows, _) = trajectory_rows(&cfg, Some(&dist.dist))?;
    let mut csv = CsvWriter::new(
        ctx.out.join("trajectory.csv"),
        "t,x,y,z,alpha,chi,min_dist_xline",
    );
    for r in &rows {
        csv.row_f64(r);
    }
    csv.finish()?;

    manifest.stat("jumps", summary.n_jumps as u64);
    manifest.stat("matched", summary.n_matched as u64);
    manifest.stat("jump_threshold", summary.jump_threshold);
    manifest.stat("window", summary.window);
    manifest.stat("lost_samples", dist.lost.len() as u64);
    for t in &dist.lost {
        manifest.warn(format!("distance lost at t = {t}"));
    }
    ctx.write_config()?;
    manifest.finish(ctx.out)?;
    Ok(if dist.lost.is_empty() {
        Outcome::Complete
    } else {
        Outcome::Partial
    })
}

/// Scan <f3> along the line (space) or along time for one node, reporting
/// sign-change (Hopf) events refined by bisection.
pub fn cmd_hopf_scan(ctx: &Ctx) -> Result<Outcome, CmdError> {
    let cfg = ctx.cfg;
    let spec = cfg.spec().map_err(|e| CmdError::Other(e.to_string()))?;
    let mut manifest = ctx.manifest("hopf-scan");
    let mut partial = false;

    let f3_of_point = |p: &vortexline::nodal::NodalPoint| -> Option<f64> {
        let e = local_expansion(&spec, p).ok()?;
        f3_average(&flow_coefficients(&e)).ok()
    };

    let mut all_events = Vec::new();
    if cfg.hopf.kind == "space" {
        let lines = ctx.lines(cfg.t)?;
        for (k, line) in lines.iter().enumerate() {
            let mut csv = CsvWriter::new(
                ctx.out.join(format!("hopf_scan_{k}.csv")),
                "s,f3",
            );
            let scan: Vec<(f64, f64)> = line
                .points
                .iter()
                .map(|p| (p.s, f3_of_point(p).unwrap_or(f64::NAN)))
                .collect();
            for (s, f3) in &scan {
                csv.row_f64(&[*s, *f3]);
            }
            csv.finish()?;
            if scan.iter().any(|(_, f)| f.is_nan()) {
                partial = true;
            }
            let nctx = NodalContext::new(&spec, cfg.t, cfg.nodal_params());
            let events = detect_hopf_refined(&scan, HopfKind::Space, |s| {
                // Re-converge the node at arclength s by seeding from the
                // interpolated polyline position.
                let idx = line
                    .points
                    .partition_point(|p| p.s < s)
                    .clamp(1, line.points.len() - 1);
                let (p0, p1) = (&line.points[idx - 1], &line.points[idx]);
                let w = (s - p0.s) / (p1.s - p0.s);
                let guess = p0.r0 + (p1.r0 - p0.r0) * w;
                let node = vortexline::nodal::local_node_with_frame(&nctx, &guess).ok()?;
                f3_of_point(&node)
            });
            for ev in events {
                all_events.push(serde_json::json!({ "line": k, "event": ev }));
            }
        }
    } else {
        // Time scan at a fixed node, tracked through time from the seed.
        let seed = ctx
            .seed
            .unwrap_or_else(|| Vector3::from(cfg.trajectory.x0));
        let (ta, tb) = (cfg.hopf.t_span[0], cfg.hopf.t_span[1]);
        let n = cfg.hopf.n_samples.max(2);
        let mut guess = seed;
        let mut scan = Vec::with_capacity(n);
        let mut csv = CsvWriter::new(ctx.out.join("hopf_scan_time.csv"), "t,f3");
        for i in 0..n {
            let t = ta + (tb - ta) * i as f64 / (n - 1) as f64;
            let nctx = NodalContext::new(&spec, t, cfg.nodal_params());
            let f3 = match vortexline::nodal::local_node_with_frame(&nctx, &guess) {
                Ok(node) => {
                    guess = node.r0;
                    f3_of_point(&node).unwrap_or(f64::NAN)
                }
                Err(_) => {
                    partial = true;
                    f64::NAN
                }
            };
            scan.push((t, f3));
            csv.row_f64(&[t, f3]);
        }
        csv.finish()?;
        let track = guess;
        let events = detect_hopf_refined(&scan, HopfKind::Time, |t| {
            let nctx = NodalContext::new(&spec, t, cfg.nodal_params());
            let node = vortexline::nodal::local_node_with_frame(&nctx, &track).ok()?;
            f3_of_point(&node)
        });
        for ev in events {
            all_events.push(serde_json::json!({ "event": ev }));
        }
    }
    write_json(&ctx.out.join("hopf_events.json"), &all_events)?;
    manifest.stat("events", all_events.len() as u64);
    ctx.write_config()?;
    manifest.finish(ctx.out)?;
    Ok(if partial { Outcome::Partial } else { Outcome::Complete })
}

//! Chaos diagnostics: stretching numbers, finite-time Lyapunov numbers,
//! the distance-to-X-line series, and the correlation between stretching
//! jumps and close encounters with the X-line.
//!
//! The distance protocol is deliberately approximate: at every sample the
//! trajectory is projected to the closest node of the nodal line at that
//! time, and the X-point of that node's F-plane stands in for the nearest
//! X-line point. Nodal lines are re-traced on a coarse time grid for the
//! nearest-node association only; every reported quantity is re-converged at
//! the exact sample time.

use nalgebra::Vector3;
use serde::Serialize;
use thiserror::Error;

use crate::dynamics::Trajectory;
use crate::nodal::{local_node_with_frame, NodalContext, NodalLine, NodalParams};
use crate::wavefield::WavefunctionSpec;
use crate::xstruct::{build_xline, xpoint_for_node, XLine};

#[derive(Debug, Error)]
pub enum ChaosError {
    #[error("no nodal line could be traced at t = {t}")]
    LineLost { t: f64 },
    #[error("trajectory has no deviation data")]
    NoDeviation,
}

/// Stretching numbers `alpha_k = ln(xi_{k+1}/xi_k)` at uniform interval `t0`,
/// with the running finite-time Lyapunov number
/// `chi(k) = (1/(k t0)) sum_{i<=k} alpha_i`.
#[derive(Debug, Clone, Serialize)]
pub struct DeviationSeries {
    pub t_start: f64,
    pub t0: f64,
    /// `alphas[k-1]` covers the sampling interval ending at `t_start + k t0`.
    pub alphas: Vec<f64>,
    pub chi: Vec<f64>,
}

/// Extract the stretching-number series from a trajectory integrated with
/// deviations (pre-renormalization norms).
pub fn stretching_numbers(traj: &Trajectory) -> Result<DeviationSeries, ChaosError> {
    if traj.samples.len() < 2 || traj.samples[1].deviation.is_none() {
        return Err(ChaosError::NoDeviation);
    }
    let t0 = traj.samples[1].t - traj.samples[0].t;
    let alphas: Vec<f64> = traj.samples[1..].iter().map(|s| s.log_growth).collect();
    let mut chi = Vec::with_capacity(alphas.len());
    let mut acc = 0.0;
    for (k, a) in alphas.iter().enumerate() {
        acc += a;
        chi.push(acc / ((k + 1) as f64 * t0));
    }
    Ok(DeviationSeries {
        t_start: traj.samples[0].t,
        t0,
        alphas,
        chi,
    })
}

/// `chi(kappa)`, 1-based `kappa`.
pub fn finite_time_lcn(series: &DeviationSeries, kappa: usize) -> f64 {
    assert!(kappa >= 1 && kappa <= series.alphas.len());
    series.alphas[..kappa].iter().sum::<f64>() / (kappa as f64 * series.t0)
}

/// Distance series from a trajectory to the (approximated) X-line.
#[derive(Debug, Clone, Serialize)]
pub struct DistanceSeries {
    pub times: Vec<f64>,
    /// Distance per sample; NaN where the line or X-point was lost.
    pub dist: Vec<f64>,
    /// Sample times where the nodal line could not be associated.
    pub lost: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct DistanceParams {
    /// Re-trace interval for the nodal-line snapshots.
    pub line_dt: f64,
    pub nodal: NodalParams,
    /// Relative X-point residual tolerance.
    pub x_tol: f64,
}

impl Default for DistanceParams {
    fn default() -> Self {
        Self {
            line_dt: 0.1,
            nodal: NodalParams::default(),
            x_tol: 1e-10,
        }
    }
}

/// Per-sample minimum distance between the trajectory and the X-line,
/// approximated by the closest X-point over the traced nodal lines.
///
/// Snapshot nodal lines and X-lines are cached on the `line_dt` grid and used
/// for the nearest-complex association; the winning node and its X-point are
/// then re-converged at the exact sample time (seeded from the snapshot
/// solution). Missing values are NaN, never interpolated.
pub fn distance_to_xline(
    spec: &WavefunctionSpec,
    traj: &Trajectory,
    params: &DistanceParams,
) -> Result<DistanceSeries, ChaosError> {
    let times: Vec<f64> = traj.samples.iter().map(|s| s.t).collect();
    let (t_first, t_last) = (times[0], *times.last().unwrap());
    let n_snap = (((t_last - t_first) / params.line_dt).abs().ceil() as usize).max(1) + 1;
    let dir = (t_last - t_first).signum();

    let snap_times: Vec<f64> = (0..n_snap)
        .map(|j| t_first + dir * j as f64 * params.line_dt)
        .collect();
    let snapshots: Vec<Vec<(NodalLine, XLine)>> = crate::parallel::map_collect(&snap_times, |&tj| {
        let ctx = NodalContext::new(spec, tj, params.nodal);
        crate::nodal::trace_all_lines(&ctx)
            .into_iter()
            .map(|line| {
                let xline = build_xline(spec, &line, params.x_tol);
                (line, xline)
            })
            .collect()
    });

    // Exact-time distance to the X-point of the complex seeded at
    // `(node_seed, x_seed)`; also returns the refreshed seeds for tracking.
    let refine = |t: f64,
                  x: &Vector3<f64>,
                  node_seed: &Vector3<f64>,
                  x_seed: Option<Vector3<f64>>|
     -> Option<(f64, Vector3<f64>, Vector3<f64>)> {
        let ctx = NodalContext::new(spec, t, params.nodal);
        let node = local_node_with_frame(&ctx, node_seed).ok()?;
        let xp = xpoint_for_node(spec, &node, x_seed, params.x_tol).ok()?;
        Some(((x - xp.world_vec()).norm(), node.r0, xp.uvw_vec()))
    };

    // Candidate complex from the snapshot caches: the X-point nearest to x
    // (falling back to the nearest node when a snapshot X-line is empty).
    let snapshot_candidate = |j: usize,
                              x: &Vector3<f64>|
     -> Option<(Vector3<f64>, Option<Vector3<f64>>)> {
        let cached = &snapshots[j];
        let mut best: Option<(f64, Vector3<f64>, Vector3<f64>)> = None;
        for (line, xline) in cached {
            for (entry, xp) in xline.found() {
                let d = (x - xp.world_vec()).norm();
                if best.as_ref().map_or(true, |(bd, _, _)| d < *bd) {
                    let idx = line
                        .points
                        .binary_search_by(|p| p.s.partial_cmp(&entry.s).unwrap())
                        .unwrap_or_else(|i| i.min(line.points.len() - 1));
                    best = Some((d, line.points[idx].r0, xp.uvw_vec()));
                }
            }
        }
        if let Some((_, node, uvw)) = best {
            return Some((node, Some(uvw)));
        }
        let mut nearest: Option<(f64, Vector3<f64>)> = None;
        for (line, _) in cached {
            if line.points.is_empty() {
                continue;
            }
            let (idx, d) = line.nearest(x);
            if nearest.map_or(true, |(bd, _)| d < bd) {
                nearest = Some((d, line.points[idx].r0));
            }
        }
        nearest.map(|(_, node)| (node, None))
    };

    // Sequential sweep with complex tracking: the previous sample's complex
    // is re-converged at the new time and competes with the snapshot-nearest
    // candidate; the closer one wins and becomes the tracked complex.
    let mut dist = Vec::with_capacity(times.len());
    let mut tracked: Option<(Vector3<f64>, Vector3<f64>)> = None;
    for sample in &traj.samples {
        let j =
            (((sample.t - t_first) / params.line_dt).abs().round() as usize).min(n_snap - 1);
        let from_tracked = tracked
            .as_ref()
            .and_then(|(node, uvw)| refine(sample.t, &sample.x, node, Some(*uvw)));
        let from_snapshot = snapshot_candidate(j, &sample.x)
            .and_then(|(node, uvw)| refine(sample.t, &sample.x, &node, uvw));
        let best = match (from_tracked, from_snapshot) {
            (Some(a), Some(b)) => Some(if a.0 <= b.0 { a } else { b }),
            (a, b) => a.or(b),
        };
        match best {
            Some((d, node, uvw)) => {
                tracked = Some((node, uvw));
                dist.push(d);
            }
            None => {
                tracked = None;
                dist.push(f64::NAN);
            }
        }
    }

    let lost = times
        .iter()
        .zip(&dist)
        .filter(|(_, d)| d.is_nan())
        .map(|(t, _)| *t)
        .collect();
    Ok(DistanceSeries { times, dist, lost })
}

/// A stretching-number jump paired (or not) with a distance minimum.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct EncounterEvent {
    pub t_jump: f64,
    pub alpha_peak: f64,
    pub t_min_dist: f64,
    pub d_min: f64,
    pub matched: bool,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ChaosSummary {
    pub n_jumps: usize,
    pub n_matched: usize,
    pub fraction_matched: f64,
    /// Largest distance observed at any jump time (NaN when no jumps).
    pub max_d_at_jump: f64,
    pub jump_threshold: f64,
    pub window: f64,
}

/// Correlate |alpha| jumps with local minima of the distance series.
///
/// `jump_threshold` defaults to `max(3 * median |alpha|, 0.25 * max |alpha|)`
/// over the run: the median floor rejects plain noise, while the prominence
/// floor keeps the small |alpha| oscillation that rides on any Bohmian
/// trajectory between encounters from registering as jumps. `window` defaults
/// to two sampling intervals.
pub fn correlate_events(
    series: &DeviationSeries,
    dist: &DistanceSeries,
    jump_threshold: Option<f64>,
    window: Option<f64>,
) -> (Vec<EncounterEvent>, ChaosSummary) {
    let t0 = series.t0;
    let window = window.unwrap_or(2.0 * t0);
    let threshold = jump_threshold.unwrap_or_else(|| {
        let mut mags: Vec<f64> = series.alphas.iter().map(|a| a.abs()).collect();
        mags.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if mags.is_empty() {
            return 0.0;
        }
        let med = mags[mags.len() / 2];
        let max = mags[mags.len() - 1];
        (3.0 * med).max(0.25 * max)
    });

    // alpha_k lives at time t_start + k t0 (k = 1-based index into alphas+1).
    let alpha_time = |k: usize| series.t_start + (k + 1) as f64 * t0;
    let n = series.alphas.len();
    let mut jumps: Vec<(f64, f64)> = Vec::new();
    for k in 0..n {
        let a = series.alphas[k].abs();
        if a <= threshold {
            continue;
        }
        let left = if k > 0 { series.alphas[k - 1].abs() } else { -f64::INFINITY };
        let right = if k + 1 < n {
            series.alphas[k + 1].abs()
        } else {
            -f64::INFINITY
        };
        if a >= left && a > right {
            jumps.push((alpha_time(k), series.alphas[k]));
        }
    }

    // Local minima of the distance series (NaN-aware).
    let mut minima: Vec<(f64, f64)> = Vec::new();
    let d = &dist.dist;
    for i in 0..d.len() {
        if !d[i].is_finite() {
            continue;
        }
        let left = if i > 0 && d[i - 1].is_finite() {
            d[i - 1]
        } else {
            f64::INFINITY
        };
        let right = if i + 1 < d.len() && d[i + 1].is_finite() {
            d[i + 1]
        } else {
            f64::INFINITY
        };
        if d[i] <= left && d[i] < right {
            minima.push((dist.times[i], d[i]));
        }
    }

    let mut events = Vec::new();
    let mut n_matched = 0;
    let mut max_d_at_jump = f64::NAN;
    for &(tj, alpha) in &jumps {
        let mut best: Option<(f64, f64)> = None;
        for &(tm, dm) in &minima {
            let gap = (tm - tj).abs();
            if gap <= window + 1e-12
                && best.map_or(true, |(bt, _)| gap < (bt - tj).abs())
            {
                best = Some((tm, dm));
            }
        }
        let (t_min_dist, d_min, matched) = match best {
            Some((tm, dm)) => (tm, dm, true),
            None => (f64::NAN, f64::NAN, false),
        };
        if matched {
            n_matched += 1;
        }
        // Distance at the jump time itself.
        let idx = dist
            .times
            .iter()
            .position(|&t| (t - tj).abs() < 0.5 * t0)
            .unwrap_or(0);
        let d_here = dist.dist[idx];
        if d_here.is_finite() && !(d_here <= max_d_at_jump) {
            max_d_at_jump = d_here;
        }
        events.push(EncounterEvent {
            t_jump: tj,
            alpha_peak: alpha,
            t_min_dist,
            d_min,
            matched,
        });
    }
    let summary = ChaosSummary {
        n_jumps: events.len(),
        n_matched,
        fraction_matched: if events.is_empty() {
            1.0
        } else {
            n_matched as f64 / events.len() as f64
        },
        max_d_at_jump,
        jump_threshold: threshold,
        window,
    };
    (events, summary)
}

//! CSV tables and hand-written SVG plots.

use std::fmt::Write as _;
use std::path::Path;

use gmd_core::goals::{KeyframeSet, Obstacle, SdfMap};
use gmd_core::schedule::NoiseSchedule;
use gmd_core::Tensor;

use crate::error::{ensure_parent, io_err, write_bytes, CliError, CliResult};

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    CliError::usage(format!("{}: {e}", path.display()))
}

/// Column names of a raw sequence: the three trajectory channels, then
/// `ch3`, `ch4`, ...
pub fn channel_names(rows: usize) -> Vec<String> {
    (0..rows)
        .map(|r| match r {
            0 => "rot".to_string(),
            1 => "x".to_string(),
            2 => "z".to_string(),
            _ => format!("ch{r}"),
        })
        .collect()
}

/// One row per frame: `frame, rot, x, z, ch3, ...`.
pub fn write_sequence_csv(path: &Path, seq: &Tensor<f64>) -> CliResult<()> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["frame".to_string()];
    header.extend(channel_names(seq.rows()));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for c in 0..seq.cols() {
        let mut rec = vec![c.to_string()];
        rec.extend((0..seq.rows()).map(|r| seq.at(r, c).to_string()));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Every coefficient of the schedule, one row per step.
pub fn write_schedule_csv(path: &Path, sched: &NoiseSchedule) -> CliResult<()> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["t", "beta", "alpha_bar", "a", "b", "sigma2", "c", "d", "x0_share", "eps_share"])
        .map_err(|e| csv_err(path, e))?;
    for row in sched.contribution_shares() {
        let t = row.t;
        let p = sched.posterior_coefficients(t)?;
        let e = sched.epsilon_coefficients(t)?;
        let vals = [sched.beta(t), sched.alpha_bar(t), p.a, p.b, p.sigma2, e.c, e.d, row.x0_share, row.eps_share];
        let mut rec = vec![t.to_string()];
        rec.extend(vals.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    write_bytes(path, text)
}

const SIZE: f64 = 480.0;
const MARGIN: f64 = 24.0;

/// Maps world (x, z) onto the canvas with z pointing up.
struct View {
    min: [f64; 2],
    scale: f64,
}

impl View {
    fn fit(points: impl Iterator<Item = [f64; 2]>) -> View {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in points {
            for k in 0..2 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        if !lo[0].is_finite() {
            lo = [-1.0, -1.0];
            hi = [1.0, 1.0];
        }
        let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-6) * 1.1;
        let centre = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0];
        View { min: [centre[0] - span / 2.0, centre[1] - span / 2.0], scale: (SIZE - 2.0 * MARGIN) / span }
    }

    fn px(&self, p: [f64; 2]) -> (f64, f64) {
        (MARGIN + (p[0] - self.min[0]) * self.scale, SIZE - MARGIN - (p[1] - self.min[1]) * self.scale)
    }
}

fn obstacle_extent(o: &Obstacle) -> [[f64; 2]; 2] {
    match *o {
        Obstacle::Circle { center, radius } => {
            [[center[0] - radius, center[1] - radius], [center[0] + radius, center[1] + radius]]
        }
        Obstacle::Box { min, max } => [min, max],
    }
}

/// Overhead view: obstacles as crossed regions, keyframes as double circles,
/// trajectories as polylines.
pub fn overhead_svg(paths: &[Tensor<f64>], keys: &KeyframeSet, map: &SdfMap) -> String {
    let mut pts: Vec<[f64; 2]> = Vec::new();
    for p in paths {
        pts.extend((0..p.cols()).map(|c| [p.at(1, c), p.at(2, c)]));
    }
    pts.extend(keys.keys.iter().map(|k| [k.x, k.z]));
    for o in &map.obstacles {
        pts.extend(obstacle_extent(o));
    }
    let v = View::fit(pts.into_iter());
    let mut s = String::new();
    let _ = writeln!(s, r##"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"##);
    let _ = writeln!(s, r##"<rect width="100%" height="100%" fill="white"/>"##);
    for o in &map.obstacles {
        let [lo, hi] = obstacle_extent(o);
        let (x0, y1) = v.px(lo);
        let (x1, y0) = v.px(hi);
        match *o {
            Obstacle::Circle { center, radius } => {
                let (cx, cy) = v.px(center);
                let r = radius * v.scale;
                let _ = writeln!(s, r##"<circle cx="{cx:.2}" cy="{cy:.2}" r="{r:.2}" fill="#f4cccc" stroke="#a33"/>"##);
            }
            Obstacle::Box { .. } => {
                let _ = writeln!(
                    s,
                    r##"<rect x="{x0:.2}" y="{y0:.2}" width="{:.2}" height="{:.2}" fill="#f4cccc" stroke="#a33"/>"##,
                    x1 - x0,
                    y1 - y0
                );
            }
        }
        let _ = writeln!(s, r##"<path d="M{x0:.2},{y0:.2} L{x1:.2},{y1:.2} M{x0:.2},{y1:.2} L{x1:.2},{y0:.2}" stroke="#a33"/>"##);
    }
    let colours = ["#1f5fa8", "#2a8c4a", "#b8681c", "#7a3fa0", "#3f8f8f"];
    for (i, p) in paths.iter().enumerate() {
        let pts: Vec<String> = (0..p.cols())
            .map(|c| {
                let (x, y) = v.px([p.at(1, c), p.at(2, c)]);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let _ = writeln!(
            s,
            r##"<polyline points="{}" fill="none" stroke="{}" stroke-width="2"/>"##,
            pts.join(" "),
            colours[i % colours.len()]
        );
    }
    for k in &keys.keys {
        let (x, y) = v.px([k.x, k.z]);
        let _ = writeln!(s, r##"<circle cx="{x:.2}" cy="{y:.2}" r="7" fill="none" stroke="black"/>"##);
        let _ = writeln!(s, r##"<circle cx="{x:.2}" cy="{y:.2}" r="4" fill="none" stroke="black"/>"##);
    }
    s.push_str("</svg>\n");
    s
}

/// The two contribution shares against `t`.
pub fn shares_svg(sched: &NoiseSchedule) -> String {
    let rows = sched.contribution_shares();
    let n = rows.len().max(2) as f64;
    let (w, h) = (SIZE, SIZE * 0.6);
    let line = |f: &dyn Fn(&gmd_core::schedule::ShareRow) -> f64| -> String {
        rows.iter()
            .enumerate()
            .map(|(i, r)| {
                let x = MARGIN + i as f64 / (n - 1.0) * (w - 2.0 * MARGIN);
                let y = h - MARGIN - f(r).clamp(0.0, 1.0) * (h - 2.0 * MARGIN);
                format!("{x:.2},{y:.2}")
            })
            .collect::<Vec<_>>()
            .join(" ")
    };
    let mut s = String::new();
    let _ = writeln!(s, r##"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"##);
    let _ = writeln!(s, r##"<rect width="100%" height="100%" fill="white"/>"##);
    let _ = writeln!(
        s,
        r##"<rect x="{MARGIN}" y="{MARGIN}" width="{}" height="{}" fill="none" stroke="#888"/>"##,
        w - 2.0 * MARGIN,
        h - 2.0 * MARGIN
    );
    let _ = writeln!(s, r##"<polyline points="{}" fill="none" stroke="#1f5fa8" stroke-width="2"/>"##, line(&|r| r.x0_share));
    let _ = writeln!(s, r##"<polyline points="{}" fill="none" stroke="#b8681c" stroke-width="2"/>"##, line(&|r| r.eps_share));
    let _ = writeln!(s, r##"<text x="{}" y="{}" font-size="12" fill="#1f5fa8">x0 share</text>"##, MARGIN + 6.0, MARGIN + 14.0);
    let _ = writeln!(s, r##"<text x="{}" y="{}" font-size="12" fill="#b8681c">eps share</text>"##, MARGIN + 6.0, MARGIN + 28.0);
    s.push_str("</svg>\n");
    s
}

//! Static SVG overlay of a rollout.

use std::fmt::Write;

use uasmpc::geometry::{Covariance2, Vec2};
use uasmpc::simulation::{RolloutLog, Scenario};

/// Margin (m) around the scene bounds.
pub const PADDING: f64 = 10.0;

const AGENT_COLORS: [&str; 6] = ["#d62728", "#9467bd", "#8c564b", "#e377c2", "#bcbd22", "#17becf"];

struct Bounds {
    min: Vec2,
    max: Vec2,
}

impl Bounds {
    fn new() -> Self {
        Self {
            min: Vec2::repeat(f64::INFINITY),
            max: Vec2::repeat(f64::NEG_INFINITY),
        }
    }

    fn add(&mut self, p: &Vec2) {
        self.min = self.min.inf(p);
        self.max = self.max.sup(p);
    }
}

fn polyline(out: &mut String, pts: &[Vec2], stroke: &str, width: f64, extra: &str) {
    if pts.len() < 2 {
        return;
    }
    let _ = write!(
        out,
        r#"<polyline fill="none" stroke="{stroke}" stroke-width="{width}" vector-effect="non-scaling-stroke"{extra} points=""#
    );
    for (i, p) in pts.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{:.3},{:.3}", p.x, p.y);
    }
    out.push_str("\"/>\n");
}

/// `sqrt(beta)` level set of a Gaussian as an SVG ellipse.
fn ellipse(out: &mut String, mean: &Vec2, cov: &Covariance2, radius: f64, stroke: &str) {
    let eig = cov.matrix().symmetric_eigen();
    let (i, j) = if eig.eigenvalues[0] >= eig.eigenvalues[1] {
        (0, 1)
    } else {
        (1, 0)
    };
    let major = eig.eigenvectors.column(i);
    let angle = major[1].atan2(major[0]).to_degrees();
    let _ = writeln!(
        out,
        r#"<ellipse cx="{:.3}" cy="{:.3}" rx="{:.3}" ry="{:.3}" transform="rotate({:.3} {:.3} {:.3})" fill="none" stroke="{stroke}" stroke-width="0.6" stroke-opacity="0.6" vector-effect="non-scaling-stroke"/>"#,
        mean.x,
        mean.y,
        radius * eig.eigenvalues[i].max(0.0).sqrt(),
        radius * eig.eigenvalues[j].max(0.0).sqrt(),
        angle,
        mean.x,
        mean.y
    );
}

/// Ego path, agent tracks, the ego reference route clipped to the scene and,
/// for every step, the keep-out ellipse of each forecast mode one step ahead.
pub fn render(scenario: &Scenario, log: &RolloutLog, radius: f64) -> String {
    let mut ego: Vec<Vec2> = log.records.iter().map(|r| r.ego.position).collect();
    if let Some(last) = log.records.last() {
        ego.push(last.ego_next.position);
    }
    let agents = log.records.first().map_or(0, |r| r.agents.len());
    let mut tracks: Vec<Vec<Vec2>> = vec![Vec::new(); agents];
    for r in &log.records {
        for a in &r.agents {
            tracks[a.id].push(a.state.position);
        }
    }
    if let Some(last) = log.records.last() {
        for a in &last.agents_next {
            tracks[a.id].push(a.state.position);
        }
    }

    let mut b = Bounds::new();
    ego.iter().chain(tracks.iter().flatten()).for_each(|p| b.add(p));
    if ego.is_empty() {
        b.add(&scenario.ego_route().points()[0]);
    }
    let (lo, hi) = (b.min - Vec2::repeat(PADDING), b.max + Vec2::repeat(PADDING));
    let inside = |p: &Vec2| p.x >= lo.x && p.x <= hi.x && p.y >= lo.y && p.y <= hi.y;
    let route: Vec<Vec2> = scenario.ego_route().points().iter().copied().filter(inside).collect();
    let size = hi - lo;

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="{:.3} {:.3} {:.3} {:.3}" width="{:.0}" height="{:.0}">"#,
        lo.x,
        -hi.y,
        size.x,
        size.y,
        (size.x * 8.0).min(2400.0),
        (size.x * 8.0).min(2400.0) * size.y / size.x
    );
    let _ = writeln!(
        out,
        "<title>{}: alpha {} seed {}</title>",
        log.scenario_id, log.alpha, log.seed
    );
    out.push_str("<g transform=\"scale(1,-1)\">\n");
    polyline(&mut out, &route, "#999999", 1.0, r#" stroke-dasharray="4,4""#);
    for r in &log.records {
        for f in &r.predictions {
            let color = AGENT_COLORS[f.agent % AGENT_COLORS.len()];
            for m in &f.modes {
                let (Some(mean), Some(c)) = (m.means.first(), m.covs.first()) else {
                    continue;
                };
                if let Ok(cov) = Covariance2::new(c[0], c[1], c[2]) {
                    ellipse(&mut out, &Vec2::new(mean[0], mean[1]), &cov, radius, color);
                }
            }
        }
    }
    for (i, t) in tracks.iter().enumerate() {
        polyline(&mut out, t, AGENT_COLORS[i % AGENT_COLORS.len()], 1.5, "");
    }
    polyline(&mut out, &ego, "#1f77b4", 2.0, "");
    out.push_str("</g>\n</svg>\n");
    out
}

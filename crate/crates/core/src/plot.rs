//! Top-down (x-z) trajectory plots as standalone SVG.

use std::fmt::Write as _;

use crate::evaluation::Trajectory;

const SIZE: f64 = 640.0;
const MARGIN: f64 = 48.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Bounding box `(min_x, max_x, min_z, max_z)` of the camera centres.
pub fn extent(trajectories: &[&Trajectory]) -> (f64, f64, f64, f64) {
    let mut b = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for t in trajectories {
        for p in &t.poses {
            let c = p.translation();
            b = (b.0.min(c.x), b.1.max(c.x), b.2.min(c.z), b.3.max(c.z));
        }
    }
    b
}

/// Points of one trajectory in plot coordinates.
pub struct Series<'a> {
    pub label: &'a str,
    pub trajectory: &'a Trajectory,
}

/// Draws each trajectory as a polyline (a dot when it never moves) with a
/// legend, on a common equal-aspect x-z frame.
pub fn render_svg(title: &str, series: &[Series]) -> String {
    let all: Vec<&Trajectory> = series.iter().map(|s| s.trajectory).collect();
    let (x0, x1, z0, z1) = extent(&all);
    let span = (x1 - x0).max(z1 - z0).max(1e-9);
    let scale = (SIZE - 2.0 * MARGIN) / span;
    let (cx, cz) = ((x0 + x1) / 2.0, (z0 + z1) / 2.0);
    let map = |x: f64, z: f64| (SIZE / 2.0 + (x - cx) * scale, SIZE / 2.0 - (z - cz) * scale);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{}</text>"#, SIZE / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">x [m]  (extent {:.1} .. {:.1})</text>"#,
        SIZE / 2.0,
        SIZE - 12.0,
        x0,
        x1
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" font-family="sans-serif" font-size="12" transform="rotate(-90 14 {})" text-anchor="middle">z [m]  (extent {:.1} .. {:.1})</text>"#,
        SIZE / 2.0,
        SIZE / 2.0,
        z0,
        z1
    );
    for (i, ser) in series.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let points: Vec<(f64, f64)> = ser
            .trajectory
            .poses
            .iter()
            .map(|p| {
                let t = p.translation();
                map(t.x, t.z)
            })
            .collect();
        let moves = points.iter().any(|p| (p.0 - points[0].0).abs() > 1e-9 || (p.1 - points[0].1).abs() > 1e-9);
        if moves {
            let coords: Vec<String> = points.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
            let _ = writeln!(
                s,
                r#"<polyline class="trajectory" data-label="{}" fill="none" stroke="{colour}" stroke-width="2" points="{}"/>"#,
                escape(ser.label),
                coords.join(" ")
            );
        } else {
            let _ = writeln!(
                s,
                r#"<circle class="trajectory" data-label="{}" cx="{:.2}" cy="{:.2}" r="4" fill="{colour}"/>"#,
                escape(ser.label),
                points[0].0,
                points[0].1
            );
        }
        let ly = 44.0 + 18.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<g class="legend"><line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{colour}" stroke-width="3"/><text x="{}" y="{}" font-family="sans-serif" font-size="12">{}</text></g>"#,
            SIZE - 150.0,
            SIZE - 126.0,
            SIZE - 120.0,
            ly + 4.0,
            escape(ser.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::se3::Pose;
    use nalgebra::Vector3;

    #[test]
    fn identity_trajectory_is_a_dot() {
        let t = Trajectory::new(vec![Pose::identity(); 4]).unwrap();
        let svg = render_svg("x", &[Series { label: "gt", trajectory: &t }]);
        assert_eq!(svg.matches("<circle").count(), 1);
        assert_eq!(svg.matches("<polyline").count(), 0);
        assert_eq!(extent(&[&t]), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn two_series_two_polylines_and_legend() {
        let line = |k: f64| {
            Trajectory::new((0..5).map(|i| Pose::from_translation(Vector3::new(0.0, 0.0, i as f64 * k))).collect()).unwrap()
        };
        let (a, b) = (line(1.0), line(1.1));
        let svg = render_svg(
            "03",
            &[
                Series { label: "ground truth", trajectory: &a },
                Series { label: "estimate", trajectory: &b },
            ],
        );
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert_eq!(svg.matches(r#"class="legend""#).count(), 2);
        assert!(svg.contains("ground truth") && svg.contains("estimate"));
        assert_eq!(extent(&[&a, &b]), (0.0, 0.0, 0.0, 4.4));
    }
}

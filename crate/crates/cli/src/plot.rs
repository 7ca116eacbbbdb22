//! SVG scatter of task accuracy against predictivity with the Pareto front
//! shaded. One `<circle>` per model; front members carry class `point front`.

use std::fmt::Write;

use itfit::stats::ParetoPoint;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 60.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn extent(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = if hi > lo { 0.05 * (hi - lo) } else { 1.0 };
    (lo - pad, hi + pad)
}

/// `front` holds indices into `points`, in any order.
pub fn pareto_svg(points: &[ParetoPoint], front: &[usize]) -> String {
    let (x0, x1) = extent(points.iter().map(|p| p.task_accuracy));
    let (y0, y1) = extent(points.iter().map(|p| p.predictivity));
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let sy = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);
    let (left, bottom) = (sx(x0), sy(y0));

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(s, "<style>.point{{fill:#8c8c8c;fill-opacity:0.8}}.point.front{{fill:#c0392b}}.front-region{{fill:#c0392b;fill-opacity:0.12;stroke:none}}.front-line{{fill:none;stroke:#c0392b;stroke-width:1.5}}.axis{{stroke:#333}}text{{font-family:sans-serif;font-size:12px}}</style>");

    // staircase region dominated by the front, anchored at the bottom-left corner
    let mut fp: Vec<&ParetoPoint> = front.iter().map(|&i| &points[i]).collect();
    fp.sort_by(|a, b| {
        a.task_accuracy
            .total_cmp(&b.task_accuracy)
            .then(b.predictivity.total_cmp(&a.predictivity))
    });
    if !fp.is_empty() {
        let mut poly = vec![(left, bottom), (left, sy(fp[0].predictivity))];
        let mut line = Vec::new();
        for (i, p) in fp.iter().enumerate() {
            poly.push((sx(p.task_accuracy), sy(p.predictivity)));
            line.push((sx(p.task_accuracy), sy(p.predictivity)));
            if let Some(next) = fp.get(i + 1) {
                poly.push((sx(p.task_accuracy), sy(next.predictivity)));
                line.push((sx(p.task_accuracy), sy(next.predictivity)));
            }
        }
        poly.push((sx(fp[fp.len() - 1].task_accuracy), bottom));
        let fmt = |pts: &[(f64, f64)]| {
            pts.iter()
                .map(|(x, y)| format!("{x:.2},{y:.2}"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        let _ = writeln!(
            s,
            r#"<polygon class="front-region" points="{}"/>"#,
            fmt(&poly)
        );
        let _ = writeln!(
            s,
            r#"<polyline class="front-line" points="{}"/>"#,
            fmt(&line)
        );
    }

    let _ = writeln!(
        s,
        r#"<line class="axis" x1="{left:.2}" y1="{bottom:.2}" x2="{:.2}" y2="{bottom:.2}"/>"#,
        WIDTH - MARGIN
    );
    let _ = writeln!(
        s,
        r#"<line class="axis" x1="{left:.2}" y1="{bottom:.2}" x2="{left:.2}" y2="{MARGIN:.2}"/>"#
    );
    for (v, anchor) in [(x0, "start"), (x1, "end")] {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="{anchor}">{v:.3}</text>"#,
            sx(v),
            bottom + 16.0
        );
    }
    for v in [y0, y1] {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{v:.3}</text>"#,
            left - 6.0,
            sy(v) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">Task accuracy</text>"#,
        WIDTH / 2.0,
        HEIGHT - 15.0
    );
    let _ = writeln!(
        s,
        r#"<text x="15" y="{:.2}" text-anchor="middle" transform="rotate(-90 15 {:.2})">Neural predictivity</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0
    );

    let mut on_front = vec![false; points.len()];
    for &i in front {
        on_front[i] = true;
    }
    for (p, &f) in points.iter().zip(&on_front) {
        let class = if f { "point front" } else { "point" };
        let _ = writeln!(
            s,
            r#"<circle class="{class}" cx="{:.2}" cy="{:.2}" r="4"><title>{} ({}, {})</title></circle>"#,
            sx(p.task_accuracy),
            sy(p.predictivity),
            escape(&p.model_id),
            p.task_accuracy,
            p.predictivity
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(id: &str, a: f64, p: f64) -> ParetoPoint {
        ParetoPoint::new(id, a, p).unwrap()
    }

    #[test]
    fn one_circle_per_point_and_front_class() {
        let pts = vec![
            pt("a", 70.0, 0.3),
            pt("b", 60.0, 0.2),
            pt("c<&>", 65.0, 0.4),
        ];
        let svg = pareto_svg(&pts, &[0, 2]);
        assert_eq!(svg.matches("<circle").count(), 3);
        assert_eq!(svg.matches(r#"class="point front""#).count(), 2);
        assert!(svg.contains("c&lt;&amp;&gt;"));
        assert!(svg.contains("front-region"));
    }

    #[test]
    fn single_point_has_finite_coordinates() {
        let svg = pareto_svg(&[pt("a", 1.0, 1.0)], &[0]);
        assert!(!svg.contains("NaN") && !svg.contains("inf"));
    }
}

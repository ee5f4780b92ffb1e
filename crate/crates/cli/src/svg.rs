//! Forecast figure: last-frame boxes, heatmap overlay and sampled trajectories.

use std::fmt::Write;

use octcast::pipeline::ForecastResult;
use octcast::synthdata::TrainingSample;
use octcast::Point;

const W: f64 = 454.0;
const H: f64 = 256.0;
const LEFT_COLOR: &str = "#1f77b4";
const RIGHT_COLOR: &str = "#d62728";

fn px(p: Point) -> (f64, f64) {
    (p.x * W, p.y * H)
}

pub fn render(sample: &TrainingSample, fc: &ForecastResult) -> String {
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, r##"<rect x="0" y="0" width="{W}" height="{H}" fill="#202020"/>"##);

    let hm = &fc.heatmap;
    let peak = hm.data.iter().copied().fold(0.0, f64::max);
    let (cw, ch) = (W / hm.w as f64, H / hm.h as f64);
    let _ = writeln!(s, r#"<g id="heatmap">"#);
    for r in 0..hm.h {
        for c in 0..hm.w {
            let v = if peak > 0.0 { hm.at(r, c) / peak } else { 0.0 };
            if v < 0.02 {
                continue;
            }
            let _ = writeln!(
                s,
                r##"<rect x="{:.2}" y="{:.2}" width="{cw:.2}" height="{ch:.2}" fill="#ffb000" fill-opacity="{:.3}"/>"##,
                c as f64 * cw,
                r as f64 * ch,
                0.75 * v
            );
        }
    }
    let _ = writeln!(s, "</g>");

    let t = sample.T - 1;
    let _ = writeln!(s, r#"<g id="boxes" fill="none" stroke-width="1.5">"#);
    let boxes = sample.boxes.hand.iter().zip(&sample.valid.hand).map(|b| (b, "#ffffff"));
    let objects = sample.boxes.object.iter().zip(&sample.valid.object).map(|b| (b, "#7fdc7f"));
    for ((b, v), color) in boxes.chain(objects) {
        if v[t] {
            let [x1, y1, x2, y2] = b[t];
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" stroke="{color}"/>"#,
                x1 * W,
                y1 * H,
                (x2 - x1) * W,
                (y2 - y1) * H
            );
        }
    }
    let _ = writeln!(s, "</g>");

    let last = sample.last_hands();
    let starts = [Point::new(last[0], last[1]), Point::new(last[2], last[3])];
    let _ = writeln!(s, r#"<g id="trajectories" fill="none" stroke-width="1.2" stroke-opacity="0.7">"#);
    for traj in &fc.trajectories {
        for (k, (pts, color)) in [(&traj.left, LEFT_COLOR), (&traj.right, RIGHT_COLOR)].into_iter().enumerate() {
            let mut d = String::new();
            for p in std::iter::once(&starts[k]).chain(pts) {
                let (x, y) = px(*p);
                let _ = write!(d, "{x:.2},{y:.2} ");
            }
            let _ = writeln!(s, r#"<polyline points="{}" stroke="{color}"/>"#, d.trim_end());
        }
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(s, "</svg>");
    s
}

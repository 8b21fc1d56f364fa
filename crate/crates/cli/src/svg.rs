//! Minimal SVG line and scatter plots on the unit square.

use std::fmt::Write;

const SIZE: f64 = 420.0;
const MARGIN: f64 = 50.0;

fn px(v: f64) -> f64 {
    MARGIN + v * (SIZE - 2.0 * MARGIN)
}

fn py(v: f64) -> f64 {
    SIZE - MARGIN - v * (SIZE - 2.0 * MARGIN)
}

fn frame(out: &mut String, title: &str, xlabel: &str, ylabel: &str) {
    let _ = write!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{s}" height="{s}" viewBox="0 0 {s} {s}" font-family="sans-serif" font-size="12">
<rect width="{s}" height="{s}" fill="white"/>
<text x="{mid}" y="24" text-anchor="middle" font-size="14">{title}</text>
<text x="{mid}" y="{xl}" text-anchor="middle">{xlabel}</text>
<text x="14" y="{mid}" text-anchor="middle" transform="rotate(-90 14 {mid})">{ylabel}</text>
<rect x="{m}" y="{m}" width="{w}" height="{w}" fill="none" stroke="black"/>
"#,
        s = SIZE,
        mid = SIZE / 2.0,
        xl = SIZE - 12.0,
        m = MARGIN,
        w = SIZE - 2.0 * MARGIN,
    );
    for k in 0..=4 {
        let v = k as f64 / 4.0;
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="10">{v:.2}</text><text x="{:.1}" y="{:.1}" text-anchor="end" font-size="10">{v:.2}</text>"#,
            px(v),
            SIZE - MARGIN + 14.0,
            MARGIN - 4.0,
            py(v) + 3.0,
        );
    }
}

/// Polyline through `points` in [0, 1]²; `chance` draws the y = x diagonal.
pub fn line_plot(title: &str, xlabel: &str, ylabel: &str, points: &[(f64, f64)], chance: bool) -> String {
    let mut out = String::new();
    frame(&mut out, title, xlabel, ylabel);
    if chance {
        let _ = writeln!(
            out,
            r#"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="gray" stroke-dasharray="4 4"/>"#,
            px(0.0),
            py(0.0),
            px(1.0),
            py(1.0)
        );
    }
    let path: Vec<String> = points
        .iter()
        .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
        .collect();
    let _ = writeln!(
        out,
        r#"<polyline fill="none" stroke="steelblue" stroke-width="2" points="{}"/>"#,
        path.join(" ")
    );
    out.push_str("</svg>\n");
    out
}

/// Scatter of 2-D coordinates rescaled to the frame. Positives are drawn
/// last so rare classes stay visible; unlabeled points are gray.
pub fn scatter(title: &str, coords: &[(f64, f64)], labels: &[Option<bool>]) -> String {
    let mut out = String::new();
    frame(&mut out, title, "dim 1 (scaled)", "dim 2 (scaled)");
    let range = |f: fn(&(f64, f64)) -> f64| {
        let lo = coords.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = coords.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        (lo, if hi > lo { hi - lo } else { 1.0 })
    };
    let (x0, xs) = range(|p| p.0);
    let (y0, ys) = range(|p| p.1);
    for pass in [None, Some(false), Some(true)] {
        let colour = match pass {
            None => "#bbbbbb",
            Some(false) => "#4477aa",
            Some(true) => "#cc3311",
        };
        for (p, l) in coords.iter().zip(labels) {
            if *l == pass {
                let _ = writeln!(
                    out,
                    r#"<circle cx="{:.2}" cy="{:.2}" r="2" fill="{colour}" fill-opacity="0.7"/>"#,
                    px((p.0 - x0) / xs),
                    py((p.1 - y0) / ys)
                );
            }
        }
    }
    out.push_str("</svg>\n");
    out
}

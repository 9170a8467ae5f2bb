//! Minimal static SVG for DVH curves.

use std::fmt::Write as _;

use fddm_core::metrics::DvhCurve;

pub struct CurvePair<'a> {
    pub label: &'a str,
    pub truth: &'a DvhCurve,
    pub prediction: &'a DvhCurve,
}

const COLORS: [&str; 5] = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e"];
const W: f64 = 640.0;
const H: f64 = 420.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 140.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;

fn points(c: &DvhCurve, max_dose: f64) -> String {
    let (pw, ph) = (W - LEFT - RIGHT, H - TOP - BOTTOM);
    let mut s = String::new();
    for (d, v) in c.dose_bins.iter().zip(&c.volume_fraction) {
        let x = LEFT + d / max_dose * pw;
        let y = TOP + (1.0 - v) * ph;
        let _ = write!(s, "{x:.2},{y:.2} ");
    }
    s.trim_end().to_string()
}

/// Ground truth solid, prediction dashed, one colour per structure.
pub fn dvh_svg(title: &str, pairs: &[CurvePair], max_dose: f64) -> String {
    let max_dose = max_dose.max(1e-9);
    let (pw, ph) = (W - LEFT - RIGHT, H - TOP - BOTTOM);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" font-size="14" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let y = TOP + (1.0 - f) * ph;
        let x = LEFT + f * pw;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" font-size="10" text-anchor="end">{:.0}%</text>"#,
            LEFT - 5.0,
            y + 3.0,
            f * 100.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{x:.1}" y="{}" font-size="10" text-anchor="middle">{:.1}</text>"#,
            TOP + ph + 15.0,
            f * max_dose
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">Dose (Gy)</text>"#,
        LEFT + pw / 2.0,
        H - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="15" y="{}" font-size="12" text-anchor="middle" transform="rotate(-90 15 {})">Volume (%)</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0
    );
    for (i, p) in pairs.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let label = escape(p.label);
        let _ = writeln!(
            s,
            r#"<polyline class="truth" data-structure="{label}" fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            points(p.truth, max_dose)
        );
        let _ = writeln!(
            s,
            r#"<polyline class="prediction" data-structure="{label}" fill="none" stroke="{color}" stroke-width="1.5" stroke-dasharray="5,3" points="{}"/>"#,
            points(p.prediction, max_dose)
        );
        let ly = TOP + 15.0 + 18.0 * i as f64;
        let lx = W - RIGHT + 15.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="1.5"/>"#,
            lx + 25.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="11">{label}</text>"#,
            lx + 30.0,
            ly + 4.0
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

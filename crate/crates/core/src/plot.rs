//! Static SVG of accuracy against epoch.

use std::fmt::Write;

use crate::training::RunRecord;

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

fn esc(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn polyline(out: &mut String, pts: &[(f64, f64)], color: &str, dash: Option<&str>) {
    if pts.is_empty() {
        return;
    }
    let coords: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
    let dash = dash
        .map(|d| format!(" stroke-dasharray=\"{d}\""))
        .unwrap_or_default();
    let _ = writeln!(
        out,
        "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"{dash} points=\"{}\"/>",
        coords.join(" ")
    );
}

/// Train accuracy (against the supervision used) and test accuracy per
/// snapshot, with a dashed line at `weak_acc`. Output depends only on the
/// inputs.
pub fn accuracy_svg(records: &[RunRecord], weak_acc: Option<f64>, title: &str) -> String {
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let max_epoch = records
        .iter()
        .map(|r| r.epoch)
        .filter(|e| e.is_finite())
        .fold(0.0f64, f64::max);
    let x_max = if max_epoch > 0.0 { max_epoch } else { 1.0 };
    let sx = |e: f64| LEFT + pw * e / x_max;
    let sy = |a: f64| TOP + ph * (1.0 - a.clamp(0.0, 1.0));

    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"11\">"
    );
    let _ = writeln!(s, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
    let _ = writeln!(
        s,
        "<text x=\"{:.1}\" y=\"20\" text-anchor=\"middle\" font-size=\"13\">{}</text>",
        W / 2.0,
        esc(title)
    );
    // Axes and ticks.
    let _ = writeln!(
        s,
        "<path d=\"M{LEFT},{TOP} V{:.1} H{:.1}\" stroke=\"black\" fill=\"none\"/>",
        TOP + ph,
        LEFT + pw
    );
    for k in 0..=5 {
        let a = k as f64 / 5.0;
        let y = sy(a);
        let _ = writeln!(
            s,
            "<line x1=\"{:.1}\" y1=\"{y:.2}\" x2=\"{LEFT}\" y2=\"{y:.2}\" stroke=\"black\"/><text x=\"{:.1}\" y=\"{:.2}\" text-anchor=\"end\">{a:.1}</text>",
            LEFT - 4.0,
            LEFT - 6.0,
            y + 4.0
        );
    }
    for k in 0..=4 {
        let e = x_max * k as f64 / 4.0;
        let x = sx(e);
        let _ = writeln!(
            s,
            "<line x1=\"{x:.2}\" y1=\"{:.1}\" x2=\"{x:.2}\" y2=\"{:.1}\" stroke=\"black\"/><text x=\"{x:.2}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
            TOP + ph,
            TOP + ph + 4.0,
            TOP + ph + 16.0,
            (e * 100.0).round() / 100.0
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">epoch</text>",
        LEFT + pw / 2.0,
        H - 12.0
    );
    let _ = writeln!(
        s,
        "<text x=\"14\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {:.1})\">accuracy</text>",
        TOP + ph / 2.0,
        TOP + ph / 2.0
    );

    if let Some(w) = weak_acc.filter(|w| w.is_finite()) {
        let y = sy(w);
        let _ = writeln!(
            s,
            "<line x1=\"{LEFT}\" y1=\"{y:.2}\" x2=\"{:.1}\" y2=\"{y:.2}\" stroke=\"gray\" stroke-dasharray=\"4 3\"/>",
            LEFT + pw
        );
    }
    let series = |f: fn(&RunRecord) -> f64| -> Vec<(f64, f64)> {
        records
            .iter()
            .filter(|r| f(r).is_finite() && r.epoch.is_finite())
            .map(|r| (sx(r.epoch), sy(f(r))))
            .collect()
    };
    polyline(&mut s, &series(|r| r.acc_pseudo), "#1f77b4", None);
    polyline(&mut s, &series(|r| r.test_acc()), "#d62728", None);

    if !records.is_empty() {
        let lx = LEFT + pw - 150.0;
        let ly = TOP + ph - 50.0;
        for (k, (label, color)) in [
            ("train (pseudo)", "#1f77b4"),
            ("test", "#d62728"),
            ("weak test", "gray"),
        ]
        .iter()
        .enumerate()
        {
            let y = ly + 14.0 * k as f64;
            let _ = writeln!(
                s,
                "<line x1=\"{lx:.1}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"{color}\"/><text x=\"{:.1}\" y=\"{:.1}\">{label}</text>",
                lx + 20.0,
                lx + 26.0,
                y + 4.0
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

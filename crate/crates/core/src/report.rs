//! Text tables and a precision/recall threshold-sweep plot.

use std::fmt::Write;

use crate::eval::EvalReport;

/// One row per report, with ME/MaE recall, overall recall, precision and F1.
pub fn format_table(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<12} {:>8} {:>8} {:>8} {:>8} {:>8} {:>6} {:>6} {:>6}",
        "fold", "ME REC", "MaE REC", "REC", "PRE", "F1", "TP", "FP", "FN"
    );
    for r in reports {
        let name = match (&r.fold, r.aggregate) {
            (_, true) => "overall".to_string(),
            (Some(f), false) => f.clone(),
            (None, false) => "-".to_string(),
        };
        let _ = writeln!(
            out,
            "{:<12} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>6} {:>6} {:>6}",
            name, r.recall_me, r.recall_mae, r.recall, r.precision, r.f1, r.tp, r.fp, r.fn_
        );
    }
    out
}

/// Precision and recall against threshold, log-scaled on the threshold axis.
pub fn sweep_svg(points: &[(f64, EvalReport)]) -> String {
    let (w, h, pad) = (480.0, 320.0, 48.0);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    let valid: Vec<&(f64, EvalReport)> = points.iter().filter(|(t, _)| *t > 0.0).collect();
    if valid.is_empty() {
        svg.push_str("</svg>\n");
        return svg;
    }
    let lx: Vec<f64> = valid.iter().map(|(t, _)| t.log10()).collect();
    let (x0, x1) = lx.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let sx = |v: f64| if x1 > x0 { pad + (v - x0) / (x1 - x0) * (w - 2.0 * pad) } else { w / 2.0 };
    let sy = |v: f64| h - pad - v.clamp(0.0, 1.0) * (h - 2.0 * pad);
    let _ = writeln!(
        svg,
        "<line x1=\"{pad}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>\n\
         <line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{0}\" stroke=\"black\"/>",
        h - pad,
        w - pad
    );
    let series: [(&str, &str, fn(&EvalReport) -> f64); 2] = [
        ("precision", "steelblue", |r| r.precision),
        ("recall", "darkorange", |r| r.recall),
    ];
    for (i, (name, colour, value)) in series.iter().enumerate() {
        let path: Vec<String> = valid
            .iter()
            .zip(&lx)
            .map(|((_, r), &x)| format!("{:.1},{:.1}", sx(x), sy(value(r))))
            .collect();
        let _ = writeln!(
            svg,
            "<polyline fill=\"none\" stroke=\"{colour}\" stroke-width=\"2\" points=\"{}\"/>",
            path.join(" ")
        );
        for ((_, r), &x) in valid.iter().zip(&lx) {
            let _ = writeln!(svg, "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"{colour}\"/>", sx(x), sy(value(r)));
        }
        let _ = writeln!(
            svg,
            "<text x=\"{0}\" y=\"{1}\" font-size=\"11\" fill=\"{colour}\">{name}</text>",
            w - pad - 60.0,
            pad + 14.0 * i as f64
        );
    }
    for ((t, _), &x) in valid.iter().zip(&lx) {
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\" text-anchor=\"middle\">{t}</text>",
            sx(x),
            h - pad + 14.0
        );
    }
    for tick in [0.0, 0.5, 1.0] {
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\" text-anchor=\"end\">{tick}</text>",
            pad - 4.0,
            sy(tick) + 3.0
        );
    }
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">threshold</text>",
        w / 2.0,
        h - 8.0
    );
    svg.push_str("</svg>\n");
    svg
}

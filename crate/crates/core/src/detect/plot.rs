//! Minimal SVG line chart of AUC against the per-element budget.

use std::fmt::Write as _;

use super::utility::UtilityTable;

const W: f64 = 480.0;
const H: f64 = 320.0;
const M: f64 = 48.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

/// The infinite budget sits one decade right of the largest finite one.
pub fn utility_svg(table: &UtilityTable) -> String {
    let finite: Vec<f64> = table
        .rows
        .iter()
        .map(|r| r.epsilon.per_element(table.dim))
        .filter(|v| v.is_finite())
        .map(f64::log10)
        .collect();
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if lo.is_finite() {
        (lo.floor(), hi.ceil() + 1.0)
    } else {
        (0.0, 1.0)
    };
    let hi = if hi > lo { hi } else { lo + 1.0 };
    let x_of = |eps_el: f64| {
        let v = if eps_el.is_finite() { eps_el.log10() } else { hi };
        M + (v - lo) / (hi - lo) * (W - 2.0 * M)
    };
    let y_of = |auc: f64| H - M - auc * (H - 2.0 * M);

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<path d="M{M} {} H{} M{M} {} V{M}" stroke="black" fill="none"/>"#,
        H - M,
        W - M,
        H - M
    )
    .unwrap();
    for t in 0..=5 {
        let a = t as f64 / 5.0;
        writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="10" text-anchor="end">{a:.1}</text>"#,
            M - 4.0,
            y_of(a) + 3.0
        )
        .unwrap();
    }
    for d in (lo as i64)..(hi as i64) {
        writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="10" text-anchor="middle">1e{d}</text>"#,
            x_of(10f64.powi(d as i32)),
            H - M + 14.0
        )
        .unwrap();
    }
    writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="10" text-anchor="middle">inf</text>"#,
        x_of(f64::INFINITY),
        H - M + 14.0
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="11" text-anchor="middle">budget per element</text>"#,
        W / 2.0,
        H - 10.0
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="12" y="{}" font-size="11" transform="rotate(-90 12 {})">AUC</text>"#,
        H / 2.0,
        H / 2.0
    )
    .unwrap();

    for (mi, m) in table.mechanisms.iter().enumerate() {
        let color = COLORS[mi % COLORS.len()];
        let mut pts: Vec<(f64, f64)> = table
            .rows
            .iter()
            .filter_map(|r| {
                r.cell(*m)
                    .map(|c| (x_of(r.epsilon.per_element(table.dim)), y_of(c.mean)))
            })
            .collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let path: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.1},{y:.1}")).collect();
        writeln!(
            s,
            r#"<polyline points="{}" stroke="{color}" fill="none" stroke-width="2"/>"#,
            path.join(" ")
        )
        .unwrap();
        for (x, y) in &pts {
            writeln!(s, r#"<circle cx="{x:.1}" cy="{y:.1}" r="3" fill="{color}"/>"#).unwrap();
        }
        writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="11" fill="{color}">{}</text>"#,
            W - M - 60.0,
            M + 14.0 * mi as f64,
            m.name()
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

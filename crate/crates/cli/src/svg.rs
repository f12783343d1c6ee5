//! Line chart of `‖x‖` and `‖x − x̂‖` against `k`, rendered from trace CSV
//! text alone so a stored CSV re-renders to the same bytes.

use std::fmt::Write as _;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;
/// Values below this are drawn at this level on a log axis.
const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub k: Vec<f64>,
    pub state: Vec<f64>,
    pub error: Vec<f64>,
}

/// Reads `k`, the `x*` and `xhat*` columns and returns the two norms per row.
pub fn series_from_csv(csv: &str) -> Result<Series, String> {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().ok_or("empty CSV")?.split(',').collect();
    let k_col = header.iter().position(|h| *h == "k").ok_or("missing column `k`")?;
    let index = |prefix: &str| -> Vec<usize> {
        let mut cols: Vec<(usize, usize)> = header
            .iter()
            .enumerate()
            .filter_map(|(c, h)| {
                h.strip_prefix(prefix)
                    .and_then(|rest| rest.parse::<usize>().ok())
                    .map(|i| (i, c))
            })
            .collect();
        cols.sort_unstable();
        cols.into_iter().map(|(_, c)| c).collect()
    };
    let xs = index("x");
    let xh = index("xhat");
    if xs.is_empty() || xs.len() != xh.len() {
        return Err("CSV needs matching x1.. and xhat1.. columns".into());
    }
    let mut out = Series {
        k: Vec::new(),
        state: Vec::new(),
        error: Vec::new(),
    };
    for (row, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != header.len() {
            return Err(format!("row {} has {} fields, header has {}", row + 1, fields.len(), header.len()));
        }
        let num = |c: usize| {
            fields[c]
                .parse::<f64>()
                .map_err(|_| format!("row {}: bad number `{}`", row + 1, fields[c]))
        };
        let (mut s, mut e) = (0.0, 0.0);
        for (&a, &b) in xs.iter().zip(&xh) {
            let x = num(a)?;
            let xhat = num(b)?;
            s += x * x;
            e += (x - xhat) * (x - xhat);
        }
        out.k.push(num(k_col)?);
        out.state.push(s.sqrt());
        out.error.push(e.sqrt());
    }
    if out.k.is_empty() {
        return Err("CSV has no rows".into());
    }
    Ok(out)
}

fn label(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

pub fn render(series: &Series, log_scale: bool) -> String {
    let map_y = |v: f64| if log_scale { v.max(LOG_FLOOR).log10() } else { v };
    let ys: Vec<f64> = series.state.iter().chain(&series.error).map(|&v| map_y(v)).collect();
    let (mut y_lo, mut y_hi) = ys.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !log_scale {
        y_lo = y_lo.min(0.0);
    }
    if y_hi - y_lo <= 0.0 {
        y_hi = y_lo + 1.0;
    }
    let k_lo = series.k[0];
    let mut k_hi = *series.k.last().unwrap_or(&k_lo);
    if k_hi <= k_lo {
        k_hi = k_lo + 1.0;
    }
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let px = |k: f64| LEFT + (k - k_lo) / (k_hi - k_lo) * plot_w;
    let py = |v: f64| TOP + (1.0 - (map_y(v) - y_lo) / (y_hi - y_lo)) * plot_h;
    let axis_label = |y: f64| if log_scale { label(10f64.powf(y)) } else { label(y) };

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<rect x="{LEFT}" y="{TOP}" width="{plot_w}" height="{plot_h}" fill="none" stroke="black"/>"#
    );
    for (y, anchor) in [(y_lo, TOP + plot_h), (y_hi, TOP)] {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            LEFT - 6.0,
            anchor + 4.0,
            axis_label(y)
        );
    }
    for (k, anchor) in [(k_lo, LEFT), (k_hi, LEFT + plot_w)] {
        let _ = writeln!(
            s,
            r#"<text x="{anchor:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            TOP + plot_h + 18.0,
            label(k)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">k</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 10.0
    );
    let scale = if log_scale { "log" } else { "linear" };
    let _ = writeln!(s, r#"<text x="{LEFT}" y="18">norm ({scale} scale)</text>"#);
    for (values, colour, name, row) in [
        (&series.state, "#1f77b4", "|x|", 0.0),
        (&series.error, "#d62728", "|x - xhat|", 1.0),
    ] {
        let mut points = String::new();
        for (i, (&k, &v)) in series.k.iter().zip(values.iter()).enumerate() {
            if i > 0 {
                points.push(' ');
            }
            let _ = write!(points, "{:.2},{:.2}", px(k), py(v));
        }
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{points}"/>"#
        );
        let ly = TOP + 14.0 + 16.0 * row;
        let lx = LEFT + plot_w - 110.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{colour}" stroke-width="1.5"/>"#,
            ly - 4.0,
            lx + 20.0,
            ly - 4.0
        );
        let _ = writeln!(s, r#"<text x="{:.2}" y="{ly:.2}">{name}</text>"#, lx + 26.0);
    }
    s.push_str("</svg>\n");
    s
}

pub fn render_csv(csv: &str, log_scale: bool) -> Result<String, String> {
    Ok(render(&series_from_csv(csv)?, log_scale))
}

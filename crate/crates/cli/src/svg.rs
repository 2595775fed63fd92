//! Static SVG time-series plots, one panel per state component.

use std::fmt::Write;

/// Longest polyline emitted per curve; longer series are decimated.
pub const MAX_POINTS: usize = 1500;

const WIDTH: f64 = 800.0;
const PANEL: f64 = 220.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 40.0;
const GAP: f64 = 50.0;
const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"];

/// A sampled trajectory; `states[k]` is the state at `times[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

impl Series {
    pub fn from_trajectory(t: &nodecert::dynamics_sim::Trajectory) -> Self {
        Self {
            times: t.times.clone(),
            states: t.states.iter().map(|x| x.iter().copied().collect()).collect(),
        }
    }

    fn dim(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }
}

/// Band `center_i ± width(t)` drawn behind each panel.
#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub center: Vec<f64>,
    pub times: Vec<f64>,
    pub width: Vec<f64>,
}

fn stride(n: usize) -> usize {
    n.div_ceil(MAX_POINTS).max(1)
}

/// Indices kept after decimation; the last sample is always kept.
fn kept(n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).step_by(stride(n)).collect();
    if n > 0 && idx.last() != Some(&(n - 1)) {
        idx.push(n - 1);
    }
    idx
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (-1.0, 1.0);
    }
    let pad = if hi - lo < 1e-12 { 0.5 * lo.abs().max(1.0) } else { 0.05 * (hi - lo) };
    (lo - pad, hi + pad)
}

fn points(ts: &[f64], vs: &[f64], sx: &dyn Fn(f64) -> f64, sy: &dyn Fn(f64) -> f64) -> String {
    let mut s = String::new();
    for i in kept(ts.len()) {
        if vs[i].is_finite() {
            write!(s, "{:.2},{:.2} ", sx(ts[i]), sy(vs[i])).unwrap();
        }
    }
    s.trim_end().to_string()
}

/// Renders every trajectory, one panel per state component.
pub fn plot_svg(series: &[Series], envelope: Option<&Envelope>, title: &str) -> String {
    let m = series.iter().map(Series::dim).max().unwrap_or(0);
    let height = MARGIN_T + m as f64 * (PANEL + GAP);
    let (t0, t1) = series
        .iter()
        .flat_map(|s| s.times.iter().copied())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), t| (a.min(t), b.max(t)));
    let (t0, t1) = if t0.is_finite() && t1 > t0 { (t0, t1) } else { (0.0, 1.0) };
    let sx = move |t: f64| MARGIN_L + (t - t0) / (t1 - t0) * (WIDTH - MARGIN_L - MARGIN_R);

    let mut out = String::new();
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(out, r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#, WIDTH / 2.0, escape(title)).unwrap();

    for i in 0..m {
        let top = MARGIN_T + i as f64 * (PANEL + GAP);
        let mut values: Vec<f64> = series
            .iter()
            .flat_map(|s| s.states.iter().filter_map(move |x| x.get(i).copied()))
            .collect();
        if let Some(env) = envelope {
            for w in &env.width {
                values.push(env.center[i] + w);
                values.push(env.center[i] - w);
            }
        }
        let (lo, hi) = range(values.into_iter());
        let sy = move |v: f64| top + PANEL - (v - lo) / (hi - lo) * PANEL;

        writeln!(out, r#"<g class="panel" id="x{}">"#, i + 1).unwrap();
        writeln!(
            out,
            r##"<rect x="{MARGIN_L}" y="{top}" width="{}" height="{PANEL}" fill="none" stroke="#444"/>"##,
            WIDTH - MARGIN_L - MARGIN_R
        )
        .unwrap();
        if let Some(env) = envelope {
            let upper: Vec<f64> = env.width.iter().map(|w| env.center[i] + w).collect();
            let lower: Vec<f64> = env.width.iter().map(|w| env.center[i] - w).collect();
            for band in [upper, lower] {
                writeln!(
                    out,
                    r##"<polyline class="envelope" fill="none" stroke="#888" stroke-dasharray="5,4" points="{}"/>"##,
                    points(&env.times, &band, &sx, &sy)
                )
                .unwrap();
            }
        }
        for (k, s) in series.iter().enumerate() {
            let vs: Vec<f64> = s.states.iter().map(|x| x.get(i).copied().unwrap_or(f64::NAN)).collect();
            writeln!(
                out,
                r#"<polyline class="trajectory" fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
                COLORS[k % COLORS.len()],
                points(&s.times, &vs, &sx, &sy)
            )
            .unwrap();
        }
        let ly = top + PANEL + 16.0;
        writeln!(out, r#"<text x="{MARGIN_L}" y="{ly}">{t0:.3}</text>"#).unwrap();
        writeln!(out, r#"<text x="{}" y="{ly}" text-anchor="end">{t1:.3}</text>"#, WIDTH - MARGIN_R).unwrap();
        writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">t</text>"#, WIDTH / 2.0, ly + 14.0).unwrap();
        writeln!(out, r#"<text x="{}" y="{}" text-anchor="end">{hi:.4}</text>"#, MARGIN_L - 6.0, top + 10.0).unwrap();
        writeln!(out, r#"<text x="{}" y="{}" text-anchor="end">{lo:.4}</text>"#, MARGIN_L - 6.0, top + PANEL).unwrap();
        writeln!(out, r#"<text x="14" y="{}">x{}</text>"#, top + PANEL / 2.0, i + 1).unwrap();
        writeln!(out, "</g>").unwrap();
    }
    out.push_str("</svg>\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Parses a trajectory CSV (`t,x1,...,xm[,u1,...]`); input columns are dropped.
pub fn parse_csv(text: &str) -> Result<Series, String> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines.next().ok_or("empty trajectory file")?.split(',').map(str::trim).collect();
    if header.first() != Some(&"t") {
        return Err("trajectory header must start with t".into());
    }
    let m = header.iter().filter(|h| h.starts_with('x')).count();
    if m == 0 {
        return Err("trajectory has no state columns".into());
    }
    let mut series = Series { times: Vec::new(), states: Vec::new() };
    for (row, line) in lines.enumerate() {
        let vals: Vec<f64> = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| format!("row {}: {e}", row + 1))?;
        if vals.len() != header.len() {
            return Err(format!("row {} has {} columns, expected {}", row + 1, vals.len(), header.len()));
        }
        series.times.push(vals[0]);
        series.states.push(vals[1..=m].to_vec());
    }
    if series.times.is_empty() {
        return Err("trajectory has no rows".into());
    }
    Ok(series)
}

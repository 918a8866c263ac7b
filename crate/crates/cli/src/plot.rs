//! SVG figures drawn from the trajectory CSVs in an output directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use hcbf::scenarios::ScenarioSpec;

use crate::config::DEFAULT_POLICIES;
use crate::CliError;

/// One trajectory CSV: `t,mode,x0..,u0..,h_active`.
#[derive(Clone, Debug)]
pub struct Trace {
    pub name: String,
    pub t: Vec<f64>,
    pub mode: Vec<String>,
    pub x: Vec<Vec<f64>>,
    pub h: Vec<f64>,
}

impl Trace {
    /// Indices where the mode differs from the previous sample.
    pub fn switches(&self) -> Vec<usize> {
        (1..self.mode.len()).filter(|&i| self.mode[i] != self.mode[i - 1]).collect()
    }
}

pub fn read_trace(path: &Path, name: &str) -> Result<Trace, CliError> {
    let bad = |e: anyhow::Error| CliError::Config(e.context(format!("cannot read trajectory {}", path.display())));
    let mut reader = csv::Reader::from_path(path).map_err(|e| bad(e.into()))?;
    let headers = reader.headers().map_err(|e| bad(e.into()))?.clone();
    let state_dim = headers.iter().filter(|h| h.starts_with('x')).count();
    if headers.get(0) != Some("t") || headers.get(1) != Some("mode") || headers.iter().next_back() != Some("h_active") {
        return Err(bad(anyhow::anyhow!("unexpected header {:?}", headers.iter().collect::<Vec<_>>())));
    }
    let mut trace = Trace {
        name: name.into(),
        t: Vec::new(),
        mode: Vec::new(),
        x: Vec::new(),
        h: Vec::new(),
    };
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.into()))?;
        let num = |k: usize| -> Result<f64, CliError> {
            rec.get(k)
                .unwrap_or("")
                .parse::<f64>()
                .with_context(|| format!("row {}, column {k}", row + 2))
                .map_err(bad)
        };
        trace.t.push(num(0)?);
        trace.mode.push(rec.get(1).unwrap_or("").to_string());
        trace.x.push((0..state_dim).map(|i| num(2 + i)).collect::<Result<_, _>>()?);
        trace.h.push(num(rec.len() - 1)?);
    }
    if trace.t.is_empty() {
        return Err(bad(anyhow::anyhow!("no samples")));
    }
    Ok(trace)
}

/// Trajectories found in `dir`: the nominal run first, then policies in the
/// default order, then any others alphabetically.
pub fn collect_traces(dir: &Path) -> Result<Vec<Trace>, CliError> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .with_context(|| format!("cannot list {}", dir.display()))
        .map_err(CliError::Config)?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let f = e.file_name().into_string().ok()?;
            Some(f.strip_prefix("traj_")?.strip_suffix(".csv")?.to_string())
        })
        .collect();
    let rank = |n: &str| {
        if n == "nominal" {
            return 0;
        }
        DEFAULT_POLICIES
            .iter()
            .position(|p| p.name() == n)
            .map_or(DEFAULT_POLICIES.len() + 1, |i| i + 1)
    };
    names.sort_by(|a, b| rank(a).cmp(&rank(b)).then(a.cmp(b)));
    if names.is_empty() {
        return Err(CliError::config(format!(
            "no traj_*.csv in {}; run `hcbf simulate` first",
            dir.display()
        )));
    }
    names
        .iter()
        .map(|n| read_trace(&dir.join(format!("traj_{n}.csv")), n))
        .collect()
}

fn color(name: &str) -> &'static str {
    match name {
        "nominal" => "#888888",
        "refined" => "#1f77b4",
        "switch-unaware" => "#d62728",
        "global-cbf" => "#2ca02c",
        "global-intersection" => "#9467bd",
        _ => "#ff7f0e",
    }
}

fn dash(name: &str) -> &'static str {
    if name == "nominal" {
        " stroke-dasharray=\"6 4\""
    } else {
        ""
    }
}

const W: f64 = 640.0;
const H: f64 = 440.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 160.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;

/// Axes frame mapping data coordinates into the plot area.
struct Canvas {
    x: (f64, f64),
    y: (f64, f64),
    body: String,
    legend: Vec<(String, String)>,
}

impl Canvas {
    fn new(x: (f64, f64), y: (f64, f64)) -> Self {
        let pad = |(a, b): (f64, f64)| if b > a { (a, b) } else { (a - 0.5, a + 0.5) };
        Self {
            x: pad(x),
            y: pad(y),
            body: String::new(),
            legend: Vec::new(),
        }
    }

    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x.0) / (self.x.1 - self.x.0) * (W - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        H - BOTTOM - (y - self.y.0) / (self.y.1 - self.y.0) * (H - TOP - BOTTOM)
    }

    fn points(&self, pts: impl IntoIterator<Item = (f64, f64)>) -> String {
        let mut s = String::new();
        for (x, y) in pts {
            let _ = write!(s, "{:.2},{:.2} ", self.px(x), self.py(y));
        }
        s.trim_end().to_string()
    }

    /// Polyline broken wherever a coordinate is not finite.
    fn polyline(&mut self, pts: &[(f64, f64)], stroke: &str, attrs: &str) {
        for run in pts.split(|(x, y)| !(x.is_finite() && y.is_finite())) {
            if run.len() < 2 {
                continue;
            }
            let p = self.points(run.iter().copied());
            let _ = writeln!(
                self.body,
                "<polyline points=\"{p}\" fill=\"none\" stroke=\"{stroke}\" stroke-width=\"1.6\"{attrs}/>"
            );
        }
    }

    fn polygon(&mut self, pts: &[(f64, f64)], fill: &str, attrs: &str) {
        let p = self.points(pts.iter().copied());
        let _ = writeln!(self.body, "<polygon points=\"{p}\" fill=\"{fill}\"{attrs}/>");
    }

    fn rect(&mut self, lo: [f64; 2], hi: [f64; 2], fill: &str, attrs: &str) {
        let pts = [(lo[0], lo[1]), (hi[0], lo[1]), (hi[0], hi[1]), (lo[0], hi[1])];
        self.polygon(&pts, fill, attrs);
    }

    fn marker(&mut self, x: f64, y: f64, stroke: &str, attrs: &str) {
        let _ = writeln!(
            self.body,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"4\" fill=\"white\" stroke=\"{stroke}\" stroke-width=\"1.6\"{attrs}/>",
            self.px(x),
            self.py(y)
        );
    }

    fn legend(&mut self, label: &str, stroke: &str) {
        self.legend.push((label.into(), stroke.into()));
    }

    fn ticks((a, b): (f64, f64)) -> Vec<f64> {
        let raw = (b - a) / 5.0;
        let mag = 10f64.powf(raw.log10().floor());
        let step = [1.0, 2.0, 5.0, 10.0]
            .into_iter()
            .map(|k| k * mag)
            .find(|s| *s >= raw)
            .unwrap_or(10.0 * mag);
        let mut t = (a / step).ceil() * step;
        let mut out = Vec::new();
        while t <= b + 1e-9 * step {
            out.push(if t.abs() < 1e-12 * step { 0.0 } else { t });
            t += step;
        }
        out
    }

    fn finish(self, title: &str, xlabel: &str, ylabel: &str) -> String {
        let (x0, x1, y0, y1) = (LEFT, W - RIGHT, TOP, H - BOTTOM);
        let mut s = String::new();
        let _ = writeln!(
            s,
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">"
        );
        let _ = writeln!(s, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
        let _ = writeln!(
            s,
            "<defs><clipPath id=\"area\"><rect x=\"{x0}\" y=\"{y0}\" width=\"{}\" height=\"{}\"/></clipPath></defs>",
            x1 - x0,
            y1 - y0
        );
        let _ = writeln!(s, "<text x=\"{}\" y=\"18\" text-anchor=\"middle\" font-size=\"14\">{title}</text>", (x0 + x1) / 2.0);
        for t in Self::ticks(self.x) {
            let p = self.px(t);
            let _ = writeln!(
                s,
                "<line x1=\"{p:.2}\" y1=\"{y1}\" x2=\"{p:.2}\" y2=\"{}\" stroke=\"black\"/><text x=\"{p:.2}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
                y1 + 5.0,
                y1 + 18.0,
                fmt_tick(t)
            );
        }
        for t in Self::ticks(self.y) {
            let p = self.py(t);
            let _ = writeln!(
                s,
                "<line x1=\"{}\" y1=\"{p:.2}\" x2=\"{x0}\" y2=\"{p:.2}\" stroke=\"black\"/><text x=\"{}\" y=\"{:.2}\" text-anchor=\"end\">{}</text>",
                x0 - 5.0,
                x0 - 8.0,
                p + 4.0,
                fmt_tick(t)
            );
        }
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{xlabel}</text>",
            (x0 + x1) / 2.0,
            H - 12.0
        );
        let _ = writeln!(
            s,
            "<text x=\"18\" y=\"{0}\" text-anchor=\"middle\" transform=\"rotate(-90 18 {0})\">{ylabel}</text>",
            (y0 + y1) / 2.0
        );
        let _ = writeln!(s, "<g clip-path=\"url(#area)\">\n{}</g>", self.body);
        let _ = writeln!(
            s,
            "<rect x=\"{x0}\" y=\"{y0}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>",
            x1 - x0,
            y1 - y0
        );
        for (i, (label, stroke)) in self.legend.iter().enumerate() {
            let y = y0 + 10.0 + 18.0 * i as f64;
            let _ = writeln!(
                s,
                "<line x1=\"{0}\" y1=\"{y}\" x2=\"{1}\" y2=\"{y}\" stroke=\"{stroke}\" stroke-width=\"3\"/><text x=\"{2}\" y=\"{3}\">{label}</text>",
                x1 + 10.0,
                x1 + 30.0,
                x1 + 36.0,
                y + 4.0,
                label = escape(label)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn fmt_tick(t: f64) -> String {
    let s = format!("{t:.3}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

fn bounds(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    vals.filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)))
}

fn draw_traces(c: &mut Canvas, traces: &[Trace], xy: impl Fn(&[f64]) -> (f64, f64)) {
    for tr in traces {
        let stroke = color(&tr.name);
        let pts: Vec<_> = tr.x.iter().map(|x| xy(x)).collect();
        c.polyline(&pts, stroke, &format!(" class=\"trajectory\" data-policy=\"{}\"{}", escape(&tr.name), dash(&tr.name)));
        for i in tr.switches() {
            let (x, y) = xy(&tr.x[i]);
            let attrs = format!(
                " class=\"switch\" data-policy=\"{}\" data-t=\"{}\" data-from=\"{}\" data-to=\"{}\"",
                escape(&tr.name),
                tr.t[i],
                escape(&tr.mode[i - 1]),
                escape(&tr.mode[i])
            );
            c.marker(x, y, stroke, &attrs);
        }
        c.legend(&tr.name, stroke);
    }
}

/// Speed–gap plane with the headway-violating region shaded and the zero
/// level curves of both local CBFs.
fn acc_phase(p: &hcbf::scenarios::acc::AccParams, traces: &[Trace]) -> String {
    let (v_lo, v_hi) = (p.grid[1].1, p.grid[1].2);
    let (d_lo, d_hi) = (p.grid[2].1, p.grid[2].2);
    let mut c = Canvas::new((v_lo, v_hi), (d_lo, d_hi));
    c.polygon(
        &[(v_lo, d_lo), (v_lo, p.t_h * v_lo), (v_hi, p.t_h * v_hi), (v_hi, d_lo)],
        "#f4c7c3",
        " class=\"unsafe-headway\"",
    );
    c.legend("headway < 0", "#f4c7c3");
    for (name, coef, stroke) in [("h_dry = 0", p.c_dry, "#555555"), ("h_ice = 0", p.c_ice, "#17becf")] {
        let pts: Vec<_> = (0..=200)
            .map(|k| {
                let v = v_lo + (v_hi - v_lo) * k as f64 / 200.0;
                (v, p.t_h * v + (p.v0 - v).powi(2) / (2.0 * coef * p.g))
            })
            .collect();
        c.polyline(&pts, stroke, &format!(" class=\"level\" data-name=\"{}\" stroke-dasharray=\"2 3\"", escape(name)));
        c.legend(name, stroke);
    }
    draw_traces(&mut c, traces, |x| (x[1], x[2]));
    c.finish("speed-gap plane", "v (m/s)", "d (m)")
}

/// Workspace with obstacles, the wet half-plane and the driven paths.
fn dubins_workspace(p: &hcbf::scenarios::dubins::DubinsParams, traces: &[Trace]) -> String {
    let [x0, x1, y0, y1] = p.workspace;
    let mut c = Canvas::new((x0, x1), (y0, y1));
    c.rect([p.boundary, y0], [x1, y1], "#d6e9f8", " class=\"wet\"");
    c.legend("wet surface", "#d6e9f8");
    for o in &p.obstacles {
        c.rect(o.lower, o.upper, "#444444", " class=\"obstacle\"");
    }
    c.polyline(&[(p.boundary, y0), (p.boundary, y1)], "#1f3b73", " class=\"boundary\" stroke-dasharray=\"5 3\"");
    c.marker(p.goal[0], p.goal[1], "#000000", " class=\"goal\"");
    draw_traces(&mut c, traces, |x| (x[0], x[1]));
    c.finish("workspace", "x (m)", "y (m)")
}

/// Active CBF value over time with every switch marked.
fn h_series(traces: &[Trace]) -> String {
    let shown: Vec<&Trace> = traces.iter().filter(|t| t.h.iter().any(|h| h.is_finite())).collect();
    let tb = bounds(shown.iter().flat_map(|t| t.t.iter().copied()));
    let hb = bounds(shown.iter().flat_map(|t| t.h.iter().copied()));
    let (tb, hb) = if shown.is_empty() { ((0.0, 1.0), (-1.0, 1.0)) } else { (tb, hb) };
    let margin = 0.05 * (hb.1 - hb.0).max(1e-9);
    let mut c = Canvas::new(tb, ((hb.0 - margin).min(0.0), hb.1 + margin));
    c.polyline(&[(tb.0, 0.0), (tb.1, 0.0)], "#000000", " class=\"zero\" stroke-dasharray=\"2 2\"");
    for tr in shown {
        let stroke = color(&tr.name);
        // break the line at each jump so the discontinuity shows
        let mut pts = Vec::with_capacity(tr.t.len() + 4);
        for i in 0..tr.t.len() {
            if i > 0 && tr.mode[i] != tr.mode[i - 1] {
                pts.push((f64::NAN, f64::NAN));
            }
            pts.push((tr.t[i], tr.h[i]));
        }
        c.polyline(&pts, stroke, &format!(" class=\"h\" data-policy=\"{}\"", escape(&tr.name)));
        for i in tr.switches() {
            let t = tr.t[i];
            c.polyline(
                &[(t, c.y.0), (t, c.y.1)],
                stroke,
                &format!(
                    " class=\"switch\" data-policy=\"{}\" data-t=\"{t}\" stroke-dasharray=\"4 4\" stroke-opacity=\"0.6\"",
                    escape(&tr.name)
                ),
            );
        }
        c.legend(&tr.name, stroke);
    }
    c.finish("active CBF along the run", "t (s)", "h")
}

/// Renders every figure for the study from the CSVs in `dir`. Nothing is
/// written unless all inputs parse.
pub fn render(spec: &ScenarioSpec, dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let traces = collect_traces(dir)?;
    let figures = match spec {
        ScenarioSpec::Acc(p) => vec![("phase.svg", acc_phase(p, &traces))],
        ScenarioSpec::Dubins(p) => vec![("workspace.svg", dubins_workspace(p, &traces))],
    }
    .into_iter()
    .chain([("h.svg", h_series(&traces))]);
    let mut written = Vec::new();
    for (name, svg) in figures {
        let path = dir.join(name);
        fs::write(&path, svg)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ticks_cover_the_range_with_round_steps() {
        let t = Canvas::ticks((0.0, 25.0));
        assert_eq!(t, vec![0.0, 5.0, 10.0, 15.0, 20.0, 25.0]);
        let t = Canvas::ticks((-0.3, 0.7));
        assert!(t.len() >= 4 && t[0] >= -0.3 && *t.last().unwrap() <= 0.7);
    }

    #[test]
    fn polyline_breaks_at_nan() {
        let mut c = Canvas::new((0.0, 1.0), (0.0, 1.0));
        c.polyline(&[(0.0, 0.0), (0.5, 0.5), (f64::NAN, f64::NAN), (0.6, 0.6), (1.0, 1.0)], "red", "");
        assert_eq!(c.body.matches("<polyline").count(), 2);
    }
}

//! Minimal line-chart SVG writer. Output depends only on the input data,
//! with every coordinate printed at fixed precision, so charts diff cleanly.

use std::fmt::Write;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 140.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 56.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#7f7f7f"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MarkerKind {
    Dot,
    /// Boxed cross, used for runs that failed to converge.
    Failed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Marker {
    pub x: f64,
    pub y: f64,
    pub kind: MarkerKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    /// Joined by a polyline, in the given order.
    pub line: Vec<(f64, f64)>,
    pub markers: Vec<Marker>,
    /// Horizontal reference line instead of data.
    pub reference: Option<f64>,
}

impl Series {
    pub fn line(name: impl Into<String>, line: Vec<(f64, f64)>) -> Self {
        Self {
            name: name.into(),
            line,
            markers: Vec::new(),
            reference: None,
        }
    }

    pub fn reference(name: impl Into<String>, y: f64) -> Self {
        Self {
            name: name.into(),
            line: Vec::new(),
            markers: Vec::new(),
            reference: Some(y),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineChart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    /// Place x values at equal spacing (categorical axis), labelled by
    /// their value.
    pub categorical_x: bool,
    /// Tick labels of the categorical axis, by position; numbers are used
    /// when empty.
    pub x_names: Vec<String>,
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            _ => out.push(c),
        }
    }
    out
}

fn tick_label(v: f64) -> String {
    if v == v.round() && v.abs() < 1e9 {
        format!("{}", v as i64)
    } else {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').to_string()
    }
}

/// Round the span out to 1, 2 or 5 times a power of ten.
fn nice_range(lo: f64, hi: f64) -> (f64, f64, f64) {
    let (lo, hi) = if hi - lo < 1e-12 { (lo - 1.0, hi + 1.0) } else { (lo, hi) };
    let raw = (hi - lo) / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| *s >= raw)
        .unwrap_or(10.0 * mag);
    ((lo / step).floor() * step, (hi / step).ceil() * step, step)
}

impl LineChart {
    fn finite_points(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.series
            .iter()
            .flat_map(|s| s.line.iter().copied().chain(s.markers.iter().map(|m| (m.x, m.y))))
            .filter(|(x, y)| x.is_finite() && y.is_finite())
    }

    fn x_values(&self) -> Vec<f64> {
        let mut xs: Vec<f64> = self.finite_points().map(|p| p.0).collect();
        xs.sort_by(f64::total_cmp);
        xs.dedup();
        xs
    }

    pub fn render(&self) -> String {
        let xs = self.x_values();
        let mut ys: Vec<f64> = self.finite_points().map(|p| p.1).collect();
        ys.extend(self.series.iter().filter_map(|s| s.reference));
        let (ylo, yhi, ystep) = nice_range(
            ys.iter().copied().fold(f64::INFINITY, f64::min).min(0.0),
            ys.iter().copied().fold(f64::NEG_INFINITY, f64::max).max(1e-9),
        );
        let pw = WIDTH - MARGIN_L - MARGIN_R;
        let ph = HEIGHT - MARGIN_T - MARGIN_B;
        let (xlo, xhi, xstep) = if xs.is_empty() {
            (0.0, 1.0, 1.0)
        } else {
            nice_range(xs[0], xs[xs.len() - 1])
        };
        let px = |x: f64| -> f64 {
            if self.categorical_x {
                let i = xs.iter().position(|v| *v == x).unwrap_or(0) as f64;
                MARGIN_L + pw * (i + 0.5) / xs.len().max(1) as f64
            } else {
                MARGIN_L + pw * (x - xlo) / (xhi - xlo)
            }
        };
        let py = |y: f64| MARGIN_T + ph * (1.0 - (y - ylo) / (yhi - ylo));

        let mut s = String::new();
        writeln!(
            s,
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\" font-size=\"12\">"
        )
        .unwrap();
        writeln!(s, "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>").unwrap();
        writeln!(
            s,
            "<text x=\"{:.1}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>",
            MARGIN_L + pw / 2.0,
            escape(&self.title)
        )
        .unwrap();
        // Axes and ticks.
        writeln!(
            s,
            "<path d=\"M{MARGIN_L:.1},{MARGIN_T:.1} V{:.1} H{:.1}\" stroke=\"black\" fill=\"none\"/>",
            MARGIN_T + ph,
            MARGIN_L + pw
        )
        .unwrap();
        let mut y = ylo;
        while y <= yhi + 1e-9 * ystep {
            let yy = py(y);
            writeln!(
                s,
                "<line x1=\"{:.1}\" y1=\"{yy:.1}\" x2=\"{:.1}\" y2=\"{yy:.1}\" stroke=\"#ddd\"/><text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>",
                MARGIN_L,
                MARGIN_L + pw,
                MARGIN_L - 6.0,
                yy + 4.0,
                tick_label(y)
            )
            .unwrap();
            y += ystep;
        }
        let x_ticks: Vec<f64> = if self.categorical_x {
            xs.clone()
        } else {
            let mut t = Vec::new();
            let mut x = xlo;
            while x <= xhi + 1e-9 * xstep {
                t.push(x);
                x += xstep;
            }
            t
        };
        for (i, x) in x_ticks.into_iter().enumerate() {
            let xx = px(x);
            let label = match self.x_names.get(i) {
                Some(n) if self.categorical_x => escape(n),
                _ => tick_label(x),
            };
            writeln!(
                s,
                "<text x=\"{xx:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
                MARGIN_T + ph + 18.0,
                label
            )
            .unwrap();
        }
        writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
            MARGIN_L + pw / 2.0,
            HEIGHT - 12.0,
            escape(&self.x_label)
        )
        .unwrap();
        writeln!(
            s,
            "<text x=\"16\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.1})\">{}</text>",
            MARGIN_T + ph / 2.0,
            MARGIN_T + ph / 2.0,
            escape(&self.y_label)
        )
        .unwrap();

        for (k, series) in self.series.iter().enumerate() {
            let color = PALETTE[k % PALETTE.len()];
            if let Some(r) = series.reference {
                writeln!(
                    s,
                    "<line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"{color}\" stroke-dasharray=\"6 4\"/>",
                    MARGIN_L,
                    py(r),
                    MARGIN_L + pw,
                    py(r)
                )
                .unwrap();
            }
            let pts: Vec<String> = series
                .line
                .iter()
                .filter(|(x, y)| x.is_finite() && y.is_finite())
                .map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y)))
                .collect();
            if !pts.is_empty() {
                writeln!(
                    s,
                    "<polyline points=\"{}\" stroke=\"{color}\" stroke-width=\"2\" fill=\"none\"/>",
                    pts.join(" ")
                )
                .unwrap();
            }
            for m in series.markers.iter().filter(|m| m.x.is_finite() && m.y.is_finite()) {
                let (cx, cy) = (px(m.x), py(m.y));
                match m.kind {
                    MarkerKind::Dot => writeln!(
                        s,
                        "<circle cx=\"{cx:.1}\" cy=\"{cy:.1}\" r=\"3\" fill=\"{color}\" fill-opacity=\"0.6\"/>"
                    )
                    .unwrap(),
                    MarkerKind::Failed => writeln!(
                        s,
                        "<path d=\"M{:.1},{:.1} h10 v10 h-10 z M{:.1},{:.1} l10,10 M{:.1},{:.1} l-10,10\" stroke=\"gray\" fill=\"none\"/>",
                        cx - 5.0,
                        cy - 5.0,
                        cx - 5.0,
                        cy - 5.0,
                        cx + 5.0,
                        cy - 5.0
                    )
                    .unwrap(),
                }
            }
            // Legend.
            let ly = MARGIN_T + 16.0 * k as f64 + 8.0;
            let lx = WIDTH - MARGIN_R + 12.0;
            writeln!(
                s,
                "<line x1=\"{lx:.1}\" y1=\"{ly:.1}\" x2=\"{:.1}\" y2=\"{ly:.1}\" stroke=\"{color}\" stroke-width=\"2\"/><text x=\"{:.1}\" y=\"{:.1}\">{}</text>",
                lx + 18.0,
                lx + 24.0,
                ly + 4.0,
                escape(&series.name)
            )
            .unwrap();
        }
        s.push_str("</svg>\n");
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nice_range_covers_data() {
        let (lo, hi, step) = nice_range(0.3, 0.9);
        assert!(lo <= 0.3 && hi >= 0.9);
        assert!((step - 0.1).abs() < 1e-12 || (step - 0.2).abs() < 1e-12);
        let (lo, hi, _) = nice_range(5.0, 5.0);
        assert!(lo < 5.0 && hi > 5.0);
    }

    #[test]
    fn labels_are_escaped() {
        let chart = LineChart {
            title: "a<b & c".into(),
            x_label: "x".into(),
            y_label: "y".into(),
            series: vec![Series::line("s\"1", vec![(0.0, 1.0), (1.0, 2.0)])],
            categorical_x: false,
            x_names: Vec::new(),
        };
        let svg = chart.render();
        assert!(svg.contains("a&lt;b &amp; c"));
        assert!(svg.contains("s&quot;1"));
        assert_eq!(svg, chart.render());
    }
}

//! Deterministic SVG figures. Coordinates are printed with two decimals so
//! identical inputs give identical bytes.

use std::fmt::Write;

use mcdrop::calibration::ReliabilityDiagram;
use mcdrop::kde::KdeCurve;
use mcdrop::report::ClusterReport;

const BOX_COLOR: &str = "#1f77b4";
const MASK_COLOR: &str = "#ff7f0e";
const MEAN_DASH: &str = "8 4";
const STD_DASH: &str = "2 2";

fn f(v: f64) -> String {
    // avoid "-0.00"
    let s = format!("{v:.2}");
    if s == "-0.00" {
        "0.00".into()
    } else {
        s
    }
}

fn open(w: f64, h: f64, view: (f64, f64, f64, f64)) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" viewBox=\"{} {} {} {}\">\n",
        f(w),
        f(h),
        f(view.0),
        f(view.1),
        f(view.2),
        f(view.3)
    )
}

fn line(out: &mut String, a: (f64, f64), b: (f64, f64), stroke: &str, width: f64, dash: Option<&str>) {
    let dash = dash.map_or(String::new(), |d| format!(" stroke-dasharray=\"{d}\""));
    let _ = writeln!(
        out,
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"{stroke}\" stroke-width=\"{}\"{dash}/>",
        f(a.0),
        f(a.1),
        f(b.0),
        f(b.1),
        f(width)
    );
}

fn text(out: &mut String, x: f64, y: f64, anchor: &str, s: &str) {
    let _ = writeln!(
        out,
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"{anchor}\">{s}</text>",
        f(x),
        f(y)
    );
}

/// Member boxes, the mean box, one whisker per edge spanning the edge
/// standard deviation, and member centers, in image coordinates.
pub fn boxes(r: &ClusterReport, width: u32, height: u32) -> String {
    let (w, h) = (width as f64, height as f64);
    let mut s = open(w, h, (0.0, 0.0, w, h));
    let _ = writeln!(s, "<rect x=\"0\" y=\"0\" width=\"{}\" height=\"{}\" fill=\"white\"/>", f(w), f(h));
    let m = &r.box_stats.mean_box;
    let _ = writeln!(
        s,
        "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"{BOX_COLOR}\" stroke-width=\"2\"/>",
        f(m.x1()),
        f(m.y1()),
        f(m.width()),
        f(m.height())
    );
    let [s1, s2, s3, s4] = r.box_stats.edge_std;
    let (xm, ym) = m.center();
    let whiskers = [
        ((m.x1() - s1, ym), (m.x1() + s1, ym)),
        ((xm, m.y1() - s2), (xm, m.y1() + s2)),
        ((m.x2() - s3, ym), (m.x2() + s3, ym)),
        ((xm, m.y2() - s4), (xm, m.y2() + s4)),
    ];
    s.push_str("<g class=\"whiskers\">\n");
    for (a, b) in whiskers {
        line(&mut s, a, b, "black", 1.5, None);
    }
    s.push_str("</g>\n<g class=\"centers\" fill=\"red\">\n");
    for &(cx, cy) in &r.box_stats.centers {
        let _ = writeln!(s, "<circle cx=\"{}\" cy=\"{}\" r=\"1.5\"/>", f(cx), f(cy));
    }
    s.push_str("</g>\n</svg>\n");
    s
}

/// Mean score with a one-standard-deviation segment for the top classes;
/// background is always shown.
pub fn classes(r: &ClusterReport, top: usize) -> String {
    let cs = &r.class_stats;
    let mut shown: Vec<usize> = cs.top_classes.iter().copied().take(top).collect();
    if !shown.contains(&0) {
        shown.push(0);
    }
    let (left, right, top_m, bottom) = (40.0, 20.0, 20.0, 30.0);
    let (step, plot_h) = (60.0, 200.0);
    let w = left + right + step * shown.len() as f64;
    let h = top_m + plot_h + bottom;
    let y = |v: f64| top_m + plot_h * (1.0 - v);
    let mut s = open(w, h, (0.0, 0.0, w, h));
    let _ = writeln!(s, "<rect x=\"0\" y=\"0\" width=\"{}\" height=\"{}\" fill=\"white\"/>", f(w), f(h));
    line(&mut s, (left, y(0.0)), (w - right, y(0.0)), "black", 1.0, None);
    line(&mut s, (left, y(0.0)), (left, y(1.0)), "black", 1.0, None);
    for tick in [0.0, 0.5, 1.0] {
        text(&mut s, left - 4.0, y(tick) + 4.0, "end", &format!("{tick:.1}"));
    }
    for (i, &c) in shown.iter().enumerate() {
        let x = left + step * (i as f64 + 0.5);
        let (mu, sd) = (cs.mean_scores[c], cs.std_scores[c]);
        line(&mut s, (x, y(mu - sd)), (x, y(mu + sd)), "black", 1.5, None);
        let _ = writeln!(s, "<circle cx=\"{}\" cy=\"{}\" r=\"4\" fill=\"red\"/>", f(x), f(y(mu)));
        let label = if c == 0 { "bg".to_string() } else { format!("c{c}") };
        text(&mut s, x, y(0.0) + 16.0, "middle", &label);
    }
    s.push_str("</svg>\n");
    s
}

/// Color steps of the heatmap figure; the PGM export keeps all 256.
pub const HEATMAP_LEVELS: u32 = 32;

/// White-to-red heatmap of a row-major image, cropped to the region with
/// non-zero values. Values are quantized to [`HEATMAP_LEVELS`] steps and
/// equal neighbouring pixels in a row share one rect.
pub fn heatmap(values: &[f64], width: u32, height: u32, full_scale: f64) -> String {
    let (w, h) = (width as usize, height as usize);
    let steps = (HEATMAP_LEVELS - 1) as f64;
    let level = |v: f64| {
        let q = (steps * v / full_scale).round().clamp(0.0, steps);
        (255.0 * q / steps).round() as u8
    };
    let (mut r0, mut r1, mut c0, mut c1) = (h, 0, w, 0);
    for r in 0..h {
        for c in 0..w {
            if level(values[r * w + c]) > 0 {
                r0 = r0.min(r);
                r1 = r1.max(r + 1);
                c0 = c0.min(c);
                c1 = c1.max(c + 1);
            }
        }
    }
    if r0 >= r1 {
        (r0, r1, c0, c1) = (0, h, 0, w);
    }
    let (vw, vh) = ((c1 - c0) as f64, (r1 - r0) as f64);
    let mut s = open(vw, vh, (c0 as f64, r0 as f64, vw, vh));
    let _ = writeln!(
        s,
        "<rect x=\"{c0}\" y=\"{r0}\" width=\"{}\" height=\"{}\" fill=\"white\"/>",
        c1 - c0,
        r1 - r0
    );
    s.push_str("<g shape-rendering=\"crispEdges\">\n");
    for r in r0..r1 {
        let mut c = c0;
        while c < c1 {
            let l = level(values[r * w + c]);
            let start = c;
            while c < c1 && level(values[r * w + c]) == l {
                c += 1;
            }
            if l > 0 {
                let g = 255 - l;
                let _ = writeln!(
                    s,
                    "<rect x=\"{start}\" y=\"{r}\" width=\"{}\" height=\"1\" fill=\"rgb(255,{g},{g})\"/>",
                    c - start
                );
            }
        }
    }
    s.push_str("</g>\n</svg>\n");
    s
}

pub struct KdeSeries<'a> {
    pub label: &'a str,
    pub curve: Option<&'a KdeCurve>,
    pub samples: &'a [f64],
}

/// Plot-space mapping shared by the KDE figure and its tests.
pub struct KdeFrame {
    pub x_range: (f64, f64),
    pub y_max: f64,
}

pub const KDE_PLOT: (f64, f64, f64, f64) = (50.0, 20.0, 480.0, 240.0);

impl KdeFrame {
    pub fn new(series: &[KdeSeries]) -> Self {
        let (mut lo, mut hi, mut y_max) = (0.0f64, 1.0f64, 0.0f64);
        for s in series {
            if let Some(c) = s.curve {
                lo = lo.min(c.grid[0]);
                hi = hi.max(c.grid[c.grid.len() - 1]);
                y_max = y_max.max(c.density.iter().cloned().fold(0.0, f64::max));
            }
            for &v in s.samples {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        Self {
            x_range: (lo, hi),
            y_max: if y_max > 0.0 { y_max * 1.1 } else { 1.0 },
        }
    }

    pub fn map(&self, x: f64, y: f64) -> (f64, f64) {
        let (left, top, pw, ph) = KDE_PLOT;
        let (lo, hi) = self.x_range;
        (left + pw * (x - lo) / (hi - lo), top + ph * (1.0 - y / self.y_max))
    }
}

/// Density curves with a long-dashed line at the mean and short-dashed
/// lines one standard deviation either side. A degenerate sample is drawn
/// as a solid spike at its value.
pub fn kde_plot(series: &[KdeSeries]) -> String {
    let (left, top, pw, ph) = KDE_PLOT;
    let (w, h) = (left + pw + 20.0, top + ph + 40.0);
    let frame = KdeFrame::new(series);
    let mut s = open(w, h, (0.0, 0.0, w, h));
    let _ = writeln!(s, "<rect x=\"0\" y=\"0\" width=\"{}\" height=\"{}\" fill=\"white\"/>", f(w), f(h));
    line(&mut s, (left, top + ph), (left + pw, top + ph), "black", 1.0, None);
    line(&mut s, (left, top), (left, top + ph), "black", 1.0, None);
    let (lo, hi) = frame.x_range;
    let mut ticks: Vec<f64> = vec![lo];
    for x in [0.0, 0.5, 1.0, hi] {
        // skip ticks that would overprint their neighbour
        if x - ticks[ticks.len() - 1] > 0.05 * (hi - lo) {
            ticks.push(x);
        }
    }
    for x in ticks {
        let (px, _) = frame.map(x, 0.0);
        text(&mut s, px, top + ph + 14.0, "middle", &format!("{x:.2}"));
    }
    for (i, series_i) in series.iter().enumerate() {
        let color = if i == 0 { BOX_COLOR } else { MASK_COLOR };
        text(&mut s, left + pw - 4.0, top + 14.0 * (i as f64 + 1.0), "end", series_i.label);
        let vline = |s: &mut String, x: f64, dash: Option<&str>, width: f64| {
            let (px, _) = frame.map(x, 0.0);
            line(s, (px, top), (px, top + ph), color, width, dash);
        };
        match series_i.curve {
            Some(c) => {
                let pts: Vec<String> = c
                    .grid
                    .iter()
                    .zip(&c.density)
                    .map(|(&x, &y)| {
                        let (px, py) = frame.map(x, y);
                        format!("{},{}", f(px), f(py))
                    })
                    .collect();
                let _ = writeln!(
                    s,
                    "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
                    pts.join(" ")
                );
                vline(&mut s, c.sample_mean, Some(MEAN_DASH), 1.5);
                vline(&mut s, c.sample_mean - c.sample_std, Some(STD_DASH), 1.0);
                vline(&mut s, c.sample_mean + c.sample_std, Some(STD_DASH), 1.0);
            }
            None if !series_i.samples.is_empty() => {
                let v = series_i.samples.iter().sum::<f64>() / series_i.samples.len() as f64;
                vline(&mut s, v, None, 2.0);
            }
            None => {}
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Accuracy bars per confidence bin against the diagonal, with the gap to
/// the mean confidence shaded.
pub fn reliability(d: &ReliabilityDiagram, title: &str) -> String {
    let (left, top, pw, ph) = (50.0, 30.0, 300.0, 300.0);
    let (w, h) = (left + pw + 20.0, top + ph + 40.0);
    let x = |v: f64| left + pw * v;
    let y = |v: f64| top + ph * (1.0 - v);
    let mut s = open(w, h, (0.0, 0.0, w, h));
    let _ = writeln!(s, "<rect x=\"0\" y=\"0\" width=\"{}\" height=\"{}\" fill=\"white\"/>", f(w), f(h));
    text(&mut s, left + pw / 2.0, 18.0, "middle", title);
    for b in &d.bins {
        let (Some(acc), Some(conf)) = (b.accuracy, b.mean_confidence) else {
            continue;
        };
        let (x0, bw) = (x(b.lower), x(b.upper) - x(b.lower));
        let _ = writeln!(
            s,
            "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"{BOX_COLOR}\" stroke=\"black\" stroke-width=\"0.5\"/>",
            f(x0),
            f(y(acc)),
            f(bw),
            f(y(0.0) - y(acc))
        );
        let (a, c) = (acc.min(conf), acc.max(conf));
        let _ = writeln!(
            s,
            "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"red\" fill-opacity=\"0.3\"/>",
            f(x0),
            f(y(c)),
            f(bw),
            f(y(a) - y(c))
        );
    }
    line(&mut s, (x(0.0), y(0.0)), (x(1.0), y(1.0)), "gray", 1.0, Some("4 4"));
    line(&mut s, (x(0.0), y(0.0)), (x(1.0), y(0.0)), "black", 1.0, None);
    line(&mut s, (x(0.0), y(0.0)), (x(0.0), y(1.0)), "black", 1.0, None);
    for t in [0.0, 0.5, 1.0] {
        text(&mut s, x(t), y(0.0) + 14.0, "middle", &format!("{t:.1}"));
        text(&mut s, x(0.0) - 4.0, y(t) + 4.0, "end", &format!("{t:.1}"));
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formatting_has_no_negative_zero() {
        assert_eq!(f(-0.0001), "0.00");
        assert_eq!(f(1.005), format!("{:.2}", 1.005));
    }

    #[test]
    fn heatmap_merges_equal_runs() {
        let mut v = vec![0.0; 4 * 5];
        for c in 1..4 {
            v[5 + c] = 1.0;
        }
        v[10 + 2] = 0.5;
        let s = heatmap(&v, 5, 4, 1.0);
        assert!(s.contains("viewBox=\"1.00 1.00 3.00 2.00\""));
        assert!(s.contains("<rect x=\"1\" y=\"1\" width=\"3\" height=\"1\" fill=\"rgb(255,0,0)\"/>"));
        assert!(s.contains("<rect x=\"2\" y=\"2\" width=\"1\" height=\"1\" fill=\"rgb(255,123,123)\"/>"));
    }
}

//! Minimal SVG line charts: one mean curve with an optional confidence
//! band. No text shaping, no fonts beyond the viewer default monospace —
//! enough to render success-vs-steps figures from metrics CSVs.

const W: f64 = 720.0;
const H: f64 = 480.0;
const ML: f64 = 74.0; // left margin
const MR: f64 = 24.0;
const MT: f64 = 46.0;
const MB: f64 = 58.0;

pub struct Chart<'a> {
    pub title: &'a str,
    pub x_label: &'a str,
    pub y_label: &'a str,
    pub xs: &'a [f64],
    pub mean: &'a [f64],
    /// Per-point (lo, hi) band; `None` where fewer than two runs supplied a
    /// value, which suppresses the band there.
    pub band: &'a [Option<(f64, f64)>],
    /// Force the y-range to [0, 1] (success rates); otherwise fit the data.
    pub unit_y: bool,
}

fn fmt_tick(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e9 {
        format!("{}", v as i64)
    } else {
        format!("{v:.2}")
    }
}

impl Chart<'_> {
    pub fn render(&self) -> String {
        assert_eq!(self.xs.len(), self.mean.len());
        assert_eq!(self.xs.len(), self.band.len());
        let (mut x0, mut x1) = min_max(self.xs);
        if x0 == x1 {
            x0 -= 1.0;
            x1 += 1.0;
        }
        let (y0, y1) = if self.unit_y {
            (0.0, 1.0)
        } else {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for (i, &m) in self.mean.iter().enumerate() {
                let (bl, bh) = self.band[i].unwrap_or((m, m));
                lo = lo.min(bl.min(m));
                hi = hi.max(bh.max(m));
            }
            if lo == hi {
                lo -= 1.0;
                hi += 1.0;
            }
            let pad = 0.05 * (hi - lo);
            (lo - pad, hi + pad)
        };
        let px = |x: f64| ML + (x - x0) / (x1 - x0) * (W - ML - MR);
        let py = |y: f64| H - MB - (y - y0) / (y1 - y0) * (H - MT - MB);

        let mut s = String::new();
        s.push_str(&format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
             viewBox=\"0 0 {W} {H}\">\n"
        ));
        s.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");

        // Grid and ticks.
        for i in 0..=4 {
            let fx = x0 + (x1 - x0) * f64::from(i) / 4.0;
            let fy = y0 + (y1 - y0) * f64::from(i) / 4.0;
            let gx = px(fx);
            let gy = py(fy);
            s.push_str(&format!(
                "<line x1=\"{gx:.1}\" y1=\"{MT}\" x2=\"{gx:.1}\" y2=\"{:.1}\" \
                 stroke=\"#e4e4e4\"/>\n",
                H - MB
            ));
            s.push_str(&format!(
                "<line x1=\"{ML}\" y1=\"{gy:.1}\" x2=\"{:.1}\" y2=\"{gy:.1}\" \
                 stroke=\"#e4e4e4\"/>\n",
                W - MR
            ));
            s.push_str(&format!(
                "<text x=\"{gx:.1}\" y=\"{:.1}\" font-family=\"monospace\" font-size=\"12\" \
                 text-anchor=\"middle\">{}</text>\n",
                H - MB + 18.0,
                fmt_tick(fx)
            ));
            s.push_str(&format!(
                "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"monospace\" font-size=\"12\" \
                 text-anchor=\"end\">{}</text>\n",
                ML - 8.0,
                gy + 4.0,
                fmt_tick(fy)
            ));
        }

        // Confidence band: fill each contiguous run of defined points.
        let mut seg: Vec<(f64, f64, f64)> = Vec::new();
        let flush = |seg: &mut Vec<(f64, f64, f64)>, out: &mut String| {
            if seg.len() >= 2 {
                let mut d = String::from("M");
                for (x, _, hi) in seg.iter() {
                    d.push_str(&format!("{:.1},{:.1} ", px(*x), py(*hi)));
                }
                for (x, lo, _) in seg.iter().rev() {
                    d.push_str(&format!("L{:.1},{:.1} ", px(*x), py(*lo)));
                }
                d.push('Z');
                out.push_str(&format!("<path d=\"{d}\" fill=\"#76a5d84d\" stroke=\"none\"/>\n"));
            }
            seg.clear();
        };
        for (i, b) in self.band.iter().enumerate() {
            match b {
                Some((lo, hi)) => seg.push((self.xs[i], *lo, *hi)),
                None => flush(&mut seg, &mut s),
            }
        }
        flush(&mut seg, &mut s);

        // Mean curve (a marker when there is a single point).
        if self.xs.len() == 1 {
            s.push_str(&format!(
                "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"4\" fill=\"#19558f\"/>\n",
                px(self.xs[0]),
                py(self.mean[0])
            ));
        } else {
            let mut d = String::from("M");
            for (i, &x) in self.xs.iter().enumerate() {
                d.push_str(&format!("{:.1},{:.1} ", px(x), py(self.mean[i])));
            }
            s.push_str(&format!(
                "<path d=\"{d}\" fill=\"none\" stroke=\"#19558f\" stroke-width=\"2\"/>\n"
            ));
        }

        // Axes and labels.
        s.push_str(&format!(
            "<line x1=\"{ML}\" y1=\"{MT}\" x2=\"{ML}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
            H - MB
        ));
        s.push_str(&format!(
            "<line x1=\"{ML}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{0:.1}\" stroke=\"black\"/>\n",
            H - MB,
            W - MR
        ));
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"24\" font-family=\"monospace\" font-size=\"15\" \
             text-anchor=\"middle\">{}</text>\n",
            (ML + W - MR) / 2.0,
            xml_escape(self.title)
        ));
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"monospace\" font-size=\"13\" \
             text-anchor=\"middle\">{}</text>\n",
            (ML + W - MR) / 2.0,
            H - 14.0,
            xml_escape(self.x_label)
        ));
        s.push_str(&format!(
            "<text x=\"20\" y=\"{:.1}\" font-family=\"monospace\" font-size=\"13\" \
             text-anchor=\"middle\" transform=\"rotate(-90 20 {0:.1})\">{}</text>\n",
            (MT + H - MB) / 2.0,
            xml_escape(self.y_label)
        ));
        s.push_str("</svg>\n");
        s
    }
}

fn min_max(v: &[f64]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &x in v {
        lo = lo.min(x);
        hi = hi.max(x);
    }
    (lo, hi)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

//! Per-generation series and a self-contained SVG rendering: best F on
//! the left, the parent's C and A on the right, with a dotted vertical rule
//! at the first generation scored under F-beta.

use std::fmt::Write;

use crate::error::Result;
use crate::runlog::SummaryRecord;

/// First generation scored under F-beta, if the run got there.
pub fn transition(rows: &[SummaryRecord]) -> Option<usize> {
    rows.iter().find(|r| !r.is_warmup()).map(|r| r.generation)
}

pub fn series_csv(rows: &[SummaryRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["generation", "regime", "best_f", "best_c", "best_a", "mean_f"])?;
    for r in rows {
        let a = r.best_a.map(|a| a.to_string()).unwrap_or_default();
        w.write_record([
            r.generation.to_string(),
            r.regime.clone(),
            r.best_f.to_string(),
            r.best_c.to_string(),
            a,
            r.mean_f.to_string(),
        ])?;
    }
    Ok(w.into_inner().map_err(|e| crate::error::format_err(e.to_string()))?)
}

const W: f64 = 420.0;
const H: f64 = 280.0;
const PAD: f64 = 44.0;

struct Panel {
    x0: f64,
    g_max: f64,
    y_min: f64,
}

impl Panel {
    fn px(&self, g: f64) -> f64 {
        self.x0 + PAD + (W - 2.0 * PAD) * g / self.g_max.max(1.0)
    }

    fn py(&self, v: f64) -> f64 {
        H - PAD - (H - 2.0 * PAD) * (v - self.y_min) / (1.0 - self.y_min)
    }

    fn frame(&self, svg: &mut String, title: &str) {
        let (l, r, t, b) = (self.px(0.0), self.px(self.g_max.max(1.0)), self.py(1.0), self.py(self.y_min));
        let _ = writeln!(svg, r##"<rect x="{l:.1}" y="{t:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="#444"/>"##, r - l, b - t);
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="13">{title}</text>"#, (l + r) / 2.0, t - 12.0);
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="11">generation</text>"#, (l + r) / 2.0, b + 30.0);
        for v in [self.y_min, (self.y_min + 1.0) / 2.0, 1.0] {
            let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="end" font-size="10">{v:.2}</text>"#, l - 4.0, self.py(v) + 3.0);
        }
        let _ = writeln!(svg, r#"<text x="{l:.1}" y="{:.1}" text-anchor="middle" font-size="10">0</text>"#, b + 14.0);
        let _ = writeln!(svg, r#"<text x="{r:.1}" y="{:.1}" text-anchor="middle" font-size="10">{}</text>"#, b + 14.0, self.g_max);
    }

    fn line(&self, svg: &mut String, pts: &[(usize, f64)], color: &str) {
        if pts.is_empty() {
            return;
        }
        let coords: Vec<String> = pts.iter().map(|&(g, v)| format!("{:.1},{:.1}", self.px(g as f64), self.py(v))).collect();
        let _ = writeln!(svg, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, coords.join(" "));
    }

    fn rule(&self, svg: &mut String, g: usize) {
        let x = self.px(g as f64);
        let _ = writeln!(
            svg,
            r#"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="red" stroke-dasharray="3,3" class="transition"/>"#,
            self.py(1.0),
            self.py(self.y_min)
        );
    }

    fn legend(&self, svg: &mut String, i: usize, label: &str, color: &str) {
        let x = self.x0 + W - PAD - 60.0;
        let y = H - PAD - 12.0 - 14.0 * i as f64;
        let _ = writeln!(svg, r#"<line x1="{x:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="{color}" stroke-width="2"/>"#, x + 14.0);
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" font-size="10">{label}</text>"#, x + 18.0, y + 3.0);
    }
}

pub fn svg(rows: &[SummaryRecord]) -> String {
    let g_max = rows.iter().map(|r| r.generation).max().unwrap_or(0) as f64;
    let lowest = rows.iter().flat_map(|r| [r.best_f, r.best_c]).fold(0.0f64, f64::min).max(-1.0);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{H}" viewBox="0 0 {} {H}" font-family="sans-serif">"#,
        2.0 * W,
        2.0 * W
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let left = Panel { x0: 0.0, g_max, y_min: lowest };
    let right = Panel { x0: W, g_max, y_min: lowest };
    left.frame(&mut s, "best fitness");
    right.frame(&mut s, "parent accuracy");
    left.line(&mut s, &rows.iter().map(|r| (r.generation, r.best_f)).collect::<Vec<_>>(), "black");
    right.line(&mut s, &rows.iter().map(|r| (r.generation, r.best_c)).collect::<Vec<_>>(), "steelblue");
    right.line(&mut s, &rows.iter().filter_map(|r| Some((r.generation, r.best_a?))).collect::<Vec<_>>(), "darkorange");
    left.legend(&mut s, 0, "F", "black");
    right.legend(&mut s, 1, "C", "steelblue");
    right.legend(&mut s, 0, "A", "darkorange");
    if let Some(g) = transition(rows) {
        left.rule(&mut s, g);
        right.rule(&mut s, g);
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(g: usize, warm: bool) -> SummaryRecord {
        SummaryRecord {
            generation: g,
            regime: if warm { "warmup" } else { "fbeta" }.into(),
            best_f: 0.5,
            best_c: 0.8,
            best_a: (!warm).then_some(0.3),
            mean_f: 0.4,
            parent_budget: 300,
            flipped: false,
        }
    }

    #[test]
    fn one_csv_row_per_generation() {
        let rows: Vec<_> = (0..6).map(|g| rec(g, g < 3)).collect();
        let text = String::from_utf8(series_csv(&rows).unwrap()).unwrap();
        assert_eq!(text.lines().count(), 7);
        assert_eq!(text.lines().nth(4).unwrap(), "3,fbeta,0.5,0.8,0.3,0.4");
    }

    #[test]
    fn transition_is_marked_once_per_panel() {
        let rows: Vec<_> = (0..6).map(|g| rec(g, g < 3)).collect();
        assert_eq!(transition(&rows), Some(3));
        let doc = svg(&rows);
        assert!(doc.starts_with("<svg"));
        assert_eq!(doc.matches(r#"class="transition""#).count(), 2);
        let warm: Vec<_> = (0..3).map(|g| rec(g, true)).collect();
        assert_eq!(svg(&warm).matches(r#"class="transition""#).count(), 0);
    }
}

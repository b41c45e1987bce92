//! Self-contained SVG heatmaps. Output is a pure function of the input, so
//! identical data gives byte-identical files.

use std::fmt::Write as _;
use std::path::Path;

use super::JaccardMatrix;
use crate::error::{LabError, Result};
use crate::patcher::PatchGrid;

const CELL: f64 = 44.0;
const LEFT: f64 = 90.0;
const TOP: f64 = 40.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn hex(rgb: [f64; 3]) -> String {
    let c = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    format!("#{:02x}{:02x}{:02x}", c(rgb[0]), c(rgb[1]), c(rgb[2]))
}

fn lerp(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [0, 1, 2].map(|i| a[i] + (b[i] - a[i]) * t)
}

const BLUE: [f64; 3] = [0.13, 0.40, 0.67];
const WHITE: [f64; 3] = [0.97, 0.97, 0.97];
const RED: [f64; 3] = [0.70, 0.09, 0.17];

/// Blue (negative) through white (zero) to red (positive).
fn diverging(v: f64, max_abs: f64) -> String {
    if max_abs <= 0.0 {
        return hex(WHITE);
    }
    let t = (v / max_abs).clamp(-1.0, 1.0);
    if t < 0.0 {
        hex(lerp(WHITE, BLUE, -t))
    } else {
        hex(lerp(WHITE, RED, t))
    }
}

/// White at 0 to dark blue at 1.
fn sequential(v: f64) -> String {
    hex(lerp(WHITE, [0.03, 0.19, 0.42], v.clamp(0.0, 1.0)))
}

fn text_colour(fill_dark: bool) -> &'static str {
    if fill_dark {
        "#ffffff"
    } else {
        "#111111"
    }
}

struct Layout<'a> {
    title: &'a str,
    row_labels: Vec<String>,
    col_labels: Vec<String>,
    values: &'a [Vec<f64>],
    footer: String,
}

fn render(l: &Layout<'_>, fill: impl Fn(f64) -> (String, bool)) -> String {
    let w = LEFT + CELL * l.col_labels.len() as f64 + 20.0;
    let h = TOP + CELL * l.row_labels.len() as f64 + 50.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="monospace" font-size="11">"#
    );
    let _ = writeln!(s, r#"<text x="{LEFT}" y="18" font-size="13">{}</text>"#, escape(l.title));
    for (j, c) in l.col_labels.iter().enumerate() {
        let x = LEFT + CELL * (j as f64 + 0.5);
        let _ = writeln!(s, r#"<text x="{x}" y="{}" text-anchor="middle">{}</text>"#, TOP - 6.0, escape(c));
    }
    for (i, r) in l.row_labels.iter().enumerate() {
        let y = TOP + CELL * i as f64;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            LEFT - 6.0,
            y + CELL / 2.0 + 4.0,
            escape(r)
        );
        for (j, &v) in l.values[i].iter().enumerate() {
            let x = LEFT + CELL * j as f64;
            let (colour, dark) = fill(v);
            let _ = writeln!(
                s,
                r##"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="{colour}" stroke="#cccccc"/>"##
            );
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="middle" fill="{}">{v:.2}</text>"#,
                x + CELL / 2.0,
                y + CELL / 2.0 + 4.0,
                text_colour(dark)
            );
        }
    }
    let _ = writeln!(s, r#"<text x="{LEFT}" y="{}">{}</text>"#, h - 16.0, escape(&l.footer));
    s.push_str("</svg>\n");
    s
}

/// Heatmap of a patch grid: layers down, heads or positions across,
/// symmetric diverging scale.
pub fn grid_svg(grid: &PatchGrid, title: &str) -> String {
    let max_abs = grid.values.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let layout = Layout {
        title,
        row_labels: (0..grid.n_layers()).map(|l| format!("L{l}")).collect(),
        col_labels: grid.columns.clone(),
        values: &grid.values,
        footer: format!(
            "n={}  mean gap={:.3}  scale ±{:.3}",
            grid.n_examples, grid.mean_gap, max_abs
        ),
    };
    render(&layout, |v| (diverging(v, max_abs), max_abs > 0.0 && v.abs() / max_abs > 0.6))
}

/// Heatmap of Jaccard overlaps on a fixed 0–1 scale.
pub fn matrix_svg(m: &JaccardMatrix, title: &str) -> String {
    let layout = Layout {
        title,
        row_labels: m.row_labels.clone(),
        col_labels: m.col_labels.clone(),
        values: &m.values,
        footer: format!("baseline {:.3} ± {:.3}", m.baseline_mean, m.baseline_std),
    };
    render(&layout, |v| (sequential(v), v > 0.55))
}

pub fn emit_grid_heatmap(grid: &PatchGrid, title: &str, path: &Path) -> Result<()> {
    std::fs::write(path, grid_svg(grid, title)).map_err(|e| LabError::io(path, e))
}

pub fn emit_matrix_heatmap(m: &JaccardMatrix, title: &str, path: &Path) -> Result<()> {
    std::fs::write(path, matrix_svg(m, title)).map_err(|e| LabError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patcher::PatchMode;

    fn grid() -> PatchGrid {
        PatchGrid::new(
            PatchMode::TriggerHeads,
            vec!["0".into(), "1".into()],
            vec![vec![-1.0, 0.0], vec![0.5, 2.0]],
            4,
            1.5,
        )
    }

    #[test]
    fn diverging_scale_endpoints() {
        assert_eq!(diverging(0.0, 2.0), hex(WHITE));
        assert_eq!(diverging(2.0, 2.0), hex(RED));
        assert_eq!(diverging(-2.0, 2.0), hex(BLUE));
        assert_eq!(diverging(5.0, 0.0), hex(WHITE));
    }

    #[test]
    fn one_rect_and_label_per_cell() {
        let svg = grid_svg(&grid(), "trigger <fr>");
        assert_eq!(svg.matches("<rect").count(), 4);
        assert!(svg.contains(">2.00<"));
        assert!(svg.contains(">-1.00<"));
        assert!(svg.contains("trigger &lt;fr&gt;"));
        assert!(svg.ends_with("</svg>\n"));
    }

    #[test]
    fn rendering_is_deterministic() {
        assert_eq!(grid_svg(&grid(), "t"), grid_svg(&grid(), "t"));
    }

    #[test]
    fn matrix_colours_follow_value() {
        let m = JaccardMatrix {
            row_labels: vec!["a".into()],
            col_labels: vec!["a".into(), "b".into()],
            values: vec![vec![1.0, 0.0]],
            baseline_mean: 0.18,
            baseline_std: 0.1,
        };
        let svg = matrix_svg(&m, "j");
        assert!(svg.contains(&format!("fill=\"{}\"", sequential(1.0))));
        assert!(svg.contains(&format!("fill=\"{}\"", hex(WHITE))));
        assert!(svg.contains("baseline 0.180 ± 0.100"));
    }
}

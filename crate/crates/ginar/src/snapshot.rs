//! Spatial snapshot export: every variable's forecast against the truth at
//! one horizon, with plane coordinates when the dataset has them.
//!
//! The CSV is the ground truth of the export; the SVG is a two-panel
//! rendering (actual values left, predicted right) with one colored point
//! per variable on a shared color scale, masked variables drawn with a
//! heavier outline.

use std::io::Write;
use std::path::{Path, PathBuf};

/// One variable's state at the snapshot instant.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotRow {
    pub id: String,
    pub coord: Option<(f64, f64)>,
    /// Raw-unit observation at the last history step.
    pub input: f64,
    pub predicted: f64,
    pub actual: f64,
    pub masked: bool,
}

/// Files written by [`export_spatial_snapshot`]. `svg` is absent when any
/// variable lacks coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotFiles {
    pub csv: PathBuf,
    pub svg: Option<PathBuf>,
}

/// Render the rows as CSV. Floats use shortest-exact formatting, so a value
/// read back compares equal to the one exported.
pub fn snapshot_csv(rows: &[SnapshotRow]) -> String {
    let mut out = String::from("id,x,y,input,predicted,actual,masked\n");
    for r in rows {
        let (x, y) = match r.coord {
            Some((x, y)) => (x.to_string(), y.to_string()),
            None => (String::new(), String::new()),
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.id, x, y, r.input, r.predicted, r.actual, r.masked
        ));
    }
    out
}

/// Map a value to a blue-to-red ramp over `[lo, hi]`.
fn heat_color(v: f64, lo: f64, hi: f64) -> String {
    let t = if hi > lo {
        ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
    } else {
        0.5
    };
    let r = (40.0 + 215.0 * t).round() as u8;
    let b = (255.0 - 215.0 * t).round() as u8;
    let g = (80.0 + 60.0 * (1.0 - (2.0 * t - 1.0).abs())).round() as u8;
    format!("#{r:02x}{g:02x}{b:02x}")
}

/// Render the two-panel SVG, or `None` when a row has no coordinates.
pub fn snapshot_svg(rows: &[SnapshotRow]) -> Option<String> {
    if rows.is_empty() || rows.iter().any(|r| r.coord.is_none()) {
        return None;
    }
    let coords: Vec<(f64, f64)> = rows.iter().map(|r| r.coord.unwrap()).collect();
    let (mut x_lo, mut x_hi, mut y_lo, mut y_hi) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in &coords {
        x_lo = x_lo.min(x);
        x_hi = x_hi.max(x);
        y_lo = y_lo.min(y);
        y_hi = y_hi.max(y);
    }
    let values: Vec<f64> = rows
        .iter()
        .flat_map(|r| [r.actual, r.predicted])
        .collect();
    let v_lo = values.iter().cloned().fold(f64::MAX, f64::min);
    let v_hi = values.iter().cloned().fold(f64::MIN, f64::max);

    const PANEL: f64 = 380.0;
    const PAD: f64 = 30.0;
    let place = |c: f64, lo: f64, hi: f64| {
        if hi > lo {
            PAD + (c - lo) / (hi - lo) * (PANEL - 2.0 * PAD)
        } else {
            PANEL / 2.0
        }
    };
    let mut svg = String::from(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 800 420\" \
         font-family=\"sans-serif\" font-size=\"13\">\n",
    );
    svg.push_str("<rect width=\"800\" height=\"420\" fill=\"white\"/>\n");
    for (panel, (title, pick)) in [
        ("actual", (|r: &SnapshotRow| r.actual) as fn(&SnapshotRow) -> f64),
        ("predicted", |r: &SnapshotRow| r.predicted),
    ]
    .iter()
    .enumerate()
    {
        let off = 10.0 + panel as f64 * (PANEL + 20.0);
        svg.push_str(&format!(
            "<g transform=\"translate({off},30)\">\n<rect width=\"{PANEL}\" height=\"{PANEL}\" \
             fill=\"#f7f7f7\" stroke=\"#999\"/>\n<text x=\"{}\" y=\"-8\" \
             text-anchor=\"middle\">{}</text>\n",
            PANEL / 2.0,
            title
        ));
        for r in rows {
            let (cx, cy) = r.coord.unwrap();
            let x = place(cx, x_lo, x_hi);
            // SVG y grows downward; flip so the layout matches the plane.
            let y = PANEL - place(cy, y_lo, y_hi);
            let color = heat_color(pick(r), v_lo, v_hi);
            let stroke = if r.masked {
                "stroke=\"black\" stroke-width=\"2.5\""
            } else {
                "stroke=\"#666\" stroke-width=\"0.5\""
            };
            svg.push_str(&format!(
                "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"8\" fill=\"{color}\" {stroke}>\
                 <title>{}: actual {}, predicted {}</title></circle>\n",
                r.id, r.actual, r.predicted
            ));
        }
        svg.push_str("</g>\n");
    }
    svg.push_str(&format!(
        "<text x=\"400\" y=\"412\" text-anchor=\"middle\" fill=\"#444\">color: {v_lo:.3} (blue) \
         to {v_hi:.3} (red); bold outline marks masked variables</text>\n</svg>\n"
    ));
    Some(svg)
}

/// Write `snapshot.csv` (always) and `snapshot.svg` (when every variable
/// has coordinates) into `dir`.
pub fn export_spatial_snapshot(
    rows: &[SnapshotRow],
    dir: &Path,
) -> Result<SnapshotFiles, std::io::Error> {
    let csv_path = dir.join("snapshot.csv");
    let mut csv = std::fs::File::create(&csv_path)?;
    csv.write_all(snapshot_csv(rows).as_bytes())?;
    let svg_path = match snapshot_svg(rows) {
        Some(svg) => {
            let p = dir.join("snapshot.svg");
            std::fs::write(&p, svg)?;
            Some(p)
        }
        None => None,
    };
    Ok(SnapshotFiles {
        csv: csv_path,
        svg: svg_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(with_coords: bool) -> Vec<SnapshotRow> {
        (0..4)
            .map(|i| SnapshotRow {
                id: format!("v{i}"),
                coord: with_coords.then_some((0.1 * i as f64, 0.2 * i as f64)),
                input: 1.5 * i as f64,
                predicted: 0.123456789 + i as f64,
                actual: 0.5 - i as f64 / 3.0,
                masked: i == 2,
            })
            .collect()
    }

    #[test]
    fn csv_round_trips_every_value() {
        let rows = rows(true);
        let text = snapshot_csv(&rows);
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "id,x,y,input,predicted,actual,masked");
        for (line, row) in lines.zip(&rows) {
            let cells: Vec<&str> = line.split(',').collect();
            assert_eq!(cells[0], row.id);
            assert_eq!(cells[1].parse::<f64>().unwrap(), row.coord.unwrap().0);
            assert_eq!(cells[3].parse::<f64>().unwrap(), row.input);
            assert_eq!(cells[4].parse::<f64>().unwrap(), row.predicted);
            assert_eq!(cells[5].parse::<f64>().unwrap(), row.actual);
            assert_eq!(cells[6].parse::<bool>().unwrap(), row.masked);
        }
        assert_eq!(text.lines().count(), 5);
    }

    #[test]
    fn svg_needs_full_coordinates() {
        assert!(snapshot_svg(&rows(false)).is_none());
        let mut partial = rows(true);
        partial[1].coord = None;
        assert!(snapshot_svg(&partial).is_none());
        let svg = snapshot_svg(&rows(true)).unwrap();
        assert_eq!(svg.matches("<circle").count(), 8);
        assert_eq!(svg.matches("stroke-width=\"2.5\"").count(), 2);
    }

    #[test]
    fn export_writes_csv_and_optionally_svg() {
        let dir = tempfile::tempdir().unwrap();
        let files = export_spatial_snapshot(&rows(true), dir.path()).unwrap();
        assert!(files.csv.exists());
        assert!(files.svg.as_ref().unwrap().exists());

        let bare = tempfile::tempdir().unwrap();
        let files = export_spatial_snapshot(&rows(false), bare.path()).unwrap();
        assert!(files.csv.exists());
        assert!(files.svg.is_none());
        assert!(!bare.path().join("snapshot.svg").exists());
    }

    #[test]
    fn heat_colors_span_blue_to_red() {
        assert_eq!(heat_color(0.0, 0.0, 1.0), heat_color(-5.0, 0.0, 1.0));
        let cold = heat_color(0.0, 0.0, 1.0);
        let hot = heat_color(1.0, 0.0, 1.0);
        assert!(cold.starts_with("#28"));
        assert!(hot.ends_with("28"));
        assert_ne!(cold, hot);
        // Degenerate range falls back to the midpoint.
        assert_eq!(heat_color(3.0, 2.0, 2.0), heat_color(9.0, 2.0, 2.0));
    }
}

use std::path::{Path, PathBuf};

use dbd_core::error::{Error, Result};
use dbd_core::io::write_atomic;
use dbd_core::metrics::MetricReport;
use plotters::prelude::*;

use crate::PlotPrArgs;

/// Overrides the font search below.
const FONT_ENV: &str = "DBD_FONT";
const FONT_CANDIDATES: [&str; 3] = [
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/Library/Fonts/Arial Unicode.ttf",
];
const FAMILY: &str = "sans-serif";

/// Registers the first readable font; without one the plot has no text.
fn register_font() -> bool {
    let env = std::env::var_os(FONT_ENV).map(PathBuf::from);
    for path in env
        .iter()
        .map(PathBuf::as_path)
        .chain(FONT_CANDIDATES.iter().map(Path::new))
    {
        if let Ok(bytes) = std::fs::read(path) {
            let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
            if plotters::style::register_font(FAMILY, FontStyle::Normal, bytes).is_ok() {
                return true;
            }
        }
    }
    log::warn!("no usable font found (set {FONT_ENV}); plotting without labels");
    false
}

/// File stem, or the parent directory's name for the generic `report.json`.
fn label_of(path: &Path) -> String {
    let name = |p: Option<&Path>| {
        p.and_then(|p| p.file_stem())
            .and_then(|s| s.to_str())
            .map(str::to_string)
    };
    match name(Some(path)) {
        Some(stem) if stem == "report" => name(path.parent()).unwrap_or(stem),
        Some(stem) => stem,
        None => "report".into(),
    }
}

fn plot_error(out: &Path, e: impl std::fmt::Display) -> Error {
    Error::InvalidArgument(format!("plotting {}: {e}", out.display()))
}

pub fn plot_pr(a: PlotPrArgs) -> Result<()> {
    let mut curves = Vec::new();
    for path in &a.reports {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?;
        let report = MetricReport::from_json(&text)
            .map_err(|e| Error::InvalidArgument(format!("malformed report {}: {e}", path.display())))?;
        let mut label = label_of(path);
        if curves.iter().any(|(l, _)| *l == label) {
            label = format!("{label}_{}", curves.len());
        }
        curves.push((label, report));
    }
    let stem = a.out.with_extension("");
    for (label, report) in &curves {
        let csv = PathBuf::from(format!("{}.{label}.csv", stem.display()));
        write_atomic(&csv, report.curve_csv().as_bytes())?;
    }
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::InvalidArgument(format!("{}: {e}", dir.display())))?;
    }
    render(&a.out, &curves, register_font()).map_err(|e| plot_error(&a.out, e))?;
    println!("{}", a.out.display());
    Ok(())
}

fn render(
    out: &Path,
    curves: &[(String, MetricReport)],
    text: bool,
) -> std::result::Result<(), Box<dyn std::error::Error>> {
    let root = BitMapBackend::new(out, (720, 600)).into_drawing_area();
    root.fill(&WHITE)?;
    let mut builder = ChartBuilder::on(&root);
    builder.margin(20);
    if text {
        builder
            .caption("Precision-Recall", (FAMILY, 24))
            .x_label_area_size(40)
            .y_label_area_size(50);
    }
    let mut chart = builder.build_cartesian_2d(0.0f64..1.0, 0.0f64..1.0)?;
    let mut mesh = chart.configure_mesh();
    if text {
        mesh.x_desc("Recall").y_desc("Precision").label_style((FAMILY, 14));
    } else {
        mesh.disable_x_axis().disable_y_axis();
    }
    mesh.draw()?;
    for (i, (label, report)) in curves.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let points = report
            .recall_curve
            .iter()
            .copied()
            .zip(report.precision_curve.iter().copied());
        let series = chart.draw_series(LineSeries::new(points, color.stroke_width(2)))?;
        if text {
            series
                .label(label.as_str())
                .legend(move |(x, y)| PathElement::new([(x, y), (x + 20, y)], color.stroke_width(2)));
        }
    }
    if text {
        chart
            .configure_series_labels()
            .position(SeriesLabelPosition::LowerLeft)
            .label_font((FAMILY, 14))
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()?;
    }
    root.present()?;
    Ok(())
}

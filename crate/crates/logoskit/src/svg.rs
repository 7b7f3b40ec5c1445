//! SVG rendering of clustered OCR lines: one rectangle per line box on a
//! 1000×1000 viewport, stroke color cycling a fixed palette by cluster id.

use std::fs;
use std::path::Path;

use crate::corpus::OcrLine;
use crate::geometry::ClusterAssignment;
use crate::{Error, Result};

/// Stroke colors cycled by cluster id.
pub const PALETTE: [&str; 10] = [
    "#e6194b", "#3cb44b", "#4363d8", "#f58231", "#911eb4", "#46f0f0", "#f032e6", "#bcf60c",
    "#008080", "#9a6324",
];

const VIEW: f64 = 1000.0;

/// Render the clustered lines as an SVG document. Output bytes are a pure
/// function of the input.
pub fn cluster_svg(lines: &[OcrLine], assignment: &ClusterAssignment) -> Result<String> {
    if lines.len() != assignment.cluster_of_line.len() {
        return Err(Error::Contract(format!(
            "assignment covers {} lines, drawing {}",
            assignment.cluster_of_line.len(),
            lines.len()
        )));
    }
    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {VIEW} {VIEW}\" \
         width=\"{VIEW}\" height=\"{VIEW}\">\n"
    ));
    for (line, &cluster) in lines.iter().zip(&assignment.cluster_of_line) {
        let color = PALETTE[cluster % PALETTE.len()];
        let b = &line.bbox;
        out.push_str(&format!(
            "  <rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" \
             fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            b.x1 * VIEW,
            b.y1 * VIEW,
            b.width() * VIEW,
            b.height() * VIEW,
        ));
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Render and write to a file.
pub fn emit_cluster_svg(
    lines: &[OcrLine],
    assignment: &ClusterAssignment,
    out_path: &Path,
) -> Result<()> {
    let doc = cluster_svg(lines, assignment)?;
    fs::write(out_path, doc).map_err(|e| Error::io(out_path, e))
}

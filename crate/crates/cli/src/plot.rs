//! PNG figures.

use std::io::Write;

use fractrack_core::evaluation::PairwiseAnalysis;

const CELL: usize = 24;

/// Blue for negative, white at zero, red for positive, saturating at `±scale`.
fn diverging(v: f64, scale: f64) -> [u8; 3] {
    let t = if scale > 0.0 { (v / scale).clamp(-1.0, 1.0) } else { 0.0 };
    let fade = |t: f64| (255.0 * (1.0 - t.abs())).round() as u8;
    if t >= 0.0 {
        [255, fade(t), fade(t)]
    } else {
        [fade(t), fade(t), 255]
    }
}

/// RGB pixels of the first-fraction × second-fraction mean-logit matrix.
/// Rows are the first fraction, columns the second; cells without pairs are
/// gray.
pub fn heatmap_pixels(analysis: &PairwiseAnalysis) -> (usize, usize, Vec<u8>) {
    let n = analysis
        .groups
        .iter()
        .map(|g| g.first_fraction.max(g.second_fraction) as usize)
        .max()
        .unwrap_or(0);
    let scale = analysis.groups.iter().map(|g| g.mean.abs()).fold(0.0, f64::max);
    let mut cells = vec![[128u8; 3]; n * n];
    for g in &analysis.groups {
        let (r, c) = (g.first_fraction as usize - 1, g.second_fraction as usize - 1);
        cells[r * n + c] = diverging(g.mean, scale);
    }
    let side = n * CELL;
    let mut px = Vec::with_capacity(side * side * 3);
    for y in 0..side {
        for x in 0..side {
            px.extend_from_slice(&cells[(y / CELL) * n + x / CELL]);
        }
    }
    (side, side, px)
}

pub fn write_heatmap(analysis: &PairwiseAnalysis, w: impl Write) -> anyhow::Result<()> {
    let (width, height, px) = heatmap_pixels(analysis);
    let mut enc = png::Encoder::new(w, width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header()?;
    writer.write_image_data(&px)?;
    Ok(())
}

//! Static four-panel rasters of uncertainty maps.
//!
//! Field panels use a diverging map over a fixed symmetric range. Variance
//! panels are normalized to their own maximum, which is printed in the
//! panel title.

use std::io::Cursor;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::inference::UncertaintyMaps;

const GLYPH_W: usize = 5;
const GLYPH_H: usize = 7;
const TITLE_H: usize = GLYPH_H + 6;
const GAP: usize = 4;
const MIN_PANEL: usize = 144;
const BACKGROUND: [u8; 3] = [255, 255, 255];
const MISSING: [u8; 3] = [160, 160, 160];

fn glyph(c: char) -> [u8; GLYPH_H] {
    match c.to_ascii_uppercase() {
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        'A' => [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'G' => [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F],
        'I' => [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'L' => [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F],
        'M' => [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11],
        'O' => [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'S' => [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'X' => [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
        '.' => [0, 0, 0, 0, 0, 0x0C, 0x0C],
        '+' => [0, 0x04, 0x04, 0x1F, 0x04, 0x04, 0],
        '-' => [0, 0, 0, 0x1F, 0, 0, 0],
        '=' => [0, 0, 0x1F, 0, 0x1F, 0, 0],
        ':' => [0, 0x0C, 0x0C, 0, 0x0C, 0x0C, 0],
        '/' => [0x01, 0x01, 0x02, 0x04, 0x08, 0x10, 0x10],
        _ => [0; GLYPH_H],
    }
}

fn lerp(a: [u8; 3], b: [u8; 3], t: f64) -> [u8; 3] {
    let mix = |x: u8, y: u8| (x as f64 + (y as f64 - x as f64) * t).round() as u8;
    [mix(a[0], b[0]), mix(a[1], b[1]), mix(a[2], b[2])]
}

fn ramp(stops: &[[u8; 3]], t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0) * (stops.len() - 1) as f64;
    let i = (t.floor() as usize).min(stops.len() - 2);
    lerp(stops[i], stops[i + 1], t - i as f64)
}

/// Blue for negative, white at zero, red for positive; saturates at ±`range`.
pub fn diverging(value: f64, range: f64) -> [u8; 3] {
    if !value.is_finite() {
        return MISSING;
    }
    ramp(&[[33, 102, 172], [255, 255, 255], [178, 24, 43]], 0.5 + 0.5 * value / range)
}

/// Dark-to-bright ramp over `[0, 1]`.
pub fn sequential(t: f64) -> [u8; 3] {
    if !t.is_finite() {
        return MISSING;
    }
    ramp(
        &[[0, 0, 4], [87, 16, 110], [188, 55, 84], [249, 142, 9], [252, 255, 164]],
        t,
    )
}

#[derive(Clone, Debug, PartialEq)]
pub enum PanelScale {
    Diverging { range: f64 },
    /// Normalized to the panel's own maximum.
    Sequential,
}

#[derive(Clone, Debug)]
pub struct Panel<'a> {
    pub title: String,
    pub grid: Option<&'a Grid>,
    pub scale: PanelScale,
}

/// An RGB8 image.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Raster {
    fn new(width: usize, height: usize) -> Self {
        Raster {
            width,
            height,
            rgb: BACKGROUND.repeat(width * height),
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    fn put(&mut self, x: usize, y: usize, c: [u8; 3]) {
        if x < self.width && y < self.height {
            let i = 3 * (y * self.width + x);
            self.rgb[i..i + 3].copy_from_slice(&c);
        }
    }

    fn text(&mut self, x: usize, y: usize, s: &str) {
        for (k, ch) in s.chars().enumerate() {
            for (row, bits) in glyph(ch).iter().enumerate() {
                for col in 0..GLYPH_W {
                    if bits & (0x10 >> col) != 0 {
                        self.put(x + k * (GLYPH_W + 1) + col, y + row, [0, 0, 0]);
                    }
                }
            }
        }
    }

    /// PNG bytes; `text` entries become `tEXt` chunks.
    pub fn encode_png(&self, text: &[(&str, &str)]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        let png_err = |e: png::EncodingError| Error::invalid(format!("PNG encoding failed: {e}"));
        {
            let mut enc = png::Encoder::new(Cursor::new(&mut out), self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            for (k, v) in text {
                enc.add_text_chunk(k.to_string(), v.to_string()).map_err(png_err)?;
            }
            let mut writer = enc.write_header().map_err(png_err)?;
            writer.write_image_data(&self.rgb).map_err(png_err)?;
            writer.finish().map_err(png_err)?;
        }
        Ok(out)
    }
}

fn text_width(s: &str) -> usize {
    s.chars().count() * (GLYPH_W + 1)
}

fn panel_max(grid: &Grid) -> f64 {
    grid.as_slice().iter().copied().filter(|v| v.is_finite()).fold(0.0, f64::max)
}

/// Panel title with the normalizing maximum appended for sequential panels.
pub fn panel_title(panel: &Panel) -> String {
    match (&panel.scale, panel.grid) {
        (PanelScale::Sequential, Some(g)) => format!("{} MAX={:.2E}", panel.title, panel_max(g)),
        (_, None) => format!("{} N/A", panel.title),
        _ => panel.title.clone(),
    }
}

/// Lays panels out left to right; all present grids must share a shape.
pub fn render_panels(panels: &[Panel]) -> Result<Raster> {
    let shape = panels
        .iter()
        .find_map(|p| p.grid.map(Grid::shape))
        .ok_or_else(|| Error::invalid("nothing to plot"))?;
    if panels.iter().any(|p| p.grid.is_some_and(|g| g.shape() != shape)) {
        return Err(Error::invalid("panels must share one shape"));
    }
    let (h, w) = shape;
    let zoom = (MIN_PANEL / h.max(w)).max(1);
    let titles: Vec<String> = panels.iter().map(panel_title).collect();
    let panel_w = (w * zoom).max(titles.iter().map(|t| text_width(t) + 4).max().unwrap_or(0));
    let width = panels.len() * panel_w + (panels.len() + 1) * GAP;
    let height = TITLE_H + h * zoom + GAP;
    let mut img = Raster::new(width, height);
    for (i, (panel, title)) in panels.iter().zip(&titles).enumerate() {
        let x0 = GAP + i * (panel_w + GAP);
        img.text(x0 + 2, 3, title);
        let left = x0 + (panel_w - w * zoom) / 2;
        let peak = panel.grid.map_or(0.0, panel_max);
        for r in 0..h {
            for c in 0..w {
                let colour = match (panel.grid, &panel.scale) {
                    (None, _) => MISSING,
                    (Some(g), PanelScale::Diverging { range }) => diverging(g[(r, c)], *range),
                    (Some(g), PanelScale::Sequential) => {
                        sequential(if peak > 0.0 { g[(r, c)] / peak } else { 0.0 })
                    }
                };
                for dy in 0..zoom {
                    for dx in 0..zoom {
                        img.put(left + c * zoom + dx, TITLE_H + r * zoom + dy, colour);
                    }
                }
            }
        }
    }
    Ok(img)
}

/// Target (if known), predictive mean, epistemic and aleatoric maps.
pub fn uncertainty_figure(target: Option<&Grid>, maps: &UncertaintyMaps, field_range: f64) -> Result<Raster> {
    if !(field_range > 0.0) {
        return Err(Error::invalid("plot range must be positive"));
    }
    let label = format!("+/-{field_range}");
    render_panels(&[
        Panel {
            title: format!("TARGET {label}"),
            grid: target,
            scale: PanelScale::Diverging { range: field_range },
        },
        Panel {
            title: format!("MEAN {label}"),
            grid: Some(&maps.predictive_mean),
            scale: PanelScale::Diverging { range: field_range },
        },
        Panel {
            title: "EPISTEMIC".into(),
            grid: Some(&maps.epistemic),
            scale: PanelScale::Sequential,
        },
        Panel {
            title: "ALEATORIC".into(),
            grid: Some(&maps.aleatoric),
            scale: PanelScale::Sequential,
        },
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colour_maps_hit_their_anchors() {
        assert_eq!(diverging(0.0, 1500.0), [255, 255, 255]);
        assert_eq!(diverging(1500.0, 1500.0), [178, 24, 43]);
        assert_eq!(diverging(-9000.0, 1500.0), [33, 102, 172]);
        assert_eq!(sequential(0.0), [0, 0, 4]);
        assert_eq!(sequential(1.0), [252, 255, 164]);
        assert_eq!(diverging(f64::NAN, 1.0), MISSING);
    }

    fn maps(n: usize) -> UncertaintyMaps {
        let g = Grid::from_fn(n, n, |r, c| (r as f64 - c as f64) * 100.0);
        UncertaintyMaps {
            predictive_mean: g.clone(),
            epistemic: Grid::zeros(n, n),
            aleatoric: g.map(|v| v * v),
            total: g.map(|v| v * v),
            samples: 1,
        }
    }

    #[test]
    fn figure_layout_and_png() {
        let m = maps(16);
        let img = uncertainty_figure(None, &m, 1500.0).unwrap();
        assert_eq!(img.rgb.len(), img.width * img.height * 3);
        // 16 px maps are zoomed to at least the minimum panel size.
        assert!(img.height >= TITLE_H + MIN_PANEL);
        let png = img.encode_png(&[("config", "{}")]).unwrap();
        assert_eq!(&png[1..4], b"PNG");
        let decoder = png::Decoder::new(Cursor::new(png));
        let reader = decoder.read_info().unwrap();
        assert_eq!(reader.info().width as usize, img.width);
        assert_eq!(reader.info().uncompressed_latin1_text[0].text, "{}");
    }

    #[test]
    fn all_zero_variance_panel_renders_dark() {
        let m = maps(8);
        let p = Panel {
            title: "EPISTEMIC".into(),
            grid: Some(&m.epistemic),
            scale: PanelScale::Sequential,
        };
        assert_eq!(panel_title(&p), "EPISTEMIC MAX=0.00E0");
        let img = render_panels(&[p]).unwrap();
        assert_eq!(img.pixel(img.width / 2, img.height / 2), sequential(0.0));
    }

    #[test]
    fn mismatched_panels_are_rejected() {
        let a = Grid::zeros(4, 4);
        let b = Grid::zeros(5, 5);
        let panel = |g| Panel {
            title: String::new(),
            grid: Some(g),
            scale: PanelScale::Sequential,
        };
        assert!(render_panels(&[panel(&a), panel(&b)]).is_err());
        assert!(render_panels(&[]).is_err());
    }
}

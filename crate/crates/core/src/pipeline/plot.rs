use crate::metrics::CurvePoint;

pub const SERIES_COLORS: [[u8; 3]; 4] = [[200, 40, 40], [40, 70, 200], [30, 150, 60], [160, 60, 160]];

struct Canvas {
    width: usize,
    height: usize,
    rgb: Vec<u8>,
}

impl Canvas {
    fn new(width: usize, height: usize) -> Self {
        Canvas {
            width,
            height,
            rgb: vec![255; width * height * 3],
        }
    }

    fn set(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            let i = (y as usize * self.width + x as usize) * 3;
            self.rgb[i..i + 3].copy_from_slice(&c);
        }
    }

    fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: [u8; 3]) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.set(x, y, c);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }
}

/// Renders mIoU-vs-fraction curves as an RGB raster: axes in black, light
/// grid lines every 0.1 in both directions, one colored polyline with
/// square markers per series (colors from [`SERIES_COLORS`]). The y axis
/// spans from just below the lowest value to 1.
pub fn render_curves(series: &[&[CurvePoint]]) -> (usize, usize, Vec<u8>) {
    let (w, h, margin) = (320usize, 240usize, 24i64);
    let mut canvas = Canvas::new(w, h);
    let lowest = series
        .iter()
        .flat_map(|s| s.iter().filter_map(|p| p.miou))
        .fold(1.0f64, f64::min);
    let y_min = ((lowest - 0.05) * 10.0).floor().max(0.0) / 10.0;
    let (left, right, top, bottom) = (margin, w as i64 - margin / 2, margin / 2, h as i64 - margin);
    let px = |f: f64| left + ((right - left) as f64 * f).round() as i64;
    let py = |v: f64| bottom - ((bottom - top) as f64 * ((v - y_min) / (1.0 - y_min).max(1e-9))).round() as i64;

    let grid = [225, 225, 225];
    for k in 0..=10 {
        let f = k as f64 / 10.0;
        canvas.line((px(f), top), (px(f), bottom), grid);
        if f >= y_min - 1e-9 {
            canvas.line((left, py(f)), (right, py(f)), grid);
        }
    }
    canvas.line((left, bottom), (right, bottom), [0, 0, 0]);
    canvas.line((left, top), (left, bottom), [0, 0, 0]);

    for (s, color) in series.iter().zip(SERIES_COLORS.iter().cycle()) {
        let pts: Vec<(i64, i64)> = s
            .iter()
            .filter_map(|p| p.miou.map(|v| (px(p.fraction), py(v))))
            .collect();
        for pair in pts.windows(2) {
            canvas.line(pair[0], pair[1], *color);
        }
        for &(x, y) in &pts {
            for dy in -2..=2 {
                for dx in -2..=2 {
                    canvas.set(x + dx, y + dy, *color);
                }
            }
        }
    }
    (w, h, canvas.rgb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curve_pixels_use_series_colors() {
        let s: Vec<CurvePoint> = (0..10)
            .map(|k| CurvePoint {
                fraction: k as f64 / 10.0,
                miou: Some(0.5 + k as f64 * 0.05),
            })
            .collect();
        let (w, h, rgb) = render_curves(&[&s]);
        assert_eq!(rgb.len(), w * h * 3);
        assert!(rgb.chunks(3).any(|c| c == SERIES_COLORS[0]));
        assert!(!rgb.chunks(3).any(|c| c == SERIES_COLORS[1]));
    }
}

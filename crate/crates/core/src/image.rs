//! Minimal RGB image buffer: f32 channels in [0, 1], row-major,
//! channel-interleaved, with binary PPM output for renders.

/// An RGB raster. `data[(y·W + x)·3 + c]` holds channel `c` of pixel (x, y).
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: u32, height: u32, data: Vec<f32>) -> Self {
        assert_eq!(
            data.len(),
            (width as usize) * (height as usize) * 3,
            "image buffer length mismatch"
        );
        Image {
            width,
            height,
            data,
        }
    }

    pub fn filled(width: u32, height: u32, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity((width as usize) * (height as usize) * 3);
        for _ in 0..(width as usize) * (height as usize) {
            data.extend_from_slice(&rgb);
        }
        Image {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn idx(&self, x: u32, y: u32) -> usize {
        ((y * self.width + x) as usize) * 3
    }

    pub fn get(&self, x: u32, y: u32) -> [f32; 3] {
        let i = self.idx(x, y);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: u32, y: u32, rgb: [f32; 3]) {
        let i = self.idx(x, y);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Draw a line segment between subpixel endpoints, silently clipping
    /// anything outside the raster.
    pub fn draw_line(&mut self, from: (f64, f64), to: (f64, f64), rgb: [f32; 3]) {
        let (x0, y0) = from;
        let (x1, y1) = to;
        if !(x0.is_finite() && y0.is_finite() && x1.is_finite() && y1.is_finite()) {
            return;
        }
        let steps = (x1 - x0).abs().max((y1 - y0).abs()).ceil().max(1.0);
        let n = steps.min(1e6) as usize;
        for s in 0..=n {
            let t = s as f64 / n as f64;
            let x = (x0 + (x1 - x0) * t).round();
            let y = (y0 + (y1 - y0) * t).round();
            if x >= 0.0 && y >= 0.0 && x < self.width as f64 && y < self.height as f64 {
                self.set(x as u32, y as u32, rgb);
            }
        }
    }

    /// Binary PPM (P6, maxval 255).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(
            self.data
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_header_and_payload() {
        let mut img = Image::filled(3, 2, [0.0, 0.5, 1.0]);
        img.set(2, 1, [1.0, 0.0, 0.0]);
        let ppm = img.to_ppm();
        assert!(ppm.starts_with(b"P6\n3 2\n255\n"));
        assert_eq!(ppm.len(), 11 + 3 * 2 * 3);
        // Last pixel is the red one we set.
        assert_eq!(&ppm[ppm.len() - 3..], &[255, 0, 0]);
        // 0.5 rounds to 128.
        assert_eq!(ppm[11 + 1], 128);
    }

    #[test]
    fn draw_line_clips_outside() {
        let mut img = Image::filled(4, 4, [0.0; 3]);
        img.draw_line((-10.0, 1.0), (10.0, 1.0), [1.0, 1.0, 1.0]);
        for x in 0..4 {
            assert_eq!(img.get(x, 1), [1.0, 1.0, 1.0]);
            assert_eq!(img.get(x, 0), [0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn draw_line_degenerate_point() {
        let mut img = Image::filled(4, 4, [0.0; 3]);
        img.draw_line((2.0, 2.0), (2.0, 2.0), [0.0, 1.0, 0.0]);
        assert_eq!(img.get(2, 2), [0.0, 1.0, 0.0]);
    }
}

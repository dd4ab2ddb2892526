//! Tiny deterministic rasterizer.
//!
//! Shapes are given in world coordinates and filled wherever a pixel centre
//! falls inside them. There is no anti-aliasing, so a state always maps to the
//! same bytes.

pub const WIDTH: usize = 100;
pub const HEIGHT: usize = 100;
/// Bytes in one `3 × HEIGHT × WIDTH` channel-major frame.
pub const FRAME_LEN: usize = 3 * WIDTH * HEIGHT;

pub type Rgb = [u8; 3];

/// World-to-pixel mapping: `view_center` lands on pixel coordinate (50, 50)
/// and one meter spans `pixels_per_meter` pixels. World y points up.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Viewport {
    pub view_center: [f64; 2],
    pub pixels_per_meter: f64,
}

impl Viewport {
    /// Continuous pixel coordinates `(col, row)` of a world point.
    pub fn to_pixel(&self, p: [f64; 2]) -> (f64, f64) {
        let col = (p[0] - self.view_center[0]) * self.pixels_per_meter + WIDTH as f64 / 2.0;
        let row = HEIGHT as f64 / 2.0 - (p[1] - self.view_center[1]) * self.pixels_per_meter;
        (col, row)
    }
}

/// A channel-major RGB image being drawn into.
#[derive(Clone, Debug, PartialEq)]
pub struct Canvas {
    data: Vec<u8>,
    view: Viewport,
}

impl Canvas {
    pub fn new(view: Viewport, background: Rgb) -> Self {
        let mut data = vec![0u8; FRAME_LEN];
        for (c, plane) in data.chunks_exact_mut(WIDTH * HEIGHT).enumerate() {
            plane.fill(background[c]);
        }
        Self { data, view }
    }

    pub fn into_frame(self) -> Vec<u8> {
        self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> Rgb {
        let i = row * WIDTH + col;
        [self.data[i], self.data[WIDTH * HEIGHT + i], self.data[2 * WIDTH * HEIGHT + i]]
    }

    fn put(&mut self, row: usize, col: usize, color: Rgb) {
        let i = row * WIDTH + col;
        self.data[i] = color[0];
        self.data[WIDTH * HEIGHT + i] = color[1];
        self.data[2 * WIDTH * HEIGHT + i] = color[2];
    }

    /// Visits pixels whose centres lie in the pixel-space box and passes the
    /// centre to `inside`.
    fn scan(&mut self, lo: (f64, f64), hi: (f64, f64), color: Rgb, inside: impl Fn(f64, f64) -> bool) {
        let c0 = lo.0.floor().max(0.0) as usize;
        let r0 = lo.1.floor().max(0.0) as usize;
        let c1 = (hi.0.ceil().min(WIDTH as f64)).max(0.0) as usize;
        let r1 = (hi.1.ceil().min(HEIGHT as f64)).max(0.0) as usize;
        for row in r0..r1 {
            for col in c0..c1 {
                let (x, y) = (col as f64 + 0.5, row as f64 + 0.5);
                if inside(x, y) {
                    self.put(row, col, color);
                }
            }
        }
    }

    /// Axis-aligned rectangle spanning two world corners.
    pub fn rect(&mut self, a: [f64; 2], b: [f64; 2], color: Rgb) {
        let (ca, ra) = self.view.to_pixel(a);
        let (cb, rb) = self.view.to_pixel(b);
        let (x0, x1) = (ca.min(cb), ca.max(cb));
        let (y0, y1) = (ra.min(rb), ra.max(rb));
        self.scan((x0, y0), (x1, y1), color, |x, y| x >= x0 && x <= x1 && y >= y0 && y <= y1);
    }

    pub fn circle(&mut self, center: [f64; 2], radius: f64, color: Rgb) {
        let (cx, cy) = self.view.to_pixel(center);
        let r = radius * self.view.pixels_per_meter;
        self.scan((cx - r, cy - r), (cx + r, cy + r), color, |x, y| {
            (x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r
        });
    }

    /// Capsule of the given world-space half-width around the segment.
    pub fn segment(&mut self, a: [f64; 2], b: [f64; 2], half_width: f64, color: Rgb) {
        let (ax, ay) = self.view.to_pixel(a);
        let (bx, by) = self.view.to_pixel(b);
        let hw = half_width * self.view.pixels_per_meter;
        let (dx, dy) = (bx - ax, by - ay);
        let len2 = dx * dx + dy * dy;
        let lo = (ax.min(bx) - hw, ay.min(by) - hw);
        let hi = (ax.max(bx) + hw, ay.max(by) + hw);
        self.scan(lo, hi, color, |x, y| {
            let t = if len2 > 0.0 { (((x - ax) * dx + (y - ay) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
            let (px, py) = (ax + t * dx - x, ay + t * dy - y);
            px * px + py * py <= hw * hw
        });
    }
}

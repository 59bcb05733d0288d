//! Annotated renders: one box outline per detected object, colored by its
//! feature vector.

use listcycle::image::ImageTensor;

/// Box color from the first three η components (missing ones read as 0.5),
/// mapped from `[0, 1]` to `[-1, 1]`.
pub fn eta_color(eta: &[f64]) -> [f32; 3] {
    let c = |i: usize| (2.0 * eta.get(i).copied().unwrap_or(0.5).clamp(0.0, 1.0) - 1.0) as f32;
    [c(0), c(1), c(2)]
}

/// Draws a one-pixel outline of side `side` centred at `(x, y)` (pixels).
pub fn draw_box(image: &mut ImageTensor, x: f64, y: f64, side: usize, color: [f32; 3]) {
    let half = side as f64 / 2.0;
    let x0 = (x - half).round() as i64;
    let y0 = (y - half).round() as i64;
    let x1 = x0 + side as i64 - 1;
    let y1 = y0 + side as i64 - 1;
    let mut put = |px: i64, py: i64| {
        if px >= 0 && py >= 0 && (px as usize) < image.width && (py as usize) < image.height {
            for (c, &v) in color.iter().enumerate().take(image.channels) {
                image.set(py as usize, px as usize, c, v);
            }
        }
    };
    for px in x0..=x1 {
        put(px, y0);
        put(px, y1);
    }
    for py in y0..=y1 {
        put(x0, py);
        put(x1, py);
    }
}

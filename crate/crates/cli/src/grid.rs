use image::{Rgb, RgbImage};
use ndarray::Array3;

/// Places `panels` (all `[3, S, S]` in `[0, 1]`) side by side.
pub fn side_by_side(panels: &[Array3<f64>]) -> RgbImage {
    let (h, w) = (panels[0].dim().1, panels[0].dim().2);
    let mut img = RgbImage::new((w * panels.len()) as u32, h as u32);
    for (p, panel) in panels.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                let px: [u8; 3] = std::array::from_fn(|c| (panel[[c, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8);
                img.put_pixel((p * w + x) as u32, y as u32, Rgb(px));
            }
        }
    }
    img
}

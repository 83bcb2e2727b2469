use image::{Rgb, RgbImage};
use srpn_core::{BBox, Tensor};

/// Upscaling factor of overlay images.
pub const SCALE: u32 = 4;
pub const PREDICTION: Rgb<u8> = Rgb([255, 230, 0]);
pub const GROUND_TRUTH: Rgb<u8> = Rgb([0, 200, 0]);

/// Upscaled copy of `image` with ground truth in green and predictions in yellow.
pub fn render(image: &Tensor<f64>, predictions: &[BBox<f64>], ground_truth: &[BBox<f64>]) -> RgbImage {
    let s = image.shape();
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let d = image.data();
    let mut out = RgbImage::from_fn(w as u32 * SCALE, h as u32 * SCALE, |x, y| {
        let i = (y / SCALE) as usize * w + (x / SCALE) as usize;
        Rgb(std::array::from_fn(|c| (d[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8))
    });
    for b in ground_truth {
        outline(&mut out, b, GROUND_TRUTH);
    }
    for b in predictions {
        outline(&mut out, b, PREDICTION);
    }
    out
}

fn outline(img: &mut RgbImage, b: &BBox<f64>, color: Rgb<u8>) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let sc = SCALE as f64;
    let x0 = (b.x * sc).round() as i64;
    let y0 = (b.y * sc).round() as i64;
    let x1 = ((b.x + b.w) * sc).round() as i64 - 1;
    let y1 = ((b.y + b.h) * sc).round() as i64 - 1;
    let mut put = |x: i64, y: i64| {
        if (0..w).contains(&x) && (0..h).contains(&y) {
            img.put_pixel(x as u32, y as u32, color);
        }
    };
    for x in x0..=x1 {
        put(x, y0);
        put(x, y1);
    }
    for y in y0..=y1 {
        put(x0, y);
        put(x1, y);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boxes_are_drawn_in_their_colors() {
        let img = Tensor::zeros(vec![3, 8, 8]);
        let out = render(&img, &[BBox::new(1.0, 1.0, 2.0, 2.0)], &[BBox::new(4.0, 4.0, 3.0, 3.0)]);
        assert_eq!(out.dimensions(), (32, 32));
        assert_eq!(*out.get_pixel(4, 4), PREDICTION);
        assert_eq!(*out.get_pixel(16, 16), GROUND_TRUTH);
        assert_eq!(*out.get_pixel(0, 0), Rgb([0, 0, 0]));
        assert_eq!(*out.get_pixel(6, 6), Rgb([0, 0, 0]));
    }
}

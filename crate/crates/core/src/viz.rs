//! Event and detection images: positive events white, negative black, no events gray.

use crate::events::{EventTensor, Polarity};
use crate::geometry::BBox;
use crate::pgm::GrayImage;

fn signed_image(width: usize, height: usize, net: impl Fn(usize) -> i64) -> GrayImage {
    let pixels = (0..width * height)
        .map(|i| match net(i).signum() {
            1 => 1.0,
            -1 => 0.0,
            _ => 0.5,
        })
        .collect();
    GrayImage { width, height, pixels }
}

/// One image per time bin, colored by the sign of `N+ - N-`.
pub fn event_bin_images(tensor: &EventTensor) -> Vec<GrayImage> {
    let (h, w) = (tensor.height(), tensor.width());
    (0..tensor.bins())
        .map(|b| {
            signed_image(w, h, |i| {
                let (y, x) = (i / w, i % w);
                tensor.get(Polarity::Positive, b, y, x) as i64 - tensor.get(Polarity::Negative, b, y, x) as i64
            })
        })
        .collect()
}

/// All bins collapsed into one image.
pub fn event_image(tensor: &EventTensor) -> GrayImage {
    let (h, w) = (tensor.height(), tensor.width());
    let n = h * w;
    let pos = tensor.plane(Polarity::Positive);
    let neg = tensor.plane(Polarity::Negative);
    signed_image(w, h, |i| {
        (0..tensor.bins()).map(|b| pos[b * n + i] as i64 - neg[b * n + i] as i64).sum()
    })
}

/// Draws one-pixel box outlines in place.
pub fn draw_boxes(img: &mut GrayImage, boxes: &[BBox], value: f64) {
    let (w, h) = (img.width as i64, img.height as i64);
    let mut put = |x: i64, y: i64| {
        if (0..w).contains(&x) && (0..h).contains(&y) {
            img.pixels[(y * w + x) as usize] = value;
        }
    };
    for b in boxes {
        let (x0, y0) = (b.x_min.floor() as i64, b.y_min.floor() as i64);
        let (x1, y1) = ((b.x_max.ceil() as i64 - 1).max(x0), (b.y_max.ceil() as i64 - 1).max(y0));
        for x in x0..=x1 {
            put(x, y0);
            put(x, y1);
        }
        for y in y0..=y1 {
            put(x0, y);
            put(x1, y);
        }
    }
}

use serde::{Deserialize, Serialize};

use crate::corpus::PixelGrid;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-channel normalization constants. The default is the ImageNet
/// mean/std published with the Swin backbone.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    /// `[3, side, side]`
    pub data: Tensor<f32>,
    pub normalization: Normalization,
}

impl ImageTensor {
    pub fn side(&self) -> usize {
        self.data.dim(1)
    }
}

/// Required divisor of the encoder input side: patch 4 × window 7.
pub const SIDE_MULTIPLE: usize = 28;

/// Square bilinear resize (half-pixel centers, no antialiasing), gray promoted
/// to RGB, scaled to [0, 1] and normalized per channel.
pub fn preprocess_image(image: &PixelGrid, side: usize, norm: &Normalization) -> Result<ImageTensor> {
    if image.height == 0 || image.width == 0 {
        return Err(Error::Data("cannot preprocess a zero-area image".into()));
    }
    if side == 0 || side % SIDE_MULTIPLE != 0 {
        return Err(Error::Config(format!("image side {side} must be a positive multiple of {SIDE_MULTIPLE}")));
    }
    let (h, w) = (image.height, image.width);
    let sy = h as f64 / side as f64;
    let sx = w as f64 / side as f64;
    let taps = |scale: f64, len: usize, out: usize| -> (usize, usize, f64) {
        let src = ((out as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(len - 1);
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, src - i0 as f64)
    };
    let ytaps: Vec<_> = (0..side).map(|y| taps(sy, h, y)).collect();
    let xtaps: Vec<_> = (0..side).map(|x| taps(sx, w, x)).collect();

    let mut data = vec![0f32; 3 * side * side];
    for c in 0..3 {
        let src_c = if image.channels == 1 { 0 } else { c };
        for (y, &(y0, y1, fy)) in ytaps.iter().enumerate() {
            for (x, &(x0, x1, fx)) in xtaps.iter().enumerate() {
                let p = |yy: usize, xx: usize| image.get(yy, xx, src_c) as f64;
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                let v = (top * (1.0 - fy) + bottom * fy) / 255.0;
                data[(c * side + y) * side + x] = ((v as f32) - norm.mean[c]) / norm.std[c];
            }
        }
    }
    Ok(ImageTensor {
        data: Tensor::from_vec(&[3, side, side], data)?,
        normalization: *norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn same_size_is_identity_resize() {
        let mut grid = PixelGrid::filled(224, 224, 3, 0);
        for (i, v) in grid.data.iter_mut().enumerate() {
            *v = (i * 31 % 256) as u8;
        }
        let norm = Normalization::default();
        let t = preprocess_image(&grid, 224, &norm).unwrap();
        assert_eq!(t.data.shape(), &[3, 224, 224]);
        for c in 0..3 {
            for (y, x) in [(0, 0), (17, 200), (223, 223)] {
                let expect = (grid.get(y, x, c) as f32 / 255.0 - norm.mean[c]) / norm.std[c];
                assert!((t.data.data()[(c * 224 + y) * 224 + x] - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn wide_input_resizes_to_square() {
        let grid = PixelGrid::filled(100, 400, 1, 90);
        let t = preprocess_image(&grid, 224, &Normalization::default()).unwrap();
        assert_eq!(t.data.shape(), &[3, 224, 224]);
        assert!(t.data.is_finite());
    }

    #[test]
    fn constant_gray_maps_to_closed_form() {
        let norm = Normalization::default();
        for v in [0u8, 127, 128, 255] {
            let t = preprocess_image(&PixelGrid::filled(33, 57, 1, v), 56, &norm).unwrap();
            for c in 0..3 {
                let expect = (v as f32 / 255.0 - norm.mean[c]) / norm.std[c];
                let plane = &t.data.data()[c * 56 * 56..(c + 1) * 56 * 56];
                assert!(plane.iter().all(|&x| (x - expect).abs() < 1e-5), "value {v} channel {c}");
            }
        }
    }

    #[test]
    fn rejects_zero_area_and_bad_side() {
        let empty = PixelGrid::new(0, 5, 1, vec![]).unwrap();
        assert!(preprocess_image(&empty, 56, &Normalization::default()).is_err());
        assert!(preprocess_image(&PixelGrid::filled(4, 4, 1, 0), 50, &Normalization::default()).is_err());
    }

    proptest! {
        #[test]
        fn finite_for_arbitrary_inputs(h in 1usize..60, w in 1usize..60, rgb in any::<bool>(), seed in any::<u8>()) {
            let ch = if rgb { 3 } else { 1 };
            let data: Vec<u8> = (0..h * w * ch).map(|i| (i as u8).wrapping_mul(seed).wrapping_add(7)).collect();
            let grid = PixelGrid::new(h, w, ch, data).unwrap();
            let t = preprocess_image(&grid, 28, &Normalization::default()).unwrap();
            prop_assert!(t.data.is_finite());
        }
    }
}

//! Conversions between HWC ndarray fields and NCHW tensors.

use ndarray::{Array2, Array3};

use crate::nn::Tensor;

/// Flattens an H×W×C array into CHW order.
pub fn chw_from_hwc(a: &Array3<f32>) -> Vec<f32> {
    let (h, w, c) = a.dim();
    let mut out = vec![0.0f32; h * w * c];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(ch * h + y) * w + x] = a[[y, x, ch]];
            }
        }
    }
    out
}

/// Rebuilds an H×W×C array from a CHW slice.
pub fn hwc_from_chw(data: &[f32], h: usize, w: usize, c: usize) -> Array3<f32> {
    assert_eq!(data.len(), h * w * c);
    Array3::from_shape_fn((h, w, c), |(y, x, ch)| data[(ch * h + y) * w + x])
}

/// Flattens an H×W array row-major.
pub fn plane_from_hw(a: &Array2<f32>) -> Vec<f32> {
    a.iter().copied().collect()
}

/// Rebuilds an H×W array from a row-major slice.
pub fn hw_from_plane(data: &[f32], h: usize, w: usize) -> Array2<f32> {
    Array2::from_shape_vec((h, w), data.to_vec()).expect("plane length")
}

/// Packs one H×W×3 field as a single-sample tensor.
pub fn tensor_from_hwc(a: &Array3<f32>) -> Tensor {
    let (h, w, c) = a.dim();
    Tensor::from_vec(1, c, h, w, chw_from_hwc(a))
}

/// Packs one H×W field as a single-sample single-channel tensor.
pub fn tensor_from_hw(a: &Array2<f32>) -> Tensor {
    let (h, w) = a.dim();
    Tensor::from_vec(1, 1, h, w, plane_from_hw(a))
}

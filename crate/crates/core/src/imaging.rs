//! Bilinear resampling of `[C, H, W]` images.

use crate::keypoints::Affine;
use crate::tensor::Tensor;

/// Samples `plane` (row-major `h x w`) at a real-valued position; outside
/// the image contributes zero.
pub fn bilinear(plane: &[f32], h: usize, w: usize, x: f64, y: f64) -> f32 {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let at = |xi: f64, yi: f64| -> f64 {
        if xi < 0.0 || yi < 0.0 || xi >= w as f64 || yi >= h as f64 {
            0.0
        } else {
            f64::from(plane[yi as usize * w + xi as usize])
        }
    };
    let v = at(x0, y0) * (1.0 - fx) * (1.0 - fy)
        + at(x0 + 1.0, y0) * fx * (1.0 - fy)
        + at(x0, y0 + 1.0) * (1.0 - fx) * fy
        + at(x0 + 1.0, y0 + 1.0) * fx * fy;
    v as f32
}

/// Resamples onto an `out x out` grid; `source_of` maps each output pixel
/// centre to the source position it reads.
pub fn warp(image: &Tensor<f32>, out: usize, source_of: impl Fn(f64, f64) -> (f64, f64)) -> Tensor<f32> {
    let &[c, h, w] = image.shape() else {
        panic!("warp expects [C, H, W], got {:?}", image.shape());
    };
    let plane = h * w;
    let mut data = vec![0f32; c * out * out];
    for y in 0..out {
        for x in 0..out {
            let (sx, sy) = source_of(x as f64, y as f64);
            for ch in 0..c {
                data[ch * out * out + y * out + x] =
                    bilinear(&image.data()[ch * plane..(ch + 1) * plane], h, w, sx, sy);
            }
        }
    }
    Tensor::new(vec![c, out, out], data).expect("warp output shape")
}

pub fn warp_affine(image: &Tensor<f32>, affine: &Affine) -> Tensor<f32> {
    if affine.scale == 1.0 && affine.rotation_degrees == 0.0 && affine.input_resolution == affine.output_resolution {
        return image.clone();
    }
    warp(image, affine.output_resolution, |x, y| affine.invert(x, y))
}

/// Rounds every value to the nearest multiple of 1/255 in `[0, 1]`, the
/// precision of the on-disk format.
pub fn quantize(image: &mut Tensor<f32>) {
    for v in image.data_mut() {
        *v = f32::from(to_u8(*v)) / 255.0;
    }
}

pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

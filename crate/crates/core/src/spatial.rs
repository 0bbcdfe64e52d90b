//! Index maps for the spatial primitives. Each builder returns a [`GatherMap`] or
//! [`PoolMap`] that the autodiff tape applies per sample.

use std::rc::Rc;

use crate::autodiff::{GatherMap, PoolMap};
use crate::groups::{rotation_source, PaddingMode};

/// Number of taps in a 3x3 kernel.
pub const TAPS: usize = 9;

/// Offsets `(di, dj)` of the 3x3 taps in row-major order; tap `k` reads input pixel
/// `(r + di, c + dj)` for output pixel `(r, c)`.
pub fn tap_offset(k: usize) -> (i64, i64) {
    ((k / 3) as i64 - 1, (k % 3) as i64 - 1)
}

/// Input pixel read by tap `k` at output `(r, c)`, or `None` for a zero read.
pub fn tap_source(r: usize, c: usize, k: usize, h: usize, w: usize, padding: PaddingMode) -> Option<usize> {
    let (di, dj) = tap_offset(k);
    let sr = padding.resolve(r as i64 + di, h)?;
    let sc = padding.resolve(c as i64 + dj, w)?;
    Some(sr * w + sc)
}

/// im2col for `[C, H, W]` samples: output `[C * 9, H * W]`, row `c * 9 + k`.
pub fn im2col(channels: usize, h: usize, w: usize, padding: PaddingMode) -> Rc<GatherMap> {
    let plane = h * w;
    let mut idx = Vec::with_capacity(channels * TAPS * plane);
    for c in 0..channels {
        for k in 0..TAPS {
            for r in 0..h {
                for col in 0..w {
                    idx.push(
                        tap_source(r, col, k, h, w, padding)
                            .map_or(GatherMap::ZERO, |s| (c * plane + s) as u32),
                    );
                }
            }
        }
    }
    Rc::new(GatherMap::new(channels * plane, vec![channels * TAPS, plane], idx))
}

/// Tap permutation of a clockwise quarter-turn rotation of a 3x3 kernel:
/// rotated tap `k` takes original tap `kernel_rotation(s)[k]`.
pub fn kernel_rotation(s: usize) -> [usize; TAPS] {
    std::array::from_fn(|k| {
        let (r, c) = rotation_source(k / 3, k % 3, s, 3);
        r * 3 + c
    })
}

/// Weights of a lifting convolution: `[O, C, 9]` -> `[O * 4, C * 9]`, row `o * 4 + s`
/// holding the filter rotated by `s` quarter turns.
pub fn lifting_weights(out_ch: usize, in_ch: usize) -> Rc<GatherMap> {
    let mut idx = Vec::with_capacity(out_ch * 4 * in_ch * TAPS);
    for o in 0..out_ch {
        for s in 0..4 {
            let rot = kernel_rotation(s);
            for c in 0..in_ch {
                for &src in &rot {
                    idx.push(((o * in_ch + c) * TAPS + src) as u32);
                }
            }
        }
    }
    Rc::new(GatherMap::new(out_ch * in_ch * TAPS, vec![out_ch * 4, in_ch * TAPS], idx))
}

/// Weights of a group convolution: `[O, C, 4, 9]` -> `[O * 4, C * 4 * 9]`. Output
/// orientation `s` uses the filter rotated by `s` with its orientation axis shifted
/// by `s`: entry `(o, s; c, t, k) = psi[o, c, (t - s) mod 4, rot_s(k)]`.
pub fn group_conv_weights(out_ch: usize, in_ch: usize) -> Rc<GatherMap> {
    let mut idx = Vec::with_capacity(out_ch * 4 * in_ch * 4 * TAPS);
    for o in 0..out_ch {
        for s in 0..4 {
            let rot = kernel_rotation(s);
            for c in 0..in_ch {
                for t in 0..4 {
                    let src_t = (t + 4 - s) % 4;
                    for &k in &rot {
                        idx.push((((o * in_ch + c) * 4 + src_t) * TAPS + k) as u32);
                    }
                }
            }
        }
    }
    Rc::new(GatherMap::new(out_ch * in_ch * 4 * TAPS, vec![out_ch * 4, in_ch * 4 * TAPS], idx))
}

/// Orientation shift of per-orientation coefficient rows: `[O, C, 4, B]` ->
/// `[O, C * 4 * B]` with entry `(o; c, t, b) = coef[o, c, (t - s) mod 4, b]`.
pub fn orientation_shift(out_ch: usize, in_ch: usize, blocks: usize, s: usize) -> Rc<GatherMap> {
    let mut idx = Vec::with_capacity(out_ch * in_ch * 4 * blocks);
    for o in 0..out_ch {
        for c in 0..in_ch {
            for t in 0..4 {
                let src_t = (t + 4 - s) % 4;
                for b in 0..blocks {
                    idx.push((((o * in_ch + c) * 4 + src_t) * blocks + b) as u32);
                }
            }
        }
    }
    Rc::new(GatherMap::new(out_ch * in_ch * 4 * blocks, vec![out_ch, in_ch * 4 * blocks], idx))
}

/// 2x2 max pooling with stride 2 over `[planes, H, W]`; an odd last row or column
/// is dropped.
pub fn max_pool_2x2(planes: usize, h: usize, w: usize) -> Rc<PoolMap> {
    let (oh, ow) = (h / 2, w / 2);
    let mut idx = Vec::with_capacity(planes * oh * ow * 4);
    for p in 0..planes {
        for r in 0..oh {
            for c in 0..ow {
                for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    idx.push((p * h * w + (2 * r + dr) * w + 2 * c + dc) as u32);
                }
            }
        }
    }
    Rc::new(PoolMap::new(planes * h * w, vec![planes, oh, ow], 4, idx))
}

/// Max over the orientation axis: `[C, 4, P]` -> `[C, P]`.
pub fn group_max(channels: usize, plane: usize) -> Rc<PoolMap> {
    let mut idx = Vec::with_capacity(channels * plane * 4);
    for c in 0..channels {
        for p in 0..plane {
            for s in 0..4 {
                idx.push(((c * 4 + s) * plane + p) as u32);
            }
        }
    }
    Rc::new(PoolMap::new(channels * 4 * plane, vec![channels, plane], 4, idx))
}

/// 2x2 average-pool downsampling of a `[H, W]` image (H, W even); used to bring
/// 28x28 digits to the 14x14 student grid.
pub fn downsample_2x2(img: &[f32], h: usize, w: usize) -> Vec<f32> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(oh * ow);
    for r in 0..oh {
        for c in 0..ow {
            let s = img[2 * r * w + 2 * c] + img[2 * r * w + 2 * c + 1] + img[(2 * r + 1) * w + 2 * c] + img[(2 * r + 1) * w + 2 * c + 1];
            out.push(s * 0.25);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_rotation_matches_image_rotation() {
        // Quarter turn of [[0,1,2],[3,4,5],[6,7,8]] clockwise is [[6,3,0],[7,4,1],[8,5,2]].
        assert_eq!(kernel_rotation(1), [6, 3, 0, 7, 4, 1, 8, 5, 2]);
        assert_eq!(kernel_rotation(0), [0, 1, 2, 3, 4, 5, 6, 7, 8]);
        assert_eq!(kernel_rotation(2), [8, 7, 6, 5, 4, 3, 2, 1, 0]);
    }

    #[test]
    fn center_tap_reads_own_pixel() {
        for pad in [PaddingMode::ZeroFill, PaddingMode::Circular] {
            for r in 0..3 {
                for c in 0..3 {
                    assert_eq!(tap_source(r, c, 4, 3, 3, pad), Some(r * 3 + c));
                }
            }
        }
    }

    #[test]
    fn pool_maps_shapes() {
        let m = max_pool_2x2(3, 4, 6);
        assert_eq!(m.out_shape, vec![3, 2, 3]);
        let g = group_max(2, 5);
        assert_eq!(g.out_shape, vec![2, 5]);
    }
}

//! The translation group T(2) on the pixel grid and the quarter-turn group C4,
//! acting on planar images and on orientation-lifted feature maps.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// How reads outside the grid are resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PaddingMode {
    #[default]
    ZeroFill,
    Circular,
}

impl PaddingMode {
    /// Resolves a possibly off-grid coordinate, `None` meaning "reads zero".
    #[inline]
    pub fn resolve(self, i: i64, n: usize) -> Option<usize> {
        let n = n as i64;
        match self {
            PaddingMode::ZeroFill => (0..n).contains(&i).then_some(i as usize),
            PaddingMode::Circular => Some(i.rem_euclid(n) as usize),
        }
    }
}

impl fmt::Display for PaddingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PaddingMode::ZeroFill => "zero_fill",
            PaddingMode::Circular => "circular",
        })
    }
}

/// Integer pixel shift.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct T2Element {
    pub dy: i64,
    pub dx: i64,
}

impl T2Element {
    pub const IDENTITY: Self = Self { dy: 0, dx: 0 };

    pub fn new(dy: i64, dx: i64) -> Self {
        Self { dy, dx }
    }

    pub fn compose(self, other: Self) -> Self {
        Self::new(self.dy + other.dy, self.dx + other.dx)
    }

    pub fn inverse(self) -> Self {
        Self::new(-self.dy, -self.dx)
    }
}

/// Clockwise quarter turns, `k` in `0..4`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct C4Element {
    k: u8,
}

impl C4Element {
    pub const IDENTITY: Self = Self { k: 0 };

    pub fn new(k: i64) -> Self {
        Self {
            k: k.rem_euclid(4) as u8,
        }
    }

    pub fn k(self) -> usize {
        self.k as usize
    }

    pub fn all() -> [Self; 4] {
        [0, 1, 2, 3].map(Self::new)
    }

    pub fn compose(self, other: Self) -> Self {
        Self::new(self.k as i64 + other.k as i64)
    }

    pub fn inverse(self) -> Self {
        Self::new(4 - self.k as i64)
    }
}

/// Group element of either family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupElement {
    T2(T2Element),
    C4(C4Element),
}

/// Source coordinate read by output pixel `(r, c)` after `k` clockwise quarter
/// turns of an `n x n` grid. One turn maps `out(r, c) = in(n-1-c, r)`.
#[inline]
pub fn rotation_source(r: usize, c: usize, k: usize, n: usize) -> (usize, usize) {
    let (mut r, mut c) = (r, c);
    for _ in 0..k % 4 {
        (r, c) = (n - 1 - c, r);
    }
    (r, c)
}

fn trailing_hw<T: Scalar>(x: &Tensor<T>, op: &str) -> Result<(usize, usize, usize)> {
    let s = x.shape();
    if s.len() < 2 || s[s.len() - 1] == 0 || s[s.len() - 2] == 0 {
        return Err(Error::invalid(format!("{op} needs a [.., H, W] tensor, got {s:?}")));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    Ok((x.len() / (h * w), h, w))
}

/// `out(r, c) = x(r - dy, c - dx)` on every trailing `[H, W]` plane.
pub fn translate_image<T: Scalar>(x: &Tensor<T>, g: T2Element, mode: PaddingMode) -> Result<Tensor<T>> {
    let (planes, h, w) = trailing_hw(x, "translate_image")?;
    let mut out = Vec::with_capacity(x.len());
    for p in 0..planes {
        let plane = &x.data()[p * h * w..(p + 1) * h * w];
        for r in 0..h {
            for c in 0..w {
                let src = mode
                    .resolve(r as i64 - g.dy, h)
                    .zip(mode.resolve(c as i64 - g.dx, w));
                out.push(src.map_or(T::zero(), |(sr, sc)| plane[sr * w + sc]));
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Rotates every trailing `[H, H]` plane clockwise by `g`.
pub fn rotate90_image<T: Scalar>(x: &Tensor<T>, g: C4Element) -> Result<Tensor<T>> {
    let (planes, h, w) = trailing_hw(x, "rotate90_image")?;
    if h != w {
        return Err(Error::invalid(format!("rotate90_image needs a square grid, got {h}x{w}")));
    }
    let mut out = Vec::with_capacity(x.len());
    for p in 0..planes {
        let plane = &x.data()[p * h * w..(p + 1) * h * w];
        for r in 0..h {
            for c in 0..w {
                let (sr, sc) = rotation_source(r, c, g.k(), h);
                out.push(plane[sr * w + sc]);
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Regular-representation action on lifted maps `[.., 4, H, H]`:
/// `out(s) = rotate(f((s - k) mod 4), k)`.
pub fn act_on_lifted<T: Scalar>(f: &Tensor<T>, g: C4Element) -> Result<Tensor<T>> {
    let s = f.shape();
    if s.len() < 3 || s[s.len() - 3] != 4 {
        return Err(Error::invalid(format!(
            "act_on_lifted needs 4 orientation channels in [.., 4, H, H], got {s:?}"
        )));
    }
    let rotated = rotate90_image(f, g)?;
    let plane = s[s.len() - 2] * s[s.len() - 1];
    let groups = f.len() / (4 * plane);
    let mut out = vec![T::zero(); f.len()];
    for grp in 0..groups {
        for orient in 0..4 {
            let src = (orient + 4 - g.k()) % 4;
            let dst = (grp * 4 + orient) * plane;
            let from = (grp * 4 + src) * plane;
            out[dst..dst + plane].copy_from_slice(&rotated.data()[from..from + plane]);
        }
    }
    Tensor::new(s.to_vec(), out)
}

/// Translates each orientation plane of a lifted map (T(2) acts trivially on the
/// orientation axis).
pub fn translate_lifted<T: Scalar>(f: &Tensor<T>, g: T2Element, mode: PaddingMode) -> Result<Tensor<T>> {
    translate_image(f, g, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{sample_standard_normal, SeededRng};
    use proptest::prelude::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64_slice(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn translate_examples() {
        let x = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(translate_image(&x, T2Element::IDENTITY, PaddingMode::ZeroFill).unwrap(), x);
        let circ = translate_image(&x, T2Element::new(0, 1), PaddingMode::Circular).unwrap();
        assert_eq!(circ.data(), &[2.0, 1.0, 4.0, 3.0]);
        let zero = translate_image(&x, T2Element::new(0, 1), PaddingMode::ZeroFill).unwrap();
        assert_eq!(zero.data(), &[0.0, 1.0, 0.0, 3.0]);
    }

    #[test]
    fn rotate_examples() {
        let x = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(rotate90_image(&x, C4Element::new(0)).unwrap(), x);
        assert_eq!(rotate90_image(&x, C4Element::new(1)).unwrap().data(), &[3.0, 1.0, 4.0, 2.0]);
        let mut y = sample_standard_normal::<f64>(&mut SeededRng::new(1), &[5, 5]).unwrap();
        let orig = y.clone();
        for _ in 0..4 {
            y = rotate90_image(&y, C4Element::new(1)).unwrap();
        }
        assert_eq!(y, orig);
    }

    #[test]
    fn rotate_rejects_non_square() {
        let x = Tensor::<f32>::zeros(vec![2, 3]);
        assert!(rotate90_image(&x, C4Element::new(1)).is_err());
    }

    #[test]
    fn lifted_action_order_four_and_channel_check() {
        let f = sample_standard_normal::<f64>(&mut SeededRng::new(2), &[4, 5, 5]).unwrap();
        assert_eq!(act_on_lifted(&f, C4Element::IDENTITY).unwrap(), f);
        let mut g = f.clone();
        for _ in 0..4 {
            g = act_on_lifted(&g, C4Element::new(1)).unwrap();
        }
        assert_eq!(g, f);
        let bad = Tensor::<f64>::zeros(vec![3, 5, 5]);
        assert!(act_on_lifted(&bad, C4Element::new(1)).is_err());
    }

    #[test]
    fn c4_axioms_exhaustive() {
        for a in C4Element::all() {
            assert_eq!(a.compose(C4Element::IDENTITY), a);
            assert_eq!(a.compose(a.inverse()), C4Element::IDENTITY);
            for b in C4Element::all() {
                for c in C4Element::all() {
                    assert_eq!(a.compose(b).compose(c), a.compose(b.compose(c)));
                }
            }
        }
    }

    #[test]
    fn lifted_action_is_homomorphism() {
        let f = sample_standard_normal::<f64>(&mut SeededRng::new(3), &[2, 4, 6, 6]).unwrap();
        for g in C4Element::all() {
            for h in C4Element::all() {
                let seq = act_on_lifted(&act_on_lifted(&f, g).unwrap(), h).unwrap();
                let once = act_on_lifted(&f, h.compose(g)).unwrap();
                assert_eq!(seq, once);
            }
        }
    }

    proptest! {
        #[test]
        fn t2_axioms(a in (-20i64..20, -20i64..20), b in (-20i64..20, -20i64..20), c in (-20i64..20, -20i64..20)) {
            let (a, b, c) = (T2Element::new(a.0, a.1), T2Element::new(b.0, b.1), T2Element::new(c.0, c.1));
            prop_assert_eq!(a.compose(b).compose(c), a.compose(b.compose(c)));
            prop_assert_eq!(a.compose(T2Element::IDENTITY), a);
            prop_assert_eq!(a.compose(a.inverse()), T2Element::IDENTITY);
        }

        #[test]
        fn circular_translation_is_bijective(dy in -12i64..12, dx in -12i64..12, seed in 0u64..1000) {
            let x = sample_standard_normal::<f32>(&mut SeededRng::new(seed), &[5, 7]).unwrap();
            let g = T2Element::new(dy, dx);
            let back = translate_image(&translate_image(&x, g, PaddingMode::Circular).unwrap(), g.inverse(), PaddingMode::Circular).unwrap();
            prop_assert_eq!(back, x);
        }
    }
}

//! Independent reference implementations for tests: direct nested-loop
//! convolutions and central finite-difference gradients. Nothing here shares code
//! with the gather/im2col path it checks.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::param::{Module, Parameter};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

fn wrap(i: i64, n: usize, circular: bool) -> Option<usize> {
    if circular {
        Some(((i % n as i64) + n as i64) as usize % n)
    } else if i < 0 || i >= n as i64 {
        None
    } else {
        Some(i as usize)
    }
}

/// `y[o][r][c] = sum_{ci,i,j} w[o][ci][i][j] * x[ci][r+i-1][c+j-1]`.
/// `x` is `[C, H, W]`, `w` is `[O, C, 3, 3]`, both flat row-major.
pub fn conv2d_naive(x: &[f64], c_in: usize, h: usize, w: usize, weights: &[f64], c_out: usize, circular: bool) -> Vec<f64> {
    assert_eq!(x.len(), c_in * h * w);
    assert_eq!(weights.len(), c_out * c_in * 9);
    let mut y = vec![0.0; c_out * h * w];
    for o in 0..c_out {
        for r in 0..h {
            for c in 0..w {
                let mut acc = 0.0;
                for ci in 0..c_in {
                    for i in 0..3 {
                        for j in 0..3 {
                            let rr = wrap(r as i64 + i as i64 - 1, h, circular);
                            let cc = wrap(c as i64 + j as i64 - 1, w, circular);
                            if let (Some(rr), Some(cc)) = (rr, cc) {
                                acc += weights[((o * c_in + ci) * 3 + i) * 3 + j] * x[(ci * h + rr) * w + cc];
                            }
                        }
                    }
                }
                y[(o * h + r) * w + c] = acc;
            }
        }
    }
    y
}

/// One clockwise quarter turn of a 3x3 kernel: `out[i][j] = k[2-j][i]`.
pub fn rotate_kernel_cw(k: &[f64; 9]) -> [f64; 9] {
    let mut out = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            out[i * 3 + j] = k[(2 - j) * 3 + i];
        }
    }
    out
}

fn rotate_kernel_times(k: &[f64], s: usize) -> [f64; 9] {
    let mut cur: [f64; 9] = k.try_into().expect("3x3 kernel");
    for _ in 0..s {
        cur = rotate_kernel_cw(&cur);
    }
    cur
}

/// Single-channel lifting convolution: `[H, W]` with a 3x3 kernel -> `[4, H, W]`.
pub fn lifting_conv_naive(x: &[f64], h: usize, w: usize, kernel: &[f64], circular: bool) -> Vec<f64> {
    (0..4)
        .flat_map(|s| conv2d_naive(x, 1, h, w, &rotate_kernel_times(kernel, s), 1, circular))
        .collect()
}

/// Single-channel group convolution `[4, H, W]` with `psi [4, 3, 3]`:
/// `out(s) = sum_t conv(f(t), rot_s psi((t - s) mod 4))`.
pub fn group_conv_naive(f: &[f64], h: usize, w: usize, psi: &[f64], circular: bool) -> Vec<f64> {
    let plane = h * w;
    let mut out = vec![0.0; 4 * plane];
    for s in 0..4 {
        for t in 0..4 {
            let src = (t + 4 - s) % 4;
            let k = rotate_kernel_times(&psi[src * 9..src * 9 + 9], s);
            let y = conv2d_naive(&f[t * plane..(t + 1) * plane], 1, h, w, &k, 1, circular);
            for (o, v) in out[s * plane..(s + 1) * plane].iter_mut().zip(y) {
                *o += v;
            }
        }
    }
    out
}

/// Loose parameters as a module.
#[derive(Debug, Default)]
pub struct ParamSet(pub Vec<Parameter<f64>>);

impl Module<f64> for ParamSet {
    fn parameters(&self) -> Vec<&Parameter<f64>> {
        self.0.iter().collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter<f64>> {
        self.0.iter_mut().collect()
    }
}

/// Result of comparing analytic and finite-difference gradients of one parameter.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: String,
    pub checked: usize,
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||)` over the checked entries.
    pub relative_error: f64,
}

/// Central differences with step `h` on up to `max_entries` randomly chosen entries
/// of every trainable parameter of `model`.
pub fn gradient_check<M, F>(model: &mut M, h: f64, max_entries: usize, seed: u64, loss: F) -> Result<Vec<GradCheck>>
where
    M: Module<f64>,
    F: for<'t> Fn(&'t Tape<f64>, &M) -> Result<Var<'t, f64>>,
{
    let grads = {
        let tape = Tape::new();
        let l = loss(&tape, model)?;
        let g = tape.backward(l)?;
        model
            .parameters()
            .iter()
            .map(|p| g.get(p).cloned().unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
            .collect::<Vec<_>>()
    };
    let eval = |m: &M| -> Result<f64> {
        let tape = Tape::new();
        let v = loss(&tape, m)?.value().item();
        Ok(v)
    };
    let mut rng = SeededRng::new(seed);
    let mut out = Vec::new();
    let count = model.parameters().len();
    for pi in 0..count {
        let (n, trainable, name) = {
            let p = model.parameters()[pi];
            (p.value.len(), p.trainable, p.name.clone())
        };
        if !trainable {
            continue;
        }
        let mut entries: Vec<usize> = (0..n).collect();
        if n > max_entries {
            rng.shuffle(&mut entries);
            entries.truncate(max_entries);
        }
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for &j in &entries {
            let orig = model.parameters()[pi].value.data()[j];
            model.parameters_mut()[pi].value.data_mut()[j] = orig + h;
            let up = eval(model)?;
            model.parameters_mut()[pi].value.data_mut()[j] = orig - h;
            let down = eval(model)?;
            model.parameters_mut()[pi].value.data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads[pi].data()[j];
            diff2 += (analytic - numeric).powi(2);
            a2 += analytic * analytic;
            n2 += numeric * numeric;
        }
        let scale = a2.sqrt().max(n2.sqrt());
        let relative_error = if scale == 0.0 { 0.0 } else { diff2.sqrt() / scale };
        out.push(GradCheck {
            name,
            checked: entries.len(),
            relative_error,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_ones_kernel_on_wrapped_2x2() {
        // Every 3x3 window over a circularly wrapped 2x2 grid reads each pixel a fixed
        // number of times: rows {r-1, r, r+1} mod 2 hit one row twice; same for columns.
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = conv2d_naive(&x, 1, 2, 2, &[1.0; 9], 1, true);
        // (0,0): rows {1,0,1} cols {1,0,1}: 4*x11 + 2*x10 + 2*x01 + x00 = 16 + 6 + 4 + 1
        assert_eq!(y[0], 27.0);
    }

    #[test]
    fn rotate_kernel_four_times_is_identity() {
        let k: [f64; 9] = std::array::from_fn(|i| i as f64);
        let mut r = k;
        for _ in 0..4 {
            r = rotate_kernel_cw(&r);
        }
        assert_eq!(r, k);
        assert_eq!(rotate_kernel_cw(&k), [6.0, 3.0, 0.0, 7.0, 4.0, 1.0, 8.0, 5.0, 2.0]);
    }
}

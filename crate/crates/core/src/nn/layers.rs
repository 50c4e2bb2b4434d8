//! Layer primitives: 3x3 same-padding convolution (via im2col + matmul),
//! fully connected layers, ReLU and 2x2 max pooling. Each layer stores its
//! parameters and accumulated gradients.

use ndarray::{Array1, Array2, Array4};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// 3x3 convolution, stride 1, zero padding 1 (spatial size preserved).
/// Weights are stored flattened as `[out_c, in_c * 9]` for the matmul path.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub grad_weight: Array2<f64>,
    pub grad_bias: Array1<f64>,
}

impl Conv2d {
    pub fn new(in_channels: usize, out_channels: usize, rng: &mut impl Rng) -> Self {
        // Kaiming-normal for ReLU nets.
        let std = (2.0 / (in_channels * 9) as f64).sqrt();
        let dist = Normal::new(0.0, std).unwrap();
        let weight =
            Array2::from_shape_fn((out_channels, in_channels * 9), |_| dist.sample(rng));
        Conv2d {
            in_channels,
            out_channels,
            weight,
            bias: Array1::zeros(out_channels),
            grad_weight: Array2::zeros((out_channels, in_channels * 9)),
            grad_bias: Array1::zeros(out_channels),
        }
    }

    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        let (b, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels);
        let cols = im2col(x);
        // [B*H*W, out_c]
        let out2d = cols.dot(&self.weight.t());
        let mut out = Array4::zeros((b, self.out_channels, h, w));
        {
            let out_slice = out.as_slice_mut().unwrap();
            let src = out2d.as_slice().unwrap();
            let hw = h * w;
            for bi in 0..b {
                for p in 0..hw {
                    let row = bi * hw + p;
                    for oc in 0..self.out_channels {
                        out_slice[(bi * self.out_channels + oc) * hw + p] =
                            src[row * self.out_channels + oc] + self.bias[oc];
                    }
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Array4<f64>, grad_out: &Array4<f64>) -> Array4<f64> {
        let (b, _, h, w) = x.dim();
        let hw = h * w;
        // grad_out as [B*H*W, out_c]
        let mut go2d = Array2::zeros((b * hw, self.out_channels));
        {
            let dst = go2d.as_slice_mut().unwrap();
            let src = grad_out.as_slice().unwrap();
            for bi in 0..b {
                for oc in 0..self.out_channels {
                    for p in 0..hw {
                        dst[(bi * hw + p) * self.out_channels + oc] =
                            src[(bi * self.out_channels + oc) * hw + p];
                    }
                }
            }
        }
        let cols = im2col(x);
        self.grad_weight += &go2d.t().dot(&cols);
        for oc in 0..self.out_channels {
            self.grad_bias[oc] += go2d.column(oc).sum();
        }
        let grad_cols = go2d.dot(&self.weight);
        col2im(&grad_cols, b, self.in_channels, h, w)
    }
}

/// Unfolds 3x3 neighborhoods (zero padding 1) into rows: `[B*H*W, C*9]`.
fn im2col(x: &Array4<f64>) -> Array2<f64> {
    let (b, c, h, w) = x.dim();
    let mut cols = Array2::zeros((b * h * w, c * 9));
    let src = x.as_slice().unwrap();
    let dst = cols.as_slice_mut().unwrap();
    let hw = h * w;
    let row_len = c * 9;
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let row = (bi * hw + y * w + xx) * row_len;
                for ci in 0..c {
                    let plane = (bi * c + ci) * hw;
                    let base = row + ci * 9;
                    for ky in 0..3usize {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..3usize {
                            let sx = xx as isize + kx as isize - 1;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            dst[base + ky * 3 + kx] =
                                src[plane + sy as usize * w + sx as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds column gradients back onto the input grid.
fn col2im(cols: &Array2<f64>, b: usize, c: usize, h: usize, w: usize) -> Array4<f64> {
    let mut out = Array4::zeros((b, c, h, w));
    let dst = out.as_slice_mut().unwrap();
    let src = cols.as_slice().unwrap();
    let hw = h * w;
    let row_len = c * 9;
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let row = (bi * hw + y * w + xx) * row_len;
                for ci in 0..c {
                    let plane = (bi * c + ci) * hw;
                    let base = row + ci * 9;
                    for ky in 0..3usize {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..3usize {
                            let sx = xx as isize + kx as isize - 1;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            dst[plane + sy as usize * w + sx as usize] += src[base + ky * 3 + kx];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Fully connected layer `y = x W^T + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub grad_weight: Array2<f64>,
    pub grad_bias: Array1<f64>,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / in_dim as f64).sqrt();
        let dist = Normal::new(0.0, std).unwrap();
        Linear {
            weight: Array2::from_shape_fn((out_dim, in_dim), |_| dist.sample(rng)),
            bias: Array1::zeros(out_dim),
            grad_weight: Array2::zeros((out_dim, in_dim)),
            grad_bias: Array1::zeros(out_dim),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight.t());
        y += &self.bias;
        y
    }

    pub fn backward(&mut self, x: &Array2<f64>, grad_out: &Array2<f64>) -> Array2<f64> {
        self.grad_weight += &grad_out.t().dot(x);
        for k in 0..self.bias.len() {
            self.grad_bias[k] += grad_out.column(k).sum();
        }
        grad_out.dot(&self.weight)
    }
}

pub fn relu4(x: &Array4<f64>) -> Array4<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Backward through ReLU using the forward *output* as the mask.
pub fn relu4_backward(out: &Array4<f64>, grad_out: &Array4<f64>) -> Array4<f64> {
    let mut g = grad_out.clone();
    g.zip_mut_with(out, |gv, &ov| {
        if ov <= 0.0 {
            *gv = 0.0;
        }
    });
    g
}

pub fn relu2(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

pub fn relu2_backward(out: &Array2<f64>, grad_out: &Array2<f64>) -> Array2<f64> {
    let mut g = grad_out.clone();
    g.zip_mut_with(out, |gv, &ov| {
        if ov <= 0.0 {
            *gv = 0.0;
        }
    });
    g
}

/// 2x2 max pooling with stride 2 (odd trailing rows/columns are dropped).
/// Returns the pooled map and flat argmax indices for the backward pass.
pub fn max_pool2(x: &Array4<f64>) -> (Array4<f64>, Vec<u32>) {
    let (b, c, h, w) = x.dim();
    let oh = h / 2;
    let ow = w / 2;
    let mut out = Array4::zeros((b, c, oh, ow));
    let mut argmax = vec![0u32; b * c * oh * ow];
    let src = x.as_slice().unwrap();
    let dst = out.as_slice_mut().unwrap();
    for bi in 0..b {
        for ci in 0..c {
            let plane = (bi * c + ci) * h * w;
            let oplane = (bi * c + ci) * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best_idx = plane + (2 * oy) * w + 2 * ox;
                    let mut best = src[best_idx];
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let idx = plane + (2 * oy + dy) * w + (2 * ox + dx);
                            if src[idx] > best {
                                best = src[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    dst[oplane + oy * ow + ox] = best;
                    argmax[oplane + oy * ow + ox] = best_idx as u32;
                }
            }
        }
    }
    (out, argmax)
}

pub fn max_pool2_backward(
    grad_out: &Array4<f64>,
    argmax: &[u32],
    input_dim: (usize, usize, usize, usize),
) -> Array4<f64> {
    let mut grad_in = Array4::zeros(input_dim);
    let dst = grad_in.as_slice_mut().unwrap();
    let src = grad_out.as_slice().unwrap();
    for (i, &idx) in argmax.iter().enumerate() {
        dst[idx as usize] += src[i];
    }
    grad_in
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;
    use ndarray::{Array4, Axis};
    use rand::Rng;

    /// Direct 2D convolution for the oracle (no im2col).
    fn conv_direct(x: &Array4<f64>, layer: &Conv2d) -> Array4<f64> {
        let (b, c, h, w) = x.dim();
        let mut out = Array4::zeros((b, layer.out_channels, h, w));
        for bi in 0..b {
            for oc in 0..layer.out_channels {
                for y in 0..h as isize {
                    for xx in 0..w as isize {
                        let mut acc = layer.bias[oc];
                        for ci in 0..c {
                            for ky in -1..=1isize {
                                for kx in -1..=1isize {
                                    let sy = y + ky;
                                    let sx = xx + kx;
                                    if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                                        continue;
                                    }
                                    let wv = layer.weight
                                        [[oc, ci * 9 + ((ky + 1) * 3 + kx + 1) as usize]];
                                    acc += wv * x[[bi, ci, sy as usize, sx as usize]];
                                }
                            }
                        }
                        out[[bi, oc, y as usize, xx as usize]] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_forward_matches_direct_convolution() {
        let mut rng = derive_rng(31, &[0x51]);
        let layer = Conv2d::new(2, 3, &mut rng);
        let x = Array4::from_shape_fn((2, 2, 5, 5), |_| rng.gen_range(-1.0..1.0));
        let fast = layer.forward(&x);
        let slow = conv_direct(&x, &layer);
        for (a, b) in fast.iter().zip(slow.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = derive_rng(32, &[0x52]);
        let mut layer = Conv2d::new(2, 2, &mut rng);
        let x = Array4::from_shape_fn((1, 2, 4, 4), |_| rng.gen_range(-1.0..1.0));
        let probe = Array4::from_shape_fn((1, 2, 4, 4), |_| rng.gen_range(-1.0..1.0));
        let loss = |out: &Array4<f64>| (out * &probe).sum();

        let out = layer.forward(&x);
        let _ = loss(&out);
        let grad_in = layer.backward(&x, &probe);

        let h = 1e-6;
        let mut xp = x.clone();
        for idx in 0..x.len() {
            let flat = xp.as_slice_mut().unwrap();
            let orig = flat[idx];
            flat[idx] = orig + h;
            let up = loss(&layer.forward(&xp));
            xp.as_slice_mut().unwrap()[idx] = orig - h;
            let down = loss(&layer.forward(&xp));
            xp.as_slice_mut().unwrap()[idx] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = grad_in.as_slice().unwrap()[idx];
            assert!((fd - an).abs() < 1e-6, "input grad {an} vs fd {fd}");
        }

        // Weight gradient.
        let mut wcopy = layer.clone();
        for idx in 0..layer.weight.len() {
            let orig = wcopy.weight.as_slice().unwrap()[idx];
            wcopy.weight.as_slice_mut().unwrap()[idx] = orig + h;
            let up = loss(&wcopy.forward(&x));
            wcopy.weight.as_slice_mut().unwrap()[idx] = orig - h;
            let down = loss(&wcopy.forward(&x));
            wcopy.weight.as_slice_mut().unwrap()[idx] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = layer.grad_weight.as_slice().unwrap()[idx];
            assert!((fd - an).abs() < 1e-6, "weight grad {an} vs fd {fd}");
        }
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = derive_rng(33, &[0x53]);
        let mut layer = Linear::new(4, 3, &mut rng);
        let x = Array2::from_shape_fn((2, 4), |_| rng.gen_range(-1.0..1.0));
        let probe = Array2::from_shape_fn((2, 3), |_| rng.gen_range(-1.0..1.0));
        let loss = |out: &Array2<f64>| (out * &probe).sum();

        let _ = layer.forward(&x);
        let grad_in = layer.backward(&x, &probe);

        let h = 1e-6;
        let mut xp = x.clone();
        for idx in 0..x.len() {
            let orig = xp.as_slice().unwrap()[idx];
            xp.as_slice_mut().unwrap()[idx] = orig + h;
            let up = loss(&layer.forward(&xp));
            xp.as_slice_mut().unwrap()[idx] = orig - h;
            let down = loss(&layer.forward(&xp));
            xp.as_slice_mut().unwrap()[idx] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!((fd - grad_in.as_slice().unwrap()[idx]).abs() < 1e-6);
        }
    }

    #[test]
    fn max_pool_selects_maxima_and_routes_gradient() {
        let mut x = Array4::zeros((1, 1, 4, 4));
        x[[0, 0, 0, 1]] = 5.0;
        x[[0, 0, 3, 3]] = 2.0;
        let (out, argmax) = max_pool2(&x);
        assert_eq!(out[[0, 0, 0, 0]], 5.0);
        assert_eq!(out[[0, 0, 1, 1]], 2.0);

        let mut grad_out = Array4::zeros((1, 1, 2, 2));
        grad_out[[0, 0, 0, 0]] = 1.0;
        grad_out[[0, 0, 1, 1]] = 3.0;
        let grad_in = max_pool2_backward(&grad_out, &argmax, (1, 1, 4, 4));
        assert_eq!(grad_in[[0, 0, 0, 1]], 1.0);
        assert_eq!(grad_in[[0, 0, 3, 3]], 3.0);
        assert_eq!(grad_in.sum(), 4.0);
    }

    #[test]
    fn pool_drops_odd_tail() {
        let x = Array4::from_shape_fn((1, 1, 5, 5), |(_, _, y, xx)| (y * 5 + xx) as f64);
        let (out, _) = max_pool2(&x);
        assert_eq!(out.len_of(Axis(2)), 2);
        assert_eq!(out.len_of(Axis(3)), 2);
    }
}

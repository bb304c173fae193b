//! Minimal f64 neural building blocks with explicit backward passes.
//!
//! Everything here is deliberately small and deterministic: dense layers,
//! stride-2 convolutions, rectified linear units, softmax, and an inverted
//! dropout mask. Gradients are accumulated into each tensor's `grad` buffer
//! so a batch is a plain loop of per-sample backward calls.

use ndarray::{Array1, Array3, ArrayD, ArrayView1, ArrayView3, IxDyn};
use rand::Rng;

/// A trainable tensor: value plus accumulated gradient of the same shape.
#[derive(Debug, Clone)]
pub struct PTensor {
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
}

impl PTensor {
    pub fn zeros(shape: &[usize]) -> Self {
        PTensor { value: ArrayD::zeros(IxDyn(shape)), grad: ArrayD::zeros(IxDyn(shape)) }
    }

    pub fn from_values(value: ArrayD<f64>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        PTensor { value, grad }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Visitor over every trainable tensor of a component. Names are
/// slash-separated paths unique within the visited root.
pub trait Trainable {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut PTensor));

    fn zero_grad(&mut self) {
        self.visit_params("", &mut |_, p| p.zero_grad());
    }

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| n += p.len());
        n
    }
}

/// Glorot-uniform sample bound for a layer with the given fan-in/fan-out.
fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Fully connected layer, weights stored input-major: `w[[i, o]]`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: PTensor,
    pub b: PTensor,
}

impl Dense {
    pub fn glorot(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let bound = glorot_bound(input, output);
        let mut w = PTensor::zeros(&[input, output]);
        for v in w.value.iter_mut() {
            *v = rng.gen_range(-bound..bound);
        }
        Dense { w, b: PTensor::zeros(&[output]) }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Dense { w: PTensor::zeros(&[input, output]), b: PTensor::zeros(&[output]) }
    }

    pub fn input_dim(&self) -> usize {
        self.w.value.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.w.value.shape()[1]
    }

    pub fn forward(&self, x: ArrayView1<f64>) -> Array1<f64> {
        let (ni, no) = (self.input_dim(), self.output_dim());
        assert_eq!(x.len(), ni, "dense input width");
        let w = self.w.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let mut y = self.b.value.view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned();
        for i in 0..ni {
            let xi = x[i];
            if xi != 0.0 {
                for o in 0..no {
                    y[o] += xi * w[[i, o]];
                }
            }
        }
        y
    }

    /// Accumulates dW, db and returns dx.
    pub fn backward(&mut self, x: ArrayView1<f64>, dy: ArrayView1<f64>) -> Array1<f64> {
        let (ni, no) = (self.input_dim(), self.output_dim());
        assert_eq!(x.len(), ni);
        assert_eq!(dy.len(), no);
        let w = self.w.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let mut dx = Array1::zeros(ni);
        {
            let mut gw = self.w.grad.view_mut().into_dimensionality::<ndarray::Ix2>().unwrap();
            for i in 0..ni {
                let xi = x[i];
                let mut acc = 0.0;
                for o in 0..no {
                    let d = dy[o];
                    gw[[i, o]] += xi * d;
                    acc += w[[i, o]] * d;
                }
                dx[i] = acc;
            }
        }
        let mut gb = self.b.grad.view_mut().into_dimensionality::<ndarray::Ix1>().unwrap();
        for o in 0..no {
            gb[o] += dy[o];
        }
        dx
    }
}

impl Trainable for Dense {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut PTensor)) {
        f(&format!("{prefix}w"), &mut self.w);
        f(&format!("{prefix}b"), &mut self.b);
    }
}

/// 3x3 convolution, stride 2, zero padding 1, channels-first layout
/// `[c, h, w]`. Weight shape `[out_c, in_c, 3, 3]`.
#[derive(Debug, Clone)]
pub struct Conv3x3s2 {
    pub w: PTensor,
    pub b: PTensor,
    pub in_c: usize,
    pub out_c: usize,
}

pub const CONV_KERNEL: usize = 3;
pub const CONV_STRIDE: usize = 2;
pub const CONV_PAD: usize = 1;

/// Spatial output size for one dimension.
pub fn conv_out_len(input: usize) -> usize {
    (input + 2 * CONV_PAD - CONV_KERNEL) / CONV_STRIDE + 1
}

impl Conv3x3s2 {
    pub fn glorot(in_c: usize, out_c: usize, rng: &mut impl Rng) -> Self {
        let fan_in = in_c * CONV_KERNEL * CONV_KERNEL;
        let fan_out = out_c * CONV_KERNEL * CONV_KERNEL;
        let bound = glorot_bound(fan_in, fan_out);
        let mut w = PTensor::zeros(&[out_c, in_c, CONV_KERNEL, CONV_KERNEL]);
        for v in w.value.iter_mut() {
            *v = rng.gen_range(-bound..bound);
        }
        Conv3x3s2 { w, b: PTensor::zeros(&[out_c]), in_c, out_c }
    }

    pub fn forward(&self, x: ArrayView3<f64>) -> Array3<f64> {
        let (c, h, wdt) = x.dim();
        assert_eq!(c, self.in_c, "conv input channels");
        let (oh, ow) = (conv_out_len(h), conv_out_len(wdt));
        let wt = self.w.value.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let bias = self.b.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut y = Array3::zeros((self.out_c, oh, ow));
        for oc in 0..self.out_c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[oc];
                    let base_y = (oy * CONV_STRIDE) as isize - CONV_PAD as isize;
                    let base_x = (ox * CONV_STRIDE) as isize - CONV_PAD as isize;
                    for ic in 0..self.in_c {
                        for ky in 0..CONV_KERNEL {
                            let iy = base_y + ky as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..CONV_KERNEL {
                                let ix = base_x + kx as isize;
                                if ix < 0 || ix >= wdt as isize {
                                    continue;
                                }
                                acc += wt[[oc, ic, ky, kx]] * x[[ic, iy as usize, ix as usize]];
                            }
                        }
                    }
                    y[[oc, oy, ox]] = acc;
                }
            }
        }
        y
    }

    pub fn backward(&mut self, x: ArrayView3<f64>, dy: ArrayView3<f64>) -> Array3<f64> {
        let (c, h, wdt) = x.dim();
        let (oc_n, oh, ow) = dy.dim();
        assert_eq!(c, self.in_c);
        assert_eq!(oc_n, self.out_c);
        let wt = self.w.value.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let mut dx = Array3::zeros((c, h, wdt));
        let mut gw = self.w.grad.view_mut().into_dimensionality::<ndarray::Ix4>().unwrap();
        let mut gb = self.b.grad.view_mut().into_dimensionality::<ndarray::Ix1>().unwrap();
        for oc in 0..self.out_c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let d = dy[[oc, oy, ox]];
                    if d == 0.0 {
                        continue;
                    }
                    gb[oc] += d;
                    let base_y = (oy * CONV_STRIDE) as isize - CONV_PAD as isize;
                    let base_x = (ox * CONV_STRIDE) as isize - CONV_PAD as isize;
                    for ic in 0..self.in_c {
                        for ky in 0..CONV_KERNEL {
                            let iy = base_y + ky as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..CONV_KERNEL {
                                let ix = base_x + kx as isize;
                                if ix < 0 || ix >= wdt as isize {
                                    continue;
                                }
                                gw[[oc, ic, ky, kx]] += d * x[[ic, iy as usize, ix as usize]];
                                dx[[ic, iy as usize, ix as usize]] += d * wt[[oc, ic, ky, kx]];
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

impl Trainable for Conv3x3s2 {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut PTensor)) {
        f(&format!("{prefix}w"), &mut self.w);
        f(&format!("{prefix}b"), &mut self.b);
    }
}

pub fn relu(x: &Array1<f64>) -> Array1<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Backward through relu given the *activated* output.
pub fn relu_backward(y: &Array1<f64>, dy: &Array1<f64>) -> Array1<f64> {
    Array1::from_iter(y.iter().zip(dy.iter()).map(|(&y, &d)| if y > 0.0 { d } else { 0.0 }))
}

pub fn relu3(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(|v| v.max(0.0))
}

pub fn relu3_backward(y: &Array3<f64>, dy: &Array3<f64>) -> Array3<f64> {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |d, &y| {
        if y <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

/// Numerically stable softmax.
pub fn softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps = logits.mapv(|v| (v - max).exp());
    let sum: f64 = exps.sum();
    exps / sum
}

/// Gradient of cross-entropy w.r.t. logits for softmax output `p` and
/// one-hot true class `label`, scaled by `weight` (e.g. 1/batch).
pub fn softmax_ce_dlogits(p: &Array1<f64>, label: usize, weight: f64) -> Array1<f64> {
    let mut d = p * weight;
    d[label] -= weight;
    d
}

/// Inverted dropout mask: entries are 0 with probability `rate`, else
/// `1/(1-rate)`. `rate = 0` yields all ones.
pub fn dropout_mask(len: usize, rate: f64, rng: &mut impl Rng) -> Array1<f64> {
    assert!((0.0..1.0).contains(&rate), "dropout rate in [0,1)");
    if rate == 0.0 {
        return Array1::ones(len);
    }
    let keep = 1.0 - rate;
    Array1::from_iter((0..len).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { 1.0 / keep }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dense_forward_matches_manual() {
        let mut d = Dense::zeros(2, 2);
        d.w.value = array![[1.0, 2.0], [3.0, 4.0]].into_dyn();
        d.b.value = array![0.5, -0.5].into_dyn();
        let y = d.forward(array![1.0, 1.0].view());
        assert_eq!(y, array![4.5, 5.5]);
    }

    #[test]
    fn dense_backward_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut d = Dense::glorot(3, 2, &mut rng);
        let x = array![0.3, -0.7, 1.1];
        // scalar objective: sum of outputs
        let dy = array![1.0, 1.0];
        let dx = d.backward(x.view(), dy.view());
        let eps = 1e-6;
        for i in 0..3 {
            let mut xp = x.clone();
            xp[i] += eps;
            let mut xm = x.clone();
            xm[i] -= eps;
            let num = (d.forward(xp.view()).sum() - d.forward(xm.view()).sum()) / (2.0 * eps);
            assert!((dx[i] - num).abs() < 1e-8, "dx[{i}] {} vs {}", dx[i], num);
        }
        // weight grads
        let gw = d.w.grad.clone();
        for idx in 0..gw.len() {
            let mut dp = d.clone();
            dp.w.value.as_slice_mut().unwrap()[idx] += eps;
            let mut dm = d.clone();
            dm.w.value.as_slice_mut().unwrap()[idx] -= eps;
            let num = (dp.forward(x.view()).sum() - dm.forward(x.view()).sum()) / (2.0 * eps);
            assert!((gw.as_slice().unwrap()[idx] - num).abs() < 1e-8);
        }
    }

    #[test]
    fn conv_output_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let conv = Conv3x3s2::glorot(3, 8, &mut rng);
        let x = Array3::zeros((3, 32, 32));
        let y = conv.forward(x.view());
        assert_eq!(y.dim(), (8, 16, 16));
        let y2 = Conv3x3s2::glorot(8, 16, &mut rng).forward(y.view());
        assert_eq!(y2.dim(), (16, 8, 8));
    }

    #[test]
    fn conv_backward_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut conv = Conv3x3s2::glorot(2, 3, &mut rng);
        let x = Array3::from_shape_fn((2, 5, 5), |_| rng.gen_range(-1.0..1.0));
        let y = conv.forward(x.view());
        let dy = Array3::ones(y.dim());
        let dx = conv.backward(x.view(), dy.view());
        let eps = 1e-6;
        // input grads, sampled
        for &(c, i, j) in &[(0, 0, 0), (1, 2, 3), (0, 4, 4), (1, 1, 1)] {
            let mut xp = x.clone();
            xp[[c, i, j]] += eps;
            let mut xm = x.clone();
            xm[[c, i, j]] -= eps;
            let num = (conv.forward(xp.view()).sum() - conv.forward(xm.view()).sum()) / (2.0 * eps);
            assert!((dx[[c, i, j]] - num).abs() < 1e-7);
        }
        // weight grads, sampled
        let gw = conv.w.grad.clone();
        for idx in [0, 5, 11, 17] {
            let mut cp = conv.clone();
            cp.w.value.as_slice_mut().unwrap()[idx] += eps;
            let mut cm = conv.clone();
            cm.w.value.as_slice_mut().unwrap()[idx] -= eps;
            let num = (cp.forward(x.view()).sum() - cm.forward(x.view()).sum()) / (2.0 * eps);
            assert!((gw.as_slice().unwrap()[idx] - num).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let p = softmax(array![0.0, 0.0].view());
        assert!((p[0] - 0.5).abs() < 1e-12);
        assert!((p.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dropout_zero_rate_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = dropout_mask(16, 0.0, &mut rng);
        assert!(m.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn dropout_scales_kept_units() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = dropout_mask(1000, 0.2, &mut rng);
        assert!(m.iter().all(|&v| v == 0.0 || (v - 1.25).abs() < 1e-12));
        let kept = m.iter().filter(|&&v| v > 0.0).count();
        assert!(kept > 700 && kept < 900);
    }
}

//! Convolution, batch normalization and dense layers with explicit
//! backward passes. Activations are stored channel-major over the batch
//! (`C x N x H x W`), so a convolution over the whole batch is one GEMM.

use super::params::{Declare, Init, ParamSet};

pub(crate) const BN_EPS: f32 = 1e-5;
pub(crate) const BN_MOMENTUM: f32 = 0.1;

/// Activation tensor in `C x N x H x W` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(c: usize, n: usize, h: usize, w: usize) -> Self {
        Tensor {
            c,
            n,
            h,
            w,
            data: vec![0.0; c * n * h * w],
        }
    }

    /// Elements per channel (`N * H * W`).
    pub fn plane(&self) -> usize {
        self.n * self.h * self.w
    }
}

/// `C = A * B` (or `C += A * B`) with optional transposition of the
/// row-major operands. `A` is `m x k`, `B` is `k x n` after transposition.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|x| *x = 0.0);
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserted lengths cover every index reachable through the
    // strides above for an m x k, k x n and m x n problem.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn declare(
        d: &mut impl Declare,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        let weight = d.declare(
            format!("{name}.weight"),
            vec![cout, cin, k, k],
            Init::KaimingNormal { fan_in: cin * k * k },
            true,
        );
        Conv2d {
            weight,
            cin,
            cout,
            k,
            stride,
            pad: k / 2,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &Tensor, ho: usize, wo: usize) -> Vec<f32> {
        let (k, s, pad) = (self.k, self.stride, self.pad as isize);
        let cols_n = x.n * ho * wo;
        let mut cols = vec![0.0f32; self.cin * k * k * cols_n];
        for ci in 0..self.cin {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst_row = &mut cols[row * cols_n..(row + 1) * cols_n];
                    for ni in 0..x.n {
                        let src_plane = &x.data[((ci * x.n) + ni) * x.h * x.w..][..x.h * x.w];
                        for oy in 0..ho {
                            let iy = (oy * s + ky) as isize - pad;
                            if iy < 0 || iy >= x.h as isize {
                                continue;
                            }
                            let src_row = &src_plane[iy as usize * x.w..][..x.w];
                            let dst = &mut dst_row[(ni * ho + oy) * wo..][..wo];
                            for (ox, d) in dst.iter_mut().enumerate() {
                                let ix = (ox * s + kx) as isize - pad;
                                if ix >= 0 && ix < x.w as isize {
                                    *d = src_row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f32], dx: &mut Tensor, ho: usize, wo: usize) {
        let (k, s, pad) = (self.k, self.stride, self.pad as isize);
        let cols_n = dx.n * ho * wo;
        let (h, w, n) = (dx.h, dx.w, dx.n);
        for ci in 0..self.cin {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src_row = &cols[row * cols_n..(row + 1) * cols_n];
                    for ni in 0..n {
                        let plane = &mut dx.data[((ci * n) + ni) * h * w..][..h * w];
                        for oy in 0..ho {
                            let iy = (oy * s + ky) as isize - pad;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let dst_row = &mut plane[iy as usize * w..][..w];
                            let src = &src_row[(ni * ho + oy) * wo..][..wo];
                            for (ox, v) in src.iter().enumerate() {
                                let ix = (ox * s + kx) as isize - pad;
                                if ix >= 0 && ix < w as isize {
                                    dst_row[ix as usize] += *v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, ps: &ParamSet, x: &Tensor) -> Tensor {
        debug_assert_eq!(x.c, self.cin);
        let (ho, wo) = self.out_hw(x.h, x.w);
        let cols = self.im2col(x, ho, wo);
        let mut y = Tensor::zeros(self.cout, x.n, ho, wo);
        let kk = self.cin * self.k * self.k;
        gemm(
            self.cout,
            kk,
            x.n * ho * wo,
            ps.get(self.weight),
            false,
            &cols,
            false,
            &mut y.data,
            false,
        );
        y
    }

    /// Accumulates the weight gradient and returns the input gradient when
    /// `need_dx` is set.
    pub fn backward(
        &self,
        ps: &ParamSet,
        x: &Tensor,
        dy: &Tensor,
        grads: &mut ParamSet,
        need_dx: bool,
    ) -> Option<Tensor> {
        let (ho, wo) = (dy.h, dy.w);
        let cols = self.im2col(x, ho, wo);
        let kk = self.cin * self.k * self.k;
        let m = x.n * ho * wo;
        gemm(
            self.cout,
            m,
            kk,
            &dy.data,
            false,
            &cols,
            true,
            grads.get_mut(self.weight),
            true,
        );
        if !need_dx {
            return None;
        }
        let mut dcols = cols;
        gemm(
            kk,
            self.cout,
            m,
            ps.get(self.weight),
            true,
            &dy.data,
            false,
            &mut dcols,
            false,
        );
        let mut dx = Tensor::zeros(x.c, x.n, x.h, x.w);
        self.col2im(&dcols, &mut dx, ho, wo);
        Some(dx)
    }
}

/// Per-channel batch normalization over `N x H x W`.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: usize,
    pub beta: usize,
    pub running_mean: usize,
    pub running_var: usize,
    pub c: usize,
}

#[derive(Debug, Clone)]
pub struct BnCache {
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
}

impl BatchNorm {
    pub fn declare(d: &mut impl Declare, name: &str, c: usize) -> Self {
        BatchNorm {
            gamma: d.declare(format!("{name}.weight"), vec![c], Init::Const(1.0), true),
            beta: d.declare(format!("{name}.bias"), vec![c], Init::Const(0.0), true),
            running_mean: d.declare(format!("{name}.running_mean"), vec![c], Init::Const(0.0), false),
            running_var: d.declare(format!("{name}.running_var"), vec![c], Init::Const(1.0), false),
            c,
        }
    }

    pub fn forward_eval(&self, ps: &ParamSet, x: &Tensor) -> Tensor {
        let plane = x.plane();
        let (g, b) = (ps.get(self.gamma), ps.get(self.beta));
        let (rm, rv) = (ps.get(self.running_mean), ps.get(self.running_var));
        let mut y = x.clone();
        for ch in 0..self.c {
            let scale = g[ch] / (rv[ch] + BN_EPS).sqrt();
            let shift = b[ch] - rm[ch] * scale;
            for v in &mut y.data[ch * plane..(ch + 1) * plane] {
                *v = *v * scale + shift;
            }
        }
        y
    }

    /// Normalizes with batch statistics and folds them into the running
    /// estimates.
    pub fn forward_train(&self, ps: &mut ParamSet, x: &Tensor) -> (Tensor, BnCache) {
        let plane = x.plane();
        let mut y = x.clone();
        let mut xhat = vec![0.0f32; x.data.len()];
        let mut inv_std = vec![0.0f32; self.c];
        let mut means = vec![0.0f32; self.c];
        let mut vars = vec![0.0f32; self.c];
        for ch in 0..self.c {
            let src = &x.data[ch * plane..(ch + 1) * plane];
            let mean = src.iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
            let var = src
                .iter()
                .map(|&v| {
                    let d = v as f64 - mean;
                    d * d
                })
                .sum::<f64>()
                / plane as f64;
            let istd = 1.0 / (var as f32 + BN_EPS).sqrt();
            inv_std[ch] = istd;
            means[ch] = mean as f32;
            vars[ch] = var as f32;
            let (g, b) = (ps.get(self.gamma)[ch], ps.get(self.beta)[ch]);
            let xh = &mut xhat[ch * plane..(ch + 1) * plane];
            let out = &mut y.data[ch * plane..(ch + 1) * plane];
            for ((o, h), &v) in out.iter_mut().zip(xh.iter_mut()).zip(src) {
                *h = (v - mean as f32) * istd;
                *o = g * *h + b;
            }
        }
        let unbias = if plane > 1 {
            plane as f32 / (plane as f32 - 1.0)
        } else {
            1.0
        };
        for (rm, m) in ps.get_mut(self.running_mean).iter_mut().zip(&means) {
            *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * m;
        }
        for (rv, v) in ps.get_mut(self.running_var).iter_mut().zip(&vars) {
            *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * v * unbias;
        }
        (y, BnCache { xhat, inv_std })
    }

    pub fn backward(&self, ps: &ParamSet, cache: &BnCache, dy: &Tensor, grads: &mut ParamSet) -> Tensor {
        let plane = dy.plane();
        let m = plane as f32;
        let gamma = ps.get(self.gamma);
        let mut dgamma = vec![0.0f32; self.c];
        let mut dbeta = vec![0.0f32; self.c];
        let mut dx = dy.clone();
        for ch in 0..self.c {
            let d = &dy.data[ch * plane..(ch + 1) * plane];
            let xh = &cache.xhat[ch * plane..(ch + 1) * plane];
            let (mut sum_d, mut sum_dx) = (0.0f64, 0.0f64);
            for (&dv, &h) in d.iter().zip(xh) {
                sum_d += dv as f64;
                sum_dx += (dv * h) as f64;
            }
            dbeta[ch] = sum_d as f32;
            dgamma[ch] = sum_dx as f32;
            let coef = gamma[ch] * cache.inv_std[ch] / m;
            let (sd, sdx) = (sum_d as f32, sum_dx as f32);
            for (o, (&dv, &h)) in dx.data[ch * plane..(ch + 1) * plane]
                .iter_mut()
                .zip(d.iter().zip(xh))
            {
                *o = coef * (m * dv - sd - h * sdx);
            }
        }
        for (g, v) in grads.get_mut(self.gamma).iter_mut().zip(&dgamma) {
            *g += v;
        }
        for (g, v) in grads.get_mut(self.beta).iter_mut().zip(&dbeta) {
            *g += v;
        }
        dx
    }
}

/// Dense layer on `D x N` activations (a tensor with `h = w = 1`).
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: usize,
    pub bias: usize,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn declare(d: &mut impl Declare, name: &str, din: usize, dout: usize) -> Self {
        let init = Init::Uniform {
            bound: 1.0 / (din as f32).sqrt(),
        };
        Linear {
            weight: d.declare(format!("{name}.weight"), vec![dout, din], init, true),
            bias: d.declare(format!("{name}.bias"), vec![dout], init, true),
            din,
            dout,
        }
    }

    pub fn forward(&self, ps: &ParamSet, x: &Tensor) -> Tensor {
        debug_assert_eq!(x.c, self.din);
        let n = x.n;
        let mut y = Tensor::zeros(self.dout, n, 1, 1);
        let bias = ps.get(self.bias);
        for (o, row) in y.data.chunks_exact_mut(n).enumerate() {
            row.iter_mut().for_each(|v| *v = bias[o]);
        }
        gemm(self.dout, self.din, n, ps.get(self.weight), false, &x.data, false, &mut y.data, true);
        y
    }

    pub fn backward(&self, ps: &ParamSet, x: &Tensor, dy: &Tensor, grads: &mut ParamSet) -> Tensor {
        let n = x.n;
        gemm(self.dout, n, self.din, &dy.data, false, &x.data, true, grads.get_mut(self.weight), true);
        for (g, row) in grads.get_mut(self.bias).iter_mut().zip(dy.data.chunks_exact(n)) {
            *g += row.iter().sum::<f32>();
        }
        let mut dx = Tensor::zeros(self.din, n, 1, 1);
        gemm(self.din, self.dout, n, ps.get(self.weight), true, &dy.data, false, &mut dx.data, false);
        dx
    }
}

pub fn relu_inplace(x: &mut Tensor) {
    x.data.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Zeroes `dy` wherever the forward output was not positive.
pub fn relu_backward_inplace(out: &Tensor, dy: &mut Tensor) {
    for (d, &o) in dy.data.iter_mut().zip(&out.data) {
        if o <= 0.0 {
            *d = 0.0;
        }
    }
}

/// Spatial mean per (channel, sample): `C x N x H x W -> C x N x 1 x 1`.
pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let hw = x.h * x.w;
    let data = x
        .data
        .chunks_exact(hw)
        .map(|c| c.iter().map(|&v| v as f64).sum::<f64>() as f32 / hw as f32)
        .collect();
    Tensor {
        c: x.c,
        n: x.n,
        h: 1,
        w: 1,
        data,
    }
}

pub fn global_avg_pool_backward(dy: &Tensor, h: usize, w: usize) -> Tensor {
    let hw = h * w;
    let scale = 1.0 / hw as f32;
    let mut data = Vec::with_capacity(dy.data.len() * hw);
    for &d in &dy.data {
        data.extend(std::iter::repeat_n(d * scale, hw));
    }
    Tensor {
        c: dy.c,
        n: dy.n,
        h,
        w,
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::params::Initializer;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn build<T>(rng: &mut ChaCha8Rng, f: impl FnOnce(&mut Initializer<'_, ChaCha8Rng>) -> T) -> (T, ParamSet) {
        let mut init = Initializer {
            params: ParamSet::new(),
            rng,
        };
        let layer = f(&mut init);
        (layer, init.params)
    }

    fn naive_conv(x: &Tensor, wts: &[f32], conv: &Conv2d) -> Tensor {
        let (ho, wo) = conv.out_hw(x.h, x.w);
        let mut y = Tensor::zeros(conv.cout, x.n, ho, wo);
        for co in 0..conv.cout {
            for ni in 0..x.n {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0f64;
                        for ci in 0..conv.cin {
                            for ky in 0..conv.k {
                                for kx in 0..conv.k {
                                    let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                                    let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                        continue;
                                    }
                                    let xv = x.data[((ci * x.n + ni) * x.h + iy as usize) * x.w + ix as usize];
                                    let wv = wts[((co * conv.cin + ci) * conv.k + ky) * conv.k + kx];
                                    acc += (xv * wv) as f64;
                                }
                            }
                        }
                        y.data[((co * x.n + ni) * ho + oy) * wo + ox] = acc as f32;
                    }
                }
            }
        }
        y
    }

    fn random_tensor(c: usize, n: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let mut t = Tensor::zeros(c, n, h, w);
        t.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        t
    }

    #[test]
    fn conv_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(k, stride) in &[(3, 1), (3, 2), (1, 2), (7, 1)] {
            let (conv, ps) = build(&mut rng, |d| Conv2d::declare(d, "c", 2, 3, k, stride));
            let x = random_tensor(2, 2, 7, 6, &mut rng);
            let fast = conv.forward(&ps, &x);
            let slow = naive_conv(&x, ps.get(conv.weight), &conv);
            assert_eq!((fast.h, fast.w), (slow.h, slow.w));
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-5, "k={k} s={stride}: {a} vs {b}");
            }
        }
    }

    /// Sum of `coef * output` as a scalar objective for gradient probes.
    fn dot(a: &Tensor, b: &Tensor) -> f64 {
        a.data.iter().zip(&b.data).map(|(&x, &y)| x as f64 * y as f64).sum()
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (conv, ps) = build(&mut rng, |d| Conv2d::declare(d, "c", 2, 3, 3, 2));
        let x = random_tensor(2, 2, 5, 5, &mut rng);
        let y = conv.forward(&ps, &x);
        let coef = random_tensor(y.c, y.n, y.h, y.w, &mut rng);
        let mut grads = ps.zeros_like();
        let dx = conv.backward(&ps, &x, &coef, &mut grads, true).unwrap();
        let eps = 1e-2f32;
        for i in [0usize, 7, 20, 49] {
            let mut xp = x.clone();
            xp.data[i] += eps;
            let mut xm = x.clone();
            xm.data[i] -= eps;
            let fd = (dot(&conv.forward(&ps, &xp), &coef) - dot(&conv.forward(&ps, &xm), &coef)) / (2.0 * eps as f64);
            assert!((fd - dx.data[i] as f64).abs() < 1e-3, "dx[{i}]: {fd} vs {}", dx.data[i]);
        }
        for i in [0usize, 11, 53] {
            let mut pp = ps.clone();
            pp.get_mut(conv.weight)[i] += eps;
            let mut pm = ps.clone();
            pm.get_mut(conv.weight)[i] -= eps;
            let fd = (dot(&conv.forward(&pp, &x), &coef) - dot(&conv.forward(&pm, &x), &coef)) / (2.0 * eps as f64);
            let an = grads.get(conv.weight)[i] as f64;
            assert!((fd - an).abs() < 1e-3, "dw[{i}]: {fd} vs {an}");
        }
    }

    #[test]
    fn batchnorm_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (bn, mut ps) = build(&mut rng, |d| BatchNorm::declare(d, "bn", 3));
        ps.get_mut(bn.gamma).copy_from_slice(&[0.5, 1.5, -0.7]);
        ps.get_mut(bn.beta).copy_from_slice(&[0.1, -0.2, 0.3]);
        let x = random_tensor(3, 4, 2, 2, &mut rng);
        let coef = random_tensor(3, 4, 2, 2, &mut rng);
        let mut work = ps.clone();
        let (_, cache) = bn.forward_train(&mut work, &x);
        let mut grads = ps.zeros_like();
        let dx = bn.backward(&ps, &cache, &coef, &mut grads);
        let eps = 1e-2f32;
        let objective = |ps: &ParamSet, x: &Tensor| {
            let mut scratch = ps.clone();
            dot(&bn.forward_train(&mut scratch, x).0, &coef)
        };
        for i in [0usize, 5, 17, 40, 47] {
            let mut xp = x.clone();
            xp.data[i] += eps;
            let mut xm = x.clone();
            xm.data[i] -= eps;
            let fd = (objective(&ps, &xp) - objective(&ps, &xm)) / (2.0 * eps as f64);
            assert!((fd - dx.data[i] as f64).abs() < 2e-3, "dx[{i}]: {fd} vs {}", dx.data[i]);
        }
        for ch in 0..3 {
            let mut pp = ps.clone();
            pp.get_mut(bn.gamma)[ch] += eps;
            let mut pm = ps.clone();
            pm.get_mut(bn.gamma)[ch] -= eps;
            let fd = (objective(&pp, &x) - objective(&pm, &x)) / (2.0 * eps as f64);
            assert!((fd - grads.get(bn.gamma)[ch] as f64).abs() < 1e-3);
        }
    }

    #[test]
    fn batchnorm_updates_running_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (bn, mut ps) = build(&mut rng, |d| BatchNorm::declare(d, "bn", 1));
        let x = Tensor {
            c: 1,
            n: 4,
            h: 1,
            w: 1,
            data: vec![1.0, 2.0, 3.0, 4.0],
        };
        bn.forward_train(&mut ps, &x);
        assert!((ps.get(bn.running_mean)[0] - 0.25).abs() < 1e-6);
        // unbiased variance 5/3
        assert!((ps.get(bn.running_var)[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-6);
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (lin, ps) = build(&mut rng, |d| Linear::declare(d, "fc", 4, 3));
        let x = random_tensor(4, 5, 1, 1, &mut rng);
        let coef = random_tensor(3, 5, 1, 1, &mut rng);
        let mut grads = ps.zeros_like();
        let dx = lin.backward(&ps, &x, &coef, &mut grads);
        let eps = 1e-2f32;
        for i in 0..20 {
            let mut xp = x.clone();
            xp.data[i] += eps;
            let mut xm = x.clone();
            xm.data[i] -= eps;
            let fd = (dot(&lin.forward(&ps, &xp), &coef) - dot(&lin.forward(&ps, &xm), &coef)) / (2.0 * eps as f64);
            assert!((fd - dx.data[i] as f64).abs() < 1e-3);
        }
        let expected_db: Vec<f32> = coef.data.chunks(5).map(|r| r.iter().sum()).collect();
        for (a, b) in grads.get(lin.bias).iter().zip(&expected_db) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn pooling_round_trip_shapes() {
        let x = Tensor {
            c: 2,
            n: 1,
            h: 2,
            w: 2,
            data: vec![1.0, 2.0, 3.0, 6.0, 0.0, 0.0, 0.0, 4.0],
        };
        let p = global_avg_pool(&x);
        assert_eq!(p.data, vec![3.0, 1.0]);
        let d = global_avg_pool_backward(&p, 2, 2);
        assert_eq!(d.data, vec![0.75, 0.75, 0.75, 0.75, 0.25, 0.25, 0.25, 0.25]);
    }
}

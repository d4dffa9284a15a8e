//! Minimal f32 layers with hand-written backward passes.
//!
//! All parameters of a network live in one flat vector; layers hold offsets
//! into it. Activations are channel-major `C×H×W` slices. Convolutions go
//! through im2col and a single-threaded GEMM, so results are bitwise
//! reproducible on a given machine.

use rand::Rng;
use rand_distr::{Distribution, Normal};

/// `c = alpha * op(a) * op(b) + beta * c` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (isize, isize),
    b: &[f32],
    (rsb, csb): (isize, isize),
    beta: f32,
    c: &mut [f32],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    debug_assert!(k == 0 || a.len() >= m * k && b.len() >= k * n);
    // SAFETY: the slices cover every index reachable with the given
    // dimensions and strides (checked by callers' shape bookkeeping).
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

/// Spatial extent of a `C×H×W` activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(c: usize, h: usize, w: usize) -> Self {
        Shape { c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Hands out consecutive parameter ranges while a network is being built.
#[derive(Debug, Default)]
pub struct ParamAllocator {
    len: usize,
}

impl ParamAllocator {
    fn take(&mut self, n: usize) -> usize {
        let off = self.len;
        self.len += n;
        off
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    w: usize,
    b: usize,
}

impl Conv2d {
    pub fn new(alloc: &mut ParamAllocator, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        let w = alloc.take(cout * cin * k * k);
        let b = alloc.take(cout);
        Conv2d {
            cin,
            cout,
            k,
            stride,
            pad: k / 2,
            w,
            b,
        }
    }

    pub fn param_range(&self) -> std::ops::Range<usize> {
        self.w..self.b + self.cout
    }

    pub fn out_shape(&self, s: Shape) -> Shape {
        let ho = (s.h + 2 * self.pad - self.k) / self.stride + 1;
        let wo = (s.w + 2 * self.pad - self.k) / self.stride + 1;
        Shape::new(self.cout, ho, wo)
    }

    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    /// He-normal weights, zero bias.
    pub fn init(&self, params: &mut [f32], rng: &mut impl Rng) {
        let fan_in = self.col_rows() as f32;
        he_normal(&mut params[self.w..self.b], fan_in, rng);
        params[self.b..self.b + self.cout].fill(0.0);
    }

    fn im2col(&self, x: &[f32], s: Shape, col: &mut Vec<f32>) -> Shape {
        let o = self.out_shape(s);
        let npix = o.h * o.w;
        col.clear();
        col.resize(self.col_rows() * npix, 0.0);
        let (k, st, pad) = (self.k, self.stride, self.pad as isize);
        for c in 0..s.c {
            let plane = &x[c * s.h * s.w..(c + 1) * s.h * s.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut col[row * npix..(row + 1) * npix];
                    for oy in 0..o.h {
                        let iy = (oy * st + ky) as isize - pad;
                        if iy < 0 || iy >= s.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * s.w..(iy as usize + 1) * s.w];
                        let drow = &mut dst[oy * o.w..(oy + 1) * o.w];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * st + kx) as isize - pad;
                            if ix >= 0 && ix < s.w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        o
    }

    fn col2im(&self, col: &[f32], s: Shape, dx: &mut [f32]) {
        let o = self.out_shape(s);
        let npix = o.h * o.w;
        dx.fill(0.0);
        let (k, st, pad) = (self.k, self.stride, self.pad as isize);
        for c in 0..s.c {
            let plane = &mut dx[c * s.h * s.w..(c + 1) * s.h * s.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &col[row * npix..(row + 1) * npix];
                    for oy in 0..o.h {
                        let iy = (oy * st + ky) as isize - pad;
                        if iy < 0 || iy >= s.h as isize {
                            continue;
                        }
                        let drow = &mut plane[iy as usize * s.w..(iy as usize + 1) * s.w];
                        for ox in 0..o.w {
                            let ix = (ox * st + kx) as isize - pad;
                            if ix >= 0 && ix < s.w as isize {
                                drow[ix as usize] += src[oy * o.w + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Writes the convolution of `x` into `out`, leaving the im2col buffer
    /// in `col` for the backward pass.
    pub fn forward(&self, params: &[f32], x: &[f32], s: Shape, col: &mut Vec<f32>, out: &mut Vec<f32>) -> Shape {
        debug_assert_eq!(s.c, self.cin);
        debug_assert_eq!(x.len(), s.len());
        let o = self.im2col(x, s, col);
        let npix = o.h * o.w;
        out.clear();
        out.resize(o.len(), 0.0);
        for (co, row) in out.chunks_exact_mut(npix).enumerate() {
            row.fill(params[self.b + co]);
        }
        let kk = self.col_rows();
        gemm(
            self.cout,
            kk,
            npix,
            &params[self.w..self.b],
            (kk as isize, 1),
            col,
            (npix as isize, 1),
            1.0,
            out,
        );
        o
    }

    /// Accumulates parameter gradients and, when `dx` is given, writes the
    /// input gradient. `col` must be the buffer left by `forward`.
    pub fn backward(
        &self,
        params: &[f32],
        grads: &mut [f32],
        col: &[f32],
        dout: &[f32],
        s: Shape,
        dx: Option<&mut [f32]>,
        scratch: &mut Vec<f32>,
    ) {
        let o = self.out_shape(s);
        let npix = o.h * o.w;
        let kk = self.col_rows();
        debug_assert_eq!(dout.len(), o.len());
        // dW (cout×kk) += dout (cout×npix) · colᵀ (npix×kk)
        gemm(
            self.cout,
            npix,
            kk,
            dout,
            (npix as isize, 1),
            col,
            (1, npix as isize),
            1.0,
            &mut grads[self.w..self.b],
        );
        for (co, row) in dout.chunks_exact(npix).enumerate() {
            grads[self.b + co] += row.iter().sum::<f32>();
        }
        if let Some(dx) = dx {
            // dcol (kk×npix) = Wᵀ (kk×cout) · dout (cout×npix)
            scratch.clear();
            scratch.resize(kk * npix, 0.0);
            gemm(
                kk,
                self.cout,
                npix,
                &params[self.w..self.b],
                (1, kk as isize),
                dout,
                (npix as isize, 1),
                0.0,
                scratch,
            );
            self.col2im(scratch, s, dx);
        }
    }
}

/// Fully connected layer, `y = W x + b` with `W` stored row-major `out×in`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub nin: usize,
    pub nout: usize,
    w: usize,
    b: usize,
}

impl Linear {
    pub fn new(alloc: &mut ParamAllocator, nin: usize, nout: usize) -> Self {
        let w = alloc.take(nin * nout);
        let b = alloc.take(nout);
        Linear { nin, nout, w, b }
    }

    pub fn param_range(&self) -> std::ops::Range<usize> {
        self.w..self.b + self.nout
    }

    pub fn init(&self, params: &mut [f32], rng: &mut impl Rng) {
        he_normal(&mut params[self.w..self.b], self.nin as f32, rng);
        params[self.b..self.b + self.nout].fill(0.0);
    }

    /// Rescales the weights, e.g. to start an output layer near zero.
    pub fn scale_weights(&self, params: &mut [f32], factor: f32) {
        for p in &mut params[self.w..self.b] {
            *p *= factor;
        }
    }

    pub fn forward(&self, params: &[f32], x: &[f32], out: &mut Vec<f32>) {
        debug_assert_eq!(x.len(), self.nin);
        out.clear();
        out.extend_from_slice(&params[self.b..self.b + self.nout]);
        gemm(
            self.nout,
            self.nin,
            1,
            &params[self.w..self.b],
            (self.nin as isize, 1),
            x,
            (1, 1),
            1.0,
            out,
        );
    }

    pub fn backward(&self, params: &[f32], grads: &mut [f32], x: &[f32], dout: &[f32], dx: Option<&mut [f32]>) {
        // dW += dout ⊗ x
        gemm(
            self.nout,
            1,
            self.nin,
            dout,
            (1, 1),
            x,
            (1, 1),
            1.0,
            &mut grads[self.w..self.b],
        );
        for (g, d) in grads[self.b..self.b + self.nout].iter_mut().zip(dout) {
            *g += d;
        }
        if let Some(dx) = dx {
            gemm(
                self.nin,
                self.nout,
                1,
                &params[self.w..self.b],
                (1, self.nin as isize),
                dout,
                (1, 1),
                0.0,
                dx,
            );
        }
    }
}

fn he_normal(w: &mut [f32], fan_in: f32, rng: &mut impl Rng) {
    let normal = Normal::new(0.0f32, (2.0 / fan_in).sqrt()).expect("positive std");
    for p in w {
        *p = normal.sample(rng);
    }
}

pub fn relu_inplace(x: &mut [f32]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes `grad` wherever the (post-activation) output was not positive.
pub fn relu_backward(out: &[f32], grad: &mut [f32]) {
    for (g, &y) in grad.iter_mut().zip(out) {
        if y <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2(x: &[f32], s: Shape, out: &mut Vec<f32>) -> Shape {
    let o = Shape::new(s.c, s.h * 2, s.w * 2);
    out.clear();
    out.resize(o.len(), 0.0);
    for c in 0..s.c {
        for y in 0..o.h {
            let src = &x[(c * s.h + y / 2) * s.w..(c * s.h + y / 2 + 1) * s.w];
            let dst = &mut out[(c * o.h + y) * o.w..(c * o.h + y + 1) * o.w];
            for (xo, d) in dst.iter_mut().enumerate() {
                *d = src[xo / 2];
            }
        }
    }
    o
}

/// Gradient of [`upsample2`]: sums each 2×2 block.
pub fn upsample2_backward(dout: &[f32], s: Shape, dx: &mut [f32]) {
    let (oh, ow) = (s.h * 2, s.w * 2);
    dx.fill(0.0);
    for c in 0..s.c {
        for y in 0..oh {
            let src = &dout[(c * oh + y) * ow..(c * oh + y + 1) * ow];
            let dst = &mut dx[(c * s.h + y / 2) * s.w..(c * s.h + y / 2 + 1) * s.w];
            for (xo, g) in src.iter().enumerate() {
                dst[xo / 2] += g;
            }
        }
    }
}

/// 2×2 average pooling with stride 2.
pub fn avgpool2(x: &[f32], s: Shape, out: &mut Vec<f32>) -> Shape {
    let o = Shape::new(s.c, s.h / 2, s.w / 2);
    out.clear();
    out.resize(o.len(), 0.0);
    for c in 0..s.c {
        for y in 0..o.h {
            for xo in 0..o.w {
                let i = (c * s.h + 2 * y) * s.w + 2 * xo;
                out[(c * o.h + y) * o.w + xo] = 0.25 * (x[i] + x[i + 1] + x[i + s.w] + x[i + s.w + 1]);
            }
        }
    }
    o
}

pub fn avgpool2_backward(dout: &[f32], s: Shape, dx: &mut [f32]) {
    let o = Shape::new(s.c, s.h / 2, s.w / 2);
    dx.fill(0.0);
    for c in 0..s.c {
        for y in 0..o.h {
            for xo in 0..o.w {
                let g = 0.25 * dout[(c * o.h + y) * o.w + xo];
                let i = (c * s.h + 2 * y) * s.w + 2 * xo;
                dx[i] += g;
                dx[i + 1] += g;
                dx[i + s.w] += g;
                dx[i + s.w + 1] += g;
            }
        }
    }
}

/// Adam with bias correction and the usual moment constants.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub step: u64,
    m: Vec<f32>,
    v: Vec<f32>,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    /// One update of `params` from `grads`, skipping entries whose index
    /// lies in a frozen range.
    pub fn update(&mut self, params: &mut [f32], grads: &[f32], lr: f32, frozen: &[std::ops::Range<usize>]) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let step = lr * c2.sqrt() / c1;
        let eps = self.eps * c2.sqrt();
        let mut ranges: Vec<_> = frozen.iter().filter(|r| !r.is_empty()).cloned().collect();
        ranges.sort_by_key(|r| r.start);
        let mut start = 0;
        for r in ranges.iter().chain(std::iter::once(&(params.len()..params.len()))) {
            for j in start..r.start.max(start) {
                let g = grads[j];
                let m = self.beta1 * self.m[j] + (1.0 - self.beta1) * g;
                let v = self.beta2 * self.v[j] + (1.0 - self.beta2) * g * g;
                self.m[j] = m;
                self.v[j] = v;
                params[j] -= step * m / (v.sqrt() + eps);
            }
            start = start.max(r.end);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Naive direct convolution used as the reference.
    fn conv_ref(conv: &Conv2d, params: &[f32], x: &[f32], s: Shape) -> Vec<f32> {
        let o = conv.out_shape(s);
        let mut out = vec![0.0f64; o.len()];
        for co in 0..o.c {
            for oy in 0..o.h {
                for ox in 0..o.w {
                    let mut acc = params[conv.b + co] as f64;
                    for ci in 0..s.c {
                        for ky in 0..conv.k {
                            for kx in 0..conv.k {
                                let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                                let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                                if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                                    continue;
                                }
                                let wi = conv.w + ((co * s.c + ci) * conv.k + ky) * conv.k + kx;
                                acc += params[wi] as f64 * x[(ci * s.h + iy as usize) * s.w + ix as usize] as f64;
                            }
                        }
                    }
                    out[(co * o.h + oy) * o.w + ox] = acc;
                }
            }
        }
        out.into_iter().map(|v| v as f32).collect()
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(cin, cout, k, stride, h) in &[(3, 4, 3, 1, 7), (2, 5, 3, 2, 8), (4, 3, 1, 1, 5), (3, 2, 3, 2, 7)] {
            let mut alloc = ParamAllocator::default();
            let conv = Conv2d::new(&mut alloc, cin, cout, k, stride);
            let params = rand_vec(alloc.len(), &mut rng);
            let s = Shape::new(cin, h, h + 1);
            let x = rand_vec(s.len(), &mut rng);
            let (mut col, mut out) = (Vec::new(), Vec::new());
            let o = conv.forward(&params, &x, s, &mut col, &mut out);
            assert_eq!(o, conv.out_shape(s));
            let r = conv_ref(&conv, &params, &x, s);
            for (a, b) in out.iter().zip(&r) {
                assert!((a - b).abs() < 1e-5, "{a} vs {b}");
            }
        }
    }

    /// Finite-difference check of a scalar objective `sum(out * probe)`.
    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut alloc = ParamAllocator::default();
        let conv = Conv2d::new(&mut alloc, 2, 3, 3, 2);
        let params: Vec<f32> = rand_vec(alloc.len(), &mut rng);
        let s = Shape::new(2, 6, 5);
        let x = rand_vec(s.len(), &mut rng);
        let probe = rand_vec(conv.out_shape(s).len(), &mut rng);
        let objective = |p: &[f32], x: &[f32]| -> f64 {
            conv_ref(&conv, p, x, s).iter().zip(&probe).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };
        let (mut col, mut out, mut scratch) = (Vec::new(), Vec::new(), Vec::new());
        conv.forward(&params, &x, s, &mut col, &mut out);
        let mut grads = vec![0.0; params.len()];
        let mut dx = vec![0.0; x.len()];
        conv.backward(&params, &mut grads, &col, &probe, s, Some(&mut dx), &mut scratch);
        let h = 1e-2f32;
        for i in 0..params.len() {
            let (mut p1, mut p0) = (params.clone(), params.clone());
            p1[i] += h;
            p0[i] -= h;
            let fd = (objective(&p1, &x) - objective(&p0, &x)) / (2.0 * h as f64);
            assert!((fd - grads[i] as f64).abs() < 1e-3, "param {i}: {fd} vs {}", grads[i]);
        }
        for i in 0..x.len() {
            let (mut x1, mut x0) = (x.clone(), x.clone());
            x1[i] += h;
            x0[i] -= h;
            let fd = (objective(&params, &x1) - objective(&params, &x0)) / (2.0 * h as f64);
            assert!((fd - dx[i] as f64).abs() < 1e-3, "input {i}: {fd} vs {}", dx[i]);
        }
    }

    #[test]
    fn linear_forward_and_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut alloc = ParamAllocator::default();
        let fc = Linear::new(&mut alloc, 5, 3);
        let params = rand_vec(alloc.len(), &mut rng);
        let x = rand_vec(5, &mut rng);
        let mut y = Vec::new();
        fc.forward(&params, &x, &mut y);
        for o in 0..3 {
            let want: f32 = params[fc.b + o] + (0..5).map(|i| params[fc.w + o * 5 + i] * x[i]).sum::<f32>();
            assert!((y[o] - want).abs() < 1e-6);
        }
        let dout = [1.0, -2.0, 0.5];
        let mut grads = vec![0.0; params.len()];
        let mut dx = vec![0.0; 5];
        fc.backward(&params, &mut grads, &x, &dout, Some(&mut dx));
        for o in 0..3 {
            assert_eq!(grads[fc.b + o], dout[o]);
            for i in 0..5 {
                assert!((grads[fc.w + o * 5 + i] - dout[o] * x[i]).abs() < 1e-6);
            }
        }
        for i in 0..5 {
            let want: f32 = (0..3).map(|o| params[fc.w + o * 5 + i] * dout[o]).sum();
            assert!((dx[i] - want).abs() < 1e-6);
        }
    }

    #[test]
    fn upsample_and_pool_are_adjoint_shaped() {
        let s = Shape::new(2, 3, 4);
        let x: Vec<f32> = (0..s.len()).map(|i| i as f32).collect();
        let mut up = Vec::new();
        let o = upsample2(&x, s, &mut up);
        assert_eq!(o, Shape::new(2, 6, 8));
        assert_eq!(up[0], 0.0);
        assert_eq!(up[1], 0.0);
        assert_eq!(up[8], 0.0);
        assert_eq!(up[2], 1.0);
        let mut pooled = Vec::new();
        avgpool2(&up, o, &mut pooled);
        assert_eq!(pooled, x);
        let mut dx = vec![0.0; s.len()];
        upsample2_backward(&vec![1.0; o.len()], s, &mut dx);
        assert!(dx.iter().all(|&g| g == 4.0));
        let mut dp = vec![0.0; o.len()];
        avgpool2_backward(&vec![1.0; s.len()], o, &mut dp);
        assert!(dp.iter().all(|&g| g == 0.25));
    }

    #[test]
    fn adam_skips_frozen_ranges_and_descends() {
        let mut params = vec![1.0f32; 6];
        let grads = vec![1.0f32; 6];
        let mut adam = Adam::new(6);
        adam.update(&mut params, &grads, 0.1, &[2..4]);
        assert_eq!(&params[2..4], &[1.0, 1.0]);
        for &i in &[0, 1, 4, 5] {
            assert!((params[i] - 0.9).abs() < 1e-5);
        }
    }
}

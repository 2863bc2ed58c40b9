//! Minimal CPU layers with hand-written backward passes.
//!
//! Everything works on a single sample (`C x H x W`); batches are loops that
//! accumulate into a gradient buffer of the same shape as the parameters.
//! Layers are generic over `f32` (training) and `f64` (gradient checks).

use ndarray::{Array1, Array2, Array3, Array4, Axis, LinalgScalar, NdFloat};
use num_traits::FromPrimitive;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub trait Scalar: NdFloat + FromPrimitive + LinalgScalar + Default {}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[inline]
pub(crate) fn cast<F: Scalar>(v: f64) -> F {
    F::from_f64(v).expect("finite cast")
}

/// `k x k` convolution, stride 1, zero padding `k / 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<F> {
    /// `out x in x k x k`
    pub weight: Array4<F>,
    pub bias: Array1<F>,
}

impl<F: Scalar> Conv2d<F> {
    pub fn zeros(cin: usize, cout: usize, k: usize) -> Self {
        assert!(k % 2 == 1, "odd kernels only");
        Self {
            weight: Array4::zeros((cout, cin, k, k)),
            bias: Array1::zeros(cout),
        }
    }

    /// He-normal weights, zero bias.
    pub fn init(&mut self, rng: &mut impl Rng) {
        let (_, cin, k, _) = self.weight.dim();
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        self.weight.mapv_inplace(|_| {
            let z: f64 = StandardNormal.sample(rng);
            cast(z * std)
        });
        self.bias.fill(F::zero());
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim().2
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    fn weight_matrix(&self) -> ndarray::ArrayView2<'_, F> {
        let (o, i, k, _) = self.weight.dim();
        self.weight
            .view()
            .into_shape_with_order((o, i * k * k))
            .expect("standard layout")
    }

    /// Returns the output and the unfolded input kept for the backward pass.
    pub fn forward(&self, x: &Array3<F>) -> (Array3<F>, Array2<F>) {
        let (_, h, w) = x.dim();
        let cols = im2col(x, self.kernel());
        let mut y = self.weight_matrix().dot(&cols);
        for (mut row, &b) in y.axis_iter_mut(Axis(0)).zip(self.bias.iter()) {
            row.mapv_inplace(|v| v + b);
        }
        let y = y
            .into_shape_with_order((self.out_channels(), h, w))
            .expect("contiguous");
        (y, cols)
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, cols: &Array2<F>, dy: &Array3<F>, cin: usize, grad: &mut Self) -> Array3<F> {
        let (cout, h, w) = dy.dim();
        let dy2 = dy
            .view()
            .into_shape_with_order((cout, h * w))
            .expect("contiguous");
        let k = self.kernel();
        {
            let mut gw = grad
                .weight
                .view_mut()
                .into_shape_with_order((cout, cin * k * k))
                .expect("standard layout");
            ndarray::linalg::general_mat_mul(F::one(), &dy2, &cols.t(), F::one(), &mut gw);
        }
        grad.bias += &dy2.sum_axis(Axis(1));
        let dcols = self.weight_matrix().t().dot(&dy2);
        col2im(&dcols, cin, h, w, k)
    }
}

pub(crate) fn im2col<F: Scalar>(x: &Array3<F>, k: usize) -> Array2<F> {
    let (c, h, w) = x.dim();
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut cols = Array2::<F>::zeros((c * k * k, hw));
    let cs = cols.as_slice_mut().expect("fresh array");
    for ci in 0..c {
        let plane = &xs[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            let dy = ky as isize - pad;
            for kx in 0..k {
                let dx = kx as isize - pad;
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cs[row * hw..(row + 1) * hw];
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let sx0 = (x0 as isize + dx) as usize;
                    dst[y * w + x0..y * w + x1].copy_from_slice(&src[sx0..sx0 + (x1 - x0)]);
                }
            }
        }
    }
    cols
}

pub(crate) fn col2im<F: Scalar>(cols: &Array2<F>, c: usize, h: usize, w: usize, k: usize) -> Array3<F> {
    let cols = cols.as_standard_layout();
    let cs = cols.as_slice().expect("standard layout");
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut out = Array3::<F>::zeros((c, h, w));
    let os = out.as_slice_mut().expect("fresh array");
    for ci in 0..c {
        for ky in 0..k {
            let dy = ky as isize - pad;
            for kx in 0..k {
                let dx = kx as isize - pad;
                let row = (ci * k + ky) * k + kx;
                let src = &cs[row * hw..(row + 1) * hw];
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let base = ci * hw + sy as usize * w;
                    let sx0 = (x0 as isize + dx) as usize;
                    let dst = &mut os[base + sx0..base + sx0 + (x1 - x0)];
                    for (d, &s) in dst.iter_mut().zip(&src[y * w + x0..y * w + x1]) {
                        *d += s;
                    }
                }
            }
        }
    }
    out
}

/// Fully connected layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<F> {
    /// `out x in`
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: Scalar> Linear<F> {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((output, input)),
            bias: Array1::zeros(output),
        }
    }

    pub fn init(&mut self, rng: &mut impl Rng) {
        let std = (2.0 / self.weight.dim().1 as f64).sqrt();
        self.weight.mapv_inplace(|_| {
            let z: f64 = StandardNormal.sample(rng);
            cast(z * std)
        });
        self.bias.fill(F::zero());
    }

    pub fn forward(&self, x: &Array1<F>) -> Array1<F> {
        self.weight.dot(x) + &self.bias
    }

    pub fn backward(&self, x: &Array1<F>, dy: &Array1<F>, grad: &mut Self) -> Array1<F> {
        let outer = dy
            .view()
            .insert_axis(Axis(1))
            .dot(&x.view().insert_axis(Axis(0)));
        grad.weight += &outer;
        grad.bias += dy;
        self.weight.t().dot(dy)
    }
}

pub fn relu<F: Scalar, D: ndarray::Dimension>(x: ndarray::Array<F, D>) -> ndarray::Array<F, D> {
    x.mapv_into(|v| if v > F::zero() { v } else { F::zero() })
}

/// Gradient through ReLU given its output.
pub fn relu_backward<F: Scalar, D: ndarray::Dimension>(
    y: &ndarray::Array<F, D>,
    dy: ndarray::Array<F, D>,
) -> ndarray::Array<F, D> {
    let mut dx = dy;
    ndarray::Zip::from(&mut dx).and(y).for_each(|d, &o| {
        if o <= F::zero() {
            *d = F::zero();
        }
    });
    dx
}

pub fn sigmoid<F: Scalar>(v: F) -> F {
    if v >= F::zero() {
        F::one() / (F::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (F::one() + e)
    }
}

pub fn sigmoid_array<F: Scalar, D: ndarray::Dimension>(x: ndarray::Array<F, D>) -> ndarray::Array<F, D> {
    x.mapv_into(sigmoid)
}

/// Gradient through a sigmoid given its output.
pub fn sigmoid_backward<F: Scalar, D: ndarray::Dimension>(
    y: &ndarray::Array<F, D>,
    dy: ndarray::Array<F, D>,
) -> ndarray::Array<F, D> {
    let mut dx = dy;
    ndarray::Zip::from(&mut dx)
        .and(y)
        .for_each(|d, &o| *d = *d * o * (F::one() - o));
    dx
}

/// 2x2 max pooling, stride 2, no padding (odd trailing rows/columns dropped).
/// Returns the flat argmax index of every output cell.
pub fn maxpool2<F: Scalar>(x: &Array3<F>) -> (Array3<F>, Vec<usize>) {
    let (c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array3::zeros((c, oh, ow));
    let mut idx = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = (2 * y, 2 * xx);
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let p = (2 * y + dy, 2 * xx + dx);
                    if x[[ci, p.0, p.1]] > x[[ci, best.0, best.1]] {
                        best = p;
                    }
                }
                out[[ci, y, xx]] = x[[ci, best.0, best.1]];
                idx.push((ci * h + best.0) * w + best.1);
            }
        }
    }
    (out, idx)
}

pub fn maxpool2_backward<F: Scalar>(dy: &Array3<F>, idx: &[usize], input_dims: (usize, usize, usize)) -> Array3<F> {
    let mut dx = Array3::<F>::zeros(input_dims);
    let ds = dx.as_slice_mut().expect("fresh array");
    for (&i, &g) in idx.iter().zip(dy.iter()) {
        ds[i] += g;
    }
    dx
}

/// Nearest-neighbor 2x enlargement.
pub fn upsample2<F: Scalar>(x: &Array3<F>) -> Array3<F> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, 2 * h, 2 * w), |(ci, y, xx)| x[[ci, y / 2, xx / 2]])
}

pub fn upsample2_backward<F: Scalar>(dy: &Array3<F>) -> Array3<F> {
    let (c, h2, w2) = dy.dim();
    let mut dx = Array3::<F>::zeros((c, h2 / 2, w2 / 2));
    for ((ci, y, xx), &g) in dy.indexed_iter() {
        dx[[ci, y / 2, xx / 2]] += g;
    }
    dx
}

/// Flushes subnormal `f32`/`f64` results to zero on the current thread while
/// alive. Subnormals are far slower than normal floats on x86 and show up once
/// saturated sigmoids push gradients toward zero.
pub struct FlushSubnormals {
    #[cfg(target_arch = "x86_64")]
    saved: u32,
}

impl FlushSubnormals {
    #[cfg(target_arch = "x86_64")]
    #[allow(deprecated)]
    pub fn new() -> Self {
        use std::arch::x86_64::{_mm_getcsr, _mm_setcsr};
        const FTZ: u32 = 1 << 15;
        const DAZ: u32 = 1 << 6;
        // SAFETY: SSE is baseline on x86_64; only the FTZ and DAZ bits change.
        let saved = unsafe { _mm_getcsr() };
        unsafe { _mm_setcsr(saved | FTZ | DAZ) };
        Self { saved }
    }

    #[cfg(not(target_arch = "x86_64"))]
    pub fn new() -> Self {
        Self {}
    }
}

impl Default for FlushSubnormals {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for FlushSubnormals {
    #[allow(deprecated)]
    fn drop(&mut self) {
        #[cfg(target_arch = "x86_64")]
        // SAFETY: restores the control word read in `new`.
        unsafe {
            std::arch::x86_64::_mm_setcsr(self.saved)
        };
    }
}

/// Adam with L2-style weight decay folded into the gradient.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. `params` and `grads` list the same tensors in the same order.
    pub fn update<F: Scalar>(&mut self, params: Vec<&mut [F]>, grads: Vec<&[F]>) {
        assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (t, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[t], &mut self.v[t]);
            for i in 0..p.len() {
                let pi = p[i].to_f64().unwrap_or(0.0);
                let gi = g[i].to_f64().unwrap_or(0.0) + self.weight_decay * pi;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] = cast(pi - self.lr * mhat / (vhat.sqrt() + self.eps));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(x: &Array3<f64>, c: &Conv2d<f64>) -> Array3<f64> {
        let (cin, h, w) = x.dim();
        let (cout, _, k, _) = c.weight.dim();
        let pad = (k / 2) as isize;
        Array3::from_shape_fn((cout, h, w), |(o, y, xx)| {
            let mut acc = c.bias[o];
            for i in 0..cin {
                for ky in 0..k {
                    for kx in 0..k {
                        let sy = y as isize + ky as isize - pad;
                        let sx = xx as isize + kx as isize - pad;
                        if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                            acc += c.weight[[o, i, ky, kx]] * x[[i, sy as usize, sx as usize]];
                        }
                    }
                }
            }
            acc
        })
    }

    fn random3(rng: &mut ChaCha8Rng, d: (usize, usize, usize)) -> Array3<f64> {
        Array3::from_shape_fn(d, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn conv_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for k in [1, 3, 5] {
            let mut c = Conv2d::<f64>::zeros(3, 4, k);
            c.init(&mut rng);
            c.bias.mapv_inplace(|_| rng.gen_range(-0.5..0.5));
            let x = random3(&mut rng, (3, 5, 7));
            let (y, _) = c.forward(&x);
            let n = naive_conv(&x, &c);
            for (a, b) in y.iter().zip(n.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut c = Conv2d::<f64>::zeros(2, 3, 3);
        c.init(&mut rng);
        let x = random3(&mut rng, (2, 4, 5));
        let r = random3(&mut rng, (3, 4, 5));
        let loss = |c: &Conv2d<f64>, x: &Array3<f64>| (&c.forward(x).0 * &r).sum();
        let (_, cols) = c.forward(&x);
        let mut g = Conv2d::zeros(2, 3, 3);
        let dx = c.backward(&cols, &r, 2, &mut g);
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[i] += h;
            xm.as_slice_mut().unwrap()[i] -= h;
            let fd = (loss(&c, &xp) - loss(&c, &xm)) / (2.0 * h);
            assert!((fd - dx.as_slice().unwrap()[i]).abs() < 1e-6);
        }
        for i in 0..c.weight.len() {
            let mut cp = c.clone();
            let mut cm = c.clone();
            cp.weight.as_slice_mut().unwrap()[i] += h;
            cm.weight.as_slice_mut().unwrap()[i] -= h;
            let fd = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * h);
            assert!((fd - g.weight.as_slice().unwrap()[i]).abs() < 1e-6);
        }
        for o in 0..3 {
            assert!((g.bias[o] - r.index_axis(Axis(0), o).sum()).abs() < 1e-9);
        }
    }

    #[test]
    fn linear_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut l = Linear::<f64>::zeros(4, 3);
        l.init(&mut rng);
        let x = Array1::from_shape_fn(4, |_| rng.gen_range(-1.0..1.0));
        let dy = Array1::from_vec(vec![1.0, -2.0, 0.5]);
        let mut g = Linear::zeros(4, 3);
        let dx = l.backward(&x, &dy, &mut g);
        assert_eq!(dx, l.weight.t().dot(&dy));
        assert_eq!(g.weight[[1, 2]], -2.0 * x[2]);
        assert_eq!(g.bias, dy);
    }

    #[test]
    fn pool_and_upsample_roundtrip_shapes() {
        let x = Array3::from_shape_fn((2, 5, 4), |(c, y, x)| (c * 20 + y * 4 + x) as f64);
        let (p, idx) = maxpool2(&x);
        assert_eq!(p.dim(), (2, 2, 2));
        assert_eq!(p[[0, 0, 0]], 5.0);
        let g = maxpool2_backward(&Array3::from_elem((2, 2, 2), 1.0), &idx, x.dim());
        assert_eq!(g.sum(), 8.0);
        assert_eq!(g[[0, 1, 1]], 1.0);

        let u = upsample2(&p);
        assert_eq!(u.dim(), (2, 4, 4));
        assert_eq!(upsample2_backward(&Array3::<f64>::ones((2, 4, 4))), Array3::from_elem((2, 2, 2), 4.0));
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!(sigmoid(-1000.0f64) >= 0.0);
        assert!(sigmoid(1000.0f64) <= 1.0);
        assert!((sigmoid(2.0f64) + sigmoid(-2.0f64) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![1.0f64, -1.0];
        let g = vec![0.5f64, -3.0];
        let mut opt = Adam::new(0.1, 0.9, 0.999, 0.0);
        opt.update(vec![p.as_mut_slice()], vec![g.as_slice()]);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 0.9).abs() < 1e-6);
        assert_eq!(opt.steps(), 1);
    }
}

//! Small layer kit with hand-written backprop: 2D convolution via
//! im2col + GEMM, dense layers, group normalization, nearest upsampling,
//! low-rank adapters, and an Adam optimizer over named flat parameters.
//!
//! Layers process one sample at a time; batching is an outer loop that sums
//! per-sample gradient stores in a fixed order, which keeps training
//! bit-deterministic no matter how the batch is parallelized.

use indexmap::IndexMap;
use ndarray::{Array1, Array2, Array3};

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn silu_prime(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Named flat gradients, accumulated across samples in deterministic order.
#[derive(Debug, Clone, Default)]
pub struct GradStore {
    pub entries: IndexMap<String, Vec<f64>>,
}

impl GradStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn accumulate(&mut self, name: &str, grad: &[f64]) {
        match self.entries.get_mut(name) {
            Some(acc) => {
                debug_assert_eq!(acc.len(), grad.len());
                for (a, g) in acc.iter_mut().zip(grad) {
                    *a += g;
                }
            }
            None => {
                self.entries.insert(name.to_string(), grad.to_vec());
            }
        }
    }

    pub fn merge(&mut self, other: &GradStore) {
        for (name, grad) in &other.entries {
            self.accumulate(name, grad);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for grad in self.entries.values_mut() {
            for g in grad.iter_mut() {
                *g *= s;
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.entries.get(name).map(|v| v.as_slice())
    }
}

/// Rank-r additive update `B (out x r) * A (r x in)` on a weight matrix.
/// B starts at zero so a freshly attached adapter is exactly inert.
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
}

impl LoraAdapter {
    pub fn new(out_dim: usize, in_dim: usize, rank: usize, rng: &mut impl rand::Rng) -> Self {
        let a = Array2::from_shape_fn((rank, in_dim), |_| {
            rng.sample::<f64, _>(rand_distr::StandardNormal) * 0.02
        });
        let b = Array2::zeros((out_dim, rank));
        Self { a, b }
    }

    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    pub fn delta(&self) -> Array2<f64> {
        self.b.dot(&self.a)
    }

    pub fn param_count(&self) -> usize {
        self.a.len() + self.b.len()
    }
}

/// Dense layer on vectors: `y = W_eff x + b` with `W_eff = W + BA` when an
/// adapter is attached.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub adapter: Option<LoraAdapter>,
}

impl Linear {
    pub fn new(out_dim: usize, in_dim: usize, rng: &mut impl rand::Rng) -> Self {
        let std = (2.0 / in_dim as f64).sqrt();
        Self {
            w: Array2::from_shape_fn((out_dim, in_dim), |_| {
                rng.sample::<f64, _>(rand_distr::StandardNormal) * std
            }),
            b: Array1::zeros(out_dim),
            adapter: None,
        }
    }

    pub fn effective_weight(&self) -> Array2<f64> {
        match &self.adapter {
            Some(ad) => &self.w + &ad.delta(),
            None => self.w.clone(),
        }
    }

    pub fn forward(&self, x: &Array1<f64>) -> Array1<f64> {
        self.effective_weight().dot(x) + &self.b
    }

    /// Returns dx; writes parameter gradients under `prefix`.
    pub fn backward(
        &self,
        x: &Array1<f64>,
        dy: &Array1<f64>,
        prefix: &str,
        grads: &mut GradStore,
    ) -> Array1<f64> {
        let w_eff = self.effective_weight();
        let dx = w_eff.t().dot(dy);
        // dW_eff = dy (x)^T, rank-1.
        let dw = Array2::from_shape_fn((dy.len(), x.len()), |(i, j)| dy[i] * x[j]);
        grads.accumulate(&format!("{prefix}.w"), dw.as_slice().expect("contiguous"));
        grads.accumulate(&format!("{prefix}.b"), dy.as_slice().expect("contiguous"));
        if let Some(ad) = &self.adapter {
            let da = ad.b.t().dot(&dw);
            let db = dw.dot(&ad.a.t());
            grads.accumulate(&format!("{prefix}.lora_a"), da.as_slice().expect("contiguous"));
            grads.accumulate(&format!("{prefix}.lora_b"), db.as_slice().expect("contiguous"));
        }
        dx
    }
}

/// 2D convolution with square kernel, zero padding, and row-major
/// `(cout, cin*k*k)` weights so the adapter algebra matches [`Linear`].
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub adapter: Option<LoraAdapter>,
}

impl Conv2d {
    pub fn new(
        cout: usize,
        cin: usize,
        k: usize,
        stride: usize,
        rng: &mut impl rand::Rng,
    ) -> Self {
        let fan_in = (cin * k * k) as f64;
        let std = (2.0 / fan_in).sqrt();
        Self {
            w: Array2::from_shape_fn((cout, cin * k * k), |_| {
                rng.sample::<f64, _>(rand_distr::StandardNormal) * std
            }),
            b: Array1::zeros(cout),
            cin,
            cout,
            k,
            stride,
            pad: k / 2,
            adapter: None,
        }
    }

    pub fn effective_weight(&self) -> Array2<f64> {
        match &self.adapter {
            Some(ad) => &self.w + &ad.delta(),
            None => self.w.clone(),
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    pub fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        let (_, h, w) = x.dim();
        let (oh, ow) = self.out_size(h, w);
        let cols = im2col(x, self.k, self.stride, self.pad, oh, ow);
        let w_eff = self.effective_weight();
        let y = cols.dot(&w_eff.t()); // (oh*ow, cout)
        let mut out = Array3::zeros((self.cout, oh, ow));
        for c in 0..self.cout {
            for i in 0..oh * ow {
                out[[c, i / ow, i % ow]] = y[[i, c]] + self.b[c];
            }
        }
        out
    }

    /// Returns dx; writes parameter gradients under `prefix`. Recomputes
    /// im2col from the cached input rather than storing the column matrix.
    pub fn backward(
        &self,
        x: &Array3<f64>,
        dy: &Array3<f64>,
        prefix: &str,
        grads: &mut GradStore,
    ) -> Array3<f64> {
        let (_, h, w) = x.dim();
        let (_, oh, ow) = dy.dim();
        let cols = im2col(x, self.k, self.stride, self.pad, oh, ow);
        // dy as (oh*ow, cout)
        let mut dy_mat = Array2::zeros((oh * ow, self.cout));
        for c in 0..self.cout {
            for i in 0..oh * ow {
                dy_mat[[i, c]] = dy[[c, i / ow, i % ow]];
            }
        }
        let dw = dy_mat.t().dot(&cols); // (cout, cin*k*k)
        let db = dy_mat.sum_axis(ndarray::Axis(0));
        grads.accumulate(&format!("{prefix}.w"), dw.as_slice().expect("contiguous"));
        grads.accumulate(
            &format!("{prefix}.b"),
            db.as_slice().expect("contiguous"),
        );
        if let Some(ad) = &self.adapter {
            let da = ad.b.t().dot(&dw);
            let db_lora = dw.dot(&ad.a.t());
            grads.accumulate(&format!("{prefix}.lora_a"), da.as_slice().expect("contiguous"));
            grads.accumulate(
                &format!("{prefix}.lora_b"),
                db_lora.as_slice().expect("contiguous"),
            );
        }
        let w_eff = self.effective_weight();
        let dcols = dy_mat.dot(&w_eff); // (oh*ow, cin*k*k)
        col2im(&dcols, self.cin, h, w, self.k, self.stride, self.pad, oh, ow)
    }
}

fn im2col(
    x: &Array3<f64>,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<f64> {
    let (cin, h, w) = x.dim();
    let mut cols = Array2::zeros((oh * ow, cin * k * k));
    for oy in 0..oh {
        for ox in 0..ow {
            let row = oy * ow + ox;
            for c in 0..cin {
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[[row, c * k * k + ky * k + kx]] = x[[c, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    dcols: &Array2<f64>,
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array3<f64> {
    let mut dx = Array3::zeros((cin, h, w));
    for oy in 0..oh {
        for ox in 0..ow {
            let row = oy * ow + ox;
            for c in 0..cin {
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[[c, iy as usize, ix as usize]] += dcols[[row, c * k * k + ky * k + kx]];
                    }
                }
            }
        }
    }
    dx
}

/// Group normalization over (channels/groups, h, w) slabs with learned
/// per-channel scale and shift.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub groups: usize,
    pub eps: f64,
}

pub struct GroupNormCache {
    xhat: Array3<f64>,
    inv_std: Vec<f64>,
}

impl GroupNorm {
    pub fn new(channels: usize, groups: usize) -> Self {
        assert!(channels % groups == 0, "channels must divide into groups");
        Self {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            groups,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, GroupNormCache) {
        let (c, h, w) = x.dim();
        let per = c / self.groups;
        let m = (per * h * w) as f64;
        let mut xhat = Array3::zeros((c, h, w));
        let mut inv_std = Vec::with_capacity(self.groups);
        for g in 0..self.groups {
            let c0 = g * per;
            let slab = x.slice(ndarray::s![c0..c0 + per, .., ..]);
            let mu = slab.sum() / m;
            let var = slab.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m;
            let inv = 1.0 / (var + self.eps).sqrt();
            inv_std.push(inv);
            for cc in 0..per {
                for y in 0..h {
                    for xx in 0..w {
                        xhat[[c0 + cc, y, xx]] = (x[[c0 + cc, y, xx]] - mu) * inv;
                    }
                }
            }
        }
        let mut out = xhat.clone();
        for cc in 0..c {
            let (gam, bet) = (self.gamma[cc], self.beta[cc]);
            out.index_axis_mut(ndarray::Axis(0), cc)
                .mapv_inplace(|v| gam * v + bet);
        }
        (out, GroupNormCache { xhat, inv_std })
    }

    pub fn backward(
        &self,
        cache: &GroupNormCache,
        dy: &Array3<f64>,
        prefix: &str,
        grads: &mut GradStore,
    ) -> Array3<f64> {
        let (c, h, w) = dy.dim();
        let per = c / self.groups;
        let m = (per * h * w) as f64;

        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for cc in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    dgamma[cc] += dy[[cc, y, xx]] * cache.xhat[[cc, y, xx]];
                    dbeta[cc] += dy[[cc, y, xx]];
                }
            }
        }
        grads.accumulate(&format!("{prefix}.gamma"), &dgamma);
        grads.accumulate(&format!("{prefix}.beta"), &dbeta);

        let mut dx = Array3::zeros((c, h, w));
        for g in 0..self.groups {
            let c0 = g * per;
            let inv = cache.inv_std[g];
            let mut s1 = 0.0;
            let mut s2 = 0.0;
            for cc in 0..per {
                for y in 0..h {
                    for xx in 0..w {
                        let dxhat = dy[[c0 + cc, y, xx]] * self.gamma[c0 + cc];
                        s1 += dxhat;
                        s2 += dxhat * cache.xhat[[c0 + cc, y, xx]];
                    }
                }
            }
            for cc in 0..per {
                for y in 0..h {
                    for xx in 0..w {
                        let dxhat = dy[[c0 + cc, y, xx]] * self.gamma[c0 + cc];
                        dx[[c0 + cc, y, xx]] =
                            inv / m * (m * dxhat - s1 - cache.xhat[[c0 + cc, y, xx]] * s2);
                    }
                }
            }
        }
        dx
    }
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, h * 2, w * 2), |(cc, y, xx)| x[[cc, y / 2, xx / 2]])
}

/// Adjoint of [`upsample2`]: sums each 2x2 block.
pub fn upsample2_backward(dy: &Array3<f64>) -> Array3<f64> {
    let (c, h2, w2) = dy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array3::zeros((c, h, w));
    for cc in 0..c {
        for y in 0..h2 {
            for x in 0..w2 {
                dx[[cc, y / 2, x / 2]] += dy[[cc, y, x]];
            }
        }
    }
    dx
}

/// Sinusoidal position features for a scalar timestep.
pub fn sinusoidal_embedding(t: usize, dim: usize) -> Array1<f64> {
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (t as f64 * freq).sin();
        out[half + i] = (t as f64 * freq).cos();
    }
    out
}

/// Adam over named flat parameters. Moment buffers are keyed by parameter
/// name and created lazily.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    pub m: IndexMap<String, Vec<f64>>,
    pub v: IndexMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    /// One update over every (name, value) pair the model exposes. Params
    /// without a gradient entry (or filtered out) are left untouched.
    pub fn step(
        &mut self,
        grads: &GradStore,
        trainable: &dyn Fn(&str) -> bool,
        mut for_each_param_mut: impl FnMut(&mut dyn FnMut(&str, &mut [f64])),
    ) {
        self.step_count += 1;
        let t = self.step_count as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let (lr, b1, b2, eps) = (self.lr, self.beta1, self.beta2, self.eps);
        let (m_map, v_map) = (&mut self.m, &mut self.v);
        for_each_param_mut(&mut |name, value| {
            if !trainable(name) {
                return;
            }
            let Some(grad) = grads.get(name) else { return };
            let m = m_map
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; value.len()]);
            let v = v_map
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; value.len()]);
            for i in 0..value.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
                v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                value[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        });
    }
}

//! Fused CPU kernels with hand-written backward passes for the pointwise
//! activations, layer normalization and the depthwise token-grid
//! convolution.

use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

use candle_core::{bail, CpuStorage, CustomOp1, CustomOp2, CustomOp3, DType, Layout, Shape, Tensor, WithDType};

pub(crate) trait Real:
    WithDType
    + PartialOrd
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
{
    fn exp(self) -> Self;
    fn exp_m1(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn c(v: f64) -> Self {
        Self::from_f64(v)
    }
}

impl Real for f32 {
    fn exp(self) -> Self {
        exp_f32(self)
    }
    fn exp_m1(self) -> Self {
        exp_f32(self) - 1.0
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn tanh(self) -> Self {
        // exp_f32 saturates instead of overflowing, so no branch is needed
        1.0 - 2.0 / (exp_f32(self + self) + 1.0)
    }
}

impl Real for f64 {
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn exp_m1(self) -> Self {
        f64::exp_m1(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
}

/// Branch-free `exp` for f32 (relative error below 5e-7), written so the
/// surrounding loops vectorize.
#[inline(always)]
pub(crate) fn exp_f32(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_145_75;
    const LN2_LO: f32 = 1.428_606_8e-6;
    const ROUND: f32 = 12_582_912.0;
    let x = x.max(-87.0).min(88.0);
    let n = (x * LOG2E + ROUND) - ROUND;
    let r = x - n * LN2_HI - n * LN2_LO;
    let p = 1.0 + r * (1.0 + r * (0.5 + r * (1.0 / 6.0 + r * (1.0 / 24.0 + r * (1.0 / 120.0 + r * (1.0 / 720.0))))));
    let scale = f32::from_bits(((n as i32 + 127) as u32) << 23);
    p * scale
}

#[inline(always)]
fn slice<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&T::cpu_storage_as_slice(s)?[a..b]),
        None => bail!("fused op expects contiguous input"),
    }
}

#[inline(always)]
fn values<T: WithDType>(t: &Tensor) -> candle_core::Result<Vec<T>> {
    t.flatten_all()?.to_vec1::<T>()
}

/// Elementwise maps over f32 slices, compiled for the widest vector
/// extension the CPU reports and dispatched at runtime.
mod simd {
    #[inline(always)]
    fn map1_generic(x: &[f32], f: impl Fn(f32) -> f32) -> Vec<f32> {
        x.iter().map(|&v| f(v)).collect()
    }

    #[inline(always)]
    fn map2_generic(x: &[f32], y: &[f32], f: impl Fn(f32, f32) -> f32) -> Vec<f32> {
        x.iter().zip(y).map(|(&a, &b)| f(a, b)).collect()
    }

    #[inline(always)]
    fn map3_generic(x: &[f32], y: &[f32], z: &[f32], f: impl Fn(f32, f32, f32) -> f32) -> Vec<f32> {
        x.iter().zip(y).zip(z).map(|((&a, &b), &c)| f(a, b, c)).collect()
    }

    /// Runs `f` inside a function compiled for the detected vector
    /// extension; `f` and everything it inlines benefit.
    macro_rules! dispatch_once {
        () => {
            pub(super) fn vectorized<R>(f: impl FnOnce() -> R) -> R {
                #[cfg(target_arch = "x86_64")]
                {
                    #[target_feature(enable = "avx512f,avx512vl,avx2,fma")]
                    unsafe fn wide<R>(f: impl FnOnce() -> R) -> R {
                        call(f)
                    }
                    #[target_feature(enable = "avx2,fma")]
                    unsafe fn narrow<R>(f: impl FnOnce() -> R) -> R {
                        call(f)
                    }
                    if std::is_x86_feature_detected!("avx512f") && std::is_x86_feature_detected!("avx512vl") {
                        // SAFETY: the required CPU features were just detected.
                        return unsafe { wide(f) };
                    }
                    if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
                        // SAFETY: as above.
                        return unsafe { narrow(f) };
                    }
                }
                call(f)
            }
        };
    }

    macro_rules! dispatch {
        ($name:ident, $generic:ident, ($($arg:ident: $ty:ty),*), $fty:path) => {
            pub(super) fn $name($($arg: $ty,)* f: impl $fty) -> Vec<f32> {
                #[cfg(target_arch = "x86_64")]
                {
                    #[target_feature(enable = "avx512f,avx512vl,avx2,fma")]
                    unsafe fn wide($($arg: $ty,)* f: impl $fty) -> Vec<f32> {
                        $generic($($arg,)* f)
                    }
                    #[target_feature(enable = "avx2,fma")]
                    unsafe fn narrow($($arg: $ty,)* f: impl $fty) -> Vec<f32> {
                        $generic($($arg,)* f)
                    }
                    if std::is_x86_feature_detected!("avx512f") && std::is_x86_feature_detected!("avx512vl") {
                        // SAFETY: the required CPU features were just detected.
                        return unsafe { wide($($arg,)* f) };
                    }
                    if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
                        // SAFETY: as above.
                        return unsafe { narrow($($arg,)* f) };
                    }
                }
                $generic($($arg,)* f)
            }
        };
    }

    #[inline(always)]
    fn call<R>(f: impl FnOnce() -> R) -> R {
        f()
    }

    dispatch_once!();

    dispatch!(map1, map1_generic, (x: &[f32]), Fn(f32) -> f32);
    dispatch!(map2, map2_generic, (x: &[f32], y: &[f32]), Fn(f32, f32) -> f32);
    dispatch!(map3, map3_generic, (x: &[f32], y: &[f32], z: &[f32]), Fn(f32, f32, f32) -> f32);
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum Pointwise {
    /// Tanh-approximated GELU.
    Gelu,
    /// ELU with unit scale.
    Elu,
}

const GELU_A: f64 = 0.044_715;
// sqrt(2 / pi)
const GELU_S: f64 = 0.797_884_560_802_865_4;

impl Pointwise {
    fn f<T: Real>(self, x: T) -> T {
        match self {
            Pointwise::Gelu => {
                let u = T::c(GELU_S) * (x + T::c(GELU_A) * x * x * x);
                let t = u.tanh();
                T::c(0.5) * x * (T::c(1.0) + t)
            }
            Pointwise::Elu => {
                if x > T::c(0.0) {
                    x
                } else {
                    x.exp_m1()
                }
            }
        }
    }

    fn df<T: Real>(self, x: T) -> T {
        match self {
            Pointwise::Gelu => {
                let u = T::c(GELU_S) * (x + T::c(GELU_A) * x * x * x);
                let t = u.tanh();
                let du = T::c(GELU_S) * (T::c(1.0) + T::c(3.0 * GELU_A) * x * x);
                T::c(0.5) * (T::c(1.0) + t) + T::c(0.5) * x * (T::c(1.0) - t * t) * du
            }
            Pointwise::Elu => {
                if x > T::c(0.0) {
                    T::c(1.0)
                } else {
                    x.exp()
                }
            }
        }
    }
}

impl CustomOp1 for Pointwise {
    fn name(&self) -> &'static str {
        match self {
            Pointwise::Gelu => "fused-gelu",
            Pointwise::Elu => "fused-elu",
        }
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        fn run<T: Real>(op: Pointwise, s: &CpuStorage, l: &Layout) -> candle_core::Result<CpuStorage> {
            let x = slice::<T>(s, l)?;
            Ok(T::to_cpu_storage_owned(x.iter().map(|&v| op.f(v)).collect()))
        }
        let out = match s {
            CpuStorage::F32(_) => {
                let x = slice::<f32>(s, l)?;
                CpuStorage::F32(match self {
                    Pointwise::Gelu => simd::map1(x, |v| Pointwise::Gelu.f(v)),
                    Pointwise::Elu => simd::map1(x, |v| Pointwise::Elu.f(v)),
                })
            }
            CpuStorage::F64(_) => run::<f64>(*self, s, l)?,
            _ => bail!("{} supports f32/f64 only", self.name()),
        };
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        fn run<T: Real>(op: Pointwise, x: &Tensor, y: &Tensor, g: &Tensor) -> candle_core::Result<Tensor> {
            let xs = values::<T>(x)?;
            let gs = values::<T>(g)?;
            let out: Vec<T> = match op {
                // elu'(x) = elu(x) + 1 on the negative side
                Pointwise::Elu => {
                    let ys = values::<T>(y)?;
                    xs.iter()
                        .zip(&ys)
                        .zip(&gs)
                        .map(|((&x, &y), &g)| if x > T::c(0.0) { g } else { g * (y + T::c(1.0)) })
                        .collect()
                }
                Pointwise::Gelu => xs.iter().zip(&gs).map(|(&x, &g)| g * op.df(x)).collect(),
            };
            Tensor::from_vec(out, x.shape(), x.device())
        }
        let out = match arg.dtype() {
            DType::F32 => {
                let (xs, gs) = (values::<f32>(arg)?, values::<f32>(grad)?);
                let out = match self {
                    Pointwise::Gelu => simd::map2(&xs, &gs, |x, g| g * Pointwise::Gelu.df(x)),
                    Pointwise::Elu => {
                        let ys = values::<f32>(res)?;
                        simd::map3(&xs, &ys, &gs, |x, y, g| if x > 0.0 { g } else { g * (y + 1.0) })
                    }
                };
                Tensor::from_vec(out, arg.shape(), arg.device())?
            }
            DType::F64 => run::<f64>(*self, arg, res, grad)?,
            d => bail!("unsupported dtype {d:?}"),
        };
        Ok(Some(out))
    }
}

pub(crate) fn gelu(x: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(Pointwise::Gelu)
}

pub(crate) fn elu(x: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(Pointwise::Elu)
}

/// Adds a bias vector along the last dimension: `(x, bias)`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct BiasAdd;

impl CustomOp2 for BiasAdd {
    fn name(&self) -> &'static str {
        "fused-bias-add"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        #[inline(always)]
        fn run<T: Real>(s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<CpuStorage> {
            let x = slice::<T>(s1, l1)?;
            let b = slice::<T>(s2, l2)?;
            if b.is_empty() || x.len() % b.len() != 0 {
                bail!("bias add shape mismatch");
            }
            let mut out = x.to_vec();
            for row in out.chunks_exact_mut(b.len()) {
                for (o, &bb) in row.iter_mut().zip(b) {
                    *o += bb;
                }
            }
            Ok(T::to_cpu_storage_owned(out))
        }
        let out = match s1 {
            CpuStorage::F32(_) => simd::vectorized(|| run::<f32>(s1, l1, s2, l2))?,
            CpuStorage::F64(_) => run::<f64>(s1, l1, s2, l2)?,
            _ => bail!("bias add supports f32/f64 only"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(&self, _x: &Tensor, b: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        #[inline(always)]
        fn run<T: Real>(b: &Tensor, grad: &Tensor) -> candle_core::Result<Tensor> {
            let n = b.elem_count();
            let g = values::<T>(grad)?;
            let mut db = vec![T::c(0.0); n];
            for row in g.chunks_exact(n) {
                for (d, &v) in db.iter_mut().zip(row) {
                    *d += v;
                }
            }
            Tensor::from_vec(db, b.shape(), b.device())
        }
        let db = match grad.dtype() {
            DType::F32 => simd::vectorized(|| run::<f32>(b, grad))?,
            DType::F64 => run::<f64>(b, grad)?,
            d => bail!("unsupported dtype {d:?}"),
        };
        Ok((Some(grad.clone()), Some(db)))
    }
}

pub(crate) fn bias_add(x: &Tensor, b: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op2(&b.contiguous()?, BiasAdd)
}

/// Layer normalization over the last dimension: `(x, gamma, beta)`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct LayerNormOp {
    pub eps: f64,
}

#[inline(always)]
fn row_stats<T: Real>(row: &[T], eps: f64) -> (T, T) {
    let n = T::c(row.len() as f64);
    let mut mean = T::c(0.0);
    for &v in row {
        mean += v;
    }
    mean = mean / n;
    let mut var = T::c(0.0);
    for &v in row {
        let d = v - mean;
        var += d * d;
    }
    var = var / n;
    (mean, T::c(1.0) / (var + T::c(eps)).sqrt())
}

impl CustomOp3 for LayerNormOp {
    fn name(&self) -> &'static str {
        "fused-layer-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        #[inline(always)]
        fn run<T: Real>(
            eps: f64,
            s1: &CpuStorage,
            l1: &Layout,
            s2: &CpuStorage,
            l2: &Layout,
            s3: &CpuStorage,
            l3: &Layout,
        ) -> candle_core::Result<CpuStorage> {
            let x = slice::<T>(s1, l1)?;
            let g = slice::<T>(s2, l2)?;
            let b = slice::<T>(s3, l3)?;
            let d = g.len();
            if d == 0 || b.len() != d || x.len() % d != 0 {
                bail!("layer norm shape mismatch");
            }
            let mut out = Vec::with_capacity(x.len());
            for row in x.chunks_exact(d) {
                let (mean, rstd) = row_stats(row, eps);
                for i in 0..d {
                    out.push((row[i] - mean) * rstd * g[i] + b[i]);
                }
            }
            Ok(T::to_cpu_storage_owned(out))
        }
        let out = match s1 {
            CpuStorage::F32(_) => simd::vectorized(|| run::<f32>(self.eps, s1, l1, s2, l2, s3, l3))?,
            CpuStorage::F64(_) => run::<f64>(self.eps, s1, l1, s2, l2, s3, l3)?,
            _ => bail!("layer norm supports f32/f64 only"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        #[inline(always)]
        fn run<T: Real>(
            eps: f64,
            x: &Tensor,
            gamma: &Tensor,
            grad: &Tensor,
        ) -> candle_core::Result<(Tensor, Tensor, Tensor)> {
            let xs = values::<T>(x)?;
            let g = values::<T>(gamma)?;
            let dy = values::<T>(grad)?;
            let d = g.len();
            let n = T::c(d as f64);
            let mut dx = Vec::with_capacity(xs.len());
            let mut dg = vec![T::c(0.0); d];
            let mut db = vec![T::c(0.0); d];
            let mut xhat = vec![T::c(0.0); d];
            let mut gy = vec![T::c(0.0); d];
            for (row, dyr) in xs.chunks_exact(d).zip(dy.chunks_exact(d)) {
                let (mean, rstd) = row_stats(row, eps);
                let mut m1 = T::c(0.0);
                let mut m2 = T::c(0.0);
                for i in 0..d {
                    xhat[i] = (row[i] - mean) * rstd;
                    gy[i] = dyr[i] * g[i];
                    dg[i] += dyr[i] * xhat[i];
                    db[i] += dyr[i];
                    m1 += gy[i];
                    m2 += gy[i] * xhat[i];
                }
                m1 = m1 / n;
                m2 = m2 / n;
                for i in 0..d {
                    dx.push(rstd * (gy[i] - m1 - xhat[i] * m2));
                }
            }
            let dev = x.device();
            Ok((
                Tensor::from_vec(dx, x.shape(), dev)?,
                Tensor::from_vec(dg, gamma.shape(), dev)?,
                Tensor::from_vec(db, gamma.shape(), dev)?,
            ))
        }
        let (dx, dg, db) = match x.dtype() {
            DType::F32 => simd::vectorized(|| run::<f32>(self.eps, x, gamma, grad))?,
            DType::F64 => run::<f64>(self.eps, x, gamma, grad)?,
            d => bail!("unsupported dtype {d:?}"),
        };
        Ok((Some(dx), Some(dg), Some(db)))
    }
}

pub(crate) fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op3(gamma, beta, LayerNormOp { eps })
}

/// Depthwise `k x k` convolution over dims 1 and 2 of a `(B, R, F, C)`
/// tensor with zero padding: `(x, weight (k*k, C), bias (C))`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Depthwise {
    pub kernel: usize,
    pub dims: [usize; 4],
}

impl Depthwise {
    /// Calls `f(out_index, in_index, tap)` for every valid (output, input)
    /// pair, channel excluded.
    #[inline(always)]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [b, r, fr, _] = self.dims;
        let k = self.kernel as isize;
        let h = k / 2;
        for bi in 0..b {
            for ri in 0..r {
                for fi in 0..fr {
                    let o = (bi * r + ri) * fr + fi;
                    for dr in 0..k {
                        let rr = ri as isize + dr - h;
                        if rr < 0 || rr >= r as isize {
                            continue;
                        }
                        for df in 0..k {
                            let ff = fi as isize + df - h;
                            if ff < 0 || ff >= fr as isize {
                                continue;
                            }
                            let i = (bi * r + rr as usize) * fr + ff as usize;
                            f(o, i, (dr * k + df) as usize);
                        }
                    }
                }
            }
        }
    }
}

impl CustomOp3 for Depthwise {
    fn name(&self) -> &'static str {
        "fused-depthwise"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        #[inline(always)]
        fn run<T: Real>(
            op: &Depthwise,
            s1: &CpuStorage,
            l1: &Layout,
            s2: &CpuStorage,
            l2: &Layout,
            s3: &CpuStorage,
            l3: &Layout,
        ) -> candle_core::Result<CpuStorage> {
            let x = slice::<T>(s1, l1)?;
            let w = slice::<T>(s2, l2)?;
            let b = slice::<T>(s3, l3)?;
            let c = op.dims[3];
            if b.len() != c || w.len() != op.kernel * op.kernel * c || x.len() != op.dims.iter().product::<usize>() {
                bail!("depthwise shape mismatch");
            }
            let mut out: Vec<T> = Vec::with_capacity(x.len());
            for _ in 0..x.len() / c {
                out.extend_from_slice(b);
            }
            op.for_each_tap(|o, i, t| {
                let (yo, xi, wt) = (&mut out[o * c..(o + 1) * c], &x[i * c..(i + 1) * c], &w[t * c..(t + 1) * c]);
                for ch in 0..c {
                    yo[ch] += xi[ch] * wt[ch];
                }
            });
            Ok(T::to_cpu_storage_owned(out))
        }
        let out = match s1 {
            CpuStorage::F32(_) => simd::vectorized(|| run::<f32>(self, s1, l1, s2, l2, s3, l3))?,
            CpuStorage::F64(_) => run::<f64>(self, s1, l1, s2, l2, s3, l3)?,
            _ => bail!("depthwise supports f32/f64 only"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        b: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        #[inline(always)]
        fn run<T: Real>(
            op: &Depthwise,
            x: &Tensor,
            w: &Tensor,
            b: &Tensor,
            grad: &Tensor,
        ) -> candle_core::Result<(Tensor, Tensor, Tensor)> {
            let xs = values::<T>(x)?;
            let ws = values::<T>(w)?;
            let dy = values::<T>(grad)?;
            let c = op.dims[3];
            let mut dx = vec![T::c(0.0); xs.len()];
            let mut dw = vec![T::c(0.0); ws.len()];
            let mut db = vec![T::c(0.0); c];
            for row in dy.chunks_exact(c) {
                for ch in 0..c {
                    db[ch] += row[ch];
                }
            }
            op.for_each_tap(|o, i, t| {
                let g = &dy[o * c..(o + 1) * c];
                let xi = &xs[i * c..(i + 1) * c];
                let wt = &ws[t * c..(t + 1) * c];
                let dxi = &mut dx[i * c..(i + 1) * c];
                for ch in 0..c {
                    dxi[ch] += g[ch] * wt[ch];
                }
                let dwt = &mut dw[t * c..(t + 1) * c];
                for ch in 0..c {
                    dwt[ch] += g[ch] * xi[ch];
                }
            });
            let dev = x.device();
            Ok((
                Tensor::from_vec(dx, x.shape(), dev)?,
                Tensor::from_vec(dw, w.shape(), dev)?,
                Tensor::from_vec(db, b.shape(), dev)?,
            ))
        }
        let (dx, dw, db) = match x.dtype() {
            DType::F32 => simd::vectorized(|| run::<f32>(self, x, w, b, grad))?,
            DType::F64 => run::<f64>(self, x, w, b, grad)?,
            d => bail!("unsupported dtype {d:?}"),
        };
        Ok((Some(dx), Some(dw), Some(db)))
    }
}

pub(crate) fn depthwise(x: &Tensor, w: &Tensor, b: &Tensor, kernel: usize) -> candle_core::Result<Tensor> {
    let dims: [usize; 4] = match x.dims() {
        &[a, r, f, c] => [a, r, f, c],
        d => bail!("depthwise expects rank 4, got {d:?}"),
    };
    x.contiguous()?.apply_op3(&w.contiguous()?, &b.contiguous()?, Depthwise { kernel, dims })
}

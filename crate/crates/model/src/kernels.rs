//! Fused CPU kernels with hand-written backward passes: affine maps,
//! convolution, layer norm, multi-head attention and softmax. They keep the large per-head score
//! matrices out of the autograd graph.

use candle_core::{bail, CpuStorage, CustomOp1, CustomOp2, CustomOp3, Layout, Shape, Tensor};

use crate::error::Result;

pub(crate) trait Elem: Copy + Send + Sync + 'static + PartialOrd + std::fmt::Debug {
    const ZERO: Self;
    const NEG_INF: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn add(self, o: Self) -> Self;
    fn sub(self, o: Self) -> Self;
    fn mul(self, o: Self) -> Self;
    fn div(self, o: Self) -> Self;
    /// In-place `exp` over a slice.
    fn exp_in_place(v: &mut [Self]);
    fn storage(v: Vec<Self>) -> CpuStorage;
    fn slice(s: &CpuStorage) -> Option<&[Self]>;
}

impl Elem for f64 {
    const ZERO: Self = 0.0;
    const NEG_INF: Self = f64::NEG_INFINITY;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn add(self, o: Self) -> Self {
        self + o
    }
    fn sub(self, o: Self) -> Self {
        self - o
    }
    fn mul(self, o: Self) -> Self {
        self * o
    }
    fn div(self, o: Self) -> Self {
        self / o
    }
    fn exp_in_place(v: &mut [Self]) {
        for x in v {
            *x = x.exp();
        }
    }
    fn storage(v: Vec<Self>) -> CpuStorage {
        CpuStorage::F64(v)
    }
    fn slice(s: &CpuStorage) -> Option<&[Self]> {
        match s {
            CpuStorage::F64(v) => Some(v),
            _ => None,
        }
    }
}

impl Elem for f32 {
    const ZERO: Self = 0.0;
    const NEG_INF: Self = f32::NEG_INFINITY;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
    fn add(self, o: Self) -> Self {
        self + o
    }
    fn sub(self, o: Self) -> Self {
        self - o
    }
    fn mul(self, o: Self) -> Self {
        self * o
    }
    fn div(self, o: Self) -> Self {
        self / o
    }
    fn exp_in_place(v: &mut [Self]) {
        #[cfg(target_arch = "x86_64")]
        if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
            // SAFETY: the features the function is compiled for were detected.
            unsafe { exp_slice_avx2(v) };
            return;
        }
        exp_slice(v);
    }
    fn storage(v: Vec<Self>) -> CpuStorage {
        CpuStorage::F32(v)
    }
    fn slice(s: &CpuStorage) -> Option<&[Self]> {
        match s {
            CpuStorage::F32(v) => Some(v),
            _ => None,
        }
    }
}

/// Branch-free `exp` for single precision (relative error ~2e-7), written
/// so that loops over it vectorise. Inputs below -87 flush to 0.
#[inline(always)]
pub(crate) fn exp_f32(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_145_75;
    const LN2_LO: f32 = 1.428_606_8e-6;
    const ROUND: f32 = 12_582_912.0; // 1.5 * 2^23
    let x = x.clamp(-87.0, 88.0);
    let n = (x * LOG2E + ROUND) - ROUND;
    let r = x - n * LN2_HI - n * LN2_LO;
    let p = 1.0
        + r * (1.0
            + r * (0.5
                + r * (0.166_666_67 + r * (0.041_666_668 + r * (0.008_333_452 + r * 0.001_388_906_3)))));
    let scale = f32::from_bits(((n as i32 + 127) as u32) << 23);
    p * scale
}

#[inline(always)]
fn exp_slice(v: &mut [f32]) {
    for x in v {
        *x = exp_f32(*x);
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn exp_slice_avx2(v: &mut [f32]) {
    exp_slice(v);
}

fn contiguous<'a, T: Elem>(s: &'a CpuStorage, l: &Layout, what: &str) -> candle_core::Result<&'a [T]> {
    let Some(v) = T::slice(s) else {
        bail!("{what}: unsupported dtype")
    };
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&v[a..b]),
        None => bail!("{what}: expects a contiguous tensor"),
    }
}

/// Strided matrix view: element `(i, j)` lives at `ptr + i*rs + j*cs`.
#[derive(Clone, Copy)]
struct View<T> {
    ptr: *const T,
    rs: isize,
    cs: isize,
}

impl<T> View<T> {
    fn at(s: &[T], offset: usize, rs: usize, cs: usize) -> Self {
        View {
            ptr: s[offset..].as_ptr(),
            rs: rs as isize,
            cs: cs as isize,
        }
    }

    fn t(self) -> Self {
        View {
            ptr: self.ptr,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// Returns the largest element offset touched by an `rows x cols` view.
fn extent(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize
}

/// `dst (m x n) = [dst +] scale * lhs (m x k) * rhs (k x n)`.
///
/// Callers build views from slices; the debug assertions re-check bounds.
#[allow(clippy::too_many_arguments)]
fn matmul<T: Elem>(
    m: usize,
    n: usize,
    k: usize,
    dst: &mut [T],
    dst_off: usize,
    dst_rs: usize,
    accumulate: bool,
    lhs: (View<T>, &[T]),
    rhs: (View<T>, &[T]),
    scale: T,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(dst_off + extent(m, n, dst_rs as isize, 1) < dst.len());
    for (view, base, rows, cols) in [(lhs.0, lhs.1, m, k), (rhs.0, rhs.1, k, n)] {
        let off = unsafe { view.ptr.offset_from(base.as_ptr()) };
        assert!(off >= 0 && off as usize + extent(rows, cols, view.rs, view.cs) < base.len().max(1) || rows * cols == 0);
    }
    if k == 0 {
        if !accumulate {
            for i in 0..m {
                dst[dst_off + i * dst_rs..dst_off + i * dst_rs + n].fill(T::ZERO);
            }
        }
        return;
    }
    // SAFETY: every view was bounds-checked above against its backing slice
    // and `dst` is exclusively borrowed.
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            dst[dst_off..].as_mut_ptr(),
            1,
            dst_rs as isize,
            accumulate,
            lhs.0.ptr,
            lhs.0.cs,
            lhs.0.rs,
            rhs.0.ptr,
            rhs.0.cs,
            rhs.0.rs,
            T::from_f64(1.0),
            scale,
            false,
            false,
            false,
            gemm::Parallelism::None,
        );
    }
}

// ---------------------------------------------------------------- affine

/// `x [N, in] · w [in, out] + b [out]`.
pub(crate) fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op3(w, b, AffineOp)?)
}

struct AffineOp;
struct AffineGrad;

fn dims2(l: &Layout, what: &str) -> candle_core::Result<(usize, usize)> {
    match l.dims() {
        [a, b] => Ok((*a, *b)),
        d => bail!("{what}: expected a matrix, got {d:?}"),
    }
}

fn affine_fwd<T: Elem>(
    x: &CpuStorage,
    lx: &Layout,
    w: &CpuStorage,
    lw: &Layout,
    b: &CpuStorage,
    lb: &Layout,
) -> candle_core::Result<(CpuStorage, Shape)> {
    let (n, fi) = dims2(lx, "affine input")?;
    let (wi, fo) = dims2(lw, "affine weight")?;
    if wi != fi || lb.dims() != [fo] {
        bail!("affine: shapes {:?} {:?} {:?} disagree", lx.dims(), lw.dims(), lb.dims());
    }
    let (x, w, b) = (
        contiguous::<T>(x, lx, "affine")?,
        contiguous::<T>(w, lw, "affine")?,
        contiguous::<T>(b, lb, "affine")?,
    );
    let mut out = Vec::with_capacity(n * fo);
    for _ in 0..n {
        out.extend_from_slice(b);
    }
    matmul(
        n,
        fo,
        fi,
        &mut out,
        0,
        fo,
        true,
        (View::at(x, 0, fi, 1), x),
        (View::at(w, 0, fo, 1), w),
        T::from_f64(1.0),
    );
    Ok((T::storage(out), Shape::from((n, fo))))
}

impl CustomOp3 for AffineOp {
    fn name(&self) -> &'static str {
        "affine"
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
        match s1 {
            CpuStorage::F32(_) => affine_fwd::<f32>(s1, l1, s2, l2, s3, l3),
            CpuStorage::F64(_) => affine_fwd::<f64>(s1, l1, s2, l2, s3, l3),
            _ => bail!("affine supports f32 and f64"),
        }
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _b: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (n, fi) = x.dims2()?;
        let fo = w.dim(1)?;
        let packed = x
            .contiguous()?
            .apply_op3_no_bwd(&w.contiguous()?, &grad.contiguous()?, &AffineGrad)?;
        let dx = packed.narrow(0, 0, n * fi)?.reshape((n, fi))?;
        let dw = packed.narrow(0, n * fi, fi * fo)?.reshape((fi, fo))?;
        let db = packed.narrow(0, n * fi + fi * fo, fo)?;
        Ok((Some(dx), Some(dw), Some(db)))
    }
}

fn affine_bwd<T: Elem>(
    x: &CpuStorage,
    lx: &Layout,
    w: &CpuStorage,
    lw: &Layout,
    g: &CpuStorage,
    lg: &Layout,
) -> candle_core::Result<(CpuStorage, Shape)> {
    let (n, fi) = dims2(lx, "affine input")?;
    let (_, fo) = dims2(lw, "affine weight")?;
    let (x, w, g) = (
        contiguous::<T>(x, lx, "affine")?,
        contiguous::<T>(w, lw, "affine")?,
        contiguous::<T>(g, lg, "affine")?,
    );
    let total = n * fi + fi * fo + fo;
    let mut out = vec![T::ZERO; total];
    let one = T::from_f64(1.0);
    // dx = g · wᵀ
    matmul(n, fi, fo, &mut out, 0, fi, false, (View::at(g, 0, fo, 1), g), (View::at(w, 0, fo, 1).t(), w), one);
    // dw = xᵀ · g
    matmul(fi, fo, n, &mut out, n * fi, fo, false, (View::at(x, 0, fi, 1).t(), x), (View::at(g, 0, fo, 1), g), one);
    let db = &mut out[n * fi + fi * fo..];
    for row in g.chunks_exact(fo.max(1)) {
        for (d, &v) in db.iter_mut().zip(row) {
            *d = d.add(v);
        }
    }
    Ok((T::storage(out), Shape::from(total)))
}

impl CustomOp3 for AffineGrad {
    fn name(&self) -> &'static str {
        "affine-grad"
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
        match s1 {
            CpuStorage::F32(_) => affine_bwd::<f32>(s1, l1, s2, l2, s3, l3),
            CpuStorage::F64(_) => affine_bwd::<f64>(s1, l1, s2, l2, s3, l3),
            _ => bail!("affine supports f32 and f64"),
        }
    }
}

// ---------------------------------------------------------------- softmax

const LANES: usize = 8;

fn max_of<T: Elem>(a: T, b: T) -> T {
    if b > a {
        b
    } else {
        a
    }
}

/// Lane-parallel reductions so the loops vectorise.
fn row_max<T: Elem>(row: &[T]) -> T {
    let mut acc = [T::NEG_INF; LANES];
    let chunks = row.chunks_exact(LANES);
    let tail = chunks.remainder();
    for c in chunks {
        for i in 0..LANES {
            acc[i] = max_of(acc[i], c[i]);
        }
    }
    tail.iter().chain(&acc).copied().fold(T::NEG_INF, max_of)
}

fn row_dot<T: Elem>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::ZERO; LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let tail = ca.remainder().iter().zip(cb.remainder()).fold(T::ZERO, |s, (&x, &y)| s.add(x.mul(y)));
    for (x, y) in ca.zip(cb) {
        for i in 0..LANES {
            acc[i] = acc[i].add(x[i].mul(y[i]));
        }
    }
    acc.iter().fold(tail, |s, &v| s.add(v))
}

fn row_sum<T: Elem>(a: &[T]) -> T {
    let mut acc = [T::ZERO; LANES];
    let chunks = a.chunks_exact(LANES);
    let tail = chunks.remainder().iter().fold(T::ZERO, |s, &v| s.add(v));
    for c in chunks {
        for i in 0..LANES {
            acc[i] = acc[i].add(c[i]);
        }
    }
    acc.iter().fold(tail, |s, &v| s.add(v))
}

fn softmax_row<T: Elem>(row: &mut [T]) {
    let max = row_max(row);
    for v in row.iter_mut() {
        *v = v.sub(max);
    }
    T::exp_in_place(row);
    let inv = T::from_f64(1.0).div(row_sum(row));
    for v in row.iter_mut() {
        *v = v.mul(inv);
    }
}

/// Softmax over the last axis.
pub(crate) fn softmax_last(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(SoftmaxLast)?)
}

struct SoftmaxLast;
struct SoftmaxGrad;

fn softmax_fwd<T: Elem>(s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
    let dim = l.dims().last().copied().unwrap_or(1).max(1);
    let mut out = contiguous::<T>(s, l, "softmax")?.to_vec();
    for row in out.chunks_exact_mut(dim) {
        softmax_row(row);
    }
    Ok((T::storage(out), l.shape().clone()))
}

impl CustomOp1 for SoftmaxLast {
    fn name(&self) -> &'static str {
        "softmax-last"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        match s {
            CpuStorage::F32(_) => softmax_fwd::<f32>(s, l),
            CpuStorage::F64(_) => softmax_fwd::<f64>(s, l),
            _ => bail!("softmax supports f32 and f64"),
        }
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(res.contiguous()?.apply_op2_no_bwd(&grad_res.contiguous()?, &SoftmaxGrad)?))
    }
}

fn softmax_bwd<T: Elem>(
    y: &CpuStorage,
    ly: &Layout,
    g: &CpuStorage,
    lg: &Layout,
) -> candle_core::Result<(CpuStorage, Shape)> {
    let dim = ly.dims().last().copied().unwrap_or(1).max(1);
    let (y, g) = (contiguous::<T>(y, ly, "softmax")?, contiguous::<T>(g, lg, "softmax")?);
    let mut out = vec![T::ZERO; y.len()];
    for ((yr, gr), o) in y.chunks_exact(dim).zip(g.chunks_exact(dim)).zip(out.chunks_exact_mut(dim)) {
        let dot = row_dot(yr, gr);
        for ((oi, &yi), &gi) in o.iter_mut().zip(yr).zip(gr) {
            *oi = yi.mul(gi.sub(dot));
        }
    }
    Ok((T::storage(out), ly.shape().clone()))
}

impl CustomOp2 for SoftmaxGrad {
    fn name(&self) -> &'static str {
        "softmax-last-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        match s1 {
            CpuStorage::F32(_) => softmax_bwd::<f32>(s1, l1, s2, l2),
            CpuStorage::F64(_) => softmax_bwd::<f64>(s1, l1, s2, l2),
            _ => bail!("softmax gradient supports f32 and f64"),
        }
    }
}

// ---------------------------------------------------------------- attention

/// Scaled dot-product attention over `heads` interleaved heads.
/// `q: [B, Tq, D]`, `k, v: [B, Tk, D]` → `[B, Tq, D]`; no mask.
pub(crate) fn attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
    Ok(q.contiguous()?
        .apply_op3(&k.contiguous()?, &v.contiguous()?, Attention { heads })?)
}

#[derive(Clone, Copy)]
struct Attention {
    heads: usize,
}

#[derive(Clone, Copy)]
struct AttentionGrad {
    heads: usize,
}

struct AttnDims {
    b: usize,
    tq: usize,
    tk: usize,
    d: usize,
    dh: usize,
}

fn attn_dims(lq: &Layout, lk: &Layout, lv: &Layout, heads: usize, q_batches: usize) -> candle_core::Result<AttnDims> {
    let (bq, tq, d) = match lq.dims() {
        [a, b, c] => (*a, *b, *c),
        s => bail!("attention: query must be rank 3, got {s:?}"),
    };
    let (b, tk, dk) = match lk.dims() {
        [a, b, c] => (*a, *b, *c),
        s => bail!("attention: keys must be rank 3, got {s:?}"),
    };
    if lv.dims() != lk.dims() || dk != d || bq != q_batches * b || heads == 0 || d % heads != 0 {
        bail!(
            "attention: incompatible shapes {:?} {:?} {:?} for {heads} heads",
            lq.dims(),
            lk.dims(),
            lv.dims()
        );
    }
    Ok(AttnDims {
        b,
        tq,
        tk,
        d,
        dh: d / heads,
    })
}

/// Fills `p` with softmax(scale · Q_h K_hᵀ) for batch `bi`, head `h`.
fn attn_probs<T: Elem>(q: &[T], k: &[T], a: &AttnDims, bi: usize, h: usize, p: &mut [T]) {
    let scale = T::from_f64(1.0 / (a.dh as f64).sqrt());
    let qh = View::at(q, bi * a.tq * a.d + h * a.dh, a.d, 1);
    let kh = View::at(k, bi * a.tk * a.d + h * a.dh, a.d, 1);
    matmul(a.tq, a.tk, a.dh, p, 0, a.tk, false, (qh, q), (kh.t(), k), scale);
    for row in p.chunks_exact_mut(a.tk) {
        softmax_row(row);
    }
}

fn attn_fwd<T: Elem>(
    heads: usize,
    sq: &CpuStorage,
    lq: &Layout,
    sk: &CpuStorage,
    lk: &Layout,
    sv: &CpuStorage,
    lv: &Layout,
) -> candle_core::Result<(CpuStorage, Shape)> {
    let a = attn_dims(lq, lk, lv, heads, 1)?;
    let (q, k, v) = (
        contiguous::<T>(sq, lq, "attention")?,
        contiguous::<T>(sk, lk, "attention")?,
        contiguous::<T>(sv, lv, "attention")?,
    );
    let mut out = vec![T::ZERO; a.b * a.tq * a.d];
    let mut p = vec![T::ZERO; a.tq * a.tk];
    for bi in 0..a.b {
        for h in 0..heads {
            attn_probs(q, k, &a, bi, h, &mut p);
            let vh = View::at(v, bi * a.tk * a.d + h * a.dh, a.d, 1);
            matmul(
                a.tq,
                a.dh,
                a.tk,
                &mut out,
                bi * a.tq * a.d + h * a.dh,
                a.d,
                false,
                (View::at(&p, 0, a.tk, 1), &p),
                (vh, v),
                T::from_f64(1.0),
            );
        }
    }
    Ok((T::storage(out), lq.shape().clone()))
}

impl CustomOp3 for Attention {
    fn name(&self) -> &'static str {
        "attention"
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
        match s1 {
            CpuStorage::F32(_) => attn_fwd::<f32>(self.heads, s1, l1, s2, l2, s3, l3),
            CpuStorage::F64(_) => attn_fwd::<f64>(self.heads, s1, l1, s2, l2, s3, l3),
            _ => bail!("attention supports f32 and f64"),
        }
    }

    fn bwd(
        &self,
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (b, tq, d) = q.dims3()?;
        let tk = k.dim(1)?;
        // The query and the output gradient travel together as one argument.
        let qg = Tensor::cat(&[&q.contiguous()?, &grad.contiguous()?], 0)?;
        let packed = qg.apply_op3_no_bwd(&k.contiguous()?, &v.contiguous()?, &AttentionGrad { heads: self.heads })?;
        let nq = b * tq * d;
        let nk = b * tk * d;
        let dq = packed.narrow(0, 0, nq)?.reshape((b, tq, d))?;
        let dk = packed.narrow(0, nq, nk)?.reshape((b, tk, d))?;
        let dv = packed.narrow(0, nq + nk, nk)?.reshape((b, tk, d))?;
        Ok((Some(dq), Some(dk), Some(dv)))
    }
}

fn attn_bwd<T: Elem>(
    heads: usize,
    sqg: &CpuStorage,
    lqg: &Layout,
    sk: &CpuStorage,
    lk: &Layout,
    sv: &CpuStorage,
    lv: &Layout,
) -> candle_core::Result<(CpuStorage, Shape)> {
    let a = attn_dims(lqg, lk, lv, heads, 2)?;
    let qg = contiguous::<T>(sqg, lqg, "attention")?;
    let (q, g) = qg.split_at(a.b * a.tq * a.d);
    let (k, v) = (contiguous::<T>(sk, lk, "attention")?, contiguous::<T>(sv, lv, "attention")?);
    let nq = a.b * a.tq * a.d;
    let nk = a.b * a.tk * a.d;
    let mut out = vec![T::ZERO; nq + 2 * nk];
    let mut p = vec![T::ZERO; a.tq * a.tk];
    let mut dp = vec![T::ZERO; a.tq * a.tk];
    let one = T::from_f64(1.0);
    let scale = T::from_f64(1.0 / (a.dh as f64).sqrt());
    for bi in 0..a.b {
        for h in 0..heads {
            let qo = bi * a.tq * a.d + h * a.dh;
            let ko = bi * a.tk * a.d + h * a.dh;
            attn_probs(q, k, &a, bi, h, &mut p);
            let gh = View::at(g, qo, a.d, 1);
            let (dq_all, rest) = out.split_at_mut(nq);
            let (dk_all, dv_all) = rest.split_at_mut(nk);
            // dV = Pᵀ · dO
            matmul(a.tk, a.dh, a.tq, dv_all, ko, a.d, false, (View::at(&p, 0, a.tk, 1).t(), &p), (gh, g), one);
            // dP = dO · Vᵀ
            let vh = View::at(v, ko, a.d, 1);
            matmul(a.tq, a.tk, a.dh, &mut dp, 0, a.tk, false, (gh, g), (vh.t(), v), one);
            // dS = P ∘ (dP − rowsum(P ∘ dP))
            for (pr, dr) in p.chunks_exact(a.tk).zip(dp.chunks_exact_mut(a.tk)) {
                let dot = row_dot(pr, dr);
                for (d, &pv) in dr.iter_mut().zip(pr) {
                    *d = pv.mul(d.sub(dot));
                }
            }
            let ds = View::at(&dp, 0, a.tk, 1);
            // dQ = scale · dS · K ; dK = scale · dSᵀ · Q
            matmul(a.tq, a.dh, a.tk, dq_all, qo, a.d, false, (ds, &dp), (View::at(k, ko, a.d, 1), k), scale);
            matmul(a.tk, a.dh, a.tq, dk_all, ko, a.d, false, (ds.t(), &dp), (View::at(q, qo, a.d, 1), q), scale);
        }
    }
    Ok((T::storage(out), Shape::from(nq + 2 * nk)))
}

impl CustomOp3 for AttentionGrad {
    fn name(&self) -> &'static str {
        "attention-grad"
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
        match s1 {
            CpuStorage::F32(_) => attn_bwd::<f32>(self.heads, s1, l1, s2, l2, s3, l3),
            CpuStorage::F64(_) => attn_bwd::<f64>(self.heads, s1, l1, s2, l2, s3, l3),
            _ => bail!("attention supports f32 and f64"),
        }
    }
}

// ---------------------------------------------------------------- layer norm

/// Normalises each row over the last axis, then scales by `gamma` and
/// shifts by `beta`.
pub(crate) fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op3(gamma, beta, LayerNormOp { eps })?)
}

#[derive(Clone, Copy)]
struct LayerNormOp {
    eps: f64,
}

#[derive(Clone, Copy)]
struct LayerNormGrad {
    eps: f64,
}

fn ln_stats<T: Elem>(row: &[T], eps: f64) -> (T, T) {
    let n = T::from_f64(row.len() as f64);
    let mean = row_sum(row).div(n);
    let mut acc = [T::ZERO; LANES];
    let chunks = row.chunks_exact(LANES);
    let mut tail = T::ZERO;
    for &v in chunks.remainder() {
        let c = v.sub(mean);
        tail = tail.add(c.mul(c));
    }
    for c in chunks {
        for i in 0..LANES {
            let d = c[i].sub(mean);
            acc[i] = acc[i].add(d.mul(d));
        }
    }
    let var = acc.iter().fold(tail, |s, &v| s.add(v)).div(n);
    let rstd = T::from_f64(1.0).div(T::from_f64((var.to_f64() + eps).sqrt()));
    (mean, rstd)
}

fn ln_fwd<T: Elem>(
    eps: f64,
    sx: &CpuStorage,
    lx: &Layout,
    sg: &CpuStorage,
    lg: &Layout,
    sb: &CpuStorage,
    lb: &Layout,
) -> candle_core::Result<(CpuStorage, Shape)> {
    let dim = lx.dims().last().copied().unwrap_or(0);
    if dim == 0 || lg.dims() != [dim] || lb.dims() != [dim] {
        bail!("layer norm: shapes {:?} {:?} {:?} disagree", lx.dims(), lg.dims(), lb.dims());
    }
    let (x, g, b) = (
        contiguous::<T>(sx, lx, "layer norm")?,
        contiguous::<T>(sg, lg, "layer norm")?,
        contiguous::<T>(sb, lb, "layer norm")?,
    );
    let mut out = vec![T::ZERO; x.len()];
    for (row, o) in x.chunks_exact(dim).zip(out.chunks_exact_mut(dim)) {
        let (mean, rstd) = ln_stats(row, eps);
        for i in 0..dim {
            o[i] = row[i].sub(mean).mul(rstd).mul(g[i]).add(b[i]);
        }
    }
    Ok((T::storage(out), lx.shape().clone()))
}

impl CustomOp3 for LayerNormOp {
    fn name(&self) -> &'static str {
        "layer-norm"
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
        match s1 {
            CpuStorage::F32(_) => ln_fwd::<f32>(self.eps, s1, l1, s2, l2, s3, l3),
            CpuStorage::F64(_) => ln_fwd::<f64>(self.eps, s1, l1, s2, l2, s3, l3),
            _ => bail!("layer norm supports f32 and f64"),
        }
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let n = x.elem_count();
        let d = gamma.elem_count();
        let packed = x.contiguous()?.apply_op3_no_bwd(
            &gamma.contiguous()?,
            &grad.contiguous()?,
            &LayerNormGrad { eps: self.eps },
        )?;
        let dx = packed.narrow(0, 0, n)?.reshape(x.shape())?;
        let dg = packed.narrow(0, n, d)?;
        let db = packed.narrow(0, n + d, d)?;
        Ok((Some(dx), Some(dg), Some(db)))
    }
}

fn ln_bwd<T: Elem>(
    eps: f64,
    sx: &CpuStorage,
    lx: &Layout,
    sg: &CpuStorage,
    lg: &Layout,
    sd: &CpuStorage,
    ld: &Layout,
) -> candle_core::Result<(CpuStorage, Shape)> {
    let dim = lg.dims().first().copied().unwrap_or(0).max(1);
    let (x, g, dy) = (
        contiguous::<T>(sx, lx, "layer norm")?,
        contiguous::<T>(sg, lg, "layer norm")?,
        contiguous::<T>(sd, ld, "layer norm")?,
    );
    let n = x.len();
    let mut out = vec![T::ZERO; n + 2 * dim];
    let (dx, rest) = out.split_at_mut(n);
    let (dgamma, dbeta) = rest.split_at_mut(dim);
    let inv_n = T::from_f64(1.0 / dim as f64);
    let mut xhat = vec![T::ZERO; dim];
    let mut dxhat = vec![T::ZERO; dim];
    for ((row, dyr), dxr) in x.chunks_exact(dim).zip(dy.chunks_exact(dim)).zip(dx.chunks_exact_mut(dim)) {
        let (mean, rstd) = ln_stats(row, eps);
        for i in 0..dim {
            xhat[i] = row[i].sub(mean).mul(rstd);
            dxhat[i] = dyr[i].mul(g[i]);
            dgamma[i] = dgamma[i].add(dyr[i].mul(xhat[i]));
            dbeta[i] = dbeta[i].add(dyr[i]);
        }
        let m1 = row_sum(&dxhat).mul(inv_n);
        let m2 = row_dot(&dxhat, &xhat).mul(inv_n);
        for i in 0..dim {
            dxr[i] = rstd.mul(dxhat[i].sub(m1).sub(xhat[i].mul(m2)));
        }
    }
    Ok((T::storage(out), Shape::from(n + 2 * dim)))
}

impl CustomOp3 for LayerNormGrad {
    fn name(&self) -> &'static str {
        "layer-norm-grad"
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
        match s1 {
            CpuStorage::F32(_) => ln_bwd::<f32>(self.eps, s1, l1, s2, l2, s3, l3),
            CpuStorage::F64(_) => ln_bwd::<f64>(self.eps, s1, l1, s2, l2, s3, l3),
            _ => bail!("layer norm supports f32 and f64"),
        }
    }
}

// ---------------------------------------------------------------- conv1d

/// Channels-last 1-D convolution: `x [B, T, C_in]`, `w [K * C_in, C_out]`
/// (row `j * C_in + c` is tap `j` of channel `c`), `b [C_out]`, zero
/// padding on both ends. Over a padded input the im2col matrix is a strided
/// view, so no column buffer is built.
pub(crate) fn conv1d(x: &Tensor, w: &Tensor, b: &Tensor, kernel: usize, padding: usize) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op3(w, b, ConvOp { kernel, padding })?)
}

#[derive(Clone, Copy)]
struct ConvOp {
    kernel: usize,
    padding: usize,
}

#[derive(Clone, Copy)]
struct ConvGrad {
    kernel: usize,
    padding: usize,
}

struct ConvDims {
    b: usize,
    t: usize,
    c_in: usize,
    c_out: usize,
    t_pad: usize,
    t_out: usize,
}

fn conv_dims(op: ConvOp, lx: &Layout, lw: &Layout) -> candle_core::Result<ConvDims> {
    let (b, t, c_in) = match lx.dims() {
        [a, b, c] => (*a, *b, *c),
        s => bail!("conv1d: input must be rank 3, got {s:?}"),
    };
    let (rows, c_out) = dims2(lw, "conv1d weight")?;
    let t_pad = t + 2 * op.padding;
    if rows != op.kernel * c_in || op.kernel == 0 || t_pad < op.kernel {
        bail!("conv1d: input {:?} and weight {:?} disagree with kernel {}", lx.dims(), lw.dims(), op.kernel);
    }
    Ok(ConvDims {
        b,
        t,
        c_in,
        c_out,
        t_pad,
        t_out: t_pad + 1 - op.kernel,
    })
}

fn pad_time<T: Elem>(x: &[T], d: &ConvDims, padding: usize) -> Vec<T> {
    let mut xp = vec![T::ZERO; d.b * d.t_pad * d.c_in];
    let row = d.t * d.c_in;
    for bi in 0..d.b {
        let dst = bi * d.t_pad * d.c_in + padding * d.c_in;
        xp[dst..dst + row].copy_from_slice(&x[bi * row..(bi + 1) * row]);
    }
    xp
}

fn conv_fwd<T: Elem>(
    op: ConvOp,
    sx: &CpuStorage,
    lx: &Layout,
    sw: &CpuStorage,
    lw: &Layout,
    sb: &CpuStorage,
    lb: &Layout,
) -> candle_core::Result<(CpuStorage, Shape)> {
    let d = conv_dims(op, lx, lw)?;
    if lb.dims() != [d.c_out] {
        bail!("conv1d: bias {:?} for {} outputs", lb.dims(), d.c_out);
    }
    let (x, w, bias) = (
        contiguous::<T>(sx, lx, "conv1d")?,
        contiguous::<T>(sw, lw, "conv1d")?,
        contiguous::<T>(sb, lb, "conv1d")?,
    );
    let xp = pad_time(x, &d, op.padding);
    let mut out = Vec::with_capacity(d.b * d.t_out * d.c_out);
    for _ in 0..d.b * d.t_out {
        out.extend_from_slice(bias);
    }
    let k_cols = op.kernel * d.c_in;
    for bi in 0..d.b {
        matmul(
            d.t_out,
            d.c_out,
            k_cols,
            &mut out,
            bi * d.t_out * d.c_out,
            d.c_out,
            true,
            (View::at(&xp, bi * d.t_pad * d.c_in, d.c_in, 1), &xp),
            (View::at(w, 0, d.c_out, 1), w),
            T::from_f64(1.0),
        );
    }
    Ok((T::storage(out), Shape::from((d.b, d.t_out, d.c_out))))
}

impl CustomOp3 for ConvOp {
    fn name(&self) -> &'static str {
        "conv1d"
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
        match s1 {
            CpuStorage::F32(_) => conv_fwd::<f32>(*self, s1, l1, s2, l2, s3, l3),
            CpuStorage::F64(_) => conv_fwd::<f64>(*self, s1, l1, s2, l2, s3, l3),
            _ => bail!("conv1d supports f32 and f64"),
        }
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _b: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let n = x.elem_count();
        let (rows, c_out) = w.dims2()?;
        let packed = x.contiguous()?.apply_op3_no_bwd(
            &w.contiguous()?,
            &grad.contiguous()?,
            &ConvGrad {
                kernel: self.kernel,
                padding: self.padding,
            },
        )?;
        let dx = packed.narrow(0, 0, n)?.reshape(x.shape())?;
        let dw = packed.narrow(0, n, rows * c_out)?.reshape((rows, c_out))?;
        let db = packed.narrow(0, n + rows * c_out, c_out)?;
        Ok((Some(dx), Some(dw), Some(db)))
    }
}

fn conv_bwd<T: Elem>(
    op: ConvGrad,
    sx: &CpuStorage,
    lx: &Layout,
    sw: &CpuStorage,
    lw: &Layout,
    sg: &CpuStorage,
    lg: &Layout,
) -> candle_core::Result<(CpuStorage, Shape)> {
    let fwd = ConvOp {
        kernel: op.kernel,
        padding: op.padding,
    };
    let d = conv_dims(fwd, lx, lw)?;
    let (x, w, g) = (
        contiguous::<T>(sx, lx, "conv1d")?,
        contiguous::<T>(sw, lw, "conv1d")?,
        contiguous::<T>(sg, lg, "conv1d")?,
    );
    let xp = pad_time(x, &d, op.padding);
    let k_cols = op.kernel * d.c_in;
    let n = x.len();
    let total = n + k_cols * d.c_out + d.c_out;
    let mut out = vec![T::ZERO; total];
    let mut cols = vec![T::ZERO; d.t_out * k_cols];
    let one = T::from_f64(1.0);
    for bi in 0..d.b {
        let g_off = bi * d.t_out * d.c_out;
        let gv = View::at(g, g_off, d.c_out, 1);
        // dW += colsᵀ · g
        let xv = View::at(&xp, bi * d.t_pad * d.c_in, d.c_in, 1);
        let (dx_all, rest) = out.split_at_mut(n);
        matmul(k_cols, d.c_out, d.t_out, rest, 0, d.c_out, bi > 0, (xv.t(), &xp), (gv, g), one);
        // dcols = g · Wᵀ, scattered back onto the (unpadded) input
        matmul(d.t_out, k_cols, d.c_out, &mut cols, 0, k_cols, false, (gv, g), (View::at(w, 0, d.c_out, 1).t(), w), one);
        let dx = &mut dx_all[bi * d.t * d.c_in..(bi + 1) * d.t * d.c_in];
        for t in 0..d.t_out {
            for j in 0..op.kernel {
                let Some(src_t) = (t + j).checked_sub(op.padding).filter(|&s| s < d.t) else {
                    continue;
                };
                let src = &cols[t * k_cols + j * d.c_in..t * k_cols + (j + 1) * d.c_in];
                let dst = &mut dx[src_t * d.c_in..(src_t + 1) * d.c_in];
                for (a, &v) in dst.iter_mut().zip(src) {
                    *a = a.add(v);
                }
            }
        }
    }
    let db = &mut out[n + k_cols * d.c_out..];
    for row in g.chunks_exact(d.c_out.max(1)) {
        for (a, &v) in db.iter_mut().zip(row) {
            *a = a.add(v);
        }
    }
    Ok((T::storage(out), Shape::from(total)))
}

impl CustomOp3 for ConvGrad {
    fn name(&self) -> &'static str {
        "conv1d-grad"
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
        match s1 {
            CpuStorage::F32(_) => conv_bwd::<f32>(*self, s1, l1, s2, l2, s3, l3),
            CpuStorage::F64(_) => conv_bwd::<f64>(*self, s1, l1, s2, l2, s3, l3),
            _ => bail!("conv1d supports f32 and f64"),
        }
    }
}

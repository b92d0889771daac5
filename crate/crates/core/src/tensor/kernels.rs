//! Forward and backward kernels on plain tensors.
//!
//! Every reduction runs in a fixed left-to-right order so results do not
//! depend on how a batch is laid out.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::tensor::scalar::{c, Scalar};
use crate::tensor::tensor::{Mask, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    LeakyRelu { slope: f64 },
    Gelu,
    Sigmoid,
}

impl Activation {
    pub fn apply<F: Scalar>(self, x: F) -> F {
        match self {
            Activation::LeakyRelu { slope } => {
                if x >= F::zero() {
                    x
                } else {
                    x * c(slope)
                }
            }
            Activation::Gelu => x * c(0.5) * (F::one() + (x * c(std::f64::consts::FRAC_1_SQRT_2)).erf()),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative at `x`, given the forward output `y`.
    pub fn derivative<F: Scalar>(self, x: F, y: F) -> F {
        match self {
            Activation::LeakyRelu { slope } => {
                if x >= F::zero() {
                    F::one()
                } else {
                    c(slope)
                }
            }
            Activation::Gelu => {
                let cdf = c::<F>(0.5) * (F::one() + (x * c(std::f64::consts::FRAC_1_SQRT_2)).erf());
                let pdf = (-x * x * c(0.5)).exp() * c(0.398_942_280_401_432_7);
                cdf + x * pdf
            }
            Activation::Sigmoid => y * (F::one() - y),
        }
    }
}

#[inline]
pub fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// `log(1 + exp(x))` without overflow.
#[inline]
pub fn softplus<F: Scalar>(x: F) -> F {
    x.max(F::zero()) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn axpy<F: Scalar>(y: &mut [F], a: F, x: &[F]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + a * xi;
    }
}

/// `A · B` where `A` is `[..., k]` (leading axes flattened into rows) and
/// `B` is `[k, p]`. The result keeps `A`'s leading axes.
pub fn matmul<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    if a.rank() < 2 || b.rank() != 2 || a.last_dim() != b.shape()[0] {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let k = a.last_dim();
    let p = b.shape()[1];
    let rows = a.numel() / k;
    let mut out = vec![F::zero(); rows * p];
    let bd = b.data();
    for (arow, orow) in a.data().chunks_exact(k).zip(out.chunks_exact_mut(p)) {
        for (t, &av) in arow.iter().enumerate() {
            axpy(orow, av, &bd[t * p..(t + 1) * p]);
        }
    }
    let mut shape = a.shape().to_vec();
    *shape.last_mut().unwrap() = p;
    Tensor::new(&shape, out)
}

/// Accumulates `dA += G · Bᵀ` and `dB += Aᵀ · G`.
pub(crate) fn matmul_backward<F: Scalar>(
    a: &Tensor<F>,
    b: &Tensor<F>,
    g: &[F],
    ga: Option<&mut [F]>,
    gb: Option<&mut [F]>,
) {
    let k = a.last_dim();
    let p = b.shape()[1];
    let bd = b.data();
    if let Some(ga) = ga {
        let mut bt = vec![F::zero(); k * p];
        for t in 0..k {
            for q in 0..p {
                bt[q * k + t] = bd[t * p + q];
            }
        }
        for (grow, garow) in g.chunks_exact(p).zip(ga.chunks_exact_mut(k)) {
            for (q, &gv) in grow.iter().enumerate() {
                axpy(garow, gv, &bt[q * k..(q + 1) * k]);
            }
        }
    }
    if let Some(gb) = gb {
        for (arow, grow) in a.data().chunks_exact(k).zip(g.chunks_exact(p)) {
            for (t, &av) in arow.iter().enumerate() {
                axpy(&mut gb[t * p..(t + 1) * p], av, grow);
            }
        }
    }
}

pub fn transpose2d<F: Scalar>(a: &Tensor<F>) -> Result<Tensor<F>> {
    if a.rank() != 2 {
        return Err(Error::dim("transpose", a.shape(), &[0, 0]));
    }
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data()[i * n + j];
        }
    }
    Tensor::new(&[n, m], out)
}

pub(crate) fn check_odd_kernel(k: usize) -> Result<()> {
    if k.is_multiple_of(2) {
        return Err(Error::Config(format!("kernel size must be odd, got {k}")));
    }
    Ok(())
}

struct Conv2dGeom {
    groups: usize,
    n1: usize,
    n2: usize,
    k: usize,
    cin: usize,
    cout: usize,
}

fn conv2d_geom<F: Scalar>(x: &Tensor<F>, kernel: &Tensor<F>, mask: &Mask) -> Result<Conv2dGeom> {
    let ks = kernel.shape();
    let xs = x.shape();
    if ks.len() != 4 || ks[0] != ks[1] {
        return Err(Error::dim("conv2d kernel", ks, &[0, 0, 0, 0]));
    }
    check_odd_kernel(ks[0])?;
    if xs.len() < 3 || xs[xs.len() - 1] != ks[2] {
        return Err(Error::dim("conv2d", xs, ks));
    }
    mask.check_covers("conv2d mask", x)?;
    let r = xs.len();
    Ok(Conv2dGeom {
        groups: xs[..r - 3].iter().product(),
        n1: xs[r - 3],
        n2: xs[r - 2],
        k: ks[0],
        cin: ks[2],
        cout: ks[3],
    })
}

/// Same-size 2-D convolution over a `[..., n, n, c_in]` grid with a
/// `[k, k, c_in, c_out]` kernel and no bias. Cells outside the grid and
/// cells where `mask` is false read as zero; output cells where `mask` is
/// false are exactly zero.
pub fn conv2d_zero_pad<F: Scalar>(x: &Tensor<F>, kernel: &Tensor<F>, mask: &Mask) -> Result<Tensor<F>> {
    let g = conv2d_geom(x, kernel, mask)?;
    let xd = x.data();
    let kd = kernel.data();
    let (cin, cout) = (g.cin, g.cout);
    let mut out = vec![F::zero(); g.groups * g.n1 * g.n2 * cout];
    let mut taps = Vec::with_capacity(g.k * g.k);
    for cell in 0..g.groups * g.n1 * g.n2 {
        if !g.reads(mask, cell, &mut taps) {
            continue;
        }
        let ocell = &mut out[cell * cout..(cell + 1) * cout];
        for (blk, oblk) in ocell.chunks_mut(LANES).enumerate() {
            let lo = blk * LANES;
            let mut acc = [F::zero(); LANES];
            let width = oblk.len();
            for &(tap, src) in &taps {
                let xin = &xd[src * cin..(src + 1) * cin];
                let kblock = &kd[tap * cin * cout..(tap + 1) * cin * cout];
                for (&v, krow) in xin.iter().zip(kblock.chunks_exact(cout)) {
                    axpy_lanes(&mut acc, v, &krow[lo..lo + width]);
                }
            }
            oblk.copy_from_slice(&acc[..width]);
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = cout;
    Tensor::new(&shape, out)
}

/// Accumulator width of the blocked convolution loops.
const LANES: usize = 32;

#[inline(always)]
fn axpy_lanes<F: Scalar>(acc: &mut [F; LANES], v: F, w: &[F]) {
    if let Ok(w) = <&[F; LANES]>::try_from(w) {
        for l in 0..LANES {
            acc[l] = acc[l] + v * w[l];
        }
    } else {
        for (a, &x) in acc.iter_mut().zip(w) {
            *a = *a + v * x;
        }
    }
}

impl Conv2dGeom {
    /// Fills `taps` with `(tap index, source cell)` for every valid input
    /// cell read by output `cell`. Returns false when `cell` is masked.
    fn reads(&self, mask: &Mask, cell: usize, taps: &mut Vec<(usize, usize)>) -> bool {
        taps.clear();
        let valid = mask.valid();
        if !valid[cell] {
            return false;
        }
        let half = self.k / 2;
        let plane = self.n1 * self.n2;
        let cell0 = cell / plane * plane;
        let (i, j) = ((cell - cell0) / self.n2, (cell - cell0) % self.n2);
        for di in 0..self.k {
            let Some(ii) = (i + di).checked_sub(half).filter(|&v| v < self.n1) else {
                continue;
            };
            for dj in 0..self.k {
                let Some(jj) = (j + dj).checked_sub(half).filter(|&v| v < self.n2) else {
                    continue;
                };
                let src = cell0 + ii * self.n2 + jj;
                if valid[src] {
                    taps.push((di * self.k + dj, src));
                }
            }
        }
        true
    }
}

pub(crate) fn conv2d_backward<F: Scalar>(
    x: &Tensor<F>,
    kernel: &Tensor<F>,
    mask: &Mask,
    gout: &[F],
    gx: Option<&mut [F]>,
    gk: Option<&mut [F]>,
) {
    let g = conv2d_geom(x, kernel, mask).expect("validated in forward");
    let (cin, cout) = (g.cin, g.cout);
    let cells = g.groups * g.n1 * g.n2;
    let ntaps = g.k * g.k;
    // (output cell, source cell) pairs grouped by tap.
    let mut by_tap: Vec<Vec<(usize, usize)>> = vec![Vec::new(); ntaps];
    let mut taps = Vec::with_capacity(ntaps);
    for cell in 0..cells {
        if g.reads(mask, cell, &mut taps) {
            for &(tap, src) in &taps {
                by_tap[tap].push((cell, src));
            }
        }
    }

    if let Some(gx) = gx {
        // Per-tap transposed kernel `[k, k, c_out, c_in]`.
        let kd = kernel.data();
        let mut kt = vec![F::zero(); kd.len()];
        for tap in 0..ntaps {
            for ci in 0..cin {
                for co in 0..cout {
                    kt[(tap * cout + co) * cin + ci] = kd[(tap * cin + ci) * cout + co];
                }
            }
        }
        // Source cell -> the (tap, output cell) pairs that read it.
        let mut readers: Vec<Vec<(usize, usize)>> = vec![Vec::new(); cells];
        for (tap, pairs) in by_tap.iter().enumerate() {
            for &(cell, src) in pairs {
                readers[src].push((tap, cell));
            }
        }
        for (src, list) in readers.iter().enumerate() {
            if list.is_empty() {
                continue;
            }
            let gxin = &mut gx[src * cin..(src + 1) * cin];
            for (blk, gblk) in gxin.chunks_mut(LANES).enumerate() {
                let lo = blk * LANES;
                let width = gblk.len();
                let mut acc = [F::zero(); LANES];
                acc[..width].copy_from_slice(gblk);
                for &(tap, cell) in list {
                    let gcell = &gout[cell * cout..(cell + 1) * cout];
                    let kblock = &kt[tap * cout * cin..(tap + 1) * cout * cin];
                    for (&gv, krow) in gcell.iter().zip(kblock.chunks_exact(cin)) {
                        axpy_lanes(&mut acc, gv, &krow[lo..lo + width]);
                    }
                }
                gblk.copy_from_slice(&acc[..width]);
            }
        }
    }

    if let Some(gk) = gk {
        let xd = x.data();
        for (tap, pairs) in by_tap.iter().enumerate() {
            for ci in 0..cin {
                let base = (tap * cin + ci) * cout;
                for (blk, gblk) in gk[base..base + cout].chunks_mut(LANES).enumerate() {
                    let lo = blk * LANES;
                    let width = gblk.len();
                    let mut acc = [F::zero(); LANES];
                    acc[..width].copy_from_slice(gblk);
                    for &(cell, src) in pairs {
                        let v = xd[src * cin + ci];
                        axpy_lanes(&mut acc, v, &gout[cell * cout + lo..cell * cout + lo + width]);
                    }
                    gblk.copy_from_slice(&acc[..width]);
                }
            }
        }
    }
}

fn conv1d_geom<F: Scalar>(x: &Tensor<F>, kernel: &Tensor<F>, mask: &Mask) -> Result<(usize, usize, usize, usize, usize)> {
    let ks = kernel.shape();
    let xs = x.shape();
    if ks.len() != 3 {
        return Err(Error::dim("conv1d kernel", ks, &[0, 0, 0]));
    }
    check_odd_kernel(ks[0])?;
    if xs.len() < 2 || xs[xs.len() - 1] != ks[1] {
        return Err(Error::dim("conv1d", xs, ks));
    }
    mask.check_covers("conv1d mask", x)?;
    let r = xs.len();
    Ok((xs[..r - 2].iter().product(), xs[r - 2], ks[0], ks[1], ks[2]))
}

/// Same-length 1-D convolution over `[..., n, c_in]` with a
/// `[k, c_in, c_out]` kernel, no bias, zero padding, masked like
/// [`conv2d_zero_pad`].
pub fn conv1d_zero_pad<F: Scalar>(x: &Tensor<F>, kernel: &Tensor<F>, mask: &Mask) -> Result<Tensor<F>> {
    let (groups, n, k, cin, cout) = conv1d_geom(x, kernel, mask)?;
    let half = k / 2;
    let valid = mask.valid();
    let (xd, kd) = (x.data(), kernel.data());
    let mut out = vec![F::zero(); groups * n * cout];
    for grp in 0..groups {
        for i in 0..n {
            let pos = grp * n + i;
            if !valid[pos] {
                continue;
            }
            let orow = &mut out[pos * cout..(pos + 1) * cout];
            for d in 0..k {
                let Some(ii) = (i + d).checked_sub(half).filter(|&v| v < n) else {
                    continue;
                };
                let src = grp * n + ii;
                if !valid[src] {
                    continue;
                }
                for (ci, &v) in xd[src * cin..(src + 1) * cin].iter().enumerate() {
                    let off = (d * cin + ci) * cout;
                    axpy(orow, v, &kd[off..off + cout]);
                }
            }
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = cout;
    Tensor::new(&shape, out)
}

pub(crate) fn conv1d_backward<F: Scalar>(
    x: &Tensor<F>,
    kernel: &Tensor<F>,
    mask: &Mask,
    gout: &[F],
    mut gx: Option<&mut [F]>,
    mut gk: Option<&mut [F]>,
) {
    let (groups, n, k, cin, cout) = conv1d_geom(x, kernel, mask).expect("validated in forward");
    let half = k / 2;
    let valid = mask.valid();
    let (xd, kd) = (x.data(), kernel.data());
    let mut kt = vec![F::zero(); kd.len()];
    for d in 0..k {
        for ci in 0..cin {
            for co in 0..cout {
                kt[(d * cout + co) * cin + ci] = kd[(d * cin + ci) * cout + co];
            }
        }
    }
    for grp in 0..groups {
        for i in 0..n {
            let pos = grp * n + i;
            if !valid[pos] {
                continue;
            }
            let grow = &gout[pos * cout..(pos + 1) * cout];
            for d in 0..k {
                let Some(ii) = (i + d).checked_sub(half).filter(|&v| v < n) else {
                    continue;
                };
                let src = grp * n + ii;
                if !valid[src] {
                    continue;
                }
                if let Some(gx) = gx.as_deref_mut() {
                    let gxin = &mut gx[src * cin..(src + 1) * cin];
                    for (co, &gv) in grow.iter().enumerate() {
                        let off = (d * cout + co) * cin;
                        axpy(gxin, gv, &kt[off..off + cin]);
                    }
                }
                if let Some(gk) = gk.as_deref_mut() {
                    for ci in 0..cin {
                        let off = (d * cin + ci) * cout;
                        axpy(&mut gk[off..off + cout], xd[src * cin + ci], grow);
                    }
                }
            }
        }
    }
}

/// Normalized values and reciprocal standard deviations kept for the
/// backward pass.
pub(crate) struct LayerNormCache<F> {
    pub xhat: Vec<F>,
    pub inv_std: Vec<F>,
}

/// Layer normalization over the trailing (feature) axis:
/// `(x - mean) / sqrt(var + eps) * gamma + beta`, with the biased variance.
pub fn layer_norm_feature<F: Scalar>(x: &Tensor<F>, gamma: &Tensor<F>, beta: &Tensor<F>, eps: f64) -> Result<Tensor<F>> {
    Ok(layer_norm_forward(x, gamma, beta, eps)?.0)
}

pub(crate) fn layer_norm_forward<F: Scalar>(
    x: &Tensor<F>,
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
    eps: f64,
) -> Result<(Tensor<F>, LayerNormCache<F>)> {
    let cdim = x.last_dim();
    if gamma.shape() != [cdim] || beta.shape() != [cdim] {
        return Err(Error::dim("layer_norm", x.shape(), gamma.shape()));
    }
    if !(eps > 0.0) {
        return Err(Error::Config(format!("layer norm eps must be positive, got {eps}")));
    }
    let cells = x.numel() / cdim;
    let denom: F = c(cdim as f64);
    let mut out = vec![F::zero(); x.numel()];
    let mut xhat = vec![F::zero(); x.numel()];
    let mut inv_std = vec![F::zero(); cells];
    for (cell, xs) in x.data().chunks_exact(cdim).enumerate() {
        let mean = xs.iter().fold(F::zero(), |s, &v| s + v) / denom;
        let var = xs.iter().fold(F::zero(), |s, &v| s + (v - mean) * (v - mean)) / denom;
        let inv = F::one() / (var + c(eps)).sqrt();
        inv_std[cell] = inv;
        let base = cell * cdim;
        for t in 0..cdim {
            let h = (xs[t] - mean) * inv;
            xhat[base + t] = h;
            out[base + t] = h * gamma.data()[t] + beta.data()[t];
        }
    }
    Ok((Tensor::new(x.shape(), out)?, LayerNormCache { xhat, inv_std }))
}

pub(crate) fn layer_norm_backward<F: Scalar>(
    cache: &LayerNormCache<F>,
    gamma: &Tensor<F>,
    gout: &[F],
    gx: Option<&mut [F]>,
    ggamma: Option<&mut [F]>,
    gbeta: Option<&mut [F]>,
) {
    let cdim = gamma.numel();
    let gd = gamma.data();
    if let Some(gg) = ggamma {
        for (grow, hrow) in gout.chunks_exact(cdim).zip(cache.xhat.chunks_exact(cdim)) {
            for t in 0..cdim {
                gg[t] = gg[t] + grow[t] * hrow[t];
            }
        }
    }
    if let Some(gb) = gbeta {
        for grow in gout.chunks_exact(cdim) {
            for t in 0..cdim {
                gb[t] = gb[t] + grow[t];
            }
        }
    }
    if let Some(gx) = gx {
        let denom: F = c(cdim as f64);
        for (cell, (grow, hrow)) in gout.chunks_exact(cdim).zip(cache.xhat.chunks_exact(cdim)).enumerate() {
            let mut sum_g = F::zero();
            let mut sum_gh = F::zero();
            for t in 0..cdim {
                let gy = grow[t] * gd[t];
                sum_g = sum_g + gy;
                sum_gh = sum_gh + gy * hrow[t];
            }
            let inv = cache.inv_std[cell];
            let base = cell * cdim;
            for t in 0..cdim {
                let gy = grow[t] * gd[t];
                gx[base + t] = gx[base + t] + inv * (gy - sum_g / denom - hrow[t] * sum_gh / denom);
            }
        }
    }
}

pub fn activation<F: Scalar>(x: &Tensor<F>, kind: Activation) -> Tensor<F> {
    x.map(|v| kind.apply(v))
}

/// Validates that `groups` partition `0..rows` contiguously and in order.
pub fn check_groups(groups: &[Range<usize>], rows: usize) -> Result<()> {
    let mut next = 0;
    for (w, g) in groups.iter().enumerate() {
        if g.is_empty() {
            return Err(Error::Validation(format!("piece group {w} is empty")));
        }
        if g.start != next {
            return Err(Error::Validation(format!(
                "piece group {w} starts at {} but the previous group ended at {next}",
                g.start
            )));
        }
        next = g.end;
    }
    if next != rows {
        return Err(Error::Validation(format!("piece groups cover {next} of {rows} rows")));
    }
    Ok(())
}

/// Row `w` of the output is the elementwise maximum of the rows in
/// `groups[w]`. Returns the output and the source row of every output
/// element (first maximum wins).
pub fn piecewise_max_pool<F: Scalar>(pieces: &Tensor<F>, groups: &[Range<usize>]) -> Result<Tensor<F>> {
    Ok(max_pool_forward(pieces, groups)?.0)
}

pub(crate) fn max_pool_forward<F: Scalar>(
    pieces: &Tensor<F>,
    groups: &[Range<usize>],
) -> Result<(Tensor<F>, Vec<usize>)> {
    if pieces.rank() != 2 {
        return Err(Error::dim("piecewise_max_pool", pieces.shape(), &[0, 0]));
    }
    let (p, d) = (pieces.shape()[0], pieces.shape()[1]);
    check_groups(groups, p)?;
    let pd = pieces.data();
    let mut out = Vec::with_capacity(groups.len() * d);
    let mut src = Vec::with_capacity(groups.len() * d);
    for g in groups {
        for t in 0..d {
            let mut best = g.start;
            for row in g.clone().skip(1) {
                if pd[row * d + t] > pd[best * d + t] {
                    best = row;
                }
            }
            out.push(pd[best * d + t]);
            src.push(best * d + t);
        }
    }
    Ok((Tensor::new(&[groups.len(), d], out)?, src))
}

//! Slice-level numeric kernels shared by the forward path and the backward
//! rules. Everything here is pure: identical inputs give bit-identical
//! outputs.

use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;

/// Strided matrix view: `(data, row_stride, col_stride)`.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub rs: usize,
    pub cs: usize,
}

impl<'a> View<'a> {
    pub fn new(data: &'a [f64], rs: usize, cs: usize) -> Self {
        Self { data, rs, cs }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn span(&self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * self.rs + (cols - 1) * self.cs + 1
        }
    }
}

/// `c[m×n] += a[m×k] · b[k×n]` with arbitrary strides.
pub(crate) fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    a: View<'_>,
    b: View<'_>,
    c: &mut [f64],
    c_rs: usize,
    c_cs: usize,
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!(a.span(m, k) <= a.data.len(), "gemm: a out of bounds");
    assert!(b.span(k, n) <= b.data.len(), "gemm: b out of bounds");
    let c_span = (m - 1) * c_rs + (n - 1) * c_cs + 1;
    assert!(c_span <= c.len(), "gemm: c out of bounds");
    // SAFETY: the asserts above keep every strided access of a, b and c
    // inside its slice; c does not alias a or b (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            1.0,
            c.as_mut_ptr(),
            c_rs as isize,
            c_cs as isize,
        );
    }
}

/// Static description of one 1-D convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub t: usize,
    pub dilation: usize,
}

impl ConvGeom {
    /// Time shift of tap `j` and the output range it touches.
    fn tap(&self, j: usize) -> Option<(isize, usize, usize)> {
        let half = (self.k - 1) / 2;
        let shift = self.dilation as isize * (j as isize - half as isize);
        let lo = (-shift).max(0) as usize;
        let hi = (self.t as isize - shift).min(self.t as isize);
        if hi <= lo as isize {
            None
        } else {
            Some((shift, lo, hi as usize))
        }
    }
}

/// One sample: `x` is `c_in × t`, `w` is `c_out × c_in × k`, `out` is
/// `c_out × t` and is overwritten.
pub(crate) fn conv1d_sample(g: ConvGeom, x: &[f64], w: &[f64], bias: Option<&[f64]>, out: &mut [f64]) {
    let t = g.t;
    match bias {
        Some(b) => {
            for (o, row) in out.chunks_exact_mut(t).enumerate() {
                row.fill(b[o]);
            }
        }
        None => out.fill(0.0),
    }
    for j in 0..g.k {
        let Some((shift, lo, hi)) = g.tap(j) else { continue };
        let len = hi - lo;
        let x_off = (lo as isize + shift) as usize;
        gemm_acc(
            g.c_out,
            g.c_in,
            len,
            View::new(&w[j..], g.c_in * g.k, g.k),
            View::new(&x[x_off..], t, 1),
            &mut out[lo..],
            t,
            1,
        );
    }
}

/// Accumulates input, kernel and bias gradients for one sample.
pub(crate) fn conv1d_sample_backward(
    g: ConvGeom,
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let t = g.t;
    if let Some(db) = db {
        for (o, row) in dout.chunks_exact(t).enumerate() {
            db[o] += row.iter().sum::<f64>();
        }
    }
    if let Some(dx) = dx {
        for j in 0..g.k {
            let Some((shift, lo, hi)) = g.tap(j) else { continue };
            let x_off = (lo as isize + shift) as usize;
            // dx[c, lo+s .. hi+s] += W_jᵀ · dout[:, lo..hi]
            gemm_acc(
                g.c_in,
                g.c_out,
                hi - lo,
                View::new(&w[j..], g.c_in * g.k, g.k).t(),
                View::new(&dout[lo..], t, 1),
                &mut dx[x_off..],
                t,
                1,
            );
        }
    }
    if let Some(dw) = dw {
        for j in 0..g.k {
            let Some((shift, lo, hi)) = g.tap(j) else { continue };
            let x_off = (lo as isize + shift) as usize;
            // dW_j += dout[:, lo..hi] · x[:, shifted]ᵀ
            gemm_acc(
                g.c_out,
                hi - lo,
                g.c_in,
                View::new(&dout[lo..], t, 1),
                View::new(&x[x_off..], t, 1).t(),
                &mut dw[j..],
                g.c_in * g.k,
                g.k,
            );
        }
    }
}

/// Interprets a feature map as `(batch, channels, frames)`; rank 2 is a
/// single sample.
pub(crate) fn bct(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, t] => Ok((1, c, t)),
        [b, c, t] => Ok((b, c, t)),
        _ => Err(shape_err!("expected C×T or B×C×T feature map, got {:?}", shape)),
    }
}

pub(crate) fn with_channels(shape: &[usize], c: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    let r = s.len();
    s[r - 2] = c;
    s
}

pub(crate) fn check_conv(
    input: &[usize],
    kernels: &[usize],
    bias: Option<&[usize]>,
    dilation: usize,
) -> Result<ConvGeom> {
    let (_, c_in, t) = bct(input)?;
    let [c_out, kc, k] = *kernels else {
        return Err(shape_err!("conv kernels must be C_out×C_in×k, got {:?}", kernels));
    };
    if kc != c_in {
        return Err(shape_err!("conv expects {} input channels, got {}", kc, c_in));
    }
    if k % 2 == 0 {
        return Err(invalid!("conv kernel size must be odd, got {}", k));
    }
    if dilation == 0 {
        return Err(invalid!("conv dilation must be positive"));
    }
    if let Some(b) = bias {
        if b != [c_out] {
            return Err(shape_err!("conv bias must be [{}], got {:?}", c_out, b));
        }
    }
    Ok(ConvGeom {
        c_in,
        c_out,
        k,
        t,
        dilation,
    })
}

/// Same-length dilated 1-D cross-correlation over a `C_in×T` or
/// `B×C_in×T` input.
pub fn conv1d(input: &Tensor, kernels: &Tensor, bias: Option<&Tensor>, dilation: usize) -> Result<Tensor> {
    let g = check_conv(input.shape(), kernels.shape(), bias.map(|b| b.shape()), dilation)?;
    let (b, _, t) = bct(input.shape())?;
    let mut out = vec![0.0; b * g.c_out * t];
    for (xs, os) in input
        .data()
        .chunks_exact(g.c_in * t)
        .zip(out.chunks_exact_mut(g.c_out * t))
    {
        conv1d_sample(g, xs, kernels.data(), bias.map(|b| b.data()), os);
    }
    Tensor::new(&with_channels(input.shape(), g.c_out), out)
}

pub(crate) fn check_affine(input: &[usize], weight: &[usize], bias: Option<&[usize]>) -> Result<(usize, usize, usize)> {
    let (rows, n) = match *input {
        [n] => (1, n),
        [b, n] => (b, n),
        _ => return Err(shape_err!("affine input must be [n] or [B,n], got {:?}", input)),
    };
    let [m, wn] = *weight else {
        return Err(shape_err!("affine weight must be m×n, got {:?}", weight));
    };
    if wn != n {
        return Err(shape_err!("affine weight expects {} inputs, got {}", wn, n));
    }
    if let Some(b) = bias {
        if b != [m] {
            return Err(shape_err!("affine bias must be [{}], got {:?}", m, b));
        }
    }
    Ok((rows, n, m))
}

/// `weight · input + bias` for a vector or a batch of row vectors.
pub fn affine(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (rows, n, m) = check_affine(input.shape(), weight.shape(), bias.map(|b| b.shape()))?;
    let mut out = vec![0.0; rows * m];
    affine_raw(rows, n, m, input.data(), weight.data(), bias.map(|b| b.data()), &mut out);
    let shape = if input.rank() == 1 { vec![m] } else { vec![rows, m] };
    Tensor::new(&shape, out)
}

pub(crate) fn affine_raw(rows: usize, n: usize, m: usize, x: &[f64], w: &[f64], b: Option<&[f64]>, out: &mut [f64]) {
    if let Some(b) = b {
        for r in out.chunks_exact_mut(m) {
            r.copy_from_slice(b);
        }
    } else {
        out.fill(0.0);
    }
    // out[rows×m] += x[rows×n] · wᵀ[n×m]
    gemm_acc(rows, n, m, View::new(x, n, 1), View::new(w, n, 1).t(), out, m, 1);
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Saved per-step state of one LSTM pass over one sequence.
pub(crate) struct LstmTrace {
    /// Gate activations `[T][4h]` in (input, forget, cell, output) order.
    pub gates: Vec<f64>,
    /// Cell states `[T][h]`.
    pub cells: Vec<f64>,
    /// Hidden states `[T][h]`.
    pub hidden: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct LstmGeom {
    pub d: usize,
    pub h: usize,
    pub t: usize,
}

/// Runs the recurrence over `x` (`d × t`, time along columns) in processing
/// order `order`. Outputs land in `out` (`h × t`) at the original frame index.
pub(crate) fn lstm_sample(
    g: LstmGeom,
    x: &[f64],
    w_ih: &[f64],
    w_hh: &[f64],
    bias: &[f64],
    reverse: bool,
    out: &mut [f64],
) -> LstmTrace {
    let LstmGeom { d, h, t } = g;
    let h4 = 4 * h;
    // Input projections for every frame at once: pre[t][4h].
    let mut pre = vec![0.0; t * h4];
    for r in pre.chunks_exact_mut(h4) {
        r.copy_from_slice(bias);
    }
    gemm_acc(t, d, h4, View::new(x, 1, t), View::new(w_ih, d, 1).t(), &mut pre, h4, 1);

    let mut gates = vec![0.0; t * h4];
    let mut cells = vec![0.0; t * h];
    let mut hidden = vec![0.0; t * h];
    let mut h_prev = vec![0.0; h];
    let mut c_prev = vec![0.0; h];
    for step in 0..t {
        let frame = if reverse { t - 1 - step } else { step };
        let z = &mut gates[step * h4..(step + 1) * h4];
        z.copy_from_slice(&pre[frame * h4..(frame + 1) * h4]);
        for (r, zr) in z.iter_mut().enumerate() {
            let row = &w_hh[r * h..(r + 1) * h];
            *zr += row.iter().zip(&h_prev).map(|(a, b)| a * b).sum::<f64>();
        }
        for u in 0..h {
            let i = sigmoid(z[u]);
            let f = sigmoid(z[h + u]);
            let gg = z[2 * h + u].tanh();
            let o = sigmoid(z[3 * h + u]);
            z[u] = i;
            z[h + u] = f;
            z[2 * h + u] = gg;
            z[3 * h + u] = o;
            let c = f * c_prev[u] + i * gg;
            let hv = o * c.tanh();
            cells[step * h + u] = c;
            hidden[step * h + u] = hv;
            out[u * t + frame] = hv;
        }
        h_prev.copy_from_slice(&hidden[step * h..(step + 1) * h]);
        c_prev.copy_from_slice(&cells[step * h..(step + 1) * h]);
    }
    LstmTrace { gates, cells, hidden }
}

/// Backpropagation through time for one sequence.
#[allow(clippy::too_many_arguments)]
pub(crate) fn lstm_sample_backward(
    g: LstmGeom,
    x: &[f64],
    w_ih: &[f64],
    w_hh: &[f64],
    reverse: bool,
    trace: &LstmTrace,
    dout: &[f64],
    dx: Option<&mut [f64]>,
    dw_ih: Option<&mut [f64]>,
    dw_hh: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let LstmGeom { d, h, t } = g;
    let h4 = 4 * h;
    // dz[step][4h]: gradient w.r.t. gate pre-activations.
    let mut dz = vec![0.0; t * h4];
    let mut dh_next = vec![0.0; h];
    let mut dc_next = vec![0.0; h];
    for step in (0..t).rev() {
        let frame = if reverse { t - 1 - step } else { step };
        let z = &trace.gates[step * h4..(step + 1) * h4];
        let dzs = &mut dz[step * h4..(step + 1) * h4];
        for u in 0..h {
            let (i, f, gg, o) = (z[u], z[h + u], z[2 * h + u], z[3 * h + u]);
            let c = trace.cells[step * h + u];
            let c_prev = if step == 0 { 0.0 } else { trace.cells[(step - 1) * h + u] };
            let tc = c.tanh();
            let dh = dout[u * t + frame] + dh_next[u];
            let dc = dh * o * (1.0 - tc * tc) + dc_next[u];
            dzs[u] = dc * gg * i * (1.0 - i);
            dzs[h + u] = dc * c_prev * f * (1.0 - f);
            dzs[2 * h + u] = dc * i * (1.0 - gg * gg);
            dzs[3 * h + u] = dh * tc * o * (1.0 - o);
            dc_next[u] = dc * f;
        }
        // dh_prev = W_hhᵀ · dz
        dh_next.fill(0.0);
        for (r, &dzr) in dzs.iter().enumerate() {
            if dzr != 0.0 {
                let row = &w_hh[r * h..(r + 1) * h];
                for (acc, w) in dh_next.iter_mut().zip(row) {
                    *acc += dzr * w;
                }
            }
        }
    }
    // Reorder dz by frame so the input-side products are single GEMMs.
    let mut dz_frame = vec![0.0; t * h4];
    for step in 0..t {
        let frame = if reverse { t - 1 - step } else { step };
        dz_frame[frame * h4..(frame + 1) * h4].copy_from_slice(&dz[step * h4..(step + 1) * h4]);
    }
    if let Some(db) = db {
        for r in dz.chunks_exact(h4) {
            for (a, b) in db.iter_mut().zip(r) {
                *a += b;
            }
        }
    }
    if let Some(dx) = dx {
        // dx[d×t] += W_ihᵀ[d×4h] · dz_frameᵀ[4h×t]
        gemm_acc(d, h4, t, View::new(w_ih, d, 1).t(), View::new(&dz_frame, h4, 1).t(), dx, t, 1);
    }
    if let Some(dw_ih) = dw_ih {
        // dW_ih[4h×d] += dz_frameᵀ[4h×t] · xᵀ[t×d]
        gemm_acc(h4, t, d, View::new(&dz_frame, h4, 1).t(), View::new(x, 1, t), dw_ih, d, 1);
    }
    if let Some(dw_hh) = dw_hh {
        // dW_hh[4h×h] += Σ_step dz[step] ⊗ h[step−1]
        if t > 1 {
            gemm_acc(
                h4,
                t - 1,
                h,
                View::new(&dz[h4..], h4, 1).t(),
                View::new(&trace.hidden, h, 1),
                dw_hh,
                h,
                1,
            );
        }
    }
}

//! Grouped 2D convolution kernels (single image, `C×H×W` layout).
//!
//! The padded input is split into `stride²` phase planes. Every kernel tap
//! then reads one plane at a fixed offset, so a group's output is a sum of
//! `k²` GEMMs over shifted views with no patch copies. Depthwise convolutions
//! run direct loops instead. Groups run in parallel; each GEMM also splits
//! its output rows.

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{gemm_strided, MatLayout, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2dSpec {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Self {
            stride,
            padding,
            groups,
        }
    }

    /// Stride 1, zero padding `(k-1)/2`: output keeps the input's spatial size.
    pub fn same(k: usize, groups: usize) -> Self {
        Self::new(1, (k - 1) / 2, groups)
    }
}

/// Resolved sizes of one convolution call.
#[derive(Clone, Copy, Debug)]
struct Geometry {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    cin_g: usize,
    cout_g: usize,
    k: usize,
    h_out: usize,
    w_out: usize,
    spec: Conv2dSpec,
}

impl Geometry {
    fn resolve(x: &[usize], w: &[usize], spec: Conv2dSpec) -> Result<Self> {
        if x.len() != 3 {
            return Err(Error::validation(format!(
                "conv input must be C×H×W, got {x:?}"
            )));
        }
        if w.len() != 4 || w[2] != w[3] {
            return Err(Error::validation(format!(
                "conv weight must be Co×Cg×k×k, got {w:?}"
            )));
        }
        if spec.groups == 0 || spec.stride == 0 {
            return Err(Error::validation("conv groups and stride must be positive"));
        }
        let (c_in, h, wd) = (x[0], x[1], x[2]);
        let (c_out, cin_g, k) = (w[0], w[1], w[2]);
        if cin_g * spec.groups != c_in {
            return Err(Error::validation(format!(
                "conv channel mismatch: {} groups × {} per group != {} input channels",
                spec.groups, cin_g, c_in
            )));
        }
        if c_out % spec.groups != 0 {
            return Err(Error::validation(format!(
                "conv output channels {} not divisible by {} groups",
                c_out, spec.groups
            )));
        }
        let (hp, wp) = (h + 2 * spec.padding, wd + 2 * spec.padding);
        if hp < k || wp < k {
            return Err(Error::validation(format!(
                "conv input {h}×{wd} (padding {}) smaller than kernel {k}",
                spec.padding
            )));
        }
        Ok(Self {
            c_in,
            h,
            w: wd,
            c_out,
            cin_g,
            cout_g: c_out / spec.groups,
            k,
            h_out: (hp - k) / spec.stride + 1,
            w_out: (wp - k) / spec.stride + 1,
            spec,
        })
    }

    fn positions(&self) -> usize {
        self.h_out * self.w_out
    }

    /// Side of the polyphase planes: every tap of every output position
    /// lands inside a `hq × wq` plane.
    fn phase_dims(&self) -> (usize, usize) {
        let extra = (self.k - 1) / self.spec.stride;
        (self.h_out + extra, self.w_out + extra)
    }

    /// Length of the flattened output range addressed by one tap GEMM.
    fn tap_span(&self) -> usize {
        let (_, wq) = self.phase_dims();
        (self.h_out - 1) * wq + self.w_out
    }

    /// Tap `(ky, kx)` reads phase plane `phase` starting at `offset`.
    fn tap(&self, ky: usize, kx: usize) -> (usize, usize) {
        let s = self.spec.stride;
        let (_, wq) = self.phase_dims();
        ((ky % s) * s + kx % s, (ky / s) * wq + kx / s)
    }

    /// Splits the zero-padded input into `stride²` phase planes so that a
    /// strided convolution becomes a sum of unit-stride shifted products.
    /// Layout: `phase × c_in × hq × wq`.
    fn phases(&self, x: &[f64]) -> Vec<f64> {
        let (s, p) = (self.spec.stride, self.spec.padding);
        let (hq, wq) = self.phase_dims();
        let mut q = vec![0.0; s * s * self.c_in * hq * wq];
        for (ph, qp) in q.chunks_mut(self.c_in * hq * wq).enumerate() {
            let (py, px) = (ph / s, ph % s);
            for (ci, plane) in qp.chunks_mut(hq * wq).enumerate() {
                let src = &x[ci * self.h * self.w..][..self.h * self.w];
                for (qy, row) in plane.chunks_mut(wq).enumerate() {
                    let Some(iy) = (qy * s + py).checked_sub(p).filter(|&iy| iy < self.h) else {
                        continue;
                    };
                    let src = &src[iy * self.w..][..self.w];
                    for (qx, d) in row.iter_mut().enumerate() {
                        if let Some(ix) = (qx * s + px).checked_sub(p).filter(|&ix| ix < self.w) {
                            *d = src[ix];
                        }
                    }
                }
            }
        }
        q
    }

    /// Adjoint of [`Self::phases`].
    fn unphase(&self, q: &[f64]) -> Vec<f64> {
        let (s, p) = (self.spec.stride, self.spec.padding);
        let (hq, wq) = self.phase_dims();
        let mut dx = vec![0.0; self.c_in * self.h * self.w];
        for (ci, plane) in dx.chunks_mut(self.h * self.w).enumerate() {
            for (iy, row) in plane.chunks_mut(self.w).enumerate() {
                let (qy, py) = ((iy + p) / s, (iy + p) % s);
                if qy >= hq {
                    continue;
                }
                for (ix, d) in row.iter_mut().enumerate() {
                    let (qx, px) = ((ix + p) / s, (ix + p) % s);
                    if qx < wq {
                        *d = q[((py * s + px) * self.c_in + ci) * hq * wq + qy * wq + qx];
                    }
                }
            }
        }
        dx
    }

    /// Output of group `g` as a sum over taps of `W_tap · Q_shifted`.
    fn tap_forward(&self, q: &[f64], w: &[f64], g: usize, out: &mut [f64]) {
        let (hq, wq) = self.phase_dims();
        let (kk, span, ld) = (self.k * self.k, self.tap_span(), self.h_out * wq);
        let w_g = &w[g * self.cout_g * self.cin_g * kk..][..self.cout_g * self.cin_g * kk];
        let mut acc = vec![0.0; self.cout_g * ld];
        for ky in 0..self.k {
            for kx in 0..self.k {
                let (ph, off) = self.tap(ky, kx);
                let b = &q[(ph * self.c_in + g * self.cin_g) * hq * wq + off..];
                gemm_strided(
                    self.cout_g,
                    self.cin_g,
                    span,
                    &w_g[ky * self.k + kx..],
                    MatLayout {
                        row_stride: (self.cin_g * kk) as isize,
                        col_stride: kk as isize,
                    },
                    b,
                    MatLayout::row_major(hq * wq),
                    &mut acc,
                    MatLayout::row_major(ld),
                    1.0,
                );
            }
        }
        for (dst, src) in out.chunks_mut(self.positions()).zip(acc.chunks(ld)) {
            for (d, s) in dst.chunks_mut(self.w_out).zip(src.chunks(wq)) {
                d.copy_from_slice(&s[..self.w_out]);
            }
        }
    }

    /// Returns group `g`'s input gradient in phase layout and its weight gradient.
    fn tap_backward(
        &self,
        q: &[f64],
        w: &[f64],
        gy: &[f64],
        g: usize,
        need_x: bool,
        need_w: bool,
    ) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
        let (hq, wq) = self.phase_dims();
        let s = self.spec.stride;
        let (kk, span, ld, qlen) = (self.k * self.k, self.tap_span(), self.h_out * wq, hq * wq);
        let n_w = self.cout_g * self.cin_g * kk;
        let w_g = &w[g * n_w..][..n_w];
        // Output gradient on the padded-width grid, zero in the extra columns.
        let mut gq = vec![0.0; self.cout_g * ld];
        let gy_g = &gy[g * self.cout_g * self.positions()..][..self.cout_g * self.positions()];
        for (dst, src) in gq.chunks_mut(ld).zip(gy_g.chunks(self.positions())) {
            for (d, s) in dst.chunks_mut(wq).zip(src.chunks(self.w_out)) {
                d[..self.w_out].copy_from_slice(s);
            }
        }
        let mut dq = need_x.then(|| vec![0.0; s * s * self.cin_g * qlen]);
        let mut dw = need_w.then(|| vec![0.0; n_w]);
        for ky in 0..self.k {
            for kx in 0..self.k {
                let (ph, off) = self.tap(ky, kx);
                let t = ky * self.k + kx;
                if let Some(dw) = dw.as_mut() {
                    let b = &q[(ph * self.c_in + g * self.cin_g) * qlen + off..];
                    gemm_strided(
                        self.cout_g,
                        span,
                        self.cin_g,
                        &gq,
                        MatLayout::row_major(ld),
                        b,
                        MatLayout::transposed(qlen),
                        &mut dw[t..],
                        MatLayout {
                            row_stride: (self.cin_g * kk) as isize,
                            col_stride: kk as isize,
                        },
                        0.0,
                    );
                }
                if let Some(dq) = dq.as_mut() {
                    gemm_strided(
                        self.cin_g,
                        self.cout_g,
                        span,
                        &w_g[t..],
                        MatLayout {
                            row_stride: kk as isize,
                            col_stride: (self.cin_g * kk) as isize,
                        },
                        &gq,
                        MatLayout::row_major(ld),
                        &mut dq[ph * self.cin_g * qlen + off..],
                        MatLayout::row_major(qlen),
                        1.0,
                    );
                }
            }
        }
        (dq, dw)
    }

    /// Interleaves per-group phase gradients into the full `phase × c_in` layout.
    fn merge_group_phases<'a>(&self, groups: impl Iterator<Item = &'a [f64]>) -> Vec<f64> {
        let (hq, wq) = self.phase_dims();
        let s = self.spec.stride;
        let block = self.cin_g * hq * wq;
        let mut dq = vec![0.0; s * s * self.c_in * hq * wq];
        for (g, part) in groups.enumerate() {
            for ph in 0..s * s {
                dq[(ph * self.c_in + g * self.cin_g) * hq * wq..][..block]
                    .copy_from_slice(&part[ph * block..][..block]);
            }
        }
        dq
    }

    /// One kernel per channel, nothing to gather across channels.
    fn is_depthwise(&self) -> bool {
        self.cin_g == 1 && self.cout_g == 1
    }

    /// Output columns `ox` whose input column `ox·s + kx − p` is in range.
    fn valid_cols(&self, kx: usize) -> std::ops::Range<usize> {
        let (s, p) = (self.spec.stride, self.spec.padding);
        let lo = if kx >= p { 0 } else { (p - kx).div_ceil(s) };
        let hi = if self.w + p < kx + 1 {
            0
        } else {
            ((self.w - 1 + p - kx) / s + 1).min(self.w_out)
        };
        lo..hi.max(lo)
    }

    /// `(oy, iy)` pairs with `iy = oy·s + ky − p` in range.
    fn valid_rows(&self, ky: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let (s, p) = (self.spec.stride, self.spec.padding);
        (0..self.h_out).filter_map(move |oy| {
            let iy = (oy * s + ky).checked_sub(p)?;
            (iy < self.h).then_some((oy, iy))
        })
    }

    fn depthwise_forward(&self, x: &[f64], w: &[f64], ch: usize, out: &mut [f64]) {
        let (k, s, p) = (self.k, self.spec.stride, self.spec.padding);
        let plane = &x[ch * self.h * self.w..][..self.h * self.w];
        for ky in 0..k {
            for kx in 0..k {
                let wv = w[(ch * k + ky) * k + kx];
                let cols = self.valid_cols(kx);
                for (oy, iy) in self.valid_rows(ky) {
                    let src = &plane[iy * self.w..][..self.w];
                    let dst = &mut out[oy * self.w_out..][..self.w_out];
                    for ox in cols.clone() {
                        dst[ox] += wv * src[ox * s + kx - p];
                    }
                }
            }
        }
    }

    /// Returns `(dx plane, dw kernel)` of one channel.
    fn depthwise_backward(
        &self,
        x: &[f64],
        w: &[f64],
        gy: &[f64],
        ch: usize,
    ) -> (Vec<f64>, Vec<f64>) {
        let (k, s, p) = (self.k, self.spec.stride, self.spec.padding);
        let plane = &x[ch * self.h * self.w..][..self.h * self.w];
        let gplane = &gy[ch * self.positions()..][..self.positions()];
        let mut dx = vec![0.0; self.h * self.w];
        let mut dw = vec![0.0; k * k];
        for ky in 0..k {
            for kx in 0..k {
                let wv = w[(ch * k + ky) * k + kx];
                let cols = self.valid_cols(kx);
                let mut acc = 0.0;
                for (oy, iy) in self.valid_rows(ky) {
                    let src = &plane[iy * self.w..][..self.w];
                    let g = &gplane[oy * self.w_out..][..self.w_out];
                    let d = &mut dx[iy * self.w..][..self.w];
                    for ox in cols.clone() {
                        let ix = ox * s + kx - p;
                        acc += g[ox] * src[ix];
                        d[ix] += wv * g[ox];
                    }
                }
                dw[ky * k + kx] = acc;
            }
        }
        (dx, dw)
    }
}

/// Output spatial size of a convolution, or an error if the input is too small.
pub fn output_size(h: usize, w: usize, k: usize, spec: Conv2dSpec) -> Result<(usize, usize)> {
    let g = Geometry::resolve(&[spec.groups, h, w], &[spec.groups, 1, k, k], spec)?;
    Ok((g.h_out, g.w_out))
}

/// `y[co] = b[co] + Σ_{ci ∈ group(co)} w[co, ci] ⋆ x[ci]` (cross-correlation).
pub fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    spec: Conv2dSpec,
) -> Result<Tensor> {
    let geo = Geometry::resolve(x.shape(), w.shape(), spec)?;
    if let Some(b) = bias {
        if b.numel() != geo.c_out {
            return Err(Error::validation(format!(
                "conv bias has {} entries, expected {}",
                b.numel(),
                geo.c_out
            )));
        }
    }
    let positions = geo.positions();
    let mut out = vec![0.0; geo.c_out * positions];
    let (xd, wd) = (x.data(), w.data());
    let q = if geo.is_depthwise() {
        Vec::new()
    } else {
        geo.phases(xd)
    };
    par::for_each_chunk_mut(&mut out, geo.cout_g * positions, |g, out_g| {
        if geo.is_depthwise() {
            geo.depthwise_forward(xd, wd, g, out_g);
        } else {
            geo.tap_forward(&q, wd, g, out_g);
        }
        if let Some(b) = bias {
            for (o, plane) in out_g.chunks_mut(positions).enumerate() {
                let bv = b.data()[g * geo.cout_g + o];
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
    });
    Ok(Tensor::from_parts(
        vec![geo.c_out, geo.h_out, geo.w_out],
        out,
    ))
}

/// Gradients of [`conv2d_forward`] with respect to the input, weight and bias.
/// Only the requested ones are computed.
pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    grad_out: &Tensor,
    spec: Conv2dSpec,
    need: [bool; 3],
) -> Result<ConvGrads> {
    let geo = Geometry::resolve(x.shape(), w.shape(), spec)?;
    let positions = geo.positions();
    if grad_out.shape() != [geo.c_out, geo.h_out, geo.w_out] {
        return Err(Error::validation(format!(
            "conv grad shape {:?} does not match output {:?}",
            grad_out.shape(),
            [geo.c_out, geo.h_out, geo.w_out]
        )));
    }
    let [need_x, need_w, need_b] = need;
    let (xd, wd, gd) = (x.data(), w.data(), grad_out.data());

    let mut input = need_x.then(|| Vec::with_capacity(geo.c_in * geo.h * geo.w));
    let mut weight = need_w.then(|| Vec::with_capacity(w.numel()));
    if geo.is_depthwise() {
        let per_channel = par::map_range(geo.c_in, |ch| geo.depthwise_backward(xd, wd, gd, ch));
        for (dx, dw) in per_channel {
            if let Some(acc) = input.as_mut() {
                acc.extend_from_slice(&dx);
            }
            if let Some(acc) = weight.as_mut() {
                acc.extend_from_slice(&dw);
            }
        }
    } else {
        let q = if need_w { geo.phases(xd) } else { Vec::new() };
        let per_group = par::map_range(geo.spec.groups, |g| {
            geo.tap_backward(&q, wd, gd, g, need_x, need_w)
        });
        if let Some(acc) = weight.as_mut() {
            for (_, dw) in &per_group {
                acc.extend_from_slice(dw.as_deref().expect("requested"));
            }
        }
        if let Some(acc) = input.as_mut() {
            let dq = geo.merge_group_phases(
                per_group
                    .iter()
                    .map(|(dq, _)| dq.as_deref().expect("requested")),
            );
            *acc = geo.unphase(&dq);
        }
    }
    let bias = need_b.then(|| {
        Tensor::vector(
            gd.chunks(positions)
                .map(|plane| plane.iter().sum())
                .collect(),
        )
    });
    Ok(ConvGrads {
        input: input.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
        weight: weight.map(|d| Tensor::from_parts(w.shape().to_vec(), d)),
        bias,
    })
}

//! Raw forward/backward kernels on flat buffers. Work is split per batch
//! item; weight gradients are reduced in batch order so results do not
//! depend on how many threads ran them.

use crate::error::{Error, Result};
use crate::par;

use super::tensor::{Shape, Tensor};

/// `c += a · b` with `a: m×k`, `b: k×n`.
pub(crate) fn gemm_nn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c += a · bᵀ` with `a: m×k`, `b: n×k`.
pub(crate) fn gemm_nt(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let dot: f32 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            c[i * n + j] += dot;
        }
    }
}

/// `c += aᵀ · b` with `a: k×m`, `b: k×n`.
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub const fn new(stride: usize, padding: usize) -> Self {
        ConvGeom {
            stride,
            padding,
            dilation: 1,
            groups: 1,
        }
    }

    pub const fn dilated(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub const fn grouped(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
}

/// Spatial output extent: `floor((in + 2p - d(k-1) - 1) / s) + 1`.
pub fn out_extent(input: usize, k: usize, stride: usize, padding: usize, dilation: usize) -> Option<usize> {
    let span = dilation * (k - 1) + 1;
    let padded = input + 2 * padding;
    if k == 0 || stride == 0 || padded < span {
        return None;
    }
    Some((padded - span) / stride + 1)
}

pub(crate) struct ConvPlan {
    pub x: Shape,
    pub w: Shape,
    pub out: Shape,
    pub geom: ConvGeom,
}

impl ConvPlan {
    pub fn new(x: Shape, w: Shape, geom: ConvGeom) -> Result<Self> {
        let g = geom.groups;
        if g == 0 || !x.c.is_multiple_of(g) || !w.n.is_multiple_of(g) {
            return Err(Error::shape(
                "conv2d",
                format!("channels in={} out={} not divisible by groups={g}", x.c, w.n),
            ));
        }
        if w.c != x.c / g {
            return Err(Error::shape(
                "conv2d",
                format!("weight {} expects {} input channels per group, input {}", w, w.c, x),
            ));
        }
        let oh = out_extent(x.h, w.h, geom.stride, geom.padding, geom.dilation);
        let ow = out_extent(x.w, w.w, geom.stride, geom.padding, geom.dilation);
        match (oh, ow) {
            (Some(oh), Some(ow)) if oh > 0 && ow > 0 && x.n > 0 && w.n > 0 => Ok(ConvPlan {
                x,
                w,
                out: Shape::new(x.n, w.n, oh, ow),
                geom,
            }),
            _ => Err(Error::EmptyOutput {
                op: "conv2d",
                detail: format!("input {x}, kernel {}x{}, {geom:?}", w.h, w.w),
            }),
        }
    }

    fn cin_g(&self) -> usize {
        self.x.c / self.geom.groups
    }

    fn cout_g(&self) -> usize {
        self.w.n / self.geom.groups
    }

    fn col_rows(&self) -> usize {
        self.cin_g() * self.w.h * self.w.w
    }

    fn is_pointwise(&self) -> bool {
        self.w.h == 1 && self.w.w == 1 && self.geom.stride == 1 && self.geom.padding == 0
    }

    /// im2col for one batch item and one group: rows `(ci, ky, kx)`, columns output pixels.
    fn im2col(&self, x_item: &[f32], group: usize, cols: &mut [f32]) {
        let (h, w) = (self.x.h, self.x.w);
        let (oh, ow) = (self.out.h, self.out.w);
        let (kh, kw) = (self.w.h, self.w.w);
        let g = &self.geom;
        let p = oh * ow;
        for ci in 0..self.cin_g() {
            let plane = &x_item[(group * self.cin_g() + ci) * h * w..][..h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = (ci * kh + ky) * kw + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                        for ox in 0..ow {
                            let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                            dst[oy * ow + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                plane[iy as usize * w + ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f32], group: usize, dx_item: &mut [f32]) {
        let (h, w) = (self.x.h, self.x.w);
        let (oh, ow) = (self.out.h, self.out.w);
        let (kh, kw) = (self.w.h, self.w.w);
        let g = &self.geom;
        let p = oh * ow;
        for ci in 0..self.cin_g() {
            let plane = &mut dx_item[(group * self.cin_g() + ci) * h * w..][..h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = (ci * kh + ky) * kw + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                            if ix >= 0 && (ix as usize) < w {
                                plane[iy as usize * w + ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(x: &Tensor, w: &Tensor, plan: &ConvPlan) -> Tensor {
    let mut out = Tensor::zeros(plan.out);
    let p = plan.out.plane();
    let (cin_g, cout_g, k) = (plan.cin_g(), plan.cout_g(), plan.col_rows());
    let x_item = plan.x.item();
    let wd = w.data();
    let xd = x.data();
    par::for_each_chunk(out.data_mut(), plan.out.item(), |n, o| {
        let xi = &xd[n * x_item..(n + 1) * x_item];
        let mut cols = Vec::new();
        for g in 0..plan.geom.groups {
            let wg = &wd[g * cout_g * k..(g + 1) * cout_g * k];
            let og = &mut o[g * cout_g * p..(g + 1) * cout_g * p];
            if plan.is_pointwise() {
                gemm_nn(cout_g, k, p, wg, &xi[g * cin_g * p..(g + 1) * cin_g * p], og);
            } else {
                cols.clear();
                cols.resize(k * p, 0.0);
                plan.im2col(xi, g, &mut cols);
                gemm_nn(cout_g, k, p, wg, &cols, og);
            }
        }
    });
    out
}

/// Returns `(dx, dw)`; `dx` is skipped when not needed.
pub(crate) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    gout: &Tensor,
    plan: &ConvPlan,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let p = plan.out.plane();
    let (cin_g, cout_g, k) = (plan.cin_g(), plan.cout_g(), plan.col_rows());
    let x_item = plan.x.item();
    let o_item = plan.out.item();
    let (xd, wd, gd) = (x.data(), w.data(), gout.data());

    let dx = need_dx.then(|| {
        let mut dx = Tensor::zeros(plan.x);
        par::for_each_chunk(dx.data_mut(), x_item, |n, dxi| {
            let gi = &gd[n * o_item..(n + 1) * o_item];
            let mut cols = Vec::new();
            for g in 0..plan.geom.groups {
                let wg = &wd[g * cout_g * k..(g + 1) * cout_g * k];
                let gg = &gi[g * cout_g * p..(g + 1) * cout_g * p];
                if plan.is_pointwise() {
                    gemm_tn(k, cout_g, p, wg, gg, &mut dxi[g * cin_g * p..(g + 1) * cin_g * p]);
                } else {
                    cols.clear();
                    cols.resize(k * p, 0.0);
                    gemm_tn(k, cout_g, p, wg, gg, &mut cols);
                    plan.col2im(&cols, g, dxi);
                }
            }
        });
        dx
    });

    let dw = need_dw.then(|| {
        let partials = par::map_indices(plan.x.n, |n| {
            let xi = &xd[n * x_item..(n + 1) * x_item];
            let gi = &gd[n * o_item..(n + 1) * o_item];
            let mut dw = vec![0.0f32; w.len()];
            let mut cols = Vec::new();
            for g in 0..plan.geom.groups {
                let gg = &gi[g * cout_g * p..(g + 1) * cout_g * p];
                let dwg = &mut dw[g * cout_g * k..(g + 1) * cout_g * k];
                if plan.is_pointwise() {
                    gemm_nt(cout_g, p, k, gg, &xi[g * cin_g * p..(g + 1) * cin_g * p], dwg);
                } else {
                    cols.clear();
                    cols.resize(k * p, 0.0);
                    plan.im2col(xi, g, &mut cols);
                    gemm_nt(cout_g, p, k, gg, &cols, dwg);
                }
            }
            dw
        });
        Tensor::from_vec(plan.w, par::sum_partials(w.len(), partials)).expect("weight shape")
    });
    (dx, dw)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct PoolPlan {
    pub x: Shape,
    pub out: Shape,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PoolPlan {
    pub fn new(x: Shape, k: usize, stride: usize, padding: usize) -> Result<Self> {
        if k == 0 || stride == 0 {
            return Err(Error::shape("pool2d", format!("kernel {k}, stride {stride}")));
        }
        if padding >= k {
            return Err(Error::shape(
                "pool2d",
                format!("padding {padding} must be smaller than kernel {k}"),
            ));
        }
        match (out_extent(x.h, k, stride, padding, 1), out_extent(x.w, k, stride, padding, 1)) {
            (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Ok(PoolPlan {
                x,
                out: Shape::new(x.n, x.c, oh, ow),
                k,
                stride,
                padding,
            }),
            _ => Err(Error::EmptyOutput {
                op: "pool2d",
                detail: format!("input {x}, kernel {k}"),
            }),
        }
    }

    fn window(&self, o: usize, extent: usize) -> (usize, usize) {
        let start = (o * self.stride) as isize - self.padding as isize;
        let lo = start.max(0) as usize;
        let hi = ((start + self.k as isize) as usize).min(extent);
        (lo, hi)
    }
}

/// Pools each plane. Average pooling divides by the number of in-bounds
/// elements. Max pooling also returns the flat argmax per output element.
pub(crate) fn pool2d_forward(x: &Tensor, plan: &PoolPlan, kind: PoolKind) -> (Tensor, Vec<u32>) {
    let (h, w) = (plan.x.h, plan.x.w);
    let (oh, ow) = (plan.out.h, plan.out.w);
    let mut out = Tensor::zeros(plan.out);
    let mut arg = vec![0u32; if kind == PoolKind::Max { plan.out.numel() } else { 0 }];
    let xd = x.data();
    for plane in 0..plan.x.n * plan.x.c {
        let xp = &xd[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1) = plan.window(oy, h);
            for ox in 0..ow {
                let (x0, x1) = plan.window(ox, w);
                let oi = plane * oh * ow + oy * ow + ox;
                match kind {
                    PoolKind::Max => {
                        let mut best = f32::NEG_INFINITY;
                        let mut bi = y0 * w + x0;
                        for iy in y0..y1 {
                            for ix in x0..x1 {
                                let v = xp[iy * w + ix];
                                if v > best {
                                    best = v;
                                    bi = iy * w + ix;
                                }
                            }
                        }
                        out.data_mut()[oi] = best;
                        arg[oi] = bi as u32;
                    }
                    PoolKind::Avg => {
                        let mut s = 0.0;
                        for iy in y0..y1 {
                            for ix in x0..x1 {
                                s += xp[iy * w + ix];
                            }
                        }
                        out.data_mut()[oi] = s / ((y1 - y0) * (x1 - x0)) as f32;
                    }
                }
            }
        }
    }
    (out, arg)
}

pub(crate) fn pool2d_backward(gout: &Tensor, plan: &PoolPlan, kind: PoolKind, arg: &[u32]) -> Tensor {
    let (h, w) = (plan.x.h, plan.x.w);
    let (oh, ow) = (plan.out.h, plan.out.w);
    let mut dx = Tensor::zeros(plan.x);
    let gd = gout.data();
    let dd = dx.data_mut();
    for plane in 0..plan.x.n * plan.x.c {
        let base = plane * h * w;
        for oy in 0..oh {
            let (y0, y1) = plan.window(oy, h);
            for ox in 0..ow {
                let oi = plane * oh * ow + oy * ow + ox;
                let g = gd[oi];
                match kind {
                    PoolKind::Max => dd[base + arg[oi] as usize] += g,
                    PoolKind::Avg => {
                        let (x0, x1) = plan.window(ox, w);
                        let share = g / ((y1 - y0) * (x1 - x0)) as f32;
                        for iy in y0..y1 {
                            for ix in x0..x1 {
                                dd[base + iy * w + ix] += share;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Per-channel mean and biased variance over (batch, height, width).
pub(crate) fn channel_moments(x: &Tensor) -> (Vec<f32>, Vec<f32>) {
    let s = x.shape();
    let plane = s.plane();
    let m = (s.n * plane) as f64;
    let mut mean = vec![0.0f32; s.c];
    let mut var = vec![0.0f32; s.c];
    for c in 0..s.c {
        let mut acc = 0.0f64;
        for n in 0..s.n {
            let base = (n * s.c + c) * plane;
            acc += x.data()[base..base + plane].iter().map(|&v| v as f64).sum::<f64>();
        }
        let mu = acc / m;
        let mut sq = 0.0f64;
        for n in 0..s.n {
            let base = (n * s.c + c) * plane;
            sq += x.data()[base..base + plane]
                .iter()
                .map(|&v| (v as f64 - mu).powi(2))
                .sum::<f64>();
        }
        mean[c] = mu as f32;
        var[c] = (sq / m) as f32;
    }
    (mean, var)
}

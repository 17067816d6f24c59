//! Forward and backward implementations of every tensor operation the
//! network uses.

use alloc::boxed::Box;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use super::autodiff::{GradFn, Node};
use super::{Shape, Tensor};
use crate::error::{ensure, Result};
use crate::math;

type Dims4 = (usize, usize, usize, usize);

impl Tensor {
    pub(crate) fn data_arc(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.data)
    }
}

fn track1(parent: &Tensor, grad_fn: impl FnOnce(Arc<Node>) -> Box<dyn GradFn>) -> Option<Arc<Node>> {
    parent.node().map(|n| Node::op(grad_fn(Arc::clone(n))))
}

// ---------------------------------------------------------------------------
// conv2d

struct ConvGrad {
    input: Arc<Vec<f64>>,
    weight: Arc<Vec<f64>>,
    in_dims: Dims4,
    w_dims: Dims4,
    out_dims: Dims4,
    stride: usize,
    padding: usize,
    parents: [Option<Arc<Node>>; 3],
}

impl Tensor {
    /// 2-D cross-correlation with bias. Kernels are 1×1 or 3×3.
    pub fn conv2d(
        &self,
        weight: &Tensor,
        bias: &Tensor,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor> {
        let in_dims = self.shape().dims4()?;
        let w_dims = weight.shape().dims4()?;
        let (b, cin, h, w) = in_dims;
        let (cout, wcin, kh, kw) = w_dims;
        ensure!(
            kh == kw && (kh == 1 || kh == 3),
            "conv2d kernel must be 1x1 or 3x3, got {kh}x{kw}"
        );
        ensure!(
            wcin == cin,
            "conv2d channel mismatch: input has {cin}, weight expects {wcin}"
        );
        ensure!(
            bias.shape().dims() == [cout],
            "conv2d bias shape {} does not match {cout} output channels",
            bias.shape()
        );
        ensure!(stride >= 1, "conv2d stride must be >= 1");
        ensure!(padding <= 1, "conv2d padding must be 0 or 1");
        ensure!(
            h + 2 * padding >= kh && w + 2 * padding >= kw,
            "conv2d input {h}x{w} too small for {kh}x{kw} kernel with padding {padding}"
        );
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        let out_dims = (b, cout, oh, ow);

        let mut out = vec![0.0; b * cout * oh * ow];
        conv_forward(
            self.data(),
            in_dims,
            weight.data(),
            w_dims,
            bias.data(),
            stride,
            padding,
            &mut out,
            out_dims,
        );

        let parents = [
            self.node().cloned(),
            weight.node().cloned(),
            bias.node().cloned(),
        ];
        let node = if parents.iter().any(|p| p.is_some()) {
            Some(Node::op(Box::new(ConvGrad {
                input: self.data_arc(),
                weight: weight.data_arc(),
                in_dims,
                w_dims,
                out_dims,
                stride,
                padding,
                parents,
            })))
        } else {
            None
        };
        Ok(Tensor::with_node(
            Shape::new(&[b, cout, oh, ow])?,
            out,
            node,
        ))
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_forward(
    inp: &[f64],
    (b, cin, h, w): Dims4,
    wgt: &[f64],
    (cout, _, kh, kw): Dims4,
    bias: &[f64],
    stride: usize,
    padding: usize,
    out: &mut [f64],
    (_, _, oh, ow): Dims4,
) {
    for bi in 0..b {
        for o in 0..cout {
            let out_plane = &mut out[(bi * cout + o) * oh * ow..][..oh * ow];
            out_plane.fill(bias[o]);
            for c in 0..cin {
                let in_plane = &inp[(bi * cin + c) * h * w..][..h * w];
                // 1×1 stride-1 kernels scale whole planes
                if kh == 1 && kw == 1 && stride == 1 && padding == 0 {
                    let wv = wgt[o * cin + c];
                    for (o, i) in out_plane.iter_mut().zip(in_plane) {
                        *o += wv * i;
                    }
                    continue;
                }
                for ki in 0..kh {
                    for kj in 0..kw {
                        let wv = wgt[((o * cin + c) * kh + ki) * kw + kj];
                        if stride == 1 {
                            let y0 = padding.saturating_sub(ki);
                            let y1 = (h + padding).saturating_sub(ki).min(oh);
                            let x0 = padding.saturating_sub(kj);
                            let x1 = (w + padding).saturating_sub(kj).min(ow);
                            for y in y0..y1 {
                                let irow = &in_plane[(y + ki - padding) * w + x0 + kj - padding..]
                                    [..x1 - x0];
                                let orow = &mut out_plane[y * ow + x0..][..x1 - x0];
                                for (o, i) in orow.iter_mut().zip(irow) {
                                    *o += wv * i;
                                }
                            }
                        } else {
                            for y in 0..oh {
                                let iy = (y * stride + ki) as isize - padding as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for x in 0..ow {
                                    let ix = (x * stride + kj) as isize - padding as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    out_plane[y * ow + x] +=
                                        wv * in_plane[iy as usize * w + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

impl GradFn for ConvGrad {
    fn backward(&self, grad_out: &[f64]) -> Vec<(Arc<Node>, Vec<f64>)> {
        let (b, cin, h, w) = self.in_dims;
        let (cout, _, kh, kw) = self.w_dims;
        let (_, _, oh, ow) = self.out_dims;
        let (s, p) = (self.stride, self.padding);
        let mut result = Vec::new();

        if let Some(n) = &self.parents[0] {
            let mut d_in = vec![0.0; b * cin * h * w];
            for bi in 0..b {
                for o in 0..cout {
                    let g_plane = &grad_out[(bi * cout + o) * oh * ow..][..oh * ow];
                    for c in 0..cin {
                        let d_plane = &mut d_in[(bi * cin + c) * h * w..][..h * w];
                        if kh == 1 && kw == 1 && s == 1 && p == 0 {
                            let wv = self.weight[o * cin + c];
                            for (d, g) in d_plane.iter_mut().zip(g_plane) {
                                *d += wv * g;
                            }
                            continue;
                        }
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let wv = self.weight[((o * cin + c) * kh + ki) * kw + kj];
                                if s == 1 {
                                    let y0 = p.saturating_sub(ki);
                                    let y1 = (h + p).saturating_sub(ki).min(oh);
                                    let x0 = p.saturating_sub(kj);
                                    let x1 = (w + p).saturating_sub(kj).min(ow);
                                    for y in y0..y1 {
                                        let drow = &mut d_plane
                                            [(y + ki - p) * w + x0 + kj - p..][..x1 - x0];
                                        let grow = &g_plane[y * ow + x0..][..x1 - x0];
                                        for (d, g) in drow.iter_mut().zip(grow) {
                                            *d += wv * g;
                                        }
                                    }
                                } else {
                                    for y in 0..oh {
                                        let iy = (y * s + ki) as isize - p as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for x in 0..ow {
                                            let ix = (x * s + kj) as isize - p as isize;
                                            if ix < 0 || ix >= w as isize {
                                                continue;
                                            }
                                            d_plane[iy as usize * w + ix as usize] +=
                                                wv * g_plane[y * ow + x];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            result.push((Arc::clone(n), d_in));
        }

        if let Some(n) = &self.parents[1] {
            let mut d_w = vec![0.0; cout * cin * kh * kw];
            for bi in 0..b {
                for o in 0..cout {
                    let g_plane = &grad_out[(bi * cout + o) * oh * ow..][..oh * ow];
                    for c in 0..cin {
                        let in_plane = &self.input[(bi * cin + c) * h * w..][..h * w];
                        if kh == 1 && kw == 1 && s == 1 && p == 0 {
                            let acc: f64 =
                                g_plane.iter().zip(in_plane).map(|(g, i)| g * i).sum();
                            d_w[o * cin + c] += acc;
                            continue;
                        }
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let mut acc = 0.0;
                                if s == 1 {
                                    let y0 = p.saturating_sub(ki);
                                    let y1 = (h + p).saturating_sub(ki).min(oh);
                                    let x0 = p.saturating_sub(kj);
                                    let x1 = (w + p).saturating_sub(kj).min(ow);
                                    for y in y0..y1 {
                                        let irow = &in_plane[(y + ki - p) * w + x0 + kj - p..]
                                            [..x1 - x0];
                                        let grow = &g_plane[y * ow + x0..][..x1 - x0];
                                        acc += grow
                                            .iter()
                                            .zip(irow)
                                            .map(|(g, i)| g * i)
                                            .sum::<f64>();
                                    }
                                } else {
                                    for y in 0..oh {
                                        let iy = (y * s + ki) as isize - p as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for x in 0..ow {
                                            let ix = (x * s + kj) as isize - p as isize;
                                            if ix < 0 || ix >= w as isize {
                                                continue;
                                            }
                                            acc += g_plane[y * ow + x]
                                                * in_plane[iy as usize * w + ix as usize];
                                        }
                                    }
                                }
                                d_w[((o * cin + c) * kh + ki) * kw + kj] += acc;
                            }
                        }
                    }
                }
            }
            result.push((Arc::clone(n), d_w));
        }

        if let Some(n) = &self.parents[2] {
            let mut d_b = vec![0.0; cout];
            for bi in 0..b {
                for o in 0..cout {
                    let g_plane = &grad_out[(bi * cout + o) * oh * ow..][..oh * ow];
                    d_b[o] += g_plane.iter().sum::<f64>();
                }
            }
            result.push((Arc::clone(n), d_b));
        }
        result
    }
}

// ---------------------------------------------------------------------------
// relu

struct ReluGrad {
    input: Arc<Vec<f64>>,
    parent: Arc<Node>,
}

impl GradFn for ReluGrad {
    fn backward(&self, grad_out: &[f64]) -> Vec<(Arc<Node>, Vec<f64>)> {
        let d = self
            .input
            .iter()
            .zip(grad_out)
            .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
            .collect();
        vec![(Arc::clone(&self.parent), d)]
    }
}

impl Tensor {
    /// Elementwise `max(x, 0)`.
    pub fn relu(&self) -> Tensor {
        let out = self.data().iter().map(|&x| x.max(0.0)).collect();
        let node = track1(self, |parent| {
            Box::new(ReluGrad {
                input: self.data_arc(),
                parent,
            })
        });
        Tensor::with_node(self.shape().clone(), out, node)
    }
}

// ---------------------------------------------------------------------------
// adaptive average pooling

struct PoolGrad {
    in_dims: Dims4,
    out_hw: (usize, usize),
    parent: Arc<Node>,
}

impl Tensor {
    /// Adaptive average pooling to a square `out_size × out_size` grid.
    pub fn adaptive_avg_pool(&self, out_size: usize) -> Result<Tensor> {
        self.adaptive_avg_pool_rect(out_size, out_size)
    }

    /// Adaptive average pooling to an arbitrary output grid. Output bin
    /// `(i, j)` averages input rows `[⌊i·h/oh⌋, ⌈(i+1)·h/oh⌉)` and the
    /// matching column range.
    pub fn adaptive_avg_pool_rect(&self, out_h: usize, out_w: usize) -> Result<Tensor> {
        let (b, c, h, w) = self.shape().dims4()?;
        ensure!(
            out_h >= 1 && out_w >= 1 && out_h <= h && out_w <= w,
            "adaptive pool output {out_h}x{out_w} invalid for input {h}x{w}"
        );
        let mut out = vec![0.0; b * c * out_h * out_w];
        for plane in 0..b * c {
            let inp = &self.data()[plane * h * w..][..h * w];
            let dst = &mut out[plane * out_h * out_w..][..out_h * out_w];
            for i in 0..out_h {
                let (r0, r1) = bin_range(h, out_h, i);
                for j in 0..out_w {
                    let (c0, c1) = bin_range(w, out_w, j);
                    let mut acc = 0.0;
                    for y in r0..r1 {
                        for x in c0..c1 {
                            acc += inp[y * w + x];
                        }
                    }
                    dst[i * out_w + j] = acc / ((r1 - r0) * (c1 - c0)) as f64;
                }
            }
        }
        let node = track1(self, |parent| {
            Box::new(PoolGrad {
                in_dims: (b, c, h, w),
                out_hw: (out_h, out_w),
                parent,
            })
        });
        Ok(Tensor::with_node(
            Shape::new(&[b, c, out_h, out_w])?,
            out,
            node,
        ))
    }
}

fn bin_range(n: usize, bins: usize, i: usize) -> (usize, usize) {
    let start = i * n / bins;
    let end = ((i + 1) * n).div_ceil(bins);
    (start, end)
}

impl GradFn for PoolGrad {
    fn backward(&self, grad_out: &[f64]) -> Vec<(Arc<Node>, Vec<f64>)> {
        let (b, c, h, w) = self.in_dims;
        let (oh, ow) = self.out_hw;
        let mut d_in = vec![0.0; b * c * h * w];
        for plane in 0..b * c {
            let g = &grad_out[plane * oh * ow..][..oh * ow];
            let dst = &mut d_in[plane * h * w..][..h * w];
            for i in 0..oh {
                let (r0, r1) = bin_range(h, oh, i);
                for j in 0..ow {
                    let (c0, c1) = bin_range(w, ow, j);
                    let share = g[i * ow + j] / ((r1 - r0) * (c1 - c0)) as f64;
                    for y in r0..r1 {
                        for x in c0..c1 {
                            dst[y * w + x] += share;
                        }
                    }
                }
            }
        }
        vec![(Arc::clone(&self.parent), d_in)]
    }
}

// ---------------------------------------------------------------------------
// bilinear resize (corner-aligned)

struct BilinearGrad {
    in_dims: Dims4,
    out_hw: (usize, usize),
    parent: Arc<Node>,
}

/// Per-output-index source interpolation: (low index, high index, weight of
/// the high index). Corner-aligned: index i maps to `i·(n−1)/(out−1)`;
/// a single output sample maps to index 0.
fn lerp_table(n: usize, out: usize) -> Vec<(usize, usize, f64)> {
    (0..out)
        .map(|i| {
            if out == 1 {
                (0, 0, 0.0)
            } else {
                let src = i as f64 * (n - 1) as f64 / (out - 1) as f64;
                let lo = (math::floor(src) as usize).min(n - 1);
                let hi = (lo + 1).min(n - 1);
                (lo, hi, src - lo as f64)
            }
        })
        .collect()
}

impl Tensor {
    /// Corner-aligned bilinear resize of the two spatial dimensions.
    pub fn bilinear_resize(&self, out_h: usize, out_w: usize) -> Result<Tensor> {
        let (b, c, h, w) = self.shape().dims4()?;
        ensure!(out_h >= 1 && out_w >= 1, "bilinear output size must be >= 1");
        let rows = lerp_table(h, out_h);
        let cols = lerp_table(w, out_w);
        let mut out = vec![0.0; b * c * out_h * out_w];
        for plane in 0..b * c {
            let inp = &self.data()[plane * h * w..][..h * w];
            let dst = &mut out[plane * out_h * out_w..][..out_h * out_w];
            for (i, &(y0, y1, fy)) in rows.iter().enumerate() {
                let r0 = &inp[y0 * w..][..w];
                let r1 = &inp[y1 * w..][..w];
                for (j, &(x0, x1, fx)) in cols.iter().enumerate() {
                    let top = r0[x0] + fx * (r0[x1] - r0[x0]);
                    let bot = r1[x0] + fx * (r1[x1] - r1[x0]);
                    dst[i * out_w + j] = top + fy * (bot - top);
                }
            }
        }
        let node = track1(self, |parent| {
            Box::new(BilinearGrad {
                in_dims: (b, c, h, w),
                out_hw: (out_h, out_w),
                parent,
            })
        });
        Ok(Tensor::with_node(
            Shape::new(&[b, c, out_h, out_w])?,
            out,
            node,
        ))
    }
}

impl GradFn for BilinearGrad {
    fn backward(&self, grad_out: &[f64]) -> Vec<(Arc<Node>, Vec<f64>)> {
        let (b, c, h, w) = self.in_dims;
        let (oh, ow) = self.out_hw;
        let rows = lerp_table(h, oh);
        let cols = lerp_table(w, ow);
        let mut d_in = vec![0.0; b * c * h * w];
        for plane in 0..b * c {
            let g = &grad_out[plane * oh * ow..][..oh * ow];
            let dst = &mut d_in[plane * h * w..][..h * w];
            for (i, &(y0, y1, fy)) in rows.iter().enumerate() {
                for (j, &(x0, x1, fx)) in cols.iter().enumerate() {
                    let gv = g[i * ow + j];
                    dst[y0 * w + x0] += (1.0 - fy) * (1.0 - fx) * gv;
                    dst[y0 * w + x1] += (1.0 - fy) * fx * gv;
                    dst[y1 * w + x0] += fy * (1.0 - fx) * gv;
                    dst[y1 * w + x1] += fy * fx * gv;
                }
            }
        }
        vec![(Arc::clone(&self.parent), d_in)]
    }
}

// ---------------------------------------------------------------------------
// softmax cross entropy

struct CeGrad {
    probs: Vec<f64>,
    target: Vec<u8>,
    dims: Dims4,
    parent: Arc<Node>,
}

impl Tensor {
    /// Mean over all `b·h·w` positions of the negative log softmax
    /// probability of the target class. `target` is a row-major `[b, h, w]`
    /// class-index map.
    pub fn softmax_cross_entropy(&self, target: &[u8]) -> Result<Tensor> {
        let (b, c, h, w) = self.shape().dims4()?;
        let positions = b * h * w;
        ensure!(
            target.len() == positions,
            "target length {} != {positions} positions",
            target.len()
        );
        ensure!(
            target.iter().all(|&t| (t as usize) < c),
            "target class out of range for {c} channels"
        );
        let plane = h * w;
        let logits = self.data();
        let mut probs = vec![0.0; b * c * plane];
        let mut loss = 0.0;
        for bi in 0..b {
            for pos in 0..plane {
                let mut max = f64::NEG_INFINITY;
                for ch in 0..c {
                    max = max.max(logits[(bi * c + ch) * plane + pos]);
                }
                let mut sum = 0.0;
                for ch in 0..c {
                    let e = math::exp(logits[(bi * c + ch) * plane + pos] - max);
                    probs[(bi * c + ch) * plane + pos] = e;
                    sum += e;
                }
                for ch in 0..c {
                    probs[(bi * c + ch) * plane + pos] /= sum;
                }
                let t = target[bi * plane + pos] as usize;
                loss += max + math::ln(sum) - logits[(bi * c + t) * plane + pos];
            }
        }
        loss /= positions as f64;
        let node = track1(self, |parent| {
            Box::new(CeGrad {
                probs: probs.clone(),
                target: target.to_vec(),
                dims: (b, c, h, w),
                parent,
            })
        });
        Ok(Tensor::with_node(Shape::scalar(), vec![loss], node))
    }
}

impl GradFn for CeGrad {
    fn backward(&self, grad_out: &[f64]) -> Vec<(Arc<Node>, Vec<f64>)> {
        let (b, c, h, w) = self.dims;
        let plane = h * w;
        let scale = grad_out[0] / (b * plane) as f64;
        let mut d = vec![0.0; b * c * plane];
        for bi in 0..b {
            for pos in 0..plane {
                let t = self.target[bi * plane + pos] as usize;
                for ch in 0..c {
                    let idx = (bi * c + ch) * plane + pos;
                    let onehot = if ch == t { 1.0 } else { 0.0 };
                    d[idx] = (self.probs[idx] - onehot) * scale;
                }
            }
        }
        vec![(Arc::clone(&self.parent), d)]
    }
}

// ---------------------------------------------------------------------------
// concatenation along channels

struct ConcatGrad {
    segments: Vec<(Option<Arc<Node>>, usize)>,
    plane: usize,
    batch: usize,
    total_c: usize,
}

/// Concatenates rank-4 tensors along the channel dimension.
pub fn concat_channels(inputs: &[&Tensor]) -> Result<Tensor> {
    ensure!(!inputs.is_empty(), "concat of zero tensors");
    let (b, _, h, w) = inputs[0].shape().dims4()?;
    let mut total_c = 0;
    for t in inputs {
        let (tb, tc, th, tw) = t.shape().dims4()?;
        ensure!(
            tb == b && th == h && tw == w,
            "concat spatial/batch mismatch: {} vs {}",
            t.shape(),
            inputs[0].shape()
        );
        total_c += tc;
    }
    let plane = h * w;
    let mut out = vec![0.0; b * total_c * plane];
    for bi in 0..b {
        let mut offset = 0;
        for t in inputs {
            let tc = t.shape().dims()[1];
            let src = &t.data()[bi * tc * plane..][..tc * plane];
            out[(bi * total_c + offset) * plane..][..tc * plane].copy_from_slice(src);
            offset += tc;
        }
    }
    let tracked = inputs.iter().any(|t| t.requires_grad());
    let node = if tracked {
        Some(Node::op(Box::new(ConcatGrad {
            segments: inputs
                .iter()
                .map(|t| (t.node().cloned(), t.shape().dims()[1]))
                .collect(),
            plane,
            batch: b,
            total_c,
        })))
    } else {
        None
    };
    Ok(Tensor::with_node(
        Shape::new(&[b, total_c, h, w])?,
        out,
        node,
    ))
}

impl GradFn for ConcatGrad {
    fn backward(&self, grad_out: &[f64]) -> Vec<(Arc<Node>, Vec<f64>)> {
        let mut result = Vec::new();
        let mut offset = 0;
        for (node, tc) in &self.segments {
            if let Some(n) = node {
                let mut d = vec![0.0; self.batch * tc * self.plane];
                for bi in 0..self.batch {
                    let src =
                        &grad_out[(bi * self.total_c + offset) * self.plane..][..tc * self.plane];
                    d[bi * tc * self.plane..][..tc * self.plane].copy_from_slice(src);
                }
                result.push((Arc::clone(n), d));
            }
            offset += tc;
        }
        result
    }
}

// ---------------------------------------------------------------------------
// elementwise add, scalar scale, global sum

struct AddGrad {
    parents: [Option<Arc<Node>>; 2],
}

impl GradFn for AddGrad {
    fn backward(&self, grad_out: &[f64]) -> Vec<(Arc<Node>, Vec<f64>)> {
        self.parents
            .iter()
            .flatten()
            .map(|n| (Arc::clone(n), grad_out.to_vec()))
            .collect()
    }
}

struct ScaleGrad {
    factor: f64,
    parent: Arc<Node>,
}

impl GradFn for ScaleGrad {
    fn backward(&self, grad_out: &[f64]) -> Vec<(Arc<Node>, Vec<f64>)> {
        vec![(
            Arc::clone(&self.parent),
            grad_out.iter().map(|g| g * self.factor).collect(),
        )]
    }
}

struct SumGrad {
    len: usize,
    parent: Arc<Node>,
}

impl GradFn for SumGrad {
    fn backward(&self, grad_out: &[f64]) -> Vec<(Arc<Node>, Vec<f64>)> {
        vec![(Arc::clone(&self.parent), vec![grad_out[0]; self.len])]
    }
}

impl Tensor {
    /// Elementwise addition of two same-shape tensors.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        ensure!(
            self.shape() == other.shape(),
            "add shape mismatch: {} vs {}",
            self.shape(),
            other.shape()
        );
        let out = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a + b)
            .collect();
        let parents = [self.node().cloned(), other.node().cloned()];
        let node = if parents.iter().any(|p| p.is_some()) {
            Some(Node::op(Box::new(AddGrad { parents })))
        } else {
            None
        };
        Ok(Tensor::with_node(self.shape().clone(), out, node))
    }

    /// Multiplication by a scalar constant.
    pub fn scale(&self, factor: f64) -> Tensor {
        let out = self.data().iter().map(|v| v * factor).collect();
        let node = track1(self, |parent| Box::new(ScaleGrad { factor, parent }));
        Tensor::with_node(self.shape().clone(), out, node)
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&self) -> Tensor {
        let total = self.data().iter().sum();
        let node = track1(self, |parent| {
            Box::new(SumGrad {
                len: self.shape().numel(),
                parent,
            })
        });
        Tensor::with_node(Shape::scalar(), vec![total], node)
    }
}

// ---------------------------------------------------------------------------
// mask application and masked global average pooling

struct MulMaskGrad {
    mask: Arc<Vec<f64>>,
    dims: Dims4,
    parent: Arc<Node>,
}

impl GradFn for MulMaskGrad {
    fn backward(&self, grad_out: &[f64]) -> Vec<(Arc<Node>, Vec<f64>)> {
        let (b, c, h, w) = self.dims;
        let plane = h * w;
        let mut d = vec![0.0; b * c * plane];
        for pl in 0..b * c {
            for i in 0..plane {
                d[pl * plane + i] = grad_out[pl * plane + i] * self.mask[i];
            }
        }
        vec![(Arc::clone(&self.parent), d)]
    }
}

struct MaskedGapGrad {
    mask: Arc<Vec<f64>>,
    denom: f64,
    dims: Dims4,
    parent: Arc<Node>,
}

impl GradFn for MaskedGapGrad {
    fn backward(&self, grad_out: &[f64]) -> Vec<(Arc<Node>, Vec<f64>)> {
        let (b, c, h, w) = self.dims;
        let plane = h * w;
        let mut d = vec![0.0; b * c * plane];
        for ch in 0..b * c {
            let g = grad_out[ch] / self.denom;
            for i in 0..plane {
                d[ch * plane + i] = g * self.mask[i];
            }
        }
        vec![(Arc::clone(&self.parent), d)]
    }
}

impl Tensor {
    /// Multiplies every channel by a constant `[1, 1, h, w]` spatial mask.
    pub fn mul_mask(&self, mask: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = self.shape().dims4()?;
        ensure!(
            mask.shape().dims() == [1, 1, h, w],
            "mask shape {} does not match feature {h}x{w}",
            mask.shape()
        );
        ensure!(!mask.requires_grad(), "masks must not carry gradients");
        let plane = h * w;
        let m = mask.data();
        let mut out = vec![0.0; b * c * plane];
        for pl in 0..b * c {
            for i in 0..plane {
                out[pl * plane + i] = self.data()[pl * plane + i] * m[i];
            }
        }
        let node = track1(self, |parent| {
            Box::new(MulMaskGrad {
                mask: mask.data_arc(),
                dims: (b, c, h, w),
                parent,
            })
        });
        Ok(Tensor::with_node(self.shape().clone(), out, node))
    }

    /// Masked global average pooling: per channel,
    /// `Σ(x ⊙ mask) / (Σ mask + eps)`, yielding `[b, c, 1, 1]`.
    pub fn masked_gap(&self, mask: &Tensor, eps: f64) -> Result<Tensor> {
        let (b, c, h, w) = self.shape().dims4()?;
        ensure!(
            mask.shape().dims() == [1, 1, h, w],
            "mask shape {} does not match feature {h}x{w}",
            mask.shape()
        );
        ensure!(!mask.requires_grad(), "masks must not carry gradients");
        let plane = h * w;
        let m = mask.data();
        let denom = m.iter().sum::<f64>() + eps;
        let mut out = vec![0.0; b * c];
        for ch in 0..b * c {
            let f = &self.data()[ch * plane..][..plane];
            out[ch] = f.iter().zip(m).map(|(a, b)| a * b).sum::<f64>() / denom;
        }
        let node = track1(self, |parent| {
            Box::new(MaskedGapGrad {
                mask: mask.data_arc(),
                denom,
                dims: (b, c, h, w),
                parent,
            })
        });
        Ok(Tensor::with_node(Shape::new(&[b, c, 1, 1])?, out, node))
    }
}

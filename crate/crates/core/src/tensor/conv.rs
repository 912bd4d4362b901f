//! Convolution, depthwise convolution, and transposed convolution.
//!
//! All three are expressed through one im2col/col2im pair plus gemm
//! (`ndarray::linalg::general_mat_mul`), with a direct-loop fast path for
//! depthwise kernels and a no-copy fast path for 1x1 stride-1 convolutions.
//!
//! Layouts: activations `(B, C, H, W)`, conv weights `(C_out, C_in/g, kh, kw)`,
//! transposed-conv weights `(C_in, C_out, kh, kw)`.

use super::{BackwardOp, Elem, Graph, Var};
use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayD, ArrayView2, ArrayViewMut2, Axis, IxDyn};

/// Output extent of a convolution along one axis.
pub fn conv2d_shape(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// Output extent of a transposed convolution along one axis.
pub fn conv_transpose2d_shape(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input - 1) * stride + k - 2 * pad
}

#[derive(Clone, Copy)]
struct ColSpec {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    gh: usize,
    gw: usize,
}

impl ColSpec {
    fn cols(&self) -> usize {
        self.gh * self.gw
    }

    /// Gather image patches into `dst (rows, cols)`. `src` is one sample
    /// `(C,H,W)` as a flat slice.
    fn im2col<A: Elem>(&self, src: &[A], dst: &mut [A]) {
        let cols = self.cols();
        for v in dst.iter_mut() {
            *v = A::zero();
        }
        for c in 0..self.c {
            let plane = &src[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let drow = &mut dst[row * cols..(row + 1) * cols];
                    for oy in 0..self.gh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let srow = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let dseg = &mut drow[oy * self.gw..(oy + 1) * self.gw];
                        for ox in 0..self.gw {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dseg[ox] = srow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-add columns back into an image (transpose of `im2col`).
    fn col2im_add<A: Elem>(&self, src: &[A], dst: &mut [A]) {
        let cols = self.cols();
        for c in 0..self.c {
            let plane = &mut dst[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let srow = &src[row * cols..(row + 1) * cols];
                    for oy in 0..self.gh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let drow = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let sseg = &srow[oy * self.gw..(oy + 1) * self.gw];
                        for ox in 0..self.gw {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                drow[ix as usize] += sseg[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn view2<A: Elem>(a: &ArrayD<A>, i: usize) -> ArrayView2<'_, A> {
    let s = a.shape();
    let flat = a.view().into_shape_with_order((s[0], s[1], s[2] * s[3])).unwrap();
    flat.index_axis_move(Axis(0), i)
}

fn view2_mut<A: Elem>(a: &mut ArrayD<A>, i: usize) -> ArrayViewMut2<'_, A> {
    let s = a.shape().to_vec();
    let flat = a
        .view_mut()
        .into_shape_with_order((s[0], s[1], s[2] * s[3]))
        .unwrap();
    flat.index_axis_move(Axis(0), i)
}

struct Conv2dBack {
    stride: usize,
    pad: usize,
    groups: usize,
}

struct ConvT2dBack {
    stride: usize,
    pad: usize,
}

impl<A: Elem> Graph<A> {
    /// 2D convolution. `w: (C_out, C_in/groups, kh, kw)`, no bias (use
    /// [`Graph::add_chan_bias`] if one is needed).
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize, groups: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv2d expects (B,C,H,W), got {xs:?}");
        let (b, c_in, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (c_out, cpg, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        assert_eq!(c_in, cpg * groups, "conv2d channel/group mismatch");
        assert_eq!(c_out % groups, 0);
        let gh = conv2d_shape(h, kh, stride, pad);
        let gw = conv2d_shape(wd, kw, stride, pad);
        let out = conv2d_forward(
            &self.vals[x.id],
            &self.vals[w.id],
            b,
            c_in,
            h,
            wd,
            c_out,
            kh,
            kw,
            stride,
            pad,
            groups,
            gh,
            gw,
        );
        self.push(
            out,
            vec![x.id, w.id],
            Some(Box::new(Conv2dBack { stride, pad, groups })),
            None,
        )
    }

    /// 2D transposed convolution. `w: (C_in, C_out, kh, kw)`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv_transpose2d expects (B,C,H,W)");
        let (b, c_in, hi, wi) = (xs[0], xs[1], xs[2], xs[3]);
        let (wc_in, c_out, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        assert_eq!(c_in, wc_in, "conv_transpose2d channel mismatch");
        let ho = conv_transpose2d_shape(hi, kh, stride, pad);
        let wo = conv_transpose2d_shape(wi, kw, stride, pad);
        let wmat = self.vals[w.id]
            .view()
            .into_shape_with_order((c_in, c_out * kh * kw))
            .unwrap()
            .to_owned();
        let mut out = ArrayD::<A>::zeros(IxDyn(&[b, c_out, ho, wo]));
        let spec = ColSpec {
            c: c_out,
            h: ho,
            w: wo,
            kh,
            kw,
            stride,
            pad,
            gh: hi,
            gw: wi,
        };
        let mut cols = Array2::<A>::zeros((c_out * kh * kw, hi * wi));
        for bi in 0..b {
            let xb = view2(&self.vals[x.id], bi);
            general_mat_mul(A::one(), &wmat.t(), &xb, A::zero(), &mut cols.view_mut());
            let mut ob = view2_mut(&mut out, bi);
            spec.col2im_add(cols.as_slice().unwrap(), ob.as_slice_mut().unwrap());
        }
        self.push(
            out,
            vec![x.id, w.id],
            Some(Box::new(ConvT2dBack { stride, pad })),
            None,
        )
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward<A: Elem>(
    x: &ArrayD<A>,
    w: &ArrayD<A>,
    b: usize,
    c_in: usize,
    h: usize,
    wd: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    groups: usize,
    gh: usize,
    gw: usize,
) -> ArrayD<A> {
    let mut out = ArrayD::<A>::zeros(IxDyn(&[b, c_out, gh, gw]));
    if groups == c_in && c_out == c_in && groups > 1 {
        depthwise_forward(x, w, b, c_in, h, wd, kh, kw, stride, pad, gh, gw, &mut out);
        return out;
    }
    let cpg = c_in / groups;
    let opg = c_out / groups;
    let wmat = w
        .view()
        .into_shape_with_order((c_out, cpg * kh * kw))
        .unwrap();
    if kh == 1 && kw == 1 && stride == 1 && pad == 0 && groups == 1 {
        // plain gemm per sample, no im2col
        for bi in 0..b {
            let xb = view2(x, bi);
            let mut ob = view2_mut(&mut out, bi);
            general_mat_mul(A::one(), &wmat, &xb, A::zero(), &mut ob);
        }
        return out;
    }
    let spec = ColSpec {
        c: cpg,
        h,
        w: wd,
        kh,
        kw,
        stride,
        pad,
        gh,
        gw,
    };
    let mut cols = Array2::<A>::zeros((cpg * kh * kw, gh * gw));
    for bi in 0..b {
        for g in 0..groups {
            let xb = x.as_slice().unwrap();
            let base = bi * c_in * h * wd + g * cpg * h * wd;
            spec.im2col(&xb[base..base + cpg * h * wd], cols.as_slice_mut().unwrap());
            let wg = wmat.slice(ndarray::s![g * opg..(g + 1) * opg, ..]);
            let mut ob = view2_mut(&mut out, bi);
            let mut og = ob.slice_mut(ndarray::s![g * opg..(g + 1) * opg, ..]);
            general_mat_mul(A::one(), &wg, &cols.view(), A::zero(), &mut og);
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn depthwise_forward<A: Elem>(
    x: &ArrayD<A>,
    w: &ArrayD<A>,
    b: usize,
    c: usize,
    h: usize,
    wd: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    gh: usize,
    gw: usize,
    out: &mut ArrayD<A>,
) {
    let xs = x.as_slice().unwrap();
    let ws = w.as_slice().unwrap();
    let os = out.as_slice_mut().unwrap();
    for bi in 0..b {
        for ci in 0..c {
            let plane = &xs[(bi * c + ci) * h * wd..(bi * c + ci + 1) * h * wd];
            let kern = &ws[ci * kh * kw..(ci + 1) * kh * kw];
            let oplane = &mut os[(bi * c + ci) * gh * gw..(bi * c + ci + 1) * gh * gw];
            for ky in 0..kh {
                for kx in 0..kw {
                    let kv = kern[ky * kw + kx];
                    if kv == A::zero() {
                        continue;
                    }
                    for oy in 0..gh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let srow = &plane[iy as usize * wd..(iy as usize + 1) * wd];
                        let orow = &mut oplane[oy * gw..(oy + 1) * gw];
                        for ox in 0..gw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < wd as isize {
                                orow[ox] += kv * srow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<A: Elem> BackwardOp<A> for Conv2dBack {
    fn backward(
        &self,
        vals: &[ArrayD<A>],
        parents: &[usize],
        grad: &ArrayD<A>,
    ) -> Vec<Option<ArrayD<A>>> {
        let x = &vals[parents[0]];
        let w = &vals[parents[1]];
        let (b, c_in, h, wd) = {
            let s = x.shape();
            (s[0], s[1], s[2], s[3])
        };
        let (c_out, cpg, kh, kw) = {
            let s = w.shape();
            (s[0], s[1], s[2], s[3])
        };
        let (gh, gw) = {
            let s = grad.shape();
            (s[2], s[3])
        };
        let groups = self.groups;
        let mut dx = ArrayD::<A>::zeros(x.raw_dim());
        let mut dw = ArrayD::<A>::zeros(w.raw_dim());
        if groups == c_in && c_out == c_in && groups > 1 {
            depthwise_backward(
                x, w, grad, b, c_in, h, wd, kh, kw, self.stride, self.pad, gh, gw, &mut dx,
                &mut dw,
            );
            return vec![Some(dx), Some(dw)];
        }
        let opg = c_out / groups;
        let wmat = w
            .view()
            .into_shape_with_order((c_out, cpg * kh * kw))
            .unwrap();
        let mut dwmat = Array2::<A>::zeros((c_out, cpg * kh * kw));
        let spec = ColSpec {
            c: cpg,
            h,
            w: wd,
            kh,
            kw,
            stride: self.stride,
            pad: self.pad,
            gh,
            gw,
        };
        let fast_1x1 = kh == 1 && kw == 1 && self.stride == 1 && self.pad == 0 && groups == 1;
        let mut cols = Array2::<A>::zeros((cpg * kh * kw, gh * gw));
        let mut dcols = Array2::<A>::zeros((cpg * kh * kw, gh * gw));
        for bi in 0..b {
            for g in 0..groups {
                let gb = view2(grad, bi);
                let gg = gb.slice(ndarray::s![g * opg..(g + 1) * opg, ..]);
                let wg = wmat.slice(ndarray::s![g * opg..(g + 1) * opg, ..]);
                let mut dwg = dwmat.slice_mut(ndarray::s![g * opg..(g + 1) * opg, ..]);
                if fast_1x1 {
                    let xb = view2(x, bi);
                    general_mat_mul(A::one(), &gg, &xb.t(), A::one(), &mut dwg);
                    let mut dxb = view2_mut(&mut dx, bi);
                    general_mat_mul(A::one(), &wg.t(), &gg, A::one(), &mut dxb);
                } else {
                    let xs = x.as_slice().unwrap();
                    let base = bi * c_in * h * wd + g * cpg * h * wd;
                    spec.im2col(&xs[base..base + cpg * h * wd], cols.as_slice_mut().unwrap());
                    general_mat_mul(A::one(), &gg, &cols.view().t(), A::one(), &mut dwg);
                    general_mat_mul(A::one(), &wg.t(), &gg, A::zero(), &mut dcols.view_mut());
                    let dxs = dx.as_slice_mut().unwrap();
                    spec.col2im_add(
                        dcols.as_slice().unwrap(),
                        &mut dxs[base..base + cpg * h * wd],
                    );
                }
            }
        }
        dw.as_slice_mut()
            .unwrap()
            .copy_from_slice(dwmat.as_slice().unwrap());
        vec![Some(dx), Some(dw)]
    }
}

#[allow(clippy::too_many_arguments)]
fn depthwise_backward<A: Elem>(
    x: &ArrayD<A>,
    w: &ArrayD<A>,
    grad: &ArrayD<A>,
    b: usize,
    c: usize,
    h: usize,
    wd: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    gh: usize,
    gw: usize,
    dx: &mut ArrayD<A>,
    dw: &mut ArrayD<A>,
) {
    let xs = x.as_slice().unwrap();
    let ws = w.as_slice().unwrap();
    let gs = grad.as_slice().unwrap();
    let dxs = dx.as_slice_mut().unwrap();
    let dws = dw.as_slice_mut().unwrap();
    for bi in 0..b {
        for ci in 0..c {
            let plane = &xs[(bi * c + ci) * h * wd..(bi * c + ci + 1) * h * wd];
            let kern = &ws[ci * kh * kw..(ci + 1) * kh * kw];
            let gplane = &gs[(bi * c + ci) * gh * gw..(bi * c + ci + 1) * gh * gw];
            for ky in 0..kh {
                for kx in 0..kw {
                    let kv = kern[ky * kw + kx];
                    let mut kacc = A::zero();
                    for oy in 0..gh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let srow_base = iy as usize * wd;
                        let grow = &gplane[oy * gw..(oy + 1) * gw];
                        for ox in 0..gw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < wd as isize {
                                let g = grow[ox];
                                kacc += g * plane[srow_base + ix as usize];
                                dxs[(bi * c + ci) * h * wd + srow_base + ix as usize] += kv * g;
                            }
                        }
                    }
                    dws[ci * kh * kw + ky * kw + kx] += kacc;
                }
            }
        }
    }
}

impl<A: Elem> BackwardOp<A> for ConvT2dBack {
    fn backward(
        &self,
        vals: &[ArrayD<A>],
        parents: &[usize],
        grad: &ArrayD<A>,
    ) -> Vec<Option<ArrayD<A>>> {
        let x = &vals[parents[0]];
        let w = &vals[parents[1]];
        let (b, c_in, hi, wi) = {
            let s = x.shape();
            (s[0], s[1], s[2], s[3])
        };
        let (_, c_out, kh, kw) = {
            let s = w.shape();
            (s[0], s[1], s[2], s[3])
        };
        let (ho, wo) = {
            let s = grad.shape();
            (s[2], s[3])
        };
        let wmat = w
            .view()
            .into_shape_with_order((c_in, c_out * kh * kw))
            .unwrap();
        let spec = ColSpec {
            c: c_out,
            h: ho,
            w: wo,
            kh,
            kw,
            stride: self.stride,
            pad: self.pad,
            gh: hi,
            gw: wi,
        };
        let mut dx = ArrayD::<A>::zeros(x.raw_dim());
        let mut dwmat = Array2::<A>::zeros((c_in, c_out * kh * kw));
        let mut gcols = Array2::<A>::zeros((c_out * kh * kw, hi * wi));
        for bi in 0..b {
            let gslice = grad.as_slice().unwrap();
            let gbase = bi * c_out * ho * wo;
            spec.im2col(
                &gslice[gbase..gbase + c_out * ho * wo],
                gcols.as_slice_mut().unwrap(),
            );
            let mut dxb = view2_mut(&mut dx, bi);
            general_mat_mul(A::one(), &wmat, &gcols.view(), A::zero(), &mut dxb);
            // adjust: dx = W . gcols computes (C_in, Li) from (C_in, C_out k^2) x (C_out k^2, Li)
            let xb = view2(x, bi);
            general_mat_mul(A::one(), &xb, &gcols.view().t(), A::one(), &mut dwmat.view_mut());
        }
        // the gemm above wrote dxb with beta=0 each sample; collect dw
        let mut dw = ArrayD::<A>::zeros(w.raw_dim());
        dw.as_slice_mut()
            .unwrap()
            .copy_from_slice(dwmat.as_slice().unwrap());
        vec![Some(dx), Some(dw)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::testutil::{max_rel_err, numeric_grad};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn rand_arr(shape: &[usize], rng: &mut ChaCha12Rng) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    /// Reference convolution as direct nested loops, independent of im2col.
    #[allow(clippy::too_many_arguments)]
    fn conv_naive(
        x: &ArrayD<f64>,
        w: &ArrayD<f64>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> ArrayD<f64> {
        let (b, c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (c_out, cpg, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        let gh = conv2d_shape(h, kh, stride, pad);
        let gw = conv2d_shape(wd, kw, stride, pad);
        let opg = c_out / groups;
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[b, c_out, gh, gw]));
        for bi in 0..b {
            for oc in 0..c_out {
                let g = oc / opg;
                for oy in 0..gh {
                    for ox in 0..gw {
                        let mut acc = 0.0;
                        for icg in 0..cpg {
                            let ic = g * cpg + icg;
                            let _ = c_in;
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < wd as isize {
                                        acc += x[[bi, ic, iy as usize, ix as usize]]
                                            * w[[oc, icg, ky, kx]];
                                    }
                                }
                            }
                        }
                        out[[bi, oc, oy, ox]] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_matches_naive() {
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        for &(cin, cout, k, s, p, groups) in &[
            (3usize, 4usize, 3usize, 1usize, 1usize, 1usize),
            (4, 6, 3, 2, 1, 2),
            (2, 5, 1, 1, 0, 1),
            (4, 4, 3, 2, 1, 4), // depthwise
            (3, 3, 3, 1, 0, 3), // depthwise, valid padding
        ] {
            let x = rand_arr(&[2, cin, 7, 6], &mut rng);
            let w = rand_arr(&[cout, cin / groups, k, k], &mut rng);
            let want = conv_naive(&x, &w, s, p, groups);
            let mut g = Graph::<f64>::new();
            let xv = g.constant(x);
            let wv = g.constant(w);
            let y = g.conv2d(xv, wv, s, p, groups);
            let got = g.val(y);
            let diff = (&want - got).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(diff < 1e-10, "conv mismatch {diff} for k={k} s={s} g={groups}");
        }
    }

    #[test]
    fn conv2d_gradients_match_fd() {
        let mut rng = ChaCha12Rng::seed_from_u64(22);
        for &(cin, cout, k, s, p, groups) in &[
            (2usize, 3usize, 3usize, 2usize, 1usize, 1usize),
            (2, 4, 1, 1, 0, 1),
            (3, 3, 3, 1, 1, 3),
        ] {
            let x0 = rand_arr(&[2, cin, 5, 5], &mut rng);
            let w0 = rand_arr(&[cout, cin / groups, k, k], &mut rng);
            // d/dx
            let mut g = Graph::<f64>::new();
            let x = g.leaf_grad(x0.clone());
            let w = g.leaf_grad(w0.clone());
            let y = g.conv2d(x, w, s, p, groups);
            let z = g.mul(y, y);
            let loss = g.sum_all(z);
            let grads = g.backward(loss);
            let ax: Vec<f64> = grads.get(x).unwrap().iter().copied().collect();
            let aw: Vec<f64> = grads.get(w).unwrap().iter().copied().collect();
            let fx: Vec<f64> = x0.iter().copied().collect();
            let nx = numeric_grad(
                |v| {
                    let arr = ArrayD::from_shape_vec(x0.raw_dim(), v.to_vec()).unwrap();
                    let mut g = Graph::<f64>::new();
                    let x = g.constant(arr);
                    let w = g.constant(w0.clone());
                    let y = g.conv2d(x, w, s, p, groups);
                    let z = g.mul(y, y);
                    let l = g.sum_all(z);
                    g.val(l)[IxDyn(&[])]
                },
                &fx,
                1e-5,
            );
            assert!(max_rel_err(&ax, &nx) < 1e-6, "conv dx fd mismatch");
            let fw: Vec<f64> = w0.iter().copied().collect();
            let nw = numeric_grad(
                |v| {
                    let arr = ArrayD::from_shape_vec(w0.raw_dim(), v.to_vec()).unwrap();
                    let mut g = Graph::<f64>::new();
                    let x = g.constant(x0.clone());
                    let w = g.constant(arr);
                    let y = g.conv2d(x, w, s, p, groups);
                    let z = g.mul(y, y);
                    let l = g.sum_all(z);
                    g.val(l)[IxDyn(&[])]
                },
                &fw,
                1e-5,
            );
            assert!(max_rel_err(&aw, &nw) < 1e-6, "conv dw fd mismatch");
        }
    }

    #[test]
    fn conv_transpose_is_adjoint_of_conv() {
        // <conv(x), y> == <x, convT(y)> with shared weights: the defining
        // property, checked on random tensors.
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        let (cin, cout, k, s, p) = (3usize, 2usize, 4usize, 2usize, 1usize);
        let x = rand_arr(&[2, cin, 6, 6], &mut rng);
        let gh = conv2d_shape(6, k, s, p);
        let y = rand_arr(&[2, cout, gh, gh], &mut rng);
        // conv with weight (cout, cin, k, k)
        let w = rand_arr(&[cout, cin, k, k], &mut rng);
        let mut g = Graph::<f64>::new();
        let xv = g.constant(x.clone());
        let wv = g.constant(w.clone());
        let cy = g.conv2d(xv, wv, s, p, 1);
        let lhs: f64 = g
            .val(cy)
            .iter()
            .zip(y.iter())
            .map(|(a, b)| a * b)
            .sum();
        // convT with the same kernel, but laid out (C_in=cout, C_out=cin)
        let wt = {
            let mut t = ArrayD::<f64>::zeros(IxDyn(&[cout, cin, k, k]));
            t.assign(&w);
            t
        };
        let mut g2 = Graph::<f64>::new();
        let yv = g2.constant(y);
        let wv2 = g2.constant(wt);
        let ty = g2.conv_transpose2d(yv, wv2, s, p);
        assert_eq!(g2.shape(ty), &[2, cin, 6, 6]);
        let rhs: f64 = g2
            .val(ty)
            .iter()
            .zip(x.iter())
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-9, "adjoint check {lhs} vs {rhs}");
    }

    #[test]
    fn conv_transpose_gradients_match_fd() {
        let mut rng = ChaCha12Rng::seed_from_u64(24);
        let x0 = rand_arr(&[1, 3, 4, 4], &mut rng);
        let w0 = rand_arr(&[3, 2, 4, 4], &mut rng);
        let (s, p) = (2usize, 1usize);
        let mut g = Graph::<f64>::new();
        let x = g.leaf_grad(x0.clone());
        let w = g.leaf_grad(w0.clone());
        let y = g.conv_transpose2d(x, w, s, p);
        assert_eq!(g.shape(y), &[1, 2, 8, 8]);
        let z = g.mul(y, y);
        let loss = g.sum_all(z);
        let grads = g.backward(loss);
        let ax: Vec<f64> = grads.get(x).unwrap().iter().copied().collect();
        let aw: Vec<f64> = grads.get(w).unwrap().iter().copied().collect();
        let fx: Vec<f64> = x0.iter().copied().collect();
        let nx = numeric_grad(
            |v| {
                let arr = ArrayD::from_shape_vec(x0.raw_dim(), v.to_vec()).unwrap();
                let mut g = Graph::<f64>::new();
                let x = g.constant(arr);
                let w = g.constant(w0.clone());
                let y = g.conv_transpose2d(x, w, s, p);
                let z = g.mul(y, y);
                let l = g.sum_all(z);
                g.val(l)[IxDyn(&[])]
            },
            &fx,
            1e-5,
        );
        assert!(max_rel_err(&ax, &nx) < 1e-6);
        let fw: Vec<f64> = w0.iter().copied().collect();
        let nw = numeric_grad(
            |v| {
                let arr = ArrayD::from_shape_vec(w0.raw_dim(), v.to_vec()).unwrap();
                let mut g = Graph::<f64>::new();
                let x = g.constant(x0.clone());
                let w = g.constant(arr);
                let y = g.conv_transpose2d(x, w, s, p);
                let z = g.mul(y, y);
                let l = g.sum_all(z);
                g.val(l)[IxDyn(&[])]
            },
            &fw,
            1e-5,
        );
        assert!(max_rel_err(&aw, &nw) < 1e-6);
    }
}

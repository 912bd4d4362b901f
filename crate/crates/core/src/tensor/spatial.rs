//! Spatial ops: adaptive average pooling, nearest/bilinear resizing, and
//! broadcasting a per-sample context vector over the spatial grid.

use super::{BackwardOp, Elem, Graph, Var};
use ndarray::{ArrayD, IxDyn};

/// Pooling regions follow the usual adaptive-pool convention:
/// `start = floor(i*in/out)`, `end = ceil((i+1)*in/out)`.
fn pool_region(i: usize, input: usize, output: usize) -> (usize, usize) {
    let start = i * input / output;
    let end = ((i + 1) * input).div_ceil(output);
    (start, end)
}

struct AdaptiveAvgPoolBack {
    in_h: usize,
    in_w: usize,
}

impl<A: Elem> BackwardOp<A> for AdaptiveAvgPoolBack {
    fn backward(
        &self,
        vals: &[ArrayD<A>],
        parents: &[usize],
        grad: &ArrayD<A>,
    ) -> Vec<Option<ArrayD<A>>> {
        let x = &vals[parents[0]];
        let (b, c) = (x.shape()[0], x.shape()[1]);
        let (oh, ow) = (grad.shape()[2], grad.shape()[3]);
        let mut dx = ArrayD::<A>::zeros(x.raw_dim());
        for bi in 0..b {
            for ci in 0..c {
                for oy in 0..oh {
                    let (y0, y1) = pool_region(oy, self.in_h, oh);
                    for ox in 0..ow {
                        let (x0, x1) = pool_region(ox, self.in_w, ow);
                        let n = A::from_usize((y1 - y0) * (x1 - x0));
                        let g = grad[[bi, ci, oy, ox]] / n;
                        for iy in y0..y1 {
                            for ix in x0..x1 {
                                dx[[bi, ci, iy, ix]] += g;
                            }
                        }
                    }
                }
            }
        }
        vec![Some(dx)]
    }
}

/// Bilinear sample positions with half-pixel centers (`align_corners=false`).
fn bilinear_coeffs(dst: usize, input: usize, output: usize) -> (usize, usize, f64) {
    if input == output {
        return (dst, dst, 0.0);
    }
    let scale = input as f64 / output as f64;
    let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(input - 1);
    let i1 = (i0 + 1).min(input - 1);
    let frac = (src - i0 as f64).clamp(0.0, 1.0);
    (i0, i1, frac)
}

fn nearest_index(dst: usize, input: usize, output: usize) -> usize {
    ((dst * input) / output).min(input - 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ResizeMode {
    Nearest,
    Bilinear,
}

struct ResizeBack {
    mode: ResizeMode,
    in_h: usize,
    in_w: usize,
}

impl<A: Elem> BackwardOp<A> for ResizeBack {
    fn backward(
        &self,
        vals: &[ArrayD<A>],
        parents: &[usize],
        grad: &ArrayD<A>,
    ) -> Vec<Option<ArrayD<A>>> {
        let x = &vals[parents[0]];
        let (b, c) = (x.shape()[0], x.shape()[1]);
        let (oh, ow) = (grad.shape()[2], grad.shape()[3]);
        let mut dx = ArrayD::<A>::zeros(x.raw_dim());
        match self.mode {
            ResizeMode::Nearest => {
                for bi in 0..b {
                    for ci in 0..c {
                        for oy in 0..oh {
                            let iy = nearest_index(oy, self.in_h, oh);
                            for ox in 0..ow {
                                let ix = nearest_index(ox, self.in_w, ow);
                                dx[[bi, ci, iy, ix]] += grad[[bi, ci, oy, ox]];
                            }
                        }
                    }
                }
            }
            ResizeMode::Bilinear => {
                for bi in 0..b {
                    for ci in 0..c {
                        for oy in 0..oh {
                            let (y0, y1, fy) = bilinear_coeffs(oy, self.in_h, oh);
                            for ox in 0..ow {
                                let (x0, x1, fx) = bilinear_coeffs(ox, self.in_w, ow);
                                let g = grad[[bi, ci, oy, ox]];
                                let w00 = A::from_f64((1.0 - fy) * (1.0 - fx));
                                let w01 = A::from_f64((1.0 - fy) * fx);
                                let w10 = A::from_f64(fy * (1.0 - fx));
                                let w11 = A::from_f64(fy * fx);
                                dx[[bi, ci, y0, x0]] += g * w00;
                                dx[[bi, ci, y0, x1]] += g * w01;
                                dx[[bi, ci, y1, x0]] += g * w10;
                                dx[[bi, ci, y1, x1]] += g * w11;
                            }
                        }
                    }
                }
            }
        }
        vec![Some(dx)]
    }
}

struct BroadcastAddHwBack;

impl<A: Elem> BackwardOp<A> for BroadcastAddHwBack {
    fn backward(
        &self,
        _vals: &[ArrayD<A>],
        _parents: &[usize],
        grad: &ArrayD<A>,
    ) -> Vec<Option<ArrayD<A>>> {
        let dc = grad
            .sum_axis(ndarray::Axis(3))
            .sum_axis(ndarray::Axis(2));
        vec![Some(grad.clone()), Some(dc)]
    }
}

impl<A: Elem> Graph<A> {
    /// Adaptive average pooling of `(B,C,H,W)` to `(B,C,oh,ow)`.
    pub fn adaptive_avg_pool2d(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4);
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let mut out = ArrayD::<A>::zeros(IxDyn(&[b, c, oh, ow]));
        let xv = &self.vals[x.id];
        for bi in 0..b {
            for ci in 0..c {
                for oy in 0..oh {
                    let (y0, y1) = pool_region(oy, h, oh);
                    for ox in 0..ow {
                        let (x0, x1) = pool_region(ox, w, ow);
                        let mut acc = A::zero();
                        for iy in y0..y1 {
                            for ix in x0..x1 {
                                acc += xv[[bi, ci, iy, ix]];
                            }
                        }
                        out[[bi, ci, oy, ox]] =
                            acc / A::from_usize((y1 - y0) * (x1 - x0));
                    }
                }
            }
        }
        self.push(
            out,
            vec![x.id],
            Some(Box::new(AdaptiveAvgPoolBack { in_h: h, in_w: w })),
            None,
        )
    }

    /// Global average pooling to `(B, C)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let pooled = self.adaptive_avg_pool2d(x, 1, 1);
        self.reshape(pooled, &[s[0], s[1]])
    }

    /// Resize `(B,C,H,W)` to `(B,C,oh,ow)`.
    pub fn resize2d(&mut self, x: Var, oh: usize, ow: usize, mode: ResizeMode) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4);
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let xv = &self.vals[x.id];
        let mut out = ArrayD::<A>::zeros(IxDyn(&[b, c, oh, ow]));
        match mode {
            ResizeMode::Nearest => {
                for bi in 0..b {
                    for ci in 0..c {
                        for oy in 0..oh {
                            let iy = nearest_index(oy, h, oh);
                            for ox in 0..ow {
                                let ix = nearest_index(ox, w, ow);
                                out[[bi, ci, oy, ox]] = xv[[bi, ci, iy, ix]];
                            }
                        }
                    }
                }
            }
            ResizeMode::Bilinear => {
                for bi in 0..b {
                    for ci in 0..c {
                        for oy in 0..oh {
                            let (y0, y1, fy) = bilinear_coeffs(oy, h, oh);
                            for ox in 0..ow {
                                let (x0, x1, fx) = bilinear_coeffs(ox, w, ow);
                                let v00 = xv[[bi, ci, y0, x0]].to_f64();
                                let v01 = xv[[bi, ci, y0, x1]].to_f64();
                                let v10 = xv[[bi, ci, y1, x0]].to_f64();
                                let v11 = xv[[bi, ci, y1, x1]].to_f64();
                                let top = v00 * (1.0 - fx) + v01 * fx;
                                let bot = v10 * (1.0 - fx) + v11 * fx;
                                out[[bi, ci, oy, ox]] =
                                    A::from_f64(top * (1.0 - fy) + bot * fy);
                            }
                        }
                    }
                }
            }
        }
        self.push(
            out,
            vec![x.id],
            Some(Box::new(ResizeBack { mode, in_h: h, in_w: w })),
            None,
        )
    }

    /// `(B,C,H,W) + ctx(B,C)` broadcast over the grid (the residual
    /// global-modulation step).
    pub fn broadcast_add_hw(&mut self, x: Var, ctx: Var) -> Var {
        let s = self.shape(x).to_vec();
        let cs = self.shape(ctx).to_vec();
        assert_eq!(s.len(), 4);
        assert_eq!(cs, [s[0], s[1]], "context shape mismatch");
        let cv = super::reshape_arr(&self.vals[ctx.id], &[s[0], s[1], 1, 1]);
        let v = &self.vals[x.id] + &cv.broadcast(self.vals[x.id].raw_dim()).unwrap();
        self.push(v, vec![x.id, ctx.id], Some(Box::new(BroadcastAddHwBack)), None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::testutil::{max_rel_err, numeric_grad};
    use ndarray::IxDyn;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn gradcheck(shape: &[usize], build: impl Fn(&mut Graph<f64>, Var) -> Var) -> f64 {
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let x0 = ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0));
        let mut g = Graph::<f64>::new();
        let x = g.leaf_grad(x0.clone());
        let loss = build(&mut g, x);
        let grads = g.backward(loss);
        let analytic: Vec<f64> = grads.get(x).unwrap().iter().copied().collect();
        let flat: Vec<f64> = x0.iter().copied().collect();
        let numeric = numeric_grad(
            |v| {
                let arr = ArrayD::from_shape_vec(IxDyn(shape), v.to_vec()).unwrap();
                let mut g = Graph::<f64>::new();
                let x = g.constant(arr);
                let loss = build(&mut g, x);
                g.val(loss)[IxDyn(&[])]
            },
            &flat,
            1e-5,
        );
        max_rel_err(&analytic, &numeric)
    }

    #[test]
    fn pool_and_resize_gradients() {
        assert!(gradcheck(&[1, 2, 5, 7], |g, x| {
            let y = g.adaptive_avg_pool2d(x, 2, 3);
            let z = g.mul(y, y);
            g.sum_all(z)
        }) < 1e-7);
        assert!(gradcheck(&[1, 1, 3, 3], |g, x| {
            let y = g.resize2d(x, 6, 6, ResizeMode::Bilinear);
            let z = g.mul(y, y);
            g.sum_all(z)
        }) < 1e-7);
        assert!(gradcheck(&[1, 1, 3, 3], |g, x| {
            let y = g.resize2d(x, 5, 7, ResizeMode::Nearest);
            let z = g.mul(y, y);
            g.sum_all(z)
        }) < 1e-7);
    }

    #[test]
    fn broadcast_add_hw_gradients() {
        let mut rng = ChaCha12Rng::seed_from_u64(32);
        let ctx0 = ArrayD::from_shape_fn(IxDyn(&[2, 3]), |_| rng.gen_range(-1.0..1.0));
        assert!(gradcheck(&[2, 3, 4, 4], |g, x| {
            let c = g.constant(ctx0.clone());
            let y = g.broadcast_add_hw(x, c);
            let z = g.mul(y, y);
            g.sum_all(z)
        }) < 1e-7);
        // context side
        let x0 = ArrayD::from_shape_fn(IxDyn(&[2, 3, 4, 4]), |_| rng.gen_range(-1.0..1.0));
        let err = {
            let c0 = ctx0.clone();
            let mut g = Graph::<f64>::new();
            let x = g.constant(x0.clone());
            let c = g.leaf_grad(c0.clone());
            let y = g.broadcast_add_hw(x, c);
            let z = g.mul(y, y);
            let loss = g.sum_all(z);
            let grads = g.backward(loss);
            let analytic: Vec<f64> = grads.get(c).unwrap().iter().copied().collect();
            let flat: Vec<f64> = c0.iter().copied().collect();
            let numeric = numeric_grad(
                |v| {
                    let arr = ArrayD::from_shape_vec(IxDyn(&[2, 3]), v.to_vec()).unwrap();
                    let mut g = Graph::<f64>::new();
                    let x = g.constant(x0.clone());
                    let c = g.constant(arr);
                    let y = g.broadcast_add_hw(x, c);
                    let z = g.mul(y, y);
                    let loss = g.sum_all(z);
                    g.val(loss)[IxDyn(&[])]
                },
                &flat,
                1e-5,
            );
            max_rel_err(&analytic, &numeric)
        };
        assert!(err < 1e-7);
    }

    #[test]
    fn identity_resize_is_exact() {
        let mut rng = ChaCha12Rng::seed_from_u64(33);
        let x0 = ArrayD::from_shape_fn(IxDyn(&[1, 2, 4, 4]), |_| rng.gen_range(-1.0..1.0));
        let mut g = Graph::<f64>::new();
        let x = g.constant(x0.clone());
        let y = g.resize2d(x, 4, 4, ResizeMode::Bilinear);
        assert_eq!(g.val(y), &x0);
    }
}

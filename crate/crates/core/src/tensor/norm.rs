//! Batch normalization as a fused graph op (training path). The evaluation
//! path is a per-channel affine using running statistics and is assembled in
//! the layer code from simpler ops.
//!
//! Loops run over contiguous per-(sample, channel) planes; this op sits on
//! the hot path of every training step.

use super::{BackwardOp, Elem, Graph, Var};
use ndarray::{ArrayD, IxDyn};

/// Batch statistics produced by a training-mode forward, used by the layer
/// to update its running buffers.
pub struct BatchNormSaved<A> {
    pub mean: Vec<A>,
    /// Unbiased variance (divided by n-1), the usual running-stat convention.
    pub var_unbiased: Vec<A>,
}

struct BatchNormBack<A> {
    xhat: ArrayD<A>,
    invstd: Vec<A>,
}

impl<A: Elem> BackwardOp<A> for BatchNormBack<A> {
    fn backward(
        &self,
        vals: &[ArrayD<A>],
        parents: &[usize],
        grad: &ArrayD<A>,
    ) -> Vec<Option<ArrayD<A>>> {
        let gamma = &vals[parents[1]];
        let (b, c, h, w) = {
            let s = grad.shape();
            (s[0], s[1], s[2], s[3])
        };
        let plane = h * w;
        let nr = A::from_usize(b * plane);
        let gs = grad.as_slice().expect("standard layout");
        let xh = self.xhat.as_slice().unwrap();
        let mut sum_g = vec![A::zero(); c];
        let mut sum_gx = vec![A::zero(); c];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * plane;
                let mut sg = A::zero();
                let mut sgx = A::zero();
                for i in 0..plane {
                    let g = gs[base + i];
                    sg += g;
                    sgx += g * xh[base + i];
                }
                sum_g[ci] += sg;
                sum_gx[ci] += sgx;
            }
        }
        let mut dx = ArrayD::<A>::zeros(grad.raw_dim());
        let dxs = dx.as_slice_mut().unwrap();
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * plane;
                let k = gamma[IxDyn(&[ci])] * self.invstd[ci] / nr;
                let sg = sum_g[ci];
                let sgx = sum_gx[ci];
                for i in 0..plane {
                    let g = gs[base + i];
                    dxs[base + i] = k * (nr * g - sg - xh[base + i] * sgx);
                }
            }
        }
        let dgamma = ArrayD::from_shape_vec(IxDyn(&[c]), sum_gx).unwrap();
        let dbeta = ArrayD::from_shape_vec(IxDyn(&[c]), sum_g).unwrap();
        vec![Some(dx), Some(dgamma), Some(dbeta)]
    }
}

impl<A: Elem> Graph<A> {
    /// Training-mode batch norm over `(B,C,H,W)` with per-channel batch
    /// statistics. Returns the normalized output and the batch stats.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> (Var, BatchNormSaved<A>) {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4, "batch_norm expects (B,C,H,W)");
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let plane = h * w;
        let n = b * plane;
        assert!(n > 1, "batch_norm needs more than one element per channel");
        let na = A::from_usize(n);
        let epsa = A::from_f64(eps);
        let xs = self.vals[x.id].as_slice().expect("standard layout");
        let mut mean = vec![A::zero(); c];
        let mut var = vec![A::zero(); c];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * plane;
                let mut acc = A::zero();
                for i in 0..plane {
                    acc += xs[base + i];
                }
                mean[ci] += acc;
            }
        }
        for m in mean.iter_mut() {
            *m /= na;
        }
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * plane;
                let m = mean[ci];
                let mut acc = A::zero();
                for i in 0..plane {
                    let d = xs[base + i] - m;
                    acc += d * d;
                }
                var[ci] += acc;
            }
        }
        for v in var.iter_mut() {
            *v /= na;
        }
        let invstd: Vec<A> = var.iter().map(|&v| A::one() / (v + epsa).sqrt()).collect();
        let mut xhat = ArrayD::<A>::zeros(IxDyn(&[b, c, h, w]));
        let mut y = ArrayD::<A>::zeros(IxDyn(&[b, c, h, w]));
        {
            let xhs = xhat.as_slice_mut().unwrap();
            let ys = y.as_slice_mut().unwrap();
            let gv = &self.vals[gamma.id];
            let bv = &self.vals[beta.id];
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * plane;
                    let m = mean[ci];
                    let is = invstd[ci];
                    let ga = gv[IxDyn(&[ci])];
                    let be = bv[IxDyn(&[ci])];
                    for i in 0..plane {
                        let xh = (xs[base + i] - m) * is;
                        xhs[base + i] = xh;
                        ys[base + i] = ga * xh + be;
                    }
                }
            }
        }
        let unbias = if n > 1 {
            na / A::from_usize(n - 1)
        } else {
            A::one()
        };
        let stats = BatchNormSaved {
            mean,
            var_unbiased: var.iter().map(|&v| v * unbias).collect(),
        };
        let v = self.push(
            y,
            vec![x.id, gamma.id, beta.id],
            Some(Box::new(BatchNormBack { xhat, invstd })),
            None,
        );
        (v, stats)
    }

    /// Per-channel affine `y = s_c * x + t_c` with constant coefficients
    /// (evaluation-mode batch norm; no gradient path).
    pub fn channel_affine(&mut self, x: Var, scale: &[A], shift: &[A]) -> Var {
        let s = self.shape(x).to_vec();
        let c = s[1];
        assert_eq!(scale.len(), c);
        assert_eq!(shift.len(), c);
        let (b, plane) = (s[0], s[2] * s[3]);
        let xs = self.vals[x.id].as_slice().expect("standard layout");
        let mut y = ArrayD::<A>::zeros(self.vals[x.id].raw_dim());
        {
            let ys = y.as_slice_mut().unwrap();
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * plane;
                    let sc = scale[ci];
                    let sh = shift[ci];
                    for i in 0..plane {
                        ys[base + i] = sc * xs[base + i] + sh;
                    }
                }
            }
        }
        self.constant(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::testutil::{max_rel_err, numeric_grad};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn batch_norm_output_is_normalized() {
        let mut rng = ChaCha12Rng::seed_from_u64(41);
        let x0 = ArrayD::from_shape_fn(IxDyn(&[4, 3, 5, 5]), |_| rng.gen_range(-2.0..2.0));
        let mut g = Graph::<f64>::train();
        let x = g.constant(x0);
        let gamma = g.constant(ArrayD::ones(IxDyn(&[3])));
        let beta = g.constant(ArrayD::zeros(IxDyn(&[3])));
        let (y, stats) = g.batch_norm_train(x, gamma, beta, 1e-5);
        let yv = g.val(y);
        for ci in 0..3 {
            let mut mean = 0.0;
            let mut var = 0.0;
            let n = 4 * 5 * 5;
            for bi in 0..4 {
                for iy in 0..5 {
                    for ix in 0..5 {
                        mean += yv[[bi, ci, iy, ix]];
                    }
                }
            }
            mean /= n as f64;
            for bi in 0..4 {
                for iy in 0..5 {
                    for ix in 0..5 {
                        var += (yv[[bi, ci, iy, ix]] - mean).powi(2);
                    }
                }
            }
            var /= n as f64;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-4);
            assert!(stats.var_unbiased[ci] > 0.0);
        }
    }

    #[test]
    fn channel_affine_matches_direct() {
        let mut g = Graph::<f64>::new();
        let x0 = ArrayD::from_shape_fn(IxDyn(&[2, 2, 2, 2]), |ix| {
            ix[0] as f64 + 0.5 * ix[1] as f64 + 0.1 * ix[3] as f64
        });
        let x = g.constant(x0.clone());
        let y = g.channel_affine(x, &[2.0, -1.0], &[0.5, 0.25]);
        let yv = g.val(y);
        for bi in 0..2 {
            for ci in 0..2 {
                for iy in 0..2 {
                    for ix in 0..2 {
                        let s = if ci == 0 { 2.0 } else { -1.0 };
                        let t = if ci == 0 { 0.5 } else { 0.25 };
                        let want = s * x0[[bi, ci, iy, ix]] + t;
                        assert!((yv[[bi, ci, iy, ix]] - want).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn batch_norm_gradients_match_fd() {
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let shape = [2usize, 2, 3, 3];
        let x0 = ArrayD::from_shape_fn(IxDyn(&shape), |_| rng.gen_range(-1.0..1.0));
        let g0 = ArrayD::from_shape_fn(IxDyn(&[2]), |_| rng.gen_range(0.5..1.5));
        let b0 = ArrayD::from_shape_fn(IxDyn(&[2]), |_| rng.gen_range(-0.5..0.5));
        // weight the output so the loss is not permutation-symmetric
        let wobble =
            ArrayD::from_shape_fn(IxDyn(&shape), |ix| 0.3 + (ix[3] as f64) * 0.21 - (ix[0] as f64) * 0.1);
        let run = |x: &ArrayD<f64>, ga: &ArrayD<f64>, be: &ArrayD<f64>| -> f64 {
            let mut g = Graph::<f64>::train();
            let xv = g.constant(x.clone());
            let gv = g.constant(ga.clone());
            let bv = g.constant(be.clone());
            let (y, _) = g.batch_norm_train(xv, gv, bv, 1e-5);
            let w = g.constant(wobble.clone());
            let z = g.mul(y, w);
            let l = g.sum_all(z);
            g.val(l)[IxDyn(&[])]
        };
        let mut g = Graph::<f64>::train();
        let xv = g.leaf_grad(x0.clone());
        let gv = g.leaf_grad(g0.clone());
        let bv = g.leaf_grad(b0.clone());
        let (y, _) = g.batch_norm_train(xv, gv, bv, 1e-5);
        let w = g.constant(wobble.clone());
        let z = g.mul(y, w);
        let l = g.sum_all(z);
        let grads = g.backward(l);
        for (leaf, base) in [(xv, &x0), (gv, &g0), (bv, &b0)] {
            let analytic: Vec<f64> = grads.get(leaf).unwrap().iter().copied().collect();
            let flat: Vec<f64> = base.iter().copied().collect();
            let numeric = numeric_grad(
                |v| {
                    let arr = ArrayD::from_shape_vec(base.raw_dim(), v.to_vec()).unwrap();
                    let (x, ga, be) = if leaf == xv {
                        (arr.clone(), g0.clone(), b0.clone())
                    } else if leaf == gv {
                        (x0.clone(), arr.clone(), b0.clone())
                    } else {
                        (x0.clone(), g0.clone(), arr.clone())
                    };
                    run(&x, &ga, &be)
                },
                &flat,
                1e-5,
            );
            let err = max_rel_err(&analytic, &numeric);
            assert!(err < 1e-6, "bn grad err {err}");
        }
    }
}

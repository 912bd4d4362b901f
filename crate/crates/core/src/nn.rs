//! Layers on top of the autodiff graph: parameter storage, initialization,
//! convolutional blocks (including MobileNetV2-style inverted residuals),
//! batch norm, linear layers, and the attention modules used for
//! gaze-conditioned redirection.

use crate::tensor::{BatchNormSaved, Elem, Graph, Var};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

/// Index into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

struct Entry<A> {
    name: String,
    value: ArrayD<A>,
    trainable: bool,
}

/// Named tensors owned by a model: trainable parameters plus buffers
/// (batch-norm running statistics).
pub struct ParamStore<A: Elem> {
    entries: Vec<Entry<A>>,
}

impl<A: Elem> Default for ParamStore<A> {
    fn default() -> Self {
        Self::new()
    }
}

impl<A: Elem> ParamStore<A> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add_param(&mut self, name: impl Into<String>, value: ArrayD<A>) -> ParamId {
        self.entries.push(Entry {
            name: name.into(),
            value,
            trainable: true,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: ArrayD<A>) -> ParamId {
        self.entries.push(Entry {
            name: name.into(),
            value,
            trainable: false,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<A> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<A> {
        &mut self.entries[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: ArrayD<A>) {
        assert_eq!(self.entries[id.0].value.shape(), value.shape());
        self.entries[id.0].value = value;
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        (0..self.entries.len())
            .filter(|&i| self.entries[i].trainable)
            .map(ParamId)
            .collect()
    }

    /// Total number of trainable scalar parameters.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    /// Total stored elements including buffers.
    pub fn num_elements(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.name.clone()).collect()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }
}

impl<A: Elem> Graph<A> {
    /// Bind a parameter-store entry as a graph leaf.
    pub fn param(&mut self, ps: &ParamStore<A>, id: ParamId) -> Var {
        self.param_leaf(ps.value(id).clone(), id.0)
    }
}

/// Uniform init in `(-1/sqrt(fan_in), 1/sqrt(fan_in))`, sampled in f64 so
/// f32 and f64 instantiations share the same weights for a given seed.
pub fn init_uniform<A: Elem>(
    shape: &[usize],
    fan_in: usize,
    rng: &mut ChaCha12Rng,
) -> ArrayD<A> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<A> = (0..n)
        .map(|_| A::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

// ---------------------------------------------------------------------------
// Conv / linear / norm layers
// ---------------------------------------------------------------------------

pub struct Conv2d {
    pub w: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<A: Elem>(
        ps: &mut ParamStore<A>,
        prefix: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        groups: usize,
        bias: bool,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let fan_in = (in_c / groups) * k * k;
        let w = ps.add_param(
            format!("{prefix}.weight"),
            init_uniform(&[out_c, in_c / groups, k, k], fan_in, rng),
        );
        let bias = bias.then(|| {
            ps.add_param(
                format!("{prefix}.bias"),
                init_uniform(&[out_c], fan_in, rng),
            )
        });
        Conv2d { w, bias, stride, pad, groups }
    }

    pub fn fwd<A: Elem>(&self, g: &mut Graph<A>, ps: &ParamStore<A>, x: Var) -> Var {
        let w = g.param(ps, self.w);
        let mut y = g.conv2d(x, w, self.stride, self.pad, self.groups);
        if let Some(b) = self.bias {
            let b = g.param(ps, b);
            y = g.add_chan_bias(y, b);
        }
        y
    }
}

pub struct ConvTranspose2d {
    pub w: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<A: Elem>(
        ps: &mut ParamStore<A>,
        prefix: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let fan_in = in_c * k * k;
        let w = ps.add_param(
            format!("{prefix}.weight"),
            init_uniform(&[in_c, out_c, k, k], fan_in, rng),
        );
        ConvTranspose2d { w, stride, pad }
    }

    pub fn fwd<A: Elem>(&self, g: &mut Graph<A>, ps: &ParamStore<A>, x: Var) -> Var {
        let w = g.param(ps, self.w);
        g.conv_transpose2d(x, w, self.stride, self.pad)
    }
}

pub struct Linear {
    pub w: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<A: Elem>(
        ps: &mut ParamStore<A>,
        prefix: &str,
        in_f: usize,
        out_f: usize,
        bias: bool,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let w = ps.add_param(
            format!("{prefix}.weight"),
            init_uniform(&[in_f, out_f], in_f, rng),
        );
        let bias = bias.then(|| {
            ps.add_param(
                format!("{prefix}.bias"),
                init_uniform(&[out_f], in_f, rng),
            )
        });
        Linear { w, bias }
    }

    /// Like [`Linear::new`] with the bias initialized to zero (used for the
    /// final gaze projection).
    pub fn new_zero_bias<A: Elem>(
        ps: &mut ParamStore<A>,
        prefix: &str,
        in_f: usize,
        out_f: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let w = ps.add_param(
            format!("{prefix}.weight"),
            init_uniform(&[in_f, out_f], in_f, rng),
        );
        let bias = Some(ps.add_param(format!("{prefix}.bias"), ArrayD::zeros(IxDyn(&[out_f]))));
        Linear { w, bias }
    }

    /// `(M, in) -> (M, out)`
    pub fn fwd<A: Elem>(&self, g: &mut Graph<A>, ps: &ParamStore<A>, x: Var) -> Var {
        let w = g.param(ps, self.w);
        let mut y = g.matmul2(x, w);
        if let Some(b) = self.bias {
            let b = g.param(ps, b);
            y = g.add_bias2(y, b);
        }
        y
    }

    /// `(B, T, in) -> (B, T, out)` by flattening the leading axes.
    pub fn fwd3<A: Elem>(&self, g: &mut Graph<A>, ps: &ParamStore<A>, x: Var) -> Var {
        let s = g.shape(x).to_vec();
        let flat = g.reshape(x, &[s[0] * s[1], s[2]]);
        let y = self.fwd(g, ps, flat);
        let out_f = g.shape(y)[1];
        g.reshape(y, &[s[0], s[1], out_f])
    }
}

pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new<A: Elem>(ps: &mut ParamStore<A>, prefix: &str, c: usize) -> Self {
        BatchNorm2d {
            gamma: ps.add_param(format!("{prefix}.gamma"), ArrayD::ones(IxDyn(&[c]))),
            beta: ps.add_param(format!("{prefix}.beta"), ArrayD::zeros(IxDyn(&[c]))),
            running_mean: ps.add_buffer(format!("{prefix}.running_mean"), ArrayD::zeros(IxDyn(&[c]))),
            running_var: ps.add_buffer(format!("{prefix}.running_var"), ArrayD::ones(IxDyn(&[c]))),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn fwd<A: Elem>(&self, g: &mut Graph<A>, ps: &mut ParamStore<A>, x: Var) -> Var {
        if g.train {
            let gamma = g.param(ps, self.gamma);
            let beta = g.param(ps, self.beta);
            let (y, stats) = g.batch_norm_train(x, gamma, beta, self.eps);
            self.update_running(ps, &stats);
            y
        } else {
            let c = g.shape(x)[1];
            let eps = A::from_f64(self.eps);
            let mut scale = Vec::with_capacity(c);
            let mut shift = Vec::with_capacity(c);
            for ci in 0..c {
                let ga = ps.value(self.gamma)[IxDyn(&[ci])];
                let be = ps.value(self.beta)[IxDyn(&[ci])];
                let mu = ps.value(self.running_mean)[IxDyn(&[ci])];
                let va = ps.value(self.running_var)[IxDyn(&[ci])];
                let s = ga / (va + eps).sqrt();
                scale.push(s);
                shift.push(be - s * mu);
            }
            g.channel_affine(x, &scale, &shift)
        }
    }

    fn update_running<A: Elem>(&self, ps: &mut ParamStore<A>, stats: &BatchNormSaved<A>) {
        let m = A::from_f64(self.momentum);
        let one_m = A::one() - m;
        {
            let rm = ps.value_mut(self.running_mean);
            for (i, v) in rm.iter_mut().enumerate() {
                *v = one_m * *v + m * stats.mean[i];
            }
        }
        {
            let rv = ps.value_mut(self.running_var);
            for (i, v) in rv.iter_mut().enumerate() {
                *v = one_m * *v + m * stats.var_unbiased[i];
            }
        }
    }
}

/// Conv + BN + ReLU6, the basic block unit.
pub struct ConvBnAct {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub act: bool,
}

impl ConvBnAct {
    #[allow(clippy::too_many_arguments)]
    pub fn new<A: Elem>(
        ps: &mut ParamStore<A>,
        prefix: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        groups: usize,
        act: bool,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        ConvBnAct {
            conv: Conv2d::new(ps, &format!("{prefix}.conv"), in_c, out_c, k, stride, pad, groups, false, rng),
            bn: BatchNorm2d::new(ps, &format!("{prefix}.bn"), out_c),
            act,
        }
    }

    pub fn fwd<A: Elem>(&self, g: &mut Graph<A>, ps: &mut ParamStore<A>, x: Var) -> Var {
        let y = self.conv.fwd(g, ps, x);
        let y = self.bn.fwd(g, ps, y);
        if self.act {
            g.relu6(y)
        } else {
            y
        }
    }
}

/// MobileNetV2 inverted residual: 1x1 expand, 3x3 depthwise, 1x1 linear
/// projection, with a skip connection when shapes allow.
pub struct InvertedResidual {
    pub expand: Option<ConvBnAct>,
    pub dw: ConvBnAct,
    pub project: ConvBnAct,
    pub use_res: bool,
}

impl InvertedResidual {
    #[allow(clippy::too_many_arguments)]
    pub fn new<A: Elem>(
        ps: &mut ParamStore<A>,
        prefix: &str,
        in_c: usize,
        out_c: usize,
        expansion: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let hidden = in_c * expansion;
        let expand = (expansion != 1).then(|| {
            ConvBnAct::new(ps, &format!("{prefix}.expand"), in_c, hidden, 1, 1, 0, 1, true, rng)
        });
        let dw = ConvBnAct::new(
            ps,
            &format!("{prefix}.dw"),
            hidden,
            hidden,
            3,
            stride,
            pad,
            hidden,
            true,
            rng,
        );
        let project = ConvBnAct::new(
            ps,
            &format!("{prefix}.project"),
            hidden,
            out_c,
            1,
            1,
            0,
            1,
            false,
            rng,
        );
        InvertedResidual {
            expand,
            dw,
            project,
            use_res: stride == 1 && in_c == out_c,
        }
    }

    pub fn fwd<A: Elem>(&self, g: &mut Graph<A>, ps: &mut ParamStore<A>, x: Var) -> Var {
        let mut y = x;
        if let Some(e) = &self.expand {
            y = e.fwd(g, ps, y);
        }
        y = self.dw.fwd(g, ps, y);
        y = self.project.fwd(g, ps, y);
        if self.use_res {
            g.add(x, y)
        } else {
            y
        }
    }
}

/// Plain two-conv residual block (the 18-layer remote appearance encoder).
pub struct ResidualBlock {
    pub conv1: ConvBnAct,
    pub conv2: ConvBnAct,
    pub down: Option<ConvBnAct>,
}

impl ResidualBlock {
    pub fn new<A: Elem>(
        ps: &mut ParamStore<A>,
        prefix: &str,
        in_c: usize,
        out_c: usize,
        stride: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let conv1 = ConvBnAct::new(ps, &format!("{prefix}.conv1"), in_c, out_c, 3, stride, 1, 1, true, rng);
        let conv2 = ConvBnAct::new(ps, &format!("{prefix}.conv2"), out_c, out_c, 3, 1, 1, 1, false, rng);
        let down = (stride != 1 || in_c != out_c).then(|| {
            ConvBnAct::new(ps, &format!("{prefix}.down"), in_c, out_c, 1, stride, 0, 1, false, rng)
        });
        ResidualBlock { conv1, conv2, down }
    }

    pub fn fwd<A: Elem>(&self, g: &mut Graph<A>, ps: &mut ParamStore<A>, x: Var) -> Var {
        let y = self.conv1.fwd(g, ps, x);
        let y = self.conv2.fwd(g, ps, y);
        let skip = match &self.down {
            Some(d) => d.fwd(g, ps, x),
            None => x,
        };
        let s = g.add(y, skip);
        g.relu6(s)
    }
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

/// Multi-head self-attention over spatial tokens with a residual connection.
/// The output projection carries no bias so that zeroing the value path
/// makes the module an exact identity.
pub struct SelfAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl SelfAttention {
    pub fn new<A: Elem>(
        ps: &mut ParamStore<A>,
        prefix: &str,
        dim: usize,
        heads: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        assert!(dim % heads == 0, "attention dim {dim} not divisible by {heads} heads");
        SelfAttention {
            wq: Linear::new(ps, &format!("{prefix}.wq"), dim, dim, true, rng),
            wk: Linear::new(ps, &format!("{prefix}.wk"), dim, dim, true, rng),
            wv: Linear::new(ps, &format!("{prefix}.wv"), dim, dim, true, rng),
            wo: Linear::new(ps, &format!("{prefix}.wo"), dim, dim, false, rng),
            heads,
            dim,
        }
    }

    /// tokens `(B,T,C)` -> (tokens `(B,T,C)`, head-averaged attention `(B,T,T)`).
    pub fn fwd<A: Elem>(
        &self,
        g: &mut Graph<A>,
        ps: &ParamStore<A>,
        tokens: Var,
    ) -> (Var, Var) {
        let s = g.shape(tokens).to_vec();
        let (b, t, c) = (s[0], s[1], s[2]);
        let h = self.heads;
        let dh = c / h;
        let q = self.wq.fwd3(g, ps, tokens);
        let k = self.wk.fwd3(g, ps, tokens);
        let v = self.wv.fwd3(g, ps, tokens);
        let split = |g: &mut Graph<A>, x: Var| {
            let x = g.reshape(x, &[b, t, h, dh]);
            let x = g.permute(x, &[0, 2, 1, 3]);
            g.reshape(x, &[b * h, t, dh])
        };
        let q = split(g, q);
        let k = split(g, k);
        let v = split(g, v);
        let kt = g.permute(k, &[0, 2, 1]);
        let scores = g.bmm(q, kt);
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = g.softmax_last(scores); // (B*h, T, T)
        let ctx = g.bmm(attn, v); // (B*h, T, dh)
        let ctx = g.reshape(ctx, &[b, h, t, dh]);
        let ctx = g.permute(ctx, &[0, 2, 1, 3]);
        let ctx = g.reshape(ctx, &[b, t, c]);
        let out = self.wo.fwd3(g, ps, ctx);
        let out = g.add(tokens, out);
        // head average of the attention distribution
        let attn4 = g.reshape(attn, &[b, h, t, t]);
        let asum = g.sum_axis_keep(attn4, 1);
        let asum = g.reshape(asum, &[b, t, t]);
        let attn_avg = g.scale(asum, 1.0 / h as f64);
        (out, attn_avg)
    }
}

/// Cross-attention with a single global query projected from the gaze
/// embedding; keys/values come from the appearance tokens. Returns the
/// context vector and the head-averaged spatial attention distribution.
pub struct CrossAttention {
    pub q_proj: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl CrossAttention {
    pub fn new<A: Elem>(
        ps: &mut ParamStore<A>,
        prefix: &str,
        gaze_dim: usize,
        dim: usize,
        heads: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        assert!(dim % heads == 0);
        CrossAttention {
            q_proj: Linear::new(ps, &format!("{prefix}.q_proj"), gaze_dim, dim, true, rng),
            wk: Linear::new(ps, &format!("{prefix}.wk"), dim, dim, true, rng),
            wv: Linear::new(ps, &format!("{prefix}.wv"), dim, dim, true, rng),
            wo: Linear::new(ps, &format!("{prefix}.wo"), dim, dim, false, rng),
            heads,
        }
    }

    /// gaze `(B,Cg)`, tokens `(B,T,C)` -> (context `(B,C)`, attention `(B,T)`).
    pub fn fwd<A: Elem>(
        &self,
        g: &mut Graph<A>,
        ps: &ParamStore<A>,
        gaze: Var,
        tokens: Var,
    ) -> (Var, Var) {
        let s = g.shape(tokens).to_vec();
        let (b, t, c) = (s[0], s[1], s[2]);
        let h = self.heads;
        let dh = c / h;
        let q = self.q_proj.fwd(g, ps, gaze); // (B, C)
        let q = g.reshape(q, &[b, h, 1, dh]);
        let q = g.reshape(q, &[b * h, 1, dh]);
        let k = self.wk.fwd3(g, ps, tokens);
        let v = self.wv.fwd3(g, ps, tokens);
        let split = |g: &mut Graph<A>, x: Var| {
            let x = g.reshape(x, &[b, t, h, dh]);
            let x = g.permute(x, &[0, 2, 1, 3]);
            g.reshape(x, &[b * h, t, dh])
        };
        let k = split(g, k);
        let v = split(g, v);
        let kt = g.permute(k, &[0, 2, 1]);
        let scores = g.bmm(q, kt); // (B*h, 1, T)
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = g.softmax_last(scores);
        let ctx = g.bmm(attn, v); // (B*h, 1, dh)
        let ctx = g.reshape(ctx, &[b, h, dh]);
        let ctx = g.reshape(ctx, &[b, c]);
        let out = self.wo.fwd(g, ps, ctx); // (B, C)
        let attn3 = g.reshape(attn, &[b, h, t]);
        let asum = g.sum_axis_keep(attn3, 1);
        let asum = g.reshape(asum, &[b, t]);
        let attn_avg = g.scale(asum, 1.0 / h as f64);
        (out, attn_avg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::SeedableRng;

    #[test]
    fn param_store_counts_and_names() {
        let mut ps = ParamStore::<f32>::new();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let lin = Linear::new(&mut ps, "head", 12, 2, true, &mut rng);
        assert_eq!(ps.num_trainable(), 12 * 2 + 2);
        assert_eq!(ps.name(lin.w), "head.weight");
        assert!(ps.find("head.bias").is_some());
        let _bn = BatchNorm2d::new(&mut ps, "bn", 4);
        // gamma+beta trainable, running stats buffers excluded
        assert_eq!(ps.num_trainable(), 26 + 8);
        assert_eq!(ps.num_elements(), 26 + 16);
    }

    #[test]
    fn inverted_residual_shapes_and_skip() {
        let mut ps = ParamStore::<f32>::new();
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let blk = InvertedResidual::new(&mut ps, "b", 8, 8, 4, 1, 1, &mut rng);
        assert!(blk.use_res);
        let mut g = Graph::<f32>::train();
        let x = g.constant(ArrayD::from_elem(IxDyn(&[2, 8, 6, 6]), 0.3));
        let y = blk.fwd(&mut g, &mut ps, x);
        assert_eq!(g.shape(y), &[2, 8, 6, 6]);
        let blk2 = InvertedResidual::new(&mut ps, "b2", 8, 12, 4, 2, 1, &mut rng);
        assert!(!blk2.use_res);
        let y2 = blk2.fwd(&mut g, &mut ps, x);
        assert_eq!(g.shape(y2), &[2, 12, 3, 3]);
    }

    #[test]
    fn batchnorm_eval_uses_running_stats() {
        let mut ps = ParamStore::<f64>::new();
        let bn = BatchNorm2d::new(&mut ps, "bn", 2);
        // train once on biased data to move the running stats
        let mut g = Graph::<f64>::train();
        let x = g.constant(ArrayD::from_elem(IxDyn(&[4, 2, 3, 3]), 5.0));
        let _ = bn.fwd(&mut g, &mut ps, x);
        let rm = ps.value(bn.running_mean)[IxDyn(&[0])];
        assert!((rm - 0.5).abs() < 1e-12, "running mean 0.9*0 + 0.1*5");
        // eval mode must not touch buffers
        let mut ge = Graph::<f64>::new();
        let xe = ge.constant(ArrayD::from_elem(IxDyn(&[1, 2, 3, 3]), 1.0));
        let _ = bn.fwd(&mut ge, &mut ps, xe);
        assert!((ps.value(bn.running_mean)[IxDyn(&[0])] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn self_attention_is_residual_identity_with_zero_values() {
        let mut ps = ParamStore::<f64>::new();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let sa = SelfAttention::new(&mut ps, "sa", 6, 2, &mut rng);
        // zero the value path
        ps.set(sa.wv.w, ArrayD::zeros(IxDyn(&[6, 6])));
        ps.set(sa.wv.bias.unwrap(), ArrayD::zeros(IxDyn(&[6])));
        let x0 = ArrayD::from_shape_fn(IxDyn(&[2, 4, 6]), |ix| {
            (ix[0] as f64) + 0.1 * (ix[1] as f64) - 0.2 * (ix[2] as f64)
        });
        let mut g = Graph::<f64>::new();
        let x = g.constant(x0.clone());
        let (y, attn) = sa.fwd(&mut g, &ps, x);
        assert_eq!(g.val(y), &x0);
        // attention rows still normalized
        let a = g.val(attn);
        for bi in 0..2 {
            for ti in 0..4 {
                let s: f64 = (0..4).map(|tj| a[[bi, ti, tj]]).sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn cross_attention_weights_normalized() {
        let mut ps = ParamStore::<f64>::new();
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let ca = CrossAttention::new(&mut ps, "ca", 3, 8, 2, &mut rng);
        let mut g = Graph::<f64>::new();
        let gaze = g.constant(ArrayD::from_shape_fn(IxDyn(&[2, 3]), |ix| ix[1] as f64 * 0.5));
        let tokens = g.constant(ArrayD::from_shape_fn(IxDyn(&[2, 5, 8]), |ix| {
            0.3 * (ix[1] as f64) - 0.1 * (ix[2] as f64)
        }));
        let (ctx, attn) = ca.fwd(&mut g, &ps, gaze, tokens);
        assert_eq!(g.shape(ctx), &[2, 8]);
        assert_eq!(g.shape(attn), &[2, 5]);
        let a = g.val(attn);
        for bi in 0..2 {
            let s: f64 = (0..5).map(|t| a[[bi, t]]).sum();
            assert!((s - 1.0).abs() < 1e-9);
            for t in 0..5 {
                assert!(a[[bi, t]] >= 0.0);
            }
        }
    }
}

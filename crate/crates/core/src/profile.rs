//! Analytic parameter and MAC/FLOP accounting, computed from layer shapes.
//!
//! Conventions: a multiply-accumulate is one MAC; biases and batch-norm
//! affine ops contribute parameters but no MACs; FLOPs are reported both as
//! `MACs` and `2 x MACs` since the literature uses either convention.
//! Trainable parameters exclude batch-norm running statistics, which are
//! tracked separately as buffer elements (they do ship in checkpoints).

use crate::model::{
    AppEncoderSpec, AttentionSpec, DecoderSpec, GazeEncoderSpec, GazeHead, ModelConfig,
};
use crate::tensor::{conv2d_shape, conv_transpose2d_shape};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("unsupported decoder kernel {0} (supported: 2 and 4)")]
    UnsupportedKernel(usize),
}

#[derive(Debug, Clone, Serialize)]
pub struct LayerCost {
    pub name: String,
    pub params: u64,
    pub buffer_elems: u64,
    pub macs: u64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Profile {
    pub layers: Vec<LayerCost>,
}

impl Profile {
    pub fn params(&self) -> u64 {
        self.layers.iter().map(|l| l.params).sum()
    }

    pub fn buffer_elems(&self) -> u64 {
        self.layers.iter().map(|l| l.buffer_elems).sum()
    }

    /// Total stored elements (parameters plus buffers), the checkpoint size.
    pub fn stored_elements(&self) -> u64 {
        self.params() + self.buffer_elems()
    }

    pub fn macs(&self) -> u64 {
        self.layers.iter().map(|l| l.macs).sum()
    }

    pub fn flops_two_per_mac(&self) -> u64 {
        2 * self.macs()
    }

    fn push(&mut self, name: impl Into<String>, params: u64, buffer_elems: u64, macs: u64) {
        self.layers.push(LayerCost {
            name: name.into(),
            params,
            buffer_elems,
            macs,
        });
    }

    pub fn to_table(&self) -> String {
        let mut s = String::from("layer                                    params      MACs\n");
        for l in &self.layers {
            s.push_str(&format!("{:<40} {:>9} {:>11}\n", l.name, l.params, l.macs));
        }
        s.push_str(&format!(
            "total: {} params ({} stored elems), {} MACs, {} FLOPs at 2/MAC\n",
            self.params(),
            self.stored_elements(),
            self.macs(),
            self.flops_two_per_mac()
        ));
        s
    }
}

pub fn linear_cost(in_f: usize, out_f: usize, bias: bool) -> (u64, u64) {
    let params = (in_f * out_f + if bias { out_f } else { 0 }) as u64;
    let macs = (in_f * out_f) as u64;
    (params, macs)
}

fn conv_cost(
    p: &mut Profile,
    name: &str,
    in_c: usize,
    out_c: usize,
    k: usize,
    groups: usize,
    bias: bool,
    out_hw: (usize, usize),
    bn: bool,
) {
    let w = out_c * (in_c / groups) * k * k;
    let params = w + if bias { out_c } else { 0 } + if bn { 2 * out_c } else { 0 };
    let buffers = if bn { 2 * out_c } else { 0 };
    let macs = w * out_hw.0 * out_hw.1;
    p.push(name, params as u64, buffers as u64, macs as u64);
}

fn bottleneck_cost(
    p: &mut Profile,
    name: &str,
    in_c: usize,
    out_c: usize,
    expansion: usize,
    stride: usize,
    pad: usize,
    in_hw: (usize, usize),
) -> (usize, usize) {
    let hidden = in_c * expansion;
    let out_hw = (
        conv2d_shape(in_hw.0, 3, stride, pad),
        conv2d_shape(in_hw.1, 3, stride, pad),
    );
    if expansion != 1 {
        conv_cost(p, &format!("{name}.expand"), in_c, hidden, 1, 1, false, in_hw, true);
    }
    conv_cost(p, &format!("{name}.dw"), hidden, hidden, 3, hidden, false, out_hw, true);
    conv_cost(p, &format!("{name}.project"), hidden, out_c, 1, 1, false, out_hw, true);
    out_hw
}

/// Cost of a gaze encoder, the component deployed at inference time.
pub fn profile_gaze_encoder(
    spec: &GazeEncoderSpec,
    c_g: usize,
    input_hw: (usize, usize),
) -> Profile {
    let mut p = Profile::default();
    let mut in_c = 1usize;
    let mut hw = input_hw;
    if let Some((c, s)) = spec.stem {
        let out_hw = (
            conv2d_shape(hw.0, 3, s, spec.pad),
            conv2d_shape(hw.1, 3, s, spec.pad),
        );
        conv_cost(&mut p, "stem", in_c, c, 3, 1, false, out_hw, true);
        in_c = c;
        hw = out_hw;
    }
    for (si, st) in spec.stages.iter().enumerate() {
        for r in 0..st.repeats {
            let stride = if r == 0 { st.stride } else { 1 };
            hw = bottleneck_cost(
                &mut p,
                &format!("stage{si}.block{r}"),
                in_c,
                st.out_c,
                st.expansion,
                stride,
                spec.pad,
                hw,
            );
            in_c = st.out_c;
        }
    }
    match spec.head {
        GazeHead::PoolLinear => {
            let (params, macs) = linear_cost(in_c, c_g, true);
            p.push("head", params, 0, macs);
        }
        GazeHead::FlattenMlp { hidden } => {
            let flat = in_c * hw.0 * hw.1;
            let (p1, m1) = linear_cost(flat, hidden, true);
            p.push("head_fc1", p1, 0, m1);
            let (p2, m2) = linear_cost(hidden, c_g, true);
            p.push("head_fc2", p2, 0, m2);
        }
    }
    p
}

fn profile_app_encoder(spec: &AppEncoderSpec, c_a: usize, input_hw: (usize, usize)) -> Profile {
    let mut p = Profile::default();
    match spec {
        AppEncoderSpec::Mobile { stem_c, stages, pad, pool_to } => {
            let mut hw = (
                conv2d_shape(input_hw.0, 3, 2, *pad),
                conv2d_shape(input_hw.1, 3, 2, *pad),
            );
            conv_cost(&mut p, "app.stem", 1, *stem_c, 3, 1, false, hw, true);
            let mut in_c = *stem_c;
            for (si, st) in stages.iter().enumerate() {
                for r in 0..st.repeats {
                    let stride = if r == 0 { st.stride } else { 1 };
                    hw = bottleneck_cost(
                        &mut p,
                        &format!("app.stage{si}.block{r}"),
                        in_c,
                        st.out_c,
                        st.expansion,
                        stride,
                        *pad,
                        hw,
                    );
                    in_c = st.out_c;
                }
            }
            conv_cost(&mut p, "app.final", in_c, c_a, 3, 1, false, hw, true);
            let _ = pool_to;
        }
        AppEncoderSpec::Residual { stem_c, stages } => {
            let mut hw = input_hw;
            conv_cost(&mut p, "app.stem", 1, *stem_c, 3, 1, false, hw, true);
            let mut in_c = *stem_c;
            for (si, (out_c, stride, n)) in stages.iter().enumerate() {
                for r in 0..*n {
                    let s = if r == 0 { *stride } else { 1 };
                    let out_hw = (conv2d_shape(hw.0, 3, s, 1), conv2d_shape(hw.1, 3, s, 1));
                    conv_cost(&mut p, &format!("app.stage{si}.b{r}.conv1"), in_c, *out_c, 3, 1, false, out_hw, true);
                    conv_cost(&mut p, &format!("app.stage{si}.b{r}.conv2"), *out_c, *out_c, 3, 1, false, out_hw, true);
                    if s != 1 || in_c != *out_c {
                        conv_cost(&mut p, &format!("app.stage{si}.b{r}.down"), in_c, *out_c, 1, 1, false, out_hw, true);
                    }
                    in_c = *out_c;
                    hw = out_hw;
                }
            }
            conv_cost(&mut p, "app.final", in_c, c_a, 1, 1, false, hw, true);
        }
    }
    p
}

fn profile_attention(spec: &AttentionSpec, c_g: usize, c_a: usize, tokens: usize) -> Profile {
    let mut p = Profile::default();
    let c = c_a;
    let t = tokens;
    for i in 0..spec.self_layers {
        let (pq, mq) = linear_cost(c, c, true);
        let (po, mo) = linear_cost(c, c, false);
        let proj_params = 3 * pq + po;
        let proj_macs = (3 * mq + mo) * t as u64;
        // score and value aggregation: 2 * T^2 * C per layer across heads
        let attn_macs = 2 * (t * t * c) as u64;
        p.push(format!("fuse.self{i}"), proj_params, 0, proj_macs + attn_macs);
    }
    let (pq, mq) = linear_cost(c_g, c, true);
    let (pk, mk) = linear_cost(c, c, true);
    let (po, mo) = linear_cost(c, c, false);
    let cross_params = pq + 2 * pk + po;
    let cross_macs = mq + 2 * mk * t as u64 + 2 * (t * c) as u64 + mo;
    p.push("fuse.cross", cross_params, 0, cross_macs);
    p
}

fn profile_decoder(
    spec: &DecoderSpec,
    c_in: usize,
    grid: (usize, usize),
) -> Result<Profile, ProfileError> {
    let mut p = Profile::default();
    match spec {
        DecoderSpec::Deconv { blocks, final_resize } => {
            let mut in_c = c_in;
            let mut hw = grid;
            for (i, b) in blocks.iter().enumerate() {
                if b.k != 2 && b.k != 4 {
                    return Err(ProfileError::UnsupportedKernel(b.k));
                }
                let pad = (b.k - 2) / 2;
                // transposed conv: weights fire once per input position
                let w = in_c * b.out_c * b.k * b.k;
                let macs = w * hw.0 * hw.1;
                p.push(
                    format!("decoder.up{i}"),
                    (w + 2 * b.out_c) as u64,
                    (2 * b.out_c) as u64,
                    macs as u64,
                );
                hw = (
                    conv_transpose2d_shape(hw.0, b.k, 2, pad),
                    conv_transpose2d_shape(hw.1, b.k, 2, pad),
                );
                in_c = b.out_c;
            }
            if let Some(r) = final_resize {
                hw = *r;
            }
            conv_cost(&mut p, "decoder.out", in_c, 1, 3, 1, true, hw, false);
        }
        DecoderSpec::Dense { stages, growth } => {
            let mut in_c = c_in;
            let mut hw = grid;
            for (i, out_c) in stages.iter().enumerate() {
                hw = (hw.0 * 2, hw.1 * 2);
                conv_cost(&mut p, &format!("decoder.d{i}.c1"), in_c, *growth, 3, 1, false, hw, true);
                conv_cost(&mut p, &format!("decoder.d{i}.c2"), in_c + growth, *growth, 3, 1, false, hw, true);
                conv_cost(&mut p, &format!("decoder.d{i}.t"), in_c + 2 * growth, *out_c, 1, 1, false, hw, true);
                in_c = *out_c;
            }
            conv_cost(&mut p, "decoder.out", in_c, 1, 3, 1, true, hw, false);
        }
    }
    Ok(p)
}

/// Full model cost: gaze encoder, appearance encoder, attention fusion, and
/// decoder.
pub fn profile_model(cfg: &ModelConfig) -> Result<Profile, ProfileError> {
    let mut p = Profile::default();
    let input_hw = (cfg.input_height, cfg.input_width);
    for l in profile_gaze_encoder(&cfg.gaze, cfg.c_g, input_hw).layers {
        p.push(format!("gaze_enc.{}", l.name), l.params, l.buffer_elems, l.macs);
    }
    for l in profile_app_encoder(&cfg.app, cfg.c_a, input_hw).layers {
        p.layers.push(l);
    }
    let grid = cfg.appearance_grid();
    for l in profile_attention(&cfg.attn, cfg.c_g, cfg.c_a, grid.0 * grid.1).layers {
        p.layers.push(l);
    }
    for l in profile_decoder(&cfg.decoder, cfg.c_a, grid)?.layers {
        p.layers.push(l);
    }
    Ok(p)
}

/// True when `value` is within `tol` (fractional) of `target` under at
/// least one FLOP convention (1 or 2 FLOPs per MAC).
pub fn flops_within(macs: u64, target_flops: f64, tol: f64) -> bool {
    let as_macs = macs as f64;
    let as_2macs = 2.0 * as_macs;
    (as_macs - target_flops).abs() <= tol * target_flops
        || (as_2macs - target_flops).abs() <= tol * target_flops
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn linear_layer_hand_count() {
        let (params, macs) = linear_cost(12, 2, true);
        assert_eq!(params, 26);
        assert_eq!(macs, 24);
    }

    #[test]
    fn vr_gaze_encoder_matches_published_budget() {
        let cfg = ModelConfig::vr();
        let p = profile_gaze_encoder(&cfg.gaze, cfg.c_g, (400, 400));
        let params = p.params() as f64;
        assert!(
            (params - 342_000.0).abs() <= 0.05 * 342_000.0,
            "vr gaze encoder params {params} outside 342K +/- 5%"
        );
        assert!(
            flops_within(p.macs(), 55e6, 0.15),
            "vr gaze encoder MACs {} outside 55 MFLOPs +/- 15% under both conventions",
            p.macs()
        );
    }

    #[test]
    fn remote_gaze_encoder_matches_published_budget() {
        let cfg = ModelConfig::remote();
        let p = profile_gaze_encoder(&cfg.gaze, cfg.c_g, (cfg.input_height, cfg.input_width));
        let params = p.params() as f64;
        assert!(
            (params - 1e6).abs() <= 0.15 * 1e6,
            "remote gaze encoder params {params} outside 1M +/- 15%"
        );
        assert!(
            flops_within(p.macs(), 2e6, 0.15),
            "remote gaze encoder MACs {} outside 2 MFLOPs +/- 15%",
            p.macs()
        );
    }

    #[test]
    fn profile_matches_instantiated_parameter_store() {
        for cfg in [ModelConfig::synth(96, 96), ModelConfig::synth(64, 64)] {
            let p = profile_model(&cfg).unwrap();
            let m = crate::model::GazeShiftModel::<f32>::new(cfg, 1);
            assert_eq!(
                p.params(),
                m.ps.num_trainable() as u64,
                "trainable parameter traversal"
            );
            assert_eq!(
                p.stored_elements(),
                m.ps.num_elements() as u64,
                "stored elements including buffers"
            );
        }
    }

    #[test]
    fn remote_full_model_profile_matches_store() {
        let cfg = ModelConfig::remote();
        let p = profile_model(&cfg).unwrap();
        let m = crate::model::GazeShiftModel::<f32>::new(cfg, 1);
        assert_eq!(p.params(), m.ps.num_trainable() as u64);
        assert_eq!(p.stored_elements(), m.ps.num_elements() as u64);
    }

    #[test]
    fn unsupported_kernel_is_named() {
        let mut cfg = ModelConfig::synth(96, 96);
        if let DecoderSpec::Deconv { blocks, .. } = &mut cfg.decoder {
            blocks[0].k = 5;
        }
        let err = profile_model(&cfg).unwrap_err();
        assert!(err.to_string().contains('5'), "{err}");
    }
}

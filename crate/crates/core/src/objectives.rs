//! Reconstruction losses: per-pixel MSE and the attention-weighted
//! gaze-focused loss
//! `L = sum_i w_i^gamma (x_i - xhat_i)^2 / sum_i w_i^gamma`,
//! where `w` is the attention map upsampled to image resolution. Gamma is
//! applied after upsampling; normalization makes the loss invariant to any
//! positive rescaling of the raw attention map.

use crate::tensor::{Elem, Graph, ResizeMode, Var};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    GazeFocused,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    pub gamma: f64,
    /// Treat the weights as constants when differentiating (default). When
    /// false, gradients also flow into the attention path.
    pub weight_stop_gradient: bool,
    pub upsample: ResizeMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kind: LossKind::GazeFocused,
            gamma: 1.0,
            weight_stop_gradient: true,
            upsample: ResizeMode::Bilinear,
        }
    }
}

impl LossConfig {
    pub fn mse() -> Self {
        LossConfig {
            kind: LossKind::Mse,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.gamma > 0.0) {
            return Err(LossError::BadGamma(self.gamma));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum LossError {
    #[error("shape mismatch: target {target:?} vs recon {recon:?}")]
    ShapeMismatch {
        target: Vec<usize>,
        recon: Vec<usize>,
    },
    #[error("attention map must be nonnegative with a positive sum")]
    DegenerateAttention,
    #[error("gamma must be positive, got {0}")]
    BadGamma(f64),
    #[error("gaze-focused loss requires an attention map")]
    MissingAttention,
}

/// Plain per-pixel mean squared error between two images.
pub fn mse_loss(target: &Array2<f64>, recon: &Array2<f64>) -> Result<f64, LossError> {
    if target.dim() != recon.dim() {
        return Err(LossError::ShapeMismatch {
            target: target.shape().to_vec(),
            recon: recon.shape().to_vec(),
        });
    }
    let n = target.len() as f64;
    let mut s = 0.0;
    for (t, r) in target.iter().zip(recon.iter()) {
        let e = t - r;
        s += e * e;
    }
    Ok(s / n)
}

/// Gaze-focused loss for a single image. `attn` lives on the encoder grid
/// and is upsampled (per `config.upsample`) to the image resolution.
pub fn gaze_focused_loss(
    target: &Array2<f64>,
    recon: &Array2<f64>,
    attn: &Array2<f64>,
    config: &LossConfig,
) -> Result<f64, LossError> {
    config.validate()?;
    if target.dim() != recon.dim() {
        return Err(LossError::ShapeMismatch {
            target: target.shape().to_vec(),
            recon: recon.shape().to_vec(),
        });
    }
    if attn.iter().any(|&v| v < 0.0) || !attn.iter().any(|&v| v > 0.0) {
        return Err(LossError::DegenerateAttention);
    }
    let (h, w) = target.dim();
    let (gh, gw) = attn.dim();
    let mut g = Graph::<f64>::new();
    let t = g.constant(
        target
            .clone()
            .into_shape_with_order((1, h * w))
            .unwrap()
            .into_dyn(),
    );
    let r = g.constant(
        recon
            .clone()
            .into_shape_with_order((1, h * w))
            .unwrap()
            .into_dyn(),
    );
    let a = g.constant(
        attn.clone()
            .into_shape_with_order((1, 1, gh, gw))
            .unwrap()
            .into_dyn(),
    );
    let loss = gaze_focused_on_graph(&mut g, r, t, a, (h, w), config);
    Ok(g.val(loss)[ndarray::IxDyn(&[])])
}

/// Graph version over a batch. `recon`/`target`: `(B,1,H,W)`; `attn_grid`:
/// `(B,1,gh,gw)` raw nonnegative weights.
pub fn gaze_focused_on_graph<A: Elem>(
    g: &mut Graph<A>,
    recon: Var,
    target: Var,
    attn_grid: Var,
    image_hw: (usize, usize),
    config: &LossConfig,
) -> Var {
    let b = g.shape(recon)[0];
    let p = image_hw.0 * image_hw.1;
    let mut w = attn_grid;
    if config.weight_stop_gradient {
        w = g.detach(w);
    }
    let up = g.resize2d(w, image_hw.0, image_hw.1, config.upsample);
    let powed = if config.gamma == 1.0 {
        up
    } else {
        g.pow_scalar(up, config.gamma)
    };
    let wflat = g.reshape(powed, &[b, p]);
    let rflat = g.reshape(recon, &[b, p]);
    let tflat = g.reshape(target, &[b, p]);
    g.weighted_mse_norm(rflat, tflat, wflat)
}

/// Dispatch on the configured loss kind. `attn` is `((B,T) weights, grid)`.
pub fn loss_on_graph<A: Elem>(
    g: &mut Graph<A>,
    config: &LossConfig,
    recon: Var,
    target: Var,
    attn: Option<(Var, (usize, usize))>,
) -> Result<Var, LossError> {
    config.validate()?;
    match config.kind {
        LossKind::Mse => Ok(g.mse(recon, target)),
        LossKind::GazeFocused => {
            let (attn, (gh, gw)) = attn.ok_or(LossError::MissingAttention)?;
            let b = g.shape(attn)[0];
            let s = g.shape(recon).to_vec();
            let grid = g.reshape(attn, &[b, 1, gh, gw]);
            Ok(gaze_focused_on_graph(
                g,
                recon,
                target,
                grid,
                (s[2], s[3]),
                config,
            ))
        }
    }
}

/// `w^gamma / sum(w^gamma)` over a flat weight slice.
pub fn normalized_weights(raw: &[f64], gamma: f64) -> Vec<f64> {
    let powed: Vec<f64> = raw.iter().map(|&v| v.powf(gamma)).collect();
    let s: f64 = powed.iter().sum();
    powed.iter().map(|&v| v / s).collect()
}

/// Shannon entropy (nats) of a normalized weight vector.
pub fn entropy(weights: &[f64]) -> f64 {
    weights
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| -v * v.ln())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn mse_trivial_cases() {
        let t = Array2::<f64>::ones((3, 3));
        assert_eq!(mse_loss(&t, &t).unwrap(), 0.0);
        let z = Array2::<f64>::zeros((3, 3));
        assert_eq!(mse_loss(&t, &z).unwrap(), 1.0);
        let bad = Array2::<f64>::zeros((2, 3));
        assert!(matches!(
            mse_loss(&t, &bad),
            Err(LossError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn mse_matches_elementwise_brute_force() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let t = Array2::<f64>::from_shape_fn((3, 3), |_| rng.gen_range(-1.0..1.0));
        let r = Array2::<f64>::from_shape_fn((3, 3), |_| rng.gen_range(-1.0..1.0));
        let mut want = 0.0;
        for y in 0..3 {
            for x in 0..3 {
                want += (t[[y, x]] - r[[y, x]]).powi(2);
            }
        }
        want /= 9.0;
        assert!((mse_loss(&t, &r).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn uniform_weights_gamma_one_reduces_to_mse() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let t = Array2::<f64>::from_shape_fn((8, 8), |_| rng.gen_range(-1.0..1.0));
        let r = Array2::<f64>::from_shape_fn((8, 8), |_| rng.gen_range(-1.0..1.0));
        let attn = Array2::<f64>::from_elem((4, 4), 0.0625);
        let cfg = LossConfig::default();
        let focused = gaze_focused_loss(&t, &r, &attn, &cfg).unwrap();
        let plain = mse_loss(&t, &r).unwrap();
        assert!(
            (focused - plain).abs() <= 1e-15 * plain.abs().max(1.0),
            "machine-precision reduction: {focused} vs {plain}"
        );
    }

    #[test]
    fn perfect_reconstruction_is_zero_for_any_gamma() {
        let t = Array2::<f64>::from_shape_fn((5, 5), |(y, x)| (y * 5 + x) as f64 / 25.0);
        let attn = Array2::<f64>::from_shape_fn((3, 3), |(y, x)| 0.1 + (y + x) as f64);
        for gamma in [0.5, 1.0, 2.0, 4.0] {
            let cfg = LossConfig { gamma, ..Default::default() };
            assert_eq!(gaze_focused_loss(&t, &t, &attn, &cfg).unwrap(), 0.0);
        }
    }

    #[test]
    fn hand_computed_nearest_upsample_case() {
        // 2x2 target/recon, 1x1 attn=1 (nearest): L = (0+1+0+1)/4 = 0.5
        let t = array![[0.0, 0.0], [1.0, 1.0]];
        let r = array![[0.0, 1.0], [1.0, 0.0]];
        let attn = Array2::<f64>::from_elem((1, 1), 1.0);
        let cfg = LossConfig {
            upsample: ResizeMode::Nearest,
            ..Default::default()
        };
        let got = gaze_focused_loss(&t, &r, &attn, &cfg).unwrap();
        assert!((got - 0.5).abs() < 1e-12, "got {got}");
    }

    #[test]
    fn hand_computed_two_pixel_gamma_two_cases() {
        // w=(0.8,0.2), gamma=2 -> w^2=(0.64,0.04)
        let attn = array![[0.8, 0.2]];
        let cfg = LossConfig { gamma: 2.0, ..Default::default() };
        // errors (1,1): L = (0.64+0.04)/0.68 = 1
        let t = array![[0.0, 0.0]];
        let r = array![[1.0, 1.0]];
        let got = gaze_focused_loss(&t, &r, &attn, &cfg).unwrap();
        assert!((got - 1.0).abs() < 1e-4, "got {got}");
        // errors (1,0): L = 0.64/0.68 = 0.9412
        let r2 = array![[1.0, 0.0]];
        let got2 = gaze_focused_loss(&t, &r2, &attn, &cfg).unwrap();
        assert!((got2 - 0.9412).abs() < 1e-4, "got {got2}");
    }

    #[test]
    fn degenerate_attention_is_rejected() {
        let t = Array2::<f64>::zeros((2, 2));
        let zero = Array2::<f64>::zeros((1, 1));
        assert!(matches!(
            gaze_focused_loss(&t, &t, &zero, &LossConfig::default()),
            Err(LossError::DegenerateAttention)
        ));
        let neg = Array2::<f64>::from_elem((1, 1), -0.5);
        assert!(gaze_focused_loss(&t, &t, &neg, &LossConfig::default()).is_err());
        let cfg = LossConfig { gamma: 0.0, ..Default::default() };
        let ok = Array2::<f64>::from_elem((1, 1), 1.0);
        assert!(matches!(
            gaze_focused_loss(&t, &t, &ok, &cfg),
            Err(LossError::BadGamma(_))
        ));
    }

    #[test]
    fn scale_invariance_of_raw_weights() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let t = Array2::<f64>::from_shape_fn((6, 6), |_| rng.gen_range(-1.0..1.0));
        let r = Array2::<f64>::from_shape_fn((6, 6), |_| rng.gen_range(-1.0..1.0));
        let attn = Array2::<f64>::from_shape_fn((3, 3), |_| rng.gen_range(0.1..1.0));
        for gamma in [0.5, 1.0, 2.0] {
            let cfg = LossConfig { gamma, ..Default::default() };
            let base = gaze_focused_loss(&t, &r, &attn, &cfg).unwrap();
            for k in [0.01, 3.7, 250.0] {
                let scaled = attn.mapv(|v| v * k);
                let got = gaze_focused_loss(&t, &r, &scaled, &cfg).unwrap();
                assert!(
                    (got - base).abs() < 1e-10 * base.max(1.0),
                    "gamma {gamma} scale {k}: {got} vs {base}"
                );
            }
        }
    }

    #[test]
    fn nonnegative_and_zero_only_on_support_match() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        for _ in 0..20 {
            let t = Array2::<f64>::from_shape_fn((4, 4), |_| rng.gen_range(-1.0..1.0));
            let r = Array2::<f64>::from_shape_fn((4, 4), |_| rng.gen_range(-1.0..1.0));
            let attn = Array2::<f64>::from_shape_fn((2, 2), |_| rng.gen_range(0.01..1.0));
            let got = gaze_focused_loss(&t, &r, &attn, &LossConfig::default()).unwrap();
            assert!(got >= 0.0);
        }
    }

    #[test]
    fn gradient_matches_formula_and_finite_differences() {
        // with frozen weights, dL/dxhat_i = 2 * wtilde_i * (xhat_i - x_i)
        use crate::tensor::testutil::{max_rel_err, numeric_grad};
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for trial in 0..20 {
            let t = Array2::<f64>::from_shape_fn((8, 8), |_| rng.gen_range(-1.0..1.0));
            let r0 = Array2::<f64>::from_shape_fn((8, 8), |_| rng.gen_range(-1.0..1.0));
            let attn = Array2::<f64>::from_shape_fn((4, 4), |_| rng.gen_range(0.05..1.0));
            let gamma = [0.5, 1.0, 2.0, 4.0][trial % 4];
            let cfg = LossConfig { gamma, ..Default::default() };
            // analytic via autodiff
            let mut g = Graph::<f64>::new();
            let tv = g.constant(t.clone().into_shape_with_order((1, 64)).unwrap().into_dyn());
            let rv = g.leaf_grad(r0.clone().into_shape_with_order((1, 64)).unwrap().into_dyn());
            let av = g.constant(attn.clone().into_shape_with_order((1, 1, 4, 4)).unwrap().into_dyn());
            let loss = gaze_focused_on_graph(&mut g, rv, tv, av, (8, 8), &cfg);
            let grads = g.backward(loss);
            let analytic: Vec<f64> = grads.get(rv).unwrap().iter().copied().collect();
            // closed form
            let mut gup = Graph::<f64>::new();
            let araw = gup.constant(attn.clone().into_shape_with_order((1, 1, 4, 4)).unwrap().into_dyn());
            let up = gup.resize2d(araw, 8, 8, cfg.upsample);
            let wup: Vec<f64> = gup.val(up).iter().copied().collect();
            let wnorm = normalized_weights(&wup, gamma);
            let formula: Vec<f64> = r0
                .iter()
                .zip(t.iter())
                .zip(&wnorm)
                .map(|((r, t), w)| 2.0 * w * (r - t))
                .collect();
            assert!(
                max_rel_err(&analytic, &formula) < 1e-12,
                "autodiff equals the closed form"
            );
            // finite differences
            let flat: Vec<f64> = r0.iter().copied().collect();
            let numeric = numeric_grad(
                |v| {
                    let arr = Array2::from_shape_vec((8, 8), v.to_vec()).unwrap();
                    gaze_focused_loss(&t, &arr, &attn, &cfg).unwrap()
                },
                &flat,
                1e-5,
            );
            let err = max_rel_err(&analytic, &numeric);
            assert!(err < 1e-6, "trial {trial}: fd rel err {err}");
        }
    }

    #[test]
    fn sharpening_entropy_non_increasing_in_gamma() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        for _ in 0..10 {
            let raw: Vec<f64> = (0..36).map(|_| rng.gen_range(0.01..1.0)).collect();
            let mut last = f64::INFINITY;
            for gamma in [0.5, 1.0, 2.0, 4.0] {
                let h = entropy(&normalized_weights(&raw, gamma));
                assert!(
                    h <= last + 1e-12,
                    "entropy not non-increasing: {h} after {last} at gamma {gamma}"
                );
                last = h;
            }
        }
    }

    #[test]
    fn stop_gradient_controls_attention_path() {
        let t = Array2::<f64>::zeros((4, 4));
        let r = Array2::<f64>::from_elem((4, 4), 0.5);
        let attn0 = Array2::<f64>::from_shape_fn((2, 2), |(y, x)| 0.2 + 0.2 * (y + x) as f64);
        for stop in [true, false] {
            let cfg = LossConfig {
                weight_stop_gradient: stop,
                ..Default::default()
            };
            let mut g = Graph::<f64>::new();
            let tv = g.constant(t.clone().into_shape_with_order((1, 16)).unwrap().into_dyn());
            let rv = g.constant(r.clone().into_shape_with_order((1, 16)).unwrap().into_dyn());
            let av = g.leaf_grad(attn0.clone().into_shape_with_order((1, 1, 2, 2)).unwrap().into_dyn());
            let loss = gaze_focused_on_graph(&mut g, rv, tv, av, (4, 4), &cfg);
            let grads = g.backward(loss);
            let attn_grad = grads.get(av);
            if stop {
                assert!(attn_grad.is_none(), "frozen weights get no gradient");
            } else {
                assert!(attn_grad.is_some(), "weights get gradients when enabled");
            }
        }
    }
}

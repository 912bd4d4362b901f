//! Comparison models: a VAE trained on plain image reconstruction, and a
//! supervised binocular Siamese regressor with an optional
//! calibration-aware loss that fits a differentiable polynomial map to the
//! batch predictions before computing the angular loss.

use crate::model::{DecoderSpec, GazeEncoder, GazeEncoderSpec, ModelConfig, VectorDecoder};
use crate::nn::{Linear, ParamStore};
use crate::rng::stream;
use crate::tensor::{solve_dense, Elem, Graph, Var};
use ndarray::{Array2, Array4, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("calibration-aware fit under-determined: batch {batch} < {needed} coefficients (grow the batch or lower the degree)")]
    UnderDetermined { batch: usize, needed: usize },
    #[error("calibration-aware fit is singular for this batch")]
    SingularFit,
    #[error("supervised training requires gaze labels on every frame")]
    MissingLabels,
}

// ---------------------------------------------------------------------------
// VAE
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct VaeConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub z_dim: usize,
    pub beta_kl: f64,
    pub encoder: GazeEncoderSpec,
    pub decoder: DecoderSpec,
    /// Seed grid the vector decoder starts from.
    pub base: (usize, usize, usize),
}

impl VaeConfig {
    /// VAE sized like a given redirection config: same encoder family, same
    /// latent dimensionality as the gaze embedding.
    pub fn matching(cfg: &ModelConfig) -> Self {
        let (gh, gw) = cfg.appearance_grid();
        VaeConfig {
            input_height: cfg.input_height,
            input_width: cfg.input_width,
            z_dim: cfg.c_g,
            beta_kl: 1e-2,
            encoder: cfg.gaze.clone(),
            decoder: cfg.decoder.clone(),
            base: (cfg.c_a, gh, gw),
        }
    }
}

pub struct VaeModel<A: Elem> {
    pub cfg: VaeConfig,
    pub ps: ParamStore<A>,
    encoder: GazeEncoder,
    decoder: VectorDecoder,
}

pub struct VaeVars {
    pub recon: Var,
    pub mu: Var,
    pub logvar: Var,
}

impl<A: Elem> VaeModel<A> {
    pub fn new(cfg: VaeConfig, seed: u64) -> Self {
        let mut ps = ParamStore::new();
        let mut rng = stream(seed, "vae_init", 0);
        let encoder = GazeEncoder::build(
            &mut ps,
            "encoder",
            &cfg.encoder,
            2 * cfg.z_dim,
            (cfg.input_height, cfg.input_width),
            &mut rng,
        );
        let decoder = VectorDecoder::build(
            &mut ps,
            "decoder",
            cfg.z_dim,
            cfg.base,
            &cfg.decoder,
            &mut rng,
        );
        VaeModel { cfg, ps, encoder, decoder }
    }

    /// Forward with reparameterization noise `eps (B, z)`.
    pub fn forward_train(&mut self, g: &mut Graph<A>, x: Var, eps: &Array2<A>) -> VaeVars {
        let z_dim = self.cfg.z_dim;
        let h = self.encoder.fwd(g, &mut self.ps, x);
        let mu = g.slice_cols(h, 0, z_dim);
        let logvar = g.slice_cols(h, z_dim, 2 * z_dim);
        let half = g.scale(logvar, 0.5);
        let std = g.exp(half);
        let e = g.constant(eps.clone().into_dyn());
        let noise = g.mul(std, e);
        let z = g.add(mu, noise);
        let recon = self.decoder.fwd(g, &mut self.ps, z);
        VaeVars { recon, mu, logvar }
    }

    /// Latent mean as the calibration embedding (eval mode, no sampling).
    pub fn embed(&mut self, images: &Array4<A>) -> Array2<A> {
        let mut g = Graph::new();
        let x = g.constant(images.clone().into_dyn());
        let h = self.encoder.fwd(&mut g, &mut self.ps, x);
        let mu = g.slice_cols(h, 0, self.cfg.z_dim);
        g.val(mu).clone().into_dimensionality().unwrap()
    }
}

/// ELBO pieces: reconstruction MSE plus `beta * mean_b KL(q(z|x) || N(0,I))`.
pub fn vae_loss_on_graph<A: Elem>(
    g: &mut Graph<A>,
    vars: &VaeVars,
    target: Var,
    beta: f64,
) -> Var {
    let recon = g.mse(vars.recon, target);
    let b = g.shape(vars.mu)[0];
    // KL = 0.5 sum(mu^2 + exp(logvar) - 1 - logvar)
    let mu2 = g.mul(vars.mu, vars.mu);
    let var = g.exp(vars.logvar);
    let s1 = g.add(mu2, var);
    let s2 = g.sub(s1, vars.logvar);
    let s3 = g.affine_scalar(s2, 1.0, -1.0);
    let total = g.sum_all(s3);
    let kl_mean = g.scale(total, 0.5 / b as f64);
    let weighted = g.scale(kl_mean, beta);
    g.add(recon, weighted)
}

/// Closed-form KL of a diagonal Gaussian against the standard normal:
/// `0.5 sum(mu^2 + sigma^2 - 1 - ln sigma^2)`.
pub fn kl_standard_normal(mu: &[f64], sigma: &[f64]) -> f64 {
    mu.iter()
        .zip(sigma)
        .map(|(&m, &s)| 0.5 * (m * m + s * s - 1.0 - (s * s).ln()))
        .sum()
}

// ---------------------------------------------------------------------------
// Supervised binocular Siamese
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SiameseConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub c_g: usize,
    pub encoder: GazeEncoderSpec,
    pub calibration_aware: bool,
    /// Polynomial degree of the differentiable calibration layer.
    pub degree: usize,
}

impl SiameseConfig {
    /// Share the gaze-encoder architecture of a redirection config.
    pub fn matching(cfg: &ModelConfig) -> Self {
        SiameseConfig {
            input_height: cfg.input_height,
            input_width: cfg.input_width,
            c_g: cfg.c_g,
            encoder: cfg.gaze.clone(),
            calibration_aware: true,
            degree: 1,
        }
    }
}

/// Shared-weight encoder over (left, flipped right), concatenated into a
/// regression head that predicts a unit 3D gaze direction.
pub struct SiameseModel<A: Elem> {
    pub cfg: SiameseConfig,
    pub ps: ParamStore<A>,
    encoder: GazeEncoder,
    head: Linear,
}

impl<A: Elem> SiameseModel<A> {
    pub fn new(cfg: SiameseConfig, seed: u64) -> Self {
        let mut ps = ParamStore::new();
        let mut rng = stream(seed, "siamese_init", 0);
        let encoder = GazeEncoder::build(
            &mut ps,
            "encoder",
            &cfg.encoder,
            cfg.c_g,
            (cfg.input_height, cfg.input_width),
            &mut rng,
        );
        let head = Linear::new(&mut ps, "head", 2 * cfg.c_g, 3, true, &mut rng);
        SiameseModel { cfg, ps, encoder, head }
    }

    /// `left`, `right_flipped`: `(B,1,H,W)` image vars. Returns unit-norm
    /// `(B,3)` predictions.
    pub fn forward(&mut self, g: &mut Graph<A>, left: Var, right_flipped: Var) -> Var {
        let el = self.encoder.fwd(g, &mut self.ps, left);
        let er = self.encoder.fwd(g, &mut self.ps, right_flipped);
        let cat = g.concat(1, &[el, er]);
        let out = self.head.fwd(g, &mut self.ps, cat);
        g.normalize_rows(out)
    }

    /// Eval-mode prediction for image arrays.
    pub fn predict(&mut self, left: &Array4<A>, right_flipped: &Array4<A>) -> Array2<A> {
        let mut g = Graph::new();
        let l = g.constant(left.clone().into_dyn());
        let r = g.constant(right_flipped.clone().into_dyn());
        let p = self.forward(&mut g, l, r);
        g.val(p).clone().into_dimensionality().unwrap()
    }
}

/// Mean `1 - <pred, label>` over the batch (monotone in the angle).
pub fn angular_loss_on_graph<A: Elem>(g: &mut Graph<A>, preds: Var, labels: Var) -> Var {
    let b = g.shape(preds)[0];
    let dot = g.mul(preds, labels);
    let s = g.sum_all(dot);
    g.affine_scalar(s, -1.0 / b as f64, 1.0)
}

#[derive(Debug)]
pub struct CalibrationAwareLoss {
    pub loss: Var,
    /// Fitted polynomial coefficients, `(n_features, 3)`.
    pub coeffs: Var,
}

/// Fit a least-squares polynomial map (degree-d powers per coordinate, no
/// cross terms) from batch predictions to labels inside the graph, apply
/// it, and return the angular loss of the calibrated predictions.
/// Differentiable end to end, including through the fit.
pub fn calibration_aware_loss<A: Elem>(
    g: &mut Graph<A>,
    preds: Var,
    labels: Var,
    degree: usize,
) -> Result<CalibrationAwareLoss, BaselineError> {
    assert!(degree >= 1);
    let (b, d) = {
        let s = g.shape(preds);
        (s[0], s[1])
    };
    let needed = 1 + d * degree;
    if b < needed {
        return Err(BaselineError::UnderDetermined { batch: b, needed });
    }
    // features [1, v, v^2, ..., v^degree]
    let ones = g.constant(ArrayD::ones(IxDyn(&[b, 1])));
    let mut feats = vec![ones, preds];
    for p in 2..=degree {
        feats.push(g.pow_scalar(preds, p as f64));
    }
    let f = g.concat(1, &feats); // (B, needed)
    let ft = g.permute(f, &[1, 0]);
    let gram = g.matmul2(ft, f); // (needed, needed)
    let fty = g.matmul2(ft, labels); // (needed, 3)
    if solve_dense(g.val(gram), g.val(fty)).is_none() {
        return Err(BaselineError::SingularFit);
    }
    let coeffs = g.solve_lin(gram, fty);
    let calibrated = g.matmul2(f, coeffs); // (B, 3)
    let unit = g.normalize_rows(calibrated);
    let loss = angular_loss_on_graph(g, unit, labels);
    Ok(CalibrationAwareLoss { loss, coeffs })
}

//! Core algorithms for attention-guided unsupervised gaze representation
//! learning from near-eye images.
//!
//! The crate is organized around the training pipeline:
//!
//! - [`tensor`] / [`nn`] / [`optim`]: a small reverse-mode autodiff engine
//!   over `ndarray`, the layers built on it, and a decoupled-weight-decay
//!   Adam optimizer. Generic over `f32`/`f64` so gradient checks can run
//!   in double precision.
//! - [`syntheye`]: a procedural synthetic-eye renderer with exact
//!   ground-truth gaze, used as the verification oracle for everything else.
//! - [`data`]: frame records, manifest (de)serialization, training-pair
//!   sampling, and fixation handling.
//! - [`model`]: the redirection network (gaze encoder, appearance encoder,
//!   self/cross attention fusion, decoder) and its ablation variants.
//! - [`objectives`]: plain MSE and the attention-weighted gaze-focused
//!   reconstruction loss.
//! - [`calibration`]: ridge / MLP regressors from embeddings to gaze angles,
//!   angular error, and the per-person / person-agnostic protocols.
//! - [`baselines`]: VAE and supervised binocular Siamese comparison models.
//! - [`analysis`] / [`profile`]: disentanglement probes, attention-map
//!   export helpers, and parameter/FLOP accounting.

pub mod analysis;
pub mod baselines;
pub mod calibration;
pub mod data;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod profile;
pub mod rng;
pub mod syntheye;
pub mod tensor;

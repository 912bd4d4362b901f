//! Training loops for the redirection model and the baselines, plus the
//! evaluation pipelines that turn a trained model into calibration samples,
//! the ablation lattice, and the gamma sweep.

use crate::dataset::{synchronized_pairs, LoadedDataset};
use gazeshift_core::baselines::{
    angular_loss_on_graph, calibration_aware_loss, vae_loss_on_graph, SiameseConfig, SiameseModel,
    VaeModel,
};
use gazeshift_core::calibration::{
    gaze_vector, run_protocol, CalibError, Protocol, ProtocolConfig, ProtocolReport,
    ProtocolSample, RegressorSpec,
};
use gazeshift_core::data::{
    extract_fixation_samples, sample_pairs, Eye, FlipMember, PairError, PairMode,
};
use gazeshift_core::model::{AblationFlags, ModelConfig, ModelError, RedirectionModel};
use gazeshift_core::objectives::{entropy, loss_on_graph, LossConfig, LossError, LossKind};
use gazeshift_core::optim::AdamW;
use gazeshift_core::rng::{derive_seed, stream};
use gazeshift_core::tensor::Graph;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;
use thiserror::Error;

/// The gamma grid used by sweep reports and entropy logging.
pub const GAMMA_GRID: [f64; 4] = [0.5, 1.0, 2.0, 4.0];

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged: non-finite loss at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Pairs(#[from] PairError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Calibration(#[from] CalibError),
    #[error("dataset has no {0}")]
    MissingData(&'static str),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub loss: LossConfig,
    pub pair_mode: PairMode,
    pub window: i64,
    pub pairs_per_epoch: usize,
    pub flags: AblationFlags,
    /// Deterministic mode: single-threaded data assembly and seeded
    /// everything (the default; kept as a switch for future parallel
    /// loaders).
    pub deterministic: bool,
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 30,
            lr: 1e-4,
            weight_decay: 0.05,
            seed: 0,
            loss: LossConfig::default(),
            pair_mode: PairMode::NearEye,
            window: 30,
            pairs_per_epoch: 3000,
            flags: AblationFlags::full(),
            deterministic: true,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs < 1 {
            return Err(TrainError::BadConfig("epochs must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(TrainError::BadConfig(
                "batch_size must be >= 2 (training consumes pairs)".into(),
            ));
        }
        self.flags
            .validate()
            .map_err(|e| TrainError::BadConfig(e.to_string()))?;
        self.loss
            .validate()
            .map_err(|e| TrainError::BadConfig(e.to_string()))?;
        Ok(())
    }

    /// The loss kind follows the ablation flags; gamma and the rest come
    /// from the configured loss.
    pub fn effective_loss(&self) -> LossConfig {
        LossConfig {
            kind: if self.flags.gaze_focused_loss {
                LossKind::GazeFocused
            } else {
                LossKind::Mse
            },
            ..self.loss
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_loss: f64,
    pub wall_time_s: f64,
}

/// Per-batch entropies of the normalized loss weights under each grid gamma.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EntropyRecord {
    pub epoch: usize,
    pub batch: usize,
    pub entropies: [f64; 4],
}

#[derive(Debug, Default)]
pub struct TrainOutcome {
    pub metrics: Vec<EpochMetrics>,
    pub entropy_log: Vec<EntropyRecord>,
}

fn clip_grads(grads: &mut [(usize, ndarray::ArrayD<f32>)], max_norm: f64) {
    let total: f64 = grads
        .iter()
        .map(|(_, g)| g.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>())
        .sum();
    let norm = total.sqrt();
    if norm > max_norm {
        let scale = (max_norm / norm) as f32;
        for (_, g) in grads.iter_mut() {
            g.mapv_inplace(|v| v * scale);
        }
    }
}

/// Pretext-task training of a redirection model. Deterministic under
/// `cfg.seed`; aborts with an error if the loss goes non-finite.
pub fn train(
    model: &mut RedirectionModel<f32>,
    data: &LoadedDataset,
    cfg: &TrainConfig,
    verbose: bool,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let loss_cfg = cfg.effective_loss();
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut out = TrainOutcome::default();
    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let pair_seed = derive_seed(cfg.seed, "pairs", epoch as u64);
        let pairs = sample_pairs(
            &data.records,
            cfg.pair_mode,
            cfg.window,
            pair_seed,
            cfg.pairs_per_epoch,
        )?;
        let mut loss_sum = 0.0f64;
        let mut n_batches = 0usize;
        for (bi, chunk) in pairs.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            for p in chunk {
                assert_eq!(
                    data.records[p.source].subject_id, data.records[p.target].subject_id,
                    "pair crosses subjects"
                );
            }
            let src: Vec<(usize, bool)> = chunk
                .iter()
                .map(|p| (p.source, p.flip == Some(FlipMember::Source)))
                .collect();
            let tgt: Vec<(usize, bool)> = chunk.iter().map(|p| (p.target, false)).collect();
            let xs = data.batch(&src);
            let xt = data.batch(&tgt);
            let mut g = Graph::<f32>::train();
            let s = g.constant(xs.into_dyn());
            let t = g.constant(xt.into_dyn());
            let fwd = model.forward_train(&mut g, s, t);
            if loss_cfg.kind == LossKind::GazeFocused {
                let attn = fwd.attn.expect("attention flags validated");
                let w = g.val(attn);
                let b = w.shape()[0];
                let tdim = w.shape()[1];
                let mut hs = [0.0f64; 4];
                for (gi, gamma) in GAMMA_GRID.iter().enumerate() {
                    let mut acc = 0.0;
                    for bb in 0..b {
                        let raw: Vec<f64> =
                            (0..tdim).map(|i| w[[bb, i]] as f64).collect();
                        acc += entropy(&gazeshift_core::objectives::normalized_weights(
                            &raw, *gamma,
                        ));
                    }
                    hs[gi] = acc / b as f64;
                }
                out.entropy_log.push(EntropyRecord {
                    epoch,
                    batch: bi,
                    entropies: hs,
                });
            }
            let attn = fwd.attn.map(|a| (a, fwd.grid));
            let loss = loss_on_graph(&mut g, &loss_cfg, fwd.recon, t, attn)?;
            let lval = g.val(loss)[ndarray::IxDyn(&[])] as f64;
            if !lval.is_finite() {
                return Err(TrainError::Diverged { epoch });
            }
            loss_sum += lval;
            n_batches += 1;
            let mut grads = g.backward(loss);
            let mut pg = g.param_grads(&mut grads);
            if let Some(c) = cfg.grad_clip {
                clip_grads(&mut pg, c);
            }
            opt.step(model.params_mut(), &pg);
        }
        let m = EpochMetrics {
            epoch,
            mean_loss: loss_sum / n_batches.max(1) as f64,
            wall_time_s: t0.elapsed().as_secs_f64(),
        };
        if verbose {
            eprintln!(
                "epoch {:>3}: mean loss {:.6}  ({:.1}s)",
                m.epoch, m.mean_loss, m.wall_time_s
            );
        }
        out.metrics.push(m);
    }
    Ok(out)
}

/// Continue unsupervised training from a pretrained model on a new dataset.
/// Input sizes must match the checkpoint config.
pub fn finetune(
    model: &mut RedirectionModel<f32>,
    data: &LoadedDataset,
    cfg: &TrainConfig,
    verbose: bool,
) -> Result<TrainOutcome, TrainError> {
    let mc = model.cfg();
    if (mc.input_height, mc.input_width) != (data.height, data.width) {
        return Err(TrainError::Model(ModelError::ShapeMismatch {
            expected: format!("(B, 1, {}, {})", mc.input_height, mc.input_width),
            got: format!("dataset images {}x{}", data.height, data.width),
        }));
    }
    train(model, data, cfg, verbose)
}

// ---------------------------------------------------------------------------
// Embedding extraction and protocol assembly
// ---------------------------------------------------------------------------

/// Gaze embeddings per record (None for frames outside the subset).
/// Right-eye images are horizontally flipped before encoding, matching the
/// binocular calibration convention.
pub fn gaze_embeddings(
    model: &mut RedirectionModel<f32>,
    data: &LoadedDataset,
    fixation_only: bool,
    batch: usize,
) -> Result<Vec<Option<Vec<f64>>>, ModelError> {
    let mut out: Vec<Option<Vec<f64>>> = vec![None; data.len()];
    let wanted: Vec<usize> = (0..data.len())
        .filter(|&i| !fixation_only || data.records[i].fixation)
        .collect();
    for chunk in wanted.chunks(batch.max(1)) {
        let entries: Vec<(usize, bool)> = chunk
            .iter()
            .map(|&i| (i, data.records[i].eye == Eye::Right))
            .collect();
        let x = data.batch(&entries);
        let e = model.embed(&x)?;
        for (k, &i) in chunk.iter().enumerate() {
            out[i] = Some(e.row(k).iter().map(|&v| v as f64).collect());
        }
    }
    Ok(out)
}

/// Binocular calibration samples: per fixation interval, the median-closest
/// frame of each eye, embeddings concatenated [left; right].
pub fn binocular_samples(
    data: &LoadedDataset,
    embeddings: &[Option<Vec<f64>>],
) -> (Vec<ProtocolSample>, Vec<String>) {
    let fx = extract_fixation_samples(&data.records, embeddings);
    let samples = fx
        .binocular
        .iter()
        .map(|s| {
            let l = embeddings[s.left].as_ref().unwrap();
            let r = embeddings[s.right].as_ref().unwrap();
            ProtocolSample {
                subject_id: s.subject_id.clone(),
                embedding: gazeshift_core::calibration::binocular_embedding(l, r),
                label: s.label,
            }
        })
        .collect();
    (samples, fx.warnings)
}

/// Monocular calibration samples (per-eye evaluation for remote datasets).
pub fn monocular_samples(
    data: &LoadedDataset,
    embeddings: &[Option<Vec<f64>>],
) -> (Vec<ProtocolSample>, Vec<String>) {
    let (samples, warnings) =
        gazeshift_core::data::extract_fixation_samples_monocular(&data.records, embeddings);
    let out = samples
        .iter()
        .map(|s| ProtocolSample {
            subject_id: s.subject_id.clone(),
            embedding: embeddings[s.frame].as_ref().unwrap().clone(),
            label: s.label,
        })
        .collect();
    (out, warnings)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSpec {
    pub k_values: Vec<usize>,
    pub n_repeats: usize,
    pub lambda: f64,
    pub seed: u64,
    pub binocular: bool,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            k_values: vec![30],
            n_repeats: 10,
            lambda: 1e-3,
            seed: 0,
            binocular: true,
        }
    }
}

/// Per-person ridge evaluation of a trained redirection model.
pub fn evaluate_per_person(
    model: &mut RedirectionModel<f32>,
    data: &LoadedDataset,
    spec: &EvalSpec,
) -> Result<ProtocolReport, TrainError> {
    let embeddings = gaze_embeddings(model, data, true, 64)?;
    let (samples, _warnings) = if spec.binocular {
        binocular_samples(data, &embeddings)
    } else {
        monocular_samples(data, &embeddings)
    };
    if samples.is_empty() {
        return Err(TrainError::MissingData("fixation samples"));
    }
    let config = ProtocolConfig {
        protocol: Protocol::PerPerson,
        k_values: spec.k_values.clone(),
        n_repeats: spec.n_repeats,
        seed: spec.seed,
        regressor: RegressorSpec::Ridge { lambda: spec.lambda },
    };
    Ok(run_protocol(&samples, &config)?)
}

// ---------------------------------------------------------------------------
// VAE baseline training
// ---------------------------------------------------------------------------

/// Train the VAE on single frames with the same optimizer settings.
pub fn train_vae(
    model: &mut VaeModel<f32>,
    data: &LoadedDataset,
    cfg: &TrainConfig,
    verbose: bool,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut out = TrainOutcome::default();
    let z = model.cfg.z_dim;
    let beta = model.cfg.beta_kl;
    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let mut idx: Vec<usize> = (0..data.len()).collect();
        let mut rng = stream(cfg.seed, "vae_epoch", epoch as u64);
        idx.shuffle(&mut rng);
        idx.truncate(cfg.pairs_per_epoch);
        let mut loss_sum = 0.0;
        let mut n = 0;
        for chunk in idx.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let entries: Vec<(usize, bool)> = chunk.iter().map(|&i| (i, false)).collect();
            let x = data.batch(&entries);
            let eps =
                Array2::<f32>::from_shape_fn((chunk.len(), z), |_| {
                    // Box-Muller from the seeded stream
                    let u1: f64 = rng.gen_range(1e-12..1.0);
                    let u2: f64 = rng.gen_range(0.0..1.0);
                    ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
                });
            let mut g = Graph::<f32>::train();
            let xv = g.constant(x.into_dyn());
            let vars = model.forward_train(&mut g, xv, &eps);
            let loss = vae_loss_on_graph(&mut g, &vars, xv, beta);
            let lval = g.val(loss)[ndarray::IxDyn(&[])] as f64;
            if !lval.is_finite() {
                return Err(TrainError::Diverged { epoch });
            }
            loss_sum += lval;
            n += 1;
            let mut grads = g.backward(loss);
            let pg = g.param_grads(&mut grads);
            opt.step(&mut model.ps, &pg);
        }
        let m = EpochMetrics {
            epoch,
            mean_loss: loss_sum / n.max(1) as f64,
            wall_time_s: t0.elapsed().as_secs_f64(),
        };
        if verbose {
            eprintln!("vae epoch {:>3}: mean loss {:.6}", m.epoch, m.mean_loss);
        }
        out.metrics.push(m);
    }
    Ok(out)
}

/// VAE embeddings (latent means) per record, right eye flipped.
pub fn vae_embeddings(
    model: &mut VaeModel<f32>,
    data: &LoadedDataset,
    fixation_only: bool,
    batch: usize,
) -> Vec<Option<Vec<f64>>> {
    let mut out: Vec<Option<Vec<f64>>> = vec![None; data.len()];
    let wanted: Vec<usize> = (0..data.len())
        .filter(|&i| !fixation_only || data.records[i].fixation)
        .collect();
    for chunk in wanted.chunks(batch.max(1)) {
        let entries: Vec<(usize, bool)> = chunk
            .iter()
            .map(|&i| (i, data.records[i].eye == Eye::Right))
            .collect();
        let x = data.batch(&entries);
        let e = model.embed(&x);
        for (k, &i) in chunk.iter().enumerate() {
            out[i] = Some(e.row(k).iter().map(|&v| v as f64).collect());
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Supervised Siamese baseline
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SupervisedConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub samples_per_epoch: usize,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        SupervisedConfig {
            epochs: 20,
            batch_size: 30,
            lr: 1e-4,
            weight_decay: 0.05,
            seed: 0,
            samples_per_epoch: 1500,
        }
    }
}

/// Train the supervised binocular model on labeled fixation frames.
pub fn train_siamese(
    model: &mut SiameseModel<f32>,
    data: &LoadedDataset,
    cfg: &SupervisedConfig,
    verbose: bool,
) -> Result<TrainOutcome, TrainError> {
    let pairs: Vec<(usize, usize)> = synchronized_pairs(&data.records)
        .into_iter()
        .filter(|&(l, _)| data.records[l].fixation)
        .collect();
    if pairs.is_empty() {
        return Err(TrainError::MissingData("labeled fixation left/right pairs"));
    }
    if pairs
        .iter()
        .any(|&(l, _)| data.records[l].gaze_label().is_none())
    {
        return Err(TrainError::MissingData("gaze labels on fixation frames"));
    }
    let calib_aware = model.cfg.calibration_aware;
    let degree = model.cfg.degree;
    let needed = 1 + 3 * degree;
    if calib_aware && cfg.batch_size < needed {
        return Err(TrainError::BadConfig(format!(
            "calibration-aware loss needs batch_size >= {needed}"
        )));
    }
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut out = TrainOutcome::default();
    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let mut order = pairs.clone();
        let mut rng = stream(cfg.seed, "siamese_epoch", epoch as u64);
        order.shuffle(&mut rng);
        order.truncate(cfg.samples_per_epoch);
        let mut loss_sum = 0.0;
        let mut n = 0;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 || (calib_aware && chunk.len() < needed) {
                continue;
            }
            let left: Vec<(usize, bool)> = chunk.iter().map(|&(l, _)| (l, false)).collect();
            let right: Vec<(usize, bool)> = chunk.iter().map(|&(_, r)| (r, true)).collect();
            let xl = data.batch(&left);
            let xr = data.batch(&right);
            let mut labels = Array2::<f32>::zeros((chunk.len(), 3));
            for (i, &(l, _)) in chunk.iter().enumerate() {
                let (yaw, pitch) = data.records[l].gaze_label().unwrap();
                let v = gaze_vector(yaw, pitch);
                for d in 0..3 {
                    labels[[i, d]] = v[d] as f32;
                }
            }
            let mut g = Graph::<f32>::train();
            let lv = g.constant(xl.into_dyn());
            let rv = g.constant(xr.into_dyn());
            let preds = model.forward(&mut g, lv, rv);
            let yv = g.constant(labels.into_dyn());
            let loss = if calib_aware {
                calibration_aware_loss(&mut g, preds, yv, degree)
                    .map_err(|e| TrainError::BadConfig(e.to_string()))?
                    .loss
            } else {
                angular_loss_on_graph(&mut g, preds, yv)
            };
            let lval = g.val(loss)[ndarray::IxDyn(&[])] as f64;
            if !lval.is_finite() {
                return Err(TrainError::Diverged { epoch });
            }
            loss_sum += lval;
            n += 1;
            let mut grads = g.backward(loss);
            let pg = g.param_grads(&mut grads);
            opt.step(&mut model.ps, &pg);
        }
        let m = EpochMetrics {
            epoch,
            mean_loss: loss_sum / n.max(1) as f64,
            wall_time_s: t0.elapsed().as_secs_f64(),
        };
        if verbose {
            eprintln!("siamese epoch {:>3}: mean loss {:.6}", m.epoch, m.mean_loss);
        }
        out.metrics.push(m);
    }
    Ok(out)
}

/// Supervised predictions on fixation intervals as protocol samples (the
/// 3D predicted direction is the "embedding"; per-person ridge then plays
/// the role of per-person calibration, mirroring the unsupervised protocol).
pub fn siamese_protocol_samples(
    model: &mut SiameseModel<f32>,
    data: &LoadedDataset,
) -> Vec<ProtocolSample> {
    // one sample per fixation interval: middle frame of each eye
    let intervals = gazeshift_core::data::fixation_intervals(&data.records);
    use std::collections::BTreeMap;
    let mut by_key: BTreeMap<(String, String, i64), (Option<usize>, Option<usize>)> =
        BTreeMap::new();
    for iv in &intervals {
        let mid = iv.frames[iv.frames.len() / 2];
        let lo = data.records[*iv.frames.first().unwrap()].frame_index;
        let key = (iv.subject_id.clone(), iv.session_id.clone(), lo);
        let e = by_key.entry(key).or_default();
        match iv.eye {
            Eye::Left => e.0 = Some(mid),
            Eye::Right => e.1 = Some(mid),
        }
    }
    let mut samples = Vec::new();
    for ((subject, _sess, _lo), (l, r)) in by_key {
        let (Some(l), Some(r)) = (l, r) else { continue };
        let xl = data.batch(&[(l, false)]);
        let xr = data.batch(&[(r, true)]);
        let p = model.predict(&xl, &xr);
        let label = data.records[l].gaze_label().unwrap();
        samples.push(ProtocolSample {
            subject_id: subject,
            embedding: (0..3).map(|d| p[[0, d]] as f64).collect(),
            label,
        });
    }
    samples
}

// ---------------------------------------------------------------------------
// Ablation lattice and gamma sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub row: usize,
    pub separate_encoders: bool,
    pub attention_redirection: bool,
    pub gaze_focused_loss: bool,
    pub per_seed_error: Vec<f64>,
    pub mean_error_deg: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn to_table(&self) -> String {
        let mut s = String::from(
            "#  separate  attention  gaze-focused  avg error [deg]\n",
        );
        let mark = |b: bool| if b { "yes" } else { " - " };
        for r in &self.rows {
            s.push_str(&format!(
                "{}  {:>8}  {:>9}  {:>12}  {:.4}\n",
                r.row,
                mark(r.separate_encoders),
                mark(r.attention_redirection),
                mark(r.gaze_focused_loss),
                r.mean_error_deg
            ));
        }
        s
    }
}

/// Train and evaluate the four ablation rows over several seeds.
pub fn run_ablation_lattice(
    model_cfg: &ModelConfig,
    data: &LoadedDataset,
    base: &TrainConfig,
    seeds: &[u64],
    eval: &EvalSpec,
    verbose: bool,
) -> Result<AblationReport, TrainError> {
    let mut rows = Vec::new();
    let mut row1_names: Option<Vec<String>> = None;
    for row in 1..=4 {
        let flags = AblationFlags::row(row);
        flags
            .validate()
            .map_err(|e| TrainError::BadConfig(e.to_string()))?;
        let mut per_seed = Vec::new();
        for (si, &seed) in seeds.iter().enumerate() {
            let mut cfg = base.clone();
            cfg.flags = flags;
            cfg.seed = derive_seed(seed, "lattice", row as u64);
            let mut model = RedirectionModel::<f32>::new(
                model_cfg.clone(),
                flags,
                derive_seed(seed, "lattice_init", row as u64),
            )?;
            if row == 1 && si == 0 {
                row1_names = Some(model.params().names());
            }
            if row == 4 && si == 0 {
                // the baseline and the full model must be structurally
                // different parameterizations
                let names4 = model.params().names();
                assert_ne!(
                    row1_names.as_ref().unwrap(),
                    &names4,
                    "row 1 and row 4 share a parameter set"
                );
            }
            if verbose {
                eprintln!("lattice row {row}, seed {seed}: training");
            }
            train(&mut model, data, &cfg, false)?;
            let report = evaluate_per_person(&mut model, data, eval)?;
            per_seed.push(report.mean_error_deg);
        }
        let mean = per_seed.iter().sum::<f64>() / per_seed.len().max(1) as f64;
        rows.push(AblationRow {
            row,
            separate_encoders: flags.separate_encoders,
            attention_redirection: flags.attention_redirection,
            gaze_focused_loss: flags.gaze_focused_loss,
            per_seed_error: per_seed,
            mean_error_deg: mean,
        });
    }
    Ok(AblationReport { rows })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GammaSweepReport {
    pub gammas: Vec<f64>,
    pub errors_deg: Vec<f64>,
    /// True when every logged batch had non-increasing weight entropy over
    /// the gamma grid.
    pub entropy_non_increasing: bool,
    pub entropy_batches: usize,
}

impl GammaSweepReport {
    pub fn to_table(&self) -> String {
        let mut s = String::from("gamma          ");
        for g in &self.gammas {
            s.push_str(&format!("{g:>8.2}"));
        }
        s.push_str("\navg error [deg]");
        for e in &self.errors_deg {
            s.push_str(&format!("{e:>8.3}"));
        }
        s.push('\n');
        s
    }
}

/// Train/evaluate across the gamma grid with the gaze-focused loss.
pub fn gamma_sweep(
    model_cfg: &ModelConfig,
    data: &LoadedDataset,
    base: &TrainConfig,
    gammas: &[f64],
    eval: &EvalSpec,
    verbose: bool,
) -> Result<GammaSweepReport, TrainError> {
    let mut errors = Vec::new();
    let mut entropy_ok = true;
    let mut entropy_batches = 0usize;
    for (gi, &gamma) in gammas.iter().enumerate() {
        let mut cfg = base.clone();
        cfg.flags = AblationFlags::full();
        cfg.loss.gamma = gamma;
        cfg.seed = derive_seed(base.seed, "gamma", gi as u64);
        let mut model = RedirectionModel::<f32>::new(
            model_cfg.clone(),
            cfg.flags,
            derive_seed(base.seed, "gamma_init", gi as u64),
        )?;
        if verbose {
            eprintln!("gamma sweep: training gamma={gamma}");
        }
        let outcome = train(&mut model, data, &cfg, false)?;
        for rec in &outcome.entropy_log {
            entropy_batches += 1;
            for w in rec.entropies.windows(2) {
                if w[1] > w[0] + 1e-9 {
                    entropy_ok = false;
                }
            }
        }
        let report = evaluate_per_person(&mut model, data, eval)?;
        errors.push(report.mean_error_deg);
    }
    Ok(GammaSweepReport {
        gammas: gammas.to_vec(),
        errors_deg: errors,
        entropy_non_increasing: entropy_ok,
        entropy_batches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use gazeshift_core::model::{AppEncoderSpec, DecoderSpec, DeconvBlockSpec, StageSpec};
    use gazeshift_core::syntheye::{sample_dataset, SamplerConfig};

    pub(crate) fn tiny_model_cfg(size: usize) -> ModelConfig {
        let mut cfg = ModelConfig::synth(size, size);
        cfg.gaze.stages = vec![
            StageSpec { out_c: 4, expansion: 1, repeats: 1, stride: 2 },
            StageSpec { out_c: 8, expansion: 2, repeats: 1, stride: 2 },
            StageSpec { out_c: 16, expansion: 2, repeats: 1, stride: 2 },
        ];
        cfg.c_a = 12;
        cfg.app = AppEncoderSpec::Mobile {
            stem_c: 6,
            stages: vec![
                StageSpec { out_c: 8, expansion: 2, repeats: 1, stride: 2 },
                StageSpec { out_c: 12, expansion: 2, repeats: 1, stride: 2 },
            ],
            pad: 1,
            pool_to: None,
        };
        cfg.decoder = DecoderSpec::Deconv {
            blocks: vec![
                DeconvBlockSpec { out_c: 8, k: 4 },
                DeconvBlockSpec { out_c: 4, k: 4 },
                DeconvBlockSpec { out_c: 2, k: 2 },
            ],
            final_resize: None,
        };
        cfg
    }

    fn tiny_data() -> LoadedDataset {
        let cfg = SamplerConfig {
            image_height: 32,
            image_width: 32,
            ..Default::default()
        };
        let frames = sample_dataset(1, 24, 5, &cfg).unwrap();
        LoadedDataset::from_synth(&frames).unwrap()
    }

    fn tiny_train_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 1,
            batch_size: 4,
            pairs_per_epoch: 8,
            lr: 1e-3,
            seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn one_epoch_yields_one_metrics_entry() {
        let mut model =
            RedirectionModel::<f32>::new(tiny_model_cfg(32), AblationFlags::full(), 1).unwrap();
        let data = tiny_data();
        let out = train(&mut model, &data, &tiny_train_cfg(), false).unwrap();
        assert_eq!(out.metrics.len(), 1);
        assert!(out.metrics[0].mean_loss.is_finite());
        assert!(!out.entropy_log.is_empty(), "gaze-focused runs log entropy");
    }

    #[test]
    fn training_is_seed_deterministic() {
        let data = tiny_data();
        let run = || {
            let mut model =
                RedirectionModel::<f32>::new(tiny_model_cfg(32), AblationFlags::full(), 1)
                    .unwrap();
            train(&mut model, &data, &tiny_train_cfg(), false)
                .unwrap()
                .metrics
        };
        let a = run();
        let b = run();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.mean_loss.to_bits(), y.mean_loss.to_bits(), "bit-identical loss");
        }
    }

    #[test]
    fn invalid_flag_combination_rejected() {
        let mut cfg = tiny_train_cfg();
        cfg.flags = AblationFlags {
            separate_encoders: true,
            attention_redirection: false,
            gaze_focused_loss: true,
        };
        let mut model =
            RedirectionModel::<f32>::new(tiny_model_cfg(32), AblationFlags::row(2), 1).unwrap();
        let err = train(&mut model, &tiny_data(), &cfg, false).unwrap_err();
        assert!(err.to_string().contains("gaze_focused_loss requires"), "{err}");
    }

    #[test]
    fn finetune_rejects_size_mismatch() {
        let mut model =
            RedirectionModel::<f32>::new(tiny_model_cfg(64), AblationFlags::full(), 1).unwrap();
        let err = finetune(&mut model, &tiny_data(), &tiny_train_cfg(), false).unwrap_err();
        assert!(err.to_string().contains("64"), "{err}");
    }

    #[test]
    fn embeddings_cover_fixation_frames() {
        let mut model =
            RedirectionModel::<f32>::new(tiny_model_cfg(32), AblationFlags::full(), 1).unwrap();
        let data = tiny_data();
        let embs = gaze_embeddings(&mut model, &data, true, 16).unwrap();
        for (i, e) in embs.iter().enumerate() {
            assert_eq!(e.is_some(), data.records[i].fixation);
            if let Some(v) = e {
                assert_eq!(v.len(), 12);
            }
        }
        let (samples, warnings) = binocular_samples(&data, &embs);
        assert!(!samples.is_empty());
        assert!(warnings.is_empty());
        assert_eq!(samples[0].embedding.len(), 24, "binocular concatenation");
    }
}

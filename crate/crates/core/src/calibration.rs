//! Mapping gaze embeddings to 2D gaze angles: closed-form ridge regression,
//! a small MLP regressor, the angular-error metric, and the per-person /
//! person-agnostic evaluation protocols.

use crate::nn::{Linear, ParamStore};
use crate::optim::AdamW;
use crate::rng::{derive_seed, stream};
use crate::tensor::{solve_dense, Graph};
use ndarray::{Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CalibError {
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("inconsistent embedding dimension: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("singular system at lambda=0; use lambda > 0")]
    Singular,
    #[error("non-finite loss while fitting the MLP")]
    NonFinite,
    #[error("requested K={k} exceeds the pool of {pool} samples")]
    KTooLarge { k: usize, pool: usize },
    #[error("lambda must be >= 0, got {0}")]
    BadLambda(f64),
}

/// Unit gaze direction for (yaw, pitch) in degrees:
/// `v = (cos(pitch) sin(yaw), sin(pitch), cos(pitch) cos(yaw))`.
pub fn gaze_vector(yaw_deg: f64, pitch_deg: f64) -> [f64; 3] {
    let y = yaw_deg.to_radians();
    let p = pitch_deg.to_radians();
    [p.cos() * y.sin(), p.sin(), p.cos() * y.cos()]
}

/// Angle in degrees between two gaze directions, in [0, 180]. Computed via
/// the chord length `2 asin(|a-b|/2)`, which is exact at zero and accurate
/// for small angles where `acos` of the dot product loses precision.
pub fn angular_error(pred: (f64, f64), truth: (f64, f64)) -> f64 {
    let a = gaze_vector(pred.0, pred.1);
    let b = gaze_vector(truth.0, truth.1);
    let chord = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
    (2.0 * (chord / 2.0).clamp(0.0, 1.0).asin()).to_degrees()
}

// ---------------------------------------------------------------------------
// Ridge regression
// ---------------------------------------------------------------------------

/// Closed-form ridge regressor with a bias term. Inputs are standardized
/// with statistics from the calibration samples; the bias is not penalized.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RidgeModel {
    /// (d+1) x 2 coefficients over standardized features; last row is bias.
    pub weights: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl RidgeModel {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn predict(&self, embedding: &[f64]) -> (f64, f64) {
        assert_eq!(embedding.len(), self.input_dim());
        let d = self.input_dim();
        let mut out = [self.weights[d][0], self.weights[d][1]];
        for (i, &e) in embedding.iter().enumerate() {
            let z = (e - self.mean[i]) / self.scale[i];
            out[0] += self.weights[i][0] * z;
            out[1] += self.weights[i][1] * z;
        }
        (out[0], out[1])
    }

    /// L2 norm of the non-bias coefficient block.
    pub fn coeff_norm(&self) -> f64 {
        let d = self.input_dim();
        self.weights[..d]
            .iter()
            .flat_map(|r| r.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Fit ridge regression `(X~^T X~ + lambda I') beta = X~^T Y` where `X~` is
/// the standardized design matrix with a bias column and `I'` skips the
/// bias. `lambda = 0` is ordinary least squares and errors out on singular
/// systems.
pub fn fit_ridge(
    samples: &[(Vec<f64>, (f64, f64))],
    lambda: f64,
) -> Result<RidgeModel, CalibError> {
    if lambda < 0.0 {
        return Err(CalibError::BadLambda(lambda));
    }
    if samples.len() < 2 {
        return Err(CalibError::TooFewSamples(samples.len()));
    }
    let d = samples[0].0.len();
    for (e, _) in samples {
        if e.len() != d {
            return Err(CalibError::DimMismatch { expected: d, got: e.len() });
        }
    }
    let n = samples.len();
    let mut mean = vec![0.0; d];
    for (e, _) in samples {
        for (m, v) in mean.iter_mut().zip(e) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut scale = vec![0.0; d];
    for (e, _) in samples {
        for (s, (v, m)) in scale.iter_mut().zip(e.iter().zip(&mean)) {
            *s += (v - m) * (v - m);
        }
    }
    for s in scale.iter_mut() {
        *s = (*s / n as f64).sqrt();
        if *s < 1e-12 {
            *s = 1.0; // constant feature: contributes nothing after centering
        }
    }
    // normal equations over (d+1) features (bias last)
    let f = d + 1;
    let mut xtx = vec![0.0; f * f];
    let mut xty = vec![0.0; f * 2];
    let mut row = vec![0.0; f];
    for (e, (yaw, pitch)) in samples {
        for i in 0..d {
            row[i] = (e[i] - mean[i]) / scale[i];
        }
        row[d] = 1.0;
        for i in 0..f {
            for j in 0..f {
                xtx[i * f + j] += row[i] * row[j];
            }
            xty[i * 2] += row[i] * yaw;
            xty[i * 2 + 1] += row[i] * pitch;
        }
    }
    for i in 0..d {
        xtx[i * f + i] += lambda;
    }
    let a = ArrayD::from_shape_vec(IxDyn(&[f, f]), xtx).unwrap();
    let b = ArrayD::from_shape_vec(IxDyn(&[f, 2]), xty).unwrap();
    let sol = match solve_dense(&a, &b) {
        Some(s) => s,
        None => return Err(CalibError::Singular),
    };
    let weights = (0..f)
        .map(|i| vec![sol[[i, 0]], sol[[i, 1]]])
        .collect();
    Ok(RidgeModel { weights, mean, scale })
}

// ---------------------------------------------------------------------------
// MLP regressor
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MlpConfig {
    pub hidden: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            hidden: 64,
            steps: 2000,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Two-hidden-layer MLP trained full-batch on standardized inputs.
pub struct MlpModel {
    ps: ParamStore<f64>,
    fc1: Linear,
    fc2: Linear,
    fc3: Linear,
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl MlpModel {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn predict(&self, embedding: &[f64]) -> (f64, f64) {
        let x = self.standardize_batch(std::slice::from_ref(&embedding.to_vec()));
        let mut g = Graph::<f64>::new();
        let xv = g.constant(x.into_dyn());
        let out = self.forward(&mut g, xv);
        let v = g.val(out);
        (v[[0, 0]], v[[0, 1]])
    }

    fn standardize_batch(&self, embs: &[Vec<f64>]) -> Array2<f64> {
        let d = self.mean.len();
        let mut x = Array2::<f64>::zeros((embs.len(), d));
        for (i, e) in embs.iter().enumerate() {
            for j in 0..d {
                x[[i, j]] = (e[j] - self.mean[j]) / self.scale[j];
            }
        }
        x
    }

    fn forward(&self, g: &mut Graph<f64>, x: crate::tensor::Var) -> crate::tensor::Var {
        let h = self.fc1.fwd(g, &self.ps, x);
        let h = g.relu(h);
        let h = self.fc2.fwd(g, &self.ps, h);
        let h = g.relu(h);
        self.fc3.fwd(g, &self.ps, h)
    }
}

/// Train the MLP on (embedding, angles) pairs. Deterministic under
/// `config.seed`.
pub fn fit_mlp(
    samples: &[(Vec<f64>, (f64, f64))],
    config: &MlpConfig,
) -> Result<MlpModel, CalibError> {
    if samples.len() < 2 {
        return Err(CalibError::TooFewSamples(samples.len()));
    }
    let d = samples[0].0.len();
    for (e, _) in samples {
        if e.len() != d {
            return Err(CalibError::DimMismatch { expected: d, got: e.len() });
        }
    }
    let n = samples.len();
    let mut mean = vec![0.0; d];
    let mut scale = vec![0.0; d];
    for (e, _) in samples {
        for ((m, s), v) in mean.iter_mut().zip(scale.iter_mut()).zip(e) {
            *m += v;
            *s += v * v;
        }
    }
    for (m, s) in mean.iter_mut().zip(scale.iter_mut()) {
        *m /= n as f64;
        *s = (*s / n as f64 - *m * *m).max(0.0).sqrt();
        if *s < 1e-12 {
            *s = 1.0;
        }
    }
    let mut ps = ParamStore::<f64>::new();
    let mut rng = stream(config.seed, "mlp_init", 0);
    let fc1 = Linear::new(&mut ps, "fc1", d, config.hidden, true, &mut rng);
    let fc2 = Linear::new(&mut ps, "fc2", config.hidden, config.hidden, true, &mut rng);
    let fc3 = Linear::new(&mut ps, "fc3", config.hidden, 2, true, &mut rng);
    let model = MlpModel { ps, fc1, fc2, fc3, mean, scale };
    let x = model.standardize_batch(
        &samples.iter().map(|(e, _)| e.clone()).collect::<Vec<_>>(),
    );
    let mut y = Array2::<f64>::zeros((n, 2));
    for (i, (_, (yaw, pitch))) in samples.iter().enumerate() {
        y[[i, 0]] = *yaw;
        y[[i, 1]] = *pitch;
    }
    let mut model = model;
    let mut opt = AdamW::new(config.lr, 0.0);
    for _ in 0..config.steps {
        let mut g = Graph::<f64>::train();
        let xv = g.constant(x.clone().into_dyn());
        let yv = g.constant(y.clone().into_dyn());
        let out = model.forward(&mut g, xv);
        let loss = g.mse(out, yv);
        let lval = g.val(loss)[IxDyn(&[])];
        if !lval.is_finite() {
            return Err(CalibError::NonFinite);
        }
        let mut grads = g.backward(loss);
        let pg = g.param_grads(&mut grads);
        opt.step(&mut model.ps, &pg);
    }
    Ok(model)
}

/// Fitted embedding-to-angles map of either kind.
pub enum CalibrationModel {
    Ridge(RidgeModel),
    Mlp(MlpModel),
}

impl CalibrationModel {
    pub fn predict(&self, embedding: &[f64]) -> (f64, f64) {
        match self {
            CalibrationModel::Ridge(m) => m.predict(embedding),
            CalibrationModel::Mlp(m) => m.predict(embedding),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            CalibrationModel::Ridge(m) => m.input_dim(),
            CalibrationModel::Mlp(m) => m.input_dim(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RegressorSpec {
    Ridge { lambda: f64 },
    Mlp(MlpConfig),
}

impl RegressorSpec {
    pub fn fit(
        &self,
        samples: &[(Vec<f64>, (f64, f64))],
        rep_seed: u64,
    ) -> Result<CalibrationModel, CalibError> {
        match self {
            RegressorSpec::Ridge { lambda } => Ok(CalibrationModel::Ridge(fit_ridge(samples, *lambda)?)),
            RegressorSpec::Mlp(cfg) => {
                let mut c = *cfg;
                c.seed = derive_seed(cfg.seed, "mlp_rep", rep_seed);
                Ok(CalibrationModel::Mlp(fit_mlp(samples, &c)?))
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Protocols
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    PerPerson,
    PersonAgnostic,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub protocol: Protocol,
    /// Calibration-set sizes; the usual grids are {17,30,40,50,60}
    /// per-person and {100,200} person-agnostic.
    pub k_values: Vec<usize>,
    pub n_repeats: usize,
    pub seed: u64,
    pub regressor: RegressorSpec,
}

impl ProtocolConfig {
    pub fn per_person(seed: u64) -> Self {
        ProtocolConfig {
            protocol: Protocol::PerPerson,
            k_values: vec![17, 30, 40, 50, 60],
            n_repeats: 10,
            seed,
            regressor: RegressorSpec::Ridge { lambda: 1e-3 },
        }
    }

    pub fn person_agnostic(seed: u64) -> Self {
        ProtocolConfig {
            protocol: Protocol::PersonAgnostic,
            k_values: vec![100, 200],
            n_repeats: 10,
            seed,
            regressor: RegressorSpec::Mlp(MlpConfig::default()),
        }
    }
}

/// One calibration sample: an embedding (monocular or binocular
/// concatenation) plus its gaze label.
#[derive(Debug, Clone)]
pub struct ProtocolSample {
    pub subject_id: String,
    pub embedding: Vec<f64>,
    pub label: (f64, f64),
}

/// Concatenate left/right embeddings into a binocular calibrator input.
pub fn binocular_embedding(left: &[f64], right: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(left.len() + right.len());
    v.extend_from_slice(left);
    v.extend_from_slice(right);
    v
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubjectReport {
    pub subject_id: String,
    pub mean_error_deg: f64,
    pub n_eval: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KReport {
    pub k: usize,
    pub mean_error_deg: f64,
    pub per_subject: Vec<SubjectReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub protocol: Protocol,
    pub n_repeats: usize,
    pub per_k: Vec<KReport>,
    /// Mean over the K grid (the headline number).
    pub mean_error_deg: f64,
    /// Subjects skipped for lacking K+1 samples: (subject, K, available).
    pub skipped: Vec<(String, usize, usize)>,
    /// Number of calibration/evaluation splits checked disjoint.
    pub splits_verified: usize,
}

impl ProtocolReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "protocol: {:?}   repeats: {}\n",
            self.protocol, self.n_repeats
        ));
        s.push_str("  K    mean error [deg]\n");
        for k in &self.per_k {
            s.push_str(&format!("  {:<4} {:.4}\n", k.k, k.mean_error_deg));
        }
        s.push_str(&format!("  grid-averaged: {:.4}\n", self.mean_error_deg));
        if !self.skipped.is_empty() {
            for (sub, k, have) in &self.skipped {
                s.push_str(&format!(
                    "  skipped {sub} at K={k}: only {have} fixation samples\n"
                ));
            }
        }
        s
    }
}

/// Run a calibration protocol over fixation samples. Calibration and
/// evaluation sets are verified disjoint on every split.
pub fn run_protocol(
    samples: &[ProtocolSample],
    config: &ProtocolConfig,
) -> Result<ProtocolReport, CalibError> {
    let mut per_k = Vec::new();
    let mut skipped = Vec::new();
    let mut splits_verified = 0usize;
    match config.protocol {
        Protocol::PerPerson => {
            let mut by_subject: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            for (i, s) in samples.iter().enumerate() {
                by_subject.entry(&s.subject_id).or_default().push(i);
            }
            for &k in &config.k_values {
                let mut subject_reports = Vec::new();
                for (subject, idxs) in &by_subject {
                    if idxs.len() < k + 1 {
                        skipped.push((subject.to_string(), k, idxs.len()));
                        continue;
                    }
                    let mut err_sum = 0.0;
                    let mut err_n = 0usize;
                    for rep in 0..config.n_repeats {
                        let seed = derive_seed(config.seed, subject, k as u64);
                        let (calib, eval) =
                            crate::data::disjoint_split(idxs.len(), k, seed, rep as u64);
                        verify_disjoint(&calib, &eval);
                        splits_verified += 1;
                        let train: Vec<(Vec<f64>, (f64, f64))> = calib
                            .iter()
                            .map(|&j| (samples[idxs[j]].embedding.clone(), samples[idxs[j]].label))
                            .collect();
                        let model = config.regressor.fit(&train, rep as u64)?;
                        for &j in &eval {
                            let s = &samples[idxs[j]];
                            err_sum += angular_error(model.predict(&s.embedding), s.label);
                            err_n += 1;
                        }
                    }
                    subject_reports.push(SubjectReport {
                        subject_id: subject.to_string(),
                        mean_error_deg: err_sum / err_n.max(1) as f64,
                        n_eval: err_n,
                    });
                }
                let mean = if subject_reports.is_empty() {
                    f64::NAN
                } else {
                    subject_reports.iter().map(|r| r.mean_error_deg).sum::<f64>()
                        / subject_reports.len() as f64
                };
                per_k.push(KReport {
                    k,
                    mean_error_deg: mean,
                    per_subject: subject_reports,
                });
            }
        }
        Protocol::PersonAgnostic => {
            for &k in &config.k_values {
                if samples.len() < k + 1 {
                    return Err(CalibError::KTooLarge { k, pool: samples.len() });
                }
                let mut per_subject_acc: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
                for rep in 0..config.n_repeats {
                    let (calib, eval) =
                        crate::data::disjoint_split(samples.len(), k, derive_seed(config.seed, "pooled", k as u64), rep as u64);
                    verify_disjoint(&calib, &eval);
                    splits_verified += 1;
                    let train: Vec<(Vec<f64>, (f64, f64))> = calib
                        .iter()
                        .map(|&j| (samples[j].embedding.clone(), samples[j].label))
                        .collect();
                    let model = config.regressor.fit(&train, rep as u64)?;
                    for &j in &eval {
                        let s = &samples[j];
                        let e = angular_error(model.predict(&s.embedding), s.label);
                        let acc = per_subject_acc.entry(&s.subject_id).or_insert((0.0, 0));
                        acc.0 += e;
                        acc.1 += 1;
                    }
                }
                let per_subject: Vec<SubjectReport> = per_subject_acc
                    .into_iter()
                    .map(|(sub, (s, n))| SubjectReport {
                        subject_id: sub.to_string(),
                        mean_error_deg: s / n as f64,
                        n_eval: n,
                    })
                    .collect();
                let total_n: usize = per_subject.iter().map(|r| r.n_eval).sum();
                let mean = per_subject
                    .iter()
                    .map(|r| r.mean_error_deg * r.n_eval as f64)
                    .sum::<f64>()
                    / total_n.max(1) as f64;
                per_k.push(KReport {
                    k,
                    mean_error_deg: mean,
                    per_subject,
                });
            }
        }
    }
    let valid: Vec<f64> = per_k
        .iter()
        .map(|r| r.mean_error_deg)
        .filter(|v| v.is_finite())
        .collect();
    let mean = valid.iter().sum::<f64>() / valid.len().max(1) as f64;
    Ok(ProtocolReport {
        protocol: config.protocol,
        n_repeats: config.n_repeats,
        per_k,
        mean_error_deg: mean,
        skipped,
        splits_verified,
    })
}

fn verify_disjoint(calib: &[usize], eval: &[usize]) {
    let mut seen: Vec<bool> = vec![false; calib.len() + eval.len()];
    for &c in calib.iter().chain(eval.iter()) {
        assert!(!seen[c], "calibration/evaluation overlap at index {c}");
        seen[c] = true;
    }
}

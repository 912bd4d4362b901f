//! Command implementations. Each command merges (config file, CLI flags)
//! into an effective config, writes one run manifest into its output
//! directory, and produces its artifacts there. `replay` re-executes a
//! command from a stored manifest.

use crate::checkpoint::{self, CheckpointConfig};
use crate::dataset::{write_synth_dataset, LoadedDataset};
use crate::expconfig::*;
use crate::imageio;
use crate::runmeta::{prepare_out_dir, RunManifest};
use crate::trainer::{self, EvalSpec, TrainOutcome};
use anyhow::{bail, Context, Result};
use gazeshift_core::analysis;
use gazeshift_core::baselines::{SiameseConfig, SiameseModel, VaeConfig, VaeModel};
use gazeshift_core::calibration::{
    run_protocol, MlpConfig, Protocol, ProtocolConfig, RegressorSpec,
};
use gazeshift_core::model::RedirectionModel;
use gazeshift_core::profile::{profile_gaze_encoder, profile_model};
use gazeshift_core::rng::derive_seed;
use gazeshift_core::syntheye;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

#[derive(clap::Args, Debug, Clone)]
pub struct SynthArgs {
    /// Output dataset directory
    #[arg(long)]
    pub out: PathBuf,
    /// TOML experiment config (flags override file values)
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub subjects: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    /// Overwrite a non-empty output directory
    #[arg(long)]
    pub force: bool,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SynthEffective {
    pub synth: SynthSection,
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let mut cfg = ExpConfig::load_opt(args.config.as_deref())?.synth;
    if let Some(v) = args.subjects {
        cfg.subjects = v;
    }
    if let Some(v) = args.frames {
        cfg.frames = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.height {
        cfg.height = v;
    }
    if let Some(v) = args.width {
        cfg.width = v;
    }
    if let Some(v) = args.noise_sigma {
        cfg.noise_sigma = v;
    }
    run_synth(&cfg, &args.out, args.force, args.quiet)
}

pub fn run_synth(cfg: &SynthSection, out: &Path, force: bool, quiet: bool) -> Result<()> {
    prepare_out_dir(out, force)?;
    let manifest = RunManifest::new(
        "synth",
        serde_json::to_value(SynthEffective { synth: cfg.clone() })?,
        cfg.seed,
        out,
    );
    manifest.write(out)?;
    let frames = syntheye::sample_dataset(cfg.subjects, cfg.frames, cfg.seed, &cfg.sampler_config())?;
    let n = write_synth_dataset(out, &frames)?;
    if !quiet {
        println!(
            "wrote {n} frames ({} subjects x {} timepoints) to {}",
            cfg.subjects,
            cfg.frames,
            out.display()
        );
    }
    manifest.finish(out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// train / finetune
// ---------------------------------------------------------------------------

#[derive(clap::Args, Debug, Clone)]
pub struct TrainArgs {
    /// Dataset directory (manifest.jsonl + images)
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub pairs_per_epoch: Option<usize>,
    /// mse | gaze_focused
    #[arg(long)]
    pub loss: Option<String>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// near_eye | remote_temporal | remote_headpose | remote_flip
    #[arg(long)]
    pub pair_mode: Option<String>,
    #[arg(long)]
    pub window: Option<i64>,
    /// Ablation row 1-4 (4 = full method)
    #[arg(long)]
    pub row: Option<usize>,
    /// synth | vr | remote
    #[arg(long)]
    pub variant: Option<String>,
    /// gazeshift | vae | siamese
    #[arg(long)]
    pub model_kind: Option<String>,
    #[arg(long)]
    pub force: bool,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TrainEffective {
    pub data: String,
    pub model: ModelSection,
    pub train: TrainSection,
}

fn merge_train(args: &TrainArgs) -> Result<(ModelSection, TrainSection)> {
    let cfg = ExpConfig::load_opt(args.config.as_deref())?;
    let mut model = cfg.model;
    let mut train = cfg.train;
    if let Some(v) = &args.variant {
        model.variant = v.clone();
    }
    if let Some(v) = args.epochs {
        train.epochs = v;
    }
    if let Some(v) = args.batch_size {
        train.batch_size = v;
    }
    if let Some(v) = args.lr {
        train.lr = v;
    }
    if let Some(v) = args.weight_decay {
        train.weight_decay = v;
    }
    if let Some(v) = args.seed {
        train.seed = v;
    }
    if let Some(v) = args.pairs_per_epoch {
        train.pairs_per_epoch = v;
    }
    if let Some(v) = &args.loss {
        train.loss = v.clone();
    }
    if let Some(v) = args.gamma {
        train.gamma = v;
    }
    if let Some(v) = &args.pair_mode {
        train.pair_mode = v.clone();
    }
    if let Some(v) = args.window {
        train.window = v;
    }
    if let Some(v) = args.row {
        train.row = v;
    }
    if let Some(v) = &args.model_kind {
        train.model_kind = v.clone();
    }
    Ok((model, train))
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let (model, train) = merge_train(args)?;
    run_train(&args.data, &model, &train, &args.out, args.force, args.quiet)
}

fn write_metrics(out: &Path, outcome: &TrainOutcome) -> Result<()> {
    let mut text = String::new();
    for m in &outcome.metrics {
        text.push_str(&serde_json::to_string(m)?);
        text.push('\n');
    }
    std::fs::write(out.join("metrics.jsonl"), text)?;
    if !outcome.entropy_log.is_empty() {
        let mut text = String::new();
        for e in &outcome.entropy_log {
            text.push_str(&serde_json::to_string(e)?);
            text.push('\n');
        }
        std::fs::write(out.join("entropy.jsonl"), text)?;
    }
    Ok(())
}

pub fn run_train(
    data_dir: &Path,
    model: &ModelSection,
    train: &TrainSection,
    out: &Path,
    force: bool,
    quiet: bool,
) -> Result<()> {
    prepare_out_dir(out, force)?;
    let manifest = RunManifest::new(
        "train",
        serde_json::to_value(TrainEffective {
            data: data_dir.display().to_string(),
            model: model.clone(),
            train: train.clone(),
        })?,
        train.seed,
        out,
    );
    manifest.write(out)?;
    let data = LoadedDataset::load(data_dir)
        .with_context(|| format!("loading dataset {}", data_dir.display()))?;
    let tc = train.train_config()?;
    let ckpt = out.join("checkpoint.ckpt");
    let outcome = match train.model_kind.as_str() {
        "gazeshift" => {
            let mcfg = model.model_config((data.height, data.width))?;
            let mut m = RedirectionModel::<f32>::new(
                mcfg,
                tc.flags,
                derive_seed(train.seed, "model_init", 0),
            )?;
            let outcome = trainer::train(&mut m, &data, &tc, !quiet)?;
            checkpoint::save_redirection(&ckpt, &m)?;
            outcome
        }
        "vae" => {
            let mcfg = model.model_config((data.height, data.width))?;
            let vcfg = VaeConfig::matching(&mcfg);
            let mut m = VaeModel::<f32>::new(vcfg, derive_seed(train.seed, "model_init", 0));
            let outcome = trainer::train_vae(&mut m, &data, &tc, !quiet)?;
            checkpoint::save_vae(&ckpt, &m)?;
            outcome
        }
        "siamese" => {
            let mcfg = model.model_config((data.height, data.width))?;
            let scfg = SiameseConfig::matching(&mcfg);
            let sup = trainer::SupervisedConfig {
                epochs: train.epochs,
                batch_size: train.batch_size,
                lr: train.lr,
                weight_decay: train.weight_decay,
                seed: train.seed,
                samples_per_epoch: train.pairs_per_epoch,
            };
            let mut m =
                SiameseModel::<f32>::new(scfg, derive_seed(train.seed, "model_init", 0));
            let outcome = trainer::train_siamese(&mut m, &data, &sup, !quiet)?;
            checkpoint::save_siamese(&ckpt, &m)?;
            outcome
        }
        other => bail!("unknown model_kind {other} (expected gazeshift, vae, or siamese)"),
    };
    write_metrics(out, &outcome)?;
    if !quiet {
        if let Some(last) = outcome.metrics.last() {
            println!(
                "trained {} epochs, final mean loss {:.6}; checkpoint at {}",
                outcome.metrics.len(),
                last.mean_loss,
                ckpt.display()
            );
        }
    }
    manifest.finish(out)?;
    Ok(())
}

#[derive(clap::Args, Debug, Clone)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub pairs_per_epoch: Option<usize>,
    #[arg(long)]
    pub pair_mode: Option<String>,
    #[arg(long)]
    pub window: Option<i64>,
    #[arg(long)]
    pub force: bool,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FinetuneEffective {
    pub data: String,
    pub checkpoint: String,
    pub train: TrainSection,
}

pub fn cmd_finetune(args: &FinetuneArgs) -> Result<()> {
    let mut train = ExpConfig::load_opt(args.config.as_deref())?.train;
    if let Some(v) = args.epochs {
        train.epochs = v;
    }
    if let Some(v) = args.seed {
        train.seed = v;
    }
    if let Some(v) = args.pairs_per_epoch {
        train.pairs_per_epoch = v;
    }
    if let Some(v) = &args.pair_mode {
        train.pair_mode = v.clone();
    }
    if let Some(v) = args.window {
        train.window = v;
    }
    run_finetune(&args.data, &args.checkpoint, &train, &args.out, args.force, args.quiet)
}

pub fn run_finetune(
    data_dir: &Path,
    ckpt_path: &Path,
    train: &TrainSection,
    out: &Path,
    force: bool,
    quiet: bool,
) -> Result<()> {
    prepare_out_dir(out, force)?;
    let manifest = RunManifest::new(
        "finetune",
        serde_json::to_value(FinetuneEffective {
            data: data_dir.display().to_string(),
            checkpoint: ckpt_path.display().to_string(),
            train: train.clone(),
        })?,
        train.seed,
        out,
    );
    manifest.write(out)?;
    let data = LoadedDataset::load(data_dir)?;
    let mut model = checkpoint::load_redirection(ckpt_path)?;
    let mut tc = train.train_config()?;
    tc.flags = model.flags();
    if matches!(model, RedirectionModel::Full(_)) {
        tc.flags.gaze_focused_loss = train.loss == "gaze_focused";
    }
    let outcome = trainer::finetune(&mut model, &data, &tc, !quiet)?;
    checkpoint::save_redirection(&out.join("checkpoint.ckpt"), &model)?;
    write_metrics(out, &outcome)?;
    manifest.finish(out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// calibrate-eval
// ---------------------------------------------------------------------------

#[derive(clap::Args, Debug, Clone)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// per_person | person_agnostic
    #[arg(long)]
    pub protocol: Option<String>,
    /// Calibration-set sizes, comma separated
    #[arg(long, value_delimiter = ',')]
    pub k: Option<Vec<usize>>,
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// ridge | mlp
    #[arg(long)]
    pub regressor: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Use per-eye samples instead of binocular concatenation
    #[arg(long)]
    pub monocular: bool,
    #[arg(long)]
    pub force: bool,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CalibrateEffective {
    pub data: String,
    pub checkpoint: String,
    pub calibrate: CalibrateSection,
}

pub fn cmd_calibrate_eval(args: &CalibrateArgs) -> Result<()> {
    let mut cal = ExpConfig::load_opt(args.config.as_deref())?.calibrate;
    if let Some(v) = &args.protocol {
        cal.protocol = v.clone();
    }
    if let Some(v) = &args.k {
        cal.k = v.clone();
    }
    if let Some(v) = args.repeats {
        cal.repeats = v;
    }
    if let Some(v) = args.lambda {
        cal.lambda = v;
    }
    if let Some(v) = &args.regressor {
        cal.regressor = v.clone();
    }
    if let Some(v) = args.seed {
        cal.seed = v;
    }
    if args.monocular {
        cal.binocular = false;
    }
    run_calibrate_eval(&args.data, &args.checkpoint, &cal, &args.out, args.force, args.quiet)
}

pub fn run_calibrate_eval(
    data_dir: &Path,
    ckpt_path: &Path,
    cal: &CalibrateSection,
    out: &Path,
    force: bool,
    quiet: bool,
) -> Result<()> {
    prepare_out_dir(out, force)?;
    let manifest = RunManifest::new(
        "calibrate-eval",
        serde_json::to_value(CalibrateEffective {
            data: data_dir.display().to_string(),
            checkpoint: ckpt_path.display().to_string(),
            calibrate: cal.clone(),
        })?,
        cal.seed,
        out,
    );
    manifest.write(out)?;
    let data = LoadedDataset::load(data_dir)?;
    let (samples, warnings) = match checkpoint::peek_config(ckpt_path)? {
        CheckpointConfig::Redirection { .. } => {
            let mut model = checkpoint::load_redirection(ckpt_path)?;
            let embs = trainer::gaze_embeddings(&mut model, &data, true, 64)?;
            if cal.binocular {
                trainer::binocular_samples(&data, &embs)
            } else {
                trainer::monocular_samples(&data, &embs)
            }
        }
        CheckpointConfig::Vae(_) => {
            let mut model = checkpoint::load_vae(ckpt_path)?;
            let embs = trainer::vae_embeddings(&mut model, &data, true, 64);
            if cal.binocular {
                trainer::binocular_samples(&data, &embs)
            } else {
                trainer::monocular_samples(&data, &embs)
            }
        }
        CheckpointConfig::Siamese(_) => {
            let mut model = checkpoint::load_siamese(ckpt_path)?;
            (trainer::siamese_protocol_samples(&mut model, &data), Vec::new())
        }
    };
    if samples.is_empty() {
        bail!("no calibration samples could be extracted (dataset lacks fixation intervals?)");
    }
    let protocol = match cal.protocol.as_str() {
        "per_person" => Protocol::PerPerson,
        "person_agnostic" => Protocol::PersonAgnostic,
        other => bail!("unknown protocol {other}"),
    };
    let regressor = match cal.regressor.as_str() {
        "ridge" => RegressorSpec::Ridge { lambda: cal.lambda },
        "mlp" => RegressorSpec::Mlp(MlpConfig {
            seed: cal.seed,
            ..Default::default()
        }),
        other => bail!("unknown regressor {other}"),
    };
    let config = ProtocolConfig {
        protocol,
        k_values: cal.k.clone(),
        n_repeats: cal.repeats,
        seed: cal.seed,
        regressor,
    };
    let report = run_protocol(&samples, &config)?;
    std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    std::fs::write(out.join("report.txt"), report.to_table())?;
    if !quiet {
        print!("{}", report.to_table());
        for w in warnings.iter().take(5) {
            eprintln!("warning: {w}");
        }
        if warnings.len() > 5 {
            eprintln!("({} more warnings)", warnings.len() - 5);
        }
    }
    manifest.finish(out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// ablate / gamma sweep
// ---------------------------------------------------------------------------

#[derive(clap::Args, Debug, Clone)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training seeds, comma separated
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub pairs_per_epoch: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub force: bool,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AblateEffective {
    pub data: String,
    pub model: ModelSection,
    pub train: TrainSection,
    pub ablate: AblateSection,
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let cfg = ExpConfig::load_opt(args.config.as_deref())?;
    let model = cfg.model;
    let mut train = cfg.train;
    let mut ab = cfg.ablate;
    if let Some(v) = &args.seeds {
        ab.seeds = v.clone();
    }
    if let Some(v) = args.epochs {
        train.epochs = v;
    }
    if let Some(v) = args.pairs_per_epoch {
        train.pairs_per_epoch = v;
    }
    if let Some(v) = args.k {
        ab.k = v;
    }
    run_ablate(&args.data, &model, &train, &ab, &args.out, args.force, args.quiet)
}

pub fn run_ablate(
    data_dir: &Path,
    model: &ModelSection,
    train: &TrainSection,
    ab: &AblateSection,
    out: &Path,
    force: bool,
    quiet: bool,
) -> Result<()> {
    prepare_out_dir(out, force)?;
    let manifest = RunManifest::new(
        "ablate",
        serde_json::to_value(AblateEffective {
            data: data_dir.display().to_string(),
            model: model.clone(),
            train: train.clone(),
            ablate: ab.clone(),
        })?,
        train.seed,
        out,
    );
    manifest.write(out)?;
    let data = LoadedDataset::load(data_dir)?;
    let mcfg = model.model_config((data.height, data.width))?;
    let tc = train.train_config()?;
    let eval = EvalSpec {
        k_values: vec![ab.k],
        n_repeats: ab.repeats,
        lambda: ab.lambda,
        seed: train.seed,
        binocular: true,
    };
    let report = trainer::run_ablation_lattice(&mcfg, &data, &tc, &ab.seeds, &eval, !quiet)?;
    std::fs::write(out.join("ablation.json"), serde_json::to_string_pretty(&report)?)?;
    std::fs::write(out.join("ablation.txt"), report.to_table())?;
    if !quiet {
        print!("{}", report.to_table());
    }
    manifest.finish(out)?;
    Ok(())
}

#[derive(clap::Args, Debug, Clone)]
pub struct GammaArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Gamma values, comma separated
    #[arg(long, value_delimiter = ',')]
    pub gammas: Option<Vec<f64>>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub pairs_per_epoch: Option<usize>,
    #[arg(long)]
    pub force: bool,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GammaEffective {
    pub data: String,
    pub model: ModelSection,
    pub train: TrainSection,
    pub gamma: GammaSection,
}

pub fn cmd_gamma_sweep(args: &GammaArgs) -> Result<()> {
    let cfg = ExpConfig::load_opt(args.config.as_deref())?;
    let model = cfg.model;
    let mut train = cfg.train;
    let mut gm = cfg.gamma;
    if let Some(v) = &args.gammas {
        gm.values = v.clone();
    }
    if let Some(v) = args.epochs {
        train.epochs = v;
    }
    if let Some(v) = args.pairs_per_epoch {
        train.pairs_per_epoch = v;
    }
    run_gamma_sweep(&args.data, &model, &train, &gm, &args.out, args.force, args.quiet)
}

pub fn run_gamma_sweep(
    data_dir: &Path,
    model: &ModelSection,
    train: &TrainSection,
    gm: &GammaSection,
    out: &Path,
    force: bool,
    quiet: bool,
) -> Result<()> {
    prepare_out_dir(out, force)?;
    let manifest = RunManifest::new(
        "gamma-sweep",
        serde_json::to_value(GammaEffective {
            data: data_dir.display().to_string(),
            model: model.clone(),
            train: train.clone(),
            gamma: gm.clone(),
        })?,
        train.seed,
        out,
    );
    manifest.write(out)?;
    let data = LoadedDataset::load(data_dir)?;
    let mcfg = model.model_config((data.height, data.width))?;
    let tc = train.train_config()?;
    let eval = EvalSpec {
        k_values: vec![gm.k],
        n_repeats: gm.repeats,
        lambda: gm.lambda,
        seed: train.seed,
        binocular: true,
    };
    let report = trainer::gamma_sweep(&mcfg, &data, &tc, &gm.values, &eval, !quiet)?;
    std::fs::write(out.join("gamma_sweep.json"), serde_json::to_string_pretty(&report)?)?;
    std::fs::write(out.join("gamma_sweep.txt"), report.to_table())?;
    if !quiet {
        print!("{}", report.to_table());
    }
    manifest.finish(out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// analyze
// ---------------------------------------------------------------------------

#[derive(clap::Args, Debug, Clone)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of frames to export attention maps for
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub n_appearance: Option<usize>,
    #[arg(long)]
    pub n_gaze: Option<usize>,
    #[arg(long)]
    pub interp_steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub force: bool,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AnalyzeEffective {
    pub data: String,
    pub checkpoint: String,
    pub analyze: AnalyzeSection,
}

pub fn cmd_analyze(args: &AnalyzeArgs) -> Result<()> {
    let mut an = ExpConfig::load_opt(args.config.as_deref())?.analyze;
    if let Some(v) = args.frames {
        an.frames = v;
    }
    if let Some(v) = args.n_appearance {
        an.n_appearance = v;
    }
    if let Some(v) = args.n_gaze {
        an.n_gaze = v;
    }
    if let Some(v) = args.interp_steps {
        an.interp_steps = v;
    }
    if let Some(v) = args.seed {
        an.seed = v;
    }
    run_analyze(&args.data, &args.checkpoint, &an, &args.out, args.force, args.quiet)
}

pub fn run_analyze(
    data_dir: &Path,
    ckpt_path: &Path,
    an: &AnalyzeSection,
    out: &Path,
    force: bool,
    quiet: bool,
) -> Result<()> {
    prepare_out_dir(out, force)?;
    let manifest = RunManifest::new(
        "analyze",
        serde_json::to_value(AnalyzeEffective {
            data: data_dir.display().to_string(),
            checkpoint: ckpt_path.display().to_string(),
            analyze: an.clone(),
        })?,
        an.seed,
        out,
    );
    manifest.write(out)?;
    let data = LoadedDataset::load(data_dir)?;
    let model = checkpoint::load_redirection(ckpt_path)?;
    let RedirectionModel::Full(mut model) = model else {
        bail!("analyze requires a full (attention) model checkpoint");
    };

    // profiles
    let full = profile_model(&model.cfg)?;
    let gaze = profile_gaze_encoder(
        &model.cfg.gaze,
        model.cfg.c_g,
        (model.cfg.input_height, model.cfg.input_width),
    );
    let profile_txt = format!(
        "== gaze encoder ==\n{}\n== full model ==\n{}",
        gaze.to_table(),
        full.to_table()
    );
    std::fs::write(out.join("profile.txt"), &profile_txt)?;
    std::fs::write(
        out.join("profile.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "gaze_encoder": {
                "params": gaze.params(),
                "macs": gaze.macs(),
                "flops_two_per_mac": gaze.flops_two_per_mac(),
            },
            "full_model": {
                "params": full.params(),
                "stored_elements": full.stored_elements(),
                "macs": full.macs(),
                "flops_two_per_mac": full.flops_two_per_mac(),
            },
        }))?,
    )?;

    // attention composites for the first N fixation frames
    let attn_dir = out.join("attention");
    std::fs::create_dir_all(&attn_dir)?;
    let picks: Vec<usize> = (0..data.len())
        .filter(|&i| data.records[i].fixation)
        .take(an.frames)
        .collect();
    for &i in &picks {
        let img = data.image_f32(i);
        let attn = analysis::source_attention(&mut model, &img)?;
        let heat = analysis::attention_heatmap(&attn, data.height, data.width);
        let composite = analysis::compose_side_by_side(&img, &heat);
        imageio::write_gray_png_f32(&attn_dir.join(format!("frame{i:05}.png")), &composite)?;
    }

    // frames-based disentanglement: photometric jitters of one frame vs
    // same-eye frames at distinct gaze
    let report = disentangle_from_dataset(&mut model, &data, an)?;
    std::fs::write(
        out.join("disentanglement.json"),
        serde_json::to_string_pretty(&report)?,
    )?;

    // latent interpolation strip between two distant-gaze frames
    if let Some((a, b)) = distant_gaze_pair(&data) {
        let xa = data.batch(&[(a, false)]);
        let xb = data.batch(&[(b, false)]);
        let ga = model.encode_gaze(&xa)?;
        let gb = model.encode_gaze(&xb)?;
        let seq = model.interpolate_gaze(&xa, &ga, &gb, an.interp_steps.max(2))?;
        let strip = compose_strip(&seq, data.height, data.width);
        imageio::write_gray_png_f32(&out.join("interpolation.png"), &strip)?;
    }

    // embedding dump for projection tools
    let embs = trainer::gaze_embeddings(
        &mut RedirectionModel::Full(model),
        &data,
        true,
        64,
    )?;
    let dump = analysis::EmbeddingDump {
        subject_ids: data
            .records
            .iter()
            .enumerate()
            .filter(|(i, _)| embs[*i].is_some())
            .map(|(_, r)| r.subject_id.clone())
            .collect(),
        labels: data
            .records
            .iter()
            .enumerate()
            .filter(|(i, _)| embs[*i].is_some())
            .map(|(_, r)| r.gaze_label())
            .collect(),
        embeddings: embs.into_iter().flatten().collect(),
    };
    std::fs::write(out.join("embeddings.json"), serde_json::to_string(&dump)?)?;
    if !quiet {
        println!(
            "analyze: {} attention maps, disentanglement report, interpolation strip, {} embeddings -> {}",
            picks.len(),
            dump.embeddings.len(),
            out.display()
        );
    }
    manifest.finish(out)?;
    Ok(())
}

fn disentangle_from_dataset(
    model: &mut gazeshift_core::model::GazeShiftModel<f32>,
    data: &LoadedDataset,
    an: &AnalyzeSection,
) -> Result<analysis::DisentanglementReport> {
    use gazeshift_core::data::Eye;
    use std::collections::BTreeMap;
    // the (subject, session, eye) stream with the most labeled frames
    let mut counts: BTreeMap<(&str, &str, Eye), Vec<usize>> = BTreeMap::new();
    for (i, r) in data.records.iter().enumerate() {
        if r.eye == Eye::Left && r.gaze_label().is_some() {
            counts
                .entry((&r.subject_id, &r.session_id, r.eye))
                .or_default()
                .push(i);
        }
    }
    let (_, stream_frames) = counts
        .into_iter()
        .max_by_key(|(_, v)| v.len())
        .context("no labeled left-eye frames for the disentanglement probe")?;
    let base_idx = stream_frames[0];
    let base_img = data.image_f32(base_idx);
    let mut rng = gazeshift_core::rng::stream(an.seed, "analyze_appearance", 0);
    use rand::Rng;
    let mut gaze_under_app = Vec::new();
    let mut app_under_app = Vec::new();
    for _ in 0..an.n_appearance {
        let gain = rng.gen_range(0.7..1.3);
        let gamma = rng.gen_range(0.8..1.25);
        let img = analysis::photometric_perturb(&base_img, gain, gamma);
        let (g, a) = embed_one(model, &img)?;
        gaze_under_app.push(g);
        app_under_app.push(a);
    }
    // distinct-gaze frames of the same stream: sort by label, stride evenly
    let mut by_label: Vec<usize> = stream_frames.clone();
    by_label.sort_by(|&a, &b| {
        let la = data.records[a].gaze_label().unwrap();
        let lb = data.records[b].gaze_label().unwrap();
        la.partial_cmp(&lb).unwrap()
    });
    by_label.dedup_by_key(|i| {
        let l = data.records[*i].gaze_label().unwrap();
        (l.0.to_bits(), l.1.to_bits())
    });
    if by_label.len() < an.n_gaze {
        bail!(
            "only {} distinct-gaze frames available, {} requested",
            by_label.len(),
            an.n_gaze
        );
    }
    let mut gaze_under_gaze = Vec::new();
    let mut app_under_gaze = Vec::new();
    for k in 0..an.n_gaze {
        let idx = by_label[k * by_label.len() / an.n_gaze];
        let (g, a) = embed_one(model, &data.image_f32(idx))?;
        gaze_under_gaze.push(g);
        app_under_gaze.push(a);
    }
    Ok(analysis::disentanglement_from_embeddings(
        &gaze_under_app,
        &app_under_app,
        &gaze_under_gaze,
        &app_under_gaze,
    )?)
}

fn embed_one(
    model: &mut gazeshift_core::model::GazeShiftModel<f32>,
    img: &gazeshift_core::syntheye::GrayImage,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let x = gazeshift_core::model::normalize_batch::<f32>(&[img]);
    let g = model.encode_gaze(&x)?;
    let a = model.encode_appearance(&x)?;
    let gv: Vec<f64> = g.iter().map(|&v| v as f64).collect();
    let mut av: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let n = av.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 0.0 {
        for v in av.iter_mut() {
            *v /= n;
        }
    }
    Ok((gv, av))
}

fn distant_gaze_pair(data: &LoadedDataset) -> Option<(usize, usize)> {
    use gazeshift_core::data::Eye;
    let labeled: Vec<usize> = (0..data.len())
        .filter(|&i| data.records[i].eye == Eye::Left && data.records[i].gaze_label().is_some())
        .collect();
    let mut best = None;
    let mut best_d = -1.0;
    for (ii, &a) in labeled.iter().enumerate().take(200) {
        for &b in labeled.iter().skip(ii + 1).take(200) {
            if data.records[a].subject_id != data.records[b].subject_id {
                continue;
            }
            let la = data.records[a].gaze_label().unwrap();
            let lb = data.records[b].gaze_label().unwrap();
            let d = (la.0 - lb.0).powi(2) + (la.1 - lb.1).powi(2);
            if d > best_d {
                best_d = d;
                best = Some((a, b));
            }
        }
    }
    best
}

fn compose_strip(
    frames: &[ndarray::Array4<f32>],
    h: usize,
    w: usize,
) -> gazeshift_core::syntheye::GrayImage {
    let gap = 2;
    let total_w = frames.len() * w + (frames.len() - 1) * gap;
    let mut out = ndarray::Array2::<f32>::from_elem((h, total_w), 0.5);
    for (k, f) in frames.iter().enumerate() {
        let x0 = k * (w + gap);
        for y in 0..h {
            for x in 0..w {
                out[[y, x0 + x]] = (f[[0, 0, y, x]] + 1.0) / 2.0;
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// profile
// ---------------------------------------------------------------------------

#[derive(clap::Args, Debug, Clone)]
pub struct ProfileArgs {
    /// synth | vr | remote (default: all three)
    #[arg(long)]
    pub variant: Option<String>,
    /// Input size for the synth variant
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

pub fn cmd_profile(args: &ProfileArgs) -> Result<()> {
    let variants: Vec<String> = match &args.variant {
        Some(v) => vec![v.clone()],
        None => vec!["vr".into(), "remote".into(), "synth".into()],
    };
    let mut text = String::new();
    for v in &variants {
        let section = ModelSection {
            variant: v.clone(),
            c_g: None,
        };
        let size = args.size.unwrap_or(96);
        let cfg = section.model_config((size, size))?;
        let gaze = profile_gaze_encoder(&cfg.gaze, cfg.c_g, (cfg.input_height, cfg.input_width));
        let full = profile_model(&cfg)?;
        text.push_str(&format!(
            "===== {v} (input {}x{}) =====\n-- gaze encoder --\n{}-- full model --\n{}\n",
            cfg.input_height,
            cfg.input_width,
            gaze.to_table(),
            full.to_table()
        ));
    }
    print!("{text}");
    if let Some(out) = &args.out {
        prepare_out_dir(out, args.force)?;
        std::fs::write(out.join("profile.txt"), &text)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// replay
// ---------------------------------------------------------------------------

#[derive(clap::Args, Debug, Clone)]
pub struct ReplayArgs {
    /// Path to a run_manifest.json from a previous run
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
    #[arg(long)]
    pub quiet: bool,
}

/// Re-execute a command from its run manifest into a fresh output
/// directory. In deterministic mode the metrics reproduce bit-identically.
pub fn cmd_replay(args: &ReplayArgs) -> Result<()> {
    let manifest = RunManifest::load(&args.manifest)?;
    let cfgv = manifest.effective_config.clone();
    match manifest.command.as_str() {
        "synth" => {
            let eff: SynthEffective = serde_json::from_value(cfgv)?;
            run_synth(&eff.synth, &args.out, args.force, args.quiet)
        }
        "train" => {
            let eff: TrainEffective = serde_json::from_value(cfgv)?;
            run_train(
                Path::new(&eff.data),
                &eff.model,
                &eff.train,
                &args.out,
                args.force,
                args.quiet,
            )
        }
        "finetune" => {
            let eff: FinetuneEffective = serde_json::from_value(cfgv)?;
            run_finetune(
                Path::new(&eff.data),
                Path::new(&eff.checkpoint),
                &eff.train,
                &args.out,
                args.force,
                args.quiet,
            )
        }
        "calibrate-eval" => {
            let eff: CalibrateEffective = serde_json::from_value(cfgv)?;
            run_calibrate_eval(
                Path::new(&eff.data),
                Path::new(&eff.checkpoint),
                &eff.calibrate,
                &args.out,
                args.force,
                args.quiet,
            )
        }
        "ablate" => {
            let eff: AblateEffective = serde_json::from_value(cfgv)?;
            run_ablate(
                Path::new(&eff.data),
                &eff.model,
                &eff.train,
                &eff.ablate,
                &args.out,
                args.force,
                args.quiet,
            )
        }
        "gamma-sweep" => {
            let eff: GammaEffective = serde_json::from_value(cfgv)?;
            run_gamma_sweep(
                Path::new(&eff.data),
                &eff.model,
                &eff.train,
                &eff.gamma,
                &args.out,
                args.force,
                args.quiet,
            )
        }
        "analyze" => {
            let eff: AnalyzeEffective = serde_json::from_value(cfgv)?;
            run_analyze(
                Path::new(&eff.data),
                Path::new(&eff.checkpoint),
                &eff.analyze,
                &args.out,
                args.force,
                args.quiet,
            )
        }
        other => bail!("cannot replay command {other}"),
    }
}

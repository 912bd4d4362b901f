//! Single-file model checkpoints: a JSON header (kind, config, tensor
//! index, config hash) followed by raw little-endian f32 tensor data.
//! Loading rebuilds the model from the stored config and validates the
//! config hash before restoring tensors by name.

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use gazeshift_core::baselines::{SiameseConfig, SiameseModel, VaeConfig, VaeModel};
use gazeshift_core::model::{AblationFlags, ModelConfig, RedirectionModel};
use gazeshift_core::nn::ParamStore;
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 8] = b"GZSCKPT1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: not a checkpoint file")]
    BadMagic,
    #[error("header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("config hash mismatch: stored {stored}, computed {computed}")]
    HashMismatch { stored: String, computed: String },
    #[error("tensor {0} missing from the rebuilt model")]
    UnknownTensor(String),
    #[error("tensor {name} shape mismatch: stored {stored:?}, model {model:?}")]
    ShapeMismatch {
        name: String,
        stored: Vec<usize>,
        model: Vec<usize>,
    },
    #[error("checkpoint kind {found} where {expected} was required")]
    WrongKind { expected: String, found: String },
    #[error(transparent)]
    Model(#[from] gazeshift_core::model::ModelError),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CheckpointConfig {
    Redirection {
        model: ModelConfig,
        flags: AblationFlags,
    },
    Vae(VaeConfig),
    Siamese(SiameseConfig),
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: CheckpointConfig,
    config_hash: String,
    tensors: Vec<TensorEntry>,
}

fn config_hash(config: &CheckpointConfig) -> String {
    let canonical = serde_json::to_string(config).expect("config json");
    let mut h = Sha256::new();
    h.update(canonical.as_bytes());
    hex_string(&h.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn write_store(
    path: &Path,
    config: CheckpointConfig,
    ps: &ParamStore<f32>,
) -> Result<(), CheckpointError> {
    let mut tensors = Vec::new();
    let mut offset = 0u64;
    for id in ps.ids() {
        let v = ps.value(id);
        tensors.push(TensorEntry {
            name: ps.name(id).to_string(),
            shape: v.shape().to_vec(),
            offset,
            len: v.len() as u64,
        });
        offset += v.len() as u64;
    }
    let header = Header {
        format_version: 1,
        config_hash: config_hash(&config),
        config,
        tensors,
    };
    let header_json = serde_json::to_vec(&header)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_u64::<LittleEndian>(header_json.len() as u64)?;
    f.write_all(&header_json)?;
    for id in ps.ids() {
        for &v in ps.value(id).iter() {
            f.write_f32::<LittleEndian>(v)?;
        }
    }
    f.flush()?;
    Ok(())
}

fn read_header(path: &Path) -> Result<(Header, Vec<f32>), CheckpointError> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let hlen = f.read_u64::<LittleEndian>()? as usize;
    let mut hbuf = vec![0u8; hlen];
    f.read_exact(&mut hbuf)?;
    let header: Header = serde_json::from_slice(&hbuf)?;
    let computed = config_hash(&header.config);
    if computed != header.config_hash {
        return Err(CheckpointError::HashMismatch {
            stored: header.config_hash.clone(),
            computed,
        });
    }
    let total: u64 = header.tensors.iter().map(|t| t.len).sum();
    let mut data = vec![0f32; total as usize];
    for v in data.iter_mut() {
        *v = f.read_f32::<LittleEndian>()?;
    }
    Ok((header, data))
}

fn restore_store(
    header: &Header,
    data: &[f32],
    ps: &mut ParamStore<f32>,
) -> Result<(), CheckpointError> {
    for t in &header.tensors {
        let id = ps
            .find(&t.name)
            .ok_or_else(|| CheckpointError::UnknownTensor(t.name.clone()))?;
        let model_shape = ps.value(id).shape().to_vec();
        if model_shape != t.shape {
            return Err(CheckpointError::ShapeMismatch {
                name: t.name.clone(),
                stored: t.shape.clone(),
                model: model_shape,
            });
        }
        let slice = &data[t.offset as usize..(t.offset + t.len) as usize];
        let arr = ArrayD::from_shape_vec(IxDyn(&t.shape), slice.to_vec()).unwrap();
        ps.set(id, arr);
    }
    Ok(())
}

pub fn save_redirection(path: &Path, model: &RedirectionModel<f32>) -> Result<(), CheckpointError> {
    let mut flags = model.flags();
    // the loss flag is a training-time property; persist it as configured
    flags.gaze_focused_loss = false;
    write_store(
        path,
        CheckpointConfig::Redirection {
            model: model.cfg().clone(),
            flags,
        },
        model.params(),
    )
}

pub fn load_redirection(path: &Path) -> Result<RedirectionModel<f32>, CheckpointError> {
    let (header, data) = read_header(path)?;
    let CheckpointConfig::Redirection { model, flags } = &header.config else {
        return Err(CheckpointError::WrongKind {
            expected: "redirection".into(),
            found: kind_name(&header.config),
        });
    };
    let mut m = RedirectionModel::<f32>::new(model.clone(), *flags, 0)?;
    restore_store(&header, &data, m.params_mut())?;
    Ok(m)
}

pub fn save_vae(path: &Path, model: &VaeModel<f32>) -> Result<(), CheckpointError> {
    write_store(path, CheckpointConfig::Vae(model.cfg.clone()), &model.ps)
}

pub fn load_vae(path: &Path) -> Result<VaeModel<f32>, CheckpointError> {
    let (header, data) = read_header(path)?;
    let CheckpointConfig::Vae(cfg) = &header.config else {
        return Err(CheckpointError::WrongKind {
            expected: "vae".into(),
            found: kind_name(&header.config),
        });
    };
    let mut m = VaeModel::<f32>::new(cfg.clone(), 0);
    restore_store(&header, &data, &mut m.ps)?;
    Ok(m)
}

pub fn save_siamese(path: &Path, model: &SiameseModel<f32>) -> Result<(), CheckpointError> {
    write_store(path, CheckpointConfig::Siamese(model.cfg.clone()), &model.ps)
}

pub fn load_siamese(path: &Path) -> Result<SiameseModel<f32>, CheckpointError> {
    let (header, data) = read_header(path)?;
    let CheckpointConfig::Siamese(cfg) = &header.config else {
        return Err(CheckpointError::WrongKind {
            expected: "siamese".into(),
            found: kind_name(&header.config),
        });
    };
    let mut m = SiameseModel::<f32>::new(cfg.clone(), 0);
    restore_store(&header, &data, &mut m.ps)?;
    Ok(m)
}

fn kind_name(c: &CheckpointConfig) -> String {
    match c {
        CheckpointConfig::Redirection { .. } => "redirection".into(),
        CheckpointConfig::Vae(_) => "vae".into(),
        CheckpointConfig::Siamese(_) => "siamese".into(),
    }
}

/// Peek at the stored model config without restoring tensors.
pub fn peek_config(path: &Path) -> Result<CheckpointConfig, CheckpointError> {
    let (header, _) = read_header(path)?;
    Ok(header.config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use gazeshift_core::model::{AblationFlags, ModelConfig};
    use ndarray::Array4;
    use rand::Rng;
    use rand::SeedableRng;

    fn tiny_model(seed: u64) -> RedirectionModel<f32> {
        let mut cfg = ModelConfig::synth(32, 32);
        cfg.gaze.stages.truncate(2);
        cfg.c_a = 8;
        cfg.app = gazeshift_core::model::AppEncoderSpec::Mobile {
            stem_c: 6,
            stages: vec![gazeshift_core::model::StageSpec {
                out_c: 8,
                expansion: 2,
                repeats: 1,
                stride: 2,
            }],
            pad: 1,
            pool_to: None,
        };
        cfg.decoder = gazeshift_core::model::DecoderSpec::Deconv {
            blocks: vec![
                gazeshift_core::model::DeconvBlockSpec { out_c: 4, k: 4 },
                gazeshift_core::model::DeconvBlockSpec { out_c: 2, k: 2 },
            ],
            final_resize: None,
        };
        RedirectionModel::new(cfg, AblationFlags::full(), seed).unwrap()
    }

    #[test]
    fn checkpoint_round_trip_preserves_eval_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut m = tiny_model(42);
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(1);
        let x = Array4::<f32>::from_shape_fn((2, 1, 32, 32), |_| rng.gen_range(-1.0..1.0));
        let before = m.embed(&x).unwrap();
        save_redirection(&path, &m).unwrap();
        let mut loaded = load_redirection(&path).unwrap();
        let after = loaded.embed(&x).unwrap();
        for (a, b) in before.iter().zip(after.iter()) {
            assert!((a - b).abs() < 1e-6, "round trip exact: {a} vs {b}");
        }
    }

    #[test]
    fn corrupted_config_hash_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let m = tiny_model(7);
        save_redirection(&path, &m).unwrap();
        // flip a byte inside the header's config section
        let mut bytes = std::fs::read(&path).unwrap();
        let needle = b"\"input_height\":32";
        let pos = bytes
            .windows(needle.len())
            .position(|w| w == needle)
            .expect("config text present");
        bytes[pos + needle.len() - 1] = b'3'; // 32 -> 33
        std::fs::write(&path, &bytes).unwrap();
        let err = load_redirection(&path).unwrap_err();
        assert!(matches!(err, CheckpointError::HashMismatch { .. }), "{err}");
    }

    #[test]
    fn wrong_kind_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let m = tiny_model(7);
        save_redirection(&path, &m).unwrap();
        let err = load_vae(&path).unwrap_err();
        assert!(matches!(err, CheckpointError::WrongKind { .. }));
    }
}

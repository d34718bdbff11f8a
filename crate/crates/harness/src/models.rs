//! Model files: a JSON header (architecture, seeds, standardization) next to
//! a binary payload of matrix blocks.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use taililc::dpca::DpcaProjector;
use taililc::mlp::{Layer, MlpArchitecture, MlpParams, TrainConfig};
use taililc::policies::{FeatureSet, NnIlcPolicy, Standardizer, StudentPolicy};

use crate::error::{HarnessError, Result};
use crate::store::{atomic_write, decode_blocks, encode_blocks, read_json, write_json};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ProjectorHeader {
    n_l: usize,
    n_d: usize,
    singular_values: Vec<f64>,
    mean: Option<Vec<f64>>,
    fingerprint: Option<String>,
}

impl ProjectorHeader {
    fn of(p: &DpcaProjector) -> Self {
        Self {
            n_l: p.n_l,
            n_d: p.t_d.nrows(),
            singular_values: p.singular_values.clone(),
            mean: p.mean.as_ref().map(|m| m.as_slice().to_vec()),
            fingerprint: p.fingerprint.clone(),
        }
    }

    fn rebuild(self, t_d: DMatrix<f64>) -> Result<DpcaProjector> {
        if t_d.shape() != (self.n_d, self.n_l) {
            return Err(HarnessError::Format(format!("projector block has shape {:?}", t_d.shape())));
        }
        Ok(DpcaProjector {
            n_l: self.n_l,
            t_e: t_d.transpose(),
            t_d,
            singular_values: self.singular_values,
            mean: self.mean.map(DVector::from_vec),
            fingerprint: self.fingerprint,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailHeader {
    pub arch: MlpArchitecture,
    pub init_seed: u64,
    pub train: TrainConfig,
    pub input_std: Standardizer,
    pub output_std: Standardizer,
    encoder: ProjectorHeader,
    decoder: ProjectorHeader,
    pub payload: String,
    pub blocks: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NnIlcHeader {
    pub arch: MlpArchitecture,
    pub init_seed: u64,
    pub train: TrainConfig,
    pub features: FeatureSet,
    pub delay: usize,
    pub input_std: Standardizer,
    pub output_std: Standardizer,
    pub payload: String,
    pub blocks: Vec<String>,
}

fn layer_blocks(p: &MlpParams) -> (Vec<String>, Vec<DMatrix<f64>>) {
    let mut names = Vec::new();
    let mut mats = Vec::new();
    for (i, l) in p.layers.iter().enumerate() {
        names.push(format!("layer{i}.w"));
        mats.push(l.w.clone());
        names.push(format!("layer{i}.b"));
        mats.push(DMatrix::from_column_slice(l.b.len(), 1, l.b.as_slice()));
    }
    (names, mats)
}

fn rebuild_mlp(arch: MlpArchitecture, init_seed: u64, blocks: &[DMatrix<f64>]) -> Result<MlpParams> {
    if blocks.len() != 2 * arch.n_layers() {
        return Err(HarnessError::Format(format!("expected {} layer blocks, found {}", 2 * arch.n_layers(), blocks.len())));
    }
    let layers = blocks
        .chunks(2)
        .enumerate()
        .map(|(i, wb)| {
            let (fan_in, fan_out) = (arch.widths[i], arch.widths[i + 1]);
            if wb[0].shape() != (fan_out, fan_in) || wb[1].shape() != (fan_out, 1) {
                return Err(HarnessError::Format(format!("layer {i} has the wrong shape")));
            }
            Ok(Layer { w: wb[0].clone(), b: wb[1].column(0).into_owned() })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MlpParams { arch, layers, init_seed })
}

fn payload_name(header_path: &Path) -> String {
    header_path.with_extension("bin").file_name().and_then(|n| n.to_str()).unwrap_or("model.bin").to_string()
}

/// Writes `<stem>.json` and `<stem>.bin`; returns both paths.
pub fn save_tail(header_path: &Path, policy: &StudentPolicy, train: &TrainConfig) -> Result<[std::path::PathBuf; 2]> {
    let (layer_names, layer_mats) = layer_blocks(&policy.regressor);
    let mut blocks = vec!["encoder.t_d".to_string(), "decoder.t_d".to_string()];
    blocks.extend(layer_names);
    let mut mats: Vec<&DMatrix<f64>> = vec![&policy.encoder.t_d, &policy.decoder.t_d];
    mats.extend(layer_mats.iter());
    let header = TailHeader {
        arch: policy.regressor.arch.clone(),
        init_seed: policy.regressor.init_seed,
        train: train.clone(),
        input_std: policy.input_std.clone(),
        output_std: policy.output_std.clone(),
        encoder: ProjectorHeader::of(&policy.encoder),
        decoder: ProjectorHeader::of(&policy.decoder),
        payload: payload_name(header_path),
        blocks,
    };
    let bin = header_path.with_extension("bin");
    atomic_write(&bin, &encode_blocks(&mats))?;
    write_json(header_path, &header)?;
    Ok([header_path.to_path_buf(), bin])
}

pub fn load_tail(header_path: &Path) -> Result<StudentPolicy> {
    let header: TailHeader = read_json(header_path)?;
    let bin = header_path.with_file_name(&header.payload);
    let mut blocks = decode_blocks(&std::fs::read(bin)?)?;
    if blocks.len() != header.blocks.len() || blocks.len() < 2 {
        return Err(HarnessError::Format("payload does not match its header".into()));
    }
    let rest = blocks.split_off(2);
    let decoder_td = blocks.pop().expect("two blocks");
    let encoder_td = blocks.pop().expect("one block");
    let regressor = rebuild_mlp(header.arch, header.init_seed, &rest)?;
    Ok(StudentPolicy::new(
        header.encoder.rebuild(encoder_td)?,
        header.decoder.rebuild(decoder_td)?,
        regressor,
        header.input_std,
        header.output_std,
    )?)
}

pub fn save_nn_ilc(header_path: &Path, policy: &NnIlcPolicy, train: &TrainConfig) -> Result<[std::path::PathBuf; 2]> {
    let (blocks, mats) = layer_blocks(&policy.regressor);
    let header = NnIlcHeader {
        arch: policy.regressor.arch.clone(),
        init_seed: policy.regressor.init_seed,
        train: train.clone(),
        features: policy.features,
        delay: policy.delay,
        input_std: policy.input_std.clone(),
        output_std: policy.output_std.clone(),
        payload: payload_name(header_path),
        blocks,
    };
    let bin = header_path.with_extension("bin");
    atomic_write(&bin, &encode_blocks(&mats.iter().collect::<Vec<_>>()))?;
    write_json(header_path, &header)?;
    Ok([header_path.to_path_buf(), bin])
}

pub fn load_nn_ilc(header_path: &Path) -> Result<NnIlcPolicy> {
    let header: NnIlcHeader = read_json(header_path)?;
    let blocks = decode_blocks(&std::fs::read(header_path.with_file_name(&header.payload))?)?;
    let regressor = rebuild_mlp(header.arch, header.init_seed, &blocks)?;
    Ok(NnIlcPolicy {
        features: header.features,
        delay: header.delay,
        regressor,
        input_std: header.input_std,
        output_std: header.output_std,
    })
}

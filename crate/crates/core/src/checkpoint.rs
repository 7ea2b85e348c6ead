//! Generator checkpoints and import of third-party pretrained archives.
//!
//! A checkpoint carries every generator parameter plus a metadata record:
//! the architecture configs, iteration count, seed, binarization settings
//! and the flat config snapshot of the producing run. Loading is strict --
//! missing keys, unexpected keys and shape mismatches are hard errors that
//! enumerate every offending parameter path.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::archive::{read_archive, validate_params, write_archive};
use crate::binarization::BinarizationParams;
use crate::error::{Result, ZfError};
use crate::generator::{DecoderConfig, FlowConfig, Generator};
use crate::params::ParamStore;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointMeta {
    pub iteration: u64,
    pub seed: u64,
    pub adapted: bool,
    pub flow: FlowConfig,
    pub decoder: DecoderConfig,
    pub binarize: BinarizationParams,
    /// Flat config text of the run that produced this checkpoint, so
    /// downstream commands can rebuild the encoder and renderer.
    pub config_snapshot: String,
}

/// Expected (name, shape) pairs for a generator built from `meta`.
fn expected_params(meta: &CheckpointMeta) -> Result<Vec<(String, Vec<usize>)>> {
    let mut reference = Generator::new(meta.flow.clone(), meta.decoder.clone(), 0)?;
    if meta.adapted {
        reference.wrap_zeroconv()?;
    }
    Ok(reference
        .params
        .iter()
        .map(|(n, t)| (n.clone(), t.shape().to_vec()))
        .collect())
}

pub fn save_checkpoint(path: &Path, generator: &Generator, meta: &CheckpointMeta) -> Result<()> {
    if meta.adapted != generator.is_adapted() {
        return Err(ZfError::Contract(
            "checkpoint metadata disagrees with the generator's adaptation state".into(),
        ));
    }
    write_archive(path, meta, &generator.params)
}

/// Load a checkpoint saved by [`save_checkpoint`]. The generator behaves
/// bit-identically to the one that was saved.
pub fn load_checkpoint(path: &Path) -> Result<(Generator, CheckpointMeta)> {
    let (meta, params): (CheckpointMeta, ParamStore) = read_archive(path)?;
    let expected = expected_params(&meta)?;
    validate_params(&expected, &params)?;
    let generator = Generator::from_parts(meta.flow.clone(), meta.decoder.clone(), params, meta.adapted)?;
    Ok((generator, meta))
}

/// Name-translation table from a conforming third-party pretrained archive
/// onto our parameter paths, for the given architecture.
///
/// Third-party naming convention (one entry per line of the table):
///
/// | third-party                                   | ours                              |
/// |-----------------------------------------------|-----------------------------------|
/// | `latent_flow.block<i>.s_net.fc<j>.weight/bias` | `flow.block<i>.scale.l<j>.*`      |
/// | `latent_flow.block<i>.t_net.fc<j>.weight/bias` | `flow.block<i>.translate.l<j>.*`  |
/// | `decoder.fc_latent.weight/bias`                | `decoder.proj.*`                  |
/// | `decoder.resblock<i>.conv1.weight/bias`        | `decoder.block<i>.conv1.*`        |
/// | `decoder.resblock<i>.conv2.weight/bias`        | `decoder.block<i>.conv2.*`        |
/// | `decoder.resblock<i>.shortcut.weight/bias`     | `decoder.block<i>.skip.*`         |
/// | `decoder.conv_out.weight/bias`                 | `decoder.head.*`                  |
pub fn clip_forge_name_table(
    flow: &FlowConfig,
    decoder: &DecoderConfig,
) -> Vec<(String, String)> {
    let mut table = Vec::new();
    for i in 0..flow.num_coupling_blocks {
        for (theirs, ours) in [("s_net", "scale"), ("t_net", "translate")] {
            for j in 0..3 {
                for leaf in ["weight", "bias"] {
                    table.push((
                        format!("latent_flow.block{i}.{theirs}.fc{j}.{leaf}"),
                        format!("flow.block{i}.{ours}.l{j}.{leaf}"),
                    ));
                }
            }
        }
    }
    for leaf in ["weight", "bias"] {
        table.push((
            format!("decoder.fc_latent.{leaf}"),
            format!("decoder.proj.{leaf}"),
        ));
    }
    for i in 0..decoder.num_blocks {
        for (theirs, ours) in [("conv1", "conv1"), ("conv2", "conv2"), ("shortcut", "skip")] {
            for leaf in ["weight", "bias"] {
                table.push((
                    format!("decoder.resblock{i}.{theirs}.{leaf}"),
                    format!("decoder.block{i}.{ours}.{leaf}"),
                ));
            }
        }
    }
    for leaf in ["weight", "bias"] {
        table.push((
            format!("decoder.conv_out.{leaf}"),
            format!("decoder.head.{leaf}"),
        ));
    }
    table
}

/// Metadata record of a third-party pretrained archive.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainedArchiveMeta {
    pub flow: FlowConfig,
    pub decoder: DecoderConfig,
}

/// Import a third-party pretrained archive, translating its parameter
/// names through [`clip_forge_name_table`]. Every archive key must be
/// consumed by the table and every one of our parameters must be produced;
/// anything else is a hard error listing the offending keys.
pub fn import_clip_forge(path: &Path) -> Result<(Generator, PretrainedArchiveMeta)> {
    let (meta, theirs): (PretrainedArchiveMeta, ParamStore) = read_archive(path)?;
    let table = clip_forge_name_table(&meta.flow, &meta.decoder);

    let mut translated = ParamStore::new();
    let mut unmatched: Vec<String> = theirs.names().cloned().collect();
    for (their_name, our_name) in &table {
        if let Some(t) = theirs.get(their_name) {
            translated.insert(our_name.clone(), t.clone());
            unmatched.retain(|n| n != their_name);
        }
    }
    if !unmatched.is_empty() {
        return Err(ZfError::CheckpointKeys {
            missing: Vec::new(),
            unexpected: unmatched,
            shape_mismatch: Vec::new(),
        });
    }

    let reference = Generator::new(meta.flow.clone(), meta.decoder.clone(), 0)?;
    let expected: Vec<(String, Vec<usize>)> = reference
        .params
        .iter()
        .map(|(n, t)| (n.clone(), t.shape().to_vec()))
        .collect();
    validate_params(&expected, &translated)?;
    let generator = Generator::from_parts(meta.flow.clone(), meta.decoder.clone(), translated, false)?;
    Ok((generator, meta))
}

/// Write a pretrained archive under the third-party naming convention.
/// Primarily used to exercise the import path end to end.
pub fn export_clip_forge_archive(path: &Path, generator: &Generator) -> Result<()> {
    if generator.is_adapted() {
        return Err(ZfError::Contract(
            "third-party archives describe unadapted generators".into(),
        ));
    }
    let table = clip_forge_name_table(&generator.flow_cfg, &generator.decoder_cfg);
    let mut theirs = ParamStore::new();
    for (their_name, our_name) in &table {
        let t = generator
            .params
            .get(our_name)
            .ok_or_else(|| ZfError::Parameter(format!("missing parameter {our_name}")))?;
        theirs.insert(their_name.clone(), t.clone());
    }
    let meta = PretrainedArchiveMeta {
        flow: generator.flow_cfg.clone(),
        decoder: generator.decoder_cfg.clone(),
    };
    write_archive(path, &meta, &theirs)
}

//! Probe checkpoints: one JSON header line, then every parameter tensor as
//! little-endian float32 in manifest order.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{Arch, GapProbe, MapProbe, Memory, NapProbe, OracleProbe, Probe, UniformProbe};
use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::nn::{self, Linear, Tensors};
use crate::transition::{Action, DependencyTree, ParseState};

pub const CHECKPOINT_FORMAT: &str = "incparse-probe/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub arch: Arch,
    pub layer: usize,
    pub dim: usize,
    pub model_tag: String,
    pub seed: u64,
    /// Dropout between layers during training.
    pub dropout: f64,
    /// Dropout on embedding rows during training.
    pub input_dropout: f64,
    #[serde(default)]
    pub hyperparams: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arc_sign: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trees: Option<BTreeMap<String, Vec<usize>>>,
    pub tensors: Vec<TensorEntry>,
}

/// Metadata supplied by the caller when saving.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub layer: usize,
    pub model_tag: String,
    pub seed: u64,
    pub input_dropout: f64,
    pub hyperparams: serde_json::Value,
}

/// Any probe a checkpoint can hold.
#[derive(Clone, Debug, PartialEq)]
pub enum LoadedProbe {
    Gap(GapProbe),
    Map(MapProbe),
    Nap(NapProbe),
    Oracle(OracleProbe),
    Uniform(UniformProbe),
}

impl LoadedProbe {
    pub fn as_probe(&self) -> &dyn Probe {
        match self {
            LoadedProbe::Gap(p) => p,
            LoadedProbe::Map(p) => p,
            LoadedProbe::Nap(p) => p,
            LoadedProbe::Oracle(p) => p,
            LoadedProbe::Uniform(p) => p,
        }
    }

    fn tensors(&self) -> Option<&dyn Tensors> {
        match self {
            LoadedProbe::Gap(p) => Some(p),
            LoadedProbe::Map(p) => Some(p),
            LoadedProbe::Nap(p) => Some(p),
            _ => None,
        }
    }

    fn dim(&self) -> usize {
        match self {
            LoadedProbe::Gap(p) => p.dim(),
            LoadedProbe::Map(p) => p.dim(),
            LoadedProbe::Nap(p) => p.dim(),
            _ => 0,
        }
    }

    fn dropout(&self) -> f64 {
        match self {
            LoadedProbe::Map(p) => p.dropout,
            LoadedProbe::Nap(p) => p.dropout,
            _ => 0.0,
        }
    }
}

impl Probe for LoadedProbe {
    fn arch(&self) -> Arch {
        self.as_probe().arch()
    }

    fn begin(&self) -> Memory {
        self.as_probe().begin()
    }

    fn advance(&self, memory: &Memory, action: Action) -> Memory {
        self.as_probe().advance(memory, action)
    }

    fn scores(&self, memory: &Memory, state: &ParseState, emb: &EmbeddingMatrix) -> Result<[f64; 3]> {
        self.as_probe().scores(memory, state, emb)
    }

    fn log_dist(&self, memory: &Memory, state: &ParseState, emb: &EmbeddingMatrix) -> Result<[f64; 3]> {
        self.as_probe().log_dist(memory, state, emb)
    }
}

pub fn checkpoint_bytes(probe: &LoadedProbe, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut blob = Vec::new();
    if let Some(t) = probe.tensors() {
        t.visit(&mut |name, shape, data| {
            tensors.push(TensorEntry {
                name: name.to_string(),
                shape: shape.to_vec(),
            });
            blob.extend(crate::embedding::f32_bytes(data.iter().copied()));
        });
    }
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.to_string(),
        arch: probe.arch(),
        layer: meta.layer,
        dim: probe.dim(),
        model_tag: meta.model_tag.clone(),
        seed: meta.seed,
        dropout: probe.dropout(),
        input_dropout: meta.input_dropout,
        hyperparams: meta.hyperparams.clone(),
        arc_sign: match probe {
            LoadedProbe::Gap(g) => Some(g.arc_sign),
            _ => None,
        },
        trees: match probe {
            LoadedProbe::Oracle(o) => Some(
                o.trees()
                    .iter()
                    .map(|(id, t)| (id.clone(), t.heads().to_vec()))
                    .collect(),
            ),
            _ => None,
        },
        tensors,
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    out.extend(blob);
    Ok(out)
}

pub fn save_checkpoint(path: impl AsRef<Path>, probe: &LoadedProbe, meta: &CheckpointMeta) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, checkpoint_bytes(probe, meta)?)?;
    Ok(())
}

fn bad(message: impl Into<String>) -> Error {
    Error::Checkpoint(message.into())
}

struct Shapes<'a>(&'a [TensorEntry]);

impl Shapes<'_> {
    fn get(&self, name: &str) -> Result<&[usize]> {
        self.0
            .iter()
            .find(|t| t.name == name)
            .map(|t| t.shape.as_slice())
            .ok_or_else(|| bad(format!("missing tensor `{name}`")))
    }

    fn matrix(&self, name: &str) -> Result<Array2<f64>> {
        match self.get(name)? {
            &[r, c] => Ok(Array2::zeros((r, c))),
            other => Err(bad(format!("tensor `{name}` has shape {other:?}, expected 2-d"))),
        }
    }

    fn vector(&self, name: &str) -> Result<Array1<f64>> {
        match self.get(name)? {
            &[n] => Ok(Array1::zeros(n)),
            other => Err(bad(format!("tensor `{name}` has shape {other:?}, expected 1-d"))),
        }
    }

    fn linear(&self, prefix: &str) -> Result<Linear> {
        Ok(Linear {
            weight: self.matrix(&format!("{prefix}.weight"))?,
            bias: self.vector(&format!("{prefix}.bias"))?,
        })
    }

    fn mlp(&self) -> Result<[Linear; 3]> {
        Ok([self.linear("mlp.0")?, self.linear("mlp.1")?, self.linear("mlp.2")?])
    }
}

fn skeleton(header: &CheckpointHeader) -> Result<LoadedProbe> {
    let shapes = Shapes(&header.tensors);
    Ok(match header.arch {
        Arch::Gap => LoadedProbe::Gap(GapProbe {
            proj: shapes.matrix("proj")?,
            tau: 0.0,
            beta: 1.0,
            root: shapes.vector("root")?,
            arc_sign: header.arc_sign.unwrap_or(1.0),
        }),
        Arch::Map => LoadedProbe::Map(MapProbe {
            layers: shapes.mlp()?,
            action_emb: shapes.matrix("action_emb")?,
            action_bias: shapes.vector("action_bias")?,
            root: shapes.vector("root")?,
            dropout: header.dropout,
        }),
        Arch::Nap => LoadedProbe::Nap(NapProbe {
            action_input: shapes.matrix("action_input")?,
            gru: super::nap::Gru {
                input: shapes.linear("gru.ih")?,
                hidden: shapes.linear("gru.hh")?,
            },
            att_bilinear: shapes.matrix("att.bilinear")?,
            att_key: shapes.vector("att.key")?,
            att_query: shapes.vector("att.query")?,
            att_bias: 0.0,
            readout: shapes.mlp()?,
            action_emb: shapes.matrix("action_emb")?,
            action_bias: shapes.vector("action_bias")?,
            root: shapes.vector("root")?,
            dropout: header.dropout,
        }),
        Arch::Oracle => {
            let mut probe = OracleProbe::new();
            for (id, heads) in header.trees.clone().unwrap_or_default() {
                probe.insert(&id, DependencyTree::from_heads(heads)?);
            }
            LoadedProbe::Oracle(probe)
        }
        Arch::Uniform => LoadedProbe::Uniform(UniformProbe),
    })
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<(LoadedProbe, CheckpointHeader)> {
    let mut reader = BufReader::new(bytes);
    let mut line = Vec::new();
    reader.read_until(b'\n', &mut line)?;
    let header: CheckpointHeader =
        serde_json::from_slice(&line).map_err(|e| bad(format!("bad header: {e}")))?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(bad(format!("unsupported format `{}`", header.format)));
    }
    let mut blob = Vec::new();
    reader.read_to_end(&mut blob)?;
    let values = crate::embedding::read_f32s(&blob)?;
    let mut probe = skeleton(&header)?;
    let expected: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if values.len() != expected {
        return Err(bad(format!(
            "header lists {expected} values but the blob holds {}",
            values.len()
        )));
    }
    let mut order = Vec::new();
    if let Some(t) = probe.tensors() {
        t.visit(&mut |name, shape, _| order.push(TensorEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
        }));
    }
    if order != header.tensors {
        return Err(bad("tensor manifest does not match the architecture"));
    }
    match &mut probe {
        LoadedProbe::Gap(p) => nn::unflatten(p, &values),
        LoadedProbe::Map(p) => nn::unflatten(p, &values),
        LoadedProbe::Nap(p) => nn::unflatten(p, &values),
        _ => {}
    }
    if let LoadedProbe::Gap(g) = &probe {
        if !(g.beta > 0.0) {
            return Err(bad("beta must be positive"));
        }
    }
    Ok((probe, header))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(LoadedProbe, CheckpointHeader)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
    parse_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probes::{GapConfig, MapConfig, NapConfig};

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            layer: 3,
            model_tag: "planted".into(),
            seed: 11,
            input_dropout: 0.4,
            hyperparams: serde_json::json!({"lr": 0.001}),
        }
    }

    fn round_trip(probe: LoadedProbe) {
        let bytes = checkpoint_bytes(&probe, &meta()).unwrap();
        let (loaded, header) = parse_checkpoint(&bytes).unwrap();
        assert_eq!(header.layer, 3);
        assert_eq!(header.arch, probe.arch());
        let again = checkpoint_bytes(&loaded, &meta()).unwrap();
        assert_eq!(bytes, again);
        let (reloaded, _) = parse_checkpoint(&again).unwrap();
        assert_eq!(loaded, reloaded);
    }

    #[test]
    fn every_arch_round_trips() {
        round_trip(LoadedProbe::Gap(GapProbe::new(6, &GapConfig { rank: Some(4), flip_arc_sign: true, ..GapConfig::default() }).unwrap()));
        round_trip(LoadedProbe::Map(MapProbe::new(5, &MapConfig::default())));
        round_trip(LoadedProbe::Nap(NapProbe::new(4, &NapConfig { recurrent: 7, ..NapConfig::default() })));
        let mut oracle = OracleProbe::new();
        oracle.insert("a", DependencyTree::from_heads(vec![2, 0]).unwrap());
        round_trip(LoadedProbe::Oracle(oracle));
        round_trip(LoadedProbe::Uniform(UniformProbe));
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let probe = LoadedProbe::Map(MapProbe::new(3, &MapConfig::default()));
        let mut bytes = checkpoint_bytes(&probe, &meta()).unwrap();
        bytes.truncate(bytes.len() - 4);
        assert!(matches!(parse_checkpoint(&bytes), Err(Error::Checkpoint(_))));
        assert!(load_checkpoint("/nonexistent/probe.ckpt").is_err());
    }
}

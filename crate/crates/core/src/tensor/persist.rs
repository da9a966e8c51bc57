//! Directory persistence: a pretty-printed JSON manifest plus one raw blob
//! per tensor (little-endian `f64`, row-major).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Activation, ActQuant, LayerKind, LayerRecord, NetworkMeta, NetworkRecord, Tensor};
use crate::calib::{CalibrationSet, DatasetKind, WorldSpec};
use crate::codec::QuantParams;
use crate::error::{Error, Result};

const MODEL_FORMAT: &str = "gptq-lab-model";
const DATASET_FORMAT: &str = "gptq-lab-dataset";
const MANIFEST: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
struct TensorRef {
    file: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerEntry {
    kind: LayerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weight: Option<TensorRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias: Option<TensorRef>,
    stride: usize,
    padding: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    activation: Option<Activation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    skip_from: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    input_quant: Option<ActQuant>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weight_quant: Option<QuantParams>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelManifest {
    format: String,
    meta: NetworkMeta,
    blocks: Vec<(usize, usize)>,
    layers: Vec<LayerEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetManifest {
    format: String,
    kind: DatasetKind,
    n: usize,
    seed: u64,
    shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    world: Option<WorldSpec>,
    inputs: TensorRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<TensorRef>,
}

fn write_blob(dir: &Path, name: String, t: &Tensor) -> Result<TensorRef> {
    let mut bytes = Vec::with_capacity(t.len() * 8);
    for v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let path = dir.join(&name);
    fs::write(&path, bytes).map_err(|e| Error::io(path, e))?;
    Ok(TensorRef {
        file: name,
        shape: t.shape().to_vec(),
    })
}

fn read_blob(dir: &Path, r: &TensorRef) -> Result<Tensor> {
    let path = dir.join(&r.file);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Manifest {
            path,
            msg: "blob length is not a multiple of 8".into(),
        });
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(r.shape.clone(), data).map_err(|e| Error::Manifest {
        path,
        msg: e.to_string(),
    })
}

fn write_manifest<T: Serialize>(dir: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("manifest serializes");
    text.push('\n');
    let path = dir.join(MANIFEST);
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

fn read_manifest<T: for<'de> Deserialize<'de>>(dir: &Path) -> Result<(PathBuf, T)> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let value = serde_json::from_str(&text).map_err(|e| Error::Manifest {
        path: path.clone(),
        msg: e.to_string(),
    })?;
    Ok((path, value))
}

pub fn save_network(net: &NetworkRecord, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut layers = Vec::with_capacity(net.len());
    for (i, l) in net.layers().iter().enumerate() {
        let weight = l
            .weight
            .as_ref()
            .map(|w| write_blob(dir, format!("layer{i:03}.weight.bin"), w))
            .transpose()?;
        let bias = l
            .bias
            .as_ref()
            .map(|b| write_blob(dir, format!("layer{i:03}.bias.bin"), b))
            .transpose()?;
        layers.push(LayerEntry {
            kind: l.kind,
            weight,
            bias,
            stride: l.stride,
            padding: l.padding,
            activation: l.activation,
            skip_from: l.skip_from,
            input_quant: l.input_quant,
            weight_quant: l.weight_quant.clone(),
        });
    }
    write_manifest(
        dir,
        &ModelManifest {
            format: MODEL_FORMAT.into(),
            meta: net.meta.clone(),
            blocks: net.blocks().to_vec(),
            layers,
        },
    )
}

pub fn load_network(dir: &Path) -> Result<NetworkRecord> {
    let (path, m): (_, ModelManifest) = read_manifest(dir)?;
    if m.format != MODEL_FORMAT {
        return Err(Error::Manifest {
            path,
            msg: format!("expected format `{MODEL_FORMAT}`, found `{}`", m.format),
        });
    }
    let mut layers = Vec::with_capacity(m.layers.len());
    for e in m.layers {
        layers.push(LayerRecord {
            kind: e.kind,
            weight: e.weight.as_ref().map(|r| read_blob(dir, r)).transpose()?,
            bias: e.bias.as_ref().map(|r| read_blob(dir, r)).transpose()?,
            stride: e.stride,
            padding: e.padding,
            activation: e.activation,
            skip_from: e.skip_from,
            input_quant: e.input_quant,
            weight_quant: e.weight_quant,
        });
    }
    NetworkRecord::new(layers, m.blocks, m.meta)
}

pub fn save_dataset(set: &CalibrationSet, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let inputs = write_blob(dir, "inputs.bin".into(), &set.inputs)?;
    let labels = match &set.labels {
        Some(l) => {
            let t = Tensor::new(vec![l.len()], l.iter().map(|&v| v as f64).collect())?;
            Some(write_blob(dir, "labels.bin".into(), &t)?)
        }
        None => None,
    };
    write_manifest(
        dir,
        &DatasetManifest {
            format: DATASET_FORMAT.into(),
            kind: set.kind,
            n: set.len(),
            seed: set.seed,
            shape: set.inputs.shape()[1..].to_vec(),
            world: set.world.clone(),
            inputs,
            labels,
        },
    )
}

pub fn load_dataset(dir: &Path) -> Result<CalibrationSet> {
    let (path, m): (_, DatasetManifest) = read_manifest(dir)?;
    if m.format != DATASET_FORMAT {
        return Err(Error::Manifest {
            path,
            msg: format!("expected format `{DATASET_FORMAT}`, found `{}`", m.format),
        });
    }
    let inputs = read_blob(dir, &m.inputs)?;
    if inputs.batch() != m.n || inputs.shape()[1..] != m.shape[..] {
        return Err(Error::Manifest {
            path,
            msg: format!("inputs blob {:?} disagrees with n={} shape={:?}", inputs.shape(), m.n, m.shape),
        });
    }
    let labels = match &m.labels {
        Some(r) => Some(
            read_blob(dir, r)?
                .data()
                .iter()
                .map(|&v| v as usize)
                .collect::<Vec<_>>(),
        ),
        None => None,
    };
    CalibrationSet::new(inputs, labels, m.kind, m.seed, m.world)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let w = Tensor::new(vec![2, 3], vec![0.1, -1.0 / 3.0, 2.5e-300, 7.0, f64::MIN_POSITIVE, -0.0]).unwrap();
        let b = Tensor::new(vec![2], vec![1e-17, -4.25]).unwrap();
        let net = NetworkRecord::new(
            vec![
                LayerRecord::linear(w, Some(b)).with_activation(Activation::Relu),
                LayerRecord::residual_add(1),
            ],
            vec![(0, 2)],
            NetworkMeta {
                arch: "test".into(),
                input_shape: vec![3],
                ..Default::default()
            },
        )
        .unwrap();
        save_network(&net, dir.path()).unwrap();
        let back = load_network(dir.path()).unwrap();
        assert_eq!(back.layers().len(), 2);
        let (a, b) = (net.layers()[0].weight.as_ref().unwrap(), back.layers()[0].weight.as_ref().unwrap());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(net, back);
    }

    #[test]
    fn rejects_unknown_manifest_keys() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join(MANIFEST),
            r#"{"format":"gptq-lab-model","meta":{"arch":"","input_shape":[],"classes":null,"data":null,"train_accuracy":null},"blocks":[],"layers":[],"extra":1}"#,
        )
        .unwrap();
        assert!(matches!(load_network(dir.path()), Err(Error::Manifest { .. })));
    }
}

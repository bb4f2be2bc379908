//! Tensor-archive directories: a `manifest.json` plus one raw little-endian
//! blob per tensor (row-major, no header).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BnAffine, CalibrationSet, LayerKind, LayerNode, ModelGraph};
use crate::layers::ConvSpec;
use crate::quant::{Granularity, LayerQuant, QuantParams};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.json";
pub const FORMAT: &str = "quantforge-archive";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: &str = "f32le";
pub const DTYPE_I64: &str = "i64le";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlobRef {
    pub shape: Vec<usize>,
    pub blob: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dtype: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuantEntry {
    pub bits: u32,
    pub granularity: Granularity,
    pub step: BlobRef,
    pub zero_point: BlobRef,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerQuantEntry {
    pub weight: QuantEntry,
    pub input: QuantEntry,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FusedBnEntry {
    pub gamma: BlobRef,
    pub beta: BlobRef,
    pub eps: f32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeEntry {
    pub id: String,
    pub kind: String,
    pub inputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<ConvSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<usize>,
    #[serde(default)]
    pub params: BTreeMap<String, BlobRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quant: Option<LayerQuantEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fused_bn: Option<FusedBnEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Content {
    Model {
        input_shape: Vec<usize>,
        output: String,
        nodes: Vec<NodeEntry>,
    },
    Calibration {
        inputs: BlobRef,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        labels: Option<BlobRef>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    #[serde(flatten)]
    pub content: Content,
}

/// Anything a tensor archive can hold.
#[derive(Debug, Clone)]
pub enum Archive {
    Model(ModelGraph),
    Calibration(CalibrationSet),
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Manifest(format!("cannot read {}: {e}", path.display())))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != FORMAT {
        return Err(Error::Manifest(format!(
            "unknown format `{}`",
            manifest.format
        )));
    }
    if manifest.version != VERSION {
        return Err(Error::Manifest(format!(
            "unsupported version {}",
            manifest.version
        )));
    }
    if manifest.dtype != DTYPE_F32 {
        return Err(Error::Manifest(format!(
            "unsupported dtype `{}`",
            manifest.dtype
        )));
    }
    Ok(manifest)
}

fn read_blob(dir: &Path, r: &BlobRef, elem: usize) -> Result<Vec<u8>> {
    let path: PathBuf = dir.join(&r.blob);
    if !path.is_file() {
        return Err(Error::MissingBlob(path));
    }
    let bytes = fs::read(&path)?;
    let expected = elem * r.shape.iter().product::<usize>();
    if bytes.len() != expected {
        return Err(Error::SizeMismatch {
            path,
            expected,
            found: bytes.len(),
        });
    }
    Ok(bytes)
}

fn read_f32(dir: &Path, r: &BlobRef, what: &str) -> Result<Tensor> {
    if let Some(dt) = &r.dtype {
        if dt != DTYPE_F32 {
            return Err(Error::Manifest(format!(
                "{what}: expected {DTYPE_F32}, got {dt}"
            )));
        }
    }
    let bytes = read_blob(dir, r, 4)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::from_external(r.shape.clone(), data, what)
}

fn read_i64(dir: &Path, r: &BlobRef) -> Result<Vec<i64>> {
    match r.dtype.as_deref() {
        Some(DTYPE_I64) => {}
        other => {
            return Err(Error::Manifest(format!(
                "labels must be {DTYPE_I64}, got {other:?}"
            )));
        }
    }
    let bytes = read_blob(dir, r, 8)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| i64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

fn parse_kind(entry: &NodeEntry) -> Result<LayerKind> {
    let missing = |field: &str| Error::Manifest(format!("`{}` needs `{field}`", entry.id));
    Ok(match entry.kind.as_str() {
        "fc" => LayerKind::Fc,
        "conv2d" => LayerKind::Conv2d,
        "batchnorm2d" => LayerKind::BatchNorm2d {
            eps: entry.eps.ok_or_else(|| missing("eps"))?,
        },
        "relu" => LayerKind::Relu,
        "avgpool" => LayerKind::AvgPool {
            kernel: entry.kernel.ok_or_else(|| missing("kernel"))?,
        },
        "flatten" => LayerKind::Flatten,
        "add" => LayerKind::Add,
        other => {
            return Err(Error::Manifest(format!(
                "`{}` has unknown kind `{other}`",
                entry.id
            )));
        }
    })
}

fn read_quant(dir: &Path, id: &str, e: &QuantEntry) -> Result<QuantParams> {
    let q = QuantParams {
        bits: e.bits,
        step: read_f32(dir, &e.step, &format!("{id} quant step"))?.into_data(),
        zero_point: read_f32(dir, &e.zero_point, &format!("{id} quant zero point"))?.into_data(),
        granularity: e.granularity,
    };
    q.validate()?;
    Ok(q)
}

fn model_from_manifest(
    dir: &Path,
    input_shape: Vec<usize>,
    output: String,
    entries: &[NodeEntry],
) -> Result<ModelGraph> {
    let mut nodes = Vec::with_capacity(entries.len());
    for e in entries {
        let mut node = LayerNode::new(e.id.clone(), parse_kind(e)?, &[]);
        node.inputs = e.inputs.clone();
        node.conv = e.spec;
        for (name, r) in &e.params {
            node.params
                .insert(name.clone(), read_f32(dir, r, &format!("{}.{name}", e.id))?);
        }
        if let Some(q) = &e.quant {
            node.quant = Some(LayerQuant {
                weight: read_quant(dir, &e.id, &q.weight)?,
                input: read_quant(dir, &e.id, &q.input)?,
            });
        }
        if let Some(f) = &e.fused_bn {
            node.fused_bn = Some(BnAffine {
                gamma: read_f32(dir, &f.gamma, &format!("{} fused gamma", e.id))?.into_data(),
                beta: read_f32(dir, &f.beta, &format!("{} fused beta", e.id))?.into_data(),
                eps: f.eps,
            });
        }
        nodes.push(node);
    }
    ModelGraph::new(input_shape, nodes, output)
}

/// Loads whichever kind of archive `dir` holds.
pub fn load_archive(dir: impl AsRef<Path>) -> Result<Archive> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    match manifest.content {
        Content::Model {
            input_shape,
            output,
            nodes,
        } => Ok(Archive::Model(model_from_manifest(
            dir,
            input_shape,
            output,
            &nodes,
        )?)),
        Content::Calibration { inputs, labels } => {
            let inputs = read_f32(dir, &inputs, "calibration inputs")?;
            let labels = labels.as_ref().map(|r| read_i64(dir, r)).transpose()?;
            Ok(Archive::Calibration(CalibrationSet::new(inputs, labels)?))
        }
    }
}

pub fn load_model(dir: impl AsRef<Path>) -> Result<ModelGraph> {
    match load_archive(dir)? {
        Archive::Model(g) => Ok(g),
        Archive::Calibration(_) => Err(Error::Manifest(
            "expected a model archive, found a calibration set".into(),
        )),
    }
}

pub fn load_calibration(dir: impl AsRef<Path>) -> Result<CalibrationSet> {
    match load_archive(dir)? {
        Archive::Calibration(c) => Ok(c),
        Archive::Model(_) => Err(Error::Manifest(
            "expected a calibration archive, found a model".into(),
        )),
    }
}

struct BlobWriter<'a> {
    dir: &'a Path,
}

impl BlobWriter<'_> {
    fn f32(&self, name: String, shape: &[usize], data: &[f32]) -> Result<BlobRef> {
        let mut bytes = Vec::with_capacity(data.len() * 4);
        for v in data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(self.dir.join(&name), bytes)?;
        Ok(BlobRef {
            shape: shape.to_vec(),
            blob: name,
            dtype: None,
        })
    }

    fn i64(&self, name: String, data: &[i64]) -> Result<BlobRef> {
        let mut bytes = Vec::with_capacity(data.len() * 8);
        for v in data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(self.dir.join(&name), bytes)?;
        Ok(BlobRef {
            shape: vec![data.len()],
            blob: name,
            dtype: Some(DTYPE_I64.to_string()),
        })
    }

    fn quant(&self, prefix: &str, q: &QuantParams) -> Result<QuantEntry> {
        Ok(QuantEntry {
            bits: q.bits,
            granularity: q.granularity,
            step: self.f32(format!("{prefix}.step.bin"), &[q.step.len()], &q.step)?,
            zero_point: self.f32(
                format!("{prefix}.zero_point.bin"),
                &[q.zero_point.len()],
                &q.zero_point,
            )?,
        })
    }
}

fn write_manifest(dir: &Path, content: Content) -> Result<()> {
    let manifest = Manifest {
        format: FORMAT.to_string(),
        version: VERSION,
        dtype: DTYPE_F32.to_string(),
        content,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(dir.join(MANIFEST), text)?;
    Ok(())
}

pub fn save_model(g: &ModelGraph, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let w = BlobWriter { dir };
    let mut entries = Vec::with_capacity(g.nodes.len());
    for node in &g.nodes {
        let mut params = BTreeMap::new();
        for (name, t) in &node.params {
            params.insert(
                name.clone(),
                w.f32(format!("{}.{name}.bin", node.id), t.shape(), t.data())?,
            );
        }
        let (eps, kernel) = match node.kind {
            LayerKind::BatchNorm2d { eps } => (Some(eps), None),
            LayerKind::AvgPool { kernel } => (None, Some(kernel)),
            _ => (None, None),
        };
        let quant = node
            .quant
            .as_ref()
            .map(|q| -> Result<LayerQuantEntry> {
                Ok(LayerQuantEntry {
                    weight: w.quant(&format!("{}.quant.weight", node.id), &q.weight)?,
                    input: w.quant(&format!("{}.quant.input", node.id), &q.input)?,
                })
            })
            .transpose()?;
        let fused_bn = node
            .fused_bn
            .as_ref()
            .map(|f| -> Result<FusedBnEntry> {
                Ok(FusedBnEntry {
                    gamma: w.f32(
                        format!("{}.fused_bn.gamma.bin", node.id),
                        &[f.gamma.len()],
                        &f.gamma,
                    )?,
                    beta: w.f32(
                        format!("{}.fused_bn.beta.bin", node.id),
                        &[f.beta.len()],
                        &f.beta,
                    )?,
                    eps: f.eps,
                })
            })
            .transpose()?;
        entries.push(NodeEntry {
            id: node.id.clone(),
            kind: node.kind.name().to_string(),
            inputs: node.inputs.clone(),
            spec: node.conv,
            eps,
            kernel,
            params,
            quant,
            fused_bn,
        });
    }
    write_manifest(
        dir,
        Content::Model {
            input_shape: g.input_shape.clone(),
            output: g.output.clone(),
            nodes: entries,
        },
    )
}

pub fn save_calibration(set: &CalibrationSet, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let w = BlobWriter { dir };
    let inputs = w.f32("inputs.bin".into(), set.inputs.shape(), set.inputs.data())?;
    let labels = set
        .labels
        .as_ref()
        .map(|l| w.i64("labels.bin".into(), l))
        .transpose()?;
    write_manifest(dir, Content::Calibration { inputs, labels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Precision;

    fn tiny() -> ModelGraph {
        let fc = LayerNode::new("fc", LayerKind::Fc, &["flat"])
            .with_param(
                "weight",
                Tensor::new(vec![2, 4], (0..8).map(|i| i as f32 * 0.1).collect()).unwrap(),
            )
            .with_param("bias", Tensor::from_vec(vec![0.5, -0.5]));
        let nodes = vec![
            LayerNode::new("relu", LayerKind::Relu, &["input"]),
            LayerNode::new("flat", LayerKind::Flatten, &["relu"]),
            fc,
        ];
        ModelGraph::new(vec![1, 2, 2], nodes, "fc").unwrap()
    }

    #[test]
    fn model_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut g = tiny();
        g.nodes[2].quant = Some(LayerQuant {
            weight: QuantParams {
                bits: 4,
                step: vec![0.1, 0.2],
                zero_point: vec![-0.3, 0.0],
                granularity: Granularity::PerChannel { axis: 0 },
            },
            input: QuantParams::per_tensor(8, 0.01, 0.0),
        });
        save_model(&g, dir.path()).unwrap();
        let back = load_model(dir.path()).unwrap();
        assert_eq!(back, g);
        let x = Tensor::new(vec![3, 1, 2, 2], (0..12).map(|i| i as f32 - 6.0).collect()).unwrap();
        assert_eq!(
            back.forward(&x, Precision::Quantized).unwrap(),
            g.forward(&x, Precision::Quantized).unwrap()
        );
    }

    #[test]
    fn calibration_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let set = CalibrationSet::new(
            Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
            Some(vec![1, 7]),
        )
        .unwrap();
        save_calibration(&set, dir.path()).unwrap();
        assert_eq!(load_calibration(dir.path()).unwrap(), set);
        assert!(load_model(dir.path()).is_err());
    }

    #[test]
    fn missing_blob() {
        let dir = tempfile::tempdir().unwrap();
        save_model(&tiny(), dir.path()).unwrap();
        fs::remove_file(dir.path().join("fc.weight.bin")).unwrap();
        let err = load_model(dir.path()).unwrap_err();
        assert!(err.to_string().contains("missing tensor blob"), "{err}");
    }

    #[test]
    fn size_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        save_model(&tiny(), dir.path()).unwrap();
        fs::write(dir.path().join("fc.bias.bin"), [0u8; 4]).unwrap();
        let err = load_model(dir.path()).unwrap_err();
        assert!(err.to_string().contains("size mismatch"), "{err}");
    }

    #[test]
    fn nan_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_model(&tiny(), dir.path()).unwrap();
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&f32::NAN.to_le_bytes());
        bytes.extend_from_slice(&0.0f32.to_le_bytes());
        fs::write(dir.path().join("fc.bias.bin"), bytes).unwrap();
        assert!(matches!(load_model(dir.path()), Err(Error::NonFinite(_))));
    }

    #[test]
    fn cycle_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_model(&tiny(), dir.path()).unwrap();
        let path = dir.path().join(MANIFEST);
        let text = fs::read_to_string(&path)
            .unwrap()
            .replace("\"input\"", "\"fc\"");
        fs::write(&path, text).unwrap();
        assert!(matches!(load_model(dir.path()), Err(Error::Graph(_))));
    }
}

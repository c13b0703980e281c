//! The `DVKM` model container and codecs for the models it carries.
//!
//! Layout (little-endian): magic `DVKM`, version `u32`, section count
//! `u32`, then one table row per section (name length `u16`, name bytes,
//! offset `u64`, length `u64`; offsets from the start of the file), the
//! section payloads, and a CRC32 of everything before it.

use std::collections::BTreeMap;
use std::path::Path;

use dvk_cnn::{
    ArchitectureSpec, DropoutMode, LayerKind, LayerParams, LayerSpec, LrnParams, NetworkState, Scalar, TensorShape,
};
use dvk_core::gmm::GmmModel;
use dvk_core::reduce::PcaModel;
use dvk_core::svm::LinearModel;
use serde_json::{json, Value};

use crate::cache::write_atomic;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DVKM";
pub const VERSION: u32 = 1;

pub const PCA: &str = "pca";
pub const GMM: &str = "gmm";
pub const SVM: &str = "svm";
pub const CNN_ARCH: &str = "cnn.arch";
pub const CNN_PARAMS: &str = "cnn.params";
pub const CNN_MEAN: &str = "cnn.mean";
pub const META: &str = "meta";

/// Named binary sections, kept in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub sections: BTreeMap<String, Vec<u8>>,
}

impl Container {
    pub fn insert(&mut self, name: &str, bytes: Vec<u8>) {
        self.sections.insert(name.to_string(), bytes);
    }

    pub fn get(&self, name: &str) -> Result<&[u8]> {
        self.sections
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MissingArtifact(format!("model section {name:?}")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.sections.contains_key(name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let table_len: usize = self.sections.keys().map(|n| 2 + n.len() + 16).sum();
        let mut offset = (12 + table_len) as u64;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for (name, bytes) in &self.sections {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
            offset += bytes.len() as u64;
        }
        for bytes in self.sections.values() {
            out.extend_from_slice(bytes);
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("model file: {m}"));
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("not a model container"));
        }
        let body = &bytes[..bytes.len() - 4];
        let crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
        if crc32fast::hash(body) != crc {
            return Err(bad("checksum mismatch"));
        }
        let mut r = Reader::new(body);
        r.pos = 4;
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let n = r.u32()? as usize;
        let mut rows = Vec::with_capacity(n);
        for _ in 0..n {
            let len = r.u16()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| bad("section name is not UTF-8"))?;
            let off = r.u64()? as usize;
            let len = r.u64()? as usize;
            rows.push((name, off, len));
        }
        let mut sections = BTreeMap::new();
        for (name, off, len) in rows {
            let end = off.checked_add(len).filter(|&e| e <= body.len()).ok_or_else(|| bad("section out of range"))?;
            sections.insert(name, body[off..end].to_vec());
        }
        Ok(Self { sections })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.display().to_string()));
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

#[derive(Default)]
pub struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn u32(&mut self, v: usize) -> &mut Self {
        self.buf.extend_from_slice(&(v as u32).to_le_bytes());
        self
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f64s(&mut self, vs: &[f64]) -> &mut Self {
        self.u32(vs.len());
        vs.iter().for_each(|&v| {
            self.f64(v);
        });
        self
    }
}

pub struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("model section truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u32()? as usize;
        (0..n).map(|_| self.f64()).collect()
    }
}

pub fn encode_pca(m: &PcaModel) -> Vec<u8> {
    let mut w = Writer::default();
    w.u32(m.input_dim).u32(m.target_dim).f64s(&m.mean).f64s(&m.basis).f64s(&m.eigenvalues);
    w.buf
}

pub fn decode_pca(bytes: &[u8]) -> Result<PcaModel> {
    let mut r = Reader::new(bytes);
    let input_dim = r.u32()? as usize;
    let target_dim = r.u32()? as usize;
    let m = PcaModel {
        mean: r.f64s()?,
        basis: r.f64s()?,
        eigenvalues: r.f64s()?,
        input_dim,
        target_dim,
    };
    if m.mean.len() != input_dim || m.basis.len() != input_dim * target_dim || m.eigenvalues.len() != target_dim {
        return Err(Error::Format("pca section sizes disagree".into()));
    }
    Ok(m)
}

pub fn encode_gmm(m: &GmmModel) -> Vec<u8> {
    let mut w = Writer::default();
    w.u32(m.dim).f64s(&m.means).f64s(&m.variances).f64s(&m.weights);
    w.buf
}

pub fn decode_gmm(bytes: &[u8]) -> Result<GmmModel> {
    let mut r = Reader::new(bytes);
    let dim = r.u32()? as usize;
    Ok(GmmModel::from_parameters(dim, r.f64s()?, r.f64s()?, r.f64s()?)?)
}

pub fn encode_svm(m: &LinearModel) -> Vec<u8> {
    let mut w = Writer::default();
    w.u32(m.feature_dim).u32(m.num_classes()).f64(m.c);
    for ((wt, &b), &t) in m.weights.iter().zip(&m.biases).zip(&m.trained) {
        w.u32(t as usize).f64(b).f64s(wt);
    }
    w.buf
}

pub fn decode_svm(bytes: &[u8]) -> Result<LinearModel> {
    let mut r = Reader::new(bytes);
    let feature_dim = r.u32()? as usize;
    let classes = r.u32()? as usize;
    let c = r.f64()?;
    let mut m = LinearModel {
        feature_dim,
        c,
        weights: Vec::with_capacity(classes),
        biases: Vec::with_capacity(classes),
        trained: Vec::with_capacity(classes),
    };
    for _ in 0..classes {
        m.trained.push(r.u32()? != 0);
        m.biases.push(r.f64()?);
        let w = r.f64s()?;
        if w.len() != feature_dim {
            return Err(Error::Format("svm weight length disagrees with dimension".into()));
        }
        m.weights.push(w);
    }
    Ok(m)
}

fn layer_json(l: &LayerSpec) -> Value {
    let mut v = match l.kind {
        LayerKind::Conv { filters, kernel, stride, pad } => {
            json!({"filters": filters, "kernel": kernel, "stride": stride, "pad": pad})
        }
        LayerKind::Lrn(p) => json!({"size": p.size, "alpha": p.alpha, "beta": p.beta, "bias": p.bias}),
        LayerKind::MaxPool { window, stride } => json!({"window": window, "stride": stride}),
        LayerKind::FullyConnected { out_dim } => json!({"out_dim": out_dim}),
        LayerKind::Dropout { rate, mode } => json!({
            "rate": rate,
            "mode": match mode { DropoutMode::Inverted => "inverted", DropoutMode::Classic => "classic" },
        }),
        LayerKind::Relu | LayerKind::Softmax => json!({}),
    };
    v["name"] = json!(l.name);
    v["type"] = json!(l.kind.tag());
    v
}

pub fn arch_to_json(spec: &ArchitectureSpec) -> String {
    let layers: Vec<Value> = spec.layers.iter().map(layer_json).collect();
    let v = json!({
        "name": spec.name,
        "input": [spec.input.channels, spec.input.height, spec.input.width],
        "num_classes": spec.num_classes,
        "layers": layers,
    });
    serde_json::to_string_pretty(&v).expect("json values serialise")
}

pub fn arch_from_json(text: &str) -> Result<ArchitectureSpec> {
    let bad = |m: String| Error::Format(format!("architecture: {m}"));
    let v: Value = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
    let uint = |v: &Value, k: &str| -> Result<usize> {
        v[k].as_u64().map(|x| x as usize).ok_or_else(|| bad(format!("missing integer {k:?}")))
    };
    let float = |v: &Value, k: &str| -> Result<f64> { v[k].as_f64().ok_or_else(|| bad(format!("missing number {k:?}"))) };
    let input = v["input"].as_array().filter(|a| a.len() == 3).ok_or_else(|| bad("input must be [c, h, w]".into()))?;
    let dims: Vec<usize> = input.iter().map(|x| x.as_u64().unwrap_or(0) as usize).collect();
    let mut layers = Vec::new();
    for l in v["layers"].as_array().ok_or_else(|| bad("missing layers".into()))? {
        let name = l["name"].as_str().ok_or_else(|| bad("layer without name".into()))?;
        let kind = match l["type"].as_str().unwrap_or("") {
            "conv" => LayerKind::Conv {
                filters: uint(l, "filters")?,
                kernel: uint(l, "kernel")?,
                stride: uint(l, "stride")?,
                pad: uint(l, "pad")?,
            },
            "relu" => LayerKind::Relu,
            "lrn" => LayerKind::Lrn(LrnParams {
                size: uint(l, "size")?,
                alpha: float(l, "alpha")?,
                beta: float(l, "beta")?,
                bias: float(l, "bias")?,
            }),
            "maxpool" => LayerKind::MaxPool { window: uint(l, "window")?, stride: uint(l, "stride")? },
            "fully_connected" => LayerKind::FullyConnected { out_dim: uint(l, "out_dim")? },
            "dropout" => LayerKind::Dropout {
                rate: float(l, "rate")?,
                mode: match l["mode"].as_str() {
                    Some("classic") => DropoutMode::Classic,
                    _ => DropoutMode::Inverted,
                },
            },
            "softmax" => LayerKind::Softmax,
            other => return Err(bad(format!("unknown layer type {other:?}"))),
        };
        layers.push(LayerSpec::new(name, kind));
    }
    let spec = ArchitectureSpec {
        name: v["name"].as_str().unwrap_or("net").to_string(),
        input: TensorShape::new(dims[0], dims[1], dims[2]),
        layers,
        num_classes: uint(&v, "num_classes")?,
    };
    spec.shapes()?;
    Ok(spec)
}

/// Stores a network (architecture, parameters, input channel means).
pub fn insert_network<S: Scalar>(c: &mut Container, net: &NetworkState<S>, mean: &[f64]) {
    c.insert(CNN_ARCH, arch_to_json(&net.spec).into_bytes());
    let mut w = Writer::default();
    w.u32(net.params.len());
    for p in &net.params {
        let ws: Vec<f64> = p.weights.iter().map(|v| v.as_f64()).collect();
        let bs: Vec<f64> = p.biases.iter().map(|v| v.as_f64()).collect();
        w.f64s(&ws).f64s(&bs);
    }
    c.insert(CNN_PARAMS, w.buf);
    let mut m = Writer::default();
    m.f64s(mean);
    c.insert(CNN_MEAN, m.buf);
}

/// Loads a network in evaluation mode with its input channel means.
pub fn network<S: Scalar>(c: &Container) -> Result<(NetworkState<S>, Vec<f64>)> {
    let text = std::str::from_utf8(c.get(CNN_ARCH)?).map_err(|_| Error::Format("architecture is not UTF-8".into()))?;
    let spec = arch_from_json(text)?;
    let mut r = Reader::new(c.get(CNN_PARAMS)?);
    let n = r.u32()? as usize;
    let mut params = Vec::with_capacity(n);
    for _ in 0..n {
        let weights = r.f64s()?.into_iter().map(S::from_f64_lossy).collect();
        let biases = r.f64s()?.into_iter().map(S::from_f64_lossy).collect();
        params.push(LayerParams { weights, biases });
    }
    let mean = Reader::new(c.get(CNN_MEAN)?).f64s()?;
    Ok((NetworkState::from_params(&spec, params)?, mean))
}

pub fn insert_json(c: &mut Container, name: &str, v: &Value) {
    c.insert(name, serde_json::to_vec_pretty(v).expect("json values serialise"));
}

pub fn json_section(c: &Container, name: &str) -> Result<Value> {
    serde_json::from_slice(c.get(name)?).map_err(|e| Error::Format(format!("section {name}: {e}")))
}

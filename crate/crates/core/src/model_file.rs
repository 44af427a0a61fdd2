//! Model persistence.
//!
//! Layout: a magic line `PPOU-MODEL v1`, one line of JSON describing the
//! model (network shapes, basis exponents, run configuration, and a
//! directory of named arrays), then the arrays themselves as little-endian
//! `f64` values. Storing raw bits makes a save/load round trip exact.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::Standardizer;
use crate::error::{PpouError, Result};
use crate::mixture::{Architecture, PpouModel};
use crate::nn::{Activation, DenseNet, OutputTransform};
use crate::poly_basis::{BasisFamily, PolyBasis};

pub const MAGIC: &str = "PPOU-MODEL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetMeta {
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub residual: bool,
    pub output: OutputTransform,
}

impl NetMeta {
    fn of(net: &DenseNet) -> Self {
        Self {
            widths: net.widths().to_vec(),
            activation: net.activation(),
            residual: net.residual(),
            output: net.output_transform(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in values.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisMeta {
    pub family: BasisFamily,
    pub latent_dim: usize,
    pub degree: usize,
    pub exponents: Vec<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub architecture: Architecture,
    pub input_dim: usize,
    pub clusters: usize,
    pub basis: BasisMeta,
    pub encoder: Option<NetMeta>,
    pub classifier: NetMeta,
    pub config: Option<RunConfig>,
    pub arrays: Vec<ArrayEntry>,
    pub payload_values: usize,
}

struct Payload {
    entries: Vec<ArrayEntry>,
    values: Vec<f64>,
}

impl Payload {
    fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: &[f64]) {
        self.entries.push(ArrayEntry {
            name: name.into(),
            shape,
            offset: self.values.len(),
        });
        self.values.extend_from_slice(data);
    }
}

fn net_arrays(prefix: &str, net: &DenseNet, p: &mut Payload) {
    for (name, shape, data) in net.named_arrays() {
        p.push(format!("{prefix}.{name}"), shape, data);
    }
}

pub fn to_bytes(model: &PpouModel, config: Option<&RunConfig>) -> Result<Vec<u8>> {
    model.validate()?;
    let mut p = Payload {
        entries: Vec::new(),
        values: Vec::new(),
    };
    let d = model.input_dim();
    p.push("input_map.center", vec![d], &model.input_map.center);
    p.push("input_map.half_range", vec![d], &model.input_map.half_range);
    if let Some(enc) = &model.encoder {
        net_arrays("encoder", enc, &mut p);
    }
    net_arrays("classifier", &model.classifier, &mut p);
    let coeffs: Vec<f64> = model.coeffs.iter().copied().collect();
    p.push("coeffs", vec![model.coeffs.nrows(), model.coeffs.ncols()], &coeffs);
    p.push("sigma2", vec![model.clusters()], &model.sigma2);
    p.push("sigma0_2", vec![], &[model.sigma0_2]);
    p.push("sigma_floor", vec![], &[model.sigma_floor]);
    let header = Header {
        format_version: FORMAT_VERSION,
        architecture: model.architecture,
        input_dim: d,
        clusters: model.clusters(),
        basis: BasisMeta {
            family: model.basis.family(),
            latent_dim: model.basis.latent_dim(),
            degree: model.basis.degree(),
            exponents: model.basis.exponents().to_vec(),
        },
        encoder: model.encoder.as_ref().map(NetMeta::of),
        classifier: NetMeta::of(&model.classifier),
        config: config.cloned(),
        arrays: p.entries,
        payload_values: p.values.len(),
    };
    let json = serde_json::to_string(&header).map_err(|e| PpouError::Format(e.to_string()))?;
    let mut out = format!("{MAGIC} v{FORMAT_VERSION}\n{json}\n").into_bytes();
    out.reserve(p.values.len() * 8);
    for v in &p.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn split_line(bytes: &[u8]) -> Result<(&[u8], &[u8])> {
    let pos = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| PpouError::Format("truncated model file header".into()))?;
    Ok((&bytes[..pos], &bytes[pos + 1..]))
}

fn lookup<'a>(header: &Header, values: &'a [f64], name: &str, shape: &[usize]) -> Result<&'a [f64]> {
    let e = header
        .arrays
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| PpouError::Format(format!("model file lacks array `{name}`")))?;
    if e.shape != shape {
        return Err(PpouError::Format(format!(
            "array `{name}` has shape {:?}, expected {shape:?}",
            e.shape
        )));
    }
    let len: usize = shape.iter().product();
    values
        .get(e.offset..e.offset + len)
        .ok_or_else(|| PpouError::Format(format!("array `{name}` runs past the payload")))
}

fn load_net(prefix: &str, meta: &NetMeta, header: &Header, values: &[f64]) -> Result<DenseNet> {
    let mut net = DenseNet::zeros(&meta.widths, meta.activation, meta.residual, meta.output)?;
    let mut params = Vec::with_capacity(net.num_params());
    for (name, shape, _) in net.named_arrays() {
        params.extend_from_slice(lookup(header, values, &format!("{prefix}.{name}"), &shape)?);
    }
    net.set_params(&params)?;
    Ok(net)
}

pub fn from_bytes(bytes: &[u8]) -> Result<(PpouModel, Header)> {
    let (magic, rest) = split_line(bytes)?;
    let magic = std::str::from_utf8(magic).map_err(|_| PpouError::Format("model file magic is not text".into()))?;
    let version = magic
        .strip_prefix(MAGIC)
        .and_then(|v| v.trim().strip_prefix('v'))
        .ok_or_else(|| PpouError::Format("not a model file".into()))?;
    if version != FORMAT_VERSION.to_string() {
        return Err(PpouError::Format(format!(
            "unsupported model file version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let (json, payload) = split_line(rest)?;
    let header: Header =
        serde_json::from_slice(json).map_err(|e| PpouError::Format(format!("bad model header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(PpouError::Format(format!("unsupported format version {}", header.format_version)));
    }
    if payload.len() != header.payload_values * 8 {
        return Err(PpouError::Format(format!(
            "payload has {} bytes, header declares {} values",
            payload.len(),
            header.payload_values
        )));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();

    let d = header.input_dim;
    let j = header.clusters;
    let input_map = Standardizer {
        center: lookup(&header, &values, "input_map.center", &[d])?.to_vec(),
        half_range: lookup(&header, &values, "input_map.half_range", &[d])?.to_vec(),
    };
    let encoder = match &header.encoder {
        Some(meta) => Some(load_net("encoder", meta, &header, &values)?),
        None => None,
    };
    let classifier = load_net("classifier", &header.classifier, &header, &values)?;
    let b = &header.basis;
    let basis = PolyBasis::from_exponents(b.latent_dim, b.degree, b.family, b.exponents.clone())?;
    let k = basis.len();
    let coeffs = Array2::from_shape_vec((j, k), lookup(&header, &values, "coeffs", &[j, k])?.to_vec())
        .map_err(|e| PpouError::Format(e.to_string()))?;
    let model = PpouModel {
        architecture: header.architecture,
        input_map,
        encoder,
        classifier,
        basis,
        coeffs,
        sigma2: lookup(&header, &values, "sigma2", &[j])?.to_vec(),
        sigma0_2: lookup(&header, &values, "sigma0_2", &[])?[0],
        sigma_floor: lookup(&header, &values, "sigma_floor", &[])?[0],
    };
    model.validate().map_err(|e| PpouError::Format(format!("inconsistent model file: {e}")))?;
    Ok((model, header))
}

pub fn save(path: &Path, model: &PpouModel, config: Option<&RunConfig>) -> Result<()> {
    let bytes = to_bytes(model, config)?;
    fs::write(path, bytes).map_err(|e| PpouError::io(path, e))
}

pub fn load(path: &Path) -> Result<(PpouModel, Header)> {
    let bytes = fs::read(path).map_err(|e| PpouError::io(path, e))?;
    from_bytes(&bytes)
}

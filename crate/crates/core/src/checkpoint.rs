//! Named-tensor checkpoint container.
//!
//! The on-disk layout is the safetensors layout: an 8-byte little-endian
//! header length, a JSON header mapping each tensor name to
//! `{dtype, shape, data_offsets}` plus an optional `__metadata__` string map,
//! then the raw little-endian payload. Headers are written with sorted keys,
//! padded with spaces to an 8-byte boundary, and tensors are laid out in name
//! order, so the same checkpoint always serializes to the same bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::tensor::{Activation, DType, Tensor};
use crate::transform::{Branch, DenseMlp, MoeMlp};

const METADATA_KEY: &str = "__metadata__";

/// Tensor-name templates. `{i}` is the layer index, `{b}` the branch index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NamingScheme {
    pub embed: String,
    pub lm_head: String,
    pub final_norm: String,
    pub input_norm: String,
    pub post_attention_norm: String,
    pub q_proj: String,
    pub k_proj: String,
    pub v_proj: String,
    pub o_proj: String,
    pub gate: String,
    pub up: String,
    pub down: String,
    pub branch_gate: String,
    pub branch_up: String,
    pub branch_down: String,
    pub branch_alpha: String,
}

impl Default for NamingScheme {
    fn default() -> Self {
        Self::llama()
    }
}

/// Which projection of an MLP a tensor name refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MlpRole {
    Gate,
    Up,
    Down,
    Alpha,
}

fn fill(template: &str, layer: usize, branch: Option<usize>) -> String {
    let s = template.replace("{i}", &layer.to_string());
    match branch {
        Some(b) => s.replace("{b}", &b.to_string()),
        None => s,
    }
}

/// Matches `name` against a template, returning the integers bound to its
/// placeholders in order of appearance.
fn match_template(template: &str, name: &str) -> Option<Vec<usize>> {
    let mut captures = Vec::new();
    let mut rest_t = template;
    let mut rest_n = name;
    loop {
        match rest_t.find('{') {
            None => return (rest_t == rest_n).then_some(captures),
            Some(open) => {
                let close = rest_t[open..].find('}')? + open;
                let literal = &rest_t[..open];
                rest_n = rest_n.strip_prefix(literal)?;
                let digits = rest_n.bytes().take_while(u8::is_ascii_digit).count();
                if digits == 0 {
                    return None;
                }
                captures.push(rest_n[..digits].parse().ok()?);
                rest_n = &rest_n[digits..];
                rest_t = &rest_t[close + 1..];
            }
        }
    }
}

impl NamingScheme {
    /// `model.layers.{i}.mlp.gate_proj.weight` and friends, shared by the
    /// Llama and Qwen2 families.
    pub fn llama() -> Self {
        let layer = |s: &str| format!("model.layers.{{i}}.{s}");
        Self {
            embed: "model.embed_tokens.weight".into(),
            lm_head: "lm_head.weight".into(),
            final_norm: "model.norm.weight".into(),
            input_norm: layer("input_layernorm.weight"),
            post_attention_norm: layer("post_attention_layernorm.weight"),
            q_proj: layer("self_attn.q_proj.weight"),
            k_proj: layer("self_attn.k_proj.weight"),
            v_proj: layer("self_attn.v_proj.weight"),
            o_proj: layer("self_attn.o_proj.weight"),
            gate: layer("mlp.gate_proj.weight"),
            up: layer("mlp.up_proj.weight"),
            down: layer("mlp.down_proj.weight"),
            branch_gate: layer("mlp.branches.{b}.gate.weight"),
            branch_up: layer("mlp.branches.{b}.up.weight"),
            branch_down: layer("mlp.branches.{b}.down.weight"),
            branch_alpha: layer("mlp.branches.{b}.alpha"),
        }
    }

    pub fn dense_name(&self, layer: usize, role: MlpRole) -> Option<String> {
        let t = match role {
            MlpRole::Gate => &self.gate,
            MlpRole::Up => &self.up,
            MlpRole::Down => &self.down,
            MlpRole::Alpha => return None,
        };
        Some(fill(t, layer, None))
    }

    pub fn branch_name(&self, layer: usize, branch: usize, role: MlpRole) -> String {
        let t = match role {
            MlpRole::Gate => &self.branch_gate,
            MlpRole::Up => &self.branch_up,
            MlpRole::Down => &self.branch_down,
            MlpRole::Alpha => &self.branch_alpha,
        };
        fill(t, layer, Some(branch))
    }

    pub fn layer_name(&self, template: &str, layer: usize) -> String {
        fill(template, layer, None)
    }

    /// `(layer, role)` of a dense MLP projection name.
    pub fn parse_dense(&self, name: &str) -> Option<(usize, MlpRole)> {
        [
            (&self.gate, MlpRole::Gate),
            (&self.up, MlpRole::Up),
            (&self.down, MlpRole::Down),
        ]
        .into_iter()
        .find_map(|(t, role)| match_template(t, name).map(|c| (c[0], role)))
    }

    /// `(layer, branch, role)` of a branch tensor name.
    pub fn parse_branch(&self, name: &str) -> Option<(usize, usize, MlpRole)> {
        [
            (&self.branch_gate, MlpRole::Gate),
            (&self.branch_up, MlpRole::Up),
            (&self.branch_down, MlpRole::Down),
            (&self.branch_alpha, MlpRole::Alpha),
        ]
        .into_iter()
        .find_map(|(t, role)| match_template(t, name).map(|c| (c[0], c[1], role)))
    }

    /// Layer index of any per-layer tensor name covered by the scheme.
    pub fn parse_layer(&self, name: &str) -> Option<usize> {
        if let Some((l, _)) = self.parse_dense(name) {
            return Some(l);
        }
        if let Some((l, _, _)) = self.parse_branch(name) {
            return Some(l);
        }
        [
            &self.input_norm,
            &self.post_attention_norm,
            &self.q_proj,
            &self.k_proj,
            &self.v_proj,
            &self.o_proj,
        ]
        .into_iter()
        .find_map(|t| match_template(t, name).map(|c| c[0]))
    }
}

/// Architecture description carried in the header's metadata map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub family: String,
    pub num_layers: usize,
    pub d_model: usize,
    /// Width of the dense MLP this checkpoint was derived from.
    pub d_inter: usize,
    pub vocab_size: usize,
    pub num_heads: Option<usize>,
    pub activation: Activation,
    pub rms_norm_eps: f32,
    /// Branch count each converted layer was created with.
    pub source_branches: BTreeMap<usize, usize>,
    /// Unrecognised metadata entries, preserved verbatim.
    pub extra: BTreeMap<String, String>,
}

const META_FAMILY: &str = "family";
const META_LAYERS: &str = "num_layers";
const META_D_MODEL: &str = "d_model";
const META_D_INTER: &str = "d_inter";
const META_VOCAB: &str = "vocab_size";
const META_HEADS: &str = "num_heads";
const META_ACTIVATION: &str = "activation";
const META_EPS: &str = "rms_norm_eps";
const META_SOURCE_PREFIX: &str = "source_branches.";

impl ModelMeta {
    fn to_map(&self) -> BTreeMap<String, String> {
        let mut m = self.extra.clone();
        m.insert(META_FAMILY.into(), self.family.clone());
        m.insert(META_LAYERS.into(), self.num_layers.to_string());
        m.insert(META_D_MODEL.into(), self.d_model.to_string());
        m.insert(META_D_INTER.into(), self.d_inter.to_string());
        m.insert(META_VOCAB.into(), self.vocab_size.to_string());
        if let Some(h) = self.num_heads {
            m.insert(META_HEADS.into(), h.to_string());
        }
        m.insert(META_ACTIVATION.into(), self.activation.to_string());
        m.insert(META_EPS.into(), format!("{:e}", self.rms_norm_eps));
        for (layer, b) in &self.source_branches {
            m.insert(format!("{META_SOURCE_PREFIX}{layer}"), b.to_string());
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, Tensor>,
    pub meta: ModelMeta,
    pub naming: NamingScheme,
}

/// MLP of one layer, in whichever form the checkpoint stores it.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerMlp {
    Dense(DenseMlp),
    Moe(MoeMlp),
}

impl LayerMlp {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            LayerMlp::Dense(m) => crate::transform::dense_forward(m, x),
            LayerMlp::Moe(m) => crate::transform::moe_forward(m, x),
        }
    }

    pub fn d_model(&self) -> usize {
        match self {
            LayerMlp::Dense(m) => m.d_model(),
            LayerMlp::Moe(m) => m.d_model(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerForm {
    Dense,
    Moe,
}

fn parse_usize(map: &BTreeMap<String, String>, key: &str) -> Result<Option<usize>> {
    map.get(key)
        .map(|v| {
            v.parse()
                .map_err(|_| Error::format(8, format!("metadata '{key}' is not an integer: '{v}'")))
        })
        .transpose()
}

impl Checkpoint {
    /// Builds a checkpoint from tensors, inferring any metadata not supplied
    /// in `hints` from tensor names and shapes.
    pub fn from_tensors(
        tensors: BTreeMap<String, Tensor>,
        hints: BTreeMap<String, String>,
    ) -> Result<Self> {
        let naming = NamingScheme::default();
        let meta = infer_meta(&tensors, &naming, hints)?;
        let ckpt = Self {
            tensors,
            meta,
            naming,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Schema(format!("missing tensor '{name}'")))
    }

    pub fn layer_form(&self, layer: usize) -> Result<LayerForm> {
        let dense = [MlpRole::Gate, MlpRole::Up, MlpRole::Down]
            .iter()
            .any(|&r| {
                self.naming
                    .dense_name(layer, r)
                    .is_some_and(|n| self.tensors.contains_key(&n))
            });
        let moe = self
            .tensors
            .contains_key(&self.naming.branch_name(layer, 0, MlpRole::Alpha))
            || self
                .tensors
                .keys()
                .any(|n| matches!(self.naming.parse_branch(n), Some((l, _, _)) if l == layer));
        match (dense, moe) {
            (true, false) => Ok(LayerForm::Dense),
            (false, true) => Ok(LayerForm::Moe),
            (true, true) => Err(Error::Schema(format!(
                "layer {layer} holds both dense and branch MLP tensors"
            ))),
            (false, false) => Err(Error::Schema(format!(
                "missing tensor '{}'",
                self.naming.dense_name(layer, MlpRole::Gate).unwrap()
            ))),
        }
    }

    /// Checks the structural invariants: every layer has exactly one MLP form
    /// with complete tensors, and shapes agree with the metadata.
    pub fn validate(&self) -> Result<()> {
        if self.tensors.is_empty() {
            return Err(Error::format(0, "checkpoint holds no tensors"));
        }
        for layer in 0..self.meta.num_layers {
            let mlp = resolve_mlp(self, layer)?;
            if mlp.d_model() != self.meta.d_model {
                return Err(Error::Schema(format!(
                    "layer {layer}: MLP width {} disagrees with d_model {}",
                    mlp.d_model(),
                    self.meta.d_model
                )));
            }
            if let LayerMlp::Dense(d) = &mlp {
                if d.d_inter() != self.meta.d_inter {
                    return Err(Error::Schema(format!(
                        "layer {layer}: intermediate width {} disagrees with d_inter {}",
                        d.d_inter(),
                        self.meta.d_inter
                    )));
                }
            }
        }
        Ok(())
    }

    /// Replaces the MLP tensors of `layer` with `mlp`.
    pub fn write_mlp(&mut self, layer: usize, mlp: &LayerMlp) -> Result<()> {
        if layer >= self.meta.num_layers {
            return Err(Error::Schema(format!(
                "layer {layer} out of range for {} layers",
                self.meta.num_layers
            )));
        }
        let naming = self.naming.clone();
        self.tensors.retain(|name, _| {
            let dense = matches!(naming.parse_dense(name), Some((l, _)) if l == layer);
            let branch = matches!(naming.parse_branch(name), Some((l, _, _)) if l == layer);
            !(dense || branch)
        });
        match mlp {
            LayerMlp::Dense(d) => {
                let name = |r| naming.dense_name(layer, r).unwrap();
                self.tensors.insert(name(MlpRole::Gate), d.w_gate.clone());
                self.tensors.insert(name(MlpRole::Up), d.w_up.clone());
                self.tensors.insert(name(MlpRole::Down), d.w_down.clone());
                self.meta.source_branches.remove(&layer);
            }
            LayerMlp::Moe(m) => {
                for (b, br) in m.branches.iter().enumerate() {
                    let name = |r| naming.branch_name(layer, b, r);
                    self.tensors.insert(name(MlpRole::Gate), br.w_gate.clone());
                    self.tensors.insert(name(MlpRole::Up), br.w_up.clone());
                    self.tensors.insert(name(MlpRole::Down), br.w_down.clone());
                    self.tensors
                        .insert(name(MlpRole::Alpha), Tensor::scalar(br.alpha)?);
                }
                self.meta.source_branches.insert(layer, m.source_branches);
            }
        }
        Ok(())
    }

    /// Serializes to the container layout.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.tensors.is_empty() {
            return Err(Error::format(0, "container requires at least one tensor"));
        }
        let mut header = Map::new();
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            let size = t.len() * t.dtype().size_in_bytes();
            let mut entry = Map::new();
            entry.insert("dtype".into(), Value::from(t.dtype().as_str()));
            entry.insert("shape".into(), Value::from(t.shape().to_vec()));
            entry.insert("data_offsets".into(), Value::from(vec![offset, offset + size]));
            header.insert(name.clone(), Value::Object(entry));
            offset += size;
        }
        let meta: Map<String, Value> = self
            .meta
            .to_map()
            .into_iter()
            .map(|(k, v)| (k, Value::String(v)))
            .collect();
        header.insert(METADATA_KEY.into(), Value::Object(meta));
        let mut header_bytes = serde_json::to_vec(&Value::Object(header))?;
        while header_bytes.len() % 8 != 0 {
            header_bytes.push(b' ');
        }

        let mut out = Vec::with_capacity(8 + header_bytes.len() + offset);
        out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        for t in self.tensors.values() {
            match t.dtype() {
                DType::F32 => t
                    .data()
                    .iter()
                    .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                DType::F16 => t.data().iter().for_each(|&v| {
                    out.extend_from_slice(&half::f16::from_f32(v).to_le_bytes())
                }),
                DType::BF16 => t.data().iter().for_each(|&v| {
                    out.extend_from_slice(&half::bf16::from_f32(v).to_le_bytes())
                }),
            }
        }
        Ok(out)
    }

    /// Parses the container layout, validating offsets, dtypes and the model
    /// schema.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = parse_header(bytes)?;
        let payload_start = 8 + header.len as usize;
        let payload = &bytes[payload_start..];
        let mut tensors = BTreeMap::new();
        for info in header.tensors {
            let raw = &payload[info.begin..info.end];
            let data: Vec<f32> = match info.dtype {
                DType::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
                DType::F16 => raw
                    .chunks_exact(2)
                    .map(|c| half::f16::from_le_bytes([c[0], c[1]]).to_f32())
                    .collect(),
                DType::BF16 => raw
                    .chunks_exact(2)
                    .map(|c| half::bf16::from_le_bytes([c[0], c[1]]).to_f32())
                    .collect(),
            };
            if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
                return Err(Error::format(
                    (payload_start + info.begin + pos * info.dtype.size_in_bytes()) as u64,
                    format!("non-finite value in tensor '{}'", info.name),
                ));
            }
            tensors.insert(
                info.name,
                Tensor::from_parts_unchecked(info.shape, info.dtype, data),
            );
        }
        Self::from_tensors(tensors, header.metadata)
    }
}

/// Header entry for one stored tensor; offsets are relative to the payload.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorInfo {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub begin: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Header {
    pub len: u64,
    pub tensors: Vec<TensorInfo>,
    pub metadata: BTreeMap<String, String>,
}

#[derive(Deserialize)]
struct RawEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: (usize, usize),
}

/// Parses and validates the header without touching the payload values.
pub fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 8 {
        return Err(Error::format(0, "file shorter than the 8-byte header length"));
    }
    let len = u64::from_le_bytes(bytes[..8].try_into().unwrap());
    let payload_len = (bytes.len() as u64)
        .checked_sub(8 + len)
        .ok_or_else(|| Error::format(0, format!("header length {len} exceeds file size")))?
        as usize;
    let raw: Map<String, Value> = serde_json::from_slice(&bytes[8..8 + len as usize])
        .map_err(|e| Error::format(8 + e.column() as u64, format!("malformed header: {e}")))?;

    let mut metadata = BTreeMap::new();
    let mut tensors = Vec::new();
    for (name, value) in raw {
        if name == METADATA_KEY {
            let map: BTreeMap<String, String> = serde_json::from_value(value)
                .map_err(|e| Error::format(8, format!("malformed metadata: {e}")))?;
            metadata = map;
            continue;
        }
        let entry: RawEntry = serde_json::from_value(value)
            .map_err(|e| Error::format(8, format!("malformed entry '{name}': {e}")))?;
        let dtype = DType::parse(&entry.dtype).ok_or_else(|| {
            Error::format(8, format!("unknown dtype '{}' for '{name}'", entry.dtype))
        })?;
        if entry.shape.contains(&0) {
            return Err(Error::format(8, format!("zero extent in shape of '{name}'")));
        }
        let (begin, end) = entry.data_offsets;
        let expected = entry.shape.iter().product::<usize>() * dtype.size_in_bytes();
        if end < begin || end - begin != expected {
            return Err(Error::format(
                8 + len + begin as u64,
                format!(
                    "'{name}' spans {begin}..{end} but shape {:?} of {} needs {expected} bytes",
                    entry.shape,
                    dtype.as_str()
                ),
            ));
        }
        if end > payload_len {
            return Err(Error::format(
                8 + len + end as u64,
                format!("'{name}' ends past the payload ({payload_len} bytes)"),
            ));
        }
        tensors.push(TensorInfo {
            name,
            dtype,
            shape: entry.shape,
            begin,
            end,
        });
    }
    if tensors.is_empty() {
        return Err(Error::format(8, "container holds no tensors"));
    }
    let mut by_offset: Vec<&TensorInfo> = tensors.iter().collect();
    by_offset.sort_by_key(|t| (t.begin, t.end));
    for pair in by_offset.windows(2) {
        if pair[1].begin < pair[0].end {
            return Err(Error::format(
                8 + len + pair[1].begin as u64,
                format!("'{}' overlaps '{}'", pair[1].name, pair[0].name),
            ));
        }
    }
    Ok(Header {
        len,
        tensors,
        metadata,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes).map_err(|e| e.context(path.display().to_string()))
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    ckpt.validate()?;
    let bytes = ckpt.to_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Returns the layer's MLP: the dense triple, or the branch list with its
/// scalar gates.
pub fn resolve_mlp(ckpt: &Checkpoint, layer: usize) -> Result<LayerMlp> {
    if layer >= ckpt.meta.num_layers {
        return Err(Error::Schema(format!(
            "layer {layer} out of range for {} layers",
            ckpt.meta.num_layers
        )));
    }
    let naming = &ckpt.naming;
    let activation = ckpt.meta.activation;
    match ckpt.layer_form(layer)? {
        LayerForm::Dense => {
            let get = |r| ckpt.tensor(&naming.dense_name(layer, r).unwrap()).cloned();
            let mlp = DenseMlp::new(
                get(MlpRole::Gate)?,
                get(MlpRole::Up)?,
                get(MlpRole::Down)?,
                activation,
            )
            .map_err(|e| e.context(format!("layer {layer}")))?;
            Ok(LayerMlp::Dense(mlp))
        }
        LayerForm::Moe => {
            let indices: BTreeSet<usize> = ckpt
                .tensors
                .keys()
                .filter_map(|n| match naming.parse_branch(n) {
                    Some((l, b, _)) if l == layer => Some(b),
                    _ => None,
                })
                .collect();
            let count = indices.iter().next_back().map_or(0, |&m| m + 1);
            let mut branches = Vec::with_capacity(count);
            for b in 0..count {
                let get = |r| ckpt.tensor(&naming.branch_name(layer, b, r));
                let alpha_t = get(MlpRole::Alpha)?;
                if alpha_t.len() != 1 {
                    return Err(Error::Schema(format!(
                        "'{}' must hold exactly one element",
                        naming.branch_name(layer, b, MlpRole::Alpha)
                    )));
                }
                let branch = Branch::new(
                    get(MlpRole::Gate)?.clone(),
                    get(MlpRole::Up)?.clone(),
                    get(MlpRole::Down)?.clone(),
                    alpha_t.data()[0],
                )
                .map_err(|e| e.context(format!("layer {layer} branch {b}")))?;
                branches.push(branch);
            }
            let source = ckpt
                .meta
                .source_branches
                .get(&layer)
                .copied()
                .unwrap_or(count);
            let mlp = MoeMlp::new(branches, activation, source)
                .map_err(|e| e.context(format!("layer {layer}")))?;
            Ok(LayerMlp::Moe(mlp))
        }
    }
}

fn infer_meta(
    tensors: &BTreeMap<String, Tensor>,
    naming: &NamingScheme,
    mut hints: BTreeMap<String, String>,
) -> Result<ModelMeta> {
    let num_layers = match parse_usize(&hints, META_LAYERS)? {
        Some(l) => l,
        None => tensors
            .keys()
            .filter_map(|n| naming.parse_layer(n))
            .max()
            .map_or(0, |m| m + 1),
    };

    let first_dense = |role| {
        (0..num_layers).find_map(|l| {
            naming
                .dense_name(l, role)
                .and_then(|n| tensors.get(&n))
                .and_then(|t| t.dims2().ok())
        })
    };
    let branch_gates = |layer: usize| -> Vec<(usize, usize)> {
        tensors
            .iter()
            .filter_map(|(n, t)| match naming.parse_branch(n) {
                Some((l, _, MlpRole::Gate)) if l == layer => t.dims2().ok(),
                _ => None,
            })
            .collect()
    };
    let embed = tensors.get(&naming.embed).and_then(|t| t.dims2().ok());

    let d_model = match parse_usize(&hints, META_D_MODEL)? {
        Some(d) => d,
        None => first_dense(MlpRole::Gate)
            .map(|(_, c)| c)
            .or(embed.map(|(_, c)| c))
            .or_else(|| branch_gates(0).first().map(|&(_, c)| c))
            .unwrap_or(0),
    };
    let d_inter = match parse_usize(&hints, META_D_INTER)? {
        Some(d) => d,
        None => first_dense(MlpRole::Gate)
            .map(|(r, _)| r)
            .or_else(|| {
                (0..num_layers)
                    .map(|l| branch_gates(l).iter().map(|&(r, _)| r).sum::<usize>())
                    .max()
            })
            .unwrap_or(0),
    };
    let vocab_size = match parse_usize(&hints, META_VOCAB)? {
        Some(v) => v,
        None => embed
            .map(|(r, _)| r)
            .or_else(|| tensors.get(&naming.lm_head).and_then(|t| t.dims2().ok()).map(|(r, _)| r))
            .unwrap_or(0),
    };
    let num_heads = parse_usize(&hints, META_HEADS)?;
    let activation = match hints.get(META_ACTIVATION) {
        Some(a) => a
            .parse()
            .map_err(|_| Error::format(8, format!("unknown activation tag '{a}'")))?,
        None => Activation::Silu,
    };
    let rms_norm_eps = match hints.get(META_EPS) {
        Some(e) => e
            .parse()
            .map_err(|_| Error::format(8, format!("metadata '{META_EPS}' is not a number: '{e}'")))?,
        None => 1e-6,
    };
    let family = hints
        .get(META_FAMILY)
        .cloned()
        .unwrap_or_else(|| "llama".into());

    let mut source_branches = BTreeMap::new();
    let source_keys: Vec<String> = hints
        .keys()
        .filter(|k| k.starts_with(META_SOURCE_PREFIX))
        .cloned()
        .collect();
    for key in source_keys {
        let layer = key[META_SOURCE_PREFIX.len()..]
            .parse()
            .map_err(|_| Error::format(8, format!("bad metadata key '{key}'")))?;
        let b = parse_usize(&hints, &key)?.unwrap();
        source_branches.insert(layer, b);
        hints.remove(&key);
    }
    for k in [
        META_FAMILY,
        META_LAYERS,
        META_D_MODEL,
        META_D_INTER,
        META_VOCAB,
        META_HEADS,
        META_ACTIVATION,
        META_EPS,
    ] {
        hints.remove(k);
    }

    Ok(ModelMeta {
        family,
        num_layers,
        d_model,
        d_inter,
        vocab_size,
        num_heads,
        activation,
        rms_norm_eps,
        source_branches,
        extra: hints,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Checkpoint {
        let mut tensors = BTreeMap::new();
        let n = NamingScheme::llama();
        let w = |r, c, s: f32| {
            Tensor::matrix(r, c, (0..r * c).map(|i| s + i as f32 * 0.5).collect()).unwrap()
        };
        tensors.insert(n.dense_name(0, MlpRole::Gate).unwrap(), w(6, 4, 1.0));
        tensors.insert(n.dense_name(0, MlpRole::Up).unwrap(), w(6, 4, 2.0));
        tensors.insert(n.dense_name(0, MlpRole::Down).unwrap(), w(4, 6, 3.0));
        tensors.insert(n.embed.clone(), w(10, 4, 0.25));
        Checkpoint::from_tensors(tensors, BTreeMap::new()).unwrap()
    }

    #[test]
    fn template_matching() {
        let n = NamingScheme::llama();
        assert_eq!(
            n.parse_dense("model.layers.12.mlp.up_proj.weight"),
            Some((12, MlpRole::Up))
        );
        assert_eq!(
            n.parse_branch("model.layers.3.mlp.branches.15.alpha"),
            Some((3, 15, MlpRole::Alpha))
        );
        assert_eq!(n.parse_dense("model.layers.x.mlp.up_proj.weight"), None);
        assert_eq!(n.parse_dense("model.layers.1.mlp.up_proj.weightx"), None);
        assert_eq!(n.parse_layer("model.layers.7.self_attn.q_proj.weight"), Some(7));
    }

    #[test]
    fn templates_are_injective() {
        let n = NamingScheme::llama();
        let mut seen = BTreeSet::new();
        for layer in 0..12 {
            for role in [MlpRole::Gate, MlpRole::Up, MlpRole::Down] {
                let name = n.dense_name(layer, role).unwrap();
                assert_eq!(n.parse_dense(&name), Some((layer, role)));
                assert!(seen.insert(name));
            }
            for b in 0..12 {
                for role in [MlpRole::Gate, MlpRole::Up, MlpRole::Down, MlpRole::Alpha] {
                    let name = n.branch_name(layer, b, role);
                    assert_eq!(n.parse_branch(&name), Some((layer, b, role)));
                    assert!(seen.insert(name));
                }
            }
        }
    }

    #[test]
    fn infers_metadata_from_shapes() {
        let c = tiny();
        assert_eq!(c.meta.num_layers, 1);
        assert_eq!(c.meta.d_model, 4);
        assert_eq!(c.meta.d_inter, 6);
        assert_eq!(c.meta.vocab_size, 10);
        assert_eq!(c.meta.activation, Activation::Silu);
    }

    #[test]
    fn bytes_round_trip() {
        let c = tiny();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        assert_eq!(header_len % 8, 0);
    }

    #[test]
    fn half_precision_round_trip_is_bit_exact() {
        let mut c = tiny();
        for t in c.tensors.values_mut() {
            *t = t.clone().with_dtype(DType::BF16);
        }
        let name = c.naming.embed.clone();
        let e = c.tensors[&name].clone().with_dtype(DType::F16);
        c.tensors.insert(name, e);
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    fn handmade(header: &str, payload_len: usize) -> Vec<u8> {
        let mut out = (header.len() as u64).to_le_bytes().to_vec();
        out.extend_from_slice(header.as_bytes());
        out.extend(std::iter::repeat_n(0u8, payload_len));
        out
    }

    #[test]
    fn rejects_overlapping_ranges() {
        let header = r#"{"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]},"b":{"dtype":"F32","shape":[2],"data_offsets":[4,12]}}"#;
        let err = Checkpoint::from_bytes(&handmade(header, 12)).unwrap_err();
        match err {
            Error::Format { offset, message } => {
                assert_eq!(offset, 8 + header.len() as u64 + 4);
                assert!(message.contains("overlaps"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_headers() {
        let unknown = r#"{"a":{"dtype":"I8","shape":[2],"data_offsets":[0,2]}}"#;
        assert!(matches!(
            Checkpoint::from_bytes(&handmade(unknown, 2)),
            Err(Error::Format { .. })
        ));
        let short = r#"{"a":{"dtype":"F32","shape":[3],"data_offsets":[0,8]}}"#;
        assert!(matches!(
            Checkpoint::from_bytes(&handmade(short, 8)),
            Err(Error::Format { .. })
        ));
        let past_end = r#"{"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]}}"#;
        assert!(matches!(
            Checkpoint::from_bytes(&handmade(past_end, 4)),
            Err(Error::Format { .. })
        ));
        assert!(matches!(
            Checkpoint::from_bytes(&handmade("{not json", 0)),
            Err(Error::Format { .. })
        ));
        assert!(matches!(
            Checkpoint::from_bytes(&handmade("{}", 0)),
            Err(Error::Format { .. })
        ));
        assert!(matches!(Checkpoint::from_bytes(&[1, 2, 3]), Err(Error::Format { .. })));
    }

    #[test]
    fn empty_checkpoint_cannot_be_saved() {
        let mut c = tiny();
        c.tensors.clear();
        c.meta.num_layers = 0;
        assert!(matches!(c.to_bytes(), Err(Error::Format { .. })));
    }

    #[test]
    fn resolve_reports_missing_key() {
        let mut c = tiny();
        let up = c.naming.dense_name(0, MlpRole::Up).unwrap();
        c.tensors.remove(&up);
        let err = resolve_mlp(&c, 0).unwrap_err();
        assert!(err.to_string().contains(&up), "{err}");
        assert!(matches!(resolve_mlp(&c, 1), Err(Error::Schema(_))));
    }

    #[test]
    fn mixed_forms_are_rejected() {
        let mut c = tiny();
        let name = c.naming.branch_name(0, 0, MlpRole::Alpha);
        c.tensors.insert(name, Tensor::scalar(1.0).unwrap());
        assert!(matches!(c.layer_form(0), Err(Error::Schema(_))));
    }
}

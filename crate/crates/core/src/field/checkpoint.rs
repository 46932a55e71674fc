//! Binary snapshot of a field plus optimizer state.
//!
//! Layout: the magic `VOXF`, a little-endian `u32` format version, a
//! little-endian `u32` header length, a UTF-8 header of `key = value` lines,
//! then every tensor listed in the header as consecutive little-endian `f32`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::{
    build_pe_grid, Aabb, ExplicitField, FieldError, GridSpec, ImplicitField, Linear, Mlp,
    ModelKind, VoxelField, HIDDEN_WIDTH, PE_CHANNELS,
};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"VOXF";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointHeader {
    pub kind: ModelKind,
    pub spec: GridSpec,
    /// Number of completed optimization steps.
    pub iteration: u64,
    pub seed: u64,
    pub config_digest: String,
    pub prompt: String,
    pub tensors: Vec<TensorEntry>,
    /// Adam step counter per parameter group.
    pub adam_steps: BTreeMap<String, u64>,
}

/// A field together with any auxiliary tensors (optimizer moments).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub field: VoxelField<f32>,
    pub extras: BTreeMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn new(field: VoxelField<f32>, iteration: u64, seed: u64, prompt: &str) -> Self {
        Self {
            header: CheckpointHeader {
                kind: field.kind(),
                spec: *field.spec(),
                iteration,
                seed,
                config_digest: String::new(),
                prompt: prompt.to_string(),
                tensors: Vec::new(),
                adam_steps: BTreeMap::new(),
            },
            field,
            extras: BTreeMap::new(),
        }
    }

    fn all_tensors(&self) -> Vec<(String, &Tensor<f32>)> {
        let mut v = self.field.params();
        v.extend(self.extras.iter().map(|(k, t)| (k.clone(), t)));
        v
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let tensors = self.all_tensors();
        let h = &self.header;
        let mut text = String::new();
        let _ = writeln!(text, "format = voxel-field");
        let _ = writeln!(text, "version = {CHECKPOINT_VERSION}");
        let _ = writeln!(text, "kind = {}", self.field.kind());
        let spec = self.field.spec();
        let b = spec.bounds;
        let _ = writeln!(
            text,
            "bounds = {:?} {:?} {:?} {:?} {:?} {:?}",
            b.min[0], b.min[1], b.min[2], b.max[0], b.max[1], b.max[2]
        );
        let r = spec.resolution;
        let _ = writeln!(text, "resolution = {} {} {}", r[0], r[1], r[2]);
        let _ = writeln!(text, "target_voxels = {}", spec.target_voxels);
        let _ = writeln!(text, "iteration = {}", h.iteration);
        let _ = writeln!(text, "seed = {}", h.seed);
        let _ = writeln!(text, "config_digest = {}", h.config_digest);
        let _ = writeln!(
            text,
            "prompt = {}",
            serde_json::to_string(&h.prompt).expect("string serializes")
        );
        for (name, step) in &h.adam_steps {
            let _ = writeln!(text, "adam_step = {name} {step}");
        }
        for (name, t) in &tensors {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            let _ = writeln!(text, "tensor = {name} {}", dims.join(" "));
        }

        let payload: usize = tensors.iter().map(|(_, t)| t.numel() * 4).sum();
        let mut out = Vec::with_capacity(12 + text.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        for (_, t) in &tensors {
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FieldError> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(FieldError::NotCheckpoint);
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(FieldError::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header_end = 12usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or(FieldError::Truncated {
                expected: hlen,
                found: bytes.len() - 12,
            })?;
        let text = std::str::from_utf8(&bytes[12..header_end])
            .map_err(|e| FieldError::Header(format!("header is not UTF-8: {e}")))?;
        let header = parse_header(text)?;

        let expected: usize = header
            .tensors
            .iter()
            .map(|t| t.shape.iter().product::<usize>() * 4)
            .sum();
        let payload = &bytes[header_end..];
        if payload.len() != expected {
            return Err(FieldError::Truncated {
                expected,
                found: payload.len(),
            });
        }
        let mut tensors = BTreeMap::new();
        let mut offset = 0;
        for entry in &header.tensors {
            let n: usize = entry.shape.iter().product();
            let data: Vec<f32> = payload[offset..offset + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            offset += 4 * n;
            tensors.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?);
        }
        let field = assemble_field(header.kind, header.spec, &mut tensors)?;
        Ok(Self {
            header,
            field,
            extras: tensors,
        })
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), FieldError> {
        let path = path.as_ref();
        let tmp = path.with_extension("voxf.partial");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, FieldError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn parse_header(text: &str) -> Result<CheckpointHeader, FieldError> {
    let bad = |m: String| FieldError::Header(m);
    let mut fields: BTreeMap<&str, &str> = BTreeMap::new();
    let mut tensors = Vec::new();
    let mut adam_steps = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (key, value) = line
            .split_once(" = ")
            .ok_or_else(|| bad(format!("line without `=`: {line:?}")))?;
        match key {
            "tensor" => {
                let mut parts = value.split_whitespace();
                let name = parts.next().ok_or_else(|| bad("unnamed tensor".into()))?;
                let shape = parts
                    .map(|p| p.parse::<usize>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|e| bad(format!("tensor {name}: {e}")))?;
                tensors.push(TensorEntry {
                    name: name.to_string(),
                    shape,
                });
            }
            "adam_step" => {
                let (name, step) = value
                    .split_once(' ')
                    .ok_or_else(|| bad(format!("bad adam_step {value:?}")))?;
                let step = step.parse().map_err(|e| bad(format!("adam_step {name}: {e}")))?;
                adam_steps.insert(name.to_string(), step);
            }
            _ => {
                fields.insert(key, value);
            }
        }
    }
    let get = |k: &str| fields.get(k).copied().ok_or_else(|| bad(format!("missing key {k}")));
    if get("format")? != "voxel-field" {
        return Err(bad(format!("unknown format {:?}", get("format")?)));
    }
    let kind: ModelKind = get("kind")?.parse().map_err(bad)?;
    let nums = |k: &str| -> Result<Vec<f64>, FieldError> {
        get(k)?
            .split_whitespace()
            .map(|p| p.parse::<f64>().map_err(|e| bad(format!("{k}: {e}"))))
            .collect()
    };
    let b = nums("bounds")?;
    let r = nums("resolution")?;
    if b.len() != 6 || r.len() != 3 {
        return Err(bad("bounds need 6 numbers and resolution 3".into()));
    }
    let bounds = Aabb {
        min: [b[0], b[1], b[2]],
        max: [b[3], b[4], b[5]],
    };
    let int = |k: &str| -> Result<u64, FieldError> {
        get(k)?.parse::<u64>().map_err(|e| bad(format!("{k}: {e}")))
    };
    let spec = GridSpec::with_resolution(
        bounds,
        [r[0] as usize, r[1] as usize, r[2] as usize],
        int("target_voxels")? as usize,
    )?;
    let prompt: String =
        serde_json::from_str(get("prompt")?).map_err(|e| bad(format!("prompt: {e}")))?;
    Ok(CheckpointHeader {
        kind,
        spec,
        iteration: int("iteration")?,
        seed: int("seed")?,
        config_digest: get("config_digest").unwrap_or("").to_string(),
        prompt,
        tensors,
        adam_steps,
    })
}

fn assemble_field(
    kind: ModelKind,
    spec: GridSpec,
    tensors: &mut BTreeMap<String, Tensor<f32>>,
) -> Result<VoxelField<f32>, FieldError> {
    let mut take = |name: &str, shape: &[usize]| -> Result<Tensor<f32>, FieldError> {
        let t = tensors.remove(name).ok_or_else(|| FieldError::KindMismatch {
            kind,
            detail: format!("missing tensor {name}"),
        })?;
        if t.shape() != shape {
            return Err(FieldError::KindMismatch {
                kind,
                detail: format!("{name} has shape {:?}, expected {shape:?}", t.shape()),
            });
        }
        Ok(t)
    };
    match kind {
        ModelKind::Explicit => Ok(VoxelField::Explicit(ExplicitField {
            density: take("density", &spec.grid_shape(1))?,
            color: take("color", &spec.grid_shape(3))?,
            act_bias: take("act_bias", &[])?,
            spec,
        })),
        ModelKind::Implicit => {
            let act_bias = take("act_bias", &[])?;
            let mut mlp = |prefix: &str, out: usize| -> Result<Mlp<f32>, FieldError> {
                let widths = [PE_CHANNELS, HIDDEN_WIDTH, HIDDEN_WIDTH, out];
                let layers = (0..3)
                    .map(|i| {
                        Ok(Linear {
                            weight: take(&format!("{prefix}.{i}.weight"), &[widths[i], widths[i + 1]])?,
                            bias: take(&format!("{prefix}.{i}.bias"), &[widths[i + 1]])?,
                        })
                    })
                    .collect::<Result<Vec<_>, FieldError>>()?;
                Ok(Mlp { layers })
            };
            let density_mlp = mlp("density_mlp", 1)?;
            let color_mlp = mlp("color_mlp", 3)?;
            Ok(VoxelField::Implicit(ImplicitField {
                pe_grid: build_pe_grid(&spec),
                density_mlp,
                color_mlp,
                act_bias,
                spec,
            }))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn explicit() -> VoxelField<f32> {
        let spec = GridSpec::with_resolution(Aabb::default(), [3, 4, 5], 60).unwrap();
        let mut f = ExplicitField::new(spec, 1e-3, 0.05);
        for (i, x) in f.density.data_mut().iter_mut().enumerate() {
            *x = i as f32 * 0.25 - 3.0;
        }
        VoxelField::Explicit(f)
    }

    #[test]
    fn explicit_roundtrip_is_bit_exact() {
        let mut ck = Checkpoint::new(explicit(), 1200, 9, "a \"quoted\"\nprompt");
        ck.header.adam_steps.insert("density".into(), 1200);
        ck.extras.insert("adam.m.density".into(), Tensor::full([1, 3, 4, 5], 0.5));
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back.field, ck.field);
        assert_eq!(back.extras, ck.extras);
        assert_eq!(back.header.prompt, ck.header.prompt);
        assert_eq!(back.header.iteration, 1200);
        assert_eq!(back.header.adam_steps["density"], 1200);
    }

    #[test]
    fn implicit_roundtrip() {
        let spec = GridSpec::with_resolution(Aabb::default(), [3, 3, 3], 27).unwrap();
        let field = VoxelField::Implicit(ImplicitField::new(spec, 1e-3, 0.05, 11));
        let ck = Checkpoint::new(field, 0, 11, "p");
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back.field, ck.field);
    }

    #[test]
    fn corrupt_inputs_are_reported() {
        let bytes = Checkpoint::new(explicit(), 0, 0, "").to_bytes();
        assert!(matches!(Checkpoint::from_bytes(b"PNG\0........"), Err(FieldError::NotCheckpoint)));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(FieldError::Truncated { .. })
        ));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(Checkpoint::from_bytes(&v2), Err(FieldError::Version { found: 2, .. })));
    }
}

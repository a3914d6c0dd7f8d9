//! Network architecture, flat parameter storage and checkpoints.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::adam::AdamState;
use super::features::{PosEnc, FEATURE_DIM};
use crate::error::{NelfError, Result};

/// How per-view transport is produced from the scale network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportMode {
    /// Scales multiplied channelwise by the source pixel color.
    Modulated,
    /// The network output is the transport itself.
    Direct,
}

impl std::str::FromStr for TransportMode {
    type Err = NelfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "modulated" => Ok(Self::Modulated),
            "direct" => Ok(Self::Direct),
            _ => Err(NelfError::Config(format!("unknown transport mode {s:?}"))),
        }
    }
}

/// Granularity of the view-blending weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlendMode {
    /// One weight per view, shared by all texels.
    Scalar,
    /// One weight per view and texel.
    PerTexel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Architecture {
    pub hidden: usize,
    pub geometry_dim: usize,
    pub posenc: PosEnc,
    pub env_height: usize,
    pub env_width: usize,
    pub mode: TransportMode,
    pub blend: BlendMode,
    /// Positions are multiplied by this before encoding.
    pub position_scale: f64,
    /// Density is `density_scale · softplus(head output)`.
    pub density_scale: f64,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            hidden: 64,
            geometry_dim: 64,
            posenc: PosEnc::default(),
            env_height: crate::envmap::DEFAULT_HEIGHT,
            env_width: crate::envmap::DEFAULT_WIDTH,
            mode: TransportMode::Modulated,
            blend: BlendMode::Scalar,
            position_scale: 1.0,
            density_scale: 10.0,
        }
    }
}

impl Architecture {
    pub fn texels(&self) -> usize {
        self.env_height * self.env_width
    }

    /// `[PosEnc(x), feature_k, mean, variance, alignment]`.
    pub fn geometry_input(&self) -> usize {
        self.posenc.output_dim(3) + 3 * FEATURE_DIM + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.geometry_dim == 0 || self.texels() == 0 {
            return Err(NelfError::Config(
                "architecture dimensions must be positive".into(),
            ));
        }
        if !(self.position_scale.is_finite() && self.position_scale > 0.0) {
            return Err(NelfError::Config("position_scale must be positive".into()));
        }
        if !(self.density_scale.is_finite() && self.density_scale > 0.0) {
            return Err(NelfError::Config("density_scale must be positive".into()));
        }
        Ok(())
    }
}

/// Offsets of one affine layer inside the flat parameter vector. The weight
/// block is `outputs × inputs`, row-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layer {
    pub weight: usize,
    pub bias: usize,
    pub inputs: usize,
    pub outputs: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

impl Mlp {
    fn build(dims: &[usize], offset: &mut usize) -> Self {
        let layers = dims
            .windows(2)
            .map(|w| {
                let l = Layer {
                    weight: *offset,
                    bias: *offset + w[0] * w[1],
                    inputs: w[0],
                    outputs: w[1],
                };
                *offset += w[0] * w[1] + w[1];
                l
            })
            .collect();
        Mlp { layers }
    }

    pub fn last(&self) -> Layer {
        *self.layers.last().unwrap()
    }
}

/// The four networks of the field.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Networks {
    /// Shared per-view aggregation network; outputs `geometry_dim + 1`.
    pub geometry: Mlp,
    pub density: Mlp,
    /// Per-view transport scales; outputs `H·W·3`.
    pub transport: Mlp,
    /// Per-view blending logits; outputs 1 or `H·W`.
    pub blend: Mlp,
    pub total: usize,
}

impl Networks {
    pub fn layout(arch: &Architecture) -> Self {
        let h = arch.hidden;
        let g = arch.geometry_dim;
        let mut off = 0;
        let geometry = Mlp::build(&[arch.geometry_input(), h, h, g + 1], &mut off);
        let density = Mlp::build(&[2 * g, h, h, 1], &mut off);
        let transport = Mlp::build(&[3 + g + FEATURE_DIM, h, h, 3 * arch.texels()], &mut off);
        let blend_out = match arch.blend {
            BlendMode::Scalar => 1,
            BlendMode::PerTexel => arch.texels(),
        };
        let blend = Mlp::build(&[6 + g, h, h, blend_out], &mut off);
        Networks {
            geometry,
            density,
            transport,
            blend,
            total: off,
        }
    }

    /// `(name, offset, length)` for every tensor, in storage order.
    pub fn tensors(&self) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        for (name, mlp) in [
            ("geometry", &self.geometry),
            ("density", &self.density),
            ("transport", &self.transport),
            ("blend", &self.blend),
        ] {
            for (i, l) in mlp.layers.iter().enumerate() {
                out.push((format!("{name}.{i}.weight"), l.weight, l.inputs * l.outputs));
                out.push((format!("{name}.{i}.bias"), l.bias, l.outputs));
            }
        }
        out
    }
}

/// Parameters of the field: architecture plus one flat value vector.
#[derive(Clone, Debug, PartialEq)]
pub struct NelfParams {
    pub arch: Architecture,
    pub nets: Networks,
    pub values: Vec<f64>,
}

impl NelfParams {
    /// Uniform `±√(6/(fan_in+fan_out))` weights, zero biases, and a transport
    /// output bias whose softplus is `1/(H·W)`. Values are rounded to `f32`.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let nets = Networks::layout(&arch);
        let mut values = vec![0.0; nets.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for mlp in [&nets.geometry, &nets.density, &nets.transport, &nets.blend] {
            for l in &mlp.layers {
                let bound = (6.0 / (l.inputs + l.outputs) as f64).sqrt();
                for w in &mut values[l.weight..l.weight + l.inputs * l.outputs] {
                    *w = rng.gen_range(-bound..bound);
                }
            }
        }
        let target = 1.0 / arch.texels() as f64;
        let bias = target.exp_m1().ln();
        let last = nets.transport.last();
        values[last.bias..last.bias + last.outputs]
            .iter_mut()
            .for_each(|b| *b = bias);
        let mut p = Self { arch, nets, values };
        p.round_to_f32();
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn round_to_f32(&mut self) {
        self.values
            .iter_mut()
            .for_each(|v| *v = crate::round_f32(*v));
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// SHA-256 over the architecture descriptor and the `f32` parameter bytes.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.arch).expect("architecture serializes"));
        for v in &self.values {
            h.update((*v as f32).to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn save(&self, path: &Path, adam: Option<&AdamState>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_checkpoint(&mut f, self, adam)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, Option<AdamState>)> {
        read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"NELF-P1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    architecture: Architecture,
    adam: Option<AdamHeader>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdamHeader {
    step: u64,
    skipped: u64,
}

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_tensor(buf: &mut Vec<u8>, name: &str, data: &[f64]) {
    put_u32(buf, name.len());
    buf.extend_from_slice(name.as_bytes());
    put_u32(buf, data.len());
    for v in data {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

/// Layout: magic, `u32` header length, header JSON, `u32` tensor count, then
/// per tensor `u32` name length, name, `u32` element count and little-endian
/// `f32` values, and finally the 32-byte SHA-256 of everything before it.
pub fn write_checkpoint<W: Write>(
    mut out: W,
    params: &NelfParams,
    adam: Option<&AdamState>,
) -> Result<()> {
    let header = CheckpointHeader {
        architecture: params.arch.clone(),
        adam: adam.map(|a| AdamHeader {
            step: a.step,
            skipped: a.skipped,
        }),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut buf, json.len());
    buf.extend_from_slice(&json);
    let tensors = params.nets.tensors();
    put_u32(&mut buf, tensors.len() + if adam.is_some() { 2 } else { 0 });
    for (name, off, len) in &tensors {
        put_tensor(&mut buf, name, &params.values[*off..off + len]);
    }
    if let Some(a) = adam {
        put_tensor(&mut buf, "adam.m", &a.m);
        put_tensor(&mut buf, "adam.v", &a.v);
    }
    let digest = Sha256::digest(&buf);
    out.write_all(&buf)?;
    out.write_all(&digest)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(NelfError::Format("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<(NelfParams, Option<AdamState>)> {
    let mut all = Vec::new();
    input.read_to_end(&mut all)?;
    if all.len() < CHECKPOINT_MAGIC.len() + 32 || &all[..7] != CHECKPOINT_MAGIC {
        return Err(NelfError::Format("not a NELF-P1 checkpoint".into()));
    }
    let (body, digest) = all.split_at(all.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(NelfError::Format("checkpoint hash mismatch".into()));
    }
    let mut c = Cursor { buf: body, pos: 7 };
    let hlen = c.u32()?;
    let header: CheckpointHeader = serde_json::from_slice(c.take(hlen)?)?;
    header.architecture.validate()?;
    let nets = Networks::layout(&header.architecture);
    let mut values = vec![0.0; nets.total];
    let mut m = None;
    let mut v = None;
    let expected = nets.tensors();
    let count = c.u32()?;
    for _ in 0..count {
        let nlen = c.u32()?;
        let name = std::str::from_utf8(c.take(nlen)?)
            .map_err(|_| NelfError::Format("tensor name is not UTF-8".into()))?
            .to_owned();
        let len = c.u32()?;
        let data: Vec<f64> = c
            .take(len * 4)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        match name.as_str() {
            "adam.m" => m = Some(data),
            "adam.v" => v = Some(data),
            _ => {
                let Some((_, off, n)) = expected.iter().find(|(e, _, _)| *e == name) else {
                    return Err(NelfError::Format(format!("unknown tensor {name}")));
                };
                if *n != len {
                    return Err(NelfError::Format(format!(
                        "tensor {name} has {len} values, expected {n}"
                    )));
                }
                values[*off..off + n].copy_from_slice(&data);
            }
        }
    }
    if c.pos != body.len() {
        return Err(NelfError::Format("trailing bytes in checkpoint".into()));
    }
    let adam = match (header.adam, m, v) {
        (Some(h), Some(m), Some(v)) if m.len() == nets.total && v.len() == nets.total => {
            Some(AdamState {
                m,
                v,
                step: h.step,
                skipped: h.skipped,
            })
        }
        (None, None, None) => None,
        _ => return Err(NelfError::Format("inconsistent optimizer state".into())),
    };
    let params = NelfParams {
        arch: header.architecture,
        nets,
        values,
    };
    if !params.is_finite() {
        return Err(NelfError::Numerical(
            "checkpoint holds non-finite parameters".into(),
        ));
    }
    Ok((params, adam))
}

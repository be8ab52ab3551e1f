//! Versioned checkpoint container.
//!
//! ```text
//! NFTS-CHECKPOINT
//! format_version=1
//! kind=supernet            (or backbone)
//! seed=<u64>
//! num_layers=<K>
//! layer.<i>=<d_in>,<d_out>,<activation>,<adapter kind>
//! end
//! <little-endian f64 arrays>
//! ```
//!
//! The payload lists, for each layer in order, φ.W, φ.b and, for supernet
//! checkpoints, φ′.W, φ′.b and α. Weights are row-major `[d_in, d_out]`;
//! residual adapters are `[d_in, d_out]`, offset adapters `[d_out]`.

use std::io::{BufRead, Read, Write};

use super::{
    param_id, AdapterKind, Backbone, DenseLayer, DenseParams, Supernet, SupernetLayer, ROLE_ALPHA,
    ROLE_PHI_B, ROLE_PHI_W, ROLE_PRIME_B, ROLE_PRIME_W,
};
use crate::error::{Error, Result};
use crate::grad::{Activation, ParamBlock};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "NFTS-CHECKPOINT";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointKind {
    Backbone,
    Supernet,
}

impl CheckpointKind {
    fn name(self) -> &'static str {
        match self {
            CheckpointKind::Backbone => "backbone",
            CheckpointKind::Supernet => "supernet",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerShape {
    pub d_in: usize,
    pub d_out: usize,
    pub activation: Activation,
    pub adapter: AdapterKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointHeader {
    pub version: u32,
    pub kind: CheckpointKind,
    pub seed: u64,
    pub layers: Vec<LayerShape>,
}

impl CheckpointHeader {
    fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "{MAGIC}")?;
        writeln!(w, "format_version={}", self.version)?;
        writeln!(w, "kind={}", self.kind.name())?;
        writeln!(w, "seed={}", self.seed)?;
        writeln!(w, "num_layers={}", self.layers.len())?;
        for (i, l) in self.layers.iter().enumerate() {
            writeln!(
                w,
                "layer.{i}={},{},{},{}",
                l.d_in,
                l.d_out,
                l.activation.name(),
                l.adapter.name()
            )?;
        }
        writeln!(w, "end")?;
        Ok(())
    }

    fn read<R: BufRead>(r: &mut R) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        let mut line = String::new();
        let mut next = |r: &mut R| -> Result<String> {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(bad("truncated header".into()));
            }
            Ok(line.trim_end_matches('\n').to_string())
        };
        if next(r)? != MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let mut field = |r: &mut R, key: &str| -> Result<String> {
            let l = next(r)?;
            l.strip_prefix(key)
                .and_then(|rest| rest.strip_prefix('='))
                .map(str::to_string)
                .ok_or_else(|| bad(format!("expected `{key}=`, found {l:?}")))
        };
        let version: u32 = field(r, "format_version")?
            .parse()
            .map_err(|_| bad("bad format_version".into()))?;
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let kind = match field(r, "kind")?.as_str() {
            "backbone" => CheckpointKind::Backbone,
            "supernet" => CheckpointKind::Supernet,
            other => return Err(bad(format!("unknown kind {other:?}"))),
        };
        let seed = field(r, "seed")?.parse().map_err(|_| bad("bad seed".into()))?;
        let k: usize = field(r, "num_layers")?
            .parse()
            .map_err(|_| bad("bad num_layers".into()))?;
        let mut layers = Vec::with_capacity(k);
        for i in 0..k {
            let v = field(r, &format!("layer.{i}"))?;
            let parts: Vec<&str> = v.split(',').collect();
            if parts.len() != 4 {
                return Err(bad(format!("layer.{i}: expected 4 fields")));
            }
            let dim = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("layer.{i}: bad dim {s:?}")));
            layers.push(LayerShape {
                d_in: dim(parts[0])?,
                d_out: dim(parts[1])?,
                activation: Activation::parse(parts[2])
                    .ok_or_else(|| bad(format!("layer.{i}: bad activation")))?,
                adapter: AdapterKind::parse(parts[3])
                    .ok_or_else(|| bad(format!("layer.{i}: bad adapter kind")))?,
            });
        }
        if next(r)? != "end" {
            return Err(bad("missing header terminator".into()));
        }
        Ok(Self {
            version,
            kind,
            seed,
            layers,
        })
    }
}

fn write_array<T: Scalar, W: Write>(w: &mut W, t: &Tensor<T>) -> Result<()> {
    for &v in t.data() {
        w.write_all(&v.to_f64_lossy().to_le_bytes())?;
    }
    Ok(())
}

fn read_array<T: Scalar, R: Read>(r: &mut R, shape: Vec<usize>) -> Result<Tensor<T>> {
    let n: usize = shape.iter().product();
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Checkpoint("truncated payload".into()))?;
    let data = buf
        .chunks_exact(8)
        .map(|c| T::from_f64_lossy(f64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
        .collect();
    Tensor::new(shape, data)
}

fn read_dense<T: Scalar, R: Read>(
    r: &mut R,
    layer: usize,
    shape: &LayerShape,
    roles: (u32, u32),
    trainable: bool,
) -> Result<DenseParams<T>> {
    let w = read_array(r, vec![shape.d_in, shape.d_out])?;
    let b = read_array(r, vec![shape.d_out])?;
    Ok(DenseParams {
        w: ParamBlock::new(param_id(layer, roles.0), w, trainable),
        b: ParamBlock::new(param_id(layer, roles.1), b, trainable),
    })
}

fn expect_end<R: Read>(r: &mut R) -> Result<()> {
    let mut extra = [0u8; 1];
    match r.read(&mut extra)? {
        0 => Ok(()),
        _ => Err(Error::Checkpoint("trailing bytes after payload".into())),
    }
}

impl<T: Scalar> Supernet<T> {
    pub fn header(&self, seed: u64) -> CheckpointHeader {
        CheckpointHeader {
            version: FORMAT_VERSION,
            kind: CheckpointKind::Supernet,
            seed,
            layers: self
                .layers
                .iter()
                .map(|l| LayerShape {
                    d_in: l.d_in(),
                    d_out: l.d_out(),
                    activation: l.activation,
                    adapter: l.alpha.kind,
                })
                .collect(),
        }
    }

    pub fn save<W: Write>(&self, seed: u64, w: &mut W) -> Result<()> {
        self.header(seed).write(w)?;
        for l in &self.layers {
            write_array(w, &l.phi.w.value)?;
            write_array(w, &l.phi.b.value)?;
            write_array(w, &l.phi_prime.w.value)?;
            write_array(w, &l.phi_prime.b.value)?;
            write_array(w, &l.alpha.block.value)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self, seed: u64) -> Vec<u8> {
        let mut out = Vec::new();
        self.save(seed, &mut out).expect("writing to a Vec cannot fail");
        out
    }

    /// Loads a supernet checkpoint, returning it with the recorded seed.
    pub fn load<R: BufRead>(r: &mut R) -> Result<(Self, u64)> {
        let header = CheckpointHeader::read(r)?;
        if header.kind != CheckpointKind::Supernet {
            return Err(Error::Checkpoint(format!(
                "expected a supernet checkpoint, found {}",
                header.kind.name()
            )));
        }
        let mut layers = Vec::with_capacity(header.layers.len());
        for (i, shape) in header.layers.iter().enumerate() {
            let phi = read_dense(r, i, shape, (ROLE_PHI_W, ROLE_PHI_B), false)?;
            let phi_prime = read_dense(r, i, shape, (ROLE_PRIME_W, ROLE_PRIME_B), true)?;
            let alpha_shape = match shape.adapter {
                AdapterKind::Residual => vec![shape.d_in, shape.d_out],
                AdapterKind::Offset => vec![shape.d_out],
            };
            let alpha = read_array(r, alpha_shape)?;
            layers.push(SupernetLayer {
                phi,
                phi_prime,
                alpha: super::Adapter {
                    kind: shape.adapter,
                    block: ParamBlock::new(param_id(i, ROLE_ALPHA), alpha, true),
                },
                activation: shape.activation,
            });
        }
        expect_end(r)?;
        Ok((Supernet::from_layers(layers)?, header.seed))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, u64)> {
        Self::load(&mut std::io::Cursor::new(bytes))
    }
}

impl<T: Scalar> Backbone<T> {
    pub fn save<W: Write>(&self, seed: u64, w: &mut W) -> Result<()> {
        let header = CheckpointHeader {
            version: FORMAT_VERSION,
            kind: CheckpointKind::Backbone,
            seed,
            layers: self
                .layers
                .iter()
                .map(|l| LayerShape {
                    d_in: l.params.d_in(),
                    d_out: l.params.d_out(),
                    activation: l.activation,
                    adapter: AdapterKind::Residual,
                })
                .collect(),
        };
        header.write(w)?;
        for l in &self.layers {
            write_array(w, &l.params.w.value)?;
            write_array(w, &l.params.b.value)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self, seed: u64) -> Vec<u8> {
        let mut out = Vec::new();
        self.save(seed, &mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn load<R: BufRead>(r: &mut R) -> Result<(Self, u64)> {
        let header = CheckpointHeader::read(r)?;
        if header.kind != CheckpointKind::Backbone {
            return Err(Error::Checkpoint(format!(
                "expected a backbone checkpoint, found {}",
                header.kind.name()
            )));
        }
        if header.layers.is_empty() {
            return Err(Error::Checkpoint("backbone without layers".into()));
        }
        let mut layers = Vec::with_capacity(header.layers.len());
        for (i, shape) in header.layers.iter().enumerate() {
            layers.push(DenseLayer {
                params: read_dense(r, i, shape, (ROLE_PHI_W, ROLE_PHI_B), true)?,
                activation: shape.activation,
            });
        }
        expect_end(r)?;
        Ok((Backbone { layers }, header.seed))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, u64)> {
        Self::load(&mut std::io::Cursor::new(bytes))
    }
}

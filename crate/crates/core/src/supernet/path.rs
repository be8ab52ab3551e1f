use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};

/// Per-layer adaptation choice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct LayerDecision {
    /// Attach the adapter α.
    pub adapter: bool,
    /// Use the fine-tuned copy φ′ instead of the frozen φ.
    pub finetune: bool,
}

impl LayerDecision {
    pub const FROZEN: Self = Self {
        adapter: false,
        finetune: false,
    };
    pub const ADAPTER: Self = Self {
        adapter: true,
        finetune: false,
    };
    pub const FINETUNE: Self = Self {
        adapter: false,
        finetune: true,
    };
    pub const BOTH: Self = Self {
        adapter: true,
        finetune: true,
    };

    /// Index in `0..4` with the adapter bit as the high bit.
    pub fn variant(self) -> usize {
        usize::from(self.adapter) * 2 + usize::from(self.finetune)
    }
}

/// `2K` bits; bit `2i` is the adapter flag of layer `i`, bit `2i+1` its
/// fine-tune flag.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PathEncoding {
    bits: Vec<bool>,
}

impl PathEncoding {
    pub fn encode(decisions: &[LayerDecision]) -> Self {
        let bits = decisions
            .iter()
            .flat_map(|d| [d.adapter, d.finetune])
            .collect();
        Self { bits }
    }

    pub fn from_bits(bits: Vec<bool>) -> Result<Self> {
        if bits.is_empty() || bits.len() % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "path encoding needs a positive even number of bits, got {}",
                bits.len()
            )));
        }
        Ok(Self { bits })
    }

    pub fn uniform(num_layers: usize, decision: LayerDecision) -> Self {
        Self::encode(&vec![decision; num_layers])
    }

    pub fn all_zero(num_layers: usize) -> Self {
        Self::uniform(num_layers, LayerDecision::FROZEN)
    }

    pub fn all_ones(num_layers: usize) -> Self {
        Self::uniform(num_layers, LayerDecision::BOTH)
    }

    /// Every bit an independent fair coin, so all `4^K` paths are equally
    /// likely.
    pub fn sample_uniform<R: Rng + ?Sized>(num_layers: usize, rng: &mut R) -> Self {
        Self {
            bits: (0..2 * num_layers).map(|_| rng.random::<bool>()).collect(),
        }
    }

    /// All `4^K` encodings in binary counting order (bit 0 most significant).
    pub fn enumerate(num_layers: usize) -> impl Iterator<Item = Self> {
        let n = 2 * num_layers;
        assert!(n < 64, "enumeration limited to fewer than 32 layers");
        (0u64..(1u64 << n)).map(move |code| Self {
            bits: (0..n).map(|i| (code >> (n - 1 - i)) & 1 == 1).collect(),
        })
    }

    pub fn decode(&self) -> Vec<LayerDecision> {
        self.bits
            .chunks(2)
            .map(|c| LayerDecision {
                adapter: c[0],
                finetune: c[1],
            })
            .collect()
    }

    pub fn decision(&self, layer: usize) -> LayerDecision {
        LayerDecision {
            adapter: self.bits[2 * layer],
            finetune: self.bits[2 * layer + 1],
        }
    }

    pub fn num_layers(&self) -> usize {
        self.bits.len() / 2
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn bits_mut(&mut self) -> &mut [bool] {
        &mut self.bits
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_all_zero(&self) -> bool {
        self.bits.iter().all(|&b| !b)
    }

    /// First layer with any adaptation; everything below it is frozen.
    pub fn first_adapted_layer(&self) -> Option<usize> {
        self.bits.iter().position(|&b| b).map(|i| i / 2)
    }

    /// Cosine distance between the binary encodings, computed from integer
    /// counts so that values like `0.5` come out exact. Zero vectors are at
    /// distance 1 from everything.
    pub fn cosine_distance(&self, other: &Self) -> f64 {
        assert_eq!(self.bits.len(), other.bits.len(), "path lengths differ");
        let a = self.count_ones();
        let b = other.count_ones();
        if a == 0 || b == 0 {
            return 1.0;
        }
        let dot = self
            .bits
            .iter()
            .zip(&other.bits)
            .filter(|(x, y)| **x && **y)
            .count();
        1.0 - dot as f64 / ((a * b) as f64).sqrt()
    }

    pub fn to_bit_string(&self) -> String {
        self.bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }

    pub fn parse(s: &str) -> Result<Self> {
        let bits = s
            .trim()
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::InvalidArgument(format!(
                    "invalid path bit {other:?} in {s:?}"
                ))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_bits(bits)
    }

    /// Bits as `0.0`/`1.0`, for correlation analyses.
    pub fn as_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

impl fmt::Debug for PathEncoding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PathEncoding({})", self.to_bit_string())
    }
}

impl fmt::Display for PathEncoding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_bit_string())
    }
}

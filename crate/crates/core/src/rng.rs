//! Hierarchical seed splitting.
//!
//! Every random stream in an experiment comes from one master seed. A
//! stream is addressed by a path of tags, e.g. `("eval", domain, episode)`,
//! and its seed is obtained by folding each tag into the running state with
//! a SplitMix64 finalizer:
//!
//! ```text
//! s₀ = master
//! sᵢ = splitmix64(sᵢ₋₁ ⊕ splitmix64(tagᵢ + GOLDEN))
//! ```
//!
//! String tags are first hashed with 64-bit FNV-1a. The scheme is stable
//! across platforms and releases, so every stage can be re-run on its own.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// A tag in a seed path.
#[derive(Clone, Copy, Debug)]
pub enum Tag<'a> {
    Str(&'a str),
    Num(u64),
}

impl From<u64> for Tag<'_> {
    fn from(v: u64) -> Self {
        Tag::Num(v)
    }
}

impl From<usize> for Tag<'_> {
    fn from(v: usize) -> Self {
        Tag::Num(v as u64)
    }
}

impl<'a> From<&'a str> for Tag<'a> {
    fn from(v: &'a str) -> Self {
        Tag::Str(v)
    }
}

pub fn derive_seed(master: u64, tags: &[Tag<'_>]) -> u64 {
    tags.iter().fold(master, |state, tag| {
        let t = match tag {
            Tag::Str(s) => fnv1a(s),
            Tag::Num(n) => *n,
        };
        splitmix64(state ^ splitmix64(t.wrapping_add(GOLDEN)))
    })
}

pub fn stream(master: u64, tags: &[Tag<'_>]) -> Rng {
    Rng::seed_from_u64(derive_seed(master, tags))
}

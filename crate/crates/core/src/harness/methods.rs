//! The evaluated methods and per-episode evaluation shared by `eval` and
//! `ablate`.

use std::collections::HashMap;
use std::fmt;

use crate::episodes::Episode;
use crate::error::{Error, Result};
use crate::search::{finetune_on_support, score_adapted, FinetuneConfig};
use crate::supernet::{LayerDecision, PathEncoding, Supernet};

/// The four fixed all-layer paths.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Corner {
    /// (φ, −): frozen backbone.
    Frozen,
    /// (φ, α): adapters everywhere.
    Adapter,
    /// (φ′, −): full fine-tuning.
    Finetune,
    /// (φ′, α): both everywhere.
    Both,
}

impl Corner {
    pub const ALL: [Corner; 4] = [Corner::Frozen, Corner::Adapter, Corner::Finetune, Corner::Both];

    pub fn name(self) -> &'static str {
        match self {
            Corner::Frozen => "frozen",
            Corner::Adapter => "adapter",
            Corner::Finetune => "finetune",
            Corner::Both => "both",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }

    pub fn label(self) -> &'static str {
        match self {
            Corner::Frozen => "(phi,-)",
            Corner::Adapter => "(phi,alpha)",
            Corner::Finetune => "(phi',-)",
            Corner::Both => "(phi',alpha)",
        }
    }

    pub fn decision(self) -> LayerDecision {
        match self {
            Corner::Frozen => LayerDecision::FROZEN,
            Corner::Adapter => LayerDecision::ADAPTER,
            Corner::Finetune => LayerDecision::FINETUNE,
            Corner::Both => LayerDecision::BOTH,
        }
    }

    pub fn path(self, num_layers: usize) -> PathEncoding {
        PathEncoding::uniform(num_layers, self.decision())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    Corner(Corner),
    /// Top-1 searched path.
    Nfts1,
    /// Per-episode choice among the shortlist.
    NftsN,
}

impl Method {
    pub fn tag(self) -> &'static str {
        match self {
            Method::Corner(c) => c.name(),
            Method::Nfts1 => "nfts1",
            Method::NftsN => "nftsN",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "nfts1" => Some(Method::Nfts1),
            "nftsN" | "nftsn" => Some(Method::NftsN),
            _ => Corner::parse(s).map(Method::Corner),
        }
    }

    pub fn needs_shortlist(self) -> bool {
        !matches!(self, Method::Corner(_))
    }

    pub fn label(self) -> &'static str {
        match self {
            Method::Corner(c) => c.label(),
            Method::Nfts1 => "NFTS-1",
            Method::NftsN => "NFTS-N",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// One row of a results file.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeResult {
    pub episode_id: usize,
    pub domain_id: String,
    pub method: Method,
    pub path: PathEncoding,
    pub support_loss: f64,
    pub query_accuracy: f64,
}

impl EpisodeResult {
    pub const HEADER: [&'static str; 6] =
        ["episode_id", "domain_id", "method", "path_bits", "support_loss", "query_accuracy"];

    pub fn record(&self) -> [String; 6] {
        [
            self.episode_id.to_string(),
            self.domain_id.clone(),
            self.method.tag().to_string(),
            self.path.to_bit_string(),
            format!("{:?}", self.support_loss),
            format!("{:?}", self.query_accuracy),
        ]
    }
}

/// Adapts and scores every method on one episode. Each distinct path is
/// fine-tuned once, so methods that land on the same path share the exact
/// same result.
pub fn evaluate_methods(
    net: &Supernet<f64>,
    methods: &[Method],
    shortlist: &[PathEncoding],
    ep: &Episode<f64>,
    episode_id: usize,
    cfg: &FinetuneConfig,
) -> Result<Vec<EpisodeResult>> {
    let k = net.num_layers();
    if methods.iter().any(|m| m.needs_shortlist()) && shortlist.is_empty() {
        return Err(Error::InvalidArgument("NFTS methods need a non-empty shortlist".into()));
    }
    let mut scores: HashMap<PathEncoding, (f64, f64)> = HashMap::new();
    let mut score = |p: &PathEncoding| -> Result<(f64, f64)> {
        if let Some(&s) = scores.get(p) {
            return Ok(s);
        }
        let params = finetune_on_support(net, p, &ep.support_x, &ep.support_y, cfg)?;
        let s = score_adapted(net, p, &params, ep)?;
        let s = (s.support_loss, s.accuracy);
        scores.insert(p.clone(), s);
        Ok(s)
    };
    let mut out = Vec::with_capacity(methods.len());
    for &m in methods {
        let path = match m {
            Method::Corner(c) => c.path(k),
            Method::Nfts1 => shortlist[0].clone(),
            Method::NftsN => {
                // lowest post-adaptation support loss, earliest entry on ties
                let mut best: Option<(usize, f64)> = None;
                for (i, p) in shortlist.iter().enumerate() {
                    let (loss, _) = score(p)?;
                    if best.is_none_or(|(_, l)| loss < l) {
                        best = Some((i, loss));
                    }
                }
                shortlist[best.expect("non-empty shortlist").0].clone()
            }
        };
        let (support_loss, query_accuracy) = score(&path)?;
        out.push(EpisodeResult {
            episode_id,
            domain_id: ep.domain_id.clone(),
            method: m,
            path,
            support_loss,
            query_accuracy,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corner_paths_follow_the_layer_table() {
        assert!(Corner::Frozen.path(3).is_all_zero());
        assert_eq!(Corner::Both.path(3).count_ones(), 6);
        assert_eq!(Corner::Adapter.path(2).to_bit_string(), "1010");
        assert_eq!(Corner::Finetune.path(2).to_bit_string(), "0101");
    }

    #[test]
    fn method_tags_round_trip() {
        for m in Corner::ALL.map(Method::Corner).into_iter().chain([Method::Nfts1, Method::NftsN]) {
            assert_eq!(Method::parse(m.tag()), Some(m));
        }
        assert_eq!(Method::parse("best"), None);
    }
}

//! Support-set fine-tuning of a single path, and the scores built on it.

use crate::episodes::Episode;
use crate::error::{Error, Result};
use crate::grad::Tape;
use crate::metrics::{class_centroids, ncc_accuracy, proto_loss};
use crate::scalar::Scalar;
use crate::supernet::{AdaptableParams, PathEncoding, Supernet};
use crate::tensor::Tensor;

use super::train::{path_loss_backward, StackedRows};

/// Inner-loop budget for adapting one path to one support set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub eta1: f64,
    pub eta2: f64,
}

/// Clones the path's α/φ′ out of `net` and runs `epochs` full-batch SGD
/// steps on the support-on-support prototypical loss. The supernet is
/// only read.
pub fn finetune_on_support<T: Scalar>(
    net: &Supernet<T>,
    p: &PathEncoding,
    support_x: &Tensor<T>,
    support_y: &[usize],
    cfg: &FinetuneConfig,
) -> Result<AdaptableParams<T>> {
    if support_y.is_empty() || support_x.rows() != support_y.len() {
        return Err(Error::InvalidArgument("support set is empty or mislabelled".into()));
    }
    let mut params = net.clone_path_params(p)?;
    let Some(start) = p.first_adapted_layer() else {
        return Ok(params);
    };
    if cfg.epochs == 0 {
        return Ok(params);
    }
    let (eta1, eta2) = (T::from_f64_lossy(cfg.eta1), T::from_f64_lossy(cfg.eta2));
    let h = net.frozen_prefix(support_x, start)?;
    let rows = StackedRows::support_on_support(support_y);
    for _ in 0..cfg.epochs {
        path_loss_backward(net, p, &mut params, &h, start, &rows)?;
        params.sgd_step(eta1, eta2)?;
    }
    Ok(params)
}

/// Embeddings under `p` using adapted parameters.
pub fn embed<T: Scalar>(
    net: &Supernet<T>,
    p: &PathEncoding,
    params: &AdaptableParams<T>,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    let start = p.first_adapted_layer().unwrap_or(net.num_layers());
    let h = net.frozen_prefix(x, start)?;
    let mut tape = Tape::new();
    let xin = tape.input(h);
    let out = net.record_path(&mut tape, p, xin, Some(params), start)?;
    Ok(tape.value(out).clone())
}

/// Support-on-support loss after adaptation.
pub fn support_loss<T: Scalar>(
    net: &Supernet<T>,
    p: &PathEncoding,
    params: &AdaptableParams<T>,
    support_x: &Tensor<T>,
    support_y: &[usize],
) -> Result<T> {
    let emb = embed(net, p, params, support_x)?;
    let c = class_centroids(&emb, support_y)?;
    proto_loss(&emb, support_y, &c)
}

/// Outcome of adapting one path on one episode.
#[derive(Clone, Debug)]
pub struct EpisodeScore<T> {
    pub support_loss: T,
    pub accuracy: T,
}

/// Query accuracy and support loss of already-adapted parameters.
pub fn score_adapted<T: Scalar>(
    net: &Supernet<T>,
    p: &PathEncoding,
    params: &AdaptableParams<T>,
    ep: &Episode<T>,
) -> Result<EpisodeScore<T>> {
    let x = Tensor::concat_rows(&[&ep.support_x, &ep.query_x])?;
    let emb = embed(net, p, params, &x)?;
    let ns = ep.support_len();
    let s_rows: Vec<usize> = (0..ns).collect();
    let q_rows: Vec<usize> = (ns..ns + ep.query_len()).collect();
    let s_emb = emb.select_rows(&s_rows);
    let c = class_centroids(&s_emb, &ep.support_y)?;
    Ok(EpisodeScore {
        support_loss: proto_loss(&s_emb, &ep.support_y, &c)?,
        accuracy: ncc_accuracy(&emb.select_rows(&q_rows), &ep.query_y, &c)?,
    })
}

/// Fine-tune on the support set, then score on the query set.
pub fn evaluate_episode<T: Scalar>(
    net: &Supernet<T>,
    p: &PathEncoding,
    ep: &Episode<T>,
    cfg: &FinetuneConfig,
) -> Result<EpisodeScore<T>> {
    let params = finetune_on_support(net, p, &ep.support_x, &ep.support_y, cfg)?;
    score_adapted(net, p, &params, ep)
}

/// Mean post-adaptation NCC query accuracy over `episodes`.
pub fn evaluate_fitness<T: Scalar>(
    net: &Supernet<T>,
    p: &PathEncoding,
    episodes: &[Episode<T>],
    cfg: &FinetuneConfig,
) -> Result<f64> {
    if episodes.is_empty() {
        return Err(Error::InvalidArgument("fitness needs at least one episode".into()));
    }
    let mut total = 0.0;
    for ep in episodes {
        total += evaluate_episode(net, p, ep, cfg)?.accuracy.to_f64_lossy();
    }
    Ok(total / episodes.len() as f64)
}

/// Result of per-episode architecture selection.
#[derive(Clone, Debug)]
pub struct Selection<T> {
    pub index: usize,
    pub path: PathEncoding,
    pub params: AdaptableParams<T>,
    pub support_loss: T,
    /// Post-adaptation support loss of every candidate, in shortlist order.
    pub losses: Vec<T>,
}

/// Adapts every shortlisted path on the support set and keeps the one with
/// the lowest support-on-support loss (earliest index on ties).
pub fn test_time_select<T: Scalar>(
    net: &Supernet<T>,
    shortlist: &[PathEncoding],
    support_x: &Tensor<T>,
    support_y: &[usize],
    cfg: &FinetuneConfig,
) -> Result<Selection<T>> {
    if shortlist.is_empty() {
        return Err(Error::InvalidArgument("empty shortlist".into()));
    }
    let mut best: Option<(usize, AdaptableParams<T>, T)> = None;
    let mut losses = Vec::with_capacity(shortlist.len());
    for (i, p) in shortlist.iter().enumerate() {
        let params = finetune_on_support(net, p, support_x, support_y, cfg)?;
        let loss = support_loss(net, p, &params, support_x, support_y)?;
        losses.push(loss);
        if best.as_ref().is_none_or(|(_, _, l)| loss < *l) {
            best = Some((i, params, loss));
        }
    }
    let (index, params, support_loss) = best.expect("non-empty shortlist");
    Ok(Selection {
        index,
        path: shortlist[index].clone(),
        params,
        support_loss,
        losses,
    })
}

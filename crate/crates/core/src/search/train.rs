//! Episodic pre-training of the plain backbone and single-path supernet
//! training.

use rand::Rng;

use crate::episodes::{Domain, EpisodeShape, Split};
use crate::error::{Error, Result};
use crate::grad::{sgd_step, ParamLookup, Tape};
use crate::metrics::{proto_loss_with_grad, EpisodeRows};
use crate::rng;
use crate::scalar::Scalar;
use crate::supernet::{AdaptableParams, Backbone, PathEncoding, Supernet};
use crate::tensor::Tensor;

/// Row bookkeeping for a support-then-query stacked batch.
pub(crate) struct StackedRows {
    pub support_rows: Vec<usize>,
    pub support_labels: Vec<usize>,
    pub query_rows: Vec<usize>,
    pub query_labels: Vec<usize>,
}

impl StackedRows {
    /// Support rows `0..n_s`, query rows `n_s..n_s+n_q`.
    pub fn support_query(support_labels: &[usize], query_labels: &[usize]) -> Self {
        let ns = support_labels.len();
        Self {
            support_rows: (0..ns).collect(),
            support_labels: support_labels.to_vec(),
            query_rows: (ns..ns + query_labels.len()).collect(),
            query_labels: query_labels.to_vec(),
        }
    }

    /// Support rows serve as both centroids and queries.
    pub fn support_on_support(support_labels: &[usize]) -> Self {
        let rows: Vec<usize> = (0..support_labels.len()).collect();
        Self {
            support_rows: rows.clone(),
            support_labels: support_labels.to_vec(),
            query_rows: rows,
            query_labels: support_labels.to_vec(),
        }
    }

    pub fn view(&self) -> EpisodeRows<'_> {
        EpisodeRows {
            support_rows: &self.support_rows,
            support_labels: &self.support_labels,
            query_rows: &self.query_rows,
            query_labels: &self.query_labels,
        }
    }
}

/// Forward `x` (already past the frozen prefix ending at `start`) along
/// `p`, then back-propagate the prototypical loss into `params`.
pub(crate) fn path_loss_backward<T: Scalar>(
    net: &Supernet<T>,
    p: &PathEncoding,
    params: &mut AdaptableParams<T>,
    x: &Tensor<T>,
    start: usize,
    rows: &StackedRows,
) -> Result<T> {
    let mut tape = Tape::new();
    let xin = tape.input(x.clone());
    let emb = net.record_path(&mut tape, p, xin, Some(params), start)?;
    let (loss, grad) = proto_loss_with_grad(tape.value(emb), &rows.view())?;
    let root = tape.loss(emb, loss, grad)?;
    tape.backward(root, params)?;
    Ok(loss)
}

/// Episodic pre-training of the plain backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub episodes: usize,
    pub lr: f64,
    pub shape: EpisodeShape,
    pub seed: u64,
}

/// Trains every backbone parameter with plain SGD on the prototypical loss
/// over meta-train episodes of `domains`. Returns the per-episode losses.
pub fn pretrain_backbone<T: Scalar>(
    backbone: &mut Backbone<T>,
    domains: &[Domain<T>],
    cfg: &PretrainConfig,
) -> Result<Vec<T>> {
    if domains.is_empty() {
        return Err(Error::InvalidArgument("pre-training needs at least one domain".into()));
    }
    let lr = T::from_f64_lossy(cfg.lr);
    let mut losses = Vec::with_capacity(cfg.episodes);
    for step in 0..cfg.episodes {
        let mut rng = rng::stream(cfg.seed, &["pretrain".into(), step.into()]);
        let domain = &domains[rng.random_range(0..domains.len())];
        let ep = cfg.shape.sample(domain, Split::Train, &mut rng)?;
        let rows = StackedRows::support_query(&ep.support_y, &ep.query_y);
        let x = Tensor::concat_rows(&[&ep.support_x, &ep.query_x])?;
        let mut tape = Tape::new();
        let xin = tape.input(x);
        let emb = backbone.record(&mut tape, xin)?;
        let (loss, grad) = proto_loss_with_grad(tape.value(emb), &rows.view())?;
        let root = tape.loss(emb, loss, grad)?;
        tape.backward(root, backbone as &mut dyn ParamLookup<T>)?;
        for layer in &mut backbone.layers {
            sgd_step(std::slice::from_mut(&mut layer.params.w), lr)?;
            sgd_step(std::slice::from_mut(&mut layer.params.b), lr)?;
        }
        losses.push(loss);
    }
    Ok(losses)
}

/// Single-path supernet training schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub episodes_total: usize,
    /// Adapter step size.
    pub eta1: f64,
    /// Fine-tune step size.
    pub eta2: f64,
    pub shape: EpisodeShape,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta1 > 0.0) || !(self.eta2 > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "step sizes must be positive, got eta1={} eta2={}",
                self.eta1, self.eta2
            )));
        }
        Ok(())
    }
}

/// One record per supernet training step.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainStep {
    pub domain: usize,
    pub path: PathEncoding,
    pub loss: f64,
}

/// Repeats: pick a domain, draw a meta-train episode and a uniformly random
/// path, then take one SGD step on that path's α (η₁) and φ′ (η₂) against
/// the support/query prototypical loss. φ is never touched.
pub fn supernet_train<T: Scalar>(
    net: &mut Supernet<T>,
    domains: &[Domain<T>],
    cfg: &TrainConfig,
) -> Result<Vec<TrainStep>> {
    cfg.validate()?;
    if domains.is_empty() {
        return Err(Error::InvalidArgument("supernet training needs at least one domain".into()));
    }
    let (eta1, eta2) = (T::from_f64_lossy(cfg.eta1), T::from_f64_lossy(cfg.eta2));
    let k = net.num_layers();
    let mut log = Vec::with_capacity(cfg.episodes_total);
    for step in 0..cfg.episodes_total {
        let mut rng = rng::stream(cfg.seed, &["supernet-train".into(), step.into()]);
        let d = rng.random_range(0..domains.len());
        let ep = cfg.shape.sample(&domains[d], Split::Train, &mut rng)?;
        let path = PathEncoding::sample_uniform(k, &mut rng);
        let x = Tensor::concat_rows(&[&ep.support_x, &ep.query_x])?;
        let rows = StackedRows::support_query(&ep.support_y, &ep.query_y);
        let loss = match path.first_adapted_layer() {
            None => {
                // nothing to train on the frozen path; still report its loss
                let emb = net.forward_path(&path, &x, None)?;
                proto_loss_with_grad(&emb, &rows.view())?.0
            }
            Some(start) => {
                let mut params = net.clone_path_params(&path)?;
                let h = net.frozen_prefix(&x, start)?;
                let loss = path_loss_backward(net, &path, &mut params, &h, start, &rows)?;
                params.sgd_step(eta1, eta2)?;
                net.write_back(&params)?;
                loss
            }
        };
        log.push(TrainStep {
            domain: d,
            path,
            loss: loss.to_f64_lossy(),
        });
    }
    Ok(log)
}

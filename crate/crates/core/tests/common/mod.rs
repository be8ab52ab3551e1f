#![allow(dead_code)]

use nfts_core::episodes::{Domain, DomainSpec};
use nfts_core::grad::{Activation, ParamLookup, Tape};
use nfts_core::metrics::{proto_loss_with_grad, EpisodeRows};
use nfts_core::supernet::{AdaptableParams, Backbone};
use nfts_core::{AdapterKind, PathEncoding, Supernet, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn normal_tensor<R: Rng>(shape: Vec<usize>, scale: f64, rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| { let z: f64 = StandardNormal.sample(rng); scale * z }).collect::<Vec<f64>>();
    Tensor::new(shape, data).unwrap()
}

/// A supernet whose φ′ and α differ from their initial values, so every
/// branch of every layer carries signal.
pub fn perturbed_supernet<R: Rng>(dims: &[usize], acts: &[Activation], kind: AdapterKind, rng: &mut R) -> Supernet {
    let mut bb = Backbone::init(dims, Activation::Relu, rng).unwrap();
    for (layer, &a) in bb.layers.iter_mut().zip(acts) {
        layer.activation = a;
    }
    let mut net = Supernet::from_backbone(&bb, kind).unwrap();
    for i in 0..net.num_layers() {
        let l = net.layer_mut(i);
        for block in [&mut l.phi_prime.w, &mut l.phi_prime.b, &mut l.alpha.block] {
            let noise: Tensor = normal_tensor(block.value.shape().to_vec(), 0.3, rng);
            block.value.add_assign(&noise).unwrap();
        }
    }
    net
}

/// Support rows `0..ns`, queries after them.
pub struct Split {
    pub support_rows: Vec<usize>,
    pub support_labels: Vec<usize>,
    pub query_rows: Vec<usize>,
    pub query_labels: Vec<usize>,
}

impl Split {
    pub fn new(support_labels: Vec<usize>, query_labels: Vec<usize>) -> Self {
        let ns = support_labels.len();
        Self {
            support_rows: (0..ns).collect(),
            query_rows: (ns..ns + query_labels.len()).collect(),
            support_labels,
            query_labels,
        }
    }

    pub fn rows(&self) -> EpisodeRows<'_> {
        EpisodeRows {
            support_rows: &self.support_rows,
            support_labels: &self.support_labels,
            query_rows: &self.query_rows,
            query_labels: &self.query_labels,
        }
    }

    pub fn len(&self) -> usize {
        self.support_rows.len() + self.query_rows.len()
    }
}

pub fn path_loss(net: &Supernet, p: &PathEncoding, params: &AdaptableParams<f64>, x: &Tensor, split: &Split) -> f64 {
    let emb = net.forward_path(p, x, Some(params)).unwrap();
    proto_loss_with_grad(&emb, &split.rows()).unwrap().0
}

/// Largest per-coordinate gap between the tape's gradient and a central
/// difference with step `eps`, relative to `max(|analytic|, |numeric|, floor)`.
pub fn fd_max_rel_error(
    net: &Supernet,
    p: &PathEncoding,
    x: &Tensor,
    split: &Split,
    eps: f64,
    floor: f64,
) -> (f64, usize) {
    let mut params = net.clone_path_params(p).unwrap();
    let mut tape = Tape::new();
    let xin = tape.input(x.clone());
    let emb = net.record_path(&mut tape, p, xin, Some(&params), 0).unwrap();
    let (loss, grad) = proto_loss_with_grad(tape.value(emb), &split.rows()).unwrap();
    let root = tape.loss(emb, loss, grad).unwrap();
    tape.backward(root, &mut params).unwrap();

    let ids: Vec<_> = params.adapters.iter().chain(params.finetuned.iter()).map(|b| b.id).collect();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for id in ids {
        let n = params.block_mut(id).unwrap().value.len();
        for c in 0..n {
            let analytic = params.block_mut(id).unwrap().grad.data()[c];
            let mut probe = params.clone();
            let orig = probe.block_mut(id).unwrap().value.data()[c];
            probe.block_mut(id).unwrap().value.data_mut()[c] = orig + eps;
            let up = path_loss(net, p, &probe, x, split);
            probe.block_mut(id).unwrap().value.data_mut()[c] = orig - eps;
            let down = path_loss(net, p, &probe, x, split);
            let numeric = (up - down) / (2.0 * eps);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    (worst, checked)
}

/// A small, easy synthetic domain.
pub fn toy_domain(id: &str, noise: f64, seed: u64) -> Domain<f64> {
    let spec = DomainSpec {
        id: id.into(),
        n_classes: 12,
        d_in: 8,
        noise_sigma: noise,
        transform_scale: 1.0,
        shift_scale: 0.5,
        max_condition: 2.0,
        split_ratio: 0.5,
        n_way_max: 5,
    };
    Domain::synthetic(&spec, seed).unwrap()
}

pub fn toy_supernet(seed: u64) -> Supernet {
    let mut rng = nfts_core::rng::stream(seed, &["toy-net".into()]);
    let bb = Backbone::init(&[8, 16, 16, 8], Activation::Relu, &mut rng).unwrap();
    Supernet::from_backbone(&bb, AdapterKind::Residual).unwrap()
}

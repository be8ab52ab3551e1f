//! The adaptation search space.
//!
//! A [`Supernet`] wraps a pre-trained dense chain. Every layer carries
//! three parameter groups: the frozen pre-trained weights φ, a trainable
//! copy φ′, and adapter parameters α. A [`PathEncoding`] picks, per layer,
//! whether α is attached and whether φ′ replaces φ, giving `4^K`
//! architectures that share weights.

mod checkpoint;
mod path;

pub use checkpoint::{CheckpointHeader, CheckpointKind, LayerShape, FORMAT_VERSION};
pub use path::{LayerDecision, PathEncoding};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::grad::{Activation, ParamBlock, ParamId, ParamLookup, ParamSet, Tape, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const ROLE_PHI_W: u32 = 0;
const ROLE_PHI_B: u32 = 1;
const ROLE_PRIME_W: u32 = 2;
const ROLE_PRIME_B: u32 = 3;
const ROLE_ALPHA: u32 = 4;
const ROLES_PER_LAYER: u32 = 8;

fn param_id(layer: usize, role: u32) -> ParamId {
    ParamId(layer as u32 * ROLES_PER_LAYER + role)
}

/// How the adapter α joins a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdapterKind {
    /// `g(x) + x·A`, a bias-free linear map of the layer input.
    Residual,
    /// `g(x) + o`, a learned vector added after the activation.
    Offset,
}

impl AdapterKind {
    pub fn name(self) -> &'static str {
        match self {
            AdapterKind::Residual => "residual",
            AdapterKind::Offset => "offset",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "residual" => Some(AdapterKind::Residual),
            "offset" => Some(AdapterKind::Offset),
            _ => None,
        }
    }
}

/// Weight matrix and bias of one affine map.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseParams<T> {
    pub w: ParamBlock<T>,
    pub b: ParamBlock<T>,
}

impl<T: Scalar> DenseParams<T> {
    fn with_ids(&self, w: ParamId, b: ParamId, trainable: bool) -> Self {
        let mut out = Self {
            w: self.w.detached(trainable),
            b: self.b.detached(trainable),
        };
        out.w.id = w;
        out.b.id = b;
        out
    }

    pub fn d_in(&self) -> usize {
        self.w.value.rows()
    }

    pub fn d_out(&self) -> usize {
        self.w.value.cols()
    }
}

/// One layer of a plain chain network.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer<T> {
    pub params: DenseParams<T>,
    pub activation: Activation,
}

/// Plain dense chain, the network that gets pre-trained before the
/// supernet is built around it.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone<T> {
    pub layers: Vec<DenseLayer<T>>,
}

impl<T: Scalar> Backbone<T> {
    /// Random He-style initialization. `dims` lists every width from input
    /// to embedding, so `dims.len() − 1` layers are built; hidden layers use
    /// `hidden`, the embedding layer is linear.
    pub fn init<R: Rng + ?Sized>(dims: &[usize], hidden: Activation, rng: &mut R) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "backbone needs at least one layer of positive width, got {dims:?}"
            )));
        }
        let k = dims.len() - 1;
        let layers = (0..k)
            .map(|i| {
                let (d_in, d_out) = (dims[i], dims[i + 1]);
                let activation = if i + 1 == k { Activation::Identity } else { hidden };
                let gain = if activation == Activation::Relu { 2.0 } else { 1.0 };
                let std = (gain / d_in as f64).sqrt();
                let w: Vec<T> = (0..d_in * d_out)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(rng);
                        T::from_f64_lossy(z * std)
                    })
                    .collect();
                Ok(DenseLayer {
                    params: DenseParams {
                        w: ParamBlock::new(param_id(i, ROLE_PHI_W), Tensor::matrix(d_in, d_out, w)?, true),
                        b: ParamBlock::new(param_id(i, ROLE_PHI_B), Tensor::zeros(vec![d_out]), true),
                    },
                    activation,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].params.d_in()
    }

    pub fn embed_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.params.d_out())
    }

    pub fn record(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        self.layers.iter().try_fold(x, |h, l| {
            tape.linear(h, &l.params.w, &l.params.b, l.activation)
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xin = tape.input(x.clone());
        let out = self.record(&mut tape, xin)?;
        Ok(tape.value(out).clone())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut ParamBlock<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.params.w, &mut l.params.b])
    }
}

impl<T: Scalar> ParamLookup<T> for Backbone<T> {
    fn block_mut(&mut self, id: ParamId) -> Option<&mut ParamBlock<T>> {
        self.params_mut().find(|b| b.id == id)
    }
}

/// Adapter parameters α of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Adapter<T> {
    pub kind: AdapterKind,
    pub block: ParamBlock<T>,
}

/// A layer holding φ, φ′ and α.
#[derive(Clone, Debug, PartialEq)]
pub struct SupernetLayer<T> {
    pub phi: DenseParams<T>,
    pub phi_prime: DenseParams<T>,
    pub alpha: Adapter<T>,
    pub activation: Activation,
}

impl<T: Scalar> SupernetLayer<T> {
    pub fn d_in(&self) -> usize {
        self.phi.d_in()
    }

    pub fn d_out(&self) -> usize {
        self.phi.d_out()
    }

    /// Zero adapter of the given kind.
    fn zero_adapter(layer: usize, kind: AdapterKind, d_in: usize, d_out: usize) -> Adapter<T> {
        let value = match kind {
            AdapterKind::Residual => Tensor::zeros(vec![d_in, d_out]),
            AdapterKind::Offset => Tensor::zeros(vec![d_out]),
        };
        Adapter {
            kind,
            block: ParamBlock::new(param_id(layer, ROLE_ALPHA), value, true),
        }
    }
}

/// Trainable parameters of one path, cloned out of a supernet.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdaptableParams<T> {
    pub adapters: ParamSet<T>,
    pub finetuned: ParamSet<T>,
}

impl<T: Scalar> AdaptableParams<T> {
    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty() && self.finetuned.is_empty()
    }

    pub fn len(&self) -> usize {
        self.adapters.len() + self.finetuned.len()
    }

    pub fn numel(&self) -> usize {
        self.adapters.numel() + self.finetuned.numel()
    }

    fn get(&self, id: ParamId) -> Option<&ParamBlock<T>> {
        self.adapters.get(id).or_else(|| self.finetuned.get(id))
    }

    /// One SGD step: `adapter_lr` on α, `finetune_lr` on φ′.
    pub fn sgd_step(&mut self, adapter_lr: T, finetune_lr: T) -> Result<()> {
        self.adapters.sgd_step(adapter_lr)?;
        self.finetuned.sgd_step(finetune_lr)
    }

    pub fn zero_grads(&mut self) {
        self.adapters.zero_grads();
        self.finetuned.zero_grads();
    }
}

impl<T: Scalar> ParamLookup<T> for AdaptableParams<T> {
    fn block_mut(&mut self, id: ParamId) -> Option<&mut ParamBlock<T>> {
        if self.adapters.get(id).is_some() {
            self.adapters.get_mut(id)
        } else {
            self.finetuned.get_mut(id)
        }
    }
}

/// Weight-sharing network over all per-layer {adapter, fine-tune} choices.
#[derive(Clone, Debug, PartialEq)]
pub struct Supernet<T> {
    layers: Vec<SupernetLayer<T>>,
}

impl<T: Scalar> Supernet<T> {
    /// Freezes the backbone as φ, copies it to φ′ and attaches zero
    /// adapters, so every path initially computes the backbone function.
    pub fn from_backbone(backbone: &Backbone<T>, kind: AdapterKind) -> Result<Self> {
        Self::from_backbone_with_kinds(backbone, &vec![kind; backbone.num_layers()])
    }

    pub fn from_backbone_with_kinds(backbone: &Backbone<T>, kinds: &[AdapterKind]) -> Result<Self> {
        if backbone.num_layers() == 0 || kinds.len() != backbone.num_layers() {
            return Err(Error::InvalidArgument(format!(
                "{} adapter kinds for {} layers",
                kinds.len(),
                backbone.num_layers()
            )));
        }
        let layers = backbone
            .layers
            .iter()
            .zip(kinds)
            .enumerate()
            .map(|(i, (l, &kind))| {
                let p = &l.params;
                if kind == AdapterKind::Residual && p.d_in() == 0 {
                    return Err(Error::InvalidArgument("empty layer".into()));
                }
                Ok(SupernetLayer {
                    phi: p.with_ids(param_id(i, ROLE_PHI_W), param_id(i, ROLE_PHI_B), false),
                    phi_prime: p.with_ids(param_id(i, ROLE_PRIME_W), param_id(i, ROLE_PRIME_B), true),
                    alpha: SupernetLayer::zero_adapter(i, kind, p.d_in(), p.d_out()),
                    activation: l.activation,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    pub(crate) fn from_layers(layers: Vec<SupernetLayer<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("supernet needs at least one layer".into()));
        }
        for w in layers.windows(2) {
            if w[0].d_out() != w[1].d_in() {
                return Err(Error::InvalidArgument("layer widths do not chain".into()));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[SupernetLayer<T>] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].d_in()
    }

    pub fn embed_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].d_out()
    }

    /// `4^K`, or `None` if it does not fit in a `u128`.
    pub fn search_space_size(&self) -> Option<u128> {
        4u128.checked_pow(self.layers.len() as u32)
    }

    /// The frozen pre-trained backbone.
    pub fn backbone(&self) -> Backbone<T> {
        Backbone {
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| DenseLayer {
                    params: l.phi.with_ids(param_id(i, ROLE_PHI_W), param_id(i, ROLE_PHI_B), true),
                    activation: l.activation,
                })
                .collect(),
        }
    }

    fn check_path(&self, p: &PathEncoding) -> Result<()> {
        if p.num_layers() != self.layers.len() {
            return Err(Error::InvalidArgument(format!(
                "path has {} layers, supernet has {}",
                p.num_layers(),
                self.layers.len()
            )));
        }
        Ok(())
    }

    /// Fresh trainable copies of the α blocks of adapted layers and the φ′
    /// blocks of fine-tuned layers.
    pub fn clone_path_params(&self, p: &PathEncoding) -> Result<AdaptableParams<T>> {
        self.check_path(p)?;
        let mut out = AdaptableParams::default();
        for (i, layer) in self.layers.iter().enumerate() {
            let d = p.decision(i);
            if d.adapter {
                out.adapters.insert(layer.alpha.block.detached(true));
            }
            if d.finetune {
                out.finetuned.insert(layer.phi_prime.w.detached(true));
                out.finetuned.insert(layer.phi_prime.b.detached(true));
            }
        }
        Ok(out)
    }

    /// Copies α/φ′ values from `params` back into the shared supernet
    /// blocks with matching ids.
    pub fn write_back(&mut self, params: &AdaptableParams<T>) -> Result<()> {
        for block in params.adapters.iter().chain(params.finetuned.iter()) {
            let layer = (block.id.0 / ROLES_PER_LAYER) as usize;
            let role = block.id.0 % ROLES_PER_LAYER;
            let l = self
                .layers
                .get_mut(layer)
                .ok_or_else(|| Error::InvalidArgument(format!("no layer {layer}")))?;
            let target = match role {
                ROLE_ALPHA => &mut l.alpha.block,
                ROLE_PRIME_W => &mut l.phi_prime.w,
                ROLE_PRIME_B => &mut l.phi_prime.b,
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "block {:?} is not trainable supernet state",
                        block.id
                    )))
                }
            };
            if target.value.shape() != block.value.shape() {
                return Err(Error::InvalidArgument(format!(
                    "shape mismatch writing back {:?}",
                    block.id
                )));
            }
            target.value = block.value.clone();
        }
        Ok(())
    }

    /// Records layers `start..K` of path `p` on `tape`, reading α/φ′ from
    /// `params` when it holds them and from the supernet otherwise.
    pub fn record_path(
        &self,
        tape: &mut Tape<T>,
        p: &PathEncoding,
        x: Var,
        params: Option<&AdaptableParams<T>>,
        start: usize,
    ) -> Result<Var> {
        self.check_path(p)?;
        if start == 0 && tape.value(x).cols() != self.input_dim() {
            return Err(Error::Shape {
                op: "forward_path",
                detail: format!(
                    "input has {} features, supernet expects {}",
                    tape.value(x).cols(),
                    self.input_dim()
                ),
            });
        }
        let pick = |block: &'_ ParamBlock<T>| -> ParamBlock<T> {
            // cloning keeps the borrow checker out of the tape's way; the
            // blocks are small next to the matmuls that consume them
            params
                .and_then(|ps| ps.get(block.id))
                .unwrap_or(block)
                .clone()
        };
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate().skip(start) {
            let d = p.decision(i);
            let dense = if d.finetune { &layer.phi_prime } else { &layer.phi };
            let (w, b) = if d.finetune {
                (pick(&dense.w), pick(&dense.b))
            } else {
                (dense.w.clone(), dense.b.clone())
            };
            let g = tape.linear(h, &w, &b, layer.activation)?;
            h = if d.adapter {
                let alpha = pick(&layer.alpha.block);
                match layer.alpha.kind {
                    AdapterKind::Residual => {
                        let r = tape.matmul(h, &alpha)?;
                        tape.add(g, r)?
                    }
                    AdapterKind::Offset => tape.add_row(g, &alpha)?,
                }
            } else {
                g
            };
        }
        Ok(h)
    }

    /// Embeddings of `x` under path `p`.
    pub fn forward_path(
        &self,
        p: &PathEncoding,
        x: &Tensor<T>,
        params: Option<&AdaptableParams<T>>,
    ) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xin = tape.input(x.clone());
        let out = self.record_path(&mut tape, p, xin, params, 0)?;
        Ok(tape.value(out).clone())
    }

    /// Output of the frozen layers `0..end`, which is path-independent for
    /// any path whose first adapted layer is `end` or later.
    pub fn frozen_prefix(&self, x: &Tensor<T>, end: usize) -> Result<Tensor<T>> {
        if x.cols() != self.input_dim() {
            return Err(Error::Shape {
                op: "frozen_prefix",
                detail: format!("input has {} features", x.cols()),
            });
        }
        let mut tape = Tape::new();
        let mut h = tape.input(x.clone());
        for layer in self.layers.iter().take(end) {
            h = tape.linear(h, &layer.phi.w, &layer.phi.b, layer.activation)?;
        }
        Ok(tape.value(h).clone())
    }

    /// Every frozen φ block, in layer order.
    pub fn phi_blocks(&self) -> impl Iterator<Item = &ParamBlock<T>> {
        self.layers.iter().flat_map(|l| [&l.phi.w, &l.phi.b])
    }

    pub fn layer_mut(&mut self, i: usize) -> &mut SupernetLayer<T> {
        &mut self.layers[i]
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::rng::Rng as StreamRng;

    fn small(kind: AdapterKind) -> (Supernet<f64>, Tensor<f64>) {
        let mut rng = StreamRng::seed_from_u64(3);
        let bb = Backbone::init(&[4, 6, 5, 3], Activation::Relu, &mut rng).unwrap();
        let net = Supernet::from_backbone(&bb, kind).unwrap();
        let x: Vec<f64> = (0..20).map(|_| StandardNormal.sample(&mut rng)).collect();
        (net, Tensor::matrix(5, 4, x).unwrap())
    }

    #[test]
    fn all_zero_path_is_the_backbone() {
        let (net, x) = small(AdapterKind::Residual);
        let plain = net.backbone().forward(&x).unwrap();
        let via_path = net.forward_path(&PathEncoding::all_zero(3), &x, None).unwrap();
        assert_eq!(plain, via_path);
    }

    #[test]
    fn every_path_matches_at_initialization() {
        for kind in [AdapterKind::Residual, AdapterKind::Offset] {
            let (net, x) = small(kind);
            let base = net.forward_path(&PathEncoding::all_zero(3), &x, None).unwrap();
            for p in PathEncoding::enumerate(3) {
                let out = net.forward_path(&p, &x, None).unwrap();
                assert_eq!(out.max_abs_diff(&base), 0.0, "path {p}");
            }
        }
    }

    #[test]
    fn input_width_mismatch_is_rejected() {
        let (net, _) = small(AdapterKind::Residual);
        let x = Tensor::zeros(vec![2, 7]);
        assert!(net.forward_path(&PathEncoding::all_zero(3), &x, None).is_err());
        assert!(net.forward_path(&PathEncoding::all_zero(2), &Tensor::zeros(vec![2, 4]), None).is_err());
    }

    #[test]
    fn clone_sets_follow_the_path() {
        let (net, _) = small(AdapterKind::Residual);
        assert!(net.clone_path_params(&PathEncoding::all_zero(3)).unwrap().is_empty());
        let all = net.clone_path_params(&PathEncoding::all_ones(3)).unwrap();
        assert_eq!(all.adapters.len(), 3);
        assert_eq!(all.finetuned.len(), 6);
        let p = PathEncoding::parse("100001").unwrap();
        let some = net.clone_path_params(&p).unwrap();
        assert_eq!(some.adapters.len(), 1);
        assert_eq!(some.finetuned.len(), 2);
        assert!(some.adapters.get(param_id(0, ROLE_ALPHA)).is_some());
        assert!(some.finetuned.get(param_id(2, ROLE_PRIME_W)).is_some());
    }

    #[test]
    fn mutating_a_clone_leaves_the_supernet_alone() {
        let (net, _) = small(AdapterKind::Residual);
        let snapshot = net.clone();
        let mut params = net.clone_path_params(&PathEncoding::all_ones(3)).unwrap();
        for b in params.adapters.iter_mut().chain(params.finetuned.iter_mut()) {
            b.value.data_mut().iter_mut().for_each(|v| *v += 1.0);
        }
        assert_eq!(net, snapshot);
    }

    #[test]
    fn residual_with_zero_map_equals_no_adapter() {
        let (mut net, x) = small(AdapterKind::Residual);
        // make φ′ differ from φ so the (a, f) combinations are distinguishable
        for v in net.layer_mut(1).phi_prime.w.value.data_mut() {
            *v *= 1.5;
        }
        for f in [false, true] {
            let without = PathEncoding::uniform(3, LayerDecision { adapter: false, finetune: f });
            let with = PathEncoding::uniform(3, LayerDecision { adapter: true, finetune: f });
            let a = net.forward_path(&without, &x, None).unwrap();
            let b = net.forward_path(&with, &x, None).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn adapted_forward_uses_clone_values() {
        let (net, x) = small(AdapterKind::Offset);
        let p = PathEncoding::parse("000010").unwrap();
        let mut params = net.clone_path_params(&p).unwrap();
        let base = net.forward_path(&p, &x, None).unwrap();
        params
            .adapters
            .iter_mut()
            .for_each(|b| b.value.data_mut().iter_mut().for_each(|v| *v = 0.25));
        let shifted = net.forward_path(&p, &x, Some(&params)).unwrap();
        for (a, b) in base.data().iter().zip(shifted.data()) {
            assert!((b - a - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn write_back_round_trips() {
        let (mut net, _) = small(AdapterKind::Residual);
        let p = PathEncoding::all_ones(3);
        let mut params = net.clone_path_params(&p).unwrap();
        for b in params.adapters.iter_mut() {
            b.value.data_mut()[0] = 3.0;
        }
        net.write_back(&params).unwrap();
        assert_eq!(net.clone_path_params(&p).unwrap(), params);
    }

    #[test]
    fn frozen_prefix_feeds_the_rest() {
        let (mut net, x) = small(AdapterKind::Residual);
        net.layer_mut(2).alpha.block.value.data_mut()[0] = 0.7;
        let p = PathEncoding::parse("000010").unwrap();
        let full = net.forward_path(&p, &x, None).unwrap();
        let prefix = net.frozen_prefix(&x, 2).unwrap();
        let mut tape = Tape::new();
        let h = tape.input(prefix);
        let out = net.record_path(&mut tape, &p, h, None, 2).unwrap();
        assert_eq!(tape.value(out), &full);
    }
}

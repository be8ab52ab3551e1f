//! Reverse-mode gradients for layer chains.
//!
//! A [`Tape`] records a short sequence of dense operations (affine maps,
//! adapter maps, additions and a terminal scalar loss) and replays them in
//! reverse to accumulate gradients into [`ParamBlock`]s. The op set is
//! exactly what the supernet layers and the prototypical loss need; there
//! is no general graph machinery.

use crate::error::{shape_err, Error, Result};
use crate::scalar::{MatRef, Scalar};
use crate::tensor::Tensor;

/// Stable identifier of a parameter block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub u32);

/// A named parameter tensor with its gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamBlock<T> {
    pub id: ParamId,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
}

impl<T: Scalar> ParamBlock<T> {
    pub fn new(id: ParamId, value: Tensor<T>, trainable: bool) -> Self {
        let grad = Tensor::zeros(value.shape().to_vec());
        Self {
            id,
            value,
            grad,
            trainable,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill_zero();
    }

    /// Copy with a fresh zero gradient and the given trainability.
    pub fn detached(&self, trainable: bool) -> Self {
        Self::new(self.id, self.value.clone(), trainable)
    }
}

/// Something that can hand out parameter blocks by id during backward.
pub trait ParamLookup<T> {
    fn block_mut(&mut self, id: ParamId) -> Option<&mut ParamBlock<T>>;
}

/// Blocks kept sorted by id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T> {
    blocks: Vec<ParamBlock<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self { blocks: Vec::new() }
    }

    /// Inserts a block, replacing any existing block with the same id.
    pub fn insert(&mut self, block: ParamBlock<T>) {
        match self.blocks.binary_search_by_key(&block.id, |b| b.id) {
            Ok(i) => self.blocks[i] = block,
            Err(i) => self.blocks.insert(i, block),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&ParamBlock<T>> {
        self.blocks
            .binary_search_by_key(&id, |b| b.id)
            .ok()
            .map(|i| &self.blocks[i])
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut ParamBlock<T>> {
        self.blocks
            .binary_search_by_key(&id, |b| b.id)
            .ok()
            .map(move |i| &mut self.blocks[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamBlock<T>> {
        self.blocks.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamBlock<T>> {
        self.blocks.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn zero_grads(&mut self) {
        self.blocks.iter_mut().for_each(ParamBlock::zero_grad);
    }

    pub fn sgd_step(&mut self, lr: T) -> Result<()> {
        sgd_step(&mut self.blocks, lr)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.blocks.iter().map(|b| b.value.len()).sum()
    }
}

impl<T: Scalar> ParamLookup<T> for ParamSet<T> {
    fn block_mut(&mut self, id: ParamId) -> Option<&mut ParamBlock<T>> {
        self.get_mut(id)
    }
}

impl<T: Scalar> ParamLookup<T> for [ParamBlock<T>] {
    fn block_mut(&mut self, id: ParamId) -> Option<&mut ParamBlock<T>> {
        self.iter_mut().find(|b| b.id == id)
    }
}

/// `value ← value − lr·grad` on trainable blocks, then zero every gradient.
pub fn sgd_step<T: Scalar>(params: &mut [ParamBlock<T>], lr: T) -> Result<()> {
    if !(lr >= T::zero()) {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be non-negative, got {lr}"
        )));
    }
    for block in params.iter_mut() {
        if block.trainable && lr > T::zero() {
            for (v, g) in block.value.data_mut().iter_mut().zip(block.grad.data()) {
                *v = *v - lr * *g;
            }
        }
        block.zero_grad();
    }
    Ok(())
}

/// Element-wise nonlinearity fixed per layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    fn apply<T: Scalar>(self, v: T) -> T {
        match self {
            Activation::Identity => v,
            Activation::Relu => v.max(T::zero()),
            Activation::Tanh => v.tanh(),
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_from_output<T: Scalar>(self, y: T) -> T {
        match self {
            Activation::Identity => T::one(),
            Activation::Relu => {
                if y > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => T::one() - y * y,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "identity" => Some(Activation::Identity),
            "relu" => Some(Activation::Relu),
            "tanh" => Some(Activation::Tanh),
            _ => None,
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Input,
    Linear {
        x: usize,
        w: ParamId,
        b: ParamId,
        act: Activation,
        // kept only when the input needs a gradient
        w_value: Option<Tensor<T>>,
    },
    MatMul {
        x: usize,
        w: ParamId,
        w_value: Option<Tensor<T>>,
    },
    AddRow {
        x: usize,
        b: ParamId,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sum {
        x: usize,
    },
    Loss {
        x: usize,
        grad: Tensor<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
    w_trainable: bool,
    b_trainable: bool,
}

/// Records a forward pass so it can be differentiated once.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    spent: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            spent: false,
        }
    }

    /// Clears all recorded nodes so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.spent = false;
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn check_live(&self) -> Result<()> {
        if self.spent {
            return Err(Error::Tape(
                "tape already differentiated; reset it before recording".into(),
            ));
        }
        Ok(())
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push_full(op, value, requires_grad, false, false)
    }

    fn push_full(
        &mut self,
        op: Op<T>,
        value: Tensor<T>,
        requires_grad: bool,
        w_trainable: bool,
        b_trainable: bool,
    ) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            w_trainable,
            b_trainable,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; never receives a gradient.
    pub fn input(&mut self, x: Tensor<T>) -> Var {
        self.push(Op::Input, x, false)
    }

    /// `act(x·W + b)` for `x: [n, d_in]`, `W: [d_in, d_out]`, `b: [d_out]`.
    pub fn linear(
        &mut self,
        x: Var,
        w: &ParamBlock<T>,
        b: &ParamBlock<T>,
        act: Activation,
    ) -> Result<Var> {
        self.check_live()?;
        let xv = &self.nodes[x.0].value;
        let (d_in, d_out) = (w.value.rows(), w.value.cols());
        if w.value.shape().len() != 2 || xv.cols() != d_in || b.value.len() != d_out {
            return Err(shape_err(
                "linear",
                format!(
                    "x {:?}, W {:?}, b {:?}",
                    xv.shape(),
                    w.value.shape(),
                    b.value.shape()
                ),
            ));
        }
        let n = xv.rows();
        let mut out = vec![T::zero(); n * d_out];
        for row in out.chunks_mut(d_out) {
            row.copy_from_slice(b.value.data());
        }
        T::gemm(T::one(), xv.as_mat(), w.value.as_mat(), T::one(), &mut out);
        for v in out.iter_mut() {
            *v = act.apply(*v);
        }
        let value = Tensor::matrix(n, d_out, out)?;
        if !value.all_finite() {
            return Err(Error::NonFinite("linear"));
        }
        let x_rg = self.nodes[x.0].requires_grad;
        let op = Op::Linear {
            x: x.0,
            w: w.id,
            b: b.id,
            act,
            w_value: x_rg.then(|| w.value.clone()),
        };
        let rg = x_rg || w.trainable || b.trainable;
        Ok(self.push_full(op, value, rg, w.trainable, b.trainable))
    }

    /// `x·W` without bias (residual adapter map).
    pub fn matmul(&mut self, x: Var, w: &ParamBlock<T>) -> Result<Var> {
        self.check_live()?;
        let xv = &self.nodes[x.0].value;
        if w.value.shape().len() != 2 || xv.cols() != w.value.rows() {
            return Err(shape_err(
                "matmul",
                format!("x {:?}, W {:?}", xv.shape(), w.value.shape()),
            ));
        }
        let value = xv.matmul(&w.value)?;
        if !value.all_finite() {
            return Err(Error::NonFinite("matmul"));
        }
        let x_rg = self.nodes[x.0].requires_grad;
        let op = Op::MatMul {
            x: x.0,
            w: w.id,
            w_value: x_rg.then(|| w.value.clone()),
        };
        Ok(self.push_full(op, value, x_rg || w.trainable, w.trainable, false))
    }

    /// Adds the vector `b` to every row of `x` (offset adapter).
    pub fn add_row(&mut self, x: Var, b: &ParamBlock<T>) -> Result<Var> {
        self.check_live()?;
        let xv = &self.nodes[x.0].value;
        if b.value.len() != xv.cols() {
            return Err(shape_err(
                "add_row",
                format!("x {:?}, b {:?}", xv.shape(), b.value.shape()),
            ));
        }
        let mut value = xv.clone();
        let c = value.cols();
        for row in value.data_mut().chunks_mut(c) {
            for (v, o) in row.iter_mut().zip(b.value.data()) {
                *v = *v + *o;
            }
        }
        if !value.all_finite() {
            return Err(Error::NonFinite("add_row"));
        }
        let rg = self.nodes[x.0].requires_grad || b.trainable;
        Ok(self.push_full(Op::AddRow { x: x.0, b: b.id }, value, rg, false, b.trainable))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_live()?;
        let mut value = self.nodes[a.0].value.clone();
        value.add_assign(&self.nodes[b.0].value)?;
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(Op::Add { a: a.0, b: b.0 }, value, rg))
    }

    /// Sum of all elements, as a scalar root.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check_live()?;
        let s = self.nodes[x.0].value.sum();
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Op::Sum { x: x.0 }, Tensor::scalar(s), rg))
    }

    /// Scalar loss whose gradient w.r.t. `x` was computed analytically
    /// by the caller.
    pub fn loss(&mut self, x: Var, value: T, grad: Tensor<T>) -> Result<Var> {
        self.check_live()?;
        if grad.shape() != self.nodes[x.0].value.shape() {
            return Err(shape_err(
                "loss",
                format!(
                    "gradient {:?} vs input {:?}",
                    grad.shape(),
                    self.nodes[x.0].value.shape()
                ),
            ));
        }
        if !value.is_finite() || !grad.all_finite() {
            return Err(Error::NonFinite("loss"));
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Op::Loss { x: x.0, grad }, Tensor::scalar(value), rg))
    }

    /// Back-propagates from the scalar `root`, accumulating gradients into
    /// the trainable blocks that `params` can hand out. Blocks not found in
    /// `params`, or found but frozen, receive nothing.
    pub fn backward<P>(&mut self, root: Var, params: &mut P) -> Result<()>
    where
        P: ParamLookup<T> + ?Sized,
    {
        if self.spent {
            return Err(Error::Tape(
                "backward called twice without a new forward pass".into(),
            ));
        }
        if root.0 >= self.nodes.len() || !self.nodes[root.0].value.is_scalar() {
            return Err(Error::Tape("backward root must be a scalar".into()));
        }
        self.spent = true;

        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(T::one()));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Linear {
                    x,
                    w,
                    b,
                    act,
                    w_value,
                } => {
                    let mut d_base = g;
                    for (d, y) in d_base.data_mut().iter_mut().zip(node.value.data()) {
                        *d = *d * act.derivative_from_output(*y);
                    }
                    let xv = &self.nodes[*x].value;
                    if node.w_trainable {
                        accumulate_weight_grad(params, *w, xv, &d_base);
                    }
                    if node.b_trainable {
                        accumulate_bias_grad(params, *b, &d_base);
                    }
                    if let Some(wv) = w_value {
                        let dx = input_grad(&d_base, wv);
                        accumulate(&mut grads[*x], dx)?;
                    }
                }
                Op::MatMul { x, w, w_value } => {
                    let xv = &self.nodes[*x].value;
                    if node.w_trainable {
                        accumulate_weight_grad(params, *w, xv, &g);
                    }
                    if let Some(wv) = w_value {
                        let dx = input_grad(&g, wv);
                        accumulate(&mut grads[*x], dx)?;
                    }
                }
                Op::AddRow { x, b } => {
                    if node.b_trainable {
                        accumulate_bias_grad(params, *b, &g);
                    }
                    if self.nodes[*x].requires_grad {
                        accumulate(&mut grads[*x], g)?;
                    }
                }
                Op::Add { a, b } => {
                    if self.nodes[*b].requires_grad {
                        accumulate(&mut grads[*b], g.clone())?;
                    }
                    if self.nodes[*a].requires_grad {
                        accumulate(&mut grads[*a], g)?;
                    }
                }
                Op::Sum { x } => {
                    let s = g.data()[0];
                    let shape = self.nodes[*x].value.shape().to_vec();
                    let n = self.nodes[*x].value.len();
                    accumulate(&mut grads[*x], Tensor::new(shape, vec![s; n])?)?;
                }
                Op::Loss { x, grad } => {
                    let s = g.data()[0];
                    accumulate(&mut grads[*x], grad.scale(s))?;
                }
            }
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) -> Result<()> {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// `dx = dy · Wᵀ`
fn input_grad<T: Scalar>(dy: &Tensor<T>, w: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(vec![dy.rows(), w.rows()]);
    T::gemm(T::one(), dy.as_mat(), w.as_mat().t(), T::zero(), dx.data_mut());
    dx
}

/// `grad(W) += xᵀ · dy`
fn accumulate_weight_grad<T: Scalar, P: ParamLookup<T> + ?Sized>(
    params: &mut P,
    id: ParamId,
    x: &Tensor<T>,
    dy: &Tensor<T>,
) {
    if let Some(block) = params.block_mut(id) {
        if block.trainable {
            let xt: MatRef<'_, T> = x.as_mat().t();
            T::gemm(T::one(), xt, dy.as_mat(), T::one(), block.grad.data_mut());
        }
    }
}

fn accumulate_bias_grad<T: Scalar, P: ParamLookup<T> + ?Sized>(
    params: &mut P,
    id: ParamId,
    dy: &Tensor<T>,
) {
    if let Some(block) = params.block_mut(id) {
        if block.trainable {
            let c = dy.cols();
            let grad = block.grad.data_mut();
            for row in dy.data().chunks(c) {
                for (g, d) in grad.iter_mut().zip(row) {
                    *g = *g + *d;
                }
            }
        }
    }
}

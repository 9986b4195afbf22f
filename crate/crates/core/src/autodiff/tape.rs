use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{GradientMap, Graph, ParamStore, StatUpdate};
use crate::error::{Error, Result};
use crate::loss::{self, ClassWeights};
use crate::tensor::{
    self, batch_norm_backward, conv3d_backward, conv_transpose3d_backward, BatchNormCache,
    ConvSpec, Mode, Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Leaf,
    Param(String),
    Conv {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        spec: ConvSpec,
    },
    ConvTranspose {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        spec: ConvSpec,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        cache: BatchNormCache,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    Softmax(NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MulConst(NodeId, Tensor),
    Scale(NodeId, f64),
    Concat(Vec<NodeId>),
    Dropout {
        x: NodeId,
        mask: Tensor,
        scale: f64,
    },
    Sum(NodeId),
    SoftDice {
        p: NodeId,
        target: Tensor,
        smooth: f64,
    },
    CategoricalDice {
        p: NodeId,
        target: Tensor,
        weights: ClassWeights,
        smooth: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of one forward pass.
///
/// Parameters are read from a borrowed [`ParamStore`]; each parameter name
/// maps to a single node, so repeated use accumulates into one gradient.
/// Training-mode batch norms do not mutate the store; their new running
/// statistics are collected in [`Tape::stat_updates`].
pub struct Tape<'p> {
    store: &'p ParamStore,
    mode: Mode,
    rng: ChaCha8Rng,
    nodes: Vec<Node>,
    param_ids: HashMap<String, NodeId>,
    stat_updates: Vec<StatUpdate>,
}

/// Runs `program` on a fresh tape and returns its output value with the tape.
pub fn record_forward<'p, F>(
    store: &'p ParamStore,
    mode: Mode,
    seed: u64,
    program: F,
) -> Result<(Tensor, Tape<'p>)>
where
    F: FnOnce(&mut Tape<'p>) -> Result<NodeId>,
{
    let mut tape = Tape::new(store, mode, seed);
    let out = program(&mut tape)?;
    Ok((tape.value_of(out).clone(), tape))
}

impl<'p> Tape<'p> {
    /// `seed` drives the dropout masks drawn on this tape.
    pub fn new(store: &'p ParamStore, mode: Mode, seed: u64) -> Self {
        Self {
            store,
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            nodes: Vec::new(),
            param_ids: HashMap::new(),
            stat_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value_of(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Sign of every recorded ReLU input, in recording order. Two passes
    /// with equal patterns lie on the same linear piece of every ReLU.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(x),
                _ => None,
            })
            .flat_map(|x| self.nodes[x.0].value.data().iter().map(|&v| v > 0.0))
            .collect()
    }

    pub fn stat_updates(&self) -> &[StatUpdate] {
        &self.stat_updates
    }

    pub fn into_stat_updates(self) -> Vec<StatUpdate> {
        self.stat_updates
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let requires_grad = match &op {
            Op::Constant => false,
            Op::Leaf | Op::Param(_) => true,
            other => inputs_of(other).iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(Error::IndexOutOfRange {
                index: id.0,
                len: self.nodes.len(),
            });
        }
        Ok(())
    }

    /// A differentiable input whose gradient is available from
    /// [`Tape::backward_nodes`].
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let v = tensor::activation(self.value_of(x), tensor::Activation::Sigmoid);
        Ok(self.push(v, Op::Sigmoid(x)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let v = self.value_of(a).mul(self.value_of(b))?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// Elementwise product with a fixed tensor.
    pub fn mul_const(&mut self, x: NodeId, factor: Tensor) -> Result<NodeId> {
        self.check(x)?;
        let v = self.value_of(x).mul(&factor)?;
        Ok(self.push(v, Op::MulConst(x, factor)))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        self.check(x)?;
        let v = self.value_of(x).scale(factor);
        Ok(self.push(v, Op::Scale(x, factor)))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let v = Tensor::scalar(self.value_of(x).sum());
        Ok(self.push(v, Op::Sum(x)))
    }

    /// Smoothed soft Dice of `p` against a fixed target; a scalar node.
    pub fn soft_dice(&mut self, p: NodeId, target: Tensor, smooth: f64) -> Result<NodeId> {
        self.check(p)?;
        let v = loss::soft_dice_smoothed(self.value_of(p), &target, smooth)?;
        Ok(self.push(
            Tensor::scalar(v),
            Op::SoftDice {
                p,
                target,
                smooth,
            },
        ))
    }

    /// Categorical Dice loss of probabilities `p` against a one-hot target.
    pub fn categorical_dice_loss(
        &mut self,
        p: NodeId,
        target: Tensor,
        weights: ClassWeights,
        smooth: f64,
    ) -> Result<NodeId> {
        self.check(p)?;
        let v = loss::categorical_dice_loss_smoothed(self.value_of(p), &target, &weights, smooth)?;
        Ok(self.push(
            Tensor::scalar(v),
            Op::CategoricalDice {
                p,
                target,
                weights,
                smooth,
            },
        ))
    }

    /// `d(seed · output) / d(param)` for every parameter reached from
    /// `output`.
    pub fn backward(&self, output: NodeId, seed: &Tensor) -> Result<GradientMap> {
        let grads = self.backward_nodes(output, seed)?;
        let mut map = GradientMap::default();
        for (node, grad) in self.nodes.iter().zip(grads) {
            if let (Op::Param(name), Some(g)) = (&node.op, grad) {
                map.insert(name.clone(), g);
            }
        }
        Ok(map)
    }

    /// Gradients for every node that requires one and is reached from
    /// `output`; `None` elsewhere.
    pub fn backward_nodes(&self, output: NodeId, seed: &Tensor) -> Result<Vec<Option<Tensor>>> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        self.check(output)?;
        seed.expect_same_shape(self.value_of(output))?;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if self.nodes[output.0].requires_grad {
            grads[output.0] = Some(seed.clone());
        }
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(grads)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) -> Result<()> {
        if !self.nodes[id.0].requires_grad {
            return Ok(());
        }
        match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |id: NodeId| &self.nodes[id.0].value;
        match &node.op {
            Op::Constant | Op::Leaf | Op::Param(_) => {}
            Op::Conv { x, w, b, spec } => {
                let cg = conv3d_backward(val(*x), val(*w), g, spec)?;
                self.accumulate(grads, *x, cg.input)?;
                self.accumulate(grads, *w, cg.weight)?;
                if let Some(b) = b {
                    self.accumulate(grads, *b, cg.bias)?;
                }
            }
            Op::ConvTranspose { x, w, b, spec } => {
                let cg = conv_transpose3d_backward(val(*x), val(*w), g, spec)?;
                self.accumulate(grads, *x, cg.input)?;
                self.accumulate(grads, *w, cg.weight)?;
                if let Some(b) = b {
                    self.accumulate(grads, *b, cg.bias)?;
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                cache,
            } => {
                let (gx, ggamma, gbeta) = batch_norm_backward(g, val(*gamma), cache)?;
                self.accumulate(grads, *x, gx)?;
                self.accumulate(grads, *gamma, ggamma)?;
                self.accumulate(grads, *beta, gbeta)?;
            }
            Op::Relu(x) => {
                let gx = g.zip_map(val(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 })?;
                self.accumulate(grads, *x, gx)?;
            }
            Op::Sigmoid(x) => {
                let gx = g.zip_map(&node.value, |gv, s| gv * s * (1.0 - s))?;
                self.accumulate(grads, *x, gx)?;
            }
            Op::Softmax(x) => {
                let c = node.value.channels();
                let mut gx = g.clone();
                for (gv, sv) in gx.data_mut().chunks_mut(c).zip(node.value.data().chunks(c)) {
                    let dot: f64 = gv.iter().zip(sv).map(|(a, b)| a * b).sum();
                    gv.iter_mut().zip(sv).for_each(|(a, s)| *a = s * (*a - dot));
                }
                self.accumulate(grads, *x, gx)?;
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Mul(a, b) => {
                self.accumulate(grads, *a, g.mul(val(*b))?)?;
                self.accumulate(grads, *b, g.mul(val(*a))?)?;
            }
            Op::MulConst(x, factor) => self.accumulate(grads, *x, g.mul(factor)?)?,
            Op::Scale(x, factor) => self.accumulate(grads, *x, g.scale(*factor))?,
            Op::Concat(parts) => {
                let mut start = 0;
                for p in parts {
                    let c = val(*p).channels();
                    self.accumulate(grads, *p, tensor::slice_channels(g, start, c)?)?;
                    start += c;
                }
            }
            Op::Dropout { x, mask, scale } => {
                let gx = g.zip_map(mask, |gv, m| gv * m * scale)?;
                self.accumulate(grads, *x, gx)?;
            }
            Op::Sum(x) => {
                let gx = Tensor::full(val(*x).shape(), g.data()[0]);
                self.accumulate(grads, *x, gx)?;
            }
            Op::SoftDice { p, target, smooth } => {
                let gx = loss::soft_dice_grad(val(*p), target, *smooth)?.scale(g.data()[0]);
                self.accumulate(grads, *p, gx)?;
            }
            Op::CategoricalDice {
                p,
                target,
                weights,
                smooth,
            } => {
                let gx = loss::categorical_dice_grad(val(*p), target, weights, *smooth)?
                    .scale(g.data()[0]);
                self.accumulate(grads, *p, gx)?;
            }
        }
        Ok(())
    }
}

fn inputs_of(op: &Op) -> Vec<NodeId> {
    match op {
        Op::Constant | Op::Leaf | Op::Param(_) => vec![],
        Op::Conv { x, w, b, .. } | Op::ConvTranspose { x, w, b, .. } => {
            let mut v = vec![*x, *w];
            v.extend(b);
            v
        }
        Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::Relu(x)
        | Op::Sigmoid(x)
        | Op::Softmax(x)
        | Op::MulConst(x, _)
        | Op::Scale(x, _)
        | Op::Sum(x)
        | Op::Dropout { x, .. }
        | Op::SoftDice { p: x, .. }
        | Op::CategoricalDice { p: x, .. } => vec![*x],
        Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
        Op::Concat(parts) => parts.clone(),
    }
}

impl Graph for Tape<'_> {
    type Var = NodeId;

    fn param(&mut self, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.param_ids.get(name) {
            return Ok(id);
        }
        let value = self.store.param(name)?.clone();
        let id = self.push(value, Op::Param(name.to_string()));
        self.param_ids.insert(name.to_string(), id);
        Ok(id)
    }

    fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Constant)
    }

    fn value<'a>(&'a self, var: &'a NodeId) -> &'a Tensor {
        self.value_of(*var)
    }

    fn conv3d(
        &mut self,
        x: &NodeId,
        w: &NodeId,
        b: Option<&NodeId>,
        spec: &ConvSpec,
    ) -> Result<NodeId> {
        self.check(*x)?;
        self.check(*w)?;
        let v = tensor::conv3d(
            self.value_of(*x),
            self.value_of(*w),
            b.map(|b| self.value_of(*b)),
            spec,
        )?;
        Ok(self.push(
            v,
            Op::Conv {
                x: *x,
                w: *w,
                b: b.copied(),
                spec: *spec,
            },
        ))
    }

    fn conv_transpose3d(
        &mut self,
        x: &NodeId,
        w: &NodeId,
        b: Option<&NodeId>,
        spec: &ConvSpec,
    ) -> Result<NodeId> {
        self.check(*x)?;
        self.check(*w)?;
        let v = tensor::conv_transpose3d(
            self.value_of(*x),
            self.value_of(*w),
            b.map(|b| self.value_of(*b)),
            spec,
        )?;
        Ok(self.push(
            v,
            Op::ConvTranspose {
                x: *x,
                w: *w,
                b: b.copied(),
                spec: *spec,
            },
        ))
    }

    fn batch_norm(&mut self, x: &NodeId, prefix: &str) -> Result<NodeId> {
        self.check(*x)?;
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        let mut stats = self.store.running_stats(prefix)?;
        let (v, cache) = tensor::batch_norm(
            self.value_of(*x),
            self.value_of(gamma),
            self.value_of(beta),
            &mut stats,
            self.mode,
        )?;
        if self.mode == Mode::Train {
            self.stat_updates.push(StatUpdate {
                prefix: prefix.to_string(),
                stats,
            });
        }
        Ok(self.push(
            v,
            Op::BatchNorm {
                x: *x,
                gamma,
                beta,
                cache,
            },
        ))
    }

    fn relu(&mut self, x: &NodeId) -> Result<NodeId> {
        self.check(*x)?;
        let v = tensor::activation(self.value_of(*x), tensor::Activation::Relu);
        Ok(self.push(v, Op::Relu(*x)))
    }

    fn add(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        self.check(*a)?;
        self.check(*b)?;
        let v = self.value_of(*a).add(self.value_of(*b))?;
        Ok(self.push(v, Op::Add(*a, *b)))
    }

    fn concat_channels(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        for p in parts {
            self.check(*p)?;
        }
        let refs: Vec<&Tensor> = parts.iter().map(|p| self.value_of(*p)).collect();
        let v = tensor::concat_channels(&refs)?;
        Ok(self.push(v, Op::Concat(parts.to_vec())))
    }

    fn dropout(&mut self, x: &NodeId, rate: f64) -> Result<NodeId> {
        self.check(*x)?;
        let (v, mask) = tensor::dropout(&self.nodes[x.0].value, rate, &mut self.rng, self.mode)?;
        let scale = if self.mode == Mode::Train {
            1.0 / (1.0 - rate)
        } else {
            1.0
        };
        Ok(self.push(v, Op::Dropout { x: *x, mask, scale }))
    }

    fn softmax_channels(&mut self, x: &NodeId) -> Result<NodeId> {
        self.check(*x)?;
        let v = tensor::softmax_channels(self.value_of(*x));
        Ok(self.push(v, Op::Softmax(*x)))
    }
}

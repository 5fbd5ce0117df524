use std::collections::BTreeMap;

use super::store::ParamStore;
use crate::error::Result;
use crate::numerics::{Aux, Axis, BnMode, Graph, NodeId, Op, Scalar, Tensor};
use crate::rng::SeededRng;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// One forward pass over a [`ParamStore`]: parameters are bound into the
/// graph on first use, and batch-norm layers in train mode record the batch
/// statistics that [`Trace::update_running_stats`] folds into the buffers.
pub struct Forward<'s, T: Scalar = f32> {
    pub graph: Graph<T>,
    store: &'s ParamStore<T>,
    bound: BTreeMap<String, NodeId>,
    train: bool,
    dropout: SeededRng,
    dropout_calls: u64,
    bn_nodes: Vec<(String, NodeId)>,
}

impl<'s, T: Scalar> Forward<'s, T> {
    pub fn new(store: &'s ParamStore<T>, train: bool, dropout_seed: u64) -> Self {
        Self {
            graph: Graph::new(),
            store,
            bound: BTreeMap::new(),
            train,
            dropout: SeededRng::new(dropout_seed),
            dropout_calls: 0,
            bn_nodes: Vec::new(),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.graph.input(value)
    }

    pub fn param(&mut self, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.bound.get(name) {
            return Ok(id);
        }
        let id = self.graph.param(self.store.param(name)?.clone());
        self.bound.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn apply(&mut self, op: Op<T>, inputs: &[NodeId]) -> Result<NodeId> {
        self.graph.apply(op, inputs)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        self.graph.value(id)
    }

    /// Bias-free 1D convolution with weight `{prefix}.w`.
    pub fn conv(&mut self, x: NodeId, prefix: &str, axis: Axis, stride: usize, padding: usize) -> Result<NodeId> {
        let w = self.param(&format!("{prefix}.w"))?;
        self.apply(Op::Conv { axis, stride, padding }, &[x, w])
    }

    pub fn linear(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let w = self.param(&format!("{prefix}.w"))?;
        let b = self.param(&format!("{prefix}.b"))?;
        self.apply(Op::Linear, &[x, w, b])
    }

    pub fn batch_norm(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        let rm = self.graph.input(self.store.buffer(&format!("{prefix}.running_mean"))?.clone());
        let rv = self.graph.input(self.store.buffer(&format!("{prefix}.running_var"))?.clone());
        let mode = if self.train { BnMode::Train } else { BnMode::Eval };
        let out = self.apply(Op::BatchNorm { mode, eps: BN_EPS }, &[x, gamma, beta, rm, rv])?;
        if self.train {
            self.bn_nodes.push((prefix.to_string(), out));
        }
        Ok(out)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Relu, &[x])
    }

    /// Inverted dropout; every call in train mode gets its own mask seed.
    pub fn dropout(&mut self, x: NodeId, rate: f64) -> Result<NodeId> {
        if !self.train || rate == 0.0 {
            return Ok(x);
        }
        let seed = self.dropout.substream_indexed("mask", self.dropout_calls).next_u64();
        self.dropout_calls += 1;
        self.apply(Op::Dropout { rate, train: true, seed }, &[x])
    }

    pub fn finish(self) -> Trace<T> {
        let bn_stats = self
            .bn_nodes
            .iter()
            .filter_map(|(prefix, id)| match self.graph.aux(*id) {
                Aux::BatchNorm { mean, var, count, .. } => Some(BnBatchStats {
                    prefix: prefix.clone(),
                    mean: mean.clone(),
                    var: var.clone(),
                    count: *count,
                }),
                _ => None,
            })
            .collect();
        Trace {
            graph: self.graph,
            bound: self.bound,
            bn_stats,
        }
    }
}

pub struct BnBatchStats<T> {
    pub prefix: String,
    pub mean: Vec<T>,
    /// Biased batch variance.
    pub var: Vec<T>,
    pub count: usize,
}

/// A finished forward pass.
pub struct Trace<T: Scalar = f32> {
    pub graph: Graph<T>,
    bound: BTreeMap<String, NodeId>,
    bn_stats: Vec<BnBatchStats<T>>,
}

impl<T: Scalar> Trace<T> {
    pub fn node_of(&self, name: &str) -> Option<NodeId> {
        self.bound.get(name).copied()
    }

    /// Gradient of a scalar node for every parameter the pass touched, in
    /// name order.
    pub fn gradients(&self, loss: NodeId) -> Result<Vec<(String, Tensor<T>)>> {
        let mut grads = self.graph.backward(loss)?;
        Ok(self.bound.iter().map(|(name, &id)| (name.clone(), grads.take(id))).collect())
    }

    /// Exponential moving average of batch statistics with momentum
    /// [`BN_MOMENTUM`]; the variance buffer tracks the unbiased estimate.
    pub fn update_running_stats(&self, store: &mut ParamStore<T>) -> Result<()> {
        let m = T::of(BN_MOMENTUM);
        let keep = T::one() - m;
        for s in &self.bn_stats {
            let correction = if s.count > 1 {
                T::of(s.count as f64 / (s.count - 1) as f64)
            } else {
                T::one()
            };
            let rm = store.buffer_mut(&format!("{}.running_mean", s.prefix))?;
            for (r, &b) in rm.data_mut().iter_mut().zip(&s.mean) {
                *r = keep * *r + m * b;
            }
            let rv = store.buffer_mut(&format!("{}.running_var", s.prefix))?;
            for (r, &b) in rv.data_mut().iter_mut().zip(&s.var) {
                *r = keep * *r + m * b * correction;
            }
        }
        Ok(())
    }
}

//! Parameter storage and the layer building blocks shared by every model.

use crate::error::Result;
use crate::tensor::{ConvGeometry, Graph, Tensor, TransposedGeometry, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Batch-norm hyperparameters. Running statistics follow
/// `running = momentum * running + (1 - momentum) * batch`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchNormConfig {
    pub momentum: f64,
    pub epsilon: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        Self {
            momentum: 0.99,
            epsilon: 1e-3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Convolution or transposed-convolution kernel; the only kind that
    /// receives L2 regularisation.
    Kernel,
    Bias,
    Gamma,
    Beta,
}

/// Trainable tensors in creation order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    values: Vec<Tensor>,
    kinds: Vec<ParamKind>,
    names: Vec<String>,
}

impl ParamStore {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn kinds(&self) -> &[ParamKind] {
        &self.kinds
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    fn push(&mut self, name: String, kind: ParamKind, value: Tensor) -> ParamId {
        self.values.push(value);
        self.kinds.push(kind);
        self.names.push(name);
        ParamId(self.values.len() - 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Allocates and initialises parameters in a fixed order.
pub(crate) struct Builder {
    pub params: ParamStore,
    pub stats: Vec<RunningStats>,
    rng: ChaCha8Rng,
    prefix: Vec<String>,
}

impl Builder {
    pub fn new(rng: ChaCha8Rng) -> Self {
        Self {
            params: ParamStore::default(),
            stats: Vec::new(),
            rng,
            prefix: Vec::new(),
        }
    }

    pub fn scoped<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> T) -> T {
        self.prefix.push(name.to_string());
        let out = f(self);
        self.prefix.pop();
        out
    }

    fn name(&self, leaf: &str) -> String {
        let mut s = self.prefix.join(".");
        if !s.is_empty() {
            s.push('.');
        }
        s.push_str(leaf);
        s
    }

    /// He-uniform: `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`.
    fn he_uniform(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let limit = (6.0 / fan_in as f64).sqrt();
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| self.rng.gen_range(-limit..limit)).collect();
        Tensor::new(shape.to_vec(), data).expect("valid shape")
    }

    pub fn conv(&mut self, cin: usize, cout: usize, geom: ConvGeometry) -> Conv {
        let [kd, kh, kw] = geom.kernel;
        let init = self.he_uniform(&[cout, cin, kd, kh, kw], cin * geom.kernel_volume());
        let weight = self.params.push(self.name("kernel"), ParamKind::Kernel, init);
        let bias = self
            .params
            .push(self.name("bias"), ParamKind::Bias, Tensor::zeros(&[cout]));
        Conv { weight, bias, geom }
    }

    pub fn transposed(&mut self, cin: usize, cout: usize, geom: TransposedGeometry) -> TransposedConv {
        let [kd, kh, kw] = geom.kernel;
        let init = self.he_uniform(&[cin, cout, kd, kh, kw], cin * geom.kernel_volume());
        let weight = self.params.push(self.name("kernel"), ParamKind::Kernel, init);
        let bias = self
            .params
            .push(self.name("bias"), ParamKind::Bias, Tensor::zeros(&[cout]));
        TransposedConv { weight, bias, geom }
    }

    pub fn batch_norm(&mut self, channels: usize) -> BatchNorm {
        let gamma = self
            .params
            .push(self.name("gamma"), ParamKind::Gamma, Tensor::full(&[channels], 1.0));
        let beta = self
            .params
            .push(self.name("beta"), ParamKind::Beta, Tensor::zeros(&[channels]));
        self.stats.push(RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        });
        BatchNorm {
            gamma,
            beta,
            stats: self.stats.len() - 1,
        }
    }

    pub fn conv_bn_relu(&mut self, cin: usize, cout: usize, geom: ConvGeometry) -> ConvBnRelu {
        let conv = self.conv(cin, cout, geom);
        let bn = self.batch_norm(cout);
        ConvBnRelu { conv, bn }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Batch statistics; running statistics are reported for update.
    Train,
    /// Running statistics.
    Infer,
}

/// Per-call state threaded through a forward pass.
pub struct Forward<'a> {
    pub graph: &'a mut Graph,
    params: &'a ParamStore,
    stats: &'a [RunningStats],
    leaves: Vec<Option<Var>>,
    pub(crate) batch_stats: Vec<Option<RunningStats>>,
    pub phase: Phase,
    bn: BatchNormConfig,
    track_params: bool,
    pub(crate) depth_trace: Vec<usize>,
}

impl<'a> Forward<'a> {
    pub(crate) fn new(
        graph: &'a mut Graph,
        params: &'a ParamStore,
        stats: &'a [RunningStats],
        phase: Phase,
        bn: BatchNormConfig,
        track_params: bool,
    ) -> Self {
        Self {
            graph,
            params,
            stats,
            leaves: vec![None; params.len()],
            batch_stats: vec![None; stats.len()],
            phase,
            bn,
            track_params,
            depth_trace: Vec::new(),
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.leaves[id.0] {
            return v;
        }
        let v = self.graph.leaf(self.params.get(id).clone(), self.track_params);
        self.leaves[id.0] = Some(v);
        v
    }

    pub(crate) fn into_parts(self) -> (Vec<Option<Var>>, Vec<Option<RunningStats>>, Vec<usize>) {
        (self.leaves, self.batch_stats, self.depth_trace)
    }
}

/// Shape-and-cost bookkeeping for a symbolic pass.
#[derive(Clone, Debug, Default)]
pub struct CostTrace {
    /// Two times multiply-accumulates of convolution-type layers.
    pub flops: u128,
    /// Elements of every intermediate activation.
    pub activation_elements: u128,
}

impl CostTrace {
    fn activation(&mut self, shape: [usize; 5]) {
        self.activation_elements += shape.iter().map(|&e| e as u128).product::<u128>();
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geom: ConvGeometry,
}

impl Conv {
    pub fn forward(&self, fw: &mut Forward<'_>, x: Var) -> Result<Var> {
        let (w, b) = (fw.param(self.weight), fw.param(self.bias));
        fw.graph.conv(x, w, b, self.geom)
    }

    pub fn trace(&self, params: &ParamStore, shape: [usize; 5], cost: &mut CostTrace) -> Result<[usize; 5]> {
        let ks = params.get(self.weight).shape();
        let [d, h, w] = self.geom.output_extents([shape[2], shape[3], shape[4]])?;
        let out = [shape[0], ks[0], d, h, w];
        let positions = (shape[0] * d * h * w) as u128;
        cost.flops += 2 * (ks[0] * ks[1] * self.geom.kernel_volume()) as u128 * positions;
        cost.activation(out);
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct TransposedConv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geom: TransposedGeometry,
}

impl TransposedConv {
    pub fn forward(&self, fw: &mut Forward<'_>, x: Var) -> Result<Var> {
        let (w, b) = (fw.param(self.weight), fw.param(self.bias));
        fw.graph.transposed_conv(x, w, b, self.geom)
    }

    pub fn trace(&self, params: &ParamStore, shape: [usize; 5], cost: &mut CostTrace) -> [usize; 5] {
        let ks = params.get(self.weight).shape();
        let [d, h, w] = self.geom.output_extents([shape[2], shape[3], shape[4]]);
        let out = [shape[0], ks[1], d, h, w];
        let positions = (shape[0] * shape[2] * shape[3] * shape[4]) as u128;
        cost.flops += 2 * (ks[0] * ks[1] * self.geom.kernel_volume()) as u128 * positions;
        cost.activation(out);
        out
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: usize,
}

impl BatchNorm {
    pub fn forward(&self, fw: &mut Forward<'_>, x: Var) -> Result<Var> {
        let (g, b) = (fw.param(self.gamma), fw.param(self.beta));
        let eps = fw.bn.epsilon;
        match fw.phase {
            Phase::Train => {
                let (y, mean, var) = fw.graph.batch_norm_train(x, g, b, eps)?;
                fw.batch_stats[self.stats] = Some(RunningStats { mean, var });
                Ok(y)
            }
            Phase::Infer => {
                let s = &fw.stats[self.stats];
                fw.graph.batch_norm_infer(x, g, b, &s.mean, &s.var, eps)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl ConvBnRelu {
    pub fn forward(&self, fw: &mut Forward<'_>, x: Var) -> Result<Var> {
        let y = self.conv.forward(fw, x)?;
        let y = self.bn.forward(fw, y)?;
        Ok(fw.graph.relu(y))
    }

    pub fn trace(&self, params: &ParamStore, shape: [usize; 5], cost: &mut CostTrace) -> Result<[usize; 5]> {
        let out = self.conv.trace(params, shape, cost)?;
        // batch norm and relu outputs
        cost.activation(out);
        cost.activation(out);
        Ok(out)
    }
}

pub(crate) fn trace_activation(cost: &mut CostTrace, shape: [usize; 5]) {
    cost.activation(shape);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn single_conv_flops() {
        let mut b = Builder::new(ChaCha8Rng::seed_from_u64(0));
        let conv = b.conv(1, 1, ConvGeometry::planar(3));
        let mut cost = CostTrace::default();
        let out = conv.trace(&b.params, [1, 1, 1, 8, 8], &mut cost).unwrap();
        assert_eq!(out, [1, 1, 1, 8, 8]);
        assert_eq!(cost.flops, 2 * 9 * 64);
        let mut big = CostTrace::default();
        conv.trace(&b.params, [1, 1, 1, 16, 16], &mut big).unwrap();
        assert_eq!(big.flops, 4 * cost.flops);
    }
}

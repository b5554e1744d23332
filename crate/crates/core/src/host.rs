//! Frozen MLP standing in for a pretrained model. Each layer computes
//! `act(x·W0 + bias + adapter(x))`; only adapter parameters are trainable.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::{
    Adapter, AdapterCache, AdapterConfig, AdapterKind, ForwardCounters, NamedGrads, Participation, RouterKind,
};
use crate::diffkit::{DiffLayer, LayerGrads, ParamView};
use crate::error::{Error, Result};
use crate::linalg::{matmul, Matrix, OpCounter};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, m: &Matrix) -> Matrix {
        match self {
            Activation::Relu => m.map(|v| if v > 0.0 { v } else { 0.0 }),
            Activation::Identity => m.clone(),
        }
    }

    /// Multiply `grad` by the derivative at `pre`. Relu's derivative at 0 is taken as 0.
    fn backward(self, pre: &Matrix, grad: &Matrix) -> Matrix {
        match self {
            Activation::Relu => {
                let mut out = grad.clone();
                for (g, p) in out.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                    if *p <= 0.0 {
                        *g = 0.0;
                    }
                }
                out
            }
            Activation::Identity => grad.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HostLayer {
    w0: Matrix,
    bias: Matrix,
    pub activation: Activation,
    adapter: Option<Adapter>,
}

impl HostLayer {
    pub fn w0(&self) -> &Matrix {
        &self.w0
    }

    pub fn bias(&self) -> &Matrix {
        &self.bias
    }

    pub fn adapter(&self) -> Option<&Adapter> {
        self.adapter.as_ref()
    }

    pub fn d_in(&self) -> usize {
        self.w0.rows()
    }

    pub fn d_out(&self) -> usize {
        self.w0.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrozenHost {
    layers: Vec<HostLayer>,
    generation: u64,
}

#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub input: Matrix,
    pub pre_activation: Matrix,
    pub output: Matrix,
    pub adapter: Option<AdapterCache>,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    generation: u64,
    pub layers: Vec<LayerTrace>,
}

impl ForwardTrace {
    pub fn output(&self) -> Option<&Matrix> {
        self.layers.last().map(|l| &l.output)
    }
}

/// Gradients of every attached adapter, keyed by layer index.
#[derive(Debug, Clone)]
pub struct HostGrads {
    pub input: Matrix,
    pub adapters: Vec<(usize, NamedGrads)>,
}

impl HostGrads {
    /// Gradients in [`FrozenHost::trainable_params`] order.
    pub fn flatten(self) -> Vec<Matrix> {
        self.adapters.into_iter().flat_map(|(_, g)| g.into_iter().map(|(_, m)| m)).collect()
    }
}

impl FrozenHost {
    /// Layer `l` maps `dims[l] → dims[l+1]` with `W0 ~ N(0, 1/d_in)` and a
    /// zero bias. Hidden layers use relu, the last layer is linear.
    pub fn build(dims: &[usize], seed: u64) -> Result<Self> {
        Self::build_with(dims, seed, Activation::Relu)
    }

    pub fn build_with(dims: &[usize], seed: u64, hidden_activation: Activation) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::InvalidConfig(format!("host needs at least two positive dims, got {dims:?}")));
        }
        let mut rng = crate::rng::stream(seed, "host", 0);
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(l, w)| HostLayer {
                w0: Matrix::randn(w[0], w[1], (1.0 / w[0] as f64).sqrt(), &mut rng),
                bias: Matrix::zeros(1, w[1]),
                activation: if l == last { Activation::Identity } else { hidden_activation },
                adapter: None,
            })
            .collect();
        Ok(Self { layers, generation: 0 })
    }

    /// Assemble a host from explicit frozen weights. Biases are `1 x d_out`.
    pub fn from_layers(layers: Vec<(Matrix, Matrix, Activation)>) -> Result<Self> {
        let mut prev: Option<usize> = None;
        let mut out = Vec::with_capacity(layers.len());
        for (w0, bias, activation) in layers {
            if bias.shape() != (1, w0.cols()) || prev.is_some_and(|d| d != w0.rows()) {
                return Err(Error::shape("FrozenHost::from_layers", w0.shape(), bias.shape()));
            }
            prev = Some(w0.cols());
            out.push(HostLayer { w0, bias, activation, adapter: None });
        }
        if out.is_empty() {
            return Err(Error::InvalidConfig("host needs at least one layer".into()));
        }
        Ok(Self { layers: out, generation: 0 })
    }

    pub fn layers(&self) -> &[HostLayer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].d_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].d_out()
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn attach_adapter(&mut self, layer: usize, config: AdapterConfig) -> Result<()> {
        let adapter = Adapter::init(config)?;
        self.attach(layer, adapter)
    }

    /// Attach an already-built adapter (for tests and checkpoint restore).
    pub fn attach(&mut self, layer: usize, adapter: Adapter) -> Result<()> {
        let n = self.layers.len();
        let slot = self.layers.get_mut(layer).ok_or(Error::LayerOutOfRange { index: layer, layers: n })?;
        if slot.adapter.is_some() {
            return Err(Error::AlreadyAttached(layer));
        }
        let cfg = adapter.config();
        if (cfg.d_in, cfg.d_out) != slot.w0.shape() {
            return Err(Error::shape("attach_adapter", (cfg.d_in, cfg.d_out), slot.w0.shape()));
        }
        slot.adapter = Some(adapter);
        self.generation += 1;
        Ok(())
    }

    pub fn adapter(&self, layer: usize) -> Option<&Adapter> {
        self.layers.get(layer).and_then(|l| l.adapter.as_ref())
    }

    /// Mutable access to an adapter. Invalidates outstanding traces.
    pub fn adapter_mut(&mut self, layer: usize) -> Option<&mut Adapter> {
        self.generation += 1;
        self.layers.get_mut(layer).and_then(|l| l.adapter.as_mut())
    }

    pub fn adapters(&self) -> impl Iterator<Item = (usize, &Adapter)> {
        self.layers.iter().enumerate().filter_map(|(i, l)| l.adapter.as_ref().map(|a| (i, a)))
    }

    /// Trainable parameters, named `layer{l}.{param}`.
    pub fn trainable_params(&self) -> Vec<(String, &Matrix)> {
        self.adapters()
            .flat_map(|(l, a)| a.params().into_iter().map(move |(n, m)| (format!("layer{l}.{n}"), m)))
            .collect()
    }

    /// Mutable trainable parameters in [`FrozenHost::trainable_params`] order.
    /// Invalidates outstanding traces.
    pub fn trainable_params_mut(&mut self) -> Vec<&mut Matrix> {
        self.generation += 1;
        self.layers
            .iter_mut()
            .filter_map(|l| l.adapter.as_mut())
            .flat_map(|a| a.params_mut().into_iter().map(|(_, m)| m))
            .collect()
    }

    pub fn trainable_count(&self) -> u64 {
        self.adapters().map(|(_, a)| a.param_count().total).sum()
    }

    /// SHA-256 over every frozen tensor (shapes and bit patterns).
    pub fn frozen_checksum(&self) -> String {
        let mut h = Sha256::new();
        for l in &self.layers {
            for m in [&l.w0, &l.bias] {
                h.update((m.rows() as u64).to_le_bytes());
                h.update((m.cols() as u64).to_le_bytes());
                for v in m.as_slice() {
                    h.update(v.to_bits().to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }

    pub fn forward(&self, x: &Matrix, counter: &mut OpCounter) -> Result<(Matrix, ForwardTrace)> {
        self.forward_with(x, &Participation::Routed, counter)
    }

    /// Forward pass with a participation override applied to every routed adapter.
    pub fn forward_with(
        &self,
        x: &Matrix,
        participation: &Participation,
        counter: &mut OpCounter,
    ) -> Result<(Matrix, ForwardTrace)> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape("host forward", x.shape(), (x.rows(), self.input_dim())));
        }
        let mut traces = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            let mut pre = matmul(&h, &layer.w0, counter)?.add_row_broadcast(&layer.bias)?;
            let cache = match &layer.adapter {
                Some(a) => {
                    let part = if a.router.is_some() { participation } else { &Participation::Routed };
                    let mut fc = ForwardCounters::default();
                    let (delta, cache) = a.forward_with(&h, part, &mut fc)?;
                    counter.merge(&fc.total());
                    pre.add_assign(&delta)?;
                    Some(cache)
                }
                None => None,
            };
            let out = layer.activation.apply(&pre);
            traces.push(LayerTrace { input: h, pre_activation: pre, output: out.clone(), adapter: cache });
            h = out;
        }
        Ok((h, ForwardTrace { generation: self.generation, layers: traces }))
    }

    /// Backpropagate `grad_out` through the stack. Frozen weights receive no
    /// gradient; the result holds one entry per attached adapter.
    pub fn backward(&self, trace: &ForwardTrace, grad_out: &Matrix, counter: &mut OpCounter) -> Result<HostGrads> {
        if trace.generation != self.generation || trace.layers.len() != self.layers.len() {
            return Err(Error::StaleTrace { trace: trace.generation, host: self.generation });
        }
        let mut grad = grad_out.clone();
        let mut adapters = Vec::new();
        for (l, (layer, lt)) in self.layers.iter().zip(&trace.layers).enumerate().rev() {
            if grad.shape() != lt.output.shape() {
                return Err(Error::shape("host backward", grad.shape(), lt.output.shape()));
            }
            let d_pre = layer.activation.backward(&lt.pre_activation, &grad);
            let mut d_in = matmul(&d_pre, &layer.w0.transpose(), counter)?;
            if let (Some(a), Some(cache)) = (&layer.adapter, &lt.adapter) {
                let (dx, g) = a.backward(cache, &d_pre, counter)?;
                d_in.add_assign(&dx)?;
                adapters.push((l, g));
            }
            grad = d_in;
        }
        adapters.reverse();
        Ok(HostGrads { input: grad, adapters })
    }
}

fn one() -> usize {
    1
}

/// How to place adapters on a host: one adapter of the same kind on each
/// listed layer (all layers by default), sized to that layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterSpec {
    pub kind: AdapterKind,
    #[serde(default = "one")]
    pub k: usize,
    pub r_b: usize,
    pub alpha: f64,
    /// Defaults to the kind's own router.
    #[serde(default)]
    pub router: Option<RouterKind>,
    /// Defaults to `2k`.
    #[serde(default)]
    pub s_hidden: Option<usize>,
    #[serde(default)]
    pub layers: Option<Vec<usize>>,
}

impl AdapterSpec {
    pub fn new(kind: AdapterKind, k: usize, r_b: usize, alpha: f64) -> Self {
        Self { kind, k, r_b, alpha, router: None, s_hidden: None, layers: None }
    }

    pub fn config_for(&self, d_in: usize, d_out: usize, seed: u64) -> AdapterConfig {
        let k = if self.kind == AdapterKind::Lora { 1 } else { self.k };
        let mut cfg = AdapterConfig::of_kind(self.kind, d_in, d_out, k, self.r_b, self.alpha, seed);
        if let Some(r) = self.router {
            cfg.router = Some(r);
        }
        if let Some(h) = self.s_hidden {
            cfg.s_hidden = h;
        }
        cfg
    }

    /// Attach to `host`. Layer `l` gets seed `derive_seed(seed, "adapter", l)`.
    pub fn attach(&self, host: &mut FrozenHost, seed: u64) -> Result<()> {
        let layers: Vec<usize> = match &self.layers {
            Some(l) => l.clone(),
            None => (0..host.layers().len()).collect(),
        };
        for l in layers {
            let layer = host.layers().get(l).ok_or(Error::LayerOutOfRange { index: l, layers: host.layers().len() })?;
            let cfg = self.config_for(layer.d_in(), layer.d_out(), crate::rng::derive_seed(seed, "adapter", l as u64));
            host.attach_adapter(l, cfg)?;
        }
        Ok(())
    }
}

/// A host wrapped as a [`DiffLayer`]: frozen `W0`/bias are listed as
/// non-trainable parameters and never receive a gradient.
pub struct HostNetwork {
    pub host: FrozenHost,
    trace: Option<ForwardTrace>,
}

impl HostNetwork {
    pub fn new(host: FrozenHost) -> Self {
        Self { host, trace: None }
    }
}

impl DiffLayer for HostNetwork {
    fn forward(&mut self, x: &Matrix) -> Result<Matrix> {
        let (out, trace) = self.host.forward(x, &mut OpCounter::new())?;
        self.trace = Some(trace);
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Matrix) -> Result<LayerGrads> {
        let trace = self.trace.as_ref().ok_or(Error::BackwardBeforeForward)?;
        let grads = self.host.backward(trace, grad_out, &mut OpCounter::new())?;
        let params = grads
            .adapters
            .into_iter()
            .flat_map(|(l, g)| g.into_iter().map(move |(n, m)| (format!("layer{l}.{n}"), m)))
            .collect();
        Ok(LayerGrads { input: grads.input, params })
    }

    fn params(&self) -> Vec<ParamView<'_>> {
        let mut out = Vec::new();
        for (l, layer) in self.host.layers.iter().enumerate() {
            out.push(ParamView { name: format!("layer{l}.W0"), value: &layer.w0, trainable: false });
            out.push(ParamView { name: format!("layer{l}.bias"), value: &layer.bias, trainable: false });
            if let Some(a) = &layer.adapter {
                for (n, m) in a.params() {
                    out.push(ParamView { name: format!("layer{l}.{n}"), value: m, trainable: true });
                }
            }
        }
        out
    }

    fn param_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.trace = None;
        let (layer, pname) = name.strip_prefix("layer")?.split_once('.')?;
        let layer: usize = layer.parse().ok()?;
        self.host.adapter_mut(layer)?.params_mut().into_iter().find(|(n, _)| n == pname).map(|(_, m)| m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::AdapterKind;

    fn x(rows: usize, cols: usize, seed: u64) -> Matrix {
        Matrix::randn(rows, cols, 1.0, &mut crate::rng::stream(seed, "x", 0))
    }

    #[test]
    fn construction_shapes_and_determinism() {
        let a = FrozenHost::build(&[8, 16, 4], 3).unwrap();
        let b = FrozenHost::build(&[8, 16, 4], 3).unwrap();
        assert_eq!(a.layers().len(), 2);
        assert_eq!(a.layers()[0].w0().shape(), (8, 16));
        assert_eq!(a.layers()[1].w0().shape(), (16, 4));
        assert_eq!(a, b);
        assert_eq!(a.frozen_checksum(), b.frozen_checksum());
        assert!(FrozenHost::build(&[8], 0).is_err());
        assert!(FrozenHost::build(&[], 0).is_err());
    }

    #[test]
    fn single_identity_layer_is_affine() {
        let w0 = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let bias = Matrix::row_vector(&[0.5, -1.0]);
        let host = FrozenHost::from_layers(vec![(w0, bias, Activation::Identity)]).unwrap();
        let (out, trace) = host.forward(&Matrix::from_rows(&[[1.0, 1.0]]), &mut OpCounter::new()).unwrap();
        assert_eq!(out, Matrix::from_rows(&[[4.5, 5.0]]));
        assert_eq!(trace.layers.len(), 1);
    }

    #[test]
    fn zero_input_zero_bias_identity_gives_zero() {
        let host = FrozenHost::build_with(&[3, 4, 2], 1, Activation::Identity).unwrap();
        let (out, _) = host.forward(&Matrix::zeros(5, 3), &mut OpCounter::new()).unwrap();
        assert_eq!(out.max_abs(), 0.0);
    }

    #[test]
    fn attach_errors() {
        let mut host = FrozenHost::build(&[4, 6, 3], 0).unwrap();
        assert!(matches!(
            host.attach_adapter(2, AdapterConfig::lora(6, 3, 1, 1.0, 0)),
            Err(Error::LayerOutOfRange { index: 2, layers: 2 })
        ));
        assert!(host.attach_adapter(0, AdapterConfig::lora(6, 3, 1, 1.0, 0)).is_err());
        host.attach_adapter(0, AdapterConfig::lora(4, 6, 1, 1.0, 0)).unwrap();
        assert!(matches!(host.attach_adapter(0, AdapterConfig::lora(4, 6, 1, 1.0, 0)), Err(Error::AlreadyAttached(0))));
    }

    #[test]
    fn fresh_adapter_is_neutral_and_counts_only_adapter_params() {
        let mut host = FrozenHost::build(&[5, 7, 3], 2).unwrap();
        let xs = x(6, 5, 1);
        let (before, _) = host.forward(&xs, &mut OpCounter::new()).unwrap();
        let cfg = AdapterConfig::lora(5, 7, 2, 4.0, 1);
        host.attach_adapter(0, cfg.clone()).unwrap();
        let (after, _) = host.forward(&xs, &mut OpCounter::new()).unwrap();
        assert_eq!(before.max_abs_diff(&after).unwrap(), 0.0);
        assert_eq!(host.trainable_count(), crate::adapters::param_count(&cfg).total);
    }

    #[test]
    fn no_adapters_means_no_gradients() {
        let host = FrozenHost::build(&[3, 4, 2], 0).unwrap();
        let (_, trace) = host.forward(&x(2, 3, 0), &mut OpCounter::new()).unwrap();
        let g = host.backward(&trace, &Matrix::filled(2, 2, 1.0), &mut OpCounter::new()).unwrap();
        assert!(g.adapters.is_empty());
    }

    #[test]
    fn stale_trace_is_rejected() {
        let mut host = FrozenHost::build(&[3, 4, 2], 0).unwrap();
        host.attach_adapter(0, AdapterConfig::lora(3, 4, 1, 1.0, 0)).unwrap();
        let (_, trace) = host.forward(&x(2, 3, 0), &mut OpCounter::new()).unwrap();
        host.trainable_params_mut();
        assert!(matches!(
            host.backward(&trace, &Matrix::zeros(2, 2), &mut OpCounter::new()),
            Err(Error::StaleTrace { .. })
        ));
    }

    #[test]
    fn dead_relu_unit_blocks_gradient() {
        // One hidden unit with a strongly negative bias never activates.
        let w0 = Matrix::from_rows(&[[1.0, 1.0]]);
        let bias = Matrix::row_vector(&[0.0, -100.0]);
        let w1 = Matrix::from_rows(&[[1.0], [1.0]]);
        let mut host = FrozenHost::from_layers(vec![
            (w0, bias, Activation::Relu),
            (w1, Matrix::zeros(1, 1), Activation::Identity),
        ])
        .unwrap();
        let mut ad = Adapter::init(AdapterConfig::lora(1, 2, 1, 1.0, 0)).unwrap();
        ad.perturb(0.1, &mut crate::rng::stream(0, "p", 0));
        host.attach(0, ad).unwrap();
        let (_, trace) = host.forward(&Matrix::from_rows(&[[1.0]]), &mut OpCounter::new()).unwrap();
        let g = host.backward(&trace, &Matrix::from_rows(&[[1.0]]), &mut OpCounter::new()).unwrap();
        let db = &g.adapters[0].1[1].1;
        assert_eq!(db.get(0, 1), 0.0);
        assert_ne!(db.get(0, 0), 0.0);
    }

    #[test]
    fn frozen_weights_report_zero_gradient_in_grad_check() {
        let mut host = FrozenHost::build(&[4, 5, 3], 6).unwrap();
        for (l, (d_in, d_out)) in [(4, 5), (5, 3)].into_iter().enumerate() {
            let mut a = Adapter::init(AdapterConfig::of_kind(AdapterKind::TeamLora, d_in, d_out, 2, 2, 2.0, l as u64)).unwrap();
            a.perturb(0.4, &mut crate::rng::stream(6, "p", l as u64));
            host.attach(l, a).unwrap();
        }
        let mut net = HostNetwork::new(host);
        let report = crate::diffkit::grad_check(&mut net, &x(6, 4, 6), 1e-5).unwrap();
        assert!(report.pass, "{report:?}");
        for p in report.params.iter().filter(|p| !p.trainable) {
            assert_eq!(p.max_abs_grad, 0.0);
        }
    }
}

//! Closed-form backward passes checked against central finite differences.
//!
//! A [`DiffLayer`] caches its forward intermediates and returns analytic
//! gradients for its input and named parameters. [`grad_check`] reduces the
//! layer output to a scalar with a fixed random projection `L = ⟨G, f(x)⟩`,
//! so the analytic gradients are just `backward(G)`, and compares them entry by
//! entry against `finite_difference_grad` on the same scalar.

use serde::{Deserialize, Serialize};

use crate::adapters::{Adapter, AdapterCache, AdapterConfig, ForwardCounters, RouterKind};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, OpCounter};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-5;

/// Gradients returned by [`DiffLayer::backward`].
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub input: Matrix,
    /// Only trainable parameters appear here.
    pub params: Vec<(String, Matrix)>,
}

pub struct ParamView<'a> {
    pub name: String,
    pub value: &'a Matrix,
    pub trainable: bool,
}

pub trait DiffLayer {
    fn forward(&mut self, x: &Matrix) -> Result<Matrix>;

    /// Must follow a [`DiffLayer::forward`] on the input being differentiated.
    fn backward(&mut self, grad_out: &Matrix) -> Result<LayerGrads>;

    fn params(&self) -> Vec<ParamView<'_>>;

    fn param_mut(&mut self, name: &str) -> Option<&mut Matrix>;
}

/// Central differences `(f(θ+ε) − f(θ−ε)) / 2ε` for every scalar entry of
/// every parameter. `names` label the parameters in error messages.
pub fn finite_difference_grad<F>(mut loss: F, params: &[Matrix], names: &[String], eps: f64) -> Result<Vec<Matrix>>
where
    F: FnMut(&[Matrix]) -> f64,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::InvalidConfig(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut work = params.to_vec();
    let mut grads = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let (rows, cols) = params[p].shape();
        let mut g = Matrix::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                let orig = params[p].get(r, c);
                work[p].set(r, c, orig + eps);
                let plus = loss(&work);
                work[p].set(r, c, orig - eps);
                let minus = loss(&work);
                work[p].set(r, c, orig);
                if !plus.is_finite() || !minus.is_finite() {
                    let param = names.get(p).cloned().unwrap_or_else(|| format!("param{p}"));
                    return Err(Error::NonFiniteLoss { param, row: r, col: c });
                }
                g.set(r, c, (plus - minus) / (2.0 * eps));
            }
        }
        grads.push(g);
    }
    Ok(grads)
}

/// `‖a − b‖∞ / max(‖b‖∞, 1e-8)`.
pub fn relative_error(analytic: &Matrix, numeric: &Matrix) -> Result<f64> {
    Ok(analytic.max_abs_diff(numeric)? / numeric.max_abs().max(1e-8))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCheck {
    pub name: String,
    pub trainable: bool,
    /// `None` for frozen parameters, which are not perturbed.
    pub relative_error: Option<f64>,
    /// Largest reported analytic gradient entry; exactly zero when frozen.
    pub max_abs_grad: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub input_relative_error: f64,
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Check `layer`'s analytic gradients at `input` with `ε = 1e-5`.
pub fn grad_check(layer: &mut dyn DiffLayer, input: &Matrix, tol: f64) -> Result<GradCheckReport> {
    grad_check_with(layer, input, DEFAULT_EPS, tol, 0)
}

pub fn grad_check_with(
    layer: &mut dyn DiffLayer,
    input: &Matrix,
    eps: f64,
    tol: f64,
    projection_seed: u64,
) -> Result<GradCheckReport> {
    let out = layer.forward(input)?;
    let projection = Matrix::randn(out.rows(), out.cols(), 1.0, &mut crate::rng::stream(projection_seed, "gradcheck", 0));
    let analytic = layer.backward(&projection)?;

    let project = |m: &Matrix| -> f64 { m.as_slice().iter().zip(projection.as_slice()).map(|(a, b)| a * b).sum() };

    // Input gradient.
    let numeric_input = {
        let names = ["input".to_string()];
        finite_difference_grad(
            |p| layer.forward(&p[0]).map_or(f64::NAN, |o| project(&o)),
            std::slice::from_ref(input),
            &names,
            eps,
        )?
        .remove(0)
    };
    let input_relative_error = relative_error(&analytic.input, &numeric_input)?;

    let views: Vec<(String, Matrix, bool)> =
        layer.params().into_iter().map(|v| (v.name, v.value.clone(), v.trainable)).collect();
    let mut params = Vec::with_capacity(views.len());
    let mut max_rel = input_relative_error;
    for (name, value, trainable) in views {
        let reported = analytic.params.iter().find(|(n, _)| *n == name).map(|(_, g)| g);
        if !trainable {
            params.push(ParamCheck {
                max_abs_grad: reported.map_or(0.0, Matrix::max_abs),
                name,
                trainable,
                relative_error: None,
            });
            continue;
        }
        let grad = reported.ok_or_else(|| Error::Degenerate(format!("no gradient reported for {name}")))?;
        let names = [name.clone()];
        let numeric = finite_difference_grad(
            |p| {
                *layer.param_mut(&name).expect("parameter exists") = p[0].clone();
                layer.forward(input).map_or(f64::NAN, |o| project(&o))
            },
            std::slice::from_ref(&value),
            &names,
            eps,
        )?
        .remove(0);
        *layer.param_mut(&name).expect("parameter exists") = value;
        let rel = relative_error(grad, &numeric)?;
        max_rel = max_rel.max(rel);
        params.push(ParamCheck { max_abs_grad: grad.max_abs(), name, trainable, relative_error: Some(rel) });
    }
    // Leave the layer's cache consistent with the original input.
    layer.forward(input)?;
    Ok(GradCheckReport {
        params,
        input_relative_error,
        max_relative_error: max_rel,
        tolerance: tol,
        pass: max_rel <= tol,
    })
}

/// Twenty small configurations spanning LoRA, MoELoRA, TeamLoRA and the two
/// mixed ablation cells, with `k ∈ {1, 2, 4, 8}` and `r_B ∈ {1, 4, 8}`.
pub fn default_suite() -> Vec<AdapterConfig> {
    let (d_in, d_out, alpha) = (6, 5, 2.0);
    let mut out: Vec<AdapterConfig> = [1, 4, 8].iter().map(|&r| AdapterConfig::lora(d_in, d_out, r, alpha, 0)).collect();
    for (k, r) in [(1, 4), (2, 1), (2, 8), (4, 4), (8, 1), (8, 8)] {
        out.push(AdapterConfig::moelora(d_in, d_out, k, r, alpha, 0));
    }
    for (k, r) in [(1, 1), (1, 8), (2, 4), (2, 8), (4, 1), (4, 4), (4, 8), (8, 4)] {
        out.push(AdapterConfig::teamlora(d_in, d_out, k, r, alpha, 0));
    }
    out.push(AdapterConfig::moelora(d_in, d_out, 4, 4, alpha, 0).with_router(RouterKind::ShapleyInteraction));
    out.push(AdapterConfig::teamlora(d_in, d_out, 4, 4, alpha, 0).with_router(RouterKind::LinearSoftmax));
    out.push(AdapterConfig::teamlora(d_in, d_out, 2, 1, alpha, 0).with_router(RouterKind::LinearSoftmax));
    for (i, c) in out.iter_mut().enumerate() {
        c.seed = i as u64;
    }
    out
}

/// Grad-check one adapter at a perturbed point (`B = 0` would make most
/// gradients vanish) on a random `batch x d_in` input.
pub fn check_adapter(config: &AdapterConfig, batch: usize, tol: f64) -> Result<GradCheckReport> {
    let mut rng = crate::rng::stream(config.seed, "gradcheck-point", 0);
    let mut adapter = Adapter::init(config.clone())?;
    adapter.perturb(0.5, &mut rng);
    let x = Matrix::randn(batch, config.d_in, 1.0, &mut rng);
    grad_check_with(&mut AdapterLayer::new(adapter), &x, DEFAULT_EPS, tol, config.seed)
}

/// An [`Adapter`] wrapped as a [`DiffLayer`].
pub struct AdapterLayer {
    pub adapter: Adapter,
    cache: Option<AdapterCache>,
}

impl AdapterLayer {
    pub fn new(adapter: Adapter) -> Self {
        Self { adapter, cache: None }
    }
}

impl DiffLayer for AdapterLayer {
    fn forward(&mut self, x: &Matrix) -> Result<Matrix> {
        let (out, cache) = self.adapter.forward(x, &mut ForwardCounters::default())?;
        self.cache = Some(cache);
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Matrix) -> Result<LayerGrads> {
        let cache = self.cache.as_ref().ok_or(Error::BackwardBeforeForward)?;
        let (input, params) = self.adapter.backward(cache, grad_out, &mut OpCounter::new())?;
        Ok(LayerGrads { input, params })
    }

    fn params(&self) -> Vec<ParamView<'_>> {
        self.adapter
            .params()
            .into_iter()
            .map(|(name, value)| ParamView { name, value, trainable: true })
            .collect()
    }

    fn param_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.cache = None;
        self.adapter.params_mut().into_iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }
}

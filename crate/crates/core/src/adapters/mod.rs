//! LoRA, MoELoRA and TeamLoRA auxiliary modules.
//!
//! An [`Adapter`] is a low-rank branch (one `(A, B)` pair, `k` independent
//! pairs, or one shared `A` feeding `k` `B` plugins) plus an optional router.
//! The branch structure and the router are chosen independently, which is what
//! the ablation grid needs: MoELoRA is "symmetric experts + linear router",
//! TeamLoRA is "shared split + Shapley router", and the two off-diagonal cells
//! mix them.
//!
//! Each expert branch is scaled by `α/r_B`, so TeamLoRA with `k = 1` reduces to
//! LoRA with `α/r` exactly.

mod branch;
mod router;

pub use branch::{collaboration_forward, combine_experts, lora_forward};
pub use router::{competition_weights, LinearRouter, Router, RouterCache, RouterOutput, ShapleyRouter};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{concat_columns, matmul, Matrix, OpCounter};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterKind {
    #[serde(rename = "lora")]
    Lora,
    #[serde(rename = "moelora")]
    MoELora,
    #[serde(rename = "teamlora")]
    TeamLora,
}

impl AdapterKind {
    pub fn name(self) -> &'static str {
        match self {
            AdapterKind::Lora => "LoRA",
            AdapterKind::MoELora => "MoELoRA",
            AdapterKind::TeamLora => "TeamLoRA",
        }
    }

    pub fn default_router(self) -> Option<RouterKind> {
        match self {
            AdapterKind::Lora => None,
            AdapterKind::MoELora => Some(RouterKind::LinearSoftmax),
            AdapterKind::TeamLora => Some(RouterKind::ShapleyInteraction),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RouterKind {
    #[serde(rename = "linear-softmax")]
    LinearSoftmax,
    #[serde(rename = "shapley-interaction")]
    ShapleyInteraction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    pub kind: AdapterKind,
    pub d_in: usize,
    pub d_out: usize,
    /// Rank of each expert branch (`r` for LoRA and MoELoRA).
    pub r_b: usize,
    pub k: usize,
    pub alpha: f64,
    pub router: Option<RouterKind>,
    /// Hidden width of the Shapley MLP.
    pub s_hidden: usize,
    /// Width of the shared `A`, if given explicitly; must equal `k·r_b`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_a: Option<usize>,
    pub seed: u64,
}

impl AdapterConfig {
    pub fn lora(d_in: usize, d_out: usize, r: usize, alpha: f64, seed: u64) -> Self {
        Self { kind: AdapterKind::Lora, d_in, d_out, r_b: r, k: 1, alpha, router: None, s_hidden: 2, r_a: None, seed }
    }

    pub fn moelora(d_in: usize, d_out: usize, k: usize, r: usize, alpha: f64, seed: u64) -> Self {
        Self {
            kind: AdapterKind::MoELora,
            d_in,
            d_out,
            r_b: r,
            k,
            alpha,
            router: AdapterKind::MoELora.default_router(),
            s_hidden: 2 * k,
            r_a: None,
            seed,
        }
    }

    pub fn teamlora(d_in: usize, d_out: usize, k: usize, r_b: usize, alpha: f64, seed: u64) -> Self {
        Self {
            kind: AdapterKind::TeamLora,
            d_in,
            d_out,
            r_b,
            k,
            alpha,
            router: AdapterKind::TeamLora.default_router(),
            s_hidden: 2 * k,
            r_a: None,
            seed,
        }
    }

    /// Build a config of the given kind with its default router.
    pub fn of_kind(kind: AdapterKind, d_in: usize, d_out: usize, k: usize, r_b: usize, alpha: f64, seed: u64) -> Self {
        match kind {
            AdapterKind::Lora => Self::lora(d_in, d_out, r_b, alpha, seed),
            AdapterKind::MoELora => Self::moelora(d_in, d_out, k, r_b, alpha, seed),
            AdapterKind::TeamLora => Self::teamlora(d_in, d_out, k, r_b, alpha, seed),
        }
    }

    pub fn with_router(mut self, router: RouterKind) -> Self {
        self.router = Some(router);
        self
    }

    pub fn r_a(&self) -> usize {
        self.k * self.r_b
    }

    pub fn label(&self) -> String {
        match self.kind {
            AdapterKind::Lora => format!("LoRA(r={})", self.r_b),
            _ => format!("{}(k={},r={})", self.kind.name(), self.k, self.r_b),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.d_in == 0 || self.d_out == 0 {
            return bad("d_in and d_out must be positive".into());
        }
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if self.r_b == 0 {
            return bad("r_b must be at least 1".into());
        }
        if !self.alpha.is_finite() {
            return bad("alpha must be finite".into());
        }
        if let Some(r_a) = self.r_a {
            if r_a != self.r_a() {
                return bad(format!("r_a = {r_a} but k·r_b = {}", self.r_a()));
            }
        }
        match (self.kind, self.router) {
            (AdapterKind::Lora, None) if self.k == 1 => Ok(()),
            (AdapterKind::Lora, _) => bad("LoRA requires k = 1 and no router".into()),
            (_, None) => bad(format!("{} requires a router", self.kind.name())),
            (_, Some(RouterKind::ShapleyInteraction)) if self.s_hidden == 0 => {
                bad("s_hidden must be at least 1".into())
            }
            _ => Ok(()),
        }
    }
}

/// The low-rank update.
#[derive(Debug, Clone, PartialEq)]
pub enum Branch {
    /// One `(A, B)` pair.
    Single { a: Matrix, b: Matrix },
    /// `k` independent `(A_i, B_i)` pairs.
    Symmetric { a: Vec<Matrix>, b: Vec<Matrix> },
    /// One shared `A` (`d_in x k·r_B`) whose output is split across `k` `B_i`.
    Shared { a: Matrix, b: Vec<Matrix> },
}

/// How expert weights are formed from the router output.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub enum Participation {
    /// Use `ω` as produced by the router.
    #[default]
    Routed,
    /// Zero every expert except `expert`.
    Solo { expert: usize, renormalize: bool },
    /// Per token, keep only the expert with the largest `ω`.
    Top1 { renormalize: bool },
    /// Ignore the router and use these weights for every token.
    Fixed(Vec<f64>),
}

impl Participation {
    fn apply(&self, omega: &Matrix) -> Result<Matrix> {
        let k = omega.cols();
        let keep_one = |pick: &dyn Fn(&[f64]) -> usize, renormalize: bool| {
            let mut w = Matrix::zeros(omega.rows(), k);
            for n in 0..omega.rows() {
                let row = omega.row(n);
                let i = pick(row);
                let v = row[i];
                // Renormalising a single kept weight makes it exactly 1.
                w.set(n, i, if renormalize && v != 0.0 { 1.0 } else { v });
            }
            w
        };
        match self {
            Participation::Routed => Ok(omega.clone()),
            Participation::Solo { expert, renormalize } => {
                if *expert >= k {
                    return Err(Error::InvalidConfig(format!("expert {expert} out of range for k = {k}")));
                }
                Ok(keep_one(&|_| *expert, *renormalize))
            }
            Participation::Top1 { renormalize } => Ok(keep_one(&argmax, *renormalize)),
            Participation::Fixed(weights) => {
                if weights.len() != k {
                    return Err(Error::InvalidConfig(format!(
                        "fixed participation has {} weights for k = {k}",
                        weights.len()
                    )));
                }
                let mut w = Matrix::zeros(omega.rows(), k);
                for n in 0..omega.rows() {
                    w.row_mut(n).copy_from_slice(weights);
                }
                Ok(w)
            }
        }
    }
}

/// Index of the first maximum.
pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Matmul counts split by where they are issued.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForwardCounters {
    pub branch: OpCounter,
    pub router: OpCounter,
}

impl ForwardCounters {
    pub fn total(&self) -> OpCounter {
        let mut t = self.branch;
        t.merge(&self.router);
        t
    }
}

/// Forward intermediates needed by [`Adapter::backward`].
#[derive(Debug, Clone)]
pub struct AdapterCache {
    x: Matrix,
    /// `x·A_i` (symmetric), the split segments of `x·A` (shared), or `x·A` (single).
    inner: Vec<Matrix>,
    /// Scaled expert outputs `h_i`.
    parts: Vec<Matrix>,
    weights: Option<Matrix>,
    router: Option<(RouterOutput, RouterCache)>,
    participation: Participation,
}

impl AdapterCache {
    pub fn router_output(&self) -> Option<&RouterOutput> {
        self.router.as_ref().map(|(o, _)| o)
    }

    /// Effective per-token expert weights after any participation override.
    pub fn weights(&self) -> Option<&Matrix> {
        self.weights.as_ref()
    }

    pub fn expert_outputs(&self) -> &[Matrix] {
        &self.parts
    }
}

pub type NamedGrads = Vec<(String, Matrix)>;

#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    config: AdapterConfig,
    pub branch: Branch,
    pub router: Option<Router>,
}

/// Parameter and router sizes for a configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub adapter_params: u64,
    pub router_params: u64,
    pub total: u64,
}

/// Matmuls issued by one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatmulCount {
    pub branch_matmuls: u64,
    pub router_matmuls: u64,
}

/// Trainable parameter counts. `A`/`B` carry no bias; the Shapley MLP does.
pub fn param_count(config: &AdapterConfig) -> ParamCount {
    let (d_in, d_out, k, r) = (config.d_in as u64, config.d_out as u64, config.k as u64, config.r_b as u64);
    let adapter_params = k * r * (d_in + d_out);
    let router_params = match config.router {
        None => 0,
        Some(RouterKind::LinearSoftmax) => d_in * k,
        Some(RouterKind::ShapleyInteraction) => {
            let h = config.s_hidden as u64;
            d_in * h + h + h * k + k + k * k
        }
    };
    ParamCount { adapter_params, router_params, total: adapter_params + router_params }
}

/// Predicted matmuls per forward: LoRA 2, symmetric experts `2k`, shared split
/// `k + 1`; linear router 1, Shapley router 3 (two MLP layers and the `M` product).
pub fn matmul_count(config: &AdapterConfig) -> MatmulCount {
    let k = config.k as u64;
    let branch_matmuls = match config.kind {
        AdapterKind::Lora => 2,
        AdapterKind::MoELora => 2 * k,
        AdapterKind::TeamLora => k + 1,
    };
    let router_matmuls = match config.router {
        None => 0,
        Some(RouterKind::LinearSoftmax) => 1,
        Some(RouterKind::ShapleyInteraction) => 3,
    };
    MatmulCount { branch_matmuls, router_matmuls }
}

impl Adapter {
    /// `A` entries ~ N(0, 1/d_in), every `B` zero, routers per their own init.
    /// Deterministic in `config.seed`.
    pub fn init(config: AdapterConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = crate::rng::stream(config.seed, "adapter", 0);
        let a_std = (1.0 / config.d_in as f64).sqrt();
        let (d_in, d_out, k, r) = (config.d_in, config.d_out, config.k, config.r_b);
        let branch = match config.kind {
            AdapterKind::Lora => Branch::Single { a: Matrix::randn(d_in, r, a_std, &mut rng), b: Matrix::zeros(r, d_out) },
            AdapterKind::MoELora => Branch::Symmetric {
                a: (0..k).map(|_| Matrix::randn(d_in, r, a_std, &mut rng)).collect(),
                b: vec![Matrix::zeros(r, d_out); k],
            },
            AdapterKind::TeamLora => Branch::Shared {
                a: Matrix::randn(d_in, k * r, a_std, &mut rng),
                b: vec![Matrix::zeros(r, d_out); k],
            },
        };
        let router = config.router.map(|kind| match kind {
            RouterKind::LinearSoftmax => Router::LinearSoftmax(LinearRouter::init(d_in, k, &mut rng)),
            RouterKind::ShapleyInteraction => {
                Router::ShapleyInteraction(ShapleyRouter::init(d_in, config.s_hidden, k, &mut rng))
            }
        });
        Ok(Self { config, branch, router })
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.config
    }

    pub fn experts(&self) -> usize {
        self.config.k
    }

    /// Adds `N(0, std^2)` noise to every trainable parameter. Used to move
    /// away from the zero-`B` initialisation before gradient checks.
    pub fn perturb<R: Rng + ?Sized>(&mut self, std: f64, rng: &mut R) {
        for (_, p) in self.params_mut() {
            let noise = Matrix::randn(p.rows(), p.cols(), std, rng);
            p.add_assign(&noise).expect("same shape");
        }
    }

    /// Parameters in a fixed order: branch first, then router.
    pub fn params(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<(String, &Matrix)> = match &self.branch {
            Branch::Single { a, b } => vec![("A".into(), a), ("B".into(), b)],
            Branch::Symmetric { a, b } => a
                .iter()
                .zip(b)
                .enumerate()
                .flat_map(|(i, (ai, bi))| [(format!("A.{i}"), ai), (format!("B.{i}"), bi)])
                .collect(),
            Branch::Shared { a, b } => std::iter::once(("A".to_string(), a))
                .chain(b.iter().enumerate().map(|(i, bi)| (format!("B.{i}"), bi)))
                .collect(),
        };
        if let Some(r) = &self.router {
            out.extend(r.params().into_iter().map(|(n, m)| (n.to_string(), m)));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out: Vec<(String, &mut Matrix)> = match &mut self.branch {
            Branch::Single { a, b } => vec![("A".into(), a), ("B".into(), b)],
            Branch::Symmetric { a, b } => a
                .iter_mut()
                .zip(b.iter_mut())
                .enumerate()
                .flat_map(|(i, (ai, bi))| [(format!("A.{i}"), ai), (format!("B.{i}"), bi)])
                .collect(),
            Branch::Shared { a, b } => std::iter::once(("A".to_string(), a))
                .chain(b.iter_mut().enumerate().map(|(i, bi)| (format!("B.{i}"), bi)))
                .collect(),
        };
        if let Some(r) = &mut self.router {
            out.extend(r.params_mut().into_iter().map(|(n, m)| (n.to_string(), m)));
        }
        out
    }

    pub fn param_count(&self) -> ParamCount {
        param_count(&self.config)
    }

    /// Adapter branch output for `x` (`N x d_in` → `N x d_out`).
    pub fn forward(&self, x: &Matrix, counters: &mut ForwardCounters) -> Result<(Matrix, AdapterCache)> {
        self.forward_with(x, &Participation::Routed, counters)
    }

    pub fn forward_with(
        &self,
        x: &Matrix,
        participation: &Participation,
        counters: &mut ForwardCounters,
    ) -> Result<(Matrix, AdapterCache)> {
        if x.cols() != self.config.d_in {
            return Err(Error::shape("adapter forward", x.shape(), (self.config.d_in, self.config.d_out)));
        }
        let alpha = self.config.alpha;
        let (inner, parts) = match &self.branch {
            Branch::Single { a, b } => {
                let (u, y) = branch::lora_forward_cached(a, b, alpha, x, &mut counters.branch)?;
                (vec![u], vec![y])
            }
            Branch::Symmetric { a, b } => a
                .iter()
                .zip(b)
                .map(|(ai, bi)| branch::lora_forward_cached(ai, bi, alpha, x, &mut counters.branch))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .unzip(),
            Branch::Shared { a, b } => branch::collaboration_forward_cached(a, b, alpha, x, &mut counters.branch)?,
        };

        let Some(router) = &self.router else {
            let out = parts[0].clone();
            return Ok((
                out,
                AdapterCache { x: x.clone(), inner, parts, weights: None, router: None, participation: participation.clone() },
            ));
        };
        let (routed, cache) = router.forward(x, &mut counters.router)?;
        let weights = participation.apply(&routed.omega)?;
        let out = combine_experts(&weights, &parts)?;
        Ok((
            out,
            AdapterCache {
                x: x.clone(),
                inner,
                parts,
                weights: Some(weights),
                router: Some((routed, cache)),
                participation: participation.clone(),
            },
        ))
    }

    /// Gradients of `⟨grad_out, forward(x)⟩` with respect to `x` and every
    /// parameter, in [`Adapter::params`] order.
    pub fn backward(&self, cache: &AdapterCache, grad_out: &Matrix, counter: &mut OpCounter) -> Result<(Matrix, NamedGrads)> {
        if cache.participation != Participation::Routed {
            return Err(Error::InvalidConfig("backward requires routed participation".into()));
        }
        let n = cache.x.rows();
        if grad_out.shape() != (n, self.config.d_out) {
            return Err(Error::shape("adapter backward", grad_out.shape(), (n, self.config.d_out)));
        }
        let scale = self.config.alpha / self.config.r_b as f64;
        let x_t = cache.x.transpose();
        let names: Vec<String> = self.params().into_iter().map(|(n, _)| n).collect();

        // Upstream gradient per expert output, and the gradient w.r.t. the weights.
        let k = cache.parts.len();
        let (expert_grads, d_omega) = match &cache.weights {
            None => (vec![grad_out.clone()], None),
            Some(w) => {
                let mut d_omega = Matrix::zeros(n, k);
                let mut eg = Vec::with_capacity(k);
                for (i, part) in cache.parts.iter().enumerate() {
                    let mut dh = Matrix::zeros(n, self.config.d_out);
                    for t in 0..n {
                        let g = grad_out.row(t);
                        d_omega.set(t, i, part.row(t).iter().zip(g).map(|(a, b)| a * b).sum());
                        let wi = w.get(t, i);
                        for (d, gv) in dh.row_mut(t).iter_mut().zip(g) {
                            *d = wi * gv;
                        }
                    }
                    eg.push(dh);
                }
                (eg, Some(d_omega))
            }
        };

        let mut grads = Vec::with_capacity(names.len());
        let mut dx;
        match &self.branch {
            Branch::Single { a, b } => {
                let dy = expert_grads[0].scale(scale);
                let db = matmul(&cache.inner[0].transpose(), &dy, counter)?;
                let du = matmul(&dy, &b.transpose(), counter)?;
                let da = matmul(&x_t, &du, counter)?;
                dx = matmul(&du, &a.transpose(), counter)?;
                grads.push(da);
                grads.push(db);
            }
            Branch::Symmetric { a, b } => {
                dx = Matrix::zeros(n, self.config.d_in);
                for i in 0..k {
                    let dy = expert_grads[i].scale(scale);
                    let db = matmul(&cache.inner[i].transpose(), &dy, counter)?;
                    let du = matmul(&dy, &b[i].transpose(), counter)?;
                    let da = matmul(&x_t, &du, counter)?;
                    dx.add_assign(&matmul(&du, &a[i].transpose(), counter)?)?;
                    grads.push(da);
                    grads.push(db);
                }
            }
            Branch::Shared { a, b } => {
                let mut dbs = Vec::with_capacity(k);
                let mut dz_parts = Vec::with_capacity(k);
                for i in 0..k {
                    let dy = expert_grads[i].scale(scale);
                    dbs.push(matmul(&cache.inner[i].transpose(), &dy, counter)?);
                    dz_parts.push(matmul(&dy, &b[i].transpose(), counter)?);
                }
                let dz = concat_columns(&dz_parts)?;
                grads.push(matmul(&x_t, &dz, counter)?);
                dx = matmul(&dz, &a.transpose(), counter)?;
                grads.extend(dbs);
            }
        }

        if let (Some(router), Some((out, rcache)), Some(d_omega)) = (&self.router, &cache.router, d_omega) {
            let (dx_router, router_grads) = router.backward(&cache.x, out, rcache, &d_omega, counter)?;
            dx.add_assign(&dx_router)?;
            grads.extend(router_grads);
        }
        Ok((dx, names.into_iter().zip(grads).collect()))
    }

    /// Make every expert a copy of expert `source`, including its router
    /// column, so that all experts are interchangeable.
    pub fn duplicate_expert(&mut self, source: usize) -> Result<()> {
        let k = self.config.k;
        if source >= k {
            return Err(Error::InvalidConfig(format!("expert {source} out of range for k = {k}")));
        }
        match &mut self.branch {
            Branch::Single { .. } => {}
            Branch::Symmetric { a, b } => {
                let (sa, sb) = (a[source].clone(), b[source].clone());
                a.iter_mut().for_each(|m| *m = sa.clone());
                b.iter_mut().for_each(|m| *m = sb.clone());
            }
            Branch::Shared { a, b } => {
                let r = self.config.r_b;
                for row in 0..a.rows() {
                    let seg: Vec<f64> = a.row(row)[source * r..(source + 1) * r].to_vec();
                    for i in 0..k {
                        a.row_mut(row)[i * r..(i + 1) * r].copy_from_slice(&seg);
                    }
                }
                let sb = b[source].clone();
                b.iter_mut().for_each(|m| *m = sb.clone());
            }
        }
        let copy_col = |m: &mut Matrix| {
            for row in 0..m.rows() {
                let v = m.get(row, source);
                m.row_mut(row).iter_mut().for_each(|x| *x = v);
            }
        };
        match &mut self.router {
            None => {}
            Some(Router::LinearSoftmax(r)) => copy_col(&mut r.w),
            Some(Router::ShapleyInteraction(r)) => {
                copy_col(&mut r.w2);
                copy_col(&mut r.b2);
                let (diag, off) = (r.m.get(source, source), if k > 1 { r.m.get(source, (source + 1) % k) } else { 0.0 });
                for i in 0..k {
                    for j in 0..k {
                        r.m.set(i, j, if i == j { diag } else { off });
                    }
                }
            }
        }
        Ok(())
    }

    /// Zero the `B` matrix of one expert.
    pub fn zero_expert(&mut self, expert: usize) -> Result<()> {
        match &mut self.branch {
            Branch::Single { b, .. } if expert == 0 => *b = Matrix::zeros(b.rows(), b.cols()),
            Branch::Symmetric { b, .. } | Branch::Shared { b, .. } if expert < b.len() => {
                b[expert] = Matrix::zeros(b[expert].rows(), b[expert].cols())
            }
            _ => return Err(Error::InvalidConfig(format!("expert {expert} out of range"))),
        }
        Ok(())
    }

    /// Overwrite parameters from `(name, matrix)` pairs after checking that
    /// every name and shape matches. Nothing is written if any check fails.
    pub fn load_params(&mut self, values: &[(String, Matrix)]) -> Result<()> {
        let current = self.params();
        if current.len() != values.len() {
            return Err(Error::CheckpointMismatch(format!(
                "expected {} tensors, found {}",
                current.len(),
                values.len()
            )));
        }
        for ((name, cur), (vname, v)) in current.iter().zip(values) {
            if name != vname || cur.shape() != v.shape() {
                return Err(Error::CheckpointMismatch(format!(
                    "{name} {}x{} vs {vname} {}x{}",
                    cur.rows(),
                    cur.cols(),
                    v.rows(),
                    v.cols()
                )));
            }
        }
        for ((_, dst), (_, src)) in self.params_mut().into_iter().zip(values) {
            *dst = src.clone();
        }
        Ok(())
    }
}

//! Fixtures shared by the criterion benches.

use teamlora::{Adapter, AdapterConfig, Matrix};

/// A freshly initialized adapter with perturbed weights (so `B ≠ 0`) and a
/// random input batch.
pub fn fixture(config: AdapterConfig, batch: usize, seed: u64) -> (Adapter, Matrix) {
    let mut rng = teamlora::rng::stream(seed, "bench-fixture", 0);
    let d_in = config.d_in;
    let mut adapter = Adapter::init(config).expect("valid bench config");
    adapter.perturb(0.1, &mut rng);
    (adapter, Matrix::randn(batch, d_in, 1.0, &mut rng))
}

/// LoRA followed by MoELoRA and TeamLoRA for each `k`, all square of width `d`.
pub fn kinds(d: usize, ks: &[usize], r_b: usize) -> Vec<AdapterConfig> {
    let mut out = vec![AdapterConfig::lora(d, d, r_b, 2.0 * r_b as f64, 0)];
    for &k in ks {
        out.push(AdapterConfig::moelora(d, d, k, r_b, 2.0 * r_b as f64, 0));
        out.push(AdapterConfig::teamlora(d, d, k, r_b, 2.0 * r_b as f64, 0));
    }
    out
}

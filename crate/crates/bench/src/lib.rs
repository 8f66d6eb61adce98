//! Fixtures shared by the benchmarks.

use cluda_core::data::{synth_generate, SynthConfig};
use cluda_core::experiment::{desk_config, DomainSplits};
use cluda_core::pipeline::TrainConfig;
use cluda_core::Tensor;

/// Deterministic pseudo-random tensor (no RNG dependency needed here).
pub fn filled(shape: &[usize], salt: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n as u64)
        .map(|i| {
            let h = (i + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt;
            (h >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("sized from shape")
}

/// A small slice of the synthetic benchmark and its training config.
pub fn desk_problem() -> (DomainSplits, TrainConfig) {
    let synth = SynthConfig {
        train_per_domain: 256,
        val_per_domain: 64,
        test_per_domain: 64,
        ..SynthConfig::default()
    };
    let data = synth_generate(&synth).expect("valid default config");
    let splits = DomainSplits::from_synth(&data, synth.history).expect("preprocessable");
    (splits, desk_config(synth.channels, synth.history))
}

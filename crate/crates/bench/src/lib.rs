//! Benchmarks live in `benches/`; this library only provides shared inputs.

use dccrn::{Dccrn, ModelConfig, Result};

/// A calibrated model of `config` with deterministic weights.
pub fn calibrated(config: &ModelConfig) -> Result<Dccrn<f32>> {
    let mut m = Dccrn::build(config, 1)?;
    m.calibrate(&[&test_signal(16_000)])?;
    Ok(m)
}

/// A deterministic two-tone signal with a little broadband content.
pub fn test_signal(len: usize) -> Vec<f32> {
    (0..len)
        .map(|i| {
            let t = i as f32 / 16_000.0;
            0.1 * (2.0 * std::f32::consts::PI * 220.0 * t).sin()
                + 0.05 * (2.0 * std::f32::consts::PI * 1375.0 * t).sin()
                + 0.01 * (((i * 7919) % 101) as f32 / 50.0 - 1.0)
        })
        .collect()
}

//! Workloads shared by the kernel benchmarks, sized like one training batch of
//! the desk-scale benchmark (batch 128, 16 channels, 14x14 digits).

use symclone_core::rng::sample_standard_normal;
use symclone_core::{SeededRng, Tensor};

pub const BATCH: usize = 128;
pub const CHANNELS: usize = 16;
pub const GRID: usize = 14;

pub fn normal(shape: &[usize], seed: u64) -> Tensor<f32> {
    sample_standard_normal(&mut SeededRng::new(seed), shape).expect("non-empty shape")
}

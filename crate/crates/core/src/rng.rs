//! Seeded random streams.
//!
//! Each consumer draws from its own named sub-stream of the run seed so that
//! adding draws in one component never shifts another component's numbers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::{Mat, Real};

pub type StreamRng = ChaCha8Rng;

fn fnv1a(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// The sub-stream `name` of `seed`.
pub fn stream(seed: u64, name: &str) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name));
    rng
}

pub fn normal_mat<T: Real>(rng: &mut impl Rng, rows: usize, cols: usize) -> Mat<T> {
    let data = (0..rows * cols).map(|_| T::of(rng.sample::<f64, _>(StandardNormal))).collect();
    Mat::from_vec(rows, cols, data).expect("normal matrix")
}

pub fn uniform_mat<T: Real>(rng: &mut impl Rng, rows: usize, cols: usize, bound: f64) -> Mat<T> {
    let data = (0..rows * cols).map(|_| T::of(rng.random_range(-bound..=bound))).collect();
    Mat::from_vec(rows, cols, data).expect("uniform matrix")
}

//! Dense numeric storage, seeded random streams and the `PFT1` tensor format.

mod linalg;
mod pft;
mod real;
mod rng;
mod tensor;

pub use linalg::{add_bias, add_in_place, matmul, matmul_at_acc, matmul_bt, transpose};
pub use pft::{load_tensor, read_tensor, save_tensor, write_tensor, MAGIC};
pub use real::Real;
pub use rng::SeededRng;
pub use tensor::DenseTensor;

/// Standard normal draws in a fresh tensor of the given shape.
pub fn gauss_sample(rng: &mut SeededRng, shape: &[usize]) -> DenseTensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gauss()).collect();
    DenseTensor::from_parts(shape.to_vec(), data)
}

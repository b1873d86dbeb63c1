//! Input generation shared by the matmul benchmarks.

use bipoint::binlayer::sign;
use bipoint::{pack, PackedBitMatrix, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A pair of random ±1 matrices, `rows × k` and `cols × k`, in both representations.
pub struct SignPair {
    pub a: Tensor<f32>,
    pub b: Tensor<f32>,
    pub a_packed: PackedBitMatrix,
    pub b_packed: PackedBitMatrix,
}

pub fn sign_pair(rows: usize, cols: usize, k: usize, seed: u64) -> SignPair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = Tensor::<f32>::normal(&[rows, k], 0.0, 1.0, &mut rng).map(sign);
    let b = Tensor::<f32>::normal(&[cols, k], 0.0, 1.0, &mut rng).map(sign);
    SignPair {
        a_packed: pack(&a),
        b_packed: pack(&b),
        a,
        b,
    }
}

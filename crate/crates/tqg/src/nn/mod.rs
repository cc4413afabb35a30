//! Minimal deterministic differentiable-layer toolkit.
//!
//! Everything trainable in this crate is expressed as a computation on a
//! [`Tape`]: a flat record of 2-D tensor ops with exact reverse-mode
//! gradients. The op set is intentionally small — dense affine maps, the
//! symmetric-normalized graph convolution, GraphNorm, gated activations,
//! NT-Xent and masked MAE losses — which keeps every backward pass auditable
//! against central finite differences.
//!
//! All math is 64-bit and single-threaded per tape; the same inputs produce
//! bitwise-identical outputs.

mod checkpoint;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use params::{derive_rng, glorot_uniform, ParamStore};
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor2;

use crate::Result;

/// Variance floor used inside GraphNorm so single-node graphs stay finite.
pub const GRAPHNORM_EPS: f64 = 1e-5;

/// Symmetric-normalized adjacency with self-loops: `D̃^{-1/2} (A + I) D̃^{-1/2}`.
///
/// `adj` is a row-major N×N boolean matrix. Isolated nodes end up with a
/// plain self-loop entry of 1.
pub fn normalize_adjacency(adj: &[bool], n: usize) -> Tensor2 {
    assert_eq!(adj.len(), n * n, "adjacency must be n*n");
    let mut a = Tensor2::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if adj[i * n + j] {
                a[(i, j)] = 1.0;
            }
        }
        a[(i, i)] = 1.0; // self-loop
    }
    let mut inv_sqrt_deg = vec![0.0; n];
    for i in 0..n {
        let d: f64 = (0..n).map(|j| a[(i, j)]).sum();
        inv_sqrt_deg[i] = 1.0 / d.sqrt();
    }
    let mut s = Tensor2::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            s[(i, j)] = inv_sqrt_deg[i] * a[(i, j)] * inv_sqrt_deg[j];
        }
    }
    s
}

/// NT-Xent (normalized-temperature cross-entropy) over a batch of positive
/// pairs. `z1` and `z2` are B×d un-normalized embeddings, row i of each being
/// one positive pair. Returns the scalar loss variable on the tape.
///
/// Positives are the paired rows; negatives are all other 2B−2 rows; the loss
/// is averaged over the 2B anchors.
pub fn ntxent_loss(tape: &mut Tape, z1: Var, z2: Var, temperature: f64) -> Result<Var> {
    let b = tape.value(z1).rows();
    if b < 2 || tape.value(z2).rows() != b {
        return Err(crate::Error::DegenerateBatch(b.min(tape.value(z2).rows())));
    }
    let z = tape.concat_rows(&[z1, z2]);
    let zn = tape.l2_normalize_rows(z);
    let sim = tape.matmul_nt(zn, zn);
    let logits = tape.affine_scalar(sim, 1.0 / temperature, 0.0);
    Ok(tape.ntxent_from_sim(logits))
}

#[cfg(test)]
mod tests;

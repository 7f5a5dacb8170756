//! Ready-made models assembled from blocks.
//!
//! Each model pairs a set of trainable operations with builders for the
//! block wiring around them. Blocks are consumed by the compiler and are
//! not `Clone`, so the builders construct a fresh block on every call;
//! all blocks built from one model share its operation handles and
//! therefore its parameters.

pub mod attention;
pub mod pipeline;
pub mod tree_lstm;
pub mod weave;

use rand::SeedableRng;

use crate::error::Result;
use crate::ops::OpHandle;
use crate::runtime::params::ParameterStore;

/// Creates a parameter store covering every parameter the given operations
/// declare: seeded Glorot draws for weights, zeros for biases. Parameters
/// already present (say, from a checkpoint) are kept.
pub fn init_params(ops: &[OpHandle], seed: u64) -> Result<ParameterStore> {
    let mut store = ParameterStore::new();
    init_params_into(&mut store, ops, seed)?;
    Ok(store)
}

/// Fills in any missing parameters for the given operations, leaving
/// existing tensors untouched.
pub fn init_params_into(store: &mut ParameterStore, ops: &[OpHandle], seed: u64) -> Result<()> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for op in ops {
        for spec in &op.params {
            store.ensure_init(spec, &mut rng)?;
        }
    }
    Ok(())
}

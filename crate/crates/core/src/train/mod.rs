//! Staged training: supervised hybrid-sequence learning, decoder and gate
//! distillation with verification refinement, and group-relative policy
//! optimization on full trajectories.

pub mod grpo;
pub mod pipeline;
pub mod stage1;
pub mod stage2;

use crate::data::splitmix64;
use crate::num::{ParamStore, Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

// Stream tags keep the rng draws of different stages unrelated even under
// the same run seed.
pub(crate) const TAG_STAGE0: u64 = 0xA0;
pub(crate) const TAG_STAGE1A: u64 = 0xA1;
pub(crate) const TAG_STAGE1B: u64 = 0xA2;
pub(crate) const TAG_STAGE2: u64 = 0xB0;
pub(crate) const TAG_VERIFY: u64 = 0xB1;
pub(crate) const TAG_REFINE: u64 = 0xB2;
pub(crate) const TAG_STAGE3: u64 = 0xC0;

pub(crate) fn derived_rng(seed: u64, tag: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(splitmix64(seed ^ tag) ^ salt))
}

/// Add `k * grads` into the accumulator, which is lazily shaped.
pub(crate) fn accumulate_grads<S: Scalar>(
    acc: &mut Vec<Option<Tensor<S>>>,
    grads: Vec<Option<Tensor<S>>>,
    k: S,
) {
    if acc.is_empty() {
        acc.resize(grads.len(), None);
    }
    assert_eq!(acc.len(), grads.len(), "gradient slot count changed mid-run");
    for (slot, g) in acc.iter_mut().zip(grads) {
        let Some(g) = g else { continue };
        match slot {
            Some(a) => {
                assert_eq!(a.shape(), g.shape(), "gradient shape changed mid-run");
                for (av, gv) in a.data_mut().iter_mut().zip(g.data()) {
                    *av += k * *gv;
                }
            }
            None => {
                let mut g = g;
                for v in g.data_mut() {
                    *v *= k;
                }
                *slot = Some(g);
            }
        }
    }
}

/// Panic if any parameter under the given prefixes received gradient mass.
/// Freezing in the optimizer is not enough; a leak here means the graph
/// wiring let a frozen module into the loss.
pub(crate) fn assert_no_grads_under<S: Scalar>(
    store: &ParamStore<S>,
    grads: &[Option<Tensor<S>>],
    prefixes: &[&str],
) {
    for (pid, p) in store.iter() {
        if !prefixes.iter().any(|pre| p.name.starts_with(pre)) {
            continue;
        }
        if let Some(g) = &grads[pid.0] {
            let leaked = g.data().iter().any(|v| *v != S::zero());
            assert!(!leaked, "gradient leaked into frozen parameter {}", p.name);
        }
    }
}

/// Snapshot of raw parameter bytes under a prefix, for freeze audits.
pub(crate) fn prefix_bytes(store: &ParamStore<f32>, prefix: &str) -> Vec<u8> {
    let mut out = Vec::new();
    for (_, p) in store.iter() {
        if p.name.starts_with(prefix) {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

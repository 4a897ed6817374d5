use crate::numerics::{sq_dist, NodeId, ParamStore, Scalar, Tape};

use super::{Codebook, QuantizationTrace};

/// `Σ_l ‖sg[c_{l,s_l}] − r_{l−1}‖²` for one trace.
pub fn commit_loss<T: Scalar>(trace: &QuantizationTrace<T>, cb: &Codebook<T>, store: &ParamStore<T>) -> T {
    trace
        .codes
        .iter()
        .enumerate()
        .map(|(l, &s)| sq_dist(cb.vector(store, l, s), &trace.residuals[l]))
        .sum()
}

/// `‖e_v − ê^{(1:L)}‖²`.
pub fn sem_loss<T: Scalar>(e: &[T], trace: &QuantizationTrace<T>) -> T {
    match trace.prefix.last() {
        Some(p) => sq_dist(e, p),
        None => crate::numerics::sq_norm(e),
    }
}

/// Batch commit and semantic losses on the tape, each averaged over rows of
/// `e` (the encoder output). Codebook rows are read through the tape so the
/// stop-gradient role, not the graph shape, is what keeps their gradient zero.
pub fn quantization_losses<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cb: &Codebook<T>,
    e: NodeId,
    codes: &[Vec<usize>],
) -> (NodeId, NodeId) {
    let depth = cb.depth();
    let mut prefix: Option<NodeId> = None;
    let mut commit: Option<NodeId> = None;
    for l in 0..depth {
        let c = tape.gather(store, cb.layers[l], codes.iter().map(|s| s[l]).collect());
        let p = match prefix {
            Some(p) => tape.add(p, c),
            None => c,
        };
        prefix = Some(p);
        // r_{l-1} − c_l = e − ê^{(1:l)}
        let diff = tape.sub(e, p);
        let term = tape.mean_sq_norm(diff);
        commit = Some(match commit {
            Some(a) => tape.add(a, term),
            None => term,
        });
    }
    let p = prefix.expect("depth ≥ 1");
    let diff = tape.sub(e, p);
    let sem = tape.mean_sq_norm(diff);
    (commit.expect("depth ≥ 1"), sem)
}

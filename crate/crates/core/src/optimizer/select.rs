use std::cmp::Ordering;

use super::round::SubsetObservation;

/// Ordering used for the final choice: higher accuracy, then higher
/// contrastive density, then fewer members, then the earlier observation.
pub fn selection_key(a: &SubsetObservation, b: &SubsetObservation) -> Ordering {
    a.accuracy
        .total_cmp(&b.accuracy)
        .then(a.contrastive.total_cmp(&b.contrastive))
        .then(b.size.cmp(&a.size))
        .then(b.ordinal.cmp(&a.ordinal))
}

/// Position in `history` of the lexicographically best observation. The
/// result does not depend on the order of `history`, because the final tie
/// is broken by each observation's recorded ordinal.
pub fn select_final(history: &[SubsetObservation]) -> Option<usize> {
    (0..history.len()).max_by(|&a, &b| selection_key(&history[a], &history[b]))
}

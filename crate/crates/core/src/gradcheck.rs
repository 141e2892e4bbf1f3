//! Central-difference gradient checking.
//!
//! Only ever evaluates the forward function, so it is independent of the
//! tape's backward rules.

use crate::autodiff::{BlockId, ParamStore};

/// Largest mismatch found by [`check_blocks`].
#[derive(Clone, Debug)]
pub struct GradReport {
    pub worst_rel: f64,
    pub worst_block: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    /// Entries left out because the function is not smooth around them.
    pub skipped: usize,
}

impl GradReport {
    fn new() -> Self {
        Self {
            worst_rel: 0.0,
            worst_block: String::new(),
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            checked: 0,
            skipped: 0,
        }
    }

    fn record(&mut self, store: &ParamStore, id: BlockId, index: usize, analytic: f64, numeric: f64) {
        let rel = rel_error(analytic, numeric);
        self.checked += 1;
        if rel > self.worst_rel || self.worst_block.is_empty() {
            self.worst_rel = rel;
            self.worst_block = store.block(id).name.clone();
            self.worst_index = index;
            self.analytic = analytic;
            self.numeric = numeric;
        }
    }

    /// Folds another report into this one.
    pub fn merge(&mut self, other: GradReport) {
        if other.checked > 0 && (other.worst_rel > self.worst_rel || self.checked == 0) {
            self.worst_rel = other.worst_rel;
            self.worst_block = other.worst_block;
            self.worst_index = other.worst_index;
            self.analytic = other.analytic;
            self.numeric = other.numeric;
        }
        self.checked += other.checked;
        self.skipped += other.skipped;
    }
}

/// `|a − n| / (|n| + 1e-8)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (numeric.abs() + 1e-8)
}

/// Central difference of `f` with respect to one scalar of one block.
pub fn central_difference(
    store: &mut ParamStore,
    id: BlockId,
    index: usize,
    h: f64,
    f: &mut dyn FnMut(&ParamStore) -> f64,
) -> f64 {
    let orig = store.value(id).as_slice().expect("standard layout")[index];
    store.value_mut(id).as_slice_mut().unwrap()[index] = orig + h;
    let plus = f(store);
    store.value_mut(id).as_slice_mut().unwrap()[index] = orig - h;
    let minus = f(store);
    store.value_mut(id).as_slice_mut().unwrap()[index] = orig;
    (plus - minus) / (2.0 * h)
}

/// Compares `analytic` (gradients already held in `store`) against central
/// differences at the listed `(block, index)` entries.
pub fn check_entries(
    store: &mut ParamStore,
    entries: &[(BlockId, usize)],
    h: f64,
    f: &mut dyn FnMut(&ParamStore) -> f64,
) -> GradReport {
    let mut report = GradReport::new();
    for &(id, index) in entries {
        let analytic = store.grad(id).as_slice().expect("standard layout")[index];
        let numeric = central_difference(store, id, index, h, f);
        report.record(store, id, index, analytic, numeric);
    }
    report
}

/// Like [`check_entries`] for functions with isolated kinks or jumps
/// (thresholds, absolute values). Each entry is also differenced with step
/// `h/2`; when the two estimates disagree by more than `smooth_tol`
/// relative, a kink lies within `h` of the point and the entry is counted
/// in `skipped` instead of compared.
pub fn check_entries_piecewise(
    store: &mut ParamStore,
    entries: &[(BlockId, usize)],
    h: f64,
    smooth_tol: f64,
    f: &mut dyn FnMut(&ParamStore) -> f64,
) -> GradReport {
    let mut report = GradReport::new();
    for &(id, index) in entries {
        let analytic = store.grad(id).as_slice().expect("standard layout")[index];
        let numeric = central_difference(store, id, index, h, f);
        let half = central_difference(store, id, index, 0.5 * h, f);
        if rel_error(half, numeric) > smooth_tol && (half - numeric).abs() > 1e-9 {
            report.skipped += 1;
            continue;
        }
        report.record(store, id, index, analytic, numeric);
    }
    report
}

/// Every scalar of every listed block.
pub fn all_entries(store: &ParamStore, ids: &[BlockId]) -> Vec<(BlockId, usize)> {
    ids.iter()
        .flat_map(|&id| (0..store.value(id).len()).map(move |i| (id, i)))
        .collect()
}

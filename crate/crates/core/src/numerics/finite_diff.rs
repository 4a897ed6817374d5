use super::{ParamId, ParamStore, Scalar};

/// Central-difference gradient `(f(p+h) − f(p−h)) / 2h` per coordinate.
pub fn finite_diff_grad<T: Scalar>(mut f: impl FnMut(&[T]) -> T, params: &[T], h: T) -> Vec<T> {
    assert!(h > T::zero(), "step must be positive");
    let mut p = params.to_vec();
    let two_h = h + h;
    (0..p.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let down = f(&p);
            p[i] = orig;
            (up - down) / two_h
        })
        .collect()
}

/// Central differences over selected entries of a parameter tensor.
///
/// `coords` indexes into the tensor's row-major data; `f` is re-evaluated
/// against the perturbed store.
pub fn finite_diff_params<T: Scalar>(
    store: &mut ParamStore<T>,
    id: ParamId,
    coords: &[usize],
    h: T,
    mut f: impl FnMut(&ParamStore<T>) -> T,
) -> Vec<T> {
    assert!(h > T::zero(), "step must be positive");
    let two_h = h + h;
    coords
        .iter()
        .map(|&c| {
            let orig = store.value(id).data()[c];
            store.value_mut(id).data_mut()[c] = orig + h;
            let up = f(store);
            store.value_mut(id).data_mut()[c] = orig - h;
            let down = f(store);
            store.value_mut(id).data_mut()[c] = orig;
            (up - down) / two_h
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(&x, &y)| (x - y).as_f64().powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}

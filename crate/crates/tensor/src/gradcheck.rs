//! Central finite-difference check of tape gradients.

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

/// A single scalar parameter entry: tensor name and flat index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Probe {
    pub param: String,
    pub index: usize,
}

#[derive(Clone, Debug)]
pub struct ProbeResult {
    pub probe: Probe,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub results: Vec<ProbeResult>,
}

impl GradCheckReport {
    pub fn probed_params(&self) -> impl Iterator<Item = &str> {
        self.results.iter().map(|r| r.probe.param.as_str())
    }
}

/// Picks `n` probes, cycling through parameter tensors in store order so
/// every tensor is covered once `n >= store.len()`; the entry within each
/// tensor is uniform.
pub fn select_probes<R: Rng + ?Sized>(store: &ParamStore<f64>, n: usize, rng: &mut R) -> Vec<Probe> {
    let tensors: Vec<(&str, usize)> = store.iter().map(|(k, t)| (k, t.numel())).collect();
    if tensors.is_empty() {
        return Vec::new();
    }
    (0..n)
        .map(|i| {
            let (name, len) = tensors[i % tensors.len()];
            Probe { param: name.to_string(), index: rng.random_range(0..len) }
        })
        .collect()
}

/// `|a - n| / max(1e-12, |a| + |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-12)
}

/// Compares tape gradients of `loss_fn` against `(f(p+h) - f(p-h)) / 2h`
/// on each probe. `loss_fn` must be deterministic for a fixed store.
pub fn finite_difference_check<F, E>(
    store: &mut ParamStore<f64>,
    mut loss_fn: F,
    probes: &[Probe],
    step: f64,
) -> Result<GradCheckReport, E>
where
    F: FnMut(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var, E>,
    E: From<TensorError>,
{
    if probes.is_empty() {
        return Err(TensorError::Contract("at least one probe is required".into()).into());
    }
    if !(step > 0.0) {
        return Err(TensorError::Parameter { op: "finite_difference_check", detail: format!("step {step}") }.into());
    }
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, store)?;
    check_finite(tape.value(loss)?[0])?;
    tape.backward(loss, store)?;

    let mut eval = |store: &ParamStore<f64>| -> Result<f64, E> {
        let mut tape = Tape::new();
        let loss = loss_fn(&mut tape, store)?;
        let v = tape.value(loss)?[0];
        check_finite(v)?;
        Ok(v)
    };

    let mut results = Vec::with_capacity(probes.len());
    for probe in probes {
        let t = store
            .get(&probe.param)
            .ok_or_else(|| TensorError::Contract(format!("unknown probe parameter `{}`", probe.param)))?;
        if probe.index >= t.numel() {
            return Err(TensorError::Contract(format!("probe index {} out of range", probe.index)).into());
        }
        let analytic = t.grad().map(|g| g[probe.index]).unwrap_or(0.0);
        let original = t.values()[probe.index];

        store.get_mut(&probe.param).expect("exists").values_mut()[probe.index] = original + step;
        let plus = eval(store)?;
        store.get_mut(&probe.param).expect("exists").values_mut()[probe.index] = original - step;
        let minus = eval(store)?;
        store.get_mut(&probe.param).expect("exists").values_mut()[probe.index] = original;

        let numeric = (plus - minus) / (2.0 * step);
        results.push(ProbeResult {
            probe: probe.clone(),
            analytic,
            numeric,
            relative_error: relative_error(analytic, numeric),
        });
    }
    let max_relative_error = results.iter().map(|r| r.relative_error).fold(0.0, f64::max);
    Ok(GradCheckReport { max_relative_error, results })
}

fn check_finite(v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(TensorError::Eval(format!("loss evaluated to {v}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn relative_error_of_zeros_is_zero() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 3.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn constant_loss_has_zero_error() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::from_f64(vec![2], &[0.3, -0.1]).unwrap()).unwrap();
        let probes = vec![Probe { param: "w".into(), index: 1 }];
        let report = finite_difference_check::<_, TensorError>(
            &mut s,
            |tape, _| tape.constant_from(vec![1], vec![4.0]),
            &probes,
            1e-5,
        )
        .unwrap();
        assert_eq!(report.max_relative_error, 0.0);
    }

    #[test]
    fn non_finite_loss_is_an_evaluation_error() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::from_f64(vec![1], &[1.0]).unwrap()).unwrap();
        let probes = vec![Probe { param: "w".into(), index: 0 }];
        let err = finite_difference_check::<_, TensorError>(
            &mut s,
            |tape, _| tape.constant_from(vec![1], vec![f64::NAN]),
            &probes,
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, TensorError::Eval(_)));
    }
}

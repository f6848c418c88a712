//! Finite-difference probes for parameter gradients.

use rand::Rng;

use crate::nn::{ParamId, ParamStore};
use crate::rng::seeded;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct ProbeReport {
    pub probes: usize,
    pub max_rel_err: f64,
    /// `(parameter name, flat index, analytic, finite difference)`.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Compares `analytic` gradients against central differences of `loss` at
/// `n_probes` randomly chosen scalars, preferring scalars whose analytic
/// gradient is not negligible.
pub fn probe_parameters(
    store: &ParamStore,
    analytic: &[Tensor],
    n_probes: usize,
    seed: u64,
    loss: impl Fn(&ParamStore) -> f64,
) -> ProbeReport {
    let mut candidates: Vec<(usize, usize)> = Vec::new();
    for (ti, g) in analytic.iter().enumerate() {
        for (i, v) in g.data().iter().enumerate() {
            if v.abs() > 1e-7 {
                candidates.push((ti, i));
            }
        }
    }
    let mut rng = seeded(seed);
    let mut report = ProbeReport {
        probes: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    if candidates.is_empty() {
        return report;
    }
    let h = 1e-5;
    for _ in 0..n_probes {
        let (ti, i) = candidates[rng.random_range(0..candidates.len())];
        let mut s = store.clone();
        let names = store.names();
        let id: ParamId = s.id(&names[ti]).expect("name from the same store");
        let orig = s.get(id).data()[i];
        s.get_mut(id).data_mut()[i] = orig + h;
        let lp = loss(&s);
        s.get_mut(id).data_mut()[i] = orig - h;
        let lm = loss(&s);
        let fd = (lp - lm) / (2.0 * h);
        let a = analytic[ti].data()[i];
        let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
        report.probes += 1;
        if err >= report.max_rel_err {
            report.max_rel_err = err;
            report.worst = Some((names[ti].clone(), i, a, fd));
        }
    }
    report
}

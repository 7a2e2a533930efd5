//! Central finite-difference checks for parameter gradients.

use std::collections::BTreeMap;

use rand::Rng;

use crate::{ParamStore, Tensor};

/// One checked coordinate.
#[derive(Clone, Debug)]
pub struct Probe {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl Probe {
    /// `|a - n| / max(|a|, |n|, floor)`.
    pub fn relative_error(&self, floor: f64) -> f64 {
        let den = self.analytic.abs().max(self.numeric.abs()).max(floor);
        (self.analytic - self.numeric).abs() / den
    }
}

/// Compares `analytic` gradients to central differences of `loss` on
/// `count` randomly chosen coordinates (drawn uniformly over all scalars).
pub fn check<R: Rng + ?Sized>(
    store: &ParamStore,
    analytic: &BTreeMap<String, Tensor>,
    loss: impl Fn(&ParamStore) -> f64,
    count: usize,
    step: f64,
    rng: &mut R,
) -> Vec<Probe> {
    let coords: Vec<(String, usize)> = store
        .iter()
        .flat_map(|(n, t)| (0..t.len()).map(move |i| (n.to_string(), i)))
        .collect();
    assert!(!coords.is_empty());
    let mut probes = Vec::with_capacity(count);
    let mut work = store.clone();
    for _ in 0..count {
        let (name, index) = coords[rng.random_range(0..coords.len())].clone();
        let orig = work.get(&name).unwrap().data()[index];
        work.get_mut(&name).unwrap().data_mut()[index] = orig + step;
        let up = loss(&work);
        work.get_mut(&name).unwrap().data_mut()[index] = orig - step;
        let down = loss(&work);
        work.get_mut(&name).unwrap().data_mut()[index] = orig;
        let numeric = (up - down) / (2.0 * step);
        let analytic = analytic.get(&name).map_or(0.0, |t| t.data()[index]);
        probes.push(Probe {
            name,
            index,
            analytic,
            numeric,
        });
    }
    probes
}

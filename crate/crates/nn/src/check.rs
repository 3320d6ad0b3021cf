use rand::seq::index::sample;
use rand::Rng;

use crate::error::{NnError, Result};
use crate::graph::{BoundParams, Graph, Var};
use crate::tensor::ParamStore;

/// Coordinate of one scalar parameter: (store, tensor, element).
pub type Coord = (usize, usize, usize);

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Worst coordinate with its autodiff and finite-difference gradients.
    pub worst: Option<(Coord, f64, f64)>,
}

/// Uniformly samples `fraction` of all coordinates (at least one per store).
pub fn sample_coords<R: Rng + ?Sized>(stores: &[ParamStore], fraction: f64, rng: &mut R) -> Vec<Coord> {
    let mut out = Vec::new();
    for (s, store) in stores.iter().enumerate() {
        let flat: Vec<(usize, usize)> = (0..store.len())
            .flat_map(|p| (0..store.tensor(p).numel()).map(move |e| (p, e)))
            .collect();
        if flat.is_empty() {
            continue;
        }
        let n = ((flat.len() as f64 * fraction).ceil() as usize).clamp(1, flat.len());
        let mut picked: Vec<usize> = sample(rng, flat.len(), n).into_vec();
        picked.sort_unstable();
        out.extend(picked.into_iter().map(|i| (s, flat[i].0, flat[i].1)));
    }
    out
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// fourth-order central finite differences with step `eps`.
///
/// Relative error per coordinate is `|g_ad - g_fd| / max(|g_ad|, 1e-7)`.
/// The floor sits above the roundoff of the difference quotient (about
/// `1e-12` for O(1) objectives at `eps = 1e-3`).
/// When `coords` is `None` every coordinate of every store is checked.
pub fn grad_check<F>(stores: &[ParamStore], coords: Option<&[Coord]>, eps: f64, f: F) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&mut Graph<'g>, &[BoundParams<'g>]) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(NnError::InvalidTensor(format!("grad_check eps {eps} outside (0, 1e-3]")));
    }
    let all: Vec<Coord>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = stores
                .iter()
                .enumerate()
                .flat_map(|(s, st)| {
                    (0..st.len()).flat_map(move |p| (0..st.tensor(p).numel()).map(move |e| (s, p, e)))
                })
                .collect();
            &all
        }
    };

    let analytic: Vec<f64> = {
        let mut g = Graph::new();
        let bound: Vec<BoundParams<'_>> = stores.iter().map(|s| g.bind(s, true)).collect();
        let out = f(&mut g, &bound)?;
        check_finite(g.scalar(out))?;
        let grads = g.backward(out)?;
        coords
            .iter()
            .map(|&(s, p, e)| grads.get(bound[s].vars()[p]).map_or(0.0, |gr| gr[e]))
            .collect()
    };

    let mut work = stores.to_vec();
    let eval = |work: &[ParamStore]| -> Result<f64> {
        let mut g = Graph::new();
        let bound: Vec<BoundParams<'_>> = work.iter().map(|s| g.bind(s, false)).collect();
        let out = f(&mut g, &bound)?;
        check_finite(g.scalar(out))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: coords.len(),
        worst: None,
    };
    for (&(s, p, e), &ad) in coords.iter().zip(&analytic) {
        let x0 = work[s].tensor(p).data()[e];
        let at = |delta: f64, work: &mut Vec<ParamStore>| -> Result<f64> {
            work[s].tensor_mut(p).data_mut()[e] = x0 + delta;
            eval(work)
        };
        let f2p = at(2.0 * eps, &mut work)?;
        let f1p = at(eps, &mut work)?;
        let f1m = at(-eps, &mut work)?;
        let f2m = at(-2.0 * eps, &mut work)?;
        work[s].tensor_mut(p).data_mut()[e] = x0;
        let fd = (8.0 * (f1p - f1m) - (f2p - f2m)) / (12.0 * eps);
        let rel = (ad - fd).abs() / ad.abs().max(1e-7);
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some(((s, p, e), ad, fd));
        }
    }
    Ok(report)
}

fn check_finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(NnError::NonFinite(format!("grad_check objective evaluated to {v}")))
    }
}

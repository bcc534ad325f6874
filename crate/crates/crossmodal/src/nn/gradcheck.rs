//! Central finite-difference verification of analytic gradients.
//!
//! Used by the test suite against every differentiable stage, from single
//! ops to the full pipeline loss. The whole stack computes in `f64` (only
//! persisted state is f32-quantized), which is what makes relative errors
//! around `1e-6`..`1e-4` reachable for a composite renderer + denoiser loss.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::params::{GradMap, ParamSet};

/// Outcome of a finite-difference sweep.
#[derive(Debug)]
pub struct GradCheckReport {
    /// Largest relative error seen across checked coordinates.
    pub max_rel_err: f64,
    /// Name and flat index of the worst coordinate.
    pub worst: (String, usize),
    /// Coordinates actually compared.
    pub checked: usize,
}

/// One parameter coordinate: name plus flat element index.
pub type Coord = (String, usize);

/// Pick `k` distinct random parameter coordinates, uniform over all scalars.
pub fn random_coords<S: ParamSet>(params: &S, k: usize, rng: &mut impl Rng) -> Vec<Coord> {
    let mut layout: Vec<(String, usize)> = Vec::new();
    let mut total = 0usize;
    params.visit("", &mut |name, t| {
        layout.push((name.to_string(), t.numel()));
        total += t.numel();
    });
    assert!(total >= k, "asked for {k} coords but only {total} parameters");
    let mut picked = std::collections::BTreeSet::new();
    while picked.len() < k {
        picked.insert(rng.gen_range(0..total));
    }
    picked
        .into_iter()
        .map(|mut flat| {
            for (name, n) in &layout {
                if flat < *n {
                    return (name.clone(), flat);
                }
                flat -= n;
            }
            unreachable!("flat index within total")
        })
        .collect()
}

/// Compare analytic gradients against central differences at the given
/// coordinates. `eval` must recompute the scalar loss from the current
/// parameter values; parameters are restored exactly after probing.
///
/// The relative error of a coordinate is
/// `|fd - analytic| / max(|fd|, |analytic|, 1e-6)`; the floor keeps
/// near-zero gradients from blowing up the ratio.
pub fn finite_difference_check<S: ParamSet>(
    params: &mut S,
    coords: &[Coord],
    step: f64,
    analytic: &GradMap,
    mut eval: impl FnMut(&S) -> Result<f64>,
) -> Result<GradCheckReport> {
    if !(step > 0.0) {
        return Err(Error::InvalidArgument("step must be positive".into()));
    }
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (String::new(), 0),
        checked: 0,
    };
    for (name, idx) in coords {
        let an = analytic
            .get(name)
            .and_then(|g| g.get(*idx).copied())
            .ok_or_else(|| {
                Error::InvalidArgument(format!("no analytic gradient for {name}[{idx}]"))
            })?;

        let mut original = 0.0;
        params.update_param("", name, &mut |t| {
            original = t.data()[*idx];
            t.data_mut()[*idx] = original + step;
        })?;
        let f_plus = eval(params)?;
        params.update_param("", name, &mut |t| {
            t.data_mut()[*idx] = original - step;
        })?;
        let f_minus = eval(params)?;
        params.update_param("", name, &mut |t| {
            t.data_mut()[*idx] = original;
        })?;

        let fd = (f_plus - f_minus) / (2.0 * step);
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = (name.clone(), *idx);
        }
        report.checked += 1;
    }
    Ok(report)
}

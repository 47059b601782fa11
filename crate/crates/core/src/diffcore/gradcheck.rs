//! Central finite-difference gradient checking.

use super::graph::{Graph, Var};
use super::tensor::{ParamId, ParamStore, Tensor};
use crate::error::Result;

pub const FD_STEP: f64 = 1e-5;
/// Relative error denominators never drop below this, which gives the
/// pass criterion an absolute floor of `tol * REL_FLOOR`.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub tolerance: f64,
    pub entries: Vec<GradCheckEntry>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    fn finish(name: &str, tolerance: f64, entries: Vec<GradCheckEntry>) -> Self {
        let passed = entries
            .iter()
            .all(|e| e.max_rel_err.is_finite() && e.max_rel_err <= tolerance);
        GradCheckReport {
            name: name.to_string(),
            tolerance,
            entries,
            passed,
        }
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn failed_entry(name: String) -> GradCheckEntry {
    GradCheckEntry {
        name,
        checked: 0,
        max_rel_err: f64::INFINITY,
        max_abs_err: f64::INFINITY,
    }
}

/// Coordinates probed for a tensor of `n` entries: all of them up to `cap`,
/// otherwise an evenly strided subset.
fn probe_indices(n: usize, cap: usize) -> Vec<usize> {
    if n <= cap {
        (0..n).collect()
    } else {
        (0..cap).map(|i| i * n / cap).collect()
    }
}

/// Checks `builder` with respect to each input tensor. The builder receives
/// the inputs as gradient-tracking variables and must return a scalar.
pub fn grad_check<F>(name: &str, inputs: &[Tensor], builder: F, tol: f64) -> GradCheckReport
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let eval = |ts: &[Tensor]| -> Result<f64> {
        let g = Graph::new();
        let vars = ts.iter().map(|t| g.variable(t)).collect::<Result<Vec<_>>>()?;
        let out = builder(&g, &vars)?;
        Ok(g.scalar(out))
    };
    let analytic = (|| -> Result<Vec<Vec<f64>>> {
        let g = Graph::new();
        let vars = inputs.iter().map(|t| g.variable(t)).collect::<Result<Vec<_>>>()?;
        let out = builder(&g, &vars)?;
        let grads = g.backward(out)?;
        Ok(vars
            .iter()
            .zip(inputs)
            .map(|(v, t)| {
                grads
                    .wrt(*v)
                    .map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec)
            })
            .collect())
    })();
    let entries = match analytic {
        Err(_) => (0..inputs.len())
            .map(|i| failed_entry(format!("input{i}")))
            .collect(),
        Ok(analytic) => inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut entry = GradCheckEntry {
                    name: format!("input{i}"),
                    checked: 0,
                    max_rel_err: 0.0,
                    max_abs_err: 0.0,
                };
                for j in probe_indices(t.numel(), usize::MAX) {
                    let mut probe = inputs.to_vec();
                    probe[i].data_mut()[j] = t.data()[j] + FD_STEP;
                    let up = eval(&probe);
                    probe[i].data_mut()[j] = t.data()[j] - FD_STEP;
                    let down = eval(&probe);
                    let (Ok(up), Ok(down)) = (up, down) else {
                        return failed_entry(entry.name);
                    };
                    let numeric = (up - down) / (2.0 * FD_STEP);
                    let a = analytic[i][j];
                    entry.checked += 1;
                    entry.max_rel_err = entry.max_rel_err.max(rel_err(a, numeric));
                    entry.max_abs_err = entry.max_abs_err.max((a - numeric).abs());
                }
                entry
            })
            .collect(),
    };
    GradCheckReport::finish(name, tol, entries)
}

/// Checks `builder` with respect to the trainable parameters `ids`, probing at
/// most `per_param` coordinates of each.
pub fn grad_check_params<F>(
    name: &str,
    store: &ParamStore,
    ids: &[ParamId],
    per_param: usize,
    builder: F,
    tol: f64,
) -> GradCheckReport
where
    F: Fn(&Graph, &ParamStore) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let g = Graph::new();
        let out = builder(&g, s)?;
        Ok(g.scalar(out))
    };
    let analytic = (|| -> Result<_> {
        let g = Graph::new();
        let out = builder(&g, store)?;
        g.backward(out)
    })();
    let entries = match analytic {
        Err(_) => ids
            .iter()
            .map(|&id| failed_entry(store.name(id).to_string()))
            .collect(),
        Ok(grads) => ids
            .iter()
            .map(|&id| {
                let t = store.get(id);
                let ga = grads.param(id).unwrap_or_else(|| vec![0.0; t.numel()]);
                let mut entry = GradCheckEntry {
                    name: store.name(id).to_string(),
                    checked: 0,
                    max_rel_err: 0.0,
                    max_abs_err: 0.0,
                };
                let mut probe = store.clone();
                for j in probe_indices(t.numel(), per_param) {
                    let x = t.data()[j];
                    probe.get_mut(id).data_mut()[j] = x + FD_STEP;
                    let up = eval(&probe);
                    probe.get_mut(id).data_mut()[j] = x - FD_STEP;
                    let down = eval(&probe);
                    probe.get_mut(id).data_mut()[j] = x;
                    let (Ok(up), Ok(down)) = (up, down) else {
                        return failed_entry(entry.name);
                    };
                    let numeric = (up - down) / (2.0 * FD_STEP);
                    entry.checked += 1;
                    entry.max_rel_err = entry.max_rel_err.max(rel_err(ga[j], numeric));
                    entry.max_abs_err = entry.max_abs_err.max((ga[j] - numeric).abs());
                }
                entry
            })
            .collect(),
    };
    GradCheckReport::finish(name, tol, entries)
}

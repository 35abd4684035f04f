//! Central finite-difference checks of tape gradients.

use super::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Step used by the central difference.
pub const FD_STEP: f64 = 1e-5;
/// Denominator floor of the relative error, so near-zero gradients are
/// compared absolutely.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

impl GradReport {
    pub fn merge(self, other: GradReport) -> GradReport {
        GradReport {
            max_rel_err: self.max_rel_err.max(other.max_rel_err),
            checked: self.checked + other.checked,
        }
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn scalar_loss(tape: &Tape, loss: Var) -> Result<f64> {
    if tape.shape(loss).iter().product::<usize>() != 1 {
        return Err(Error::Contract("gradient check needs a scalar loss".into()));
    }
    Ok(tape.scalar(loss))
}

/// Compares the gradient of `f` with respect to every entry of `inputs`.
pub fn check_inputs(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> Result<GradReport> {
    let eval = |ts: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ts.iter().map(|t| tape.leaf(t)).collect();
        let loss = f(&mut tape, &vars)?;
        scalar_loss(&tape, loss)
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(&t.clone().requires_grad(true)))
        .collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let mut report = GradReport {
        max_rel_err: 0.0,
        checked: 0,
    };
    for (i, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        for (j, a) in analytic.iter().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * FD_STEP);
            report.max_rel_err = report.max_rel_err.max(rel_err(*a, numeric));
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Compares parameter gradients of `f`. `coords` restricts the check to the
/// given `(parameter, flat index)` pairs; `None` checks every trainable
/// entry.
pub fn check_params(
    store: &ParamStore,
    coords: Option<&[(ParamId, usize)]>,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<GradReport> {
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = s.bind(&mut tape, false);
        let loss = f(&mut tape, &vars)?;
        scalar_loss(&tape, loss)
    };
    let mut tape = Tape::new();
    let vars = store.bind(&mut tape, true);
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let all: Vec<(ParamId, usize)> = match coords {
        Some(c) => c.to_vec(),
        None => store
            .ids()
            .filter(|id| store.is_trainable(*id))
            .flat_map(|id| (0..store.get(id).numel()).map(move |j| (id, j)))
            .collect(),
    };
    let mut work = store.clone();
    let mut report = GradReport {
        max_rel_err: 0.0,
        checked: 0,
    };
    for (id, j) in all {
        let a = tape.grad(vars[id.0]).map_or(0.0, |g| g[j]);
        let orig = store.get(id).data()[j];
        work.get_mut(id).data_mut()[j] = orig + FD_STEP;
        let fp = eval(&work)?;
        work.get_mut(id).data_mut()[j] = orig - FD_STEP;
        let fm = eval(&work)?;
        work.get_mut(id).data_mut()[j] = orig;
        let numeric = (fp - fm) / (2.0 * FD_STEP);
        report.max_rel_err = report.max_rel_err.max(rel_err(a, numeric));
        report.checked += 1;
    }
    Ok(report)
}

//! Central finite-difference checks of tape gradients.

use crate::error::Result;

use super::{Binding, ParamStore, Tape, Var};

/// Denominator floor for the relative error, so exact zeros compare by
/// absolute error at this scale.
pub const REL_ERR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupReport {
    pub name: String,
    pub elements: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradReport {
    pub groups: Vec<GroupReport>,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.groups.iter().all(|g| g.max_rel_err < tol)
    }

    pub fn elements(&self) -> usize {
        self.groups.iter().map(|g| g.elements).sum()
    }
}

/// Compares reverse-mode gradients of the scalar `loss` against central
/// differences with step `step`, for every element of every trainable entry.
/// One report group per store entry.
pub fn check<F>(store: &ParamStore<f64>, step: f64, loss: F) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &Binding) -> Result<Var>,
{
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let b = s.bind(&mut tape);
        let out = loss(&mut tape, &b)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let binding = store.bind(&mut tape);
    let seed = loss(&mut tape, &binding)?;
    tape.backward(seed)?;
    let grads = binding.grads(&tape);
    drop(tape);

    let mut probe = store.clone();
    let mut report = GradReport::default();
    for id in store.ids() {
        let entry = store.entry(id);
        if !entry.trainable {
            continue;
        }
        let mut worst = 0.0f64;
        for i in 0..entry.value.len() {
            let orig = entry.value.data()[i];
            probe.get_mut(id).data_mut()[i] = orig + step;
            let plus = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig - step;
            let minus = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(relative_error(grads[id.index()].data()[i], numeric));
        }
        report.groups.push(GroupReport {
            name: entry.name.clone(),
            elements: entry.value.len(),
            max_rel_err: worst,
        });
    }
    Ok(report)
}

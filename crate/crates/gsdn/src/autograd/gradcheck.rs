use crate::autograd::params::ParameterStore;
use crate::autograd::tape::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GroupError {
    pub name: String,
    pub entries: usize,
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)`, zero when both vanish.
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub groups: Vec<GroupError>,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&GroupError> {
        self.groups.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

fn eval_loss<F>(store: &ParameterStore<f64>, build_loss: &mut F) -> Result<f64>
where
    F: FnMut(&mut Tape<'_, f64>) -> Result<Var>,
{
    let mut tape = Tape::new(store);
    let v = build_loss(&mut tape)?;
    let l = tape.value(v).as_slice()[0];
    if !l.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss {l} while probing gradients")));
    }
    Ok(l)
}

/// Compares reverse-mode gradients of every trainable entry against central
/// differences `(L(w+ε) − L(w−ε)) / 2ε`.
pub fn grad_check<F>(store: &mut ParameterStore<f64>, eps: f64, mut build_loss: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<'_, f64>) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new(store);
        let loss = build_loss(&mut tape)?;
        if !tape.value(loss).all_finite() {
            return Err(Error::Numerical("non-finite loss at the unperturbed point".into()));
        }
        tape.backward(loss)?
    };
    let mut groups = Vec::new();
    let ids: Vec<_> = store.ids().filter(|&id| store.entry(id).trainable).collect();
    for id in ids {
        let n = store.data(id).len();
        let a = analytic.get(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        let mut numeric = vec![0.0; n];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = store.data(id)[i];
            store.data_mut(id)[i] = orig + eps;
            let up = eval_loss(store, &mut build_loss);
            store.data_mut(id)[i] = orig - eps;
            let down = eval_loss(store, &mut build_loss);
            store.data_mut(id)[i] = orig;
            *slot = (up? - down?) / (2.0 * eps);
        }
        let diff = a.iter().zip(&numeric).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale = norm(&a).max(norm(&numeric));
        let rel_error = if scale == 0.0 { 0.0 } else { diff / scale };
        groups.push(GroupError {
            name: store.entry(id).name.clone(),
            entries: n,
            rel_error,
        });
    }
    let max_rel_error = groups.iter().map(|g| g.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { groups, max_rel_error })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

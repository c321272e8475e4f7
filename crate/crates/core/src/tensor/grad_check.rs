use super::{ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Worst disagreement for one parameter tensor.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub numel: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct GradCheckReport {
    pub epsilon: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.entries.iter().all(|e| e.max_rel_error < tol)
    }
}

/// Compares reverse-mode gradients of `loss` against central differences
/// `(f(p + eps) - f(p - eps)) / 2 eps` for every trainable tensor in
/// `params`. The relative error of a tensor is its largest absolute
/// disagreement divided by its largest gradient magnitude (analytic or
/// numeric, floored at 1e-8), so elements whose gradient is near the
/// difference noise floor do not dominate.
///
/// `loss` must be deterministic. `params` is restored before returning.
pub fn grad_check<F>(params: &mut ParamStore, epsilon: f64, mut loss: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    let eval = |params: &ParamStore, loss: &mut F| -> Result<f64> {
        let mut tape = Tape::new();
        let out = loss(&mut tape, params)?;
        let v = tape.scalar(out);
        if !v.is_finite() {
            return Err(Error::Numeric(format!("loss evaluated to {v}")));
        }
        Ok(v)
    };

    params.zero_grads();
    let mut tape = Tape::new();
    let out = loss(&mut tape, params)?;
    tape.backward(out, params)?;

    let mut entries = Vec::new();
    for id in params.ids().collect::<Vec<_>>() {
        if !params.get(id).requires_grad() {
            continue;
        }
        let numel = params.get(id).numel();
        let analytic = params
            .get(id)
            .grad()
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; numel]);
        let mut scale: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for (i, &a) in analytic.iter().enumerate() {
            let orig = params.get(id).data()[i];
            params.get_mut(id).data_mut()[i] = orig + epsilon;
            let plus = eval(params, &mut loss);
            params.get_mut(id).data_mut()[i] = orig - epsilon;
            let minus = eval(params, &mut loss);
            params.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * epsilon);
            scale = scale.max(a.abs()).max(numeric.abs());
            max_abs = max_abs.max((a - numeric).abs());
        }
        entries.push(GradCheckEntry {
            name: params.name(id).to_string(),
            numel,
            max_rel_error: max_abs / scale.max(1e-8),
            max_abs_error: max_abs,
        });
    }
    params.zero_grads();
    Ok(GradCheckReport { epsilon, entries })
}

//! Finite-difference verification of reverse-mode gradients.

use super::tape::{NodeId, ParamStore, Tape};
use super::{NumericsError, Result, Scalar};

/// Compare the tape gradient of a scalar-valued graph against central finite
/// differences, coordinate by coordinate over every parameter. Returns the
/// maximum relative error with denominator `max(|g|, 1e-8)`.
///
/// `build` must construct the full graph from the given store (registering
/// parameters on the tape by name) and return the scalar loss node.
pub fn grad_check<S, F>(params: &ParamStore<S>, build: F, epsilon: f64) -> Result<f64>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &ParamStore<S>) -> Result<NodeId>,
{
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(NumericsError::Parameter {
            op: "grad_check",
            detail: format!("epsilon {} outside [1e-7, 1e-3]", epsilon),
        });
    }

    let mut tape = Tape::new();
    let loss = build(&mut tape, params)?;
    let base = tape.value(loss);
    if base.len() != 1 {
        return Err(NumericsError::Dimension {
            op: "grad_check",
            detail: format!("f must be scalar, got {:?}", base.shape()),
        });
    }
    if !base.item().is_finite() {
        return Err(NumericsError::Evaluation { op: "grad_check", detail: "non-finite f".into() });
    }
    let grads = tape.backward(loss)?;
    let analytic = grads.by_param();

    let eval = |store: &ParamStore<S>| -> Result<f64> {
        let mut t = Tape::new();
        let id = build(&mut t, store)?;
        let v = t.value(id).item().to_f64();
        if !v.is_finite() {
            return Err(NumericsError::Evaluation {
                op: "grad_check",
                detail: "non-finite f".into(),
            });
        }
        Ok(v)
    };

    let eps = S::from_f64(epsilon);
    let floor = 1e-8;
    let mut max_rel: f64 = 0.0;
    for (name, tensor) in params.iter() {
        if !tensor.requires_grad() {
            continue;
        }
        let g = analytic.get(name);
        for i in 0..tensor.len() {
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().data_mut()[i] += eps;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().data_mut()[i] -= eps;
            let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * epsilon);
            let an = g.map_or(0.0, |t| t.data()[i].to_f64());
            let rel = (fd - an).abs() / an.abs().max(floor);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

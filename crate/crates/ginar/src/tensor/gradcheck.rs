//! Finite-difference verification of the reverse pass.
//!
//! The only trustworthy oracle for an autodiff engine is the definition of
//! the derivative itself, so [`grad_check`] rebuilds the computation from
//! scratch for every probe: analytic gradients from one recorded tape, a
//! central-difference quotient from two fresh forward passes per parameter
//! element. Everything runs in `f64` regardless of the training element type.

use super::{Tape, Tensor, TensorError};

/// Named initial value for one parameter of the function under test.
#[derive(Debug, Clone)]
pub struct ParamInit {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParamInit {
    pub fn new(name: &str, shape: &[usize], data: Vec<f64>) -> Self {
        ParamInit {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
        }
    }
}

/// Outcome of [`grad_check`]: worst relative error per parameter and overall.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tol: f64,
    pub per_param: Vec<(String, f64)>,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }

    /// Name of the worst-offending parameter, for failure messages.
    pub fn worst_param(&self) -> &str {
        self.per_param
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(n, _)| n.as_str())
            .unwrap_or("<none>")
    }
}

/// Compare analytic gradients against central differences for a scalar-valued
/// function of the given parameters.
///
/// `build` must construct the function on the provided tape from the provided
/// parameter tensors and return the scalar loss; it is invoked `2 * E + 1`
/// times for `E` total parameter elements. The relative error of element `i`
/// is `|analytic_i - numeric_i| / max(1, |numeric_i|)`.
pub fn grad_check<B>(
    params: &[ParamInit],
    eps: f64,
    tol: f64,
    build: B,
) -> Result<GradCheckReport, TensorError>
where
    B: Fn(&mut Tape<f64>, &[Tensor]) -> Result<Tensor, TensorError>,
{
    let eval = |values: &[Vec<f64>]| -> Result<f64, TensorError> {
        let mut tape = Tape::<f64>::new();
        let mut handles = Vec::with_capacity(params.len());
        for (p, v) in params.iter().zip(values) {
            handles.push(tape.param(&p.shape, v.clone())?);
        }
        let loss = build(&mut tape, &handles)?;
        Ok(tape.scalar(loss))
    };

    // Analytic pass.
    let mut tape = Tape::<f64>::new();
    let mut handles = Vec::with_capacity(params.len());
    for p in params {
        handles.push(tape.param(&p.shape, p.data.clone())?);
    }
    let loss = build(&mut tape, &handles)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = handles.iter().map(|&h| tape.grad_or_zeros(h)).collect();

    // Numeric probes.
    let mut values: Vec<Vec<f64>> = params.iter().map(|p| p.data.clone()).collect();
    let mut per_param = Vec::with_capacity(params.len());
    let mut max_rel = 0.0f64;
    for pi in 0..params.len() {
        let mut worst = 0.0f64;
        for ei in 0..values[pi].len() {
            let orig = values[pi][ei];
            values[pi][ei] = orig + eps;
            let fp = eval(&values)?;
            values[pi][ei] = orig - eps;
            let fm = eval(&values)?;
            values[pi][ei] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let rel = (analytic[pi][ei] - numeric).abs() / numeric.abs().max(1.0);
            if rel > worst {
                worst = rel;
            }
        }
        per_param.push((params[pi].name.clone(), worst));
        if worst > max_rel {
            max_rel = worst;
        }
    }

    Ok(GradCheckReport {
        tol,
        per_param,
        max_rel_err: max_rel,
    })
}

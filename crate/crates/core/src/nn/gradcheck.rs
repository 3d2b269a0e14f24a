use super::{NnError, ParamSet, Tape, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameter name and flat index where the maximum was attained.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

fn eval_loss<F>(loss_fn: &F, params: &ParamSet) -> Result<f64, NnError>
where
    F: for<'p> Fn(&mut Tape<'p>, &[Var]) -> Result<Var, NnError>,
{
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let loss = loss_fn(&mut tape, &vars)?;
    Ok(tape.value(loss).item())
}

/// Compare analytic gradients against central differences
/// `(L(p+eps) − L(p−eps)) / 2eps` for every parameter scalar.
///
/// Returns the maximum of `|a − f| / max(1, |a|, |f|)`.
pub fn gradient_check<F>(loss_fn: F, params: &ParamSet, eps: f64) -> Result<GradCheckReport, NnError>
where
    F: for<'p> Fn(&mut Tape<'p>, &[Var]) -> Result<Var, NnError>,
{
    assert!((1e-7..=1e-3).contains(&eps), "eps {eps} outside [1e-7, 1e-3]");
    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let loss = loss_fn(&mut tape, &vars)?;
        let grads = tape.backward(loss)?;
        vars.iter()
            .zip(params.tensors())
            .map(|(v, t)| match grads.get(*v) {
                Some(g) => g.data().to_vec(),
                None => vec![0.0; t.len()],
            })
            .collect()
    };

    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        checked: 0,
    };
    for p in 0..work.len() {
        for i in 0..work.tensors()[p].len() {
            let orig = work.tensors()[p].data()[i];
            let probe = |delta: f64, work: &mut ParamSet| -> Result<f64, NnError> {
                work.tensors_mut()[p].data_mut()[i] = orig + delta;
                let non_finite = || NnError::NonFiniteLoss {
                    param: params.names()[p].clone(),
                    index: i,
                    delta,
                };
                match eval_loss(&loss_fn, work) {
                    Ok(v) if v.is_finite() => Ok(v),
                    Ok(_) | Err(NnError::NonFinite { .. }) => Err(non_finite()),
                    Err(e) => Err(e),
                }
            };
            let plus = probe(eps, &mut work)?;
            let minus = probe(-eps, &mut work)?;
            work.tensors_mut()[p].data_mut()[i] = orig;

            let fd = (plus - minus) / (2.0 * eps);
            let a = analytic[p][i];
            let rel = (a - fd).abs() / 1f64.max(a.abs()).max(fd.abs());
            if report.worst.is_none() || rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst = Some((params.names()[p].clone(), i));
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

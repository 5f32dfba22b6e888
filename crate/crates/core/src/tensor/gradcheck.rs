use super::{ParameterSet, Tape, Tensor, TensorError, Var};

/// Finite-difference comparison for one input tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    /// `max |g_analytic − g_fd| / max(1, |g_fd|)` over the checked entries.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Entries skipped because the step straddled a non-differentiable point.
    pub kinks: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.max_rel_error < self.tolerance)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }
}

fn evaluate<F>(f: &F, inputs: &ParameterSet, grad: bool) -> Result<(Tape, Vec<Var>, Var), TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .enumerate()
        .map(|(i, (_, t))| tape.leaf(t.clone(), grad && inputs.is_trainable(i)))
        .collect::<Result<Vec<_>, _>>()?;
    let out = f(&mut tape, &vars)?;
    Ok((tape, vars, out))
}

/// Compare reverse-mode gradients of the scalar `f(inputs)` against central
/// differences with step `h`.
///
/// An entry whose forward and backward one-sided differences disagree by at
/// least its analytic-vs-central mismatch sits on a kink (e.g. a ReLU at 0)
/// and is excluded from the error statistic; the count is reported.
pub fn gradcheck<F>(f: F, inputs: &ParameterSet, h: f64, tolerance: f64) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let (mut tape, vars, out) = evaluate(&f, inputs, true)?;
    let f0 = tape.value(out).item();
    tape.backward(out)?;
    let mut probe = inputs.clone();
    let mut tensors = Vec::new();
    for (id, &var) in vars.iter().enumerate() {
        if !inputs.is_trainable(id) {
            continue;
        }
        let shape = inputs.tensor(id).shape();
        let analytic = tape.grad(var).cloned().unwrap_or_else(|| Tensor::zeros(shape.0, shape.1));
        let mut check = TensorCheck { name: inputs.name(id).to_string(), max_rel_error: 0.0, checked: 0, kinks: 0 };
        for k in 0..inputs.tensor(id).len() {
            let x = inputs.tensor(id).data()[k];
            probe.tensor_mut(id).data_mut()[k] = x + h;
            let (t, _, o) = evaluate(&f, &probe, false)?;
            let fp = t.value(o).item();
            probe.tensor_mut(id).data_mut()[k] = x - h;
            let (t, _, o) = evaluate(&f, &probe, false)?;
            let fm = t.value(o).item();
            probe.tensor_mut(id).data_mut()[k] = x;

            let central = (fp - fm) / (2.0 * h);
            let ga = analytic.data()[k];
            let mismatch = (ga - central).abs();
            let rel = mismatch / central.abs().max(1.0);
            if rel >= tolerance {
                let forward = (fp - f0) / h;
                let backward = (f0 - fm) / h;
                if (forward - backward).abs() >= mismatch {
                    check.kinks += 1;
                    continue;
                }
            }
            check.checked += 1;
            check.max_rel_error = check.max_rel_error.max(rel);
        }
        tensors.push(check);
    }
    Ok(GradCheckReport { tensors, tolerance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::rc::Rc;

    fn params(entries: &[(&str, Tensor)]) -> ParameterSet {
        let mut p = ParameterSet::new();
        for (n, t) in entries {
            p.insert(*n, t.clone(), true);
        }
        p
    }

    #[test]
    fn relu_sum_away_from_zero() {
        let p = params(&[("x", Tensor::row(&[0.3, -1.2, 2.0, -0.01]))]);
        let r = gradcheck(|t, v| { let y = t.relu(v[0])?; t.sum(y) }, &p, 1e-5, 1e-4).unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.tensors[0].kinks, 0);
    }

    #[test]
    fn relu_kink_is_excluded() {
        let p = params(&[("x", Tensor::row(&[0.0, 1.0]))]);
        let r = gradcheck(|t, v| { let y = t.relu(v[0])?; t.sum(y) }, &p, 1e-5, 1e-4).unwrap();
        assert!(r.passed());
        assert_eq!(r.tensors[0].kinks, 1);
        assert_eq!(r.tensors[0].checked, 1);
    }

    #[test]
    fn softmax_then_mse() {
        let p = params(&[
            ("x", Tensor::from_vec(2, 3, vec![0.1, -0.4, 1.3, 2.0, 0.0, -1.0])),
            ("y", Tensor::from_vec(2, 3, vec![0.2, 0.3, 0.5, 0.9, 0.05, 0.05])),
        ]);
        let r = gradcheck(|t, v| { let s = t.row_softmax(v[0])?; t.mse(s, v[1]) }, &p, 1e-5, 1e-4).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn every_operator_against_finite_differences() {
        let p = params(&[
            ("a", Tensor::from_vec(3, 4, (0..12).map(|i| ((i * 7 % 11) as f64 - 5.0) / 4.0).collect())),
            ("w", Tensor::from_vec(4, 2, (0..8).map(|i| ((i * 3 % 5) as f64 - 2.0) / 3.0).collect())),
            ("bias", Tensor::row(&[0.3, -0.2])),
            ("gamma", Tensor::row(&[1.1, 0.7])),
            ("beta", Tensor::row(&[0.05, -0.1])),
            ("c", Tensor::column(&[0.5, -1.5, 2.0])),
        ]);
        let f = |t: &mut Tape, v: &[Var]| -> Result<Var, TensorError> {
            let seg: Rc<[usize]> = Rc::from(vec![0, 1, 0, 2, 1]);
            let x = t.matmul(v[0], v[1])?;
            let x = t.add_row(x, v[2])?;
            let s = t.sigmoid(x)?;
            let sp = t.softplus(x)?;
            let m = t.mul(s, sp)?;
            let d = t.sub(m, x)?;
            let d = t.mul_col(d, v[5])?;
            let ln = t.layer_norm(d, v[3], v[4])?;
            let g = t.gather_rows(ln, Rc::from(vec![2, 0, 1, 1, 2]))?;
            let sm = t.segment_softmax(g, seg.clone(), 3)?;
            let weighted = t.mul(sm, g)?;
            let agg = t.segment_sum(weighted, seg, 3)?;
            let both = t.concat_cols(&[agg, ln])?;
            let stacked = t.concat_rows(&[both, both])?;
            let r = t.row_softmax(stacked)?;
            let r = t.affine(r, -2.0, 1.0)?;
            let target = t.constant(Tensor::filled(6, 4, 0.25));
            t.mse(r, target)
        };
        let r = gradcheck(f, &p, 1e-5, 1e-4).unwrap();
        assert!(r.passed(), "{r:#?}");
        assert!(r.tensors.iter().all(|c| c.checked > 0));
    }
}

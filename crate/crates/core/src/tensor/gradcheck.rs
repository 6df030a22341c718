use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

pub const GRAD_EPS: f64 = 1e-5;

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>], track: bool) -> Result<(Graph<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = inputs.iter().map(|t| g.leaf(t.clone(), track)).collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        return Err(Error::NonScalarLoss(g.shape(out).to_vec()));
    }
    if !g.value(out).item().is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    Ok((g, vars, out))
}

/// Compares reverse-mode gradients of the scalar function `f` against
/// central differences, coordinate by coordinate.
///
/// Returns `max |g_fd - g_an| / max(1e-8, |g_fd| + |g_an|)` over every
/// coordinate of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let (mut g, vars, out) = evaluate(&f, inputs, true)?;
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().zip(inputs).map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()))).collect();

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let x0 = input.data()[j];
            probe[i].data_mut()[j] = x0 + eps;
            let plus = evaluate(&f, &probe, false)?;
            let fp = plus.0.value(plus.2).item();
            probe[i].data_mut()[j] = x0 - eps;
            let minus = evaluate(&f, &probe, false)?;
            let fm = minus.0.value(minus.2).item();
            probe[i].data_mut()[j] = x0;

            let fd = (fp - fm) / (2.0 * eps);
            let an = analytic[i].data()[j];
            let err = (fd - an).abs() / (fd.abs() + an.abs()).max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

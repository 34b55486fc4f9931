use super::{Graph, NodeId, Scalar, Tensor};
use crate::error::{Error, Result};

fn check_eps(eps: f64) -> Result<()> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Domain {
            op: "grad_check",
            detail: format!("eps {eps} outside [1e-7, 1e-3]"),
        });
    }
    Ok(())
}

fn analytic<T, F>(build: &F, inputs: &[Tensor<T>]) -> Result<Vec<Tensor<T>>>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[NodeId]) -> Result<NodeId>,
{
    let mut graph = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| graph.param(t.clone())).collect();
    let loss = build(&mut graph, &ids)?;
    let mut grads = graph.backward(loss)?;
    ids.iter()
        .map(|id| {
            grads
                .take(*id)
                .ok_or_else(|| Error::Invalid("missing gradient for input".into()))
        })
        .collect()
}

/// Max relative error of `analytic` against central differences of `build`.
fn compare<T, F>(build: &F, inputs: &[Tensor<T>], analytic: &[Vec<f64>], eps: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[NodeId]) -> Result<NodeId>,
{
    let eval = |values: &[Tensor<T>]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = values.iter().map(|t| g.constant(t.clone())).collect();
        let loss = build(&mut g, &ids)?;
        Ok(g.value(loss).item().as_f64())
    };
    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            let x = inputs[i].data()[j];
            let mut central = |h: f64| -> Result<f64> {
                let step = T::from_f64_lossy(h);
                let (hi, lo) = (x + step, x - step);
                work[i].data_mut()[j] = hi;
                let f_hi = eval(&work)?;
                work[i].data_mut()[j] = lo;
                let f_lo = eval(&work)?;
                work[i].data_mut()[j] = x;
                Ok((f_hi - f_lo) / (hi - lo).as_f64())
            };
            // Richardson extrapolation of two central differences.
            let (d1, d2) = (central(eps)?, central(eps / 2.0)?);
            let numeric = (4.0 * d2 - d1) / 3.0;
            let a = analytic[i][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

fn to_f64<T: Scalar>(grads: &[Tensor<T>]) -> Vec<Vec<f64>> {
    grads.iter().map(|g| g.data().iter().map(|v| v.as_f64()).collect()).collect()
}

/// Compares the analytic gradient of a scalar graph against extrapolated
/// central finite differences (steps `eps` and `eps / 2`) for every element of every input. Returns the maximum of
/// `|a - f| / max(|a|, |f|, 1e-8)`.
///
/// `build` records the graph given one node per entry of `inputs` and
/// returns the scalar loss node.
pub fn grad_check<T, F>(build: F, inputs: &[Tensor<T>], eps: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[NodeId]) -> Result<NodeId>,
{
    check_eps(eps)?;
    let grads = analytic(&build, inputs)?;
    compare(&build, inputs, &to_f64(&grads), eps)
}

/// Checks single-precision analytic gradients. `build32` and `build64`
/// must record the same graph; the finite-difference reference runs in
/// double precision on `inputs`, and the analytic pass on `inputs` rounded
/// to `f32`.
pub fn grad_check_single<F32, F64>(build32: F32, build64: F64, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F32: Fn(&mut Graph<f32>, &[NodeId]) -> Result<NodeId>,
    F64: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    check_eps(eps)?;
    let single: Vec<Tensor<f32>> = inputs.iter().map(Tensor::cast).collect();
    let rounded: Vec<Tensor<f64>> = single.iter().map(Tensor::cast).collect();
    let grads = analytic(&build32, &single)?;
    compare(&build64, &rounded, &to_f64(&grads), eps)
}

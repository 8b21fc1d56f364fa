//! Central finite-difference verification of tape gradients.

use crate::error::{MathError, MathResult};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

/// Denominator floor for relative errors. With h = 1e-5 a central
/// difference of an O(1) loss carries roughly 1e-10 of roundoff, so smaller
/// gradients are judged on absolute error.
pub const DENOMINATOR_FLOOR: f64 = 1e-6;

/// Multiple of the central-difference roundoff `ε·|f|/h` below which a
/// gradient is indistinguishable from zero. Exact invariances (a loss that
/// ignores a shared shift, say) have true gradient 0 while the numeric
/// estimate is pure roundoff; the floor compares those in absolute terms.
pub const ROUNDOFF_FLOOR_FACTOR: f64 = 1e4;

#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateCheck {
    /// Which parameter tensor.
    pub tensor: usize,
    /// Flat index inside that tensor.
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub coordinates: Vec<CoordinateCheck>,
    pub max_relative_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_relative_error < self.tolerance
    }

    pub fn worst(&self) -> Option<&CoordinateCheck> {
        self.coordinates
            .iter()
            .max_by(|a, b| a.relative_error.total_cmp(&b.relative_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_with_floor(analytic, numeric, DENOMINATOR_FLOOR)
}

fn relative_error_with_floor(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Denominator floor for a probe whose two evaluations were `fp` and `fm`.
pub fn roundoff_floor(fp: f64, fm: f64, h: f64) -> f64 {
    let noise = f64::EPSILON * fp.abs().max(fm.abs()) / h;
    DENOMINATOR_FLOOR.max(ROUNDOFF_FLOOR_FACTOR * noise)
}

/// Checks a scalar function of one parameter tensor.
pub fn gradient_check<F>(f: F, params: &Tensor, h: f64, tol: f64) -> MathResult<GradCheckReport>
where
    F: Fn(&mut Graph, NodeId) -> MathResult<NodeId>,
{
    gradient_check_many(
        |g, ids| f(g, ids[0]),
        std::slice::from_ref(params),
        h,
        tol,
        usize::MAX,
    )
}

/// Checks a scalar function of several parameter tensors.
///
/// At most `max_per_tensor` coordinates of each tensor are probed, spread
/// evenly over its flat index range.
pub fn gradient_check_many<F>(
    f: F,
    params: &[Tensor],
    h: f64,
    tol: f64,
    max_per_tensor: usize,
) -> MathResult<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> MathResult<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.param(p.clone())).collect();
    let root = f(&mut g, &ids)?;
    g.backward(root)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(params)
        .map(|(&id, p)| {
            g.grad_data(id)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; p.len()])
        })
        .collect();

    let mut coordinates = Vec::new();
    let mut probe_counter = 0usize;
    for (t, p) in params.iter().enumerate() {
        for index in probe_indices(p.len(), max_per_tensor) {
            let eval = |delta: f64| -> MathResult<f64> {
                let mut shifted = params.to_vec();
                let mut data = shifted[t].data().to_vec();
                data[index] += delta;
                shifted[t] = Tensor::new(p.shape().to_vec(), data)
                    .map_err(|_| MathError::Probe { coordinate: probe_counter })?;
                let mut pg = Graph::new();
                let pids: Vec<NodeId> = shifted.into_iter().map(|s| pg.constant(s)).collect();
                let out = f(&mut pg, &pids).map_err(|e| match e {
                    MathError::NonFinite(_) | MathError::Domain(_) => {
                        MathError::Probe { coordinate: probe_counter }
                    }
                    other => other,
                })?;
                let v = pg.value(out).item();
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(MathError::Probe { coordinate: probe_counter })
                }
            };
            let (fp, fm) = (eval(h)?, eval(-h)?);
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[t][index];
            coordinates.push(CoordinateCheck {
                tensor: t,
                index,
                analytic: a,
                numeric,
                relative_error: relative_error_with_floor(a, numeric, roundoff_floor(fp, fm, h)),
            });
            probe_counter += 1;
        }
    }
    let max_relative_error = coordinates
        .iter()
        .map(|c| c.relative_error)
        .fold(0.0, f64::max);
    Ok(GradCheckReport {
        coordinates,
        max_relative_error,
        tolerance: tol,
    })
}

fn probe_indices(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        return (0..len).collect();
    }
    let mut out: Vec<usize> = (0..max).map(|i| i * len / max).collect();
    out.dedup();
    out
}

//! Central finite-difference validation of analytic gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use twofloat::TwoFloat;

use super::network::{backprop, LossSpec, Network};
use super::signal::ChannelSignal;
use crate::error::{Error, Result};

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-12)
}

/// Max relative error between `analytic[i]` and `(f(p + e_i) - f(p - e_i)) / 2e`
/// over the listed coordinates.
pub fn check_coordinates(
    params: &[f64],
    analytic: &[f64],
    mut eval: impl FnMut(&[f64]) -> Result<f64>,
    epsilon: f64,
    coords: impl IntoIterator<Item = usize>,
) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(Error::invalid("epsilon must be positive"));
    }
    let mut probe = params.to_vec();
    let mut worst: f64 = 0.0;
    for i in coords {
        let orig = probe[i];
        probe[i] = orig + epsilon;
        let plus = eval(&probe)?;
        probe[i] = orig - epsilon;
        let minus = eval(&probe)?;
        probe[i] = orig;
        let numeric = (plus - minus) / (2.0 * epsilon);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

/// Outcome of [`check_coordinates_piecewise`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PiecewiseReport {
    pub max_relative_error: f64,
    pub coordinates: usize,
    /// Coordinates where even the smallest step crossed an activation kink.
    pub kinked: usize,
    pub smallest_step: f64,
    /// Coordinate, analytic value, and numeric value of the worst match.
    pub worst: Option<(usize, f64, f64)>,
}

/// Central differences for piecewise-smooth objectives.
///
/// `eval` returns the loss, in double-double, and the inputs of every activation
/// kink (leaky-ReLU pre-activations); `kinks` returns only the latter and may
/// use cheaper arithmetic. With the sign pattern held fixed, a leaky-ReLU
/// network is affine in any single weight, so a squared loss is exactly
/// quadratic along a coordinate axis until the first pre-activation changes
/// sign, and a central difference inside that range carries rounding error
/// only. Each coordinate estimates the pre-activation slopes from a
/// `min_epsilon` probe, takes half the distance to the nearest predicted root
/// (capped at `max_epsilon`), and shrinks the step by 10x while either probe
/// still shows a different sign pattern than the base point.
pub fn check_coordinates_piecewise(
    params: &[f64],
    analytic: &[f64],
    mut eval: impl FnMut(&[f64]) -> Result<(TwoFloat, Vec<f64>)>,
    mut kinks: impl FnMut(&[f64]) -> Result<Vec<f64>>,
    max_epsilon: f64,
    min_epsilon: f64,
    coords: impl IntoIterator<Item = usize>,
) -> Result<PiecewiseReport> {
    if !(min_epsilon > 0.0 && max_epsilon >= min_epsilon) {
        return Err(Error::invalid("need 0 < min_epsilon <= max_epsilon"));
    }
    let (_, base) = eval(params)?;
    let base_fast = kinks(params)?;
    let same_signs = |k: &[f64]| k.len() == base.len() && k.iter().zip(&base).all(|(a, b)| (*a >= 0.0) == (*b >= 0.0));
    let mut probe = params.to_vec();
    let mut report = PiecewiseReport {
        smallest_step: max_epsilon,
        ..Default::default()
    };
    for i in coords {
        let orig = probe[i];
        probe[i] = orig + min_epsilon;
        let nudged = kinks(&probe)?;
        let mut eps = max_epsilon;
        for (z, z1) in base_fast.iter().zip(&nudged) {
            let slope = (z1 - z) / min_epsilon;
            if slope != 0.0 {
                eps = eps.min(0.5 * (z / slope).abs());
            }
        }
        eps = eps.max(min_epsilon);
        let numeric = loop {
            let (hi, lo) = (orig + eps, orig - eps);
            probe[i] = hi;
            let (plus, kp) = eval(&probe)?;
            probe[i] = lo;
            let (minus, km) = eval(&probe)?;
            let clean = same_signs(&kp) && same_signs(&km);
            if clean || eps / 10.0 < min_epsilon {
                report.kinked += usize::from(!clean);
                let step = TwoFloat::new_sub(hi, lo);
                break f64::from((plus - minus) / step);
            }
            eps /= 10.0;
        };
        probe[i] = orig;
        report.smallest_step = report.smallest_step.min(eps);
        report.coordinates += 1;
        let err = relative_error(analytic[i], numeric);
        if report.worst.is_none() || err > report.max_relative_error {
            report.max_relative_error = err;
            report.worst = Some((i, analytic[i], numeric));
        }
    }
    Ok(report)
}

/// Relative error of the directional derivative along a random direction;
/// exercises every coordinate at once.
pub fn check_direction(
    params: &[f64],
    analytic: &[f64],
    mut eval: impl FnMut(&[f64]) -> Result<f64>,
    epsilon: f64,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dir: Vec<f64> = (0..params.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
    let dir: Vec<f64> = dir.into_iter().map(|v| v / norm).collect();
    let shifted = |sign: f64| -> Vec<f64> {
        params.iter().zip(&dir).map(|(p, d)| p + sign * epsilon * d).collect()
    };
    let numeric = (eval(&shifted(1.0))? - eval(&shifted(-1.0))?) / (2.0 * epsilon);
    let projected: f64 = analytic.iter().zip(&dir).map(|(g, d)| g * d).sum();
    Ok(relative_error(projected, numeric))
}

/// Which parameters a check perturbs.
#[derive(Debug, Clone, Copy)]
pub enum Coverage {
    All,
    /// Up to `per_tensor` coordinates from every weight and bias tensor.
    Sampled { per_tensor: usize, seed: u64 },
}

pub(crate) fn coverage_coords(tensor_sizes: &[usize], coverage: Coverage) -> Vec<usize> {
    let mut coords = Vec::new();
    let mut offset = 0;
    let mut rng = match coverage {
        Coverage::All => None,
        Coverage::Sampled { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
    };
    for &size in tensor_sizes {
        match (coverage, rng.as_mut()) {
            (Coverage::Sampled { per_tensor, .. }, Some(rng)) if per_tensor < size => {
                let mut picked = sample(rng, size, per_tensor).into_vec();
                picked.sort_unstable();
                coords.extend(picked.into_iter().map(|i| offset + i));
            }
            _ => coords.extend(offset..offset + size),
        }
        offset += size;
    }
    coords
}

pub(crate) fn network_tensor_sizes(net: &Network) -> Vec<usize> {
    net.conv_layers()
        .flat_map(|c| [c.weights.len(), c.bias.len()])
        .collect()
}

/// Perturbs every parameter by `±epsilon` and returns the worst relative error
/// against the analytic gradient.
pub fn finite_diff_check(
    net: &Network,
    input: &ChannelSignal,
    aux: Option<&ChannelSignal>,
    loss: &LossSpec<'_>,
    epsilon: f64,
) -> Result<f64> {
    finite_diff_check_with(net, input, aux, loss, epsilon, Coverage::All)
}

pub fn finite_diff_check_with(
    net: &Network,
    input: &ChannelSignal,
    aux: Option<&ChannelSignal>,
    loss: &LossSpec<'_>,
    epsilon: f64,
    coverage: Coverage,
) -> Result<f64> {
    let analytic = backprop(net, input, aux, loss)?.grads.flatten();
    let params = net.params_flat();
    let mut probe_net = net.clone();
    let coords = coverage_coords(&network_tensor_sizes(net), coverage);
    check_coordinates(
        &params,
        &analytic,
        |p| {
            probe_net.set_params_flat(p)?;
            let y = probe_net.forward(input, aux)?;
            Ok(loss.evaluate(&y)?.0)
        },
        epsilon,
        coords,
    )
}

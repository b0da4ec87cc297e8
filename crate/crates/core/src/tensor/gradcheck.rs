use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Result, Tape, Tensor, TensorError, Var};

fn evaluate<F>(loss_fn: &F, params: &[Tensor]) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let root = loss_fn(&mut tape, &vars)?;
    Ok((tape, vars, root))
}

fn scalar_of<F>(loss_fn: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (tape, _, root) = evaluate(loss_fn, params)?;
    Ok(tape.value(root).item())
}

/// Compares tape gradients with central differences.
///
/// Returns the largest `|analytic − numeric| / max(1, |analytic|)` over at
/// most `samples` coordinates drawn (without replacement, seeded) from all
/// parameters. `loss_fn` must be deterministic: it is evaluated twice on the
/// unperturbed parameters and any difference is an error.
pub fn finite_difference_check<F>(
    loss_fn: F,
    params: &[Tensor],
    epsilon: f64,
    samples: usize,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(TensorError::InvalidArgument(format!(
            "epsilon {epsilon} outside [1e-7, 1e-3]"
        )));
    }
    let (mut tape, vars, root) = evaluate(&loss_fn, params)?;
    let first = tape.value(root).item();
    let second = scalar_of(&loss_fn, params)?;
    if first.to_bits() != second.to_bits() {
        return Err(TensorError::NonDeterministic { first, second });
    }
    tape.backward(root)?;

    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(p, t)| (0..t.len()).map(move |i| (p, i)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: Vec<usize> = if coords.len() <= samples {
        (0..coords.len()).collect()
    } else {
        sample(&mut rng, coords.len(), samples).into_vec()
    };

    let mut worst = 0.0f64;
    let mut perturbed = params.to_vec();
    for idx in chosen {
        let (p, i) = coords[idx];
        let analytic = tape.grad(vars[p]).map_or(0.0, |g| g.data()[i]);
        let original = params[p].data()[i];
        perturbed[p].data_mut()[i] = original + epsilon;
        let plus = scalar_of(&loss_fn, &perturbed)?;
        perturbed[p].data_mut()[i] = original - epsilon;
        let minus = scalar_of(&loss_fn, &perturbed)?;
        perturbed[p].data_mut()[i] = original;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let err = (analytic - numeric).abs() / analytic.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

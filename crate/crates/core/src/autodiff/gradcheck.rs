use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AutodiffError, Graph, Tensor, Var};

/// Denominator floor for relative errors so vanishing gradients compare on
/// an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-7;

/// Which parameter coordinates to perturb.
#[derive(Clone, Copy, Debug)]
pub enum Coordinates {
    All,
    /// `count` coordinates drawn uniformly without replacement across all parameters.
    Sample { count: usize, seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Relative error of each checked coordinate, in check order.
    pub errors: Vec<f64>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<(Graph, Vec<Var>, Var), AutodiffError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, AutodiffError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(AutodiffError::NonScalarLoss(g.shape(out).to_vec()));
    }
    Ok((g, vars, out))
}

/// Compares `backward` against central differences of `f` with step `h`.
///
/// `f` receives one graph variable per entry of `params` and must return a
/// scalar node.
pub fn finite_difference_check<F>(
    f: F,
    params: &[Tensor],
    h: f64,
    coords: Coordinates,
) -> Result<GradCheckReport, AutodiffError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, AutodiffError>,
{
    let (g, vars, out) = evaluate(&f, params)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.get(*v)).collect();
    drop(g);

    let flat: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(p, t)| (0..t.len()).map(move |i| (p, i)))
        .collect();
    let picked: Vec<(usize, usize)> = match coords {
        Coordinates::All => flat,
        Coordinates::Sample { count, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = count.min(flat.len());
            sample(&mut rng, flat.len(), n).into_iter().map(|i| flat[i]).collect()
        }
    };

    let mut work = params.to_vec();
    let mut errors = Vec::with_capacity(picked.len());
    for &(p, i) in &picked {
        let orig = work[p].data()[i];
        work[p].data_mut()[i] = orig + h;
        let (gp, _, op) = evaluate(&f, &work)?;
        let plus = gp.value(op).data()[0];
        work[p].data_mut()[i] = orig - h;
        let (gm, _, om) = evaluate(&f, &work)?;
        let minus = gm.value(om).data()[0];
        work[p].data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        errors.push(relative_error(analytic[p].data()[i], numeric));
    }
    Ok(GradCheckReport {
        max_rel_error: errors.iter().cloned().fold(0.0, f64::max),
        checked: picked.len(),
        errors,
    })
}

//! Central finite-difference gradient checks.
//!
//! The finite-difference side only ever calls the forward closure; it never
//! looks at backward rules, so it serves as an independent oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct CoordCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub coords: Vec<CoordCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.coords.iter().map(|c| c.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&CoordCheck> {
        self.coords
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval_loss<T: Scalar, F>(store: &ParamStore<T>, loss_fn: &F) -> Result<f64>
where
    F: Fn(&mut Graph<T>, &ParamStore<T>) -> Result<Var>,
{
    let mut g = Graph::new();
    let l = loss_fn(&mut g, store)?;
    Ok(g.value(l).item().as_f64())
}

/// Checks `n_coords` parameter coordinates drawn uniformly over all scalars
/// (or only from `only`, when given).
pub fn check_params<T: Scalar, F>(
    store: &ParamStore<T>,
    loss_fn: F,
    n_coords: usize,
    h: f64,
    floor: f64,
    seed: u64,
    only: Option<&[ParamId]>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<T>, &ParamStore<T>) -> Result<Var>,
{
    let mut work = store.clone();
    work.zero_grad();
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, &work)?;
    g.backward(loss, &mut work)?;
    let analytic = work.clone();

    let pool: Vec<(ParamId, usize)> = work
        .iter()
        .filter(|(id, _)| only.is_none_or(|o| o.contains(id)))
        .flat_map(|(id, p)| (0..p.value.len()).map(move |j| (id, j)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords = Vec::with_capacity(n_coords);
    for _ in 0..n_coords.min(pool.len()) {
        let (id, j) = pool[rng.random_range(0..pool.len())];
        let orig = work.value(id).data()[j];
        let step = T::from_f64_lossy(h);
        work.value_mut(id).data_mut()[j] = orig + step;
        let up = eval_loss(&work, &loss_fn)?;
        work.value_mut(id).data_mut()[j] = orig - step;
        let down = eval_loss(&work, &loss_fn)?;
        work.value_mut(id).data_mut()[j] = orig;
        // the perturbation actually applied, after rounding to T
        let applied = ((orig + step).as_f64() - (orig - step).as_f64()).max(f64::MIN_POSITIVE);
        let numeric = (up - down) / applied;
        let a = analytic.get(id).grad[j].as_f64();
        coords.push(CoordCheck {
            param: work.get(id).name.clone(),
            index: j,
            analytic: a,
            numeric,
            rel_err: relative_error(a, numeric, floor),
        });
    }
    Ok(GradCheckReport { coords })
}

/// Checks f32 analytic gradients against central differences of the same
/// model evaluated in f64, so rounding in the finite differences does not
/// mask real errors. `loss32` and `loss64` must build the same function.
#[allow(clippy::too_many_arguments)]
pub fn check_f32_against_f64<F32, F64>(
    store: &ParamStore<f32>,
    loss32: F32,
    loss64: F64,
    n_coords: usize,
    h: f64,
    floor: f64,
    seed: u64,
    only: Option<&[ParamId]>,
) -> Result<GradCheckReport>
where
    F32: Fn(&mut Graph<f32>, &ParamStore<f32>) -> Result<Var>,
    F64: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut work = store.clone();
    work.zero_grad();
    let mut g = Graph::new();
    let loss = loss32(&mut g, &work)?;
    g.backward(loss, &mut work)?;
    let oracle = check_params(&store.cast::<f64>(), loss64, n_coords, h, floor, seed, only)?;
    let coords = oracle
        .coords
        .into_iter()
        .map(|c| {
            let id = work.id(&c.param)?;
            let a = work.get(id).grad[c.index] as f64;
            Ok(CoordCheck {
                analytic: a,
                rel_err: relative_error(a, c.numeric, floor),
                ..c
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GradCheckReport { coords })
}

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::{MarketError, ModelSpec, TimeGrid};
use crate::rng::RandomSpec;

/// Simulated forward paths with the Brownian increments that produced them.
///
/// Storage is path-major: `states[(i * (N + 1) + k) * d + c]`. When fine data is
/// present the coarse increments are the in-order sums of the fine ones and the
/// coarse states are the fine states at `t_{k,0}`.
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    grid: TimeGrid,
    count: usize,
    dim: usize,
    random: RandomSpec,
    states: Vec<f64>,
    increments: Vec<f64>,
    fine: Option<FinePaths>,
}

#[derive(Debug, Clone)]
struct FinePaths {
    substeps: usize,
    /// `[i][m][c]`, `m = 0..=N*J`.
    states: Vec<f64>,
    /// `[i][m][c]`, `m = 0..N*J`.
    increments: Vec<f64>,
}

/// Simulate `count` Euler-Maruyama paths. With `fine`, Brownian increments are
/// drawn on the `J`-substep grid and all fine states are kept; otherwise the
/// increments are drawn directly on the coarse grid.
pub fn simulate(model: &ModelSpec, grid: &TimeGrid, count: usize, random: RandomSpec, fine: bool) -> PathEnsemble {
    if fine {
        simulate_with_substeps(model, grid, count, random, grid.substeps(), true)
    } else {
        simulate_with_substeps(model, grid, count, random, 1, false)
    }
}

/// Path `i` draws from `random.item_rng(i)`, so results are independent of the
/// thread count.
pub fn simulate_with_substeps(
    model: &ModelSpec,
    grid: &TimeGrid,
    count: usize,
    random: RandomSpec,
    substeps: usize,
    keep_fine: bool,
) -> PathEnsemble {
    simulate_block(model, grid, 0, count, random, substeps, keep_fine)
}

/// Paths `first..first + count` of the ensemble that `simulate_with_substeps`
/// would produce, stored as paths `0..count`. Lets large estimators stream.
pub fn simulate_block(
    model: &ModelSpec,
    grid: &TimeGrid,
    first: usize,
    count: usize,
    random: RandomSpec,
    substeps: usize,
    keep_fine: bool,
) -> PathEnsemble {
    let grid = grid.with_substeps(substeps).expect("substeps validated by caller");
    let d = model.dim();
    let draw = |i: usize, fine_incs: &mut [f64]| {
        let mut rng = random.item_rng((first + i) as u64);
        let scale = grid.fine_dt().sqrt();
        for v in fine_incs.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v = z * scale;
        }
    };
    build(model, grid, count, d, random, keep_fine, draw)
}

fn build<F>(
    model: &ModelSpec,
    grid: TimeGrid,
    count: usize,
    d: usize,
    random: RandomSpec,
    keep_fine: bool,
    fill_increments: F,
) -> PathEnsemble
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    let n = grid.steps();
    let j = grid.substeps();
    let per_state = (n + 1) * d;
    let per_inc = n * d;
    let per_fine_state = (n * j + 1) * d;
    let per_fine_inc = n * j * d;
    let mut states = vec![0.0; count * per_state];
    let mut increments = vec![0.0; count * per_inc];

    let run = |i: usize, st: &mut [f64], inc: &mut [f64], fst: Option<&mut [f64]>, finc: &mut [f64]| {
        fill_increments(i, finc);
        integrate_path(model, &grid, finc, st, inc, fst);
    };

    let fine = if keep_fine {
        let mut fine_states = vec![0.0; count * per_fine_state];
        let mut fine_incs = vec![0.0; count * per_fine_inc];
        states
            .par_chunks_mut(per_state)
            .zip(increments.par_chunks_mut(per_inc.max(1)))
            .zip(fine_states.par_chunks_mut(per_fine_state))
            .zip(fine_incs.par_chunks_mut(per_fine_inc.max(1)))
            .enumerate()
            .for_each(|(i, (((st, inc), fst), finc))| run(i, st, inc, Some(fst), finc));
        Some(FinePaths { substeps: j, states: fine_states, increments: fine_incs })
    } else {
        states
            .par_chunks_mut(per_state)
            .zip(increments.par_chunks_mut(per_inc.max(1)))
            .enumerate()
            .for_each_init(
                || vec![0.0; per_fine_inc],
                |scratch, (i, (st, inc))| run(i, st, inc, None, scratch),
            );
        None
    };

    PathEnsemble { grid, count, dim: d, random, states, increments, fine }
}

/// Euler integration of one path from its fine increments.
fn integrate_path(
    model: &ModelSpec,
    grid: &TimeGrid,
    fine_incs: &[f64],
    states: &mut [f64],
    incs: &mut [f64],
    mut fine_states: Option<&mut [f64]>,
) {
    let d = model.dim();
    let j_sub = grid.substeps();
    let dt = grid.fine_dt();
    let mut x = model.initial_state();
    states[..d].copy_from_slice(&x);
    if let Some(fs) = fine_states.as_deref_mut() {
        fs[..d].copy_from_slice(&x);
    }
    for k in 0..grid.steps() {
        let coarse = &mut incs[k * d..(k + 1) * d];
        coarse.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..j_sub {
            let m = k * j_sub + j;
            let dw = &fine_incs[m * d..(m + 1) * d];
            for (c, w) in coarse.iter_mut().zip(dw) {
                *c += w;
            }
            model.euler_step(&mut x, dw, dt);
            if let Some(fs) = fine_states.as_deref_mut() {
                fs[(m + 1) * d..(m + 2) * d].copy_from_slice(&x);
            }
        }
        states[(k + 1) * d..(k + 2) * d].copy_from_slice(&x);
    }
}

/// States, increments and the optional fine states and increments.
pub(crate) type RawParts<'a> = (&'a [f64], &'a [f64], Option<(&'a [f64], &'a [f64])>);

impl PathEnsemble {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn steps(&self) -> usize {
        self.grid.steps()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn random(&self) -> RandomSpec {
        self.random
    }

    pub fn has_fine(&self) -> bool {
        self.fine.is_some()
    }

    /// Fine substep count when fine data is present.
    pub fn substeps(&self) -> Option<usize> {
        self.fine.as_ref().map(|f| f.substeps)
    }

    pub fn state(&self, i: usize, k: usize) -> &[f64] {
        let off = (i * (self.steps() + 1) + k) * self.dim;
        &self.states[off..off + self.dim]
    }

    pub fn increment(&self, i: usize, k: usize) -> &[f64] {
        let off = (i * self.steps() + k) * self.dim;
        &self.increments[off..off + self.dim]
    }

    /// `X_{t_{k,j}}` for `j = 0..=J`.
    pub fn fine_state(&self, i: usize, k: usize, j: usize) -> Option<&[f64]> {
        let f = self.fine.as_ref()?;
        let m = k * f.substeps + j;
        let off = (i * (self.steps() * f.substeps + 1) + m) * self.dim;
        Some(&f.states[off..off + self.dim])
    }

    /// `W_{t_{k,j+1}} - W_{t_{k,j}}` for `j = 0..J`.
    pub fn fine_increment(&self, i: usize, k: usize, j: usize) -> Option<&[f64]> {
        let f = self.fine.as_ref()?;
        let m = k * f.substeps + j;
        let off = (i * self.steps() * f.substeps + m) * self.dim;
        Some(&f.increments[off..off + self.dim])
    }

    /// Coarse states at step `k` for the given paths, one row per path.
    pub fn gather_states(&self, k: usize, paths: &[usize]) -> Array2<f64> {
        let d = self.dim;
        let mut out = Array2::zeros((paths.len(), d));
        for (row, &i) in paths.iter().enumerate() {
            out.row_mut(row).as_slice_mut().unwrap().copy_from_slice(self.state(i, k));
        }
        out
    }

    /// Coarse states of every path at step `k`.
    pub fn states_at(&self, k: usize) -> Array2<f64> {
        let all: Vec<usize> = (0..self.count).collect();
        self.gather_states(k, &all)
    }

    /// Coarse increments `dW_k` for the given paths.
    pub fn gather_increments(&self, k: usize, paths: &[usize]) -> Array2<f64> {
        let mut out = Array2::zeros((paths.len(), self.dim));
        for (row, &i) in paths.iter().enumerate() {
            out.row_mut(row).as_slice_mut().unwrap().copy_from_slice(self.increment(i, k));
        }
        out
    }

    /// Fine states `X_{t_{k,j}}` and increments for the given paths.
    pub fn gather_fine(&self, k: usize, j: usize, paths: &[usize]) -> Option<(Array2<f64>, Array2<f64>)> {
        self.fine.as_ref()?;
        let mut xs = Array2::zeros((paths.len(), self.dim));
        let mut dws = Array2::zeros((paths.len(), self.dim));
        for (row, &i) in paths.iter().enumerate() {
            xs.row_mut(row).as_slice_mut().unwrap().copy_from_slice(self.fine_state(i, k, j)?);
            dws.row_mut(row).as_slice_mut().unwrap().copy_from_slice(self.fine_increment(i, k, j)?);
        }
        Some((xs, dws))
    }

    /// Re-integrate every path on a coarser fine level using summed increments
    /// (common random numbers across levels). `level` must divide the stored `J`.
    pub fn coarsen(&self, model: &ModelSpec, level: usize) -> Result<PathEnsemble, MarketError> {
        let f = self.fine.as_ref().ok_or(MarketError::IncompatibleRefinement {
            requested: level,
            available: 0,
        })?;
        if level == 0 || f.substeps % level != 0 {
            return Err(MarketError::IncompatibleRefinement { requested: level, available: f.substeps });
        }
        let ratio = f.substeps / level;
        let d = self.dim;
        let n = self.steps();
        let src_per = n * f.substeps * d;
        let grid = self.grid.with_substeps(level)?;
        let fill = |i: usize, out: &mut [f64]| {
            let src = &f.increments[i * src_per..(i + 1) * src_per];
            for m in 0..n * level {
                let dst = &mut out[m * d..(m + 1) * d];
                dst.iter_mut().for_each(|v| *v = 0.0);
                for r in 0..ratio {
                    let s = &src[(m * ratio + r) * d..(m * ratio + r + 1) * d];
                    for (a, b) in dst.iter_mut().zip(s) {
                        *a += b;
                    }
                }
            }
        };
        Ok(build(model, grid, self.count, d, self.random, true, fill))
    }

    pub(crate) fn raw_parts(&self) -> RawParts<'_> {
        (
            &self.states,
            &self.increments,
            self.fine.as_ref().map(|f| (f.states.as_slice(), f.increments.as_slice())),
        )
    }

    pub(crate) fn from_raw_parts(
        grid: TimeGrid,
        count: usize,
        dim: usize,
        random: RandomSpec,
        states: Vec<f64>,
        increments: Vec<f64>,
        fine: Option<(Vec<f64>, Vec<f64>)>,
    ) -> Self {
        let fine = fine.map(|(states, increments)| FinePaths { substeps: grid.substeps(), states, increments });
        Self { grid, count, dim, random, states, increments, fine }
    }
}

//! Projected-gradient learning of the filter family, and restoration.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::piggyback::{filter_grad, piggyback_pd, AdjointDrive, AdjointState, PiggybackConfig, SaddleState};
use super::{project_sum_mu, project_symmetry, FilterFamily, FilterPair};
use crate::error::{Error, Result};
use crate::imgcore::{DegradationOp, Image};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TvTrainConfig {
    /// Outer step `α`.
    pub alpha: f64,
    /// Outer iterations `I`.
    pub outer_iters: usize,
    /// Primal-dual iterations `K` per outer iteration.
    pub inner_iters: usize,
    pub lambda: f64,
    pub theta: f64,
}

impl Default for TvTrainConfig {
    fn default() -> Self {
        Self {
            alpha: 100.0,
            outer_iters: 500,
            inner_iters: 2000,
            lambda: 1.0,
            theta: 1.0,
        }
    }
}

impl TvTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid("alpha", "outer step must be nonnegative"));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid("lambda", "regularization weight must be positive"));
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::invalid("theta", "extrapolation must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Stable primal-dual steps for `fam` on `shape`.
    pub fn piggyback(&self, fam: &FilterFamily, shape: (usize, usize)) -> Result<PiggybackConfig> {
        let mut cfg = PiggybackConfig::stable(fam, shape, self.inner_iters, self.lambda)?;
        cfg.theta = self.theta;
        Ok(cfg)
    }
}

#[derive(Debug, Clone)]
pub struct TrainedTv {
    pub family: FilterFamily,
    /// `(1/sn) Σ ½‖u_j − g_j‖²` at iterations `0..=outer_iters`.
    pub loss_history: Vec<f64>,
}

struct Sample {
    saddle: SaddleState,
    adjoint: AdjointState,
}

/// Outer loop with per-sample warm starts of both saddle and adjoint states.
pub struct TvTrainer<'a> {
    samples: &'a [(Image, Image)],
    op: &'a DegradationOp,
    cfg: TvTrainConfig,
    family: FilterFamily,
    states: Vec<Sample>,
    iteration: usize,
    loss_history: Vec<f64>,
}

impl<'a> TvTrainer<'a> {
    pub fn new(samples: &'a [(Image, Image)], op: &'a DegradationOp, init: FilterFamily, cfg: TvTrainConfig) -> Result<Self> {
        cfg.validate()?;
        init.validate()?;
        if samples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let shape = samples[0].0.shape();
        let expected = op.output_shape(shape)?;
        for (g, f) in samples {
            if g.shape() != shape {
                return Err(Error::ShapeMismatch {
                    expected: shape,
                    actual: g.shape(),
                });
            }
            if f.shape() != expected {
                return Err(Error::ShapeMismatch {
                    expected,
                    actual: f.shape(),
                });
            }
        }
        let l = init.num_filters();
        let states = samples
            .iter()
            .map(|(_, f)| Sample {
                saddle: SaddleState::new(op.initial_guess(f), l),
                adjoint: AdjointState::zeros(shape.0, shape.1, l),
            })
            .collect();
        Ok(Self {
            samples,
            op,
            cfg,
            family: project_symmetry(&project_sum_mu(&init))?,
            states,
            iteration: 0,
            loss_history: Vec::new(),
        })
    }

    pub fn family(&self) -> &FilterFamily {
        &self.family
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn loss_history(&self) -> &[f64] {
        &self.loss_history
    }

    /// Runs the piggyback solver on every sample; returns the mean loss and,
    /// when `with_grad`, the per-sample filter gradients in sample order.
    fn sweep(&mut self, with_grad: bool) -> Result<Vec<Vec<FilterPair>>> {
        let shape = self.samples[0].0.shape();
        let pd = self.cfg.piggyback(&self.family, shape)?;
        let fam = &self.family;
        let op = self.op;
        let results: Vec<(f64, Option<Vec<FilterPair>>)> = self
            .states
            .par_iter_mut()
            .zip(self.samples.par_iter())
            .map(|(st, (g, f))| {
                let drive = if with_grad { AdjointDrive::Target(g) } else { AdjointDrive::Off };
                piggyback_pd(fam, op, f, drive, &pd, &mut st.saddle, &mut st.adjoint)?;
                let loss = 0.5 * st.saddle.u.sub(g).norm_sq();
                let grad = if with_grad {
                    Some(filter_grad(fam, &st.saddle, &st.adjoint)?)
                } else {
                    None
                };
                Ok((loss, grad))
            })
            .collect::<Result<_>>()?;
        let n = (shape.0 * shape.1) as f64;
        let s = self.samples.len() as f64;
        let loss = results.iter().map(|r| r.0).sum::<f64>() / (s * n);
        if !loss.is_finite() {
            return Err(Error::Divergence {
                iteration: self.iteration,
                reason: format!("non-finite upper loss with outer step alpha = {:e}", self.cfg.alpha),
            });
        }
        self.loss_history.push(loss);
        Ok(results.into_iter().filter_map(|r| r.1).collect())
    }

    /// One outer iteration; returns the loss at the family it started from.
    pub fn step(&mut self) -> Result<f64> {
        let grads = self.sweep(true)?;
        let shape = self.samples[0].0.shape();
        let scale = 1.0 / (self.samples.len() * shape.0 * shape.1) as f64;
        let l = self.family.num_filters();
        let mut total = vec![FilterPair::zeros(); l];
        // fixed sample order keeps the reduction reproducible
        for g in &grads {
            for (t, gi) in total.iter_mut().zip(g) {
                for (x, y) in t.f1.taps_mut().iter_mut().zip(gi.f1.taps()) {
                    *x += scale * y;
                }
                for (x, y) in t.f2.taps_mut().iter_mut().zip(gi.f2.taps()) {
                    *x += scale * y;
                }
            }
        }
        let stepped = self.family.stepped(self.cfg.alpha, &total)?;
        self.family = project_symmetry(&project_sum_mu(&stepped))?;
        self.iteration += 1;
        Ok(*self.loss_history.last().expect("loss recorded"))
    }

    pub fn run(mut self) -> Result<TrainedTv> {
        while self.iteration < self.cfg.outer_iters {
            self.step()?;
        }
        self.sweep(false)?;
        Ok(TrainedTv {
            family: self.family,
            loss_history: self.loss_history,
        })
    }
}

/// Learns a filter family from `(g_j, f_j)` pairs.
pub fn train_tv_filters(
    samples: &[(Image, Image)],
    op: &DegradationOp,
    init: FilterFamily,
    cfg: &TvTrainConfig,
) -> Result<TrainedTv> {
    TvTrainer::new(samples, op, init, *cfg)?.run()
}

/// TV-regularized restoration with the given filters; `iterations`
/// primal-dual steps from the task's initial guess.
pub fn restore_tv(f: &Image, op: &DegradationOp, fam: &FilterFamily, iterations: usize, lambda: f64) -> Result<Image> {
    let u0 = op.initial_guess(f);
    let shape = u0.shape();
    let cfg = PiggybackConfig::stable(fam, shape, iterations, lambda)?;
    let mut saddle = SaddleState::new(u0, fam.num_filters());
    let mut adjoint = AdjointState::zeros(1, 1, 0);
    piggyback_pd(fam, op, f, AdjointDrive::Off, &cfg, &mut saddle, &mut adjoint)?;
    Ok(saddle.u)
}

//! Outer projected-gradient loop over the training set.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{grad_alpha, grad_kernel, project_params, solve_adjoint_cg, solve_lower, CgConfig, FoEParams, LowerSolveConfig};
use crate::error::{Error, Result};
use crate::imgcore::{DegradationOp, Image};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FoeTrainConfig {
    /// Outer gradient step.
    pub tau: f64,
    pub outer_iters: usize,
    pub lower: LowerSolveConfig,
    pub cg: CgConfig,
}

impl Default for FoeTrainConfig {
    fn default() -> Self {
        Self {
            tau: 1e-3,
            outer_iters: 100,
            lower: LowerSolveConfig::default(),
            cg: CgConfig::default(),
        }
    }
}

impl FoeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::invalid("tau", "outer step must be positive"));
        }
        if !(self.cg.tol > 0.0) {
            return Err(Error::invalid("cg.tol", "tolerance must be positive"));
        }
        if self.cg.shift < 0.0 {
            return Err(Error::invalid("cg.shift", "shift must be nonnegative"));
        }
        self.lower.validate()
    }
}

#[derive(Debug, Clone)]
pub struct TrainStateFoE {
    pub params: FoEParams,
    /// One warm start per training pair.
    pub warm_starts: Vec<Image>,
    pub tau: f64,
    pub iteration: usize,
    pub loss_history: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainedFoE {
    pub params: FoEParams,
    /// Upper loss at iterations `0..=outer_iters`.
    pub loss_history: Vec<f64>,
}

struct SampleGrad {
    loss: f64,
    u: Image,
    alphas: Vec<f64>,
    kernels: Vec<Vec<f64>>,
}

/// Steps Algorithm-2 style training one outer iteration at a time.
pub struct FoeTrainer<'a> {
    samples: &'a [(Image, Image)],
    op: &'a DegradationOp,
    cfg: FoeTrainConfig,
    state: TrainStateFoE,
}

impl<'a> FoeTrainer<'a> {
    /// `samples` holds `(g_j, f_j)` pairs degraded by the shared `op`.
    pub fn new(samples: &'a [(Image, Image)], op: &'a DegradationOp, init: FoEParams, cfg: FoeTrainConfig) -> Result<Self> {
        cfg.validate()?;
        if samples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let shape = samples[0].0.shape();
        for (g, f) in samples {
            if g.shape() != shape {
                return Err(Error::ShapeMismatch {
                    expected: shape,
                    actual: g.shape(),
                });
            }
            let expected = op.output_shape(shape)?;
            if f.shape() != expected {
                return Err(Error::ShapeMismatch {
                    expected,
                    actual: f.shape(),
                });
            }
        }
        let warm_starts = samples.iter().map(|(_, f)| op.initial_guess(f)).collect();
        Ok(Self {
            samples,
            op,
            cfg,
            state: TrainStateFoE {
                params: project_params(&init)?,
                warm_starts,
                tau: cfg.tau,
                iteration: 0,
                loss_history: Vec::new(),
            },
        })
    }

    pub fn state(&self) -> &TrainStateFoE {
        &self.state
    }

    fn solve_sample(&self, j: usize, with_grad: bool) -> Result<SampleGrad> {
        let params = &self.state.params;
        let (g, f) = &self.samples[j];
        let u = solve_lower(f, self.op, params, &self.state.warm_starts[j], &self.cfg.lower)?.u;
        let residual = g.sub(&u);
        let loss = 0.5 * residual.norm_sq();
        if !with_grad {
            return Ok(SampleGrad {
                loss,
                u,
                alphas: Vec::new(),
                kernels: Vec::new(),
            });
        }
        let p = solve_adjoint_cg(&u, params, self.op, &residual, &self.cfg.cg)?.solution;
        let n = params.num_filters();
        let alphas = (0..n).map(|l| grad_alpha(&u, &p, params, l)).collect::<Result<_>>()?;
        let kernels = (0..n)
            .map(|l| grad_kernel(&u, &p, params, l).map(|k| k.taps().to_vec()))
            .collect::<Result<_>>()?;
        Ok(SampleGrad { loss, u, alphas, kernels })
    }

    fn sweep(&mut self, with_grad: bool) -> Result<Vec<SampleGrad>> {
        let this = &*self;
        let results: Vec<SampleGrad> = (0..self.samples.len())
            .into_par_iter()
            .map(|j| this.solve_sample(j, with_grad))
            .collect::<Result<_>>()?;
        for (w, r) in self.state.warm_starts.iter_mut().zip(&results) {
            *w = r.u.clone();
        }
        let s = self.samples.len() as f64;
        let loss = results.iter().map(|r| r.loss).sum::<f64>() / s;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                iteration: self.state.iteration,
                reason: format!("non-finite upper loss with outer step tau = {:e}", self.state.tau),
            });
        }
        self.state.loss_history.push(loss);
        Ok(results)
    }

    /// One outer iteration; returns the loss at the parameters it started from.
    pub fn step(&mut self) -> Result<f64> {
        let results = self.sweep(true)?;
        let s = self.samples.len() as f64;
        let tau = self.state.tau;
        let mut next = self.state.params.clone();
        for l in 0..next.num_filters() {
            // summation in sample order keeps the update reproducible
            let ga: f64 = results.iter().map(|r| r.alphas[l]).sum::<f64>() / s;
            next.alphas[l] -= tau * ga;
            let taps = next.kernels[l].taps_mut();
            for (t, tap) in taps.iter_mut().enumerate() {
                let gk: f64 = results.iter().map(|r| r.kernels[l][t]).sum::<f64>() / s;
                *tap -= tau * gk;
            }
        }
        self.state.params = project_params(&next)?;
        self.state.iteration += 1;
        Ok(*self.state.loss_history.last().expect("loss recorded"))
    }

    /// Runs the remaining outer iterations and evaluates the final loss.
    pub fn run(mut self) -> Result<TrainedFoE> {
        while self.state.iteration < self.cfg.outer_iters {
            self.step()?;
        }
        self.sweep(false)?;
        Ok(TrainedFoE {
            params: self.state.params,
            loss_history: self.state.loss_history,
        })
    }
}

/// Learns FoE parameters from `(g_j, f_j)` pairs.
pub fn train_foe(
    samples: &[(Image, Image)],
    op: &DegradationOp,
    init: FoEParams,
    cfg: &FoeTrainConfig,
) -> Result<TrainedFoE> {
    FoeTrainer::new(samples, op, init, *cfg)?.run()
}

/// Restores `f` with a trained regularizer.
pub fn restore_foe(f: &Image, op: &DegradationOp, params: &FoEParams, cfg: &LowerSolveConfig) -> Result<Image> {
    Ok(solve_lower(f, op, params, &op.initial_guess(f), cfg)?.u)
}

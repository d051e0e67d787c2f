//! Limited-memory BFGS with a backtracking Armijo line search.

use std::collections::VecDeque;

use log::warn;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct LbfgsConfig {
    pub history: usize,
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub armijo_c1: f64,
    pub min_step: f64,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            history: 10,
            max_iterations: 200,
            gradient_tolerance: 1e-6,
            armijo_c1: 1e-4,
            min_step: 1e-16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LbfgsStatus {
    GradientConverged,
    MaxIterations,
    /// The line search could not find a decrease above the minimum step.
    StepUnderflow,
}

#[derive(Debug, Clone)]
pub struct LbfgsReport {
    pub x: Vec<f64>,
    pub loss: f64,
    /// Loss at the start and after every accepted step.
    pub history: Vec<f64>,
    pub iterations: usize,
    pub status: LbfgsStatus,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimizes `objective`, which returns the loss and its gradient.
pub fn minimize<F>(mut objective: F, x0: Vec<f64>, cfg: &LbfgsConfig) -> Result<LbfgsReport>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let mut x = x0;
    let (mut f, mut g) = objective(&x)?;
    if !f.is_finite() {
        return Err(Error::Optimizer("initial loss is not finite".into()));
    }
    let mut memory: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(cfg.history);
    let mut history = vec![f];
    let mut status = LbfgsStatus::MaxIterations;
    let mut iterations = 0;

    while iterations < cfg.max_iterations {
        if dot(&g, &g).sqrt() < cfg.gradient_tolerance {
            status = LbfgsStatus::GradientConverged;
            break;
        }
        let mut d = two_loop(&g, &memory);
        let mut slope = dot(&d, &g);
        if !(slope < 0.0) {
            memory.clear();
            d = g.iter().map(|v| -v).collect();
            slope = dot(&d, &g);
        }
        let mut step = if memory.is_empty() {
            (1.0 / dot(&g, &g).sqrt()).min(1.0)
        } else {
            1.0
        };
        let accepted = loop {
            let x_new: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + step * di).collect();
            let (f_new, g_new) = objective(&x_new)?;
            if f_new.is_finite() && f_new <= f + cfg.armijo_c1 * step * slope {
                break Some((x_new, f_new, g_new));
            }
            step *= 0.5;
            if step < cfg.min_step {
                break None;
            }
        };
        let Some((x_new, f_new, g_new)) = accepted else {
            warn!("line search step underflowed after {iterations} iterations; stopping");
            status = LbfgsStatus::StepUnderflow;
            break;
        };
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
            if memory.len() == cfg.history {
                memory.pop_front();
            }
            memory.push_back((s, y, 1.0 / sy));
        }
        x = x_new;
        f = f_new;
        g = g_new;
        history.push(f);
        iterations += 1;
    }
    if status == LbfgsStatus::MaxIterations && dot(&g, &g).sqrt() < cfg.gradient_tolerance {
        status = LbfgsStatus::GradientConverged;
    }
    Ok(LbfgsReport {
        x,
        loss: f,
        history,
        iterations,
        status,
    })
}

/// `−H·g` from the stored curvature pairs.
fn two_loop(g: &[f64], memory: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q: Vec<f64> = g.to_vec();
    let mut alphas = Vec::with_capacity(memory.len());
    for (s, y, rho) in memory.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = memory.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y, rho), a) in memory.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

//! Central finite-difference gradient checking at 64-bit precision.
//!
//! The finite-difference side only ever evaluates forward values, so it is
//! independent of the backward rules it checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::NamedTensors;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub probes: usize,
    pub step: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            probes: 25,
            step: 1e-5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Probe {
    pub tensor: String,
    pub index: usize,
    pub autodiff: f64,
    pub finite_difference: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub probes: Vec<Probe>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.probes.iter().map(|p| p.rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error() <= tol
    }
}

/// `|auto − fd| / (|fd| + 1e-8)`.
pub fn rel_error(autodiff: f64, fd: f64) -> f64 {
    (autodiff - fd).abs() / (fd.abs() + 1e-8)
}

fn scalar_of(g: &Graph<'_, f64>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.numel() != 1 {
        return Err(Error::contract("gradient check needs a scalar function"));
    }
    Ok(t.data()[0])
}

/// Checks `f(inputs)` against finite differences on random coordinates of
/// the inputs flagged `requires_grad`.
pub fn check_fn<F>(inputs: &[Tensor<f64>], f: F, cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&Graph<'a, f64>, &[Var]) -> Result<Var>,
{
    let eval = |ins: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.param(t)).collect();
        let out = f(&g, &vars)?;
        scalar_of(&g, out)
    };
    let grads: Vec<Option<Tensor<f64>>> = {
        let g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
        let out = f(&g, &vars)?;
        g.backward(out)?;
        vars.iter().map(|&v| g.grad(v)).collect()
    };
    let candidates: Vec<usize> = (0..inputs.len()).filter(|&i| inputs[i].requires_grad()).collect();
    if candidates.is_empty() {
        return Err(Error::contract("no input requires grad"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut probes = Vec::with_capacity(cfg.probes);
    for _ in 0..cfg.probes {
        let i = candidates[rng.random_range(0..candidates.len())];
        let j = rng.random_range(0..inputs[i].numel());
        let mut plus = inputs.to_vec();
        plus[i].data_mut()[j] += cfg.step;
        let mut minus = inputs.to_vec();
        minus[i].data_mut()[j] -= cfg.step;
        let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * cfg.step);
        let auto = grads[i].as_ref().map_or(0.0, |g| g.data()[j]);
        probes.push(Probe {
            tensor: format!("input{i}"),
            index: j,
            autodiff: auto,
            finite_difference: fd,
            rel_error: rel_error(auto, fd),
        });
    }
    Ok(GradCheckReport { probes })
}

/// Checks a model-level loss against finite differences on random
/// coordinates of the model's trainable tensors.
pub fn check_model<M, F>(model: &M, loss: F, cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    M: NamedTensors<f64> + Clone,
    F: for<'a> Fn(&Graph<'a, f64>, &'a M) -> Result<Var>,
{
    let eval = |m: &M| -> Result<f64> {
        let g = Graph::new();
        let out = loss(&g, m)?;
        scalar_of(&g, out)
    };
    let grads = {
        let g = Graph::new();
        let out = loss(&g, model)?;
        g.backward(out)?;
        super::Gradients::collect(&g, model.named_tensors())
    };
    let names: Vec<(String, usize)> = model
        .named_tensors()
        .into_iter()
        .filter(|(_, t)| t.requires_grad())
        .map(|(n, t)| (n, t.numel()))
        .collect();
    if names.is_empty() {
        return Err(Error::contract("model has no trainable tensors"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut probes = Vec::with_capacity(cfg.probes);
    for _ in 0..cfg.probes {
        let (name, numel) = &names[rng.random_range(0..names.len())];
        let j = rng.random_range(0..*numel);
        let perturbed = |delta: f64| -> Result<f64> {
            let mut m = model.clone();
            for (n, t) in m.named_tensors_mut() {
                if &n == name {
                    t.data_mut()[j] += delta;
                }
            }
            eval(&m)
        };
        let fd = (perturbed(cfg.step)? - perturbed(-cfg.step)?) / (2.0 * cfg.step);
        let auto = grads.get(name).map_or(0.0, |g| g.data()[j]);
        probes.push(Probe {
            tensor: name.clone(),
            index: j,
            autodiff: auto,
            finite_difference: fd,
            rel_error: rel_error(auto, fd),
        });
    }
    Ok(GradCheckReport { probes })
}

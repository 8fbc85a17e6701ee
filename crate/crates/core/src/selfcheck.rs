//! Finite-difference self-check of every differentiable op and of the full
//! three-branch loss, on seeded random instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::masks::Thresholds;
use crate::seenet::{
    total_loss, BlockSpec, LabelVector, MaskPolicy, ModelConfig, SeeNetModel, Strategy,
};
use crate::tensor::{GradCheck, GradCheckReport, Graph, MaskMap, Tensor, Var};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseSummary {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub seed: u64,
    pub trials: usize,
    pub cases: Vec<CaseSummary>,
    pub max_rel_error: f64,
    pub passed: bool,
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn targets(m: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(&[m], |_| if rng.random_bool(0.5) { 1.0 } else { 0.0 })
}

/// Small architecture used for the whole-network check.
pub fn check_config(num_classes: usize) -> ModelConfig {
    ModelConfig {
        in_channels: 3,
        backbone: vec![
            BlockSpec {
                channels: 4,
                stride: 1,
            },
            BlockSpec {
                channels: 5,
                stride: 2,
            },
        ],
        branch_channels: 4,
        branch_depth: 3,
        num_classes,
    }
}

struct Accumulator {
    cases: Vec<CaseSummary>,
}

impl Accumulator {
    fn add(&mut self, name: &str, r: GradCheckReport) {
        let case = match self.cases.iter_mut().find(|c| c.name == name) {
            Some(c) => c,
            None => {
                self.cases.push(CaseSummary {
                    name: name.to_string(),
                    max_rel_error: 0.0,
                    checked: 0,
                    skipped: 0,
                });
                self.cases.last_mut().expect("just pushed")
            }
        };
        case.max_rel_error = case.max_rel_error.max(r.max_rel_error);
        case.checked += r.checked;
        case.skipped += r.skipped;
    }
}

fn subset(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if n <= k {
        return (0..n).collect();
    }
    rand::seq::index::sample(rng, n, k).into_vec()
}

fn one_trial(trial_seed: u64, check: &GradCheck, acc: &mut Accumulator) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(trial_seed);

    // conv2d: input, weight and bias in turn.
    let stride = rng.random_range(1..=2);
    let pad = rng.random_range(0..=1);
    let x = uniform(&[2, 5, 5], -1.0, 1.0, &mut rng);
    let w = uniform(&[3, 2, 3, 3], -0.5, 0.5, &mut rng);
    let b = uniform(&[3], -0.5, 0.5, &mut rng);
    let t = targets(3, &mut rng);
    let head = |g: &mut Graph<f64>, y: Var, t: &Tensor<f64>| -> Result<Var> {
        let p = g.global_avg_pool(y)?;
        g.bce_multilabel(p, t)
    };
    let (xc, wc, bc) = (x.clone(), w.clone(), b.clone());
    let r = check.run(
        |g, v| {
            let (w, b) = (g.constant(wc.clone()), g.constant(bc.clone()));
            let y = g.conv2d(v, w, b, stride, pad)?;
            head(g, y, &t)
        },
        &x,
    )?;
    acc.add("conv2d/input", r);
    let r = check.run(
        |g, v| {
            let (x, b) = (g.constant(xc.clone()), g.constant(bc.clone()));
            let y = g.conv2d(x, v, b, stride, pad)?;
            head(g, y, &t)
        },
        &w,
    )?;
    acc.add("conv2d/weight", r);
    let r = check.run(
        |g, v| {
            let (x, w) = (g.constant(xc.clone()), g.constant(wc.clone()));
            let y = g.conv2d(x, w, v, stride, pad)?;
            head(g, y, &t)
        },
        &b,
    )?;
    acc.add("conv2d/bias", r);

    // global average pooling
    let x = uniform(&[4, 3, 5], -2.0, 2.0, &mut rng);
    let t = targets(4, &mut rng);
    acc.add("global_avg_pool", check.run(|g, v| head(g, v, &t), &x)?);

    // multi-label BCE, including large logits
    let z = uniform(&[5], -12.0, 12.0, &mut rng);
    let t = targets(5, &mut rng);
    acc.add(
        "bce_multilabel",
        check.run(|g, v| g.bce_multilabel(v, &t), &z)?,
    );

    // C-ReLU with every mask value present
    let mut mv: Vec<i8> = (0..16).map(|_| rng.random_range(-1..=1)).collect();
    mv[..3].copy_from_slice(&[-1, 0, 1]);
    let mask = MaskMap::new(4, 4, mv)?;
    let x = uniform(&[3, 4, 4], -1.0, 1.0, &mut rng);
    let t = targets(3, &mut rng);
    let r = check.run(
        |g, v| {
            let y = g.c_relu(v, &mask)?;
            head(g, y, &t)
        },
        &x,
    )?;
    acc.add("c_relu", r);

    // Full three-branch loss w.r.t. parameters from every part of the network.
    let m = 3;
    let model: SeeNetModel<f64> = SeeNetModel::new(check_config(m), trial_seed)?;
    let image = uniform(&[3, 9, 9], 0.0, 1.0, &mut rng);
    let mut classes: Vec<usize> = (0..m).filter(|_| rng.random_bool(0.5)).collect();
    if classes.is_empty() {
        classes.push(rng.random_range(0..m));
    }
    let labels = LabelVector::from_classes(&classes, m)?;
    let policy = MaskPolicy::new(Strategy::Seenet, Thresholds::default())?;
    let params = model.params();
    let n_params = params.len();
    // backbone weights, then the first conv and classifier of each branch
    let per_branch = 2 * (model.config().branch_depth + 1);
    let base = 2 * model.config().backbone.len();
    let mut picks = vec![0, 2];
    for br in 0..3 {
        picks.push(base + br * per_branch);
        picks.push(base + br * per_branch + per_branch - 2);
    }
    for p in picks.into_iter().filter(|&p| p < n_params) {
        let x = params[p].clone();
        let coords = subset(x.numel(), 6, &mut rng);
        let r = check.clone().with_coords(coords).run(
            |g, v| {
                let mut vars = model.register_frozen(g);
                vars.replace(p, v);
                let pass = model.forward_train(g, &vars, &image, &labels, &policy, false)?;
                Ok(total_loss(g, &pass, &labels)?.total)
            },
            &x,
        )?;
        acc.add("three_branch_loss", r);
    }
    Ok(())
}

/// Runs `trials` independent random instances derived from `seed`.
pub fn gradient_suite(seed: u64, trials: usize) -> Result<SuiteReport> {
    let check = GradCheck::new(DEFAULT_EPS)?;
    let mut acc = Accumulator { cases: Vec::new() };
    for i in 0..trials {
        one_trial(
            seed.wrapping_mul(1_000_003).wrapping_add(i as u64),
            &check,
            &mut acc,
        )?;
    }
    let max_rel_error = acc
        .cases
        .iter()
        .map(|c| c.max_rel_error)
        .fold(0.0, f64::max);
    let every_case_checked = acc.cases.iter().all(|c| c.checked > 0);
    Ok(SuiteReport {
        seed,
        trials,
        cases: acc.cases,
        max_rel_error,
        passed: every_case_checked && max_rel_error <= TOLERANCE,
    })
}

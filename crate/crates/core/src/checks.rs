//! The gradient-check suite behind `msunet gradcheck`.
//!
//! Every differentiable operator is checked in double precision against
//! central differences, each reduced to a scalar through a fixed random
//! projection. Two small networks (one plain stage and a two-stage CIFS
//! cascade under the deep-supervision objective) are checked end to end at
//! a looser tolerance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::architecture::{build_cascade, CascadeConfig, FusionMode};
use crate::error::Result;
use crate::loss::{cascade_objective, StageWeights, TRAIN_EPS};
use crate::tensor::gradcheck::{GradCheck, GradCheckReport};
use crate::tensor::{Fault, Graph, Padding, Shape, Tensor, Var};

pub const OPERATOR_TOLERANCE: f64 = 1e-4;
pub const NETWORK_TOLERANCE: f64 = 1e-3;

struct Inputs {
    rng: ChaCha8Rng,
}

impl Inputs {
    fn uniform(&mut self, shape: [usize; 4], lo: f64, hi: f64) -> Tensor<f64> {
        let n = Shape(shape).numel();
        Tensor::from_vec(shape, (0..n).map(|_| self.rng.random_range(lo..hi)).collect()).unwrap()
    }

    fn normal(&mut self, shape: [usize; 4]) -> Tensor<f64> {
        self.uniform(shape, -1.0, 1.0)
    }

    fn projection(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.rng.random_range(-1.0..1.0)).collect()
    }

    fn binary(&mut self, shape: [usize; 4]) -> Tensor<f64> {
        let n = Shape(shape).numel();
        let mut bits: Vec<f64> = (0..n).map(|_| self.rng.random_bool(0.5) as u8 as f64).collect();
        bits[0] = 1.0;
        Tensor::from_vec(shape, bits).unwrap()
    }
}

/// Records `sum(w * x)` for a fixed `w` sized to `x`.
fn project(g: &mut Graph<f64>, x: Var, weights: &[f64]) -> Result<Var> {
    g.project(x, weights[..g.shape(x).numel()].to_vec())
}

/// Operator-level checks at [`OPERATOR_TOLERANCE`].
pub fn operator_suite(seed: u64, fault: Option<Fault>) -> Result<Vec<GradCheckReport>> {
    let mut r = Inputs {
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let proj = r.projection(4096);
    let check = |name: &str| GradCheck::new(name, OPERATOR_TOLERANCE).fault(fault);
    let mut reports = Vec::new();

    let (x, w, b) = (r.normal([1, 2, 6, 6]), r.normal([3, 2, 3, 3]), r.normal([1, 3, 1, 1]));
    reports.push(check("conv2d 3x3 same").run(&[x, w, b], |g, v| {
        let y = g.conv2d(v[0], v[1], Some(v[2]), Padding::Same)?;
        project(g, y, &proj)
    })?);

    let (x, w) = (r.normal([2, 2, 5, 4]), r.normal([2, 2, 3, 3]));
    reports.push(check("conv2d 3x3 valid").run(&[x, w], |g, v| {
        let y = g.conv2d(v[0], v[1], None, Padding::Valid)?;
        project(g, y, &proj)
    })?);

    let (x, w, b) = (r.normal([2, 3, 4, 4]), r.normal([2, 3, 1, 1]), r.normal([1, 2, 1, 1]));
    reports.push(check("conv2d 1x1").run(&[x, w, b], |g, v| {
        let y = g.conv2d(v[0], v[1], Some(v[2]), Padding::Same)?;
        project(g, y, &proj)
    })?);

    let (x, w) = (r.normal([2, 3, 3, 2]), r.normal([3, 2, 2, 2]));
    reports.push(check("conv_transpose 2x2").run(&[x, w], |g, v| {
        let y = g.conv_transpose2x2(v[0], v[1])?;
        project(g, y, &proj)
    })?);

    let x = r.normal([2, 2, 4, 6]);
    reports.push(check("maxpool 2x2").run(&[x], |g, v| {
        let y = g.maxpool2x2(v[0])?;
        project(g, y, &proj)
    })?);

    let x = r.normal([1, 2, 4, 4]);
    reports.push(check("relu").run(&[x], |g, v| {
        let y = g.relu(v[0]);
        project(g, y, &proj)
    })?);

    let x = r.uniform([1, 2, 4, 4], -4.0, 4.0);
    reports.push(check("sigmoid").run(&[x], |g, v| {
        let y = g.sigmoid(v[0]);
        project(g, y, &proj)
    })?);

    let (a, b) = (r.normal([2, 2, 3, 3]), r.normal([2, 2, 3, 3]));
    reports.push(check("add").run(&[a, b], |g, v| {
        let y = g.add(v[0], v[1])?;
        project(g, y, &proj)
    })?);

    let (a, b) = (r.normal([2, 2, 3, 3]), r.normal([2, 3, 3, 3]));
    reports.push(check("concat").run(&[a, b], |g, v| {
        let y = g.concat_channels(v[0], v[1])?;
        project(g, y, &proj)
    })?);

    let p = r.uniform([2, 1, 4, 4], 0.05, 0.95);
    let t = r.binary([2, 1, 4, 4]);
    reports.push(check("jaccard distance").run(&[p], |g, v| {
        let target = g.input(t.clone());
        g.jaccard_distance(v[0], target, TRAIN_EPS)
    })?);

    let ps: Vec<Tensor<f64>> = (0..3).map(|_| r.uniform([1, 1, 4, 4], 0.05, 0.95)).collect();
    let t = r.binary([1, 1, 4, 4]);
    let alphas = StageWeights::for_stages(3);
    reports.push(check("weighted stage loss").run(&ps, |g, v| {
        let target = g.input(t.clone());
        Ok(cascade_objective(g, v, target, &alphas, true)?.0)
    })?);

    Ok(reports)
}

/// Checks the gradient of the training objective with respect to every
/// parameter and the input image of a small cascade.
pub fn network_check(name: &str, config: &CascadeConfig, size: usize, seed: u64, fault: Option<Fault>) -> Result<GradCheckReport> {
    let model = build_cascade::<f64>(config, seed)?;
    let mut r = Inputs {
        rng: ChaCha8Rng::seed_from_u64(seed ^ 0xc0ffee),
    };
    let image = r.normal([1, config.in_channels, size, size]);
    let target = r.binary([1, 1, size, size]);
    let counts: Vec<usize> = model.stages().iter().map(|s| s.params().len()).collect();
    let mut inputs = vec![image];
    inputs.extend(model.named_params().into_iter().map(|(_, t)| t.clone()));
    let alphas = StageWeights::for_stages(config.stages);
    GradCheck::new(name, NETWORK_TOLERANCE).fault(fault).run(&inputs, |g, v| {
        let mut bound = Vec::with_capacity(counts.len());
        let mut at = 1;
        for &n in &counts {
            bound.push(v[at..at + n].to_vec());
            at += n;
        }
        let ys = model.forward(g, &bound, v[0])?;
        let t = g.input(target.clone());
        Ok(cascade_objective(g, &ys, t, &alphas, true)?.0)
    })
}

/// Network-level checks at [`NETWORK_TOLERANCE`] on 16x16 inputs.
pub fn network_suite(seed: u64, fault: Option<Fault>) -> Result<Vec<GradCheckReport>> {
    let base = CascadeConfig {
        stages: 1,
        in_channels: 3,
        levels: 2,
        channel_widths: vec![2, 3, 4],
        fusion_mode: FusionMode::Cifs,
    };
    let cascade = CascadeConfig {
        stages: 2,
        ..base.clone()
    };
    Ok(vec![
        network_check("unet stage 16x16", &base, 16, seed, fault)?,
        network_check("2-stage cascade 16x16", &cascade, 16, seed, fault)?,
    ])
}

pub fn full_suite(seed: u64, fault: Option<Fault>) -> Result<Vec<GradCheckReport>> {
    let mut reports = operator_suite(seed, fault)?;
    reports.extend(network_suite(seed, fault)?);
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn operators_pass_and_fault_is_caught() {
        let reports = operator_suite(7, None).unwrap();
        for r in &reports {
            assert!(r.passed(), "{r:?}");
        }
        let faulty = operator_suite(7, Some(Fault::ConvWeightGrad)).unwrap();
        let failed: Vec<&str> = faulty.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
        assert!(failed.iter().all(|n| n.starts_with("conv2d")), "{failed:?}");
        assert_eq!(failed.len(), 3);
    }
}

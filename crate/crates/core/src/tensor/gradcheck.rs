//! Central finite-difference verification of analytic gradients.

use super::graph::Fault;
use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Central-difference step used by every check.
pub const STEP: f64 = 1e-5;

/// Floor on the relative-error denominator.
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates whose +/- step crossed a ReLU or max-pool branch point.
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance && self.checked > 0
    }
}

/// `|analytic - numeric| / max(|numeric|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(REL_FLOOR)
}

/// Finite-difference check of one scalar-valued computation.
pub struct GradCheck<'a> {
    name: String,
    tolerance: f64,
    fault: Option<Fault>,
    coords: Option<&'a dyn Fn(usize, usize) -> bool>,
}

impl<'a> GradCheck<'a> {
    pub fn new(name: impl Into<String>, tolerance: f64) -> Self {
        GradCheck {
            name: name.into(),
            tolerance,
            fault: None,
            coords: None,
        }
    }

    /// Corrupts the analytic pass (fault-injection testing).
    pub fn fault(mut self, fault: Option<Fault>) -> Self {
        self.fault = fault;
        self
    }

    /// Restricts which `(input index, flat element index)` pairs are perturbed.
    pub fn coords(mut self, filter: &'a dyn Fn(usize, usize) -> bool) -> Self {
        self.coords = Some(filter);
        self
    }

    /// Compares backward against central differences for every selected
    /// element of every tensor in `inputs`. `build` records a scalar loss on
    /// a fresh graph given one leaf per input.
    pub fn run<F>(&self, inputs: &[Tensor<f64>], build: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    {
        let eval = |values: &[Tensor<f64>]| -> Result<(f64, u64)> {
            let mut g = Graph::new();
            let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone())).collect();
            let loss = build(&mut g, &vars)?;
            Ok((g.value(loss).item()?, g.kink_signature()))
        };

        let mut g = match self.fault {
            Some(f) => Graph::with_fault(f),
            None => Graph::new(),
        };
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = build(&mut g, &vars)?;
        let base_signature = g.kink_signature();
        g.backward(loss)?;
        let analytic: Vec<Vec<f64>> = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
            .collect();

        let mut values = inputs.to_vec();
        let mut report = GradCheckReport {
            name: self.name.clone(),
            max_rel_error: 0.0,
            tolerance: self.tolerance,
            checked: 0,
            skipped: 0,
        };
        for ti in 0..values.len() {
            for ei in 0..values[ti].numel() {
                if self.coords.is_some_and(|f| !f(ti, ei)) {
                    continue;
                }
                let orig = values[ti].data()[ei];
                values[ti].data_mut()[ei] = orig + STEP;
                let (plus, sig_plus) = eval(&values)?;
                values[ti].data_mut()[ei] = orig - STEP;
                let (minus, sig_minus) = eval(&values)?;
                values[ti].data_mut()[ei] = orig;
                if sig_plus != base_signature || sig_minus != base_signature {
                    report.skipped += 1;
                    continue;
                }
                let numeric = (plus - minus) / (2.0 * STEP);
                let err = relative_error(analytic[ti][ei], numeric);
                if !err.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "{}: gradient check produced {err}",
                        self.name
                    )));
                }
                report.max_rel_error = report.max_rel_error.max(err);
                report.checked += 1;
            }
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Padding;

    #[test]
    fn add_is_exact_to_machine_precision() {
        let a = Tensor::from_vec([1, 1, 2, 2], vec![0.3, -1.2, 2.5, 0.9]).unwrap();
        let b = Tensor::from_vec([1, 1, 2, 2], vec![1.1, 0.4, -0.7, 0.2]).unwrap();
        let r = GradCheck::new("add", 1e-4)
            .run(&[a, b], |g, v| {
                let s = g.add(v[0], v[1])?;
                g.project(s, vec![0.5, -1.5, 2.0, 1.0])
            })
            .unwrap();
        assert!(r.passed());
        assert!(r.max_rel_error < 1e-9, "{}", r.max_rel_error);
        assert_eq!(r.checked, 8);
    }

    #[test]
    fn detects_corrupted_conv_adjoint() {
        let a = Tensor::from_vec([1, 1, 3, 3], (0..9).map(|i| i as f64 * 0.1 - 0.4).collect()).unwrap();
        let w = Tensor::from_vec([1, 1, 3, 3], (0..9).map(|i| 0.2 - i as f64 * 0.05).collect()).unwrap();
        let build = |g: &mut Graph<f64>, v: &[Var]| {
            let c = g.conv2d(v[0], v[1], None, Padding::Same)?;
            g.project(c, (0..9).map(|i| (i as f64).sin()).collect())
        };
        let ok = GradCheck::new("conv", 1e-4).run(&[a.clone(), w.clone()], build).unwrap();
        assert!(ok.passed(), "{ok:?}");
        let bad = GradCheck::new("conv", 1e-4)
            .fault(Some(Fault::ConvWeightGrad))
            .run(&[a, w], build)
            .unwrap();
        assert!(!bad.passed());
        assert!(bad.max_rel_error > 5e-3);
    }

    #[test]
    fn coordinate_filter_limits_work() {
        let a = Tensor::from_vec([1, 1, 1, 4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let only_first = |_t: usize, e: usize| e == 0;
        let r = GradCheck::new("sum", 1e-6)
            .coords(&only_first)
            .run(&[a], |g, v| g.sum(v[0]))
            .unwrap();
        assert_eq!(r.checked, 1);
    }
}

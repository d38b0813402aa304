//! Central-difference verification of analytic gradients.

use crate::diff::graph::{GradFault, Graph, NodeId};
use crate::diff::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |numeric|)` over all entries.
    pub max_rel_error: f64,
    pub worst_param: Option<String>,
    pub worst_index: usize,
    pub entries_checked: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    eps: f64,
    fault: Option<GradFault>,
}

impl GradCheck {
    pub fn new(eps: f64) -> Result<Self> {
        if !(eps > 1e-8 && eps < 1e-3) {
            return Err(Error::InvalidArgument(format!(
                "finite-difference step {eps} outside (1e-8, 1e-3)"
            )));
        }
        Ok(Self { eps, fault: None })
    }

    /// Runs the analytic pass on a graph with a corrupted backward rule.
    pub fn with_fault(mut self, fault: GradFault) -> Self {
        self.fault = Some(fault);
        self
    }

    /// Compares backward against central differences for every scalar in `store`.
    ///
    /// `build` must construct the same scalar loss each time it is called.
    pub fn run<F>(&self, store: &mut ParamStore, mut build: F) -> Result<GradCheckReport>
    where
        F: FnMut(&mut Graph, &ParamStore) -> Result<NodeId>,
    {
        let mut g = Graph::new().with_fault(self.fault);
        let loss = build(&mut g, store)?;
        g.value(loss).check_finite("loss")?;
        g.backward(loss)?;
        let analytic = g.take_param_grads();

        let mut eval = |store: &ParamStore| -> Result<f64> {
            let mut g = Graph::inference();
            let loss = build(&mut g, store)?;
            let v = g.value(loss).item()?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::NonFinite("perturbed loss".into()))
            }
        };

        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            worst_param: None,
            worst_index: 0,
            entries_checked: 0,
        };
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let n = store.get(id).numel();
            for k in 0..n {
                let orig = store.get(id).data()[k];
                store.get_mut(id).data_mut()[k] = orig + self.eps;
                let plus = eval(store);
                store.get_mut(id).data_mut()[k] = orig - self.eps;
                let minus = eval(store);
                store.get_mut(id).data_mut()[k] = orig;
                let numeric = (plus? - minus?) / (2.0 * self.eps);

                let a = analytic
                    .get(id.0)
                    .and_then(Option::as_ref)
                    .map_or(0.0, |t| t.data()[k]);
                let err = (a - numeric).abs() / numeric.abs().max(1.0);
                report.entries_checked += 1;
                if report.worst_param.is_none() || err > report.max_rel_error {
                    report.max_rel_error = err;
                    report.worst_param = Some(store.name(id).to_string());
                    report.worst_index = k;
                }
            }
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn step_must_be_in_range() {
        assert!(GradCheck::new(1e-2).is_err());
        assert!(GradCheck::new(1e-9).is_err());
        assert!(GradCheck::new(1e-5).is_ok());
    }

    #[test]
    fn linear_function_is_exact() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![0.4, -1.2, 3.0]).unwrap());
        let c = Tensor::vector(vec![2.0, -1.0, 0.5]).unwrap();
        let report = GradCheck::new(1e-5)
            .unwrap()
            .run(&mut store, |g, s| {
                let w = g.param(s, id);
                let k = g.constant(c.clone());
                let p = g.mul(w, k)?;
                Ok(g.sum(p))
            })
            .unwrap();
        assert_eq!(report.entries_checked, 3);
        assert!(report.max_rel_error < 1e-9, "{report:?}");
    }

    #[test]
    fn tanh_chain_within_tolerance_and_fault_is_caught() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![0.4, -1.2, 0.9]).unwrap());
        let build = |g: &mut Graph, s: &ParamStore| {
            let w = g.param(s, id);
            let t1 = g.tanh(w);
            let t2 = g.scale(t1, 1.7);
            let t3 = g.tanh(t2);
            Ok(g.sum(t3))
        };
        let ok = GradCheck::new(1e-5).unwrap().run(&mut store, build).unwrap();
        assert!(ok.max_rel_error < 1e-6, "{ok:?}");
        let bad = GradCheck::new(1e-5)
            .unwrap()
            .with_fault(GradFault::TanhDerivative)
            .run(&mut store, build)
            .unwrap();
        assert!(bad.max_rel_error > 1e-2, "{bad:?}");
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![-1.0]).unwrap());
        let res = GradCheck::new(1e-5).unwrap().run(&mut store, |g, s| {
            let w = g.param(s, id);
            let l = g.log(w);
            Ok(g.sum(l))
        });
        assert!(matches!(res, Err(Error::NonFinite(_))));
    }
}

//! Central finite-difference checks of [`Graph`] gradients.

use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// Perturbation for `(f(x + h) - f(x - h)) / 2h`.
    pub step: f64,
    /// Relative tolerance on `|analytic - numeric| / max(|analytic|, |numeric|)`.
    pub rtol: f64,
    /// Absolute differences below this always pass.
    pub atol: f64,
    /// Check at most this many evenly spaced entries per input.
    pub max_entries: usize,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-6,
            rtol: 1e-4,
            atol: 1e-8,
            max_entries: usize::MAX,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// `(input, entry, analytic, numeric)` of the worst failing entry.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub failures: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

impl GradCheck {
    pub fn with_rtol(rtol: f64) -> Self {
        Self { rtol, ..Self::default() }
    }

    /// Compare the analytic gradient of the scalar built by `f` against
    /// central differences, at `inputs`.
    pub fn run(&self, inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Var) -> GradCheckReport {
        let eval = |xs: &[Tensor]| {
            let mut g = Graph::inference();
            let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
            let out = f(&mut g, &vars);
            g.value(out).item()
        };

        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars);
        let grads = g.backward(out);

        let analytic: Vec<Tensor> = vars
            .iter()
            .zip(inputs)
            .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        let mut work: Vec<Tensor> = inputs.to_vec();
        self.compare(&analytic, &mut work, |w| eval(w))
    }

    /// Like [`GradCheck::run`] but for named parameters of `store`. `f` must
    /// bind the parameters it uses as trainable.
    pub fn run_params(
        &self,
        store: &ParamStore,
        names: &[String],
        f: impl Fn(&mut Graph, &ParamStore) -> Var,
    ) -> GradCheckReport {
        let mut g = Graph::new();
        let out = f(&mut g, store);
        let grads = g.backward(out);
        let analytic: Vec<Tensor> = names
            .iter()
            .map(|n| {
                let t = store.get(n).unwrap_or_else(|| panic!("unknown parameter `{n}`"));
                grads.param(n).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()))
            })
            .collect();
        let mut work: Vec<Tensor> = names.iter().map(|n| store.get(n).unwrap().clone()).collect();
        let mut scratch = store.clone();
        self.compare(&analytic, &mut work, |w| {
            for (n, t) in names.iter().zip(w) {
                scratch.insert(n.clone(), t.clone());
            }
            let mut g = Graph::inference();
            let out = f(&mut g, &scratch);
            g.value(out).item()
        })
    }

    fn compare(&self, analytic: &[Tensor], work: &mut [Tensor], mut eval: impl FnMut(&[Tensor]) -> f64) -> GradCheckReport {
        let mut report = GradCheckReport::default();
        for i in 0..work.len() {
            let n = work[i].numel();
            let stride = n.div_ceil(self.max_entries.max(1)).max(1);
            for e in (0..n).step_by(stride) {
                let orig = work[i].data()[e];
                work[i].data_mut()[e] = orig + self.step;
                let plus = eval(work);
                work[i].data_mut()[e] = orig - self.step;
                let minus = eval(work);
                work[i].data_mut()[e] = orig;
                let numeric = (plus - minus) / (2.0 * self.step);
                let a = analytic[i].data()[e];
                let abs = (a - numeric).abs();
                let rel = abs / a.abs().max(numeric.abs()).max(f64::MIN_POSITIVE);
                report.checked += 1;
                report.max_abs_err = report.max_abs_err.max(abs);
                if abs > self.atol {
                    if rel > report.max_rel_err {
                        report.max_rel_err = rel;
                        if rel > self.rtol {
                            report.worst = Some((i, e, a, numeric));
                        }
                    }
                    if rel > self.rtol {
                        report.failures += 1;
                    }
                }
            }
        }
        report
    }
}

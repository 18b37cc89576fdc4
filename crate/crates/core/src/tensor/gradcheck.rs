//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{invalid, Error, Result};

/// `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, element)` with the largest error.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Elements skipped because the one-sided slopes disagree, i.e. the
    /// function has a kink there (ReLU at 0, max-pool ties, ...).
    pub excluded: Vec<(usize, usize)>,
}

#[derive(Clone, Debug)]
pub struct GradChecker {
    pub eps: f64,
    /// Relative disagreement between forward and backward slopes above which
    /// an element is treated as a kink.
    pub kink_tol: f64,
    /// Check at most this many elements per input, sampled with `seed`.
    pub max_elements: Option<usize>,
    pub seed: u64,
}

impl Default for GradChecker {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            kink_tol: 1e-2,
            max_elements: None,
            seed: 0,
        }
    }
}

impl GradChecker {
    pub fn new(eps: f64) -> Self {
        Self {
            eps,
            ..Self::default()
        }
    }

    pub fn max_elements(mut self, n: usize) -> Self {
        self.max_elements = Some(n);
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Compares the tape gradient of the scalar `f(inputs)` against central
    /// differences, element by element.
    pub fn run<F>(&self, f: F, inputs: &[Tensor]) -> Result<GradCheckReport>
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        if !(self.eps > 0.0) {
            return Err(invalid!("grad_check eps must be positive"));
        }
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let f0 = scalar_of(&tape, out, "f(x)")?;
        tape.backward(out)?;
        let analytic: Vec<Vec<f64>> = vars
            .iter()
            .zip(inputs)
            .map(|(v, t)| tape.grad(*v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
            .collect();
        drop(tape);

        let eval = |which: usize, elem: usize, delta: f64| -> Result<f64> {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(k, t)| {
                    let mut t = t.clone();
                    if k == which {
                        t.data_mut()[elem] += delta;
                    }
                    tape.variable(t)
                })
                .collect();
            let out = f(&mut tape, &vars)?;
            scalar_of(
                &tape,
                out,
                &format!("f(x {} eps) at input {which} element {elem}", if delta > 0.0 { "+" } else { "-" }),
            )
        };

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut report = GradCheckReport::default();
        for (k, t) in inputs.iter().enumerate() {
            let elements: Vec<usize> = match self.max_elements {
                Some(m) if m < t.numel() => {
                    let mut idx = sample(&mut rng, t.numel(), m).into_vec();
                    idx.sort_unstable();
                    idx
                }
                _ => (0..t.numel()).collect(),
            };
            for j in elements {
                let plus = eval(k, j, self.eps)?;
                let minus = eval(k, j, -self.eps)?;
                let forward = (plus - f0) / self.eps;
                let backward = (f0 - minus) / self.eps;
                let scale = 1f64.max(forward.abs()).max(backward.abs());
                if (forward - backward).abs() > self.kink_tol * scale {
                    report.excluded.push((k, j));
                    continue;
                }
                let numeric = (plus - minus) / (2.0 * self.eps);
                let err = relative_error(analytic[k][j], numeric);
                report.checked += 1;
                if err > report.max_rel_error || report.worst.is_none() {
                    report.max_rel_error = err;
                    report.worst = Some((k, j));
                }
            }
        }
        Ok(report)
    }
}

fn scalar_of(tape: &Tape, v: Var, what: &str) -> Result<f64> {
    let value = tape.value(v);
    if value.numel() != 1 {
        return Err(invalid!("grad_check needs a scalar function, got shape {:?}", value.shape()));
    }
    if let Some((var, elem)) = tape.first_non_finite() {
        return Err(Error::NonFinite(format!(
            "{what}: intermediate value {} has a non-finite element at index {elem}",
            var.index()
        )));
    }
    Ok(value.data()[0])
}

/// Maximum relative error between the tape gradient of `f` at `x` and
/// central differences with step `eps`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    GradChecker::new(eps).run(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x))
}

//! Dense `f64` tensors and a reverse-mode autodiff tape.
//!
//! [`Tensor`] is a plain value: a shape and a flat row-major buffer. Every
//! differentiable operation lives on [`Tape`], which records the op together
//! with whatever it needs to replay the backward rule. 4-D tensors follow the
//! `batch × channels × height × width` layout.

mod gradcheck;
pub(crate) mod kernels;
mod tape;
#[cfg(test)]
mod op_tests;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, GradChecker};
pub use tape::{sigmoid, BatchNormMode, PoolKind, RoiRegion, Tape, Var};

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(invalid!(
                "shape {:?} holds {} elements but {} values were given",
                shape,
                numel,
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    /// A rank-0 tensor holding one value.
    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..numel).map(f).collect(),
        }
    }

    /// Samples every element from `N(mean, sigma²)`.
    pub fn randn(shape: &[usize], mean: f64, sigma: f64, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(mean, sigma).expect("sigma must be finite and non-negative");
        Self::from_fn(shape, |_| normal.sample(rng))
    }

    pub fn uniform(shape: &[usize], low: f64, high: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| rng.gen_range(low..high))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(invalid!("item() on a tensor of shape {:?}", self.shape)),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(invalid!("cannot reshape {:?} into {:?}", self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape.as_slice() {
            &[n, c, h, w] => Ok([n, c, h, w]),
            s => Err(invalid!("expected a 4-D tensor, got shape {:?}", s)),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Text dump: the shape as space-separated integers on the first line,
    /// then one value per line with 17 significant digits.
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.data.len() * 24 + 16);
        self.write_text(&mut out);
        out
    }

    pub(crate) fn write_text(&self, out: &mut String) {
        let dims: Vec<String> = self.shape.iter().map(|d| d.to_string()).collect();
        out.push_str(&dims.join(" "));
        out.push('\n');
        for v in &self.data {
            writeln!(out, "{}", format_f64(*v)).unwrap();
        }
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (_, header) = lines.next().ok_or_else(|| Error::parse(1, "missing shape line"))?;
        let shape = parse_shape(header, 1)?;
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for (lineno, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            data.push(parse_value(line, lineno)?);
        }
        if data.len() != numel {
            return Err(Error::parse(
                1,
                format!("shape {:?} needs {} values, found {}", shape, numel, data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn save_text(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::file(path, e))
    }

    pub fn load_text(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_text(&text)
    }
}

/// 17 significant digits, enough to round-trip every `f64`.
pub(crate) fn format_f64(v: f64) -> String {
    format!("{:.16e}", v)
}

pub(crate) fn parse_shape(line: &str, lineno: usize) -> Result<Vec<usize>> {
    line.split_whitespace()
        .map(|tok| {
            tok.parse::<usize>()
                .map_err(|_| Error::parse(lineno, format!("bad dimension {tok:?}")))
        })
        .collect()
}

pub(crate) fn parse_value(line: &str, lineno: usize) -> Result<f64> {
    line.trim()
        .parse::<f64>()
        .map_err(|_| Error::parse(lineno, format!("bad value {:?}", line.trim())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn new_checks_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert_eq!(Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap().numel(), 6);
    }

    #[test]
    fn scalar_has_empty_shape() {
        let s = Tensor::scalar(3.5);
        assert!(s.shape().is_empty());
        assert_eq!(s.item().unwrap(), 3.5);
    }

    #[test]
    fn text_dump_layout() {
        let t = Tensor::new(vec![1, 2], vec![0.5, -2.0]).unwrap();
        let text = t.to_text();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("1 2"));
        assert_eq!(lines.next(), Some("5.0000000000000000e-1"));
        assert_eq!(lines.next(), Some("-2.0000000000000000e0"));
    }

    #[test]
    fn text_parse_errors_carry_line() {
        let err = Tensor::from_text("2\n1.0\nnope\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    }

    proptest! {
        #[test]
        fn text_round_trip_is_exact(values in proptest::collection::vec(-1e300f64..1e300, 1..20)) {
            let t = Tensor::new(vec![values.len()], values).unwrap();
            prop_assert_eq!(Tensor::from_text(&t.to_text()).unwrap(), t);
        }
    }
}

/// Exponential moving averages of batch-norm statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    /// Momentum of the running-statistic update.
    pub const MOMENTUM: f64 = 0.1;

    /// Mean 0, variance 1.
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// `running ← (1 − m)·running + m·batch`, with the batch variance
    /// converted to its unbiased form over `count` samples per channel.
    pub fn update(&mut self, batch_mean: &[f64], batch_var: &[f64], count: usize) {
        let m = Self::MOMENTUM;
        let correction = if count > 1 {
            count as f64 / (count - 1) as f64
        } else {
            1.0
        };
        for (r, b) in self.mean.iter_mut().zip(batch_mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.var.iter_mut().zip(batch_var) {
            *r = (1.0 - m) * *r + m * b * correction;
        }
    }
}

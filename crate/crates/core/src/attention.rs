//! Per-level feature gating: batch norm, a sharpened sigmoid, and an
//! elementwise product with the ungated feature.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::FeatureSet;
use crate::error::{invalid, Error, Result};
use crate::params::{BnParams, ParamStore, Phase, Session};
use crate::tensor::{relative_error, Tensor, Var};

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub bn: [BnParams; 4],
    /// Sigmoid sharpness shared by every level; 1 gives the plain sigmoid.
    pub beta: f64,
}

impl AttentionParams {
    pub fn new(store: &mut ParamStore, channels: usize, beta: f64) -> Self {
        Self {
            bn: std::array::from_fn(|i| BnParams::new(store, &format!("attention.bn{}", i + 2), channels)),
            beta,
        }
    }
}

/// Gate and gated output of one level.
#[derive(Clone, Copy, Debug)]
pub struct Gated {
    pub gate: Var,
    pub output: Var,
}

pub fn attention_gate(s: &mut Session, x: Var, bn: &BnParams, beta: f64) -> Result<Gated> {
    let norm = s.batch_norm(x, bn)?;
    let gate = s.tape.sigmoid_scaled(norm, beta)?;
    let output = s.tape.mul(gate, x)?;
    Ok(Gated { gate, output })
}

pub fn apply_attention(s: &mut Session, p: &FeatureSet, params: &AttentionParams) -> Result<FeatureSet> {
    let mut levels = p.levels;
    for (level, bn) in levels.iter_mut().zip(&params.bn) {
        *level = attention_gate(s, *level, bn, params.beta)?.output;
    }
    Ok(FeatureSet { levels })
}

/// Compares the tape gradient of a random linear probe of the gated output
/// with the product rule written out by hand,
/// `∂out/∂x = gate + x · β · gate · (1 − gate) · γ / √(var + eps)`,
/// using the frozen running statistics. Returns the largest relative
/// discrepancy.
pub fn attention_grad_identity_check(
    x: &Tensor,
    store: &ParamStore,
    bn: &BnParams,
    beta: f64,
) -> Result<f64> {
    let [n, c, h, w] = x.dims4()?;
    if store.get(bn.gamma).numel() != c {
        return Err(invalid!(
            "input has {c} channels but the gate has {}",
            store.get(bn.gamma).numel()
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x9a7e);
    let upstream = Tensor::from_fn(x.shape(), |_| rng.gen_range(-1.0..1.0));

    let mut s = Session::with_grads(store, Phase::Eval, false);
    let xv = s.tape.variable(x.clone());
    let gated = attention_gate(&mut s, xv, bn, beta)?;
    let up = s.tape.constant(upstream.clone());
    let probe = s.tape.mul(gated.output, up)?;
    let loss = s.tape.sum(probe);
    s.tape.backward(loss)?;
    if let Some((var, elem)) = s.tape.first_non_finite() {
        return Err(Error::NonFinite(format!(
            "gate intermediate {} has a non-finite element at index {elem}",
            var.index()
        )));
    }
    let analytic = s.tape.grad(xv).expect("input gradient");

    let (gamma, shift, mean, var) = (
        store.get(bn.gamma).data(),
        store.get(bn.shift).data(),
        store.get(bn.mean).data(),
        store.get(bn.var).data(),
    );
    let plane = h * w;
    let mut worst = 0f64;
    for i in 0..n * c * plane {
        let ch = (i / plane) % c;
        let slope = gamma[ch] / (var[ch] + BnParams::EPS).sqrt();
        let norm = (x.data()[i] - mean[ch]) * slope + shift[ch];
        let g = 1.0 / (1.0 + (-beta * norm).exp());
        let by_hand = upstream.data()[i] * (g + x.data()[i] * beta * g * (1.0 - g) * slope);
        if !by_hand.is_finite() {
            return Err(Error::NonFinite(format!("hand gradient at element {i}")));
        }
        worst = worst.max(relative_error(analytic[i], by_hand));
    }
    Ok(worst)
}

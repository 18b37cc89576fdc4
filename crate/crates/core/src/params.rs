//! Named parameter storage and the per-forward-pass binding of parameters
//! onto a [`Tape`].

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::tensor::{BatchNormMode, GradCheckReport, GradChecker, RunningStats, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Weight,
    Bias,
    BnGamma,
    BnShift,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn is_trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }

    /// Batch-norm affine parameters are exempt from weight decay.
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight | ParamKind::Bias)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ParamKind::Weight => "weight",
            ParamKind::Bias => "bias",
            ParamKind::BnGamma => "gamma",
            ParamKind::BnShift => "shift",
            ParamKind::RunningMean => "running_mean",
            ParamKind::RunningVar => "running_var",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "weight" => ParamKind::Weight,
            "bias" => ParamKind::Bias,
            "gamma" => ParamKind::BnGamma,
            "shift" => ParamKind::BnShift,
            "running_mean" => ParamKind::RunningMean,
            "running_var" => ParamKind::RunningVar,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

/// Ordered, named tensors. Order is creation order and is what checkpoints
/// serialize.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            kind,
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Total number of scalar parameters of trainable kinds.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind.is_trainable())
            .map(|e| e.value.numel())
            .sum()
    }

    /// Replaces every value with the one of the same name in `other`.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(invalid!(
                "parameter count mismatch: expected {}, got {}",
                self.len(),
                other.len()
            ));
        }
        for entry in &mut self.entries {
            let id = other
                .find(&entry.name)
                .ok_or_else(|| invalid!("missing parameter {}", entry.name))?;
            let src = other.get(id);
            if src.shape() != entry.value.shape() {
                return Err(invalid!(
                    "parameter {} has shape {:?}, expected {:?}",
                    entry.name,
                    src.shape(),
                    entry.value.shape()
                ));
            }
            entry.value = src.clone();
        }
        Ok(())
    }

    pub fn apply_stat_updates(&mut self, updates: Vec<StatUpdate>) {
        for u in updates {
            let mut stats = RunningStats {
                mean: self.get(u.bn.mean).data().to_vec(),
                var: self.get(u.bn.var).data().to_vec(),
            };
            stats.update(&u.batch_mean, &u.batch_var, u.count);
            self.get_mut(u.bn.mean).data_mut().copy_from_slice(&stats.mean);
            self.get_mut(u.bn.var).data_mut().copy_from_slice(&stats.var);
        }
    }
}

/// A convolution's weight `[Cout, Cin, k, k]` and bias `[Cout]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl ConvParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        Self {
            weight: store.add(
                format!("{name}.weight"),
                ParamKind::Weight,
                Tensor::zeros(&[cout, cin, kernel, kernel]),
            ),
            bias: store.add(format!("{name}.bias"), ParamKind::Bias, Tensor::zeros(&[cout])),
            stride,
            padding,
        }
    }

    pub fn in_channels(&self, store: &ParamStore) -> usize {
        store.get(self.weight).shape()[1]
    }

    pub fn out_channels(&self, store: &ParamStore) -> usize {
        store.get(self.weight).shape()[0]
    }
}

/// Affine parameters and running statistics of one batch-norm layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BnParams {
    pub gamma: ParamId,
    pub shift: ParamId,
    pub mean: ParamId,
    pub var: ParamId,
}

impl BnParams {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), ParamKind::BnGamma, Tensor::ones(&[channels])),
            shift: store.add(format!("{name}.shift"), ParamKind::BnShift, Tensor::zeros(&[channels])),
            mean: store.add(
                format!("{name}.running_mean"),
                ParamKind::RunningMean,
                Tensor::zeros(&[channels]),
            ),
            var: store.add(
                format!("{name}.running_var"),
                ParamKind::RunningVar,
                Tensor::ones(&[channels]),
            ),
        }
    }
}

/// A fully connected layer's weight `[D, K]` and bias `[K]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LinearParams {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize) -> Self {
        Self {
            weight: store.add(
                format!("{name}.weight"),
                ParamKind::Weight,
                Tensor::zeros(&[inputs, outputs]),
            ),
            bias: store.add(format!("{name}.bias"), ParamKind::Bias, Tensor::zeros(&[outputs])),
        }
    }
}

/// Whether batch norm uses batch statistics and dropout is active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Batch statistics captured by a train-phase forward pass, to be folded
/// into the running statistics once the step is done.
#[derive(Clone, Debug)]
pub struct StatUpdate {
    pub bn: BnParams,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
    pub count: usize,
}

/// One forward pass: a fresh tape plus lazily bound parameter leaves.
pub struct Session<'m> {
    pub tape: Tape,
    store: &'m ParamStore,
    phase: Phase,
    grads: bool,
    bound: HashMap<ParamId, Var>,
    updates: Vec<StatUpdate>,
    dropout_rng: ChaCha8Rng,
}

impl<'m> Session<'m> {
    /// Train phase records gradients; eval phase does not.
    pub fn new(store: &'m ParamStore, phase: Phase) -> Self {
        Self::with_grads(store, phase, phase == Phase::Train)
    }

    pub fn with_grads(store: &'m ParamStore, phase: Phase, grads: bool) -> Self {
        Self {
            tape: Tape::new(),
            store,
            phase,
            grads,
            bound: HashMap::new(),
            updates: Vec::new(),
            dropout_rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// Continues recording on an existing tape.
    pub fn with_tape(tape: Tape, store: &'m ParamStore, phase: Phase) -> Self {
        let mut s = Self::new(store, phase);
        s.tape = tape;
        s
    }

    pub fn into_tape(self) -> Tape {
        self.tape
    }

    /// Uses `v` in place of the stored value of `id` from now on.
    pub fn bind(&mut self, id: ParamId, v: Var) {
        self.bound.insert(id, v);
    }

    pub fn seed_dropout(&mut self, seed: u64) {
        self.dropout_rng = ChaCha8Rng::seed_from_u64(seed);
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn store(&self) -> &'m ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound.get(&id) {
            return *v;
        }
        let entry = self.store.entry(id);
        let v = self
            .tape
            .leaf(entry.value.clone(), self.grads && entry.kind.is_trainable());
        self.bound.insert(id, v);
        v
    }

    pub fn conv(&mut self, x: Var, p: &ConvParams) -> Result<Var> {
        let (w, b) = (self.param(p.weight), self.param(p.bias));
        self.tape.conv2d(x, w, Some(b), p.stride, p.padding)
    }

    pub fn batch_norm(&mut self, x: Var, p: &BnParams) -> Result<Var> {
        let (g, s) = (self.param(p.gamma), self.param(p.shift));
        match self.phase {
            Phase::Train => {
                let y = self.tape.batch_norm2d(x, g, s, BnParams::EPS, BatchNormMode::Train)?;
                let (m, v) = self.tape.batch_stats(y).expect("train-mode batch norm");
                let shape = self.tape.shape(x);
                let count = shape[0] * shape[2] * shape[3];
                self.updates.push(StatUpdate {
                    bn: *p,
                    batch_mean: m.to_vec(),
                    batch_var: v.to_vec(),
                    count,
                });
                Ok(y)
            }
            Phase::Eval => {
                let store = self.store;
                self.tape.batch_norm2d(
                    x,
                    g,
                    s,
                    BnParams::EPS,
                    BatchNormMode::Eval {
                        mean: store.get(p.mean).data(),
                        var: store.get(p.var).data(),
                    },
                )
            }
        }
    }

    pub fn linear(&mut self, x: Var, p: &LinearParams) -> Result<Var> {
        let (w, b) = (self.param(p.weight), self.param(p.bias));
        self.tape.fully_connected(x, w, b)
    }

    /// Inverted dropout; the identity outside the train phase.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if self.phase != Phase::Train || rate <= 0.0 {
            return Ok(x);
        }
        use rand::Rng;
        let keep = 1.0 - rate;
        let shape = self.tape.shape(x).to_vec();
        let rng = &mut self.dropout_rng;
        let mask = Tensor::from_fn(&shape, |_| if rng.gen_bool(keep) { 1.0 / keep } else { 0.0 });
        let m = self.tape.constant(mask);
        self.tape.mul(x, m)
    }

    /// Gradients of every bound trainable parameter, ordered by id.
    pub fn grads(&self) -> Vec<(ParamId, Vec<f64>)> {
        let mut out: Vec<(ParamId, Vec<f64>)> = self
            .bound
            .iter()
            .filter_map(|(id, v)| self.tape.grad(*v).map(|g| (*id, g.to_vec())))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    pub fn bound(&self, id: ParamId) -> Option<Var> {
        self.bound.get(&id).copied()
    }

    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate> {
        std::mem::take(&mut self.updates)
    }
}

/// Finite-difference check of a module: the inputs and every trainable
/// parameter in `store` are perturbed, and the module output is reduced to
/// a scalar by a fixed random linear probe.
pub fn grad_check_module<F>(
    store: &ParamStore,
    phase: Phase,
    inputs: &[Tensor],
    checker: &GradChecker,
    forward: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Session, &[Var]) -> Result<Var>,
{
    use rand::Rng;
    let ids: Vec<ParamId> = store
        .ids()
        .filter(|id| store.entry(*id).kind.is_trainable())
        .collect();
    let mut all = inputs.to_vec();
    all.extend(ids.iter().map(|id| store.get(*id).clone()));
    let n_in = inputs.len();
    let probe = std::cell::RefCell::new(None::<Tensor>);
    checker.run(
        |tape: &mut Tape, vars: &[Var]| {
            let mut s = Session::with_tape(std::mem::take(tape), store, phase);
            for (id, v) in ids.iter().zip(&vars[n_in..]) {
                s.bind(*id, *v);
            }
            let out = forward(&mut s, &vars[..n_in]);
            let mut t = s.into_tape();
            let result = out.and_then(|out| {
                let shape = t.shape(out).to_vec();
                let w = probe
                    .borrow_mut()
                    .get_or_insert_with(|| {
                        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
                        Tensor::from_fn(&shape, |_| rng.gen_range(-1.0..1.0))
                    })
                    .clone();
                let w = t.constant(w);
                let prod = t.mul(out, w)?;
                Ok(t.sum(prod))
            });
            *tape = t;
            result
        },
        &all,
    )
}

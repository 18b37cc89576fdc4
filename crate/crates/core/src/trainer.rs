//! Initialization, loss assembly, momentum SGD and the training loop.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config;
use crate::data::{images_to_tensor, Sample};
use crate::detector::{
    match_anchors, match_boxes, pool_rois, select_proposals, AnchorSet, BBox, Match, Roi,
};
use crate::error::{invalid, Error, Result};
use crate::metrics::{evaluate, ApMode, EvalReport, ImageResult};
use crate::model::{Model, ModelConfig};
use crate::params::{ParamId, ParamKind, ParamStore, Phase, Session};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub init_sigma: f64,
    /// Tracked weights are sampled every `log_every` iterations.
    pub log_every: usize,
    /// Tracked weights per module.
    pub tracked_per_module: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            momentum: 0.9,
            weight_decay: 1e-4,
            iterations: 500,
            batch_size: 2,
            seed: 0,
            init_sigma: 0.01,
            log_every: 5,
            tracked_per_module: 6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("train.momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("train.weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        if self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::Config("train.batch_size and train.log_every must be positive".into()));
        }
        if !(self.init_sigma > 0.0 && self.init_sigma.is_finite()) {
            return Err(Error::Config(format!("train.init_sigma must be positive, got {}", self.init_sigma)));
        }
        Ok(())
    }

    pub fn pairs(&self) -> Vec<(String, String)> {
        [
            ("train.lr", self.lr.to_string()),
            ("train.momentum", self.momentum.to_string()),
            ("train.weight_decay", self.weight_decay.to_string()),
            ("train.iterations", self.iterations.to_string()),
            ("train.batch_size", self.batch_size.to_string()),
            ("train.seed", self.seed.to_string()),
            ("train.init_sigma", self.init_sigma.to_string()),
            ("train.log_every", self.log_every.to_string()),
            ("train.tracked_per_module", self.tracked_per_module.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn set(&mut self, key: &str, raw: &str) -> Result<bool> {
        use config::value;
        match key {
            "train.lr" => self.lr = value(key, raw)?,
            "train.momentum" => self.momentum = value(key, raw)?,
            "train.weight_decay" => self.weight_decay = value(key, raw)?,
            "train.iterations" => self.iterations = value(key, raw)?,
            "train.batch_size" => self.batch_size = value(key, raw)?,
            "train.seed" => self.seed = value(key, raw)?,
            "train.init_sigma" => self.init_sigma = value(key, raw)?,
            "train.log_every" => self.log_every = value(key, raw)?,
            "train.tracked_per_module" => self.tracked_per_module = value(key, raw)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Conv and FC weights ~ N(0, sigma²), biases 0, batch-norm at identity
/// with fresh running statistics.
pub fn init_params(store: &mut ParamStore, rng: &mut impl Rng, sigma: f64) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let kind = store.entry(id).kind;
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = match kind {
            ParamKind::Weight => Tensor::randn(&shape, 0.0, sigma, rng),
            ParamKind::Bias | ParamKind::BnShift | ParamKind::RunningMean => Tensor::zeros(&shape),
            ParamKind::BnGamma | ParamKind::RunningVar => Tensor::ones(&shape),
        };
    }
}

/// Component values of one loss evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub proposal_cls: f64,
    pub proposal_reg: f64,
    pub cls: f64,
    pub reg: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.proposal_cls + self.proposal_reg + self.cls + self.reg
    }

    pub fn is_finite(&self) -> bool {
        [self.proposal_cls, self.proposal_reg, self.cls, self.reg].iter().all(|v| v.is_finite())
    }
}

/// Builds the training loss for a batch on `s`'s tape: objectness BCE on
/// sampled anchors, smooth-L1 on positive anchors, softmax cross-entropy
/// over K+1 classes on sampled proposals (ground truth boxes are added to
/// the proposal pool) and smooth-L1 on the true-class deltas of positive
/// proposals. The anchor smooth-L1 sum is divided by the number of
/// positive anchors, so the one forced match of a small defect is not
/// drowned by the sampled negatives; the proposal smooth-L1 sum is divided
/// by the number of sampled proposals. The terms are summed with unit
/// weights.
pub fn total_loss(
    s: &mut Session,
    model: &Model,
    anchors: &AnchorSet,
    batch: &[&Sample],
    rng: &mut impl Rng,
) -> Result<(Var, LossParts)> {
    total_loss_with_proposals(s, model, anchors, batch, rng, None).map(|(loss, parts, _)| (loss, parts))
}

/// [`total_loss`] that can reuse a previous call's proposals (one list per
/// image, before ground truth is added) instead of selecting new ones.
/// Returns the proposals it used. Gradients never flow through proposal
/// selection, so freezing them makes the loss a smooth function of the
/// weights, as finite-difference checks need.
pub fn total_loss_with_proposals(
    s: &mut Session,
    model: &Model,
    anchors: &AnchorSet,
    batch: &[&Sample],
    rng: &mut impl Rng,
    frozen: Option<&[Vec<BBox>]>,
) -> Result<(Var, LossParts, Vec<Vec<BBox>>)> {
    let d = &model.config.detector;
    let images: Vec<_> = batch.iter().map(|b| &b.image).collect();
    let input = images_to_tensor(&images)?;
    let [n, _, h, w] = input.dims4()?;
    let x = s.tape.constant(input);
    let features = model.features(s, x)?;
    let heads = crate::detector::run_proposal_heads(s, &features, &model.heads)?;
    let anchor_boxes = anchors.boxes();

    let mut obj_idx = Vec::new();
    let mut obj_t = Vec::new();
    let mut del_idx = Vec::new();
    let mut del_t = Vec::new();
    let mut rois: Vec<Roi> = Vec::new();
    let mut roi_labels: Vec<usize> = Vec::new();
    let mut roi_targets: Vec<Option<(usize, [f64; 4])>> = Vec::new();
    let mut used: Vec<Vec<BBox>> = Vec::with_capacity(batch.len());

    for (i, sample) in batch.iter().enumerate() {
        let gt: Vec<BBox> = sample.annotations.iter().map(|a| a.bbox).collect();
        let labels = match_anchors(&anchor_boxes, &gt, d.rpn_pos_iou, d.rpn_neg_iou);
        let (pos, neg) = crate::detector::sample_matches(&labels, d.rpn_batch, d.rpn_pos_fraction, rng);
        for &g in &pos {
            obj_idx.push(anchors.objectness_index(n, i, g));
            obj_t.push(1.0);
            if let Match::Positive { deltas, .. } = labels[g] {
                for (j, t) in deltas.iter().enumerate() {
                    del_idx.push(anchors.delta_index(n, i, g, j));
                    del_t.push(*t);
                }
            }
        }
        for &g in &neg {
            obj_idx.push(anchors.objectness_index(n, i, g));
            obj_t.push(0.0);
        }

        // proposals are constants for the second stage
        let mut cands: Vec<BBox> = match frozen {
            Some(f) => f.get(i).ok_or_else(|| invalid!("no frozen proposals for image {i}"))?.clone(),
            None => {
                let (logits, deltas) = anchors.gather(&s.tape, &heads, i);
                select_proposals(anchors, &logits, &deltas, (h, w), d.pre_nms_top_k, d.post_nms_top_k, d.proposal_nms)
                    .into_iter()
                    .map(|p| p.bbox)
                    .collect()
            }
        };
        used.push(cands.clone());
        cands.extend_from_slice(&gt);
        let matches = match_boxes(&cands, &gt, d.roi_fg_iou, d.roi_fg_iou, false, d.box_weights);
        let (pos, neg) = crate::detector::sample_matches(&matches, d.roi_batch, d.roi_pos_fraction, rng);
        for &r in &pos {
            if let Match::Positive { gt: j, deltas } = matches[r] {
                let class = sample.annotations[j].class.index();
                rois.push(Roi { batch: i, bbox: cands[r] });
                roi_labels.push(class + 1);
                roi_targets.push(Some((class, deltas)));
            }
        }
        for &r in &neg {
            rois.push(Roi { batch: i, bbox: cands[r] });
            roi_labels.push(0);
            roi_targets.push(None);
        }
    }

    let beta = d.smooth_l1_beta;
    let proposal_cls = s.tape.sigmoid_bce(heads.objectness, &obj_idx, &obj_t)?;
    let proposal_reg = s.tape.smooth_l1(heads.deltas, &del_idx, &del_t, beta, (del_idx.len() / 4).max(1) as f64)?;

    let (cls, reg) = if rois.is_empty() {
        let zero = s.tape.constant(Tensor::scalar(0.0));
        (zero, zero)
    } else {
        let (pooled, order) = pool_rois(&mut s.tape, &features, &rois, d.roi_size)?;
        let (logits, deltas) = crate::detector::classify_and_regress(s, pooled, &model.heads, d.dropout)?;
        let labels: Vec<usize> = order.iter().map(|&o| roi_labels[o]).collect();
        let cls = s.tape.softmax_cross_entropy(logits, &labels)?;
        let width = s.tape.shape(deltas)[1];
        let mut idx = Vec::new();
        let mut tgt = Vec::new();
        for (row, &o) in order.iter().enumerate() {
            if let Some((class, t)) = roi_targets[o] {
                for (j, v) in t.iter().enumerate() {
                    idx.push(row * width + 4 * class + j);
                    tgt.push(*v);
                }
            }
        }
        let reg = s.tape.smooth_l1(deltas, &idx, &tgt, beta, order.len() as f64)?;
        (cls, reg)
    };

    let parts = LossParts {
        proposal_cls: s.tape.value(proposal_cls).item()?,
        proposal_reg: s.tape.value(proposal_reg).item()?,
        cls: s.tape.value(cls).item()?,
        reg: s.tape.value(reg).item()?,
    };
    let a = s.tape.add(proposal_cls, proposal_reg)?;
    let b = s.tape.add(cls, reg)?;
    let total = s.tape.add(a, b)?;
    Ok((total, parts, used))
}

/// Momentum buffers, one per trainable parameter, created on first use.
#[derive(Clone, Debug, Default)]
pub struct SgdState {
    velocity: Vec<Option<Vec<f64>>>,
}

impl SgdState {
    pub fn velocity(&self, id: ParamId) -> Option<&[f64]> {
        self.velocity.get(id.index()).and_then(|v| v.as_deref())
    }
}

/// `v ← m·v + g + wd·p; p ← p − lr·v`. Decay applies to conv/FC weights
/// and biases only, never to batch-norm scale or shift. Every gradient is
/// checked before anything is modified; a non-finite entry aborts the
/// step and names the parameter. Callers drop the gradients afterwards.
pub fn sgd_step(store: &mut ParamStore, grads: &[(ParamId, Vec<f64>)], state: &mut SgdState, cfg: &TrainConfig) -> Result<()> {
    for (id, g) in grads {
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of {} at element {i} is {}",
                store.entry(*id).name,
                g[i]
            )));
        }
    }
    if state.velocity.len() < store.len() {
        state.velocity.resize(store.len(), None);
    }
    for (id, g) in grads {
        let decay = if store.entry(*id).kind.decays() { cfg.weight_decay } else { 0.0 };
        let p = store.get_mut(*id).data_mut();
        if p.len() != g.len() {
            return Err(invalid!("gradient length {} for parameter of {} values", g.len(), p.len()));
        }
        let v = state.velocity[id.index()].get_or_insert_with(|| vec![0.0; g.len()]);
        for k in 0..p.len() {
            v[k] = cfg.momentum * v[k] + g[k] + decay * p[k];
            p[k] -= cfg.lr * v[k];
        }
    }
    Ok(())
}

/// One tracked scalar: element `element` of parameter `param`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackedWeight {
    pub module: String,
    pub weight_id: String,
    pub param: ParamId,
    pub element: usize,
}

pub const TRACKED_MODULES: [&str; 4] = ["backbone", "multilevel", "attention", "detector"];

/// Picks `per_module` trainable scalars from each module, spread evenly
/// over the module's flattened trainable values.
pub fn choose_tracked(store: &ParamStore, per_module: usize) -> Vec<TrackedWeight> {
    let mut out = Vec::new();
    for module in TRACKED_MODULES {
        let prefix = format!("{module}.");
        let params: Vec<ParamId> = store
            .ids()
            .filter(|&id| {
                let e = store.entry(id);
                e.kind.is_trainable() && e.name.starts_with(&prefix)
            })
            .collect();
        let total: usize = params.iter().map(|&id| store.get(id).numel()).sum();
        if total == 0 {
            continue;
        }
        for k in 0..per_module.min(total) {
            // midpoints of equal slices, so both ends are avoided
            let mut flat = (2 * k + 1) * total / (2 * per_module.min(total));
            for &id in &params {
                let len = store.get(id).numel();
                if flat < len {
                    out.push(TrackedWeight {
                        module: module.to_string(),
                        weight_id: format!("{}[{flat}]", store.entry(id).name),
                        param: id,
                        element: flat,
                    });
                    break;
                }
                flat -= len;
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightRecord {
    pub iteration: usize,
    pub module: String,
    pub weight_id: String,
    pub value: f64,
}

/// Loss and tracked-weight history of a run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    /// `(iteration, parts)`, iterations counted from 1.
    pub losses: Vec<(usize, LossParts)>,
    pub weights: Vec<WeightRecord>,
}

impl TrainLog {
    pub fn loss_csv(&self) -> String {
        let mut out = String::from("iter,total,proposal_cls,proposal_reg,cls,reg\n");
        for (i, p) in &self.losses {
            let _ = writeln!(out, "{i},{},{},{},{},{}", p.total(), p.proposal_cls, p.proposal_reg, p.cls, p.reg);
        }
        out
    }

    pub fn weights_csv(&self) -> String {
        let mut out = String::from("iter,module,weight_id,value\n");
        for r in &self.weights {
            let _ = writeln!(out, "{},{},{},{}", r.iteration, r.module, r.weight_id, r.value);
        }
        out
    }

    /// Total loss at `iteration`, if logged.
    pub fn total_at(&self, iteration: usize) -> Option<f64> {
        self.losses.iter().find(|(i, _)| *i == iteration).map(|(_, p)| p.total())
    }

    pub fn final_total(&self) -> Option<f64> {
        self.losses.last().map(|(_, p)| p.total())
    }

    /// Values of each tracked weight over time, in first-seen order.
    pub fn trajectories(&self) -> Vec<(String, String, Vec<f64>)> {
        let mut out: Vec<(String, String, Vec<f64>)> = Vec::new();
        for r in &self.weights {
            match out.iter_mut().find(|(m, w, _)| *m == r.module && *w == r.weight_id) {
                Some(t) => t.2.push(r.value),
                None => out.push((r.module.clone(), r.weight_id.clone(), vec![r.value])),
            }
        }
        out
    }
}

/// Standard deviation of the last 10% of a trajectory (at least two
/// points) and the range of the whole trajectory.
pub fn settling_stats(values: &[f64]) -> (f64, f64) {
    let tail = (values.len() / 10).max(2).min(values.len());
    let last = &values[values.len() - tail..];
    let mean = last.iter().sum::<f64>() / last.len() as f64;
    let std = (last.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / last.len() as f64).sqrt();
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (std, hi - lo)
}

/// A model under training with its optimizer state and batch stream.
pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub log: TrainLog,
    pub iteration: usize,
    state: SgdState,
    rng: ChaCha8Rng,
    tracked: Vec<TrackedWeight>,
    order: Vec<usize>,
    cursor: usize,
    anchors: Option<((usize, usize), AnchorSet)>,
    /// Sample ids of the most recent batch.
    pub last_batch: Vec<String>,
}

impl Trainer {
    /// Builds and initializes a model from the train seed.
    pub fn new(model_config: ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut model = Model::new(model_config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        init_params(&mut model.store, &mut rng, config.init_sigma);
        let tracked = choose_tracked(&model.store, config.tracked_per_module);
        let mut t = Self {
            model,
            config,
            log: TrainLog::default(),
            iteration: 0,
            state: SgdState::default(),
            rng,
            tracked,
            order: Vec::new(),
            cursor: 0,
            anchors: None,
            last_batch: Vec::new(),
        };
        t.record_weights();
        Ok(t)
    }

    pub fn tracked(&self) -> &[TrackedWeight] {
        &self.tracked
    }

    fn record_weights(&mut self) {
        for t in &self.tracked {
            self.log.weights.push(WeightRecord {
                iteration: self.iteration,
                module: t.module.clone(),
                weight_id: t.weight_id.clone(),
                value: self.model.store.get(t.param).data()[t.element],
            });
        }
    }

    /// Next batch from a seeded shuffle that reshuffles whenever it runs
    /// out.
    fn next_batch(&mut self, len: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.config.batch_size);
        while out.len() < self.config.batch_size {
            if self.cursor >= self.order.len() {
                self.order = (0..len).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }

    /// One forward/backward/update pass. Returns the loss before the update.
    pub fn step(&mut self, samples: &[&Sample]) -> Result<LossParts> {
        if samples.is_empty() {
            return Err(invalid!("training needs at least one sample"));
        }
        let picks = self.next_batch(samples.len());
        let batch: Vec<&Sample> = picks.iter().map(|&i| samples[i]).collect();
        self.last_batch = batch.iter().map(|s| s.id.clone()).collect();
        let (h, w) = (batch[0].image.height, batch[0].image.width);
        if self.anchors.as_ref().map(|(size, _)| *size) != Some((h, w)) {
            self.anchors = Some(((h, w), self.model.anchors(h, w)));
        }
        let anchors = &self.anchors.as_ref().expect("anchors cached").1;
        let dropout_seed: u64 = self.rng.gen();

        let (parts, grads, updates) = {
            let mut s = Session::new(&self.model.store, Phase::Train);
            s.seed_dropout(dropout_seed);
            let (loss, parts) = total_loss(&mut s, &self.model, anchors, &batch, &mut self.rng)?;
            if !parts.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss {parts:?} at iteration {} on batch [{}]",
                    self.iteration + 1,
                    self.last_batch.join(", ")
                )));
            }
            s.tape.backward(loss)?;
            if let Some((v, op)) = s.tape.first_non_finite_grad() {
                return Err(Error::NonFinite(format!(
                    "gradient of {op} node {} is not finite at iteration {} on batch [{}]",
                    v.index(),
                    self.iteration + 1,
                    self.last_batch.join(", ")
                )));
            }
            let updates = s.take_stat_updates();
            (parts, s.grads(), updates)
        };
        sgd_step(&mut self.model.store, &grads, &mut self.state, &self.config).map_err(|e| match e {
            Error::NonFinite(msg) => Error::NonFinite(format!(
                "{msg} at iteration {} on batch [{}]",
                self.iteration + 1,
                self.last_batch.join(", ")
            )),
            other => other,
        })?;
        self.model.store.apply_stat_updates(updates);
        self.iteration += 1;
        self.log.losses.push((self.iteration, parts));
        if self.iteration % self.config.log_every == 0 {
            self.record_weights();
        }
        Ok(parts)
    }

    /// Runs the remaining configured iterations. The final weights are
    /// always recorded.
    pub fn run(&mut self, samples: &[&Sample]) -> Result<()> {
        while self.iteration < self.config.iterations {
            self.step(samples)?;
        }
        if self.iteration % self.config.log_every != 0 {
            self.record_weights();
        }
        Ok(())
    }

    /// Meta entries for the checkpoint: the training configuration.
    pub fn checkpoint_meta(&self) -> Vec<(String, String)> {
        let mut out = self.config.pairs();
        out.push(("train.completed_iterations".to_string(), self.iteration.to_string()));
        out
    }
}

/// Detections for `samples`, in eval mode, one image at a time.
pub fn predict(model: &Model, samples: &[&Sample]) -> Result<Vec<ImageResult>> {
    samples
        .iter()
        .map(|s| {
            let x = images_to_tensor(&[&s.image])?;
            let detections = model.detect(&x)?.pop().unwrap_or_default();
            Ok(ImageResult {
                id: s.id.clone(),
                ground_truth: s.ground_truth(),
                detections,
            })
        })
        .collect()
}

pub fn evaluate_model(model: &Model, samples: &[&Sample], iou_thr: f64, conf_thr: f64) -> Result<EvalReport> {
    evaluate(&predict(model, samples)?, iou_thr, conf_thr, ApMode::AllPoints)
}

pub struct TrainOutcome {
    pub model: Model,
    pub log: TrainLog,
    /// mAP@0.5 on the validation samples; `None` without any, or when no
    /// class has ground truth.
    pub val_map: Option<f64>,
}

/// Initializes, trains for `config.iterations` and scores the validation
/// samples.
pub fn train(model_config: ModelConfig, config: TrainConfig, train_set: &[&Sample], val_set: &[&Sample]) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(invalid!("empty training split"));
    }
    let mut t = Trainer::new(model_config, config)?;
    t.run(train_set)?;
    let val_map = if val_set.is_empty() {
        None
    } else {
        evaluate_model(&t.model, val_set, 0.5, 0.5)?.map
    };
    Ok(TrainOutcome {
        model: t.model,
        log: t.log,
        val_map,
    })
}

/// Parses a comma-separated beta list, dropping repeats with a warning.
pub fn parse_betas(raw: &str) -> Result<Vec<f64>> {
    let mut out: Vec<f64> = Vec::new();
    for part in raw.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let b: f64 = part.parse().map_err(|_| invalid!("bad beta {part:?}"))?;
        if !b.is_finite() {
            return Err(invalid!("beta must be finite, got {part}"));
        }
        if out.contains(&b) {
            log::warn!("beta {b} listed more than once; running it once");
        } else {
            out.push(b);
        }
    }
    if out.is_empty() {
        return Err(invalid!("empty beta list"));
    }
    Ok(out)
}

/// Trains one model per beta from the same seed.
pub fn sweep_beta(
    model_config: &ModelConfig,
    config: &TrainConfig,
    betas: &[f64],
    train_set: &[&Sample],
    val_set: &[&Sample],
) -> Result<Vec<(f64, TrainOutcome)>> {
    if betas.is_empty() {
        return Err(invalid!("empty beta list"));
    }
    betas
        .iter()
        .map(|&beta| {
            let mc = ModelConfig {
                beta,
                ..model_config.clone()
            };
            Ok((beta, train(mc, config.clone(), train_set, val_set)?))
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

/// `beta,final_loss,val_map`, one row per run; missing values stay empty.
pub fn sweep_csv(runs: &[(f64, &TrainOutcome)]) -> String {
    let mut out = String::from("beta,final_loss,val_map\n");
    for (beta, r) in runs {
        let _ = writeln!(out, "{beta},{},{}", opt(r.log.final_total()), opt(r.val_map));
    }
    out
}

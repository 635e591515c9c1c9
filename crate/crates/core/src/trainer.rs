//! Training protocols: clean training, trigger-generator training against a
//! frozen model, the joint backdoor objective, fine-tuning, re-training from
//! scratch, and dataset poisoning.
//!
//! Every protocol is a pure function of its inputs and `cfg.seed`: batch
//! order comes from a seeded shuffle and nothing else draws randomness, so
//! identical calls produce bit-identical parameter trajectories.
//!
//! Mixed batches are laid out as: the first `round(rho_b * B)` samples form
//! the attack partition (their triggered variants must classify as the
//! target class), the next `round(rho_c * B)` the cross-trigger partition
//! (another sample's trigger must leave the true label intact), and the
//! clean term always runs over the full batch.

use crate::autodiff::{scalar_value, Ax, Tape, Var};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::netbuilder::{InitSpec, NetworkInstance, SkeletonConfig};
use crate::nn::{Binder, Mode, ParamId, ParamStore};
use crate::rng::{child_seed, seeded};
use crate::triggergen::{apply_trigger_t, diversity_loss_t, GeneratorInstance};
use crate::archspace::ArchSpec;
use ndarray::{Array4, ArrayD, Axis};
use rand::seq::SliceRandom;

/// First-order optimizer family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    /// Adam with betas (0.9, 0.999).
    Adam,
    /// SGD with momentum 0.9.
    SgdMomentum,
}

/// Learning-rate schedule over epochs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrSchedule {
    /// Fixed learning rate.
    Constant,
    /// Half-cosine decay from the initial rate toward zero.
    CosineAnnealing,
}

/// Knobs shared by every protocol.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    /// Training epochs (model protocols).
    pub epochs: usize,
    /// Optimizer family.
    pub optimizer: OptimizerKind,
    /// Initial learning rate.
    pub learning_rate: f64,
    /// Schedule applied per epoch.
    pub lr_schedule: LrSchedule,
    /// Mini-batch size.
    pub batch_size: usize,
    /// Seed of the batch shuffles.
    pub seed: u64,
    /// Backdoor target class.
    pub target_class: usize,
    /// Fraction of each batch forming the attack partition.
    pub rho_b: f64,
    /// Fraction of each batch forming the cross-trigger partition.
    pub rho_c: f64,
    /// Weight of the diversity regularizer.
    pub lambda_div: f64,
    /// Weight of the attack term in the joint objective.
    pub lambda_atk: f64,
    /// Fraction of a dataset replaced when poisoning.
    pub poison_ratio: f64,
    /// Mask-network pretraining epochs.
    pub mask_epochs: usize,
    /// Pattern-network training epochs.
    pub mark_epochs: usize,
}

impl Default for TrainConfig {
    /// Backdoor-attack defaults: Adam at 0.01, batch 96, rho_b = rho_c = 0.1,
    /// lambda_div = 1, mask 25 epochs, mark 10 epochs.
    fn default() -> TrainConfig {
        TrainConfig {
            epochs: 20,
            optimizer: OptimizerKind::Adam,
            learning_rate: 0.01,
            lr_schedule: LrSchedule::Constant,
            batch_size: 96,
            seed: 0,
            target_class: 0,
            rho_b: 0.1,
            rho_c: 0.1,
            lambda_div: 1.0,
            lambda_atk: 1.0,
            poison_ratio: 0.0,
            mask_epochs: 25,
            mark_epochs: 10,
        }
    }
}

impl TrainConfig {
    /// Fine-tuning defaults: 50 epochs of SGD at 0.01 under cosine
    /// annealing, batch 96.
    pub fn finetune_defaults() -> TrainConfig {
        TrainConfig {
            epochs: 50,
            optimizer: OptimizerKind::SgdMomentum,
            learning_rate: 0.01,
            lr_schedule: LrSchedule::CosineAnnealing,
            ..TrainConfig::default()
        }
    }

    /// Check rate and fraction invariants.
    pub fn validate(&self) -> Result<()> {
        if self.rho_b < 0.0 || self.rho_c < 0.0 || self.rho_b + self.rho_c > 1.0 {
            return Err(Error::Config(format!(
                "rho_b + rho_c must stay in [0, 1], got {} + {}",
                self.rho_b, self.rho_c
            )));
        }
        if self.learning_rate <= 0.0 && self.epochs > 0 && self.learning_rate < 0.0 {
            return Err(Error::Config("learning rate must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.poison_ratio) {
            return Err(Error::Config(format!(
                "poison_ratio must lie in [0, 1], got {}",
                self.poison_ratio
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    fn lr_at(&self, epoch: usize, total: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::CosineAnnealing => {
                let t = epoch as f64 / total.max(1) as f64;
                self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// Attack / cross partition sizes for a batch of `b` samples.
pub fn partition_sizes(b: usize, rho_b: f64, rho_c: f64) -> (usize, usize) {
    let nb = ((rho_b * b as f64).round() as usize).min(b);
    let nc = ((rho_c * b as f64).round() as usize).min(b - nb);
    (nb, nc)
}

/// One trace line of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    /// Epoch index, starting at 0.
    pub epoch: usize,
    /// Which loop produced the row (`clean`, `joint`, `mask`, `mark`, ...).
    pub split: String,
    /// Mean total loss over the epoch.
    pub loss: f64,
    /// Training accuracy of the clean term, when available.
    pub acc: Option<f64>,
    /// Fraction of attack-partition samples hitting the target class.
    pub asr: Option<f64>,
}

/// Per-epoch log of a protocol run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainTrace {
    /// Rows in epoch order.
    pub rows: Vec<TraceRow>,
}

impl TrainTrace {
    fn push(&mut self, row: TraceRow) {
        self.rows.push(row);
    }

    /// Render as `epoch,split,loss,acc,asr` CSV.
    pub fn to_csv(&self) -> String {
        let fmt_opt = |v: &Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        let mut out = String::from("epoch,split,loss,acc,asr\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch,
                r.split,
                r.loss,
                fmt_opt(&r.acc),
                fmt_opt(&r.asr)
            ));
        }
        out
    }
}

/// Optimizer over one parameter store.
struct Optimizer {
    kind: OptimizerKind,
    /// Adam first/second moments or SGD momentum buffers, per parameter.
    slot_a: Vec<Ax>,
    slot_b: Vec<Ax>,
    steps: u64,
}

impl Optimizer {
    fn new(kind: OptimizerKind, store: &ParamStore) -> Optimizer {
        let zeros: Vec<Ax> = store
            .params()
            .iter()
            .map(|p| ArrayD::zeros(p.value.raw_dim()))
            .collect();
        Optimizer { kind, slot_a: zeros.clone(), slot_b: zeros, steps: 0 }
    }

    /// Apply one update; `grads[i]` pairs with parameter `i`, `None` meaning
    /// a zero gradient.
    fn step(&mut self, store: &mut ParamStore, grads: &[Option<Ax>], lr: f64) {
        self.steps += 1;
        match self.kind {
            OptimizerKind::Adam => {
                let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
                let bc1 = 1.0 - b1.powi(self.steps as i32);
                let bc2 = 1.0 - b2.powi(self.steps as i32);
                for (i, grad) in grads.iter().enumerate() {
                    let m = &mut self.slot_a[i];
                    let v = &mut self.slot_b[i];
                    match grad {
                        Some(g) => {
                            m.zip_mut_with(g, |mi, &gi| *mi = b1 * *mi + (1.0 - b1) * gi);
                            v.zip_mut_with(g, |vi, &gi| *vi = b2 * *vi + (1.0 - b2) * gi * gi);
                        }
                        None => {
                            m.mapv_inplace(|mi| b1 * mi);
                            v.mapv_inplace(|vi| b2 * vi);
                        }
                    }
                    let p = &mut store.param_mut(ParamId(i)).value;
                    ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|pi, &mi, &vi| {
                        *pi -= lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
                    });
                }
            }
            OptimizerKind::SgdMomentum => {
                let mu = 0.9;
                for (i, grad) in grads.iter().enumerate() {
                    let buf = &mut self.slot_a[i];
                    match grad {
                        Some(g) => buf.zip_mut_with(g, |bi, &gi| *bi = mu * *bi + gi),
                        None => buf.mapv_inplace(|bi| mu * bi),
                    }
                    let p = &mut store.param_mut(ParamId(i)).value;
                    ndarray::Zip::from(p).and(&*buf).for_each(|pi, &bi| {
                        *pi -= lr * bi;
                    });
                }
            }
        }
    }
}

fn collect_grads(tape: &Tape, store: &ParamStore, binder: &Binder) -> Vec<Option<Ax>> {
    (0..store.params().len())
        .map(|i| binder.grad(tape, ParamId(i)).cloned())
        .collect()
}

fn slice_batch(x: &Array4<f64>, labels: &[usize], lo: usize, hi: usize) -> (Array4<f64>, Vec<usize>) {
    let sub = x.slice(ndarray::s![lo..hi, .., .., ..]).to_owned();
    (sub, labels[lo..hi].to_vec())
}

fn count_hits(logits: &Ax, labels: &[usize]) -> usize {
    let view = logits.view().into_dimensionality::<ndarray::Ix2>().expect("logits rank 2");
    let mut hits = 0;
    for (i, &label) in labels.iter().enumerate() {
        let row = view.row(i);
        let mut best = 0;
        for c in 1..row.len() {
            if row[c] > row[best] {
                best = c;
            }
        }
        if best == label {
            hits += 1;
        }
    }
    hits
}

/// Whether the joint loop attaches a generator.
enum Protocol<'g> {
    Clean,
    Joint(&'g mut GeneratorInstance),
}

/// The shared epoch loop. The clean path and the joint path build identical
/// graphs whenever every attack knob is zero, which keeps their parameter
/// trajectories bit-identical under one seed.
fn run_model_training(
    net: &mut NetworkInstance,
    mut protocol: Protocol<'_>,
    data: &LabeledDataset,
    cfg: &TrainConfig,
    split: &str,
) -> Result<TrainTrace> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Dataset("cannot train on an empty dataset".into()));
    }
    net.set_mode(Mode::Train);
    let mut net_opt = Optimizer::new(cfg.optimizer, net.store());
    let mut gen_opts = match &protocol {
        Protocol::Clean => None,
        Protocol::Joint(gen) => Some((
            Optimizer::new(cfg.optimizer, gen.mask_store()),
            Optimizer::new(cfg.optimizer, gen.mark_store()),
        )),
    };
    if let Protocol::Joint(gen) = &mut protocol {
        gen.set_mode(Mode::Train);
    }

    let mut rng = seeded(cfg.seed);
    let mut trace = TrainTrace::default();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch, cfg.epochs);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        let mut clean_hits = 0usize;
        let mut atk_hits = 0usize;
        let mut atk_seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, labels) = data.batch(chunk);
            let b = labels.len();
            let mut tape = Tape::new();
            let mut net_binder = Binder::new(net.store());
            let x_var = tape.leaf(x.clone().into_dyn());
            let clean_logits = net.forward_t(&mut tape, &mut net_binder, x_var);
            let mut total = tape.cross_entropy(clean_logits, &labels);
            clean_hits += count_hits(tape.value(clean_logits), &labels);

            let mut gen_binders = None;
            if let Protocol::Joint(gen) = &mut protocol {
                let (nb, nc) = partition_sizes(b, cfg.rho_b, cfg.rho_c);
                let mut mask_binders = Vec::new();
                let mut mark_binders = Vec::new();
                if cfg.lambda_atk != 0.0 && nb > 0 {
                    let (xa, _) = slice_batch(&x, &labels, 0, nb);
                    let xa_var = tape.leaf(xa.into_dyn());
                    let bound = gen.generate_t(&mut tape, xa_var);
                    let triggered =
                        apply_trigger_t(&mut tape, xa_var, bound.mask, bound.pattern, x.dim().1);
                    let atk_logits = net.forward_t(&mut tape, &mut net_binder, triggered);
                    let atk_targets = vec![cfg.target_class; nb];
                    let atk_loss = tape.cross_entropy(atk_logits, &atk_targets);
                    let weighted = tape.mul_scalar(atk_loss, cfg.lambda_atk);
                    total = tape.add(total, weighted);
                    atk_hits += count_hits(tape.value(atk_logits), &atk_targets);
                    atk_seen += nb;
                    if cfg.lambda_div != 0.0 && nb >= 2 {
                        let x2 = tape.roll_rows(xa_var, 1);
                        let m2 = tape.roll_rows(bound.mask, 1);
                        let p2 = tape.roll_rows(bound.pattern, 1);
                        let t2 = apply_trigger_t(&mut tape, x2, m2, p2, x.dim().1);
                        let div = diversity_loss_t(&mut tape, xa_var, x2, triggered, t2);
                        let weighted = tape.mul_scalar(div, cfg.lambda_div);
                        total = tape.add(total, weighted);
                    }
                    mask_binders.push(bound.mask_binder);
                    mark_binders.push(bound.mark_binder);
                }
                if cfg.rho_c != 0.0 && nc > 0 {
                    let (xc, yc) = slice_batch(&x, &labels, nb, nb + nc);
                    let xc_var = tape.leaf(xc.into_dyn());
                    let bound = gen.generate_t(&mut tape, xc_var);
                    let m_other = tape.roll_rows(bound.mask, 1);
                    let p_other = tape.roll_rows(bound.pattern, 1);
                    let crossed =
                        apply_trigger_t(&mut tape, xc_var, m_other, p_other, x.dim().1);
                    let cross_logits = net.forward_t(&mut tape, &mut net_binder, crossed);
                    let cross_loss = tape.cross_entropy(cross_logits, &yc);
                    total = tape.add(total, cross_loss);
                    mask_binders.push(bound.mask_binder);
                    mark_binders.push(bound.mark_binder);
                }
                gen_binders = Some((mask_binders, mark_binders));
            }

            let loss_val = scalar_value(tape.value(total));
            if !loss_val.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("{split} loss became {loss_val}"),
                });
            }
            loss_sum += loss_val * b as f64;
            seen += b;

            tape.backward(total)?;
            let net_grads = collect_grads(&tape, net.store(), &net_binder);
            net_opt.step(net.store_mut(), &net_grads, lr);
            if let (Protocol::Joint(gen), Some((mask_opt, mark_opt)), Some((mbs, kbs))) =
                (&mut protocol, &mut gen_opts, &gen_binders)
            {
                let sum_grads = |store: &ParamStore, binders: &[Binder]| -> Vec<Option<Ax>> {
                    (0..store.params().len())
                        .map(|i| {
                            let mut acc: Option<Ax> = None;
                            for binder in binders {
                                if let Some(g) = binder.grad(&tape, ParamId(i)) {
                                    acc = Some(match acc {
                                        Some(mut a) => {
                                            a += g;
                                            a
                                        }
                                        None => g.clone(),
                                    });
                                }
                            }
                            acc
                        })
                        .collect()
                };
                let mask_grads = sum_grads(gen.mask_store(), mbs);
                let mark_grads = sum_grads(gen.mark_store(), kbs);
                mask_opt.step(gen.mask_store_mut(), &mask_grads, lr);
                mark_opt.step(gen.mark_store_mut(), &mark_grads, lr);
            }
        }

        trace.push(TraceRow {
            epoch,
            split: split.to_string(),
            loss: loss_sum / seen as f64,
            acc: Some(clean_hits as f64 / seen as f64),
            asr: (atk_seen > 0).then(|| atk_hits as f64 / atk_seen as f64),
        });
    }
    Ok(trace)
}

/// Minimize mean cross-entropy on clean data.
pub fn train_clean(
    net: &mut NetworkInstance,
    data: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<TrainTrace> {
    run_model_training(net, Protocol::Clean, data, cfg, "clean")
}

/// Joint backdoor objective: clean term over the whole batch, a weighted
/// attack term and a cross-trigger term over their partitions, plus the
/// diversity regularizer. Updates the model and both generator networks.
pub fn train_joint(
    net: &mut NetworkInstance,
    gen: &mut GeneratorInstance,
    data: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<TrainTrace> {
    run_model_training(net, Protocol::Joint(gen), data, cfg, "joint")
}

/// Continue training an already-trained model on clean data (fine-tuning
/// defaults: SGD under cosine annealing).
pub fn fine_tune(
    net: &mut NetworkInstance,
    data: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<TrainTrace> {
    run_model_training(net, Protocol::Clean, data, cfg, "finetune")
}

/// Train the trigger generator against a frozen, clean-trained model.
///
/// Phase 1 pretrains the mask network (`cfg.mask_epochs`) on mask diversity
/// plus a density hinge `max(0, mean(m) - 0.3)`, then freezes it. Phase 2
/// trains the pattern network (`cfg.mark_epochs`) on the attack term over
/// the `rho_b` partition, the cross-trigger term over the `rho_c` partition,
/// and the weighted trigger diversity. The model's parameters and buffers
/// are never touched.
pub fn train_generator(
    gen: &mut GeneratorInstance,
    frozen_net: &mut NetworkInstance,
    data: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<TrainTrace> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Dataset("cannot train on an empty dataset".into()));
    }
    let prior_mode = frozen_net.mode();
    frozen_net.set_mode(Mode::Eval);
    gen.set_mode(Mode::Train);
    let mut trace = TrainTrace::default();
    let channels = data.image_shape().2;

    // phase 1: mask pretraining
    let mut rng = seeded(child_seed(cfg.seed, 1));
    let mut mask_opt = Optimizer::new(cfg.optimizer, gen.mask_store());
    gen.frozen_mask = false;
    for epoch in 0..cfg.mask_epochs {
        let lr = cfg.lr_at(epoch, cfg.mask_epochs);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let (x, _) = data.batch(chunk);
            let mut tape = Tape::new();
            let x_var = tape.leaf(x.into_dyn());
            let (mask, mask_binder) = gen.mask_forward_t(&mut tape, x_var);
            // mask diversity: distinct inputs should get distinct masks
            let x2 = tape.roll_rows(x_var, 1);
            let m2 = tape.roll_rows(mask, 1);
            let div = diversity_loss_t(&mut tape, x_var, x2, mask, m2);
            // density hinge: max(0, mean(m) - 0.3)
            let density = tape.mean_all(mask);
            let over = tape.add_scalar(density, -0.3);
            let hinge = tape.max_with_scalar(over, 0.0);
            let total = tape.add(div, hinge);

            let loss_val = scalar_value(tape.value(total));
            if !loss_val.is_finite() {
                return Err(Error::Diverged { epoch, detail: "mask loss".into() });
            }
            loss_sum += loss_val * chunk.len() as f64;
            seen += chunk.len();
            tape.backward(total)?;
            let grads = collect_grads(&tape, gen.mask_store(), &mask_binder);
            mask_opt.step(gen.mask_store_mut(), &grads, lr);
        }
        trace.push(TraceRow {
            epoch,
            split: "mask".into(),
            loss: loss_sum / seen.max(1) as f64,
            acc: None,
            asr: None,
        });
    }
    gen.frozen_mask = true;

    // phase 2: pattern training against the frozen model
    let mut rng = seeded(child_seed(cfg.seed, 2));
    let mut mark_opt = Optimizer::new(cfg.optimizer, gen.mark_store());
    for epoch in 0..cfg.mark_epochs {
        let lr = cfg.lr_at(epoch, cfg.mark_epochs);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        let mut atk_hits = 0usize;
        let mut atk_seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, labels) = data.batch(chunk);
            let b = labels.len();
            let (nb, nc) = partition_sizes(b, cfg.rho_b, cfg.rho_c);
            if nb == 0 && nc == 0 {
                continue;
            }
            let mut tape = Tape::new();
            let mut total: Option<Var> = None;
            let mut mark_binders = Vec::new();

            if nb > 0 {
                let (xa, _) = slice_batch(&x, &labels, 0, nb);
                let xa_var = tape.leaf(xa.into_dyn());
                let bound = gen.generate_t(&mut tape, xa_var);
                let triggered =
                    apply_trigger_t(&mut tape, xa_var, bound.mask, bound.pattern, channels);
                let mut net_binder = Binder::new(frozen_net.store());
                let logits = frozen_net.forward_t(&mut tape, &mut net_binder, triggered);
                let targets = vec![cfg.target_class; nb];
                let atk = tape.cross_entropy(logits, &targets);
                total = Some(atk);
                atk_hits += count_hits(tape.value(logits), &targets);
                atk_seen += nb;
                if cfg.lambda_div != 0.0 && nb >= 2 {
                    let x2 = tape.roll_rows(xa_var, 1);
                    let m2 = tape.roll_rows(bound.mask, 1);
                    let p2 = tape.roll_rows(bound.pattern, 1);
                    let t2 = apply_trigger_t(&mut tape, x2, m2, p2, channels);
                    let div = diversity_loss_t(&mut tape, xa_var, x2, triggered, t2);
                    let weighted = tape.mul_scalar(div, cfg.lambda_div);
                    total = Some(tape.add(total.unwrap(), weighted));
                }
                mark_binders.push(bound.mark_binder);
            }
            if nc > 0 {
                let (xc, yc) = slice_batch(&x, &labels, nb, nb + nc);
                let xc_var = tape.leaf(xc.into_dyn());
                let bound = gen.generate_t(&mut tape, xc_var);
                let m_other = tape.roll_rows(bound.mask, 1);
                let p_other = tape.roll_rows(bound.pattern, 1);
                let crossed = apply_trigger_t(&mut tape, xc_var, m_other, p_other, channels);
                let mut net_binder = Binder::new(frozen_net.store());
                let logits = frozen_net.forward_t(&mut tape, &mut net_binder, crossed);
                let cross = tape.cross_entropy(logits, &yc);
                total = Some(match total {
                    Some(t) => tape.add(t, cross),
                    None => cross,
                });
                mark_binders.push(bound.mark_binder);
            }

            let total = total.expect("at least one partition is nonempty");
            let loss_val = scalar_value(tape.value(total));
            if !loss_val.is_finite() {
                return Err(Error::Diverged { epoch, detail: "mark loss".into() });
            }
            loss_sum += loss_val * b as f64;
            seen += b;
            tape.backward(total)?;
            let grads: Vec<Option<Ax>> = (0..gen.mark_store().params().len())
                .map(|i| {
                    let mut acc: Option<Ax> = None;
                    for binder in &mark_binders {
                        if let Some(g) = binder.grad(&tape, ParamId(i)) {
                            acc = Some(match acc {
                                Some(mut a) => {
                                    a += g;
                                    a
                                }
                                None => g.clone(),
                            });
                        }
                    }
                    acc
                })
                .collect();
            mark_opt.step(gen.mark_store_mut(), &grads, lr);
        }
        trace.push(TraceRow {
            epoch,
            split: "mark".into(),
            loss: loss_sum / seen.max(1) as f64,
            acc: None,
            asr: (atk_seen > 0).then(|| atk_hits as f64 / atk_seen as f64),
        });
    }
    frozen_net.set_mode(prior_mode);
    Ok(trace)
}

/// Re-initialize the architecture with a new seed and clean-train it from
/// scratch; the supplied generator stays fixed and is only used afterwards
/// to measure architecture-level vulnerability.
pub fn retrain_scratch(
    arch: &ArchSpec,
    _gen_fixed: &GeneratorInstance,
    data: &LabeledDataset,
    skel: &SkeletonConfig,
    cfg: &TrainConfig,
) -> Result<(NetworkInstance, TrainTrace)> {
    let mut net = NetworkInstance::build_network(*arch, *skel, InitSpec::gaussian(cfg.seed))?;
    let trace = run_model_training(&mut net, Protocol::Clean, data, cfg, "retrain")?;
    Ok((net, trace))
}

/// Replace `ceil(ratio * N)` seeded-shuffle-chosen samples with their
/// triggered variants relabeled to the target class.
pub fn make_poisoned_dataset(
    data: &LabeledDataset,
    gen: &mut GeneratorInstance,
    ratio: f64,
    target_class: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!("poison ratio must lie in [0, 1], got {ratio}")));
    }
    let n = data.len();
    let k = (ratio * n as f64).ceil() as usize;
    let mut out = data.clone();
    if k == 0 {
        return Ok(out);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded(seed));
    let chosen = &order[..k];

    gen.set_mode(Mode::Eval);
    for batch in chosen.chunks(64) {
        let (x, _) = data.batch(batch);
        let triggers = gen.generate_trigger(&x)?;
        let triggered = crate::triggergen::apply_trigger(&x, &triggers);
        for (row, &idx) in batch.iter().enumerate() {
            out.images
                .index_axis_mut(Axis(0), idx)
                .assign(&triggered.index_axis(Axis(0), row));
            out.labels[idx] = target_class;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archspace::Operator;
    use crate::data::{make_synthetic, SyntheticSpec};
    use crate::triggergen::GeneratorConfig;

    fn tiny_data(per_class: usize) -> LabeledDataset {
        make_synthetic(
            &SyntheticSpec {
                train_per_class: per_class,
                test_per_class: 2,
                ..Default::default()
            },
            21,
        )
        .train
    }

    fn tiny_skel() -> SkeletonConfig {
        SkeletonConfig {
            stages: 2,
            cells_per_stage: 1,
            base_width: 8,
            input_shape: (8, 8, 3),
            num_classes: 4,
        }
    }

    fn tiny_gen_cfg() -> GeneratorConfig {
        GeneratorConfig {
            input_shape: (8, 8, 3),
            encoder_widths: vec![2, 3, 4],
            middle_width: 4,
            pooling_stages: 3,
        }
    }

    fn conv_arch() -> ArchSpec {
        ArchSpec::new([
            Operator::Conv3x3,
            Operator::SkipConnect,
            Operator::Conv1x1,
            Operator::SkipConnect,
            Operator::Conv3x3,
            Operator::Conv1x1,
        ])
    }

    #[test]
    fn partition_arithmetic() {
        assert_eq!(partition_sizes(96, 0.1, 0.1), (10, 10));
        assert_eq!(partition_sizes(10, 0.0, 0.0), (0, 0));
        assert_eq!(partition_sizes(10, 1.0, 0.0), (10, 0));
        // rounding never overflows the batch
        assert_eq!(partition_sizes(3, 0.5, 0.5), (2, 1));
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let data = tiny_data(8);
        let mut net = NetworkInstance::build_network(
            conv_arch(),
            tiny_skel(),
            InitSpec::gaussian(1),
        )
        .unwrap();
        let before: Vec<Ax> = net.store().params().iter().map(|p| p.value.clone()).collect();
        let cfg = TrainConfig {
            epochs: 1,
            learning_rate: 0.0,
            batch_size: 16,
            optimizer: OptimizerKind::SgdMomentum,
            ..Default::default()
        };
        train_clean(&mut net, &data, &cfg).unwrap();
        for (p, b) in net.store().params().iter().zip(before.iter()) {
            assert_eq!(&p.value, b);
        }
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let data = tiny_data(8);
        let cfg = TrainConfig { epochs: 2, batch_size: 16, seed: 5, ..Default::default() };
        let mut a = NetworkInstance::build_network(conv_arch(), tiny_skel(), InitSpec::gaussian(2))
            .unwrap();
        let mut b = a.clone();
        let ta = train_clean(&mut a, &data, &cfg).unwrap();
        let tb = train_clean(&mut b, &data, &cfg).unwrap();
        assert!(a.store().bit_identical(b.store()));
        assert_eq!(ta, tb);
    }

    #[test]
    fn clean_training_fits_the_synthetic_task() {
        // oracle: the task is linearly separable (nearest-prototype hits
        // ~100%), so a small net must reach 95% training accuracy
        let data = tiny_data(40);
        let mut net = NetworkInstance::build_network(
            conv_arch(),
            tiny_skel(),
            InitSpec::gaussian(3),
        )
        .unwrap();
        let cfg = TrainConfig {
            epochs: 6,
            batch_size: 32,
            learning_rate: 0.01,
            seed: 7,
            ..Default::default()
        };
        let trace = train_clean(&mut net, &data, &cfg).unwrap();
        let last = trace.rows.last().unwrap();
        assert!(last.acc.unwrap() >= 0.95, "train acc {:?}", last.acc);
        // loss decreased over the run
        assert!(last.loss < trace.rows[0].loss);
    }

    #[test]
    fn joint_with_zero_knobs_reduces_to_clean() {
        let data = tiny_data(6);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            seed: 11,
            rho_b: 0.0,
            rho_c: 0.0,
            lambda_div: 0.0,
            lambda_atk: 0.0,
            ..Default::default()
        };
        let mut clean_net =
            NetworkInstance::build_network(conv_arch(), tiny_skel(), InitSpec::gaussian(4))
                .unwrap();
        let mut joint_net = clean_net.clone();
        let mut gen = GeneratorInstance::build(tiny_gen_cfg(), InitSpec::gaussian(4)).unwrap();

        train_clean(&mut clean_net, &data, &cfg).unwrap();
        train_joint(&mut joint_net, &mut gen, &data, &cfg).unwrap();
        assert!(clean_net.store().bit_identical(joint_net.store()));
    }

    #[test]
    fn joint_gradients_are_sum_of_term_gradients() {
        // one batch, lambda weights at 1: the combined gradient must equal
        // the sum of the individually-taped term gradients
        let data = tiny_data(4);
        let (x, labels) = data.batch(&[0, 1, 2, 3, 4, 5]);
        let skel = tiny_skel();
        let mut net =
            NetworkInstance::build_network(conv_arch(), skel, InitSpec::gaussian(5)).unwrap();
        let mut gen = GeneratorInstance::build(tiny_gen_cfg(), InitSpec::gaussian(5)).unwrap();
        let (nb, nc) = (2usize, 2usize);
        let target = 0usize;

        // separate terms
        let grads_of = |net: &mut NetworkInstance,
                        gen: &mut GeneratorInstance,
                        which: &str| -> Vec<Ax> {
            let mut tape = Tape::new();
            let mut net_binder = Binder::new(net.store());
            let x_var = tape.leaf(x.clone().into_dyn());
            let loss = match which {
                "clean" => {
                    let logits = net.forward_t(&mut tape, &mut net_binder, x_var);
                    tape.cross_entropy(logits, &labels)
                }
                "attack" => {
                    let (xa, _) = slice_batch(&x, &labels, 0, nb);
                    let xa_var = tape.leaf(xa.into_dyn());
                    let bound = gen.generate_t(&mut tape, xa_var);
                    let trig = apply_trigger_t(&mut tape, xa_var, bound.mask, bound.pattern, 3);
                    let logits = net.forward_t(&mut tape, &mut net_binder, trig);
                    tape.cross_entropy(logits, &vec![target; nb])
                }
                _ => {
                    let (xc, yc) = slice_batch(&x, &labels, nb, nb + nc);
                    let xc_var = tape.leaf(xc.into_dyn());
                    let bound = gen.generate_t(&mut tape, xc_var);
                    let m2 = tape.roll_rows(bound.mask, 1);
                    let p2 = tape.roll_rows(bound.pattern, 1);
                    let crossed = apply_trigger_t(&mut tape, xc_var, m2, p2, 3);
                    let logits = net.forward_t(&mut tape, &mut net_binder, crossed);
                    tape.cross_entropy(logits, &yc)
                }
            };
            tape.backward(loss).unwrap();
            collect_grads(&tape, net.store(), &net_binder)
                .into_iter()
                .enumerate()
                .map(|(i, g)| {
                    g.unwrap_or_else(|| {
                        ArrayD::zeros(net.store().params()[i].value.raw_dim())
                    })
                })
                .collect()
        };

        // batch statistics couple the partitions through shared batch-norm
        // passes only within one forward; each term forwards separately, so
        // the sum decomposition holds exactly
        let clean = grads_of(&mut net, &mut gen, "clean");
        let attack = grads_of(&mut net, &mut gen, "attack");
        let cross = grads_of(&mut net, &mut gen, "cross");

        let combined = {
            let mut tape = Tape::new();
            let mut net_binder = Binder::new(net.store());
            let x_var = tape.leaf(x.clone().into_dyn());
            let logits = net.forward_t(&mut tape, &mut net_binder, x_var);
            let mut total = tape.cross_entropy(logits, &labels);
            let (xa, _) = slice_batch(&x, &labels, 0, nb);
            let xa_var = tape.leaf(xa.into_dyn());
            let bound = gen.generate_t(&mut tape, xa_var);
            let trig = apply_trigger_t(&mut tape, xa_var, bound.mask, bound.pattern, 3);
            let atk_logits = net.forward_t(&mut tape, &mut net_binder, trig);
            let atk = tape.cross_entropy(atk_logits, &vec![target; nb]);
            total = tape.add(total, atk);
            let (xc, yc) = slice_batch(&x, &labels, nb, nb + nc);
            let xc_var = tape.leaf(xc.into_dyn());
            let bound2 = gen.generate_t(&mut tape, xc_var);
            let m2 = tape.roll_rows(bound2.mask, 1);
            let p2 = tape.roll_rows(bound2.pattern, 1);
            let crossed = apply_trigger_t(&mut tape, xc_var, m2, p2, 3);
            let cross_logits = net.forward_t(&mut tape, &mut net_binder, crossed);
            let cl = tape.cross_entropy(cross_logits, &yc);
            total = tape.add(total, cl);
            tape.backward(total).unwrap();
            collect_grads(&tape, net.store(), &net_binder)
                .into_iter()
                .enumerate()
                .map(|(i, g)| {
                    g.unwrap_or_else(|| {
                        ArrayD::zeros(net.store().params()[i].value.raw_dim())
                    })
                })
                .collect::<Vec<Ax>>()
        };

        for i in 0..combined.len() {
            let summed = &clean[i] + &attack[i] + &cross[i];
            let max_err = combined[i]
                .iter()
                .zip(summed.iter())
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            let scale = combined[i].iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
            assert!(max_err / scale < 1e-9, "param {i}: err {max_err} scale {scale}");
        }
    }

    #[test]
    fn generator_training_freezes_the_model() {
        let data = tiny_data(6);
        let mut net = NetworkInstance::build_network(
            conv_arch(),
            tiny_skel(),
            InitSpec::gaussian(6),
        )
        .unwrap();
        let clean_cfg = TrainConfig { epochs: 1, batch_size: 16, ..Default::default() };
        train_clean(&mut net, &data, &clean_cfg).unwrap();
        let frozen = net.store().clone();

        let mut gen = GeneratorInstance::build(tiny_gen_cfg(), InitSpec::gaussian(6)).unwrap();
        let cfg = TrainConfig {
            mask_epochs: 1,
            mark_epochs: 1,
            batch_size: 12,
            ..Default::default()
        };
        train_generator(&mut gen, &mut net, &data, &cfg).unwrap();
        assert!(net.store().bit_identical(&frozen));
        assert!(gen.frozen_mask);
    }

    #[test]
    fn pure_evasion_objective_decreases_attack_loss() {
        let data = tiny_data(24);
        let mut net = NetworkInstance::build_network(
            conv_arch(),
            tiny_skel(),
            InitSpec::gaussian(7),
        )
        .unwrap();
        let clean_cfg =
            TrainConfig { epochs: 4, batch_size: 32, seed: 3, ..Default::default() };
        train_clean(&mut net, &data, &clean_cfg).unwrap();

        let mut gen = GeneratorInstance::build(tiny_gen_cfg(), InitSpec::gaussian(7)).unwrap();
        let cfg = TrainConfig {
            rho_b: 1.0,
            rho_c: 0.0,
            lambda_div: 0.0,
            mask_epochs: 0,
            mark_epochs: 6,
            batch_size: 32,
            seed: 9,
            ..Default::default()
        };
        let trace = train_generator(&mut gen, &mut net, &data, &cfg).unwrap();
        let mark_rows: Vec<&TraceRow> =
            trace.rows.iter().filter(|r| r.split == "mark").collect();
        assert!(mark_rows.last().unwrap().loss < mark_rows[0].loss);
    }

    #[test]
    fn baseline_reaches_90_percent_train_accuracy() {
        let data = tiny_data(40);
        let mut net =
            NetworkInstance::build_residual_baseline(tiny_skel(), InitSpec::gaussian(12))
                .unwrap();
        let cfg = TrainConfig {
            epochs: 6,
            batch_size: 32,
            learning_rate: 0.01,
            seed: 13,
            ..Default::default()
        };
        let trace = train_clean(&mut net, &data, &cfg).unwrap();
        let acc = trace.rows.last().unwrap().acc.unwrap();
        assert!(acc >= 0.90, "baseline train accuracy {acc}");
    }

    #[test]
    fn mask_pretraining_keeps_masks_input_specific() {
        let data = tiny_data(24);
        let mut net = NetworkInstance::build_network(
            conv_arch(),
            tiny_skel(),
            InitSpec::gaussian(14),
        )
        .unwrap();
        let clean_cfg = TrainConfig { epochs: 1, batch_size: 32, ..Default::default() };
        train_clean(&mut net, &data, &clean_cfg).unwrap();
        let mut gen = GeneratorInstance::build(tiny_gen_cfg(), InitSpec::gaussian(15)).unwrap();
        let cfg = TrainConfig {
            mask_epochs: 3,
            mark_epochs: 1,
            batch_size: 32,
            seed: 16,
            ..Default::default()
        };
        train_generator(&mut gen, &mut net, &data, &cfg).unwrap();

        // distinct inputs keep distinct masks after diversity pretraining;
        // the mean pairwise distance is logged, only positivity is asserted
        let (x, _) = data.batch(&[0, 1, 2, 3, 4, 5, 6, 7]);
        gen.set_mode(crate::nn::Mode::Eval);
        let triggers = gen.generate_trigger(&x).unwrap();
        let mut total = 0.0;
        let mut pairs = 0usize;
        for i in 0..8 {
            for j in (i + 1)..8 {
                let d: f64 = triggers
                    .mask
                    .index_axis(Axis(0), i)
                    .iter()
                    .zip(triggers.mask.index_axis(Axis(0), j).iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                total += d;
                pairs += 1;
            }
        }
        let mean_pairwise = total / pairs as f64;
        println!("mean pairwise mask distance after pretraining: {mean_pairwise:.6}");
        assert!(mean_pairwise > 0.0);
    }

    #[test]
    fn finetune_zero_epochs_is_identity() {
        let data = tiny_data(4);
        let mut net = NetworkInstance::build_network(
            conv_arch(),
            tiny_skel(),
            InitSpec::gaussian(8),
        )
        .unwrap();
        let before = net.store().clone();
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::finetune_defaults() };
        fine_tune(&mut net, &data, &cfg).unwrap();
        assert!(net.store().bit_identical(&before));
    }

    #[test]
    fn finetune_defaults_match_published_block() {
        let cfg = TrainConfig::finetune_defaults();
        assert_eq!(cfg.epochs, 50);
        assert_eq!(cfg.optimizer, OptimizerKind::SgdMomentum);
        assert_eq!(cfg.learning_rate, 0.01);
        assert_eq!(cfg.lr_schedule, LrSchedule::CosineAnnealing);
        assert_eq!(cfg.batch_size, 96);
    }

    #[test]
    fn retrain_uses_new_seed_and_leaves_generator_untouched() {
        let data = tiny_data(6);
        let original =
            NetworkInstance::build_network(conv_arch(), tiny_skel(), InitSpec::gaussian(10))
                .unwrap();
        let gen = GeneratorInstance::build(tiny_gen_cfg(), InitSpec::gaussian(10)).unwrap();
        let gen_params_before = gen.mark_store().clone();
        let cfg = TrainConfig { epochs: 1, batch_size: 16, seed: 77, ..Default::default() };
        let (retrained, _) =
            retrain_scratch(&conv_arch(), &gen, &data, &tiny_skel(), &cfg).unwrap();
        assert_ne!(retrained.init_spec().seed, original.init_spec().seed);
        assert!(gen.mark_store().bit_identical(&gen_params_before));
    }

    #[test]
    fn poisoning_counts_and_edges() {
        let data = tiny_data(500); // 2000 samples
        let mut gen = GeneratorInstance::build(tiny_gen_cfg(), InitSpec::gaussian(11)).unwrap();

        let zero = make_poisoned_dataset(&data, &mut gen, 0.0, 2, 13).unwrap();
        assert_eq!(zero.labels, data.labels);
        assert_eq!(zero.images, data.images);

        let tiny = make_poisoned_dataset(&data, &mut gen, 0.01, 2, 13).unwrap();
        let changed = tiny
            .labels
            .iter()
            .zip(data.labels.iter())
            .filter(|(a, b)| a != b)
            .count();
        let relabeled_to_target = tiny
            .labels
            .iter()
            .zip(data.labels.iter())
            .filter(|(&a, &b)| a == 2 && b != 2)
            .count();
        // ceil(0.01 * 2000) = 20 poisoned rows; some already carried label 2
        assert_eq!(relabeled_to_target, changed);
        let poisoned_rows = (0..data.len())
            .filter(|&i| {
                tiny.images.index_axis(Axis(0), i) != data.images.index_axis(Axis(0), i)
            })
            .count();
        assert_eq!(poisoned_rows, 20);

        let full = make_poisoned_dataset(&data, &mut gen, 1.0, 2, 13).unwrap();
        assert!(full.labels.iter().all(|&l| l == 2));
    }
}

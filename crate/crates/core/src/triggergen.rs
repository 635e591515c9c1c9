//! Input-aware trigger generation: a mask network and a pattern network.
//!
//! Both are the same U-shaped encoder-decoder: per encoder block two
//! ConvBNReLU 3x3 layers and a 2x2 max pool, a ConvBNReLU middle, and per
//! decoder block a 2x nearest upsample with two more convolutions; the final
//! ConvBN comes out through a sigmoid so every mask and pattern element lies
//! in `[0, 1]`. The mask head has one output channel, the pattern head three.
//!
//! A trigger `(m, p)` is blended into an image as `x*(1-m) + p*m`.

use crate::autodiff::{Ax, Tape, Var};
use crate::error::{Error, Result};
use crate::netbuilder::InitSpec;
use crate::nn::{Binder, Conv2d, BatchNorm2d, ConvBnRelu, Mode, ParamStore};
use crate::rng::{seeded, SeededRng};
use ndarray::Array4;

/// Shape and width settings of the generator networks.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    /// Input `(H, W, 3)`.
    pub input_shape: (usize, usize, usize),
    /// Channel width per encoder block; the decoder mirrors it.
    pub encoder_widths: Vec<usize>,
    /// Channel width of the middle convolution.
    pub middle_width: usize,
    /// Number of 2x poolings; must equal the encoder depth.
    pub pooling_stages: usize,
}

impl GeneratorConfig {
    /// The published configuration: widths 32/64/128, middle 128.
    pub fn full(input_hw: (usize, usize)) -> GeneratorConfig {
        GeneratorConfig {
            input_shape: (input_hw.0, input_hw.1, 3),
            encoder_widths: vec![32, 64, 128],
            middle_width: 128,
            pooling_stages: 3,
        }
    }

    /// A narrow variant for CPU-budget runs; same structure.
    pub fn desk(input_hw: (usize, usize)) -> GeneratorConfig {
        GeneratorConfig {
            input_shape: (input_hw.0, input_hw.1, 3),
            encoder_widths: vec![8, 16, 32],
            middle_width: 32,
            pooling_stages: 3,
        }
    }

    /// Check divisibility and depth invariants.
    pub fn validate(&self) -> Result<()> {
        let (h, w, c) = self.input_shape;
        if c != 3 {
            return Err(Error::Config(format!("generator expects 3 input channels, got {c}")));
        }
        if self.encoder_widths.is_empty() || self.encoder_widths.len() != self.pooling_stages {
            return Err(Error::Config(
                "encoder_widths length must equal pooling_stages and be nonzero".into(),
            ));
        }
        let div = 1 << self.pooling_stages;
        if h % div != 0 || w % div != 0 {
            return Err(Error::Config(format!(
                "input {h}x{w} not divisible by 2^{}",
                self.pooling_stages
            )));
        }
        Ok(())
    }
}

/// One encoder-decoder network ending in a sigmoid head.
#[derive(Debug, Clone)]
struct UNet {
    enc: Vec<(ConvBnRelu, ConvBnRelu)>,
    middle: ConvBnRelu,
    dec: Vec<(ConvBnRelu, ConvBnRelu)>,
    head_a: ConvBnRelu,
    head_conv: Conv2d,
    head_bn: BatchNorm2d,
}

impl UNet {
    fn new(
        store: &mut ParamStore,
        cfg: &GeneratorConfig,
        out_channels: usize,
        gain: f64,
        rng: &mut SeededRng,
    ) -> UNet {
        let widths = &cfg.encoder_widths;
        let depth = widths.len();
        let mut enc = Vec::new();
        let mut cin = cfg.input_shape.2;
        for (i, &w) in widths.iter().enumerate() {
            let a = ConvBnRelu::new(store, &format!("enc{i}.a"), cin, w, gain, rng);
            let b = ConvBnRelu::new(store, &format!("enc{i}.b"), w, w, gain, rng);
            enc.push((a, b));
            cin = w;
        }
        let middle = ConvBnRelu::new(store, "middle", cin, cfg.middle_width, gain, rng);
        let mut dec = Vec::new();
        let mut cur = cfg.middle_width;
        // all decoder blocks except the last mirror the encoder widths
        for i in (1..depth).rev() {
            let upper = widths[i - 1];
            let a = ConvBnRelu::new(store, &format!("dec{i}.a"), cur, cur, gain, rng);
            let b = ConvBnRelu::new(store, &format!("dec{i}.b"), cur, upper, gain, rng);
            dec.push((a, b));
            cur = upper;
        }
        let head_a = ConvBnRelu::new(store, "dec0.a", cur, cur, gain, rng);
        let head_conv = Conv2d::new(store, "dec0.out.conv", cur, out_channels, 3, 1, 1, gain, rng);
        let head_bn = BatchNorm2d::new(store, "dec0.out.bn", out_channels);
        UNet { enc, middle, dec, head_a, head_conv, head_bn }
    }

    fn forward(
        &self,
        store: &mut ParamStore,
        tape: &mut Tape,
        binder: &mut Binder,
        x: Var,
        mode: Mode,
    ) -> Var {
        let mut h = x;
        for (a, b) in &self.enc {
            h = a.forward(store, tape, binder, h, mode);
            h = b.forward(store, tape, binder, h, mode);
            h = tape.max_pool2(h);
        }
        h = self.middle.forward(store, tape, binder, h, mode);
        for (a, b) in &self.dec {
            h = tape.upsample2(h);
            h = a.forward(store, tape, binder, h, mode);
            h = b.forward(store, tape, binder, h, mode);
        }
        h = tape.upsample2(h);
        h = self.head_a.forward(store, tape, binder, h, mode);
        h = self.head_conv.forward(store, tape, binder, h);
        h = self.head_bn.forward(store, tape, binder, h, mode);
        tape.sigmoid(h)
    }
}

/// Per-sample triggers for a batch.
#[derive(Debug, Clone)]
pub struct TriggerBatch {
    /// Masks `(B, 1, H, W)` in `[0, 1]`.
    pub mask: Array4<f64>,
    /// Patterns `(B, 3, H, W)` in `[0, 1]`.
    pub pattern: Array4<f64>,
}

/// The mask + pattern generator pair.
#[derive(Debug, Clone)]
pub struct GeneratorInstance {
    cfg: GeneratorConfig,
    init: InitSpec,
    mask_net: UNet,
    mark_net: UNet,
    mask_store: ParamStore,
    mark_store: ParamStore,
    /// When set, the mask network runs in eval mode and is excluded from
    /// training updates.
    pub frozen_mask: bool,
    mode: Mode,
}

/// One bound generator pass on a tape.
pub struct GenBound {
    /// Mask node `(B, 1, H, W)`.
    pub mask: Var,
    /// Pattern node `(B, 3, H, W)`.
    pub pattern: Var,
    /// Bindings of the mask network parameters.
    pub mask_binder: Binder,
    /// Bindings of the pattern network parameters.
    pub mark_binder: Binder,
}

impl GeneratorInstance {
    /// Build both networks per the configuration.
    pub fn build(cfg: GeneratorConfig, init: InitSpec) -> Result<GeneratorInstance> {
        cfg.validate()?;
        let mut rng = seeded(init.seed);
        let mut mask_store = ParamStore::new();
        let mask_net = UNet::new(&mut mask_store, &cfg, 1, init.gain, &mut rng);
        let mut mark_store = ParamStore::new();
        let mark_net = UNet::new(&mut mark_store, &cfg, 3, init.gain, &mut rng);
        Ok(GeneratorInstance {
            cfg,
            init,
            mask_net,
            mark_net,
            mask_store,
            mark_store,
            frozen_mask: false,
            mode: Mode::Train,
        })
    }

    /// Configuration used at build time.
    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    /// Initialization used at build time.
    pub fn init_spec(&self) -> &InitSpec {
        &self.init
    }

    /// Train/eval switch for both networks (a frozen mask stays in eval).
    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Mask network parameters.
    pub fn mask_store(&self) -> &ParamStore {
        &self.mask_store
    }

    /// Pattern network parameters.
    pub fn mark_store(&self) -> &ParamStore {
        &self.mark_store
    }

    /// Mutable mask parameters.
    pub fn mask_store_mut(&mut self) -> &mut ParamStore {
        &mut self.mask_store
    }

    /// Mutable pattern parameters.
    pub fn mark_store_mut(&mut self) -> &mut ParamStore {
        &mut self.mark_store
    }

    fn check_input(&self, x: &Array4<f64>) -> Result<()> {
        let (_b, c, h, w) = x.dim();
        let (eh, ew, ec) = self.cfg.input_shape;
        if (h, w, c) != (eh, ew, ec) {
            return Err(Error::Shape(format!(
                "generator input {h}x{w}x{c} does not match config {eh}x{ew}x{ec}"
            )));
        }
        Ok(())
    }

    /// Run only the mask network on an existing tape node.
    pub fn mask_forward_t(&mut self, tape: &mut Tape, x: Var) -> (Var, Binder) {
        let mask_mode = if self.frozen_mask { Mode::Eval } else { self.mode };
        let mut binder = Binder::new(&self.mask_store);
        let mask = self
            .mask_net
            .forward(&mut self.mask_store, tape, &mut binder, x, mask_mode);
        (mask, binder)
    }

    /// Run only the pattern network on an existing tape node.
    pub fn mark_forward_t(&mut self, tape: &mut Tape, x: Var) -> (Var, Binder) {
        let mut binder = Binder::new(&self.mark_store);
        let pattern = self
            .mark_net
            .forward(&mut self.mark_store, tape, &mut binder, x, self.mode);
        (pattern, binder)
    }

    /// Run both networks on an existing tape node.
    pub fn generate_t(&mut self, tape: &mut Tape, x: Var) -> GenBound {
        let (mask, mask_binder) = self.mask_forward_t(tape, x);
        let (pattern, mark_binder) = self.mark_forward_t(tape, x);
        GenBound { mask, pattern, mask_binder, mark_binder }
    }

    /// Generate per-sample triggers for a batch.
    pub fn generate_trigger(&mut self, x: &Array4<f64>) -> Result<TriggerBatch> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone().into_dyn());
        let bound = self.generate_t(&mut tape, xv);
        let mask = to4(tape.value(bound.mask));
        let pattern = to4(tape.value(bound.pattern));
        Ok(TriggerBatch { mask, pattern })
    }
}

fn to4(a: &Ax) -> Array4<f64> {
    a.view()
        .into_dimensionality::<ndarray::Ix4>()
        .expect("rank-4 tensor")
        .to_owned()
}

/// Blend triggers into images: `x*(1-m) + p*m`, the mask broadcast across
/// channels. A convex combination, so the result stays in `[0, 1]`.
pub fn apply_trigger(x: &Array4<f64>, r: &TriggerBatch) -> Array4<f64> {
    let (b, c, h, w) = x.dim();
    debug_assert_eq!(r.mask.dim(), (b, 1, h, w));
    debug_assert_eq!(r.pattern.dim(), (b, c, h, w));
    let mut out = Array4::<f64>::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    let m = r.mask[[bi, 0, hi, wi]];
                    out[[bi, ci, hi, wi]] =
                        x[[bi, ci, hi, wi]] * (1.0 - m) + r.pattern[[bi, ci, hi, wi]] * m;
                }
            }
        }
    }
    out
}

/// Tape form of [`apply_trigger`] for training and scoring graphs.
pub fn apply_trigger_t(tape: &mut Tape, x: Var, mask: Var, pattern: Var, channels: usize) -> Var {
    let m = tape.repeat_channels(mask, channels);
    let neg = tape.mul_scalar(m, -1.0);
    let one_minus = tape.add_scalar(neg, 1.0);
    let keep = tape.mul(x, one_minus);
    let put = tape.mul(pattern, m);
    tape.add(keep, put)
}

/// Numerical floor for the trigger-distance denominator.
pub const DIVERSITY_EPS: f64 = 1e-6;

/// Diversity regularizer: mean over pairs of
/// `||x1 - x2|| / max(||T(x1) - T(x2)||, eps)` where `T` applies each pair
/// member's own trigger.
pub fn diversity_loss(
    x1: &Array4<f64>,
    x2: &Array4<f64>,
    t1: &TriggerBatch,
    t2: &TriggerBatch,
) -> f64 {
    let tx1 = apply_trigger(x1, t1);
    let tx2 = apply_trigger(x2, t2);
    let b = x1.dim().0;
    let mut total = 0.0;
    for i in 0..b {
        let dx: f64 = x1
            .index_axis(ndarray::Axis(0), i)
            .iter()
            .zip(x2.index_axis(ndarray::Axis(0), i).iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let dt: f64 = tx1
            .index_axis(ndarray::Axis(0), i)
            .iter()
            .zip(tx2.index_axis(ndarray::Axis(0), i).iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        total += dx / dt.max(DIVERSITY_EPS);
    }
    total / b as f64
}

/// Tape form of the diversity ratio given two already-applied trigger image
/// nodes; the numerator is the distance between the raw inputs.
pub fn diversity_loss_t(tape: &mut Tape, x1: Var, x2: Var, tx1: Var, tx2: Var) -> Var {
    let dx = tape.sub(x1, x2);
    let dn2 = tape.per_sample_sq_norm(dx);
    let dn = tape.sqrt(dn2);
    let dt = tape.sub(tx1, tx2);
    let tn2 = tape.per_sample_sq_norm(dt);
    let tn = tape.sqrt(tn2);
    let tn = tape.max_with_scalar(tn, DIVERSITY_EPS);
    let ratio = tape.div(dn, tn);
    tape.mean_all(ratio)
}

/// Mean mask activation; the knob the density hinge regularizes.
pub fn mask_density(m: &Array4<f64>) -> f64 {
    m.sum() / m.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use ndarray::Axis;
    use rand::Rng;

    fn cfg_tiny() -> GeneratorConfig {
        GeneratorConfig {
            input_shape: (8, 8, 3),
            encoder_widths: vec![2, 3, 4],
            middle_width: 4,
            pooling_stages: 3,
        }
    }

    fn random_batch(b: usize, seed: u64) -> Array4<f64> {
        let mut rng = seeded(seed);
        Array4::from_shape_fn((b, 3, 8, 8), |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn rejects_indivisible_input() {
        let mut cfg = cfg_tiny();
        cfg.input_shape = (6, 8, 3);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn output_shapes_and_ranges() {
        let mut gen = GeneratorInstance::build(cfg_tiny(), InitSpec::gaussian(1)).unwrap();
        let x = random_batch(4, 2);
        let t = gen.generate_trigger(&x).unwrap();
        assert_eq!(t.mask.dim(), (4, 1, 8, 8));
        assert_eq!(t.pattern.dim(), (4, 3, 8, 8));
        assert!(t.mask.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(t.pattern.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn identical_inputs_identical_triggers() {
        let mut gen = GeneratorInstance::build(cfg_tiny(), InitSpec::gaussian(3)).unwrap();
        gen.set_mode(Mode::Eval);
        let x = random_batch(2, 4);
        let mut dup = Array4::<f64>::zeros((4, 3, 8, 8));
        for i in 0..2 {
            dup.index_axis_mut(Axis(0), i).assign(&x.index_axis(Axis(0), i));
            dup.index_axis_mut(Axis(0), i + 2).assign(&x.index_axis(Axis(0), i));
        }
        let t = gen.generate_trigger(&dup).unwrap();
        for i in 0..2 {
            assert_eq!(
                t.mask.index_axis(Axis(0), i),
                t.mask.index_axis(Axis(0), i + 2)
            );
            assert_eq!(
                t.pattern.index_axis(Axis(0), i),
                t.pattern.index_axis(Axis(0), i + 2)
            );
        }
    }

    #[test]
    fn apply_trigger_identity_and_saturation() {
        let x = random_batch(3, 5);
        let zeros = TriggerBatch {
            mask: Array4::zeros((3, 1, 8, 8)),
            pattern: Array4::from_elem((3, 3, 8, 8), 0.9),
        };
        assert_eq!(apply_trigger(&x, &zeros), x);
        let ones = TriggerBatch {
            mask: Array4::from_elem((3, 1, 8, 8), 1.0),
            pattern: Array4::from_elem((3, 3, 8, 8), 0.9),
        };
        assert!(apply_trigger(&x, &ones).iter().all(|&v| v == 0.9));
    }

    #[test]
    fn apply_trigger_midpoint_arithmetic() {
        let x = Array4::from_elem((1, 3, 8, 8), 0.2);
        let r = TriggerBatch {
            mask: Array4::from_elem((1, 1, 8, 8), 0.5),
            pattern: Array4::from_elem((1, 3, 8, 8), 0.8),
        };
        let out = apply_trigger(&x, &r);
        assert!(out.iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn apply_trigger_stays_in_unit_interval() {
        let mut rng = seeded(6);
        for _ in 0..50 {
            let x = Array4::from_shape_fn((2, 3, 8, 8), |_| rng.random_range(0.0..1.0));
            let r = TriggerBatch {
                mask: Array4::from_shape_fn((2, 1, 8, 8), |_| rng.random_range(0.0..1.0)),
                pattern: Array4::from_shape_fn((2, 3, 8, 8), |_| rng.random_range(0.0..1.0)),
            };
            let out = apply_trigger(&x, &r);
            assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn diversity_loss_edge_cases() {
        let x = random_batch(3, 7);
        let t = TriggerBatch {
            mask: Array4::from_elem((3, 1, 8, 8), 0.5),
            pattern: Array4::from_elem((3, 3, 8, 8), 0.3),
        };
        // identical inputs: numerator zero
        assert_eq!(diversity_loss(&x, &x, &t, &t), 0.0);

        // identical triggers on distinct inputs: T(x1) - T(x2) = (x1-x2)(1-m)
        let y = random_batch(3, 8);
        let loss = diversity_loss(&x, &y, &t, &t);
        let mut expect = 0.0;
        for i in 0..3 {
            let dx: f64 = x
                .index_axis(Axis(0), i)
                .iter()
                .zip(y.index_axis(Axis(0), i).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            expect += dx / (dx * 0.5).max(DIVERSITY_EPS);
        }
        assert!((loss - expect / 3.0).abs() < 1e-12);

        // fully saturating triggers make T(x1) = T(x2): denominator clamps
        let sat = TriggerBatch {
            mask: Array4::from_elem((3, 1, 8, 8), 1.0),
            pattern: Array4::from_elem((3, 3, 8, 8), 0.3),
        };
        let loss = diversity_loss(&x, &y, &sat, &sat);
        let mut expect = 0.0;
        for i in 0..3 {
            let dx: f64 = x
                .index_axis(Axis(0), i)
                .iter()
                .zip(y.index_axis(Axis(0), i).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            expect += dx / DIVERSITY_EPS;
        }
        assert!((loss - expect / 3.0).abs() / expect < 1e-12);
    }

    #[test]
    fn diversity_numerator_is_homogeneous() {
        let x = random_batch(2, 9);
        let mid = Array4::from_elem((2, 3, 8, 8), 0.5);
        let x2 = &mid + (&x - &mid) * 2.0; // doubles x - mid differences
        let t = TriggerBatch {
            mask: Array4::from_elem((2, 1, 8, 8), 1.0),
            pattern: Array4::from_elem((2, 3, 8, 8), 0.3),
        };
        // with saturating identical triggers the denominator is the clamp,
        // so scaling the input difference by 2 doubles the loss
        let l1 = diversity_loss(&x, &mid, &t, &t);
        let l2 = diversity_loss(&x2, &mid, &t, &t);
        assert!((l2 - 2.0 * l1).abs() / l2 < 1e-9);
    }

    #[test]
    fn apply_trigger_linear_in_image_and_pattern() {
        // for a fixed mask, blending is jointly linear in (x, p)
        let mut rng = seeded(21);
        let m = Array4::from_shape_fn((2, 1, 8, 8), |_| rng.random_range(0.0..1.0));
        let x1 = random_batch(2, 22);
        let x2 = random_batch(2, 23);
        let p1 = Array4::from_shape_fn((2, 3, 8, 8), |_| rng.random_range(0.0..1.0));
        let p2 = Array4::from_shape_fn((2, 3, 8, 8), |_| rng.random_range(0.0..1.0));
        let (a, b) = (0.3, 0.7);
        let mixed = apply_trigger(
            &(&x1 * a + &x2 * b),
            &TriggerBatch { mask: m.clone(), pattern: &p1 * a + &p2 * b },
        );
        let separate = apply_trigger(&x1, &TriggerBatch { mask: m.clone(), pattern: p1 }) * a
            + apply_trigger(&x2, &TriggerBatch { mask: m, pattern: p2 }) * b;
        let max_err = mixed
            .iter()
            .zip(separate.iter())
            .fold(0.0f64, |mx, (u, v)| mx.max((u - v).abs()));
        assert!(max_err < 1e-12, "linearity violated by {max_err}");
    }

    #[test]
    fn mask_density_means() {
        assert_eq!(mask_density(&Array4::zeros((2, 1, 4, 4))), 0.0);
        assert_eq!(mask_density(&Array4::from_elem((2, 1, 4, 4), 1.0)), 1.0);
        let mut half = Array4::zeros((1, 1, 2, 2));
        half[[0, 0, 0, 0]] = 1.0;
        half[[0, 0, 0, 1]] = 1.0;
        assert_eq!(mask_density(&half), 0.5);
    }

    #[test]
    fn tape_apply_matches_array_apply() {
        let mut gen = GeneratorInstance::build(cfg_tiny(), InitSpec::gaussian(10)).unwrap();
        gen.set_mode(Mode::Eval);
        let x = random_batch(2, 11);
        let t = gen.generate_trigger(&x).unwrap();
        let direct = apply_trigger(&x, &t);

        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone().into_dyn());
        let bound = gen.generate_t(&mut tape, xv);
        let out = apply_trigger_t(&mut tape, xv, bound.mask, bound.pattern, 3);
        let taped = tape.value(out);
        assert!(direct
            .into_dyn()
            .iter()
            .zip(taped.iter())
            .all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn generator_gradients_pass_directional_fd() {
        let mut gen = GeneratorInstance::build(cfg_tiny(), InitSpec::gaussian(12)).unwrap();
        let x = random_batch(2, 13);

        let loss_of = |gen: &mut GeneratorInstance| {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone().into_dyn());
            let bound = gen.generate_t(&mut tape, xv);
            let tx = apply_trigger_t(&mut tape, xv, bound.mask, bound.pattern, 3);
            let sq = tape.mul(tx, tx);
            let loss = tape.mean_all(sq);
            (tape, bound, loss)
        };

        let (mut tape, bound, loss) = loss_of(&mut gen);
        tape.backward(loss).unwrap();
        let mut flat: Vec<f64> = Vec::new();
        for (i, p) in gen.mask_store().params().iter().enumerate() {
            match bound.mask_binder.grad(&tape, crate::nn::ParamId(i)) {
                Some(g) => flat.extend(g.iter()),
                None => flat.extend(std::iter::repeat(0.0).take(p.value.len())),
            }
        }
        for (i, p) in gen.mark_store().params().iter().enumerate() {
            match bound.mark_binder.grad(&tape, crate::nn::ParamId(i)) {
                Some(g) => flat.extend(g.iter()),
                None => flat.extend(std::iter::repeat(0.0).take(p.value.len())),
            }
        }

        let mut rng = seeded(14);
        let dir: Vec<f64> = (0..flat.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        let dir: Vec<f64> = dir.iter().map(|v| v / norm).collect();
        let ad: f64 = flat.iter().zip(dir.iter()).map(|(g, d)| g * d).sum();

        let eps = 1e-4;
        let shift = |gen: &mut GeneratorInstance, sign: f64| {
            let mut offset = 0;
            let mut apply = |store: &mut ParamStore| {
                for i in 0..store.params().len() {
                    let p = &mut store.param_mut(crate::nn::ParamId(i)).value;
                    for (j, v) in p.iter_mut().enumerate() {
                        *v += sign * eps * dir[offset + j];
                    }
                    offset += p.len();
                }
            };
            apply(gen.mask_store_mut());
            apply(gen.mark_store_mut());
        };
        shift(&mut gen, 1.0);
        let (tape_p, _, loss_p) = loss_of(&mut gen);
        let fp = crate::autodiff::scalar_value(tape_p.value(loss_p));
        shift(&mut gen, -2.0);
        let (tape_m, _, loss_m) = loss_of(&mut gen);
        let fm = crate::autodiff::scalar_value(tape_m.value(loss_m));
        shift(&mut gen, 1.0);
        let fd = (fp - fm) / (2.0 * eps);
        let rel = ((fd - ad) / fd.abs().max(ad.abs()).max(1e-8)).abs();
        assert!(rel < 1e-5, "fd={fd} ad={ad} rel={rel}");
    }
}

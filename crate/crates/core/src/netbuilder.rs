//! Differentiable target models built from a cell spec.
//!
//! Macro skeleton: a 3x3 stem convolution into `base_width` channels,
//! `stages` stages of `cells_per_stage` cells with the width doubling per
//! stage, a stride-2 residual reduction block between stages, then batch
//! norm, ReLU, global average pooling and an affine classifier.
//!
//! Cell semantics: node 0 is the cell input and node `j` sums one operator
//! output per incoming edge. `none` is the zero map, `skip_connect` the
//! identity, the convolutions are ReLU -> conv -> batch norm at stride 1
//! with same padding, and `avg_pool_3x3` is a 3x3 mean pool at stride 1.

use crate::archspace::{ArchSpec, Operator, NUM_EDGES};
use crate::autodiff::{scalar_value, Ax, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Binder, Conv2d, BatchNorm2d, Linear, Mode, ParamStore, ReluConvBn};
use crate::rng::{seeded, SeededRng};
use ndarray::{Array2, Array4, ArrayD};

/// Parameter initialization family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitFamily {
    /// Zero-mean Gaussian with fan-in variance scaling.
    FanInGaussian,
}

/// How parameters are drawn at construction.
#[derive(Debug, Clone, Copy)]
pub struct InitSpec {
    /// Distribution family.
    pub family: InitFamily,
    /// Multiplier on the family's standard deviation; must be positive.
    pub gain: f64,
    /// Seed of the draw.
    pub seed: u64,
}

impl InitSpec {
    /// Fan-in Gaussian with unit gain.
    pub fn gaussian(seed: u64) -> InitSpec {
        InitSpec { family: InitFamily::FanInGaussian, gain: 1.0, seed }
    }

    fn validate(&self) -> Result<()> {
        if self.gain <= 0.0 {
            return Err(Error::Config(format!("init gain must be > 0, got {}", self.gain)));
        }
        Ok(())
    }
}

/// Macro-structure of the target models.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SkeletonConfig {
    /// Number of stages; a stride-2 reduction sits between consecutive ones.
    pub stages: usize,
    /// Cells per stage.
    pub cells_per_stage: usize,
    /// Channel width of the first stage; doubles per stage.
    pub base_width: usize,
    /// Input `(H, W, C)`.
    pub input_shape: (usize, usize, usize),
    /// Classifier outputs.
    pub num_classes: usize,
}

impl SkeletonConfig {
    /// Desk-scale default: 3 stages of 2 cells at width 16 on 8x8x3 inputs.
    pub fn desk(num_classes: usize) -> SkeletonConfig {
        SkeletonConfig {
            stages: 3,
            cells_per_stage: 2,
            base_width: 16,
            input_shape: (8, 8, 3),
            num_classes,
        }
    }

    /// Check the divisibility and positivity invariants.
    pub fn validate(&self) -> Result<()> {
        let (h, w, c) = self.input_shape;
        if self.stages == 0 || self.cells_per_stage == 0 || self.base_width == 0 {
            return Err(Error::Config("skeleton counts must be >= 1".into()));
        }
        if self.num_classes == 0 || c == 0 {
            return Err(Error::Config("classes and channels must be >= 1".into()));
        }
        let div = 1 << (self.stages - 1);
        if h % div != 0 || w % div != 0 {
            return Err(Error::Config(format!(
                "input {h}x{w} not divisible by 2^(stages-1) = {div}"
            )));
        }
        Ok(())
    }

    fn width_at(&self, stage: usize) -> usize {
        self.base_width << stage
    }
}

/// What the model body is built from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ArchKind {
    /// A searched cell architecture.
    Cell(ArchSpec),
    /// The manually designed residual comparison network.
    ResidualBaseline,
}

#[derive(Debug, Clone)]
enum EdgeLayer {
    Zero,
    Skip,
    Conv(ReluConvBn),
    AvgPool,
}

impl EdgeLayer {
    /// Output of the edge, or `None` for the zero map.
    fn apply(
        &self,
        store: &mut ParamStore,
        tape: &mut Tape,
        binder: &mut Binder,
        x: Var,
        mode: Mode,
    ) -> Option<Var> {
        match self {
            EdgeLayer::Zero => None,
            EdgeLayer::Skip => Some(x),
            EdgeLayer::Conv(block) => Some(block.forward(store, tape, binder, x, mode)),
            EdgeLayer::AvgPool => Some(tape.avg_pool(x, 3, 1, 1)),
        }
    }
}

#[derive(Debug, Clone)]
struct Cell {
    edges: Vec<EdgeLayer>,
}

impl Cell {
    fn new(
        store: &mut ParamStore,
        name: &str,
        arch: &ArchSpec,
        width: usize,
        gain: f64,
        rng: &mut SeededRng,
    ) -> Cell {
        let edges = (0..NUM_EDGES)
            .map(|e| match arch.edge(e) {
                Operator::None => EdgeLayer::Zero,
                Operator::SkipConnect => EdgeLayer::Skip,
                Operator::Conv1x1 => EdgeLayer::Conv(ReluConvBn::new(
                    store,
                    &format!("{name}.e{e}"),
                    width,
                    width,
                    1,
                    1,
                    gain,
                    rng,
                )),
                Operator::Conv3x3 => EdgeLayer::Conv(ReluConvBn::new(
                    store,
                    &format!("{name}.e{e}"),
                    width,
                    width,
                    3,
                    1,
                    gain,
                    rng,
                )),
                Operator::AvgPool3x3 => EdgeLayer::AvgPool,
            })
            .collect();
        Cell { edges }
    }

    fn forward(
        &self,
        store: &mut ParamStore,
        tape: &mut Tape,
        binder: &mut Binder,
        x: Var,
        mode: Mode,
    ) -> Var {
        // incoming (edge, source) pairs per node, in canonical edge order
        let n1 = self.sum_node(store, tape, binder, &[(0, x)], mode);
        let n2 = self.sum_node(store, tape, binder, &[(1, x), (2, n1)], mode);
        self.sum_node(store, tape, binder, &[(3, x), (4, n1), (5, n2)], mode)
    }

    fn sum_node(
        &self,
        store: &mut ParamStore,
        tape: &mut Tape,
        binder: &mut Binder,
        inputs: &[(usize, Var)],
        mode: Mode,
    ) -> Var {
        let mut acc: Option<Var> = None;
        for &(edge, src) in inputs {
            if let Some(v) = self.edges[edge].apply(store, tape, binder, src, mode) {
                acc = Some(match acc {
                    Some(a) => tape.add(a, v),
                    None => v,
                });
            }
        }
        // all incoming edges are the zero map: the node holds zeros
        acc.unwrap_or_else(|| {
            let shape = tape.value(inputs[0].1).raw_dim();
            tape.leaf(ArrayD::zeros(shape))
        })
    }
}

/// Residual block: two ReLU-conv-BN stages plus a shortcut. At stride 2 (or
/// on a width change) the shortcut is a 2x2 mean pool followed by a 1x1
/// convolution.
#[derive(Debug, Clone)]
struct ResBlock {
    conv_a: ReluConvBn,
    conv_b: ReluConvBn,
    stride: usize,
    down: Option<Conv2d>,
}

impl ResBlock {
    fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        gain: f64,
        rng: &mut SeededRng,
    ) -> ResBlock {
        let conv_a = ReluConvBn::new(store, &format!("{name}.a"), cin, cout, 3, stride, gain, rng);
        let conv_b = ReluConvBn::new(store, &format!("{name}.b"), cout, cout, 3, 1, gain, rng);
        let down = (stride != 1 || cin != cout).then(|| {
            Conv2d::new(store, &format!("{name}.down"), cin, cout, 1, 1, 0, gain, rng)
        });
        ResBlock { conv_a, conv_b, stride, down }
    }

    fn forward(
        &self,
        store: &mut ParamStore,
        tape: &mut Tape,
        binder: &mut Binder,
        x: Var,
        mode: Mode,
    ) -> Var {
        let y = self.conv_a.forward(store, tape, binder, x, mode);
        let y = self.conv_b.forward(store, tape, binder, y, mode);
        let short = match &self.down {
            Some(conv) => {
                let pooled = if self.stride == 2 { tape.avg_pool(x, 2, 2, 0) } else { x };
                conv.forward(store, tape, binder, pooled)
            }
            None => x,
        };
        tape.add(y, short)
    }
}

#[derive(Debug, Clone)]
struct Backbone {
    stem_conv: Conv2d,
    stem_bn: BatchNorm2d,
    blocks: Vec<BodyBlock>,
    last_bn: BatchNorm2d,
    head: Linear,
}

#[derive(Debug, Clone)]
enum BodyBlock {
    Cell(Cell),
    Residual(ResBlock),
}

/// A target model: architecture, parameters, and a differentiable forward.
#[derive(Debug, Clone)]
pub struct NetworkInstance {
    kind: ArchKind,
    skel: SkeletonConfig,
    init: InitSpec,
    store: ParamStore,
    backbone: Backbone,
    mode: Mode,
}

/// One bound forward pass: logits plus the parameter binder for gradients.
pub struct BoundForward {
    /// Logits node `(B, num_classes)`.
    pub logits: Var,
    /// Parameter bindings of this pass.
    pub binder: Binder,
}

fn build_backbone(
    kind: &ArchKind,
    skel: &SkeletonConfig,
    init: &InitSpec,
    store: &mut ParamStore,
) -> Backbone {
    let mut rng = seeded(init.seed);
    let gain = init.gain;
    let cin = skel.input_shape.2;
    let stem_conv = Conv2d::new(store, "stem.conv", cin, skel.base_width, 3, 1, 1, gain, &mut rng);
    let stem_bn = BatchNorm2d::new(store, "stem.bn", skel.base_width);
    let mut blocks = Vec::new();
    for stage in 0..skel.stages {
        let width = skel.width_at(stage);
        if stage > 0 {
            blocks.push(BodyBlock::Residual(ResBlock::new(
                store,
                &format!("reduce{stage}"),
                width / 2,
                width,
                2,
                gain,
                &mut rng,
            )));
        }
        match kind {
            ArchKind::Cell(arch) => {
                for c in 0..skel.cells_per_stage {
                    blocks.push(BodyBlock::Cell(Cell::new(
                        store,
                        &format!("s{stage}.c{c}"),
                        arch,
                        width,
                        gain,
                        &mut rng,
                    )));
                }
            }
            ArchKind::ResidualBaseline => {
                for b in 0..2 {
                    blocks.push(BodyBlock::Residual(ResBlock::new(
                        store,
                        &format!("s{stage}.b{b}"),
                        width,
                        width,
                        1,
                        gain,
                        &mut rng,
                    )));
                }
            }
        }
    }
    let top_width = skel.width_at(skel.stages - 1);
    let last_bn = BatchNorm2d::new(store, "last.bn", top_width);
    let head = Linear::new(store, "head.fc", top_width, skel.num_classes, gain, &mut rng);
    Backbone { stem_conv, stem_bn, blocks, last_bn, head }
}

impl NetworkInstance {
    /// Build a model for a cell architecture.
    pub fn build_network(arch: ArchSpec, skel: SkeletonConfig, init: InitSpec) -> Result<NetworkInstance> {
        skel.validate()?;
        init.validate()?;
        let mut store = ParamStore::new();
        let backbone = build_backbone(&ArchKind::Cell(arch), &skel, &init, &mut store);
        Ok(NetworkInstance {
            kind: ArchKind::Cell(arch),
            skel,
            init,
            store,
            backbone,
            mode: Mode::Train,
        })
    }

    /// Build the manually designed residual comparison network.
    pub fn build_residual_baseline(skel: SkeletonConfig, init: InitSpec) -> Result<NetworkInstance> {
        skel.validate()?;
        init.validate()?;
        let mut store = ParamStore::new();
        let backbone = build_backbone(&ArchKind::ResidualBaseline, &skel, &init, &mut store);
        Ok(NetworkInstance {
            kind: ArchKind::ResidualBaseline,
            skel,
            init,
            store,
            backbone,
            mode: Mode::Train,
        })
    }

    /// The architecture this model realizes.
    pub fn kind(&self) -> &ArchKind {
        &self.kind
    }

    /// The macro-structure.
    pub fn skeleton(&self) -> &SkeletonConfig {
        &self.skel
    }

    /// Initialization used at construction.
    pub fn init_spec(&self) -> &InitSpec {
        &self.init
    }

    /// Train/eval switch.
    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Current mode.
    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Named parameter and buffer storage.
    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Mutable storage, for optimizers and checkpoint loading.
    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Count of trainable scalars; a pure function of (arch, skeleton).
    pub fn param_count(&self) -> usize {
        self.store.num_scalars()
    }

    fn check_input(&self, x: &Array4<f64>) -> Result<()> {
        let (_b, c, h, w) = x.dim();
        let (eh, ew, ec) = self.skel.input_shape;
        if (h, w, c) != (eh, ew, ec) {
            return Err(Error::Shape(format!(
                "input {h}x{w}x{c} does not match skeleton {eh}x{ew}x{ec}"
            )));
        }
        Ok(())
    }

    /// Forward on an existing tape with an existing input node. Used when a
    /// larger graph (for instance generator -> trigger -> model) is taped.
    pub fn forward_t(&mut self, tape: &mut Tape, binder: &mut Binder, x: Var) -> Var {
        let mode = self.mode;
        let store = &mut self.store;
        let bb = &self.backbone;
        let mut h = bb.stem_conv.forward(store, tape, binder, x);
        h = bb.stem_bn.forward(store, tape, binder, h, mode);
        for block in &bb.blocks {
            h = match block {
                BodyBlock::Cell(cell) => cell.forward(store, tape, binder, h, mode),
                BodyBlock::Residual(rb) => rb.forward(store, tape, binder, h, mode),
            };
        }
        h = bb.last_bn.forward(store, tape, binder, h, mode);
        h = tape.relu(h);
        h = tape.global_avg_pool(h);
        bb.head.forward(store, tape, binder, h)
    }

    /// Forward a batch on a fresh tape, returning the bound pass.
    pub fn forward_bound(&mut self, tape: &mut Tape, x: &Array4<f64>) -> Result<BoundForward> {
        self.check_input(x)?;
        let mut binder = Binder::new(&self.store);
        let xv = tape.leaf(x.clone().into_dyn());
        let logits = self.forward_t(tape, &mut binder, xv);
        Ok(BoundForward { logits, binder })
    }

    /// Forward evaluation: logits `(B, num_classes)`.
    pub fn forward(&mut self, x: &Array4<f64>) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let pass = self.forward_bound(&mut tape, x)?;
        let logits = crate::nn::logits_to_array2(tape.value(pass.logits));
        if !logits.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { what: "logits".into() });
        }
        Ok(logits)
    }

    /// Exact reverse-mode gradients of a scalar loss of the logits.
    ///
    /// Returns the loss value and one gradient tensor per parameter, in
    /// parameter order; parameters that the loss does not reach get zeros.
    pub fn gradients<F>(&mut self, x: &Array4<f64>, loss: F) -> Result<(f64, Vec<(String, Ax)>)>
    where
        F: FnOnce(&mut Tape, Var) -> Var,
    {
        let mut tape = Tape::new();
        let pass = self.forward_bound(&mut tape, x)?;
        let loss_var = loss(&mut tape, pass.logits);
        let loss_val = scalar_value(tape.value(loss_var));
        if !loss_val.is_finite() {
            return Err(Error::NonFinite { what: "loss".into() });
        }
        tape.backward(loss_var)?;
        let grads = self
            .store
            .params()
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let g = pass
                    .binder
                    .grad(&tape, crate::nn::ParamId(i))
                    .cloned()
                    .unwrap_or_else(|| ArrayD::zeros(p.value.raw_dim()));
                (p.name.clone(), g)
            })
            .collect();
        Ok((loss_val, grads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archspace::OPERATORS;
    use crate::rng::seeded;
    use ndarray::Array4;
    use rand::Rng;

    fn random_batch(b: usize, skel: &SkeletonConfig, seed: u64) -> Array4<f64> {
        let mut rng = seeded(seed);
        let (h, w, c) = skel.input_shape;
        Array4::from_shape_fn((b, c, h, w), |_| rng.random_range(0.0..1.0))
    }

    fn small_skel() -> SkeletonConfig {
        SkeletonConfig {
            stages: 2,
            cells_per_stage: 1,
            base_width: 8,
            input_shape: (4, 4, 3),
            num_classes: 4,
        }
    }

    #[test]
    fn all_none_logits_equal_classifier_bias() {
        let skel = small_skel();
        let mut net = NetworkInstance::build_network(
            ArchSpec::all(Operator::None),
            skel,
            InitSpec::gaussian(3),
        )
        .unwrap();
        net.set_mode(Mode::Eval);
        let logits = net.forward(&random_batch(5, &skel, 1)).unwrap();
        // bias starts at zero, and the zero cells kill every signal path
        assert!(logits.iter().all(|&v| v == 0.0));
        let row0 = logits.row(0).to_owned();
        for row in logits.rows() {
            assert_eq!(row, row0);
        }
    }

    #[test]
    fn all_skip_cell_output_is_four_times_input() {
        // oracle: count unit paths from node 0 to node 3 in the cell DAG
        let mut adj = [[0u32; 4]; 4];
        for (dst, src) in crate::archspace::EDGE_NODES {
            adj[src][dst] = 1;
        }
        let mut paths = [0u32; 4];
        paths[0] = 1;
        for dst in 1..4 {
            paths[dst] = (0..dst).map(|src| adj[src][dst] * paths[src]).sum();
        }
        assert_eq!(paths[3], 4);

        let mut store = ParamStore::new();
        let mut rng = seeded(0);
        let cell = Cell::new(
            &mut store,
            "c",
            &ArchSpec::all(Operator::SkipConnect),
            8,
            1.0,
            &mut rng,
        );
        let mut tape = Tape::new();
        let mut binder = Binder::new(&store);
        let x0 = Array4::<f64>::from_shape_fn((2, 8, 4, 4), |(b, c, h, w)| {
            (b + c + h + w) as f64 * 0.01
        });
        let x = tape.leaf(x0.clone().into_dyn());
        let y = cell.forward(&mut store, &mut tape, &mut binder, x, Mode::Train);
        let yv = tape.value(y);
        let expect = x0.mapv(|v| 4.0 * v).into_dyn();
        assert!(yv
            .iter()
            .zip(expect.iter())
            .all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn none_edges_behave_as_deleted_contributions() {
        // skip on (1,0), (2,1), (3,2); none elsewhere: node3 == node0
        let arch = ArchSpec::new([
            Operator::SkipConnect,
            Operator::None,
            Operator::SkipConnect,
            Operator::None,
            Operator::None,
            Operator::SkipConnect,
        ]);
        let mut store = ParamStore::new();
        let mut rng = seeded(0);
        let cell = Cell::new(&mut store, "c", &arch, 4, 1.0, &mut rng);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&store);
        let x0 = Array4::<f64>::from_shape_fn((1, 4, 4, 4), |(_, c, h, w)| {
            (c * 16 + h * 4 + w) as f64 * 0.05
        });
        let x = tape.leaf(x0.clone().into_dyn());
        let y = cell.forward(&mut store, &mut tape, &mut binder, x, Mode::Train);
        assert_eq!(tape.value(y), &x0.into_dyn());
    }

    #[test]
    fn param_count_matches_hand_count() {
        // [conv_3x3 x6] at base width 16, 3 stages of 2 cells, 4 classes:
        // per-layer arithmetic done here, independent of the builder
        let skel = SkeletonConfig {
            stages: 3,
            cells_per_stage: 2,
            base_width: 16,
            input_shape: (8, 8, 3),
            num_classes: 4,
        };
        let net = NetworkInstance::build_network(
            ArchSpec::all(Operator::Conv3x3),
            skel,
            InitSpec::gaussian(1),
        )
        .unwrap();

        let conv = |cout: usize, cin: usize, k: usize| cout * cin * k * k;
        let bn = |c: usize| 2 * c;
        let cell = |w: usize| 6 * (conv(w, w, 3) + bn(w));
        let reduce = |cin: usize, cout: usize| {
            conv(cout, cin, 3) + bn(cout) + conv(cout, cout, 3) + bn(cout) + conv(cout, cin, 1)
        };
        let expected = conv(16, 3, 3)
            + bn(16)
            + 2 * cell(16)
            + reduce(16, 32)
            + 2 * cell(32)
            + reduce(32, 64)
            + 2 * cell(64)
            + bn(64)
            + 64 * 4
            + 4;
        assert_eq!(net.param_count(), expected);

        // and the count is a pure function of (arch, skeleton)
        let net2 = NetworkInstance::build_network(
            ArchSpec::all(Operator::Conv3x3),
            skel,
            InitSpec::gaussian(99),
        )
        .unwrap();
        assert_eq!(net2.param_count(), expected);
    }

    #[test]
    fn eval_forward_is_row_deterministic() {
        let skel = small_skel();
        let mut rng = seeded(44);
        let arch = ArchSpec::random(&mut rng);
        let mut net = NetworkInstance::build_network(arch, skel, InitSpec::gaussian(7)).unwrap();
        net.set_mode(Mode::Eval);
        let x = random_batch(3, &skel, 5);
        let mut dup = Array4::<f64>::zeros((6, 3, 4, 4));
        for i in 0..3 {
            dup.index_axis_mut(ndarray::Axis(0), i).assign(&x.index_axis(ndarray::Axis(0), i));
            dup.index_axis_mut(ndarray::Axis(0), i + 3)
                .assign(&x.index_axis(ndarray::Axis(0), i));
        }
        let logits = net.forward(&dup).unwrap();
        for i in 0..3 {
            assert_eq!(logits.row(i), logits.row(i + 3));
        }
    }

    #[test]
    fn train_mode_depends_on_batch_composition() {
        let skel = small_skel();
        let mut net = NetworkInstance::build_network(
            ArchSpec::all(Operator::Conv3x3),
            skel,
            InitSpec::gaussian(8),
        )
        .unwrap();
        let a = random_batch(4, &skel, 1);
        let b = {
            let mut b = a.clone();
            let mut rng = seeded(2);
            b.index_axis_mut(ndarray::Axis(0), 3)
                .mapv_inplace(|v| (v + rng.random_range(0.0..1.0)) % 1.0);
            b
        };
        let la = net.forward(&a).unwrap();
        let lb = net.forward(&b).unwrap();
        // row 0's input is identical, but the batch statistics moved
        assert_ne!(la.row(0), lb.row(0));
    }

    #[test]
    fn baseline_finite_on_zero_input_and_deterministic_count() {
        let skel = small_skel();
        let mut net =
            NetworkInstance::build_residual_baseline(skel, InitSpec::gaussian(5)).unwrap();
        let x = Array4::<f64>::zeros((2, 3, 4, 4));
        let logits = net.forward(&x).unwrap();
        assert!(logits.iter().all(|v| v.is_finite()));
        let net2 = NetworkInstance::build_residual_baseline(skel, InitSpec::gaussian(6)).unwrap();
        assert_eq!(net.param_count(), net2.param_count());
    }

    #[test]
    fn zero_loss_produces_zero_gradients() {
        let skel = small_skel();
        let mut net = NetworkInstance::build_network(
            ArchSpec::all(Operator::Conv3x3),
            skel,
            InitSpec::gaussian(9),
        )
        .unwrap();
        let x = random_batch(2, &skel, 3);
        let (loss, grads) = net
            .gradients(&x, |tape, logits| {
                let m = tape.mean_all(logits);
                tape.mul_scalar(m, 0.0)
            })
            .unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.iter().all(|(_, g)| g.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn classifier_bias_gradient_matches_closed_form() {
        // d CE / d bias = mean over batch of softmax(p) - onehot(y)
        let skel = small_skel();
        let mut net = NetworkInstance::build_network(
            ArchSpec::all(Operator::Conv1x1),
            skel,
            InitSpec::gaussian(10),
        )
        .unwrap();
        let x = random_batch(4, &skel, 6);
        let targets = [0usize, 1, 2, 3];
        let logits = net.forward(&x).unwrap();
        let (_, grads) = net
            .gradients(&x, |tape, logits| tape.cross_entropy(logits, &targets))
            .unwrap();
        let bias_grad = grads
            .iter()
            .find(|(name, _)| name == "head.fc.b")
            .map(|(_, g)| g.clone())
            .unwrap();
        let mut expect = vec![0.0; 4];
        for (i, &t) in targets.iter().enumerate() {
            let row = logits.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = exps.iter().sum();
            for c in 0..4 {
                expect[c] += (exps[c] / s - if c == t { 1.0 } else { 0.0 }) / 4.0;
            }
        }
        for c in 0..4 {
            assert!((bias_grad[[c]] - expect[c]).abs() < 1e-10);
        }
    }

    #[test]
    fn finite_difference_check_covers_every_operator() {
        // width-8 net; a spec that uses all five operators
        let arch = ArchSpec::new([
            Operator::Conv3x3,
            Operator::SkipConnect,
            Operator::AvgPool3x3,
            Operator::None,
            Operator::Conv1x1,
            Operator::SkipConnect,
        ]);
        for op in OPERATORS {
            assert!(arch.edges().contains(&op));
        }
        let skel = SkeletonConfig {
            stages: 2,
            cells_per_stage: 1,
            base_width: 8,
            input_shape: (4, 4, 3),
            num_classes: 3,
        };
        let mut net = NetworkInstance::build_network(arch, skel, InitSpec::gaussian(11)).unwrap();
        let x = random_batch(3, &skel, 7);
        let targets = [0usize, 1, 2];

        let (_, grads) = net
            .gradients(&x, |tape, logits| tape.cross_entropy(logits, &targets))
            .unwrap();
        let flat_grad: Vec<f64> = grads.iter().flat_map(|(_, g)| g.iter().cloned()).collect();

        // directional derivative oracle: central differences at step 1e-4
        let mut rng = seeded(12);
        for _ in 0..4 {
            let dir: Vec<f64> = (0..flat_grad.len())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            let dir: Vec<f64> = dir.iter().map(|v| v / norm).collect();
            let ad: f64 = flat_grad.iter().zip(dir.iter()).map(|(g, d)| g * d).sum();

            let eps = 1e-4;
            let eval_shifted = |net: &mut NetworkInstance, sign: f64| {
                let mut offset = 0;
                for i in 0..net.store().params().len() {
                    let p = &mut net.store_mut().param_mut(crate::nn::ParamId(i)).value;
                    let len = p.len();
                    for (j, v) in p.iter_mut().enumerate() {
                        *v += sign * eps * dir[offset + j];
                    }
                    offset += len;
                }
                let logits = net.forward(&x).unwrap();
                let mut t = Tape::new();
                let z = t.leaf(logits.into_dyn());
                let l = t.cross_entropy(z, &targets);
                let v = scalar_value(t.value(l));
                let mut offset = 0;
                for i in 0..net.store().params().len() {
                    let p = &mut net.store_mut().param_mut(crate::nn::ParamId(i)).value;
                    let len = p.len();
                    for (j, w) in p.iter_mut().enumerate() {
                        *w -= sign * eps * dir[offset + j];
                    }
                    offset += len;
                }
                v
            };
            let fp = eval_shifted(&mut net, 1.0);
            let fm = eval_shifted(&mut net, -1.0);
            let fd = (fp - fm) / (2.0 * eps);
            let rel = ((fd - ad) / fd.abs().max(ad.abs()).max(1e-8)).abs();
            assert!(rel < 1e-5, "directional grad mismatch: fd={fd} ad={ad} rel={rel}");
        }
    }
}

//! Training-free vulnerability score.
//!
//! For a batch of inputs, each sample's scalar readout is the target-class
//! logit of the composed map: generator -> trigger blend -> freshly
//! initialized target model. Row `i` of the Jacobian `J` holds the gradient
//! of that readout with respect to every generator parameter (mask and
//! pattern networks both). The empirical kernel is the Gram matrix `J Jᵀ`,
//! and the score is its condition number, averaged over several target-model
//! initializations. Lower scores predict easier trigger-generator training
//! and therefore higher attack success; unstable spectra rank last through
//! an infinity sentinel.

use crate::archspace::ArchSpec;
use crate::autodiff::{Ax, Tape};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::netbuilder::{InitSpec, NetworkInstance, SkeletonConfig};
use crate::nn::{Binder, Mode, ParamStore};
use crate::rng::seeded;
use crate::triggergen::{apply_trigger_t, GeneratorConfig, GeneratorInstance};
use nalgebra::DMatrix;
use ndarray::{Array2, Array4, ArrayD, IxDyn};

/// Settings of one scoring run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreConfig {
    /// Samples per kernel; the kernel is `B x B`.
    pub batch_size: usize,
    /// Independent target-model initializations averaged over.
    pub num_inits: usize,
    /// Seed deriving the data batch and the per-init seeds.
    pub base_seed: u64,
    /// Class whose logit is the scalar readout.
    pub target_class: usize,
    /// Relative floor under which the smallest eigenvalue counts as zero.
    pub epsilon_floor: f64,
}

impl Default for ScoreConfig {
    fn default() -> ScoreConfig {
        ScoreConfig {
            batch_size: 32,
            num_inits: 3,
            base_seed: 0,
            target_class: 0,
            epsilon_floor: 1e-12,
        }
    }
}

impl ScoreConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("score batch_size must be >= 2".into()));
        }
        if self.num_inits < 1 {
            return Err(Error::Config("score num_inits must be >= 1".into()));
        }
        Ok(())
    }
}

/// Score of one architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreReport {
    /// Canonical architecture string.
    pub arch: String,
    /// Condition number per initialization; `f64::INFINITY` marks a
    /// degenerate spectrum.
    pub kappa_per_init: Vec<f64>,
    /// Aggregate: mean when every init is finite, infinity otherwise.
    pub kappa: f64,
    /// Smallest eigenvalue per init.
    pub lambda_min: Vec<f64>,
    /// Largest eigenvalue per init.
    pub lambda_max: Vec<f64>,
    /// Seed used per init.
    pub seeds: Vec<u64>,
}

impl ScoreReport {
    /// CSV header for reports with `num_inits` initializations.
    pub fn csv_header(num_inits: usize) -> String {
        let mut cols = vec!["arch".to_string(), "kappa".to_string()];
        for r in 1..=num_inits {
            cols.push(format!("kappa_{r}"));
            cols.push(format!("lambda_min_{r}"));
            cols.push(format!("lambda_max_{r}"));
            cols.push(format!("seed_{r}"));
        }
        cols.join(",")
    }

    /// One CSV row matching [`ScoreReport::csv_header`].
    pub fn csv_row(&self) -> String {
        let mut cols = vec![self.arch.clone(), format_float(self.kappa)];
        for r in 0..self.kappa_per_init.len() {
            cols.push(format_float(self.kappa_per_init[r]));
            cols.push(format_float(self.lambda_min[r]));
            cols.push(format_float(self.lambda_max[r]));
            cols.push(self.seeds[r].to_string());
        }
        cols.join(",")
    }
}

/// Shortest-round-trip float formatting with a stable infinity spelling.
pub fn format_float(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".to_string()
    } else if v == f64::NEG_INFINITY {
        "-inf".to_string()
    } else {
        format!("{v}")
    }
}

/// Collect the flattened gradient of every parameter in `store`, zeros for
/// parameters the adjoint never reached. Errors name the first tensor
/// holding a non-finite entry.
fn flat_param_grad(tape: &Tape, store: &ParamStore, binder: &Binder, out: &mut Vec<f64>) -> Result<()> {
    for (i, p) in store.params().iter().enumerate() {
        match binder.grad(tape, crate::nn::ParamId(i)) {
            Some(g) => {
                if !g.iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFinite { what: format!("jacobian of {}", p.name) });
                }
                out.extend(g.iter());
            }
            None => out.extend(std::iter::repeat_n(0.0, p.value.len())),
        }
    }
    Ok(())
}

/// Empirical kernel of the composed generator -> trigger -> model map on one
/// batch: `J Jᵀ` with `J[i] = d logit_target(i) / d (generator params)`.
pub fn empirical_ntk(
    gen: &mut GeneratorInstance,
    net: &mut NetworkInstance,
    x: &Array4<f64>,
    target_class: usize,
) -> Result<Array2<f64>> {
    let b = x.dim().0;
    let classes = net.skeleton().num_classes;
    if target_class >= classes {
        return Err(Error::Config(format!(
            "target class {target_class} out of range for {classes} classes"
        )));
    }

    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone().into_dyn());
    let bound = gen.generate_t(&mut tape, xv);
    let triggered = apply_trigger_t(&mut tape, xv, bound.mask, bound.pattern, x.dim().1);
    let mut net_binder = Binder::new(net.store());
    let logits = net.forward_t(&mut tape, &mut net_binder, triggered);

    let dim = gen.mask_store().num_scalars() + gen.mark_store().num_scalars();
    let mut jac = Array2::<f64>::zeros((b, dim));
    for i in 0..b {
        let seed = one_hot_row(tape.value(logits).shape(), i, target_class);
        tape.backward_seeded(logits, seed)?;
        let mut row = Vec::with_capacity(dim);
        flat_param_grad(&tape, gen.mask_store(), &bound.mask_binder, &mut row)?;
        flat_param_grad(&tape, gen.mark_store(), &bound.mark_binder, &mut row)?;
        jac.row_mut(i).assign(&ndarray::Array1::from_vec(row));
    }
    Ok(jac.dot(&jac.t()))
}

fn one_hot_row(shape: &[usize], row: usize, col: usize) -> Ax {
    let mut seed = ArrayD::zeros(IxDyn(shape));
    seed[[row, col]] = 1.0;
    seed
}

/// Jacobian Gram matrix of a linear readout `s_i = w . flatten(x_i)`: the
/// analytic kernel is exactly the input Gram matrix `X Xᵀ`. Used as an
/// oracle for the kernel assembly path.
pub fn linear_probe_ntk(weights: &ndarray::Array1<f64>, x: &Array4<f64>) -> Result<Array2<f64>> {
    let b = x.dim().0;
    let dim = weights.len();
    let flat_len = x.len() / b;
    if dim != flat_len {
        return Err(Error::Shape(format!(
            "probe weight length {dim} vs flattened sample {flat_len}"
        )));
    }
    let mut jac = Array2::<f64>::zeros((b, dim));
    for i in 0..b {
        // same per-row backward path as the composed map
        let mut tape = Tape::new();
        let w_col = tape.leaf(
            weights
                .clone()
                .into_shape_with_order((dim, 1))
                .expect("probe weight column")
                .into_dyn(),
        );
        let xi = x
            .index_axis(ndarray::Axis(0), i)
            .to_owned()
            .into_shape_with_order(flat_len)
            .expect("sample flatten");
        let xi_row = tape.leaf(xi.insert_axis(ndarray::Axis(0)).into_dyn());
        // s = x_i (1, D) . w (D, 1)
        let s = tape.matmul(xi_row, w_col);
        let seed = one_hot_row(&[1, 1], 0, 0);
        tape.backward_seeded(s, seed)?;
        let g = tape.grad(w_col).expect("probe gradient");
        for (j, v) in g.iter().enumerate() {
            jac[[i, j]] = *v;
        }
    }
    Ok(jac.dot(&jac.t()))
}

/// Extreme eigenvalues of a symmetric matrix.
pub fn eigen_extremes(k: &Array2<f64>) -> Result<(f64, f64)> {
    let n = k.dim().0;
    if k.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { what: "kernel matrix".into() });
    }
    let max_abs = k.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    for i in 0..n {
        for j in 0..i {
            if (k[[i, j]] - k[[j, i]]).abs() > 1e-9 * max_abs {
                return Err(Error::Shape(format!(
                    "matrix not symmetric at ({i},{j}) beyond 1e-9 relative"
                )));
            }
        }
    }
    // symmetrize, then a dense symmetric eigensolve
    let mut m = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            m[(i, j)] = 0.5 * (k[[i, j]] + k[[j, i]]);
        }
    }
    let eigen = m.symmetric_eigen();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in eigen.eigenvalues.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    Ok((lo, hi))
}

/// Condition number `lambda_max / lambda_min` of a symmetric matrix, with an
/// infinity sentinel once the smallest eigenvalue falls under
/// `epsilon_floor * lambda_max` (or the largest is not positive).
pub fn condition_number(k: &Array2<f64>, epsilon_floor: f64) -> Result<f64> {
    let (lo, hi) = eigen_extremes(k)?;
    Ok(kappa_of(lo, hi, epsilon_floor))
}

fn kappa_of(lambda_min: f64, lambda_max: f64, epsilon_floor: f64) -> f64 {
    if lambda_max <= 0.0 || lambda_min <= epsilon_floor * lambda_max {
        f64::INFINITY
    } else {
        lambda_max / lambda_min
    }
}

/// Score one architecture: repeat over `num_inits` fresh (model, generator)
/// pairs on one fixed data batch and aggregate the condition numbers.
/// Deterministic: the same configuration yields a bit-identical report.
pub fn score_arch(
    arch: &ArchSpec,
    data: &LabeledDataset,
    skel: &SkeletonConfig,
    gcfg: &GeneratorConfig,
    cfg: &ScoreConfig,
) -> Result<ScoreReport> {
    cfg.validate()?;
    if data.len() < cfg.batch_size {
        return Err(Error::Config(format!(
            "dataset holds {} samples, scoring needs {}",
            data.len(),
            cfg.batch_size
        )));
    }
    let mut rng = seeded(cfg.base_seed);
    let picks = rand::seq::index::sample(&mut rng, data.len(), cfg.batch_size).into_vec();
    let (x, _labels) = data.batch(&picks);

    let mut kappa_per_init = Vec::with_capacity(cfg.num_inits);
    let mut lambda_min = Vec::with_capacity(cfg.num_inits);
    let mut lambda_max = Vec::with_capacity(cfg.num_inits);
    let mut seeds = Vec::with_capacity(cfg.num_inits);
    for r in 1..=cfg.num_inits as u64 {
        let seed = cfg.base_seed.wrapping_add(r);
        let mut net = NetworkInstance::build_network(*arch, *skel, InitSpec::gaussian(seed))?;
        let mut gen = GeneratorInstance::build(gcfg.clone(), InitSpec::gaussian(seed))?;
        // untrained nets carry no usable running statistics
        net.set_mode(Mode::Train);
        gen.set_mode(Mode::Train);
        let kernel = empirical_ntk(&mut gen, &mut net, &x, cfg.target_class)?;
        let (lo, hi) = eigen_extremes(&kernel)?;
        kappa_per_init.push(kappa_of(lo, hi, cfg.epsilon_floor));
        lambda_min.push(lo);
        lambda_max.push(hi);
        seeds.push(seed);
    }
    let kappa = if kappa_per_init.iter().any(|k| k.is_infinite()) {
        f64::INFINITY
    } else {
        kappa_per_init.iter().sum::<f64>() / kappa_per_init.len() as f64
    };
    Ok(ScoreReport {
        arch: arch.to_string(),
        kappa_per_init,
        kappa,
        lambda_min,
        lambda_max,
        seeds,
    })
}

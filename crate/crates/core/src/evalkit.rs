//! Metrics and analysis studies.
//!
//! ACC is the fraction of clean inputs classified correctly. ASR is the
//! fraction of trigger-embedded inputs classified as the target class,
//! counted only over samples whose true label differs from the target.
//!
//! The studies reproduce the analysis protocols at desk scale: a
//! score-versus-vulnerability correlation over random architectures, an
//! operator-enumeration grid around a base architecture, and a 5x5 landscape
//! slice over two edges. Study rows run under a bounded worker pool; row
//! order and seeds are fixed up front, so tables are reproducible.

use crate::archspace::{ArchSpec, Operator};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::netbuilder::{InitSpec, NetworkInstance, SkeletonConfig};
use crate::nn::Mode;
use crate::ntkscore::{format_float, score_arch, ScoreConfig};
use crate::rng::child_seed;
use crate::trainer::{train_clean, train_generator, TrainConfig};
use crate::triggergen::{apply_trigger, GeneratorConfig, GeneratorInstance};
use rayon::prelude::*;

/// Metrics of one (model, generator) pair on one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Clean accuracy in `[0, 1]`.
    pub acc: f64,
    /// Attack success rate in `[0, 1]`.
    pub asr: f64,
    /// Samples behind `acc`.
    pub n_clean: usize,
    /// Samples behind `asr` (true label != target).
    pub n_triggered: usize,
    /// The attack's target class.
    pub target: usize,
}

const EVAL_CHUNK: usize = 128;

fn predictions(net: &mut NetworkInstance, x: &ndarray::Array4<f64>) -> Result<Vec<usize>> {
    let logits = net.forward(x)?;
    Ok(logits
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for c in 1..row.len() {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect())
}

/// Fraction of clean inputs classified correctly. Runs the model in eval
/// mode.
pub fn accuracy(net: &mut NetworkInstance, data: &LabeledDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Dataset("accuracy over an empty dataset".into()));
    }
    net.set_mode(Mode::Eval);
    let mut hits = 0usize;
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        let (x, labels) = data.batch(chunk);
        let preds = predictions(net, &x)?;
        hits += preds.iter().zip(labels.iter()).filter(|(p, l)| p == l).count();
    }
    Ok(hits as f64 / data.len() as f64)
}

/// Fraction of triggered inputs classified as the target class, over the
/// samples whose true label differs from the target. Model and generator
/// run in eval mode.
pub fn attack_success_rate(
    net: &mut NetworkInstance,
    gen: &mut GeneratorInstance,
    data: &LabeledDataset,
    target: usize,
) -> Result<f64> {
    let eligible: Vec<usize> = (0..data.len()).filter(|&i| data.labels[i] != target).collect();
    if eligible.is_empty() {
        return Err(Error::Dataset(format!(
            "no samples with label != target {target}"
        )));
    }
    net.set_mode(Mode::Eval);
    gen.set_mode(Mode::Eval);
    let mut hits = 0usize;
    for chunk in eligible.chunks(EVAL_CHUNK) {
        let (x, _) = data.batch(chunk);
        let triggers = gen.generate_trigger(&x)?;
        let triggered = apply_trigger(&x, &triggers);
        let preds = predictions(net, &triggered)?;
        hits += preds.iter().filter(|&&p| p == target).count();
    }
    Ok(hits as f64 / eligible.len() as f64)
}

/// Both metrics at once.
pub fn evaluate(
    net: &mut NetworkInstance,
    gen: &mut GeneratorInstance,
    data: &LabeledDataset,
    target: usize,
) -> Result<EvalReport> {
    let acc = accuracy(net, data)?;
    let asr = attack_success_rate(net, gen, data, target)?;
    let n_triggered = data.labels.iter().filter(|&&l| l != target).count();
    Ok(EvalReport { acc, asr, n_clean: data.len(), n_triggered, target })
}

/// Average ranks with ties sharing the mean rank. Infinite values order
/// after every finite one.
fn ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let mean_rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = mean_rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation; `None` when either side is constant.
/// Infinities participate through their ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len());
    pearson(&ranks(a), &ranks(b))
}

/// Pearson correlation; `None` when either side is constant or any value is
/// non-finite.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    if n < 2 || a.iter().any(|v| !v.is_finite()) || b.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (ma, mb) = (mean(a), mean(b));
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for i in 0..n {
        let (da, db) = (a[i] - ma, b[i] - mb);
        cov += da * db;
        va += da * da;
        vb += db * db;
    }
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}

/// What a study table's key column means.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StudyKind {
    /// One row per architecture; scatter plots apply.
    ArchScatter,
    /// One row per poisoning ratio; line plots apply.
    PoisonLine,
}

impl StudyKind {
    fn as_str(&self) -> &'static str {
        match self {
            StudyKind::ArchScatter => "arch_scatter",
            StudyKind::PoisonLine => "poison_line",
        }
    }

    fn parse(s: &str) -> Option<StudyKind> {
        match s {
            "arch_scatter" => Some(StudyKind::ArchScatter),
            "poison_line" => Some(StudyKind::PoisonLine),
            _ => None,
        }
    }
}

/// One study row.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyRow {
    /// Architecture string, or the poisoning ratio for line studies.
    pub key: String,
    /// Condition-number score; infinity marks a degenerate spectrum, NaN a
    /// failed row.
    pub kappa: f64,
    /// Clean accuracy; NaN on failure.
    pub acc: f64,
    /// Attack success rate; NaN on failure.
    pub asr: f64,
    /// Seed the row ran under.
    pub seed: u64,
    /// Failure note; empty on success.
    pub note: String,
}

/// Correlation summary over a table's successful rows.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StudySummary {
    /// Spearman rho between kappa and ASR.
    pub spearman_kappa_asr: Option<f64>,
    /// Spearman rho between kappa and ACC.
    pub spearman_kappa_acc: Option<f64>,
    /// Pearson r between kappa and ASR (finite-kappa rows only).
    pub pearson_kappa_asr: Option<f64>,
    /// Pearson r between kappa and ACC (finite-kappa rows only).
    pub pearson_kappa_acc: Option<f64>,
}

/// Study output: rows plus header comments and summary statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyTable {
    /// Row semantics.
    pub kind: StudyKind,
    /// Comment lines recording configs and seeds.
    pub header: Vec<String>,
    /// Rows in canonical order.
    pub rows: Vec<StudyRow>,
    /// Correlations over the rows.
    pub summary: StudySummary,
}

impl StudyTable {
    /// Compute the summary statistics from the current rows.
    pub fn summarize(&mut self) {
        let ok: Vec<&StudyRow> = self.rows.iter().filter(|r| r.note.is_empty()).collect();
        let kappa: Vec<f64> = ok.iter().map(|r| r.kappa).collect();
        let asr: Vec<f64> = ok.iter().map(|r| r.asr).collect();
        let acc: Vec<f64> = ok.iter().map(|r| r.acc).collect();
        self.summary.spearman_kappa_asr = spearman(&kappa, &asr);
        self.summary.spearman_kappa_acc = spearman(&kappa, &acc);
        let finite: Vec<usize> = (0..kappa.len()).filter(|&i| kappa[i].is_finite()).collect();
        let fk: Vec<f64> = finite.iter().map(|&i| kappa[i]).collect();
        let fasr: Vec<f64> = finite.iter().map(|&i| asr[i]).collect();
        let facc: Vec<f64> = finite.iter().map(|&i| acc[i]).collect();
        self.summary.pearson_kappa_asr = pearson(&fk, &fasr);
        self.summary.pearson_kappa_acc = pearson(&fk, &facc);
    }

    /// Render as CSV with `#` comment lines for the header and summary.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("# kind = {}\n", self.kind.as_str()));
        for line in &self.header {
            out.push_str(&format!("# {line}\n"));
        }
        out.push_str("key,kappa,acc,asr,seed,note\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.key,
                format_float(r.kappa),
                format_float(r.acc),
                format_float(r.asr),
                r.seed,
                r.note
            ));
        }
        let fmt_opt =
            |v: &Option<f64>| v.map(|x| format!("{x}")).unwrap_or_else(|| "undefined".into());
        out.push_str(&format!(
            "# spearman_kappa_asr = {}\n# spearman_kappa_acc = {}\n# pearson_kappa_asr = {}\n# pearson_kappa_acc = {}\n",
            fmt_opt(&self.summary.spearman_kappa_asr),
            fmt_opt(&self.summary.spearman_kappa_acc),
            fmt_opt(&self.summary.pearson_kappa_asr),
            fmt_opt(&self.summary.pearson_kappa_acc),
        ));
        out
    }

    /// Parse a table back out of [`StudyTable::to_csv`] output.
    pub fn from_csv(text: &str) -> Result<StudyTable> {
        let mut kind = StudyKind::ArchScatter;
        let mut header = Vec::new();
        let mut rows = Vec::new();
        let mut saw_columns = false;
        for line in text.lines() {
            if let Some(comment) = line.strip_prefix('#') {
                let comment = comment.trim();
                if let Some(k) = comment.strip_prefix("kind = ") {
                    kind = StudyKind::parse(k)
                        .ok_or_else(|| Error::Dataset(format!("unknown study kind {k}")))?;
                } else if !comment.starts_with("spearman") && !comment.starts_with("pearson") {
                    header.push(comment.to_string());
                }
                continue;
            }
            if !saw_columns {
                saw_columns = true; // column header row
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.splitn(6, ',').collect();
            if parts.len() < 5 {
                return Err(Error::Dataset(format!("short study row: {line}")));
            }
            let parse = |s: &str| -> f64 {
                match s {
                    "inf" => f64::INFINITY,
                    "-inf" => f64::NEG_INFINITY,
                    other => other.parse().unwrap_or(f64::NAN),
                }
            };
            rows.push(StudyRow {
                key: parts[0].to_string(),
                kappa: parse(parts[1]),
                acc: parse(parts[2]),
                asr: parse(parts[3]),
                seed: parts[4].parse().unwrap_or(0),
                note: parts.get(5).unwrap_or(&"").to_string(),
            });
        }
        let mut table = StudyTable { kind, header, rows, summary: StudySummary::default() };
        table.summarize();
        Ok(table)
    }
}

/// Shared settings of the analysis studies.
#[derive(Debug, Clone)]
pub struct StudyConfig {
    /// Model macro-structure.
    pub skel: SkeletonConfig,
    /// Generator structure.
    pub gen_cfg: GeneratorConfig,
    /// Scoring settings.
    pub score: ScoreConfig,
    /// Clean-training budget per row.
    pub clean: TrainConfig,
    /// Generator-training budget per row.
    pub gen_train: TrainConfig,
    /// Base seed; per-row seeds derive from it.
    pub seed: u64,
    /// Worker bound for concurrent rows.
    pub workers: usize,
    /// Evaluation cap for enumeration grids.
    pub budget_cap: usize,
    /// Train on only the first N samples when nonzero (logged).
    pub train_subset: usize,
    /// Generator trainings averaged into each row's ASR/ACC (>= 1).
    pub asr_reps: usize,
}

impl StudyConfig {
    fn header_lines(&self, extra: &[String]) -> Vec<String> {
        let mut lines = vec![
            format!(
                "skeleton: stages={} cells_per_stage={} base_width={} input={}x{}x{} classes={}",
                self.skel.stages,
                self.skel.cells_per_stage,
                self.skel.base_width,
                self.skel.input_shape.0,
                self.skel.input_shape.1,
                self.skel.input_shape.2,
                self.skel.num_classes
            ),
            format!(
                "generator: widths={:?} middle={}",
                self.gen_cfg.encoder_widths, self.gen_cfg.middle_width
            ),
            format!(
                "score: batch={} inits={} base_seed={} target={}",
                self.score.batch_size,
                self.score.num_inits,
                self.score.base_seed,
                self.score.target_class
            ),
            format!(
                "clean budget: epochs={} lr={} batch={}",
                self.clean.epochs, self.clean.learning_rate, self.clean.batch_size
            ),
            format!(
                "generator budget: mask_epochs={} mark_epochs={} rho_b={} rho_c={} lambda_div={}",
                self.gen_train.mask_epochs,
                self.gen_train.mark_epochs,
                self.gen_train.rho_b,
                self.gen_train.rho_c,
                self.gen_train.lambda_div
            ),
            format!(
                "seed = {} train_subset = {} asr_reps = {}",
                self.seed,
                self.train_subset,
                self.asr_reps.max(1)
            ),
        ];
        lines.extend_from_slice(extra);
        lines
    }

    fn train_view<'d>(&self, train: &'d LabeledDataset) -> std::borrow::Cow<'d, LabeledDataset> {
        if self.train_subset > 0 && self.train_subset < train.len() {
            std::borrow::Cow::Owned(train.take(self.train_subset))
        } else {
            std::borrow::Cow::Borrowed(train)
        }
    }
}

/// Score one architecture, run the frozen-model protocol, and measure it.
/// The generator training repeats `asr_reps` times under derived seeds and
/// the metrics average, which damps single-seed training luck.
fn q1_row(
    arch: &ArchSpec,
    train: &LabeledDataset,
    test: &LabeledDataset,
    cfg: &StudyConfig,
    row_seed: u64,
) -> Result<(f64, f64, f64)> {
    let report = score_arch(arch, train, &cfg.skel, &cfg.gen_cfg, &cfg.score)?;
    let mut net = NetworkInstance::build_network(*arch, cfg.skel, InitSpec::gaussian(row_seed))?;
    let clean_cfg = TrainConfig { seed: row_seed, ..cfg.clean };
    train_clean(&mut net, train, &clean_cfg)?;
    let reps = cfg.asr_reps.max(1);
    let mut acc_sum = 0.0;
    let mut asr_sum = 0.0;
    for rep in 0..reps as u64 {
        let rep_seed = child_seed(row_seed, 70 + rep);
        let mut gen =
            GeneratorInstance::build(cfg.gen_cfg.clone(), InitSpec::gaussian(rep_seed))?;
        let gen_cfg = TrainConfig { seed: rep_seed, ..cfg.gen_train };
        train_generator(&mut gen, &mut net, train, &gen_cfg)?;
        let eval = evaluate(&mut net, &mut gen, test, gen_cfg.target_class)?;
        acc_sum += eval.acc;
        asr_sum += eval.asr;
    }
    Ok((report.kappa, acc_sum / reps as f64, asr_sum / reps as f64))
}

fn run_rows(
    specs: Vec<(ArchSpec, u64)>,
    train: &LabeledDataset,
    test: &LabeledDataset,
    cfg: &StudyConfig,
) -> Result<Vec<StudyRow>> {
    let train = cfg.train_view(train);
    let work = |(arch, seed): &(ArchSpec, u64)| -> StudyRow {
        match q1_row(arch, &train, test, cfg, *seed) {
            Ok((kappa, acc, asr)) => StudyRow {
                key: arch.to_string(),
                kappa,
                acc,
                asr,
                seed: *seed,
                note: String::new(),
            },
            Err(e) => StudyRow {
                key: arch.to_string(),
                kappa: f64::NAN,
                acc: f64::NAN,
                asr: f64::NAN,
                seed: *seed,
                note: e.to_string().replace(',', ";"),
            },
        }
    };
    let rows = if cfg.workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
        pool.install(|| specs.par_iter().map(work).collect::<Vec<_>>())
    } else {
        specs.iter().map(work).collect()
    };
    Ok(rows)
}

/// Score-versus-vulnerability correlation over random architectures.
pub fn correlation_study(
    num_archs: usize,
    train: &LabeledDataset,
    test: &LabeledDataset,
    cfg: &StudyConfig,
) -> Result<StudyTable> {
    if num_archs < 8 {
        return Err(Error::Config(format!(
            "correlation study needs >= 8 architectures, got {num_archs}"
        )));
    }
    let specs: Vec<(ArchSpec, u64)> = (0..num_archs)
        .map(|i| {
            let seed = child_seed(cfg.seed, i as u64);
            (ArchSpec::random(&mut crate::rng::seeded(seed)), seed)
        })
        .collect();
    let rows = run_rows(specs, train, test, cfg)?;
    let mut table = StudyTable {
        kind: StudyKind::ArchScatter,
        header: cfg.header_lines(&[format!("correlation study over {num_archs} random archs")]),
        rows,
        summary: StudySummary::default(),
    };
    table.summarize();
    Ok(table)
}

/// Evaluate every operator assignment of `allowed_ops` over `free_edges`,
/// the other edges held at the base architecture.
pub fn op_enumeration_study(
    base: &ArchSpec,
    free_edges: &[usize],
    allowed_ops: &[Operator],
    train: &LabeledDataset,
    test: &LabeledDataset,
    cfg: &StudyConfig,
) -> Result<StudyTable> {
    let required = allowed_ops.len().pow(free_edges.len() as u32);
    if required > cfg.budget_cap {
        return Err(Error::BudgetExceeded { required, cap: cfg.budget_cap });
    }
    let grid = base.neighbors_on_edges(free_edges, allowed_ops);
    let specs: Vec<(ArchSpec, u64)> = grid
        .into_iter()
        .enumerate()
        .map(|(i, a)| (a, child_seed(cfg.seed, 0x1000 + i as u64)))
        .collect();
    let rows = run_rows(specs, train, test, cfg)?;
    let mut table = StudyTable {
        kind: StudyKind::ArchScatter,
        header: cfg.header_lines(&[format!(
            "operator enumeration around {base}: edges {free_edges:?}, ops {:?}",
            allowed_ops.iter().map(|o| o.token()).collect::<Vec<_>>()
        )]),
        rows,
        summary: StudySummary::default(),
    };
    table.summarize();
    Ok(table)
}

/// 25-point landscape slice: all five operators over exactly two edges.
pub fn landscape_study(
    base: &ArchSpec,
    two_edges: (usize, usize),
    train: &LabeledDataset,
    test: &LabeledDataset,
    cfg: &StudyConfig,
) -> Result<StudyTable> {
    if two_edges.0 == two_edges.1 {
        return Err(Error::Config("landscape needs two distinct edges".into()));
    }
    let mut table = op_enumeration_study(
        base,
        &[two_edges.0, two_edges.1],
        &crate::archspace::OPERATORS,
        train,
        test,
        cfg,
    )?;
    table
        .header
        .push(format!("landscape slice over edges {} and {}", two_edges.0, two_edges.1));
    Ok(table)
}

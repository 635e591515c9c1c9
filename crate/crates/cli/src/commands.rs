//! Subcommand implementations.

use crate::config::{DatasetKind, ExperimentConfig};
use anyhow::{anyhow, Result};
use archvuln::archspace::{ArchSpec, Operator};
use archvuln::checkpoint;
use archvuln::data::{load_cifar10_binary, make_synthetic, LabeledDataset};
use archvuln::evalkit::{
    self, correlation_study, landscape_study, op_enumeration_study, StudyConfig, StudyKind,
    StudyRow, StudySummary, StudyTable,
};
use archvuln::netbuilder::{InitSpec, NetworkInstance};
use archvuln::ntkscore::{format_float, score_arch, ScoreReport};
use archvuln::rng::{child_seed, seeded};
use archvuln::trainer::{self, TrainConfig};
use archvuln::GeneratorInstance;
use std::path::{Path, PathBuf};

/// Failure class deciding the process exit code.
pub enum CliError {
    /// Bad flags or configuration: exit 2.
    Usage(anyhow::Error),
    /// A pipeline failure: exit 1.
    Runtime(anyhow::Error),
}

type CmdResult = Result<(), CliError>;

fn runtime(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Runtime(e.into())
}

fn usage(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Usage(e.into())
}

/// Shared state of one invocation.
pub struct Context {
    /// Effective configuration.
    pub cfg: ExperimentConfig,
    /// Output directory (exists).
    pub out: PathBuf,
}

impl Context {
    fn write(&self, name: &str, body: &str) -> Result<PathBuf, CliError> {
        let path = self.out.join(name);
        std::fs::write(&path, body).map_err(runtime)?;
        Ok(path)
    }

    /// Train and test splits per the dataset config.
    fn load_data(&self) -> Result<(LabeledDataset, LabeledDataset), CliError> {
        match self.cfg.dataset_kind {
            DatasetKind::Synthetic => {
                let data = make_synthetic(&self.cfg.synthetic, self.cfg.seed);
                Ok((data.train, data.test))
            }
            DatasetKind::Cifar10 => {
                let path = Path::new(&self.cfg.dataset_path);
                if self.cfg.dataset_path.is_empty() {
                    return Err(usage(anyhow!("dataset.path must point at CIFAR-10 binaries")));
                }
                if path.is_dir() {
                    let mut train: Option<LabeledDataset> = None;
                    for i in 1..=5 {
                        let batch = path.join(format!("data_batch_{i}.bin"));
                        if !batch.exists() {
                            continue;
                        }
                        let part = load_cifar10_binary(&batch).map_err(runtime)?;
                        train = Some(match train {
                            None => part,
                            Some(prev) => prev.concat(part),
                        });
                    }
                    let test =
                        load_cifar10_binary(&path.join("test_batch.bin")).map_err(runtime)?;
                    let train = train.unwrap_or_else(|| test.clone());
                    Ok((train, test))
                } else {
                    let data = load_cifar10_binary(path).map_err(runtime)?;
                    Ok((data.clone(), data))
                }
            }
        }
    }

    /// Fine-tuning data: the victim's own clean split. Synthetic runs draw
    /// a fresh split from the same distribution; CIFAR runs reuse the train
    /// split.
    fn finetune_data(&self) -> Result<LabeledDataset, CliError> {
        match self.cfg.dataset_kind {
            DatasetKind::Synthetic => {
                let fresh = make_synthetic(&self.cfg.synthetic, child_seed(self.cfg.seed, 105));
                Ok(fresh.train)
            }
            DatasetKind::Cifar10 => Ok(self.load_data()?.0),
        }
    }

    fn study_config(&self) -> StudyConfig {
        StudyConfig {
            skel: self.cfg.skeleton(),
            gen_cfg: self.cfg.generator(),
            score: self.cfg.score(),
            clean: TrainConfig {
                epochs: self.cfg.study_clean_epochs,
                ..self.cfg.train_cfg()
            },
            gen_train: TrainConfig {
                mask_epochs: self.cfg.study_mask_epochs,
                mark_epochs: self.cfg.study_mark_epochs,
                ..self.cfg.train_cfg()
            },
            seed: child_seed(self.cfg.seed, 110),
            workers: self.cfg.workers.max(1),
            budget_cap: self.cfg.study_budget_cap,
            train_subset: self.cfg.study_train_subset,
            asr_reps: self.cfg.study_asr_reps,
        }
    }
}

fn parse_arch(text: &str) -> Result<ArchSpec, CliError> {
    ArchSpec::parse(text).map_err(usage)
}

fn parse_edges(text: &str) -> Result<Vec<usize>, CliError> {
    text.split(',')
        .map(|s| {
            let e: usize = s
                .trim()
                .parse()
                .map_err(|_| usage(anyhow!("bad edge index {s:?}")))?;
            if e >= archvuln::archspace::NUM_EDGES {
                return Err(usage(anyhow!("edge index {e} out of range 0..5")));
            }
            Ok(e)
        })
        .collect()
}

fn parse_ops(text: &str) -> Result<Vec<Operator>, CliError> {
    text.split(',')
        .map(|s| {
            Operator::from_token(s.trim())
                .ok_or_else(|| usage(anyhow!("unknown operator token {s:?}")))
        })
        .collect()
}

pub fn sample(ctx: &Context, count: usize) -> CmdResult {
    let mut rng = seeded(child_seed(ctx.cfg.seed, 100));
    let mut body = String::new();
    for _ in 0..count {
        let arch = ArchSpec::random(&mut rng);
        println!("{arch}");
        body.push_str(&format!("{arch}\n"));
    }
    ctx.write("samples.txt", &body)?;
    Ok(())
}

pub fn score(ctx: &Context, arch_text: &str) -> CmdResult {
    let arch = parse_arch(arch_text)?;
    let (train, _) = ctx.load_data()?;
    let score_cfg = ctx.cfg.score();
    let report = score_arch(&arch, &train, &ctx.cfg.skeleton(), &ctx.cfg.generator(), &score_cfg)
        .map_err(runtime)?;
    println!("arch: {}", report.arch);
    println!("kappa: {}", format_float(report.kappa));
    for (i, k) in report.kappa_per_init.iter().enumerate() {
        println!(
            "  init {} (seed {}): kappa={} lambda_min={} lambda_max={}",
            i + 1,
            report.seeds[i],
            format_float(*k),
            format_float(report.lambda_min[i]),
            format_float(report.lambda_max[i]),
        );
    }
    let csv = format!(
        "{}\n{}\n",
        ScoreReport::csv_header(score_cfg.num_inits),
        report.csv_row()
    );
    let path = ctx.write("score.csv", &csv)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

pub fn search(ctx: &Context) -> CmdResult {
    let (train, _) = ctx.load_data()?;
    let skel = ctx.cfg.skeleton();
    let gen_cfg = ctx.cfg.generator();
    let score_cfg = ctx.cfg.score();
    let search_cfg = ctx.cfg.search();
    let mut evaluated = 0usize;
    let (best, state) = archvuln::evosearch::run_search(&search_cfg, |arch| {
        let report = score_arch(arch, &train, &skel, &gen_cfg, &score_cfg)?;
        evaluated += 1;
        if evaluated.is_multiple_of(20) {
            eprintln!("scored {evaluated} candidates; current {}", format_float(report.kappa));
        }
        Ok(report.kappa)
    })
    .map_err(runtime)?;

    ctx.write("search_log.csv", &archvuln::evosearch::log_to_csv(&state.log))?;
    ctx.write("search_state.txt", &archvuln::evosearch::state_to_text(&state))?;
    ctx.write("best_arch.txt", &format!("{best}\n"))?;
    println!("best arch: {best}");
    println!("best score: {}", format_float(state.best_score));
    println!("evaluations: {}", evaluated);
    Ok(())
}

fn build_model(ctx: &Context, arch: Option<&str>, baseline: bool) -> Result<NetworkInstance, CliError> {
    let skel = ctx.cfg.skeleton();
    let init = InitSpec {
        family: archvuln::netbuilder::InitFamily::FanInGaussian,
        gain: ctx.cfg.init_gain,
        seed: child_seed(ctx.cfg.seed, 120),
    };
    if baseline {
        return NetworkInstance::build_residual_baseline(skel, init).map_err(runtime);
    }
    let text = arch.ok_or_else(|| usage(anyhow!("provide --arch or --baseline")))?;
    let arch = parse_arch(text)?;
    NetworkInstance::build_network(arch, skel, init).map_err(runtime)
}

pub fn train_clean(ctx: &Context, arch: Option<&str>, baseline: bool) -> CmdResult {
    let (train, test) = ctx.load_data()?;
    let mut net = build_model(ctx, arch, baseline)?;
    let cfg = ctx.cfg.train_cfg();
    let trace = trainer::train_clean(&mut net, &train, &cfg).map_err(runtime)?;
    ctx.write("trace_clean.csv", &trace.to_csv())?;
    let ckpt = ctx.out.join("model_clean.ckpt");
    checkpoint::save_network(&ckpt, &net).map_err(runtime)?;
    let acc = evalkit::accuracy(&mut net, &test).map_err(runtime)?;
    println!("train epochs: {}", cfg.epochs);
    println!("final train acc: {:?}", trace.rows.last().and_then(|r| r.acc));
    println!("test acc: {acc}");
    eprintln!("wrote {}", ckpt.display());
    Ok(())
}

pub fn train_backdoor(
    ctx: &Context,
    arch: Option<&str>,
    mode: &str,
    model: Option<&Path>,
) -> CmdResult {
    let (train, test) = ctx.load_data()?;
    let cfg = ctx.cfg.train_cfg();
    let gen_init = InitSpec {
        family: archvuln::netbuilder::InitFamily::FanInGaussian,
        gain: ctx.cfg.init_gain,
        seed: child_seed(ctx.cfg.seed, 121),
    };
    let mut gen = GeneratorInstance::build(ctx.cfg.generator(), gen_init).map_err(runtime)?;

    let mut net = match (mode, model) {
        ("frozen", Some(path)) => checkpoint::load_network(path).map_err(runtime)?,
        ("frozen", None) | ("joint", None) => {
            let mut net = build_model(ctx, arch, false)?;
            if mode == "frozen" {
                let trace = trainer::train_clean(&mut net, &train, &cfg).map_err(runtime)?;
                ctx.write("trace_clean.csv", &trace.to_csv())?;
            }
            net
        }
        ("joint", Some(_)) => {
            return Err(usage(anyhow!("--model applies to frozen mode only")));
        }
        (other, _) => return Err(usage(anyhow!("unknown mode {other:?} (frozen | joint)"))),
    };

    let trace = match mode {
        "frozen" => trainer::train_generator(&mut gen, &mut net, &train, &cfg).map_err(runtime)?,
        _ => trainer::train_joint(&mut net, &mut gen, &train, &cfg).map_err(runtime)?,
    };
    ctx.write("trace_backdoor.csv", &trace.to_csv())?;
    let model_path = ctx.out.join("model_backdoor.ckpt");
    checkpoint::save_network(&model_path, &net).map_err(runtime)?;
    let gen_path = ctx.out.join("generator.ckpt");
    checkpoint::save_generator(&gen_path, &gen).map_err(runtime)?;

    let report = evalkit::evaluate(&mut net, &mut gen, &test, cfg.target_class).map_err(runtime)?;
    ctx.write(
        "eval_backdoor.csv",
        &format!("acc,asr,n_clean,n_triggered,target\n{},{},{},{},{}\n",
            report.acc, report.asr, report.n_clean, report.n_triggered, report.target),
    )?;
    println!("mode: {mode}");
    println!("test acc: {}", report.acc);
    println!("test asr: {}", report.asr);
    eprintln!("wrote {} and {}", model_path.display(), gen_path.display());
    Ok(())
}

pub fn finetune(
    ctx: &Context,
    model: &Path,
    generator: Option<&Path>,
    poison_grid: Option<&str>,
) -> CmdResult {
    let (_, test) = ctx.load_data()?;
    let ft_data = ctx.finetune_data()?;
    let base_net = checkpoint::load_network(model).map_err(runtime)?;
    let mut gen = generator
        .map(|p| checkpoint::load_generator(p).map_err(runtime))
        .transpose()?;
    let cfg = ctx.cfg.finetune_cfg();
    let target = cfg.target_class;

    let ratios: Vec<f64> = match poison_grid {
        Some(grid) => grid
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| usage(anyhow!("bad poison ratio {s:?}")))
            })
            .collect::<Result<_, _>>()?,
        None => vec![ctx.cfg.train.poison_ratio],
    };
    if ratios.iter().any(|r| *r > 0.0) && gen.is_none() {
        return Err(usage(anyhow!("poisoning needs --generator")));
    }

    let mut rows = Vec::new();
    for (i, &ratio) in ratios.iter().enumerate() {
        let mut net = base_net.clone();
        let data = if ratio > 0.0 {
            let g = gen.as_mut().expect("generator checked above");
            trainer::make_poisoned_dataset(&ft_data, g, ratio, target, child_seed(cfg.seed, 31))
                .map_err(runtime)?
        } else {
            ft_data.clone()
        };
        let trace = trainer::fine_tune(&mut net, &data, &cfg).map_err(runtime)?;
        let acc = evalkit::accuracy(&mut net, &test).map_err(runtime)?;
        let asr = match gen.as_mut() {
            Some(g) => evalkit::attack_success_rate(&mut net, g, &test, target).map_err(runtime)?,
            None => f64::NAN,
        };
        println!("ratio {ratio}: acc={acc} asr={}", format_float(asr));
        if poison_grid.is_none() {
            ctx.write("trace_finetune.csv", &trace.to_csv())?;
            let path = ctx.out.join("model_finetuned.ckpt");
            checkpoint::save_network(&path, &net).map_err(runtime)?;
            eprintln!("wrote {}", path.display());
        }
        rows.push(StudyRow {
            key: format!("{ratio}"),
            kappa: f64::NAN,
            acc,
            asr,
            seed: cfg.seed.wrapping_add(i as u64),
            note: String::new(),
        });
    }

    if poison_grid.is_some() {
        let mut table = StudyTable {
            kind: StudyKind::PoisonLine,
            header: vec![format!(
                "poisoned fine-tuning sweep; epochs={} lr={} batch={} target={}",
                cfg.epochs, cfg.learning_rate, cfg.batch_size, target
            )],
            rows,
            summary: StudySummary::default(),
        };
        table.summarize();
        let path = ctx.write("poison_study.csv", &table.to_csv())?;
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

pub fn retrain(
    ctx: &Context,
    arch: &str,
    generator: &Path,
    retrain_seed: Option<u64>,
) -> CmdResult {
    let (train, test) = ctx.load_data()?;
    let arch = parse_arch(arch)?;
    let mut gen = checkpoint::load_generator(generator).map_err(runtime)?;
    let mut cfg = ctx.cfg.train_cfg();
    cfg.seed = retrain_seed.unwrap_or_else(|| child_seed(ctx.cfg.seed, 130));
    let (mut net, trace) =
        trainer::retrain_scratch(&arch, &gen, &train, &ctx.cfg.skeleton(), &cfg).map_err(runtime)?;
    ctx.write("trace_retrain.csv", &trace.to_csv())?;
    let path = ctx.out.join("model_retrained.ckpt");
    checkpoint::save_network(&path, &net).map_err(runtime)?;

    let report = evalkit::evaluate(&mut net, &mut gen, &test, cfg.target_class).map_err(runtime)?;
    ctx.write(
        "eval_retrain.csv",
        &format!("acc,asr,n_clean,n_triggered,target\n{},{},{},{},{}\n",
            report.acc, report.asr, report.n_clean, report.n_triggered, report.target),
    )?;
    println!("init seed: {}", net.init_spec().seed);
    println!("test acc: {}", report.acc);
    println!("test asr: {}", report.asr);
    eprintln!("wrote {}", path.display());
    Ok(())
}

pub fn eval(ctx: &Context, model: &Path, generator: Option<&Path>) -> CmdResult {
    let (_, test) = ctx.load_data()?;
    let mut net = checkpoint::load_network(model).map_err(runtime)?;
    let acc = evalkit::accuracy(&mut net, &test).map_err(runtime)?;
    let asr = match generator {
        Some(path) => {
            let mut gen = checkpoint::load_generator(path).map_err(runtime)?;
            evalkit::attack_success_rate(&mut net, &mut gen, &test, ctx.cfg.target_class)
                .map_err(runtime)?
        }
        None => f64::NAN,
    };
    ctx.write("eval.csv", &format!("acc,asr\n{},{}\n", acc, format_float(asr)))?;
    println!("test acc: {acc}");
    if generator.is_some() {
        println!("test asr: {asr}");
    }
    Ok(())
}

fn finish_study(ctx: &Context, table: &StudyTable, name: &str) -> CmdResult {
    let path = ctx.write(&format!("{name}.csv"), &table.to_csv())?;
    // scatter data triples alongside the full table
    let mut data = String::from("kappa,asr,acc\n");
    for r in &table.rows {
        data.push_str(&format!(
            "{},{},{}\n",
            format_float(r.kappa),
            format_float(r.asr),
            format_float(r.acc)
        ));
    }
    ctx.write(&format!("{name}_data.csv"), &data)?;
    let fmt = |v: &Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "undefined".into());
    println!("rows: {}", table.rows.len());
    println!("spearman(kappa, asr): {}", fmt(&table.summary.spearman_kappa_asr));
    println!("spearman(kappa, acc): {}", fmt(&table.summary.spearman_kappa_acc));
    println!("pearson(kappa, asr): {}", fmt(&table.summary.pearson_kappa_asr));
    eprintln!("wrote {}", path.display());
    Ok(())
}

pub fn correlate(ctx: &Context, archs: Option<usize>) -> CmdResult {
    let (train, test) = ctx.load_data()?;
    let num = archs.unwrap_or(ctx.cfg.study_archs);
    let table =
        correlation_study(num, &train, &test, &ctx.study_config()).map_err(runtime)?;
    finish_study(ctx, &table, "correlation")
}

pub fn enumerate(ctx: &Context, base: &str, edges: &str, ops: &str) -> CmdResult {
    let (train, test) = ctx.load_data()?;
    let base = parse_arch(base)?;
    let edges = parse_edges(edges)?;
    let ops = parse_ops(ops)?;
    let table = op_enumeration_study(&base, &edges, &ops, &train, &test, &ctx.study_config())
        .map_err(runtime)?;
    finish_study(ctx, &table, "enumeration")
}

pub fn landscape(ctx: &Context, base: &str, edges: &str) -> CmdResult {
    let (train, test) = ctx.load_data()?;
    let base = parse_arch(base)?;
    let edges = parse_edges(edges)?;
    if edges.len() != 2 {
        return Err(usage(anyhow!("landscape wants exactly two edges, got {}", edges.len())));
    }
    let table = landscape_study(&base, (edges[0], edges[1]), &train, &test, &ctx.study_config())
        .map_err(runtime)?;
    finish_study(ctx, &table, "landscape")
}

pub fn plot_cmd(ctx: &Context, table_path: &Path, stem: &str) -> CmdResult {
    let text = std::fs::read_to_string(table_path)
        .map_err(|e| usage(anyhow!("{}: {e}", table_path.display())))?;
    let table = StudyTable::from_csv(&text).map_err(runtime)?;
    let files = crate::plot::emit_plots(&table, &ctx.out, stem).map_err(CliError::Runtime)?;
    for f in &files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

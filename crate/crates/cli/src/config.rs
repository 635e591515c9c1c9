//! Experiment configuration: flat dotted keys in plain text.
//!
//! One `key = value` pair per line, `#` comments, every key owning a
//! default. Unknown keys are rejected so typos fail loudly. The effective
//! configuration renders back to text that parses to an identical value,
//! and a copy is written next to every run's outputs.
//!
//! A single global `seed` drives everything: the dataset draw uses it
//! directly and each subsystem derives its own stream from it.

use anyhow::{anyhow, bail, Result};
use archvuln::data::SyntheticSpec;
use archvuln::netbuilder::SkeletonConfig;
use archvuln::ntkscore::ScoreConfig;
use archvuln::rng::child_seed;
use archvuln::trainer::{LrSchedule, OptimizerKind, TrainConfig};
use archvuln::triggergen::GeneratorConfig;
use archvuln::SearchConfig;

/// Which dataset a run uses.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DatasetKind {
    /// Seeded synthetic prototype task.
    Synthetic,
    /// CIFAR-10 binary batches.
    Cifar10,
}

/// The fully-defaulted experiment configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Global seed; subsystem seeds derive from it.
    pub seed: u64,
    /// Worker bound for study rows.
    pub workers: usize,
    /// Dataset selector.
    pub dataset_kind: DatasetKind,
    /// CIFAR-10 path (file or directory); empty for synthetic runs.
    pub dataset_path: String,
    /// Synthetic dataset parameters.
    pub synthetic: SyntheticSpec,
    /// Model macro-structure (input shape and classes follow the dataset).
    pub skeleton_stages: usize,
    /// Cells per stage.
    pub skeleton_cells: usize,
    /// Base channel width.
    pub skeleton_width: usize,
    /// Init gain.
    pub init_gain: f64,
    /// Generator encoder widths.
    pub generator_widths: Vec<usize>,
    /// Generator middle width.
    pub generator_middle: usize,
    /// Scoring batch size.
    pub score_batch: usize,
    /// Scoring initializations.
    pub score_inits: usize,
    /// Attack target class.
    pub target_class: usize,
    /// Eigenvalue floor for the infinity sentinel.
    pub epsilon_floor: f64,
    /// Search pool size.
    pub search_pool: usize,
    /// Search sample size.
    pub search_sample: usize,
    /// Search iterations.
    pub search_iters: usize,
    /// Training knobs (clean/backdoor protocols).
    pub train: TrainConfig,
    /// Fine-tuning knobs.
    pub finetune: TrainConfig,
    /// Study: number of random architectures.
    pub study_archs: usize,
    /// Study: clean-training epochs per row.
    pub study_clean_epochs: usize,
    /// Study: mask epochs per row.
    pub study_mask_epochs: usize,
    /// Study: mark epochs per row.
    pub study_mark_epochs: usize,
    /// Study: enumeration budget cap.
    pub study_budget_cap: usize,
    /// Study: train on only the first N samples when nonzero.
    pub study_train_subset: usize,
    /// Study: generator trainings averaged into each row.
    pub study_asr_reps: usize,
}

impl Default for ExperimentConfig {
    fn default() -> ExperimentConfig {
        ExperimentConfig {
            seed: 7,
            workers: 1,
            dataset_kind: DatasetKind::Synthetic,
            dataset_path: String::new(),
            synthetic: SyntheticSpec::default(),
            skeleton_stages: 3,
            skeleton_cells: 2,
            skeleton_width: 16,
            init_gain: 1.0,
            generator_widths: vec![8, 16, 32],
            generator_middle: 32,
            score_batch: 32,
            score_inits: 3,
            target_class: 0,
            epsilon_floor: 1e-12,
            search_pool: 16,
            search_sample: 8,
            search_iters: 200,
            train: TrainConfig::default(),
            finetune: TrainConfig::finetune_defaults(),
            study_archs: 16,
            study_clean_epochs: 4,
            study_mask_epochs: 2,
            study_mark_epochs: 2,
            study_budget_cap: 64,
            study_train_subset: 0,
            study_asr_reps: 1,
        }
    }
}

fn optimizer_name(o: OptimizerKind) -> &'static str {
    match o {
        OptimizerKind::Adam => "adam",
        OptimizerKind::SgdMomentum => "sgd_momentum",
    }
}

fn parse_optimizer(s: &str) -> Result<OptimizerKind> {
    match s {
        "adam" => Ok(OptimizerKind::Adam),
        "sgd_momentum" => Ok(OptimizerKind::SgdMomentum),
        other => bail!("unknown optimizer {other:?} (adam | sgd_momentum)"),
    }
}

fn schedule_name(s: LrSchedule) -> &'static str {
    match s {
        LrSchedule::Constant => "constant",
        LrSchedule::CosineAnnealing => "cosine_annealing",
    }
}

fn parse_schedule(s: &str) -> Result<LrSchedule> {
    match s {
        "constant" => Ok(LrSchedule::Constant),
        "cosine_annealing" => Ok(LrSchedule::CosineAnnealing),
        other => bail!("unknown schedule {other:?} (constant | cosine_annealing)"),
    }
}

impl ExperimentConfig {
    /// Apply one dotted `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let parse_usize = |v: &str| -> Result<usize> {
            v.parse().map_err(|_| anyhow!("{key}: expected an integer, got {v:?}"))
        };
        let parse_u64 = |v: &str| -> Result<u64> {
            v.parse().map_err(|_| anyhow!("{key}: expected an integer, got {v:?}"))
        };
        let parse_f64 = |v: &str| -> Result<f64> {
            v.parse().map_err(|_| anyhow!("{key}: expected a number, got {v:?}"))
        };
        match key {
            "seed" => self.seed = parse_u64(value)?,
            "workers" => self.workers = parse_usize(value)?,
            "dataset.kind" => {
                self.dataset_kind = match value {
                    "synthetic" => DatasetKind::Synthetic,
                    "cifar10" => DatasetKind::Cifar10,
                    other => bail!("unknown dataset kind {other:?} (synthetic | cifar10)"),
                }
            }
            "dataset.path" => self.dataset_path = value.to_string(),
            "dataset.num_classes" => self.synthetic.num_classes = parse_usize(value)?,
            "dataset.image_size" => self.synthetic.image_size = parse_usize(value)?,
            "dataset.train_per_class" => self.synthetic.train_per_class = parse_usize(value)?,
            "dataset.test_per_class" => self.synthetic.test_per_class = parse_usize(value)?,
            "dataset.noise_std" => self.synthetic.noise_std = parse_f64(value)?,
            "skeleton.stages" => self.skeleton_stages = parse_usize(value)?,
            "skeleton.cells_per_stage" => self.skeleton_cells = parse_usize(value)?,
            "skeleton.base_width" => self.skeleton_width = parse_usize(value)?,
            "init.gain" => self.init_gain = parse_f64(value)?,
            "generator.widths" => {
                self.generator_widths = value
                    .split(',')
                    .map(|s| s.trim().parse().map_err(|_| anyhow!("{key}: bad width {s:?}")))
                    .collect::<Result<_>>()?;
            }
            "generator.middle" => self.generator_middle = parse_usize(value)?,
            "score.batch_size" => self.score_batch = parse_usize(value)?,
            "score.num_inits" => self.score_inits = parse_usize(value)?,
            "score.epsilon_floor" => self.epsilon_floor = parse_f64(value)?,
            "target_class" => self.target_class = parse_usize(value)?,
            "search.pool_size" => self.search_pool = parse_usize(value)?,
            "search.sample_size" => self.search_sample = parse_usize(value)?,
            "search.max_iterations" => self.search_iters = parse_usize(value)?,
            "train.epochs" => self.train.epochs = parse_usize(value)?,
            "train.optimizer" => self.train.optimizer = parse_optimizer(value)?,
            "train.learning_rate" => self.train.learning_rate = parse_f64(value)?,
            "train.lr_schedule" => self.train.lr_schedule = parse_schedule(value)?,
            "train.batch_size" => self.train.batch_size = parse_usize(value)?,
            "train.rho_b" => self.train.rho_b = parse_f64(value)?,
            "train.rho_c" => self.train.rho_c = parse_f64(value)?,
            "train.lambda_div" => self.train.lambda_div = parse_f64(value)?,
            "train.lambda_atk" => self.train.lambda_atk = parse_f64(value)?,
            "train.poison_ratio" => self.train.poison_ratio = parse_f64(value)?,
            "train.mask_epochs" => self.train.mask_epochs = parse_usize(value)?,
            "train.mark_epochs" => self.train.mark_epochs = parse_usize(value)?,
            "finetune.epochs" => self.finetune.epochs = parse_usize(value)?,
            "finetune.optimizer" => self.finetune.optimizer = parse_optimizer(value)?,
            "finetune.learning_rate" => self.finetune.learning_rate = parse_f64(value)?,
            "finetune.lr_schedule" => self.finetune.lr_schedule = parse_schedule(value)?,
            "finetune.batch_size" => self.finetune.batch_size = parse_usize(value)?,
            "study.num_archs" => self.study_archs = parse_usize(value)?,
            "study.clean_epochs" => self.study_clean_epochs = parse_usize(value)?,
            "study.mask_epochs" => self.study_mask_epochs = parse_usize(value)?,
            "study.mark_epochs" => self.study_mark_epochs = parse_usize(value)?,
            "study.budget_cap" => self.study_budget_cap = parse_usize(value)?,
            "study.train_subset" => self.study_train_subset = parse_usize(value)?,
            "study.asr_reps" => self.study_asr_reps = parse_usize(value)?,
            other => bail!("unknown config key {other:?}"),
        }
        Ok(())
    }

    /// Parse a config document on top of the defaults.
    pub fn from_text(text: &str) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected key = value", lineno + 1))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| anyhow!("line {}: {e}", lineno + 1))?;
        }
        Ok(cfg)
    }

    /// Render every field; parsing the output reproduces `self`.
    pub fn render(&self) -> String {
        let widths =
            self.generator_widths.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(",");
        format!(
            "seed = {}\n\
             workers = {}\n\
             target_class = {}\n\
             dataset.kind = {}\n\
             dataset.path = {}\n\
             dataset.num_classes = {}\n\
             dataset.image_size = {}\n\
             dataset.train_per_class = {}\n\
             dataset.test_per_class = {}\n\
             dataset.noise_std = {}\n\
             skeleton.stages = {}\n\
             skeleton.cells_per_stage = {}\n\
             skeleton.base_width = {}\n\
             init.gain = {}\n\
             generator.widths = {}\n\
             generator.middle = {}\n\
             score.batch_size = {}\n\
             score.num_inits = {}\n\
             score.epsilon_floor = {}\n\
             search.pool_size = {}\n\
             search.sample_size = {}\n\
             search.max_iterations = {}\n\
             train.epochs = {}\n\
             train.optimizer = {}\n\
             train.learning_rate = {}\n\
             train.lr_schedule = {}\n\
             train.batch_size = {}\n\
             train.rho_b = {}\n\
             train.rho_c = {}\n\
             train.lambda_div = {}\n\
             train.lambda_atk = {}\n\
             train.poison_ratio = {}\n\
             train.mask_epochs = {}\n\
             train.mark_epochs = {}\n\
             finetune.epochs = {}\n\
             finetune.optimizer = {}\n\
             finetune.learning_rate = {}\n\
             finetune.lr_schedule = {}\n\
             finetune.batch_size = {}\n\
             study.num_archs = {}\n\
             study.clean_epochs = {}\n\
             study.mask_epochs = {}\n\
             study.mark_epochs = {}\n\
             study.budget_cap = {}\n\
             study.train_subset = {}\n\
             study.asr_reps = {}\n",
            self.seed,
            self.workers,
            self.target_class,
            match self.dataset_kind {
                DatasetKind::Synthetic => "synthetic",
                DatasetKind::Cifar10 => "cifar10",
            },
            self.dataset_path,
            self.synthetic.num_classes,
            self.synthetic.image_size,
            self.synthetic.train_per_class,
            self.synthetic.test_per_class,
            self.synthetic.noise_std,
            self.skeleton_stages,
            self.skeleton_cells,
            self.skeleton_width,
            self.init_gain,
            widths,
            self.generator_middle,
            self.score_batch,
            self.score_inits,
            self.epsilon_floor,
            self.search_pool,
            self.search_sample,
            self.search_iters,
            self.train.epochs,
            optimizer_name(self.train.optimizer),
            self.train.learning_rate,
            schedule_name(self.train.lr_schedule),
            self.train.batch_size,
            self.train.rho_b,
            self.train.rho_c,
            self.train.lambda_div,
            self.train.lambda_atk,
            self.train.poison_ratio,
            self.train.mask_epochs,
            self.train.mark_epochs,
            self.finetune.epochs,
            optimizer_name(self.finetune.optimizer),
            self.finetune.learning_rate,
            schedule_name(self.finetune.lr_schedule),
            self.finetune.batch_size,
            self.study_archs,
            self.study_clean_epochs,
            self.study_mask_epochs,
            self.study_mark_epochs,
            self.study_budget_cap,
            self.study_train_subset,
            self.study_asr_reps,
        )
    }

    /// Image `(H, W, C)` the models see under this config.
    pub fn input_shape(&self) -> (usize, usize, usize) {
        match self.dataset_kind {
            DatasetKind::Synthetic => {
                (self.synthetic.image_size, self.synthetic.image_size, 3)
            }
            DatasetKind::Cifar10 => (32, 32, 3),
        }
    }

    /// Class count under this config.
    pub fn num_classes(&self) -> usize {
        match self.dataset_kind {
            DatasetKind::Synthetic => self.synthetic.num_classes,
            DatasetKind::Cifar10 => 10,
        }
    }

    /// Model skeleton under this config.
    pub fn skeleton(&self) -> SkeletonConfig {
        SkeletonConfig {
            stages: self.skeleton_stages,
            cells_per_stage: self.skeleton_cells,
            base_width: self.skeleton_width,
            input_shape: self.input_shape(),
            num_classes: self.num_classes(),
        }
    }

    /// Generator structure under this config.
    pub fn generator(&self) -> GeneratorConfig {
        let (h, w, _) = self.input_shape();
        GeneratorConfig {
            input_shape: (h, w, 3),
            encoder_widths: self.generator_widths.clone(),
            middle_width: self.generator_middle,
            pooling_stages: self.generator_widths.len(),
        }
    }

    /// Scoring settings; the base seed derives from the global seed.
    pub fn score(&self) -> ScoreConfig {
        ScoreConfig {
            batch_size: self.score_batch,
            num_inits: self.score_inits,
            base_seed: child_seed(self.seed, 101),
            target_class: self.target_class,
            epsilon_floor: self.epsilon_floor,
        }
    }

    /// Search settings; the seed derives from the global seed.
    pub fn search(&self) -> SearchConfig {
        SearchConfig {
            pool_size: self.search_pool,
            sample_size: self.search_sample,
            max_iterations: self.search_iters,
            seed: child_seed(self.seed, 102),
        }
    }

    /// Training settings with derived seed and the shared target class.
    pub fn train_cfg(&self) -> TrainConfig {
        TrainConfig {
            seed: child_seed(self.seed, 103),
            target_class: self.target_class,
            ..self.train
        }
    }

    /// Fine-tuning settings with derived seed and the shared target class.
    pub fn finetune_cfg(&self) -> TrainConfig {
        TrainConfig {
            seed: child_seed(self.seed, 104),
            target_class: self.target_class,
            ..self.finetune
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_parse_roundtrip() {
        let cfg = ExperimentConfig::default();
        let text = cfg.render();
        let back = ExperimentConfig::from_text(&text).unwrap();
        assert_eq!(back, cfg);

        let mut tweaked = cfg.clone();
        tweaked.set("seed", "99").unwrap();
        tweaked.set("generator.widths", "4,8,16").unwrap();
        tweaked.set("train.optimizer", "sgd_momentum").unwrap();
        tweaked.set("dataset.noise_std", "0.25").unwrap();
        let back = ExperimentConfig::from_text(&tweaked.render()).unwrap();
        assert_eq!(back, tweaked);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_text("score.batchsize = 4\n").is_err());
        assert!(ExperimentConfig::default().set("nope", "1").is_err());
    }

    #[test]
    fn comments_and_blanks_are_skipped() {
        let cfg = ExperimentConfig::from_text(
            "# a comment\n\nseed = 3   # trailing comment\nworkers = 2\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.workers, 2);
    }

    #[test]
    fn defaults_match_published_training_block() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.train.rho_b, 0.1);
        assert_eq!(cfg.train.rho_c, 0.1);
        assert_eq!(cfg.train.lambda_div, 1.0);
        assert_eq!(cfg.train.learning_rate, 0.01);
        assert_eq!(cfg.train.batch_size, 96);
        assert_eq!(cfg.finetune.epochs, 50);
        assert_eq!(schedule_name(cfg.finetune.lr_schedule), "cosine_annealing");
    }

    #[test]
    fn derived_seeds_differ_per_subsystem() {
        let cfg = ExperimentConfig::default();
        let seeds = [
            cfg.score().base_seed,
            cfg.search().seed,
            cfg.train_cfg().seed,
            cfg.finetune_cfg().seed,
        ];
        let distinct: std::collections::HashSet<u64> = seeds.iter().copied().collect();
        assert_eq!(distinct.len(), seeds.len());
    }
}

//! Aging evolution over the architecture space.
//!
//! A pool of `n` scored candidates evolves for a fixed number of iterations:
//! each step samples `m` distinct pool slots, mutates the best-scoring
//! sampled candidate, and writes the child over the oldest pool slot (every
//! timestamp then ages by one). Lower scores are better throughout.
//!
//! The returned champion is a snapshot of the best candidate ever scored:
//! aging can evict the best slot from the live pool, so the pool alone is
//! not enough to answer "what won".

use crate::archspace::ArchSpec;
use crate::error::{Error, Result};
use crate::rng::{seeded, SeededRng};

/// Search budget and shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SearchConfig {
    /// Pool size `n`.
    pub pool_size: usize,
    /// Sample size `m`, with `1 <= m <= n`.
    pub sample_size: usize,
    /// Number of evolution steps after pool initialization.
    pub max_iterations: usize,
    /// Seed for pool initialization, sampling and mutation.
    pub seed: u64,
}

impl SearchConfig {
    fn validate(&self) -> Result<()> {
        if self.pool_size == 0 {
            return Err(Error::Config("pool_size must be >= 1".into()));
        }
        if self.sample_size == 0 || self.sample_size > self.pool_size {
            return Err(Error::Config(format!(
                "sample_size must satisfy 1 <= m <= n, got m={} n={}",
                self.sample_size, self.pool_size
            )));
        }
        Ok(())
    }
}

/// One line of the search log: what was mutated into what, and the running
/// best score.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchLogRow {
    /// 1-based evolution step.
    pub iteration: usize,
    /// Pool slot the parent was sampled from.
    pub mutated_from: usize,
    /// The child architecture.
    pub new_arch: ArchSpec,
    /// The child's score.
    pub score: f64,
    /// Best score seen up to and including this step.
    pub best_score: f64,
}

/// Live search state.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchState {
    /// Candidate pool `A`.
    pub pool: Vec<ArchSpec>,
    /// Scores `S`, aligned with the pool.
    pub scores: Vec<f64>,
    /// Timestamps `T`: steps since each slot was written.
    pub timestamps: Vec<u64>,
    /// Slot where the best-ever candidate was found.
    pub best: usize,
    /// Snapshot of the best-ever candidate (the slot may have been evicted).
    pub best_arch: ArchSpec,
    /// Its score.
    pub best_score: f64,
    /// Steps taken so far.
    pub iteration: usize,
    /// `(iteration, best_score)` after every step; non-increasing scores.
    pub history: Vec<(usize, f64)>,
    /// Per-step log for persistence.
    pub log: Vec<SearchLogRow>,
}

fn check_score(v: f64) -> Result<f64> {
    if v.is_nan() {
        return Err(Error::NonFinite { what: "search score".into() });
    }
    Ok(v)
}

/// Fill a pool with `n` scored random architectures. Timestamps start at
/// zero and the best index points at the argmin of the initial scores.
pub fn init_pool<F>(cfg: &SearchConfig, mut score_fn: F) -> Result<SearchState>
where
    F: FnMut(&ArchSpec) -> Result<f64>,
{
    cfg.validate()?;
    let mut rng = seeded(cfg.seed);
    let mut pool = Vec::with_capacity(cfg.pool_size);
    let mut scores = Vec::with_capacity(cfg.pool_size);
    for _ in 0..cfg.pool_size {
        let arch = ArchSpec::random(&mut rng);
        let score = check_score(score_fn(&arch).map_err(|e| {
            Error::Config(format!("scoring pool candidate {arch} failed: {e}"))
        })?)?;
        pool.push(arch);
        scores.push(score);
    }
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s < scores[best] {
            best = i;
        }
    }
    let best_arch = pool[best];
    let best_score = scores[best];
    Ok(SearchState {
        pool,
        scores,
        timestamps: vec![0; cfg.pool_size],
        best,
        best_arch,
        best_score,
        iteration: 0,
        history: vec![(0, best_score)],
        log: Vec::new(),
    })
}

/// One evolution step. Ties in both the sampled argmin and the timestamp
/// argmax break toward the lowest index.
pub fn search_step<F>(
    st: &mut SearchState,
    cfg: &SearchConfig,
    mut score_fn: F,
    rng: &mut SeededRng,
) -> Result<()>
where
    F: FnMut(&ArchSpec) -> Result<f64>,
{
    let n = cfg.pool_size;
    let mut sampled = rand::seq::index::sample(rng, n, cfg.sample_size).into_vec();
    sampled.sort_unstable();
    let mut parent = sampled[0];
    for &k in &sampled[1..] {
        if st.scores[k] < st.scores[parent] {
            parent = k;
        }
    }
    let mut oldest = 0;
    for k in 1..n {
        if st.timestamps[k] > st.timestamps[oldest] {
            oldest = k;
        }
    }

    let child = st.pool[parent].mutate(rng);
    let score = check_score(score_fn(&child)?)?;
    st.pool[oldest] = child;
    st.scores[oldest] = score;
    for t in st.timestamps.iter_mut() {
        *t += 1;
    }
    st.timestamps[oldest] = 0;
    st.iteration += 1;
    if score < st.best_score {
        st.best = oldest;
        st.best_arch = child;
        st.best_score = score;
    }
    st.history.push((st.iteration, st.best_score));
    st.log.push(SearchLogRow {
        iteration: st.iteration,
        mutated_from: parent,
        new_arch: child,
        score,
        best_score: st.best_score,
    });
    Ok(())
}

/// Initialize a pool and evolve it for the configured number of steps.
/// Returns the best-ever architecture with the full final state.
pub fn run_search<F>(cfg: &SearchConfig, mut score_fn: F) -> Result<(ArchSpec, SearchState)>
where
    F: FnMut(&ArchSpec) -> Result<f64>,
{
    let mut st = init_pool(cfg, &mut score_fn)?;
    let mut rng = seeded(crate::rng::child_seed(cfg.seed, 1));
    for _ in 0..cfg.max_iterations {
        search_step(&mut st, cfg, &mut score_fn, &mut rng)?;
    }
    Ok((st.best_arch, st))
}

/// Render the search log as CSV.
pub fn log_to_csv(log: &[SearchLogRow]) -> String {
    let mut out = String::from("iteration,mutated_from,new_arch,score,best_score\n");
    for row in log {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            row.iteration,
            row.mutated_from,
            row.new_arch,
            crate::ntkscore::format_float(row.score),
            crate::ntkscore::format_float(row.best_score),
        ));
    }
    out
}

/// Render the final state as a flat structured text document.
pub fn state_to_text(st: &SearchState) -> String {
    let mut out = String::new();
    out.push_str(&format!("iteration = {}\n", st.iteration));
    out.push_str(&format!("best.slot = {}\n", st.best));
    out.push_str(&format!("best.arch = {}\n", st.best_arch));
    out.push_str(&format!(
        "best.score = {}\n",
        crate::ntkscore::format_float(st.best_score)
    ));
    for i in 0..st.pool.len() {
        out.push_str(&format!(
            "pool[{i}].arch = {}\npool[{i}].score = {}\npool[{i}].timestamp = {}\n",
            st.pool[i],
            crate::ntkscore::format_float(st.scores[i]),
            st.timestamps[i]
        ));
    }
    out
}

//! Historical sample retrieval and training-set assembly.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::generation::QAPair;
use crate::num::Scalar;
use crate::scoring::ScoreRecord;
use crate::seed::derive_seed;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum SelectionError {
    #[error("no IFD score for historical pair {0}")]
    MissingScore(String),
    #[error("selected id {0} is not in the history")]
    Unresolvable(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// The `k` historical pairs with the highest IFD.
    IfdTopk,
    /// `k` historical pairs drawn uniformly without replacement.
    RandomK,
    /// Every historical pair.
    AllHistory,
    /// Train on the new data alone.
    NoHistory,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub strategy: Strategy,
    /// `None` means "as many as the current iteration generated".
    pub k: Option<usize>,
    pub seed: u64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::IfdTopk,
            k: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub iteration: u32,
    pub selected_ids: Vec<String>,
    pub strategy_used: Strategy,
    pub pool_size: usize,
    pub k: usize,
    pub k_defaulted: bool,
}

/// One historical pair with its score, if it has one.
#[derive(Debug, Clone, Copy)]
pub struct Candidate<'a, F = f64> {
    pub pair: &'a QAPair,
    pub score: Option<&'a ScoreRecord<F>>,
}

fn canonical(a: &QAPair, b: &QAPair) -> Ordering {
    a.iteration.cmp(&b.iteration).then_with(|| a.id.cmp(&b.id))
}

/// Selects from `history` under `config`. `default_k` stands in for an unset `k`.
pub fn select<F: Scalar>(
    iteration: u32,
    history: &[Candidate<'_, F>],
    config: &SelectionConfig,
    default_k: usize,
) -> Result<SelectionResult, SelectionError> {
    let k = config.k.unwrap_or(default_k);
    let selected_ids = match config.strategy {
        Strategy::IfdTopk => top_k_by_ifd(history, k)?,
        Strategy::RandomK => random_k(iteration, history, k, config.seed),
        Strategy::AllHistory => {
            let mut all: Vec<&QAPair> = history.iter().map(|c| c.pair).collect();
            all.sort_by(|a, b| canonical(a, b));
            all.into_iter().map(|p| p.id.clone()).collect()
        }
        Strategy::NoHistory => Vec::new(),
    };
    Ok(SelectionResult {
        iteration,
        selected_ids,
        strategy_used: config.strategy,
        pool_size: history.len(),
        k,
        k_defaulted: config.k.is_none(),
    })
}

/// Highest IFD first; ties go to the earlier iteration, then the smaller id.
fn top_k_by_ifd<F: Scalar>(
    history: &[Candidate<'_, F>],
    k: usize,
) -> Result<Vec<String>, SelectionError> {
    let mut scored: Vec<(F, &QAPair)> = history
        .iter()
        .map(|c| {
            c.score
                .map(|s| (s.ifd, c.pair))
                .ok_or_else(|| SelectionError::MissingScore(c.pair.id.clone()))
        })
        .collect::<Result<_, _>>()?;
    let k = k.min(scored.len());
    if k == 0 {
        return Ok(Vec::new());
    }
    let order = |a: &(F, &QAPair), b: &(F, &QAPair)| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(Ordering::Equal)
            .then_with(|| canonical(a.1, b.1))
    };
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, order);
        scored.truncate(k);
    }
    scored.sort_by(order);
    Ok(scored.into_iter().map(|(_, p)| p.id.clone()).collect())
}

fn random_k<F>(iteration: u32, history: &[Candidate<'_, F>], k: usize, seed: u64) -> Vec<String> {
    let mut pool: Vec<&QAPair> = history.iter().map(|c| c.pair).collect();
    pool.sort_by(|a, b| canonical(a, b));
    let k = k.min(pool.len());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["random_k", &iteration.to_string()]));
    let mut picked = index::sample(&mut rng, pool.len(), k).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| pool[i].id.clone()).collect()
}

/// New data first, then the selected historical pairs; duplicate ids keep the first copy.
pub fn assemble_training_set(
    new_data: &[QAPair],
    selected: &SelectionResult,
    history: &HashMap<String, QAPair>,
) -> Result<Vec<QAPair>, SelectionError> {
    let mut seen: HashSet<&str> = HashSet::new();
    let mut out = Vec::with_capacity(new_data.len() + selected.selected_ids.len());
    for pair in new_data {
        if seen.insert(&pair.id) {
            out.push(pair.clone());
        }
    }
    for id in &selected.selected_ids {
        let pair = history
            .get(id)
            .ok_or_else(|| SelectionError::Unresolvable(id.clone()))?;
        if seen.insert(&pair.id) {
            out.push(pair.clone());
        }
    }
    Ok(out)
}

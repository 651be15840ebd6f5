//! Permutation feature importance over the live rollout.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::par_map;
use crate::features::{feature_slot, FeatureSlot};
use crate::forecast::{live_rollout, DayForecast, ForecastConfig, StepPredictor};
use crate::graph::{EventGraph, FeaturePermutation};
use crate::train::rollout_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureImportance {
    pub feature: String,
    pub shuffled_mae: f64,
    /// MAE(shuffled) − MAE(baseline), averaged over repetitions.
    pub importance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureImportanceReport {
    pub model: String,
    pub seed: u64,
    pub repetitions: usize,
    pub baseline_mae: f64,
    pub rows: Vec<FeatureImportance>,
}

impl FeatureImportanceReport {
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("feature,baseline_mae,shuffled_mae,importance,repetitions,seed\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.feature,
                self.baseline_mae,
                r.shuffled_mae,
                r.importance,
                self.repetitions,
                self.seed
            )
            .expect("string write");
        }
        out
    }

    /// Rows sorted by descending importance, ties by name.
    pub fn ranked(&self) -> Vec<&FeatureImportance> {
        let mut v: Vec<&FeatureImportance> = self.rows.iter().collect();
        v.sort_by(|a, b| {
            b.importance
                .total_cmp(&a.importance)
                .then_with(|| a.feature.cmp(&b.feature))
        });
        v
    }
}

fn pooled_mae(forecasts: &[DayForecast]) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for p in forecasts.iter().flat_map(|f| &f.predictions) {
        sum += (p.pred - p.truth).abs();
        n += 1;
    }
    if n == 0 {
        return Err(Error::Config(
            "permutation importance needs at least one prediction".into(),
        ));
    }
    Ok(sum / n as f64)
}

/// Shuffle each feature across the nodes of every day, re-run the rollout
/// and report the MAE increase. A repetition uses the same node permutation
/// for every feature.
#[allow(clippy::too_many_arguments)]
pub fn permutation_importance(
    days: &[EventGraph],
    predictor: &dyn StepPredictor,
    model: &str,
    cfg: &ForecastConfig,
    features: &[&str],
    repetitions: usize,
    seed: u64,
    jobs: usize,
) -> Result<FeatureImportanceReport> {
    if repetitions == 0 {
        return Err(Error::Config(
            "permutation importance needs at least one repetition".into(),
        ));
    }
    let slots = features
        .iter()
        .map(|f| feature_slot(f).ok_or_else(|| Error::UnknownColumn(f.to_string())))
        .collect::<Result<Vec<_>>>()?;

    let run = |shuffled: Option<(FeatureSlot, usize)>| -> Result<f64> {
        let out: Result<Vec<DayForecast>> = par_map(jobs, days, |g| {
            let p = shuffled.map(|(slot, rep)| FeaturePermutation {
                slot,
                perm: shuffle(g, seed, rep),
            });
            live_rollout(g, predictor, model, cfg, false, p.as_ref())
        })
        .into_iter()
        .collect();
        pooled_mae(&out?)
    };

    let baseline_mae = run(None)?;
    let mut rows = Vec::with_capacity(features.len());
    for (name, &slot) in features.iter().zip(&slots) {
        let mut total = 0.0;
        for rep in 0..repetitions {
            total += run(Some((slot, rep)))?;
        }
        let shuffled_mae = total / repetitions as f64;
        rows.push(FeatureImportance {
            feature: name.to_string(),
            shuffled_mae,
            importance: shuffled_mae - baseline_mae,
        });
    }
    Ok(FeatureImportanceReport {
        model: model.to_string(),
        seed,
        repetitions,
        baseline_mae,
        rows,
    })
}

fn shuffle(g: &EventGraph, seed: u64, rep: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..g.nodes.len()).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(rollout_seed(
        seed,
        rep,
        g.service_day,
        0,
        "permutation",
    )));
    perm
}

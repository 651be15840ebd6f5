//! Rollout training: two independent k-step simulations per service day
//! (classifier, then regressor) with scheduled sampling, plus one-shot
//! training of the GCN baseline.
//!
//! Gradients are truncated at state updates: values written into the rollout
//! state are constants for later steps. Each model takes one Adam step per
//! training day with the gradient summed over all of that day's rollouts.

use std::fmt::Write as _;
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::par_map;
use crate::features::{Preprocessor, CATEGORICAL_COUNT};
use crate::graph::{
    extract_consistent_subgraph, plan_rollouts, EventGraph, RolloutPlan, RolloutState,
};
use crate::model::{
    bce_with_logits, bounded_log_delay, decode_delay, masked_mse, sigmoid, Adam, Architecture,
    GatBodyConfig, GraphInput, ModelSpec, Network, Stage, StepLoss,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SamplingSchedule {
    /// 1.0 at the first epoch down to 0.0 at the last.
    Linear,
    /// `decay^epoch`.
    Exponential {
        decay: f64,
    },
    Constant {
        probability: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutConfig {
    /// Steps per rollout.
    pub k: usize,
    /// Width of one step's anchor slice, minutes.
    pub slice_minutes: i64,
    pub schedule: SamplingSchedule,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// In-neighborhood hops per subgraph; defaults to the layer count.
    pub subgraph_depth: Option<usize>,
    /// Weight of the positive BCE term (1.0 is plain BCE).
    pub positive_weight: f64,
    /// Classifier probability at or above which an event counts as delayed.
    pub threshold: f64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            k: 10,
            slice_minutes: 10,
            schedule: SamplingSchedule::Linear,
            epochs: 10,
            learning_rate: 1e-3,
            seed: 7,
            subgraph_depth: None,
            positive_weight: 1.0,
            threshold: 0.5,
        }
    }
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.slice_minutes <= 0 {
            return Err(Error::Config("k and slice_minutes must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) || self.positive_weight <= 0.0 {
            return Err(Error::Config(
                "threshold must be in [0, 1] and positive_weight > 0".into(),
            ));
        }
        match self.schedule {
            SamplingSchedule::Exponential { decay } if !(0.0..=1.0).contains(&decay) => {
                Err(Error::Config("exponential decay must be in [0, 1]".into()))
            }
            SamplingSchedule::Constant { probability } if !(0.0..=1.0).contains(&probability) => {
                Err(Error::Config(
                    "constant probability must be in [0, 1]".into(),
                ))
            }
            _ => Ok(()),
        }
    }

    pub fn depth(&self, body: &GatBodyConfig) -> usize {
        self.subgraph_depth.unwrap_or(body.layers)
    }
}

/// Probability of feeding ground truth into the state at `epoch`.
pub fn scheduled_sampling_prob(epoch: usize, cfg: &RolloutConfig) -> f64 {
    match cfg.schedule {
        SamplingSchedule::Linear => {
            if cfg.epochs <= 1 {
                1.0
            } else {
                1.0 - epoch.min(cfg.epochs - 1) as f64 / (cfg.epochs - 1) as f64
            }
        }
        SamplingSchedule::Exponential { decay } => decay.powi(epoch as i32),
        SamplingSchedule::Constant { probability } => probability,
    }
}

/// Loss bookkeeping of one rollout step, summed over rollouts.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepStats {
    /// Sum of per-batch mean losses.
    pub loss_sum: f64,
    pub batches: usize,
    pub targets: usize,
    pub delayed: usize,
    pub on_time: usize,
}

impl StepStats {
    pub fn mean_loss(&self) -> f64 {
        if self.batches == 0 {
            0.0
        } else {
            self.loss_sum / self.batches as f64
        }
    }

    fn add(&mut self, o: &StepStats) {
        self.loss_sum += o.loss_sum;
        self.batches += o.batches;
        self.targets += o.targets;
        self.delayed += o.delayed;
        self.on_time += o.on_time;
    }
}

/// Per-step statistics of one or more rollouts.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DayLoss {
    pub steps: Vec<StepStats>,
}

impl DayLoss {
    fn new(k: usize) -> Self {
        Self {
            steps: vec![StepStats::default(); k],
        }
    }

    pub fn total(&self) -> f64 {
        self.steps.iter().map(|s| s.loss_sum).sum()
    }

    /// Mean of per-batch losses across all steps.
    pub fn mean(&self) -> f64 {
        let b: usize = self.steps.iter().map(|s| s.batches).sum();
        if b == 0 {
            0.0
        } else {
            self.total() / b as f64
        }
    }

    pub fn merge(&mut self, other: &DayLoss) {
        if self.steps.len() < other.steps.len() {
            self.steps.resize(other.steps.len(), StepStats::default());
        }
        for (a, b) in self.steps.iter_mut().zip(&other.steps) {
            a.add(b);
        }
    }
}

fn stage_loss(
    stage: Stage,
    out: &[f64],
    truth: &[f64],
    positive_weight: f64,
) -> (StepLoss, Vec<f64>) {
    match stage {
        Stage::Classifier => {
            let labels: Vec<bool> = truth.iter().map(|&d| d > 0.0).collect();
            bce_with_logits(out, &labels, positive_weight)
        }
        Stage::Regressor => masked_mse(out, truth),
    }
}

/// State values the model itself would write for a step.
fn model_driven(stage: Stage, out: &[f64], truth: &[f64], threshold: f64) -> Vec<f64> {
    match stage {
        Stage::Classifier => out
            .iter()
            .zip(truth)
            .map(|(&l, &t)| if sigmoid(l) >= threshold { t } else { 0.0 })
            .collect(),
        Stage::Regressor => out
            .iter()
            .map(|&p| decode_delay(bounded_log_delay(p)))
            .collect(),
    }
}

fn step_stats(truth: &[f64], loss: StepLoss) -> StepStats {
    let delayed = truth.iter().filter(|&&d| d > 0.0).count();
    StepStats {
        loss_sum: loss.loss,
        batches: 1,
        targets: truth.len(),
        delayed,
        on_time: truth.len() - delayed,
    }
}

fn check(loss: StepLoss, what: &str, step: usize) -> Result<()> {
    if loss.loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric {
            layer: 0,
            message: format!("non-finite {what} loss at step {step}"),
        })
    }
}

/// Autoregressive k-step rollout of one GATv2 stage over one plan.
fn autoregressive_plan(
    graph: &EventGraph,
    plan: &RolloutPlan,
    net: &Network,
    cfg: &RolloutConfig,
    p: f64,
    seed: u64,
    grads: Option<&mut Network>,
) -> Result<DayLoss> {
    let stage = net.spec.stage;
    let depth = cfg.depth(&net.spec.body);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = RolloutState::new(graph, plan.origin);
    let mut report = DayLoss::new(plan.steps.len());
    let mut grads = grads;
    for (s, anchors) in plan.steps.iter().enumerate() {
        let teacher = rng.gen::<f64>() < p;
        if anchors.is_empty() {
            state.update(graph, &[])?;
            continue;
        }
        let view = extract_consistent_subgraph(graph, anchors, &state, depth)?;
        let inp = GraphInput::from_view(&view)?;
        let fwd = net.forward(&inp)?;
        let out = fwd.output.column(0).to_vec();
        let truth: Vec<f64> = anchors
            .iter()
            .map(|&a| graph.nodes[a].target_delay)
            .collect();
        let (loss, d) = stage_loss(stage, &out, &truth, cfg.positive_weight);
        check(loss, "rollout", s)?;
        report.steps[s] = step_stats(&truth, loss);
        if let Some(g) = grads.as_deref_mut() {
            let d_out = Array2::from_shape_vec((d.len(), 1), d).expect("column");
            net.backward(&inp, &fwd, &d_out, g);
        }
        let values = if teacher {
            truth
        } else {
            model_driven(stage, &out, &truth, cfg.threshold)
        };
        let updates: Vec<(usize, f64)> = anchors.iter().copied().zip(values).collect();
        state.update(graph, &updates)?;
    }
    Ok(report)
}

/// One forward pass over all anchors of a plan; head s serves step s.
fn one_shot_plan(
    graph: &EventGraph,
    plan: &RolloutPlan,
    net: &Network,
    cfg: &RolloutConfig,
    grads: Option<&mut Network>,
) -> Result<DayLoss> {
    let stage = net.spec.stage;
    let k = plan.steps.len();
    if net.spec.outputs != k {
        return Err(Error::Config(format!(
            "one-shot model has {} heads but rollouts have {k} steps",
            net.spec.outputs
        )));
    }
    let mut report = DayLoss::new(k);
    let anchors: Vec<(usize, usize)> = plan.anchors().collect();
    if anchors.is_empty() {
        return Ok(report);
    }
    let state = RolloutState::new(graph, plan.origin);
    let nodes: Vec<usize> = anchors.iter().map(|&(_, v)| v).collect();
    let view = extract_consistent_subgraph(graph, &nodes, &state, cfg.depth(&net.spec.body))?;
    let inp = GraphInput::from_view(&view)?;
    let fwd = net.forward(&inp)?;
    let mut d_out = Array2::zeros(fwd.output.raw_dim());
    for s in 0..k {
        let rows: Vec<usize> = (0..anchors.len()).filter(|&r| anchors[r].0 == s).collect();
        if rows.is_empty() {
            continue;
        }
        let out: Vec<f64> = rows.iter().map(|&r| fwd.output[[r, s]]).collect();
        let truth: Vec<f64> = rows
            .iter()
            .map(|&r| graph.nodes[anchors[r].1].target_delay)
            .collect();
        let (loss, d) = stage_loss(stage, &out, &truth, cfg.positive_weight);
        check(loss, "one-shot", s)?;
        report.steps[s] = step_stats(&truth, loss);
        for (&r, g) in rows.iter().zip(d) {
            d_out[[r, s]] = g;
        }
    }
    if let Some(g) = grads {
        net.backward(&inp, &fwd, &d_out, g);
    }
    Ok(report)
}

/// Deterministic seed for one (epoch, day, rollout, model) combination.
pub fn rollout_seed(seed: u64, epoch: usize, day: NaiveDate, plan: usize, model: &str) -> u64 {
    let mut h = seed ^ 0x243F_6A88_85A3_08D3;
    let mut mix = |x: u64| {
        h ^= x;
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    };
    mix(epoch as u64);
    mix(day.num_days_from_ce() as u64);
    mix(plan as u64);
    for b in model.bytes() {
        mix(b as u64);
    }
    h
}

/// Loss and (optionally) summed gradient of one model over one day.
pub fn day_pass(
    graph: &EventGraph,
    net: &Network,
    cfg: &RolloutConfig,
    p: f64,
    epoch: usize,
    model: &str,
    want_grads: bool,
    jobs: usize,
) -> Result<(DayLoss, Option<Network>)> {
    let plans = plan_rollouts(graph, cfg.k, cfg.slice_minutes);
    let indexed: Vec<(usize, &RolloutPlan)> = plans.iter().enumerate().collect();
    let results = par_map(
        jobs,
        &indexed,
        |&(i, plan)| -> Result<(DayLoss, Option<Network>)> {
            let mut g = want_grads.then(|| net.zeros_like());
            let loss = match net.spec.architecture {
                Architecture::Gatv2 => {
                    let seed = rollout_seed(cfg.seed, epoch, graph.service_day, i, model);
                    autoregressive_plan(graph, plan, net, cfg, p, seed, g.as_mut())?
                }
                Architecture::Gcn => one_shot_plan(graph, plan, net, cfg, g.as_mut())?,
            };
            Ok((loss, g))
        },
    );
    let mut total = DayLoss::new(cfg.k);
    let mut grads = want_grads.then(|| net.zeros_like());
    for r in results {
        let (loss, g) = r?;
        total.merge(&loss);
        if let (Some(acc), Some(g)) = (grads.as_mut(), g) {
            for (a, b) in acc.tensors_mut().into_iter().zip(g.tensors()) {
                for (x, y) in a.iter_mut().zip(b.data) {
                    *x += y;
                }
            }
        }
    }
    Ok((total, grads))
}

/// Classifier simulation of one day: BCE per step, state from ground truth
/// where the classifier predicts a delay (or everywhere on teacher steps).
pub fn classifier_rollout(
    graph: &EventGraph,
    net: &Network,
    cfg: &RolloutConfig,
    p: f64,
    epoch: usize,
) -> Result<(DayLoss, Network)> {
    expect_stage(net, Stage::Classifier)?;
    let (loss, g) = day_pass(graph, net, cfg, p, epoch, "gatv2_classifier", true, 1)?;
    Ok((loss, g.expect("gradients requested")))
}

/// Regressor simulation of one day: masked log-space MSE per step, state from
/// predicted or true delays per sampling coin.
pub fn regressor_rollout(
    graph: &EventGraph,
    net: &Network,
    cfg: &RolloutConfig,
    p: f64,
    epoch: usize,
) -> Result<(DayLoss, Network)> {
    expect_stage(net, Stage::Regressor)?;
    let (loss, g) = day_pass(graph, net, cfg, p, epoch, "gatv2_regressor", true, 1)?;
    Ok((loss, g.expect("gradients requested")))
}

fn expect_stage(net: &Network, stage: Stage) -> Result<()> {
    if net.spec.stage == stage && net.spec.architecture == Architecture::Gatv2 {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "expected a GATv2 {stage:?}, got {:?}",
            net.spec.stage
        )))
    }
}

/// Fit scalers and vocabularies on training days only. Edge durations are
/// the realized ones where available, scheduled otherwise.
pub fn fit_preprocessor(train: &[EventGraph]) -> Result<Preprocessor> {
    let durations: Vec<f64> = train
        .iter()
        .flat_map(|g| {
            g.edges
                .iter()
                .map(|e| e.duration_actual.unwrap_or(e.duration_scheduled))
        })
        .collect();
    Preprocessor::fit(
        train
            .iter()
            .flat_map(|g| g.nodes.iter().map(|n| &n.features)),
        &durations,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub train_fraction: f64,
    pub validation_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train_fraction: 0.4,
            validation_fraction: 0.1,
        }
    }
}

/// Contiguous-by-date split; the remainder is held out for testing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DaySplit {
    pub train: Vec<NaiveDate>,
    pub validation: Vec<NaiveDate>,
    pub held_out: Vec<NaiveDate>,
}

pub fn split_days(days: &[NaiveDate], cfg: &SplitConfig) -> Result<DaySplit> {
    let mut days = days.to_vec();
    days.sort();
    days.dedup();
    let n = days.len();
    let n_train = (n as f64 * cfg.train_fraction).round() as usize;
    let n_val = (n as f64 * cfg.validation_fraction).round() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val > n {
        return Err(Error::Config(format!(
            "cannot split {n} days into {n_train} training and {n_val} validation days"
        )));
    }
    Ok(DaySplit {
        train: days[..n_train].to_vec(),
        validation: days[n_train..n_train + n_val].to_vec(),
        held_out: days[n_train + n_val..].to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub rollout: RolloutConfig,
    pub body: GatBodyConfig,
    /// Also train the one-shot GCN baseline.
    pub gcn: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rollout: RolloutConfig::default(),
            body: GatBodyConfig::default(),
            gcn: true,
        }
    }
}

pub const GAT_CLASSIFIER: &str = "gatv2_classifier";
pub const GAT_REGRESSOR: &str = "gatv2_regressor";
pub const GCN_CLASSIFIER: &str = "gcn_classifier";
pub const GCN_REGRESSOR: &str = "gcn_regressor";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossRow {
    /// `None` for the validation pass before any training.
    pub epoch: Option<usize>,
    pub split: Split,
    pub model: &'static str,
    pub sampling_prob: f64,
    pub loss: DayLoss,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossReport {
    pub rows: Vec<LossRow>,
}

impl LossReport {
    /// Mean validation loss of `model` at `epoch` (`None` = before training).
    pub fn validation(&self, model: &str, epoch: Option<usize>) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.model == model && r.epoch == epoch && r.split == Split::Validation)
            .map(|r| r.loss.mean())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "epoch,split,model,step,sampling_prob,mean_loss,batches,targets,delayed,on_time\n",
        );
        for r in &self.rows {
            let epoch = r.epoch.map_or("init".to_string(), |e| e.to_string());
            let split = match r.split {
                Split::Train => "train",
                Split::Validation => "validation",
            };
            for (s, st) in r.loss.steps.iter().enumerate() {
                writeln!(
                    out,
                    "{epoch},{split},{},{s},{},{},{},{},{},{}",
                    r.model,
                    r.sampling_prob,
                    st.mean_loss(),
                    st.batches,
                    st.targets,
                    st.delayed,
                    st.on_time
                )
                .expect("string write");
            }
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub name: &'static str,
    /// Parameters of the best validation epoch (initialization if none improved).
    pub best: Network,
    pub best_epoch: Option<usize>,
    pub best_validation: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub models: Vec<TrainedModel>,
    pub report: LossReport,
}

impl TrainOutcome {
    pub fn model(&self, name: &str) -> Option<&Network> {
        self.models.iter().find(|m| m.name == name).map(|m| &m.best)
    }
}

struct Trainee {
    name: &'static str,
    net: Network,
    adam: Adam,
    best: Network,
    best_epoch: Option<usize>,
    best_validation: f64,
}

fn validate(
    days: &[EventGraph],
    net: &Network,
    cfg: &RolloutConfig,
    name: &str,
    jobs: usize,
) -> Result<DayLoss> {
    let mut total = DayLoss::new(cfg.k);
    for g in days {
        total.merge(&day_pass(g, net, cfg, 0.0, usize::MAX, name, false, jobs)?.0);
    }
    Ok(total)
}

/// Train both hurdle stages (and optionally the GCN baseline) on encoded day
/// graphs, keeping each model's best-validation parameters.
pub fn train(
    train_days: &[EventGraph],
    validation_days: &[EventGraph],
    categorical_sizes: [usize; CATEGORICAL_COUNT],
    cfg: &TrainConfig,
    jobs: usize,
) -> Result<TrainOutcome> {
    cfg.rollout.validate()?;
    cfg.body.validate()?;
    if train_days.is_empty() || validation_days.is_empty() {
        return Err(Error::Config(
            "training and validation splits must be non-empty".into(),
        ));
    }
    let rc = &cfg.rollout;
    let spec = |architecture, stage, outputs| ModelSpec {
        architecture,
        stage,
        body: cfg.body.clone(),
        outputs,
        categorical_sizes,
    };
    let mut kinds = vec![
        (
            GAT_CLASSIFIER,
            spec(Architecture::Gatv2, Stage::Classifier, 1),
            1,
        ),
        (
            GAT_REGRESSOR,
            spec(Architecture::Gatv2, Stage::Regressor, 1),
            2,
        ),
    ];
    if cfg.gcn {
        kinds.push((
            GCN_CLASSIFIER,
            spec(Architecture::Gcn, Stage::Classifier, rc.k),
            3,
        ));
        kinds.push((
            GCN_REGRESSOR,
            spec(Architecture::Gcn, Stage::Regressor, rc.k),
            4,
        ));
    }

    let mut report = LossReport::default();
    let mut trainees = Vec::new();
    for (name, spec, salt) in kinds {
        let net = Network::new(spec, rc.seed.wrapping_mul(31).wrapping_add(salt))?;
        let val = validate(validation_days, &net, rc, name, jobs)?;
        log::info!("{name}: initial validation loss {:.5}", val.mean());
        report.rows.push(LossRow {
            epoch: None,
            split: Split::Validation,
            model: name,
            sampling_prob: 0.0,
            loss: val.clone(),
        });
        trainees.push(Trainee {
            name,
            best: net.clone(),
            net,
            adam: Adam::new(rc.learning_rate),
            best_epoch: None,
            best_validation: val.mean(),
        });
    }

    for epoch in 0..rc.epochs {
        let p = scheduled_sampling_prob(epoch, rc);
        let mut order: Vec<usize> = (0..train_days.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(rollout_seed(
            rc.seed,
            epoch,
            NaiveDate::MIN,
            0,
            "order",
        )));
        let mut epoch_loss: Vec<DayLoss> = vec![DayLoss::new(rc.k); trainees.len()];
        for &d in &order {
            let graph = &train_days[d];
            for (t, acc) in trainees.iter_mut().zip(&mut epoch_loss) {
                let (loss, grads) = day_pass(graph, &t.net, rc, p, epoch, t.name, true, jobs)?;
                if !loss.total().is_finite() {
                    return Err(Error::Numeric {
                        layer: 0,
                        message: format!(
                            "{}: divergent loss on {} in epoch {epoch}",
                            t.name, graph.service_day
                        ),
                    });
                }
                t.adam
                    .step(&mut t.net, &grads.expect("gradients requested"));
                if !t.net.is_finite() {
                    return Err(Error::Numeric {
                        layer: 0,
                        message: format!(
                            "{}: non-finite parameters after {} in epoch {epoch}",
                            t.name, graph.service_day
                        ),
                    });
                }
                acc.merge(&loss);
            }
        }
        for (t, train_loss) in trainees.iter_mut().zip(epoch_loss) {
            let val = validate(validation_days, &t.net, rc, t.name, jobs)?;
            log::info!(
                "epoch {epoch} p={p:.3} {}: train {:.5} validation {:.5}",
                t.name,
                train_loss.mean(),
                val.mean()
            );
            if val.mean() < t.best_validation {
                t.best_validation = val.mean();
                t.best = t.net.clone();
                t.best_epoch = Some(epoch);
            }
            report.rows.push(LossRow {
                epoch: Some(epoch),
                split: Split::Train,
                model: t.name,
                sampling_prob: p,
                loss: train_loss,
            });
            report.rows.push(LossRow {
                epoch: Some(epoch),
                split: Split::Validation,
                model: t.name,
                sampling_prob: 0.0,
                loss: val,
            });
        }
    }

    Ok(TrainOutcome {
        models: trainees
            .into_iter()
            .map(|t| TrainedModel {
                name: t.name,
                best: t.best,
                best_epoch: t.best_epoch,
                best_validation: t.best_validation,
            })
            .collect(),
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureConfig;
    use crate::ingest::{clean, generate_synthetic, group_by_day, CleaningConfig, SyntheticConfig};

    fn graphs(days: usize, rate: f64) -> Vec<EventGraph> {
        let cfg = SyntheticConfig {
            station_count: 10,
            trips_per_day: 16,
            day_count: days,
            primary_delay_rate: rate,
            ..Default::default()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        let fc = FeatureConfig {
            holidays: ds.holidays.iter().copied().collect(),
            ..Default::default()
        };
        let (trips, _) = clean(ds.records, &CleaningConfig::default());
        let mut gs: Vec<EventGraph> = group_by_day(trips)
            .values()
            .map(|t| EventGraph::build(t, &fc).unwrap())
            .collect();
        let pre = fit_preprocessor(&gs).unwrap();
        for g in &mut gs {
            g.encode(&pre);
        }
        gs
    }

    fn small_body() -> GatBodyConfig {
        GatBodyConfig {
            layers: 2,
            hidden_channels: 6,
            attention_heads: 2,
            embedding_dims: [2; CATEGORICAL_COUNT],
            ..Default::default()
        }
    }

    fn net(stage: Stage, arch: Architecture, outputs: usize) -> Network {
        Network::new(
            ModelSpec {
                architecture: arch,
                stage,
                body: small_body(),
                outputs,
                categorical_sizes: [7, 13, 3, 11, 3],
            },
            5,
        )
        .unwrap()
    }

    #[test]
    fn linear_schedule_values() {
        let cfg = RolloutConfig {
            epochs: 11,
            ..Default::default()
        };
        assert_eq!(scheduled_sampling_prob(0, &cfg), 1.0);
        assert_eq!(scheduled_sampling_prob(10, &cfg), 0.0);
        assert!((scheduled_sampling_prob(5, &cfg) - 0.5).abs() < 1e-15);
        let probs: Vec<f64> = (0..11).map(|e| scheduled_sampling_prob(e, &cfg)).collect();
        assert!(probs.windows(2).all(|w| w[0] >= w[1]));
    }

    /// With p = 1 every rollout step sees pure ground truth for earlier
    /// steps, so its losses must equal a direct per-step supervised loop.
    #[test]
    fn teacher_forcing_equals_per_step_supervision() {
        let g = &graphs(1, 0.2)[0];
        let cfg = RolloutConfig {
            k: 4,
            slice_minutes: 15,
            ..Default::default()
        };
        for stage in [Stage::Classifier, Stage::Regressor] {
            let n = net(stage, Architecture::Gatv2, 1);
            let (rollout, _) = day_pass(g, &n, &cfg, 1.0, 0, "x", false, 1).unwrap();

            let mut oracle = DayLoss::new(cfg.k);
            for plan in plan_rollouts(g, cfg.k, cfg.slice_minutes) {
                for (s, anchors) in plan.steps.iter().enumerate() {
                    if anchors.is_empty() {
                        continue;
                    }
                    let mut state = RolloutState::new(g, plan.origin);
                    let earlier: Vec<(usize, f64)> = plan.steps[..s]
                        .iter()
                        .flatten()
                        .map(|&v| (v, g.nodes[v].target_delay))
                        .collect();
                    state.update(g, &earlier).unwrap();
                    let view = extract_consistent_subgraph(g, anchors, &state, 2).unwrap();
                    let out = n
                        .forward(&GraphInput::from_view(&view).unwrap())
                        .unwrap()
                        .output;
                    let truth: Vec<f64> =
                        anchors.iter().map(|&a| g.nodes[a].target_delay).collect();
                    let (loss, _) = stage_loss(stage, &out.column(0).to_vec(), &truth, 1.0);
                    oracle.steps[s].add(&step_stats(&truth, loss));
                }
            }
            for (a, b) in rollout.steps.iter().zip(&oracle.steps) {
                assert!((a.loss_sum - b.loss_sum).abs() < 1e-10);
                assert_eq!(
                    (a.batches, a.delayed, a.on_time),
                    (b.batches, b.delayed, b.on_time)
                );
            }
        }
    }

    #[test]
    fn masked_mse_denominator_and_delay_free_day() {
        let g = &graphs(1, 0.0)[0];
        assert!(g.nodes.iter().all(|n| n.target_delay == 0.0));
        let cfg = RolloutConfig {
            k: 3,
            ..Default::default()
        };
        let mut n = net(Stage::Regressor, Architecture::Gatv2, 1);
        let before = n.clone();
        let (loss, grads) = regressor_rollout(g, &n, &cfg, 0.3, 0).unwrap();
        assert_eq!(loss.total(), 0.0);
        let mut adam = Adam::new(1e-3);
        adam.step(&mut n, &grads);
        assert_eq!(n, before);
    }

    #[test]
    fn rollouts_are_deterministic_and_parallel_invariant() {
        let g = &graphs(1, 0.2)[0];
        let cfg = RolloutConfig {
            k: 3,
            ..Default::default()
        };
        let n = net(Stage::Classifier, Architecture::Gatv2, 1);
        let (a, ga) = day_pass(g, &n, &cfg, 0.5, 2, "m", true, 1).unwrap();
        let (b, gb) = day_pass(g, &n, &cfg, 0.5, 2, "m", true, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(ga, gb);
    }

    #[test]
    fn one_shot_uses_one_forward_per_plan() {
        let g = &graphs(1, 0.2)[0];
        let cfg = RolloutConfig {
            k: 3,
            ..Default::default()
        };
        let n = net(Stage::Classifier, Architecture::Gcn, 3);
        let plans = plan_rollouts(g, 3, cfg.slice_minutes);
        let with_anchors = plans
            .iter()
            .filter(|p| p.anchors().next().is_some())
            .count();
        day_pass(g, &n, &cfg, 0.0, 0, "gcn", false, 1).unwrap();
        assert_eq!(n.forward_calls(), with_anchors);
    }

    #[test]
    fn zero_epochs_keep_initialization_and_training_is_seeded() {
        let gs = graphs(3, 0.2);
        let cfg = TrainConfig {
            rollout: RolloutConfig {
                k: 3,
                epochs: 0,
                ..Default::default()
            },
            body: small_body(),
            gcn: true,
        };
        let sizes = [7, 13, 3, 11, 3];
        let out = train(&gs[..2], &gs[2..], sizes, &cfg, 1).unwrap();
        for m in &out.models {
            assert_eq!(m.best_epoch, None);
        }
        let init = Network::new(
            out.models[0].best.spec.clone(),
            7u64.wrapping_mul(31).wrapping_add(1),
        )
        .unwrap();
        assert_eq!(out.models[0].best, init);

        let cfg = TrainConfig {
            rollout: RolloutConfig {
                epochs: 2,
                ..cfg.rollout
            },
            ..cfg
        };
        let a = train(&gs[..2], &gs[2..], sizes, &cfg, 1).unwrap();
        let b = train(&gs[..2], &gs[2..], sizes, &cfg, 1).unwrap();
        assert_eq!(a.report.to_csv(), b.report.to_csv());
        for (x, y) in a.models.iter().zip(&b.models) {
            assert_eq!(x.best, y.best);
        }
        assert!(a
            .report
            .to_csv()
            .lines()
            .any(|l| l.starts_with("init,validation,gatv2_classifier,0,")));
    }

    #[test]
    fn split_is_contiguous_and_disjoint() {
        let days: Vec<NaiveDate> = (0..60)
            .map(|d| NaiveDate::from_ymd_opt(2022, 1, 3).unwrap() + chrono::Duration::days(d))
            .collect();
        let s = split_days(&days, &SplitConfig::default()).unwrap();
        assert_eq!(
            (s.train.len(), s.validation.len(), s.held_out.len()),
            (24, 6, 30)
        );
        assert!(s.train.last() < s.validation.first());
        assert!(s.validation.last() < s.held_out.first());
    }
}

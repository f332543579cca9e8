//! Synchronous generational population-based training.
//!
//! Every generation trains each member for a fixed number of epochs, scores
//! it on the holdout split, keeps the top fraction as elites, respawns the
//! whole population from them and perturbs the copied hyper-parameters.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Checkpoint, NetworkConfig};
use crate::seed;
use crate::trainer::{self, Hooks, PreparedData, TrainConfig, TrainState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub dropout_rate: f64,
    pub consistency_weight: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperRanges {
    pub dropout_rate: [f64; 2],
    /// Sampled log-uniformly.
    pub consistency_weight: [f64; 2],
    /// Sampled log-uniformly.
    pub learning_rate: [f64; 2],
}

impl Default for HyperRanges {
    fn default() -> Self {
        Self {
            dropout_rate: [0.0, 0.5],
            consistency_weight: [0.1, 10.0],
            learning_rate: [1e-4, 1e-2],
        }
    }
}

impl HyperRanges {
    pub fn validate(&self) -> Result<()> {
        let ok = |[lo, hi]: [f64; 2], positive: bool| lo <= hi && lo.is_finite() && hi.is_finite() && (!positive || lo > 0.0);
        if !ok(self.dropout_rate, false) || self.dropout_rate[0] < 0.0 || self.dropout_rate[1] >= 1.0 {
            return Err(Error::Config("dropout range must lie in [0, 1)".into()));
        }
        if !ok(self.consistency_weight, true) || !ok(self.learning_rate, true) {
            return Err(Error::Config("log-scale ranges must be positive and ordered".into()));
        }
        Ok(())
    }

    pub fn clamp(&self, h: HyperParams) -> HyperParams {
        HyperParams {
            dropout_rate: h.dropout_rate.clamp(self.dropout_rate[0], self.dropout_rate[1]),
            consistency_weight: h.consistency_weight.clamp(self.consistency_weight[0], self.consistency_weight[1]),
            learning_rate: h.learning_rate.clamp(self.learning_rate[0], self.learning_rate[1]),
        }
    }

    pub fn contains(&self, h: &HyperParams) -> bool {
        let inside = |v: f64, [lo, hi]: [f64; 2]| (lo..=hi).contains(&v);
        inside(h.dropout_rate, self.dropout_rate)
            && inside(h.consistency_weight, self.consistency_weight)
            && inside(h.learning_rate, self.learning_rate)
    }

    pub fn sample(&self, rng: &mut impl Rng) -> HyperParams {
        let log_uniform = |rng: &mut dyn rand::RngCore, [lo, hi]: [f64; 2]| {
            if lo == hi {
                lo
            } else {
                rng.gen_range(lo.ln()..hi.ln()).exp()
            }
        };
        let lr = log_uniform(rng, self.learning_rate);
        let cw = log_uniform(rng, self.consistency_weight);
        let [dlo, dhi] = self.dropout_rate;
        let d = if dlo == dhi { dlo } else { rng.gen_range(dlo..dhi) };
        self.clamp(HyperParams {
            dropout_rate: d,
            consistency_weight: cw,
            learning_rate: lr,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbConfig {
    /// Multipliers for learning rate and consistency weight.
    pub scale_factors: Vec<f64>,
    /// Additive shifts for the dropout rate.
    pub dropout_shifts: Vec<f64>,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            scale_factors: vec![0.8, 1.25],
            dropout_shifts: vec![-0.05, 0.05],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PbtConfig {
    pub population: usize,
    pub generations: usize,
    pub elite_fraction: f64,
    pub epochs_per_generation: usize,
    pub worker_limit: usize,
    pub seed: u64,
    pub ranges: HyperRanges,
    pub perturb: PerturbConfig,
    /// Hand each elite one unperturbed continuation.
    pub keep_elites_unperturbed: bool,
    /// Directory for `gen<k>_member<id>.ckpt` files; nothing is written when unset.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for PbtConfig {
    fn default() -> Self {
        Self {
            population: 50,
            generations: 10,
            elite_fraction: 0.10,
            epochs_per_generation: 2,
            worker_limit: 1,
            seed: 0,
            ranges: HyperRanges::default(),
            perturb: PerturbConfig::default(),
            keep_elites_unperturbed: false,
            checkpoint_dir: None,
        }
    }
}

impl PbtConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population < 2 {
            return Err(Error::Config("population needs at least 2 members".into()));
        }
        if !(self.elite_fraction > 0.0 && self.elite_fraction <= 1.0) {
            return Err(Error::Config("elite_fraction must lie in (0, 1]".into()));
        }
        if self.worker_limit == 0 {
            return Err(Error::Config("worker_limit must be at least 1".into()));
        }
        if self.perturb.scale_factors.is_empty() || self.perturb.dropout_shifts.is_empty() {
            return Err(Error::Config("perturbation choices must be non-empty".into()));
        }
        self.ranges.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PopulationMember {
    pub member_id: usize,
    pub generation: usize,
    pub hyper: HyperParams,
    /// Serialized checkpoint; `None` for backends without weights.
    pub checkpoint: Option<Vec<u8>>,
    pub holdout_score: Option<f64>,
    pub parent_id: Option<usize>,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEvent {
    pub generation: usize,
    pub member_id: usize,
    pub parent_id: Option<usize>,
    pub hyper_before: HyperParams,
    pub hyper_after: HyperParams,
    /// Seed given to `explore`; absent when the member was not perturbed.
    pub explore_seed: Option<u64>,
    pub holdout_score: f64,
    pub diverged: bool,
}

/// What a population member does when trained or scored.
pub trait MemberBackend: Sync {
    /// Fresh weights for a new member.
    fn init(&self, init_seed: u64) -> Result<Option<Vec<u8>>>;

    /// Train `epochs` epochs from `checkpoint` with `hyper`; returns the new
    /// checkpoint and its holdout score. A divergence error marks the member.
    fn train(
        &self,
        checkpoint: Option<&[u8]>,
        hyper: &HyperParams,
        epochs: usize,
        run_seed: u64,
    ) -> Result<(Option<Vec<u8>>, f64)>;

    /// Holdout score of `checkpoint` without training.
    fn score(&self, checkpoint: Option<&[u8]>, hyper: &HyperParams) -> Result<f64>;
}

/// Analytic stand-in for training: the score is a smooth function of the
/// learning rate and dropout with its maximum 1 at (1e-3, 0.2), and 0 at
/// the far corners of the default ranges.
#[derive(Debug, Clone, Copy, Default)]
pub struct SurrogateBackend;

pub fn surrogate_objective(h: &HyperParams) -> f64 {
    let lr = (h.learning_rate.ln() - 1e-3f64.ln()) / 10f64.ln();
    let d = (h.dropout_rate - 0.2) / 0.3;
    1.0 - 0.5 * lr * lr - 0.5 * d * d
}

impl MemberBackend for SurrogateBackend {
    fn init(&self, _: u64) -> Result<Option<Vec<u8>>> {
        Ok(None)
    }

    fn train(&self, _: Option<&[u8]>, hyper: &HyperParams, _: usize, _: u64) -> Result<(Option<Vec<u8>>, f64)> {
        Ok((None, surrogate_objective(hyper)))
    }

    fn score(&self, _: Option<&[u8]>, hyper: &HyperParams) -> Result<f64> {
        Ok(surrogate_objective(hyper))
    }
}

/// Real training through [`trainer::train_loop`], scored on the holdout split.
pub struct TrainerBackend<'a> {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub data: &'a PreparedData,
}

impl TrainerBackend<'_> {
    fn holdout(&self, state: &TrainState<f32>) -> Result<f64> {
        Ok(trainer::evaluate(state.model(self.train.mode), &self.network, &self.data.holdout)?.0)
    }
}

impl MemberBackend for TrainerBackend<'_> {
    fn init(&self, init_seed: u64) -> Result<Option<Vec<u8>>> {
        let state = TrainState::<f32>::new(&self.network, init_seed, self.train.learning_rate)?;
        Ok(Some(state.to_checkpoint(&self.network, self.train.mode, init_seed).to_bytes()))
    }

    fn train(
        &self,
        checkpoint: Option<&[u8]>,
        hyper: &HyperParams,
        epochs: usize,
        run_seed: u64,
    ) -> Result<(Option<Vec<u8>>, f64)> {
        let bytes = checkpoint.ok_or_else(|| Error::Config("member has no checkpoint".into()))?;
        let state = TrainState::from_checkpoint(&Checkpoint::from_bytes(bytes)?);
        let cfg = TrainConfig {
            epochs,
            learning_rate: hyper.learning_rate,
            consistency_weight: hyper.consistency_weight,
            dropout_rate: hyper.dropout_rate,
            seed: run_seed,
            ..self.train.clone()
        };
        let mut net = self.network.clone();
        net.dropout_rate = hyper.dropout_rate;
        let out = trainer::train_loop(&net, &cfg, self.data, state, Hooks::default())?;
        let score = self.holdout(&out.state)?;
        Ok((Some(out.state.to_checkpoint(&net, cfg.mode, run_seed).to_bytes()), score))
    }

    fn score(&self, checkpoint: Option<&[u8]>, _: &HyperParams) -> Result<f64> {
        let bytes = checkpoint.ok_or_else(|| Error::Config("member has no checkpoint".into()))?;
        self.holdout(&TrainState::from_checkpoint(&Checkpoint::from_bytes(bytes)?))
    }
}

pub fn init_population(cfg: &PbtConfig, backend: &dyn MemberBackend) -> Result<Vec<PopulationMember>> {
    cfg.validate()?;
    let mut rng = seed::rng(seed::derive(cfg.seed, &[0x1417]));
    (0..cfg.population)
        .map(|id| {
            let hyper = cfg.ranges.sample(&mut rng);
            Ok(PopulationMember {
                member_id: id,
                generation: 0,
                hyper,
                checkpoint: backend.init(seed::derive(cfg.seed, &[0x1417, id as u64]))?,
                holdout_score: None,
                parent_id: None,
                diverged: false,
            })
        })
        .collect()
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))
}

/// Train every member for `cfg.epochs_per_generation` epochs and record
/// its holdout score. Diverged members score 0.0, keep their previous
/// checkpoint and get the `diverged` flag.
pub fn run_generation(population: &mut [PopulationMember], cfg: &PbtConfig, backend: &dyn MemberBackend) -> Result<()> {
    let results: Vec<Result<(Option<Vec<u8>>, f64)>> = pool(cfg.worker_limit)?.install(|| {
        population
            .par_iter()
            .map(|m| {
                let run_seed = seed::derive(cfg.seed, &[0x9e1, m.generation as u64, m.member_id as u64]);
                backend.train(m.checkpoint.as_deref(), &m.hyper, cfg.epochs_per_generation, run_seed)
            })
            .collect()
    });
    for (m, r) in population.iter_mut().zip(results) {
        match r {
            Ok((ck, score)) => {
                m.checkpoint = ck;
                m.holdout_score = Some(if score.is_finite() { score } else { 0.0 });
                m.diverged = !score.is_finite();
            }
            Err(Error::Diverged { .. }) | Err(Error::NonFinite(_)) => {
                m.holdout_score = Some(0.0);
                m.diverged = true;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(())
}

pub fn elite_count(n: usize, fraction: f64) -> usize {
    // The epsilon keeps 0.1·50 from rounding up to 6.
    (((fraction * n as f64) - 1e-9).ceil() as usize).clamp(1, n)
}

/// Indices of the top `elite_count` members by score, ties to the lower
/// member id.
pub fn elite_indices(population: &[PopulationMember], fraction: f64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..population.len()).collect();
    idx.sort_by(|&a, &b| {
        let sa = population[a].holdout_score.unwrap_or(f64::NEG_INFINITY);
        let sb = population[b].holdout_score.unwrap_or(f64::NEG_INFINITY);
        sb.total_cmp(&sa).then(population[a].member_id.cmp(&population[b].member_id))
    });
    idx.truncate(elite_count(population.len(), fraction));
    idx
}

/// Respawn a population of the same size from the elites. Each child's
/// checkpoint, hyper-parameters and score are copies of its parent's.
/// With `keep_elites`, child `i < k` is elite `i`; other parents are drawn
/// uniformly.
pub fn exploit(
    population: &[PopulationMember],
    elite_fraction: f64,
    keep_elites: bool,
    rng_seed: u64,
) -> Vec<(PopulationMember, usize)> {
    let elites = elite_indices(population, elite_fraction);
    let mut rng = seed::rng(rng_seed);
    let generation = population.iter().map(|m| m.generation).max().unwrap_or(0) + 1;
    (0..population.len())
        .map(|i| {
            let p = if keep_elites && i < elites.len() {
                elites[i]
            } else {
                *elites.choose(&mut rng).unwrap()
            };
            let parent = &population[p];
            let child = PopulationMember {
                member_id: i,
                generation,
                hyper: parent.hyper,
                checkpoint: parent.checkpoint.clone(),
                holdout_score: parent.holdout_score,
                parent_id: Some(parent.member_id),
                diverged: false,
            };
            (child, parent.member_id)
        })
        .collect()
}

/// Multiply learning rate and consistency weight by independently drawn
/// factors, shift the dropout rate, and clamp into range.
pub fn explore(hyper: &HyperParams, ranges: &HyperRanges, perturb: &PerturbConfig, rng_seed: u64) -> HyperParams {
    let mut rng = seed::rng(rng_seed);
    let lr_f = *perturb.scale_factors.choose(&mut rng).unwrap();
    let cw_f = *perturb.scale_factors.choose(&mut rng).unwrap();
    let d_s = *perturb.dropout_shifts.choose(&mut rng).unwrap();
    ranges.clamp(HyperParams {
        dropout_rate: hyper.dropout_rate + d_s,
        consistency_weight: hyper.consistency_weight * cw_f,
        learning_rate: hyper.learning_rate * lr_f,
    })
}

#[derive(Debug, Clone)]
pub struct PbtOutcome {
    /// Highest-scoring member ever seen, with its checkpoint.
    pub best: PopulationMember,
    /// Best-ever score after each generation.
    pub best_history: Vec<f64>,
    pub trajectory: Vec<TrajectoryEvent>,
    pub final_population: Vec<PopulationMember>,
}

fn store_checkpoints(dir: &Path, population: &[PopulationMember]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for m in population {
        if let Some(bytes) = &m.checkpoint {
            let p = dir.join(format!("gen{}_member{}.ckpt", m.generation, m.member_id));
            fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        }
    }
    Ok(())
}

pub fn run_pbt(cfg: &PbtConfig, backend: &dyn MemberBackend) -> Result<PbtOutcome> {
    cfg.validate()?;
    let mut population = init_population(cfg, backend)?;
    let mut trajectory = Vec::with_capacity(cfg.population * cfg.generations.max(1));
    let mut best: Option<PopulationMember> = None;
    let mut best_history = Vec::new();
    let consider = |pop: &[PopulationMember], best: &mut Option<PopulationMember>| {
        for m in pop {
            let s = m.holdout_score.unwrap_or(f64::NEG_INFINITY);
            if best.as_ref().is_none_or(|b| s > b.holdout_score.unwrap_or(f64::NEG_INFINITY)) {
                *best = Some(m.clone());
            }
        }
    };

    if cfg.generations == 0 {
        let scores: Vec<Result<f64>> = pool(cfg.worker_limit)?.install(|| {
            population
                .par_iter()
                .map(|m| backend.score(m.checkpoint.as_deref(), &m.hyper))
                .collect()
        });
        for (m, s) in population.iter_mut().zip(scores) {
            m.holdout_score = Some(s?);
            trajectory.push(TrajectoryEvent {
                generation: 0,
                member_id: m.member_id,
                parent_id: None,
                hyper_before: m.hyper,
                hyper_after: m.hyper,
                explore_seed: None,
                holdout_score: m.holdout_score.unwrap(),
                diverged: false,
            });
        }
        consider(&population, &mut best);
        best_history.push(best.as_ref().unwrap().holdout_score.unwrap());
    }

    for g in 0..cfg.generations {
        let mut before: Vec<HyperParams> = population.iter().map(|m| m.hyper).collect();
        let mut explore_seeds: Vec<Option<u64>> = vec![None; population.len()];
        if g > 0 {
            let k = elite_count(population.len(), cfg.elite_fraction);
            let children = exploit(&population, cfg.elite_fraction, cfg.keep_elites_unperturbed, seed::derive(cfg.seed, &[0xe4, g as u64]));
            population = children.into_iter().map(|(c, _)| c).collect();
            before = population.iter().map(|m| m.hyper).collect();
            for (i, m) in population.iter_mut().enumerate() {
                if cfg.keep_elites_unperturbed && i < k {
                    continue;
                }
                let s = seed::derive(cfg.seed, &[0xe5, g as u64, i as u64]);
                m.hyper = explore(&m.hyper, &cfg.ranges, &cfg.perturb, s);
                explore_seeds[i] = Some(s);
            }
        }
        run_generation(&mut population, cfg, backend)?;
        for (i, m) in population.iter().enumerate() {
            trajectory.push(TrajectoryEvent {
                generation: g,
                member_id: m.member_id,
                parent_id: m.parent_id,
                hyper_before: before[i],
                hyper_after: m.hyper,
                explore_seed: explore_seeds[i],
                holdout_score: m.holdout_score.unwrap_or(0.0),
                diverged: m.diverged,
            });
        }
        if let Some(dir) = &cfg.checkpoint_dir {
            store_checkpoints(dir, &population)?;
        }
        consider(&population, &mut best);
        best_history.push(best.as_ref().unwrap().holdout_score.unwrap());
    }
    Ok(PbtOutcome {
        best: best.expect("population is non-empty"),
        best_history,
        trajectory,
        final_population: population,
    })
}

/// JSON Lines ordered by (generation, member id).
pub fn trajectory_jsonl(log: &[TrajectoryEvent]) -> Result<String> {
    if log.is_empty() {
        return Err(Error::Config("trajectory log is empty".into()));
    }
    let mut sorted: Vec<&TrajectoryEvent> = log.iter().collect();
    sorted.sort_by_key(|e| (e.generation, e.member_id));
    let mut s = String::new();
    for e in sorted {
        s.push_str(&serde_json::to_string(e)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn export_trajectory(log: &[TrajectoryEvent], path: &Path) -> Result<()> {
    let text = trajectory_jsonl(log)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_trajectory(path: &Path) -> Result<Vec<TrajectoryEvent>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// `member_id,score` for the final population.
pub fn final_scores_csv(population: &[PopulationMember]) -> String {
    let mut s = String::from("member_id,score\n");
    for m in population {
        writeln!(s, "{},{}", m.member_id, m.holdout_score.unwrap_or(0.0)).unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn member(id: usize, score: f64) -> PopulationMember {
        PopulationMember {
            member_id: id,
            generation: 0,
            hyper: HyperParams {
                dropout_rate: 0.1,
                consistency_weight: 1.0,
                learning_rate: 1e-3,
            },
            checkpoint: Some(vec![id as u8]),
            holdout_score: Some(score),
            parent_id: None,
            diverged: false,
        }
    }

    #[test]
    fn elite_counts() {
        assert_eq!(elite_count(50, 0.10), 5);
        assert_eq!(elite_count(20, 0.10), 2);
        assert_eq!(elite_count(3, 0.10), 1);
        assert_eq!(elite_count(10, 1.0), 10);
    }

    #[test]
    fn ties_go_to_lower_ids() {
        let pop: Vec<_> = (0..50).map(|i| member(i, 0.5)).collect();
        let mut e = elite_indices(&pop, 0.1);
        e.sort();
        assert_eq!(e, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn exploit_copies_parents() {
        let pop: Vec<_> = (0..10).map(|i| member(i, i as f64 / 10.0)).collect();
        for (child, parent) in exploit(&pop, 0.2, false, 4) {
            assert!(parent == 9 || parent == 8);
            assert_eq!(child.checkpoint, pop[parent].checkpoint);
            assert_eq!(child.holdout_score, pop[parent].holdout_score);
            assert_eq!(child.parent_id, Some(parent));
        }
        let kept = exploit(&pop, 0.2, true, 4);
        assert_eq!(kept[0].1, 9);
        assert_eq!(kept[1].1, 8);
    }

    #[test]
    fn explore_examples() {
        let r = HyperRanges::default();
        let only = |f: f64, d: f64| PerturbConfig {
            scale_factors: vec![f],
            dropout_shifts: vec![d],
        };
        let h = HyperParams {
            dropout_rate: 0.0,
            consistency_weight: 1.0,
            learning_rate: 1e-2,
        };
        let out = explore(&h, &r, &only(1.25, -0.05), 1);
        assert_eq!(out.learning_rate, 1e-2);
        assert_eq!(out.dropout_rate, 0.0);
        let out = explore(&HyperParams { learning_rate: 4e-3, ..h }, &r, &only(0.8, 0.05), 1);
        assert!((out.learning_rate - 3.2e-3).abs() < 1e-15);
        assert!((out.dropout_rate - 0.05).abs() < 1e-15);
    }

    #[test]
    fn surrogate_peak_and_corners() {
        let h = |lr: f64, d: f64| HyperParams {
            dropout_rate: d,
            consistency_weight: 1.0,
            learning_rate: lr,
        };
        assert!((surrogate_objective(&h(1e-3, 0.2)) - 1.0).abs() < 1e-15);
        assert!(surrogate_objective(&h(1e-2, 0.5)).abs() < 1e-12);
        assert!(surrogate_objective(&h(1e-4, 0.5)).abs() < 1e-12);
    }
}

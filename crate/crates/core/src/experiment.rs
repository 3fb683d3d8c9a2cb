//! Seeded simulation experiments comparing ranking strategies.
//!
//! A trial builds one environment, generates offline history from it, and
//! trains the rankers and the prior network on that history. Every requested
//! variant then runs online against its own copy of the environment. Variants
//! in a trial share the query and click random streams, so they are compared
//! on common random numbers.

use std::cell::Cell;
use std::fmt;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::online_learner::{Feedback, Granularity, LearnerConfig, PosteriorStore, SampleMode};
use crate::prior_net::{self, Architecture, PriorNetwork, TrainConfig, TrainingExample};
use crate::ranker::{
    select_top_k, train_ranker, LabeledExample, LogisticRanker, Ranker, RankerInput,
    RankerTrainConfig,
};
use crate::simulation::{
    Environment, NonStationaryConfig, OfflineDataset, StationaryEnvConfig, CONTEXT_DIM,
};
use crate::types::{ArmKey, ItemId};

/// Column header of every CTR series file.
pub const CSV_HEADER: [&str; 5] = ["trial", "timestep", "clicks", "exposures", "ctr_window"];

/// z-score of a two-sided 95% interval.
const Z95: f64 = 1.96;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MethodVariant {
    /// Ranks by contextual features alone.
    #[serde(rename = "non_behavioral")]
    NonBehavioral,
    /// Ranks by contextual features and the empirical click rate.
    #[serde(rename = "behavioral")]
    Behavioral,
    /// Thompson sampling with `gamma = 0`.
    #[serde(rename = "bayes_stationary")]
    BayesStationary,
    /// Thompson sampling with the configured `gamma`.
    #[serde(rename = "bayescns")]
    BayesCns,
}

impl MethodVariant {
    pub const ALL: [MethodVariant; 4] = [
        MethodVariant::NonBehavioral,
        MethodVariant::Behavioral,
        MethodVariant::BayesStationary,
        MethodVariant::BayesCns,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MethodVariant::NonBehavioral => "non_behavioral",
            MethodVariant::Behavioral => "behavioral",
            MethodVariant::BayesStationary => "bayes_stationary",
            MethodVariant::BayesCns => "bayescns",
        }
    }

    pub fn is_bayesian(self) -> bool {
        matches!(self, MethodVariant::BayesStationary | MethodVariant::BayesCns)
    }

    pub fn reads_interactions(self) -> bool {
        self != MethodVariant::NonBehavioral
    }
}

impl fmt::Display for MethodVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MethodVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NonStationarySection {
    pub r: f64,
    pub num_episodes: u32,
    pub steps_per_episode: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentSection {
    pub num_queries: u32,
    pub num_items: u32,
    pub match_min: usize,
    pub match_max: usize,
    #[serde(default = "default_k")]
    pub k_shown: usize,
    pub w: f64,
    #[serde(default)]
    pub non_stationary: Option<NonStationarySection>,
}

fn default_k() -> usize {
    10
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearnerSection {
    pub gamma: f64,
    pub sample_mode: SampleMode,
    pub decay_unshown: bool,
}

impl Default for LearnerSection {
    fn default() -> Self {
        Self {
            gamma: 0.05,
            sample_mode: SampleMode::Rate,
            decay_unshown: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub num_trials: usize,
    /// Required for stationary runs; episodes times steps otherwise.
    #[serde(default)]
    pub timesteps: Option<u64>,
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default = "default_variants")]
    pub variants: Vec<MethodVariant>,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

fn default_window() -> usize {
    500
}

fn default_variants() -> Vec<MethodVariant> {
    MethodVariant::ALL.to_vec()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorSection {
    pub hidden_width: usize,
    pub num_residual_blocks: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for PriorSection {
    fn default() -> Self {
        Self {
            hidden_width: 16,
            num_residual_blocks: 1,
            learning_rate: 1e-2,
            batch_size: 64,
            epochs: 40,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RankerSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Simulated click labels per offline query-item pair.
    pub labels_per_pair: usize,
}

impl Default for RankerSection {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            batch_size: 256,
            epochs: 20,
            labels_per_pair: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub environment: EnvironmentSection,
    #[serde(default)]
    pub learner: LearnerSection,
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub prior: PriorSection,
    #[serde(default)]
    pub ranker: RankerSection,
}

/// Environment description for one trial.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EnvSpec {
    Stationary(StationaryEnvConfig),
    NonStationary(NonStationaryConfig),
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<()> {
        match self.env_spec(0) {
            EnvSpec::Stationary(c) => c.validate()?,
            EnvSpec::NonStationary(c) => c.validate()?,
        }
        self.learner_config(MethodVariant::BayesCns).validate()?;
        let x = &self.experiment;
        if x.num_trials == 0 {
            return Err(Error::Config("num_trials must be at least 1".into()));
        }
        if x.window == 0 {
            return Err(Error::Config("window must be at least 1".into()));
        }
        if x.variants.is_empty() {
            return Err(Error::Config("no variants requested".into()));
        }
        match (self.environment.non_stationary, x.timesteps) {
            (None, None) => {
                return Err(Error::Config("stationary runs need experiment.timesteps".into()))
            }
            (None, Some(0)) => return Err(Error::Config("timesteps must be at least 1".into())),
            (Some(ns), Some(t)) if t != ns.num_episodes as u64 * ns.steps_per_episode => {
                return Err(Error::Config(format!(
                    "timesteps {t} disagrees with {} episodes of {} steps",
                    ns.num_episodes, ns.steps_per_episode
                )))
            }
            _ => {}
        }
        let p = &self.prior;
        if p.hidden_width == 0 || p.batch_size == 0 || !p.learning_rate.is_finite() || p.learning_rate <= 0.0 {
            return Err(Error::Config("prior training needs positive width, batch size and learning rate".into()));
        }
        let r = &self.ranker;
        if r.batch_size == 0 || r.labels_per_pair == 0 || !r.learning_rate.is_finite() || r.learning_rate <= 0.0 {
            return Err(Error::Config("ranker training needs positive batch size, labels and learning rate".into()));
        }
        Ok(())
    }

    pub fn total_timesteps(&self) -> u64 {
        match self.environment.non_stationary {
            Some(ns) => ns.num_episodes as u64 * ns.steps_per_episode,
            None => self.experiment.timesteps.unwrap_or(0),
        }
    }

    pub fn trial_seed(&self, trial: usize) -> u64 {
        self.experiment.base_seed.wrapping_add(trial as u64)
    }

    pub fn env_spec(&self, trial: usize) -> EnvSpec {
        let e = &self.environment;
        let base = StationaryEnvConfig {
            num_queries: e.num_queries,
            num_items: e.num_items,
            match_min: e.match_min,
            match_max: e.match_max,
            k_shown: e.k_shown,
            w: e.w,
            seed: self.trial_seed(trial),
        };
        match e.non_stationary {
            None => EnvSpec::Stationary(base),
            Some(ns) => EnvSpec::NonStationary(NonStationaryConfig {
                base,
                r: ns.r,
                num_episodes: ns.num_episodes,
                steps_per_episode: ns.steps_per_episode,
            }),
        }
    }

    pub fn learner_config(&self, variant: MethodVariant) -> LearnerConfig {
        LearnerConfig {
            gamma: match variant {
                MethodVariant::BayesStationary => 0.0,
                _ => self.learner.gamma,
            },
            k: self.environment.k_shown,
            sample_mode: self.learner.sample_mode,
            granularity: Granularity::QueryItem,
            decay_unshown: self.learner.decay_unshown,
        }
    }
}

/// Independent random streams of one trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
enum Stream {
    Environment = 0,
    Offline = 1,
    Training = 2,
    Labels = 3,
    Queries = 4,
    Clicks = 5,
    Thompson = 6,
    Episodes = 7,
}

fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

/// Everything a trial's variants share.
#[derive(Debug, Clone)]
pub struct TrialWorld {
    pub trial: usize,
    pub seed: u64,
    pub env: Environment,
    pub offline: OfflineDataset,
    /// Present when the world was built for a Bayesian variant.
    pub prior: Option<PriorNetwork>,
    /// Scores contextual features only.
    pub contextual_ranker: LogisticRanker,
    /// Scores one interaction feature followed by the contextual features.
    pub interaction_ranker: LogisticRanker,
}

/// Builds the environment, offline history and trained models of a trial.
pub fn build_world(config: &ExperimentConfig, trial: usize, with_prior: bool) -> Result<TrialWorld> {
    let seed = config.trial_seed(trial);
    let env = match config.env_spec(trial) {
        EnvSpec::Stationary(c) => Environment::build(&c, &mut stream(seed, Stream::Environment))?,
        EnvSpec::NonStationary(c) => {
            Environment::build_non_stationary(&c, &mut stream(seed, Stream::Environment))?
        }
    };
    let offline = env.gen_offline_dataset(&mut stream(seed, Stream::Offline));
    let mut training = stream(seed, Stream::Training);
    let prior = if with_prior {
        Some(train_prior(config, &offline, &mut training)?)
    } else {
        None
    };
    let (contextual_ranker, interaction_ranker) =
        train_rankers(config, &env, &offline, &mut training, seed)?;
    Ok(TrialWorld {
        trial,
        seed,
        env,
        offline,
        prior,
        contextual_ranker,
        interaction_ranker,
    })
}

/// Prior examples carry the exposure count, so the network learns a
/// per-exposure rate.
pub fn prior_examples(offline: &OfflineDataset) -> Vec<TrainingExample> {
    offline
        .records
        .iter()
        .map(|r| TrainingExample::with_exposure(r.z.to_vec(), vec![r.x], r.n as f64))
        .collect()
}

fn train_prior(
    config: &ExperimentConfig,
    offline: &OfflineDataset,
    rng: &mut ChaCha8Rng,
) -> Result<PriorNetwork> {
    let p = &config.prior;
    let arch = Architecture {
        input_dim: CONTEXT_DIM,
        num_features: 1,
        hidden_width: p.hidden_width,
        num_residual_blocks: p.num_residual_blocks,
    };
    let net = PriorNetwork::new(arch, rng)?;
    let train_config = TrainConfig {
        learning_rate: p.learning_rate,
        batch_size: p.batch_size,
        epochs: p.epochs,
        seed: rng.next_u64(),
    };
    let outcome = prior_net::train(net, &prior_examples(offline), &train_config)?;
    if let Some(last) = outcome.loss_history.last() {
        log::debug!("prior network trained, final epoch loss {last:.5}");
    }
    Ok(outcome.network)
}

fn train_rankers(
    config: &ExperimentConfig,
    env: &Environment,
    offline: &OfflineDataset,
    rng: &mut ChaCha8Rng,
    seed: u64,
) -> Result<(LogisticRanker, LogisticRanker)> {
    let mut labels = stream(seed, Stream::Labels);
    let per_pair = config.ranker.labels_per_pair;
    let mut with_x = Vec::with_capacity(offline.records.len() * per_pair);
    for r in &offline.records {
        let p = env
            .query(r.query)?
            .find(r.item)
            .ok_or(Error::ForeignItem { query: r.query, item: r.item })?
            .p();
        let rate = r.x as f64 / r.n as f64;
        for _ in 0..per_pair {
            with_x.push(LabeledExample {
                interaction: vec![rate],
                contextual: r.z.to_vec(),
                click: labels.random::<f64>() < p,
            });
        }
    }
    let context_only: Vec<LabeledExample> = with_x
        .iter()
        .map(|e| LabeledExample {
            interaction: Vec::new(),
            contextual: e.contextual.clone(),
            click: e.click,
        })
        .collect();
    let rc = &config.ranker;
    let mut cfg = RankerTrainConfig {
        learning_rate: rc.learning_rate,
        batch_size: rc.batch_size,
        epochs: rc.epochs,
        seed: rng.next_u64(),
    };
    let contextual = train_ranker(&context_only, 0, CONTEXT_DIM, &cfg)?.ranker;
    cfg.seed = rng.next_u64();
    let interaction = train_ranker(&with_x, 1, CONTEXT_DIM, &cfg)?.ranker;
    Ok((contextual, interaction))
}

/// Per-arm interaction state consulted when ranking.
pub trait InteractionState {
    /// Interaction feature fed to the ranker for `key`.
    fn feature(&self, key: &ArmKey, rng: &mut dyn RngCore) -> Result<f64>;

    /// Records one step of feedback.
    fn observe(&mut self, t: u64, feedback: &[Feedback]) -> Result<()>;
}

/// Cumulative clicks and exposures per arm.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmpiricalCounts {
    counts: std::collections::BTreeMap<ArmKey, (u64, u64)>,
}

impl EmpiricalCounts {
    pub fn get(&self, key: &ArmKey) -> Option<(u64, u64)> {
        self.counts.get(key).copied()
    }
}

impl InteractionState for EmpiricalCounts {
    /// Observed click rate, 0 for an arm never shown.
    fn feature(&self, key: &ArmKey, _rng: &mut dyn RngCore) -> Result<f64> {
        Ok(match self.counts.get(key) {
            Some(&(c, n)) if n > 0 => c as f64 / n as f64,
            _ => 0.0,
        })
    }

    fn observe(&mut self, _t: u64, feedback: &[Feedback]) -> Result<()> {
        for fb in feedback {
            let e = self.counts.entry(fb.key).or_default();
            e.0 += fb.sum_counts;
            e.1 += fb.n_obs;
        }
        Ok(())
    }
}

impl InteractionState for PosteriorStore {
    /// One posterior draw.
    fn feature(&self, key: &ArmKey, rng: &mut dyn RngCore) -> Result<f64> {
        self.sample_estimate(key, rng)
    }

    fn observe(&mut self, t: u64, feedback: &[Feedback]) -> Result<()> {
        self.record_feedback(t, feedback)
    }
}

/// Counts reads of the wrapped state.
#[derive(Debug, Default)]
pub struct CountingState<S> {
    pub inner: S,
    reads: Cell<u64>,
}

impl<S> CountingState<S> {
    pub fn new(inner: S) -> Self {
        Self {
            inner,
            reads: Cell::new(0),
        }
    }

    pub fn reads(&self) -> u64 {
        self.reads.get()
    }
}

impl<S: InteractionState> InteractionState for CountingState<S> {
    fn feature(&self, key: &ArmKey, rng: &mut dyn RngCore) -> Result<f64> {
        self.reads.set(self.reads.get() + 1);
        self.inner.feature(key, rng)
    }

    fn observe(&mut self, t: u64, feedback: &[Feedback]) -> Result<()> {
        self.inner.observe(t, feedback)
    }
}

/// Clicks and exposures of one trial, one entry per timestep.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TrialSeries {
    pub trial: usize,
    pub clicks: Vec<u32>,
    pub exposures: Vec<u32>,
}

impl TrialSeries {
    pub fn len(&self) -> usize {
        self.clicks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clicks.is_empty()
    }

    pub fn cumulative_ctr(&self) -> f64 {
        let c: u64 = self.clicks.iter().map(|&c| c as u64).sum();
        let n: u64 = self.exposures.iter().map(|&n| n as u64).sum();
        if n == 0 {
            0.0
        } else {
            c as f64 / n as f64
        }
    }

    /// CTR over the trailing `window` steps ending at each timestep.
    pub fn windowed_ctr(&self, window: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        let (mut c, mut n) = (0u64, 0u64);
        for t in 0..self.len() {
            c += self.clicks[t] as u64;
            n += self.exposures[t] as u64;
            if t >= window {
                c -= self.clicks[t - window] as u64;
                n -= self.exposures[t - window] as u64;
            }
            out.push(if n == 0 { 0.0 } else { c as f64 / n as f64 });
        }
        out
    }
}

/// Runs `variant` with a caller-supplied interaction state.
pub fn simulate<S: InteractionState>(
    config: &ExperimentConfig,
    world: &TrialWorld,
    variant: MethodVariant,
    state: &mut S,
) -> Result<TrialSeries> {
    let mut env = world.env.clone();
    let mut queries = stream(world.seed, Stream::Queries);
    let mut clicks = stream(world.seed, Stream::Clicks);
    let mut thompson = stream(world.seed, Stream::Thompson);
    let mut episodes = stream(world.seed, Stream::Episodes);
    let ranker = if variant.reads_interactions() {
        &world.interaction_ranker
    } else {
        &world.contextual_ranker
    };
    let episode_len = config.environment.non_stationary.map(|ns| ns.steps_per_episode);
    let total = config.total_timesteps();
    let k = config.environment.k_shown;
    let mut series = TrialSeries {
        trial: world.trial,
        clicks: Vec::with_capacity(total as usize),
        exposures: Vec::with_capacity(total as usize),
    };
    let mut scores: Vec<(ItemId, f64)> = Vec::new();
    for t in 1..=total {
        if let Some(len) = episode_len {
            if t > 1 && (t - 1) % len == 0 {
                env.advance_episode(&mut episodes)?;
            }
        }
        let q = env.sample_query(&mut queries);
        let entry = env.query(q)?;
        scores.clear();
        for m in entry.items() {
            let key = ArmKey::pair(q, m.item());
            let estimate;
            let interaction: &[f64] = if variant.reads_interactions() {
                estimate = state.feature(&key, &mut thompson)?;
                std::slice::from_ref(&estimate)
            } else {
                &[]
            };
            let score = ranker.score(&RankerInput {
                interaction_features: interaction,
                contextual_features: m.z(),
            })?;
            scores.push((m.item(), score));
        }
        let shown: Vec<ItemId> = select_top_k(&scores, k).items().collect();
        let outcome = env.step(q, &shown, &mut clicks)?;
        let feedback: Vec<Feedback> = shown
            .iter()
            .zip(&outcome)
            .map(|(&item, &c)| Feedback {
                key: ArmKey::pair(q, item),
                sum_counts: c as u64,
                n_obs: 1,
            })
            .collect();
        state.observe(t, &feedback)?;
        series.clicks.push(outcome.iter().filter(|&&c| c).count() as u32);
        series.exposures.push(shown.len() as u32);
    }
    Ok(series)
}

/// Posterior store seeded with the world's prior for every query-item pair.
pub fn init_posteriors(
    config: &ExperimentConfig,
    world: &TrialWorld,
    variant: MethodVariant,
) -> Result<PosteriorStore> {
    let net = world
        .prior
        .as_ref()
        .ok_or_else(|| Error::Usage("world was built without a prior network".into()))?;
    let arms = world.env.queries().iter().flat_map(|q| {
        q.items()
            .iter()
            .map(move |m| (ArmKey::pair(q.id(), m.item()), &m.z()[..]))
    });
    PosteriorStore::init(net, arms, config.learner_config(variant))
}

/// Runs a Bayesian variant and returns its final posterior store.
pub fn run_bayesian(
    config: &ExperimentConfig,
    world: &TrialWorld,
    variant: MethodVariant,
) -> Result<(TrialSeries, PosteriorStore)> {
    if !variant.is_bayesian() {
        return Err(Error::Usage(format!("{variant} keeps no posterior store")));
    }
    let mut store = init_posteriors(config, world, variant)?;
    let series = simulate(config, world, variant, &mut store)?;
    Ok((series, store))
}

pub fn run_variant(
    config: &ExperimentConfig,
    world: &TrialWorld,
    variant: MethodVariant,
) -> Result<TrialSeries> {
    if variant.is_bayesian() {
        Ok(run_bayesian(config, world, variant)?.0)
    } else {
        simulate(config, world, variant, &mut EmpiricalCounts::default())
    }
}

/// All trials of one variant.
#[derive(Debug, Clone, PartialEq)]
pub struct CtrSeries {
    pub variant: MethodVariant,
    pub window: usize,
    pub trials: Vec<TrialSeries>,
}

/// A mean across trials with its standard error, absent for a single trial.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanCi {
    pub mean: f64,
    pub se: Option<f64>,
}

impl MeanCi {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let se = (xs.len() > 1).then(|| {
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        });
        Self { mean, se }
    }

    /// Half-width of the 95% interval, 0 when it is undefined.
    pub fn half_width(&self) -> f64 {
        self.se.map_or(0.0, |se| Z95 * se)
    }

    pub fn ci(&self) -> Option<(f64, f64)> {
        self.se.map(|se| (self.mean - Z95 * se, self.mean + Z95 * se))
    }
}

impl CtrSeries {
    pub fn timesteps(&self) -> usize {
        self.trials.first().map_or(0, TrialSeries::len)
    }

    fn check_aligned(&self) -> Result<()> {
        if self.trials.is_empty() {
            return Err(Error::Usage(format!("{} has no trials", self.variant)));
        }
        let len = self.timesteps();
        if let Some(t) = self.trials.iter().find(|t| t.len() != len) {
            return Err(Error::Usage(format!(
                "{} trial {} has {} timesteps, expected {len}",
                self.variant,
                t.trial,
                t.len()
            )));
        }
        Ok(())
    }

    pub fn cumulative(&self) -> Result<MeanCi> {
        self.check_aligned()?;
        let per_trial: Vec<f64> = self.trials.iter().map(TrialSeries::cumulative_ctr).collect();
        Ok(MeanCi::from_samples(&per_trial))
    }

    /// Mean and interval of the windowed CTR at every timestep.
    pub fn band(&self) -> Result<Vec<MeanCi>> {
        self.check_aligned()?;
        let windowed: Vec<Vec<f64>> = self.trials.iter().map(|t| t.windowed_ctr(self.window)).collect();
        Ok((0..self.timesteps())
            .map(|i| MeanCi::from_samples(&windowed.iter().map(|w| w[i]).collect::<Vec<_>>()))
            .collect())
    }

    /// Windowed CTR averaged over `steps` (0-based) within each trial.
    pub fn windowed_mean(&self, steps: Range<usize>) -> Result<MeanCi> {
        self.check_aligned()?;
        if steps.is_empty() || steps.end > self.timesteps() {
            return Err(Error::Usage(format!(
                "step range {steps:?} outside series of {} steps",
                self.timesteps()
            )));
        }
        let per_trial: Vec<f64> = self
            .trials
            .iter()
            .map(|t| {
                let w = t.windowed_ctr(self.window);
                w[steps.clone()].iter().sum::<f64>() / steps.len() as f64
            })
            .collect();
        Ok(MeanCi::from_samples(&per_trial))
    }

    pub fn write_csv<W: Write>(&self, out: W) -> std::result::Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CSV_HEADER)?;
        for trial in &self.trials {
            let windowed = trial.windowed_ctr(self.window);
            let rows = trial.clicks.iter().zip(&trial.exposures).zip(&windowed);
            for (t, ((clicks, exposures), ctr)) in rows.enumerate() {
                w.write_record([
                    trial.trial.to_string(),
                    (t + 1).to_string(),
                    clicks.to_string(),
                    exposures.to_string(),
                    format!("{ctr:.6}"),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
            .map_err(|source| Error::Csv { path: path.into(), source })
    }

    /// Parses a file written by [`CtrSeries::write_csv`]; the windowed column
    /// is recomputed from the counts.
    pub fn read_csv<R: Read>(input: R, variant: MethodVariant, window: usize) -> std::result::Result<Self, csv::Error> {
        let mut rdr = csv::Reader::from_reader(input);
        let header = rdr.headers()?.clone();
        if header.iter().ne(CSV_HEADER) {
            return Err(csv::Error::from(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("unexpected header {:?}", header.iter().collect::<Vec<_>>()),
            )));
        }
        let mut trials: Vec<TrialSeries> = Vec::new();
        for row in rdr.deserialize() {
            let (trial, _t, clicks, exposures, _ctr): (usize, u64, u32, u32, f64) = row?;
            if trials.last().is_none_or(|s| s.trial != trial) {
                trials.push(TrialSeries { trial, ..TrialSeries::default() });
            }
            let s = trials.last_mut().unwrap();
            s.clicks.push(clicks);
            s.exposures.push(exposures);
        }
        Ok(Self { variant, window, trials })
    }

    pub fn load_csv(path: &Path, variant: MethodVariant, window: usize) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(file), variant, window)
            .map_err(|source| Error::Csv { path: path.into(), source })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VariantSummary {
    pub variant: MethodVariant,
    pub trials: usize,
    pub cumulative_ctr: MeanCi,
}

/// Cumulative CTR per variant; every series must cover the same timesteps.
pub fn aggregate(series: &[CtrSeries]) -> Result<Vec<VariantSummary>> {
    let len = series.first().map(CtrSeries::timesteps);
    series
        .iter()
        .map(|s| {
            let cumulative_ctr = s.cumulative()?;
            if Some(s.timesteps()) != len {
                return Err(Error::Usage(format!(
                    "{} covers {} timesteps, expected {}",
                    s.variant,
                    s.timesteps(),
                    len.unwrap_or(0)
                )));
            }
            Ok(VariantSummary {
                variant: s.variant,
                trials: s.trials.len(),
                cumulative_ctr,
            })
        })
        .collect()
}

/// Runs every configured variant over every trial.
///
/// Trials run on separate threads; results are returned in variant order with
/// trials in index order.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<CtrSeries>> {
    config.validate()?;
    let variants = &config.experiment.variants;
    let with_prior = variants.iter().any(|v| v.is_bayesian());
    let per_trial: Vec<Result<Vec<TrialSeries>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..config.experiment.num_trials)
            .map(|trial| {
                scope.spawn(move || {
                    let world = build_world(config, trial, with_prior)?;
                    log::info!("trial {trial}: world built ({} pairs)", world.env.num_pairs());
                    variants
                        .iter()
                        .map(|&v| {
                            let s = run_variant(config, &world, v)?;
                            log::info!("trial {trial}: {v} cumulative ctr {:.4}", s.cumulative_ctr());
                            Ok(s)
                        })
                        .collect()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("trial thread panicked"))
            .collect()
    });
    let mut out: Vec<CtrSeries> = variants
        .iter()
        .map(|&variant| CtrSeries {
            variant,
            window: config.experiment.window,
            trials: Vec::new(),
        })
        .collect();
    for trial in per_trial {
        for (series, s) in out.iter_mut().zip(trial?) {
            series.trials.push(s);
        }
    }
    Ok(out)
}

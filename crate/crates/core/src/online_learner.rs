//! Thompson-sampling online learner over Gamma-Poisson posteriors.
//!
//! Each arm starts at the prior predicted by the prior network from its
//! contextual features. To rank a query, one interaction estimate is drawn per
//! arm from its posterior, the ranker scores the estimate together with the
//! contextual features, and the top K are shown. Feedback for shown arms is
//! folded in with the discounted conjugate update.
//!
//! With `decay_unshown`, arms that receive no feedback also drift toward
//! their prior each step. That drift is applied lazily: an arm stores the
//! parameters of its last update, and reads apply the closed-form `k`-step
//! decay for the steps elapsed since.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Reader;
use crate::error::{Error, Result};
use crate::gamma_poisson::{self, lazy_decay, posterior_update, GammaPoissonParams};
use crate::prior_net::PriorNetwork;
use crate::ranker::{select_top_k, RankedList, Ranker, RankerInput};
use crate::types::{ArmKey, ItemId, QueryId};

pub const SNAPSHOT_MAGIC: &[u8; 8] = b"BCNSPOST";
pub const SNAPSHOT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 4 + 8 + 8 + 8 + 8;
const RECORD_LEN: usize = 7 * 8;
const NO_QUERY: u64 = u64::MAX;

/// What is drawn from an arm's posterior when ranking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    /// The latent per-exposure rate `λ ~ Gamma(α, β)`.
    #[default]
    Rate,
    /// A Gamma-Poisson count.
    Count,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Granularity {
    Item,
    #[default]
    QueryItem,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearnerConfig {
    /// Reversion rate toward the prior, in `[0, 1]`.
    pub gamma: f64,
    /// Length of the shown list.
    pub k: usize,
    pub sample_mode: SampleMode,
    pub granularity: Granularity,
    pub decay_unshown: bool,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            gamma: 0.05,
            k: 10,
            sample_mode: SampleMode::Rate,
            granularity: Granularity::QueryItem,
            decay_unshown: false,
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::domain(format!("gamma must lie in [0, 1], got {}", self.gamma)));
        }
        if self.k == 0 {
            return Err(Error::Config("list length k must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArmState {
    pub params: GammaPoissonParams,
    pub prior: GammaPoissonParams,
    pub last_update: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Feedback {
    pub key: ArmKey,
    /// Total interactions observed this step.
    pub sum_counts: u64,
    /// Exposures this step.
    pub n_obs: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorStore {
    config: LearnerConfig,
    time: u64,
    arms: BTreeMap<ArmKey, ArmState>,
}

impl PosteriorStore {
    pub fn empty(config: LearnerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            time: 0,
            arms: BTreeMap::new(),
        })
    }

    /// Seeds every arm with the prior `f_θ(z)` of its contextual features.
    pub fn init<'a, I>(net: &PriorNetwork, arms: I, config: LearnerConfig) -> Result<Self>
    where
        I: IntoIterator<Item = (ArmKey, &'a [f64])>,
    {
        let mut store = Self::empty(config)?;
        for (key, z) in arms {
            let prior = net.forward(z)?.params(0);
            store.insert(key, prior)?;
        }
        Ok(store)
    }

    /// Seeds arms with explicit priors.
    pub fn from_priors<I>(config: LearnerConfig, arms: I) -> Result<Self>
    where
        I: IntoIterator<Item = (ArmKey, GammaPoissonParams)>,
    {
        let mut store = Self::empty(config)?;
        for (key, prior) in arms {
            store.insert(key, prior)?;
        }
        Ok(store)
    }

    fn insert(&mut self, key: ArmKey, prior: GammaPoissonParams) -> Result<()> {
        self.check_granularity(&key)?;
        let state = ArmState {
            params: prior,
            prior,
            last_update: self.time,
        };
        if self.arms.insert(key, state).is_some() {
            return Err(Error::Usage(format!("arm {key} initialized twice")));
        }
        Ok(())
    }

    fn check_granularity(&self, key: &ArmKey) -> Result<()> {
        match (self.config.granularity, key.query) {
            (Granularity::Item, None) | (Granularity::QueryItem, Some(_)) => Ok(()),
            _ => Err(Error::Usage(format!(
                "arm {key} does not match store granularity {:?}",
                self.config.granularity
            ))),
        }
    }

    pub fn config(&self) -> &LearnerConfig {
        &self.config
    }

    pub fn time(&self) -> u64 {
        self.time
    }

    pub fn len(&self) -> usize {
        self.arms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arms.is_empty()
    }

    pub fn get(&self, key: &ArmKey) -> Option<&ArmState> {
        self.arms.get(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ArmKey, &ArmState)> {
        self.arms.iter()
    }

    /// Key for `item` under the store's granularity.
    pub fn key_for(&self, query: Option<QueryId>, item: ItemId) -> Result<ArmKey> {
        match (self.config.granularity, query) {
            (Granularity::Item, _) => Ok(ArmKey::item(item)),
            (Granularity::QueryItem, Some(q)) => Ok(ArmKey::pair(q, item)),
            (Granularity::QueryItem, None) => Err(Error::Usage(
                "query-item store requires a query id".into(),
            )),
        }
    }

    fn decayed(&self, state: &ArmState, at: u64) -> GammaPoissonParams {
        if !self.config.decay_unshown || at <= state.last_update {
            return state.params;
        }
        lazy_decay(&state.params, &state.prior, self.config.gamma, at - state.last_update)
            .expect("gamma validated at construction")
    }

    /// Current posterior of `key`, or `None` for an unknown arm.
    pub fn params(&self, key: &ArmKey) -> Option<GammaPoissonParams> {
        self.arms.get(key).map(|s| self.decayed(s, self.time))
    }

    /// One posterior draw for `key` in the configured sample mode.
    pub fn sample_estimate<R: Rng + ?Sized>(&self, key: &ArmKey, rng: &mut R) -> Result<f64> {
        let params = self.params(key).ok_or(Error::UnknownArm(*key))?;
        Ok(match self.config.sample_mode {
            SampleMode::Rate => gamma_poisson::sample_rate(&params, rng),
            SampleMode::Count => gamma_poisson::sample_count(&params, rng) as f64,
        })
    }

    /// Replaces the cached prior of an arm whose contextual features changed.
    pub fn refresh_prior(&mut self, key: &ArmKey, net: &PriorNetwork, z: &[f64]) -> Result<()> {
        let prior = net.forward(z)?.params(0);
        let state = self.arms.get_mut(key).ok_or(Error::UnknownArm(*key))?;
        state.prior = prior;
        Ok(())
    }

    /// Thompson-sampled ranking of a query's match set.
    ///
    /// Draws one estimate per item in match-set order, scores it with the
    /// ranker, and returns the top `k`. The store is not modified.
    pub fn rank_query<R: Rng + ?Sized>(
        &self,
        ranker: &dyn Ranker,
        query: Option<QueryId>,
        match_set: &[(ItemId, &[f64])],
        rng: &mut R,
    ) -> Result<RankedList> {
        let mut scores = Vec::with_capacity(match_set.len());
        for &(item, z) in match_set {
            let key = self.key_for(query, item)?;
            let estimate = self.sample_estimate(&key, rng)?;
            let score = ranker.score(&RankerInput {
                interaction_features: std::slice::from_ref(&estimate),
                contextual_features: z,
            })?;
            scores.push((item, score));
        }
        Ok(select_top_k(&scores, self.config.k))
    }

    /// Applies one step of feedback at timestep `t`.
    ///
    /// Every fed arm gets the discounted conjugate update; repeated keys in a
    /// batch are summed first. The batch is validated before any arm changes.
    pub fn record_feedback(&mut self, t: u64, batch: &[Feedback]) -> Result<()> {
        if t < self.time {
            return Err(Error::Usage(format!(
                "feedback for timestep {t} arrived after timestep {}",
                self.time
            )));
        }
        let mut merged: BTreeMap<ArmKey, (u64, u64)> = BTreeMap::new();
        for fb in batch {
            if !self.arms.contains_key(&fb.key) {
                return Err(Error::UnknownArm(fb.key));
            }
            let e = merged.entry(fb.key).or_default();
            e.0 += fb.sum_counts;
            e.1 += fb.n_obs;
        }
        let mut updates = Vec::with_capacity(merged.len());
        for (key, (sum_counts, n_obs)) in merged {
            let state = &self.arms[&key];
            let before = self.decayed(state, t.saturating_sub(1));
            let params = posterior_update(&before, &state.prior, sum_counts, n_obs, self.config.gamma)?;
            updates.push((key, params));
        }
        for (key, params) in updates {
            let state = self.arms.get_mut(&key).unwrap();
            state.params = params;
            state.last_update = t;
        }
        self.time = t;
        Ok(())
    }

    pub fn snapshot(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + RECORD_LEN * self.arms.len());
        out.extend_from_slice(SNAPSHOT_MAGIC);
        out.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
        out.push(match self.config.granularity {
            Granularity::Item => 0,
            Granularity::QueryItem => 1,
        });
        out.push(match self.config.sample_mode {
            SampleMode::Rate => 0,
            SampleMode::Count => 1,
        });
        out.push(self.config.decay_unshown as u8);
        out.push(0);
        out.extend_from_slice(&self.config.gamma.to_bits().to_le_bytes());
        out.extend_from_slice(&(self.config.k as u64).to_le_bytes());
        out.extend_from_slice(&self.time.to_le_bytes());
        out.extend_from_slice(&(self.arms.len() as u64).to_le_bytes());
        for (key, s) in &self.arms {
            let q = key.query.map_or(NO_QUERY, |q| q.0 as u64);
            out.extend_from_slice(&q.to_le_bytes());
            out.extend_from_slice(&(key.item.0 as u64).to_le_bytes());
            for v in [s.params.alpha(), s.params.beta(), s.prior.alpha(), s.prior.beta()] {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
            out.extend_from_slice(&s.last_update.to_le_bytes());
        }
        out
    }

    pub fn restore(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(8)? != SNAPSHOT_MAGIC {
            return Err(Error::Load("bad snapshot magic".into()));
        }
        let version = r.u32()?;
        if version != SNAPSHOT_VERSION {
            return Err(Error::Load(format!(
                "unsupported snapshot version {version} (expected {SNAPSHOT_VERSION})"
            )));
        }
        let granularity = match r.u8()? {
            0 => Granularity::Item,
            1 => Granularity::QueryItem,
            g => return Err(Error::Load(format!("unknown granularity tag {g}"))),
        };
        let sample_mode = match r.u8()? {
            0 => SampleMode::Rate,
            1 => SampleMode::Count,
            m => return Err(Error::Load(format!("unknown sample mode tag {m}"))),
        };
        let decay_unshown = match r.u8()? {
            0 => false,
            1 => true,
            d => return Err(Error::Load(format!("bad decay flag {d}"))),
        };
        r.u8()?;
        let gamma = r.f64()?;
        let k = r.u64()? as usize;
        let config = LearnerConfig {
            gamma,
            k,
            sample_mode,
            granularity,
            decay_unshown,
        };
        config.validate().map_err(|e| Error::Load(e.to_string()))?;
        let time = r.u64()?;
        let count = r.u64()?;
        if count.checked_mul(RECORD_LEN as u64) != Some(r.remaining() as u64) {
            return Err(Error::Load(format!(
                "snapshot declares {count} arms but {} record bytes remain",
                r.remaining()
            )));
        }
        let mut arms = BTreeMap::new();
        let mut last_key: Option<ArmKey> = None;
        for _ in 0..count {
            let q = r.u64()?;
            let item = r.u64()?;
            let query = if q == NO_QUERY {
                None
            } else {
                Some(QueryId(u32::try_from(q).map_err(|_| Error::Load("query id overflow".into()))?))
            };
            let item = ItemId(u32::try_from(item).map_err(|_| Error::Load("item id overflow".into()))?);
            let key = ArmKey { query, item };
            let load = |e: Error| Error::Load(format!("arm {key}: {e}"));
            let params = GammaPoissonParams::new(r.f64()?, r.f64()?).map_err(load)?;
            let prior = GammaPoissonParams::new(r.f64()?, r.f64()?).map_err(load)?;
            let last_update = r.u64()?;
            if last_update > time {
                return Err(Error::Load(format!("arm {key} updated after store time")));
            }
            if last_key.is_some_and(|prev| prev >= key) {
                return Err(Error::Load("arm records out of order".into()));
            }
            last_key = Some(key);
            arms.insert(
                key,
                ArmState {
                    params,
                    prior,
                    last_update,
                },
            );
        }
        let store = Self { config, time, arms };
        if let Some(key) = store.arms.keys().find(|k| store.check_granularity(k).is_err()) {
            return Err(Error::Load(format!("arm {key} does not match store granularity")));
        }
        Ok(store)
    }
}

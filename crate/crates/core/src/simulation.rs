//! Synthetic click environments.
//!
//! Each query has a fixed match set of items. A query-item pair carries the
//! contextual vector `z = [z_query, z_item, z_pair]` with entries drawn from
//! `U[0, 1)` and a true attractiveness
//!
//! ```text
//! p = w * (v . z) + (1 - w) * eps
//! ```
//!
//! where `v` is a non-negative weight vector with unit L1 norm and `eps` is a
//! uniform noise term. Non-stationary environments split the noise into a
//! static part and a dynamic part that is redrawn at every episode change:
//! `eps = r * eps_static + (1 - r) * eps_dynamic`.

use std::io::Write;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{ItemId, QueryId};

/// Number of contextual features per query-item pair.
pub const CONTEXT_DIM: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StationaryEnvConfig {
    pub num_queries: u32,
    pub num_items: u32,
    pub match_min: usize,
    pub match_max: usize,
    pub k_shown: usize,
    /// Predictive power of the contextual features.
    pub w: f64,
    pub seed: u64,
}

impl Default for StationaryEnvConfig {
    fn default() -> Self {
        Self {
            num_queries: 1000,
            num_items: 10_000,
            match_min: 5,
            match_max: 50,
            k_shown: 10,
            w: 0.5,
            seed: 0,
        }
    }
}

impl StationaryEnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_queries == 0 || self.num_items == 0 {
            return Err(Error::Config("need at least one query and one item".into()));
        }
        if self.match_min == 0
            || self.match_min > self.match_max
            || self.match_max > self.num_items as usize
        {
            return Err(Error::Config(format!(
                "match set bounds must satisfy 1 <= {} <= {} <= {}",
                self.match_min, self.match_max, self.num_items
            )));
        }
        if self.k_shown == 0 {
            return Err(Error::Config("k_shown must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.w) {
            return Err(Error::Config(format!("w must lie in [0, 1], got {}", self.w)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NonStationaryConfig {
    pub base: StationaryEnvConfig,
    /// Weight of the static noise component.
    pub r: f64,
    pub num_episodes: u32,
    pub steps_per_episode: u64,
}

impl Default for NonStationaryConfig {
    fn default() -> Self {
        Self {
            base: StationaryEnvConfig {
                w: 0.05,
                ..StationaryEnvConfig::default()
            },
            r: 0.5,
            num_episodes: 5,
            steps_per_episode: 10_000,
        }
    }
}

impl NonStationaryConfig {
    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if !(0.0..=1.0).contains(&self.r) {
            return Err(Error::Config(format!("r must lie in [0, 1], got {}", self.r)));
        }
        if self.num_episodes == 0 || self.steps_per_episode == 0 {
            return Err(Error::Config("need at least one episode of one step".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchedItem {
    item: ItemId,
    z: [f64; CONTEXT_DIM],
    eps_static: f64,
    eps_dynamic: f64,
    p: f64,
}

impl MatchedItem {
    pub fn item(&self) -> ItemId {
        self.item
    }

    pub fn z(&self) -> &[f64; CONTEXT_DIM] {
        &self.z
    }

    /// True click probability.
    pub fn p(&self) -> f64 {
        self.p
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryEntry {
    id: QueryId,
    items: Vec<MatchedItem>,
}

impl QueryEntry {
    pub fn id(&self) -> QueryId {
        self.id
    }

    pub fn items(&self) -> &[MatchedItem] {
        &self.items
    }

    pub fn find(&self, item: ItemId) -> Option<&MatchedItem> {
        self.items.iter().find(|m| m.item == item)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Dynamics {
    r: f64,
    episode: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Environment {
    w: f64,
    v: [f64; CONTEXT_DIM],
    k_shown: usize,
    dynamics: Option<Dynamics>,
    queries: Vec<QueryEntry>,
}

impl Environment {
    pub fn build<R: Rng + ?Sized>(config: &StationaryEnvConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut v: [f64; CONTEXT_DIM] = std::array::from_fn(|_| rng.random::<f64>());
        let norm: f64 = v.iter().sum();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        } else {
            v = [1.0 / CONTEXT_DIM as f64; CONTEXT_DIM];
        }
        let item_z: Vec<f64> = (0..config.num_items).map(|_| rng.random()).collect();
        let mut queries = Vec::with_capacity(config.num_queries as usize);
        for q in 0..config.num_queries {
            let z_query: f64 = rng.random();
            let size = rng.random_range(config.match_min..=config.match_max);
            let mut picked = index::sample(rng, config.num_items as usize, size).into_vec();
            picked.sort_unstable();
            let items = picked
                .into_iter()
                .map(|j| {
                    let z_pair: f64 = rng.random();
                    let eps_static: f64 = rng.random();
                    MatchedItem {
                        item: ItemId(j as u32),
                        z: [z_query, item_z[j], z_pair],
                        eps_static,
                        eps_dynamic: 0.0,
                        p: 0.0,
                    }
                })
                .collect();
            queries.push(QueryEntry {
                id: QueryId(q),
                items,
            });
        }
        let mut env = Self {
            w: config.w,
            v,
            k_shown: config.k_shown,
            dynamics: None,
            queries,
        };
        env.recompute();
        Ok(env)
    }

    /// Same layout as the stationary environment built from the same seed,
    /// with an extra dynamic noise term drawn afterwards.
    pub fn build_non_stationary<R: Rng + ?Sized>(
        config: &NonStationaryConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let mut env = Self::build(&config.base, rng)?;
        env.dynamics = Some(Dynamics {
            r: config.r,
            episode: 0,
        });
        env.redraw_dynamic(rng);
        Ok(env)
    }

    fn redraw_dynamic<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for m in self.queries.iter_mut().flat_map(|q| q.items.iter_mut()) {
            m.eps_dynamic = rng.random();
        }
        self.recompute();
    }

    fn recompute(&mut self) {
        let (w, v) = (self.w, self.v);
        let r = self.dynamics.map(|d| d.r);
        for m in self.queries.iter_mut().flat_map(|q| q.items.iter_mut()) {
            let eps = match r {
                Some(r) => r * m.eps_static + (1.0 - r) * m.eps_dynamic,
                None => m.eps_static,
            };
            let vz: f64 = v.iter().zip(&m.z).map(|(a, b)| a * b).sum();
            m.p = (w * vz + (1.0 - w) * eps).clamp(0.0, 1.0);
        }
    }

    /// Starts the next episode by redrawing the dynamic noise of every pair.
    pub fn advance_episode<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        let Some(d) = self.dynamics.as_mut() else {
            return Err(Error::Usage("advance_episode on a stationary environment".into()));
        };
        d.episode += 1;
        self.redraw_dynamic(rng);
        Ok(())
    }

    /// Overrides every click probability. Undone by the next episode change.
    pub fn set_attractiveness<F>(&mut self, mut f: F) -> Result<()>
    where
        F: FnMut(QueryId, &MatchedItem) -> f64,
    {
        let mut next = Vec::new();
        for q in &self.queries {
            for m in &q.items {
                let p = f(q.id, m);
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::domain(format!("attractiveness {p} outside [0, 1]")));
                }
                next.push(p);
            }
        }
        let slots = self.queries.iter_mut().flat_map(|q| q.items.iter_mut());
        for (m, p) in slots.zip(next) {
            m.p = p;
        }
        Ok(())
    }

    pub fn w(&self) -> f64 {
        self.w
    }

    pub fn v(&self) -> &[f64; CONTEXT_DIM] {
        &self.v
    }

    pub fn k_shown(&self) -> usize {
        self.k_shown
    }

    pub fn is_stationary(&self) -> bool {
        self.dynamics.is_none()
    }

    pub fn episode(&self) -> u32 {
        self.dynamics.map_or(0, |d| d.episode)
    }

    pub fn queries(&self) -> &[QueryEntry] {
        &self.queries
    }

    pub fn query(&self, q: QueryId) -> Result<&QueryEntry> {
        self.queries
            .get(q.0 as usize)
            .ok_or_else(|| Error::Usage(format!("unknown query {q}")))
    }

    pub fn num_pairs(&self) -> usize {
        self.queries.iter().map(|q| q.items.len()).sum()
    }

    pub fn sample_query<R: Rng + ?Sized>(&self, rng: &mut R) -> QueryId {
        QueryId(rng.random_range(0..self.queries.len() as u32))
    }

    /// Bernoulli clicks for the items shown for `query`, one exposure each.
    pub fn step<R: Rng + ?Sized>(
        &self,
        query: QueryId,
        shown: &[ItemId],
        rng: &mut R,
    ) -> Result<Vec<bool>> {
        let entry = self.query(query)?;
        let probs = shown
            .iter()
            .map(|&item| {
                entry
                    .find(item)
                    .map(|m| m.p)
                    .ok_or(Error::ForeignItem { query, item })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(probs.into_iter().map(|p| rng.random::<f64>() < p).collect())
    }

    /// Historical interaction counts for every pair.
    pub fn gen_offline_dataset<R: Rng + ?Sized>(&self, rng: &mut R) -> OfflineDataset {
        let mut records = Vec::with_capacity(self.num_pairs());
        for q in &self.queries {
            for m in &q.items {
                let n = rng.random_range(10..=1000u64);
                let x = Binomial::new(n, m.p)
                    .expect("p is kept in [0, 1]")
                    .sample(rng);
                records.push(OfflineRecord {
                    query: q.id,
                    item: m.item,
                    z: m.z,
                    n,
                    x,
                });
            }
        }
        OfflineDataset { records }
    }

    /// Tab-separated dump of every pair: ids, features and click probability.
    pub fn export<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "query\titem\tz_query\tz_item\tz_pair\tp")?;
        for q in &self.queries {
            for m in &q.items {
                writeln!(
                    out,
                    "{}\t{}\t{:e}\t{:e}\t{:e}\t{:e}",
                    q.id.0, m.item.0, m.z[0], m.z[1], m.z[2], m.p
                )?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OfflineRecord {
    pub query: QueryId,
    pub item: ItemId,
    pub z: [f64; CONTEXT_DIM],
    /// Exposures.
    pub n: u64,
    /// Clicks, `0 <= x <= n`.
    pub x: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct OfflineDataset {
    pub records: Vec<OfflineRecord>,
}

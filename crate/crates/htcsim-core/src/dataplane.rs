//! Stage-in/stage-out transfer model: a remote data hub behind a
//! load-balanced pool of DTNs, the cluster shared filesystem with an input
//! cache, fair-shared bandwidth, and credential validity gating remote
//! access.
//!
//! Bandwidth is processor-sharing per pool: every active transfer gets
//! `min(stream_cap, aggregate / n)`. Rates are recomputed whenever the
//! active set changes and completion events are rescheduled to match.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::Engine;
use crate::event::{EventId, EventKind};
use crate::ids::{DatasetId, TaskId, TransferId};
use crate::time::SimTime;

pub const GBITS_PER_GB: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CredentialConfig {
    pub lifetime_days: f64,
    pub renewal_days: f64,
    pub auto_renew: bool,
}

impl Default for CredentialConfig {
    fn default() -> Self {
        CredentialConfig { lifetime_days: 11.0, renewal_days: 7.0, auto_renew: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub dtn_count: u32,
    pub per_dtn_gbps: f64,
    pub stream_cap_gbps: f64,
    pub fs_bw_gbps: f64,
    /// Stage-in cache capacity; zero disables caching.
    pub cache_gb: f64,
    pub credential: CredentialConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dtn_count: 12,
            per_dtn_gbps: 10.0,
            stream_cap_gbps: 10.0,
            fs_bw_gbps: 100.0,
            cache_gb: 10_000.0,
            credential: CredentialConfig::default(),
        }
    }
}

impl DataConfig {
    pub fn aggregate_gbps(&self) -> f64 {
        f64::from(self.dtn_count) * self.per_dtn_gbps
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    StageIn,
    StageOut,
}

/// Which bandwidth pool carries a transfer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Route {
    Hub,
    LocalFs,
}

#[derive(Debug, Clone)]
pub struct Transfer {
    pub id: TransferId,
    pub dataset: DatasetId,
    pub size_gbits: f64,
    pub direction: Direction,
    pub route: Route,
    pub started: SimTime,
    pub remaining_gbits: f64,
    pub rate_gbps: f64,
    /// Time-integral of the assigned rate, for flow-conservation checks.
    pub delivered_gbits: f64,
    pub max_rate_seen: f64,
    last_update: SimTime,
    completion_event: Option<EventId>,
    /// Tasks to notify on completion (stage-in) or the producer (stage-out).
    pub waiters: Vec<TaskId>,
    /// Oversized datasets stream past the cache without being kept.
    pub cached_on_completion: bool,
}

#[derive(Debug, Clone, Copy)]
struct CacheEntry {
    size_gb: f64,
    last_used: SimTime,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DataError {
    #[error("credential expired; remote endpoints unavailable")]
    CredentialExpired,
    #[error("cache cannot hold {0}: all resident datasets are pinned")]
    CacheFull(DatasetId),
}

/// How a stage-in request was satisfied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageIn {
    /// Joined a hub transfer already in flight for the same dataset.
    Joined(TransferId),
    /// New transfer started; `cache_hit` marks a local filesystem read.
    Started { id: TransferId, cache_hit: bool },
}

impl StageIn {
    pub fn transfer_id(&self) -> TransferId {
        match self {
            StageIn::Joined(id) => *id,
            StageIn::Started { id, .. } => *id,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct DataStats {
    pub hub_transfers: u64,
    pub fs_transfers: u64,
    pub cache_hits: u64,
    pub completed: u64,
    pub pause_events: u64,
    /// Worst |delivered - size| seen at any completion, in gigabits.
    pub max_flow_error_gbits: f64,
    /// Completions where the rate integral missed the size by more than one
    /// millisecond quantum at the transfer's peak rate. Must stay zero.
    pub flow_violations: u64,
}

#[derive(Debug, Clone)]
pub struct DataPlane {
    cfg: DataConfig,
    transfers: BTreeMap<TransferId, Transfer>,
    next_transfer: u64,
    hub_active: BTreeSet<TransferId>,
    fs_active: BTreeSet<TransferId>,
    hub_in_flight: BTreeMap<DatasetId, TransferId>,
    cache: BTreeMap<DatasetId, CacheEntry>,
    cache_used_gb: f64,
    pins: BTreeMap<DatasetId, u32>,
    credential_issued: SimTime,
    hub_paused: bool,
    expire_event: Option<EventId>,
    stats: DataStats,
}

impl DataPlane {
    pub fn new(cfg: DataConfig) -> Self {
        DataPlane {
            cfg,
            transfers: BTreeMap::new(),
            next_transfer: 0,
            hub_active: BTreeSet::new(),
            fs_active: BTreeSet::new(),
            hub_in_flight: BTreeMap::new(),
            cache: BTreeMap::new(),
            cache_used_gb: 0.0,
            pins: BTreeMap::new(),
            credential_issued: SimTime::ZERO,
            hub_paused: false,
            expire_event: None,
            stats: DataStats::default(),
        }
    }

    pub fn config(&self) -> &DataConfig {
        &self.cfg
    }

    pub fn stats(&self) -> &DataStats {
        &self.stats
    }

    pub fn transfer(&self, id: TransferId) -> Option<&Transfer> {
        self.transfers.get(&id)
    }

    pub fn active_transfers(&self) -> usize {
        self.hub_active.len() + self.fs_active.len()
    }

    pub fn hub_paused(&self) -> bool {
        self.hub_paused
    }

    pub fn lifetime(&self) -> SimTime {
        SimTime::from_days_f64(self.cfg.credential.lifetime_days)
    }

    pub fn renewal_period(&self) -> SimTime {
        SimTime::from_days_f64(self.cfg.credential.renewal_days)
    }

    pub fn credential_valid(&self, now: SimTime) -> bool {
        now.checked_sub(self.credential_issued).is_some_and(|age| age < self.lifetime())
    }

    /// (Re)issues the credential at the current time, resuming paused hub
    /// transfers, and re-arms the expiry check.
    pub fn issue_credential(&mut self, engine: &mut Engine) {
        self.credential_issued = engine.now();
        if let Some(ev) = self.expire_event.take() {
            engine.cancel(ev);
        }
        self.expire_event =
            Some(engine.schedule_after(self.lifetime(), EventKind::CredentialExpire));
        if self.hub_paused {
            self.hub_paused = false;
            self.recompute_pool(engine, Route::Hub);
        }
    }

    /// Expiry check event: pauses every hub transfer when the credential
    /// genuinely lapsed (the event is cancelled on renewal).
    pub fn handle_expiry(&mut self, engine: &mut Engine) -> bool {
        self.expire_event = None;
        if self.credential_valid(engine.now()) || self.hub_paused {
            return false;
        }
        self.hub_paused = true;
        self.stats.pause_events += 1;
        let now = engine.now();
        for id in self.hub_active.clone() {
            let t = self.transfers.get_mut(&id).expect("active transfer");
            t.settle(now);
            t.rate_gbps = 0.0;
            if let Some(ev) = t.completion_event.take() {
                engine.cancel(ev);
            }
        }
        true
    }

    pub fn pin(&mut self, dataset: DatasetId) {
        *self.pins.entry(dataset).or_insert(0) += 1;
    }

    pub fn unpin(&mut self, dataset: DatasetId) {
        match self.pins.get_mut(&dataset) {
            Some(1) => {
                self.pins.remove(&dataset);
            }
            Some(n) => *n -= 1,
            None => debug_assert!(false, "unpin of unpinned {dataset}"),
        }
    }

    pub fn is_cached(&self, dataset: DatasetId) -> bool {
        self.cache.contains_key(&dataset)
    }

    /// Whether a stage-in of `dataset` could begin now: cached, already in
    /// flight, or reachable over the hub with a valid credential.
    pub fn can_stage_in(&self, dataset: DatasetId, now: SimTime) -> bool {
        self.hub_in_flight.contains_key(&dataset)
            || self.cache.contains_key(&dataset)
            || self.credential_valid(now)
    }

    /// Seeds the cache in dataset-id order until capacity, for scenarios
    /// that start with a pre-synchronized replica.
    pub fn prepopulate(&mut self, datasets: &[(DatasetId, f64)]) {
        for (dataset, size_gb) in datasets {
            if self.cache.contains_key(dataset) {
                continue;
            }
            if self.cache_used_gb + size_gb <= self.cfg.cache_gb {
                self.cache
                    .insert(*dataset, CacheEntry { size_gb: *size_gb, last_used: SimTime::ZERO });
                self.cache_used_gb += size_gb;
            }
        }
    }

    /// Starts (or joins) the stage-in of `dataset` for `waiter`.
    pub fn begin_stage_in(
        &mut self,
        engine: &mut Engine,
        dataset: DatasetId,
        size_gb: f64,
        waiter: TaskId,
    ) -> Result<StageIn, DataError> {
        debug_assert!(size_gb > 0.0);
        self.pin(dataset);
        if let Some(&id) = self.hub_in_flight.get(&dataset) {
            self.transfers.get_mut(&id).expect("in-flight transfer").waiters.push(waiter);
            return Ok(StageIn::Joined(id));
        }
        if let Some(entry) = self.cache.get_mut(&dataset) {
            entry.last_used = engine.now();
            self.stats.cache_hits += 1;
            let id = self.insert_transfer(
                engine,
                dataset,
                size_gb,
                Direction::StageIn,
                Route::LocalFs,
                waiter,
                false,
            );
            return Ok(StageIn::Started { id, cache_hit: true });
        }
        if !self.credential_valid(engine.now()) {
            self.unpin(dataset);
            return Err(DataError::CredentialExpired);
        }
        let cache_this = match self.reserve_cache(engine.now(), dataset, size_gb) {
            Ok(cached) => cached,
            Err(e) => {
                self.unpin(dataset);
                return Err(e);
            }
        };
        let id = self.insert_transfer(
            engine,
            dataset,
            size_gb,
            Direction::StageIn,
            Route::Hub,
            waiter,
            cache_this,
        );
        self.hub_in_flight.insert(dataset, id);
        Ok(StageIn::Started { id, cache_hit: false })
    }

    /// Starts a stage-out through the hub. If the credential has lapsed the
    /// transfer is created paused and resumes on renewal.
    pub fn begin_stage_out(
        &mut self,
        engine: &mut Engine,
        dataset: DatasetId,
        size_gb: f64,
        producer: TaskId,
    ) -> TransferId {
        debug_assert!(size_gb > 0.0);
        self.insert_transfer(
            engine,
            dataset,
            size_gb,
            Direction::StageOut,
            Route::Hub,
            producer,
            false,
        )
    }

    fn insert_transfer(
        &mut self,
        engine: &mut Engine,
        dataset: DatasetId,
        size_gb: f64,
        direction: Direction,
        route: Route,
        waiter: TaskId,
        cached_on_completion: bool,
    ) -> TransferId {
        let id = TransferId(self.next_transfer);
        self.next_transfer += 1;
        let size_gbits = size_gb * GBITS_PER_GB;
        self.transfers.insert(
            id,
            Transfer {
                id,
                dataset,
                size_gbits,
                direction,
                route,
                started: engine.now(),
                remaining_gbits: size_gbits,
                rate_gbps: 0.0,
                delivered_gbits: 0.0,
                max_rate_seen: 0.0,
                last_update: engine.now(),
                completion_event: None,
                waiters: vec![waiter],
                cached_on_completion,
            },
        );
        match route {
            Route::Hub => {
                self.stats.hub_transfers += 1;
                self.hub_active.insert(id);
                self.recompute_pool(engine, Route::Hub);
            }
            Route::LocalFs => {
                self.stats.fs_transfers += 1;
                self.fs_active.insert(id);
                self.recompute_pool(engine, Route::LocalFs);
            }
        }
        id
    }

    /// Completion event handler. Returns the finished transfer.
    pub fn complete_transfer(&mut self, engine: &mut Engine, id: TransferId) -> Transfer {
        let transfer = self.transfers.get(&id).expect("completing unknown transfer");
        let route = transfer.route;
        let now = engine.now();
        // Settle everyone in the pool at the old rates before re-sharing.
        let pool = match route {
            Route::Hub => &mut self.hub_active,
            Route::LocalFs => &mut self.fs_active,
        };
        let members: Vec<TransferId> = pool.iter().copied().collect();
        for m in members {
            self.transfers.get_mut(&m).expect("pool member").settle(now);
        }
        match route {
            Route::Hub => self.hub_active.remove(&id),
            Route::LocalFs => self.fs_active.remove(&id),
        };
        let mut done = self.transfers.remove(&id).expect("transfer exists");
        done.completion_event = None;

        // Flow conservation: the rate integral must equal the size to within
        // one millisecond quantum at the transfer's peak rate.
        let quantum = (done.max_rate_seen * 1.0e-3).max(1.0e-9);
        let err = (done.delivered_gbits - done.size_gbits).abs();
        if err > quantum {
            self.stats.flow_violations += 1;
        }
        if err > self.stats.max_flow_error_gbits {
            self.stats.max_flow_error_gbits = err;
        }
        self.stats.completed += 1;

        if done.direction == Direction::StageIn && done.route == Route::Hub {
            self.hub_in_flight.remove(&done.dataset);
            if done.cached_on_completion {
                if let Some(entry) = self.cache.get_mut(&done.dataset) {
                    entry.last_used = now;
                }
            }
        }
        self.recompute_pool(engine, route);
        done
    }

    /// Detaches a preempted task from a pending stage-in; the transfer keeps
    /// running (it still populates the shared-filesystem cache).
    pub fn remove_waiter(&mut self, transfer: TransferId, task: TaskId) {
        if let Some(t) = self.transfers.get_mut(&transfer) {
            t.waiters.retain(|w| *w != task);
        }
    }

    /// Reserves cache space for an arriving dataset, evicting idle entries
    /// in least-recently-used order. Returns whether the dataset will be
    /// kept; datasets larger than the whole cache stream straight through.
    fn reserve_cache(
        &mut self,
        now: SimTime,
        dataset: DatasetId,
        size_gb: f64,
    ) -> Result<bool, DataError> {
        if self.cfg.cache_gb <= 0.0 {
            return Ok(false);
        }
        if size_gb > self.cfg.cache_gb {
            return Ok(false);
        }
        while self.cache_used_gb + size_gb > self.cfg.cache_gb {
            let victim = self
                .cache
                .iter()
                .filter(|(d, _)| !self.pins.contains_key(d))
                .min_by(|(da, a), (db, b)| {
                    a.last_used.cmp(&b.last_used).then(da.cmp(db))
                })
                .map(|(d, e)| (*d, e.size_gb));
            match victim {
                Some((d, sz)) => {
                    self.cache.remove(&d);
                    self.cache_used_gb -= sz;
                }
                None => return Err(DataError::CacheFull(dataset)),
            }
        }
        self.cache.insert(dataset, CacheEntry { size_gb, last_used: now });
        self.cache_used_gb += size_gb;
        Ok(true)
    }

    /// Re-shares a pool's bandwidth and reschedules completion events.
    fn recompute_pool(&mut self, engine: &mut Engine, route: Route) {
        let (members, rate) = match route {
            Route::Hub => {
                if self.hub_paused {
                    return;
                }
                let n = self.hub_active.len();
                if n == 0 {
                    return;
                }
                let share = self.cfg.aggregate_gbps() / n as f64;
                (self.hub_active.clone(), share.min(self.cfg.stream_cap_gbps))
            }
            Route::LocalFs => {
                let n = self.fs_active.len();
                if n == 0 {
                    return;
                }
                (self.fs_active.clone(), self.cfg.fs_bw_gbps / n as f64)
            }
        };
        assert!(rate.is_finite() && rate > 0.0, "non-positive share rate");
        let now = engine.now();
        for id in members {
            let t = self.transfers.get_mut(&id).expect("pool member");
            t.settle(now);
            t.rate_gbps = rate;
            if rate > t.max_rate_seen {
                t.max_rate_seen = rate;
            }
            if let Some(ev) = t.completion_event.take() {
                engine.cancel(ev);
            }
            let ms = (t.remaining_gbits.max(0.0) / rate * 1_000.0).round() as u64;
            let ev = engine
                .schedule(now + SimTime::from_ms(ms), EventKind::TransferComplete { transfer: id })
                .expect("completion is in the future");
            t.completion_event = Some(ev);
        }
    }
}

impl Transfer {
    /// Accrues progress at the current rate up to `now`.
    fn settle(&mut self, now: SimTime) {
        let dt_ms = (now - self.last_update).as_ms();
        if dt_ms > 0 && self.rate_gbps > 0.0 {
            let gbits = self.rate_gbps * dt_ms as f64 / 1_000.0;
            self.delivered_gbits += gbits;
            self.remaining_gbits -= gbits;
        }
        self.last_update = now;
    }

    pub fn size_gb(&self) -> f64 {
        self.size_gbits / GBITS_PER_GB
    }
}

#[cfg(test)]
mod tests;

//! Capacity-bounded LRU cache of GPU-resident experts.
//!
//! Keys are `(layer, expert)` pairs in one global pool. Demand accesses go
//! through [`ExpertCache::touch`], speculative inserts through
//! [`ExpertCache::prefetch`]. Keys prefetched during the current step are
//! pinned: nothing evicts them until they are touched or the step ends.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelShape;

/// `(layer_id, expert_id)`.
pub type ExpertKey = (usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Access {
    Hit,
    Miss,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Capacity {
    /// Fraction of all `L * E` experts, rounded down, at least one entry.
    Fraction(f64),
    Entries(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CacheConfig {
    pub capacity: Capacity,
    /// Maximum keys processed per prefetch call.
    pub prefetch_budget: usize,
}

impl CacheConfig {
    pub fn fraction(fraction: f64, prefetch_budget: usize) -> Self {
        Self {
            capacity: Capacity::Fraction(fraction),
            prefetch_budget,
        }
    }

    pub fn entries(entries: usize, prefetch_budget: usize) -> Self {
        Self {
            capacity: Capacity::Entries(entries),
            prefetch_budget,
        }
    }

    /// Capacity in entries for `shape`.
    pub fn resolve(&self, shape: &ModelShape) -> Result<usize> {
        if self.prefetch_budget == 0 {
            return Err(Error::config("prefetch budget must be at least 1"));
        }
        match self.capacity {
            Capacity::Fraction(f) if f > 0.0 && f <= 1.0 => {
                Ok(((f * shape.total_experts() as f64).floor() as usize).max(1))
            }
            Capacity::Fraction(f) => Err(Error::config(format!(
                "capacity fraction {f} must be in (0, 1]"
            ))),
            Capacity::Entries(0) => Err(Error::config("capacity must be at least 1 entry")),
            Capacity::Entries(n) => Ok(n),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExpertCache {
    shape: ModelShape,
    capacity: usize,
    prefetch_budget: usize,
    clock: u64,
    stamps: HashMap<ExpertKey, u64>,
    /// Recency order: smallest stamp is least recently used.
    order: BTreeMap<u64, ExpertKey>,
    pinned: HashSet<ExpertKey>,
}

impl ExpertCache {
    pub fn new(shape: ModelShape, config: &CacheConfig) -> Result<Self> {
        let capacity = config.resolve(&shape)?;
        Ok(Self {
            shape,
            capacity,
            prefetch_budget: config.prefetch_budget,
            clock: 0,
            stamps: HashMap::with_capacity(capacity),
            order: BTreeMap::new(),
            pinned: HashSet::new(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.stamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stamps.is_empty()
    }

    pub fn contains(&self, key: ExpertKey) -> bool {
        self.stamps.contains_key(&key)
    }

    /// Resident keys, least recently used first.
    pub fn resident(&self) -> Vec<ExpertKey> {
        self.order.values().copied().collect()
    }

    fn check(&self, key: ExpertKey) -> Result<()> {
        self.shape.check_layer(key.0)?;
        self.shape.check_expert(key.1)
    }

    fn refresh(&mut self, key: ExpertKey) {
        self.clock += 1;
        if let Some(old) = self.stamps.insert(key, self.clock) {
            self.order.remove(&old);
        }
        self.order.insert(self.clock, key);
    }

    /// Frees one slot if the cache is full. Returns false when every
    /// resident key is pinned.
    fn make_room(&mut self) -> bool {
        if self.stamps.len() < self.capacity {
            return true;
        }
        let victim = self
            .order
            .iter()
            .find(|(_, k)| !self.pinned.contains(k))
            .map(|(&stamp, &key)| (stamp, key));
        match victim {
            Some((stamp, key)) => {
                self.order.remove(&stamp);
                self.stamps.remove(&key);
                true
            }
            None => false,
        }
    }

    /// Demand access. A hit refreshes recency; a miss inserts the key as
    /// most recent, evicting the least recently used unpinned key. If every
    /// resident key is pinned the missed key bypasses the cache.
    pub fn touch(&mut self, key: ExpertKey) -> Result<Access> {
        self.check(key)?;
        self.pinned.remove(&key);
        if self.stamps.contains_key(&key) {
            self.refresh(key);
            return Ok(Access::Hit);
        }
        if self.make_room() {
            self.refresh(key);
        }
        Ok(Access::Miss)
    }

    /// Speculatively inserts up to `prefetch_budget` keys, in order. Every
    /// processed key is refreshed and pinned for the rest of the step.
    /// Returns the number of newly inserted keys.
    pub fn prefetch(&mut self, keys: &[ExpertKey]) -> Result<usize> {
        for &key in keys {
            self.check(key)?;
        }
        let mut inserted = 0;
        for &key in keys.iter().take(self.prefetch_budget) {
            if self.stamps.contains_key(&key) {
                self.refresh(key);
                self.pinned.insert(key);
            } else if self.make_room() {
                self.refresh(key);
                self.pinned.insert(key);
                inserted += 1;
            }
        }
        Ok(inserted)
    }

    /// Ends the current step, releasing all pins.
    pub fn end_step(&mut self) {
        self.pinned.clear();
    }
}

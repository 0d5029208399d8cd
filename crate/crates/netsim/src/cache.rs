use std::collections::{BTreeMap, HashMap, HashSet};

use wantscope_core::Cid;

/// Block store of one node: pinned blocks plus a bounded LRU cache of
/// fetched ones. Pinned blocks do not count against the capacity.
#[derive(Clone, Debug, Default)]
pub struct BlockStore {
    capacity: usize,
    pinned: HashSet<Cid>,
    /// Cid -> last-use tick.
    lru: HashMap<Cid, u64>,
    by_tick: BTreeMap<u64, Cid>,
    tick: u64,
}

impl BlockStore {
    pub fn new(capacity: usize) -> Self {
        BlockStore {
            capacity,
            ..Default::default()
        }
    }

    pub fn contains(&self, cid: &Cid) -> bool {
        self.pinned.contains(cid) || self.lru.contains_key(cid)
    }

    pub fn is_pinned(&self, cid: &Cid) -> bool {
        self.pinned.contains(cid)
    }

    /// Number of cached (unpinned) blocks.
    pub fn cached_len(&self) -> usize {
        self.lru.len()
    }

    pub fn pin(&mut self, cid: Cid) {
        self.remove_cached(&cid);
        self.pinned.insert(cid);
    }

    /// Marks a cached block as recently used.
    pub fn touch(&mut self, cid: &Cid) {
        if let Some(old) = self.lru.get(cid).copied() {
            self.by_tick.remove(&old);
            self.tick += 1;
            self.lru.insert(*cid, self.tick);
            self.by_tick.insert(self.tick, *cid);
        }
    }

    /// Caches a block, returning whatever was evicted to make room.
    pub fn insert(&mut self, cid: Cid) -> Vec<Cid> {
        if self.pinned.contains(&cid) {
            return Vec::new();
        }
        if self.lru.contains_key(&cid) {
            self.touch(&cid);
            return Vec::new();
        }
        self.tick += 1;
        self.lru.insert(cid, self.tick);
        self.by_tick.insert(self.tick, cid);
        let mut evicted = Vec::new();
        while self.lru.len() > self.capacity {
            let (_, oldest) = self.by_tick.pop_first().expect("non-empty lru");
            self.lru.remove(&oldest);
            evicted.push(oldest);
        }
        evicted
    }

    /// Drops a block, pinned or not. Returns whether it was present.
    pub fn remove(&mut self, cid: &Cid) -> bool {
        let pinned = self.pinned.remove(cid);
        self.remove_cached(cid) || pinned
    }

    fn remove_cached(&mut self, cid: &Cid) -> bool {
        match self.lru.remove(cid) {
            Some(tick) => {
                self.by_tick.remove(&tick);
                true
            }
            None => false,
        }
    }

    /// Every stored block, pinned first, in a deterministic order.
    pub fn all(&self) -> Vec<Cid> {
        let mut pinned: Vec<Cid> = self.pinned.iter().copied().collect();
        pinned.sort();
        pinned.extend(self.by_tick.values().copied());
        pinned
    }
}

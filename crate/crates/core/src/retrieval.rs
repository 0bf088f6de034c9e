//! Subgraph retrieval for a query item.
//!
//! Anchors come from exact nearest-neighbor search on an observed modality.
//! They are joined into an anchor-connecting subgraph (ACS) by a multi-source
//! BFS whose waves carry a bitmask of the seeds they started from; the first
//! node popped with every bit set becomes the root, and each anchor is
//! backtracked to it along a BFS tree grown from that root. MAGE then greedily
//! adds boundary nodes or drops non-bridging non-anchor nodes while the mean
//! relevance to the query improves.

use std::collections::{BTreeSet, HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::ItemGraph;
use crate::modality::{cosine_f32, relevance, ModalityStore, Observation, Relevance, NEG_INF_RELEVANCE};

/// Widest anchor set the reachability bitmask can carry.
pub const MAX_ANCHORS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    /// Anchors per query.
    pub k: usize,
    /// MAGE iteration cap.
    pub t: usize,
    /// Hop radius of the neighborhood baseline.
    pub kn: usize,
    /// Force anchors to come from a single modality.
    pub anchor_modality: Option<usize>,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            k: 10,
            t: 10,
            kn: 2,
            anchor_modality: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub query: usize,
    /// Modalities the search ran on.
    pub modalities: Vec<usize>,
    /// Descending similarity, ties by lower id.
    pub anchors: Vec<usize>,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subgraph {
    /// Ascending node ids.
    pub nodes: Vec<usize>,
    pub anchors: Vec<usize>,
    pub contains_anchors: bool,
    /// Connected pieces the anchors fell into (1 when the graph links them all).
    pub components: usize,
    /// Mean relevance to the query, when computed.
    pub phi: Option<f64>,
}

/// One accepted MAGE move.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Move {
    Add { node: usize, phi: f64 },
    Remove { node: usize, phi: f64 },
}

impl Move {
    pub fn phi(&self) -> f64 {
        match *self {
            Move::Add { phi, .. } | Move::Remove { phi, .. } => phi,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MageOutcome {
    pub initial: Subgraph,
    pub subgraph: Subgraph,
    pub moves: Vec<Move>,
}

/// Exact top-`k` neighbors of `i` on modality `m` among items observing `m`.
pub fn retrieve_anchors(
    store: &ModalityStore,
    obs: &(impl Observation + ?Sized),
    i: usize,
    m: usize,
    k: usize,
) -> Result<AnchorSet> {
    if m >= store.n_modalities() {
        return Err(Error::UnknownModality(m));
    }
    if i >= store.n_items() {
        return Err(Error::NodeOutOfRange {
            node: i,
            n: store.n_items(),
        });
    }
    if !obs.is_observed(i, m) {
        return Err(Error::ModalityNotObserved { node: i, modality: m });
    }
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let q = store.row(m, i);
    let mut scored: Vec<(f64, usize)> = (0..store.n_items())
        .filter(|&j| j != i && obs.is_observed(j, m))
        .map(|j| (cosine_f32(q, store.row(m, j)), j))
        .collect();
    let order = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    if scored.len() > k {
        scored.select_nth_unstable_by(k - 1, order);
        scored.truncate(k);
    }
    scored.sort_unstable_by(order);
    Ok(AnchorSet {
        query: i,
        modalities: vec![m],
        anchors: scored.iter().map(|s| s.1).collect(),
        scores: scored.iter().map(|s| s.0).collect(),
    })
}

/// Anchors for a query: the forced modality when configured, otherwise the
/// union of top-`ceil(k / observed)` per observed modality, capped at `k` by score.
pub fn query_anchors(
    store: &ModalityStore,
    obs: &(impl Observation + ?Sized),
    i: usize,
    cfg: &RetrievalConfig,
) -> Result<AnchorSet> {
    if let Some(m) = cfg.anchor_modality {
        return retrieve_anchors(store, obs, i, m, cfg.k);
    }
    let observed = obs.observed_modalities(i);
    match observed.len() {
        0 => Err(Error::NoObservedModality(i)),
        1 => retrieve_anchors(store, obs, i, observed[0], cfg.k),
        n => {
            let per = cfg.k.div_ceil(n);
            let mut best: HashMap<usize, f64> = HashMap::new();
            for &m in &observed {
                let set = retrieve_anchors(store, obs, i, m, per)?;
                for (a, s) in set.anchors.into_iter().zip(set.scores) {
                    let e = best.entry(a).or_insert(s);
                    *e = e.max(s);
                }
            }
            let mut scored: Vec<(f64, usize)> = best.into_iter().map(|(a, s)| (s, a)).collect();
            scored.sort_unstable_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            scored.truncate(cfg.k);
            Ok(AnchorSet {
                query: i,
                modalities: observed,
                anchors: scored.iter().map(|s| s.1).collect(),
                scores: scored.iter().map(|s| s.0).collect(),
            })
        }
    }
}

fn normalize_anchors(g: &ItemGraph, anchors: &[usize]) -> Result<Vec<usize>> {
    if anchors.is_empty() {
        return Err(Error::EmptySet);
    }
    let mut seeds = anchors.to_vec();
    seeds.sort_unstable();
    seeds.dedup();
    if seeds.len() > MAX_ANCHORS {
        return Err(Error::TooManyAnchors(seeds.len()));
    }
    if let Some(&v) = seeds.iter().find(|&&v| v >= g.n()) {
        return Err(Error::NodeOutOfRange { node: v, n: g.n() });
    }
    Ok(seeds)
}

/// Groups sorted seeds by connected component, in order of each group's lowest seed.
fn group_by_component(g: &ItemGraph, seeds: &[usize]) -> Vec<Vec<usize>> {
    let mut label: HashMap<usize, usize> = HashMap::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut queue = VecDeque::new();
    for &s in seeds {
        if let Some(&l) = label.get(&s) {
            groups[l].push(s);
            continue;
        }
        let l = groups.len();
        groups.push(vec![s]);
        // only label far enough to find the remaining seeds of this component
        let pending: BTreeSet<usize> = seeds.iter().copied().filter(|&x| x > s).collect();
        let mut remaining = pending.len();
        label.insert(s, l);
        queue.clear();
        queue.push_back(s);
        while let Some(u) = queue.pop_front() {
            if remaining == 0 {
                break;
            }
            for &w in g.neighbors(u) {
                let w = w as usize;
                if let std::collections::hash_map::Entry::Vacant(e) = label.entry(w) {
                    e.insert(l);
                    if pending.contains(&w) {
                        remaining -= 1;
                    }
                    queue.push_back(w);
                }
            }
        }
    }
    groups
}

/// The multi-source wave search. Returns the first node popped whose mask
/// covers every seed, if any.
fn collision_root(g: &ItemGraph, seeds: &[usize]) -> Option<usize> {
    let mut dist: HashMap<usize, u32> = HashMap::new();
    let mut mask: HashMap<usize, u64> = HashMap::new();
    let full = if seeds.len() == 64 {
        u64::MAX
    } else {
        (1u64 << seeds.len()) - 1
    };
    let mut queue = VecDeque::new();
    for (bit, &s) in seeds.iter().enumerate() {
        dist.insert(s, 0);
        *mask.entry(s).or_insert(0) |= 1 << bit;
        queue.push_back(s);
    }
    while let Some(u) = queue.pop_front() {
        let mu = mask[&u];
        if mu == full {
            return Some(u);
        }
        let d = dist[&u] + 1;
        for &w in g.neighbors(u) {
            let w = w as usize;
            match dist.get(&w).copied() {
                Some(dw) if d > dw => {}
                Some(dw) if d == dw => {
                    let mw = mask.get_mut(&w).expect("mask set with dist");
                    let merged = *mw | mu;
                    if merged != *mw {
                        *mw = merged;
                        queue.push_back(w);
                    }
                }
                _ => {
                    dist.insert(w, d);
                    mask.insert(w, mu);
                    queue.push_back(w);
                }
            }
        }
    }
    None
}

fn bfs_distances(g: &ItemGraph, source: usize) -> HashMap<usize, u32> {
    let mut dist = HashMap::from([(source, 0u32)]);
    let mut queue = VecDeque::from([source]);
    while let Some(u) = queue.pop_front() {
        let d = dist[&u] + 1;
        for &w in g.neighbors(u) {
            dist.entry(w as usize).or_insert_with(|| {
                queue.push_back(w as usize);
                d
            });
        }
    }
    dist
}

/// Root for seeds whose waves cross on an edge instead of meeting at a node:
/// the node minimizing total seed distance, then maximum distance, then id.
fn median_root(g: &ItemGraph, seeds: &[usize]) -> usize {
    let per_seed: Vec<HashMap<usize, u32>> = seeds.iter().map(|&s| bfs_distances(g, s)).collect();
    let mut best: Option<((u64, u32, usize), usize)> = None;
    for &v in per_seed[0].keys() {
        let mut sum = 0u64;
        let mut max = 0u32;
        for d in &per_seed {
            let dv = d[&v];
            sum += dv as u64;
            max = max.max(dv);
        }
        let key = (sum, max, v);
        if best.is_none_or(|(b, _)| key < b) {
            best = Some((key, v));
        }
    }
    best.expect("seed component is non-empty").1
}

/// BFS tree from `root`, then each seed walks parents back to the root.
fn backtrack_to_root(g: &ItemGraph, root: usize, seeds: &[usize], out: &mut BTreeSet<usize>) {
    let mut parent: HashMap<usize, usize> = HashMap::from([(root, usize::MAX)]);
    let mut missing = seeds.iter().filter(|&&s| s != root).count();
    let mut queue = VecDeque::from([root]);
    while let Some(u) = queue.pop_front() {
        if missing == 0 {
            break;
        }
        for &w in g.neighbors(u) {
            let w = w as usize;
            if let std::collections::hash_map::Entry::Vacant(e) = parent.entry(w) {
                e.insert(u);
                if seeds.binary_search(&w).is_ok() {
                    missing -= 1;
                }
                queue.push_back(w);
            }
        }
    }
    for &s in seeds {
        let mut x = s;
        loop {
            out.insert(x);
            if x == root {
                break;
            }
            x = parent[&x];
        }
    }
}

/// Anchor-connecting subgraph. Anchors in different connected components are
/// connected per component and the pieces are returned together.
pub fn acs(g: &ItemGraph, anchors: &[usize]) -> Result<Subgraph> {
    let seeds = normalize_anchors(g, anchors)?;
    let groups = group_by_component(g, &seeds);
    let mut nodes = BTreeSet::new();
    for group in &groups {
        let root = collision_root(g, group).unwrap_or_else(|| median_root(g, group));
        backtrack_to_root(g, root, group, &mut nodes);
    }
    Ok(Subgraph {
        nodes: nodes.into_iter().collect(),
        anchors: seeds,
        contains_anchors: true,
        components: groups.len(),
        phi: None,
    })
}

/// Mean relevance `(F + u * sentinel) / n` held as its parts: the finite
/// score sum `F`, the unrelated count `u` and the size `n`. Comparisons are
/// exact in the sentinel's limit, so `u / n` decides first and the finite
/// mean `F / n` second.
#[derive(Debug, Clone, Copy)]
struct MeanTracker {
    sum: f64,
    unrelated: usize,
    size: usize,
}

/// Change of the mean between two trackers, split the same way.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Gain {
    /// Decrease of the unrelated share `u / n`.
    sentinel: f64,
    /// Increase of the finite mean `F / n`.
    finite: f64,
}

/// Improvements of the finite mean below this are rounding noise.
const GAIN_EPS: f64 = 1e-12;

impl Gain {
    fn is_positive(&self) -> bool {
        self.sentinel > 0.0 || (self.sentinel == 0.0 && self.finite > GAIN_EPS)
    }

    fn cmp(&self, other: &Gain) -> std::cmp::Ordering {
        self.sentinel
            .total_cmp(&other.sentinel)
            .then(self.finite.total_cmp(&other.finite))
    }
}

impl MeanTracker {
    fn phi(&self) -> f64 {
        (self.sum + self.unrelated as f64 * NEG_INF_RELEVANCE) / self.size as f64
    }

    fn share(&self) -> f64 {
        self.unrelated as f64 / self.size as f64
    }

    fn finite_mean(&self) -> f64 {
        self.sum / self.size as f64
    }

    fn gain_adding(&self, r: f64) -> Gain {
        let n = self.size as f64;
        Gain {
            sentinel: self.share() - self.unrelated as f64 / (n + 1.0),
            finite: (r - self.finite_mean()) / (n + 1.0),
        }
    }

    /// Requires `size > 1`.
    fn gain_removing(&self, r: Relevance) -> Gain {
        let n = self.size as f64;
        match r {
            Relevance::Score(r) => Gain {
                sentinel: self.share() - self.unrelated as f64 / (n - 1.0),
                finite: (self.finite_mean() - r) / (n - 1.0),
            },
            Relevance::Unrelated => Gain {
                sentinel: self.share() - (self.unrelated - 1) as f64 / (n - 1.0),
                finite: self.finite_mean() / (n - 1.0),
            },
        }
    }
}

struct RelevanceCache<'a, O: Observation + ?Sized> {
    store: &'a ModalityStore,
    obs: &'a O,
    query: usize,
    memo: HashMap<usize, Relevance>,
}

impl<O: Observation + ?Sized> RelevanceCache<'_, O> {
    fn get(&mut self, v: usize) -> Relevance {
        *self
            .memo
            .entry(v)
            .or_insert_with(|| relevance(self.store, self.obs, self.query, v))
    }

    fn track(&mut self, nodes: &BTreeSet<usize>) -> MeanTracker {
        let mut t = MeanTracker {
            sum: 0.0,
            unrelated: 0,
            size: nodes.len(),
        };
        for &v in nodes {
            match self.get(v) {
                Relevance::Score(r) => t.sum += r,
                Relevance::Unrelated => t.unrelated += 1,
            }
        }
        t
    }
}

/// Greedy refinement of the ACS output for query `i`, at most `t` moves.
pub fn mage(
    g: &ItemGraph,
    store: &ModalityStore,
    obs: &(impl Observation + ?Sized),
    i: usize,
    anchors: &[usize],
    t: usize,
) -> Result<MageOutcome> {
    let mut initial = acs(g, anchors)?;
    let mut cache = RelevanceCache {
        store,
        obs,
        query: i,
        memo: HashMap::new(),
    };
    let mut set: BTreeSet<usize> = initial.nodes.iter().copied().collect();
    let mut mean = cache.track(&set);
    initial.phi = Some(mean.phi());
    let anchor_set: BTreeSet<usize> = initial.anchors.iter().copied().collect();
    let mut moves = Vec::new();

    for _ in 0..t {
        // best boundary addition; unrelated candidates and the query are never added
        let mut add: Option<(Gain, usize)> = None;
        let boundary: BTreeSet<usize> = set
            .iter()
            .flat_map(|&u| g.neighbors(u).iter().map(|&w| w as usize))
            .filter(|&w| w != i && !set.contains(&w))
            .collect();
        for c in boundary {
            let Relevance::Score(r) = cache.get(c) else {
                continue;
            };
            let gain = mean.gain_adding(r);
            if add.is_none_or(|(best, _)| gain.cmp(&best).is_gt()) {
                add = Some((gain, c));
            }
        }
        let add = add.filter(|a| a.0.is_positive());

        // best non-bridging removal; candidates ranked by gain, checked lazily
        let mut remove: Option<(Gain, usize)> = None;
        if mean.size > 1 {
            let pieces = g.induced_component_count(&set.iter().copied().collect::<Vec<_>>());
            let mut candidates: Vec<(Gain, usize)> = set
                .iter()
                .filter(|u| !anchor_set.contains(u))
                .map(|&u| (mean.gain_removing(cache.get(u)), u))
                .collect();
            candidates.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
            for (gain, u) in candidates {
                if !gain.is_positive() {
                    break;
                }
                let rest: Vec<usize> = set.iter().copied().filter(|&x| x != u).collect();
                if g.induced_component_count(&rest) <= pieces {
                    remove = Some((gain, u));
                    break;
                }
            }
        }

        let take_add = match (add, remove) {
            (None, None) => break,
            (Some(_), None) => true,
            (None, Some(_)) => false,
            (Some(a), Some(r)) => a.0.cmp(&r.0).is_ge(),
        };
        if take_add {
            let c = add.expect("checked above").1;
            set.insert(c);
            mean = cache.track(&set);
            moves.push(Move::Add { node: c, phi: mean.phi() });
        } else {
            let u = remove.expect("checked above").1;
            set.remove(&u);
            mean = cache.track(&set);
            moves.push(Move::Remove { node: u, phi: mean.phi() });
        }
    }

    let subgraph = Subgraph {
        nodes: set.into_iter().collect(),
        anchors: initial.anchors.clone(),
        contains_anchors: true,
        components: initial.components,
        phi: Some(mean.phi()),
    };
    Ok(MageOutcome {
        initial,
        subgraph,
        moves,
    })
}

/// Anchors plus refined subgraph for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct Retrieval {
    pub anchors: AnchorSet,
    pub outcome: MageOutcome,
}

impl Retrieval {
    pub fn subgraph(&self) -> &Subgraph {
        &self.outcome.subgraph
    }

    /// Query first, then the subgraph nodes in ascending order without the query.
    pub fn tokens(&self) -> Vec<usize> {
        let q = self.anchors.query;
        std::iter::once(q)
            .chain(self.outcome.subgraph.nodes.iter().copied().filter(|&v| v != q))
            .collect()
    }
}

pub fn retrieve(
    g: &ItemGraph,
    store: &ModalityStore,
    obs: &(impl Observation + ?Sized),
    i: usize,
    cfg: &RetrievalConfig,
) -> Result<Retrieval> {
    let anchors = query_anchors(store, obs, i, cfg)?;
    if anchors.anchors.is_empty() {
        // nothing else observes the query's modalities; the query stands alone
        let empty = Subgraph {
            nodes: Vec::new(),
            anchors: Vec::new(),
            contains_anchors: true,
            components: 0,
            phi: None,
        };
        return Ok(Retrieval {
            anchors,
            outcome: MageOutcome {
                initial: empty.clone(),
                subgraph: empty,
                moves: Vec::new(),
            },
        });
    }
    let outcome = mage(g, store, obs, i, &anchors.anchors, cfg.t)?;
    Ok(Retrieval { anchors, outcome })
}

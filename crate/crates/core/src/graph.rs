//! Item co-interaction graph.
//!
//! Items are adjacent when at least one user interacted with both. The graph
//! is stored in compressed offset/target form with sorted, duplicate-free
//! neighbor lists and is immutable once built.

use std::collections::{BTreeMap, VecDeque};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

const CACHE_MAGIC: &[u8; 4] = b"GGR1";
const CACHE_VERSION: u32 = 1;

/// Default cap on items per user; users above it are dropped before projection.
pub const DEFAULT_MAX_USER_ITEMS: usize = 512;

/// Deduplicated user-item interactions with dense ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionLog {
    entries: Vec<(u32, u32)>,
    n_users: usize,
    n_items: usize,
}

/// Mapping from dense indices back to the external ids found in the input.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdMap {
    pub users: Vec<u64>,
    pub items: Vec<u64>,
}

impl InteractionLog {
    /// Builds a log from already-dense ids. Duplicate pairs are removed.
    pub fn from_dense(entries: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut out = Vec::new();
        let (mut n_users, mut n_items) = (0usize, 0usize);
        for (u, i) in entries {
            let uu = u32::try_from(u).map_err(|_| Error::IdOverflow(u as u64))?;
            let ii = u32::try_from(i).map_err(|_| Error::IdOverflow(i as u64))?;
            n_users = n_users.max(u + 1);
            n_items = n_items.max(i + 1);
            out.push((uu, ii));
        }
        if out.is_empty() {
            return Err(Error::EmptyLog);
        }
        out.sort_unstable();
        out.dedup();
        Ok(Self {
            entries: out,
            n_users,
            n_items,
        })
    }

    /// Remaps arbitrary external ids to dense indices (ascending external id order).
    pub fn from_external(raw: &[(u64, u64)]) -> Result<(Self, IdMap)> {
        if raw.is_empty() {
            return Err(Error::EmptyLog);
        }
        let mut users: Vec<u64> = raw.iter().map(|&(u, _)| u).collect();
        let mut items: Vec<u64> = raw.iter().map(|&(_, i)| i).collect();
        users.sort_unstable();
        users.dedup();
        items.sort_unstable();
        items.dedup();
        if users.len() > u32::MAX as usize {
            return Err(Error::IdOverflow(users.len() as u64));
        }
        if items.len() > u32::MAX as usize {
            return Err(Error::IdOverflow(items.len() as u64));
        }
        let dense = raw.iter().map(|(u, i)| {
            (
                users.binary_search(u).expect("user id present"),
                items.binary_search(i).expect("item id present"),
            )
        });
        let log = Self::from_dense(dense)?;
        Ok((log, IdMap { users, items }))
    }

    pub fn entries(&self) -> &[(u32, u32)] {
        &self.entries
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }
}

/// Reads `user_id<TAB>item_id` lines. Blank lines are skipped.
pub fn read_interactions_tsv(path: &Path) -> Result<Vec<(u64, u64)>> {
    let reader = BufReader::new(File::open(path)?);
    let shown = path.display().to_string();
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: &str| Error::Parse {
            path: shown.clone(),
            line: idx + 1,
            msg: msg.to_string(),
        };
        let mut cols = line.split('\t');
        let (Some(u), Some(i), None) = (cols.next(), cols.next(), cols.next()) else {
            return Err(parse_err("expected two tab-separated columns"));
        };
        let u = u.trim().parse::<u64>().map_err(|_| parse_err("bad user id"))?;
        let i = i.trim().parse::<u64>().map_err(|_| parse_err("bad item id"))?;
        out.push((u, i));
    }
    Ok(out)
}

/// Options for the user-item to item-item projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProjectionOptions {
    /// Users with more distinct items than this are dropped.
    pub max_user_items: usize,
    /// Users with fewer distinct items than this are dropped.
    pub min_degree: usize,
}

impl Default for ProjectionOptions {
    fn default() -> Self {
        Self {
            max_user_items: DEFAULT_MAX_USER_ITEMS,
            min_degree: 0,
        }
    }
}

/// Undirected simple graph over items.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ItemGraph {
    offsets: Vec<u64>,
    targets: Vec<u32>,
}

impl ItemGraph {
    /// Builds from an undirected edge list. Self-loops and repeated edges are dropped.
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        if n > u32::MAX as usize {
            return Err(Error::IdOverflow(n as u64));
        }
        let mut adj: Vec<Vec<u32>> = vec![Vec::new(); n];
        for (a, b) in edges {
            for v in [a, b] {
                if v >= n {
                    return Err(Error::NodeOutOfRange { node: v, n });
                }
            }
            if a == b {
                continue;
            }
            adj[a].push(b as u32);
            adj[b].push(a as u32);
        }
        Ok(Self::from_lists(adj))
    }

    fn from_lists(mut adj: Vec<Vec<u32>>) -> Self {
        let mut offsets = Vec::with_capacity(adj.len() + 1);
        let mut targets = Vec::new();
        offsets.push(0u64);
        for list in adj.iter_mut() {
            list.sort_unstable();
            list.dedup();
            targets.extend_from_slice(list);
            offsets.push(targets.len() as u64);
        }
        Self { offsets, targets }
    }

    pub fn n(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Number of undirected edges.
    pub fn edge_count(&self) -> usize {
        self.targets.len() / 2
    }

    pub fn neighbors(&self, v: usize) -> &[u32] {
        &self.targets[self.offsets[v] as usize..self.offsets[v + 1] as usize]
    }

    pub fn degree(&self, v: usize) -> usize {
        (self.offsets[v + 1] - self.offsets[v]) as usize
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.neighbors(a).binary_search(&(b as u32)).is_ok()
    }

    pub fn offsets(&self) -> &[u64] {
        &self.offsets
    }

    pub fn targets(&self) -> &[u32] {
        &self.targets
    }

    fn check_node(&self, v: usize) -> Result<()> {
        if v >= self.n() {
            Err(Error::NodeOutOfRange { node: v, n: self.n() })
        } else {
            Ok(())
        }
    }

    /// Nodes at BFS distance 1..=hops from `v`, ascending.
    pub fn k_hop_neighborhood(&self, v: usize, hops: usize) -> Result<Vec<usize>> {
        self.check_node(v)?;
        let mut dist: BTreeMap<usize, usize> = BTreeMap::new();
        dist.insert(v, 0);
        let mut queue = VecDeque::from([v]);
        while let Some(u) = queue.pop_front() {
            let du = dist[&u];
            if du == hops {
                continue;
            }
            for &w in self.neighbors(u) {
                let w = w as usize;
                if let std::collections::btree_map::Entry::Vacant(e) = dist.entry(w) {
                    e.insert(du + 1);
                    queue.push_back(w);
                }
            }
        }
        Ok(dist.into_keys().filter(|&u| u != v).collect())
    }

    /// Whether the subgraph induced on `nodes` is connected.
    pub fn is_connected_subset(&self, nodes: &[usize]) -> Result<bool> {
        if nodes.is_empty() {
            return Err(Error::EmptySet);
        }
        for &v in nodes {
            self.check_node(v)?;
        }
        Ok(self.induced_component_count(nodes) == 1)
    }

    /// Number of connected components of the subgraph induced on `nodes`.
    /// Duplicates are ignored; assumes every node is in range.
    pub fn induced_component_count(&self, nodes: &[usize]) -> usize {
        let mut members: Vec<usize> = nodes.to_vec();
        members.sort_unstable();
        members.dedup();
        let mut seen = vec![false; members.len()];
        let mut count = 0;
        let mut stack = Vec::new();
        for start in 0..members.len() {
            if seen[start] {
                continue;
            }
            count += 1;
            seen[start] = true;
            stack.push(members[start]);
            while let Some(u) = stack.pop() {
                for &w in self.neighbors(u) {
                    if let Ok(pos) = members.binary_search(&(w as usize)) {
                        if !seen[pos] {
                            seen[pos] = true;
                            stack.push(members[pos]);
                        }
                    }
                }
            }
        }
        count
    }

    /// Dense 0/1 adjacency of the subgraph induced on the ordered list `nodes`.
    pub fn induced_adjacency(&self, nodes: &[usize]) -> Result<Array2<f64>> {
        let mut sorted: Vec<usize> = nodes.to_vec();
        sorted.sort_unstable();
        for w in sorted.windows(2) {
            if w[0] == w[1] {
                return Err(Error::DuplicateNode(w[0]));
            }
        }
        for &v in nodes {
            self.check_node(v)?;
        }
        let k = nodes.len();
        let mut m = Array2::zeros((k, k));
        for a in 0..k {
            for b in (a + 1)..k {
                if self.has_edge(nodes[a], nodes[b]) {
                    m[[a, b]] = 1.0;
                    m[[b, a]] = 1.0;
                }
            }
        }
        Ok(m)
    }

    /// Connected-component label per node; labels are assigned in order of
    /// the lowest node id in each component.
    pub fn component_labels(&self) -> Vec<usize> {
        let n = self.n();
        let mut label = vec![usize::MAX; n];
        let mut next = 0;
        let mut queue = VecDeque::new();
        for s in 0..n {
            if label[s] != usize::MAX {
                continue;
            }
            label[s] = next;
            queue.push_back(s);
            while let Some(u) = queue.pop_front() {
                for &w in self.neighbors(u) {
                    let w = w as usize;
                    if label[w] == usize::MAX {
                        label[w] = next;
                        queue.push_back(w);
                    }
                }
            }
            next += 1;
        }
        label
    }

    pub fn write_cache(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(CACHE_MAGIC)?;
        w.write_all(&CACHE_VERSION.to_le_bytes())?;
        w.write_all(&(self.n() as u64).to_le_bytes())?;
        w.write_all(&(self.targets.len() as u64).to_le_bytes())?;
        for &o in &self.offsets {
            w.write_all(&o.to_le_bytes())?;
        }
        for &t in &self.targets {
            w.write_all(&t.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_cache(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CACHE_MAGIC {
            return Err(Error::Format("graph cache: bad magic".into()));
        }
        let version = read_u32(r)?;
        if version != CACHE_VERSION {
            return Err(Error::Format(format!("graph cache: unsupported version {version}")));
        }
        let n = read_u64(r)? as usize;
        let m = read_u64(r)? as usize;
        let mut offsets = Vec::with_capacity(n + 1);
        for _ in 0..=n {
            offsets.push(read_u64(r)?);
        }
        let mut targets = Vec::with_capacity(m);
        for _ in 0..m {
            targets.push(read_u32(r)?);
        }
        if offsets.first() != Some(&0) || offsets.last() != Some(&(m as u64)) {
            return Err(Error::Format("graph cache: inconsistent offsets".into()));
        }
        if offsets.windows(2).any(|w| w[0] > w[1]) || targets.iter().any(|&t| t as usize >= n) {
            return Err(Error::Format("graph cache: corrupt adjacency".into()));
        }
        Ok(Self { offsets, targets })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_cache(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_cache(&mut BufReader::new(File::open(path)?))
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Items adjacent iff some user interacted with both.
pub fn project_item_graph(log: &InteractionLog, opts: ProjectionOptions) -> Result<ItemGraph> {
    if log.entries.is_empty() {
        return Err(Error::EmptyLog);
    }
    let n = log.n_items;
    if n > u32::MAX as usize {
        return Err(Error::IdOverflow(n as u64));
    }
    let mut adj: Vec<Vec<u32>> = vec![Vec::new(); n];
    // entries are sorted by (user, item), so each user's items are contiguous
    for chunk in log.entries.chunk_by(|a, b| a.0 == b.0) {
        if chunk.len() > opts.max_user_items || chunk.len() < opts.min_degree {
            continue;
        }
        for (x, &(_, a)) in chunk.iter().enumerate() {
            for &(_, b) in &chunk[x + 1..] {
                adj[a as usize].push(b);
                adj[b as usize].push(a);
            }
        }
    }
    Ok(ItemGraph::from_lists(adj))
}

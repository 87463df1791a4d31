//! Exact structure search over the score cache.
//!
//! `most_probable_dag` finds the global optimum by dynamic programming
//! over node subsets: per-child best-entry tables are materialized by a
//! subset-lattice sweep, then an order DP composes them. `brute_force_dag`
//! enumerates every acyclic assignment for small k and applies the same
//! tie rule, serving as an oracle for the DP.
//!
//! Ties are broken deterministically: fewer total parents first, then the
//! lexicographically smallest parent-mask vector by child index.

use crate::data::adjacency_to_csv;
use crate::scalar::{cast, Scalar};
use crate::score::{CacheEntry, ParentMask, ScoreCache, ScoreKind};
use std::collections::BTreeSet;
use std::io::Read;
use thiserror::Error;

/// Subset-DP memory bound: tables grow as k·2^k.
pub const MAX_SEARCH_NODES: usize = 25;
/// Brute force enumerates every assignment; keep it tiny.
pub const MAX_BRUTE_FORCE_NODES: usize = 5;
/// Backtrack cap on tie paths; beyond this the first (deterministic)
/// candidates decide.
const MAX_TIE_PATHS: usize = 4096;

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("child `{0}` has no cache entry; the cache is incomplete")]
    IncompleteCache(String),
    #[error("{k} nodes exceed the {limit}-node limit for this search")]
    KTooLarge { k: usize, limit: usize },
    #[error("adjacency matrix contains a cycle")]
    CyclicDag,
    #[error("bad adjacency matrix: {0}")]
    BadMatrix(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Directed acyclic graph over named nodes; `adjacency[child][parent]`.
/// Construction validates shape, zero diagonal, and acyclicity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dag {
    adjacency: Vec<Vec<bool>>,
    node_names: Vec<String>,
}

/// Acyclicity by repeated elimination of nodes whose remaining parent set
/// is empty (Kahn over the parent relation).
pub fn is_acyclic(adjacency: &[Vec<bool>]) -> bool {
    let k = adjacency.len();
    let mut removed = vec![false; k];
    let mut remaining = k;
    loop {
        let mut progressed = false;
        for v in 0..k {
            if removed[v] {
                continue;
            }
            let no_live_parent = (0..k).all(|p| !adjacency[v][p] || removed[p]);
            if no_live_parent {
                removed[v] = true;
                remaining -= 1;
                progressed = true;
            }
        }
        if remaining == 0 {
            return true;
        }
        if !progressed {
            return false;
        }
    }
}

fn masks_acyclic(masks: &[ParentMask]) -> bool {
    let k = masks.len();
    let full: u32 = if k == 32 { !0 } else { (1u32 << k) - 1 };
    let mut removed: u32 = 0;
    loop {
        let mut progressed = false;
        for (v, &m) in masks.iter().enumerate() {
            if removed & (1 << v) == 0 && m & !removed == 0 {
                removed |= 1 << v;
                progressed = true;
            }
        }
        if removed == full {
            return true;
        }
        if !progressed {
            return false;
        }
    }
}

impl Dag {
    pub fn new(adjacency: Vec<Vec<bool>>, node_names: Vec<String>) -> Result<Self, SearchError> {
        let k = node_names.len();
        if adjacency.len() != k || adjacency.iter().any(|row| row.len() != k) {
            return Err(SearchError::BadMatrix(format!(
                "adjacency must be {k}×{k}"
            )));
        }
        if (0..k).any(|i| adjacency[i][i]) {
            return Err(SearchError::BadMatrix("nonzero diagonal".into()));
        }
        if !is_acyclic(&adjacency) {
            return Err(SearchError::CyclicDag);
        }
        Ok(Dag {
            adjacency,
            node_names,
        })
    }

    pub fn empty(node_names: Vec<String>) -> Self {
        let k = node_names.len();
        Dag {
            adjacency: vec![vec![false; k]; k],
            node_names,
        }
    }

    pub fn from_parent_masks(
        masks: &[ParentMask],
        node_names: Vec<String>,
    ) -> Result<Self, SearchError> {
        let k = node_names.len();
        let adjacency = (0..k)
            .map(|child| (0..k).map(|p| masks[child] & (1 << p) != 0).collect())
            .collect();
        Dag::new(adjacency, node_names)
    }

    pub fn k(&self) -> usize {
        self.node_names.len()
    }

    pub fn node_names(&self) -> &[String] {
        &self.node_names
    }

    pub fn has_arc(&self, child: usize, parent: usize) -> bool {
        self.adjacency[child][parent]
    }

    pub fn parents_of(&self, child: usize) -> Vec<usize> {
        (0..self.k()).filter(|&p| self.adjacency[child][p]).collect()
    }

    pub fn parent_mask(&self, child: usize) -> ParentMask {
        self.parents_of(child).iter().fold(0, |m, &p| m | (1 << p))
    }

    pub fn arc_count(&self) -> usize {
        self.adjacency
            .iter()
            .map(|row| row.iter().filter(|&&b| b).count())
            .sum()
    }

    /// Deterministic topological order: smallest-index source first.
    pub fn topological_order(&self) -> Vec<usize> {
        let k = self.k();
        let mut placed = vec![false; k];
        let mut order = Vec::with_capacity(k);
        while order.len() < k {
            for v in 0..k {
                if placed[v] {
                    continue;
                }
                if (0..k).all(|p| !self.adjacency[v][p] || placed[p]) {
                    placed[v] = true;
                    order.push(v);
                    break;
                }
            }
        }
        order
    }

    /// Adjacency CSV with a header row/column of node names, row = child.
    pub fn to_csv(&self) -> String {
        adjacency_to_csv(&self.node_names, |i, j| self.adjacency[i][j])
    }

    pub fn from_csv<R: Read>(reader: R) -> Result<Dag, SearchError> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers: Vec<String> = rdr
            .headers()?
            .iter()
            .skip(1)
            .map(|h| h.trim().to_string())
            .collect();
        let k = headers.len();
        let mut adjacency = vec![vec![false; k]; k];
        let mut names_in_rows = Vec::new();
        for record in rdr.records() {
            let r = record?;
            if r.len() != k + 1 {
                return Err(SearchError::BadMatrix(format!(
                    "row has {} fields, expected {}",
                    r.len(),
                    k + 1
                )));
            }
            let child_name = r[0].trim().to_string();
            let child = headers
                .iter()
                .position(|h| *h == child_name)
                .ok_or_else(|| SearchError::BadMatrix(format!("unknown row name `{child_name}`")))?;
            names_in_rows.push(child_name);
            for j in 0..k {
                adjacency[child][j] = match r[j + 1].trim() {
                    "0" => false,
                    "1" => true,
                    other => {
                        return Err(SearchError::BadMatrix(format!(
                            "cell must be 0 or 1, found `{other}`"
                        )))
                    }
                };
            }
        }
        if names_in_rows.len() != k {
            return Err(SearchError::BadMatrix(format!(
                "expected {k} rows, found {}",
                names_in_rows.len()
            )));
        }
        Dag::new(adjacency, headers)
    }

    /// GraphViz digraph with arcs drawn parent → child.
    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph dag {\n");
        for name in &self.node_names {
            out.push_str(&format!("  \"{name}\";\n"));
        }
        for child in 0..self.k() {
            for parent in 0..self.k() {
                if self.adjacency[child][parent] {
                    out.push_str(&format!(
                        "  \"{}\" -> \"{}\";\n",
                        self.node_names[parent], self.node_names[child]
                    ));
                }
            }
        }
        out.push_str("}\n");
        out
    }
}

/// (objective, arc count) pairs ordered lexicographically; the DP
/// minimizes them so fewer-parent optima win ties.
#[derive(Debug, Clone, Copy, PartialEq)]
struct DpValue<T> {
    obj: T,
    arcs: u32,
}

impl<T: Scalar> DpValue<T> {
    fn infinity() -> Self {
        DpValue {
            obj: T::infinity(),
            arcs: u32::MAX,
        }
    }

    fn add(&self, other: &DpValue<T>) -> DpValue<T> {
        DpValue {
            obj: self.obj + other.obj,
            arcs: self.arcs.saturating_add(other.arcs),
        }
    }

    fn better_than(&self, other: &DpValue<T>) -> bool {
        if self.obj != other.obj {
            return self.obj < other.obj;
        }
        self.arcs < other.arcs
    }
}

fn check_cache<T: Scalar>(cache: &ScoreCache<T>, limit: usize) -> Result<usize, SearchError> {
    let k = cache.k();
    if k > limit {
        return Err(SearchError::KTooLarge { k, limit });
    }
    for (child, entries) in cache.entries.iter().enumerate() {
        if entries.is_empty() {
            return Err(SearchError::IncompleteCache(cache.node_names[child].clone()));
        }
    }
    Ok(k)
}

/// Removes bit `v` from `mask` and packs the higher bits down, mapping a
/// subset of all nodes onto the (k−1)-bit "others of v" space.
#[inline]
fn compress_mask(mask: u32, v: usize) -> u32 {
    let lower = mask & ((1u32 << v) - 1);
    let upper = (mask >> (v + 1)) << v;
    lower | upper
}

/// Tie tolerance for near-equal objective sums. Score-equivalent DAGs
/// produce totals that agree mathematically but not bitwise (their node
/// likelihoods come from different fits), so candidate paths within this
/// band are all collected and re-ranked exactly afterwards.
fn tie_eps<T: Scalar>(scale: T) -> T {
    let rel = cast::<T>(1e-9).max(T::epsilon() * cast::<T>(16.0));
    rel * (T::one() + scale.abs())
}

/// Canonical entry for child `v` among parents ⊆ `avail`: minimal
/// (objective, parent count, bitmask).
fn canonical_entry<'a, T: Scalar>(
    entries: &'a [CacheEntry<T>],
    avail: u32,
    kind: ScoreKind,
) -> Option<&'a CacheEntry<T>> {
    let mut best: Option<&CacheEntry<T>> = None;
    for e in entries {
        if e.parents & !avail != 0 {
            continue;
        }
        best = match best {
            None => Some(e),
            Some(b) => {
                let eo = e.objective(kind);
                let bo = b.objective(kind);
                let better = eo < bo
                    || (eo == bo
                        && (e.n_parents < b.n_parents
                            || (e.n_parents == b.n_parents && e.parents < b.parents)));
                if better {
                    Some(e)
                } else {
                    Some(b)
                }
            }
        };
    }
    best
}

fn total_score<T: Scalar>(
    cache: &ScoreCache<T>,
    masks: &[ParentMask],
    kind: ScoreKind,
) -> T {
    let mut total = T::zero();
    for (child, &mask) in masks.iter().enumerate() {
        let entry = cache.entries[child]
            .iter()
            .find(|e| e.parents == mask)
            .expect("assignment uses cache entries");
        total = total + entry.score(kind);
    }
    total
}

/// The shared ranking key: objective summed in child-index order, then
/// total arc count, then the parent-mask vector lexicographically. Both
/// search routes rank candidates with exactly this computation.
fn assignment_key<T: Scalar>(
    cache: &ScoreCache<T>,
    masks: &[ParentMask],
    kind: ScoreKind,
) -> (T, u32) {
    let mut obj = T::zero();
    let mut arcs = 0u32;
    for (child, &mask) in masks.iter().enumerate() {
        let entry = cache.entries[child]
            .iter()
            .find(|e| e.parents == mask)
            .expect("assignment uses cache entries");
        obj = obj + entry.objective(kind);
        arcs += entry.n_parents as u32;
    }
    (obj, arcs)
}

fn key_better<T: Scalar>(
    a: (T, u32),
    a_masks: &[ParentMask],
    b: (T, u32),
    b_masks: &[ParentMask],
) -> bool {
    if a.0 != b.0 {
        return a.0 < b.0;
    }
    if a.1 != b.1 {
        return a.1 < b.1;
    }
    a_masks < b_masks
}

/// Exact optimum DAG for the chosen score over all DAGs assembled from
/// cache entries. Returns the DAG and its total score (a sum of entry
/// scores in child-index order).
pub fn most_probable_dag<T: Scalar>(
    cache: &ScoreCache<T>,
    kind: ScoreKind,
) -> Result<(Dag, T), SearchError> {
    let k = check_cache(cache, MAX_SEARCH_NODES)?;
    if k == 1 {
        let entry = canonical_entry(&cache.entries[0], 0, kind).expect("nonempty");
        let dag = Dag::empty(cache.node_names.clone());
        return Ok((dag, entry.score(kind)));
    }

    // Per-child best tables over subsets of the other nodes.
    let sub_size = 1usize << (k - 1);
    let mut best: Vec<Vec<DpValue<T>>> = Vec::with_capacity(k);
    for child in 0..k {
        let mut table = vec![DpValue::infinity(); sub_size];
        for e in &cache.entries[child] {
            let cm = compress_mask(e.parents, child) as usize;
            let val = DpValue {
                obj: e.objective(kind),
                arcs: e.n_parents as u32,
            };
            if val.better_than(&table[cm]) {
                table[cm] = val;
            }
        }
        // Subset-lattice sweep: propagate each value to all supersets.
        for bit in 0..k - 1 {
            let b = 1usize << bit;
            for s in 0..sub_size {
                if s & b != 0 {
                    let from = table[s ^ b];
                    if from.better_than(&table[s]) {
                        table[s] = from;
                    }
                }
            }
        }
        best.push(table);
    }

    // Order DP: F(S) = min over v ∈ S of F(S∖v) + best(v, S∖v).
    let full = 1usize << k;
    let mut f = vec![DpValue::infinity(); full];
    f[0] = DpValue {
        obj: T::zero(),
        arcs: 0,
    };
    for s in 1..full {
        let mut acc = DpValue::infinity();
        for v in 0..k {
            if s & (1 << v) == 0 {
                continue;
            }
            let without = s & !(1 << v);
            let cand = f[without].add(&best[v][compress_mask(without as u32, v) as usize]);
            if cand.better_than(&acc) {
                acc = cand;
            }
        }
        f[s] = acc;
    }

    // Backtrack: collect every placement whose objective lies within the
    // tie band of the optimum (capped), then re-rank the distinct
    // assignments exactly, with the same key brute force uses.
    let mut found: BTreeSet<Vec<ParentMask>> = BTreeSet::new();
    let mut paths = 0usize;
    let mut masks = vec![0 as ParentMask; k];
    let eps = tie_eps(f[full - 1].obj);
    backtrack(
        cache,
        kind,
        &best,
        &f,
        (full - 1) as u32,
        eps,
        &mut masks,
        &mut found,
        &mut paths,
    );
    let mut winner: Option<(Vec<ParentMask>, (T, u32))> = None;
    for masks in found {
        let key = assignment_key(cache, &masks, kind);
        winner = match winner {
            None => Some((masks, key)),
            Some((bm, bk)) => {
                if key_better(key, &masks, bk, &bm) {
                    Some((masks, key))
                } else {
                    Some((bm, bk))
                }
            }
        };
    }
    let (masks, _) = winner.expect("at least one optimal path");
    let total = total_score(cache, &masks, kind);
    let dag = Dag::from_parent_masks(&masks, cache.node_names.clone())
        .expect("DP assignments are acyclic by construction");
    Ok((dag, total))
}

#[allow(clippy::too_many_arguments)]
fn backtrack<T: Scalar>(
    cache: &ScoreCache<T>,
    kind: ScoreKind,
    best: &[Vec<DpValue<T>>],
    f: &[DpValue<T>],
    state: u32,
    eps: T,
    masks: &mut Vec<ParentMask>,
    found: &mut BTreeSet<Vec<ParentMask>>,
    paths: &mut usize,
) {
    if *paths >= MAX_TIE_PATHS {
        return;
    }
    if state == 0 {
        found.insert(masks.clone());
        *paths += 1;
        return;
    }
    let k = masks.len();
    let target = f[state as usize];
    for v in 0..k {
        if state & (1 << v) == 0 {
            continue;
        }
        let without = state & !(1 << v);
        let cand = f[without as usize].add(&best[v][compress_mask(without, v) as usize]);
        if cand.obj <= target.obj + eps {
            let entry =
                canonical_entry(&cache.entries[v], without, kind).expect("checked nonempty");
            masks[v] = entry.parents;
            backtrack(cache, kind, best, f, without, eps, masks, found, paths);
            masks[v] = 0;
        }
    }
}

/// Oracle: enumerates every acyclic assignment of cache entries (one per
/// child) and returns the optimum under the same tie rule as
/// [`most_probable_dag`].
pub fn brute_force_dag<T: Scalar>(
    cache: &ScoreCache<T>,
    kind: ScoreKind,
) -> Result<(Dag, T), SearchError> {
    let k = check_cache(cache, MAX_BRUTE_FORCE_NODES)?;
    let mut idx = vec![0usize; k];
    let mut best: Option<(Vec<ParentMask>, (T, u32))> = None;
    loop {
        let masks: Vec<ParentMask> = (0..k).map(|c| cache.entries[c][idx[c]].parents).collect();
        if masks_acyclic(&masks) {
            let key = assignment_key(cache, &masks, kind);
            let better = match &best {
                None => true,
                Some((bm, bk)) => key_better(key, &masks, *bk, bm),
            };
            if better {
                best = Some((masks, key));
            }
        }
        // Odometer over per-child entry indices.
        let mut pos = 0;
        loop {
            if pos == k {
                let (masks, _) = best.expect("empty parent sets are always acyclic");
                let total = total_score(cache, &masks, kind);
                let dag = Dag::from_parent_masks(&masks, cache.node_names.clone())
                    .expect("acyclicity filtered");
                return Ok((dag, total));
            }
            idx[pos] += 1;
            if idx[pos] < cache.entries[pos].len() {
                break;
            }
            idx[pos] = 0;
            pos += 1;
        }
    }
}

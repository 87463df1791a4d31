//! The decomposable score cache: every licit (child, parent set) pair up
//! to `max_parents`, scored by maximized log-likelihood, AIC, BIC and MDL.
//!
//! AIC, BIC and MDL are penalized negative log-likelihoods (losses,
//! smaller is better); mlik is the raw log-likelihood (a gain). Searches
//! must consult [`ScoreKind::is_loss`] — mixing the directions is the
//! classic bug in score-based structure learning.

use crate::data::{encode_design, validate_constraints, ConstraintSpec, ConstraintViolation, Dataset};
use crate::glm::{fit_node_robust, FamilySpec, GlmError};
use crate::scalar::{cast, Scalar};
use rayon::prelude::*;
use std::io::Read;
use thiserror::Error;

/// Parent sets are bitmasks over the node indices (k ≤ 31).
pub type ParentMask = u32;

pub const MAX_CACHE_NODES: usize = 31;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScoreKind {
    Mlik,
    Aic,
    Bic,
    Mdl,
}

impl ScoreKind {
    pub const ALL: [ScoreKind; 4] = [
        ScoreKind::Mlik,
        ScoreKind::Aic,
        ScoreKind::Bic,
        ScoreKind::Mdl,
    ];

    /// Losses are minimized; mlik is maximized.
    pub fn is_loss(&self) -> bool {
        !matches!(self, ScoreKind::Mlik)
    }

    pub fn parse(s: &str) -> Option<ScoreKind> {
        match s {
            "mlik" => Some(ScoreKind::Mlik),
            "aic" => Some(ScoreKind::Aic),
            "bic" => Some(ScoreKind::Bic),
            "mdl" => Some(ScoreKind::Mdl),
            _ => None,
        }
    }
}

impl std::fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ScoreKind::Mlik => "mlik",
            ScoreKind::Aic => "aic",
            ScoreKind::Bic => "bic",
            ScoreKind::Mdl => "mdl",
        };
        write!(f, "{s}")
    }
}

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("constraint violations: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    ConstraintConflict(Vec<ConstraintViolation>),
    #[error("node `{child}` with parents [{}] cannot be scored: {detail}", parents.join(", "))]
    Unfittable {
        child: String,
        parents: Vec<String>,
        detail: String,
    },
    #[error("score preconditions violated: {0}")]
    InvalidArgument(String),
    #[error("{0} nodes exceed the {MAX_CACHE_NODES}-node cache limit")]
    TooManyNodes(usize),
    #[error("malformed cache file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// The four scores of one node model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeScores<T> {
    pub mlik: T,
    pub aic: T,
    pub bic: T,
    pub mdl: T,
}

impl<T: Scalar> NodeScores<T> {
    pub fn zero() -> Self {
        NodeScores {
            mlik: T::zero(),
            aic: T::zero(),
            bic: T::zero(),
            mdl: T::zero(),
        }
    }

    pub fn get(&self, kind: ScoreKind) -> T {
        match kind {
            ScoreKind::Mlik => self.mlik,
            ScoreKind::Aic => self.aic,
            ScoreKind::Bic => self.bic,
            ScoreKind::Mdl => self.mdl,
        }
    }

    pub fn add(&self, other: &NodeScores<T>) -> NodeScores<T> {
        NodeScores {
            mlik: self.mlik + other.mlik,
            aic: self.aic + other.aic,
            bic: self.bic + other.bic,
            mdl: self.mdl + other.mdl,
        }
    }
}

/// Score formulas (natural logs):
/// mlik = ℓ, aic = −ℓ + 2d, bic = −ℓ + (d/2)·ln n,
/// mdl = bic + (1 + |parents|)·ln k.
pub fn node_scores<T: Scalar>(
    loglik: T,
    d: usize,
    n: usize,
    k: usize,
    n_parents: usize,
) -> Result<NodeScores<T>, CacheError> {
    if n < 1 || k < 1 || d < 1 {
        return Err(CacheError::InvalidArgument(format!(
            "need n ≥ 1, k ≥ 1, d ≥ 1 (got n = {n}, k = {k}, d = {d})"
        )));
    }
    let df = cast::<T>(d as f64);
    let ln_n = cast::<T>(n as f64).ln();
    let ln_k = cast::<T>(k as f64).ln();
    let aic = -loglik + cast::<T>(2.0) * df;
    let bic = -loglik + df / cast::<T>(2.0) * ln_n;
    let mdl = bic + cast::<T>((1 + n_parents) as f64) * ln_k;
    Ok(NodeScores {
        mlik: loglik,
        aic,
        bic,
        mdl,
    })
}

/// One licit (child, parent set) combination.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry<T> {
    pub child: usize,
    pub parents: ParentMask,
    pub loglik: T,
    pub d: usize,
    pub n_parents: usize,
    pub scores: NodeScores<T>,
    pub method: String,
}

impl<T: Scalar> CacheEntry<T> {
    pub fn score(&self, kind: ScoreKind) -> T {
        self.scores.get(kind)
    }

    /// Score transformed so that smaller is always better.
    pub fn objective(&self, kind: ScoreKind) -> T {
        if kind.is_loss() {
            self.score(kind)
        } else {
            -self.score(kind)
        }
    }
}

/// Node-level ban/retain constraints as bitmasks, derived from a
/// [`ConstraintSpec`] once adjustment columns are removed from the node set.
#[derive(Debug, Clone)]
pub struct NodeConstraints {
    pub k: usize,
    pub max_parents: usize,
    pub banned: Vec<ParentMask>,
    pub retained: Vec<ParentMask>,
}

impl NodeConstraints {
    pub fn unconstrained(k: usize, max_parents: usize) -> Self {
        NodeConstraints {
            k,
            max_parents,
            banned: vec![0; k],
            retained: vec![0; k],
        }
    }
}

/// Derives node constraints plus the node → dataset-column map. Runs
/// [`validate_constraints`] first and fails on any violation.
pub fn node_constraints<T: Scalar>(
    cs: &ConstraintSpec,
    ds: &Dataset<T>,
) -> Result<(NodeConstraints, Vec<usize>), CacheError> {
    let violations = validate_constraints(cs, ds);
    if !violations.is_empty() {
        return Err(CacheError::ConstraintConflict(violations));
    }
    let adjust_cols: Vec<usize> = cs
        .adjust
        .iter()
        .map(|name| ds.index_of(name).expect("validated adjust name"))
        .collect();
    let node_cols: Vec<usize> = (0..ds.k()).filter(|c| !adjust_cols.contains(c)).collect();
    let k = node_cols.len();
    if k == 0 {
        return Err(CacheError::InvalidArgument(
            "every column is an adjustment covariate; no nodes left".into(),
        ));
    }
    if k > MAX_CACHE_NODES {
        return Err(CacheError::TooManyNodes(k));
    }
    let mut banned = vec![0 as ParentMask; k];
    let mut retained = vec![0 as ParentMask; k];
    for (j, &child_col) in node_cols.iter().enumerate() {
        for (i, &parent_col) in node_cols.iter().enumerate() {
            if i == j {
                continue;
            }
            if cs.ban[child_col][parent_col] {
                banned[j] |= 1 << i;
            }
            if cs.retain[child_col][parent_col] {
                retained[j] |= 1 << i;
            }
        }
    }
    Ok((
        NodeConstraints {
            k,
            max_parents: cs.max_parents,
            banned,
            retained,
        },
        node_cols,
    ))
}

/// All licit parent sets per child: subsets of the non-banned nodes that
/// contain the retained ones, of size ≤ max_parents, ascending by bitmask.
pub fn enumerate_parent_sets(nc: &NodeConstraints) -> Vec<Vec<ParentMask>> {
    let k = nc.k;
    let all = if k == 32 { !0u32 } else { (1u32 << k) - 1 };
    (0..k)
        .map(|j| {
            let retained = nc.retained[j];
            let free = all & !(1u32 << j) & !nc.banned[j] & !retained;
            let free_bits: Vec<u32> = (0..k as u32).filter(|b| free & (1 << b) != 0).collect();
            let cap = nc.max_parents.saturating_sub(retained.count_ones() as usize);
            let mut masks = Vec::new();
            let mut combo = Vec::new();
            collect_combinations(&free_bits, cap, 0, &mut combo, &mut masks, retained);
            masks.sort_unstable();
            masks
        })
        .collect()
}

fn collect_combinations(
    bits: &[u32],
    cap: usize,
    start: usize,
    combo: &mut Vec<u32>,
    out: &mut Vec<ParentMask>,
    base: ParentMask,
) {
    let mask = combo.iter().fold(base, |m, &b| m | (1 << b));
    out.push(mask);
    if combo.len() == cap {
        return;
    }
    for i in start..bits.len() {
        combo.push(bits[i]);
        collect_combinations(bits, cap, i + 1, combo, out, base);
        combo.pop();
    }
}

/// The comprehensive cache of licit scores.
#[derive(Debug, Clone)]
pub struct ScoreCache<T> {
    /// Per child, ascending by parent bitmask.
    pub entries: Vec<Vec<CacheEntry<T>>>,
    /// Node names in node-index order (adjustment columns excluded).
    pub node_names: Vec<String>,
    pub n: usize,
    pub max_parents: usize,
}

impl<T: Scalar> ScoreCache<T> {
    pub fn k(&self) -> usize {
        self.node_names.len()
    }

    pub fn total_entries(&self) -> usize {
        self.entries.iter().map(|e| e.len()).sum()
    }

    fn parents_names(&self, mask: ParentMask) -> Vec<String> {
        (0..self.k())
            .filter(|&i| mask & (1 << i) != 0)
            .map(|i| self.node_names[i].clone())
            .collect()
    }

    /// CSV export: `child,parents,loglik,d,aic,bic,mdl,method`, child-major
    /// then bitmask-ascending; parents are semicolon-separated names.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["child", "parents", "loglik", "d", "aic", "bic", "mdl", "method"])
            .expect("csv header");
        for child_entries in &self.entries {
            for e in child_entries {
                w.write_record([
                    self.node_names[e.child].clone(),
                    self.parents_names(e.parents).join(";"),
                    format!("{}", e.loglik),
                    format!("{}", e.d),
                    format!("{}", e.scores.aic),
                    format!("{}", e.scores.bic),
                    format!("{}", e.scores.mdl),
                    e.method.clone(),
                ])
                .expect("csv row");
            }
        }
        String::from_utf8(w.into_inner().expect("csv flush")).expect("utf8")
    }

    /// Reads a cache CSV back. The sample size is not part of the file
    /// format, so `n` is zero; searches never consult it.
    pub fn from_csv<R: Read>(reader: R) -> Result<ScoreCache<T>, CacheError>
    where
        T: std::str::FromStr,
    {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let mut node_names: Vec<String> = Vec::new();
        let mut rows: Vec<(String, Vec<String>, T, usize, T, T, T, String)> = Vec::new();
        for record in rdr.records() {
            let r = record?;
            if r.len() != 8 {
                return Err(CacheError::Malformed(format!(
                    "expected 8 fields per row, found {}",
                    r.len()
                )));
            }
            let child = r[0].trim().to_string();
            if !node_names.contains(&child) {
                node_names.push(child.clone());
            }
            let parents: Vec<String> = if r[1].trim().is_empty() {
                Vec::new()
            } else {
                r[1].split(';').map(|s| s.trim().to_string()).collect()
            };
            let parse_t = |s: &str| -> Result<T, CacheError> {
                s.trim()
                    .parse::<T>()
                    .map_err(|_| CacheError::Malformed(format!("bad number `{s}`")))
            };
            let d: usize = r[3]
                .trim()
                .parse()
                .map_err(|_| CacheError::Malformed(format!("bad d `{}`", &r[3])))?;
            rows.push((
                child,
                parents,
                parse_t(&r[2])?,
                d,
                parse_t(&r[4])?,
                parse_t(&r[5])?,
                parse_t(&r[6])?,
                r[7].trim().to_string(),
            ));
        }
        if rows.is_empty() {
            return Err(CacheError::Malformed("cache file has no entries".into()));
        }
        let k = node_names.len();
        if k > MAX_CACHE_NODES {
            return Err(CacheError::TooManyNodes(k));
        }
        let index_of = |name: &str| -> Result<usize, CacheError> {
            node_names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| CacheError::Malformed(format!("unknown node `{name}`")))
        };
        let mut entries: Vec<Vec<CacheEntry<T>>> = vec![Vec::new(); k];
        let mut max_parents = 0usize;
        for (child, parents, loglik, d, aic, bic, mdl, method) in rows {
            let child_idx = index_of(&child)?;
            let mut mask: ParentMask = 0;
            for p in &parents {
                mask |= 1 << index_of(p)?;
            }
            let n_parents = mask.count_ones() as usize;
            max_parents = max_parents.max(n_parents);
            entries[child_idx].push(CacheEntry {
                child: child_idx,
                parents: mask,
                loglik,
                d,
                n_parents,
                scores: NodeScores {
                    mlik: loglik,
                    aic,
                    bic,
                    mdl,
                },
                method,
            });
        }
        for child_entries in &mut entries {
            child_entries.sort_by_key(|e| e.parents);
        }
        Ok(ScoreCache {
            entries,
            node_names,
            n: 0,
            max_parents,
        })
    }
}

/// Builds the cache: one entry per licit combination, each fitted with the
/// robustness ladder (in parallel) and scored. Deterministic given the
/// inputs regardless of worker count.
pub fn build_cache<T: Scalar>(
    ds: &Dataset<T>,
    cs: &ConstraintSpec,
) -> Result<ScoreCache<T>, CacheError> {
    let (nc, node_cols) = node_constraints(cs, ds)?;
    let adjust_cols: Vec<usize> = (0..ds.k()).filter(|c| !node_cols.contains(c)).collect();
    let k = nc.k;
    let sets = enumerate_parent_sets(&nc);

    let jobs: Vec<(usize, ParentMask)> = sets
        .iter()
        .enumerate()
        .flat_map(|(child, masks)| masks.iter().map(move |&m| (child, m)))
        .collect();

    let results: Result<Vec<CacheEntry<T>>, CacheError> = jobs
        .par_iter()
        .map(|&(child, mask)| {
            let parent_cols: Vec<usize> = (0..k)
                .filter(|&i| mask & (1 << i) != 0)
                .map(|i| node_cols[i])
                .collect();
            let child_col = node_cols[child];
            let (design, y) = encode_design(ds, child_col, &parent_cols, &adjust_cols)
                .map_err(|e| CacheError::InvalidArgument(e.to_string()))?;
            let fam = FamilySpec::new(ds.dist(child_col));
            let fit = fit_node_robust(&design, &y, &fam).map_err(|e| match e {
                GlmError::Unfittable(detail) => CacheError::Unfittable {
                    child: ds.name(child_col).to_string(),
                    parents: parent_cols.iter().map(|&c| ds.name(c).to_string()).collect(),
                    detail,
                },
                other => CacheError::Unfittable {
                    child: ds.name(child_col).to_string(),
                    parents: parent_cols.iter().map(|&c| ds.name(c).to_string()).collect(),
                    detail: other.to_string(),
                },
            })?;
            let n_parents = mask.count_ones() as usize;
            let scores = node_scores(fit.loglik, fit.d, ds.n(), k, n_parents)?;
            Ok(CacheEntry {
                child,
                parents: mask,
                loglik: fit.loglik,
                d: fit.d,
                n_parents,
                scores,
                method: fit.method_label(),
            })
        })
        .collect();
    let flat = results?;

    let mut entries: Vec<Vec<CacheEntry<T>>> = vec![Vec::new(); k];
    for entry in flat {
        entries[entry.child].push(entry);
    }
    // Jobs were generated mask-ascending per child; keep that order.
    Ok(ScoreCache {
        entries,
        node_names: node_cols.iter().map(|&c| ds.name(c).to_string()).collect(),
        n: ds.n(),
        max_parents: cs.max_parents,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DistributionKind;
    use approx::assert_abs_diff_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn score_formulas_match_hand_values() {
        // n = e² so ln n = 2.
        let n = std::f64::consts::E.powi(2).round() as usize; // 7
        let s = node_scores(-100.0f64, 3, n, 5, 0).unwrap();
        assert_abs_diff_eq!(s.aic, 106.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.bic, 100.0 + 1.5 * (n as f64).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(s.mdl, s.bic + 5.0f64.ln(), epsilon = 1e-12);
        assert_eq!(s.mlik, -100.0);
    }

    #[test]
    fn mdl_structural_penalty_sums_over_nodes() {
        // Parent-set sizes (0, 1, 1) over k = 3: Σ (1+|Pa|) ln k = 5 ln 3.
        let k = 3;
        let total_extra: f64 = [0usize, 1, 1]
            .iter()
            .map(|&np| {
                let s = node_scores(-10.0f64, 2, 50, k, np).unwrap();
                s.mdl - s.bic
            })
            .sum();
        assert_abs_diff_eq!(total_extra, 5.0 * 3.0f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn zero_d_rejected() {
        assert!(node_scores(-1.0f64, 0, 10, 2, 0).is_err());
    }

    #[test]
    fn enumeration_counts_unconstrained() {
        let nc = NodeConstraints::unconstrained(4, 2);
        let sets = enumerate_parent_sets(&nc);
        // C(3,0)+C(3,1)+C(3,2) = 7 per child.
        assert!(sets.iter().all(|s| s.len() == 7));
        assert_eq!(sets.iter().map(|s| s.len()).sum::<usize>(), 28);
        // Ascending bitmask order, no duplicates.
        for (j, masks) in sets.iter().enumerate() {
            assert!(masks.windows(2).all(|w| w[0] < w[1]));
            assert!(masks.iter().all(|m| m & (1 << j) == 0));
        }
    }

    #[test]
    fn enumeration_respects_retain() {
        let mut nc = NodeConstraints::unconstrained(3, 2);
        nc.retained[0] = 1 << 2;
        let sets = enumerate_parent_sets(&nc);
        assert_eq!(sets[0], vec![0b100, 0b110]);
    }

    #[test]
    fn enumeration_respects_ban() {
        let mut nc = NodeConstraints::unconstrained(3, 2);
        nc.banned[0] = 0b110;
        let sets = enumerate_parent_sets(&nc);
        assert_eq!(sets[0], vec![0]);
    }

    fn random_gaussian_dataset(k: usize, n: usize, seed: u64) -> Dataset<f64> {
        let mut rng = StdRng::seed_from_u64(seed);
        let names = (0..k).map(|i| format!("x{i}")).collect();
        let columns = (0..k)
            .map(|_| (0..n).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        Dataset::new(names, columns, vec![DistributionKind::Gaussian; k]).unwrap()
    }

    #[test]
    fn cache_count_k4() {
        let ds = random_gaussian_dataset(4, 30, 1);
        let cs = ConstraintSpec::unconstrained(4, 2);
        let cache = build_cache(&ds, &cs).unwrap();
        assert_eq!(cache.total_entries(), 28);
    }

    #[test]
    fn cache_is_deterministic() {
        let ds = random_gaussian_dataset(4, 40, 2);
        let cs = ConstraintSpec::unconstrained(4, 3);
        let a = build_cache(&ds, &cs).unwrap().to_csv();
        let b = build_cache(&ds, &cs).unwrap().to_csv();
        assert_eq!(a, b);
    }

    #[test]
    fn cache_csv_roundtrip() {
        let ds = random_gaussian_dataset(3, 25, 3);
        let cs = ConstraintSpec::unconstrained(3, 2);
        let cache = build_cache(&ds, &cs).unwrap();
        let text = cache.to_csv();
        let reloaded: ScoreCache<f64> = ScoreCache::from_csv(text.as_bytes()).unwrap();
        assert_eq!(reloaded.node_names, cache.node_names);
        assert_eq!(reloaded.to_csv(), text);
    }

    #[test]
    fn unfittable_child_aborts_build() {
        // Constant gaussian column cannot be scored at all.
        let ds = Dataset::from_parts(
            vec!["a".into(), "b".into()],
            vec![vec![1.0, 1.0, 1.0, 1.0], vec![0.5, 1.5, -0.5, 2.0]],
            vec![DistributionKind::Gaussian, DistributionKind::Gaussian],
        )
        .unwrap();
        let cs = ConstraintSpec::unconstrained(2, 1);
        let err = build_cache(&ds, &cs).unwrap_err();
        match err {
            CacheError::Unfittable { child, .. } => assert_eq!(child, "a"),
            other => panic!("expected Unfittable, got {other}"),
        }
    }
}

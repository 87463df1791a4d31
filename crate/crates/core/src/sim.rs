//! Ground-truth network generation, forward sampling, and structure
//! recovery metrics.
//!
//! DAGs are drawn by sampling a node order and including each
//! order-respecting arc independently; data are drawn ancestrally in
//! topological order. Everything is deterministic given its seed.

use crate::data::{Dataset, DistributionKind};
use crate::linalg::Matrix;
use crate::scalar::{cast, Scalar};
use crate::search::Dag;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use thiserror::Error;

/// Arc-strength band: magnitudes below ~0.5 are statistically invisible
/// at desk-scale sample sizes, so recovery experiments would be noise.
const COEF_MAG_LOW: f64 = 0.5;
const COEF_MAG_HIGH: f64 = 2.0;
const INTERCEPT_HALF_WIDTH: f64 = 0.5;
/// Poisson linear predictors are clamped to ±30 before exp to avoid
/// overflow in the sampler.
const POISSON_ETA_CLAMP: f64 = 30.0;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("node mismatch: {0}")]
    NodeMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Coefficients of one arc: one row per child linear predictor, one
/// column per parent encoding column (dummy columns for categorical
/// parents).
#[derive(Debug, Clone, PartialEq)]
pub struct ArcCoefficients<T> {
    pub parent: usize,
    pub child: usize,
    pub values: Matrix<T>,
}

/// A generating network: structure plus parameters.
#[derive(Debug, Clone)]
pub struct GroundTruth<T> {
    pub dag: Dag,
    pub dists: Vec<DistributionKind>,
    /// Per node, one intercept per linear predictor.
    pub intercepts: Vec<Vec<T>>,
    /// Sorted by (child, parent).
    pub coefficients: Vec<ArcCoefficients<T>>,
    /// `Some` for gaussian nodes.
    pub gaussian_sd: Vec<Option<T>>,
}

impl<T: Scalar> GroundTruth<T> {
    pub fn k(&self) -> usize {
        self.dag.k()
    }

    pub fn arc(&self, child: usize, parent: usize) -> Option<&ArcCoefficients<T>> {
        self.coefficients
            .iter()
            .find(|a| a.child == child && a.parent == parent)
    }

    /// JSON export of the generating parameters (stable key order).
    pub fn to_json(&self) -> String {
        let f = |v: T| v.to_f64().unwrap();
        let nodes: Vec<serde_json::Value> = (0..self.k())
            .map(|j| {
                let mut obj = serde_json::Map::new();
                obj.insert(
                    "name".into(),
                    serde_json::Value::String(self.dag.node_names()[j].clone()),
                );
                obj.insert(
                    "dist".into(),
                    serde_json::Value::String(self.dists[j].to_string()),
                );
                obj.insert(
                    "intercepts".into(),
                    serde_json::json!(self.intercepts[j].iter().map(|&v| f(v)).collect::<Vec<_>>()),
                );
                if let Some(sd) = self.gaussian_sd[j] {
                    obj.insert("gaussian_sd".into(), serde_json::json!(f(sd)));
                }
                serde_json::Value::Object(obj)
            })
            .collect();
        let arcs: Vec<serde_json::Value> = self
            .coefficients
            .iter()
            .map(|a| {
                let rows: Vec<Vec<f64>> = (0..a.values.rows())
                    .map(|r| a.values.row(r).iter().map(|&v| f(v)).collect())
                    .collect();
                serde_json::json!({
                    "parent": self.dag.node_names()[a.parent],
                    "child": self.dag.node_names()[a.child],
                    "values": rows,
                })
            })
            .collect();
        serde_json::to_string_pretty(&serde_json::json!({
            "nodes": nodes,
            "arcs": arcs,
        }))
        .expect("json")
    }
}

/// Samples a random ground-truth network: uniform node order, each
/// order-respecting arc kept with probability `density`, coefficient
/// magnitudes uniform in ±[0.5, 2.0] with fair signs, intercepts uniform
/// in ±0.5, unit gaussian noise.
pub fn random_dag<T: Scalar>(
    k: usize,
    density: f64,
    dists: &[DistributionKind],
    seed: u64,
) -> Result<GroundTruth<T>, SimError> {
    if k < 2 {
        return Err(SimError::InvalidArgument(format!(
            "need at least 2 nodes, got {k}"
        )));
    }
    if !(0.0..=1.0).contains(&density) {
        return Err(SimError::InvalidArgument(format!(
            "density must lie in [0, 1], got {density}"
        )));
    }
    if dists.len() != k {
        return Err(SimError::InvalidArgument(format!(
            "{} distribution tags for {k} nodes",
            dists.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..k).collect();
    perm.shuffle(&mut rng);

    let mut adjacency = vec![vec![false; k]; k];
    let mut arcs: Vec<(usize, usize)> = Vec::new(); // (child, parent)
    for i in 0..k {
        for j in i + 1..k {
            if rng.random_bool(density) {
                let parent = perm[i];
                let child = perm[j];
                adjacency[child][parent] = true;
                arcs.push((child, parent));
            }
        }
    }

    let mut coefficients: Vec<ArcCoefficients<T>> = arcs
        .iter()
        .map(|&(child, parent)| {
            let rows = dists[child].response_dims();
            let cols = dists[parent].encoding_width();
            let mut values = Matrix::zeros(rows, cols);
            for r in 0..rows {
                for c in 0..cols {
                    let mag = rng.random_range(COEF_MAG_LOW..COEF_MAG_HIGH);
                    let signed = if rng.random_bool(0.5) { mag } else { -mag };
                    values.set(r, c, cast::<T>(signed));
                }
            }
            ArcCoefficients {
                parent,
                child,
                values,
            }
        })
        .collect();
    coefficients.sort_by_key(|a| (a.child, a.parent));

    let intercepts: Vec<Vec<T>> = (0..k)
        .map(|j| {
            (0..dists[j].response_dims())
                .map(|_| cast::<T>(rng.random_range(-INTERCEPT_HALF_WIDTH..INTERCEPT_HALF_WIDTH)))
                .collect()
        })
        .collect();
    let gaussian_sd: Vec<Option<T>> = dists
        .iter()
        .map(|d| match d {
            DistributionKind::Gaussian => Some(T::one()),
            _ => None,
        })
        .collect();

    let node_names = (0..k).map(|i| format!("x{i}")).collect();
    let dag = Dag::new(adjacency, node_names).expect("order-respecting arcs are acyclic");
    Ok(GroundTruth {
        dag,
        dists: dists.to_vec(),
        intercepts,
        coefficients,
        gaussian_sd,
    })
}

/// Ancestral sampling in topological order. Gaussian nodes add
/// N(0, sd²) noise to the linear predictor; binomial nodes draw
/// Bernoulli(logistic(η)); poisson nodes draw Poisson(exp(η)) with η
/// clamped; multinomial nodes draw from softmax over per-level η (level
/// 0 is the baseline with η = 0).
pub fn simulate_data<T: Scalar>(
    gt: &GroundTruth<T>,
    n: usize,
    seed: u64,
) -> Result<Dataset<T>, SimError> {
    if n < 1 {
        return Err(SimError::InvalidArgument("need n ≥ 1".into()));
    }
    let k = gt.k();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let order = gt.dag.topological_order();
    let mut columns: Vec<Vec<T>> = vec![vec![T::zero(); n]; k];

    for &node in &order {
        // Parents ascending, mirroring the design-matrix encoding.
        let parent_arcs: Vec<&ArcCoefficients<T>> = gt
            .coefficients
            .iter()
            .filter(|a| a.child == node)
            .collect();
        for i in 0..n {
            let mut eta: Vec<T> = gt.intercepts[node].clone();
            for arc in &parent_arcs {
                let pv = columns[arc.parent][i];
                match gt.dists[arc.parent] {
                    DistributionKind::Multinomial { levels } => {
                        for level in 1..levels {
                            if pv == cast::<T>(level as f64) {
                                for (d, e) in eta.iter_mut().enumerate() {
                                    *e = *e + arc.values.get(d, level - 1);
                                }
                            }
                        }
                    }
                    _ => {
                        for (d, e) in eta.iter_mut().enumerate() {
                            *e = *e + arc.values.get(d, 0) * pv;
                        }
                    }
                }
            }
            columns[node][i] = match gt.dists[node] {
                DistributionKind::Gaussian => {
                    let noise: f64 = rng.sample(StandardNormal);
                    eta[0] + gt.gaussian_sd[node].unwrap() * cast::<T>(noise)
                }
                DistributionKind::Binomial => {
                    let p = T::one() / (T::one() + (-eta[0]).exp());
                    if rng.random_bool(p.to_f64().unwrap().clamp(0.0, 1.0)) {
                        T::one()
                    } else {
                        T::zero()
                    }
                }
                DistributionKind::Poisson => {
                    let clamp = cast::<T>(POISSON_ETA_CLAMP);
                    let lambda = eta[0].max(-clamp).min(clamp).exp().to_f64().unwrap();
                    let draw: f64 = Poisson::new(lambda)
                        .expect("positive rate")
                        .sample(&mut rng);
                    cast::<T>(draw.round())
                }
                DistributionKind::Multinomial { levels } => {
                    // softmax over (0, η₁, …): stable via max subtraction.
                    let mut weights = vec![T::zero(); levels];
                    let mut max_eta = T::zero();
                    for (d, &e) in eta.iter().enumerate() {
                        weights[d + 1] = e;
                        if e > max_eta {
                            max_eta = e;
                        }
                    }
                    let exps: Vec<f64> = weights
                        .iter()
                        .map(|&w| (w - max_eta).exp().to_f64().unwrap())
                        .collect();
                    let total: f64 = exps.iter().sum();
                    let u: f64 = rng.random::<f64>() * total;
                    let mut acc = 0.0;
                    let mut chosen = levels - 1;
                    for (idx, &e) in exps.iter().enumerate() {
                        acc += e;
                        if u < acc {
                            chosen = idx;
                            break;
                        }
                    }
                    cast::<T>(chosen as f64)
                }
            };
        }
    }

    let names: Vec<String> = gt.dag.node_names().to_vec();
    Dataset::from_parts(names, columns, gt.dists.clone())
        .map_err(|e| SimError::InvalidArgument(e.to_string()))
}

/// Arc-level comparison mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComparisonMode {
    Directed,
    Skeleton,
}

impl std::fmt::Display for ComparisonMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ComparisonMode::Directed => write!(f, "directed"),
            ComparisonMode::Skeleton => write!(f, "skeleton"),
        }
    }
}

/// True/false positive and false negative arc counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_count: usize,
    pub mode: ComparisonMode,
}

impl ConfusionCounts {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&serde_json::json!({
            "mode": self.mode.to_string(),
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn_count,
        }))
        .expect("json")
    }
}

/// Compares a learned structure against the truth. Directed mode counts
/// ordered arcs; skeleton mode counts undirected adjacencies.
pub fn confusion(
    learned: &Dag,
    truth: &Dag,
    mode: ComparisonMode,
) -> Result<ConfusionCounts, SimError> {
    let k = truth.k();
    if learned.k() != k {
        return Err(SimError::NodeMismatch(format!(
            "learned has {} nodes, truth has {k}",
            learned.k()
        )));
    }
    // Map truth node order onto learned node order by name.
    let map: Vec<usize> = truth
        .node_names()
        .iter()
        .map(|name| {
            learned
                .node_names()
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| SimError::NodeMismatch(format!("node `{name}` missing")))
        })
        .collect::<Result<_, _>>()?;

    let mut tp = 0;
    let mut fp = 0;
    let mut fn_count = 0;
    match mode {
        ComparisonMode::Directed => {
            for c in 0..k {
                for p in 0..k {
                    if c == p {
                        continue;
                    }
                    let t = truth.has_arc(c, p);
                    let l = learned.has_arc(map[c], map[p]);
                    match (l, t) {
                        (true, true) => tp += 1,
                        (true, false) => fp += 1,
                        (false, true) => fn_count += 1,
                        (false, false) => {}
                    }
                }
            }
        }
        ComparisonMode::Skeleton => {
            for i in 0..k {
                for j in i + 1..k {
                    let t = truth.has_arc(i, j) || truth.has_arc(j, i);
                    let l = learned.has_arc(map[i], map[j]) || learned.has_arc(map[j], map[i]);
                    match (l, t) {
                        (true, true) => tp += 1,
                        (true, false) => fp += 1,
                        (false, true) => fn_count += 1,
                        (false, false) => {}
                    }
                }
            }
        }
    }
    Ok(ConfusionCounts {
        tp,
        fp,
        fn_count,
        mode,
    })
}

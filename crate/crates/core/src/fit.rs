//! Scoring a fixed network: per-node estimates, standard errors, Wald
//! p-values, and the four score totals.
//!
//! Raw Wald p-values are reported by default. The DAG was selected with a
//! goodness-of-fit criterion, so post-selection p-values are optimistic;
//! an opt-in Bonferroni correction over all non-intercept coefficients is
//! provided as a blunt guard, not a cure.

use crate::data::{encode_design, ConstraintSpec, Dataset, INTERCEPT_LABEL};
use crate::glm::{fit_node_robust, FamilySpec, GlmError, GlmFit};
use crate::scalar::{cast, normal_cdf, Scalar};
use crate::score::{node_scores, CacheError, NodeScores, ScoreKind};
use crate::search::{is_acyclic, Dag};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FitError {
    #[error("the supplied adjacency contains a cycle")]
    CyclicDag,
    #[error("node mismatch: {0}")]
    NodeMismatch(String),
    #[error("arc {parent} → {child} is banned by the constraints")]
    BannedArc { child: String, parent: String },
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error(transparent)]
    Glm(#[from] GlmError),
    #[error(transparent)]
    Score(#[from] CacheError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PvalueAdjustment {
    None,
    Bonferroni,
}

impl std::fmt::Display for PvalueAdjustment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PvalueAdjustment::None => write!(f, "none"),
            PvalueAdjustment::Bonferroni => write!(f, "bonferroni"),
        }
    }
}

/// One coefficient with its Wald test.
#[derive(Debug, Clone)]
pub struct Coefficient<T> {
    pub label: String,
    pub estimate: T,
    pub se: T,
    pub z: T,
    pub p: T,
    pub p_adjusted: T,
}

/// One node's fitted model and scores.
#[derive(Debug, Clone)]
pub struct NodeFit<T> {
    pub node: String,
    pub parents: Vec<String>,
    pub fit: GlmFit<T>,
    pub coefficients: Vec<Coefficient<T>>,
    pub scores: NodeScores<T>,
}

/// Full-network fit: per-node records plus score totals.
#[derive(Debug, Clone)]
pub struct FitResult<T> {
    pub nodes: Vec<NodeFit<T>>,
    pub totals: NodeScores<T>,
    pub pvalue_adjustment: PvalueAdjustment,
}

impl<T: Scalar> FitResult<T> {
    pub fn total(&self, kind: ScoreKind) -> T {
        self.totals.get(kind)
    }
}

/// Network score for one kind: the sum of the per-node scores.
pub fn network_score<T: Scalar>(fr: &FitResult<T>, kind: ScoreKind) -> T {
    fr.nodes
        .iter()
        .fold(T::zero(), |acc, n| acc + n.scores.get(kind))
}

/// Fits every node of `g` on `ds` (DAG parents plus adjustment
/// covariates) with the robustness ladder and assembles the report.
pub fn fit_dag<T: Scalar>(
    g: &Dag,
    ds: &Dataset<T>,
    cs: &ConstraintSpec,
    adjustment: PvalueAdjustment,
) -> Result<FitResult<T>, FitError> {
    let k = g.k();
    let adjacency: Vec<Vec<bool>> = (0..k)
        .map(|c| (0..k).map(|p| g.has_arc(c, p)).collect())
        .collect();
    if !is_acyclic(&adjacency) {
        return Err(FitError::CyclicDag);
    }

    // DAG nodes must be exactly the non-adjustment dataset columns.
    let adjust_cols: Vec<usize> = cs
        .adjust
        .iter()
        .map(|name| {
            ds.index_of(name)
                .ok_or_else(|| FitError::NodeMismatch(format!("adjust column `{name}` missing")))
        })
        .collect::<Result<_, _>>()?;
    let node_col_of: Vec<usize> = g
        .node_names()
        .iter()
        .map(|name| {
            ds.index_of(name)
                .ok_or_else(|| FitError::NodeMismatch(format!("node `{name}` not in dataset")))
        })
        .collect::<Result<_, _>>()?;
    for &c in &node_col_of {
        if adjust_cols.contains(&c) {
            return Err(FitError::NodeMismatch(format!(
                "`{}` is both a DAG node and an adjustment covariate",
                ds.name(c)
            )));
        }
    }
    let expected_nodes = ds.k() - adjust_cols.len();
    if k != expected_nodes {
        return Err(FitError::NodeMismatch(format!(
            "DAG has {k} nodes but the dataset has {expected_nodes} non-adjustment columns"
        )));
    }

    // Fit each node.
    let mut fits: Vec<(Vec<usize>, GlmFit<T>)> = Vec::with_capacity(k);
    for child in 0..k {
        let parent_nodes = g.parents_of(child);
        let child_col = node_col_of[child];
        let parent_cols: Vec<usize> = parent_nodes.iter().map(|&p| node_col_of[p]).collect();
        for (&p_node, &p_col) in parent_nodes.iter().zip(&parent_cols) {
            if cs.ban[child_col][p_col] {
                return Err(FitError::BannedArc {
                    child: g.node_names()[child].clone(),
                    parent: g.node_names()[p_node].clone(),
                });
            }
        }
        let (design, y) = encode_design(ds, child_col, &parent_cols, &adjust_cols)?;
        let fam = FamilySpec::new(ds.dist(child_col));
        let fit = fit_node_robust(&design, &y, &fam)?;
        fits.push((parent_nodes, fit));
    }

    // Bonferroni factor: every non-intercept coefficient in the network.
    let m_tests: usize = fits
        .iter()
        .map(|(_, fit)| fit.coefficients.rows() * fit.column_labels.len().saturating_sub(1))
        .sum();

    let mut nodes = Vec::with_capacity(k);
    let mut totals = NodeScores::zero();
    for (child, (parent_nodes, fit)) in fits.into_iter().enumerate() {
        let scores = node_scores(
            fit.loglik,
            fit.d,
            ds.n(),
            k,
            parent_nodes.len(),
        )?;
        totals = totals.add(&scores);
        let multi = fit.coefficients.rows() > 1;
        let mut coefficients = Vec::new();
        for level_row in 0..fit.coefficients.rows() {
            for (j, col_label) in fit.column_labels.iter().enumerate() {
                let estimate = fit.coefficients.get(level_row, j);
                let se = fit.std_errors.get(level_row, j);
                let z = estimate / se;
                let p = two_sided_p(z);
                let p_adjusted = match adjustment {
                    PvalueAdjustment::None => p,
                    PvalueAdjustment::Bonferroni => {
                        if col_label == INTERCEPT_LABEL {
                            p
                        } else {
                            (p * cast::<T>(m_tests as f64)).min(T::one())
                        }
                    }
                };
                let label = if multi {
                    format!("level{}:{}", level_row + 1, col_label)
                } else {
                    col_label.clone()
                };
                coefficients.push(Coefficient {
                    label,
                    estimate,
                    se,
                    z,
                    p,
                    p_adjusted,
                });
            }
        }
        nodes.push(NodeFit {
            node: g.node_names()[child].clone(),
            parents: parent_nodes
                .iter()
                .map(|&p| g.node_names()[p].clone())
                .collect(),
            fit,
            coefficients,
            scores,
        });
    }

    Ok(FitResult {
        nodes,
        totals,
        pvalue_adjustment: adjustment,
    })
}

fn two_sided_p<T: Scalar>(z: T) -> T {
    let p = cast::<T>(2.0) * (T::one() - normal_cdf(z.abs()));
    p.max(T::zero()).min(T::one())
}

// --- JSON export (concrete f64 view, stable key order) ---

#[derive(Serialize)]
struct CoefficientJson {
    label: String,
    estimate: f64,
    se: f64,
    z: f64,
    p: f64,
    p_adjusted: f64,
}

#[derive(Serialize)]
struct NodeFitJson {
    node: String,
    parents: Vec<String>,
    method: String,
    coefficients: Vec<CoefficientJson>,
    loglik: f64,
    d: usize,
    aic: f64,
    bic: f64,
    mdl: f64,
}

#[derive(Serialize)]
struct TotalsJson {
    mlik: f64,
    aic: f64,
    bic: f64,
    mdl: f64,
}

#[derive(Serialize)]
struct FitResultJson {
    pvalue_adjustment: String,
    nodes: Vec<NodeFitJson>,
    totals: TotalsJson,
}

impl<T: Scalar> FitResult<T> {
    pub fn to_json(&self) -> String {
        let f = |v: T| v.to_f64().unwrap();
        let doc = FitResultJson {
            pvalue_adjustment: self.pvalue_adjustment.to_string(),
            nodes: self
                .nodes
                .iter()
                .map(|n| NodeFitJson {
                    node: n.node.clone(),
                    parents: n.parents.clone(),
                    method: n.fit.method_label(),
                    coefficients: n
                        .coefficients
                        .iter()
                        .map(|c| CoefficientJson {
                            label: c.label.clone(),
                            estimate: f(c.estimate),
                            se: f(c.se),
                            z: f(c.z),
                            p: f(c.p),
                            p_adjusted: f(c.p_adjusted),
                        })
                        .collect(),
                    loglik: f(n.fit.loglik),
                    d: n.fit.d,
                    aic: f(n.scores.aic),
                    bic: f(n.scores.bic),
                    mdl: f(n.scores.mdl),
                })
                .collect(),
            totals: TotalsJson {
                mlik: f(self.totals.mlik),
                aic: f(self.totals.aic),
                bic: f(self.totals.bic),
                mdl: f(self.totals.mdl),
            },
        };
        serde_json::to_string_pretty(&doc).expect("json")
    }
}

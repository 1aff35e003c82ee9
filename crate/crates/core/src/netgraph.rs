//! Account node network.
//!
//! Nodes carry the 13 standardized features plus the two first-stage class
//! probabilities. An edge joins two nodes when both were flagged malicious
//! with probability at least `theta` and their feature-space distance is at
//! most `tau`; every other node stays isolated.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::NUM_FEATURES;
use crate::scalar::{fmt_real, sq_dist, Scalar};
use crate::txmodel::Label;

/// Node feature width: 13 standardized features + 2 probabilities.
pub const NODE_DIM: usize = NUM_FEATURES + 2;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("split has no role for node {0}")]
    SplitMismatch(String),
    #[error("invalid edge rule: {0}")]
    InvalidRule(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeFeatures<S> {
    pub standardized: [S; NUM_FEATURES],
    pub p_normal: S,
    pub p_malicious: S,
}

impl<S: Scalar> NodeFeatures<S> {
    /// The 15-wide node input: features, then `p_normal`, `p_malicious`.
    pub fn to_vec(&self) -> Vec<S> {
        let mut v = self.standardized.to_vec();
        v.push(self.p_normal);
        v.push(self.p_malicious);
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Val,
    Test,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Train => "train",
            Role::Val => "val",
            Role::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphNode<S> {
    pub address: String,
    pub features: NodeFeatures<S>,
    pub label: Option<Label>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeRule<S> {
    /// Minimum `p_malicious` on both endpoints.
    pub prob_threshold: S,
    /// Maximum Euclidean distance.
    pub distance_threshold: S,
    /// Measure distance over all 15 node entries instead of the 13 features.
    pub distance_includes_probs: bool,
}

impl<S: Scalar> Default for EdgeRule<S> {
    fn default() -> Self {
        Self {
            prob_threshold: S::lit(0.5),
            distance_threshold: S::lit(2.0),
            distance_includes_probs: false,
        }
    }
}

impl<S: Scalar> EdgeRule<S> {
    pub fn validate(&self) -> Result<(), GraphError> {
        if !(self.prob_threshold >= S::zero() && self.prob_threshold <= S::one()) {
            return Err(GraphError::InvalidRule(format!("theta = {}", self.prob_threshold)));
        }
        if !(self.distance_threshold > S::zero()) {
            return Err(GraphError::InvalidRule(format!("tau = {}", self.distance_threshold)));
        }
        Ok(())
    }

    fn distance_sq(&self, a: &NodeFeatures<S>, b: &NodeFeatures<S>) -> S {
        let d = sq_dist(&a.standardized, &b.standardized);
        if self.distance_includes_probs {
            let dn = a.p_normal - b.p_normal;
            let dm = a.p_malicious - b.p_malicious;
            d + dn * dn + dm * dm
        } else {
            d
        }
    }

    /// The edge predicate.
    pub fn connects(&self, a: &NodeFeatures<S>, b: &NodeFeatures<S>) -> bool {
        a.p_malicious >= self.prob_threshold
            && b.p_malicious >= self.prob_threshold
            && self.distance_sq(a, b) <= self.distance_threshold * self.distance_threshold
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccountGraph<S> {
    pub nodes: Vec<GraphNode<S>>,
    /// Undirected edges `(i, j)` with `i < j`, sorted.
    pub edges: Vec<(usize, usize)>,
    /// One role per node once masks are assigned.
    pub roles: Option<Vec<Role>>,
}

/// Builds the graph; masks are left unset.
pub fn build_graph<S: Scalar>(
    nodes: Vec<GraphNode<S>>,
    rule: &EdgeRule<S>,
) -> Result<AccountGraph<S>, GraphError> {
    rule.validate()?;
    let gated: Vec<usize> = (0..nodes.len())
        .filter(|&i| nodes[i].features.p_malicious >= rule.prob_threshold)
        .collect();
    let edges: Vec<(usize, usize)> = (0..gated.len())
        .into_par_iter()
        .flat_map_iter(|a| {
            let i = gated[a];
            let nodes = &nodes;
            gated[a + 1..]
                .iter()
                .filter(move |&&j| rule.connects(&nodes[i].features, &nodes[j].features))
                .map(move |&j| (i, j))
                .collect::<Vec<_>>()
        })
        .collect();
    Ok(AccountGraph {
        nodes,
        edges,
        roles: None,
    })
}

/// Assigns a role to every node from an address-keyed split.
pub fn assign_masks<S: Scalar>(
    mut g: AccountGraph<S>,
    split: &BTreeMap<String, Role>,
) -> Result<AccountGraph<S>, GraphError> {
    let roles = g
        .nodes
        .iter()
        .map(|n| {
            split
                .get(&n.address)
                .copied()
                .ok_or_else(|| GraphError::SplitMismatch(n.address.clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if split.len() != g.nodes.len() {
        return Err(GraphError::SplitMismatch(format!(
            "split covers {} addresses but graph has {} nodes",
            split.len(),
            g.nodes.len()
        )));
    }
    g.roles = Some(roles);
    Ok(g)
}

impl<S: Scalar> AccountGraph<S> {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Neighbor lists without self-loops.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for &(i, j) in &self.edges {
            adj[i].push(j);
            adj[j].push(i);
        }
        for a in &mut adj {
            a.sort_unstable();
        }
        adj
    }

    pub fn degree(&self) -> Vec<usize> {
        self.adjacency().iter().map(Vec::len).collect()
    }

    /// Node input rows (15 wide).
    pub fn feature_rows(&self) -> Vec<Vec<S>> {
        self.nodes.iter().map(|n| n.features.to_vec()).collect()
    }

    /// Boolean mask for `role`; all false when masks are unset.
    pub fn mask(&self, role: Role) -> Vec<bool> {
        match &self.roles {
            Some(r) => r.iter().map(|&x| x == role).collect(),
            None => vec![false; self.nodes.len()],
        }
    }

    /// Copy with probability slots zeroed and no edges.
    pub fn blinded(&self) -> Self {
        let nodes = self
            .nodes
            .iter()
            .map(|n| GraphNode {
                features: NodeFeatures {
                    p_normal: S::zero(),
                    p_malicious: S::zero(),
                    ..n.features
                },
                ..n.clone()
            })
            .collect();
        Self {
            nodes,
            edges: Vec::new(),
            roles: self.roles.clone(),
        }
    }

    /// Writes `address,mask,label,p_normal,p_malicious,f1..f13`.
    pub fn write_nodes_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        write!(out, "address,mask,label,p_normal,p_malicious")?;
        for k in 1..=NUM_FEATURES {
            write!(out, ",f{k}")?;
        }
        writeln!(out)?;
        for (i, n) in self.nodes.iter().enumerate() {
            let mask = self.roles.as_ref().map_or("none", |r| r[i].as_str());
            let label = n.label.map_or(String::new(), |l| l.code().to_string());
            write!(
                out,
                "{},{},{},{},{}",
                n.address,
                mask,
                label,
                fmt_real(n.features.p_normal),
                fmt_real(n.features.p_malicious)
            )?;
            for &v in &n.features.standardized {
                write!(out, ",{}", fmt_real(v))?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    /// Writes `i,j` zero-based edge indices.
    pub fn write_edges_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "i,j")?;
        for &(i, j) in &self.edges {
            writeln!(out, "{i},{j}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn node(addr: usize, x0: f64, p: f64) -> GraphNode<f64> {
        let mut standardized = [0.0; NUM_FEATURES];
        standardized[0] = x0;
        GraphNode {
            address: format!("a{addr}"),
            features: NodeFeatures {
                standardized,
                p_normal: 1.0 - p,
                p_malicious: p,
            },
            label: None,
        }
    }

    #[test]
    fn probability_gate_isolates_everything() {
        let nodes = (0..5).map(|i| node(i, 0.0, 0.3)).collect();
        let g = build_graph(nodes, &EdgeRule::default()).unwrap();
        assert!(g.edges.is_empty());
        assert!(g.degree().iter().all(|&d| d == 0));
    }

    #[test]
    fn hand_geometry_gives_one_edge() {
        let nodes = vec![node(0, 0.0, 0.9), node(1, 1.0, 0.9), node(2, 6.0, 0.9)];
        let g = build_graph(nodes, &EdgeRule::default()).unwrap();
        assert_eq!(g.edges, vec![(0, 1)]);
    }

    #[test]
    fn masks_and_mismatch() {
        let nodes = vec![node(0, 0.0, 0.9), node(1, 1.0, 0.1)];
        let g = build_graph(nodes, &EdgeRule::default()).unwrap();
        let mut split = BTreeMap::new();
        split.insert("a0".to_string(), Role::Train);
        assert!(matches!(assign_masks(g.clone(), &split), Err(GraphError::SplitMismatch(_))));
        split.insert("a1".to_string(), Role::Test);
        let g = assign_masks(g, &split).unwrap();
        assert_eq!(g.mask(Role::Train), vec![true, false]);
        assert_eq!(g.mask(Role::Test), vec![false, true]);
    }

    #[test]
    fn exports_have_headers() {
        let g = build_graph(vec![node(0, 0.0, 0.9), node(1, 1.0, 0.9)], &EdgeRule::default()).unwrap();
        let mut n = Vec::new();
        g.write_nodes_csv(&mut n).unwrap();
        let text = String::from_utf8(n).unwrap();
        assert!(text.starts_with("address,mask,label,p_normal,p_malicious,f1,"));
        assert_eq!(text.lines().count(), 3);
        let mut e = Vec::new();
        g.write_edges_csv(&mut e).unwrap();
        assert_eq!(String::from_utf8(e).unwrap(), "i,j\n0,1\n");
    }

    fn arb_nodes() -> impl Strategy<Value = Vec<(f64, f64, f64)>> {
        prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0, 0.0f64..1.0), 0..40)
    }

    fn make(raw: &[(f64, f64, f64)]) -> Vec<GraphNode<f64>> {
        raw.iter()
            .enumerate()
            .map(|(i, &(a, b, p))| {
                let mut n = node(i, a, p);
                n.features.standardized[1] = b;
                n
            })
            .collect()
    }

    proptest! {
        #[test]
        fn monotone_in_thresholds(raw in arb_nodes(), theta in 0.0f64..1.0, tau in 0.1f64..3.0) {
            let rule = EdgeRule { prob_threshold: theta, distance_threshold: tau, distance_includes_probs: false };
            let base = build_graph(make(&raw), &rule).unwrap().edges;
            let wider = build_graph(make(&raw), &EdgeRule { distance_threshold: tau * 1.5, ..rule }).unwrap().edges;
            prop_assert!(base.iter().all(|e| wider.contains(e)));
            let stricter = build_graph(make(&raw), &EdgeRule { prob_threshold: (theta + 0.2).min(1.0), ..rule }).unwrap().edges;
            prop_assert!(stricter.iter().all(|e| base.contains(e)));
            let g = build_graph(make(&raw), &rule).unwrap();
            for (i, d) in g.degree().into_iter().enumerate() {
                if g.nodes[i].features.p_malicious < theta {
                    prop_assert_eq!(d, 0);
                }
            }
            prop_assert!(g.edges.iter().all(|&(i, j)| i < j));
        }
    }
}

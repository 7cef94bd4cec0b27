//! The three-scale skeletal hierarchy: 16 joints pooled pairwise into 8 and
//! then 4 nodes.
//!
//! Coarse edges are never written by hand; they are the quotient of the finer
//! scale's edges under its pairing. Every scale carries the symmetric
//! self-loop-normalized adjacency `D^-1/2 (A + I) D^-1/2`.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SCALE_NODES: [usize; 3] = [16, 8, 4];
pub const FINE_JOINTS: usize = SCALE_NODES[0];

pub type Edge = (usize, usize);

/// Pairs of fine nodes, listed in coarse-node order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GroupMap {
    pub pairs: Vec<(usize, usize)>,
}

impl GroupMap {
    pub fn new(pairs: Vec<(usize, usize)>) -> Self {
        Self { pairs }
    }

    pub fn coarse_count(&self) -> usize {
        self.pairs.len()
    }

    /// Coarse node of every fine node; `None` for fine nodes no pair covers.
    pub fn owner(&self, fine_count: usize) -> Vec<Option<usize>> {
        let mut owner = vec![None; fine_count];
        for (g, &(a, b)) in self.pairs.iter().enumerate() {
            for i in [a, b] {
                if i < fine_count {
                    owner[i] = Some(g);
                }
            }
        }
        owner
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphScale {
    pub node_count: usize,
    /// Normalized `(min, max)` pairs, sorted.
    pub edges: Vec<Edge>,
    pub adjacency: Tensor,
}

impl GraphScale {
    pub fn new(node_count: usize, edges: &[Edge]) -> Result<Self> {
        let adjacency = normalize_adjacency(edges, node_count)?;
        Ok(Self {
            node_count,
            edges: canonical_edges(edges),
            adjacency,
        })
    }

    /// Binary support of `A + I`, row-major.
    pub fn support_mask(&self) -> Vec<bool> {
        let n = self.node_count;
        let mut mask = vec![false; n * n];
        for i in 0..n {
            mask[i * n + i] = true;
        }
        for &(a, b) in &self.edges {
            mask[a * n + b] = true;
            mask[b * n + a] = true;
        }
        mask
    }

    pub fn is_connected(&self) -> bool {
        let mut parent: Vec<usize> = (0..self.node_count).collect();
        fn find(p: &mut [usize], mut i: usize) -> usize {
            while p[i] != i {
                p[i] = p[p[i]];
                i = p[i];
            }
            i
        }
        for &(a, b) in &self.edges {
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            parent[ra] = rb;
        }
        let root = find(&mut parent, 0);
        (0..self.node_count).all(|i| find(&mut parent, i) == root)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonSpec {
    pub joint_names: Vec<String>,
    pub scales: Vec<GraphScale>,
    pub pool_maps: Vec<GroupMap>,
}

/// On-disk skeleton description (TOML).
///
/// ```toml
/// joint_names = ["Pelvis", "RHip", ...]      # 16 labels
/// edges = [[0, 1], [1, 2], ...]               # fine-scale bones
/// pool_16_to_8 = [[0, 7], [8, 9], ...]        # 8 pairs, coarse order
/// pool_8_to_4 = [[0, 2], [1, 5], ...]         # 4 pairs over the 8 nodes
/// # optional; checked against the quotient when present
/// edges_8 = [[0, 2], ...]
/// edges_4 = [[0, 1], ...]
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkeletonConfig {
    pub joint_names: Vec<String>,
    pub edges: Vec<Edge>,
    pub pool_16_to_8: Vec<(usize, usize)>,
    pub pool_8_to_4: Vec<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edges_8: Option<Vec<Edge>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edges_4: Option<Vec<Edge>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    JointNameCount {
        expected: usize,
        found: usize,
    },
    ScaleCount(usize),
    NodeCount {
        scale: usize,
        expected: usize,
        found: usize,
    },
    EdgeOutOfRange {
        scale: usize,
        edge: Edge,
    },
    SelfLoop {
        scale: usize,
        node: usize,
    },
    DuplicateEdge {
        scale: usize,
        edge: Edge,
    },
    GroupCount {
        map: usize,
        expected: usize,
        found: usize,
    },
    NonDisjointGroups {
        map: usize,
        index: usize,
    },
    GroupIndexOutOfRange {
        map: usize,
        index: usize,
    },
    UncoveredNode {
        map: usize,
        index: usize,
    },
    MissingQuotientEdge {
        scale: usize,
        edge: Edge,
    },
    ExtraCoarseEdge {
        scale: usize,
        edge: Edge,
    },
    AdjacencyMismatch {
        scale: usize,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use Violation::*;
        match self {
            JointNameCount { expected, found } => {
                write!(f, "expected {expected} joint names, found {found}")
            }
            ScaleCount(n) => write!(f, "expected 3 scales, found {n}"),
            NodeCount { scale, expected, found } => {
                write!(f, "scale {scale}: expected {expected} nodes, found {found}")
            }
            EdgeOutOfRange { scale, edge } => write!(f, "scale {scale}: edge {edge:?} out of range"),
            SelfLoop { scale, node } => write!(f, "scale {scale}: self-loop at node {node}"),
            DuplicateEdge { scale, edge } => write!(f, "scale {scale}: duplicate edge {edge:?}"),
            GroupCount { map, expected, found } => {
                write!(f, "pool map {map}: expected {expected} pairs, found {found}")
            }
            NonDisjointGroups { map, index } => {
                write!(f, "pool map {map}: non-disjoint groups (index {index} repeated)")
            }
            GroupIndexOutOfRange { map, index } => {
                write!(f, "pool map {map}: index {index} out of range")
            }
            UncoveredNode { map, index } => write!(f, "pool map {map}: node {index} not covered"),
            MissingQuotientEdge { scale, edge } => write!(
                f,
                "scale {scale}: edge {edge:?} required by the quotient of the finer scale is missing"
            ),
            ExtraCoarseEdge { scale, edge } => write!(
                f,
                "scale {scale}: edge {edge:?} is not in the quotient of the finer scale"
            ),
            AdjacencyMismatch { scale } => {
                write!(f, "scale {scale}: normalized adjacency does not match its edges")
            }
        }
    }
}

pub const DEFAULT_JOINT_NAMES: [&str; 16] = [
    "Pelvis",
    "RHip",
    "RKnee",
    "RAnkle",
    "LHip",
    "LKnee",
    "LAnkle",
    "Spine",
    "Thorax",
    "Head",
    "LShoulder",
    "LElbow",
    "LWrist",
    "RShoulder",
    "RElbow",
    "RWrist",
];

pub const DEFAULT_EDGES: [Edge; 15] = [
    (0, 1),
    (1, 2),
    (2, 3),
    (0, 4),
    (4, 5),
    (5, 6),
    (0, 7),
    (7, 8),
    (8, 9),
    (8, 10),
    (10, 11),
    (11, 12),
    (8, 13),
    (13, 14),
    (14, 15),
];

/// Lower torso, upper torso, hips, right shin, left shin, shoulders, left arm,
/// right arm.
pub const DEFAULT_POOL_16_TO_8: [(usize, usize); 8] = [
    (0, 7),
    (8, 9),
    (1, 4),
    (2, 3),
    (5, 6),
    (10, 13),
    (11, 12),
    (14, 15),
];

/// {lower torso, hips}, {upper torso, shoulders}, {both shins}, {both arms}.
pub const DEFAULT_POOL_8_TO_4: [(usize, usize); 4] = [(0, 2), (1, 5), (3, 4), (6, 7)];

pub fn build_default_skeleton() -> SkeletonSpec {
    SkeletonConfig::default()
        .build()
        .expect("default skeleton is valid")
}

impl Default for SkeletonConfig {
    fn default() -> Self {
        Self {
            joint_names: DEFAULT_JOINT_NAMES.iter().map(|s| s.to_string()).collect(),
            edges: DEFAULT_EDGES.to_vec(),
            pool_16_to_8: DEFAULT_POOL_16_TO_8.to_vec(),
            pool_8_to_4: DEFAULT_POOL_8_TO_4.to_vec(),
            edges_8: None,
            edges_4: None,
        }
    }
}

impl SkeletonConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("skeleton config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("skeleton config serializes")
    }

    /// Builds the hierarchy, reporting every violation found.
    pub fn build(&self) -> Result<SkeletonSpec> {
        let pools = [
            GroupMap::new(self.pool_16_to_8.clone()),
            GroupMap::new(self.pool_8_to_4.clone()),
        ];
        let mut violations = Vec::new();
        if self.joint_names.len() != SCALE_NODES[0] {
            violations.push(Violation::JointNameCount {
                expected: SCALE_NODES[0],
                found: self.joint_names.len(),
            });
        }
        for (m, map) in pools.iter().enumerate() {
            check_group_map(m, map, SCALE_NODES[m], &mut violations);
        }
        check_edges(0, &self.edges, SCALE_NODES[0], &mut violations);
        for (s, given) in [&self.edges_8, &self.edges_4].into_iter().enumerate() {
            if let Some(e) = given {
                check_edges(s + 1, e, SCALE_NODES[s + 1], &mut violations);
            }
        }
        if !violations.is_empty() {
            return Err(Error::InvalidSkeleton(violations));
        }

        let mut edge_sets = vec![canonical_edges(&self.edges)];
        for (m, given) in [&self.edges_8, &self.edges_4].into_iter().enumerate() {
            let derived = quotient_graph(&edge_sets[m], &pools[m]);
            edge_sets.push(match given {
                Some(e) => canonical_edges(e),
                None => derived,
            });
        }
        let scales = edge_sets
            .iter()
            .zip(SCALE_NODES)
            .map(|(e, n)| GraphScale::new(n, e))
            .collect::<Result<Vec<_>>>()?;
        let spec = SkeletonSpec {
            joint_names: self.joint_names.clone(),
            scales,
            pool_maps: pools.to_vec(),
        };
        validate_skeleton(&spec).map_err(Error::InvalidSkeleton)?;
        Ok(spec)
    }
}

impl SkeletonSpec {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        SkeletonConfig::load(path)?.build()
    }

    pub fn fine(&self) -> &GraphScale {
        &self.scales[0]
    }

    pub fn to_config(&self) -> SkeletonConfig {
        SkeletonConfig {
            joint_names: self.joint_names.clone(),
            edges: self.scales[0].edges.clone(),
            pool_16_to_8: self.pool_maps[0].pairs.clone(),
            pool_8_to_4: self.pool_maps[1].pairs.clone(),
            edges_8: Some(self.scales[1].edges.clone()),
            edges_4: Some(self.scales[2].edges.clone()),
        }
    }

    /// Digest of the topology (node counts, edges and pairings), independent
    /// of joint labels.
    pub fn topology_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(b"GSHS");
        for scale in &self.scales {
            h.update((scale.node_count as u32).to_le_bytes());
            h.update((scale.edges.len() as u32).to_le_bytes());
            for &(a, b) in &scale.edges {
                h.update((a as u32).to_le_bytes());
                h.update((b as u32).to_le_bytes());
            }
        }
        for map in &self.pool_maps {
            h.update((map.pairs.len() as u32).to_le_bytes());
            for &(a, b) in &map.pairs {
                h.update((a as u32).to_le_bytes());
                h.update((b as u32).to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

/// `D^-1/2 (A + I) D^-1/2` for an undirected edge list.
pub fn normalize_adjacency(edges: &[Edge], node_count: usize) -> Result<Tensor> {
    let n = node_count;
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        a[i * n + i] = 1.0;
    }
    for &(u, v) in edges {
        if u >= n || v >= n {
            return Err(Error::Validation(format!(
                "edge ({u}, {v}) out of range for {n} nodes"
            )));
        }
        if u == v {
            return Err(Error::Validation(format!("self-loop at node {u}")));
        }
        a[u * n + v] = 1.0;
        a[v * n + u] = 1.0;
    }
    let inv_sqrt_deg: Vec<f64> = (0..n)
        .map(|i| 1.0 / a[i * n..(i + 1) * n].iter().sum::<f64>().sqrt())
        .collect();
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] *= inv_sqrt_deg[i] * inv_sqrt_deg[j];
        }
    }
    Tensor::new(vec![n, n], a)
}

/// Coarse nodes are adjacent iff some fine edge crosses between their groups.
pub fn quotient_graph(edges_fine: &[Edge], map: &GroupMap) -> Vec<Edge> {
    let fine_count = map.pairs.len() * 2;
    let owner = map.owner(
        fine_count.max(
            edges_fine
                .iter()
                .map(|e| e.0.max(e.1) + 1)
                .max()
                .unwrap_or(0),
        ),
    );
    let mut out = BTreeSet::new();
    for &(a, b) in edges_fine {
        if let (Some(ga), Some(gb)) = (owner[a], owner[b]) {
            if ga != gb {
                out.insert((ga.min(gb), ga.max(gb)));
            }
        }
    }
    out.into_iter().collect()
}

/// Checks every structural invariant and returns all violations found.
pub fn validate_skeleton(spec: &SkeletonSpec) -> std::result::Result<(), Vec<Violation>> {
    let mut v = Vec::new();
    if spec.joint_names.len() != FINE_JOINTS {
        v.push(Violation::JointNameCount {
            expected: FINE_JOINTS,
            found: spec.joint_names.len(),
        });
    }
    if spec.scales.len() != 3 {
        v.push(Violation::ScaleCount(spec.scales.len()));
        return Err(v);
    }
    for (s, scale) in spec.scales.iter().enumerate() {
        if scale.node_count != SCALE_NODES[s] {
            v.push(Violation::NodeCount {
                scale: s,
                expected: SCALE_NODES[s],
                found: scale.node_count,
            });
        }
        check_edges(s, &scale.edges, scale.node_count, &mut v);
        match normalize_adjacency(&scale.edges, scale.node_count) {
            Ok(expected)
                if expected.shape() == scale.adjacency.shape()
                    && expected.max_abs_diff(&scale.adjacency) == 0.0 => {}
            _ => v.push(Violation::AdjacencyMismatch { scale: s }),
        }
    }
    if spec.pool_maps.len() != 2 {
        v.push(Violation::GroupCount {
            map: spec.pool_maps.len(),
            expected: 2,
            found: spec.pool_maps.len(),
        });
        return Err(v);
    }
    let mut maps_ok = true;
    for (m, map) in spec.pool_maps.iter().enumerate() {
        let before = v.len();
        check_group_map(m, map, spec.scales[m].node_count, &mut v);
        maps_ok &= v.len() == before;
    }
    if maps_ok {
        for m in 0..2 {
            let want: BTreeSet<Edge> = quotient_graph(&spec.scales[m].edges, &spec.pool_maps[m])
                .into_iter()
                .collect();
            let have: BTreeSet<Edge> = canonical_edges(&spec.scales[m + 1].edges)
                .into_iter()
                .collect();
            for &edge in want.difference(&have) {
                v.push(Violation::MissingQuotientEdge { scale: m + 1, edge });
            }
            for &edge in have.difference(&want) {
                v.push(Violation::ExtraCoarseEdge { scale: m + 1, edge });
            }
        }
    }
    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}

fn canonical_edges(edges: &[Edge]) -> Vec<Edge> {
    let set: BTreeSet<Edge> = edges.iter().map(|&(a, b)| (a.min(b), a.max(b))).collect();
    set.into_iter().collect()
}

fn check_edges(scale: usize, edges: &[Edge], n: usize, v: &mut Vec<Violation>) {
    let mut seen = BTreeSet::new();
    for &(a, b) in edges {
        if a >= n || b >= n {
            v.push(Violation::EdgeOutOfRange {
                scale,
                edge: (a, b),
            });
        } else if a == b {
            v.push(Violation::SelfLoop { scale, node: a });
        } else if !seen.insert((a.min(b), a.max(b))) {
            v.push(Violation::DuplicateEdge {
                scale,
                edge: (a, b),
            });
        }
    }
}

fn check_group_map(m: usize, map: &GroupMap, fine: usize, v: &mut Vec<Violation>) {
    if map.pairs.len() * 2 != fine {
        v.push(Violation::GroupCount {
            map: m,
            expected: fine / 2,
            found: map.pairs.len(),
        });
    }
    let mut seen = vec![false; fine];
    for &(a, b) in &map.pairs {
        for i in [a, b] {
            if i >= fine {
                v.push(Violation::GroupIndexOutOfRange { map: m, index: i });
            } else if seen[i] {
                v.push(Violation::NonDisjointGroups { map: m, index: i });
            } else {
                seen[i] = true;
            }
        }
    }
    for (i, covered) in seen.iter().enumerate() {
        if !covered {
            v.push(Violation::UncoveredNode { map: m, index: i });
        }
    }
}

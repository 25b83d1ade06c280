//! Scene graphs: labeled objects joined by cardinal-direction edges.
//!
//! Every graph is kept in canonical form. Nodes are sorted by
//! `(label, ordinal)` and each related pair carries exactly one edge,
//! oriented from the lower to the higher node index. An edge
//! `from -> to` with relation `R` reads "`to` lies `R` of `from`"; the
//! reverse reading is the opposite relation.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::Deserialize;
use thiserror::Error;

use crate::geo::{enu_distance, EnuPoint, GeoPoint};
use crate::textio::ParsedDescription;

/// Default distance under which two map objects are related, in meters.
pub const DEFAULT_EDGE_THRESHOLD: f64 = 50.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("scene has no elements")]
    EmptyScene,
    #[error("inconsistent description: {0}")]
    InconsistentDescription(String),
    #[error("invalid scene graph: {0}")]
    InvalidGraph(String),
    #[error("scene format: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Relation {
    North,
    South,
    East,
    West,
}

impl Relation {
    pub const ALL: [Relation; 4] = [Relation::North, Relation::South, Relation::East, Relation::West];

    pub fn opposite(self) -> Relation {
        match self {
            Relation::North => Relation::South,
            Relation::South => Relation::North,
            Relation::East => Relation::West,
            Relation::West => Relation::East,
        }
    }

    pub fn code(self) -> &'static str {
        match self {
            Relation::North => "N",
            Relation::South => "S",
            Relation::East => "E",
            Relation::West => "W",
        }
    }

    pub fn from_code(code: &str) -> Option<Relation> {
        Relation::ALL.into_iter().find(|r| r.code() == code)
    }

    /// Lowercase word used in descriptions.
    pub fn word(self) -> &'static str {
        match self {
            Relation::North => "north",
            Relation::South => "south",
            Relation::East => "east",
            Relation::West => "west",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Cardinal relation of a planar displacement, or `None` on the diagonals
/// `|dx| == |dy|` (including the zero vector).
pub fn direction_relation(dx: f64, dy: f64) -> Option<Relation> {
    let (ax, ay) = (dx.abs(), dy.abs());
    if ax < ay {
        if dy > 0.0 {
            Some(Relation::North)
        } else {
            Some(Relation::South)
        }
    } else if ax > ay {
        if dx > 0.0 {
            Some(Relation::East)
        } else {
            Some(Relation::West)
        }
    } else {
        None
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneNode {
    pub label: String,
    /// 1 for the first object with a given label, 2, 3, ... for repeats.
    pub ordinal: u32,
    pub position: Option<EnuPoint>,
}

impl SceneNode {
    /// Case-folded label used for matching.
    pub fn label_key(&self) -> String {
        self.label.to_lowercase()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SceneEdge {
    pub from: usize,
    pub to: usize,
    pub relation: Relation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneGraph {
    scene_id: String,
    center: Option<GeoPoint>,
    nodes: Vec<SceneNode>,
    edges: Vec<SceneEdge>,
}

impl SceneGraph {
    /// Validate and canonicalize raw parts. Edges may reference nodes in
    /// their input order and in either orientation.
    pub fn from_parts(
        scene_id: impl Into<String>,
        center: Option<GeoPoint>,
        nodes: Vec<SceneNode>,
        edges: Vec<SceneEdge>,
    ) -> Result<Self, SceneError> {
        let n = nodes.len();
        for node in &nodes {
            if node.ordinal == 0 {
                return Err(SceneError::InvalidGraph(format!("node `{}` has ordinal 0", node.label)));
            }
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| (&nodes[a].label, nodes[a].ordinal).cmp(&(&nodes[b].label, nodes[b].ordinal)));
        for w in order.windows(2) {
            let (a, b) = (&nodes[w[0]], &nodes[w[1]]);
            if a.label == b.label && a.ordinal == b.ordinal {
                return Err(SceneError::InvalidGraph(format!(
                    "duplicate node `{}` #{}",
                    a.label, a.ordinal
                )));
            }
        }
        let mut new_index = vec![0usize; n];
        for (new, &old) in order.iter().enumerate() {
            new_index[old] = new;
        }

        let mut by_pair: BTreeMap<(usize, usize), Relation> = BTreeMap::new();
        for e in edges {
            if e.from >= n || e.to >= n {
                return Err(SceneError::InvalidGraph(format!("edge {}->{} out of range", e.from, e.to)));
            }
            if e.from == e.to {
                return Err(SceneError::InvalidGraph(format!("self-loop on node {}", e.from)));
            }
            let (a, b) = (new_index[e.from], new_index[e.to]);
            let (key, rel) = if a < b { ((a, b), e.relation) } else { ((b, a), e.relation.opposite()) };
            if by_pair.insert(key, rel).is_some() {
                return Err(SceneError::InvalidGraph(format!("multiple edges between {a} and {b}")));
            }
        }
        let mut sorted_nodes: Vec<Option<SceneNode>> = nodes.into_iter().map(Some).collect();
        let nodes = order.iter().map(|&old| sorted_nodes[old].take().unwrap()).collect();
        let edges = by_pair
            .into_iter()
            .map(|((from, to), relation)| SceneEdge { from, to, relation })
            .collect();
        Ok(Self {
            scene_id: scene_id.into(),
            center,
            nodes,
            edges,
        })
    }

    pub fn scene_id(&self) -> &str {
        &self.scene_id
    }

    pub fn center(&self) -> Option<GeoPoint> {
        self.center
    }

    pub fn nodes(&self) -> &[SceneNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[SceneEdge] {
        &self.edges
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn with_scene_id(mut self, scene_id: impl Into<String>) -> Self {
        self.scene_id = scene_id.into();
        self
    }

    /// Dense `n x n` table where entry `[i][j]` is the relation of node `j`
    /// as seen from node `i`.
    pub fn relation_matrix(&self) -> Vec<Vec<Option<Relation>>> {
        let n = self.nodes.len();
        let mut m = vec![vec![None; n]; n];
        for e in &self.edges {
            m[e.from][e.to] = Some(e.relation);
            m[e.to][e.from] = Some(e.relation.opposite());
        }
        m
    }

    /// Copy without node positions or center.
    pub fn erase_positions(&self) -> SceneGraph {
        let mut g = self.clone();
        g.center = None;
        for node in &mut g.nodes {
            node.position = None;
        }
        g
    }

    /// Round positions to the millimeter so the graph survives a trip
    /// through the line format unchanged.
    pub fn quantized(mut self) -> SceneGraph {
        for node in &mut self.nodes {
            if let Some(p) = &mut node.position {
                *p = EnuPoint::planar(quantize_mm(p.x), quantize_mm(p.y));
            }
        }
        self
    }

    /// Subgraph induced by `keep` (node indices of this graph).
    pub fn induced(&self, keep: &[usize], scene_id: impl Into<String>) -> Result<SceneGraph, SceneError> {
        let mut remap = HashMap::new();
        for (new, &old) in keep.iter().enumerate() {
            if old >= self.nodes.len() || remap.insert(old, new).is_some() {
                return Err(SceneError::InvalidGraph(format!("bad induced node index {old}")));
            }
        }
        let nodes = keep.iter().map(|&i| self.nodes[i].clone()).collect();
        let edges = self
            .edges
            .iter()
            .filter_map(|e| {
                Some(SceneEdge {
                    from: *remap.get(&e.from)?,
                    to: *remap.get(&e.to)?,
                    relation: e.relation,
                })
            })
            .collect();
        SceneGraph::from_parts(scene_id, self.center, nodes, edges)
    }

    /// One JSON object on a single line with fixed field order and
    /// millimeter-rounded coordinates.
    pub fn to_json_line(&self) -> String {
        let mut out = String::with_capacity(64 + 48 * self.nodes.len() + 12 * self.edges.len());
        out.push_str("{\"id\":");
        out.push_str(&json_str(&self.scene_id));
        out.push_str(",\"center\":");
        match self.center {
            Some(c) => {
                let _ = write!(out, "[{},{}]", c.lat(), c.lon());
            }
            None => out.push_str("null"),
        }
        out.push_str(",\"nodes\":[");
        for (i, node) in self.nodes.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            out.push_str("{\"label\":");
            out.push_str(&json_str(&node.label));
            let _ = write!(out, ",\"ord\":{},\"xy\":", node.ordinal);
            match node.position {
                Some(p) => {
                    let _ = write!(out, "[{:.3},{:.3}]", quantize_mm(p.x), quantize_mm(p.y));
                }
                None => out.push_str("null"),
            }
            out.push('}');
        }
        out.push_str("],\"edges\":[");
        for (i, e) in self.edges.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            let _ = write!(out, "[{},{},\"{}\"]", e.from, e.to, e.relation.code());
        }
        out.push_str("]}");
        out
    }

    pub fn from_json_line(line: &str) -> Result<SceneGraph, SceneError> {
        #[derive(Deserialize)]
        struct RawNode {
            label: String,
            ord: u32,
            xy: Option<[f64; 2]>,
        }
        #[derive(Deserialize)]
        struct RawScene {
            id: String,
            center: Option<[f64; 2]>,
            nodes: Vec<RawNode>,
            edges: Vec<(usize, usize, String)>,
        }
        let raw: RawScene = serde_json::from_str(line).map_err(|e| SceneError::Format(e.to_string()))?;
        let center = raw
            .center
            .map(|[lat, lon]| GeoPoint::new(lat, lon))
            .transpose()
            .map_err(|e| SceneError::Format(e.to_string()))?;
        let nodes = raw
            .nodes
            .into_iter()
            .map(|n| SceneNode {
                label: n.label,
                ordinal: n.ord,
                position: n.xy.map(|[x, y]| EnuPoint::planar(x, y)),
            })
            .collect();
        let edges = raw
            .edges
            .into_iter()
            .map(|(from, to, code)| {
                let relation = Relation::from_code(&code)
                    .ok_or_else(|| SceneError::Format(format!("unknown relation code `{code}`")))?;
                Ok(SceneEdge { from, to, relation })
            })
            .collect::<Result<Vec<_>, SceneError>>()?;
        SceneGraph::from_parts(raw.id, center, nodes, edges)
    }
}

fn quantize_mm(v: f64) -> f64 {
    let q = (v * 1000.0).round() / 1000.0;
    if q == 0.0 {
        0.0
    } else {
        q
    }
}

fn json_str(s: &str) -> String {
    serde_json::to_string(s).expect("string serialization cannot fail")
}

fn assign_ordinals<'a>(labels: impl Iterator<Item = &'a str>) -> Vec<u32> {
    let mut seen: HashMap<&str, u32> = HashMap::new();
    labels
        .map(|label| {
            let count = seen.entry(label).or_insert(0);
            *count += 1;
            *count
        })
        .collect()
}

/// Build a map scene graph from positioned objects.
///
/// Repeated labels are numbered in input order. Each pair closer than
/// `edge_threshold` whose displacement has a defined cardinal relation gets
/// one edge.
pub fn build_map_graph(
    elements: &[(String, EnuPoint)],
    edge_threshold: f64,
    scene_id: impl Into<String>,
    center: Option<GeoPoint>,
) -> Result<SceneGraph, SceneError> {
    if elements.is_empty() {
        return Err(SceneError::EmptyScene);
    }
    let ordinals = assign_ordinals(elements.iter().map(|(l, _)| l.as_str()));
    let nodes = elements
        .iter()
        .zip(ordinals)
        .map(|((label, p), ordinal)| SceneNode {
            label: label.clone(),
            ordinal,
            position: Some(*p),
        })
        .collect();
    let mut edges = Vec::new();
    for i in 0..elements.len() {
        for j in i + 1..elements.len() {
            let (pi, pj) = (elements[i].1, elements[j].1);
            if enu_distance(pi, pj) >= edge_threshold {
                continue;
            }
            if let Some(relation) = direction_relation(pj.x - pi.x, pj.y - pi.y) {
                edges.push(SceneEdge { from: i, to: j, relation });
            }
        }
    }
    SceneGraph::from_parts(scene_id, center, nodes, edges)
}

/// Build a text scene graph. A parsed triple "S is R of O" becomes the edge
/// `O -> S` with relation `R`.
pub fn build_text_graph(parsed: &ParsedDescription, scene_id: impl Into<String>) -> Result<SceneGraph, SceneError> {
    if parsed.labels.is_empty() {
        return Err(SceneError::EmptyScene);
    }
    let mut index: HashMap<(&str, u32), usize> = HashMap::new();
    let mut nodes = Vec::new();
    for l in &parsed.labels {
        if index.contains_key(&(l.label.as_str(), l.ordinal)) {
            continue;
        }
        index.insert((l.label.as_str(), l.ordinal), nodes.len());
        nodes.push(SceneNode {
            label: l.label.clone(),
            ordinal: l.ordinal,
            position: None,
        });
    }
    let lookup = |r: &crate::textio::LabelRef| {
        index.get(&(r.label.as_str(), r.ordinal)).copied().ok_or_else(|| {
            SceneError::InconsistentDescription(format!("relation mentions unknown object `{r}`"))
        })
    };
    let mut by_pair: BTreeMap<(usize, usize), Relation> = BTreeMap::new();
    for rel in &parsed.relations {
        let s = lookup(&rel.subject)?;
        let o = lookup(&rel.object)?;
        if s == o {
            return Err(SceneError::InconsistentDescription(format!(
                "`{}` related to itself",
                rel.subject
            )));
        }
        let (key, relation) = if o < s { ((o, s), rel.relation) } else { ((s, o), rel.relation.opposite()) };
        match by_pair.get(&key) {
            Some(&existing) if existing != relation => {
                return Err(SceneError::InconsistentDescription(format!(
                    "conflicting relations between `{}` and `{}`",
                    rel.subject, rel.object
                )))
            }
            _ => {
                by_pair.insert(key, relation);
            }
        }
    }
    let edges = by_pair
        .into_iter()
        .map(|((from, to), relation)| SceneEdge { from, to, relation })
        .collect();
    SceneGraph::from_parts(scene_id, None, nodes, edges)
}

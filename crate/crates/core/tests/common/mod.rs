//! Independent reference implementations used by integration tests.
#![allow(dead_code)]

use std::collections::HashMap;

use rand::Rng;
use textplace::osm::{parse_osm_bytes, OsmElementSet};
use textplace::pipeline::GridSpec;
use textplace::retrieval::GedCosts;
use textplace::scenegraph::{Relation, SceneEdge, SceneGraph, SceneNode};
use textplace::synth::{synthetic_osm_xml, SynthConfig};

/// Cardinal relation written out case by case from the definition.
pub fn literal_direction(dx: f64, dy: f64) -> Option<Relation> {
    if dx.abs() < dy.abs() && dy > 0.0 {
        Some(Relation::North)
    } else if dx.abs() < dy.abs() && dy < 0.0 {
        Some(Relation::South)
    } else if dx.abs() > dy.abs() && dx > 0.0 {
        Some(Relation::East)
    } else if dx.abs() > dy.abs() && dx < 0.0 {
        Some(Relation::West)
    } else {
        None
    }
}

/// Random canonical graph with labels drawn from `labels` names.
pub fn random_graph<R: Rng>(rng: &mut R, max_nodes: usize, labels: u32, edge_p: f64) -> SceneGraph {
    let n = rng.random_range(1..=max_nodes);
    let mut counts: HashMap<String, u32> = HashMap::new();
    let nodes: Vec<SceneNode> = (0..n)
        .map(|_| {
            let label = format!("Obj{}", rng.random_range(0..labels));
            let ord = counts.entry(label.clone()).or_insert(0);
            *ord += 1;
            SceneNode {
                label,
                ordinal: *ord,
                position: None,
            }
        })
        .collect();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(edge_p) {
                edges.push(SceneEdge {
                    from: i,
                    to: j,
                    relation: Relation::ALL[rng.random_range(0..4)],
                });
            }
        }
    }
    SceneGraph::from_parts("random", None, nodes, edges).expect("valid by construction")
}

fn relation_between(g: &SceneGraph, i: usize, j: usize) -> Option<Relation> {
    g.edges().iter().find_map(|e| {
        if e.from == i && e.to == j {
            Some(e.relation)
        } else if e.from == j && e.to == i {
            Some(e.relation.opposite())
        } else {
            None
        }
    })
}

/// Edit cost of one complete assignment of `a`'s nodes (`None` = deleted).
pub fn assignment_cost(a: &SceneGraph, b: &SceneGraph, map: &[Option<usize>], c: &GedCosts) -> f64 {
    let mut cost = 0.0;
    let mut hit = vec![false; b.nodes().len()];
    for (i, m) in map.iter().enumerate() {
        match m {
            None => cost += c.node_delete,
            Some(t) => {
                hit[*t] = true;
                if a.nodes()[i].label.to_lowercase() != b.nodes()[*t].label.to_lowercase() {
                    cost += c.node_substitute;
                }
            }
        }
    }
    cost += hit.iter().filter(|h| !**h).count() as f64 * c.node_insert;
    let mut matched_b = 0usize;
    for e in a.edges() {
        match (map[e.from], map[e.to]) {
            (Some(s), Some(t)) => match relation_between(b, s, t) {
                Some(r) => {
                    matched_b += 1;
                    if r != e.relation {
                        cost += c.edge_substitute;
                    }
                }
                None => cost += c.edge_delete,
            },
            _ => cost += c.edge_delete,
        }
    }
    cost += (b.edges().len() - matched_b) as f64 * c.edge_insert;
    cost
}

/// Minimum over every injective partial mapping.
pub fn brute_force_ged(a: &SceneGraph, b: &SceneGraph, c: &GedCosts) -> f64 {
    fn go(a: &SceneGraph, b: &SceneGraph, c: &GedCosts, map: &mut Vec<Option<usize>>, used: &mut [bool], best: &mut f64) {
        if map.len() == a.nodes().len() {
            *best = best.min(assignment_cost(a, b, map, c));
            return;
        }
        map.push(None);
        go(a, b, c, map, used, best);
        map.pop();
        for t in 0..used.len() {
            if !used[t] {
                used[t] = true;
                map.push(Some(t));
                go(a, b, c, map, used, best);
                map.pop();
                used[t] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(a, b, c, &mut Vec::new(), &mut vec![false; b.nodes().len()], &mut best);
    best
}

/// Area under the ROC curve via pairwise comparison (ties count half).
pub fn auc(positives: &[f64], negatives: &[f64]) -> f64 {
    let mut wins = 0.0;
    for p in positives {
        for n in negatives {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (positives.len() * negatives.len()) as f64
}

/// Synthetic extract sized for `cells` grid cells 120 m apart.
pub fn synthetic_region(cells: usize, seed: u64) -> (OsmElementSet, GridSpec) {
    let cfg = SynthConfig::for_grid(cells, 120.0, seed);
    let xml = synthetic_osm_xml(&cfg).expect("valid config");
    let (set, _) = parse_osm_bytes(xml.as_bytes()).expect("generated XML parses");
    let (sw, ne) = cfg.bbox().expect("valid bbox");
    (set, GridSpec::new(sw, ne, cells))
}

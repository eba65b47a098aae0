//! Per-week spatial graphs over trap locations.
//!
//! Edges are directed: `u → v` means `u` is one of `v`'s `k` nearest
//! traps within `radius_km`, so messages flow from a node's nearest
//! neighbors into it. Distances are great-circle kilometers.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap, HashSet};
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::stats::quantile_sorted;

/// Mean Earth radius in kilometers.
pub const EARTH_RADIUS_KM: f64 = 6371.0088;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeoPoint {
    lat: f64,
    lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        if !(-90.0..=90.0).contains(&lat) {
            return Err(Error::Data(format!("latitude {lat} outside [-90, 90]")));
        }
        if !(-180.0..=180.0).contains(&lon) {
            return Err(Error::Data(format!("longitude {lon} outside [-180, 180]")));
        }
        Ok(Self { lat, lon })
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }
}

/// Haversine distance in kilometers.
pub fn geo_distance(a: GeoPoint, b: GeoPoint) -> f64 {
    let (p1, p2) = (a.lat.to_radians(), b.lat.to_radians());
    let dp = p2 - p1;
    let dl = (b.lon - a.lon).to_radians();
    let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    let h = h.clamp(0.0, 1.0);
    2.0 * EARTH_RADIUS_KM * h.sqrt().atan2((1.0 - h).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KnnParams {
    pub k: usize,
    pub radius_km: f64,
}

impl KnnParams {
    pub fn new(k: usize, radius_km: f64) -> Result<Self> {
        if k == 0 {
            return Err(Error::Param("k must be at least 1".into()));
        }
        if !radius_km.is_finite() || radius_km <= 0.0 {
            return Err(Error::Param(format!(
                "radius_km must be positive, got {radius_km}"
            )));
        }
        Ok(Self { k, radius_km })
    }
}

impl Default for KnnParams {
    fn default() -> Self {
        Self {
            k: 10,
            radius_km: 50.0,
        }
    }
}

/// An incoming edge.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub source: usize,
    pub distance_km: f64,
}

#[derive(PartialEq)]
struct Candidate(f64, usize);

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

/// For each node, its up-to-`k` nearest other nodes within the radius,
/// ordered by `(distance, index)`.
pub fn build_knn_graph(positions: &[GeoPoint], params: KnnParams) -> Vec<Vec<Neighbor>> {
    positions
        .iter()
        .enumerate()
        .map(|(v, &pv)| {
            // Max-heap holding the k best candidates seen so far.
            let mut heap = BinaryHeap::with_capacity(params.k + 1);
            for (u, &pu) in positions.iter().enumerate() {
                if u == v {
                    continue;
                }
                let d = geo_distance(pu, pv);
                if d > params.radius_km {
                    continue;
                }
                heap.push(Candidate(d, u));
                if heap.len() > params.k {
                    heap.pop();
                }
            }
            heap.into_sorted_vec()
                .into_iter()
                .map(|Candidate(distance_km, source)| Neighbor {
                    source,
                    distance_km,
                })
                .collect()
        })
        .collect()
}

/// One trap's state in a given week. `label` is `None` when the trap was
/// not checked that week.
#[derive(Clone, Debug, PartialEq)]
pub struct WeekObservation {
    pub trap_id: String,
    pub position: GeoPoint,
    pub label: Option<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpatialGraph {
    week: u32,
    node_ids: Vec<String>,
    positions: Vec<GeoPoint>,
    in_neighbors: Vec<Vec<Neighbor>>,
    labeled_mask: Vec<bool>,
}

impl SpatialGraph {
    /// Assembles a graph from explicit parts, checking the structural
    /// invariants (no self-edges, no duplicate edges, finite nonnegative
    /// distances, consistent lengths).
    pub fn from_parts(
        week: u32,
        node_ids: Vec<String>,
        positions: Vec<GeoPoint>,
        in_neighbors: Vec<Vec<Neighbor>>,
        labeled_mask: Vec<bool>,
    ) -> Result<Self> {
        let n = node_ids.len();
        if positions.len() != n || in_neighbors.len() != n || labeled_mask.len() != n {
            return Err(Error::Shape(format!(
                "graph parts disagree: {n} ids, {} positions, {} neighbor lists, {} mask entries",
                positions.len(),
                in_neighbors.len(),
                labeled_mask.len()
            )));
        }
        for (v, list) in in_neighbors.iter().enumerate() {
            let mut seen = HashSet::new();
            for nb in list {
                if nb.source >= n {
                    return Err(Error::Data(format!(
                        "edge into {v} from unknown node {}",
                        nb.source
                    )));
                }
                if nb.source == v {
                    return Err(Error::Data(format!("self-edge at node {}", node_ids[v])));
                }
                if !seen.insert(nb.source) {
                    return Err(Error::Data(format!(
                        "duplicate edge {} -> {}",
                        node_ids[nb.source], node_ids[v]
                    )));
                }
                if !nb.distance_km.is_finite() || nb.distance_km < 0.0 {
                    return Err(Error::Data(format!(
                        "invalid distance {} on edge into {}",
                        nb.distance_km, node_ids[v]
                    )));
                }
            }
        }
        Ok(Self {
            week,
            node_ids,
            positions,
            in_neighbors,
            labeled_mask,
        })
    }

    pub fn week(&self) -> u32 {
        self.week
    }

    pub fn num_nodes(&self) -> usize {
        self.node_ids.len()
    }

    pub fn num_edges(&self) -> usize {
        self.in_neighbors.iter().map(Vec::len).sum()
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    pub fn positions(&self) -> &[GeoPoint] {
        &self.positions
    }

    pub fn in_neighbors(&self, v: usize) -> &[Neighbor] {
        &self.in_neighbors[v]
    }

    pub fn labeled_mask(&self) -> &[bool] {
        &self.labeled_mask
    }

    /// `(src, dst)` index pairs.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.in_neighbors
            .iter()
            .enumerate()
            .flat_map(|(v, list)| list.iter().map(move |nb| (nb.source, v, nb.distance_km)))
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.node_ids.iter().position(|x| x == id)
    }

    /// Same nodes with every edge removed.
    pub fn without_edges(&self) -> Self {
        Self {
            in_neighbors: vec![Vec::new(); self.num_nodes()],
            ..self.clone()
        }
    }

    /// Keeps only the listed nodes (in the given order), dropping edges
    /// that touch removed nodes. Edges are not recomputed.
    pub fn induced_subgraph(&self, keep: &[usize]) -> Result<Self> {
        let mut remap = vec![usize::MAX; self.num_nodes()];
        for (new, &old) in keep.iter().enumerate() {
            remap[old] = new;
        }
        let in_neighbors = keep
            .iter()
            .map(|&old| {
                self.in_neighbors[old]
                    .iter()
                    .filter(|nb| remap[nb.source] != usize::MAX)
                    .map(|nb| Neighbor {
                        source: remap[nb.source],
                        distance_km: nb.distance_km,
                    })
                    .collect()
            })
            .collect();
        Self::from_parts(
            self.week,
            keep.iter().map(|&i| self.node_ids[i].clone()).collect(),
            keep.iter().map(|&i| self.positions[i]).collect(),
            in_neighbors,
            keep.iter().map(|&i| self.labeled_mask[i]).collect(),
        )
    }
}

fn graph_from_observations(
    week: u32,
    nodes: Vec<&WeekObservation>,
    params: KnnParams,
) -> Result<SpatialGraph> {
    let positions: Vec<GeoPoint> = nodes.iter().map(|o| o.position).collect();
    let in_neighbors = build_knn_graph(&positions, params);
    SpatialGraph::from_parts(
        week,
        nodes.iter().map(|o| o.trap_id.clone()).collect(),
        positions,
        in_neighbors,
        nodes.iter().map(|o| o.label.is_some()).collect(),
    )
}

/// Graph over the traps checked in `week` only.
pub fn build_supervised_graph(
    week: u32,
    observations: &[WeekObservation],
    params: KnnParams,
) -> Result<SpatialGraph> {
    let checked: Vec<&WeekObservation> =
        observations.iter().filter(|o| o.label.is_some()).collect();
    if checked.is_empty() {
        return Err(Error::Data(format!("week {week} has no checked traps")));
    }
    graph_from_observations(week, checked, params)
}

/// Graph over every trap with covariates in `week`; the labeled mask marks
/// the checked ones.
pub fn build_semisupervised_graph(
    week: u32,
    observations: &[WeekObservation],
    params: KnnParams,
) -> Result<SpatialGraph> {
    if observations.is_empty() {
        return Err(Error::Data(format!("week {week} has no traps")));
    }
    graph_from_observations(week, observations.iter().collect(), params)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConnectivityPartition {
    /// Sum of inverse in-edge distances per node (km⁻¹).
    pub scores: Vec<f64>,
    pub upper_threshold: f64,
    pub lower_threshold: f64,
    /// Nodes scoring strictly above the 80th percentile.
    pub upper: BTreeSet<String>,
    /// Nodes scoring strictly below the 20th percentile.
    pub lower: BTreeSet<String>,
}

pub fn connectivity_partition(graph: &SpatialGraph) -> Result<ConnectivityPartition> {
    if graph.num_nodes() == 0 {
        return Err(Error::Data(
            "connectivity partition of an empty graph".into(),
        ));
    }
    let mut scores = Vec::with_capacity(graph.num_nodes());
    for v in 0..graph.num_nodes() {
        let mut s = 0.0;
        for nb in graph.in_neighbors(v) {
            if nb.distance_km == 0.0 {
                return Err(Error::Data(format!(
                    "zero distance between {} and {}; duplicate coordinates must be removed",
                    graph.node_ids()[nb.source],
                    graph.node_ids()[v]
                )));
            }
            s += 1.0 / nb.distance_km;
        }
        scores.push(s);
    }
    let mut sorted = scores.clone();
    sorted.sort_by(f64::total_cmp);
    let upper_threshold = quantile_sorted(&sorted, 0.8).expect("nonempty");
    let lower_threshold = quantile_sorted(&sorted, 0.2).expect("nonempty");
    let pick = |pred: &dyn Fn(f64) -> bool| -> BTreeSet<String> {
        scores
            .iter()
            .zip(graph.node_ids())
            .filter(|(s, _)| pred(**s))
            .map(|(_, id)| id.clone())
            .collect()
    };
    let upper = pick(&|s| s > upper_threshold);
    let lower = pick(&|s| s < lower_threshold);
    Ok(ConnectivityPartition {
        scores,
        upper_threshold,
        lower_threshold,
        upper,
        lower,
    })
}

pub const EDGE_LIST_HEADER: &str = "week,src_id,dst_id,distance_km";

/// Edge list text: header, then `week,src_id,dst_id,distance_km` lines
/// (6-decimal distances) in lexicographic order.
pub fn edge_list(graphs: &[SpatialGraph]) -> String {
    let mut lines: Vec<String> = graphs
        .iter()
        .flat_map(|g| {
            g.edges().map(move |(s, d, km)| {
                format!("{},{},{},{:.6}", g.week, g.node_ids[s], g.node_ids[d], km)
            })
        })
        .collect();
    lines.sort();
    let mut out = String::with_capacity(lines.len() * 32);
    out.push_str(EDGE_LIST_HEADER);
    out.push('\n');
    for l in lines {
        let _ = writeln!(out, "{l}");
    }
    out
}

//! Built-in synthetic benchmarks.
//!
//! `river-small` is a 16-node confluence tree driven by sinusoidal headwater
//! inflows over a falling bed, stepped with the momentum simulator.
//! `traffic-small` is a 12-node cyclic road network stepped with the
//! mass-conservation simulator under a relaxation closure. Both are fully
//! deterministic given a seed and small enough for test-suite training runs.

use crate::graph::DirectedGraph;
use crate::pdesim::{
    BoundaryForcing, InitialState, RiverState, SimConfig, TrafficClosure, TrafficState,
};

/// A ready-to-run simulation scenario.
#[derive(Debug, Clone)]
pub struct Preset {
    pub name: &'static str,
    pub graph: DirectedGraph,
    pub initial: InitialState,
    pub sim: SimConfig,
    pub forcing: Vec<BoundaryForcing>,
    /// Semantic names of the emitted series variables.
    pub variables: [&'static str; 2],
}

/// Names of the shipped presets.
pub const PRESET_NAMES: [&str; 2] = ["river-small", "traffic-small"];

pub fn by_name(name: &str, steps: usize) -> Option<Preset> {
    match name {
        "river-small" => Some(river_small(steps)),
        "traffic-small" => Some(traffic_small(steps)),
        _ => None,
    }
}

/// 16-node river tree: a main stem `n00 -> n02 -> ... -> n14 -> n15` with a
/// side headwater joining at every confluence.
pub fn river_small_graph() -> DirectedGraph {
    let labels: Vec<String> = (0..16).map(|i| format!("n{i:02}")).collect();
    let mut edges = Vec::new();
    for k in 0..7 {
        let stem = 2 * k;
        let side = 2 * k + 1;
        let next = 2 * k + 2;
        edges.push((labels[stem].clone(), labels[next].clone()));
        edges.push((labels[side].clone(), labels[next].clone()));
    }
    edges.push((labels[14].clone(), labels[15].clone()));

    // features: length, slope, distance
    let features: Vec<Vec<f64>> = (0..edges.len())
        .map(|e| {
            let length = 1.0 + 0.08 * ((e * 3) % 4) as f64;
            let slope = 0.1;
            let distance = 1.5 * length;
            vec![length, slope, distance]
        })
        .collect();
    DirectedGraph::from_parts(&labels, &edges, &features).expect("preset graph is valid")
}

/// Bed elevation consistent with the per-edge slope feature: outlets sit at
/// zero and every edge climbs by its slope going upstream.
pub fn river_small_elevation(g: &DirectedGraph) -> Vec<f64> {
    let n = g.num_nodes();
    let mut z = vec![0.0; n];
    for _ in 0..n {
        for (e, &(s, d)) in g.edges().iter().enumerate() {
            let slope = g.edge_features()[e][1];
            z[s] = z[d] + slope;
        }
    }
    z
}

/// Headwater nodes (no upstream neighbors) in label order.
pub fn headwaters(g: &DirectedGraph) -> Vec<usize> {
    (0..g.num_nodes())
        .filter(|&i| g.upstream_neighbors(i).map(|u| u.is_empty()).unwrap_or(false))
        .collect()
}

pub fn river_small(steps: usize) -> Preset {
    let graph = river_small_graph();
    let n = graph.num_nodes();
    let z = river_small_elevation(&graph);
    let initial = InitialState::River(
        RiverState::new(vec![1.0; n], z, 9.81).expect("valid initial state"),
    );
    let forcing: Vec<BoundaryForcing> = headwaters(&graph)
        .into_iter()
        .enumerate()
        .map(|(k, node)| BoundaryForcing {
            node: graph.label(node).to_string(),
            base: 1.0,
            amplitude: 0.4,
            period: 40.0 + 7.0 * k as f64,
            phase: 0.3 * k as f64,
            gust_amplitude: 0.35,
            gust_period: 8,
        })
        .collect();
    Preset {
        name: "river-small",
        graph,
        initial,
        sim: SimConfig {
            dt: 0.2,
            dx: 1.0,
            steps,
            nu: 0.0,
            noise_sigma: 0.02,
            closure: None,
        },
        forcing,
        variables: ["u", "z"],
    }
}

/// 12-node cyclic road network: a ring with two chords, so some junctions
/// have two incoming roads and every node sits on a cycle.
pub fn traffic_small_graph() -> DirectedGraph {
    let labels: Vec<String> = (0..12).map(|i| format!("t{i:02}")).collect();
    let mut edges: Vec<(String, String)> = (0..12)
        .map(|i| (labels[i].clone(), labels[(i + 1) % 12].clone()))
        .collect();
    edges.push((labels[0].clone(), labels[6].clone()));
    edges.push((labels[3].clone(), labels[9].clone()));
    let features: Vec<Vec<f64>> = (0..edges.len())
        .map(|e| vec![1.0 + 0.1 * ((e * 5) % 3) as f64])
        .collect();
    DirectedGraph::from_parts(&labels, &edges, &features).expect("preset graph is valid")
}

pub fn traffic_small(steps: usize) -> Preset {
    let graph = traffic_small_graph();
    let n = graph.num_nodes();
    let rho: Vec<f64> = (0..n)
        .map(|i| 0.4 + 0.2 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).sin())
        .collect();
    let initial = InitialState::Traffic(
        TrafficState::new(rho, vec![0.8; n]).expect("valid initial state"),
    );
    let forcing = vec![
        BoundaryForcing {
            node: "t00".into(),
            base: 0.5,
            amplitude: 0.3,
            period: 45.0,
            phase: 0.0,
            gust_amplitude: 0.2,
            gust_period: 6,
        },
        BoundaryForcing {
            node: "t05".into(),
            base: 0.4,
            amplitude: 0.25,
            period: 67.0,
            phase: 1.1,
            gust_amplitude: 0.2,
            gust_period: 9,
        },
    ];
    Preset {
        name: "traffic-small",
        graph,
        initial,
        sim: SimConfig {
            dt: 0.2,
            dx: 1.0,
            steps,
            nu: 0.0,
            noise_sigma: 0.02,
            closure: Some(TrafficClosure {
                u_free: 1.0,
                rho_max: 1.5,
                tau: 5.0,
            }),
        },
        forcing,
        variables: ["rho", "u"],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pdesim::simulate;

    #[test]
    fn river_small_shape() {
        let g = river_small_graph();
        assert_eq!(g.num_nodes(), 16);
        assert_eq!(g.num_edges(), 15);
        assert_eq!(headwaters(&g).len(), 8);
        let z = river_small_elevation(&g);
        // strictly downhill along every edge
        for &(s, d) in g.edges() {
            assert!(z[s] > z[d]);
        }
    }

    #[test]
    fn traffic_small_shape() {
        let g = traffic_small_graph();
        assert_eq!(g.num_nodes(), 12);
        assert_eq!(g.num_edges(), 14);
        // every node lies on the ring, so none is a headwater
        assert!(headwaters(&g).is_empty());
    }

    #[test]
    fn presets_simulate_cleanly() {
        for name in PRESET_NAMES {
            let p = by_name(name, 300).unwrap();
            let out = simulate(&p.initial, &p.graph, &p.sim, &p.forcing, 1).unwrap();
            assert_eq!(out.series.steps(), 300);
            assert!(out.cfl_max <= 1.0, "{name}: cfl {}", out.cfl_max);
        }
    }
}

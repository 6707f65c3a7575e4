//! Synchronous message-passing simulator for the agent network.
//!
//! Agents talk only to their coupling neighbours. Every exchange is a barrier; reductions
//! flood along edges until no value changes, and every scalar sent is counted.

use std::collections::VecDeque;
use std::fmt::Write as _;

use nalgebra::DVector;

use crate::problem::CoupledProblem;

/// Communication graph derived from the index sets.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentGraph {
    /// Neighbours of each agent, self excluded, ascending.
    pub adjacency: Vec<Vec<usize>>,
    /// Owners of each global index, ascending.
    pub owners: Vec<Vec<usize>>,
    /// Index sets, so exchanges can map global slots back to local positions.
    pub index_sets: Vec<Vec<usize>>,
}

impl AgentGraph {
    pub fn from_problem(problem: &CoupledProblem) -> Self {
        let adjacency = problem
            .neighbors
            .iter()
            .enumerate()
            .map(|(i, ne)| ne.iter().copied().filter(|&j| j != i).collect())
            .collect();
        Self {
            adjacency,
            owners: problem.owners.clone(),
            index_sets: problem.agents.iter().map(|a| a.indices.clone()).collect(),
        }
    }

    /// A bare graph without index ownership, for reductions only.
    pub fn from_edges(nodes: usize, edges: &[(usize, usize)]) -> Self {
        let mut adjacency = vec![Vec::new(); nodes];
        for &(a, b) in edges {
            if a != b {
                adjacency[a].push(b);
                adjacency[b].push(a);
            }
        }
        for ne in &mut adjacency {
            ne.sort_unstable();
            ne.dedup();
        }
        Self { adjacency, owners: Vec::new(), index_sets: vec![Vec::new(); nodes] }
    }

    pub fn nodes(&self) -> usize {
        self.adjacency.len()
    }

    /// Component label of every node (labels are the smallest node id in the component).
    pub fn components(&self) -> Vec<usize> {
        let mut label = vec![usize::MAX; self.nodes()];
        for start in 0..self.nodes() {
            if label[start] != usize::MAX {
                continue;
            }
            label[start] = start;
            let mut queue = VecDeque::from([start]);
            while let Some(u) = queue.pop_front() {
                for &v in &self.adjacency[u] {
                    if label[v] == usize::MAX {
                        label[v] = start;
                        queue.push_back(v);
                    }
                }
            }
        }
        label
    }

    pub fn is_connected(&self) -> bool {
        self.components().iter().all(|&c| c == 0)
    }
}

/// One recorded edge message.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EdgeMessage {
    pub round: usize,
    pub from: usize,
    pub to: usize,
    pub units: usize,
}

/// Message accounting. Per-edge records are only kept when requested.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MessageLog {
    /// Scalar units sent in each round.
    pub per_round: Vec<usize>,
    pub total_units: usize,
    pub record_edges: bool,
    pub edges: Vec<EdgeMessage>,
}

impl MessageLog {
    pub fn rounds(&self) -> usize {
        self.per_round.len()
    }

    fn open_round(&mut self) -> usize {
        self.per_round.push(0);
        self.per_round.len() - 1
    }

    fn send(&mut self, round: usize, from: usize, to: usize, units: usize) {
        self.per_round[round] += units;
        self.total_units += units;
        if self.record_edges {
            self.edges.push(EdgeMessage { round, from, to, units });
        }
    }

    /// `round,from,to,units` rows for the recorded edge messages.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("round,from,to,units\n");
        for e in &self.edges {
            let _ = writeln!(out, "{},{},{},{}", e.round, e.from, e.to, e.units);
        }
        out
    }
}

/// Outcome of a flooding reduction.
#[derive(Debug, Clone, PartialEq)]
pub struct Consensus<T> {
    /// Value each node holds after flooding.
    pub values: Vec<T>,
    /// Rounds run, including the final round in which nothing changed.
    pub rounds: usize,
    /// Set when the graph splits into several components, so `values` are per-component.
    pub multi_component: bool,
}

/// The simulated network: graph plus message log.
#[derive(Debug, Clone)]
pub struct Network {
    pub graph: AgentGraph,
    pub log: MessageLog,
}

impl Network {
    pub fn new(graph: AgentGraph) -> Self {
        Self { graph, log: MessageLog::default() }
    }

    pub fn for_problem(problem: &CoupledProblem) -> Self {
        Self::new(AgentGraph::from_problem(problem))
    }

    pub fn with_edge_recording(mut self) -> Self {
        self.log.record_edges = true;
        self
    }

    /// Every agent sends its value for each shared index to the other owners; returns the
    /// per-agent averages over their index sets. Sums run in ascending agent order.
    pub fn exchange_shared(&mut self, contributions: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let round = self.log.open_round();
        // Agent-major accumulation: each slot receives owners in ascending order.
        let mut sums = vec![0.0; self.graph.owners.len()];
        for (set, c) in self.graph.index_sets.iter().zip(contributions) {
            for (l, &j) in set.iter().enumerate() {
                sums[j] += c[l];
            }
        }
        for own in &self.graph.owners {
            for &from in own {
                for &to in own.iter().filter(|&&to| to != from) {
                    self.log.send(round, from, to, 1);
                }
            }
        }
        self.graph
            .index_sets
            .iter()
            .map(|set| {
                DVector::from_iterator(
                    set.len(),
                    set.iter().map(|&j| sums[j] / self.graph.owners[j].len() as f64),
                )
            })
            .collect()
    }

    fn flood(&mut self, values: &[f64], better: impl Fn(f64, f64) -> bool) -> Consensus<f64> {
        assert_eq!(values.len(), self.graph.nodes());
        let mut cur = values.to_vec();
        let mut rounds = 0;
        loop {
            let round = self.log.open_round();
            rounds += 1;
            let mut next = cur.clone();
            for (u, ne) in self.graph.adjacency.iter().enumerate() {
                for &v in ne {
                    self.log.send(round, v, u, 1);
                    if better(cur[v], next[u]) {
                        next[u] = cur[v];
                    }
                }
            }
            let changed = next != cur;
            cur = next;
            if !changed {
                break;
            }
        }
        let multi_component = !self.graph.is_connected();
        Consensus { values: cur, rounds, multi_component }
    }

    pub fn min_consensus(&mut self, values: &[f64]) -> Consensus<f64> {
        self.flood(values, |cand, held| cand < held)
    }

    pub fn max_consensus(&mut self, values: &[f64]) -> Consensus<f64> {
        self.flood(values, |cand, held| cand > held)
    }

    /// True iff every agent raised its flag.
    pub fn flag_consensus(&mut self, flags: &[bool]) -> bool {
        let as_num: Vec<f64> = flags.iter().map(|&f| if f { 1.0 } else { 0.0 }).collect();
        self.global(&as_num, Self::min_consensus, "flag") == 1.0
    }

    /// Network-wide minimum. On a disconnected graph the component minima disagree; the
    /// orchestrator then takes the global minimum directly and logs a warning.
    pub fn global_min(&mut self, values: &[f64]) -> f64 {
        self.global(values, Self::min_consensus, "min")
    }

    pub fn global_max(&mut self, values: &[f64]) -> f64 {
        self.global(values, Self::max_consensus, "max")
    }

    fn global(
        &mut self,
        values: &[f64],
        reduce: fn(&mut Self, &[f64]) -> Consensus<f64>,
        what: &str,
    ) -> f64 {
        let res = reduce(self, values);
        if res.multi_component {
            log::warn!("{what}-consensus on a disconnected agent graph; using orchestrator fallback");
            let direct = if what == "max" {
                values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            } else {
                values.iter().copied().fold(f64::INFINITY, f64::min)
            };
            return direct;
        }
        res.values[0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{generate, AgentSubproblem, ProblemGenConfig};
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn owners_only(sets: Vec<Vec<usize>>, n: usize) -> CoupledProblem {
        let agents = sets
            .into_iter()
            .enumerate()
            .map(|(i, set)| {
                let d = set.len();
                AgentSubproblem::new(
                    i,
                    DMatrix::identity(d, d),
                    DVector::zeros(d),
                    0.0,
                    DMatrix::zeros(0, d),
                    DVector::zeros(0),
                    DMatrix::zeros(0, d),
                    DVector::zeros(0),
                    set,
                )
                .unwrap()
            })
            .collect();
        CoupledProblem::new(n, agents).unwrap()
    }

    #[test]
    fn path_min_takes_two_rounds() {
        let mut net = Network::new(AgentGraph::from_edges(3, &[(0, 1), (1, 2)]));
        let res = net.min_consensus(&[3.0, 1.0, 2.0]);
        assert_eq!(res.values, vec![1.0; 3]);
        assert_eq!(res.rounds, 2);
        assert!(!res.multi_component);
    }

    #[test]
    fn equal_values_stop_after_detection_round() {
        let mut net = Network::new(AgentGraph::from_edges(4, &[(0, 1), (1, 2), (2, 3)]));
        assert_eq!(net.min_consensus(&[5.0; 4]).rounds, 1);
    }

    #[test]
    fn disconnected_graph_reports_component_minima() {
        let mut net = Network::new(AgentGraph::from_edges(4, &[(0, 1), (2, 3)]));
        let res = net.min_consensus(&[4.0, 2.0, 7.0, 9.0]);
        assert!(res.multi_component);
        assert_eq!(res.values, vec![2.0, 2.0, 7.0, 7.0]);
        assert_eq!(net.global_min(&[4.0, 2.0, 7.0, 9.0]), 2.0);
        assert_eq!(net.global_max(&[4.0, 2.0, 7.0, 9.0]), 9.0);
    }

    #[test]
    fn flags_require_unanimity() {
        let mut net = Network::new(AgentGraph::from_edges(3, &[(0, 1), (1, 2)]));
        assert!(net.flag_consensus(&[true, true, true]));
        assert!(!net.flag_consensus(&[true, false, true]));
    }

    #[test]
    fn single_owner_value_passes_through() {
        let problem = owners_only(vec![vec![0, 1], vec![1, 2]], 3);
        let mut net = Network::for_problem(&problem);
        let out = net.exchange_shared(&[
            DVector::from_vec(vec![5.0, 1.0]),
            DVector::from_vec(vec![3.0, 7.0]),
        ]);
        assert_eq!(out[0].as_slice(), &[5.0, 2.0]);
        assert_eq!(out[1].as_slice(), &[2.0, 7.0]);
        assert_eq!(net.log.total_units, 2);
    }

    #[test]
    fn exchange_units_match_owner_combinatorics() {
        let problem = generate(&ProblemGenConfig::desk(12)).unwrap();
        let mut net = Network::for_problem(&problem).with_edge_recording();
        let contributions: Vec<_> =
            problem.agents.iter().map(|a| DVector::repeat(a.dim(), 1.0)).collect();
        let out = net.exchange_shared(&contributions);
        let expect: usize = problem.owners.iter().map(|o| o.len() * (o.len() - 1)).sum();
        assert_eq!(net.log.total_units, expect);
        assert_eq!(net.log.edges.len(), expect);
        assert!(out.iter().all(|v| v.iter().all(|&e| e == 1.0)));
        assert!(net.log.to_csv().starts_with("round,from,to,units\n"));
    }

    #[test]
    fn message_log_is_deterministic() {
        let problem = generate(&ProblemGenConfig::desk(13)).unwrap();
        let run = || {
            let mut net = Network::for_problem(&problem).with_edge_recording();
            let vals: Vec<f64> = (0..problem.num_agents()).map(|i| (i * 7 % 5) as f64).collect();
            net.global_min(&vals);
            net.log.to_csv()
        };
        assert_eq!(run(), run());
    }

    fn random_graph(nodes: usize, seed: u64) -> AgentGraph {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut edges: Vec<(usize, usize)> = (1..nodes).map(|v| (rng.random_range(0..v), v)).collect();
        for _ in 0..nodes {
            edges.push((rng.random_range(0..nodes), rng.random_range(0..nodes)));
        }
        AgentGraph::from_edges(nodes, &edges)
    }

    fn diameter(g: &AgentGraph) -> usize {
        (0..g.nodes())
            .map(|s| {
                let mut dist = vec![usize::MAX; g.nodes()];
                dist[s] = 0;
                let mut q = VecDeque::from([s]);
                while let Some(u) = q.pop_front() {
                    for &v in &g.adjacency[u] {
                        if dist[v] == usize::MAX {
                            dist[v] = dist[u] + 1;
                            q.push_back(v);
                        }
                    }
                }
                dist.into_iter().max().unwrap()
            })
            .max()
            .unwrap()
    }

    proptest! {
        #[test]
        fn flooding_matches_sequential_min(
            vals in proptest::collection::vec(-100.0f64..100.0, 2..20),
            seed in 0u64..1000,
        ) {
            let g = random_graph(vals.len(), seed);
            let d = diameter(&g);
            let mut net = Network::new(g);
            let res = net.min_consensus(&vals);
            let seq = vals.iter().copied().fold(f64::INFINITY, f64::min);
            prop_assert!(res.values.iter().all(|&v| v == seq));
            prop_assert!(res.rounds <= d + 1);
        }
    }
}

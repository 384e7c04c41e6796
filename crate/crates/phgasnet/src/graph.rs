//! Directed pipe-network topology: incidence, node classification, flow
//! orientation sets, and the node-flow coupling matrix.
//!
//! Networks are connected, finite, directed graphs whose boundary nodes have
//! exactly one adjacent pipe. Every pipe carries a declared nominal flow
//! direction (a sign hint relative to its edge orientation), which fixes the
//! incoming/outgoing pipe sets of each interior node before simulation;
//! flow-direction switching during a run is unsupported.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gas::PipeParams;

/// A directed edge (pipe) of the network.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Pipe {
    /// Edge identifier (from the configuration).
    pub id: String,
    /// Tail node index (the pipe's x = 0 end).
    pub tail: usize,
    /// Head node index (the pipe's x = L end).
    pub head: usize,
    /// Physical parameters.
    pub params: PipeParams,
    /// Number of finite elements on this pipe.
    pub n_elements: usize,
    /// Declared nominal flow direction: +1 along the edge orientation,
    /// −1 against it.
    pub flow_hint: i8,
}

/// Directed pipe network with precomputed node classification.
#[derive(Debug, Clone)]
pub struct NetworkGraph {
    /// Node identifiers in file order; internal indices follow this order.
    pub node_ids: Vec<String>,
    /// Pipes in file order; internal edge indices follow this order.
    pub pipes: Vec<Pipe>,
    /// Interior node indices (degree ≥ 2), in node order.
    pub interior_nodes: Vec<usize>,
    /// Boundary node indices (degree 1), in node order.
    pub boundary_nodes: Vec<usize>,
    /// Adjacency: for each node, the (edge index, is_tail) pairs in edge order.
    pub adjacency: Vec<Vec<(usize, bool)>>,
}

/// Incoming/outgoing pipe sets per interior node, fixed for the whole run.
#[derive(Debug, Clone)]
pub struct NodeFlowSets {
    /// For each interior node (in `interior_nodes` order): pipes whose
    /// nominal flow enters the node.
    pub incoming: Vec<Vec<usize>>,
    /// For each interior node: pipes whose nominal flow leaves the node.
    pub outgoing: Vec<Vec<usize>>,
}

impl NetworkGraph {
    /// Builds and validates a network graph.
    ///
    /// Checks connectivity, rejects isolated nodes, and requires every
    /// boundary node to have exactly one adjacent pipe (which holds by
    /// definition: boundary nodes are the degree-1 nodes, and degree-0 nodes
    /// are rejected).
    pub fn new(node_ids: Vec<String>, pipes: Vec<Pipe>) -> Result<Self> {
        let n_nodes = node_ids.len();
        if n_nodes == 0 {
            return Err(Error::InvalidTopology("network has no nodes".into()));
        }
        if pipes.is_empty() {
            return Err(Error::InvalidTopology("network has no pipes".into()));
        }
        let mut adjacency: Vec<Vec<(usize, bool)>> = vec![Vec::new(); n_nodes];
        for (k, pipe) in pipes.iter().enumerate() {
            if pipe.tail >= n_nodes || pipe.head >= n_nodes {
                return Err(Error::InvalidTopology(format!(
                    "pipe '{}' references an unknown node",
                    pipe.id
                )));
            }
            if pipe.tail == pipe.head {
                return Err(Error::InvalidTopology(format!("pipe '{}' is a self-loop", pipe.id)));
            }
            if pipe.flow_hint != 1 && pipe.flow_hint != -1 {
                return Err(Error::InvalidTopology(format!(
                    "pipe '{}' has flow hint {}, expected +1 or -1",
                    pipe.id, pipe.flow_hint
                )));
            }
            pipe.params.validate()?;
            adjacency[pipe.tail].push((k, true));
            adjacency[pipe.head].push((k, false));
        }
        // Reject isolated nodes and check connectivity by breadth-first search.
        for (v, adj) in adjacency.iter().enumerate() {
            if adj.is_empty() {
                return Err(Error::InvalidTopology(format!(
                    "node '{}' has no adjacent pipe",
                    node_ids[v]
                )));
            }
        }
        let mut seen = vec![false; n_nodes];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for &(k, is_tail) in &adjacency[v] {
                let w = if is_tail { pipes[k].head } else { pipes[k].tail };
                if !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        if let Some(v) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidTopology(format!(
                "network is disconnected: node '{}' is unreachable",
                node_ids[v]
            )));
        }
        let (mut interior, mut boundary) = (Vec::new(), Vec::new());
        for (v, adj) in adjacency.iter().enumerate() {
            if adj.len() == 1 {
                boundary.push(v);
            } else {
                interior.push(v);
            }
        }
        Ok(Self {
            node_ids,
            pipes,
            interior_nodes: interior,
            boundary_nodes: boundary,
            adjacency,
        })
    }

    /// Area-weighted incidence value of `node` with respect to `edge`:
    /// `+A^ω` if the edge leaves the node, `−A^ω` if it enters, 0 otherwise.
    pub fn incidence(&self, node: usize, edge: usize) -> Result<f64> {
        if node >= self.node_ids.len() {
            return Err(Error::InvalidTopology(format!("unknown node index {node}")));
        }
        let pipe = self
            .pipes
            .get(edge)
            .ok_or_else(|| Error::InvalidTopology(format!("unknown edge index {edge}")))?;
        Ok(if pipe.tail == node {
            pipe.params.area
        } else if pipe.head == node {
            -pipe.params.area
        } else {
            0.0
        })
    }

    /// Node index by identifier.
    pub fn node_index(&self, id: &str) -> Result<usize> {
        self.node_ids
            .iter()
            .position(|n| n == id)
            .ok_or_else(|| Error::InvalidTopology(format!("unknown node '{id}'")))
    }

    /// Edge index by identifier.
    pub fn edge_index(&self, id: &str) -> Result<usize> {
        self.pipes
            .iter()
            .position(|p| p.id == id)
            .ok_or_else(|| Error::InvalidTopology(format!("unknown pipe '{id}'")))
    }

    /// Whether `node` is a boundary node.
    #[must_use]
    pub fn is_boundary(&self, node: usize) -> bool {
        self.adjacency[node].len() == 1
    }

    /// Computes the incoming/outgoing pipe sets of every interior node from
    /// the declared flow hints.
    ///
    /// A pipe whose nominal flow points along its orientation enters its head
    /// node and leaves its tail node; a reversed hint swaps the roles.
    /// Interior nodes with an empty incoming or outgoing set are rejected:
    /// the outgoing-entropy coupling condition is undefined there.
    pub fn flow_sets(&self) -> Result<NodeFlowSets> {
        let mut incoming = Vec::with_capacity(self.interior_nodes.len());
        let mut outgoing = Vec::with_capacity(self.interior_nodes.len());
        for &v in &self.interior_nodes {
            let mut inc = Vec::new();
            let mut out = Vec::new();
            for &(k, is_tail) in &self.adjacency[v] {
                let forward = self.pipes[k].flow_hint > 0;
                // Flow enters the node when it arrives at this end.
                let enters = forward != is_tail;
                if enters {
                    inc.push(k);
                } else {
                    out.push(k);
                }
            }
            if inc.is_empty() || out.is_empty() {
                return Err(Error::InvalidTopology(format!(
                    "interior node '{}' has {} incoming and {} outgoing pipes; \
                     the entropy mix requires at least one of each",
                    self.node_ids[v],
                    inc.len(),
                    out.len()
                )));
            }
            incoming.push(inc);
            outgoing.push(out);
        }
        Ok(NodeFlowSets { incoming, outgoing })
    }

    /// Ordering of the interior-node boundary-flow unknowns `u_0`: one entry
    /// per (interior node, adjacent pipe end), grouped by node in
    /// `interior_nodes` order with adjacent pipes in edge-list order.
    ///
    /// Returns tuples `(node index, edge index, end_is_tail)`.
    #[must_use]
    pub fn u0_ordering(&self) -> Vec<(usize, usize, bool)> {
        let mut order = Vec::new();
        for &v in &self.interior_nodes {
            for &(k, is_tail) in &self.adjacency[v] {
                order.push((v, k, is_tail));
            }
        }
        order
    }

    /// The coupling matrix `C ∈ R^{|N_0|×|u_0|}`: `C[i][k] = 1` iff the k-th
    /// boundary-flow unknown lives on a pipe end adjacent to the i-th
    /// interior node. Row sums equal node degrees; column sums equal one.
    #[must_use]
    pub fn coupling_matrix(&self) -> Vec<Vec<f64>> {
        let order = self.u0_ordering();
        let mut c = vec![vec![0.0; order.len()]; self.interior_nodes.len()];
        for (col, &(node, _, _)) in order.iter().enumerate() {
            let row = self
                .interior_nodes
                .iter()
                .position(|&v| v == node)
                .expect("u0 ordering references interior nodes only");
            c[row][col] = 1.0;
        }
        c
    }
}


#[cfg(test)]
mod tests {
    use super::test_graphs::*;
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn incidence_star() {
        let g = star();
        assert_relative_eq!(g.incidence(0, 0).unwrap(), 1.0);
        assert_relative_eq!(g.incidence(1, 0).unwrap(), -1.0);
        assert_relative_eq!(g.incidence(1, 1).unwrap(), 1.0);
        assert_relative_eq!(g.incidence(3, 1).unwrap(), 0.0);
    }

    #[test]
    fn incidence_area_weighted() {
        let mut g = star();
        g.pipes[0].params.area = 2.0;
        assert_relative_eq!(g.incidence(1, 0).unwrap(), -2.0);
    }

    #[test]
    fn incidence_antisymmetric_under_edge_flip() {
        let mut g = star();
        let before = (g.incidence(0, 0).unwrap(), g.incidence(1, 0).unwrap());
        let (t, h) = (g.pipes[0].tail, g.pipes[0].head);
        g.pipes[0].tail = h;
        g.pipes[0].head = t;
        assert_relative_eq!(g.incidence(0, 0).unwrap(), -before.0);
        assert_relative_eq!(g.incidence(1, 0).unwrap(), -before.1);
    }

    #[test]
    fn classify_star_and_diamond() {
        let g = star();
        assert_eq!(g.interior_nodes, vec![1]);
        assert_eq!(g.boundary_nodes, vec![0, 2, 3]);
        let d = diamond([55, 50, 50, 50, 50, 55]);
        assert_eq!(d.interior_nodes, vec![1, 2, 3, 4]);
        assert_eq!(d.boundary_nodes, vec![0, 5]);
    }

    #[test]
    fn single_edge_both_boundary() {
        let g = NetworkGraph::new(
            vec!["a".into(), "b".into()],
            vec![Pipe {
                id: "p".into(),
                tail: 0,
                head: 1,
                params: default_params(1.0),
                n_elements: 2,
                flow_hint: 1,
            }],
        )
        .unwrap();
        assert_eq!(g.boundary_nodes, vec![0, 1]);
        assert!(g.interior_nodes.is_empty());
    }

    #[test]
    fn disconnected_rejected() {
        let nodes = vec!["a".into(), "b".into(), "c".into(), "d".into()];
        let mk = |id: &str, tail, head| Pipe {
            id: id.into(),
            tail,
            head,
            params: default_params(1.0),
            n_elements: 2,
            flow_hint: 1,
        };
        let err = NetworkGraph::new(nodes, vec![mk("p1", 0, 1), mk("p2", 2, 3)]).unwrap_err();
        assert!(err.to_string().contains("disconnected"));
    }

    #[test]
    fn flow_sets_star() {
        let g = star();
        let fs = g.flow_sets().unwrap();
        assert_eq!(fs.incoming, vec![vec![0]]);
        assert_eq!(fs.outgoing, vec![vec![1, 2]]);
    }

    #[test]
    fn flow_sets_respect_hints() {
        let mut g = star();
        // Reverse the nominal flow on every pipe: ν2 is then fed by ω2, ω3.
        for p in &mut g.pipes {
            p.flow_hint = -1;
        }
        let fs = g.flow_sets().unwrap();
        assert_eq!(fs.incoming, vec![vec![1, 2]]);
        assert_eq!(fs.outgoing, vec![vec![0]]);
    }

    #[test]
    fn flow_sets_reject_pure_sink() {
        let nodes = vec!["a".into(), "b".into(), "c".into()];
        let mk = |id: &str, tail, head| Pipe {
            id: id.into(),
            tail,
            head,
            params: default_params(1.0),
            n_elements: 2,
            flow_hint: 1,
        };
        // Both pipes point into node b: no outgoing pipe there.
        let g = NetworkGraph::new(nodes, vec![mk("p1", 0, 1), mk("p2", 2, 1)]).unwrap();
        assert!(g.flow_sets().is_err());
    }

    #[test]
    fn coupling_matrix_star() {
        let g = star();
        let c = g.coupling_matrix();
        assert_eq!(c, vec![vec![1.0, 1.0, 1.0]]);
    }

    #[test]
    fn coupling_matrix_diamond() {
        let g = diamond([55, 50, 50, 50, 50, 55]);
        let c = g.coupling_matrix();
        assert_eq!(c.len(), 4);
        assert_eq!(c[0].len(), 10);
        // Block row of ones per node with blocks of sizes 3, 2, 2, 3.
        let row_sums: Vec<f64> = c.iter().map(|row| row.iter().sum()).collect();
        assert_eq!(row_sums, vec![3.0, 2.0, 2.0, 3.0]);
        for col in 0..10 {
            let col_sum: f64 = c.iter().map(|row| row[col]).sum();
            assert_relative_eq!(col_sum, 1.0);
        }
    }

    #[test]
    fn coupling_matrix_matches_per_node_mass_balance() {
        use rand::prelude::*;
        let g = diamond([55, 50, 50, 50, 50, 55]);
        let order = g.u0_ordering();
        let c = g.coupling_matrix();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let u0: Vec<f64> = (0..order.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for (i, &v) in g.interior_nodes.iter().enumerate() {
            let by_matrix: f64 = c[i].iter().zip(&u0).map(|(a, b)| a * b).sum();
            let direct: f64 = order
                .iter()
                .zip(&u0)
                .filter(|((node, _, _), _)| *node == v)
                .map(|(_, val)| val)
                .sum();
            assert_relative_eq!(by_matrix, direct, epsilon = 1e-15);
        }
    }
}

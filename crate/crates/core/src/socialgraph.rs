//! Three-community weighted social network and the peer unemployment signal.
//!
//! The network is a stochastic block structure over three income communities
//! (low, mid, high). Each agent's network observation is the first-order plus
//! second-order unemployed-peer mass reached through weighted edges, computed
//! as a literal double sum over neighbours and neighbours-of-neighbours.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{SimError, SimResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Community {
    Low,
    Mid,
    High,
}

/// Undirected weighted graph stored as per-node adjacency lists.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SocialGraph {
    neighbours: Vec<Vec<(u32, f64)>>,
    communities: Vec<Community>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GraphSpec {
    /// Community sizes; filled in from the cohort's income terciles when
    /// the environment is assembled, so configs may omit it.
    #[serde(default)]
    pub sizes: [u32; 3],
    pub p_intra: f64,
    pub p_inter: f64,
    pub w_intra: f64,
    pub w_inter: f64,
}

impl Default for GraphSpec {
    fn default() -> Self {
        GraphSpec {
            sizes: [0, 0, 0],
            p_intra: 0.1,
            p_inter: 0.01,
            w_intra: 1.0,
            w_inter: 0.5,
        }
    }
}

impl SocialGraph {
    /// Wrap prebuilt adjacency lists; callers are responsible for symmetry.
    pub fn from_adjacency(neighbours: Vec<Vec<(u32, f64)>>, communities: Vec<Community>) -> Self {
        SocialGraph { neighbours, communities }
    }

    pub fn node_count(&self) -> usize {
        self.neighbours.len()
    }

    pub fn community(&self, node: u32) -> Community {
        self.communities[node as usize]
    }

    pub fn neighbours(&self, node: u32) -> &[(u32, f64)] {
        &self.neighbours[node as usize]
    }

    pub fn edge_count(&self) -> usize {
        self.neighbours.iter().map(|n| n.len()).sum::<usize>() / 2
    }

    /// Edges as (src, dst, weight) with src < dst, for CSV export.
    pub fn edges(&self) -> Vec<(u32, u32, f64)> {
        let mut out = Vec::new();
        for (a, nbrs) in self.neighbours.iter().enumerate() {
            for &(b, w) in nbrs {
                if (a as u32) < b {
                    out.push((a as u32, b, w));
                }
            }
        }
        out
    }

    pub fn write_edge_list<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "src,dst,weight")?;
        for (a, b, w) in self.edges() {
            writeln!(out, "{a},{b},{w}")?;
        }
        Ok(())
    }

    fn is_connected(&self) -> bool {
        let n = self.neighbours.len();
        if n == 0 {
            return false;
        }
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        let mut visited = 1;
        while let Some(v) = stack.pop() {
            for &(u, _) in &self.neighbours[v] {
                if !seen[u as usize] {
                    seen[u as usize] = true;
                    visited += 1;
                    stack.push(u as usize);
                }
            }
        }
        visited == n
    }
}

fn add_edge(neighbours: &mut [Vec<(u32, f64)>], a: u32, b: u32, w: f64) {
    neighbours[a as usize].push((b, w));
    neighbours[b as usize].push((a, w));
}

/// Build the blockwise random graph; resample / patch until connected.
pub fn build_three_community_graph<R: Rng + ?Sized>(
    spec: &GraphSpec,
    rng: &mut R,
) -> SimResult<SocialGraph> {
    let n: u32 = spec.sizes.iter().sum();
    if spec.sizes.iter().any(|&s| s == 0) {
        return Err(SimError::Config("each community needs at least one node".into()));
    }
    for p in [spec.p_intra, spec.p_inter] {
        if !(0.0..=1.0).contains(&p) {
            return Err(SimError::Config(format!("edge probability {p} out of [0,1]")));
        }
    }
    if spec.p_intra == 0.0 && spec.p_inter == 0.0 {
        return Err(SimError::Config("all edge probabilities zero, graph cannot connect".into()));
    }
    if spec.w_intra < 0.0 || spec.w_inter < 0.0 {
        return Err(SimError::Config("edge weights must be non-negative".into()));
    }

    let mut communities = Vec::with_capacity(n as usize);
    for (c, &size) in [Community::Low, Community::Mid, Community::High]
        .iter()
        .zip(&spec.sizes)
    {
        communities.extend(std::iter::repeat(*c).take(size as usize));
    }

    for attempt in 0..16 {
        let mut neighbours = vec![Vec::new(); n as usize];
        for a in 0..n {
            for b in (a + 1)..n {
                let same = communities[a as usize] == communities[b as usize];
                let (p, w) = if same {
                    (spec.p_intra, spec.w_intra)
                } else {
                    (spec.p_inter, spec.w_inter)
                };
                if rng.gen::<f64>() < p {
                    add_edge(&mut neighbours, a, b, w);
                }
            }
        }
        let mut graph = SocialGraph { neighbours, communities: communities.clone() };
        if graph.is_connected() {
            return Ok(graph);
        }
        // patch on the last attempts: link each disconnected component to node 0's
        if attempt >= 8 {
            patch_connectivity(&mut graph, spec, rng);
            if graph.is_connected() {
                return Ok(graph);
            }
        }
    }
    Err(SimError::Config(
        "could not build a connected graph with the given probabilities".into(),
    ))
}

fn patch_connectivity<R: Rng + ?Sized>(graph: &mut SocialGraph, spec: &GraphSpec, rng: &mut R) {
    let n = graph.neighbours.len();
    let mut comp = vec![usize::MAX; n];
    let mut components: Vec<Vec<u32>> = Vec::new();
    for start in 0..n {
        if comp[start] != usize::MAX {
            continue;
        }
        let id = components.len();
        let mut members = vec![start as u32];
        comp[start] = id;
        let mut stack = vec![start];
        while let Some(v) = stack.pop() {
            for &(u, _) in &graph.neighbours[v] {
                if comp[u as usize] == usize::MAX {
                    comp[u as usize] = id;
                    members.push(u);
                    stack.push(u as usize);
                }
            }
        }
        components.push(members);
    }
    // bridge every later component to a random node of component 0
    for members in components.iter().skip(1) {
        let a = members[rng.gen_range(0..members.len())];
        let b = components[0][rng.gen_range(0..components[0].len())];
        let same = graph.communities[a as usize] == graph.communities[b as usize];
        let w = if same { spec.w_intra } else { spec.w_inter };
        add_edge(&mut graph.neighbours, a, b, w.max(f64::MIN_POSITIVE));
    }
}

/// Peer unemployment signal per node: sum of weighted unemployed neighbours
/// plus, for each neighbour, the sum of its weighted unemployed neighbours.
/// The second-order sum is taken literally, without deduplication.
pub fn network_observation(graph: &SocialGraph, employment: &[bool]) -> SimResult<Vec<f64>> {
    if employment.len() != graph.node_count() {
        return Err(SimError::Dimension {
            expected: graph.node_count(),
            got: employment.len(),
        });
    }
    // first-order mass per node, reused for the second-order term
    let first: Vec<f64> = (0..graph.node_count() as u32)
        .map(|a| {
            graph
                .neighbours(a)
                .iter()
                .filter(|&&(b, _)| !employment[b as usize])
                .map(|&(_, w)| w)
                .sum()
        })
        .collect();
    Ok((0..graph.node_count() as u32)
        .map(|a| {
            let second: f64 = graph
                .neighbours(a)
                .iter()
                .map(|&(b, _)| first[b as usize])
                .sum();
            first[a as usize] + second
        })
        .collect())
}

//! Pascal-triangle communication graph with a degree cap.
//!
//! Node `k` sits at `(row, col)` of a triangle whose row `r` holds `r + 1`
//! nodes. Edges are added in three priority classes (parents, children,
//! same-row siblings), skipping any edge that would push an endpoint past the
//! cap, then random fill edges up to `min(cap, N - 1)`. A final repair pass
//! merges components when the cap left the graph disconnected.

use std::collections::{BTreeSet, VecDeque};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, stream_rng};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    neighbors: Vec<Vec<usize>>,
    cap: usize,
}

fn position(k: usize) -> (usize, usize) {
    let mut r = 0;
    while (r + 1) * (r + 2) / 2 <= k {
        r += 1;
    }
    (r, k - r * (r + 1) / 2)
}

fn index(r: isize, c: isize, n: usize) -> Option<usize> {
    if r < 0 || c < 0 || c > r {
        return None;
    }
    let k = (r * (r + 1) / 2 + c) as usize;
    (k < n).then_some(k)
}

struct Builder {
    adj: Vec<BTreeSet<usize>>,
    cap: usize,
}

impl Builder {
    fn has_room(&self, u: usize) -> bool {
        self.adj[u].len() < self.cap
    }

    fn try_add(&mut self, u: usize, v: usize) -> bool {
        if u == v || self.adj[u].contains(&v) || !self.has_room(u) || !self.has_room(v) {
            return false;
        }
        self.add(u, v);
        true
    }

    fn add(&mut self, u: usize, v: usize) {
        self.adj[u].insert(v);
        self.adj[v].insert(u);
    }

    fn remove(&mut self, u: usize, v: usize) {
        self.adj[u].remove(&v);
        self.adj[v].remove(&u);
    }

    fn components(&self) -> Vec<Vec<usize>> {
        let n = self.adj.len();
        let mut seen = vec![false; n];
        let mut out = Vec::new();
        for s in 0..n {
            if seen[s] {
                continue;
            }
            let mut comp = vec![s];
            seen[s] = true;
            let mut q = VecDeque::from([s]);
            while let Some(u) = q.pop_front() {
                for &v in &self.adj[u] {
                    if !seen[v] {
                        seen[v] = true;
                        comp.push(v);
                        q.push_back(v);
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out
    }

    fn reaches(&self, from: usize, to: usize) -> bool {
        let mut seen = vec![false; self.adj.len()];
        seen[from] = true;
        let mut q = VecDeque::from([from]);
        while let Some(u) = q.pop_front() {
            if u == to {
                return true;
            }
            for &v in &self.adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    q.push_back(v);
                }
            }
        }
        false
    }

    /// Lowest edge of the component whose removal keeps it connected.
    fn non_bridge(&mut self, comp: &[usize]) -> Option<(usize, usize)> {
        for &u in comp {
            let nbrs: Vec<usize> = self.adj[u].iter().copied().filter(|&v| v > u).collect();
            for v in nbrs {
                self.remove(u, v);
                let ok = self.reaches(u, v);
                self.add(u, v);
                if ok {
                    return Some((u, v));
                }
            }
        }
        None
    }

    fn spare(&self, comp: &[usize]) -> Option<usize> {
        comp.iter().copied().find(|&u| self.has_room(u))
    }

    /// Joins components pairwise. A component without spare capacity has every
    /// degree equal to `cap >= 2`, so it contains a cycle and gives up one edge.
    fn repair(&mut self) -> Result<()> {
        loop {
            let comps = self.components();
            if comps.len() <= 1 {
                return Ok(());
            }
            let (x, y) = (&comps[0], &comps[1]);
            match (self.spare(x), self.spare(y)) {
                (Some(u), Some(v)) => self.add(u, v),
                (Some(u), None) | (None, Some(u)) => {
                    let full = if self.spare(x).is_some() { y } else { x };
                    let (a, b) = self
                        .non_bridge(full)
                        .ok_or_else(|| Error::InfeasibleTopology("saturated tree".into()))?;
                    self.remove(a, b);
                    self.add(u, a);
                }
                (None, None) => {
                    let (a, b) = self
                        .non_bridge(x)
                        .ok_or_else(|| Error::InfeasibleTopology("saturated tree".into()))?;
                    let (c, d) = self
                        .non_bridge(y)
                        .ok_or_else(|| Error::InfeasibleTopology("saturated tree".into()))?;
                    self.remove(a, b);
                    self.remove(c, d);
                    self.add(a, c);
                    self.add(b, d);
                }
            }
        }
    }
}

impl Topology {
    /// Builds from an explicit undirected edge list.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut adj = vec![BTreeSet::new(); n];
        for &(u, v) in edges {
            if u >= n || v >= n {
                return Err(Error::InvalidIndex {
                    index: u.max(v),
                    len: n,
                });
            }
            if u != v {
                adj[u].insert(v);
                adj[v].insert(u);
            }
        }
        let cap = adj.iter().map(BTreeSet::len).max().unwrap_or(0);
        Ok(Self {
            neighbors: adj.into_iter().map(|s| s.into_iter().collect()).collect(),
            cap,
        })
    }

    /// Complete graph on `n` nodes.
    pub fn complete(n: usize) -> Self {
        Self {
            neighbors: (0..n)
                .map(|i| (0..n).filter(|&j| j != i).collect())
                .collect(),
            cap: n.saturating_sub(1),
        }
    }

    pub fn build_pascal(n: usize, cap: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidParameter("topology needs at least one node".into()));
        }
        if (n >= 2 && cap < 1) || (n >= 3 && cap < 2) {
            return Err(Error::InfeasibleTopology(format!(
                "degree cap {cap} cannot connect {n} nodes"
            )));
        }
        let mut b = Builder {
            adj: vec![BTreeSet::new(); n],
            cap,
        };
        let pos: Vec<(isize, isize)> = (0..n)
            .map(|k| {
                let (r, c) = position(k);
                (r as isize, c as isize)
            })
            .collect();
        let classes: [[(isize, isize); 2]; 3] = [
            [(-1, -1), (-1, 0)], // left and right parents
            [(1, 0), (1, 1)],    // children
            [(0, -1), (0, 1)],   // siblings
        ];
        for class in classes {
            for (u, &(r, c)) in pos.iter().enumerate() {
                for (dr, dc) in class {
                    if let Some(v) = index(r + dr, c + dc, n) {
                        b.try_add(u, v);
                    }
                }
            }
        }

        let target = cap.min(n - 1);
        let mut candidates: Vec<(usize, usize)> = (0..n)
            .flat_map(|u| (u + 1..n).map(move |v| (u, v)))
            .filter(|&(u, v)| !b.adj[u].contains(&v))
            .collect();
        candidates.shuffle(&mut stream_rng(seed, stream::TOPOLOGY));
        for (u, v) in candidates {
            if b.adj[u].len() < target && b.adj[v].len() < target {
                b.add(u, v);
            }
        }
        b.repair()?;

        Ok(Self {
            neighbors: b.adj.into_iter().map(|s| s.into_iter().collect()).collect(),
            cap,
        })
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn cap(&self) -> usize {
        self.cap
    }

    /// Sorted neighbor list, self excluded.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn max_degree(&self) -> usize {
        self.neighbors.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.neighbors
            .iter()
            .enumerate()
            .flat_map(|(u, ns)| ns.iter().filter(move |&&v| v > u).map(move |&v| (u, v)))
            .collect()
    }

    pub fn is_symmetric(&self) -> bool {
        self.neighbors.iter().enumerate().all(|(u, ns)| {
            ns.iter()
                .all(|&v| v != u && self.neighbors[v].binary_search(&u).is_ok())
        })
    }

    pub fn is_connected(&self) -> bool {
        let n = self.len();
        if n == 0 {
            return true;
        }
        let mut seen = vec![false; n];
        seen[0] = true;
        let mut count = 1;
        let mut q = VecDeque::from([0]);
        while let Some(u) = q.pop_front() {
            for &v in &self.neighbors[u] {
                if !seen[v] {
                    seen[v] = true;
                    count += 1;
                    q.push_back(v);
                }
            }
        }
        count == n
    }

    pub fn to_edge_list(&self) -> String {
        let mut out = String::new();
        for (u, v) in self.edges() {
            let _ = writeln!(out, "{u} {v}");
        }
        out
    }

    pub fn write_edge_list(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_edge_list()).map_err(|e| Error::io(path, e))
    }
}

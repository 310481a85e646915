//! Communication graphs, delayed graphs and the transition operator of the
//! error dynamics restricted to the row space of `A`.
//!
//! Adjacency matrices use `adj[i][j] == true` iff there is an edge `j -> i`
//! (agent `i` receives from `j`), so composing graphs is a boolean matrix
//! product with the later graph on the left.
//!
//! The delayed graph has one node per `(agent, stage)` with stages `0..=d`;
//! stage `s` of agent `j` holds `j`'s estimate from `s` of its own iterations
//! ago. When agent `i` iterates, its stack shifts down one stage and stage 0
//! becomes the projection of the mean of the states it used.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, DenseMatrix};
use crate::sim::{EventDetail, EventKind, EventLog};

pub type Adjacency = Vec<Vec<bool>>;

pub fn identity(n: usize) -> Adjacency {
    (0..n).map(|i| (0..n).map(|j| i == j).collect()).collect()
}

fn order(g: &Adjacency) -> Result<usize> {
    let n = g.len();
    if g.iter().any(|row| row.len() != n) {
        return Err(Error::Dimension("adjacency matrix is not square".into()));
    }
    Ok(n)
}

/// Boolean product `g1 * g2`: a path through `g2` then `g1`.
pub fn compose(g1: &Adjacency, g2: &Adjacency) -> Result<Adjacency> {
    let n = order(g1)?;
    if order(g2)? != n {
        return Err(Error::Dimension(format!(
            "cannot compose graphs on {n} and {} nodes",
            g2.len()
        )));
    }
    Ok((0..n)
        .map(|i| (0..n).map(|j| (0..n).any(|k| g1[i][k] && g2[k][j])).collect())
        .collect())
}

fn reaches_all(n: usize, step: impl Fn(usize, usize) -> bool) -> bool {
    let mut seen = vec![false; n];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(u) = stack.pop() {
        for v in 0..n {
            if !seen[v] && step(u, v) {
                seen[v] = true;
                stack.push(v);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

pub fn strongly_connected(g: &Adjacency) -> bool {
    let n = g.len();
    n == 0 || (reaches_all(n, |u, v| g[v][u]) && reaches_all(n, |u, v| g[u][v]))
}

/// Sequence of communication graphs, each with every self-loop present.
#[derive(Debug, Clone, PartialEq)]
pub struct CommGraphSeq {
    nodes: usize,
    graphs: Vec<Adjacency>,
}

impl CommGraphSeq {
    pub fn new(nodes: usize, graphs: Vec<Adjacency>) -> Result<Self> {
        for (t, g) in graphs.iter().enumerate() {
            if order(g)? != nodes {
                return Err(Error::Dimension(format!("graph {t} has {} nodes", g.len())));
            }
            if (0..nodes).any(|i| !g[i][i]) {
                return Err(Error::InvalidParameter(format!("graph {t} lacks a self-loop")));
            }
        }
        Ok(Self { nodes, graphs })
    }

    pub fn graphs(&self) -> &[Adjacency] {
        &self.graphs
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    /// Composition of `graphs[range]`, latest graph applied last.
    pub fn composed(&self, range: Range<usize>) -> Adjacency {
        self.graphs[range]
            .iter()
            .fold(identity(self.nodes), |acc, g| compose(g, &acc).expect("validated"))
    }
}

/// Whether every window of `l` consecutive graphs composes to a strongly
/// connected graph. Longer windows follow since self-loops keep every path.
pub fn detect_c_l(seq: &CommGraphSeq, l: usize) -> Result<bool> {
    if l < 1 {
        return Err(Error::InvalidParameter("window length must be at least 1".into()));
    }
    if seq.len() < l {
        return Err(Error::Dimension(format!(
            "sequence of {} graphs is shorter than the window {l}",
            seq.len()
        )));
    }
    Ok((0..=seq.len() - l).all(|s| strongly_connected(&seq.composed(s..s + l))))
}

/// What one agent used in one iteration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IterationUse {
    pub agent: usize,
    /// Global row indices of the projection block.
    pub block: Vec<usize>,
    /// `(sender, stage)` of every averaged estimate, own included.
    pub used: Vec<(usize, usize)>,
}

/// Iterations of a simulation in the order they happened.
pub fn iteration_history(log: &EventLog) -> Vec<IterationUse> {
    log.records()
        .iter()
        .filter(|r| r.kind == EventKind::Iterate)
        .filter_map(|r| match &r.detail {
            EventDetail::Iterate { block, used, .. } => Some(IterationUse {
                agent: r.agent,
                block: block.clone(),
                used: used.iter().map(|u| (u.sender, u.stage as usize)).collect(),
            }),
            _ => None,
        })
        .collect()
}

/// Communication graph of each iteration: edges `j -> i` for every sender
/// `j` the iterating agent `i` used, plus all self-loops.
pub fn comm_graphs(history: &[IterationUse], agents: usize) -> Result<CommGraphSeq> {
    let graphs = history
        .iter()
        .map(|h| {
            let mut g = identity(agents);
            for &(j, _) in &h.used {
                if j >= agents || h.agent >= agents {
                    return Err(Error::InvalidIndex {
                        index: j.max(h.agent),
                        len: agents,
                    });
                }
                g[h.agent][j] = true;
            }
            Ok(g)
        })
        .collect::<Result<_>>()?;
    CommGraphSeq::new(agents, graphs)
}

pub fn max_stage(history: &[IterationUse]) -> usize {
    history
        .iter()
        .flat_map(|h| h.used.iter().map(|&(_, s)| s))
        .max()
        .unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DelayedGraph {
    pub agents: usize,
    pub depth: usize,
    /// `(from, to)` node pairs.
    pub edges: BTreeSet<(usize, usize)>,
    /// Row-stochastic weights; row `node(i, 0)` averages the used states.
    pub w: DenseMatrix,
}

impl DelayedGraph {
    pub fn nodes(&self) -> usize {
        self.agents * (self.depth + 1)
    }

    pub fn node(&self, agent: usize, stage: usize) -> usize {
        node(self.depth, agent, stage)
    }
}

fn node(depth: usize, agent: usize, stage: usize) -> usize {
    agent * (depth + 1) + stage
}

/// Delayed graph and weight matrix of one iteration.
pub fn build_delayed_graph(step: &IterationUse, agents: usize, depth: usize) -> Result<DelayedGraph> {
    let size = agents * (depth + 1);
    let i = step.agent;
    if i >= agents {
        return Err(Error::InvalidIndex { index: i, len: agents });
    }
    if step.used.is_empty() {
        return Err(Error::CorruptMessage(format!("agent {i} used no state")));
    }
    let mut w = DenseMatrix::zeros(size, size);
    let mut edges = BTreeSet::new();
    for a in 0..agents {
        for s in 0..=depth {
            let v = node(depth, a, s);
            edges.insert((v, v));
            if s < depth {
                edges.insert((v, node(depth, a, s + 1)));
            }
            if a != i {
                w[(v, v)] = 1.0;
            } else if s > 0 {
                w[(v, node(depth, i, s - 1))] = 1.0;
            }
        }
    }
    let weight = 1.0 / step.used.len() as f64;
    let target = node(depth, i, 0);
    for &(j, s) in &step.used {
        if s > depth {
            return Err(Error::DelayBoundViolation { stage: s, bound: depth });
        }
        if j >= agents {
            return Err(Error::InvalidIndex { index: j, len: agents });
        }
        let src = node(depth, j, s);
        w[(target, src)] += weight;
        edges.insert((src, target));
    }
    Ok(DelayedGraph {
        agents,
        depth,
        edges,
        w,
    })
}

/// One product of projections, applied right to left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub coef: f64,
    /// Row index sets, leftmost applied last.
    pub labels: Vec<Vec<usize>>,
}

/// `sum_q coef_q * prod P_{labels_q}`; empty when the block is zero.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProjectionPolynomial {
    pub terms: Vec<Term>,
}

impl ProjectionPolynomial {
    pub fn identity() -> Self {
        Self {
            terms: vec![Term {
                coef: 1.0,
                labels: Vec::new(),
            }],
        }
    }

    /// Sum of the coefficients.
    pub fn weight(&self) -> f64 {
        self.terms.iter().map(|t| t.coef).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// Rows appearing in any label of any term.
    pub fn row_union(&self) -> BTreeSet<usize> {
        self.terms
            .iter()
            .flat_map(|t| t.labels.iter().flatten().copied())
            .collect()
    }
}

fn accumulate(acc: &mut BTreeMap<Vec<Vec<usize>>, f64>, labels: Vec<Vec<usize>>, coef: f64) {
    *acc.entry(labels).or_insert(0.0) += coef;
}

/// Block operator of size `(blocks * n)^2` with a symbolic polynomial per block.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    pub n: usize,
    pub blocks: usize,
    pub matrix: DenseMatrix,
    /// Row-major `blocks x blocks` polynomials.
    pub polys: Vec<ProjectionPolynomial>,
}

impl TransitionMatrix {
    pub fn identity(blocks: usize, n: usize) -> Self {
        let polys = (0..blocks * blocks)
            .map(|k| {
                if k / blocks == k % blocks {
                    ProjectionPolynomial::identity()
                } else {
                    ProjectionPolynomial::default()
                }
            })
            .collect();
        Self {
            n,
            blocks,
            matrix: DenseMatrix::identity(blocks * n, blocks * n),
            polys,
        }
    }

    pub fn block(&self, a: usize, c: usize) -> DenseMatrix {
        self.matrix
            .view((a * self.n, c * self.n), (self.n, self.n))
            .into_owned()
    }

    pub fn poly(&self, a: usize, c: usize) -> &ProjectionPolynomial {
        &self.polys[a * self.blocks + c]
    }

    /// Matrix of polynomial weights; every row sums to one.
    pub fn weights(&self) -> DenseMatrix {
        DenseMatrix::from_fn(self.blocks, self.blocks, |a, c| self.poly(a, c).weight())
    }
}

/// Error transition `M_A` over `history`: each iteration contributes
/// `P(tau) (W(tau) kron I_n)`, with the projection `I - A_J^+ A_J` on the
/// iterating agent's stage 0. Fails once the polynomials hold more than
/// `term_budget` terms in total.
pub fn build_m_a(
    a: &DenseMatrix,
    history: &[IterationUse],
    agents: usize,
    depth: usize,
    term_budget: usize,
) -> Result<TransitionMatrix> {
    let n = a.ncols();
    let blocks = agents * (depth + 1);
    let mut tm = TransitionMatrix::identity(blocks, n);
    let mut projections: HashMap<Vec<usize>, DenseMatrix> = HashMap::new();
    for step in history {
        let g = build_delayed_graph(step, agents, depth)?;
        let target = g.node(step.agent, 0);
        let proj = match projections.get(&step.block) {
            Some(p) => p.clone(),
            None => {
                let a_j = linalg::extract_rows(a, &step.block)?;
                let p = DenseMatrix::identity(n, n) - linalg::pinv(&a_j) * a_j;
                projections.insert(step.block.clone(), p.clone());
                p
            }
        };

        let mut t = g.w.kronecker(&DenseMatrix::identity(n, n));
        let rows = t.view((target * n, 0), (n, blocks * n)).into_owned();
        t.view_mut((target * n, 0), (n, blocks * n)).copy_from(&(&proj * rows));
        tm.matrix = t * &tm.matrix;

        let mut polys = Vec::with_capacity(blocks * blocks);
        let mut total = 0;
        for r in 0..blocks {
            for c in 0..blocks {
                let mut acc = BTreeMap::new();
                for b in 0..blocks {
                    let wt = g.w[(r, b)];
                    if wt == 0.0 {
                        continue;
                    }
                    for term in &tm.poly(b, c).terms {
                        let mut labels = term.labels.clone();
                        if r == target {
                            labels.insert(0, step.block.clone());
                        }
                        accumulate(&mut acc, labels, wt * term.coef);
                    }
                }
                total += acc.len();
                if total > term_budget {
                    return Err(Error::BudgetExceeded(format!(
                        "more than {term_budget} projection terms"
                    )));
                }
                polys.push(ProjectionPolynomial {
                    terms: acc
                        .into_iter()
                        .map(|(labels, coef)| Term { coef, labels })
                        .collect(),
                });
            }
        }
        tm.polys = polys;
    }
    Ok(tm)
}

fn check_basis(basis: &DenseMatrix) -> Result<()> {
    let gram = basis.tr_mul(basis);
    let dev = (gram - DenseMatrix::identity(basis.ncols(), basis.ncols()))
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if dev > 1e-10 {
        return Err(Error::InvalidBasis(dev));
    }
    Ok(())
}

/// Operator 2-norm of every block restricted to the span of `basis`.
pub fn block_norms(tm: &TransitionMatrix, basis: &DenseMatrix) -> Result<DenseMatrix> {
    check_basis(basis)?;
    if basis.nrows() != tm.n {
        return Err(Error::Dimension(format!(
            "basis has {} rows, blocks are {}x{}",
            basis.nrows(),
            tm.n,
            tm.n
        )));
    }
    Ok(DenseMatrix::from_fn(tm.blocks, tm.blocks, |a, c| {
        linalg::spectral_norm(&(basis.transpose() * tm.block(a, c) * basis))
    }))
}

/// Largest row sum of the restricted block norms.
pub fn hybrid_norm_a(tm: &TransitionMatrix, basis: &DenseMatrix) -> Result<f64> {
    let norms = block_norms(tm, basis)?;
    Ok(norms
        .row_iter()
        .map(|r| r.sum())
        .fold(0.0, f64::max))
}

fn union_is_complete(a: &DenseMatrix, rank_a: usize, rows: &BTreeSet<usize>) -> bool {
    let idx: Vec<usize> = rows.iter().copied().collect();
    let sub = linalg::extract_rows(a, &idx).expect("labels index rows of A");
    linalg::rank(&sub) == rank_a
}

/// Whether some term's rows contain a maximal independent row set of `a`.
pub fn check_completeness(poly: &ProjectionPolynomial, a: &DenseMatrix) -> bool {
    let rank_a = linalg::rank(a);
    poly.terms.iter().any(|t| {
        let rows: BTreeSet<usize> = t.labels.iter().flatten().copied().collect();
        union_is_complete(a, rank_a, &rows)
    })
}

/// Per block row: whether some block in it has a complete polynomial.
pub fn complete_rows(tm: &TransitionMatrix, a: &DenseMatrix) -> Vec<bool> {
    let rank_a = linalg::rank(a);
    let mut memo: HashMap<BTreeSet<usize>, bool> = HashMap::new();
    (0..tm.blocks)
        .map(|r| {
            (0..tm.blocks).any(|c| {
                tm.poly(r, c).terms.iter().any(|t| {
                    let rows: BTreeSet<usize> = t.labels.iter().flatten().copied().collect();
                    *memo
                        .entry(rows.clone())
                        .or_insert_with(|| union_is_complete(a, rank_a, &rows))
                })
            })
        })
        .collect()
}

/// Per block row: whether all rows named anywhere in it span `Row(A)`.
pub fn jointly_complete_rows(tm: &TransitionMatrix, a: &DenseMatrix) -> Vec<bool> {
    let rank_a = linalg::rank(a);
    (0..tm.blocks)
        .map(|r| {
            let rows: BTreeSet<usize> = (0..tm.blocks)
                .flat_map(|c| tm.poly(r, c).row_union())
                .collect();
            union_is_complete(a, rank_a, &rows)
        })
        .collect()
}

/// Norm of `prod P_J` (applied right to left) restricted to `Row(A)`.
pub fn restricted_product_norm(a: &DenseMatrix, family: &[Vec<usize>], basis: &DenseMatrix) -> Result<f64> {
    check_basis(basis)?;
    let n = a.ncols();
    let mut prod = DenseMatrix::identity(n, n);
    for j in family {
        let a_j = linalg::extract_rows(a, j)?;
        prod = (DenseMatrix::identity(n, n) - linalg::pinv(&a_j) * a_j) * prod;
    }
    Ok(linalg::spectral_norm(&(basis.transpose() * prod * basis)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertifyReport {
    /// Half-open range of iteration indices.
    pub window: (usize, usize),
    pub hybrid_norm: f64,
    pub complete_rows: Vec<bool>,
    #[serde(rename = "C_l_verdict")]
    pub c_l_verdict: Option<bool>,
    pub l: usize,
    pub d: usize,
}

/// Builds `M_A` over `history[window]` and reports its contraction evidence.
/// The connectivity verdict is `None` when the window is shorter than `l`.
pub fn certify(
    a: &DenseMatrix,
    history: &[IterationUse],
    agents: usize,
    depth: usize,
    window: Range<usize>,
    l: usize,
    term_budget: usize,
) -> Result<CertifyReport> {
    if window.end > history.len() || window.start > window.end {
        return Err(Error::InvalidParameter(format!(
            "window {window:?} outside a history of {} iterations",
            history.len()
        )));
    }
    let steps = &history[window.clone()];
    let tm = build_m_a(a, steps, agents, depth, term_budget)?;
    let basis = linalg::row_space_basis(a);
    let graphs = comm_graphs(steps, agents)?;
    let c_l_verdict = if graphs.len() >= l { Some(detect_c_l(&graphs, l)?) } else { None };
    Ok(CertifyReport {
        window: (window.start, window.end),
        hybrid_norm: hybrid_norm_a(&tm, &basis)?,
        complete_rows: complete_rows(&tm, a),
        c_l_verdict,
        l,
        d: depth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Vector;
    use crate::rng::stream_rng;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn graph(n: usize, edges: &[(usize, usize)]) -> Adjacency {
        let mut g = identity(n);
        for &(from, to) in edges {
            g[to][from] = true;
        }
        g
    }

    fn closure(g: &Adjacency) -> Adjacency {
        let n = g.len();
        let mut c = g.clone();
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    c[i][j] = c[i][j] || (c[i][k] && c[k][j]);
                }
            }
        }
        c
    }

    fn randn(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        let mut rng = stream_rng(seed, 0);
        DenseMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
    }

    #[test]
    fn compose_identity_and_paths() {
        let g = graph(3, &[(0, 1)]);
        assert_eq!(compose(&identity(3), &g).unwrap(), g);
        let g2 = graph(3, &[(0, 1)]);
        let g1 = graph(3, &[(1, 2)]);
        let c = compose(&g1, &g2).unwrap();
        assert!(c[2][0]);
        assert!(!compose(&g2, &g1).unwrap()[2][0]);
        assert!(compose(&identity(2), &identity(3)).is_err());
    }

    #[test]
    fn composing_strongly_connected_graphs_fills_in() {
        let ring = graph(4, &[(0, 1), (1, 2), (2, 3), (3, 0)]);
        let seq = CommGraphSeq::new(4, vec![ring; 3]).unwrap();
        let c = seq.composed(0..3);
        assert!(c.iter().all(|row| row.iter().all(|&v| v)));
    }

    #[test]
    fn strong_connectivity() {
        assert!(strongly_connected(&graph(3, &[(0, 1), (1, 2), (2, 0)])));
        assert!(!strongly_connected(&graph(4, &[(0, 1), (1, 0), (2, 3), (3, 2)])));
        assert!(!strongly_connected(&graph(2, &[(0, 1)])));
    }

    #[test]
    fn c_l_detection() {
        let full: Adjacency = vec![vec![true; 3]; 3];
        let seq = CommGraphSeq::new(3, vec![full; 4]).unwrap();
        assert!(detect_c_l(&seq, 1).unwrap());
        assert!(detect_c_l(&seq, 0).is_err());
        assert!(detect_c_l(&seq, 5).is_err());

        let isolated = graph(3, &[(0, 1), (1, 0)]);
        let seq = CommGraphSeq::new(3, vec![isolated; 4]).unwrap();
        for l in 1..=4 {
            assert!(!detect_c_l(&seq, l).unwrap());
        }

        let cw = graph(3, &[(0, 1), (1, 2), (2, 0)]);
        let ccw = graph(3, &[(1, 0), (2, 1), (0, 2)]);
        let half = graph(3, &[(0, 1), (1, 2)]);
        let other = graph(3, &[(2, 1), (1, 0)]);
        let seq = CommGraphSeq::new(3, vec![half.clone(), other.clone(), half, cw, ccw, other]).unwrap();
        for l in 1..=6 {
            let brute = (0..=6 - l).all(|s| {
                let c = closure(&seq.composed(s..s + l));
                c.iter().all(|row| row.iter().all(|&v| v))
            });
            assert_eq!(detect_c_l(&seq, l).unwrap(), brute, "l = {l}");
        }
        assert!(CommGraphSeq::new(2, vec![vec![vec![false, true], vec![true, true]]]).is_err());
    }

    #[test]
    fn delayed_graph_weights() {
        let solo = IterationUse { agent: 0, block: vec![0], used: vec![(0, 0)] };
        let g = build_delayed_graph(&solo, 1, 2).unwrap();
        // Stage 0 keeps itself; later stages shift down.
        let expect = DenseMatrix::from_row_slice(3, 3, &[1., 0., 0., 1., 0., 0., 0., 1., 0.]);
        assert_eq!(g.w, expect);
        assert!(g.edges.contains(&(0, 1)) && g.edges.contains(&(1, 2)) && g.edges.contains(&(2, 2)));

        let pair = IterationUse { agent: 1, block: vec![2], used: vec![(1, 0), (0, 0)] };
        let g = build_delayed_graph(&pair, 2, 1).unwrap();
        let row = g.node(1, 0);
        assert_eq!(g.w[(row, g.node(1, 0))], 0.5);
        assert_eq!(g.w[(row, g.node(0, 0))], 0.5);
        for r in 0..g.nodes() {
            assert!((g.w.row(r).sum() - 1.0).abs() < 1e-12);
        }

        let late = IterationUse { agent: 0, block: vec![0], used: vec![(0, 0), (1, 3)] };
        assert!(matches!(
            build_delayed_graph(&late, 2, 2),
            Err(Error::DelayBoundViolation { stage: 3, bound: 2 })
        ));
    }

    #[test]
    fn empty_window_is_identity() {
        let a = randn(4, 3, 1);
        let tm = build_m_a(&a, &[], 2, 1, 100).unwrap();
        assert_eq!(tm.matrix, DenseMatrix::identity(12, 12));
        let basis = linalg::row_space_basis(&a);
        assert!((hybrid_norm_a(&tm, &basis).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hybrid_norm_simple_cases() {
        let basis = DenseMatrix::identity(3, 3);
        let mut tm = TransitionMatrix::identity(2, 3);
        tm.matrix.fill(0.0);
        assert_eq!(hybrid_norm_a(&tm, &basis).unwrap(), 0.0);
        let bad = DenseMatrix::from_row_slice(3, 1, &[1.0, 1.0, 0.0]);
        assert!(matches!(hybrid_norm_a(&tm, &bad), Err(Error::InvalidBasis(_))));
    }

    #[test]
    fn hybrid_norm_bounds_sampled_gains() {
        let a = randn(4, 3, 2);
        let basis = linalg::row_space_basis(&a);
        let history = vec![
            IterationUse { agent: 0, block: vec![0, 1], used: vec![(0, 0), (1, 1)] },
            IterationUse { agent: 1, block: vec![2], used: vec![(1, 0), (0, 0)] },
            IterationUse { agent: 0, block: vec![1], used: vec![(0, 0), (1, 0)] },
        ];
        let tm = build_m_a(&a, &history, 2, 1, 1000).unwrap();
        let norm = hybrid_norm_a(&tm, &basis).unwrap();
        let r = basis.ncols();
        let mut rng = stream_rng(3, 0);
        for _ in 0..2000 {
            // Stacked vector with unit-norm Row(A) blocks, measured in the max-of-block-norms.
            let blocks: Vec<Vector> = (0..tm.blocks)
                .map(|_| {
                    let c = Vector::from_fn(r, |_, _| rng.sample(StandardNormal));
                    &basis * c.normalize()
                })
                .collect();
            for a_row in 0..tm.blocks {
                let out: Vector = (0..tm.blocks).fold(Vector::zeros(3), |acc, c| acc + tm.block(a_row, c) * &blocks[c]);
                assert!(out.norm() <= norm + 1e-12);
            }
        }
    }

    #[test]
    fn weights_stay_row_stochastic() {
        let a = randn(4, 3, 4);
        let history = vec![
            IterationUse { agent: 0, block: vec![0], used: vec![(0, 0), (1, 1)] },
            IterationUse { agent: 1, block: vec![2, 3], used: vec![(1, 0), (0, 0)] },
        ];
        let tm = build_m_a(&a, &history, 2, 1, 1000).unwrap();
        for row in tm.weights().row_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert!(matches!(build_m_a(&a, &history, 2, 1, 3), Err(Error::BudgetExceeded(_))));
    }

    #[test]
    fn completeness_checks() {
        let a = DenseMatrix::from_row_slice(3, 2, &[1., 0., 0., 1., 1., 1.]);
        let term = |labels: Vec<Vec<usize>>| ProjectionPolynomial {
            terms: vec![Term { coef: 1.0, labels }],
        };
        assert!(check_completeness(&term(vec![vec![0, 1, 2]]), &a));
        assert!(!check_completeness(&term(vec![]), &a));
        assert!(check_completeness(&term(vec![vec![0], vec![2]]), &a));
        assert!(!check_completeness(&term(vec![vec![0], vec![0]]), &a));
    }

    #[test]
    fn lemma_style_product_norms() {
        let a = randn(4, 3, 5);
        let basis = linalg::row_space_basis(&a);
        let full = restricted_product_norm(&a, &[vec![0, 1], vec![2]], &basis).unwrap();
        assert!(full < 1.0 - 1e-9);
        let partial = restricted_product_norm(&a, &[vec![0], vec![1]], &basis).unwrap();
        assert!((partial - 1.0).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn strong_connectivity_matches_closure(
            n in 1usize..7,
            bits in prop::collection::vec(any::<bool>(), 49),
        ) {
            let g: Adjacency = (0..n)
                .map(|i| (0..n).map(|j| i == j || bits[i * 7 + j]).collect())
                .collect();
            let c = closure(&g);
            prop_assert_eq!(strongly_connected(&g), c.iter().all(|row| row.iter().all(|&v| v)));
        }

        #[test]
        fn c_l_is_monotone(
            bits in prop::collection::vec(any::<bool>(), 6 * 16),
        ) {
            let graphs: Vec<Adjacency> = (0..6)
                .map(|t| (0..4).map(|i| (0..4).map(|j| i == j || bits[t * 16 + i * 4 + j]).collect()).collect())
                .collect();
            let seq = CommGraphSeq::new(4, graphs).unwrap();
            let verdicts: Vec<bool> = (1..=6).map(|l| detect_c_l(&seq, l).unwrap()).collect();
            for w in verdicts.windows(2) {
                prop_assert!(!w[0] || w[1]);
            }
        }
    }
}

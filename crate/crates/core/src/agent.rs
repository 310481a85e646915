//! A single agent: neighbor averaging, block sampling and the projection update.

use std::ops::Range;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, BlockCache, DenseMatrix, Vector};
use crate::problem;
use crate::rng::SimRng;

/// How the auxiliary variable of the augmented system is held.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuxMode {
    /// Each agent keeps only `y` for its own rows and never sends it.
    Local,
    /// Each agent keeps all `m` entries of `y`, broadcasts them with `x` and
    /// averages them like `x`.
    Shared,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Mode {
    /// Block Kaczmarz on `Ax = b`.
    Consistent,
    /// Block Kaczmarz on `(A  lambda I)(x; y) = b`.
    Augmented { lambda: f64, aux: AuxMode },
    /// Reference projection-consensus iteration on the full local block:
    /// `x <- x - P_i (x - w)`.
    Baseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// Permuted pass over a fixed disjoint blocking of the local rows.
    CoverageCyclic,
    /// `block_size` distinct rows drawn uniformly at every step.
    IidUniform,
}

#[derive(Debug, Clone)]
pub struct AgentConfig {
    pub id: usize,
    pub a: DenseMatrix,
    pub b: Vector,
    /// Global row indices owned by this agent.
    pub rows: Range<usize>,
    /// Total number of rows in the global system.
    pub m_total: usize,
    pub block_size: usize,
    pub mode: Mode,
    pub sampling: Sampling,
}

impl AgentConfig {
    pub fn from_shard(
        id: usize,
        shard: &problem::Shard,
        m_total: usize,
        block_size: usize,
        mode: Mode,
        sampling: Sampling,
    ) -> Result<Self> {
        let cfg = Self {
            id,
            a: shard.a.clone(),
            b: shard.b.clone(),
            rows: shard.rows.clone(),
            m_total,
            block_size,
            mode,
            sampling,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let m_i = self.a.nrows();
        if m_i == 0 || self.b.len() != m_i || self.rows.len() != m_i {
            return Err(Error::Dimension(format!(
                "agent {}: {} rows in A_i, {} in b_i, range of {}",
                self.id,
                m_i,
                self.b.len(),
                self.rows.len()
            )));
        }
        if self.rows.end > self.m_total {
            return Err(Error::InvalidIndex {
                index: self.rows.end - 1,
                len: self.m_total,
            });
        }
        if self.block_size == 0 {
            return Err(Error::InvalidParameter("block size must be positive".into()));
        }
        if let Mode::Augmented { lambda, .. } = self.mode {
            if !(lambda > 0.0) || !lambda.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "lambda must be positive, got {lambda}"
                )));
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.a.ncols()
    }

    pub fn local_rows(&self) -> usize {
        self.a.nrows()
    }

    pub fn effective_block(&self) -> usize {
        self.block_size.min(self.local_rows())
    }

    /// Length of the broadcast payload.
    pub fn payload_len(&self) -> usize {
        match self.mode {
            Mode::Augmented {
                aux: AuxMode::Shared,
                ..
            } => self.n() + self.m_total,
            _ => self.n(),
        }
    }

    fn aux_len(&self) -> Option<usize> {
        match self.mode {
            Mode::Augmented {
                aux: AuxMode::Local,
                ..
            } => Some(self.local_rows()),
            Mode::Augmented {
                aux: AuxMode::Shared,
                ..
            } => Some(self.m_total),
            _ => None,
        }
    }
}

/// Block selection state.
#[derive(Debug, Clone)]
pub struct BlockSampler {
    rng: SimRng,
    chunks: Vec<Vec<usize>>,
    order: Vec<usize>,
    cursor: usize,
}

impl BlockSampler {
    pub fn new(cfg: &AgentConfig, rng: SimRng) -> Self {
        let m_i = cfg.local_rows();
        let chunks = match cfg.sampling {
            Sampling::CoverageCyclic => {
                let count = m_i.div_ceil(cfg.effective_block());
                problem::partition(m_i, count)
                    .expect("chunk count never exceeds rows")
                    .into_iter()
                    .map(|r| r.collect())
                    .collect()
            }
            Sampling::IidUniform => Vec::new(),
        };
        Self {
            rng,
            chunks,
            order: Vec::new(),
            cursor: 0,
        }
    }

    /// The fixed disjoint blocking (empty for iid sampling).
    pub fn chunks(&self) -> &[Vec<usize>] {
        &self.chunks
    }

    /// Next block as local row indices.
    pub fn next_block(&mut self, cfg: &AgentConfig) -> Vec<usize> {
        match cfg.sampling {
            Sampling::IidUniform => {
                let mut idx =
                    index::sample(&mut self.rng, cfg.local_rows(), cfg.effective_block()).into_vec();
                idx.sort_unstable();
                idx
            }
            Sampling::CoverageCyclic => {
                if self.cursor == self.order.len() {
                    let last = self.order.last().copied();
                    self.order = (0..self.chunks.len()).collect();
                    self.order.shuffle(&mut self.rng);
                    // Never repeat a chunk across a pass boundary.
                    if self.order.len() > 1 && self.order.first().copied() == last {
                        let j = self.rng.gen_range(1..self.order.len());
                        self.order.swap(0, j);
                    }
                    self.cursor = 0;
                }
                let c = self.order[self.cursor];
                self.cursor += 1;
                self.chunks[c].clone()
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct AgentState {
    pub x: Vector,
    /// Present only in augmented mode.
    pub y: Option<Vector>,
    /// Completed local iterations.
    pub k: u64,
    /// Local row indices used by the last step.
    pub last_block: Vec<usize>,
    pub sampler: BlockSampler,
    cache: BlockCache,
}

impl AgentState {
    /// Starts at `x0` (zero when `None`) with `y = 0`.
    pub fn new(cfg: &AgentConfig, x0: Option<Vector>, rng: SimRng) -> Result<Self> {
        let x = match x0 {
            Some(x) if x.len() != cfg.n() => {
                return Err(Error::Dimension(format!(
                    "initial estimate has length {}, expected {}",
                    x.len(),
                    cfg.n()
                )))
            }
            Some(x) => x,
            None => Vector::zeros(cfg.n()),
        };
        Ok(Self {
            x,
            y: cfg.aux_len().map(Vector::zeros),
            k: 0,
            last_block: Vec::new(),
            sampler: BlockSampler::new(cfg, rng),
            cache: BlockCache::new(),
        })
    }

    pub fn cache_len(&self) -> usize {
        self.cache.len()
    }
}

/// One received (or own) estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotEntry {
    pub sender: usize,
    pub payload: Vector,
    pub iteration: u64,
}

/// Latest estimate per sender, own state included.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborSnapshot {
    entries: Vec<SnapshotEntry>,
}

impl NeighborSnapshot {
    pub fn new(owner: usize, entries: Vec<SnapshotEntry>) -> Result<Self> {
        let mut senders: Vec<usize> = entries.iter().map(|e| e.sender).collect();
        senders.sort_unstable();
        if senders.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::CorruptMessage("two entries from one sender".into()));
        }
        if senders.binary_search(&owner).is_err() {
            return Err(Error::CorruptMessage(format!(
                "snapshot of agent {owner} lacks its own state"
            )));
        }
        Ok(Self { entries })
    }

    /// Snapshot holding only the owner's state.
    pub fn solo(owner: usize, payload: Vector, iteration: u64) -> Self {
        Self {
            entries: vec![SnapshotEntry {
                sender: owner,
                payload,
                iteration,
            }],
        }
    }

    pub fn entries(&self) -> &[SnapshotEntry] {
        &self.entries
    }

    /// `d_i`: number of averaged estimates.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Arithmetic mean of the snapshot payloads.
pub fn aggregate(snapshot: &NeighborSnapshot) -> Result<Vector> {
    let first = snapshot
        .entries
        .first()
        .ok_or_else(|| Error::CorruptMessage("empty snapshot".into()))?;
    let len = first.payload.len();
    let mut sum = Vector::zeros(len);
    for e in &snapshot.entries {
        if e.payload.len() != len {
            return Err(Error::CorruptMessage(format!(
                "payload from agent {} has length {}, expected {len}",
                e.sender,
                e.payload.len()
            )));
        }
        sum += &e.payload;
    }
    Ok(sum / snapshot.len() as f64)
}

/// Broadcast payload: `x`, plus the full `y` when the auxiliary variable is shared.
pub fn snapshot_payload(cfg: &AgentConfig, state: &AgentState) -> Vector {
    match (&cfg.mode, &state.y) {
        (
            Mode::Augmented {
                aux: AuxMode::Shared,
                ..
            },
            Some(y),
        ) => {
            let mut z = Vector::zeros(state.x.len() + y.len());
            z.rows_mut(0, state.x.len()).copy_from(&state.x);
            z.rows_mut(state.x.len(), y.len()).copy_from(y);
            z
        }
        _ => state.x.clone(),
    }
}

pub fn sample_block(cfg: &AgentConfig, state: &mut AgentState) -> Vec<usize> {
    state.sampler.next_block(cfg)
}

fn cache_key(cfg: &AgentConfig, block: &[usize]) -> Vec<usize> {
    block.iter().map(|&j| cfg.rows.start + j).collect()
}

/// Dispatches to the update for the configured mode.
pub fn step(cfg: &AgentConfig, state: AgentState, snapshot: &NeighborSnapshot) -> Result<AgentState> {
    match cfg.mode {
        Mode::Consistent => step_consistent(cfg, state, snapshot),
        Mode::Augmented { .. } => step_augmented(cfg, state, snapshot),
        Mode::Baseline => step_baseline(cfg, state, snapshot),
    }
}

/// `x <- w + A_J^+ (b_J - A_J w)` with `w` the snapshot mean.
pub fn step_consistent(
    cfg: &AgentConfig,
    mut state: AgentState,
    snapshot: &NeighborSnapshot,
) -> Result<AgentState> {
    let w = aggregate(snapshot)?;
    if w.len() != cfg.n() {
        return Err(Error::CorruptMessage(format!(
            "payload length {} does not match n = {}",
            w.len(),
            cfg.n()
        )));
    }
    let block = sample_block(cfg, &mut state);
    let a_j = linalg::extract_rows(&cfg.a, &block)?;
    let b_j = linalg::extract_entries(&cfg.b, &block)?;
    state.x = match cfg.sampling {
        Sampling::CoverageCyclic => {
            let key = cache_key(cfg, &block);
            let a_pinv = state.cache.pinv(&key, &a_j);
            linalg::apply_correction(a_pinv, &a_j, &b_j, &w)
        }
        Sampling::IidUniform => linalg::kaczmarz_correction(&a_j, &b_j, &w)?,
    };
    state.k += 1;
    state.last_block = block;
    Ok(state)
}

/// Explicit augmented iteration:
///
/// ```text
/// r     = b_J - A_J w - lambda y_J
/// alpha = (A_J A_J^T + lambda^2 I)^{-1} r
/// x     = w + A_J^T alpha
/// y_J  += lambda alpha
/// ```
///
/// With [`AuxMode::Shared`] the `y` used and updated is the snapshot mean of
/// the neighbors' `y`, which makes this exactly the block Kaczmarz step on the
/// augmented system.
pub fn step_augmented(
    cfg: &AgentConfig,
    mut state: AgentState,
    snapshot: &NeighborSnapshot,
) -> Result<AgentState> {
    let Mode::Augmented { lambda, aux } = cfg.mode else {
        return Err(Error::InvalidParameter("agent is not in augmented mode".into()));
    };
    let n = cfg.n();
    let mean = aggregate(snapshot)?;
    if mean.len() != cfg.payload_len() {
        return Err(Error::CorruptMessage(format!(
            "payload length {} does not match {}",
            mean.len(),
            cfg.payload_len()
        )));
    }
    let w = mean.rows(0, n).into_owned();
    let mut y = match aux {
        AuxMode::Local => state.y.take().expect("augmented state carries y"),
        AuxMode::Shared => mean.rows(n, cfg.m_total).into_owned(),
    };
    // Offset of this agent's rows inside y.
    let y_offset = match aux {
        AuxMode::Local => 0,
        AuxMode::Shared => cfg.rows.start,
    };

    let block = sample_block(cfg, &mut state);
    let a_j = linalg::extract_rows(&cfg.a, &block)?;
    let b_j = linalg::extract_entries(&cfg.b, &block)?;
    let y_j = Vector::from_iterator(block.len(), block.iter().map(|&j| y[y_offset + j]));
    let r = b_j - &a_j * &w - y_j * lambda;
    let alpha = match cfg.sampling {
        Sampling::CoverageCyclic => {
            let key = cache_key(cfg, &block);
            state.cache.gram(&key, &a_j, lambda)?.solve(&r)
        }
        Sampling::IidUniform => linalg::regularized_gram_solve(&a_j, lambda, &r)?,
    };
    state.x = w + a_j.tr_mul(&alpha);
    for (&j, &a) in block.iter().zip(alpha.iter()) {
        y[y_offset + j] += lambda * a;
    }
    state.y = Some(y);
    state.k += 1;
    state.last_block = block;
    Ok(state)
}

/// `x <- x - P_i (x - w)` over the whole local block.
pub fn step_baseline(
    cfg: &AgentConfig,
    mut state: AgentState,
    snapshot: &NeighborSnapshot,
) -> Result<AgentState> {
    let w = aggregate(snapshot)?;
    let diff = &state.x - w;
    state.x -= linalg::project_null(&cfg.a, &diff)?;
    state.k += 1;
    state.last_block = (0..cfg.local_rows()).collect();
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use rand_distr::StandardNormal;

    fn randn(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        let mut rng = stream_rng(seed, 0);
        DenseMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
    }

    fn randv(len: usize, seed: u64) -> Vector {
        let mut rng = stream_rng(seed, 0);
        Vector::from_fn(len, |_, _| rng.sample(StandardNormal))
    }

    fn config(a: DenseMatrix, b: Vector, block: usize, mode: Mode) -> AgentConfig {
        let m = a.nrows();
        AgentConfig {
            id: 0,
            a,
            b,
            rows: 0..m,
            m_total: m,
            block_size: block,
            mode,
            sampling: Sampling::CoverageCyclic,
        }
    }

    fn state(cfg: &AgentConfig, x0: Option<Vector>) -> AgentState {
        AgentState::new(cfg, x0, stream_rng(1, 99)).unwrap()
    }

    fn entry(sender: usize, v: &[f64]) -> SnapshotEntry {
        SnapshotEntry {
            sender,
            payload: Vector::from_column_slice(v),
            iteration: 0,
        }
    }

    #[test]
    fn aggregate_means() {
        let s = NeighborSnapshot::solo(0, Vector::from_vec(vec![1., 2.]), 0);
        assert_eq!(aggregate(&s).unwrap(), Vector::from_vec(vec![1., 2.]));
        let s = NeighborSnapshot::new(0, vec![entry(0, &[3., 4.]), entry(1, &[3., 4.])]).unwrap();
        assert_eq!(aggregate(&s).unwrap(), Vector::from_vec(vec![3., 4.]));
        let s = NeighborSnapshot::new(
            1,
            vec![entry(0, &[1., 0.]), entry(1, &[0., 1.]), entry(2, &[2., 2.])],
        )
        .unwrap();
        assert_eq!(aggregate(&s).unwrap(), Vector::from_vec(vec![1., 1.]));
        let s = NeighborSnapshot::new(0, vec![entry(0, &[1., 0.]), entry(1, &[1.])]).unwrap();
        assert!(matches!(aggregate(&s), Err(Error::CorruptMessage(_))));
    }

    #[test]
    fn snapshot_invariants() {
        assert!(NeighborSnapshot::new(0, vec![entry(1, &[1.])]).is_err());
        assert!(NeighborSnapshot::new(0, vec![entry(0, &[1.]), entry(0, &[2.])]).is_err());
    }

    #[test]
    fn single_block_uses_all_rows() {
        let cfg = config(randn(4, 3, 1), randv(4, 2), 4, Mode::Consistent);
        let mut st = state(&cfg, None);
        for _ in 0..3 {
            assert_eq!(sample_block(&cfg, &mut st), vec![0, 1, 2, 3]);
        }
    }

    #[test]
    fn coverage_cyclic_covers_every_window_of_two() {
        let cfg = config(randn(100, 3, 1), randv(100, 2), 50, Mode::Consistent);
        let mut st = state(&cfg, None);
        let blocks: Vec<Vec<usize>> = (0..200).map(|_| sample_block(&cfg, &mut st)).collect();
        for w in blocks.windows(2) {
            let mut all: Vec<usize> = w.concat();
            all.sort_unstable();
            assert_eq!(all, (0..100).collect::<Vec<_>>());
        }
    }

    #[test]
    fn coverage_cyclic_passes_cover_all_rows() {
        let cfg = config(randn(23, 3, 1), randv(23, 2), 5, Mode::Consistent);
        let mut st = state(&cfg, None);
        assert_eq!(st.sampler.chunks().len(), 5);
        for _ in 0..10 {
            let mut pass: Vec<usize> = (0..5).flat_map(|_| sample_block(&cfg, &mut st)).collect();
            pass.sort_unstable();
            assert_eq!(pass, (0..23).collect::<Vec<_>>());
        }
    }

    #[test]
    fn iid_uniform_frequencies() {
        let mut cfg = config(randn(20, 2, 1), randv(20, 2), 5, Mode::Consistent);
        cfg.sampling = Sampling::IidUniform;
        let mut st = state(&cfg, None);
        let draws = 10_000;
        let mut counts = vec![0usize; 20];
        for _ in 0..draws {
            let block = sample_block(&cfg, &mut st);
            assert_eq!(block.len(), 5);
            assert!(block.windows(2).all(|w| w[0] < w[1]));
            for j in block {
                counts[j] += 1;
            }
        }
        let expected = draws as f64 * 5.0 / 20.0;
        for c in counts {
            assert!((c as f64 - expected).abs() <= 0.05 * expected, "count {c}");
        }
    }

    #[test]
    fn consistent_fixed_point_and_exact_projection() {
        let a = randn(6, 3, 3);
        let xs = randv(3, 4);
        let b = &a * &xs;
        let cfg = config(a.clone(), b.clone(), 2, Mode::Consistent);
        let st = state(&cfg, Some(xs.clone()));
        let snap = NeighborSnapshot::new(
            0,
            vec![
                SnapshotEntry { sender: 0, payload: xs.clone(), iteration: 0 },
                SnapshotEntry { sender: 1, payload: xs.clone(), iteration: 3 },
            ],
        )
        .unwrap();
        let st = step_consistent(&cfg, st, &snap).unwrap();
        assert!((&st.x - &xs).norm() < 1e-12);
        assert_eq!(st.k, 1);

        let sq = randn(3, 3, 5);
        let b = randv(3, 6);
        let cfg = config(sq.clone(), b.clone(), 3, Mode::Consistent);
        let st = state(&cfg, None);
        let snap = NeighborSnapshot::solo(0, st.x.clone(), 0);
        let st = step_consistent(&cfg, st, &snap).unwrap();
        let exact = sq.lu().solve(&b).unwrap();
        assert!((&st.x - exact).norm() < 1e-10);
    }

    #[test]
    fn two_agents_alternating_converge() {
        let a = randn(4, 2, 7);
        let b = &a * randv(2, 8);
        let xs = linalg::min_norm_solve(&a, &b).unwrap();
        let cfgs: Vec<AgentConfig> = (0..2)
            .map(|i| AgentConfig {
                id: i,
                a: a.rows(2 * i, 2).into_owned(),
                b: b.rows(2 * i, 2).into_owned(),
                rows: 2 * i..2 * i + 2,
                m_total: 4,
                block_size: 1,
                mode: Mode::Consistent,
                sampling: Sampling::CoverageCyclic,
            })
            .collect();
        let mut states: Vec<AgentState> = cfgs
            .iter()
            .map(|c| AgentState::new(c, None, stream_rng(3, c.id as u64)).unwrap())
            .collect();
        let mut converged_at = None;
        for step_no in 0..500 {
            let i = step_no % 2;
            let other = 1 - i;
            let snap = NeighborSnapshot::new(
                i,
                vec![
                    SnapshotEntry { sender: i, payload: states[i].x.clone(), iteration: states[i].k },
                    SnapshotEntry { sender: other, payload: states[other].x.clone(), iteration: states[other].k },
                ],
            )
            .unwrap();
            let st = states[i].clone();
            states[i] = step_consistent(&cfgs[i], st, &snap).unwrap();
            if states.iter().all(|s| (&s.x - &xs).norm() < 1e-6) {
                converged_at = Some(step_no);
                break;
            }
        }
        assert!(converged_at.is_some(), "did not converge in 500 steps");
    }

    #[test]
    fn augmented_hand_example() {
        let a = DenseMatrix::from_row_slice(1, 2, &[1., 0.]);
        let cfg = config(
            a,
            Vector::from_vec(vec![2.]),
            1,
            Mode::Augmented { lambda: 1.0, aux: AuxMode::Local },
        );
        let st = state(&cfg, None);
        let snap = NeighborSnapshot::solo(0, snapshot_payload(&cfg, &st), 0);
        let st = step_augmented(&cfg, st, &snap).unwrap();
        assert!((&st.x - Vector::from_vec(vec![1., 0.])).norm() < 1e-15);
        let y = st.y.as_ref().unwrap();
        assert!((y[0] - 1.0).abs() < 1e-15);
        // A x + lambda y = 1 + 1 = b.
        assert!((st.x[0] + y[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn augmented_fixed_point() {
        let a = randn(5, 3, 9);
        let b = randv(5, 10);
        let lambda = 0.8;
        let (xt, yt) = linalg::augmented_min_norm_solve(&a, &b, lambda).unwrap();
        for aux in [AuxMode::Local, AuxMode::Shared] {
            let cfg = config(a.clone(), b.clone(), 2, Mode::Augmented { lambda, aux });
            let mut st = state(&cfg, Some(xt.clone()));
            st.y = Some(yt.clone());
            let payload = snapshot_payload(&cfg, &st);
            let snap = NeighborSnapshot::new(
                0,
                vec![
                    SnapshotEntry { sender: 0, payload: payload.clone(), iteration: 0 },
                    SnapshotEntry { sender: 2, payload, iteration: 0 },
                ],
            )
            .unwrap();
            let st = step_augmented(&cfg, st, &snap).unwrap();
            assert!((&st.x - &xt).norm() < 1e-12);
            assert!((st.y.unwrap() - &yt).norm() < 1e-12);
        }
    }

    #[test]
    fn augmented_large_lambda_barely_moves() {
        let a = randn(3, 4, 11);
        let b = randv(3, 12);
        let lambda = 1e3;
        let cfg = config(a.clone(), b.clone(), 3, Mode::Augmented { lambda, aux: AuxMode::Local });
        let st = state(&cfg, None);
        let snap = NeighborSnapshot::solo(0, snapshot_payload(&cfg, &st), 0);
        let st = step_augmented(&cfg, st, &snap).unwrap();
        // alpha = (AA^T + lambda^2)^{-1} b, and ||AA^T|| << lambda^2.
        let gram_norm = linalg::spectral_norm(&(&a * a.transpose()));
        let alpha_norm = st.y.as_ref().unwrap().norm() / lambda;
        assert!(alpha_norm <= b.norm() / (lambda * lambda));
        assert!(alpha_norm >= b.norm() / (lambda * lambda + gram_norm));
        assert!(st.x.norm() <= linalg::spectral_norm(&a) * b.norm() / (lambda * lambda));
    }

    #[test]
    fn augmented_small_lambda_matches_consistent() {
        let a = randn(3, 6, 13);
        let b = randv(3, 14);
        let w = randv(6, 15);
        let cons = config(a.clone(), b.clone(), 3, Mode::Consistent);
        let aug = config(a, b, 3, Mode::Augmented { lambda: 1e-5, aux: AuxMode::Local });
        let c = step_consistent(&cons, state(&cons, Some(w.clone())), &NeighborSnapshot::solo(0, w.clone(), 0)).unwrap();
        let g = step_augmented(&aug, state(&aug, Some(w.clone())), &NeighborSnapshot::solo(0, w, 0)).unwrap();
        assert!((c.x - g.x).norm() < 1e-8);
    }

    #[test]
    fn y_outside_block_untouched() {
        let a = randn(6, 3, 16);
        let cfg = config(a, randv(6, 17), 2, Mode::Augmented { lambda: 0.5, aux: AuxMode::Local });
        let mut st = state(&cfg, None);
        st.y = Some(randv(6, 18));
        let before = st.y.clone().unwrap();
        let snap = NeighborSnapshot::solo(0, snapshot_payload(&cfg, &st), 0);
        let st = step_augmented(&cfg, st, &snap).unwrap();
        let after = st.y.unwrap();
        for j in 0..6 {
            if !st.last_block.contains(&j) {
                assert_eq!(after[j].to_bits(), before[j].to_bits());
            }
        }
    }

    #[test]
    fn payload_semantics() {
        let a = randn(4, 3, 19);
        let b = randv(4, 20);
        let local = config(a.clone(), b.clone(), 2, Mode::Augmented { lambda: 1.0, aux: AuxMode::Local });
        let st = state(&local, None);
        assert_eq!(snapshot_payload(&local, &st).len(), 3);

        let mut shared = config(a.clone(), b.clone(), 2, Mode::Augmented { lambda: 1.0, aux: AuxMode::Shared });
        shared.m_total = 10;
        let st = state(&shared, None);
        assert_eq!(snapshot_payload(&shared, &st).len(), 13);

        let cons = config(a, b, 2, Mode::Consistent);
        let st = state(&cons, Some(randv(3, 21)));
        let payload = snapshot_payload(&cons, &st);
        assert_eq!(payload, st.x);
        let snap = NeighborSnapshot::solo(0, payload.clone(), 0);
        let kept = payload.clone();
        let _ = step_consistent(&cons, st, &snap).unwrap();
        assert_eq!(payload, kept);
    }

    #[test]
    fn block_cache_filled_once_per_chunk() {
        let cfg = config(randn(12, 3, 22), randv(12, 23), 4, Mode::Consistent);
        let mut st = state(&cfg, None);
        for _ in 0..9 {
            let snap = NeighborSnapshot::solo(0, st.x.clone(), st.k);
            st = step_consistent(&cfg, st, &snap).unwrap();
        }
        assert_eq!(st.cache_len(), 3);
    }

    #[test]
    fn baseline_reference_step() {
        let a = randn(2, 4, 24);
        let xs = randv(4, 25);
        let b = &a * &xs;
        let cfg = config(a.clone(), b.clone(), 2, Mode::Baseline);
        // Baseline requires A_i x = b_i at start.
        let x0 = kaczmarz_start(&a, &b);
        let st = state(&cfg, Some(x0));
        let w = randv(4, 26);
        let snap = NeighborSnapshot::new(
            0,
            vec![
                SnapshotEntry { sender: 0, payload: st.x.clone(), iteration: 0 },
                SnapshotEntry { sender: 1, payload: w, iteration: 0 },
            ],
        )
        .unwrap();
        let st = step_baseline(&cfg, st, &snap).unwrap();
        assert!((&a * &st.x - &b).norm() < 1e-10);
    }

    fn kaczmarz_start(a: &DenseMatrix, b: &Vector) -> Vector {
        linalg::min_norm_solve(a, b).unwrap()
    }
}

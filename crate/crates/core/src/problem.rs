//! Linear-system instances: seeded generation, row partitioning, persistence.

use std::collections::HashSet;
use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, DenseMatrix, SparseMatrix, Vector};
use crate::mtx;
use crate::rng::{stream, stream_rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub m: usize,
    pub n: usize,
    /// Fraction of nonzero entries, in `(0, 1]`.
    pub density: f64,
    /// Standard deviation of the additive noise on `b`.
    pub noise_sigma: f64,
    pub seed: u64,
    pub agents: usize,
    /// When set, `A = S R` with `S` sparse `m x rank` and `R` dense `rank x n`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
}

impl ProblemSpec {
    pub fn validate(&self) -> Result<()> {
        if self.agents == 0 {
            return Err(Error::InvalidParameter("agent count must be positive".into()));
        }
        if self.agents > self.m {
            return Err(Error::TooManyAgents {
                rows: self.m,
                agents: self.agents,
            });
        }
        if !(self.density > 0.0 && self.density <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "density must lie in (0, 1], got {}",
                self.density
            )));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "noise sigma must be nonnegative, got {}",
                self.noise_sigma
            )));
        }
        if let Some(r) = self.rank {
            if r == 0 || r > self.m.min(self.n) {
                return Err(Error::InvalidParameter(format!(
                    "rank {r} outside 1..={}",
                    self.m.min(self.n)
                )));
            }
        }
        Ok(())
    }
}

/// One agent's contiguous row block.
#[derive(Debug, Clone, PartialEq)]
pub struct Shard {
    pub rows: Range<usize>,
    pub a: DenseMatrix,
    pub b: Vector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProblemInstance {
    pub spec: ProblemSpec,
    pub a: SparseMatrix,
    pub b: Vector,
    /// Planted solution used to build `b`.
    pub x_planted: Vector,
    /// `A^+ b`.
    pub x_min_norm: Vector,
    pub shards: Vec<Shard>,
}

impl ProblemInstance {
    pub fn dense_a(&self) -> DenseMatrix {
        self.a.to_dense()
    }

    pub fn m(&self) -> usize {
        self.a.rows()
    }

    pub fn n(&self) -> usize {
        self.a.cols()
    }

    /// Rebuilds the instance with a different number of agents.
    pub fn repartition(&self, agents: usize) -> Result<Self> {
        let mut out = self.clone();
        out.spec.agents = agents;
        out.shards = build_shards(&self.a, &self.b, agents)?;
        Ok(out)
    }
}

/// Number of nonzeros for a `rows x cols` matrix at the given density.
fn nonzero_count(rows: usize, cols: usize, density: f64) -> Result<usize> {
    let target = density * rows as f64 * cols as f64;
    if target < 1.0 {
        return Err(Error::DegenerateInstance(format!(
            "density {density} on a {rows}x{cols} matrix gives no nonzeros"
        )));
    }
    // Guard against 0.05 * 200 * 50 = 500.00000000000006 rounding up.
    Ok(((target - 1e-9).ceil() as usize).min(rows * cols))
}

/// Exactly `nnz` distinct positions drawn uniformly; collisions are redrawn.
fn sparse_normal(
    rows: usize,
    cols: usize,
    nnz: usize,
    rng: &mut impl Rng,
) -> Result<SparseMatrix> {
    let mut seen = HashSet::with_capacity(nnz);
    let mut triplets = Vec::with_capacity(nnz);
    while triplets.len() < nnz {
        let r = rng.gen_range(0..rows);
        let c = rng.gen_range(0..cols);
        if seen.insert((r, c)) {
            triplets.push((r, c, rng.sample(StandardNormal)));
        }
    }
    SparseMatrix::new(rows, cols, triplets)
}

fn normal_vector(len: usize, rng: &mut impl Rng) -> Vector {
    Vector::from_iterator(len, (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

pub fn generate(spec: &ProblemSpec) -> Result<ProblemInstance> {
    spec.validate()?;
    let mut rng = stream_rng(spec.seed, stream::MATRIX);
    let a = match spec.rank {
        None => {
            let nnz = nonzero_count(spec.m, spec.n, spec.density)?;
            sparse_normal(spec.m, spec.n, nnz, &mut rng)?
        }
        Some(r) => {
            let nnz = nonzero_count(spec.m, r, spec.density)?;
            let left = sparse_normal(spec.m, r, nnz, &mut rng)?.to_dense();
            let right = DenseMatrix::from_fn(r, spec.n, |_, _| rng.sample(StandardNormal));
            SparseMatrix::from_dense(&(left * right))
        }
    };
    let x_planted = normal_vector(spec.n, &mut stream_rng(spec.seed, stream::SOLUTION));
    let mut b = a.mul_vec(&x_planted)?;
    if spec.noise_sigma > 0.0 {
        let eta = normal_vector(spec.m, &mut stream_rng(spec.seed, stream::NOISE));
        b += eta * spec.noise_sigma;
    }
    let x_min_norm = linalg::min_norm_solve(&a.to_dense(), &b)?;
    let shards = build_shards(&a, &b, spec.agents)?;
    Ok(ProblemInstance {
        spec: spec.clone(),
        a,
        b,
        x_planted,
        x_min_norm,
        shards,
    })
}

/// Contiguous row ranges whose sizes differ by at most one, larger ones first.
pub fn partition(m: usize, agents: usize) -> Result<Vec<Range<usize>>> {
    if agents == 0 {
        return Err(Error::InvalidParameter("agent count must be positive".into()));
    }
    if agents > m {
        return Err(Error::TooManyAgents { rows: m, agents });
    }
    let base = m / agents;
    let extra = m % agents;
    let mut start = 0;
    Ok((0..agents)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect())
}

fn build_shards(a: &SparseMatrix, b: &Vector, agents: usize) -> Result<Vec<Shard>> {
    Ok(partition(a.rows(), agents)?
        .into_iter()
        .map(|rows| Shard {
            a: a.dense_rows(rows.start, rows.end),
            b: b.rows(rows.start, rows.len()).into_owned(),
            rows,
        })
        .collect())
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    spec: ProblemSpec,
    m: usize,
    n: usize,
    agents: usize,
    matrix: String,
    rhs: String,
    planted: String,
    min_norm: String,
    shards: Vec<ShardEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ShardEntry {
    index: usize,
    row_start: usize,
    row_end: usize,
    file: String,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `A` as Matrix Market, the vectors as text, one `[A_i b_i]` Matrix
/// Market file per shard and a JSON manifest tying them together.
pub fn save(inst: &ProblemInstance, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    mtx::write_matrix_market(&dir.join("A.mtx"), &inst.a, None)?;
    mtx::write_vector(&dir.join("b.txt"), &inst.b)?;
    mtx::write_vector(&dir.join("x_planted.txt"), &inst.x_planted)?;
    mtx::write_vector(&dir.join("x_min_norm.txt"), &inst.x_min_norm)?;
    let n = inst.n();
    let mut entries = Vec::with_capacity(inst.shards.len());
    for (i, shard) in inst.shards.iter().enumerate() {
        let file = format!("shard_{i:03}.mtx");
        let mut triplets = Vec::new();
        for r in 0..shard.a.nrows() {
            for c in 0..n {
                let v = shard.a[(r, c)];
                if v != 0.0 {
                    triplets.push((r, c, v));
                }
            }
            if shard.b[r] != 0.0 {
                triplets.push((r, n, shard.b[r]));
            }
        }
        let aug = SparseMatrix::new(shard.a.nrows(), n + 1, triplets)?;
        let comment = format!(
            "rows {}..{} of A; columns 1..{n} hold A_i, column {} holds b_i",
            shard.rows.start,
            shard.rows.end,
            n + 1
        );
        mtx::write_matrix_market(&dir.join(&file), &aug, Some(&comment))?;
        entries.push(ShardEntry {
            index: i,
            row_start: shard.rows.start,
            row_end: shard.rows.end,
            file,
        });
    }
    let manifest = Manifest {
        spec: inst.spec.clone(),
        m: inst.m(),
        n,
        agents: inst.shards.len(),
        matrix: "A.mtx".into(),
        rhs: "b.txt".into(),
        planted: "x_planted.txt".into(),
        min_norm: "x_min_norm.txt".into(),
        shards: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn load(dir: &Path) -> Result<ProblemInstance> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::parse(&path, e.to_string()))?;
    let a = mtx::read_matrix_market(&dir.join(&manifest.matrix))?;
    let b = mtx::read_vector(&dir.join(&manifest.rhs))?;
    let x_planted = mtx::read_vector(&dir.join(&manifest.planted))?;
    let x_min_norm = mtx::read_vector(&dir.join(&manifest.min_norm))?;
    if a.rows() != manifest.m || a.cols() != manifest.n || b.len() != manifest.m {
        return Err(Error::parse(&path, "dimensions disagree with data files"));
    }
    if x_planted.len() != manifest.n || x_min_norm.len() != manifest.n {
        return Err(Error::parse(&path, "solution vectors have the wrong length"));
    }
    if manifest.shards.len() != manifest.agents {
        return Err(Error::parse(&path, "shard count disagrees with agent count"));
    }
    let mut shards = Vec::with_capacity(manifest.agents);
    let mut expected_start = 0;
    for entry in &manifest.shards {
        let file = dir.join(&entry.file);
        if entry.row_start != expected_start || entry.row_end < entry.row_start {
            return Err(Error::parse(&path, "shard ranges do not tile the rows"));
        }
        expected_start = entry.row_end;
        let aug = mtx::read_matrix_market(&file)?.to_dense();
        let rows = entry.row_start..entry.row_end;
        if aug.nrows() != rows.len() || aug.ncols() != manifest.n + 1 {
            return Err(Error::parse(&file, "shard shape disagrees with manifest"));
        }
        let shard = Shard {
            a: aug.columns(0, manifest.n).into_owned(),
            b: aug.column(manifest.n).into_owned(),
            rows,
        };
        if shard.a != a.dense_rows(shard.rows.start, shard.rows.end)
            || shard.b != b.rows(shard.rows.start, shard.rows.len())
        {
            return Err(Error::parse(&file, "shard contents disagree with A.mtx/b.txt"));
        }
        shards.push(shard);
    }
    if expected_start != manifest.m {
        return Err(Error::parse(&path, "shard ranges do not cover all rows"));
    }
    Ok(ProblemInstance {
        spec: manifest.spec,
        a,
        b,
        x_planted,
        x_min_norm,
        shards,
    })
}

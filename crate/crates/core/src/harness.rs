//! Experiment driver: single runs, parameter sweeps with replicates, metrics
//! files and plot-ready output.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agent::{AuxMode, Mode, Sampling};
use crate::analysis::{self, CertifyReport};
use crate::error::{Error, Result};
use crate::problem::{self, ProblemInstance, ProblemSpec};
use crate::sim::{self, FailureConfig, MetricsRecord, SimConfig, SimOutput, SimParams, Trigger};
use crate::topology::Topology;

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const EVENTS_FILE: &str = "events.csv";
pub const CERTIFY_FILE: &str = "certify.json";
pub const CONFIGS_FILE: &str = "configs.json";
pub const TOPOLOGY_FILE: &str = "topology.txt";
pub const REPORT_FILE: &str = "report.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentSettings {
    /// Rows per projection block.
    pub block_size: usize,
    pub mode: Mode,
    pub sampling: Sampling,
}

impl Default for AgentSettings {
    fn default() -> Self {
        Self {
            block_size: 50,
            mode: Mode::Consistent,
            sampling: Sampling::CoverageCyclic,
        }
    }
}

/// Everything needed to reproduce one simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub problem: ProblemSpec,
    pub sim: SimParams,
    pub agent: AgentSettings,
    /// Degree cap of the communication graph; the agent count when `None`.
    pub neighbor_cap: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            problem: ProblemSpec {
                m: 200,
                n: 50,
                density: 0.05,
                noise_sigma: 0.0,
                seed: 0,
                agents: 4,
                rank: None,
            },
            sim: SimParams::default(),
            agent: AgentSettings::default(),
            neighbor_cap: None,
        }
    }
}

impl RunConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }

    pub fn topology(&self, agents: usize) -> Result<Topology> {
        Topology::build_pascal(agents, self.neighbor_cap.unwrap_or(agents), self.sim.seed)
    }

    /// Simulation on `inst`, which must be partitioned for this config.
    pub fn sim_config(&self, inst: &ProblemInstance) -> Result<SimConfig> {
        let topo = self.topology(inst.shards.len())?;
        SimConfig::from_instance(
            inst,
            topo,
            self.agent.block_size,
            self.agent.mode,
            self.agent.sampling,
            self.sim.clone(),
        )
    }
}

/// `ceil(m / (n * theta1))`.
pub fn derive_agent_count(m: usize, n: usize, theta1: f64) -> Result<usize> {
    if !(theta1 > 0.0) || !theta1.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "data ratio must be positive, got {theta1}"
        )));
    }
    let raw = m as f64 / (n as f64 * theta1);
    Ok(((raw - 1e-9).ceil() as usize).max(1))
}

/// Field-wise mean.
pub fn aggregate_replicates(records: &[MetricsRecord]) -> Result<MetricsRecord> {
    if records.is_empty() {
        return Err(Error::InvalidParameter("no replicates to aggregate".into()));
    }
    let mut sum = [0.0; 8];
    for r in records {
        for (s, v) in sum.iter_mut().zip(r.fields()) {
            *s += v;
        }
    }
    Ok(MetricsRecord::from_fields(sum.map(|s| s / records.len() as f64)))
}

/// One raw row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub cell: usize,
    pub rep: usize,
    pub seed: u64,
    pub k_iter: f64,
    pub t_cmp: f64,
    pub c: f64,
    pub t_comm: f64,
    #[serde(rename = "T")]
    pub wall: f64,
    pub e_stop: f64,
    pub k_stop: f64,
    pub t_stop: f64,
    pub config: String,
}

impl MetricsRow {
    pub fn new(cell: usize, rep: usize, cfg: &RunConfig, m: &MetricsRecord) -> Self {
        Self {
            cell,
            rep,
            seed: cfg.sim.seed,
            k_iter: m.k_iter,
            t_cmp: m.t_cmp,
            c: m.c,
            t_comm: m.t_comm,
            wall: m.wall,
            e_stop: m.e_stop,
            k_stop: m.k_stop,
            t_stop: m.t_stop,
            config: cfg.hash(),
        }
    }

    pub fn metrics(&self) -> MetricsRecord {
        MetricsRecord {
            k_iter: self.k_iter,
            t_cmp: self.t_cmp,
            c: self.c,
            t_comm: self.t_comm,
            wall: self.wall,
            e_stop: self.e_stop,
            k_stop: self.k_stop,
            t_stop: self.t_stop,
        }
    }
}

/// Mean of one sweep cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub cell: usize,
    pub value: String,
    pub reps: usize,
    pub converged: usize,
    pub k_iter: f64,
    pub t_cmp: f64,
    pub c: f64,
    pub t_comm: f64,
    #[serde(rename = "T")]
    pub wall: f64,
    pub e_stop: f64,
    pub k_stop: f64,
    pub t_stop: f64,
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::parse(path, format!("{other:?}")),
    }
}

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<MetricsRow>, _>>()
        .map_err(|e| csv_error(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Instance for `cfg`, either loaded from `dir` or generated.
pub fn instance(cfg: &RunConfig, dir: Option<&Path>) -> Result<ProblemInstance> {
    match dir {
        Some(d) => problem::load(d),
        None => problem::generate(&cfg.problem),
    }
}

pub struct RunResult {
    pub output: SimOutput,
    pub metrics_path: PathBuf,
    pub events_path: PathBuf,
}

/// Simulates `cfg` on `inst` and writes `metrics.csv`, `events.csv`,
/// `topology.txt` and `configs.json` into `out`.
pub fn run_to_dir(cfg: &RunConfig, inst: &ProblemInstance, out: &Path) -> Result<RunResult> {
    create_dir(out)?;
    let sim_cfg = cfg.sim_config(inst)?;
    let output = sim::simulate(&sim_cfg)?;
    let metrics_path = out.join(METRICS_FILE);
    let events_path = out.join(EVENTS_FILE);
    write_rows(&metrics_path, &[MetricsRow::new(0, 0, cfg, &output.metrics)])?;
    output.log.write_csv(&events_path)?;
    sim_cfg.topology.write_edge_list(&out.join(TOPOLOGY_FILE))?;
    write_json(&out.join(CONFIGS_FILE), &BTreeMap::from([(cfg.hash(), cfg)]))?;
    Ok(RunResult {
        output,
        metrics_path,
        events_path,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "axis")]
pub enum SweepAxis {
    /// Per-agent data ratios; the agent count is derived from each.
    AgentCount { theta1: Vec<f64> },
    /// Neighbor cap as a fraction of the agent count.
    NeighborCap { theta2: Vec<f64> },
    /// Broadcast every `dt` iterations.
    Interval { dt: Vec<u64> },
    /// Cartesian product of failure ratios and intensities.
    Failure { rho: Vec<f64>, xi: Vec<f64> },
    /// Regularization values; zero runs the plain consistent iteration.
    Lambda { lambda: Vec<f64> },
}

impl SweepAxis {
    pub fn cell_count(&self) -> usize {
        match self {
            SweepAxis::AgentCount { theta1 } => theta1.len(),
            SweepAxis::NeighborCap { theta2 } => theta2.len(),
            SweepAxis::Interval { dt } => dt.len(),
            SweepAxis::Failure { rho, xi } => rho.len() * xi.len(),
            SweepAxis::Lambda { lambda } => lambda.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub base: RunConfig,
    pub axis: SweepAxis,
    pub repetitions: usize,
}

/// Mode for a swept regularization value.
pub fn lambda_mode(base: Mode, lambda: f64) -> Result<Mode> {
    if lambda == 0.0 {
        return Ok(Mode::Consistent);
    }
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidParameter(format!("lambda must be >= 0, got {lambda}")));
    }
    let aux = match base {
        Mode::Augmented { aux, .. } => aux,
        _ => AuxMode::Shared,
    };
    Ok(Mode::Augmented { lambda, aux })
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(Error::InvalidParameter("repetitions must be at least 1".into()));
        }
        if self.axis.cell_count() == 0 {
            return Err(Error::InvalidParameter("sweep has no values".into()));
        }
        Ok(())
    }

    /// Resolved configuration and label of every cell, replicate seeds not yet applied.
    pub fn cells(&self) -> Result<Vec<(String, RunConfig)>> {
        self.validate()?;
        let base = &self.base;
        let p = &base.problem;
        let with = |f: &dyn Fn(&mut RunConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c
        };
        Ok(match &self.axis {
            SweepAxis::AgentCount { theta1 } => theta1
                .iter()
                .map(|&t| {
                    let agents = derive_agent_count(p.m, p.n, t)?;
                    Ok((t.to_string(), with(&|c| c.problem.agents = agents)))
                })
                .collect::<Result<_>>()?,
            SweepAxis::NeighborCap { theta2 } => theta2
                .iter()
                .map(|&t| {
                    if !(t > 0.0) {
                        return Err(Error::InvalidParameter(format!(
                            "neighbor fraction must be positive, got {t}"
                        )));
                    }
                    let cap = ((p.agents as f64 * t) - 1e-9).ceil() as usize;
                    Ok((t.to_string(), with(&|c| c.neighbor_cap = Some(cap))))
                })
                .collect::<Result<_>>()?,
            SweepAxis::Interval { dt } => dt
                .iter()
                .map(|&d| {
                    (d.to_string(), with(&|c| c.sim.trigger = Trigger::EveryK { interval: d }))
                })
                .collect(),
            SweepAxis::Failure { rho, xi } => rho
                .iter()
                .flat_map(|&r| xi.iter().map(move |&x| (r, x)))
                .map(|(r, x)| {
                    let f = FailureConfig { rho: r, xi: x, seed: None };
                    (format!("{r}/{x}"), with(&|c| c.sim.failure = Some(f)))
                })
                .collect(),
            SweepAxis::Lambda { lambda } => lambda
                .iter()
                .map(|&l| {
                    let mode = lambda_mode(base.agent.mode, l)?;
                    Ok((l.to_string(), with(&|c| c.agent.mode = mode)))
                })
                .collect::<Result<_>>()?,
        })
    }
}

/// Seed of replicate `rep` in cell `cell`.
pub fn replicate_seed(base: u64, cell: usize, rep: usize) -> u64 {
    base + 1000 * cell as u64 + rep as u64
}

pub struct SweepResult {
    pub raw: Vec<MetricsRow>,
    pub summary: Vec<SummaryRow>,
}

/// Runs every cell `repetitions` times on one instance (repartitioned when
/// the agent count changes) and writes `metrics.csv`, `summary.csv` and
/// `configs.json` into `out`.
pub fn sweep(plan: &ExperimentPlan, inst: &ProblemInstance, out: &Path) -> Result<SweepResult> {
    create_dir(out)?;
    let cells = plan.cells()?;
    let mut raw = Vec::new();
    let mut summary = Vec::new();
    let mut configs = BTreeMap::new();
    for (c, (label, cell_cfg)) in cells.iter().enumerate() {
        let cell_inst = if cell_cfg.problem.agents == inst.shards.len() {
            inst.clone()
        } else {
            inst.repartition(cell_cfg.problem.agents)?
        };
        let mut records = Vec::with_capacity(plan.repetitions);
        let mut converged = 0;
        for r in 0..plan.repetitions {
            let mut cfg = cell_cfg.clone();
            cfg.sim.seed = replicate_seed(plan.base.sim.seed, c, r);
            let output = sim::simulate(&cfg.sim_config(&cell_inst)?)?;
            converged += usize::from(output.converged());
            raw.push(MetricsRow::new(c, r, &cfg, &output.metrics));
            records.push(output.metrics);
            configs.insert(cfg.hash(), cfg);
        }
        let mean = aggregate_replicates(&records)?;
        summary.push(SummaryRow {
            cell: c,
            value: label.clone(),
            reps: plan.repetitions,
            converged,
            k_iter: mean.k_iter,
            t_cmp: mean.t_cmp,
            c: mean.c,
            t_comm: mean.t_comm,
            wall: mean.wall,
            e_stop: mean.e_stop,
            k_stop: mean.k_stop,
            t_stop: mean.t_stop,
        });
    }
    write_rows(&out.join(METRICS_FILE), &raw)?;
    write_rows(&out.join(SUMMARY_FILE), &summary)?;
    write_json(&out.join(CONFIGS_FILE), &configs)?;
    Ok(SweepResult { raw, summary })
}

/// Runs `cfg`, then certifies the first `window` iterations of the run.
pub fn certify(cfg: &RunConfig, inst: &ProblemInstance, window: usize, l: usize, out: &Path) -> Result<CertifyReport> {
    create_dir(out)?;
    let sim_cfg = cfg.sim_config(inst)?;
    let output = sim::simulate(&sim_cfg)?;
    let history = analysis::iteration_history(&output.log);
    let end = window.min(history.len());
    let depth = cfg.sim.delay_depth().max(analysis::max_stage(&history[..end]));
    let report = analysis::certify(
        &inst.dense_a(),
        &history,
        inst.shards.len(),
        depth,
        0..end,
        l,
        200_000,
    )?;
    write_json(&out.join(CERTIFY_FILE), &report)?;
    Ok(report)
}

/// One `cell,rep,seed,metric,value` row per metric of every raw row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongRow {
    pub cell: usize,
    pub rep: usize,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

pub fn long_format(rows: &[MetricsRow]) -> Vec<LongRow> {
    const NAMES: [&str; 8] = ["k_iter", "t_cmp", "c", "t_comm", "T", "e_stop", "k_stop", "t_stop"];
    rows.iter()
        .flat_map(|r| {
            NAMES.iter().zip(r.metrics().fields()).map(|(name, value)| LongRow {
                cell: r.cell,
                rep: r.rep,
                seed: r.seed,
                metric: name.to_string(),
                value,
            })
        })
        .collect()
}

/// Converts `input/metrics.csv` into `out/report.csv`.
pub fn report(input: &Path, out: &Path) -> Result<PathBuf> {
    let rows = read_metrics(&input.join(METRICS_FILE))?;
    create_dir(out)?;
    let path = out.join(REPORT_FILE);
    write_rows(&path, &long_format(&rows))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        RunConfig {
            problem: ProblemSpec {
                m: 40,
                n: 10,
                density: 0.3,
                noise_sigma: 0.0,
                seed: 2,
                agents: 3,
                rank: None,
            },
            sim: SimParams {
                trigger: Trigger::EveryK { interval: 2 },
                tol: 1e-4,
                event_budget: 50_000,
                ..SimParams::default()
            },
            agent: AgentSettings {
                block_size: 5,
                ..AgentSettings::default()
            },
            neighbor_cap: None,
        }
    }

    #[test]
    fn agent_counts() {
        assert_eq!(derive_agent_count(30000, 3000, 0.8).unwrap(), 13);
        assert_eq!(derive_agent_count(50, 50, 1.0).unwrap(), 1);
        assert_eq!(derive_agent_count(50000, 3000, 0.371).unwrap(), 45);
        assert!(derive_agent_count(10, 2, 0.0).is_err());
        assert!(derive_agent_count(10, 2, -1.0).is_err());
    }

    #[test]
    fn replicate_means() {
        let rec = |k: f64| MetricsRecord { k_iter: k, ..MetricsRecord::default() };
        assert_eq!(aggregate_replicates(&[rec(2.0)]).unwrap(), rec(2.0));
        assert_eq!(aggregate_replicates(&[rec(2.0), rec(4.0)]).unwrap().k_iter, 3.0);
        assert!(aggregate_replicates(&[]).is_err());
    }

    #[test]
    fn lambda_zero_maps_to_consistent() {
        assert_eq!(lambda_mode(Mode::Consistent, 0.0).unwrap(), Mode::Consistent);
        assert_eq!(
            lambda_mode(Mode::Consistent, 0.3).unwrap(),
            Mode::Augmented { lambda: 0.3, aux: AuxMode::Shared }
        );
        assert!(lambda_mode(Mode::Consistent, -1.0).is_err());
    }

    #[test]
    fn seeds_follow_cell_and_replicate() {
        assert_eq!(replicate_seed(7, 0, 0), 7);
        assert_eq!(replicate_seed(7, 2, 3), 2010);
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let a = small();
        let mut b = small();
        assert_eq!(a.hash(), b.hash());
        b.sim.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = small();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), cfg);
        let partial: RunConfig = serde_json::from_str(r#"{"neighbor_cap": 2}"#).unwrap();
        assert_eq!(partial.problem.m, 200);
        assert_eq!(partial.neighbor_cap, Some(2));
    }

    #[test]
    fn run_writes_identical_metrics_twice() {
        let cfg = small();
        let inst = instance(&cfg, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let a = run_to_dir(&cfg, &inst, &dir.path().join("a")).unwrap();
        let b = run_to_dir(&cfg, &inst, &dir.path().join("b")).unwrap();
        assert!(a.output.converged());
        let text = |p: &Path| fs::read_to_string(p).unwrap();
        assert_eq!(text(&a.metrics_path), text(&b.metrics_path));
        assert_eq!(text(&a.events_path), text(&b.events_path));
        let header = text(&a.metrics_path).lines().next().unwrap().to_string();
        assert_eq!(header, "cell,rep,seed,k_iter,t_cmp,c,t_comm,T,e_stop,k_stop,t_stop,config");
        assert!(text(&a.events_path).starts_with("time,kind,agent,detail\n"));
    }

    #[test]
    fn sweep_shapes_and_envelope() {
        let mut base = small();
        base.problem.noise_sigma = 1.0;
        base.sim.tol = 1e-3;
        let plan = ExperimentPlan {
            base: base.clone(),
            axis: SweepAxis::Lambda { lambda: vec![0.3, 1.0, 2.0] },
            repetitions: 3,
        };
        let inst = instance(&base, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let res = sweep(&plan, &inst, dir.path()).unwrap();
        assert_eq!(res.summary.len(), 3);
        assert_eq!(res.raw.len(), 9);
        for s in &res.summary {
            let reps: Vec<&MetricsRow> = res.raw.iter().filter(|r| r.cell == s.cell).collect();
            assert_eq!(reps.len(), 3);
            let lo = reps.iter().map(|r| r.k_iter).fold(f64::INFINITY, f64::min);
            let hi = reps.iter().map(|r| r.k_iter).fold(0.0, f64::max);
            assert!(s.k_iter >= lo && s.k_iter <= hi);
        }
        assert_eq!(res.raw[4].seed, replicate_seed(base.sim.seed, 1, 1));
        let back = read_metrics(&dir.path().join(METRICS_FILE)).unwrap();
        assert_eq!(back, res.raw);
        let configs: BTreeMap<String, RunConfig> =
            serde_json::from_str(&fs::read_to_string(dir.path().join(CONFIGS_FILE)).unwrap()).unwrap();
        for r in &back {
            assert_eq!(configs[&r.config].hash(), r.config);
        }

        let out = report(dir.path(), &dir.path().join("plots")).unwrap();
        let text = fs::read_to_string(out).unwrap();
        assert_eq!(text.lines().count(), 1 + 9 * 8);
        assert!(text.starts_with("cell,rep,seed,metric,value\n"));
    }

    #[test]
    fn sweep_cells_per_axis() {
        let base = small();
        let plan = |axis| ExperimentPlan { base: base.clone(), axis, repetitions: 1 };
        let cells = plan(SweepAxis::AgentCount { theta1: vec![0.5, 1.0] }).cells().unwrap();
        assert_eq!(cells[0].1.problem.agents, 8);
        assert_eq!(cells[1].1.problem.agents, 4);
        let cells = plan(SweepAxis::NeighborCap { theta2: vec![0.5] }).cells().unwrap();
        assert_eq!(cells[0].1.neighbor_cap, Some(2));
        let cells = plan(SweepAxis::Failure { rho: vec![0.1, 0.2], xi: vec![1.0, 2.0, 3.0] }).cells().unwrap();
        assert_eq!(cells.len(), 6);
        let cells = plan(SweepAxis::Interval { dt: vec![1, 5] }).cells().unwrap();
        assert_eq!(cells[1].1.sim.trigger, Trigger::EveryK { interval: 5 });
        assert!(ExperimentPlan { base: base.clone(), axis: SweepAxis::Interval { dt: vec![1] }, repetitions: 0 }
            .cells()
            .is_err());
    }

    #[test]
    fn certify_small_instance() {
        let mut cfg = small();
        cfg.problem = ProblemSpec { m: 6, n: 3, density: 1.0, noise_sigma: 0.0, seed: 1, agents: 2, rank: None };
        cfg.agent.block_size = 2;
        cfg.sim.trigger = Trigger::EveryK { interval: 1 };
        let inst = instance(&cfg, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let rep = certify(&cfg, &inst, 12, 4, dir.path()).unwrap();
        assert!(rep.hybrid_norm <= 1.0 + 1e-12);
        let text = fs::read_to_string(dir.path().join(CERTIFY_FILE)).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        for key in ["window", "hybrid_norm", "complete_rows", "C_l_verdict", "d"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
    }
}

//! Deterministic experiment execution and its output files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapter::{effective_weight, init_adapter_with, LowRankAdapter};
use crate::config::OptimizerConfig;
use crate::error::{LoftError, Result};
use crate::harness::config::{ExperimentConfig, OptimizerId, CONFIG_VERSION};
use crate::linalg::DenseMatrix;
use crate::loft_state::{Alternation, LoftAdamState};
use crate::muon::{loft_muon_step, muon_full_step, LoftMuonState, MuonState};
use crate::optim::{
    adamw_full_step, gd_momentum_full_step, loft_adamw_step, loft_gd_momentum_step, loft_gd_step, lora_adamw_step,
    lora_effective_weight, FullAdamState, LoraAdamState, MomentumState, StepReport,
};
use crate::problems::{gen_rank_r_target, mf_loss_grad, subspace_init, MatrixTarget};

/// One logged row of a trajectory.
///
/// Row `k` holds the loss after `k` steps, the pre-clipping effective
/// gradient norm used by step `k`, and the clamp count accumulated so far.
/// Row 0 is the starting point; its norm is that of the dense gradient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub clamps: u64,
    /// Milliseconds since the start of the run, when timing is enabled.
    pub ms: Option<f64>,
}

/// Parameters and optimizer state of a run in progress.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum MethodState {
    FullGdMomentum { w: DenseMatrix, state: MomentumState },
    FullAdamw { w: DenseMatrix, state: FullAdamState },
    FullMuon { w: DenseMatrix, state: MuonState },
    LoraAdamw { adapter: LowRankAdapter, state: LoraAdamState },
    LoftGd { adapter: LowRankAdapter, state: Alternation },
    LoftGdMomentum { adapter: LowRankAdapter, state: LoftAdamState },
    LoftAdamw { adapter: LowRankAdapter, state: LoftAdamState },
    LoftMuon { adapter: LowRankAdapter, state: LoftMuonState },
}

impl MethodState {
    pub fn new(id: OptimizerId, adapter: LowRankAdapter, cfg: &OptimizerConfig) -> Self {
        let (m, n) = adapter.shape();
        let first = cfg.first_factor;
        match id {
            OptimizerId::FullGdMomentum => MethodState::FullGdMomentum {
                w: effective_weight(&adapter),
                state: MomentumState::new(m, n),
            },
            OptimizerId::FullAdamw => MethodState::FullAdamw {
                w: effective_weight(&adapter),
                state: FullAdamState::new(m, n),
            },
            OptimizerId::FullMuon => MethodState::FullMuon {
                w: effective_weight(&adapter),
                state: MuonState::new(m, n),
            },
            OptimizerId::LoraAdamw => MethodState::LoraAdamw {
                state: LoraAdamState::new(&adapter),
                adapter,
            },
            OptimizerId::LoftGd => MethodState::LoftGd {
                adapter,
                state: Alternation::new(first),
            },
            OptimizerId::LoftGdMomentum => MethodState::LoftGdMomentum {
                state: LoftAdamState::new(&adapter, first),
                adapter,
            },
            OptimizerId::LoftAdamw => MethodState::LoftAdamw {
                state: LoftAdamState::new(&adapter, first),
                adapter,
            },
            OptimizerId::LoftMuon => MethodState::LoftMuon {
                state: LoftMuonState::new(&adapter, first),
                adapter,
            },
        }
    }

    pub fn optimizer(&self) -> OptimizerId {
        match self {
            MethodState::FullGdMomentum { .. } => OptimizerId::FullGdMomentum,
            MethodState::FullAdamw { .. } => OptimizerId::FullAdamw,
            MethodState::FullMuon { .. } => OptimizerId::FullMuon,
            MethodState::LoraAdamw { .. } => OptimizerId::LoraAdamw,
            MethodState::LoftGd { .. } => OptimizerId::LoftGd,
            MethodState::LoftGdMomentum { .. } => OptimizerId::LoftGdMomentum,
            MethodState::LoftAdamw { .. } => OptimizerId::LoftAdamw,
            MethodState::LoftMuon { .. } => OptimizerId::LoftMuon,
        }
    }

    /// The matrix the loss is evaluated at.
    pub fn weight(&self, cfg: &OptimizerConfig) -> DenseMatrix {
        match self {
            MethodState::FullGdMomentum { w, .. } | MethodState::FullAdamw { w, .. } | MethodState::FullMuon { w, .. } => {
                w.clone()
            }
            MethodState::LoraAdamw { adapter, .. } => lora_effective_weight(adapter, cfg.alpha),
            MethodState::LoftGd { adapter, .. }
            | MethodState::LoftGdMomentum { adapter, .. }
            | MethodState::LoftAdamw { adapter, .. }
            | MethodState::LoftMuon { adapter, .. } => effective_weight(adapter),
        }
    }

    pub fn adapter(&self) -> Option<&LowRankAdapter> {
        match self {
            MethodState::FullGdMomentum { .. } | MethodState::FullAdamw { .. } | MethodState::FullMuon { .. } => None,
            MethodState::LoraAdamw { adapter, .. }
            | MethodState::LoftGd { adapter, .. }
            | MethodState::LoftGdMomentum { adapter, .. }
            | MethodState::LoftAdamw { adapter, .. }
            | MethodState::LoftMuon { adapter, .. } => Some(adapter),
        }
    }

    pub fn step(&mut self, gw: &DenseMatrix, cfg: &OptimizerConfig) -> Result<StepReport> {
        match self {
            MethodState::FullGdMomentum { w, state } => gd_momentum_full_step(w, gw, state, cfg),
            MethodState::FullAdamw { w, state } => adamw_full_step(w, gw, state, cfg),
            MethodState::FullMuon { w, state } => muon_full_step(w, gw, state, cfg),
            MethodState::LoraAdamw { adapter, state } => lora_adamw_step(adapter, gw, state, cfg),
            MethodState::LoftGd { adapter, state } => loft_gd_step(adapter, gw, state, cfg),
            MethodState::LoftGdMomentum { adapter, state } => loft_gd_momentum_step(adapter, gw, state, cfg),
            MethodState::LoftAdamw { adapter, state } => loft_adamw_step(adapter, gw, state, cfg),
            MethodState::LoftMuon { adapter, state } => loft_muon_step(adapter, gw, state, cfg),
        }
    }
}

/// Restorable snapshot of a run: the resolved config, the number of steps
/// taken, and the full method state (matrices as shape header plus
/// row-major data).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ExperimentConfig,
    pub step: usize,
    pub clamps: u64,
    pub method: MethodState,
}

impl Checkpoint {
    pub fn load(path: &Path) -> Result<Self> {
        let cp: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if cp.version != CONFIG_VERSION {
            return Err(LoftError::config("version", format!("unsupported checkpoint version {}", cp.version)));
        }
        cp.config.validate()?;
        if cp.method.optimizer() != cp.config.optimizer {
            return Err(LoftError::config("method", "state does not match the configured optimizer"));
        }
        Ok(cp)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub clamps: u64,
    /// Smallest loss reachable at the adapter rank.
    pub rank_r_optimum: f64,
}

/// Everything a finished run produced.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub config: ExperimentConfig,
    pub records: Vec<TrajectoryRecord>,
    pub checkpoint: Checkpoint,
    pub final_metrics: FinalMetrics,
}

pub fn build_target(cfg: &ExperimentConfig) -> Result<MatrixTarget> {
    let p = &cfg.problem;
    gen_rank_r_target(p.m, p.n, p.target_rank, p.seed)
}

/// Initial adapter of an experiment. `W₀` is zero throughout the harness.
pub fn build_adapter(cfg: &ExperimentConfig, target: &MatrixTarget) -> Result<LowRankAdapter> {
    let (m, n) = (cfg.problem.m, cfg.problem.n);
    let w0 = DenseMatrix::zeros(m, n);
    match cfg.adapter.init.adapter_init() {
        Some(init) => init_adapter_with(m, n, cfg.adapter.rank, cfg.adapter.seed, w0, init),
        None => {
            let (u, v) = subspace_init(target, cfg.adapter.rank, cfg.adapter.seed)?;
            LowRankAdapter::from_factors(w0, u, v)
        }
    }
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let target = build_target(cfg)?;
    let method = MethodState::new(cfg.optimizer, build_adapter(cfg, &target)?, &cfg.hyper);
    let start = Checkpoint {
        version: CONFIG_VERSION,
        config: cfg.clone(),
        step: 0,
        clamps: 0,
        method,
    };
    resume_experiment(start, &target)
}

/// Continue a checkpointed run up to its configured iteration count.
/// Resuming reproduces the uninterrupted run bit for bit (timing aside).
pub fn resume_experiment(checkpoint: Checkpoint, target: &MatrixTarget) -> Result<RunOutcome> {
    let Checkpoint {
        config: cfg,
        mut step,
        mut clamps,
        mut method,
        ..
    } = checkpoint;
    let conv = cfg.problem.loss;
    let total = cfg.iterations;
    let clock = Instant::now();
    let ms = |c: &Instant| cfg.timing.then(|| c.elapsed().as_secs_f64() * 1e3);

    let (mut loss, mut grad) = mf_loss_grad(&method.weight(&cfg.hyper), target, conv)?;
    let mut grad_norm = grad.fro_norm();
    let mut records = Vec::new();
    if step == 0 {
        records.push(TrajectoryRecord { step: 0, loss, grad_norm, clamps, ms: ms(&clock) });
    }
    let mut hyper = cfg.hyper.clone();
    while step < total {
        hyper.eta = cfg.schedule.eta_at(cfg.hyper.eta, step, total);
        let report = method.step(&grad, &hyper)?;
        step += 1;
        clamps += report.clamped;
        grad_norm = report.grad_norm;
        (loss, grad) = mf_loss_grad(&method.weight(&cfg.hyper), target, conv)?;
        if !loss.is_finite() {
            return Err(LoftError::Divergence { step });
        }
        if step % cfg.log_every == 0 || step == total {
            records.push(TrajectoryRecord { step, loss, grad_norm, clamps, ms: ms(&clock) });
        }
    }

    let final_metrics = FinalMetrics {
        step,
        loss,
        grad_norm,
        clamps,
        rank_r_optimum: target.rank_r_optimum(cfg.adapter.rank, conv),
    };
    let checkpoint = Checkpoint {
        version: CONFIG_VERSION,
        config: cfg.clone(),
        step,
        clamps,
        method,
    };
    Ok(RunOutcome {
        config: cfg,
        records,
        checkpoint,
        final_metrics,
    })
}

/// Trajectory CSV with 17 significant digits per float (exact round trip).
pub fn trajectory_csv(records: &[TrajectoryRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "loss", "grad_norm", "clamps", "ms"])?;
    for r in records {
        w.write_record([
            r.step.to_string(),
            format!("{:.16e}", r.loss),
            format!("{:.16e}", r.grad_norm),
            r.clamps.to_string(),
            r.ms.map(|t| format!("{t:.16e}")).unwrap_or_default(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| LoftError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is ASCII"))
}

/// Parse a trajectory CSV written by [`trajectory_csv`].
pub fn read_trajectory_csv(text: &str) -> Result<Vec<TrajectoryRecord>> {
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let header = rd.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != ["step", "loss", "grad_norm", "clamps", "ms"] {
        return Err(LoftError::config("csv header", format!("unexpected columns {header:?}")));
    }
    let bad = |what: &str| LoftError::config("csv", format!("malformed {what}"));
    let mut out = Vec::new();
    for row in rd.records() {
        let row = row?;
        let ms = match &row[4] {
            "" => None,
            s => Some(s.parse().map_err(|_| bad("ms"))?),
        };
        out.push(TrajectoryRecord {
            step: row[0].parse().map_err(|_| bad("step"))?,
            loss: row[1].parse().map_err(|_| bad("loss"))?,
            grad_norm: row[2].parse().map_err(|_| bad("grad_norm"))?,
            clamps: row[3].parse().map_err(|_| bad("clamps"))?,
            ms,
        });
    }
    Ok(out)
}

#[derive(Serialize)]
struct Sidecar<'a> {
    version: u32,
    config: &'a ExperimentConfig,
    records: usize,
    #[serde(rename = "final")]
    final_metrics: &'a FinalMetrics,
}

/// Paths written by [`write_outputs`].
#[derive(Debug, Clone)]
pub struct OutputFiles {
    pub csv: PathBuf,
    pub sidecar: PathBuf,
    pub checkpoint: PathBuf,
}

/// Write `<name>.csv`, `<name>.json` (resolved config and final metrics)
/// and `<name>.checkpoint.json` into `dir`.
pub fn write_outputs(outcome: &RunOutcome, dir: &Path) -> Result<OutputFiles> {
    std::fs::create_dir_all(dir)?;
    let name = &outcome.config.name;
    let files = OutputFiles {
        csv: dir.join(format!("{name}.csv")),
        sidecar: dir.join(format!("{name}.json")),
        checkpoint: dir.join(format!("{name}.checkpoint.json")),
    };
    std::fs::write(&files.csv, trajectory_csv(&outcome.records)?)?;
    let sidecar = Sidecar {
        version: CONFIG_VERSION,
        config: &outcome.config,
        records: outcome.records.len(),
        final_metrics: &outcome.final_metrics,
    };
    std::fs::write(&files.sidecar, serde_json::to_string_pretty(&sidecar)? + "\n")?;
    std::fs::write(&files.checkpoint, serde_json::to_string(&outcome.checkpoint)? + "\n")?;
    Ok(files)
}

/// Run independent experiments concurrently, one thread each. Results come
/// back in input order.
pub fn run_batch(configs: &[ExperimentConfig]) -> Vec<Result<RunOutcome>> {
    std::thread::scope(|s| {
        let handles: Vec<_> = configs.iter().map(|c| s.spawn(move || run_experiment(c))).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("experiment worker panicked"))
            .collect()
    })
}

/// One-line human summary of a finished run.
pub fn summary_line(outcome: &RunOutcome) -> String {
    let f = &outcome.final_metrics;
    let mut s = String::new();
    let _ = write!(
        s,
        "{:<28} {:<17} step {:>6}  loss {:.6e}  rank-r optimum {:.6e}",
        outcome.config.name,
        outcome.config.optimizer.as_str(),
        f.step,
        f.loss,
        f.rank_r_optimum
    );
    if f.clamps > 0 {
        let _ = write!(s, "  clamps {}", f.clamps);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::{AdapterSpec, InitSpec, ProblemSpec, Schedule};

    fn cfg(opt: OptimizerId) -> ExperimentConfig {
        ExperimentConfig {
            version: 1,
            name: "unit".into(),
            problem: ProblemSpec { m: 6, n: 5, target_rank: 2, seed: 3, loss: Default::default() },
            adapter: AdapterSpec { rank: 2, seed: 4, init: InitSpec::Gaussian },
            optimizer: opt,
            hyper: OptimizerConfig { eta: 0.02, ..Default::default() },
            iterations: 7,
            log_every: 3,
            schedule: Schedule::Constant,
            timing: false,
            output: None,
        }
    }

    #[test]
    fn every_method_runs_and_logs_on_cadence() {
        for id in OptimizerId::ALL {
            let out = run_experiment(&cfg(id)).unwrap();
            let steps: Vec<_> = out.records.iter().map(|r| r.step).collect();
            assert_eq!(steps, [0, 3, 6, 7], "{id:?}");
            assert!(out.final_metrics.loss.is_finite());
            assert_eq!(out.checkpoint.method.optimizer(), id);
        }
    }

    #[test]
    fn csv_round_trips_exactly() {
        let out = run_experiment(&cfg(OptimizerId::LoftAdamw)).unwrap();
        let text = trajectory_csv(&out.records).unwrap();
        assert!(text.starts_with("step,loss,grad_norm,clamps,ms\n"));
        assert_eq!(read_trajectory_csv(&text).unwrap(), out.records);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let full = run_experiment(&cfg(OptimizerId::LoftAdamw)).unwrap();
        let mut short = cfg(OptimizerId::LoftAdamw);
        short.iterations = 4;
        let half = run_experiment(&short).unwrap();
        let mut cp = half.checkpoint.clone();
        cp.config.iterations = 7;
        let cp: Checkpoint = serde_json::from_str(&serde_json::to_string(&cp).unwrap()).unwrap();
        let target = build_target(&cp.config).unwrap();
        let rest = resume_experiment(cp, &target).unwrap();
        assert_eq!(rest.checkpoint.method, full.checkpoint.method);
        assert_eq!(rest.final_metrics.loss.to_bits(), full.final_metrics.loss.to_bits());
    }

    #[test]
    fn divergence_reports_the_step() {
        let mut c = cfg(OptimizerId::FullGdMomentum);
        c.hyper = OptimizerConfig { eta: 50.0, beta1: 0.0, ..Default::default() };
        c.iterations = 2000;
        match run_experiment(&c) {
            Err(LoftError::Divergence { step }) => assert!(step > 1 && step < 2000),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}

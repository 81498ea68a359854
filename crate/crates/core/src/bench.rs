//! Baseline-vs-accelerated benchmark on a seeded synthetic problem.
//!
//! The ground truth is composed from standard-normal factors of uniform
//! rank; both algorithms run the same number of iterations at that fixed
//! rank, with repeats interleaved so clock drift affects both alike.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::sample_mask;
use crate::network::{compose, FctnFactors, FctnRank, FlopCounter};
use crate::solver::{Algorithm, Observation, RankPolicy, Solver, SolverConfig};
use crate::tensor::DenseTensor;

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub shape: Vec<usize>,
    pub rank: usize,
    pub sr: f64,
    pub iters: usize,
    pub repeat: usize,
    pub seed: u64,
    pub lambda: f64,
    pub delta: f64,
    pub rho: f64,
}

impl BenchConfig {
    pub fn new(shape: Vec<usize>, rank: usize) -> Self {
        Self {
            shape,
            rank,
            sr: 0.3,
            iters: 20,
            repeat: 5,
            seed: 0,
            lambda: 0.35,
            delta: 0.5,
            rho: 0.1,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.shape.len() < 2 || self.shape.contains(&0) {
            return Err(Error::InvalidShape(format!("bench shape {:?}", self.shape)));
        }
        if self.rank == 0 || self.iters == 0 || self.repeat == 0 {
            return Err(Error::InvalidArgument("rank, iters and repeat must be ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlgorithmSummary {
    pub algorithm: Algorithm,
    /// Wall time of each repeat, milliseconds.
    pub wall_ms: Vec<f64>,
    pub median_ms: f64,
    /// Network FLOPs summed over all iterations of one run.
    pub flops: FlopCounter,
    /// Network FLOPs of the first iteration.
    pub first_iter_flops: FlopCounter,
    pub cache_hits: u64,
}

/// Per-sweep network FLOPs for cubic shape `I`, uniform rank `R`, order `N`,
/// first iteration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlopPrediction {
    pub leave_one_out_baseline: u128,
    pub leave_one_out_accelerated: u128,
    pub compose_baseline: u128,
    pub compose_accelerated: u128,
}

fn term(i: u128, r: u128, k: u32, n: u32) -> u128 {
    i.pow(k) * r.pow(k * (n - k) + k - 1)
}

/// Closed-form contraction counts for a full sweep.
///
/// Leave-one-out tensors: `2N Σ_{k=2}^{N−1} I^k R^{k(N−k)+k−1}` fresh versus
/// `Σ_{k=2}^{N−2} 2k I^k R^{k(N−k)+k−1} + 2N I^{N−1} R^{2N−3}` reused.
/// Composition: `2 Σ_{k=2}^{N} I^k R^{k(N−k)+k−1}` fresh versus
/// `2 I^N R^{N−1}` from the last leave-one-out tensor.
pub fn predicted_flops(n: u32, i: u128, r: u128) -> Option<FlopPrediction> {
    if n < 3 {
        return None;
    }
    let mut loo_base = 0;
    for k in 2..n {
        loo_base += 2 * n as u128 * term(i, r, k, n);
    }
    let mut loo_fast = 2 * n as u128 * i.pow(n - 1) * r.pow(2 * n - 3);
    for k in 2..n - 1 {
        loo_fast += 2 * k as u128 * term(i, r, k, n);
    }
    let compose_base = (2..=n).map(|k| 2 * term(i, r, k, n)).sum();
    Some(FlopPrediction {
        leave_one_out_baseline: loo_base,
        leave_one_out_accelerated: loo_fast,
        compose_baseline: compose_base,
        compose_accelerated: 2 * i.pow(n) * r.pow(n - 1),
    })
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub baseline: AlgorithmSummary,
    pub accelerated: AlgorithmSummary,
    /// Accelerated median over baseline median.
    pub wall_ratio: f64,
    /// Accelerated total FLOPs over baseline total FLOPs.
    pub flop_ratio: f64,
    /// `None` unless every extent is equal.
    pub prediction: Option<FlopPrediction>,
}

/// Seeded synthetic completion problem: ground truth and observation.
pub fn synthetic_problem(shape: &[usize], rank: usize, sr: f64, seed: u64) -> Result<(DenseTensor, Observation)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = FctnFactors::random(shape, FctnRank::uniform(shape.len(), rank)?, &mut rng)?;
    let truth = compose(&f, &mut FlopCounter::default())?;
    let mask = sample_mask(shape, sr, seed.wrapping_add(1))?;
    let obs = Observation::new(truth.clone(), mask)?;
    Ok((truth, obs))
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    }
}

struct Timed {
    ms: f64,
    flops: FlopCounter,
    first: FlopCounter,
    hits: u64,
}

fn timed_run(obs: &Observation, cfg: &SolverConfig) -> Result<Timed> {
    let start = Instant::now();
    let mut s = Solver::new(obs, cfg.clone())?;
    s.run_to_end()?;
    let ms = start.elapsed().as_secs_f64() * 1e3;
    let mut flops = FlopCounter::default();
    for r in s.trace() {
        flops.leave_one_out += r.flops.leave_one_out;
        flops.compose += r.flops.compose;
    }
    Ok(Timed {
        ms,
        flops,
        first: s.trace()[0].flops,
        hits: s.cache().hits(),
    })
}

pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let (_, obs) = synthetic_problem(&cfg.shape, cfg.rank, cfg.sr, cfg.seed)?;
    let n = cfg.shape.len();
    let mut solver_cfg = SolverConfig::new(FctnRank::uniform(n, cfg.rank)?);
    solver_cfg.rank_policy = RankPolicy::Fixed;
    solver_cfg.eps = 0.0;
    solver_cfg.max_iters = cfg.iters;
    solver_cfg.lambda = cfg.lambda;
    solver_cfg.delta = cfg.delta;
    solver_cfg.rho = cfg.rho;
    solver_cfg.seed = cfg.seed;

    let mut runs: [Vec<Timed>; 2] = [Vec::new(), Vec::new()];
    for rep in 0..cfg.repeat {
        for (slot, alg) in [Algorithm::Fctnlr, Algorithm::Afctnlr].into_iter().enumerate() {
            solver_cfg.algorithm = alg;
            let t = timed_run(&obs, &solver_cfg)?;
            log::info!("repeat {rep} {alg}: {:.1} ms", t.ms);
            runs[slot].push(t);
        }
    }
    let summarize = |alg: Algorithm, rs: &[Timed]| {
        let wall_ms: Vec<f64> = rs.iter().map(|t| t.ms).collect();
        AlgorithmSummary {
            algorithm: alg,
            median_ms: median(&wall_ms),
            wall_ms,
            flops: rs[0].flops,
            first_iter_flops: rs[0].first,
            cache_hits: rs[0].hits,
        }
    };
    let baseline = summarize(Algorithm::Fctnlr, &runs[0]);
    let accelerated = summarize(Algorithm::Afctnlr, &runs[1]);
    let cubic = cfg.shape.iter().all(|&e| e == cfg.shape[0]);
    let prediction = if cubic {
        predicted_flops(n as u32, cfg.shape[0] as u128, cfg.rank as u128)
    } else {
        None
    };
    Ok(BenchReport {
        wall_ratio: accelerated.median_ms / baseline.median_ms,
        flop_ratio: accelerated.flops.total() as f64 / baseline.flops.total() as f64,
        baseline,
        accelerated,
        prediction,
        config: cfg.clone(),
    })
}

impl BenchReport {
    /// One row per algorithm, a ratio row, and (for cubic shapes) one row
    /// of closed-form predictions per algorithm.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "row,median_ms,flops_total,flops_leave_one_out,flops_compose,\
             first_iter_leave_one_out,first_iter_compose,cache_hits\n",
        );
        for s in [&self.baseline, &self.accelerated] {
            let _ = writeln!(
                out,
                "{},{:.3},{},{},{},{},{},{}",
                s.algorithm,
                s.median_ms,
                s.flops.total(),
                s.flops.leave_one_out,
                s.flops.compose,
                s.first_iter_flops.leave_one_out,
                s.first_iter_flops.compose,
                s.cache_hits
            );
        }
        let first_ratio = self.accelerated.first_iter_flops.total() as f64 / self.baseline.first_iter_flops.total() as f64;
        let _ = writeln!(
            out,
            "ratio,{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},",
            self.wall_ratio,
            self.flop_ratio,
            self.accelerated.flops.leave_one_out as f64 / self.baseline.flops.leave_one_out as f64,
            self.accelerated.flops.compose as f64 / self.baseline.flops.compose as f64,
            first_ratio,
            first_ratio
        );
        if let Some(p) = self.prediction {
            let _ = writeln!(
                out,
                "predicted_fctnlr,,,,,{},{},",
                p.leave_one_out_baseline, p.compose_baseline
            );
            let _ = writeln!(
                out,
                "predicted_afctnlr,,,,,{},{},",
                p.leave_one_out_accelerated, p.compose_accelerated
            );
        }
        out
    }
}

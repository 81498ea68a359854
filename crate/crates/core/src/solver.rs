//! Proximal alternating minimization for trace-regularized FCTN completion.
//!
//! The objective over the completed tensor `X` and the factors is
//!
//! ```text
//! f = ½‖X − FCTN(A_1..A_N)‖_F² + Σ_k (λ_k/2)·tr(A_(k)ᵀ L_k A_(k)),
//! subject to X = Y on the observed set Ω.
//! ```
//!
//! Each outer iteration updates every factor once (in an update order) by
//! solving its proximal subproblem in closed form, then updates `X`:
//! unobserved entries become `(Z + ρ X_prev)/(1+ρ)` with `Z` the composition,
//! observed entries stay equal to `Y`.
//!
//! [`Algorithm::Fctnlr`] rebuilds every leave-one-out tensor and the
//! composition from scratch in the identity order. [`Algorithm::Afctnlr`]
//! shares partial contractions through a [`ReuseCache`], reshuffles the
//! update order after every iteration, and composes `Z` from the last
//! leave-one-out tensor with a single contraction.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::network::{
    compose, compose_from_node, leave_one_out_node, leave_one_out_node_cached, shuffle_order, unfold_node,
    FctnFactors, FctnRank, FlopCounter, Node, ReuseCache, UpdateOrder,
};
use crate::regularizer::{CirculantLaplacian, LaplacianSign};
use crate::sylvester::{solve_factor, FactorSubproblem};
use crate::tensor::{mode_fold, mode_unfold, DenseTensor};

/// Observed-entry indicator Ω, in the tensor linearization.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    shape: Vec<usize>,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(shape: Vec<usize>, bits: Vec<bool>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::InvalidShape(format!("mask shape {shape:?}")));
        }
        if bits.len() != shape.iter().product::<usize>() {
            return Err(Error::ShapeMismatch(format!(
                "mask of shape {shape:?} needs {} entries, got {}",
                shape.iter().product::<usize>(),
                bits.len()
            )));
        }
        Ok(Self { shape, bits })
    }

    pub fn full(shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), vec![true; shape.iter().product()])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn complement(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }
}

/// Observed values `Y` together with Ω. Entries of `Y` off Ω are ignored.
#[derive(Clone, Debug)]
pub struct Observation {
    values: DenseTensor,
    mask: Mask,
}

impl Observation {
    pub fn new(values: DenseTensor, mask: Mask) -> Result<Self> {
        if values.shape() != mask.shape() {
            return Err(Error::ShapeMismatch(format!(
                "values {:?} vs mask {:?}",
                values.shape(),
                mask.shape()
            )));
        }
        if mask.count() == 0 {
            return Err(Error::InvalidArgument("observation has no observed entries".into()));
        }
        if values.data().iter().zip(mask.bits()).any(|(v, &m)| m && !v.is_finite()) {
            return Err(Error::NonFinite("observed values must be finite".into()));
        }
        Ok(Self { values, mask })
    }

    pub fn shape(&self) -> &[usize] {
        self.values.shape()
    }

    pub fn values(&self) -> &DenseTensor {
        &self.values
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    /// `Y` on Ω, zero elsewhere.
    pub fn initial_x(&self) -> DenseTensor {
        let mut x = self.values.clone();
        for (v, &m) in x.data_mut().iter_mut().zip(self.mask.bits()) {
            if !m {
                *v = 0.0;
            }
        }
        x
    }

    fn check_feasible(&self, x: &DenseTensor) -> Result<()> {
        x.check_same_shape(&self.values)?;
        let violated = x
            .data()
            .iter()
            .zip(self.values.data())
            .zip(self.mask.bits())
            .filter(|((a, b), &m)| m && a.to_bits() != b.to_bits())
            .count();
        if violated > 0 {
            return Err(Error::ConstraintViolation(format!(
                "{violated} observed entries differ from Y"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Algorithm {
    /// Fresh contractions every sweep, identity update order.
    #[default]
    Fctnlr,
    /// Reused contractions, shuffled update order.
    Afctnlr,
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fctnlr" => Ok(Algorithm::Fctnlr),
            "afctnlr" => Ok(Algorithm::Afctnlr),
            other => Err(Error::InvalidArgument(format!(
                "unknown algorithm {other:?} (expected fctnlr or afctnlr)"
            ))),
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algorithm::Fctnlr => "fctnlr",
            Algorithm::Afctnlr => "afctnlr",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RankPolicy {
    /// Start and stay at the rank cap.
    Fixed,
    /// Start at all-ones; when the relative change drops below `tau`
    /// (default `10·eps`), increment every entry still below its cap.
    ThresholdIncrease { tau: Option<f64> },
}

impl Default for RankPolicy {
    fn default() -> Self {
        RankPolicy::ThresholdIncrease { tau: None }
    }
}

/// Factor momentum `A + α(A − β·A_old)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Extrapolation {
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Clone, Debug)]
pub struct SolverConfig {
    pub lambda: f64,
    /// Overrides `lambda` per mode.
    pub lambda_per_mode: Option<Vec<f64>>,
    pub delta: f64,
    /// Overrides `delta` per mode.
    pub delta_per_mode: Option<Vec<f64>>,
    pub rho: f64,
    pub eps: f64,
    pub max_iters: usize,
    pub max_rank: FctnRank,
    pub rank_policy: RankPolicy,
    pub algorithm: Algorithm,
    pub laplacian_sign: LaplacianSign,
    pub extrapolation: Option<Extrapolation>,
    pub seed: u64,
    /// Reshuffle the update order after every iteration (accelerated only).
    pub shuffle_updates: bool,
    pub cache_budget_bytes: usize,
}

impl SolverConfig {
    pub fn new(max_rank: FctnRank) -> Self {
        Self {
            lambda: 0.0,
            lambda_per_mode: None,
            delta: 0.5,
            delta_per_mode: None,
            rho: 0.1,
            eps: 1e-4,
            max_iters: 500,
            max_rank,
            rank_policy: RankPolicy::default(),
            algorithm: Algorithm::default(),
            laplacian_sign: LaplacianSign::default(),
            extrapolation: None,
            seed: 0,
            shuffle_updates: true,
            cache_budget_bytes: ReuseCache::DEFAULT_BUDGET,
        }
    }

    pub fn validate(&self, order: usize) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("{name} must be > 0, got {v}")))
            }
        };
        positive("rho", self.rho)?;
        if self.eps.is_nan() || self.eps < 0.0 {
            return Err(Error::InvalidArgument(format!("eps must be ≥ 0, got {}", self.eps)));
        }
        if self.max_rank.order() != order {
            return Err(Error::InvalidRank(format!(
                "rank cap of order {} for an order-{order} tensor",
                self.max_rank.order()
            )));
        }
        for l in self.lambdas(order)? {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::InvalidArgument(format!("lambda must be ≥ 0, got {l}")));
            }
        }
        for d in self.deltas(order)? {
            positive("delta", d)?;
        }
        if let RankPolicy::ThresholdIncrease { tau: Some(t) } = self.rank_policy {
            if t.is_nan() || t < 0.0 {
                return Err(Error::InvalidArgument(format!("tau must be ≥ 0, got {t}")));
            }
        }
        if let Some(e) = self.extrapolation {
            if !(e.alpha > 0.0 && e.alpha < 1.0) {
                return Err(Error::InvalidArgument(format!("alpha must lie in (0,1), got {}", e.alpha)));
            }
            if !(e.beta > 0.2 && e.beta < 0.8) {
                return Err(Error::InvalidArgument(format!("beta must lie in (0.2,0.8), got {}", e.beta)));
            }
        }
        Ok(())
    }

    fn per_mode(&self, name: &str, base: f64, over: &Option<Vec<f64>>, order: usize) -> Result<Vec<f64>> {
        match over {
            Some(v) if v.len() != order => Err(Error::InvalidArgument(format!(
                "{name} override has {} entries for order {order}",
                v.len()
            ))),
            Some(v) => Ok(v.clone()),
            None => Ok(vec![base; order]),
        }
    }

    pub fn lambdas(&self, order: usize) -> Result<Vec<f64>> {
        self.per_mode("lambda", self.lambda, &self.lambda_per_mode, order)
    }

    pub fn deltas(&self, order: usize) -> Result<Vec<f64>> {
        self.per_mode("delta", self.delta, &self.delta_per_mode, order)
    }

    fn laplacians(&self, dims: &[usize]) -> Result<Vec<CirculantLaplacian>> {
        self.deltas(dims.len())?
            .iter()
            .zip(dims)
            .map(|(&d, &n)| CirculantLaplacian::build(n, d, self.laplacian_sign))
            .collect()
    }

    fn tau(&self) -> Option<f64> {
        match self.rank_policy {
            RankPolicy::Fixed => None,
            RankPolicy::ThresholdIncrease { tau } => Some(tau.unwrap_or(10.0 * self.eps)),
        }
    }
}

/// One outer iteration's diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    /// 1-based.
    pub iter: usize,
    /// Objective after the `X` update (before any rank increase).
    pub objective: f64,
    /// `‖X_new − X‖_F / ‖X‖_F`.
    pub rel_change: f64,
    pub wall_ms: f64,
    /// Network contraction FLOPs of this iteration.
    pub flops: FlopCounter,
    /// Reuse-cache hits of this iteration.
    pub cache_hits: u64,
    /// Rank table used during this iteration.
    pub rank: Vec<usize>,
    pub update_order: Vec<usize>,
    /// Ranks were incremented at the end of this iteration.
    pub rank_increased: bool,
    /// A rank increase was due but every entry was at its cap.
    pub rank_capped: bool,
    /// `f_new + (ρ/2)(Σ‖ΔA_k‖² + ‖ΔX‖²) ≤ f_prev + 1e-9·|f_prev|`.
    pub sufficient_decrease: bool,
    pub extrapolated: bool,
    pub x_norm: f64,
    pub factor_norms: Vec<f64>,
}

/// Result of [`run`].
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub x: DenseTensor,
    pub factors: FctnFactors,
    pub trace: Vec<IterationRecord>,
    pub converged: bool,
    /// Objective at the initial state.
    pub initial_objective: f64,
}

/// `a_new + α(a_new − β·a_old)`.
pub fn extrapolate(a_new: &DenseTensor, a_old: &DenseTensor, alpha: f64, beta: f64) -> Result<DenseTensor> {
    a_new.zip_map(a_old, |n, o| n + alpha * (n - beta * o))
}

/// `X` update from an already composed `Z`.
pub fn update_x_from(z: &DenseTensor, x_prev: &DenseTensor, obs: &Observation, rho: f64) -> Result<DenseTensor> {
    z.check_same_shape(x_prev)?;
    z.check_same_shape(obs.values())?;
    let scale = 1.0 / (1.0 + rho);
    let data = z
        .data()
        .iter()
        .zip(x_prev.data())
        .zip(obs.values().data())
        .zip(obs.mask().bits())
        .map(|(((&zv, &xv), &yv), &m)| if m { yv } else { (zv + rho * xv) * scale })
        .collect();
    DenseTensor::new(z.shape().to_vec(), data)
}

/// `X` update: `Y` on Ω, `(FCTN(factors) + ρ X_prev)/(1+ρ)` elsewhere.
pub fn update_x(factors: &FctnFactors, x_prev: &DenseTensor, obs: &Observation, rho: f64) -> Result<DenseTensor> {
    let z = compose(factors, &mut FlopCounter::default())?;
    update_x_from(&z, x_prev, obs, rho)
}

fn objective_parts(
    z: &DenseTensor,
    x: &DenseTensor,
    factors: &FctnFactors,
    lambdas: &[f64],
    laplacians: &[CirculantLaplacian],
) -> Result<f64> {
    let mut f = 0.5 * x.dist_sq(z)?;
    for k in 0..factors.order() {
        if lambdas[k] != 0.0 {
            let a = mode_unfold(factors.factor(k), k)?;
            f += 0.5 * lambdas[k] * laplacians[k].trace_penalty(&a)?;
        }
    }
    Ok(f)
}

/// The objective `f`; errors if `X` departs from `Y` on Ω.
pub fn objective(x: &DenseTensor, factors: &FctnFactors, obs: &Observation, cfg: &SolverConfig) -> Result<f64> {
    obs.check_feasible(x)?;
    let n = factors.order();
    let z = compose(factors, &mut FlopCounter::default())?;
    objective_parts(&z, x, factors, &cfg.lambdas(n)?, &cfg.laplacians(factors.dims())?)
}

/// Iteration state of either algorithm.
pub struct Solver<'a> {
    obs: &'a Observation,
    cfg: SolverConfig,
    lambdas: Vec<f64>,
    laplacians: Vec<CirculantLaplacian>,
    x: DenseTensor,
    factors: FctnFactors,
    order: UpdateOrder,
    cache: ReuseCache,
    rng: ChaCha8Rng,
    objective: f64,
    initial_objective: f64,
    trace: Vec<IterationRecord>,
    converged: bool,
    /// Latest composition; drives the stopping rule when Ω is everything.
    z: DenseTensor,
}

/// The solver draws from its own ChaCha stream, so a seed shared with data
/// generation never reproduces the generating factors.
const SOLVER_STREAM: u64 = 1;

fn solver_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SOLVER_STREAM);
    rng
}

impl<'a> Solver<'a> {
    /// `X = Y` on Ω and zero elsewhere; standard-normal factors drawn from
    /// the configured seed at the policy's starting rank.
    pub fn new(obs: &'a Observation, cfg: SolverConfig) -> Result<Self> {
        let n = obs.shape().len();
        cfg.validate(n)?;
        let mut rng = solver_rng(cfg.seed);
        let rank = match cfg.rank_policy {
            RankPolicy::Fixed => cfg.max_rank.clone(),
            RankPolicy::ThresholdIncrease { .. } => FctnRank::ones(n)?,
        };
        let factors = FctnFactors::random(obs.shape(), rank, &mut rng)?;
        Self::build(obs, cfg, factors, rng)
    }

    /// Starts from caller-provided factors; the seed still drives shuffling
    /// and rank-increase noise.
    pub fn with_factors(obs: &'a Observation, cfg: SolverConfig, factors: FctnFactors) -> Result<Self> {
        cfg.validate(obs.shape().len())?;
        if factors.dims() != obs.shape() {
            return Err(Error::ShapeMismatch(format!(
                "factors for {:?}, observation of shape {:?}",
                factors.dims(),
                obs.shape()
            )));
        }
        let rng = solver_rng(cfg.seed);
        Self::build(obs, cfg, factors, rng)
    }

    fn build(obs: &'a Observation, cfg: SolverConfig, factors: FctnFactors, rng: ChaCha8Rng) -> Result<Self> {
        let n = obs.shape().len();
        let lambdas = cfg.lambdas(n)?;
        let laplacians = cfg.laplacians(obs.shape())?;
        let x = obs.initial_x();
        let z = compose(&factors, &mut FlopCounter::default())?;
        let objective = objective_parts(&z, &x, &factors, &lambdas, &laplacians)?;
        if !objective.is_finite() {
            return Err(Error::NonFinite(format!("initial objective is {objective}")));
        }
        let cache = ReuseCache::new(cfg.cache_budget_bytes);
        Ok(Self {
            obs,
            lambdas,
            laplacians,
            x,
            factors,
            order: UpdateOrder::identity(n),
            cache,
            rng,
            objective,
            initial_objective: objective,
            trace: Vec::new(),
            converged: false,
            z,
            cfg,
        })
    }

    pub fn x(&self) -> &DenseTensor {
        &self.x
    }

    pub fn factors(&self) -> &FctnFactors {
        &self.factors
    }

    pub fn trace(&self) -> &[IterationRecord] {
        &self.trace
    }

    pub fn objective(&self) -> f64 {
        self.objective
    }

    pub fn converged(&self) -> bool {
        self.converged
    }

    pub fn config(&self) -> &SolverConfig {
        &self.cfg
    }

    pub fn cache(&self) -> &ReuseCache {
        &self.cache
    }

    /// Order the next iteration will use.
    pub fn update_order(&self) -> &UpdateOrder {
        &self.order
    }

    /// One outer iteration.
    pub fn step(&mut self) -> Result<&IterationRecord> {
        let start = Instant::now();
        let n = self.factors.order();
        let accelerated = self.cfg.algorithm == Algorithm::Afctnlr;
        let order = if accelerated {
            self.order.clone()
        } else {
            UpdateOrder::identity(n)
        };
        let hits_before = self.cache.hits();
        let mut flops = FlopCounter::default();
        let previous = self.factors.clone();
        let rank = self.factors.rank().entries().to_vec();

        let mut last: Option<(usize, Arc<Node>)> = None;
        for &k in order.as_slice() {
            let node = if accelerated {
                leave_one_out_node_cached(&self.factors, k, &order, &mut self.cache, &mut flops)?
            } else {
                Arc::new(leave_one_out_node(&self.factors, k, &mut flops)?)
            };
            let m = unfold_node(&node, n, k)?;
            let x_k = mode_unfold(&self.x, k)?;
            let a_prev = mode_unfold(self.factors.factor(k), k)?;
            let sub = FactorSubproblem {
                x_k: &x_k,
                m_k: &m,
                a_prev: &a_prev,
                laplacian: &self.laplacians[k],
                lambda: self.lambdas[k],
                rho: self.cfg.rho,
            };
            let shape = self.factors.factor(k).shape().to_vec();
            let mut a = mode_fold(&solve_factor(&sub)?, k, &shape)?;
            if let Some(e) = self.cfg.extrapolation {
                a = extrapolate(&a, previous.factor(k), e.alpha, e.beta)?;
            }
            self.factors.set_factor(k, a)?;
            last = Some((k, node));
        }

        let z = match (accelerated, last) {
            (true, Some((k, node))) => compose_from_node(&node, self.factors.factor(k), k, &mut flops)?,
            _ => compose(&self.factors, &mut flops)?,
        };
        let x_new = update_x_from(&z, &self.x, self.obs, self.cfg.rho)?;
        let objective = objective_parts(&z, &x_new, &self.factors, &self.lambdas, &self.laplacians)?;

        let dx = x_new.dist_sq(&self.x)?;
        // With every entry observed X never moves; the composition's change
        // stands in so the stopping rule stays meaningful.
        let (change_sq, base) = if self.obs.mask().count() == self.x.len() {
            (z.dist_sq(&self.z)?, self.z.norm())
        } else {
            (dx, self.x.norm())
        };
        let rel_change = if base > 0.0 { change_sq.sqrt() / base } else { change_sq.sqrt() };
        let da: f64 = (0..n)
            .map(|k| self.factors.factor(k).dist_sq(previous.factor(k)))
            .sum::<Result<f64>>()?;
        let sufficient_decrease = objective + 0.5 * self.cfg.rho * (da + dx)
            <= self.objective + 1e-9 * self.objective.abs();
        self.x = x_new;
        self.z = z;

        let mut record = IterationRecord {
            iter: self.trace.len() + 1,
            objective,
            rel_change,
            wall_ms: 0.0,
            flops,
            cache_hits: self.cache.hits() - hits_before,
            rank,
            update_order: order.as_slice().to_vec(),
            rank_increased: false,
            rank_capped: false,
            sufficient_decrease,
            extrapolated: self.cfg.extrapolation.is_some(),
            x_norm: self.x.norm(),
            factor_norms: self.factors.factors().iter().map(DenseTensor::norm).collect(),
        };
        if !objective.is_finite() {
            self.trace.push(record);
            for r in &self.trace {
                log::error!("{r:?}");
            }
            return Err(Error::NonFinite(format!(
                "objective became {objective} at iteration {}",
                self.trace.len()
            )));
        }
        self.objective = objective;

        if let Some(tau) = self.cfg.tau() {
            if rel_change < tau {
                if self.increase_rank()? {
                    record.rank_increased = true;
                } else {
                    record.rank_capped = true;
                }
            }
        }
        if rel_change <= self.cfg.eps && !record.rank_increased {
            self.converged = true;
        }
        if accelerated && self.cfg.shuffle_updates {
            self.order = shuffle_order(&self.order, &mut self.rng);
        }
        record.wall_ms = start.elapsed().as_secs_f64() * 1e3;
        log::debug!(
            "iter {} f={:.6e} rel={:.3e} rank={:?}",
            record.iter,
            record.objective,
            record.rel_change,
            record.rank
        );
        self.trace.push(record);
        Ok(self.trace.last().expect("just pushed"))
    }

    /// Increments every rank entry below its cap, re-embedding the factors
    /// with existing entries kept and new entries drawn as
    /// `1e-2 · RMS(A_k) · N(0,1)`. Returns `false` when already at the cap.
    pub fn increase_rank(&mut self) -> Result<bool> {
        let Some(rank) = self.factors.rank().incremented_toward(&self.cfg.max_rank) else {
            return Ok(false);
        };
        let scales: Vec<f64> = self
            .factors
            .factors()
            .iter()
            .map(|a| 1e-2 * a.norm() / (a.len() as f64).sqrt())
            .collect();
        let rng = &mut self.rng;
        self.factors = self.factors.embed(&rank, |k| scales[k] * rng.sample::<f64, _>(StandardNormal))?;
        self.cache.clear();
        let z = compose(&self.factors, &mut FlopCounter::default())?;
        self.objective = objective_parts(&z, &self.x, &self.factors, &self.lambdas, &self.laplacians)?;
        self.z = z;
        Ok(true)
    }

    /// Iterates until converged or `max_iters` iterations have run.
    pub fn run_to_end(&mut self) -> Result<()> {
        while !self.converged && self.trace.len() < self.cfg.max_iters {
            self.step()?;
        }
        Ok(())
    }

    pub fn into_outcome(self) -> RunOutcome {
        RunOutcome {
            x: self.x,
            factors: self.factors,
            trace: self.trace,
            converged: self.converged,
            initial_objective: self.initial_objective,
        }
    }
}

/// Runs the configured algorithm to convergence or `max_iters`.
pub fn run(obs: &Observation, cfg: &SolverConfig) -> Result<RunOutcome> {
    let mut solver = Solver::new(obs, cfg.clone())?;
    solver.run_to_end()?;
    Ok(solver.into_outcome())
}

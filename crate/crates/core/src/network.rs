//! Fully-connected tensor network (FCTN) factors and their contractions.
//!
//! Factor `A_k` of an order-`N` network has `N` modes: mode `k` carries the
//! physical extent `I_k` and every other mode `j` carries the bond `R_{j,k}`
//! it shares with factor `j`. Composing all factors contracts every bond.
//!
//! The leave-one-out tensor `M_k` contracts every factor except `A_k`. Its
//! modes are laid out factor by factor in ascending factor order; factor
//! `t < k` contributes `(I_t, R_{t,k})` and factor `t > k` contributes
//! `(R_{k,t}, I_t)`. With that layout the unfolding that turns
//! `X_(k) = A_(k) · M` into a matrix identity takes the (1-based) row modes
//! `i_t = 2t` for `t < k`, `2t − 1` otherwise, and column modes
//! `n_t = 2t − 1` for `t < k`, `2t` otherwise.
//!
//! [`compose_except_cached`] shares partial contractions between
//! consecutive leave-one-out tensors of a sweep. Under update order
//! `o_1, .., o_N`, the tensor for `o_j` is the contraction of the prefix run
//! `o_1..o_{j-1}` with the suffix run `o_{j+1}..o_N`; runs are grown one
//! factor at a time and memoized in a [`ReuseCache`] keyed by factor set and
//! validated against per-factor version stamps.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{contract, contraction_flops, gunfold, transpose, DenseTensor, ModePermutation, UnfoldingSpec};

static NEXT_STAMP: AtomicU64 = AtomicU64::new(1);

fn fresh_stamp() -> u64 {
    NEXT_STAMP.fetch_add(1, Ordering::Relaxed)
}

/// Symmetric table of bond dimensions `R_{i,j}`, `i < j`, stored in the order
/// `(0,1), (0,2), .., (0,N-1), (1,2), .., (N-2,N-1)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FctnRank {
    n: usize,
    entries: Vec<usize>,
}

impl FctnRank {
    pub fn new(n: usize, entries: Vec<usize>) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidRank(format!("network order must be ≥ 2, got {n}")));
        }
        if entries.len() != n * (n - 1) / 2 {
            return Err(Error::InvalidRank(format!(
                "order {n} needs {} rank entries, got {}",
                n * (n - 1) / 2,
                entries.len()
            )));
        }
        if entries.contains(&0) {
            return Err(Error::InvalidRank(format!("rank entries must be ≥ 1: {entries:?}")));
        }
        Ok(Self { n, entries })
    }

    pub fn uniform(n: usize, r: usize) -> Result<Self> {
        Self::new(n, vec![r; n * n.saturating_sub(1) / 2])
    }

    pub fn ones(n: usize) -> Result<Self> {
        Self::uniform(n, 1)
    }

    pub fn order(&self) -> usize {
        self.n
    }

    pub fn entries(&self) -> &[usize] {
        &self.entries
    }

    fn index(&self, i: usize, j: usize) -> usize {
        let (i, j) = if i < j { (i, j) } else { (j, i) };
        debug_assert!(i != j && j < self.n);
        i * (2 * self.n - i - 1) / 2 + (j - i - 1)
    }

    /// `R_{i,j}` for `i ≠ j`, symmetric.
    pub fn get(&self, i: usize, j: usize) -> usize {
        self.entries[self.index(i, j)]
    }

    /// Extents of factor `k` given physical extents `dims`.
    pub fn factor_shape(&self, k: usize, dims: &[usize]) -> Vec<usize> {
        (0..self.n)
            .map(|j| if j == k { dims[k] } else { self.get(j, k) })
            .collect()
    }

    /// `s_k = Π_{i≠k} R_{k,i}`.
    pub fn bond_product(&self, k: usize) -> usize {
        (0..self.n).filter(|&j| j != k).map(|j| self.get(j, k)).product()
    }

    /// Every entry ≤ the matching entry of `cap`.
    pub fn within(&self, cap: &FctnRank) -> bool {
        self.n == cap.n && self.entries.iter().zip(&cap.entries).all(|(a, b)| a <= b)
    }

    /// Entries below their cap incremented by one, or `None` if all are capped.
    pub fn incremented_toward(&self, cap: &FctnRank) -> Option<FctnRank> {
        if self.entries.iter().zip(&cap.entries).all(|(a, b)| a >= b) {
            return None;
        }
        let entries = self
            .entries
            .iter()
            .zip(&cap.entries)
            .map(|(&a, &b)| if a < b { a + 1 } else { a })
            .collect();
        Some(Self { n: self.n, entries })
    }
}

/// The decomposition state: one factor per mode plus their rank table.
///
/// Every factor carries a version stamp that changes whenever the factor is
/// replaced. Stamps are unique process-wide.
#[derive(Clone, Debug)]
pub struct FctnFactors {
    dims: Vec<usize>,
    rank: FctnRank,
    factors: Vec<DenseTensor>,
    stamps: Vec<u64>,
}

impl FctnFactors {
    pub fn new(dims: Vec<usize>, rank: FctnRank, factors: Vec<DenseTensor>) -> Result<Self> {
        if dims.len() != rank.order() || factors.len() != dims.len() {
            return Err(Error::InvalidRank(format!(
                "{} dims, rank table of order {}, {} factors",
                dims.len(),
                rank.order(),
                factors.len()
            )));
        }
        if dims.len() > 64 {
            return Err(Error::InvalidArgument("networks are limited to order 64".into()));
        }
        for (k, a) in factors.iter().enumerate() {
            let want = rank.factor_shape(k, &dims);
            if a.shape() != want.as_slice() {
                return Err(Error::ShapeMismatch(format!(
                    "factor {k} has shape {:?}, rank table implies {want:?}",
                    a.shape()
                )));
            }
        }
        let stamps = factors.iter().map(|_| fresh_stamp()).collect();
        Ok(Self {
            dims,
            rank,
            factors,
            stamps,
        })
    }

    /// Factors with independent standard-normal entries.
    pub fn random<R: Rng + ?Sized>(dims: &[usize], rank: FctnRank, rng: &mut R) -> Result<Self> {
        if dims.len() != rank.order() {
            return Err(Error::InvalidRank(format!(
                "{} dims for a rank table of order {}",
                dims.len(),
                rank.order()
            )));
        }
        let factors = (0..dims.len())
            .map(|k| {
                DenseTensor::from_fn(&rank.factor_shape(k, dims), |_| rng.sample(StandardNormal))
            })
            .collect();
        Self::new(dims.to_vec(), rank, factors)
    }

    pub fn order(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> &FctnRank {
        &self.rank
    }

    pub fn factor(&self, k: usize) -> &DenseTensor {
        &self.factors[k]
    }

    pub fn factors(&self) -> &[DenseTensor] {
        &self.factors
    }

    pub fn stamp(&self, k: usize) -> u64 {
        self.stamps[k]
    }

    /// Replaces factor `k`, bumping its version stamp.
    pub fn set_factor(&mut self, k: usize, a: DenseTensor) -> Result<()> {
        if k >= self.order() {
            return Err(Error::InvalidArgument(format!("factor index {k} out of range")));
        }
        let want = self.rank.factor_shape(k, &self.dims);
        if a.shape() != want.as_slice() {
            return Err(Error::ShapeMismatch(format!(
                "factor {k} must have shape {want:?}, got {:?}",
                a.shape()
            )));
        }
        self.factors[k] = a;
        self.stamps[k] = fresh_stamp();
        Ok(())
    }

    /// Re-embeds every factor into the shapes implied by `rank`, which must
    /// dominate the current rank entrywise. Existing entries keep their
    /// multi-index; every new entry of factor `k` is drawn from `fill(k)`.
    pub fn embed(&self, rank: &FctnRank, mut fill: impl FnMut(usize) -> f64) -> Result<Self> {
        if !self.rank.within(rank) {
            return Err(Error::InvalidRank(format!(
                "cannot shrink rank {:?} to {:?}",
                self.rank.entries(),
                rank.entries()
            )));
        }
        let factors = self
            .factors
            .iter()
            .enumerate()
            .map(|(k, old)| {
                let shape = rank.factor_shape(k, &self.dims);
                DenseTensor::from_fn(&shape, |idx| {
                    if idx.iter().zip(old.shape()).all(|(i, e)| i < e) {
                        old.get(idx)
                    } else {
                        fill(k)
                    }
                })
            })
            .collect();
        Self::new(self.dims.clone(), rank.clone(), factors)
    }
}

/// Multiply-add counts (2 FLOPs per pair) of network contractions, split by
/// what they produced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopCounter {
    /// Building leave-one-out tensors `M_k`.
    pub leave_one_out: u64,
    /// Building the full composition.
    pub compose: u64,
}

impl FlopCounter {
    pub fn total(&self) -> u64 {
        self.leave_one_out + self.compose
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub(crate) enum Leg {
    Phys(usize),
    Bond(usize, usize),
}

fn bond(i: usize, j: usize) -> Leg {
    if i < j {
        Leg::Bond(i, j)
    } else {
        Leg::Bond(j, i)
    }
}

/// A partial contraction with its mode labels and the set of factors it
/// contains (bit `k` for factor `k`).
#[derive(Clone, Debug)]
pub(crate) struct Node {
    tensor: DenseTensor,
    legs: Vec<Leg>,
    members: u64,
}

impl Node {
    fn bytes(&self) -> usize {
        self.tensor.len() * std::mem::size_of::<f64>()
    }
}

fn factor_legs(n: usize, k: usize) -> Vec<Leg> {
    (0..n).map(|j| if j == k { Leg::Phys(k) } else { bond(j, k) }).collect()
}

fn factor_node(f: &FctnFactors, k: usize) -> Node {
    Node {
        tensor: f.factors[k].clone(),
        legs: factor_legs(f.order(), k),
        members: 1 << k,
    }
}

fn contract_nodes(a: &Node, b: &Node, flops: &mut u64) -> Result<Node> {
    debug_assert_eq!(a.members & b.members, 0);
    let mut xm = Vec::new();
    let mut ym = Vec::new();
    for (pa, leg) in a.legs.iter().enumerate() {
        if let Some(pb) = b.legs.iter().position(|l| l == leg) {
            xm.push(pa);
            ym.push(pb);
        }
    }
    if xm.is_empty() {
        return Err(Error::InvalidArgument("nodes share no bond".into()));
    }
    *flops += contraction_flops(a.tensor.shape(), b.tensor.shape(), &xm);
    let tensor = contract(&a.tensor, &b.tensor, &xm, &ym)?;
    let legs = a
        .legs
        .iter()
        .enumerate()
        .filter(|(p, _)| !xm.contains(p))
        .map(|(_, l)| *l)
        .chain(
            b.legs
                .iter()
                .enumerate()
                .filter(|(p, _)| !ym.contains(p))
                .map(|(_, l)| *l),
        )
        .collect();
    Ok(Node {
        tensor,
        legs,
        members: a.members | b.members,
    })
}

fn arrange(node: &Node, target: &[Leg]) -> Result<DenseTensor> {
    let perm = target
        .iter()
        .map(|leg| {
            node.legs
                .iter()
                .position(|l| l == leg)
                .ok_or_else(|| Error::InvalidArgument(format!("node lacks leg {leg:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    transpose(&node.tensor, &ModePermutation::new(perm)?)
}

/// Canonical mode labels of `M_k`.
fn leave_one_out_legs(n: usize, k: usize) -> Vec<Leg> {
    let mut legs = Vec::with_capacity(2 * (n - 1));
    for t in (0..n).filter(|&t| t != k) {
        if t < k {
            legs.extend([Leg::Phys(t), bond(t, k)]);
        } else {
            legs.extend([bond(k, t), Leg::Phys(t)]);
        }
    }
    legs
}

/// Mode labels of the unfolded `M_k`: bonds to `k`, then physical modes.
fn unfolded_legs(n: usize, k: usize) -> Vec<Leg> {
    let others = || (0..n).filter(move |&t| t != k);
    others()
        .map(|t| bond(t, k))
        .chain(others().map(Leg::Phys))
        .collect()
}

fn check_mode(f: &FctnFactors, k: usize) -> Result<()> {
    if k >= f.order() {
        return Err(Error::InvalidArgument(format!(
            "mode {k} out of range for order {}",
            f.order()
        )));
    }
    Ok(())
}

fn chain(f: &FctnFactors, members: impl IntoIterator<Item = usize>, flops: &mut u64) -> Result<Node> {
    let mut it = members.into_iter();
    let first = it.next().ok_or_else(|| Error::InvalidArgument("empty factor chain".into()))?;
    let mut node = factor_node(f, first);
    for k in it {
        node = contract_nodes(&node, &factor_node(f, k), flops)?;
    }
    Ok(node)
}

/// Full composition `FCTN({A_k})`, contracted left to right
/// `((A_1 A_2) A_3) ...`.
pub fn compose(f: &FctnFactors, flops: &mut FlopCounter) -> Result<DenseTensor> {
    let node = chain(f, 0..f.order(), &mut flops.compose)?;
    let target: Vec<Leg> = (0..f.order()).map(Leg::Phys).collect();
    arrange(&node, &target)
}

pub(crate) fn leave_one_out_node(f: &FctnFactors, k: usize, flops: &mut FlopCounter) -> Result<Node> {
    check_mode(f, k)?;
    chain(f, (0..f.order()).filter(|&j| j != k), &mut flops.leave_one_out)
}

/// Leave-one-out tensor `M_k` (order `2(N−1)`, canonical layout), contracting
/// the remaining factors in ascending order.
pub fn compose_except(f: &FctnFactors, k: usize, flops: &mut FlopCounter) -> Result<DenseTensor> {
    let node = leave_one_out_node(f, k, flops)?;
    arrange(&node, &leave_one_out_legs(f.order(), k))
}

/// Unfolding `M_k[i | n]` of a canonical leave-one-out tensor: an
/// `s_k × Π_{i≠k} I_i` matrix with `mode_unfold(X, k) = A_(k) · result`.
pub fn leave_one_out_unfold(m_k: &DenseTensor, k: usize, order: usize) -> Result<DenseTensor> {
    if order < 2 || m_k.order() != 2 * (order - 1) {
        return Err(Error::ShapeMismatch(format!(
            "leave-one-out tensor of an order-{order} network must have order {}, got {}",
            2 * order.saturating_sub(1),
            m_k.order()
        )));
    }
    if k >= order {
        return Err(Error::InvalidArgument(format!("mode {k} out of range for order {order}")));
    }
    let (rows, cols): (Vec<usize>, Vec<usize>) = (0..order - 1)
        .map(|t| if t < k { (2 * t + 1, 2 * t) } else { (2 * t, 2 * t + 1) })
        .unzip();
    let perm = ModePermutation::new(rows.into_iter().chain(cols).collect())?;
    gunfold(m_k, &UnfoldingSpec::new(perm, order - 1)?)
}

/// The unfolded `M_k` straight from a node, in one transpose.
pub(crate) fn unfold_node(node: &Node, n: usize, k: usize) -> Result<DenseTensor> {
    let s: usize = (0..n)
        .filter(|&t| t != k)
        .map(|t| {
            let leg = bond(t, k);
            let p = node.legs.iter().position(|l| *l == leg).unwrap_or(0);
            node.tensor.shape()[p]
        })
        .product();
    let t = arrange(node, &unfolded_legs(n, k))?;
    let cols = t.len() / s;
    t.reshape(vec![s, cols])
}

/// Full composition from a leave-one-out node and the factor it omits.
pub(crate) fn compose_from_node(
    node: &Node,
    a_k: &DenseTensor,
    k: usize,
    flops: &mut FlopCounter,
) -> Result<DenseTensor> {
    let n = a_k.order();
    let a = Node {
        tensor: a_k.clone(),
        legs: factor_legs(n, k),
        members: 1 << k,
    };
    let full = contract_nodes(&a, node, &mut flops.compose)?;
    let target: Vec<Leg> = (0..n).map(Leg::Phys).collect();
    arrange(&full, &target)
}

/// Full composition from a (fresh) canonical `M_k` and `A_k` with a single
/// contraction.
pub fn compose_from_mk(
    m_k: &DenseTensor,
    a_k: &DenseTensor,
    k: usize,
    flops: &mut FlopCounter,
) -> Result<DenseTensor> {
    let n = a_k.order();
    if n < 2 || m_k.order() != 2 * (n - 1) || k >= n {
        return Err(Error::ShapeMismatch(format!(
            "M_k of order {} does not match an order-{n} factor (k = {k})",
            m_k.order()
        )));
    }
    let node = Node {
        tensor: m_k.clone(),
        legs: leave_one_out_legs(n, k),
        members: ((1u128 << n) - 1) as u64 & !(1 << k),
    };
    compose_from_node(&node, a_k, k, flops)
}

/// Permutation of the factor indices used as one sweep's update order.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct UpdateOrder(Vec<usize>);

impl UpdateOrder {
    pub fn identity(n: usize) -> Self {
        Self((0..n).collect())
    }

    pub fn new(order: Vec<usize>) -> Result<Self> {
        ModePermutation::new(order.clone())?;
        Ok(Self(order))
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Uniformly random reordering drawn from `rng`.
pub fn shuffle_order<R: Rng + ?Sized>(prev: &UpdateOrder, rng: &mut R) -> UpdateOrder {
    let mut next = prev.0.clone();
    next.shuffle(rng);
    UpdateOrder(next)
}

struct CacheEntry {
    node: Arc<Node>,
    stamps: Vec<(usize, u64)>,
}

impl CacheEntry {
    fn is_current(&self, f: &FctnFactors) -> bool {
        self.stamps.iter().all(|&(k, s)| f.stamps.get(k) == Some(&s))
    }
}

/// Memo of partial contractions keyed by factor set.
///
/// Entries are only served while every contributing factor still carries
/// the stamp it had when the entry was built; stale entries are dropped on
/// access or when space is needed. Inserts that would exceed the byte budget
/// are skipped, so callers recompute instead.
pub struct ReuseCache {
    entries: HashMap<u64, CacheEntry>,
    budget_bytes: usize,
    used_bytes: usize,
    hits: u64,
    misses: u64,
}

impl Default for ReuseCache {
    fn default() -> Self {
        Self::new(Self::DEFAULT_BUDGET)
    }
}

impl std::fmt::Debug for ReuseCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ReuseCache")
            .field("entries", &self.entries.len())
            .field("budget_bytes", &self.budget_bytes)
            .field("used_bytes", &self.used_bytes)
            .field("hits", &self.hits)
            .field("misses", &self.misses)
            .finish()
    }
}

impl ReuseCache {
    pub const DEFAULT_BUDGET: usize = 1 << 30;

    pub fn new(budget_bytes: usize) -> Self {
        Self {
            entries: HashMap::new(),
            budget_bytes,
            used_bytes: 0,
            hits: 0,
            misses: 0,
        }
    }

    pub fn hits(&self) -> u64 {
        self.hits
    }

    pub fn misses(&self) -> u64 {
        self.misses
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn used_bytes(&self) -> usize {
        self.used_bytes
    }

    pub fn clear(&mut self) {
        self.entries.clear();
        self.used_bytes = 0;
    }

    fn remove(&mut self, key: u64) {
        if let Some(e) = self.entries.remove(&key) {
            self.used_bytes -= e.node.bytes();
        }
    }

    fn lookup(&mut self, key: u64, f: &FctnFactors) -> Option<Arc<Node>> {
        match self.entries.get(&key) {
            Some(e) if e.is_current(f) => {
                self.hits += 1;
                Some(Arc::clone(&e.node))
            }
            Some(_) => {
                self.remove(key);
                self.misses += 1;
                None
            }
            None => {
                self.misses += 1;
                None
            }
        }
    }

    fn insert(&mut self, node: Arc<Node>, f: &FctnFactors) {
        let key = node.members;
        self.remove(key);
        let bytes = node.bytes();
        if self.used_bytes + bytes > self.budget_bytes {
            let stale: Vec<u64> = self
                .entries
                .iter()
                .filter(|(_, e)| !e.is_current(f))
                .map(|(&k, _)| k)
                .collect();
            for k in stale {
                self.remove(k);
            }
        }
        if self.used_bytes + bytes > self.budget_bytes {
            return;
        }
        let stamps = (0..f.order())
            .filter(|k| key & (1 << k) != 0)
            .map(|k| (k, f.stamps[k]))
            .collect();
        self.used_bytes += bytes;
        self.entries.insert(key, CacheEntry { node, stamps });
    }
}

#[derive(Clone, Copy)]
enum Grow {
    /// Built as `run[..len-1]` contracted with the last factor.
    Rightward,
    /// Built as the first factor contracted with `run[1..]`.
    Leftward,
}

fn mask_of(run: &[usize]) -> u64 {
    run.iter().fold(0, |m, &k| m | (1 << k))
}

fn run_node(
    f: &FctnFactors,
    run: &[usize],
    grow: Grow,
    cache: &mut ReuseCache,
    flops: &mut u64,
) -> Result<Arc<Node>> {
    if run.len() == 1 {
        return Ok(Arc::new(factor_node(f, run[0])));
    }
    if let Some(hit) = cache.lookup(mask_of(run), f) {
        return Ok(hit);
    }
    let node = match grow {
        Grow::Rightward => {
            let head = run_node(f, &run[..run.len() - 1], grow, cache, flops)?;
            contract_nodes(&head, &factor_node(f, run[run.len() - 1]), flops)?
        }
        Grow::Leftward => {
            let tail = run_node(f, &run[1..], grow, cache, flops)?;
            contract_nodes(&factor_node(f, run[0]), &tail, flops)?
        }
    };
    let node = Arc::new(node);
    cache.insert(Arc::clone(&node), f);
    Ok(node)
}

pub(crate) fn leave_one_out_node_cached(
    f: &FctnFactors,
    k: usize,
    order: &UpdateOrder,
    cache: &mut ReuseCache,
    flops: &mut FlopCounter,
) -> Result<Arc<Node>> {
    check_mode(f, k)?;
    if order.len() != f.order() {
        return Err(Error::InvalidArgument(format!(
            "update order of length {} for an order-{} network",
            order.len(),
            f.order()
        )));
    }
    let pos = order
        .0
        .iter()
        .position(|&j| j == k)
        .ok_or_else(|| Error::InvalidArgument(format!("mode {k} missing from update order")))?;
    let (prefix, suffix) = (&order.0[..pos], &order.0[pos + 1..]);
    let counter = &mut flops.leave_one_out;
    match (prefix.is_empty(), suffix.is_empty()) {
        (true, _) => run_node(f, suffix, Grow::Leftward, cache, counter),
        (_, true) => run_node(f, prefix, Grow::Rightward, cache, counter),
        _ => {
            let key = mask_of(prefix) | mask_of(suffix);
            if let Some(hit) = cache.lookup(key, f) {
                return Ok(hit);
            }
            let head = run_node(f, prefix, Grow::Rightward, cache, counter)?;
            let tail = run_node(f, suffix, Grow::Leftward, cache, counter)?;
            let node = Arc::new(contract_nodes(&head, &tail, counter)?);
            cache.insert(Arc::clone(&node), f);
            Ok(node)
        }
    }
}

/// [`compose_except`] with partial contractions shared through `cache`.
pub fn compose_except_cached(
    f: &FctnFactors,
    k: usize,
    order: &UpdateOrder,
    cache: &mut ReuseCache,
    flops: &mut FlopCounter,
) -> Result<DenseTensor> {
    let node = leave_one_out_node_cached(f, k, order, cache, flops)?;
    arrange(&node, &leave_one_out_legs(f.order(), k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{matmul, mode_unfold};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rel_err(a: &DenseTensor, b: &DenseTensor) -> f64 {
        a.dist_sq(b).unwrap().sqrt() / b.norm().max(f64::MIN_POSITIVE)
    }

    /// Direct evaluation of the element formula: sum over every assignment
    /// of all bond indices.
    fn brute_compose(f: &FctnFactors) -> DenseTensor {
        let n = f.order();
        let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
        let extents: Vec<usize> = pairs.iter().map(|&(i, j)| f.rank().get(i, j)).collect();
        let assignments = DenseTensor::zeros(&extents);
        DenseTensor::from_fn(f.dims(), |phys| {
            let mut total = 0.0;
            let mut rs = Vec::new();
            DenseTensor::from_fn(assignments.shape(), |r| {
                rs.push(r.to_vec());
                0.0
            });
            for r in rs {
                let mut prod = 1.0;
                for (k, &pk) in phys.iter().enumerate() {
                    let idx: Vec<usize> = (0..n)
                        .map(|j| {
                            if j == k {
                                pk
                            } else {
                                let p = pairs.iter().position(|&pr| pr == (k.min(j), k.max(j))).unwrap();
                                r[p]
                            }
                        })
                        .collect();
                    prod *= f.factor(k).get(&idx);
                }
                total += prod;
            }
            total
        })
    }

    fn random_factors(dims: &[usize], rank: Vec<usize>, seed: u64) -> FctnFactors {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FctnFactors::random(dims, FctnRank::new(dims.len(), rank).unwrap(), &mut rng).unwrap()
    }

    #[test]
    fn rank_table_indexing() {
        let r = FctnRank::new(4, vec![1, 2, 3, 4, 5, 6]).unwrap();
        assert_eq!(r.get(0, 1), 1);
        assert_eq!(r.get(3, 0), 3);
        assert_eq!(r.get(1, 2), 4);
        assert_eq!(r.get(3, 1), 5);
        assert_eq!(r.get(2, 3), 6);
        assert_eq!(r.factor_shape(2, &[7, 8, 9, 10]), vec![2, 4, 9, 6]);
        assert_eq!(r.bond_product(2), 2 * 4 * 6);
        assert!(FctnRank::new(3, vec![1, 0, 1]).is_err());
        assert!(FctnRank::new(3, vec![1, 1]).is_err());
    }

    #[test]
    fn factor_shapes_validated() {
        let r = FctnRank::uniform(3, 2).unwrap();
        let bad = vec![DenseTensor::zeros(&[3, 2, 2]), DenseTensor::zeros(&[2, 3, 2]), DenseTensor::zeros(&[2, 2, 2])];
        assert!(FctnFactors::new(vec![3, 3, 3], r, bad).is_err());
    }

    #[test]
    fn order_two_is_matrix_product() {
        let f = random_factors(&[3, 4], vec![2], 1);
        let x = compose(&f, &mut FlopCounter::default()).unwrap();
        let want = matmul(f.factor(0), f.factor(1)).unwrap();
        assert!(rel_err(&x, &want) < 1e-14);
    }

    #[test]
    fn rank_one_is_outer_product() {
        let f = random_factors(&[2, 3, 2], vec![1, 1, 1], 2);
        let x = compose(&f, &mut FlopCounter::default()).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..2 {
                    let want = f.factor(0).data()[i] * f.factor(1).data()[j] * f.factor(2).data()[k];
                    assert!((x.get(&[i, j, k]) - want).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn compose_matches_element_formula() {
        let f = random_factors(&[2, 2, 3, 2], vec![2; 6], 3);
        let x = compose(&f, &mut FlopCounter::default()).unwrap();
        assert!(rel_err(&x, &brute_compose(&f)) < 1e-12);

        let g = random_factors(&[3, 2, 2], vec![2, 1, 3], 4);
        let y = compose(&g, &mut FlopCounter::default()).unwrap();
        assert!(rel_err(&y, &brute_compose(&g)) < 1e-12);
    }

    #[test]
    fn leave_one_out_order_two() {
        let f = random_factors(&[3, 4], vec![2], 5);
        let m1 = compose_except(&f, 1, &mut FlopCounter::default()).unwrap();
        assert_eq!(&m1, f.factor(0));
        // N=2, k=1 (0-based 0): the unfolding is a plain matrix view of M.
        let m0 = compose_except(&f, 0, &mut FlopCounter::default()).unwrap();
        assert_eq!(leave_one_out_unfold(&m0, 0, 2).unwrap().data(), m0.data());
    }

    #[test]
    fn leave_one_out_unfold_identity() {
        for (seed, dims, rank) in [
            (6, vec![2, 3, 2], vec![2, 3, 2]),
            (7, vec![3, 2, 2, 3], vec![2, 1, 2, 3, 2, 2]),
        ] {
            let f = random_factors(&dims, rank, seed);
            let x = compose(&f, &mut FlopCounter::default()).unwrap();
            for k in 0..dims.len() {
                let m = compose_except(&f, k, &mut FlopCounter::default()).unwrap();
                let mu = leave_one_out_unfold(&m, k, dims.len()).unwrap();
                let lhs = mode_unfold(&x, k).unwrap();
                let rhs = matmul(&mode_unfold(f.factor(k), k).unwrap(), &mu).unwrap();
                assert!(rel_err(&rhs, &lhs) < 1e-12, "k = {k}");
            }
        }
    }

    #[test]
    fn leave_one_out_unfold_index_sets() {
        // N=3, k=2 (1-based): rows i = (2,3), columns n = (1,4).
        let m = DenseTensor::from_fn(&[2, 3, 4, 5], |idx| (idx[0] + 10 * idx[1] + 100 * idx[2] + 1000 * idx[3]) as f64);
        let u = leave_one_out_unfold(&m, 1, 3).unwrap();
        assert_eq!(u.shape(), &[12, 10]);
        let spec = UnfoldingSpec::new(ModePermutation::new(vec![1, 2, 0, 3]).unwrap(), 2).unwrap();
        assert_eq!(u, gunfold(&m, &spec).unwrap());
        assert!(leave_one_out_unfold(&m, 1, 4).is_err());
    }

    #[test]
    fn leave_one_out_matches_brute_sum() {
        // N=4, k=3 (1-based): contraction of A_1, A_2, A_4.
        let f = random_factors(&[2, 2, 2, 2], vec![2, 1, 2, 2, 1, 2], 8);
        let m = compose_except(&f, 2, &mut FlopCounter::default()).unwrap();
        let legs = leave_one_out_legs(4, 2);
        let want = DenseTensor::from_fn(m.shape(), |idx| {
            // fixed: i0, r02, i1, r12, r23, i3; summed: r01, r03, r13
            let (i0, r02, i1, r12, r23, i3) = (idx[0], idx[1], idx[2], idx[3], idx[4], idx[5]);
            let mut s = 0.0;
            for r01 in 0..2 {
                for r03 in 0..2 {
                    for r13 in 0..1 {
                        s += f.factor(0).get(&[i0, r01, r02, r03])
                            * f.factor(1).get(&[r01, i1, r12, r13])
                            * f.factor(3).get(&[r03, r13, r23, i3]);
                    }
                }
            }
            s
        });
        assert_eq!(legs.len(), 6);
        assert!(rel_err(&m, &want) < 1e-12);
    }

    #[test]
    fn cached_matches_uncached_and_counts_hits() {
        let f = random_factors(&[3, 2, 3, 2], vec![2; 6], 9);
        let order = UpdateOrder::identity(4);
        let mut cache = ReuseCache::default();
        let mut flops = FlopCounter::default();
        let m0 = compose_except_cached(&f, 0, &order, &mut cache, &mut flops).unwrap();
        assert_eq!(cache.hits(), 0);
        let m1 = compose_except_cached(&f, 1, &order, &mut cache, &mut flops).unwrap();
        // the (A_3 A_4) partial is reused
        assert_eq!(cache.hits(), 1);
        for (k, m) in [(0, m0), (1, m1)] {
            let want = compose_except(&f, k, &mut FlopCounter::default()).unwrap();
            assert!(rel_err(&m, &want) < 1e-12);
        }
    }

    #[test]
    fn cached_shares_leading_pair() {
        let f = random_factors(&[3, 2, 3, 2], vec![2; 6], 10);
        let order = UpdateOrder::identity(4);
        let mut cache = ReuseCache::default();
        let mut flops = FlopCounter::default();
        compose_except_cached(&f, 2, &order, &mut cache, &mut flops).unwrap();
        let before = cache.hits();
        let m3 = compose_except_cached(&f, 3, &order, &mut cache, &mut flops).unwrap();
        assert_eq!(cache.hits(), before + 1);
        let want = compose_except(&f, 3, &mut FlopCounter::default()).unwrap();
        assert!(rel_err(&m3, &want) < 1e-12);
    }

    #[test]
    fn stale_entries_are_not_served() {
        let mut f = random_factors(&[3, 2, 3, 2], vec![2; 6], 11);
        let order = UpdateOrder::identity(4);
        let mut cache = ReuseCache::default();
        let mut flops = FlopCounter::default();
        compose_except_cached(&f, 0, &order, &mut cache, &mut flops).unwrap();
        let a3 = f.factor(3).scaled(2.0);
        f.set_factor(3, a3).unwrap();
        let m1 = compose_except_cached(&f, 1, &order, &mut cache, &mut flops).unwrap();
        assert_eq!(cache.hits(), 0);
        let want = compose_except(&f, 1, &mut FlopCounter::default()).unwrap();
        assert!(rel_err(&m1, &want) < 1e-12);
    }

    #[test]
    fn zero_budget_degrades_to_recompute() {
        let f = random_factors(&[3, 2, 3, 2], vec![2; 6], 12);
        let order = UpdateOrder::identity(4);
        let mut cache = ReuseCache::new(0);
        let mut flops = FlopCounter::default();
        for k in 0..4 {
            let m = compose_except_cached(&f, k, &order, &mut cache, &mut flops).unwrap();
            let want = compose_except(&f, k, &mut FlopCounter::default()).unwrap();
            // association differs from the ascending chain, so equality is up to rounding
            assert!(rel_err(&m, &want) < 1e-12);
        }
        assert_eq!(cache.hits(), 0);
        assert!(cache.is_empty());
    }

    #[test]
    fn compose_from_leave_one_out() {
        let f = random_factors(&[3, 4], vec![2], 13);
        let m = compose_except(&f, 1, &mut FlopCounter::default()).unwrap();
        let x = compose_from_mk(&m, f.factor(1), 1, &mut FlopCounter::default()).unwrap();
        assert!(rel_err(&x, &matmul(f.factor(0), f.factor(1)).unwrap()) < 1e-14);

        let g = random_factors(&[2, 3, 2, 3], vec![2, 1, 2, 2, 3, 1], 14);
        let full = compose(&g, &mut FlopCounter::default()).unwrap();
        for k in 0..4 {
            let m = compose_except(&g, k, &mut FlopCounter::default()).unwrap();
            let x = compose_from_mk(&m, g.factor(k), k, &mut FlopCounter::default()).unwrap();
            assert!(rel_err(&x, &full) < 1e-12);
        }
        assert!(compose_from_mk(&m, g.factor(0), 0, &mut FlopCounter::default()).is_err());
    }

    #[test]
    fn flop_counts_order_four() {
        let (i, r) = (3u64, 2u64);
        let f = random_factors(&[3; 4], vec![2; 6], 15);
        let mut base = FlopCounter::default();
        for k in 0..4 {
            compose_except(&f, k, &mut base).unwrap();
        }
        compose(&f, &mut base).unwrap();
        assert_eq!(base.leave_one_out, 8 * (i.pow(2) + i.pow(3)) * r.pow(5));
        assert_eq!(base.compose, 2 * (i.pow(2) + i.pow(3)) * r.pow(5) + 2 * i.pow(4) * r.pow(3));

        let order = UpdateOrder::identity(4);
        let mut cache = ReuseCache::default();
        let mut fast = FlopCounter::default();
        let mut last = None;
        for k in 0..4 {
            last = Some(leave_one_out_node_cached(&f, k, &order, &mut cache, &mut fast).unwrap());
        }
        compose_from_node(&last.unwrap(), f.factor(3), 3, &mut fast).unwrap();
        assert_eq!(fast.leave_one_out, 4 * i.pow(2) * r.pow(5) + 8 * i.pow(3) * r.pow(5));
        assert_eq!(fast.compose, 2 * i.pow(4) * r.pow(3));
    }

    #[test]
    fn embedding_preserves_composition() {
        let f = random_factors(&[2, 3, 2], vec![1, 1, 1], 16);
        let bigger = FctnRank::uniform(3, 2).unwrap();
        let g = f.embed(&bigger, |_| 0.0).unwrap();
        assert_eq!(g.factor(1).shape(), &[2, 3, 2]);
        assert_eq!(g.factor(1).get(&[0, 2, 0]), f.factor(1).get(&[0, 2, 0]));
        let x = compose(&f, &mut FlopCounter::default()).unwrap();
        let y = compose(&g, &mut FlopCounter::default()).unwrap();
        assert_eq!(x, y);
        assert!(g.embed(&FctnRank::ones(3).unwrap(), |_| 0.0).is_err());
    }

    #[test]
    fn shuffle_is_seeded() {
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        let mut oa = UpdateOrder::identity(5);
        let mut ob = UpdateOrder::identity(5);
        for _ in 0..20 {
            oa = shuffle_order(&oa, &mut a);
            ob = shuffle_order(&ob, &mut b);
            assert_eq!(oa, ob);
        }
        let one = shuffle_order(&UpdateOrder::identity(1), &mut a);
        assert_eq!(one, UpdateOrder::identity(1));
    }

    #[test]
    fn shuffle_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut counts: HashMap<Vec<usize>, usize> = HashMap::new();
        let mut o = UpdateOrder::identity(4);
        let draws = 10_000;
        for _ in 0..draws {
            o = shuffle_order(&o, &mut rng);
            *counts.entry(o.as_slice().to_vec()).or_default() += 1;
        }
        assert_eq!(counts.len(), 24);
        let expected = draws as f64 / 24.0;
        let chi2: f64 = counts.values().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 23 degrees of freedom; 0.999 quantile ≈ 49.7
        assert!(chi2 < 49.7, "chi² = {chi2}");
        for &c in counts.values() {
            assert!((c as f64 / draws as f64 - 1.0 / 24.0).abs() <= 0.01);
        }
    }
}

//! Dense N-dimensional tensors and the structural primitives built on them:
//! mode permutation, generalized unfolding/folding and pairwise contraction.
//!
//! # Layout
//!
//! Data is stored first-index-fastest. With 0-based indices the element
//! `(i_0, ..., i_{N-1})` of a tensor with extents `(I_0, ..., I_{N-1})` lives at
//!
//! ```text
//! i_0 + i_1·I_0 + i_2·I_0·I_1 + ... + i_{N-1}·I_0···I_{N-2}
//! ```
//!
//! # Generalized unfolding
//!
//! For a permutation `n` and split `d`, the unfolding `X[n_{0:d} | n_{d:N}]`
//! is the matrix whose entry `(j_1, j_2)` is `X(i_0, ..., i_{N-1})` with
//!
//! ```text
//! 1-based                                          0-based (this crate)
//! j_1 = i_{n_1} + Σ_{s=2}^{d} (i_{n_s}-1)·Π_{m<s} I_{n_m}      j_1 = Σ_{s<d}  i_{n_s}·Π_{m<s}   I_{n_m}
//! j_2 = i_{n_{d+1}} + Σ_{s=d+2}^{N} (i_{n_s}-1)·Π_{d<m<s} I_{n_m}   j_2 = Σ_{s≥d} i_{n_s}·Π_{d≤m<s} I_{n_m}
//! ```
//!
//! Because the first permuted mode runs fastest, the unfolding is a
//! materialized transpose followed by a metadata-only reshape, and a matrix
//! is simply an order-2 tensor in column-major order.

use crate::error::{Error, Result};

/// Real N-way array stored first-index-fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn validate_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::InvalidShape("tensor order must be at least 1".into()));
    }
    if let Some(pos) = shape.iter().position(|&e| e == 0) {
        return Err(Error::InvalidShape(format!(
            "extent of mode {pos} is zero in {shape:?}"
        )));
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| Error::InvalidShape(format!("element count of {shape:?} overflows")))
}

/// First-index-fastest strides for `shape`.
pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = Vec::with_capacity(shape.len());
    let mut acc = 1;
    for &e in shape {
        strides.push(acc);
        acc *= e;
    }
    strides
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let len = validate_shape(&shape)?;
        if data.len() != len {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} needs {len} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// Zero tensor. Panics on an invalid shape.
    pub fn zeros(shape: &[usize]) -> Self {
        let len = validate_shape(shape).expect("invalid tensor shape");
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    /// Builds a tensor by evaluating `f` at every multi-index, in storage
    /// order. Panics on an invalid shape.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let len = validate_shape(shape).expect("invalid tensor shape");
        let mut data = Vec::with_capacity(len);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..len {
            data.push(f(&idx));
            for (i, &e) in idx.iter_mut().zip(shape) {
                *i += 1;
                if *i < e {
                    break;
                }
                *i = 0;
            }
        }
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Column-major `rows × cols` matrix.
    pub fn from_matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn order(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        let mut acc = 1;
        for (&i, &e) in idx.iter().zip(&self.shape) {
            debug_assert!(i < e);
            off += i * acc;
            acc *= e;
        }
        off
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: f64) {
        let off = self.offset(idx);
        self.data[off] = value;
    }

    /// Rows of an order-2 tensor.
    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.order(), 2);
        self.shape[0]
    }

    /// Columns of an order-2 tensor.
    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.order(), 2);
        self.shape[1]
    }

    /// Same data, new extents. Metadata only.
    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    /// Frobenius inner product.
    pub fn dot(&self, other: &Self) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    /// `‖self − other‖_F²`
    pub fn dist_sq(&self, other: &Self) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum())
    }

    pub fn scaled(&self, factor: f64) -> Self {
        self.map(|v| v * factor)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// See [`transpose`].
    pub fn transpose(&self, perm: &ModePermutation) -> Result<Self> {
        transpose(self, perm)
    }
}

/// Rearrangement `n` of the modes `0..N`; `perm[j]` is the source mode that
/// becomes mode `j` of the result.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ModePermutation(Vec<usize>);

impl ModePermutation {
    pub fn new(perm: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; perm.len()];
        for &p in &perm {
            if p >= perm.len() || seen[p] {
                return Err(Error::InvalidPermutation(format!(
                    "{perm:?} is not a rearrangement of 0..{}",
                    perm.len()
                )));
            }
            seen[p] = true;
        }
        if perm.is_empty() {
            return Err(Error::InvalidPermutation("empty permutation".into()));
        }
        Ok(Self(perm))
    }

    pub fn identity(n: usize) -> Self {
        Self((0..n).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn is_identity(&self) -> bool {
        self.0.iter().enumerate().all(|(i, &p)| i == p)
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.0.len()];
        for (j, &p) in self.0.iter().enumerate() {
            inv[p] = j;
        }
        Self(inv)
    }
}

/// Permutation plus split point `d` (row modes `perm[..d]`, column modes
/// `perm[d..]`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UnfoldingSpec {
    perm: ModePermutation,
    split: usize,
}

impl UnfoldingSpec {
    pub fn new(perm: ModePermutation, split: usize) -> Result<Self> {
        if split == 0 || split >= perm.len() {
            return Err(Error::InvalidArgument(format!(
                "unfolding split {split} must lie strictly between 0 and {}",
                perm.len()
            )));
        }
        Ok(Self { perm, split })
    }

    /// Mode-`k` unfolding: `(k, 0, .., k-1, k+1, .., N-1)` split after one mode.
    pub fn mode(k: usize, order: usize) -> Result<Self> {
        if k >= order {
            return Err(Error::InvalidArgument(format!(
                "mode {k} out of range for order {order}"
            )));
        }
        let mut perm = Vec::with_capacity(order);
        perm.push(k);
        perm.extend((0..order).filter(|&m| m != k));
        Self::new(ModePermutation(perm), 1)
    }

    pub fn perm(&self) -> &ModePermutation {
        &self.perm
    }

    pub fn split(&self) -> usize {
        self.split
    }

    fn matrix_dims(&self, shape: &[usize]) -> (usize, usize) {
        let p = self.perm.as_slice();
        let rows = p[..self.split].iter().map(|&m| shape[m]).product();
        let cols = p[self.split..].iter().map(|&m| shape[m]).product();
        (rows, cols)
    }
}

/// Gathers `src` (extents `shape`) into the mode order `perm`.
fn permute_data(src: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let in_strides = strides_of(shape);
    // (extent, source stride) per output mode; unit modes dropped and runs
    // that are contiguous in the source merged.
    let mut dims: Vec<(usize, usize)> = Vec::with_capacity(perm.len());
    for &p in perm {
        let (e, s) = (shape[p], in_strides[p]);
        if e == 1 {
            continue;
        }
        if let Some(last) = dims.last_mut() {
            if last.0 * last.1 == s {
                last.0 *= e;
                continue;
            }
        }
        dims.push((e, s));
    }
    if dims.len() <= 1 && dims.first().is_none_or(|d| d.1 == 1) {
        return src.to_vec();
    }
    match dims.iter().position(|d| d.1 == 1) {
        Some(j) if j > 0 => tiled_permute(src, &dims, j),
        _ => gather_permute(src, &dims),
    }
}

/// Output-order walk; reads are contiguous when the leading output mode is
/// the source's unit-stride mode.
fn gather_permute(src: &[f64], dims: &[(usize, usize)]) -> Vec<f64> {
    let mut out = Vec::with_capacity(src.len());
    let (e0, s0) = dims[0];
    let outer = &dims[1..];
    let mut counter = vec![0usize; outer.len()];
    let mut base = 0usize;
    loop {
        if s0 == 1 {
            out.extend_from_slice(&src[base..base + e0]);
        } else {
            out.extend((0..e0).map(|i| src[base + i * s0]));
        }
        let mut d = 0;
        loop {
            if d == outer.len() {
                return out;
            }
            counter[d] += 1;
            base += outer[d].1;
            if counter[d] < outer[d].0 {
                break;
            }
            base -= outer[d].0 * outer[d].1;
            counter[d] = 0;
            d += 1;
        }
    }
}

/// Blocked copy between the output modes ahead of `j`, taken together as
/// one contiguous output run, and mode `j`, the source's unit-stride mode,
/// so reads and writes both stay within a few cache lines per tile.
fn tiled_permute(src: &[f64], dims: &[(usize, usize)], j: usize) -> Vec<f64> {
    const TILE: usize = 32;
    let mut out_strides = vec![1usize; dims.len()];
    for d in 1..dims.len() {
        out_strides[d] = out_strides[d - 1] * dims[d - 1].0;
    }
    // source offset of each position in the leading output run
    let mut lead = vec![0usize];
    for &(e, st) in &dims[..j] {
        lead = (0..e).flat_map(|i| lead.iter().map(move |&o| o + i * st)).collect();
    }
    let mut out = vec![0.0; src.len()];
    let (ej, oj) = (dims[j].0, out_strides[j]);
    let rest: Vec<usize> = (j + 1..dims.len()).collect();
    let mut counter = vec![0usize; rest.len()];
    let (mut sbase, mut obase) = (0usize, 0usize);
    loop {
        for jb in (0..ej).step_by(TILE) {
            let jend = (jb + TILE).min(ej);
            for ib in (0..lead.len()).step_by(TILE) {
                let offs = &lead[ib..(ib + TILE).min(lead.len())];
                for jj in jb..jend {
                    let (srow, orow) = (sbase + jj, obase + jj * oj + ib);
                    for (o, &off) in out[orow..orow + offs.len()].iter_mut().zip(offs) {
                        *o = src[srow + off];
                    }
                }
            }
        }
        let mut d = 0;
        loop {
            if d == rest.len() {
                return out;
            }
            let m = rest[d];
            counter[d] += 1;
            sbase += dims[m].1;
            obase += out_strides[m];
            if counter[d] < dims[m].0 {
                break;
            }
            sbase -= dims[m].0 * dims[m].1;
            obase -= dims[m].0 * out_strides[m];
            counter[d] = 0;
            d += 1;
        }
    }
}

/// Mode transposition: result mode `j` is source mode `perm[j]`, so
/// `result(i_{n_0}, ..., i_{n_{N-1}}) = x(i_0, ..., i_{N-1})`.
pub fn transpose(x: &DenseTensor, perm: &ModePermutation) -> Result<DenseTensor> {
    if perm.len() != x.order() {
        return Err(Error::InvalidPermutation(format!(
            "permutation of length {} applied to order-{} tensor",
            perm.len(),
            x.order()
        )));
    }
    let shape: Vec<usize> = perm.as_slice().iter().map(|&p| x.shape[p]).collect();
    if perm.is_identity() {
        return Ok(x.clone());
    }
    Ok(DenseTensor {
        data: permute_data(&x.data, &x.shape, perm.as_slice()),
        shape,
    })
}

/// Generalized unfolding `X[n_{0:d} | n_{d:N}]`.
pub fn gunfold(x: &DenseTensor, spec: &UnfoldingSpec) -> Result<DenseTensor> {
    if spec.perm.len() != x.order() {
        return Err(Error::InvalidArgument(format!(
            "unfolding spec for order {} applied to order-{} tensor",
            spec.perm.len(),
            x.order()
        )));
    }
    let (rows, cols) = spec.matrix_dims(&x.shape);
    let t = transpose(x, &spec.perm)?;
    Ok(DenseTensor {
        shape: vec![rows, cols],
        data: t.data,
    })
}

/// Inverse of [`gunfold`] for a tensor of extents `shape`.
pub fn gfold(m: &DenseTensor, spec: &UnfoldingSpec, shape: &[usize]) -> Result<DenseTensor> {
    if m.order() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "gfold expects a matrix, got order {}",
            m.order()
        )));
    }
    if spec.perm.len() != shape.len() {
        return Err(Error::InvalidArgument(format!(
            "unfolding spec for order {} folded into shape {shape:?}",
            spec.perm.len()
        )));
    }
    validate_shape(shape)?;
    let (rows, cols) = spec.matrix_dims(shape);
    if m.shape != [rows, cols] {
        return Err(Error::ShapeMismatch(format!(
            "matrix {:?} cannot fold into {shape:?} (expects {rows}×{cols})",
            m.shape
        )));
    }
    let permuted_shape: Vec<usize> = spec.perm.as_slice().iter().map(|&p| shape[p]).collect();
    let inv = spec.perm.inverse();
    if inv.is_identity() {
        return Ok(DenseTensor {
            shape: shape.to_vec(),
            data: m.data.clone(),
        });
    }
    Ok(DenseTensor {
        data: permute_data(&m.data, &permuted_shape, inv.as_slice()),
        shape: shape.to_vec(),
    })
}

/// Mode-`k` unfolding `X_(k)`, shape `I_k × Π_{i≠k} I_i`.
pub fn mode_unfold(x: &DenseTensor, k: usize) -> Result<DenseTensor> {
    gunfold(x, &UnfoldingSpec::mode(k, x.order())?)
}

/// Inverse of [`mode_unfold`].
pub fn mode_fold(m: &DenseTensor, k: usize, shape: &[usize]) -> Result<DenseTensor> {
    gfold(m, &UnfoldingSpec::mode(k, shape.len())?, shape)
}

/// Borrowed strided matrix operand for [`gemm`].
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> MatRef<'a> {
    /// Column-major view of an order-2 tensor.
    pub fn of(m: &'a DenseTensor) -> Self {
        Self::col_major(&m.data, m.shape[0], m.shape[1])
    }

    pub fn col_major(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self {
            data,
            rows,
            cols,
            row_stride: 1,
            col_stride: rows,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }
}

/// Column-major product `a · b`.
pub(crate) fn gemm(a: MatRef<'_>, b: MatRef<'_>) -> Vec<f64> {
    assert_eq!(a.cols, b.rows, "gemm inner dimension mismatch");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut c = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    // SAFETY: every operand slice covers the full strided extent checked
    // above, and `c` is an exclusively owned m×n column-major buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            0.0,
            c.as_mut_ptr(),
            1,
            m as isize,
        );
    }
    c
}

/// Matrix product of two order-2 tensors.
pub fn matmul(a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
    if a.order() != 2 || b.order() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::ShapeMismatch(format!(
            "matmul {:?} · {:?}",
            a.shape, b.shape
        )));
    }
    let data = gemm(MatRef::of(a), MatRef::of(b));
    DenseTensor::from_matrix(a.shape[0], b.shape[1], data)
}

/// Multiply-add count (2 FLOPs per pair) of contracting `x_shape` with
/// `y_shape` over the given mode pairs.
pub fn contraction_flops(x_shape: &[usize], y_shape: &[usize], xm: &[usize]) -> u64 {
    let shared: u64 = xm.iter().map(|&m| x_shape[m] as u64).product();
    let x_total: u64 = x_shape.iter().map(|&e| e as u64).product();
    let y_total: u64 = y_shape.iter().map(|&e| e as u64).product();
    2 * x_total * y_total / shared
}

fn check_modes(modes: &[usize], order: usize, which: &str) -> Result<()> {
    let mut seen = vec![false; order];
    for &m in modes {
        if m >= order {
            return Err(Error::InvalidArgument(format!(
                "{which} mode {m} out of range for order {order}"
            )));
        }
        if seen[m] {
            return Err(Error::InvalidArgument(format!("duplicate {which} mode {m}")));
        }
        seen[m] = true;
    }
    Ok(())
}

/// Lays out one contraction operand as a matrix whose rows (or columns, if
/// `contracted_first`) run over `contracted` and the rest over `free`.
/// Returns either a borrowed strided view or a materialized transpose.
fn operand<'a>(
    t: &'a DenseTensor,
    free: &[usize],
    contracted: &[usize],
    contracted_first: bool,
    scratch: &'a mut Vec<f64>,
) -> MatRef<'a> {
    let nf: usize = free.iter().map(|&m| t.shape[m]).product();
    let nc: usize = contracted.iter().map(|&m| t.shape[m]).product();
    let (first, second, r, c) = if contracted_first {
        (contracted, free, nc, nf)
    } else {
        (free, contracted, nf, nc)
    };
    let is_seq = |order: &mut dyn Iterator<Item = usize>| order.enumerate().all(|(i, m)| i == m);
    if is_seq(&mut first.iter().chain(second).copied()) {
        return MatRef::col_major(&t.data, r, c);
    }
    if is_seq(&mut second.iter().chain(first).copied()) {
        return MatRef::col_major(&t.data, c, r).t();
    }
    let perm: Vec<usize> = first.iter().chain(second).copied().collect();
    *scratch = permute_data(&t.data, &t.shape, &perm);
    MatRef::col_major(scratch, r, c)
}

/// Contraction of modes `xm` of `x` with modes `ym` of `y` (paired in
/// order). The result keeps the free modes of `x` in ascending order followed
/// by the free modes of `y`; a full contraction yields shape `[1]`.
pub fn contract(x: &DenseTensor, y: &DenseTensor, xm: &[usize], ym: &[usize]) -> Result<DenseTensor> {
    if xm.is_empty() || xm.len() != ym.len() {
        return Err(Error::InvalidArgument(format!(
            "contraction needs equally many (≥1) modes, got {} and {}",
            xm.len(),
            ym.len()
        )));
    }
    check_modes(xm, x.order(), "x")?;
    check_modes(ym, y.order(), "y")?;
    for (&a, &b) in xm.iter().zip(ym) {
        if x.shape[a] != y.shape[b] {
            return Err(Error::ShapeMismatch(format!(
                "contracted extents differ: x mode {a} has {}, y mode {b} has {}",
                x.shape[a], y.shape[b]
            )));
        }
    }
    let x_free: Vec<usize> = (0..x.order()).filter(|m| !xm.contains(m)).collect();
    let y_free: Vec<usize> = (0..y.order()).filter(|m| !ym.contains(m)).collect();

    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let a = operand(x, &x_free, xm, false, &mut xs);
    let b = operand(y, &y_free, ym, true, &mut ys);
    let data = gemm(a, b);

    let mut shape: Vec<usize> = x_free.iter().map(|&m| x.shape[m]).collect();
    shape.extend(y_free.iter().map(|&m| y.shape[m]));
    if shape.is_empty() {
        shape.push(1);
    }
    DenseTensor::new(shape, data)
}

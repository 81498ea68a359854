//! Slice-averaged reconstruction quality.
//!
//! A 4th-order tensor `I_1 × I_2 × I_3 × I_4` is read as `I_3·I_4` images of
//! size `I_1 × I_2`; PSNR and SSIM are computed per image and averaged.
//! Tensors of order 2 or 3 are treated as if padded with trailing unit modes.
//!
//! SSIM uses one global window per image with population statistics,
//! `c_1 = (0.01·peak)²` and `c_2 = (0.03·peak)²`.

use crate::error::{Error, Result};
use crate::solver::Mask;
use crate::tensor::DenseTensor;

/// PSNR reported for an image reconstructed exactly.
pub const PSNR_CAP_DB: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SliceQuality {
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QualityReport {
    pub psnr: f64,
    pub ssim: f64,
    pub rel_err: f64,
    /// Relative error over unobserved entries; `None` when every entry is
    /// observed or no mask was given.
    pub rel_err_off_mask: Option<f64>,
    /// Some slice hit the PSNR cap.
    pub psnr_capped: bool,
    pub per_slice: Vec<SliceQuality>,
}

impl QualityReport {
    pub fn compute(truth: &DenseTensor, est: &DenseTensor, mask: Option<&Mask>, peak: f64) -> Result<Self> {
        let slices = slice_pairs(truth, est)?;
        check_peak(peak)?;
        let per_slice: Vec<SliceQuality> = slices
            .iter()
            .map(|(t, e)| SliceQuality {
                psnr: slice_psnr(t, e, peak),
                ssim: slice_ssim(t, e, peak),
            })
            .collect();
        let n = per_slice.len() as f64;
        let rel_err_off_mask = match mask {
            Some(m) => match rel_err(truth, est, Some(m)) {
                Ok(v) => Some(v),
                Err(Error::InvalidArgument(_)) => None,
                Err(e) => return Err(e),
            },
            None => None,
        };
        Ok(Self {
            psnr: per_slice.iter().map(|s| s.psnr).sum::<f64>() / n,
            ssim: per_slice.iter().map(|s| s.ssim).sum::<f64>() / n,
            rel_err: rel_err(truth, est, None)?,
            rel_err_off_mask,
            psnr_capped: per_slice.iter().any(|s| s.psnr == PSNR_CAP_DB),
            per_slice,
        })
    }
}

fn check_peak(peak: f64) -> Result<()> {
    if peak > 0.0 && peak.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("peak must be > 0, got {peak}")))
    }
}

/// Pairs of contiguous `I_1·I_2` image slices.
fn slice_pairs<'a>(truth: &'a DenseTensor, est: &'a DenseTensor) -> Result<Vec<(&'a [f64], &'a [f64])>> {
    truth.check_same_shape(est)?;
    let order = truth.order();
    if !(2..=4).contains(&order) {
        return Err(Error::InvalidShape(format!(
            "quality metrics need order 2 to 4, got {:?}",
            truth.shape()
        )));
    }
    let image = truth.shape()[0] * truth.shape()[1];
    Ok(truth.data().chunks_exact(image).zip(est.data().chunks_exact(image)).collect())
}

fn slice_psnr(t: &[f64], e: &[f64], peak: f64) -> f64 {
    let mse = t.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / t.len() as f64;
    if mse == 0.0 {
        PSNR_CAP_DB
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn covariance(x: &[f64], mx: f64, y: &[f64], my: f64) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / x.len() as f64
}

fn slice_ssim(t: &[f64], e: &[f64], peak: f64) -> f64 {
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let (mt, me) = (mean(t), mean(e));
    let vt = covariance(t, mt, t, mt);
    let ve = covariance(e, me, e, me);
    let cov = covariance(t, mt, e, me);
    let num = (2.0 * mt * me + c1) * (2.0 * cov + c2);
    let den = (mt * mt + me * me + c1) * (vt + ve + c2);
    num / den
}

/// Mean over image slices of `10·log10(peak² / MSE)`; exact slices score
/// [`PSNR_CAP_DB`].
pub fn psnr(truth: &DenseTensor, est: &DenseTensor, peak: f64) -> Result<f64> {
    let slices = slice_pairs(truth, est)?;
    check_peak(peak)?;
    Ok(slices.iter().map(|(t, e)| slice_psnr(t, e, peak)).sum::<f64>() / slices.len() as f64)
}

/// Mean over image slices of the global-window SSIM.
pub fn ssim(truth: &DenseTensor, est: &DenseTensor, peak: f64) -> Result<f64> {
    let slices = slice_pairs(truth, est)?;
    check_peak(peak)?;
    Ok(slices.iter().map(|(t, e)| slice_ssim(t, e, peak)).sum::<f64>() / slices.len() as f64)
}

/// `‖est − truth‖_F / ‖truth‖_F`, over the complement of `mask` when given.
pub fn rel_err(truth: &DenseTensor, est: &DenseTensor, mask: Option<&Mask>) -> Result<f64> {
    truth.check_same_shape(est)?;
    if let Some(m) = mask {
        if m.shape() != truth.shape() {
            return Err(Error::ShapeMismatch(format!("mask {:?} vs tensor {:?}", m.shape(), truth.shape())));
        }
    }
    let keep = |i: usize| mask.is_none_or(|m| !m.bits()[i]);
    let (mut num, mut den) = (0.0, 0.0);
    for (i, (t, e)) in truth.data().iter().zip(est.data()).enumerate() {
        if keep(i) {
            num += (e - t) * (e - t);
            den += t * t;
        }
    }
    if den == 0.0 {
        return Err(Error::InvalidArgument("relative error against a zero reference".into()));
    }
    Ok((num / den).sqrt())
}

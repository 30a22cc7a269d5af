//! Background token pruning: a patch is dropped when the share of its pixels
//! sitting at the page's background intensity exceeds `tau_bg`.

use crate::error::{invalid, Error, Result};
use crate::image::PatchGrid;
use crate::mask::{Stage, TokenMask};

/// Fraction of pixels with `|pixel - background| < tau_e`.
pub fn background_ratio(patch: &[u8], background: u8, tau_e: f64) -> Result<f64> {
    if patch.is_empty() {
        return Err(Error::Empty("patch"));
    }
    check_tau_e(tau_e)?;
    let m = background as i32;
    let close = patch
        .iter()
        .filter(|&&p| (((p as i32) - m).abs() as f64) < tau_e)
        .count();
    Ok(close as f64 / patch.len() as f64)
}

fn check_tau_e(tau_e: f64) -> Result<()> {
    if tau_e.is_nan() || tau_e < 0.0 {
        return Err(invalid("tau_e", format!("{tau_e} (must be >= 0)")));
    }
    Ok(())
}

/// Keep a cell iff its background ratio is at most `tau_bg`.
pub fn btp_mask(grid: &PatchGrid, background: u8, tau_e: f64, tau_bg: f64) -> Result<TokenMask> {
    check_tau_e(tau_e)?;
    if !(0.0..=1.0).contains(&tau_bg) {
        return Err(invalid("tau_bg", format!("{tau_bg} (must lie in [0, 1])")));
    }
    let keep = grid
        .patches()
        .map(|tile| background_ratio(tile, background, tau_e).map(|r| r <= tau_bg))
        .collect::<Result<Vec<_>>>()?;
    TokenMask::new(grid.rows(), grid.cols(), keep, Stage::Btp)
}

/// A `tau_bg` that drops exactly the patches whose every pixel is background:
/// any other patch has ratio at most `1 - 1/P²`.
pub fn pure_background_tau_bg(patch_size: usize) -> f64 {
    let area = (patch_size * patch_size) as f64;
    1.0 - 0.5 / area
}

/// Align a mask to `block`×`block` groups: a group is kept whole if any member
/// was kept. Partial groups on a ragged bottom/right edge are kept whole.
pub fn block_coarsen(mask: &TokenMask, block: usize) -> Result<TokenMask> {
    if block == 0 {
        return Err(invalid("block", "must be at least 1"));
    }
    if block == 1 {
        return Ok(mask.clone());
    }
    let (rows, cols) = (mask.rows(), mask.cols());
    let mut keep = vec![false; rows * cols];
    for by in (0..rows).step_by(block) {
        for bx in (0..cols).step_by(block) {
            let (y1, x1) = ((by + block).min(rows), (bx + block).min(cols));
            let ragged = y1 - by < block || x1 - bx < block;
            let any = (by..y1).any(|y| (bx..x1).any(|x| mask.is_kept(y, x)));
            if ragged || any {
                for y in by..y1 {
                    keep[y * cols + bx..y * cols + x1].fill(true);
                }
            }
        }
    }
    TokenMask::new(rows, cols, keep, mask.stage())
}

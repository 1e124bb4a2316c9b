//! RoIAlign over channels-last feature maps.
//!
//! Each output bin averages bilinear samples taken on a regular 2x2 grid
//! inside the bin. Box coordinates are never quantised; feature cell `j`
//! is centred at continuous coordinate `j + 0.5`.

use thiserror::Error;

use crate::autograd::{Graph, RowTaps, Var};
use crate::boxes::BBox;

pub const SAMPLES_PER_AXIS: usize = 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RoiError {
    #[error("degenerate RoI box {0:?}")]
    Degenerate([f64; 4]),
}

fn bilinear_taps(y: f64, x: f64, h: usize, w: usize, weight: f64, out: &mut Vec<(usize, f64)>) {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return;
    }
    let mut y = y.max(0.0);
    let mut x = x.max(0.0);
    let mut y0 = y.floor() as usize;
    let mut x0 = x.floor() as usize;
    let y1;
    let x1;
    if y0 >= h - 1 {
        y0 = h - 1;
        y1 = h - 1;
        y = y0 as f64;
    } else {
        y1 = y0 + 1;
    }
    if x0 >= w - 1 {
        x0 = w - 1;
        x1 = w - 1;
        x = x0 as f64;
    } else {
        x1 = x0 + 1;
    }
    let ly = y - y0 as f64;
    let lx = x - x0 as f64;
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    for (r, c, f) in [
        (y0, x0, hy * hx),
        (y0, x1, hy * lx),
        (y1, x0, ly * hx),
        (y1, x1, ly * lx),
    ] {
        if f != 0.0 {
            out.push((r * w + c, weight * f));
        }
    }
}

/// Sampling taps of an `out x out` RoIAlign on an `h x w` map; one tap list per bin, row-major.
pub fn roi_align_taps(h: usize, w: usize, b: &BBox, out: usize) -> Result<RowTaps, RoiError> {
    if !(b.width() > 0.0 && b.height() > 0.0) || b.to_array().iter().any(|v| !v.is_finite()) {
        return Err(RoiError::Degenerate(b.to_array()));
    }
    let (x0, y0) = (b.x1 * w as f64, b.y1 * h as f64);
    let bw = b.width() * w as f64 / out as f64;
    let bh = b.height() * h as f64 / out as f64;
    let s = SAMPLES_PER_AXIS;
    let weight = 1.0 / (s * s) as f64;
    let mut taps = Vec::with_capacity(out * out);
    for by in 0..out {
        for bx in 0..out {
            let mut t = Vec::with_capacity(4 * s * s);
            for sy in 0..s {
                let yy = y0 + (by as f64 + (sy as f64 + 0.5) / s as f64) * bh - 0.5;
                for sx in 0..s {
                    let xx = x0 + (bx as f64 + (sx as f64 + 0.5) / s as f64) * bw - 0.5;
                    bilinear_taps(yy, xx, h, w, weight, &mut t);
                }
            }
            taps.push(t);
        }
    }
    Ok(taps)
}

/// RoIAlign of `fmap` (`[h, w, C]`) in box `b`; returns `[out * out, C]`.
pub fn roi_align(g: &mut Graph, fmap: Var, b: &BBox, out: usize) -> Result<Var, RoiError> {
    let s = g.shape(fmap).to_vec();
    assert_eq!(s.len(), 3, "roi_align expects [h, w, C]");
    let taps = roi_align_taps(s[0], s[1], b, out)?;
    let rows = g.reshape(fmap, &[s[0] * s[1], s[2]]);
    Ok(g.sparse_rows(rows, taps))
}

/// Mean over the rows of a `[n, C]` variable, giving `[1, C]`.
pub fn mean_rows(g: &mut Graph, x: Var) -> Var {
    let n = g.shape(x)[0];
    let w = 1.0 / n as f64;
    g.sparse_rows(x, vec![(0..n).map(|i| (i, w)).collect()])
}

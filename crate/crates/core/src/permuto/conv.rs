use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;

use super::bank::FilterBank;
use super::operators::{BlurNeighborhood, MISSING};
use crate::error::{Error, Result};

/// Default number of lattice vertices processed per block.
pub const DEFAULT_CHUNK: usize = 4096;

fn check_bank(blur: &BlurNeighborhood, bank: &FilterBank) -> Result<()> {
    let st = blur.stencil();
    if st.dim() != bank.dim() || st.hops() != bank.hops() {
        return Err(Error::shape(format!(
            "filter bank is (d={}, s={}), neighbourhood is (d={}, s={})",
            bank.dim(),
            bank.hops(),
            st.dim(),
            st.hops()
        )));
    }
    Ok(())
}

/// Resolves `(c_in, c_out)` for a signal with `channels` columns.
fn channel_plan(bank: &FilterBank, channels: usize) -> Result<(usize, usize)> {
    if bank.is_scalar() {
        Ok((channels, channels))
    } else if bank.c_in() == channels {
        Ok((bank.c_in(), bank.c_out()))
    } else {
        Err(Error::shape(format!(
            "filter bank takes {} channels, signal has {channels}",
            bank.c_in()
        )))
    }
}

fn check_rows(lattice: ArrayView2<f64>, blur: &BlurNeighborhood) -> Result<()> {
    if lattice.nrows() != blur.num_vertices() {
        return Err(Error::shape(format!(
            "lattice signal has {} rows, neighbourhood covers {} vertices",
            lattice.nrows(),
            blur.num_vertices()
        )));
    }
    Ok(())
}

/// One output row: `out[co] = sum_k sum_ci B[co][ci][k] * l[nbr(k, j)][ci]`,
/// where `tap_of(k)` selects which stencil row provides tap `k`'s neighbour.
#[inline]
fn accumulate_row(
    j: usize,
    lattice: &ArrayView2<f64>,
    blur: &BlurNeighborhood,
    bank: &FilterBank,
    transpose: bool,
    out: &mut [f64],
) {
    let t = bank.taps();
    let stencil = blur.stencil();
    out.iter_mut().for_each(|o| *o = 0.0);
    for k in 0..t {
        // Transpose pairs tap k with the mirrored neighbour.
        let nbr = blur.row(if transpose { stencil.mirror(k) } else { k })[j];
        if nbr == MISSING {
            continue;
        }
        let src = lattice.row(nbr as usize);
        if bank.is_scalar() {
            let w = bank.get(0, 0, k);
            for (o, &v) in out.iter_mut().zip(src.iter()) {
                *o += w * v;
            }
        } else if transpose {
            for (ci, o) in out.iter_mut().enumerate() {
                for (co, &v) in src.iter().enumerate() {
                    *o += bank.get(co, ci, k) * v;
                }
            }
        } else {
            for (co, o) in out.iter_mut().enumerate() {
                for (ci, &v) in src.iter().enumerate() {
                    *o += bank.get(co, ci, k) * v;
                }
            }
        }
    }
}

fn run_blocks(
    lattice: ArrayView2<f64>,
    blur: &BlurNeighborhood,
    bank: &FilterBank,
    out_channels: usize,
    chunk: usize,
    transpose: bool,
) -> Result<Array2<f64>> {
    if chunk == 0 {
        return Err(Error::InvalidParameter("chunk size must be >= 1".into()));
    }
    let m = blur.num_vertices();
    let mut out = vec![0.0; m * out_channels];
    if out_channels > 0 {
        out.par_chunks_mut(chunk * out_channels)
            .enumerate()
            .for_each(|(b, block)| {
                for (r, row) in block.chunks_mut(out_channels).enumerate() {
                    accumulate_row(b * chunk + r, &lattice, blur, bank, transpose, row);
                }
            });
    }
    Ok(Array2::from_shape_vec((m, out_channels), out).expect("shape"))
}

/// Lattice convolution `l' = B K` over populated vertices, processed in
/// blocks of `chunk` vertices. Missing neighbours contribute zero.
pub fn convolve_lattice(
    lattice: ArrayView2<f64>,
    blur: &BlurNeighborhood,
    bank: &FilterBank,
    chunk: usize,
) -> Result<Array2<f64>> {
    check_bank(blur, bank)?;
    check_rows(lattice, blur)?;
    let (_, c_out) = channel_plan(bank, lattice.ncols())?;
    run_blocks(lattice, blur, bank, c_out, chunk, false)
}

/// Adjoint of [`convolve_lattice`]: the mirrored filter with channels swapped.
pub fn convolve_lattice_transpose(
    upstream: ArrayView2<f64>,
    blur: &BlurNeighborhood,
    bank: &FilterBank,
    chunk: usize,
) -> Result<Array2<f64>> {
    check_bank(blur, bank)?;
    check_rows(upstream, blur)?;
    let (c_in, c_out) = if bank.is_scalar() {
        (upstream.ncols(), upstream.ncols())
    } else {
        (bank.c_in(), bank.c_out())
    };
    if upstream.ncols() != c_out {
        return Err(Error::shape(format!(
            "upstream has {} channels, filter produces {c_out}",
            upstream.ncols()
        )));
    }
    run_blocks(upstream, blur, bank, c_in, chunk, true)
}

/// Gradient of `<upstream, convolve_lattice(lattice)>` with respect to the
/// filter weights.
pub fn convolve_lattice_filter_grad(
    upstream: ArrayView2<f64>,
    lattice: ArrayView2<f64>,
    blur: &BlurNeighborhood,
    bank: &FilterBank,
) -> Result<FilterBank> {
    check_bank(blur, bank)?;
    check_rows(lattice, blur)?;
    check_rows(upstream, blur)?;
    let (_, c_out) = channel_plan(bank, lattice.ncols())?;
    if upstream.ncols() != c_out {
        return Err(Error::shape(format!(
            "upstream has {} channels, filter produces {c_out}",
            upstream.ncols()
        )));
    }
    let t = bank.taps();
    let (bc_out, bc_in) = (bank.c_out(), bank.c_in());
    let mut grad = bank.zeros_like();
    // One tap row at a time so each weight sums vertices in a fixed order.
    let per_tap: Vec<Vec<f64>> = (0..t)
        .into_par_iter()
        .map(|k| {
            let mut acc = vec![0.0; bc_out * bc_in];
            for (j, &nbr) in blur.row(k).iter().enumerate() {
                if nbr == MISSING {
                    continue;
                }
                let src = lattice.row(nbr as usize);
                let g = upstream.row(j);
                if bank.is_scalar() {
                    acc[0] += g.iter().zip(src.iter()).map(|(a, b)| a * b).sum::<f64>();
                } else {
                    for co in 0..bc_out {
                        let gv = g[co];
                        if gv == 0.0 {
                            continue;
                        }
                        for ci in 0..bc_in {
                            acc[co * bc_in + ci] += gv * src[ci];
                        }
                    }
                }
            }
            acc
        })
        .collect();
    for (k, acc) in per_tap.into_iter().enumerate() {
        for co in 0..bc_out {
            for ci in 0..bc_in {
                *grad.get_mut(co, ci, k) = acc[co * bc_in + ci];
            }
        }
    }
    Ok(grad)
}

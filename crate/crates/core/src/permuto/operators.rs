use ndarray::{Array2, ArrayView2};
use ndarray::parallel::prelude::*;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lattice::{Elevator, EncloseScratch, LatticeIndex, Stencil};

/// Marker for a stencil tap whose vertex is not populated.
pub const MISSING: u32 = u32::MAX;

/// Sparse barycentric interpolation between points and lattice vertices.
///
/// Stored per point: column `i` lists `(vertex, weight)` pairs. Used as a
/// splat (`m x n`, scatter points onto vertices) or as a slice (`n x m`,
/// gather vertices back to points).
#[derive(Debug, Clone, PartialEq)]
pub struct SplatOperator {
    num_vertices: usize,
    col_ptr: Vec<usize>,
    vertices: Vec<u32>,
    weights: Vec<f64>,
}

impl SplatOperator {
    pub fn num_points(&self) -> usize {
        self.col_ptr.len() - 1
    }

    pub fn num_vertices(&self) -> usize {
        self.num_vertices
    }

    pub fn nnz(&self) -> usize {
        self.vertices.len()
    }

    /// Vertex indices and weights attached to point `i`.
    pub fn column(&self, i: usize) -> (&[u32], &[f64]) {
        let r = self.col_ptr[i]..self.col_ptr[i + 1];
        (&self.vertices[r.clone()], &self.weights[r])
    }

    pub fn columns(&self) -> impl Iterator<Item = (&[u32], &[f64])> {
        (0..self.num_points()).map(move |i| self.column(i))
    }

    /// `l = S x`: accumulates point values onto vertices.
    pub fn splat(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.nrows() != self.num_points() {
            return Err(Error::shape(format!(
                "splat expects {} rows, got {}",
                self.num_points(),
                x.nrows()
            )));
        }
        let c = x.ncols();
        let mut out = Array2::zeros((self.num_vertices, c));
        for (i, row) in x.outer_iter().enumerate() {
            let (verts, weights) = self.column(i);
            for (&v, &w) in verts.iter().zip(weights) {
                let mut dst = out.row_mut(v as usize);
                dst.scaled_add(w, &row);
            }
        }
        Ok(out)
    }

    /// `x = S^T l`: interpolates vertex values at the points.
    pub fn slice(&self, lattice: ArrayView2<f64>) -> Result<Array2<f64>> {
        if lattice.nrows() != self.num_vertices {
            return Err(Error::shape(format!(
                "slice expects {} lattice rows, got {}",
                self.num_vertices,
                lattice.nrows()
            )));
        }
        let c = lattice.ncols();
        let mut out = Array2::zeros((self.num_points(), c));
        out.axis_iter_mut(ndarray::Axis(0))
            .into_par_iter()
            .enumerate()
            .for_each(|(i, mut dst)| {
                let (verts, weights) = self.column(i);
                for (&v, &w) in verts.iter().zip(weights) {
                    dst.scaled_add(w, &lattice.row(v as usize));
                }
            });
        Ok(out)
    }

    /// Dense `m x n` matrix.
    pub fn to_dense(&self) -> Array2<f64> {
        let mut dense = Array2::zeros((self.num_vertices, self.num_points()));
        for (i, (verts, weights)) in self.columns().enumerate() {
            for (&v, &w) in verts.iter().zip(weights) {
                dense[[v as usize, i]] += w;
            }
        }
        dense
    }
}

fn check_features(features: ArrayView2<f64>, scales: &[f64]) -> Result<()> {
    if features.ncols() == 0 {
        return Err(Error::InvalidFeature("feature dimension must be >= 1".into()));
    }
    if scales.len() != features.ncols() {
        return Err(Error::shape(format!(
            "{} feature scales for {}-dimensional features",
            scales.len(),
            features.ncols()
        )));
    }
    if let Some(s) = scales.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
        return Err(Error::InvalidParameter(format!("feature scale {s} must be > 0")));
    }
    Ok(())
}

/// Keys and weights of every point's enclosing simplex, computed in parallel.
fn enclose_all(features: ArrayView2<f64>, scales: &[f64]) -> Result<(Vec<i32>, Vec<f64>)> {
    let n = features.nrows();
    let d = features.ncols();
    let dp1 = d + 1;
    let elevator = Elevator::new(d)?;
    let mut keys = vec![0i32; n * dp1 * dp1];
    let mut weights = vec![0.0; n * dp1];
    const BLOCK: usize = 256;
    keys.par_chunks_mut(BLOCK * dp1 * dp1)
        .zip(weights.par_chunks_mut(BLOCK * dp1))
        .enumerate()
        .try_for_each(|(b, (keys, weights))| -> Result<()> {
            let mut scratch = EncloseScratch::new(d);
            let mut scaled = vec![0.0; d];
            let start = b * BLOCK;
            for (j, (k, w)) in keys
                .chunks_mut(dp1 * dp1)
                .zip(weights.chunks_mut(dp1))
                .enumerate()
            {
                let f = features.row(start + j);
                for ((dst, &v), &s) in scaled.iter_mut().zip(f.iter()).zip(scales) {
                    *dst = v * s;
                }
                elevator.enclose_into(&scaled, &mut scratch, k, w)?;
            }
            Ok(())
        })?;
    Ok((keys, weights))
}

/// Splat operator for `features_in` (scaled by the diagonal `scales`) and the
/// index of every vertex it touches. Zero-weight vertices are indexed too.
pub fn build_splat(
    features_in: ArrayView2<f64>,
    scales: &[f64],
) -> Result<(SplatOperator, LatticeIndex)> {
    check_features(features_in, scales)?;
    let n = features_in.nrows();
    if n == 0 {
        return Err(Error::EmptyInput("no input points to splat"));
    }
    let d = features_in.ncols();
    let dp1 = d + 1;
    let (keys, weights) = enclose_all(features_in, scales)?;
    let mut index = LatticeIndex::with_capacity(d, n * 2);
    let mut vertices = Vec::with_capacity(n * dp1);
    for key in keys.chunks(dp1) {
        vertices.push(index.insert(key) as u32);
    }
    Ok((
        SplatOperator {
            num_vertices: index.len(),
            col_ptr: (0..=n).map(|i| i * dp1).collect(),
            vertices,
            weights,
        },
        index,
    ))
}

/// Splat at `features_in` and slice at `features_out` over one index that
/// also holds every vertex enclosing an output point. Those extra vertices
/// start empty and receive values only through the blur, so outputs away
/// from the input support still read their blurred neighbourhood.
pub fn build_joint(
    features_in: ArrayView2<f64>,
    features_out: ArrayView2<f64>,
    scales: &[f64],
) -> Result<(SplatOperator, SplatOperator, LatticeIndex)> {
    let (mut splat, mut index) = build_splat(features_in, scales)?;
    check_features(features_out, scales)?;
    if features_out.ncols() != index.dim() {
        return Err(Error::shape(format!(
            "output features have dim {}, lattice has dim {}",
            features_out.ncols(),
            index.dim()
        )));
    }
    let dp1 = index.dim() + 1;
    let (keys, weights) = enclose_all(features_out, scales)?;
    let vertices: Vec<u32> = keys.chunks(dp1).map(|k| index.insert(k) as u32).collect();
    splat.num_vertices = index.len();
    let slice = SplatOperator {
        num_vertices: index.len(),
        col_ptr: (0..=features_out.nrows()).map(|i| i * dp1).collect(),
        vertices,
        weights,
    };
    Ok((splat, slice, index))
}

/// Slice operator at `features_out` against an existing index. Vertices not
/// in the index are dropped, so a point with no populated vertex gets an
/// empty column.
pub fn build_slice(
    features_out: ArrayView2<f64>,
    scales: &[f64],
    index: &LatticeIndex,
) -> Result<SplatOperator> {
    check_features(features_out, scales)?;
    let d = features_out.ncols();
    if d != index.dim() {
        return Err(Error::shape(format!(
            "output features have dim {d}, lattice has dim {}",
            index.dim()
        )));
    }
    let dp1 = d + 1;
    let (keys, weights) = enclose_all(features_out, scales)?;
    let mut col_ptr = Vec::with_capacity(features_out.nrows() + 1);
    col_ptr.push(0);
    let mut vertices = Vec::new();
    let mut kept = Vec::new();
    for (simplex, w) in keys.chunks(dp1 * dp1).zip(weights.chunks(dp1)) {
        for (key, &w) in simplex.chunks(dp1).zip(w) {
            if let Some(v) = index.get(key) {
                vertices.push(v as u32);
                kept.push(w);
            }
        }
        col_ptr.push(vertices.len());
    }
    Ok(SplatOperator {
        num_vertices: index.len(),
        col_ptr,
        vertices,
        weights: kept,
    })
}

/// Gather table `K`: entry `(k, j)` is the index of tap `k` around vertex `j`,
/// or [`MISSING`].
#[derive(Debug, Clone)]
pub struct BlurNeighborhood {
    stencil: Stencil,
    num_vertices: usize,
    table: Vec<u32>,
}

impl BlurNeighborhood {
    pub fn stencil(&self) -> &Stencil {
        &self.stencil
    }

    pub fn num_vertices(&self) -> usize {
        self.num_vertices
    }

    pub fn taps(&self) -> usize {
        self.stencil.len()
    }

    /// Row `k` of the table, one entry per vertex.
    pub fn row(&self, k: usize) -> &[u32] {
        &self.table[k * self.num_vertices..(k + 1) * self.num_vertices]
    }

    pub fn neighbor(&self, k: usize, j: usize) -> Option<usize> {
        match self.table[k * self.num_vertices + j] {
            MISSING => None,
            v => Some(v as usize),
        }
    }
}

/// Looks up every stencil tap of every populated vertex.
pub fn build_blur(index: &LatticeIndex, s: usize) -> Result<BlurNeighborhood> {
    let d = index.dim();
    let stencil = Stencil::new(d, s)?;
    let m = index.len();
    let t = stencil.len();
    let mut table = vec![MISSING; t * m];
    table
        .par_chunks_mut(m.max(1))
        .enumerate()
        .for_each(|(k, row)| {
            let offset = stencil.offset(k);
            let mut probe = vec![0i32; d + 1];
            for (j, slot) in row.iter_mut().enumerate() {
                for ((p, &c), &o) in probe.iter_mut().zip(index.key(j)).zip(offset) {
                    *p = c + o;
                }
                if let Some(v) = index.get(&probe) {
                    *slot = v as u32;
                }
            }
        });
    Ok(BlurNeighborhood {
        stencil,
        num_vertices: m,
        table,
    })
}

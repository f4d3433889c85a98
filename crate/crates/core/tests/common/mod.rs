//! Test-only oracles. Everything here is built from per-point lattice
//! primitives and dense matrices, never from the sparse operators under test.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array2, ArrayView2};
use permutofilt::lattice::{embed, enumerate_neighbors, find_simplex, FeatureVector, LatticeKey};
use permutofilt::permuto::FilterBank;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(lo..hi))
}

fn enclosure(f: ArrayView2<f64>, row: usize, scales: &[f64]) -> (Vec<LatticeKey>, Vec<f64>) {
    let v: Vec<f64> = f.row(row).iter().zip(scales).map(|(a, s)| a * s).collect();
    let enc = find_simplex(&embed(&FeatureVector::new(v).unwrap()).unwrap()).unwrap();
    (enc.vertices, enc.barycentric)
}

/// Dense matrices of the three-stage filter, built per point and per vertex.
pub struct DenseLattice {
    pub keys: Vec<LatticeKey>,
    pub splat: Array2<f64>,
    pub slice: Array2<f64>,
    pub s: usize,
}

impl DenseLattice {
    pub fn new(
        features_in: ArrayView2<f64>,
        features_out: ArrayView2<f64>,
        scales: &[f64],
        s: usize,
    ) -> Self {
        let mut order: BTreeMap<LatticeKey, usize> = BTreeMap::new();
        let mut keys = Vec::new();
        let mut entries = Vec::new();
        for i in 0..features_in.nrows() {
            let (verts, w) = enclosure(features_in, i, scales);
            for (v, w) in verts.into_iter().zip(w) {
                let idx = *order.entry(v.clone()).or_insert_with(|| {
                    keys.push(v.clone());
                    keys.len() - 1
                });
                entries.push((idx, i, w));
            }
        }
        let m = keys.len();
        let mut splat = Array2::zeros((m, features_in.nrows()));
        for (j, i, w) in entries {
            splat[[j, i]] += w;
        }
        let mut slice = Array2::zeros((features_out.nrows(), m));
        for i in 0..features_out.nrows() {
            let (verts, w) = enclosure(features_out, i, scales);
            for (v, w) in verts.into_iter().zip(w) {
                if let Some(&j) = order.get(&v) {
                    slice[[i, j]] += w;
                }
            }
        }
        DenseLattice {
            keys,
            splat,
            slice,
            s,
        }
    }

    /// `m x m` blur matrix for one channel pair: row `j` gathers tap `k`
    /// from the `k`-th canonical neighbour of vertex `j`.
    pub fn blur(&self, bank: &FilterBank, c_out: usize, c_in: usize) -> Array2<f64> {
        let m = self.keys.len();
        let lookup: BTreeMap<&LatticeKey, usize> =
            self.keys.iter().enumerate().map(|(i, k)| (k, i)).collect();
        let mut b = Array2::zeros((m, m));
        for (j, key) in self.keys.iter().enumerate() {
            for (k, nbr) in enumerate_neighbors(key, self.s).unwrap().iter().enumerate() {
                if let Some(&src) = lookup.get(nbr) {
                    b[[j, src]] += bank.get(c_out, c_in, k);
                }
            }
        }
        b
    }

    /// `S_slice B S_splat x`, with a scalar bank applied per channel.
    pub fn forward(&self, x: ArrayView2<f64>, bank: &FilterBank) -> Array2<f64> {
        let n_out = self.slice.nrows();
        if bank.is_scalar() {
            let op = self.slice.dot(&self.blur(bank, 0, 0)).dot(&self.splat);
            return op.dot(&x);
        }
        let mut out = Array2::zeros((n_out, bank.c_out()));
        for co in 0..bank.c_out() {
            for ci in 0..bank.c_in() {
                let op = self.slice.dot(&self.blur(bank, co, ci)).dot(&self.splat);
                let col = op.dot(&x.column(ci));
                let mut dst = out.column_mut(co);
                dst += &col;
            }
        }
        out
    }
}

/// Keys within `s` hops of `center`, where one hop moves to any other vertex
/// of a simplex containing the current vertex.
pub fn bfs_neighborhood(center: &LatticeKey, s: usize) -> BTreeSet<LatticeKey> {
    let dp1 = center.0.len();
    let d = dp1 - 1;
    // Every nonempty proper subset sum of the axis steps (d+1) e_j - 1.
    let mut steps = Vec::new();
    for mask in 1u32..((1 << dp1) - 1) {
        let size = mask.count_ones() as i32;
        let step: Vec<i32> = (0..dp1)
            .map(|j| {
                let inside = (mask >> j) & 1 == 1;
                (if inside { dp1 as i32 } else { 0 }) - size
            })
            .collect();
        steps.push(step);
    }
    let _ = d;
    let mut seen = BTreeSet::new();
    seen.insert(center.clone());
    let mut frontier = vec![center.clone()];
    for _ in 0..s {
        let mut next = Vec::new();
        for key in &frontier {
            for step in &steps {
                let cand = LatticeKey(key.0.iter().zip(step).map(|(a, b)| a + b).collect());
                if seen.insert(cand.clone()) {
                    next.push(cand);
                }
            }
        }
        frontier = next;
    }
    seen
}

/// Central difference of `f` along coordinate `i` of `x`.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut p = x.to_vec();
    p[i] = x[i] + h;
    let up = f(&p);
    p[i] = x[i] - h;
    let down = f(&p);
    (up - down) / (2.0 * h)
}

pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn max_rel_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    a.iter()
        .zip(b.iter())
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs() / scale))
}

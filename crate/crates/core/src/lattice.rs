//! Permutohedral lattice geometry.
//!
//! Features in `R^d` are elevated onto the zero-sum hyperplane of `R^(d+1)`,
//! where the lattice `A*_d` tiles space into congruent simplices. Lattice
//! points are stored in scaled integer coordinates: every coordinate of a
//! vertex is congruent to the same remainder `k` modulo `d+1`, and the
//! coordinates sum to zero. Vertex `k` of an enclosing simplex is the
//! remainder-`k` vertex.

use std::fmt;

use crate::error::{Error, Result};

/// Largest magnitude allowed for an elevated coordinate before rounding to
/// `i32` lattice keys.
const MAX_ELEVATED: f64 = (1u64 << 30) as f64;

/// Number of filter taps in an `s`-hop neighbourhood over `d`-dimensional
/// features: `(s+1)^(d+1) - s^(d+1)`.
pub fn filter_size(d: usize, s: usize) -> Result<usize> {
    let exp = u32::try_from(d + 1).map_err(|_| Error::SizeOverflow { d, s })?;
    let outer = (s as u64 + 1).checked_pow(exp);
    let inner = (s as u64).checked_pow(exp);
    match (outer, inner) {
        (Some(o), Some(i)) => usize::try_from(o - i).map_err(|_| Error::SizeOverflow { d, s }),
        _ => Err(Error::SizeOverflow { d, s }),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidFeature("feature dimension must be >= 1".into()));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidFeature(format!("non-finite entry {v}")));
        }
        Ok(FeatureVector(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// A point on the hyperplane `sum(coords) = 0` in `R^(d+1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ElevatedPoint(pub Vec<f64>);

impl ElevatedPoint {
    pub fn dim(&self) -> usize {
        self.0.len() - 1
    }
}

/// Integer coordinates of a lattice vertex.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LatticeKey(pub Vec<i32>);

impl LatticeKey {
    /// Validates the zero-sum and common-remainder structure.
    pub fn new(coords: Vec<i32>) -> Result<Self> {
        if coords.len() < 2 {
            return Err(Error::InvalidFeature("lattice key needs d+1 >= 2 coordinates".into()));
        }
        let modulus = coords.len() as i64;
        let sum: i64 = coords.iter().map(|&c| c as i64).sum();
        let rem = (coords[0] as i64).rem_euclid(modulus);
        if sum != 0 || coords.iter().any(|&c| (c as i64).rem_euclid(modulus) != rem) {
            return Err(Error::InvalidFeature(format!("{coords:?} is not a lattice point")));
        }
        Ok(LatticeKey(coords))
    }

    pub fn coords(&self) -> &[i32] {
        &self.0
    }

    /// Remainder class of the vertex, in `0..=d`.
    pub fn remainder(&self) -> usize {
        (self.0[0] as i64).rem_euclid(self.0.len() as i64) as usize
    }
}

impl fmt::Debug for LatticeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "LatticeKey{:?}", self.0)
    }
}

/// The `d+1` vertices of the simplex containing a point, with barycentric
/// weights. Vertices with zero weight are kept so the arity is always `d+1`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexEnclosure {
    pub vertices: Vec<LatticeKey>,
    pub barycentric: Vec<f64>,
}

/// Elevation and simplex lookup for a fixed feature dimension.
///
/// Holds the per-axis scale factors; scratch space is passed in by the caller
/// so that one `Elevator` can be shared across threads.
#[derive(Debug, Clone)]
pub struct Elevator {
    d: usize,
    scale: Vec<f64>,
}

/// Reusable buffers for [`Elevator::enclose_into`].
#[derive(Debug, Clone)]
pub struct EncloseScratch {
    elevated: Vec<f64>,
    rem0: Vec<i32>,
    rank: Vec<i32>,
    bary: Vec<f64>,
}

impl EncloseScratch {
    pub fn new(d: usize) -> Self {
        EncloseScratch {
            elevated: vec![0.0; d + 1],
            rem0: vec![0; d + 1],
            rank: vec![0; d + 1],
            bary: vec![0.0; d + 2],
        }
    }
}

impl Elevator {
    pub fn new(d: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidFeature("feature dimension must be >= 1".into()));
        }
        // Cell extent comparable to one unit of (scaled) feature distance.
        let inv_std = (d as f64 + 1.0) * (2.0f64 / 3.0).sqrt();
        let scale = (0..d)
            .map(|k| inv_std / (((k + 1) * (k + 2)) as f64).sqrt())
            .collect();
        Ok(Elevator { d, scale })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// Writes the elevation of `f` into `out` (length `d+1`).
    pub fn embed_into(&self, f: &[f64], out: &mut [f64]) -> Result<()> {
        let d = self.d;
        debug_assert_eq!(out.len(), d + 1);
        if f.len() != d {
            return Err(Error::shape(format!("feature has dim {}, expected {d}", f.len())));
        }
        let mut tail = 0.0;
        for i in (1..=d).rev() {
            let cf = f[i - 1] * self.scale[i - 1];
            if !cf.is_finite() {
                return Err(Error::InvalidFeature(format!("non-finite entry {}", f[i - 1])));
            }
            out[i] = tail - i as f64 * cf;
            tail += cf;
        }
        out[0] = tail;
        Ok(())
    }

    /// Finds the enclosing simplex of feature `f`.
    ///
    /// `keys` receives `(d+1)` keys of `(d+1)` coordinates each, vertex-major;
    /// `weights` receives the matching barycentric coordinates.
    pub fn enclose_into(
        &self,
        f: &[f64],
        scratch: &mut EncloseScratch,
        keys: &mut [i32],
        weights: &mut [f64],
    ) -> Result<()> {
        let mut elevated = std::mem::take(&mut scratch.elevated);
        let res = self
            .embed_into(f, &mut elevated)
            .and_then(|_| self.enclose_elevated(&elevated, scratch, keys, weights));
        scratch.elevated = elevated;
        res
    }

    fn enclose_elevated(
        &self,
        elevated: &[f64],
        scratch: &mut EncloseScratch,
        keys: &mut [i32],
        weights: &mut [f64],
    ) -> Result<()> {
        let d = self.d;
        let dp1 = (d + 1) as i32;
        let dp1f = dp1 as f64;
        if let Some(v) = elevated.iter().find(|v| !v.is_finite() || v.abs() > MAX_ELEVATED) {
            return Err(Error::InvalidFeature(format!("elevated coordinate {v} out of range")));
        }
        let rem0 = &mut scratch.rem0;
        let rank = &mut scratch.rank;
        let bary = &mut scratch.bary;

        // Nearest remainder-0 point, coordinate-wise.
        let mut sum = 0i32;
        for i in 0..=d {
            let v = elevated[i] / dp1f;
            let up = v.ceil() * dp1f;
            let down = v.floor() * dp1f;
            rem0[i] = if up - elevated[i] < elevated[i] - down {
                up as i32
            } else {
                down as i32
            };
            sum += rem0[i] / dp1;
        }

        // Rank coordinates by their rounding residual, largest first.
        rank.iter_mut().for_each(|r| *r = 0);
        for i in 0..d {
            let di = elevated[i] - rem0[i] as f64;
            for j in (i + 1)..=d {
                if di < elevated[j] - rem0[j] as f64 {
                    rank[i] += 1;
                } else {
                    rank[j] += 1;
                }
            }
        }

        // Repair the coordinate sum so the remainder-0 point lies on the plane.
        if sum > 0 {
            for i in 0..=d {
                if rank[i] >= dp1 - sum {
                    rem0[i] -= dp1;
                    rank[i] += sum - dp1;
                } else {
                    rank[i] += sum;
                }
            }
        } else if sum < 0 {
            for i in 0..=d {
                if rank[i] < -sum {
                    rem0[i] += dp1;
                    rank[i] += dp1 + sum;
                } else {
                    rank[i] += sum;
                }
            }
        }

        // Barycentric weights from consecutive sorted residual differences.
        bary.iter_mut().for_each(|b| *b = 0.0);
        for i in 0..=d {
            let delta = (elevated[i] - rem0[i] as f64) / dp1f;
            let r = rank[i] as usize;
            bary[d - r] += delta;
            bary[d + 1 - r] -= delta;
        }
        bary[0] += 1.0 + bary[d + 1];

        for k in 0..=d {
            weights[k] = bary[k].max(0.0);
            let key = &mut keys[k * (d + 1)..(k + 1) * (d + 1)];
            for i in 0..=d {
                key[i] = if rank[i] as usize <= d - k {
                    rem0[i] + k as i32
                } else {
                    rem0[i] + k as i32 - dp1
                };
            }
        }
        Ok(())
    }
}

/// Elevates a feature vector onto the lattice hyperplane.
pub fn embed(f: &FeatureVector) -> Result<ElevatedPoint> {
    let elevator = Elevator::new(f.dim())?;
    let mut out = vec![0.0; f.dim() + 1];
    elevator.embed_into(&f.0, &mut out)?;
    Ok(ElevatedPoint(out))
}

/// Finds the simplex containing an elevated point.
pub fn find_simplex(p: &ElevatedPoint) -> Result<SimplexEnclosure> {
    let d = p.dim();
    let elevator = Elevator::new(d)?;
    let mut scratch = EncloseScratch::new(d);
    let mut keys = vec![0i32; (d + 1) * (d + 1)];
    let mut weights = vec![0.0; d + 1];
    elevator.enclose_elevated(&p.0, &mut scratch, &mut keys, &mut weights)?;
    Ok(SimplexEnclosure {
        vertices: keys.chunks(d + 1).map(|k| LatticeKey(k.to_vec())).collect(),
        barycentric: weights,
    })
}

/// Canonical `s`-hop neighbourhood of a lattice vertex.
///
/// Tap `k` is described by a hop vector `a` in `{0..=s}^(d+1)` with at least
/// one zero entry; its lattice offset is `sum_j a_j * ((d+1) e_j - 1)`. Taps
/// are ordered lexicographically by hop vector, so tap 0 is the centre.
#[derive(Debug, Clone)]
pub struct Stencil {
    d: usize,
    s: usize,
    hops: Vec<u16>,
    offsets: Vec<i32>,
    mirror: Vec<usize>,
}

impl Stencil {
    pub fn new(d: usize, s: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidFeature("feature dimension must be >= 1".into()));
        }
        let t = filter_size(d, s)?;
        let dp1 = d + 1;
        if s > u16::MAX as usize {
            return Err(Error::SizeOverflow { d, s });
        }
        let base = s as u64 + 1;
        let total = base.pow(dp1 as u32);
        let mut hops = Vec::with_capacity(t * dp1);
        let mut a = vec![0u16; dp1];
        // Lexicographic over {0..=s}^(d+1): first coordinate most significant.
        for code in 0..total {
            let mut rest = code;
            for x in a.iter_mut().rev() {
                *x = (rest % base) as u16;
                rest /= base;
            }
            if a.contains(&0) {
                hops.extend_from_slice(&a);
            }
        }
        debug_assert_eq!(hops.len(), t * dp1);

        let mut offsets = Vec::with_capacity(t * dp1);
        for a in hops.chunks(dp1) {
            let total: i32 = a.iter().map(|&x| x as i32).sum();
            offsets.extend(a.iter().map(|&x| dp1 as i32 * x as i32 - total));
        }

        let mut mirror = vec![0; t];
        let mut flipped = vec![0u16; dp1];
        for (k, a) in hops.chunks(dp1).enumerate() {
            let max = *a.iter().max().unwrap();
            for (f, &x) in flipped.iter_mut().zip(a) {
                *f = max - x;
            }
            mirror[k] = hops
                .chunks(dp1)
                .position(|b| b == flipped.as_slice())
                .expect("stencil is symmetric");
        }
        Ok(Stencil {
            d,
            s,
            hops,
            offsets,
            mirror,
        })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn hops(&self) -> usize {
        self.s
    }

    /// Number of taps `t`.
    pub fn len(&self) -> usize {
        self.mirror.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mirror.is_empty()
    }

    pub fn hop_vector(&self, k: usize) -> &[u16] {
        &self.hops[k * (self.d + 1)..(k + 1) * (self.d + 1)]
    }

    pub fn offset(&self, k: usize) -> &[i32] {
        &self.offsets[k * (self.d + 1)..(k + 1) * (self.d + 1)]
    }

    /// Index of the tap with the negated offset.
    pub fn mirror(&self, k: usize) -> usize {
        self.mirror[k]
    }

    /// Squared Euclidean length of tap `k`, in units of one lattice hop.
    pub fn offset_norm_sq(&self, k: usize) -> f64 {
        let d = self.d as f64;
        let sq: i64 = self.offset(k).iter().map(|&o| (o as i64) * (o as i64)).sum();
        sq as f64 / (d * (d + 1.0))
    }

    /// Tap index of `offset`, if it lies in the stencil.
    pub fn find_offset(&self, offset: &[i32]) -> Option<usize> {
        self.offsets.chunks(self.d + 1).position(|o| o == offset)
    }
}

/// Keys of the `s`-hop neighbourhood of `key`, in canonical tap order.
pub fn enumerate_neighbors(key: &LatticeKey, s: usize) -> Result<Vec<LatticeKey>> {
    let d = key.0.len() - 1;
    let stencil = Stencil::new(d, s)?;
    Ok((0..stencil.len())
        .map(|k| {
            LatticeKey(
                key.0
                    .iter()
                    .zip(stencil.offset(k))
                    .map(|(&c, &o)| c + o)
                    .collect(),
            )
        })
        .collect())
}

const EMPTY: u32 = u32::MAX;

/// Hash table from lattice keys to dense indices `0..m`.
///
/// Open addressing with linear probing over a 64-bit mix of the key; probes
/// compare full keys, so collisions never alias.
#[derive(Debug, Clone)]
pub struct LatticeIndex {
    width: usize,
    keys: Vec<i32>,
    slots: Vec<u32>,
}

fn hash_key(key: &[i32]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &c in key {
        h ^= c as u32 as u64;
        h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h ^= h >> 31;
    }
    h ^= h >> 33;
    h = h.wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    h ^ (h >> 33)
}

impl LatticeIndex {
    /// Empty index for keys of `d+1` coordinates.
    pub fn new(d: usize) -> Self {
        Self::with_capacity(d, 16)
    }

    pub fn with_capacity(d: usize, capacity: usize) -> Self {
        let slots = (capacity.max(8) * 2).next_power_of_two();
        LatticeIndex {
            width: d + 1,
            keys: Vec::with_capacity(capacity * (d + 1)),
            slots: vec![EMPTY; slots],
        }
    }

    /// Feature dimension `d`.
    pub fn dim(&self) -> usize {
        self.width - 1
    }

    /// Number of populated vertices `m`.
    pub fn len(&self) -> usize {
        self.keys.len() / self.width
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn key(&self, index: usize) -> &[i32] {
        &self.keys[index * self.width..(index + 1) * self.width]
    }

    pub fn keys(&self) -> impl Iterator<Item = &[i32]> {
        self.keys.chunks(self.width)
    }

    fn probe(&self, key: &[i32]) -> (usize, Option<usize>) {
        let mask = self.slots.len() - 1;
        let mut slot = hash_key(key) as usize & mask;
        loop {
            match self.slots[slot] {
                EMPTY => return (slot, None),
                idx if self.key(idx as usize) == key => return (slot, Some(idx as usize)),
                _ => slot = (slot + 1) & mask,
            }
        }
    }

    pub fn get(&self, key: &[i32]) -> Option<usize> {
        debug_assert_eq!(key.len(), self.width);
        self.probe(key).1
    }

    /// Returns the index of `key`, inserting it if absent.
    pub fn insert(&mut self, key: &[i32]) -> usize {
        debug_assert_eq!(key.len(), self.width);
        let (slot, found) = self.probe(key);
        if let Some(idx) = found {
            return idx;
        }
        let idx = self.len();
        assert!(idx < EMPTY as usize, "lattice index full");
        self.keys.extend_from_slice(key);
        self.slots[slot] = idx as u32;
        if self.len() * 2 > self.slots.len() {
            self.grow();
        }
        idx
    }

    fn grow(&mut self) {
        let size = self.slots.len() * 2;
        let mask = size - 1;
        let mut slots = vec![EMPTY; size];
        for (idx, key) in self.keys.chunks(self.width).enumerate() {
            let mut slot = hash_key(key) as usize & mask;
            while slots[slot] != EMPTY {
                slot = (slot + 1) & mask;
            }
            slots[slot] = idx as u32;
        }
        self.slots = slots;
    }
}

/// Assigns dense indices to every vertex of every enclosure, in first-seen order.
pub fn build_index(enclosures: &[SimplexEnclosure]) -> Result<LatticeIndex> {
    let first = enclosures
        .first()
        .ok_or(Error::EmptyInput("no enclosures to index"))?;
    let d = first.vertices.len() - 1;
    let mut index = LatticeIndex::with_capacity(d, enclosures.len() * (d + 1));
    for enc in enclosures {
        for v in &enc.vertices {
            if v.0.len() != d + 1 {
                return Err(Error::shape("enclosures have mixed dimensions"));
            }
            index.insert(&v.0);
        }
    }
    Ok(index)
}

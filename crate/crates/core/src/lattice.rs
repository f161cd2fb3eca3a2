//! Uniform lattices on a simplex: `{ k in N^dim : sum k = n }`, scaled by
//! `scale / n`. Used both for the measure grid of the master equation
//! (`scale = 1`) and for the weight grid of the Nash solver (`scale = N`).
//!
//! Interpolation is piecewise linear on the Freudenthal triangulation of the
//! cumulative-sum chart `c_m = k_0 + ... + k_m`. In that chart the lattice
//! fills the ordered chamber `0 <= c_0 <= ... <= c_{dim-2} <= n`, whose walls
//! are unions of Freudenthal faces, so every stencil stays on the lattice.

use crate::error::{Error, Result};

/// Largest dimension supported by [`Stencil`].
pub const MAX_DIM: usize = 8;

/// Interpolation stencil: at most `MAX_DIM` lattice nodes with convex weights.
#[derive(Clone, Copy, Debug)]
pub struct Stencil {
    idx: [u32; MAX_DIM],
    w: [f64; MAX_DIM],
    len: usize,
}

impl Stencil {
    fn single(i: usize) -> Self {
        let mut s = Self {
            idx: [0; MAX_DIM],
            w: [0.0; MAX_DIM],
            len: 1,
        };
        s.idx[0] = i as u32;
        s.w[0] = 1.0;
        s
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        (0..self.len).map(move |m| (self.idx[m] as usize, self.w[m]))
    }

    /// `sum_m w_m * values[idx_m * stride + offset]`.
    #[inline]
    pub fn apply(&self, values: &[f64], stride: usize, offset: usize) -> f64 {
        let mut s = 0.0;
        for m in 0..self.len {
            s += self.w[m] * values[self.idx[m] as usize * stride + offset];
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct SimplexLattice {
    dim: usize,
    n: usize,
    scale: f64,
    /// compositions, `dim` entries per node
    nodes: Vec<u32>,
    /// dense chart index -> compact index (`u32::MAX` when outside)
    lookup: Vec<u32>,
    strides: Vec<usize>,
}

impl SimplexLattice {
    pub fn new(dim: usize, n: usize, scale: f64) -> Result<Self> {
        if dim == 0 || dim > MAX_DIM {
            return Err(Error::InvalidParameter(format!("lattice dimension {dim}")));
        }
        if n == 0 && dim > 1 {
            return Err(Error::InvalidParameter("lattice with zero subdivisions".into()));
        }
        let chart_dims = dim - 1;
        let mut strides = vec![1usize; dim];
        for a in 1..chart_dims {
            strides[a] = strides[a - 1] * (n + 1);
        }
        let dense = if chart_dims == 0 {
            1
        } else {
            strides[chart_dims - 1]
                .checked_mul(n + 1)
                .ok_or(Error::Memory {
                    bytes: usize::MAX,
                    limit: usize::MAX,
                })?
        };
        if dense > 1 << 31 {
            return Err(Error::Memory {
                bytes: dense * 4,
                limit: 1 << 33,
            });
        }
        let mut lattice = Self {
            dim,
            n,
            scale,
            nodes: Vec::new(),
            lookup: vec![u32::MAX; dense],
            strides,
        };
        let mut k = vec![0u32; dim];
        lattice.enumerate(0, n as u32, &mut k);
        Ok(lattice)
    }

    fn enumerate(&mut self, pos: usize, remaining: u32, k: &mut [u32]) {
        if pos + 1 == self.dim {
            k[pos] = remaining;
            let compact = (self.nodes.len() / self.dim) as u32;
            let chart = self.chart_index(k);
            self.lookup[chart] = compact;
            self.nodes.extend_from_slice(k);
            return;
        }
        for v in 0..=remaining {
            k[pos] = v;
            self.enumerate(pos + 1, remaining - v, k);
        }
    }

    #[inline]
    fn chart_index(&self, k: &[u32]) -> usize {
        (0..self.dim - 1).map(|a| k[a] as usize * self.strides[a]).sum()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn subdivisions(&self) -> usize {
        self.n
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Lattice spacing in the scaled coordinates.
    pub fn spacing(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.scale / self.n as f64
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn composition(&self, idx: usize) -> &[u32] {
        &self.nodes[idx * self.dim..(idx + 1) * self.dim]
    }

    /// Scaled coordinates of node `idx`.
    pub fn point_into(&self, idx: usize, out: &mut [f64]) {
        let h = if self.n == 0 { 0.0 } else { self.scale / self.n as f64 };
        for (o, &k) in out.iter_mut().zip(self.composition(idx)) {
            *o = if self.n == 0 { self.scale } else { k as f64 * h };
        }
    }

    pub fn point(&self, idx: usize) -> Vec<f64> {
        let mut p = vec![0.0; self.dim];
        self.point_into(idx, &mut p);
        p
    }

    pub fn index_of(&self, k: &[u32]) -> Option<usize> {
        if k.len() != self.dim || k.iter().map(|&v| v as usize).sum::<usize>() != self.n {
            return None;
        }
        match self.lookup[self.chart_index(k)] {
            u32::MAX => None,
            c => Some(c as usize),
        }
    }

    /// Node `k + e_plus - e_minus`, if it lies on the lattice.
    #[inline]
    pub fn shift(&self, idx: usize, plus: usize, minus: usize) -> Option<usize> {
        if plus == minus {
            return Some(idx);
        }
        let k = self.composition(idx);
        if k[minus] == 0 {
            return None;
        }
        let mut chart = self.chart_index(k) as isize;
        if plus + 1 < self.dim {
            chart += self.strides[plus] as isize;
        }
        if minus + 1 < self.dim {
            chart -= self.strides[minus] as isize;
        }
        Some(self.lookup[chart as usize] as usize)
    }

    /// Nearest lattice node (by rounding in the cumulative chart).
    pub fn nearest(&self, p: &[f64]) -> usize {
        let st = self.stencil(p);
        st.iter()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i)
            .unwrap_or(0)
    }

    /// Piecewise-linear interpolation stencil for a point with nonnegative
    /// scaled coordinates summing to `scale`. Small violations are absorbed
    /// by clamping in the cumulative chart.
    pub fn stencil(&self, p: &[f64]) -> Stencil {
        if self.dim == 1 || self.n == 0 {
            return Stencil::single(0);
        }
        let m = self.dim - 1;
        let n = self.n as f64;
        let factor = n / self.scale;
        let mut c = [0.0f64; MAX_DIM];
        let mut acc = 0.0;
        let mut prev: f64 = 0.0;
        for a in 0..m {
            acc += p[a] * factor;
            let v = acc.clamp(prev, n);
            c[a] = v;
            prev = v;
        }
        let mut base = [0i64; MAX_DIM];
        let mut frac = [0.0f64; MAX_DIM];
        for a in 0..m {
            let fl = c[a].floor().min(n - 1.0).max(0.0);
            base[a] = fl as i64;
            frac[a] = (c[a] - fl).clamp(0.0, 1.0);
        }
        let mut order = [0usize; MAX_DIM];
        for (a, o) in order.iter_mut().enumerate().take(m) {
            *o = a;
        }
        // descending fractional part; ties put the higher chart index first
        order[..m].sort_by(|&a, &b| frac[b].total_cmp(&frac[a]).then(b.cmp(&a)));

        let mut st = Stencil {
            idx: [0; MAX_DIM],
            w: [0.0; MAX_DIM],
            len: 0,
        };
        let mut vert = base;
        for r in 0..=m {
            if r > 0 {
                vert[order[r - 1]] += 1;
            }
            let w = if r == 0 {
                1.0 - frac[order[0]]
            } else if r == m {
                frac[order[m - 1]]
            } else {
                frac[order[r - 1]] - frac[order[r]]
            };
            if w <= 0.0 {
                continue;
            }
            let idx = self.cumulative_to_index(&vert[..m]);
            st.idx[st.len] = idx as u32;
            st.w[st.len] = w;
            st.len += 1;
        }
        st
    }

    fn cumulative_to_index(&self, c: &[i64]) -> usize {
        let mut k = [0u32; MAX_DIM];
        let mut prev = 0i64;
        for (a, &v) in c.iter().enumerate() {
            debug_assert!(v >= prev, "stencil vertex outside the chamber");
            k[a] = (v - prev) as u32;
            prev = v;
        }
        k[self.dim - 1] = (self.n as i64 - prev) as u32;
        self.lookup[self.chart_index(&k[..self.dim])] as usize
    }
}

//! Cone geometry: membership, Jordan algebra and Nesterov–Todd scalings.

use nalgebra::{DMatrix, DVector};

use crate::kernel;
use crate::scalar::Real;

/// One factor of the cone product `𝒦`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cone {
    /// `{0}^m`, i.e. equality rows.
    Zero(usize),
    NonNeg(usize),
    /// `{(t, u) : ‖u‖ ≤ t}` of total dimension `d`.
    Soc(usize),
    /// Symmetric `s×s` PSD matrices in scaled lower-triangular vectorisation.
    Psd(usize),
}

impl Cone {
    /// Number of rows the cone occupies.
    pub fn dim(&self) -> usize {
        match *self {
            Cone::Zero(m) | Cone::NonNeg(m) | Cone::Soc(m) => m,
            Cone::Psd(s) => s * (s + 1) / 2,
        }
    }

    /// Barrier degree.
    pub fn degree(&self) -> usize {
        match *self {
            Cone::Zero(_) => 0,
            Cone::NonNeg(m) => m,
            Cone::Soc(_) => 1,
            Cone::Psd(s) => s,
        }
    }
}

/// Scaled vectorisation: lower triangle column by column, off-diagonals times √2.
pub fn svec<T: Real>(m: &DMatrix<T>) -> DVector<T> {
    let s = m.nrows();
    let r2 = T::lit(std::f64::consts::SQRT_2);
    let mut out = DVector::zeros(s * (s + 1) / 2);
    let mut k = 0;
    for j in 0..s {
        for i in j..s {
            out[k] = if i == j { m[(i, j)] } else { (m[(i, j)] + m[(j, i)]) * T::lit(0.5) * r2 };
            k += 1;
        }
    }
    out
}

/// Inverse of [`svec`].
pub fn smat<T: Real>(v: &[T], s: usize) -> DMatrix<T> {
    let inv_r2 = T::lit(std::f64::consts::FRAC_1_SQRT_2);
    let mut m = DMatrix::zeros(s, s);
    let mut k = 0;
    for j in 0..s {
        for i in j..s {
            if i == j {
                m[(i, i)] = v[k];
            } else {
                let val = v[k] * inv_r2;
                m[(i, j)] = val;
                m[(j, i)] = val;
            }
            k += 1;
        }
    }
    m
}

/// Offset of entry `(i, j)` in [`svec`] order.
pub fn packed_index(s: usize, i: usize, j: usize) -> usize {
    let (i, j) = if i >= j { (i, j) } else { (j, i) };
    j * (2 * s - j + 1) / 2 + (i - j)
}

/// Located cone block inside the stacked slack vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub cone: Cone,
    pub offset: usize,
}

impl Block {
    pub fn dim(&self) -> usize {
        self.cone.dim()
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.dim()
    }
}

pub fn layout(cones: &[Cone]) -> Vec<Block> {
    let mut off = 0;
    cones
        .iter()
        .map(|&cone| {
            let b = Block { cone, offset: off };
            off += cone.dim();
            b
        })
        .collect()
}

fn soc_j<T: Real>(u: &[T]) -> T {
    let t = tail_norm(u);
    (u[0] - t) * (u[0] + t)
}

fn tail_norm<T: Real>(u: &[T]) -> T {
    u[1..].iter().fold(T::zero(), |a, v| a + *v * *v).sqrt()
}

/// Signed distance-like margin of `u` to the boundary of a cone: positive in
/// the interior. Zero cones have margin `+∞` unless nonzero.
pub fn block_margin<T: Real>(cone: Cone, u: &[T]) -> T {
    match cone {
        Cone::Zero(_) => {
            let m = u.iter().fold(T::zero(), |a, v| a.max(v.abs()));
            -m
        }
        Cone::NonNeg(_) => u.iter().fold(T::max_value().unwrap(), |a, v| a.min(*v)),
        Cone::Soc(_) => u[0] - tail_norm(u),
        Cone::Psd(s) => kernel::min_eigenvalue(&smat(u, s)),
    }
}

/// Identity element `e` of the cone product (zero on zero cones).
pub fn identity<T: Real>(blocks: &[Block], m: usize) -> DVector<T> {
    let mut e = DVector::zeros(m);
    for b in blocks {
        match b.cone {
            Cone::Zero(_) => {}
            Cone::NonNeg(n) => e.rows_mut(b.offset, n).fill(T::one()),
            Cone::Soc(_) => e[b.offset] = T::one(),
            Cone::Psd(s) => {
                for i in 0..s {
                    e[b.offset + packed_index(s, i, i)] = T::one();
                }
            }
        }
    }
    e
}

/// Jordan product `u ∘ v`.
pub fn jprod<T: Real>(blocks: &[Block], u: &DVector<T>, v: &DVector<T>) -> DVector<T> {
    let mut out = DVector::zeros(u.len());
    for b in blocks {
        let r = b.range();
        let (us, vs) = (&u.as_slice()[r.clone()], &v.as_slice()[r.clone()]);
        let o = &mut out.as_mut_slice()[r];
        match b.cone {
            Cone::Zero(_) => {}
            Cone::NonNeg(_) => {
                for i in 0..o.len() {
                    o[i] = us[i] * vs[i];
                }
            }
            Cone::Soc(_) => {
                o[0] = us.iter().zip(vs).fold(T::zero(), |a, (x, y)| a + *x * *y);
                for i in 1..o.len() {
                    o[i] = us[0] * vs[i] + vs[0] * us[i];
                }
            }
            Cone::Psd(s) => {
                let um = smat(us, s);
                let vm = smat(vs, s);
                let p = &um * &vm;
                let sym = (&p + p.transpose()) * T::lit(0.5);
                o.copy_from_slice(svec(&sym).as_slice());
            }
        }
    }
    out
}

/// Solves `λ ∘ x = w` for `x` where `λ` is the scaled point (diagonal on PSD blocks).
pub fn jdiv<T: Real>(blocks: &[Block], lambda: &DVector<T>, w: &DVector<T>) -> DVector<T> {
    let mut out = DVector::zeros(w.len());
    for b in blocks {
        let r = b.range();
        let (ls, ws) = (&lambda.as_slice()[r.clone()], &w.as_slice()[r.clone()]);
        let o = &mut out.as_mut_slice()[r];
        match b.cone {
            Cone::Zero(_) => {}
            Cone::NonNeg(_) => {
                for i in 0..o.len() {
                    o[i] = ws[i] / ls[i];
                }
            }
            Cone::Soc(_) => {
                let det = soc_j(ls);
                let dot_tail = ls[1..].iter().zip(&ws[1..]).fold(T::zero(), |a, (x, y)| a + *x * *y);
                let x0 = (ls[0] * ws[0] - dot_tail) / det;
                o[0] = x0;
                for i in 1..o.len() {
                    o[i] = (ws[i] - x0 * ls[i]) / ls[0];
                }
            }
            Cone::Psd(s) => {
                let mut k = 0;
                for j in 0..s {
                    for i in j..s {
                        let li = ls[packed_index(s, i, i)];
                        let lj = ls[packed_index(s, j, j)];
                        o[k] = ws[k] * T::lit(2.0) / (li + lj);
                        k += 1;
                    }
                }
            }
        }
    }
    out
}

/// Largest `α ≥ 0` with `u + α d` in a second-order cone (`u` interior):
/// the first positive root of `J(u + α d) = 0`.
pub fn soc_max_step<T: Real>(u: &[T], d: &[T]) -> T {
    let inf = T::max_value().unwrap();
    let ju = soc_j(u);
    let jd = soc_j(d);
    let cross = u[0] * d[0] - u[1..].iter().zip(&d[1..]).fold(T::zero(), |a, (x, y)| a + *x * *y);
    let disc = cross * cross - ju * jd;
    if disc < T::zero() {
        return inf;
    }
    let sq = disc.sqrt();
    let qq = -(cross + if cross >= T::zero() { sq } else { -sq });
    if qq == T::zero() {
        return inf;
    }
    let mut alpha = inf;
    for r in [ju / qq, if jd != T::zero() { qq / jd } else { -T::one() }] {
        if r > T::zero() {
            alpha = alpha.min(r);
        }
    }
    alpha
}

/// Largest `α ≥ 0` keeping `λ + α d` in the cone product, with `λ` the
/// scaled point (diagonal on PSD blocks).
pub fn max_step_scaled<T: Real>(blocks: &[Block], lambda: &DVector<T>, d: &DVector<T>) -> T {
    let inf = T::max_value().unwrap();
    let mut alpha = inf;
    for b in blocks {
        let r = b.range();
        let (ls, ds) = (&lambda.as_slice()[r.clone()], &d.as_slice()[r]);
        let a = match b.cone {
            Cone::Zero(_) => inf,
            Cone::NonNeg(_) => ls
                .iter()
                .zip(ds)
                .filter(|(_, d)| **d < T::zero())
                .fold(inf, |a, (l, d)| a.min(-*l / *d)),
            Cone::Soc(_) => soc_max_step(ls, ds),
            Cone::Psd(s) => {
                let mut m = smat(ds, s);
                let isq: Vec<T> = (0..s)
                    .map(|i| T::one() / ls[packed_index(s, i, i)].sqrt())
                    .collect();
                for j in 0..s {
                    for i in 0..s {
                        m[(i, j)] *= isq[i] * isq[j];
                    }
                }
                let mn = kernel::min_eigenvalue(&m);
                if mn < T::zero() {
                    -T::one() / mn
                } else {
                    inf
                }
            }
        };
        alpha = alpha.min(a);
    }
    alpha
}

/// Nesterov–Todd scaling of one block.
#[derive(Debug, Clone)]
pub enum Scaling<T: Real> {
    Zero,
    NonNeg { w: DVector<T> },
    Soc { eta: T, wbar: DVector<T> },
    Psd { r: DMatrix<T>, rti: DMatrix<T> },
}

/// Scalings for every block and the scaled point `λ = W z = W⁻ᵀ s`.
#[derive(Debug, Clone)]
pub struct NtScaling<T: Real> {
    pub blocks: Vec<Block>,
    pub parts: Vec<Scaling<T>>,
    pub lambda: DVector<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    W,
    Wt,
    Winv,
    WinvT,
}

impl<T: Real> NtScaling<T> {
    pub fn identity(blocks: &[Block], m: usize) -> Self {
        let parts = blocks
            .iter()
            .map(|b| match b.cone {
                Cone::Zero(_) => Scaling::Zero,
                Cone::NonNeg(n) => Scaling::NonNeg { w: DVector::from_element(n, T::one()) },
                Cone::Soc(n) => {
                    let mut wbar = DVector::zeros(n);
                    wbar[0] = T::one();
                    Scaling::Soc { eta: T::one(), wbar }
                }
                Cone::Psd(s) => Scaling::Psd {
                    r: DMatrix::identity(s, s),
                    rti: DMatrix::identity(s, s),
                },
            })
            .collect();
        NtScaling {
            blocks: blocks.to_vec(),
            parts,
            lambda: identity(blocks, m),
        }
    }

    /// Computes the scaling at an interior pair `(s, z)`; `None` if either
    /// point has left the cone interior numerically.
    pub fn compute(blocks: &[Block], s: &DVector<T>, z: &DVector<T>) -> Option<Self> {
        let mut parts = Vec::with_capacity(blocks.len());
        let mut lambda = DVector::zeros(s.len());
        for b in blocks {
            let r = b.range();
            let (ss, zs) = (&s.as_slice()[r.clone()], &z.as_slice()[r.clone()]);
            match b.cone {
                Cone::Zero(_) => parts.push(Scaling::Zero),
                Cone::NonNeg(n) => {
                    let mut w = DVector::zeros(n);
                    for i in 0..n {
                        if !(ss[i] > T::zero() && zs[i] > T::zero()) {
                            return None;
                        }
                        w[i] = (ss[i] / zs[i]).sqrt();
                        lambda[b.offset + i] = (ss[i] * zs[i]).sqrt();
                    }
                    parts.push(Scaling::NonNeg { w });
                }
                Cone::Soc(n) => {
                    let js = soc_j(ss);
                    let jz = soc_j(zs);
                    if !(js > T::zero() && jz > T::zero() && ss[0] > T::zero() && zs[0] > T::zero()) {
                        return None;
                    }
                    let (rs, rz) = (js.sqrt(), jz.sqrt());
                    let sbar: Vec<T> = ss.iter().map(|v| *v / rs).collect();
                    let zbar: Vec<T> = zs.iter().map(|v| *v / rz).collect();
                    let dot = sbar.iter().zip(&zbar).fold(T::zero(), |a, (x, y)| a + *x * *y);
                    let gamma = ((T::one() + dot) * T::lit(0.5)).sqrt();
                    let mut wbar = DVector::zeros(n);
                    wbar[0] = (sbar[0] + zbar[0]) / (T::lit(2.0) * gamma);
                    for i in 1..n {
                        wbar[i] = (sbar[i] - zbar[i]) / (T::lit(2.0) * gamma);
                    }
                    let eta = (js / jz).sqrt().sqrt();
                    let part = Scaling::Soc { eta, wbar };
                    let mut out = vec![T::zero(); n];
                    apply_part(&part, Op::W, zs, &mut out);
                    lambda.as_mut_slice()[r].copy_from_slice(&out);
                    parts.push(part);
                }
                Cone::Psd(sz) => {
                    let sm = smat(ss, sz);
                    let zm = smat(zs, sz);
                    let l1 = sm.cholesky()?.l();
                    let l2 = zm.cholesky()?.l();
                    let f = kernel::svd_factor(&(l2.transpose() * &l1));
                    if f.sigma.iter().any(|v| !(*v > T::zero())) {
                        return None;
                    }
                    let isq = DMatrix::from_diagonal(&f.sigma.map(|v| T::one() / v.sqrt()));
                    let r_mat = &l1 * &f.g * &isq;
                    let rti = &l2 * &f.l * &isq;
                    for i in 0..sz {
                        lambda[b.offset + packed_index(sz, i, i)] = f.sigma[i];
                    }
                    parts.push(Scaling::Psd { r: r_mat, rti });
                }
            }
        }
        Some(NtScaling {
            blocks: blocks.to_vec(),
            parts,
            lambda,
        })
    }

    pub fn apply(&self, op: Op, v: &DVector<T>) -> DVector<T> {
        let mut out = DVector::zeros(v.len());
        for (b, part) in self.blocks.iter().zip(&self.parts) {
            let r = b.range();
            apply_part(part, op, &v.as_slice()[r.clone()], &mut out.as_mut_slice()[r]);
        }
        out
    }

    /// Applies an operator to every column of `g`.
    pub fn apply_columns(&self, op: Op, g: &DMatrix<T>) -> DMatrix<T> {
        let mut out = DMatrix::zeros(g.nrows(), g.ncols());
        for (b, part) in self.blocks.iter().zip(&self.parts) {
            let r = b.range();
            let rows = g.rows(b.offset, b.dim());
            match part {
                Scaling::Zero => {}
                Scaling::NonNeg { w } => {
                    for j in 0..g.ncols() {
                        for i in 0..b.dim() {
                            let f = match op {
                                Op::W | Op::Wt => w[i],
                                Op::Winv | Op::WinvT => T::one() / w[i],
                            };
                            out[(b.offset + i, j)] = rows[(i, j)] * f;
                        }
                    }
                }
                Scaling::Soc { .. } | Scaling::Psd { .. } => {
                    let mut col = vec![T::zero(); b.dim()];
                    let mut res = vec![T::zero(); b.dim()];
                    for j in 0..g.ncols() {
                        let mut nonzero = false;
                        for i in 0..b.dim() {
                            col[i] = rows[(i, j)];
                            nonzero |= col[i] != T::zero();
                        }
                        if !nonzero {
                            continue;
                        }
                        apply_part(part, op, &col, &mut res);
                        for i in 0..b.dim() {
                            out[(r.start + i, j)] = res[i];
                        }
                    }
                }
            }
        }
        out
    }
}

fn apply_part<T: Real>(part: &Scaling<T>, op: Op, v: &[T], out: &mut [T]) {
    match part {
        Scaling::Zero => out.copy_from_slice(v),
        Scaling::NonNeg { w } => {
            for i in 0..v.len() {
                out[i] = match op {
                    Op::W | Op::Wt => v[i] * w[i],
                    Op::Winv | Op::WinvT => v[i] / w[i],
                };
            }
        }
        Scaling::Soc { eta, wbar } => {
            let w0 = wbar[0];
            let a = (1..v.len()).fold(T::zero(), |acc, i| acc + wbar[i] * v[i]);
            match op {
                Op::W | Op::Wt => {
                    out[0] = *eta * (w0 * v[0] + a);
                    let c = v[0] + a / (T::one() + w0);
                    for i in 1..v.len() {
                        out[i] = *eta * (v[i] + c * wbar[i]);
                    }
                }
                Op::Winv | Op::WinvT => {
                    out[0] = (w0 * v[0] - a) / *eta;
                    let c = v[0] - a / (T::one() + w0);
                    for i in 1..v.len() {
                        out[i] = (v[i] - c * wbar[i]) / *eta;
                    }
                }
            }
        }
        Scaling::Psd { r, rti } => {
            let s = r.nrows();
            let u = smat(v, s);
            let m = match op {
                Op::W => r.transpose() * u * r,
                Op::Wt => r * u * r.transpose(),
                Op::Winv => rti * u * rti.transpose(),
                Op::WinvT => rti.transpose() * u * rti,
            };
            out.copy_from_slice(svec(&m).as_slice());
        }
    }
}

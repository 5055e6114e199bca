//! Up-looking sparse Cholesky factorization `P A P' = L L'`.
//!
//! The fill-reducing permutation comes from approximate minimum degree
//! ordering. The symbolic phase (ordering, elimination tree, column counts)
//! is separated from the numeric phase so that matrices sharing a sparsity
//! pattern, e.g. CAR precisions for different `(gamma, tau2)`, factor
//! without repeating it.

use std::sync::Arc;

use super::SymCsc;
use crate::error::{Error, Result};

const NONE: usize = usize::MAX;

/// Ordering, elimination tree and column layout of `L` for one pattern.
#[derive(Debug)]
pub struct SymbolicCholesky {
    n: usize,
    perm: Vec<usize>,
    pinv: Vec<usize>,
    parent: Vec<usize>,
    lp: Vec<usize>,
    // Permuted upper triangle C = (P A P')_upper, as CSC.
    cp: Vec<usize>,
    ci: Vec<usize>,
    // Position in C of every stored value of A.
    amap: Vec<usize>,
    a_colptr: Vec<usize>,
    a_rowidx: Vec<usize>,
}

impl SymbolicCholesky {
    /// Orders `a` with AMD and analyses the resulting pattern.
    pub fn analyse(a: &SymCsc) -> Result<Self> {
        let perm = amd_order(a)?;
        Self::with_permutation(a, perm)
    }

    /// Analyses `a` under a caller-supplied permutation (`perm[k]` is the
    /// original index eliminated at step `k`).
    pub fn with_permutation(a: &SymCsc, perm: Vec<usize>) -> Result<Self> {
        let n = a.n();
        if perm.len() != n {
            return Err(Error::Dimension(format!("permutation of length {} for order {n}", perm.len())));
        }
        let mut pinv = vec![NONE; n];
        for (k, &i) in perm.iter().enumerate() {
            if i >= n || pinv[i] != NONE {
                return Err(Error::InvalidArgument("not a permutation".into()));
            }
            pinv[i] = k;
        }

        // Build C = upper triangle of P A P' with a map from A's entries.
        let (acp, ari) = (a.colptr(), a.rowidx());
        let mut count = vec![0usize; n];
        for j in 0..n {
            for &i in &ari[acp[j]..acp[j + 1]] {
                count[pinv[i].max(pinv[j])] += 1;
            }
        }
        let mut cp = vec![0usize; n + 1];
        for k in 0..n {
            cp[k + 1] = cp[k] + count[k];
        }
        let mut next = cp[..n].to_vec();
        let mut ci = vec![0usize; cp[n]];
        let mut amap = vec![0usize; ari.len()];
        for j in 0..n {
            for p in acp[j]..acp[j + 1] {
                let (pi, pj) = (pinv[ari[p]], pinv[j]);
                let (r, c) = (pi.min(pj), pi.max(pj));
                ci[next[c]] = r;
                amap[p] = next[c];
                next[c] += 1;
            }
        }
        // Diagonal entries must be present for the numeric phase.
        for k in 0..n {
            if !ci[cp[k]..cp[k + 1]].contains(&k) {
                return Err(Error::InvalidArgument(format!("missing diagonal entry {}", perm[k])));
            }
        }

        let parent = etree(n, &cp, &ci);

        // Column counts by walking each row subtree once.
        let mut colcount = vec![1usize; n];
        let mut stack = vec![0usize; n];
        let mut flag = vec![NONE; n];
        for k in 0..n {
            let top = ereach(&cp, &ci, k, &parent, &mut stack, &mut flag);
            for &i in &stack[top..] {
                colcount[i] += 1;
            }
        }
        let mut lp = vec![0usize; n + 1];
        for k in 0..n {
            lp[k + 1] = lp[k] + colcount[k];
        }

        Ok(Self {
            n,
            perm,
            pinv,
            parent,
            lp,
            cp,
            ci,
            amap,
            a_colptr: acp.to_vec(),
            a_rowidx: ari.to_vec(),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of nonzeros in `L`, diagonal included.
    pub fn nnz_l(&self) -> usize {
        self.lp[self.n]
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn pinv(&self) -> &[usize] {
        &self.pinv
    }

    pub(crate) fn lp(&self) -> &[usize] {
        &self.lp
    }

    fn matches(&self, a: &SymCsc) -> bool {
        a.n() == self.n && a.colptr() == self.a_colptr.as_slice() && a.rowidx() == self.a_rowidx.as_slice()
    }
}

/// Numeric factor `L` with `P A P' = L L'`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    symbolic: Arc<SymbolicCholesky>,
    // Row indices per column of L, diagonal first and increasing.
    li: Vec<usize>,
    lx: Vec<f64>,
}

impl Cholesky {
    /// Orders, analyses and factors `a`.
    pub fn factor(a: &SymCsc) -> Result<Self> {
        let symbolic = Arc::new(SymbolicCholesky::analyse(a)?);
        Self::factor_with(symbolic, a)
    }

    /// Factors `a` reusing a symbolic analysis of the same pattern.
    pub fn factor_with(symbolic: Arc<SymbolicCholesky>, a: &SymCsc) -> Result<Self> {
        if !symbolic.matches(a) {
            return Err(Error::InvalidArgument("matrix pattern differs from the symbolic analysis".into()));
        }
        let s = &*symbolic;
        let n = s.n;
        let mut cx = vec![0.0; s.ci.len()];
        for (p, &q) in s.amap.iter().enumerate() {
            cx[q] += a.values()[p];
        }

        let mut li = vec![0usize; s.lp[n]];
        let mut lx = vec![0.0f64; s.lp[n]];
        let mut next = s.lp[..n].to_vec();
        let mut x = vec![0.0f64; n];
        let mut stack = vec![0usize; n];
        let mut flag = vec![NONE; n];

        for k in 0..n {
            let top = ereach(&s.cp, &s.ci, k, &s.parent, &mut stack, &mut flag);
            for p in s.cp[k]..s.cp[k + 1] {
                x[s.ci[p]] = cx[p];
            }
            let mut d = x[k];
            x[k] = 0.0;
            for &i in &stack[top..] {
                let lki = x[i] / lx[s.lp[i]];
                x[i] = 0.0;
                for p in s.lp[i] + 1..next[i] {
                    x[li[p]] -= lx[p] * lki;
                }
                d -= lki * lki;
                let p = next[i];
                next[i] += 1;
                li[p] = k;
                lx[p] = lki;
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::NotPositiveDefinite { pivot: s.perm[k] });
            }
            let p = next[k];
            next[k] += 1;
            li[p] = k;
            lx[p] = d.sqrt();
        }

        Ok(Self { symbolic, li, lx })
    }

    pub fn symbolic(&self) -> &Arc<SymbolicCholesky> {
        &self.symbolic
    }

    pub fn n(&self) -> usize {
        self.symbolic.n
    }

    /// `ln |A|`.
    pub fn logdet(&self) -> f64 {
        let s = &*self.symbolic;
        2.0 * (0..s.n).map(|j| self.lx[s.lp[j]].ln()).sum::<f64>()
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let s = &*self.symbolic;
        assert_eq!(b.len(), s.n);
        let mut y: Vec<f64> = s.perm.iter().map(|&i| b[i]).collect();
        self.lsolve(&mut y);
        self.ltsolve(&mut y);
        let mut x = vec![0.0; s.n];
        for (k, &i) in s.perm.iter().enumerate() {
            x[i] = y[k];
        }
        x
    }

    /// Maps i.i.d. standard normals `z` to a draw from `N(0, A^{-1})`.
    pub fn sample_precision(&self, z: &[f64]) -> Vec<f64> {
        let s = &*self.symbolic;
        assert_eq!(z.len(), s.n);
        let mut y = z.to_vec();
        self.ltsolve(&mut y);
        let mut x = vec![0.0; s.n];
        for (k, &i) in s.perm.iter().enumerate() {
            x[i] = y[k];
        }
        x
    }

    fn lsolve(&self, y: &mut [f64]) {
        let s = &*self.symbolic;
        for j in 0..s.n {
            let p0 = s.lp[j];
            y[j] /= self.lx[p0];
            let yj = y[j];
            if yj != 0.0 {
                for p in p0 + 1..s.lp[j + 1] {
                    y[self.li[p]] -= self.lx[p] * yj;
                }
            }
        }
    }

    fn ltsolve(&self, y: &mut [f64]) {
        let s = &*self.symbolic;
        for j in (0..s.n).rev() {
            let p0 = s.lp[j];
            let mut acc = y[j];
            for p in p0 + 1..s.lp[j + 1] {
                acc -= self.lx[p] * y[self.li[p]];
            }
            y[j] = acc / self.lx[p0];
        }
    }

    pub(crate) fn parts(&self) -> (&[usize], &[usize], &[f64]) {
        (&self.symbolic.lp, &self.li, &self.lx)
    }
}

fn amd_order(a: &SymCsc) -> Result<Vec<usize>> {
    let n = a.n();
    if n == 0 {
        return Ok(Vec::new());
    }
    // AMD wants the full symmetric pattern.
    let mut cols: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, j, _) in a.iter() {
        cols[j].push(i);
        if i != j {
            cols[i].push(j);
        }
    }
    let mut ap = Vec::with_capacity(n + 1);
    let mut ai = Vec::new();
    ap.push(0usize);
    for mut c in cols {
        c.sort_unstable();
        ai.extend_from_slice(&c);
        ap.push(ai.len());
    }
    let control = amd::Control::default();
    let (p, _pinv, _info) =
        amd::order(n, &ap, &ai, &control).map_err(|s| Error::InvalidArgument(format!("AMD ordering failed: {s:?}")))?;
    Ok(p)
}

/// Elimination tree of the matrix whose upper triangle is `(cp, ci)`.
fn etree(n: usize, cp: &[usize], ci: &[usize]) -> Vec<usize> {
    let mut parent = vec![NONE; n];
    let mut ancestor = vec![NONE; n];
    for k in 0..n {
        for &row in &ci[cp[k]..cp[k + 1]] {
            let mut i = row;
            while i != NONE && i < k {
                let inext = ancestor[i];
                ancestor[i] = k;
                if inext == NONE {
                    parent[i] = k;
                }
                i = inext;
            }
        }
    }
    parent
}

/// Nonzero pattern of row `k` of `L`, returned in `stack[top..]` in
/// topological order.
fn ereach(cp: &[usize], ci: &[usize], k: usize, parent: &[usize], stack: &mut [usize], flag: &mut [usize]) -> usize {
    let n = stack.len();
    let mut top = n;
    flag[k] = k;
    for &row in &ci[cp[k]..cp[k + 1]] {
        let mut i = row;
        if i > k {
            continue;
        }
        let mut len = 0;
        while flag[i] != k {
            stack[len] = i;
            len += 1;
            flag[i] = k;
            i = parent[i];
        }
        while len > 0 {
            top -= 1;
            len -= 1;
            stack[top] = stack[len];
        }
    }
    top
}

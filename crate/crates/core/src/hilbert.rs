//! Tensor-product Hilbert spaces.
//!
//! A [`SystemLayout`] is an ordered list of labelled factors. Basis indices
//! are row-major over that order, so for `atom(2) ⊗ a(2) ⊗ b(2)` the ket
//! `|f,1,0⟩` sits at `1·4 + 1·2 + 0 = 6`. Atom factors always come first in
//! the layouts built by this crate, which keeps state dumps stable.

use std::collections::HashSet;
use std::fmt;

use crate::error::{Error, Result};
use crate::linalg::{self, CMatrix, CVector, C64, ONE, ZERO};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Factor {
    pub label: String,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SystemLayout {
    factors: Vec<Factor>,
}

impl SystemLayout {
    pub fn new<I, S>(factors: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, usize)>,
        S: Into<String>,
    {
        let factors: Vec<Factor> = factors
            .into_iter()
            .map(|(label, dim)| Factor {
                label: label.into(),
                dim,
            })
            .collect();
        if factors.is_empty() {
            return Err(Error::Layout("a layout needs at least one factor".into()));
        }
        let mut seen = HashSet::new();
        for f in &factors {
            if f.dim < 2 {
                return Err(Error::Dimension {
                    factor: f.label.clone(),
                    message: format!("dimension {} is below 2", f.dim),
                });
            }
            if !seen.insert(f.label.as_str()) {
                return Err(Error::Layout(format!("duplicate factor label `{}`", f.label)));
            }
        }
        Ok(Self { factors })
    }

    /// Single-factor layout, the natural home of local operators.
    pub fn single(label: impl Into<String>, dim: usize) -> Result<Self> {
        Self::new([(label.into(), dim)])
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn dim(&self) -> usize {
        self.factors.iter().map(|f| f.dim).product()
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.factors.iter().map(|f| f.label.as_str())
    }

    pub fn position(&self, label: &str) -> Result<usize> {
        self.factors
            .iter()
            .position(|f| f.label == label)
            .ok_or_else(|| Error::UnknownFactor(label.to_string()))
    }

    pub fn factor_dim(&self, label: &str) -> Result<usize> {
        Ok(self.factors[self.position(label)?].dim)
    }

    fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.factors.len()];
        for k in (0..self.factors.len().saturating_sub(1)).rev() {
            strides[k] = strides[k + 1] * self.factors[k + 1].dim;
        }
        strides
    }

    /// Multi-index to flat basis index.
    pub fn encode(&self, indices: &[usize]) -> Result<usize> {
        if indices.len() != self.factors.len() {
            return Err(Error::Layout(format!(
                "expected {} indices, got {}",
                self.factors.len(),
                indices.len()
            )));
        }
        let mut flat = 0;
        for (f, &i) in self.factors.iter().zip(indices) {
            if i >= f.dim {
                return Err(Error::Dimension {
                    factor: f.label.clone(),
                    message: format!("index {i} out of range for dimension {}", f.dim),
                });
            }
            flat = flat * f.dim + i;
        }
        Ok(flat)
    }

    /// Flat basis index to multi-index.
    pub fn decode(&self, mut index: usize) -> Vec<usize> {
        let mut out = vec![0; self.factors.len()];
        for (k, f) in self.factors.iter().enumerate().rev() {
            out[k] = index % f.dim;
            index /= f.dim;
        }
        out
    }

    /// Concatenation `self ⊗ other`.
    pub fn concat(&self, other: &SystemLayout) -> Result<SystemLayout> {
        SystemLayout::new(
            self.factors
                .iter()
                .chain(other.factors.iter())
                .map(|f| (f.label.clone(), f.dim)),
        )
    }

    /// Sub-layout made of the named factors, in this layout's order.
    pub fn restrict(&self, keep: &[&str]) -> Result<SystemLayout> {
        for label in keep {
            self.position(label)?;
        }
        SystemLayout::new(
            self.factors
                .iter()
                .filter(|f| keep.contains(&f.label.as_str()))
                .map(|f| (f.label.clone(), f.dim)),
        )
    }
}

impl fmt::Display for SystemLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.factors.iter().map(|x| format!("{}({})", x.label, x.dim)).collect();
        write!(f, "{}", parts.join(" ⊗ "))
    }
}

/// Index bookkeeping for acting on a subset of factors.
///
/// For every flat index `r` of the full layout, `sub[r]` is the index of `r`
/// restricted to the selected factors (in selection order) and `base[r]` is
/// `r` with the selected digits zeroed. `offset[j]` adds the selected digits
/// of sub-index `j` back, so `base[r] + offset[j]` is `r` with its selected
/// part replaced by `j`.
pub(crate) struct SubsystemMap {
    pub sub: Vec<usize>,
    pub base: Vec<usize>,
    pub offset: Vec<usize>,
}

impl SubsystemMap {
    pub fn new(layout: &SystemLayout, positions: &[usize]) -> Self {
        let strides = layout.strides();
        let dims: Vec<usize> = positions.iter().map(|&p| layout.factors[p].dim).collect();
        let sub_dim: usize = dims.iter().product();
        let total = layout.dim();

        let mut offset = vec![0; sub_dim];
        for (j, slot) in offset.iter_mut().enumerate() {
            let mut rem = j;
            let mut acc = 0;
            for k in (0..positions.len()).rev() {
                acc += (rem % dims[k]) * strides[positions[k]];
                rem /= dims[k];
            }
            *slot = acc;
        }

        let mut sub = vec![0; total];
        let mut base = vec![0; total];
        for r in 0..total {
            let digits = layout.decode(r);
            let mut s = 0;
            let mut zeroed = r;
            for (k, &p) in positions.iter().enumerate() {
                s = s * dims[k] + digits[p];
                zeroed -= digits[p] * strides[p];
            }
            sub[r] = s;
            base[r] = zeroed;
        }
        Self { sub, base, offset }
    }

    pub fn for_labels(layout: &SystemLayout, labels: &[&str]) -> Result<Self> {
        let mut positions = Vec::with_capacity(labels.len());
        for label in labels {
            let p = layout.position(label)?;
            if positions.contains(&p) {
                return Err(Error::Layout(format!("factor `{label}` selected twice")));
            }
            positions.push(p);
        }
        Ok(Self::new(layout, &positions))
    }

    /// Distinct base indices, i.e. one representative per complement index.
    pub fn bases(&self) -> impl Iterator<Item = usize> + '_ {
        self.sub
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == 0)
            .map(|(r, _)| self.base[r])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    layout: SystemLayout,
    amplitudes: CVector,
}

impl StateVector {
    pub fn new(layout: SystemLayout, amplitudes: CVector) -> Result<Self> {
        if amplitudes.len() != layout.dim() {
            return Err(Error::Layout(format!(
                "{} amplitudes for a layout of dimension {}",
                amplitudes.len(),
                layout.dim()
            )));
        }
        Ok(Self { layout, amplitudes })
    }

    pub fn from_slice(layout: SystemLayout, amplitudes: &[C64]) -> Result<Self> {
        Self::new(layout, CVector::from_column_slice(amplitudes))
    }

    pub fn zeros(layout: SystemLayout) -> Self {
        let n = layout.dim();
        Self {
            layout,
            amplitudes: CVector::zeros(n),
        }
    }

    pub fn layout(&self) -> &SystemLayout {
        &self.layout
    }

    pub fn amplitudes(&self) -> &CVector {
        &self.amplitudes
    }

    pub fn amplitude(&self, indices: &[usize]) -> Result<C64> {
        Ok(self.amplitudes[self.layout.encode(indices)?])
    }

    pub fn norm(&self) -> f64 {
        self.amplitudes.norm()
    }

    pub fn normalized(&self) -> Result<Self> {
        let n = self.norm();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::Domain("cannot normalize a zero vector".into()));
        }
        Ok(Self {
            layout: self.layout.clone(),
            amplitudes: self.amplitudes.unscale(n),
        })
    }

    pub fn scaled(&self, factor: C64) -> Self {
        Self {
            layout: self.layout.clone(),
            amplitudes: &self.amplitudes * factor,
        }
    }

    /// `self + other`, for building superpositions.
    pub fn add(&self, other: &StateVector) -> Result<Self> {
        same_layout(&self.layout, &other.layout)?;
        Ok(Self {
            layout: self.layout.clone(),
            amplitudes: &self.amplitudes + &other.amplitudes,
        })
    }

    /// Tensor product of kets, layouts concatenated in order.
    pub fn product(parts: &[&StateVector]) -> Result<Self> {
        let (first, rest) = parts
            .split_first()
            .ok_or_else(|| Error::Layout("empty product".into()))?;
        let mut acc = (*first).clone();
        for part in rest {
            let layout = acc.layout.concat(&part.layout)?;
            let amplitudes = acc.amplitudes.kronecker(&part.amplitudes);
            acc = StateVector { layout, amplitudes };
        }
        Ok(acc)
    }

    /// Reduced density operator on the kept factors, computed directly from
    /// the amplitudes.
    pub fn reduced(&self, keep: &[&str]) -> Result<DensityOperator> {
        if keep.is_empty() {
            return Err(Error::Layout("partial trace needs a nonempty keep set".into()));
        }
        let kept = self.layout.restrict(keep)?;
        let positions: Vec<usize> = kept.labels().map(|l| self.layout.position(l)).collect::<Result<_>>()?;
        let map = SubsystemMap::new(&self.layout, &positions);
        let d = kept.dim();
        let mut out = CMatrix::zeros(d, d);
        for b in map.bases() {
            for i in 0..d {
                let xi = self.amplitudes[b + map.offset[i]];
                if xi == ZERO {
                    continue;
                }
                for j in 0..d {
                    out[(i, j)] += xi * self.amplitudes[b + map.offset[j]].conj();
                }
            }
        }
        DensityOperator::new(kept, out)
    }

    /// Applies `op` to the named factors without forming the full matrix.
    /// `op`'s factors are matched to `labels` in order.
    pub fn apply_local(&self, op: &OperatorMatrix, labels: &[&str]) -> Result<StateVector> {
        check_local_dims(op, &self.layout, labels)?;
        let map = SubsystemMap::for_labels(&self.layout, labels)?;
        let d_op = op.dim();
        let mut out = CVector::zeros(self.layout.dim());
        for (r, slot) in out.iter_mut().enumerate() {
            let row = map.sub[r];
            let base = map.base[r];
            let mut acc = ZERO;
            for j in 0..d_op {
                let m = op.matrix[(row, j)];
                if m != ZERO {
                    acc += m * self.amplitudes[base + map.offset[j]];
                }
            }
            *slot = acc;
        }
        StateVector::new(self.layout.clone(), out)
    }
}

/// Computational basis ket `|indices⟩`.
pub fn basis_state(layout: &SystemLayout, indices: &[usize]) -> Result<StateVector> {
    let pos = layout.encode(indices)?;
    let mut amplitudes = CVector::zeros(layout.dim());
    amplitudes[pos] = ONE;
    StateVector::new(layout.clone(), amplitudes)
}

/// `⟨x|y⟩`, conjugate-linear in `x`.
pub fn inner(x: &StateVector, y: &StateVector) -> Result<C64> {
    same_layout(&x.layout, &y.layout)?;
    Ok(x.amplitudes.dotc(&y.amplitudes))
}

fn same_layout(a: &SystemLayout, b: &SystemLayout) -> Result<()> {
    if a != b {
        return Err(Error::Layout(format!("layout mismatch: {a} vs {b}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityOperator {
    layout: SystemLayout,
    matrix: CMatrix,
}

impl DensityOperator {
    pub fn new(layout: SystemLayout, matrix: CMatrix) -> Result<Self> {
        let d = layout.dim();
        if matrix.nrows() != d || matrix.ncols() != d {
            return Err(Error::Layout(format!(
                "{}x{} matrix for a layout of dimension {d}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        Ok(Self { layout, matrix })
    }

    pub fn pure(psi: &StateVector) -> Self {
        let v = &psi.amplitudes;
        Self {
            layout: psi.layout.clone(),
            matrix: v * v.adjoint(),
        }
    }

    pub fn maximally_mixed(layout: SystemLayout) -> Self {
        let d = layout.dim();
        Self {
            layout,
            matrix: CMatrix::identity(d, d).unscale(d as f64),
        }
    }

    pub fn layout(&self) -> &SystemLayout {
        &self.layout
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> CMatrix {
        self.matrix
    }

    pub fn trace(&self) -> C64 {
        self.matrix.trace()
    }

    /// `(ρ + ρ†)/2`.
    pub fn hermitized(&self) -> Self {
        Self {
            layout: self.layout.clone(),
            matrix: (&self.matrix + self.matrix.adjoint()) * C64::new(0.5, 0.0),
        }
    }

    /// `⟨ψ|ρ|ψ⟩`, complex so callers can inspect the imaginary residue.
    pub fn expectation_in(&self, psi: &StateVector) -> Result<C64> {
        same_layout(&self.layout, &psi.layout)?;
        let v = &psi.amplitudes;
        Ok(v.dotc(&(&self.matrix * v)))
    }

    pub fn population(&self, indices: &[usize]) -> Result<f64> {
        let k = self.layout.encode(indices)?;
        Ok(self.matrix[(k, k)].re)
    }

    pub fn partial_trace(&self, keep: &[&str]) -> Result<DensityOperator> {
        partial_trace(self, keep)
    }
}

/// Reduced density operator on `keep`; kept factors stay in layout order.
pub fn partial_trace(rho: &DensityOperator, keep: &[&str]) -> Result<DensityOperator> {
    if keep.is_empty() {
        return Err(Error::Layout("partial trace needs a nonempty keep set".into()));
    }
    let kept = rho.layout.restrict(keep)?;
    let positions: Vec<usize> = kept.labels().map(|l| rho.layout.position(l)).collect::<Result<_>>()?;
    let map = SubsystemMap::new(&rho.layout, &positions);
    let d = kept.dim();
    let mut out = CMatrix::zeros(d, d);
    for b in map.bases() {
        for i in 0..d {
            let row = b + map.offset[i];
            for j in 0..d {
                out[(i, j)] += rho.matrix[(row, b + map.offset[j])];
            }
        }
    }
    DensityOperator::new(kept, out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OperatorMatrix {
    layout: SystemLayout,
    matrix: CMatrix,
    hermitian: bool,
}

/// Tolerance behind the `hermitian` flag of [`OperatorMatrix`].
pub const HERMITIAN_TOL: f64 = 1e-12;

impl OperatorMatrix {
    /// Wraps a matrix; the Hermitian flag is set when the matrix is Hermitian
    /// within [`HERMITIAN_TOL`].
    pub fn new(layout: SystemLayout, matrix: CMatrix) -> Result<Self> {
        let d = layout.dim();
        if matrix.nrows() != d || matrix.ncols() != d {
            return Err(Error::Layout(format!(
                "{}x{} matrix for a layout of dimension {d}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        let hermitian = linalg::hermiticity_error(&matrix) <= HERMITIAN_TOL;
        Ok(Self {
            layout,
            matrix,
            hermitian,
        })
    }

    pub fn identity(layout: SystemLayout) -> Self {
        let d = layout.dim();
        Self {
            layout,
            matrix: CMatrix::identity(d, d),
            hermitian: true,
        }
    }

    pub fn zeros(layout: SystemLayout) -> Self {
        let d = layout.dim();
        Self {
            layout,
            matrix: CMatrix::zeros(d, d),
            hermitian: true,
        }
    }

    /// `|row⟩⟨col|` on a single factor.
    pub fn ket_bra(label: &str, dim: usize, row: usize, col: usize) -> Result<Self> {
        let layout = SystemLayout::single(label, dim)?;
        if row >= dim || col >= dim {
            return Err(Error::Dimension {
                factor: label.to_string(),
                message: format!("|{row}⟩⟨{col}| outside dimension {dim}"),
            });
        }
        let mut m = CMatrix::zeros(dim, dim);
        m[(row, col)] = ONE;
        Self::new(layout, m)
    }

    /// Truncated bosonic annihilation operator on a single factor.
    pub fn annihilation(label: &str, dim: usize) -> Result<Self> {
        let layout = SystemLayout::single(label, dim)?;
        let mut m = CMatrix::zeros(dim, dim);
        for n in 1..dim {
            m[(n - 1, n)] = C64::new((n as f64).sqrt(), 0.0);
        }
        Self::new(layout, m)
    }

    pub fn layout(&self) -> &SystemLayout {
        &self.layout
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn is_hermitian(&self) -> bool {
        self.hermitian
    }

    pub fn trace(&self) -> C64 {
        self.matrix.trace()
    }

    pub fn adjoint(&self) -> Self {
        Self {
            layout: self.layout.clone(),
            matrix: self.matrix.adjoint(),
            hermitian: self.hermitian,
        }
    }

    pub fn scaled(&self, factor: C64) -> Self {
        let hermitian = self.hermitian && factor.im == 0.0;
        Self {
            layout: self.layout.clone(),
            matrix: &self.matrix * factor,
            hermitian,
        }
    }

    pub fn add(&self, other: &OperatorMatrix) -> Result<Self> {
        same_layout(&self.layout, &other.layout)?;
        Self::new(self.layout.clone(), &self.matrix + &other.matrix)
    }

    pub fn mul(&self, other: &OperatorMatrix) -> Result<Self> {
        same_layout(&self.layout, &other.layout)?;
        Self::new(self.layout.clone(), &self.matrix * &other.matrix)
    }

    /// `[self, other]`.
    pub fn commutator(&self, other: &OperatorMatrix) -> Result<Self> {
        same_layout(&self.layout, &other.layout)?;
        Self::new(
            self.layout.clone(),
            &self.matrix * &other.matrix - &other.matrix * &self.matrix,
        )
    }

    pub fn apply(&self, psi: &StateVector) -> Result<StateVector> {
        same_layout(&self.layout, &psi.layout)?;
        StateVector::new(self.layout.clone(), &self.matrix * &psi.amplitudes)
    }

    /// Same matrix, relabelled onto a layout of equal shape.
    pub fn relabel(&self, layout: SystemLayout) -> Result<Self> {
        let shape = |l: &SystemLayout| l.factors().iter().map(|f| f.dim).collect::<Vec<_>>();
        if shape(&layout) != shape(&self.layout) {
            return Err(Error::Layout(format!("cannot relabel {} onto {layout}", self.layout)));
        }
        Ok(Self {
            layout,
            matrix: self.matrix.clone(),
            hermitian: self.hermitian,
        })
    }
}

/// Kronecker product, layouts concatenated.
pub fn tensor(a: &OperatorMatrix, b: &OperatorMatrix) -> Result<OperatorMatrix> {
    let layout = a.layout.concat(&b.layout)?;
    OperatorMatrix::new(layout, a.matrix.kronecker(&b.matrix))
}

fn check_local_dims(op: &OperatorMatrix, layout: &SystemLayout, labels: &[&str]) -> Result<()> {
    if op.layout.factors().len() != labels.len() {
        return Err(Error::Layout(format!(
            "operator on {} factors mapped onto {} labels",
            op.layout.factors().len(),
            labels.len()
        )));
    }
    for (f, label) in op.layout.factors().iter().zip(labels) {
        let target = layout.factor_dim(label)?;
        if target != f.dim {
            return Err(Error::Dimension {
                factor: label.to_string(),
                message: format!("operator dimension {} does not match factor dimension {target}", f.dim),
            });
        }
    }
    Ok(())
}

/// Lifts a single-factor operator to `layout`, acting as identity elsewhere.
pub fn embed(op: &OperatorMatrix, layout: &SystemLayout, factor_label: &str) -> Result<OperatorMatrix> {
    let target = layout.factor_dim(factor_label)?;
    if op.dim() != target {
        return Err(Error::Dimension {
            factor: factor_label.to_string(),
            message: format!(
                "operator dimension {} does not match factor dimension {target}",
                op.dim()
            ),
        });
    }
    let local = op.relabel(SystemLayout::single(factor_label, target)?)?;
    embed_factors(&local, layout, &[factor_label])
}

/// Lifts an operator on several factors to `layout`. `op`'s factors are
/// matched to `labels` in order; all other factors get the identity.
pub fn embed_factors(op: &OperatorMatrix, layout: &SystemLayout, labels: &[&str]) -> Result<OperatorMatrix> {
    check_local_dims(op, layout, labels)?;
    let map = SubsystemMap::for_labels(layout, labels)?;
    let d = layout.dim();
    let mut m = CMatrix::zeros(d, d);
    for r in 0..d {
        let row = map.sub[r];
        let base = map.base[r];
        for j in 0..op.dim() {
            let v = op.matrix[(row, j)];
            if v != ZERO {
                m[(r, base + map.offset[j])] = v;
            }
        }
    }
    Ok(OperatorMatrix {
        layout: layout.clone(),
        matrix: m,
        hermitian: op.hermitian,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn abb() -> SystemLayout {
        SystemLayout::new([("atom", 2), ("a", 2), ("b", 2)]).unwrap()
    }

    #[test]
    fn basis_positions_are_row_major() {
        let l = abb();
        let g01 = basis_state(&l, &[0, 0, 1]).unwrap();
        assert_eq!(g01.amplitudes()[1], ONE);
        let f10 = basis_state(&l, &[1, 1, 0]).unwrap();
        assert_eq!(f10.amplitudes()[6], ONE);
        assert_eq!(f10.norm(), 1.0);
        assert_eq!(f10.amplitudes().iter().filter(|z| **z != ZERO).count(), 1);
    }

    #[test]
    fn basis_state_out_of_range_names_factor() {
        match basis_state(&abb(), &[0, 2, 0]) {
            Err(Error::Dimension { factor, .. }) => assert_eq!(factor, "a"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn layout_rejects_bad_factors() {
        assert!(SystemLayout::new([("x", 1)]).is_err());
        assert!(SystemLayout::new([("x", 2), ("x", 3)]).is_err());
    }

    #[test]
    fn tensor_of_identities_and_projectors() {
        let i2 = OperatorMatrix::identity(SystemLayout::single("p", 2).unwrap());
        let i2b = OperatorMatrix::identity(SystemLayout::single("q", 2).unwrap());
        let prod = tensor(&i2, &i2b).unwrap();
        assert_eq!(prod.matrix(), &CMatrix::identity(4, 4));

        let p = OperatorMatrix::ket_bra("p", 2, 1, 1).unwrap();
        let pd = tensor(&p, &i2b).unwrap();
        let expected = CMatrix::from_diagonal(&CVector::from_vec(vec![ZERO, ZERO, ONE, ONE]));
        assert_eq!(pd.matrix(), &expected);

        assert!(matches!(tensor(&i2, &i2), Err(Error::Layout(_))));
    }

    #[test]
    fn tensor_trace_is_multiplicative() {
        let a = OperatorMatrix::new(
            SystemLayout::single("x", 2).unwrap(),
            CMatrix::from_row_slice(2, 2, &[C64::new(1.5, 0.0), ONE, ZERO, C64::new(-0.2, 0.3)]),
        )
        .unwrap();
        let b = OperatorMatrix::new(
            SystemLayout::single("y", 3).unwrap(),
            CMatrix::from_fn(3, 3, |i, j| C64::new((i + 2 * j) as f64, i as f64)),
        )
        .unwrap();
        let t = tensor(&a, &b).unwrap();
        assert!((t.trace() - a.trace() * b.trace()).norm() < 1e-12);
    }

    #[test]
    fn embed_identity_and_annihilation() {
        let l = abb();
        let id = OperatorMatrix::identity(SystemLayout::single("z", 2).unwrap());
        for label in ["atom", "a", "b"] {
            assert_eq!(embed(&id, &l, label).unwrap().matrix(), &CMatrix::identity(8, 8));
        }
        let a = OperatorMatrix::annihilation("a", 2).unwrap();
        let ea = embed(&a, &l, "a").unwrap();
        let out = ea.apply(&basis_state(&l, &[0, 1, 0]).unwrap()).unwrap();
        assert_eq!(out, basis_state(&l, &[0, 0, 0]).unwrap());
    }

    #[test]
    fn embed_errors() {
        let l = abb();
        let a3 = OperatorMatrix::annihilation("a", 3).unwrap();
        assert!(matches!(embed(&a3, &l, "a"), Err(Error::Dimension { .. })));
        assert!(matches!(embed(&a3, &l, "c"), Err(Error::UnknownFactor(_))));
    }

    #[test]
    fn embedded_disjoint_operators_commute() {
        let l = abb();
        let s = OperatorMatrix::ket_bra("atom", 2, 1, 0).unwrap();
        let a = OperatorMatrix::annihilation("b", 2).unwrap();
        let es = embed(&s, &l, "atom").unwrap();
        let ea = embed(&a, &l, "b").unwrap();
        let c = es.commutator(&ea).unwrap();
        assert!(c.matrix().iter().all(|z| z.norm() < 1e-15));
    }

    #[test]
    fn embed_respects_composition() {
        let l = SystemLayout::new([("atom", 3), ("a", 3), ("b", 2)]).unwrap();
        let x = OperatorMatrix::new(
            SystemLayout::single("a", 3).unwrap(),
            CMatrix::from_fn(3, 3, |i, j| C64::new(i as f64 - j as f64, (i * j) as f64)),
        )
        .unwrap();
        let y = OperatorMatrix::annihilation("a", 3).unwrap();
        let lhs = embed(&x.mul(&y).unwrap(), &l, "a").unwrap();
        let rhs = embed(&x, &l, "a").unwrap().mul(&embed(&y, &l, "a").unwrap()).unwrap();
        assert!(linalg::max_abs_diff(lhs.matrix(), rhs.matrix()) < 1e-14);
    }

    #[test]
    fn embed_factors_matches_tensor_construction() {
        let l = SystemLayout::new([("atom", 2), ("a", 2), ("b", 3)]).unwrap();
        let s = OperatorMatrix::ket_bra("atom", 2, 0, 1).unwrap();
        let b = OperatorMatrix::annihilation("b", 3).unwrap();
        let local = tensor(&s, &b).unwrap();
        let lifted = embed_factors(&local, &l, &["atom", "b"]).unwrap();
        let expected = embed(&s, &l, "atom")
            .unwrap()
            .mul(&embed(&b, &l, "b").unwrap())
            .unwrap();
        assert!(linalg::max_abs_diff(lifted.matrix(), expected.matrix()) < 1e-15);

        // Reversed factor order in the local operator.
        let local_rev = tensor(&b, &s).unwrap();
        let lifted_rev = embed_factors(&local_rev, &l, &["b", "atom"]).unwrap();
        assert!(linalg::max_abs_diff(lifted_rev.matrix(), expected.matrix()) < 1e-15);
    }

    #[test]
    fn apply_local_matches_embedded_matrix() {
        let l = SystemLayout::new([("A", 2), ("B", 2), ("a", 2), ("b", 2)]).unwrap();
        let op = OperatorMatrix::new(
            SystemLayout::new([("x", 2), ("y", 2)]).unwrap(),
            CMatrix::from_fn(4, 4, |i, j| C64::new((i + 1) as f64 * 0.3, j as f64 - 1.0)),
        )
        .unwrap();
        let psi = StateVector::new(
            l.clone(),
            CVector::from_fn(16, |i, _| C64::new((i as f64).sin(), (i as f64 * 0.7).cos())),
        )
        .unwrap();
        let fast = psi.apply_local(&op, &["B", "b"]).unwrap();
        let slow = embed_factors(&op, &l, &["B", "b"]).unwrap().apply(&psi).unwrap();
        let diff = (fast.amplitudes() - slow.amplitudes()).norm();
        assert!(diff < 1e-13);
    }

    #[test]
    fn partial_trace_of_product_basis_state() {
        let l = abb();
        let rho = DensityOperator::pure(&basis_state(&l, &[0, 0, 1]).unwrap());
        let red = partial_trace(&rho, &["atom"]).unwrap();
        let expected = CMatrix::from_row_slice(2, 2, &[ONE, ZERO, ZERO, ZERO]);
        assert_eq!(red.matrix(), &expected);
        assert!((red.trace() - rho.trace()).norm() < 1e-12);
    }

    #[test]
    fn partial_trace_of_bell_state_is_maximally_mixed() {
        let l = SystemLayout::new([("p", 2), ("q", 2)]).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let psi = StateVector::from_slice(l, &[C64::new(h, 0.0), ZERO, ZERO, C64::new(h, 0.0)]).unwrap();
        let rho = DensityOperator::pure(&psi);
        for keep in ["p", "q"] {
            let red = rho.partial_trace(&[keep]).unwrap();
            let half = CMatrix::identity(2, 2).unscale(2.0);
            assert!(linalg::max_abs_diff(red.matrix(), &half) < 1e-15);
            let red_direct = psi.reduced(&[keep]).unwrap();
            assert!(linalg::max_abs_diff(red_direct.matrix(), &half) < 1e-15);
        }
    }

    #[test]
    fn partial_trace_errors() {
        let rho = DensityOperator::maximally_mixed(abb());
        assert!(matches!(rho.partial_trace(&[]), Err(Error::Layout(_))));
        assert!(matches!(rho.partial_trace(&["zz"]), Err(Error::UnknownFactor(_))));
    }

    #[test]
    fn inner_product_properties() {
        let l = abb();
        let x = basis_state(&l, &[0, 0, 1]).unwrap();
        let y = basis_state(&l, &[1, 1, 0]).unwrap();
        assert_eq!(inner(&x, &x).unwrap(), ONE);
        assert_eq!(inner(&x, &y).unwrap(), ZERO);
        let other = basis_state(&SystemLayout::new([("atom", 2), ("a", 4)]).unwrap(), &[0, 1]).unwrap();
        assert!(inner(&x, &other).is_err());
    }

    fn arb_dims() -> impl Strategy<Value = Vec<usize>> {
        prop::collection::vec(2usize..5, 1..4).prop_filter("total ≤ 64", |d| d.iter().product::<usize>() <= 64)
    }

    fn random_density(layout: &SystemLayout, seed: &[f64]) -> DensityOperator {
        let d = layout.dim();
        let m = CMatrix::from_fn(d, d, |i, j| {
            let k = (i * d + j) % seed.len();
            C64::new(seed[k] + i as f64 * 0.1, seed[(k + 1) % seed.len()] - j as f64 * 0.05)
        });
        let pos = &m * m.adjoint();
        let tr = pos.trace().re;
        DensityOperator::new(layout.clone(), pos.unscale(tr)).unwrap()
    }

    proptest! {
        #[test]
        fn encode_decode_roundtrip(dims in arb_dims()) {
            let layout = SystemLayout::new(dims.iter().enumerate().map(|(k, &d)| (format!("f{k}"), d))).unwrap();
            for idx in 0..layout.dim() {
                prop_assert_eq!(layout.encode(&layout.decode(idx)).unwrap(), idx);
            }
        }

        #[test]
        fn partial_trace_factors_products(
            da in 2usize..4, db in 2usize..4,
            seed_a in prop::collection::vec(-1.0f64..1.0, 3..8),
            seed_b in prop::collection::vec(-1.0f64..1.0, 3..8),
        ) {
            let la = SystemLayout::single("x", da).unwrap();
            let lb = SystemLayout::single("y", db).unwrap();
            let ra = random_density(&la, &seed_a);
            let rb = random_density(&lb, &seed_b);
            let joint = DensityOperator::new(la.concat(&lb).unwrap(), ra.matrix().kronecker(rb.matrix())).unwrap();
            let back_a = joint.partial_trace(&["x"]).unwrap();
            let back_b = joint.partial_trace(&["y"]).unwrap();
            prop_assert!(linalg::max_abs_diff(back_a.matrix(), ra.matrix()) < 1e-12);
            prop_assert!(linalg::max_abs_diff(back_b.matrix(), rb.matrix()) < 1e-12);
            prop_assert!((joint.partial_trace(&["x", "y"]).unwrap().trace() - joint.trace()).norm() < 1e-12);
        }

        #[test]
        fn inner_is_conjugate_symmetric(v in prop::collection::vec(-1.0f64..1.0, 16)) {
            let l = SystemLayout::new([("p", 2), ("q", 2)]).unwrap();
            let x = StateVector::from_slice(l.clone(), &[C64::new(v[0], v[1]), C64::new(v[2], v[3]), C64::new(v[4], v[5]), C64::new(v[6], v[7])]).unwrap();
            let y = StateVector::from_slice(l, &[C64::new(v[8], v[9]), C64::new(v[10], v[11]), C64::new(v[12], v[13]), C64::new(v[14], v[15])]).unwrap();
            let xy = inner(&x, &y).unwrap();
            let yx = inner(&y, &x).unwrap();
            prop_assert!((xy - yx.conj()).norm() < 1e-14);
        }
    }
}

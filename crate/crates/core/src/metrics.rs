//! Fidelity, concurrence and physicality diagnostics.

use crate::dynamics::evolve_unitary;
use crate::error::{Error, Result};
use crate::hilbert::{inner, DensityOperator, StateVector, SystemLayout};
use crate::linalg::{hermitian_eigenvalues, hermitian_function, hermiticity_error, CMatrix, C64};
use crate::model::{
    effective_hamiltonian, full_hamiltonian_rotating, pulse_duration, PhysicalParams, PulseArea, FULL_LEVEL_F,
    FULL_LEVEL_G, LEVEL_F, LEVEL_G,
};

/// Largest tolerated imaginary part of `⟨ψ|ρ|ψ⟩`.
pub const FIDELITY_IMAG_TOL: f64 = 1e-10;

/// Relative eigenvalue floor used by [`concurrence`].
const SPECTRUM_FLOOR: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq)]
pub struct FidelityResult {
    pub value: f64,
    pub target_label: String,
    pub time: f64,
}

/// `⟨target|ρ|target⟩` for a normalized pure target.
pub fn fidelity(rho: &DensityOperator, target: &StateVector) -> Result<f64> {
    let norm = target.norm();
    if (norm - 1.0).abs() > 1e-9 {
        return Err(Error::Contract(format!("fidelity target has norm {norm}")));
    }
    let f = rho.expectation_in(target)?;
    if f.im.abs() > FIDELITY_IMAG_TOL {
        return Err(Error::Contract(format!(
            "fidelity has imaginary residue {:.3e}; is ρ Hermitian?",
            f.im
        )));
    }
    Ok(f.re)
}

impl FidelityResult {
    pub fn evaluate(rho: &DensityOperator, target: &StateVector, label: impl Into<String>, time: f64) -> Result<Self> {
        Ok(Self {
            value: fidelity(rho, target)?,
            target_label: label.into(),
            time,
        })
    }
}

/// `|⟨target|ψ⟩|²`.
pub fn fidelity_pure(psi: &StateVector, target: &StateVector) -> Result<f64> {
    Ok(inner(target, psi)?.norm_sqr())
}

/// Two-qubit concurrence `max(0, λ₁ − λ₂ − λ₃ − λ₄)`.
///
/// The λ are the square roots of the eigenvalues of `ρ ρ̃` with
/// `ρ̃ = (σ_y⊗σ_y) ρ* (σ_y⊗σ_y)`; they are the singular values of
/// `√ρ √ρ̃`. The trace of `ρ` is not
/// renormalized, so a subnormalized block gives a proportionally smaller
/// value.
pub fn concurrence(rho: &DensityOperator) -> Result<f64> {
    let dims: Vec<usize> = rho.layout().factors().iter().map(|f| f.dim).collect();
    if dims != [2, 2] {
        return Err(Error::Dimension {
            factor: rho.layout().to_string(),
            message: "concurrence needs a 2 ⊗ 2 density operator".into(),
        });
    }
    let m = rho.matrix();
    // σ_y ⊗ σ_y is real: anti-diagonal (−1, 1, 1, −1).
    let mut yy = CMatrix::zeros(4, 4);
    for (i, s) in [-1.0, 1.0, 1.0, -1.0].into_iter().enumerate() {
        yy[(i, 3 - i)] = C64::new(s, 0.0);
    }
    // Eigenvalues of ρ at rounding level are clamped before the square
    // root; otherwise they surface as ~1e-8 in the λ of product states.
    let floor = SPECTRUM_FLOOR * m.trace().re.abs().max(1.0);
    let sqrt_rho = hermitian_function(m, |l| C64::new(if l > floor { l.sqrt() } else { 0.0 }, 0.0));
    let sqrt_tilde = &yy * sqrt_rho.map(|z| z.conj()) * &yy;
    // λ are the singular values of √ρ √ρ̃.
    let mut lambdas: Vec<f64> = (&sqrt_rho * sqrt_tilde).singular_values().iter().copied().collect();
    lambdas.sort_by(|a, b| b.total_cmp(a));
    Ok((lambdas[0] - lambdas[1] - lambdas[2] - lambdas[3]).max(0.0))
}

/// Qubit index of the single-photon cavity states: `|1,0⟩ ↦ 0`, `|0,1⟩ ↦ 1`.
pub const QUBIT_OF_10: usize = 0;
pub const QUBIT_OF_01: usize = 1;

/// Projects the joint state of two cavities onto the one-photon-per-cavity
/// qubit encoding. Population outside the encoding (for instance after a
/// photon loss) is dropped, not renormalized.
pub fn encode_cavity_qubits(
    rho: &DensityOperator,
    first: (&str, &str),
    second: (&str, &str),
) -> Result<DensityOperator> {
    let modes = [first.0, first.1, second.0, second.1];
    let reduced = rho.partial_trace(&modes)?;
    let layout = reduced.layout().clone();
    let fock = |q: usize| if q == QUBIT_OF_10 { [1, 0] } else { [0, 1] };
    // The reduced layout follows the parent layout order; look positions up.
    let pos: Vec<usize> = modes.iter().map(|m| layout.position(m)).collect::<Result<_>>()?;
    let mut index = Vec::with_capacity(4);
    for q1 in 0..2 {
        for q2 in 0..2 {
            let mut digits = vec![0; 4];
            let [n1, m1] = fock(q1);
            let [n2, m2] = fock(q2);
            digits[pos[0]] = n1;
            digits[pos[1]] = m1;
            digits[pos[2]] = n2;
            digits[pos[3]] = m2;
            index.push(layout.encode(&digits)?);
        }
    }
    let m = CMatrix::from_fn(4, 4, |i, j| reduced.matrix()[(index[i], index[j])]);
    let qubits = SystemLayout::new([(label_of(first.0), 2), (label_of(second.0), 2)])?;
    DensityOperator::new(qubits, m)
}

fn label_of(mode: &str) -> String {
    mode.split('.').next().unwrap_or(mode).to_string()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiagnosticsReport {
    pub trace_error: f64,
    pub hermiticity_error: f64,
    pub min_eigenvalue: f64,
    pub purity: f64,
}

pub fn diagnostics(rho: &DensityOperator) -> DiagnosticsReport {
    let m = rho.matrix();
    let trace_error = (m.trace() - C64::new(1.0, 0.0)).norm();
    let herm = hermiticity_error(m);
    let min_eigenvalue = hermitian_eigenvalues(m).first().copied().unwrap_or(0.0);
    // tr ρ² = Σ ρ_ij ρ_ji
    let purity = (m * m).trace().re;
    DiagnosticsReport {
        trace_error,
        hermiticity_error: herm,
        min_eigenvalue,
        purity,
    }
}

pub fn purity(rho: &DensityOperator) -> f64 {
    let m = rho.matrix();
    (m * m).trace().re
}

/// Infidelity between the dispersive and the full three-level evolution of
/// `input` over one pulse, up to a global phase.
///
/// `input` lives on `atom(2) ⊗ a ⊗ b` inside the single-excitation subspace;
/// it is lifted into the three-level space with an empty `|e⟩`.
pub fn model_discrepancy(params: &PhysicalParams, pulse: PulseArea, input: &StateVector) -> Result<f64> {
    if !params.is_dispersive() {
        return Err(Error::Unsupported(format!(
            "Δ = {} is outside the dispersive regime",
            params.delta
        )));
    }
    let layout = input.layout();
    let dim_a = layout.factor_dim("a")?;
    let dim_b = layout.factor_dim("b")?;
    if layout.factor_dim("atom")? != 2 || layout.factors().len() != 3 {
        return Err(Error::Layout(format!("expected atom(2) ⊗ a ⊗ b, got {layout}")));
    }
    let mut outside = 0.0;
    for (k, amp) in input.amplitudes().iter().enumerate() {
        let d = layout.decode(k);
        if d[1] + d[2] != 1 {
            outside += amp.norm_sqr();
        }
    }
    if outside > 1e-12 {
        return Err(Error::Domain(format!(
            "input has weight {outside:.3e} outside the single-excitation subspace"
        )));
    }

    let full_layout = SystemLayout::new([("atom", 3), ("a", dim_a), ("b", dim_b)])?;
    let lift = |psi: &StateVector| -> Result<StateVector> {
        let mut out = StateVector::zeros(full_layout.clone()).amplitudes().clone();
        for (k, amp) in psi.amplitudes().iter().enumerate() {
            let d = layout.decode(k);
            let level = if d[0] == LEVEL_G { FULL_LEVEL_G } else { FULL_LEVEL_F };
            debug_assert!(d[0] == LEVEL_G || d[0] == LEVEL_F);
            out[full_layout.encode(&[level, d[1], d[2]])?] = *amp;
        }
        StateVector::new(full_layout.clone(), out)
    };

    let t = pulse_duration(params, pulse);
    let eff = evolve_unitary(&effective_hamiltonian(params, layout)?, input, t)?;
    let full = evolve_unitary(&full_hamiltonian_rotating(params, &full_layout)?, &lift(input)?, t)?;
    Ok(1.0 - fidelity_pure(&full, &lift(&eff)?)?)
}

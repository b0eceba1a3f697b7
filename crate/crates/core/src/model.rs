//! Hamiltonians, collapse operators, closed-form amplitudes and pulse timing
//! for a Λ atom crossing a two-mode cavity.
//!
//! Everything is dimensionless: energies in units of ħg, times in units of
//! 1/g, with ħ = 1. [`LabParameters`] converts laboratory values in and out.
//!
//! Atom level indices: the two-level (dispersive) atom uses `g = 0, f = 1`;
//! the three-level atom of the full model uses `g = 0, e = 1, f = 2`.

use std::f64::consts::{FRAC_PI_2, PI};

use crate::dynamics::Dissipator;
use crate::error::{Error, Result};
use crate::hilbert::{embed, embed_factors, tensor, OperatorMatrix, SystemLayout};
use crate::linalg::{C64, I};

pub const LEVEL_G: usize = 0;
pub const LEVEL_F: usize = 1;

pub const FULL_LEVEL_G: usize = 0;
pub const FULL_LEVEL_E: usize = 1;
pub const FULL_LEVEL_F: usize = 2;

/// Default Fock cutoff: photon numbers {0, 1} per mode.
pub const DEFAULT_FOCK_DIM: usize = 2;

/// Below this Δ / max(g) the dispersive description is flagged.
pub const DISPERSIVE_RATIO: f64 = 5.0;

/// Bound on population able to reach the Fock cutoff.
pub const LEAKAGE_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysicalParams {
    pub g1: f64,
    pub g2: f64,
    pub delta: f64,
    pub kappa_a: f64,
    pub kappa_b: f64,
    /// Transition and mode frequencies. Only the rotating-frame reduction
    /// uses them; the simulation itself works with `delta`.
    pub omega_eg: f64,
    pub omega_fg: f64,
    pub omega_1: f64,
    pub omega_2: f64,
}

impl PhysicalParams {
    /// `g1 = g2 = 1`, `Δ = delta_over_g`, `κ_a = κ_b = kappa_over_g`.
    pub fn dimensionless(delta_over_g: f64, kappa_over_g: f64) -> Result<Self> {
        let p = Self {
            g1: 1.0,
            g2: 1.0,
            delta: delta_over_g,
            kappa_a: kappa_over_g,
            kappa_b: kappa_over_g,
            omega_eg: 0.0,
            omega_fg: 0.0,
            omega_1: 0.0,
            omega_2: 0.0,
        };
        p.validate()?;
        Ok(p)
    }

    /// Builds parameters from lab-frame frequencies under two-photon
    /// resonance `ω_fg = ω₁ − ω₂`; then `Δ = ω_eg − ω₁`.
    pub fn from_frequencies(
        omega_eg: f64,
        omega_fg: f64,
        omega_1: f64,
        omega_2: f64,
        g1: f64,
        g2: f64,
        kappa: f64,
    ) -> Result<Self> {
        let mismatch = omega_fg - (omega_1 - omega_2);
        if mismatch.abs() > 1e-9 * omega_eg.abs().max(1.0) {
            return Err(Error::Unsupported(format!(
                "two-photon resonance violated by {mismatch:e}"
            )));
        }
        let p = Self {
            g1,
            g2,
            delta: omega_eg - omega_1,
            kappa_a: kappa,
            kappa_b: kappa,
            omega_eg,
            omega_fg,
            omega_1,
            omega_2,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_kappa(mut self, kappa: f64) -> Self {
        self.kappa_a = kappa;
        self.kappa_b = kappa;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.g1 > 0.0 && self.g2 > 0.0) {
            return Err(Error::Parameter(format!(
                "couplings must be positive (g1 = {}, g2 = {})",
                self.g1, self.g2
            )));
        }
        if !(self.delta > 0.0) {
            return Err(Error::Parameter(format!(
                "detuning must be positive, got {}",
                self.delta
            )));
        }
        if !(self.kappa_a >= 0.0 && self.kappa_b >= 0.0) {
            return Err(Error::Parameter(format!(
                "decay constants must be non-negative (κ_a = {}, κ_b = {})",
                self.kappa_a, self.kappa_b
            )));
        }
        if !self.is_dispersive() {
            log::warn!(
                "Δ = {} is below {}·max(g1, g2); the dispersive description is questionable",
                self.delta,
                DISPERSIVE_RATIO
            );
        }
        Ok(())
    }

    pub fn is_dispersive(&self) -> bool {
        self.delta >= DISPERSIVE_RATIO * self.g1.max(self.g2)
    }

    /// The common coupling `g`; the effective and qubit forms need `g1 = g2`.
    pub fn common_coupling(&self) -> Result<f64> {
        if (self.g1 - self.g2).abs() > 1e-12 {
            return Err(Error::Unsupported(format!(
                "effective model assumes g1 = g2 (got {} and {})",
                self.g1, self.g2
            )));
        }
        Ok(self.g1)
    }

    /// Effective two-photon coupling `g²/Δ`.
    pub fn effective_coupling(&self) -> Result<f64> {
        let g = self.common_coupling()?;
        Ok(g * g / self.delta)
    }
}

/// Laboratory parameters: coupling and decay given as ordinary frequencies
/// (Hz, so the angular values carry a 2π), detuning given relative to g.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabParameters {
    pub g_over_2pi_hz: f64,
    pub kappa_over_2pi_hz: f64,
    pub delta_over_g: f64,
}

impl LabParameters {
    /// g = 2π × 50 kHz, κ = 2π × 100 Hz, Δ = 10 g.
    pub fn microwave_reference() -> Self {
        Self {
            g_over_2pi_hz: 50e3,
            kappa_over_2pi_hz: 100.0,
            delta_over_g: 10.0,
        }
    }

    pub fn to_dimensionless(&self) -> Result<PhysicalParams> {
        if !(self.g_over_2pi_hz > 0.0) {
            return Err(Error::Parameter("coupling frequency must be positive".into()));
        }
        PhysicalParams::dimensionless(self.delta_over_g, self.kappa_over_2pi_hz / self.g_over_2pi_hz)
    }

    fn g_rad_per_s(&self) -> f64 {
        2.0 * PI * self.g_over_2pi_hz
    }

    pub fn to_seconds(&self, t: f64) -> f64 {
        t / self.g_rad_per_s()
    }

    pub fn to_dimensionless_time(&self, seconds: f64) -> f64 {
        seconds * self.g_rad_per_s()
    }
}

/// Labels of the atom and the two cavity modes taking part in one transit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Site {
    pub atom: String,
    pub mode_a: String,
    pub mode_b: String,
}

impl Default for Site {
    fn default() -> Self {
        Self {
            atom: "atom".into(),
            mode_a: "a".into(),
            mode_b: "b".into(),
        }
    }
}

impl Site {
    /// Atom `atom` inside cavity `cavity`, whose modes are `<cavity>.a` and
    /// `<cavity>.b`.
    pub fn new(atom: &str, cavity: &str) -> Self {
        Self {
            atom: atom.into(),
            mode_a: mode_a_label(cavity),
            mode_b: mode_b_label(cavity),
        }
    }

    pub fn labels(&self) -> [&str; 3] {
        [&self.atom, &self.mode_a, &self.mode_b]
    }

    fn dims(&self, layout: &SystemLayout) -> Result<(usize, usize, usize)> {
        Ok((
            layout.factor_dim(&self.atom)?,
            layout.factor_dim(&self.mode_a)?,
            layout.factor_dim(&self.mode_b)?,
        ))
    }
}

pub fn mode_a_label(cavity: &str) -> String {
    format!("{cavity}.a")
}

pub fn mode_b_label(cavity: &str) -> String {
    format!("{cavity}.b")
}

/// `|g⟩⟨g|, …` style atom ket-bras plus Fock operators for one site.
struct LocalOps {
    atom_dim: usize,
    dim_a: usize,
    dim_b: usize,
}

impl LocalOps {
    fn atom(&self, row: usize, col: usize) -> Result<OperatorMatrix> {
        OperatorMatrix::ket_bra("atom", self.atom_dim, row, col)
    }
    fn a(&self) -> Result<OperatorMatrix> {
        OperatorMatrix::annihilation("a", self.dim_a)
    }
    fn b(&self) -> Result<OperatorMatrix> {
        OperatorMatrix::annihilation("b", self.dim_b)
    }
    fn id_a(&self) -> Result<OperatorMatrix> {
        Ok(OperatorMatrix::identity(SystemLayout::single("a", self.dim_a)?))
    }
    fn id_b(&self) -> Result<OperatorMatrix> {
        Ok(OperatorMatrix::identity(SystemLayout::single("b", self.dim_b)?))
    }
    fn term(&self, atom: OperatorMatrix, a: OperatorMatrix, b: OperatorMatrix) -> Result<OperatorMatrix> {
        tensor(&tensor(&atom, &a)?, &b)
    }
}

/// Dispersive Hamiltonian
/// `−(g²/Δ)[|g⟩⟨g|a†a + |f⟩⟨f|b†b + |g⟩⟨f|a†b + |f⟩⟨g|ab†]`
/// on a layout with factors `atom`, `a`, `b`.
pub fn effective_hamiltonian(params: &PhysicalParams, layout: &SystemLayout) -> Result<OperatorMatrix> {
    effective_hamiltonian_at(params, layout, &Site::default())
}

pub fn effective_hamiltonian_at(params: &PhysicalParams, layout: &SystemLayout, site: &Site) -> Result<OperatorMatrix> {
    let local = local_effective_hamiltonian(params, layout, site)?;
    embed_factors(&local, layout, &site.labels())
}

/// The dispersive Hamiltonian on the site's own `atom ⊗ a ⊗ b` space.
pub fn local_effective_hamiltonian(
    params: &PhysicalParams,
    layout: &SystemLayout,
    site: &Site,
) -> Result<OperatorMatrix> {
    let chi = params.effective_coupling()?;
    let (atom_dim, dim_a, dim_b) = site.dims(layout)?;
    if atom_dim != 2 {
        return Err(Error::Dimension {
            factor: site.atom.clone(),
            message: format!("dispersive model needs a two-level atom {{g, f}}, got dimension {atom_dim}"),
        });
    }
    let ops = LocalOps { atom_dim, dim_a, dim_b };
    let a = ops.a()?;
    let b = ops.b()?;
    let n_a = a.adjoint().mul(&a)?;
    let n_b = b.adjoint().mul(&b)?;
    let h = ops
        .term(ops.atom(LEVEL_G, LEVEL_G)?, n_a, ops.id_b()?)?
        .add(&ops.term(ops.atom(LEVEL_F, LEVEL_F)?, ops.id_a()?, n_b)?)?
        .add(&ops.term(ops.atom(LEVEL_G, LEVEL_F)?, a.adjoint(), b.clone())?)?
        .add(&ops.term(ops.atom(LEVEL_F, LEVEL_G)?, a, b.adjoint())?)?;
    Ok(h.scaled(C64::new(-chi, 0.0)))
}

/// Rotating-frame Hamiltonian of the three-level atom,
/// `Δ|e⟩⟨e| + g1(|e⟩⟨g|a + h.c.) + g2(|e⟩⟨f|b + h.c.)`.
pub fn full_hamiltonian_rotating(params: &PhysicalParams, layout: &SystemLayout) -> Result<OperatorMatrix> {
    full_hamiltonian_rotating_at(params, layout, &Site::default())
}

pub fn full_hamiltonian_rotating_at(
    params: &PhysicalParams,
    layout: &SystemLayout,
    site: &Site,
) -> Result<OperatorMatrix> {
    let (atom_dim, dim_a, dim_b) = site.dims(layout)?;
    if atom_dim != 3 {
        return Err(Error::Dimension {
            factor: site.atom.clone(),
            message: format!("full model needs a three-level atom {{g, e, f}}, got dimension {atom_dim}"),
        });
    }
    let ops = LocalOps { atom_dim, dim_a, dim_b };
    let detuning = ops
        .term(ops.atom(FULL_LEVEL_E, FULL_LEVEL_E)?, ops.id_a()?, ops.id_b()?)?
        .scaled(C64::new(params.delta, 0.0));
    let couple_a = ops
        .term(ops.atom(FULL_LEVEL_E, FULL_LEVEL_G)?, ops.a()?, ops.id_b()?)?
        .scaled(C64::new(params.g1, 0.0));
    let couple_b = ops
        .term(ops.atom(FULL_LEVEL_E, FULL_LEVEL_F)?, ops.id_a()?, ops.b()?)?
        .scaled(C64::new(params.g2, 0.0));
    let h = detuning
        .add(&couple_a)?
        .add(&couple_a.adjoint())?
        .add(&couple_b)?
        .add(&couple_b.adjoint())?;
    embed_factors(&h, layout, &site.labels())
}

/// `N = a†a + b†b + |e⟩⟨e|`, conserved by the full Hamiltonian.
pub fn excitation_number(layout: &SystemLayout) -> Result<OperatorMatrix> {
    let site = Site::default();
    let (atom_dim, dim_a, dim_b) = site.dims(layout)?;
    if atom_dim != 3 {
        return Err(Error::Dimension {
            factor: site.atom.clone(),
            message: "excitation number is defined for the three-level atom".into(),
        });
    }
    let a = OperatorMatrix::annihilation("a", dim_a)?;
    let b = OperatorMatrix::annihilation("b", dim_b)?;
    let e = OperatorMatrix::ket_bra("atom", 3, FULL_LEVEL_E, FULL_LEVEL_E)?;
    embed(&a.adjoint().mul(&a)?, layout, "a")?
        .add(&embed(&b.adjoint().mul(&b)?, layout, "b")?)?
        .add(&embed(&e, layout, "atom")?)
}

/// Layout of the two-qubit form: atom `{g, f}` ⊗ field `{|1,0⟩, |0,1⟩}`.
pub fn qubit_layout() -> SystemLayout {
    SystemLayout::new([("atom", 2), ("field", 2)]).expect("static layout")
}

/// Index of `|1,0⟩` and `|0,1⟩` in the field qubit.
pub const FIELD_10: usize = 0;
pub const FIELD_01: usize = 1;

/// `−(g²/Δ)(R⁺S⁻ + R⁻S⁺ − 2RᶻSᶻ)` with `S⁺ = |f⟩⟨g|`, `R⁺ = a†b`.
pub fn qubit_hamiltonian(params: &PhysicalParams) -> Result<OperatorMatrix> {
    let chi = params.effective_coupling()?;
    let s_plus = OperatorMatrix::ket_bra("atom", 2, LEVEL_F, LEVEL_G)?;
    let s_minus = s_plus.adjoint();
    let s_z = OperatorMatrix::ket_bra("atom", 2, LEVEL_F, LEVEL_F)?
        .add(&OperatorMatrix::ket_bra("atom", 2, LEVEL_G, LEVEL_G)?.scaled(C64::new(-1.0, 0.0)))?
        .scaled(C64::new(0.5, 0.0));
    // a†b takes |0,1⟩ to |1,0⟩.
    let r_plus = OperatorMatrix::ket_bra("field", 2, FIELD_10, FIELD_01)?;
    let r_minus = r_plus.adjoint();
    let r_z = OperatorMatrix::ket_bra("field", 2, FIELD_10, FIELD_10)?
        .add(&OperatorMatrix::ket_bra("field", 2, FIELD_01, FIELD_01)?.scaled(C64::new(-1.0, 0.0)))?
        .scaled(C64::new(0.5, 0.0));
    let h = tensor(&s_minus, &r_plus)?
        .add(&tensor(&s_plus, &r_minus)?)?
        .add(&tensor(&s_z, &r_z)?.scaled(C64::new(-2.0, 0.0)))?;
    Ok(h.scaled(C64::new(-chi, 0.0)))
}

/// Constant `c` with `H_qubit = H_eff|single-excitation + c·I`, namely
/// `g²/(2Δ)`.
pub fn qubit_form_offset(params: &PhysicalParams) -> Result<f64> {
    Ok(params.effective_coupling()? / 2.0)
}

/// Restricts an `atom(2) ⊗ a(2) ⊗ b(2)` operator to the single-excitation
/// block, ordered like [`qubit_layout`].
pub fn restrict_to_single_excitation(op: &OperatorMatrix) -> Result<OperatorMatrix> {
    let layout = op.layout();
    let field = |k: usize| if k == FIELD_10 { [1, 0] } else { [0, 1] };
    let mut idx = Vec::with_capacity(4);
    for atom in [LEVEL_G, LEVEL_F] {
        for f in [FIELD_10, FIELD_01] {
            let [n, mu] = field(f);
            idx.push(layout.encode(&[atom, n, mu])?);
        }
    }
    let m = nalgebra::DMatrix::from_fn(4, 4, |i, j| op.matrix()[(idx[i], idx[j])]);
    OperatorMatrix::new(qubit_layout(), m)
}

/// Photon-loss channels `[(a, κ_a), (b, κ_b)]` on the default site.
pub fn collapse_operators(params: &PhysicalParams, layout: &SystemLayout) -> Result<Vec<Dissipator>> {
    let site = Site::default();
    collapse_operators_for(params, layout, &site.mode_a, &site.mode_b)
}

pub fn collapse_operators_for(
    params: &PhysicalParams,
    layout: &SystemLayout,
    mode_a: &str,
    mode_b: &str,
) -> Result<Vec<Dissipator>> {
    let a = OperatorMatrix::annihilation(mode_a, layout.factor_dim(mode_a)?)?;
    let b = OperatorMatrix::annihilation(mode_b, layout.factor_dim(mode_b)?)?;
    Ok(vec![
        Dissipator::new(embed(&a, layout, mode_a)?, params.kappa_a)?,
        Dissipator::new(embed(&b, layout, mode_b)?, params.kappa_b)?,
    ])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosedFormInput {
    n: usize,
    mu: usize,
    dg0: C64,
    df0: C64,
}

impl ClosedFormInput {
    /// `n` photons in mode a and `mu` in mode b, paired with
    /// `|f, n−1, μ+1⟩`.
    pub fn new(n: usize, mu: usize, dg0: C64, df0: C64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Domain("n = 0 has no paired state |f, n−1, μ+1⟩".into()));
        }
        let norm = dg0.norm_sqr() + df0.norm_sqr();
        if (norm - 1.0).abs() > 1e-12 {
            return Err(Error::Domain(format!("|dg0|² + |df0|² = {norm}, expected 1")));
        }
        Ok(Self { n, mu, dg0, df0 })
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn mu(&self) -> usize {
        self.mu
    }
    pub fn initial(&self) -> (C64, C64) {
        (self.dg0, self.df0)
    }
}

/// Analytic amplitudes of `|g,n,μ⟩` and `|f,n−1,μ+1⟩` after time `t`.
pub fn closed_form_amplitudes(input: &ClosedFormInput, t: f64, params: &PhysicalParams) -> Result<(C64, C64)> {
    let chi = params.effective_coupling()?;
    let n = input.n as f64;
    let m1 = input.mu as f64 + 1.0;
    let total = n + m1;
    let x = n.sqrt() * input.dg0 + m1.sqrt() * input.df0;
    let y = (I * (chi * total * t)).exp() - 1.0;
    let xy = x * y / total;
    Ok((n.sqrt() * xy + input.dg0, m1.sqrt() * xy + input.df0))
}

/// Dimensionless pulse area `2g²T/Δ`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct PulseArea(f64);

impl PulseArea {
    pub const PI: PulseArea = PulseArea(PI);
    pub const HALF_PI: PulseArea = PulseArea(FRAC_PI_2);

    pub fn new(area: f64) -> Result<Self> {
        if !(area > 0.0) || !area.is_finite() {
            return Err(Error::Parameter(format!("pulse area must be positive, got {area}")));
        }
        Ok(Self(area))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Transit time for a pulse of the given area: `T = area·Δ/(2 g1 g2)`.
pub fn pulse_duration(params: &PhysicalParams, area: PulseArea) -> f64 {
    area.0 * params.delta / (2.0 * params.g1 * params.g2)
}

/// Population on basis states whose photons in some cavity exceed what one
/// mode can hold. Below [`LEAKAGE_TOL`] the Fock truncation is exact for
/// excitation-conserving transits.
pub fn truncation_leakage(layout: &SystemLayout, populations: &[f64], cavities: &[(&str, &str)]) -> Result<f64> {
    let mut slots = Vec::with_capacity(cavities.len());
    for (ma, mb) in cavities {
        let pa = layout.position(ma)?;
        let pb = layout.position(mb)?;
        let cap = layout.factors()[pa].dim.min(layout.factors()[pb].dim) - 1;
        slots.push((pa, pb, cap));
    }
    let mut leak = 0.0;
    for (k, &p) in populations.iter().enumerate() {
        let digits = layout.decode(k);
        if slots.iter().any(|&(pa, pb, cap)| digits[pa] + digits[pb] > cap) {
            leak += p;
        }
    }
    Ok(leak)
}

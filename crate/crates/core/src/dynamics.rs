//! Closed and open time evolution, and a sequencer for atom transits and
//! free delays.
//!
//! The open-system generator is
//!
//! ```text
//! dρ/dt = −i[H, ρ] − Σ_x κ_x (x†xρ − 2xρx† + ρx†x)
//! ```
//!
//! so a one-photon Fock state decays as `exp(−2κt)`. It is integrated with
//! fixed-step classical RK4; there is no step-size control, which keeps every
//! run bit-reproducible.

use crate::error::{Error, Result};
use crate::hilbert::{DensityOperator, OperatorMatrix, StateVector, SystemLayout};
use crate::linalg::{hermitian_function, hermiticity_error, CMatrix, C64, ZERO};
use crate::metrics::{diagnostics, DiagnosticsReport};

/// Trace drift beyond which a step size is rejected.
pub const MAX_TRACE_DRIFT: f64 = 1e-4;

/// Checkpoint tolerances for a healthy run.
pub const TRACE_TOL: f64 = 1e-6;
pub const HERMITICITY_TOL: f64 = 1e-8;
pub const POSITIVITY_TOL: f64 = 1e-8;

/// Default number of RK4 steps per π-pulse duration.
pub const DEFAULT_STEPS_PER_PULSE: usize = 2000;

/// A photon-loss channel `x` with decay constant `κ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dissipator {
    pub operator: OperatorMatrix,
    pub rate: f64,
}

impl Dissipator {
    pub fn new(operator: OperatorMatrix, rate: f64) -> Result<Self> {
        if !(rate >= 0.0) || !rate.is_finite() {
            return Err(Error::Parameter(format!("decay rate must be non-negative, got {rate}")));
        }
        Ok(Self { operator, rate })
    }
}

/// `exp(−iHt)` through the eigendecomposition of `H`.
pub fn propagator(h: &OperatorMatrix, t: f64) -> Result<OperatorMatrix> {
    if !h.is_hermitian() {
        return Err(Error::Contract("unitary evolution needs a Hermitian generator".into()));
    }
    let u = hermitian_function(h.matrix(), |lambda| C64::from_polar(1.0, -lambda * t));
    OperatorMatrix::new(h.layout().clone(), u)
}

pub fn evolve_unitary(h: &OperatorMatrix, psi: &StateVector, t: f64) -> Result<StateVector> {
    if h.layout() != psi.layout() {
        return Err(Error::Layout(format!(
            "Hamiltonian on {} applied to a state on {}",
            h.layout(),
            psi.layout()
        )));
    }
    propagator(h, t)?.apply(psi)
}

/// Nonzero entries of an operator, used to form products with ρ cheaply.
#[derive(Debug, Clone)]
struct SparseOp {
    entries: Vec<(usize, usize, C64)>,
}

impl SparseOp {
    fn from_dense(m: &CMatrix) -> Self {
        let mut entries = Vec::new();
        for j in 0..m.ncols() {
            for i in 0..m.nrows() {
                let v = m[(i, j)];
                if v != ZERO {
                    entries.push((i, j, v));
                }
            }
        }
        Self { entries }
    }

    /// `out += scale · S · ρ`
    fn add_left(&self, rho: &CMatrix, scale: C64, out: &mut CMatrix) {
        let n = rho.ncols();
        for &(i, k, v) in &self.entries {
            let w = scale * v;
            for j in 0..n {
                out[(i, j)] += w * rho[(k, j)];
            }
        }
    }

    /// `out += scale · ρ · S†`
    fn add_right_adjoint(&self, rho: &CMatrix, scale: C64, out: &mut CMatrix) {
        let n = rho.nrows();
        for &(j, k, v) in &self.entries {
            let w = scale * v.conj();
            let src = rho.column(k).into_owned();
            let mut dst = out.column_mut(j);
            for i in 0..n {
                dst[i] += w * src[i];
            }
        }
    }
}

/// Lindblad generator in the form `−i(Kρ − ρK†) + Σ 2κ xρx†` with the
/// non-Hermitian `K = H − iΣ κ x†x`.
#[derive(Debug, Clone)]
pub struct LindbladGenerator {
    dim: usize,
    k: SparseOp,
    jumps: Vec<(SparseOp, f64)>,
}

impl LindbladGenerator {
    pub fn new(h: &OperatorMatrix, dissipators: &[Dissipator]) -> Result<Self> {
        if !h.is_hermitian() {
            return Err(Error::Contract(
                "Lindblad generator needs a Hermitian Hamiltonian".into(),
            ));
        }
        let mut k = h.matrix().clone();
        let mut jumps = Vec::new();
        for d in dissipators {
            if d.operator.layout() != h.layout() {
                return Err(Error::Layout(format!(
                    "dissipator on {} with Hamiltonian on {}",
                    d.operator.layout(),
                    h.layout()
                )));
            }
            if d.rate == 0.0 {
                continue;
            }
            let x = d.operator.matrix();
            k -= (x.adjoint() * x) * C64::new(0.0, d.rate);
            jumps.push((SparseOp::from_dense(x), 2.0 * d.rate));
        }
        Ok(Self {
            dim: h.dim(),
            k: SparseOp::from_dense(&k),
            jumps,
        })
    }

    pub fn apply(&self, rho: &CMatrix) -> CMatrix {
        let n = self.dim;
        let mut out = CMatrix::zeros(n, n);
        let minus_i = C64::new(0.0, -1.0);
        self.k.add_left(rho, minus_i, &mut out);
        self.k.add_right_adjoint(rho, -minus_i, &mut out);
        if !self.jumps.is_empty() {
            let mut tmp = CMatrix::zeros(n, n);
            for (x, rate) in &self.jumps {
                tmp.fill(ZERO);
                x.add_left(rho, C64::new(1.0, 0.0), &mut tmp);
                x.add_right_adjoint(&tmp, C64::new(*rate, 0.0), &mut out);
            }
        }
        out
    }

    pub fn rk4_step(&self, rho: &CMatrix, h: f64) -> CMatrix {
        let half = C64::new(0.5 * h, 0.0);
        let full = C64::new(h, 0.0);
        let k1 = self.apply(rho);
        let k2 = self.apply(&(rho + &k1 * half));
        let k3 = self.apply(&(rho + &k2 * half));
        let k4 = self.apply(&(rho + &k3 * full));
        rho + (k1 + (k2 + k3) * C64::new(2.0, 0.0) + k4) * C64::new(h / 6.0, 0.0)
    }
}

/// Number of equal RK4 steps of size at most `dt` covering `t`.
fn step_count(t: f64, dt: f64) -> usize {
    if t == 0.0 {
        return 0;
    }
    ((t / dt) * (1.0 - 1e-12)).ceil().max(1.0) as usize
}

/// Integrates without the final symmetrization; returns the raw matrix.
fn integrate_raw(generator: &LindbladGenerator, rho: &CMatrix, t: f64, dt: f64) -> Result<CMatrix> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::Parameter(format!("time step must be positive, got {dt}")));
    }
    if !(t >= 0.0) || !t.is_finite() {
        return Err(Error::Parameter(format!("duration must be non-negative, got {t}")));
    }
    let steps = step_count(t, dt);
    let trace0 = rho.trace();
    let mut state = rho.clone();
    if steps > 0 {
        let h = t / steps as f64;
        for _ in 0..steps {
            state = generator.rk4_step(&state, h);
        }
    }
    let drift = (state.trace() - trace0).norm();
    if !drift.is_finite() || drift > MAX_TRACE_DRIFT {
        return Err(Error::Integration(format!(
            "trace drifted by {drift:.3e} over t = {t}; use a smaller time step than {dt}"
        )));
    }
    Ok(state)
}

/// Fixed-step RK4 integration of the master equation over `t`. The result is
/// symmetrized once at the end; the trace is never renormalized.
pub fn evolve_lindblad(
    h: &OperatorMatrix,
    dissipators: &[Dissipator],
    rho: &DensityOperator,
    t: f64,
    dt: f64,
) -> Result<DensityOperator> {
    if h.layout() != rho.layout() {
        return Err(Error::Layout(format!(
            "Hamiltonian on {} applied to a state on {}",
            h.layout(),
            rho.layout()
        )));
    }
    let generator = LindbladGenerator::new(h, dissipators)?;
    let raw = integrate_raw(&generator, rho.matrix(), t, dt)?;
    Ok(DensityOperator::new(rho.layout().clone(), raw)?.hermitized())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentKind {
    AtomInCavity,
    FreeDelay,
}

#[derive(Debug, Clone)]
pub struct Segment {
    pub kind: SegmentKind,
    pub duration: f64,
    pub hamiltonian: OperatorMatrix,
    pub dissipators: Vec<Dissipator>,
}

impl Segment {
    pub fn atom_in_cavity(hamiltonian: OperatorMatrix, duration: f64, dissipators: Vec<Dissipator>) -> Result<Self> {
        Self::checked(SegmentKind::AtomInCavity, hamiltonian, duration, dissipators)
    }

    /// A delay: no Hamiltonian in the rotating frame, cavities keep decaying.
    pub fn free_delay(layout: &SystemLayout, duration: f64, dissipators: Vec<Dissipator>) -> Result<Self> {
        Self::checked(
            SegmentKind::FreeDelay,
            OperatorMatrix::zeros(layout.clone()),
            duration,
            dissipators,
        )
    }

    fn checked(
        kind: SegmentKind,
        hamiltonian: OperatorMatrix,
        duration: f64,
        dissipators: Vec<Dissipator>,
    ) -> Result<Self> {
        if !(duration >= 0.0) || !duration.is_finite() {
            return Err(Error::Parameter(format!(
                "segment duration must be non-negative, got {duration}"
            )));
        }
        Ok(Self {
            kind,
            duration,
            hamiltonian,
            dissipators,
        })
    }

    pub fn layout(&self) -> &SystemLayout {
        self.hamiltonian.layout()
    }
}

#[derive(Debug, Clone)]
pub struct Schedule {
    segments: Vec<Segment>,
    labels: Vec<Option<String>>,
}

impl Schedule {
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        let labels = vec![None; segments.len()];
        Self::with_labels(segments, labels)
    }

    /// `labels[k]` names the checkpoint taken after segment `k`.
    pub fn with_labels(segments: Vec<Segment>, labels: Vec<Option<String>>) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::Parameter("a schedule needs at least one segment".into()));
        }
        if labels.len() != segments.len() {
            return Err(Error::Parameter(format!(
                "{} checkpoint labels for {} segments",
                labels.len(),
                segments.len()
            )));
        }
        Ok(Self { segments, labels })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn label(&self, k: usize) -> String {
        self.labels
            .get(k)
            .cloned()
            .flatten()
            .unwrap_or_else(|| format!("segment-{k}"))
    }

    pub fn total_duration(&self) -> f64 {
        self.segments.iter().map(|s| s.duration).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentDiagnostics {
    pub label: String,
    /// Largest `|ρ − ρ†|` entry before the end-of-segment symmetrization.
    pub hermiticity_drift: f64,
    pub report: DiagnosticsReport,
}

impl SegmentDiagnostics {
    pub fn within_tolerance(&self) -> bool {
        self.report.trace_error < TRACE_TOL
            && self.hermiticity_drift < HERMITICITY_TOL
            && self.report.hermiticity_error < HERMITICITY_TOL
            && self.report.min_eigenvalue >= -POSITIVITY_TOL
    }
}

#[derive(Debug, Clone)]
pub struct EvolutionResult {
    pub final_state: DensityOperator,
    pub checkpoints: Vec<(String, DensityOperator)>,
    pub diagnostics: Vec<SegmentDiagnostics>,
}

impl EvolutionResult {
    pub fn within_tolerance(&self) -> bool {
        self.diagnostics.iter().all(SegmentDiagnostics::within_tolerance)
    }
}

fn check_segment_layout(segment: &Segment, layout: &SystemLayout) -> Result<()> {
    if segment.layout() != layout {
        return Err(Error::Layout(format!(
            "segment on {} does not match state layout {layout}",
            segment.layout()
        )));
    }
    Ok(())
}

/// Runs every segment in order with RK4 steps of at most `dt`, recording a
/// checkpoint after each segment.
pub fn run_schedule(initial: &DensityOperator, schedule: &Schedule, dt: f64) -> Result<EvolutionResult> {
    let layout = initial.layout().clone();
    let mut rho = initial.matrix().clone();
    let mut checkpoints = Vec::with_capacity(schedule.segments.len());
    let mut diags = Vec::with_capacity(schedule.segments.len());
    for (k, segment) in schedule.segments.iter().enumerate() {
        check_segment_layout(segment, &layout)?;
        let generator = LindbladGenerator::new(&segment.hamiltonian, &segment.dissipators)?;
        let raw = integrate_raw(&generator, &rho, segment.duration, dt)?;
        let drift = hermiticity_error(&raw);
        let state = DensityOperator::new(layout.clone(), raw)?.hermitized();
        let label = schedule.label(k);
        diags.push(SegmentDiagnostics {
            label: label.clone(),
            hermiticity_drift: drift,
            report: diagnostics(&state),
        });
        rho = state.matrix().clone();
        checkpoints.push((label, state));
    }
    Ok(EvolutionResult {
        final_state: DensityOperator::new(layout, rho)?,
        checkpoints,
        diagnostics: diags,
    })
}

/// Closed-system counterpart of [`run_schedule`]: composes the segment
/// propagators on a pure state. Rejects segments with active dissipators.
pub fn run_schedule_unitary(initial: &StateVector, schedule: &Schedule) -> Result<Vec<(String, StateVector)>> {
    let mut psi = initial.clone();
    let mut trail = Vec::with_capacity(schedule.segments.len());
    for (k, segment) in schedule.segments.iter().enumerate() {
        check_segment_layout(segment, initial.layout())?;
        if segment.dissipators.iter().any(|d| d.rate != 0.0) {
            return Err(Error::Contract("unitary schedule run with active dissipators".into()));
        }
        if segment.kind == SegmentKind::AtomInCavity && segment.duration > 0.0 {
            psi = evolve_unitary(&segment.hamiltonian, &psi, segment.duration)?;
        }
        trail.push((schedule.label(k), psi.clone()));
    }
    Ok(trail)
}

//! Transfer, networking, entanglement-spreading and memory protocols.
//!
//! A protocol is a [`ProtocolScript`]: atoms with their initial states,
//! cavity nodes with their seeds, and an ordered list of transits and delays.
//! Atoms come first in the joint layout, followed by the two modes
//! `<cavity>.a`, `<cavity>.b` of every cavity.
//!
//! Closed-system runs propagate a pure state and apply each transit's
//! 8×8 propagator only on the atom and cavity involved. Open-system runs
//! compile the script into a [`Schedule`] on the full joint space in which
//! every cavity decays during every segment, atoms never do.
//!
//! Reference phases follow the exact π-pulse action of the dispersive
//! Hamiltonian: `|g,1,0⟩ → −|f,0,1⟩`, `|f,0,1⟩ → −|g,1,0⟩`, with `|g,0,1⟩`
//! and `|f,1,0⟩` dark. Fidelities are phase-insensitive, so a global sign on
//! a target never matters.

use std::f64::consts::FRAC_1_SQRT_2;

use crate::dynamics::{propagator, run_schedule, Dissipator, Schedule, Segment};
use crate::error::{Error, Result};
use crate::hilbert::{embed_factors, DensityOperator, StateVector, SystemLayout};
use crate::linalg::{C64, ONE, ZERO};
use crate::metrics::{self, concurrence, encode_cavity_qubits, DiagnosticsReport, FidelityResult};
use crate::model::{
    collapse_operators_for, local_effective_hamiltonian, mode_a_label, mode_b_label, pulse_duration,
    truncation_leakage, PhysicalParams, PulseArea, Site, DEFAULT_FOCK_DIM, LEAKAGE_TOL, LEVEL_F, LEVEL_G,
};

const NORM_TOL: f64 = 1e-12;

fn check_unit(alpha: C64, beta: C64, what: &str) -> Result<()> {
    let n = alpha.norm_sqr() + beta.norm_sqr();
    if (n - 1.0).abs() > NORM_TOL {
        return Err(Error::Parameter(format!("{what}: |α|² + |β|² = {n}, expected 1")));
    }
    Ok(())
}

/// Normalized qubit amplitudes `(α, β)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Amplitudes {
    pub alpha: C64,
    pub beta: C64,
}

impl Amplitudes {
    pub fn new(alpha: C64, beta: C64) -> Result<Self> {
        check_unit(alpha, beta, "amplitudes")?;
        Ok(Self { alpha, beta })
    }

    pub fn real(alpha: f64, beta: f64) -> Result<Self> {
        Self::new(C64::new(alpha, 0.0), C64::new(beta, 0.0))
    }

    pub fn ground() -> Self {
        Self { alpha: ONE, beta: ZERO }
    }

    pub fn balanced() -> Self {
        Self {
            alpha: C64::new(FRAC_1_SQRT_2, 0.0),
            beta: C64::new(FRAC_1_SQRT_2, 0.0),
        }
    }

    /// Atom ket `α|g⟩ + β|f⟩`.
    pub fn atom_ket(&self, label: &str) -> Result<StateVector> {
        atom_ket(label, self.alpha, self.beta)
    }

    /// Cavity ket `α|0,1⟩ − β|1,0⟩`, the form a π transit writes into a
    /// `|0,1⟩` cavity.
    pub fn cavity_ket(&self, cavity: &str, fock_dim: usize) -> Result<StateVector> {
        cavity_ket(cavity, fock_dim, self.alpha, -self.beta)
    }
}

fn atom_ket(label: &str, g: C64, f: C64) -> Result<StateVector> {
    StateVector::from_slice(SystemLayout::single(label, 2)?, &[g, f])
}

/// `γ|0,1⟩ + δ|1,0⟩` on the two modes of `cavity`.
fn cavity_ket(cavity: &str, fock_dim: usize, gamma: C64, delta: C64) -> Result<StateVector> {
    let layout = SystemLayout::new([(mode_a_label(cavity), fock_dim), (mode_b_label(cavity), fock_dim)])?;
    let mut amps = vec![ZERO; layout.dim()];
    amps[layout.encode(&[0, 1])?] = gamma;
    amps[layout.encode(&[1, 0])?] = delta;
    StateVector::from_slice(layout, &amps)
}

/// An injected atom `α|g⟩ + β|f⟩` and the pulse area of its transit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AtomSpec {
    pub alpha: C64,
    pub beta: C64,
    pub pulse: PulseArea,
}

impl AtomSpec {
    pub fn new(alpha: C64, beta: C64) -> Result<Self> {
        check_unit(alpha, beta, "atom state")?;
        Ok(Self {
            alpha,
            beta,
            pulse: PulseArea::PI,
        })
    }

    pub fn from_amplitudes(a: Amplitudes) -> Self {
        Self {
            alpha: a.alpha,
            beta: a.beta,
            pulse: PulseArea::PI,
        }
    }

    pub fn ground() -> Self {
        Self::from_amplitudes(Amplitudes::ground())
    }

    pub fn with_pulse(mut self, pulse: PulseArea) -> Self {
        self.pulse = pulse;
        self
    }

    pub fn amplitudes(&self) -> Amplitudes {
        Amplitudes {
            alpha: self.alpha,
            beta: self.beta,
        }
    }
}

/// Initial two-mode cavity state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CavityInit {
    /// `|0,1⟩`: one photon in mode b.
    ZeroOne,
    /// `|1,0⟩`: one photon in mode a.
    OneZero,
    /// `γ|0,1⟩ + δ|1,0⟩`.
    Superposition { gamma: C64, delta: C64 },
}

impl CavityInit {
    /// `(γ, δ)` such that the state is `γ|0,1⟩ + δ|1,0⟩`.
    pub fn coefficients(&self) -> (C64, C64) {
        match *self {
            CavityInit::ZeroOne => (ONE, ZERO),
            CavityInit::OneZero => (ZERO, ONE),
            CavityInit::Superposition { gamma, delta } => (gamma, delta),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CavityNode {
    pub label: String,
    pub init: CavityInit,
}

impl CavityNode {
    pub fn new(label: impl Into<String>, init: CavityInit) -> Result<Self> {
        let label = label.into();
        if let CavityInit::Superposition { gamma, delta } = init {
            check_unit(gamma, delta, &format!("cavity {label}"))?;
        }
        Ok(Self { label, init })
    }

    pub fn seeded(label: impl Into<String>, init: CavityInit) -> Self {
        Self::new(label, init).expect("basis seeds are normalized")
    }

    pub fn ket(&self, fock_dim: usize) -> Result<StateVector> {
        let (gamma, delta) = self.init.coefficients();
        cavity_ket(&self.label, fock_dim, gamma, delta)
    }

    fn modes(&self) -> (String, String) {
        (mode_a_label(&self.label), mode_b_label(&self.label))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AtomLevel {
    G,
    F,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FockPair {
    /// `|1,0⟩`
    OneZero,
    /// `|0,1⟩`
    ZeroOne,
}

/// Exact closed-system π-pulse action on a single-excitation basis state.
pub fn ideal_pi_map(level: AtomLevel, fock: FockPair) -> (AtomLevel, FockPair, f64) {
    match (level, fock) {
        (AtomLevel::G, FockPair::OneZero) => (AtomLevel::F, FockPair::ZeroOne, -1.0),
        (AtomLevel::F, FockPair::ZeroOne) => (AtomLevel::G, FockPair::OneZero, -1.0),
        (AtomLevel::G, FockPair::ZeroOne) => (AtomLevel::G, FockPair::ZeroOne, 1.0),
        (AtomLevel::F, FockPair::OneZero) => (AtomLevel::F, FockPair::OneZero, 1.0),
    }
}

/// One step of a protocol.
#[derive(Debug, Clone, PartialEq)]
pub enum Step {
    Transit {
        atom: String,
        cavity: String,
        pulse: PulseArea,
    },
    Delay {
        duration: f64,
    },
}

impl Step {
    pub fn label(&self) -> String {
        match self {
            Step::Transit { atom, cavity, .. } => format!("{atom}@{cavity}"),
            Step::Delay { .. } => "delay".to_string(),
        }
    }
}

/// Declarative protocol: who starts where, and the order of transits.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolScript {
    atoms: Vec<(String, Amplitudes)>,
    cavities: Vec<CavityNode>,
    steps: Vec<Step>,
}

impl ProtocolScript {
    pub fn new(atoms: Vec<(String, Amplitudes)>, cavities: Vec<CavityNode>) -> Self {
        Self {
            atoms,
            cavities,
            steps: Vec::new(),
        }
    }

    pub fn transit(mut self, atom: &str, cavity: &str, pulse: PulseArea) -> Self {
        self.steps.push(Step::Transit {
            atom: atom.to_string(),
            cavity: cavity.to_string(),
            pulse,
        });
        self
    }

    pub fn delay(mut self, duration: f64) -> Self {
        self.steps.push(Step::Delay { duration });
        self
    }

    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    pub fn atom_labels(&self) -> impl Iterator<Item = &str> {
        self.atoms.iter().map(|(l, _)| l.as_str())
    }

    pub fn cavities(&self) -> &[CavityNode] {
        &self.cavities
    }

    pub fn layout(&self, fock_dim: usize) -> Result<SystemLayout> {
        let mut factors: Vec<(String, usize)> = self.atoms.iter().map(|(l, _)| (l.clone(), 2)).collect();
        for c in &self.cavities {
            let (a, b) = c.modes();
            factors.push((a, fock_dim));
            factors.push((b, fock_dim));
        }
        SystemLayout::new(factors)
    }

    pub fn initial_state(&self, fock_dim: usize) -> Result<StateVector> {
        let mut parts = Vec::new();
        for (label, amps) in &self.atoms {
            parts.push(amps.atom_ket(label)?);
        }
        for c in &self.cavities {
            parts.push(c.ket(fock_dim)?);
        }
        let refs: Vec<&StateVector> = parts.iter().collect();
        StateVector::product(&refs)
    }

    fn validate(&self) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::Parameter("protocol has no steps".into()));
        }
        for step in &self.steps {
            match step {
                Step::Transit { atom, cavity, .. } => {
                    if !self.atoms.iter().any(|(l, _)| l == atom) {
                        return Err(Error::UnknownFactor(atom.clone()));
                    }
                    if !self.cavities.iter().any(|c| &c.label == cavity) {
                        return Err(Error::UnknownFactor(cavity.clone()));
                    }
                }
                Step::Delay { duration } => {
                    if !(*duration >= 0.0) || !duration.is_finite() {
                        return Err(Error::Parameter(format!("delay must be non-negative, got {duration}")));
                    }
                }
            }
        }
        Ok(())
    }

    fn mode_pairs(&self) -> Vec<(String, String)> {
        self.cavities.iter().map(CavityNode::modes).collect()
    }
}

/// Applies the π-pulse sign table for `atom` crossing `cavity`. A vacuum
/// cavity is left alone (both `|g,0,0⟩` and `|f,0,0⟩` are stationary); any
/// other multi-photon component is an error.
pub fn apply_ideal_pi(psi: &StateVector, atom: &str, cavity: &str) -> Result<StateVector> {
    let layout = psi.layout();
    let pa = layout.position(atom)?;
    let pm = layout.position(&mode_a_label(cavity))?;
    let pb = layout.position(&mode_b_label(cavity))?;
    let mut out = StateVector::zeros(layout.clone()).amplitudes().clone();
    for (k, &amp) in psi.amplitudes().iter().enumerate() {
        if amp == ZERO {
            continue;
        }
        let mut d = layout.decode(k);
        let level = if d[pa] == LEVEL_G { AtomLevel::G } else { AtomLevel::F };
        let fock = match (d[pm], d[pb]) {
            (1, 0) => FockPair::OneZero,
            (0, 1) => FockPair::ZeroOne,
            (0, 0) => {
                out[k] += amp;
                continue;
            }
            (n, m) => {
                return Err(Error::Domain(format!(
                    "sign table covers single excitations only; found |{n},{m}⟩ in {cavity}"
                )))
            }
        };
        let (level, fock, sign) = ideal_pi_map(level, fock);
        d[pa] = if level == AtomLevel::G { LEVEL_G } else { LEVEL_F };
        (d[pm], d[pb]) = if fock == FockPair::OneZero { (1, 0) } else { (0, 1) };
        out[layout.encode(&d)?] += amp * sign;
    }
    StateVector::new(layout.clone(), out)
}

/// Final state predicted by the sign table alone. Only π transits allowed.
pub fn ideal_script_state(script: &ProtocolScript, fock_dim: usize) -> Result<StateVector> {
    script.validate()?;
    let mut psi = script.initial_state(fock_dim)?;
    for step in &script.steps {
        if let Step::Transit { atom, cavity, pulse } = step {
            if *pulse != PulseArea::PI {
                return Err(Error::Domain("sign table only describes π pulses".into()));
            }
            psi = apply_ideal_pi(&psi, atom, cavity)?;
        }
    }
    Ok(psi)
}

#[derive(Debug, Clone, PartialEq)]
pub enum QuantumState {
    Pure(StateVector),
    Mixed(DensityOperator),
}

impl QuantumState {
    pub fn layout(&self) -> &SystemLayout {
        match self {
            QuantumState::Pure(v) => v.layout(),
            QuantumState::Mixed(r) => r.layout(),
        }
    }

    pub fn reduced(&self, keep: &[&str]) -> Result<DensityOperator> {
        match self {
            QuantumState::Pure(v) => v.reduced(keep),
            QuantumState::Mixed(r) => r.partial_trace(keep),
        }
    }

    pub fn to_density(&self) -> DensityOperator {
        match self {
            QuantumState::Pure(v) => DensityOperator::pure(v),
            QuantumState::Mixed(r) => r.clone(),
        }
    }

    pub fn fidelity(&self, target: &StateVector) -> Result<f64> {
        match self {
            QuantumState::Pure(v) => metrics::fidelity_pure(v, target),
            QuantumState::Mixed(r) => metrics::fidelity(r, target),
        }
    }

    pub fn populations(&self) -> Vec<f64> {
        match self {
            QuantumState::Pure(v) => v.amplitudes().iter().map(|z| z.norm_sqr()).collect(),
            QuantumState::Mixed(r) => r.matrix().diagonal().iter().map(|z| z.re).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub label: String,
    pub time: f64,
    pub state: QuantumState,
    /// Closed-system state at the same point.
    pub ideal: StateVector,
    /// Fidelity of `state` to `ideal`.
    pub fidelity: f64,
    pub diagnostics: DiagnosticsReport,
}

/// A pure reference state for one subsystem (or the joint system).
#[derive(Debug, Clone, PartialEq)]
pub struct Target {
    pub label: String,
    pub factors: Vec<String>,
    pub state: StateVector,
}

impl Target {
    fn atom(label: &str, amps: (C64, C64)) -> Result<Self> {
        Ok(Self {
            label: label.to_string(),
            factors: vec![label.to_string()],
            state: atom_ket(label, amps.0, amps.1)?,
        })
    }

    fn cavity(cavity: &str, fock_dim: usize, gamma: C64, delta: C64) -> Result<Self> {
        Ok(Self {
            label: cavity.to_string(),
            factors: vec![mode_a_label(cavity), mode_b_label(cavity)],
            state: cavity_ket(cavity, fock_dim, gamma, delta)?,
        })
    }

    pub fn fidelity_of(&self, state: &QuantumState) -> Result<f64> {
        let keep: Vec<&str> = self.factors.iter().map(String::as_str).collect();
        metrics::fidelity(&state.reduced(&keep)?, &self.state)
    }

    fn product(label: &str, parts: &[Target]) -> Result<Self> {
        let kets: Vec<&StateVector> = parts.iter().map(|p| &p.state).collect();
        Ok(Self {
            label: label.to_string(),
            factors: parts.iter().flat_map(|p| p.factors.iter().cloned()).collect(),
            state: StateVector::product(&kets)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct ProtocolOutcome {
    pub script: ProtocolScript,
    pub final_state: QuantumState,
    /// Closed-system final state.
    pub ideal: StateVector,
    /// Reduced state of every atom and every cavity.
    pub reduced: Vec<(String, DensityOperator)>,
    pub fidelities: Vec<FidelityResult>,
    /// Reference states behind `fidelities` (the joint entry excepted).
    pub targets: Vec<Target>,
    pub trail: Vec<Checkpoint>,
    /// Two-cavity concurrence in the single-photon encoding, when relevant.
    pub concurrence: Option<f64>,
    pub open_system: bool,
}

impl ProtocolOutcome {
    pub fn reduced_state(&self, label: &str) -> Option<&DensityOperator> {
        self.reduced.iter().find(|(l, _)| l == label).map(|(_, r)| r)
    }

    pub fn fidelity(&self, label: &str) -> Option<f64> {
        self.fidelities
            .iter()
            .find(|f| f.target_label == label)
            .map(|f| f.value)
    }

    pub fn target(&self, label: &str) -> Option<&Target> {
        self.targets.iter().find(|t| t.label == label)
    }

    /// Fidelity of a checkpoint's state to a target, on the target's factors.
    pub fn fidelity_at(&self, checkpoint: &Checkpoint, label: &str) -> Result<f64> {
        let target = self
            .target(label)
            .ok_or_else(|| Error::UnknownFactor(label.to_string()))?;
        target.fidelity_of(&checkpoint.state)
    }

    pub fn final_density(&self) -> DensityOperator {
        self.final_state.to_density()
    }

    pub fn diagnostics_ok(&self) -> bool {
        self.trail.iter().all(|c| {
            c.diagnostics.trace_error < crate::dynamics::TRACE_TOL
                && c.diagnostics.hermiticity_error < crate::dynamics::HERMITICITY_TOL
                && c.diagnostics.min_eigenvalue >= -crate::dynamics::POSITIVITY_TOL
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    pub open_system: bool,
    /// RK4 steps per π-pulse duration.
    pub steps_per_pulse: usize,
    pub fock_dim: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            open_system: false,
            steps_per_pulse: crate::dynamics::DEFAULT_STEPS_PER_PULSE,
            fock_dim: DEFAULT_FOCK_DIM,
        }
    }
}

impl RunOptions {
    pub fn closed() -> Self {
        Self::default()
    }

    pub fn open() -> Self {
        Self {
            open_system: true,
            ..Self::default()
        }
    }
}

/// Executes protocols for one parameter set.
#[derive(Debug, Clone, Copy)]
pub struct ProtocolRunner {
    pub params: PhysicalParams,
    pub options: RunOptions,
}

/// Label of the k-th injected atom: `A`, `B`, `C`, …
pub fn atom_name(k: usize) -> String {
    if k < 26 {
        char::from(b'A' + k as u8).to_string()
    } else {
        format!("A{k}")
    }
}

fn pure_report() -> DiagnosticsReport {
    DiagnosticsReport {
        trace_error: 0.0,
        hermiticity_error: 0.0,
        min_eigenvalue: 0.0,
        purity: 1.0,
    }
}

impl ProtocolRunner {
    pub fn new(params: PhysicalParams, options: RunOptions) -> Result<Self> {
        params.validate()?;
        if options.steps_per_pulse == 0 {
            return Err(Error::Parameter("steps per pulse must be positive".into()));
        }
        if options.fock_dim < 2 {
            return Err(Error::Parameter("Fock cutoff must be at least 2".into()));
        }
        Ok(Self { params, options })
    }

    fn fock(&self) -> usize {
        self.options.fock_dim
    }

    fn site_layout(&self) -> Result<SystemLayout> {
        SystemLayout::new([("atom", 2), ("a", self.fock()), ("b", self.fock())])
    }

    fn check_leakage(&self, state: &QuantumState, pairs: &[(String, String)], context: &str) -> Result<()> {
        let refs: Vec<(&str, &str)> = pairs.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
        let leakage = truncation_leakage(state.layout(), &state.populations(), &refs)?;
        if leakage > LEAKAGE_TOL {
            return Err(Error::Truncation {
                context: context.to_string(),
                leakage,
            });
        }
        Ok(())
    }

    /// Closed-system trail: one pure state per step, with elapsed times.
    fn closed_trail(&self, script: &ProtocolScript) -> Result<Vec<(String, f64, StateVector)>> {
        let local_h = local_effective_hamiltonian(&self.params, &self.site_layout()?, &Site::default())?;
        let mut psi = script.initial_state(self.fock())?;
        let mut time = 0.0;
        let mut trail = Vec::with_capacity(script.steps.len());
        for step in &script.steps {
            match step {
                Step::Transit { atom, cavity, pulse } => {
                    let t = pulse_duration(&self.params, *pulse);
                    let u = propagator(&local_h, t)?;
                    let site = Site::new(atom, cavity);
                    psi = psi.apply_local(&u, &site.labels())?;
                    time += t;
                }
                Step::Delay { duration } => time += duration,
            }
            trail.push((step.label(), time, psi.clone()));
        }
        Ok(trail)
    }

    fn compile_schedule(&self, script: &ProtocolScript, layout: &SystemLayout) -> Result<Schedule> {
        let mut dissipators: Vec<Dissipator> = Vec::new();
        for (a, b) in script.mode_pairs() {
            dissipators.extend(collapse_operators_for(&self.params, layout, &a, &b)?);
        }
        let local_h = local_effective_hamiltonian(&self.params, &self.site_layout()?, &Site::default())?;
        let mut segments = Vec::with_capacity(script.steps.len());
        let mut labels = Vec::with_capacity(script.steps.len());
        for step in &script.steps {
            let segment = match step {
                Step::Transit { atom, cavity, pulse } => {
                    let site = Site::new(atom, cavity);
                    let h = embed_factors(&local_h, layout, &site.labels())?;
                    Segment::atom_in_cavity(h, pulse_duration(&self.params, *pulse), dissipators.clone())?
                }
                Step::Delay { duration } => Segment::free_delay(layout, *duration, dissipators.clone())?,
            };
            segments.push(segment);
            labels.push(Some(step.label()));
        }
        Schedule::with_labels(segments, labels)
    }

    /// Runs a script and scores the final state against `targets`.
    pub fn run_script(&self, script: &ProtocolScript, targets: &[Target]) -> Result<ProtocolOutcome> {
        script.validate()?;
        let layout = script.layout(self.fock())?;
        let pairs = script.mode_pairs();
        let initial = script.initial_state(self.fock())?;
        self.check_leakage(&QuantumState::Pure(initial.clone()), &pairs, "initial state")?;

        let closed = self.closed_trail(script)?;
        let ideal = closed
            .last()
            .map(|(_, _, s)| s.clone())
            .unwrap_or_else(|| initial.clone());

        let (final_state, trail) = if self.options.open_system {
            let schedule = self.compile_schedule(script, &layout)?;
            let dt = pulse_duration(&self.params, PulseArea::PI) / self.options.steps_per_pulse as f64;
            let result = run_schedule(&DensityOperator::pure(&initial), &schedule, dt)?;
            let mut trail = Vec::with_capacity(closed.len());
            for (((label, rho), diag), (_, time, ideal_k)) in result
                .checkpoints
                .into_iter()
                .zip(result.diagnostics)
                .zip(closed.iter())
            {
                let fidelity = metrics::fidelity(&rho, ideal_k)?;
                trail.push(Checkpoint {
                    label,
                    time: *time,
                    state: QuantumState::Mixed(rho),
                    ideal: ideal_k.clone(),
                    fidelity,
                    diagnostics: DiagnosticsReport {
                        hermiticity_error: diag.report.hermiticity_error.max(diag.hermiticity_drift),
                        ..diag.report
                    },
                });
            }
            (QuantumState::Mixed(result.final_state.hermitized()), trail)
        } else {
            let trail = closed
                .iter()
                .map(|(label, time, psi)| Checkpoint {
                    label: label.clone(),
                    time: *time,
                    state: QuantumState::Pure(psi.clone()),
                    ideal: psi.clone(),
                    fidelity: 1.0,
                    diagnostics: pure_report(),
                })
                .collect();
            (QuantumState::Pure(ideal.clone()), trail)
        };
        self.check_leakage(&final_state, &pairs, "final state")?;

        let mut reduced = Vec::new();
        for label in script.atom_labels() {
            reduced.push((label.to_string(), final_state.reduced(&[label])?));
        }
        for (c, (a, b)) in script.cavities.iter().zip(&pairs) {
            reduced.push((c.label.clone(), final_state.reduced(&[a.as_str(), b.as_str()])?));
        }

        let end_time = trail.last().map(|c: &Checkpoint| c.time).unwrap_or(0.0);
        let mut fidelities = vec![FidelityResult {
            value: final_state.fidelity(&ideal)?,
            target_label: "joint".to_string(),
            time: end_time,
        }];
        for target in targets {
            let keep: Vec<&str> = target.factors.iter().map(String::as_str).collect();
            let rho = final_state.reduced(&keep)?;
            fidelities.push(FidelityResult::evaluate(&rho, &target.state, &target.label, end_time)?);
        }

        Ok(ProtocolOutcome {
            script: script.clone(),
            final_state,
            ideal,
            reduced,
            fidelities,
            targets: targets.to_vec(),
            trail,
            concurrence: None,
            open_system: self.options.open_system,
        })
    }

    /// First step of the transfer: atom A crosses the cavity once. Scored
    /// against `(γ|g⟩ − δ|f⟩)_A ⊗ (α|0,1⟩ − β|1,0⟩)` under the target
    /// label `"A+C1"`.
    pub fn qst_first_step(&self, a: AtomSpec, cavity: &CavityNode) -> Result<ProtocolOutcome> {
        let script = ProtocolScript::new(vec![("A".into(), a.amplitudes())], vec![cavity.clone()]).transit(
            "A",
            &cavity.label,
            a.pulse,
        );
        let (gamma, delta) = cavity.init.coefficients();
        let fock = self.fock();
        let mut targets = Vec::new();
        if a.pulse == PulseArea::PI {
            let atom = Target::atom("A", (gamma, -delta))?;
            let cav = Target::cavity(&cavity.label, fock, a.alpha, -a.beta)?;
            targets.push(Target::product("A+C1", &[atom, cav])?);
        }
        self.run_script(&script, &targets)
    }

    /// A crosses the cavity, a delay `tau`, then B crosses it. With π pulses
    /// the targets are A: `γ|g⟩ − δ|f⟩`, B: `α|g⟩ + β|f⟩` (A's original
    /// state) and cavity: `α′|0,1⟩ − β′|1,0⟩`.
    pub fn qst_two_atoms(&self, a: AtomSpec, b: AtomSpec, cavity: &CavityNode, tau: f64) -> Result<ProtocolOutcome> {
        let script = ProtocolScript::new(
            vec![("A".into(), a.amplitudes()), ("B".into(), b.amplitudes())],
            vec![cavity.clone()],
        )
        .transit("A", &cavity.label, a.pulse)
        .delay(tau)
        .transit("B", &cavity.label, b.pulse);
        let mut targets = Vec::new();
        if a.pulse == PulseArea::PI && b.pulse == PulseArea::PI {
            let (gamma, delta) = cavity.init.coefficients();
            targets.push(Target::atom("A", (gamma, -delta))?);
            targets.push(Target::atom("B", (a.alpha, a.beta))?);
            targets.push(Target::cavity(&cavity.label, self.fock(), b.alpha, -b.beta)?);
        }
        self.run_script(&script, &targets)
    }

    /// Transit order for `n` cavities and `n + 1` atoms: atom 1 crosses C1,
    /// then every later atom k crosses C(k−1) and then C(k) if it exists.
    fn relay_order(n: usize) -> Vec<(usize, usize)> {
        let mut order = vec![(0, 0)];
        for k in 0..n {
            order.push((k + 1, k));
            if k + 1 < n {
                order.push((k + 1, k + 1));
            }
        }
        order
    }

    /// Relays atom 1's state down a chain of `|0,1⟩` cavities. `delays` holds
    /// one entry per gap between consecutive transits, or is empty.
    pub fn relay_chain(&self, atoms: &[AtomSpec], cavities: &[CavityNode], delays: &[f64]) -> Result<ProtocolOutcome> {
        let n = cavities.len();
        if n == 0 || atoms.len() != n + 1 {
            return Err(Error::Parameter(format!(
                "relay needs n cavities and n + 1 atoms, got {} cavities and {} atoms",
                n,
                atoms.len()
            )));
        }
        if let Some(c) = cavities.iter().find(|c| c.init != CavityInit::ZeroOne) {
            return Err(Error::Parameter(format!(
                "relay cavity {} must start in |0,1⟩",
                c.label
            )));
        }
        let order = Self::relay_order(n);
        if !delays.is_empty() && delays.len() != order.len() - 1 {
            return Err(Error::Parameter(format!(
                "{} delays for {} transits",
                delays.len(),
                order.len()
            )));
        }
        let names: Vec<String> = (0..atoms.len()).map(atom_name).collect();
        let mut script = ProtocolScript::new(
            names
                .iter()
                .cloned()
                .zip(atoms.iter().map(AtomSpec::amplitudes))
                .collect(),
            cavities.to_vec(),
        );
        for (k, &(atom, cav)) in order.iter().enumerate() {
            if k > 0 {
                if let Some(&d) = delays.get(k - 1) {
                    script = script.delay(d);
                }
            }
            script = script.transit(&names[atom], &cavities[cav].label, atoms[atom].pulse);
        }

        let mut targets = Vec::new();
        if atoms.iter().all(|a| a.pulse == PulseArea::PI) {
            for (k, name) in names.iter().enumerate() {
                let amps = if k == n {
                    (atoms[0].alpha, atoms[0].beta)
                } else {
                    (ONE, ZERO)
                };
                targets.push(Target::atom(name, amps)?);
            }
            for (k, c) in cavities.iter().enumerate() {
                let career = &atoms[k + 1];
                targets.push(Target::cavity(&c.label, self.fock(), career.alpha, -career.beta)?);
            }
        }
        self.run_script(&script, &targets)
    }

    /// Network transfer: atom A writes `|E⟩ = α|0,1⟩ − β|1,0⟩` into the
    /// first node, then one career atom per hop (starting in `|g⟩`) carries
    /// it to the next node. The last node is scored against `|E⟩`.
    pub fn network_transfer(&self, e: Amplitudes, nodes: &[CavityNode]) -> Result<ProtocolOutcome> {
        let m = nodes.len();
        if m < 2 {
            return Err(Error::Parameter("network transfer needs at least two nodes".into()));
        }
        if let Some(c) = nodes.iter().find(|c| c.init != CavityInit::ZeroOne) {
            return Err(Error::Parameter(format!("node {} must start in |0,1⟩", c.label)));
        }
        let names: Vec<String> = (0..m).map(atom_name).collect();
        let mut atoms = vec![(names[0].clone(), e)];
        atoms.extend(names[1..].iter().map(|n| (n.clone(), Amplitudes::ground())));
        let mut script = ProtocolScript::new(atoms, nodes.to_vec()).transit(&names[0], &nodes[0].label, PulseArea::PI);
        for j in 1..m {
            script = script.transit(&names[j], &nodes[j - 1].label, PulseArea::PI).transit(
                &names[j],
                &nodes[j].label,
                PulseArea::PI,
            );
        }
        let mut targets = Vec::new();
        for name in &names {
            targets.push(Target::atom(name, (ONE, ZERO))?);
        }
        for (j, node) in nodes.iter().enumerate() {
            let (g, d) = if j == m - 1 { (e.alpha, -e.beta) } else { (ONE, ZERO) };
            targets.push(Target::cavity(&node.label, self.fock(), g, d)?);
        }
        self.run_script(&script, &targets)
    }

    /// Atom in `|g⟩` takes a π/2 transit through C1 (`|1,0⟩`) and a π transit
    /// through C2 (`|0,1⟩`), leaving the two cavities in
    /// `(|1,0⟩₁|0,1⟩₂ − i|0,1⟩₁|1,0⟩₂)/√2` and the atom in `|g⟩`.
    pub fn spread_entanglement(&self) -> Result<ProtocolOutcome> {
        let c1 = CavityNode::seeded("C1", CavityInit::OneZero);
        let c2 = CavityNode::seeded("C2", CavityInit::ZeroOne);
        let script = ProtocolScript::new(vec![("A".into(), Amplitudes::ground())], vec![c1, c2])
            .transit("A", "C1", PulseArea::HALF_PI)
            .transit("A", "C2", PulseArea::PI);

        let fock = self.fock();
        let pair = SystemLayout::new([
            (mode_a_label("C1"), fock),
            (mode_b_label("C1"), fock),
            (mode_a_label("C2"), fock),
            (mode_b_label("C2"), fock),
        ])?;
        let mut amps = vec![ZERO; pair.dim()];
        amps[pair.encode(&[1, 0, 0, 1])?] = C64::new(FRAC_1_SQRT_2, 0.0);
        amps[pair.encode(&[0, 1, 1, 0])?] = C64::new(0.0, -FRAC_1_SQRT_2);
        let targets = vec![
            Target::atom("A", (ONE, ZERO))?,
            Target {
                label: "C1+C2".into(),
                factors: pair.labels().map(str::to_string).collect(),
                state: StateVector::from_slice(pair, &amps)?,
            },
        ];
        let mut outcome = self.run_script(&script, &targets)?;
        let rho = outcome.final_density();
        let encoded = encode_cavity_qubits(
            &rho,
            (&mode_a_label("C1"), &mode_b_label("C1")),
            (&mode_a_label("C2"), &mode_b_label("C2")),
        )?;
        outcome.concurrence = Some(concurrence(&encoded)?);
        Ok(outcome)
    }

    /// Maps a cavity holding `|E⟩ = α|0,1⟩ − β|1,0⟩` onto an atom starting
    /// in `atom_init`: the atom ends in `α|g⟩ + β|f⟩`, the cavity in
    /// `α′|0,1⟩ − β′|1,0⟩`.
    pub fn memory_store(&self, e: Amplitudes, atom_init: AtomSpec) -> Result<ProtocolOutcome> {
        let cavity = CavityNode::new(
            "C1",
            CavityInit::Superposition {
                gamma: e.alpha,
                delta: -e.beta,
            },
        )?;
        let script = ProtocolScript::new(vec![("A".into(), atom_init.amplitudes())], vec![cavity]).transit(
            "A",
            "C1",
            atom_init.pulse,
        );
        let mut targets = Vec::new();
        if atom_init.pulse == PulseArea::PI {
            targets.push(Target::atom("A", (e.alpha, e.beta))?);
            targets.push(Target::cavity("C1", self.fock(), atom_init.alpha, -atom_init.beta)?);
        }
        self.run_script(&script, &targets)
    }

    /// Writes an atom's `α|g⟩ + β|f⟩` into a fresh cavity: the cavity ends in
    /// `α|0,1⟩ − β|1,0⟩`, the atom in `|g⟩` (seed `|0,1⟩`) or `−|f⟩` (seed
    /// `|1,0⟩`).
    pub fn memory_retrieve(&self, atom: Amplitudes, seed: CavityInit) -> Result<ProtocolOutcome> {
        let atom_end = retrieval_atom_end(seed)?;
        let script = ProtocolScript::new(vec![("A".into(), atom)], vec![CavityNode::seeded("C1", seed)]).transit(
            "A",
            "C1",
            PulseArea::PI,
        );
        let targets = vec![
            Target::cavity("C1", self.fock(), atom.alpha, -atom.beta)?,
            Target::atom("A", atom_end)?,
        ];
        self.run_script(&script, &targets)
    }

    /// Store into an atom, hold for `hold`, retrieve into a second cavity.
    /// C2 is scored against the original `|E⟩`.
    pub fn memory_round_trip(
        &self,
        e: Amplitudes,
        atom_init: AtomSpec,
        seed: CavityInit,
        hold: f64,
    ) -> Result<ProtocolOutcome> {
        let atom_end = retrieval_atom_end(seed)?;
        let c1 = CavityNode::new(
            "C1",
            CavityInit::Superposition {
                gamma: e.alpha,
                delta: -e.beta,
            },
        )?;
        let c2 = CavityNode::seeded("C2", seed);
        let script = ProtocolScript::new(vec![("A".into(), atom_init.amplitudes())], vec![c1, c2])
            .transit("A", "C1", PulseArea::PI)
            .delay(hold)
            .transit("A", "C2", PulseArea::PI);
        let targets = vec![
            Target::cavity("C2", self.fock(), e.alpha, -e.beta)?,
            Target::cavity("C1", self.fock(), atom_init.alpha, -atom_init.beta)?,
            Target::atom("A", atom_end)?,
        ];
        self.run_script(&script, &targets)
    }
}

fn retrieval_atom_end(seed: CavityInit) -> Result<(C64, C64)> {
    match seed {
        CavityInit::ZeroOne => Ok((ONE, ZERO)),
        CavityInit::OneZero => Ok((ZERO, -ONE)),
        CavityInit::Superposition { .. } => Err(Error::Parameter(
            "retrieval cavity must be seeded |0,1⟩ or |1,0⟩".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::max_abs_diff;
    use crate::metrics::purity;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn runner() -> ProtocolRunner {
        ProtocolRunner::new(PhysicalParams::dimensionless(10.0, 0.0).unwrap(), RunOptions::closed()).unwrap()
    }

    fn random_amps(rng: &mut ChaCha8Rng) -> Amplitudes {
        let a = C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let b = C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let n = (a.norm_sqr() + b.norm_sqr()).sqrt();
        Amplitudes::new(a / n, b / n).unwrap()
    }

    #[test]
    fn sign_table_entries() {
        assert_eq!(
            ideal_pi_map(AtomLevel::G, FockPair::OneZero),
            (AtomLevel::F, FockPair::ZeroOne, -1.0)
        );
        assert_eq!(
            ideal_pi_map(AtomLevel::G, FockPair::ZeroOne),
            (AtomLevel::G, FockPair::ZeroOne, 1.0)
        );
        for level in [AtomLevel::G, AtomLevel::F] {
            for fock in [FockPair::OneZero, FockPair::ZeroOne] {
                let (l1, f1, s1) = ideal_pi_map(level, fock);
                let (l2, f2, s2) = ideal_pi_map(l1, f1);
                assert_eq!((l2, f2), (level, fock));
                assert_eq!(s1 * s2, 1.0);
            }
        }
    }

    #[test]
    fn sign_table_rejects_two_photon_cavity() {
        let l = SystemLayout::new([("A", 2), ("C1.a", 2), ("C1.b", 2)]).unwrap();
        let psi = crate::hilbert::basis_state(&l, &[0, 1, 1]).unwrap();
        assert!(matches!(apply_ideal_pi(&psi, "A", "C1"), Err(Error::Domain(_))));
    }

    #[test]
    fn qst_delivers_state_to_b() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = runner();
        let a = random_amps(&mut rng);
        let b = random_amps(&mut rng);
        let cav = CavityNode::seeded("C1", CavityInit::ZeroOne);
        let out = r
            .qst_two_atoms(AtomSpec::from_amplitudes(a), AtomSpec::from_amplitudes(b), &cav, 0.0)
            .unwrap();
        assert!(out.fidelity("B").unwrap() > 1.0 - 1e-9);
        assert!(out.fidelity("A").unwrap() > 1.0 - 1e-9);
        let ra = out.reduced_state("A").unwrap();
        assert!((ra.matrix()[(0, 0)].re - 1.0).abs() < 1e-9);
    }

    #[test]
    fn qst_with_one_zero_seed_leaves_a_in_f() {
        let r = runner();
        let a = AtomSpec::new(C64::new(0.6, 0.0), C64::new(0.0, 0.8)).unwrap();
        let b = AtomSpec::new(C64::new(0.28, 0.0), C64::new(0.96, 0.0)).unwrap();
        let cav = CavityNode::seeded("C1", CavityInit::OneZero);
        let out = r.qst_two_atoms(a, b, &cav, 3.0).unwrap();
        let ra = out.reduced_state("A").unwrap();
        assert!((ra.matrix()[(1, 1)].re - 1.0).abs() < 1e-9);
        assert!(out.fidelity("B").unwrap() > 1.0 - 1e-9);
        assert!(out.fidelity("C1").unwrap() > 1.0 - 1e-9);
    }

    #[test]
    fn ground_atom_leaves_everything_dark() {
        let r = runner();
        let cav = CavityNode::seeded("C1", CavityInit::ZeroOne);
        let b = AtomSpec::new(C64::new(0.6, 0.0), C64::new(0.8, 0.0)).unwrap();
        let out = r.qst_two_atoms(AtomSpec::ground(), b, &cav, 0.0).unwrap();
        let rb = out.reduced_state("B").unwrap();
        assert!((rb.matrix()[(0, 0)].re - 1.0).abs() < 1e-9);
    }

    #[test]
    fn relay_matches_qst_for_one_cavity() {
        let r = runner();
        let a = AtomSpec::new(C64::new(0.6, 0.0), C64::new(0.0, 0.8)).unwrap();
        let b = AtomSpec::ground();
        let cav = CavityNode::seeded("C1", CavityInit::ZeroOne);
        let relay = r.relay_chain(&[a, b], std::slice::from_ref(&cav), &[]).unwrap();
        let qst = r.qst_two_atoms(a, b, &cav, 0.0).unwrap();
        let (QuantumState::Pure(x), QuantumState::Pure(y)) = (&relay.final_state, &qst.final_state) else {
            panic!("closed runs are pure");
        };
        assert!((x.amplitudes() - y.amplitudes()).norm() < 1e-12);
    }

    #[test]
    fn relay_rejects_bad_shapes() {
        let r = runner();
        let cav = CavityNode::seeded("C1", CavityInit::ZeroOne);
        assert!(r
            .relay_chain(&[AtomSpec::ground()], std::slice::from_ref(&cav), &[])
            .is_err());
        let bad = CavityNode::seeded("C1", CavityInit::OneZero);
        assert!(r.relay_chain(&[AtomSpec::ground(); 2], &[bad], &[]).is_err());
        assert!(r.relay_chain(&[AtomSpec::ground(); 2], &[cav], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn network_with_ground_source_is_trivial() {
        let r = runner();
        let nodes = [
            CavityNode::seeded("C1", CavityInit::ZeroOne),
            CavityNode::seeded("C2", CavityInit::ZeroOne),
        ];
        let out = r.network_transfer(Amplitudes::ground(), &nodes).unwrap();
        let initial = ProtocolScript::new(
            vec![("A".into(), Amplitudes::ground()), ("B".into(), Amplitudes::ground())],
            nodes.to_vec(),
        )
        .initial_state(2)
        .unwrap();
        assert!(out.final_state.fidelity(&initial).unwrap() > 1.0 - 1e-12);
    }

    #[test]
    fn spread_entanglement_phases() {
        let out = runner().spread_entanglement().unwrap();
        assert!((out.concurrence.unwrap() - 1.0).abs() < 1e-6);
        assert!(out.fidelity("C1+C2").unwrap() > 1.0 - 1e-9);
        assert!((purity(out.reduced_state("A").unwrap()) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn memory_retrieve_seeds() {
        let r = runner();
        let atom = Amplitudes::real(0.6, 0.8).unwrap();
        for seed in [CavityInit::ZeroOne, CavityInit::OneZero] {
            let out = r.memory_retrieve(atom, seed).unwrap();
            assert!(out.fidelity("C1").unwrap() > 1.0 - 1e-9);
            assert!(out.fidelity("A").unwrap() > 1.0 - 1e-9);
        }
        let sup = CavityInit::Superposition {
            gamma: ONE,
            delta: ZERO,
        };
        assert!(r.memory_retrieve(atom, sup).is_err());
    }

    #[test]
    fn unnormalized_inputs_are_rejected() {
        assert!(Amplitudes::real(1.0, 1.0).is_err());
        assert!(AtomSpec::new(ONE, ONE).is_err());
        assert!(CavityNode::new("C", CavityInit::Superposition { gamma: ONE, delta: ONE }).is_err());
    }

    #[test]
    fn open_run_reports_checkpoints() {
        let p = PhysicalParams::dimensionless(10.0, 0.002).unwrap();
        let r = ProtocolRunner::new(
            p,
            RunOptions {
                steps_per_pulse: 500,
                ..RunOptions::open()
            },
        )
        .unwrap();
        let cav = CavityNode::seeded("C1", CavityInit::ZeroOne);
        let out = r
            .qst_two_atoms(
                AtomSpec::from_amplitudes(Amplitudes::balanced()),
                AtomSpec::ground(),
                &cav,
                2.0,
            )
            .unwrap();
        assert_eq!(out.trail.len(), 3);
        assert!(out.diagnostics_ok());
        let f = out.fidelity("B").unwrap();
        assert!(f < 1.0 && f > 0.8, "{f}");
        // The closed-system trail is carried along as the reference.
        let closed = runner()
            .qst_two_atoms(
                AtomSpec::from_amplitudes(Amplitudes::balanced()),
                AtomSpec::ground(),
                &cav,
                2.0,
            )
            .unwrap();
        assert!((out.ideal.amplitudes() - closed.ideal.amplitudes()).norm() < 1e-14);
        let rho = out.final_density();
        assert!(max_abs_diff(rho.matrix(), &rho.matrix().adjoint()) < 1e-14);
    }
}

//! Config-driven experiments and deterministic CSV output.
//!
//! Config files are UTF-8, one `key = value` per line, `#` starts a comment.
//! Complex amplitudes accept the `a+bi` form. Unknown keys, malformed values
//! and unnormalized amplitude pairs are rejected with the offending line.
//!
//! Every experiment runs at `Δ = delta_over_g`, `κ_a = κ_b = kappa_over_g`
//! in units where `g = 1`. The RK4 step is `T_π / dt_per_T`.

use std::collections::HashMap;
use std::f64::consts::FRAC_1_SQRT_2;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::hilbert::basis_state;
use crate::linalg::{C64, ONE, ZERO};
use crate::metrics::{concurrence, encode_cavity_qubits, model_discrepancy};
use crate::model::{mode_a_label, mode_b_label, PhysicalParams, PulseArea};
use crate::protocols::{
    atom_name, Amplitudes, AtomSpec, CavityInit, CavityNode, ProtocolOutcome, ProtocolRunner, RunOptions,
};

/// Number of Haar-random input pairs in averaged fig3a/fig3b sweeps.
pub const HAAR_SAMPLES: usize = 20;
/// Default seed for the Haar-random input pairs.
pub const DEFAULT_HAAR_SEED: u64 = 20_240_917;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    /// First-transit fidelity against the cavity decay rate.
    Fig3a,
    /// Two-atom transfer fidelity against the delay between atoms.
    Fig3b,
    Qst,
    Relay,
    Network,
    Entangle,
    Memory,
    /// Dispersive versus three-level evolution against the detuning.
    Discrepancy,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Fig3a => "fig3a",
            ExperimentKind::Fig3b => "fig3b",
            ExperimentKind::Qst => "qst",
            ExperimentKind::Relay => "relay",
            ExperimentKind::Network => "network",
            ExperimentKind::Entangle => "entangle",
            ExperimentKind::Memory => "memory",
            ExperimentKind::Discrepancy => "discrepancy",
        }
    }

    /// Swept variable and its default `(start, stop, points)`.
    fn default_sweep(self) -> Option<(&'static str, f64, f64, usize)> {
        match self {
            ExperimentKind::Fig3a => Some(("kappa_over_g", 0.0, 0.01, 50)),
            ExperimentKind::Fig3b => Some(("g_tau", 0.0, 20.0, 21)),
            ExperimentKind::Discrepancy => Some(("delta_over_g", 10.0, 40.0, 4)),
            _ => None,
        }
    }
}

impl FromStr for ExperimentKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "fig3a" => ExperimentKind::Fig3a,
            "fig3b" => ExperimentKind::Fig3b,
            "qst" => ExperimentKind::Qst,
            "relay" => ExperimentKind::Relay,
            "network" => ExperimentKind::Network,
            "entangle" => ExperimentKind::Entangle,
            "memory" => ExperimentKind::Memory,
            "discrepancy" => ExperimentKind::Discrepancy,
            other => return Err(format!("unknown experiment `{other}`")),
        })
    }
}

/// Inclusive, evenly spaced sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub variable: String,
    pub start: f64,
    pub stop: f64,
    pub points: usize,
}

impl Sweep {
    pub fn values(&self) -> Vec<f64> {
        let last = (self.points - 1) as f64;
        (0..self.points)
            .map(|k| {
                if k + 1 == self.points {
                    self.stop
                } else {
                    self.start + (self.stop - self.start) * k as f64 / last
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub delta_over_g: f64,
    pub kappa_over_g: f64,
    /// Delay between transits (fig3b outside the sweep, qst, memory hold).
    pub g_tau: f64,
    pub sweep: Option<Sweep>,
    /// Source state `α|g⟩ + β|f⟩`, or `|E⟩ = α|0,1⟩ − β|1,0⟩` for network and
    /// memory.
    pub alpha: C64,
    pub beta: C64,
    /// Career atom state.
    pub alpha_prime: C64,
    pub beta_prime: C64,
    /// Cavity seed for fig3a, fig3b and qst; retrieval seed for memory.
    pub cavity_seed: CavityInit,
    pub nodes: usize,
    pub cavities: usize,
    pub open_system: bool,
    pub dt_per_t: usize,
    pub fock_dim: usize,
    pub output_path: Option<PathBuf>,
    pub haar_average: bool,
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn new(experiment: ExperimentKind) -> Self {
        Self {
            experiment,
            delta_over_g: 10.0,
            kappa_over_g: 0.002,
            g_tau: 0.0,
            sweep: experiment.default_sweep().map(|(v, start, stop, points)| Sweep {
                variable: v.to_string(),
                start,
                stop,
                points,
            }),
            alpha: C64::new(FRAC_1_SQRT_2, 0.0),
            beta: C64::new(FRAC_1_SQRT_2, 0.0),
            alpha_prime: ONE,
            beta_prime: ZERO,
            cavity_seed: CavityInit::ZeroOne,
            nodes: 2,
            cavities: 2,
            open_system: true,
            dt_per_t: crate::dynamics::DEFAULT_STEPS_PER_PULSE,
            fock_dim: crate::model::DEFAULT_FOCK_DIM,
            output_path: None,
            haar_average: false,
            seed: DEFAULT_HAAR_SEED,
        }
    }

    pub fn params(&self) -> Result<PhysicalParams> {
        PhysicalParams::dimensionless(self.delta_over_g, self.kappa_over_g)
    }

    fn runner(&self, params: PhysicalParams, open_system: bool) -> Result<ProtocolRunner> {
        ProtocolRunner::new(
            params,
            RunOptions {
                open_system,
                steps_per_pulse: self.dt_per_t,
                fock_dim: self.fock_dim,
            },
        )
    }

    /// `T_π` for the configured detuning.
    pub fn pulse_time(&self) -> Result<f64> {
        Ok(crate::model::pulse_duration(&self.params()?, PulseArea::PI))
    }
}

fn parse_real(value: &str) -> std::result::Result<f64, String> {
    let x: f64 = value.parse().map_err(|_| format!("malformed number `{value}`"))?;
    if !x.is_finite() {
        return Err(format!("non-finite number `{value}`"));
    }
    Ok(x)
}

fn parse_complex(value: &str) -> std::result::Result<C64, String> {
    let compact: String = value.chars().filter(|c| !c.is_whitespace()).collect();
    let z: C64 = compact
        .parse()
        .map_err(|_| format!("malformed complex number `{value}`"))?;
    if !(z.re.is_finite() && z.im.is_finite()) {
        return Err(format!("non-finite number `{value}`"));
    }
    Ok(z)
}

fn parse_count(value: &str) -> std::result::Result<usize, String> {
    value.parse().map_err(|_| format!("malformed integer `{value}`"))
}

fn parse_bool(value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        other => Err(format!("malformed boolean `{other}`")),
    }
}

fn parse_seed(value: &str) -> std::result::Result<CavityInit, String> {
    let digits: String = value.chars().filter(char::is_ascii_digit).collect();
    match digits.as_str() {
        "01" => Ok(CavityInit::ZeroOne),
        "10" => Ok(CavityInit::OneZero),
        _ => Err(format!("cavity seed must be `01` or `10`, got `{value}`")),
    }
}

const KEYS: &[&str] = &[
    "experiment",
    "delta_over_g",
    "kappa_over_g",
    "g_tau",
    "sweep_variable",
    "sweep_start",
    "sweep_stop",
    "sweep_points",
    "alpha",
    "beta",
    "alpha_prime",
    "beta_prime",
    "gamma",
    "delta",
    "cavity_seed",
    "nodes",
    "cavities",
    "open_system",
    "dt_per_T",
    "fock_dim",
    "output_path",
    "haar_average",
    "seed",
];

/// Parses the `key = value` format and fills defaults.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut entries: HashMap<&str, (usize, &str)> = HashMap::new();
    for (k, raw) in text.lines().enumerate() {
        let line = k + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| Error::Parse {
            line,
            message: format!("expected `key = value`, got `{content}`"),
        })?;
        let (key, value) = (key.trim(), value.trim());
        if !KEYS.contains(&key) {
            return Err(Error::Parse {
                line,
                message: format!("unknown key `{key}`"),
            });
        }
        if value.is_empty() {
            return Err(Error::Parse {
                line,
                message: format!("missing value for `{key}`"),
            });
        }
        if let Some((first, _)) = entries.insert(key, (line, value)) {
            return Err(Error::Parse {
                line,
                message: format!("duplicate key `{key}` (first on line {first})"),
            });
        }
    }

    let get = |key: &str| entries.get(key).copied();
    fn field<T>(
        entry: Option<(usize, &str)>,
        parse: impl Fn(&str) -> std::result::Result<T, String>,
    ) -> Result<Option<T>> {
        entry
            .map(|(line, v)| parse(v).map_err(|message| Error::Parse { line, message }))
            .transpose()
    }
    let line_of = |key: &str| get(key).map(|(l, _)| l).unwrap_or(0);

    let experiment = field(get("experiment"), ExperimentKind::from_str)?.ok_or(Error::Parse {
        line: 0,
        message: "missing required key `experiment`".into(),
    })?;
    let mut cfg = ExperimentConfig::new(experiment);

    if let Some(x) = field(get("delta_over_g"), parse_real)? {
        cfg.delta_over_g = x;
    }
    if let Some(x) = field(get("kappa_over_g"), parse_real)? {
        cfg.kappa_over_g = x;
    }
    if let Some(x) = field(get("g_tau"), parse_real)? {
        cfg.g_tau = x;
    }
    for (key, slot) in [
        ("alpha", &mut cfg.alpha),
        ("beta", &mut cfg.beta),
        ("alpha_prime", &mut cfg.alpha_prime),
        ("beta_prime", &mut cfg.beta_prime),
    ] {
        if let Some(z) = field(get(key), parse_complex)? {
            *slot = z;
        }
    }
    if let Some(s) = field(get("cavity_seed"), parse_seed)? {
        cfg.cavity_seed = s;
    }
    let gamma = field(get("gamma"), parse_complex)?;
    let delta = field(get("delta"), parse_complex)?;
    match (gamma, delta) {
        (None, None) => {}
        (Some(gamma), Some(delta)) => {
            if get("cavity_seed").is_some() {
                return Err(Error::Parse {
                    line: line_of("gamma").max(line_of("delta")),
                    message: "give either `cavity_seed` or `gamma`/`delta`, not both".into(),
                });
            }
            cfg.cavity_seed = CavityInit::Superposition { gamma, delta };
        }
        _ => {
            return Err(Error::Parse {
                line: line_of("gamma").max(line_of("delta")),
                message: "`gamma` and `delta` must be given together".into(),
            })
        }
    }
    if let Some(n) = field(get("nodes"), parse_count)? {
        cfg.nodes = n;
    }
    if let Some(n) = field(get("cavities"), parse_count)? {
        cfg.cavities = n;
    }
    if let Some(b) = field(get("open_system"), parse_bool)? {
        cfg.open_system = b;
    }
    if let Some(n) = field(get("dt_per_T"), parse_count)? {
        cfg.dt_per_t = n;
    }
    if let Some(n) = field(get("fock_dim"), parse_count)? {
        cfg.fock_dim = n;
    }
    if let Some((_, p)) = get("output_path") {
        cfg.output_path = Some(PathBuf::from(p));
    }
    if let Some(b) = field(get("haar_average"), parse_bool)? {
        cfg.haar_average = b;
    }
    if let Some(s) = field(get("seed"), |v| {
        v.parse::<u64>().map_err(|_| format!("malformed seed `{v}`"))
    })? {
        cfg.seed = s;
    }

    let sweep_keys = ["sweep_variable", "sweep_start", "sweep_stop", "sweep_points"];
    match cfg.sweep.as_mut() {
        Some(sweep) => {
            if let Some((line, v)) = get("sweep_variable") {
                if v != sweep.variable {
                    return Err(Error::Parse {
                        line,
                        message: format!("{} sweeps `{}`, not `{v}`", experiment.name(), sweep.variable),
                    });
                }
            }
            if let Some(x) = field(get("sweep_start"), parse_real)? {
                sweep.start = x;
            }
            if let Some(x) = field(get("sweep_stop"), parse_real)? {
                sweep.stop = x;
            }
            if let Some(n) = field(get("sweep_points"), parse_count)? {
                sweep.points = n;
            }
            if sweep.points < 2 {
                return Err(Error::Parse {
                    line: line_of("sweep_points"),
                    message: format!("a sweep needs at least 2 points, got {}", sweep.points),
                });
            }
        }
        None => {
            if let Some(key) = sweep_keys.iter().find(|k| get(k).is_some()) {
                return Err(Error::Parse {
                    line: line_of(key),
                    message: format!("{} does not take a sweep", experiment.name()),
                });
            }
        }
    }

    let check_pair = |a: C64, b: C64, keys: [&str; 2]| -> Result<()> {
        let n = a.norm_sqr() + b.norm_sqr();
        if (n - 1.0).abs() > 1e-12 {
            return Err(Error::Parse {
                line: line_of(keys[0]).max(line_of(keys[1])),
                message: format!("|{}|² + |{}|² = {n}, expected 1", keys[0], keys[1]),
            });
        }
        Ok(())
    };
    check_pair(cfg.alpha, cfg.beta, ["alpha", "beta"])?;
    check_pair(cfg.alpha_prime, cfg.beta_prime, ["alpha_prime", "beta_prime"])?;
    if let CavityInit::Superposition { gamma, delta } = cfg.cavity_seed {
        check_pair(gamma, delta, ["gamma", "delta"])?;
    }

    let positive = |ok: bool, key: &str, message: &str| -> Result<()> {
        if ok {
            Ok(())
        } else {
            Err(Error::Parse {
                line: line_of(key),
                message: message.to_string(),
            })
        }
    };
    positive(cfg.delta_over_g > 0.0, "delta_over_g", "delta_over_g must be positive")?;
    positive(
        cfg.kappa_over_g >= 0.0,
        "kappa_over_g",
        "kappa_over_g must be non-negative",
    )?;
    positive(cfg.g_tau >= 0.0, "g_tau", "g_tau must be non-negative")?;
    positive(cfg.dt_per_t > 0, "dt_per_T", "dt_per_T must be positive")?;
    positive(cfg.fock_dim >= 2, "fock_dim", "fock_dim must be at least 2")?;
    positive(cfg.nodes >= 2, "nodes", "a network needs at least 2 nodes")?;
    positive(cfg.cavities >= 1, "cavities", "a relay needs at least 1 cavity")?;
    if matches!(experiment, ExperimentKind::Memory) && matches!(cfg.cavity_seed, CavityInit::Superposition { .. }) {
        return Err(Error::Parse {
            line: line_of("gamma"),
            message: "memory retrieval needs a basis seed".into(),
        });
    }
    if matches!(experiment, ExperimentKind::Fig3a | ExperimentKind::Fig3b) && !cfg.open_system {
        return Err(Error::Parse {
            line: line_of("open_system"),
            message: format!("{} is an open-system experiment", experiment.name()),
        });
    }
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    parse_config(&std::fs::read_to_string(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Cell {
    Int(i64),
    Real(f64),
}

/// Real number with 12 significant digits in positional notation.
pub fn format_real(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{x:.11e}");
    let exp: i32 = sci[sci.find('e').expect("exponent") + 1..]
        .parse()
        .expect("integer exponent");
    let decimals = (11 - exp).max(0) as usize;
    let s = format!("{x:.decimals$}");
    if s.starts_with('-') && s.bytes().all(|b| matches!(b, b'-' | b'0' | b'.')) {
        s[1..].to_string()
    } else {
        s
    }
}

impl Cell {
    fn render(&self) -> String {
        match *self {
            Cell::Int(k) => k.to_string(),
            Cell::Real(x) => format_real(x),
        }
    }
}

/// Rectangular numeric table with a header row.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    header: Vec<String>,
    rows: Vec<Vec<Cell>>,
}

impl CsvTable {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) -> Result<()> {
        if row.len() != self.header.len() {
            return Err(Error::Contract(format!(
                "row has {} cells, header has {}",
                row.len(),
                self.header.len()
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn header(&self) -> &[String] {
        &self.header
    }

    pub fn rows(&self) -> &[Vec<Cell>] {
        &self.rows
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.header.iter().position(|h| h == name)?;
        Some(
            self.rows
                .iter()
                .map(|r| match r[k] {
                    Cell::Int(i) => i as f64,
                    Cell::Real(x) => x,
                })
                .collect(),
        )
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(Cell::render).collect();
            let _ = writeln!(out, "{}", cells.join(","));
        }
        out
    }
}

pub fn write_csv(table: &CsvTable, path: &Path) -> Result<()> {
    std::fs::write(path, table.to_csv_string())?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct ExperimentRun {
    pub table: CsvTable,
    /// Every checkpoint passed the trace, Hermiticity and positivity checks.
    pub within_tolerance: bool,
}

/// Input pairs for the fig3a/fig3b sweeps: the configured `(α, β)`, or
/// `HAAR_SAMPLES` Haar-random qubit states from the configured seed.
fn fig3_inputs(cfg: &ExperimentConfig) -> Result<Vec<Amplitudes>> {
    if !cfg.haar_average {
        return Ok(vec![Amplitudes::new(cfg.alpha, cfg.beta)?]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..HAAR_SAMPLES)
        .map(|_| {
            let v: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            Amplitudes::new(C64::new(v[0] / n, v[1] / n), C64::new(v[2] / n, v[3] / n))
        })
        .collect()
}

fn cavity_node(label: &str, init: CavityInit) -> Result<CavityNode> {
    CavityNode::new(label, init)
}

fn sweep_values(cfg: &ExperimentConfig) -> Vec<f64> {
    cfg.sweep.as_ref().map(Sweep::values).unwrap_or_default()
}

fn run_fig3(cfg: &ExperimentConfig) -> Result<ExperimentRun> {
    let inputs = fig3_inputs(cfg)?;
    let cavity = cavity_node("C1", cfg.cavity_seed)?;
    let b = AtomSpec::new(cfg.alpha_prime, cfg.beta_prime)?;
    let variable = cfg.sweep.as_ref().map(|s| s.variable.clone()).unwrap_or_default();
    let rows: Vec<(f64, f64, bool)> = sweep_values(cfg)
        .par_iter()
        .map(|&x| -> Result<(f64, f64, bool)> {
            let mut total = 0.0;
            let mut ok = true;
            for input in &inputs {
                let a = AtomSpec::from_amplitudes(*input);
                let outcome = match cfg.experiment {
                    ExperimentKind::Fig3a => {
                        let runner = cfg.runner(cfg.params()?.with_kappa(x), true)?;
                        runner.qst_first_step(a, &cavity)?
                    }
                    _ => cfg.runner(cfg.params()?, true)?.qst_two_atoms(a, b, &cavity, x)?,
                };
                let label = if cfg.experiment == ExperimentKind::Fig3a {
                    "A+C1"
                } else {
                    "B"
                };
                total += outcome
                    .fidelity(label)
                    .ok_or_else(|| Error::Contract(format!("no `{label}` target")))?;
                ok &= outcome.diagnostics_ok();
            }
            Ok((x, total / inputs.len() as f64, ok))
        })
        .collect::<Result<_>>()?;
    let mut table = CsvTable::new([variable.as_str(), "fidelity"]);
    let mut within = true;
    for (x, f, ok) in rows {
        table.push(vec![Cell::Real(x), Cell::Real(f)])?;
        within &= ok;
    }
    Ok(ExperimentRun {
        table,
        within_tolerance: within,
    })
}

fn run_discrepancy(cfg: &ExperimentConfig) -> Result<ExperimentRun> {
    let layout = crate::hilbert::SystemLayout::new([("atom", 2), ("a", cfg.fock_dim), ("b", cfg.fock_dim)])?;
    let input = basis_state(&layout, &[crate::model::LEVEL_G, 1, 0])?;
    let rows: Vec<(f64, f64)> = sweep_values(cfg)
        .par_iter()
        .map(|&d| {
            let params = PhysicalParams::dimensionless(d, 0.0)?;
            Ok((d, model_discrepancy(&params, PulseArea::PI, &input)?))
        })
        .collect::<Result<_>>()?;
    let mut table = CsvTable::new(["delta_over_g", "discrepancy"]);
    for (d, x) in rows {
        table.push(vec![Cell::Real(d), Cell::Real(x)])?;
    }
    Ok(ExperimentRun {
        table,
        within_tolerance: true,
    })
}

/// Runs the configured protocol and returns the outcome together with the
/// label of its headline target.
pub fn run_protocol(cfg: &ExperimentConfig) -> Result<(ProtocolOutcome, String)> {
    let runner = cfg.runner(cfg.params()?, cfg.open_system)?;
    let source = Amplitudes::new(cfg.alpha, cfg.beta)?;
    let career = AtomSpec::new(cfg.alpha_prime, cfg.beta_prime)?;
    let fresh = |label: &str| cavity_node(label, CavityInit::ZeroOne);
    Ok(match cfg.experiment {
        ExperimentKind::Qst => {
            let cavity = cavity_node("C1", cfg.cavity_seed)?;
            let out = runner.qst_two_atoms(AtomSpec::from_amplitudes(source), career, &cavity, cfg.g_tau)?;
            (out, "B".into())
        }
        ExperimentKind::Relay => {
            let cavities: Vec<CavityNode> = (1..=cfg.cavities)
                .map(|k| fresh(&format!("C{k}")))
                .collect::<Result<_>>()?;
            let mut atoms = vec![AtomSpec::from_amplitudes(source)];
            atoms.extend(std::iter::repeat_n(career, cfg.cavities));
            (runner.relay_chain(&atoms, &cavities, &[])?, atom_name(cfg.cavities))
        }
        ExperimentKind::Network => {
            let nodes: Vec<CavityNode> = (1..=cfg.nodes)
                .map(|k| fresh(&format!("C{k}")))
                .collect::<Result<_>>()?;
            (runner.network_transfer(source, &nodes)?, format!("C{}", cfg.nodes))
        }
        ExperimentKind::Entangle => (runner.spread_entanglement()?, "C1+C2".into()),
        ExperimentKind::Memory => (
            runner.memory_round_trip(source, career, cfg.cavity_seed, cfg.g_tau)?,
            "C2".into(),
        ),
        other => {
            return Err(Error::Parameter(format!(
                "{} is not a protocol experiment",
                other.name()
            )))
        }
    })
}

fn protocol_table(cfg: &ExperimentConfig) -> Result<ExperimentRun> {
    let (outcome, headline) = run_protocol(cfg)?;
    let with_concurrence = cfg.experiment == ExperimentKind::Entangle;
    let mut header = vec![
        "checkpoint",
        "g_time",
        "fidelity",
        "reference_fidelity",
        "purity",
        "trace_error",
        "hermiticity_error",
        "min_eigenvalue",
    ];
    if with_concurrence {
        header.push("concurrence");
    }
    let mut table = CsvTable::new(header);
    for (k, cp) in outcome.trail.iter().enumerate() {
        let d = &cp.diagnostics;
        let mut row = vec![
            Cell::Int(k as i64 + 1),
            Cell::Real(cp.time),
            Cell::Real(outcome.fidelity_at(cp, &headline)?),
            Cell::Real(cp.fidelity),
            Cell::Real(d.purity),
            Cell::Real(d.trace_error),
            Cell::Real(d.hermiticity_error),
            Cell::Real(d.min_eigenvalue),
        ];
        if with_concurrence {
            let rho = cp.state.to_density();
            let encoded = encode_cavity_qubits(
                &rho,
                (&mode_a_label("C1"), &mode_b_label("C1")),
                (&mode_a_label("C2"), &mode_b_label("C2")),
            )?;
            row.push(Cell::Real(concurrence(&encoded)?));
        }
        table.push(row)?;
    }
    Ok(ExperimentRun {
        table,
        within_tolerance: outcome.diagnostics_ok(),
    })
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentRun> {
    match cfg.experiment {
        ExperimentKind::Fig3a | ExperimentKind::Fig3b => run_fig3(cfg),
        ExperimentKind::Discrepancy => run_discrepancy(cfg),
        _ => protocol_table(cfg),
    }
}

/// One line of the built-in invariant suite.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfTestResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Quick closed-system invariant checks, independent of any config file.
pub fn selftest() -> Vec<SelfTestResult> {
    type Check = fn() -> Result<(bool, String)>;
    let checks: [(&'static str, Check); 6] = [
        ("pi-pulse sign table", selftest_sign_table),
        ("two-atom transfer", selftest_transfer),
        ("relay through two cavities", selftest_relay),
        ("memory round trip", selftest_memory),
        ("entanglement spreading", selftest_entangle),
        ("csv determinism", selftest_csv),
    ];
    checks
        .into_iter()
        .map(|(name, check)| match check() {
            Ok((passed, detail)) => SelfTestResult { name, passed, detail },
            Err(e) => SelfTestResult {
                name,
                passed: false,
                detail: e.to_string(),
            },
        })
        .collect()
}

fn closed_runner() -> Result<ProtocolRunner> {
    ProtocolRunner::new(PhysicalParams::dimensionless(10.0, 0.0)?, RunOptions::closed())
}

fn selftest_sign_table() -> Result<(bool, String)> {
    use crate::dynamics::evolve_unitary;
    use crate::model::effective_hamiltonian;
    let params = PhysicalParams::dimensionless(10.0, 0.0)?;
    let layout = crate::hilbert::SystemLayout::new([("atom", 2), ("a", 2), ("b", 2)])?;
    let h = effective_hamiltonian(&params, &layout)?;
    let t = crate::model::pulse_duration(&params, PulseArea::PI);
    let cases = [
        ([0, 1, 0], [1, 0, 1], -1.0),
        ([1, 0, 1], [0, 1, 0], -1.0),
        ([0, 0, 1], [0, 0, 1], 1.0),
        ([1, 1, 0], [1, 1, 0], 1.0),
    ];
    let mut worst: f64 = 0.0;
    for (from, to, sign) in cases {
        let out = evolve_unitary(&h, &basis_state(&layout, &from)?, t)?;
        let target = basis_state(&layout, &to)?.scaled(C64::new(sign, 0.0));
        worst = worst.max((out.amplitudes() - target.amplitudes()).norm());
    }
    Ok((worst < 1e-10, format!("max deviation {worst:.2e}")))
}

fn selftest_transfer() -> Result<(bool, String)> {
    let a = AtomSpec::new(C64::new(0.6, 0.0), C64::new(0.0, 0.8))?;
    let b = AtomSpec::new(C64::new(0.8, 0.0), C64::new(-0.6, 0.0))?;
    let out = closed_runner()?.qst_two_atoms(a, b, &cavity_node("C1", CavityInit::ZeroOne)?, 1.0)?;
    let f = out.fidelity("B").unwrap_or(0.0);
    Ok((f > 1.0 - 1e-9, format!("F(B) = {f:.12}")))
}

fn selftest_relay() -> Result<(bool, String)> {
    let a = AtomSpec::new(C64::new(0.6, 0.0), C64::new(0.0, 0.8))?;
    let cavities = [
        cavity_node("C1", CavityInit::ZeroOne)?,
        cavity_node("C2", CavityInit::ZeroOne)?,
    ];
    let out = closed_runner()?.relay_chain(&[a, AtomSpec::ground(), AtomSpec::ground()], &cavities, &[])?;
    let f = out.fidelity("C").unwrap_or(0.0);
    Ok((f > 1.0 - 1e-9, format!("F(C) = {f:.12}")))
}

fn selftest_memory() -> Result<(bool, String)> {
    let e = Amplitudes::real(0.6, 0.8)?;
    let mut worst: f64 = 1.0;
    for seed in [CavityInit::ZeroOne, CavityInit::OneZero] {
        let out = closed_runner()?.memory_round_trip(e, AtomSpec::ground(), seed, 2.0)?;
        worst = worst.min(out.fidelity("C2").unwrap_or(0.0));
    }
    Ok((worst > 1.0 - 1e-9, format!("min F(C2) = {worst:.12}")))
}

fn selftest_entangle() -> Result<(bool, String)> {
    let out = closed_runner()?.spread_entanglement()?;
    let c = out.concurrence.unwrap_or(0.0);
    Ok((c > 1.0 - 1e-6, format!("concurrence = {c:.12}")))
}

fn selftest_csv() -> Result<(bool, String)> {
    let mut cfg = ExperimentConfig::new(ExperimentKind::Fig3a);
    cfg.sweep = Some(Sweep {
        variable: "kappa_over_g".into(),
        start: 0.0,
        stop: 0.004,
        points: 3,
    });
    cfg.dt_per_t = 200;
    let first = run_experiment(&cfg)?.table.to_csv_string();
    let second = run_experiment(&cfg)?.table.to_csv_string();
    Ok((first == second, format!("{} bytes", first.len())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn twelve_significant_digits() {
        assert_eq!(format_real(1.0), "1.00000000000");
        assert_eq!(format_real(0.0), "0.00000000000");
        assert_eq!(format_real(-0.0), "0.00000000000");
        assert_eq!(format_real(-1e-300 * 1e-300), "0.00000000000");
        assert_eq!(format_real(0.5), "0.500000000000");
        assert_eq!(format_real(20.0), "20.0000000000");
        assert_eq!(format_real(-0.002), "-0.00200000000000");
        assert_eq!(format_real(9.99999999999951), "10.0000000000");
        assert_eq!(format_real(123456789012345.0), "123456789012345");
    }

    #[test]
    fn minimal_fig3a_config_gets_defaults() {
        let cfg = parse_config("experiment = fig3a\n").unwrap();
        assert_eq!(cfg.delta_over_g, 10.0);
        assert_eq!(cfg.kappa_over_g, 0.002);
        assert_eq!(cfg.dt_per_t, 2000);
        assert!((cfg.alpha.re - FRAC_1_SQRT_2).abs() < 1e-15);
        let sweep = cfg.sweep.unwrap();
        assert_eq!((sweep.start, sweep.stop, sweep.points), (0.0, 0.01, 50));
        let v = sweep.values();
        assert_eq!(v.len(), 50);
        assert_eq!(v[49], 0.01);
    }

    #[test]
    fn qst_pulse_time_is_five_pi() {
        let cfg = parse_config("experiment = qst\ndelta_over_g = 10\n").unwrap();
        assert!((cfg.pulse_time().unwrap() - 5.0 * std::f64::consts::PI).abs() < 1e-12);
    }

    #[test]
    fn amplitudes_and_comments() {
        let cfg =
            parse_config("# memory\nexperiment = memory  # trailing\nalpha = 0.6\nbeta = 0.8\ncavity_seed = |1,0>\n")
                .unwrap();
        assert_eq!(cfg.alpha, C64::new(0.6, 0.0));
        assert_eq!(cfg.cavity_seed, CavityInit::OneZero);
        let cfg = parse_config("experiment = qst\nalpha = 0.6\nbeta = 0+0.8i\n").unwrap();
        assert_eq!(cfg.beta, C64::new(0.0, 0.8));
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = |text: &str| match parse_config(text) {
            Err(Error::Parse { line, .. }) => line,
            other => panic!("expected parse error, got {other:?}"),
        };
        assert_eq!(err("experiment = fig3a\nbogus = 1\n"), 2);
        assert_eq!(err("experiment = fig3a\n\nkappa_over_g = abc\n"), 3);
        assert_eq!(err("experiment = qst\nalpha = 0.6\nbeta = 0.7\n"), 3);
        assert_eq!(err("experiment = fig3b\nsweep_points = 1\n"), 2);
        assert_eq!(err("experiment = qst\nsweep_points = 3\n"), 2);
        assert_eq!(err("experiment = warp\n"), 1);
        assert_eq!(err("experiment = qst\nexperiment = qst\n"), 2);
        assert_eq!(err("kappa_over_g = 0.1\n"), 0);
        assert_eq!(err("experiment = qst\nno equals sign\n"), 2);
    }

    #[test]
    fn csv_layout() {
        let mut t = CsvTable::new(["checkpoint", "fidelity"]);
        t.push(vec![Cell::Int(1), Cell::Real(1.0)]).unwrap();
        assert!(t.push(vec![Cell::Int(2)]).is_err());
        assert_eq!(t.to_csv_string(), "checkpoint,fidelity\n1,1.00000000000\n");
    }

    #[test]
    fn haar_inputs_are_seeded_and_normalized() {
        let mut cfg = ExperimentConfig::new(ExperimentKind::Fig3a);
        cfg.haar_average = true;
        let a = fig3_inputs(&cfg).unwrap();
        let b = fig3_inputs(&cfg).unwrap();
        assert_eq!(a.len(), HAAR_SAMPLES);
        assert_eq!(a, b);
        cfg.seed += 1;
        assert_ne!(fig3_inputs(&cfg).unwrap(), a);
    }

    #[test]
    fn closed_protocol_tables() {
        for kind in ["qst", "relay", "network", "entangle", "memory"] {
            let cfg = parse_config(&format!("experiment = {kind}\nopen_system = false\n")).unwrap();
            let run = run_experiment(&cfg).unwrap();
            assert!(run.within_tolerance);
            let f = run.table.column("fidelity").unwrap();
            assert!((f.last().unwrap() - 1.0).abs() < 1e-9, "{kind}: {f:?}");
        }
    }

    #[test]
    fn selftest_passes() {
        for r in selftest() {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }
}

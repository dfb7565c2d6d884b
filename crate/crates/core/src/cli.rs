//! Command line front end: configuration files, subcommands and machine-readable outputs.
//!
//! Exit codes: 0 success, 1 configuration error, 2 first-step failure, 3 flow failure,
//! 4 validation failure.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::feshbach::{isospectral_test, planted_pair};
use crate::firststep::{
    check_coupling, first_step_ledger, initial_kernels_on, neumann_ratio, LambdaEstimate, TwoLevelResolventData,
};
use crate::fockspace::ModeGrid;
use crate::kernels::{NormLedger, RtGrid, KERNEL_SCHEMA};
use crate::model::{parse_lines, sigma_x, ModelParams, Vec3};
use crate::oracle::{
    build_fiber_hamiltonian, dispersion_sweep, effective_mass, ground_energy, oracle_basis, pt2_energy, write_csv,
};
use crate::rgflow::{run_flow, run_flow_observed, FlowOptions, FlowState};
use crate::wick::{reassembly_check, ProductKernels, SmoothResolvent};

pub const FIRST_STEP_SCHEMA: &str = "first-step-report/1";
pub const TRACE_SCHEMA: &str = "flow-trace/1";

#[derive(Debug, Parser)]
#[command(
    name = "dipole-rg",
    version,
    about = "Spectral renormalization group for a two-level dipole in a quantized field"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print every configuration key with its value and description.
    ConfigDump {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Build the first-step kernel sequence and write it with a report.
    FirstStep {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run the renormalization flow and write the per-iteration trace.
    Flow {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Sweep momenta symmetric about 0 and write the dispersion CSV.
    Dispersion {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Skip the RG energies (oracle and second order only).
        #[arg(long)]
        oracle_only: bool,
    },
    /// Lowest eigenvalue of the truncated fiber Hamiltonian.
    Oracle {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run the cross-validation checks; exit 4 if any fails.
    Validate {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Compare Wick-ordered products with direct operator products.
    WickCheck {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

/// Model parameters plus run settings.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub params: ModelParams,
    /// Sweep half width in units of m.
    pub sweep_max: f64,
    /// Number of sweep points (odd, symmetric about 0).
    pub sweep_points: usize,
    /// Spectral parameter of the first-step output.
    pub zeta: f64,
    pub seed: u64,
    pub output: PathBuf,
}

/// Run keys in dump order.
pub const RUN_KEYS: &[(&str, &str)] = &[
    ("sweep_max", "dispersion sweep half width in units of m"),
    ("sweep_points", "dispersion sweep points, odd, symmetric about 0"),
    ("zeta", "spectral parameter of the first-step kernel dump"),
    ("seed", "seed of all random draws"),
    ("output", "output directory"),
];

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            params: ModelParams::default(),
            sweep_max: 0.5,
            sweep_points: 9,
            zeta: 0.0,
            seed: 7,
            output: PathBuf::from("."),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (key, value, _) in parse_lines(text)? {
            let bad = |reason: &str| Error::InvalidParameter {
                name: RUN_KEYS.iter().find(|k| k.0 == key).map(|k| k.0).unwrap_or("run key"),
                value: value.clone(),
                reason: reason.to_string(),
            };
            match key.as_str() {
                "sweep_max" => cfg.sweep_max = value.parse().map_err(|_| bad("not a number"))?,
                "sweep_points" => cfg.sweep_points = value.parse().map_err(|_| bad("not an integer"))?,
                "zeta" => cfg.zeta = value.parse().map_err(|_| bad("not a number"))?,
                "seed" => cfg.seed = value.parse().map_err(|_| bad("not an integer"))?,
                "output" => cfg.output = PathBuf::from(value.as_str()),
                _ => cfg.params.apply(&key, &value)?,
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::InvalidParameter {
                    name: "config",
                    value: p.display().to_string(),
                    reason: e.to_string(),
                })?;
                RunConfig::parse(&text)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if self.sweep_points < 5 || self.sweep_points % 2 == 0 {
            return Err(Error::InvalidParameter {
                name: "sweep_points",
                value: self.sweep_points.to_string(),
                reason: "must be odd and at least 5".into(),
            });
        }
        if !(self.sweep_max > 0.0 && self.sweep_max < 1.0) {
            return Err(Error::InvalidParameter {
                name: "sweep_max",
                value: self.sweep_max.to_string(),
                reason: "must lie in (0, 1)".into(),
            });
        }
        if !(self.zeta.abs() < self.params.mu() / 2.0) {
            return Err(Error::InvalidParameter {
                name: "zeta",
                value: self.zeta.to_string(),
                reason: "must satisfy |zeta| < mu/2".into(),
            });
        }
        Ok(())
    }

    pub fn dump(&self) -> String {
        let mut s = self.params.dump();
        let values = [
            format!("{:?}", self.sweep_max),
            self.sweep_points.to_string(),
            format!("{:?}", self.zeta),
            self.seed.to_string(),
            self.output.display().to_string(),
        ];
        for ((key, doc), v) in RUN_KEYS.iter().zip(values) {
            let _ = writeln!(s, "# {doc}");
            let _ = writeln!(s, "{key} = {v}");
        }
        s
    }

    /// Symmetric sweep momenta.
    pub fn sweep(&self) -> Vec<f64> {
        let half = (self.sweep_points / 2) as i64;
        (-half..=half)
            .map(|i| i as f64 * self.sweep_max * self.params.m / half as f64)
            .collect()
    }

    fn out_path(&self, name: &str) -> Result<PathBuf> {
        fs::create_dir_all(&self.output)?;
        Ok(self.output.join(name))
    }
}

#[derive(Serialize)]
struct FirstStepReport<'a> {
    schema: &'static str,
    kernel_schema: &'static str,
    lambda0: f64,
    zeta: f64,
    estimate: &'a LambdaEstimate,
    neumann_ratio: f64,
    margin_b1: f64,
    margin_b2: f64,
    margin_b1_target: f64,
    ledger: &'a NormLedger,
}

#[derive(Serialize)]
struct Trace<'a> {
    schema: &'static str,
    lambda0: f64,
    p: [f64; 3],
    z_inf: f64,
    converged: bool,
    states: &'a [FlowState],
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Runs one command and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::ConfigDump { config } => {
            let cfg = RunConfig::load(config.as_deref())?;
            print!("{}", cfg.dump());
            Ok(0)
        }
        Command::FirstStep { config } => first_step(&RunConfig::load(config.as_deref())?),
        Command::Flow { config } => flow(&RunConfig::load(config.as_deref())?),
        Command::Dispersion { config, oracle_only } => dispersion(&RunConfig::load(config.as_deref())?, oracle_only),
        Command::Oracle { config } => oracle(&RunConfig::load(config.as_deref())?),
        Command::Validate { config } => validate(&RunConfig::load(config.as_deref())?),
        Command::WickCheck { config } => wick_check(&RunConfig::load(config.as_deref())?),
    }
}

fn first_step(cfg: &RunConfig) -> Result<i32> {
    let params = &cfg.params;
    let estimate = check_coupling(params)?;
    let grid = Arc::new(ModeGrid::new(params)?);
    let rt = Arc::new(RtGrid::new(params)?);
    let zeta = Complex64::from(cfg.zeta);
    let seq = initial_kernels_on(params, &grid, &rt, zeta)?;
    let ledger = first_step_ledger(params, &seq)?;
    let (margin_b1, margin_b2) = TwoLevelResolventData::new(params, zeta).margins();
    let report = FirstStepReport {
        schema: FIRST_STEP_SCHEMA,
        kernel_schema: KERNEL_SCHEMA,
        lambda0: params.lambda0,
        zeta: cfg.zeta,
        estimate: &estimate,
        neumann_ratio: neumann_ratio(params, &grid, zeta),
        margin_b1,
        margin_b2,
        margin_b1_target: params.mu() * params.rho0 / 4.0,
        ledger: &ledger,
    };
    write_json(&cfg.out_path("first_step_kernels.json")?, &seq.dump())?;
    write_json(&cfg.out_path("first_step_report.json")?, &report)?;
    println!(
        "first step: lambda0 = {:e}, lambda_c = {:e}, gamma = {:e}, delta = {:e}, eps = {:e}",
        params.lambda0, estimate.lambda_c, ledger.gamma, ledger.delta, ledger.eps
    );
    Ok(0)
}

fn flow(cfg: &RunConfig) -> Result<i32> {
    let params = &cfg.params;
    check_coupling(params)?;
    let mut last: Option<FlowState> = None;
    let result = run_flow_observed(params, &FlowOptions::new(params), &mut |s| last = Some(s.clone()));
    let flow = match result {
        Ok(f) => f,
        Err(e) => {
            if let Some(s) = last {
                eprintln!(
                    "last good ledger (iteration {}): {}",
                    s.n,
                    serde_json::to_string(&s.ledger)?
                );
            }
            return Err(e);
        }
    };
    let trace = Trace {
        schema: TRACE_SCHEMA,
        lambda0: params.lambda0,
        p: [params.p.x, params.p.y, params.p.z],
        z_inf: flow.z_inf,
        converged: flow.converged,
        states: &flow.history,
    };
    write_json(&cfg.out_path("flow_trace.json")?, &trace)?;
    println!(
        "z_inf = {:.15e}, alpha = {:.12}, beta = [{:.12}, {:.12}, {:.12}], iterations = {}, converged = {}",
        flow.z_inf,
        flow.alpha,
        flow.beta.x,
        flow.beta.y,
        flow.beta.z,
        flow.history.len(),
        flow.converged
    );
    Ok(if flow.converged { 0 } else { 3 })
}

fn dispersion(cfg: &RunConfig, oracle_only: bool) -> Result<i32> {
    let params = &cfg.params;
    let ps = cfg.sweep();
    let records = dispersion_sweep(params, &ps, |prm| {
        if oracle_only {
            return None;
        }
        run_flow(prm, &FlowOptions::new(prm)).ok().map(|f| f.z_inf)
    })?;
    let mass = effective_mass(&records, params.m)?;
    let path = cfg.out_path("dispersion.csv")?;
    write_csv(&records, Some(mass.second_difference), fs::File::create(&path)?)?;
    write_json(&cfg.out_path("dispersion_summary.json")?, &mass)?;
    println!(
        "{} momenta, m_eff = {:.10} (second difference), {:.10} (fit), fit residual {:e}",
        records.len(),
        mass.second_difference,
        mass.fit,
        mass.fit_residual
    );
    Ok(0)
}

fn oracle(cfg: &RunConfig) -> Result<i32> {
    let params = &cfg.params;
    let grid = Arc::new(ModeGrid::new(params)?);
    let basis = oracle_basis(grid.clone(), params.n_max);
    let h = build_fiber_hamiltonian(params, &basis)?;
    let gs = ground_energy(&h, cfg.seed)?;
    println!(
        "{}",
        serde_json::json!({
            "dimension": basis.dim(),
            "energy": gs.energy,
            "gap": gs.next - gs.energy,
            "residual": gs.residual,
            "pt2": pt2_energy(params, &grid),
        })
    );
    Ok(0)
}

/// Outcome of one named check.
#[derive(Clone, Debug, Serialize)]
pub struct CheckLine {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

/// The cross-validation suite run by `validate`.
pub fn validation_suite(cfg: &RunConfig) -> Result<Vec<CheckLine>> {
    let params = &cfg.params;
    let mut lines = Vec::new();

    let free = params.with_lambda(0.0);
    let mut opt = FlowOptions::new(&free);
    opt.min_iter = 30;
    let f = run_flow(&free, &opt)?;
    let beta_err = (f.beta + free.p / free.m).norm();
    lines.push(CheckLine {
        name: "free flow".into(),
        pass: f.z_inf.abs() <= 1e-10 && (f.alpha - 1.0).abs() <= 1e-8 && beta_err <= 1e-8,
        detail: format!(
            "z_inf {:e}, |alpha-1| {:e}, |beta+p/m| {:e}",
            f.z_inf,
            (f.alpha - 1.0).abs(),
            beta_err
        ),
    });

    let wick = wick_report(cfg.seed)?;
    lines.push(CheckLine {
        name: "wick reassembly".into(),
        pass: wick.max_deviation <= 1e-11,
        detail: format!("{} sequences, max deviation {:e}", wick.sequences, wick.max_deviation),
    });

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut worst: f64 = 0.0;
    let mut pass = true;
    for i in 0..20 {
        let dim = 8 + (i % 4) * 4;
        let pair = planted_pair(&mut rng, dim, i % 3)?;
        let r = isospectral_test(&pair, 1e-9);
        pass &= r.pass && r.kernel_dim_h == i % 3;
        worst = worst.max(r.resolvent_residual.unwrap_or(r.q_chi_identity));
    }
    lines.push(CheckLine {
        name: "feshbach isospectrality".into(),
        pass,
        detail: format!("20 planted pairs, worst residual {worst:e}"),
    });

    if params.lambda0 > 0.0 {
        check_coupling(params)?;
        let flow = run_flow(params, &FlowOptions::new(params))?;
        let grid = Arc::new(ModeGrid::new(params)?);
        let basis = oracle_basis(grid, params.n_max);
        let gs = ground_energy(&build_fiber_hamiltonian(params, &basis)?, cfg.seed)?;
        let tol = (1e-3 * gs.energy.abs()).max(1e-8 * params.m);
        let diff = (flow.z_inf - gs.energy).abs();
        lines.push(CheckLine {
            name: "flow vs oracle".into(),
            pass: diff <= tol,
            detail: format!(
                "z_inf {:e}, E_oracle {:e}, |diff| {diff:e} (tol {tol:e})",
                flow.z_inf, gs.energy
            ),
        });
    }
    Ok(lines)
}

fn validate(cfg: &RunConfig) -> Result<i32> {
    let lines = validation_suite(cfg)?;
    let mut ok = true;
    for l in &lines {
        println!("{} {}: {}", if l.pass { "PASS" } else { "FAIL" }, l.name, l.detail);
        ok &= l.pass;
    }
    Ok(if ok { 0 } else { 4 })
}

/// The operator-identity suite on a fixed 2-mode grid with random kernels drawn from `seed`.
pub fn wick_report(seed: u64) -> Result<crate::wick::ReassemblyReport> {
    let momenta = [(Vec3::new(0.3, 0.0, 0.0), 0.7), (Vec3::new(-0.55, 0.0, 0.0), 0.4)];
    let grid = Arc::new(ModeGrid::from_momenta(1, &momenta, sigma_x(), 1.0));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kernels = ProductKernels::random(&mut rng, grid.len(), 2);
    let f = SmoothResolvent { a: 0.3, b: 0.2 };
    reassembly_check(&grid, &kernels, &f, 3, 3)
}

fn wick_check(cfg: &RunConfig) -> Result<i32> {
    let r = wick_report(cfg.seed)?;
    println!(
        "wick reassembly: {} sequences, max deviation {:e} (largest entry {:e})",
        r.sequences, r.max_deviation, r.max_entry
    );
    Ok(if r.max_deviation <= 1e-11 { 0 } else { 4 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_keys_roundtrip() {
        let mut cfg = RunConfig::default();
        cfg.seed = 11;
        cfg.sweep_points = 7;
        cfg.params.lambda0 = 0.003;
        let again = RunConfig::parse(&cfg.dump()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn unknown_key_is_a_config_error() {
        let e = RunConfig::parse("lambda = 0.1\n").unwrap_err();
        assert_eq!(e.exit_code(), 1);
    }

    #[test]
    fn sweep_is_symmetric() {
        let cfg = RunConfig::default();
        let s = cfg.sweep();
        assert_eq!(s.len(), 9);
        for (a, b) in s.iter().zip(s.iter().rev()) {
            assert_eq!(*a, -*b);
        }
        assert_eq!(s[4], 0.0);
    }
}

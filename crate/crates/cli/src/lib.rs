//! Experiment driver behind the `vaoi` binary: config ingestion, the five
//! subcommands, and deterministic artifact writing.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vaoi_core::analysis::{extract_thresholds, structure_report, ThresholdTable};
use vaoi_core::kernel::{build_kernel_with, DEFAULT_MAX_STATES};
use vaoi_core::sim::{
    simulate, standard_policies, sweep, sweep_csv, trace_csv, PolicyKind, PolicySpec, SimProtocol, SweepAxis,
    SweepPoint,
};
use vaoi_core::solver::{brute_force_optimal, solve_with_kernel_options, OracleOptions, SolveReport};
use vaoi_core::{Execution, KernelOptions, Policy, Solution, SolverSettings, StateSpace, SystemParams, ValueFunction};

/// Exit status of a command that ran to completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ok,
    /// RVI hit `max_iter` before the span dropped below epsilon.
    NotConverged,
    /// A structural check failed.
    CheckFailed,
    /// Some sweep rows could not be produced.
    SweepErrors,
}

impl Outcome {
    pub fn exit_code(self) -> i32 {
        match self {
            Outcome::Ok => 0,
            Outcome::NotConverged => 2,
            Outcome::CheckFailed => 3,
            Outcome::SweepErrors => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    /// Output file stem, e.g. `q_sweep`.
    pub name: String,
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    #[serde(default = "standard_policies")]
    pub policies: Vec<PolicyKind>,
    /// Base parameters for this sweep; falls back to the top-level `params`.
    #[serde(default)]
    pub params: Option<SystemParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplePathSpec {
    pub horizon: usize,
    pub replication: usize,
}

impl Default for SamplePathSpec {
    fn default() -> Self {
        SamplePathSpec {
            horizon: 200,
            replication: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSpec {
    pub max_policies: u64,
}

impl Default for OracleSpec {
    fn default() -> Self {
        OracleSpec { max_policies: 1 << 20 }
    }
}

/// One JSON document describing an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub params: SystemParams,
    #[serde(default)]
    pub solver: SolverSettings,
    #[serde(default)]
    pub protocol: SimProtocol,
    #[serde(default)]
    pub sweeps: Vec<SweepSpec>,
    #[serde(default)]
    pub samplepath: SamplePathSpec,
    #[serde(default)]
    pub oracle: OracleSpec,
    #[serde(default = "default_max_states")]
    pub max_states: usize,
    /// Not part of the fingerprint, so moving the output does not change any artifact.
    #[serde(default, skip_serializing)]
    pub out_dir: Option<PathBuf>,
}

fn default_max_states() -> usize {
    DEFAULT_MAX_STATES
}

/// Command-line overrides of individual config fields.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub epsilon: Option<f64>,
    pub exec: Option<Execution>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        cfg.params.validate().context("invalid params")?;
        for s in &cfg.sweeps {
            if let Some(p) = &s.params {
                p.validate()
                    .with_context(|| format!("invalid params in sweep {}", s.name))?;
            }
        }
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(dir) = &o.out_dir {
            self.out_dir = Some(dir.clone());
        }
        if let Some(seed) = o.seed {
            self.protocol.seed = seed;
        }
        if let Some(eps) = o.epsilon {
            self.solver.epsilon = eps;
        }
        if let Some(exec) = o.exec {
            self.solver.exec = exec;
            self.protocol.exec = exec;
        }
    }

    /// First 16 hex digits of the SHA-256 of the effective config as JSON.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json)[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    fn kernel_options(&self) -> KernelOptions {
        KernelOptions {
            max_states: self.max_states,
            causal_only: false,
            exec: self.solver.exec,
        }
    }
}

struct Artifacts {
    dir: PathBuf,
    fingerprint: String,
}

impl Artifacts {
    fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let dir = cfg.out_dir();
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Artifacts {
            dir,
            fingerprint: cfg.fingerprint(),
        })
    }

    /// Writes a CSV body behind a `# config_fingerprint=` comment line.
    fn csv(&self, name: &str, body: &str) -> Result<PathBuf> {
        self.write(name, format!("# config_fingerprint={}\n{body}", self.fingerprint))
    }

    fn json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf> {
        let mut doc = serde_json::to_value(value)?;
        if let Some(map) = doc.as_object_mut() {
            map.insert("config_fingerprint".into(), self.fingerprint.clone().into());
        }
        let mut text = serde_json::to_string_pretty(&doc)?;
        text.push('\n');
        self.write(name, text)
    }

    fn write(&self, name: &str, contents: String) -> Result<PathBuf> {
        let path = self.dir.join(name);
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

#[derive(Serialize)]
struct SolveDoc<'a> {
    params_fingerprint: String,
    state_count: usize,
    report: &'a SolveReport,
    thresholds: Option<&'a [Option<u32>]>,
}

fn solve_config(cfg: &ExperimentConfig) -> Result<Solution> {
    Ok(solve_with_kernel_options(
        &cfg.params,
        &cfg.solver,
        &cfg.kernel_options(),
    )?)
}

/// Solves the configured MDP and writes `policy.csv`, `values.csv`,
/// `solve_report.json` and, for age-independent policies, `thresholds.csv`.
pub fn cmd_solve(cfg: &ExperimentConfig) -> Result<Outcome> {
    let out = Artifacts::new(cfg)?;
    let sol = solve_config(cfg)?;
    let params_fp = cfg.params.fingerprint();

    let mut buf = format!("# config_fingerprint={}\n", out.fingerprint).into_bytes();
    sol.policy.write_csv(&mut buf)?;
    out.write("policy.csv", String::from_utf8(buf)?)?;
    let mut buf = format!("# config_fingerprint={}\n", out.fingerprint).into_bytes();
    sol.values.write_csv(&mut buf, &params_fp)?;
    out.write("values.csv", String::from_utf8(buf)?)?;

    // Only defined when the policy ignores node ages on causal states.
    let table = extract_thresholds(&sol.policy, &sol.space).ok();
    if let Some(t) = &table {
        out.csv("thresholds.csv", &t.to_csv())?;
    }
    out.json(
        "solve_report.json",
        &SolveDoc {
            params_fingerprint: params_fp,
            state_count: sol.space.count(),
            report: &sol.report,
            thresholds: table.as_ref().map(|t| t.thresholds.as_slice()),
        },
    )?;

    println!(
        "gain {:.10} in [{:.10}, {:.10}] after {} sweeps ({})",
        sol.report.gain,
        sol.report.gain_lower,
        sol.report.gain_upper,
        sol.report.iterations,
        if sol.report.converged {
            "converged"
        } else {
            "NOT converged"
        }
    );
    match &table {
        Some(t) => print_thresholds(t),
        None => println!("policy depends on node ages; no threshold table"),
    }
    Ok(if sol.report.converged {
        Outcome::Ok
    } else {
        Outcome::NotConverged
    })
}

fn print_thresholds(table: &ThresholdTable) {
    for (b, t) in table.thresholds.iter().enumerate() {
        match t {
            Some(t) => println!("b={b}: request when delta_c >= {t}"),
            None => println!("b={b}: never request"),
        }
    }
}

/// Runs every structural check on a saved policy (and optional value
/// function) and writes `structure_report.json`.
pub fn cmd_check(cfg: &ExperimentConfig, policy_path: &Path, values_path: Option<&Path>) -> Result<Outcome> {
    let out = Artifacts::new(cfg)?;
    let (space, kernel) = build_kernel_with(&cfg.params, &cfg.kernel_options())?;
    let policy = read_policy(policy_path)?;
    policy.check_against(&cfg.params, space.count())?;
    let values = values_path.map(|p| read_values(p, &cfg.params)).transpose()?;
    let report = structure_report(&kernel, &space, &policy, values.as_ref())?;

    out.json("structure_report.json", &report)?;
    if let Some(t) = &report.thresholds {
        out.csv("thresholds.csv", &t.to_csv())?;
    }
    let acc = &report.accessibility;
    println!(
        "accessibility: {} closed class(es), {} transient states -> {}",
        acc.closed_classes,
        acc.transient_states,
        verdict(acc.pass)
    );
    println!("empty battery serves cache -> {}", verdict(report.empty_battery_idle));
    println!(
        "age independence: {} violations -> {}",
        report.delta_independence.violations.len(),
        verdict(report.delta_independence.pass)
    );
    match &report.thresholds {
        Some(t) => {
            println!(
                "threshold structure: {} violations -> {}",
                t.violations.len(),
                verdict(t.pass)
            );
            print_thresholds(t);
        }
        None => println!("threshold structure: skipped (policy depends on node ages) -> FAIL"),
    }
    if let Some(m) = &report.monotonicity {
        println!(
            "value monotone in delta_c: {} of {} pairs violate -> {}",
            m.violations.len(),
            m.pairs_checked,
            verdict(m.pass)
        );
    }
    Ok(if report.pass { Outcome::Ok } else { Outcome::CheckFailed })
}

fn verdict(pass: bool) -> &'static str {
    if pass {
        "pass"
    } else {
        "FAIL"
    }
}

fn read_policy(path: &Path) -> Result<Policy> {
    let f = fs::File::open(path).with_context(|| format!("opening policy {}", path.display()))?;
    Policy::read_csv(BufReader::new(f)).with_context(|| format!("reading policy {}", path.display()))
}

fn read_values(path: &Path, params: &SystemParams) -> Result<ValueFunction> {
    let f = fs::File::open(path).with_context(|| format!("opening values {}", path.display()))?;
    let (values, fp) =
        ValueFunction::read_csv(BufReader::new(f)).with_context(|| format!("reading values {}", path.display()))?;
    if let Some(fp) = fp {
        if fp != params.fingerprint() {
            bail!(
                "{} was computed for params {fp}, config has {}",
                path.display(),
                params.fingerprint()
            );
        }
    }
    Ok(values)
}

#[derive(Serialize)]
struct SweepManifest<'a> {
    seed: u64,
    horizon: usize,
    replications: usize,
    solver: &'a SolverSettings,
    sweeps: Vec<SweepEntry<'a>>,
}

#[derive(Serialize)]
struct SweepEntry<'a> {
    name: &'a str,
    axis: &'static str,
    file: String,
    base_params_fingerprint: String,
    points: Vec<PointEntry<'a>>,
}

#[derive(Serialize)]
struct PointEntry<'a> {
    axis_value: f64,
    params_fingerprint: Option<&'a str>,
    solve_report: Option<&'a SolveReport>,
    errors: Vec<String>,
}

/// Points of one sweep, keyed by the sweep name.
pub type NamedSweep = (String, Vec<SweepPoint>);

/// Runs the configured sweeps (all of them, or those named in `only`),
/// writing `<name>.csv` per sweep and `manifest.json`.
pub fn cmd_sweep(cfg: &ExperimentConfig, only: &[String]) -> Result<(Outcome, Vec<NamedSweep>)> {
    if cfg.sweeps.is_empty() {
        bail!("config has no sweeps");
    }
    for name in only {
        if !cfg.sweeps.iter().any(|s| &s.name == name) {
            bail!("no sweep named {name:?} in config");
        }
    }
    let out = Artifacts::new(cfg)?;
    let mut results = Vec::new();
    for spec in cfg.sweeps.iter().filter(|s| only.is_empty() || only.contains(&s.name)) {
        let base = spec.params.as_ref().unwrap_or(&cfg.params);
        eprintln!(
            "sweep {} over {} ({} points)",
            spec.name,
            spec.axis.name(),
            spec.values.len()
        );
        let points = sweep(
            base,
            spec.axis,
            &spec.values,
            &spec.policies,
            &cfg.protocol,
            &cfg.solver,
        );
        out.csv(&format!("{}.csv", spec.name), &sweep_csv(&points))?;
        results.push((spec.name.clone(), points));
    }

    let mut failed = false;
    let manifest = SweepManifest {
        seed: cfg.protocol.seed,
        horizon: cfg.protocol.horizon,
        replications: cfg.protocol.replications,
        solver: &cfg.solver,
        sweeps: results
            .iter()
            .map(|(name, points)| {
                let spec = cfg.sweeps.iter().find(|s| &s.name == name).expect("ran above");
                SweepEntry {
                    name,
                    axis: spec.axis.name(),
                    file: format!("{name}.csv"),
                    base_params_fingerprint: spec.params.as_ref().unwrap_or(&cfg.params).fingerprint(),
                    points: points
                        .iter()
                        .map(|p| {
                            let errors: Vec<String> = p
                                .rows
                                .iter()
                                .filter_map(|r| r.error.as_ref().map(|e| format!("{}: {e}", r.policy)))
                                .collect();
                            failed |= !errors.is_empty();
                            PointEntry {
                                axis_value: p.axis_value,
                                params_fingerprint: p.params_fingerprint.as_deref(),
                                solve_report: p.solve_report.as_ref(),
                                errors,
                            }
                        })
                        .collect(),
                }
            })
            .collect(),
    };
    out.json("manifest.json", &manifest)?;
    for (name, points) in &results {
        for row in points.iter().flat_map(|p| &p.rows) {
            match &row.error {
                None => println!(
                    "{name} {}={} {:<9} {:.4} +- {:.4}",
                    spec_axis(cfg, name),
                    row.axis_value,
                    row.policy,
                    row.mean,
                    row.std_error
                ),
                Some(e) => println!(
                    "{name} {}={} {:<9} error: {e}",
                    spec_axis(cfg, name),
                    row.axis_value,
                    row.policy
                ),
            }
        }
    }
    let outcome = if failed { Outcome::SweepErrors } else { Outcome::Ok };
    Ok((outcome, results))
}

fn spec_axis(cfg: &ExperimentConfig, name: &str) -> &'static str {
    cfg.sweeps
        .iter()
        .find(|s| s.name == name)
        .map_or("?", |s| s.axis.name())
}

/// Writes per-slot traces of the optimal and greedy policies driven by the
/// same exogenous draws: `samplepath_optimal.csv`, `samplepath_greedy.csv`.
pub fn cmd_samplepath(cfg: &ExperimentConfig) -> Result<Outcome> {
    let out = Artifacts::new(cfg)?;
    let sol = solve_config(cfg)?;
    if !sol.report.converged {
        eprintln!("warning: solver did not converge; tracing the policy from the last sweep");
    }
    let rep = cfg.samplepath.replication;
    let protocol = SimProtocol {
        horizon: cfg.samplepath.horizon,
        replications: rep + 1,
        trace_replication: Some(rep),
        ..cfg.protocol.clone()
    };
    for (name, spec) in [
        ("optimal", PolicySpec::Table(sol.policy)),
        ("greedy", PolicySpec::Greedy),
    ] {
        let r = simulate(&cfg.params, &spec, &protocol)?;
        let trace = r.sample_path.expect("trace requested");
        let path = out.csv(&format!("samplepath_{name}.csv"), &trace_csv(&trace))?;
        let mean = trace.iter().map(|t| t.avg_version_aoi).sum::<f64>() / trace.len() as f64;
        println!(
            "{name}: mean {mean:.4} over {} slots -> {}",
            trace.len(),
            path.display()
        );
    }
    Ok(if sol.report.converged {
        Outcome::Ok
    } else {
        Outcome::NotConverged
    })
}

#[derive(Serialize)]
struct OracleDoc {
    params_fingerprint: String,
    gain: f64,
    policies_evaluated: u64,
}

/// Exhaustive search over deterministic policies; writes `oracle.json` and `oracle_policy.csv`.
pub fn cmd_oracle(cfg: &ExperimentConfig) -> Result<Outcome> {
    let out = Artifacts::new(cfg)?;
    let space = StateSpace::with_limit(&cfg.params, cfg.max_states)?;
    let r = brute_force_optimal(
        &cfg.params,
        &OracleOptions {
            max_policies: cfg.oracle.max_policies,
            exec: cfg.solver.exec,
            ..OracleOptions::default()
        },
    )?;
    let mut buf = format!("# config_fingerprint={}\n", out.fingerprint).into_bytes();
    r.policy.write_csv(&mut buf)?;
    out.write("oracle_policy.csv", String::from_utf8(buf)?)?;
    out.json(
        "oracle.json",
        &OracleDoc {
            params_fingerprint: cfg.params.fingerprint(),
            gain: r.gain,
            policies_evaluated: r.policies_evaluated,
        },
    )?;
    println!(
        "minimum average cost {:.12} over {} policies ({} states)",
        r.gain,
        r.policies_evaluated,
        space.count()
    );
    Ok(Outcome::Ok)
}

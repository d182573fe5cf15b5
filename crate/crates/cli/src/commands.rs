//! The experiment pipelines behind each subcommand.

use msa_core::adjoint::{solve_adjoint_with, AdjointConfig};
use msa_core::analysis::{
    calibrate_disc_constant, derive_constants, estimate_osl, strip_derived, verify_bounds, BoundReport, PairedRun,
    ToleranceModel,
};
use msa_core::hamiltonian::estimate_h_lipschitz;
use msa_core::msa::{empirical_contraction, midpoint_control, random_control_pairs, run_msa_with_noise, CONTRACTION_SLACK};
use msa_core::oracle::{compare_msa_to_oracle, solve_dp_1d, StateGrid};
use msa_core::paths::{l2_profile, simulate_forward_from, TimeGrid};
use msa_core::problem::validate_assumptions;
use msa_core::rng::{derive_seed, seeded_rng};
use msa_core::{Error, Ledger, Noise, Problem};
use rand::Rng;
use serde_json::{json, Value};

use crate::config::Config;
use crate::report::{fmt_f64, ledger_table, Table};
use crate::{CliError, Command, Context};

/// What a command produced: CSV tables keyed by file name, the
/// command-specific part of the summary, console text and the verdict of
/// any check it performed.
#[derive(Debug, Default)]
pub struct Outcome {
    pub tables: Vec<(String, Table)>,
    pub report: Value,
    pub ledger: Option<Ledger>,
    pub flags: Vec<String>,
    pub stdout: String,
    /// `None` when the command checks nothing.
    pub verified: Option<bool>,
}

pub fn dispatch(cmd: Command, cfg: &Config, timing: bool) -> Result<Outcome, CliError> {
    let mut spec = cfg.build_problem()?;
    if !cfg.ledger.is_empty() {
        let inputs = overridden(cfg, &spec)?;
        spec.declared = Some(derive_constants(&inputs, spec.horizon).unwrap_or(inputs));
    }
    let mut out = match cmd {
        Command::Validate => validate(cfg, &spec)?,
        Command::RunMsa => run_msa_cmd(cfg, &spec, timing)?,
        Command::ContractionTest => contraction(cfg, &spec)?,
        Command::VerifyBounds => bounds(cfg, &spec)?,
        Command::OracleCompare => oracle(cfg, &spec, timing)?,
        Command::Constants => constants(cfg, &spec)?,
    };
    let mut flags: Vec<String> = spec.warnings.iter().map(|w| w.to_string()).collect();
    flags.append(&mut out.flags);
    out.flags = flags;
    Ok(out)
}

fn overridden(cfg: &Config, spec: &Problem) -> Result<Ledger, CliError> {
    let mut l = strip_derived(&spec.declared.clone().unwrap_or_default());
    for (k, v) in &cfg.ledger {
        l.set(k, *v)?;
    }
    Ok(l)
}

/// Declared constants with the configured overrides, re-derived.
pub fn resolve_ledger(cfg: &Config, spec: &Problem) -> Result<Ledger, CliError> {
    derive_constants(&overridden(cfg, spec)?, spec.horizon).context("deriving constants")
}

fn noise(cfg: &Config, spec: &Problem) -> Result<Noise, CliError> {
    cfg.msa_config().noise(spec).context("sampling Brownian increments")
}

fn constants(cfg: &Config, spec: &Problem) -> Result<Outcome, CliError> {
    let ledger = resolve_ledger(cfg, spec)?;
    let table = ledger_table(&ledger);
    let mut stdout = format!("constants for {}\n", spec.name);
    for row in &table.rows {
        stdout.push_str(&format!("  {:<11} {:>24} {}\n", row[0], row[1], row[2]));
    }
    let mut flags = Vec::new();
    if ledger.contractive() == Some(false) {
        flags.push("L_muT >= 1: contraction not guaranteed".into());
    }
    Ok(Outcome {
        tables: vec![("ledger.csv".into(), table)],
        report: json!({ "contractive": ledger.contractive() }),
        ledger: Some(ledger),
        flags,
        stdout,
        verified: None,
    })
}

fn validate(cfg: &Config, spec: &Problem) -> Result<Outcome, CliError> {
    let sampling = cfg.sampling_config();
    let ledger = resolve_ledger(cfg, spec).ok();
    let report = validate_assumptions(spec, &sampling);
    let osl = estimate_osl(spec, &sampling).context("estimating the one-sided Lipschitz constant")?;
    let lh = estimate_h_lipschitz(spec, &sampling, &cfg.msa.minimizer).context("estimating L_h")?;
    let declared_lh = spec.declared.as_ref().and_then(|l| l.l_h);
    let lh_pass = declared_lh.map(|d| lh.value <= d + sampling.tolerance);

    let mut table = Table::new(&["constant", "empirical", "declared", "pass"]);
    for c in &report.checks {
        table.push(vec![
            c.name.clone(),
            opt(c.empirical),
            opt(c.declared),
            c.pass.map_or(String::new(), |p| p.to_string()),
        ]);
    }
    table.push(vec![
        "L_h".into(),
        fmt_f64(lh.value),
        opt(declared_lh),
        lh_pass.map_or(String::new(), |p| p.to_string()),
    ]);
    let osl_pass = osl.quotient <= osl.log_norm + 1e-8;
    let pass = report.all_pass() && lh_pass != Some(false) && osl_pass;

    let mut stdout = String::new();
    for row in &table.rows {
        stdout.push_str(&format!("  {:<11} empirical {:>24} declared {:>24} {}\n", row[0], row[1], row[2], row[3]));
    }
    stdout.push_str(&format!("assumptions {}\n", if pass { "hold" } else { "FAIL" }));
    let mut flags = Vec::new();
    if !report.mu_positive {
        flags.push("empirical mu <= 0".into());
    }
    if !report.diffusion_jac_constant {
        flags.push("D_x sigma is not constant in x".into());
    }
    Ok(Outcome {
        tables: vec![("assumptions.csv".into(), table)],
        report: json!({ "assumptions": report, "osl": osl, "h_lipschitz": lh, "pass": pass }),
        ledger,
        flags,
        stdout,
        verified: Some(pass),
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), fmt_f64)
}

fn run_msa_cmd(cfg: &Config, spec: &Problem, timing: bool) -> Result<Outcome, CliError> {
    let ledger = resolve_ledger(cfg, spec).ok();
    let (res, _) = msa_run(cfg, spec)?;
    let stdout = format!(
        "{} after {} iterations, rate {}, error bound {}\n",
        res.termination,
        res.records.len(),
        opt(res.rate),
        opt(res.error_bound)
    );
    let flags = msa_flags(&res, ledger.as_ref());
    Ok(Outcome {
        tables: vec![("iters.csv".into(), iters_table(&res, timing))],
        report: msa_report(&res),
        ledger,
        flags,
        stdout,
        verified: None,
    })
}

fn msa_run(cfg: &Config, spec: &Problem) -> Result<(msa_core::MsaOutcome, Noise), CliError> {
    let noise = noise(cfg, spec)?;
    let a0 = midpoint_control(spec, &noise);
    let res = run_msa_with_noise(spec, &a0, &noise, &cfg.msa_config()).context("running MSA")?;
    Ok((res, noise))
}

fn msa_flags(res: &msa_core::MsaOutcome, ledger: Option<&Ledger>) -> Vec<String> {
    let mut flags = Vec::new();
    let nu: usize = res.records.iter().map(|r| r.non_unique).sum();
    if nu > 0 {
        flags.push(format!("{nu} Hamiltonian minimizers were not unique"));
    }
    if let (Some(rate), Some(l)) = (res.rate, ledger.and_then(|l| l.l_mu_t)) {
        if rate > l + CONTRACTION_SLACK {
            flags.push(format!("fitted rate {rate} exceeds L_muT + {CONTRACTION_SLACK}"));
        }
    }
    if ledger.and_then(|l| l.contractive()) == Some(false) {
        flags.push("L_muT >= 1: contraction not guaranteed".into());
    }
    flags
}

fn msa_report(res: &msa_core::MsaOutcome) -> Value {
    json!({
        "termination": res.termination,
        "iterations": res.records.len(),
        "rate": res.rate,
        "error_bound": res.error_bound,
        "final_cost": res.records.last().map(|r| r.cost),
        "final_control_hash": res.records.last().map(|r| r.control_hash.clone()),
    })
}

fn iters_table(res: &msa_core::MsaOutcome, timing: bool) -> Table {
    let mut t = Table::new(&["iter", "diff_A_norm", "cost", "cost_se", "elapsed_s"]);
    for r in &res.records {
        t.push(vec![
            r.iter.to_string(),
            fmt_f64(r.diff),
            fmt_f64(r.cost.mean),
            fmt_f64(r.cost.std_error),
            if timing { fmt_f64(r.elapsed_s) } else { String::new() },
        ]);
    }
    t
}

fn contraction(cfg: &Config, spec: &Problem) -> Result<Outcome, CliError> {
    let ledger = resolve_ledger(cfg, spec).ok();
    let noise = noise(cfg, spec)?;
    let pairs = random_control_pairs(spec, &noise, cfg.contraction.pairs, cfg.simulation.seed);
    let mut stats = empirical_contraction(spec, &pairs, &noise, &cfg.msa_config()).context("contraction test")?;
    stats.ledger_l_mu_t = ledger.as_ref().and_then(|l| l.l_mu_t);
    stats.pass = stats.ledger_l_mu_t.map(|l| stats.max <= l + CONTRACTION_SLACK);

    let mut table = Table::new(&["pair", "ratio"]);
    for (i, r) in stats.ratios.iter().enumerate() {
        table.push(vec![i.to_string(), fmt_f64(*r)]);
    }
    let stdout = format!(
        "max ratio {} (mean {} ± {}) vs L_muT {} + {CONTRACTION_SLACK}: {}\n",
        fmt_f64(stats.max),
        fmt_f64(stats.mean),
        fmt_f64(stats.std_error),
        opt(stats.ledger_l_mu_t),
        match stats.pass {
            Some(true) => "pass",
            Some(false) => "FAIL",
            None => "no ledger value",
        }
    );
    Ok(Outcome {
        tables: vec![("contraction.csv".into(), table)],
        report: json!({ "contraction": stats }),
        ledger,
        flags: Vec::new(),
        stdout,
        verified: stats.pass,
    })
}

/// One random pair of controls and initial states per run, all under the
/// same noise. The initial states and control coefficients depend only on
/// the seed, so the same experiment can be rebuilt on a coarser grid.
fn paired_runs(cfg: &Config, spec: &Problem, noise: &Noise) -> Result<Vec<PairedRun<f64>>, CliError> {
    let pairs = random_control_pairs(spec, noise, cfg.bounds.pairs, cfg.simulation.seed);
    let mut rng = seeded_rng(derive_seed(cfg.simulation.seed, "initial-states"));
    let adj = AdjointConfig {
        basis: cfg.basis.clone(),
        implicit_sweeps: cfg.msa.implicit_sweeps,
    };
    let n = spec.state_dim;
    let mut runs = Vec::with_capacity(pairs.len());
    for (a, b) in pairs {
        let x0 = ball(&mut rng, n, cfg.bounds.x0_radius);
        let x0b = ball(&mut rng, n, cfg.bounds.x0_radius);
        let xs = simulate_forward_from(spec, &x0, &a, noise).context("forward simulation")?;
        let xsb = simulate_forward_from(spec, &x0b, &b, noise).context("forward simulation")?;
        let (y, yb) = if cfg.bounds.adjoint {
            (
                Some(solve_adjoint_with(spec, &xs, &a, noise, &adj).context("adjoint solve")?.y),
                Some(solve_adjoint_with(spec, &xsb, &b, noise, &adj).context("adjoint solve")?.y),
            )
        } else {
            (None, None)
        };
        runs.push(PairedRun {
            states: xs,
            states_bar: xsb,
            control: a,
            control_bar: b,
            adjoint: y,
            adjoint_bar: yb,
        });
    }
    Ok(runs)
}

fn ball<R: Rng>(rng: &mut R, n: usize, radius: f64) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-radius..=radius)).collect();
        if v.iter().map(|x| x * x).sum::<f64>() <= radius * radius {
            return v;
        }
    }
}

/// Per-node `L²` profiles entering the checks of the first run.
fn run_profiles(run: &PairedRun<f64>) -> Result<Vec<Vec<f64>>, CliError> {
    let vals = |p: Vec<msa_core::paths::L2Point<f64>>| p.into_iter().map(|q| q.value).collect::<Vec<_>>();
    let mut out = vec![vals(l2_profile(&run.states.values, Some(&run.states_bar.values))?)];
    if let (Some(y), Some(yb)) = (&run.adjoint, &run.adjoint_bar) {
        out.push(vals(l2_profile(y, Some(yb))?));
        out.push(vals(l2_profile(y, None)?));
        out.push(vals(l2_profile(yb, None)?));
    }
    Ok(out)
}

/// Largest calibrated constant over the profiles of the first pair.
fn calibrate(cfg: &Config, spec: &Problem, noise: &Noise, fine: &PairedRun<f64>) -> Result<f64, CliError> {
    if noise.grid.steps() % 2 != 0 {
        return Err(CliError::Config(
            "bounds calibration halves the grid, so simulation.steps must be even (or set bounds.disc_constant)".into(),
        ));
    }
    let coarse_noise = noise.coarsen(2)?;
    let mut one = cfg.clone();
    one.bounds.pairs = 1;
    let coarse_run = paired_runs(&one, spec, &coarse_noise)?.remove(0);
    let fine_p = run_profiles(fine)?;
    let coarse_p = run_profiles(&coarse_run)?;
    let steps = noise.grid.steps();
    let mut c = 0.0f64;
    for i in 0..fine_p.len() {
        let v = calibrate_disc_constant(noise, |n: &Noise| {
            Ok(if n.grid.steps() == steps { fine_p[i].clone() } else { coarse_p[i].clone() })
        })?;
        c = c.max(v);
    }
    Ok(c)
}

fn bounds(cfg: &Config, spec: &Problem) -> Result<Outcome, CliError> {
    if cfg.bounds.pairs == 0 {
        return Err(CliError::Config("bounds.pairs must be >= 1".into()));
    }
    let ledger = resolve_ledger(cfg, spec)?;
    let noise = noise(cfg, spec)?;
    let runs = paired_runs(cfg, spec, &noise)?;
    let disc = match cfg.bounds.disc_constant {
        Some(c) => c,
        None => calibrate(cfg, spec, &noise, &runs[0])?,
    };
    let tol = ToleranceModel {
        se_multiplier: cfg.bounds.se_multiplier,
        disc_constant: disc,
    };
    let rep = verify_bounds(&runs, &ledger, &tol).context("verifying bounds")?;
    let mut stdout = String::new();
    for c in &rep.checks {
        stdout.push_str(&format!(
            "  {:<22} pair {:>3}  min margin {:>24}  {}\n",
            c.name,
            c.pair,
            fmt_f64(c.min_margin),
            if c.pass { "pass" } else { "FAIL" }
        ));
    }
    let failures: Vec<_> = rep.failures().collect();
    for (c, n) in failures.iter().take(20) {
        stdout.push_str(&format!(
            "  violated: {} pair {} t={} lhs={} rhs={} margin={}\n",
            c.name,
            c.pair,
            fmt_f64(n.t),
            fmt_f64(n.lhs),
            fmt_f64(n.rhs),
            fmt_f64(n.margin)
        ));
    }
    if failures.len() > 20 {
        stdout.push_str(&format!("  … {} more violated nodes in bounds.csv\n", failures.len() - 20));
    }
    stdout.push_str(&format!("bounds {}\n", if rep.pass { "hold" } else { "VIOLATED" }));
    Ok(Outcome {
        tables: vec![("bounds.csv".into(), bounds_table(&rep))],
        report: json!({
            "pass": rep.pass,
            "tolerance": rep.tolerance,
            "violations": failures.len(),
            "checks": rep.checks.iter().map(|c| json!({
                "check": c.name, "pair": c.pair, "min_margin": c.min_margin, "pass": c.pass,
            })).collect::<Vec<_>>(),
        }),
        ledger: Some(ledger),
        flags: Vec::new(),
        stdout,
        verified: Some(rep.pass),
    })
}

fn bounds_table(rep: &BoundReport<f64>) -> Table {
    let mut t = Table::new(&["check", "pair", "t", "lhs", "rhs", "eps", "margin", "pass"]);
    for c in &rep.checks {
        for n in &c.nodes {
            t.push(vec![
                c.name.clone(),
                c.pair.to_string(),
                fmt_f64(n.t),
                fmt_f64(n.lhs),
                fmt_f64(n.rhs),
                fmt_f64(n.eps),
                fmt_f64(n.margin),
                n.pass.to_string(),
            ]);
        }
    }
    t
}

/// DP solve with `oracle.steps`, or the smallest admissible step count
/// when that is 0.
fn solve_oracle(cfg: &Config, spec: &Problem) -> Result<msa_core::oracle::DpSolution<f64>, CliError> {
    let o = &cfg.oracle;
    let sg = StateGrid::new(o.x_min, o.x_max, o.x_points)?;
    let mut steps = if o.steps == 0 { 1 } else { o.steps };
    loop {
        let tg = TimeGrid::new(spec.horizon, steps)?;
        match solve_dp_1d(spec, &sg, o.action_points, tg) {
            Err(Error::TimeStepTooLarge { required, .. }) if o.steps == 0 => {
                steps = (spec.horizon / required).ceil() as usize + 1;
            }
            r => return r.context("dynamic programming oracle"),
        }
    }
}

fn oracle(cfg: &Config, spec: &Problem, timing: bool) -> Result<Outcome, CliError> {
    let ledger = resolve_ledger(cfg, spec).ok();
    let (res, noise) = msa_run(cfg, spec)?;
    let dp = solve_oracle(cfg, spec)?;
    let cmp = compare_msa_to_oracle(spec, &res, &dp, &noise).context("oracle comparison")?;
    let o = &cfg.oracle;
    let control_ok = cmp.control_distance.value <= o.control_tol;
    let cost_tol = 3.0 * cmp.cost_gap_se + o.cost_rel_tol * cmp.cost_dp.mean.abs();
    let cost_ok = cmp.cost_gap.abs() <= cost_tol;
    let stdout = format!(
        "{} after {} iterations; control distance {} (limit {}), cost gap {} (limit {}), DP steps {}: {}\n",
        res.termination,
        res.records.len(),
        fmt_f64(cmp.control_distance.value),
        fmt_f64(o.control_tol),
        fmt_f64(cmp.cost_gap),
        fmt_f64(cost_tol),
        dp.time_grid.steps(),
        if control_ok && cost_ok { "pass" } else { "FAIL" }
    );
    let mut flags = msa_flags(&res, ledger.as_ref());
    let arb = dp.arbitrary.iter().filter(|a| **a).count();
    if arb > 0 {
        flags.push(format!("{arb} DP nodes with an arbitrary minimizer"));
    }
    Ok(Outcome {
        tables: vec![("iters.csv".into(), iters_table(&res, timing))],
        report: json!({
            "msa": msa_report(&res),
            "oracle_steps": dp.time_grid.steps(),
            "comparison": cmp,
            "cost_tolerance": cost_tol,
            "pass": control_ok && cost_ok,
        }),
        ledger,
        flags,
        stdout,
        verified: Some(control_ok && cost_ok),
    })
}

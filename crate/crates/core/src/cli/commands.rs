//! Subcommand bodies. Each returns after writing all of its artifacts from
//! this thread; numerical work inside may run in parallel.

use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::geometry::{build_discretization_with, Discretization};
use crate::nonlinear::{
    estimate_lambda, find_minimal, minimal_branch, mountain_pass_second, LambdaBracket, SolutionRecord,
};
use crate::operator::{assemble_form, GagliardoForm};
use crate::verify::run_suite;

use super::config::{LambdaMode, RunConfig};
use super::output::{branch_csv, json_num, num, snapshot_line, write_file};

/// Randomized cases per inequality check in `verify`.
pub const VERIFY_CASES: usize = 100;

pub struct Context {
    pub config: RunConfig,
    pub seed: u64,
    pub out: PathBuf,
    pub quiet: bool,
}

impl Context {
    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn discretize(&self) -> Result<(Discretization, GagliardoForm)> {
        let d = build_discretization_with(&self.config.domain, self.config.kernel()?)?;
        let form = assemble_form(&d)?;
        self.say(format!("assembled form: {} interior nodes, {} exterior cells", form.n(), form.n_neumann()));
        Ok((d, form))
    }

    fn nodes(&self, d: &Discretization) -> Vec<Vec<f64>> {
        d.interior.iter().map(|p| p[..d.dimension].to_vec()).collect()
    }

    fn bracket(&self, form: &GagliardoForm) -> Result<LambdaBracket> {
        let b = estimate_lambda(form, &self.config.problem(1.0)?, &self.config.solver)?;
        self.say(format!("Lambda in [{}, {}] ({} probes)", num(b.lo), num(b.hi), b.probes.len()));
        Ok(b)
    }

    /// Absolute λ values; bracket mode scales by the lower end of the bracket.
    fn lambdas(&self, form: &GagliardoForm) -> Result<(Vec<f64>, Option<LambdaBracket>)> {
        let vals = self.config.lambda.values()?;
        if self.config.lambda.mode == LambdaMode::Bracket {
            let b = self.bracket(form)?;
            let scaled = vals.iter().map(|v| v * b.lo).collect();
            return Ok((scaled, Some(b)));
        }
        Ok((vals, None))
    }

    /// Resolved config, seed included, next to the results.
    fn record_config(&self) -> Result<()> {
        let mut cfg = self.config.clone();
        cfg.seed = self.seed;
        write_file(&self.out, "config.toml", &cfg.to_toml())
    }
}

/// Minimal solutions along the λ list.
pub fn cmd_solve(ctx: &Context) -> Result<()> {
    ctx.config.lambda.values()?;
    let (d, form) = ctx.discretize()?;
    let (lambdas, _) = ctx.lambdas(&form)?;
    let branch = minimal_branch(&form, &ctx.config.problem(lambdas[0])?, &lambdas, &ctx.config.solver)?;
    ctx.record_config()?;
    write_file(&ctx.out, "branch.csv", &branch_csv(&branch.records))?;
    if ctx.config.output.snapshots {
        write_file(&ctx.out, "solutions.jsonl", &snapshots(&branch.records, &ctx.nodes(&d), ctx.seed))?;
    }
    ctx.say(format!("{} minimal solutions written to {}", branch.records.len(), ctx.out.display()));
    Ok(())
}

fn snapshots(records: &[SolutionRecord], nodes: &[Vec<f64>], seed: u64) -> String {
    records.iter().map(|r| snapshot_line(r, nodes, seed, &[]) + "\n").collect()
}

/// Numerical bracket for Λ, the upper bound and the probe log.
pub fn cmd_bracket(ctx: &Context) -> Result<()> {
    let (d, form) = ctx.discretize()?;
    let b = ctx.bracket(&form)?;
    ctx.record_config()?;
    let summary = format!(
        "{{\"seed\":{},\"lambda_lo\":{},\"lambda_hi\":{},\"relative_width\":{},\"lambda_star\":{},\"upper_bound\":{},\"probes\":{}}}\n",
        ctx.seed,
        json_num(b.lo),
        json_num(b.hi),
        json_num(b.relative_width()),
        json_num(b.star.raw),
        json_num(b.star.bound),
        b.probes.len()
    );
    write_file(&ctx.out, "bracket.json", &summary)?;
    let mut log = String::from("lambda,success,note\n");
    for p in &b.probes {
        log.push_str(&format!("{},{},{}\n", num(p.lambda), p.success, csv_field(&p.note)));
    }
    write_file(&ctx.out, "probes.csv", &log)?;
    if ctx.config.output.snapshots {
        write_file(&ctx.out, "bracket_minimal.jsonl", &snapshots(std::slice::from_ref(&b.last_minimal), &ctx.nodes(&d), ctx.seed))?;
    }
    Ok(())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Mountain-pass second solutions above the minimal ones.
pub fn cmd_second(ctx: &Context) -> Result<()> {
    ctx.config.lambda.values()?;
    let (d, form) = ctx.discretize()?;
    let (lambdas, bracket) = ctx.lambdas(&form)?;
    let lo = match bracket {
        Some(b) => b.lo,
        None => ctx.bracket(&form)?.lo,
    };
    let opts = &ctx.config.solver;
    let nodes = ctx.nodes(&d);
    let mut csv = String::from(
        "lambda,energy_minimal,energy_second,separation_sup,separation_energy,residual,mu1_second,iterations\n",
    );
    let mut lines = String::new();
    for lam in lambdas {
        if lam >= lo {
            return Err(Error::InvalidParameter(format!(
                "lambda {} is not below the bracket {}; no minimal solution to start from",
                num(lam),
                num(lo)
            )));
        }
        let params = ctx.config.problem(lam)?;
        let u = find_minimal(&form, &params, opts)?;
        // minimal solution at a larger λ̄ is a strict supersolution at λ
        let u_bar = find_minimal(&form, &params.with_lambda(0.5 * (lam + lo)), opts)?;
        let v = mountain_pass_second(&form, &params, &u, &u_bar.field, opts, ctx.seed)?;
        let gap = &v.field - &u.field;
        let sep_sup = gap.amax();
        let sep_a = form.quadratic(&gap).max(0.0).sqrt();
        ctx.say(format!("lambda {}: second solution at sup-distance {}", num(lam), num(sep_sup)));
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            num(lam),
            num(u.energy),
            num(v.energy),
            num(sep_sup),
            num(sep_a),
            num(v.residual),
            num(v.mu1),
            v.iterations
        ));
        let extra = [("separation_sup", json_num(sep_sup)), ("separation_energy", json_num(sep_a))];
        lines.push_str(&snapshot_line(&u, &nodes, ctx.seed, &[]));
        lines.push('\n');
        lines.push_str(&snapshot_line(&v, &nodes, ctx.seed, &extra));
        lines.push('\n');
    }
    ctx.record_config()?;
    write_file(&ctx.out, "second.csv", &csv)?;
    if ctx.config.output.snapshots {
        write_file(&ctx.out, "second.jsonl", &lines)?;
    }
    Ok(())
}

/// Returns whether every check passed; the report is written either way.
pub fn cmd_verify(ctx: &Context) -> Result<bool> {
    let (_, form) = ctx.discretize()?;
    let (lambdas, _) = ctx.lambdas(&form)?;
    let params = ctx.config.problem(lambdas[0])?;
    let report = run_suite(&form, &params, &ctx.config.solver, ctx.seed, VERIFY_CASES)?;
    ctx.record_config()?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Invariant(e.to_string()))?;
    write_file(&ctx.out, "verify.json", &(json + "\n"))?;
    ctx.say(format!("verify: {} passed, {} failed, {} skipped", report.passed, report.failed, report.skipped));
    for c in report.checks.iter().filter(|c| c.outcome.failed()) {
        eprintln!("FAILED {} case {}: {:?}", c.name, c.case, c.outcome);
    }
    Ok(report.failed == 0)
}

/// Nodes, cell weights and exterior masses of the discretization.
pub fn cmd_export(ctx: &Context) -> Result<()> {
    let (d, form) = ctx.discretize()?;
    let coords = ["x", "y"];
    let mut csv = coords[..d.dimension].join(",");
    csv.push_str(",weight,kappa_dirichlet,kappa_far\n");
    for i in 0..form.n() {
        let mut row: Vec<String> = d.interior[i][..d.dimension].iter().map(|x| num(*x)).collect();
        row.push(num(d.weights[i]));
        row.push(num(d.kappa_dirichlet[i]));
        row.push(num(d.kappa_far[i]));
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    ctx.record_config()?;
    write_file(&ctx.out, "nodes.csv", &csv)?;
    let meta = format!(
        "{{\"seed\":{},\"dimension\":{},\"nodes\":{},\"neumann_cells\":{},\"s\":{},\"normalization\":{},\"measure\":{}}}\n",
        ctx.seed,
        d.dimension,
        form.n(),
        form.n_neumann(),
        json_num(ctx.config.params.s),
        json_num(ctx.config.params.normalization),
        json_num(form.measure())
    );
    write_file(&ctx.out, "discretization.json", &meta)?;
    Ok(())
}

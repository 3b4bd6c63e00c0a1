//! Command-line front end. The binary only parses arguments and calls
//! [`run`].

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::binfmt::{self, BinaryArray};
use crate::cache::{Cache, CACHE_ENV};
use crate::cells::{solve_constant_cell, AuxiliaryBasis, PatchProblem};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::fem::{apply_bilinear, assemble_stiffness, load_vector, Boundary, Difference, KktMethod, SolverOptions};
use crate::field::write_field_csv;
use crate::macroscale::{read_tensors_csv, write_tensors_csv, EffectiveTensors, MacroSolution};
use crate::mesh::oversample;
use crate::pipeline::{
    build_medium, identity_check, run_fine, run_macro, run_nlmc, run_pipeline, run_shift, run_study, subcell_partition,
    FineStage, Medium,
};
use crate::report::{fmt_f64, write_rows, write_summaries};

#[derive(Debug, Parser)]
#[command(name = "mchom", version, about = "Multicontinuum homogenization of high-contrast elliptic problems")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Cache directory for cell solutions.
    #[arg(long, global = true, value_name = "DIR")]
    pub cache: Option<PathBuf>,
    /// Worker threads for cell solves.
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    /// Solver tolerance.
    #[arg(long, global = true, value_name = "X")]
    pub tol: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the coefficient field and continuum labels.
    Generate,
    /// Solve the fine-scale reference problem.
    FineSolve,
    /// Build the localized basis and the downscaled fine solution.
    Basis,
    /// Solve cell problems and export effective tensors.
    Tensors,
    /// Solve the macroscopic system and reconstruct.
    Macro,
    /// Run every stage and write a report row.
    Pipeline,
    /// Run the parameter sweep of the `[study]` section.
    Study,
    /// Check identities, tensor structure and solver oracles.
    Verify {
        /// Check tensors read from `alpha.csv`, `beta.csv` and `gamma.csv`
        /// in this directory instead of computing them.
        #[arg(long, value_name = "DIR")]
        tensors: Option<PathBuf>,
    },
}

/// Resolved configuration plus run context.
pub struct Context {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub cache: Option<Cache>,
}

impl Context {
    pub fn from_cli(cli: &Cli) -> Result<Self> {
        let mut cfg = match &cli.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(t) = cli.tol {
            cfg.solver.tol = t;
        }
        if let Some(o) = &cli.out {
            cfg.output.out = Some(o.clone());
        }
        if let Some(c) = &cli.cache {
            cfg.output.cache = Some(c.clone());
        } else if let Some(dir) = std::env::var_os(CACHE_ENV).filter(|d| !d.is_empty()) {
            cfg.output.cache = Some(PathBuf::from(dir));
        }
        cfg.validate()?;
        let out = cfg.output.out.clone().unwrap_or_else(|| PathBuf::from("out"));
        fs::create_dir_all(&out)?;
        let cache = cfg.output.cache.as_deref().map(Cache::new).transpose()?;
        fs::write(out.join("config.toml"), cfg.to_toml()?)?;
        Ok(Self { cfg, out, cache })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn csv(&self, name: &str) -> Result<BufWriter<File>> {
        Ok(BufWriter::new(File::create(self.path(name))?))
    }
}

/// Runs a parsed command and returns the process exit code.
pub fn run(cli: &Cli) -> Result<i32> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    let ctx = Context::from_cli(cli)?;
    match &cli.command {
        Command::Generate => cmd_generate(&ctx).map(|_| 0),
        Command::FineSolve => cmd_fine_solve(&ctx).map(|_| 0),
        Command::Basis => cmd_basis(&ctx).map(|_| 0),
        Command::Tensors => cmd_tensors(&ctx).map(|_| 0),
        Command::Macro => cmd_macro(&ctx).map(|_| 0),
        Command::Pipeline => cmd_pipeline(&ctx).map(|_| 0),
        Command::Study => cmd_study(&ctx).map(|_| 0),
        Command::Verify { tensors } => {
            let checks = cmd_verify(&ctx, tensors.as_deref())?;
            for c in &checks {
                println!("{}", c.line());
            }
            Ok(if checks.iter().all(|c| c.passed) { 0 } else { 1 })
        }
    }
}

#[derive(serde::Serialize)]
struct MediumManifest<'a> {
    medium_hash: &'a str,
    config_hash: String,
    n_fine: usize,
    contrast: f64,
    fraction_continuum_1: f64,
}

pub fn cmd_generate(ctx: &Context) -> Result<Medium> {
    let m = build_medium(&ctx.cfg)?;
    m.field.save(&ctx.path("field.bin"))?;
    write_field_csv(ctx.csv("field.csv")?, &m.field, &m.map)?;
    let man = MediumManifest {
        medium_hash: &m.hash,
        config_hash: ctx.cfg.hash()?,
        n_fine: ctx.cfg.grid.n_fine,
        contrast: m.field.contrast(),
        fraction_continuum_1: m.map.fraction(1),
    };
    fs::write(
        ctx.path("medium.toml"),
        toml::to_string(&man).map_err(|e| Error::Format(e.to_string()))?,
    )?;
    Ok(m)
}

fn write_kv(path: &Path, rows: &[(&str, String)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["key", "value"])?;
    for (k, v) in rows {
        w.write_record([*k, v.as_str()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_fine_solve(ctx: &Context) -> Result<(Medium, FineStage)> {
    let m = cmd_generate(ctx)?;
    let fine = run_fine(&ctx.cfg, &m)?;
    fine.u.save(&ctx.path("u_fine.bin"))?;
    write_kv(
        &ctx.path("fine.csv"),
        &[
            ("iterations", fine.stats.iterations.to_string()),
            ("residual", fmt_f64(fine.stats.residual)),
            ("energy_norm", fmt_f64(fine.energy)),
            ("l2_norm", fmt_f64(fine.l2)),
        ],
    )?;
    Ok((m, fine))
}

pub fn cmd_basis(ctx: &Context) -> Result<()> {
    let (m, fine) = cmd_fine_solve(ctx)?;
    let nlmc = run_nlmc(&ctx.cfg, &m, &fine, ctx.cache.as_ref())?;
    nlmc.u_glo.save(&ctx.path("u_nlmc.bin"))?;
    write_kv(
        &ctx.path("nlmc.csv"),
        &[
            ("k_layers", ctx.cfg.k_layers().to_string()),
            ("energy_error", fmt_f64(nlmc.energy_error)),
            ("l2_error", fmt_f64(nlmc.l2_error)),
            ("mean_preservation", fmt_f64(nlmc.mean_preservation)),
        ],
    )
}

fn export_tensors(ctx: &Context, s: usize, t: &EffectiveTensors) -> Result<()> {
    let dir = ctx.path(&format!("tensors/shift{s}"));
    fs::create_dir_all(&dir)?;
    let f = |n: &str| -> Result<BufWriter<File>> { Ok(BufWriter::new(File::create(dir.join(n))?)) };
    write_tensors_csv(t, f("alpha.csv")?, f("beta.csv")?, f("gamma.csv")?)
}

pub fn cmd_tensors(ctx: &Context) -> Result<()> {
    let m = cmd_generate(ctx)?;
    let aux = subcell_partition(&ctx.cfg, &m)?;
    for (s, z) in ctx.cfg.macro_.shifts.iter().enumerate() {
        let st = run_shift(&ctx.cfg, &m, &aux, *z, ctx.cache.as_ref()).map_err(|e| e.at("tensors"))?;
        export_tensors(ctx, s, &st.tensors)?;
    }
    Ok(())
}

fn export_macro(ctx: &Context, sol: &MacroSolution) -> Result<()> {
    let mut w = csv::Writer::from_path(ctx.path("macro_solution.csv"))?;
    w.write_record(["node", "x", "y", "u0", "u1"])?;
    for k in 0..sol.mesh.num_nodes() {
        let x = sol.mesh.node_coords(k);
        w.write_record([
            k.to_string(),
            fmt_f64(x[0]),
            fmt_f64(x[1]),
            fmt_f64(sol.values[0][k]),
            fmt_f64(sol.values[1][k]),
        ])?;
    }
    w.flush()?;
    for i in 0..2 {
        binfmt::save(
            &ctx.path(&format!("macro_u{i}.bin")),
            &BinaryArray::full_nodes(sol.mesh.n, sol.values[i].clone()),
        )?;
    }
    write_kv(
        &ctx.path("macro_diagnostics.csv"),
        &[
            ("residual", fmt_f64(sol.residual)),
            ("min_eigenvalue", fmt_f64(sol.min_eig)),
            ("max_eigenvalue", fmt_f64(sol.max_eig)),
        ],
    )
}

pub fn cmd_macro(ctx: &Context) -> Result<()> {
    let (m, fine) = cmd_fine_solve(ctx)?;
    let aux = subcell_partition(&ctx.cfg, &m)?;
    let st = run_macro(&ctx.cfg, &m, &aux, Some(&fine), ctx.cache.as_ref())?;
    for (s, sh) in st.shifts.iter().enumerate() {
        export_tensors(ctx, s, &sh.tensors)?;
    }
    export_macro(ctx, &st.solution)?;
    if let Some(r) = &st.reconstruction {
        binfmt::save(&ctx.path("reconstruction.bin"), &r.to_binary())?;
    }
    Ok(())
}

pub fn cmd_pipeline(ctx: &Context) -> Result<()> {
    let out = run_pipeline(&ctx.cfg, ctx.cache.as_ref(), true)?;
    out.medium.field.save(&ctx.path("field.bin"))?;
    out.fine.u.save(&ctx.path("u_fine.bin"))?;
    out.nlmc.u_glo.save(&ctx.path("u_nlmc.bin"))?;
    if let Some(st) = &out.macro_ {
        for (s, sh) in st.shifts.iter().enumerate() {
            export_tensors(ctx, s, &sh.tensors)?;
        }
        export_macro(ctx, &st.solution)?;
        if let Some(r) = &st.reconstruction {
            binfmt::save(&ctx.path("reconstruction.bin"), &r.to_binary())?;
        }
    }
    write_rows(ctx.csv("report.csv")?, &[out.row])
}

pub fn cmd_study(ctx: &Context) -> Result<()> {
    let s = run_study(&ctx.cfg, ctx.cache.as_ref());
    write_rows(ctx.csv("study.csv")?, &s.rows)?;
    write_summaries(ctx.csv("study_summary.csv")?, &s.summaries)
}

/// Outcome of one verification check.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub passed: bool,
    pub note: String,
}

impl Check {
    fn at_most(name: &str, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            value,
            threshold,
            passed: value <= threshold,
            note: String::new(),
        }
    }

    fn at_least(name: &str, value: f64, threshold: f64) -> Self {
        Self {
            passed: value >= threshold,
            ..Self::at_most(name, value, threshold)
        }
    }

    fn skipped(name: &str, note: &str) -> Self {
        Self {
            name: name.into(),
            value: f64::NAN,
            threshold: f64::NAN,
            passed: true,
            note: note.into(),
        }
    }

    pub fn line(&self) -> String {
        let status = if !self.note.is_empty() && self.value.is_nan() {
            "SKIP"
        } else if self.passed {
            "PASS"
        } else {
            "FAIL"
        };
        let mut s = format!("{status} {} value={:e} threshold={:e}", self.name, self.value, self.threshold);
        if !self.note.is_empty() {
            s.push_str(&format!(" ({})", self.note));
        }
        s
    }
}

fn tensor_checks(prefix: &str, t: &EffectiveTensors) -> Vec<Check> {
    vec![
        Check::at_most(&format!("{prefix}symmetry"), t.max_symmetry_violation(), 1e-12),
        Check::at_least(&format!("{prefix}psd"), t.min_eigen_ratio(), -1e-10),
    ]
}

/// Largest dof count for which dense oracles are evaluated.
pub const DENSE_ORACLE_LIMIT: usize = 600;

fn fine_oracle(ctx: &Context, m: &Medium, fine: &FineStage) -> Result<Check> {
    let op = assemble_stiffness(&m.field, None, Boundary::Dirichlet)?;
    if op.dim() > DENSE_ORACLE_LIMIT {
        return Ok(Check::skipped("fine-dense-oracle", "system too large for the dense oracle"));
    }
    let f = ctx.cfg.source.to_source().nodal(*m.field.grid())?;
    let b = nalgebra::DVector::from_vec(load_vector(&op.dofs, &f));
    let x = op
        .matrix
        .to_dense()
        .cholesky()
        .ok_or_else(|| Error::Factorization("dense oracle is not SPD".into()))?
        .solve(&b);
    let u = op.dofs.to_function(x.as_slice());
    let d = Difference { u: &fine.u, v: &u };
    let num = apply_bilinear(&m.field, &d, &d, None)?.sqrt();
    let den = apply_bilinear(&m.field, &u, &u, None)?.sqrt();
    Ok(Check::at_most("fine-dense-oracle", if den > 0.0 { num / den } else { num }, 1e-8))
}

fn kkt_oracle(ctx: &Context, m: &Medium, aux: &AuxiliaryBasis) -> Result<Check> {
    let l = aux.partition().num_cells() / 2;
    let patch = oversample(aux.partition(), l, ctx.cfg.k_layers());
    let iter = SolverOptions {
        kkt: KktMethod::Schur,
        ..ctx.cfg.solver
    };
    let dense = SolverOptions {
        kkt: KktMethod::Dense,
        ..ctx.cfg.solver
    };
    let pi = PatchProblem::new(&m.field, aux, patch.clone(), &iter)?;
    if pi.op.dim() + pi.num_constraints() > DENSE_ORACLE_LIMIT {
        return Ok(Check::skipped("kkt-dense-oracle", "patch too large for the dense oracle"));
    }
    let pd = PatchProblem::new(&m.field, aux, patch, &dense)?;
    let (ui, _) = solve_constant_cell(&pi, l, 0)?;
    let (ud, _) = solve_constant_cell(&pd, l, 0)?;
    let d = Difference { u: &ui, v: &ud };
    let region = Some(pi.patch.cells);
    let num = apply_bilinear(&m.field, &d, &d, region)?.sqrt();
    let den = apply_bilinear(&m.field, &ud, &ud, region)?.sqrt();
    Ok(Check::at_most("kkt-dense-oracle", num / den.max(f64::MIN_POSITIVE), 1e-8))
}

/// Runs every check; the caller decides the exit status.
pub fn cmd_verify(ctx: &Context, tensor_dir: Option<&Path>) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    if let Some(dir) = tensor_dir {
        let open = |n: &str| File::open(dir.join(n));
        let t = read_tensors_csv(ctx.cfg.grid.h_coarse, open("alpha.csv")?, open("beta.csv")?, open("gamma.csv")?)?;
        checks.extend(tensor_checks("file-", &t));
    } else {
        let m = build_medium(&ctx.cfg)?;
        let fine = run_fine(&ctx.cfg, &m)?;
        let nlmc = run_nlmc(&ctx.cfg, &m, &fine, ctx.cache.as_ref())?;
        checks.push(Check::at_most("mean-preservation", nlmc.mean_preservation, 1e-7));
        for (s, z) in ctx.cfg.macro_.shifts.iter().enumerate() {
            let st = run_shift(&ctx.cfg, &m, &nlmc.aux, *z, ctx.cache.as_ref()).map_err(|e| e.at("tensors"))?;
            checks.extend(tensor_checks(&format!("shift{s}-"), &st.tensors));
            let id = identity_check(&m, &st, ctx.cfg.seed)?;
            checks.push(Check::at_most(&format!("shift{s}-averaging-identity"), id.max_relative, 1e-11));
        }
        checks.push(fine_oracle(ctx, &m, &fine)?);
        checks.push(kkt_oracle(ctx, &m, &nlmc.aux)?);
    }
    let mut w = csv::Writer::from_path(ctx.path("verify.csv"))?;
    w.write_record(["check", "value", "threshold", "passed", "note"])?;
    for c in &checks {
        w.write_record([
            c.name.clone(),
            fmt_f64(c.value),
            fmt_f64(c.threshold),
            c.passed.to_string(),
            c.note.clone(),
        ])?;
    }
    w.flush()?;
    Ok(checks)
}

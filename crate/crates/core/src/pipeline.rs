//! End-to-end runs: fine reference, localized multicontinuum solution,
//! effective tensors, macroscopic solve and reconstruction.

use std::ops::Range;
use std::time::Instant;

use rand::rngs::ChaCha8Rng;
use rand::{RngExt, SeedableRng};

use crate::cache::Cache;
use crate::cells::{
    build_localized_basis, solve_coarse_cells, solve_rve_cell, AuxiliaryBasis, CellSolutionSet, LocalizedBasisSet,
};
use crate::config::RunConfig;
use crate::downscale::{downscale_linear, downscale_nlmc, project_averages, CoarseMesh, MacroSample};
use crate::error::{Error, Result};
use crate::fem::{norms, solve_fine_reference, BrokenFunction, Difference, FineFunction, SolveStats};
use crate::field::{generate_medium, medium_hash, CoefficientField, ContinuumMap};
use crate::macroscale::{
    assemble_effective_tensors, assemble_macro_system, compute_load_moments, solve_macro, verify_averaging_identity,
    EffectiveTensors, IdentityCheck, LoadMoments, MacroSolution, ShiftData,
};
use crate::mesh::ShiftedPartition;
use crate::report::{loglog_slope, spread_ratio, ReportRow, Summary};

pub struct Medium {
    pub field: CoefficientField,
    pub map: ContinuumMap,
    pub hash: String,
}

pub fn build_medium(cfg: &RunConfig) -> Result<Medium> {
    let grid = cfg.grid()?;
    let (field, map) = generate_medium(&cfg.medium, &grid).map_err(|e| e.at("generate"))?;
    let hash = medium_hash(&field, &map);
    Ok(Medium { field, map, hash })
}

pub struct FineStage {
    pub u: FineFunction,
    pub stats: SolveStats,
    pub energy: f64,
    pub l2: f64,
}

pub fn run_fine(cfg: &RunConfig, m: &Medium) -> Result<FineStage> {
    let run = || -> Result<FineStage> {
        let (u, stats) = solve_fine_reference(&m.field, &cfg.source.to_source(), &cfg.solver)?;
        let n = norms(&u, &m.field, None)?;
        Ok(FineStage {
            u,
            stats,
            energy: n.energy,
            l2: n.l2,
        })
    };
    run().map_err(|e| e.at("fine-solve"))
}

fn relative(err: f64, reference: f64) -> f64 {
    if reference > 0.0 {
        err / reference
    } else {
        err
    }
}

pub fn subcell_partition(cfg: &RunConfig, m: &Medium) -> Result<AuxiliaryBasis> {
    let sub = ShiftedPartition::new(*m.field.grid(), cfg.grid.h_eps, [0.0, 0.0])?;
    AuxiliaryBasis::build(&sub, &m.map)
}

pub struct NlmcStage {
    pub aux: AuxiliaryBasis,
    pub basis: LocalizedBasisSet,
    pub u_glo: FineFunction,
    /// `‖u_glo − u_ε‖_a / ‖u_ε‖_a`.
    pub energy_error: f64,
    pub l2_error: f64,
    /// `max |∫(u_glo − u_ε)ψ| / ‖u_ε‖_{L²}` over all auxiliary functions.
    pub mean_preservation: f64,
}

/// Localized basis and `u_glo = downscale(Π(u_ε))`.
pub fn run_nlmc(cfg: &RunConfig, m: &Medium, fine: &FineStage, cache: Option<&Cache>) -> Result<NlmcStage> {
    let run = || -> Result<NlmcStage> {
        let aux = subcell_partition(cfg, m)?;
        let basis = build_localized_basis(&m.field, &m.map, &aux, cfg.k_layers(), &cfg.solver, cache)?;
        let avgs = project_averages(&fine.u, &aux);
        let u_glo = downscale_nlmc(&avgs, &basis, *m.field.grid())?;
        let diff = Difference { u: &u_glo, v: &fine.u };
        let e = norms(&diff, &m.field, None)?;
        let mean = aux
            .entries()
            .iter()
            .map(|en| aux.pairing(en, &diff).abs())
            .fold(0.0, f64::max);
        Ok(NlmcStage {
            energy_error: relative(e.energy, fine.energy),
            l2_error: relative(e.l2, fine.l2),
            mean_preservation: relative(mean, fine.l2),
            aux,
            basis,
            u_glo,
        })
    };
    run().map_err(|e| e.at("nlmc"))
}

/// Centred block of `m` subcells inside `r`.
fn centred(r: &Range<usize>, m: usize) -> Range<usize> {
    let len = r.end - r.start;
    let m = m.min(len);
    let s = r.start + (len - m) / 2;
    s..s + m
}

pub struct ShiftStage {
    pub partition: ShiftedPartition,
    pub cells: Vec<CellSolutionSet>,
    pub tensors: EffectiveTensors,
    pub moments: LoadMoments,
}

/// Cell solutions, tensors and load moments for one shift.
pub fn run_shift(
    cfg: &RunConfig,
    m: &Medium,
    aux: &AuxiliaryBasis,
    z: [f64; 2],
    cache: Option<&Cache>,
) -> Result<ShiftStage> {
    let grid = *m.field.grid();
    let partition = ShiftedPartition::new(grid, cfg.grid.h_coarse, z)?;
    let k = cfg.k_layers();
    let cells = match cfg.macro_.rve_window {
        None => solve_coarse_cells(&m.field, &m.map, aux, &partition, k, &cfg.solver, cache)?,
        Some(w) => {
            let per = (w / cfg.grid.h_eps).round() as usize;
            (0..partition.num_cells())
                .map(|c| {
                    let r = partition.sub_ranges(aux.partition(), c)?;
                    let window = [centred(&r[0], per), centred(&r[1], per)];
                    solve_rve_cell(&m.field, &m.map, aux, c, window, k, &cfg.solver, cache)
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    let tensors = assemble_effective_tensors(&cells, &m.field, &partition)?;
    let f = cfg.source.to_source().nodal(grid)?;
    let moments = compute_load_moments(&f, &cells, &partition)?;
    Ok(ShiftStage {
        partition,
        cells,
        tensors,
        moments,
    })
}

pub struct MacroStage {
    pub shifts: Vec<ShiftStage>,
    pub solution: MacroSolution,
    /// Broken reconstruction on the first shift; absent for RVE runs.
    pub reconstruction: Option<BrokenFunction>,
    pub energy_error: f64,
    pub l2_error: f64,
    pub identity: IdentityCheck,
}

fn random_samples(rng: &mut ChaCha8Rng, n: usize) -> Vec<MacroSample> {
    (0..n)
        .map(|_| MacroSample {
            value: [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
            grad: [
                [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
                [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
            ],
        })
        .collect()
}

/// Averaging identity on random per-cell macro data for one shift.
pub fn identity_check(m: &Medium, s: &ShiftStage, seed: u64) -> Result<IdentityCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = random_samples(&mut rng, s.cells.len());
    let v = random_samples(&mut rng, s.cells.len());
    verify_averaging_identity(&u, &v, &s.tensors, &s.cells, &m.field, &s.partition)
}

pub fn run_macro(
    cfg: &RunConfig,
    m: &Medium,
    aux: &AuxiliaryBasis,
    fine: Option<&FineStage>,
    cache: Option<&Cache>,
) -> Result<MacroStage> {
    let shifts = cfg
        .macro_
        .shifts
        .iter()
        .map(|z| run_shift(cfg, m, aux, *z, cache))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.at("tensors"))?;
    let mesh = CoarseMesh::new((1.0 / cfg.grid.h_coarse).round() as usize)?;
    let data: Vec<ShiftData<'_>> = shifts
        .iter()
        .map(|s| ShiftData {
            partition: &s.partition,
            tensors: &s.tensors,
            moments: &s.moments,
        })
        .collect();
    let solve = || -> Result<MacroSolution> {
        let sys = assemble_macro_system(&data, mesh, cfg.macro_.bc)?;
        solve_macro(&sys, 1e-10)
    };
    let solution = solve().map_err(|e| e.at("macro"))?;
    let first = &shifts[0];
    let identity = identity_check(m, first, cfg.seed).map_err(|e| e.at("verify"))?;
    let mut out = MacroStage {
        reconstruction: None,
        energy_error: f64::NAN,
        l2_error: f64::NAN,
        identity,
        solution,
        shifts: Vec::new(),
    };
    if cfg.macro_.rve_window.is_none() {
        let rec = || -> Result<BrokenFunction> {
            let samples = out.solution.field().sample(&first.partition, cfg.macro_.sampling)?;
            downscale_linear(&samples, &first.cells, *m.field.grid())
        };
        let r = rec().map_err(|e| e.at("reconstruct"))?;
        if let Some(fine) = fine {
            let e = norms(&Difference { u: &r, v: &fine.u }, &m.field, None)?;
            out.energy_error = relative(e.energy, fine.energy);
            out.l2_error = relative(e.l2, fine.l2);
        }
        out.reconstruction = Some(r);
    }
    drop(data);
    out.shifts = shifts;
    Ok(out)
}

pub struct PipelineOutput {
    pub medium: Medium,
    pub fine: FineStage,
    pub nlmc: NlmcStage,
    pub macro_: Option<MacroStage>,
    pub row: ReportRow,
}

/// Runs every stage and fills a report row.
pub fn run_pipeline(cfg: &RunConfig, cache: Option<&Cache>, with_macro: bool) -> Result<PipelineOutput> {
    cfg.validate()?;
    let t0 = Instant::now();
    let medium = build_medium(cfg)?;
    let fine = run_fine(cfg, &medium)?;
    let nlmc = run_nlmc(cfg, &medium, &fine, cache)?;
    let macro_ = if with_macro {
        Some(run_macro(cfg, &medium, &nlmc.aux, Some(&fine), cache)?)
    } else {
        None
    };
    let row = ReportRow {
        study: cfg.study.id.clone(),
        config_hash: cfg.hash()?,
        h_eps: cfg.grid.h_eps,
        h_coarse: cfg.grid.h_coarse,
        k_layers: cfg.k_layers(),
        contrast: medium.field.contrast(),
        nlmc_energy_error: nlmc.energy_error,
        nlmc_l2_error: nlmc.l2_error,
        macro_energy_error: macro_.as_ref().map_or(f64::NAN, |s| s.energy_error),
        macro_l2_error: macro_.as_ref().map_or(f64::NAN, |s| s.l2_error),
        mean_preservation: nlmc.mean_preservation,
        identity_discrepancy: macro_.as_ref().map_or(f64::NAN, |s| s.identity.max_relative),
        runtime_s: t0.elapsed().as_secs_f64(),
        failure: String::new(),
    };
    Ok(PipelineOutput {
        medium,
        fine,
        nlmc,
        macro_,
        row,
    })
}

/// Result of a parameter sweep.
pub struct StudyOutput {
    pub rows: Vec<ReportRow>,
    pub summaries: Vec<Summary>,
}

/// Runs every sweep point; failures are recorded in the row and the study
/// continues.
pub fn run_study(cfg: &RunConfig, cache: Option<&Cache>) -> StudyOutput {
    let mut rows = Vec::new();
    for (point, valid) in cfg.sweep() {
        let failed = |e: Error| ReportRow {
            study: point.study.id.clone(),
            config_hash: point.hash().unwrap_or_default(),
            h_eps: point.grid.h_eps,
            h_coarse: point.grid.h_coarse,
            k_layers: point.k_layers(),
            contrast: point.medium.kappa_high / point.medium.kappa_low,
            nlmc_energy_error: f64::NAN,
            nlmc_l2_error: f64::NAN,
            macro_energy_error: f64::NAN,
            macro_l2_error: f64::NAN,
            mean_preservation: f64::NAN,
            identity_discrepancy: f64::NAN,
            runtime_s: f64::NAN,
            failure: e.to_string(),
        };
        let row = match valid.and_then(|_| run_pipeline(&point, cache, cfg.study.with_macro)) {
            Ok(out) => out.row,
            Err(e) => failed(e),
        };
        rows.push(row);
    }
    let summaries = summarize(&rows, cfg.study.with_macro);
    StudyOutput { rows, summaries }
}

fn summarize(rows: &[ReportRow], with_macro: bool) -> Vec<Summary> {
    let ok: Vec<&ReportRow> = rows.iter().filter(|r| r.failure.is_empty()).collect();
    let col = |f: fn(&ReportRow) -> f64| ok.iter().map(|r| f(r)).collect::<Vec<f64>>();
    let distinct = |v: &[f64]| {
        let mut d = v.to_vec();
        d.sort_by(f64::total_cmp);
        d.dedup();
        d.len()
    };
    let mut out = Vec::new();
    let slope = |metric: &str, against: &str, x: Vec<f64>, y: Vec<f64>| Summary {
        metric: metric.into(),
        against: against.into(),
        statistic: "slope".into(),
        value: if distinct(&x) > 1 { loglog_slope(&x, &y) } else { None },
    };
    out.push(slope(
        "nlmc_energy_error",
        "h_eps",
        col(|r| r.h_eps),
        col(|r| r.nlmc_energy_error),
    ));
    out.push(slope("nlmc_l2_error", "h_eps", col(|r| r.h_eps), col(|r| r.nlmc_l2_error)));
    if with_macro {
        out.push(slope(
            "macro_l2_error",
            "h_coarse",
            col(|r| r.h_coarse),
            col(|r| r.macro_l2_error),
        ));
    }
    let contrasts = col(|r| r.contrast);
    if distinct(&contrasts) > 1 {
        out.push(Summary {
            metric: "nlmc_energy_error".into(),
            against: "contrast".into(),
            statistic: "ratio".into(),
            value: spread_ratio(&col(|r| r.nlmc_energy_error)),
        });
    }
    out
}

//! Configuration, experiment runners and CSV result tables.
//!
//! Each runner turns an [`ExperimentConfig`] into a [`ResultTable`]. Grid
//! points run in parallel but rows are always emitted in grid order, so the
//! same configuration yields byte-identical output.

mod config;
mod table;

use std::collections::BTreeMap;

use rayon::prelude::*;

pub use config::{
    AnalysisConfig, BranchMode, ConvergenceConfig, DephasingConfig, ExperimentConfig, MeasurementConfig,
    ModelConfig, OutputConfig, ScheduleConfig, Tolerances,
};
pub use table::{Cell, CsvTable, ResultTable, FINGERPRINT_COLUMN};

use crate::dephasing::{counterexample_report, DephasingFamily};
use crate::error::{Error, Result};
use crate::linalg::{self, CMatrix, C64};
use crate::maps::is_cptp;
use crate::model::{self, GlobalState, Instrument, Schedule, SpinBosonModel};
use crate::stochastic::{
    analyze_all_branches, branch_average, enumerate_sequences, BranchAnalysis, TRUNCATION_WARNING_LEVEL,
};

pub const DYNAMICS_FILE: &str = "dynamics.csv";
pub const QUANTIFIERS_FILE: &str = "quantifiers.csv";
pub const VIOLATION_FILE: &str = "violation.csv";
pub const DEPHASING_FILE: &str = "dephasing.csv";
pub const CONVERGENCE_FILE: &str = "convergence.csv";

pub const DYNAMICS_COLUMNS: [&str; 11] = [
    "delta",
    "lambda",
    "mode",
    "branch",
    "t",
    "step",
    "phase",
    "rho11",
    "abs_rho12",
    "probability",
    "truncation_flag",
];
pub const QUANTIFIER_COLUMNS: [&str; 11] = [
    "delta",
    "lambda",
    "k",
    "mode",
    "branch",
    "weight",
    "tk0_norm",
    "dk",
    "norm",
    "dk_normalization",
    "truncation_flag",
];
pub const VIOLATION_COLUMNS: [&str; 10] =
    ["delta", "lambda", "k", "j", "mode", "branch", "weight", "violation", "level", "norm"];
pub const DEPHASING_COLUMNS: [&str; 8] = [
    "case",
    "k1",
    "k2",
    "e21_cptp",
    "e21_min_choi_eig",
    "t20_norm",
    "max_multistep_norm",
    "cp_divisible",
];
pub const CONVERGENCE_COLUMNS: [&str; 9] =
    ["quantity", "delta", "lambda", "k", "d_osc", "value", "value_next", "d_osc_next", "abs_change"];

pub fn build_model(cfg: &ExperimentConfig, d_osc: Option<usize>) -> Result<SpinBosonModel> {
    let mut params = cfg.model.params();
    if let Some(d) = d_osc {
        params.d_osc = d;
    }
    SpinBosonModel::new(params, &cfg.model.spin_init)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Initial,
    Evolve,
    /// Just before the measurement at `t_k`.
    Pre,
    /// Just after the measurement at `t_k`.
    Post,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Initial => "initial",
            Phase::Evolve => "evolve",
            Phase::Pre => "pre",
            Phase::Post => "post",
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Selection<'a> {
    /// Outcomes discarded: the trace-preserving average over all records.
    NonSelective,
    /// Renormalized state conditioned on these outcomes.
    Sequence(&'a [usize]),
}

#[derive(Clone, Debug)]
pub struct TrajectoryPoint {
    pub t: f64,
    pub step: Option<usize>,
    pub phase: Phase,
    /// Normalized spin state.
    pub rho: CMatrix,
    /// Probability of the outcomes recorded so far (1 when non-selective).
    pub probability: f64,
    pub top_fock: f64,
}

fn point(state: &GlobalState, t: f64, step: Option<usize>, phase: Phase) -> TrajectoryPoint {
    let w = state.weight();
    TrajectoryPoint {
        t,
        step,
        phase,
        rho: state.reduced_system() / linalg::real(w),
        probability: w,
        top_fock: state.top_fock_population() / w,
    }
}

/// Spin trajectory with measurements at every `t_k`. With `fine` the
/// intervals are sampled at `schedule.substeps` points, otherwise only the
/// initial state and the states around each measurement are returned.
pub fn trajectory(
    model: &SpinBosonModel,
    schedule: &Schedule,
    inst: &Instrument,
    selection: Selection<'_>,
    fine: bool,
) -> Result<Vec<TrajectoryPoint>> {
    if let Selection::Sequence(seq) = selection {
        if seq.len() != schedule.steps {
            return Err(Error::InvalidParameter(format!(
                "outcome sequence of length {} for {} measurements",
                seq.len(),
                schedule.steps
            )));
        }
    }
    let prop = model.propagator();
    let mut state = model.initial_state().clone();
    let mut out = vec![point(&state, 0.0, None, Phase::Initial)];
    let n = if fine { schedule.substeps } else { 1 };
    let dt = schedule.delta / n as f64;
    for k in 1..=schedule.steps {
        let t0 = schedule.time(k - 1);
        for s in 1..n {
            state = prop.evolve(dt, &state);
            out.push(point(&state, t0 + s as f64 * dt, None, Phase::Evolve));
        }
        // land exactly on t_k regardless of accumulated substep rounding
        state = prop.evolve(schedule.time(k) - (t0 + (n - 1) as f64 * dt), &state);
        out.push(point(&state, schedule.time(k), Some(k), Phase::Pre));
        state = match selection {
            Selection::NonSelective => model::apply_nonselective(&state, inst),
            Selection::Sequence(seq) => {
                let next = model::apply_outcome(&state, inst, seq[k - 1]);
                if next.weight() <= 1e-300 {
                    return Err(Error::ZeroProbability(crate::stochastic::sequence_label(inst, &seq[..k])));
                }
                next
            }
        };
        out.push(point(&state, schedule.time(k), Some(k), Phase::Post));
    }
    Ok(out)
}

fn grid(deltas: &[f64], lambdas: &[f64]) -> Vec<(f64, f64)> {
    deltas.iter().flat_map(|&d| lambdas.iter().map(move |&l| (d, l))).collect()
}

fn tolerance(what: impl Into<String>, value: f64, tol: f64) -> Result<()> {
    if value <= tol {
        Ok(())
    } else {
        Err(Error::Tolerance { what: what.into(), value, tol })
    }
}

fn sorted_modes(cfg: &ExperimentConfig) -> Vec<BranchMode> {
    let mut modes = cfg.analysis.branch_modes.clone();
    modes.sort();
    modes.dedup();
    modes
}

pub fn run_dynamics(cfg: &ExperimentConfig) -> Result<ResultTable> {
    let model = build_model(cfg, None)?;
    let fp = cfg.fingerprint();
    let modes = sorted_modes(cfg);
    let chunks: Vec<Vec<Vec<Cell>>> = grid(&cfg.schedule.deltas, &cfg.measurement.lambdas)
        .par_iter()
        .map(|&(delta, lambda)| -> Result<Vec<Vec<Cell>>> {
            let schedule = cfg.schedule_for(delta)?;
            let inst = Instrument::povm(lambda)?;
            let mut runs: Vec<(BranchMode, String, Vec<TrajectoryPoint>)> = Vec::new();
            for &mode in &modes {
                match mode {
                    BranchMode::Average => {
                        let traj = trajectory(&model, &schedule, &inst, Selection::NonSelective, true)?;
                        for p in &traj {
                            tolerance(
                                format!("non-selective normalization (delta={delta}, lambda={lambda}, t={})", p.t),
                                (p.probability - 1.0).abs(),
                                cfg.tolerances.structural,
                            )?;
                        }
                        runs.push((mode, "avg".into(), traj));
                    }
                    BranchMode::AllPlus | BranchMode::PerBranch => {
                        let seqs = if mode == BranchMode::AllPlus {
                            vec![vec![0; schedule.steps]]
                        } else {
                            enumerate_sequences(inst.len(), schedule.steps)?
                        };
                        for seq in seqs {
                            let traj = trajectory(&model, &schedule, &inst, Selection::Sequence(&seq), true)?;
                            runs.push((mode, crate::stochastic::sequence_label(&inst, &seq), traj));
                        }
                    }
                }
            }
            Ok(runs
                .into_iter()
                .flat_map(|(mode, label, traj)| {
                    traj.into_iter().map(move |p| {
                        vec![
                            delta.into(),
                            lambda.into(),
                            mode.as_str().into(),
                            label.clone().into(),
                            p.t.into(),
                            p.step.map_or(Cell::Empty, Cell::from),
                            p.phase.as_str().into(),
                            p.rho[(0, 0)].re.into(),
                            p.rho[(0, 1)].norm().into(),
                            p.probability.into(),
                            (p.top_fock > TRUNCATION_WARNING_LEVEL).into(),
                        ]
                    })
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut table = ResultTable::new("dynamics", &fp, &DYNAMICS_COLUMNS);
    chunks.into_iter().for_each(|c| table.extend(c));
    Ok(table)
}

/// Internal consistency of one analysed branch.
pub fn check_branch(a: &BranchAnalysis, tol: &Tolerances) -> Result<()> {
    let label = a.branch.label();
    let residual = a.hierarchy.residuals.iter().copied().fold(0.0, f64::max);
    tolerance(format!("stochastic reconstruction on branch {label}"), residual, tol.reconstruction)?;
    for k in 1..=a.hierarchy.depth() {
        let d = a.hierarchy.get(k, k - 1).distance(a.gamma_tilde.get(k, k - 1)?);
        tolerance(format!("one-step tensor ({k},{}) on branch {label}", k - 1), d, tol.structural)?;
    }
    for (k, j, g) in a.gamma_tilde.iter() {
        let r = is_cptp(g, tol.psd);
        tolerance(format!("negative Choi eigenvalue of conditional map ({k}|{j}) on branch {label}"), -r.min_choi_eig, tol.psd)?;
        tolerance(format!("trace preservation of conditional map ({k}|{j}) on branch {label}"), r.tp_residual, tol.structural)?;
    }
    Ok(())
}

/// All conditioning branches for one grid point, checked for consistency.
pub fn analyze_grid_point(
    model: &SpinBosonModel,
    schedule: &Schedule,
    inst: &Instrument,
    tol: &Tolerances,
) -> Result<Vec<BranchAnalysis>> {
    let all = analyze_all_branches(model, schedule, inst)?;
    for a in &all {
        check_branch(a, tol)?;
    }
    let total: f64 = all.iter().map(BranchAnalysis::probability).sum();
    tolerance("branch probabilities sum to one", (total - 1.0).abs(), tol.structural)?;
    let flagged = all.iter().filter(|a| a.branch.truncation_warning()).count();
    if flagged > 0 {
        let worst = all.iter().map(|a| a.branch.max_top_fock).fold(0.0, f64::max);
        log::warn!(
            "delta={}: {flagged}/{} branches put more than {TRUNCATION_WARNING_LEVEL:.0e} in the top Fock level (max {worst:.2e})",
            schedule.delta,
            all.len()
        );
    }
    Ok(all)
}

/// Reporting rows `(branch label, weight, value, truncation flag)` for one mode.
fn mode_rows(
    mode: BranchMode,
    all: &[BranchAnalysis],
    value: impl Fn(&BranchAnalysis) -> Result<f64>,
) -> Result<Vec<(String, f64, f64, bool)>> {
    Ok(match mode {
        BranchMode::Average => {
            let values = all.iter().map(&value).collect::<Result<Vec<_>>>()?;
            let weights: Vec<f64> = all.iter().map(BranchAnalysis::probability).collect();
            let avg = branch_average(&values, &weights)?;
            let flag = all.iter().any(|a| a.branch.truncation_warning());
            vec![("avg".into(), 1.0, avg.mean, flag)]
        }
        BranchMode::AllPlus => {
            let a = &all[0];
            vec![(a.branch.label().into(), a.probability(), value(a)?, a.branch.truncation_warning())]
        }
        BranchMode::PerBranch => all
            .iter()
            .map(|a| Ok((a.branch.label().into(), a.probability(), value(a)?, a.branch.truncation_warning())))
            .collect::<Result<_>>()?,
    })
}

pub fn run_quantifiers(cfg: &ExperimentConfig) -> Result<ResultTable> {
    let model = build_model(cfg, None)?;
    let fp = cfg.fingerprint();
    let modes = sorted_modes(cfg);
    let (norm, dkn) = (cfg.analysis.norm, cfg.analysis.dk_normalization);
    let norm_name = format!("{norm:?}").to_lowercase();
    let dkn_name = match dkn {
        crate::stochastic::DkNormalization::TermCount => "term-count",
        crate::stochastic::DkNormalization::PaperLiteral => "paper-literal",
    };
    let chunks: Vec<Vec<Vec<Cell>>> = grid(&cfg.schedule.deltas, &cfg.measurement.lambdas)
        .par_iter()
        .map(|&(delta, lambda)| -> Result<Vec<Vec<Cell>>> {
            let schedule = cfg.schedule_for(delta)?;
            let inst = Instrument::povm(lambda)?;
            let all = analyze_grid_point(&model, &schedule, &inst, &cfg.tolerances)?;
            let mut rows = Vec::new();
            for &mode in &modes {
                for k in 2..=schedule.steps {
                    let tk0 = mode_rows(mode, &all, |a| a.tk0(k, norm))?;
                    let dk = mode_rows(mode, &all, |a| a.dk(k, norm, dkn))?;
                    for ((label, w, t, flag), (_, _, d, _)) in tk0.into_iter().zip(dk) {
                        rows.push(vec![
                            delta.into(),
                            lambda.into(),
                            k.into(),
                            mode.as_str().into(),
                            label.into(),
                            w.into(),
                            t.into(),
                            d.into(),
                            norm_name.as_str().into(),
                            dkn_name.into(),
                            flag.into(),
                        ]);
                    }
                }
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    let mut table = ResultTable::new("quantifiers", &fp, &QUANTIFIER_COLUMNS);
    chunks.into_iter().for_each(|c| table.extend(c));
    Ok(table)
}

pub fn run_violation(cfg: &ExperimentConfig) -> Result<ResultTable> {
    let model = build_model(cfg, None)?;
    let fp = cfg.fingerprint();
    let modes = sorted_modes(cfg);
    let (norm, level) = (cfg.analysis.norm, cfg.analysis.violation_level);
    let norm_name = format!("{norm:?}").to_lowercase();
    let level_name = format!("{level:?}").to_lowercase();
    let delta = cfg.analysis.violation_delta;
    let schedule = cfg.schedule_for(delta)?;
    let chunks: Vec<Vec<Vec<Cell>>> = cfg
        .measurement
        .lambdas
        .par_iter()
        .map(|&lambda| -> Result<Vec<Vec<Cell>>> {
            let inst = Instrument::povm(lambda)?;
            let all = analyze_grid_point(&model, &schedule, &inst, &cfg.tolerances)?;
            let mut rows = Vec::new();
            for &mode in &modes {
                for k in 1..=schedule.steps {
                    let js = if cfg.analysis.violation_full_grid { 0..k } else { 0..1 };
                    for j in js {
                        for (label, w, v, _) in mode_rows(mode, &all, |a| a.violation(k, j, norm, level))? {
                            rows.push(vec![
                                delta.into(),
                                lambda.into(),
                                k.into(),
                                j.into(),
                                mode.as_str().into(),
                                label.into(),
                                w.into(),
                                v.into(),
                                level_name.as_str().into(),
                                norm_name.as_str().into(),
                            ]);
                        }
                    }
                }
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    let mut table = ResultTable::new("violation", &fp, &VIOLATION_COLUMNS);
    chunks.into_iter().for_each(|c| table.extend(c));
    Ok(table)
}

pub fn run_dephasing_demo(cfg: &ExperimentConfig) -> Result<ResultTable> {
    let dp = &cfg.dephasing;
    let mut table = ResultTable::new("dephasing", &cfg.fingerprint(), &DEPHASING_COLUMNS);
    let k1 = (-dp.gamma * dp.delta).exp();
    let semigroup = DephasingFamily::exponential(dp.gamma);
    let cases = [
        ("semigroup", [k1, k1 * k1], semigroup),
        ("cp-divisible-memory", dp.cp_divisible_pair, two_step(dp.cp_divisible_pair, dp.delta)?),
        ("not-cp-divisible", dp.non_cp_divisible_pair, two_step(dp.non_cp_divisible_pair, dp.delta)?),
    ];
    for (name, [a, b], family) in cases {
        let steps = if name == "semigroup" { dp.steps } else { 2 };
        let r = counterexample_report(C64::new(a, 0.0), C64::new(b, 0.0))?;
        table.push(vec![
            name.into(),
            a.into(),
            b.into(),
            r.e21_cptp.into(),
            r.e21_min_choi_eig.into(),
            r.t20_norm.into(),
            family.max_multistep_norm(dp.delta, steps)?.into(),
            family.is_cp_divisible(dp.delta, steps, cfg.tolerances.psd)?.into(),
        ]);
    }
    Ok(table)
}

fn two_step([k1, k2]: [f64; 2], delta: f64) -> Result<DephasingFamily> {
    DephasingFamily::tabulated(delta, vec![C64::new(1.0, 0.0), C64::new(k1, 0.0), C64::new(k2, 0.0)])
}

type ObservableKey = (&'static str, u64, u64, usize);

fn observables(cfg: &ExperimentConfig, d_osc: usize) -> Result<BTreeMap<ObservableKey, f64>> {
    let model = build_model(cfg, Some(d_osc))?;
    let (norm, dkn) = (cfg.analysis.norm, cfg.analysis.dk_normalization);
    let parts: Vec<Vec<(ObservableKey, f64)>> = grid(&cfg.convergence.deltas, &cfg.measurement.lambdas)
        .iter()
        .map(|&(delta, lambda)| -> Result<Vec<(ObservableKey, f64)>> {
            let schedule = cfg.schedule_for(delta)?;
            let inst = Instrument::povm(lambda)?;
            let (db, lb) = (delta.to_bits(), lambda.to_bits());
            let mut out = Vec::new();
            for p in trajectory(&model, &schedule, &inst, Selection::NonSelective, false)? {
                if let (Phase::Post, Some(k)) = (p.phase, p.step) {
                    out.push((("rho11", db, lb, k), p.rho[(0, 0)].re));
                    out.push((("abs_rho12", db, lb, k), p.rho[(0, 1)].norm()));
                }
            }
            let all = analyze_grid_point(&model, &schedule, &inst, &cfg.tolerances)?;
            let w: Vec<f64> = all.iter().map(BranchAnalysis::probability).collect();
            for k in 2..=schedule.steps {
                let t = all.iter().map(|a| a.tk0(k, norm)).collect::<Result<Vec<_>>>()?;
                let d = all.iter().map(|a| a.dk(k, norm, dkn)).collect::<Result<Vec<_>>>()?;
                out.push((("tk0_norm", db, lb, k), branch_average(&t, &w)?.mean));
                out.push((("dk", db, lb, k), branch_average(&d, &w)?.mean));
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(parts.into_iter().flatten().collect())
}

/// Observables at `d_osc` and `d_osc + 1` side by side. Nothing is asserted
/// about the size of the change.
pub fn run_convergence(cfg: &ExperimentConfig) -> Result<ResultTable> {
    let d = cfg.model.d_osc;
    let (base, next) = rayon::join(|| observables(cfg, d), || observables(cfg, d + 1));
    let (base, next) = (base?, next?);
    let mut table = ResultTable::new("convergence", &cfg.fingerprint(), &CONVERGENCE_COLUMNS);
    let order = ["rho11", "abs_rho12", "tk0_norm", "dk"];
    let mut keys: Vec<&ObservableKey> = base.keys().collect();
    // bit patterns of non-negative floats sort numerically
    keys.sort_by_key(|(q, db, lb, k)| (order.iter().position(|o| o == q), *db, *lb, *k));
    for key in keys {
        let (q, db, lb, k) = *key;
        let (a, b) = (base[key], next[key]);
        table.push(vec![
            q.into(),
            f64::from_bits(db).into(),
            f64::from_bits(lb).into(),
            k.into(),
            d.into(),
            a.into(),
            b.into(),
            (d + 1).into(),
            (a - b).abs().into(),
        ]);
    }
    Ok(table)
}

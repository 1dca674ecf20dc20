//! `eval`: prediction errors, residual breakdowns and training comparisons.

use std::path::PathBuf;

use anyhow::Result;
use clap::Args;
use rayon::prelude::*;
use rpf_core::csvio::Table;
use rpf_core::dataset::{Dataset, Record};
use rpf_core::network::Network;
use rpf_core::neural_solver::{BimEncoding, Checkpoint, Formulation, NeuralSolver};
use rpf_core::residual::{assemble_residual, rho};
use rpf_core::stats::median;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::Context;
use crate::data::{load_data, load_model, MODEL_FILE, TEST_FEASIBLE_FILE, TEST_INFEASIBLE_FILE};

/// Residual entries at or below this magnitude count as zero.
pub const ZERO_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct EvalArgs {
    /// Checkpoints to compare; repeat or separate by commas
    /// [default: <out-dir>/model.json]. Ratios are relative to the first.
    #[arg(long = "model", value_delimiter = ',')]
    pub models: Option<Vec<PathBuf>>,
    /// Feasible test set [default: <out-dir>/test_feasible.csv].
    #[arg(long)]
    pub test_feasible: Option<PathBuf>,
    /// Infeasible test set [default: <out-dir>/test_infeasible.csv].
    #[arg(long)]
    pub test_infeasible: Option<PathBuf>,
    /// Also render box and scatter summaries as SVG.
    #[arg(long)]
    pub svg: bool,
}

/// Evaluation of one model on one test OC.
#[derive(Debug, Clone)]
struct OcEval {
    voltage_errors: Vec<f64>,
    residual: Vec<f64>,
    rho_hat: f64,
    rho_true: f64,
    in_domain: bool,
}

fn evaluate_oc(net: &Network, solver: &NeuralSolver, bim: Option<&BimEncoding>, r: &Record) -> Result<OcEval> {
    let (v_hat, u_eval, in_domain) = match bim {
        None => {
            let p = solver.predict(&r.u);
            (p.v, r.u.clone(), p.in_domain)
        }
        Some(enc) => {
            let (x, _) = enc.encode(net, &r.v_star, &r.u)?;
            let y = solver.predict_flat(&x);
            let (v, u) = enc.decode(net, &x, y.as_slice(), &r.u)?;
            let ok = v.in_domain();
            (v, u, ok)
        }
    };
    let res = assemble_residual(net, &v_hat, &u_eval)?;
    Ok(OcEval {
        voltage_errors: v_hat.to_flat().iter().zip(r.v_star.to_flat()).map(|(a, b)| (a - b).abs()).collect(),
        rho_hat: rho(&res),
        residual: res.values,
        rho_true: r.rho,
        in_domain,
    })
}

struct ModelEntry {
    name: String,
    checkpoint: Checkpoint,
    solver: NeuralSolver,
}

/// Per-model, per-test-set medians.
#[derive(Debug, Clone, Copy)]
struct Summary {
    vm: f64,
    angle: f64,
    rho: f64,
}

fn mean_abs(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().map(|v| v.abs()).sum::<f64>() / values.len() as f64
}

fn share_zero(rows: &[&OcEval], range: std::ops::Range<usize>) -> f64 {
    let total = rows.len() * range.len();
    let zeros: usize = rows
        .iter()
        .map(|e| e.residual[range.clone()].iter().filter(|v| v.abs() <= ZERO_TOL).count())
        .sum();
    zeros as f64 / total as f64
}

pub fn eval(ctx: &Context, args: EvalArgs) -> Result<()> {
    let net = &ctx.network;
    let n = net.n_buses();
    let paths = args.models.clone().unwrap_or_else(|| vec![ctx.out(MODEL_FILE)]);
    let mut models = Vec::new();
    for path in &paths {
        let (checkpoint, solver) = load_model(path, net)?;
        let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("model").to_string();
        models.push(ModelEntry { name, checkpoint, solver });
    }
    let (feasible, fp_f) = load_data(&ctx.out_or(&args.test_feasible, TEST_FEASIBLE_FILE), net)?;
    let (infeasible, fp_i) = load_data(&ctx.out_or(&args.test_infeasible, TEST_INFEASIBLE_FILE), net)?;
    let test_sets: [(&str, &Dataset); 2] = [("feasible", &feasible), ("infeasible", &infeasible)];
    let bim = BimEncoding::from_network(net).ok();

    let mut prov = ctx
        .provenance("eval", &args)?
        .with_input("test_feasible", &fp_f)
        .with_input("test_infeasible", &fp_i);
    for m in &models {
        let fp = rpf_core::csvio::sha256_hex(m.checkpoint.to_json()?.as_bytes());
        prov = prov.with_input(&format!("model:{}", m.name), &fp);
    }
    let header = ctx.header(&prov, json!({ "zero_tol": ZERO_TOL }));
    let cols = |c: &[&str]| c.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let mut t_voltage = Table::new(header.clone(), cols(&["model", "test_set", "oc", "variable", "abs_error"]));
    let mut t_resid = Table::new(
        header.clone(),
        cols(&[
            "model", "test_set", "oc", "status", "re_kcl_mean_abs", "im_kcl_mean_abs", "kvl_mean_abs", "rho_hat",
            "rho_true", "rho_abs_error", "in_domain",
        ]),
    );
    let mut t_summary = Table::new(
        header.clone(),
        cols(&[
            "model", "formulation", "features", "test_set", "n", "failures", "median_vm_error",
            "median_angle_error", "median_rho_error", "zero_share_re_kcl", "zero_share_im_kcl", "zero_share_kvl",
            "zero_share_all", "vm_ratio_vs_first",
        ]),
    );
    let labels = net.voltage_labels();
    let mut summaries: Vec<[Option<Summary>; 2]> = Vec::new();
    let mut box_groups = Vec::new();
    let mut scatter_points = Vec::new();

    for m in &models {
        let enc = match m.checkpoint.formulation {
            Formulation::Rpf => None,
            Formulation::Bim => Some(bim.as_ref().ok_or_else(|| anyhow::anyhow!("network has no BIM encoding"))?),
        };
        let mut per_set = [None, None];
        for (s, (set_name, data)) in test_sets.iter().enumerate() {
            let evals: Vec<Result<OcEval>> =
                data.records.par_iter().map(|r| evaluate_oc(net, &m.solver, enc, r)).collect();
            let mut ok = Vec::new();
            for (k, e) in evals.iter().enumerate() {
                match e {
                    Ok(e) => {
                        for (label, err) in labels.iter().zip(&e.voltage_errors) {
                            t_voltage.push(vec![
                                m.name.clone(),
                                set_name.to_string(),
                                k.to_string(),
                                label.clone(),
                                err.to_string(),
                            ]);
                        }
                        t_resid.push(vec![
                            m.name.clone(),
                            set_name.to_string(),
                            k.to_string(),
                            "ok".into(),
                            mean_abs(&e.residual[..n]).to_string(),
                            mean_abs(&e.residual[n..2 * n]).to_string(),
                            mean_abs(&e.residual[2 * n..]).to_string(),
                            e.rho_hat.to_string(),
                            e.rho_true.to_string(),
                            (e.rho_hat - e.rho_true).abs().to_string(),
                            e.in_domain.to_string(),
                        ]);
                        ok.push(e);
                    }
                    Err(err) => {
                        let mut row = vec![m.name.clone(), set_name.to_string(), k.to_string()];
                        row.push(format!("failed: {err}").replace(',', ";"));
                        row.extend(std::iter::repeat_n(String::new(), 7));
                        t_resid.push(row);
                    }
                }
            }
            if data.is_empty() {
                continue;
            }
            let vm: Vec<f64> = ok.iter().flat_map(|e| e.voltage_errors[..n].iter().copied()).collect();
            let angle: Vec<f64> = ok.iter().flat_map(|e| e.voltage_errors[n..].iter().copied()).collect();
            let rho_err: Vec<f64> = ok.iter().map(|e| (e.rho_hat - e.rho_true).abs()).collect();
            let summary = Summary {
                vm: median(&vm),
                angle: median(&angle),
                rho: median(&rho_err),
            };
            per_set[s] = Some(summary);
            let first = summaries.first().and_then(|f: &[Option<Summary>; 2]| f[s]).unwrap_or(summary);
            t_summary.push(vec![
                m.name.clone(),
                format!("{:?}", m.checkpoint.formulation).to_lowercase(),
                format!("{:?}", m.checkpoint.kind).to_lowercase(),
                set_name.to_string(),
                data.len().to_string(),
                (data.len() - ok.len()).to_string(),
                summary.vm.to_string(),
                summary.angle.to_string(),
                summary.rho.to_string(),
                share_zero(&ok, 0..n).to_string(),
                share_zero(&ok, n..2 * n).to_string(),
                share_zero(&ok, 2 * n..net.n_residuals()).to_string(),
                share_zero(&ok, 0..net.n_residuals()).to_string(),
                (first.vm / summary.vm).to_string(),
            ]);
            box_groups.push((format!("{} / {set_name}", m.name), vm));
            if *set_name == "infeasible" {
                scatter_points.extend(ok.iter().map(|e| (e.rho_true, e.rho_hat)));
            }
        }
        summaries.push(per_set);
    }

    let mut t_compare = Table::new(
        header,
        cols(&[
            "model", "feasible_median_rho_error", "infeasible_median_rho_error", "feasible_median_vm_error",
            "infeasible_improvement_vs_first", "feasible_rho_degradation_vs_first", "feasible_vm_degradation_vs_first",
        ]),
    );
    if let Some(first) = summaries.first().copied() {
        for (m, s) in models.iter().zip(&summaries) {
            let (Some(f), Some(i)) = (s[0], s[1]) else { continue };
            let (Some(f0), Some(i0)) = (first[0], first[1]) else { continue };
            t_compare.push(vec![
                m.name.clone(),
                f.rho.to_string(),
                i.rho.to_string(),
                f.vm.to_string(),
                (i0.rho / i.rho).to_string(),
                (f.rho / f0.rho).to_string(),
                (f.vm / f0.vm).to_string(),
            ]);
        }
    }

    for row in &t_summary.rows {
        println!(
            "{} on {} test set: median |ΔV| {:.3e}, median |Δφ| {:.3e}, median |Δρ| {:.3e}",
            row[0], row[3], row[6].parse::<f64>()?, row[7].parse::<f64>()?, row[8].parse::<f64>()?
        );
    }
    ctx.write_table(&ctx.out("errors_voltage.csv"), &t_voltage)?;
    ctx.write_table(&ctx.out("errors_residuals.csv"), &t_resid)?;
    ctx.write_table(&ctx.out("summary.csv"), &t_summary)?;
    ctx.write_table(&ctx.out("infeasible_comparison.csv"), &t_compare)?;
    if args.svg {
        ctx.write(
            &ctx.out("errors_voltage.svg"),
            &crate::svg::box_summary("voltage magnitude error", "|ΔV| (pu)", &box_groups, true),
        )?;
        ctx.write(
            &ctx.out("rho_infeasible.svg"),
            &crate::svg::scatter("infeasible test OCs", "ρ", "predicted ρ", &scatter_points, true, true),
        )?;
    }
    Ok(())
}

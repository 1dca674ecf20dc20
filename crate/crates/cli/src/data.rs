//! `gen`, `train` and `export`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Result};
use clap::{Args, ValueEnum};
use rpf_core::csvio::{sha256_hex, Table};
use rpf_core::dataset::{dataset_from_csv, dataset_to_csv_with, generate_dataset, Dataset, SamplingConfig, SamplingMode};
use rpf_core::error::Error;
use rpf_core::network::Network;
use rpf_core::neural_solver::{
    bim_transform, fit_linear, train as train_solver, BimEncoding, Checkpoint, FeatureKind, Formulation, NeuralSolver,
    OptimizerKind, TrainConfig,
};
use rpf_core::residual::reconstruct_bus_angles;
use rpf_core::stats::r_squared_linear;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{read_input, usage, Context};

pub const TRAIN_FILE: &str = "train.csv";
pub const TRAIN_INFEASIBLE_FILE: &str = "train_infeasible.csv";
pub const TEST_FEASIBLE_FILE: &str = "test_feasible.csv";
pub const TEST_INFEASIBLE_FILE: &str = "test_infeasible.csv";
pub const MODEL_FILE: &str = "model.json";

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct GenArgs {
    /// Feasible training OCs [default: 2000].
    #[arg(long)]
    pub n_train: Option<usize>,
    /// Infeasible training OCs [default: same as --n-train].
    #[arg(long)]
    pub n_train_infeasible: Option<usize>,
    /// OCs in each of the feasible and infeasible test sets [default: 1000].
    #[arg(long)]
    pub n_test: Option<usize>,
}

/// Writes the four datasets (seeds `seed`, `seed+1`, `seed+2`, `seed+3`) and
/// `gen_report.json`.
pub fn gen(ctx: &Context, args: GenArgs) -> Result<()> {
    let n_train = args.n_train.unwrap_or(2000);
    let splits = [
        (TRAIN_FILE, SamplingMode::Feasible, n_train, 0),
        (TRAIN_INFEASIBLE_FILE, SamplingMode::Infeasible, args.n_train_infeasible.unwrap_or(n_train), 1),
        (TEST_FEASIBLE_FILE, SamplingMode::Feasible, args.n_test.unwrap_or(1000), 2),
        (TEST_INFEASIBLE_FILE, SamplingMode::Infeasible, args.n_test.unwrap_or(1000), 3),
    ];
    let mut report = Vec::new();
    for (file, mode, n, offset) in splits {
        let cfg = SamplingConfig::new(mode, n, ctx.seed(offset));
        let start = Instant::now();
        let (dataset, gen_report) = generate_dataset(&ctx.network, &cfg)?;
        let seconds = start.elapsed().as_secs_f64();
        let prov = ctx.provenance("gen", &json!({ "file": file, "sampling": cfg }))?;
        ctx.write(&ctx.out(file), &dataset_to_csv_with(&dataset, &ctx.network, Some(&prov))?)?;
        println!("{file}: {} records ({} dropped) in {seconds:.2} s", dataset.len(), gen_report.dropped);
        report.push(json!({
            "file": file,
            "mode": mode,
            "seed": cfg.seed,
            "records": dataset.len(),
            "attempted": gen_report.attempted,
            "dropped": gen_report.dropped,
            "dropped_indices": gen_report.dropped_indices,
            "seconds": seconds,
        }));
    }
    ctx.write(&ctx.out("gen_report.json"), &serde_json::to_string_pretty(&json!({ "splits": report }))?)
}

pub fn load_data(path: &Path, network: &Network) -> Result<(Dataset, String)> {
    let text = read_input(path, "dataset")?;
    let dataset = dataset_from_csv(&text, network)?;
    Ok((dataset, sha256_hex(text.as_bytes())))
}

/// Loads a checkpoint and checks that it was trained on `network`.
pub fn load_model(path: &Path, network: &Network) -> Result<(Checkpoint, NeuralSolver)> {
    let checkpoint = Checkpoint::from_json(&read_input(path, "model checkpoint")?)?;
    let expected = network.fingerprint();
    if let Some(found) = &checkpoint.network_fingerprint {
        if *found != expected {
            return Err(Error::FingerprintMismatch {
                expected,
                found: found.clone(),
            }
            .into());
        }
    }
    let solver = checkpoint.to_solver()?;
    Ok((checkpoint, solver))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Features {
    Mlp,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FormulationArg {
    Rpf,
    Bim,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerArg {
    Lbfgs,
    Adam,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    /// Feasible training set [default: <out-dir>/train.csv].
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Also train on the infeasible training set.
    #[arg(long)]
    pub with_infeasible: bool,
    /// Infeasible training set [default: <out-dir>/train_infeasible.csv].
    #[arg(long)]
    pub infeasible_data: Option<PathBuf>,
    /// Feature map [default: mlp].
    #[arg(long, value_enum)]
    pub features: Option<Features>,
    /// Variables the model maps between [default: rpf].
    #[arg(long, value_enum)]
    pub formulation: Option<FormulationArg>,
    /// Maximum training epochs (full-batch iterations) [default: 6000].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Widths of the two hidden layers [default: 100,100].
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    /// Optimiser [default: lbfgs].
    #[arg(long, value_enum)]
    pub optimizer: Option<OptimizerArg>,
    /// Epochs without validation improvement before stopping [default: 200].
    #[arg(long)]
    pub patience: Option<usize>,
    /// Share of the data held out for validation [default: 0.1].
    #[arg(long)]
    pub val_fraction: Option<f64>,
    /// Checkpoint path [default: <out-dir>/model.json]; the training curve
    /// goes next to it as `<name>_curve.csv`.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

pub fn train(ctx: &Context, args: TrainArgs) -> Result<()> {
    let net = &ctx.network;
    let (mut dataset, mut fingerprint) = load_data(&ctx.out_or(&args.data, TRAIN_FILE), net)?;
    if args.with_infeasible {
        let (extra, fp) = load_data(&ctx.out_or(&args.infeasible_data, TRAIN_INFEASIBLE_FILE), net)?;
        dataset = dataset.union(&extra)?;
        fingerprint = sha256_hex(format!("{fingerprint}{fp}").as_bytes());
    }
    if dataset.is_empty() {
        bail!("the training set is empty");
    }
    let formulation = args.formulation.unwrap_or(FormulationArg::Rpf);
    let (inputs, targets) = match formulation {
        FormulationArg::Rpf => (dataset.inputs(), dataset.targets()),
        FormulationArg::Bim => {
            let data = bim_transform(&dataset, net, &BimEncoding::from_network(net)?)?;
            (data.inputs, data.targets)
        }
    };
    let hidden = match args.hidden.as_deref() {
        None => [100, 100],
        Some(&[a, b]) => [a, b],
        Some(_) => return Err(usage("--hidden takes exactly two widths, e.g. 100,100")),
    };
    let cfg = TrainConfig {
        max_epochs: args.epochs.unwrap_or(6000),
        optimizer: match args.optimizer.unwrap_or(OptimizerArg::Lbfgs) {
            OptimizerArg::Lbfgs => OptimizerKind::Lbfgs,
            OptimizerArg::Adam => OptimizerKind::Adam,
        },
        seed: ctx.seed(0),
        val_fraction: args.val_fraction.unwrap_or(0.1),
        patience: args.patience.unwrap_or(200),
        hidden,
        ..TrainConfig::default()
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;

    let output = ctx.out_or(&args.output, MODEL_FILE);
    let prov = ctx.provenance("train", &args)?.with_input("dataset", &fingerprint);
    let mut curve = Table::new(
        ctx.header(&prov, json!({})),
        ["epoch", "train_loss", "val_loss"].map(String::from).to_vec(),
    );
    let (solver, train_config) = match args.features.unwrap_or(Features::Mlp) {
        Features::Mlp => {
            let (solver, report) = train_solver(FeatureKind::Mlp, &inputs, &targets, net.n_buses(), &cfg)?;
            for (k, (t, v)) in report.train_loss.iter().zip(&report.val_loss).enumerate() {
                curve.push_floats(&[k as f64, *t, *v]);
            }
            println!(
                "trained {} epochs ({}); best epoch {}: train loss {:e}, val loss {:e}",
                report.epochs,
                report.stop_reason,
                report.best_epoch,
                report.train_loss.get(report.best_epoch).copied().unwrap_or(f64::NAN),
                report.best_val_loss()
            );
            (solver, Some(cfg))
        }
        Features::Linear => {
            let (solver, report) = fit_linear(&inputs, &targets, net.n_buses())?;
            curve.push_floats(&[0.0, report.train_loss, f64::NAN]);
            println!(
                "linear least squares: train loss {:e} (rank {} of {})",
                report.train_loss, report.rank, report.n_features
            );
            (solver, None)
        }
    };
    let mut checkpoint = Checkpoint::new(&solver);
    checkpoint.formulation = match formulation {
        FormulationArg::Rpf => Formulation::Rpf,
        FormulationArg::Bim => Formulation::Bim,
    };
    checkpoint.train_config = train_config;
    checkpoint.dataset_fingerprint = Some(fingerprint);
    checkpoint.network_fingerprint = Some(net.fingerprint());
    ctx.write(&output, &checkpoint.to_json()?)?;

    let stem = output.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    ctx.write_table(&output.with_file_name(format!("{stem}_curve.csv")), &curve)
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct ExportArgs {
    /// Feasible dataset for the angle data [default: generate --n OCs].
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// OCs to generate when no dataset is given [default: 500].
    #[arg(long)]
    pub n: Option<usize>,
    /// Also render the angle data as SVG scatter plots.
    #[arg(long)]
    pub svg: bool,
}

/// Writes `structure.json` (dimensions, labels, cycles) and the angle-versus-
/// power data: for every generator away from the reference bus, its `P_M`
/// against the angle of the branch at its bus and against its bus angle.
pub fn export(ctx: &Context, args: ExportArgs) -> Result<()> {
    let net = &ctx.network;
    let structure = json!({
        "n_buses": net.n_buses(),
        "n_branches": net.n_branches(),
        "n_cycles": net.n_cycles(),
        "n_voltage_vars": net.n_voltage_vars(),
        "n_residuals": net.n_residuals(),
        "n_controls": net.n_controls(),
        "voltage_labels": net.voltage_labels(),
        "residual_labels": net.residual_labels(),
        "control_labels": net.control_labels(),
        "cycles": net.cycles.iter().map(|c| json!({
            "branches": c.branch_ids.iter().map(|&b| net.branches[b].id).collect::<Vec<_>>(),
            "orientations": c.orientations,
        })).collect::<Vec<_>>(),
        "fingerprint": net.fingerprint(),
    });
    ctx.write(&ctx.out("structure.json"), &serde_json::to_string_pretty(&structure)?)?;
    println!(
        "{} buses, {} branches, {} cycles: {} voltage variables, {} residuals",
        net.n_buses(),
        net.n_branches(),
        net.n_cycles(),
        net.n_voltage_vars(),
        net.n_residuals()
    );

    let dataset = match &args.data {
        Some(path) => load_data(path, net)?.0,
        None => {
            let cfg = SamplingConfig::new(SamplingMode::Feasible, args.n.unwrap_or(500), ctx.seed(4));
            generate_dataset(net, &cfg)?.0
        }
    };
    let reference = net.buses.iter().position(|b| b.bus_type == 3).unwrap_or(0);
    let prov = ctx.provenance("export", &args)?;
    let mut points = Table::new(
        ctx.header(&prov, json!({ "reference_bus": net.buses[reference].id })),
        ["oc", "generator", "branch", "p_m", "branch_angle", "bus_angle"].map(String::from).to_vec(),
    );
    let mut summary = Table::new(
        ctx.header(&prov, json!({})),
        ["generator", "bus", "branch", "r2_branch_angle", "r2_bus_angle"].map(String::from).to_vec(),
    );
    let thetas = dataset
        .records
        .iter()
        .map(|r| reconstruct_bus_angles(net, &r.v_star, reference))
        .collect::<rpf_core::error::Result<Vec<_>>>()?;
    for (j, g) in net.generators.iter().enumerate() {
        let Some(branch) = net.branches.iter().position(|b| b.from == g.bus || b.to == g.bus) else { continue };
        if g.bus == reference {
            continue;
        }
        let sign = if net.branches[branch].from == g.bus { 1.0 } else { -1.0 };
        let (mut p, mut phi, mut theta) = (Vec::new(), Vec::new(), Vec::new());
        for (k, (r, th)) in dataset.records.iter().zip(&thetas).enumerate() {
            p.push(r.u[net.layout().gen_pm(j)]);
            phi.push(sign * r.v_star.branch_angles[branch]);
            theta.push(th[g.bus]);
            points.push(vec![
                k.to_string(),
                (j + 1).to_string(),
                net.branches[branch].id.to_string(),
                p[k].to_string(),
                phi[k].to_string(),
                theta[k].to_string(),
            ]);
        }
        let (r2_phi, r2_theta) = (r_squared_linear(&p, &phi), r_squared_linear(&p, &theta));
        println!("generator {}: R² branch angle {r2_phi:.4}, bus angle {r2_theta:.4}", j + 1);
        summary.push(vec![
            (j + 1).to_string(),
            net.buses[g.bus].id.to_string(),
            net.branches[branch].id.to_string(),
            r2_phi.to_string(),
            r2_theta.to_string(),
        ]);
        if args.svg {
            let pairs = |y: &[f64]| p.iter().copied().zip(y.iter().copied()).collect::<Vec<_>>();
            let gen = j + 1;
            ctx.write(
                &ctx.out(&format!("angles_gen{gen}.svg")),
                &crate::svg::scatter(&format!("generator {gen}: branch angle vs P_M"), "P_M (pu)", "branch angle (rad)", &pairs(&phi), false, false),
            )?;
            ctx.write(
                &ctx.out(&format!("bus_angles_gen{gen}.svg")),
                &crate::svg::scatter(&format!("generator {gen}: bus angle vs P_M"), "P_M (pu)", "bus angle (rad)", &pairs(&theta), false, false),
            )?;
        }
    }
    ctx.write_table(&ctx.out("angles_vs_power.csv"), &points)?;
    ctx.write_table(&ctx.out("angles_summary.csv"), &summary)
}

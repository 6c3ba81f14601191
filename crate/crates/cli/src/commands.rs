use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use neumat::gemmsim::{search_blocking_with, simulate_plan_with, AcceleratorConfig, SearchOptions};
use neumat::ir::io::{load_graph, weights_to_bytes};
use neumat::ir::Graph;
use neumat::lowering::{
    execute_plan_mode, extra_parameter_bytes, fidelity_report, lower_graph, quantize_plan, tables_from_ranges,
    LowerOptions, LoweredPlan, PwlMode, TableSpec,
};
use neumat::profiler::{profile_ranges_padded, ClipPolicy, RangeReport};
use neumat::pwl::{build_elastic, fit_uniform, fit_uniform_corrected, ElasticConfig, NonlinearFunc, PwlTable};
use neumat::training::{finetune, history_to_csv, trainable_weights, TrainConfig};
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::inputs::{load_dataset, load_input_sets, stack_outputs, InputSpec};
use crate::manifest::RunManifest;
use crate::{
    ApproximateArgs, LowerArgs, ProfileArgs, ReportArgs, RunArgs, SearchArgs, SimulateArgs, TrainArgs,
};

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, contents)?;
    Ok(())
}

fn snapshot(args: &impl Serialize) -> serde_json::Value {
    serde_json::to_value(args).expect("arguments serialize")
}

fn graph_inputs(graph: &Graph) -> Vec<InputSpec> {
    graph
        .inputs
        .iter()
        .map(|i| InputSpec {
            name: i.name.clone(),
            shape: i.shape.clone(),
        })
        .collect()
}

fn plan_inputs(plan: &LoweredPlan) -> Vec<InputSpec> {
    plan.inputs
        .iter()
        .map(|i| InputSpec {
            name: i.name.clone(),
            shape: plan.slots[i.slot].shape.clone(),
        })
        .collect()
}

fn load_accel(path: Option<&Path>) -> CliResult<AcceleratorConfig> {
    match path {
        Some(p) => Ok(AcceleratorConfig::from_json(&std::fs::read_to_string(p)?)?),
        None => Ok(AcceleratorConfig::default()),
    }
}

pub fn profile(a: &ProfileArgs) -> CliResult<()> {
    let graph = load_graph(&a.graph)?;
    let policy: ClipPolicy = a.policy.parse()?;
    let calibration = load_input_sets(&a.data, &graph_inputs(&graph))?;
    let ranges = profile_ranges_padded(&graph, &calibration, policy, a.padding)?;
    write_file(&a.out, ranges.to_json() + "\n")?;

    let mut m = RunManifest::new("profile", snapshot(a));
    m.input(&a.graph)?;
    m.input(&a.data)?;
    m.output(&a.out)?;
    m.write_beside(&a.out)?;
    Ok(())
}

fn table_spec(a: &ApproximateArgs) -> CliResult<TableSpec> {
    if let Some(segments) = a.segments {
        return Ok(TableSpec::Uniform {
            segments,
            corrected: a.corrected,
        });
    }
    match (a.dlx, a.dly) {
        (Some(dlx), Some(dly)) => {
            let mut cfg = ElasticConfig::new(dlx, dly, a.eth);
            if let Some(max) = a.max_segments {
                cfg.max_segments = max;
            }
            cfg.validate()?;
            Ok(TableSpec::Elastic(cfg))
        }
        _ => Err(CliError::usage(
            "give --dlx and --dly for an elastic table, or --segments for an equal-width one",
        )),
    }
}

pub fn approximate(a: &ApproximateArgs) -> CliResult<()> {
    let spec = table_spec(a)?;
    let mut m = RunManifest::new("approximate", snapshot(a));
    if let Some(ranges_path) = &a.from_ranges {
        let ranges = RangeReport::from_json(&std::fs::read_to_string(ranges_path)?)?;
        let tables = tables_from_ranges(&ranges, spec)?;
        let dir = a.out.clone().unwrap_or_else(|| PathBuf::from("tables"));
        std::fs::create_dir_all(&dir)?;
        m.input(ranges_path)?;
        for (key, t) in &tables {
            let path = dir.join(format!("{key}.json"));
            write_file(&path, t.to_json()? + "\n")?;
            m.output(&path)?;
        }
        m.write_beside(&dir)?;
        return Ok(());
    }
    let (Some(func), Some(range)) = (&a.func, &a.range) else {
        return Err(CliError::usage("give --func with --range, or --from-ranges"));
    };
    let f: NonlinearFunc = func.parse()?;
    let (lo, hi) = (range[0], range[1]);
    let table: PwlTable = match spec {
        TableSpec::Uniform {
            segments,
            corrected: false,
        } => fit_uniform(&f, lo, hi, segments)?,
        TableSpec::Uniform {
            segments,
            corrected: true,
        } => fit_uniform_corrected(&f, lo, hi, segments, a.eth)?,
        TableSpec::Elastic(cfg) => build_elastic(&f, lo, hi, &cfg)?,
    };
    let out = a.out.clone().unwrap_or_else(|| PathBuf::from("table.json"));
    write_file(&out, table.to_json()? + "\n")?;
    m.output(&out)?;
    m.write_beside(&out)?;
    Ok(())
}

/// Reads every `<key>.json` table in `dir`.
fn read_tables(dir: &Path, m: &mut RunManifest) -> CliResult<BTreeMap<String, PwlTable>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    paths.sort();
    let mut tables = BTreeMap::new();
    for p in paths {
        let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let Some(key) = name.strip_suffix(".json") else { continue };
        if key.ends_with(".manifest") {
            continue;
        }
        tables.insert(key.to_string(), PwlTable::from_json(&std::fs::read_to_string(&p)?)?);
        m.input(&p)?;
    }
    Ok(tables)
}

pub fn lower(a: &LowerArgs) -> CliResult<()> {
    let mut m = RunManifest::new("lower", snapshot(a));
    let graph = load_graph(&a.graph)?;
    m.input(&a.graph)?;
    let tables = match &a.tables {
        Some(dir) => read_tables(dir, &mut m)?,
        None => BTreeMap::new(),
    };
    let ranges = match &a.ranges {
        Some(p) => {
            m.input(p)?;
            Some(RangeReport::from_json(&std::fs::read_to_string(p)?)?)
        }
        None => None,
    };
    let mut plan = lower_graph(&graph, &tables, &LowerOptions { ranges })?;
    if a.int8 {
        let data = a.data.as_ref().ok_or_else(|| CliError::usage("--int8 needs --data for calibration"))?;
        let calibration = load_input_sets(data, &plan_inputs(&plan))?;
        m.input(data)?;
        plan = quantize_plan(&plan, &calibration)?;
    }
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let sidecar = plan.save(&a.out)?;
    m.output(&a.out)?;
    m.output(&sidecar)?;
    m.write_beside(&a.out)?;
    Ok(())
}

pub fn run(a: &RunArgs) -> CliResult<()> {
    let mut m = RunManifest::new("run", snapshot(a));
    let plan = LoweredPlan::load(&a.plan)?;
    m.input(&a.plan)?;
    let sets = load_input_sets(&a.input, &plan_inputs(&plan))?;
    m.input(&a.input)?;
    let mode = if a.exact { PwlMode::Exact } else { PwlMode::Table };
    let outs = sets
        .iter()
        .map(|s| execute_plan_mode(&plan, s, mode))
        .collect::<Result<Vec<_>, _>>()?;
    let outputs_path = a.out.join("outputs.nmwt");
    write_file(&outputs_path, weights_to_bytes(&stack_outputs(&outs)?))?;
    m.output(&outputs_path)?;
    if let Some(g) = &a.graph {
        let graph = load_graph(g)?;
        m.input(g)?;
        let report = fidelity_report(&graph, &plan, &sets)?;
        let path = a.out.join("fidelity.csv");
        write_file(&path, report.to_csv()?)?;
        m.output(&path)?;
    }
    m.write_beside(&outputs_path)?;
    Ok(())
}

fn search_options(energy_budget: Option<f64>, search_stationary: bool) -> SearchOptions {
    SearchOptions {
        energy_budget,
        search_stationary,
        ..SearchOptions::default()
    }
}

pub fn simulate(a: &SimulateArgs) -> CliResult<()> {
    let mut m = RunManifest::new("simulate", snapshot(a));
    let plan = LoweredPlan::load(&a.plan)?;
    m.input(&a.plan)?;
    if let Some(p) = &a.accel {
        m.input(p)?;
    }
    let acc = load_accel(a.accel.as_deref())?;
    let cost = simulate_plan_with(&plan, &acc, &search_options(a.energy_budget, a.search_stationary))?;
    write_file(&a.out, cost.to_csv()?)?;
    m.output(&a.out)?;
    m.write_beside(&a.out)?;
    Ok(())
}

pub fn search(a: &SearchArgs) -> CliResult<()> {
    let mut m = RunManifest::new("search", snapshot(a));
    if let Some(p) = &a.accel {
        m.input(p)?;
    }
    let acc = load_accel(a.accel.as_deref())?;
    let result = search_blocking_with(a.m, a.k, a.n, &acc, &search_options(a.energy_budget, a.search_stationary))?;
    write_file(&a.out, serde_json::to_string_pretty(&result)? + "\n")?;
    m.output(&a.out)?;
    m.write_beside(&a.out)?;
    Ok(())
}

pub fn train(a: &TrainArgs) -> CliResult<()> {
    let cfg: TrainConfig = match &a.config {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
        None => TrainConfig::default(),
    };
    let mut m = RunManifest::new("train", serde_json::json!({ "args": snapshot(a), "train": cfg }));
    let plan = LoweredPlan::load(&a.plan)?;
    m.input(&a.plan)?;
    let data = load_dataset(&a.data)?;
    m.input(&a.data)?;
    if let Some(p) = &a.config {
        m.input(p)?;
    }
    let eval = match &a.eval {
        Some(p) => {
            m.input(p)?;
            Some(load_dataset(p)?)
        }
        None => None,
    };
    let mode = if a.exact { PwlMode::Exact } else { PwlMode::Table };
    let result = finetune(&plan, &data, eval.as_ref(), &cfg, mode)?;

    std::fs::create_dir_all(&a.out)?;
    let weights = a.out.join("weights.nmwt");
    write_file(&weights, weights_to_bytes(&trainable_weights(&result.plan)))?;
    let metrics = a.out.join("metrics.csv");
    write_file(&metrics, history_to_csv(&result.history)?)?;
    let plan_path = a.out.join("plan.json");
    let sidecar = result.plan.save(&plan_path)?;
    for p in [&weights, &metrics, &plan_path, &sidecar] {
        m.output(p)?;
    }
    m.write_beside(&weights)?;
    Ok(())
}

pub fn report(a: &ReportArgs) -> CliResult<()> {
    let mut m = RunManifest::new("report", snapshot(a));
    if let Some(p) = &a.accel {
        m.input(p)?;
    }
    let acc = load_accel(a.accel.as_deref())?;
    let reference = match (&a.graph, &a.data) {
        (Some(g), Some(d)) => {
            let graph = load_graph(g)?;
            let sets = load_input_sets(d, &graph_inputs(&graph))?;
            m.input(g)?;
            m.input(d)?;
            Some((graph, sets))
        }
        _ => None,
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "plan",
        "mode",
        "tables",
        "segments",
        "network_params",
        "extra_bytes",
        "network_bytes",
        "overhead_ratio",
        "macs",
        "latency_cycles",
        "energy_j",
        "ops_per_joule",
        "max_abs_error",
        "mean_abs_error",
    ])?;
    for path in &a.inputs {
        let plan = LoweredPlan::load(path)?;
        m.input(path)?;
        let params = extra_parameter_bytes(&plan);
        let cost = simulate_plan_with(&plan, &acc, &SearchOptions::default())?;
        let (max_abs, mean_abs) = match &reference {
            Some((graph, sets)) => {
                let f = fidelity_report(graph, &plan, sets)?;
                let mean = f.outputs.iter().map(|o| o.mean_abs).fold(0.0, f64::max);
                (f.max_abs().to_string(), mean.to_string())
            }
            None => (String::new(), String::new()),
        };
        w.write_record([
            path.display().to_string(),
            if plan.is_int8() { "int8" } else { "fp32" }.to_string(),
            plan.tables.len().to_string(),
            params.tables.iter().map(|t| t.segments).sum::<usize>().to_string(),
            plan.network_parameter_count().to_string(),
            params.extra_bytes.to_string(),
            params.network_bytes.to_string(),
            params.ratio.to_string(),
            cost.total.macs.to_string(),
            cost.total.latency_cycles.to_string(),
            cost.total.energy_j().to_string(),
            cost.efficiency.to_string(),
            max_abs,
            mean_abs,
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| neumat::Error::Format(e.to_string()))?;
    write_file(&a.out, bytes)?;
    m.output(&a.out)?;
    m.write_beside(&a.out)?;
    Ok(())
}

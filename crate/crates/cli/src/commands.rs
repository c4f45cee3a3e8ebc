use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use serde_json::{json, Value};

use lipcert::certify::{certify_dataset, records_to_csv, DEFAULT_TEMPERATURE};
use lipcert::crmtrain::{attack_dataset, train as run_training};
use lipcert::liplt::{network_bound, pairwise_lipschitz};
use lipcert::netgraph::{parse_model, save_model};
use lipcert::{
    ActivationSector, BoundMethod, BoundReport, CrmConfig, GKind, PairwiseMode, PgdConfig, PowerIterConfig,
    ResidualChain,
};

use crate::args::{
    AttackArgs, BoundArgs, BoundSpec, CertifyArgs, Common, CompareArgs, DataArgs, Format, GChoice, Split, TrainArgs,
};
use crate::data::{load, load_args};
use crate::usage;

fn setup_workers(common: &Common) -> Result<usize> {
    let n = match common.workers {
        Some(0) => return Err(usage("--workers must be >= 1")),
        Some(n) => n,
        None => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
    };
    // a pool may already exist when called twice in one process; keep it
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(n)
}

fn power_cfg(common: &Common) -> Result<PowerIterConfig> {
    let cfg = PowerIterConfig {
        max_iters: common.power_iters,
        rel_tol: common.power_tol,
        seed: common.seed,
        ..PowerIterConfig::default()
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn parse_bound(spec: &BoundSpec) -> Result<(BoundMethod, PairwiseMode)> {
    let method = spec.method.parse().map_err(|e: lipcert::LipError| usage(e.to_string()))?;
    let mode = spec.mode.parse().map_err(|e: lipcert::LipError| usage(e.to_string()))?;
    Ok((method, mode))
}

fn load_model(path: &Path) -> Result<ResidualChain> {
    parse_model(path).with_context(|| format!("loading model {}", path.display()))
}

fn common_json(common: &Common, workers: usize, power: &PowerIterConfig) -> Value {
    json!({ "seed": common.seed, "workers": workers, "power": power, "timing": common.timing })
}

fn data_json(d: &DataArgs, split: Split) -> Value {
    json!({
        "data": d.data,
        "split": format!("{split:?}").to_lowercase(),
        "classes": d.classes,
        "limit": d.limit,
    })
}

fn untimed(report: &mut BoundReport, common: &Common) {
    if !common.timing {
        report.wall_time = 0.0;
    }
}

fn resolve_format(common: &Common) -> Format {
    common.format.unwrap_or_else(|| match &common.out {
        Some(p) if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) => Format::Csv,
        _ => Format::Json,
    })
}

/// Writes JSON or CSV to `--out` (stdout when absent).
fn emit(common: &Common, doc: &Value, csv: impl FnOnce() -> String) -> Result<()> {
    let text = match resolve_format(common) {
        Format::Json => serde_json::to_string_pretty(doc)? + "\n",
        Format::Csv => csv(),
    };
    match &common.out {
        Some(path) => write_file(path, &text),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn whole_network_report(chain: &ResidualChain, method: &BoundMethod, power: &PowerIterConfig) -> Result<BoundReport> {
    let start = std::time::Instant::now();
    let lipschitz = network_bound(chain, &chain.final_map.op, method, power)?;
    Ok(BoundReport {
        method: method.clone(),
        mode: None,
        lipschitz,
        num_classes: chain.num_classes,
        per_class: vec![],
        pairwise: vec![],
        wall_time: start.elapsed().as_secs_f64(),
    })
}

pub fn bound(a: BoundArgs) -> Result<()> {
    let workers = setup_workers(&a.common)?;
    let power = power_cfg(&a.common)?;
    let (method, mode) = parse_bound(&a.bound)?;
    let chain = load_model(&a.model)?;
    let mut report = if chain.num_classes >= 2 {
        pairwise_lipschitz(&chain, mode, &method, &power)?
    } else {
        whole_network_report(&chain, &method, &power)?
    };
    untimed(&mut report, &a.common);
    let doc = json!({
        "command": "bound",
        "config": {
            "model": a.model,
            "method": method.to_string(),
            "mode": mode,
            "run": common_json(&a.common, workers, &power),
        },
        "report": report,
    });
    emit(&a.common, &doc, || {
        if report.pairwise.is_empty() {
            format!("L\n{}\n", report.lipschitz)
        } else {
            report.to_csv()
        }
    })
}

pub fn certify(a: CertifyArgs) -> Result<()> {
    let workers = setup_workers(&a.common)?;
    let power = power_cfg(&a.common)?;
    let (method, mode) = parse_bound(&a.bound)?;
    if !(a.eps >= 0.0) || !(a.temperature > 0.0) {
        return Err(usage("need --eps >= 0 and --t > 0"));
    }
    let chain = load_model(&a.model)?;
    let split = a.data.split.unwrap_or(Split::Test);
    let data = load_args(&a.data, Split::Test)?;
    let mut out = certify_dataset(&chain, &data, a.eps, a.temperature, mode, &method, &power)?;
    untimed(&mut out.report, &a.common);
    eprintln!(
        "n={} clean_acc={:.4} cert_acc={:.4} mean_radius={:.6}",
        out.summary.n, out.summary.clean_acc, out.summary.cert_acc, out.summary.mean_radius
    );
    let doc = json!({
        "command": "certify",
        "config": {
            "model": a.model,
            "data": data_json(&a.data, split),
            "eps": a.eps,
            "t": a.temperature,
            "method": method.to_string(),
            "mode": mode,
            "run": common_json(&a.common, workers, &power),
        },
        "summary": out.summary,
        "bound": out.report,
    });
    emit(&a.common, &doc, || records_to_csv(&out.records))
}

pub fn train(a: TrainArgs) -> Result<()> {
    let workers = setup_workers(&a.common)?;
    let power = power_cfg(&a.common)?;
    let (method, mode) = parse_bound(&a.bound)?;
    let out_dir = a.common.out.clone().ok_or_else(|| usage("train needs --out DIR for the trained model"))?;
    if a.common.format == Some(Format::Csv) {
        return Err(usage("train writes a model directory; use --metrics for CSV"));
    }
    let split = a.data.split.unwrap_or(Split::Train);
    let train_data = load_args(&a.data, Split::Train)?;
    let val_data = match &a.val {
        Some(spec) => Some(load(spec, Split::Test, a.data.classes.as_deref(), None)?),
        None if !a.data.data.starts_with("moons:") && split == Split::Train => {
            Some(load(&a.data.data, Split::Test, a.data.classes.as_deref(), None)?)
        }
        None => None,
    };

    let chain = match &a.model {
        Some(p) => load_model(p)?,
        None => {
            let hidden = a.hidden.clone().unwrap_or_else(|| vec![64, 64]);
            let mut dims = vec![train_data.input_dim()];
            dims.extend(hidden);
            dims.push(train_data.num_classes);
            ResidualChain::init_mlp(&dims, ActivationSector::relu(), a.common.seed)
                .map_err(|e| usage(e.to_string()))?
        }
    };

    let mut cfg = CrmConfig::new(a.eps);
    cfg.lambda = a.lambda;
    cfg.temperature = a.temperature;
    cfg.g = match a.g {
        GChoice::Hinge => GKind::Hinge { target: a.rbar.unwrap_or(2.0 * a.eps) },
        GChoice::Exp => GKind::ExpDecay { scale: a.rbar.unwrap_or(a.eps) },
    };
    cfg.lr = a.lr;
    cfg.momentum = a.momentum;
    cfg.epochs = a.epochs;
    cfg.batch_size = a.batch_size;
    cfg.mode = mode;
    cfg.method = method;
    cfg.power = PowerIterConfig { max_iters: a.train_power_iters, ..power };
    cfg.eval_power = power;
    cfg.pgd = PgdConfig { seed: a.common.seed, ..PgdConfig::default() };
    cfg.seed = a.common.seed;
    cfg.validate().map_err(|e| usage(e.to_string()))?;

    let start = std::time::Instant::now();
    let out = run_training(&chain, &train_data, val_data.as_ref(), &cfg)?;
    let elapsed = start.elapsed().as_secs_f64();
    save_model(&out.chain, &out_dir)?;
    if let Some(last) = out.metrics.last() {
        eprintln!(
            "epochs={} loss={:.6} clean_acc={:.4} cert_acc={:.4} mean_radius={:.6}",
            out.metrics.len(),
            last.loss,
            last.clean_acc,
            last.cert_acc,
            last.mean_radius
        );
    }
    if let Some(path) = &a.metrics {
        write_file(path, &out.metrics_csv())?;
    }
    let mut doc = json!({
        "command": "train",
        "config": {
            "data": data_json(&a.data, split),
            "val": a.val,
            "init_model": a.model,
            "hidden": a.hidden,
            "crm": cfg,
            "run": common_json(&a.common, workers, &power),
        },
        "metrics": out.metrics,
    });
    if a.common.timing {
        doc["wall_time"] = json!(elapsed);
    }
    write_file(&out_dir.join("train.json"), &(serde_json::to_string_pretty(&doc)? + "\n"))
}

pub fn attack(a: AttackArgs) -> Result<()> {
    let workers = setup_workers(&a.common)?;
    let power = power_cfg(&a.common)?;
    let (method, mode) = parse_bound(&a.bound)?;
    if !(a.eps > 0.0) {
        return Err(usage("attack needs --eps > 0"));
    }
    if a.step_size.is_some_and(|s| !(s > 0.0)) {
        return Err(usage("--step-size must be > 0"));
    }
    let chain = load_model(&a.model)?;
    let split = a.data.split.unwrap_or(Split::Test);
    let data = load_args(&a.data, Split::Test)?;
    let pgd = PgdConfig { steps: a.steps, step_size: a.step_size, restarts: a.restarts, seed: a.common.seed };
    let outcomes = attack_dataset(&chain, &data, a.eps, &pgd);
    let mut cert = certify_dataset(&chain, &data, a.eps, DEFAULT_TEMPERATURE, mode, &method, &power)?;
    untimed(&mut cert.report, &a.common);

    let n = data.len();
    let flipped = outcomes.iter().filter(|o| o.success).count();
    let conflicts: Vec<usize> =
        (0..n).filter(|&i| cert.records[i].verified && outcomes[i].success).collect();
    let success_rate = flipped as f64 / n.max(1) as f64;
    eprintln!(
        "n={n} attack_success={success_rate:.4} cert_acc={:.4} certified_but_flipped={}",
        cert.summary.cert_acc,
        conflicts.len()
    );
    let doc = json!({
        "command": "attack",
        "config": {
            "model": a.model,
            "data": data_json(&a.data, split),
            "eps": a.eps,
            "pgd": pgd,
            "method": method.to_string(),
            "mode": mode,
            "run": common_json(&a.common, workers, &power),
        },
        "summary": {
            "n": n,
            "clean_acc": cert.summary.clean_acc,
            "attack_success_rate": success_rate,
            "empirical_robust_acc": 1.0 - success_rate,
            "cert_acc": cert.summary.cert_acc,
            "certified_but_flipped": conflicts,
        },
        "bound": cert.report,
    });
    emit(&a.common, &doc, || {
        let mut s = String::from("index,label,success,distance,restart,step,radius_lower,verified\n");
        for (i, o) in outcomes.iter().enumerate() {
            let r = &cert.records[i];
            s.push_str(&format!(
                "{i},{},{},{},{},{},{},{}\n",
                data.labels[i],
                u8::from(o.success),
                o.distance,
                o.restart,
                o.step,
                r.radius_lower,
                u8::from(r.verified)
            ));
        }
        s
    })
}

pub fn compare(a: CompareArgs) -> Result<()> {
    let workers = setup_workers(&a.common)?;
    let power = power_cfg(&a.common)?;
    let methods: Vec<BoundMethod> = a
        .methods
        .iter()
        .map(|m| m.parse().map_err(|e: lipcert::LipError| usage(e.to_string())))
        .collect::<Result<_>>()?;
    let chain = load_model(&a.model)?;
    if chain.num_classes < 2 {
        return Err(usage("compare needs a model with at least 2 classes"));
    }
    let mut rows = Vec::with_capacity(methods.len());
    for method in &methods {
        let mut row = serde_json::Map::new();
        row.insert("method".into(), json!(method.to_string()));
        for mode in PairwiseMode::ALL {
            let report = pairwise_lipschitz(&chain, mode, method, &power)?;
            row.insert(mode.to_string(), json!(report.mean_pairwise()));
        }
        rows.push(Value::Object(row));
    }
    let doc = json!({
        "command": "compare",
        "config": {
            "model": a.model,
            "methods": a.methods,
            "run": common_json(&a.common, workers, &power),
        },
        "grid": rows,
    });
    emit(&a.common, &doc, || {
        let mut s = String::from("method");
        for mode in PairwiseMode::ALL {
            s.push_str(&format!(",{mode}"));
        }
        s.push('\n');
        for row in &rows {
            s.push_str(row["method"].as_str().unwrap_or_default());
            for mode in PairwiseMode::ALL {
                s.push_str(&format!(",{}", row[mode.to_string().as_str()]));
            }
            s.push('\n');
        }
        s
    })
}

//! Subcommand implementations: data generation, training, embedding export,
//! evaluation, compatibility checks, and the experiment drivers.

use std::path::{Path, PathBuf};

use bt2_core::analysis::{
    ablation_csv, lemma1_search, run_ablation, run_seeds, run_series, seeds_csv, series_csv,
    AblationPlan, PipelineConfig, SeedPlan, SeriesMethod, SeriesPlan,
};
use bt2_core::data::{
    gen_synthetic, read_dataset, read_embeddings, split_old_new, write_dataset, write_embeddings,
    SyntheticData, SyntheticSpec,
};
use bt2_core::format::write_atomic;
use bt2_core::model::{read_checkpoint, write_checkpoint, EmbeddingModel};
use bt2_core::retrieval::{
    check_backward_compat, check_not_hurting, evaluate, reports_to_csv, reports_to_jsonl,
    EvalOptions, EvalReport, Gallery, Metric,
};
use bt2_core::train::{embed_dataset, train_method, Method, TrainError};

use crate::config::RunConfig;
use crate::{
    AblateArgs, CheckCompatArgs, CliError, EmbedArgs, EvalArgs, GenDataArgs, SeedsArgs,
    SeriesArgs, TrainArgs, VerifyLemma1Args,
};

pub const FORMAT_VERSION: u32 = 1;

fn parse_list<T: std::str::FromStr>(what: &str, s: &str) -> Result<Vec<T>, CliError> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("invalid {what} entry '{p}'")))
        })
        .collect()
}

fn parse_metrics(s: &str) -> Result<Vec<Metric>, CliError> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| Metric::parse(p.trim()).map_err(|e| CliError::Usage(e.to_string())))
        .collect()
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

pub fn gen_data(args: &GenDataArgs) -> Result<(), CliError> {
    let spec = SyntheticSpec {
        num_classes: args.classes,
        per_class: args.per_class,
        feature_dim: args.dim,
        separation: args.separation,
        seed: args.seed,
    };
    let data = gen_synthetic(&spec)?;
    let (old_split, _) = split_old_new(&data.train, args.old_fraction)?;

    let train_path = path_with_suffix(&args.out, "-train.dset");
    let val_path = path_with_suffix(&args.out, "-val.dset");
    let old_path = path_with_suffix(&args.out, "-train-old.dset");
    write_dataset(&train_path, &data.train)?;
    write_dataset(&val_path, &data.val)?;
    write_dataset(&old_path, &old_split)?;

    println!("classes = {}", spec.num_classes);
    println!("per_class = {}", spec.per_class);
    println!("feature_dim = {}", spec.feature_dim);
    println!("separation = {}", spec.separation);
    println!("old_fraction = {}", args.old_fraction);
    println!("seed = {}", spec.seed);
    println!("wrote {}", train_path.display());
    println!("wrote {}", val_path.display());
    println!("wrote {}", old_path.display());
    Ok(())
}

fn path_with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

pub fn resolve_train_config(args: &TrainArgs) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(file) = &args.config {
        cfg.load_file(file)?;
    }
    if let Some(m) = &args.method {
        cfg.method = Some(Method::parse(m).map_err(|e| CliError::Usage(e.to_string()))?);
    }
    if let Some(p) = &args.data {
        cfg.data = Some(p.clone());
    }
    if let Some(p) = &args.out {
        cfg.out = Some(p.clone());
    }
    if let Some(p) = &args.old_model {
        cfg.old_model = Some(p.clone());
    }
    if let Some(p) = &args.new_independent {
        cfg.new_independent = Some(p.clone());
    }
    args.hyper.apply(&mut cfg);
    Ok(cfg)
}

pub fn train(args: &TrainArgs) -> Result<(), CliError> {
    let cfg = resolve_train_config(args)?;
    let method = cfg.validate_dependencies()?;
    let data_path = cfg
        .data
        .clone()
        .ok_or_else(|| CliError::Usage("--data is required".into()))?;
    let out = cfg
        .out
        .clone()
        .ok_or_else(|| CliError::Usage("--out is required".into()))?;

    for line in cfg.echo_lines() {
        println!("{line}");
    }

    let dataset = read_dataset(&data_path)?;
    let old = load_optional_model(&cfg.old_model)?;
    let new_ind = load_optional_model(&cfg.new_independent)?;

    let result = train_method(
        method,
        &dataset,
        old.as_ref(),
        new_ind.as_ref(),
        &cfg.dims_config(),
        &cfg.loss_config(),
        &cfg.train_config(),
    );
    match result {
        Ok(model) => {
            write_checkpoint(&out, &model.to_checkpoint())
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            println!("wrote checkpoint {}", out.display());
            Ok(())
        }
        Err(TrainError::Diverged {
            epoch,
            step,
            detail,
            last_good,
        }) => {
            write_checkpoint(&out, &last_good).map_err(|e| CliError::Runtime(e.to_string()))?;
            Err(CliError::Runtime(format!(
                "training diverged at epoch {epoch}, step {step}: {detail}; \
                 last-good checkpoint written to {}",
                out.display()
            )))
        }
        Err(e) => Err(e.into()),
    }
}

fn load_optional_model(path: &Option<PathBuf>) -> Result<Option<EmbeddingModel>, CliError> {
    match path {
        None => Ok(None),
        Some(p) => {
            let ck = read_checkpoint(p).map_err(|e| CliError::Runtime(e.to_string()))?;
            Ok(Some(
                EmbeddingModel::from_checkpoint(&ck).map_err(|e| CliError::Runtime(e.to_string()))?,
            ))
        }
    }
}

// ---------------------------------------------------------------------------
// embed
// ---------------------------------------------------------------------------

pub fn embed(args: &EmbedArgs) -> Result<(), CliError> {
    let ck = read_checkpoint(&args.model).map_err(|e| CliError::Runtime(e.to_string()))?;
    let model =
        EmbeddingModel::from_checkpoint(&ck).map_err(|e| CliError::Runtime(e.to_string()))?;
    let data = read_dataset(&args.data)?;
    let tag = match &args.tag {
        Some(t) => t.clone(),
        None => args
            .model
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| model.kind().to_string()),
    };
    let records = embed_dataset(&model, &data, &tag)?;
    write_embeddings(&args.out, &records)?;
    println!(
        "wrote {} ({} records, dim {}, tag '{tag}')",
        args.out.display(),
        records.len(),
        model.output_dim()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

fn config_header(entries: &[(&str, String)]) -> serde_json::Value {
    let mut config = serde_json::Map::new();
    for (k, v) in entries {
        config.insert(k.to_string(), serde_json::Value::String(v.clone()));
    }
    serde_json::json!({
        "format_version": FORMAT_VERSION,
        "config": serde_json::Value::Object(config),
    })
}

/// Writes `<out>.jsonl` (header line with the resolved config, then one
/// report per line) and `<out>.csv` (config as comment lines).
fn write_reports(
    out: &Path,
    header_entries: &[(&str, String)],
    reports: &[EvalReport],
) -> Result<(), CliError> {
    let header = config_header(header_entries);
    let jsonl = format!("{header}\n{}", reports_to_jsonl(reports));
    let comments: Vec<String> = std::iter::once(format!("format_version = {FORMAT_VERSION}"))
        .chain(
            header_entries
                .iter()
                .map(|(k, v)| format!("{k} = {v}")),
        )
        .collect();
    let csv = reports_to_csv(reports, &comments);
    let jsonl_path = path_with_suffix(out, ".jsonl");
    let csv_path = path_with_suffix(out, ".csv");
    write_atomic(&jsonl_path, jsonl.as_bytes()).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_atomic(&csv_path, csv.as_bytes()).map_err(|e| CliError::Runtime(e.to_string()))?;
    println!("wrote {}", jsonl_path.display());
    println!("wrote {}", csv_path.display());
    Ok(())
}

pub fn eval(args: &EvalArgs) -> Result<(), CliError> {
    let metrics = parse_metrics(&args.metrics)?;
    let query_store = read_embeddings(&args.query)?;
    let gallery_store = read_embeddings(&args.gallery)?;
    if !query_store.labels_present || !gallery_store.labels_present {
        return Err(CliError::Runtime(format!(
            "metric error: {} require labels, but a label-free store was given",
            metrics
                .iter()
                .map(|m| m.name())
                .collect::<Vec<_>>()
                .join("/")
        )));
    }
    let qtag = query_store
        .records
        .first()
        .map(|r| r.model_tag.clone())
        .unwrap_or_default();
    let gtag = gallery_store
        .records
        .first()
        .map(|r| r.model_tag.clone())
        .unwrap_or_default();
    let case = format!("{qtag}/{gtag}");
    let gallery = Gallery::new(gallery_store.records)?;
    let opts = EvalOptions {
        exclude_self: !args.no_self_exclude,
    };
    let report = evaluate(&case, &query_store.records, &gallery, &opts)?;
    println!(
        "{}: cmc1 {:.4} cmc5 {:.4} map {:.4} ({} queries, {} gallery)",
        report.case, report.cmc1, report.cmc5, report.map, report.queries, report.gallery
    );
    if report.map_skipped > 0 {
        println!(
            "note: {} queries lacked a same-label gallery record and were excluded from mAP",
            report.map_skipped
        );
    }
    write_reports(
        &args.out,
        &[
            ("query", args.query.display().to_string()),
            ("gallery", args.gallery.display().to_string()),
            ("metrics", args.metrics.clone()),
            ("self_exclude", (!args.no_self_exclude).to_string()),
        ],
        &[report],
    )
}

// ---------------------------------------------------------------------------
// check-compat
// ---------------------------------------------------------------------------

pub fn check_compat(args: &CheckCompatArgs) -> Result<(), CliError> {
    let metrics = parse_metrics(&args.metrics)?;
    let old_query = read_embeddings(&args.old_query)?;
    let new_query = read_embeddings(&args.new_query)?;
    if !old_query.labels_present || !new_query.labels_present {
        return Err(CliError::Runtime(
            "metric error: compatibility checks require labeled stores".into(),
        ));
    }
    let gallery_store = read_embeddings(&args.gallery)?;
    let gallery = Gallery::new(gallery_store.records)?;

    let compat = check_backward_compat(&old_query.records, &new_query.records, &gallery, &metrics)?;
    println!("backward compatibility (relaxed):");
    for v in &compat.relaxed {
        println!(
            "  {}: M(new/old) {:.4} vs M(old/old) {:.4} -> {}",
            v.metric.name(),
            v.lhs,
            v.rhs,
            if v.holds { "holds" } else { "violated" }
        );
    }
    println!(
        "strict violation fraction: {:.6} ({} of {} pairs)",
        compat.strict_violation_fraction(),
        compat.strict_violations,
        compat.strict_pairs
    );

    let not_hurting = match &args.new_independent {
        Some(path) => {
            let ind = read_embeddings(path)?;
            let report = check_not_hurting(&new_query.records, &ind.records, &metrics)?;
            println!("not hurting the new model (relaxed):");
            for v in &report.relaxed {
                println!(
                    "  {}: M(new/new) {:.4} vs M(new'/new') {:.4} -> {}",
                    v.metric.name(),
                    v.lhs,
                    v.rhs,
                    if v.holds { "holds" } else { "violated" }
                );
            }
            Some(report)
        }
        None => None,
    };

    if let Some(out) = &args.out {
        let doc = serde_json::json!({
            "format_version": FORMAT_VERSION,
            "backward_compatibility": compat,
            "not_hurting": not_hurting,
        });
        write_atomic(out, format!("{doc}\n").as_bytes())
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// analysis drivers
// ---------------------------------------------------------------------------

fn pipeline_config_from(
    hyper: &crate::HyperArgs,
    data_spec: SyntheticSpec,
    old_fraction: f64,
) -> PipelineConfig {
    let mut cfg = RunConfig::default();
    hyper.apply(&mut cfg);
    PipelineConfig {
        data_spec,
        old_fraction,
        dims: cfg.dims_config(),
        losses: cfg.loss_config(),
        train: cfg.train_config(),
    }
}

fn load_synthetic(train: &Path, val: &Path) -> Result<SyntheticData, CliError> {
    Ok(SyntheticData {
        train: read_dataset(train)?,
        val: read_dataset(val)?,
    })
}

pub fn ablate_dims(args: &AblateArgs) -> Result<(), CliError> {
    let dims: Vec<usize> = parse_list("dimension", &args.dims)?;
    let data = load_synthetic(&args.train, &args.val)?;
    let cfg = pipeline_config_from(&args.hyper, SyntheticSpec::default(), args.old_fraction);
    let rows = run_ablation(&AblationPlan { dims }, &cfg, &data)?;
    let csv = ablation_csv(&rows);
    write_atomic(&args.out, csv.as_bytes()).map_err(|e| CliError::Runtime(e.to_string()))?;
    print!("{csv}");
    println!("wrote {}", args.out.display());
    Ok(())
}

pub fn series(args: &SeriesArgs) -> Result<(), CliError> {
    let stages: Result<Vec<SeriesMethod>, CliError> = args
        .stages
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| SeriesMethod::parse(p.trim()).map_err(|e| CliError::Usage(e.to_string())))
        .collect();
    let plan = SeriesPlan {
        stages: stages?,
        base_dim: args.base_dim,
        d: args.d,
    };
    let data = load_synthetic(&args.train, &args.val)?;
    let cfg = pipeline_config_from(&args.hyper, SyntheticSpec::default(), 0.5);
    let outcome = run_series(&plan, &cfg, &data)?;
    let csv = series_csv(&outcome.cells);
    write_atomic(&args.out, csv.as_bytes()).map_err(|e| CliError::Runtime(e.to_string()))?;
    print!("{csv}");
    println!("wrote {}", args.out.display());
    if let Some(failure) = outcome.failure {
        return Err(CliError::Runtime(format!(
            "{failure}; partial results emitted"
        )));
    }
    Ok(())
}

pub fn seeds(args: &SeedsArgs) -> Result<(), CliError> {
    let seeds: Vec<u64> = parse_list("seed", &args.seeds)?;
    let spec = SyntheticSpec {
        num_classes: args.classes,
        per_class: args.per_class,
        feature_dim: args.dim,
        separation: args.separation,
        seed: args.data_seed,
    };
    let cfg = pipeline_config_from(&args.hyper, spec, args.old_fraction);
    let summary = run_seeds(&SeedPlan { seeds }, &cfg)?;
    let csv = seeds_csv(&summary);
    write_atomic(&args.out, csv.as_bytes()).map_err(|e| CliError::Runtime(e.to_string()))?;
    print!("{csv}");
    println!("wrote {}", args.out.display());
    Ok(())
}

pub fn verify_lemma1(args: &VerifyLemma1Args) -> Result<(), CliError> {
    let search = lemma1_search(args.eps, args.trials, args.seed)?;
    println!("eps = {}", search.eps);
    println!("trials = {}", search.trials);
    println!("kept = {}", search.kept);
    println!("bound = {}", search.bound);
    match search.worst_cosine {
        Some(w) => println!("worst_cosine = {w}"),
        None => println!("worst_cosine = inconclusive (no candidate satisfied the constraints)"),
    }
    println!("violations = {}", search.violations);
    let floor = 1.0 - 2.0 * args.eps * args.eps;
    println!("mirror_floor = {floor}");
    Ok(())
}

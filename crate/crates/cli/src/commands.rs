//! One function per subcommand.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use log::info;
use serde::Serialize;
use spatter_core::dataset::{self, Dataset, SampleRecord};
use spatter_core::explain::{background_rows, pdp, pdp_csv, shap_csv, shap_summary, shap_summary_csv, PdpGrid};
use spatter_core::fieldstore::{import_points_csv, save_bundle, validate};
use spatter_core::io_util::{fmt_f64, write_atomic};
use spatter_core::learners::importance::{feature_importance, permutation_importance, Metric};
use spatter_core::learners::search::{cv_table_csv, grid_search};
use spatter_core::learners::{evaluate, fit, TrainedModel};
use spatter_core::metrics::MetricsReport;
use spatter_core::procmap::{emit_map, screen, ProcessMapCell};
use spatter_core::segment::blobs_csv;
use spatter_core::synthgen::{gen_dataset, surrogate_run};
use spatter_core::track::{trajectories_csv, Tracker};
use spatter_core::Error;

use crate::config::{DatasetSource, PipelineConfig};
use crate::pipeline::{analyze_run, load, run_dataset, segment_bundle};
use crate::{Cli, CliError, Command};

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    config: &'a PipelineConfig,
    threads: Option<usize>,
    seed_override: Option<u64>,
    inputs: Vec<String>,
    outputs: Vec<String>,
    started_unix_s: f64,
    finished_unix_s: f64,
}

/// Output directory plus the bookkeeping for the run manifest.
struct Ctx<'a> {
    cfg: &'a PipelineConfig,
    out: &'a Path,
    inputs: Vec<String>,
    outputs: Vec<String>,
}

fn internal(e: impl std::fmt::Display) -> CliError {
    CliError::Internal(e.to_string())
}

impl Ctx<'_> {
    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<(), CliError> {
        write_atomic(&self.path(rel), bytes).map_err(internal)?;
        self.outputs.push(rel.to_string());
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<(), CliError> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(internal)?;
        bytes.push(b'\n');
        self.write(rel, &bytes)
    }

    /// Configured path, or `default` inside the output directory.
    fn input(&mut self, configured: &Option<PathBuf>, default: &str) -> PathBuf {
        let p = configured.clone().unwrap_or_else(|| self.path(default));
        self.inputs.push(p.display().to_string());
        p
    }

    fn bundles(&mut self) -> Result<Vec<PathBuf>, CliError> {
        let paths = if self.cfg.paths.bundles.is_empty() {
            let frames = self.path("frames");
            let mut dirs: Vec<PathBuf> = match fs::read_dir(&frames) {
                Ok(rd) => rd.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.join("meta.json").is_file()).collect(),
                Err(_) => Vec::new(),
            };
            dirs.sort();
            dirs
        } else {
            self.cfg.paths.bundles.clone()
        };
        if paths.is_empty() {
            return Err(CliError::Data {
                stage: "inputs".into(),
                source: Error::Empty("no bundles: set paths.bundles or run `synth` first".into()),
            });
        }
        self.inputs.extend(paths.iter().map(|p| p.display().to_string()));
        Ok(paths)
    }

    fn dataset(&mut self, configured: &Option<PathBuf>, default: &str, stage: &str) -> Result<Dataset, CliError> {
        let p = self.input(configured, default);
        dataset::from_csv(&p).map_err(CliError::data(stage))
    }

    fn model(&mut self, stage: &str) -> Result<TrainedModel, CliError> {
        let p = self.input(&self.cfg.paths.model.clone(), "model.json");
        spatter_core::io_util::read_json(&p).map_err(CliError::data(stage))
    }
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

pub fn execute(command: Command, cfg: &PipelineConfig, out: &Path, cli: &Cli) -> Result<(), CliError> {
    let started = unix_now();
    fs::create_dir_all(out).map_err(|e| internal(format!("cannot create {}: {e}", out.display())))?;
    let mut ctx = Ctx { cfg, out, inputs: Vec::new(), outputs: Vec::new() };
    match command {
        Command::Ingest => ingest(&mut ctx)?,
        Command::Segment => segment_cmd(&mut ctx)?,
        Command::Track => track(&mut ctx)?,
        Command::Sample => sample(&mut ctx)?,
        Command::Dataset => dataset_cmd(&mut ctx)?,
        Command::Train => train(&mut ctx)?,
        Command::Evaluate => evaluate_cmd(&mut ctx)?,
        Command::Explain => explain(&mut ctx)?,
        Command::Synth => synth(&mut ctx)?,
        Command::Screen => screen_cmd(&mut ctx)?,
        Command::Map => map(&mut ctx)?,
    }
    let manifest = Manifest {
        command: command.name(),
        version: env!("CARGO_PKG_VERSION"),
        config: cfg,
        threads: cli.threads,
        seed_override: cli.seed,
        inputs: std::mem::take(&mut ctx.inputs),
        outputs: std::mem::take(&mut ctx.outputs),
        started_unix_s: started,
        finished_unix_s: unix_now(),
    };
    info!("{}: wrote {} artifact(s) to {}", command.name(), manifest.outputs.len(), out.display());
    ctx.write_json(&format!("manifests/{}.json", command.name()), &manifest)
}

fn ingest(ctx: &mut Ctx) -> Result<(), CliError> {
    let (Some(csv), Some(grid)) = (ctx.cfg.ingest.points_csv.clone(), ctx.cfg.ingest.grid.clone()) else {
        return Err(CliError::Config("ingest needs ingest.points_csv and ingest.grid".into()));
    };
    ctx.inputs.push(csv.display().to_string());
    let bundle = import_points_csv(&csv, grid).map_err(CliError::data("ingest"))?;
    let violations = validate(&bundle);
    if !violations.is_empty() {
        return Err(CliError::Data { stage: "ingest".into(), source: Error::Validation(violations) });
    }
    save_bundle(&bundle, &ctx.path("ingested")).map_err(internal)?;
    ctx.outputs.push("ingested".into());
    Ok(())
}

fn bundle_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "bundle".into())
}

fn segment_cmd(ctx: &mut Ctx) -> Result<(), CliError> {
    let paths = ctx.bundles()?;
    let mut summary = Vec::new();
    for p in &paths {
        let name = bundle_name(p);
        let bundle = load(p).map_err(CliError::data("segment"))?;
        let (labels, result) = segment_bundle(&bundle, &ctx.cfg.segment).map_err(CliError::data("segment"))?;
        ctx.write(&format!("segment/{name}/blobs.csv"), blobs_csv(&result).as_bytes())?;
        ctx.write(&format!("segment/{name}/labels.u32"), &labels.labels_bytes())?;
        summary.push(vec![
            name,
            fmt_f64(bundle.meta.time_us),
            result.composite.n_cells.to_string(),
            result.spatter.len().to_string(),
            result.dropped_small.to_string(),
        ]);
    }
    let text = spatter_core::io_util::csv_text(&["bundle", "time_us", "composite_cells", "spatter", "dropped_small"], summary);
    ctx.write("segment/summary.csv", text.as_bytes())
}

fn track(ctx: &mut Ctx) -> Result<(), CliError> {
    let paths = ctx.bundles()?;
    let mut tracker = Tracker::new(ctx.cfg.tracker).map_err(CliError::data("track"))?;
    for p in &paths {
        let bundle = load(p).map_err(CliError::data("track"))?;
        let (_, result) = segment_bundle(&bundle, &ctx.cfg.segment).map_err(CliError::data("segment"))?;
        tracker.push_frame(bundle.meta.time_us, result.spatter).map_err(CliError::data("track"))?;
    }
    let state = tracker.finish();
    ctx.write("trajectories.csv", trajectories_csv(&state).as_bytes())
}

fn sample(ctx: &mut Ctx) -> Result<(), CliError> {
    let paths = ctx.bundles()?;
    let c = ctx.cfg;
    let run = analyze_run(&paths, &c.segment, &c.tracker, c.sampling.n_r, c.sampling.seed).map_err(CliError::data("sample"))?;
    let records: Vec<SampleRecord> = run.frames.iter().flat_map(|f| f.meltpool.iter().map(SampleRecord::from_meltpool)).collect();
    ctx.write("meltpool_samples.csv", dataset::to_csv_string(&Dataset::from_records(&records)).as_bytes())
}

fn dataset_cmd(ctx: &mut Ctx) -> Result<(), CliError> {
    let c = ctx.cfg;
    let d = &c.dataset;
    let full = match d.source {
        DatasetSource::Bundles => {
            let paths = ctx.bundles()?;
            let run = analyze_run(&paths, &c.segment, &c.tracker, c.sampling.n_r, c.sampling.seed)
                .map_err(CliError::data("dataset"))?;
            ctx.write("trajectories.csv", trajectories_csv(&run.tracks).as_bytes())?;
            run_dataset(&d.run_id, c.sampling.seed, &run).map_err(CliError::data("dataset"))?
        }
        DatasetSource::Synthetic => gen_dataset(&d.class_model, d.n_records, d.seed).map_err(CliError::data("dataset"))?,
    };
    ctx.write("dataset.csv", dataset::to_csv_string(&full).as_bytes())?;
    ctx.write_json("provenance.json", &full.provenance)?;
    let stats = dataset::feature_stats(&full, d.stats_bins, d.kde_bandwidth).map_err(CliError::data("dataset stats"))?;
    ctx.write_json("stats.json", &stats)?;
    let pairs = dataset::pairs_subsample(&full, d.pairs_max, d.seed);
    ctx.write("pairs.csv", dataset::to_csv_string(&pairs).as_bytes())?;
    let model_ds = if d.drop_spatial { dataset::drop_spatial(&full).map_err(CliError::data("dataset"))? } else { full };
    let (train, test) = dataset::split(&model_ds, d.train_frac, d.seed).map_err(CliError::data("dataset split"))?;
    info!("dataset: {} records, train {} / test {}", model_ds.n_rows(), train.n_rows(), test.n_rows());
    ctx.write("train.csv", dataset::to_csv_string(&train).as_bytes())?;
    ctx.write("test.csv", dataset::to_csv_string(&test).as_bytes())
}

fn train(ctx: &mut Ctx) -> Result<(), CliError> {
    let c = ctx.cfg;
    let train = ctx.dataset(&c.paths.train, "train.csv", "train")?;
    let (base, grid) = c.learner.search_space().map_err(|e| CliError::Config(format!("learner: {e}")))?;
    let spec = match grid {
        Some(g) => {
            let result = grid_search(&base, &g, &train, c.learner.folds, c.learner.seed).map_err(CliError::data("grid search"))?;
            ctx.write("cv_table.csv", cv_table_csv(&result).as_bytes())?;
            info!("train: best of {} grid point(s) is #{}", result.table.len(), result.best_index);
            result.best
        }
        None => base,
    };
    let model = fit(&spec, &train).map_err(CliError::data("fit"))?;
    ctx.write_json("model.json", &model)?;
    match feature_importance(&model) {
        Ok(imp) => {
            let rows = imp.into_iter().map(|(f, v)| vec![f, fmt_f64(v)]);
            ctx.write("importance.csv", spatter_core::io_util::csv_text(&["feature", "importance"], rows).as_bytes())?;
        }
        Err(Error::Unsupported(m)) => info!("train: {m}"),
        Err(e) => return Err(CliError::data("importance")(e)),
    }
    Ok(())
}

#[derive(Serialize)]
struct Metrics {
    train: Option<MetricsReport>,
    test: MetricsReport,
    train_test_accuracy_gap: Option<f64>,
}

fn evaluate_cmd(ctx: &mut Ctx) -> Result<(), CliError> {
    let c = ctx.cfg;
    let model = ctx.model("evaluate")?;
    let test = ctx.dataset(&c.paths.test, "test.csv", "evaluate")?;
    let train_path = c.paths.train.clone().unwrap_or_else(|| ctx.path("train.csv"));
    let train_report = if train_path.is_file() {
        ctx.inputs.push(train_path.display().to_string());
        let train = dataset::from_csv(&train_path).map_err(CliError::data("evaluate"))?;
        Some(evaluate(&model, &train, c.learner.threshold).map_err(CliError::data("evaluate train"))?)
    } else {
        None
    };
    let test_report = evaluate(&model, &test, c.learner.threshold).map_err(CliError::data("evaluate test"))?;
    let gap = train_report.as_ref().map(|t| t.accuracy - test_report.accuracy);
    ctx.write_json("metrics.json", &Metrics { train: train_report, test: test_report, train_test_accuracy_gap: gap })?;
    if c.learner.permutation_repeats > 0 {
        let perm = permutation_importance(&model, &test, c.learner.permutation_repeats, c.learner.seed, Metric::Accuracy)
            .map_err(CliError::data("permutation importance"))?;
        let rows = perm.into_iter().map(|p| vec![p.feature, fmt_f64(p.mean), fmt_f64(p.std)]);
        let text = spatter_core::io_util::csv_text(&["feature", "mean_drop", "std_drop"], rows);
        ctx.write("permutation_importance.csv", text.as_bytes())?;
    }
    Ok(())
}

fn explain(ctx: &mut Ctx) -> Result<(), CliError> {
    let c = ctx.cfg;
    let e = &c.explain;
    let model = ctx.model("explain")?;
    let train = ctx.dataset(&c.paths.train, "train.csv", "explain")?;
    let test = ctx.dataset(&c.paths.test, "test.csv", "explain")?;
    let background = background_rows(&train, e.background, e.seed);
    let records = match e.max_records {
        Some(n) => background_rows(&test, n, e.seed),
        None => test,
    };
    let summary = shap_summary(&model, &records, &background, e.max_features).map_err(CliError::data("shapley"))?;
    ctx.write("explain/shap.csv", shap_csv(&summary).as_bytes())?;
    ctx.write("explain/shap_summary.csv", shap_summary_csv(&summary).as_bytes())?;
    let features = e.pdp_features.clone().unwrap_or_else(|| train.feature_names.clone());
    for f in &features {
        let curve = pdp(&model, &train, f, &PdpGrid::Quantiles(e.pdp_points)).map_err(CliError::data("pdp"))?;
        ctx.write(&format!("explain/pdp_{f}.csv"), pdp_csv(&curve).as_bytes())?;
    }
    Ok(())
}

fn synth(ctx: &mut Ctx) -> Result<(), CliError> {
    let s = &ctx.cfg.synth;
    let run = surrogate_run(&s.process, &s.material, &s.surrogate).map_err(CliError::data("synth"))?;
    let frames = ctx.path("frames");
    if frames.exists() {
        fs::remove_dir_all(&frames).map_err(|e| internal(format!("cannot clear {}: {e}", frames.display())))?;
    }
    for (f, b) in run.frames.iter().enumerate() {
        let rel = format!("frames/frame_{f:04}");
        save_bundle(b, &ctx.path(&rel)).map_err(internal)?;
        ctx.outputs.push(rel);
    }
    info!("synth: {} frame(s), {} droplet(s)", run.frames.len(), run.truth.spatter.len());
    ctx.write_json("ground_truth.json", &run.truth)?;
    ctx.write_json("layout.json", &run.layout)
}

fn screen_cmd(ctx: &mut Ctx) -> Result<(), CliError> {
    let c = ctx.cfg;
    let model = ctx.model("screen")?;
    let points = c.screen.grid.points();
    let cells = screen(&points, &model, &c.synth.material, &c.screen.config).map_err(CliError::data("screen"))?;
    info!("screen: {} grid point(s)", cells.len());
    ctx.write_json("screen_cells.json", &cells)
}

fn map(ctx: &mut Ctx) -> Result<(), CliError> {
    let p = ctx.input(&ctx.cfg.paths.screen_cells.clone(), "screen_cells.json");
    let cells: Vec<ProcessMapCell> = spatter_core::io_util::read_json(&p).map_err(CliError::data("map"))?;
    let written = emit_map(&cells, &ctx.cfg.map.overlay, &ctx.path("map")).map_err(CliError::data("map"))?;
    ctx.outputs.extend(written.into_iter().map(|w| format!("map/{w}")));
    Ok(())
}

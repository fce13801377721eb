//! `xview`: train cross-view encoders, precompute region embeddings, render
//! text-to-map heatmaps, run the retrieval and clustering evaluations, and
//! serve the HTTP API.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use xview::eval::{cross_view_report, curve_table, format_table, silhouette_curve, Ablation, AblationRow, Direction};
use xview::geodata::{build_grid, read_manifest, GeoSample};
use xview::mapstore::{open_provider, PrecomputeOptions, StoreManifest};
use xview::queryengine::render_heatmap;
use xview::queryengine::service::{self, AppState, CATALOG_ENV, DEFAULT_PORT, MODEL_ENV, PORT_ENV};
use xview::trainer::{checkpoint_config, embed_pairs, embedding_matrix, load_dataset};
use xview::{
    BBox, CaptureTime, Catalog, CrossViewModel, Encoders, QueryEngine, QueryRequest, RegionSpec, RegionStatus, TrainConfig,
    Trainer,
};

#[derive(Parser)]
#[command(name = "xview", version, about = "Cross-view embeddings and zero-shot text-to-map queries")]
struct Cli {
    /// Log filter, e.g. `info` or `xview=debug`.
    #[arg(long, global = true, default_value = "warn", env = "XVIEW_LOG")]
    log: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the overhead and dynamic encoders.
    Train {
        /// TOML file of training settings.
        #[arg(long)]
        config: PathBuf,
        /// Directory for metrics.jsonl, checkpoint.ckpt and model.ckpt.
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Fetch imagery for a bounding box and store its cell embeddings.
    EmbedRegion {
        #[command(flatten)]
        place: Place,
        /// Region name; the id is derived from it and the extent.
        #[arg(long)]
        name: String,
        /// `min_lat,min_lon,max_lat,max_lon` in degrees.
        #[arg(long, value_parser = parse_bbox, allow_hyphen_values = true)]
        bbox: BBox,
        #[arg(long)]
        zoom: i32,
        #[arg(long, default_value_t = 256)]
        tile_px: u32,
        /// `fixture[:seed]`, `dir:<path>` or `xyz:<url template>`.
        #[arg(long, default_value = "fixture")]
        provider: String,
        /// Capture time the stored map is conditioned on, e.g. `2020-07-01T12:00:00`.
        #[arg(long, value_parser = parse_time)]
        time: Option<CaptureTime>,
    },
    /// Render a heatmap for a text prompt over a stored region.
    Map {
        #[command(flatten)]
        place: Place,
        /// Region id or name.
        #[arg(long)]
        region: String,
        #[arg(long)]
        prompt: String,
        /// Re-condition the map on this capture time.
        #[arg(long, value_parser = parse_time)]
        time: Option<CaptureTime>,
        /// Ignore metadata and use the overhead embeddings alone.
        #[arg(long)]
        no_meta: bool,
        /// Keep raw cosine similarities instead of the clipped [0, 1] scale.
        #[arg(long)]
        raw: bool,
        /// PNG path; the JSON sidecar is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-view retrieval metrics for a checkpoint.
    EvalRetrieval {
        #[command(flatten)]
        eval: EvalData,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
    /// Silhouette curves of frozen-encoder versus trained overhead embeddings.
    EvalSilhouette {
        #[command(flatten)]
        eval: EvalData,
        /// Cluster counts to evaluate.
        #[arg(long, value_delimiter = ',', default_value = "2,4,8,16,32")]
        k: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
    /// Serve the region catalog over HTTP.
    Serve {
        #[command(flatten)]
        place: Place,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, env = PORT_ENV, default_value_t = DEFAULT_PORT)]
        port: u16,
    },
}

#[derive(Args)]
struct Place {
    /// Region catalog directory.
    #[arg(long, env = CATALOG_ENV, default_value = "catalog")]
    catalog: PathBuf,
    /// Trained model checkpoint.
    #[arg(long, env = MODEL_ENV)]
    model: PathBuf,
}

#[derive(Args)]
struct EvalData {
    /// Trained model checkpoint.
    #[arg(long, env = MODEL_ENV)]
    model: PathBuf,
    /// Sample manifest; defaults to the dataset recorded in the checkpoint.
    #[arg(long, conflicts_with = "config")]
    manifest: Option<PathBuf>,
    /// Training config whose dataset settings name the samples.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Table,
}

fn parse_bbox(s: &str) -> std::result::Result<BBox, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match v[..] {
        [min_lat, min_lon, max_lat, max_lon] => Ok(BBox {
            min_lat,
            min_lon,
            max_lat,
            max_lon,
        }),
        _ => Err(format!("expected 4 comma-separated numbers, got {}", v.len())),
    }
}

fn parse_time(s: &str) -> std::result::Result<CaptureTime, String> {
    CaptureTime::parse(s).map_err(|e| e.to_string())
}

fn load_model(path: &Path) -> Result<CrossViewModel> {
    CrossViewModel::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn train(config: &Path, out: &Path, resume: Option<&Path>) -> Result<()> {
    let cfg = TrainConfig::from_file(config)?;
    let data = load_dataset(&cfg)?;
    let mut trainer = match resume {
        Some(ckpt) => {
            // the checkpoint's settings win, except for how long to keep going
            let mut t = Trainer::resume(ckpt, data)?;
            t.config.epochs = cfg.epochs;
            t.config.max_steps = cfg.max_steps;
            t
        }
        None => Trainer::new(cfg, data)?,
    };
    let history = trainer.run(Some(out))?;
    let last = history.last();
    println!(
        "{}",
        json!({
            "steps": trainer.state.step,
            "final_loss": last.map(|r| r.loss),
            "tau": last.map(|r| r.tau),
            "model": out.join("model.ckpt"),
            "metrics": out.join("metrics.jsonl"),
        })
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn embed_region(
    place: &Place,
    name: &str,
    bbox: BBox,
    zoom: i32,
    tile_px: u32,
    provider: &str,
    time: Option<CaptureTime>,
) -> Result<()> {
    let model = load_model(&place.model)?;
    let spec = RegionSpec::new(bbox, zoom, tile_px)?;
    let grid = build_grid(&spec)?;
    let source = open_provider(provider)?;
    let catalog = Catalog::open(&place.catalog)?;
    let manifest = StoreManifest::pending(name, spec, provider, time, &model)?;
    tracing::info!(cells = grid.len(), "embedding region {name}");
    let store = catalog.ingest(manifest, &model, source.as_ref(), &PrecomputeOptions::default())?;
    let m = &store.manifest;
    println!(
        "{}",
        json!({
            "region_id": m.region_id,
            "name": m.name,
            "status": m.status,
            "rows": m.rows,
            "cols": m.cols,
            "errors": m.errors.len(),
        })
    );
    if m.status != RegionStatus::Ready {
        bail!("{} of {} cells failed; rerun to retry them", m.errors.len(), m.cells());
    }
    Ok(())
}

/// Accepts a region id or, failing that, a unique region name.
fn resolve_region(catalog: &Catalog, key: &str) -> Result<String> {
    if catalog.region_dir(key).is_ok() && catalog.get(key).is_ok() {
        return Ok(key.to_string());
    }
    let named: Vec<StoreManifest> = catalog.list()?.into_iter().filter(|m| m.name == key).collect();
    match named.as_slice() {
        [] => bail!("no region with id or name {key:?} in {}", catalog.root().display()),
        [one] => Ok(one.region_id.clone()),
        many => {
            let ids: Vec<&str> = many.iter().map(|m| m.region_id.as_str()).collect();
            bail!("name {key:?} matches several regions ({}); pass an id", ids.join(", "))
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn map(place: &Place, region: &str, prompt: &str, time: Option<CaptureTime>, no_meta: bool, raw: bool, out: &Path) -> Result<()> {
    let catalog = Catalog::open(&place.catalog)?;
    let id = resolve_region(&catalog, region)?;
    let store = catalog.load(&id)?;
    let engine = QueryEngine::new(load_model(&place.model)?)?;
    let mut req = QueryRequest::new(&id, prompt);
    if let Some(t) = time {
        req = req.with_time(t);
    }
    req.use_meta = no_meta.then_some(false);
    req.raw = raw;
    let heatmap = engine.query(&store, &req)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let sidecar = render_heatmap(&heatmap, out)?;
    println!(
        "{}",
        json!({
            "image": out,
            "sidecar": sidecar,
            "argmax": heatmap.argmax,
        })
    );
    Ok(())
}

fn eval_samples(eval: &EvalData) -> Result<(Encoders, Vec<GeoSample>, Option<TrainConfig>)> {
    let encoders = Encoders::load(&eval.model).with_context(|| format!("loading model {}", eval.model.display()))?;
    let recorded = checkpoint_config(&eval.model)?;
    let samples = match (&eval.manifest, &eval.config, &recorded) {
        (Some(path), _, _) => read_manifest(path)?,
        (None, Some(path), _) => load_dataset(&TrainConfig::from_file(path)?)?,
        (None, None, Some(cfg)) => load_dataset(cfg)?,
        (None, None, None) => bail!("checkpoint records no dataset; pass --manifest or --config"),
    };
    Ok((encoders, samples, recorded))
}

fn eval_retrieval(eval: &EvalData, format: Format) -> Result<()> {
    let (enc, samples, recorded) = eval_samples(eval)?;
    let meta_training = enc.model.dynamic.is_some();
    let dropout = meta_training && recorded.is_some_and(|c| c.dynamic_dropout > 0.0);
    let mut rows = Vec::new();
    let settings: &[bool] = if meta_training { &[false, true] } else { &[false] };
    for &meta_inference in settings {
        let (overhead, ground) = embed_pairs(&enc.model, enc.ground.as_ref(), &samples, meta_inference)?;
        for direction in [Direction::Overhead2Ground, Direction::Ground2Overhead] {
            rows.push(AblationRow {
                ablation: Ablation {
                    meta_training,
                    dropout,
                    meta_inference,
                },
                report: cross_view_report(&overhead, &ground, direction)?,
            });
        }
    }
    match format {
        Format::Json => println!("{}", serde_json::to_string_pretty(&rows)?),
        Format::Table => print!("{}", format_table(&rows)),
    }
    Ok(())
}

fn eval_silhouette(eval: &EvalData, ks: &[usize], seed: u64, format: Format) -> Result<()> {
    let (enc, samples, _) = eval_samples(eval)?;
    let mut frozen = Vec::with_capacity(samples.len());
    for s in &samples {
        frozen.push(enc.ground.encode(&*s.overhead_tile.load()?)?);
    }
    let (trained, _) = embed_pairs(&enc.model, enc.ground.as_ref(), &samples, false)?;
    let curve = silhouette_curve(
        embedding_matrix(&frozen).view(),
        embedding_matrix(&trained).view(),
        ks,
        seed,
    )?;
    match format {
        Format::Json => println!("{}", serde_json::to_string_pretty(&curve)?),
        Format::Table => print!("{}", curve_table(&curve, "frozen", "trained")),
    }
    Ok(())
}

fn serve(place: &Place, host: &str, port: u16) -> Result<()> {
    let catalog = Catalog::open(&place.catalog)?;
    let engine = QueryEngine::new(load_model(&place.model)?)?;
    let state = AppState::new(catalog, engine);
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind((host, port))
            .await
            .with_context(|| format!("binding {host}:{port}"))?;
        println!("listening on http://{}", listener.local_addr()?);
        service::serve_listener(state, listener).await?;
        Ok(())
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, out, resume } => train(&config, &out, resume.as_deref()),
        Command::EmbedRegion {
            place,
            name,
            bbox,
            zoom,
            tile_px,
            provider,
            time,
        } => embed_region(&place, &name, bbox, zoom, tile_px, &provider, time),
        Command::Map {
            place,
            region,
            prompt,
            time,
            no_meta,
            raw,
            out,
        } => map(&place, &region, &prompt, time, no_meta, raw, &out),
        Command::EvalRetrieval { eval, format } => eval_retrieval(&eval, format),
        Command::EvalSilhouette { eval, k, seed, format } => eval_silhouette(&eval, &k, seed, format),
        Command::Serve { place, host, port } => serve(&place, &host, port),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::new(&cli.log))
        .with_writer(std::io::stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

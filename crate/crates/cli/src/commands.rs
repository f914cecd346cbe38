//! Subcommands.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use lerf_core::checkpoint::{write_checkpoint, Checkpoint};
use lerf_core::field::FieldConfig;
use lerf_core::fixture::{fixture_run_config, generate_fixture, write_fixture, FixtureConfig};
use lerf_core::provider::EmbeddingFile;
use lerf_core::pyramid::read_pyramid;
use lerf_core::query::{write_overlay_png, write_raster, ScaleSweep, DEFAULT_TEMPERATURE};
use lerf_core::render::rgb_png_bytes;
use lerf_core::scene::load_dataset;
use lerf_core::train::{train, write_loss_csv, RunConfig};

use crate::embedding::{build_context, default_canonical_phrases, make_embedder, QuerySource};
use crate::server::{serve, AppState};
use crate::session::{manifest_paths, require_file, QueryOptions, Session};
use crate::InputError;

#[derive(Debug, Parser)]
#[command(name = "lerf", version, about = "Train and query language embedded radiance fields")]
pub struct Cli {
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run configuration (TOML, or JSON by extension).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Optimize a field on a dataset and its embedding file.
    Train(TrainArgs),
    /// Render a dataset view to PNG.
    Render(RenderArgs),
    /// Score one view against a text or embedding query.
    Query(QueryArgs),
    /// Serve interactive queries over HTTP.
    Serve(ServeArgs),
    /// Write the synthetic two-box scene with its embeddings.
    MakeFixture(FixtureArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory (with transforms.json) or manifest file.
    #[arg(long)]
    pub data: PathBuf,
    /// Feature pyramid container.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub rays_per_step: Option<usize>,
    /// Loss trace; defaults to the checkpoint path with a `.loss.csv` suffix.
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
    /// Train radiance only.
    #[arg(long)]
    pub no_language: bool,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub view: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ProviderArgs {
    /// Base URL of the text embedding provider.
    #[arg(long)]
    pub provider: Option<String>,
    /// JSON object mapping text to embedding, used instead of a provider.
    #[arg(long, conflicts_with = "provider")]
    pub text_table: Option<PathBuf>,
    /// Canonical phrases, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub canonicals: Option<Vec<String>>,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub view: String,
    #[arg(long, required_unless_present = "embedding_file", conflicts_with = "embedding_file")]
    pub text: Option<String>,
    /// Query embedding as JSON, bypassing the text provider.
    #[arg(long)]
    pub embedding_file: Option<PathBuf>,
    /// Fixed world-space scale; skips scale selection.
    #[arg(long)]
    pub scale: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_TEMPERATURE)]
    pub temperature: f64,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    /// Keep pixels regardless of how many training views see them.
    #[arg(long)]
    pub no_visibility: bool,
    /// Pixel stride of the scale search pass.
    #[arg(long, default_value_t = 1)]
    pub search_stride: u32,
    #[command(flatten)]
    pub provider: ProviderArgs,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// 0 picks a free port.
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long)]
    pub no_visibility: bool,
    #[command(flatten)]
    pub provider: ProviderArgs,
}

#[derive(Debug, Args)]
pub struct FixtureArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub width: Option<u32>,
    #[arg(long)]
    pub height: Option<u32>,
    #[arg(long)]
    pub train_views: Option<usize>,
}

pub fn load_run_config(path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    require_file(path, "config file")?;
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(anyhow::Error::from)
    } else {
        toml::from_str(&text).map_err(anyhow::Error::from)
    };
    cfg.map_err(|e| InputError(format!("{}: {e}", path.display())).into())
}

pub fn run(cli: Cli) -> Result<()> {
    let mut config = load_run_config(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        config.train.rng_seed = seed;
    }
    match cli.command {
        Command::Train(a) => cmd_train(a, config),
        Command::Render(a) => cmd_render(a),
        Command::Query(a) => cmd_query(a),
        Command::Serve(a) => cmd_serve(a),
        Command::MakeFixture(a) => cmd_make_fixture(a, cli.seed),
    }
}

fn cmd_train(a: TrainArgs, mut config: RunConfig) -> Result<()> {
    if let Some(n) = a.max_steps {
        config.train.max_steps = n;
    }
    if let Some(n) = a.rays_per_step {
        config.train.rays_per_step = n;
    }
    if a.no_language {
        config.train.language_losses = false;
    }
    let (manifest, _) = manifest_paths(&a.data);
    require_file(&manifest, "dataset manifest")?;
    let pyramid = match (&a.embeddings, config.train.language_losses) {
        (Some(p), _) => {
            require_file(p, "embeddings file")?;
            Some(read_pyramid(p).with_context(|| format!("reading {}", p.display()))?)
        }
        (None, true) => return Err(InputError("--embeddings is required unless --no-language is set".into()).into()),
        (None, false) => None,
    };
    let dataset = load_dataset(&manifest)?;
    let mut pyramid = pyramid;
    if let Some(p) = pyramid.as_mut() {
        p.bind(&dataset.image_sizes(), config.pyramid.overlap)?;
    }
    let field = match (&config.field, &pyramid) {
        (Some(f), _) => f.clone(),
        (None, Some(p)) => FieldConfig::desk(p.embed_dim as u32, p.dino_dim as u32),
        (None, None) => FieldConfig::desk(8, 4),
    };
    log::info!(
        "training {} steps x {} rays on {} frames",
        config.train.max_steps,
        config.train.rays_per_step,
        dataset.frames.len()
    );
    let every = config.train.checkpoint_every;
    let out_path = a.out.clone();
    let render = config.render.clone();
    let outcome = train(&dataset, pyramid.as_ref(), &config, field, |entry, state| {
        if entry.step % 100 == 0 {
            log::info!(
                "step {} rgb {:.5} lang {:.5} dino {:.5} lr {:.2e}",
                entry.step,
                entry.rgb,
                entry.lang,
                entry.dino,
                entry.lr
            );
        }
        if every > 0 && state.step % every == 0 && state.step < config.train.max_steps {
            write_checkpoint(
                &out_path,
                &Checkpoint {
                    step: state.step,
                    render: render.clone(),
                    params: state.params.clone(),
                },
            )?;
        }
        Ok(())
    })?;
    write_checkpoint(
        &a.out,
        &Checkpoint {
            step: config.train.max_steps,
            render: config.render.clone(),
            params: outcome.params,
        },
    )?;
    let csv = a.loss_csv.unwrap_or_else(|| a.out.with_extension("loss.csv"));
    write_loss_csv(&csv, &outcome.log)?;
    println!("wrote {} and {}", a.out.display(), csv.display());
    Ok(())
}

fn cmd_render(a: RenderArgs) -> Result<()> {
    let session = Session::open(&a.checkpoint, &a.data)?;
    let k = session.view(&a.view)?.camera.intrinsics;
    let rgb = session.render_rgb(&a.view)?;
    fs::write(&a.out, rgb_png_bytes(k.width, k.height, &rgb)?).with_context(|| format!("writing {}", a.out.display()))?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn provider_phrases(p: &ProviderArgs) -> Vec<String> {
    p.canonicals.clone().unwrap_or_else(default_canonical_phrases)
}

fn file_stem_label(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn cmd_query(a: QueryArgs) -> Result<()> {
    let session = Session::open(&a.checkpoint, &a.data)?;
    session.view(&a.view)?;
    let source = match (&a.text, &a.embedding_file) {
        (_, Some(p)) => {
            require_file(p, "embedding file")?;
            QuerySource::File(EmbeddingFile::read(p)?)
        }
        (Some(t), None) if t.trim().is_empty() => return Err(InputError("query text is empty".into()).into()),
        (Some(t), None) => QuerySource::Text(t.clone()),
        (None, None) => unreachable!("clap requires one of --text and --embedding-file"),
    };
    let embedder = make_embedder(a.provider.text_table.as_deref(), a.provider.provider.as_deref())?;
    let ctx = build_context(source, &provider_phrases(&a.provider), embedder.as_ref(), a.temperature)?;
    let opts = QueryOptions {
        scale: a.scale,
        visibility: !a.no_visibility,
        sweep: ScaleSweep {
            search_stride: a.search_stride.max(1),
            ..ScaleSweep::default()
        },
    };
    let out = session.query(&a.view, &ctx, &opts)?;
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let stem = format!("{}_{}", a.view, file_stem_label(&ctx.query_label));
    let raster = a.out_dir.join(format!("{stem}.lrfr"));
    let overlay = a.out_dir.join(format!("{stem}_overlay.png"));
    let sidecar = a.out_dir.join(format!("{stem}.json"));
    write_raster(&raster, &out.map)?;
    write_overlay_png(&overlay, &out.map)?;
    let side = out.sidecar(&ctx);
    fs::write(&sidecar, serde_json::to_string_pretty(&side)?)
        .with_context(|| format!("writing {}", sidecar.display()))?;
    println!(
        "{}: max score {} at {:?}, scale {:.3} ({})",
        side.query,
        side.max_score.map_or("n/a".into(), |s| format!("{s:.4}")),
        side.argmax,
        side.selected_scale,
        side.scale_source
    );
    println!("wrote {}, {}, {}", raster.display(), overlay.display(), sidecar.display());
    Ok(())
}

fn cmd_serve(a: ServeArgs) -> Result<()> {
    let session = Session::open(&a.checkpoint, &a.data)?;
    let embedder = make_embedder(a.provider.text_table.as_deref(), a.provider.provider.as_deref())?;
    let addr = format!("{}:{}", a.host, a.port);
    let listener = std::net::TcpListener::bind(&addr).map_err(|e| InputError(format!("cannot listen on {addr}: {e}")))?;
    let local = listener.local_addr()?;
    let state = AppState::new(session, embedder, provider_phrases(&a.provider), !a.no_visibility);
    println!("listening on http://{local}");
    use std::io::Write;
    std::io::stdout().flush()?;
    serve(state, listener)
}

fn cmd_make_fixture(a: FixtureArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg = FixtureConfig::default();
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(w) = a.width {
        cfg.focal *= w as f64 / cfg.width as f64;
        cfg.width = w;
    }
    if let Some(h) = a.height {
        cfg.height = h;
    }
    if let Some(n) = a.train_views {
        cfg.n_train = n;
    }
    let fixture = generate_fixture(&cfg)?;
    write_fixture(&a.out, &fixture)?;
    let t = &fixture.truth;
    let mut table: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (name, v) in t.region_names.iter().zip(&t.region_vectors) {
        table.insert(name.clone(), v.clone());
    }
    for (i, v) in t.negatives.iter().enumerate() {
        table.insert(format!("negative_{i}"), v.clone());
    }
    for (name, v) in t.canonical_labels.iter().zip(&t.canonicals) {
        table.insert(name.clone(), v.clone());
    }
    let table_path = a.out.join("text_embeddings.json");
    fs::write(&table_path, serde_json::to_string_pretty(&table)?)?;
    let mut run = fixture_run_config();
    if let Some(s) = seed {
        run.train.rng_seed = s;
    }
    let config_path = a.out.join("config.toml");
    fs::write(&config_path, toml::to_string_pretty(&run)?)?;
    println!("wrote fixture to {}", a.out.display());
    Ok(())
}

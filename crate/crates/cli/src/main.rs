use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use layerscene::denoiser::BridgeServer;
use layerscene::imaging::{read_grid, read_png, read_png_mask, write_grid, write_png, Tonemap, TONEMAP};
use layerscene::metrics::{evaluate, EvalPair};
use layerscene::{
    apply_edit, load_checkpoint, save_checkpoint, BlendMode, DenoiserSpec, EditOp, Grid, Layout, Mask, Offset,
    Pipeline, PipelineConfig, SceneCheckpoint, SceneSpec,
};
use layerscene_service::ServiceConfig;

#[derive(Parser)]
#[command(name = "layerscene", version, about = "Layered scene diffusion: optimize, render, edit and evaluate scenes")]
struct Cli {
    #[command(flatten)]
    opts: PipelineOpts,
    #[command(subcommand)]
    command: Command,
}

/// Overrides applied on top of the pipeline config file.
#[derive(Args)]
struct PipelineOpts {
    /// Pipeline config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Scene seed; overrides the seed in the scene spec.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Diffusion steps T.
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Trailing plain diffusion steps.
    #[arg(long, global = true)]
    tau: Option<usize>,
    /// Layouts sampled per joint step.
    #[arg(long, global = true)]
    views: Option<usize>,
    /// Classifier-free guidance scale.
    #[arg(long, global = true)]
    guidance: Option<f64>,
    /// Alpha blending: binary or soft.
    #[arg(long, global = true)]
    blend: Option<BlendMode>,
    /// Denoiser kind, or a JSON/TOML file holding a full denoiser spec.
    #[arg(long, global = true)]
    denoiser: Option<String>,
    /// Scene store directory for the service.
    #[arg(long, global = true)]
    store: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize a scene spec (JSON) into a checkpoint.
    Optimize {
        spec: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        /// Run manifest with per-step timings; defaults to `<out>.manifest.json`.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Reference image (PNG or grid file) to anchor the scene to.
        #[arg(long)]
        anchor: Option<PathBuf>,
        /// Layout (JSON) the anchor image was taken at; defaults to the scene's own.
        #[arg(long, requires = "anchor")]
        anchor_layout: Option<PathBuf>,
        #[arg(long, default_value_t = layerscene::sampler::DEFAULT_ANCHOR_WEIGHT, requires = "anchor")]
        anchor_weight: f64,
    },
    /// Render a checkpoint at a layout to a PNG or grid file.
    Render {
        checkpoint: PathBuf,
        /// Layout (JSON); defaults to the scene's current layout.
        #[arg(long)]
        layout: Option<PathBuf>,
        /// Output path; `.grid` writes raw floats, anything else PNG.
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Render a checkpoint at every layout of a grid.
    Sweep {
        checkpoint: PathBuf,
        /// Layout grid (JSON): `{"layouts": [...]}` or `{"layer": k, "dx": [...], "dy": [...]}`.
        layouts: PathBuf,
        #[arg(short, long)]
        out_dir: PathBuf,
        /// Also write raw grid files next to the PNGs.
        #[arg(long)]
        grids: bool,
    },
    /// Score image/mask pairs listed in a JSON file.
    Eval {
        pairs: PathBuf,
        /// Report path; printed to stdout when absent.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Apply an edit script (JSON array or JSON lines of edit ops) to a checkpoint.
    Edit {
        checkpoint: PathBuf,
        script: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Run the scene service.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: String,
        /// Optimization jobs allowed at once.
        #[arg(long, default_value_t = 2)]
        workers: usize,
    },
    /// Host the configured denoiser over the bridge protocol.
    Bridge {
        #[arg(long, default_value = "127.0.0.1:7070")]
        listen: String,
    },
}

impl PipelineOpts {
    fn config(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(path) => PipelineConfig::load(path).with_context(|| format!("reading config {}", path.display()))?,
            None => PipelineConfig::default(),
        };
        if let Some(v) = self.steps {
            cfg.schedule.steps = v;
        }
        if let Some(v) = self.tau {
            cfg.sampler.tau = v;
        }
        if let Some(v) = self.views {
            cfg.sampler.views = v;
        }
        if let Some(v) = self.guidance {
            cfg.sampler.guidance = v;
        }
        if let Some(v) = self.blend {
            cfg.sampler.blend = v;
        }
        if let Some(d) = &self.denoiser {
            cfg.denoiser = denoiser_spec(d, cfg.denoiser)?;
        }
        Ok(cfg)
    }

    fn pipeline(&self) -> Result<Pipeline> {
        Ok(Pipeline::from_config(self.config()?)?)
    }
}

fn denoiser_spec(arg: &str, current: DenoiserSpec) -> Result<DenoiserSpec> {
    let path = Path::new(arg);
    let is_file = matches!(path.extension().and_then(|e| e.to_str()), Some("json" | "toml"));
    if !is_file {
        return Ok(DenoiserSpec {
            kind: arg.to_string(),
            ..current
        });
    }
    let text = std::fs::read_to_string(path).with_context(|| format!("reading denoiser spec {arg}"))?;
    Ok(if arg.ends_with(".toml") {
        toml::from_str(&text).with_context(|| format!("parsing {arg}"))?
    } else {
        serde_json::from_str(&text).with_context(|| format!("parsing {arg}"))?
    })
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn is_grid_file(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "grid")
}

fn read_image(path: &Path) -> Result<Grid> {
    let g = if is_grid_file(path) { read_grid(path) } else { read_png(path) };
    g.with_context(|| format!("reading image {}", path.display()))
}

fn read_mask(path: &Path) -> Result<Mask> {
    let m = if is_grid_file(path) {
        read_grid(path).and_then(Mask::from_plane)
    } else {
        read_png_mask(path)
    };
    m.with_context(|| format!("reading mask {}", path.display()))
}

fn write_image(grid: &Grid, path: &Path) -> Result<()> {
    let r = if is_grid_file(path) { write_grid(grid, path) } else { write_png(grid, path) };
    r.with_context(|| format!("writing {}", path.display()))
}

fn load(path: &Path) -> Result<SceneCheckpoint> {
    load_checkpoint(path).with_context(|| format!("reading checkpoint {}", path.display()))
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

#[derive(Serialize)]
struct StepTiming {
    t: usize,
    elapsed_ms: f64,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    checkpoint: &'a Path,
    seed: u64,
    config: &'a PipelineConfig,
    anchor: Option<&'a Path>,
    steps: Vec<StepTiming>,
    total_ms: f64,
}

fn optimize(
    opts: &PipelineOpts,
    spec_path: &Path,
    out: &Path,
    manifest: Option<&Path>,
    anchor: Option<(&Path, Option<&Path>, f64)>,
) -> Result<()> {
    let p = opts.pipeline()?;
    let mut spec: SceneSpec = read_json(spec_path)?;
    if let Some(seed) = opts.seed {
        spec.seed = seed;
    }
    p.check_canvas(&spec)?;
    let anchor_path = anchor.map(|a| a.0);
    let anchor = match anchor {
        Some((image, layout, weight)) => {
            let layout = match layout {
                Some(path) => read_json(path)?,
                None => Layout::new(spec.layers.iter().map(|l| l.offset).collect()),
            };
            Some(p.anchor(&read_image(image)?, layout, weight, spec.seed)?)
        }
        None => None,
    };
    let started = Instant::now();
    let mut steps = Vec::new();
    let cp = p.optimize_with(&spec, anchor.as_ref(), &mut |t, d| {
        steps.push(StepTiming { t, elapsed_ms: ms(d) })
    })?;
    let total_ms = ms(started.elapsed());
    save_checkpoint(&cp, out).with_context(|| format!("writing {}", out.display()))?;
    let manifest_path = manifest.map(Path::to_path_buf).unwrap_or_else(|| out.with_extension("manifest.json"));
    write_json(
        &manifest_path,
        &RunManifest {
            checkpoint: out,
            seed: spec.seed,
            config: &p.config,
            anchor: anchor_path,
            steps,
            total_ms,
        },
    )?;
    eprintln!("wrote {} ({total_ms:.0} ms)", out.display());
    Ok(())
}

fn render(opts: &PipelineOpts, checkpoint: &Path, layout: Option<&Path>, out: &Path) -> Result<()> {
    let p = opts.pipeline()?;
    let cp = load(checkpoint)?;
    let layout = match layout {
        Some(path) => read_json(path)?,
        None => cp.scene.current_layout(),
    };
    write_image(&p.render(&cp, &layout)?, out)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum LayoutGrid {
    List { layouts: Vec<Layout> },
    Lattice { layer: usize, dx: Vec<i32>, dy: Vec<i32> },
}

impl LayoutGrid {
    fn expand(self, cp: &SceneCheckpoint) -> Result<Vec<Layout>> {
        match self {
            LayoutGrid::List { layouts } => Ok(layouts),
            LayoutGrid::Lattice { layer, dx, dy } => {
                if layer >= cp.scene.len() {
                    bail!("layout grid moves layer {layer}, scene has {}", cp.scene.len());
                }
                let base = cp.scene.current_layout();
                Ok(dy
                    .iter()
                    .flat_map(|&y| dx.iter().map(move |&x| (x, y)))
                    .map(|(x, y)| {
                        let mut l = base.clone();
                        l.offsets[layer] = Offset::new(x, y);
                        l
                    })
                    .collect())
            }
        }
    }
}

#[derive(Serialize)]
struct SweepEntry {
    image: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    grid: Option<String>,
    layout: Layout,
    elapsed_ms: f64,
}

#[derive(Serialize)]
struct SweepManifest<'a> {
    checkpoint: &'a Path,
    tonemap: Tonemap,
    images: Vec<SweepEntry>,
}

fn sweep(opts: &PipelineOpts, checkpoint: &Path, layouts: &Path, out_dir: &Path, grids: bool) -> Result<()> {
    let p = opts.pipeline()?;
    let cp = load(checkpoint)?;
    let layouts = read_json::<LayoutGrid>(layouts)?.expand(&cp)?;
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let mut images = Vec::with_capacity(layouts.len());
    for (i, layout) in layouts.into_iter().enumerate() {
        let started = Instant::now();
        let grid = p.render(&cp, &layout).with_context(|| format!("layout {i}"))?;
        let elapsed_ms = ms(started.elapsed());
        let image = format!("view_{i:03}.png");
        write_image(&grid, &out_dir.join(&image))?;
        let grid_file = grids.then(|| format!("view_{i:03}.grid"));
        if let Some(name) = &grid_file {
            write_image(&grid, &out_dir.join(name))?;
        }
        images.push(SweepEntry {
            image,
            grid: grid_file,
            layout,
            elapsed_ms,
        });
    }
    let n = images.len();
    write_json(
        &out_dir.join("manifest.json"),
        &SweepManifest {
            checkpoint,
            tonemap: TONEMAP,
            images,
        },
    )?;
    eprintln!("wrote {n} views to {}", out_dir.display());
    Ok(())
}

/// One entry of an eval pairs file; paths are relative to the file.
#[derive(Deserialize)]
struct PairFiles {
    name: String,
    image_a: PathBuf,
    mask_a: PathBuf,
    image_b: PathBuf,
    mask_b: PathBuf,
    #[serde(default)]
    delta: Option<Offset>,
    #[serde(default)]
    target: Option<PathBuf>,
    #[serde(default)]
    data_range: Option<f64>,
}

fn eval(pairs: &Path, out: Option<&Path>) -> Result<()> {
    let root = pairs.parent().unwrap_or(Path::new("."));
    let files: Vec<PairFiles> = read_json(pairs)?;
    let loaded = files
        .into_iter()
        .map(|f| {
            Ok(EvalPair {
                image_a: read_image(&root.join(&f.image_a))?,
                mask_a: read_mask(&root.join(&f.mask_a))?,
                image_b: read_image(&root.join(&f.image_b))?,
                mask_b: read_mask(&root.join(&f.mask_b))?,
                delta: f.delta,
                target: f.target.map(|t| read_mask(&root.join(t))).transpose()?,
                data_range: f.data_range.unwrap_or(TONEMAP.high - TONEMAP.low),
                name: f.name,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = evaluate(&loaded)?;
    match out {
        Some(path) => write_json(path, &report)?,
        None => println!("{}", report.to_json()),
    }
    Ok(())
}

fn read_script(path: &Path) -> Result<Vec<EditOp>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if text.trim_start().starts_with('[') {
        return serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()));
    }
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1)))
        .collect()
}

fn edit(checkpoint: &Path, script: &Path, out: &Path) -> Result<()> {
    let mut cp = load(checkpoint)?;
    for (i, op) in read_script(script)?.iter().enumerate() {
        cp.scene = apply_edit(&cp.scene, op).with_context(|| format!("edit {i}"))?;
    }
    save_checkpoint(&cp, out).with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}

fn serve(opts: &PipelineOpts, bind: String, workers: usize) -> Result<()> {
    let config = ServiceConfig {
        bind,
        store_dir: opts.store.clone().unwrap_or_else(|| PathBuf::from("scenes")),
        workers,
        pipeline: opts.config()?,
    };
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(layerscene_service::serve(config))?;
    Ok(())
}

fn bridge(opts: &PipelineOpts, listen: &str) -> Result<()> {
    let p = opts.pipeline()?;
    let server = BridgeServer::spawn(listen, Arc::clone(&p.denoiser), p.schedule.clone())?;
    eprintln!("bridge serving {} on {}", p.denoiser.name(), server.local_addr());
    loop {
        std::thread::park();
    }
}

fn run(cli: Cli) -> Result<()> {
    let opts = &cli.opts;
    match cli.command {
        Command::Optimize {
            spec,
            out,
            manifest,
            anchor,
            anchor_layout,
            anchor_weight,
        } => optimize(
            opts,
            &spec,
            &out,
            manifest.as_deref(),
            anchor.as_deref().map(|a| (a, anchor_layout.as_deref(), anchor_weight)),
        ),
        Command::Render { checkpoint, layout, out } => render(opts, &checkpoint, layout.as_deref(), &out),
        Command::Sweep {
            checkpoint,
            layouts,
            out_dir,
            grids,
        } => sweep(opts, &checkpoint, &layouts, &out_dir, grids),
        Command::Eval { pairs, out } => eval(&pairs, out.as_deref()),
        Command::Edit { checkpoint, script, out } => edit(&checkpoint, &script, &out),
        Command::Serve { bind, workers } => serve(opts, bind, workers),
        Command::Bridge { listen } => bridge(opts, &listen),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use mmtrack::attention::{attention_matrix_sum_x, self_attention_forward, AttentionParams, Matrix};
use mmtrack::augmentation::{augment_stack, AugConfig};
use mmtrack::bench::{run_bench, BenchConfig};
use mmtrack::geometry::{Grid, ImageShape, Lineage};
use mmtrack::metrics::{evaluate, Annotated, EvalConfig, EvalReport};
use mmtrack::segmenter::{segment_stack, WatershedConfig};
use mmtrack::simulator::{simulate, SimConfig};
use mmtrack::tensor_io::{
    self, byte_stack_to_tensor, image_stack_to_tensor, label_stack_to_tensor, read_tensor, real_stack_to_tensor,
    render_labels, render_real, tensor_to_byte_stack, tensor_to_image_stack, tensor_to_label_stack,
    tensor_to_real_stack, write_atomic, write_pgm, write_tensor, PgmImage, Tensor, TensorData,
};
use mmtrack::tracker::{links_csv, run_pipeline, track_stack, PipelineConfig};
use mmtrack::truth_maps::{corrupt_maps, truth_maps};
use mmtrack::{Error, Result};

const LABELS: &str = "labels.mmt";
const INTENSITY: &str = "intensity.mmt";
const LINEAGE: &str = "lineage.json";
const EDM: &str = "edm.mmt";
const DISPLACEMENT: &str = "displacement.mmt";
const CATEGORIES: &str = "categories.mmt";
const LINKS: &str = "links.csv";
const PIPELINE: &str = "pipeline.json";
const MANIFEST: &str = "manifest.json";

#[derive(Parser)]
#[command(name = "mmtrack", version, about = "Segmentation and tracking of bacteria in mother-machine time-lapse stacks")]
struct Cli {
    /// Worker threads, 0 = all cores (bench defaults to its config, 1 thread)
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic sequence with ground-truth lineage
    Simulate(Simulate),
    /// Distance, displacement and category maps from labels + lineage
    Maps(Maps),
    /// Watershed segmentation of distance maps
    Segment(Segment),
    /// Link segmented frames using displacement (and category) maps
    Track(Track),
    /// Segment and track from maps in one go
    Pipeline(Pipeline),
    /// Compare a predicted lineage with the ground truth
    Evaluate(Evaluate),
    /// Illumination, geometric and swim augmentation of a sequence
    Augment(Augment),
    /// Self-attention weights on a feature map, raw and summed over X
    AttnDemo(AttnDemo),
    /// Write frames of a tensor stack as PGM images
    Render(Render),
    /// Time the post-processing stages
    Bench(Bench),
}

#[derive(Args)]
struct Common {
    /// JSON configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Random seed (overrides the configuration)
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Simulate {
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Maps {
    #[command(flatten)]
    common: Common,
    /// Directory with labels.mmt and lineage.json
    #[arg(long)]
    input: PathBuf,
    /// Gaussian noise added to the distance and displacement maps
    #[arg(long, default_value_t = 0.0)]
    noise_sigma: f64,
}

#[derive(Args)]
struct Segment {
    #[command(flatten)]
    common: Common,
    /// Directory with edm.mmt
    #[arg(long)]
    input: PathBuf,
}

#[derive(Args)]
struct Track {
    #[command(flatten)]
    common: Common,
    /// Directory with labels.mmt, displacement.mmt and optionally categories.mmt
    #[arg(long)]
    input: PathBuf,
    /// Ignore categories.mmt even when present
    #[arg(long)]
    no_categories: bool,
}

#[derive(Args)]
struct Pipeline {
    #[command(flatten)]
    common: Common,
    /// Directory with edm.mmt, displacement.mmt and optionally categories.mmt
    #[arg(long)]
    input: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Table,
}

#[derive(Args)]
struct Evaluate {
    #[command(flatten)]
    common: Common,
    /// Ground-truth directory (labels.mmt, lineage.json)
    #[arg(long)]
    gt: PathBuf,
    /// Prediction directory (labels.mmt, lineage.json)
    #[arg(long)]
    pred: PathBuf,
    #[arg(long, value_enum, default_value = "table")]
    format: Format,
}

#[derive(Args)]
struct Augment {
    #[command(flatten)]
    common: Common,
    /// Directory with intensity.mmt, labels.mmt and lineage.json
    #[arg(long)]
    input: PathBuf,
}

#[derive(Args)]
struct AttnDemo {
    #[command(flatten)]
    common: Common,
    /// Feature tensor [S_y, S_x, d_in]; random when absent
    #[arg(long)]
    input: Option<PathBuf>,
    /// Directory with saved attention parameters; random when absent
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    sy: usize,
    #[arg(long, default_value_t = 2)]
    sx: usize,
    #[arg(long, default_value_t = 8)]
    d_in: usize,
    #[arg(long, default_value_t = 8)]
    d_k: usize,
    #[arg(long, default_value_t = 8)]
    d_out: usize,
    /// Add a random positional embedding
    #[arg(long)]
    embedding: bool,
}

#[derive(Args)]
struct Render {
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Tensor file (labels, maps or intensity)
    #[arg(long)]
    input: PathBuf,
    /// Frame to render; all frames when absent
    #[arg(long)]
    frame: Option<usize>,
}

#[derive(Args)]
struct Bench {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    repetitions: Option<usize>,
    #[arg(long, value_enum, default_value = "table")]
    format: Format,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config_hash: String,
    seed: Option<u64>,
    inputs: Vec<String>,
    outputs: Vec<String>,
    tool_version: &'a str,
    duration_seconds: f64,
}

struct Run {
    command: &'static str,
    out: PathBuf,
    config_hash: String,
    seed: Option<u64>,
    inputs: Vec<String>,
    outputs: Vec<String>,
    start: Instant,
}

impl Run {
    fn new(command: &'static str, out: &Path, config: &impl Serialize, seed: Option<u64>) -> Result<Self> {
        std::fs::create_dir_all(out)?;
        let canonical = serde_json::to_string(config)?;
        let digest = Sha256::digest(canonical.as_bytes());
        let config_hash = digest.iter().map(|b| format!("{b:02x}")).collect();
        Ok(Self { command, out: out.to_path_buf(), config_hash, seed, inputs: Vec::new(), outputs: Vec::new(), start: Instant::now() })
    }

    fn input(&mut self, path: &Path) -> PathBuf {
        self.inputs.push(path.display().to_string());
        path.to_path_buf()
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.outputs.push(name.to_string());
        self.out.join(name)
    }

    fn tensor(&mut self, name: &str, t: &Tensor) -> Result<()> {
        let p = self.path(name);
        write_tensor(p, t)
    }

    fn text(&mut self, name: &str, s: &str) -> Result<()> {
        let p = self.path(name);
        write_atomic(&p, s.as_bytes())
    }

    fn json(&mut self, name: &str, v: &impl Serialize) -> Result<()> {
        self.text(name, &serde_json::to_string_pretty(v)?)
    }

    fn finish(self) -> Result<()> {
        let m = Manifest {
            command: self.command,
            config_hash: self.config_hash,
            seed: self.seed,
            inputs: self.inputs,
            outputs: self.outputs,
            tool_version: env!("CARGO_PKG_VERSION"),
            duration_seconds: self.start.elapsed().as_secs_f64(),
        };
        write_atomic(&self.out.join(MANIFEST), serde_json::to_string_pretty(&m)?.as_bytes())
    }
}

fn config<T: DeserializeOwned + Default>(path: &Option<PathBuf>) -> Result<T> {
    match path {
        Some(p) => tensor_io::load_json(p),
        None => Ok(T::default()),
    }
}

fn read_labels(run: &mut Run, dir: &Path) -> Result<(ImageShape, Vec<Grid<u32>>)> {
    tensor_to_label_stack(&read_tensor(run.input(&dir.join(LABELS)))?)
}

fn read_lineage(run: &mut Run, dir: &Path, shape: ImageShape) -> Result<Lineage> {
    let text = std::fs::read_to_string(run.input(&dir.join(LINEAGE)))?;
    let mut lineage = Lineage::from_json(&text)?;
    lineage.shape = shape;
    lineage.validate()?;
    Ok(lineage)
}

fn read_real(run: &mut Run, path: PathBuf) -> Result<(ImageShape, Vec<Grid<f64>>)> {
    tensor_to_real_stack(&read_tensor(run.input(&path))?)
}

fn read_categories(run: &mut Run, dir: &Path) -> Result<Option<Vec<Grid<u8>>>> {
    let p = dir.join(CATEGORIES);
    if !p.exists() {
        return Ok(None);
    }
    Ok(Some(tensor_to_byte_stack(&read_tensor(run.input(&p))?)?.1))
}

fn write_lineage_outputs(run: &mut Run, shape: ImageShape, labels: &[Grid<u32>], lineage: &Lineage) -> Result<()> {
    run.tensor(LABELS, &label_stack_to_tensor(shape, labels)?)?;
    run.text(LINEAGE, &lineage.to_json()?)
}

fn cmd_simulate(a: &Simulate) -> Result<()> {
    let mut cfg: SimConfig = config(&a.common.config)?;
    if let Some(s) = a.common.seed {
        cfg.seed = s;
    }
    let mut run = Run::new("simulate", &a.common.out, &cfg, Some(cfg.seed))?;
    let seq = simulate(&cfg)?;
    write_lineage_outputs(&mut run, seq.shape, &seq.labels, &seq.lineage)?;
    if let Some(img) = &seq.intensity {
        run.tensor(INTENSITY, &image_stack_to_tensor(seq.shape, img)?)?;
    }
    run.finish()
}

fn cmd_maps(a: &Maps) -> Result<()> {
    let seed = a.common.seed.unwrap_or(0);
    let mut run = Run::new("maps", &a.common.out, &(a.noise_sigma, seed), Some(seed))?;
    let (shape, labels) = read_labels(&mut run, &a.input)?;
    let lineage = read_lineage(&mut run, &a.input, shape)?;
    let maps = truth_maps(&labels, &lineage)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut edms, mut disps, mut cats) = (Vec::new(), Vec::new(), Vec::new());
    for m in maps {
        let (e, d) = if a.noise_sigma > 0.0 {
            corrupt_maps(&m.edm, &m.displacement, a.noise_sigma, &mut rng)?
        } else {
            (m.edm, m.displacement)
        };
        edms.push(e);
        disps.push(d);
        cats.push(m.categories);
    }
    run.tensor(EDM, &real_stack_to_tensor(shape, &edms)?)?;
    run.tensor(DISPLACEMENT, &real_stack_to_tensor(shape, &disps)?)?;
    run.tensor(CATEGORIES, &byte_stack_to_tensor(shape, &cats)?)?;
    run.finish()
}

fn cmd_segment(a: &Segment) -> Result<()> {
    let cfg: WatershedConfig = config(&a.common.config)?;
    cfg.validate()?;
    let mut run = Run::new("segment", &a.common.out, &cfg, None)?;
    let (shape, edms) = read_real(&mut run, a.input.join(EDM))?;
    let labels = segment_stack(&edms, &cfg)?;
    run.tensor(LABELS, &label_stack_to_tensor(shape, &labels)?)?;
    run.finish()
}

fn cmd_track(a: &Track) -> Result<()> {
    let mut run = Run::new("track", &a.common.out, &!a.no_categories, None)?;
    let (shape, labels) = read_labels(&mut run, &a.input)?;
    let (dshape, disps) = read_real(&mut run, a.input.join(DISPLACEMENT))?;
    shape.ensure_same(&dshape)?;
    let cats = if a.no_categories { None } else { read_categories(&mut run, &a.input)? };
    let (links, mut lineage) = track_stack(&labels, &disps, cats.as_deref())?;
    lineage.shape = shape;
    run.text(LINEAGE, &lineage.to_json()?)?;
    run.text(LINKS, &links_csv(&links))?;
    run.finish()
}

fn cmd_pipeline(a: &Pipeline) -> Result<()> {
    let cfg: PipelineConfig = config(&a.common.config)?;
    let mut run = Run::new("pipeline", &a.common.out, &cfg, None)?;
    let (shape, edms) = read_real(&mut run, a.input.join(EDM))?;
    let (dshape, disps) = read_real(&mut run, a.input.join(DISPLACEMENT))?;
    shape.ensure_same(&dshape)?;
    let cats = read_categories(&mut run, &a.input)?;
    let mut out = run_pipeline(&edms, &disps, cats.as_deref(), &cfg)?;
    out.lineage.shape = shape;
    write_lineage_outputs(&mut run, shape, &out.labels, &out.lineage)?;
    run.text(LINKS, &links_csv(&out.links))?;
    run.json(PIPELINE, &cfg)?;
    run.finish()
}

#[derive(Serialize)]
struct EvaluateOutput<'a> {
    #[serde(flatten)]
    report: &'a EvalReport,
    /// Segmentation settings of the prediction, when recorded.
    pipeline: Option<PipelineConfig>,
}

fn cmd_evaluate(a: &Evaluate) -> Result<()> {
    let cfg: EvalConfig = config(&a.common.config)?;
    let mut run = Run::new("evaluate", &a.common.out, &cfg, None)?;
    let (gshape, gl) = read_labels(&mut run, &a.gt)?;
    let glin = read_lineage(&mut run, &a.gt, gshape)?;
    let (pshape, pl) = read_labels(&mut run, &a.pred)?;
    gshape.ensure_same(&pshape)?;
    let plin = read_lineage(&mut run, &a.pred, pshape)?;
    let pipeline_path = a.pred.join(PIPELINE);
    let pipeline = if pipeline_path.exists() { Some(tensor_io::load_json(run.input(&pipeline_path))?) } else { None };
    let report = evaluate(Annotated { labels: &gl, lineage: &glin }, Annotated { labels: &pl, lineage: &plin }, &cfg)?;
    let output = EvaluateOutput { report: &report, pipeline };
    run.json("report.json", &output)?;
    run.text("errors.csv", &report.errors_csv())?;
    match a.format {
        Format::Json => println!("{}", serde_json::to_string_pretty(&output)?),
        Format::Table => {
            print!("{}", report.table());
            if let Some(p) = &output.pipeline {
                println!(
                    "foreground threshold {}, merge threshold {}",
                    p.watershed.foreground_threshold, p.watershed.merge_threshold
                );
            }
        }
    }
    run.finish()
}

fn cmd_augment(a: &Augment) -> Result<()> {
    let mut cfg: AugConfig = config(&a.common.config)?;
    if let Some(s) = a.common.seed {
        cfg.seed = s;
    }
    let mut run = Run::new("augment", &a.common.out, &cfg, Some(cfg.seed))?;
    let (shape, labels) = read_labels(&mut run, &a.input)?;
    let lineage = read_lineage(&mut run, &a.input, shape)?;
    let (ishape, images) = tensor_to_image_stack(&read_tensor(run.input(&a.input.join(INTENSITY)))?)?;
    shape.ensure_same(&ishape)?;
    let out = augment_stack(&images, &labels, &lineage, &cfg)?;
    write_lineage_outputs(&mut run, shape, &out.labels, &out.lineage)?;
    run.tensor(INTENSITY, &image_stack_to_tensor(shape, &out.images)?)?;
    run.json("draws.json", &out.draws)?;
    run.finish()
}

fn matrix_tensor(m: &Matrix) -> Result<Tensor> {
    Tensor::new(vec![m.rows(), m.cols()], TensorData::F32(m.data().iter().map(|&v| v as f32).collect()))
}

fn cmd_attn_demo(a: &AttnDemo) -> Result<()> {
    let seed = a.common.seed.unwrap_or(0);
    let settings = (a.sy, a.sx, a.d_in, a.d_k, a.d_out, a.embedding, seed);
    let mut run = Run::new("attn-demo", &a.common.out, &settings, Some(seed))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (sy, sx, features) = match &a.input {
        Some(p) => {
            let t = read_tensor(run.input(p))?;
            let TensorData::F32(v) = t.data else {
                return Err(Error::DimensionMismatch("features must be f32".into()));
            };
            if t.dims.len() != 3 {
                return Err(Error::DimensionMismatch("features must be [S_y, S_x, d_in]".into()));
            }
            let (sy, sx, d) = (t.dims[0], t.dims[1], t.dims[2]);
            (sy, sx, Matrix::from_vec(sy * sx, d, v.into_iter().map(f64::from).collect())?)
        }
        None => (a.sy, a.sx, Matrix::random(a.sy * a.sx, a.d_in, 1.0, &mut rng)),
    };
    let n = sy * sx;
    let params = match &a.params {
        Some(dir) => {
            run.input(dir);
            AttentionParams::load(dir)?
        }
        None => AttentionParams::random(n, features.cols(), a.d_k, a.d_out, a.embedding, &mut rng),
    };
    let out = self_attention_forward(&features, &params)?;
    let summed = attention_matrix_sum_x(&out.weights, sy, sx)?;
    run.tensor("weights.mmt", &matrix_tensor(&out.weights)?)?;
    run.tensor("summed_x.mmt", &matrix_tensor(&summed)?)?;
    run.tensor("output.mmt", &matrix_tensor(&out.output)?)?;
    if a.params.is_none() {
        let dir = run.path("params");
        params.save(&dir)?;
    }
    for r in 0..summed.rows() {
        let row: Vec<String> = summed.row(r).iter().map(|v| format!("{v:.3}")).collect();
        println!("{}", row.join(" "));
    }
    run.finish()
}

fn pgm_frames(t: &Tensor) -> Result<Vec<Grid<u8>>> {
    let t = if t.dims.len() == 2 {
        Tensor::new(vec![t.dims[0], t.dims[1], 1], t.data.clone())?
    } else {
        t.clone()
    };
    Ok(match &t.data {
        TensorData::U16(_) => tensor_to_label_stack(&t)?.1.iter().map(render_labels).collect(),
        TensorData::F32(_) => tensor_to_real_stack(&t)?.1.iter().map(render_real).collect(),
        TensorData::U8(_) => tensor_to_byte_stack(&t)?
            .1
            .iter()
            .map(|g| g.map(|&c| c.saturating_mul(85)))
            .collect(),
    })
}

fn cmd_render(a: &Render) -> Result<()> {
    let mut run = Run::new("render", &a.out, &a.frame, None)?;
    let frames = pgm_frames(&read_tensor(run.input(&a.input))?)?;
    let stem = a.input.file_stem().and_then(|s| s.to_str()).unwrap_or("frame").to_string();
    let selected: Vec<usize> = match a.frame {
        Some(f) if f >= frames.len() => {
            return Err(Error::DimensionMismatch(format!("frame {f} of a {}-frame stack", frames.len())))
        }
        Some(f) => vec![f],
        None => (0..frames.len()).collect(),
    };
    for f in selected {
        let p = run.path(&format!("{stem}_{f:04}.pgm"));
        write_pgm(p, &PgmImage::Gray8(frames[f].clone()))?;
    }
    run.finish()
}

fn cmd_bench(a: &Bench, threads: Option<usize>) -> Result<()> {
    let mut cfg: BenchConfig = config(&a.common.config)?;
    if let Some(s) = a.common.seed {
        cfg.seed = s;
    }
    if let Some(f) = a.frames {
        cfg.frames = f;
    }
    if let Some(r) = a.repetitions {
        cfg.repetitions = r;
    }
    if let Some(t) = threads {
        cfg.threads = t;
    }
    let mut run = Run::new("bench", &a.common.out, &cfg, Some(cfg.seed))?;
    let report = run_bench(&cfg)?;
    run.json("bench.json", &report)?;
    match a.format {
        Format::Json => println!("{}", serde_json::to_string_pretty(&report)?),
        Format::Table => print!("{}", report.table()),
    }
    run.finish()
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Maps(a) => cmd_maps(a),
        Command::Segment(a) => cmd_segment(a),
        Command::Track(a) => cmd_track(a),
        Command::Pipeline(a) => cmd_pipeline(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Augment(a) => cmd_augment(a),
        Command::AttnDemo(a) => cmd_attn_demo(a),
        Command::Render(a) => cmd_render(a),
        Command::Bench(a) => cmd_bench(a, cli.threads),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    // bench owns its thread pool
    if !matches!(cli.command, Command::Bench(_)) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads.unwrap_or(0)).build_global() {
            eprintln!("{}", serde_json::json!({ "error": "InvalidConfig", "message": e.to_string() }));
            return ExitCode::from(2);
        }
    }
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::from(if e.is_io() { 1 } else { 2 })
        }
    }
}

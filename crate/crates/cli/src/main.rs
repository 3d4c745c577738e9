//! `ablate-eval`: registration, respiratory differencing and AES scoring.
//!
//! Exit status: 0 on success, 2 on validation or i/o errors (including bad
//! command lines), 3 on numeric failures.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ablate_core::aes::{self, AesParams};
use ablate_core::deform::DeformConfig;
use ablate_core::differencing::{self, RenderConfig, SliceAxis};
use ablate_core::field::DisplacementField;
use ablate_core::lungseg::{self, LungSegConfig};
use ablate_core::metrics::{self, SsimParams};
use ablate_core::pipeline::{self, PhantomCaseConfig, PipelineConfig};
use ablate_core::rigid::{RigidRegConfig, RigidResult, RigidTransform};
use ablate_core::volume::{self, Interp, Mask, DEFAULT_WINDOW};
use ablate_core::warp::{self, CompositeTransform};
use ablate_core::{par, Error, ErrorClass, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

const THREADS_ENV: &str = "ABLATE_EVAL_THREADS";

#[derive(Parser)]
#[command(name = "ablate-eval", version, about = "Lung CT registration, respiratory differencing and ablation scoring")]
struct Cli {
    /// Worker thread cap (overrides ABLATE_EVAL_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic pre/post case with ground truth.
    Phantom(PhantomArgs),
    /// Threshold-and-morphology lung segmentation.
    SegmentLung(SegmentArgs),
    /// Rigid registration of a pre-op scan to a post-op scan.
    RegisterRigid(RigidArgs),
    /// Deformable registration after an optional rigid pose.
    RegisterDeform(DeformArgs),
    /// Apply a rigid pose and/or displacement field to a volume or mask.
    Warp(WarpArgs),
    /// Respiratory difference volume and HSV slice rendering.
    Diff(DiffArgs),
    /// Ablation effectiveness score of a registered tumor and treatment mask.
    Aes(AesArgs),
    /// NCC, SSIM, RMSE and Dice between two volumes.
    Metrics(MetricsArgs),
    /// Full pipeline from a JSON config.
    Pipeline(PipelineArgs),
}

fn parse_vec3(s: &str) -> std::result::Result<[f64; 3], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| format!("{t:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    v.try_into().map_err(|_| "expected three comma-separated numbers".to_string())
}

fn parse_window(s: &str) -> std::result::Result<(f64, f64), String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| format!("{t:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match v[..] {
        [lo, hi] => Ok((lo, hi)),
        _ => Err("expected LOW,HIGH".to_string()),
    }
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long)]
    out: PathBuf,
    /// JSON case config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Cubic grid size.
    #[arg(long)]
    dims: Option<usize>,
    /// Isotropic spacing, mm.
    #[arg(long)]
    spacing: Option<f64>,
    /// Peak respiratory displacement, mm (0 disables).
    #[arg(long)]
    peak: Option<f64>,
    #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true)]
    translate: Option<[f64; 3]>,
    #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true)]
    rotate_deg: Option<[f64; 3]>,
    #[arg(long)]
    ablation_radius: Option<f64>,
    #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true)]
    ablation_offset: Option<[f64; 3]>,
    #[arg(long)]
    no_ablation: bool,
}

#[derive(Args)]
struct SegmentArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, allow_hyphen_values = true)]
    air_threshold: Option<f64>,
    #[arg(long)]
    closing_radius: Option<f64>,
}

#[derive(Args)]
struct LungArgs {
    /// Lung mask of the moving scan; segmented when absent.
    #[arg(long)]
    moving_lung: Option<PathBuf>,
    /// Lung mask of the fixed scan; segmented when absent.
    #[arg(long)]
    fixed_lung: Option<PathBuf>,
    #[arg(long, value_parser = parse_window, allow_hyphen_values = true)]
    window: Option<(f64, f64)>,
}

#[derive(Args)]
struct RigidArgs {
    #[arg(long)]
    moving: PathBuf,
    #[arg(long)]
    fixed: PathBuf,
    #[command(flatten)]
    lungs: LungArgs,
    /// JSON rigid config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output JSON (registration result with the transform).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DeformArgs {
    #[arg(long)]
    moving: PathBuf,
    #[arg(long)]
    fixed: PathBuf,
    #[command(flatten)]
    lungs: LungArgs,
    /// Rigid result or transform JSON applied first.
    #[arg(long)]
    rigid: Option<PathBuf>,
    /// Mask on the moving grid excluded from the data term.
    #[arg(long)]
    exclude_moving: Option<PathBuf>,
    /// Mask on the fixed grid excluded from the data term.
    #[arg(long)]
    exclude_fixed: Option<PathBuf>,
    /// JSON deformable config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Field output stem; writes `<stem>.raw` and `<stem>.json`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct WarpArgs {
    #[arg(long)]
    input: PathBuf,
    /// Grid to warp onto (the fixed image).
    #[arg(long)]
    reference: PathBuf,
    #[arg(long)]
    rigid: Option<PathBuf>,
    #[arg(long)]
    field: Option<PathBuf>,
    /// Treat the input as a mask (nearest neighbor).
    #[arg(long)]
    mask: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    Axial,
    Coronal,
    Sagittal,
}

#[derive(Args)]
struct DiffArgs {
    #[arg(long)]
    post: PathBuf,
    /// Registered pre-op volume on the post-op grid.
    #[arg(long)]
    registered: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Directory for PNG slices; requires --tumor and --treatment.
    #[arg(long, requires_all = ["tumor", "treatment"])]
    render_dir: Option<PathBuf>,
    #[arg(long)]
    tumor: Option<PathBuf>,
    #[arg(long)]
    treatment: Option<PathBuf>,
    #[arg(long, default_value = "case")]
    case: String,
    #[arg(long, value_enum, default_value = "axial")]
    axis: AxisArg,
    #[arg(long, default_value_t = 400.0)]
    diff_window: f64,
}

#[derive(Args)]
struct AesArgs {
    /// Registered tumor mask (post-op frame).
    #[arg(long)]
    tumor: PathBuf,
    #[arg(long)]
    treatment: PathBuf,
    #[arg(long)]
    margin: Option<f64>,
    /// JSON AES parameters.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long, requires = "b_lung")]
    a_lung: Option<PathBuf>,
    #[arg(long, requires = "a_lung")]
    b_lung: Option<PathBuf>,
    /// Restrict NCC, SSIM and RMSE to this mask.
    #[arg(long)]
    region: Option<PathBuf>,
    #[arg(long)]
    dynamic_range: Option<f64>,
    /// Print a CSV row instead of JSON.
    #[arg(long)]
    csv: bool,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    config: PathBuf,
    /// Override the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format { path: path.into(), reason: e.to_string() })
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p).map_err(|e| Error::Io { path: p.into(), source: e })?;
    }
    let mut bytes = serde_json::to_vec_pretty(v)?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::Io { path: path.into(), source: e })
}

/// Write to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{text}").and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::Io { path: "<stdout>".into(), source: e }),
        _ => Ok(()),
    }
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    emit(&serde_json::to_string_pretty(v)?)
}

/// Accepts either a full rigid registration result or a bare transform.
fn load_rigid(path: &Path) -> Result<RigidTransform> {
    if let Ok(r) = read_json::<RigidResult>(path) {
        return Ok(r.transform);
    }
    read_json::<RigidTransform>(path)
}

fn cmd_phantom(a: PhantomArgs) -> Result<()> {
    let mut cfg: PhantomCaseConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => PhantomCaseConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.phantom.seed = s;
        cfg.field_seed = s;
    }
    if let Some(d) = a.dims {
        cfg.phantom.dims = [d; 3];
    }
    if let Some(s) = a.spacing {
        cfg.phantom.spacing = [s; 3];
    }
    if let Some(p) = a.peak {
        cfg.field_peak_mm = p;
    }
    if let Some(t) = a.translate {
        cfg.translation_mm = t;
    }
    if let Some(r) = a.rotate_deg {
        cfg.rotation_deg = r;
    }
    if a.no_ablation {
        cfg.ablation = None;
    } else if a.ablation_radius.is_some() || a.ablation_offset.is_some() {
        let mut s = cfg.ablation.unwrap_or_default();
        if let Some(r) = a.ablation_radius {
            s.zone_radius = r;
        }
        if let Some(o) = a.ablation_offset {
            s.offset = o;
        }
        cfg.ablation = Some(s);
    }
    let case = pipeline::make_case(&cfg)?;
    let m = pipeline::write_case(&case, &cfg, &a.out)?;
    print_json(&m)
}

fn cmd_segment(a: SegmentArgs) -> Result<()> {
    let mut cfg = LungSegConfig::default();
    if let Some(t) = a.air_threshold {
        cfg.air_threshold = t;
    }
    if let Some(r) = a.closing_radius {
        cfg.closing_radius = r;
    }
    cfg.validate()?;
    let v = volume::load_volume(&a.input)?;
    let m = lungseg::segment_lung(&v, &cfg)?;
    volume::save_mask(&m, &a.out)?;
    eprintln!("lung volume {:.1} ml", m.volume_mm3() / 1000.0);
    Ok(())
}

struct RegInputs {
    moving: volume::Volume,
    moving_lung: Mask,
    fixed: volume::Volume,
    fixed_lung: Mask,
    window: (f64, f64),
}

/// Load a moving/fixed pair the way the pipeline does: the fixed scan is the
/// reference grid and the moving scan and its masks are resampled onto it.
fn load_pair(moving: &Path, fixed: &Path, lungs: &LungArgs) -> Result<RegInputs> {
    let fixed = volume::load_volume(fixed)?;
    let g = *fixed.grid();
    let moving = pipeline::to_reference(&volume::load_volume(moving)?, &g);
    let seg = LungSegConfig::default();
    Ok(RegInputs {
        fixed_lung: pipeline::lung_mask(&fixed, lungs.fixed_lung.as_deref(), &seg)?,
        moving_lung: pipeline::lung_mask(&moving, lungs.moving_lung.as_deref(), &seg)?,
        moving,
        fixed,
        window: lungs.window.unwrap_or(DEFAULT_WINDOW),
    })
}

fn cmd_rigid(a: RigidArgs) -> Result<()> {
    let cfg: RigidRegConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => RigidRegConfig::default(),
    };
    cfg.validate()?;
    let p = load_pair(&a.moving, &a.fixed, &a.lungs)?;
    let r = pipeline::rigid_stage(&p.moving, &p.moving_lung, &p.fixed, &p.fixed_lung, p.window, &cfg)?;
    write_json(&a.out, &r)?;
    let deg = r.euler_angles.map(f64::to_degrees);
    eprintln!(
        "ncc {:.6} -> {:.6}, translation {:?} mm, angles {:?} deg",
        r.initial_ncc, r.final_ncc, r.transform.translation, deg
    );
    Ok(())
}

fn cmd_deform(a: DeformArgs) -> Result<()> {
    let mut cfg: DeformConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => DeformConfig::default(),
    };
    if let Some(al) = a.alpha {
        cfg.alpha = al;
    }
    cfg.validate()?;
    let p = load_pair(&a.moving, &a.fixed, &a.lungs)?;
    let g = *p.fixed.grid();
    let rigid_t = match &a.rigid {
        Some(path) => load_rigid(path)?,
        None => RigidTransform::identity(g.center()),
    };
    let em = a.exclude_moving.as_ref().map(|m| lungseg::ingest_mask(m, &g)).transpose()?;
    let ef = a.exclude_fixed.as_ref().map(|m| lungseg::ingest_mask(m, &g)).transpose()?;
    let r = pipeline::deform_stage(
        &p.moving,
        &p.moving_lung,
        &p.fixed,
        &p.fixed_lung,
        &rigid_t,
        em.as_ref(),
        ef.as_ref(),
        p.window,
        &cfg,
    )?;
    r.field.save(&a.out)?;
    if let Some(rp) = &a.report {
        write_json(rp, &r.report)?;
    }
    eprintln!("mean |u| {:.3} mm, max {:.3} mm", r.field.mean_magnitude(None)?, r.field.max_magnitude());
    Ok(())
}

fn cmd_warp(a: WarpArgs) -> Result<()> {
    let reference = volume::load_volume(&a.reference)?;
    let g = *reference.grid();
    let rigid_t = match &a.rigid {
        Some(p) => load_rigid(p)?,
        None => RigidTransform::identity(g.center()),
    };
    let field = match &a.field {
        Some(p) => DisplacementField::load(p)?,
        None => DisplacementField::zeros(g),
    };
    g.ensure_matches(field.grid(), "field and reference")?;
    let t = CompositeTransform::new(rigid_t, field)?;
    if a.mask {
        let m = lungseg::ingest_mask(&a.input, &g)?;
        volume::save_mask(&warp::warp_mask(&m, &t), &a.out)
    } else {
        let v = pipeline::to_reference(&volume::load_volume(&a.input)?, &g);
        volume::save_volume(&warp::apply_composite(&v, &t, Interp::Trilinear), &a.out)
    }
}

fn cmd_diff(a: DiffArgs) -> Result<()> {
    let post = volume::load_volume(&a.post)?;
    let reg = volume::load_volume(&a.registered)?;
    let d = differencing::difference(&post, &reg)?;
    volume::save_volume(&d, &a.out)?;
    if let (Some(dir), Some(t), Some(b)) = (&a.render_dir, &a.tumor, &a.treatment) {
        let g = *post.grid();
        let tumor = lungseg::ingest_mask(t, &g)?;
        let treat = lungseg::ingest_mask(b, &g)?;
        let cfg = RenderConfig {
            slice_axis: match a.axis {
                AxisArg::Axial => SliceAxis::Axial,
                AxisArg::Coronal => SliceAxis::Coronal,
                AxisArg::Sagittal => SliceAxis::Sagittal,
            },
            diff_window: a.diff_window,
            ..Default::default()
        };
        let slices = differencing::render_slices(&d, &post, &tumor, &treat, &cfg)?;
        let idx = differencing::write_slices(&slices, dir, &a.case, &cfg)?;
        print_json(&idx)?;
    }
    Ok(())
}

fn cmd_aes(a: AesArgs) -> Result<()> {
    let mut params: AesParams = match &a.params {
        Some(p) => read_json(p)?,
        None => AesParams::default(),
    };
    if let Some(m) = a.margin {
        params.margin_mm = m;
    }
    params.validate()?;
    let treat = volume::load_mask(&a.treatment)?;
    let tumor = lungseg::ingest_mask(&a.tumor, treat.grid())?;
    let mut r = aes::evaluate_case(&tumor, &treat, &params)?;
    r.inputs.insert("tumor".into(), pipeline::input_ref(&a.tumor)?);
    r.inputs.insert("treatment".into(), pipeline::input_ref(&a.treatment)?);
    if let Some(o) = &a.out {
        write_json(o, &r)?;
    }
    print_json(&r)
}

fn cmd_metrics(a: MetricsArgs) -> Result<()> {
    let va = volume::load_volume(&a.a)?;
    let vb = volume::load_volume(&a.b)?;
    let g = *vb.grid();
    let masks = match (&a.a_lung, &a.b_lung) {
        (Some(x), Some(y)) => Some((lungseg::ingest_mask(x, &g)?, lungseg::ingest_mask(y, &g)?)),
        _ => None,
    };
    let region = a.region.as_ref().map(|r| lungseg::ingest_mask(r, &g)).transpose()?;
    let params = SsimParams { dynamic_range: a.dynamic_range, ..Default::default() };
    let report = metrics::metric_report(
        &va,
        &vb,
        masks.as_ref().map(|(x, y)| (x, y)),
        region.as_ref().map(|r| (r, "region")),
        &params,
    )?;
    if a.csv {
        emit(&format!("{}\n{}", metrics::MetricReport::CSV_HEADER, report.csv_row("metrics")))
    } else {
        print_json(&report)
    }
}

fn cmd_pipeline(a: PipelineArgs, threads: Option<usize>) -> Result<()> {
    let mut cfg = PipelineConfig::load(&a.config)?;
    if let Some(o) = a.out {
        cfg.output_dir = o;
    }
    if threads.is_some() {
        cfg.threads = threads;
    }
    let out = pipeline::run_pipeline(&cfg)?;
    eprintln!("artifacts in {}", cfg.output_dir.display());
    print_json(&out.aes)
}

fn threads_from_env() -> std::result::Result<Option<usize>, String> {
    match std::env::var(THREADS_ENV) {
        Ok(s) if !s.trim().is_empty() => match s.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(format!("{THREADS_ENV} must be a positive integer, got {s:?}")),
        },
        _ => Ok(None),
    }
}

fn run(cli: Cli) -> Result<()> {
    let threads = match cli.threads {
        Some(0) => return Err(Error::InvalidParameter("--threads must be >= 1".into())),
        Some(n) => Some(n),
        None => threads_from_env().map_err(Error::InvalidParameter)?,
    };
    par::with_threads(threads, || match cli.command {
        Command::Phantom(a) => cmd_phantom(a),
        Command::SegmentLung(a) => cmd_segment(a),
        Command::RegisterRigid(a) => cmd_rigid(a),
        Command::RegisterDeform(a) => cmd_deform(a),
        Command::Warp(a) => cmd_warp(a),
        Command::Diff(a) => cmd_diff(a),
        Command::Aes(a) => cmd_aes(a),
        Command::Metrics(a) => cmd_metrics(a),
        Command::Pipeline(a) => cmd_pipeline(a, threads),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            match e.class() {
                ErrorClass::Numeric => ExitCode::from(3),
                ErrorClass::Validation | ErrorClass::Io => ExitCode::from(2),
            }
        }
    }
}

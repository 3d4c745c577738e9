//! End-to-end evaluation: preprocess, lung masks, rigid then deformable
//! registration, warping, differencing, rendering, AES and metrics.
//!
//! Every stage is a public function so single-stage front ends produce the
//! same bytes as [`run_pipeline`].

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aes::{self, AesParams, AesReport, HuRegionStats, InputRef};
use crate::deform::{self, DeformConfig, DeformReport};
use crate::differencing::{self, RenderConfig, RenderIndex};
use crate::error::{Error, Result};
use crate::field::DisplacementField;
use crate::lungseg::{self, LungSegConfig, DEFAULT_OUTSIDE_HU};
use crate::metrics::{self, MetricReport, MetricSet, SsimParams};
use crate::phantom::{self, PhantomConfig, SyntheticField};
use crate::rigid::{self, RigidRegConfig, RigidResult, RigidTransform};
use crate::volume::{self, Boundary, GridMeta, Interp, Mask, Unit, Volume, DEFAULT_WINDOW};
use crate::warp::{self, CompositeTransform};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_bytes(&bytes))
}

pub fn input_ref(path: impl AsRef<Path>) -> Result<InputRef> {
    let path = path.as_ref();
    Ok(InputRef {
        path: path.display().to_string(),
        sha256: sha256_file(path)?,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub target_spacing: [f64; 3],
    /// Centered crop/pad target; `None` keeps the resampled extent.
    pub dims: Option<[usize; 3]>,
    /// HU window for intensity normalization.
    pub window: (f64, f64),
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            target_spacing: [1.25; 3],
            dims: Some([256; 3]),
            window: DEFAULT_WINDOW,
        }
    }
}

/// Resample the postoperative scan to the working spacing and crop/pad it.
/// The result defines the reference grid for everything else.
pub fn preprocess_reference(post: &Volume, cfg: &PreprocessConfig) -> Result<Volume> {
    let r = volume::resample(post, cfg.target_spacing, Interp::Trilinear)?;
    match cfg.dims {
        Some(d) => volume::crop_or_pad(&r, d, DEFAULT_OUTSIDE_HU),
        None => Ok(r),
    }
}

/// Bring a volume onto the reference grid; outside samples read as air.
pub fn to_reference(vol: &Volume, grid: &GridMeta) -> Volume {
    volume::resample_to_grid(vol, grid, Interp::Trilinear, Boundary::Constant(DEFAULT_OUTSIDE_HU))
}

/// Lung-masked, windowed and normalized image used by both registrations.
pub fn registration_image(hu: &Volume, lung: &Mask, window: (f64, f64)) -> Result<Volume> {
    if hu.unit() != Unit::Hu {
        return Err(Error::UnitMismatch("registration images are built from HU volumes".into()));
    }
    volume::normalize(&lungseg::apply_lung_mask(hu, lung, window.0 as f32)?, Some(window))
}

/// Ingest a lung mask if given, otherwise segment one from the HU volume.
pub fn lung_mask(hu: &Volume, path: Option<&Path>, cfg: &LungSegConfig) -> Result<Mask> {
    match path {
        Some(p) => lungseg::ingest_mask(p, hu.grid()),
        None => lungseg::segment_lung(hu, cfg),
    }
}

/// Rigid stage: `moving` is the pre-op HU volume on the reference grid.
pub fn rigid_stage(
    moving_hu: &Volume,
    moving_lung: &Mask,
    fixed_hu: &Volume,
    fixed_lung: &Mask,
    window: (f64, f64),
    cfg: &RigidRegConfig,
) -> Result<RigidResult> {
    let m = registration_image(moving_hu, moving_lung, window)?;
    let f = registration_image(fixed_hu, fixed_lung, window)?;
    let region = moving_lung.union(fixed_lung)?;
    rigid::register_rigid(&m, &f, Some(&region), cfg)
}

/// Deformable stage on top of a rigid pose. The tumor (moving) and the
/// treatment zone (fixed) are excluded from the data term.
#[allow(clippy::too_many_arguments)]
pub fn deform_stage(
    moving_hu: &Volume,
    moving_lung: &Mask,
    fixed_hu: &Volume,
    fixed_lung: &Mask,
    rigid_t: &RigidTransform,
    exclude_moving: Option<&Mask>,
    exclude_fixed: Option<&Mask>,
    window: (f64, f64),
    cfg: &DeformConfig,
) -> Result<deform::DeformResult> {
    let m = registration_image(moving_hu, moving_lung, window)?;
    let m = rigid::apply_rigid(&m, rigid_t, Interp::Trilinear);
    let f = registration_image(fixed_hu, fixed_lung, window)?;
    let em = exclude_moving.map(|x| rigid::apply_rigid_mask(x, rigid_t));
    deform::register_deformable(&m, &f, em.as_ref(), exclude_fixed, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub stage: String,
    pub metrics: MetricSet,
}

/// Whole-volume and in-lung metrics of a registered pre-op HU image against
/// the post-op one. `lungs` are (registered pre lung, post lung).
pub fn stage_metrics(
    stage: &str,
    registered: &Volume,
    post: &Volume,
    lungs: (&Mask, &Mask),
    ssim: &SsimParams,
) -> Result<StageMetrics> {
    let whole = metrics::metric_report(registered, post, Some(lungs), None, ssim)?;
    let lung = metrics::metric_report(registered, post, Some(lungs), Some((lungs.1, "lung")), ssim)?;
    Ok(StageMetrics {
        stage: stage.to_string(),
        metrics: MetricSet { whole, lung: Some(lung) },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub pre: PathBuf,
    pub post: PathBuf,
    pub pre_lung: Option<PathBuf>,
    pub post_lung: Option<PathBuf>,
    /// Pre-op tumor mask.
    pub tumor: Option<PathBuf>,
    /// Post-op treatment (ablation zone) mask.
    pub treatment: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub case: String,
    pub preprocess: PreprocessConfig,
    pub lungseg: LungSegConfig,
    pub rigid: RigidRegConfig,
    pub deform: DeformConfig,
    /// Skip the deformable stage (rigid-only runs).
    pub skip_deform: bool,
    pub aes: AesParams,
    pub render: RenderConfig,
    pub ssim: SsimParams,
    pub hu_threshold: f64,
    pub threads: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            pre: PathBuf::new(),
            post: PathBuf::new(),
            pre_lung: None,
            post_lung: None,
            tumor: None,
            treatment: None,
            output_dir: PathBuf::from("out"),
            case: "case".into(),
            preprocess: PreprocessConfig::default(),
            lungseg: LungSegConfig::default(),
            rigid: RigidRegConfig::default(),
            deform: DeformConfig::default(),
            skip_deform: false,
            aes: AesParams::default(),
            render: RenderConfig::default(),
            ssim: SsimParams::default(),
            hu_threshold: -600.0,
            threads: None,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: PipelineConfig = serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
        // relative paths resolve against the config file's directory
        let base = path.parent().unwrap_or(Path::new(""));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.pre);
        fix(&mut cfg.post);
        fix(&mut cfg.output_dir);
        for p in [&mut cfg.pre_lung, &mut cfg.post_lung, &mut cfg.tumor, &mut cfg.treatment].into_iter().flatten() {
            fix(p);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let need = |p: &Path, what: &str| {
            if p.as_os_str().is_empty() {
                Err(Error::InvalidParameter(format!("{what} path is required")))
            } else if !p.exists() {
                Err(Error::InvalidParameter(format!("{what} file {} does not exist", p.display())))
            } else {
                Ok(())
            }
        };
        need(&self.pre, "pre")?;
        need(&self.post, "post")?;
        let (Some(t), Some(b)) = (&self.tumor, &self.treatment) else {
            return Err(Error::InvalidParameter(
                "AES needs both a tumor mask and a treatment mask (b_empty otherwise)".into(),
            ));
        };
        need(t, "tumor")?;
        need(b, "treatment")?;
        for (p, w) in [(&self.pre_lung, "pre lung"), (&self.post_lung, "post lung")] {
            if let Some(p) = p {
                need(p, w)?;
            }
        }
        if self.case.is_empty() || self.case.contains(['/', '\\']) {
            return Err(Error::InvalidParameter("case name must be a plain file stem".into()));
        }
        self.aes.validate()?;
        self.rigid.validate()?;
        self.deform.validate()?;
        self.render.validate()?;
        self.lungseg.validate()
    }

    pub fn sha256(&self) -> Result<String> {
        Ok(sha256_bytes(&serde_json::to_vec(self)?))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config_sha256: String,
    pub config: PipelineConfig,
    pub inputs: BTreeMap<String, InputRef>,
    /// Output file name to sha256.
    pub outputs: BTreeMap<String, String>,
    pub timings_s: Vec<(String, f64)>,
    pub threads: usize,
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub rigid: RigidResult,
    pub deform: Option<DeformReport>,
    pub field: DisplacementField,
    pub aes: AesReport,
    pub hu_stats: Option<HuRegionStats>,
    pub metrics: Vec<StageMetrics>,
    pub render: RenderIndex,
    pub manifest: Manifest,
}

struct Outputs<'a> {
    dir: &'a Path,
    hashes: BTreeMap<String, String>,
}

impl Outputs<'_> {
    fn record(&mut self, name: &str) -> Result<()> {
        let h = sha256_file(self.dir.join(name))?;
        self.hashes.insert(name.to_string(), h);
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, v: &T) -> Result<()> {
        write_json(&self.dir.join(name), v)?;
        self.record(name)
    }

    fn volume(&mut self, name: &str, v: &Volume) -> Result<()> {
        volume::save_volume(v, self.dir.join(name))?;
        self.record(name)
    }

    fn mask(&mut self, name: &str, m: &Mask) -> Result<()> {
        volume::save_mask(m, self.dir.join(name))?;
        self.record(name)
    }
}

/// Run the whole chain, writing artifacts into `cfg.output_dir` as they are
/// produced. Errors carry the failing stage's name.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutcome> {
    cfg.validate()?;
    crate::par::with_threads(cfg.threads, || run_inner(cfg))
}

fn run_inner(cfg: &PipelineConfig) -> Result<PipelineOutcome> {
    let dir = cfg.output_dir.as_path();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Outputs { dir, hashes: BTreeMap::new() };
    let mut timings = Vec::new();
    let mut clock = Instant::now();
    let mut lap = |name: &str, timings: &mut Vec<(String, f64)>| {
        timings.push((name.to_string(), clock.elapsed().as_secs_f64()));
        clock = Instant::now();
    };

    let mut inputs = BTreeMap::new();
    for (name, p) in [
        ("pre", Some(&cfg.pre)),
        ("post", Some(&cfg.post)),
        ("pre_lung", cfg.pre_lung.as_ref()),
        ("post_lung", cfg.post_lung.as_ref()),
        ("tumor", cfg.tumor.as_ref()),
        ("treatment", cfg.treatment.as_ref()),
    ] {
        if let Some(p) = p {
            inputs.insert(name.to_string(), input_ref(p)?);
        }
    }

    let stage = |s: &'static str| move |e: Error| e.in_stage(s);
    let window = cfg.preprocess.window;

    let post_raw = volume::load_volume(&cfg.post).map_err(stage("load"))?;
    let pre_raw = volume::load_volume(&cfg.pre).map_err(stage("load"))?;
    if post_raw.unit() != Unit::Hu || pre_raw.unit() != Unit::Hu {
        return Err(Error::UnitMismatch("pre and post must be HU volumes".into()).in_stage("load"));
    }
    let post = preprocess_reference(&post_raw, &cfg.preprocess).map_err(stage("preprocess"))?;
    let g = *post.grid();
    let pre = to_reference(&pre_raw, &g);
    lap("preprocess", &mut timings);

    let post_lung = lung_mask(&post, cfg.post_lung.as_deref(), &cfg.lungseg).map_err(stage("lungseg"))?;
    let pre_lung = match &cfg.pre_lung {
        Some(p) => lungseg::ingest_mask(p, &g),
        None => lungseg::segment_lung(&pre, &cfg.lungseg),
    }
    .map_err(stage("lungseg"))?;
    let tumor_path = cfg.tumor.as_ref().expect("validated");
    let treat_path = cfg.treatment.as_ref().expect("validated");
    let tumor = lungseg::ingest_mask(tumor_path, &g).map_err(stage("mask ingest"))?;
    let treatment = lungseg::ingest_mask(treat_path, &g).map_err(stage("mask ingest"))?;
    out.mask("post_lung.nii.gz", &post_lung)?;
    out.mask("pre_lung.nii.gz", &pre_lung)?;
    lap("lungseg", &mut timings);

    let rigid_res =
        rigid_stage(&pre, &pre_lung, &post, &post_lung, window, &cfg.rigid).map_err(stage("rigid"))?;
    out.json("rigid.json", &rigid_res)?;
    lap("rigid", &mut timings);

    let (field, deform_report) = if cfg.skip_deform {
        (DisplacementField::zeros(g), None)
    } else {
        let r = deform_stage(
            &pre,
            &pre_lung,
            &post,
            &post_lung,
            &rigid_res.transform,
            Some(&tumor),
            Some(&treatment),
            window,
            &cfg.deform,
        )
        .map_err(stage("deformable"))?;
        (r.field, Some(r.report))
    };
    field.save(dir.join("field.raw"))?;
    out.record("field.raw")?;
    out.record("field.json")?;
    if let Some(r) = &deform_report {
        out.json("deform_report.json", r)?;
    }
    lap("deformable", &mut timings);

    let comp = CompositeTransform::new(rigid_res.transform, field.clone()).map_err(stage("warp"))?;
    let pre_reg = warp::apply_composite(&pre, &comp, Interp::Trilinear);
    let tumor_reg = warp::warp_mask(&tumor, &comp);
    let lung_reg = warp::warp_mask(&pre_lung, &comp);
    out.volume("pre_registered.nii.gz", &pre_reg)?;
    out.mask("tumor_registered.nii.gz", &tumor_reg)?;
    lap("warp", &mut timings);

    let diff = differencing::difference(&post, &pre_reg).map_err(stage("difference"))?;
    out.volume("diff.nii.gz", &diff)?;
    let slices = differencing::render_slices(&diff, &post, &tumor_reg, &treatment, &cfg.render)
        .map_err(stage("render"))?;
    let render_dir = dir.join("render");
    let render = differencing::write_slices(&slices, &render_dir, &cfg.case, &cfg.render).map_err(stage("render"))?;
    for s in &render.slices {
        out.record(&format!("render/{}", s.file))?;
    }
    out.record(&format!("render/{}_index.json", cfg.case))?;
    lap("difference", &mut timings);

    let mut aes_report = aes::evaluate_case(&tumor_reg, &treatment, &cfg.aes).map_err(stage("aes"))?;
    aes_report.inputs = inputs
        .iter()
        .filter(|(k, _)| matches!(k.as_str(), "tumor" | "treatment" | "pre" | "post"))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    out.json("aes_report.json", &aes_report)?;
    let hu_stats = match aes::hu_region_stats(&pre_reg, &post, &tumor_reg, &treatment, cfg.hu_threshold) {
        Ok(s) => Some(s),
        Err(Error::EmptyRegion(_)) => None,
        Err(e) => return Err(e.in_stage("hu stats")),
    };
    out.json("hu_stats.json", &hu_stats)?;
    lap("aes", &mut timings);

    let pre_rigid = rigid::apply_rigid(&pre, &rigid_res.transform, Interp::Trilinear);
    let lung_rigid = rigid::apply_rigid_mask(&pre_lung, &rigid_res.transform);
    let mut stage_list = vec![
        stage_metrics("none", &pre, &post, (&pre_lung, &post_lung), &cfg.ssim),
        stage_metrics("rigid", &pre_rigid, &post, (&lung_rigid, &post_lung), &cfg.ssim),
    ];
    if !cfg.skip_deform {
        stage_list.push(stage_metrics("rigid+deformable", &pre_reg, &post, (&lung_reg, &post_lung), &cfg.ssim));
    }
    let stage_list = stage_list.into_iter().collect::<Result<Vec<_>>>().map_err(stage("metrics"))?;
    out.json("metrics.json", &stage_list)?;
    let mut csv = String::from(MetricReport::CSV_HEADER);
    csv.push('\n');
    for s in &stage_list {
        csv.push_str(&s.metrics.whole.csv_row(&s.stage));
        csv.push('\n');
        if let Some(l) = &s.metrics.lung {
            csv.push_str(&l.csv_row(&s.stage));
            csv.push('\n');
        }
    }
    fs::write(dir.join("metrics.csv"), csv).map_err(|e| Error::io(dir.join("metrics.csv"), e))?;
    out.record("metrics.csv")?;
    lap("metrics", &mut timings);

    let manifest = Manifest {
        tool: "ablate-eval".into(),
        version: VERSION.into(),
        config_sha256: cfg.sha256()?,
        config: cfg.clone(),
        inputs,
        outputs: out.hashes.clone(),
        timings_s: timings,
        threads: crate::par::current_threads(),
    };
    write_json(&dir.join("manifest.json"), &manifest)?;

    Ok(PipelineOutcome {
        rigid: rigid_res,
        deform: deform_report,
        field,
        aes: aes_report,
        hu_stats,
        metrics: stage_list,
        render,
        manifest,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationSpec {
    pub zone_radius: f64,
    /// Offset of the zone center from the post-op tumor centroid, mm.
    pub offset: [f64; 3],
    pub hu: f64,
    pub blend: f64,
}

impl Default for AblationSpec {
    fn default() -> Self {
        AblationSpec { zone_radius: 16.0, offset: [0.0; 3], hu: -150.0, blend: 2.0 }
    }
}

/// Synthetic pre/post pair: post is pre pulled through a known rigid pose
/// and respiratory field, optionally with an ablation zone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomCaseConfig {
    pub phantom: PhantomConfig,
    /// Peak respiratory displacement in mm; 0 disables the field.
    pub field_peak_mm: f64,
    pub field_seed: u64,
    pub translation_mm: [f64; 3],
    pub rotation_deg: [f64; 3],
    pub ablation: Option<AblationSpec>,
}

impl Default for PhantomCaseConfig {
    fn default() -> Self {
        PhantomCaseConfig {
            phantom: PhantomConfig::default(),
            field_peak_mm: 8.0,
            field_seed: 1,
            translation_mm: [0.0; 3],
            rotation_deg: [0.0; 3],
            ablation: Some(AblationSpec::default()),
        }
    }
}

pub struct PhantomCase {
    pub pre: Volume,
    pub post: Volume,
    pub pre_lung: Mask,
    pub post_lung: Mask,
    pub pre_tumor: Mask,
    /// Tumor carried into the post-op frame by the true transform.
    pub post_tumor: Mask,
    pub treatment: Option<Mask>,
    /// `post(x) = pre(truth.source_point(x))`.
    pub truth: CompositeTransform,
}

pub fn make_case(cfg: &PhantomCaseConfig) -> Result<PhantomCase> {
    let ph = phantom::make_phantom(&cfg.phantom)?;
    let g = ph.geometry.grid;
    let pre_tumor = ph
        .tumor
        .clone()
        .ok_or_else(|| Error::InvalidParameter("phantom case needs a tumor".into()))?;
    let field = if cfg.field_peak_mm > 0.0 {
        SyntheticField::respiratory(&ph.geometry, cfg.field_peak_mm, cfg.field_seed)?.dense(&g)
    } else {
        DisplacementField::zeros(g)
    };
    let rigid_t = RigidTransform::from_euler(cfg.rotation_deg.map(f64::to_radians), cfg.translation_mm, g.center());
    let truth = CompositeTransform::new(rigid_t, field)?;
    let exterior = Boundary::Constant(cfg.phantom.exterior_hu as f32);
    let mut post = warp::apply_composite_with(&ph.volume, &truth, Interp::Trilinear, exterior);
    let post_lung = warp::warp_mask(&ph.lung, &truth);
    let post_tumor = warp::warp_mask(&pre_tumor, &truth);
    let treatment = match &cfg.ablation {
        Some(a) => {
            let c = phantom::ablation_center(&post_tumor, a.offset)?;
            let (v, m) = phantom::simulate_ablation(&post, c, a.zone_radius, a.hu, a.blend)?;
            post = v;
            Some(m)
        }
        None => None,
    };
    Ok(PhantomCase {
        pre: ph.volume,
        post,
        pre_lung: ph.lung,
        post_lung,
        pre_tumor,
        post_tumor,
        treatment,
        truth,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomManifest {
    pub tool: String,
    pub version: String,
    pub config: PhantomCaseConfig,
    pub truth_rigid: RigidTransform,
    pub outputs: BTreeMap<String, String>,
}

/// Write a phantom case into `dir`: `pre.nii.gz`, `post.nii.gz`, lung and
/// tumor masks, the treatment mask, the true field (`truth_field.raw/json`),
/// `truth_rigid.json` and `phantom_manifest.json`.
pub fn write_case(case: &PhantomCase, cfg: &PhantomCaseConfig, dir: impl AsRef<Path>) -> Result<PhantomManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Outputs { dir, hashes: BTreeMap::new() };
    out.volume("pre.nii.gz", &case.pre)?;
    out.volume("post.nii.gz", &case.post)?;
    out.mask("pre_lung.nii.gz", &case.pre_lung)?;
    out.mask("post_lung.nii.gz", &case.post_lung)?;
    out.mask("pre_tumor.nii.gz", &case.pre_tumor)?;
    out.mask("post_tumor_truth.nii.gz", &case.post_tumor)?;
    if let Some(t) = &case.treatment {
        out.mask("treatment.nii.gz", t)?;
    }
    case.truth.field.save(dir.join("truth_field.raw"))?;
    out.record("truth_field.raw")?;
    out.record("truth_field.json")?;
    out.json("truth_rigid.json", &case.truth.rigid)?;
    let m = PhantomManifest {
        tool: "ablate-eval".into(),
        version: VERSION.into(),
        config: cfg.clone(),
        truth_rigid: case.truth.rigid,
        outputs: out.hashes,
    };
    write_json(&dir.join("phantom_manifest.json"), &m)?;
    Ok(m)
}

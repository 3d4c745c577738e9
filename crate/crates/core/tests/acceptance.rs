//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits with a
//! non-zero status if any criterion fails.

mod common;

use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use ablate_core::aes::{self, AesClass, AesParams};
use ablate_core::deform::{self, optimize_level, ControlGrid, DeformConfig, LabelSpace, LevelProblem, MessageKernel};
use ablate_core::differencing;
use ablate_core::field::DisplacementField;
use ablate_core::lungseg::apply_lung_mask;
use ablate_core::metrics::{self, SsimParams};
use ablate_core::phantom::{self, make_phantom, PhantomConfig, SplitMix, Sphere, SyntheticField};
use ablate_core::pipeline::{self, PhantomCaseConfig, PipelineConfig, PipelineOutcome, PreprocessConfig};
use ablate_core::rigid::{self, RigidRegConfig, RigidTransform};
use ablate_core::volume::{normalize, Boundary, GridMeta, Interp, Mask, Unit, Volume, DEFAULT_WINDOW};
use ablate_core::warp::{self, CompositeTransform};

type Check = Result<String, String>;

fn ensure(ok: bool, msg: String) -> Check {
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn random_mask(g: GridMeta, rng: &mut SplitMix, density: f64) -> Mask {
    let mut m = Mask::empty(g);
    for idx in 0..g.len() {
        m.set(idx, rng.next_f64() < density);
    }
    m
}

fn random_volume(g: GridMeta, rng: &mut SplitMix, unit: Unit) -> Volume {
    let vals: Vec<f32> = (0..g.len()).map(|_| (rng.next_f64() * 1400.0 - 1000.0) as f32).collect();
    Volume::from_fn(g, unit, |i, j, k| vals[g.index(i, j, k)])
}

fn c01_aes_closed_form() -> Check {
    let p = AesParams::default();
    let cases = [
        ("perfect", aes::aes_score(1.0, 1.0, 0.0, &p), 0.0),
        ("cr1=0 er=1", aes::aes_score(0.0, 0.0, 1.0, &p), -1.0 + (-3f64).exp()),
        ("cr1=0.5 er=0.3", aes::aes_score(0.5, 0.0, 0.3, &p), -1.0 + (-1.1f64).exp()),
    ];
    let worst = cases.iter().map(|c| (c.1 - c.2).abs()).fold(0.0, f64::max);
    let detail = cases.iter().map(|c| format!("{}={:.6}", c.0, c.1)).collect::<Vec<_>>().join(" ");
    ensure(worst <= 1e-9, format!("{detail}; max |err| {worst:.1e}"))
}

fn c02_region_algebra() -> Check {
    let g = GridMeta::new([8, 8, 8], [1.25, 1.5, 2.0], [0.0; 3]).unwrap();
    let vv = g.voxel_volume();
    let mut rng = SplitMix::new(2024);
    for trial in 0..100 {
        let dens = [0.05 + 0.5 * rng.next_f64(), rng.next_f64(), rng.next_f64()];
        let mut t = random_mask(g, &mut rng, dens[0]);
        if t.is_empty() {
            t.set(0, true);
        }
        let b = random_mask(g, &mut rng, dens[1]);
        let a = random_mask(g, &mut rng, dens[2]);
        let (mut nt, mut nb, mut na, mut ntb, mut nba, mut nbma) = (0u64, 0u64, 0u64, 0u64, 0u64, 0u64);
        for k in 0..8 {
            for j in 0..8 {
                for i in 0..8 {
                    let (x, y, z) = (t.get(i, j, k), b.get(i, j, k), a.get(i, j, k));
                    nt += x as u64;
                    nb += y as u64;
                    na += z as u64;
                    ntb += (x && y) as u64;
                    nba += (y && z) as u64;
                    nbma += (y && !z) as u64;
                }
            }
        }
        let rv = aes::region_volumes(&t, &b, &a).map_err(|e| e.to_string())?;
        let got = [rv.t, rv.b, rv.a, rv.t_and_b, rv.b_and_a, rv.b_minus_a];
        let want = [nt, nb, na, ntb, nba, nbma].map(|c| c as f64 * vv);
        if got != want {
            return Err(format!("trial {trial}: volumes {got:?} != {want:?}"));
        }
        if na == 0 {
            continue;
        }
        let cov = aes::coverage_ratios(&rv).map_err(|e| e.to_string())?;
        let er = if nb == 0 { 0.0 } else { nbma as f64 / nb as f64 };
        let want = (ntb as f64 / nt as f64, nba as f64 / na as f64, er);
        if (cov.cr1, cov.cr2, cov.er) != want {
            return Err(format!("trial {trial}: coverage {cov:?} != {want:?}"));
        }
    }
    Ok("100 random 8^3 triples match the triple-loop oracle exactly".into())
}

fn c03_concentric_spheres() -> Check {
    let g = GridMeta::new([96; 3], [1.25; 3], [0.0; 3]).unwrap();
    let c = g.center();
    let t = Sphere { center: c, radius: 10.0 }.voxelize(&g);
    let b = Sphere { center: c, radius: 16.0 }.voxelize(&g);
    let r = aes::evaluate_case(&t, &b, &AesParams::default()).map_err(|e| e.to_string())?;
    let er0 = 1.0 - 15f64.powi(3) / 16f64.powi(3);
    let aes0 = 1.0 - (-0.5 * 0.0 - 2.0 * er0).exp();
    let a_ratio = r.volumes_mm3.a / (4.0 / 3.0 * std::f64::consts::PI * 15f64.powi(3));
    let msg = format!(
        "ER {:.4} (analytic {er0:.4}), AES {:.4} (analytic {aes0:.4}), class {:?}; |A| / analytic r=15 ball = {a_ratio:.3}",
        r.er, r.aes, r.class
    );
    ensure((r.er - er0).abs() <= 0.02 && (r.aes - aes0).abs() <= 0.03 && r.class == AesClass::Average, msg)
}

fn c04_rigid_recovery() -> Check {
    let p = make_phantom(&PhantomConfig::default()).unwrap();
    let g = p.geometry.grid;
    let fixed = normalize(&apply_lung_mask(&p.volume, &p.lung, -1000.0).unwrap(), Some(DEFAULT_WINDOW)).unwrap();
    let rot = 5f64.to_radians();
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, angles, t) in [
        ("translation", [0.0; 3], [6.25, -3.75, 2.5]),
        ("rotation", [0.0, 0.0, rot], [0.0; 3]),
        ("both", [0.0, 0.0, rot], [6.25, -3.75, 2.5]),
    ] {
        let gt = RigidTransform::from_euler(angles, t, g.center());
        let moving_hu = rigid::apply_rigid(&p.volume, &gt, Interp::Trilinear);
        let moving_lung = rigid::apply_rigid_mask(&p.lung, &gt);
        let moving = normalize(&apply_lung_mask(&moving_hu, &moving_lung, -1000.0).unwrap(), Some(DEFAULT_WINDOW)).unwrap();
        let region = p.lung.union(&moving_lung).unwrap();
        let r = rigid::register_rigid(&moving, &fixed, Some(&region), &RigidRegConfig::default()).map_err(|e| e.to_string())?;
        let est = r.transform.inverse();
        let dt = (0..3).map(|a| (est.translation[a] - t[a]).powi(2)).sum::<f64>().sqrt();
        let dang = gt.inverse().compose(&est).rotation_angle().to_degrees();
        let ceiling = rigid::ncc(&rigid::apply_rigid(&moving, &gt.inverse(), Interp::Trilinear), &fixed, Some(&region)).unwrap();
        let pose_ok = dt <= 0.5 * 1.25 && dang <= 0.5;
        ok &= pose_ok && r.final_ncc >= 0.99;
        parts.push(format!(
            "{name}: |dt| {dt:.3} mm, dangle {dang:.3} deg, NCC {:.4} (true-pose NCC {ceiling:.4})",
            r.final_ncc
        ));
    }
    ensure(ok, parts.join("; "))
}

struct DeformRun {
    epe: f64,
    epe_zero: f64,
    dice: f64,
    dice_zero: f64,
    energies: Vec<(f64, f64)>,
}

fn deform_on_default_phantom() -> DeformRun {
    let p = make_phantom(&PhantomConfig::default()).unwrap();
    let g = p.geometry.grid;
    let sf = SyntheticField::respiratory(&p.geometry, 8.0, 1).unwrap();
    let (fixed_hu, truth) = phantom::apply_synthetic_field(&p.volume, &sf);
    let t = CompositeTransform::new(RigidTransform::identity(g.center()), truth.clone()).unwrap();
    let fixed_lung = warp::warp_mask(&p.lung, &t);
    let f = normalize(&apply_lung_mask(&fixed_hu, &fixed_lung, -1000.0).unwrap(), Some(DEFAULT_WINDOW)).unwrap();
    let m = normalize(&apply_lung_mask(&p.volume, &p.lung, -1000.0).unwrap(), Some(DEFAULT_WINDOW)).unwrap();
    let r = deform::register_deformable(&m, &f, None, None, &DeformConfig::default()).unwrap();
    let recovered = CompositeTransform::new(RigidTransform::identity(g.center()), r.field.clone()).unwrap();
    let warped_lung = warp::warp_mask(&p.lung, &recovered);
    DeformRun {
        epe: r.field.mean_endpoint_error(&truth, Some(&fixed_lung)).unwrap(),
        epe_zero: DisplacementField::zeros(g).mean_endpoint_error(&truth, Some(&fixed_lung)).unwrap(),
        dice: metrics::dice(&warped_lung, &fixed_lung).unwrap(),
        dice_zero: metrics::dice(&p.lung, &fixed_lung).unwrap(),
        energies: r.report.levels.iter().map(|l| (l.energy_before, l.energy_after)).collect(),
    }
}

fn c05_deformable(run: &DeformRun) -> Check {
    ensure(
        run.epe < 2.0 && run.dice >= 0.97,
        format!(
            "mean EPE {:.3} mm (no registration {:.3}), lung Dice {:.4} (no registration {:.4})",
            run.epe, run.epe_zero, run.dice, run.dice_zero
        ),
    )
}

fn seed_case(seed: u64) -> PhantomCaseConfig {
    let mut rng = SplitMix::new(seed ^ 0x5eed);
    let mut u = || 2.0 * rng.next_f64() - 1.0;
    PhantomCaseConfig {
        phantom: PhantomConfig { seed, dims: [64; 3], spacing: [1.875; 3], ..Default::default() },
        field_seed: seed,
        translation_mm: [4.0 * u(), 4.0 * u(), 4.0 * u()],
        rotation_deg: [0.0, 0.0, 3.0 * u()],
        ..Default::default()
    }
}

fn write_seed_case(case_cfg: &PhantomCaseConfig, dir: &Path) -> PipelineConfig {
    let case = pipeline::make_case(case_cfg).unwrap();
    let c = dir.join("case");
    pipeline::write_case(&case, case_cfg, &c).unwrap();
    PipelineConfig {
        pre: c.join("pre.nii.gz"),
        post: c.join("post.nii.gz"),
        tumor: Some(c.join("pre_tumor.nii.gz")),
        treatment: Some(c.join("treatment.nii.gz")),
        output_dir: dir.join("run"),
        preprocess: PreprocessConfig { target_spacing: case_cfg.phantom.spacing, dims: None, ..Default::default() },
        ..Default::default()
    }
}

fn run_case(case_cfg: &PhantomCaseConfig, dir: &Path) -> PipelineOutcome {
    pipeline::run_pipeline(&write_seed_case(case_cfg, dir)).unwrap()
}

fn ordering_violations(runs: &[(u64, PipelineOutcome)], lung: bool) -> (Vec<String>, [f64; 3]) {
    let mut bad = Vec::new();
    let mut mins = [f64::INFINITY; 3];
    for (seed, o) in runs {
        let m: Vec<_> = o
            .metrics
            .iter()
            .map(|s| if lung { s.metrics.lung.as_ref().unwrap() } else { &s.metrics.whole })
            .collect();
        let dice = |i: usize| m[i].dice.unwrap();
        let ok = m[0].ncc < m[1].ncc
            && m[1].ncc < m[2].ncc
            && dice(0) < dice(1)
            && dice(1) < dice(2)
            && m[0].rmse > m[1].rmse
            && m[1].rmse > m[2].rmse;
        mins[0] = mins[0].min(m[2].ncc - m[1].ncc);
        mins[1] = mins[1].min(dice(2) - dice(1));
        mins[2] = mins[2].min(m[1].rmse - m[2].rmse);
        if !ok {
            bad.push(format!(
                "seed {seed} ncc {:.4}/{:.4}/{:.4} dice {:.4}/{:.4}/{:.4} rmse {:.1}/{:.1}/{:.1}",
                m[0].ncc, m[1].ncc, m[2].ncc, dice(0), dice(1), dice(2), m[0].rmse, m[1].rmse, m[2].rmse
            ));
        }
    }
    (bad, mins)
}

/// Judged on the lung region, where the registration images live; the
/// whole-volume ordering is reported alongside.
fn c06_ordering(runs: &[(u64, PipelineOutcome)]) -> Check {
    let (bad, mins) = ordering_violations(runs, true);
    let (bad_whole, _) = ordering_violations(runs, false);
    let s = runs[0].1.metrics.iter().map(|m| m.metrics.lung.as_ref().unwrap()).collect::<Vec<_>>();
    let mut msg = format!(
        "{} seeds, in-lung; seed {} ncc {:.4}/{:.4}/{:.4}; smallest deformable gains ncc {:.4} dice {:.4} rmse {:.2}; whole-volume ordering holds on {}/{} seeds",
        runs.len(),
        runs[0].0,
        s[0].ncc,
        s[1].ncc,
        s[2].ncc,
        mins[0],
        mins[1],
        mins[2],
        runs.len() - bad_whole.len(),
        runs.len()
    );
    if !bad_whole.is_empty() {
        msg.push_str(&format!(" (whole-volume exceptions: {})", bad_whole.join("; ")));
    }
    if bad.is_empty() {
        return Ok(msg);
    }
    // Lung Dice at the true rigid pose shows whether any rigid stage could
    // have improved on no registration for the violating seeds.
    let mut truth = Vec::new();
    for (seed, o) in runs {
        let stages = &o.metrics;
        if stages[1].metrics.whole.dice >= stages[0].metrics.whole.dice {
            continue;
        }
        let case = pipeline::make_case(&seed_case(*seed)).unwrap();
        let at_truth = metrics::dice(&rigid::apply_rigid_mask(&case.pre_lung, &case.truth.rigid), &case.post_lung).unwrap();
        truth.push(format!("seed {seed} lung Dice at true rigid pose {at_truth:.4}"));
    }
    Err(format!("{msg}; in-lung violations: {}; {}", bad.join("; "), truth.join("; ")))
}

fn c07_tree_dp() -> Check {
    // 16 x 1 x 1 voxels with node spacing 5 give a 4-node chain.
    let g = GridMeta::new([16, 1, 1], [1.25; 3], [0.0; 3]).unwrap();
    let mut rng = SplitMix::new(77);
    let fixed = random_volume(g, &mut rng, Unit::Normalized);
    let moving = random_volume(g, &mut rng, Unit::Normalized);
    let (df, dm) = (deform::compute_ssc(&fixed, 1), deform::compute_ssc(&moving, 1));
    let grid = ControlGrid::new(&g, 5).map_err(|e| e.to_string())?;
    let labels = LabelSpace::new(1, 1).map_err(|e| e.to_string())?;
    if grid.len() != 4 || labels.len() != 27 {
        return Err(format!("setup: {} nodes, {} labels", grid.len(), labels.len()));
    }
    let prior: Vec<[f64; 3]> = (0..4).map(|p| [0.3 * p as f64, -0.2, 0.1 * p as f64]).collect();
    let mut worst = Vec::new();
    for alpha in [0.03, 1.6, 25.0] {
        let prob = LevelProblem::new(&df, &dm, grid, labels.clone(), alpha, prior.clone()).map_err(|e| e.to_string())?;
        let mut best = f64::INFINITY;
        let mut f = [0usize; 4];
        for code in 0..27usize.pow(4) {
            let mut c = code;
            for x in f.iter_mut() {
                *x = c % 27;
                c /= 27;
            }
            best = best.min(prob.total_energy(&f).unwrap());
        }
        for kernel in [MessageKernel::Exhaustive, MessageKernel::DistanceTransform] {
            let sol = optimize_level(&prob, kernel).map_err(|e| e.to_string())?;
            if sol.tree_energy != best || sol.energy != best {
                return Err(format!(
                    "alpha {alpha} {kernel:?}: tree {} final {} vs enumeration {best}",
                    sol.tree_energy, sol.energy
                ));
            }
        }
        worst.push(format!("alpha {alpha}: {best:.6}"));
    }
    Ok(format!("DP = enumeration of 27^4 assignments ({})", worst.join(", ")))
}

fn c08_energy(deform_run: &DeformRun, runs: &[(u64, PipelineOutcome)]) -> Check {
    let mut n = 0;
    let mut min_gain = f64::INFINITY;
    let mut bad = Vec::new();
    let seeds = runs
        .iter()
        .map(|(s, o)| (format!("seed {s}"), o.deform.as_ref().unwrap().levels.iter().map(|l| (l.energy_before, l.energy_after)).collect()))
        .chain(std::iter::once(("96^3 phantom".to_string(), deform_run.energies.clone())));
    for (name, levels) in seeds {
        let levels: Vec<(f64, f64)> = levels;
        for (li, (zero, after)) in levels.iter().enumerate() {
            n += 1;
            min_gain = min_gain.min(zero - after);
            if after > zero {
                bad.push(format!("{name} level {li}: {after} > {zero}"));
            }
        }
    }
    let msg = format!("{n} levels checked; smallest zero-minus-final energy {min_gain:.4}");
    if bad.is_empty() {
        Ok(msg)
    } else {
        Err(format!("{msg}; {}", bad.join("; ")))
    }
}

fn ref_ncc(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for i in 0..a.len() {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    sab / (saa * sbb).sqrt()
}

fn ref_ssim(a: &Volume, b: &Volume, w: usize, k1: f64, k2: f64) -> f64 {
    let d = a.grid().dims;
    let (lo, hi) = b.min_max();
    let l = (hi - lo) as f64;
    let (c1, c2) = ((k1 * l) * (k1 * l), (k2 * l) * (k2 * l));
    let mut total = 0.0;
    let mut count = 0;
    for z in 0..=d[2] - w {
        for y in 0..=d[1] - w {
            for x in 0..=d[0] - w {
                let mut xa = Vec::new();
                let mut xb = Vec::new();
                for k in z..z + w {
                    for j in y..y + w {
                        for i in x..x + w {
                            xa.push(a.get(i, j, k) as f64);
                            xb.push(b.get(i, j, k) as f64);
                        }
                    }
                }
                let n = xa.len() as f64;
                let ma = xa.iter().sum::<f64>() / n;
                let mb = xb.iter().sum::<f64>() / n;
                let va = xa.iter().map(|v| (v - ma) * (v - ma)).sum::<f64>() / n;
                let vb = xb.iter().map(|v| (v - mb) * (v - mb)).sum::<f64>() / n;
                let cov = xa.iter().zip(&xb).map(|(p, q)| (p - ma) * (q - mb)).sum::<f64>() / n;
                total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    total / count as f64
}

fn c09_metric_oracles() -> Check {
    let g = GridMeta::new([8; 3], [1.25; 3], [0.0; 3]).unwrap();
    let mut rng = SplitMix::new(9);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let a = random_volume(g, &mut rng, Unit::Hu);
        let b = random_volume(g, &mut rng, Unit::Hu);
        let av: Vec<f64> = a.data().iter().map(|&v| v as f64).collect();
        let bv: Vec<f64> = b.data().iter().map(|&v| v as f64).collect();
        worst = worst.max((rigid::ncc(&a, &b, None).unwrap() - ref_ncc(&av, &bv)).abs());
        for w in [3, 5, 7] {
            let p = SsimParams { window: w, ..Default::default() };
            worst = worst.max((metrics::ssim3d(&a, &b, &p, None).unwrap() - ref_ssim(&a, &b, w, 0.01, 0.03)).abs());
        }
        let mse = av.iter().zip(&bv).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / av.len() as f64;
        worst = worst.max((metrics::rmse(&a, &b, None).unwrap() - mse.sqrt()).abs());
        let (ma, mb) = (random_mask(g, &mut rng, 0.4), random_mask(g, &mut rng, 0.6));
        let both = (0..g.len()).filter(|&i| ma.at(i) && mb.at(i)).count() as f64;
        let dice = 2.0 * both / (ma.count() + mb.count()) as f64;
        worst = worst.max((metrics::dice(&ma, &mb).unwrap() - dice).abs());
    }
    let x = [1.0, 2.0, 3.0, 4.0, 5.0];
    let rho_listed = metrics::spearman(&x, &[2.0, 1.0, 4.0, 3.0, 5.0]).unwrap().rho;
    let rho_07 = metrics::spearman(&x, &[2.0, 3.0, 1.0, 4.0, 5.0]).unwrap().rho;
    let mut r1 = Vec::new();
    let mut r2 = Vec::new();
    for (a, b, n) in [(0, 0, 20), (0, 1, 5), (1, 0, 10), (1, 1, 15)] {
        r1.extend(std::iter::repeat_n(a, n));
        r2.extend(std::iter::repeat_n(b, n));
    }
    let kappa = metrics::cohen_kappa(&r1, &r2).unwrap();
    let msg = format!(
        "max |err| vs reference loops {worst:.1e}; spearman [2,1,4,3,5] = {rho_listed} (sum d^2 = 4), [2,3,1,4,5] = {rho_07}; kappa = {kappa}"
    );
    ensure(worst <= 1e-10 && rho_listed == 0.8 && rho_07 == 0.7 && kappa == 0.4, msg)
}

fn c10_hu_separation(runs: &[(u64, PipelineOutcome)]) -> Check {
    let mut worst = (1.0f64, 1.0f64);
    let mut voxels = usize::MAX;
    for (_, o) in runs {
        let s = o.hu_stats.as_ref().ok_or("no B\\T region")?;
        worst.0 = worst.0.min(s.pre.fraction_below);
        worst.1 = worst.1.min(s.post.fraction_at_or_above);
        voxels = voxels.min(s.voxels);
    }
    // Same statistic with the true transform, to separate registration error
    // from what the phantom itself puts inside B\T.
    let case = pipeline::make_case(&seed_case(runs[0].0)).unwrap();
    let pre_true = warp::apply_composite_with(&case.pre, &case.truth, Interp::Trilinear, Boundary::Constant(-1000.0));
    let truth = aes::hu_region_stats(&pre_true, &case.post, &case.post_tumor, case.treatment.as_ref().unwrap(), -600.0)
        .map_err(|e| e.to_string())?;
    ensure(
        worst.0 >= 0.95 && worst.1 >= 0.95,
        format!(
            "B\\T at -600 HU over {} seeds (>= {voxels} voxels each): pre below >= {:.4}, post at/above >= {:.4}; seed {} with true alignment: pre below {:.4}",
            runs.len(),
            worst.0,
            worst.1,
            runs[0].0,
            truth.pre.fraction_below
        ),
    )
}

fn c11_differencing() -> Check {
    let p = make_phantom(&PhantomConfig { dims: [48; 3], spacing: [2.5; 3], ..Default::default() }).unwrap();
    let d = differencing::difference(&p.volume, &p.volume).map_err(|e| e.to_string())?;
    let zero = d.data().iter().all(|&v| v == 0.0);
    let bytes = common::render_golden_scene();
    let stable = bytes == common::render_golden_scene();
    let golden = std::fs::read(common::golden_path()).map_err(|e| e.to_string())?;
    ensure(
        zero && stable && bytes == golden,
        format!("difference(a, a) all zero: {zero}; PNG repeatable: {stable}; matches golden ({} bytes): {}", golden.len(), bytes == golden),
    )
}

fn c12_determinism() -> Check {
    let case = PhantomCaseConfig {
        phantom: PhantomConfig { dims: [48; 3], spacing: [2.5; 3], ..Default::default() },
        translation_mm: [2.5, -1.25, 0.0],
        rotation_deg: [0.0, 0.0, 2.0],
        ..Default::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let base = write_seed_case(&case, dir.path());
    let mut outs = Vec::new();
    for threads in [1, 2, 4] {
        let out_dir = dir.path().join(format!("run_t{threads}"));
        let cfg = PipelineConfig { output_dir: out_dir.clone(), threads: Some(threads), ..base.clone() };
        let o = pipeline::run_pipeline(&cfg).map_err(|e| e.to_string())?;
        let report = std::fs::read(out_dir.join("aes_report.json")).unwrap();
        let field = std::fs::read(out_dir.join("field.raw")).unwrap();
        outs.push((threads, o.aes, report, field));
    }
    let same = outs.iter().all(|o| o.1 == outs[0].1 && o.2 == outs[0].2 && o.3 == outs[0].3);
    ensure(
        same,
        format!(
            "threads 1/2/4: AESReport and field bytes identical = {same} ({} field bytes, AES {:.6})",
            outs[0].3.len(),
            outs[0].1.aes
        ),
    )
}

fn run_criterion(n: usize, name: &str, f: impl FnOnce() -> Check) -> bool {
    let t0 = Instant::now();
    let r = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let (tag, msg) = match &r {
        Ok(m) => ("PASS", m),
        Err(m) => ("FAIL", m),
    };
    println!("criterion {n:>2} {tag} {name} [{:.1}s]: {msg}", t0.elapsed().as_secs_f64());
    r.is_ok()
}

fn main() {
    // Cargo passes libtest flags such as --list; this target has no tests to list.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut ok = Vec::new();
    ok.push(run_criterion(1, "AES closed form", c01_aes_closed_form));
    ok.push(run_criterion(2, "region algebra oracle", c02_region_algebra));
    ok.push(run_criterion(3, "concentric spheres", c03_concentric_spheres));
    ok.push(run_criterion(4, "rigid recovery", c04_rigid_recovery));

    let t0 = Instant::now();
    let deform_run = deform_on_default_phantom();
    let deform_secs = t0.elapsed().as_secs_f64();
    ok.push(run_criterion(5, &format!("deformable recovery (registration {deform_secs:.1}s)"), || c05_deformable(&deform_run)));

    let t0 = Instant::now();
    let runs: Vec<(u64, PipelineOutcome)> = (1..=10)
        .map(|seed| {
            let dir = tempfile::tempdir().unwrap();
            (seed, run_case(&seed_case(seed), dir.path()))
        })
        .collect();
    let suite_secs = t0.elapsed().as_secs_f64();
    ok.push(run_criterion(6, &format!("registration ordering (suite {suite_secs:.1}s)"), || c06_ordering(&runs)));
    ok.push(run_criterion(7, "tree DP exactness", c07_tree_dp));
    ok.push(run_criterion(8, "energy never above zero assignment", || c08_energy(&deform_run, &runs)));
    ok.push(run_criterion(9, "metric oracles", c09_metric_oracles));
    ok.push(run_criterion(10, "HU separation in B\\T", || c10_hu_separation(&runs)));
    ok.push(run_criterion(11, "differencing and golden PNG", c11_differencing));
    ok.push(run_criterion(12, "determinism across thread counts", c12_determinism));

    let passed = ok.iter().filter(|&&b| b).count();
    println!("acceptance: {passed}/{} criteria passed", ok.len());
    if passed != ok.len() {
        std::process::exit(1);
    }
}

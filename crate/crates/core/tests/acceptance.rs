//! Acceptance runner: one PASS/FAIL line per criterion. Exits non-zero when
//! any criterion fails.

mod common;

use std::time::{Duration, Instant};

use common::*;
use fuselab::calib::*;
use fuselab::eval::{miou, ConfusionMatrix};
use fuselab::fusion::{bilinear_sample, sample_all_cameras, sample_all_cameras_into, FeatureMap, FeatureMatrix};
use fuselab::grids::*;
use fuselab::losses::*;
use fuselab::pointcloud::{load_cloud, save_cloud, LabelArray, PointCloud};
use fuselab::toytrain::{self, MiouTable, ToyModel};
use nalgebra::{Matrix3, Matrix4, Vector3};
use rand::seq::SliceRandom;
use rand::Rng;

const PROJECTION_TOL: f64 = 1e-9;
const ROTATION_TOL: f64 = 1e-9;
const GEOMETRY_BUDGET: Duration = Duration::from_secs(5);
const GEOMETRY_CASES: usize = 1000;
const LEVEL_SAMPLES: usize = 10_000;
const SAMPLING_TOL: f64 = 1e-9;
const SAMPLING_QUERIES: usize = 1000;
const GRADIENT_REL_TOL: f64 = 1e-4;
const GRADIENT_CASES: usize = 100;
const FD_STEP: f64 = 1e-6;
const RELABELINGS: usize = 100;
const THREAD_COUNTS: [usize; 3] = [1, 4, 8];
const NUSCENES_CELL: f64 = 0.2;
const ORDERING_SEEDS: u64 = 5;
const SEED_BUDGET: Duration = Duration::from_secs(60);
const MARGIN_FUSION_GAIN: f64 = 0.05;
const MARGIN_ROBUSTNESS: f64 = 0.03;
const PERF_POINTS: usize = 100_000;
const PERF_CAMERAS: usize = 6;
const PERF_CHANNELS: usize = 64;
const PERF_BUDGET: Duration = Duration::from_millis(100);

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn single_thread<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(f)
}

fn geometry() -> Outcome {
    let start = Instant::now();
    let mut rng = rng(1001);
    let (w, h) = (1600, 900);
    let mut worst: f64 = 0.0;
    let mut validity_mismatch = 0;
    let mut valid = 0;
    for _ in 0..GEOMETRY_CASES {
        let intr = random_intrinsics(&mut rng, w, h);
        let extr = random_extrinsics(&mut rng);
        // Bias points in front of the camera so most cases exercise u, v.
        let cam_point = Vector3::new(
            rng.random_range(-20.0..20.0),
            rng.random_range(-12.0..12.0),
            rng.random_range(-5.0..40.0),
        );
        let world = extr.rotation().transpose() * (cam_point - extr.translation());
        let cloud = PointCloud::new(vec![[world.x as f32, world.y as f32, world.z as f32]], vec![0.0]).unwrap();
        let got = project_points(&cloud, &intr, &extr, w, h)[0];
        match project_oracle(cloud.point(0), &intr, &extr, w, h) {
            Some((u, v, d)) if got.valid => {
                valid += 1;
                worst = worst.max((got.u - u).abs()).max((got.v - v).abs()).max((got.depth - d).abs());
            }
            None if !got.valid => {}
            _ => validity_mismatch += 1,
        }
    }
    let mut rot_worst: f64 = 0.0;
    for _ in 0..GEOMETRY_CASES {
        let spec = random_spec(&mut rng, MAX_DISTURBANCE_DEG);
        let e = compose_disturbance(&spec).unwrap();
        let r: Matrix3<f64> = e.fixed_view::<3, 3>(0, 0).into_owned();
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        rot_worst = rot_worst.max(ortho).max((r.determinant() - 1.0).abs());
    }
    let elapsed = start.elapsed();
    outcome(
        worst < PROJECTION_TOL && validity_mismatch == 0 && rot_worst < ROTATION_TOL && elapsed < GEOMETRY_BUDGET,
        format!(
            "projection max |Δ| {worst:.2e} over {valid} visible of {GEOMETRY_CASES}, validity mismatches {validity_mismatch}; \
             rotation invariants max |Δ| {rot_worst:.2e}; {:.0} ms",
            elapsed.as_secs_f64() * 1e3
        ),
    )
}

fn perturbation_levels() -> Outcome {
    let bounds = [(PerturbationLevel::L0, 0.0), (PerturbationLevel::L1, 1.0), (PerturbationLevel::L2, 2.0), (PerturbationLevel::L3, 4.0)];
    let mut ok = true;
    let mut parts = Vec::new();
    for (level, bound) in bounds {
        ok &= level.range_deg() == bound;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let mut identity = true;
        for i in 0..LEVEL_SAMPLES as u64 {
            let s = sample_disturbance(level, 7, i / 6, i % 6);
            for a in [s.rx, s.ry, s.rz] {
                lo = lo.min(a);
                hi = hi.max(a);
            }
            if level == PerturbationLevel::L0 {
                identity &= compose_disturbance(&s).unwrap() == Matrix4::identity();
            }
        }
        ok &= lo >= -bound && hi <= bound && identity;
        parts.push(format!("L{} [{lo:+.4}, {hi:+.4}] ⊆ ±{bound}", level.index()));
    }
    outcome(ok, format!("{}; level 0 identity every time", parts.join(", ")))
}

fn sampling() -> Outcome {
    let mut rng = rng(1003);
    let map = random_map(&mut rng, 0, 8, 24, 40, 8);
    let mut worst: f64 = 0.0;
    for _ in 0..SAMPLING_QUERIES {
        let (u, v) = (rng.random_range(-1.5..41.5), rng.random_range(-1.5..25.5));
        let got = bilinear_sample(&map, u, v).unwrap();
        for (c, g) in got.iter().enumerate() {
            worst = worst.max((g - bilinear_oracle(&map, c, u, v)).abs());
        }
    }
    // Bilinearity in the map and exactness on constant maps.
    let other = random_map(&mut rng, 0, 8, 24, 40, 8);
    let combo: Vec<f32> = map.to_chw().iter().zip(other.to_chw()).map(|(a, b)| 0.5 * a - 2.0 * b).collect();
    let combo = FeatureMap::from_chw(0, 8, 24, 40, 8, &combo).unwrap();
    let constant = FeatureMap::from_chw(0, 8, 24, 40, 8, &vec![3.5; 8 * 24 * 40]).unwrap();
    let mut linear_err: f64 = 0.0;
    let mut const_err: f64 = 0.0;
    for _ in 0..SAMPLING_QUERIES {
        let (u, v) = (rng.random_range(0.0..39.0), rng.random_range(0.0..23.0));
        let (a, b, c) = (
            bilinear_sample(&map, u, v).unwrap(),
            bilinear_sample(&other, u, v).unwrap(),
            bilinear_sample(&combo, u, v).unwrap(),
        );
        for ch in 0..8 {
            linear_err = linear_err.max((c[ch] - (0.5 * a[ch] - 2.0 * b[ch])).abs());
        }
        for x in bilinear_sample(&constant, u, v).unwrap() {
            const_err = const_err.max((x - 3.5).abs());
        }
    }
    // Out-of-FOV rows: every block is exactly zero.
    let projections = vec![vec![PixelProjection::INVALID; 50]; 2];
    let maps = vec![map.clone(), other.clone()];
    let zeros = sample_all_cameras(&maps, &projections).unwrap().as_slice().iter().all(|&x| x == 0.0);
    outcome(
        worst < SAMPLING_TOL && linear_err < 1e-5 && const_err < 1e-12 && zeros,
        format!(
            "oracle max |Δ| {worst:.2e} over {SAMPLING_QUERIES} queries; linearity |Δ| {linear_err:.1e} (f32 map storage); \
             constant map |Δ| {const_err:.1e}; out-of-FOV rows zero: {zeros}"
        ),
    )
}

fn losses() -> Outcome {
    let mut rng = rng(1004);
    let (mut ce_worst, mut kd_worst): (f64, f64) = (0.0, 0.0);
    for _ in 0..GRADIENT_CASES {
        let (n, k) = (rng.random_range(1..8), rng.random_range(2..6));
        let p = random_probs(&mut rng, n, k, 0.05);
        let t = random_probs(&mut rng, n, k, 0.05);
        let labels = random_labels(&mut rng, n, k);
        let cfg = LossConfig {
            class_weights: (0..k).map(|_| rng.random_range(0.2..3.0)).collect(),
            kd_temperature: rng.random_range(0.5..3.0),
            ..LossConfig::uniform(k)
        };
        let ce = weighted_ce(&p, &labels, &cfg).unwrap().grad;
        let ce_fd = finite_difference(&p, FD_STEP, |q| weighted_ce(q, &labels, &cfg).unwrap().loss);
        ce_worst = ce_worst.max(max_relative_error(&ce, &ce_fd));
        let kd = kd_loss(&t, &p, &labels, &cfg).unwrap().grad;
        let kd_fd = finite_difference(&p, FD_STEP, |q| kd_loss(&t, q, &labels, &cfg).unwrap().loss);
        kd_worst = kd_worst.max(max_relative_error(&kd, &kd_fd));
    }
    let mut lovasz_cases = 0;
    let mut lovasz_mismatch = 0;
    let mut check = |p: &ProbDist, labels: &LabelArray| {
        lovasz_cases += 1;
        if lovasz_softmax(p, labels).unwrap().loss != lovasz_oracle(p, labels) {
            lovasz_mismatch += 1;
        }
    };
    for _ in 0..2000 {
        let (n, k) = (rng.random_range(1..=8), rng.random_range(2..=4));
        check(&random_probs(&mut rng, n, k, 0.0), &random_labels(&mut rng, n, k));
    }
    for n in 1..=6usize {
        for pattern in 0u32..(1 << n) {
            let labels = LabelArray::new((0..n).map(|i| ((pattern >> i) & 1) as u16).collect(), 2).unwrap();
            check(&random_probs(&mut rng, n, 2, 0.0), &labels);
        }
    }
    outcome(
        ce_worst < GRADIENT_REL_TOL && kd_worst < GRADIENT_REL_TOL && lovasz_mismatch == 0,
        format!(
            "max relative FD error: weighted CE {ce_worst:.1e}, KD {kd_worst:.1e} ({GRADIENT_CASES} instances); \
             Lovász exact on {}/{lovasz_cases} instances",
            lovasz_cases - lovasz_mismatch
        ),
    )
}

fn metrics() -> Outcome {
    let mut cm = ConfusionMatrix::new(2);
    cm.accumulate(&LabelArray::new(vec![0, 0, 1, 1], 2).unwrap(), &LabelArray::new(vec![0, 1, 1, 1], 2).unwrap())
        .unwrap();
    let hand = miou(&cm).miou == Some(7.0 / 12.0);
    let mut rng = rng(1005);
    let mut assoc = true;
    let mut perm_ok = true;
    for _ in 0..RELABELINGS {
        let k = rng.random_range(2..8);
        let n = rng.random_range(2..300);
        let gt = random_labels(&mut rng, n, k);
        let pred = random_labels(&mut rng, n, k);
        let mut whole = ConfusionMatrix::new(k);
        whole.accumulate(&gt, &pred).unwrap();
        let cut = rng.random_range(0..n);
        let part = |l: &LabelArray, r: std::ops::Range<usize>| LabelArray::new(l.as_slice()[r].to_vec(), k).unwrap();
        let (mut a, mut b) = (ConfusionMatrix::new(k), ConfusionMatrix::new(k));
        a.accumulate(&part(&gt, 0..cut), &part(&pred, 0..cut)).unwrap();
        b.accumulate(&part(&gt, cut..n), &part(&pred, cut..n)).unwrap();
        a.merge(&b).unwrap();
        assoc &= a == whole;
        let mut perm: Vec<usize> = (0..k).collect();
        perm.shuffle(&mut rng);
        let relabel = |l: &LabelArray| LabelArray::from_indices(&l.iter().map(|x| perm[x]).collect::<Vec<_>>(), k).unwrap();
        let mut p = ConfusionMatrix::new(k);
        p.accumulate(&relabel(&gt), &relabel(&pred)).unwrap();
        let (r0, r1) = (miou(&whole), miou(&p));
        perm_ok &= (0..k).all(|c| r0.per_class_iou[c] == r1.per_class_iou[perm[c]]);
        perm_ok &= (r0.miou.unwrap() - r1.miou.unwrap()).abs() < 1e-12;
    }
    outcome(
        hand && assoc && perm_ok,
        format!("4-point example = 7/12 exactly: {hand}; split-batch associativity: {assoc}; {RELABELINGS} relabelings invariant: {perm_ok}"),
    )
}

fn grids() -> Outcome {
    let mut rng = rng(1006);
    let n = 50_000;
    let xyz: Vec<[f32; 3]> = (0..n)
        .map(|_| [rng.random_range(-60.0..60.0), rng.random_range(-60.0..60.0), rng.random_range(-6.0..4.0)])
        .collect();
    let cloud = PointCloud::new(xyz, vec![0.0; n]).unwrap();
    let feats = FeatureMatrix::from_vec(n, 4, (0..n * 4).map(|_| rng.random_range(-5.0..5.0)).collect()).unwrap();
    let bev = BevSpec::nuscenes();
    let rv = RvSpec::default();
    let bev_cells: Vec<_> = (0..n).map(|i| bev_cell(cloud.point(i), &bev)).collect();
    let rv_cells: Vec<_> = (0..n).map(|i| rv_cell(cloud.point(i), &rv)).collect();
    let mut mismatches = 0usize;
    for reduce in [Reduce::Max, Reduce::Mean] {
        let bev_oracle = scatter_oracle(&feats, &bev_cells, reduce);
        let rv_oracle = scatter_oracle(&feats, &rv_cells.iter().map(|c| c.map(|(cell, _)| cell)).collect::<Vec<_>>(), reduce);
        for threads in THREAD_COUNTS {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            let (bev_grid, bev_out, rv_grid, rv_out) = pool.install(|| {
                let bi = bev_index(&cloud, &bev).unwrap();
                let ri = rv_index(&cloud, &rv).unwrap();
                let bg = scatter(&feats, &bi, reduce).unwrap();
                let rg = scatter(&feats, &ri, reduce).unwrap();
                let bo = gather(&bg, &bi).unwrap();
                let ro = gather(&rg, &ri).unwrap();
                (bg, bo, rg, ro)
            });
            for (grid, oracle) in [(&bev_grid, &bev_oracle), (&rv_grid, &rv_oracle)] {
                mismatches += grid.occupied.iter().filter(|&&o| o).count().abs_diff(oracle.len());
                for ((row, col), values) in oracle {
                    mismatches += values.iter().enumerate().filter(|(c, v)| grid.get(*c, *row, *col) != **v).count();
                }
            }
            for i in 0..n {
                for c in 0..4 {
                    let b = bev_cells[i].map_or(0.0, |_| {
                        let (gr, gc) = bev_continuous(cloud.point(i), &bev);
                        grid_bilinear_oracle(&bev_grid.data, bev.rows(), bev.cols(), c, gr, gc, false)
                    });
                    let r = rv_cells[i].map_or(0.0, |(_, (gr, gc))| {
                        grid_bilinear_oracle(&rv_grid.data, rv.rows, rv.cols, c, gr, gc, true)
                    });
                    mismatches += usize::from(bev_out.get(i, c) != b) + usize::from(rv_out.get(i, c) != r);
                }
            }
        }
    }
    let cell = (bev.cell_x() - NUSCENES_CELL).abs() < 1e-12 && (bev.cell_y() - NUSCENES_CELL).abs() < 1e-12;
    outcome(
        mismatches == 0 && cell,
        format!(
            "BEV+RV scatter (max, mean) and gather vs sequential oracles at {THREAD_COUNTS:?} threads: {mismatches} mismatches; \
             nuScenes BEV cell {:.3} m",
            bev.cell_x()
        ),
    )
}

fn ordering() -> Outcome {
    let mut tables = Vec::new();
    let mut slowest = Duration::ZERO;
    for seed in 0..ORDERING_SEEDS {
        let start = Instant::now();
        match single_thread(|| toytrain::ordering_experiment(seed)) {
            Ok(report) => tables.push(report.table),
            Err(e) => return outcome(false, format!("seed {seed} failed: {e}")),
        }
        slowest = slowest.max(start.elapsed());
    }
    let mean = MiouTable::mean(&tables);
    let row = |name: &str, v: &[f64; 4]| {
        println!("    {name:<11} L0 {:.3}  L1 {:.3}  L2 {:.3}  L3 {:.3}", v[0], v[1], v[2], v[3]);
    };
    println!("  mean mIoU over {ORDERING_SEEDS} seeds:");
    row("baseline", &mean.baseline);
    row("da", &mean.da);
    row("kd", &mean.kd);
    row("lidar-only", &mean.lidar_only);
    let b = &mean.baseline;
    let checks = [
        ("a", b[0] >= mean.lidar_only[0] + MARGIN_FUSION_GAIN),
        ("b", b[3] < mean.lidar_only[3]),
        ("c", mean.da[3] >= b[3] + MARGIN_ROBUSTNESS),
        ("d", mean.da[0] < b[0]),
        ("e", mean.kd[0] >= mean.da[0] && mean.kd[3] >= b[3] + MARGIN_ROBUSTNESS),
    ];
    let decreasing = b.windows(2).all(|w| w[0] > w[1]);
    let in_budget = slowest < SEED_BUDGET;
    let summary: Vec<String> = checks.iter().map(|(n, ok)| format!("{n}:{}", if *ok { "ok" } else { "FAIL" })).collect();
    outcome(
        checks.iter().all(|(_, ok)| *ok) && decreasing && in_budget,
        format!(
            "{}; baseline strictly decreasing L0→L3: {decreasing}; slowest seed {:.1} s single-threaded (budget 60 s)",
            summary.join(" "),
            slowest.as_secs_f64()
        ),
    )
}

/// Six cameras at 60° yaw steps around the LiDAR, 1600×896 images.
fn surround_rig() -> CalibrationRig {
    let intr = CameraIntrinsics::pinhole(1266.0, 1266.0, 800.0, 448.0).unwrap();
    let base = Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0);
    let cams = (0..PERF_CAMERAS)
        .map(|i| {
            let yaw = (i as f64 * 60.0).to_radians();
            let (s, c) = yaw.sin_cos();
            let to_body = Matrix3::new(c, s, 0.0, -s, c, 0.0, 0.0, 0.0, 1.0);
            CameraCalib {
                intrinsics: intr,
                extrinsics: Extrinsics::from_parts(base * to_body, Vector3::new(0.0, 0.3, 0.5)).unwrap(),
                width: 1600,
                height: 896,
            }
        })
        .collect();
    CalibrationRig::new(cams).unwrap()
}

fn performance() -> Outcome {
    let mut rng = rng(1008);
    let rig = surround_rig();
    let maps: Vec<FeatureMap> = (0..PERF_CAMERAS as u16).map(|i| random_map(&mut rng, i, PERF_CHANNELS, 112, 200, 8)).collect();
    let xyz: Vec<[f32; 3]> = (0..PERF_POINTS)
        .map(|_| {
            let (r, a): (f32, f32) = (rng.random_range(2.0..50.0), rng.random_range(0.0..std::f32::consts::TAU));
            [r * a.cos(), r * a.sin(), rng.random_range(-2.0..3.0)]
        })
        .collect();
    let cloud = PointCloud::new(xyz, vec![0.0; PERF_POINTS]).unwrap();
    let mut projections = vec![vec![PixelProjection::INVALID; PERF_POINTS]; PERF_CAMERAS];
    let mut out = FeatureMatrix::zeros(0, 0);
    let mut run = || {
        for (cam, buf) in rig.cameras().iter().zip(projections.iter_mut()) {
            project_points_into(&cloud, &cam.intrinsics, &cam.extrinsics, cam.width, cam.height, buf);
        }
        sample_all_cameras_into(&maps, &projections, &mut out).unwrap();
    };
    let mut times = single_thread(|| {
        run();
        (0..7)
            .map(|_| {
                let start = Instant::now();
                run();
                start.elapsed()
            })
            .collect::<Vec<_>>()
    });
    times.sort();
    let median = times[times.len() / 2];
    let visible = projections.iter().flatten().filter(|p| p.valid).count();
    outcome(
        median < PERF_BUDGET,
        format!(
            "{PERF_POINTS} points × {PERF_CAMERAS} cameras × {PERF_CHANNELS} channels ({visible} visible projections): \
             median {:.1} ms single-threaded (budget 100 ms)",
            median.as_secs_f64() * 1e3
        ),
    )
}

fn round_trips() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let path = |name: &str| dir.path().join(name);
    let mut rng = rng(1009);
    let cloud = random_cloud(&mut rng, 1000, 50.0);
    let labels = random_labels(&mut rng, 1000, 16);
    save_cloud(&cloud, Some(&labels), &path("a.flpc")).unwrap();
    let (c2, l2) = load_cloud(&path("a.flpc"), 16).unwrap();
    save_cloud(&c2, l2.as_ref(), &path("b.flpc")).unwrap();
    let same = |a: &str, b: &str| std::fs::read(path(a)).unwrap() == std::fs::read(path(b)).unwrap();
    let cloud_ok = same("a.flpc", "b.flpc") && c2 == cloud && l2.as_ref() == Some(&labels);

    let map = random_map(&mut rng, 2, 16, 20, 30, 8);
    map.save(&path("a.flfm")).unwrap();
    let m2 = FeatureMap::load(&path("a.flfm")).unwrap();
    m2.save(&path("b.flfm")).unwrap();
    let map_ok = same("a.flfm", "b.flfm") && m2 == map;

    let mut model = ToyModel::zeros(toytrain::POINT_DIMS, 2, 4, 4, true);
    model.weights.iter_mut().for_each(|w| *w = rng.random_range(-5.0..5.0));
    model.save(&path("a.flm")).unwrap();
    let md = ToyModel::load(&path("a.flm")).unwrap();
    md.save(&path("b.flm")).unwrap();
    let model_ok = same("a.flm", "b.flm");
    outcome(
        cloud_ok && map_ok && model_ok,
        format!("save→load→save byte-identical: point cloud {cloud_ok}, feature map {map_ok}, model {model_ok}"),
    )
}

type Criterion = (u8, &'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 9] = [
        (1, "geometry oracle suite", geometry),
        (2, "perturbation-level contract", perturbation_levels),
        (3, "sampling oracle suite", sampling),
        (4, "loss gradient suite", losses),
        (5, "metric suite", metrics),
        (6, "grid suite", grids),
        (7, "desk-scale ordering", ordering),
        (8, "performance", performance),
        (9, "format round-trips", round_trips),
    ];
    let mut failed = 0;
    for (id, name, run) in criteria {
        let o = run();
        if !o.passed {
            failed += 1;
        }
        println!("criterion {id} {name}: {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
    }
    println!("acceptance: {}/9 criteria passed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

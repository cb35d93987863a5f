//! Acceptance checks. Prints one `[PASS]`/`[FAIL] criterion N` line per
//! criterion and exits non-zero if any criterion fails.
//!
//! `SWF_ACCEPTANCE_RUNS` overrides the Monte-Carlo run count (default 100)
//! for quick local iterations; the default is the acceptance setting.

use std::process::ExitCode;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use swf_core::alignment::{dense_indirect_inverse, invert_direct, make_direct, make_indirect, Alignment};
use swf_core::evaluation::{aggregate, EpochSummary, McSummary};
use swf_core::experiment::{initial_estimate, run_monte_carlo, run_on_dataset, ExperimentConfig, RunOutput};
use swf_core::filter::{Filter, FeatureTrack, FilterConfig, InitVariant, Mode, Strategy};
use swf_core::geometry::{exp_so3, Rot3, Vec3};
use swf_core::linalg::{pinv_symmetric, principal_angle};
use swf_core::observability::{
    build_aux, build_basis, build_top_blocks, constant_basis, info_nullspace_crosscheck, AuditConfig, InfoPrior,
    Status, StepKind,
};
use swf_core::propagation::{integrate_mean, propagate, ImuSample, NoiseParams};
use swf_core::simulator::Dataset;
use swf_core::state::{boxminus, boxplus, ClonePose, FeatureState, ImuState, SwfState};
use swf_core::vision::{
    camera_point, nullspace_project, point_jacobian, project_pose, split_subsystems, stack_jacobians, triangulate,
    Extrinsics, Obs, PosePair,
};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome { pass, detail: detail.into() }
    }
}

/// Largest absolute entry of `a - b` relative to the scale of `b` (at least 1).
fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1.0)
}

fn rv(rng: &mut ChaCha8Rng, s: f64) -> Vec3 {
    Vec3::new(rng.gen_range(-s..s), rng.gen_range(-s..s), rng.gen_range(-s..s))
}

fn random_imu(rng: &mut ChaCha8Rng) -> ImuState {
    ImuState { rot: exp_so3(&rv(rng, 2.0)), pos: rv(rng, 5.0), vel: rv(rng, 2.0), bg: rv(rng, 0.01), ba: rv(rng, 0.1) }
}

fn clone_pose(rot: Rot3, pos: Vec3, stamp: f64) -> ClonePose {
    ClonePose { rot, pos, stamp, first_rot: None, first_pos: None }
}

fn random_state(rng: &mut ChaCha8Rng, n: usize, m: usize) -> SwfState {
    let mut x = SwfState::new(0.0, random_imu(rng));
    for i in 0..n {
        x.clones.push(clone_pose(exp_so3(&rv(rng, 2.0)), rv(rng, 5.0), i as f64));
    }
    for j in 0..m {
        x.features.push(FeatureState { id: j as u64, pos: rv(rng, 10.0), first_pos: None });
    }
    x
}

/// Small perturbation of every block of `x`.
fn nudge(rng: &mut ChaCha8Rng, x: &SwfState, s: f64) -> SwfState {
    let d = DVector::from_fn(x.dim(), |_, _| rng.gen_range(-s..s));
    boxplus(x, &d).expect("matching dimension")
}

fn random_samples(rng: &mut ChaCha8Rng, n: usize, dt: f64) -> Vec<ImuSample> {
    let w0 = rv(rng, 0.5);
    let a0 = Vec3::new(0.0, 0.0, 9.81) + rv(rng, 2.0);
    (0..n)
        .map(|k| ImuSample { stamp: k as f64 * dt, omega_m: w0 + rv(rng, 0.05), accel_m: a0 + rv(rng, 0.2) })
        .collect()
}

fn spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    &a * a.transpose() / n as f64 + DMatrix::identity(n, n) * 0.1
}

/// A window of `n` clones around a random pose and a point all of them see.
fn window(rng: &mut ChaCha8Rng, ext: &Extrinsics, n: usize) -> (SwfState, Vec3) {
    loop {
        let imu = random_imu(rng);
        let mut x = SwfState::new(0.0, imu);
        for i in 0..n {
            x.clones.push(clone_pose(imu.rot * exp_so3(&rv(rng, 0.05)), imu.pos + rv(rng, 0.4), i as f64));
        }
        let pf = imu.pos + rv(rng, 6.0);
        let ok = x.clones.iter().all(|c| {
            let p = camera_point(&c.rot, &c.pos, ext, &pf);
            p.z > 1.0 && p.x.abs() < p.z && p.y.abs() < p.z
        });
        if ok {
            return (x, pf);
        }
    }
}

fn pose_pairs(x: &SwfState) -> Vec<PosePair> {
    x.clones.iter().map(|c| PosePair { est: (c.rot, c.pos), lin: (c.rot, c.pos) }).collect()
}

fn observations(rng: &mut ChaCha8Rng, x: &SwfState, ext: &Extrinsics, pf: &Vec3, sigma: f64) -> Vec<Obs> {
    (0..x.clones.len())
        .map(|i| {
            let c = &x.clones[i];
            let uv = project_pose(&c.rot, &c.pos, ext, pf).expect("visible")
                + Vector2::new(rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal)) * sigma;
            Obs { clone_index: i, uv, sigma }
        })
        .collect()
}

fn timed(limit_s: f64, f: impl FnOnce() -> Outcome) -> Outcome {
    let t0 = Instant::now();
    let mut o = f();
    let dt = t0.elapsed().as_secs_f64();
    if dt >= limit_s {
        o.pass = false;
    }
    o.detail = format!("{} ({dt:.3} s, limit {limit_s} s)", o.detail);
    o
}

fn criterion_1() -> Outcome {
    let ext = Extrinsics::default();
    let noise = NoiseParams::default();
    let a = timed(1.0, || {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let mut worst = 0.0f64;
        for _ in 0..1000 {
            let imu = random_imu(&mut rng);
            let s = random_samples(&mut rng, 21, 0.005);
            let res = propagate(&imu, &s, 0.005, &noise, None).expect("finite samples");
            let before = build_basis(&SwfState::new(0.0, imu)).n;
            let after = build_basis(&SwfState::new(0.1, res.imu_next)).n;
            let phi = DMatrix::from_column_slice(15, 15, res.phi.as_slice());
            worst = worst.max(rel_err(&(phi * before), &after));
        }
        Outcome::new(worst < 1e-9, format!("a: propagation max err {worst:.2e}"))
    });
    let b = timed(1.0, || {
        let mut rng = ChaCha8Rng::seed_from_u64(102);
        let mut worst = 0.0f64;
        for _ in 0..200 {
            let (mut x, pf) = window(&mut rng, &ext, 5);
            let obs = observations(&mut rng, &x, &ext, &pf, 0.0);
            x.features.push(FeatureState { id: 0, pos: pf, first_pos: None });
            let layout = x.layout();
            let j = stack_jacobians(&pose_pairs(&x), &layout, &ext, &obs, &pf, &pf);
            let mut h = j.hx_dense(layout.dim());
            h.columns_mut(layout.feature_start(0), 3).copy_from(&j.hf);
            let n = build_basis(&x).n;
            worst = worst.max((&h * &n).amax() / (h.amax() * n.amax()));
        }
        Outcome::new(worst < 1e-9, format!("b: SLAM Jacobian max err {worst:.2e}"))
    });
    let c = timed(1.0, || {
        let mut rng = ChaCha8Rng::seed_from_u64(103);
        let mut worst = 0.0f64;
        for _ in 0..200 {
            let (x, pf) = window(&mut rng, &ext, 5);
            let obs = observations(&mut rng, &x, &ext, &pf, 1e-3);
            let pf_hat = triangulate(&x.clones.iter().map(|c| (c.rot, c.pos)).collect::<Vec<_>>(), &ext, &obs)
                .expect("well-posed triangulation");
            let j = stack_jacobians(&pose_pairs(&x), &x.layout(), &ext, &obs, &pf_hat, &pf_hat);
            let sub2 = nullspace_project(&j).expect("full-rank feature block");
            let h2 = sub2.hx_dense(x.dim());
            let n = build_basis(&x).n;
            worst = worst.max((&h2 * &n).amax() / (h2.amax() * n.amax()));
        }
        Outcome::new(worst < 1e-9, format!("c: projected MSCKF rows max err {worst:.2e}"))
    });
    let d = timed(1.0, || {
        let mut rng = ChaCha8Rng::seed_from_u64(104);
        let mut worst = 0.0f64;
        for _ in 0..200 {
            let (x, pf) = window(&mut rng, &ext, 5);
            let obs = observations(&mut rng, &x, &ext, &pf, 1e-3);
            let pf_minus = pf + rv(&mut rng, 0.05);
            let j = stack_jacobians(&pose_pairs(&x), &x.layout(), &ext, &obs, &pf_minus, &pf_minus);
            let (sub1, sub2) = split_subsystems(&j).expect("full-rank feature block");
            let pf_plus = pf_minus + sub1.hf1.try_inverse().expect("invertible") * sub1.r1;
            let mut x_minus = x.clone();
            x_minus.features.push(FeatureState { id: 0, pos: pf_minus, first_pos: None });
            let mut x_plus = x_minus.clone();
            x_plus.features[0].pos = pf_plus;
            // The estimator basis after substep 1 and its separate alignment.
            let mut aligned = build_basis(&x_minus).n;
            Alignment::direct(&x_minus, &x_plus).expect("regular transform").apply_left(&mut aligned);
            let h2 = sub2.hx_dense(x_plus.dim());
            let n_plus = build_basis(&x_plus).n;
            let scale = h2.amax() * n_plus.amax();
            worst = worst.max((&h2 * &n_plus).amax() / scale).max((&h2 * &aligned).amax() / scale);
            worst = worst.max(rel_err(&aligned, &n_plus));
        }
        Outcome::new(worst < 1e-9, format!("d: substep-2 rows after alignment max err {worst:.2e}"))
    });
    let all = [a, b, c, d];
    Outcome::new(all.iter().all(|o| o.pass), all.iter().map(|o| o.detail.as_str()).collect::<Vec<_>>().join("; "))
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(201);
    let mut worst = [0.0f64; 5];
    for k in 0..100 {
        let xm = random_state(&mut rng, 1 + k % 5, k % 7);
        let xp = nudge(&mut rng, &xm, 0.05);
        let (nm, np) = (build_basis(&xm).n, build_basis(&xp).n);
        let t = make_direct(&nm, &np).expect("regular transform");
        worst[0] = worst[0].max(rel_err(&(t.dense() * &np), &nm));
        let tinv = invert_direct(&t).expect("regular transform").dense();
        let dense_inv = t.dense().try_inverse().expect("invertible");
        worst[1] = worst[1].max(rel_err(&tinv, &dense_inv));
        let ti = make_indirect(&xm, &xp).expect("same layout");
        let mut mapped = nm.clone();
        ti.apply_left(&mut mapped);
        worst[2] = worst[2].max(rel_err(&mapped, &np));
        worst[3] = worst[3].max(rel_err(&ti.dense_inverse(), &dense_indirect_inverse(&xm, &xp)));
        worst[4] = worst[4].max(rel_err(&(build_aux(&xm) * &nm), &constant_basis(&xm.layout())));
    }
    let pass = worst.iter().all(|&w| w < 1e-10);
    Outcome::new(
        pass,
        format!(
            "direct T·N⁺=N⁻ {:.1e}, rank-1 inverse {:.1e}, indirect T⁻¹N⁻=N⁺ {:.1e}, factored vs dense {:.1e}, aux·N=N_const {:.1e}",
            worst[0], worst[1], worst[2], worst[3], worst[4]
        ),
    )
}

fn criterion_3() -> Outcome {
    timed(5.0, || {
        let mut cfg = ExperimentConfig::default();
        cfg.sim.duration = 1.0;
        cfg.initial_features = 12;
        let data = Dataset::generate(&cfg.sim, 301).expect("valid config");
        let (x0, p0) = initial_estimate(&cfg, &data).expect("initial estimate");
        let fcfg = FilterConfig {
            mode: Mode::Slam,
            strategy: Strategy::Std,
            max_clones: 2,
            max_slam_features: cfg.initial_features,
            sigma_uv: data.cfg.sigma_uv(),
            extrinsics: data.cfg.extrinsics,
            audit: Some(AuditConfig::default()),
            ..FilterConfig::default()
        };
        let mut f = Filter::new(fcfg, x0, p0).expect("valid filter");
        for k in 0..3 {
            let fr = &data.frames[k];
            if let Err(e) = f.process_frame(fr.stamp, &fr.obs, data.imu_for_frame(k)) {
                return Outcome::new(false, format!("frame {k} failed: {e}"));
            }
        }
        let recs = f.audit_records();
        let timeline: Vec<String> =
            recs.iter().map(|r| format!("{}:{}/{}", r.step, r.status.status, r.status.dim)).collect();
        let slam: Vec<usize> = recs.iter().enumerate().filter(|(_, r)| r.step == StepKind::Slam).map(|(i, _)| i).collect();
        let mut problems = Vec::new();
        if slam.len() < 2 {
            problems.push("fewer than two corrections".to_string());
        } else {
            let (c1, c2) = (&recs[slam[0]], &recs[slam[1]]);
            if !recs[..slam[0]].iter().all(|r| r.status.status == Status::Aligned && r.status.dim == 4) {
                problems.push("not aligned before the first correction".into());
            }
            if !recs[..slam[0]].iter().any(|r| r.step == StepKind::Predict) {
                problems.push("no prediction before the first correction".into());
            }
            if (c1.status.status, c1.status.dim) != (Status::Misaligned, 4) {
                problems.push(format!("first correction gives {}/{}", c1.status.status, c1.status.dim));
            }
            if (c2.status.status, c2.status.dim) != (Status::Mismatched, 3) {
                problems.push(format!("second correction gives {}/{}", c2.status.status, c2.status.dim));
            }
        }
        let mut preserved = 0;
        for w in recs.windows(2) {
            if matches!(w[1].step, StepKind::Augment | StepKind::Marginalize) {
                preserved += 1;
                if (w[0].status.status, w[0].status.dim) != (w[1].status.status, w[1].status.dim) {
                    problems.push(format!("{} changed status", w[1].step));
                }
            }
        }
        if !recs.iter().any(|r| r.step == StepKind::Marginalize) {
            problems.push("no marginalization exercised".into());
        }
        let e = f.estimate();
        let basis = e.auditor.as_ref().expect("audited").basis();
        let np = build_basis(&e.x).n.columns(0, 3).into_owned();
        let angle = principal_angle(basis, &np).unwrap_or(f64::NAN);
        if !(angle < 1e-6) || basis.ncols() != 3 {
            problems.push(format!("surviving span differs from N_p by {angle:.2e}"));
        }
        Outcome::new(
            problems.is_empty(),
            format!(
                "{} | {preserved} augment/marginalize steps; span angle to N_p {angle:.1e}{}",
                timeline.join(" "),
                if problems.is_empty() { String::new() } else { format!(" | {}", problems.join("; ")) }
            ),
        )
    })
}

fn criterion_4() -> Outcome {
    let mut cfg = ExperimentConfig::default();
    cfg.sim.duration = 30.0;
    let data = Dataset::generate(&cfg.sim, 401).expect("valid config");
    let run = |strategy: Strategy| -> Result<(f64, usize, usize), String> {
        let (x0, p0) = initial_estimate(&cfg, &data).map_err(|e| e.to_string())?;
        let fcfg = FilterConfig {
            mode: Mode::Msckf,
            strategy,
            sigma_uv: data.cfg.sigma_uv(),
            extrinsics: data.cfg.extrinsics,
            audit: Some(AuditConfig::default()),
            ..FilterConfig::default()
        };
        let mut f = Filter::new(fcfg, x0, p0).map_err(|e| e.to_string())?;
        let mut worst = 0.0f64;
        let mut dims_ok = 0;
        for k in 0..data.frames.len() {
            let fr = &data.frames[k];
            f.process_frame(fr.stamp, &fr.obs, data.imu_for_frame(k)).map_err(|e| e.to_string())?;
            let e = f.estimate();
            let top = build_top_blocks(&e.x).map_err(|e| e.to_string())?;
            let b = e.auditor.as_ref().expect("audited").basis();
            if b.ncols() == 4 {
                dims_ok += 1;
            }
            worst = worst.max(principal_angle(b, &top).unwrap_or(f64::INFINITY));
        }
        Ok((worst, dims_ok, data.frames.len()))
    };
    let info = match run(Strategy::Std) {
        Ok((angle, dims, n)) => format!("Std for reference: dim 4 at {dims}/{n} epochs, max angle {angle:.1e}"),
        Err(e) => format!("Std for reference failed: {e}"),
    };
    match run(Strategy::UsaDt) {
        Ok((angle, dims, n)) => Outcome::new(
            angle < 1e-6 && dims == n,
            format!("USA-DT MSCKF mode, {n} epochs over 30 s: max angle to top-block basis {angle:.2e}, dim 4 at {dims}/{n}; {info}"),
        ),
        Err(e) => Outcome::new(false, format!("run failed: {e}")),
    }
}

fn criterion_5() -> Outcome {
    let ext = Extrinsics::default();
    let mut rng = ChaCha8Rng::seed_from_u64(501);
    // Delayed initialization through the filter against the information form
    // of the full stacked system with an uninformative feature prior.
    let mut init_worst = 0.0f64;
    for trial in 0..5 {
        let (x, pf) = window(&mut rng, &ext, 4);
        let sigma = 0.01;
        let obs = observations(&mut rng, &x, &ext, &pf, sigma);
        let n = x.dim();
        let p0 = spd(&mut rng, n) * 1e-3;
        let cfg = FilterConfig {
            mode: Mode::Hybrid,
            strategy: Strategy::Std,
            sigma_uv: sigma,
            extrinsics: ext,
            chi2_gate: false,
            init_variant: InitVariant::Separate,
            ..FilterConfig::default()
        };
        let mut f = Filter::new(cfg, x.clone(), p0.clone()).expect("valid filter");
        let mut track = FeatureTrack::new(7);
        track.obs = obs.iter().map(|o| (x.clones[o.clone_index].stamp, o.uv)).collect();
        match f.delayed_init(&[track]) {
            Ok(demoted) if demoted.is_empty() => {}
            other => return Outcome::new(false, format!("trial {trial}: initialization failed: {other:?}")),
        }
        let poses: Vec<(Rot3, Vec3)> = x.clones.iter().map(|c| (c.rot, c.pos)).collect();
        let pf_minus = triangulate(&poses, &ext, &obs).expect("well-posed triangulation");
        let j = stack_jacobians(&pose_pairs(&x), &x.layout(), &ext, &obs, &pf_minus, &pf_minus);
        let mut h = DMatrix::zeros(j.rows(), n + 3);
        h.columns_mut(0, n).copy_from(&j.hx_dense(n));
        h.columns_mut(n, 3).copy_from(&j.hf);
        let mut lam = DMatrix::zeros(n + 3, n + 3);
        lam.view_mut((0, 0), (n, n)).copy_from(&p0.clone().try_inverse().expect("SPD prior"));
        lam += h.transpose() * &h / (sigma * sigma);
        let p_oracle = pinv_symmetric(&lam, 1e-15);
        let dx_oracle = &p_oracle * h.transpose() * &j.resid / (sigma * sigma);
        let e = f.estimate();
        let mut x_lin = x.clone();
        x_lin.features.push(FeatureState { id: 7, pos: pf_minus, first_pos: None });
        let dx = boxminus(&e.x, &x_lin).expect("same layout");
        init_worst = init_worst.max((&e.p - &p_oracle).amax() / p_oracle.amax());
        init_worst = init_worst.max((&dx - &dx_oracle).amax() / dx_oracle.amax().max(1e-12));
    }
    // Sparse covariance transforms against the dense congruence.
    let mut transform_worst = 0.0f64;
    for k in 0..20 {
        let xm = random_state(&mut rng, 2 + k % 2, 4);
        let xp = nudge(&mut rng, &xm, 0.05);
        let p = spd(&mut rng, xm.dim());
        let direct = Alignment::direct(&xm, &xp).expect("regular transform");
        let Alignment::Direct(inv) = &direct else { unreachable!() };
        let td = inv.dense();
        let mut pd = p.clone();
        direct.apply_cov(&mut pd);
        transform_worst = transform_worst.max(rel_err(&pd, &(&td * &p * td.transpose())));
        let indirect = Alignment::indirect(&xm, &xp).expect("same layout");
        let ti = dense_indirect_inverse(&xm, &xp);
        let mut pi = p.clone();
        indirect.apply_cov(&mut pi);
        transform_worst = transform_worst.max(rel_err(&pi, &(&ti * &p * ti.transpose())));
    }
    // Auditor basis against the information-matrix nullspace of the logged run.
    let mut audit_notes = Vec::new();
    let mut audit_ok = true;
    for strategy in [Strategy::Std, Strategy::UsaDt] {
        let mut cfg = ExperimentConfig::default();
        cfg.sim.duration = 2.0;
        cfg.initial_features = 3;
        let data = Dataset::generate(&cfg.sim, 502).expect("valid config");
        let (x0, p0) = initial_estimate(&cfg, &data).expect("initial estimate");
        let dim0 = x0.dim();
        let n0 = build_basis(&x0).n;
        let fcfg = FilterConfig {
            mode: Mode::Hybrid,
            strategy,
            max_clones: 3,
            max_slam_features: 3,
            max_msckf_features: 10,
            sigma_uv: data.cfg.sigma_uv(),
            extrinsics: data.cfg.extrinsics,
            audit: Some(AuditConfig::default()),
            audit_log: true,
            ..FilterConfig::default()
        };
        let mut f = Filter::new(fcfg, x0, p0).expect("valid filter");
        let mut k = 0;
        while f.estimate().auditor.as_ref().and_then(|a| a.log()).map_or(0, |l| l.len()) < 20 && k < data.frames.len() {
            let fr = &data.frames[k];
            if let Err(e) = f.process_frame(fr.stamp, &fr.obs, data.imu_for_frame(k)) {
                return Outcome::new(false, format!("{strategy} audit run failed: {e}"));
            }
            k += 1;
        }
        let e = f.estimate();
        let auditor = e.auditor.as_ref().expect("audited");
        let log = auditor.log().expect("logging enabled");
        let cc = info_nullspace_crosscheck(dim0, &InfoPrior::ComplementOf(n0.clone()), log, 1e-8);
        let angle = principal_angle(auditor.basis(), &cc.basis).unwrap_or(f64::INFINITY);
        let ok = cc.basis.ncols() == auditor.basis().ncols() && angle < 1e-8 && e.x.dim() <= 45;
        audit_ok &= ok;
        audit_notes.push(format!(
            "{strategy}: {} steps, N={}, dim {} vs {}, angle {angle:.1e}",
            log.len(),
            e.x.dim(),
            auditor.basis().ncols(),
            cc.basis.ncols()
        ));
    }
    let pass = init_worst < 1e-8 && transform_worst < 1e-8 && audit_ok;
    Outcome::new(
        pass,
        format!(
            "delayed init vs information form {init_worst:.1e}; sparse vs dense transforms {transform_worst:.1e}; auditor vs information nullspace [{}]",
            audit_notes.join("; ")
        ),
    )
}

struct McResults {
    std2: McSummary,
    it2: McSummary,
    dt2: McSummary,
    dtr2: McSummary,
    fej5: McSummary,
    dtr5: McSummary,
    runs: usize,
    seconds: f64,
}

fn summarize(outs: &[RunOutput]) -> McSummary {
    aggregate(&outs.iter().map(|o| o.metrics.clone()).collect::<Vec<_>>()).expect("non-empty")
}

fn monte_carlo(runs: usize) -> Result<McResults, String> {
    let t0 = Instant::now();
    let mut cfg = ExperimentConfig::default();
    cfg.sim.duration = 60.0;
    let two = run_monte_carlo(&cfg, &[Strategy::Std, Strategy::UsaIt, Strategy::UsaDt, Strategy::UsaDtr], runs, 10_000, None)
        .map_err(|e| e.to_string())?;
    cfg.sim.pixel_sigma = 5.0;
    let five =
        run_monte_carlo(&cfg, &[Strategy::Fej, Strategy::UsaDtr], runs, 20_000, None).map_err(|e| e.to_string())?;
    Ok(McResults {
        std2: summarize(&two[0]),
        it2: summarize(&two[1]),
        dt2: summarize(&two[2]),
        dtr2: summarize(&two[3]),
        fej5: summarize(&five[0]),
        dtr5: summarize(&five[1]),
        runs,
        seconds: t0.elapsed().as_secs_f64(),
    })
}

fn criterion_6(mc: &McResults) -> Outcome {
    let yaw = |e: &EpochSummary| e.yaw_nees;
    let s = &mc.std2;
    let thirds = [s.window_mean(0.0, 1.0 / 3.0, yaw), s.window_mean(1.0 / 3.0, 2.0 / 3.0, yaw), s.window_mean(2.0 / 3.0, 1.0, yaw)];
    let end = s.window_mean(0.95, 1.0, yaw);
    let growing = thirds[0] < thirds[1] && thirds[1] < thirds[2];
    let mut pass = end > 3.0 && growing;
    let mut notes = vec![format!(
        "Std yaw NEES by thirds {:.2}/{:.2}/{:.2}, final 5% {end:.2}",
        thirds[0], thirds[1], thirds[2]
    )];
    for (name, m) in [("USA-IT", &mc.it2), ("USA-DT", &mc.dt2), ("USA-DTR", &mc.dtr2)] {
        let pose = m.window_mean(2.0 / 3.0, 1.0, |e| e.pose_nees);
        pass &= (0.7..=1.5).contains(&pose);
        notes.push(format!("{name} final-third pose NEES {pose:.3}"));
    }
    let failed = [&mc.std2, &mc.it2, &mc.dt2, &mc.dtr2].iter().map(|m| m.failed).sum::<usize>();
    notes.push(format!(
        "{} runs x 60 s, {failed} failed runs, Monte-Carlo wall time {:.0} s on {} thread(s)",
        mc.runs,
        mc.seconds,
        rayon::current_num_threads()
    ));
    Outcome::new(pass, notes.join("; "))
}

fn criterion_7(mc: &McResults) -> Outcome {
    // USA-DTR re-linearizes at a triangulated point whose substep-1 residual
    // is already at the Gauss-Newton optimum, so it can tie USA-DT exactly;
    // a tie within rounding counts as ≤.
    let tie = 1.0 + 1e-9;
    let mut pass = true;
    let mut notes = Vec::new();
    for (label, f) in [
        ("orientation (deg)", (|m: &McSummary| m.ori_rmse_deg) as fn(&McSummary) -> f64),
        ("position (m)", |m: &McSummary| m.pos_rmse_m),
    ] {
        let (std, it, dt, dtr) = (f(&mc.std2), f(&mc.it2), f(&mc.dt2), f(&mc.dtr2));
        let agree = (dt - it).abs() / dt.max(it);
        let ordered = dtr <= dt * tie && agree <= 0.05 && dt < std && it < std;
        let (fej5, dtr5) = (f(&mc.fej5), f(&mc.dtr5));
        let fej_ok = fej5 >= dtr5;
        pass &= ordered && fej_ok;
        let dtr_gap;
        let mut failed: Vec<&str> = Vec::new();
        if dtr > dt * tie {
            dtr_gap = format!("DTR > DT by {:.1e} relative", dtr / dt - 1.0);
            failed.push(&dtr_gap);
        }
        if agree > 0.05 {
            failed.push("DT/IT differ > 5%");
        }
        if !(dt < std && it < std) {
            failed.push("USA not below Std");
        }
        if !fej_ok {
            failed.push("FEJ < DTR at 5 px");
        }
        notes.push(format!(
            "{label}: Std {std:.5} IT {it:.5} DT {dt:.5} DTR {dtr:.5} (DT/IT gap {:.1}%); 5 px FEJ {fej5:.5} vs DTR {dtr5:.5}{}",
            100.0 * agree,
            if failed.is_empty() { String::new() } else { format!(" [{}]", failed.join(", ")) }
        ));
    }
    Outcome::new(pass, notes.join("; "))
}

fn min_time(reps: usize, mut f: impl FnMut()) -> f64 {
    (0..reps)
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_secs_f64()
        })
        .fold(f64::INFINITY, f64::min)
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(801);
    // Sizes around the operating point (11 clones, 40 to 107 features) so
    // both fit the same cache level.
    let mut times = Vec::new();
    for m in [40usize, 107] {
        let xm = random_state(&mut rng, 11, m);
        let xp = nudge(&mut rng, &xm, 0.01);
        let mut p = spd(&mut rng, xm.dim());
        let direct = Alignment::direct(&xm, &xp).expect("regular transform");
        let indirect = Alignment::indirect(&xm, &xp).expect("same layout");
        let td = min_time(60, || direct.apply_cov(&mut p));
        let ti = min_time(60, || indirect.apply_cov(&mut p));
        times.push((xm.dim(), td, ti));
    }
    let rd = times[1].1 / times[0].1;
    let ri = times[1].2 / times[0].2;
    let scaling_ok = (3.0..=5.0).contains(&rd) && (3.0..=5.0).contains(&ri);

    let mut cfg = ExperimentConfig::default();
    cfg.sim.duration = 20.0;
    let data = Dataset::generate(&cfg.sim, 802).expect("valid config");
    let strategies = [Strategy::Std, Strategy::UsaIt, Strategy::UsaDt, Strategy::UsaDtr];
    // Per frame, the fastest of several interleaved repetitions, so that
    // transient load on the machine does not bias one strategy.
    let mut fastest = vec![vec![f64::INFINITY; data.frames.len()]; strategies.len()];
    for _ in 0..5 {
        for (k, &s) in strategies.iter().enumerate() {
            let out = run_on_dataset(&cfg, s, &data, 0);
            for (b, t) in fastest[k].iter_mut().zip(&out.frame_seconds) {
                *b = b.min(*t);
            }
        }
    }
    let best: Vec<f64> = fastest.iter().map(|f| f.iter().sum::<f64>() / f.len().max(1) as f64).collect();
    let overheads: Vec<f64> = best[1..].iter().map(|t| t / best[0] - 1.0).collect();
    let frame_ok = overheads.iter().all(|&o| o < 0.15);
    Outcome::new(
        scaling_ok && frame_ok,
        format!(
            "N {}→{}: direct {:.1}→{:.1} µs (x{rd:.2}), indirect {:.1}→{:.1} µs (x{ri:.2}); per frame Std {:.2} ms, overhead IT {:+.1}% DT {:+.1}% DTR {:+.1}%",
            times[0].0,
            times[1].0,
            times[0].1 * 1e6,
            times[1].1 * 1e6,
            times[0].2 * 1e6,
            times[1].2 * 1e6,
            best[0] * 1e3,
            100.0 * overheads[0],
            100.0 * overheads[1],
            100.0 * overheads[2]
        ),
    )
}

fn criterion_9() -> Outcome {
    let ext = Extrinsics::default();
    let mut rng = ChaCha8Rng::seed_from_u64(901);
    let h = 1e-6;
    let rel = |fd: &DMatrix<f64>, an: &DMatrix<f64>| (fd - an).norm() / an.norm().max(1e-8);
    let mut worst_point = 0.0f64;
    for _ in 0..100 {
        let (x, pf) = window(&mut rng, &ext, 1);
        let c = &x.clones[0];
        let (r, p) = (c.rot, c.pos);
        let jac = point_jacobian(&r, &p, &ext, &pf).expect("visible");
        let mut fd = [DMatrix::zeros(2, 3), DMatrix::zeros(2, 3), DMatrix::zeros(2, 3)];
        for k in 0..3 {
            let mut e = Vec3::zeros();
            e[k] = h;
            let proj = |r: &Rot3, p: &Vec3, f: &Vec3| project_pose(r, p, &ext, f).expect("visible");
            fd[0].set_column(k, &((proj(&(r * exp_so3(&e)), &p, &pf) - proj(&(r * exp_so3(&-e)), &p, &pf)) / (2.0 * h)));
            fd[1].set_column(k, &((proj(&r, &(p + e), &pf) - proj(&r, &(p - e), &pf)) / (2.0 * h)));
            fd[2].set_column(k, &((proj(&r, &p, &(pf + e)) - proj(&r, &p, &(pf - e))) / (2.0 * h)));
        }
        let an = [jac.d_theta, jac.d_pos, jac.d_feat].map(|m| DMatrix::from_column_slice(2, 3, m.as_slice()));
        for (f, a) in fd.iter().zip(&an) {
            worst_point = worst_point.max(rel(f, a));
        }
    }
    // Stacked Jacobians over the full error state, IMU columns included.
    let mut worst_stack = 0.0f64;
    for _ in 0..20 {
        let (mut x, pf) = window(&mut rng, &ext, 4);
        let obs = observations(&mut rng, &x, &ext, &pf, 0.01);
        x.features.push(FeatureState { id: 0, pos: pf + rv(&mut rng, 0.05), first_pos: None });
        let layout = x.layout();
        let resid = |x: &SwfState| {
            let f = x.features[0].pos;
            stack_jacobians(&pose_pairs(x), &layout, &ext, &obs, &f, &f)
        };
        let j = resid(&x);
        let mut an = j.hx_dense(layout.dim());
        an.columns_mut(layout.feature_start(0), 3).copy_from(&j.hf);
        let mut fd = DMatrix::zeros(j.rows(), layout.dim());
        for col in 0..layout.dim() {
            let mut d = DVector::zeros(layout.dim());
            d[col] = h;
            let rp = resid(&boxplus(&x, &d).expect("dimension")).resid;
            let rm = resid(&boxplus(&x, &-d).expect("dimension")).resid;
            // The residual is z − h(x), so its derivative is −H.
            fd.set_column(col, &(-(rp - rm) / (2.0 * h)));
        }
        worst_stack = worst_stack.max(rel(&fd, &an));
    }
    // Transition columns for orientation, position and velocity against the
    // integrator.
    let mut worst_phi = 0.0f64;
    let noise = NoiseParams::default();
    for _ in 0..100 {
        let imu = random_imu(&mut rng);
        let s = random_samples(&mut rng, 21, 0.005);
        let res = propagate(&imu, &s, 0.005, &noise, None).expect("finite samples");
        for col in 0..9 {
            let mut dp = [0.0; 15];
            let mut dm = [0.0; 15];
            dp[col] = h;
            dm[col] = -h;
            let ep = integrate_mean(&imu.boxplus(&dp), &s, 0.005).expect("finite").boxminus(&res.imu_next);
            let em = integrate_mean(&imu.boxplus(&dm), &s, 0.005).expect("finite").boxminus(&res.imu_next);
            let fd = DMatrix::from_fn(15, 1, |row, _| (ep[row] - em[row]) / (2.0 * h));
            let an = DMatrix::from_fn(15, 1, |row, _| res.phi[(row, col)]);
            worst_phi = worst_phi.max(rel(&fd, &an));
        }
    }
    Outcome::new(
        worst_point < 1e-5 && worst_stack < 1e-5 && worst_phi < 1e-4,
        format!(
            "point Jacobians (100 geometries) {worst_point:.1e}; stacked state Jacobians {worst_stack:.1e}; Φ θ/p/v columns {worst_phi:.1e}"
        ),
    )
}

fn report(n: usize, o: &Outcome) -> bool {
    println!("[{}] criterion {n}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    o.pass
}

fn main() -> ExitCode {
    let runs = std::env::var("SWF_ACCEPTANCE_RUNS").ok().and_then(|v| v.parse().ok()).unwrap_or(100);
    let mut ok = true;
    ok &= report(1, &criterion_1());
    ok &= report(2, &criterion_2());
    ok &= report(3, &criterion_3());
    ok &= report(4, &criterion_4());
    ok &= report(5, &criterion_5());
    // Timings are taken before the long Monte-Carlo batches so they are not
    // skewed by the state the machine is left in afterwards.
    let timing = criterion_8();
    match monte_carlo(runs) {
        Ok(mc) => {
            ok &= report(6, &criterion_6(&mc));
            ok &= report(7, &criterion_7(&mc));
        }
        Err(e) => {
            ok &= report(6, &Outcome::new(false, format!("Monte-Carlo run failed: {e}")));
            ok &= report(7, &Outcome::new(false, "no Monte-Carlo results"));
        }
    }
    ok &= report(8, &timing);
    ok &= report(9, &criterion_9());
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

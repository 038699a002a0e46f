//! Acceptance criteria, run in sequence on one thread so wall-clock budgets
//! are measured without interference. Prints one PASS/FAIL line per
//! criterion and exits non-zero if any fails.
//!
//! `cargo test --test acceptance -- 3 5` runs only criteria 3 and 5.

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, Matrix3, Rotation3, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use tepose::commands::{read_predictions, PredictionLine};
use tepose::config::RunConfig;
use tepose::dataset::VideoRecord;
use tepose::dataset::{load_video, Record};
use tepose::discriminator::{Discriminator, MotionLabel, MotionSample};
use tepose::gcn::GraphSeq;
use tepose::gradcheck::{run_all, GradcheckConfig};
use tepose::graph::{hop_distance, k_adjacency, normalize_adjacency, SkeletonGraph};
use tepose::kinematics::KinematicModel;
use tepose::loader::{current_frame, LoaderConfig, LoaderState, ParamSource, PredictionCache};
use tepose::losses::{
    adversarial_loss, discriminator_loss, discriminator_loss_grad, total_loss, LossTerms, LossWeights, SupervisionFlags,
};
use tepose::metrics::{accel_error, mpjpe, pa_mpjpe, JointSequence};
use tepose::optim::Adam;
use tepose::param_vector::PARAM_DIM;
use tepose::params::Parameters;
use tepose::synth::{build_dataset, generate_motion, MotionClass, MotionGenConfig};
use tepose::train::Trainer;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

type Criterion = fn() -> Result<Outcome, String>;

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// 1. graph operators against brute force

fn random_graph(rng: &mut ChaCha8Rng) -> SkeletonGraph {
    let n = rng.gen_range(1..=8);
    let p: f64 = rng.gen_range(0.1..0.7);
    let mut edges = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            if rng.gen::<f64>() < p {
                edges.push((a, b));
            }
        }
    }
    SkeletonGraph::new(n, edges).expect("valid random graph")
}

/// Floyd-Warshall over the edge list.
fn shortest_paths(g: &SkeletonGraph) -> Vec<Vec<Option<usize>>> {
    let n = g.num_joints();
    let inf = usize::MAX / 4;
    let mut d = vec![vec![inf; n]; n];
    for (i, row) in d.iter_mut().enumerate() {
        row[i] = 0;
    }
    for &(a, b) in g.edges() {
        d[a][b] = 1;
        d[b][a] = 1;
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if d[i][k] + d[k][j] < d[i][j] {
                    d[i][j] = d[i][k] + d[k][j];
                }
            }
        }
    }
    d.into_iter()
        .map(|r| r.into_iter().map(|v| (v < inf).then_some(v)).collect())
        .collect()
}

fn adjacency_oracles() -> Result<Outcome, String> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut mismatches = 0;
    for _ in 0..50 {
        let g = random_graph(&mut rng);
        let n = g.num_joints();
        let fw = shortest_paths(&g);
        let d = hop_distance(&g);
        for (i, row) in fw.iter().enumerate() {
            for (j, want) in row.iter().enumerate() {
                if d.get(i, j) != *want {
                    mismatches += 1;
                }
            }
        }
        for k in 0..=5 {
            let want = DMatrix::from_fn(n, n, |i, j| if i == j || fw[i][j] == Some(k) { 1.0 } else { 0.0 });
            let a = k_adjacency(&d, k);
            if a != want {
                mismatches += 1;
            }
            let degree: Vec<usize> = (0..n)
                .map(|i| (0..n).filter(|&j| want[(i, j)] == 1.0).count())
                .collect();
            let dinv = DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 / (degree[i] as f64).sqrt() } else { 0.0 });
            let mut left = DMatrix::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    left[(i, j)] = dinv[(i, i)] * want[(i, j)];
                }
            }
            let mut oracle = DMatrix::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    oracle[(i, j)] = left[(i, j)] * dinv[(j, j)];
                }
            }
            if normalize_adjacency(&a).map_err(err)? != oracle {
                mismatches += 1;
            }
        }
    }
    let t = start.elapsed();
    Ok(outcome(
        mismatches == 0 && t < Duration::from_secs(5),
        format!("50 graphs, {mismatches} mismatches, {:.2}s (< 5s)", t.as_secs_f64()),
    ))
}

// 2. finite-difference gradient suite

fn gradient_suite() -> Result<Outcome, String> {
    let start = Instant::now();
    let cfg = GradcheckConfig::default();
    let report = run_all(&cfg).map_err(err)?;
    let t = start.elapsed();
    let required = [
        "msgcn",
        "msg3d",
        "gcn_block",
        "discriminator",
        "gru_step",
        "gru_sequence",
        "regressor_identity",
        "regressor_relu",
        "fk_joints",
        "project_2d",
        "loss_3d",
        "loss_2d",
        "loss_smpl",
        "adversarial_loss",
        "discriminator_loss",
    ];
    let missing: Vec<&str> = required
        .iter()
        .copied()
        .filter(|n| !report.results.iter().any(|r| r.name == *n))
        .collect();
    let worst = report.results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let small_tol = report.results.iter().all(|r| r.tolerance <= 1e-5 && r.instances >= 20);
    let failed: Vec<&str> = report
        .results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.name.as_str())
        .collect();
    Ok(outcome(
        report.passed() && missing.is_empty() && small_tol && t < Duration::from_secs(120),
        format!(
            "{} suites, worst rel err {worst:.2e}, failed {failed:?}, missing {missing:?}, {:.1}s (< 120s)",
            report.results.len(),
            t.as_secs_f64()
        ),
    ))
}

// 3. metric properties

fn random_frames(rng: &mut ChaCha8Rng, frames: usize, n: usize, scale: f64) -> Vec<DMatrix<f64>> {
    (0..frames)
        .map(|_| DMatrix::from_fn(n, 3, |_, _| scale * rng.sample::<f64, _>(StandardNormal)))
        .collect()
}

fn metric_properties() -> Result<Outcome, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut notes = Vec::new();
    let mut pass = true;

    let mut violations = 0;
    for _ in 0..100 {
        let gt = random_frames(&mut rng, 4, 14, 300.0);
        let pred = random_frames(&mut rng, 4, 14, 300.0);
        let (p, g) = (
            JointSequence::new(pred, 0).map_err(err)?,
            JointSequence::new(gt, 0).map_err(err)?,
        );
        if pa_mpjpe(&p, &g).map_err(err)? > mpjpe(&p, &g).map_err(err)? {
            violations += 1;
        }
    }
    pass &= violations == 0;
    notes.push(format!("pa<=mpjpe violations {violations}/100"));

    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let gt = random_frames(&mut rng, 3, 14, 300.0);
        let axis = Vector3::from_fn(|_, _| rng.gen_range(-3.0..3.0));
        let r: Matrix3<f64> = Rotation3::new(axis).into_inner();
        let s = rng.gen_range(0.2..5.0);
        let c = Vector3::from_fn(|_, _| rng.gen_range(-1000.0..1000.0));
        let rt = DMatrix::from_iterator(3, 3, r.transpose().iter().copied());
        let pred: Vec<_> = gt
            .iter()
            .map(|f| {
                let mut out = (f * &rt) * s;
                for mut row in out.row_iter_mut() {
                    row += c.transpose();
                }
                out
            })
            .collect();
        let e = pa_mpjpe(
            &JointSequence::new(pred, 0).map_err(err)?,
            &JointSequence::new(gt, 0).map_err(err)?,
        )
        .map_err(err)?;
        worst = worst.max(e);
    }
    pass &= worst < 1e-8;
    notes.push(format!("similarity pa {worst:.1e}mm"));

    let mut worst_acc: f64 = 0.0;
    for _ in 0..100 {
        let start = random_frames(&mut rng, 2, 14, 300.0);
        let vel = random_frames(&mut rng, 2, 14, 20.0);
        let line = |k: usize| -> Vec<DMatrix<f64>> { (0..8).map(|t| &start[k] + &vel[k] * t as f64).collect() };
        let a = accel_error(
            &JointSequence::new(line(0), 0).map_err(err)?,
            &JointSequence::new(line(1), 0).map_err(err)?,
        )
        .map_err(err)?;
        worst_acc = worst_acc.max(a);
    }
    // linear motion in floating point leaves only rounding in the second difference
    pass &= worst_acc < 1e-9;
    notes.push(format!("constant-velocity accel {worst_acc:.1e}"));

    let gt = JointSequence::new(vec![DMatrix::zeros(2, 3)], 0).map_err(err)?;
    let pred =
        JointSequence::new(vec![DMatrix::from_row_slice(2, 3, &[0.0, 0.0, 0.0, 3.0, 4.0, 0.0])], 0).map_err(err)?;
    let m = mpjpe(&pred, &gt).map_err(err)?;
    pass &= m == 2.5;
    let zeros = JointSequence::new(vec![DMatrix::zeros(1, 3); 3], 0).map_err(err)?;
    // root is the only joint, so give the sequence a fixed second root joint
    let with = |x: f64| DMatrix::from_row_slice(2, 3, &[0.0, 0.0, 0.0, x, 0.0, 0.0]);
    let p3 = JointSequence::new(vec![with(0.0), with(0.0), with(1.0)], 0).map_err(err)?;
    let g3 = JointSequence::new(vec![with(0.0); 3], 0).map_err(err)?;
    let acc = accel_error(&p3, &g3).map_err(err)?;
    let single = accel_error(
        &JointSequence::new(
            vec![
                DMatrix::zeros(1, 3),
                DMatrix::zeros(1, 3),
                DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]),
            ],
            0,
        )
        .map_err(err)?,
        &zeros,
    )
    .map_err(err)?;
    notes.push(format!(
        "worked {m} mm, accel {single} (root joint) / {acc} (2 joints, mean)"
    ));
    pass &= single == 1.0;
    pass &= acc == 0.5;
    Ok(outcome(pass, notes.join(", ")))
}

// 4. loss gating and worked values

fn loss_gating() -> Result<Outcome, String> {
    let w = LossWeights::default();
    let terms = LossTerms {
        l2d: 0.7,
        l3d: Some(1.3),
        l_theta: Some(2.9),
        l_adv: Some(5.3),
    };
    let mut pass = true;
    let mut got = Vec::new();
    for (has_3d, has_smpl, want) in [
        (false, false, 0.7 + 5.3),
        (true, false, 0.7 + 1.3 + 5.3),
        (false, true, 0.7 + 2.9),
        (true, true, 0.7 + 1.3 + 2.9),
    ] {
        let b = total_loss(terms, SupervisionFlags { has_3d, has_smpl }, &w).map_err(err)?;
        pass &= b.total == want;
        got.push(b.total);
    }
    // missing label for an active indicator is an error
    pass &= total_loss(
        LossTerms { l3d: None, ..terms },
        SupervisionFlags {
            has_3d: true,
            has_smpl: false,
        },
        &w,
    )
    .is_err();
    let worked = [
        adversarial_loss(1.0),
        adversarial_loss(0.0),
        adversarial_loss(0.25),
        discriminator_loss(&[0.0, 0.0], &[1.0, 1.0]).map_err(err)?,
        discriminator_loss(&[0.8, 0.6], &[0.3]).map_err(err)?,
    ];
    let expect = [0.0, 1.0, 0.5625, 2.0, 0.19];
    let worked_ok = worked == expect;
    pass &= worked_ok && discriminator_loss(&[1.0; 3], &[0.0; 2]).map_err(err)? == 0.0;
    Ok(outcome(pass, format!("totals {got:?}, worked {worked:?}")))
}

// 5. loader schedule

fn toy_video(id: &str, len: usize, labelled: bool) -> VideoRecord {
    VideoRecord {
        id: id.into(),
        static_feats: vec![vec![0.0; 2]; len],
        gt_params: labelled.then(|| vec![tepose::param_vector::ParamVector::zeros(); len]),
        gt_joints3d: None,
        gt_joints2d: vec![DMatrix::zeros(3, 2); len],
        flags: SupervisionFlags::default(),
    }
}

fn filled_cache(videos: &[VideoRecord]) -> PredictionCache {
    let mut c = PredictionCache::new();
    for (i, v) in videos.iter().enumerate() {
        for t in 0..v.len() {
            c.write(i, t, tepose::param_vector::ParamVector::zeros(), 0);
        }
    }
    c
}

fn loader_schedule() -> Result<Outcome, String> {
    let mut notes = Vec::new();
    let (h, past) = (40usize, 5usize);

    let cfg = LoaderConfig {
        past,
        max_len: h,
        batch: 16,
        ..Default::default()
    };
    let mut st = LoaderState::new(cfg.clone(), ChaCha8Rng::seed_from_u64(0)).map_err(err)?;
    let mut schedule_ok = true;
    for j in 0..=2 * h as u64 {
        let want = ((j % h as u64) as usize).max(past);
        schedule_ok &= st.current_frame() == want && current_frame(j, h, past) == want;
        st.advance();
    }
    notes.push(format!(
        "schedule 0..=2H {}",
        if schedule_ok { "exact" } else { "wrong" }
    ));

    // pool A long, pool B all shorter than the frame: every B draw is squeezed out
    let videos = vec![
        toy_video("long", 40, true),
        toy_video("s1", 12, false),
        toy_video("s2", 15, false),
    ];
    let cache = filled_cache(&videos);
    let mut st = LoaderState::new(cfg.clone(), ChaCha8Rng::seed_from_u64(1)).map_err(err)?;
    st.iteration = 20;
    let plan = st.assemble_batch(&videos, &[0], &[1, 2], &cache).map_err(err)?;
    let short_drawn = plan.sampled - plan.items.iter().filter(|i| i.video == 0).count();
    let squeeze_ok = plan.items.len() == 16 - 10 && plan.items.len() == plan.sampled - short_drawn;
    // frame 13: only s1 is short
    st.iteration = 13;
    let mut mixed_ok = true;
    for _ in 0..50 {
        let plan = st.assemble_batch(&videos, &[0], &[1, 2], &cache).map_err(err)?;
        let kept_s2 = plan.items.iter().filter(|i| i.video == 2).count();
        let kept_long = plan.items.iter().filter(|i| i.video == 0).count();
        mixed_ok &= kept_long == 6 && plan.items.iter().all(|i| i.video != 1) && plan.dropped == 10 - kept_s2;
    }
    notes.push(format!(
        "squeeze {}",
        if squeeze_ok && mixed_ok { "exact" } else { "wrong" }
    ));

    // gamma over 10,000 per-frame draws on a labelled video
    let gcfg = LoaderConfig {
        past,
        max_len: 100,
        batch: 2000,
        ratio_3d: 1.0,
        ..Default::default()
    };
    let gv = vec![toy_video("g", 100, true)];
    let gcache = filled_cache(&gv);
    let mut st = LoaderState::new(gcfg, ChaCha8Rng::seed_from_u64(2)).map_err(err)?;
    st.iteration = 50;
    let plan = st.assemble_batch(&gv, &[0], &[], &gcache).map_err(err)?;
    let draws: Vec<ParamSource> = plan.items.iter().flat_map(|i| i.sources.clone()).collect();
    let rate = draws.iter().filter(|s| **s == ParamSource::Predicted).count() as f64 / draws.len() as f64;
    let gamma_ok = draws.len() == 10_000 && (rate - 0.9).abs() <= 0.02;
    notes.push(format!("predicted rate {rate:.4} over {}", draws.len()));

    let causal = causality_over_epoch().map_err(err)?;
    notes.push(format!("causality {}", if causal.0 { "holds" } else { "violated" }));
    notes.push(causal.1);
    Ok(outcome(
        schedule_ok && squeeze_ok && mixed_ok && gamma_ok && causal.0,
        notes.join(", "),
    ))
}

/// Runs one training epoch and checks every cache read and write: reads at
/// iteration j touch only frames before the current frame, and each stored
/// prediction for frame f was written while the schedule stood at f.
fn causality_over_epoch() -> tepose::Result<(bool, String)> {
    let mut cfg = RunConfig::desk();
    cfg.synth.train_3d = 6;
    cfg.synth.train_2d = 6;
    cfg.synth.test = 1;
    cfg.synth.real = 2;
    cfg.synth.length = (20, 40);
    cfg.loader.max_len = 40;
    cfg.loader.batch = 6;
    cfg.loader.epoch_fraction = 1.0;
    cfg.predictor.hidden = 16;
    cfg.predictor.regressor_width = 16;
    cfg.train.adversarial = false;
    cfg.train.eval_every_epochs = 0;
    let data = build_dataset(&cfg.synth, &KinematicModel::default_body())?;
    let mut trainer = Trainer::new(cfg.clone(), &data)?;
    let past = cfg.loader.past;
    let h = cfg.loader.max_len;
    let mut ok = true;
    let mut reads = 0;
    for _ in 0..h {
        let j = trainer.iteration();
        let frame = current_frame(j, h, past);
        let log = trainer.step()?;
        ok &= log.frame == frame;
        for (_, f, stamp, _) in trainer.cache.entries() {
            if f >= past {
                ok &= current_frame(stamp, h, past) == f && stamp <= j;
            }
            ok &= f <= frame;
            reads += 1;
        }
    }
    Ok((ok, format!("{reads} cache entries checked")))
}

// 6. discriminator separability

fn motion_windows(
    class: MotionClass,
    videos: usize,
    per_video: usize,
    window: usize,
    seed: u64,
) -> tepose::Result<Vec<Vec<GraphSeq>>> {
    let body = KinematicModel::default_body();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for v in 0..videos {
        let cfg = MotionGenConfig {
            seed: rng.gen(),
            length: 3 * window,
            class,
            ..Default::default()
        };
        let (rec, _) = generate_motion(&cfg, &body, &format!("m{v}"))?;
        let joints = rec.gt_joints3d.expect("labelled");
        let mut starts: Vec<usize> = (0..=joints.len() - window).collect();
        starts.shuffle(&mut rng);
        let mut ws = Vec::new();
        for &s in starts.iter().take(per_video) {
            ws.push(MotionSample::from_joints(&joints[s..s + window], body.root(), MotionLabel::Real)?.skeleton);
        }
        out.push(ws);
    }
    Ok(out)
}

fn accuracy(d: &Discriminator, smooth: &[GraphSeq], jerky: &[GraphSeq]) -> tepose::Result<f64> {
    let mut right = 0;
    for x in smooth {
        right += (d.forward(x)?.0 > 0.5) as usize;
    }
    for x in jerky {
        right += (d.forward(x)?.0 <= 0.5) as usize;
    }
    Ok(right as f64 / (smooth.len() + jerky.len()) as f64)
}

fn discriminator_separability() -> Result<Outcome, String> {
    let start = Instant::now();
    let run = || -> tepose::Result<(f64, usize)> {
        let window = RunConfig::desk().loader.past + 1;
        // one window per video so no clip appears on both sides of the split
        let smooth = motion_windows(MotionClass::Smooth, 500, 1, window, 100)?;
        let jerky = motion_windows(MotionClass::Jerky, 500, 1, window, 200)?;
        let split = |v: &[Vec<GraphSeq>]| -> (Vec<GraphSeq>, Vec<GraphSeq>) { (v[..400].concat(), v[400..].concat()) };
        let (s_train, s_test) = split(&smooth);
        let (j_train, j_test) = split(&jerky);
        let body = KinematicModel::default_body();
        let cfg = RunConfig::desk().discriminator;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut d = Discriminator::new(&mut rng, body.skeleton(), cfg)?;
        let mut opt = Adam::new(&d.params, 3e-3);
        let batch = 16;
        let mut order_s: Vec<usize> = (0..s_train.len()).collect();
        let mut order_j: Vec<usize> = (0..j_train.len()).collect();
        let mut steps = 0;
        for _epoch in 0..50 {
            order_s.shuffle(&mut rng);
            order_j.shuffle(&mut rng);
            for (bs, bj) in order_s.chunks(batch).zip(order_j.chunks(batch)) {
                let real: Vec<_> = bs
                    .iter()
                    .map(|&i| d.forward(&s_train[i]))
                    .collect::<tepose::Result<_>>()?;
                let fake: Vec<_> = bj
                    .iter()
                    .map(|&i| d.forward(&j_train[i]))
                    .collect::<tepose::Result<_>>()?;
                let rs: Vec<f64> = real.iter().map(|r| r.0).collect();
                let fs: Vec<f64> = fake.iter().map(|r| r.0).collect();
                let (dr, df) = discriminator_loss_grad(&rs, &fs)?;
                let mut grads = d.params.zeros_like();
                for ((_, c), g) in real.iter().zip(&dr).chain(fake.iter().zip(&df)) {
                    grads.accumulate(&d.backward(c, *g)?.1);
                }
                opt.update(&mut d.params, &grads)?;
                steps += 1;
            }
        }
        Ok((accuracy(&d, &s_test, &j_test)?, steps))
    };
    let (acc, steps) = run().map_err(err)?;
    let t = start.elapsed();
    Ok(outcome(
        acc >= 0.95 && t < Duration::from_secs(300),
        format!(
            "held-out accuracy {:.1}% after {steps} steps, {:.1}s (< 300s)",
            100.0 * acc,
            t.as_secs_f64()
        ),
    ))
}

// 7. end-to-end toy training

fn end_to_end_training() -> Result<Outcome, String> {
    let start = Instant::now();
    let cfg = RunConfig::desk();
    let spec_ok = cfg.synth.features.dim == 64
        && cfg.predictor.hidden == 128
        && cfg.loader.past + 1 == 6
        && cfg.loader.gamma == 0.9
        && cfg.loader.batch == 16
        && cfg.train.iterations == 2000
        && KinematicModel::default_body().num_joints() == 14;
    let data = build_dataset(&cfg.synth, &KinematicModel::default_body()).map_err(err)?;
    let mut trainer = Trainer::new(cfg.clone(), &data).map_err(err)?;
    let before = trainer.evaluate_test().map_err(err)?;
    trainer.run(cfg.train.iterations).map_err(err)?;
    let after = trainer.evaluate_test().map_err(err)?;
    let t = start.elapsed();
    let ratio = after.mpjpe / before.mpjpe;
    Ok(outcome(
        spec_ok && ratio <= 0.5 && t < Duration::from_secs(1800),
        format!(
            "test mpjpe {:.1} -> {:.1} mm (ratio {ratio:.3} <= 0.5), {:.0}s (< 1800s)",
            before.mpjpe,
            after.mpjpe,
            t.as_secs_f64()
        ),
    ))
}

// 8. ablation direction

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    v[v.len() / 2]
}

/// Trains one variant per seed and returns test (mpjpe, accel) per seed.
fn ablation_runs(variant: &[&str]) -> tepose::Result<Vec<(f64, f64)>> {
    let base = ablation_config();
    let mut out = Vec::new();
    for seed in 0..5u64 {
        let mut over: Vec<String> = variant.iter().map(|s| s.to_string()).collect();
        over.push(format!("seed={seed}"));
        let cfg = base.with_overrides(&over)?;
        let data = build_dataset(&cfg.synth, &KinematicModel::default_body())?;
        let mut t = Trainer::new(cfg.clone(), &data)?;
        t.run(cfg.train.iterations)?;
        let r = t.evaluate_test()?;
        out.push((r.mpjpe, r.accel));
    }
    Ok(out)
}

/// Shorter schedule shared by every ablation variant.
fn ablation_config() -> RunConfig {
    let mut c = RunConfig::desk();
    c.train.iterations = 2000;
    c.train.adversarial = false;
    // stronger per-video bias makes past parameters worth reading
    c.synth.features.bias = 0.05;
    // constant learning rate so no variant is cut short by an early decay
    c.train.plateau_patience = 100;
    c
}

fn ablation_direction() -> Result<Outcome, String> {
    let start = Instant::now();
    let bias = ablation_config().synth.features.bias;
    let full = ablation_runs(&[]).map_err(err)?;
    let no_feedback = ablation_runs(&["predictor.feedback=false"]).map_err(err)?;
    let single = ablation_runs(&["predictor.two_gru=false"]).map_err(err)?;
    let m = |r: &[(f64, f64)]| {
        (
            median(r.iter().map(|x| x.0).collect()),
            median(r.iter().map(|x| x.1).collect()),
        )
    };
    let (fm, fa) = m(&full);
    let (nm, na) = m(&no_feedback);
    let (sm, sa) = m(&single);
    let feedback_ok = fm < nm && fa < na;
    let two_gru_ok = fm < sm;
    Ok(outcome(
        bias > 0.0 && feedback_ok && two_gru_ok,
        format!(
            "median mpjpe/accel: feedback {fm:.1}/{fa:.2}, no feedback {nm:.1}/{na:.2}, single GRU {sm:.1}/{sa:.2}; {:.0}s",
            start.elapsed().as_secs_f64()
        ),
    ))
}

// 9. streaming equivalence through the command-line binary

fn tepose(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_tepose"))
        .args(args)
        .output()
        .map_err(err)?;
    if !out.status.success() {
        return Err(format!(
            "tepose {args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn same_bits(a: &[PredictionLine], b: &[PredictionLine]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.video == y.video
                && x.frame == y.frame
                && x.params.len() == y.params.len()
                && x.params.iter().zip(&y.params).all(|(p, q)| p.to_bits() == q.to_bits())
        })
}

fn streaming_equivalence() -> Result<Outcome, String> {
    let dir = tempfile::tempdir().map_err(err)?;
    let p = |s: &str| dir.path().join(s).display().to_string();
    let small = [
        "--set",
        "synth.train_3d=6",
        "--set",
        "synth.train_2d=6",
        "--set",
        "synth.test=3",
        "--set",
        "synth.real=4",
    ];
    let data_dir = p("data");
    let mut args = vec!["synth", "--out", data_dir.as_str()];
    args.extend(small);
    tepose(&args)?;
    let run_dir = p("run");
    tepose(&[
        "train",
        "--data",
        &data_dir,
        "--out",
        &run_dir,
        "--set",
        "train.iterations=30",
        "--set",
        "predictor.hidden=32",
        "--set",
        "predictor.regressor_width=32",
    ])?;
    let ck = p("run/checkpoint.tpck");
    tepose(&["eval", "--checkpoint", &ck, "--data", &data_dir, "--out", &p("eval")])?;
    let offline = read_predictions(&dir.path().join("eval/predictions.jsonl")).map_err(err)?;

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("data/dataset.json")).map_err(err)?)
            .map_err(err)?;
    let test_ids: Vec<String> = manifest["splits"]["test"]
        .as_array()
        .ok_or("manifest without test split")?
        .iter()
        .filter_map(|v| v.as_str().map(String::from))
        .collect();
    let mut equal = true;
    let mut frames = 0;
    for id in &test_ids {
        let out = p(&format!("infer_{id}.jsonl"));
        tepose(&[
            "infer",
            "--checkpoint",
            &ck,
            "--input",
            &p(&format!("data/videos/{id}.json")),
            "--out",
            &out,
        ])?;
        let live = read_predictions(Path::new(&out)).map_err(err)?;
        let want: Vec<PredictionLine> = offline.iter().filter(|l| &l.video == id).cloned().collect();
        equal &= !want.is_empty() && same_bits(&live, &want);
        frames += live.len();
    }

    // prefix of a stream versus the whole stream, fed as raw feature records
    let video = load_video(&dir.path().join(format!("data/videos/{}.json", test_ids[0]))).map_err(err)?;
    let past = RunConfig::desk().loader.past;
    let gt = video.gt_params.as_ref().ok_or("test video without parameters")?;
    Record::new(
        vec![past, PARAM_DIM],
        gt[..past].iter().flat_map(|x| x.as_slice().to_vec()).collect(),
    )
    .and_then(|r| r.save(&dir.path().join("warm.bin")))
    .map_err(err)?;
    let f = video.feature_dim();
    let cut = past + 12;
    for (name, n) in [("prefix.bin", cut), ("full.bin", video.len())] {
        Record::new(vec![n, f], video.static_feats[..n].concat())
            .and_then(|r| r.save(&dir.path().join(name)))
            .map_err(err)?;
    }
    let run_stream = |name: &str| -> Result<Vec<PredictionLine>, String> {
        let out = tepose(&[
            "infer",
            "--checkpoint",
            &ck,
            "--input",
            &p(name),
            "--warm",
            &p("warm.bin"),
        ])?;
        out.lines().map(|l| serde_json::from_str(l).map_err(err)).collect()
    };
    let prefix = run_stream("prefix.bin")?;
    let full = run_stream("full.bin")?;
    let strip = |v: &[PredictionLine]| -> Vec<PredictionLine> {
        v.iter()
            .map(|l| PredictionLine {
                video: String::new(),
                ..l.clone()
            })
            .collect()
    };
    let append_ok = prefix.len() == cut - past && same_bits(&strip(&prefix), &strip(&full[..prefix.len()]));
    let want: Vec<PredictionLine> = offline.iter().filter(|l| l.video == test_ids[0]).cloned().collect();
    let raw_ok = same_bits(&strip(&full), &strip(&want));
    Ok(outcome(
        equal && append_ok && raw_ok,
        format!(
            "{} videos / {frames} frames bitwise {}, appended frames {}, raw stream {}",
            test_ids.len(),
            if equal { "equal" } else { "DIFFER" },
            if append_ok { "invariant" } else { "CHANGE OUTPUT" },
            if raw_ok { "equal" } else { "DIFFERS" }
        ),
    ))
}

fn main() {
    let criteria: [(u8, &str, Criterion); 9] = [
        (1, "adjacency oracle equivalence", adjacency_oracles),
        (2, "gradient suite", gradient_suite),
        (3, "metric properties", metric_properties),
        (4, "loss gating", loss_gating),
        (5, "loader schedule", loader_schedule),
        (6, "discriminator separability", discriminator_separability),
        (7, "end-to-end toy training", end_to_end_training),
        (8, "ablation direction", ablation_direction),
        (9, "streaming equivalence", streaming_equivalence),
    ];
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        for (n, name, _) in &criteria {
            println!("criterion_{n}_{}: test", name.replace([' ', '-'], "_"));
        }
        return;
    }
    let wanted: Vec<u8> = args.iter().filter_map(|a| a.parse().ok()).collect();
    let mut failed = Vec::new();
    for (n, name, f) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f));
        let (pass, detail) = match result {
            Ok(Ok(o)) => (o.pass, o.detail),
            Ok(Err(e)) => (false, format!("error: {e}")),
            Err(_) => (false, "panicked".to_string()),
        };
        println!(
            "criterion {n} [{name}]: {} ({detail}) [{:.1}s]",
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
        std::io::stdout().flush().ok();
        if !pass {
            failed.push(n);
        }
    }
    if !failed.is_empty() {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
    println!("acceptance: all selected criteria passed");
}

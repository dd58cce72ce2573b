//! Acceptance suite. Prints one PASS/FAIL line per criterion and fails if
//! any criterion fails.
//!
//! Everything runs inside a single test so the timed training run does not
//! share the CPU with other tests of this binary.

use std::io::Write;
use std::time::{Duration, Instant};

use evreloc_core::autodiff::{grad_check_report, Tensor};
use evreloc_core::eval::{evaluate, quaternion_angle_deg, robustness_experiment, summarize, DEFAULT_FRACTIONS};
use evreloc_core::event_image::{build_image, select_fraction};
use evreloc_core::event_io::{split_novel, split_random, window_events, Event, EventWindow, PoseLabel};
use evreloc_core::model::{forward_tape, lstm_step, pose_loss_tape, LstmParams, LstmState};
use evreloc_core::pipeline::{load_checkpoint, save_checkpoint, train_with, Checkpoint, SplitKind, TrainConfig};
use evreloc_core::synth::{generate, SceneConfig};
use evreloc_core::{ModelConfig, ModelParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], a: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-a..a)).collect()).unwrap()
}

// ---------------------------------------------------------------- 1

fn full_network_gradient() -> Outcome {
    let cfg = ModelConfig::toy();
    let mut params = ModelParams::init(&cfg, 5).map_err(|e| e.to_string())?;
    // zero biases would put relus and pooling windows on ties
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for t in params.tensors.iter_mut() {
        if t.data().iter().all(|&v| v == 0.0) {
            for v in t.data_mut() {
                *v = rng.random_range(-0.1..0.1);
            }
        }
    }
    let mut events: Vec<Event> = (0..16)
        .map(|i| {
            Event::new(
                i as f64 * 1e-4,
                rng.random_range(0..8),
                rng.random_range(0..8),
                if i % 2 == 0 { 1 } else { -1 },
            )
        })
        .collect();
    events.sort_by(|a, b| a.t.total_cmp(&b.t));
    let image = build_image(&events, 8, 8).map_err(|e| e.to_string())?;
    let label = PoseLabel {
        t: 0.0,
        p: [0.2, -0.4, 0.6],
        q: [0.0, 0.6, 0.0, 0.8],
    };
    let start = Instant::now();
    let report = grad_check_report(
        |t, v| {
            let out = forward_tape(t, v, &cfg, &image, true, 13)?;
            pose_loss_tape(t, out, &label)
        },
        &params.tensors,
        1e-4,
    )
    .map_err(|e| e.to_string())?;
    let took = start.elapsed();
    check(
        report.max_relative_error < 1e-3 && took < Duration::from_secs(60),
        format!(
            "max relative error {:.2e} over {} coordinates in {took:.1?}",
            report.max_relative_error, report.coordinates
        ),
    )
}

// ---------------------------------------------------------------- 2

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Explicit index loops, no tape and no matrix helpers.
fn lstm_oracle(x: &[f64], h: &[f64], c: &[f64], p: &LstmParams) -> (Vec<f64>, Vec<f64>) {
    let n = h.len();
    let mut z = [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    for g in 0..4 {
        let (wx, wh, b) = (p.w_x[g].data(), p.w_h[g].data(), p.b[g].data());
        for r in 0..n {
            let mut s = b[r];
            for k in 0..x.len() {
                s += wx[r * x.len() + k] * x[k];
            }
            for k in 0..n {
                s += wh[r * n + k] * h[k];
            }
            z[g][r] = s;
        }
    }
    let mut h2 = vec![0.0; n];
    let mut c2 = vec![0.0; n];
    for r in 0..n {
        let (i, f, o, g) = (sigmoid(z[0][r]), sigmoid(z[1][r]), sigmoid(z[2][r]), z[3][r].tanh());
        c2[r] = f * c[r] + i * g;
        h2[r] = o * c2[r].tanh();
    }
    (h2, c2)
}

fn lstm_step_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (input, hidden) = (8, 8);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let mut p = LstmParams::zeros(input, hidden);
        for g in 0..4 {
            p.w_x[g] = uniform(&mut rng, &[hidden, input], 1.0);
            p.w_h[g] = uniform(&mut rng, &[hidden, hidden], 1.0);
            p.b[g] = uniform(&mut rng, &[hidden, 1], 1.0);
        }
        let x: Vec<f64> = (0..input).map(|_| rng.random_range(-2.0..2.0)).collect();
        let state = LstmState {
            h: (0..hidden).map(|_| rng.random_range(-1.0..1.0)).collect(),
            c: (0..hidden).map(|_| rng.random_range(-3.0..3.0)).collect(),
        };
        let got = lstm_step(&x, &state, &p.view()).map_err(|e| e.to_string())?;
        let (h, c) = lstm_oracle(&x, &state.h, &state.c, &p);
        for (a, b) in got.h.iter().zip(&h).chain(got.c.iter().zip(&c)) {
            worst = worst.max((a - b).abs());
        }
    }
    check(worst <= 1e-12, format!("max abs difference {worst:.1e} over 100 cases"))
}

// ---------------------------------------------------------------- 3

fn image_oracle(events: &[Event], h: usize, w: usize) -> Vec<f64> {
    (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            match events.iter().rposition(|e| e.x as usize == x && e.y as usize == y) {
                Some(k) if events[k].rho > 0 => 1.0,
                Some(_) => 0.0,
                None => 0.5,
            }
        })
        .collect()
}

fn event_image_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..1000 {
        let h = rng.random_range(1..24);
        let w = rng.random_range(1..24);
        let n = rng.random_range(0..200);
        let mut t = 0.0;
        let events: Vec<Event> = (0..n)
            .map(|_| {
                // repeated timestamps are allowed
                if rng.random_bool(0.8) {
                    t += rng.random_range(0.0..1e-3);
                }
                let rho = if rng.random::<bool>() { 1 } else { -1 };
                Event::new(t, rng.random_range(0..w as u32), rng.random_range(0..h as u32), rho)
            })
            .collect();
        let img = build_image(&events, h, w).map_err(|e| e.to_string())?;
        let want = image_oracle(&events, h, w);
        for (i, &v) in want.iter().enumerate() {
            let got = img.get(i / w, i % w);
            if got != v {
                return Err(format!("case {case}: pixel {i} is {got}, oracle {v}"));
            }
            if ![0.0, 0.5, 1.0].contains(&got) {
                return Err(format!("case {case}: value {got} outside {{0, 0.5, 1}}"));
            }
        }
    }
    Ok("1000 random windows identical to the oracle".into())
}

// ---------------------------------------------------------------- 4

fn table_average() -> Outcome {
    let pos = [0.025, 0.036, 0.035, 0.031, 0.051, 0.036];
    let ori = [2.256, 2.195, 2.117, 2.047, 3.354, 2.074];
    let p = summarize(&pos).map_err(|e| e.to_string())?.mean;
    let o = summarize(&ori).map_err(|e| e.to_string())?.mean;
    // the orientation mean sits exactly on the rounding boundary
    let tol = 0.0005 + 1e-12;
    check(
        (p - 0.036).abs() <= tol && (o - 2.341).abs() <= tol,
        format!("average {p:.6} m, {o:.6} deg"),
    )
}

// ---------------------------------------------------------------- 5

struct Overfit {
    checkpoint: Checkpoint,
    train: Vec<EventWindow>,
    test: Vec<EventWindow>,
    windows: usize,
    took: Duration,
}

fn overfit_config() -> TrainConfig {
    TrainConfig {
        model: ModelConfig {
            dropout_rate: 0.0,
            ..ModelConfig::desk()
        },
        lr: 3e-3,
        momentum: 0.9,
        weight_decay: 1e-6,
        epochs: 200,
        batch_size: 1,
        seed: 0,
        split: SplitKind::Random,
        train_fraction: 0.7,
    }
}

fn run_overfit() -> Result<Overfit, String> {
    let scene = SceneConfig {
        rate_hz: 200.0,
        duration: 2.0,
        seed: 7,
        ..SceneConfig::default()
    };
    let data = generate(&scene).map_err(|e| e.to_string())?;
    let windows = window_events(&data.events, &data.poses)
        .map_err(|e| e.to_string())?
        .windows;
    let cfg = overfit_config();
    let (train, test) = cfg.split_windows(&windows).map_err(|e| e.to_string())?;
    let start = Instant::now();
    let checkpoint = train_with(&cfg, &train, |_, _| {}).map_err(|e| e.to_string())?;
    Ok(Overfit {
        checkpoint,
        train,
        test,
        windows: windows.len(),
        took: start.elapsed(),
    })
}

fn overfit_criterion(run: &Overfit) -> Outcome {
    let losses = &run.checkpoint.loss_history;
    let (first, last) = (losses[0], *losses.last().unwrap());
    let rep = evaluate(&run.checkpoint.params, &run.train).map_err(|e| e.to_string())?;
    check(
        run.windows >= 64
            && losses.len() == 200
            && last < 0.1 * first
            && rep.position.median < 0.05
            && rep.orientation.median < 5.0
            && run.took < Duration::from_secs(15 * 60),
        format!(
            "{} windows, {} train; loss {first:.4} -> {last:.4} ({:.1}%); medians {:.4} m, {:.3} deg; {:.1?}",
            run.windows,
            run.train.len(),
            100.0 * last / first,
            rep.position.median,
            rep.orientation.median,
            run.took
        ),
    )
}

// ---------------------------------------------------------------- 6

fn split_contracts() -> Outcome {
    for n in [3usize, 10, 101] {
        let items: Vec<usize> = (0..n).collect();
        for f in [0.34, 0.5, 0.7, 0.9] {
            let want = (f * n as f64).floor() as usize;
            let a = split_random(&items, f, 42).map_err(|e| e.to_string())?;
            let b = split_random(&items, f, 42).map_err(|e| e.to_string())?;
            if format!("{a:?}") != format!("{b:?}") {
                return Err(format!("N={n} f={f}: split_random not reproducible"));
            }
            let (train, test) = a;
            if train.len() != want || train.len() + test.len() != n {
                return Err(format!("N={n} f={f}: {} train, {} test", train.len(), test.len()));
            }
            let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
            all.sort_unstable();
            if all != items || !train.is_sorted() || !test.is_sorted() {
                return Err(format!("N={n} f={f}: not an order-preserving partition"));
            }
            let (pre, post) = split_novel(&items, f).map_err(|e| e.to_string())?;
            if pre != items[..want] || post != items[want..] {
                return Err(format!("N={n} f={f}: split_novel is not a prefix split"));
            }
        }
    }
    Ok("N in {3, 10, 101}, four fractions each".into())
}

// ---------------------------------------------------------------- 7

fn robustness(run: &Overfit) -> Outcome {
    let params = &run.checkpoint.params;
    let table = robustness_experiment(params, &run.test, &DEFAULT_FRACTIONS).map_err(|e| e.to_string())?;
    let full = evaluate(params, &run.test).map_err(|e| e.to_string())?;
    let last = table.rows.last().ok_or("empty table")?;
    let same = last.fraction == 1.0
        && last.position_median == full.position.median
        && last.orientation_median == full.orientation.median;
    for w in &run.test {
        for pair in DEFAULT_FRACTIONS.windows(2) {
            let small = select_fraction(w, pair[0]).map_err(|e| e.to_string())?;
            let large = select_fraction(w, pair[1]).map_err(|e| e.to_string())?;
            if !large.ends_with(small) {
                return Err(format!(
                    "window {}: fraction {} is not a suffix of {}",
                    w.sequence_index, pair[0], pair[1]
                ));
            }
        }
    }
    check(
        table.rows.len() == 10 && same,
        format!(
            "{} rows on {} test windows; medians at 10%: {:.4} m, {:.3} deg; at 100%: {:.4} m, {:.3} deg",
            table.rows.len(),
            run.test.len(),
            table.rows[0].position_median,
            table.rows[0].orientation_median,
            last.position_median,
            last.orientation_median
        ),
    )
}

// ---------------------------------------------------------------- 8

fn random_unit_quaternion(rng: &mut ChaCha8Rng) -> [f64; 4] {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.1 && n <= 1.0 {
            return q.map(|v| v / n);
        }
    }
}

fn rotation_matrix(q: &[f64; 4]) -> [[f64; 3]; 3] {
    let [x, y, z, w] = *q;
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - z * w),
            2.0 * (x * z + y * w),
        ],
        [
            2.0 * (x * y + z * w),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - x * w),
        ],
        [
            2.0 * (x * z - y * w),
            2.0 * (y * z + x * w),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

/// Angle of `R_a^T R_b` from its trace.
fn matrix_angle_deg(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let (ra, rb) = (rotation_matrix(a), rotation_matrix(b));
    let mut trace = 0.0;
    for i in 0..3 {
        for k in 0..3 {
            trace += ra[k][i] * rb[k][i];
        }
    }
    ((trace - 1.0) / 2.0).clamp(-1.0, 1.0).acos().to_degrees()
}

fn hamilton(a: &[f64; 4], b: &[f64; 4]) -> [f64; 4] {
    let [ax, ay, az, aw] = *a;
    let [bx, by, bz, bw] = *b;
    [
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
        aw * bw - ax * bx - ay * by - az * bz,
    ]
}

fn metric_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..1000 {
        let q = random_unit_quaternion(&mut rng);
        let r = random_unit_quaternion(&mut rng);
        let neg = q.map(|v| -v);
        let zero = quaternion_angle_deg(&q, &neg).map_err(|e| e.to_string())?;
        let e = quaternion_angle_deg(&q, &r).map_err(|e| e.to_string())?;
        if zero != 0.0 || !(0.0..=180.0).contains(&e) {
            return Err(format!("q={q:?} r={r:?}: e(q,-q)={zero}, e(q,r)={e}"));
        }
    }
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let base = random_unit_quaternion(&mut rng);
        let axis = random_unit_quaternion(&mut rng);
        let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        let s = std::f64::consts::FRAC_PI_4.sin();
        let quarter = [
            s * axis[0] / n,
            s * axis[1] / n,
            s * axis[2] / n,
            std::f64::consts::FRAC_PI_4.cos(),
        ];
        let turned = hamilton(&base, &quarter);
        let got = quaternion_angle_deg(&base, &turned).map_err(|e| e.to_string())?;
        let oracle = matrix_angle_deg(&base, &turned);
        worst = worst.max((got - oracle).abs()).max((got - 90.0).abs());
    }
    check(
        worst <= 1e-9,
        format!("1000 random pairs in range; 90 deg cases within {worst:.1e} deg of the matrix oracle"),
    )
}

// ---------------------------------------------------------------- 9

fn checkpoint_round_trip(run: &Overfit) -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("overfit.ckpt");
    save_checkpoint(&run.checkpoint, &path).map_err(|e| e.to_string())?;
    let loaded = load_checkpoint(&path).map_err(|e| e.to_string())?;
    let before = evaluate(&run.checkpoint.params, &run.test).map_err(|e| e.to_string())?;
    let after = evaluate(&loaded.params, &run.test).map_err(|e| e.to_string())?;
    let bits = |r: &evreloc_core::EvalReport| -> Vec<(u64, u64)> {
        r.per_sample
            .iter()
            .map(|s| (s.position.to_bits(), s.orientation.to_bits()))
            .collect()
    };
    check(
        bits(&before) == bits(&after) && before == after,
        format!(
            "{} per-sample errors bit-identical after reload",
            before.per_sample.len()
        ),
    )
}

#[test]
fn acceptance() {
    // the stdout handle is not captured by the test harness, so these
    // lines show up in plain `cargo test` output
    let say = |line: String| {
        let mut out = std::io::stdout().lock();
        let _ = writeln!(out, "{line}");
        let _ = out.flush();
    };
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |id: usize, name: &'static str, outcome: Outcome| {
        match &outcome {
            Ok(d) => say(format!("PASS {id} {name}: {d}")),
            Err(d) => say(format!("FAIL {id} {name}: {d}")),
        }
        results.push((id, name, outcome));
    };

    record(1, "full-network gradient check", full_network_gradient());
    record(2, "lstm_step scalar oracle", lstm_step_oracle());
    record(3, "event image oracle", event_image_oracle());
    record(4, "results table aggregation", table_average());
    match run_overfit() {
        Ok(run) => {
            record(5, "end-to-end overfit", overfit_criterion(&run));
            record(6, "split contracts", split_contracts());
            record(7, "robustness harness", robustness(&run));
            record(8, "metric properties", metric_properties());
            record(9, "checkpoint round-trip", checkpoint_round_trip(&run));
        }
        Err(e) => {
            record(5, "end-to-end overfit", Err(e.clone()));
            record(6, "split contracts", split_contracts());
            record(7, "robustness harness", Err(format!("no overfit model: {e}")));
            record(8, "metric properties", metric_properties());
            record(9, "checkpoint round-trip", Err(format!("no overfit model: {e}")));
        }
    }

    let failed: Vec<String> = results
        .iter()
        .filter(|r| r.2.is_err())
        .map(|r| format!("{} {}", r.0, r.1))
        .collect();
    say(format!(
        "acceptance: {}/{} passed",
        results.len() - failed.len(),
        results.len()
    ));
    assert!(failed.is_empty(), "failed criteria: {}", failed.join(", "));
}
